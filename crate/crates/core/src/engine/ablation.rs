use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::SceneInputs;
use super::train::{build_dataset, class_names, evaluate, train, MetricRecord, TrainState};
use crate::aclf::FusionMode;
use crate::harness::{degrade, Degradation, DegradeConfig};
use crate::{Error, Real, Result};

/// One configuration of the matrix: overrides applied to the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldfa: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ebfs: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_gaussians: Option<usize>,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            fusion: None,
            ldfa: None,
            ebfs: None,
            head: None,
            num_gaussians: None,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if let Some(m) = self.fusion {
            cfg.fusion.mode = m;
        }
        if let Some(on) = self.ldfa {
            cfg.ldfa.enabled = on;
        }
        if let Some(on) = self.ebfs {
            cfg.ebfs.enabled = on;
        }
        if let Some(on) = self.head {
            cfg.head.enabled = on;
        }
        if let Some(n) = self.num_gaussians {
            cfg.num_gaussians = n;
        }
        cfg
    }
}

/// The matrix: every variant is trained once per seed. A seed fixes both the
/// scenes and the initialization, so variants are compared on equal terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub variants: Vec<Variant>,
    /// Variants additionally evaluated on night-degraded eval scenes.
    #[serde(default)]
    pub night: Vec<String>,
    #[serde(default = "one")]
    pub night_severity: Real,
}

fn one() -> Real {
    1.0
}

impl Default for AblationSpec {
    fn default() -> Self {
        let with = |name: &str, f: &dyn Fn(&mut Variant)| {
            let mut v = Variant::named(name);
            f(&mut v);
            v
        };
        Self {
            seeds: (0..10).collect(),
            steps: 1000,
            variants: vec![
                Variant::named("aclf"),
                with("add", &|v| v.fusion = Some(FusionMode::Add)),
                with("concat", &|v| v.fusion = Some(FusionMode::Concat)),
                with("no-ldfa", &|v| v.ldfa = Some(false)),
                with("no-ebfs", &|v| v.ebfs = Some(false)),
                with("no-head", &|v| v.head = Some(false)),
                with("gaussians-256", &|v| v.num_gaussians = Some(256)),
            ],
            night: vec!["aclf".into(), "add".into()],
            night_severity: 1.0,
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("ablation needs seeds and variants".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::Config(format!("duplicate variant {:?}", v.name)));
            }
        }
        if let Some(n) = self.night.iter().find(|n| self.variant(n).is_none()) {
            return Err(Error::Config(format!(
                "night variant {n:?} is not in the matrix"
            )));
        }
        if !(0.0..=1.0).contains(&self.night_severity) {
            return Err(Error::Config("night_severity must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// One trained (variant, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub record: MetricRecord,
    /// mIoU on the night-degraded eval scenes, when requested.
    pub night_miou: Option<Real>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: AblationSpec,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates one variant on one seed.
pub fn run_cell(
    spec: &AblationSpec,
    base: &ModelConfig,
    variant: &Variant,
    seed: u64,
) -> Result<AblationRow> {
    let mut cfg = variant.apply(base);
    cfg.seed = seed;
    cfg.optim.steps = spec.steps;
    cfg.validate()?;
    let data = build_dataset(&cfg)?;
    let mut state = TrainState::new(&cfg)?;
    train(&mut state, &cfg, &data.train, spec.steps)?;
    let report = evaluate(&state.model, &cfg, &data.eval)?;
    let night_miou = if spec.night.contains(&variant.name) {
        let degraded = data
            .eval_scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d = degrade(
                    s,
                    Degradation::Night,
                    spec.night_severity,
                    &DegradeConfig::default(),
                    seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                )?;
                SceneInputs::from_scene(&d, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(evaluate(&state.model, &cfg, &degraded)?.miou)
    } else {
        None
    };
    Ok(AblationRow {
        variant: variant.name.clone(),
        seed,
        record: MetricRecord::new(&cfg, &report, state.step, None),
        night_miou,
    })
}

/// Runs the whole matrix, seed-major. `progress` sees each row as it lands.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &ModelConfig,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.seeds.len() * spec.variants.len());
    for &seed in &spec.seeds {
        for v in &spec.variants {
            let row = run_cell(spec, base, v, seed)?;
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationReport {
        spec: spec.clone(),
        rows,
    })
}

/// One-sided sign test: the probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are dropped before calling.
pub fn sign_test(wins: usize, losses: usize) -> Real {
    let n = wins + losses;
    let mut p = 0.0;
    let mut c: Real = 1.0;
    for k in 0..=n {
        if k >= wins {
            p += c;
        }
        c = c * (n - k) as Real / (k + 1) as Real;
    }
    p / (2.0 as Real).powi(n as i32)
}

/// Paired comparison of two variants across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub mean_a: Real,
    pub mean_b: Real,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: Real,
}

impl AblationReport {
    pub fn row(&self, variant: &str, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn mious(&self, variant: &str) -> Vec<Real> {
        self.spec
            .seeds
            .iter()
            .filter_map(|&s| self.row(variant, s))
            .map(|r| r.record.miou)
            .collect()
    }

    pub fn mean_miou(&self, variant: &str) -> Real {
        mean(&self.mious(variant))
    }

    /// Per-seed clean minus night mIoU.
    pub fn night_drops(&self, variant: &str) -> Vec<Real> {
        self.spec
            .seeds
            .iter()
            .filter_map(|&s| self.row(variant, s))
            .filter_map(|r| Some(r.record.miou - r.night_miou?))
            .collect()
    }

    /// Pairs `a[i]` with `b[i]` and counts seeds where `a` is strictly larger.
    pub fn compare(a: &[Real], b: &[Real]) -> Comparison {
        let (mut wins, mut losses, mut ties) = (0, 0, 0);
        for (x, y) in a.iter().zip(b) {
            match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Greater) => wins += 1,
                Some(std::cmp::Ordering::Less) => losses += 1,
                _ => ties += 1,
            }
        }
        Comparison {
            mean_a: mean(a),
            mean_b: mean(b),
            wins,
            losses,
            ties,
            p_value: sign_test(wins, losses),
        }
    }

    pub fn to_json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
            .collect()
    }
}

fn mean(v: &[Real]) -> Real {
    if v.is_empty() {
        return Real::NAN;
    }
    v.iter().sum::<Real>() / v.len() as Real
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.rows.first().map(|r| r.record.per_class_iou.len());
        let classes = class_names(names.map_or(0, |n| n + 1));
        write!(f, "{:<16}", "variant")?;
        for name in classes.iter().skip(1) {
            write!(f, " {name:>9}")?;
        }
        writeln!(f, " {:>9} {:>9}", "mIoU", "night")?;
        for v in &self.spec.variants {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.variant == v.name).collect();
            if rows.is_empty() {
                continue;
            }
            write!(f, "{:<16}", v.name)?;
            for k in 0..rows[0].record.per_class_iou.len() {
                let vals: Vec<Real> = rows
                    .iter()
                    .filter_map(|r| r.record.per_class_iou[k])
                    .collect();
                write!(f, " {:>9.4}", mean(&vals))?;
            }
            write!(f, " {:>9.4}", self.mean_miou(&v.name))?;
            let night: Vec<Real> = rows.iter().filter_map(|r| r.night_miou).collect();
            if night.is_empty() {
                writeln!(f, " {:>9}", "-")?;
            } else {
                writeln!(f, " {:>9.4}", mean(&night))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_binomial_tails() {
        assert_eq!(sign_test(0, 0), 1.0);
        assert!((sign_test(10, 0) - 1.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test(9, 1) - 11.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test(8, 2) - 56.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test(0, 5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn default_matrix_covers_every_comparison() {
        let spec = AblationSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.variants.len(), 7);
        let base = ModelConfig::default();
        for v in &spec.variants {
            v.apply(&base).validate().unwrap();
        }
        assert_eq!(
            spec.variant("gaussians-256")
                .unwrap()
                .apply(&base)
                .num_gaussians,
            256
        );
    }

    #[test]
    fn duplicate_or_unknown_variants_are_rejected() {
        let mut spec = AblationSpec::default();
        spec.night.push("missing".into());
        assert!(spec.validate().is_err());
        let mut spec = AblationSpec::default();
        spec.variants.push(Variant::named("aclf"));
        assert!(spec.validate().is_err());
    }

    fn tiny_spec() -> (AblationSpec, ModelConfig) {
        let mut spec = AblationSpec::default();
        spec.seeds = vec![3];
        spec.steps = 2;
        spec.variants.truncate(2);
        spec.variants.push(Variant {
            num_gaussians: Some(32),
            ..Variant::named("gaussians-32")
        });
        (spec, ModelConfig::small())
    }

    #[test]
    fn identical_cells_give_identical_rows() {
        let (spec, base) = tiny_spec();
        let a = run_cell(&spec, &base, &spec.variants[0], 3).unwrap();
        let b = run_cell(&spec, &base, &spec.variants[0], 3).unwrap();
        assert_eq!(a, b);
        assert!(a.night_miou.is_some());
    }

    #[test]
    fn report_has_a_row_per_cell_and_density() {
        let (spec, base) = tiny_spec();
        let mut seen = 0;
        let report = run_ablation(&spec, &base, |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(report.rows.len(), 3);
        assert!(report.row("gaussians-32", 3).is_some());
        assert!(report.row("aclf", 3).is_some());
        let table = report.to_string();
        assert!(table.contains("gaussians-32") && table.contains("mIoU"));
        assert_eq!(report.to_json_lines().lines().count(), 3);
    }
}
