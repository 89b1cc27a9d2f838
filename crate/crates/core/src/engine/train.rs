use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{backward, forward, Model, SceneInputs};
use super::optim::{cosine_lr, AdamW};
use crate::harness::{generate_scene, random_layout, SyntheticScene, CLASS_NAMES};
use crate::losses::{total_loss_with_grad, LossValue, MetricReport};
use crate::{Error, Mode, Real, Result, Rng};

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optim: AdamW,
    pub step: u64,
    pub rng: Rng,
}

const TAG_TRAIN: u64 = 0x7A1;
const TAG_TRAIN_SCENES: u64 = 0xDA7A;
const TAG_EVAL_SCENES: u64 = 0xE7A1;

impl TrainState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        Ok(Self {
            optim: AdamW::new(&model),
            model,
            step: 0,
            rng: Rng::new(cfg.seed).split(TAG_TRAIN),
        })
    }
}

/// Display names of the classes: the synthetic set when it fits, else
/// `class<k>`.
pub fn class_names(num_classes: usize) -> Vec<String> {
    if num_classes == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|k| format!("class{k}")).collect()
    }
}

/// Training and evaluation scenes derived from the config seed.
pub struct Dataset {
    pub train: Vec<SceneInputs>,
    pub eval_scenes: Vec<SyntheticScene>,
    pub eval: Vec<SceneInputs>,
}

/// Which half of the synthetic data a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// The synthetic scenes of one split, `train_scenes` or `eval_scenes` random
/// layouts. The splits draw from disjoint seed streams.
pub fn synthetic_scenes(cfg: &ModelConfig, split: Split) -> Result<Vec<SyntheticScene>> {
    let (tag, count) = match split {
        Split::Train => (TAG_TRAIN_SCENES, cfg.data.train_scenes),
        Split::Eval => (TAG_EVAL_SCENES, cfg.data.eval_scenes),
    };
    let root = Rng::new(cfg.seed).split(tag);
    (0..count as u64)
        .map(|i| {
            let mut rng = root.split(i);
            let spec = random_layout(&cfg.data.layout, &mut rng)?;
            generate_scene(&spec, rng.below(u32::MAX as usize) as u64)
        })
        .collect()
}

pub fn prepare_scenes(cfg: &ModelConfig, scenes: &[SyntheticScene]) -> Result<Vec<SceneInputs>> {
    scenes
        .iter()
        .map(|s| SceneInputs::from_scene(s, cfg))
        .collect()
}

impl Dataset {
    pub fn from_scenes(
        cfg: &ModelConfig,
        train: &[SyntheticScene],
        eval_scenes: Vec<SyntheticScene>,
    ) -> Result<Self> {
        Ok(Self {
            train: prepare_scenes(cfg, train)?,
            eval: prepare_scenes(cfg, &eval_scenes)?,
            eval_scenes,
        })
    }
}

/// The synthetic dataset of a config.
pub fn build_dataset(cfg: &ModelConfig) -> Result<Dataset> {
    Dataset::from_scenes(
        cfg,
        &synthetic_scenes(cfg, Split::Train)?,
        synthetic_scenes(cfg, Split::Eval)?,
    )
}

/// One optimizer step on one scene.
pub fn train_step(
    state: &mut TrainState,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
) -> Result<LossValue> {
    let (grid, cache) = forward(&state.model, cfg, inputs, Mode::Train, &mut state.rng)?;
    let (loss, dlogits) =
        total_loss_with_grad(&grid.logits, cfg.num_classes, &inputs.labels, cfg.loss)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}", state.step)));
    }
    let grad = backward(&state.model, cfg, inputs, &cache, &dlogits);
    let lr = cosine_lr(&cfg.optim, state.step);
    state.optim.step(&mut state.model, &grad, &cfg.optim, lr)?;
    state.step += 1;
    Ok(loss)
}

/// Runs `steps` steps, drawing one training scene per step. Returns the
/// per-step total losses.
pub fn train(
    state: &mut TrainState,
    cfg: &ModelConfig,
    train: &[SceneInputs],
    steps: u64,
) -> Result<Vec<Real>> {
    if train.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    let mut losses = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let idx = state.rng.below(train.len());
        losses.push(train_step(state, cfg, &train[idx])?.total);
    }
    Ok(losses)
}

/// Label grid predicted for one scene.
pub fn predict_labels(model: &Model, cfg: &ModelConfig, inputs: &SceneInputs) -> Result<Vec<u16>> {
    let (grid, _) = forward(model, cfg, inputs, Mode::Eval, &mut Rng::new(0))?;
    Ok(grid.label_grid())
}

/// Metrics averaged over scenes.
pub fn evaluate(model: &Model, cfg: &ModelConfig, scenes: &[SceneInputs]) -> Result<MetricReport> {
    let names = class_names(cfg.num_classes);
    let reports = scenes
        .iter()
        .map(|s| {
            MetricReport::compute(
                &predict_labels(model, cfg, s)?,
                &s.labels,
                &names,
                cfg.data.include_empty,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(&reports)
}

/// One JSON line per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub config_hash: String,
    pub per_class_iou: Vec<Option<Real>>,
    pub miou: Real,
    pub steps: u64,
    /// Seconds; zero in deterministic mode.
    pub wall_time: Real,
}

impl MetricRecord {
    pub fn new(
        cfg: &ModelConfig,
        report: &MetricReport,
        steps: u64,
        wall_time: Option<Real>,
    ) -> Self {
        Self {
            config_hash: cfg.hash(),
            per_class_iou: report.per_class.iter().map(|c| c.iou).collect(),
            miou: report.miou,
            steps,
            wall_time: wall_time.unwrap_or(0.0),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Result of [`run`].
pub struct RunOutcome {
    pub state: TrainState,
    pub losses: Vec<Real>,
    pub report: MetricReport,
    pub record: MetricRecord,
}

/// Trains `state` up to `cfg.optim.steps` total steps on `data` and
/// evaluates it. With `deterministic`, the record's wall time is zero so
/// reruns are identical.
pub fn run_on(
    cfg: &ModelConfig,
    data: &Dataset,
    mut state: TrainState,
    deterministic: bool,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let remaining = cfg.optim.steps.saturating_sub(state.step);
    let losses = train(&mut state, cfg, &data.train, remaining)?;
    let report = evaluate(&state.model, cfg, &data.eval)?;
    let wall = (!deterministic).then(|| start.elapsed().as_secs_f64() as Real);
    let record = MetricRecord::new(cfg, &report, state.step, wall);
    Ok(RunOutcome {
        state,
        losses,
        report,
        record,
    })
}

/// [`run_on`] from a fresh state on the config's synthetic dataset.
pub fn run(cfg: &ModelConfig, deterministic: bool) -> Result<RunOutcome> {
    run_on(
        cfg,
        &build_dataset(cfg)?,
        TrainState::new(cfg)?,
        deterministic,
    )
}
