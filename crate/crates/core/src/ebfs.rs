//! Entropy-based smoothing between the camera and LiDAR streams.
//!
//! Each stream is turned into a per-Gaussian distribution over channels. The
//! cross-entropy in each direction measures how much the streams disagree,
//! and its exponential decay becomes a scalar residual added to every channel
//! of that stream.

use serde::{Deserialize, Serialize};

use crate::numerics::{softmax, softmax_backward};
use crate::{Error, Mode, Real, Result, Rng, Tensor};

/// Smoothing hyperparameters shared by all layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    /// Softmax temperature `τ`.
    pub temperature: Real,
    /// Stabilizer `ξ` inside the log and in the normalizer.
    pub stabilizer: Real,
    /// Probability that a layer runs in train mode.
    pub select_prob: Real,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            stabilizer: 1e-6,
            select_prob: 0.5,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("smoothing temperature must be positive"));
        }
        if !(self.stabilizer > 0.0) || !self.stabilizer.is_finite() {
            return Err(Error::invalid("smoothing stabilizer must be positive"));
        }
        if !(0.0..=1.0).contains(&self.select_prob) {
            return Err(Error::invalid(
                "layer selection probability must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Whether a layer runs: always in eval mode, with probability
    /// `select_prob` in train mode.
    pub fn select(&self, mode: Mode, rng: &mut Rng) -> bool {
        match mode {
            Mode::Eval => true,
            Mode::Train => rng.bernoulli(self.select_prob),
        }
    }
}

/// Row-wise `softmax(F / τ)` over channels.
pub fn to_distribution(f: &Tensor, temperature: Real) -> Result<Tensor> {
    softmax(f, f.rank().saturating_sub(1), temperature)
}

/// `H_i = −Σ_c P_i,c · log(Q_i,c + ξ)` per row, with `0·log 0 = 0`.
pub fn cross_entropy_map(p: &Tensor, q: &Tensor, stabilizer: Real) -> Result<Vec<Real>> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!(
            "distributions {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok((0..p.rows())
        .map(|i| {
            -p.row(i)
                .iter()
                .zip(q.row(i))
                .filter(|(a, _)| **a != 0.0)
                .map(|(a, b)| a * (b + stabilizer).ln())
                .sum::<Real>()
        })
        .collect())
}

/// `(W_C, W_L)` from the two directional cross-entropies.
pub fn modulation_weights(
    h_cl: &[Real],
    h_lc: &[Real],
    stabilizer: Real,
) -> (Vec<Real>, Vec<Real>) {
    h_cl.iter()
        .zip(h_lc)
        .map(|(&x, &y)| {
            let (a, b) = ((-x).exp(), (-y).exp());
            let total = a + b + stabilizer;
            (a / total, b / total)
        })
        .unzip()
}

/// Cached values of one applied smoothing layer.
#[derive(Clone, Debug)]
pub struct SmoothCache {
    selected: bool,
    fc: Tensor,
    fl: Tensor,
    pc: Tensor,
    pl: Tensor,
    wc: Vec<Real>,
    wl: Vec<Real>,
}

fn check_streams(fc: &Tensor, fl: &Tensor) -> Result<()> {
    if fc.shape() != fl.shape() || fc.rank() != 2 {
        return Err(Error::shape(format!(
            "streams {:?} vs {:?}",
            fc.shape(),
            fl.shape()
        )));
    }
    Ok(())
}

/// `F̃ = F + ε·W` on both streams when `selected`, otherwise the identity.
pub fn smooth_forward(
    fc: &Tensor,
    fl: &Tensor,
    cfg: &SmoothingConfig,
    epsilon: Real,
    selected: bool,
) -> Result<((Tensor, Tensor), SmoothCache)> {
    check_streams(fc, fl)?;
    cfg.validate()?;
    if !selected {
        let cache = SmoothCache {
            selected,
            fc: fc.clone(),
            fl: fl.clone(),
            pc: Tensor::zeros(&[0]),
            pl: Tensor::zeros(&[0]),
            wc: Vec::new(),
            wl: Vec::new(),
        };
        return Ok(((fc.clone(), fl.clone()), cache));
    }
    let pc = to_distribution(fc, cfg.temperature)?;
    let pl = to_distribution(fl, cfg.temperature)?;
    let h_cl = cross_entropy_map(&pc, &pl, cfg.stabilizer)?;
    let h_lc = cross_entropy_map(&pl, &pc, cfg.stabilizer)?;
    let (wc, wl) = modulation_weights(&h_cl, &h_lc, cfg.stabilizer);
    let mut out_c = fc.clone();
    let mut out_l = fl.clone();
    for i in 0..fc.rows() {
        out_c
            .row_mut(i)
            .iter_mut()
            .for_each(|v| *v += epsilon * wc[i]);
        out_l
            .row_mut(i)
            .iter_mut()
            .for_each(|v| *v += epsilon * wl[i]);
    }
    let cache = SmoothCache {
        selected,
        fc: fc.clone(),
        fl: fl.clone(),
        pc,
        pl,
        wc,
        wl,
    };
    Ok(((out_c, out_l), cache))
}

/// Gradients of one smoothing layer.
#[derive(Clone, Debug)]
pub struct SmoothGrads {
    pub fc: Tensor,
    pub fl: Tensor,
    pub epsilon: Real,
    pub temperature: Real,
}

pub fn smooth_backward(
    cache: &SmoothCache,
    cfg: &SmoothingConfig,
    epsilon: Real,
    d_out_c: &Tensor,
    d_out_l: &Tensor,
) -> SmoothGrads {
    if !cache.selected {
        return SmoothGrads {
            fc: d_out_c.clone(),
            fl: d_out_l.clone(),
            epsilon: 0.0,
            temperature: 0.0,
        };
    }
    let xi = cfg.stabilizer;
    let (pc, pl) = (&cache.pc, &cache.pl);
    let mut dpc = pc.zeros_like();
    let mut dpl = pl.zeros_like();
    let mut deps = 0.0;
    for i in 0..pc.rows() {
        let gc: Real = d_out_c.row(i).iter().sum();
        let gl: Real = d_out_l.row(i).iter().sum();
        deps += cache.wc[i] * gc + cache.wl[i] * gl;
        let (dwc, dwl) = (epsilon * gc, epsilon * gl);
        // W_C = a/ω, W_L = b/ω with ω = a + b + ξ
        let (wc, wl) = (cache.wc[i], cache.wl[i]);
        // a·dW_C/da = W_C(1 − W_C), b·dW_C/db = −W_C·W_L, and symmetrically for W_L
        let da_times_a = dwc * wc * (1.0 - wc) - dwl * wl * wc;
        let db_times_b = -dwc * wc * wl + dwl * wl * (1.0 - wl);
        // a = exp(−H_CL)
        let dh_cl = -da_times_a;
        let dh_lc = -db_times_b;
        let (rc, rl) = (pc.row(i), pl.row(i));
        let (gpc, gpl) = (dpc.row_mut(i), dpl.row_mut(i));
        for c in 0..rc.len() {
            gpc[c] += -dh_cl * (rl[c] + xi).ln() - dh_lc * rl[c] / (rc[c] + xi);
        }
        let gpl_vals: Vec<Real> = (0..rc.len())
            .map(|c| -dh_cl * rc[c] / (rl[c] + xi) - dh_lc * (rc[c] + xi).ln())
            .collect();
        gpl.iter_mut().zip(gpl_vals).for_each(|(g, v)| *g += v);
    }
    let (mut dfc, dtau_c) = softmax_backward(&cache.fc, pc, &dpc, 1, cfg.temperature);
    let (mut dfl, dtau_l) = softmax_backward(&cache.fl, pl, &dpl, 1, cfg.temperature);
    dfc.axpy(1.0, d_out_c);
    dfl.axpy(1.0, d_out_l);
    SmoothGrads {
        fc: dfc,
        fl: dfl,
        epsilon: deps,
        temperature: dtau_c + dtau_l,
    }
}

/// One smoothing layer applied with the selection rule of `mode`.
pub fn smooth(
    fc: &Tensor,
    fl: &Tensor,
    cfg: &SmoothingConfig,
    epsilon: Real,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let selected = cfg.select(mode, rng);
    Ok(smooth_forward(fc, fl, cfg, epsilon, selected)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::tensor_error;
    use crate::numerics::relative_error;

    fn cfg(xi: Real) -> SmoothingConfig {
        SmoothingConfig {
            temperature: 1.0,
            stabilizer: xi,
            select_prob: 0.5,
        }
    }

    fn row(v: &[Real]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn distribution_examples() {
        let p = to_distribution(&row(&[0.0, 0.0, 0.0]), 3.7).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let tau = 0.8;
        let p = to_distribution(&row(&[tau * (2.0 as Real).ln(), 0.0]), tau).unwrap();
        assert!(relative_error(p.data(), &[2.0 / 3.0, 1.0 / 3.0]) < 1e-15);
        let f = row(&[0.3, -1.2, 2.0]);
        let a = to_distribution(&f, 2.0 * tau).unwrap();
        let b = to_distribution(&f.map(|v| v / 2.0), tau).unwrap();
        assert!(relative_error(a.data(), b.data()) < 1e-15);
        assert!(to_distribution(&f, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let half = row(&[0.5, 0.5]);
        assert!(
            (cross_entropy_map(&half, &half, 0.0).unwrap()[0] - (2.0 as Real).ln()).abs() < 1e-15
        );
        let a = row(&[1.0, 0.0]);
        assert_eq!(cross_entropy_map(&a, &a, 0.0).unwrap()[0], 0.0);
        let b = row(&[0.0, 1.0]);
        let h = cross_entropy_map(&a, &b, 1e-6).unwrap()[0];
        assert!((h - 13.815510557964274).abs() < 1e-9);
    }

    #[test]
    fn weight_examples() {
        let (wc, wl) = modulation_weights(&[0.7], &[0.7], 0.0);
        assert_eq!((wc[0], wl[0]), (0.5, 0.5));
        let (wc, wl) = modulation_weights(&[0.0], &[1e4], 0.0);
        assert_eq!((wc[0], wl[0]), (1.0, 0.0));
        let (wc, wl) = modulation_weights(&[0.0], &[(3.0 as Real).ln()], 0.0);
        assert!((wc[0] - 0.75).abs() < 1e-15 && (wl[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weights_partition_unity_and_swap() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let (x, y, xi) = (
                rng.range(0.0, 10.0),
                rng.range(0.0, 10.0),
                rng.range(1e-8, 1e-2),
            );
            let (wc, wl) = modulation_weights(&[x], &[y], xi);
            let total = (-x).exp() + (-y).exp() + xi;
            assert!((wc[0] + wl[0] + xi / total - 1.0).abs() < 1e-12);
            assert!(wc[0] >= 0.0 && wl[0] >= 0.0 && wc[0] + wl[0] <= 1.0);
        }
        for _ in 0..20 {
            let fc = Tensor::random_normal(&[5, 4], 1.0, &mut rng);
            let fl = Tensor::random_normal(&[5, 4], 1.0, &mut rng);
            let c = cfg(1e-6);
            let a = smooth_forward(&fc, &fl, &c, 1.0, true).unwrap().1;
            let b = smooth_forward(&fl, &fc, &c, 1.0, true).unwrap().1;
            assert_eq!(a.wc, b.wl);
            assert_eq!(a.wl, b.wc);
        }
    }

    #[test]
    fn smooth_identities() {
        let mut rng = Rng::new(2);
        let fc = Tensor::random_normal(&[6, 3], 1.0, &mut rng);
        let fl = Tensor::random_normal(&[6, 3], 1.0, &mut rng);
        let ((c, l), _) = smooth_forward(&fc, &fl, &cfg(1e-6), 0.0, true).unwrap();
        assert_eq!((c, l), (fc.clone(), fl.clone()));
        let ((c, l), _) = smooth_forward(&fc, &fl, &cfg(1e-6), 3.0, false).unwrap();
        assert_eq!((c, l), (fc.clone(), fl.clone()));
        let ((c, l), _) = smooth_forward(&fc, &fc, &cfg(Real::MIN_POSITIVE), 1.0, true).unwrap();
        for (out, inp) in [(&c, &fc), (&l, &fc)] {
            for (a, b) in out.data().iter().zip(inp.data()) {
                assert!((a - b - 0.5).abs() < 1e-12);
            }
        }
        // eval always applies
        let mut draws = Rng::new(0);
        assert!((0..20).all(|_| cfg(1e-6).select(Mode::Eval, &mut draws)));
        let picked = (0..1000)
            .filter(|_| cfg(1e-6).select(Mode::Train, &mut draws))
            .count();
        assert!((400..600).contains(&picked));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let root = Rng::new(41);
        for seed in 0..20 {
            let mut rng = root.split(seed);
            let c = SmoothingConfig {
                temperature: rng.range(0.5, 2.0),
                stabilizer: rng.range(1e-6, 1e-2),
                select_prob: 0.5,
            };
            let eps = rng.normal();
            let fc = Tensor::random_normal(&[4, 5], 1.0, &mut rng);
            let fl = Tensor::random_normal(&[4, 5], 1.0, &mut rng);
            let gc = Tensor::random_normal(&[4, 5], 1.0, &mut rng);
            let gl = Tensor::random_normal(&[4, 5], 1.0, &mut rng);
            let obj = |fc: &Tensor, fl: &Tensor, eps: Real, c: &SmoothingConfig| -> Result<Real> {
                let ((a, b), _) = smooth_forward(fc, fl, c, eps, true)?;
                Ok(a.dot(&gc) + b.dot(&gl))
            };
            let (_, cache) = smooth_forward(&fc, &fl, &c, eps, true).unwrap();
            let g = smooth_backward(&cache, &c, eps, &gc, &gl);
            assert!(tensor_error(&fc, &g.fc, |t| obj(t, &fl, eps, &c)).unwrap() < 1e-5);
            assert!(tensor_error(&fl, &g.fl, |t| obj(&fc, t, eps, &c)).unwrap() < 1e-5);
            let e = tensor_error(
                &Tensor::vector(&[eps]),
                &Tensor::vector(&[g.epsilon]),
                |t| obj(&fc, &fl, t.data()[0], &c),
            );
            assert!(e.unwrap() < 1e-5);
            let e = tensor_error(
                &Tensor::vector(&[c.temperature]),
                &Tensor::vector(&[g.temperature]),
                |t| {
                    obj(
                        &fc,
                        &fl,
                        eps,
                        &SmoothingConfig {
                            temperature: t.data()[0],
                            ..c
                        },
                    )
                },
            );
            assert!(e.unwrap() < 1e-5);
        }
    }

    #[test]
    fn skipped_layer_passes_gradients_through() {
        let fc = Tensor::full(&[2, 3], 0.1);
        let (_, cache) = smooth_forward(&fc, &fc, &cfg(1e-6), 1.0, false).unwrap();
        let d = Tensor::full(&[2, 3], 2.0);
        let g = smooth_backward(&cache, &cfg(1e-6), 1.0, &d, &d);
        assert_eq!((g.fc, g.epsilon), (d, 0.0));
    }

    #[test]
    fn camera_weight_falls_as_camera_leaves_agreement() {
        // near F_C = F_L the gradient of H_LC w.r.t. F_C vanishes, so to first
        // order W_C moves opposite to H_CL
        let root = Rng::new(77);
        let c = cfg(1e-6);
        for seed in 0..20 {
            let mut rng = root.split(seed);
            let fl = Tensor::random_normal(&[1, 6], 1.5, &mut rng);
            let argmax = (0..6)
                .max_by(|&a, &b| fl.data()[a].total_cmp(&fl.data()[b]))
                .unwrap();
            let mut last_h = Real::NEG_INFINITY;
            let mut last_w = Real::INFINITY;
            for step in 0..20 {
                let mut fc = fl.clone();
                fc.data_mut()[argmax] -= 0.005 * step as Real;
                let (_, cache) = smooth_forward(&fc, &fl, &c, 1.0, true).unwrap();
                let h = cross_entropy_map(&cache.pc, &cache.pl, c.stabilizer).unwrap()[0];
                assert!(
                    h > last_h,
                    "seed {seed}: H_CL not increasing along the path"
                );
                assert!(cache.wc[0] < last_w, "seed {seed} step {step}: W_C rose");
                last_h = h;
                last_w = cache.wc[0];
            }
        }
    }

    #[test]
    fn confident_camera_far_from_lidar_regains_weight() {
        // far from agreement H_LC grows faster than H_CL, so W_C is not
        // monotone in H_CL globally
        let fl = row(&[1.0, 0.5, 0.0]);
        let c = cfg(1e-6);
        let w = |t: Real| {
            let fc = row(&[1.0 - t, 0.5 + t, 0.0]);
            smooth_forward(&fc, &fl, &c, 1.0, true).unwrap().1.wc[0]
        };
        assert!(w(0.5) < w(0.0));
        assert!(w(30.0) > 0.99);
    }
}
