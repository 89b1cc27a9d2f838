use super::config::OptimConfig;
use super::model::Model;
use crate::numerics::{Parameters, PI};
use crate::{Error, Real, Result};

/// Cosine annealing from `lr` at step 0 to `min_lr` at `steps`.
pub fn cosine_lr(cfg: &OptimConfig, step: u64) -> Real {
    if cfg.steps == 0 {
        return cfg.lr;
    }
    let t = (step.min(cfg.steps) as Real) / cfg.steps as Real;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (PI * t).cos())
}

/// Decoupled-weight-decay Adam. The Gaussian set is exempt from decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub first: Model,
    pub second: Model,
    /// Updates applied so far.
    pub t: u64,
}

fn decays(name: &str) -> bool {
    !name.starts_with("gaussians")
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        Self {
            first: model.zeros_like(),
            second: model.zeros_like(),
            t: 0,
        }
    }

    /// One update with step size `lr`. Fails without touching anything when
    /// the gradient is not finite.
    pub fn step(
        &mut self,
        model: &mut Model,
        grad: &Model,
        cfg: &OptimConfig,
        lr: Real,
    ) -> Result<()> {
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let params = model.named_mut();
        let grads = grad.named();
        let firsts = self.first.named_mut();
        let seconds = self.second.named_mut();
        for (((name, p), (_, g)), ((_, m), (_, v))) in params
            .into_iter()
            .zip(grads)
            .zip(firsts.into_iter().zip(seconds))
        {
            let wd = if decays(&name) { cfg.weight_decay } else { 0.0 };
            let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + cfg.eps) + wd * pd[i];
                pd[i] -= lr * update;
            }
        }
        if lr != 0.0 {
            model.gaussians.normalize_rotations();
        }
        Ok(())
    }
}
