use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::{Error, Real, Result, Rng};

/// Weather proxy applied to the sensor observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degradation {
    /// LiDAR dropout and range noise.
    Rain,
    /// Camera attenuation and noise.
    Night,
}

/// Strengths of the weather proxies at severity 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub max_dropout: Real,
    /// Standard deviation of the range perturbation, in meters.
    pub range_noise: Real,
    /// Camera energy left at severity 1, as a fraction of the original.
    pub energy_floor: Real,
    pub camera_noise: Real,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            max_dropout: 0.5,
            range_noise: 0.2,
            energy_floor: 0.05,
            camera_noise: 0.3,
        }
    }
}

impl std::str::FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(Degradation::Rain),
            "night" => Ok(Degradation::Night),
            _ => Err(Error::invalid(format!(
                "unknown degradation {s:?}, expected rain or night"
            ))),
        }
    }
}

fn energy(v: &[Real]) -> Real {
    v.iter().map(|x| x * x).sum()
}

/// Degrades one sensor of the scene; labels are never touched. Severity 0
/// returns the scene unchanged.
pub fn degrade(
    scene: &SyntheticScene,
    mode: Degradation,
    severity: Real,
    cfg: &DegradeConfig,
    seed: u64,
) -> Result<SyntheticScene> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::invalid(format!(
            "severity {severity} outside [0, 1]"
        )));
    }
    let mut out = scene.clone();
    if severity == 0.0 {
        return Ok(out);
    }
    let mut rng = Rng::new(seed);
    match mode {
        Degradation::Rain => {
            let origin = scene.spec.lidar.origin;
            let keep_prob = 1.0 - severity * cfg.max_dropout;
            out.points.clear();
            for p in &scene.points {
                let keep = rng.bernoulli(keep_prob);
                let shift = severity * cfg.range_noise * rng.normal();
                if !keep {
                    continue;
                }
                let d: [Real; 3] = std::array::from_fn(|a| p.position[a] - origin[a]);
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let mut q = *p;
                if r > 0.0 {
                    q.position = std::array::from_fn(|a| p.position[a] + shift * d[a] / r);
                }
                out.points.push(q);
            }
        }
        Degradation::Night => {
            let before = energy(scene.camera.values.data());
            let gain = 1.0 - severity * (1.0 - cfg.energy_floor);
            let values = out.camera.values.data_mut();
            for v in values.iter_mut() {
                *v = gain.sqrt() * (*v + severity * cfg.camera_noise * rng.normal());
            }
            // noise can add energy; cap the total at the attenuated budget
            let after = energy(values);
            if after > gain * before && after > 0.0 {
                let s = (gain * before / after).sqrt();
                values.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(out)
}
