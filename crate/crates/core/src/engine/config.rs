use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aclf::FusionMode;
use crate::ebfs::SmoothingConfig;
use crate::harness::LayoutConfig;
use crate::lifting::{LdfaConfig, VolumeSpec};
use crate::losses::LossWeights;
use crate::mamba::{Bounds, MambaConfig};
use crate::scene::GridSpec;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSection {
    /// Edge length of the cubic volume cells.
    pub cell: Real,
    /// Depth planes `D`; together with `cell` they span the grid height.
    pub planes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub keypoints: usize,
    pub ring_radius: Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdfaSection {
    /// When off, the LiDAR stream is the plain column mean below each anchor.
    pub enabled: bool,
    pub keypoints: usize,
    pub chunks: usize,
    pub ring_radius: Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbfsSection {
    pub enabled: bool,
    pub layers: usize,
    pub temperature: Real,
    pub stabilizer: Real,
    pub select_prob: Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub mode: FusionMode,
    pub latent: usize,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    /// When off, the parameter head reads each Gaussian's feature alone: no
    /// positional encoding, ordering or scan.
    pub enabled: bool,
    pub blocks: usize,
    pub state_dim: usize,
    pub bits: u32,
    pub bands: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: u64,
    pub lr: Real,
    /// Floor of the cosine schedule.
    pub min_lr: Real,
    pub weight_decay: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Score the empty class in mIoU.
    pub include_empty: bool,
    pub layout: LayoutConfig,
}

/// Every knob of a run. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub num_gaussians: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub refine_hidden: usize,
    pub cutoff_k: Real,
    pub grid: GridSpec,
    pub lidar: LidarSection,
    pub camera: CameraSection,
    pub ldfa: LdfaSection,
    pub ebfs: EbfsSection,
    pub fusion: FusionSection,
    pub head: HeadSection,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataSection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let layout = LayoutConfig::default();
        let grid = layout.grid;
        Self {
            seed: 0,
            num_gaussians: 512,
            num_classes: 4,
            feature_dim: 16,
            refine_hidden: 32,
            cutoff_k: crate::scene::DEFAULT_CUTOFF_K,
            grid,
            lidar: LidarSection {
                cell: 0.25,
                planes: 16,
            },
            camera: CameraSection {
                keypoints: 4,
                ring_radius: 1.0,
            },
            ldfa: LdfaSection {
                enabled: true,
                keypoints: 4,
                chunks: 4,
                ring_radius: 1.0,
            },
            ebfs: EbfsSection {
                enabled: true,
                layers: 2,
                temperature: 1.0,
                stabilizer: 1e-6,
                select_prob: 0.5,
            },
            fusion: FusionSection {
                mode: FusionMode::Aclf,
                latent: 8,
                heads: 1,
            },
            head: HeadSection {
                enabled: true,
                blocks: 2,
                state_dim: 16,
                bits: 6,
                bands: 4,
            },
            loss: LossWeights::default(),
            optim: OptimConfig {
                steps: 1000,
                lr: 1e-2,
                min_lr: 1e-4,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            data: DataSection {
                train_scenes: 32,
                eval_scenes: 8,
                include_empty: false,
                layout,
            },
        }
    }
}

impl ModelConfig {
    /// A reduced configuration (8×8×4 grid, 64 Gaussians, 20 steps) for
    /// smoke tests and examples.
    pub fn small() -> Self {
        let mut cfg = Self::default();
        cfg.grid.dims = [8, 8, 4];
        cfg.data.layout.grid = cfg.grid;
        cfg.data.layout.boxes = (1, 2);
        cfg.data.layout.cylinders = (0, 1);
        cfg.data.layout.image_width = 24;
        cfg.data.layout.image_height = 16;
        cfg.lidar.planes = 8;
        cfg.ldfa.chunks = 2;
        cfg.num_gaussians = 64;
        cfg.optim.steps = 20;
        cfg.data.train_scenes = 4;
        cfg.data.eval_scenes = 2;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_gaussians == 0 || self.feature_dim == 0 || self.refine_hidden == 0 {
            return bad("num_gaussians, feature_dim and refine_hidden must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.data.layout.grid != self.grid {
            return bad("data.layout.grid must equal grid".into());
        }
        if self.grid.dims.contains(&0) || !(self.grid.voxel_size > 0.0) {
            return bad("grid must have positive voxel size and extents".into());
        }
        if !(self.cutoff_k > 0.0) {
            return bad(format!("cutoff_k must be positive, got {}", self.cutoff_k));
        }
        self.volume_spec()?;
        if self.camera.keypoints == 0 || self.ldfa.keypoints == 0 {
            return bad("keypoint counts must be positive".into());
        }
        if self.ldfa.chunks == 0 || self.ldfa.chunks > self.lidar.planes {
            return bad(format!("ldfa.chunks must be in 1..={}", self.lidar.planes));
        }
        self.smoothing()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.fusion.latent == 0 {
            return bad("fusion.latent must be positive".into());
        }
        if self.fusion.heads == 0 || !self.feature_dim.is_multiple_of(self.fusion.heads) {
            return bad("feature_dim must be a positive multiple of fusion.heads".into());
        }
        self.mamba().validate()?;
        self.loss
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let o = &self.optim;
        let unit = |v: Real| (0.0..1.0).contains(&v);
        if !(o.lr >= 0.0
            && o.min_lr >= 0.0
            && o.min_lr <= o.lr.max(o.min_lr)
            && o.weight_decay >= 0.0
            && o.eps > 0.0)
            || !unit(o.beta1)
            || !unit(o.beta2)
        {
            return bad(
                "optimizer needs lr ≥ min_lr ≥ 0, weight_decay ≥ 0, eps > 0 and betas in [0, 1)"
                    .into(),
            );
        }
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 {
            return bad("need at least one training and one evaluation scene".into());
        }
        Ok(())
    }

    pub fn volume_spec(&self) -> Result<VolumeSpec> {
        let g = &self.grid;
        let cell = self.lidar.cell;
        let extent = |a: usize| g.dims[a] as Real * g.voxel_size / cell;
        let (w, h) = (extent(0).round(), extent(1).round());
        if !(cell > 0.0) || self.lidar.planes == 0 || w < 1.0 || h < 1.0 {
            return Err(Error::Config(
                "lidar volume needs a positive cell size and plane count".into(),
            ));
        }
        VolumeSpec::new(g.origin, cell, [self.lidar.planes, h as usize, w as usize])
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::of_grid(&self.grid)
    }

    pub fn ldfa_config(&self) -> LdfaConfig {
        LdfaConfig {
            keypoints: self.ldfa.keypoints,
            chunks: self.ldfa.chunks,
            ring_radius: self.ldfa.ring_radius,
        }
    }

    pub fn smoothing(&self) -> SmoothingConfig {
        SmoothingConfig {
            temperature: self.ebfs.temperature,
            stabilizer: self.ebfs.stabilizer,
            select_prob: self.ebfs.select_prob,
        }
    }

    /// The effective head: a disabled head keeps only the final linear map.
    pub fn mamba(&self) -> MambaConfig {
        let h = &self.head;
        if h.enabled {
            MambaConfig {
                blocks: h.blocks,
                state_dim: h.state_dim,
                bits: h.bits,
                bands: h.bands,
            }
        } else {
            MambaConfig {
                blocks: 0,
                state_dim: h.state_dim,
                bits: h.bits,
                bands: 0,
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// [`hash`](Self::hash) with the step count cleared: two configs that
    /// differ only in how long they train describe the same model.
    pub fn model_hash(&self) -> String {
        let mut c = self.clone();
        c.optim.steps = 0;
        c.hash()
    }
}
