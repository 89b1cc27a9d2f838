use super::config::ModelConfig;
use crate::aclf::{Fusion, FusionCache};
use crate::ebfs::{smooth_backward, smooth_forward, SmoothCache};
use crate::harness::SyntheticScene;
use crate::lifting::{
    camera_backward, camera_forward, column_mean_backward, column_mean_forward, ldfa_backward,
    ldfa_forward, point_cloud_to_volume, CameraCache, CameraFeatureMap, CameraLiftParams,
    ChunkPlan, FeatureVolume, LdfaCache, LdfaParams, POINT_FEATURES,
};
use crate::mamba::{MambaCache, MambaParams};
use crate::numerics::{impl_parameters, Linear, Parameters};
use crate::scene::{splat, splat_backward, GaussianSet, RefineBlock, RefineCache, VoxelGrid};
use crate::{Error, Mode, Real, Result, Rng, Tensor};

/// Sensor observations of one scene in model-ready form, with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    pub volume: FeatureVolume,
    pub camera: CameraFeatureMap,
    pub labels: Vec<u16>,
}

impl SceneInputs {
    pub fn from_scene(scene: &SyntheticScene, cfg: &ModelConfig) -> Result<Self> {
        if scene.labels.spec != cfg.grid || scene.labels.num_classes != cfg.num_classes {
            return Err(Error::invalid(
                "scene grid or class count differs from the model config",
            ));
        }
        if scene.camera.channels() != cfg.num_classes {
            return Err(Error::invalid(format!(
                "camera has {} channels, model expects {}",
                scene.camera.channels(),
                cfg.num_classes
            )));
        }
        Ok(Self {
            volume: point_cloud_to_volume(&scene.points, cfg.volume_spec()?),
            camera: scene.camera.clone(),
            labels: scene.labels.label_grid(),
        })
    }
}

/// All learnable state. Also used as its own gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// The shared initial Gaussians every scene starts from.
    pub gaussians: GaussianSet,
    pub camera_lift: CameraLiftParams,
    /// `None` selects the column-mean LiDAR lift.
    pub ldfa: Option<LdfaParams>,
    pub embed_camera: Linear,
    pub embed_lidar: Linear,
    pub refine_camera: RefineBlock,
    pub refine_lidar: RefineBlock,
    /// One residual scale `ε` per smoothing layer.
    pub smoothing: Vec<Tensor>,
    pub fusion: Fusion,
    pub refine_fused: RefineBlock,
    pub head: MambaParams,
}

impl_parameters!(Model {
    gaussians,
    camera_lift,
    ldfa,
    embed_camera,
    embed_lidar,
    refine_camera,
    refine_lidar,
    smoothing,
    fusion,
    refine_fused,
    head,
});

/// Means uniform in the grid, isotropic scale of 1.5 voxels, identity
/// rotation, opacity 0.5 and zero logits and features.
pub fn initial_gaussians(cfg: &ModelConfig, rng: &mut Rng) -> GaussianSet {
    let n = cfg.num_gaussians;
    let mut set = GaussianSet::zeros(n, cfg.num_classes, cfg.feature_dim);
    let lo = cfg.grid.origin;
    let hi = cfg.grid.max_corner();
    for i in 0..n {
        for a in 0..3 {
            set.means.row_mut(i)[a] = rng.range(lo[a], hi[a]);
        }
        set.rotations.row_mut(i)[0] = 1.0;
    }
    set.log_scales.fill((1.5 * cfg.grid.voxel_size).ln());
    set
}

// Independent streams per module, so toggling one component leaves the
// initialization of the others untouched.
const TAG_GAUSSIANS: u64 = 1;
const TAG_LDFA: u64 = 2;
const TAG_EMBED: u64 = 3;
const TAG_REFINE: u64 = 4;
const TAG_FUSION: u64 = 5;
const TAG_HEAD: u64 = 6;

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed).split(0x1417);
        let d = cfg.feature_dim;
        let mut embed = root.split(TAG_EMBED);
        let mut refine = root.split(TAG_REFINE);
        let planes = cfg.lidar.planes;
        Ok(Self {
            gaussians: initial_gaussians(cfg, &mut root.split(TAG_GAUSSIANS)),
            camera_lift: CameraLiftParams::new(d, cfg.camera.keypoints, cfg.camera.ring_radius),
            ldfa: cfg.ldfa.enabled.then(|| {
                LdfaParams::new(
                    d,
                    POINT_FEATURES,
                    planes,
                    &cfg.ldfa_config(),
                    &mut root.split(TAG_LDFA),
                )
            }),
            embed_camera: Linear::random(cfg.num_classes, d, 1.0, &mut embed),
            embed_lidar: Linear::random(POINT_FEATURES, d, 1.0, &mut embed),
            refine_camera: RefineBlock::new(d, cfg.refine_hidden, &mut refine),
            refine_lidar: RefineBlock::new(d, cfg.refine_hidden, &mut refine),
            smoothing: if cfg.ebfs.enabled {
                vec![Tensor::zeros(&[1]); cfg.ebfs.layers]
            } else {
                Vec::new()
            },
            fusion: Fusion::new(
                cfg.fusion.mode,
                d,
                cfg.fusion.latent,
                cfg.fusion.heads,
                &mut root.split(TAG_FUSION),
            )?,
            refine_fused: RefineBlock::new(d, cfg.refine_hidden, &mut refine),
            head: MambaParams::new(d, cfg.num_classes, &cfg.mamba(), &mut root.split(TAG_HEAD))?,
        })
    }

    /// Checks that this model was built for `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Model::new(cfg)?;
        let a = self.named();
        let b = reference.named();
        let same = a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
        if !same {
            return Err(Error::Config("parameters do not match the config".into()));
        }
        Ok(())
    }
}

enum LidarCache {
    Ldfa(LdfaCache),
    ColumnMean,
}

/// Intermediates of [`forward`] needed by [`backward`].
pub struct ForwardCache {
    camera_raw: Tensor,
    camera: CameraCache,
    lidar_raw: Tensor,
    lidar: LidarCache,
    refine_camera: RefineCache,
    refine_lidar: RefineCache,
    smoothing: Vec<SmoothCache>,
    fusion: FusionCache,
    refine_fused: RefineCache,
    head: MambaCache,
    refined: GaussianSet,
}

impl ForwardCache {
    /// The Gaussian set after the refinement head.
    pub fn refined(&self) -> &GaussianSet {
        &self.refined
    }
}

fn add_features(t: &Tensor, features: &Tensor) -> Tensor {
    t.add(features)
}

/// Lift, embed, refine, smooth, fuse, refine, head, splat. `rng` drives the
/// depth-plane shuffle and the smoothing-layer draws in train mode.
pub fn forward(
    model: &Model,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(VoxelGrid, ForwardCache)> {
    let set = &model.gaussians;
    let (camera_raw, camera) = camera_forward(
        &model.camera_lift,
        &set.means,
        &set.features,
        &inputs.camera,
    )?;
    let (lidar_raw, lidar) = match &model.ldfa {
        Some(p) => {
            let plan = ChunkPlan::for_mode(inputs.volume.planes(), cfg.ldfa.chunks, mode, rng)?;
            let (out, cache) = ldfa_forward(p, &set.means, &set.features, &inputs.volume, &plan)?;
            (out, LidarCache::Ldfa(cache))
        }
        None => (
            column_mean_forward(&set.means, &inputs.volume)?,
            LidarCache::ColumnMean,
        ),
    };
    let ec = add_features(&model.embed_camera.forward(&camera_raw), &set.features);
    let el = add_features(&model.embed_lidar.forward(&lidar_raw), &set.features);
    let (mut fc, refine_camera) = model.refine_camera.forward(&ec)?;
    let (mut fl, refine_lidar) = model.refine_lidar.forward(&el)?;
    let scfg = cfg.smoothing();
    let mut smoothing = Vec::with_capacity(model.smoothing.len());
    for eps in &model.smoothing {
        let selected = scfg.select(mode, rng);
        let ((c, l), cache) = smooth_forward(&fc, &fl, &scfg, eps.data()[0], selected)?;
        fc = c;
        fl = l;
        smoothing.push(cache);
    }
    let (fused, fusion) = model.fusion.forward(&fl, &fc)?;
    let (hidden, refine_fused) = model.refine_fused.forward(&fused)?;
    let (refined, head) = model.head.forward(set, &hidden, &cfg.bounds())?;
    let grid = splat(&refined, &cfg.grid, cfg.cutoff_k).with_labels();
    let cache = ForwardCache {
        camera_raw,
        camera,
        lidar_raw,
        lidar,
        refine_camera,
        refine_lidar,
        smoothing,
        fusion,
        refine_fused,
        head,
        refined,
    };
    Ok((grid, cache))
}

/// Gradient of `⟨dlogits, forward(...).logits⟩` w.r.t. every parameter.
pub fn backward(
    model: &Model,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
    cache: &ForwardCache,
    dlogits: &[Real],
) -> Model {
    let mut g = model.zeros_like();
    let set = &model.gaussians;
    let drefined = splat_backward(&cache.refined, &cfg.grid, cfg.cutoff_k, dlogits);
    let (mut dset, dhidden) = model.head.backward(&cache.head, &drefined, &mut g.head);
    let dfused = model
        .refine_fused
        .backward(&cache.refine_fused, &dhidden, &mut g.refine_fused);
    let (mut dl, mut dc) = model.fusion.backward(&cache.fusion, &dfused, &mut g.fusion);
    let scfg = cfg.smoothing();
    for (k, sc) in cache.smoothing.iter().enumerate().rev() {
        let eps = model.smoothing[k].data()[0];
        let sg = smooth_backward(sc, &scfg, eps, &dc, &dl);
        g.smoothing[k].data_mut()[0] += sg.epsilon;
        dc = sg.fc;
        dl = sg.fl;
    }
    let dec = model
        .refine_camera
        .backward(&cache.refine_camera, &dc, &mut g.refine_camera);
    let del = model
        .refine_lidar
        .backward(&cache.refine_lidar, &dl, &mut g.refine_lidar);
    dset.features.axpy(1.0, &dec);
    dset.features.axpy(1.0, &del);
    let dcam = model
        .embed_camera
        .backward(&cache.camera_raw, &dec, &mut g.embed_camera);
    let dlid = model
        .embed_lidar
        .backward(&cache.lidar_raw, &del, &mut g.embed_lidar);
    let (dm, df) = camera_backward(
        &model.camera_lift,
        &inputs.camera,
        &cache.camera,
        &dcam,
        &mut g.camera_lift,
    );
    dset.means.axpy(1.0, &dm);
    dset.features.axpy(1.0, &df);
    match (&cache.lidar, &model.ldfa, &mut g.ldfa) {
        (LidarCache::Ldfa(c), Some(p), Some(gp)) => {
            let (dm, df) = ldfa_backward(p, &inputs.volume, c, &dlid, gp);
            dset.means.axpy(1.0, &dm);
            dset.features.axpy(1.0, &df);
        }
        _ => dset.means.axpy(
            1.0,
            &column_mean_backward(&set.means, &inputs.volume, &dlid),
        ),
    }
    g.gaussians = dset;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_scene, random_layout};

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.num_gaussians = 24;
        cfg.feature_dim = 6;
        cfg.refine_hidden = 8;
        cfg.fusion.latent = 4;
        cfg.head.state_dim = 3;
        cfg
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> SceneInputs {
        let spec = random_layout(&cfg.data.layout, &mut Rng::new(seed)).unwrap();
        SceneInputs::from_scene(&generate_scene(&spec, seed).unwrap(), cfg).unwrap()
    }

    #[test]
    fn fresh_model_predicts_the_initial_splat() {
        let cfg = small_config();
        let model = Model::new(&cfg).unwrap();
        let (grid, _) =
            forward(&model, &cfg, &inputs(&cfg, 1), Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(
            grid.logits,
            splat(&model.gaussians, &cfg.grid, cfg.cutoff_k).logits
        );
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_config();
        let mut model = Model::new(&cfg).unwrap();
        let mut rng = Rng::new(3);
        for (_, t) in model.named_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.05 * rng.normal());
        }
        model.gaussians.normalize_rotations();
        let x = inputs(&cfg, 2);
        let a = forward(&model, &cfg, &x, Mode::Eval, &mut Rng::new(0))
            .unwrap()
            .0;
        let b = forward(&model, &cfg, &x, Mode::Eval, &mut Rng::new(99))
            .unwrap()
            .0;
        assert_eq!(a, b);
    }

    #[test]
    fn add_fusion_with_zero_camera_matches_lidar_only_path() {
        let mut cfg = small_config();
        cfg.fusion.mode = crate::aclf::FusionMode::Add;
        cfg.ebfs.enabled = false;
        let mut model = Model::new(&cfg).unwrap();
        let mut rng = Rng::new(4);
        model.head.head = Linear::random(cfg.feature_dim, model.head.head.out_dim(), 0.5, &mut rng);
        // silence the camera stream entirely
        model.embed_camera = Linear::zeros(cfg.num_classes, cfg.feature_dim);
        model.refine_camera = RefineBlock::identity(cfg.feature_dim, cfg.refine_hidden);
        let x = inputs(&cfg, 3);
        let (grid, cache) = forward(&model, &cfg, &x, Mode::Eval, &mut Rng::new(0)).unwrap();
        // with f = 0 the camera stream is exactly zero, so the fused stream is F_L
        let (fl, _) = model
            .refine_lidar
            .forward(&model.embed_lidar.forward(&cache.lidar_raw))
            .unwrap();
        let (hidden, _) = model.refine_fused.forward(&fl).unwrap();
        let refined = model
            .head
            .forward(&model.gaussians, &hidden, &cfg.bounds())
            .unwrap()
            .0;
        assert_eq!(grid.logits, splat(&refined, &cfg.grid, cfg.cutoff_k).logits);
    }
}
