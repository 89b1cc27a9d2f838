//! Finite-difference checks of the hand-written backward passes.

use crate::aclf::{Fusion, FusionMode};
use crate::ebfs::{smooth_backward, smooth_forward, SmoothingConfig};
use crate::engine::{backward, forward, LidarSection, Model, ModelConfig, SceneInputs};
use crate::lifting::{
    camera_backward, camera_forward, column_mean_backward, column_mean_forward, deformable_sample,
    deformable_sample_backward, ldfa_backward, ldfa_forward, CameraFeatureMap, CameraLiftParams,
    ChunkPlan, FeatureVolume, LdfaConfig, LdfaParams, PinholeCamera, PlaneView, VolumeSpec,
    POINT_FEATURES,
};
use crate::losses::{
    ce_loss, ce_loss_backward, lovasz_softmax, lovasz_softmax_backward, total_loss,
    total_loss_with_grad, LossWeights,
};
use crate::mamba::{
    encoding_width, positional_encode, positional_encode_backward, selective_scan,
    selective_scan_backward, Bounds, MambaConfig, MambaParams, SsmBlock,
};
use crate::numerics::{
    attention_backward, attention_forward, cosine_similarity, cosine_similarity_backward,
    finite_difference_gradient, layer_norm_backward, layer_norm_forward, relative_error, softmax,
    softmax_backward, Linear, Parameters, COSINE_EPS, DEFAULT_FD_STEP,
};
use crate::scene::{
    normalize_quat, normalize_quat_backward, rotation_backward, rotation_matrix, splat,
    splat_backward, GaussianSet, GridSpec, RefineBlock,
};
use crate::{Mode, Real, Result, Rng, Tensor};

/// Relative error between `analytic` and the central-difference gradient of
/// `f` at `x`.
pub fn tensor_error(
    x: &Tensor,
    analytic: &Tensor,
    f: impl Fn(&Tensor) -> Result<Real>,
) -> Result<Real> {
    let fd = finite_difference_gradient(f, x, DEFAULT_FD_STEP)?;
    Ok(relative_error(analytic.data(), fd.data()))
}

/// Per-tensor relative errors of a parameter gradient against central
/// differences of `f`. Tensors whose analytic and numeric gradients are both
/// zero report an error of zero.
pub fn parameter_errors<P: Parameters + Clone>(
    params: &P,
    analytic: &P,
    f: impl Fn(&P) -> Result<Real>,
) -> Result<Vec<(String, Real)>> {
    let grads = analytic.named();
    let mut out = Vec::new();
    for (idx, (name, tensor)) in params.named().into_iter().enumerate() {
        let err = tensor_error(tensor, grads[idx].1, |t| {
            let mut p = params.clone();
            *p.named_mut()[idx].1 = t.clone();
            f(&p)
        })?;
        out.push((name, err));
    }
    Ok(out)
}

/// The largest entry of [`parameter_errors`], with its name.
pub fn worst(errors: &[(String, Real)]) -> (String, Real) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

/// Outcome of one entry of the gradient suite.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    /// Worst relative error over seeds and tensors.
    pub error: Real,
    pub tolerance: Real,
    /// Tensor that produced `error`.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<14} seeds={:<3} max_rel_err={:.3e} tol={:.0e} ({})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.seeds,
            self.error,
            self.tolerance,
            self.worst
        )
    }
}

/// Tolerance of the per-operation checks.
pub const OP_TOLERANCE: Real = 1e-5;
/// Tolerance of the end-to-end check.
pub const PIPELINE_TOLERANCE: Real = 1e-4;

fn run_check(
    name: &str,
    seeds: usize,
    tolerance: Real,
    mut case: impl FnMut(&mut Rng) -> Result<Vec<(String, Real)>>,
) -> Result<CheckResult> {
    let root = Rng::new(0x6C0C_u64 ^ name.len() as u64);
    let mut worst_err = (String::new(), 0.0);
    for s in 0..seeds {
        let errs = case(&mut root.split(s as u64))?;
        let w = worst(&errs);
        if w.1 > worst_err.1 || worst_err.0.is_empty() {
            worst_err = (format!("seed {s} {}", w.0), w.1);
        }
    }
    Ok(CheckResult {
        name: name.into(),
        seeds,
        error: worst_err.1,
        tolerance,
        worst: worst_err.0,
    })
}

fn perturb<P: Parameters>(p: &mut P, std: Real, rng: &mut Rng) {
    for (_, t) in p.named_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += std * rng.normal());
    }
}

/// Tiny end-to-end fixture: 2 Gaussians, a 4³ grid, random sensor inputs and
/// labels, every parameter perturbed away from its initialization.
pub fn end_to_end_fixture(seed: u64) -> Result<(ModelConfig, Model, SceneInputs)> {
    let mut cfg = ModelConfig::default();
    cfg.seed = seed;
    cfg.num_gaussians = 2;
    cfg.num_classes = 3;
    cfg.feature_dim = 4;
    cfg.refine_hidden = 4;
    // every voxel inside every cutoff, so the membership set is constant
    cfg.cutoff_k = 50.0;
    cfg.grid = GridSpec::new([0.0; 3], 0.5, [4, 4, 4])?;
    cfg.data.layout.grid = cfg.grid;
    cfg.lidar = LidarSection {
        cell: 0.5,
        planes: 4,
    };
    cfg.camera.keypoints = 2;
    cfg.ldfa.keypoints = 2;
    cfg.ldfa.chunks = 2;
    cfg.fusion.latent = 4;
    cfg.head.blocks = 1;
    cfg.head.state_dim = 2;
    cfg.head.bits = 2;
    cfg.head.bands = 1;
    let mut model = Model::new(&cfg)?;
    let mut rng = Rng::new(seed).split(77);
    perturb(&mut model, 0.1, &mut rng);
    model.gaussians.normalize_rotations();
    model.gaussians.means = Tensor::random_uniform(&[2, 3], 0.3, 1.7, &mut rng);
    let spec = cfg.volume_spec()?;
    let mut volume = FeatureVolume::zeros(spec, POINT_FEATURES);
    volume.values = Tensor::random_uniform(volume.values.shape(), 0.0, 1.0, &mut rng);
    let cam = PinholeCamera::look_at(
        [-2.0, 1.0, 2.0],
        [1.0, 1.0, 0.5],
        [0.0, 0.0, 1.0],
        6.0,
        6.0,
        3.5,
        2.5,
    )?;
    let camera =
        CameraFeatureMap::new(cam, Tensor::random_uniform(&[3, 6, 8], 0.0, 1.0, &mut rng))?;
    let labels = (0..cfg.grid.num_voxels())
        .map(|_| rng.below(3) as u16)
        .collect();
    Ok((
        cfg,
        model,
        SceneInputs {
            volume,
            camera,
            labels,
        },
    ))
}

/// Per-tensor errors of the full pipeline gradient (eval mode, so every
/// smoothing layer runs and the depth planes keep their order).
pub fn end_to_end_errors(seed: u64) -> Result<Vec<(String, Real)>> {
    let (cfg, model, inputs) = end_to_end_fixture(seed)?;
    let loss = |m: &Model| -> Result<Real> {
        let (grid, _) = forward(m, &cfg, &inputs, Mode::Eval, &mut Rng::new(0))?;
        Ok(total_loss(&grid.logits, cfg.num_classes, &inputs.labels, cfg.loss)?.total)
    };
    let (grid, cache) = forward(&model, &cfg, &inputs, Mode::Eval, &mut Rng::new(0))?;
    let (_, dlogits) =
        total_loss_with_grad(&grid.logits, cfg.num_classes, &inputs.labels, cfg.loss)?;
    let grad = backward(&model, &cfg, &inputs, &cache, &dlogits);
    parameter_errors(&model, &grad, loss)
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_volume(channels: usize, dims: [usize; 3], rng: &mut Rng) -> Result<FeatureVolume> {
    let spec = VolumeSpec::new([0.0; 3], 0.5, dims)?;
    let mut vol = FeatureVolume::zeros(spec, channels);
    vol.values = Tensor::random_normal(vol.values.shape(), 1.0, rng);
    Ok(vol)
}

fn anchors(n: usize, rng: &mut Rng) -> Tensor {
    let mut m = Tensor::random_uniform(&[n, 3], 0.3, 2.5, rng);
    for i in 0..n {
        m.row_mut(i)[2] = rng.range(0.0, 1.0);
    }
    m
}

fn random_set(n: usize, classes: usize, rng: &mut Rng) -> GaussianSet {
    let mut set = GaussianSet::zeros(n, classes, 2);
    set.means = Tensor::random_uniform(&[n, 3], 0.5, 3.5, rng);
    set.rotations = Tensor::random_normal(&[n, 4], 1.0, rng);
    set.normalize_rotations();
    set.log_scales = Tensor::random_normal(&[n, 3], 0.2, rng);
    set.opacity_logits = Tensor::random_normal(&[n, 1], 1.0, rng);
    set.logits = Tensor::random_normal(&[n, classes], 1.0, rng);
    set
}

/// The whole finite-difference suite: one entry per differentiable operation
/// (`op_seeds` random inputs each) plus the end-to-end pipeline.
pub fn run_suite(op_seeds: usize, pipeline_seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let tol = OP_TOLERANCE;
    out.push(run_check("softmax", op_seeds, tol, |rng| {
        let x = Tensor::random_normal(&[4, 5], 1.0, rng);
        let tau = rng.range(0.5, 2.0);
        let probe = Tensor::random_normal(&[4, 5], 1.0, rng);
        let y = softmax(&x, 1, tau)?;
        let (dx, _) = softmax_backward(&x, &y, &probe, 1, tau);
        Ok(vec![(
            "x".into(),
            tensor_error(&x, &dx, |v| Ok(softmax(v, 1, tau)?.dot(&probe)))?,
        )])
    })?);
    out.push(run_check("layer_norm", op_seeds, tol, |rng| {
        let x = Tensor::random_normal(&[3, 6], 1.0, rng);
        let gain = Tensor::random_normal(&[6], 1.0, rng);
        let bias = Tensor::random_normal(&[6], 1.0, rng);
        let probe = Tensor::random_normal(&[3, 6], 1.0, rng);
        let (_, cache) = layer_norm_forward(&x, &gain, &bias, 1e-5)?;
        let (dx, dg, db) = layer_norm_backward(&cache, &gain, &probe);
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| {
            Ok(layer_norm_forward(x, g, b, 1e-5)?.0.dot(&probe))
        };
        Ok(vec![
            ("x".into(), tensor_error(&x, &dx, |v| f(v, &gain, &bias))?),
            (
                "gain".into(),
                tensor_error(&gain, &dg, |v| f(&x, v, &bias))?,
            ),
            (
                "bias".into(),
                tensor_error(&bias, &db, |v| f(&x, &gain, v))?,
            ),
        ])
    })?);
    out.push(run_check("attention", op_seeds, tol, |rng| {
        let q = Tensor::random_normal(&[3, 4], 1.0, rng);
        let k = Tensor::random_normal(&[5, 4], 1.0, rng);
        let v = Tensor::random_normal(&[5, 2], 1.0, rng);
        let probe = Tensor::random_normal(&[3, 2], 1.0, rng);
        let (_, w) = attention_forward(&q, &k, &v)?;
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &w, &probe);
        let f = |q: &Tensor, k: &Tensor, v: &Tensor| Ok(attention_forward(q, k, v)?.0.dot(&probe));
        Ok(vec![
            ("q".into(), tensor_error(&q, &dq, |t| f(t, &k, &v))?),
            ("k".into(), tensor_error(&k, &dk, |t| f(&q, t, &v))?),
            ("v".into(), tensor_error(&v, &dv, |t| f(&q, &k, t))?),
        ])
    })?);
    out.push(run_check("splat", op_seeds, tol, |rng| {
        let spec = GridSpec::new([0.0; 3], 0.5, [8, 8, 8])?;
        let set = random_set(4, 3, rng);
        let probe: Vec<Real> = (0..spec.num_voxels() * 3).map(|_| rng.normal()).collect();
        let f = |s: &GaussianSet| {
            Ok(splat(s, &spec, Real::INFINITY)
                .logits
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum())
        };
        let grad = splat_backward(&set, &spec, Real::INFINITY, &probe);
        parameter_errors(&set, &grad, f)
    })?);
    out.push(run_check("refine_block", op_seeds, tol, |rng| {
        let mut blk = RefineBlock::new(4, 6, rng);
        perturb(&mut blk, 0.1, rng);
        let x = Tensor::random_normal(&[5, 4], 1.0, rng);
        let probe = Tensor::random_normal(&[5, 4], 1.0, rng);
        let (_, cache) = blk.forward(&x)?;
        let mut g = blk.zeros_like();
        let dx = blk.backward(&cache, &probe, &mut g);
        let mut errs = parameter_errors(&blk, &g, |b| Ok(b.forward(&x)?.0.dot(&probe)))?;
        errs.push((
            "x".into(),
            tensor_error(&x, &dx, |v| Ok(blk.forward(v)?.0.dot(&probe)))?,
        ));
        Ok(errs)
    })?);
    out.push(run_check("cosine", op_seeds, tol, |rng| {
        let a = Tensor::random_normal(&[3, 4], 1.0, rng);
        let b = Tensor::random_normal(&[3, 4], 1.0, rng);
        let probe: Vec<Real> = (0..3).map(|_| rng.normal()).collect();
        let (da, db) = cosine_similarity_backward(&a, &b, COSINE_EPS, &probe);
        let f = |a: &Tensor, b: &Tensor| -> Result<Real> {
            Ok(dot(&cosine_similarity(a, b, COSINE_EPS)?, &probe))
        };
        Ok(vec![
            ("a".into(), tensor_error(&a, &da, |t| f(t, &b))?),
            ("b".into(), tensor_error(&b, &db, |t| f(&a, t))?),
        ])
    })?);
    out.push(run_check("linear", op_seeds, tol, |rng| {
        let mut lin = Linear::random(4, 3, 1.0, rng);
        lin.bias = Tensor::random_normal(&[3], 1.0, rng);
        let x = Tensor::random_normal(&[5, 4], 1.0, rng);
        let probe = Tensor::random_normal(&[5, 3], 1.0, rng);
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &probe, &mut g);
        let mut errs = parameter_errors(&lin, &g, |l| Ok(l.forward(&x).dot(&probe)))?;
        errs.push((
            "x".into(),
            tensor_error(&x, &dx, |t| Ok(lin.forward(t).dot(&probe)))?,
        ));
        Ok(errs)
    })?);
    out.push(run_check("covariance", op_seeds, tol, |rng| {
        let r = Tensor::random_normal(&[4], 1.0, rng);
        let probe = Tensor::random_normal(&[3, 3], 1.0, rng);
        let rot = |t: &Tensor| {
            let d = t.data();
            rotation_matrix(normalize_quat([d[0], d[1], d[2], d[3]]))
        };
        let mut dr = [[0.0; 3]; 3];
        for (i, row) in dr.iter_mut().enumerate() {
            row.copy_from_slice(probe.row(i));
        }
        let d = r.data();
        let raw = [d[0], d[1], d[2], d[3]];
        let g = normalize_quat_backward(raw, rotation_backward(normalize_quat(raw), &dr));
        let f = |t: &Tensor| -> Result<Real> {
            let m = rot(t);
            Ok((0..3).map(|i| dot(&m[i], probe.row(i))).sum())
        };
        Ok(vec![(
            "rotation".into(),
            tensor_error(&r, &Tensor::vector(&g), f)?,
        )])
    })?);
    out.push(run_check("deformable", op_seeds, tol, |rng| {
        let plane = Tensor::random_normal(&[3, 5, 6], 1.0, rng);
        let view = PlaneView::dense(&plane)?;
        let n = 4;
        let mut x = Tensor::random_uniform(&[2 + 3 * n], -1.0, 1.0, rng);
        x.data_mut()[0] = rng.range(0.5, 4.5);
        x.data_mut()[1] = rng.range(0.5, 3.5);
        let probe: Vec<Real> = (0..3).map(|_| rng.normal()).collect();
        let unpack = |x: &[Real]| {
            let offs: Vec<[Real; 2]> = (0..n).map(|k| [x[2 + 2 * k], x[3 + 2 * k]]).collect();
            ([x[0], x[1]], offs, x[2 + 2 * n..].to_vec())
        };
        let (base, offs, w) = unpack(x.data());
        let (db, doff, dw) = deformable_sample_backward(&view, base, &offs, &w, &probe);
        let mut g = db.to_vec();
        g.extend(doff.iter().flatten());
        g.extend(&dw);
        let f = |t: &Tensor| -> Result<Real> {
            let (b, o, w) = unpack(t.data());
            Ok(dot(&deformable_sample(&view, b, &o, &w), &probe))
        };
        Ok(vec![(
            "inputs".into(),
            tensor_error(&x, &Tensor::vector(&g), f)?,
        )])
    })?);
    out.push(run_check("camera_lift", op_seeds, tol, |rng| {
        let cam = PinholeCamera::look_at(
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            4.0,
            4.0,
            3.0,
            2.0,
        )?;
        let image = CameraFeatureMap::new(cam, Tensor::random_normal(&[2, 5, 7], 1.0, rng))?;
        let mut params = CameraLiftParams::new(3, 3, 0.8);
        perturb(&mut params, 0.3, rng);
        let mut means = Tensor::random_uniform(&[4, 3], -1.0, 1.0, rng);
        for i in 0..4 {
            means.row_mut(i)[0] = rng.range(3.0, 6.0);
        }
        let feats = Tensor::random_normal(&[4, 3], 1.0, rng);
        let probe = Tensor::random_normal(&[4, 2], 1.0, rng);
        let f = |p: &CameraLiftParams, m: &Tensor, x: &Tensor| -> Result<Real> {
            Ok(camera_forward(p, m, x, &image)?.0.dot(&probe))
        };
        let (_, cache) = camera_forward(&params, &means, &feats, &image)?;
        let mut g = params.zeros_like();
        let (dm, df) = camera_backward(&params, &image, &cache, &probe, &mut g);
        let mut errs = parameter_errors(&params, &g, |p| f(p, &means, &feats))?;
        errs.push((
            "means".into(),
            tensor_error(&means, &dm, |t| f(&params, t, &feats))?,
        ));
        errs.push((
            "features".into(),
            tensor_error(&feats, &df, |t| f(&params, &means, t))?,
        ));
        Ok(errs)
    })?);
    out.push(run_check("ldfa", op_seeds, tol, |rng| {
        let (n, c, d) = (3, 3, 4);
        let vol = random_volume(c, [d, 6, 6], rng)?;
        let cfg = LdfaConfig {
            keypoints: 3,
            chunks: 2,
            ring_radius: 0.7,
        };
        let mut params = LdfaParams::new(4, c, d, &cfg, rng);
        perturb(&mut params, 0.3, rng);
        let means = anchors(n, rng);
        let feats = Tensor::random_normal(&[n, 4], 1.0, rng);
        let plan = ChunkPlan::for_mode(d, 2, Mode::Train, rng)?;
        let probe = Tensor::random_normal(&[n, c], 1.0, rng);
        let f = |p: &LdfaParams, m: &Tensor, x: &Tensor| -> Result<Real> {
            Ok(ldfa_forward(p, m, x, &vol, &plan)?.0.dot(&probe))
        };
        let (_, cache) = ldfa_forward(&params, &means, &feats, &vol, &plan)?;
        let mut g = params.zeros_like();
        let (dm, df) = ldfa_backward(&params, &vol, &cache, &probe, &mut g);
        let mut errs = parameter_errors(&params, &g, |p| f(p, &means, &feats))?;
        errs.push((
            "means".into(),
            tensor_error(&means, &dm, |t| f(&params, t, &feats))?,
        ));
        errs.push((
            "features".into(),
            tensor_error(&feats, &df, |t| f(&params, &means, t))?,
        ));
        Ok(errs)
    })?);
    out.push(run_check("column_mean", op_seeds, tol, |rng| {
        let vol = random_volume(3, [4, 6, 6], rng)?;
        let means = anchors(4, rng);
        let probe = Tensor::random_normal(&[4, 3], 1.0, rng);
        let dm = column_mean_backward(&means, &vol, &probe);
        Ok(vec![(
            "means".into(),
            tensor_error(&means, &dm, |m| {
                Ok(column_mean_forward(m, &vol)?.dot(&probe))
            })?,
        )])
    })?);
    out.push(run_check("ebfs", op_seeds, tol, |rng| {
        let c = SmoothingConfig {
            temperature: rng.range(0.5, 2.0),
            stabilizer: rng.range(1e-6, 1e-2),
            select_prob: 0.5,
        };
        let eps = rng.normal();
        let fc = Tensor::random_normal(&[4, 5], 1.0, rng);
        let fl = Tensor::random_normal(&[4, 5], 1.0, rng);
        let gc = Tensor::random_normal(&[4, 5], 1.0, rng);
        let gl = Tensor::random_normal(&[4, 5], 1.0, rng);
        let f = |fc: &Tensor, fl: &Tensor, eps: Real, tau: Real| -> Result<Real> {
            let c = SmoothingConfig {
                temperature: tau,
                ..c
            };
            let ((a, b), _) = smooth_forward(fc, fl, &c, eps, true)?;
            Ok(a.dot(&gc) + b.dot(&gl))
        };
        let (_, cache) = smooth_forward(&fc, &fl, &c, eps, true)?;
        let g = smooth_backward(&cache, &c, eps, &gc, &gl);
        let tau = c.temperature;
        Ok(vec![
            (
                "camera".into(),
                tensor_error(&fc, &g.fc, |t| f(t, &fl, eps, tau))?,
            ),
            (
                "lidar".into(),
                tensor_error(&fl, &g.fl, |t| f(&fc, t, eps, tau))?,
            ),
            (
                "epsilon".into(),
                tensor_error(&Tensor::scalar(eps), &Tensor::scalar(g.epsilon), |t| {
                    f(&fc, &fl, t.data()[0], tau)
                })?,
            ),
            (
                "temperature".into(),
                tensor_error(&Tensor::scalar(tau), &Tensor::scalar(g.temperature), |t| {
                    f(&fc, &fl, eps, t.data()[0])
                })?,
            ),
        ])
    })?);
    for mode in [FusionMode::Aclf, FusionMode::Add, FusionMode::Concat] {
        let name = format!("fusion_{}", format!("{mode:?}").to_lowercase());
        out.push(run_check(&name, op_seeds, tol, |rng| {
            let mut fusion = Fusion::new(mode, 4, 3, 1 + rng.below(2), rng)?;
            perturb(&mut fusion, 0.3, rng);
            let fl = Tensor::random_normal(&[5, 4], 1.0, rng);
            let fc = Tensor::random_normal(&[5, 4], 1.0, rng);
            let probe = Tensor::random_normal(&[5, 4], 1.0, rng);
            let f = |p: &Fusion, l: &Tensor, c: &Tensor| Ok(p.forward(l, c)?.0.dot(&probe));
            let (_, cache) = fusion.forward(&fl, &fc)?;
            let mut g = fusion.zeros_like();
            let (dl, dc) = fusion.backward(&cache, &probe, &mut g);
            let mut errs = parameter_errors(&fusion, &g, |p| f(p, &fl, &fc))?;
            errs.push((
                "lidar".into(),
                tensor_error(&fl, &dl, |t| f(&fusion, t, &fc))?,
            ));
            errs.push((
                "camera".into(),
                tensor_error(&fc, &dc, |t| f(&fusion, &fl, t))?,
            ));
            Ok(errs)
        })?);
    }
    out.push(run_check("positional", op_seeds, tol, |rng| {
        let b = Bounds::new([0.0, -2.0, 0.0], [8.0, 8.0, 4.0])?;
        let means = Tensor::random_uniform(&[4, 3], 0.0, 4.0, rng);
        let probe = Tensor::random_normal(&[4, encoding_width(2)], 1.0, rng);
        let g = positional_encode_backward(&means, &b, 2, &probe);
        Ok(vec![(
            "means".into(),
            tensor_error(&means, &g, |m| Ok(positional_encode(m, &b, 2).dot(&probe)))?,
        )])
    })?);
    out.push(run_check("scan", op_seeds, tol, |rng| {
        let (t, d, n) = (7, 3, 4);
        let x = Tensor::random_normal(&[t, d], 1.0, rng);
        let delta = Tensor::random_uniform(&[t, d], 0.1, 1.0, rng);
        let a = Tensor::random_uniform(&[d, n], -2.0, -0.1, rng);
        let b = Tensor::random_normal(&[t, n], 1.0, rng);
        let c = Tensor::random_normal(&[t, n], 1.0, rng);
        let ds = Tensor::random_normal(&[d], 1.0, rng);
        let probe = Tensor::random_normal(&[t, d], 1.0, rng);
        let g = selective_scan_backward(&x, &delta, &a, &b, &c, ds.data(), &probe)?;
        let inputs = [&x, &delta, &a, &b, &c, &ds];
        let grads = [g.x, g.delta, g.a, g.b, g.c, Tensor::vector(&g.d_skip)];
        let names = ["x", "delta", "a", "b", "c", "d_skip"];
        let mut errs = Vec::new();
        for k in 0..6 {
            let err = tensor_error(inputs[k], &grads[k], |v| {
                let mut args = inputs;
                args[k] = v;
                let [x, dl, a, b, c, ds] = args;
                Ok(selective_scan(x, dl, a, b, c, ds.data())?.dot(&probe))
            })?;
            errs.push((names[k].to_string(), err));
        }
        Ok(errs)
    })?);
    out.push(run_check("ssm_block", op_seeds, tol, |rng| {
        let mut blk = SsmBlock::new(4, 3, rng);
        perturb(&mut blk, 0.3, rng);
        let x = Tensor::random_normal(&[6, 4], 1.0, rng);
        let probe = Tensor::random_normal(&[6, 4], 1.0, rng);
        let (_, cache) = blk.forward(&x)?;
        let mut g = blk.zeros_like();
        let dx = blk.backward(&cache, &probe, &mut g);
        let mut errs = parameter_errors(&blk, &g, |b| Ok(b.forward(&x)?.0.dot(&probe)))?;
        errs.push((
            "x".into(),
            tensor_error(&x, &dx, |t| Ok(blk.forward(t)?.0.dot(&probe)))?,
        ));
        Ok(errs)
    })?);
    out.push(run_check("mamba_head", op_seeds, tol, |rng| {
        let bounds = Bounds::new([0.0; 3], [8.0, 8.0, 4.0])?;
        let cfg = MambaConfig {
            blocks: 2,
            state_dim: 3,
            bits: 4,
            bands: 2,
        };
        let set = random_set(8, 3, rng);
        let mut params = MambaParams::new(4, 3, &cfg, rng)?;
        perturb(&mut params, 0.1, rng);
        let fused = Tensor::random_normal(&[8, 4], 1.0, rng);
        let probe = random_set(8, 3, rng);
        let (_, cache) = params.forward(&set, &fused, &bounds)?;
        let mut g = params.zeros_like();
        let (dset, dfused) = params.backward(&cache, &probe, &mut g);
        let order = cache.order().to_vec();
        // the Morton order is piecewise constant; a perturbation that flips it
        // leaves the region where the gradient is defined
        let f = |s: &GaussianSet, x: &Tensor, p: &MambaParams| -> Result<Real> {
            let (out, c) = p.forward(s, x, &bounds)?;
            if c.order() != order.as_slice() {
                return Err(crate::Error::invalid("perturbation changed the order"));
            }
            Ok(dot(&out.flatten(), &probe.flatten()))
        };
        let mut errs = parameter_errors(&params, &g, |p| f(&set, &fused, p))?;
        errs.push((
            "fused".into(),
            tensor_error(&fused, &dfused, |t| f(&set, t, &params))?,
        ));
        for (name, e) in parameter_errors(&set, &dset, |s| f(s, &fused, &params))? {
            errs.push((format!("set.{name}"), e));
        }
        Ok(errs)
    })?);
    out.push(run_check("losses", op_seeds, tol, |rng| {
        let (n, c) = (12, 4);
        let logits = Tensor::random_normal(&[n * c], 2.0, rng);
        let gt: Vec<u16> = (0..n).map(|_| rng.below(c) as u16).collect();
        let weights: Vec<Real> = (0..c).map(|_| rng.range(0.2, 2.0)).collect();
        let w = LossWeights::new(rng.range(0.1, 2.0), rng.range(0.1, 2.0))?;
        let ce = Tensor::vector(&ce_loss_backward(logits.data(), c, &gt, Some(&weights))?);
        let lov = Tensor::vector(&lovasz_softmax_backward(logits.data(), c, &gt)?);
        let total = Tensor::vector(&total_loss_with_grad(logits.data(), c, &gt, w)?.1);
        Ok(vec![
            (
                "ce".into(),
                tensor_error(&logits, &ce, |t| ce_loss(t.data(), c, &gt, Some(&weights)))?,
            ),
            (
                "lovasz".into(),
                tensor_error(&logits, &lov, |t| lovasz_softmax(t.data(), c, &gt))?,
            ),
            (
                "total".into(),
                tensor_error(&logits, &total, |t| {
                    Ok(total_loss(t.data(), c, &gt, w)?.total)
                })?,
            ),
        ])
    })?);
    out.push(run_check(
        "pipeline",
        pipeline_seeds,
        PIPELINE_TOLERANCE,
        |rng| end_to_end_errors(rng.below(1 << 30) as u64),
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let errs = end_to_end_errors(seed).unwrap();
            let (name, err) = worst(&errs);
            assert!(err <= PIPELINE_TOLERANCE, "seed {seed} {name}: {err}");
        }
    }

    #[test]
    fn every_operation_passes_on_twenty_seeds() {
        for r in run_suite(20, 0).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }
}
