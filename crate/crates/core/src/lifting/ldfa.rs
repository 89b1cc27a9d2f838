use serde::{Deserialize, Serialize};

use super::sample::{deformable_sample, deformable_sample_backward, ring_offsets, Keypoints};
use super::FeatureVolume;
use crate::numerics::{
    attention_backward, attention_forward, impl_parameters, logistic, matmul_nn, matmul_nt,
    matmul_tn, Linear,
};
use crate::scene::GaussianSet;
use crate::{Error, Mode, Real, Result, Rng, Tensor};

/// Partition of the `D` depth planes into `K` chunks after a permutation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    /// Plane indices `π(j)` for the positions `j ∈ S_k` of each chunk.
    pub chunks: Vec<Vec<usize>>,
    pub planes: usize,
}

impl ChunkPlan {
    /// Chunks of consecutive positions under `perm`; sizes differ by at most one.
    pub fn from_permutation(perm: &[usize], k: usize) -> Result<Self> {
        let d = perm.len();
        if k == 0 || k > d {
            return Err(Error::invalid(format!(
                "cannot split {d} planes into {k} chunks"
            )));
        }
        let mut seen = vec![false; d];
        for &p in perm {
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("chunk permutation is not a permutation"));
            }
        }
        let chunks = (0..k)
            .map(|c| perm[c * d / k..(c + 1) * d / k].to_vec())
            .collect();
        Ok(Self { chunks, planes: d })
    }

    pub fn identity(planes: usize, k: usize) -> Result<Self> {
        Self::from_permutation(&(0..planes).collect::<Vec<_>>(), k)
    }

    /// Identity in eval mode, a fresh random permutation in train mode.
    pub fn for_mode(planes: usize, k: usize, mode: Mode, rng: &mut Rng) -> Result<Self> {
        match mode {
            Mode::Eval => Self::identity(planes, k),
            Mode::Train => Self::from_permutation(&rng.permutation(planes), k),
        }
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }
}

/// Mean of the plane features (`D×C`) in each chunk, giving `K×C`.
pub fn chunk_aggregate(depth: &Tensor, plan: &ChunkPlan) -> Result<Tensor> {
    if depth.rank() != 2 || depth.rows() != plan.planes {
        return Err(Error::shape(format!(
            "plan covers {} planes, features have shape {:?}",
            plan.planes,
            depth.shape()
        )));
    }
    let c = depth.cols();
    let mut out = Tensor::zeros(&[plan.num_chunks(), c]);
    for (k, chunk) in plan.chunks.iter().enumerate() {
        let row = out.row_mut(k);
        for &d in chunk {
            for (o, v) in row.iter_mut().zip(depth.row(d)) {
                *o += v;
            }
        }
        let n = chunk.len() as Real;
        row.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

fn chunk_aggregate_backward(dchunks: &Tensor, plan: &ChunkPlan, ddepth: &mut Tensor) {
    for (k, chunk) in plan.chunks.iter().enumerate() {
        let n = chunk.len() as Real;
        for &d in chunk {
            for (o, g) in ddepth.row_mut(d).iter_mut().zip(dchunks.row(k)) {
                *o += g / n;
            }
        }
    }
}

/// Query/key/value projections (`C×C`, no bias) of the cross-depth attention.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAttention {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl_parameters!(DepthAttention { query, key, value });

impl DepthAttention {
    pub fn random(channels: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (channels as Real).sqrt();
        let mut m = || Tensor::random_normal(&[channels, channels], std, rng);
        Self {
            query: m(),
            key: m(),
            value: m(),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut eye = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            eye.set(&[i, i], 1.0);
        }
        Self {
            query: eye.clone(),
            key: eye.clone(),
            value: eye,
        }
    }
}

#[derive(Clone, Debug)]
struct ModulationCache {
    chunks: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Tensor,
}

fn project(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, w.rows()]);
    matmul_nt(x.data(), w.data(), out.data_mut(), n, c, w.rows());
    out
}

fn modulation_forward(chunks: &Tensor, p: &DepthAttention) -> Result<(Vec<Real>, ModulationCache)> {
    let (q, k, v) = (
        project(chunks, &p.query),
        project(chunks, &p.key),
        project(chunks, &p.value),
    );
    let (out, weights) = attention_forward(&q, &k, &v)?;
    let n = out.rows() as Real;
    let mut m = vec![0.0; out.cols()];
    for r in 0..out.rows() {
        for (a, b) in m.iter_mut().zip(out.row(r)) {
            *a += b / n;
        }
    }
    Ok((
        m,
        ModulationCache {
            chunks: chunks.clone(),
            q,
            k,
            v,
            weights,
        },
    ))
}

fn modulation_backward(
    p: &DepthAttention,
    cache: &ModulationCache,
    dm: &[Real],
    grad: &mut DepthAttention,
) -> Tensor {
    let (n, c) = (cache.chunks.rows(), cache.chunks.cols());
    let mut dout = Tensor::zeros(&[n, dm.len()]);
    for r in 0..n {
        for (o, g) in dout.row_mut(r).iter_mut().zip(dm) {
            *o = g / n as Real;
        }
    }
    let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.weights, &dout);
    let mut dx = Tensor::zeros(&[n, c]);
    for (d, w, g) in [
        (&dq, &p.query, &mut grad.query),
        (&dk, &p.key, &mut grad.key),
        (&dv, &p.value, &mut grad.value),
    ] {
        matmul_tn(d.data(), cache.chunks.data(), g.data_mut(), n, w.rows(), c);
        matmul_nn(d.data(), w.data(), dx.data_mut(), n, w.rows(), c);
    }
    dx
}

/// Mean over chunks of the chunk-to-chunk attention output.
pub fn cross_depth_modulation(chunks: &Tensor, params: &DepthAttention) -> Result<Vec<Real>> {
    if chunks.rank() != 2 || chunks.rows() == 0 {
        return Err(Error::shape("modulation needs at least one chunk"));
    }
    chunks.ensure_finite("depth chunks")?;
    Ok(modulation_forward(chunks, params)?.0)
}

/// `α·M + (1 − α)·G`.
pub fn gated_global_fusion(m: &[Real], g: &[Real], alpha: Real) -> Vec<Real> {
    m.iter()
        .zip(g)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect()
}

/// Depth-wise deformable aggregation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdfaConfig {
    /// Keypoints `P` per anchor and plane.
    pub keypoints: usize,
    /// Chunk count `K`.
    pub chunks: usize,
    /// Radius in lattice cells of the initial keypoint ring.
    pub ring_radius: Real,
}

impl Default for LdfaConfig {
    fn default() -> Self {
        Self {
            keypoints: 4,
            chunks: 4,
            ring_radius: 1.0,
        }
    }
}

/// Learnable state of the LiDAR lift.
#[derive(Clone, Debug, PartialEq)]
pub struct LdfaParams {
    pub planes: usize,
    pub keypoints: usize,
    /// Anchor feature → `D·P·2` offsets in lattice units.
    pub offset: Linear,
    /// Anchor feature → `D·P` keypoint logits.
    pub weight: Linear,
    pub attention: DepthAttention,
    pub alpha_logit: Tensor,
}

impl_parameters!(LdfaParams {
    offset,
    weight,
    attention,
    alpha_logit
});

impl LdfaParams {
    /// Offsets start on a fixed ring around the anchor (independent of the
    /// anchor feature); keypoint weights start uniform.
    pub fn new(
        feature_dim: usize,
        channels: usize,
        planes: usize,
        cfg: &LdfaConfig,
        rng: &mut Rng,
    ) -> Self {
        let p = cfg.keypoints;
        let mut offset = Linear::zeros(feature_dim, planes * p * 2);
        offset.bias = Tensor::vector(&ring_offsets(planes, p, cfg.ring_radius));
        Self {
            planes,
            keypoints: p,
            offset,
            weight: Linear::zeros(feature_dim, planes * p),
            attention: DepthAttention::random(channels, rng),
            alpha_logit: Tensor::vector(&[0.0]),
        }
    }

    pub fn alpha(&self) -> Real {
        logistic(self.alpha_logit.data()[0])
    }
}

#[derive(Clone, Debug)]
struct AnchorCache {
    base: [Real; 2],
    depth: Tensor,
    m: Vec<Real>,
    g: Vec<Real>,
    modulation: ModulationCache,
}

/// Intermediate values of [`ldfa_forward`] needed by [`ldfa_backward`].
#[derive(Clone, Debug)]
pub struct LdfaCache {
    features: Tensor,
    keypoints: Keypoints,
    plan: ChunkPlan,
    anchors: Vec<AnchorCache>,
}

pub(super) fn check_lift_inputs(
    means: &Tensor,
    features: &Tensor,
    feature_dim: usize,
) -> Result<()> {
    if means.rank() != 2
        || means.cols() != 3
        || features.rank() != 2
        || features.rows() != means.rows()
    {
        return Err(Error::shape(format!(
            "anchors {:?} and features {:?} disagree",
            means.shape(),
            features.shape()
        )));
    }
    if features.cols() != feature_dim {
        return Err(Error::shape(format!(
            "anchor features have {} columns, lift expects {feature_dim}",
            features.cols()
        )));
    }
    means.ensure_finite("anchor means")?;
    features.ensure_finite("anchor features")
}

/// LiDAR features (`N×C`) for the anchors `means` (`N×3`) conditioned on the
/// per-anchor `features`.
pub fn ldfa_forward(
    params: &LdfaParams,
    means: &Tensor,
    features: &Tensor,
    vol: &FeatureVolume,
    plan: &ChunkPlan,
) -> Result<(Tensor, LdfaCache)> {
    check_lift_inputs(means, features, params.offset.in_dim())?;
    if vol.planes() != params.planes || plan.planes != params.planes {
        return Err(Error::shape(format!(
            "lift built for {} planes, volume has {} and plan covers {}",
            params.planes,
            vol.planes(),
            plan.planes
        )));
    }
    if params.attention.query.cols() != vol.channels() {
        return Err(Error::shape(
            "attention width does not match volume channels",
        ));
    }
    let (n, c, planes) = (means.rows(), vol.channels(), params.planes);
    let kp = Keypoints::new(
        params.offset.forward(features),
        params.weight.forward(features),
        planes,
        params.keypoints,
    )?;
    let alpha = params.alpha();
    let mut out = Tensor::zeros(&[n, c]);
    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let r = means.row(i);
        let base = vol.spec.lattice_uv([r[0], r[1], r[2]]);
        let mut depth = Tensor::zeros(&[planes, c]);
        for d in 0..planes {
            let s = deformable_sample(&vol.plane(d), base, &kp.offsets(i, d), kp.weights(i, d));
            depth.row_mut(d).copy_from_slice(&s);
        }
        let chunks = chunk_aggregate(&depth, plan)?;
        let (m, modulation) = modulation_forward(&chunks, &params.attention)?;
        let mut g = vec![0.0; c];
        for d in 0..planes {
            for (a, b) in g.iter_mut().zip(depth.row(d)) {
                *a += b / planes as Real;
            }
        }
        out.row_mut(i)
            .copy_from_slice(&gated_global_fusion(&m, &g, alpha));
        anchors.push(AnchorCache {
            base,
            depth,
            m,
            g,
            modulation,
        });
    }
    out.ensure_finite("lifted LiDAR features")?;
    Ok((
        out,
        LdfaCache {
            features: features.clone(),
            keypoints: kp,
            plan: plan.clone(),
            anchors,
        },
    ))
}

/// Accumulates parameter gradients and returns `(d means, d features)`.
pub fn ldfa_backward(
    params: &LdfaParams,
    vol: &FeatureVolume,
    cache: &LdfaCache,
    dout: &Tensor,
    grad: &mut LdfaParams,
) -> (Tensor, Tensor) {
    let n = cache.anchors.len();
    let (planes, p) = (params.planes, params.keypoints);
    let alpha = params.alpha();
    let kp = &cache.keypoints;
    let mut dmeans = Tensor::zeros(&[n, 3]);
    let mut doffsets = kp.offsets.zeros_like();
    let mut dweights = kp.weights.zeros_like();
    let mut dalpha = 0.0;
    for (i, a) in cache.anchors.iter().enumerate() {
        let df = dout.row(i);
        let dm: Vec<Real> = df.iter().map(|g| alpha * g).collect();
        dalpha += df
            .iter()
            .zip(a.m.iter().zip(&a.g))
            .map(|(g, (m, gg))| g * (m - gg))
            .sum::<Real>();
        let dchunks =
            modulation_backward(&params.attention, &a.modulation, &dm, &mut grad.attention);
        let mut ddepth = a.depth.zeros_like();
        chunk_aggregate_backward(&dchunks, &cache.plan, &mut ddepth);
        for d in 0..planes {
            for (o, g) in ddepth.row_mut(d).iter_mut().zip(df) {
                *o += (1.0 - alpha) * g / planes as Real;
            }
            let offs = kp.offsets(i, d);
            let (db, doff, dw) = deformable_sample_backward(
                &vol.plane(d),
                a.base,
                &offs,
                kp.weights(i, d),
                ddepth.row(d),
            );
            let drow = doffsets.row_mut(i);
            for (k, o) in doff.iter().enumerate() {
                drow[2 * (d * p + k)] += o[0];
                drow[2 * (d * p + k) + 1] += o[1];
            }
            for (k, w) in dw.iter().enumerate() {
                dweights.row_mut(i)[d * p + k] += w;
            }
            dmeans.row_mut(i)[0] += db[0] / vol.spec.cell;
            dmeans.row_mut(i)[1] += db[1] / vol.spec.cell;
        }
    }
    grad.alpha_logit.data_mut()[0] += dalpha * alpha * (1.0 - alpha);
    let dlogits = kp.logits_backward(&dweights);
    let mut dfeat = params
        .offset
        .backward(&cache.features, &doffsets, &mut grad.offset);
    dfeat.axpy(
        1.0,
        &params
            .weight
            .backward(&cache.features, &dlogits, &mut grad.weight),
    );
    (dmeans, dfeat)
}

/// The LiDAR feature channel `F_L` (`N×C`) of a Gaussian set.
pub fn ldfa_lift(
    set: &GaussianSet,
    vol: &FeatureVolume,
    plan: &ChunkPlan,
    params: &LdfaParams,
) -> Result<Tensor> {
    Ok(ldfa_forward(params, &set.means, &set.features, vol, plan)?.0)
}

/// Ablation baseline without deformable aggregation: the mean over planes of
/// the single sample directly below each anchor.
pub fn column_mean_forward(means: &Tensor, vol: &FeatureVolume) -> Result<Tensor> {
    means.ensure_finite("anchor means")?;
    let planes = vol.planes();
    let mut out = Tensor::zeros(&[means.rows(), vol.channels()]);
    for i in 0..means.rows() {
        let r = means.row(i);
        let [u, v] = vol.spec.lattice_uv([r[0], r[1], r[2]]);
        let row = out.row_mut(i);
        for d in 0..planes {
            vol.plane(d).sample_into(u, v, 1.0 / planes as Real, row);
        }
    }
    Ok(out)
}

/// Gradient of [`column_mean_forward`] w.r.t. the means.
pub fn column_mean_backward(means: &Tensor, vol: &FeatureVolume, dout: &Tensor) -> Tensor {
    let planes = vol.planes();
    let mut dmeans = Tensor::zeros(&[means.rows(), 3]);
    for i in 0..means.rows() {
        let r = means.row(i);
        let [u, v] = vol.spec.lattice_uv([r[0], r[1], r[2]]);
        for d in 0..planes {
            let (du, dv) = vol.plane(d).sample_grad(u, v, dout.row(i));
            dmeans.row_mut(i)[0] += du / (planes as Real * vol.spec.cell);
            dmeans.row_mut(i)[1] += dv / (planes as Real * vol.spec.cell);
        }
    }
    dmeans
}
