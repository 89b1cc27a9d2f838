//! Adaptive camera/LiDAR fusion.
//!
//! Each stream attends to the other across the whole Gaussian set (residual
//! cross-attention), a learned per-channel mask mixes the two attended
//! streams, and a channel gate driven by the cosine agreement of the raw
//! streams in a shared latent space scales the result.

use serde::{Deserialize, Serialize};

use crate::numerics::{
    attention_backward, attention_forward, cosine_similarity, cosine_similarity_backward,
    impl_parameters, join_name, logistic, matmul_nn, matmul_nt, matmul_tn, silu, silu_grad, Linear,
    Parameters, COSINE_EPS,
};
use crate::{Error, Real, Result, Rng, Tensor};

/// How the camera and LiDAR streams are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `F_L + F_C`.
    Add,
    /// A linear map of `[F_L, F_C]`.
    Concat,
    /// Cross-attention, gated mixing and consistency reweighting.
    Aclf,
}

/// `x·Wᵀ` for a bias-free `out×in` matrix.
fn project(x: &Tensor, w: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[x.rows(), w.rows()]);
    matmul_nt(
        x.data(),
        w.data(),
        out.data_mut(),
        x.rows(),
        x.cols(),
        w.rows(),
    );
    out
}

/// Accumulates `dW += dyᵀ·x` and returns `dy·W`.
fn project_backward(x: &Tensor, w: &Tensor, dy: &Tensor, dw: &mut Tensor) -> Tensor {
    let (n, i, o) = (x.rows(), w.cols(), w.rows());
    matmul_tn(dy.data(), x.data(), dw.data_mut(), n, o, i);
    let mut dx = Tensor::zeros(&[n, i]);
    matmul_nn(dy.data(), w.data(), dx.data_mut(), n, o, i);
    dx
}

pub(crate) fn columns(t: &Tensor, start: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(&[t.rows(), width]);
    for r in 0..t.rows() {
        out.row_mut(r)
            .copy_from_slice(&t.row(r)[start..start + width]);
    }
    out
}

pub(crate) fn add_columns(dst: &mut Tensor, src: &Tensor, start: usize) {
    for r in 0..dst.rows() {
        for (d, s) in dst.row_mut(r)[start..].iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

pub(crate) fn hstack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[a.rows(), a.cols() + b.cols()]);
    add_columns(&mut out, a, 0);
    add_columns(&mut out, b, a.cols());
    out
}

/// One direction of residual cross-attention: queries from the receiving
/// stream, keys and values from the other.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl_parameters!(CrossAttention { query, key, value });

impl CrossAttention {
    pub fn random(dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (dim as Real).sqrt();
        let mut m = || Tensor::random_normal(&[dim, dim], std, rng);
        Self {
            query: m(),
            key: m(),
            value: m(),
        }
    }
}

#[derive(Clone, Debug)]
struct CrossCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Vec<Tensor>,
}

/// `receiver + MultiHead(receiver·Q, source·K, source·V)`.
fn cross_forward(
    p: &CrossAttention,
    receiver: &Tensor,
    source: &Tensor,
    heads: usize,
) -> Result<(Tensor, CrossCache)> {
    let (q, k, v) = (
        project(receiver, &p.query),
        project(source, &p.key),
        project(source, &p.value),
    );
    let width = q.cols() / heads;
    let mut out = receiver.clone();
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let s = h * width;
        let (o, w) = attention_forward(
            &columns(&q, s, width),
            &columns(&k, s, width),
            &columns(&v, s, width),
        )?;
        add_columns(&mut out, &o, s);
        weights.push(w);
    }
    Ok((out, CrossCache { q, k, v, weights }))
}

/// Returns `(d receiver, d source)`.
fn cross_backward(
    p: &CrossAttention,
    c: &CrossCache,
    receiver: &Tensor,
    source: &Tensor,
    dout: &Tensor,
    grad: &mut CrossAttention,
) -> (Tensor, Tensor) {
    let heads = c.weights.len();
    let width = c.q.cols() / heads;
    let (mut dq, mut dk, mut dv) = (c.q.zeros_like(), c.k.zeros_like(), c.v.zeros_like());
    for (h, w) in c.weights.iter().enumerate() {
        let s = h * width;
        let (gq, gk, gv) = attention_backward(
            &columns(&c.q, s, width),
            &columns(&c.k, s, width),
            &columns(&c.v, s, width),
            w,
            &columns(dout, s, width),
        );
        add_columns(&mut dq, &gq, s);
        add_columns(&mut dk, &gk, s);
        add_columns(&mut dv, &gv, s);
    }
    let mut drecv = project_backward(receiver, &p.query, &dq, &mut grad.query);
    drecv.axpy(1.0, dout);
    let mut dsrc = project_backward(source, &p.key, &dk, &mut grad.key);
    dsrc.axpy(
        1.0,
        &project_backward(source, &p.value, &dv, &mut grad.value),
    );
    (drecv, dsrc)
}

/// Learnable state of the adaptive fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct AclfParams {
    pub heads: usize,
    /// LiDAR queries attending to camera keys/values.
    pub to_lidar: CrossAttention,
    /// Camera queries attending to LiDAR keys/values.
    pub to_camera: CrossAttention,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    /// Latent projections (`d_p × d`) compared by cosine similarity.
    pub proj_camera: Tensor,
    pub proj_lidar: Tensor,
    pub consist_weight: Tensor,
    pub consist_bias: Tensor,
}

impl_parameters!(AclfParams {
    to_lidar,
    to_camera,
    gate_hidden,
    gate_out,
    proj_camera,
    proj_lidar,
    consist_weight,
    consist_bias,
});

impl AclfParams {
    pub fn new(dim: usize, latent: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        let std = 1.0 / (dim as Real).sqrt();
        Ok(Self {
            heads,
            to_lidar: CrossAttention::random(dim, rng),
            to_camera: CrossAttention::random(dim, rng),
            gate_hidden: Linear::random(2 * dim, dim, 1.0, rng),
            gate_out: Linear::random(dim, dim, 1.0, rng),
            proj_camera: Tensor::random_normal(&[latent, dim], std, rng),
            proj_lidar: Tensor::random_normal(&[latent, dim], std, rng),
            consist_weight: Tensor::full(&[dim], 1.0),
            consist_bias: Tensor::full(&[dim], 1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.consist_weight.len()
    }
}

/// `(H_L, H_C)`: residual cross-attention in both directions.
pub fn dual_cross_attention(
    f_l: &Tensor,
    f_c: &Tensor,
    p: &AclfParams,
) -> Result<(Tensor, Tensor)> {
    check_streams(f_l, f_c, p.dim())?;
    let (h_l, _) = cross_forward(&p.to_lidar, f_l, f_c, p.heads)?;
    let (h_c, _) = cross_forward(&p.to_camera, f_c, f_l, p.heads)?;
    Ok((h_l, h_c))
}

#[derive(Clone, Debug)]
struct GateCache {
    input: Tensor,
    pre: Tensor,
    act: Tensor,
    mask: Tensor,
}

fn gate_forward(h_l: &Tensor, h_c: &Tensor, p: &AclfParams) -> (Tensor, GateCache) {
    let input = hstack(h_l, h_c);
    let pre = p.gate_hidden.forward(&input);
    let act = pre.map(silu);
    let mask = p.gate_out.forward(&act).map(logistic);
    let mut fused = h_c.clone();
    for ((f, m), l) in fused.data_mut().iter_mut().zip(mask.data()).zip(h_l.data()) {
        *f = m * l + (1.0 - m) * *f;
    }
    (
        fused,
        GateCache {
            input,
            pre,
            act,
            mask,
        },
    )
}

/// `(H_fused, M_gate)` with `M_gate = logistic(MLP([H_L, H_C]))`.
pub fn gated_mix(h_l: &Tensor, h_c: &Tensor, p: &AclfParams) -> Result<(Tensor, Tensor)> {
    check_streams(h_l, h_c, p.dim())?;
    let (fused, cache) = gate_forward(h_l, h_c, p);
    Ok((fused, cache.mask))
}

#[derive(Clone, Debug)]
struct ConsistCache {
    lat_c: Tensor,
    lat_l: Tensor,
    score: Vec<Real>,
    gate: Tensor,
}

fn consist_forward(
    h_fused: &Tensor,
    f_c: &Tensor,
    f_l: &Tensor,
    p: &AclfParams,
) -> Result<(Tensor, ConsistCache)> {
    let lat_c = project(f_c, &p.proj_camera);
    let lat_l = project(f_l, &p.proj_lidar);
    let score: Vec<Real> = cosine_similarity(&lat_c, &lat_l, COSINE_EPS)?
        .into_iter()
        .map(|c| 0.5 * (1.0 + c))
        .collect();
    let mut gate = h_fused.zeros_like();
    for (i, s) in score.iter().enumerate() {
        for (c, g) in gate.row_mut(i).iter_mut().enumerate() {
            *g = logistic(p.consist_weight.data()[c] * s + p.consist_bias.data()[c]);
        }
    }
    let mut out = h_fused.clone();
    for (o, g) in out.data_mut().iter_mut().zip(gate.data()) {
        *o *= g;
    }
    Ok((
        out,
        ConsistCache {
            lat_c,
            lat_l,
            score,
            gate,
        },
    ))
}

/// `(F_final, W_consist)`: the fused stream scaled by a channel gate driven
/// by the cosine agreement of the projected raw streams.
pub fn consistency_reweight(
    h_fused: &Tensor,
    f_c: &Tensor,
    f_l: &Tensor,
    p: &AclfParams,
) -> Result<(Tensor, Tensor)> {
    check_streams(f_l, f_c, p.dim())?;
    check_streams(h_fused, f_c, p.dim())?;
    let (out, cache) = consist_forward(h_fused, f_c, f_l, p)?;
    Ok((out, cache.gate))
}

fn check_streams(a: &Tensor, b: &Tensor, dim: usize) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 2 || a.cols() != dim {
        return Err(Error::shape(format!(
            "fusion streams {:?} and {:?} (width {dim})",
            a.shape(),
            b.shape()
        )));
    }
    a.ensure_finite("fusion input")?;
    b.ensure_finite("fusion input")
}

/// Everything [`aclf_backward`] needs.
#[derive(Clone, Debug)]
pub struct AclfCache {
    f_l: Tensor,
    f_c: Tensor,
    cross_l: CrossCache,
    cross_c: CrossCache,
    h_l: Tensor,
    h_c: Tensor,
    gate: GateCache,
    fused: Tensor,
    consist: ConsistCache,
}

impl AclfCache {
    pub fn mask(&self) -> &Tensor {
        &self.gate.mask
    }

    /// The channel gate `W_consist` (`N×d`).
    pub fn consistency(&self) -> &Tensor {
        &self.consist.gate
    }
}

pub fn aclf_forward(f_l: &Tensor, f_c: &Tensor, p: &AclfParams) -> Result<(Tensor, AclfCache)> {
    check_streams(f_l, f_c, p.dim())?;
    let (h_l, cross_l) = cross_forward(&p.to_lidar, f_l, f_c, p.heads)?;
    let (h_c, cross_c) = cross_forward(&p.to_camera, f_c, f_l, p.heads)?;
    let (fused, gate) = gate_forward(&h_l, &h_c, p);
    let (out, consist) = consist_forward(&fused, f_c, f_l, p)?;
    out.ensure_finite("fused features")?;
    Ok((
        out,
        AclfCache {
            f_l: f_l.clone(),
            f_c: f_c.clone(),
            cross_l,
            cross_c,
            h_l,
            h_c,
            gate,
            fused,
            consist,
        },
    ))
}

/// Accumulates parameter gradients and returns `(d F_L, d F_C)`.
pub fn aclf_backward(
    p: &AclfParams,
    c: &AclfCache,
    dout: &Tensor,
    grad: &mut AclfParams,
) -> (Tensor, Tensor) {
    let (n, d) = (dout.rows(), dout.cols());
    // consistency gate
    let mut dfused = dout.clone();
    let mut dscore = vec![0.0; n];
    for i in 0..n {
        for j in 0..d {
            let k = i * d + j;
            let g = c.consist.gate.data()[k];
            dfused.data_mut()[k] = dout.data()[k] * g;
            let dz = dout.data()[k] * c.fused.data()[k] * g * (1.0 - g);
            grad.consist_weight.data_mut()[j] += dz * c.consist.score[i];
            grad.consist_bias.data_mut()[j] += dz;
            dscore[i] += dz * p.consist_weight.data()[j];
        }
    }
    let dcos: Vec<Real> = dscore.iter().map(|s| 0.5 * s).collect();
    let (dlat_c, dlat_l) =
        cosine_similarity_backward(&c.consist.lat_c, &c.consist.lat_l, COSINE_EPS, &dcos);
    let mut df_c = project_backward(&c.f_c, &p.proj_camera, &dlat_c, &mut grad.proj_camera);
    let mut df_l = project_backward(&c.f_l, &p.proj_lidar, &dlat_l, &mut grad.proj_lidar);

    // gated mixing
    let mut dh_l = dfused.zeros_like();
    let mut dh_c = dfused.zeros_like();
    let mut dlogit = dfused.zeros_like();
    for k in 0..n * d {
        let (m, g) = (c.gate.mask.data()[k], dfused.data()[k]);
        dh_l.data_mut()[k] = g * m;
        dh_c.data_mut()[k] = g * (1.0 - m);
        dlogit.data_mut()[k] = g * (c.h_l.data()[k] - c.h_c.data()[k]) * m * (1.0 - m);
    }
    let mut dpre = p
        .gate_out
        .backward(&c.gate.act, &dlogit, &mut grad.gate_out);
    for (g, x) in dpre.data_mut().iter_mut().zip(c.gate.pre.data()) {
        *g *= silu_grad(*x);
    }
    let dinput = p
        .gate_hidden
        .backward(&c.gate.input, &dpre, &mut grad.gate_hidden);
    dh_l.axpy(1.0, &columns(&dinput, 0, d));
    dh_c.axpy(1.0, &columns(&dinput, d, d));

    // cross-attention
    let (dl_recv, dc_src) = cross_backward(
        &p.to_lidar,
        &c.cross_l,
        &c.f_l,
        &c.f_c,
        &dh_l,
        &mut grad.to_lidar,
    );
    let (dc_recv, dl_src) = cross_backward(
        &p.to_camera,
        &c.cross_c,
        &c.f_c,
        &c.f_l,
        &dh_c,
        &mut grad.to_camera,
    );
    df_l.axpy(1.0, &dl_recv);
    df_l.axpy(1.0, &dl_src);
    df_c.axpy(1.0, &dc_recv);
    df_c.axpy(1.0, &dc_src);
    (df_l, df_c)
}

/// Cross-attention, gated mixing and consistency reweighting in order.
pub fn fuse(f_c: &Tensor, f_l: &Tensor, p: &AclfParams) -> Result<Tensor> {
    Ok(aclf_forward(f_l, f_c, p)?.0)
}

/// Fusion state for any [`FusionMode`].
#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    Add,
    Concat(Linear),
    Aclf(Box<AclfParams>),
}

impl Parameters for Fusion {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Fusion::Add => {}
            Fusion::Concat(l) => l.visit(&join_name(prefix, "concat"), out),
            Fusion::Aclf(p) => p.visit(&join_name(prefix, "aclf"), out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            Fusion::Add => {}
            Fusion::Concat(l) => l.visit_mut(&join_name(prefix, "concat"), out),
            Fusion::Aclf(p) => p.visit_mut(&join_name(prefix, "aclf"), out),
        }
    }
}

#[derive(Clone, Debug)]
pub enum FusionCache {
    Add,
    Concat(Tensor),
    Aclf(Box<AclfCache>),
}

impl Fusion {
    pub fn new(
        mode: FusionMode,
        dim: usize,
        latent: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match mode {
            FusionMode::Add => Fusion::Add,
            FusionMode::Concat => Fusion::Concat(Linear::random(2 * dim, dim, 1.0, rng)),
            FusionMode::Aclf => Fusion::Aclf(Box::new(AclfParams::new(dim, latent, heads, rng)?)),
        })
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            Fusion::Add => FusionMode::Add,
            Fusion::Concat(_) => FusionMode::Concat,
            Fusion::Aclf(_) => FusionMode::Aclf,
        }
    }

    pub fn forward(&self, f_l: &Tensor, f_c: &Tensor) -> Result<(Tensor, FusionCache)> {
        if f_l.shape() != f_c.shape() {
            return Err(Error::shape(format!(
                "fusion streams {:?} vs {:?}",
                f_l.shape(),
                f_c.shape()
            )));
        }
        match self {
            Fusion::Add => Ok((f_l.add(f_c), FusionCache::Add)),
            Fusion::Concat(lin) => {
                let x = hstack(f_l, f_c);
                Ok((lin.forward(&x), FusionCache::Concat(x)))
            }
            Fusion::Aclf(p) => {
                let (out, cache) = aclf_forward(f_l, f_c, p)?;
                Ok((out, FusionCache::Aclf(Box::new(cache))))
            }
        }
    }

    /// Returns `(d F_L, d F_C)`.
    pub fn backward(
        &self,
        cache: &FusionCache,
        dout: &Tensor,
        grad: &mut Fusion,
    ) -> (Tensor, Tensor) {
        match (self, cache, grad) {
            (Fusion::Add, _, _) => (dout.clone(), dout.clone()),
            (Fusion::Concat(lin), FusionCache::Concat(x), Fusion::Concat(g)) => {
                let dx = lin.backward(x, dout, g);
                let d = dout.cols();
                (columns(&dx, 0, d), columns(&dx, d, d))
            }
            (Fusion::Aclf(p), FusionCache::Aclf(c), Fusion::Aclf(g)) => {
                aclf_backward(p, c, dout, g)
            }
            _ => unreachable!("fusion cache and gradient match the fusion mode"),
        }
    }
}
