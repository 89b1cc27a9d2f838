use crate::numerics::{
    impl_parameters, layer_norm_backward, layer_norm_forward, logistic, matmul_nn, matmul_nt,
    matmul_tn, softplus, LayerNormCache, Linear,
};
use crate::{Error, Real, Result, Rng, Tensor};

const NORM_EPS: Real = 1e-5;

fn check_scan(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &[Real],
) -> Result<()> {
    let (t, d) = (x.rows(), x.cols());
    let n = a.cols();
    let ok = x.rank() == 2
        && delta.shape() == [t, d]
        && a.shape() == [d, n]
        && b.shape() == [t, n]
        && c.shape() == [t, n]
        && d_skip.len() == d;
    if !ok {
        return Err(Error::shape(format!(
            "scan inputs x {:?}, Δ {:?}, A {:?}, B {:?}, C {:?}, D {}",
            x.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d_skip.len()
        )));
    }
    if delta.data().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("scan step sizes must be positive"));
    }
    Ok(())
}

/// Returns the outputs `T×d` and every state `h_t` (`T×d×n`, flattened).
fn scan_forward(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &[Real],
) -> (Tensor, Vec<Real>) {
    let (t_len, d) = (x.rows(), x.cols());
    let n = a.cols();
    let mut y = Tensor::zeros(&[t_len, d]);
    let mut states = vec![0.0; t_len * d * n];
    for t in 0..t_len {
        let (xt, dt, bt, ct) = (x.row(t), delta.row(t), b.row(t), c.row(t));
        let yt = y.row_mut(t);
        for ch in 0..d {
            let arow = a.row(ch);
            let cur = (t * d + ch) * n;
            let mut acc = d_skip[ch] * xt[ch];
            for j in 0..n {
                let prev = if t == 0 { 0.0 } else { states[cur - d * n + j] };
                let h = (dt[ch] * arow[j]).exp() * prev + dt[ch] * bt[j] * xt[ch];
                states[cur + j] = h;
                acc += ct[j] * h;
            }
            yt[ch] = acc;
        }
    }
    (y, states)
}

/// Selective state-space scan, run independently per channel:
///
/// ```text
/// h_t = exp(Δ_t·A)·h_{t−1} + Δ_t·B_t·x_t,   h_0 = 0
/// y_t = C_t·h_t + D·x_t
/// ```
///
/// Shapes: `x`, `delta` are `T×d`; `a` is `d×n`; `b`, `c` are `T×n`.
pub fn selective_scan(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &[Real],
) -> Result<Tensor> {
    check_scan(x, delta, a, b, c, d_skip)?;
    Ok(scan_forward(x, delta, a, b, c, d_skip).0)
}

/// Gradients of [`selective_scan`].
#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub x: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d_skip: Vec<Real>,
}

#[allow(clippy::too_many_arguments)]
fn scan_backward_with(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &[Real],
    states: &[Real],
    dy: &Tensor,
) -> ScanGrads {
    let (t_len, d) = (x.rows(), x.cols());
    let n = a.cols();
    let mut g = ScanGrads {
        x: x.zeros_like(),
        delta: delta.zeros_like(),
        a: a.zeros_like(),
        b: b.zeros_like(),
        c: c.zeros_like(),
        d_skip: vec![0.0; d],
    };
    // carry[ch·n + j] = ∂L/∂h_t reaching step t from later steps
    let mut carry = vec![0.0; d * n];
    for t in (0..t_len).rev() {
        let (xt, dt, bt, ct, dyt) = (x.row(t), delta.row(t), b.row(t), c.row(t), dy.row(t));
        for ch in 0..d {
            let arow = a.row(ch);
            let cur = (t * d + ch) * n;
            g.d_skip[ch] += dyt[ch] * xt[ch];
            let mut dx = dyt[ch] * d_skip[ch];
            let mut ddt = 0.0;
            for j in 0..n {
                let h = states[cur + j];
                let prev = if t == 0 { 0.0 } else { states[cur - d * n + j] };
                let decay = (dt[ch] * arow[j]).exp();
                g.c.row_mut(t)[j] += dyt[ch] * h;
                let gh = carry[ch * n + j] + dyt[ch] * ct[j];
                dx += gh * dt[ch] * bt[j];
                ddt += gh * (arow[j] * decay * prev + bt[j] * xt[ch]);
                g.a.row_mut(ch)[j] += gh * dt[ch] * decay * prev;
                g.b.row_mut(t)[j] += gh * dt[ch] * xt[ch];
                carry[ch * n + j] = gh * decay;
            }
            g.x.row_mut(t)[ch] = dx;
            g.delta.row_mut(t)[ch] = ddt;
        }
    }
    g
}

/// Vector-Jacobian product of [`selective_scan`].
pub fn selective_scan_backward(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &[Real],
    dy: &Tensor,
) -> Result<ScanGrads> {
    check_scan(x, delta, a, b, c, d_skip)?;
    let (_, states) = scan_forward(x, delta, a, b, c, d_skip);
    Ok(scan_backward_with(x, delta, a, b, c, d_skip, &states, dy))
}

/// Residual selective-scan block: `x + W_out·scan(W_in·LN(x))`, with
/// `Δ = softplus(W_Δ·v + b_Δ)`, `B = W_B·v`, `C = W_C·v` and
/// `A = −exp(a_log)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmBlock {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub input: Linear,
    pub delta: Linear,
    pub b_proj: Tensor,
    pub c_proj: Tensor,
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub output: Linear,
}

impl_parameters!(SsmBlock {
    norm_gain,
    norm_bias,
    input,
    delta,
    b_proj,
    c_proj,
    a_log,
    d_skip,
    output
});

/// Initial step size `Δ` before any input dependence is learned.
const INITIAL_STEP: Real = 0.1;

impl SsmBlock {
    /// The output map starts at zero, so a fresh block is the identity.
    pub fn new(dim: usize, state: usize, rng: &mut Rng) -> Self {
        let mut delta = Linear::random(dim, dim, 0.1, rng);
        delta.bias.fill((INITIAL_STEP.exp() - 1.0).ln());
        let mut a_log = Tensor::zeros(&[dim, state]);
        for c in 0..dim {
            for j in 0..state {
                a_log.set(&[c, j], ((j + 1) as Real).ln());
            }
        }
        let std = 1.0 / (dim as Real).sqrt();
        Self {
            norm_gain: Tensor::full(&[dim], 1.0),
            norm_bias: Tensor::zeros(&[dim]),
            input: Linear::random(dim, dim, 1.0, rng),
            delta,
            b_proj: Tensor::random_normal(&[state, dim], std, rng),
            c_proj: Tensor::random_normal(&[state, dim], std, rng),
            a_log,
            d_skip: Tensor::full(&[dim], 1.0),
            output: Linear::zeros(dim, dim),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.cols()
    }

    fn a_matrix(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, SsmCache)> {
        let (normed, norm) = layer_norm_forward(x, &self.norm_gain, &self.norm_bias, NORM_EPS)?;
        let v = self.input.forward(&normed);
        let delta_pre = self.delta.forward(&v);
        let delta = delta_pre.map(softplus);
        let (t, n, dim) = (x.rows(), self.state_dim(), x.cols());
        let mut b = Tensor::zeros(&[t, n]);
        matmul_nt(v.data(), self.b_proj.data(), b.data_mut(), t, dim, n);
        let mut c = Tensor::zeros(&[t, n]);
        matmul_nt(v.data(), self.c_proj.data(), c.data_mut(), t, dim, n);
        let a = self.a_matrix();
        check_scan(&v, &delta, &a, &b, &c, self.d_skip.data())?;
        let (y, states) = scan_forward(&v, &delta, &a, &b, &c, self.d_skip.data());
        let mut out = self.output.forward(&y);
        out.axpy(1.0, x);
        out.ensure_finite("scan block output")?;
        Ok((
            out,
            SsmCache {
                norm,
                normed,
                v,
                delta_pre,
                delta,
                a,
                b,
                c,
                states,
                y,
            },
        ))
    }

    pub fn backward(&self, cache: &SsmCache, dout: &Tensor, grad: &mut SsmBlock) -> Tensor {
        let (t, n, dim) = (dout.rows(), self.state_dim(), dout.cols());
        let dy = self.output.backward(&cache.y, dout, &mut grad.output);
        let g = scan_backward_with(
            &cache.v,
            &cache.delta,
            &cache.a,
            &cache.b,
            &cache.c,
            self.d_skip.data(),
            &cache.states,
            &dy,
        );
        for (ga, (da, a)) in grad
            .a_log
            .data_mut()
            .iter_mut()
            .zip(g.a.data().iter().zip(cache.a.data()))
        {
            *ga += da * a;
        }
        for (gd, v) in grad.d_skip.data_mut().iter_mut().zip(&g.d_skip) {
            *gd += v;
        }
        let mut dv = g.x;
        matmul_tn(
            g.b.data(),
            cache.v.data(),
            grad.b_proj.data_mut(),
            t,
            n,
            dim,
        );
        matmul_nn(g.b.data(), self.b_proj.data(), dv.data_mut(), t, n, dim);
        matmul_tn(
            g.c.data(),
            cache.v.data(),
            grad.c_proj.data_mut(),
            t,
            n,
            dim,
        );
        matmul_nn(g.c.data(), self.c_proj.data(), dv.data_mut(), t, n, dim);
        let mut ddelta_pre = g.delta;
        for (d, p) in ddelta_pre.data_mut().iter_mut().zip(cache.delta_pre.data()) {
            *d *= logistic(*p);
        }
        dv.axpy(
            1.0,
            &self.delta.backward(&cache.v, &ddelta_pre, &mut grad.delta),
        );
        let dnormed = self.input.backward(&cache.normed, &dv, &mut grad.input);
        let (mut dx, dgain, dbias) = layer_norm_backward(&cache.norm, &self.norm_gain, &dnormed);
        grad.norm_gain.axpy(1.0, &dgain);
        grad.norm_bias.axpy(1.0, &dbias);
        dx.axpy(1.0, dout);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct SsmCache {
    norm: LayerNormCache,
    normed: Tensor,
    v: Tensor,
    delta_pre: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    states: Vec<Real>,
    y: Tensor,
}
