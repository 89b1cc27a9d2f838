use super::tensor::{matmul_nn, matmul_nt, matmul_tn};
use crate::{Error, Real, Result, Tensor};

/// Denominator floor for [`cosine_similarity`].
pub const COSINE_EPS: Real = 1e-8;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax of `x / temperature` along `axis`, with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize, temperature: Real) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if axis >= x.rank() {
        return Err(Error::invalid(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    x.ensure_finite("softmax input")?;
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut y = x.zeros_like();
    let src = x.data();
    let dst = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let max = (0..n)
                .map(|a| src[at(a)])
                .fold(Real::NEG_INFINITY, Real::max);
            let mut sum = 0.0;
            for a in 0..n {
                let e = ((src[at(a)] - max) / temperature).exp();
                dst[at(a)] = e;
                sum += e;
            }
            for a in 0..n {
                dst[at(a)] /= sum;
            }
        }
    }
    Ok(y)
}

/// Vector-Jacobian product of [`softmax`]. Returns `(dx, dtemperature)`.
pub fn softmax_backward(
    x: &Tensor,
    y: &Tensor,
    dy: &Tensor,
    axis: usize,
    temperature: Real,
) -> (Tensor, Real) {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut dx = x.zeros_like();
    let mut dtau = 0.0;
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let inner_prod: Real = (0..n).map(|a| y.data()[at(a)] * dy.data()[at(a)]).sum();
            for a in 0..n {
                let k = at(a);
                // gradient w.r.t. the scaled logits x / temperature
                let dz = y.data()[k] * (dy.data()[k] - inner_prod);
                dx.data_mut()[k] = dz / temperature;
                dtau -= dz * x.data()[k] / (temperature * temperature);
            }
        }
    }
    (dx, dtau)
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<Real>,
}

/// Normalizes each row (last axis) to zero mean and unit variance, then applies
/// `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: Real) -> Result<Tensor> {
    x.ensure_finite("layer_norm input")?;
    Ok(layer_norm_forward(x, gain, bias, eps)?.0)
}

pub fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: Real,
) -> Result<(Tensor, LayerNormCache)> {
    let cols = x.cols();
    if cols == 0 || x.rank() == 0 {
        return Err(Error::invalid("layer_norm over a zero-length axis"));
    }
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::shape(format!(
            "layer_norm gain/bias must have {cols} entries"
        )));
    }
    let rows = x.rows();
    let mut normalized = x.zeros_like();
    let mut out = x.zeros_like();
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<Real>() / cols as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
        let denom = var + eps;
        // a constant row with eps = 0 normalizes to zero instead of 0/0
        let s = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std.push(s);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * s;
        }
        let nrow = normalized.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = nrow[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let cols = dy.cols();
    let rows = dy.rows();
    let mut dx = dy.zeros_like();
    let mut dgain = gain.zeros_like();
    let mut dbias = gain.zeros_like();
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let g = dy.row(r);
        for j in 0..cols {
            dgain.data_mut()[j] += g[j] * xhat[j];
            dbias.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gain.data()[j];
        }
        let mean_d = dxhat.iter().sum::<Real>() / cols as Real;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<Real>() / cols as Real;
        let s = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

fn check_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("attention operands must be rank 2"));
    }
    if q.cols() == 0 {
        return Err(Error::invalid("attention with key dimension 0"));
    }
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "query dim {} != key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

/// `softmax(Q·Kᵀ/√d)·V`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    q.ensure_finite("attention queries")?;
    k.ensure_finite("attention keys")?;
    v.ensure_finite("attention values")?;
    Ok(attention_forward(q, k, v)?.0)
}

/// Returns the attention output and the row-stochastic weight matrix.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    check_attention(q, k, v)?;
    let (n, d, m, dv) = (q.rows(), q.cols(), k.rows(), v.cols());
    let scale = 1.0 / (d as Real).sqrt();
    let mut w = Tensor::zeros(&[n, m]);
    matmul_nt(q.data(), k.data(), w.data_mut(), n, d, m);
    for i in 0..n {
        let row = w.row_mut(i);
        let max = row.iter().fold(Real::NEG_INFINITY, |a, &b| a.max(b)) * scale;
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s * scale - max).exp();
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
    }
    let mut out = Tensor::zeros(&[n, dv]);
    matmul_nn(w.data(), v.data(), out.data_mut(), n, m, dv);
    Ok((out, w))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d, m, dvd) = (q.rows(), q.cols(), k.rows(), v.cols());
    let scale = 1.0 / (d as Real).sqrt();
    let mut dv = v.zeros_like();
    matmul_tn(weights.data(), dout.data(), dv.data_mut(), n, m, dvd);
    // dA = dO·Vᵀ, then softmax backward into the scaled scores
    let mut ds = Tensor::zeros(&[n, m]);
    matmul_nt(dout.data(), v.data(), ds.data_mut(), n, dvd, m);
    for i in 0..n {
        let a = weights.row(i);
        let row = ds.row_mut(i);
        let inner: Real = row.iter().zip(a).map(|(g, p)| g * p).sum();
        for (g, p) in row.iter_mut().zip(a) {
            *g = p * (*g - inner) * scale;
        }
    }
    let mut dq = q.zeros_like();
    matmul_nn(ds.data(), k.data(), dq.data_mut(), n, m, d);
    let mut dk = k.zeros_like();
    matmul_tn(ds.data(), q.data(), dk.data_mut(), n, m, d);
    (dq, dk, dv)
}

/// Row-wise cosine similarity `a·b / max(‖a‖‖b‖, eps)`.
///
/// Rank-1 inputs are treated as a single row.
pub fn cosine_similarity(a: &Tensor, b: &Tensor, eps: Real) -> Result<Vec<Real>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "cosine operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((0..a.rows())
        .map(|r| cosine_row(a.row(r), b.row(r), eps).0)
        .collect())
}

fn cosine_row(a: &[Real], b: &[Real], eps: Real) -> (Real, Real, Real, Real) {
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<Real>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<Real>().sqrt();
    let denom = (na * nb).max(eps);
    (dot / denom, na, nb, denom)
}

/// Returns `(da, db)` given per-row upstream gradients `dc`.
pub fn cosine_similarity_backward(
    a: &Tensor,
    b: &Tensor,
    eps: Real,
    dc: &[Real],
) -> (Tensor, Tensor) {
    let mut da = a.zeros_like();
    let mut db = b.zeros_like();
    for r in 0..a.rows() {
        let (ar, br) = (a.row(r), b.row(r));
        let (c, na, nb, denom) = cosine_row(ar, br, eps);
        let g = dc[r];
        let clamped = na * nb <= eps;
        let dar = da.row_mut(r);
        for j in 0..ar.len() {
            dar[j] = if clamped {
                g * br[j] / denom
            } else {
                g * (br[j] / denom - c * ar[j] / (na * na))
            };
        }
        let dbr = db.row_mut(r);
        for j in 0..br.len() {
            dbr[j] = if clamped {
                g * ar[j] / denom
            } else {
                g * (ar[j] / denom - c * br[j] / (nb * nb))
            };
        }
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error, Rng, DEFAULT_FD_STEP};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::vector(&[0.0, 0.0]), 0, 1.0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&Tensor::vector(&[1.0, 0.0]), 0, 1.0).unwrap();
        // e / (e + 1)
        assert_abs_diff_eq!(y.data()[0], 0.7310585786300049, epsilon = 1e-15);
        assert_abs_diff_eq!(y.data()[1], 0.2689414213699951, epsilon = 1e-15);
        let y = softmax(&Tensor::vector(&[5.0, -5.0]), 0, 1e6).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.5).abs() < 1e-5));
    }

    #[test]
    fn softmax_errors() {
        let x = Tensor::vector(&[1.0, 2.0]);
        assert!(softmax(&x, 0, 0.0).is_err());
        assert!(softmax(&x, 0, -1.0).is_err());
        assert!(softmax(&x, 1, 1.0).is_err());
        assert!(softmax(&Tensor::vector(&[1.0, Real::NAN]), 0, 1.0).is_err());
        assert!(softmax(&Tensor::vector(&[Real::INFINITY, 0.0]), 0, 1.0).is_err());
    }

    #[test]
    fn softmax_along_middle_axis() {
        let x = Tensor::from_vec(&[2, 3, 2], (0..12).map(|v| v as Real * 0.3).collect()).unwrap();
        let y = softmax(&x, 1, 0.7).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: Real = (0..3).map(|a| y.get(&[o, a, i])).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::vector(&[1.0, 1.0, 1.0]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(&Tensor::vector(&[1.0, 2.0, 3.0]), &ones, &zeros, 0.0).unwrap();
        let r = (1.5 as Real).sqrt();
        assert_abs_diff_eq!(y.data()[0], -r, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[2], r, epsilon = 1e-12);
        for a in [0.1, 1.0, 37.0] {
            let y = layer_norm(
                &Tensor::vector(&[-a, a]),
                &Tensor::full(&[2], 1.0),
                &Tensor::zeros(&[2]),
                0.0,
            )
            .unwrap();
            assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let x = Tensor::zeros(&[2, 0]);
        assert!(layer_norm(&x, &Tensor::zeros(&[0]), &Tensor::zeros(&[0]), 1e-5).is_err());
    }

    #[test]
    fn attention_examples() {
        // single key/value pair: output is the value regardless of the query
        let q = Tensor::from_rows(&[vec![0.3, -2.0], vec![5.0, 1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![4.0, -1.0, 2.0]]).unwrap();
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(o.row(0), v.row(0));
        assert_eq!(o.row(1), v.row(0));

        // orthogonal query, identical values
        let q = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![0.5, 0.25], vec![0.5, 0.25]]).unwrap();
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(o.row(0), &[0.5, 0.25]);

        let q = Tensor::from_rows(&[vec![10.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        let w = (-100.0 / (2.0 as Real).sqrt()).exp();
        let w = w / (1.0 + w);
        assert!((o.row(0)[0] - (1.0 - w)).abs() <= 1e-20);
        assert!((o.row(0)[1] - w).abs() <= 1e-20);
    }

    #[test]
    fn attention_shape_errors() {
        let q = Tensor::zeros(&[2, 0]);
        assert!(attention_forward(&q, &q, &q).is_err());
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[4, 2]);
        assert!(attention_forward(&q, &k, &Tensor::zeros(&[4, 1])).is_err());
        let k = Tensor::zeros(&[4, 3]);
        assert!(attention_forward(&q, &k, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = Tensor::vector(&[0.3, -1.2, 2.0]);
        assert_abs_diff_eq!(
            cosine_similarity(&a, &a, COSINE_EPS).unwrap()[0],
            1.0,
            epsilon = 1e-15
        );
        let c = cosine_similarity(
            &Tensor::vector(&[1.0, 0.0]),
            &Tensor::vector(&[0.0, 3.0]),
            COSINE_EPS,
        )
        .unwrap();
        assert_eq!(c[0], 0.0);
        let c = cosine_similarity(
            &Tensor::vector(&[1.0, 1.0]),
            &Tensor::vector(&[1.0, 0.0]),
            COSINE_EPS,
        )
        .unwrap();
        assert_abs_diff_eq!(
            c[0],
            std::f64::consts::FRAC_1_SQRT_2 as Real,
            epsilon = 1e-15
        );
        let z = Tensor::zeros(&[3]);
        assert_eq!(cosine_similarity(&z, &a, COSINE_EPS).unwrap()[0], 0.0);
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        for seed in 0..20 {
            let mut rng = rng.split(seed);
            let x = Tensor::random_normal(&[3, 4], 1.0, &mut rng);
            let proj = Tensor::random_normal(&[3, 4], 1.0, &mut rng);
            let tau = 0.5 + rng.uniform();
            // softmax along both axes, including the temperature
            for axis in 0..2 {
                let y = softmax(&x, axis, tau).unwrap();
                let (dx, dtau) = softmax_backward(&x, &y, &proj, axis, tau);
                let fd = finite_difference_gradient(
                    |t| Ok(softmax(t, axis, tau)?.dot(&proj)),
                    &x,
                    DEFAULT_FD_STEP,
                )
                .unwrap();
                assert!(relative_error(dx.data(), fd.data()) < 1e-5);
                let fd_tau = finite_difference_gradient(
                    |t| Ok(softmax(&x, axis, t.data()[0])?.dot(&proj)),
                    &Tensor::scalar(tau),
                    DEFAULT_FD_STEP,
                )
                .unwrap();
                assert!(relative_error(&[dtau], fd_tau.data()) < 1e-5);
            }

            let gain = Tensor::random_normal(&[4], 1.0, &mut rng);
            let bias = Tensor::random_normal(&[4], 1.0, &mut rng);
            let (_, cache) = layer_norm_forward(&x, &gain, &bias, 1e-5).unwrap();
            let (dx, dg, db) = layer_norm_backward(&cache, &gain, &proj);
            let f = |x: &Tensor, g: &Tensor, b: &Tensor| -> crate::Result<Real> {
                Ok(layer_norm(x, g, b, 1e-5)?.dot(&proj))
            };
            let fd =
                finite_difference_gradient(|t| f(t, &gain, &bias), &x, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(dx.data(), fd.data()) < 1e-5);
            let fd =
                finite_difference_gradient(|t| f(&x, t, &bias), &gain, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(dg.data(), fd.data()) < 1e-5);
            let fd =
                finite_difference_gradient(|t| f(&x, &gain, t), &bias, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(db.data(), fd.data()) < 1e-5);

            let q = Tensor::random_normal(&[3, 2], 1.0, &mut rng);
            let k = Tensor::random_normal(&[5, 2], 1.0, &mut rng);
            let v = Tensor::random_normal(&[5, 3], 1.0, &mut rng);
            let p = Tensor::random_normal(&[3, 3], 1.0, &mut rng);
            let (_, w) = attention_forward(&q, &k, &v).unwrap();
            let (dq, dk, dv) = attention_backward(&q, &k, &v, &w, &p);
            let att = |q: &Tensor, k: &Tensor, v: &Tensor| -> crate::Result<Real> {
                Ok(scaled_dot_attention(q, k, v)?.dot(&p))
            };
            let fd = finite_difference_gradient(|t| att(t, &k, &v), &q, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(dq.data(), fd.data()) < 1e-5);
            let fd = finite_difference_gradient(|t| att(&q, t, &v), &k, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(dk.data(), fd.data()) < 1e-5);
            let fd = finite_difference_gradient(|t| att(&q, &k, t), &v, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(dv.data(), fd.data()) < 1e-5);

            let a = Tensor::random_normal(&[3, 4], 1.0, &mut rng);
            let b = Tensor::random_normal(&[3, 4], 1.0, &mut rng);
            let dc = [0.3, -1.1, 0.7];
            let (da, db) = cosine_similarity_backward(&a, &b, COSINE_EPS, &dc);
            let cos = |a: &Tensor, b: &Tensor| -> crate::Result<Real> {
                Ok(cosine_similarity(a, b, COSINE_EPS)?
                    .iter()
                    .zip(&dc)
                    .map(|(c, g)| c * g)
                    .sum())
            };
            let fd = finite_difference_gradient(|t| cos(t, &b), &a, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(da.data(), fd.data()) < 1e-5);
            let fd = finite_difference_gradient(|t| cos(&a, t), &b, DEFAULT_FD_STEP).unwrap();
            assert!(relative_error(db.data(), fd.data()) < 1e-5);
        }
        let _ = rng.uniform();
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            xs in proptest::collection::vec(-50.0..50.0f64, 1..8),
            shift in -100.0..100.0f64,
            tau in 0.05..10.0f64,
        ) {
            let x = Tensor::vector(&xs.iter().map(|&v| v as Real).collect::<Vec<_>>());
            let shifted = x.map(|v| v + shift as Real);
            let a = softmax(&x, 0, tau as Real).unwrap();
            let b = softmax(&shifted, 0, tau as Real).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
            let s: Real = a.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            // order preserving
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] < xs[j] {
                        prop_assert!(a.data()[i] <= a.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, d in 1usize..5) {
            let mut rng = Rng::new(seed);
            let q = Tensor::random_normal(&[n, d], 3.0, &mut rng);
            let k = Tensor::random_normal(&[m, d], 3.0, &mut rng);
            let v = Tensor::random_normal(&[m, 2], 1.0, &mut rng);
            let (_, w) = attention_forward(&q, &k, &v).unwrap();
            for i in 0..n {
                let s: Real = w.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_is_scale_invariant(seed in 0u64..1000, lambda in 1e-3..1e3f64) {
            let mut rng = Rng::new(seed);
            let a = Tensor::random_normal(&[5], 1.0, &mut rng);
            let b = a.map(|v| v * lambda as Real);
            let c = cosine_similarity(&a, &b, COSINE_EPS).unwrap()[0];
            prop_assert!((c - 1.0).abs() <= 1e-12);
        }
    }
}
