use crate::numerics::{
    join_name, layer_norm_backward, layer_norm_forward, silu, silu_grad, LayerNormCache, Linear,
    Parameters,
};
use crate::scene::GaussianSet;
use crate::{Result, Rng, Tensor};

const NORM_EPS: crate::Real = 1e-5;

/// Residual per-Gaussian feature refinement: `f ← f + FFN(LayerNorm(f))`
/// with a SiLU hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineBlock {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct RefineCache {
    norm: LayerNormCache,
    normed: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl RefineBlock {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            norm_gain: Tensor::full(&[dim], 1.0),
            norm_bias: Tensor::zeros(&[dim]),
            hidden: Linear::random(dim, hidden, 1.0, rng),
            output: Linear::random(hidden, dim, 0.5, rng),
        }
    }

    /// A block whose FFN is all zeros, i.e. the identity map.
    pub fn identity(dim: usize, hidden: usize) -> Self {
        Self {
            norm_gain: Tensor::full(&[dim], 1.0),
            norm_bias: Tensor::zeros(&[dim]),
            hidden: Linear::zeros(dim, hidden),
            output: Linear::zeros(hidden, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm_gain.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, RefineCache)> {
        let (normed, norm) = layer_norm_forward(x, &self.norm_gain, &self.norm_bias, NORM_EPS)?;
        let pre = self.hidden.forward(&normed);
        let act = pre.map(silu);
        let mut y = self.output.forward(&act);
        y.axpy(1.0, x);
        Ok((
            y,
            RefineCache {
                norm,
                normed,
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, cache: &RefineCache, dy: &Tensor, grad: &mut RefineBlock) -> Tensor {
        let dact = self.output.backward(&cache.act, dy, &mut grad.output);
        let mut dpre = dact;
        for (g, p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= silu_grad(*p);
        }
        let dnormed = self.hidden.backward(&cache.normed, &dpre, &mut grad.hidden);
        let (mut dx, dgain, dbias) = layer_norm_backward(&cache.norm, &self.norm_gain, &dnormed);
        grad.norm_gain.axpy(1.0, &dgain);
        grad.norm_bias.axpy(1.0, &dbias);
        dx.axpy(1.0, dy);
        dx
    }

    /// Refines the feature channel of a set; geometry and logits are untouched.
    pub fn apply(&self, set: &GaussianSet) -> Result<GaussianSet> {
        let mut out = set.clone();
        if set.is_empty() {
            return Ok(out);
        }
        out.features = self.forward(&set.features)?.0;
        Ok(out)
    }
}

impl Parameters for RefineBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join_name(prefix, "norm_gain"), &self.norm_gain));
        out.push((join_name(prefix, "norm_bias"), &self.norm_bias));
        self.hidden.visit(&join_name(prefix, "hidden"), out);
        self.output.visit(&join_name(prefix, "output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join_name(prefix, "norm_gain"), &mut self.norm_gain));
        out.push((join_name(prefix, "norm_bias"), &mut self.norm_bias));
        self.hidden.visit_mut(&join_name(prefix, "hidden"), out);
        self.output.visit_mut(&join_name(prefix, "output"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error, silu, DEFAULT_FD_STEP};
    use crate::Real;

    #[test]
    fn zero_ffn_is_identity() {
        let mut rng = Rng::new(1);
        let mut set = GaussianSet::zeros(4, 2, 3);
        set.features = Tensor::random_normal(&[4, 3], 1.0, &mut rng);
        let out = RefineBlock::identity(3, 5).apply(&set).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn hand_computed_two_dim_block() {
        // f = [1, 3]: layer norm gives [-1, 1] (up to eps)
        let block = RefineBlock {
            norm_gain: Tensor::vector(&[1.0, 1.0]),
            norm_bias: Tensor::vector(&[0.0, 0.0]),
            hidden: Linear {
                weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]).unwrap(),
                bias: Tensor::vector(&[0.0, -1.0]),
            },
            output: Linear {
                weight: Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, -2.0]]).unwrap(),
                bias: Tensor::vector(&[0.1, 0.0]),
            },
        };
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let (y, _) = block.forward(&x).unwrap();
        let n = 1.0 / (1.0 + 1e-5 as Real).sqrt();
        let (h0, h1) = (silu(-n), silu(-0.5 * n + 2.0 * n - 1.0));
        let expected = [1.0 + h0 + h1 + 0.1, 3.0 - 2.0 * h1];
        assert!((y.data()[0] - expected[0]).abs() < 1e-12);
        assert!((y.data()[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn permuting_gaussians_permutes_output() {
        let mut rng = Rng::new(2);
        let block = RefineBlock::new(4, 6, &mut rng);
        let mut set = GaussianSet::zeros(5, 2, 4);
        set.features = Tensor::random_normal(&[5, 4], 1.0, &mut rng);
        let order = [3, 0, 4, 1, 2];
        let a = block.apply(&set.permuted(&order)).unwrap();
        let b = block.apply(&set).unwrap().permuted(&order);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let root = Rng::new(3);
        for seed in 0..20 {
            let mut rng = root.split(seed);
            let mut block = RefineBlock::new(4, 6, &mut rng);
            block.norm_gain = Tensor::random_normal(&[4], 1.0, &mut rng);
            block.norm_bias = Tensor::random_normal(&[4], 1.0, &mut rng);
            let x = Tensor::random_normal(&[3, 4], 1.0, &mut rng);
            let p = Tensor::random_normal(&[3, 4], 1.0, &mut rng);
            let (_, cache) = block.forward(&x).unwrap();
            let mut grad = block.zeros_like();
            let dx = block.backward(&cache, &p, &mut grad);
            let fd = finite_difference_gradient(
                |t| Ok(block.forward(t)?.0.dot(&p)),
                &x,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(relative_error(dx.data(), fd.data()) < 1e-5);
            let fd = finite_difference_gradient(
                |t| {
                    let mut b = block.clone();
                    b.load_flat(t.data())?;
                    Ok(b.forward(&x)?.0.dot(&p))
                },
                &Tensor::vector(&block.flatten()),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(relative_error(&grad.flatten(), fd.data()) < 1e-5);
        }
    }
}
