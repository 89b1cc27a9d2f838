use super::tensor::{matmul_nn, matmul_nt, matmul_tn};
use super::{join_name, Parameters};
use crate::{Real, Rng, Tensor};

/// Affine map `y = x·Wᵀ + b` applied row-wise; `W` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Normal weights with standard deviation `gain / √in`, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, gain: Real, rng: &mut Rng) -> Self {
        let std = gain / (in_dim.max(1) as Real).sqrt();
        Self {
            weight: Tensor::random_normal(&[out_dim, in_dim], std, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, k, m) = (x.rows(), self.in_dim(), self.out_dim());
        debug_assert_eq!(x.cols(), k);
        let mut y = Tensor::zeros(&[n, m]);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(self.bias.data());
        }
        matmul_nt(x.data(), self.weight.data(), y.data_mut(), n, k, m);
        y
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Tensor {
        let (n, k, m) = (x.rows(), self.in_dim(), self.out_dim());
        let mut dx = Tensor::zeros(&[n, k]);
        matmul_nn(dy.data(), self.weight.data(), dx.data_mut(), n, m, k);
        matmul_tn(dy.data(), x.data(), grad.weight.data_mut(), n, m, k);
        for r in 0..n {
            for (b, g) in grad.bias.data_mut().iter_mut().zip(dy.row(r)) {
                *b += g;
            }
        }
        dx
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join_name(prefix, "weight"), &self.weight));
        out.push((join_name(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join_name(prefix, "weight"), &mut self.weight));
        out.push((join_name(prefix, "bias"), &mut self.bias));
    }
}
