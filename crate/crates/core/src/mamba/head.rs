use serde::{Deserialize, Serialize};

use super::order::{
    encoding_width, order_3d_to_1d, positional_encode, positional_encode_backward, Bounds,
    OrderingCurve,
};
use super::scan::{SsmBlock, SsmCache};
use crate::aclf::{columns, hstack};
use crate::numerics::{impl_parameters, Linear};
use crate::scene::{
    normalize_quat, normalize_quat_backward, splat, GaussianSet, GridSpec, VoxelGrid,
};
use crate::{Error, Real, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaConfig {
    pub blocks: usize,
    pub state_dim: usize,
    /// Bits per axis of the Morton lattice.
    pub bits: u32,
    /// Frequency bands of the positional encoding.
    pub bands: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            state_dim: 16,
            bits: 6,
            bands: 4,
        }
    }
}

impl MambaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be positive".into()));
        }
        if !(1..=21).contains(&self.bits) {
            return Err(Error::Config(format!(
                "bits must be in 1..=21, got {}",
                self.bits
            )));
        }
        if self.bands > 20 {
            return Err(Error::Config(format!(
                "at most 20 bands, got {}",
                self.bands
            )));
        }
        Ok(())
    }
}

/// Per-Gaussian update width: mean (3), log-scale (3), quaternion (4),
/// opacity logit (1) and class logits.
pub fn head_width(num_classes: usize) -> usize {
    11 + num_classes
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaParams {
    pub bands: usize,
    pub bits: u32,
    pub pe_proj: Linear,
    pub blocks: Vec<SsmBlock>,
    pub head: Linear,
}

impl_parameters!(MambaParams {
    pe_proj,
    blocks,
    head
});

impl MambaParams {
    /// The projection starts as `[I | small]` and the head at zero, so a fresh
    /// module leaves the Gaussians unchanged.
    pub fn new(dim: usize, num_classes: usize, cfg: &MambaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let width = encoding_width(cfg.bands);
        let mut pe_proj = Linear::random(dim + width, dim, 0.1, rng);
        for r in 0..dim {
            let row = pe_proj.weight.row_mut(r);
            row[..dim].fill(0.0);
            row[r] = 1.0;
        }
        Ok(Self {
            bands: cfg.bands,
            bits: cfg.bits,
            pe_proj,
            blocks: (0..cfg.blocks)
                .map(|_| SsmBlock::new(dim, cfg.state_dim, rng))
                .collect(),
            head: Linear::zeros(dim, head_width(num_classes)),
        })
    }

    pub fn dim(&self) -> usize {
        self.head.in_dim()
    }
}

#[derive(Clone, Debug)]
pub struct MambaCache {
    input: GaussianSet,
    bounds: Bounds,
    pe_input: Tensor,
    order: Vec<usize>,
    blocks: Vec<SsmCache>,
    hidden: Tensor,
    summed_quats: Tensor,
}

impl MambaCache {
    /// Serialization order: position `k` holds Gaussian `order[k]`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl MambaParams {
    pub fn forward(
        &self,
        set: &GaussianSet,
        fused: &Tensor,
        bounds: &Bounds,
    ) -> Result<(GaussianSet, MambaCache)> {
        let n = set.len();
        if fused.shape() != [n, self.dim()] || self.head.out_dim() != head_width(set.num_classes())
        {
            return Err(Error::shape(format!(
                "refine expects {n}×{} features and {} classes, got {:?} and {}",
                self.dim(),
                self.head.out_dim() - 11,
                fused.shape(),
                set.num_classes()
            )));
        }
        let curve = OrderingCurve::new(*bounds, self.bits)?;
        let enc = positional_encode(&set.means, bounds, self.bands);
        let pe_input = hstack(fused, &enc);
        let order = order_3d_to_1d(&set.means, &curve);
        let mut x = self.pe_proj.forward(&pe_input).gather_rows(&order);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&x)?;
            x = y;
            caches.push(c);
        }
        let hidden = x.scatter_rows(&order);
        let delta = self.head.forward(&hidden);
        delta.ensure_finite("refinement head")?;

        let mut out = set.clone();
        let mut summed_quats = Tensor::zeros(&[n, 4]);
        for i in 0..n {
            let d = delta.row(i);
            for a in 0..3 {
                out.means.row_mut(i)[a] += d[a];
                out.log_scales.row_mut(i)[a] += d[3 + a];
            }
            let r = set.rotation(i);
            let q = [r[0] + d[6], r[1] + d[7], r[2] + d[8], r[3] + d[9]];
            if q.iter().map(|v| v * v).sum::<Real>() < 1e-12 {
                return Err(Error::NonFinite(format!(
                    "gaussian {i}: degenerate quaternion update"
                )));
            }
            summed_quats.row_mut(i).copy_from_slice(&q);
            out.rotations.row_mut(i).copy_from_slice(&normalize_quat(q));
            out.opacity_logits.data_mut()[i] += d[10];
            for (l, dl) in out.logits.row_mut(i).iter_mut().zip(&d[11..]) {
                *l += dl;
            }
        }
        let cache = MambaCache {
            input: set.clone(),
            bounds: *bounds,
            pe_input,
            order,
            blocks: caches,
            hidden,
            summed_quats,
        };
        Ok((out, cache))
    }

    /// Returns the gradients w.r.t. the input set and the fused features,
    /// with the serialization order held fixed.
    pub fn backward(
        &self,
        cache: &MambaCache,
        dout: &GaussianSet,
        grad: &mut MambaParams,
    ) -> (GaussianSet, Tensor) {
        let n = cache.input.len();
        let width = self.head.out_dim();
        let mut dset = dout.clone();
        let mut ddelta = Tensor::zeros(&[n, width]);
        for i in 0..n {
            let d = ddelta.row_mut(i);
            d[..3].copy_from_slice(dout.means.row(i));
            d[3..6].copy_from_slice(dout.log_scales.row(i));
            let s = cache.summed_quats.row(i);
            let dr = dout.rotations.row(i);
            let dq =
                normalize_quat_backward([s[0], s[1], s[2], s[3]], [dr[0], dr[1], dr[2], dr[3]]);
            d[6..10].copy_from_slice(&dq);
            dset.rotations.row_mut(i).copy_from_slice(&dq);
            d[10] = dout.opacity_logits.data()[i];
            d[11..].copy_from_slice(dout.logits.row(i));
        }
        let dhidden = self.head.backward(&cache.hidden, &ddelta, &mut grad.head);
        let mut dx = dhidden.gather_rows(&cache.order);
        for ((blk, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = blk.backward(c, &dx, g);
        }
        let dproj = dx.scatter_rows(&cache.order);
        let dpe = self
            .pe_proj
            .backward(&cache.pe_input, &dproj, &mut grad.pe_proj);
        let dim = self.dim();
        let dfused = columns(&dpe, 0, dim);
        let denc = columns(&dpe, dim, dpe.cols() - dim);
        let dmeans =
            positional_encode_backward(&cache.input.means, &cache.bounds, self.bands, &denc);
        dset.means.axpy(1.0, &dmeans);
        (dset, dfused)
    }
}

/// Refines every Gaussian with updates decoded from its serialized context.
pub fn gauss_mamba_refine(
    set: &GaussianSet,
    fused: &Tensor,
    bounds: &Bounds,
    params: &MambaParams,
) -> Result<GaussianSet> {
    Ok(params.forward(set, fused, bounds)?.0)
}

/// Splats the set and takes the per-voxel argmax.
pub fn predict_occupancy(set: &GaussianSet, spec: &GridSpec, cutoff_k: Real) -> VoxelGrid {
    splat(set, spec, cutoff_k).with_labels()
}
