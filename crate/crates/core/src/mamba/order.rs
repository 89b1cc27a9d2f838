use serde::{Deserialize, Serialize};

use crate::scene::{GridSpec, Vec3};
use crate::{numerics::PI, Error, Real, Result, Tensor};

/// Axis-aligned box used to quantize and normalize Gaussian means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Bounds {
    pub fn new(lo: Vec3, hi: Vec3) -> Result<Self> {
        if (0..3).any(|a| !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite()) {
            return Err(Error::invalid(format!("empty bounds {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn of_grid(spec: &GridSpec) -> Self {
        Self {
            lo: spec.origin,
            hi: spec.max_corner(),
        }
    }

    /// Coordinates mapped to `[−1, 1]`, with 0 at the center.
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| 2.0 * (p[a] - self.lo[a]) / (self.hi[a] - self.lo[a]) - 1.0)
    }

    fn extent(&self, a: usize) -> Real {
        self.hi[a] - self.lo[a]
    }
}

/// Morton (Z-order) curve over a `2^bits` lattice per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCurve {
    pub bounds: Bounds,
    pub bits: u32,
}

/// Interleaves the low `bits` of each coordinate, x in the lowest position.
pub fn morton_key(cell: [u32; 3], bits: u32) -> u64 {
    let mut key = 0u64;
    for b in 0..bits {
        for (a, &c) in cell.iter().enumerate() {
            key |= (((c >> b) & 1) as u64) << (3 * b + a as u32);
        }
    }
    key
}

impl OrderingCurve {
    pub fn new(bounds: Bounds, bits: u32) -> Result<Self> {
        if bits == 0 || bits > 21 {
            return Err(Error::invalid(format!(
                "curve bits must be in 1..=21, got {bits}"
            )));
        }
        Ok(Self { bounds, bits })
    }

    /// Lattice cell of a point; out-of-bounds coordinates clamp to the edge.
    pub fn cell(&self, p: Vec3) -> [u32; 3] {
        let side = 1u32 << self.bits;
        std::array::from_fn(|a| {
            let t = (p[a] - self.bounds.lo[a]) / self.bounds.extent(a) * side as Real;
            if t.is_nan() {
                0
            } else {
                t.floor().clamp(0.0, (side - 1) as Real) as u32
            }
        })
    }

    pub fn key(&self, p: Vec3) -> u64 {
        morton_key(self.cell(p), self.bits)
    }
}

/// Sequence order of the rows of `means` (`N×3`): stable sort by Morton key,
/// ties by index. `order[k]` is the Gaussian at sequence position `k`.
pub fn order_3d_to_1d(means: &Tensor, curve: &OrderingCurve) -> Vec<usize> {
    let keys: Vec<u64> = (0..means.rows())
        .map(|i| {
            let r = means.row(i);
            curve.key([r[0], r[1], r[2]])
        })
        .collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    order
}

/// `inverse[order[k]] = k`.
pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// Width of [`positional_encode`] for `bands` frequencies.
pub fn encoding_width(bands: usize) -> usize {
    6 * bands
}

/// `[sin(2π·2^k·n_a), cos(2π·2^k·n_a)]` for each axis `a` and band `k`, where
/// `n` is the mean normalized to `[−1, 1]`.
pub fn positional_encode(means: &Tensor, bounds: &Bounds, bands: usize) -> Tensor {
    let mut out = Tensor::zeros(&[means.rows(), encoding_width(bands)]);
    for i in 0..means.rows() {
        let r = means.row(i);
        let n = bounds.normalize([r[0], r[1], r[2]]);
        let row = out.row_mut(i);
        for a in 0..3 {
            for k in 0..bands {
                let w = 2.0 * PI * (1u64 << k) as Real;
                let base = 2 * (a * bands + k);
                row[base] = (w * n[a]).sin();
                row[base + 1] = (w * n[a]).cos();
            }
        }
    }
    out
}

/// Gradient of `⟨denc, positional_encode(means)⟩` w.r.t. the means.
pub fn positional_encode_backward(
    means: &Tensor,
    bounds: &Bounds,
    bands: usize,
    denc: &Tensor,
) -> Tensor {
    let mut dm = Tensor::zeros(&[means.rows(), 3]);
    for i in 0..means.rows() {
        let r = means.row(i);
        let n = bounds.normalize([r[0], r[1], r[2]]);
        let g = denc.row(i);
        for a in 0..3 {
            let dn_dm = 2.0 / bounds.extent(a);
            let mut acc = 0.0;
            for k in 0..bands {
                let w = 2.0 * PI * (1u64 << k) as Real;
                let base = 2 * (a * bands + k);
                acc += g[base] * w * (w * n[a]).cos() - g[base + 1] * w * (w * n[a]).sin();
            }
            dm.row_mut(i)[a] = acc * dn_dm;
        }
    }
    dm
}
