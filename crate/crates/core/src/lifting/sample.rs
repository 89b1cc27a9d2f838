use crate::numerics::{softmax, softmax_backward};
use crate::{Error, Real, Result, Tensor};

/// A read-only `C×H×W` slice of a larger buffer.
///
/// Lattice point `(u, v)` (column, row) holds `data[offset + c·channel_stride + v·W + u]`.
/// Samples outside the lattice read as zero.
#[derive(Clone, Copy, Debug)]
pub struct PlaneView<'a> {
    pub data: &'a [Real],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub channel_stride: usize,
    pub offset: usize,
}

impl<'a> PlaneView<'a> {
    /// A dense `C×H×W` tensor viewed as one plane.
    pub fn dense(t: &'a Tensor) -> Result<Self> {
        let &[channels, height, width] = t.shape() else {
            return Err(Error::shape(format!(
                "expected a C×H×W tensor, got {:?}",
                t.shape()
            )));
        };
        Ok(Self {
            data: t.data(),
            channels,
            height,
            width,
            channel_stride: height * width,
            offset: 0,
        })
    }

    fn corners(&self, u: Real, v: Real) -> [(Option<usize>, Real, Real, Real); 4] {
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let idx = |du: Real, dv: Real| {
            let (x, y) = (u0 + du, v0 + dv);
            let inside = x >= 0.0 && y >= 0.0 && x < self.width as Real && y < self.height as Real;
            inside.then(|| self.offset + y as usize * self.width + x as usize)
        };
        // (index, weight, d weight/du, d weight/dv)
        [
            (
                idx(0.0, 0.0),
                (1.0 - fu) * (1.0 - fv),
                -(1.0 - fv),
                -(1.0 - fu),
            ),
            (idx(1.0, 0.0), fu * (1.0 - fv), 1.0 - fv, -fu),
            (idx(0.0, 1.0), (1.0 - fu) * fv, -fv, 1.0 - fu),
            (idx(1.0, 1.0), fu * fv, fv, fu),
        ]
    }

    /// Adds `scale ×` the bilinear sample at `(u, v)` into `out`.
    pub fn sample_into(&self, u: Real, v: Real, scale: Real, out: &mut [Real]) {
        if !u.is_finite() || !v.is_finite() {
            return;
        }
        for (idx, w, _, _) in self.corners(u, v) {
            if let Some(i) = idx {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += scale * w * self.data[i + c * self.channel_stride];
                }
            }
        }
    }

    pub fn sample(&self, u: Real, v: Real) -> Vec<Real> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(u, v, 1.0, &mut out);
        out
    }

    /// Gradient of `⟨dout, sample(u, v)⟩` w.r.t. `(u, v)`.
    pub fn sample_grad(&self, u: Real, v: Real, dout: &[Real]) -> (Real, Real) {
        if !u.is_finite() || !v.is_finite() {
            return (0.0, 0.0);
        }
        let (mut du, mut dv) = (0.0, 0.0);
        for (idx, _, wu, wv) in self.corners(u, v) {
            if let Some(i) = idx {
                let dot: Real = dout
                    .iter()
                    .enumerate()
                    .map(|(c, g)| g * self.data[i + c * self.channel_stride])
                    .sum();
                du += wu * dot;
                dv += wv * dot;
            }
        }
        (du, dv)
    }
}

/// `Σ_k w_k · bilinear(plane, base + offset_k)`.
pub fn deformable_sample(
    plane: &PlaneView<'_>,
    base: [Real; 2],
    offsets: &[[Real; 2]],
    weights: &[Real],
) -> Vec<Real> {
    debug_assert_eq!(offsets.len(), weights.len());
    let mut out = vec![0.0; plane.channels];
    for (o, &w) in offsets.iter().zip(weights) {
        plane.sample_into(base[0] + o[0], base[1] + o[1], w, &mut out);
    }
    out
}

/// Gradients of [`deformable_sample`]: `(d base, d offsets, d weights)`.
pub fn deformable_sample_backward(
    plane: &PlaneView<'_>,
    base: [Real; 2],
    offsets: &[[Real; 2]],
    weights: &[Real],
    dout: &[Real],
) -> ([Real; 2], Vec<[Real; 2]>, Vec<Real>) {
    let mut dbase = [0.0; 2];
    let mut doff = Vec::with_capacity(offsets.len());
    let mut dw = Vec::with_capacity(offsets.len());
    for (o, &w) in offsets.iter().zip(weights) {
        let (u, v) = (base[0] + o[0], base[1] + o[1]);
        let s = plane.sample(u, v);
        dw.push(s.iter().zip(dout).map(|(a, b)| a * b).sum());
        let (du, dv) = plane.sample_grad(u, v, dout);
        doff.push([w * du, w * dv]);
        dbase[0] += w * du;
        dbase[1] += w * dv;
    }
    (dbase, doff, dw)
}

/// Per-anchor keypoint offsets and softmax-normalized weights, produced by
/// linear maps of the anchor feature.
///
/// `offsets` is `N × (G·P·2)` and `logits` is `N × (G·P)` for `G` planes of
/// `P` keypoints each.
#[derive(Clone, Debug)]
pub(crate) struct Keypoints {
    pub groups: usize,
    pub points: usize,
    pub offsets: Tensor,
    pub logits: Tensor,
    pub weights: Tensor,
}

impl Keypoints {
    pub fn new(offsets: Tensor, logits: Tensor, groups: usize, points: usize) -> Result<Self> {
        let n = logits.rows();
        let grouped = logits.clone().reshape(&[n * groups, points])?;
        let weights = softmax(&grouped, 1, 1.0)?.reshape(&[n, groups * points])?;
        Ok(Self {
            groups,
            points,
            offsets,
            logits,
            weights,
        })
    }

    pub fn offsets(&self, i: usize, g: usize) -> Vec<[Real; 2]> {
        let row = self.offsets.row(i);
        (0..self.points)
            .map(|p| {
                let k = 2 * (g * self.points + p);
                [row[k], row[k + 1]]
            })
            .collect()
    }

    pub fn weights(&self, i: usize, g: usize) -> &[Real] {
        &self.weights.row(i)[g * self.points..(g + 1) * self.points]
    }

    /// Converts weight gradients into logit gradients.
    pub fn logits_backward(&self, dweights: &Tensor) -> Tensor {
        let n = self.logits.rows();
        let shape = [n * self.groups, self.points];
        let x = self.logits.clone().reshape(&shape).unwrap();
        let y = self.weights.clone().reshape(&shape).unwrap();
        let dy = dweights.clone().reshape(&shape).unwrap();
        softmax_backward(&x, &y, &dy, 1, 1.0)
            .0
            .reshape(&[n, self.groups * self.points])
            .unwrap()
    }
}

/// Initial offset bias: keypoint 0 at the anchor, the rest evenly spread on a
/// ring of `radius` lattice units.
pub(crate) fn ring_offsets(groups: usize, points: usize, radius: Real) -> Vec<Real> {
    let mut bias = Vec::with_capacity(groups * points * 2);
    for _ in 0..groups {
        for p in 0..points {
            if p == 0 {
                bias.extend([0.0, 0.0]);
            } else {
                let a = 2.0 * crate::numerics::PI * (p - 1) as Real / (points - 1) as Real;
                bias.extend([radius * a.cos(), radius * a.sin()]);
            }
        }
    }
    bias
}
