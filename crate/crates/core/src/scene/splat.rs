use super::gaussian::{
    precision_matrix, rotation_backward, rotation_matrix, GaussianSet, Mat3, Vec3,
};
use crate::{Error, Real, Result, Tensor};

/// Influence radius multiplier: a Gaussian reaches voxel centres within
/// `cutoff_k · max(s)` of its mean.
pub const DEFAULT_CUTOFF_K: Real = 3.0;

/// Class index reserved for free space; also the argmax tie-break winner.
pub const EMPTY_CLASS: u16 = 0;

/// Placement and extents of a dense voxel lattice.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Vec3,
    pub voxel_size: Real,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vec3, voxel_size: Real, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::invalid(format!(
                "voxel size {voxel_size} must be positive"
            )));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major index with `x` slowest and `z` fastest.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.dims[2];
        let y = (index / self.dims[2]) % self.dims[1];
        let x = index / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let c = [x, y, z];
        [0, 1, 2].map(|a| self.origin[a] + (c[a] as Real + 0.5) * self.voxel_size)
    }

    /// Upper corner of the grid in world units.
    pub fn max_corner(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.origin[a] + self.dims[a] as Real * self.voxel_size)
    }

    /// Voxel containing a world point, if inside the grid.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if f < 0.0 || f >= self.dims[a] as Real {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Inclusive index span of voxel centres within `radius` of `m` along
    /// each axis; `None` when the span misses the grid.
    fn span(&self, m: Vec3, radius: Real) -> Option<[(usize, usize); 3]> {
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n == 0 {
                return None;
            }
            if !radius.is_finite() {
                out[a] = (0, n - 1);
                continue;
            }
            let lo = ((m[a] - radius - self.origin[a]) / self.voxel_size - 0.5).ceil();
            let hi = ((m[a] + radius - self.origin[a]) / self.voxel_size - 0.5).floor();
            if hi < 0.0 || lo > (n - 1) as Real || lo > hi {
                return None;
            }
            out[a] = (lo.max(0.0) as usize, (hi as usize).min(n - 1));
        }
        Some(out)
    }
}

/// Dense `X×Y×Z` grid of per-class logits plus the optional argmax label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub num_classes: usize,
    /// `X×Y×Z×|C|`, row-major.
    pub logits: Vec<Real>,
    pub labels: Option<Vec<u16>>,
}

impl VoxelGrid {
    pub fn zeros(spec: GridSpec, num_classes: usize) -> Self {
        Self {
            spec,
            num_classes,
            logits: vec![0.0; spec.num_voxels() * num_classes],
            labels: None,
        }
    }

    /// A grid whose logits are the one-hot encoding of `labels`.
    pub fn from_labels(spec: GridSpec, num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != spec.num_voxels() {
            return Err(Error::shape(format!(
                "{} labels for {} voxels",
                labels.len(),
                spec.num_voxels()
            )));
        }
        let mut grid = Self::zeros(spec, num_classes);
        for (v, &l) in labels.iter().enumerate() {
            if l as usize >= num_classes {
                return Err(Error::invalid(format!(
                    "label {l} >= {num_classes} classes"
                )));
            }
            grid.logits[v * num_classes + l as usize] = 1.0;
        }
        grid.labels = Some(labels);
        Ok(grid)
    }

    pub fn voxel_logits(&self, v: usize) -> &[Real] {
        &self.logits[v * self.num_classes..(v + 1) * self.num_classes]
    }

    /// Materializes `labels` from the current logits.
    pub fn with_labels(mut self) -> Self {
        self.labels = Some(argmax_labels(&self));
        self
    }

    /// The label grid, computing it if it was not materialized.
    pub fn label_grid(&self) -> Vec<u16> {
        self.labels.clone().unwrap_or_else(|| argmax_labels(self))
    }

    pub fn logits_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.spec.num_voxels(), self.num_classes],
            self.logits.clone(),
        )
        .expect("grid logits are consistent with their spec")
    }
}

/// Per-voxel index of the largest logit; ties go to the lowest class index.
pub fn argmax_labels(grid: &VoxelGrid) -> Vec<u16> {
    let c = grid.num_classes;
    (0..grid.spec.num_voxels())
        .map(|v| {
            let row = &grid.logits[v * c..(v + 1) * c];
            let mut best = 0;
            for (k, &val) in row.iter().enumerate().skip(1) {
                if val > row[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}

struct Prepared {
    mean: Vec3,
    rot: Mat3,
    prec: Mat3,
    opacity: Real,
    radius: Real,
}

impl Prepared {
    fn new(set: &GaussianSet, i: usize, cutoff_k: Real) -> Self {
        let rot = rotation_matrix(set.rotation(i));
        let log_scale = set.log_scale(i);
        let max_scale = log_scale
            .iter()
            .fold(Real::NEG_INFINITY, |a, &b| a.max(b))
            .exp();
        Self {
            mean: set.mean(i),
            prec: precision_matrix(&rot, log_scale),
            rot,
            opacity: set.opacity(i),
            radius: cutoff_k * max_scale,
        }
    }

    /// Calls `f(voxel, d, mahalanobis²)` for every voxel centre inside the
    /// cutoff sphere.
    fn for_each_covered(&self, spec: &GridSpec, mut f: impl FnMut(usize, Vec3, Real)) {
        let Some(span) = spec.span(self.mean, self.radius) else {
            return;
        };
        let r2 = self.radius * self.radius;
        let p = &self.prec;
        for x in span[0].0..=span[0].1 {
            for y in span[1].0..=span[1].1 {
                for z in span[2].0..=span[2].1 {
                    let c = spec.center(x, y, z);
                    let d = [
                        c[0] - self.mean[0],
                        c[1] - self.mean[1],
                        c[2] - self.mean[2],
                    ];
                    if self.radius.is_finite() && d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > r2 {
                        continue;
                    }
                    let q = p[0][0] * d[0] * d[0]
                        + p[1][1] * d[1] * d[1]
                        + p[2][2] * d[2] * d[2]
                        + 2.0
                            * (p[0][1] * d[0] * d[1]
                                + p[0][2] * d[0] * d[2]
                                + p[1][2] * d[1] * d[2]);
                    f(spec.index(x, y, z), d, q);
                }
            }
        }
    }
}

/// Sums every Gaussian's semantic contribution at the voxel centres within its
/// cutoff radius. Pass `Real::INFINITY` to include every voxel.
pub fn splat(set: &GaussianSet, spec: &GridSpec, cutoff_k: Real) -> VoxelGrid {
    let c = set.num_classes();
    let mut grid = VoxelGrid::zeros(*spec, c);
    for i in 0..set.len() {
        let prep = Prepared::new(set, i, cutoff_k);
        if prep.opacity == 0.0 {
            continue;
        }
        let logits = set.logits.row(i);
        prep.for_each_covered(spec, |v, _, q| {
            let w = prep.opacity * (-0.5 * q).exp();
            for (o, l) in grid.logits[v * c..(v + 1) * c].iter_mut().zip(logits) {
                *o += w * l;
            }
        });
    }
    grid
}

/// Gradient of `⟨dlogits, splat(set)⟩` with respect to every Gaussian field,
/// holding the cutoff membership fixed. Rotation gradients are with respect
/// to the stored (unit) quaternion components; features receive zero.
pub fn splat_backward(
    set: &GaussianSet,
    spec: &GridSpec,
    cutoff_k: Real,
    dlogits: &[Real],
) -> GaussianSet {
    let c = set.num_classes();
    let mut grad = GaussianSet::zeros(set.len(), c, set.feature_dim());
    for i in 0..set.len() {
        let prep = Prepared::new(set, i, cutoff_k);
        if prep.opacity == 0.0 {
            continue;
        }
        let logits = set.logits.row(i).to_vec();
        let mut dlog = vec![0.0; c];
        let mut dsigma = 0.0;
        let mut dmean = [0.0; 3];
        let mut dprec = [[0.0; 3]; 3];
        let p = prep.prec;
        prep.for_each_covered(spec, |v, d, q| {
            let g = &dlogits[v * c..(v + 1) * c];
            let e = (-0.5 * q).exp();
            let w = prep.opacity * e;
            let mut gc = 0.0;
            for k in 0..c {
                dlog[k] += w * g[k];
                gc += g[k] * logits[k];
            }
            dsigma += e * gc;
            let dq = -0.5 * w * gc;
            for a in 0..3 {
                let pd = p[a][0] * d[0] + p[a][1] * d[1] + p[a][2] * d[2];
                dmean[a] -= 2.0 * dq * pd;
                for b in 0..3 {
                    dprec[a][b] += dq * d[a] * d[b];
                }
            }
        });
        grad.logits.row_mut(i).copy_from_slice(&dlog);
        grad.means.row_mut(i).copy_from_slice(&dmean);
        grad.opacity_logits.data_mut()[i] = dsigma * prep.opacity * (1.0 - prep.opacity);

        // P = Σ_k a_k r_k r_kᵀ with a_k = exp(−2·log s_k) and r_k the k-th column of R
        let log_scale = set.log_scale(i);
        let rot = prep.rot;
        let mut drot = [[0.0; 3]; 3];
        let mut dls = [0.0; 3];
        for k in 0..3 {
            let a = (-2.0 * log_scale[k]).exp();
            let col = [rot[0][k], rot[1][k], rot[2][k]];
            let mut quad = 0.0;
            for r in 0..3 {
                for s in 0..3 {
                    quad += col[r] * dprec[r][s] * col[s];
                }
            }
            dls[k] = -2.0 * a * quad;
            for r in 0..3 {
                drot[r][k] = a
                    * (0..3)
                        .map(|s| (dprec[r][s] + dprec[s][r]) * col[s])
                        .sum::<Real>();
            }
        }
        grad.log_scales.row_mut(i).copy_from_slice(&dls);
        grad.rotations
            .row_mut(i)
            .copy_from_slice(&rotation_backward(set.rotation(i), &drot));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{
        finite_difference_gradient, relative_error, Parameters, Rng, DEFAULT_FD_STEP,
    };
    use crate::scene::{evaluate_gaussian, normalize_quat, Gaussian};

    fn spec(n: usize) -> GridSpec {
        GridSpec::new([0.0; 3], 1.0, [n; 3]).unwrap()
    }

    fn random_set(rng: &mut Rng, n: usize, classes: usize, extent: Real) -> GaussianSet {
        let gs: Vec<Gaussian> = (0..n)
            .map(|_| {
                Gaussian::new(
                    [
                        rng.range(0.0, extent),
                        rng.range(0.0, extent),
                        rng.range(0.0, extent),
                    ],
                    normalize_quat([rng.normal(), rng.normal(), rng.normal(), rng.normal()]),
                    [
                        rng.range(0.4, 1.5),
                        rng.range(0.4, 1.5),
                        rng.range(0.4, 1.5),
                    ],
                    rng.range(0.05, 0.95),
                    (0..classes).map(|_| rng.normal()).collect(),
                    vec![],
                )
                .unwrap()
            })
            .collect();
        GaussianSet::from_gaussians(&gs, classes, 0).unwrap()
    }

    /// Dense evaluation of every Gaussian at every voxel centre.
    fn brute_force(set: &GaussianSet, spec: &GridSpec) -> Vec<Real> {
        let c = set.num_classes();
        let mut out = vec![0.0; spec.num_voxels() * c];
        for v in 0..spec.num_voxels() {
            let [x, y, z] = spec.coords(v);
            for i in 0..set.len() {
                let contrib = evaluate_gaussian(spec.center(x, y, z), &set.get(i));
                for k in 0..c {
                    out[v * c + k] += contrib[k];
                }
            }
        }
        out
    }

    #[test]
    fn single_gaussian_single_voxel() {
        let s = spec(4);
        let g = Gaussian::new(
            s.center(1, 2, 3),
            [1.0, 0.0, 0.0, 0.0],
            [0.5; 3],
            0.8,
            vec![2.0, -1.0],
            vec![],
        )
        .unwrap();
        let set = GaussianSet::from_gaussians(&[g], 2, 0).unwrap();
        // radius 0.5·1.9 < 1 voxel
        let grid = splat(&set, &s, 1.9);
        for v in 0..s.num_voxels() {
            let l = grid.voxel_logits(v);
            if v == s.index(1, 2, 3) {
                assert!((l[0] - 1.6).abs() < 1e-15 && (l[1] + 0.8).abs() < 1e-15);
            } else {
                assert_eq!(l, &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn infinite_cutoff_matches_brute_force() {
        let mut rng = Rng::new(4);
        let set = random_set(&mut rng, 4, 3, 8.0);
        let s = spec(8);
        let grid = splat(&set, &s, Real::INFINITY);
        let oracle = brute_force(&set, &s);
        let diff = grid
            .logits
            .iter()
            .zip(&oracle)
            .fold(0.0 as Real, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-12, "max diff {diff}");
    }

    #[test]
    fn duplicated_gaussian_doubles_logits() {
        let mut rng = Rng::new(9);
        let set = random_set(&mut rng, 1, 2, 6.0);
        let twice = set.concat(&set).unwrap();
        let s = spec(6);
        let a = splat(&set, &s, DEFAULT_CUTOFF_K);
        let b = splat(&twice, &s, DEFAULT_CUTOFF_K);
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn empty_set_gives_zero_grid() {
        let set = GaussianSet::empty(3, 0);
        let grid = splat(&set, &spec(3), DEFAULT_CUTOFF_K);
        assert!(grid.logits.iter().all(|&v| v == 0.0));
        assert!(argmax_labels(&grid).iter().all(|&l| l == EMPTY_CLASS));
    }

    #[test]
    fn argmax_examples() {
        let s = GridSpec::new([0.0; 3], 1.0, [3, 1, 1]).unwrap();
        let mut g = VoxelGrid::zeros(s, 3);
        g.logits = vec![0.1, 0.9, 0.3, 0.0, 0.0, 0.0, 0.5, 0.5, 0.2];
        assert_eq!(argmax_labels(&g), vec![1, 0, 0]);
    }

    #[test]
    fn span_matches_distance_test() {
        let s = GridSpec::new([-1.0, 0.5, 2.0], 0.5, [7, 5, 9]).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let m = [
                rng.range(-3.0, 4.0),
                rng.range(-1.0, 4.0),
                rng.range(0.0, 8.0),
            ];
            let r = rng.range(0.1, 2.0);
            let mut inside = 0;
            for v in 0..s.num_voxels() {
                let [x, y, z] = s.coords(v);
                let c = s.center(x, y, z);
                if (0..3).map(|a| (c[a] - m[a]).powi(2)).sum::<Real>() <= r * r {
                    inside += 1;
                }
            }
            let mut counted = 0;
            if let Some(span) = s.span(m, r) {
                for x in span[0].0..=span[0].1 {
                    for y in span[1].0..=span[1].1 {
                        for z in span[2].0..=span[2].1 {
                            let c = s.center(x, y, z);
                            if (0..3).map(|a| (c[a] - m[a]).powi(2)).sum::<Real>() <= r * r {
                                counted += 1;
                            }
                        }
                    }
                }
            }
            assert_eq!(inside, counted);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let root = Rng::new(17);
        for seed in 0..20 {
            let mut rng = root.split(seed);
            let set = random_set(&mut rng, 3, 2, 5.0);
            let s = spec(5);
            let dl: Vec<Real> = (0..s.num_voxels() * 2).map(|_| rng.normal()).collect();
            // scale perturbations move the cutoff radius itself, so they are
            // checked with a cutoff wide enough to cover the grid
            for (k, names) in [
                (
                    DEFAULT_CUTOFF_K,
                    &["means", "rotations", "opacity_logits", "logits"][..],
                ),
                (
                    50.0,
                    &[
                        "means",
                        "rotations",
                        "log_scales",
                        "opacity_logits",
                        "logits",
                    ][..],
                ),
            ] {
                let grad = splat_backward(&set, &s, k, &dl);
                let objective = |p: &GaussianSet| -> Real {
                    splat(p, &s, k)
                        .logits
                        .iter()
                        .zip(&dl)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                // rotation gradients are taken w.r.t. the raw stored components
                for &name in names {
                    let pick = |p: &GaussianSet| -> Tensor {
                        p.named()
                            .into_iter()
                            .find(|(n, _)| n == name)
                            .unwrap()
                            .1
                            .clone()
                    };
                    let fd = finite_difference_gradient(
                        |t| {
                            let mut p = set.clone();
                            for (n, tensor) in p.named_mut() {
                                if n == name {
                                    *tensor = t.clone();
                                }
                            }
                            Ok(objective(&p))
                        },
                        &pick(&set),
                        DEFAULT_FD_STEP,
                    )
                    .unwrap();
                    let err = relative_error(pick(&grad).data(), fd.data());
                    assert!(err < 1e-5, "{name}: rel err {err}");
                }
            }
        }
    }

    #[test]
    fn linearity_and_cutoff_containment() {
        let root = Rng::new(5);
        for seed in 0..10 {
            let mut rng = root.split(seed);
            let a = random_set(&mut rng, 3, 2, 6.0);
            let b = random_set(&mut rng, 2, 2, 6.0);
            let s = spec(6);
            let ab = splat(&a.concat(&b).unwrap(), &s, DEFAULT_CUTOFF_K);
            let sa = splat(&a, &s, DEFAULT_CUTOFF_K);
            let sb = splat(&b, &s, DEFAULT_CUTOFF_K);
            for v in 0..ab.logits.len() {
                assert!((ab.logits[v] - sa.logits[v] - sb.logits[v]).abs() <= 1e-12);
            }
        }
    }
}
