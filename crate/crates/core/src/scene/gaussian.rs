use crate::numerics::{join_name, logistic, Parameters};
use crate::{Error, Real, Result, Tensor};

pub type Vec3 = [Real; 3];
pub type Mat3 = [[Real; 3]; 3];

/// Allowed deviation of ‖r‖ from 1 before [`covariance`] refuses a quaternion.
pub const QUAT_TOLERANCE: Real = 1e-6;

/// Rotation matrix of a unit quaternion stored `w, x, y, z`.
pub fn rotation_matrix(q: [Real; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Gradient of `⟨dR, R(q)⟩` with respect to the quaternion components, using
/// the polynomial form of [`rotation_matrix`].
pub fn rotation_backward(q: [Real; 4], dr: &Mat3) -> [Real; 4] {
    let [w, x, y, z] = q;
    let g = dr;
    let dw =
        2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let dy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let dz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [dw, dx, dy, dz]
}

pub fn normalize_quat(r: [Real; 4]) -> [Real; 4] {
    let n = r.iter().map(|v| v * v).sum::<Real>().sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    r.map(|v| v / n)
}

/// Backward of `q = r / ‖r‖`.
pub fn normalize_quat_backward(r: [Real; 4], dq: [Real; 4]) -> [Real; 4] {
    let n = r.iter().map(|v| v * v).sum::<Real>().sqrt();
    if n == 0.0 {
        return [0.0; 4];
    }
    let q = r.map(|v| v / n);
    let proj: Real = q.iter().zip(&dq).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (dq[k] - q[k] * proj) / n;
    }
    out
}

fn check_unit(r: [Real; 4]) -> Result<()> {
    let n = r.iter().map(|v| v * v).sum::<Real>().sqrt();
    if (n - 1.0).abs() > QUAT_TOLERANCE {
        return Err(Error::invalid(format!("quaternion norm {n} is not 1")));
    }
    Ok(())
}

/// `Σ = R·S·Sᵀ·Rᵀ` for a unit quaternion `r` and positive scales `s`.
pub fn covariance(r: [Real; 4], s: Vec3) -> Result<Mat3> {
    check_unit(r)?;
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!(
            "scales must be positive, got {s:?}"
        )));
    }
    Ok(rs_rt(&rotation_matrix(r), s.map(|v| v * v)))
}

/// `Σ⁻¹ = R·S⁻²·Rᵀ`, computed without a matrix inverse.
pub fn precision_matrix(rot: &Mat3, log_scale: Vec3) -> Mat3 {
    rs_rt(rot, log_scale.map(|l| (-2.0 * l).exp()))
}

fn rs_rt(rot: &Mat3, diag: Vec3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| rot[i][k] * diag[k] * rot[j][k]).sum();
        }
    }
    m
}

/// One anisotropic primitive. Scale and opacity are stored through their
/// unconstrained parameterizations (log and logit).
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    rotation: [Real; 4],
    pub log_scale: Vec3,
    pub opacity_logit: Real,
    pub logits: Vec<Real>,
    pub feature: Vec<Real>,
}

impl Gaussian {
    pub fn new(
        mean: Vec3,
        rotation: [Real; 4],
        scale: Vec3,
        opacity: Real,
        logits: Vec<Real>,
        feature: Vec<Real>,
    ) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!(
                "scales must be positive, got {scale:?}"
            )));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
        }
        let opacity_logit = if opacity == 0.0 {
            Real::NEG_INFINITY
        } else if opacity == 1.0 {
            Real::INFINITY
        } else {
            (opacity / (1.0 - opacity)).ln()
        };
        Ok(Self {
            mean,
            rotation: normalize_quat(rotation),
            log_scale: scale.map(Real::ln),
            opacity_logit,
            logits,
            feature,
        })
    }

    pub fn rotation(&self) -> [Real; 4] {
        self.rotation
    }

    /// Stores `r / ‖r‖`.
    pub fn set_rotation(&mut self, r: [Real; 4]) {
        self.rotation = normalize_quat(r);
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(Real::exp)
    }

    pub fn opacity(&self) -> Real {
        logistic(self.opacity_logit)
    }

    pub fn covariance(&self) -> Mat3 {
        rs_rt(&rotation_matrix(self.rotation), self.scale().map(|v| v * v))
    }
}

/// `σ · exp(−½ (x−m)ᵀ Σ⁻¹ (x−m)) · c`.
pub fn evaluate_gaussian(x: Vec3, g: &Gaussian) -> Vec<Real> {
    let sigma = g.opacity();
    if sigma == 0.0 {
        return vec![0.0; g.logits.len()];
    }
    let prec = precision_matrix(&rotation_matrix(g.rotation), g.log_scale);
    let d = [x[0] - g.mean[0], x[1] - g.mean[1], x[2] - g.mean[2]];
    let q: Real = (0..3)
        .map(|i| d[i] * (0..3).map(|j| prec[i][j] * d[j]).sum::<Real>())
        .sum();
    let w = sigma * (-0.5 * q).exp();
    g.logits.iter().map(|c| w * c).collect()
}

/// Ordered, fixed-size collection of Gaussians in structure-of-arrays form.
///
/// Shapes: `means N×3`, `rotations N×4`, `log_scales N×3`,
/// `opacity_logits N`, `logits N×|C|`, `features N×F`. Also serves as the
/// gradient container for itself.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub means: Tensor,
    pub rotations: Tensor,
    pub log_scales: Tensor,
    pub opacity_logits: Tensor,
    pub logits: Tensor,
    pub features: Tensor,
}

impl GaussianSet {
    pub fn empty(num_classes: usize, feature_dim: usize) -> Self {
        Self::zeros(0, num_classes, feature_dim)
    }

    /// `n` Gaussians with every parameter zero (including the quaternions).
    pub fn zeros(n: usize, num_classes: usize, feature_dim: usize) -> Self {
        Self {
            means: Tensor::zeros(&[n, 3]),
            rotations: Tensor::zeros(&[n, 4]),
            log_scales: Tensor::zeros(&[n, 3]),
            opacity_logits: Tensor::zeros(&[n, 1]),
            logits: Tensor::zeros(&[n, num_classes]),
            features: Tensor::zeros(&[n, feature_dim]),
        }
    }

    pub fn from_gaussians(
        gaussians: &[Gaussian],
        num_classes: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        let mut set = Self::zeros(gaussians.len(), num_classes, feature_dim);
        for (i, g) in gaussians.iter().enumerate() {
            set.set(i, g)?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn get(&self, i: usize) -> Gaussian {
        let r = self.rotations.row(i);
        Gaussian {
            mean: [
                self.means.row(i)[0],
                self.means.row(i)[1],
                self.means.row(i)[2],
            ],
            rotation: [r[0], r[1], r[2], r[3]],
            log_scale: [
                self.log_scales.row(i)[0],
                self.log_scales.row(i)[1],
                self.log_scales.row(i)[2],
            ],
            opacity_logit: self.opacity_logits.data()[i],
            logits: self.logits.row(i).to_vec(),
            feature: self.features.row(i).to_vec(),
        }
    }

    pub fn set(&mut self, i: usize, g: &Gaussian) -> Result<()> {
        if g.logits.len() != self.num_classes() || g.feature.len() != self.feature_dim() {
            return Err(Error::shape(format!(
                "gaussian has {} logits / {} features, set expects {} / {}",
                g.logits.len(),
                g.feature.len(),
                self.num_classes(),
                self.feature_dim()
            )));
        }
        self.means.row_mut(i).copy_from_slice(&g.mean);
        self.rotations
            .row_mut(i)
            .copy_from_slice(&normalize_quat(g.rotation));
        self.log_scales.row_mut(i).copy_from_slice(&g.log_scale);
        self.opacity_logits.data_mut()[i] = g.opacity_logit;
        self.logits.row_mut(i).copy_from_slice(&g.logits);
        self.features.row_mut(i).copy_from_slice(&g.feature);
        Ok(())
    }

    pub fn mean(&self, i: usize) -> Vec3 {
        let m = self.means.row(i);
        [m[0], m[1], m[2]]
    }

    pub fn rotation(&self, i: usize) -> [Real; 4] {
        let r = self.rotations.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    pub fn log_scale(&self, i: usize) -> Vec3 {
        let s = self.log_scales.row(i);
        [s[0], s[1], s[2]]
    }

    pub fn opacity(&self, i: usize) -> Real {
        logistic(self.opacity_logits.data()[i])
    }

    /// Re-normalizes every stored quaternion.
    pub fn normalize_rotations(&mut self) {
        for i in 0..self.len() {
            let q = normalize_quat(self.rotation(i));
            self.rotations.row_mut(i).copy_from_slice(&q);
        }
    }

    /// Applies the same row permutation to every field: output row `k` is
    /// input row `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            means: self.means.gather_rows(order),
            rotations: self.rotations.gather_rows(order),
            log_scales: self.log_scales.gather_rows(order),
            opacity_logits: self.opacity_logits.gather_rows(order),
            logits: self.logits.gather_rows(order),
            features: self.features.gather_rows(order),
        }
    }

    /// Concatenation of two sets with matching channel counts.
    pub fn concat(&self, other: &GaussianSet) -> Result<Self> {
        if self.num_classes() != other.num_classes() || self.feature_dim() != other.feature_dim() {
            return Err(Error::shape(
                "cannot concatenate sets with different channels",
            ));
        }
        let cat = |a: &Tensor, b: &Tensor| {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::from_vec(&[a.rows() + b.rows(), a.cols()], data)
        };
        Ok(Self {
            means: cat(&self.means, &other.means)?,
            rotations: cat(&self.rotations, &other.rotations)?,
            log_scales: cat(&self.log_scales, &other.log_scales)?,
            opacity_logits: cat(&self.opacity_logits, &other.opacity_logits)?,
            logits: cat(&self.logits, &other.logits)?,
            features: cat(&self.features, &other.features)?,
        })
    }

    /// Checks the representation invariants: unit quaternions, positive
    /// finite scales and opacities in `[0, 1]`.
    pub fn check_invariants(&self) -> Result<()> {
        for i in 0..self.len() {
            let n = self.rotation(i).iter().map(|v| v * v).sum::<Real>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("gaussian {i}: quaternion norm {n}")));
            }
            if self.log_scale(i).iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!("gaussian {i} scale")));
            }
            let o = self.opacity(i);
            if !(0.0..=1.0).contains(&o) {
                return Err(Error::invalid(format!("gaussian {i}: opacity {o}")));
            }
        }
        Ok(())
    }
}

impl Parameters for GaussianSet {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join_name(prefix, "means"), &self.means));
        out.push((join_name(prefix, "rotations"), &self.rotations));
        out.push((join_name(prefix, "log_scales"), &self.log_scales));
        out.push((join_name(prefix, "opacity_logits"), &self.opacity_logits));
        out.push((join_name(prefix, "logits"), &self.logits));
        out.push((join_name(prefix, "features"), &self.features));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join_name(prefix, "means"), &mut self.means));
        out.push((join_name(prefix, "rotations"), &mut self.rotations));
        out.push((join_name(prefix, "log_scales"), &mut self.log_scales));
        out.push((
            join_name(prefix, "opacity_logits"),
            &mut self.opacity_logits,
        ));
        out.push((join_name(prefix, "logits"), &mut self.logits));
        out.push((join_name(prefix, "features"), &mut self.features));
    }
}
