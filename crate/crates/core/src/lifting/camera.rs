use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::{deformable_sample, deformable_sample_backward, ring_offsets, Keypoints};
use super::PlaneView;
use crate::numerics::{impl_parameters, Linear};
use crate::scene::io::{read_file, BinReader, BinWriter};
use crate::scene::{GaussianSet, Mat3, Vec3};
use crate::{Error, Real, Result, Tensor};

pub const CAMERA_MAGIC: &[u8; 12] = b"GAUSSOCC-CAM";

/// Points closer than this to the image plane count as behind the camera.
pub const NEAR_PLANE: Real = 1e-3;

/// Pinhole camera. `rotation`/`translation` map world to camera coordinates
/// (x right, y down, z forward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub rotation: Mat3,
    pub translation: Vec3,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: Vec3) -> Vec3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl PinholeCamera {
    pub fn new(
        fx: Real,
        fy: Real,
        cx: Real,
        cy: Real,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with the image up direction
    /// closest to `up`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: Real,
        fy: Real,
        cx: Real,
        cy: Real,
    ) -> Result<Self> {
        let forward = sub(target, eye);
        let right = cross(forward, up);
        if forward.iter().all(|v| *v == 0.0) || right.iter().all(|v| v.abs() < 1e-12) {
            return Err(Error::invalid("degenerate camera orientation"));
        }
        let (f, r) = (normalized(forward), normalized(right));
        let down = cross(f, r);
        let rotation = [r, down, f];
        let t = |row: Vec3| -(row[0] * eye[0] + row[1] * eye[1] + row[2] * eye[2]);
        Self::new(fx, fy, cx, cy, rotation, [t(r), t(down), t(f)])
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx == 0.0 || self.fy == 0.0 {
            return Err(Error::invalid(
                "camera intrinsics must be finite and invertible",
            ));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        std::array::from_fn(|i| {
            r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i]
        })
    }

    /// Pixel coordinates `(u, v)` of a world point, or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<[Real; 2]> {
        let [x, y, z] = self.to_camera(p);
        (z > NEAR_PLANE).then(|| [self.fx * x / z + self.cx, self.fy * y / z + self.cy])
    }

    /// `d(u, v)/dp` as two rows.
    fn project_jacobian(&self, p: Vec3) -> [Vec3; 2] {
        let [x, y, z] = self.to_camera(p);
        let r = &self.rotation;
        let row = |f: Real, a: Real, ri: usize| -> Vec3 {
            std::array::from_fn(|k| f * (r[ri][k] / z - a * r[2][k] / (z * z)))
        };
        [row(self.fx, x, 0), row(self.fy, y, 1)]
    }

    /// Direction of the ray through pixel `(u, v)` in world coordinates and
    /// the camera center.
    pub fn ray(&self, u: Real, v: Real) -> (Vec3, Vec3) {
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        let dir = normalized(std::array::from_fn(|k| {
            (0..3).map(|i| r[i][k] * d_cam[i]).sum()
        }));
        let center =
            std::array::from_fn(|k| -(0..3).map(|i| r[i][k] * self.translation[i]).sum::<Real>());
        (dir, center)
    }
}

/// `C×H×W` image features with the camera that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFeatureMap {
    pub camera: PinholeCamera,
    pub values: Tensor,
}

impl CameraFeatureMap {
    pub fn new(camera: PinholeCamera, values: Tensor) -> Result<Self> {
        camera.validate()?;
        if values.rank() != 3 {
            return Err(Error::shape("camera features must be C×H×W"));
        }
        Ok(Self { camera, values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn view(&self) -> PlaneView<'_> {
        PlaneView::dense(&self.values).expect("rank checked at construction")
    }
}

pub fn encode_camera(map: &CameraFeatureMap) -> Vec<u8> {
    let mut w = BinWriter::default();
    w.header(CAMERA_MAGIC);
    for s in map.values.shape() {
        w.u32(*s as u32);
    }
    let c = &map.camera;
    for v in [c.fx, c.fy, c.cx, c.cy] {
        w.f32(v);
    }
    for v in c.rotation.iter().flatten().chain(&c.translation) {
        w.f32(*v);
    }
    for &v in map.values.data() {
        w.f32(v);
    }
    w.buf
}

pub fn decode_camera(bytes: &[u8], path: &Path) -> Result<CameraFeatureMap> {
    let mut r = BinReader::new(bytes, path);
    r.header(CAMERA_MAGIC)?;
    let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let mut scalars = [0.0; 16];
    for s in scalars.iter_mut() {
        *s = r.f32()?;
    }
    let rotation = [
        [scalars[4], scalars[5], scalars[6]],
        [scalars[7], scalars[8], scalars[9]],
        [scalars[10], scalars[11], scalars[12]],
    ];
    let camera = PinholeCamera::new(
        scalars[0],
        scalars[1],
        scalars[2],
        scalars[3],
        rotation,
        [scalars[13], scalars[14], scalars[15]],
    )
    .map_err(|e| r.err(e.to_string()))?;
    let n: usize = shape.iter().product();
    if r.remaining() != n * 4 {
        return Err(r.err("payload size does not match header"));
    }
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    CameraFeatureMap::new(camera, Tensor::from_vec(&shape, data)?)
}

pub fn write_camera(path: &Path, map: &CameraFeatureMap) -> Result<()> {
    std::fs::write(path, encode_camera(map))?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<CameraFeatureMap> {
    decode_camera(&read_file(path)?, path)
}

/// Learnable keypoint maps of the camera lift.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraLiftParams {
    pub keypoints: usize,
    /// Anchor feature → `P·2` pixel offsets.
    pub offset: Linear,
    /// Anchor feature → `P` keypoint logits.
    pub weight: Linear,
}

impl_parameters!(CameraLiftParams { offset, weight });

impl CameraLiftParams {
    pub fn new(feature_dim: usize, keypoints: usize, ring_radius: Real) -> Self {
        let mut offset = Linear::zeros(feature_dim, keypoints * 2);
        offset.bias = Tensor::vector(&ring_offsets(1, keypoints, ring_radius));
        Self {
            keypoints,
            offset,
            weight: Linear::zeros(feature_dim, keypoints),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CameraCache {
    features: Tensor,
    keypoints: Keypoints,
    /// Projected anchor and its world position, `None` when behind the camera.
    projected: Vec<Option<([Real; 2], Vec3)>>,
}

/// Camera features (`N×C`) sampled around each projected anchor; anchors
/// behind the camera get zeros.
pub fn camera_forward(
    params: &CameraLiftParams,
    means: &Tensor,
    features: &Tensor,
    cam: &CameraFeatureMap,
) -> Result<(Tensor, CameraCache)> {
    super::ldfa::check_lift_inputs(means, features, params.offset.in_dim())?;
    let kp = Keypoints::new(
        params.offset.forward(features),
        params.weight.forward(features),
        1,
        params.keypoints,
    )?;
    let view = cam.view();
    let mut out = Tensor::zeros(&[means.rows(), cam.channels()]);
    let mut projected = Vec::with_capacity(means.rows());
    for i in 0..means.rows() {
        let r = means.row(i);
        let p = [r[0], r[1], r[2]];
        let proj = cam.camera.project(p);
        if let Some(base) = proj {
            let s = deformable_sample(&view, base, &kp.offsets(i, 0), kp.weights(i, 0));
            out.row_mut(i).copy_from_slice(&s);
        }
        projected.push(proj.map(|b| (b, p)));
    }
    Ok((
        out,
        CameraCache {
            features: features.clone(),
            keypoints: kp,
            projected,
        },
    ))
}

/// Accumulates parameter gradients and returns `(d means, d features)`.
pub fn camera_backward(
    params: &CameraLiftParams,
    cam: &CameraFeatureMap,
    cache: &CameraCache,
    dout: &Tensor,
    grad: &mut CameraLiftParams,
) -> (Tensor, Tensor) {
    let kp = &cache.keypoints;
    let view = cam.view();
    let mut dmeans = Tensor::zeros(&[cache.projected.len(), 3]);
    let mut doffsets = kp.offsets.zeros_like();
    let mut dweights = kp.weights.zeros_like();
    for (i, proj) in cache.projected.iter().enumerate() {
        let Some((base, p)) = proj else { continue };
        let (db, doff, dw) = deformable_sample_backward(
            &view,
            *base,
            &kp.offsets(i, 0),
            kp.weights(i, 0),
            dout.row(i),
        );
        doffsets.row_mut(i).copy_from_slice(&doff.concat());
        dweights.row_mut(i).copy_from_slice(&dw);
        let [ju, jv] = cam.camera.project_jacobian(*p);
        for k in 0..3 {
            dmeans.row_mut(i)[k] = db[0] * ju[k] + db[1] * jv[k];
        }
    }
    let dlogits = kp.logits_backward(&dweights);
    let mut dfeat = params
        .offset
        .backward(&cache.features, &doffsets, &mut grad.offset);
    dfeat.axpy(
        1.0,
        &params
            .weight
            .backward(&cache.features, &dlogits, &mut grad.weight),
    );
    (dmeans, dfeat)
}

/// The camera feature channel `F_C` (`N×C`) of a Gaussian set.
pub fn camera_lift(
    set: &GaussianSet,
    cam: &CameraFeatureMap,
    params: &CameraLiftParams,
) -> Result<Tensor> {
    Ok(camera_forward(params, &set.means, &set.features, cam)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{parameter_errors, tensor_error, worst};
    use crate::numerics::Parameters;
    use crate::Rng;

    fn forward_camera() -> PinholeCamera {
        // looks down +x from the origin
        PinholeCamera::look_at(
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            4.0,
            4.0,
            3.0,
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let cam = forward_camera();
        let [u, v] = cam.project([5.0, 0.0, 0.0]).unwrap();
        assert!((u - 3.0).abs() < 1e-12 && (v - 2.0).abs() < 1e-12);
        // +z in the world is up, i.e. smaller v
        assert!(cam.project([5.0, 0.0, 1.0]).unwrap()[1] < 2.0);
        assert!(cam.project([-1.0, 0.0, 0.0]).is_none());
        let (dir, center) = cam.ray(3.0, 2.0);
        assert!((dir[0] - 1.0).abs() < 1e-12 && center.iter().all(|c| c.abs() < 1e-12));
        assert!(PinholeCamera::new(
            0.0,
            1.0,
            0.0,
            0.0,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3]
        )
        .is_err());
    }

    fn image(rng: &mut Rng) -> CameraFeatureMap {
        CameraFeatureMap::new(
            forward_camera(),
            Tensor::random_normal(&[2, 5, 7], 1.0, rng),
        )
        .unwrap()
    }

    #[test]
    fn lift_examples() {
        let mut rng = Rng::new(2);
        let cam = image(&mut rng);
        // single keypoint at the anchor
        let params = CameraLiftParams::new(3, 1, 0.0);
        let means = Tensor::from_rows(&[vec![4.0, 0.0, 0.0], vec![-2.0, 0.0, 0.0]]).unwrap();
        let feats = Tensor::zeros(&[2, 3]);
        let (out, _) = camera_forward(&params, &means, &feats, &cam).unwrap();
        assert_eq!(
            out.row(0),
            &[cam.values.get(&[0, 2, 3]), cam.values.get(&[1, 2, 3])]
        );
        assert_eq!(out.row(1), &[0.0, 0.0]);

        let flat = CameraFeatureMap::new(forward_camera(), Tensor::full(&[2, 5, 7], 0.8)).unwrap();
        let params = CameraLiftParams::new(3, 4, 1.0);
        let (out, _) = camera_forward(&params, &means, &feats, &flat).unwrap();
        assert!((out.row(0)[0] - 0.8).abs() < 1e-14 && (out.row(0)[1] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let root = Rng::new(31);
        for seed in 0..20 {
            let mut rng = root.split(seed);
            let cam = image(&mut rng);
            let mut params = CameraLiftParams::new(3, 3, 0.8);
            params.offset.weight =
                Tensor::random_normal(params.offset.weight.shape(), 0.3, &mut rng);
            params.weight = Linear::random(3, 3, 1.0, &mut rng);
            let mut means = Tensor::zeros(&[4, 3]);
            for i in 0..4 {
                means.row_mut(i).copy_from_slice(&[
                    rng.range(3.0, 6.0),
                    rng.range(-1.5, 1.5),
                    rng.range(-1.0, 1.0),
                ]);
            }
            let feats = Tensor::random_normal(&[4, 3], 1.0, &mut rng);
            let dout = Tensor::random_normal(&[4, 2], 1.0, &mut rng);
            let objective = |p: &CameraLiftParams, m: &Tensor, f: &Tensor| -> Result<Real> {
                Ok(camera_forward(p, m, f, &cam)?.0.dot(&dout))
            };
            let (_, cache) = camera_forward(&params, &means, &feats, &cam).unwrap();
            let mut grad = params.zeros_like();
            let (dm, df) = camera_backward(&params, &cam, &cache, &dout, &mut grad);
            let (name, err) =
                worst(&parameter_errors(&params, &grad, |p| objective(p, &means, &feats)).unwrap());
            assert!(err < 1e-5, "{name}: {err}");
            assert!(tensor_error(&means, &dm, |m| objective(&params, m, &feats)).unwrap() < 1e-5);
            assert!(tensor_error(&feats, &df, |f| objective(&params, &means, f)).unwrap() < 1e-5);
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cam = image(&mut Rng::new(1));
        let a = dir.path().join("a.cam");
        write_camera(&a, &cam).unwrap();
        let back = read_camera(&a).unwrap();
        let b = dir.path().join("b.cam");
        write_camera(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(back.values.shape(), &[2, 5, 7]);
    }

    #[test]
    fn parameters_are_named() {
        let names: Vec<String> = CameraLiftParams::new(2, 2, 1.0)
            .named()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(
            names,
            [
                "offset.weight",
                "offset.bias",
                "weight.weight",
                "weight.bias"
            ]
        );
    }
}
