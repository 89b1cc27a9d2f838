use serde::{Deserialize, Serialize};

use crate::lifting::{CameraFeatureMap, LidarPoint, PinholeCamera};
use crate::scene::{GridSpec, Vec3, VoxelGrid, EMPTY_CLASS};
use crate::{Error, Real, Result, Rng, Tensor};

/// A solid primitive stamped into the label grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    /// Everything below `height`.
    Ground { height: Real, class: u16 },
    /// Box rotated by `yaw` about the vertical axis.
    Box {
        center: Vec3,
        half_extents: Vec3,
        yaw: Real,
        class: u16,
    },
    /// Upright cylinder standing on `base`.
    Cylinder {
        base: Vec3,
        radius: Real,
        height: Real,
        class: u16,
    },
}

impl Shape {
    pub fn class(&self) -> u16 {
        match self {
            Shape::Ground { class, .. }
            | Shape::Box { class, .. }
            | Shape::Cylinder { class, .. } => *class,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Shape::Ground { height, .. } => p[2] < height,
            Shape::Box {
                center,
                half_extents,
                yaw,
                ..
            } => {
                let (s, c) = yaw.sin_cos();
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let local = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
                (0..3).all(|a| local[a].abs() <= half_extents[a])
            }
            Shape::Cylinder {
                base,
                radius,
                height,
                ..
            } => {
                let (dx, dy) = (p[0] - base[0], p[1] - base[1]);
                dx * dx + dy * dy <= radius * radius && p[2] >= base[2] && p[2] <= base[2] + height
            }
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`; the ground is unbounded sideways.
    fn extent(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Ground { height, .. } => (
                [Real::NEG_INFINITY; 3],
                [Real::INFINITY, Real::INFINITY, height],
            ),
            Shape::Box {
                center,
                half_extents,
                yaw,
                ..
            } => {
                let (s, c) = yaw.sin_cos();
                let rx = c.abs() * half_extents[0] + s.abs() * half_extents[1];
                let ry = s.abs() * half_extents[0] + c.abs() * half_extents[1];
                let r = [rx, ry, half_extents[2]];
                (
                    std::array::from_fn(|a| center[a] - r[a]),
                    std::array::from_fn(|a| center[a] + r[a]),
                )
            }
            Shape::Cylinder {
                base,
                radius,
                height,
                ..
            } => (
                [base[0] - radius, base[1] - radius, base[2]],
                [base[0] + radius, base[1] + radius, base[2] + height],
            ),
        }
    }
}

/// LiDAR sampling: points per surface voxel, positional jitter (fraction of a
/// voxel, clamped to the voxel) and per-class intensity signatures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSpec {
    pub points_per_voxel: Real,
    pub jitter: Real,
    pub intensity_noise: Real,
    /// Sensor position, used by range noise.
    pub origin: Vec3,
}

/// Pinhole view whose pixels carry a noisy one-hot of the first class hit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub focal: Real,
    pub eye: Vec3,
    pub target: Vec3,
    pub noise: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub grid: GridSpec,
    pub num_classes: usize,
    /// Later shapes overwrite earlier ones where they overlap.
    pub shapes: Vec<Shape>,
    pub lidar: LidarSpec,
    pub camera: CameraSpec,
}

/// Ground-truth labels plus the two sensor observations of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    /// Labels with one-hot logits.
    pub labels: VoxelGrid,
    pub points: Vec<LidarPoint>,
    pub camera: CameraFeatureMap,
}

/// Intensity signature of a class: evenly spaced in `(0, 1)`.
pub fn class_intensity(class: u16, num_classes: usize) -> Real {
    class as Real / num_classes as Real
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.grid.dims.contains(&0) {
            return Err(Error::invalid("grid has no voxels"));
        }
        let lo = self.grid.origin;
        let hi = self.grid.max_corner();
        for (k, s) in self.shapes.iter().enumerate() {
            let c = s.class();
            if c == EMPTY_CLASS || c as usize >= self.num_classes {
                return Err(Error::invalid(format!(
                    "shape {k}: class {c} outside 1..{}",
                    self.num_classes
                )));
            }
            let (a, b) = s.extent();
            let positive = match *s {
                Shape::Ground { .. } => true,
                Shape::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
                Shape::Cylinder { radius, height, .. } => radius > 0.0 && height > 0.0,
            };
            let inside = (0..3).all(|i| {
                (a[i] >= lo[i] || a[i] == Real::NEG_INFINITY)
                    && (b[i] <= hi[i] || b[i] == Real::INFINITY)
            });
            let ground_ok = match *s {
                Shape::Ground { height, .. } => height >= lo[2] && height <= hi[2],
                _ => true,
            };
            if !positive || !inside || !ground_ok {
                return Err(Error::invalid(format!(
                    "shape {k} does not fit in the grid bounds"
                )));
            }
        }
        let l = &self.lidar;
        if !(l.points_per_voxel >= 0.0) || !(l.jitter >= 0.0) || !(l.intensity_noise >= 0.0) {
            return Err(Error::invalid(
                "lidar densities and noise levels must be nonnegative",
            ));
        }
        let c = &self.camera;
        if c.width == 0 || c.height == 0 || !(c.focal > 0.0) || !(c.noise >= 0.0) {
            return Err(Error::invalid(
                "camera needs a positive size, focal length and nonnegative noise",
            ));
        }
        self.pinhole().map(|_| ())
    }

    pub fn pinhole(&self) -> Result<PinholeCamera> {
        let c = &self.camera;
        PinholeCamera::look_at(
            c.eye,
            c.target,
            [0.0, 0.0, 1.0],
            c.focal,
            c.focal,
            (c.width as Real - 1.0) / 2.0,
            (c.height as Real - 1.0) / 2.0,
        )
    }
}

/// Label of every voxel: the last shape containing its center, or empty.
pub fn rasterize(spec: &SceneSpec) -> Vec<u16> {
    let g = &spec.grid;
    (0..g.num_voxels())
        .map(|v| {
            let [x, y, z] = g.coords(v);
            let c = g.center(x, y, z);
            spec.shapes
                .iter()
                .rev()
                .find(|s| s.contains(c))
                .map_or(EMPTY_CLASS, Shape::class)
        })
        .collect()
}

/// Occupied voxels with at least one empty face neighbor inside the grid.
fn surface_voxels(grid: &GridSpec, labels: &[u16]) -> Vec<usize> {
    let dims = grid.dims;
    (0..grid.num_voxels())
        .filter(|&v| {
            if labels[v] == EMPTY_CLASS {
                return false;
            }
            let c = grid.coords(v);
            (0..3).any(|a| {
                [-1i64, 1].iter().any(|&s| {
                    let n = c[a] as i64 + s;
                    if n < 0 || n >= dims[a] as i64 {
                        return false;
                    }
                    let mut nc = c;
                    nc[a] = n as usize;
                    labels[grid.index(nc[0], nc[1], nc[2])] == EMPTY_CLASS
                })
            })
        })
        .collect()
}

fn sample_points(spec: &SceneSpec, labels: &[u16], rng: &mut Rng) -> Vec<LidarPoint> {
    let g = &spec.grid;
    let l = &spec.lidar;
    let half = 0.5 * g.voxel_size;
    // stay strictly inside the voxel so the floor-based lookup agrees
    let limit = half * (1.0 - 1e-6);
    let mut points = Vec::new();
    for v in surface_voxels(g, labels) {
        let whole = l.points_per_voxel.floor();
        let count = whole as usize + usize::from(rng.bernoulli(l.points_per_voxel - whole));
        let [x, y, z] = g.coords(v);
        let center = g.center(x, y, z);
        let class = labels[v];
        for _ in 0..count {
            let position = std::array::from_fn(|a| {
                let offset = rng.range(-half, half) + l.jitter * g.voxel_size * rng.normal();
                center[a] + offset.clamp(-limit, limit)
            });
            let intensity =
                class_intensity(class, spec.num_classes) + l.intensity_noise * rng.normal();
            points.push(LidarPoint {
                position,
                intensity,
            });
        }
    }
    points
}

/// Class of the first occupied voxel along a ray, if any.
fn first_hit(grid: &GridSpec, labels: &[u16], origin: Vec3, dir: Vec3) -> Option<u16> {
    let hi = grid.max_corner();
    let lo = grid.origin;
    // slab intersection of the ray with the grid box
    let (mut t0, mut t1) = (0.0 as Real, Real::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 > t1 {
        return None;
    }
    let step = grid.voxel_size / 8.0;
    let mut t = t0 + 0.5 * step;
    while t < t1 {
        let p = std::array::from_fn(|a| origin[a] + t * dir[a]);
        if let Some([x, y, z]) = grid.voxel_of(p) {
            let l = labels[grid.index(x, y, z)];
            if l != EMPTY_CLASS {
                return Some(l);
            }
        }
        t += step;
    }
    None
}

fn render_camera(spec: &SceneSpec, labels: &[u16], rng: &mut Rng) -> Result<CameraFeatureMap> {
    let cam = spec.pinhole()?;
    let (w, h, c) = (spec.camera.width, spec.camera.height, spec.num_classes);
    let mut values = Tensor::zeros(&[c, h, w]);
    let data = values.data_mut();
    for row in 0..h {
        for col in 0..w {
            let (dir, center) = cam.ray(col as Real, row as Real);
            let class = first_hit(&spec.grid, labels, center, dir).unwrap_or(EMPTY_CLASS);
            data[(class as usize * h + row) * w + col] = 1.0;
        }
    }
    if spec.camera.noise > 0.0 {
        for v in data.iter_mut() {
            *v += spec.camera.noise * rng.normal();
        }
    }
    CameraFeatureMap::new(cam, values)
}

/// Rasterizes the shapes and simulates both sensors. Identical `(spec, seed)`
/// pairs give bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let rng = Rng::new(seed);
    let labels = rasterize(spec);
    let points = sample_points(spec, &labels, &mut rng.split(1));
    let camera = render_camera(spec, &labels, &mut rng.split(2))?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        labels: VoxelGrid::from_labels(spec.grid, spec.num_classes, labels)?,
        points,
        camera,
    })
}

/// Knobs of [`random_layout`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    pub grid: GridSpec,
    pub boxes: (usize, usize),
    pub cylinders: (usize, usize),
    pub points_per_voxel: Real,
    pub jitter: Real,
    pub intensity_noise: Real,
    pub image_width: usize,
    pub image_height: usize,
    pub camera_noise: Real,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                origin: [0.0; 3],
                voxel_size: 0.5,
                dims: [16, 16, 8],
            },
            boxes: (1, 3),
            cylinders: (1, 2),
            points_per_voxel: 2.0,
            jitter: 0.1,
            intensity_noise: 0.05,
            image_width: 48,
            image_height: 32,
            camera_noise: 0.1,
        }
    }
}

pub const GROUND_CLASS: u16 = 1;
pub const BOX_CLASS: u16 = 2;
pub const CYLINDER_CLASS: u16 = 3;
pub const CLASS_NAMES: [&str; 4] = ["empty", "ground", "box", "cylinder"];

/// A random street-like scene: a ground slab with boxes and cylinders
/// standing on it, seen by a LiDAR above the center and a camera at one edge.
pub fn random_layout(cfg: &LayoutConfig, rng: &mut Rng) -> Result<SceneSpec> {
    let g = cfg.grid;
    if g.dims.iter().any(|&d| d < 4) {
        return Err(Error::invalid(
            "layout grid needs at least 4 voxels per axis",
        ));
    }
    let hi = g.max_corner();
    let lo = g.origin;
    let v = g.voxel_size;
    let ground = lo[2] + v;
    let mut shapes = vec![Shape::Ground {
        height: ground,
        class: GROUND_CLASS,
    }];
    let count = |(a, b): (usize, usize), rng: &mut Rng| a + rng.below(b.saturating_sub(a) + 1);
    let span = |a: usize| hi[a] - lo[a];
    let max_height = (hi[2] - ground).min(5.0 * v);
    for _ in 0..count(cfg.boxes, rng) {
        let half = [
            rng.range(1.0, 2.0) * v,
            rng.range(1.0, 2.0) * v,
            0.5 * rng.range(0.5, 1.0) * max_height,
        ];
        let yaw = rng.range(0.0, std::f64::consts::FRAC_PI_2 as Real);
        let reach = 2.0 * half[0].max(half[1]) * std::f64::consts::SQRT_2 as Real / 2.0 + 1e-9;
        let center = [
            rng.range(lo[0] + reach, hi[0] - reach),
            rng.range(lo[1] + reach, hi[1] - reach),
            ground + half[2],
        ];
        shapes.push(Shape::Box {
            center,
            half_extents: half,
            yaw,
            class: BOX_CLASS,
        });
    }
    for _ in 0..count(cfg.cylinders, rng) {
        let radius = rng.range(0.8, 1.6) * v;
        let height = rng.range(0.6, 1.0) * max_height;
        let base = [
            rng.range(lo[0] + radius, hi[0] - radius),
            rng.range(lo[1] + radius, hi[1] - radius),
            ground,
        ];
        shapes.push(Shape::Cylinder {
            base,
            radius,
            height,
            class: CYLINDER_CLASS,
        });
    }
    let center = [lo[0] + span(0) / 2.0, lo[1] + span(1) / 2.0, ground];
    let spec = SceneSpec {
        grid: g,
        num_classes: CLASS_NAMES.len(),
        shapes,
        lidar: LidarSpec {
            points_per_voxel: cfg.points_per_voxel,
            jitter: cfg.jitter,
            intensity_noise: cfg.intensity_noise,
            origin: [center[0], center[1], hi[2]],
        },
        camera: CameraSpec {
            width: cfg.image_width,
            height: cfg.image_height,
            focal: cfg.image_width as Real * 0.6,
            eye: [lo[0] - 0.6 * span(0), center[1], hi[2] + 0.5 * span(2)],
            target: center,
            noise: cfg.camera_noise,
        },
    };
    spec.validate()?;
    Ok(spec)
}
