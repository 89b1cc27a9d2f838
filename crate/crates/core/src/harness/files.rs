use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::scene::{SceneSpec, SyntheticScene};
use crate::lifting::{read_camera, write_camera, LidarPoint};
use crate::scene::io::read_file;
use crate::scene::io::{read_grid, write_grid, BinReader, BinWriter, FORMAT_VERSION};
use crate::scene::{VoxelGrid, EMPTY_CLASS};
use crate::{Error, Result};

pub const POINTS_MAGIC: &[u8; 12] = b"GAUSSOCC-PTS";

/// `magic, version, count, then count × f32 [x y z η]`.
pub fn encode_points(points: &[LidarPoint]) -> Vec<u8> {
    let mut w = BinWriter::default();
    w.header(POINTS_MAGIC);
    w.u32(points.len() as u32);
    for p in points {
        for v in p.position {
            w.f32(v);
        }
        w.f32(p.intensity);
    }
    w.buf
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<LidarPoint>> {
    let mut r = BinReader::new(bytes, path);
    r.header(POINTS_MAGIC)?;
    let n = r.u32()? as usize;
    if r.remaining() != n * 16 {
        return Err(r.err("payload size does not match header"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let position = [r.f32()?, r.f32()?, r.f32()?];
        let intensity = r.f32()?;
        if position.iter().chain([&intensity]).any(|v| !v.is_finite()) {
            return Err(r.err("non-finite point"));
        }
        out.push(LidarPoint {
            position,
            intensity,
        });
    }
    r.finish()?;
    Ok(out)
}

/// File names inside a scene directory.
pub struct ScenePaths {
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub points: PathBuf,
    pub camera: PathBuf,
}

impl ScenePaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            manifest: dir.join("scene.json"),
            labels: dir.join("labels.vox"),
            points: dir.join("points.pts"),
            camera: dir.join("camera.cam"),
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    spec: SceneSpec,
}

/// Writes `scene.json`, `labels.vox`, `points.pts` and `camera.cam` into `dir`.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let paths = ScenePaths::new(dir);
    let manifest = Manifest {
        format: "gaussocc-scene".into(),
        version: FORMAT_VERSION,
        seed: scene.seed,
        spec: scene.spec.clone(),
    };
    std::fs::write(
        &paths.manifest,
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    write_grid(&paths.labels, &scene.labels)?;
    std::fs::write(&paths.points, encode_points(&scene.points))?;
    write_camera(&paths.camera, &scene.camera)
}

pub fn read_scene(dir: &Path) -> Result<SyntheticScene> {
    let paths = ScenePaths::new(dir);
    let manifest: Manifest = serde_json::from_slice(&read_file(&paths.manifest)?)
        .map_err(|e| Error::format(&paths.manifest, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            &paths.manifest,
            format!("unsupported version {}", manifest.version),
        ));
    }
    let labels = read_grid(&paths.labels)?;
    if labels.num_classes != manifest.spec.num_classes
        || labels.spec.dims != manifest.spec.grid.dims
    {
        return Err(Error::format(
            &paths.labels,
            "label grid disagrees with the manifest",
        ));
    }
    let points = decode_points(&read_file(&paths.points)?, &paths.points)?;
    let camera = read_camera(&paths.camera)?;
    Ok(SyntheticScene {
        spec: manifest.spec,
        seed: manifest.seed,
        labels,
        points,
        camera,
    })
}

/// One `x y z label` line per voxel center, skipping empty voxels unless
/// `include_empty`.
pub fn export_grid_text(grid: &VoxelGrid, include_empty: bool) -> String {
    let labels = grid.label_grid();
    let mut out = String::new();
    for (v, &l) in labels.iter().enumerate() {
        if l == EMPTY_CLASS && !include_empty {
            continue;
        }
        let [x, y, z] = grid.spec.coords(v);
        let c = grid.spec.center(x, y, z);
        writeln!(out, "{} {} {} {}", c[0], c[1], c[2], l).expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{generate_scene, random_layout, LayoutConfig};
    use crate::scene::GridSpec;
    use crate::Rng;

    #[test]
    fn scene_files_round_trip_byte_identically() {
        let spec = random_layout(&LayoutConfig::default(), &mut Rng::new(2)).unwrap();
        let scene = generate_scene(&spec, 2).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_scene(a.path(), &scene).unwrap();
        let back = read_scene(a.path()).unwrap();
        assert_eq!(back.labels.label_grid(), scene.labels.label_grid());
        assert_eq!(back.points.len(), scene.points.len());
        write_scene(b.path(), &back).unwrap();
        for name in ["scene.json", "labels.vox", "points.pts", "camera.cam"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn corrupt_points_are_rejected() {
        let pts = vec![LidarPoint {
            position: [1.0, 2.0, 3.0],
            intensity: 0.5,
        }];
        let bytes = encode_points(&pts);
        let p = Path::new("x.pts");
        assert_eq!(decode_points(&bytes, p).unwrap(), pts);
        assert!(decode_points(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_points(&bad, p).is_err());
    }

    #[test]
    fn export_one_voxel_grid_gives_one_line() {
        let spec = GridSpec::new([0.0; 3], 0.5, [1, 1, 1]).unwrap();
        let grid = VoxelGrid::from_labels(spec, 3, vec![2]).unwrap();
        assert_eq!(export_grid_text(&grid, false), "0.25 0.25 0.25 2\n");
        let empty = VoxelGrid::from_labels(spec, 3, vec![0]).unwrap();
        assert_eq!(export_grid_text(&empty, false), "");
        assert_eq!(export_grid_text(&empty, true).lines().count(), 1);
    }
}
