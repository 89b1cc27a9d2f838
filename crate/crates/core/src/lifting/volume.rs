use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PlaneView;
use crate::scene::io::{read_file, BinReader, BinWriter};
use crate::scene::Vec3;
use crate::{Error, Real, Result, Tensor};

pub const VOLUME_MAGIC: &[u8; 12] = b"GAUSSOCC-VOL";

/// Channels of the per-point feature `(η, 1, z)`.
pub const POINT_FEATURES: usize = 3;

/// A LiDAR return with its intensity `η`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: Vec3,
    pub intensity: Real,
}

/// Placement of a `D×H×W` lattice of cubic cells: planes stack along z, rows
/// along y, columns along x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub origin: Vec3,
    pub cell: Real,
    /// `[D, H, W]`.
    pub dims: [usize; 3],
}

impl VolumeSpec {
    pub fn new(origin: Vec3, cell: Real, dims: [usize; 3]) -> Result<Self> {
        if !(cell > 0.0)
            || !cell.is_finite()
            || dims.contains(&0)
            || origin.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid(format!(
                "volume needs a positive cell size and nonzero extents, got {cell} and {dims:?}"
            )));
        }
        Ok(Self { origin, cell, dims })
    }

    /// Continuous lattice coordinates `(u, v)` of a world point; cell centers
    /// sit on integer coordinates.
    pub fn lattice_uv(&self, p: Vec3) -> [Real; 2] {
        [
            (p[0] - self.origin[0]) / self.cell - 0.5,
            (p[1] - self.origin[1]) / self.cell - 0.5,
        ]
    }

    /// Integer cell `(d, row, col)` containing `p`.
    pub fn cell_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let f = |a: usize| ((p[a] - self.origin[a]) / self.cell).floor();
        let (x, y, z) = (f(0), f(1), f(2));
        let [d, h, w] = self.dims;
        (x >= 0.0 && y >= 0.0 && z >= 0.0 && x < w as Real && y < h as Real && z < d as Real)
            .then_some([z as usize, y as usize, x as usize])
    }
}

/// `C×D×H×W` LiDAR feature volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub spec: VolumeSpec,
    pub values: Tensor,
}

impl FeatureVolume {
    pub fn zeros(spec: VolumeSpec, channels: usize) -> Self {
        let [d, h, w] = spec.dims;
        Self {
            spec,
            values: Tensor::zeros(&[channels, d, h, w]),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn planes(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn plane(&self, d: usize) -> PlaneView<'_> {
        let [planes, h, w] = self.spec.dims;
        PlaneView {
            data: self.values.data(),
            channels: self.channels(),
            height: h,
            width: w,
            channel_stride: planes * h * w,
            offset: d * h * w,
        }
    }

    pub fn cell(&self, c: usize, d: usize, row: usize, col: usize) -> Real {
        let [planes, h, w] = self.spec.dims;
        self.values.data()[((c * planes + d) * h + row) * w + col]
    }
}

/// Voxelizes a point cloud: each occupied cell holds the mean `(η, 1, z)` of
/// its points; points outside the lattice are dropped.
pub fn point_cloud_to_volume(points: &[LidarPoint], spec: VolumeSpec) -> FeatureVolume {
    let mut vol = FeatureVolume::zeros(spec, POINT_FEATURES);
    let [d, h, w] = spec.dims;
    let plane = d * h * w;
    let mut counts = vec![0u32; plane];
    let data = vol.values.data_mut();
    for p in points {
        let Some([z, y, x]) = spec.cell_of(p.position) else {
            continue;
        };
        let cell = (z * h + y) * w + x;
        counts[cell] += 1;
        for (c, f) in [p.intensity, 1.0, p.position[2]].into_iter().enumerate() {
            data[c * plane + cell] += f;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 1 {
            for c in 0..POINT_FEATURES {
                data[c * plane + cell] /= n as Real;
            }
        }
    }
    vol
}

pub fn encode_volume(vol: &FeatureVolume) -> Vec<u8> {
    let mut w = BinWriter::default();
    w.header(VOLUME_MAGIC);
    w.u32(vol.channels() as u32);
    for d in vol.spec.dims {
        w.u32(d as u32);
    }
    for o in vol.spec.origin {
        w.f32(o);
    }
    w.f32(vol.spec.cell);
    for &v in vol.values.data() {
        w.f32(v);
    }
    w.buf
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<FeatureVolume> {
    let mut r = BinReader::new(bytes, path);
    r.header(VOLUME_MAGIC)?;
    let c = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let origin = [r.f32()?, r.f32()?, r.f32()?];
    let cell = r.f32()?;
    let spec = VolumeSpec::new(origin, cell, dims).map_err(|e| r.err(e.to_string()))?;
    let n = c * dims.iter().product::<usize>();
    if c == 0 || r.remaining() != n * 4 {
        return Err(r.err("payload size does not match header"));
    }
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let values = Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], data)?;
    Ok(FeatureVolume { spec, values })
}

pub fn write_volume(path: &Path, vol: &FeatureVolume) -> Result<()> {
    std::fs::write(path, encode_volume(vol))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<FeatureVolume> {
    decode_volume(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> VolumeSpec {
        VolumeSpec::new([0.0, 0.0, 0.0], 0.5, [4, 3, 3]).unwrap()
    }

    fn pt(x: Real, y: Real, z: Real, i: Real) -> LidarPoint {
        LidarPoint {
            position: [x, y, z],
            intensity: i,
        }
    }

    #[test]
    fn single_point_fills_one_cell() {
        let vol = point_cloud_to_volume(&[pt(0.7, 0.2, 1.1, 0.3)], spec());
        let nonzero: Vec<_> = (0..4 * 3 * 3)
            .filter(|&i| vol.values.data()[i + 36] != 0.0)
            .collect();
        assert_eq!(nonzero, vec![(2 * 3) * 3 + 1]);
        assert_eq!(vol.cell(0, 2, 0, 1), 0.3);
        assert_eq!(vol.cell(1, 2, 0, 1), 1.0);
        assert_eq!(vol.cell(2, 2, 0, 1), 1.1);
    }

    #[test]
    fn cell_value_is_the_mean() {
        let one = point_cloud_to_volume(&[pt(0.1, 0.1, 0.1, 0.8)], spec());
        let two = point_cloud_to_volume(&[pt(0.1, 0.1, 0.1, 0.8), pt(0.1, 0.1, 0.1, 0.8)], spec());
        assert_eq!(one, two);
        let mixed =
            point_cloud_to_volume(&[pt(0.1, 0.1, 0.1, 0.2), pt(0.3, 0.2, 0.4, 0.6)], spec());
        assert!((mixed.cell(0, 0, 0, 0) - 0.4).abs() < 1e-15);
        assert!((mixed.cell(2, 0, 0, 0) - 0.25).abs() < 1e-15);
        assert_eq!(mixed.cell(1, 0, 0, 0), 1.0);
        assert!(point_cloud_to_volume(&[], spec())
            .values
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let vol = point_cloud_to_volume(&[pt(0.1, 1.2, 0.3, 0.25), pt(1.4, 0.2, 1.9, 0.7)], spec());
        let a = dir.path().join("a.vol");
        write_volume(&a, &vol).unwrap();
        let back = read_volume(&a).unwrap();
        assert_eq!(back.spec, vol.spec);
        let b = dir.path().join("b.vol");
        write_volume(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let bytes = std::fs::read(&a).unwrap();
        assert!(decode_volume(&bytes[..bytes.len() - 4], &a).is_err());
    }
}
