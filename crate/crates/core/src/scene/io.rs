//! Binary file formats.
//!
//! Voxel grid (`.vox`), all little-endian:
//!
//! ```text
//! magic  [u8; 12] = "GAUSSOCC-VOX"
//! version u32     = 1
//! X, Y, Z, |C|    u32 × 4
//! origin          f32 × 3
//! voxel_size      f32
//! logits          f32 × X·Y·Z·|C|   (row-major, z fastest, class innermost)
//! labels          u16 × X·Y·Z
//! ```
//!
//! Gaussian set: a headerless stream of f32 records
//! `m[3] r[4] log_s[3] σ_logit c[|C|] f[F]`, with a JSON sidecar (same path,
//! `.json` extension) holding `count`, `num_classes` and `feature_dim`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GaussianSet, GridSpec, VoxelGrid};
use crate::{Error, Real, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const GRID_MAGIC: &[u8; 12] = b"GAUSSOCC-VOX";

#[derive(Default)]
pub(crate) struct BinWriter {
    pub buf: Vec<u8>,
}

impl BinWriter {
    pub fn header(&mut self, magic: &[u8; 12]) {
        self.buf.extend_from_slice(magic);
        self.u32(FORMAT_VERSION);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: Real) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    pub fn f64(&mut self, v: Real) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

pub(crate) struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> BinReader<'a> {
    pub fn new(data: &'a [u8], path: &Path) -> Self {
        Self {
            data,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(&self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn header(&mut self, magic: &[u8; 12]) -> Result<()> {
        if self.take(12)? != magic {
            return Err(self.err("bad magic"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<Real> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as Real)
    }
    pub fn f64(&mut self) -> Result<Real> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()) as Real)
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_grid(grid: &VoxelGrid) -> Vec<u8> {
    let mut w = BinWriter::default();
    w.header(GRID_MAGIC);
    for d in grid.spec.dims {
        w.u32(d as u32);
    }
    w.u32(grid.num_classes as u32);
    for o in grid.spec.origin {
        w.f32(o);
    }
    w.f32(grid.spec.voxel_size);
    for &l in &grid.logits {
        w.f32(l);
    }
    for l in grid.label_grid() {
        w.u16(l);
    }
    w.buf
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<VoxelGrid> {
    let mut r = BinReader::new(bytes, path);
    r.header(GRID_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let classes = r.u32()? as usize;
    if classes == 0 {
        return Err(r.err("zero classes"));
    }
    let origin = [r.f32()?, r.f32()?, r.f32()?];
    let voxel = r.f32()?;
    let spec = GridSpec::new(origin, voxel, dims).map_err(|e| r.err(e.to_string()))?;
    let n = spec.num_voxels();
    if r.remaining() != n * classes * 4 + n * 2 {
        return Err(r.err("payload size does not match header"));
    }
    let logits = (0..n * classes)
        .map(|_| r.f32())
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    if labels.iter().any(|&l| l as usize >= classes) {
        return Err(r.err("label out of range"));
    }
    r.finish()?;
    Ok(VoxelGrid {
        spec,
        num_classes: classes,
        logits,
        labels: Some(labels),
    })
}

pub fn write_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    std::fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<VoxelGrid> {
    decode_grid(&read_file(path)?, path)
}

/// JSON sidecar describing a Gaussian record stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSidecar {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_gaussians(set: &GaussianSet) -> Vec<u8> {
    let mut w = BinWriter::default();
    for i in 0..set.len() {
        for t in [
            &set.means,
            &set.rotations,
            &set.log_scales,
            &set.opacity_logits,
            &set.logits,
            &set.features,
        ] {
            for &v in t.row(i) {
                w.f32(v);
            }
        }
    }
    w.buf
}

pub fn write_gaussians(path: &Path, set: &GaussianSet) -> Result<()> {
    std::fs::write(path, encode_gaussians(set))?;
    let sidecar = GaussianSidecar {
        format: "gaussocc-gaussians".into(),
        version: FORMAT_VERSION,
        count: set.len(),
        num_classes: set.num_classes(),
        feature_dim: set.feature_dim(),
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(())
}

pub fn read_gaussians(path: &Path) -> Result<GaussianSet> {
    let side_path = sidecar_path(path);
    let sidecar: GaussianSidecar = serde_json::from_slice(&read_file(&side_path)?)
        .map_err(|e| Error::format(&side_path, e.to_string()))?;
    if sidecar.version != FORMAT_VERSION {
        return Err(Error::format(
            &side_path,
            format!("unsupported version {}", sidecar.version),
        ));
    }
    let bytes = read_file(path)?;
    let mut r = BinReader::new(&bytes, path);
    let (c, f) = (sidecar.num_classes, sidecar.feature_dim);
    let record = 11 + c + f;
    if r.remaining() != sidecar.count * record * 4 {
        return Err(r.err("record stream length does not match sidecar"));
    }
    let mut set = GaussianSet::zeros(sidecar.count, c, f);
    for i in 0..sidecar.count {
        for t in [
            &mut set.means,
            &mut set.rotations,
            &mut set.log_scales,
            &mut set.opacity_logits,
            &mut set.logits,
            &mut set.features,
        ] {
            for v in t.row_mut(i) {
                *v = r.f32()?;
            }
        }
    }
    r.finish()?;
    Ok(set)
}
