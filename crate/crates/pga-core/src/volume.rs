//! Dense 3D scalar volumes, their on-disk format, and scan normalization.
//!
//! Axis convention used across the whole crate: `dims = [d0, d1, d2]` with
//! `d0` slowest-varying and `d2` fastest; linear index of `(i0, i1, i2)` is
//! `(i0 * dims[1] + i1) * dims[2] + i2`. Configuration triples are written in
//! the same slowest-first order.
//!
//! File format `PGV1`: 32-byte header — magic `PGV1`, three `u32` dims
//! (slowest first), a `u32` dtype code (1 = float32), three `f32` voxel sizes
//! in millimetres — followed by the little-endian row-major float32 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PGV1_MAGIC: &[u8; 4] = b"PGV1";
pub const PGV1_DTYPE_F32: u32 = 1;

/// In-memory volumes hold f64 so they can feed the tensor stack directly;
/// the file payload is float32.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<f64>) -> Result<Volume> {
        let numel = dims[0] * dims[1] * dims[2];
        if dims.contains(&0) {
            return Err(Error::config(format!("zero extent in volume dims {dims:?}")));
        }
        if data.len() != numel {
            return Err(Error::config(format!(
                "volume dims {dims:?} imply {numel} voxels, buffer has {}",
                data.len()
            )));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config(format!(
                "voxel size must be positive, got {voxel_size:?}"
            )));
        }
        Ok(Volume {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], voxel_size: [f64; 3]) -> Volume {
        Volume::new(dims, voxel_size, vec![0.0; dims[0] * dims[1] * dims[2]]).unwrap()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i0: usize, i1: usize, i2: usize) -> usize {
        (i0 * self.dims[1] + i1) * self.dims[2] + i2
    }

    #[inline]
    pub fn get(&self, i0: usize, i1: usize, i2: usize) -> f64 {
        self.data[self.index(i0, i1, i2)]
    }

    #[inline]
    pub fn set(&mut self, i0: usize, i1: usize, i2: usize, v: f64) {
        let idx = self.index(i0, i1, i2);
        self.data[idx] = v;
    }
}

/// Rescales to zero mean and unit (population) variance over all voxels.
/// Constant volumes are rejected.
pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    let n = v.data.len() as f64;
    let mean = v.data.iter().sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::numeric(
            "cannot normalize a constant volume (zero variance)",
        ));
    }
    let inv_std = 1.0 / var.sqrt();
    let data = v.data.iter().map(|&x| (x - mean) * inv_std).collect();
    Volume::new(v.dims, v.voxel_size, data)
}

pub fn write_pgv1(path: &Path, v: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + v.data.len() * 4);
    bytes.extend_from_slice(PGV1_MAGIC);
    for d in v.dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&PGV1_DTYPE_F32.to_le_bytes());
    for s in v.voxel_size {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &x in &v.data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgv1(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 {
        return Err(Error::invalid(path, "file shorter than the 32-byte header"));
    }
    if &bytes[..4] != PGV1_MAGIC {
        return Err(Error::invalid(path, "bad magic, not a PGV1 volume"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let dims = [u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize];
    let dtype = u32_at(16);
    if dtype != PGV1_DTYPE_F32 {
        return Err(Error::invalid(path, format!("unsupported dtype code {dtype}")));
    }
    let voxel_size = [
        f32::from_le_bytes(bytes[20..24].try_into().unwrap()) as f64,
        f32::from_le_bytes(bytes[24..28].try_into().unwrap()) as f64,
        f32::from_le_bytes(bytes[28..32].try_into().unwrap()) as f64,
    ];
    let numel = dims[0] * dims[1] * dims[2];
    let payload = &bytes[32..];
    if payload.len() != numel * 4 {
        return Err(Error::invalid(
            path,
            format!(
                "payload holds {} bytes, dims {dims:?} require {}",
                payload.len(),
                numel * 4
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(dims, voxel_size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        Volume::new(dims, [1.0, 1.0, 1.0], data).unwrap()
    }

    #[test]
    fn normalization_centers_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = random_volume(&mut rng, [4, 5, 6]);
        for x in v.data_mut() {
            *x = *x * 10.0 + 100.0;
        }
        let n = normalize_volume(&v).unwrap();
        let count = n.data().len() as f64;
        let mean = n.data().iter().sum::<f64>() / count;
        let var = n.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / count;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalization_is_idempotent_and_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v = random_volume(&mut rng, [3, 4, 5]);
        let n1 = normalize_volume(&v).unwrap();
        let n2 = normalize_volume(&n1).unwrap();
        for (a, b) in n1.data().iter().zip(n2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let affine = Volume::new(
            v.dims(),
            v.voxel_size(),
            v.data().iter().map(|&x| 3.0 * x - 7.0).collect(),
        )
        .unwrap();
        let na = normalize_volume(&affine).unwrap();
        for (a, b) in n1.data().iter().zip(na.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_volume_is_rejected() {
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![4.2; 8]).unwrap();
        let err = normalize_volume(&v).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
    }

    #[test]
    fn pgv1_round_trip_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.pgv");
        let mut v = random_volume(&mut rng, [3, 2, 4]);
        // Quantize to f32 so the round trip is exact.
        for x in v.data_mut() {
            *x = *x as f32 as f64;
        }
        write_pgv1(&path, &v).unwrap();
        let r = read_pgv1(&path).unwrap();
        assert_eq!(r.dims(), v.dims());
        assert_eq!(r.data(), v.data());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32 + 24 * 4);
    }

    #[test]
    fn pgv1_reader_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.pgv");
        let v = Volume::zeros([2, 2, 2], [1.0; 3]);
        write_pgv1(&path, &v).unwrap();

        let mut bad_magic = std::fs::read(&path).unwrap();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(read_pgv1(&path).unwrap_err().to_string().contains("magic"));

        write_pgv1(&path, &v).unwrap();
        let mut truncated = std::fs::read(&path).unwrap();
        truncated.truncate(40);
        std::fs::write(&path, &truncated).unwrap();
        assert!(read_pgv1(&path).unwrap_err().to_string().contains("payload"));
    }
}
