//! Minimal reader for single-file NIfTI-1 volumes (`.nii`, uncompressed,
//! little-endian, float32), enough to ingest pre-registered real scans.
//!
//! NIfTI stores the first spatial axis fastest; dims are reported here
//! slowest-first to match [`crate::volume::Volume`], so no payload
//! permutation is needed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_LEN: usize = 348;
const DATATYPE_FLOAT32: i16 = 16;

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::invalid(path, "shorter than a NIfTI-1 header"));
    }
    let i16_at = |off: usize| i16::from_le_bytes(bytes[off..off + 2].try_into().unwrap());
    let i32_at = |off: usize| i32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());

    if i32_at(0) != HEADER_LEN as i32 {
        return Err(Error::invalid(
            path,
            "sizeof_hdr != 348; not a little-endian NIfTI-1 file",
        ));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::invalid(path, "magic is not \"n+1\" (single-file NIfTI-1)"));
    }
    let ndim = i16_at(40);
    if ndim < 3 {
        return Err(Error::invalid(path, format!("expected 3 spatial dims, got dim[0]={ndim}")));
    }
    // dim[1..3] are the spatial extents; any higher dims must be 1.
    let nx = i16_at(42) as usize;
    let ny = i16_at(44) as usize;
    let nz = i16_at(46) as usize;
    for d in 4..=ndim.min(7) as usize {
        let extent = i16_at(40 + 2 * d);
        if extent > 1 {
            return Err(Error::invalid(
                path,
                format!("non-spatial dim[{d}]={extent}; only 3D volumes are supported"),
            ));
        }
    }
    let datatype = i16_at(70);
    if datatype != DATATYPE_FLOAT32 {
        return Err(Error::invalid(
            path,
            format!("datatype {datatype} unsupported; only float32 (16)"),
        ));
    }
    let pixdim = [f32_at(80) as f64, f32_at(84) as f64, f32_at(88) as f64];
    let vox_offset = f32_at(108) as usize;
    if vox_offset < HEADER_LEN {
        return Err(Error::invalid(path, format!("vox_offset {vox_offset} inside the header")));
    }
    let scl_slope = f32_at(112) as f64;
    let scl_inter = f32_at(116) as f64;
    let numel = nx * ny * nz;
    let need = vox_offset + numel * 4;
    if bytes.len() < need {
        return Err(Error::invalid(
            path,
            format!("file holds {} bytes, dims need {need}", bytes.len()),
        ));
    }
    let (slope, inter) = if scl_slope == 0.0 {
        (1.0, 0.0)
    } else {
        (scl_slope, scl_inter)
    };
    let data: Vec<f64> = bytes[vox_offset..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64 * slope + inter)
        .collect();
    // NIfTI x is fastest; our convention is dims[2] fastest.
    Volume::new([nz, ny, nx], [pixdim[2], pixdim[1], pixdim[0]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a minimal valid single-file NIfTI-1 byte image.
    fn synth_nifti(nx: u16, ny: u16, nz: u16, payload: &[f32], slope: f32, inter: f32) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        b[40..42].copy_from_slice(&3i16.to_le_bytes());
        b[42..44].copy_from_slice(&(nx as i16).to_le_bytes());
        b[44..46].copy_from_slice(&(ny as i16).to_le_bytes());
        b[46..48].copy_from_slice(&(nz as i16).to_le_bytes());
        b[70..72].copy_from_slice(&16i16.to_le_bytes());
        b[72..74].copy_from_slice(&32i16.to_le_bytes()); // bitpix
        for (i, p) in [1.0f32, 2.0, 3.0, 4.0].iter().enumerate() {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        b[112..116].copy_from_slice(&slope.to_le_bytes());
        b[116..120].copy_from_slice(&inter.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for v in payload {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn reads_synthetic_volume_with_axis_reversal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        // nx=2 (fastest), ny=3, nz=4
        let payload: Vec<f32> = (0..24).map(|i| i as f32).collect();
        std::fs::write(&path, synth_nifti(2, 3, 4, &payload, 0.0, 0.0)).unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.dims(), [4, 3, 2]);
        assert_eq!(v.voxel_size(), [4.0, 3.0, 2.0]);
        // voxel (z=1, y=2, x=1) = payload[1 + 2*(2 + 3*1)] = payload[11]
        assert_eq!(v.get(1, 2, 1), 11.0);
    }

    #[test]
    fn applies_scaling_and_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let payload = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        std::fs::write(&path, synth_nifti(2, 2, 2, &payload, 2.0, 1.0)).unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.get(0, 0, 0), 3.0);

        let mut bad = synth_nifti(2, 2, 2, &payload, 0.0, 0.0);
        bad[70] = 4; // int16 datatype
        std::fs::write(&path, &bad).unwrap();
        assert!(read_nifti(&path).unwrap_err().to_string().contains("datatype"));

        let mut short = synth_nifti(2, 2, 2, &payload, 0.0, 0.0);
        short.truncate(360);
        std::fs::write(&path, &short).unwrap();
        assert!(read_nifti(&path).is_err());
    }
}
