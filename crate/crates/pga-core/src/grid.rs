//! Center-cropping and strided 3D patch tiling.
//!
//! Patch offsets are enumerated lexicographically with axis 0 slowest and
//! axis 2 fastest, matching the volume memory layout, so patch indices are
//! stable across runs and configurations with equal geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Exact tiling requires the stride to divide `crop - patch` per axis (no
/// voxel is silently dropped); permissive tiling instead clamps a final
/// offset at `crop - patch` so any configuration covers the far edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilingMode {
    Exact,
    Permissive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub source_dims: [usize; 3],
    pub crop_dims: [usize; 3],
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    pub mode: TilingMode,
}

/// One tile of the grid: stable index plus offset within the cropped volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub index: usize,
    pub offset: [usize; 3],
}

impl GridSpec {
    pub fn new(
        source_dims: [usize; 3],
        crop_dims: [usize; 3],
        patch_size: [usize; 3],
        stride: [usize; 3],
        mode: TilingMode,
    ) -> Result<GridSpec> {
        let spec = GridSpec {
            source_dims,
            crop_dims,
            patch_size,
            stride,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.crop_dims[a] == 0 || self.patch_size[a] == 0 {
                return Err(Error::config(format!("zero extent on axis {a}")));
            }
            if self.crop_dims[a] > self.source_dims[a] {
                return Err(Error::config(format!(
                    "crop {} exceeds source {} on axis {a}",
                    self.crop_dims[a], self.source_dims[a]
                )));
            }
            if self.patch_size[a] > self.crop_dims[a] {
                return Err(Error::config(format!(
                    "patch {} exceeds crop {} on axis {a}",
                    self.patch_size[a], self.crop_dims[a]
                )));
            }
            if self.stride[a] == 0 {
                return Err(Error::config(format!("stride must be positive on axis {a}")));
            }
            if self.mode == TilingMode::Exact
                && (self.crop_dims[a] - self.patch_size[a]) % self.stride[a] != 0
            {
                return Err(Error::config(format!(
                    "axis {a}: stride {} does not tile crop {} with patch {} exactly; \
                     use permissive mode or adjust the grid",
                    self.stride[a], self.crop_dims[a], self.patch_size[a]
                )));
            }
        }
        Ok(())
    }

    /// Offsets along one axis, ascending.
    fn axis_positions(&self, a: usize) -> Vec<usize> {
        let span = self.crop_dims[a] - self.patch_size[a];
        let mut positions: Vec<usize> = (0..=span).step_by(self.stride[a]).collect();
        if self.mode == TilingMode::Permissive && *positions.last().unwrap() != span {
            positions.push(span);
        }
        positions
    }

    pub fn patch_count(&self) -> usize {
        (0..3).map(|a| self.axis_positions(a).len()).product()
    }
}

/// Returns the sub-volume of `crop_dims` starting at `floor((source-crop)/2)`
/// per axis.
pub fn center_crop(v: &Volume, crop_dims: [usize; 3]) -> Result<Volume> {
    let src = v.dims();
    for a in 0..3 {
        if crop_dims[a] > src[a] {
            return Err(Error::config(format!(
                "crop {} exceeds source {} on axis {a}",
                crop_dims[a], src[a]
            )));
        }
        if crop_dims[a] == 0 {
            return Err(Error::config(format!("zero crop extent on axis {a}")));
        }
    }
    let start = [
        (src[0] - crop_dims[0]) / 2,
        (src[1] - crop_dims[1]) / 2,
        (src[2] - crop_dims[2]) / 2,
    ];
    let mut out = Vec::with_capacity(crop_dims.iter().product());
    for i0 in 0..crop_dims[0] {
        for i1 in 0..crop_dims[1] {
            let base = v.index(start[0] + i0, start[1] + i1, start[2]);
            out.extend_from_slice(&v.data()[base..base + crop_dims[2]]);
        }
    }
    Volume::new(crop_dims, v.voxel_size(), out)
}

/// All patch refs of the grid in index order.
pub fn enumerate_patches(spec: &GridSpec) -> Result<Vec<PatchRef>> {
    spec.validate()?;
    let (p0, p1, p2) = (
        spec.axis_positions(0),
        spec.axis_positions(1),
        spec.axis_positions(2),
    );
    let mut refs = Vec::with_capacity(p0.len() * p1.len() * p2.len());
    for &o0 in &p0 {
        for &o1 in &p1 {
            for &o2 in &p2 {
                refs.push(PatchRef {
                    index: refs.len(),
                    offset: [o0, o1, o2],
                });
            }
        }
    }
    Ok(refs)
}

/// Copies the patch block at `r.offset`; the input must already be cropped.
pub fn extract_patch(v: &Volume, r: &PatchRef, spec: &GridSpec) -> Result<Volume> {
    if v.dims() != spec.crop_dims {
        return Err(Error::config(format!(
            "extract_patch expects a cropped volume of dims {:?}, got {:?}",
            spec.crop_dims,
            v.dims()
        )));
    }
    for a in 0..3 {
        if r.offset[a] + spec.patch_size[a] > spec.crop_dims[a] {
            return Err(Error::config(format!(
                "patch {} at offset {:?} leaves the cropped volume on axis {a}",
                r.index, r.offset
            )));
        }
    }
    let ps = spec.patch_size;
    let mut out = Vec::with_capacity(ps.iter().product());
    for i0 in 0..ps[0] {
        for i1 in 0..ps[1] {
            let base = v.index(r.offset[0] + i0, r.offset[1] + i1, r.offset[2]);
            out.extend_from_slice(&v.data()[base..base + ps[2]]);
        }
    }
    Volume::new(ps, v.voxel_size(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(dims: [usize; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn paper_scale_grid_has_27_patches_at_expected_offsets() {
        let spec = GridSpec::new(
            [182, 218, 182],
            [140, 176, 140],
            [64, 64, 64],
            [38, 56, 38],
            TilingMode::Exact,
        )
        .unwrap();
        let refs = enumerate_patches(&spec).unwrap();
        assert_eq!(refs.len(), 27);
        let expected: Vec<usize> = vec![0, 38, 76];
        let expected_mid: Vec<usize> = vec![0, 56, 112];
        for r in &refs {
            assert!(expected.contains(&r.offset[0]));
            assert!(expected_mid.contains(&r.offset[1]));
            assert!(expected.contains(&r.offset[2]));
        }
        // Lexicographic, axis 2 fastest.
        assert_eq!(refs[0].offset, [0, 0, 0]);
        assert_eq!(refs[1].offset, [0, 0, 38]);
        assert_eq!(refs[3].offset, [0, 56, 0]);
        assert_eq!(refs[9].offset, [38, 0, 0]);
        assert_eq!(refs[26].offset, [76, 112, 76]);
    }

    #[test]
    fn desk_scale_grid_also_has_27_patches() {
        let spec = GridSpec::new(
            [70, 88, 70],
            [70, 88, 70],
            [32, 32, 32],
            [19, 28, 19],
            TilingMode::Exact,
        )
        .unwrap();
        assert_eq!(spec.patch_count(), 27);
    }

    #[test]
    fn center_crop_uses_floored_offsets() {
        let v = numbered([6, 5, 4]);
        let c = center_crop(&v, [4, 5, 2]).unwrap();
        // starts at ((6-4)/2, 0, (4-2)/2) = (1, 0, 1)
        assert_eq!(c.dims(), [4, 5, 2]);
        assert_eq!(c.get(0, 0, 0), v.get(1, 0, 1));
        assert_eq!(c.get(3, 4, 1), v.get(4, 4, 2));
        let identity = center_crop(&v, v.dims()).unwrap();
        assert_eq!(identity, v);
        assert!(center_crop(&v, [7, 5, 4]).is_err());
    }

    #[test]
    fn exact_mode_rejects_non_dividing_stride() {
        // span = 10 - 4 = 6, stride 4 leaves remainder 2
        let err = GridSpec::new([10; 3], [10; 3], [4; 3], [4; 3], TilingMode::Exact).unwrap_err();
        assert!(err.to_string().contains("axis 0"));
        let spec = GridSpec::new([10; 3], [10; 3], [4; 3], [4; 3], TilingMode::Permissive).unwrap();
        // positions 0, 4, clamp 6 per axis
        assert_eq!(spec.patch_count(), 27);
        let refs = enumerate_patches(&spec).unwrap();
        assert_eq!(refs[26].offset, [6, 6, 6]);
    }

    #[test]
    fn single_patch_when_patch_equals_crop() {
        let spec = GridSpec::new([8; 3], [8; 3], [8; 3], [1; 3], TilingMode::Exact).unwrap();
        let refs = enumerate_patches(&spec).unwrap();
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].offset, [0, 0, 0]);
        let v = numbered([8; 3]);
        let p = extract_patch(&v, &refs[0], &spec).unwrap();
        assert_eq!(p, v);
    }

    #[test]
    fn extract_matches_direct_indexing() {
        let spec = GridSpec::new(
            [9, 8, 7],
            [9, 8, 7],
            [4, 3, 2],
            [5, 5, 5],
            TilingMode::Permissive,
        )
        .unwrap();
        let v = numbered([9, 8, 7]);
        for r in enumerate_patches(&spec).unwrap() {
            let p = extract_patch(&v, &r, &spec).unwrap();
            for i0 in 0..4 {
                for i1 in 0..3 {
                    for i2 in 0..2 {
                        assert_eq!(
                            p.get(i0, i1, i2),
                            v.get(r.offset[0] + i0, r.offset[1] + i1, r.offset[2] + i2)
                        );
                    }
                }
            }
        }
    }
}
