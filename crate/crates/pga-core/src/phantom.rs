//! Synthetic age-encoding phantom volumes plus dataset manifest and splits.
//!
//! A phantom is a centered "brain" ellipsoid of tissue intensity whose
//! semi-axes shrink linearly with age, containing a centered "ventricle"
//! ellipsoid that grows linearly with age, over a uniform background, with
//! additive Gaussian noise. Age is therefore geometrically identifiable:
//! patches intersecting the ventricle carry signal, pure-background patches
//! carry only noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_for_each_index, Exec};
use crate::seeds::{self, tag};
use crate::volume::{write_pgv1, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub volume_dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub age_range_years: [f64; 2],
    pub brain_semi_axes_at_min_age: [f64; 3],
    pub brain_shrink_per_year: f64,
    pub ventricle_semi_axes_at_min_age: [f64; 3],
    pub ventricle_growth_per_year: f64,
    pub tissue_intensity: f64,
    pub ventricle_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            volume_dims: [70, 88, 70],
            voxel_size_mm: [2.0, 2.0, 2.0],
            age_range_years: [44.0, 73.0],
            brain_semi_axes_at_min_age: [25.0, 31.0, 25.0],
            brain_shrink_per_year: 0.0,
            ventricle_semi_axes_at_min_age: [6.5, 7.5, 6.5],
            ventricle_growth_per_year: 0.10,
            tissue_intensity: 1.0,
            ventricle_intensity: 0.25,
            background_intensity: 0.0,
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

impl PhantomParams {
    pub fn brain_semi_axes(&self, age: f64) -> [f64; 3] {
        let dt = age - self.age_range_years[0];
        self.brain_semi_axes_at_min_age
            .map(|a| a - self.brain_shrink_per_year * dt)
    }

    pub fn ventricle_semi_axes(&self, age: f64) -> [f64; 3] {
        let dt = age - self.age_range_years[0];
        self.ventricle_semi_axes_at_min_age
            .map(|a| a + self.ventricle_growth_per_year * dt)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.age_range_years;
        if !(lo < hi) {
            return Err(Error::config(format!("age range must be increasing, got [{lo}, {hi}]")));
        }
        if self.brain_shrink_per_year < 0.0 || self.ventricle_growth_per_year < 0.0 {
            return Err(Error::config("shrink/growth rates must be >= 0"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise sigma must be >= 0"));
        }
        // The gap is tightest at the maximum age: the ventricle has grown the
        // most and the brain has shrunk the most.
        let brain = self.brain_semi_axes(hi);
        let vent = self.ventricle_semi_axes(hi);
        for a in 0..3 {
            if !(brain[a] > 0.0) {
                return Err(Error::config(format!(
                    "brain semi-axis {a} shrinks to {:.2} voxels at age {hi}",
                    brain[a]
                )));
            }
            if !(vent[a] < brain[a]) {
                return Err(Error::config(format!(
                    "ventricle semi-axis {a} ({:.2}) is not strictly inside the brain ({:.2}) at age {hi}",
                    vent[a], brain[a]
                )));
            }
        }
        if self.ventricle_semi_axes(lo).iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("ventricle semi-axes must be positive at the minimum age"));
        }
        let gaps = [
            (self.tissue_intensity - self.ventricle_intensity).abs(),
            (self.ventricle_intensity - self.background_intensity).abs(),
            (self.tissue_intensity - self.background_intensity).abs(),
        ];
        let needed = 3.0 * self.noise_sigma;
        if gaps.iter().any(|&g| g < needed) {
            return Err(Error::config(format!(
                "intensities must be pairwise at least 3*noise_sigma = {needed} apart, gaps {gaps:?}"
            )));
        }
        Ok(())
    }
}

/// One dataset entry; `volume_path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub age_years: f64,
    pub volume_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ratios: [f64; 3],
}

/// Rasterizes one phantom. Deterministic in `(params.seed, subject_seed)`.
pub fn generate_phantom(age: f64, params: &PhantomParams, subject_seed: u64) -> Result<Volume> {
    params.validate()?;
    let [lo, hi] = params.age_range_years;
    if !(age >= lo && age <= hi) {
        return Err(Error::config(format!(
            "age {age} outside the configured range [{lo}, {hi}]"
        )));
    }
    let dims = params.volume_dims;
    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let brain = params.brain_semi_axes(age);
    let vent = params.ventricle_semi_axes(age);
    let mut v = Volume::zeros(dims, params.voxel_size_mm);
    let inside = |i: [usize; 3], axes: [f64; 3]| -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (i[a] as f64 - center[a]) / axes[a];
            q += d * d;
        }
        q <= 1.0
    };
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let idx = [i0, i1, i2];
                let val = if inside(idx, vent) {
                    params.ventricle_intensity
                } else if inside(idx, brain) {
                    params.tissue_intensity
                } else {
                    params.background_intensity
                };
                v.set(i0, i1, i2, val);
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let mut rng = seeds::rng(&[params.seed, tag::NOISE, subject_seed]);
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::config(format!("bad noise sigma: {e}")))?;
        for x in v.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    Ok(v)
}

/// Generates `n` subjects with uniform ages, writes one volume file per
/// subject into `dir`, and returns the subjects in id order. Volume files are
/// written concurrently when requested; outputs do not depend on `exec`.
pub fn generate_dataset(
    n: usize,
    params: &PhantomParams,
    dir: &Path,
    exec: Exec,
) -> Result<Vec<Subject>> {
    if n < 20 {
        return Err(Error::config(format!(
            "dataset needs at least 20 subjects for a usable split, got {n}"
        )));
    }
    params.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [lo, hi] = params.age_range_years;
    let mut age_rng = seeds::rng(&[params.seed, tag::AGES]);
    let subjects: Vec<Subject> = (0..n)
        .map(|i| Subject {
            id: format!("subj_{i:04}"),
            age_years: age_rng.gen_range(lo..hi),
            volume_path: format!("subj_{i:04}.pgv"),
        })
        .collect();
    try_for_each_index(n, exec, |i| {
        let s = &subjects[i];
        let vol = generate_phantom(s.age_years, params, i as u64)?;
        write_pgv1(&dir.join(&s.volume_path), &vol)
    })?;
    Ok(subjects)
}

/// Manifest CSV: a `# config_hash=...` comment line, a header, then
/// `id,age_years,path` rows.
pub fn write_manifest(path: &Path, subjects: &[Subject], config_hash: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str("id,age_years,path\n");
    for s in subjects {
        out.push_str(&format!("{},{},{}\n", s.id, s.age_years, s.volume_path));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns the subjects and the embedded config hash.
pub fn read_manifest(path: &Path) -> Result<(Vec<Subject>, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let hash_line = lines
        .next()
        .ok_or_else(|| Error::invalid(path, "empty manifest"))?;
    let hash = hash_line
        .strip_prefix("# config_hash=")
        .ok_or_else(|| Error::invalid(path, "first line must be `# config_hash=...`"))?
        .to_string();
    match lines.next() {
        Some("id,age_years,path") => {}
        other => {
            return Err(Error::invalid(
                path,
                format!("bad header line: {other:?}"),
            ))
        }
    }
    let mut subjects = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (id, age, rel) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::invalid(
                    path,
                    format!("line {}: expected id,age_years,path", lineno + 3),
                ))
            }
        };
        let age_years: f64 = age.parse().map_err(|_| {
            Error::invalid(path, format!("line {}: bad age {age:?}", lineno + 3))
        })?;
        subjects.push(Subject {
            id: id.to_string(),
            age_years,
            volume_path: rel.to_string(),
        });
    }
    Ok((subjects, hash))
}

/// Shuffled deterministic partition. Val/test sizes are floor allocations;
/// the remainder goes to train. Every split must end up non-empty.
pub fn split_dataset(subjects: &[Subject], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::config(format!("split ratios must be >= 0, got {ratios:?}")));
    }
    let n = subjects.len();
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config(format!(
            "split of {n} subjects with ratios {ratios:?} leaves an empty subset \
             (train {n_train}, val {n_val}, test {n_test})"
        )));
    }
    let mut ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let mut rng = seeds::rng(&[seed, tag::SPLIT]);
    ids.shuffle(&mut rng);
    let train_ids = ids[..n_train].to_vec();
    let val_ids = ids[n_train..n_train + n_val].to_vec();
    let test_ids = ids[n_train + n_val..].to_vec();
    Ok(DatasetSplit {
        train_ids,
        val_ids,
        test_ids,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::simple_linear_fit;

    fn count_near(v: &Volume, target: f64, tol: f64) -> usize {
        v.data().iter().filter(|&&x| (x - target).abs() < tol).count()
    }

    #[test]
    fn noiseless_ventricle_volume_matches_analytic_value() {
        let params = PhantomParams {
            noise_sigma: 0.0,
            ..PhantomParams::default()
        };
        let v = generate_phantom(44.0, &params, 0).unwrap();
        let counted = count_near(&v, params.ventricle_intensity, 1e-9) as f64;
        let [a, b, c] = params.ventricle_semi_axes_at_min_age;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * a * b * c;
        let rel = (counted - analytic).abs() / analytic;
        assert!(rel < 0.02, "counted {counted}, analytic {analytic:.1}, rel {rel:.4}");
    }

    #[test]
    fn ventricle_grows_with_age() {
        let params = PhantomParams {
            noise_sigma: 0.0,
            ..PhantomParams::default()
        };
        let young = generate_phantom(44.0, &params, 0).unwrap();
        let old = generate_phantom(73.0, &params, 0).unwrap();
        assert!(
            count_near(&old, params.ventricle_intensity, 1e-9)
                > count_near(&young, params.ventricle_intensity, 1e-9)
        );
    }

    #[test]
    fn same_seeds_give_bit_identical_volumes() {
        let params = PhantomParams::default();
        let a = generate_phantom(60.0, &params, 3).unwrap();
        let b = generate_phantom(60.0, &params, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(60.0, &params, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn containment_violation_is_rejected() {
        let params = PhantomParams {
            ventricle_growth_per_year: 2.0,
            ..PhantomParams::default()
        };
        let err = params.validate().unwrap_err();
        assert!(err.to_string().contains("strictly inside"));
    }

    #[test]
    fn age_signal_is_linearly_identifiable() {
        // Default-scale ellipsoids: discretization error is small relative to
        // the growth signal, so the noiseless count-vs-age fit is nearly exact.
        let params = PhantomParams {
            noise_sigma: 0.0,
            ..PhantomParams::default()
        };
        let mut ages = Vec::new();
        let mut counts = Vec::new();
        let mut rng = seeds::rng(&[1, tag::AGES]);
        for i in 0..200 {
            let age = rng.gen_range(44.0..73.0);
            let v = generate_phantom(age, &params, i).unwrap();
            ages.push(age);
            counts.push(count_near(&v, params.ventricle_intensity, 1e-9) as f64);
        }
        let (slope, intercept) = simple_linear_fit(&ages, &counts).unwrap();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let ss_tot: f64 = counts.iter().map(|&c| (c - mean) * (c - mean)).sum();
        let ss_res: f64 = ages
            .iter()
            .zip(&counts)
            .map(|(&a, &c)| {
                let p = slope * a + intercept;
                (c - p) * (c - p)
            })
            .sum();
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.99, "r2 = {r2:.4}");
    }

    #[test]
    fn dataset_generation_writes_manifest_compatible_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let params = PhantomParams {
            volume_dims: [12, 14, 12],
            brain_semi_axes_at_min_age: [5.0, 6.0, 5.0],
            ventricle_semi_axes_at_min_age: [1.5, 2.0, 1.5],
            ventricle_growth_per_year: 0.05,
            brain_shrink_per_year: 0.02,
            ..PhantomParams::default()
        };
        let subjects = generate_dataset(20, &params, dir.path(), Exec::default()).unwrap();
        assert_eq!(subjects.len(), 20);
        for s in &subjects {
            assert!(s.age_years >= 44.0 && s.age_years <= 73.0);
            assert!(dir.path().join(&s.volume_path).exists());
        }
        let manifest = dir.path().join("manifest.csv");
        write_manifest(&manifest, &subjects, "abc123").unwrap();
        let (back, hash) = read_manifest(&manifest).unwrap();
        assert_eq!(back, subjects);
        assert_eq!(hash, "abc123");

        let again = generate_dataset(20, &params, dir.path(), Exec::Sequential).unwrap();
        assert_eq!(again, subjects);

        let err = generate_dataset(19, &params, dir.path(), Exec::default()).unwrap_err();
        assert!(err.to_string().contains("at least 20"));
    }

    #[test]
    fn split_sizes_follow_floor_allocation_with_remainder_to_train() {
        let subjects: Vec<Subject> = (0..100)
            .map(|i| Subject {
                id: format!("s{i}"),
                age_years: 50.0,
                volume_path: String::new(),
            })
            .collect();
        let split = split_dataset(&subjects, [0.8, 0.15, 0.05], 3).unwrap();
        assert_eq!(split.train_ids.len(), 80);
        assert_eq!(split.val_ids.len(), 15);
        assert_eq!(split.test_ids.len(), 5);
        let mut all: Vec<&String> = split
            .train_ids
            .iter()
            .chain(&split.val_ids)
            .chain(&split.test_ids)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100, "splits must partition the subjects");
        let again = split_dataset(&subjects, [0.8, 0.15, 0.05], 3).unwrap();
        assert_eq!(again, split);

        let err = split_dataset(&subjects, [1.0, 0.0, 0.0], 3).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }
}
