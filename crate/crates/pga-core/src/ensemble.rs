//! Fusion of per-patch predictions: validation-threshold patch selection,
//! plain column averaging, and an affine meta-regression fitted by ordinary
//! least squares on the validation table.
//!
//! Averaging is the special case of the affine fusion with uniform weights
//! and zero intercept, and the tests hold the two paths to agree to 1e-12.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, lstsq_ridge};
use crate::trainer::PredictionTable;

/// Serializes possibly-infinite thresholds as the string "inf" because JSON
/// has no literal for infinity.
pub(crate) mod float_or_inf {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    struct FloatOrInf;

    impl Visitor<'_> for FloatOrInf {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number or the string \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(de::Error::custom(format!("unrecognized threshold {v:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(FloatOrInf)
    }
}

/// The subset of patches whose validation MAE beat the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSelection {
    #[serde(with = "float_or_inf")]
    pub threshold_years: f64,
    pub val_mae_years: Vec<f64>,
    pub selected_indices: Vec<usize>,
}

/// Keeps exactly the patches with validation MAE strictly below the
/// threshold. An infinite threshold keeps everything.
pub fn select_patches(val_mae_years: &[f64], threshold_years: f64) -> Result<PatchSelection> {
    if val_mae_years.is_empty() {
        return Err(Error::config("patch selection needs at least one validation MAE"));
    }
    if threshold_years.is_nan() {
        return Err(Error::config("selection threshold must not be NaN"));
    }
    for (i, &m) in val_mae_years.iter().enumerate() {
        if !m.is_finite() {
            return Err(Error::numeric(format!(
                "validation MAE for patch {i} is not finite ({m})"
            )));
        }
    }
    let selected_indices: Vec<usize> = val_mae_years
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| (m < threshold_years).then_some(i))
        .collect();
    if selected_indices.is_empty() {
        let best = val_mae_years.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::config(format!(
            "no patch has validation MAE below {threshold_years} years; the best patch reaches \
             {best:.3} — raise the selection threshold"
        )));
    }
    Ok(PatchSelection {
        threshold_years,
        val_mae_years: val_mae_years.to_vec(),
        selected_indices,
    })
}

fn check_subset(table: &PredictionTable, subset: &[usize]) -> Result<()> {
    table.validate()?;
    if subset.is_empty() {
        return Err(Error::config("cannot fuse an empty patch subset"));
    }
    for &i in subset {
        if i >= table.n_models() {
            return Err(Error::config(format!(
                "fusion subset references column {i}, table has {} columns",
                table.n_models()
            )));
        }
    }
    Ok(())
}

/// Per-subject arithmetic mean over the selected columns.
pub fn mean_fuse(table: &PredictionTable, subset: &[usize]) -> Result<Vec<f64>> {
    check_subset(table, subset)?;
    let inv = 1.0 / subset.len() as f64;
    Ok((0..table.n_subjects())
        .map(|row| subset.iter().map(|&j| table.column(j)[row]).sum::<f64>() * inv)
        .collect())
}

/// Affine combination of selected patch columns: intercept plus one weight
/// per selected patch, aligned with `selected_indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFusionModel {
    pub selected_indices: Vec<usize>,
    pub intercept: f64,
    pub weights: Vec<f64>,
    #[serde(with = "float_or_inf")]
    pub threshold_years: f64,
}

/// Fits chronological age on the selected validation columns plus an
/// intercept by QR least squares. `ridge` adds an explicit penalty for
/// tables that are otherwise rank-deficient; the default is plain OLS.
pub fn fit_linear_fusion(
    val_table: &PredictionTable,
    selection: &PatchSelection,
    ridge: Option<f64>,
) -> Result<LinearFusionModel> {
    check_subset(val_table, &selection.selected_indices)?;
    let n = val_table.n_subjects();
    let p = selection.selected_indices.len();
    if n <= p + 1 {
        return Err(Error::config(format!(
            "linear fusion needs more than {} validation subjects to fit {p} patch weights \
             plus an intercept, got {n}",
            p + 1
        )));
    }

    let mut design = vec![0.0; n * (p + 1)];
    for row in 0..n {
        design[row * (p + 1)] = 1.0;
        for (k, &j) in selection.selected_indices.iter().enumerate() {
            design[row * (p + 1) + k + 1] = val_table.column(j)[row];
        }
    }
    let solve = match ridge {
        Some(lambda) => lstsq_ridge(&design, n, p + 1, &val_table.ages, lambda),
        None => lstsq(&design, n, p + 1, &val_table.ages),
    };
    let coef = match solve {
        Ok(c) => c,
        Err(Error::Numeric(msg)) => {
            let failing = msg
                .split("column ")
                .nth(1)
                .and_then(|rest| rest.split_whitespace().next())
                .and_then(|tok| tok.parse::<usize>().ok());
            let name = match failing {
                Some(0) => "the intercept column".to_string(),
                Some(j) if j <= p => {
                    format!("patch column y_{}", selection.selected_indices[j - 1])
                }
                _ => return Err(Error::Numeric(msg)),
            };
            return Err(Error::numeric(format!(
                "linear fusion design matrix is rank-deficient: {name} is collinear with \
                 earlier columns; drop duplicated patches or fit with a ridge penalty"
            )));
        }
        Err(e) => return Err(e),
    };
    Ok(LinearFusionModel {
        selected_indices: selection.selected_indices.clone(),
        intercept: coef[0],
        weights: coef[1..].to_vec(),
        threshold_years: selection.threshold_years,
    })
}

/// Applies the affine fusion to a prediction table.
pub fn apply_linear_fusion(model: &LinearFusionModel, table: &PredictionTable) -> Result<Vec<f64>> {
    table.validate()?;
    if model.weights.len() != model.selected_indices.len() {
        return Err(Error::config(format!(
            "fusion model is inconsistent: {} weights for {} selected patches",
            model.weights.len(),
            model.selected_indices.len()
        )));
    }
    for &j in &model.selected_indices {
        if j >= table.n_models() {
            return Err(Error::config(format!(
                "fusion model needs column y_{j}, table only has columns up to y_{}",
                table.n_models() - 1
            )));
        }
    }
    Ok((0..table.n_subjects())
        .map(|row| {
            model.intercept
                + model
                    .selected_indices
                    .iter()
                    .zip(&model.weights)
                    .map(|(&j, &w)| w * table.column(j)[row])
                    .sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::seeds;
    use rand::Rng;

    fn table(ages: Vec<f64>, columns: Vec<Vec<f64>>) -> PredictionTable {
        let ids = (0..ages.len()).map(|i| format!("s{i}")).collect();
        PredictionTable {
            split: "val".to_string(),
            subject_ids: ids,
            ages,
            columns,
        }
    }

    fn random_table(rows: usize, cols: usize, seed: u64) -> PredictionTable {
        let mut rng = seeds::rng(&[seed]);
        let ages: Vec<f64> = (0..rows).map(|_| rng.gen_range(44.0..74.0)).collect();
        let columns = (0..cols)
            .map(|_| {
                ages.iter()
                    .map(|&a| a + rng.gen_range(-6.0..6.0))
                    .collect()
            })
            .collect();
        table(ages, columns)
    }

    #[test]
    fn mean_fuse_hand_cases() {
        let t = table(
            vec![50.0, 60.0],
            vec![vec![2.0, 2.0], vec![4.0, 4.0], vec![9.0, 9.0]],
        );
        assert_eq!(mean_fuse(&t, &[0, 1]).unwrap(), vec![3.0, 3.0]);
        assert_eq!(mean_fuse(&t, &[2]).unwrap(), t.column(2));
        let same = table(vec![50.0], vec![vec![7.0], vec![7.0]]);
        assert_eq!(mean_fuse(&same, &[0, 1]).unwrap(), vec![7.0]);

        assert!(mean_fuse(&t, &[]).is_err());
        assert!(mean_fuse(&t, &[3]).is_err());
    }

    #[test]
    fn mean_fuse_is_permutation_invariant_and_bounded() {
        let t = random_table(15, 4, 901);
        let forward = mean_fuse(&t, &[0, 1, 2, 3]).unwrap();
        let shuffled = mean_fuse(&t, &[2, 0, 3, 1]).unwrap();
        for (a, b) in forward.iter().zip(&shuffled) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in 0..t.n_subjects() {
            let vals: Vec<f64> = (0..4).map(|j| t.column(j)[row]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(forward[row] >= lo - 1e-12 && forward[row] <= hi + 1e-12);
        }
    }

    #[test]
    fn selection_uses_a_strict_threshold() {
        let maes = [2.5, 3.0, 3.5];
        let sel = select_patches(&maes, 3.0).unwrap();
        assert_eq!(sel.selected_indices, vec![0]);

        let all = select_patches(&maes, f64::INFINITY).unwrap();
        assert_eq!(all.selected_indices, vec![0, 1, 2]);

        let err = select_patches(&maes, 2.0).unwrap_err().to_string();
        assert!(err.contains("raise the selection threshold"), "got: {err}");
        assert!(err.contains("2.500"), "got: {err}");

        assert!(select_patches(&[2.0, f64::NAN], 3.0).is_err());
        assert!(select_patches(&maes, f64::NAN).is_err());
        assert!(select_patches(&[], 3.0).is_err());
    }

    #[test]
    fn exact_affine_data_is_recovered() {
        let ages: Vec<f64> = (0..8).map(|i| 45.0 + 3.5 * i as f64).collect();
        let y1: Vec<f64> = ages.iter().map(|&a| (a - 1.0) / 2.0).collect();
        let noise: Vec<f64> = (0..8).map(|i| 50.0 + ((i * 7) % 5) as f64).collect();
        let t = table(ages, vec![noise, y1]);
        let sel = select_patches(&[5.0, 2.0], 3.0).unwrap();
        assert_eq!(sel.selected_indices, vec![1]);

        let model = fit_linear_fusion(&t, &sel, None).unwrap();
        assert!((model.intercept - 1.0).abs() < 1e-9, "w0 = {}", model.intercept);
        assert!((model.weights[0] - 2.0).abs() < 1e-9, "w1 = {}", model.weights[0]);

        let fused = apply_linear_fusion(&model, &t).unwrap();
        for (f, a) in fused.iter().zip(&t.ages) {
            assert!((f - a).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_columns_name_the_collinear_patch() {
        let t = random_table(12, 2, 902);
        let dup = table(
            t.ages.clone(),
            vec![t.column(0).to_vec(), t.column(0).to_vec()],
        );
        let sel = select_patches(&[2.0, 2.0], 3.0).unwrap();
        let err = fit_linear_fusion(&dup, &sel, None).unwrap_err().to_string();
        assert!(err.contains("rank-deficient"), "got: {err}");
        assert!(err.contains("y_1"), "got: {err}");

        let ridged = fit_linear_fusion(&dup, &sel, Some(1e-6)).unwrap();
        assert!(ridged.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn ols_matches_a_normal_equations_oracle_on_random_tables() {
        for seed in [903, 904, 905] {
            let t = random_table(50, 4, seed);
            let sel = select_patches(&vec![1.0; 4], 2.0).unwrap();
            let model = fit_linear_fusion(&t, &sel, None).unwrap();

            let p = 5;
            let n = t.n_subjects();
            let mut design = vec![0.0; n * p];
            for row in 0..n {
                design[row * p] = 1.0;
                for j in 0..4 {
                    design[row * p + j + 1] = t.column(j)[row];
                }
            }
            let mut gram = vec![0.0; p * p];
            let mut rhs = vec![0.0; p];
            for row in 0..n {
                for i in 0..p {
                    rhs[i] += design[row * p + i] * t.ages[row];
                    for j in 0..p {
                        gram[i * p + j] += design[row * p + i] * design[row * p + j];
                    }
                }
            }
            let coef = solve_dense(&mut gram, &mut rhs, p);

            assert!((model.intercept - coef[0]).abs() < 1e-8);
            for j in 0..4 {
                assert!(
                    (model.weights[j] - coef[j + 1]).abs() < 1e-8,
                    "seed {seed} weight {j}: {} vs {}",
                    model.weights[j],
                    coef[j + 1]
                );
            }

            let fused = apply_linear_fusion(&model, &t).unwrap();
            let mut worst = 0.0f64;
            for i in 0..p {
                let mut dot = 0.0;
                for row in 0..n {
                    dot += design[row * p + i] * (fused[row] - t.ages[row]);
                }
                worst = worst.max(dot.abs());
            }
            assert!(worst < 1e-8, "normal equations residual {worst}");
        }
    }

    fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap();
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
            for row in col + 1..n {
                let f = a[row * n + col] / a[col * n + col];
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= a[row * n + k] * x[k];
            }
            x[row] = acc / a[row * n + row];
        }
        x
    }

    #[test]
    fn uniform_weights_and_zero_intercept_reduce_to_the_mean() {
        for seed in [906, 907] {
            let t = random_table(20, 5, seed);
            let subset = vec![0, 2, 4];
            let model = LinearFusionModel {
                selected_indices: subset.clone(),
                intercept: 0.0,
                weights: vec![1.0 / 3.0; 3],
                threshold_years: f64::INFINITY,
            };
            let affine = apply_linear_fusion(&model, &t).unwrap();
            let mean = mean_fuse(&t, &subset).unwrap();
            for (a, m) in affine.iter().zip(&mean) {
                assert!((a - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fitted_fusion_beats_its_parts_on_the_fitting_set() {
        let t = random_table(40, 4, 908);
        let sel = select_patches(&vec![1.0; 4], 2.0).unwrap();
        let model = fit_linear_fusion(&t, &sel, None).unwrap();
        let fused = apply_linear_fusion(&model, &t).unwrap();

        let sq = |pred: &[f64]| -> f64 {
            pred.iter()
                .zip(&t.ages)
                .map(|(&p, &a)| (p - a) * (p - a))
                .sum()
        };
        let fused_sq = sq(&fused);
        let mean_sq = sq(&mean_fuse(&t, &sel.selected_indices).unwrap());
        assert!(fused_sq <= mean_sq + 1e-9);

        let fused_mae = metrics::mae(&fused, &t.ages).unwrap();
        for j in 0..4 {
            let col_mae = metrics::mae(t.column(j), &t.ages).unwrap();
            assert!(
                fused_mae <= col_mae + 1e-9,
                "column {j} MAE {col_mae} beat fused {fused_mae}"
            );
        }
    }

    #[test]
    fn degenerate_applications_behave() {
        let t = random_table(6, 3, 909);
        let constant = LinearFusionModel {
            selected_indices: vec![],
            intercept: 58.5,
            weights: vec![],
            threshold_years: 1.0,
        };
        assert_eq!(
            apply_linear_fusion(&constant, &t).unwrap(),
            vec![58.5; t.n_subjects()]
        );

        let missing = LinearFusionModel {
            selected_indices: vec![5],
            intercept: 0.0,
            weights: vec![1.0],
            threshold_years: f64::INFINITY,
        };
        let err = apply_linear_fusion(&missing, &t).unwrap_err().to_string();
        assert!(err.contains("y_5"), "got: {err}");
    }

    #[test]
    fn too_few_validation_subjects_are_rejected() {
        let t = random_table(4, 3, 910);
        let sel = select_patches(&vec![1.0; 3], 2.0).unwrap();
        let err = fit_linear_fusion(&t, &sel, None).unwrap_err().to_string();
        assert!(err.contains("validation subjects"), "got: {err}");
        let bigger = random_table(5, 3, 910);
        assert!(fit_linear_fusion(&bigger, &sel, None).is_ok());
    }

    #[test]
    fn fusion_model_json_round_trips_with_infinite_threshold() {
        let model = LinearFusionModel {
            selected_indices: vec![0, 3, 7],
            intercept: 12.25,
            weights: vec![0.5, 0.25, 0.125],
            threshold_years: f64::INFINITY,
        };
        let text = serde_json::to_string(&model).unwrap();
        assert!(text.contains("\"threshold_years\":\"inf\""), "got: {text}");
        let back: LinearFusionModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, model);

        let finite = LinearFusionModel {
            threshold_years: 3.0,
            ..model
        };
        let text = serde_json::to_string(&finite).unwrap();
        assert!(text.contains("\"threshold_years\":3.0"), "got: {text}");
        let back: LinearFusionModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, finite);

        let sel = PatchSelection {
            threshold_years: f64::INFINITY,
            val_mae_years: vec![2.0, 4.0],
            selected_indices: vec![0, 1],
        };
        let text = serde_json::to_string(&sel).unwrap();
        let back: PatchSelection = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sel);
    }
}
