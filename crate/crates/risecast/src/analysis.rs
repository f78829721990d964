//! Interpretability analyses over a frozen model.
//!
//! All three procedures are read-only: they score shuffled copies of the
//! evaluation set and never touch model parameters.
//!
//! - Permutation feature importance: shuffle one feature's values across
//!   samples (the whole per-sample slice moves together, preserving the
//!   feature's marginal distribution) and record the accuracy drop.
//! - Time-step importance: shuffle one past-day slice across samples in
//!   every time-varying group simultaneously.
//! - Interaction magnitudes: mean absolute pairwise dot-product activation
//!   per group pair.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embeddings::GroupKind;
use crate::error::{Error, Result};
use crate::features::Sample;
use crate::interaction::pair_order;
use crate::model::Model;
use crate::rng::substream;

/// Importance of one feature: accuracy drop when shuffled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub group: String,
    pub feature: String,
    pub baseline_accuracy: f64,
    pub randomized_accuracy: f64,
    /// baseline - randomized; negative values are recorded as-is.
    pub accuracy_drop: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub baseline_accuracy: f64,
    pub repeats: usize,
    /// Sorted by descending accuracy drop.
    pub entries: Vec<ImportanceEntry>,
}

/// Importance of one past-day offset (1 = most recent input day).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeStepEntry {
    pub offset_days: usize,
    pub randomized_accuracy: f64,
    pub accuracy_drop: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeStepReport {
    pub baseline_accuracy: f64,
    pub repeats: usize,
    /// Exactly `window` entries, offset 1 first.
    pub entries: Vec<TimeStepEntry>,
}

/// Mean absolute second-order activation per group pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub groups: Vec<String>,
    /// Row-major `g x g`, symmetric, zero diagonal.
    pub values: Vec<f64>,
}

impl InteractionMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.groups.len() + j]
    }

    /// Off-diagonal pairs (i < j) sorted by descending magnitude.
    pub fn ranked_pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut pairs: Vec<(usize, usize, f64)> = pair_order(self.groups.len())
            .into_iter()
            .map(|(i, j)| (i, j, self.at(i, j)))
            .collect();
        pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
        pairs
    }
}

fn shuffled_copy(samples: &[&Sample]) -> Vec<Sample> {
    samples.iter().map(|s| (*s).clone()).collect()
}

/// Shuffle feature `j` of group `gi` across samples: sample `i` receives the
/// slice of sample `perm[i]`.
fn shuffle_feature(work: &mut [Sample], originals: &[&Sample], gi: usize, j: usize, perm: &[usize]) {
    let n = {
        let shape = originals[0].groups[gi].shape();
        *shape.last().unwrap()
    };
    for (i, sample) in work.iter_mut().enumerate() {
        let src = originals[perm[i]].groups[gi].data();
        let dst = sample.groups[gi].data_mut();
        let rows = dst.len() / n;
        for r in 0..rows {
            dst[r * n + j] = src[r * n + j];
        }
    }
}

/// Shuffle one window row (day slice) across samples in every time-varying
/// group at once.
fn shuffle_timestep(work: &mut [Sample], originals: &[&Sample], model: &Model, row: usize, perm: &[usize]) {
    for (gi, spec) in model.config.registry.groups.iter().enumerate() {
        let slice_len = match spec.kind {
            GroupKind::Constant => continue,
            GroupKind::TimeDependent => spec.feature_count(),
            GroupKind::CrossCounty => {
                model.config.registry.county_count() * spec.feature_count()
            }
        };
        for (i, sample) in work.iter_mut().enumerate() {
            let src = originals[perm[i]].groups[gi].data();
            let dst = sample.groups[gi].data_mut();
            dst[row * slice_len..(row + 1) * slice_len]
                .copy_from_slice(&src[row * slice_len..(row + 1) * slice_len]);
        }
    }
}

fn eval_accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    model.accuracy(&refs)
}

/// Accuracy drop per feature under shuffling, averaged over `repeats`
/// permutations.
pub fn permutation_importance(
    model: &Model,
    eval_set: &[&Sample],
    seed: u64,
    repeats: usize,
) -> Result<ImportanceReport> {
    if repeats == 0 {
        return Err(Error::Config("importance needs at least 1 repeat".into()));
    }
    if eval_set.is_empty() {
        return Err(Error::Data("importance needs a non-empty eval set".into()));
    }
    let baseline = model.accuracy(eval_set)?;
    let mut rng = substream(seed, "analysis/importance");
    let mut entries = Vec::new();
    let mut work = shuffled_copy(eval_set);
    for (gi, spec) in model.config.registry.groups.iter().enumerate() {
        for (j, feature) in spec.feature_names.iter().enumerate() {
            let mut acc_sum = 0.0;
            for _ in 0..repeats {
                let mut perm: Vec<usize> = (0..eval_set.len()).collect();
                perm.shuffle(&mut rng);
                shuffle_feature(&mut work, eval_set, gi, j, &perm);
                acc_sum += eval_accuracy(model, &work)?;
            }
            // Restore the shuffled column before the next feature.
            let identity: Vec<usize> = (0..eval_set.len()).collect();
            shuffle_feature(&mut work, eval_set, gi, j, &identity);

            let randomized = acc_sum / repeats as f64;
            entries.push(ImportanceEntry {
                group: spec.name.clone(),
                feature: feature.clone(),
                baseline_accuracy: baseline,
                randomized_accuracy: randomized,
                accuracy_drop: baseline - randomized,
            });
        }
    }
    entries.sort_by(|a, b| b.accuracy_drop.total_cmp(&a.accuracy_drop));
    Ok(ImportanceReport {
        baseline_accuracy: baseline,
        repeats,
        entries,
    })
}

/// Accuracy drop per past-day offset under shuffling.
pub fn timestep_importance(
    model: &Model,
    eval_set: &[&Sample],
    seed: u64,
    repeats: usize,
) -> Result<TimeStepReport> {
    if repeats == 0 {
        return Err(Error::Config("time-step analysis needs at least 1 repeat".into()));
    }
    if eval_set.is_empty() {
        return Err(Error::Data("time-step analysis needs a non-empty eval set".into()));
    }
    let window = model.config.registry.window;
    let baseline = model.accuracy(eval_set)?;
    let mut rng = substream(seed, "analysis/timesteps");
    let mut entries = Vec::with_capacity(window);
    let mut work = shuffled_copy(eval_set);
    for offset in 1..=window {
        // Offset 1 is the most recent input day, i.e. the last window row.
        let row = window - offset;
        let mut acc_sum = 0.0;
        for _ in 0..repeats {
            let mut perm: Vec<usize> = (0..eval_set.len()).collect();
            perm.shuffle(&mut rng);
            shuffle_timestep(&mut work, eval_set, model, row, &perm);
            acc_sum += eval_accuracy(model, &work)?;
        }
        let identity: Vec<usize> = (0..eval_set.len()).collect();
        shuffle_timestep(&mut work, eval_set, model, row, &identity);

        let randomized = acc_sum / repeats as f64;
        entries.push(TimeStepEntry {
            offset_days: offset,
            randomized_accuracy: randomized,
            accuracy_drop: baseline - randomized,
        });
    }
    Ok(TimeStepReport {
        baseline_accuracy: baseline,
        repeats,
        entries,
    })
}

/// Mean absolute pairwise interaction activation over the eval set.
pub fn interaction_magnitudes(model: &Model, eval_set: &[&Sample]) -> Result<InteractionMatrix> {
    if eval_set.is_empty() {
        return Err(Error::Data("interaction analysis needs a non-empty eval set".into()));
    }
    let groups: Vec<String> = model
        .config
        .registry
        .groups
        .iter()
        .map(|g| g.name.clone())
        .collect();
    let g = groups.len();
    let activations = model.interaction_activations(eval_set)?;
    let pairs = pair_order(g);
    let mut sums = vec![0.0; pairs.len()];
    for row in &activations {
        for (k, v) in row.iter().enumerate() {
            sums[k] += v.abs();
        }
    }
    let mut values = vec![0.0; g * g];
    for ((i, j), sum) in pairs.iter().zip(&sums) {
        let mean = sum / activations.len() as f64;
        values[i * g + j] = mean;
        values[j * g + i] = mean;
    }
    Ok(InteractionMatrix { groups, values })
}

/// Seed-pinned evaluation subset for the analyses: a random fifth of the
/// given samples (at least one).
pub fn analysis_subset<'s>(samples: &[&'s Sample], seed: u64) -> Vec<&'s Sample> {
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut rng = substream(seed, "analysis/subset");
    indices.shuffle(&mut rng);
    let keep = (samples.len() / 5).max(1);
    let mut chosen: Vec<usize> = indices.into_iter().take(keep).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| samples[i]).collect()
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn fmt_float(v: f64) -> String {
    format!("{v}")
}

/// Write importance.csv and importance.json; returns the paths.
pub fn emit_importance(report: &ImportanceReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("importance.csv");
    let mut csv = String::from("group,feature,baseline_accuracy,randomized_accuracy,accuracy_drop\n");
    for e in &report.entries {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.group,
            e.feature,
            fmt_float(e.baseline_accuracy),
            fmt_float(e.randomized_accuracy),
            fmt_float(e.accuracy_drop)
        ));
    }
    write_file(&csv_path, &csv)?;
    let json_path = out_dir.join("importance.json");
    write_file(&json_path, &(serde_json::to_string_pretty(report)? + "\n"))?;
    Ok(vec![csv_path, json_path])
}

/// Write timesteps.csv and timesteps.json.
pub fn emit_timesteps(report: &TimeStepReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("timesteps.csv");
    let mut csv = String::from("offset_days,baseline_accuracy,randomized_accuracy,accuracy_drop\n");
    for e in &report.entries {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.offset_days,
            fmt_float(report.baseline_accuracy),
            fmt_float(e.randomized_accuracy),
            fmt_float(e.accuracy_drop)
        ));
    }
    write_file(&csv_path, &csv)?;
    let json_path = out_dir.join("timesteps.json");
    write_file(&json_path, &(serde_json::to_string_pretty(report)? + "\n"))?;
    Ok(vec![csv_path, json_path])
}

/// Write interactions.csv (long format, i < j pairs) and interactions.json.
pub fn emit_interactions(matrix: &InteractionMatrix, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("interactions.csv");
    let mut csv = String::from("group_i,group_j,mean_abs_activation\n");
    for (i, j) in pair_order(matrix.groups.len()) {
        csv.push_str(&format!(
            "{},{},{}\n",
            matrix.groups[i],
            matrix.groups[j],
            fmt_float(matrix.at(i, j))
        ));
    }
    write_file(&csv_path, &csv)?;
    let json_path = out_dir.join("interactions.json");
    write_file(&json_path, &(serde_json::to_string_pretty(matrix)? + "\n"))?;
    Ok(vec![csv_path, json_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{toy_model, toy_samples};

    #[test]
    fn zero_repeats_is_an_error() {
        let model = toy_model(1);
        let samples = toy_samples(&model.config.registry, 4, 2);
        let refs: Vec<&Sample> = samples.iter().collect();
        assert!(permutation_importance(&model, &refs, 1, 0).is_err());
        assert!(timestep_importance(&model, &refs, 1, 0).is_err());
    }

    #[test]
    fn constant_feature_shuffle_is_identity() {
        let model = toy_model(3);
        let mut samples = toy_samples(&model.config.registry, 12, 5);
        // Make feature 0 of the constant group identical across samples.
        for s in &mut samples {
            s.groups[0].data_mut()[0] = 0.7;
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let report = permutation_importance(&model, &refs, 9, 3).unwrap();
        let entry = report
            .entries
            .iter()
            .find(|e| e.group == "static_attrs" && e.feature == "a")
            .unwrap();
        assert_eq!(entry.accuracy_drop, 0.0);
    }

    #[test]
    fn ignored_features_have_zero_drop() {
        // Zero every weight that reads the daily group: the model output is
        // then invariant to any shuffle of that group's features.
        let mut model = toy_model(7);
        for p in model.params.iter_mut() {
            if p.name.starts_with("emb.daily.") {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let samples = toy_samples(&model.config.registry, 16, 11);
        let refs: Vec<&Sample> = samples.iter().collect();
        let report = permutation_importance(&model, &refs, 13, 3).unwrap();
        for e in &report.entries {
            if e.group == "daily" {
                assert_eq!(e.accuracy_drop, 0.0, "{}.{}", e.group, e.feature);
            }
        }
    }

    #[test]
    fn analyses_leave_parameters_bitwise_unchanged() {
        let model = toy_model(17);
        let samples = toy_samples(&model.config.registry, 10, 19);
        let refs: Vec<&Sample> = samples.iter().collect();
        let before: Vec<Vec<u64>> = model
            .params
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        permutation_importance(&model, &refs, 23, 2).unwrap();
        timestep_importance(&model, &refs, 23, 2).unwrap();
        interaction_magnitudes(&model, &refs).unwrap();
        let after: Vec<Vec<u64>> = model
            .params
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn timestep_report_has_window_entries() {
        let model = toy_model(29);
        let samples = toy_samples(&model.config.registry, 8, 31);
        let refs: Vec<&Sample> = samples.iter().collect();
        let report = timestep_importance(&model, &refs, 37, 2).unwrap();
        assert_eq!(report.entries.len(), model.config.registry.window);
        assert_eq!(report.entries[0].offset_days, 1);
    }

    #[test]
    fn constant_in_time_features_spread_drops_evenly() {
        // When every window row repeats the same values, no day offset is
        // special: drops stay in a narrow band around each other.
        let model = toy_model(53);
        let mut samples = toy_samples(&model.config.registry, 24, 59);
        for s in &mut samples {
            for gi in [1usize, 2] {
                let t = s.groups[gi].shape()[0];
                let row_len = s.groups[gi].len() / t;
                let first = s.groups[gi].data()[..row_len].to_vec();
                let data = s.groups[gi].data_mut();
                for r in 1..t {
                    data[r * row_len..(r + 1) * row_len].copy_from_slice(&first);
                }
            }
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let report = timestep_importance(&model, &refs, 61, 5).unwrap();
        let lo = report
            .entries
            .iter()
            .map(|e| e.accuracy_drop)
            .fold(f64::INFINITY, f64::min);
        let hi = report
            .entries
            .iter()
            .map(|e| e.accuracy_drop)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 0.12, "drop spread {lo}..{hi}");
    }

    #[test]
    fn interaction_matrix_is_symmetric_nonnegative_and_respects_dead_groups() {
        let mut model = toy_model(41);
        for p in model.params.iter_mut() {
            if p.name.starts_with("emb.daily.") {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let samples = toy_samples(&model.config.registry, 6, 43);
        let refs: Vec<&Sample> = samples.iter().collect();
        let matrix = interaction_magnitudes(&model, &refs).unwrap();
        let g = matrix.groups.len();
        for i in 0..g {
            assert_eq!(matrix.at(i, i), 0.0);
            for j in 0..g {
                assert_eq!(matrix.at(i, j), matrix.at(j, i));
                assert!(matrix.at(i, j) >= 0.0);
            }
        }
        // The daily group's embedding is constant zero: its row vanishes.
        let daily = matrix.groups.iter().position(|n| n == "daily").unwrap();
        for j in 0..g {
            assert_eq!(matrix.at(daily, j), 0.0);
        }
    }

    #[test]
    fn emission_is_deterministic_and_counts_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let matrix = InteractionMatrix {
            groups: (0..8).map(|i| format!("g{i}")).collect(),
            values: (0..64).map(|i| (i % 7) as f64 / 7.0).collect(),
        };
        // Symmetrize.
        let mut matrix = matrix;
        for i in 0..8 {
            for j in 0..8 {
                let v = if i == j {
                    0.0
                } else {
                    matrix.values[i.min(j) * 8 + i.max(j)]
                };
                matrix.values[i * 8 + j] = v;
            }
        }
        let paths = emit_interactions(&matrix, dir.path()).unwrap();
        let csv = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(csv.lines().count(), 1 + 28);

        let first = fs::read(&paths[0]).unwrap();
        emit_interactions(&matrix, dir.path()).unwrap();
        assert_eq!(first, fs::read(&paths[0]).unwrap());

        // Header-only importance file for an empty report.
        let report = ImportanceReport {
            baseline_accuracy: 0.5,
            repeats: 1,
            entries: vec![],
        };
        let paths = emit_importance(&report, dir.path()).unwrap();
        let csv = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }
}
