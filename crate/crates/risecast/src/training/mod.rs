//! Mini-batch training, chronological splitting, and the two-step final
//! training protocol.
//!
//! Step one trains on the training split and records the epoch with the
//! best validation accuracy. Step two trains a fresh model on the training
//! and validation splits together for exactly that many epochs, so the
//! most recent dates contribute to the final weights without needing a
//! held-out stopping signal.

pub mod tune;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, NormStats, Sample};
use crate::interaction::SnnConfig;
use crate::model::{default_head_hidden, Model, ModelConfig};
use crate::numcore::{Activation, ParamSet, Tape};
use crate::rng::substream;

/// Everything the tuner searches over, plus fixed loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub embed_dim: usize,
    pub snn_depth: usize,
    pub snn_width: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub lambda_ce: f64,
    pub batch_size: usize,
    pub epochs_max: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embed_dim: 16,
            snn_depth: 2,
            snn_width: 64,
            dropout_rate: 0.05,
            learning_rate: 1e-3,
            lambda_ce: 1.0,
            batch_size: 32,
            epochs_max: 150,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.snn_depth == 0
            || self.snn_width == 0
            || self.batch_size == 0
            || self.epochs_max == 0
        {
            return Err(Error::Config("hyperparameters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must be in [0, 1)".into()));
        }
        if self.learning_rate < 0.0 || self.lambda_ce < 0.0 {
            return Err(Error::Config(
                "learning rate and lambda_ce must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, registry: crate::embeddings::Registry, n: usize) -> ModelConfig {
        ModelConfig {
            registry,
            embed_dim: self.embed_dim,
            snn: SnnConfig {
                depth: self.snn_depth,
                width: self.snn_width,
                dropout_rate: self.dropout_rate,
            },
            head_hidden: default_head_hidden(n),
            activation: Activation::Selu,
            lambda_ce: self.lambda_ce,
        }
    }
}

// ---------------------------------------------------------------------------
// Chronological splits
// ---------------------------------------------------------------------------

/// Inclusive label-date ranges, strictly ascending: train, then validation,
/// then test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: (NaiveDate, NaiveDate),
    pub val: (NaiveDate, NaiveDate),
    pub test: (NaiveDate, NaiveDate),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.train, self.val, self.test] {
            if lo > hi {
                return Err(Error::Config(format!("split range {lo}..{hi} inverted")));
            }
        }
        if self.train.1 >= self.val.0 || self.val.1 >= self.test.0 {
            return Err(Error::Config(
                "split date ranges must be disjoint and ascending".into(),
            ));
        }
        Ok(())
    }

    /// Carve sorted unique label dates into chronological fractions.
    pub fn from_fractions(dates: &[NaiveDate], fractions: (f64, f64, f64)) -> Result<SplitSpec> {
        let (ft, fv, fe) = fractions;
        if (ft + fv + fe - 1.0).abs() > 1e-9 || ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {fractions:?}"
            )));
        }
        let mut dates = dates.to_vec();
        dates.sort_unstable();
        dates.dedup();
        if dates.len() < 3 {
            return Err(Error::Data(format!(
                "need at least 3 distinct label dates to split, got {}",
                dates.len()
            )));
        }
        let n = dates.len();
        let train_end = (((n as f64) * ft).round() as usize).clamp(1, n - 2);
        let val_end = (((n as f64) * (ft + fv)).round() as usize).clamp(train_end + 1, n - 1);
        let spec = SplitSpec {
            train: (dates[0], dates[train_end - 1]),
            val: (dates[train_end], dates[val_end - 1]),
            test: (dates[val_end], dates[n - 1]),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn split_of(&self, date: NaiveDate) -> Option<Split> {
        if date >= self.train.0 && date <= self.train.1 {
            Some(Split::Train)
        } else if date >= self.val.0 && date <= self.val.1 {
            Some(Split::Val)
        } else if date >= self.test.0 && date <= self.test.1 {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Sample indices of each split.
#[derive(Clone, Debug, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn partition(dataset: &Dataset, split: &SplitSpec) -> Result<SplitIndices> {
    split.validate()?;
    let mut out = SplitIndices::default();
    for (i, s) in dataset.samples.iter().enumerate() {
        match split.split_of(s.label_date) {
            Some(Split::Train) => out.train.push(i),
            Some(Split::Val) => out.val.push(i),
            Some(Split::Test) => out.test.push(i),
            None => {}
        }
    }
    for (name, idx) in [("train", &out.train), ("val", &out.val), ("test", &out.test)] {
        if idx.is_empty() {
            return Err(Error::Data(format!("{name} split is empty")));
        }
    }
    Ok(out)
}

fn gather<'d>(dataset: &'d Dataset, indices: &[usize]) -> Vec<&'d Sample> {
    indices.iter().map(|&i| &dataset.samples[i]).collect()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adaptive-moment gradient descent.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamSet) -> Self {
        let first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let second = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.first[pi];
            let v = &mut self.second[pi];
            let grads = p.grad.data().to_vec();
            for (j, g) in grads.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.value.data_mut()[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Per-epoch record of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
    /// 1-based epoch with the best validation accuracy.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

pub struct TrainOutcome {
    /// Model restored to its best-validation-epoch weights.
    pub model: Model,
    pub report: TrainReport,
}

fn run_epochs(
    model: &mut Model,
    train_samples: &[&Sample],
    hp: &Hyperparams,
    epochs: usize,
    seed: u64,
    shuffle_name: &str,
    mut after_epoch: impl FnMut(&Model, usize, f64) -> Result<()>,
) -> Result<()> {
    let mut adam = Adam::new(hp.learning_rate, &model.params);
    let mut shuffle_rng = substream(seed, shuffle_name);
    let mut dropout_rng = substream(seed, "dropout");
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 1..=epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut weighted_loss = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let batch_samples: Vec<&Sample> = chunk.iter().map(|&i| train_samples[i]).collect();
            let batch = model.make_batch(&batch_samples)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch, true, &mut dropout_rng)?;
            let ids = model.loss(&mut tape, fwd.probs, &batch.targets)?;
            let loss = tape.value(ids.total).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
            weighted_loss += loss * chunk.len() as f64;
            model.params.zero_grads();
            tape.backward(ids.total)?;
            model.params.absorb_grads(&tape)?;
            adam.step(&mut model.params);
        }
        let epoch_loss = weighted_loss / train_samples.len() as f64;
        after_epoch(model, epoch, epoch_loss)?;
    }
    Ok(())
}

/// Train an existing model on an explicit sample list for a fixed number of
/// epochs, with no validation or early selection. Returns per-epoch losses.
pub fn fit(
    model: &mut Model,
    samples: &[&Sample],
    hp: &Hyperparams,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    hp.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("cannot fit on no samples".into()));
    }
    let mut losses = Vec::with_capacity(epochs);
    run_epochs(model, samples, hp, epochs, seed, "shuffle", |_, _, loss| {
        losses.push(loss);
        Ok(())
    })?;
    Ok(losses)
}

/// Step-one training: fit on the training split, score every epoch on the
/// validation split, and keep the best-epoch weights.
pub fn train(
    dataset: &Dataset,
    split: &SplitSpec,
    hp: &Hyperparams,
    seed: u64,
) -> Result<TrainOutcome> {
    hp.validate()?;
    let indices = partition(dataset, split)?;
    let train_samples = gather(dataset, &indices.train);
    let val_samples = gather(dataset, &indices.val);

    let normalization = NormStats::fit(&dataset.registry, &train_samples)?;
    let config = hp.model_config(
        dataset.registry.clone(),
        dataset.boundaries.num_classifiers(),
    );
    let mut model = Model::new(config, dataset.boundaries.clone(), normalization, seed)?;

    let mut report = TrainReport {
        epoch_train_loss: Vec::with_capacity(hp.epochs_max),
        epoch_val_accuracy: Vec::with_capacity(hp.epochs_max),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    let mut best_params: Option<ParamSet> = None;

    run_epochs(
        &mut model,
        &train_samples,
        hp,
        hp.epochs_max,
        seed,
        "shuffle",
        |m, epoch, loss| {
            let acc = m.accuracy(&val_samples)?;
            report.epoch_train_loss.push(loss);
            report.epoch_val_accuracy.push(acc);
            if acc > report.best_val_accuracy {
                report.best_val_accuracy = acc;
                report.best_epoch = epoch;
                best_params = Some(m.params.clone());
            }
            Ok(())
        },
    )?;

    if let Some(best) = best_params {
        model.params = best;
    }
    Ok(TrainOutcome { model, report })
}

#[derive(Clone, Debug)]
pub struct TwoStepOutcome {
    pub model: Model,
    pub epochs_run: usize,
    pub epoch_train_loss: Vec<f64>,
}

/// Step-two training: a fresh model on train plus validation for exactly
/// `epochs_from_step1` epochs.
pub fn train_two_step(
    dataset: &Dataset,
    split: &SplitSpec,
    hp: &Hyperparams,
    epochs_from_step1: usize,
    seed: u64,
) -> Result<TwoStepOutcome> {
    hp.validate()?;
    if epochs_from_step1 == 0 {
        return Err(Error::Config("two-step training needs at least 1 epoch".into()));
    }
    let indices = partition(dataset, split)?;
    let mut combined = indices.train.clone();
    combined.extend_from_slice(&indices.val);
    combined.sort_unstable();
    let fit_samples = gather(dataset, &combined);

    let normalization = NormStats::fit(&dataset.registry, &fit_samples)?;
    let config = hp.model_config(
        dataset.registry.clone(),
        dataset.boundaries.num_classifiers(),
    );
    // A fresh initialization, decorrelated from step one.
    let fresh_seed = seed.wrapping_add(0x9e3779b97f4a7c15);
    let mut model = Model::new(config, dataset.boundaries.clone(), normalization, fresh_seed)?;

    let mut losses = Vec::with_capacity(epochs_from_step1);
    run_epochs(
        &mut model,
        &fit_samples,
        hp,
        epochs_from_step1,
        seed,
        "shuffle-final",
        |_, _, loss| {
            losses.push(loss);
            Ok(())
        },
    )?;

    Ok(TwoStepOutcome {
        model,
        epochs_run: losses.len(),
        epoch_train_loss: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_samples;
    use crate::features::synthetic::{generate, Recipe, SyntheticUniverseSpec};

    fn small_dataset(seed: u64) -> Dataset {
        let spec = SyntheticUniverseSpec {
            name: "train-test".into(),
            counties: 8,
            start_date: "2020-04-05".parse().unwrap(),
            days: 45,
            seed,
            window: 13,
            census_features: 3,
            vulnerability_features: 3,
            distancing_features: 3,
            visitation_features: 3,
            mobility_features: 1,
            grid_cells: 4,
            recipe: Recipe::MainEffect {
                group: "visitation".into(),
                feature: 0,
            },
            noise_scale: 0.2,
            regime_days: 12,
        };
        let universe = generate(&spec).unwrap();
        build_samples(&universe, &universe.registry, &[0.33, 0.67, 0.90]).unwrap()
    }

    fn quick_hp(epochs: usize) -> Hyperparams {
        Hyperparams {
            embed_dim: 6,
            snn_depth: 1,
            snn_width: 16,
            dropout_rate: 0.0,
            learning_rate: 2e-3,
            lambda_ce: 1.0,
            batch_size: 32,
            epochs_max: epochs,
        }
    }

    #[test]
    fn split_fractions_keep_chronology() {
        let dataset = small_dataset(3);
        let dates = dataset.label_dates();
        let split = SplitSpec::from_fractions(&dates, (0.68, 0.12, 0.20)).unwrap();
        assert!(split.train.1 < split.val.0);
        assert!(split.val.1 < split.test.0);
        let indices = partition(&dataset, &split).unwrap();
        assert!(!indices.train.is_empty());
        assert!(!indices.val.is_empty());
        assert!(!indices.test.is_empty());
        // Every sample lands in exactly one split.
        assert_eq!(
            indices.train.len() + indices.val.len() + indices.test.len(),
            dataset.samples.len()
        );
        // Chronological integrity at the sample level.
        let max_train = indices
            .train
            .iter()
            .map(|&i| dataset.samples[i].label_date)
            .max()
            .unwrap();
        let min_val = indices
            .val
            .iter()
            .map(|&i| dataset.samples[i].label_date)
            .min()
            .unwrap();
        assert!(max_train < min_val);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let d =
            |s: &str| -> NaiveDate { s.parse().unwrap() };
        let spec = SplitSpec {
            train: (d("2020-04-24"), d("2020-05-20")),
            val: (d("2020-05-20"), d("2020-05-25")),
            test: (d("2020-05-26"), d("2020-05-30")),
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let dataset = small_dataset(5);
        let dates = dataset.label_dates();
        let split = SplitSpec::from_fractions(&dates, (0.68, 0.12, 0.20)).unwrap();
        let mut hp = quick_hp(3);
        hp.learning_rate = 0.0;
        let outcome = train(&dataset, &split, &hp, 7).unwrap();

        let fresh = Model::new(
            hp.model_config(
                dataset.registry.clone(),
                dataset.boundaries.num_classifiers(),
            ),
            dataset.boundaries.clone(),
            outcome.model.normalization.clone(),
            7,
        )
        .unwrap();
        for (trained, init) in outcome.model.params.iter().zip(fresh.params.iter()) {
            assert_eq!(trained.value, init.value, "{} moved", trained.name);
        }
        let losses = &outcome.report.epoch_train_loss;
        // Batch order changes summation order only.
        assert!(
            losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9),
            "loss drifted: {losses:?}"
        );
    }

    #[test]
    fn loss_decreases_early_and_determinism_holds() {
        let dataset = small_dataset(9);
        let dates = dataset.label_dates();
        let split = SplitSpec::from_fractions(&dates, (0.68, 0.12, 0.20)).unwrap();
        let hp = quick_hp(5);
        let a = train(&dataset, &split, &hp, 11).unwrap();
        let losses = &a.report.epoch_train_loss;
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "train loss rose: {losses:?}");
        }
        assert!(a.report.best_epoch >= 1 && a.report.best_epoch <= 5);

        let b = train(&dataset, &split, &hp, 11).unwrap();
        assert_eq!(a.report.epoch_train_loss, b.report.epoch_train_loss);
        for (x, y) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn both_loss_variants_decrease_when_overfitting() {
        // Pure binary cross-entropy (lambda 0) and the combined loss
        // (lambda 1) both descend on a small memorization workload.
        let dataset = small_dataset(21);
        let refs: Vec<&Sample> = dataset.samples.iter().collect();
        for lambda in [0.0, 1.0] {
            let hp = Hyperparams {
                embed_dim: 8,
                snn_depth: 1,
                snn_width: 16,
                dropout_rate: 0.0,
                learning_rate: 2e-3,
                lambda_ce: lambda,
                batch_size: 32,
                epochs_max: 6,
            };
            let normalization = NormStats::fit(&dataset.registry, &refs).unwrap();
            let config = hp.model_config(
                dataset.registry.clone(),
                dataset.boundaries.num_classifiers(),
            );
            let mut model =
                Model::new(config, dataset.boundaries.clone(), normalization, 33).unwrap();
            let losses = fit(&mut model, &refs, &hp, 6, 33).unwrap();
            for w in losses.windows(2) {
                assert!(w[1] < w[0], "lambda {lambda}: losses {losses:?}");
            }
        }
    }

    #[test]
    fn two_step_runs_exactly_the_requested_epochs() {
        let dataset = small_dataset(13);
        let dates = dataset.label_dates();
        let split = SplitSpec::from_fractions(&dates, (0.68, 0.12, 0.20)).unwrap();
        let hp = quick_hp(4);
        let outcome = train_two_step(&dataset, &split, &hp, 3, 17).unwrap();
        assert_eq!(outcome.epochs_run, 3);
        assert_eq!(outcome.epoch_train_loss.len(), 3);

        let again = train_two_step(&dataset, &split, &hp, 3, 17).unwrap();
        for (x, y) in outcome.model.params.iter().zip(again.model.params.iter()) {
            assert_eq!(x.value, y.value);
        }
    }
}
