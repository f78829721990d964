//! The assembled network: embeddings, interaction head, and ordinal loss.
//!
//! A `Model` owns the parameter set, the class boundaries, and the
//! normalization statistics, so a persisted model reproduces its
//! predictions exactly. Forward passes are batched; the loss is composed
//! on the same tape so gradients flow end to end.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{embed_all, GroupKind, GroupWeightIds, Registry};
use crate::error::{Error, Result};
use crate::features::{NormStats, Sample};
use crate::interaction::{
    head_forward, pairwise_interactions, snn_forward, sum_embeddings, HeadWeightIds, SnnConfig,
    SnnWeightIds,
};
use crate::numcore::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::numcore::{Activation, BufId, ParamSet, Parameter, Tape, Tensor};
use crate::ordinal::{binary_targets, ClassBoundaries, OrdinalPrediction, LOG_EPS};
use crate::rng::substream;

/// Default output-head hidden width for `n` classifiers.
pub fn default_head_hidden(num_classifiers: usize) -> usize {
    (num_classifiers * 4).max(32)
}

/// Architecture of the model, fixed at initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub registry: Registry,
    pub embed_dim: usize,
    pub snn: SnnConfig,
    pub head_hidden: usize,
    /// Non-linearity inside the embedding contractions.
    pub activation: Activation,
    /// Weight of the multi-class cross-entropy loss term.
    pub lambda_ce: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.registry.groups.len() < 2 {
            return Err(Error::Config(
                "need at least 2 feature groups for interactions".into(),
            ));
        }
        if self.lambda_ce < 0.0 {
            return Err(Error::Config("lambda_ce must be non-negative".into()));
        }
        self.snn.validate()
    }

    pub fn num_groups(&self) -> usize {
        self.registry.groups.len()
    }

    pub fn num_pairs(&self) -> usize {
        let g = self.num_groups();
        g * (g - 1) / 2
    }
}

/// A batch of samples stacked into per-group matrices, normalized.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub inputs: BTreeMap<String, Tensor>,
    pub targets: Vec<usize>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// `[b, n]` exceedance probabilities.
    pub probs: BufId,
    /// `[b, g(g-1)/2]` pairwise dot products.
    pub interactions: BufId,
}

/// Tape handles of the composed loss.
#[derive(Clone, Copy, Debug)]
pub struct LossIds {
    pub total: BufId,
    pub bce: BufId,
    pub ce: BufId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub boundaries: ClassBoundaries,
    pub normalization: NormStats,
    pub params: ParamSet,
}

fn lecun_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches data length")
}

impl Model {
    /// Fresh model with LeCun-normal weights and zero biases drawn from the
    /// seed's init substream.
    pub fn new(
        config: ModelConfig,
        boundaries: ClassBoundaries,
        normalization: NormStats,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let mut params = ParamSet::new();
        let e = config.embed_dim;
        let t = config.registry.window;
        let c = config.registry.county_count();

        for spec in &config.registry.groups {
            let n = spec.feature_count();
            let name = &spec.name;
            match spec.kind {
                GroupKind::Constant => {
                    params.add(Parameter::new(
                        format!("emb.{name}.w"),
                        lecun_normal(vec![n, e], n, &mut rng),
                    ))?;
                    params.add(Parameter::new(
                        format!("emb.{name}.b"),
                        Tensor::zeros(vec![e]),
                    ))?;
                }
                GroupKind::TimeDependent => {
                    params.add(Parameter::new(
                        format!("emb.{name}.wf"),
                        lecun_normal(vec![n, e], n, &mut rng),
                    ))?;
                    params.add(Parameter::new(
                        format!("emb.{name}.wt"),
                        lecun_normal(vec![t, e], t, &mut rng),
                    ))?;
                }
                GroupKind::CrossCounty => {
                    params.add(Parameter::new(
                        format!("emb.{name}.wf"),
                        lecun_normal(vec![n, e], n, &mut rng),
                    ))?;
                    params.add(Parameter::new(
                        format!("emb.{name}.wc"),
                        lecun_normal(vec![c, e], c, &mut rng),
                    ))?;
                    params.add(Parameter::new(
                        format!("emb.{name}.wt"),
                        lecun_normal(vec![t, e], t, &mut rng),
                    ))?;
                }
            }
        }

        let g = config.num_groups();
        let mut in_dim = g * e;
        for layer in 0..config.snn.depth {
            params.add(Parameter::new(
                format!("snn.{layer}.w"),
                lecun_normal(vec![in_dim, config.snn.width], in_dim, &mut rng),
            ))?;
            params.add(Parameter::new(
                format!("snn.{layer}.b"),
                Tensor::zeros(vec![config.snn.width]),
            ))?;
            in_dim = config.snn.width;
        }

        let head_in = config.num_pairs() + config.snn.width + e;
        let n_out = boundaries.num_classifiers();
        params.add(Parameter::new(
            "head.hidden.w",
            lecun_normal(vec![head_in, config.head_hidden], head_in, &mut rng),
        ))?;
        params.add(Parameter::new(
            "head.hidden.b",
            Tensor::zeros(vec![config.head_hidden]),
        ))?;
        params.add(Parameter::new(
            "head.out.w",
            lecun_normal(vec![config.head_hidden, n_out], config.head_hidden, &mut rng),
        ))?;
        params.add(Parameter::new(
            "head.out.b",
            Tensor::zeros(vec![n_out]),
        ))?;

        Ok(Model {
            config,
            boundaries,
            normalization,
            params,
        })
    }

    /// Rebuild a model from persisted parts (artifact loading).
    pub fn from_parts(
        config: ModelConfig,
        boundaries: ClassBoundaries,
        normalization: NormStats,
        params: ParamSet,
    ) -> Result<Model> {
        config.validate()?;
        Ok(Model {
            config,
            boundaries,
            normalization,
            params,
        })
    }

    pub fn num_classifiers(&self) -> usize {
        self.boundaries.num_classifiers()
    }

    /// Stack samples into normalized per-group matrices.
    pub fn make_batch(&self, samples: &[&Sample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let registry = &self.config.registry;
        let b = samples.len();
        let mut inputs = BTreeMap::new();
        for (gi, spec) in registry.groups.iter().enumerate() {
            let expect = registry.sample_shape(spec);
            let per: usize = expect.iter().product();
            let mut data = Vec::with_capacity(b * per);
            for s in samples {
                let tensor = s.groups.get(gi).ok_or_else(|| {
                    Error::Data(format!("sample missing group {:?}", spec.name))
                })?;
                if tensor.shape() != expect.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "make_batch",
                        lhs: tensor.shape().to_vec(),
                        rhs: expect.clone(),
                    });
                }
                data.extend_from_slice(tensor.data());
            }
            let mut shape = vec![b];
            shape.extend_from_slice(&expect);
            let mut stacked = Tensor::new(shape, data)?;
            self.normalization.apply(&spec.name, &mut stacked)?;
            inputs.insert(spec.name.clone(), stacked);
        }
        Ok(Batch {
            size: b,
            inputs,
            targets: samples.iter().map(|s| s.class).collect(),
        })
    }

    fn register_weights(
        &self,
        tape: &mut Tape,
    ) -> Result<(BTreeMap<String, GroupWeightIds>, SnnWeightIds, HeadWeightIds)> {
        let mut group_ids = BTreeMap::new();
        for spec in &self.config.registry.groups {
            let name = &spec.name;
            let ids = match spec.kind {
                GroupKind::Constant => GroupWeightIds::Constant {
                    w: tape.param(self.params.get(&format!("emb.{name}.w"))?),
                    bias: tape.param(self.params.get(&format!("emb.{name}.b"))?),
                },
                GroupKind::TimeDependent => GroupWeightIds::TimeDependent {
                    wf: tape.param(self.params.get(&format!("emb.{name}.wf"))?),
                    wt: tape.param(self.params.get(&format!("emb.{name}.wt"))?),
                },
                GroupKind::CrossCounty => GroupWeightIds::CrossCounty {
                    wf: tape.param(self.params.get(&format!("emb.{name}.wf"))?),
                    wc: tape.param(self.params.get(&format!("emb.{name}.wc"))?),
                    wt: tape.param(self.params.get(&format!("emb.{name}.wt"))?),
                },
            };
            group_ids.insert(name.clone(), ids);
        }
        let mut layers = Vec::with_capacity(self.config.snn.depth);
        for layer in 0..self.config.snn.depth {
            layers.push((
                tape.param(self.params.get(&format!("snn.{layer}.w"))?),
                tape.param(self.params.get(&format!("snn.{layer}.b"))?),
            ));
        }
        let head = HeadWeightIds {
            hidden_w: tape.param(self.params.get("head.hidden.w")?),
            hidden_b: tape.param(self.params.get("head.hidden.b")?),
            out_w: tape.param(self.params.get("head.out.w")?),
            out_b: tape.param(self.params.get("head.out.b")?),
        };
        Ok((group_ids, SnnWeightIds { layers }, head))
    }

    /// Run the full network on a batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        training: bool,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let (group_ids, snn_ids, head_ids) = self.register_weights(tape)?;
        let mut inputs = BTreeMap::new();
        for (name, tensor) in &batch.inputs {
            inputs.insert(name.clone(), tape.input(tensor));
        }
        let embs = embed_all(
            tape,
            &self.config.registry,
            &inputs,
            &group_ids,
            self.config.activation,
        )?;
        let interactions = pairwise_interactions(tape, &embs)?;
        let snn_out = snn_forward(tape, &embs, &snn_ids, &self.config.snn, training, dropout_rng)?;
        let emb_sum = sum_embeddings(tape, &embs)?;
        let probs = head_forward(tape, interactions, snn_out, emb_sum, &head_ids)?;
        Ok(ForwardPass {
            probs,
            interactions,
        })
    }

    /// Compose the combined loss over a batch on the same tape.
    ///
    /// The binary part is the mean over the batch of the summed
    /// per-classifier cross-entropies; the multi-class part telescopes the
    /// probabilities into a class distribution (clamp and renormalize) and
    /// takes the mean negative log-likelihood of the true class.
    pub fn loss(&self, tape: &mut Tape, probs: BufId, targets: &[usize]) -> Result<LossIds> {
        let n = self.num_classifiers();
        let b = targets.len();
        let (rows, cols) = tape.value(probs).matrix_dims();
        if rows != b || cols != n {
            return Err(Error::ShapeMismatch {
                op: "loss",
                lhs: vec![rows, cols],
                rhs: vec![b, n],
            });
        }
        for &class in targets {
            if class > n {
                return Err(Error::Data(format!(
                    "class index {class} out of range for {n} classifiers"
                )));
            }
        }

        let mut target01 = Vec::with_capacity(b * n);
        for &class in targets {
            target01.extend(binary_targets(class, n));
        }
        let bce = tape.bce_mean(probs, target01)?;

        // Telescoping differences as one constant linear map:
        // raw[:,0] = 1 - p1, raw[:,j] = pj - p(j+1), raw[:,n] = pn.
        let mut diff = Tensor::zeros(vec![n, n + 1]);
        {
            let m = diff.data_mut();
            m[0] = -1.0; // column 0 of row 0
            for j in 1..n {
                m[(j - 1) * (n + 1) + j] = 1.0;
                m[j * (n + 1) + j] = -1.0;
            }
            m[(n - 1) * (n + 1) + n] = 1.0;
        }
        let mut offset = Tensor::zeros(vec![n + 1]);
        offset.data_mut()[0] = 1.0;

        let diff_id = tape.input_owned(diff);
        let offset_id = tape.input_owned(offset);
        let raw = tape.matmul(probs, diff_id)?;
        let raw = tape.add_row_broadcast(raw, offset_id)?;
        let clamped = tape.clamp_min(raw, 0.0)?;
        let total_mass = tape.row_sum(clamped)?;
        let dist = tape.div_row_broadcast(clamped, total_mass)?;
        let picked = tape.gather_cols(dist, targets)?;
        let log_liks = tape.ln_eps(picked, LOG_EPS)?;
        let mean_ll = tape.mean_all(log_liks)?;
        let ce = tape.scale(mean_ll, -1.0)?;

        let weighted_ce = tape.scale(ce, self.config.lambda_ce)?;
        let total = tape.add(bce, weighted_ce)?;
        Ok(LossIds { total, bce, ce })
    }

    /// Inference: ordinal predictions for a set of samples.
    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<OrdinalPrediction>> {
        let n = self.num_classifiers();
        let mut out = Vec::with_capacity(samples.len());
        let mut rng = substream(0, "inference");
        for chunk in samples.chunks(256) {
            let batch = self.make_batch(chunk)?;
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &batch, false, &mut rng)?;
            let probs = tape.value(fwd.probs);
            if !probs.all_finite() {
                return Err(Error::Data("non-finite probabilities in forward".into()));
            }
            for row in probs.data().chunks_exact(n) {
                out.push(OrdinalPrediction::from_binary(row.to_vec()));
            }
        }
        Ok(out)
    }

    /// Fraction of samples whose predicted class equals the label.
    pub fn accuracy(&self, samples: &[&Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Data("cannot score an empty sample set".into()));
        }
        let preds = self.predict(samples)?;
        let hits = preds
            .iter()
            .zip(samples)
            .filter(|(p, s)| p.predicted_class == s.class)
            .count();
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Per-sample pairwise interaction activations (inference mode).
    pub fn interaction_activations(&self, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
        let pairs = self.config.num_pairs();
        let mut out = Vec::with_capacity(samples.len());
        let mut rng = substream(0, "inference");
        for chunk in samples.chunks(256) {
            let batch = self.make_batch(chunk)?;
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &batch, false, &mut rng)?;
            for row in tape.value(fwd.interactions).data().chunks_exact(pairs) {
                out.push(row.to_vec());
            }
        }
        Ok(out)
    }

    /// Forward+loss in inference mode, for scoring without gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let mut rng = substream(0, "inference");
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, false, &mut rng)?;
        let ids = self.loss(&mut tape, fwd.probs, &batch.targets)?;
        Ok(tape.value(ids.total).data()[0])
    }
}

/// Finite-difference check of the full model loss on a toy batch, dropout
/// disabled.
pub fn check_model_gradients(
    model: &mut Model,
    samples: &[&Sample],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let batch = model.make_batch(samples)?;
    let config = model.config.clone();
    let boundaries = model.boundaries.clone();
    let normalization = model.normalization.clone();
    let mut params = std::mem::take(&mut model.params);
    let report = check_gradients(
        &mut params,
        |ps, grads| {
            let probe = Model::from_parts(
                config.clone(),
                boundaries.clone(),
                normalization.clone(),
                ps.clone(),
            )?;
            let mut tape = Tape::new();
            let mut rng = substream(0, "gradcheck");
            let fwd = probe.forward(&mut tape, &batch, false, &mut rng)?;
            let ids = probe.loss(&mut tape, fwd.probs, &batch.targets)?;
            let loss = tape.value(ids.total).data()[0];
            if grads {
                tape.backward(ids.total)?;
                ps.absorb_grads(&tape)?;
            }
            Ok(loss)
        },
        cfg,
    );
    model.params = params;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ordinal;
    use crate::testutil::{toy_model, toy_samples};
    use rand::Rng;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = toy_model(3);
        let b = toy_model(3);
        let c = toy_model(4);
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(x, y)| x.value != y.value);
        assert!(differs);
    }

    #[test]
    fn forward_emits_probs_in_unit_interval() {
        let model = toy_model(1);
        let samples = toy_samples(&model.config.registry, 6, 9);
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = model.make_batch(&refs).unwrap();
        let mut tape = Tape::new();
        let mut rng = substream(1, "dropout");
        let fwd = model.forward(&mut tape, &batch, false, &mut rng).unwrap();
        let probs = tape.value(fwd.probs);
        assert_eq!(probs.matrix_dims(), (6, 3));
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let (rows, cols) = tape.value(fwd.interactions).matrix_dims();
        assert_eq!((rows, cols), (6, 3));
    }

    #[test]
    fn tape_loss_matches_per_sample_closed_form() {
        let model = toy_model(2);
        let n = model.num_classifiers();
        let mut rng = substream(5, "loss-route");
        for _ in 0..20 {
            let b = 1 + (rng.random::<u32>() % 5) as usize;
            let probs: Vec<f64> = (0..b * n).map(|_| rng.random::<f64>()).collect();
            let targets: Vec<usize> = (0..b).map(|_| (rng.random::<u32>() % 4) as usize).collect();

            let mut tape = Tape::new();
            let probs_id = tape.input(&Tensor::new(vec![b, n], probs.clone()).unwrap());
            let ids = model.loss(&mut tape, probs_id, &targets).unwrap();

            let mut want_bce = 0.0;
            let mut want_ce = 0.0;
            for (row, &class) in probs.chunks_exact(n).zip(&targets) {
                let loss = ordinal::combined_loss(row, class, 1.0).unwrap();
                want_bce += loss.bce_part;
                want_ce += loss.ce_part;
            }
            want_bce /= b as f64;
            want_ce /= b as f64;

            let got_bce = tape.value(ids.bce).data()[0];
            let got_ce = tape.value(ids.ce).data()[0];
            let got_total = tape.value(ids.total).data()[0];
            assert!((got_bce - want_bce).abs() < 1e-10, "{got_bce} vs {want_bce}");
            assert!((got_ce - want_ce).abs() < 1e-10, "{got_ce} vs {want_ce}");
            assert!(
                (got_total - (want_bce + model.config.lambda_ce * want_ce)).abs() < 1e-10
            );
        }
    }

    #[test]
    fn full_model_gradient_check_on_toy_batch() {
        let mut model = toy_model(11);
        let samples = toy_samples(&model.config.registry, 4, 13);
        let refs: Vec<&Sample> = samples.iter().collect();
        let report =
            check_model_gradients(&mut model, &refs, &GradCheckConfig::default()).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "full model gradients: {}",
            report.max_rel_err
        );
    }

    #[test]
    fn prediction_is_deterministic_and_round_trips() {
        let model = toy_model(17);
        let samples = toy_samples(&model.config.registry, 5, 23);
        let refs: Vec<&Sample> = samples.iter().collect();
        let a = model.predict(&refs).unwrap();
        let b = model.predict(&refs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.binary_probs, y.binary_probs);
            assert_eq!(x.predicted_class, y.predicted_class);
        }
        for p in &a {
            assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concurrent_inference_over_frozen_params_is_safe() {
        let model = std::sync::Arc::new(toy_model(23));
        let samples = std::sync::Arc::new(toy_samples(&model.config.registry, 12, 29));
        let refs: Vec<&Sample> = samples.iter().collect();
        let baseline: Vec<usize> = model
            .predict(&refs)
            .unwrap()
            .into_iter()
            .map(|p| p.predicted_class)
            .collect();

        let handles: Vec<_> = (0..4)
            .map(|_| {
                let model = model.clone();
                let samples = samples.clone();
                std::thread::spawn(move || {
                    let refs: Vec<&Sample> = samples.iter().collect();
                    model
                        .predict(&refs)
                        .unwrap()
                        .into_iter()
                        .map(|p| p.predicted_class)
                        .collect::<Vec<usize>>()
                })
            })
            .collect();
        for handle in handles {
            assert_eq!(handle.join().unwrap(), baseline);
        }
    }

    #[test]
    fn batch_rejects_shape_drift() {
        let model = toy_model(19);
        let mut samples = toy_samples(&model.config.registry, 2, 29);
        samples[1].groups[0] = Tensor::zeros(vec![5]);
        let refs: Vec<&Sample> = samples.iter().collect();
        assert!(model.make_batch(&refs).is_err());
    }
}
