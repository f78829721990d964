//! Interaction head over group embeddings.
//!
//! Three signals are computed from the per-group embeddings and fed side by
//! side into a shallow output network:
//!
//! - explicit second-order interactions: the dot product of every pair of
//!   group embeddings, in canonical (i < j) registry order;
//! - higher-order interactions: all embeddings concatenated and passed
//!   through a self-normalizing stack of equal-width dense layers, each
//!   followed by SELU and alpha dropout;
//! - the elementwise sum of all embeddings, as a skip input for gradient
//!   flow.
//!
//! The output head is one hidden dense layer with SELU, then a dense layer
//! to one logit per class boundary, squashed to exceedance probabilities by
//! a sigmoid.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Activation, BufId, Tape};

/// Shape of the self-normalizing stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnConfig {
    pub depth: usize,
    pub width: usize,
    pub dropout_rate: f64,
}

impl SnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("snn depth must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("snn width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "snn dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Tape ids for the SNN's dense layers, outermost first.
#[derive(Clone, Debug)]
pub struct SnnWeightIds {
    pub layers: Vec<(BufId, BufId)>,
}

/// Tape ids for the output head.
#[derive(Clone, Copy, Debug)]
pub struct HeadWeightIds {
    pub hidden_w: BufId,
    pub hidden_b: BufId,
    pub out_w: BufId,
    pub out_b: BufId,
}

/// Canonical (i, j) pair order for `g` groups: all i < j, lexicographic.
pub fn pair_order(groups: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(groups * (groups.saturating_sub(1)) / 2);
    for i in 0..groups {
        for j in (i + 1)..groups {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Dot products of all embedding pairs; output `[b, g(g-1)/2]`.
pub fn pairwise_interactions(tape: &mut Tape, embs: &[BufId]) -> Result<BufId> {
    if embs.len() < 2 {
        return Err(Error::Config(format!(
            "pairwise interactions need at least 2 embeddings, got {}",
            embs.len()
        )));
    }
    let dims = tape.value(embs[0]).matrix_dims();
    for &e in embs {
        if tape.value(e).matrix_dims() != dims {
            return Err(Error::ShapeMismatch {
                op: "pairwise_interactions",
                lhs: tape.value(embs[0]).shape().to_vec(),
                rhs: tape.value(e).shape().to_vec(),
            });
        }
    }
    let mut dots = Vec::new();
    for (i, j) in pair_order(embs.len()) {
        dots.push(tape.rowwise_dot(embs[i], embs[j])?);
    }
    tape.concat_cols(&dots)
}

/// Elementwise sum of all embeddings.
pub fn sum_embeddings(tape: &mut Tape, embs: &[BufId]) -> Result<BufId> {
    let (&first, rest) = embs
        .split_first()
        .ok_or_else(|| Error::Config("sum of zero embeddings".into()))?;
    let mut acc = first;
    for &e in rest {
        acc = tape.add(acc, e)?;
    }
    Ok(acc)
}

/// Self-normalizing stack over the concatenated embeddings.
pub fn snn_forward(
    tape: &mut Tape,
    embs: &[BufId],
    weights: &SnnWeightIds,
    cfg: &SnnConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<BufId> {
    cfg.validate()?;
    if weights.layers.len() != cfg.depth {
        return Err(Error::Config(format!(
            "snn has {} weight layers but depth {}",
            weights.layers.len(),
            cfg.depth
        )));
    }
    let mut h = tape.concat_cols(embs)?;
    for &(w, b) in &weights.layers {
        h = tape.dense(h, w, Some(b), Activation::Selu)?;
        h = tape.alpha_dropout(h, cfg.dropout_rate, training, rng)?;
    }
    Ok(h)
}

/// Output head: `[interactions | snn | embedding sum]` through one hidden
/// SELU layer to per-boundary exceedance probabilities.
pub fn head_forward(
    tape: &mut Tape,
    interactions: BufId,
    snn_out: BufId,
    emb_sum: BufId,
    weights: &HeadWeightIds,
) -> Result<BufId> {
    let joined = tape.concat_cols(&[interactions, snn_out, emb_sum])?;
    let hidden = tape.dense(joined, weights.hidden_w, Some(weights.hidden_b), Activation::Selu)?;
    let logits = tape.dense(hidden, weights.out_w, Some(weights.out_b), Activation::Identity)?;
    tape.activation(logits, Activation::Sigmoid)
}
