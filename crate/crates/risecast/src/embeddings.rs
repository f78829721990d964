//! Equidimensional embeddings of heterogeneous feature groups.
//!
//! Every feature group, whatever its raw shape, is reduced to a vector of
//! the shared embedding dimension `e`:
//!
//! - constant groups `[n]` go through one fully connected layer;
//! - time-dependent groups `[t, n]` are contracted twice, first a weighted
//!   sum over features per time step (a learned holistic score), then a
//!   weighted sum over time steps, with the non-linearity applied after
//!   each stage;
//! - cross-county groups `[t, c, n]` add a county contraction between the
//!   feature and time stages.
//!
//! The stage weights are shared across the time (and county) axis, so the
//! model treats the same feature on different days more similarly than
//! different features. Batched inputs stack samples along the row axis;
//! the contractions are expressed as matrix products plus tiled row
//! products, which keeps one code path for single samples and batches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Activation, BufId, Tape};

/// Tensor layout of a feature group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    /// One value per feature per county; no time axis. Shape `[n]`.
    Constant,
    /// Daily values per feature. Shape `[t, n]`.
    TimeDependent,
    /// Daily values per (source county, feature). Shape `[t, c, n]`.
    CrossCounty,
}

/// Declared schema of one feature group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub kind: GroupKind,
    pub feature_names: Vec<String>,
}

impl GroupSpec {
    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }
}

/// Ordered group schema shared by every sample.
///
/// The group order here fixes the embedding order, the interaction-pair
/// indexing, and the column order of every report, so it must be stable
/// across runs; it is persisted verbatim in universe directories and model
/// artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub groups: Vec<GroupSpec>,
    /// Number of past days in each input window.
    pub window: usize,
    /// County identifiers; the index in this list is the county axis order
    /// of every cross-county tensor.
    pub counties: Vec<String>,
}

impl Registry {
    pub fn county_count(&self) -> usize {
        self.counties.len()
    }

    pub fn group(&self, name: &str) -> Result<&GroupSpec> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Data(format!("unknown feature group {name:?}")))
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::Data(format!("unknown feature group {name:?}")))
    }

    /// Per-sample tensor shape of a group.
    pub fn sample_shape(&self, spec: &GroupSpec) -> Vec<usize> {
        match spec.kind {
            GroupKind::Constant => vec![spec.feature_count()],
            GroupKind::TimeDependent => vec![self.window, spec.feature_count()],
            GroupKind::CrossCounty => {
                vec![self.window, self.county_count(), spec.feature_count()]
            }
        }
    }
}

/// Tape buffer ids of one group's embedding weights.
///
/// Shapes: `w`/`wf` are `[n, e]`, `wt` is `[t, e]`, `wc` is `[c, e]`, and
/// the constant-group bias is `[e]`. Each group owns its weights; nothing
/// is shared across groups, and the staged contractions carry no bias.
#[derive(Clone, Copy, Debug)]
pub enum GroupWeightIds {
    Constant { w: BufId, bias: BufId },
    TimeDependent { wf: BufId, wt: BufId },
    CrossCounty { wf: BufId, wc: BufId, wt: BufId },
}

/// Embed a constant group: one dense layer. `x` is `[b, n]`; result `[b, e]`.
pub fn embed_constant(
    tape: &mut Tape,
    x: BufId,
    w: BufId,
    bias: BufId,
    act: Activation,
) -> Result<BufId> {
    tape.dense(x, w, Some(bias), act)
}

/// Embed a time-dependent group.
///
/// `x` is the stacked window matrix `[b*t, n]`. The inner contraction forms
/// per-day holistic scores, the outer contraction weights the days.
pub fn embed_time_dependent(
    tape: &mut Tape,
    x: BufId,
    wf: BufId,
    wt: BufId,
    act: Activation,
    window: usize,
) -> Result<BufId> {
    let inner = tape.matmul(x, wf)?;
    let inner = tape.activation(inner, act)?;
    let weighted = tape.mul_tiled_rows(inner, wt)?;
    let summed = tape.sum_row_groups(weighted, window)?;
    tape.activation(summed, act)
}

/// Embed a cross-county group.
///
/// `x` is `[b*t*c, n]` with the county index varying fastest. Contractions
/// run features → counties → days, each followed by the non-linearity.
#[allow(clippy::too_many_arguments)]
pub fn embed_cross_county(
    tape: &mut Tape,
    x: BufId,
    wf: BufId,
    wc: BufId,
    wt: BufId,
    act: Activation,
    window: usize,
    counties: usize,
) -> Result<BufId> {
    let (rows, _) = tape.value(x).matrix_dims();
    if counties == 0 || rows % (window * counties) != 0 {
        return Err(Error::ShapeMismatch {
            op: "embed_cross_county",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![window, counties],
        });
    }
    let inner = tape.matmul(x, wf)?;
    let inner = tape.activation(inner, act)?;
    let county_weighted = tape.mul_tiled_rows(inner, wc)?;
    let per_day = tape.sum_row_groups(county_weighted, counties)?;
    let per_day = tape.activation(per_day, act)?;
    let day_weighted = tape.mul_tiled_rows(per_day, wt)?;
    let summed = tape.sum_row_groups(day_weighted, window)?;
    tape.activation(summed, act)
}

/// Embed every registered group, in registry order.
///
/// `inputs` maps group name to its batched tape buffer; every registered
/// group must be present. Output order is the registry order regardless of
/// map order.
pub fn embed_all(
    tape: &mut Tape,
    registry: &Registry,
    inputs: &BTreeMap<String, BufId>,
    weights: &BTreeMap<String, GroupWeightIds>,
    act: Activation,
) -> Result<Vec<BufId>> {
    let mut out = Vec::with_capacity(registry.groups.len());
    for spec in &registry.groups {
        let &x = inputs
            .get(&spec.name)
            .ok_or_else(|| Error::Data(format!("missing feature group {:?}", spec.name)))?;
        let w = weights
            .get(&spec.name)
            .ok_or_else(|| Error::Data(format!("missing weights for group {:?}", spec.name)))?;
        let emb = match (spec.kind, w) {
            (GroupKind::Constant, GroupWeightIds::Constant { w, bias }) => {
                embed_constant(tape, x, *w, *bias, act)?
            }
            (GroupKind::TimeDependent, GroupWeightIds::TimeDependent { wf, wt }) => {
                embed_time_dependent(tape, x, *wf, *wt, act, registry.window)?
            }
            (GroupKind::CrossCounty, GroupWeightIds::CrossCounty { wf, wc, wt }) => {
                embed_cross_county(
                    tape,
                    x,
                    *wf,
                    *wc,
                    *wt,
                    act,
                    registry.window,
                    registry.county_count(),
                )?
            }
            _ => {
                return Err(Error::Config(format!(
                    "weight kind does not match group kind for {:?}",
                    spec.name
                )))
            }
        };
        out.push(emb);
    }
    Ok(out)
}
