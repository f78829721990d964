//! Shared fixtures for unit tests.

use chrono::NaiveDate;
use rand::Rng;

use crate::embeddings::{GroupKind, GroupSpec, Registry};
use crate::features::{GroupStats, NormStats, Sample};
use crate::interaction::SnnConfig;
use crate::model::{Model, ModelConfig};
use crate::numcore::{Activation, Tensor};
use crate::ordinal::ClassBoundaries;
use crate::rng::substream;

pub(crate) fn toy_registry() -> Registry {
    Registry {
        groups: vec![
            GroupSpec {
                name: "static_attrs".into(),
                kind: GroupKind::Constant,
                feature_names: vec!["a".into(), "b".into(), "c".into()],
            },
            GroupSpec {
                name: "daily".into(),
                kind: GroupKind::TimeDependent,
                feature_names: vec!["x".into(), "y".into()],
            },
            GroupSpec {
                name: "flows".into(),
                kind: GroupKind::CrossCounty,
                feature_names: vec!["v".into()],
            },
        ],
        window: 4,
        counties: vec!["c0".into(), "c1".into(), "c2".into()],
    }
}

pub(crate) fn identity_norm(registry: &Registry) -> NormStats {
    let per_group = registry
        .groups
        .iter()
        .map(|g| {
            let n = g.feature_count();
            (
                g.name.clone(),
                GroupStats {
                    mean: vec![0.0; n],
                    std: vec![1.0; n],
                },
            )
        })
        .collect();
    NormStats { per_group }
}

pub(crate) fn toy_samples(registry: &Registry, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = substream(seed, "toy-samples");
    (0..count)
        .map(|i| {
            let groups = registry
                .groups
                .iter()
                .map(|spec| {
                    let shape = registry.sample_shape(spec);
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                    Tensor::new(shape, data).unwrap()
                })
                .collect();
            Sample {
                county: format!("c{}", i % 3),
                label_date: NaiveDate::from_ymd_opt(2020, 5, 1).unwrap()
                    + chrono::Days::new(i as u64),
                rise: (i * 7) as u64,
                class: i % 4,
                groups,
            }
        })
        .collect()
}

pub(crate) fn toy_model(seed: u64) -> Model {
    let registry = toy_registry();
    let config = ModelConfig {
        registry: registry.clone(),
        embed_dim: 8,
        snn: SnnConfig {
            depth: 2,
            width: 16,
            dropout_rate: 0.05,
        },
        head_hidden: 32,
        activation: Activation::Selu,
        lambda_ce: 1.0,
    };
    let boundaries = ClassBoundaries::new(vec![1, 13, 93]).unwrap();
    Model::new(config, boundaries, identity_norm(&registry), seed).unwrap()
}
