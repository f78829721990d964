//! Synthetic county universe with plantable signal.
//!
//! The generator replaces proprietary data with a fully deterministic
//! universe whose labels are a known function of designated features. The
//! pipeline is acyclic:
//!
//! 1. raw feature streams (static attributes, daily streams, flows, grid
//!    intensities) are drawn from per-county substreams;
//! 2. a driver score per (county, label day) is computed from the planted
//!    features exactly as the model will see them (window means over the
//!    input window, or the most recent input day);
//! 3. drivers map to target weekly rises (quantile classes, noised);
//! 4. daily case increments greedily track the targets — a weekly rise is
//!    a 7-day sliding sum, so targets are matched exactly whenever they
//!    move slower than the window and lag a few days otherwise;
//! 5. derived feature groups (past rises, reproduction number, activity
//!    concentration, source-county case loads) are computed from the case
//!    series and grid with the same formulas used on real data.
//!
//! Because the driver is computed from the features visible in the input
//! window, the label carries no information the model cannot reach.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{GroupKind, GroupSpec, Registry};
use crate::error::{Error, Result};
use crate::ordinal::{assign_class, derive_boundaries};
use crate::rng::substream;

use super::store::Universe;
use super::{venables_distance, CaseSeries, GridCell, PROJECTION_DAYS, R0_LOOKBACK_DAYS,
            SERIAL_INTERVAL_DAYS};

/// Which features drive the labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Recipe {
    /// Labels follow a latent per-county process no feature exposes.
    None,
    /// Driver is the input-window mean of one feature (or the value itself
    /// for a constant group).
    MainEffect { group: String, feature: usize },
    /// Driver is the feature's value on the most recent input day; the
    /// feature is generated in short 7-day regimes so weekly-rise labels
    /// can track it.
    MostRecentDay { group: String, feature: usize },
    /// Driver is the product of two standardized window summaries; neither
    /// feature is informative alone.
    PairProduct {
        group_a: String,
        feature_a: usize,
        group_b: String,
        feature_b: usize,
    },
    /// Driver is the exclusive-or of two median-thresholded window
    /// summaries; marginals carry no label information at all.
    PairXor {
        group_a: String,
        feature_a: usize,
        group_b: String,
        feature_b: usize,
    },
}

fn default_window() -> usize {
    13
}
fn default_census() -> usize {
    5
}
fn default_vulnerability() -> usize {
    4
}
fn default_distancing() -> usize {
    4
}
fn default_visitation() -> usize {
    5
}
fn default_mobility() -> usize {
    1
}
fn default_grid_cells() -> usize {
    6
}
fn default_regime_days() -> usize {
    20
}

/// Parameters of a synthetic universe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUniverseSpec {
    pub name: String,
    pub counties: usize,
    pub start_date: NaiveDate,
    pub days: usize,
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_census")]
    pub census_features: usize,
    #[serde(default = "default_vulnerability")]
    pub vulnerability_features: usize,
    #[serde(default = "default_distancing")]
    pub distancing_features: usize,
    #[serde(default = "default_visitation")]
    pub visitation_features: usize,
    /// Raw flow features; a derived source-county case-load column is
    /// appended.
    #[serde(default = "default_mobility")]
    pub mobility_features: usize,
    #[serde(default = "default_grid_cells")]
    pub grid_cells: usize,
    pub recipe: Recipe,
    /// Log-normal sigma applied to target rises.
    pub noise_scale: f64,
    /// Days between regime switches of the stream features; 0 keeps each
    /// county's levels constant for the whole span.
    #[serde(default = "default_regime_days")]
    pub regime_days: usize,
}

/// Post-generation accounting.
#[derive(Clone, Debug)]
pub struct SynthDiagnostics {
    /// Fraction of label days whose achieved class equals the intended
    /// class (an empirical ceiling for any predictor).
    pub intended_match_rate: Option<f64>,
    pub label_days: usize,
}

const STREAM_GROUPS: [&str; 2] = ["distancing", "visitation"];

/// Per-class target weekly rises before noise.
const BASE_RISES: [f64; 4] = [0.0, 6.0, 45.0, 170.0];
const XOR_LOW_RISE: f64 = 4.0;
const XOR_HIGH_RISE: f64 = 60.0;
/// Daily wiggle on top of regime levels.
const WIGGLE: f64 = 0.25;

impl SyntheticUniverseSpec {
    fn validate(&self) -> Result<()> {
        if self.counties < 2 {
            return Err(Error::Config("need at least 2 counties".into()));
        }
        let earliest = self.window + PROJECTION_DAYS - 1;
        if self.days <= earliest {
            return Err(Error::Config(format!(
                "span of {} days leaves no label dates (need > {})",
                self.days, earliest
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise scale must be non-negative".into()));
        }
        if self.grid_cells < 2 {
            return Err(Error::Config("need at least 2 grid cells".into()));
        }
        for (group, feature) in self.recipe_refs() {
            let n = match group {
                "census" => self.census_features,
                "vulnerability" => self.vulnerability_features,
                "distancing" => self.distancing_features,
                "visitation" => self.visitation_features,
                other => {
                    return Err(Error::Data(format!(
                        "recipe references unknown or non-plantable feature group {other:?}"
                    )))
                }
            };
            if feature >= n {
                return Err(Error::Data(format!(
                    "recipe references feature {feature} of group {group:?} which has {n}"
                )));
            }
        }
        Ok(())
    }

    fn recipe_refs(&self) -> Vec<(&str, usize)> {
        match &self.recipe {
            Recipe::None => vec![],
            Recipe::MainEffect { group, feature } | Recipe::MostRecentDay { group, feature } => {
                vec![(group.as_str(), *feature)]
            }
            Recipe::PairProduct {
                group_a,
                feature_a,
                group_b,
                feature_b,
            }
            | Recipe::PairXor {
                group_a,
                feature_a,
                group_b,
                feature_b,
            } => vec![(group_a.as_str(), *feature_a), (group_b.as_str(), *feature_b)],
        }
    }

    fn registry(&self) -> Registry {
        let feature_names = |prefix: &str, n: usize| -> Vec<String> {
            (0..n).map(|i| format!("{prefix}_{i}")).collect()
        };
        let counties = (0..self.counties).map(|i| format!("c{i:03}")).collect();
        let mut mobility_names = feature_names("flow", self.mobility_features);
        mobility_names.push("src_log_cases".to_string());
        Registry {
            groups: vec![
                GroupSpec {
                    name: "census".into(),
                    kind: GroupKind::Constant,
                    feature_names: feature_names("census", self.census_features),
                },
                GroupSpec {
                    name: "vulnerability".into(),
                    kind: GroupKind::Constant,
                    feature_names: feature_names("vuln", self.vulnerability_features),
                },
                GroupSpec {
                    name: "past_rise".into(),
                    kind: GroupKind::TimeDependent,
                    feature_names: vec![
                        "weekly_rise".into(),
                        "log_weekly_rise".into(),
                        "rise_3day".into(),
                    ],
                },
                GroupSpec {
                    name: "reproduction".into(),
                    kind: GroupKind::TimeDependent,
                    feature_names: vec!["r0".into(), "r0_valid".into()],
                },
                GroupSpec {
                    name: "venables".into(),
                    kind: GroupKind::TimeDependent,
                    feature_names: vec!["venables_km".into(), "log_total_activity".into()],
                },
                GroupSpec {
                    name: "distancing".into(),
                    kind: GroupKind::TimeDependent,
                    feature_names: feature_names("distancing", self.distancing_features),
                },
                GroupSpec {
                    name: "visitation".into(),
                    kind: GroupKind::TimeDependent,
                    feature_names: feature_names("visitation", self.visitation_features),
                },
                GroupSpec {
                    name: "mobility".into(),
                    kind: GroupKind::CrossCounty,
                    feature_names: mobility_names,
                },
            ],
            window: self.window,
            counties,
        }
    }
}

/// Deterministic universe for the spec; see the module docs for the
/// construction.
pub fn generate(spec: &SyntheticUniverseSpec) -> Result<Universe> {
    Ok(generate_with_diagnostics(spec)?.0)
}

pub fn generate_with_diagnostics(
    spec: &SyntheticUniverseSpec,
) -> Result<(Universe, SynthDiagnostics)> {
    spec.validate()?;
    let registry = spec.registry();
    let c = spec.counties;
    let days = spec.days;
    let seed = spec.seed;

    // -- 1. raw streams ------------------------------------------------------

    let mut constant: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut census = BTreeMap::new();
    let mut vuln = BTreeMap::new();
    for (ci, county) in registry.counties.iter().enumerate() {
        let mut rng = substream(seed, &format!("synth/{}/census/{ci}", spec.name));
        let values: Vec<f64> = (0..spec.census_features)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        census.insert(county.clone(), values);
        let mut rng = substream(seed, &format!("synth/{}/vuln/{ci}", spec.name));
        let values: Vec<f64> = (0..spec.vulnerability_features)
            .map(|_| rng.random::<f64>())
            .collect();
        vuln.insert(county.clone(), values);
    }
    constant.insert("census".into(), census);
    constant.insert("vulnerability".into(), vuln);

    // Stream features: regime levels plus daily wiggle. Features designated
    // by a most-recent-day recipe run on 7-day regimes with a per-county
    // phase so weekly-rise labels can track them.
    let most_recent_ref: Option<(String, usize)> = match &spec.recipe {
        Recipe::MostRecentDay { group, feature } => Some((group.clone(), *feature)),
        _ => None,
    };
    let exact_main: Option<(String, usize)> = match &spec.recipe {
        // Noise-free, switch-free universes keep the planted feature free of
        // wiggle so labels are an exact function of its window mean.
        Recipe::MainEffect { group, feature }
            if spec.noise_scale == 0.0 && spec.regime_days == 0 =>
        {
            Some((group.clone(), *feature))
        }
        _ => None,
    };

    let mut streams: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for group in STREAM_GROUPS {
        let n = registry.group(group)?.feature_count();
        let mut per_county = BTreeMap::new();
        for (ci, county) in registry.counties.iter().enumerate() {
            let mut rng = substream(seed, &format!("synth/{}/stream/{group}/{ci}", spec.name));
            let mut data = vec![0.0; days * n];
            for j in 0..n {
                let recent = most_recent_ref
                    .as_ref()
                    .is_some_and(|(g, f)| g == group && *f == j);
                let exact = exact_main
                    .as_ref()
                    .is_some_and(|(g, f)| g == group && *f == j);
                let regime_len = if recent { 7 } else { spec.regime_days };

                // Per-day regime index. Segment lengths are jittered (except
                // for 7-day most-recent regimes, which weekly labels must be
                // able to track) so county identity does not pin future
                // switch dates.
                let mut regime_of_day = vec![0usize; days];
                let mut num_regimes = 1;
                if regime_len > 0 {
                    let phase = (rng.random::<u32>() as usize) % regime_len;
                    let mut next_switch = if phase == 0 { regime_len } else { phase };
                    let mut regime = 0;
                    for (d, slot) in regime_of_day.iter_mut().enumerate() {
                        if d >= next_switch {
                            regime += 1;
                            let jitter = if recent {
                                0
                            } else {
                                (rng.random::<u32>() as usize % 5) as i64 - 2
                            };
                            let span = (regime_len as i64 + jitter).max(3) as usize;
                            next_switch = d + span;
                        }
                        *slot = regime;
                    }
                    num_regimes = regime + 1;
                }
                let mut levels: Vec<f64> = (0..num_regimes)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                // Center levels per county so county identity carries no
                // information about a feature's typical value.
                if levels.len() > 1 {
                    let mean = levels.iter().sum::<f64>() / levels.len() as f64;
                    for l in &mut levels {
                        *l -= mean;
                    }
                }
                let wiggle = if exact { 0.0 } else { WIGGLE };
                for d in 0..days {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data[d * n + j] = levels[regime_of_day[d]] + wiggle * z;
                }
            }
            per_county.insert(county.clone(), data);
        }
        streams.insert(group.to_string(), per_county);
    }

    // Mobility flows: a gravity-like base per ordered pair, jittered daily.
    let n_flow = spec.mobility_features;
    let n_mob = n_flow + 1;
    let mut mobility = vec![0.0; days * c * c * n_mob];
    for si in 0..c {
        for di in 0..c {
            let mut rng = substream(seed, &format!("synth/{}/mobility/{si}/{di}", spec.name));
            for k in 0..n_flow {
                let z: f64 = StandardNormal.sample(&mut rng);
                let base = (0.5 * z).exp() + if si == di { 2.0 } else { 0.0 };
                for d in 0..days {
                    let j: f64 = StandardNormal.sample(&mut rng);
                    mobility[((d * c + di) * c + si) * n_mob + k] = base * (0.2 * j).exp();
                }
            }
        }
    }

    // Grid: fixed cell coordinates per county, log-normal daily intensity.
    let mut grid: BTreeMap<String, Vec<Vec<GridCell>>> = BTreeMap::new();
    for (ci, county) in registry.counties.iter().enumerate() {
        let mut rng = substream(seed, &format!("synth/{}/grid/{ci}", spec.name));
        let coords: Vec<(f64, f64)> = (0..spec.grid_cells)
            .map(|_| (rng.random::<f64>() * 8.0, rng.random::<f64>() * 8.0))
            .collect();
        let mut per_day = Vec::with_capacity(days);
        for _ in 0..days {
            let cells: Vec<GridCell> = coords
                .iter()
                .map(|&(x_km, y_km)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    GridCell {
                        x_km,
                        y_km,
                        intensity: (0.4 * z).exp(),
                    }
                })
                .collect();
            per_day.push(cells);
        }
        grid.insert(county.clone(), per_day);
    }

    // -- 2. drivers ----------------------------------------------------------

    // Window summary of a planted feature at label day d: mean over the
    // input window (clamped during warm-up), or the raw value for constants.
    let summary = |group: &str, feature: usize, ci: usize, d: usize| -> f64 {
        let county = &registry.counties[ci];
        match group {
            "census" | "vulnerability" => constant[group][county][feature],
            _ => {
                let n = registry.group(group).unwrap().feature_count();
                let data = &streams[group][county];
                let end = d - PROJECTION_DAYS;
                let start = end.saturating_sub(spec.window - 1);
                let vals: Vec<f64> = (start..=end).map(|i| data[i * n + feature]).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        }
    };
    let most_recent = |group: &str, feature: usize, ci: usize, d: usize| -> f64 {
        let county = &registry.counties[ci];
        match group {
            "census" | "vulnerability" => constant[group][county][feature],
            _ => {
                let n = registry.group(group).unwrap().feature_count();
                streams[group][county][(d - PROJECTION_DAYS) * n + feature]
            }
        }
    };

    let first_target_day = PROJECTION_DAYS;
    let driver_days: Vec<usize> = (first_target_day..days).collect();

    // Raw drivers per (county, target day).
    let mut drivers = vec![0.0; c * days];
    match &spec.recipe {
        Recipe::None => {
            for ci in 0..c {
                let mut rng = substream(seed, &format!("synth/{}/hidden/{ci}", spec.name));
                let regime_len = spec.regime_days.max(10);
                let num_regimes = days / regime_len + 2;
                let levels: Vec<f64> = (0..num_regimes)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                for &d in &driver_days {
                    drivers[ci * days + d] = levels[(d - PROJECTION_DAYS) / regime_len];
                }
            }
        }
        Recipe::MainEffect { group, feature } => {
            for ci in 0..c {
                for &d in &driver_days {
                    drivers[ci * days + d] = summary(group, *feature, ci, d);
                }
            }
        }
        Recipe::MostRecentDay { group, feature } => {
            for ci in 0..c {
                for &d in &driver_days {
                    drivers[ci * days + d] = most_recent(group, *feature, ci, d);
                }
            }
        }
        Recipe::PairProduct {
            group_a,
            feature_a,
            group_b,
            feature_b,
        }
        | Recipe::PairXor {
            group_a,
            feature_a,
            group_b,
            feature_b,
        } => {
            let mut a = vec![0.0; c * days];
            let mut b = vec![0.0; c * days];
            for ci in 0..c {
                for &d in &driver_days {
                    a[ci * days + d] = summary(group_a, *feature_a, ci, d);
                    b[ci * days + d] = summary(group_b, *feature_b, ci, d);
                }
            }
            let collect = |v: &[f64]| -> Vec<f64> {
                (0..c)
                    .flat_map(|ci| driver_days.iter().map(move |&d| v[ci * days + d]))
                    .collect()
            };
            let stats = |v: &[f64]| -> (f64, f64) {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
                (m, var.sqrt().max(1e-12))
            };
            let xor = matches!(spec.recipe, Recipe::PairXor { .. });
            if xor {
                let med = |v: &mut Vec<f64>| -> f64 {
                    v.sort_by(f64::total_cmp);
                    v[v.len() / 2]
                };
                let ma = med(&mut collect(&a));
                let mb = med(&mut collect(&b));
                for ci in 0..c {
                    for &d in &driver_days {
                        let bit = (a[ci * days + d] > ma) != (b[ci * days + d] > mb);
                        drivers[ci * days + d] = if bit { 1.0 } else { 0.0 };
                    }
                }
            } else {
                let (ma, sa) = stats(&collect(&a));
                let (mb, sb) = stats(&collect(&b));
                for ci in 0..c {
                    for &d in &driver_days {
                        drivers[ci * days + d] =
                            ((a[ci * days + d] - ma) / sa) * ((b[ci * days + d] - mb) / sb);
                    }
                }
            }
        }
    }

    // -- 3. targets ----------------------------------------------------------

    let xor = matches!(spec.recipe, Recipe::PairXor { .. });
    let mut intended_class = vec![0usize; c * days];
    let mut targets = vec![0.0; c * days];
    if xor {
        for ci in 0..c {
            for &d in &driver_days {
                let hot = drivers[ci * days + d] > 0.5;
                intended_class[ci * days + d] = if hot { 2 } else { 1 };
                targets[ci * days + d] = if hot { XOR_HIGH_RISE } else { XOR_LOW_RISE };
            }
        }
    } else {
        let mut pool: Vec<f64> = Vec::with_capacity(c * driver_days.len());
        for ci in 0..c {
            for &d in &driver_days {
                pool.push(drivers[ci * days + d]);
            }
        }
        pool.sort_by(f64::total_cmp);
        // Thresholds sit between the quantile value and the next distinct
        // value so no driver lands exactly on a class edge (window means of
        // a constant level differ by rounding across truncated windows).
        let q = |p: f64| -> f64 {
            let rank = ((p * pool.len() as f64).ceil().max(1.0) as usize).min(pool.len());
            let v = pool[rank - 1];
            match pool[rank..].iter().find(|&&x| x > v) {
                Some(&next) => 0.5 * (v + next),
                None => v,
            }
        };
        let (t1, t2, t3) = (q(0.33), q(0.67), q(0.90));
        for ci in 0..c {
            for &d in &driver_days {
                let z = drivers[ci * days + d];
                let class = (z > t1) as usize + (z > t2) as usize + (z > t3) as usize;
                intended_class[ci * days + d] = class;
                targets[ci * days + d] = BASE_RISES[class];
            }
        }
    }

    // Noise on the targets: multiplicative log-normal plus a small additive
    // count so low-class rises are not all identical.
    if spec.noise_scale > 0.0 {
        for (ci, _) in registry.counties.iter().enumerate() {
            let mut rng = substream(seed, &format!("synth/{}/label-noise/{ci}", spec.name));
            for &d in &driver_days {
                let z: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                let extra = (e * 0.9).abs().floor();
                let idx = ci * days + d;
                targets[idx] = (targets[idx] * (spec.noise_scale * z).exp()).round() + extra;
            }
        }
    }

    // -- 4. case series ------------------------------------------------------

    let mut cases: BTreeMap<String, CaseSeries> = BTreeMap::new();
    let mut increments: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (ci, county) in registry.counties.iter().enumerate() {
        let base = 2 + (ci % 4) as u64;
        let mut cumulative = Vec::with_capacity(days);
        let mut incr = vec![0u64; days];
        cumulative.push(base);
        for d in 1..days {
            let target = targets[ci * days + d].max(0.0).round() as i64;
            let trailing: i64 = (d.saturating_sub(6)..d).map(|i| incr[i] as i64).sum();
            let a = (target - trailing).max(0) as u64;
            incr[d] = a;
            cumulative.push(cumulative[d - 1] + a);
        }
        increments.insert(county.clone(), incr);
        cases.insert(
            county.clone(),
            CaseSeries {
                county: county.clone(),
                start: spec.start_date,
                cumulative,
            },
        );
    }

    // -- 5. derived groups ----------------------------------------------------

    let mut timedep: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for group in STREAM_GROUPS {
        timedep.insert(group.to_string(), streams[group].clone());
    }

    let mut past_rise = BTreeMap::new();
    let mut reproduction = BTreeMap::new();
    let mut venables = BTreeMap::new();
    for county in &registry.counties {
        let series = &cases[county];
        let cum = &series.cumulative;
        let mut pr = vec![0.0; days * 3];
        let mut rp = vec![0.0; days * 2];
        let mut vn = vec![0.0; days * 2];
        for d in 0..days {
            // Clamped lookbacks keep early days defined; these are inputs,
            // not labels.
            let rise7 = cum[d].saturating_sub(cum[d.saturating_sub(7)]) as f64;
            let rise3 = cum[d].saturating_sub(cum[d.saturating_sub(3)]) as f64;
            pr[d * 3] = rise7;
            pr[d * 3 + 1] = rise7.ln_1p();
            pr[d * 3 + 2] = rise3;

            if d >= R0_LOOKBACK_DAYS && cum[d] >= 1 && cum[d - R0_LOOKBACK_DAYS] >= 1 {
                let growth = (cum[d] as f64).ln() - (cum[d - R0_LOOKBACK_DAYS] as f64).ln();
                rp[d * 2] = (growth * SERIAL_INTERVAL_DAYS / R0_LOOKBACK_DAYS as f64).exp();
                rp[d * 2 + 1] = 1.0;
            }

            let cells = &grid[county][d];
            vn[d * 2] = venables_distance(cells)?;
            let total: f64 = cells.iter().map(|c| c.intensity).sum();
            vn[d * 2 + 1] = total.ln_1p();
        }
        past_rise.insert(county.clone(), pr);
        reproduction.insert(county.clone(), rp);
        venables.insert(county.clone(), vn);
    }
    timedep.insert("past_rise".into(), past_rise);
    timedep.insert("reproduction".into(), reproduction);
    timedep.insert("venables".into(), venables);

    // Mobility derived column: source-county case load.
    for d in 0..days {
        for di in 0..c {
            for (si, src) in registry.counties.iter().enumerate() {
                let load = (cases[src].cumulative[d] as f64).ln_1p();
                mobility[((d * c + di) * c + si) * n_mob + n_flow] = load;
            }
        }
    }
    let mut crosscounty = BTreeMap::new();
    crosscounty.insert("mobility".to_string(), mobility);

    let universe = Universe {
        registry,
        start_date: spec.start_date,
        num_days: days,
        cases,
        constant,
        timedep,
        crosscounty,
        grid,
    };

    // -- diagnostics ----------------------------------------------------------

    let earliest_label = spec.window + PROJECTION_DAYS - 1;
    let mut achieved: Vec<u64> = Vec::new();
    let mut intended: Vec<usize> = Vec::new();
    for (ci, county) in universe.registry.counties.iter().enumerate() {
        let cum = &universe.cases[county].cumulative;
        for d in earliest_label..days {
            achieved.push(cum[d] - cum[d - 7]);
            intended.push(intended_class[ci * days + d]);
        }
    }
    let intended_match_rate = derive_boundaries(&achieved, &[0.33, 0.67, 0.90])
        .ok()
        .map(|bounds| {
            let hits = achieved
                .iter()
                .zip(&intended)
                .filter(|(&rise, &want)| assign_class(rise, &bounds) == want)
                .count();
            hits as f64 / achieved.len() as f64
        });

    Ok((
        universe,
        SynthDiagnostics {
            intended_match_rate,
            label_days: achieved.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_samples, store};

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn base_spec(recipe: Recipe, noise: f64) -> SyntheticUniverseSpec {
        SyntheticUniverseSpec {
            name: "test".into(),
            counties: 10,
            start_date: date("2020-04-05"),
            days: 50,
            seed: 7,
            window: 13,
            census_features: 3,
            vulnerability_features: 3,
            distancing_features: 3,
            visitation_features: 3,
            mobility_features: 1,
            grid_cells: 4,
            recipe,
            noise_scale: noise,
            regime_days: 15,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = base_spec(
            Recipe::MainEffect {
                group: "visitation".into(),
                feature: 0,
            },
            0.2,
        );
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.timedep, b.timedep);
        assert_eq!(a.constant, b.constant);
        assert_eq!(a.crosscounty, b.crosscounty);
        for county in &a.registry.counties {
            assert_eq!(a.cases[county], b.cases[county]);
        }
    }

    #[test]
    fn unknown_recipe_feature_is_rejected() {
        let spec = base_spec(
            Recipe::MainEffect {
                group: "nonsense".into(),
                feature: 0,
            },
            0.0,
        );
        assert!(generate(&spec).is_err());
        let spec = base_spec(
            Recipe::MainEffect {
                group: "visitation".into(),
                feature: 99,
            },
            0.0,
        );
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn noise_free_main_effect_labels_are_threshold_recoverable() {
        let mut spec = base_spec(
            Recipe::MainEffect {
                group: "visitation".into(),
                feature: 1,
            },
            0.0,
        );
        spec.regime_days = 0;
        let universe = generate(&spec).unwrap();
        let dataset = build_samples(&universe, &universe.registry, &[0.33, 0.67, 0.90]).unwrap();

        // The label must be a monotone function of the planted feature's
        // window mean: sort by mean, classes never decrease.
        let gi = universe.registry.group_index("visitation").unwrap();
        let mut pairs: Vec<(f64, usize)> = dataset
            .samples
            .iter()
            .map(|s| {
                let tensor = &s.groups[gi];
                let n = universe.registry.groups[gi].feature_count();
                let mean = tensor
                    .data()
                    .chunks_exact(n)
                    .map(|row| row[1])
                    .sum::<f64>()
                    / spec.window as f64;
                (mean, s.class)
            })
            .collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        for w in pairs.windows(2) {
            assert!(
                w[0].1 <= w[1].1,
                "class order broke at mean {} ({} > {})",
                w[1].0,
                w[0].1,
                w[1].1
            );
        }
    }

    #[test]
    fn moderate_noise_keeps_intended_match_high_but_imperfect() {
        let spec = base_spec(
            Recipe::MainEffect {
                group: "visitation".into(),
                feature: 0,
            },
            0.3,
        );
        let (_, diag) = generate_with_diagnostics(&spec).unwrap();
        let rate = diag.intended_match_rate.unwrap();
        assert!(rate > 0.6 && rate < 0.99, "match rate {rate}");
    }

    #[test]
    fn xor_recipe_hides_marginals_and_exposes_joint() {
        // 10^4 samples: 50 counties x 200 label days.
        let mut spec = base_spec(
            Recipe::PairXor {
                group_a: "distancing".into(),
                feature_a: 0,
                group_b: "visitation".into(),
                feature_b: 0,
            },
            0.1,
        );
        spec.counties = 50;
        spec.days = 219;
        spec.regime_days = 15;
        let universe = generate(&spec).unwrap();
        let dataset = build_samples(&universe, &universe.registry, &[0.33, 0.67, 0.90]).unwrap();
        assert!(dataset.samples.len() >= 10_000);

        let gi_a = universe.registry.group_index("distancing").unwrap();
        let gi_b = universe.registry.group_index("visitation").unwrap();
        let window = spec.window as f64;
        let num_classes = dataset.boundaries.num_classes();
        let summaries: Vec<(f64, f64, usize)> = dataset
            .samples
            .iter()
            .map(|s| {
                let mean = |gi: usize, j: usize| {
                    let n = universe.registry.groups[gi].feature_count();
                    s.groups[gi]
                        .data()
                        .chunks_exact(n)
                        .map(|row| row[j])
                        .sum::<f64>()
                        / window
                };
                (mean(gi_a, 0), mean(gi_b, 0), s.class)
            })
            .collect();

        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let ma = median(summaries.iter().map(|s| s.0).collect());
        let mb = median(summaries.iter().map(|s| s.1).collect());

        // Empirical mutual information (nats) between bins and the class.
        let mi = |bits: Vec<usize>, arity: usize| -> f64 {
            let n = summaries.len() as f64;
            let mut joint = vec![0.0; arity * num_classes];
            for (bin, s) in bits.iter().zip(&summaries) {
                joint[bin * num_classes + s.2] += 1.0 / n;
            }
            let px: Vec<f64> = (0..arity)
                .map(|b| joint[b * num_classes..(b + 1) * num_classes].iter().sum())
                .collect();
            let py: Vec<f64> = (0..num_classes)
                .map(|y| (0..arity).map(|b| joint[b * num_classes + y]).sum())
                .collect();
            let mut total = 0.0;
            for b in 0..arity {
                for y in 0..num_classes {
                    let p = joint[b * num_classes + y];
                    if p > 0.0 {
                        total += p * (p / (px[b] * py[y])).ln();
                    }
                }
            }
            total
        };

        let bits_a: Vec<usize> = summaries.iter().map(|s| (s.0 > ma) as usize).collect();
        let bits_b: Vec<usize> = summaries.iter().map(|s| (s.1 > mb) as usize).collect();
        let joint_bits: Vec<usize> = bits_a
            .iter()
            .zip(&bits_b)
            .map(|(&a, &b)| a * 2 + b)
            .collect();

        let mi_a = mi(bits_a, 2);
        let mi_b = mi(bits_b, 2);
        let mi_joint = mi(joint_bits, 4);
        assert!(mi_a < 0.05, "marginal MI a = {mi_a}");
        assert!(mi_b < 0.05, "marginal MI b = {mi_b}");
        assert!(mi_joint > 0.3, "joint MI = {mi_joint}");
    }

    #[test]
    fn counting_and_boundary_span() {
        // Span of exactly window + projection days: one label per county.
        let mut spec = base_spec(
            Recipe::MainEffect {
                group: "distancing".into(),
                feature: 0,
            },
            0.3,
        );
        spec.days = 13 + 7;
        let universe = generate(&spec).unwrap();
        let dataset = build_samples(&universe, &universe.registry, &[0.33, 0.67, 0.90]).unwrap();
        assert_eq!(dataset.samples.len(), spec.counties);
        let dates = dataset.label_dates();
        assert_eq!(dates.len(), 1);

        // c counties over a 60-day span: c * (60 - 19) samples.
        spec.counties = 20;
        spec.days = 60;
        let universe = generate(&spec).unwrap();
        let dataset = build_samples(&universe, &universe.registry, &[0.33, 0.67, 0.90]).unwrap();
        assert_eq!(dataset.samples.len(), 20 * (60 - 19));
    }

    #[test]
    fn round_trips_through_disk() {
        let spec = base_spec(
            Recipe::MainEffect {
                group: "visitation".into(),
                feature: 0,
            },
            0.2,
        );
        let universe = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store::write_universe(dir.path(), &universe).unwrap();
        let loaded = store::read_universe(dir.path()).unwrap();
        assert_eq!(universe.registry, loaded.registry);
        assert_eq!(universe.constant, loaded.constant);
        assert_eq!(universe.timedep, loaded.timedep);
        assert_eq!(universe.crosscounty, loaded.crosscounty);
        for county in &universe.registry.counties {
            assert_eq!(universe.cases[county], loaded.cases[county]);
            assert_eq!(universe.grid[county], loaded.grid[county]);
        }

        // Windowed datasets from the two universes are identical.
        let a = build_samples(&universe, &universe.registry, &[0.33, 0.67, 0.90]).unwrap();
        let b = build_samples(&loaded, &loaded.registry, &[0.33, 0.67, 0.90]).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.class, y.class);
            assert_eq!(x.groups, y.groups);
        }

        // An unknown format version is rejected.
        let reg_path = dir.path().join("registry.json");
        let raw = std::fs::read_to_string(&reg_path).unwrap();
        std::fs::write(
            &reg_path,
            raw.replace(
                "\"universe_format_version\": 1",
                "\"universe_format_version\": 9",
            ),
        )
        .unwrap();
        assert!(store::read_universe(dir.path()).is_err());
    }
}
