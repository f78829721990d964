//! Feature engineering, label construction, and dataset windowing.
//!
//! Labels are weekly rises in cumulative confirmed cases, predicted across
//! a 7-day projection interval: the input window for a label date `d` is
//! the `t` days ending `PROJECTION_DAYS` before `d`, so nothing measured
//! during the label interval leaks into the inputs.

pub mod store;
pub mod synthetic;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::embeddings::{GroupKind, Registry};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::ordinal::{assign_class, derive_boundaries, ClassBoundaries};

use store::Universe;

/// Days between the last input day and the label date.
pub const PROJECTION_DAYS: usize = 7;

/// Serial interval used by the reproduction-number estimate, in days.
pub const SERIAL_INTERVAL_DAYS: f64 = 5.1;

/// Days of past data the reproduction-number estimate is computed over.
pub const R0_LOOKBACK_DAYS: usize = 10;

// ---------------------------------------------------------------------------
// Case series
// ---------------------------------------------------------------------------

/// Daily cumulative confirmed cases for one county, contiguous from `start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSeries {
    pub county: String,
    pub start: NaiveDate,
    pub cumulative: Vec<u64>,
}

impl CaseSeries {
    pub fn day_index(&self, date: NaiveDate) -> Result<usize> {
        let offset = (date - self.start).num_days();
        if offset < 0 || offset as usize >= self.cumulative.len() {
            return Err(Error::Data(format!(
                "date {date} outside case series for {} ({} .. {} days)",
                self.county,
                self.start,
                self.cumulative.len()
            )));
        }
        Ok(offset as usize)
    }

    pub fn cumulative_on(&self, date: NaiveDate) -> Result<u64> {
        Ok(self.cumulative[self.day_index(date)?])
    }
}

/// Rise in cumulative cases over the week ending on `date`, floored at zero
/// (reporting corrections can make raw differences negative).
pub fn weekly_rise(series: &CaseSeries, date: NaiveDate) -> Result<u64> {
    let (rise, _) = weekly_rise_flagged(series, date)?;
    Ok(rise)
}

/// Weekly rise plus whether flooring was applied.
pub fn weekly_rise_flagged(series: &CaseSeries, date: NaiveDate) -> Result<(u64, bool)> {
    let end = series.cumulative_on(date)? as i64;
    let start = series.cumulative_on(date - chrono::Days::new(7))? as i64;
    let raw = end - start;
    Ok((raw.max(0) as u64, raw < 0))
}

/// Exponential-growth reproduction estimate from cumulative counts.
///
/// Undefined when either endpoint has no recorded cases; callers substitute
/// a zero plus a validity flag so the model can tell "no data" apart from
/// "no growth".
pub fn reproduction_number(
    series: &CaseSeries,
    date: NaiveDate,
    serial_interval: f64,
    lookback: usize,
) -> Result<f64> {
    let now = series.cumulative_on(date)?;
    let past = series.cumulative_on(date - chrono::Days::new(lookback as u64))?;
    if now < 1 || past < 1 {
        return Err(Error::UndefinedMetric(format!(
            "reproduction number needs cases at both endpoints ({} on {date})",
            series.county
        )));
    }
    let growth = (now as f64).ln() - (past as f64).ln();
    Ok((growth * serial_interval / lookback as f64).exp())
}

// ---------------------------------------------------------------------------
// Activity grid
// ---------------------------------------------------------------------------

/// One activity cell: centroid coordinates in km and a daily-average
/// intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x_km: f64,
    pub y_km: f64,
    pub intensity: f64,
}

/// Intensity-weighted mean pairwise distance between activity cells.
///
/// The denominator uses the closed form `((Σs)² − Σs²)/2`; the numerator is
/// the direct sum over unordered pairs.
pub fn venables_distance(cells: &[GridCell]) -> Result<f64> {
    if cells.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "venables distance needs at least 2 cells, got {}",
            cells.len()
        )));
    }
    let total: f64 = cells.iter().map(|c| c.intensity).sum();
    let sum_sq: f64 = cells.iter().map(|c| c.intensity * c.intensity).sum();
    let denom = (total * total - sum_sq) / 2.0;
    if denom <= 0.0 {
        return Err(Error::UndefinedMetric(
            "venables distance undefined for all-zero intensities".into(),
        ));
    }
    let mut numer = 0.0;
    for i in 0..cells.len() {
        for j in (i + 1)..cells.len() {
            let dx = cells[i].x_km - cells[j].x_km;
            let dy = cells[i].y_km - cells[j].y_km;
            numer += cells[i].intensity * cells[j].intensity * (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(numer / denom)
}

// ---------------------------------------------------------------------------
// Samples and datasets
// ---------------------------------------------------------------------------

/// One training example: a county, a label date, the windowed group tensors,
/// and the realized weekly rise with its class.
#[derive(Clone, Debug)]
pub struct Sample {
    pub county: String,
    pub label_date: NaiveDate,
    pub rise: u64,
    pub class: usize,
    /// Group tensors in registry order: `[t,n]`, `[t,c,n]` or `[n]`.
    pub groups: Vec<Tensor>,
}

/// All samples of a universe plus the derived class boundaries.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub registry: Registry,
    pub samples: Vec<Sample>,
    pub boundaries: ClassBoundaries,
    pub percentiles: Vec<f64>,
    /// Label dates per county dropped for missing history.
    pub dropped_label_dates: usize,
    /// Rises floored to zero because cumulative counts decreased.
    pub floored_rises: usize,
}

impl Dataset {
    /// Sorted unique label dates.
    pub fn label_dates(&self) -> Vec<NaiveDate> {
        let mut dates: Vec<NaiveDate> = self.samples.iter().map(|s| s.label_date).collect();
        dates.sort_unstable();
        dates.dedup();
        dates
    }
}

/// Build one sample per (county, label date) with enough history.
///
/// The input window covers `registry.window` days ending `PROJECTION_DAYS`
/// before the label date. Class boundaries come from the given percentiles
/// of the pooled rise distribution over all counties and label dates.
pub fn build_samples(
    universe: &Universe,
    registry: &Registry,
    percentiles: &[f64],
) -> Result<Dataset> {
    let window = registry.window;
    let earliest = window + PROJECTION_DAYS - 1;
    if universe.num_days <= earliest {
        return Err(Error::Data(format!(
            "universe spans {} days; need more than {} for one label date",
            universe.num_days, earliest
        )));
    }

    let mut raw: Vec<(String, NaiveDate, u64)> = Vec::new();
    let mut dropped = 0usize;
    let mut floored = 0usize;
    for county in &registry.counties {
        let series = universe
            .cases
            .get(county)
            .ok_or_else(|| Error::Data(format!("no case series for county {county:?}")))?;
        for d in 0..universe.num_days {
            if d < earliest {
                dropped += 1;
                continue;
            }
            let date = universe.date(d);
            let (rise, was_floored) = weekly_rise_flagged(series, date)?;
            if was_floored {
                floored += 1;
            }
            raw.push((county.clone(), date, rise));
        }
    }

    let rises: Vec<u64> = raw.iter().map(|(_, _, r)| *r).collect();
    let boundaries = derive_boundaries(&rises, percentiles)?;

    let mut samples = Vec::with_capacity(raw.len());
    for (county, date, rise) in raw {
        let d = universe.day_index(date)?;
        let window_end = d - PROJECTION_DAYS;
        let window_start = window_end + 1 - window;
        // No feature measured during the label interval may enter the window.
        assert!(
            universe.date(window_end) + chrono::Days::new(PROJECTION_DAYS as u64) == date,
            "window end must sit a projection interval before the label date"
        );
        let groups = window_tensors(universe, registry, &county, window_start, window_end)?;
        let class = assign_class(rise, &boundaries);
        samples.push(Sample {
            county,
            label_date: date,
            rise,
            class,
            groups,
        });
    }

    Ok(Dataset {
        registry: registry.clone(),
        samples,
        boundaries,
        percentiles: percentiles.to_vec(),
        dropped_label_dates: dropped,
        floored_rises: floored,
    })
}

impl Dataset {
    /// Re-label every sample against externally supplied boundaries (used
    /// when scoring with a persisted model whose boundaries are fixed).
    pub fn reassign_classes(&mut self, boundaries: &ClassBoundaries) {
        for s in &mut self.samples {
            s.class = assign_class(s.rise, boundaries);
        }
        self.boundaries = boundaries.clone();
    }
}

/// Build unlabeled samples for inference at the given label dates.
///
/// Only the input window must be covered, so forecasts extend up to the
/// projection interval past the last universe day. Returns the samples plus
/// the number of requested dates skipped for missing history.
pub fn build_inference_samples(
    universe: &Universe,
    registry: &Registry,
    counties: &[String],
    label_dates: &[NaiveDate],
) -> Result<(Vec<Sample>, usize)> {
    let window = registry.window;
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for county in counties {
        if !registry.counties.iter().any(|c| c == county) {
            return Err(Error::Data(format!("unknown county {county:?}")));
        }
        for &date in label_dates {
            let offset = (date - universe.start_date).num_days();
            let window_end = offset - PROJECTION_DAYS as i64;
            let window_start = window_end - (window as i64 - 1);
            if window_start < 0 || window_end >= universe.num_days as i64 {
                skipped += 1;
                continue;
            }
            let groups = window_tensors(
                universe,
                registry,
                county,
                window_start as usize,
                window_end as usize,
            )?;
            samples.push(Sample {
                county: county.clone(),
                label_date: date,
                rise: 0,
                class: 0,
                groups,
            });
        }
    }
    Ok((samples, skipped))
}

fn window_tensors(
    universe: &Universe,
    registry: &Registry,
    county: &str,
    window_start: usize,
    window_end: usize,
) -> Result<Vec<Tensor>> {
    let t = registry.window;
    let c = registry.county_count();
    let mut out = Vec::with_capacity(registry.groups.len());
    for spec in &registry.groups {
        let tensor = match spec.kind {
            GroupKind::Constant => {
                let values = universe.constant_values(&spec.name, county)?;
                Tensor::new(vec![spec.feature_count()], values.to_vec())?
            }
            GroupKind::TimeDependent => {
                let n = spec.feature_count();
                let mut data = Vec::with_capacity(t * n);
                for d in window_start..=window_end {
                    data.extend_from_slice(universe.timedep_values(&spec.name, county, d)?);
                }
                Tensor::new(vec![t, n], data)?
            }
            GroupKind::CrossCounty => {
                let n = spec.feature_count();
                let mut data = Vec::with_capacity(t * c * n);
                for d in window_start..=window_end {
                    for src in &registry.counties {
                        data.extend_from_slice(
                            universe.crosscounty_values(&spec.name, d, src, county)?,
                        );
                    }
                }
                Tensor::new(vec![t, c, n], data)?
            }
        };
        out.push(tensor);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-feature standardization statistics, fitted on the training split and
/// applied everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub per_group: BTreeMap<String, GroupStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Pool each feature over samples and all leading axes (time, county).
    pub fn fit(registry: &Registry, samples: &[&Sample]) -> Result<NormStats> {
        if samples.is_empty() {
            return Err(Error::Data("cannot fit normalization on no samples".into()));
        }
        let mut per_group = BTreeMap::new();
        for (gi, spec) in registry.groups.iter().enumerate() {
            let n = spec.feature_count();
            let mut sum = vec![0.0; n];
            let mut sum_sq = vec![0.0; n];
            let mut count = 0usize;
            for s in samples {
                let data = s.groups[gi].data();
                for row in data.chunks_exact(n) {
                    for (j, &v) in row.iter().enumerate() {
                        sum[j] += v;
                        sum_sq[j] += v * v;
                    }
                    count += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let std: Vec<f64> = sum_sq
                .iter()
                .zip(&mean)
                .map(|(sq, m)| ((sq / count as f64 - m * m).max(0.0)).sqrt().max(STD_FLOOR))
                .collect();
            per_group.insert(spec.name.clone(), GroupStats { mean, std });
        }
        Ok(NormStats { per_group })
    }

    /// Standardize one group tensor's trailing feature axis in place.
    pub fn apply(&self, group: &str, tensor: &mut Tensor) -> Result<()> {
        let stats = self
            .per_group
            .get(group)
            .ok_or_else(|| Error::Data(format!("no normalization stats for group {group:?}")))?;
        let n = stats.mean.len();
        for row in tensor.data_mut().chunks_exact_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - stats.mean[j]) / stats.std[j];
            }
        }
        Ok(())
    }
}
