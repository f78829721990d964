//! On-disk universe format.
//!
//! A universe directory holds everything needed to build samples:
//!
//! ```text
//! <dir>/
//!   registry.json           group schema, counties, window, date span
//!   cases.csv               county,date,cumulative_cases
//!   constant/<group>.csv    county,<feature columns>
//!   timedep/<group>.csv     county,date,<feature columns>
//!   crosscounty/<group>.csv date,source_county,dest_county,<feature columns>
//!   grid.csv                county,date,cell_x_km,cell_y_km,intensity
//! ```
//!
//! All CSVs carry headers; dates are ISO-8601. Rows are emitted in registry
//! county order and ascending date order, so regenerating the same universe
//! yields byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::embeddings::{GroupKind, Registry};
use crate::error::{Error, Result};

use super::{CaseSeries, GridCell};

/// Version of the directory layout, stored in registry.json.
pub const UNIVERSE_FORMAT_VERSION: u32 = 1;

/// In-memory universe: registry plus all raw data tables.
#[derive(Clone, Debug)]
pub struct Universe {
    pub registry: Registry,
    pub start_date: NaiveDate,
    pub num_days: usize,
    /// county -> cumulative case series
    pub cases: BTreeMap<String, CaseSeries>,
    /// group -> county -> [n]
    pub constant: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// group -> county -> day-major [num_days * n]
    pub timedep: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// group -> [day][dest][src][k] flattened
    pub crosscounty: BTreeMap<String, Vec<f64>>,
    /// county -> per-day cell lists
    pub grid: BTreeMap<String, Vec<Vec<GridCell>>>,
}

impl Universe {
    pub fn date(&self, day: usize) -> NaiveDate {
        self.start_date + chrono::Days::new(day as u64)
    }

    pub fn day_index(&self, date: NaiveDate) -> Result<usize> {
        let offset = (date - self.start_date).num_days();
        if offset < 0 || offset as usize >= self.num_days {
            return Err(Error::Data(format!(
                "date {date} outside universe span starting {}",
                self.start_date
            )));
        }
        Ok(offset as usize)
    }

    pub fn county_index(&self, county: &str) -> Result<usize> {
        self.registry
            .counties
            .iter()
            .position(|c| c == county)
            .ok_or_else(|| Error::Data(format!("unknown county {county:?}")))
    }

    pub fn constant_values(&self, group: &str, county: &str) -> Result<&[f64]> {
        self.constant
            .get(group)
            .and_then(|m| m.get(county))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("no constant data for {group:?}/{county:?}")))
    }

    pub fn timedep_values(&self, group: &str, county: &str, day: usize) -> Result<&[f64]> {
        let spec = self.registry.group(group)?;
        let n = spec.feature_count();
        let all = self
            .timedep
            .get(group)
            .and_then(|m| m.get(county))
            .ok_or_else(|| Error::Data(format!("no daily data for {group:?}/{county:?}")))?;
        Ok(&all[day * n..(day + 1) * n])
    }

    pub fn crosscounty_values(
        &self,
        group: &str,
        day: usize,
        src: &str,
        dest: &str,
    ) -> Result<&[f64]> {
        let spec = self.registry.group(group)?;
        let n = spec.feature_count();
        let c = self.registry.county_count();
        let si = self.county_index(src)?;
        let di = self.county_index(dest)?;
        let all = self
            .crosscounty
            .get(group)
            .ok_or_else(|| Error::Data(format!("no cross-county data for {group:?}")))?;
        let base = ((day * c + di) * c + si) * n;
        Ok(&all[base..base + n])
    }

    pub fn grid_cells(&self, county: &str, day: usize) -> Result<&[GridCell]> {
        self.grid
            .get(county)
            .and_then(|days| days.get(day))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("no grid for {county:?} day {day}")))
    }
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    universe_format_version: u32,
    start_date: NaiveDate,
    num_days: usize,
    registry: Registry,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn fmt_float(v: f64) -> String {
    // Shortest round-trip representation; exact on re-read.
    format!("{v}")
}

/// Write a universe directory, creating it as needed.
pub fn write_universe(dir: &Path, universe: &Universe) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    fs::create_dir_all(dir.join("constant")).map_err(|e| io_err(dir, e))?;
    fs::create_dir_all(dir.join("timedep")).map_err(|e| io_err(dir, e))?;
    fs::create_dir_all(dir.join("crosscounty")).map_err(|e| io_err(dir, e))?;

    let reg_path = dir.join("registry.json");
    let file = RegistryFile {
        universe_format_version: UNIVERSE_FORMAT_VERSION,
        start_date: universe.start_date,
        num_days: universe.num_days,
        registry: universe.registry.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(&reg_path, json + "\n").map_err(|e| io_err(&reg_path, e))?;

    // cases.csv
    let path = dir.join("cases.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["county", "date", "cumulative_cases"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for county in &universe.registry.counties {
        let series = &universe.cases[county];
        for (d, cum) in series.cumulative.iter().enumerate() {
            w.write_record([
                county.as_str(),
                &universe.date(d).to_string(),
                &cum.to_string(),
            ])
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    // Per-group CSVs.
    for spec in &universe.registry.groups {
        match spec.kind {
            GroupKind::Constant => {
                let path = dir.join("constant").join(format!("{}.csv", spec.name));
                let mut w = csv_writer(&path)?;
                let mut header = vec!["county".to_string()];
                header.extend(spec.feature_names.iter().cloned());
                w.write_record(&header)
                    .map_err(|e| Error::csv(path.display().to_string(), e))?;
                for county in &universe.registry.counties {
                    let values = universe.constant_values(&spec.name, county)?;
                    let mut rec = vec![county.clone()];
                    rec.extend(values.iter().map(|v| fmt_float(*v)));
                    w.write_record(&rec)
                        .map_err(|e| Error::csv(path.display().to_string(), e))?;
                }
                w.flush().map_err(|e| io_err(&path, e))?;
            }
            GroupKind::TimeDependent => {
                let path = dir.join("timedep").join(format!("{}.csv", spec.name));
                let mut w = csv_writer(&path)?;
                let mut header = vec!["county".to_string(), "date".to_string()];
                header.extend(spec.feature_names.iter().cloned());
                w.write_record(&header)
                    .map_err(|e| Error::csv(path.display().to_string(), e))?;
                for county in &universe.registry.counties {
                    for d in 0..universe.num_days {
                        let values = universe.timedep_values(&spec.name, county, d)?;
                        let mut rec = vec![county.clone(), universe.date(d).to_string()];
                        rec.extend(values.iter().map(|v| fmt_float(*v)));
                        w.write_record(&rec)
                            .map_err(|e| Error::csv(path.display().to_string(), e))?;
                    }
                }
                w.flush().map_err(|e| io_err(&path, e))?;
            }
            GroupKind::CrossCounty => {
                let path = dir.join("crosscounty").join(format!("{}.csv", spec.name));
                let mut w = csv_writer(&path)?;
                let mut header = vec![
                    "date".to_string(),
                    "source_county".to_string(),
                    "dest_county".to_string(),
                ];
                header.extend(spec.feature_names.iter().cloned());
                w.write_record(&header)
                    .map_err(|e| Error::csv(path.display().to_string(), e))?;
                for d in 0..universe.num_days {
                    let date = universe.date(d).to_string();
                    for src in &universe.registry.counties {
                        for dest in &universe.registry.counties {
                            let values =
                                universe.crosscounty_values(&spec.name, d, src, dest)?;
                            let mut rec = vec![date.clone(), src.clone(), dest.clone()];
                            rec.extend(values.iter().map(|v| fmt_float(*v)));
                            w.write_record(&rec)
                                .map_err(|e| Error::csv(path.display().to_string(), e))?;
                        }
                    }
                }
                w.flush().map_err(|e| io_err(&path, e))?;
            }
        }
    }

    // grid.csv
    let path = dir.join("grid.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["county", "date", "cell_x_km", "cell_y_km", "intensity"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for county in &universe.registry.counties {
        if let Some(days) = universe.grid.get(county) {
            for (d, cells) in days.iter().enumerate() {
                let date = universe.date(d).to_string();
                for cell in cells {
                    w.write_record([
                        county.as_str(),
                        &date,
                        &fmt_float(cell.x_km),
                        &fmt_float(cell.y_km),
                        &fmt_float(cell.intensity),
                    ])
                    .map_err(|e| Error::csv(path.display().to_string(), e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    Ok(())
}

fn parse_f64(field: &str, path: &Path) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| Error::Data(format!("{}: bad float {field:?}: {e}", path.display())))
}

fn parse_date(field: &str, path: &Path) -> Result<NaiveDate> {
    field
        .parse::<NaiveDate>()
        .map_err(|e| Error::Data(format!("{}: bad date {field:?}: {e}", path.display())))
}

/// Read a universe directory written by [`write_universe`].
pub fn read_universe(dir: &Path) -> Result<Universe> {
    let reg_path = dir.join("registry.json");
    let json = fs::read_to_string(&reg_path).map_err(|e| io_err(&reg_path, e))?;
    let file: RegistryFile = serde_json::from_str(&json)?;
    if file.universe_format_version != UNIVERSE_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported universe format version {}",
            file.universe_format_version
        )));
    }
    let registry = file.registry;
    let start_date = file.start_date;
    let num_days = file.num_days;
    let c = registry.county_count();

    let county_index = |name: &str, path: &PathBuf| -> Result<usize> {
        registry
            .counties
            .iter()
            .position(|x| x == name)
            .ok_or_else(|| Error::Data(format!("{}: unknown county {name:?}", path.display())))
    };

    // cases.csv
    let path = dir.join("cases.csv");
    let mut cases: BTreeMap<String, CaseSeries> = BTreeMap::new();
    {
        let mut counts: BTreeMap<String, Vec<u64>> =
            registry.counties.iter().map(|n| (n.clone(), vec![0; num_days])).collect();
        let mut r = csv_reader(&path)?;
        for record in r.records() {
            let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
            let county = record[0].to_string();
            let date = parse_date(&record[1], &path)?;
            let day = (date - start_date).num_days();
            if day < 0 || day as usize >= num_days {
                return Err(Error::Data(format!(
                    "{}: date {date} outside span",
                    path.display()
                )));
            }
            let cum = record[2]
                .parse::<u64>()
                .map_err(|e| Error::Data(format!("{}: bad count: {e}", path.display())))?;
            counts
                .get_mut(&county)
                .ok_or_else(|| Error::Data(format!("unknown county {county:?} in cases.csv")))?
                [day as usize] = cum;
        }
        for (county, cumulative) in counts {
            cases.insert(
                county.clone(),
                CaseSeries {
                    county,
                    start: start_date,
                    cumulative,
                },
            );
        }
    }

    let mut constant = BTreeMap::new();
    let mut timedep = BTreeMap::new();
    let mut crosscounty = BTreeMap::new();
    for spec in &registry.groups {
        let n = spec.feature_count();
        match spec.kind {
            GroupKind::Constant => {
                let path = dir.join("constant").join(format!("{}.csv", spec.name));
                let mut per_county: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                let mut r = csv_reader(&path)?;
                for record in r.records() {
                    let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
                    if record.len() != n + 1 {
                        return Err(Error::Data(format!(
                            "{}: expected {} columns, got {}",
                            path.display(),
                            n + 1,
                            record.len()
                        )));
                    }
                    let county = record[0].to_string();
                    county_index(&county, &path)?;
                    let values: Vec<f64> = (1..record.len())
                        .map(|i| parse_f64(&record[i], &path))
                        .collect::<Result<_>>()?;
                    per_county.insert(county, values);
                }
                constant.insert(spec.name.clone(), per_county);
            }
            GroupKind::TimeDependent => {
                let path = dir.join("timedep").join(format!("{}.csv", spec.name));
                let mut per_county: BTreeMap<String, Vec<f64>> = registry
                    .counties
                    .iter()
                    .map(|name| (name.clone(), vec![0.0; num_days * n]))
                    .collect();
                let mut r = csv_reader(&path)?;
                for record in r.records() {
                    let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
                    if record.len() != n + 2 {
                        return Err(Error::Data(format!(
                            "{}: expected {} columns, got {}",
                            path.display(),
                            n + 2,
                            record.len()
                        )));
                    }
                    let county = record[0].to_string();
                    county_index(&county, &path)?;
                    let date = parse_date(&record[1], &path)?;
                    let day = (date - start_date).num_days() as usize;
                    let row = per_county.get_mut(&county).unwrap();
                    for k in 0..n {
                        row[day * n + k] = parse_f64(&record[k + 2], &path)?;
                    }
                }
                timedep.insert(spec.name.clone(), per_county);
            }
            GroupKind::CrossCounty => {
                let path = dir.join("crosscounty").join(format!("{}.csv", spec.name));
                let mut flat = vec![0.0; num_days * c * c * n];
                let mut r = csv_reader(&path)?;
                for record in r.records() {
                    let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
                    if record.len() != n + 3 {
                        return Err(Error::Data(format!(
                            "{}: expected {} columns, got {}",
                            path.display(),
                            n + 3,
                            record.len()
                        )));
                    }
                    let date = parse_date(&record[0], &path)?;
                    let day = (date - start_date).num_days() as usize;
                    let si = county_index(&record[1], &path)?;
                    let di = county_index(&record[2], &path)?;
                    let base = ((day * c + di) * c + si) * n;
                    for k in 0..n {
                        flat[base + k] = parse_f64(&record[k + 3], &path)?;
                    }
                }
                crosscounty.insert(spec.name.clone(), flat);
            }
        }
    }

    // grid.csv (optional for sample building; kept for recomputation).
    let path = dir.join("grid.csv");
    let mut grid: BTreeMap<String, Vec<Vec<GridCell>>> = registry
        .counties
        .iter()
        .map(|name| (name.clone(), vec![Vec::new(); num_days]))
        .collect();
    if path.exists() {
        let mut r = csv_reader(&path)?;
        for record in r.records() {
            let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
            let county = record[0].to_string();
            county_index(&county, &path)?;
            let date = parse_date(&record[1], &path)?;
            let day = (date - start_date).num_days() as usize;
            let cell = GridCell {
                x_km: parse_f64(&record[2], &path)?,
                y_km: parse_f64(&record[3], &path)?,
                intensity: parse_f64(&record[4], &path)?,
            };
            grid.get_mut(&county).unwrap()[day].push(cell);
        }
    }

    Ok(Universe {
        registry,
        start_date,
        num_days,
        cases,
        constant,
        timedep,
        crosscounty,
        grid,
    })
}
