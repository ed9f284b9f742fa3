//! File ingestion and synthetic data generation.
//!
//! Two input schemas are supported, both plain CSV with a header row:
//!
//! * traffic volume: `area_id,year,day_of_year,aadf_count` — one row per
//!   area and day with the annual-average daily flow measured that day;
//! * accidents: `location_id,day,hour,light,weather,road_surface,severity` —
//!   one categorical record per accident, `severity` in `{0,1,2}`.
//!
//! The synthetic generator produces both files from a seed so every
//! experiment can run without external data. Generated volumes are bimodal
//! (busy vs. quiet areas) and generated severities follow a hidden additive
//! rule over the categorical features, so the learning task is nontrivial
//! but solvable.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DAYS_PER_YEAR: u16 = 365;
pub const DAY_CATEGORIES: u8 = 7;
pub const HOUR_CATEGORIES: u8 = 24;
pub const SEVERITY_CLASSES: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub area_id: u32,
    pub year: u16,
    pub day_of_year: u16,
    pub aadf_count: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccidentRecord {
    pub location_id: u32,
    /// Day of week, 1..=7.
    pub day: u8,
    /// Hour of day, 0..=23.
    pub hour: u8,
    pub light: u8,
    pub weather: u8,
    pub road_surface: u8,
    /// Class label, 0..=2 (slight, serious, fatal).
    pub severity: u8,
}

/// Cardinalities of the categorical accident fields. Records are validated
/// against these bounds and feature vectors are one-hot encoded from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccidentSchema {
    pub num_locations: u32,
    pub light_levels: u8,
    pub weather_levels: u8,
    pub surface_levels: u8,
}

impl Default for AccidentSchema {
    fn default() -> Self {
        AccidentSchema { num_locations: 12, light_levels: 3, weather_levels: 4, surface_levels: 3 }
    }
}

impl AccidentSchema {
    /// Width of the one-hot feature encoding: location + day of week +
    /// hour of day + light + weather + road surface.
    pub fn feature_dim(&self) -> usize {
        self.num_locations as usize
            + DAY_CATEGORIES as usize
            + HOUR_CATEGORIES as usize
            + self.light_levels as usize
            + self.weather_levels as usize
            + self.surface_levels as usize
    }

    pub fn validate_record(&self, rec: &AccidentRecord) -> Result<()> {
        if rec.location_id >= self.num_locations {
            return Err(Error::InvalidInput(format!(
                "location_id {} out of range (schema has {} locations)",
                rec.location_id, self.num_locations
            )));
        }
        if rec.day < 1 || rec.day > DAY_CATEGORIES {
            return Err(Error::InvalidInput(format!("day {} outside 1..=7", rec.day)));
        }
        if rec.hour >= HOUR_CATEGORIES {
            return Err(Error::InvalidInput(format!("hour {} outside 0..=23", rec.hour)));
        }
        if rec.light >= self.light_levels {
            return Err(Error::InvalidInput(format!("light code {} out of range", rec.light)));
        }
        if rec.weather >= self.weather_levels {
            return Err(Error::InvalidInput(format!("weather code {} out of range", rec.weather)));
        }
        if rec.road_surface >= self.surface_levels {
            return Err(Error::InvalidInput(format!(
                "road_surface code {} out of range",
                rec.road_surface
            )));
        }
        if rec.severity >= SEVERITY_CLASSES {
            return Err(Error::InvalidInput(format!("severity {} outside 0..=2", rec.severity)));
        }
        Ok(())
    }
}

pub fn load_aadf(path: impl AsRef<Path>) -> Result<Vec<TrafficRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(map_csv_open(path))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for row in reader.deserialize() {
        let rec: TrafficRecord = row?;
        if !rec.aadf_count.is_finite() || rec.aadf_count < 0.0 {
            return Err(Error::InvalidInput(format!(
                "aadf_count {} for area {} day {} must be a non-negative number",
                rec.aadf_count, rec.area_id, rec.day_of_year
            )));
        }
        if rec.day_of_year < 1 || rec.day_of_year > DAYS_PER_YEAR {
            return Err(Error::InvalidInput(format!(
                "day_of_year {} outside 1..=365",
                rec.day_of_year
            )));
        }
        if !seen.insert((rec.area_id, rec.year, rec.day_of_year)) {
            return Err(Error::InvalidInput(format!(
                "duplicate traffic entry for area {} year {} day {}",
                rec.area_id, rec.year, rec.day_of_year
            )));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("{} contains no traffic rows", path.display())));
    }
    Ok(records)
}

pub fn load_accidents(path: impl AsRef<Path>, schema: &AccidentSchema) -> Result<Vec<AccidentRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(map_csv_open(path))?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        let rec: AccidentRecord = row?;
        schema.validate_record(&rec)?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("{} contains no accident rows", path.display())));
    }
    Ok(records)
}

pub fn write_aadf(path: impl AsRef<Path>, records: &[TrafficRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(map_csv_open(path))?;
    for rec in records {
        writer.serialize(rec)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_accidents(path: impl AsRef<Path>, records: &[AccidentRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(map_csv_open(path))?;
    for rec in records {
        writer.serialize(rec)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn map_csv_open(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => Error::InvalidInput(format!("unreadable csv file {}", path.display())),
            }
        } else {
            Error::Csv(e)
        }
    }
}

/// Knobs for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub num_areas: u32,
    /// Fraction of areas generated as busy; clamped so both groups are
    /// non-empty.
    pub significant_fraction: f64,
    pub num_samples: usize,
    /// Probability that a generated severity label is replaced by a uniform
    /// random class.
    pub label_noise: f64,
    pub year: u16,
    pub schema: AccidentSchema,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_areas: 20,
            significant_fraction: 0.4,
            num_samples: 6_000,
            label_noise: 0.1,
            year: 2024,
            schema: AccidentSchema::default(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_areas < 2 {
            return Err(Error::Config("num_areas must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.significant_fraction) {
            return Err(Error::Config("significant_fraction must lie in [0, 1]".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1)".into()));
        }
        if self.schema.num_locations == 0 {
            return Err(Error::Config("schema needs at least one location".into()));
        }
        Ok(())
    }
}

/// Deterministically generates one year of traffic rows per area plus an
/// accident corpus. The same `(params, seed)` pair always produces the same
/// records.
pub fn gen_synth(params: &SynthParams, seed: u64) -> Result<(Vec<TrafficRecord>, Vec<AccidentRecord>)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let areas = params.num_areas as usize;
    let busy = ((areas as f64 * params.significant_fraction).round() as usize).clamp(1, areas - 1);
    let mut ids: Vec<u32> = (0..params.num_areas).collect();
    ids.shuffle(&mut rng);
    let busy_set: BTreeSet<u32> = ids[..busy].iter().copied().collect();

    let mut traffic = Vec::with_capacity(areas * DAYS_PER_YEAR as usize);
    for area_id in 0..params.num_areas {
        let mean: f64 = if busy_set.contains(&area_id) {
            rng.random_range(700.0..1300.0)
        } else {
            rng.random_range(60.0..320.0)
        };
        for day in 1..=DAYS_PER_YEAR {
            let jitter = 1.0 + 0.08 * rng.random_range(-1.0..1.0);
            traffic.push(TrafficRecord {
                area_id,
                year: params.year,
                day_of_year: day,
                aadf_count: (mean * jitter).max(0.0),
            });
        }
    }

    let schema = &params.schema;
    let loc_w: Vec<f64> =
        (0..schema.num_locations).map(|_| rng.random_range(-1.0..1.0)).collect();
    let hour_w: Vec<f64> = (0..HOUR_CATEGORIES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let day_w: Vec<f64> = (0..DAY_CATEGORIES).map(|_| rng.random_range(-0.2..0.2)).collect();
    let light_w: Vec<f64> = (0..schema.light_levels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weather_w: Vec<f64> =
        (0..schema.weather_levels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let surface_w: Vec<f64> =
        (0..schema.surface_levels).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut draws = Vec::with_capacity(params.num_samples);
    let mut scores = Vec::with_capacity(params.num_samples);
    for _ in 0..params.num_samples {
        let rec = AccidentRecord {
            location_id: rng.random_range(0..schema.num_locations),
            day: rng.random_range(1..=DAY_CATEGORIES),
            hour: rng.random_range(0..HOUR_CATEGORIES),
            light: rng.random_range(0..schema.light_levels),
            weather: rng.random_range(0..schema.weather_levels),
            road_surface: rng.random_range(0..schema.surface_levels),
            severity: 0,
        };
        let score = loc_w[rec.location_id as usize]
            + hour_w[rec.hour as usize]
            + day_w[(rec.day - 1) as usize]
            + light_w[rec.light as usize]
            + weather_w[rec.weather as usize]
            + surface_w[rec.road_surface as usize]
            + rng.random_range(-0.3..0.3);
        draws.push(rec);
        scores.push(score);
    }

    // Severity thresholds at the empirical tertiles keep the classes
    // roughly balanced regardless of the sampled weights.
    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let t1 = sorted[sorted.len() / 3];
    let t2 = sorted[sorted.len() * 2 / 3];

    let mut accidents = Vec::with_capacity(params.num_samples);
    for (mut rec, score) in draws.into_iter().zip(scores) {
        rec.severity = if score < t1 {
            0
        } else if score < t2 {
            1
        } else {
            2
        };
        if params.label_noise > 0.0 && rng.random_range(0.0..1.0) < params.label_noise {
            rec.severity = rng.random_range(0..SEVERITY_CLASSES);
        }
        accidents.push(rec);
    }

    Ok((traffic, accidents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_round_trips_through_csv() {
        let params = SynthParams { num_samples: 200, ..SynthParams::default() };
        let (traffic, accidents) = gen_synth(&params, 7).unwrap();
        assert_eq!(traffic.len(), 20 * 365);
        assert_eq!(accidents.len(), 200);

        let dir = tempfile::tempdir().unwrap();
        let aadf = dir.path().join("aadf.csv");
        let acc = dir.path().join("accidents.csv");
        write_aadf(&aadf, &traffic).unwrap();
        write_accidents(&acc, &accidents).unwrap();
        assert_eq!(load_aadf(&aadf).unwrap(), traffic);
        assert_eq!(load_accidents(&acc, &params.schema).unwrap(), accidents);
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let params = SynthParams { num_samples: 64, ..SynthParams::default() };
        let a = gen_synth(&params, 3).unwrap();
        let b = gen_synth(&params, 3).unwrap();
        let c = gen_synth(&params, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn rejects_negative_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aadf.csv");
        std::fs::write(&path, "area_id,year,day_of_year,aadf_count\n1,2024,1,-5.0\n").unwrap();
        let err = load_aadf(&path).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "{err}");
    }

    #[test]
    fn rejects_duplicate_days() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aadf.csv");
        std::fs::write(
            &path,
            "area_id,year,day_of_year,aadf_count\n1,2024,1,5.0\n1,2024,1,6.0\n",
        )
        .unwrap();
        let err = load_aadf(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn rejects_empty_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aadf.csv");
        std::fs::write(&path, "area_id,year,day_of_year,aadf_count\n").unwrap();
        assert!(matches!(load_aadf(&path), Err(Error::InvalidInput(_))));
        assert!(matches!(load_aadf(dir.path().join("absent.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_out_of_range_accident_codes() {
        let schema = AccidentSchema::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("accidents.csv");
        std::fs::write(
            &path,
            "location_id,day,hour,light,weather,road_surface,severity\n0,2,3,0,0,0,7\n",
        )
        .unwrap();
        let err = load_accidents(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("severity"), "{err}");
    }
}
