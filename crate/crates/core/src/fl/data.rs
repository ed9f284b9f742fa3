//! Turning accident records into training matrices and splitting them into
//! per-vehicle shards.

use ndarray::Array2;
use rand::Rng;

use super::NUM_CLASSES;
use crate::ingestion::{AccidentRecord, AccidentSchema, DAY_CATEGORIES, HOUR_CATEGORIES};
use crate::{Error, Result};

/// One-hot encodes every categorical field (location, day, hour, light,
/// weather, surface) and the severity label. Returns the feature matrix,
/// the one-hot targets and the raw labels.
pub fn encode_records(
    records: &[AccidentRecord],
    schema: &AccidentSchema,
) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot encode zero records".into()));
    }
    let dim = schema.feature_dim();
    let mut x = Array2::zeros((records.len(), dim));
    let mut g = Array2::zeros((records.len(), NUM_CLASSES));
    let mut labels = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        schema.validate_record(rec)?;
        let mut offset = 0;
        let mark = |x: &mut Array2<f64>, idx: usize, width: usize, offset: &mut usize| {
            x[(i, *offset + idx)] = 1.0;
            *offset += width;
        };
        mark(&mut x, rec.location_id as usize, schema.num_locations as usize, &mut offset);
        mark(&mut x, rec.day as usize - 1, DAY_CATEGORIES as usize, &mut offset);
        mark(&mut x, rec.hour as usize, HOUR_CATEGORIES as usize, &mut offset);
        mark(&mut x, rec.light as usize, schema.light_levels as usize, &mut offset);
        mark(&mut x, rec.weather as usize, schema.weather_levels as usize, &mut offset);
        mark(&mut x, rec.road_surface as usize, schema.surface_levels as usize, &mut offset);
        debug_assert_eq!(offset, dim);
        g[(i, rec.severity as usize)] = 1.0;
        labels.push(rec.severity as usize);
    }
    Ok((x, g, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Records are shuffled before slicing, so every shard sees roughly the
    /// global label mix.
    Iid,
    /// Records are ordered by label before slicing, so shards are
    /// label-homogeneous at the ends and mixed only at slice boundaries.
    LabelSkewed,
}

/// Splits record indices `0..labels.len()` into one shard per share.
/// Shard sizes follow the shares by largest remainder, so they sum to the
/// record count exactly; share ties go to the earlier shard.
pub fn partition_data(
    labels: &[usize],
    shares: &[f64],
    mode: PartitionMode,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("cannot partition zero records".into()));
    }
    if shares.is_empty() {
        return Err(Error::InvalidInput("need at least one shard share".into()));
    }
    let total_share: f64 = shares.iter().sum();
    if shares.iter().any(|s| !s.is_finite() || *s < 0.0) || total_share <= 0.0 {
        return Err(Error::InvalidInput("shares must be non-negative with positive sum".into()));
    }

    let n = labels.len();
    let exact: Vec<f64> = shares.iter().map(|s| s / total_share * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        sizes[order[k % order.len()]] += 1;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    match mode {
        PartitionMode::Iid => {
            for i in (1..n).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
        }
        PartitionMode::LabelSkewed => {
            idx.sort_by_key(|&i| labels[i]);
        }
    }
    let mut shards = Vec::with_capacity(shares.len());
    let mut cursor = 0;
    for size in sizes {
        shards.push(idx[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(shards)
}
