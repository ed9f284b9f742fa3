//! Per-round metric records and their file emitters.
//!
//! CSV schema (one row per round, header always written):
//! `round,selected_sv_ids,zeta_values,vsp_profit_per_type,sv_profits,
//! social_welfare_per_type,global_loss,accuracy,omega,net_vsp_profit,
//! net_social_welfare,contract_iterations`. List-valued fields are
//! semicolon-joined inside their cell. Floats print in Rust's shortest
//! round-trip form, so reading a file back reproduces the values exactly.
//! The JSONL format writes the same record as one JSON object per line.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::contracts::TraceRow;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub selected_sv_ids: Vec<u32>,
    /// Information significance of each selected vehicle, aligned with
    /// `selected_sv_ids`.
    pub zeta_values: Vec<f64>,
    /// Provider profit per type row at unit model value.
    pub vsp_profit_per_type: Vec<f64>,
    /// Expected contract profit per selected vehicle.
    pub sv_profits: Vec<f64>,
    /// Social welfare per type row at unit model value.
    pub social_welfare_per_type: Vec<f64>,
    pub global_loss: f64,
    pub accuracy: f64,
    /// Freshness-discounted model value this round.
    pub omega: f64,
    /// Provider profit at the true type, discounted by `omega`.
    pub net_vsp_profit: f64,
    /// Social welfare at the true type, discounted by `omega`.
    pub net_social_welfare: f64,
    /// Sweeps the contract iteration used this round.
    pub contract_iterations: usize,
}

impl RoundMetrics {
    /// Everything finite, accuracy a probability, aligned list lengths.
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.global_loss,
            self.accuracy,
            self.omega,
            self.net_vsp_profit,
            self.net_social_welfare,
        ];
        let lists = [
            &self.zeta_values,
            &self.vsp_profit_per_type,
            &self.sv_profits,
            &self.social_welfare_per_type,
        ];
        if scalars.iter().any(|v| !v.is_finite())
            || lists.iter().any(|l| l.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric(format!("round {} metrics contain non-finite values", self.round)));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Numeric(format!(
                "round {} accuracy {} outside [0, 1]",
                self.round, self.accuracy
            )));
        }
        if self.selected_sv_ids.len() != self.zeta_values.len()
            || self.selected_sv_ids.len() != self.sv_profits.len()
        {
            return Err(Error::Numeric(format!(
                "round {} per-vehicle lists have mismatched lengths",
                self.round
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    JsonLines,
}

impl FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "jsonl" => Ok(MetricsFormat::JsonLines),
            other => Err(Error::Config(format!("unknown metrics format {other:?} (csv|jsonl)"))),
        }
    }
}

const CSV_HEADER: &str = "round,selected_sv_ids,zeta_values,vsp_profit_per_type,sv_profits,\
social_welfare_per_type,global_loss,accuracy,omega,net_vsp_profit,net_social_welfare,\
contract_iterations";

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        let _ = write!(out, "{v}");
    }
    out
}

fn split_parse<T: FromStr>(cell: &str, what: &str) -> Result<Vec<T>> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(';')
        .map(|tok| {
            tok.parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {tok:?} in metrics file")))
        })
        .collect()
}

/// Writes one row or JSON object per round. An empty slice still produces
/// the CSV header so the schema is visible in the output.
pub fn emit_metrics(metrics: &[RoundMetrics], path: &Path, format: MetricsFormat) -> Result<()> {
    let mut out = String::new();
    match format {
        MetricsFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for m in metrics {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    m.round,
                    join(&m.selected_sv_ids),
                    join(&m.zeta_values),
                    join(&m.vsp_profit_per_type),
                    join(&m.sv_profits),
                    join(&m.social_welfare_per_type),
                    m.global_loss,
                    m.accuracy,
                    m.omega,
                    m.net_vsp_profit,
                    m.net_social_welfare,
                    m.contract_iterations
                );
            }
        }
        MetricsFormat::JsonLines => {
            for m in metrics {
                let line = serde_json::to_string(m)
                    .map_err(|e| Error::Numeric(format!("metrics serialization failed: {e}")))?;
                out.push_str(&line);
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads back a file written by [`emit_metrics`].
pub fn read_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<RoundMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        MetricsFormat::Csv => {
            let mut lines = text.lines();
            match lines.next() {
                Some(h) if h == CSV_HEADER => {}
                _ => return Err(Error::Config(format!("{} is not a metrics CSV", path.display()))),
            }
            lines.map(parse_csv_row).collect()
        }
        MetricsFormat::JsonLines => text
            .lines()
            .map(|line| {
                serde_json::from_str(line)
                    .map_err(|e| Error::Config(format!("bad metrics line: {e}")))
            })
            .collect(),
    }
}

fn parse_csv_row(line: &str) -> Result<RoundMetrics> {
    let cells: Vec<&str> = line.split(',').collect();
    if cells.len() != 12 {
        return Err(Error::Config(format!(
            "metrics row has {} cells, expected 12",
            cells.len()
        )));
    }
    let scalar = |cell: &str, what: &str| -> Result<f64> {
        cell.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad {what} value {cell:?} in metrics file")))
    };
    Ok(RoundMetrics {
        round: cells[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad round value {:?}", cells[0])))?,
        selected_sv_ids: split_parse(cells[1], "selected_sv_ids")?,
        zeta_values: split_parse(cells[2], "zeta_values")?,
        vsp_profit_per_type: split_parse(cells[3], "vsp_profit_per_type")?,
        sv_profits: split_parse(cells[4], "sv_profits")?,
        social_welfare_per_type: split_parse(cells[5], "social_welfare_per_type")?,
        global_loss: scalar(cells[6], "global_loss")?,
        accuracy: scalar(cells[7], "accuracy")?,
        omega: scalar(cells[8], "omega")?,
        net_vsp_profit: scalar(cells[9], "net_vsp_profit")?,
        net_social_welfare: scalar(cells[10], "net_social_welfare")?,
        contract_iterations: cells[11]
            .parse()
            .map_err(|_| Error::Config(format!("bad contract_iterations value {:?}", cells[11])))?,
    })
}

/// One contract-iteration trace row tagged with the round and the global
/// vehicle id it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTraceRow {
    pub round: usize,
    pub sv_id: u32,
    pub row: TraceRow,
}

/// CSV of the contract iteration: one row per (round, sweep, vehicle, type).
pub fn write_contract_trace(rows: &[RoundTraceRow], path: &Path) -> Result<()> {
    let mut out =
        String::from("round,sweep,sv_id,type_index,zeta,phi,sv_profit,vsp_profit\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.row.sweep,
            r.sv_id,
            r.row.type_index,
            r.row.zeta,
            r.row.phi,
            r.row.sv_profit,
            r.row.vsp_profit
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// CSV of the area classification: one row per area with its mean daily
/// flow and group.
pub fn write_area_report(
    volumes: &std::collections::BTreeMap<u32, f64>,
    partition: &crate::area::AreaPartition,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("area_id,mean_daily_flow,significant\n");
    for (area, flow) in volumes {
        let _ = writeln!(out, "{},{},{}", area, flow, partition.is_significant(*area));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
