//! Simulator and library for a vehicular federated-learning market.
//!
//! A service provider trains a road-accident model from data held by smart
//! vehicles. Each learning round the provider classifies road areas by
//! traffic volume, scores vehicles by the spatio-temporal quality of their
//! data, selects a cohort, and negotiates per-vehicle contract menus that
//! price information significance against payment. The selected vehicles
//! train locally and their models are aggregated; profits are discounted by
//! model freshness as rounds pass.
//!
//! Modules mirror that pipeline: [`ingestion`] reads or synthesizes the
//! traffic and accident data, [`area`] splits areas into significant and
//! insignificant groups, [`selection`] scores and picks vehicles,
//! [`contracts`] solves the menu game, [`fl`] trains and aggregates models,
//! [`economics`] applies freshness discounting, and [`sim`] drives whole
//! experiments.

pub mod area;
pub mod contracts;
pub mod economics;
mod error;
pub mod fl;
pub mod ingestion;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};
