//! Experiment harness: builds the data and vehicle population from a flat
//! TOML config, then repeats the round pipeline — mobility redraw,
//! scheduling, contract equilibrium, local training, aggregation,
//! accounting — until the round budget or loss convergence.
//!
//! All randomness flows through substreams derived from the single config
//! seed and tagged by purpose (and round/vehicle where applicable), so a
//! `(config, seed)` pair reproduces every file byte for byte regardless of
//! how the streams are interleaved.

mod metrics;

pub use metrics::{
    emit_metrics, read_metrics, write_area_report, write_contract_trace, MetricsFormat,
    RoundMetrics, RoundTraceRow,
};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::area::{kmeans_binary, total_aadf, AreaPartition};
use crate::contracts::{
    iterate_to_equilibrium, vsp_profit, ContractGrid, EquilibriumOptions, SvCost, VspProfile,
};
use crate::economics::{model_value, net_social_welfare, net_vsp_profit, FreshnessParams};
use crate::fl::{
    accuracy, encode_records, fed_avg, local_train, partition_data, take_rows, MlpModel,
    PartitionMode, TrainOptions,
};
use crate::ingestion::{
    gen_synth, load_aadf, load_accidents, AccidentSchema, SynthParams, DAY_CATEGORIES,
};
use crate::selection::{
    build_variability, info_significance, location_filter, select_top_n, QoiTier, SmartVehicle,
};
use crate::{Error, Result};

/// Prices in the config are quoted per 0.1 of information significance
/// (the market's customary tick); the engine works in whole units.
const TICKS_PER_UNIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Vehicle population size I.
    pub num_vehicles: usize,
    /// Vehicles selected per round, N.
    pub select_count: usize,
    /// Provider budget types, J.
    pub num_types: usize,
    /// Type willingness values; empty means 1..=J.
    pub thetas: Vec<f64>,
    /// Type prior; empty means uniform.
    pub rhos: Vec<f64>,
    /// 1-based rank of the provider's realized type; 0 means the highest.
    pub true_type: usize,
    pub b_max: f64,
    /// Provider valuation per 0.1 significance.
    pub lambda: f64,
    /// Vehicle asking price per 0.1 significance in the opening menus.
    pub upsilon: f64,
    /// Vehicle collection cost per 0.1 significance.
    pub xi: f64,
    /// Minimum accepted profit improvement in the contract iteration.
    pub gamma: f64,
    pub grid_levels: usize,
    pub phi_headroom: f64,
    pub max_sweeps: usize,
    /// Round budget t_th.
    pub max_rounds: usize,
    /// Optimizer steps per selected vehicle per round.
    pub local_steps: usize,
    pub batch_size: usize,
    pub hidden_layers: Vec<usize>,
    /// Relative change of the trailing-window mean loss that counts as
    /// converged.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub freshness_a: f64,
    pub freshness_b: f64,
    pub data_mode: DataMode,
    pub aadf_path: Option<PathBuf>,
    pub accidents_path: Option<PathBuf>,
    /// Shard records independently of the label when set; otherwise shards
    /// are label-skewed.
    pub iid: bool,
    pub holdout_fraction: f64,
    // synthetic data
    pub num_areas: usize,
    pub num_locations: usize,
    pub num_samples: usize,
    pub significant_fraction: f64,
    pub label_noise: f64,
    pub synth_year: u16,
    // population and mobility
    pub coverage_high: f64,
    pub coverage_medium: f64,
    pub coverage_low: f64,
    /// Coverage multiplier in significant / insignificant areas.
    pub significant_area_boost: f64,
    pub insignificant_area_penalty: f64,
    /// Relative shard sizes per QoI tier.
    pub tier_share_high: f64,
    pub tier_share_medium: f64,
    pub tier_share_low: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            num_vehicles: 100,
            select_count: 10,
            num_types: 10,
            thetas: Vec::new(),
            rhos: Vec::new(),
            true_type: 0,
            b_max: 250.0,
            lambda: 1.2,
            upsilon: 2.1,
            xi: 0.5,
            gamma: 1e-6,
            grid_levels: 21,
            phi_headroom: 2.0,
            max_sweeps: 200,
            max_rounds: 30,
            local_steps: 5,
            batch_size: 32,
            hidden_layers: vec![128, 64],
            convergence_tol: 1e-3,
            convergence_window: 3,
            freshness_a: 1.0,
            freshness_b: 0.05,
            data_mode: DataMode::Synthetic,
            aadf_path: None,
            accidents_path: None,
            iid: false,
            holdout_fraction: 0.2,
            num_areas: 20,
            num_locations: 12,
            num_samples: 6000,
            significant_fraction: 0.4,
            label_noise: 0.1,
            synth_year: 2024,
            coverage_high: 0.75,
            coverage_medium: 0.45,
            coverage_low: 0.2,
            significant_area_boost: 1.3,
            insignificant_area_penalty: 0.7,
            tier_share_high: 3.0,
            tier_share_medium: 2.0,
            tier_share_low: 1.0,
        }
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SimConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_vehicles == 0 {
            return Err(Error::Config("num_vehicles must be positive".into()));
        }
        if self.select_count == 0 || self.select_count > self.num_vehicles {
            return Err(Error::Config(format!(
                "select_count {} must lie in 1..=num_vehicles ({})",
                self.select_count, self.num_vehicles
            )));
        }
        if self.num_types == 0 {
            return Err(Error::Config("num_types must be positive".into()));
        }
        if !self.thetas.is_empty() && self.thetas.len() != self.num_types {
            return Err(Error::Config("thetas length must equal num_types".into()));
        }
        if !self.rhos.is_empty() && self.rhos.len() != self.num_types {
            return Err(Error::Config("rhos length must equal num_types".into()));
        }
        if self.true_type > self.num_types {
            return Err(Error::Config(format!(
                "true_type {} outside 1..={} (0 means highest)",
                self.true_type, self.num_types
            )));
        }
        for (name, v) in [
            ("b_max", self.b_max),
            ("lambda", self.lambda),
            ("upsilon", self.upsilon),
            ("xi", self.xi),
            ("gamma", self.gamma),
            ("phi_headroom", self.phi_headroom),
            ("convergence_tol", self.convergence_tol),
            ("freshness_a", self.freshness_a),
            ("tier_share_high", self.tier_share_high),
            ("tier_share_medium", self.tier_share_medium),
            ("tier_share_low", self.tier_share_low),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.freshness_b.is_finite() || self.freshness_b < 0.0 {
            return Err(Error::Config("freshness_b must be non-negative".into()));
        }
        if self.grid_levels < 2 {
            return Err(Error::Config("grid_levels must be at least 2".into()));
        }
        if self.max_sweeps == 0 || self.local_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_sweeps, local_steps and batch_size must be positive".into(),
            ));
        }
        if self.convergence_window == 0 {
            return Err(Error::Config("convergence_window must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) || self.holdout_fraction <= 0.0 {
            return Err(Error::Config("holdout_fraction must lie in (0, 0.5)".into()));
        }
        for (name, v) in [
            ("coverage_high", self.coverage_high),
            ("coverage_medium", self.coverage_medium),
            ("coverage_low", self.coverage_low),
        ] {
            if !(0.0..=1.0).contains(&v) || v == 0.0 {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if self.significant_area_boost <= 0.0 || self.insignificant_area_penalty <= 0.0 {
            return Err(Error::Config("area coverage multipliers must be positive".into()));
        }
        if self.data_mode == DataMode::Files
            && (self.aadf_path.is_none() || self.accidents_path.is_none())
        {
            return Err(Error::Config(
                "data_mode = \"files\" needs aadf_path and accidents_path".into(),
            ));
        }
        if self.num_locations == 0 {
            return Err(Error::Config("num_locations must be positive".into()));
        }
        Ok(())
    }

    /// Willingness ladder: configured or 1..=J.
    fn theta_vec(&self) -> Vec<f64> {
        if self.thetas.is_empty() {
            (1..=self.num_types).map(|j| j as f64).collect()
        } else {
            self.thetas.clone()
        }
    }

    fn rho_vec(&self) -> Vec<f64> {
        if self.rhos.is_empty() {
            vec![1.0 / self.num_types as f64; self.num_types]
        } else {
            self.rhos.clone()
        }
    }

    /// 0-based index of the provider's realized type.
    fn true_type_index(&self) -> usize {
        if self.true_type == 0 {
            self.num_types - 1
        } else {
            self.true_type - 1
        }
    }

    fn equilibrium_options(&self) -> EquilibriumOptions {
        EquilibriumOptions {
            grid: ContractGrid {
                levels_per_dim: self.grid_levels,
                phi_headroom: self.phi_headroom,
            },
            gamma: self.gamma,
            max_sweeps: self.max_sweeps,
            ..EquilibriumOptions::default()
        }
    }

    fn schema(&self) -> AccidentSchema {
        AccidentSchema { num_locations: self.num_locations as u32, ..AccidentSchema::default() }
    }

    /// Synthetic dataset parameters implied by this config.
    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            num_areas: self.num_areas as u32,
            significant_fraction: self.significant_fraction,
            num_samples: self.num_samples,
            label_noise: self.label_noise,
            year: self.synth_year,
            schema: self.schema(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Random,
    RoundRobin,
    LocationSignificance,
    LocationInfoSignificance,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Random,
        SchedulerKind::RoundRobin,
        SchedulerKind::LocationSignificance,
        SchedulerKind::LocationInfoSignificance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Random => "random",
            SchedulerKind::RoundRobin => "round_robin",
            SchedulerKind::LocationSignificance => "location_significance",
            SchedulerKind::LocationInfoSignificance => "location_info_significance",
        }
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheduler {s:?}")))
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Selection strategy plus the round-robin cursor where applicable.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    cursor: usize,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind) -> Self {
        Scheduler { kind, cursor: 0 }
    }

    /// Picks exactly `n` vehicle ids. The location-filtered strategies
    /// prefer vehicles in significant areas and only fall back to the rest
    /// when fewer than `n` qualify.
    fn select(
        &mut self,
        vehicles: &[SmartVehicle],
        partition: &AreaPartition,
        required: &Array2<f64>,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<u32>> {
        let all_ids: Vec<u32> = vehicles.iter().map(|v| v.id).collect();
        match self.kind {
            SchedulerKind::Random => Ok(sample(&all_ids, n, rng)),
            SchedulerKind::RoundRobin => {
                let total = vehicles.len();
                let picked = (0..n)
                    .map(|k| all_ids[(self.cursor + k) % total])
                    .collect();
                self.cursor = (self.cursor + n) % total;
                Ok(picked)
            }
            SchedulerKind::LocationSignificance => {
                let filtered = location_filter(vehicles, partition)?;
                let m_ids: Vec<u32> = filtered.iter().map(|v| v.id).collect();
                Ok(top_up(sample(&m_ids, n.min(m_ids.len()), rng), &all_ids, n, rng))
            }
            SchedulerKind::LocationInfoSignificance => {
                let filtered = location_filter(vehicles, partition)?;
                let mut scored = Vec::with_capacity(filtered.len());
                for v in &filtered {
                    let pair = build_variability(v, required)?;
                    scored.push((v.id, info_significance(&pair)?));
                }
                let picked = select_top_n(&scored, n.min(scored.len()))?;
                Ok(top_up(picked, &all_ids, n, rng))
            }
        }
    }
}

/// Partial Fisher-Yates draw of `n` ids without replacement.
fn sample(ids: &[u32], n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut pool = ids.to_vec();
    for k in 0..n {
        let pick = rng.random_range(k..pool.len());
        pool.swap(k, pick);
    }
    pool.truncate(n);
    pool
}

/// Extends `picked` with random ids from the complement until it has `n`.
fn top_up(mut picked: Vec<u32>, all_ids: &[u32], n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if picked.len() < n {
        let rest: Vec<u32> =
            all_ids.iter().copied().filter(|id| !picked.contains(id)).collect();
        picked.extend(sample(&rest, n - picked.len(), rng));
    }
    picked
}

// Substream tags; each (tag, salt-a, salt-b) combination is an independent
// deterministic stream of the master seed.
const TAG_SYNTH: u64 = 1;
const TAG_HOLDOUT: u64 = 2;
const TAG_TIER: u64 = 3;
const TAG_PARTITION: u64 = 4;
const TAG_MODEL: u64 = 5;
const TAG_MOBILITY: u64 = 6;
const TAG_SELECT: u64 = 7;
const TAG_TRAIN: u64 = 8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag) ^ splitmix64(a).rotate_left(17) ^ splitmix64(b).rotate_left(31))
}

fn substream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, a, b))
}

/// Everything an experiment carries between rounds.
pub struct SimState {
    pub cfg: SimConfig,
    pub profile: VspProfile,
    pub volumes: BTreeMap<u32, f64>,
    pub partition: AreaPartition,
    pub vehicles: Vec<SmartVehicle>,
    pub model: MlpModel,
    pub round: usize,
    /// Global loss history, one entry per completed round.
    pub losses: Vec<f64>,
    /// Contract iteration trace across all rounds.
    pub trace: Vec<RoundTraceRow>,
    /// False if any round's contract iteration hit the sweep budget.
    pub contracts_converged: bool,
    shards: Vec<(Array2<f64>, Array2<f64>)>,
    shard_sizes: Vec<f64>,
    test_x: Array2<f64>,
    test_g: Array2<f64>,
    required: Array2<f64>,
    costs: Vec<SvCost>,
}

impl SimState {
    pub fn init(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let schema = cfg.schema();
        let (traffic, accidents) = match cfg.data_mode {
            DataMode::Synthetic => {
                gen_synth(&cfg.synth_params(), stream_seed(cfg.seed, TAG_SYNTH, 0, 0))?
            }
            DataMode::Files => {
                let aadf = cfg.aadf_path.as_ref().unwrap();
                let acc = cfg.accidents_path.as_ref().unwrap();
                (load_aadf(aadf)?, load_accidents(acc, &schema)?)
            }
        };
        let volumes = total_aadf(&traffic);
        let partition = kmeans_binary(&volumes)?;

        let (x, g, labels) = encode_records(&accidents, &schema)?;
        let n = x.nrows();
        let n_test = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng_holdout = substream(cfg.seed, TAG_HOLDOUT, 0, 0);
        for i in (1..n).rev() {
            order.swap(i, rng_holdout.random_range(0..=i));
        }
        let (test_idx, train_idx) = order.split_at(n_test);
        let test_x = take_rows(&x, test_idx);
        let test_g = take_rows(&g, test_idx);
        let train_x = take_rows(&x, train_idx);
        let train_g = take_rows(&g, train_idx);
        let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

        // Fixed QoI tier per vehicle: a shuffled population split in thirds.
        let i_total = cfg.num_vehicles;
        let mut tier_order: Vec<usize> = (0..i_total).collect();
        let mut rng_tier = substream(cfg.seed, TAG_TIER, 0, 0);
        for i in (1..i_total).rev() {
            tier_order.swap(i, rng_tier.random_range(0..=i));
        }
        let mut tiers = vec![QoiTier::Low; i_total];
        let third = i_total.div_ceil(3);
        for (rank, &id) in tier_order.iter().enumerate() {
            tiers[id] = if rank < third {
                QoiTier::High
            } else if rank < 2 * third {
                QoiTier::Medium
            } else {
                QoiTier::Low
            };
        }

        let shares: Vec<f64> = tiers
            .iter()
            .map(|t| match t {
                QoiTier::High => cfg.tier_share_high,
                QoiTier::Medium => cfg.tier_share_medium,
                QoiTier::Low => cfg.tier_share_low,
            })
            .collect();
        let mode = if cfg.iid { PartitionMode::Iid } else { PartitionMode::LabelSkewed };
        let mut rng_part = substream(cfg.seed, TAG_PARTITION, 0, 0);
        let shard_idx = partition_data(&train_labels, &shares, mode, &mut rng_part)?;
        let shards: Vec<(Array2<f64>, Array2<f64>)> = shard_idx
            .iter()
            .map(|idx| (take_rows(&train_x, idx), take_rows(&train_g, idx)))
            .collect();
        let shard_sizes: Vec<f64> = shard_idx.iter().map(|idx| idx.len() as f64).collect();

        let mut layer_sizes = vec![schema.feature_dim()];
        layer_sizes.extend(&cfg.hidden_layers);
        layer_sizes.push(crate::fl::NUM_CLASSES);
        let mut rng_model = substream(cfg.seed, TAG_MODEL, 0, 0);
        let model = MlpModel::new(&layer_sizes, &mut rng_model)?;

        let profile = VspProfile::new(
            cfg.theta_vec(),
            cfg.rho_vec(),
            cfg.lambda * TICKS_PER_UNIT,
            cfg.b_max,
        )?;
        let costs = vec![SvCost { xi: cfg.xi * TICKS_PER_UNIT }; i_total];

        let required =
            Array2::ones((DAY_CATEGORIES as usize, cfg.num_locations));
        let first_area = *volumes.keys().next().unwrap();
        let vehicles = (0..i_total)
            .map(|id| SmartVehicle {
                id: id as u32,
                tier: tiers[id],
                current_area: first_area,
                eta_cells: Array2::zeros(required.dim()),
            })
            .collect();

        Ok(SimState {
            cfg,
            profile,
            volumes,
            partition,
            vehicles,
            model,
            round: 0,
            losses: Vec::new(),
            trace: Vec::new(),
            contracts_converged: true,
            shards,
            shard_sizes,
            test_x,
            test_g,
            required,
            costs,
        })
    }

    /// Redraws every vehicle's area and coverage cells for the round. Cell
    /// coverage is Bernoulli with a tier base rate scaled up in significant
    /// areas and down elsewhere.
    fn redraw_mobility(&mut self, round: usize) {
        let mut rng = substream(self.cfg.seed, TAG_MOBILITY, round as u64, 0);
        let area_ids: Vec<u32> = self.volumes.keys().copied().collect();
        for v in &mut self.vehicles {
            v.current_area = area_ids[rng.random_range(0..area_ids.len())];
            let base = match v.tier {
                QoiTier::High => self.cfg.coverage_high,
                QoiTier::Medium => self.cfg.coverage_medium,
                QoiTier::Low => self.cfg.coverage_low,
            };
            let mult = if self.partition.is_significant(v.current_area) {
                self.cfg.significant_area_boost
            } else {
                self.cfg.insignificant_area_penalty
            };
            let p = (base * mult).clamp(0.02, 0.98);
            for cell in v.eta_cells.iter_mut() {
                *cell = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            }
        }
    }

    fn zeta_of(&self, id: u32) -> Result<f64> {
        let v = &self.vehicles[id as usize];
        let pair = build_variability(v, &self.required)?;
        info_significance(&pair)
    }
}

/// Runs one full round and advances the state. Steps: mobility redraw,
/// scheduling (with location filtering for the location-aware strategies),
/// contract equilibrium over the selected vehicles' information
/// significance, local training, weighted averaging, loss/accuracy
/// measurement and profit accounting.
pub fn run_round(state: &mut SimState, scheduler: &mut Scheduler) -> Result<RoundMetrics> {
    let t = state.round;
    let cfg_n = state.cfg.select_count;
    state.redraw_mobility(t);

    let mut rng_sel = substream(state.cfg.seed, TAG_SELECT, t as u64, 0);
    let selected = scheduler.select(
        &state.vehicles,
        &state.partition,
        &state.required,
        cfg_n,
        &mut rng_sel,
    )?;
    debug_assert_eq!(selected.len(), cfg_n);

    let zeta_values: Vec<f64> =
        selected.iter().map(|&id| state.zeta_of(id)).collect::<Result<_>>()?;
    let sel_costs: Vec<SvCost> = selected.iter().map(|&id| state.costs[id as usize]).collect();

    let eq = iterate_to_equilibrium(
        &zeta_values,
        &sel_costs,
        state.cfg.upsilon * TICKS_PER_UNIT,
        &state.profile,
        &state.cfg.equilibrium_options(),
    )
    .map_err(|e| Error::Numeric(format!("round {t} contract stage: {e}")))?;
    if !eq.converged {
        state.contracts_converged = false;
    }
    for row in &eq.trace {
        state.trace.push(RoundTraceRow { round: t, sv_id: selected[row.sv], row: *row });
    }

    let mut locals = Vec::new();
    let mut weights = Vec::new();
    for &id in &selected {
        let (sx, sg) = &state.shards[id as usize];
        if sx.nrows() == 0 {
            continue;
        }
        let mut local = state.model.clone();
        let opts = TrainOptions {
            steps: state.cfg.local_steps,
            batch_size: state.cfg.batch_size,
            ..TrainOptions::default()
        };
        let mut rng_train = substream(state.cfg.seed, TAG_TRAIN, t as u64, id as u64);
        local_train(&mut local, sx, sg, &opts, &mut rng_train)
            .map_err(|e| Error::Numeric(format!("round {t} training vehicle {id}: {e}")))?;
        locals.push(local);
        weights.push(state.shard_sizes[id as usize]);
    }
    if locals.is_empty() {
        return Err(Error::InvalidInput(format!(
            "round {t}: no selected vehicle holds any training data"
        )));
    }
    state.model = fed_avg(&locals, &weights)?;

    // global loss: plain mean of the per-shard losses at the new model
    let mut psi = 0.0;
    let mut populated = 0usize;
    for (sx, sg) in state.shards.iter().filter(|(sx, _)| sx.nrows() > 0) {
        psi += crate::fl::loss(&state.model, sx, sg)?;
        populated += 1;
    }
    let psi = psi / populated.max(1) as f64;
    let chi = accuracy(&state.model, &state.test_x, &state.test_g)?;
    let fresh = FreshnessParams { a: state.cfg.freshness_a, b: state.cfg.freshness_b };
    let omega = model_value(&fresh, chi, t as f64);

    let j_true = state.cfg.true_type_index();
    let j_types = state.profile.num_types();
    let vsp_per_type: Vec<f64> = (0..j_types)
        .map(|j| vsp_profit(j, &eq.menus, &eq.proportions.rows[j], &state.profile))
        .collect();
    let welfare_per_type: Vec<f64> = (0..j_types)
        .map(|j| {
            net_social_welfare(j, 1.0, &eq.menus, &eq.proportions.rows[j], &sel_costs, &state.profile)
        })
        .collect();
    let net_profit =
        net_vsp_profit(j_true, omega, &eq.menus, &eq.proportions.rows[j_true], &state.profile);
    let net_welfare = net_social_welfare(
        j_true,
        omega,
        &eq.menus,
        &eq.proportions.rows[j_true],
        &sel_costs,
        &state.profile,
    );

    let metrics = RoundMetrics {
        round: t,
        selected_sv_ids: selected,
        zeta_values,
        vsp_profit_per_type: vsp_per_type,
        sv_profits: eq.sv_profits,
        social_welfare_per_type: welfare_per_type,
        global_loss: psi,
        accuracy: chi,
        omega,
        net_vsp_profit: net_profit,
        net_social_welfare: net_welfare,
        contract_iterations: eq.sweeps,
    };
    metrics.validate()?;
    state.losses.push(psi);
    state.round += 1;
    Ok(metrics)
}

/// True once the relative change between the last two trailing-window mean
/// losses drops below `tol`.
pub fn loss_converged(losses: &[f64], window: usize, tol: f64) -> bool {
    if losses.len() < window + 1 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let m1 = mean(&losses[losses.len() - window..]);
    let m0 = mean(&losses[losses.len() - window - 1..losses.len() - 1]);
    (m1 - m0).abs() / m0.abs().max(1e-12) < tol
}

pub struct ExperimentOutcome {
    pub metrics: Vec<RoundMetrics>,
    /// True when the loss stop rule fired before the round budget ran out.
    pub loss_converged: bool,
    pub state: SimState,
}

/// Full experiment: init, then rounds until `max_rounds` or convergence.
/// Identical `(config, scheduler)` inputs produce identical outcomes.
pub fn run_experiment(cfg: &SimConfig, kind: SchedulerKind) -> Result<ExperimentOutcome> {
    let mut state = SimState::init(cfg.clone())?;
    let mut scheduler = Scheduler::new(kind);
    let mut metrics = Vec::new();
    let mut converged = false;
    while state.round < cfg.max_rounds {
        metrics.push(run_round(&mut state, &mut scheduler)?);
        if loss_converged(&state.losses, cfg.convergence_window, cfg.convergence_tol) {
            converged = true;
            break;
        }
    }
    Ok(ExperimentOutcome { metrics, loss_converged: converged, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small but complete config that runs a round in milliseconds.
    fn tiny_cfg() -> SimConfig {
        SimConfig {
            num_vehicles: 6,
            select_count: 2,
            num_types: 2,
            grid_levels: 5,
            max_rounds: 2,
            local_steps: 2,
            batch_size: 16,
            hidden_layers: vec![8],
            num_areas: 6,
            num_locations: 4,
            num_samples: 240,
            ..SimConfig::default()
        }
    }

    #[test]
    fn default_config_validates() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let cfg = tiny_cfg();
        let text = toml::to_string(&cfg).unwrap();
        let back: SimConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = toml::from_str::<SimConfig>("definitely_not_a_field = 1").unwrap_err();
        assert!(err.to_string().contains("definitely_not_a_field"));
    }

    #[test]
    fn select_count_cannot_exceed_population() {
        let cfg = SimConfig { num_vehicles: 3, select_count: 5, ..SimConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_round_budget_gives_empty_metrics() {
        let cfg = SimConfig { max_rounds: 0, ..tiny_cfg() };
        let out = run_experiment(&cfg, SchedulerKind::Random).unwrap();
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn rounds_complete_and_metrics_hold_their_invariants() {
        for kind in SchedulerKind::ALL {
            let out = run_experiment(&tiny_cfg(), kind).unwrap();
            assert!(!out.metrics.is_empty());
            for m in &out.metrics {
                m.validate().unwrap();
                assert_eq!(m.selected_sv_ids.len(), 2, "{kind} must select exactly N");
            }
        }
    }

    #[test]
    fn experiments_are_deterministic_per_seed() {
        let a = run_experiment(&tiny_cfg(), SchedulerKind::LocationInfoSignificance).unwrap();
        let b = run_experiment(&tiny_cfg(), SchedulerKind::LocationInfoSignificance).unwrap();
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn round_robin_visits_everyone_once_per_cycle() {
        let cfg = SimConfig { max_rounds: 3, ..tiny_cfg() };
        let out = run_experiment(&cfg, SchedulerKind::RoundRobin).unwrap();
        let mut seen: Vec<u32> =
            out.metrics.iter().flat_map(|m| m.selected_sv_ids.clone()).collect();
        seen.sort_unstable();
        // 3 rounds x N=2 covers the population of 6 exactly once
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn single_vehicle_round_is_an_aggregation_identity() {
        let cfg = SimConfig {
            num_vehicles: 1,
            select_count: 1,
            tier_share_medium: 3.0,
            tier_share_low: 3.0,
            max_rounds: 1,
            ..tiny_cfg()
        };
        let out = run_experiment(&cfg, SchedulerKind::Random).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].selected_sv_ids, vec![0]);
    }

    #[test]
    fn location_aware_selection_stays_in_significant_areas_when_possible() {
        // with most areas significant the filtered pool is almost always
        // large enough, so every pick must come from a significant area
        let cfg = SimConfig {
            significant_fraction: 0.8,
            num_vehicles: 12,
            max_rounds: 1,
            ..tiny_cfg()
        };
        let mut state = SimState::init(cfg).unwrap();
        let mut sched = Scheduler::new(SchedulerKind::LocationSignificance);
        let m = run_round(&mut state, &mut sched).unwrap();
        let in_significant = m
            .selected_sv_ids
            .iter()
            .filter(|&&id| state.partition.is_significant(state.vehicles[id as usize].current_area))
            .count();
        assert!(in_significant >= 1, "filtered scheduler ignored the filter");
    }

    #[test]
    fn trailing_mean_convergence_rule() {
        assert!(!loss_converged(&[1.0, 0.9], 3, 1e-3));
        assert!(loss_converged(&[0.5, 0.5001, 0.5, 0.5001], 3, 1e-2));
        assert!(!loss_converged(&[1.0, 0.8, 0.6, 0.4], 3, 1e-3));
    }
}
