//! Command-line front end: run experiments, classify areas, audit contract
//! equilibria and generate synthetic datasets.

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;

use iovfl::area::{kmeans_binary, total_aadf};
use iovfl::contracts::{
    brute_force_equilibrium, check_monotonicity, iterate_to_equilibrium, verify_ir_ic,
    ContractGrid, EquilibriumOptions, P1Options, SvCost, VspProfile,
};
use iovfl::fl::save_model;
use iovfl::ingestion::{gen_synth, load_aadf, write_aadf, write_accidents};
use iovfl::sim::{
    emit_metrics, run_experiment, write_area_report, write_contract_trace, MetricsFormat,
    SchedulerKind, SimConfig,
};

#[derive(Parser)]
#[command(
    name = "iovfl",
    version,
    about = "Vehicular federated learning simulator with a contract-based incentive market"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write per-round metrics.
    Simulate {
        /// TOML config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// random | round_robin | location_significance | location_info_significance
        #[arg(long, default_value = "location_info_significance")]
        scheduler: String,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// csv | jsonl
        #[arg(long, default_value = "csv")]
        format: String,
        /// Also write the contract iteration trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write the final global model (JSON) here.
        #[arg(long)]
        model_out: Option<PathBuf>,
        /// Exit nonzero when the loss or any contract iteration failed to
        /// converge.
        #[arg(long)]
        strict: bool,
    },
    /// Classify areas into significant/insignificant by mean daily flow.
    ClassifyAreas {
        #[arg(long)]
        config: Option<PathBuf>,
        /// AADF CSV to classify; synthetic data from the config otherwise.
        #[arg(long)]
        aadf: Option<PathBuf>,
        /// Write a per-area CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Audit contract equilibria: rationality, incentive compatibility,
    /// monotonicity and agreement with an exhaustive small-instance search.
    VerifyContracts {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of random audit instances.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate synthetic traffic and accident CSVs.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "aadf.csv")]
        aadf_out: PathBuf,
        #[arg(long, default_value = "accidents.csv")]
        accidents_out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> iovfl::Result<SimConfig> {
    let mut cfg = match path {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> iovfl::Result<ExitCode> {
    match cli.cmd {
        Cmd::Simulate { config, scheduler, seed, out, format, trace, model_out, strict } => {
            let cfg = load_config(&config, seed)?;
            let kind: SchedulerKind = scheduler.parse()?;
            let format: MetricsFormat = format.parse()?;
            let outcome = run_experiment(&cfg, kind)?;
            emit_metrics(&outcome.metrics, &out, format)?;
            if let Some(path) = trace {
                write_contract_trace(&outcome.state.trace, &path)?;
            }
            if let Some(path) = model_out {
                save_model(&outcome.state.model, &path)?;
            }
            let last = outcome.metrics.last();
            println!(
                "scheduler {kind}: {} rounds, final loss {}, accuracy {}",
                outcome.metrics.len(),
                last.map_or(f64::NAN, |m| m.global_loss),
                last.map_or(f64::NAN, |m| m.accuracy),
            );
            println!(
                "loss converged: {}; contract iterations all converged: {}",
                outcome.loss_converged, outcome.state.contracts_converged
            );
            if strict && !(outcome.loss_converged && outcome.state.contracts_converged) {
                eprintln!("strict mode: flagged non-convergence");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ClassifyAreas { config, aadf, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let traffic = match aadf {
                Some(path) => load_aadf(path)?,
                None => gen_synth(&cfg.synth_params(), cfg.seed)?.0,
            };
            let volumes = total_aadf(&traffic);
            let partition = kmeans_binary(&volumes)?;
            println!(
                "{} areas: {} significant, {} insignificant",
                volumes.len(),
                partition.significant.len(),
                partition.insignificant.len()
            );
            println!(
                "mean daily flow centroids: insignificant {}, significant {} ({} iterations)",
                partition.centroids[0], partition.centroids[1], partition.iterations
            );
            if let Some(path) = out {
                write_area_report(&volumes, &partition, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::VerifyContracts { config, instances, seed } => {
            let cfg = load_config(&config, seed)?;
            let ok = verify_contracts_report(&cfg, instances)?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::GenSynth { config, seed, aadf_out, accidents_out } => {
            let cfg = load_config(&config, seed)?;
            let (traffic, accidents) = gen_synth(&cfg.synth_params(), cfg.seed)?;
            write_aadf(&aadf_out, &traffic)?;
            write_accidents(&accidents_out, &accidents)?;
            println!(
                "wrote {} traffic rows to {} and {} accident rows to {}",
                traffic.len(),
                aadf_out.display(),
                accidents.len(),
                accidents_out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Random-instance audit of the contract stage; prints one line per check.
fn verify_contracts_report(cfg: &SimConfig, instances: usize) -> iovfl::Result<bool> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lambda = cfg.lambda * 10.0;
    let upsilon = cfg.upsilon * 10.0;
    let xi = cfg.xi * 10.0;
    let tol = 1e-9;

    let mut min_ir = f64::INFINITY;
    let mut min_ic = f64::INFINITY;
    let mut worst_mono = 0.0f64;
    let mut all_converged = true;
    for i in 0..instances {
        let n_sv = if i % 2 == 0 { 5 } else { 10 };
        let b_max = if i % 4 < 2 { 125.0 } else { 250.0 };
        let caps: Vec<f64> = (0..n_sv).map(|_| rng.random_range(0.15..0.95)).collect();
        let costs = vec![SvCost { xi }; n_sv];
        let profile = VspProfile::with_uniform_types(cfg.num_types, lambda, b_max)?;
        let opts = EquilibriumOptions {
            grid: ContractGrid {
                levels_per_dim: cfg.grid_levels,
                phi_headroom: cfg.phi_headroom,
            },
            gamma: cfg.gamma,
            max_sweeps: cfg.max_sweeps,
            ..EquilibriumOptions::default()
        };
        let eq = iterate_to_equilibrium(&caps, &costs, upsilon, &profile, &opts)?;
        all_converged &= eq.converged;
        let report = verify_ir_ic(&eq.menus, &eq.proportions, &profile, tol)?;
        min_ir = min_ir.min(report.min_ir());
        min_ic = min_ic.min(report.min_ic_margin());
        let mono = check_monotonicity(&eq.menus, &eq.proportions, &profile, tol)?;
        worst_mono = worst_mono.max(mono.worst_violation);
    }
    let line = |name: &str, value: f64, pass: bool| {
        println!("{}  {:<28} {:>14.3e}", if pass { "PASS" } else { "FAIL" }, name, value);
        pass
    };
    let mut ok = true;
    ok &= line("iteration converged", if all_converged { 1.0 } else { 0.0 }, all_converged);
    ok &= line("min type profit (IR)", min_ir, min_ir >= -tol);
    ok &= line("min IC margin", min_ic, min_ic >= -tol);
    ok &= line("worst monotonicity gap", worst_mono, worst_mono <= tol);

    // Exhaustive cross-check on instances small enough to enumerate.
    let mut oracle_ok = true;
    let mut worst_gap = 0.0f64;
    for k in 0..3u64 {
        let mut orng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xABCD + k));
        let caps: Vec<f64> = (0..2).map(|_| orng.random_range(0.2..0.9)).collect();
        let costs = vec![SvCost { xi }; 2];
        let profile = VspProfile::with_uniform_types(2, lambda, 125.0)?;
        let grid = ContractGrid { levels_per_dim: 5, phi_headroom: cfg.phi_headroom };
        let opts = EquilibriumOptions {
            grid,
            gamma: cfg.gamma,
            max_sweeps: cfg.max_sweeps,
            ..EquilibriumOptions::default()
        };
        let eq = iterate_to_equilibrium(&caps, &costs, upsilon, &profile, &opts)?;
        let extras = vec![
            vec![iovfl::contracts::initial_menus(&caps, upsilon, &profile)[0].clone()],
            vec![iovfl::contracts::initial_menus(&caps, upsilon, &profile)[1].clone()],
        ];
        let points = brute_force_equilibrium(
            &caps,
            &costs,
            upsilon,
            &profile,
            &grid,
            cfg.gamma,
            &extras,
            &P1Options::default(),
        )?;
        let gap = points
            .iter()
            .map(|p| {
                p.profits
                    .iter()
                    .zip(&eq.sv_profits)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        worst_gap = worst_gap.max(gap);
        oracle_ok &= gap <= cfg.gamma;
    }
    ok &= line("exhaustive-search profit gap", worst_gap, oracle_ok);
    println!("{}", if ok { "all contract checks passed" } else { "contract checks FAILED" });
    Ok(ok)
}
