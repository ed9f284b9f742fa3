//! Acceptance gate: one numbered check per release criterion, each printing
//! a single PASS/FAIL line (run with `--nocapture` to see them together).
//!
//! Checks 1-3 share one batch of twenty full-size equilibrium instances;
//! checks 8-10 share the fleet-scale experiment configuration. Tolerances
//! are stated inline next to each assertion.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iovfl::contracts::{
    brute_force_equilibrium, check_monotonicity, initial_menus, iterate_to_equilibrium,
    p2_feasibility, p3_feasibility, solve_payment_proportions, verify_ir_ic, ContractGrid,
    ContractMenu, EquilibriumOptions, EquilibriumResult, P1Options, PaymentProportions, SvCost,
    VspProfile,
};
use iovfl::fl::{
    adam_step, fed_avg, forward, loss, loss_and_gradient, weight_distance, AdamParams, AdamState,
    MlpModel,
};
use iovfl::sim::{
    emit_metrics, run_experiment, ExperimentOutcome, MetricsFormat, SchedulerKind, SimConfig,
};

fn report(number: usize, label: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number:2} {verdict}  {label}: {detail}");
    assert!(pass, "criterion {number} ({label}): {detail}");
}

/// Internal per-unit prices: the headline per-0.1 rates scaled by ten.
const LAMBDA: f64 = 12.0;
const UPSILON: f64 = 21.0;
const XI: f64 = 5.0;

struct EquilibriumInstance {
    profile: VspProfile,
    result: EquilibriumResult,
}

/// Twenty full-size markets: ten budget types, five or ten vehicles,
/// maximum budgets of 125 and 250, random significance caps.
fn equilibrium_batch() -> &'static (Vec<EquilibriumInstance>, f64) {
    static BATCH: OnceLock<(Vec<EquilibriumInstance>, f64)> = OnceLock::new();
    BATCH.get_or_init(|| {
        let started = Instant::now();
        let mut instances = Vec::new();
        for i in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let n_sv = if i % 2 == 0 { 5 } else { 10 };
            let b_max = if i < 10 { 125.0 } else { 250.0 };
            let profile = VspProfile::with_uniform_types(10, LAMBDA, b_max).unwrap();
            let caps: Vec<f64> = (0..n_sv).map(|_| rng.random_range(0.15..0.95)).collect();
            let costs = vec![SvCost { xi: XI }; n_sv];
            let opts = EquilibriumOptions::default();
            let result = iterate_to_equilibrium(&caps, &costs, UPSILON, &profile, &opts)
                .expect("equilibrium instance failed");
            instances.push(EquilibriumInstance { profile, result });
        }
        (instances, started.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_01_equilibrium_contracts_are_individually_rational() {
    let (instances, elapsed) = equilibrium_batch();
    let mut worst = f64::INFINITY;
    let mut all_converged = true;
    for inst in instances {
        all_converged &= inst.result.converged;
        let audit = verify_ir_ic(
            &inst.result.menus,
            &inst.result.proportions,
            &inst.profile,
            1e-9,
        )
        .unwrap();
        worst = worst.min(audit.min_ir());
    }
    let pass = all_converged && worst >= -1e-9 && *elapsed < 60.0;
    report(
        1,
        "individual rationality at equilibrium",
        pass,
        &format!(
            "20 instances, worst provider payoff {worst:.3e} (>= -1e-9), batch {elapsed:.1}s (< 60s)"
        ),
    );
}

#[test]
fn criterion_02_true_type_row_is_incentive_compatible() {
    let (instances, _) = equilibrium_batch();
    let mut worst = f64::INFINITY;
    for inst in instances {
        let audit = verify_ir_ic(
            &inst.result.menus,
            &inst.result.proportions,
            &inst.profile,
            1e-9,
        )
        .unwrap();
        worst = worst.min(audit.min_ic_margin());
    }
    let pass = worst >= -1e-9;
    report(
        2,
        "incentive compatibility at equilibrium",
        pass,
        &format!("20 instances, worst own-row margin {worst:.3e} (>= -1e-9)"),
    );
}

#[test]
fn criterion_03_menus_and_payoffs_are_monotone_in_type() {
    let (instances, _) = equilibrium_batch();
    let mut worst = 0.0f64;
    for inst in instances {
        let audit = check_monotonicity(
            &inst.result.menus,
            &inst.result.proportions,
            &inst.profile,
            1e-9,
        )
        .unwrap();
        worst = worst.max(audit.worst_violation);
    }
    let pass = worst <= 1e-9;
    report(
        3,
        "monotone significance, payment and payoff",
        pass,
        &format!("20 instances, worst adjacent drop {worst:.3e} (<= 1e-9)"),
    );
}

/// Menu whose payment schedule prices each significance increment between
/// 90% and 100% of the buyer's marginal value. Such schedules satisfy the
/// reduced constraint set by construction and are the shape the menu search
/// optimizes over, so the reduced set must imply the full pairwise one.
fn screened_menu(
    rng: &mut ChaCha8Rng,
    j_types: usize,
    n_sv: usize,
) -> (Vec<ContractMenu>, PaymentProportions, VspProfile) {
    let profile = VspProfile::with_uniform_types(j_types, LAMBDA, 1e9).unwrap();
    let mut zeta = vec![vec![0.0; j_types]; n_sv];
    let mut rho = vec![vec![0.0; j_types]; n_sv];
    for n in 0..n_sv {
        let mut z = 0.0f64;
        let mut r = 0.0f64;
        for j in 0..j_types {
            z += rng.random_range(0.05..0.3);
            r += rng.random_range(0.05..0.2);
            zeta[n][j] = z;
            rho[n][j] = r.min(1.0);
        }
    }
    let roots: Vec<f64> = (0..j_types)
        .map(|j| (0..n_sv).map(|n| rho[n][j] * zeta[n][j]).sum::<f64>().sqrt())
        .collect();
    let mut paid = vec![0.0; j_types];
    paid[0] = rng.random_range(0.0..0.9) * profile.thetas[0] * LAMBDA * roots[0];
    for j in 1..j_types {
        let increment = profile.thetas[j] * LAMBDA * (roots[j] - roots[j - 1]);
        paid[j] = paid[j - 1] + rng.random_range(0.9..1.0) * increment;
    }
    let menus = (0..n_sv)
        .map(|n| {
            let phi = (0..j_types)
                .map(|j| {
                    let weight: f64 = rho[n][j] * zeta[n][j]
                        / (0..n_sv).map(|m| rho[m][j] * zeta[m][j]).sum::<f64>();
                    paid[j] * weight / rho[n][j]
                })
                .collect();
            ContractMenu::new(zeta[n].clone(), phi).unwrap()
        })
        .collect();
    let rows = (0..j_types)
        .map(|j| (0..n_sv).map(|n| rho[n][j]).collect())
        .collect();
    let proportions = PaymentProportions { rows, degenerate: vec![false; j_types] };
    (menus, proportions, profile)
}

#[test]
fn criterion_04_reduced_constraints_imply_the_full_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut checked = 0;
    let mut pass = true;
    let mut detail = String::new();
    for i in 0..100 {
        let j_types = 2 + i % 5;
        let n_sv = 1 + i % 3;
        let (menus, proportions, profile) = screened_menu(&mut rng, j_types, n_sv);
        let reduced = p3_feasibility(&menus, &proportions, &profile, 1e-9);
        let full = p2_feasibility(&menus, &proportions, &profile, 1e-9);
        let audit = verify_ir_ic(&menus, &proportions, &profile, 1e-9).unwrap();
        if !reduced.feasible {
            pass = false;
            detail = format!("menu {i}: generator produced a reduced-infeasible menu");
            break;
        }
        if !(full.feasible && audit.ok) {
            pass = false;
            detail = format!("menu {i}: reduced-feasible but full suite failed");
            break;
        }
        if reduced.evaluations != 3 * j_types - 1 || full.evaluations != j_types * (j_types + 1) {
            pass = false;
            detail = format!(
                "menu {i}: constraint counts {} / {} instead of {} / {}",
                reduced.evaluations,
                full.evaluations,
                3 * j_types - 1,
                j_types * (j_types + 1)
            );
            break;
        }
        checked += 1;
    }
    if pass {
        detail = format!(
            "{checked} menus with 2..=6 types: reduced pass -> full pass, counts 3J-1 and J^2+J"
        );
    }
    report(4, "reduced screening implies full screening", pass, &detail);
}

#[test]
fn criterion_05_iteration_lands_on_an_exhaustive_equilibrium() {
    let started = Instant::now();
    let grid = ContractGrid { levels_per_dim: 5, phi_headroom: 2.0 };
    let opts = EquilibriumOptions { grid, ..EquilibriumOptions::default() };
    let mut worst_gap = 0.0f64;
    let mut pass = true;
    let mut detail = String::new();
    for i in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + i);
        let profile = VspProfile::with_uniform_types(2, LAMBDA, if i % 2 == 0 { 20.0 } else { 40.0 })
            .unwrap();
        let caps: Vec<f64> = (0..2).map(|_| rng.random_range(0.2..0.9)).collect();
        let costs = vec![SvCost { xi: XI }; 2];
        let result = iterate_to_equilibrium(&caps, &costs, UPSILON, &profile, &opts).unwrap();
        if !result.converged {
            pass = false;
            detail = format!("instance {i}: sweep iteration did not converge");
            break;
        }
        let extras: Vec<Vec<ContractMenu>> = initial_menus(&caps, UPSILON, &profile)
            .into_iter()
            .map(|m| vec![m])
            .collect();
        let points = brute_force_equilibrium(
            &caps, &costs, UPSILON, &profile, &grid, opts.gamma, &extras, &opts.p1,
        )
        .unwrap();
        if points.is_empty() {
            pass = false;
            detail = format!("instance {i}: exhaustive search found no equilibrium");
            break;
        }
        let gap = points
            .iter()
            .map(|p| {
                p.profits
                    .iter()
                    .zip(&result.sv_profits)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        worst_gap = worst_gap.max(gap);
    }
    let elapsed = started.elapsed().as_secs_f64();
    pass = pass && worst_gap <= 1e-6 && elapsed < 120.0;
    if detail.is_empty() {
        detail = format!(
            "10 instances, worst profit gap to an exhaustive equilibrium {worst_gap:.3e} (<= 1e-6), {elapsed:.1}s (< 120s)"
        );
    }
    report(5, "sweep iteration matches exhaustive search", pass, &detail);
}

#[test]
fn criterion_06_payment_reaction_beats_grid_and_closed_form() {
    // Two-vehicle instances against a 101 x 101 grid of the feasible box.
    let mut rng = ChaCha8Rng::seed_from_u64(6006);
    let mut worst_grid_gap = 0.0f64;
    for i in 0..20 {
        let u = rng.random_range(5.0..30.0);
        let zeta = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
        let phi = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
        let budget = if i % 2 == 0 {
            1e9
        } else {
            rng.random_range(0.1..0.6) * (phi[0] + phi[1])
        };
        let profile = VspProfile::new(vec![1.0], vec![1.0], u, budget).unwrap();
        let menus: Vec<ContractMenu> = (0..2)
            .map(|n| ContractMenu::new(vec![zeta[n]], vec![phi[n]]).unwrap())
            .collect();
        let props =
            solve_payment_proportions(&menus, &profile, &P1Options::default()).unwrap();
        let row = &props.rows[0];
        let objective = |r: &[f64]| {
            u * (r[0] * zeta[0] + r[1] * zeta[1]).sqrt() - r[0] * phi[0] - r[1] * phi[1]
        };
        let spend = row[0] * phi[0] + row[1] * phi[1];
        assert!(spend <= budget + 1e-9, "overspent: {spend} > {budget}");
        let mut best = f64::NEG_INFINITY;
        for a in 0..=100 {
            for b in 0..=100 {
                let cand = [a as f64 / 100.0, b as f64 / 100.0];
                if cand[0] * phi[0] + cand[1] * phi[1] <= budget {
                    best = best.max(objective(&cand));
                }
            }
        }
        worst_grid_gap = worst_grid_gap.max(best - objective(row));
    }

    // Single-vehicle closed form u^2 zeta / (4 phi^2), clipped and
    // budget-limited, across all three regimes.
    let mut worst_closed_gap = 0.0f64;
    for i in 0..20 {
        let (u, zeta, phi): (f64, f64, f64) = match i % 3 {
            0 => (rng.random_range(0.5..2.0), rng.random_range(0.05..0.5), rng.random_range(1.0..3.0)),
            1 => (rng.random_range(8.0..15.0), rng.random_range(0.5..1.0), rng.random_range(0.2..0.5)),
            _ => (rng.random_range(2.0..6.0), rng.random_range(0.3..1.0), rng.random_range(0.5..1.5)),
        };
        let interior = (u * u * zeta / (4.0 * phi * phi)).min(1.0);
        let budget = if i % 3 == 2 { 0.5 * interior * phi } else { 1e9 };
        let expected = interior.min(budget / phi);
        let profile = VspProfile::new(vec![1.0], vec![1.0], u, budget).unwrap();
        let menus = vec![ContractMenu::new(vec![zeta], vec![phi]).unwrap()];
        let props =
            solve_payment_proportions(&menus, &profile, &P1Options::default()).unwrap();
        worst_closed_gap = worst_closed_gap.max((props.rows[0][0] - expected).abs());
    }

    let pass = worst_grid_gap <= 1e-6 && worst_closed_gap <= 1e-8;
    report(
        6,
        "payment reaction optimality",
        pass,
        &format!(
            "grid gap {worst_grid_gap:.3e} (<= 1e-6), closed-form gap {worst_closed_gap:.3e} (<= 1e-8)"
        ),
    );
}

#[test]
fn criterion_07_learning_numerics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);

    // Output rows are probability vectors.
    let mut worst_row_sum = 0.0f64;
    for _ in 0..20 {
        let model = MlpModel::new(&[5, 4, 3], &mut rng).unwrap();
        let mut x = Array2::zeros((8, 5));
        for v in x.iter_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
        let probs = forward(&model, &x).unwrap();
        for row in probs.rows() {
            worst_row_sum = worst_row_sum.max((row.sum() - 1.0).abs());
        }
    }

    // Backprop against central differences on twenty 4-2-3 models.
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let model = MlpModel::new(&[4, 2, 3], &mut rng).unwrap();
        let mut x = Array2::zeros((6, 4));
        let mut g = Array2::zeros((6, 3));
        for i in 0..6 {
            for j in 0..4 {
                x[(i, j)] = rng.random_range(-1.0..1.0);
            }
            g[(i, rng.random_range(0..3))] = 1.0;
        }
        let (_, grads) = loss_and_gradient(&model, &x, &g).unwrap();
        let h = 1e-5;
        for l in 0..grads.len() {
            for ((r, c), exact) in grads[l].indexed_iter() {
                let mut wplus: Vec<Array2<f64>> = model.weights().to_vec();
                wplus[l][(r, c)] += h;
                let mut wminus: Vec<Array2<f64>> = model.weights().to_vec();
                wminus[l][(r, c)] -= h;
                let fd = (loss(&MlpModel::from_weights(wplus).unwrap(), &x, &g).unwrap()
                    - loss(&MlpModel::from_weights(wminus).unwrap(), &x, &g).unwrap())
                    / (2.0 * h);
                let denom = exact.abs().max(fd.abs()).max(1e-6);
                worst_rel = worst_rel.max(((exact - fd) / denom).abs());
            }
        }
    }

    // First optimizer step on a unit gradient, derived by hand.
    let mut model = MlpModel::from_weights(vec![Array2::zeros((1, 1))]).unwrap();
    let mut state = AdamState::new(&model);
    let grads = vec![Array2::from_elem((1, 1), 1.0)];
    adam_step(&mut model, &grads, &mut state, &AdamParams::default()).unwrap();
    let adam_gap = (model.weights()[0][(0, 0)] - (-0.0099999968377233398)).abs();

    // Averaging one client is the identity.
    let single = MlpModel::new(&[4, 2, 3], &mut rng).unwrap();
    let avg = fed_avg(std::slice::from_ref(&single), &[17.0]).unwrap();
    let identity_gap = weight_distance(&single, &avg);

    let pass = worst_row_sum <= 1e-9
        && worst_rel < 1e-4
        && adam_gap <= 1e-9
        && identity_gap <= 1e-12;
    report(
        7,
        "learning numerics",
        pass,
        &format!(
            "row-sum {worst_row_sum:.1e} (<= 1e-9), fd rel err {worst_rel:.1e} (< 1e-4), \
             first-step gap {adam_gap:.1e} (<= 1e-9), single-client gap {identity_gap:.1e} (<= 1e-12)"
        ),
    );
}

/// Fleet-scale configuration shared by the experiment-level checks: one
/// hundred vehicles in three coverage tiers, ten selected per round,
/// label-skewed shards, three budget types, small network for speed.
fn fleet_cfg(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        num_vehicles: 100,
        select_count: 10,
        num_types: 3,
        grid_levels: 9,
        max_rounds: 35,
        local_steps: 5,
        batch_size: 32,
        hidden_layers: vec![32, 16],
        // never stop early; the checks compare fixed-length round series
        convergence_tol: 1e-15,
        iid: false,
        num_samples: 6000,
        ..SimConfig::default()
    }
}

fn accuracies(outcome: &ExperimentOutcome) -> Vec<f64> {
    outcome.metrics.iter().map(|m| m.accuracy).collect()
}

fn rounds_to(acc: &[f64], target: f64) -> Option<usize> {
    acc.iter().position(|a| *a >= target)
}

#[test]
fn criterion_08_informed_selection_learns_faster_than_random() {
    let started = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let cfg = fleet_cfg(seed);
        let smart = run_experiment(&cfg, SchedulerKind::LocationInfoSignificance).unwrap();
        let random = run_experiment(&cfg, SchedulerKind::Random).unwrap();
        let acc_smart = accuracies(&smart);
        let acc_random = accuracies(&random);
        let best = acc_smart
            .iter()
            .chain(&acc_random)
            .fold(0.0f64, |a, b| a.max(*b));
        let target = 0.85 * best;
        let r_smart = rounds_to(&acc_smart, target);
        let r_random = rounds_to(&acc_random, target);
        let win = match (r_smart, r_random) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        wins += win as usize;
        lines.push(format!("seed {seed}: {r_smart:?} vs {r_random:?}"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = wins >= 8 && elapsed < 600.0;
    report(
        8,
        "informed selection reaches target accuracy first",
        pass,
        &format!(
            "{wins}/10 seeds strictly faster to 85% of best ({}), {elapsed:.0}s (< 600s)",
            lines.join("; ")
        ),
    );
}

#[test]
fn criterion_09_first_round_welfare_orders_by_scheduler_information() {
    let mut wins = 0;
    for seed in 100..110 {
        let cfg = SimConfig { max_rounds: 1, local_steps: 1, ..fleet_cfg(seed) };
        let welfare = |kind: SchedulerKind| -> f64 {
            let outcome = run_experiment(&cfg, kind).unwrap();
            let m = &outcome.metrics[0];
            m.social_welfare_per_type[cfg.num_types - 1]
        };
        let lis = welfare(SchedulerKind::LocationInfoSignificance);
        let ls = welfare(SchedulerKind::LocationSignificance);
        let random = welfare(SchedulerKind::Random);
        if lis >= ls && ls >= random {
            wins += 1;
        }
    }
    let pass = wins >= 8;
    report(
        9,
        "first-round welfare ordering",
        pass,
        &format!("{wins}/10 seeds with informed >= filtered >= random"),
    );
}

#[test]
fn criterion_10_net_profit_peaks_strictly_inside_the_horizon() {
    let mut wins = 0;
    let mut peaks = Vec::new();
    for seed in 200..210 {
        let cfg = SimConfig { max_rounds: 30, ..fleet_cfg(seed) };
        let outcome = run_experiment(&cfg, SchedulerKind::LocationInfoSignificance).unwrap();
        let profits: Vec<f64> = outcome.metrics.iter().map(|m| m.net_vsp_profit).collect();
        let argmax = profits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        peaks.push(argmax);
        if argmax > 0 && argmax < profits.len() - 1 {
            wins += 1;
        }
    }
    let pass = wins >= 8;
    report(
        10,
        "freshness-discounted profit peaks mid-run",
        pass,
        &format!("{wins}/10 seeds interior, peak rounds {peaks:?}"),
    );
}

#[test]
fn criterion_11_identical_inputs_emit_identical_metric_files() {
    let cfg = SimConfig {
        num_vehicles: 12,
        select_count: 3,
        num_types: 2,
        grid_levels: 5,
        max_rounds: 3,
        local_steps: 2,
        batch_size: 16,
        hidden_layers: vec![8],
        num_samples: 600,
        num_areas: 8,
        num_locations: 6,
        ..SimConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for (format, ext) in [(MetricsFormat::Csv, "csv"), (MetricsFormat::JsonLines, "jsonl")] {
        let mut bytes = Vec::new();
        for run in 0..2 {
            let outcome = run_experiment(&cfg, SchedulerKind::LocationInfoSignificance).unwrap();
            let path = dir.path().join(format!("run{run}.{ext}"));
            emit_metrics(&outcome.metrics, &path, format).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        let same = bytes[0] == bytes[1];
        pass &= same;
        detail.push(format!("{ext}: {}", if same { "byte-identical" } else { "differs" }));
    }
    report(11, "deterministic metric files", pass, &detail.join(", "));
}
