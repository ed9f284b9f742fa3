//! Contract design between the service provider and the learning vehicles.
//!
//! Each selected vehicle (the principal side of a multi-principal,
//! one-agent game) posts a menu of `(significance, payment)` offers, one row
//! per provider type. The provider (the agent) reacts by choosing, for every
//! type row, the proportion of each vehicle's offer it actually buys; those
//! payment proportions maximize its type-weighted satisfaction minus cost
//! under a per-type budget. Vehicles then revise their menus against the
//! provider's reaction on a discrete grid until no vehicle can improve its
//! expected profit, which yields a grid equilibrium of menus.
//!
//! Menus must survive screening: every provider type must weakly prefer its
//! own row (incentive compatibility) and earn a non-negative payoff
//! (individual rationality). The reduced feasibility check used during the
//! search keeps only the type-1 rationality constraint, the local downward
//! incentive constraints and significance monotonicity; [`verify_ir_ic`]
//! checks the full pairwise suite after the fact.

mod game;
mod p1;

pub use game::{
    best_response, brute_force_equilibrium, initial_menus, iterate_to_equilibrium, BestResponse,
    ContractGrid, EquilibriumOptions, EquilibriumPoint, EquilibriumResult, TraceRow,
};
pub use p1::{solve_payment_proportions, P1Options};

use crate::{Error, Result};

/// Provider-side parameters: the ascending type scale, the prior over
/// types, the satisfaction price and the budget ceiling. Type `j`'s budget
/// is `thetas[j] / thetas[last] * b_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct VspProfile {
    pub thetas: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Monetary value per unit of delivered significance, inside the
    /// square-root satisfaction term.
    pub lambda: f64,
    pub b_max: f64,
}

impl VspProfile {
    pub fn new(thetas: Vec<f64>, rhos: Vec<f64>, lambda: f64, b_max: f64) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::InvalidInput("need at least one provider type".into()));
        }
        if thetas.len() != rhos.len() {
            return Err(Error::InvalidInput(format!(
                "{} types but {} prior entries",
                thetas.len(),
                rhos.len()
            )));
        }
        if thetas.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::InvalidInput("type values must be positive".into()));
        }
        if thetas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidInput("type values must be ascending".into()));
        }
        if rhos.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidInput("type probabilities must be non-negative".into()));
        }
        let total: f64 = rhos.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("type probabilities sum to {total}, not 1")));
        }
        if !lambda.is_finite() || lambda <= 0.0 || !b_max.is_finite() || b_max < 0.0 {
            return Err(Error::InvalidInput("lambda must be positive and b_max non-negative".into()));
        }
        Ok(VspProfile { thetas, rhos, lambda, b_max })
    }

    /// Types `1..=j` with a uniform prior.
    pub fn with_uniform_types(num_types: usize, lambda: f64, b_max: f64) -> Result<Self> {
        let thetas = (1..=num_types).map(|j| j as f64).collect();
        let rhos = vec![1.0 / num_types as f64; num_types];
        VspProfile::new(thetas, rhos, lambda, b_max)
    }

    pub fn num_types(&self) -> usize {
        self.thetas.len()
    }

    /// Budget available to type `j` (0-based index).
    pub fn budget(&self, j: usize) -> f64 {
        self.thetas[j] / self.thetas[self.thetas.len() - 1] * self.b_max
    }
}

/// One vehicle's menu: per provider type, the offered information
/// significance and the payment asked for it. At any accepted solution both
/// sequences are non-decreasing in the type index.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractMenu {
    pub zeta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ContractMenu {
    pub fn new(zeta: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if zeta.len() != phi.len() {
            return Err(Error::InvalidInput("menu significance/payment lengths differ".into()));
        }
        if zeta.iter().chain(phi.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("menu entries must be non-negative".into()));
        }
        Ok(ContractMenu { zeta, phi })
    }

    pub fn num_types(&self) -> usize {
        self.zeta.len()
    }
}

/// Per-vehicle collection cost: monetary units spent per unit of delivered
/// significance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvCost {
    pub xi: f64,
}

/// The provider's reaction: payment proportions in `[0, 1]`, one row per
/// type, one column per vehicle. `degenerate[j]` marks rows whose optimum
/// is identically zero (the menu offers type `j` nothing worth buying).
#[derive(Debug, Clone, PartialEq)]
pub struct PaymentProportions {
    pub rows: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

impl PaymentProportions {
    pub fn num_types(&self) -> usize {
        self.rows.len()
    }
}

pub(crate) fn check_menus(menus: &[ContractMenu], num_types: usize) -> Result<()> {
    if menus.is_empty() {
        return Err(Error::InvalidInput("need at least one vehicle menu".into()));
    }
    for (n, menu) in menus.iter().enumerate() {
        if menu.num_types() != num_types {
            return Err(Error::InvalidInput(format!(
                "menu of vehicle {n} has {} rows, expected {num_types}",
                menu.num_types()
            )));
        }
        if menu.zeta.iter().chain(menu.phi.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "menu of vehicle {n} contains negative or non-finite entries"
            )));
        }
    }
    Ok(())
}

/// Satisfaction delivered by buying proportions `rho_row` of the
/// significance offers `zeta_row`: `lambda * sqrt(sum rho * zeta)`.
pub fn satisfaction(lambda: f64, zeta_row: &[f64], rho_row: &[f64]) -> f64 {
    let z: f64 = zeta_row.iter().zip(rho_row).map(|(z, r)| z * r).sum();
    lambda * z.max(0.0).sqrt()
}

/// Total payment for buying proportions `rho_row` of the payments `phi_row`.
pub fn cost(phi_row: &[f64], rho_row: &[f64]) -> f64 {
    phi_row.iter().zip(rho_row).map(|(p, r)| p * r).sum()
}

fn row_entries(menus: &[ContractMenu], j: usize) -> (Vec<f64>, Vec<f64>) {
    let zeta = menus.iter().map(|m| m.zeta[j]).collect();
    let phi = menus.iter().map(|m| m.phi[j]).collect();
    (zeta, phi)
}

/// Provider profit for type `j` under the given payment proportion row:
/// type-weighted satisfaction minus the total payment.
pub fn vsp_profit(j: usize, menus: &[ContractMenu], rho_row: &[f64], profile: &VspProfile) -> f64 {
    let (zeta, phi) = row_entries(menus, j);
    profile.thetas[j] * satisfaction(profile.lambda, &zeta, rho_row) - cost(&phi, rho_row)
}

/// Expected profit of vehicle `n` over the type prior: each type row pays
/// its bought proportion of the asked payment and costs `xi` per unit of
/// delivered significance.
pub fn expected_sv_profit(
    n: usize,
    menu: &ContractMenu,
    proportions: &PaymentProportions,
    profile: &VspProfile,
    cost_n: &SvCost,
) -> f64 {
    profile
        .rhos
        .iter()
        .enumerate()
        .map(|(j, rho_j)| {
            let bought = proportions.rows[j][n];
            rho_j * bought * (menu.phi[j] - cost_n.xi * menu.zeta[j])
        })
        .sum()
}

/// Social welfare realized when the provider is of type `j`: satisfaction
/// minus the vehicles' collection costs. Payments cancel between the two
/// sides.
pub fn social_welfare(
    j: usize,
    menus: &[ContractMenu],
    proportions: &PaymentProportions,
    costs: &[SvCost],
    profile: &VspProfile,
) -> f64 {
    let (zeta, _) = row_entries(menus, j);
    let rho_row = &proportions.rows[j];
    let collection: f64 = zeta
        .iter()
        .zip(rho_row.iter())
        .zip(costs)
        .map(|((z, r), c)| c.xi * z * r)
        .sum();
    profile.thetas[j] * satisfaction(profile.lambda, &zeta, rho_row) - collection
}

/// Satisfaction and payment totals per type row, shared by the screening
/// checks below.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RowValue {
    /// `sqrt(sum_n rho * zeta)`, without the lambda or theta factor.
    pub root: f64,
    pub paid: f64,
}

pub(crate) fn row_values(
    menus: &[ContractMenu],
    proportions: &PaymentProportions,
    num_types: usize,
) -> Vec<RowValue> {
    (0..num_types)
        .map(|j| {
            let rho_row = &proportions.rows[j];
            let mut z = 0.0;
            let mut paid = 0.0;
            for (n, menu) in menus.iter().enumerate() {
                z += rho_row[n] * menu.zeta[j];
                paid += rho_row[n] * menu.phi[j];
            }
            RowValue { root: z.max(0.0).sqrt(), paid }
        })
        .collect()
}

/// Payoff of a type-`j` provider taking the row designed for type `k`.
fn payoff(profile: &VspProfile, values: &[RowValue], j: usize, k: usize) -> f64 {
    profile.thetas[j] * profile.lambda * values[k].root - values[k].paid
}

#[derive(Debug, Clone)]
pub struct IrIcReport {
    /// Payoff of each type at its own row; individual rationality holds when
    /// every entry is non-negative.
    pub ir: Vec<f64>,
    /// `ic_margins[j][k]`: how much type `j` prefers its own row over the
    /// row meant for type `k` (diagonal is zero).
    pub ic_margins: Vec<Vec<f64>>,
    pub ok: bool,
    pub tol: f64,
}

impl IrIcReport {
    pub fn min_ir(&self) -> f64 {
        self.ir.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_ic_margin(&self) -> f64 {
        self.ic_margins
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Full screening audit: individual rationality for every type and the
/// complete pairwise incentive-compatibility matrix.
pub fn verify_ir_ic(
    menus: &[ContractMenu],
    proportions: &PaymentProportions,
    profile: &VspProfile,
    tol: f64,
) -> Result<IrIcReport> {
    let j_types = profile.num_types();
    check_menus(menus, j_types)?;
    if proportions.num_types() != j_types {
        return Err(Error::InvalidInput("proportions row count differs from type count".into()));
    }
    let values = row_values(menus, proportions, j_types);
    let ir: Vec<f64> = (0..j_types).map(|j| payoff(profile, &values, j, j)).collect();
    let ic_margins: Vec<Vec<f64>> = (0..j_types)
        .map(|j| (0..j_types).map(|k| ir[j] - payoff(profile, &values, j, k)).collect())
        .collect();
    let ok = ir.iter().all(|v| *v >= -tol)
        && ic_margins.iter().flatten().all(|v| *v >= -tol);
    Ok(IrIcReport { ir, ic_margins, ok, tol })
}

#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub zeta_ok: bool,
    pub phi_ok: bool,
    pub profit_ok: bool,
    pub ok: bool,
    /// Largest observed violation across all three sequences (0 when clean).
    pub worst_violation: f64,
}

/// Checks that offered significance, asked payment and realized provider
/// payoff are all non-decreasing in the type index.
pub fn check_monotonicity(
    menus: &[ContractMenu],
    proportions: &PaymentProportions,
    profile: &VspProfile,
    tol: f64,
) -> Result<MonotonicityReport> {
    let j_types = profile.num_types();
    check_menus(menus, j_types)?;
    let values = row_values(menus, proportions, j_types);
    let mut worst: [f64; 3] = [0.0; 3];
    for j in 1..j_types {
        for menu in menus {
            worst[0] = worst[0].max(menu.zeta[j - 1] - menu.zeta[j]);
            worst[1] = worst[1].max(menu.phi[j - 1] - menu.phi[j]);
        }
        let drop =
            payoff(profile, &values, j - 1, j - 1) - payoff(profile, &values, j, j);
        worst[2] = worst[2].max(drop);
    }
    let [zeta_v, phi_v, profit_v] = worst;
    let report = MonotonicityReport {
        zeta_ok: zeta_v <= tol,
        phi_ok: phi_v <= tol,
        profit_ok: profit_v <= tol,
        ok: zeta_v <= tol && phi_v <= tol && profit_v <= tol,
        worst_violation: zeta_v.max(phi_v).max(profit_v),
    };
    Ok(report)
}

/// Outcome of a feasibility check together with the exact number of
/// constraint evaluations it performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeasibilityCheck {
    pub feasible: bool,
    pub evaluations: usize,
}

/// Full screening feasibility: per-type budgets, individual rationality for
/// every type, and every pairwise incentive constraint. Evaluates exactly
/// `J + J + J*(J-1)` constraints.
pub fn p2_feasibility(
    menus: &[ContractMenu],
    proportions: &PaymentProportions,
    profile: &VspProfile,
    tol: f64,
) -> FeasibilityCheck {
    let j_types = profile.num_types();
    let values = row_values(menus, proportions, j_types);
    let mut feasible = true;
    let mut evaluations = 0;
    for j in 0..j_types {
        evaluations += 1;
        feasible &= values[j].paid <= profile.budget(j) + tol;
    }
    for j in 0..j_types {
        evaluations += 1;
        feasible &= payoff(profile, &values, j, j) >= -tol;
    }
    for j in 0..j_types {
        for k in 0..j_types {
            if k == j {
                continue;
            }
            evaluations += 1;
            feasible &=
                payoff(profile, &values, j, j) >= payoff(profile, &values, j, k) - tol;
        }
    }
    FeasibilityCheck { feasible, evaluations }
}

/// Reduced screening feasibility used inside the menu search: per-type
/// budgets, type-1 individual rationality, local downward incentive
/// constraints, and significance monotonicity between adjacent types.
/// Evaluates exactly `J + 1 + (J-1) + (J-1) = 3J - 1` constraints; the
/// monotonicity constraint between two adjacent types is one vector
/// constraint over all vehicles.
pub fn p3_feasibility(
    menus: &[ContractMenu],
    proportions: &PaymentProportions,
    profile: &VspProfile,
    tol: f64,
) -> FeasibilityCheck {
    let j_types = profile.num_types();
    let values = row_values(menus, proportions, j_types);
    let mut feasible = true;
    let mut evaluations = 0;
    for j in 0..j_types {
        evaluations += 1;
        feasible &= values[j].paid <= profile.budget(j) + tol;
    }
    evaluations += 1;
    feasible &= payoff(profile, &values, 0, 0) >= -tol;
    for j in 1..j_types {
        evaluations += 1;
        feasible &= payoff(profile, &values, j, j) >= payoff(profile, &values, j, j - 1) - tol;
    }
    for j in 1..j_types {
        evaluations += 1;
        feasible &= menus.iter().all(|m| m.zeta[j] >= m.zeta[j - 1] - tol);
    }
    FeasibilityCheck { feasible, evaluations }
}
