//! Menu search: per-vehicle best responses on a discrete contract grid and
//! the sweep iteration that drives them to a grid equilibrium.
//!
//! A vehicle's expected profit is a sum of independent per-type terms once
//! the provider's payment proportions are frozen, while the screening
//! constraints couple at most adjacent type rows (budgets and type-1
//! rationality are per-row; the local incentive and monotonicity
//! constraints link row `j` to row `j-1`). The best response is therefore
//! an exact dynamic program over type stages with one `(significance,
//! payment)` grid point per stage, rather than a scan of the full menu
//! product space. Ties are broken toward the lexicographically smallest
//! grid indices so runs are reproducible.
//!
//! Responses are scored against frozen payment proportions, but the
//! provider re-solves its reaction after every accepted move, and a menu
//! tuned to the frozen forecast can break the adjacent-type incentive
//! constraints once the reaction answers the menus actually posted. The
//! sweep therefore re-checks the joint state at the re-solved reaction
//! before keeping a profit-improving move; see
//! [`iterate_to_equilibrium`]. When the incentive windows between adjacent
//! rows are narrower than a payment grid step the grid program goes empty;
//! the payment column is then re-priced continuously along the best
//! significance path instead of giving up.

use super::p1::{solve_payment_proportions, solve_row, P1Options};
use super::{
    check_menus, expected_sv_profit, vsp_profit, ContractMenu, PaymentProportions, SvCost,
    VspProfile,
};
use crate::{Error, Result};

/// Slack used when evaluating screening constraints on grid candidates;
/// well below the 1e-9 tolerance of the downstream audits.
const FTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractGrid {
    /// Grid levels per menu dimension (both significance and payment).
    pub levels_per_dim: usize,
    /// Payment axis upper bound as a multiple of the vehicle's
    /// significance-proportional asking price `upsilon * cap`.
    pub phi_headroom: f64,
}

impl Default for ContractGrid {
    fn default() -> Self {
        ContractGrid { levels_per_dim: 21, phi_headroom: 2.0 }
    }
}

impl ContractGrid {
    fn validate(&self) -> Result<()> {
        if self.levels_per_dim < 2 {
            return Err(Error::InvalidInput("contract grid needs at least 2 levels".into()));
        }
        if !self.phi_headroom.is_finite() || self.phi_headroom <= 0.0 {
            return Err(Error::InvalidInput("phi_headroom must be positive".into()));
        }
        Ok(())
    }

    fn zeta_levels(&self, cap: f64) -> Vec<f64> {
        let g = self.levels_per_dim;
        (0..g).map(|i| cap * i as f64 / (g - 1) as f64).collect()
    }

    fn phi_levels(&self, cap: f64, upsilon: f64) -> Vec<f64> {
        let top = upsilon * cap * self.phi_headroom;
        let g = self.levels_per_dim;
        (0..g).map(|i| top * i as f64 / (g - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumOptions {
    pub grid: ContractGrid,
    /// Minimum profit improvement for a menu update to be accepted, and the
    /// slack in the equilibrium definition.
    pub gamma: f64,
    pub max_sweeps: usize,
    pub p1: P1Options,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            grid: ContractGrid::default(),
            gamma: 1e-6,
            max_sweeps: 200,
            p1: P1Options::default(),
        }
    }
}

/// Opening menus: significance scaled by type rank up to the vehicle's
/// realized cap, payment proportional to significance at rate `upsilon`.
pub fn initial_menus(caps: &[f64], upsilon: f64, profile: &VspProfile) -> Vec<ContractMenu> {
    let theta_top = profile.thetas[profile.num_types() - 1];
    caps.iter()
        .map(|cap| {
            let zeta: Vec<f64> =
                profile.thetas.iter().map(|t| t / theta_top * cap).collect();
            let phi = zeta.iter().map(|z| upsilon * z).collect();
            ContractMenu { zeta, phi }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub menu: ContractMenu,
    /// Expected profit of `menu` under the frozen payment proportions.
    pub profit: f64,
    /// True when the menu was replaced: a candidate beats the incumbent by
    /// more than gamma, or the incumbent itself violates the screening
    /// constraints and is replaced by a feasible menu (even a worse one).
    pub improved: bool,
    /// False when no candidate menu satisfied the screening constraints;
    /// the incumbent is kept either way.
    pub any_feasible: bool,
    /// Whether the incumbent menu satisfies the screening constraints under
    /// the frozen proportions. Rivals' moves in earlier sweeps can strand an
    /// incumbent outside the feasible set.
    pub incumbent_feasible: bool,
}

struct StageData {
    /// This vehicle's payment proportion in the row.
    r: f64,
    /// Proportion-weighted significance contributed by the other vehicles.
    other_z: f64,
    /// Proportion-weighted payment collected by the other vehicles.
    other_paid: f64,
    budget: f64,
}

/// Continuous re-pricing of the payment column along a fixed significance
/// path, maximizing this vehicle's expected profit subject to the screening
/// constraints on the aggregate outcome. The aggregate payment increment
/// between adjacent rows must land in `[theta_{j-1}*lambda*dR,
/// theta_j*lambda*dR]`; those windows shrink with the root curvature and
/// routinely fall between two payment grid levels, which is why the grid
/// search alone cannot always reach (or even stay inside) the feasible set.
/// Payments enter every constraint and the objective linearly, so along one
/// significance path the optimum is the pointwise-maximal payment chain; it
/// is found here by a forward pass that raises each row's aggregate payment
/// as far as a minimal completion of the remaining rows stays feasible.
/// Returns the payment column and the expected profit, or None when even
/// continuous payments cannot satisfy the constraints (the violations sit
/// in rows whose payments this vehicle has no share of).
fn polish_payments(
    stages: &[StageData],
    zeta_path: &[f64],
    profile: &VspProfile,
    lambda: f64,
    xi: f64,
    phi_max: f64,
) -> Option<(Vec<f64>, f64)> {
    let j_types = stages.len();
    let roots: Vec<f64> = stages
        .iter()
        .zip(zeta_path)
        .map(|(s, z)| (s.other_z + s.r * z).max(0.0).sqrt())
        .collect();
    // Payment-increment windows per adjacent pair; index 0 is unused.
    let mut lo_win = vec![0.0; j_types];
    let mut hi_win = vec![0.0; j_types];
    for k in 1..j_types {
        let dr = roots[k] - roots[k - 1];
        if dr < 0.0 {
            // Both incentive directions cannot hold across a falling root.
            return None;
        }
        lo_win[k] = profile.thetas[k - 1] * lambda * dr;
        hi_win[k] = profile.thetas[k] * lambda * dr;
    }
    // Rows the vehicle holds no share of pin the aggregate payment to the
    // rivals' total. Propagate those pins backward through the increment
    // windows so earlier choices already respect them.
    const INF: f64 = f64::INFINITY;
    let mut pin_lo = vec![-INF; j_types];
    let mut pin_hi = vec![INF; j_types];
    for k in (0..j_types - 1).rev() {
        let mut lo = pin_lo[k + 1] - hi_win[k + 1];
        let mut hi = pin_hi[k + 1] - lo_win[k + 1];
        if stages[k + 1].r <= 0.0 {
            lo = lo.max(stages[k + 1].other_paid - hi_win[k + 1]);
            hi = hi.min(stages[k + 1].other_paid - lo_win[k + 1]);
        }
        pin_lo[k] = lo;
        pin_hi[k] = hi;
    }

    // Least feasible continuation from row k onward given the previous
    // row's aggregate payment and this vehicle's posted price there. If the
    // minimal chain breaks a cap no completion exists from that prefix.
    let min_completion = |k0: usize, mut p_prev: f64, mut phi_prev: f64| -> bool {
        for k in k0..j_types {
            let st = &stages[k];
            let mut upper = st.budget.min(p_prev + hi_win[k]).min(pin_hi[k]);
            if st.r > 0.0 {
                upper = upper.min(st.other_paid + st.r * phi_max);
                let p = st
                    .other_paid
                    .max(p_prev + lo_win[k])
                    .max(st.other_paid + st.r * phi_prev)
                    .max(pin_lo[k]);
                if p > upper {
                    return false;
                }
                phi_prev = (p - st.other_paid) / st.r;
                p_prev = p;
            } else {
                let p = st.other_paid;
                if p < (p_prev + lo_win[k]).max(pin_lo[k]) || p > upper {
                    return false;
                }
                p_prev = p;
            }
        }
        true
    };

    let mut phis = vec![0.0; j_types];
    let mut paids = vec![0.0; j_types];
    let mut p_prev = 0.0;
    let mut phi_prev = 0.0;
    for k in 0..j_types {
        let st = &stages[k];
        let mut upper = st.budget.min(pin_hi[k]);
        if k == 0 {
            // Rationality of the lowest type; the downward chain extends it
            // to every other row.
            upper = upper.min(profile.thetas[0] * lambda * roots[0]);
        } else {
            upper = upper.min(p_prev + hi_win[k]);
        }
        if st.r > 0.0 {
            upper = upper.min(st.other_paid + st.r * phi_max);
            let lower = if k == 0 {
                st.other_paid.max(pin_lo[k])
            } else {
                st.other_paid
                    .max(p_prev + lo_win[k])
                    .max(st.other_paid + st.r * phi_prev)
                    .max(pin_lo[k])
            };
            if lower > upper || !min_completion(k + 1, lower, (lower - st.other_paid) / st.r) {
                return None;
            }
            let mut lo = lower;
            let mut hi = upper;
            if min_completion(k + 1, hi, (hi - st.other_paid) / st.r) {
                lo = hi;
            } else {
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if min_completion(k + 1, mid, (mid - st.other_paid) / st.r) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
            p_prev = lo;
            phi_prev = (lo - st.other_paid) / st.r;
        } else {
            let p = st.other_paid;
            let below =
                if k == 0 { p < pin_lo[k] } else { p < (p_prev + lo_win[k]).max(pin_lo[k]) };
            if below || p > upper {
                return None;
            }
            p_prev = p;
            // phi_prev carries over: an unbought row keeps the previous
            // price so the posted column stays monotone.
        }
        phis[k] = phi_prev;
        paids[k] = p_prev;
    }

    // The search never emits an unchecked menu: re-verify the exact
    // constraints the audits will apply.
    for k in 0..j_types {
        if !phis[k].is_finite() || phis[k] < 0.0 || phis[k] > phi_max + FTOL {
            return None;
        }
        // The reaction solver refuses free significance outright.
        if zeta_path[k] > 0.0 && phis[k] == 0.0 {
            return None;
        }
        if paids[k] > stages[k].budget + FTOL {
            return None;
        }
        if k == 0 {
            if profile.thetas[0] * lambda * roots[0] - paids[0] < -FTOL {
                return None;
            }
        } else {
            let d = paids[k] - paids[k - 1];
            if d < lo_win[k] - FTOL || d > hi_win[k] + FTOL || phis[k] < phis[k - 1] {
                return None;
            }
        }
    }
    let profit = (0..j_types)
        .map(|k| profile.rhos[k] * stages[k].r * (phis[k] - xi * zeta_path[k]))
        .sum();
    Some((phis, profit))
}

/// Best menu for vehicle `n` against fixed rival menus and frozen payment
/// proportions. Searches every grid menu with non-decreasing significance
/// and payment rows that keeps the joint menus screening-feasible under the
/// frozen proportions; when no grid point fits the incentive windows,
/// re-prices the best significance path continuously. Returns the incumbent
/// when it is feasible and nothing improves on it by more than `gamma`, or
/// when no candidate is feasible at all.
pub fn best_response(
    n: usize,
    menus: &[ContractMenu],
    proportions: &PaymentProportions,
    profile: &VspProfile,
    cost_n: &SvCost,
    cap_n: f64,
    upsilon: f64,
    grid: &ContractGrid,
    gamma: f64,
) -> Result<BestResponse> {
    let j_types = profile.num_types();
    check_menus(menus, j_types)?;
    grid.validate()?;
    if n >= menus.len() {
        return Err(Error::InvalidInput(format!("vehicle index {n} out of range")));
    }
    if proportions.num_types() != j_types {
        return Err(Error::InvalidInput("proportions row count differs from type count".into()));
    }
    if !cap_n.is_finite() || cap_n < 0.0 {
        return Err(Error::InvalidInput(format!("significance cap {cap_n} must be non-negative")));
    }

    let g = grid.levels_per_dim;
    let states = g * g;
    let zg = grid.zeta_levels(cap_n);
    let pg = grid.phi_levels(cap_n, upsilon);
    let lambda = profile.lambda;

    let stages: Vec<StageData> = (0..j_types)
        .map(|j| {
            let row = &proportions.rows[j];
            let mut other_z = 0.0;
            let mut other_paid = 0.0;
            for (m, menu) in menus.iter().enumerate() {
                if m != n {
                    other_z += row[m] * menu.zeta[j];
                    other_paid += row[m] * menu.phi[j];
                }
            }
            StageData { r: row[n], other_z, other_paid, budget: profile.budget(j) }
        })
        .collect();

    // Per stage and state: the root term of the row satisfaction, the total
    // payment, this vehicle's profit contribution and the per-row
    // feasibility (budget everywhere, rationality on the first row, and no
    // free significance so the menus stay inside the reaction solver's
    // domain).
    let state = |iz: usize, ip: usize| iz * g + ip;
    let mut root = vec![0.0; j_types * states];
    let mut paid = vec![0.0; j_types * states];
    let mut reward = vec![0.0; j_types * states];
    let mut ok = vec![false; j_types * states];
    for (j, stage) in stages.iter().enumerate() {
        for iz in 0..g {
            let z = stage.other_z + stage.r * zg[iz];
            for ip in 0..g {
                let s = j * states + state(iz, ip);
                root[s] = z.max(0.0).sqrt();
                paid[s] = stage.other_paid + stage.r * pg[ip];
                reward[s] = profile.rhos[j] * stage.r * (pg[ip] - cost_n.xi * zg[iz]);
                let mut fine = paid[s] <= stage.budget + FTOL;
                // A row offers significance for a price or stays empty;
                // one-sided rows either crash the reaction solver or charge
                // for nothing.
                fine &= (zg[iz] > 0.0) == (pg[ip] > 0.0);
                if j == 0 {
                    fine &= profile.thetas[0] * lambda * root[s] - paid[s] >= -FTOL;
                }
                ok[s] = fine;
            }
        }
    }

    // Backward pass: value[j][s] is the best achievable profit over rows
    // j..J given row j uses state s. Scanning successors in index order
    // with a strict comparison keeps ties on the smallest indices. With
    // `windows` set, successors must also satisfy the adjacent incentive
    // constraints in both directions: type j+1 must not prefer this row's
    // outcome, and type j must not prefer the next row's. Both plus
    // monotone rows give the full pairwise matrix by telescoping. Without
    // `windows` the pass only ranks significance paths; the payment column
    // is then re-priced continuously.
    const NEG: f64 = f64::NEG_INFINITY;
    let last = j_types - 1;
    let run_dp = |windows: bool| -> (Vec<usize>, usize, f64) {
        let valid = &ok;
        let mut value = vec![NEG; j_types * states];
        let mut choice = vec![usize::MAX; j_types * states];
        for s in 0..states {
            if valid[last * states + s] {
                value[last * states + s] = reward[last * states + s];
            }
        }
        for j in (0..last).rev() {
            let theta_next = profile.thetas[j + 1];
            for iz in 0..g {
                for ip in 0..g {
                    let s = state(iz, ip);
                    if !valid[j * states + s] {
                        continue;
                    }
                    let theta_own = profile.thetas[j];
                    let down_rhs =
                        theta_next * lambda * root[j * states + s] - paid[j * states + s];
                    let up_rhs = theta_own * lambda * root[j * states + s] - paid[j * states + s];
                    let mut best = NEG;
                    let mut best_next = usize::MAX;
                    for iz2 in iz..g {
                        for ip2 in ip..g {
                            let s2 = state(iz2, ip2);
                            let v = value[(j + 1) * states + s2];
                            if v <= best {
                                continue;
                            }
                            if windows {
                                let next_root = root[(j + 1) * states + s2];
                                let next_paid = paid[(j + 1) * states + s2];
                                if theta_next * lambda * next_root - next_paid < down_rhs - FTOL
                                    || theta_own * lambda * next_root - next_paid > up_rhs + FTOL
                                {
                                    continue;
                                }
                            }
                            best = v;
                            best_next = s2;
                        }
                    }
                    if best_next != usize::MAX {
                        value[j * states + s] = reward[j * states + s] + best;
                        choice[j * states + s] = best_next;
                    }
                }
            }
        }
        let mut best_start = usize::MAX;
        let mut best_total = NEG;
        for s in 0..states {
            if value[s] > best_total {
                best_total = value[s];
                best_start = s;
            }
        }
        (choice, best_start, best_total)
    };
    let extract = |choice: &[usize], start: usize| -> (Vec<f64>, Vec<f64>) {
        let mut zeta = Vec::with_capacity(j_types);
        let mut phi = Vec::with_capacity(j_types);
        let mut s = start;
        for j in 0..j_types {
            zeta.push(zg[s / g]);
            phi.push(pg[s % g]);
            if j < last {
                s = choice[j * states + s];
            }
        }
        (zeta, phi)
    };

    // The incumbent's own feasibility under the frozen reaction: rivals'
    // earlier moves may have broken constraints the incumbent once met.
    let incumbent_feasible = {
        let mut fine = true;
        let mut prev = (0.0, 0.0); // (root, paid) of the previous row
        for (j, stage) in stages.iter().enumerate() {
            let z = stage.other_z + stage.r * menus[n].zeta[j];
            let paid_j = stage.other_paid + stage.r * menus[n].phi[j];
            let root_j = z.max(0.0).sqrt();
            fine &= paid_j <= stage.budget + FTOL;
            if j == 0 {
                fine &= profile.thetas[0] * lambda * root_j - paid_j >= -FTOL;
            } else {
                let own = profile.thetas[j] * lambda * root_j - paid_j;
                let down = profile.thetas[j] * lambda * prev.0 - prev.1;
                fine &= own >= down - FTOL;
                let up_own = profile.thetas[j - 1] * lambda * prev.0 - prev.1;
                let up_dev = profile.thetas[j - 1] * lambda * root_j - paid_j;
                fine &= up_dev <= up_own + FTOL;
                fine &= menus[n].zeta[j] >= menus[n].zeta[j - 1] - FTOL;
                fine &= menus[n].phi[j] >= menus[n].phi[j - 1] - FTOL;
            }
            prev = (root_j, paid_j);
        }
        fine
    };

    let incumbent_profit = expected_sv_profit(n, &menus[n], proportions, profile, cost_n);

    // A vehicle the provider currently buys nothing from earns zero under
    // the frozen proportions no matter what it posts; every candidate ties
    // and none of the ties mean anything. Keep the incumbent rather than
    // "repair" toward the all-zero menu, which the provider can never
    // re-engage; a rival's move is what re-opens this vehicle's market.
    let degenerate = stages.iter().all(|st| st.r <= 0.0);

    // Best candidate: the grid program's menu when the incentive windows
    // admit any grid point. Otherwise rank significance paths without the
    // windows and re-price the payment column continuously along the path
    // from every start state, keeping the best feasible result;
    // quantization often leaves no grid point inside a window even though
    // continuous payments fit, and the reward-maximal path is not always
    // the one whose pinned rows can be re-priced.
    let (choice, best_start, best_total) = run_dp(true);
    let candidate: Option<(ContractMenu, f64)> = if degenerate {
        None
    } else if best_start != usize::MAX {
        let (zeta, phi) = extract(&choice, best_start);
        Some((ContractMenu { zeta, phi }, best_total))
    } else {
        let (rchoice, _, _) = run_dp(false);
        let phi_max = *pg.last().unwrap();
        let mut best: Option<(ContractMenu, f64)> = None;
        for s in 0..states {
            if j_types > 1 && rchoice[s] == usize::MAX {
                continue;
            }
            let (zeta, _) = extract(&rchoice, s);
            if let Some((phis, profit)) =
                polish_payments(&stages, &zeta, profile, lambda, cost_n.xi, phi_max)
            {
                if best.as_ref().is_none_or(|(_, b)| profit > *b) {
                    best = Some((ContractMenu { zeta, phi: phis }, profit));
                }
            }
        }
        best
    };

    match candidate {
        None => Ok(BestResponse {
            // Nothing this vehicle can post repairs the constraints: the
            // violations sit in rows it holds no payment share of. Keep the
            // incumbent and flag it; a rival's move has to open the set.
            menu: menus[n].clone(),
            profit: incumbent_profit,
            improved: false,
            any_feasible: false,
            incumbent_feasible,
        }),
        Some((menu, profit)) => {
            if incumbent_feasible && profit <= incumbent_profit + gamma {
                return Ok(BestResponse {
                    menu: menus[n].clone(),
                    profit: incumbent_profit,
                    improved: false,
                    any_feasible: true,
                    incumbent_feasible,
                });
            }
            // A re-priced candidate can reproduce the incumbent exactly;
            // report that as no change so the sweep can settle.
            let improved = menu.zeta != menus[n].zeta || menu.phi != menus[n].phi;
            Ok(BestResponse { menu, profit, improved, any_feasible: true, incumbent_feasible })
        }
    }
}

/// One menu revision per vehicle and sweep, recorded after the sweep with
/// the payment proportions the decisions were made under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub sweep: usize,
    pub sv: usize,
    pub type_index: usize,
    pub zeta: f64,
    pub phi: f64,
    /// Expected profit of the vehicle's whole menu.
    pub sv_profit: f64,
    /// Provider profit of this type row across all vehicles.
    pub vsp_profit: f64,
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub menus: Vec<ContractMenu>,
    pub proportions: PaymentProportions,
    pub sv_profits: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// Screening feasibility of the whole posted state under the given
/// reaction: row budgets, rationality of the lowest type and both adjacent
/// incentive directions on the aggregate outcome, plus per-menu
/// monotonicity. This is the condition every audit checks at the end; the
/// sweep uses it to decide whether a move tuned to the frozen proportions
/// survives the provider's actual re-solve.
fn screening_feasible(
    menus: &[ContractMenu],
    props: &PaymentProportions,
    profile: &VspProfile,
) -> bool {
    let j_types = profile.num_types();
    let mut prev = (0.0, 0.0); // (root, paid) of the previous row
    for j in 0..j_types {
        let row = &props.rows[j];
        let mut z = 0.0;
        let mut paid = 0.0;
        for (m, menu) in menus.iter().enumerate() {
            z += row[m] * menu.zeta[j];
            paid += row[m] * menu.phi[j];
        }
        let root = z.max(0.0).sqrt();
        if paid > profile.budget(j) + FTOL {
            return false;
        }
        if j == 0 {
            if profile.thetas[0] * profile.lambda * root - paid < -FTOL {
                return false;
            }
        } else {
            let own = profile.thetas[j] * profile.lambda * root - paid;
            let down = profile.thetas[j] * profile.lambda * prev.0 - prev.1;
            if own < down - FTOL {
                return false;
            }
            let up_own = profile.thetas[j - 1] * profile.lambda * prev.0 - prev.1;
            let up_dev = profile.thetas[j - 1] * profile.lambda * root - paid;
            if up_dev > up_own + FTOL {
                return false;
            }
            if menus
                .iter()
                .any(|m| m.zeta[j] < m.zeta[j - 1] - FTOL || m.phi[j] < m.phi[j - 1] - FTOL)
            {
                return false;
            }
        }
        prev = (root, paid);
    }
    true
}

/// Alternates the provider reaction and per-vehicle best responses (in
/// ascending vehicle order) from the proportional opening menus until a
/// full sweep accepts no update, i.e. until no vehicle can improve its
/// expected profit by more than `gamma` given the others' menus and the
/// reaction to the current menus.
pub fn iterate_to_equilibrium(
    caps: &[f64],
    costs: &[SvCost],
    upsilon: f64,
    profile: &VspProfile,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumResult> {
    if caps.is_empty() || caps.len() != costs.len() {
        return Err(Error::InvalidInput(format!(
            "{} significance caps for {} vehicle costs",
            caps.len(),
            costs.len()
        )));
    }
    if caps.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidInput("significance caps must be non-negative".into()));
    }
    if !upsilon.is_finite() || upsilon <= 0.0 {
        return Err(Error::InvalidInput("upsilon must be positive".into()));
    }
    opts.grid.validate()?;

    let n_sv = caps.len();
    let mut menus = initial_menus(caps, upsilon, profile);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    let mut last_props: Option<PaymentProportions> = None;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut any_update = false;
        let mut props = solve_payment_proportions(&menus, profile, &opts.p1)?;
        let mut dirty = false;
        for n in 0..n_sv {
            // Alternate strictly: every response is scored against the
            // reaction to the menus as they stand, so a move by vehicle
            // n-1 cannot strand vehicle n against stale proportions.
            if dirty {
                props = solve_payment_proportions(&menus, profile, &opts.p1)?;
                dirty = false;
            }
            let br = best_response(
                n, &menus, &props, profile, &costs[n], caps[n], upsilon, &opts.grid, opts.gamma,
            )?;
            if !br.improved {
                continue;
            }
            if br.incumbent_feasible {
                // A profit improvement is scored against the frozen
                // reaction but lives or dies at the re-solved one: accept
                // it only if the joint state it creates stays
                // screening-feasible once the provider answers it. A move
                // that fails this would be profitable on paper and would
                // strand the whole market in the next sweep.
                let old = std::mem::replace(&mut menus[n], br.menu);
                let new_props = solve_payment_proportions(&menus, profile, &opts.p1)?;
                if screening_feasible(&menus, &new_props, profile) {
                    props = new_props;
                    any_update = true;
                } else {
                    menus[n] = old;
                }
            } else {
                // Repairs are never gated: the incumbent state is already
                // broken and staying put cannot be safer than the best
                // feasible candidate.
                menus[n] = br.menu;
                any_update = true;
                dirty = true;
            }
        }
        if dirty {
            props = solve_payment_proportions(&menus, profile, &opts.p1)?;
        }
        for n in 0..n_sv {
            let mu = expected_sv_profit(n, &menus[n], &props, profile, &costs[n]);
            for j in 0..profile.num_types() {
                trace.push(TraceRow {
                    sweep: sweeps,
                    sv: n,
                    type_index: j,
                    zeta: menus[n].zeta[j],
                    phi: menus[n].phi[j],
                    sv_profit: mu,
                    vsp_profit: vsp_profit(j, &menus, &props.rows[j], profile),
                });
            }
        }
        last_props = Some(props);
        if !any_update {
            converged = true;
            break;
        }
    }

    // On convergence the sweep's proportions already answer the final
    // menus; otherwise re-solve so the output is self-consistent.
    let proportions = match (converged, last_props) {
        (true, Some(p)) => p,
        _ => solve_payment_proportions(&menus, profile, &opts.p1)?,
    };
    let sv_profits = (0..n_sv)
        .map(|n| expected_sv_profit(n, &menus[n], &proportions, profile, &costs[n]))
        .collect();
    Ok(EquilibriumResult { menus, proportions, sv_profits, sweeps, converged, trace })
}

#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    pub menus: Vec<ContractMenu>,
    pub profits: Vec<f64>,
    pub proportions: PaymentProportions,
}

/// Exhaustively enumerates joint grid menu profiles and returns every
/// profile that is screening-feasible under its own provider reaction and
/// where no vehicle has a unilateral deviation (grid menu or extra
/// candidate) that improves its profit by more than `gamma` under the
/// frozen reaction, is feasible there, and leaves the joint state feasible
/// once the provider re-solves — the same acceptance test the sweep
/// iteration applies to a move. `extras` supplies additional off-grid
/// candidates per vehicle (for example the opening menus, which the sweep
/// can keep without ever snapping to the grid). Refuses instances beyond 2
/// vehicles, 2 types or 5 grid levels.
pub fn brute_force_equilibrium(
    caps: &[f64],
    costs: &[SvCost],
    upsilon: f64,
    profile: &VspProfile,
    grid: &ContractGrid,
    gamma: f64,
    extras: &[Vec<ContractMenu>],
    p1: &P1Options,
) -> Result<Vec<EquilibriumPoint>> {
    let n_sv = caps.len();
    let j_types = profile.num_types();
    grid.validate()?;
    if n_sv == 0 || n_sv > 2 {
        return Err(Error::TooLarge(format!("exhaustive search supports 1..=2 vehicles, got {n_sv}")));
    }
    if j_types > 2 {
        return Err(Error::TooLarge(format!("exhaustive search supports 1..=2 types, got {j_types}")));
    }
    if grid.levels_per_dim > 5 {
        return Err(Error::TooLarge(format!(
            "exhaustive search supports at most 5 grid levels, got {}",
            grid.levels_per_dim
        )));
    }
    if caps.len() != costs.len() {
        return Err(Error::InvalidInput("caps and costs lengths differ".into()));
    }
    if !extras.is_empty() && extras.len() != n_sv {
        return Err(Error::InvalidInput("need one extra-candidate list per vehicle".into()));
    }

    // Candidate menus per vehicle: grid menus with non-decreasing
    // significance and payment rows, plus the extras. Rows are tagged with
    // stable ids so provider reactions can be cached per (type, row ids)
    // tuple.
    let g = grid.levels_per_dim;
    let mut cands: Vec<Vec<ContractMenu>> = Vec::with_capacity(n_sv);
    let mut row_ids: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n_sv);
    for n in 0..n_sv {
        let zg = grid.zeta_levels(caps[n]);
        let pg = grid.phi_levels(caps[n], upsilon);
        let mut menus_n = Vec::new();
        let mut ids_n = Vec::new();
        let mut push = |zeta: Vec<usize>, phi: Vec<usize>| {
            if zeta.iter().zip(&phi).any(|(&iz, &ip)| (zg[iz] > 0.0) != (pg[ip] > 0.0)) {
                return;
            }
            ids_n.push(zeta.iter().zip(&phi).map(|(&iz, &ip)| iz * g + ip).collect());
            menus_n.push(ContractMenu {
                zeta: zeta.iter().map(|&iz| zg[iz]).collect(),
                phi: phi.iter().map(|&ip| pg[ip]).collect(),
            });
        };
        match j_types {
            1 => {
                for iz in 0..g {
                    for ip in 0..g {
                        push(vec![iz], vec![ip]);
                    }
                }
            }
            _ => {
                for iz1 in 0..g {
                    for iz2 in iz1..g {
                        for ip1 in 0..g {
                            for ip2 in ip1..g {
                                push(vec![iz1, iz2], vec![ip1, ip2]);
                            }
                        }
                    }
                }
            }
        }
        if !extras.is_empty() {
            for (e, menu) in extras[n].iter().enumerate() {
                if menu.num_types() != j_types {
                    return Err(Error::InvalidInput(
                        "extra candidate has the wrong number of type rows".into(),
                    ));
                }
                ids_n.push(vec![g * g + e; j_types]);
                menus_n.push(menu.clone());
            }
        }
        cands.push(menus_n);
        row_ids.push(ids_n);
    }

    // Provider reactions depend only on the row entries, so cache one
    // solve per (type, vehicle-row ids).
    let id_space: Vec<usize> =
        (0..n_sv).map(|n| g * g + extras.get(n).map_or(0, |e| e.len())).collect();
    let cache_stride: usize = id_space.iter().product();
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; j_types * cache_stride];
    let reaction_row = |j: usize,
                            picks: &[usize],
                            cands: &Vec<Vec<ContractMenu>>,
                            row_ids: &Vec<Vec<Vec<usize>>>,
                            cache: &mut Vec<Option<Vec<f64>>>|
     -> Result<Vec<f64>> {
        let mut key = 0;
        for n in 0..n_sv {
            key = key * id_space[n] + row_ids[n][picks[n]][j];
        }
        let slot = j * cache_stride + key;
        if cache[slot].is_none() {
            let zeta: Vec<f64> = (0..n_sv).map(|n| cands[n][picks[n]].zeta[j]).collect();
            let phi: Vec<f64> = (0..n_sv).map(|n| cands[n][picks[n]].phi[j]).collect();
            let u = profile.thetas[j] * profile.lambda;
            cache[slot] = Some(solve_row(u, &zeta, &phi, profile.budget(j), p1)?);
        }
        Ok(cache[slot].clone().unwrap())
    };

    let feasible = |menus: &[&ContractMenu], rows: &[Vec<f64>]| -> bool {
        let mut prev = (0.0, 0.0); // (root, paid) of the previous row
        for j in 0..j_types {
            let mut z = 0.0;
            let mut paid = 0.0;
            for (n, menu) in menus.iter().enumerate() {
                z += rows[j][n] * menu.zeta[j];
                paid += rows[j][n] * menu.phi[j];
            }
            let root = z.max(0.0).sqrt();
            if paid > profile.budget(j) + FTOL {
                return false;
            }
            if j == 0 {
                if profile.thetas[0] * profile.lambda * root - paid < -FTOL {
                    return false;
                }
            } else {
                let own = profile.thetas[j] * profile.lambda * root - paid;
                let down = profile.thetas[j] * profile.lambda * prev.0 - prev.1;
                if own < down - FTOL {
                    return false;
                }
                let up_own = profile.thetas[j - 1] * profile.lambda * prev.0 - prev.1;
                let up_dev = profile.thetas[j - 1] * profile.lambda * root - paid;
                if up_dev > up_own + FTOL {
                    return false;
                }
                if menus
                    .iter()
                    .any(|m| m.zeta[j] < m.zeta[j - 1] - FTOL || m.phi[j] < m.phi[j - 1] - FTOL)
                {
                    return false;
                }
            }
            prev = (root, paid);
        }
        true
    };

    let profit = |n: usize, menu: &ContractMenu, rows: &[Vec<f64>]| -> f64 {
        (0..j_types)
            .map(|j| profile.rhos[j] * rows[j][n] * (menu.phi[j] - costs[n].xi * menu.zeta[j]))
            .sum()
    };

    let counts: Vec<usize> = cands.iter().map(|c| c.len()).collect();
    let mut points = Vec::new();
    let mut picks = vec![0usize; n_sv];
    'profiles: loop {
        let rows: Vec<Vec<f64>> = (0..j_types)
            .map(|j| reaction_row(j, &picks, &cands, &row_ids, &mut cache))
            .collect::<Result<_>>()?;
        let menus: Vec<&ContractMenu> = (0..n_sv).map(|n| &cands[n][picks[n]]).collect();

        if feasible(&menus, &rows) {
            let base: Vec<f64> = (0..n_sv).map(|n| profit(n, menus[n], &rows)).collect();
            let mut stable = true;
            'vehicles: for n in 0..n_sv {
                for (c, alt) in cands[n].iter().enumerate() {
                    if c == picks[n] {
                        continue;
                    }
                    let mut dev_menus = menus.clone();
                    dev_menus[n] = alt;
                    if profit(n, alt, &rows) > base[n] + gamma && feasible(&dev_menus, &rows) {
                        // The deviation must also survive the provider's
                        // re-solve, exactly like an accepted sweep move.
                        let mut dev_picks = picks.clone();
                        dev_picks[n] = c;
                        let dev_rows: Vec<Vec<f64>> = (0..j_types)
                            .map(|j| reaction_row(j, &dev_picks, &cands, &row_ids, &mut cache))
                            .collect::<Result<_>>()?;
                        if feasible(&dev_menus, &dev_rows) {
                            stable = false;
                            break 'vehicles;
                        }
                    }
                }
            }
            if stable {
                let degenerate = rows.iter().map(|r| r.iter().all(|v| *v <= 1e-10)).collect();
                points.push(EquilibriumPoint {
                    menus: menus.into_iter().cloned().collect(),
                    profits: base,
                    proportions: PaymentProportions { rows, degenerate },
                });
            }
        }

        // next profile
        for n in (0..n_sv).rev() {
            picks[n] += 1;
            if picks[n] < counts[n] {
                continue 'profiles;
            }
            picks[n] = 0;
        }
        break;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::p3_feasibility;

    fn paper_profile(j_types: usize) -> VspProfile {
        VspProfile::with_uniform_types(j_types, 12.0, 125.0).unwrap()
    }

    #[test]
    fn initial_menus_scale_with_type_rank() {
        let profile = paper_profile(2);
        let menus = initial_menus(&[0.4], 21.0, &profile);
        assert_eq!(menus[0].zeta, vec![0.2, 0.4]);
        assert_eq!(menus[0].phi, vec![4.2, 8.4]);
    }

    #[test]
    fn best_response_never_loses_to_a_feasible_incumbent() {
        let profile = paper_profile(2);
        let caps = [0.5, 0.3];
        let menus = initial_menus(&caps, 21.0, &profile);
        let props =
            solve_payment_proportions(&menus, &profile, &P1Options::default()).unwrap();
        let grid = ContractGrid { levels_per_dim: 7, phi_headroom: 2.0 };
        for n in 0..2 {
            let incumbent =
                expected_sv_profit(n, &menus[n], &props, &profile, &SvCost { xi: 5.0 });
            let br = best_response(
                n, &menus, &props, &profile, &SvCost { xi: 5.0 }, &caps, 21.0, &grid, 1e-6,
            )
            .unwrap();
            if br.incumbent_feasible {
                assert!(br.profit >= incumbent - 1e-12);
                if br.improved {
                    assert!(br.profit > incumbent + 1e-6);
                }
            } else if br.any_feasible {
                // An infeasible incumbent is replaced whenever anything
                // feasible exists, even at a loss.
                assert!(br.improved);
            } else {
                // Nothing this vehicle posts can repair the aggregate; the
                // incumbent is kept, flagged.
                assert!(!br.improved);
                assert_eq!(br.menu.zeta, menus[n].zeta);
            }
        }
    }

    #[test]
    fn equilibrium_is_reached_and_screening_feasible() {
        let profile = paper_profile(2);
        let costs = vec![SvCost { xi: 5.0 }, SvCost { xi: 5.0 }];
        let opts = EquilibriumOptions {
            grid: ContractGrid { levels_per_dim: 5, phi_headroom: 2.0 },
            ..EquilibriumOptions::default()
        };
        let eq = iterate_to_equilibrium(&[0.5, 0.3], &costs, 21.0, &profile, &opts).unwrap();
        assert!(eq.converged, "no equilibrium after {} sweeps", eq.sweeps);
        let p3 = p3_feasibility(&eq.menus, &eq.proportions, &profile, 1e-9);
        assert!(p3.feasible);
        assert!(!eq.trace.is_empty());
        // the last sweep accepted nothing, so re-running a best response
        // must not improve either vehicle
        for n in 0..2 {
            let br = best_response(
                n,
                &eq.menus,
                &eq.proportions,
                &profile,
                &costs[n],
                &[0.5, 0.3],
                21.0,
                &opts.grid,
                opts.gamma,
            )
            .unwrap();
            assert!(!br.improved);
        }
    }

    #[test]
    fn exhaustive_search_rejects_large_instances() {
        let profile = paper_profile(3);
        let costs = vec![SvCost { xi: 5.0 }];
        let err = brute_force_equilibrium(
            &[0.5],
            &costs,
            21.0,
            &profile,
            &ContractGrid { levels_per_dim: 3, phi_headroom: 2.0 },
            1e-6,
            &[],
            &P1Options::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooLarge(_)));
    }

    #[test]
    fn grid_validation_rejects_single_level() {
        let grid = ContractGrid { levels_per_dim: 1, phi_headroom: 2.0 };
        assert!(grid.validate().is_err());
    }
}
