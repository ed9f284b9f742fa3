//! Provider reaction: optimal payment proportions per type row.
//!
//! For one type with weight `u = theta * lambda`, menu row `(zeta, phi)`
//! and budget `B`, the provider solves
//!
//! ```text
//! max_{rho in [0,1]^N}  u * sqrt(sum_n rho_n zeta_n) - sum_n rho_n phi_n
//! s.t.                  sum_n rho_n phi_n <= B
//! ```
//!
//! The objective is concave on the box (square root of a non-negative
//! linear form minus a linear form) and its Hessian is rank one, so KKT
//! points have a closed structure that the box solver enumerates directly.
//! When the unconstrained-budget solution overspends, a budget multiplier
//! `nu >= 0` scales the effective prices to `(1 + nu) * phi` and bisection
//! finds the multiplier whose solution meets the budget.

use super::{check_menus, ContractMenu, PaymentProportions, VspProfile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P1Options {
    /// Slack for budget feasibility decisions inside the solver.
    pub tol: f64,
    /// Cap on budget-multiplier bisection steps (about sixty are used).
    pub max_iters: usize,
}

impl Default for P1Options {
    fn default() -> Self {
        P1Options { tol: 1e-12, max_iters: 200 }
    }
}

/// Solves the provider's reaction for every type row of the given menus.
pub fn solve_payment_proportions(
    menus: &[ContractMenu],
    profile: &VspProfile,
    opts: &P1Options,
) -> Result<PaymentProportions> {
    let j_types = profile.num_types();
    check_menus(menus, j_types)?;
    for (n, menu) in menus.iter().enumerate() {
        for j in 0..j_types {
            if menu.phi[j] == 0.0 && menu.zeta[j] > 0.0 {
                return Err(Error::InvalidInput(format!(
                    "vehicle {n} offers type {} significance {} for free; payments must be \
                     positive wherever significance is",
                    j + 1,
                    menu.zeta[j]
                )));
            }
        }
    }

    let mut rows = Vec::with_capacity(j_types);
    let mut degenerate = Vec::with_capacity(j_types);
    for j in 0..j_types {
        let zeta: Vec<f64> = menus.iter().map(|m| m.zeta[j]).collect();
        let phi: Vec<f64> = menus.iter().map(|m| m.phi[j]).collect();
        let u = profile.thetas[j] * profile.lambda;
        let solution = solve_row(u, &zeta, &phi, profile.budget(j), opts)?;
        degenerate.push(solution.iter().all(|r| *r <= 1e-10));
        rows.push(solution);
    }
    Ok(PaymentProportions { rows, degenerate })
}

/// One type row. Exposed within the crate so the equilibrium oracle can
/// solve cached rows directly.
pub(crate) fn solve_row(
    u: f64,
    zeta: &[f64],
    phi: &[f64],
    budget: f64,
    opts: &P1Options,
) -> Result<Vec<f64>> {
    let n = zeta.len();
    assert_eq!(n, phi.len());
    if !budget.is_finite() || budget < 0.0 {
        return Err(Error::InvalidInput(format!("budget {budget} must be non-negative")));
    }
    if u <= 0.0 || zeta.iter().all(|z| *z == 0.0) {
        return Ok(vec![0.0; n]);
    }
    if budget == 0.0 {
        // Every worthwhile coordinate has a positive price, so nothing can
        // be bought.
        return Ok(vec![0.0; n]);
    }

    let unconstrained = max_box(u, zeta, phi);
    if spend(&unconstrained, phi) <= budget + opts.tol {
        return Ok(unconstrained);
    }

    // The budget binds. Scale effective prices by (1 + nu) and bisect nu;
    // the optimal spend is continuous and non-increasing in nu.
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut hi_solution = loop {
        let prices: Vec<f64> = phi.iter().map(|p| (1.0 + hi) * p).collect();
        let sol = max_box(u, zeta, &prices);
        if spend(&sol, phi) <= budget {
            break sol;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e18 {
            return Err(Error::Numeric(
                "budget multiplier search diverged; spend never met the budget".into(),
            ));
        }
    };
    let mut iters = 0;
    while hi - lo > 1e-15 * (1.0 + hi) && iters < opts.max_iters {
        iters += 1;
        let mid = 0.5 * (lo + hi);
        let prices: Vec<f64> = phi.iter().map(|p| (1.0 + mid) * p).collect();
        let sol = max_box(u, zeta, &prices);
        if spend(&sol, phi) > budget {
            lo = mid;
        } else {
            hi = mid;
            hi_solution = sol;
        }
    }
    // The feasible-side solution can undershoot the budget slightly; scaled
    // ascent keeps it within tolerance of the constrained optimum. Guard
    // against rounding pushing spend just past the budget.
    let c = spend(&hi_solution, phi);
    if c > budget {
        let shrink = budget / c;
        for r in &mut hi_solution {
            *r *= shrink;
        }
    }
    Ok(hi_solution)
}

pub(crate) fn spend(rho: &[f64], phi: &[f64]) -> f64 {
    rho.iter().zip(phi).map(|(r, p)| r * p).sum()
}

fn objective(u: f64, zeta: &[f64], prices: &[f64], rho: &[f64]) -> f64 {
    let z: f64 = rho.iter().zip(zeta).map(|(r, z)| r * z).sum();
    u * z.max(0.0).sqrt() - spend(rho, prices)
}

/// Exact maximizer of `u * sqrt(zeta . rho) - prices . rho` on `[0,1]^N`.
///
/// The Hessian is the rank-one matrix `-(u/4) z^(-3/2) zeta zeta'`, so at a
/// KKT point the coordinates, sorted by the value ratio `zeta/price`, split
/// into a prefix bought in full, a partially bought band of ratio-tied
/// coordinates and an untouched tail (interior coordinates all satisfy
/// `u zeta_i / (2 sqrt(z)) = price_i`, which forces equal ratios). Every
/// split is evaluated and the best objective wins. Within a tied band the
/// spend only depends on the total significance bought, so the split is an
/// indifference set; the symmetric point (equal proportion for every tied
/// coordinate) is returned so that identically priced vehicles are treated
/// alike rather than in index order.
fn max_box(u: f64, zeta: &[f64], prices: &[f64]) -> Vec<f64> {
    let n = zeta.len();
    let mut prefix = vec![0.0; n];
    let mut order: Vec<usize> = Vec::new();
    for i in 0..n {
        if zeta[i] > 0.0 {
            if prices[i] <= 0.0 {
                // Free value; unreachable through the menu guard but kept
                // total so scaled sub-solves can never panic.
                prefix[i] = 1.0;
            } else {
                order.push(i);
            }
        }
    }
    order.sort_by(|&a, &b| {
        (zeta[b] / prices[b]).total_cmp(&(zeta[a] / prices[a])).then(a.cmp(&b))
    });

    let mut best = prefix.clone();
    let mut best_obj = objective(u, zeta, prices, &best);
    let mut z_pref: f64 = prefix.iter().zip(zeta).map(|(r, z)| r * z).sum();
    let mut g0 = 0;
    while g0 < order.len() {
        // The tie band: ratios within one part in 1e12 collapse to a group
        // so that rounding in the callers' price arithmetic cannot split an
        // intended tie. The objective error from treating a near-tie as
        // exact is below every downstream tolerance.
        let q0 = zeta[order[g0]] / prices[order[g0]];
        let mut g1 = g0 + 1;
        while g1 < order.len() {
            let q = zeta[order[g1]] / prices[order[g1]];
            if q0 - q <= 1e-12 * q0 {
                g1 += 1;
            } else {
                break;
            }
        }
        let group = &order[g0..g1];
        let z_group: f64 = group.iter().map(|&i| zeta[i]).sum();
        // Partial top-up of the band on the fully bought prefix: the
        // interior condition u * zeta_i / (2 sqrt(z)) = price_i fixes z.
        let s = 0.5 * u * q0;
        let x = ((s * s - z_pref) / z_group).clamp(0.0, 1.0);
        if x > 0.0 && x < 1.0 {
            for &i in group {
                prefix[i] = x;
            }
            let obj = objective(u, zeta, prices, &prefix);
            if obj > best_obj {
                best_obj = obj;
                best.copy_from_slice(&prefix);
            }
        }
        for &i in group {
            prefix[i] = 1.0;
        }
        z_pref += z_group;
        let obj = objective(u, zeta, prices, &prefix);
        if obj > best_obj {
            best_obj = obj;
            best.copy_from_slice(&prefix);
        }
        g0 = g1;
    }
    best
}
