//! Time value of the learned model and the round-level profit and welfare
//! measures built on it.
//!
//! A model trained on round-`t` data loses value as the road state drifts:
//! the per-round multiplier is `a * chi * exp(-b * t)` where `chi` is the
//! model's current accuracy. Profit and welfare reuse the contract-game
//! value terms with the type willingness scaled by that multiplier.

use crate::contracts::{cost, satisfaction, ContractMenu, SvCost, VspProfile};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreshnessParams {
    /// Value of a perfectly accurate, perfectly fresh model.
    pub a: f64,
    /// Exponential staleness rate per round.
    pub b: f64,
}

impl Default for FreshnessParams {
    fn default() -> Self {
        FreshnessParams { a: 1.0, b: 0.05 }
    }
}

/// Economic weight of a model with accuracy `chi` that is `age_rounds` old.
pub fn model_value(params: &FreshnessParams, chi: f64, age_rounds: f64) -> f64 {
    params.a * chi * (-params.b * age_rounds).exp()
}

/// Provider profit for type `j` with the willingness discounted by the
/// model value `omega`: the satisfaction term scales, the payments do not.
pub fn net_vsp_profit(
    j: usize,
    omega: f64,
    menus: &[ContractMenu],
    rho_row: &[f64],
    profile: &VspProfile,
) -> f64 {
    let zeta: Vec<f64> = menus.iter().map(|m| m.zeta[j]).collect();
    let phi: Vec<f64> = menus.iter().map(|m| m.phi[j]).collect();
    profile.thetas[j] * omega * satisfaction(profile.lambda, &zeta, rho_row) - cost(&phi, rho_row)
}

/// Social welfare for type `j` at model value `omega`: the provider's
/// discounted satisfaction minus what the vehicles actually spend to
/// collect, with the payments cancelling between the two sides.
pub fn net_social_welfare(
    j: usize,
    omega: f64,
    menus: &[ContractMenu],
    rho_row: &[f64],
    costs: &[SvCost],
    profile: &VspProfile,
) -> f64 {
    let zeta: Vec<f64> = menus.iter().map(|m| m.zeta[j]).collect();
    let collection: f64 = menus
        .iter()
        .zip(rho_row)
        .zip(costs)
        .map(|((m, r), c)| r * m.zeta[j] * c.xi)
        .sum();
    profile.thetas[j] * omega * satisfaction(profile.lambda, &zeta, rho_row) - collection
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::vsp_profit;
    use approx::assert_abs_diff_eq;

    #[test]
    fn value_decays_exponentially() {
        let p = FreshnessParams::default();
        // a=1, chi=0.8, t=20: 0.8 * exp(-1)
        assert_abs_diff_eq!(
            model_value(&p, 0.8, 20.0),
            0.29430355293715386,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(model_value(&p, 0.8, 0.0), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn unit_value_profit_matches_the_contract_game() {
        let profile = VspProfile::with_uniform_types(3, 12.0, 125.0).unwrap();
        let menus = vec![
            ContractMenu::new(vec![0.1, 0.2, 0.3], vec![2.0, 4.0, 6.0]).unwrap(),
            ContractMenu::new(vec![0.2, 0.2, 0.4], vec![3.0, 3.0, 8.0]).unwrap(),
        ];
        let rho = [0.4, 0.7];
        for j in 0..3 {
            assert_abs_diff_eq!(
                net_vsp_profit(j, 1.0, &menus, &rho, &profile),
                vsp_profit(j, &menus, &rho, &profile),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn welfare_equals_profit_plus_vehicle_margins() {
        // welfare = provider profit + sum of per-vehicle (payment - cost)
        let profile = VspProfile::with_uniform_types(2, 12.0, 250.0).unwrap();
        let menus = vec![
            ContractMenu::new(vec![0.1, 0.5], vec![2.5, 9.0]).unwrap(),
            ContractMenu::new(vec![0.3, 0.3], vec![5.0, 5.0]).unwrap(),
        ];
        let costs = vec![SvCost { xi: 5.0 }, SvCost { xi: 4.0 }];
        let rho = [0.9, 0.25];
        for j in 0..2 {
            for omega in [1.0, 0.6, 0.1] {
                let margins: f64 = menus
                    .iter()
                    .zip(&rho)
                    .zip(&costs)
                    .map(|((m, r), c)| r * (m.phi[j] - c.xi * m.zeta[j]))
                    .sum();
                assert_abs_diff_eq!(
                    net_social_welfare(j, omega, &menus, &rho, &costs, &profile),
                    net_vsp_profit(j, omega, &menus, &rho, &profile) + margins,
                    epsilon = 1e-9
                );
            }
        }
    }
}
