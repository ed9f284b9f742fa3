//! Vehicle scoring and selection.
//!
//! Each smart vehicle carries a spatio-temporal sample-count matrix
//! (`eta_cells`, day-of-week by location) describing the data it collected
//! this round. Comparing it cell-wise against the provider's required
//! variability matrix yields the vehicle's information significance, a
//! quality-of-information score in `[0, 1]` used both to filter and rank
//! candidates and to cap the significance levels offered in its contract.

use ndarray::Array2;

use crate::area::AreaPartition;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QoiTier {
    High,
    Medium,
    Low,
}

impl QoiTier {
    pub const ALL: [QoiTier; 3] = [QoiTier::High, QoiTier::Medium, QoiTier::Low];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmartVehicle {
    pub id: u32,
    pub tier: QoiTier,
    pub current_area: u32,
    /// Sample counts per (day-of-week, location) cell; non-negative, and
    /// its sum is the vehicle's data size for the round.
    pub eta_cells: Array2<f64>,
}

impl SmartVehicle {
    pub fn data_size(&self) -> f64 {
        self.eta_cells.sum()
    }
}

/// Required and actually-collected variability matrices for one vehicle.
/// `actual` never exceeds `required` cell-wise: surplus samples in a cell do
/// not make the data more representative.
#[derive(Debug, Clone, PartialEq)]
pub struct VariabilityPair {
    pub required: Array2<f64>,
    pub actual: Array2<f64>,
}

pub fn build_variability(sv: &SmartVehicle, required: &Array2<f64>) -> Result<VariabilityPair> {
    if sv.eta_cells.dim() != required.dim() {
        return Err(Error::InvalidInput(format!(
            "eta_cells {:?} and required matrix {:?} have different shapes",
            sv.eta_cells.dim(),
            required.dim()
        )));
    }
    if sv.eta_cells.iter().any(|&v| !v.is_finite() || v < 0.0)
        || required.iter().any(|&v| !v.is_finite() || v < 0.0)
    {
        return Err(Error::InvalidInput("variability matrices must be non-negative".into()));
    }
    let actual =
        Array2::from_shape_fn(required.dim(), |idx| sv.eta_cells[idx].min(required[idx]));
    Ok(VariabilityPair { required: required.clone(), actual })
}

/// Information significance: `1 - ||required - actual||_F / ||required||_F`.
/// Equals 1 when the vehicle covers every required cell and 0 when it
/// covers none.
pub fn info_significance(pair: &VariabilityPair) -> Result<f64> {
    if pair.required.dim() != pair.actual.dim() {
        return Err(Error::InvalidInput("variability pair shapes differ".into()));
    }
    let mut diff_sq = 0.0;
    let mut req_sq = 0.0;
    for (&y, &x) in pair.required.iter().zip(pair.actual.iter()) {
        if !(0.0..=y).contains(&x) {
            return Err(Error::InvalidInput(
                "actual variability must lie between 0 and the required count".into(),
            ));
        }
        diff_sq += (y - x) * (y - x);
        req_sq += y * y;
    }
    if req_sq == 0.0 {
        return Err(Error::InvalidInput("required variability matrix is all zeros".into()));
    }
    Ok(1.0 - (diff_sq / req_sq).sqrt())
}

/// Vehicles currently inside a significant area. Errors if any vehicle sits
/// in an area the partition does not know about.
pub fn location_filter<'a>(
    svs: &'a [SmartVehicle],
    partition: &AreaPartition,
) -> Result<Vec<&'a SmartVehicle>> {
    for sv in svs {
        if !partition.contains(sv.current_area) {
            return Err(Error::InvalidInput(format!(
                "vehicle {} reports unknown area {}",
                sv.id, sv.current_area
            )));
        }
    }
    Ok(svs.iter().filter(|sv| partition.is_significant(sv.current_area)).collect())
}

/// Top `n` vehicle ids by information significance, descending, breaking
/// score ties toward the smaller id.
pub fn select_top_n(scored: &[(u32, f64)], n: usize) -> Result<Vec<u32>> {
    if n > scored.len() {
        return Err(Error::InvalidInput(format!(
            "cannot select {n} vehicles from {} candidates",
            scored.len()
        )));
    }
    if scored.iter().any(|(_, z)| z.is_nan()) {
        return Err(Error::InvalidInput("significance scores must not be NaN".into()));
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked[..n].iter().map(|&(id, _)| id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sv(id: u32, area: u32, eta: Array2<f64>) -> SmartVehicle {
        SmartVehicle { id, tier: QoiTier::Medium, current_area: area, eta_cells: eta }
    }

    #[test]
    fn full_coverage_scores_one_and_none_scores_zero() {
        let required = array![[2.0, 2.0], [2.0, 2.0]];
        let full = build_variability(&sv(1, 0, array![[5.0, 2.0], [3.0, 2.0]]), &required).unwrap();
        assert_eq!(info_significance(&full).unwrap(), 1.0);
        let none = build_variability(&sv(2, 0, Array2::zeros((2, 2))), &required).unwrap();
        assert_eq!(info_significance(&none).unwrap(), 0.0);
    }

    #[test]
    fn partial_coverage_is_interior() {
        let required = array![[3.0, 3.0]];
        let pair = build_variability(&sv(1, 0, array![[3.0, 0.0]]), &required).unwrap();
        let z = info_significance(&pair).unwrap();
        // ||Y - X|| = 3, ||Y|| = sqrt(18)
        assert!((z - (1.0 - (9.0f64 / 18.0).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn zero_required_matrix_is_an_error() {
        let pair =
            build_variability(&sv(1, 0, Array2::zeros((2, 2))), &Array2::zeros((2, 2))).unwrap();
        assert!(info_significance(&pair).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let res = build_variability(&sv(1, 0, Array2::zeros((2, 2))), &Array2::ones((2, 3)));
        assert!(res.is_err());
    }

    #[test]
    fn top_n_breaks_ties_toward_smaller_id() {
        let scored = [(9, 0.5), (3, 0.9), (7, 0.9), (1, 0.1)];
        assert_eq!(select_top_n(&scored, 3).unwrap(), vec![3, 7, 9]);
        assert!(select_top_n(&scored, 5).is_err());
    }

    #[test]
    fn location_filter_keeps_significant_and_rejects_unknown_areas() {
        let part = AreaPartition {
            significant: [2].into_iter().collect(),
            insignificant: [1].into_iter().collect(),
            centroids: [1.0, 10.0],
            iterations: 2,
        };
        let svs = vec![
            sv(1, 1, Array2::ones((1, 1))),
            sv(2, 2, Array2::ones((1, 1))),
            sv(3, 2, Array2::ones((1, 1))),
        ];
        let kept = location_filter(&svs, &part).unwrap();
        assert_eq!(kept.iter().map(|s| s.id).collect::<Vec<_>>(), vec![2, 3]);

        let stray = vec![sv(4, 99, Array2::ones((1, 1)))];
        assert!(location_filter(&stray, &part).is_err());
    }

    proptest! {
        #[test]
        fn significance_is_bounded_and_scale_invariant(
            eta in proptest::collection::vec(0.0f64..50.0, 6),
            req in proptest::collection::vec(0.1f64..50.0, 6),
            scale in 0.01f64..100.0,
        ) {
            let eta = Array2::from_shape_vec((2, 3), eta).unwrap();
            let req = Array2::from_shape_vec((2, 3), req).unwrap();
            let vehicle = sv(1, 0, eta.clone());
            let z = info_significance(&build_variability(&vehicle, &req).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&z));

            let scaled = sv(1, 0, eta.mapv(|v| v * scale));
            let req_scaled = req.mapv(|v| v * scale);
            let zs = info_significance(&build_variability(&scaled, &req_scaled).unwrap()).unwrap();
            prop_assert!((z - zs).abs() < 1e-9);
        }
    }
}
