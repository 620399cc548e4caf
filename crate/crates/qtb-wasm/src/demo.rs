//! Payload builders for the browser demo: plain serializable structs
//! computed from a fixed two-cell population, so everything here is
//! testable on native targets.

use serde::Serialize;

use qtb_core::bounds::{
    frontier_scan, marginal_cdf_bounds, qte_hull, CovariateCells, SensitivityRect,
};
use qtb_core::dist::ThresholdGrid;
use qtb_core::envelope::{g_nested, product_relaxation, Side, UnitProb};
use qtb_core::estimate::NuisanceSet;
use qtb_core::inference::zero_level_nodes;
use qtb_core::sim::discretize_truncated_normal;
use qtb_core::SensitivityPair;

#[derive(Debug, Serialize)]
pub struct EnvelopeCurves {
    pub p: Vec<f64>,
    pub nested_lower: Vec<f64>,
    pub nested_upper: Vec<f64>,
    pub product_lower: Vec<f64>,
    pub product_upper: Vec<f64>,
}

/// Nested envelope and product-relaxation curves over the event probability.
pub fn envelope_curves(
    gamma: f64,
    lambda: f64,
    e: f64,
    n_points: usize,
) -> Result<EnvelopeCurves, String> {
    let s = SensitivityPair::new(gamma, lambda).map_err(|err| err.to_string())?;
    let e = UnitProb::new(e).map_err(|err| err.to_string())?;
    let n = n_points.clamp(2, 2001);
    let mut out = EnvelopeCurves {
        p: Vec::with_capacity(n),
        nested_lower: Vec::with_capacity(n),
        nested_upper: Vec::with_capacity(n),
        product_lower: Vec::with_capacity(n),
        product_upper: Vec::with_capacity(n),
    };
    for i in 0..n {
        let p = i as f64 / (n - 1) as f64;
        let up = UnitProb::new(p).expect("grid point in range");
        out.p.push(p);
        out.nested_lower.push(g_nested(up, e, s, Side::Lower).value());
        out.nested_upper.push(g_nested(up, e, s, Side::Upper).value());
        out.product_lower.push(product_relaxation(up, e, s, Side::Lower).value());
        out.product_upper.push(product_relaxation(up, e, s, Side::Upper).value());
    }
    Ok(out)
}

/// Fixed two-cell demo population: distinct arm laws, covariate shift, and
/// an observational propensity.
fn demo_nuisances() -> (ThresholdGrid, NuisanceSet) {
    let grid = ThresholdGrid::equally_spaced(-4.0, 4.0, 161).expect("valid grid");
    let cells = CovariateCells::new(vec![0.35, 0.65], vec![0.6, 0.4]).expect("valid cells");
    let e1 = vec![0.35, 0.6];
    let mut p0 = Vec::new();
    let mut p1 = Vec::new();
    for (mean0, mean1) in [(-0.6, 0.2), (0.1, 1.0)] {
        let law0 = discretize_truncated_normal(&grid, mean0, 1.0).expect("valid law");
        let law1 = discretize_truncated_normal(&grid, mean1, 1.2).expect("valid law");
        p0.push(grid.values().iter().map(|y| law0.cdf(*y)).collect::<Vec<f64>>());
        p1.push(grid.values().iter().map(|y| law1.cdf(*y)).collect::<Vec<f64>>());
    }
    let nuis = NuisanceSet::from_population(grid.clone(), cells, e1, p0, p1)
        .expect("demo nuisances are valid");
    (grid, nuis)
}

#[derive(Debug, Serialize)]
pub struct HullOut {
    pub tau: f64,
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub kappa: f64,
}

#[derive(Debug, Serialize)]
pub struct BoundCurves {
    pub y: Vec<f64>,
    pub arm0_lower: Vec<f64>,
    pub arm0_upper: Vec<f64>,
    pub arm1_lower: Vec<f64>,
    pub arm1_upper: Vec<f64>,
    pub hulls: Vec<HullOut>,
}

/// Marginal CDF envelopes and QTE hulls of the demo population at one
/// sensitivity pair.
pub fn bound_process(gamma: f64, lambda: f64, taus: &[f64]) -> Result<BoundCurves, String> {
    let s = SensitivityPair::new(gamma, lambda).map_err(|err| err.to_string())?;
    let (grid, nuis) = demo_nuisances();
    let proc = marginal_cdf_bounds(&nuis, &[s]).map_err(|err| err.to_string())?;
    let mut hulls = Vec::with_capacity(taus.len());
    for &tau in taus {
        if !(0.0 < tau && tau < 1.0) {
            return Err(format!("tau must lie in (0,1), got {tau}"));
        }
        let hull = qte_hull(&proc, tau, 0).map_err(|err| err.to_string())?;
        hulls.push(HullOut {
            tau,
            delta_lo: hull.delta_lo,
            delta_hi: hull.delta_hi,
            kappa: hull.kappa,
        });
    }
    Ok(BoundCurves {
        y: grid.values().to_vec(),
        arm0_lower: proc.curve(0, 0, Side::Lower).to_vec(),
        arm0_upper: proc.curve(0, 0, Side::Upper).to_vec(),
        arm1_lower: proc.curve(0, 1, Side::Lower).to_vec(),
        arm1_upper: proc.curve(0, 1, Side::Upper).to_vec(),
        hulls,
    })
}

#[derive(Debug, Serialize)]
pub struct FrontierSurface {
    pub mesh: (usize, usize),
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Row-major kappa values (gamma outer).
    pub kappa: Vec<f64>,
    pub zero_level: Vec<(f64, f64)>,
}

/// Non-refutation surface of the demo population over the sensitivity
/// rectangle.
pub fn frontier_surface(
    gamma_max: f64,
    lambda_max: f64,
    mesh: usize,
    tau: f64,
) -> Result<FrontierSurface, String> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(format!("tau must lie in (0,1), got {tau}"));
    }
    let rect = SensitivityRect::new(gamma_max, lambda_max).map_err(|err| err.to_string())?;
    let mesh = (mesh.clamp(2, 61), mesh.clamp(2, 61));
    let nodes = rect.mesh_points(mesh).map_err(|err| err.to_string())?;
    let (_, nuis) = demo_nuisances();
    let proc = marginal_cdf_bounds(&nuis, &nodes).map_err(|err| err.to_string())?;
    let frontier = frontier_scan(&proc, tau, &rect, mesh).map_err(|err| err.to_string())?;
    Ok(FrontierSurface {
        mesh,
        gammas: (0..mesh.0).map(|i| frontier.node(i, 0).0.gamma()).collect(),
        lambdas: (0..mesh.1).map(|j| frontier.node(0, j).0.lambda()).collect(),
        zero_level: zero_level_nodes(&frontier, 0.0),
        kappa: frontier.kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_curves_are_ordered_and_monotone() {
        let c = envelope_curves(2.0, 1.5, 0.3, 101).unwrap();
        for i in 0..c.p.len() {
            assert!(c.product_lower[i] <= c.nested_lower[i] + 1e-12);
            assert!(c.nested_lower[i] <= c.nested_upper[i] + 1e-12);
            assert!(c.nested_upper[i] <= c.product_upper[i] + 1e-12);
            if i > 0 {
                assert!(c.nested_lower[i] + 1e-12 >= c.nested_lower[i - 1]);
            }
        }
        assert_eq!(c.nested_lower[0], 0.0);
        assert_eq!(*c.nested_upper.last().unwrap(), 1.0);
        assert!(envelope_curves(0.5, 1.0, 0.3, 10).is_err());
    }

    #[test]
    fn bound_process_hull_widens_with_sensitivity() {
        let narrow = bound_process(1.0, 1.0, &[0.5]).unwrap();
        let wide = bound_process(2.0, 1.5, &[0.5]).unwrap();
        assert!(narrow.hulls[0].delta_hi - narrow.hulls[0].delta_lo < 1e-9);
        assert!(wide.hulls[0].delta_lo <= narrow.hulls[0].delta_lo);
        assert!(narrow.hulls[0].delta_hi <= wide.hulls[0].delta_hi);
        assert_eq!(wide.y.len(), wide.arm1_lower.len());
    }

    #[test]
    fn frontier_surface_monotone_in_sensitivity() {
        let surf = frontier_surface(3.0, 2.5, 9, 0.5).unwrap();
        let (ng, nl) = surf.mesh;
        for i in 0..ng {
            for j in 0..nl - 1 {
                assert!(surf.kappa[i * nl + j] <= surf.kappa[i * nl + j + 1] + 1e-12);
            }
        }
        // The demo effect is nonzero, so the point-identified corner refutes
        // zero and the frontier is a genuine curve.
        assert!(surf.kappa[0] < 0.0);
        assert!(!surf.zero_level.is_empty());
    }
}
