//! Positioning from averaged channel measurements: least-squares angle
//! recovery, a 1D range search along the reference UE's direction and a
//! weighted least-squares refinement.

use nalgebra::{DMatrix, DVector};

use crate::channel::unordered_pairs;
use crate::error::{Error, Result};
use crate::estimators::MeasurementVector;
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::scenario::Point;

const ARCSIN_LIMIT: f64 = 1.0 - 1e-12;

/// Per-UE azimuth and elevation seen from the RIS.
#[derive(Debug, Clone, PartialEq)]
pub struct Angles {
    pub azimuth: Vec<f64>,
    pub elevation: Vec<f64>,
    /// Set when noise pushed an arcsine argument outside `[-1, 1]`.
    pub clamped: bool,
}

impl Angles {
    /// Unit direction of UE `k` from the RIS centre.
    pub fn direction(&self, k: usize) -> Point {
        let (az, el) = (self.azimuth[k], self.elevation[k]);
        Point::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

fn clamp_unit(v: f64, clamped: &mut bool) -> f64 {
    if v.abs() > ARCSIN_LIMIT {
        *clamped = true;
        v.signum() * ARCSIN_LIMIT
    } else {
        v
    }
}

/// Recovers per-UE direction cosines from pairwise spatial frequencies
/// (lexicographic unordered pairs) by least squares, then the angles.
pub fn recover_angles(k: usize, xi: &[f64], zeta: &[f64]) -> Result<Angles> {
    let pairs = unordered_pairs(k);
    if k < 3 {
        return Err(Error::validation("feasibility: K >= 3 required"));
    }
    if xi.len() != pairs.len() || zeta.len() != pairs.len() {
        return Err(Error::validation("angle recovery needs one value per UE pair"));
    }
    let mut g = DMatrix::zeros(pairs.len(), k);
    for (r, &(i, j)) in pairs.iter().enumerate() {
        g[(r, i)] = 1.0;
        g[(r, j)] = 1.0;
    }
    let gtg = g.transpose() * &g;
    let chol = gtg
        .cholesky()
        .ok_or_else(|| Error::numerical("pairing matrix is singular"))?;
    let w1 = chol.solve(&(g.transpose() * DVector::from_column_slice(xi)));
    let w2 = chol.solve(&(g.transpose() * DVector::from_column_slice(zeta)));
    let mut clamped = false;
    let mut azimuth = Vec::with_capacity(k);
    let mut elevation = Vec::with_capacity(k);
    for u in 0..k {
        let s_el = clamp_unit(w2[u], &mut clamped);
        let el = s_el.asin();
        let s_az = clamp_unit(w1[u] / (1.0 - s_el * s_el).sqrt(), &mut clamped);
        elevation.push(el);
        azimuth.push(s_az.asin());
    }
    Ok(Angles {
        azimuth,
        elevation,
        clamped,
    })
}

/// Default candidate ranges: 0.1 m to 20 m in 0.05 m steps.
pub fn default_d_search() -> Vec<f64> {
    (0..399).map(|i| 0.1 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEstimate {
    pub positions: Vec<Point>,
    /// Selected reference range.
    pub d_ref: f64,
    pub cost: f64,
}

/// Positions of all UEs for a candidate reference range `a`, or `None`
/// when some range is not positive.
fn place(
    a: f64,
    reference: usize,
    dirs: &[Point],
    meas: &MeasurementVector,
    c: f64,
    ris_center: &Point,
) -> Option<Vec<Point>> {
    let t_ref = dirs[reference];
    let mut out = Vec::with_capacity(dirs.len());
    for (j, t_j) in dirs.iter().enumerate() {
        if j == reference {
            out.push(ris_center + t_ref * a);
            continue;
        }
        let m = meas.get(reference, j);
        let dd = c * (m.tau_ris - m.tau_los);
        let den = 2.0 * a * (1.0 + t_ref.dot(t_j)) - 2.0 * dd;
        if !(den > 0.0) {
            return None;
        }
        let d_j = (2.0 * a * dd - dd * dd) / den;
        if !(d_j > 0.0) {
            return None;
        }
        out.push(ris_center + t_j * d_j);
    }
    Some(out)
}

/// Mismatch between geometric and measured range differences over the
/// non-reference pairs.
fn coarse_cost(pos: &[Point], reference: usize, meas: &MeasurementVector, c: f64, ris_center: &Point) -> f64 {
    let mut cost = 0.0;
    for (j, k) in unordered_pairs(pos.len()) {
        if j == reference || k == reference {
            continue;
        }
        let m = meas.get(j, k);
        let psi = (pos[j] - ris_center).norm() + (pos[k] - ris_center).norm() - (pos[j] - pos[k]).norm();
        let r = psi - c * (m.tau_ris - m.tau_los);
        cost += r * r;
    }
    cost
}

/// 1D search over the reference UE's range.
pub fn coarse_positions(
    angles: &Angles,
    meas: &MeasurementVector,
    reference: usize,
    d_search: &[f64],
    c: f64,
    ris_center: &Point,
) -> Result<CoarseEstimate> {
    let k = meas.k;
    let dirs: Vec<Point> = (0..k).map(|u| angles.direction(u)).collect();
    let mut best: Option<CoarseEstimate> = None;
    for &a in d_search {
        let Some(pos) = place(a, reference, &dirs, meas, c, ris_center) else {
            continue;
        };
        let cost = coarse_cost(&pos, reference, meas, c, ris_center);
        if cost.is_finite() && best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(CoarseEstimate {
                positions: pos,
                d_ref: a,
                cost,
            });
        }
    }
    best.ok_or_else(|| Error::numerical("coarse search: every candidate range was infeasible"))
}

/// Residual weighting for the refinement.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Unit weights with delays expressed as ranges (`c * tau`, meters).
    Identity,
    /// Inverse standard deviations from per-pair variances `[tau, tau_r, xi, zeta]`.
    CrlbDiag(Vec<[f64; 4]>),
}

impl Weighting {
    fn weights(&self, n_pairs: usize, c: f64) -> Result<Vec<[f64; 4]>> {
        match self {
            Weighting::Identity => Ok(vec![[c, c, 1.0, 1.0]; n_pairs]),
            Weighting::CrlbDiag(v) => {
                if v.len() != n_pairs {
                    return Err(Error::validation("one variance set per UE pair is required"));
                }
                v.iter()
                    .map(|var| {
                        let mut w = [0.0; 4];
                        for a in 0..4 {
                            if !(var[a] > 0.0 && var[a].is_finite()) {
                                return Err(Error::numerical("non-positive measurement variance"));
                            }
                            w[a] = 1.0 / var[a].sqrt();
                        }
                        Ok(w)
                    })
                    .collect()
            }
        }
    }
}

/// Offset-free measurement model `[tau, tau_r, xi, zeta]` of pair `(i, j)`
/// and its derivatives with respect to `p_i` and `p_j`.
fn pair_model(pi: &Point, pj: &Point, c: f64, center: &Point) -> ([f64; 4], [[Point; 2]; 4]) {
    let diff = pi - pj;
    let d = diff.norm();
    let (ri, rj) = (pi - center, pj - center);
    let (ni, nj) = (ri.norm(), rj.norm());
    let grad_uv = |r: &Point, n: f64| {
        let n3 = n * n * n;
        let dxi = Point::new(-r.x * r.y / n3, 1.0 / n - r.y * r.y / n3, -r.z * r.y / n3);
        let dzeta = Point::new(-r.x * r.z / n3, -r.y * r.z / n3, 1.0 / n - r.z * r.z / n3);
        (dxi, dzeta)
    };
    let (xi_i, ze_i) = grad_uv(&ri, ni);
    let (xi_j, ze_j) = grad_uv(&rj, nj);
    let val = [
        d / c,
        (ni + nj) / c,
        ri.y / ni + rj.y / nj,
        ri.z / ni + rj.z / nj,
    ];
    let jac = [
        [diff / (c * d), -diff / (c * d)],
        [ri / (c * ni), rj / (c * nj)],
        [xi_i, xi_j],
        [ze_i, ze_j],
    ];
    (val, jac)
}

fn residuals(
    x: &DVector<f64>,
    meas: &MeasurementVector,
    weights: &[[f64; 4]],
    c: f64,
    center: &Point,
) -> (DVector<f64>, DMatrix<f64>) {
    let k = meas.k;
    let pairs = unordered_pairs(k);
    let mut r = DVector::zeros(4 * pairs.len());
    let mut jac = DMatrix::zeros(4 * pairs.len(), 3 * k);
    let pos = |u: usize| Point::new(x[3 * u], x[3 * u + 1], x[3 * u + 2]);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let (val, dj) = pair_model(&pos(i), &pos(j), c, center);
        let m = meas.get(i, j).as_array();
        for a in 0..4 {
            let row = 4 * p + a;
            r[row] = weights[p][a] * (val[a] - m[a]);
            for e in 0..3 {
                jac[(row, 3 * i + e)] = weights[p][a] * dj[a][0][e];
                jac[(row, 3 * j + e)] = weights[p][a] * dj[a][1][e];
            }
        }
    }
    (r, jac)
}

/// Weighted least-squares objective at `positions`.
pub fn mle_cost(positions: &[Point], meas: &MeasurementVector, weighting: &Weighting, c: f64, center: &Point) -> Result<f64> {
    let w = weighting.weights(unordered_pairs(meas.k).len(), c)?;
    let x = stack(positions);
    Ok(residuals(&x, meas, &w, c, center).0.norm_squared())
}

fn stack(positions: &[Point]) -> DVector<f64> {
    DVector::from_iterator(3 * positions.len(), positions.iter().flat_map(|p| p.iter().copied()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub positions: Vec<Point>,
    pub start_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    /// Set when the iteration cap was reached before convergence.
    pub hit_iteration_cap: bool,
}

/// Levenberg-Marquardt refinement of all UE positions from `start`.
pub fn mle_refine(
    meas: &MeasurementVector,
    start: &[Point],
    weighting: &Weighting,
    c: f64,
    center: &Point,
) -> Result<Refined> {
    let w = weighting.weights(unordered_pairs(meas.k).len(), c)?;
    let x0 = stack(start);
    let (r0, _) = residuals(&x0, meas, &w, c, center);
    let start_cost = r0.norm_squared();
    if !start_cost.is_finite() {
        return Err(Error::numerical("refinement: non-finite objective at the start point"));
    }
    let res = levenberg_marquardt(&x0, LmOptions::default(), |x| residuals(x, meas, &w, c, center));
    if !res.converged {
        log::warn!("position refinement hit the iteration cap; returning best iterate");
    }
    let positions = (0..meas.k)
        .map(|u| Point::new(res.x[3 * u], res.x[3 * u + 1], res.x[3 * u + 2]))
        .collect();
    Ok(Refined {
        positions,
        start_cost,
        cost: 2.0 * res.value,
        iterations: res.iterations,
        hit_iteration_cap: !res.converged,
    })
}

/// Coarse and refined positions with the intermediate angle estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEstimate {
    pub reference_ue: usize,
    pub angles: Angles,
    pub coarse: CoarseEstimate,
    pub refined: Refined,
    /// Set when no candidate range was feasible and the fallback start was used.
    pub coarse_failed: bool,
}

impl PositionEstimate {
    pub fn coarse_errors(&self, truth: &[Point]) -> Vec<f64> {
        self.coarse.positions.iter().zip(truth).map(|(a, b)| (a - b).norm()).collect()
    }

    pub fn refined_errors(&self, truth: &[Point]) -> Vec<f64> {
        self.refined.positions.iter().zip(truth).map(|(a, b)| (a - b).norm()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LocateOptions {
    pub reference_ue: usize,
    pub d_search: Vec<f64>,
    pub weighting: Weighting,
    pub speed_of_light: f64,
    pub ris_center: Point,
    /// On an all-infeasible coarse search, start the refinement from the
    /// recovered directions at the middle search range instead of failing.
    pub fallback_on_infeasible: bool,
}

/// Angles, coarse search and refinement.
pub fn locate(meas: &MeasurementVector, opts: &LocateOptions) -> Result<PositionEstimate> {
    let xi: Vec<f64> = meas.pairs.iter().map(|p| p.xi).collect();
    let zeta: Vec<f64> = meas.pairs.iter().map(|p| p.zeta).collect();
    let angles = recover_angles(meas.k, &xi, &zeta)?;
    let c = opts.speed_of_light;
    let (coarse, coarse_failed) =
        match coarse_positions(&angles, meas, opts.reference_ue, &opts.d_search, c, &opts.ris_center) {
            Ok(est) => (est, false),
            Err(e) if opts.fallback_on_infeasible && !opts.d_search.is_empty() => {
                log::warn!("{e}; refining from the middle search range");
                let d = opts.d_search[opts.d_search.len() / 2];
                let positions = (0..meas.k)
                    .map(|u| opts.ris_center + angles.direction(u) * d)
                    .collect();
                (CoarseEstimate { positions, d_ref: d, cost: f64::INFINITY }, true)
            }
            Err(e) => return Err(e),
        };
    let refined = mle_refine(meas, &coarse.positions, &opts.weighting, c, &opts.ris_center)?;
    Ok(PositionEstimate {
        reference_ue: opts.reference_ue,
        angles,
        coarse,
        refined,
        coarse_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::spatial_freqs;
    use crate::estimators::PairMeasurement;
    use crate::scenario::Scenario;
    use proptest::prelude::*;

    /// Exact measurements from true positions.
    fn truth_meas(pos: &[Point], c: f64) -> MeasurementVector {
        let k = pos.len();
        let pairs = unordered_pairs(k)
            .into_iter()
            .map(|(i, j)| {
                let (xi, zeta) = spatial_freqs(&pos[i], &pos[j]).unwrap();
                PairMeasurement {
                    i,
                    j,
                    tau_los: (pos[i] - pos[j]).norm() / c,
                    tau_ris: (pos[i].norm() + pos[j].norm()) / c,
                    xi,
                    zeta,
                }
            })
            .collect();
        MeasurementVector { k, pairs, directional: vec![], variances: None }
    }

    fn table1_pos() -> Vec<Point> {
        Scenario::table1().ue_positions
    }

    #[test]
    fn angles_exact_for_table1() {
        let pos = table1_pos();
        let m = truth_meas(&pos, 3e8);
        let xi: Vec<f64> = m.pairs.iter().map(|p| p.xi).collect();
        let zeta: Vec<f64> = m.pairs.iter().map(|p| p.zeta).collect();
        let a = recover_angles(3, &xi, &zeta).unwrap();
        assert!(!a.clamped);
        for (k, p) in pos.iter().enumerate() {
            let u = p / p.norm();
            assert!((a.direction(k) - u).norm() < 1e-12);
        }
        assert!((a.elevation[0] - (-1.0 / 26f64.sqrt()).asin()).abs() < 1e-12);
        assert!((a.elevation[0] + 0.19740).abs() < 1e-5);
    }

    #[test]
    fn boresight_angles_zero() {
        let a = recover_angles(4, &[0.0; 6], &[0.0; 6]).unwrap();
        assert!(a.azimuth.iter().chain(&a.elevation).all(|v| *v == 0.0));
    }

    #[test]
    fn arcsine_violation_clamped() {
        let a = recover_angles(3, &[0.0; 3], &[2.5, 2.5, 2.5]).unwrap();
        assert!(a.clamped);
        assert!(a.elevation.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn range_formula_matches_truth() {
        let pos = table1_pos();
        let m = truth_meas(&pos, 3e8);
        let dirs: Vec<Point> = pos.iter().map(|p| p / p.norm()).collect();
        let placed = place(26f64.sqrt(), 0, &dirs, &m, 3e8, &Point::zeros()).unwrap();
        assert!((placed[1].norm() - 21.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn coarse_exact_on_grid_and_positive_off_truth() {
        let pos = table1_pos();
        let c = 3e8;
        let m = truth_meas(&pos, c);
        let angles = Angles {
            azimuth: pos.iter().map(|p| (p.y / p.norm() / (1.0 - (p.z / p.norm()).powi(2)).sqrt()).asin()).collect(),
            elevation: pos.iter().map(|p| (p.z / p.norm()).asin()).collect(),
            clamped: false,
        };
        let d = 26f64.sqrt();
        let grid = vec![d - 0.1, d, d + 0.1];
        let est = coarse_positions(&angles, &m, 0, &grid, c, &Point::zeros()).unwrap();
        assert!(est.cost < 1e-20);
        for (a, b) in est.positions.iter().zip(&pos) {
            assert!((a - b).norm() < 1e-9);
        }
        let off = coarse_positions(&angles, &m, 0, &[d + 0.5], c, &Point::zeros()).unwrap();
        assert!(off.cost > 0.0);
    }

    #[test]
    fn infeasible_candidates_rejected() {
        let pos = table1_pos();
        let m = truth_meas(&pos, 3e8);
        let angles = recover_angles(3, &m.pairs.iter().map(|p| p.xi).collect::<Vec<_>>(), &m.pairs.iter().map(|p| p.zeta).collect::<Vec<_>>()).unwrap();
        // tiny ranges make the denominator negative
        assert!(coarse_positions(&angles, &m, 0, &[1e-6], 3e8, &Point::zeros()).is_err());
        let mut opts = LocateOptions {
            reference_ue: 0,
            d_search: vec![1e-6],
            weighting: Weighting::Identity,
            speed_of_light: 3e8,
            ris_center: Point::zeros(),
            fallback_on_infeasible: false,
        };
        assert!(locate(&m, &opts).is_err());
        opts.fallback_on_infeasible = true;
        let est = locate(&m, &opts).unwrap();
        assert!(est.coarse_failed);
    }

    #[test]
    fn refinement_stays_at_truth() {
        let pos = table1_pos();
        let m = truth_meas(&pos, 3e8);
        let r = mle_refine(&m, &pos, &Weighting::Identity, 3e8, &Point::zeros()).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.positions, pos);
    }

    #[test]
    fn weighting_invariant_at_exact_fit() {
        let pos = table1_pos();
        let m = truth_meas(&pos, 3e8);
        let start: Vec<Point> = pos.iter().map(|p| p + Point::new(0.05, -0.03, 0.02)).collect();
        let a = mle_refine(&m, &start, &Weighting::Identity, 3e8, &Point::zeros()).unwrap();
        let var = vec![[1e-24, 4e-22, 1e-5, 1e-5]; 3];
        let b = mle_refine(&m, &start, &Weighting::CrlbDiag(var), 3e8, &Point::zeros()).unwrap();
        for ((x, y), t) in a.positions.iter().zip(&b.positions).zip(&pos) {
            assert!((x - t).norm() < 1e-9 && (y - t).norm() < 1e-9);
        }
        assert!(a.cost <= a.start_cost && b.cost <= b.start_cost);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let pos = table1_pos();
        let m = truth_meas(&pos, 3e8);
        let w = Weighting::Identity.weights(3, 3e8).unwrap();
        let x = stack(&pos) + DVector::from_fn(9, |i, _| 0.01 * (i as f64).sin());
        let (_, jac) = residuals(&x, &m, &w, 3e8, &Point::zeros());
        let h = 1e-6;
        for col in 0..9 {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[col] += h;
            dn[col] -= h;
            let fd = (residuals(&up, &m, &w, 3e8, &Point::zeros()).0 - residuals(&dn, &m, &w, 3e8, &Point::zeros()).0) / (2.0 * h);
            let an = jac.column(col).into_owned();
            assert!((&fd - &an).norm() <= 1e-6 * an.norm().max(1e-12), "col {col}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn noiseless_any_reference(
            ues in prop::collection::vec((1.0f64..7.0, -3.5f64..3.5, -2.0f64..2.0), 3..6),
            reference in 0usize..3,
        ) {
            let pos: Vec<Point> = ues.iter().map(|&(x, y, z)| Point::new(x, y, z)).collect();
            for (a, b) in unordered_pairs(pos.len()) {
                prop_assume!((pos[a] - pos[b]).norm() > 0.3);
            }
            let m = truth_meas(&pos, 3e8);
            let opts = LocateOptions {
                reference_ue: reference,
                d_search: default_d_search(),
                weighting: Weighting::Identity,
                speed_of_light: 3e8,
                ris_center: Point::zeros(),
                fallback_on_infeasible: false,
            };
            let est = locate(&m, &opts).unwrap();
            prop_assert!(est.refined.cost <= est.refined.start_cost);
            for (a, b) in est.refined.positions.iter().zip(&pos) {
                prop_assert!((a - b).norm() < 1e-9, "err {}", (a - b).norm());
            }
            // grid step 0.05 m bounds the coarse error by a geometry-dependent constant
            for e in est.coarse_errors(&pos) {
                prop_assert!(e < 40.0 * 0.05, "coarse error {e}");
            }
        }
    }
}
