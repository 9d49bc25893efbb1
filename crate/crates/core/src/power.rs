//! Transmit-power allocation minimizing the average PEB for a fixed RIS schedule.

use nalgebra::DMatrix;

use crate::bounds::{errors_from_inverse, inverse_psd, unit_power_state_fims};
use crate::error::{Error, Result};
use crate::profiles::RisSchedule;
use crate::scenario::{parse_power, Point, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    /// Watts per UE.
    pub powers: Vec<f64>,
    pub peb: Vec<f64>,
    pub avg_peb: f64,
    pub iterations: usize,
}

impl PowerAllocation {
    /// `(P_2 / P_1, P_3 / P_1)` for three-UE scenarios.
    pub fn scaling_factors(&self) -> Option<(f64, f64)> {
        (self.powers.len() == 3).then(|| (self.powers[1] / self.powers[0], self.powers[2] / self.powers[0]))
    }
}

/// Powers from the scaling factors `(eps, ups)`: `P_1 = P_tot / (1 + eps + ups)`.
pub fn powers_from_scaling(total: f64, eps: f64, ups: f64) -> [f64; 3] {
    let p1 = total / (1.0 + eps + ups);
    [p1, eps * p1, ups * p1]
}

#[derive(Debug, Clone, Copy)]
pub struct PowerOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub obj_tol: f64,
    /// Lower bound on each power as a fraction of the total.
    pub floor_fraction: f64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions {
            max_iter: 5000,
            grad_tol: 1e-8,
            obj_tol: 1e-12,
            floor_fraction: 1e-6,
        }
    }
}

/// Average PEB as a function of the power vector, via `J(P) = sum_k P_k J_k`.
pub struct PebModel {
    parts: Vec<DMatrix<f64>>,
    k: usize,
    reference: usize,
}

impl PebModel {
    /// Evaluates the FIM decomposition at `positions` (typically the prior means).
    pub fn new(s: &Scenario, schedule: &RisSchedule, positions: &[Point]) -> Result<Self> {
        let mut at = s.clone();
        at.ue_positions = positions.to_vec();
        Ok(PebModel {
            parts: unit_power_state_fims(&at, schedule)?,
            k: s.num_ues(),
            reference: s.reference_ue,
        })
    }

    fn fim(&self, p: &[f64]) -> DMatrix<f64> {
        let mut j = &self.parts[0] * p[0];
        for (part, pk) in self.parts.iter().zip(p).skip(1) {
            j += part * *pk;
        }
        j
    }

    /// Per-UE PEB.
    pub fn peb(&self, p: &[f64]) -> Result<Vec<f64>> {
        let inv = inverse_psd(&self.fim(p), false)?;
        Ok(errors_from_inverse(&inv, self.k, self.reference).0)
    }

    pub fn avg_peb(&self, p: &[f64]) -> Result<f64> {
        let peb = self.peb(p)?;
        Ok(peb.iter().sum::<f64>() / self.k as f64)
    }

    /// Average PEB and its gradient with respect to the powers.
    pub fn value_and_gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let inv = inverse_psd(&self.fim(p), false)?;
        let (peb, _) = errors_from_inverse(&inv, self.k, self.reference);
        let avg = peb.iter().sum::<f64>() / self.k as f64;
        // d avg / d P_k = -tr(J^-1 S J^-1 J_k) with S = sum_i E_i / (2 K PEB_i)
        let g = inv.nrows();
        let mut s_mat = DMatrix::zeros(g, g);
        for (i, pe) in peb.iter().enumerate() {
            if *pe > 0.0 {
                for a in 0..3 {
                    s_mat[(3 * i + a, 3 * i + a)] = 1.0 / (2.0 * self.k as f64 * pe);
                }
            }
        }
        let m = &inv * s_mat * &inv;
        let grad = self.parts.iter().map(|jk| -m.component_mul(jk).sum()).collect();
        Ok((avg, grad, peb))
    }
}

/// Euclidean projection onto `{x >= lo, sum x = total}`.
pub fn project_simplex(v: &[f64], total: f64, lo: f64) -> Vec<f64> {
    let k = v.len();
    let budget = total - lo * k as f64;
    let shifted: Vec<f64> = v.iter().map(|x| x - lo).collect();
    let mut u = shifted.clone();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - budget) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    shifted.iter().map(|x| (x - theta).max(0.0) + lo).collect()
}

/// Projected-gradient minimization of the average PEB over the power simplex.
/// Returns an error carrying the best iterate if the cap is reached.
pub fn allocate_power(
    s: &Scenario,
    schedule: &RisSchedule,
    prior_means: &[Point],
    opts: PowerOptions,
) -> Result<PowerAllocation> {
    let model = PebModel::new(s, schedule, prior_means)?;
    let k = s.num_ues();
    let total = s.total_power;
    if !(total > 0.0) {
        return Err(Error::validation("power: total power must be positive"));
    }
    let lo = opts.floor_fraction * total;
    let mut p = vec![total / k as f64; k];
    let (mut f, mut g, mut peb) = model.value_and_gradient(&p)?;
    let mut step = 0.1 * total / g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for it in 0..opts.max_iter {
        let pg: Vec<f64> = project_simplex(
            &p.iter().zip(&g).map(|(x, d)| x - d).collect::<Vec<_>>(),
            total,
            lo,
        );
        let pg_norm = p.iter().zip(&pg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if pg_norm < opts.grad_tol {
            return Ok(PowerAllocation { powers: p, peb, avg_peb: f, iterations: it });
        }
        let mut accepted = None;
        for _ in 0..60 {
            let trial = project_simplex(
                &p.iter().zip(&g).map(|(x, d)| x - step * d).collect::<Vec<_>>(),
                total,
                lo,
            );
            let decrease: f64 = g.iter().zip(trial.iter().zip(&p)).map(|(d, (t, x))| d * (t - x)).sum();
            if let Ok((ft, gt, pebt)) = model.value_and_gradient(&trial) {
                if ft <= f + 1e-4 * decrease {
                    accepted = Some((trial, ft, gt, pebt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, ft, gt, pebt)) = accepted else {
            // no descent possible along the projected arc: stationary
            return Ok(PowerAllocation { powers: p, peb, avg_peb: f, iterations: it });
        };
        let change = f - ft;
        // Barzilai-Borwein step for the next iteration
        let sv: Vec<f64> = trial.iter().zip(&p).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = sv.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { ss / sy } else { step * 2.0 };
        p = trial;
        f = ft;
        g = gt;
        peb = pebt;
        if change < opts.obj_tol {
            return Ok(PowerAllocation { powers: p, peb, avg_peb: f, iterations: it + 1 });
        }
    }
    Err(Error::numerical(format!(
        "power allocation did not converge; best iterate {:?} with average PEB {f:.6e} m",
        p
    )))
}

/// How transmit powers are chosen before bounds or trials are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum PowerStrategy {
    /// Total power split evenly.
    Uniform,
    /// [`allocate_power`] at the prior means.
    Optimal,
    /// Explicit per-UE powers, watts.
    Manual(Vec<f64>),
}

impl PowerStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            PowerStrategy::Uniform => "uniform",
            PowerStrategy::Optimal => "optimal",
            PowerStrategy::Manual(_) => "manual",
        }
    }

    /// Copy of `s` with the strategy's powers; the total is preserved except
    /// for manual powers, which define it.
    pub fn apply(&self, s: &Scenario, schedule: &RisSchedule) -> Result<Scenario> {
        let mut out = s.clone();
        let k = s.num_ues();
        match self {
            PowerStrategy::Uniform => out.tx_powers = vec![s.total_power / k as f64; k],
            PowerStrategy::Optimal => {
                let means: Vec<Point> = s.priors.iter().map(|p| p.mean).collect();
                out.tx_powers = allocate_power(s, schedule, &means, PowerOptions::default())?.powers;
            }
            PowerStrategy::Manual(p) => {
                if p.len() != k {
                    return Err(Error::validation(format!(
                        "power: {} manual powers given for {k} UEs",
                        p.len()
                    )));
                }
                out.tx_powers = p.clone();
                out.total_power = p.iter().sum();
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl std::str::FromStr for PowerStrategy {
    type Err = Error;
    /// `uniform`, `optimal` or `manual:<p1>,<p2>,...` with powers in watts
    /// or suffixed (`200mW`, `23dBm`).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PowerStrategy::Uniform),
            "optimal" => Ok(PowerStrategy::Optimal),
            _ => {
                let list = s
                    .strip_prefix("manual:")
                    .ok_or_else(|| Error::validation(format!("unknown power allocation '{s}'")))?;
                list.split(',')
                    .map(|v| {
                        let v = v.trim();
                        match v.parse::<f64>() {
                            Ok(w) => Ok(w),
                            Err(_) => parse_power(v),
                        }
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(PowerStrategy::Manual)
            }
        }
    }
}
