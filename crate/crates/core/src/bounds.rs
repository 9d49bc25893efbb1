//! Fisher information of the channel parameters, the map to the state
//! (positions, clock offsets, gains) and the resulting PEB / CEB.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SMatrix, SymmetricEigen};

use crate::channel::{
    channel_params, delay_steering, ordered_pairs, ris_response, PairParams, C64, ETA_NAMES,
};
use crate::error::{Error, Result};
use crate::profiles::RisSchedule;
use crate::scenario::Scenario;

pub type Matrix8 = SMatrix<f64, 8, 8>;

/// Eigenvalue ratio below which a Fisher matrix is declared singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Static quantities shared by every derivative of one ordered pair.
struct PairModel<'a> {
    sqrt_e: f64,
    n: usize,
    df: f64,
    k: f64,
    elements: &'a [(f64, f64)],
}

/// The four vectors every mean derivative is a multiple of:
/// `d(tau)`, `n . d(tau)`, `d(tau_r)`, `n . d(tau_r)`.
const D: usize = 0;
const ND: usize = 1;
const DR: usize = 2;
const NDR: usize = 3;

/// Basis index of each of the eight derivatives.
const BASIS: [usize; 8] = [ND, NDR, DR, DR, D, D, DR, DR];

impl PairModel<'_> {
    /// Per-slot RIS sums `c^T w`, `(p_y . c)^T w`, `(p_z . c)^T w`.
    fn ris_sums(&self, pp: &PairParams, omega: &DVector<C64>) -> [C64; 3] {
        let c = ris_response((pp.xi, pp.zeta), self.elements, 2.0 * PI / self.k);
        let mut out = [C64::new(0.0, 0.0); 3];
        for ((cm, w), (y, z)) in c.iter().zip(omega.iter()).zip(self.elements) {
            let v = cm * w;
            out[0] += v;
            out[1] += v * *y;
            out[2] += v * *z;
        }
        out
    }

    /// Scalar multipliers of [`BASIS`] for the eight derivatives in one slot.
    fn coefficients(&self, pp: &PairParams, sums: [C64; 3]) -> [C64; 8] {
        let j = C64::new(0.0, 1.0);
        let a = self.sqrt_e;
        let (b, br) = (pp.gain_los, pp.gain_ris);
        let (s, sy, sz) = (sums[0], sums[1], sums[2]);
        let w = -j * 2.0 * PI * self.df * a;
        let e_rho = C64::from_polar(1.0, pp.gain_los.arg());
        let e_rho_r = C64::from_polar(1.0, pp.gain_ris.arg());
        [
            w * b,
            w * br * s,
            j * self.k * a * br * sy,
            j * self.k * a * br * sz,
            a * e_rho,
            j * a * b,
            a * e_rho_r * s,
            j * a * br * s,
        ]
    }

    /// Gram matrix `G[k][l] = b_k^H b_l` of the four basis vectors.
    fn gram(&self, pp: &PairParams) -> [[C64; 4]; 4] {
        let w = -2.0 * PI * self.df;
        let mut g = [[C64::new(0.0, 0.0); 4]; 4];
        for n in 0..self.n {
            let nf = n as f64;
            let d = C64::from_polar(1.0, w * pp.tau_los * nf);
            let dr = C64::from_polar(1.0, w * pp.tau_ris * nf);
            let b = [d, d * nf, dr, dr * nf];
            for k in 0..4 {
                for l in k..4 {
                    g[k][l] += b[k].conj() * b[l];
                }
            }
        }
        for k in 0..4 {
            for l in 0..k {
                g[k][l] = g[l][k].conj();
            }
        }
        g
    }
}

/// The eight partial derivatives of the noiseless mean of pair `pp` in a
/// slot with RIS profile `omega`, in `[tau, tau_r, xi, zeta, alpha, rho, alpha_r, rho_r]` order.
pub fn mu_derivatives(s: &Scenario, pp: &PairParams, omega: &DVector<C64>) -> [DVector<C64>; 8] {
    let elements = s.element_offsets();
    let m = PairModel {
        sqrt_e: s.energy(pp.tx).sqrt(),
        n: s.n_subcarriers,
        df: s.subcarrier_spacing,
        k: 2.0 * PI / s.wavelength,
        elements: &elements,
    };
    let coef = m.coefficients(pp, m.ris_sums(pp, omega));
    let d = delay_steering(pp.tau_los, m.n, m.df);
    let dr = delay_steering(pp.tau_ris, m.n, m.df);
    let ramp = DVector::from_fn(m.n, |n, _| C64::new(n as f64, 0.0));
    let basis = [d.clone(), d.component_mul(&ramp), dr.clone(), dr.component_mul(&ramp)];
    std::array::from_fn(|b| &basis[BASIS[b]] * coef[b])
}

/// Fisher information of one ordered pair's eight parameters.
pub fn fim_pair(s: &Scenario, schedule: &RisSchedule, pp: &PairParams) -> Matrix8 {
    let elements = s.element_offsets();
    fim_pair_with(s, schedule, pp, &elements)
}

fn fim_pair_with(
    s: &Scenario,
    schedule: &RisSchedule,
    pp: &PairParams,
    elements: &[(f64, f64)],
) -> Matrix8 {
    let m = PairModel {
        sqrt_e: s.energy(pp.tx).sqrt(),
        n: s.n_subcarriers,
        df: s.subcarrier_spacing,
        k: 2.0 * PI / s.wavelength,
        elements,
    };
    let g = m.gram(pp);
    let mut acc = [[C64::new(0.0, 0.0); 8]; 8];
    for t in 0..schedule.slots() {
        let coef = m.coefficients(pp, m.ris_sums(pp, schedule.omega(pp.tx, t)));
        for b in 0..8 {
            for v in b..8 {
                acc[b][v] += coef[b].conj() * coef[v] * g[BASIS[b]][BASIS[v]];
            }
        }
    }
    let scale = 2.0 / s.noise_variance;
    let mut j = Matrix8::zeros();
    for b in 0..8 {
        for v in b..8 {
            let val = scale * acc[b][v].re;
            j[(b, v)] = val;
            j[(v, b)] = val;
        }
    }
    j
}

/// Per-pair Fisher blocks in ordered-pair order.
pub fn fim_blocks(s: &Scenario, schedule: &RisSchedule) -> Result<Vec<Matrix8>> {
    let params = channel_params(s)?;
    let elements = s.element_offsets();
    Ok(params
        .pairs
        .iter()
        .map(|pp| fim_pair_with(s, schedule, pp, &elements))
        .collect())
}

/// Assembles per-pair blocks into the block-diagonal `f x f` matrix.
pub fn block_diag(blocks: &[Matrix8]) -> DMatrix<f64> {
    let f = 8 * blocks.len();
    let mut j = DMatrix::zeros(f, f);
    for (p, b) in blocks.iter().enumerate() {
        j.view_mut((8 * p, 8 * p), (8, 8)).copy_from(b);
    }
    j
}

/// Channel-parameter Fisher information `J_eta` (`f = 8 K (K - 1)`).
pub fn fim_channel(s: &Scenario, schedule: &RisSchedule) -> Result<DMatrix<f64>> {
    Ok(block_diag(&fim_blocks(s, schedule)?))
}

/// Length of the state-plus-gains vector `h`.
pub fn state_len(k: usize) -> usize {
    4 * k - 1 + 4 * k * (k - 1)
}

/// Row of the clock offset of UE `ue` in `h`, `None` for the reference.
pub fn clock_row(k: usize, reference: usize, ue: usize) -> Option<usize> {
    match ue.cmp(&reference) {
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Less => Some(3 * k + ue),
        std::cmp::Ordering::Greater => Some(3 * k + ue - 1),
    }
}

/// Jacobian `T = d eta^T / d h` of size `g x f`. Rows follow
/// `h = [positions, clock offsets (reference excluded), alpha, alpha_r, rho, rho_r]`,
/// columns follow the stacked per-pair parameter vector.
pub fn state_jacobian(s: &Scenario) -> Result<DMatrix<f64>> {
    let k = s.num_ues();
    let pairs = ordered_pairs(k);
    let np = pairs.len();
    let c = s.speed_of_light;
    let mut t = DMatrix::zeros(state_len(k), 8 * np);
    let gains0 = 4 * k - 1;
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let col = 8 * p;
        let diff = s.ue_positions[i] - s.ue_positions[j];
        let d = diff.norm();
        if d == 0.0 {
            return Err(Error::validation("zero distance: UE-UE"));
        }
        for (ue, sign) in [(i, 1.0), (j, -1.0)] {
            let g = diff * (sign / (c * d));
            let rel = s.ue_rel(ue);
            let r = rel.norm();
            if r == 0.0 {
                return Err(Error::validation("UE coincides with RIS center"));
            }
            let r3 = r * r * r;
            let (x, y, z) = (rel.x, rel.y, rel.z);
            let dxi = [-x * y / r3, 1.0 / r - y * y / r3, -z * y / r3];
            let dzeta = [-x * z / r3, -y * z / r3, 1.0 / r - z * z / r3];
            for a in 0..3 {
                let row = 3 * ue + a;
                t[(row, col)] += g[a];
                t[(row, col + 1)] += rel[a] / (c * r);
                t[(row, col + 2)] += dxi[a];
                t[(row, col + 3)] += dzeta[a];
            }
        }
        for (ue, sign) in [(j, 1.0), (i, -1.0)] {
            if let Some(row) = clock_row(k, s.reference_ue, ue) {
                t[(row, col)] = sign;
                t[(row, col + 1)] = sign;
            }
        }
        t[(gains0 + p, col + 4)] = 1.0;
        t[(gains0 + np + p, col + 6)] = 1.0;
        t[(gains0 + 2 * np + p, col + 5)] = 1.0;
        t[(gains0 + 3 * np + p, col + 7)] = 1.0;
    }
    Ok(t)
}

/// Inverse of a symmetric PSD matrix via diagonal equilibration and an
/// eigendecomposition. Fails with "unidentifiable state" when the condition
/// number exceeds `1 / SINGULAR_TOL`, unless `allow_singular` requests the
/// pseudo-inverse.
pub fn inverse_psd(j: &DMatrix<f64>, allow_singular: bool) -> Result<DMatrix<f64>> {
    let n = j.nrows();
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("Fisher matrix has non-finite entries"));
    }
    let dscale = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let v = j[(i, i)];
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        }),
    );
    let mut a = j.clone();
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] *= dscale[r] * dscale[c];
        }
    }
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let zero_diag = dscale.iter().any(|v| *v == 0.0);
    if !(lmax > 0.0) || zero_diag || lmin / lmax < SINGULAR_TOL {
        if !allow_singular {
            return Err(Error::numerical(format!(
                "unidentifiable state: Fisher matrix is singular (eigenvalue ratio {:.3e})",
                if lmax > 0.0 { lmin / lmax } else { 0.0 }
            )));
        }
    }
    let cutoff = SINGULAR_TOL * lmax.max(0.0);
    let inv_vals = eig
        .eigenvalues
        .map(|v| if v > cutoff { 1.0 / v } else { 0.0 });
    let v = &eig.eigenvectors;
    let mut inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    for r in 0..n {
        for c in 0..n {
            inv[(r, c)] *= dscale[r] * dscale[c];
        }
    }
    Ok(inv)
}

/// Numerical rank of a symmetric PSD matrix after equilibration.
pub fn psd_rank(j: &DMatrix<f64>) -> usize {
    let n = j.nrows();
    let mut a = j.clone();
    for r in 0..n {
        for c in 0..n {
            let (dr, dc) = (j[(r, r)], j[(c, c)]);
            a[(r, c)] = if dr > 0.0 && dc > 0.0 { a[(r, c)] / (dr * dc).sqrt() } else { 0.0 };
        }
    }
    let eig = SymmetricEigen::new((&a + a.transpose()) * 0.5);
    let lmax = eig.eigenvalues.max();
    eig.eigenvalues.iter().filter(|v| **v > SINGULAR_TOL * lmax).count()
}

/// PEB per UE and CEB per non-reference UE from an inverted state FIM.
pub fn errors_from_inverse(inv: &DMatrix<f64>, k: usize, reference: usize) -> (Vec<f64>, Vec<f64>) {
    let peb = (0..k)
        .map(|u| (0..3).map(|a| inv[(3 * u + a, 3 * u + a)]).sum::<f64>().max(0.0).sqrt())
        .collect();
    let ceb = (0..k)
        .filter_map(|u| clock_row(k, reference, u))
        .map(|r| inv[(r, r)].max(0.0).sqrt())
        .collect();
    (peb, ceb)
}

/// PEB and CEB from `J = T J_eta T^T`.
pub fn peb_ceb(
    j_eta: &DMatrix<f64>,
    t_mat: &DMatrix<f64>,
    k: usize,
    reference: usize,
    allow_singular: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let j = t_mat * j_eta * t_mat.transpose();
    let inv = inverse_psd(&j, allow_singular)?;
    Ok(errors_from_inverse(&inv, k, reference))
}

/// Named CRLB standard deviation of one channel parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBound {
    pub name: String,
    pub tx: usize,
    pub rx: usize,
    /// Index into `[tau, tau_r, xi, zeta, alpha, rho, alpha_r, rho_r]`.
    pub param: usize,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub j_eta: DMatrix<f64>,
    pub t_mat: DMatrix<f64>,
    pub j_state: DMatrix<f64>,
    pub peb: Vec<f64>,
    pub ceb: Vec<f64>,
    pub crlb: Vec<ParamBound>,
}

impl BoundReport {
    pub fn crlb_of(&self, tx: usize, rx: usize, param: usize) -> f64 {
        self.crlb
            .iter()
            .find(|b| b.tx == tx && b.rx == rx && b.param == param)
            .map(|b| b.std)
            .unwrap_or(f64::NAN)
    }

    pub fn average_peb(&self) -> f64 {
        self.peb.iter().sum::<f64>() / self.peb.len() as f64
    }
}

/// Parameter label such as `tau_r_12` (UE indices one-based).
pub fn param_name(tx: usize, rx: usize, param: usize) -> String {
    format!("{}_{}{}", ETA_NAMES[param], tx + 1, rx + 1)
}

/// CRLB standard deviations from the per-pair blocks (full block inverse).
pub fn channel_crlb(blocks: &[Matrix8], k: usize, allow_singular: bool) -> Result<Vec<ParamBound>> {
    let mut out = Vec::with_capacity(8 * blocks.len());
    for (b, (i, j)) in blocks.iter().zip(ordered_pairs(k)) {
        let inv = inverse_psd(&DMatrix::from_column_slice(8, 8, b.as_slice()), allow_singular)?;
        for p in 0..8 {
            out.push(ParamBound {
                name: param_name(i, j, p),
                tx: i,
                rx: j,
                param: p,
                std: inv[(p, p)].max(0.0).sqrt(),
            });
        }
    }
    Ok(out)
}

/// Full bound computation for a scenario and schedule.
pub fn bound_report(s: &Scenario, schedule: &RisSchedule, allow_singular: bool) -> Result<BoundReport> {
    let blocks = fim_blocks(s, schedule)?;
    let j_eta = block_diag(&blocks);
    let t_mat = state_jacobian(s)?;
    let j_state = &t_mat * &j_eta * t_mat.transpose();
    let inv = inverse_psd(&j_state, allow_singular)?;
    let (peb, ceb) = errors_from_inverse(&inv, s.num_ues(), s.reference_ue);
    let crlb = channel_crlb(&blocks, s.num_ues(), allow_singular)?;
    Ok(BoundReport {
        j_eta,
        t_mat,
        j_state,
        peb,
        ceb,
        crlb,
    })
}

/// State FIM contribution of each transmitter at unit transmit power, so
/// that `J(P) = sum_i P_i J_i`.
pub fn unit_power_state_fims(s: &Scenario, schedule: &RisSchedule) -> Result<Vec<DMatrix<f64>>> {
    let k = s.num_ues();
    let mut unit = s.clone();
    unit.tx_powers = vec![1.0; k];
    let blocks = fim_blocks(&unit, schedule)?;
    let t_mat = state_jacobian(s)?;
    let pairs = ordered_pairs(k);
    let g = t_mat.nrows();
    let mut out = vec![DMatrix::zeros(g, g); k];
    for (p, &(i, _)) in pairs.iter().enumerate() {
        let tp = t_mat.columns(8 * p, 8);
        out[i] += &tp * blocks[p] * tp.transpose();
    }
    Ok(out)
}
