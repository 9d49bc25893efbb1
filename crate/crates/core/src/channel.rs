//! Geometric sidelink channel: steering vectors, channel parameters and
//! synthesis of noiseless means and noisy OFDM observations.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::profiles::RisSchedule;
use crate::scenario::{Point, Scenario};

pub type C64 = Complex64;

/// Ordered pairs `(tx, rx)` in the canonical channel-parameter order:
/// (0,1), (0,2), ..., (1,0), (1,2), ...
pub fn ordered_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Position of `(i, j)` in [`ordered_pairs`].
pub fn pair_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < k && j < k);
    i * (k - 1) + if j < i { j } else { j - 1 }
}

/// Unordered pairs `i < j` in lexicographic order.
pub fn unordered_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect()
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let r = x.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Delay steering vector, entry `n` equal to `exp(-j 2 pi tau n df)`.
pub fn delay_steering(tau: f64, n: usize, df: f64) -> DVector<C64> {
    let w = -2.0 * PI * tau * df;
    DVector::from_iterator(n, (0..n).map(|k| C64::from_polar(1.0, w * k as f64)))
}

/// RIS response `c(gamma)_m = exp(j 2 pi / lambda (y_m xi + z_m zeta))` for
/// element offsets `(y_m, z_m)` relative to the RIS centre.
pub fn ris_response(gamma: (f64, f64), elements: &[(f64, f64)], wavelength: f64) -> DVector<C64> {
    let k = 2.0 * PI / wavelength;
    DVector::from_iterator(
        elements.len(),
        elements
            .iter()
            .map(|(y, z)| C64::from_polar(1.0, k * (y * gamma.0 + z * gamma.1))),
    )
}

/// Spatial frequencies `(xi, zeta)` of the UE pair, positions relative to the RIS centre.
pub fn spatial_freqs(p_i: &Point, p_j: &Point) -> Result<(f64, f64)> {
    let (ni, nj) = (p_i.norm(), p_j.norm());
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::validation("UE coincides with RIS center"));
    }
    let (ui, uj) = (p_i / ni, p_j / nj);
    // summed in index-independent order so (i, j) and (j, i) agree bitwise
    let (a, b) = if (ui.y, ui.z) <= (uj.y, uj.z) { (ui, uj) } else { (uj, ui) };
    Ok((a.y + b.y, a.z + b.z))
}

/// Complex gains of the LoS path, the RIS path and every scatter-point path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGains {
    pub los: C64,
    pub ris: C64,
    pub sp: Vec<C64>,
}

fn gain(alpha: f64, path_len: f64, wavelength: f64) -> C64 {
    C64::from_polar(alpha, wrap_phase(-2.0 * PI / wavelength * path_len))
}

fn nonzero(d: f64, what: &str) -> Result<f64> {
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::validation(format!("zero distance: {what}")))
    }
}

/// Free-space path gains for transmitter `i` and receiver `j`.
pub fn path_gains(s: &Scenario, i: usize, j: usize) -> Result<PathGains> {
    let lam = s.wavelength;
    let d_uu = nonzero((s.ue_positions[i] - s.ue_positions[j]).norm(), "UE-UE")?;
    let d_ri = nonzero(s.ris_distance(i), "RIS-UE")?;
    let d_rj = nonzero(s.ris_distance(j), "RIS-UE")?;
    let los = gain(lam / (4.0 * PI * d_uu), d_uu, lam);
    let ris = gain(lam * lam / (16.0 * PI * PI * d_ri * d_rj), d_ri + d_rj, lam);
    let rcs_amp = (s.rcs / (4.0 * PI)).sqrt();
    let sp = match s.sp_positions.get(j) {
        Some(points) => points
            .iter()
            .map(|p| {
                let d1 = nonzero((s.ue_positions[i] - p).norm(), "UE-SP")?;
                let d2 = nonzero((s.ue_positions[j] - p).norm(), "UE-SP")?;
                Ok(gain(rcs_amp * lam / (4.0 * PI * d1 * d2), d1 + d2, lam))
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    Ok(PathGains { los, ris, sp })
}

/// Channel parameters of one ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairParams {
    pub tx: usize,
    pub rx: usize,
    pub tau_los: f64,
    pub tau_ris: f64,
    pub xi: f64,
    pub zeta: f64,
    pub gain_los: C64,
    pub gain_ris: C64,
    /// `(delay, gain)` per scatter point seen by the receiver.
    pub sp: Vec<(f64, C64)>,
}

/// Names of the eight entries of a per-pair parameter vector.
pub const ETA_NAMES: [&str; 8] = [
    "tau", "tau_r", "xi", "zeta", "alpha", "rho", "alpha_r", "rho_r",
];

impl PairParams {
    /// `[tau, tau_r, xi, zeta, alpha, rho, alpha_r, rho_r]`.
    pub fn eta(&self) -> [f64; 8] {
        [
            self.tau_los,
            self.tau_ris,
            self.xi,
            self.zeta,
            self.gain_los.norm(),
            self.gain_los.arg(),
            self.gain_ris.norm(),
            self.gain_ris.arg(),
        ]
    }
}

/// Parameters of every ordered pair, in [`ordered_pairs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParamSet {
    pub k: usize,
    pub pairs: Vec<PairParams>,
}

impl ChannelParamSet {
    pub fn get(&self, i: usize, j: usize) -> &PairParams {
        &self.pairs[pair_index(self.k, i, j)]
    }

    /// Stacked parameter vector of length `8 K (K - 1)`.
    pub fn eta(&self) -> Vec<f64> {
        self.pairs.iter().flat_map(|p| p.eta()).collect()
    }
}

pub fn pair_params(s: &Scenario, i: usize, j: usize) -> Result<PairParams> {
    let c = s.speed_of_light;
    let dt = s.clock_offsets[j] - s.clock_offsets[i];
    let d_uu = (s.ue_positions[i] - s.ue_positions[j]).norm();
    let (d_ri, d_rj) = (s.ris_distance(i), s.ris_distance(j));
    let (xi, zeta) = spatial_freqs(&s.ue_rel(i), &s.ue_rel(j))?;
    let g = path_gains(s, i, j)?;
    let sp = match s.sp_positions.get(j) {
        Some(points) => points
            .iter()
            .zip(&g.sp)
            .map(|(p, b)| {
                let len = (s.ue_positions[i] - p).norm() + (s.ue_positions[j] - p).norm();
                (len / c + dt, *b)
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(PairParams {
        tx: i,
        rx: j,
        tau_los: d_uu / c + dt,
        tau_ris: (d_ri + d_rj) / c + dt,
        xi,
        zeta,
        gain_los: g.los,
        gain_ris: g.ris,
        sp,
    })
}

pub fn channel_params(s: &Scenario) -> Result<ChannelParamSet> {
    let k = s.num_ues();
    let pairs = ordered_pairs(k)
        .into_iter()
        .map(|(i, j)| pair_params(s, i, j))
        .collect::<Result<_>>()?;
    Ok(ChannelParamSet { k, pairs })
}

/// Static per-pair quantities for evaluating the mean signal from an
/// 8-entry parameter vector.
#[derive(Debug, Clone)]
pub struct MeanModel<'a> {
    pub energy: f64,
    pub n_subcarriers: usize,
    pub subcarrier_spacing: f64,
    pub wavelength: f64,
    pub elements: &'a [(f64, f64)],
}

impl MeanModel<'_> {
    /// Noiseless LoS + RIS mean `mu` for parameter vector `eta` and RIS profile `omega`.
    pub fn mean(&self, eta: &[f64; 8], omega: &DVector<C64>) -> DVector<C64> {
        let sq = self.energy.sqrt();
        let beta = C64::from_polar(eta[4], eta[5]);
        let beta_r = C64::from_polar(eta[6], eta[7]);
        let cw = ris_response((eta[2], eta[3]), self.elements, self.wavelength).dot(omega);
        let d = delay_steering(eta[0], self.n_subcarriers, self.subcarrier_spacing);
        let dr = delay_steering(eta[1], self.n_subcarriers, self.subcarrier_spacing);
        d * (beta * sq) + dr * (beta_r * sq * cw)
    }
}

/// Received OFDM vectors for every (transmitter, receiver, slot).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub k: usize,
    pub n_subcarriers: usize,
    pub slots: usize,
    /// Per ordered pair an `N x T` matrix, column `t` is slot `t`.
    pub y: Vec<DMatrix<C64>>,
    pub means: Option<Vec<DMatrix<C64>>>,
}

impl ObservationSet {
    pub fn pair(&self, i: usize, j: usize) -> &DMatrix<C64> {
        &self.y[pair_index(self.k, i, j)]
    }

    /// Writes `(i, j, t, subcarrier, re, im)` rows; UE and slot indices are one-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "t", "subcarrier", "re", "im"])?;
        for (p, (i, j)) in ordered_pairs(self.k).into_iter().enumerate() {
            let m = &self.y[p];
            for t in 0..self.slots {
                for n in 0..self.n_subcarriers {
                    let v = m[(n, t)];
                    w.write_record(&[
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        (t + 1).to_string(),
                        n.to_string(),
                        format!("{:e}", v.re),
                        format!("{:e}", v.im),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Noise stream id for slot `t` of ordered pair `pair`.
fn stream_id(pair: usize, slots: usize, t: usize) -> u64 {
    (pair * slots + t) as u64
}

pub fn synthesize(s: &Scenario, schedule: &RisSchedule, seed: u64) -> Result<ObservationSet> {
    synthesize_with(s, schedule, seed, false)
}

/// Synthesizes `y = mu + n` per ordered pair and slot; `keep_means` also
/// stores the noiseless means. Noise for each (pair, slot) comes from its own
/// ChaCha stream, so the output depends only on `(scenario, schedule, seed)`.
pub fn synthesize_with(
    s: &Scenario,
    schedule: &RisSchedule,
    seed: u64,
    keep_means: bool,
) -> Result<ObservationSet> {
    let k = s.num_ues();
    let t_slots = s.slots_per_ue;
    let n = s.n_subcarriers;
    if schedule.num_transmitters() != k
        || schedule.slots() != t_slots
        || schedule.num_elements() != s.num_elements()
    {
        return Err(Error::validation(format!(
            "schedule shape {}x{}x{} does not match scenario {}x{}x{}",
            schedule.num_transmitters(),
            schedule.slots(),
            schedule.num_elements(),
            k,
            t_slots,
            s.num_elements()
        )));
    }
    let elements = s.element_offsets();
    let params = channel_params(s)?;
    let std = (s.noise_variance / 2.0).sqrt();
    let df = s.subcarrier_spacing;

    let mut ys = Vec::with_capacity(params.pairs.len());
    let mut means = Vec::new();
    for (p, pp) in params.pairs.iter().enumerate() {
        let sq = s.energy(pp.tx).sqrt();
        let mut los = delay_steering(pp.tau_los, n, df) * (pp.gain_los * sq);
        for (tau, b) in &pp.sp {
            los += delay_steering(*tau, n, df) * (*b * sq);
        }
        let ris = delay_steering(pp.tau_ris, n, df) * (pp.gain_ris * sq);
        let c = ris_response((pp.xi, pp.zeta), &elements, s.wavelength);

        let mut mu = DMatrix::<C64>::zeros(n, t_slots);
        for t in 0..t_slots {
            let cw = c.dot(schedule.omega(pp.tx, t));
            let mut col = mu.column_mut(t);
            col.copy_from(&los);
            col.axpy(cw, &ris, C64::new(1.0, 0.0));
        }
        let mut y = mu.clone();
        if std > 0.0 {
            for t in 0..t_slots {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream_id(p, t_slots, t));
                for v in y.column_mut(t).iter_mut() {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    *v += C64::new(re * std, im * std);
                }
            }
        }
        ys.push(y);
        if keep_means {
            means.push(mu);
        }
    }
    Ok(ObservationSet {
        k,
        n_subcarriers: n,
        slots: t_slots,
        y: ys,
        means: keep_means.then_some(means),
    })
}
