//! Channel-parameter estimators: LoS/RIS separation, IFFT delay search with
//! sub-bin refinement, spatial-frequency search and bidirectional averaging.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::{Fft, FftPlanner};

use crate::channel::{ordered_pairs, pair_index, unordered_pairs, ObservationSet, C64};
use crate::error::{Error, Result};
use crate::optim::{bfgs_box, BfgsOptions};
use crate::profiles::RisSchedule;
use crate::scenario::Scenario;

/// Halved slot differences (RIS path) and sums (LoS path) per ordered pair.
#[derive(Debug, Clone)]
pub struct SeparatedObservations {
    pub k: usize,
    pub ris: Vec<DMatrix<C64>>,
    pub los: Vec<DMatrix<C64>>,
}

impl SeparatedObservations {
    pub fn ris(&self, i: usize, j: usize) -> &DMatrix<C64> {
        &self.ris[pair_index(self.k, i, j)]
    }

    pub fn los(&self, i: usize, j: usize) -> &DMatrix<C64> {
        &self.los[pair_index(self.k, i, j)]
    }
}

pub fn separate(obs: &ObservationSet) -> Result<SeparatedObservations> {
    if obs.slots % 2 != 0 {
        return Err(Error::validation(
            "orthogonal pairing: an even number of slots is required",
        ));
    }
    let half = obs.slots / 2;
    let mut ris = Vec::with_capacity(obs.y.len());
    let mut los = Vec::with_capacity(obs.y.len());
    for y in &obs.y {
        let n = y.nrows();
        let mut r = DMatrix::zeros(n, half);
        let mut l = DMatrix::zeros(n, half);
        for t in 0..half {
            let (a, b) = (y.column(2 * t), y.column(2 * t + 1));
            r.set_column(t, &((a - b) * C64::new(0.5, 0.0)));
            l.set_column(t, &((a + b) * C64::new(0.5, 0.0)));
        }
        ris.push(r);
        los.push(l);
    }
    Ok(SeparatedObservations { k: obs.k, ris, los })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    /// Refined delay, seconds in `[0, 1 / df)`.
    pub tau: f64,
    /// Peak IFFT bin.
    pub bin: usize,
    /// Sub-bin correction, seconds (`tau = bin / (nf df) - delta`).
    pub delta: f64,
}

/// Zero-padded IFFT delay estimator with a reusable FFT plan.
pub struct DelayEstimator {
    fft: Arc<dyn Fft<f64>>,
    nf: usize,
    df: f64,
}

impl DelayEstimator {
    pub fn new(nf: usize, df: f64) -> Self {
        let fft = FftPlanner::new().plan_fft_inverse(nf);
        DelayEstimator { fft, nf, df }
    }

    /// Coarse bin from the IFFT row energies (lowest index wins ties).
    pub fn coarse_bin(&self, y: &DMatrix<C64>) -> Result<usize> {
        let (n, nf) = (y.nrows(), self.nf);
        if nf < n {
            return Err(Error::validation("IFFT length must be at least N"));
        }
        let mut energy = vec![0.0; nf];
        let mut buf = vec![C64::new(0.0, 0.0); nf];
        let mut scratch = vec![C64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let scale = 1.0 / nf as f64;
        for col in y.column_iter() {
            buf[..n].copy_from_slice(col.as_slice());
            buf[n..].fill(C64::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (e, v) in energy.iter_mut().zip(&buf) {
                *e += (v * scale).norm_sqr();
            }
        }
        let mut best = 0;
        for (l, e) in energy.iter().enumerate() {
            if *e > energy[best] {
                best = l;
            }
        }
        if !(energy[best] > 0.0) {
            return Err(Error::numerical("no signal energy"));
        }
        Ok(best)
    }

    /// Coarse search then sub-bin refinement maximizing
    /// `sum_t |sum_n y_nt exp(j 2 pi n (l - x) / nf)|^2` over `x` in bins.
    pub fn estimate(&self, y: &DMatrix<C64>) -> Result<DelayEstimate> {
        let bin = self.coarse_bin(y)?;
        let nf = self.nf as f64;
        let n = y.nrows();
        let cols_owned: Vec<Vec<C64>> = y.column_iter().map(|c| c.iter().copied().collect()).collect();
        let eval = |x: f64| -> (f64, f64) {
            let theta = 2.0 * PI * (bin as f64 - x) / nf;
            let mut g = 0.0;
            let mut dg = 0.0;
            let ph: Vec<C64> = (0..n).map(|k| C64::from_polar(1.0, theta * k as f64)).collect();
            for col in &cols_owned {
                let mut a = C64::new(0.0, 0.0);
                let mut da = C64::new(0.0, 0.0);
                for (k, (v, p)) in col.iter().zip(&ph).enumerate() {
                    let w = v * p;
                    a += w;
                    da += w * k as f64;
                }
                // d/dx of the phase is -2 pi k / nf
                da *= C64::new(0.0, -2.0 * PI / nf);
                g += a.norm_sqr();
                dg += 2.0 * (a.conj() * da).re;
            }
            (g, dg)
        };
        let (g0, _) = eval(0.0);
        let scale = 1.0 / g0;
        let res = bfgs_box(
            &DVector::from_element(1, 0.0),
            &[-1.0],
            &[1.0],
            BfgsOptions::default(),
            |x| {
                let (g, dg) = eval(x[0]);
                (-g * scale, DVector::from_element(1, -dg * scale))
            },
        );
        let step = 1.0 / (nf * self.df);
        let delta = res.x[0] * step;
        let period = 1.0 / self.df;
        let tau = (bin as f64 * step - delta).rem_euclid(period);
        Ok(DelayEstimate { tau, bin, delta })
    }
}

/// One-shot delay estimate of the `N x T'` matrix `y`.
pub fn estimate_delay(y: &DMatrix<C64>, nf: usize, df: f64) -> Result<DelayEstimate> {
    DelayEstimator::new(nf, df).estimate(y)
}

/// Grid and refinement settings for the spatial-frequency search.
#[derive(Debug, Clone, Copy)]
pub struct SpatialSearch {
    /// Points per axis over `[-2, 2]`.
    pub grid: usize,
}

impl Default for SpatialSearch {
    fn default() -> Self {
        SpatialSearch { grid: 81 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialEstimate {
    pub xi: f64,
    pub zeta: f64,
    /// Closed-form gain `beta_r` at the estimate.
    pub gain: C64,
}

/// Estimates `(xi, zeta)` from the RIS-path observations of one pair.
/// `base` are the transmitter's base profiles (one per column of `y_ris`).
pub fn estimate_spatial_freq(
    s: &Scenario,
    y_ris: &DMatrix<C64>,
    tau: f64,
    base: &[&DVector<C64>],
    energy: f64,
    search: SpatialSearch,
) -> Result<SpatialEstimate> {
    let (n, tt) = (y_ris.nrows(), y_ris.ncols());
    if base.len() != tt {
        return Err(Error::validation("profile count does not match observation columns"));
    }
    // delay removal and summation over subcarriers
    let w = 2.0 * PI * tau * s.subcarrier_spacing;
    let ph: Vec<C64> = (0..n).map(|k| C64::from_polar(1.0, w * k as f64)).collect();
    let ytil = DVector::from_iterator(
        tt,
        y_ris.column_iter().map(|c| c.iter().zip(&ph).map(|(v, p)| v * p).sum::<C64>()),
    );
    let ynorm = ytil.norm_squared();
    if !(ynorm > 0.0) {
        return Err(Error::numerical("no signal energy"));
    }
    let (rows, cols) = (s.ris_rows, s.ris_cols);
    let k = 2.0 * PI / s.wavelength;
    let sp = s.ris_element_spacing;
    let yc: Vec<f64> = (0..cols).map(|c| (c as f64 - (cols as f64 - 1.0) / 2.0) * sp).collect();
    let zr: Vec<f64> = (0..rows).map(|r| (r as f64 - (rows as f64 - 1.0) / 2.0) * sp).collect();

    // coarse grid: c(gamma) factors into a row (zeta) times a column (xi) term
    let ng = search.grid.max(2);
    let axis: Vec<f64> = (0..ng).map(|i| -2.0 + 4.0 * i as f64 / (ng - 1) as f64).collect();
    let ay: Vec<Vec<C64>> = axis
        .iter()
        .map(|&xi| yc.iter().map(|y| C64::from_polar(1.0, k * y * xi)).collect())
        .collect();
    let az: Vec<Vec<C64>> = axis
        .iter()
        .map(|&ze| zr.iter().map(|z| C64::from_polar(1.0, k * z * ze)).collect())
        .collect();
    // partial[t][xi][r] = sum_c a_y[c] w_t[r, c]
    let partial: Vec<Vec<Vec<C64>>> = base
        .iter()
        .map(|om| {
            ay.iter()
                .map(|a| {
                    (0..rows)
                        .map(|r| (0..cols).map(|c| a[c] * om[r * cols + c]).sum())
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    let mut g = vec![C64::new(0.0, 0.0); tt];
    for (ix, _) in axis.iter().enumerate() {
        for (iz, a) in az.iter().enumerate() {
            let mut q = C64::new(0.0, 0.0);
            let mut n2 = 0.0;
            for t in 0..tt {
                let p = &partial[t][ix];
                g[t] = (0..rows).map(|r| a[r] * p[r]).sum();
                q += g[t].conj() * ytil[t];
                n2 += g[t].norm_sqr();
            }
            if n2 > 0.0 {
                let v = q.norm_sqr() / n2;
                if v > best.0 {
                    best = (v, ix, iz);
                }
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::numerical("degenerate RIS profiles: zero projection everywhere"));
    }

    let elems = s.element_offsets();
    let objective = |gamma: &DVector<f64>| -> (f64, DVector<f64>, C64, f64) {
        let (xi, ze) = (gamma[0], gamma[1]);
        let c: Vec<C64> = elems
            .iter()
            .map(|(y, z)| C64::from_polar(1.0, k * (y * xi + z * ze)))
            .collect();
        let mut q = C64::new(0.0, 0.0);
        let mut dq = [C64::new(0.0, 0.0); 2];
        let mut n2 = 0.0;
        let mut dn2 = [0.0; 2];
        for t in 0..tt {
            let om = base[t];
            let mut gt = C64::new(0.0, 0.0);
            let mut dg = [C64::new(0.0, 0.0); 2];
            for (m, (y, z)) in elems.iter().enumerate() {
                let v = c[m] * om[m];
                gt += v;
                dg[0] += v * *y;
                dg[1] += v * *z;
            }
            let jk = C64::new(0.0, k);
            dg[0] *= jk;
            dg[1] *= jk;
            q += gt.conj() * ytil[t];
            n2 += gt.norm_sqr();
            for a in 0..2 {
                dq[a] += dg[a].conj() * ytil[t];
                dn2[a] += 2.0 * (gt.conj() * dg[a]).re;
            }
        }
        let q2 = q.norm_sqr();
        let f = -q2 / (n2 * ynorm);
        let grad = DVector::from_iterator(
            2,
            (0..2).map(|a| {
                let dq2 = 2.0 * (q.conj() * dq[a]).re;
                -(dq2 * n2 - q2 * dn2[a]) / (n2 * n2 * ynorm)
            }),
        );
        (f, grad, q, n2)
    };
    let start = DVector::from_vec(vec![axis[best.1], axis[best.2]]);
    let res = bfgs_box(&start, &[-2.0, -2.0], &[2.0, 2.0], BfgsOptions::default(), |x| {
        let (f, gr, _, _) = objective(x);
        (f, gr)
    });
    let (xi, zeta) = (res.x[0].clamp(-2.0, 2.0), res.x[1].clamp(-2.0, 2.0));
    let (_, _, q, n2) = objective(&res.x);
    let gain = if n2 > 0.0 {
        q / (n as f64 * energy.sqrt() * n2)
    } else {
        C64::new(0.0, 0.0)
    };
    Ok(SpatialEstimate { xi, zeta, gain })
}

/// Per-direction estimates of one ordered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEstimate {
    pub tx: usize,
    pub rx: usize,
    pub tau_los: DelayEstimate,
    pub tau_ris: DelayEstimate,
    pub xi: f64,
    pub zeta: f64,
    pub gain_ris: C64,
}

/// Bidirectionally averaged measurements of one unordered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeasurement {
    pub i: usize,
    pub j: usize,
    pub tau_los: f64,
    pub tau_ris: f64,
    pub xi: f64,
    pub zeta: f64,
}

impl PairMeasurement {
    pub fn as_array(&self) -> [f64; 4] {
        [self.tau_los, self.tau_ris, self.xi, self.zeta]
    }
}

/// Averaged measurements (unordered pairs, lexicographic) plus the
/// per-direction values they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub k: usize,
    pub pairs: Vec<PairMeasurement>,
    pub directional: Vec<PairEstimate>,
    /// Optional variances `[tau, tau_r, xi, zeta]` per unordered pair.
    pub variances: Option<Vec<[f64; 4]>>,
}

impl MeasurementVector {
    pub fn get(&self, i: usize, j: usize) -> &PairMeasurement {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pairs
            .iter()
            .find(|p| p.i == a && p.j == b)
            .expect("pair present")
    }
}

/// Mean of two delays on the circle of circumference `period` (the IFFT
/// range), so a wrapped negative delay still averages correctly.
fn average_delay(a: f64, b: f64, period: f64) -> f64 {
    let d = b - a;
    let d = d - period * (d / period).round();
    (a + 0.5 * d).rem_euclid(period)
}

/// Averages the `(i, j)` and `(j, i)` estimates; the result does not depend
/// on argument order.
pub fn average_pair(a: &PairEstimate, b: &PairEstimate, period: f64) -> PairMeasurement {
    let (x, y) = if (a.tx, a.rx) <= (b.tx, b.rx) { (a, b) } else { (b, a) };
    PairMeasurement {
        i: x.tx.min(x.rx),
        j: x.tx.max(x.rx),
        tau_los: average_delay(x.tau_los.tau, y.tau_los.tau, period),
        tau_ris: average_delay(x.tau_ris.tau, y.tau_ris.tau, period),
        xi: 0.5 * (x.xi + y.xi),
        zeta: 0.5 * (x.zeta + y.zeta),
    }
}

/// Runs separation, delay and spatial-frequency estimation for every ordered
/// pair and averages both directions.
pub fn estimate_all(
    s: &Scenario,
    schedule: &RisSchedule,
    obs: &ObservationSet,
    search: SpatialSearch,
) -> Result<MeasurementVector> {
    let sep = separate(obs)?;
    let est = DelayEstimator::new(s.ifft_length, s.subcarrier_spacing);
    let k = s.num_ues();
    let half = s.slots_per_ue / 2;
    let mut directional = Vec::with_capacity(k * (k - 1));
    for (i, j) in ordered_pairs(k) {
        let tau_los = est.estimate(sep.los(i, j))?;
        let tau_ris = est.estimate(sep.ris(i, j))?;
        let base: Vec<&DVector<C64>> = (0..half).map(|t| schedule.base(i, t)).collect();
        let sf = estimate_spatial_freq(s, sep.ris(i, j), tau_ris.tau, &base, s.energy(i), search)?;
        directional.push(PairEstimate {
            tx: i,
            rx: j,
            tau_los,
            tau_ris,
            xi: sf.xi,
            zeta: sf.zeta,
            gain_ris: sf.gain,
        });
    }
    Ok(MeasurementVector::from_directional(k, directional, 1.0 / s.subcarrier_spacing))
}

const CSV_PARAMS: [&str; 4] = ["tau", "tau_r", "xi", "zeta"];

impl MeasurementVector {
    /// Averages per-direction estimates given in ordered-pair order; delays
    /// are averaged on the circle of circumference `period`.
    pub fn from_directional(k: usize, directional: Vec<PairEstimate>, period: f64) -> Self {
        let pairs = unordered_pairs(k)
            .into_iter()
            .map(|(i, j)| {
                average_pair(
                    &directional[pair_index(k, i, j)],
                    &directional[pair_index(k, j, i)],
                    period,
                )
            })
            .collect();
        MeasurementVector {
            k,
            pairs,
            directional,
            variances: None,
        }
    }

    /// Per-direction estimates as CSV `(i, j, param, truth, estimate, error)`,
    /// UE indices one-based, delays in seconds. `truth` holds the true
    /// `[tau, tau_r, xi, zeta]` per ordered pair.
    pub fn write_csv<W: Write>(&self, truth: &[[f64; 4]], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "param", "truth", "estimate", "error"])?;
        for (d, t) in self.directional.iter().zip(truth) {
            let est = [d.tau_los.tau, d.tau_ris.tau, d.xi, d.zeta];
            for a in 0..4 {
                w.write_record([
                    (d.tx + 1).to_string(),
                    (d.rx + 1).to_string(),
                    CSV_PARAMS[a].to_string(),
                    format!("{:e}", t[a]),
                    format!("{:e}", est[a]),
                    format!("{:e}", est[a] - t[a]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`MeasurementVector::write_csv`]; every
    /// ordered pair of `k` UEs needs all four parameters.
    pub fn read_csv<R: Read>(k: usize, period: f64, input: R) -> Result<Self> {
        let mut vals: Vec<[Option<f64>; 4]> = vec![[None; 4]; k * (k - 1)];
        let mut r = csv::Reader::from_reader(input);
        for rec in r.records() {
            let rec = rec?;
            let field = |n: usize| rec.get(n).ok_or_else(|| Error::Parse("measurement csv: short row".into()));
            let idx = |n: usize| -> Result<usize> {
                field(n)?
                    .trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|v| (1..=k).contains(v))
                    .map(|v| v - 1)
                    .ok_or_else(|| Error::Parse(format!("measurement csv: bad UE index '{}'", rec.get(n).unwrap_or(""))))
            };
            let (i, j) = (idx(0)?, idx(1)?);
            if i == j {
                return Err(Error::Parse("measurement csv: i equals j".into()));
            }
            let name = field(2)?.trim();
            let a = CSV_PARAMS
                .iter()
                .position(|p| *p == name)
                .ok_or_else(|| Error::Parse(format!("measurement csv: unknown param '{name}'")))?;
            let v: f64 = field(4)?
                .trim()
                .parse()
                .map_err(|_| Error::Parse("measurement csv: bad estimate".into()))?;
            vals[pair_index(k, i, j)][a] = Some(v);
        }
        let directional = ordered_pairs(k)
            .into_iter()
            .zip(&vals)
            .map(|((i, j), v)| {
                let get = |a: usize| {
                    v[a].ok_or_else(|| {
                        Error::validation(format!("measurement csv: missing {} for pair ({}, {})", CSV_PARAMS[a], i + 1, j + 1))
                    })
                };
                let delay = |tau| DelayEstimate { tau, bin: 0, delta: 0.0 };
                Ok(PairEstimate {
                    tx: i,
                    rx: j,
                    tau_los: delay(get(0)?),
                    tau_ris: delay(get(1)?),
                    xi: get(2)?,
                    zeta: get(3)?,
                    gain_ris: C64::new(0.0, 0.0),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_directional(k, directional, period))
    }
}
