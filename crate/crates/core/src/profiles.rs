//! RIS phase schedules: orthogonal ± pairing, random and directional codebooks.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::channel::{spatial_freqs, C64};
use crate::error::{Error, Result};
use crate::scenario::{Point, Prior, Scenario};

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookKind {
    Random,
    Directional,
    Custom,
}

impl CodebookKind {
    pub fn label(self) -> &'static str {
        match self {
            CodebookKind::Random => "random",
            CodebookKind::Directional => "directional",
            CodebookKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for CodebookKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CodebookKind::Random),
            "directional" => Ok(CodebookKind::Directional),
            other => Err(Error::validation(format!("unknown codebook '{other}'"))),
        }
    }
}

/// Per-transmitter, per-slot RIS profiles. Slot `2t` carries the base
/// profile `t` and slot `2t + 1` its exact negation (zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct RisSchedule {
    /// Base phases `[tx][pair_slot][element]` in `[0, 2pi)`.
    phases: Vec<Vec<Vec<f64>>>,
    omega: Vec<Vec<DVector<C64>>>,
    pub kind: CodebookKind,
    pub seed: Option<u64>,
}

impl RisSchedule {
    /// Builds a schedule from base phases `[tx][pair_slot][element]`.
    pub fn from_base_phases(s: &Scenario, phases: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let half = s.slots_per_ue / 2;
        if phases.len() != s.num_ues() || phases.iter().any(|p| p.len() != half) {
            return Err(Error::validation(format!(
                "schedule must hold {} transmitters x {} base profiles",
                s.num_ues(),
                half
            )));
        }
        Self::from_phases(phases, s.num_elements(), CodebookKind::Custom, None)
    }

    fn from_phases(
        phases: Vec<Vec<Vec<f64>>>,
        m: usize,
        kind: CodebookKind,
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut omega = Vec::with_capacity(phases.len());
        let mut norm = phases;
        for tx in norm.iter_mut() {
            let mut slots = Vec::with_capacity(2 * tx.len());
            for p in tx.iter_mut() {
                if p.len() != m {
                    return Err(Error::validation(format!(
                        "schedule profile has {} elements, RIS has {m}",
                        p.len()
                    )));
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("schedule phases must be finite"));
                }
                p.iter_mut().for_each(|v| *v = v.rem_euclid(TWO_PI));
                let base = DVector::from_iterator(m, p.iter().map(|&v| C64::from_polar(1.0, v)));
                let neg = -&base;
                slots.push(base);
                slots.push(neg);
            }
            omega.push(slots);
        }
        Ok(RisSchedule {
            phases: norm,
            omega,
            kind,
            seed,
        })
    }

    pub fn num_transmitters(&self) -> usize {
        self.omega.len()
    }

    pub fn slots(&self) -> usize {
        self.omega.first().map_or(0, |o| o.len())
    }

    pub fn num_elements(&self) -> usize {
        self.phases
            .first()
            .and_then(|p| p.first())
            .map_or(0, |p| p.len())
    }

    /// Profile of transmitter `tx` in slot `t` (both zero-based).
    pub fn omega(&self, tx: usize, t: usize) -> &DVector<C64> {
        &self.omega[tx][t]
    }

    /// Base profile `t` of transmitter `tx`, i.e. the profile of slot `2t`.
    pub fn base(&self, tx: usize, t: usize) -> &DVector<C64> {
        &self.omega[tx][2 * t]
    }

    pub fn base_phases(&self, tx: usize, t: usize) -> &[f64] {
        &self.phases[tx][t]
    }

    /// Phase of an element in any slot; odd slots are shifted by pi.
    pub fn phase(&self, tx: usize, t: usize, m: usize) -> f64 {
        let p = self.phases[tx][t / 2][m];
        if t % 2 == 0 {
            p
        } else {
            (p + PI).rem_euclid(TWO_PI)
        }
    }

    /// Repeats every transmitter's base profiles `times` over.
    pub fn repeated(&self, times: usize) -> Self {
        let phases = self
            .phases
            .iter()
            .map(|tx| (0..times).flat_map(|_| tx.iter().cloned()).collect())
            .collect();
        Self::from_phases(phases, self.num_elements(), self.kind, self.seed)
            .expect("repeating a valid schedule")
    }

    /// Writes `(transmitter, slot, element, phase_radians)` rows, one-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["transmitter", "slot", "element", "phase_radians"])?;
        for tx in 0..self.num_transmitters() {
            for t in 0..self.slots() {
                for m in 0..self.num_elements() {
                    w.write_record(&[
                        (tx + 1).to_string(),
                        (t + 1).to_string(),
                        (m + 1).to_string(),
                        format!("{:?}", self.phase(tx, t, m)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a schedule written by [`RisSchedule::write_csv`]; even slots must
    /// be the pi-shifted copies of the preceding odd slots.
    pub fn read_csv<R: Read>(s: &Scenario, input: R) -> Result<Self> {
        let (k, t_slots, m) = (s.num_ues(), s.slots_per_ue, s.num_elements());
        let mut grid = vec![vec![vec![f64::NAN; m]; t_slots]; k];
        let mut r = csv::Reader::from_reader(input);
        for rec in r.records() {
            let rec = rec?;
            let field = |idx: usize| -> Result<&str> {
                rec.get(idx)
                    .ok_or_else(|| Error::Parse("schedule csv: missing column".into()))
            };
            let index = |idx: usize, hi: usize| -> Result<usize> {
                let v: usize = field(idx)?
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("schedule csv: {e}")))?;
                if v == 0 || v > hi {
                    return Err(Error::validation(format!(
                        "schedule csv: index {v} outside 1..={hi}"
                    )));
                }
                Ok(v - 1)
            };
            let (tx, t, e) = (index(0, k)?, index(1, t_slots)?, index(2, m)?);
            let ph: f64 = field(3)?
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("schedule csv: {e}")))?;
            grid[tx][t][e] = ph;
        }
        if grid.iter().flatten().flatten().any(|v| v.is_nan()) {
            return Err(Error::validation("schedule csv does not cover every slot"));
        }
        for tx in &grid {
            for pair in tx.chunks(2) {
                for (a, b) in pair[0].iter().zip(&pair[1]) {
                    let d = (b - a - PI).rem_euclid(TWO_PI);
                    if d.min(TWO_PI - d) > 1e-9 {
                        return Err(Error::validation(
                            "orthogonal pairing: slot 2t must be the negation of slot 2t-1",
                        ));
                    }
                }
            }
        }
        let phases = grid
            .into_iter()
            .map(|tx| tx.into_iter().step_by(2).collect())
            .collect();
        Self::from_base_phases(s, phases)
    }
}

/// Base phases i.i.d. uniform on `[0, 2pi)`.
pub fn random_codebook(s: &Scenario, seed: u64) -> RisSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = s.num_elements();
    let phases = (0..s.num_ues())
        .map(|_| {
            (0..s.slots_per_ue / 2)
                .map(|_| (0..m).map(|_| rng.random_range(0.0..TWO_PI)).collect())
                .collect()
        })
        .collect();
    RisSchedule::from_phases(phases, m, CodebookKind::Random, Some(seed))
        .expect("random phases are well formed")
}

/// Phases that focus the RIS on spatial frequency `gamma`, `-(2pi/lambda) p_m . gamma`.
pub fn focusing_phases(s: &Scenario, gamma: (f64, f64)) -> Vec<f64> {
    let k = TWO_PI / s.wavelength;
    s.element_offsets()
        .iter()
        .map(|(y, z)| (-k * (y * gamma.0 + z * gamma.1)).rem_euclid(TWO_PI))
        .collect()
}

fn sample(prior: &Prior, sqrt: &nalgebra::Matrix3<f64>, rng: &mut ChaCha8Rng) -> Point {
    let z = Point::from_fn(|_, _| rng.sample(StandardNormal));
    prior.mean + sqrt * z
}

/// Directional codebook: each base profile points at a pair drawn from the
/// priors (transmitter position, a uniformly chosen receiver and its position).
pub fn directional_codebook(s: &Scenario, priors: &[Prior], seed: u64) -> Result<RisSchedule> {
    let k = s.num_ues();
    if priors.len() != k {
        return Err(Error::validation(format!(
            "prior: {} priors given for {k} UEs",
            priors.len()
        )));
    }
    let roots = priors
        .iter()
        .map(Prior::covariance_sqrt)
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phases = Vec::with_capacity(k);
    for i in 0..k {
        let mut tx = Vec::with_capacity(s.slots_per_ue / 2);
        for _ in 0..s.slots_per_ue / 2 {
            let pi = sample(&priors[i], &roots[i], &mut rng);
            let mut j = rng.random_range(0..k - 1);
            if j >= i {
                j += 1;
            }
            let pj = sample(&priors[j], &roots[j], &mut rng);
            let gamma = spatial_freqs(&(pi - s.ris_center), &(pj - s.ris_center))?;
            tx.push(focusing_phases(s, gamma));
        }
        phases.push(tx);
    }
    RisSchedule::from_phases(phases, s.num_elements(), CodebookKind::Directional, Some(seed))
}
