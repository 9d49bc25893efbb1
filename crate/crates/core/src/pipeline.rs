//! One localization occasion end to end: synthesis, estimation, positioning.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bounds::BoundReport;
use crate::channel::{synthesize, unordered_pairs};
use crate::error::{Error, Result};
use crate::estimators::{estimate_all, MeasurementVector, SpatialSearch};
use crate::locator::{default_d_search, locate, LocateOptions, PositionEstimate, Weighting};
use crate::profiles::RisSchedule;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingMode {
    Identity,
    CrlbDiag,
}

impl std::str::FromStr for WeightingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(WeightingMode::Identity),
            "crlb-diag" => Ok(WeightingMode::CrlbDiag),
            other => Err(Error::validation(format!("unknown weighting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub search: SpatialSearch,
    pub weighting: WeightingMode,
    pub d_search: Vec<f64>,
    pub fallback_on_infeasible: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            search: SpatialSearch::default(),
            weighting: WeightingMode::Identity,
            d_search: default_d_search(),
            fallback_on_infeasible: false,
        }
    }
}

/// Variances of the averaged measurements `[tau, tau_r, xi, zeta]` per
/// unordered pair: the mean of two independent directions has a quarter of
/// the summed per-direction CRLB variances.
pub fn averaged_variances(report: &BoundReport, k: usize) -> Vec<[f64; 4]> {
    unordered_pairs(k)
        .into_iter()
        .map(|(i, j)| {
            std::array::from_fn(|a| {
                let (x, y) = (report.crlb_of(i, j, a), report.crlb_of(j, i, a));
                (x * x + y * y) / 4.0
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub measurements: MeasurementVector,
    pub position: PositionEstimate,
}

/// Measurement-to-position step with the configured weighting.
pub fn locate_with(
    s: &Scenario,
    meas: &MeasurementVector,
    cfg: &ChainConfig,
    report: Option<&BoundReport>,
) -> Result<PositionEstimate> {
    let weighting = match cfg.weighting {
        WeightingMode::Identity => Weighting::Identity,
        WeightingMode::CrlbDiag => {
            let r = report.ok_or_else(|| {
                Error::validation("crlb-diag weighting needs a bound report")
            })?;
            Weighting::CrlbDiag(averaged_variances(r, s.num_ues()))
        }
    };
    let opts = LocateOptions {
        reference_ue: s.reference_ue,
        d_search: cfg.d_search.clone(),
        weighting,
        speed_of_light: s.speed_of_light,
        ris_center: s.ris_center,
        fallback_on_infeasible: cfg.fallback_on_infeasible,
    };
    locate(meas, &opts)
}

/// Synthesizes one occasion with noise seed `seed` and runs the full chain.
pub fn run_chain(
    s: &Scenario,
    schedule: &RisSchedule,
    seed: u64,
    cfg: &ChainConfig,
    report: Option<&BoundReport>,
) -> Result<ChainOutcome> {
    let obs = synthesize(s, schedule, seed)?;
    let mut measurements = estimate_all(s, schedule, &obs, cfg.search)?;
    if let Some(r) = report {
        measurements.variances = Some(averaged_variances(r, s.num_ues()));
    }
    let position = locate_with(s, &measurements, cfg, report)?;
    Ok(ChainOutcome {
        measurements,
        position,
    })
}

/// Seed of a codebook draw or noise draw, a pure function of the master seed
/// and the trial indices.
pub fn derive_seed(master: u64, profile: u64, noise: Option<u64>) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(profile);
    match noise {
        None => rng.set_word_pos(0),
        Some(n) => rng.set_word_pos(2 * (n as u128 + 1)),
    }
    rng.next_u64()
}
