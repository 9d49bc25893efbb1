//! Geometric and RF configuration of a positioning scenario.
//!
//! The RIS is a uniform planar array in the yz-plane centred at `ris_center`;
//! every UE sits in front of it (x greater than the RIS plane). Config files are
//! TOML documents with `[ris]`, `[ofdm]`, `[ues]`, `[noise]`, `[prior]` and
//! `[multipath]` sections; absent optional keys fall back to the Table I
//! defaults documented on [`Scenario::table1`].

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

pub const SPEED_OF_LIGHT: f64 = 3e8;

/// Far-field ratio at or above which the scenario is flagged as far-field.
pub const FAR_FIELD_RATIO: f64 = 10.0;

const TABLE1_UES: [[f64; 3]; 3] = [[4.0, 3.0, -1.0], [4.5, 1.0, -0.5], [5.0, -3.0, -1.0]];
const ROOM_MIN: [f64; 3] = [0.0, -3.5, -2.0];
const ROOM_MAX: [f64; 3] = [7.0, 3.5, 2.0];
const DEFAULT_PRIOR_SIGMA2: f64 = 0.5;

/// Gaussian prior on a UE position.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub mean: Point,
    pub covariance: Matrix3<f64>,
}

impl Prior {
    pub fn isotropic(mean: Point, sigma2: f64) -> Self {
        Prior {
            mean,
            covariance: Matrix3::identity() * sigma2,
        }
    }

    /// Symmetric square root of the covariance; fails for non-symmetric,
    /// non-finite or indefinite matrices.
    pub fn covariance_sqrt(&self) -> Result<Matrix3<f64>> {
        let c = &self.covariance;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("prior: covariance has non-finite entries"));
        }
        let scale = c.abs().max().max(f64::MIN_POSITIVE);
        if (c - c.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::validation("prior: covariance is not symmetric"));
        }
        let eig = SymmetricEigen::new(*c);
        if eig.eigenvalues.min() < -1e-12 * scale {
            return Err(Error::validation(
                "prior: covariance is not positive semidefinite",
            ));
        }
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        Ok(eig.eigenvectors * Matrix3::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
    }
}

/// Result of the far-field check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarField {
    /// Closest UE-to-RIS distance over the largest element offset.
    pub ratio: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ris_center: Point,
    pub ris_rows: usize,
    pub ris_cols: usize,
    pub ris_element_spacing: f64,
    pub carrier_frequency: f64,
    pub wavelength: f64,
    pub speed_of_light: f64,
    pub ue_positions: Vec<Point>,
    pub clock_offsets: Vec<f64>,
    /// Zero-based index of the reference (coordinating) UE.
    pub reference_ue: usize,
    /// Scatter points per receiving UE; empty when multipath is off.
    pub sp_positions: Vec<Vec<Point>>,
    /// Radar cross-section of every scatter point, m^2.
    pub rcs: f64,
    pub room_min: Point,
    pub room_max: Point,
    pub n_subcarriers: usize,
    pub subcarrier_spacing: f64,
    pub slots_per_ue: usize,
    pub ifft_length: usize,
    /// Per-UE transmit power `P_i = N E_i`, watts.
    pub tx_powers: Vec<f64>,
    pub total_power: f64,
    pub noise_figure_db: f64,
    pub noise_psd_dbm_hz: f64,
    /// Per-entry complex noise variance, watts.
    pub noise_variance: f64,
    pub priors: Vec<Prior>,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// `n_f * N0 * df` in dBm.
pub fn noise_variance_dbm(noise_figure_db: f64, psd_dbm_hz: f64, subcarrier_spacing: f64) -> f64 {
    noise_figure_db + psd_dbm_hz + 10.0 * subcarrier_spacing.log10()
}

impl Scenario {
    /// Table I scenario: 28 GHz, 11x11 RIS at lambda/4, N = 3000, df = 120 kHz,
    /// T = 40, n_f = 8 dB, N0 = -174 dBm/Hz, 23 dBm per UE, N_f = 10 N.
    ///
    /// The wavelength is `c / f_c`; see [`Scenario::table1_compat`] for the
    /// 1 cm variant.
    pub fn table1() -> Self {
        let c = SPEED_OF_LIGHT;
        let fc = 28e9;
        Self::table1_with_wavelength(c / fc)
    }

    /// Table I with the tabulated `lambda = 1 cm` (spacing 0.25 cm).
    pub fn table1_compat() -> Self {
        Self::table1_with_wavelength(0.01)
    }

    fn table1_with_wavelength(wavelength: f64) -> Self {
        let ues: Vec<Point> = TABLE1_UES.iter().map(|p| Point::from(*p)).collect();
        let n = 3000;
        let df = 120e3;
        let nf = 8.0;
        let n0 = -174.0;
        let p = dbm_to_watts(23.0);
        let priors = ues
            .iter()
            .map(|m| Prior::isotropic(*m, DEFAULT_PRIOR_SIGMA2))
            .collect();
        Scenario {
            ris_center: Point::zeros(),
            ris_rows: 11,
            ris_cols: 11,
            ris_element_spacing: wavelength / 4.0,
            carrier_frequency: 28e9,
            wavelength,
            speed_of_light: SPEED_OF_LIGHT,
            clock_offsets: vec![0.0; ues.len()],
            reference_ue: 0,
            sp_positions: Vec::new(),
            rcs: 0.0,
            room_min: Point::from(ROOM_MIN),
            room_max: Point::from(ROOM_MAX),
            n_subcarriers: n,
            subcarrier_spacing: df,
            slots_per_ue: 40,
            ifft_length: 10 * n,
            tx_powers: vec![p; ues.len()],
            total_power: 3.0 * p,
            noise_figure_db: nf,
            noise_psd_dbm_hz: n0,
            noise_variance: dbm_to_watts(noise_variance_dbm(nf, n0, df)),
            priors,
            ue_positions: ues,
        }
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn num_elements(&self) -> usize {
        self.ris_rows * self.ris_cols
    }

    /// Pilot symbol energy `E_i = P_i / N`.
    pub fn energy(&self, ue: usize) -> f64 {
        self.tx_powers[ue] / self.n_subcarriers as f64
    }

    pub fn noise_variance_dbm(&self) -> f64 {
        watts_to_dbm(self.noise_variance)
    }

    /// UE position relative to the RIS centre.
    pub fn ue_rel(&self, ue: usize) -> Point {
        self.ue_positions[ue] - self.ris_center
    }

    /// Distance between UE `ue` and the RIS centre.
    pub fn ris_distance(&self, ue: usize) -> f64 {
        self.ue_rel(ue).norm()
    }

    /// Element offsets `(y, z)` from the RIS centre, row-major over
    /// (z-row, y-col) with element 0 at the most negative corner.
    pub fn element_offsets(&self) -> Vec<(f64, f64)> {
        let s = self.ris_element_spacing;
        let rc = (self.ris_rows as f64 - 1.0) / 2.0;
        let cc = (self.ris_cols as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(self.num_elements());
        for r in 0..self.ris_rows {
            for c in 0..self.ris_cols {
                out.push(((c as f64 - cc) * s, (r as f64 - rc) * s));
            }
        }
        out
    }

    /// Absolute element positions (x equals the RIS centre's x).
    pub fn ris_element_positions(&self) -> Vec<Point> {
        self.element_offsets()
            .into_iter()
            .map(|(y, z)| self.ris_center + Point::new(0.0, y, z))
            .collect()
    }

    pub fn check_far_field(&self) -> FarField {
        let min_ue = (0..self.num_ues())
            .map(|k| self.ris_distance(k))
            .fold(f64::INFINITY, f64::min);
        let max_elem = self
            .element_offsets()
            .iter()
            .map(|(y, z)| y.hypot(*z))
            .fold(0.0, f64::max);
        let ratio = if min_ue == 0.0 {
            0.0
        } else if max_elem == 0.0 {
            f64::INFINITY
        } else {
            min_ue / max_elem
        };
        FarField {
            ratio,
            satisfied: ratio >= FAR_FIELD_RATIO,
        }
    }

    /// Sets every UE to the same transmit power (watts) and updates the total.
    pub fn set_uniform_power(&mut self, watts: f64) {
        let k = self.num_ues();
        self.tx_powers = vec![watts; k];
        self.total_power = watts * k as f64;
    }

    /// Replaces the priors with `N(mean_k, sigma2 I)` centred on the true positions.
    pub fn set_isotropic_priors(&mut self, sigma2: f64) {
        self.priors = self
            .ue_positions
            .iter()
            .map(|p| Prior::isotropic(*p, sigma2))
            .collect();
    }

    /// Draws `per_ue` scatter points for every receiving UE uniformly in the room box.
    pub fn randomize_scatter_points(&mut self, per_ue: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (self.room_min, self.room_max);
        self.sp_positions = (0..self.num_ues())
            .map(|_| {
                (0..per_ue)
                    .map(|_| {
                        Point::new(
                            rng.random_range(lo.x..hi.x),
                            rng.random_range(lo.y..hi.y),
                            rng.random_range(lo.z..hi.z),
                        )
                    })
                    .collect()
            })
            .collect();
    }

    /// Checks every construction rule, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_ues();
        if k < 3 {
            return Err(Error::validation("feasibility: K >= 3 required"));
        }
        if self.slots_per_ue == 0 || self.slots_per_ue % 2 != 0 {
            return Err(Error::validation(
                "orthogonal pairing: slots_per_ue must be a positive even integer",
            ));
        }
        if self.ris_rows == 0 || self.ris_cols == 0 {
            return Err(Error::validation("ris: rows and cols must be positive"));
        }
        for (name, v) in [
            ("ris element spacing", self.ris_element_spacing),
            ("wavelength", self.wavelength),
            ("carrier frequency", self.carrier_frequency),
            ("speed of light", self.speed_of_light),
            ("subcarrier spacing", self.subcarrier_spacing),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.n_subcarriers == 0 {
            return Err(Error::validation("ofdm: n_subcarriers must be positive"));
        }
        if self.ifft_length < self.n_subcarriers {
            return Err(Error::validation("ofdm: ifft_length must be >= n_subcarriers"));
        }
        if self.tx_powers.len() != k {
            return Err(Error::validation("power: one tx power per UE required"));
        }
        for (i, p) in self.tx_powers.iter().enumerate() {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::validation(format!(
                    "power: tx power of UE {} must be positive",
                    i + 1
                )));
            }
        }
        if !(self.total_power.is_finite() && self.total_power > 0.0) {
            return Err(Error::validation("power: total power must be positive"));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::validation("noise: variance must be non-negative"));
        }
        if self.clock_offsets.len() != k {
            return Err(Error::validation("clock: one clock offset per UE required"));
        }
        if self.reference_ue >= k {
            return Err(Error::validation("clock: reference UE index out of range"));
        }
        if self.clock_offsets[self.reference_ue] != 0.0 {
            return Err(Error::validation(
                "clock: the reference UE must have zero clock offset",
            ));
        }
        for i in 0..k {
            if self.ue_rel(i).x <= 0.0 {
                return Err(Error::validation(format!(
                    "geometry: UE {} lies behind or on the RIS plane",
                    i + 1
                )));
            }
            for j in 0..i {
                if (self.ue_positions[i] - self.ue_positions[j]).norm() == 0.0 {
                    return Err(Error::validation(format!(
                        "geometry: UEs {} and {} coincide",
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        if self.priors.len() != k {
            return Err(Error::validation("prior: one prior per UE required"));
        }
        for p in &self.priors {
            p.covariance_sqrt()?;
        }
        if !self.sp_positions.is_empty() && self.sp_positions.len() != k {
            return Err(Error::validation(
                "multipath: scatter points must be listed per receiving UE",
            ));
        }
        if !(self.rcs.is_finite() && self.rcs >= 0.0) {
            return Err(Error::validation("multipath: rcs must be non-negative"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Parses and validates a scenario document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: ScenarioDoc = toml::from_str(text)?;
        let s = doc.into_scenario()?;
        s.validate()?;
        Ok(s)
    }

    /// Fully explicit document; re-loading it reproduces `self` exactly.
    pub fn to_toml_string(&self) -> String {
        let doc = ScenarioDoc::from_scenario(self);
        toml::to_string(&doc).expect("scenario document serializes")
    }
}

// --- config document -------------------------------------------------------

/// Power value: a bare number is watts, strings carry a `W`, `mW` or `dBm` suffix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum PowerValue {
    Watts(f64),
    Text(String),
}

impl PowerValue {
    fn watts(&self) -> Result<f64> {
        match self {
            PowerValue::Watts(w) => Ok(*w),
            PowerValue::Text(s) => parse_power(s),
        }
    }
}

/// Parses `"23dBm"`, `"200mW"` or `"0.2W"` into watts.
pub fn parse_power(s: &str) -> Result<f64> {
    let t = s.trim();
    let bad = || Error::Parse(format!("invalid power value '{s}'"));
    let lower = t.to_ascii_lowercase();
    let (num, unit) = if let Some(v) = lower.strip_suffix("dbm") {
        (v, "dbm")
    } else if let Some(v) = lower.strip_suffix("mw") {
        (v, "mw")
    } else if let Some(v) = lower.strip_suffix('w') {
        (v, "w")
    } else {
        return Err(bad());
    };
    let x: f64 = num.trim().parse().map_err(|_| bad())?;
    Ok(match unit {
        "dbm" => dbm_to_watts(x),
        "mw" => x * 1e-3,
        _ => x,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    carrier_frequency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wavelength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    speed_of_light: Option<f64>,
    /// One-based.
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_ue: Option<usize>,
    #[serde(default)]
    ris: RisSection,
    #[serde(default)]
    ofdm: OfdmSection,
    #[serde(default)]
    ues: UeSection,
    #[serde(default)]
    noise: NoiseSection,
    #[serde(default)]
    prior: PriorSection,
    #[serde(default)]
    multipath: MultipathSection,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RisSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    center: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cols: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    element_spacing: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OfdmSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    n_subcarriers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    subcarrier_spacing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slots_per_ue: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ifft_length: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clock_offsets: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tx_power: Option<OneOrMany<PowerValue>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_power: Option<PowerValue>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_figure_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psd_dbm_per_hz: Option<f64>,
    /// Explicit per-entry variance; overrides the derived `n_f N0 df`.
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<PowerValue>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    means: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariances: Option<Vec<[[f64; 3]; 3]>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MultipathSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    rcs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sp_positions: Option<Vec<Vec<[f64; 3]>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    random_sps_per_ue: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    room_min: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    room_max: Option<[f64; 3]>,
}

impl ScenarioDoc {
    fn into_scenario(self) -> Result<Scenario> {
        let base = match self.preset.as_deref() {
            None | Some("table1") => Scenario::table1(),
            Some("table1-compat") => Scenario::table1_compat(),
            Some(other) => return Err(Error::Parse(format!("unknown preset '{other}'"))),
        };
        let has_preset = self.preset.is_some();

        let carrier_frequency = self.carrier_frequency.unwrap_or(base.carrier_frequency);
        let speed_of_light = self.speed_of_light.unwrap_or(base.speed_of_light);
        let wavelength = match (self.wavelength, self.carrier_frequency, has_preset) {
            (Some(l), _, _) => l,
            (None, Some(_), _) | (None, None, false) => speed_of_light / carrier_frequency,
            (None, None, true) => base.wavelength,
        };

        let positions: Vec<Point> = match self.ues.positions {
            Some(p) => p.into_iter().map(Point::from).collect(),
            None if has_preset => base.ue_positions.clone(),
            None => return Err(Error::Parse("missing required key ues.positions".into())),
        };
        let k = positions.len();

        let n_subcarriers = self.ofdm.n_subcarriers.unwrap_or(base.n_subcarriers);
        let subcarrier_spacing = self.ofdm.subcarrier_spacing.unwrap_or(base.subcarrier_spacing);
        let tx_powers = match self.ues.tx_power {
            None => vec![base.tx_powers[0]; k],
            Some(OneOrMany::One(p)) => vec![p.watts()?; k],
            Some(OneOrMany::Many(v)) => v.iter().map(PowerValue::watts).collect::<Result<_>>()?,
        };
        let total_power = match self.ues.total_power {
            Some(p) => p.watts()?,
            None => tx_powers.iter().sum(),
        };

        let noise_figure_db = self.noise.noise_figure_db.unwrap_or(base.noise_figure_db);
        let noise_psd_dbm_hz = self.noise.psd_dbm_per_hz.unwrap_or(base.noise_psd_dbm_hz);
        let noise_variance = match self.noise.variance {
            Some(v) => v.watts()?,
            None => dbm_to_watts(noise_variance_dbm(
                noise_figure_db,
                noise_psd_dbm_hz,
                subcarrier_spacing,
            )),
        };

        let sigma2 = self.prior.sigma2.unwrap_or(DEFAULT_PRIOR_SIGMA2);
        let means: Vec<Point> = match self.prior.means {
            Some(m) => m.into_iter().map(Point::from).collect(),
            None => positions.clone(),
        };
        let priors = match self.prior.covariances {
            Some(covs) => {
                if covs.len() != means.len() {
                    return Err(Error::validation(
                        "prior: covariances and means must have equal length",
                    ));
                }
                means
                    .iter()
                    .zip(covs)
                    .map(|(m, c)| Prior {
                        mean: *m,
                        covariance: Matrix3::from_fn(|r, col| c[r][col]),
                    })
                    .collect()
            }
            None => means.iter().map(|m| Prior::isotropic(*m, sigma2)).collect(),
        };

        let reference_ue = match self.reference_ue {
            Some(0) => return Err(Error::validation("clock: reference_ue is one-based")),
            Some(r) => r - 1,
            None => 0,
        };

        let spacing_default = wavelength / 4.0;
        let mut s = Scenario {
            ris_center: self.ris.center.map(Point::from).unwrap_or(base.ris_center),
            ris_rows: self.ris.rows.unwrap_or(base.ris_rows),
            ris_cols: self.ris.cols.unwrap_or(base.ris_cols),
            ris_element_spacing: self.ris.element_spacing.unwrap_or(spacing_default),
            carrier_frequency,
            wavelength,
            speed_of_light,
            clock_offsets: self.ues.clock_offsets.unwrap_or_else(|| vec![0.0; k]),
            reference_ue,
            sp_positions: self
                .multipath
                .sp_positions
                .map(|v| {
                    v.into_iter()
                        .map(|l| l.into_iter().map(Point::from).collect())
                        .collect()
                })
                .unwrap_or_default(),
            rcs: self.multipath.rcs.unwrap_or(0.0),
            room_min: self.multipath.room_min.map(Point::from).unwrap_or(base.room_min),
            room_max: self.multipath.room_max.map(Point::from).unwrap_or(base.room_max),
            n_subcarriers,
            subcarrier_spacing,
            slots_per_ue: self.ofdm.slots_per_ue.unwrap_or(base.slots_per_ue),
            ifft_length: self.ofdm.ifft_length.unwrap_or(10 * n_subcarriers),
            tx_powers,
            total_power,
            noise_figure_db,
            noise_psd_dbm_hz,
            noise_variance,
            priors,
            ue_positions: positions,
        };
        if let Some(per_ue) = self.multipath.random_sps_per_ue {
            if s.sp_positions.is_empty() {
                s.randomize_scatter_points(per_ue, self.multipath.seed.unwrap_or(0));
            }
        }
        Ok(s)
    }

    fn from_scenario(s: &Scenario) -> Self {
        let arr = |p: &Point| [p.x, p.y, p.z];
        ScenarioDoc {
            preset: None,
            carrier_frequency: Some(s.carrier_frequency),
            wavelength: Some(s.wavelength),
            speed_of_light: Some(s.speed_of_light),
            reference_ue: Some(s.reference_ue + 1),
            ris: RisSection {
                center: Some(arr(&s.ris_center)),
                rows: Some(s.ris_rows),
                cols: Some(s.ris_cols),
                element_spacing: Some(s.ris_element_spacing),
            },
            ofdm: OfdmSection {
                n_subcarriers: Some(s.n_subcarriers),
                subcarrier_spacing: Some(s.subcarrier_spacing),
                slots_per_ue: Some(s.slots_per_ue),
                ifft_length: Some(s.ifft_length),
            },
            ues: UeSection {
                positions: Some(s.ue_positions.iter().map(arr).collect()),
                clock_offsets: Some(s.clock_offsets.clone()),
                tx_power: Some(OneOrMany::Many(
                    s.tx_powers.iter().map(|p| PowerValue::Watts(*p)).collect(),
                )),
                total_power: Some(PowerValue::Watts(s.total_power)),
            },
            noise: NoiseSection {
                noise_figure_db: Some(s.noise_figure_db),
                psd_dbm_per_hz: Some(s.noise_psd_dbm_hz),
                variance: Some(PowerValue::Watts(s.noise_variance)),
            },
            prior: PriorSection {
                sigma2: None,
                means: Some(s.priors.iter().map(|p| arr(&p.mean)).collect()),
                covariances: Some(
                    s.priors
                        .iter()
                        .map(|p| {
                            let c = &p.covariance;
                            [
                                [c[(0, 0)], c[(0, 1)], c[(0, 2)]],
                                [c[(1, 0)], c[(1, 1)], c[(1, 2)]],
                                [c[(2, 0)], c[(2, 1)], c[(2, 2)]],
                            ]
                        })
                        .collect(),
                ),
            },
            multipath: MultipathSection {
                rcs: Some(s.rcs),
                sp_positions: if s.sp_positions.is_empty() {
                    None
                } else {
                    Some(
                        s.sp_positions
                            .iter()
                            .map(|l| l.iter().map(arr).collect())
                            .collect(),
                    )
                },
                random_sps_per_ue: None,
                seed: None,
                room_min: Some(arr(&s.room_min)),
                room_max: Some(arr(&s.room_max)),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const MINIMAL: &str = r#"
[ues]
positions = [[4.0, 3.0, -1.0], [4.5, 1.0, -0.5], [5.0, -3.0, -1.0]]
tx_power = "23 dBm"
"#;

    #[test]
    fn table1_noise_variance_is_minus_115_2_dbm() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert!((s.noise_variance_dbm() - (-115.2)).abs() < 0.01);
        let expected = 8.0 - 174.0 + 10.0 * 120e3f64.log10();
        assert!((s.noise_variance_dbm() - expected).abs() < 1e-9);
    }

    #[test]
    fn defaults_follow_table1() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!((s.ris_rows, s.ris_cols), (11, 11));
        assert_eq!(s.n_subcarriers, 3000);
        assert_eq!(s.slots_per_ue, 40);
        assert_eq!(s.ifft_length, 30000);
        assert_relative_eq!(s.wavelength, 3e8 / 28e9);
        assert_relative_eq!(s.ris_element_spacing, s.wavelength / 4.0);
    }

    #[test]
    fn two_ues_rejected() {
        let doc = r#"
[ues]
positions = [[4.0, 3.0, -1.0], [4.5, 1.0, -0.5]]
"#;
        let err = Scenario::from_toml_str(doc).unwrap_err();
        assert_eq!(err.to_string(), "feasibility: K >= 3 required");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn odd_slots_rejected() {
        let doc = format!("{MINIMAL}\n[ofdm]\nslots_per_ue = 39\n");
        let err = Scenario::from_toml_str(&doc).unwrap_err();
        assert!(err.to_string().contains("orthogonal pairing"));
    }

    #[test]
    fn non_positive_power_rejected() {
        let doc = r#"
[ues]
positions = [[4.0, 3.0, -1.0], [4.5, 1.0, -0.5], [5.0, -3.0, -1.0]]
tx_power = [0.2, 0.0, 0.2]
"#;
        let err = Scenario::from_toml_str(doc).unwrap_err();
        assert!(err.to_string().contains("tx power of UE 2 must be positive"));
    }

    #[test]
    fn ue_behind_ris_rejected() {
        let doc = r#"
[ues]
positions = [[4.0, 3.0, -1.0], [-4.5, 1.0, -0.5], [5.0, -3.0, -1.0]]
"#;
        assert!(Scenario::from_toml_str(doc).is_err());
    }

    #[test]
    fn missing_positions_is_a_parse_error() {
        let err = Scenario::from_toml_str("[ris]\nrows = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(Scenario::from_toml_str("[ues\n").is_err());
    }

    #[test]
    fn total_power_of_three_200mw_ues() {
        let doc = r#"
[ues]
positions = [[4.0, 3.0, -1.0], [4.5, 1.0, -0.5], [5.0, -3.0, -1.0]]
tx_power = ["200 mW", "200 mW", "200 mW"]
"#;
        let s = Scenario::from_toml_str(doc).unwrap();
        assert_relative_eq!(s.total_power, 0.6, epsilon = 1e-15);
        assert!((watts_to_dbm(s.total_power) - 27.78).abs() < 0.01);
    }

    #[test]
    fn power_units() {
        assert_relative_eq!(parse_power("30 dBm").unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(parse_power("200mW").unwrap(), 0.2);
        assert_relative_eq!(parse_power("0.5 W").unwrap(), 0.5);
        assert!(parse_power("12 furlongs").is_err());
    }

    #[test]
    fn single_element_sits_at_center() {
        let mut s = Scenario::table1();
        s.ris_rows = 1;
        s.ris_cols = 1;
        s.ris_center = Point::new(0.0, 0.3, -0.2);
        assert_eq!(s.ris_element_positions(), vec![s.ris_center]);
    }

    #[test]
    fn grid_11x11_spans_plus_minus_1_25_cm() {
        let s = Scenario::table1_compat();
        let offs = s.element_offsets();
        assert_eq!(offs.len(), 121);
        // oracle: (index - (n-1)/2) * spacing
        for r in 0..11 {
            for c in 0..11 {
                let (y, z) = offs[r * 11 + c];
                assert_relative_eq!(y, (c as f64 - 5.0) * 0.0025, epsilon = 1e-15);
                assert_relative_eq!(z, (r as f64 - 5.0) * 0.0025, epsilon = 1e-15);
            }
        }
        assert_relative_eq!(offs[0].0, -0.0125, epsilon = 1e-15);
        assert_relative_eq!(offs[120].1, 0.0125, epsilon = 1e-15);
    }

    #[test]
    fn centered_grid_sums_to_zero() {
        let mut s = Scenario::table1();
        s.ris_rows = 3;
        s.ris_cols = 3;
        let sum: Point = s.ris_element_positions().iter().sum();
        assert!(sum.norm() < 1e-15);
        assert!(s.ris_element_positions().iter().all(|p| p.x == 0.0));
    }

    #[test]
    fn grid_transpose_matches_rotation() {
        let mut a = Scenario::table1();
        a.ris_rows = 3;
        a.ris_cols = 5;
        let mut b = a.clone();
        b.ris_rows = 5;
        b.ris_cols = 3;
        // rotate b's grid by 90 degrees in-plane: (y, z) -> (-z, y)
        let mut rot: Vec<(f64, f64)> = b.element_offsets().iter().map(|(y, z)| (-z, *y)).collect();
        let mut orig = a.element_offsets();
        let key = |p: &(f64, f64)| ((p.0 * 1e9).round() as i64, (p.1 * 1e9).round() as i64);
        rot.sort_by_key(key);
        orig.sort_by_key(key);
        for (p, q) in rot.iter().zip(&orig) {
            assert!((p.0 - q.0).abs() < 1e-15 && (p.1 - q.1).abs() < 1e-15);
        }
    }

    #[test]
    fn far_field_table1() {
        let s = Scenario::table1_compat();
        let ff = s.check_far_field();
        // oracle: sqrt(21.5) over the half-diagonal 5 * 0.0025 * sqrt(2)
        let expected = 21.5f64.sqrt() / (5.0 * 0.0025 * 2f64.sqrt());
        assert_relative_eq!(ff.ratio, expected, max_relative = 1e-12);
        assert!((ff.ratio - 263.0).abs() < 1.0);
        assert!(ff.satisfied);
    }

    #[test]
    fn far_field_fails_for_huge_array() {
        let mut s = Scenario::table1_compat();
        s.ris_rows = 500;
        s.ris_cols = 500;
        assert!(!s.check_far_field().satisfied);
    }

    #[test]
    fn far_field_zero_when_ue_at_center() {
        let mut s = Scenario::table1();
        s.ue_positions[0] = s.ris_center;
        let ff = s.check_far_field();
        assert_eq!(ff.ratio, 0.0);
        assert!(!ff.satisfied);
    }

    #[test]
    fn round_trip_identity() {
        let mut s = Scenario::table1();
        s.clock_offsets = vec![0.0, 3.7e-8, -1.2e-8];
        s.randomize_scatter_points(2, 9);
        s.rcs = 10.0;
        let text = s.to_toml_string();
        let back = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn reference_must_have_zero_offset() {
        let mut s = Scenario::table1();
        s.clock_offsets = vec![1e-9, 0.0, 0.0];
        assert!(s.validate().is_err());
        s.reference_ue = 1;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn invalid_covariance_rejected() {
        let mut s = Scenario::table1();
        s.priors[1].covariance = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(s.validate().is_err());
    }
}
