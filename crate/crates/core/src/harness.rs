//! Monte-Carlo experiments: plan files, seeded trial fan-out over a worker
//! pool and CSV result tables.
//!
//! Every trial seed is a pure function of `(master seed, profile, noise)`, and
//! results are reduced in index order, so a table does not depend on the
//! number of workers.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::bounds::{bound_report, param_name, BoundReport};
use crate::channel::{ordered_pairs, pair_params};
use crate::error::{Error, Result};
use crate::estimators::SpatialSearch;
use crate::locator::default_d_search;
use crate::pipeline::{derive_seed, run_chain, ChainConfig, WeightingMode};
use crate::power::{powers_from_scaling, PowerStrategy};
use crate::profiles::{directional_codebook, random_codebook, CodebookKind, RisSchedule};
use crate::scenario::{dbm_to_watts, Point, Prior, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    PowerSweep,
    ProfileEcdf,
    Heatmap,
    UncertaintySweep,
    Multipath,
    UeCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    TxPowerDbm,
    RisSize,
    PriorSigma,
    /// `(eps, ups)` = `(P2 / P1, P3 / P1)`.
    PowerSplit,
    /// RIS centre `(y, z)`.
    RisPosition,
    /// UE 3 `(x, y)`.
    Ue3Position,
    NUes,
    Rcs,
}

impl Axis {
    fn is_grid(self) -> bool {
        matches!(self, Axis::PowerSplit | Axis::RisPosition | Axis::Ue3Position)
    }

    fn experiment(self) -> Experiment {
        match self {
            Axis::TxPowerDbm | Axis::RisSize => Experiment::PowerSweep,
            Axis::PriorSigma => Experiment::UncertaintySweep,
            Axis::PowerSplit | Axis::RisPosition | Axis::Ue3Position => Experiment::Heatmap,
            Axis::NUes => Experiment::UeCount,
            Axis::Rcs => Experiment::Multipath,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    experiment: Option<Experiment>,
    scenario: Option<PathBuf>,
    preset: Option<String>,
    axis: Option<Axis>,
    #[serde(default)]
    values: Vec<f64>,
    #[serde(default)]
    values2: Vec<f64>,
    codebook: Option<OneOrMany>,
    prior_sigma: Option<f64>,
    power_alloc: Option<OneOrMany>,
    tx_power_dbm: Option<f64>,
    n_profiles: Option<usize>,
    n_noise: Option<usize>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    workers: Option<usize>,
    weighting: Option<String>,
    estimators: Option<bool>,
    metric: Option<String>,
    sps_per_ue: Option<usize>,
    target_ue: Option<usize>,
    placement_min: Option<[f64; 3]>,
    placement_max: Option<[f64; 3]>,
    spatial_grid: Option<usize>,
}

/// A fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub experiment: Experiment,
    /// Scenario file; the preset is used when absent.
    pub scenario: Option<PathBuf>,
    pub preset: String,
    pub axis: Option<Axis>,
    pub values: Vec<f64>,
    /// Second grid axis for heatmaps.
    pub values2: Vec<f64>,
    pub codebooks: Vec<CodebookKind>,
    /// Isotropic prior variance (m^2) for directional codebooks; the
    /// scenario priors are used when absent.
    pub prior_sigma: Option<f64>,
    pub power_alloc: Vec<PowerStrategy>,
    /// Overrides every UE's transmit power.
    pub tx_power_dbm: Option<f64>,
    pub n_profiles: usize,
    pub n_noise: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub workers: Option<usize>,
    pub weighting: WeightingMode,
    /// Run the estimator chain in addition to the bounds.
    pub estimators: bool,
    /// Heatmap cell value: `avg_peb` or `peb_ue<k>`.
    pub metric: String,
    pub sps_per_ue: usize,
    /// One-based UE reported by the multipath experiment.
    pub target_ue: usize,
    pub placement_min: Point,
    pub placement_max: Point,
    pub spatial_grid: usize,
}

impl ExperimentPlan {
    /// Plan with every optional field at its default.
    pub fn new(experiment: Experiment) -> Self {
        ExperimentPlan {
            experiment,
            scenario: None,
            preset: "table1".into(),
            axis: None,
            values: Vec::new(),
            values2: Vec::new(),
            codebooks: vec![CodebookKind::Random],
            prior_sigma: None,
            power_alloc: vec![PowerStrategy::Uniform],
            tx_power_dbm: None,
            n_profiles: 1,
            n_noise: 1,
            seed: 0,
            output: None,
            workers: None,
            weighting: WeightingMode::Identity,
            estimators: true,
            metric: "avg_peb".into(),
            sps_per_ue: 4,
            target_ue: 3,
            placement_min: Point::new(1.0, -6.0, -2.0),
            placement_max: Point::new(11.0, 6.0, 2.0),
            spatial_grid: SpatialSearch::default().grid,
        }
    }

    /// Reads a plan; a relative scenario path is resolved against the
    /// plan file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut plan = Self::from_toml_str(&text)?;
        if let (Some(sc), Some(dir)) = (&plan.scenario, path.parent()) {
            if sc.is_relative() {
                plan.scenario = Some(dir.join(sc));
            }
        }
        Ok(plan)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: PlanDoc = toml::from_str(text)?;
        let experiment = match (doc.experiment, doc.axis) {
            (Some(e), _) => e,
            (None, Some(a)) => a.experiment(),
            (None, None) => Experiment::ProfileEcdf,
        };
        let mut plan = ExperimentPlan::new(experiment);
        plan.scenario = doc.scenario;
        if let Some(p) = doc.preset {
            plan.preset = p;
        }
        plan.axis = doc.axis;
        plan.values = doc.values;
        plan.values2 = doc.values2;
        if let Some(c) = doc.codebook {
            plan.codebooks = c.into_vec().iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        plan.prior_sigma = doc.prior_sigma;
        if let Some(p) = doc.power_alloc {
            plan.power_alloc = p.into_vec().iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        plan.tx_power_dbm = doc.tx_power_dbm;
        plan.n_profiles = doc.n_profiles.unwrap_or(plan.n_profiles);
        plan.n_noise = doc.n_noise.unwrap_or(plan.n_noise);
        plan.seed = doc.seed.unwrap_or(plan.seed);
        plan.output = doc.output;
        plan.workers = doc.workers;
        if let Some(w) = doc.weighting {
            plan.weighting = w.parse()?;
        }
        plan.estimators = doc.estimators.unwrap_or(plan.estimators);
        if let Some(m) = doc.metric {
            plan.metric = m;
        }
        plan.sps_per_ue = doc.sps_per_ue.unwrap_or(plan.sps_per_ue);
        plan.target_ue = doc.target_ue.unwrap_or(plan.target_ue);
        if let Some(v) = doc.placement_min {
            plan.placement_min = Point::from(v);
        }
        if let Some(v) = doc.placement_max {
            plan.placement_max = Point::from(v);
        }
        plan.spatial_grid = doc.spatial_grid.unwrap_or(plan.spatial_grid);
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_noise == 0 {
            return Err(Error::validation("plan: n_noise must be at least 1"));
        }
        if self.n_profiles == 0 {
            return Err(Error::validation("plan: n_profiles must be at least 1"));
        }
        if self.codebooks.is_empty() || self.power_alloc.is_empty() {
            return Err(Error::validation("plan: codebook and power_alloc must be non-empty"));
        }
        if self.workers == Some(0) {
            return Err(Error::validation("plan: workers must be positive"));
        }
        if self.spatial_grid < 2 {
            return Err(Error::validation("plan: spatial_grid must be at least 2"));
        }
        let allowed: &[Axis] = match self.experiment {
            Experiment::PowerSweep => &[Axis::TxPowerDbm, Axis::RisSize],
            Experiment::ProfileEcdf => &[],
            Experiment::Heatmap => &[Axis::PowerSplit, Axis::RisPosition, Axis::Ue3Position],
            Experiment::UncertaintySweep => &[Axis::PriorSigma],
            Experiment::Multipath => &[Axis::Rcs],
            Experiment::UeCount => &[Axis::NUes],
        };
        match self.axis {
            None if allowed.is_empty() => {}
            None => return Err(Error::validation("plan: this experiment needs an axis")),
            Some(a) if !allowed.contains(&a) => {
                return Err(Error::validation(format!("plan: axis {a:?} does not fit {:?}", self.experiment)))
            }
            Some(a) => {
                if self.values.is_empty() || (a.is_grid() && self.values2.is_empty()) {
                    return Err(Error::validation("plan: axis values must be non-empty"));
                }
                if self.values.iter().chain(&self.values2).any(|v| !v.is_finite()) {
                    return Err(Error::validation("plan: axis values must be finite"));
                }
                if matches!(a, Axis::RisSize | Axis::NUes)
                    && self.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0)
                {
                    return Err(Error::validation("plan: this axis takes positive integers"));
                }
                if a == Axis::NUes && self.values.iter().any(|v| *v < 3.0) {
                    return Err(Error::validation("feasibility: K >= 3 required"));
                }
            }
        }
        if self.experiment == Experiment::Heatmap {
            heatmap_metric(&self.metric)?;
        }
        Ok(())
    }

    /// Scenario file or preset, with the plan's power override applied.
    pub fn base_scenario(&self) -> Result<Scenario> {
        let mut s = match &self.scenario {
            Some(p) => Scenario::load(p)?,
            None => match self.preset.as_str() {
                "table1" => Scenario::table1(),
                "table1-compat" => Scenario::table1_compat(),
                other => return Err(Error::validation(format!("plan: unknown preset '{other}'"))),
            },
        };
        if let Some(dbm) = self.tx_power_dbm {
            s.set_uniform_power(dbm_to_watts(dbm));
        }
        Ok(s)
    }

    fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            search: SpatialSearch { grid: self.spatial_grid },
            weighting: self.weighting,
            d_search: default_d_search(),
            fallback_on_infeasible: true,
        }
    }

    fn codebook_seed(&self, profile: usize) -> u64 {
        derive_seed(self.seed, profile as u64, None)
    }

    fn noise_seed(&self, profile: usize, noise: usize) -> u64 {
        derive_seed(self.seed, profile as u64, Some(noise as u64))
    }

    /// Seeds for scenario randomization (scatter points, UE placement),
    /// independent of the codebook and noise streams.
    fn aux_seed(&self, profile: usize) -> u64 {
        derive_seed(self.seed ^ 0x5bd1_e995_a5a5_a5a5, profile as u64, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    CrlbStd,
    Peb,
    Ceb,
    Rmse,
    EcdfPoint,
    AvgPeb,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::CrlbStd => "crlb_std",
            Metric::Peb => "peb",
            Metric::Ceb => "ceb",
            Metric::Rmse => "rmse",
            Metric::EcdfPoint => "ecdf_point",
            Metric::AvgPeb => "avg_peb",
        })
    }
}

/// One result value. For `ecdf_point` rows `axis_value` is the abscissa and
/// `value` the cumulative probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub axis_value: String,
    pub ue_or_param: String,
    pub metric: Metric,
    pub value: f64,
    pub n_trials: usize,
    pub profile_id: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    fn push(&mut self, axis: &str, name: &str, metric: Metric, value: f64, n_trials: usize, profile: Option<usize>) {
        self.rows.push(ResultRow {
            axis_value: axis.to_string(),
            ue_or_param: name.to_string(),
            metric,
            value,
            n_trials,
            profile_id: profile,
        });
    }

    /// First aggregate row (no profile id) matching the selectors.
    pub fn value(&self, axis: &str, name: &str, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.axis_value == axis && r.ue_or_param == name && r.metric == metric && r.profile_id.is_none())
            .map(|r| r.value)
    }

    pub fn select<'a>(&'a self, name: &'a str, metric: Metric) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.ue_or_param == name && r.metric == metric)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["axis_value", "ue_or_param", "metric", "value", "n_trials", "profile_id"])?;
        for r in &self.rows {
            w.write_record([
                r.axis_value.clone(),
                r.ue_or_param.clone(),
                r.metric.to_string(),
                format!("{:e}", r.value),
                r.n_trials.to_string(),
                r.profile_id.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn axis_label(v: f64) -> String {
    format!("{v}")
}

fn ue_label(k: usize) -> String {
    format!("ue{}", k + 1)
}

/// Runs `f(0..n)` on a pool of `workers` threads, results in index order.
fn par_map<T, F>(workers: Option<usize>, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::validation(format!("workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Codebook draw for a scenario. Directional codebooks use the scenario
/// priors, with their covariance replaced by `prior_sigma * I` when given.
pub fn make_schedule(s: &Scenario, kind: CodebookKind, prior_sigma: Option<f64>, seed: u64) -> Result<RisSchedule> {
    match kind {
        CodebookKind::Random => Ok(random_codebook(s, seed)),
        CodebookKind::Directional => {
            let priors: Vec<Prior> = match prior_sigma {
                Some(v) => s.priors.iter().map(|p| Prior::isotropic(p.mean, v)).collect(),
                None => s.priors.clone(),
            };
            directional_codebook(s, &priors, seed)
        }
        CodebookKind::Custom => Err(Error::validation("plan: custom schedules cannot be drawn")),
    }
}

/// Delay error wrapped to the IFFT range `[-P/2, P/2)`.
fn delay_error(est: f64, truth: f64, period: f64) -> f64 {
    (est - truth + 0.5 * period).rem_euclid(period) - 0.5 * period
}

/// Errors of one noise draw: `[tau, tau_r, xi, zeta]` per ordered pair, then
/// the refined position error per UE.
struct TrialErrors {
    params: Vec<[f64; 4]>,
    positions: Vec<f64>,
    coarse_failed: bool,
    clamped: bool,
}

fn run_trial(s: &Scenario, sched: &RisSchedule, seed: u64, cfg: &ChainConfig, report: &BoundReport) -> Result<TrialErrors> {
    let out = run_chain(s, sched, seed, cfg, Some(report))?;
    let period = 1.0 / s.subcarrier_spacing;
    let params = out
        .measurements
        .directional
        .iter()
        .map(|d| {
            let pp = pair_params(s, d.tx, d.rx)?;
            Ok([
                delay_error(d.tau_los.tau, pp.tau_los, period),
                delay_error(d.tau_ris.tau, pp.tau_ris, period),
                d.xi - pp.xi,
                d.zeta - pp.zeta,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(TrialErrors {
        params,
        positions: out.position.refined_errors(&s.ue_positions),
        coarse_failed: out.position.coarse_failed,
        clamped: out.position.angles.clamped,
    })
}

fn note_trial_flags(trials: &[TrialErrors], axis: &str) {
    let failed = trials.iter().filter(|t| t.coarse_failed).count();
    let clamped = trials.iter().filter(|t| t.clamped).count();
    if failed > 0 {
        log::warn!("axis {axis}: coarse range search infeasible in {failed}/{} trials", trials.len());
    }
    if clamped > 0 {
        log::info!("axis {axis}: arcsine argument clamped in {clamped}/{} trials", trials.len());
    }
}

/// Root mean square of each column.
fn rms_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let width = rows.first().map_or(0, Vec::len);
    (0..width)
        .map(|c| (rows.iter().map(|r| r[c] * r[c]).sum::<f64>() / n).sqrt())
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn push_ecdf(table: &mut ResultTable, label: &str, values: &[f64]) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let n = values.len();
    for (rank, &i) in idx.iter().enumerate() {
        table.push(&axis_label(values[i]), label, Metric::EcdfPoint, (rank + 1) as f64 / n as f64, n, Some(i));
    }
}

fn push_bounds(table: &mut ResultTable, axis: &str, s: &Scenario, reports: &[BoundReport]) {
    let np = reports.len();
    let k = s.num_ues();
    let non_ref: Vec<usize> = (0..k).filter(|u| *u != s.reference_ue).collect();
    for (p, r) in reports.iter().enumerate() {
        for b in &r.crlb {
            table.push(axis, &b.name, Metric::CrlbStd, b.std, 1, Some(p));
        }
        for (u, v) in r.peb.iter().enumerate() {
            table.push(axis, &ue_label(u), Metric::Peb, *v, 1, Some(p));
        }
        for (u, v) in non_ref.iter().zip(&r.ceb) {
            table.push(axis, &ue_label(*u), Metric::Ceb, *v, 1, Some(p));
        }
        table.push(axis, "all", Metric::AvgPeb, r.average_peb(), 1, Some(p));
    }
    for (c, b) in reports[0].crlb.iter().enumerate() {
        table.push(axis, &b.name, Metric::CrlbStd, mean(reports.iter().map(|r| r.crlb[c].std)), np, None);
    }
    for u in 0..k {
        table.push(axis, &ue_label(u), Metric::Peb, mean(reports.iter().map(|r| r.peb[u])), np, None);
    }
    for (c, u) in non_ref.iter().enumerate() {
        table.push(axis, &ue_label(*u), Metric::Ceb, mean(reports.iter().map(|r| r.ceb[c])), np, None);
    }
    table.push(axis, "all", Metric::AvgPeb, mean(reports.iter().map(BoundReport::average_peb)), np, None);
}

/// Channel-parameter CRLBs, PEB/CEB and estimator RMSEs along a transmit
/// power (dBm per UE) or square-RIS-size axis.
pub fn run_power_sweep(plan: &ExperimentPlan) -> Result<ResultTable> {
    let base = plan.base_scenario()?;
    let axis = plan.axis.ok_or_else(|| Error::validation("plan: power sweep needs an axis"))?;
    let kind = plan.codebooks[0];
    let strategy = &plan.power_alloc[0];
    let cfg = plan.chain_config();
    let mut table = ResultTable::default();
    for &v in &plan.values {
        let mut s = base.clone();
        match axis {
            Axis::TxPowerDbm => s.set_uniform_power(dbm_to_watts(v)),
            Axis::RisSize => {
                s.ris_rows = v as usize;
                s.ris_cols = v as usize;
            }
            _ => unreachable!("validated axis"),
        }
        s.validate()?;
        let label = axis_label(v);
        let prepared = par_map(plan.workers, plan.n_profiles, |p| {
            let sched = make_schedule(&s, kind, plan.prior_sigma, plan.codebook_seed(p))?;
            let sp = strategy.apply(&s, &sched)?;
            let report = bound_report(&sp, &sched, false)?;
            Ok((sp, sched, report))
        })?;
        let reports: Vec<BoundReport> = prepared.iter().map(|x| x.2.clone()).collect();
        push_bounds(&mut table, &label, &s, &reports);
        if !plan.estimators {
            continue;
        }
        let n_trials = plan.n_profiles * plan.n_noise;
        let trials = par_map(plan.workers, n_trials, |t| {
            let (p, n) = (t / plan.n_noise, t % plan.n_noise);
            let (sp, sched, report) = &prepared[p];
            run_trial(sp, sched, plan.noise_seed(p, n), &cfg, report)
        })?;
        note_trial_flags(&trials, &label);
        let param_rows: Vec<Vec<f64>> = trials.iter().map(|t| t.params.iter().flatten().copied().collect()).collect();
        let param_rms = rms_columns(&param_rows);
        for (q, (i, j)) in ordered_pairs(s.num_ues()).into_iter().enumerate() {
            for a in 0..4 {
                table.push(&label, &param_name(i, j, a), Metric::Rmse, param_rms[4 * q + a], n_trials, None);
            }
        }
        let pos_rows: Vec<Vec<f64>> = trials.iter().map(|t| t.positions.clone()).collect();
        for (u, v) in rms_columns(&pos_rows).into_iter().enumerate() {
            table.push(&label, &ue_label(u), Metric::Rmse, v, n_trials, None);
        }
    }
    Ok(table)
}

/// Per-codebook-realization PEB and position RMSE with their ECDFs.
pub fn run_profile_ecdf(plan: &ExperimentPlan) -> Result<ResultTable> {
    let base = plan.base_scenario()?;
    let strategy = &plan.power_alloc[0];
    let cfg = plan.chain_config();
    let k = base.num_ues();
    let mut table = ResultTable::default();
    for &kind in &plan.codebooks {
        let label = kind.label();
        let prepared = par_map(plan.workers, plan.n_profiles, |p| {
            let sched = make_schedule(&base, kind, plan.prior_sigma, plan.codebook_seed(p))?;
            let sp = strategy.apply(&base, &sched)?;
            let report = bound_report(&sp, &sched, false)?;
            Ok((sp, sched, report))
        })?;
        for (p, (_, _, r)) in prepared.iter().enumerate() {
            for (u, v) in r.peb.iter().enumerate() {
                table.push(label, &ue_label(u), Metric::Peb, *v, 1, Some(p));
            }
            table.push(label, "all", Metric::AvgPeb, r.average_peb(), 1, Some(p));
        }
        let avg: Vec<f64> = prepared.iter().map(|x| x.2.average_peb()).collect();
        push_ecdf(&mut table, &format!("{label}/avg_peb"), &avg);
        for u in 0..k {
            let v: Vec<f64> = prepared.iter().map(|x| x.2.peb[u]).collect();
            push_ecdf(&mut table, &format!("{label}/peb_{}", ue_label(u)), &v);
        }
        if !plan.estimators {
            continue;
        }
        let trials = par_map(plan.workers, plan.n_profiles * plan.n_noise, |t| {
            let (p, n) = (t / plan.n_noise, t % plan.n_noise);
            let (sp, sched, report) = &prepared[p];
            run_trial(sp, sched, plan.noise_seed(p, n), &cfg, report)
        })?;
        note_trial_flags(&trials, label);
        let per_profile: Vec<Vec<f64>> = trials
            .chunks(plan.n_noise)
            .map(|c| rms_columns(&c.iter().map(|t| t.positions.clone()).collect::<Vec<_>>()))
            .collect();
        for (p, rms) in per_profile.iter().enumerate() {
            for (u, v) in rms.iter().enumerate() {
                table.push(label, &ue_label(u), Metric::Rmse, *v, plan.n_noise, Some(p));
            }
        }
        for u in 0..k {
            let v: Vec<f64> = per_profile.iter().map(|r| r[u]).collect();
            push_ecdf(&mut table, &format!("{label}/rmse_{}", ue_label(u)), &v);
        }
    }
    Ok(table)
}

fn heatmap_metric(metric: &str) -> Result<Option<usize>> {
    if metric == "avg_peb" {
        return Ok(None);
    }
    metric
        .strip_prefix("peb_ue")
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .map(|n| Some(n - 1))
        .ok_or_else(|| Error::validation(format!("plan: unknown heatmap metric '{metric}'")))
}

/// Bound-only grid over two axes; one row per cell, averaged over profiles.
pub fn run_heatmap(plan: &ExperimentPlan) -> Result<ResultTable> {
    let base = plan.base_scenario()?;
    let axis = plan.axis.ok_or_else(|| Error::validation("plan: heatmap needs an axis"))?;
    let ue = heatmap_metric(&plan.metric)?;
    if let Some(u) = ue {
        if u >= base.num_ues() {
            return Err(Error::validation("plan: heatmap metric names a missing UE"));
        }
    }
    let kind = plan.codebooks[0];
    let strategy = &plan.power_alloc[0];
    let cells: Vec<(f64, f64)> = plan
        .values
        .iter()
        .flat_map(|a| plan.values2.iter().map(move |b| (*a, *b)))
        .collect();
    let np = plan.n_profiles;
    let vals = par_map(plan.workers, cells.len() * np, |t| {
        let ((a, b), p) = (cells[t / np], t % np);
        let mut s = base.clone();
        match axis {
            Axis::PowerSplit => {
                if base.num_ues() != 3 {
                    return Err(Error::validation("plan: power_split needs three UEs"));
                }
                s.tx_powers = powers_from_scaling(base.total_power, a, b).to_vec();
            }
            Axis::RisPosition => s.ris_center = Point::new(base.ris_center.x, a, b),
            Axis::Ue3Position => {
                if base.num_ues() < 3 {
                    return Err(Error::validation("plan: ue3_position needs a third UE"));
                }
                s.ue_positions[2] = Point::new(a, b, base.ue_positions[2].z);
                s.priors[2].mean = s.ue_positions[2];
            }
            _ => unreachable!("validated axis"),
        }
        s.validate()?;
        let sched = make_schedule(&s, kind, plan.prior_sigma, plan.codebook_seed(p))?;
        if axis != Axis::PowerSplit {
            s = strategy.apply(&s, &sched)?;
        }
        let r = bound_report(&s, &sched, false)?;
        Ok(match ue {
            None => r.average_peb(),
            Some(u) => r.peb[u],
        })
    })?;
    let mut table = ResultTable::default();
    let (name, metric) = match ue {
        None => ("all".to_string(), Metric::AvgPeb),
        Some(u) => (ue_label(u), Metric::Peb),
    };
    for (c, (a, b)) in cells.iter().enumerate() {
        let v = mean(vals[c * np..(c + 1) * np].iter().copied());
        table.push(&format!("{};{}", axis_label(*a), axis_label(*b)), &name, metric, v, np, None);
    }
    Ok(table)
}

/// Average PEB versus prior variance for each codebook and power strategy.
pub fn run_uncertainty_sweep(plan: &ExperimentPlan) -> Result<ResultTable> {
    let base = plan.base_scenario()?;
    let np = plan.n_profiles;
    let mut table = ResultTable::default();
    for &v in &plan.values {
        if !(v > 0.0) {
            return Err(Error::validation("plan: prior variances must be positive"));
        }
        let mut s = base.clone();
        s.priors = s.priors.iter().map(|p| Prior::isotropic(p.mean, v)).collect();
        for &kind in &plan.codebooks {
            for strategy in &plan.power_alloc {
                let vals = par_map(plan.workers, np, |p| {
                    let sched = make_schedule(&s, kind, Some(v), plan.codebook_seed(p))?;
                    let sp = strategy.apply(&s, &sched)?;
                    Ok(bound_report(&sp, &sched, false)?.average_peb())
                })?;
                let name = format!("{}/{}", kind.label(), strategy.label());
                table.push(&axis_label(v), &name, Metric::AvgPeb, mean(vals), np, None);
            }
        }
    }
    Ok(table)
}

/// Estimator chain with scatter-point multipath in the observations: RMSE
/// per RCS value and the ECDF of the target UE's per-realization error.
pub fn run_multipath(plan: &ExperimentPlan) -> Result<ResultTable> {
    let base = plan.base_scenario()?;
    let k = base.num_ues();
    if plan.target_ue == 0 || plan.target_ue > k {
        return Err(Error::validation("plan: target_ue out of range"));
    }
    let target = plan.target_ue - 1;
    let kind = plan.codebooks[0];
    let strategy = &plan.power_alloc[0];
    let cfg = plan.chain_config();
    let mut table = ResultTable::default();
    for &rcs in &plan.values {
        if rcs < 0.0 {
            return Err(Error::validation("multipath: rcs must be non-negative"));
        }
        let label = axis_label(rcs);
        let prepared = par_map(plan.workers, plan.n_profiles, |p| {
            let mut s = base.clone();
            s.rcs = rcs;
            s.randomize_scatter_points(plan.sps_per_ue, plan.aux_seed(p));
            let sched = make_schedule(&s, kind, plan.prior_sigma, plan.codebook_seed(p))?;
            let s = strategy.apply(&s, &sched)?;
            let report = bound_report(&s, &sched, false)?;
            Ok((s, sched, report))
        })?;
        let trials = par_map(plan.workers, plan.n_profiles * plan.n_noise, |t| {
            let (p, n) = (t / plan.n_noise, t % plan.n_noise);
            let (s, sched, report) = &prepared[p];
            run_trial(s, sched, plan.noise_seed(p, n), &cfg, report)
        })?;
        note_trial_flags(&trials, &label);
        let all: Vec<Vec<f64>> = trials.iter().map(|t| t.positions.clone()).collect();
        for (u, v) in rms_columns(&all).into_iter().enumerate() {
            table.push(&label, &ue_label(u), Metric::Rmse, v, trials.len(), None);
        }
        let per_profile: Vec<f64> = trials
            .chunks(plan.n_noise)
            .map(|c| (c.iter().map(|t| t.positions[target].powi(2)).sum::<f64>() / c.len() as f64).sqrt())
            .collect();
        for (p, v) in per_profile.iter().enumerate() {
            table.push(&label, &ue_label(target), Metric::Rmse, *v, plan.n_noise, Some(p));
        }
        push_ecdf(&mut table, &format!("{}@rcs={label}", ue_label(target)), &per_profile);
    }
    Ok(table)
}

/// UE positions drawn uniformly in the plan's placement box; the first `K`
/// of them form the `K`-UE scenario, so placements are nested in `K`.
pub fn nested_placement(plan: &ExperimentPlan, count: usize) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.aux_seed(0));
    let (lo, hi) = (plan.placement_min, plan.placement_max);
    (0..count)
        .map(|_| {
            Point::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            )
        })
        .collect()
}

/// Copy of `base` with the given UEs, per-UE power of `base`'s first UE,
/// zero clock offsets and isotropic priors at the true positions.
pub fn with_ues(base: &Scenario, positions: &[Point], prior_sigma: f64) -> Scenario {
    let k = positions.len();
    let mut s = base.clone();
    s.ue_positions = positions.to_vec();
    s.clock_offsets = vec![0.0; k];
    s.reference_ue = 0;
    s.set_uniform_power(base.tx_powers[0]);
    s.sp_positions.clear();
    s.set_isotropic_priors(prior_sigma);
    s
}

/// PEB of UE 1 (and the average PEB) versus the number of UEs.
pub fn run_ue_count(plan: &ExperimentPlan) -> Result<ResultTable> {
    let base = plan.base_scenario()?;
    let sigma = plan.prior_sigma.unwrap_or(1.5);
    let max_k = plan.values.iter().fold(0.0f64, |m, v| m.max(*v)) as usize;
    if plan.placement_min.x <= base.ris_center.x {
        return Err(Error::validation("plan: placement box must lie in front of the RIS"));
    }
    let placement = nested_placement(plan, max_k);
    let np = plan.n_profiles;
    let strategy = &plan.power_alloc[0];
    let mut table = ResultTable::default();
    for &v in &plan.values {
        let s = with_ues(&base, &placement[..v as usize], sigma);
        s.validate()?;
        for &kind in &plan.codebooks {
            let reports = par_map(plan.workers, np, |p| {
                let sched = make_schedule(&s, kind, None, plan.codebook_seed(p))?;
                let sp = strategy.apply(&s, &sched)?;
                bound_report(&sp, &sched, false)
            })?;
            let label = axis_label(v);
            let name = kind.label();
            table.push(&label, &format!("{name}/ue1"), Metric::Peb, mean(reports.iter().map(|r| r.peb[0])), np, None);
            table.push(&label, &format!("{name}/all"), Metric::AvgPeb, mean(reports.iter().map(BoundReport::average_peb)), np, None);
        }
    }
    Ok(table)
}

/// Dispatches on the plan's experiment.
pub fn run_plan(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    match plan.experiment {
        Experiment::PowerSweep => run_power_sweep(plan),
        Experiment::ProfileEcdf => run_profile_ecdf(plan),
        Experiment::Heatmap => run_heatmap(plan),
        Experiment::UncertaintySweep => run_uncertainty_sweep(plan),
        Experiment::Multipath => run_multipath(plan),
        Experiment::UeCount => run_ue_count(plan),
    }
}
