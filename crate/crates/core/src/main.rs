use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use risloc::bounds::{bound_report, BoundReport};
use risloc::channel::ordered_pairs;
use risloc::channel::pair_params;
use risloc::estimators::{MeasurementVector, SpatialSearch};
use risloc::harness::{make_schedule, run_plan, Experiment, ExperimentPlan};
use risloc::locator::default_d_search;
use risloc::pipeline::{derive_seed, locate_with, run_chain, ChainConfig, WeightingMode};
use risloc::power::{allocate_power, PowerOptions, PowerStrategy};
use risloc::profiles::{CodebookKind, RisSchedule};
use risloc::scenario::{watts_to_dbm, Point, Scenario};
use risloc::{Error, Result};

#[derive(Parser)]
#[command(name = "risloc", version, about = "RIS-aided cooperative sidelink positioning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Channel-parameter CRLBs and per-UE PEB/CEB.
    Bounds {
        #[command(flatten)]
        setup: Setup,
        /// Also write the per-UE table here (default: after the parameter table).
        #[arg(long)]
        peb_out: Option<PathBuf>,
    },
    /// Synthesize one occasion and estimate the per-direction channel parameters.
    Estimate {
        #[command(flatten)]
        setup: Setup,
    },
    /// Positions from a measurement CSV or from a freshly simulated occasion.
    Locate {
        #[command(flatten)]
        setup: Setup,
        /// Measurement CSV written by `estimate`.
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// identity (delays as ranges in meters) or crlb-diag.
        #[arg(long, default_value = "identity")]
        weighting: WeightingMode,
        /// When every candidate range is infeasible, refine from the mid search range.
        #[arg(long)]
        fallback_start: bool,
    },
    /// Run an experiment plan.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a heatmap plan.
    Heatmap {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Transmit powers minimizing the average PEB at the prior means.
    AllocatePower {
        #[command(flatten)]
        setup: Setup,
    },
}

#[derive(Args)]
struct Setup {
    /// Scenario TOML; the Table I scenario when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// RIS schedule CSV; a codebook is drawn when absent.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Write the schedule in use to this CSV.
    #[arg(long)]
    schedule_out: Option<PathBuf>,
    #[arg(long, default_value = "random")]
    codebook: CodebookKind,
    /// Isotropic prior variance (m^2) for directional codebooks.
    #[arg(long)]
    prior_sigma: Option<f64>,
    /// uniform, optimal or manual:<p1>,<p2>,...
    #[arg(long, default_value = "uniform")]
    power_alloc: PowerStrategy,
    /// Pseudo-inverse instead of failing on a singular FIM.
    #[arg(long)]
    allow_singular: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for symmetry with plan runs; single occasions use one thread.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Overrides the plan's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the plan's output path; stdout when neither is set.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// Scenario, schedule and power setting shared by the single-occasion commands.
struct Prepared {
    scenario: Scenario,
    schedule: RisSchedule,
}

impl Setup {
    fn prepare(&self) -> Result<Prepared> {
        let base = match &self.scenario {
            Some(p) => Scenario::load(p)?,
            None => Scenario::table1(),
        };
        let schedule = match &self.schedule {
            Some(p) => RisSchedule::read_csv(&base, File::open(p)?)?,
            None => make_schedule(&base, self.codebook, self.prior_sigma, derive_seed(self.seed, 0, None))?,
        };
        if let Some(p) = &self.schedule_out {
            schedule.write_csv(BufWriter::new(File::create(p)?))?;
        }
        let scenario = self.power_alloc.apply(&base, &schedule)?;
        let ff = scenario.check_far_field();
        if !ff.satisfied {
            log::warn!("far-field assumption is weak (distance ratio {:.2})", ff.ratio);
        }
        Ok(Prepared { scenario, schedule })
    }

    fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, 0, Some(0))
    }
}

fn bounds(setup: &Setup, peb_out: Option<&Path>) -> Result<()> {
    let p = setup.prepare()?;
    let r = bound_report(&p.scenario, &p.schedule, setup.allow_singular)?;
    let mut out = writer(setup.out.as_deref())?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["parameter_name", "crlb_std"])?;
        for b in &r.crlb {
            w.write_record([b.name.clone(), format!("{:e}", b.std)])?;
        }
        w.flush()?;
    }
    match peb_out {
        Some(path) => write_peb(&p.scenario, &r, writer(Some(path))?)?,
        None => {
            writeln!(out)?;
            write_peb(&p.scenario, &r, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_peb<W: Write>(s: &Scenario, r: &BoundReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ue_index", "peb_m", "ceb_s"])?;
    let mut ceb = r.ceb.iter();
    for (u, peb) in r.peb.iter().enumerate() {
        let c = if u == s.reference_ue { 0.0 } else { *ceb.next().expect("one CEB per non-reference UE") };
        w.write_record([(u + 1).to_string(), format!("{peb:e}"), format!("{c:e}")])?;
    }
    w.flush()?;
    Ok(())
}

fn truth_table(s: &Scenario) -> Result<Vec<[f64; 4]>> {
    ordered_pairs(s.num_ues())
        .into_iter()
        .map(|(i, j)| {
            let e = pair_params(s, i, j)?.eta();
            Ok([e[0], e[1], e[2], e[3]])
        })
        .collect()
}

fn estimate(setup: &Setup) -> Result<()> {
    let p = setup.prepare()?;
    let obs = risloc::channel::synthesize(&p.scenario, &p.schedule, setup.noise_seed())?;
    let m = risloc::estimators::estimate_all(&p.scenario, &p.schedule, &obs, SpatialSearch::default())?;
    let mut out = writer(setup.out.as_deref())?;
    m.write_csv(&truth_table(&p.scenario)?, &mut out)?;
    out.flush()?;
    Ok(())
}

fn locate(setup: &Setup, measurements: Option<&Path>, weighting: WeightingMode, fallback: bool) -> Result<()> {
    let p = setup.prepare()?;
    let s = &p.scenario;
    let cfg = ChainConfig {
        search: SpatialSearch::default(),
        weighting,
        d_search: default_d_search(),
        fallback_on_infeasible: fallback,
    };
    let report = match weighting {
        WeightingMode::CrlbDiag => Some(bound_report(s, &p.schedule, setup.allow_singular)?),
        WeightingMode::Identity => None,
    };
    let est = match measurements {
        Some(path) => {
            let m = MeasurementVector::read_csv(s.num_ues(), 1.0 / s.subcarrier_spacing, File::open(path)?)?;
            locate_with(s, &m, &cfg, report.as_ref())?
        }
        None => run_chain(s, &p.schedule, setup.noise_seed(), &cfg, report.as_ref())?.position,
    };
    if est.angles.clamped {
        log::info!("arcsine argument clamped during angle recovery");
    }
    if est.refined.hit_iteration_cap {
        log::warn!("refinement stopped at the iteration cap");
    }
    let coarse = est.coarse_errors(&s.ue_positions);
    let refined = est.refined_errors(&s.ue_positions);
    let mut out = writer(setup.out.as_deref())?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "ue", "x_true", "y_true", "z_true", "x_est", "y_est", "z_est", "err_coarse_m", "err_refined_m",
        ])?;
        for (u, (t, e)) in s.ue_positions.iter().zip(&est.refined.positions).enumerate() {
            let f = |v: f64| format!("{v:e}");
            w.write_record([
                (u + 1).to_string(),
                f(t.x),
                f(t.y),
                f(t.z),
                f(e.x),
                f(e.y),
                f(e.z),
                f(coarse[u]),
                f(refined[u]),
            ])?;
        }
        w.flush()?;
    }
    out.flush()?;
    Ok(())
}

fn run(args: &RunArgs, heatmap_only: bool) -> Result<()> {
    let mut plan = ExperimentPlan::load(&args.plan)?;
    if heatmap_only && plan.experiment != Experiment::Heatmap {
        return Err(Error::Validation("heatmap: the plan is not a heatmap experiment".into()));
    }
    if let Some(s) = args.seed {
        plan.seed = s;
    }
    if let Some(w) = args.workers {
        plan.workers = Some(w);
    }
    if let Some(o) = &args.out {
        plan.output = Some(o.clone());
    }
    plan.validate()?;
    let table = run_plan(&plan)?;
    let mut out = writer(plan.output.as_deref())?;
    table.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn allocate(setup: &Setup) -> Result<()> {
    let p = setup.prepare()?;
    let s = &p.scenario;
    let means: Vec<Point> = s.priors.iter().map(|pr| pr.mean).collect();
    let a = allocate_power(s, &p.schedule, &means, PowerOptions::default())?;
    if let Some((eps, ups)) = a.scaling_factors() {
        log::info!("scaling factors eps = {eps:.6}, ups = {ups:.6}");
    }
    let mut out = writer(setup.out.as_deref())?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["ue", "power_w", "power_dbm", "peb_m"])?;
        for (u, (pw, peb)) in a.powers.iter().zip(&a.peb).enumerate() {
            w.write_record([(u + 1).to_string(), format!("{pw:e}"), format!("{:e}", watts_to_dbm(*pw)), format!("{peb:e}")])?;
        }
        w.flush()?;
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bounds { setup, peb_out } => bounds(setup, peb_out.as_deref()),
        Command::Estimate { setup } => estimate(setup),
        Command::Locate { setup, measurements, weighting, fallback_start } => {
            locate(setup, measurements.as_deref(), *weighting, *fallback_start)
        }
        Command::Sweep { run: args } => run(args, false),
        Command::Heatmap { run: args } => run(args, true),
        Command::AllocatePower { setup } => allocate(setup),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
