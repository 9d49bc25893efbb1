use risloc::harness::{run_plan, Axis, Experiment, ExperimentPlan, Metric};
use risloc::pipeline::{derive_seed, run_chain, ChainConfig};
use risloc::profiles::random_codebook;
use risloc::scenario::Scenario;

fn small_plan(dir: &std::path::Path, e: Experiment) -> ExperimentPlan {
    let mut s = Scenario::table1();
    s.n_subcarriers = 300;
    s.ifft_length = 3000;
    s.slots_per_ue = 8;
    // compensates the 50x smaller time-bandwidth product
    s.set_uniform_power(10.0);
    let path = dir.join("small.toml");
    std::fs::write(&path, s.to_toml_string()).unwrap();
    let mut plan = ExperimentPlan::new(e);
    plan.scenario = Some(path);
    plan
}

#[test]
fn trial_counts_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(dir.path(), Experiment::PowerSweep);
    plan.axis = Some(Axis::TxPowerDbm);
    plan.values = vec![23.0];
    plan.n_profiles = 3;
    plan.n_noise = 4;
    let t = run_plan(&plan).unwrap();
    for r in &t.rows {
        let want = match (r.metric, r.profile_id) {
            (Metric::Rmse, None) => 12,
            (_, None) => 3,
            (_, Some(_)) => 1,
        };
        assert_eq!(r.n_trials, want, "{r:?}");
    }
    assert_eq!(t.select("tau_r_12", Metric::Rmse).count(), 1);
    assert_eq!(t.select("ue2", Metric::Peb).filter(|r| r.profile_id.is_some()).count(), 3);
}

#[test]
fn zero_rcs_matches_the_scatter_free_chain() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(dir.path(), Experiment::Multipath);
    plan.axis = Some(Axis::Rcs);
    plan.values = vec![0.0];
    plan.n_profiles = 3;
    plan.n_noise = 2;
    plan.seed = 5;
    let t = run_plan(&plan).unwrap();
    let s = plan.base_scenario().unwrap();
    let cfg = ChainConfig { fallback_on_infeasible: true, ..Default::default() };
    for p in 0..3 {
        let sched = random_codebook(&s, derive_seed(5, p, None));
        let sq: f64 = (0..2)
            .map(|n| {
                let out = run_chain(&s, &sched, derive_seed(5, p, Some(n)), &cfg, None).unwrap();
                out.position.refined_errors(&s.ue_positions)[2].powi(2)
            })
            .sum();
        let want = (sq / 2.0).sqrt();
        let got = t
            .select("ue3", Metric::Rmse)
            .find(|r| r.profile_id == Some(p as usize))
            .unwrap()
            .value;
        assert_eq!(got, want);
    }
    let ecdf: Vec<f64> = t.select("ue3@rcs=0", Metric::EcdfPoint).map(|r| r.value).collect();
    assert_eq!(ecdf.len(), 3);
    assert_eq!(ecdf.last(), Some(&1.0));
}

#[test]
fn bound_only_sweeps_skip_trials() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(dir.path(), Experiment::PowerSweep);
    plan.axis = Some(Axis::RisSize);
    plan.values = vec![5.0, 11.0];
    plan.n_profiles = 4;
    plan.estimators = false;
    let t = run_plan(&plan).unwrap();
    assert!(t.rows.iter().all(|r| r.metric != Metric::Rmse));
    // a larger surface collects more energy on the RIS path
    let small = t.value("5", "all", Metric::AvgPeb).unwrap();
    let large = t.value("11", "all", Metric::AvgPeb).unwrap();
    assert!(large < small);
}

#[test]
fn ue_count_bounds_shrink_with_more_ues() {
    let mut plan = ExperimentPlan::new(Experiment::UeCount);
    plan.axis = Some(Axis::NUes);
    plan.values = vec![3.0, 4.0, 5.0];
    plan.n_profiles = 3;
    let t = run_plan(&plan).unwrap();
    let v: Vec<f64> = ["3", "4", "5"].iter().map(|k| t.value(k, "random/ue1", Metric::Peb).unwrap()).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
}
