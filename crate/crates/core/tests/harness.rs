use unitfield::harness::{
    fit_slope, run_study, slopes_vs_n, summarize, ExperimentConfig, GridPoint, Record, Study,
};
use unitfield::imputation::ImputeConfig;
use unitfield::optimizer::FitConfig;
use unitfield::Bounds;

fn config(study: Study, grid: Vec<GridPoint>, trials: usize) -> ExperimentConfig {
    let fit = FitConfig { max_iters: 200, ..FitConfig::default() };
    ExperimentConfig {
        study,
        grid,
        trials,
        bounds: Bounds::new(6.0, 4.0, 1.0).unwrap(),
        target_kappa: 0.0,
        fit: ImputeConfig { fit: fit.clone(), unit_fit: fit, kappa_threshold: 0.15 },
        gibbs: Default::default(),
        master_seed: 11,
    }
}

#[test]
fn one_cell_gives_one_record_per_metric() {
    let cfg = config(Study::ThetaMatrixVsN, vec![GridPoint { p: 6, p_v: 2, n: 32 }], 1);
    let result = run_study(&cfg).unwrap();
    assert_eq!(result.records.len(), 3);
    assert!(result.failures.is_empty());
    let names: Vec<&str> = result.records.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(names, Study::ThetaMatrixVsN.metrics());
    assert!(result.records.iter().all(|r| r.value.is_finite() && r.study == "theta_matrix_vs_n"));
}

#[test]
fn records_are_complete_and_reproducible() {
    let mut grid = ExperimentConfig::powers_of_two(6, 2, 4, 5);
    grid.push(GridPoint { p: 6, p_v: 5, n: 16 }); // p - p_v odd: this cell fails
    let cfg = config(Study::DeltaVVsN, grid, 2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_study(&cfg).unwrap())
    };
    let a = run(1);
    assert_eq!(a.records.len(), 3 * 2 * 3);
    assert_eq!(a.failures.len(), 2);
    assert!(a.records.iter().filter(|r| r.p_v == 5).all(|r| r.value.is_nan()));
    assert_eq!(a.provenance.seeds.len(), 6);
    let b = run(4);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let bits = |r: &[Record]| r.iter().map(|x| x.value.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.records), bits(&b.records));
}

#[test]
fn shared_recovery_study_runs() {
    let cfg = config(Study::SharedRecovery, vec![GridPoint { p: 4, p_v: 0, n: 64 }], 1);
    let result = run_study(&cfg).unwrap();
    let names: Vec<&str> = result.records.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(names, ["theta_matrix_2inf", "phi_l2", "final_loss"]);
}

#[test]
fn slope_examples() {
    assert!((fit_slope(&[(1.0, 1.0), (10.0, 0.1)]).unwrap().0 + 1.0).abs() < 1e-15);
    assert_eq!(fit_slope(&[(1.0, 2.0), (10.0, 2.0)]).unwrap().0, 0.0);
    let pts: Vec<(f64, f64)> = [128.0, 256.0, 512.0, 1024.0, 2048.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(-0.56))).collect();
    let (slope, intercept) = fit_slope(&pts).unwrap();
    assert!((slope + 0.56).abs() < 1e-10);
    assert!((intercept - 3f64.ln()).abs() < 1e-10);
    assert!(fit_slope(&[(1.0, 1.0)]).is_err());
    assert!(fit_slope(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
}

#[test]
fn summaries_and_slopes() {
    let record = |n: usize, trial: usize, value: f64| Record {
        study: "s".into(),
        p: 4,
        p_v: 1,
        n,
        trial,
        metric: "m".into(),
        value,
    };
    let mut records = Vec::new();
    for (n, values) in [(10usize, [1.0, 3.0, 2.0]), (100, [0.1, 0.3, 0.2])] {
        for (t, v) in values.into_iter().enumerate() {
            records.push(record(n, t, v));
        }
    }
    records.push(record(100, 3, f64::NAN));
    let summary = summarize(&records);
    assert_eq!(summary.len(), 2);
    let first = &summary[0];
    assert_eq!((first.n, first.count), (10, 3));
    assert!((first.mean - 2.0).abs() < 1e-15);
    // sample standard deviation 1, three trials
    assert!((first.std_error - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    assert_eq!(summary[1].count, 3);
    let slopes = slopes_vs_n(&summary, "m");
    assert_eq!(slopes.len(), 1);
    assert!((slopes[0].slope + 1.0).abs() < 1e-12);
}
