//! End-to-end acceptance gate. Each test states its tolerance inline and
//! prints a PASS line once the check holds; a failed assertion is the FAIL.
//!
//! The Monte Carlo checks use 2,000 seeded replications, so the tolerance
//! bands are roughly three standard errors wide.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use rankcal::are::{self, DistributionSpec};
use rankcal::calibration::{self, AdjustMode, CalibrationOptions};
use rankcal::domain::{DesignSpec, TrialData};
use rankcal::inference::{self, CiMethod, TestConfig};
use rankcal::randomization::{
    assign_minimization, assign_simple, assign_stratified_block, balance_report,
    RandomizationScheme, SchemeKind,
};
use rankcal::rank_core::{compute_u, Kernel, PairSample};
use rankcal::simlab::{
    generate_dataset, run_study, run_study_with, theta_truth_oracle, EstimatorKind,
    OutcomeFamily, Parallelism, Scenario, ORACLE_DRAWS,
};

fn pass(name: &str) {
    println!("acceptance: {name}: PASS");
}

fn scenario(
    family: OutcomeFamily,
    effect_a: f64,
    n: usize,
    randomizer: SchemeKind,
    replications: usize,
    seed: u64,
) -> Scenario {
    Scenario {
        outcome_family: family,
        effect_a,
        rho: 0.3,
        coefficients: vec![0.3, 0.3],
        outcome_variance: None,
        n,
        num_treatments: 4,
        pi: None,
        randomizer,
        replications,
        seed,
    }
}

fn row(table: &rankcal::simlab::StudyTable, kind: EstimatorKind) -> &rankcal::simlab::MetricsRow {
    table
        .rows
        .iter()
        .find(|r| r.estimator == kind)
        .expect("estimator row present")
}

/// Standard dataset used by the property checks: 4 arms, simple
/// randomization, bivariate normal covariates.
fn property_data(seed: u64, n: usize) -> (TrialData, DesignSpec) {
    let sc = scenario(OutcomeFamily::Normal, 0.15, n, SchemeKind::Simple, 1, seed);
    let data = generate_dataset(&sc, 0).unwrap();
    let design = sc.design().unwrap();
    (data, design)
}

#[test]
fn efficiency_constants_are_exact() {
    let normal = are::are_wmw_vs_t(&DistributionSpec::Normal { variance: 1.0 }).unwrap();
    assert!(
        (normal - 3.0 / std::f64::consts::PI).abs() < 1e-9,
        "normal constant {normal}"
    );
    let uniform = are::are_wmw_vs_t(&DistributionSpec::uniform_unit()).unwrap();
    assert!((uniform - 1.0).abs() < 1e-9, "uniform constant {uniform}");
    let laplace =
        are::are_wmw_vs_t(&DistributionSpec::DoubleExponential { variance: 1.0 }).unwrap();
    assert!((laplace - 1.5).abs() < 1e-9, "double-exponential constant {laplace}");
    pass("closed-form efficiency constants (3/pi, 1, 1.5) within 1e-9");
}

#[test]
fn fast_kernel_matches_brute_force() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_0002);
    for case in 0..1_000 {
        let n_j = rng.random_range(1..=200);
        let n_k = rng.random_range(1..=200);
        // continuous draws; verify the instance really is tie-free
        let y_j: Vec<f64> = (0..n_j).map(|_| rng.random::<f64>()).collect();
        let y_k: Vec<f64> = (0..n_k).map(|_| rng.random::<f64>()).collect();
        let mut pooled: Vec<f64> = y_j.iter().chain(&y_k).copied().collect();
        pooled.sort_by(f64::total_cmp);
        pooled.dedup();
        assert_eq!(pooled.len(), n_j + n_k, "tie in generated instance {case}");

        let sample = PairSample::new(y_j, y_k).unwrap();
        let fast = compute_u(&sample, Kernel::Fast);
        let brute = compute_u(&sample, Kernel::Brute);
        assert_eq!(fast, brute, "kernel mismatch on instance {case}");
    }
    pass("fast U kernel equals brute force exactly on 1,000 random instances");
}

#[test]
fn null_simple_randomization_study() {
    let sc = scenario(
        OutcomeFamily::Normal,
        0.0,
        400,
        SchemeKind::Simple,
        2_000,
        0x5eed_0003,
    );
    let table = run_study(&sc, Some(0.5)).unwrap();

    for kind in [EstimatorKind::MeanDiff, EstimatorKind::U, EstimatorKind::UAdjusted] {
        let r = row(&table, kind);
        assert!(
            (r.p - 0.05).abs() <= 0.015,
            "{kind:?} type I error {} outside 0.05 +/- 0.015",
            r.p
        );
        assert!(
            (0.93..=0.96).contains(&r.cp),
            "{kind:?} coverage {} outside [0.93, 0.96]",
            r.cp
        );
    }
    let sd_u = row(&table, EstimatorKind::U).sd.unwrap();
    let sd_uc = row(&table, EstimatorKind::UAdjusted).sd.unwrap();
    assert!(
        (sd_u - 0.042).abs() <= 0.004,
        "U empirical SD {sd_u} outside 0.042 +/- 0.004"
    );
    assert!(
        (sd_uc - 0.031).abs() <= 0.004,
        "adjusted U empirical SD {sd_uc} outside 0.031 +/- 0.004"
    );
    pass("null study, simple randomization: size, SD, and coverage in band");
}

#[test]
fn stratified_block_conservativeness() {
    let sc = scenario(
        OutcomeFamily::Normal,
        0.0,
        400,
        SchemeKind::StratifiedBlock { block_size: 8 },
        2_000,
        0x5eed_0004,
    );
    let table = run_study(&sc, Some(0.5)).unwrap();
    let p_u = row(&table, EstimatorKind::U).p;
    let p_uc = row(&table, EstimatorKind::UAdjusted).p;
    assert!(
        p_u <= 0.035,
        "unadjusted test under stratified blocks should be conservative, got {p_u}"
    );
    assert!(
        (p_uc - 0.05).abs() <= 0.015,
        "adjusted test size {p_uc} outside 0.05 +/- 0.015"
    );
    pass("stratified permuted blocks: unadjusted conservative, adjusted exact");
}

#[test]
fn calibration_power_gain() {
    let normal = scenario(
        OutcomeFamily::Normal,
        0.2,
        400,
        SchemeKind::Simple,
        2_000,
        0x5eed_0005,
    );
    let table = run_study(&normal, None).unwrap();
    let gap = row(&table, EstimatorKind::UAdjusted).p - row(&table, EstimatorKind::U).p;
    assert!(gap >= 0.15, "normal power gain {gap} below 0.15");

    let laplace = scenario(
        OutcomeFamily::DoubleExponential,
        0.2,
        400,
        SchemeKind::Simple,
        2_000,
        0x5eed_0006,
    );
    let table = run_study(&laplace, None).unwrap();
    let gap = row(&table, EstimatorKind::UAdjusted).p - row(&table, EstimatorKind::U).p;
    assert!(gap >= 0.10, "double-exponential power gain {gap} below 0.10");
    pass("calibration power gain: >= 0.15 (normal), >= 0.10 (double-exponential)");
}

#[test]
fn rank_test_beats_t_under_heavy_tails() {
    let sc = scenario(
        OutcomeFamily::DoubleExponential,
        0.3,
        400,
        SchemeKind::Simple,
        2_000,
        0x5eed_0007,
    );
    let table = run_study(&sc, None).unwrap();
    let p_u = row(&table, EstimatorKind::U).p;
    let p_t = row(&table, EstimatorKind::MeanDiff).p;
    assert!(
        p_u > p_t,
        "rank test power {p_u} should exceed t-test power {p_t} under double-exponential noise"
    );
    pass("double-exponential alternatives: rank test outpowers the t-test");
}

#[test]
fn invariance_and_identity_properties() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_0008);
    let config = TestConfig::default();
    let options = CalibrationOptions::default();

    // U_jk + U_kj = 1 on tie-free data, exactly.
    for _ in 0..200 {
        let n_j = rng.random_range(2..=60);
        let n_k = rng.random_range(2..=60);
        let y_j: Vec<f64> = (0..n_j).map(|_| rng.random::<f64>()).collect();
        let y_k: Vec<f64> = (0..n_k).map(|_| rng.random::<f64>()).collect();
        let sample = PairSample::new(y_j, y_k).unwrap();
        let u = compute_u(&sample, Kernel::Fast);
        let u_rev = compute_u(&sample.swapped(), Kernel::Fast);
        assert_eq!(u + u_rev, 1.0, "U_jk + U_kj != 1");
    }

    // Monotone-transform invariance of U and the adjusted U, exactly:
    // strictly increasing outcome transforms preserve every comparison.
    for seed in 0..20u64 {
        let (data, design) = property_data(0x100 + seed, 160);
        let sample = calibration::pair_sample(&data, &design).unwrap();
        let u = compute_u(&sample, Kernel::Fast);
        let est = calibration::adjusted_u(&data, &design, AdjustMode::PooledMean, &options).unwrap();

        let transformed: Vec<f64> = data
            .outcomes()
            .iter()
            .map(|&y| y.powi(3) + 2.0 * y) // strictly increasing
            .collect();
        let covariates: Vec<Vec<f64>> =
            (0..data.n()).map(|i| data.covariate_row(i).to_vec()).collect();
        let data_t = TrialData::new(
            data.treatments().to_vec(),
            transformed,
            covariates,
            None,
            data.num_treatments(),
        )
        .unwrap();
        let sample_t = calibration::pair_sample(&data_t, &design).unwrap();
        assert_eq!(compute_u(&sample_t, Kernel::Fast), u);
        let est_t =
            calibration::adjusted_u(&data_t, &design, AdjustMode::PooledMean, &options).unwrap();
        assert_eq!(est_t.u_adjusted, est.u_adjusted);
    }

    // Affine equivariance of the adjusted U (1e-10): X -> A X + b with
    // invertible A leaves the calibrated statistic unchanged.
    for seed in 0..20u64 {
        let (data, design) = property_data(0x200 + seed, 160);
        let est = calibration::adjusted_u(&data, &design, AdjustMode::PooledMean, &options).unwrap();
        let a = [[1.7, -0.4], [0.6, 2.2]]; // det = 3.98, invertible
        let b = [3.0, -1.5];
        let covariates: Vec<Vec<f64>> = (0..data.n())
            .map(|i| {
                let x = data.covariate_row(i);
                vec![
                    a[0][0] * x[0] + a[0][1] * x[1] + b[0],
                    a[1][0] * x[0] + a[1][1] * x[1] + b[1],
                ]
            })
            .collect();
        let data_a = TrialData::new(
            data.treatments().to_vec(),
            data.outcomes().to_vec(),
            covariates,
            None,
            data.num_treatments(),
        )
        .unwrap();
        let est_a =
            calibration::adjusted_u(&data_a, &design, AdjustMode::PooledMean, &options).unwrap();
        assert!(
            (est_a.u_adjusted - est.u_adjusted).abs() < 1e-10,
            "affine transform moved adjusted U by {}",
            (est_a.u_adjusted - est.u_adjusted).abs()
        );
    }

    // Zero coefficients reduce the adjusted statistic to the plain one.
    {
        let (data, design) = property_data(0x300, 160);
        let sample = calibration::pair_sample(&data, &design).unwrap();
        let u = compute_u(&sample, Kernel::Fast);
        let mut fit = calibration::fit_calibration(&data, &design, &options).unwrap();
        fit.beta_j_hat = DVector::zeros(data.p());
        fit.beta_k_hat = DVector::zeros(data.p());
        assert_eq!(calibration::adjust(u, &fit, AdjustMode::PooledMean), u);
        assert_eq!(calibration::adjust(u, &fit, AdjustMode::RestrictedMean), u);
    }

    // phi-hat >= 0 and adjusted CI no wider than unadjusted CI.
    for seed in 0..30u64 {
        let (data, design) = property_data(0x400 + seed, 160);
        let fit = calibration::fit_calibration(&data, &design, &options).unwrap();
        let vc = inference::variance_components(&data, &design, &fit).unwrap();
        assert!(vc.phi_jk_hat >= 0.0, "phi-hat {} negative", vc.phi_jk_hat);

        let unadj =
            inference::confidence_interval(&data, &design, CiMethod::Unadjusted, config.alpha)
                .unwrap();
        let adj = inference::confidence_interval(&data, &design, CiMethod::Adjusted, config.alpha)
            .unwrap();
        let w_u = unadj.ci_high - unadj.ci_low;
        let w_a = adj.ci_high - adj.ci_low;
        assert!(w_a <= w_u + 1e-15, "adjusted CI width {w_a} exceeds unadjusted {w_u}");
    }

    // The general limiting-variance phi collapses to its null form when both
    // arms share a coefficient vector (1e-12 on random inputs).
    for _ in 0..100 {
        let p = rng.random_range(1..=4);
        let beta = DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5);
        let m = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        let sigma = &m * m.transpose() + DMatrix::identity(p, p) * 0.05;
        let pi_j = rng.random_range(0.05..0.45);
        let pi_k = rng.random_range(0.05..0.45);
        let general = inference::phi_general(&beta, &beta, &sigma, pi_j, pi_k);
        let pi_rest = 1.0 - pi_j - pi_k;
        let design = DesignSpec::new(vec![pi_j, pi_k, pi_rest], (1, 2)).unwrap();
        let null_form = inference::phi_under_null(&beta, &sigma, &design);
        assert!(
            (general - null_form).abs() < 1e-12,
            "phi mismatch: general {general}, null form {null_form}"
        );
    }

    // With exactly two arms, pooled-mean and restricted-mean centring agree
    // (1e-12): the pair is the whole sample.
    for seed in 0..10u64 {
        let sc = Scenario {
            outcome_family: OutcomeFamily::Normal,
            effect_a: 0.1,
            rho: 0.3,
            coefficients: vec![0.3, 0.3],
            outcome_variance: None,
            n: 160,
            num_treatments: 2,
            pi: None,
            randomizer: SchemeKind::Simple,
            replications: 1,
            seed: 0x500 + seed,
        };
        let data = generate_dataset(&sc, 0).unwrap();
        let design = sc.design().unwrap();
        let pooled =
            inference::wmw_test_adjusted_with(&data, &design, &config, &options, AdjustMode::PooledMean)
                .unwrap();
        let restricted = inference::wmw_test_adjusted_with(
            &data,
            &design,
            &config,
            &options,
            AdjustMode::RestrictedMean,
        )
        .unwrap();
        assert!(
            (pooled.estimate.point - restricted.estimate.point).abs() < 1e-12,
            "pooled {} vs restricted {} at J=2",
            pooled.estimate.point,
            restricted.estimate.point
        );
    }

    // Product identity: ARE(adjusted vs t) = ARE(wmw vs t) * gain, exactly.
    for _ in 0..50 {
        let beta = DVector::from_fn(2, |_, _| 0.25 * (rng.random::<f64>() - 0.5));
        let m = DMatrix::from_fn(2, 2, |_, _| rng.random::<f64>() - 0.5);
        let sigma = &m * m.transpose() + DMatrix::identity(2, 2) * 0.05;
        let dist = DistributionSpec::Normal {
            variance: 0.5 + rng.random::<f64>(),
        };
        let report = are::dominance_check(&dist, &beta, &sigma).unwrap();
        assert_eq!(
            report.adjusted_vs_t,
            report.wmw_vs_t * report.adjusted_vs_unadjusted
        );
    }

    pass("statistic and variance identities hold at their stated tolerances");
}

#[test]
fn randomization_invariants() {
    // Per-stratum counts are exact once every block is complete: uniform
    // four-arm allocation, block size 8, 16 units per stratum -> 4 per arm.
    {
        let pi = vec![0.25; 4];
        let strata: Vec<usize> = (0..48).map(|i| i % 3).collect();
        let scheme = RandomizationScheme::stratified_block(pi.clone(), 8, 0x5eed_0009);
        let assignments = assign_stratified_block(&strata, &scheme).unwrap();
        let design = DesignSpec::new(pi, (1, 2)).unwrap();
        let report = balance_report(&assignments, &strata, &design).unwrap();
        for (stratum, counts) in &report.stratum_counts {
            assert_eq!(counts, &vec![4usize; 4], "stratum {stratum} counts {counts:?}");
        }
        assert_eq!(report.max_deviation, 0.0);
    }

    // Marginal frequencies of every scheme sit inside 3-sigma binomial bands
    // over 10^4 units.
    {
        let n = 10_000usize;
        let pi = vec![0.2, 0.3, 0.1, 0.4];
        let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_000a);
        let strata: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let levels: Vec<Vec<usize>> = strata.iter().map(|&z| vec![z]).collect();

        let runs: Vec<(&str, Vec<usize>)> = vec![
            (
                "simple",
                assign_simple(n, &RandomizationScheme::simple(pi.clone(), 11)).unwrap(),
            ),
            (
                "stratified block",
                assign_stratified_block(
                    &strata,
                    &RandomizationScheme::stratified_block(pi.clone(), 10, 12),
                )
                .unwrap(),
            ),
            (
                "minimization",
                assign_minimization(
                    &levels,
                    &RandomizationScheme::minimization(pi.clone(), 0.75, 13),
                )
                .unwrap(),
            ),
        ];
        for (name, assignments) in &runs {
            for (arm, &p) in pi.iter().enumerate() {
                let count = assignments.iter().filter(|&&a| a == arm + 1).count() as f64;
                let mean = n as f64 * p;
                let band = 3.0 * (n as f64 * p * (1.0 - p)).sqrt();
                assert!(
                    (count - mean).abs() <= band,
                    "{name}: arm {} count {count} outside {mean} +/- {band}",
                    arm + 1
                );
            }
        }
    }

    // Minimization balances strictly better than simple randomization on
    // paired streams sharing the same seed and stratum sequence.
    {
        let pi = vec![0.25; 4];
        let design = DesignSpec::new(pi.clone(), (1, 2)).unwrap();
        for trial in 0..10u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_000b + trial);
            let n = 1_000;
            let strata: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let levels: Vec<Vec<usize>> = strata.iter().map(|&z| vec![z]).collect();
            let seed = 0x7000 + trial;
            let simple = assign_simple(n, &RandomizationScheme::simple(pi.clone(), seed)).unwrap();
            let minim = assign_minimization(
                &levels,
                &RandomizationScheme::minimization(pi.clone(), 0.75, seed),
            )
            .unwrap();
            let dev_simple = balance_report(&simple, &strata, &design).unwrap().max_deviation;
            let dev_minim = balance_report(&minim, &strata, &design).unwrap().max_deviation;
            assert!(
                dev_minim < dev_simple,
                "trial {trial}: minimization deviation {dev_minim} not below simple {dev_simple}"
            );
        }
    }

    // Bit-identical results under a fixed seed, for any worker count.
    {
        let sc = scenario(
            OutcomeFamily::Normal,
            0.2,
            120,
            SchemeKind::StratifiedBlock { block_size: 8 },
            60,
            0x5eed_000c,
        );
        let sequential = run_study_with(&sc, Some(0.5), Parallelism::Sequential).unwrap();
        let repeat = run_study_with(&sc, Some(0.5), Parallelism::Sequential).unwrap();
        assert_eq!(sequential, repeat, "sequential results differ across runs");
        #[cfg(feature = "parallel")]
        for threads in [1usize, 2, 3, 7] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let parallel =
                pool.install(|| run_study_with(&sc, Some(0.5), Parallelism::Parallel).unwrap());
            assert_eq!(sequential, parallel, "results differ with {threads} worker(s)");
        }

        let scheme = RandomizationScheme::minimization(vec![0.25; 4], 0.75, 99);
        let levels: Vec<Vec<usize>> = (0..500).map(|i| vec![i % 4]).collect();
        assert_eq!(
            assign_minimization(&levels, &scheme).unwrap(),
            assign_minimization(&levels, &scheme).unwrap()
        );
    }

    pass("randomization invariants: exact blocks, 3-sigma bands, balance, determinism");
}

#[test]
fn truth_oracle_null_consistency() {
    for family in [OutcomeFamily::Normal, OutcomeFamily::DoubleExponential] {
        let sc = scenario(family, 0.0, 100, SchemeKind::Simple, 1, 1);
        let theta = theta_truth_oracle(&sc, ORACLE_DRAWS);
        assert!(
            (theta - 0.5).abs() <= 0.0005,
            "{family:?}: null oracle returned {theta}, expected 0.5 +/- 0.0005"
        );
    }
    pass("truth oracle returns 1/2 +/- 5e-4 under the null for both families");
}
