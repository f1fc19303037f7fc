//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line to stderr (uncaptured) before asserting.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{dmatrix, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use podec::care::{care_residual, solve_care, PlantSpec};
use podec::decomposition::{
    best_decomposition_exhaustive, best_decomposition_exhaustive_with, count_decompositions, Decomposition,
    ExhaustiveConfig, LqrEvaluator,
};
use podec::error::Error;
use podec::experiments::{run_pipeline, run_table1, PipelineConfig, Table1Config};
use podec::ga::{ga_search_with, GAConfig};
use podec::linalg::orthonormal_complement;
use podec::representation::{
    l1_objective, max_offdiag, regularized_orthogonal_basis, sparse_svd_map, transform_plant, StiefelL1Config,
};
use podec::tabular::{compose_and_rollout, linearize, policy_iteration, DpConfig, RolloutConfig, Subsystem};
use podec::zoo::{double_integrator, intro_plant, sample, SampleConfig, Strategy};

/// Writes the criterion line past the test harness's output capture.
fn report(id: usize, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("AC{id:<2} {verdict} {name} ({:.1}s): {detail}\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

#[test]
fn ac01_care_correctness() {
    let t = Instant::now();
    let di = PlantSpec::new(dmatrix![0.0, 1.0; 0.0, 0.0], dmatrix![0.0; 1.0], DMatrix::identity(2, 2), dmatrix![1.0])
        .unwrap();
    let (v, _) = solve_care(&di).unwrap();
    let s3 = 3f64.sqrt();
    let analytic_err = max_abs(&(&v.p - dmatrix![s3, 1.0; 1.0, s3]));

    let mut worst: f64 = 0.0;
    let mut solved = 0;
    let sizes = [(1, 2), (2, 2), (2, 3), (2, 4), (3, 3), (3, 5), (4, 4), (2, 6), (4, 6), (3, 4)];
    for k in 0..200u64 {
        let (m, n) = sizes[k as usize % sizes.len()];
        let strategy = if k % 2 == 0 { Strategy::I } else { Strategy::II };
        let (m, n) = if strategy == Strategy::II { (m.min(n), m.min(n)) } else { (m, n) };
        let p = sample(&SampleConfig::new(strategy, m, n, 10_000 + k)).unwrap().plant;
        let (v, _) = solve_care(&p).unwrap();
        let res = care_residual(&p.discounted_a(), &p.b, &p.q, &p.r, &v.p);
        worst = worst.max(max_abs(&res));
        solved += 1;
    }
    let elapsed = t.elapsed();
    let pass = analytic_err <= 1e-10 && worst <= 1e-8 && solved == 200 && elapsed < Duration::from_secs(10);
    report(
        1,
        "CARE correctness",
        pass,
        elapsed,
        &format!("analytic error {analytic_err:.2e}, worst residual {worst:.2e} over {solved} plants"),
    );
    assert!(pass);
}

#[test]
fn ac02_diagonalization() {
    let t = Instant::now();
    let cfg = StiefelL1Config::default();
    let mut worst = [0.0_f64; 3];
    let mut mislabeled = 0;
    for k in 0..100u64 {
        let cases = [
            (SampleConfig::new(Strategy::I, 2, 4, 20_000 + k), "unique"),
            (SampleConfig { zero_sv_count: 2, ..SampleConfig::new(Strategy::II, 3, 3, 30_000 + k) }, "zero"),
            (SampleConfig::new(Strategy::II, 3, 3, 40_000 + k), "repeated"),
        ];
        for (i, (sc, label)) in cases.iter().enumerate() {
            let plant = sample(sc).unwrap().plant;
            let (_, gain) = solve_care(&plant).unwrap();
            let map = sparse_svd_map(&plant, &cfg).unwrap();
            if map.classification.as_ref().unwrap().case_label() != *label {
                mislabeled += 1;
            }
            worst[i] = worst[i].max(max_offdiag(&map.mapped_gain(&gain).unwrap()));
        }
    }
    let elapsed = t.elapsed();
    let pass = worst.iter().all(|&w| w <= 1e-6) && mislabeled == 0 && elapsed < Duration::from_secs(60);
    report(
        2,
        "diagonalization",
        pass,
        elapsed,
        &format!(
            "max offdiag unique {:.2e}, zero {:.2e}, repeated {:.2e}; {mislabeled} misclassified",
            worst[0], worst[1], worst[2]
        ),
    );
    assert!(pass);
}

#[test]
fn ac03_orthogonality_constrained_l1() {
    let t = Instant::now();
    let cfg = StiefelL1Config::default();
    let mut worst_orth: f64 = 0.0;
    let mut increases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut runs = 0;
    for n in 2..=6 {
        for k in 0..n {
            for _ in 0..4 {
                let raw = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
                let fixed = raw.qr().q().columns(0, k).into_owned();
                let out = regularized_orthogonal_basis(&fixed, n - k, &cfg).unwrap();
                let x = &out.x;
                worst_orth = worst_orth.max(max_abs(&(x.transpose() * x - DMatrix::identity(n - k, n - k))));
                let init = orthonormal_complement(&fixed, n).unwrap();
                let init_obj = l1_objective(&init, &fixed, cfg.lambda_orth);
                if out.objective > init_obj + 1e-12 || out.objective > out.initial_objective + 1e-12 {
                    increases += 1;
                }
                runs += 1;
            }
        }
    }
    let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
    let out = regularized_orthogonal_basis(&e1, 2, &cfg).unwrap();
    let col_err = (0..2).map(|j| (out.x.column(j).abs().sum() - 1.0).abs()).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = worst_orth <= 1e-8 && increases == 0 && col_err <= 1e-4 && elapsed < Duration::from_secs(30);
    report(
        3,
        "orthogonality-constrained L1",
        pass,
        elapsed,
        &format!("{runs} runs, orthonormality {worst_orth:.2e}, {increases} objective increases, e1 column L1 error {col_err:.2e}"),
    );
    assert!(pass);
}

#[test]
fn ac04_intro_example() {
    let t = Instant::now();
    let plant = intro_plant();
    let (_, orig) = best_decomposition_exhaustive(&plant, 2).unwrap();
    let map = sparse_svd_map(&plant, &StiefelL1Config::default()).unwrap();
    let (_, mapped) = best_decomposition_exhaustive(&transform_plant(&plant, &map).unwrap(), 2).unwrap();
    let elapsed = t.elapsed();
    let pass = orig.err_lqr > 0.01 && mapped.err_lqr.abs() <= 1e-9 && elapsed < Duration::from_secs(5);
    report(
        4,
        "intro example",
        pass,
        elapsed,
        &format!("original best {:.4e}, transformed best {:.2e}", orig.err_lqr, mapped.err_lqr),
    );
    assert!(pass);
}

#[test]
fn ac05_table1_desk_scale() {
    let t = Instant::now();
    let rec = run_table1(&Table1Config::default()).unwrap();
    let elapsed = t.elapsed();
    let mut pass = elapsed < Duration::from_secs(15 * 60);
    let mut detail = Vec::new();
    for c in &rec.cells {
        pass &= c.completed > 0 && c.svd.fraction >= 0.80 && c.balanced.fraction < c.svd.fraction;
        detail.push(format!(
            "{} svd {}/{} balanced {}/{}",
            c.cell, c.svd.successes, c.svd.trials, c.balanced.successes, c.balanced.trials
        ));
    }
    report(5, "representation comparison", pass, elapsed, &detail.join("; "));
    assert!(pass);
}

#[test]
fn ac06_inverse_lqr_round_trip() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let (mut count, mut redraws) = (0, 0);
    for n in [2, 3, 4] {
        for seed in 0..100u64 {
            let s = sample(&SampleConfig::new(Strategy::II, n, n, 50_000 + seed)).unwrap();
            let (_, gain) = solve_care(&s.plant).unwrap();
            // the sampler redraws on a failed round trip; count those as failures here
            redraws += s.retries;
            let expected = s.k_star_expected.unwrap();
            worst = worst.max(max_abs(&(gain - expected)));
            count += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = worst <= 1e-8 && count == 300 && redraws == 0 && elapsed < Duration::from_secs(60);
    report(
        6,
        "inverse-LQR round trip",
        pass,
        elapsed,
        &format!("worst gain error {worst:.2e} over {count} plants, {redraws} redraws"),
    );
    assert!(pass);
}

#[test]
fn ac07_policy_iteration_vs_lqr() {
    let t = Instant::now();
    let sys = double_integrator();
    let (v, _) = solve_care(&linearize(&sys).unwrap()).unwrap();
    let cfg = DpConfig { grid_points: 81, action_levels: 41, ..Default::default() };
    let policy = policy_iteration(&sys, &Subsystem { states: vec![0, 1], inputs: vec![0] }, &[], &cfg).unwrap();
    // Starts on a ring at half the box: near the goal the action lattice
    // spacing dominates any relative comparison.
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let a = std::f64::consts::TAU * k as f64 / 20.0;
        let x0 = [0.5 * a.cos(), 0.5 * a.sin()];
        let r = compose_and_rollout(&sys, std::slice::from_ref(&policy), &x0, &RolloutConfig::default()).unwrap();
        let lqr = v.eval(&nalgebra::DVector::from_column_slice(&x0));
        worst = worst.max(((r.cost - lqr) / lqr).abs());
    }
    let elapsed = t.elapsed();
    let pass = worst <= 0.05 && elapsed < Duration::from_secs(120);
    report(7, "policy iteration vs LQR", pass, elapsed, &format!("worst relative cost gap {worst:.4} over 20 starts"));
    assert!(pass);
}

#[test]
fn ac08_quadrotor_representations() {
    let t = Instant::now();
    let per_motor = Decomposition::decoupled(vec![(vec![0], vec![0, 2]), (vec![1], vec![1, 3])]);
    let cfg = PipelineConfig {
        system: "planar_quadrotor".into(),
        original_decomposition: Some(per_motor),
        ..Default::default()
    };
    let rep = run_pipeline(&cfg).unwrap();
    let elapsed = t.elapsed();
    let mean = rep.normalized_error_all.mean;
    let pass = rep.original.converged == 0
        && rep.transformed.converged >= 18
        && mean >= 0.0
        && elapsed < Duration::from_secs(600);
    report(
        8,
        "quadrotor representations",
        pass,
        elapsed,
        &format!(
            "per-motor {}/20, transformed {}/20 ({}), mean normalized error {mean:.4}",
            rep.original.converged,
            rep.transformed.converged,
            rep.transformed.choice.decomposition.label()
        ),
    );
    assert!(pass);
}

#[test]
fn ac09_ga_soundness() {
    let t = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for (m, n) in [(2, 2), (2, 3), (2, 4), (3, 3), (3, 4)] {
        assert!(count_decompositions(m, n, m.min(n)) <= 100_000);
        let mut matched = 0;
        for seed in 0..20u64 {
            let plant = sample(&SampleConfig::new(Strategy::I, m, n, 60_000 + seed)).unwrap().plant;
            let ev = LqrEvaluator::new(&plant).unwrap();
            let best = match best_decomposition_exhaustive_with(&ev, &ExhaustiveConfig::default()) {
                Ok((_, e)) => e.err_lqr,
                Err(Error::AllUnstable) => f64::INFINITY,
                Err(e) => panic!("{e}"),
            };
            let ga = ga_search_with(&ev, &GAConfig { seed, ..Default::default() }).unwrap();
            let found = ga.best().map_or(f64::INFINITY, |b| b.evaluation.err_lqr);
            if (found.is_infinite() && best.is_infinite()) || found <= 1.05 * best + 1e-12 {
                matched += 1;
            }
        }
        pass &= matched >= 18;
        detail.push(format!("({m},{n}) {matched}/20"));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    report(9, "GA soundness", pass, elapsed, &detail.join(", "));
    assert!(pass);
}

fn run_cli(args: &[&str], out: &Path, jobs: &str) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_podec"))
        .args(args)
        .args(["--seed", "5", "--jobs", jobs, "--out"])
        .arg(out)
        .status()
        .expect("binary runs");
    assert!(status.success(), "{args:?} failed");
    std::fs::read(out.join("rows.csv")).expect("rows.csv written")
}

#[test]
fn ac10_cli_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.toml");
    std::fs::write(&small, "starts = 4\n[dp]\ngrid_points = 31\naction_levels = 11\n").unwrap();
    let small = small.to_str().unwrap();
    let table = dir.path().join("table.toml");
    std::fs::write(&table, "samples = 3\n").unwrap();
    let table = table.to_str().unwrap();
    let policies = dir.path().join("pi_a");
    let policies = policies.to_str().unwrap().to_string();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("table1", vec!["table1", "--config", table]),
        ("pipeline", vec!["pipeline", "--system", "intro", "--config", small]),
        ("sample", vec!["sample", "--strategy", "II", "--m", "3", "--n", "3"]),
        ("transform", vec!["transform", "--m", "3", "--n", "5"]),
        ("enumerate", vec!["enumerate", "--m", "2", "--n", "4"]),
        ("ga", vec!["ga", "--m", "3", "--n", "4"]),
        ("pi", vec!["pi", "--system", "planar_quadrotor", "--config", small]),
        ("rollout", vec!["rollout", "--system", "planar_quadrotor", "--config", small, "--policies", &policies]),
    ];
    let mut differing = Vec::new();
    for (name, args) in &commands {
        let a = run_cli(args, &dir.path().join(format!("{name}_a")), "1");
        let b = run_cli(args, &dir.path().join(format!("{name}_b")), "4");
        if a != b || a.is_empty() {
            differing.push(*name);
        }
    }
    let elapsed = t.elapsed();
    let pass = differing.is_empty();
    report(
        10,
        "CLI determinism",
        pass,
        elapsed,
        &format!("{} subcommands re-run; differing rows.csv: {differing:?}", commands.len()),
    );
    assert!(pass);
}
