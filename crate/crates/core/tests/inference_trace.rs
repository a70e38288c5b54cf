//! Replays a recorded filter trace through `infer_step`.
//!
//! `tests/data/kalman_trace.csv` holds per-step inputs and the expected
//! posterior computed by the gain-form oracle in `common`. Regenerate with
//! `cargo test -p aif-loop --test inference_trace -- --ignored`.

mod common;

use std::fmt::Write as _;
use std::path::PathBuf;

use aif_loop::gaussian::Gaussian;
use aif_loop::inference::{infer_step, Belief};
use aif_loop::model::DynamicsModel;
use common::{gain_form_update, observation, random_spd};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 60;
const DT: f64 = 0.1;
const SIGMA_W: f64 = 0.02;

fn trace_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/kalman_trace.csv")
}

fn initial() -> Belief {
    let mean = DVector::from_vec(vec![-3.0, 1.5, 0.8, -0.1]);
    let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.1, 0.1]));
    Belief::new(Gaussian::new(mean, cov).unwrap(), 0).unwrap()
}

fn header() -> String {
    let mut cols: Vec<String> = ["step", "u_x", "u_y", "y_x", "y_y", "sigma_xx", "sigma_xy", "sigma_yy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..4).map(|i| format!("mean_{i}")));
    cols.extend((0..16).map(|i| format!("cov_{}{}", i / 4, i % 4)));
    cols.join(",")
}

#[test]
#[ignore = "rewrites the golden trace"]
fn regenerate_trace() {
    let dynamics = DynamicsModel::new(DT, SIGMA_W).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let start = initial();
    let (mut mean, mut cov) = (start.mean().clone(), start.cov().clone());
    let mut out = header();
    out.push('\n');
    for step in 1..=STEPS {
        let u = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        let pred_mean = &dynamics.a * &mean + &dynamics.b * &u;
        let pred_cov = &dynamics.a * &cov * dynamics.a.transpose() + &dynamics.q;
        let y = DVector::from_fn(2, |i, _| pred_mean[i] + rng.random_range(-0.4..0.4));
        let sigma = random_spd(2, 0.3, &mut rng);
        (mean, cov) = gain_form_update(&pred_mean, &pred_cov, &y, &sigma);

        write!(out, "{step}").unwrap();
        let inputs = [u[0], u[1], y[0], y[1], sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 1)]];
        for v in inputs.iter().chain(mean.iter()).chain(cov.transpose().iter()) {
            write!(out, ",{v:.17e}").unwrap();
        }
        out.push('\n');
    }
    std::fs::create_dir_all(trace_path().parent().unwrap()).unwrap();
    std::fs::write(trace_path(), out).unwrap();
}

#[test]
fn infer_step_reproduces_recorded_trace() {
    let dynamics = DynamicsModel::new(DT, SIGMA_W).unwrap();
    let mut reader = csv::Reader::from_path(trace_path()).expect("golden trace present");
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>().join(","), header());
    let mut belief = initial();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.unwrap();
        let v: Vec<f64> = record.iter().skip(1).map(|s| s.parse().unwrap()).collect();
        let u = DVector::from_column_slice(&v[0..2]);
        let y = DVector::from_column_slice(&v[2..4]);
        let sigma = DMatrix::from_row_slice(2, 2, &[v[4], v[5], v[5], v[6]]);
        let expected_mean = DVector::from_column_slice(&v[7..11]);
        let expected_cov = DMatrix::from_row_slice(4, 4, &v[11..27]);

        belief = infer_step(&belief, &u, &observation(y, sigma), &dynamics).unwrap();
        rows += 1;
        assert_eq!(belief.step, rows);
        let dm = (belief.mean() - &expected_mean).amax();
        let dp = (belief.cov() - &expected_cov).amax();
        assert!(dm < 1e-8 && dp < 1e-8, "step {rows}: |Δm| = {dm:e}, |ΔP| = {dp:e}");
    }
    assert_eq!(rows, STEPS);
}
