//! Scratch probe: trains two surrogate configs and prints the in-box
//! held-out error profile for each.

use fmbrdf::surrogate::{generate_training_set, BodySurrogate, TrainOptions, BODY_BOX};
use std::time::Instant;

fn profile(sur: &BodySurrogate, label: &str) {
    let set = generate_training_set(sur.n_samples, sur.rule_res, sur.seed).unwrap();
    let serving = |inputs: &[f64; 7]| {
        inputs
            .iter()
            .zip(&BODY_BOX)
            .all(|(&v, &(lo, hi))| v >= lo && v <= hi)
    };
    let mut errs: Vec<(f64, f64, [f64; 7])> = Vec::new();
    for (i, s) in set.samples.iter().enumerate() {
        if i % 10 != 9 || !serving(&s.inputs) {
            continue;
        }
        let exact_s0 = s.ln_s0_raw.exp() / ((1.0 + s.lambda_l) * (1.0 + s.lambda_v));
        let exact_dolp = (s.q1 * s.q1 + s.q2 * s.q2).sqrt();
        let out = sur.infer(&s.inputs).unwrap();
        let rel = (out.s0_unit / exact_s0 - 1.0).abs();
        let dd = ((out.q1 * out.q1 + out.q2 * out.q2).sqrt() - exact_dolp).abs();
        errs.push((rel, dd, s.inputs));
    }
    errs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = errs.len();
    println!("[{label}] in-box held-out: {n}");
    let q = |p: f64| errs[((1.0 - p) * n as f64) as usize].0;
    println!(
        "[{label}] rel s0 quantiles: p50 {:.4}  p90 {:.4}  p99 {:.4}  max {:.4}",
        q(0.50),
        q(0.90),
        q(0.99),
        errs[0].0
    );
    println!("[{label}] top 8 by rel s0:  [tL tV dphi alpha beta kappa mu]");
    for (rel, dd, inp) in errs.iter().take(8) {
        println!(
            "  rel {:.4} dolp {:.4}  [{:.3} {:.3} {:.3} {:.3} {:.2} {:.2} {:.2}]",
            rel, dd, inp[0], inp[1], inp[2], inp[3], inp[4], inp[5], inp[6]
        );
    }
    errs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!(
        "[{label}] worst dolp {:.4} (rel {:.4})",
        errs[0].1, errs[0].0
    );
}

fn main() {
    // The reduced configuration first: small set, coarse oracle.
    let reduced = TrainOptions {
        n_samples: 10_000,
        rule: (16, 32),
        ..TrainOptions::default()
    };
    let t0 = Instant::now();
    let sur = BodySurrogate::train(&reduced).unwrap();
    println!(
        "[reduced] train {}s  metrics: rel s0 {:.5}  dolp {:.5}  smith {:.5}",
        t0.elapsed().as_secs(),
        sur.metrics.max_rel_s0,
        sur.metrics.max_abs_dolp,
        sur.metrics.max_smith_ln
    );
    sur.save("/tmp/sur10.bin".as_ref()).unwrap();
    profile(&sur, "reduced");

    // The upgraded default candidate: more data, wider first layers,
    // longer schedule.
    let full = TrainOptions {
        n_samples: 60_000,
        body_hidden: vec![160, 96, 64, 64],
        body_epochs: 2000,
        ..TrainOptions::default()
    };
    let t0 = Instant::now();
    let sur = BodySurrogate::train(&full).unwrap();
    println!(
        "[full] train {}s  metrics: rel s0 {:.5}  dolp {:.5}  smith {:.5}",
        t0.elapsed().as_secs(),
        sur.metrics.max_rel_s0,
        sur.metrics.max_abs_dolp,
        sur.metrics.max_smith_ln
    );
    sur.save("/tmp/sur60.bin".as_ref()).unwrap();
    profile(&sur, "full");
}
