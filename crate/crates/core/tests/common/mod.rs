//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use deep_obstacle::energy::{total_loss, total_loss_and_gradient, BoxDomain, ProblemSpec, SampleBatch};
use deep_obstacle::nnet::Network;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small randomized network, problem and batch for derivative checks.
pub struct GradCase {
    pub net: Network,
    pub spec: ProblemSpec,
    pub batch: SampleBatch,
}

pub fn random_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=2usize);
    let depth = rng.gen_range(1..=3usize);
    let mut sizes = vec![d];
    for _ in 0..depth {
        sizes.push(rng.gen_range(2..=6));
    }
    sizes.push(1);
    let mut net = Network::init(seed, &sizes, rng.gen_bool(0.7)).unwrap();
    for p in net.params_mut() {
        *p += rng.gen_range(-0.2..0.2);
    }
    let (amp, k, phase) = (rng.gen_range(0.2..2.0), rng.gen_range(1.0..6.0), rng.gen_range(0.0..6.0));
    let (src, hb) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
    let drift = rng.gen_bool(0.5).then(|| {
        let c: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = c[j] * (1.0 + x[0]).sin();
            }
        }) as deep_obstacle::energy::VectorField
    });
    let spec = ProblemSpec {
        name: format!("random-{seed}"),
        domain: BoxDomain::unit(d),
        p: rng.gen_range(2.0..4.5),
        obstacle: Arc::new(move |x: &[f64]| amp * (k * x[0] + phase).sin()),
        source: Arc::new(move |x: &[f64]| src * (2.0 * x.iter().sum::<f64>()).cos()),
        boundary: Arc::new(move |x: &[f64]| hb + 0.5 * x[0]),
        drift,
        alpha: rng.gen_range(1.0..100.0),
        beta: rng.gen_range(1.0..100.0),
        exact: None,
    };
    let batch = SampleBatch::draw(&spec.domain, rng.gen_range(3..12), 4, seed, 0).unwrap();
    GradCase { net, spec, batch }
}

/// Norm-wise error of the parameter gradient of the total loss against
/// central differences, relative to `max(‖fd‖, 1)` so that vanishing
/// gradients are not judged on difference-quotient roundoff.
pub fn param_gradient_error(case: &mut GradCase, h: f64) -> f64 {
    let (_, g) = total_loss_and_gradient(&case.net, &case.spec, &case.batch).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for q in 0..case.net.num_params() {
        let orig = case.net.params()[q];
        case.net.params_mut()[q] = orig + h;
        let lp = total_loss(&case.net, &case.spec, &case.batch).unwrap().total;
        case.net.params_mut()[q] = orig - h;
        let lm = total_loss(&case.net, &case.spec, &case.batch).unwrap().total;
        case.net.params_mut()[q] = orig;
        let fd = (lp - lm) / (2.0 * h);
        num += (g.as_slice()[q] - fd).powi(2);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt().max(1.0)
}

/// Largest norm-wise error of the network's input gradient against central
/// differences over the interior batch, relative to `max(‖fd‖, 1)`.
pub fn input_gradient_error(case: &GradCase, h: f64) -> f64 {
    let d = case.spec.dim();
    let mut worst = 0.0f64;
    for row in case.batch.interior.rows() {
        let x = row.to_vec();
        let ad = case.net.forward(&x).unwrap().input_gradient;
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (case.net.value(&xp).unwrap() - case.net.value(&xm).unwrap()) / (2.0 * h);
            num += (ad[j] - fd).powi(2);
            den += fd * fd;
        }
        worst = worst.max(num.sqrt() / den.sqrt().max(1.0));
    }
    worst
}

/// A fresh scratch directory under the system temp dir.
pub fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("deep-obstacle-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
