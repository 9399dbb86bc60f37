//! Adam, the three-plateau learning-rate schedule, the training loop and
//! bedrock-style pretraining.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{total_loss_and_gradient, BoxDomain, LossBreakdown, ProblemSpec, SampleBatch, ScalarField, EVAL_CHUNK};
use crate::error::{Error, Result};
use crate::metrics::{l1_error_values, EvalGrid};
use crate::nnet::{Network, ParamGradient};

pub const DEFAULT_BASE_LR: f64 = 5e-4;
pub const DEFAULT_BREAKPOINTS: (usize, usize) = (500, 750);

/// Learning rate at iteration `iter` with the default breakpoints.
pub fn lr_at(iter: usize, base: f64) -> f64 {
    lr_with_breakpoints(iter, base, DEFAULT_BREAKPOINTS)
}

/// `base` before the first breakpoint, half of it until the second, a
/// quarter afterwards.
pub fn lr_with_breakpoints(iter: usize, base: f64, (first, second): (usize, usize)) -> f64 {
    if iter < first {
        base
    } else if iter < second {
        base * 0.5
    } else {
        base * 0.25
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        AdamState {
            first_moment: vec![0.0; net.num_params()],
            second_moment: vec![0.0; net.num_params()],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves the network
/// and the state untouched.
pub fn adam_step(net: &mut Network, grad: &ParamGradient, state: &mut AdamState, lr: f64) -> Result<()> {
    if !grad.is_congruent(net) || state.first_moment.len() != net.num_params() {
        return Err(Error::Structure("gradient/optimizer state do not match the network".into()));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let params = net.params_mut();
    for (i, &g) in grad.as_slice().iter().enumerate() {
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    Ok(())
}

/// `k` interior rows of `pool` without replacement, chosen from a stream
/// disjoint from the sampling streams; the boundary rows are kept whole.
fn subsample(pool: &SampleBatch, k: usize, seed: u64, iter: usize) -> SampleBatch {
    let mut rng = run_rng(seed, (1 << 40) + iter as u64);
    let picks = rand::seq::index::sample(&mut rng, pool.interior_len(), k);
    let mut idx = picks.into_vec();
    idx.sort_unstable();
    SampleBatch::from_points(pool.interior.select(Axis(0), &idx), pool.boundary.clone())
}

/// How collocation points are chosen across iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Fresh iid uniform points every iteration from the counter-derived stream.
    Resample,
    /// One iid batch drawn once and reused.
    Fixed,
    /// A fresh jittered grid (one uniform point per cell) every iteration.
    Stratified,
    /// Cell centers of a uniform grid, reused every iteration.
    Grid,
}

impl Sampling {
    pub fn name(self) -> &'static str {
        match self {
            Sampling::Resample => "resample",
            Sampling::Fixed => "fixed",
            Sampling::Stratified => "stratified",
            Sampling::Grid => "grid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resample" => Ok(Sampling::Resample),
            "fixed" => Ok(Sampling::Fixed),
            "stratified" => Ok(Sampling::Stratified),
            "grid" => Ok(Sampling::Grid),
            other => Err(Error::Config(format!("unknown sampling mode '{other}'"))),
        }
    }

    /// The batch used at iteration `iter`, or `None` when a reused batch applies.
    fn batch(self, domain: &BoxDomain, n: usize, m: usize, seed: u64, iter: usize) -> Result<Option<SampleBatch>> {
        match self {
            Sampling::Resample => SampleBatch::draw(domain, n, m, seed, iter as u64).map(Some),
            Sampling::Stratified => SampleBatch::draw_stratified(domain, n, m, seed, iter as u64).map(Some),
            Sampling::Fixed | Sampling::Grid => Ok(None),
        }
    }

    fn reused(self, domain: &BoxDomain, n: usize, m: usize, seed: u64) -> Result<Option<SampleBatch>> {
        match self {
            Sampling::Fixed => SampleBatch::draw(domain, n, m, seed, 0).map(Some),
            Sampling::Grid => SampleBatch::grid(domain, n, m).map(Some),
            Sampling::Resample | Sampling::Stratified => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    pub breakpoints: (usize, usize),
    pub interior_batch: usize,
    pub boundary_batch: usize,
    pub seed: u64,
    /// Fixed reduction order. Evaluation is single-threaded, so this is
    /// recorded for provenance and always honoured.
    pub deterministic: bool,
    pub sampling: Sampling,
    /// Record the L¹ error every this many iterations (0: never). The final
    /// parameters are always evaluated when an exact solution exists.
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations into `checkpoint_dir`.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// With a reused point set larger than this, each iteration trains on a
    /// random subset of this many interior points.
    pub minibatch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            base_lr: DEFAULT_BASE_LR,
            breakpoints: DEFAULT_BREAKPOINTS,
            interior_batch: 1024,
            boundary_batch: 256,
            seed: 1,
            deterministic: true,
            sampling: Sampling::Stratified,
            eval_every: 1,
            checkpoint_every: None,
            checkpoint_dir: None,
            minibatch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base learning rate {} must be > 0", self.base_lr)));
        }
        if self.interior_batch == 0 {
            return Err(Error::Config("interior batch size must be >= 1".into()));
        }
        if self.minibatch == Some(0) {
            return Err(Error::Config("minibatch size must be >= 1".into()));
        }
        if self.breakpoints.0 > self.breakpoints.1 {
            return Err(Error::Config("learning-rate breakpoints must be ordered".into()));
        }
        Ok(())
    }

    pub fn lr(&self, iter: usize) -> f64 {
        lr_with_breakpoints(iter, self.base_lr, self.breakpoints)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub l1_error: Option<f64>,
    pub relative_error: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<IterationRecord>,
    pub seed: u64,
    /// Excluded from equality-of-content comparisons; see [`TrainReport::to_csv`].
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
    /// `(l1, relative)` of the final parameters when an exact solution exists.
    pub final_error: Option<(f64, f64)>,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

impl TrainReport {
    /// CSV with columns `iteration,loss1,loss2,loss3,total,l1_error,lr`; the
    /// L¹ column is empty on iterations where it was not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss1,loss2,loss3,total,l1_error,lr\n");
        for r in &self.history {
            let l1 = r.l1_error.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{},{:e}",
                r.iteration, r.losses.loss1, r.losses.loss2, r.losses.loss3, r.losses.total, l1, r.lr
            );
        }
        out
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.history.last()
    }

    /// Relative L¹ error of the final parameters.
    pub fn final_relative_error(&self) -> Option<f64> {
        self.final_error.map(|(_, r)| r)
    }

    /// Mean total loss over iterations `[from, to)`.
    pub fn mean_total(&self, from: usize, to: usize) -> Option<f64> {
        let slice = self.history.get(from..to.min(self.history.len()))?;
        (!slice.is_empty()).then(|| slice.iter().map(|r| r.losses.total).sum::<f64>() / slice.len() as f64)
    }

    /// Same losses, errors and learning rates (ignores wall clock).
    pub fn same_content(&self, other: &TrainReport) -> bool {
        self.history == other.history
            && self.seed == other.seed
            && self.final_error == other.final_error
            && self.aborted == other.aborted
    }
}

/// Exact values on an evaluation grid, computed once per run.
struct ErrorProbe {
    grid: EvalGrid,
    exact: Vec<f64>,
}

impl ErrorProbe {
    fn new(spec: &ProblemSpec) -> Option<Self> {
        let exact_fn = spec.exact.as_ref()?;
        let grid = EvalGrid::default_for(&spec.domain);
        let exact = grid.points().rows().into_iter().map(|r| exact_fn(&r.to_vec())).collect();
        Some(ErrorProbe { grid, exact })
    }

    fn measure(&self, net: &Network) -> Result<(f64, f64)> {
        let pred = net.values(self.grid.points())?;
        l1_error_values(pred.as_slice().expect("contiguous"), &self.exact)
    }
}

/// Minimizes the penalized energy of `spec` over the parameters of `net`.
///
/// On a non-finite loss or gradient the network keeps its last finite
/// parameters and the partial report carries the reason in `aborted`.
pub fn train(net: &mut Network, spec: &ProblemSpec, config: &TrainConfig) -> Result<TrainReport> {
    spec.validate()?;
    config.validate()?;
    if net.input_dim() != spec.dim() {
        return Err(Error::Structure(format!(
            "network input dimension {} does not match the {}D problem",
            net.input_dim(),
            spec.dim()
        )));
    }
    let started = Instant::now();
    let mut state = AdamState::new(net);
    let probe = ErrorProbe::new(spec);
    let boundary = if spec.beta > 0.0 { config.boundary_batch.max(1) } else { config.boundary_batch };
    let fixed = config.sampling.reused(&spec.domain, config.interior_batch, boundary, config.seed)?;
    let mut report = TrainReport {
        history: Vec::with_capacity(config.iterations),
        seed: config.seed,
        wall_clock_secs: 0.0,
        final_checkpoint: None,
        final_error: None,
        aborted: None,
    };

    for iter in 0..config.iterations {
        let drawn = config.sampling.batch(&spec.domain, config.interior_batch, boundary, config.seed, iter)?;
        let subset = match (&fixed, config.minibatch) {
            (Some(pool), Some(k)) if drawn.is_none() && k < pool.interior_len() => {
                Some(subsample(pool, k, config.seed, iter))
            }
            _ => None,
        };
        let batch = subset.as_ref().or(drawn.as_ref()).or(fixed.as_ref()).expect("one batch source is active");
        let (losses, grad) = total_loss_and_gradient(net, spec, batch)?;
        let lr = config.lr(iter);
        if !losses.is_finite() {
            report.aborted = Some(format!("non-finite loss at iteration {iter}"));
            break;
        }
        // The recorded error belongs to the parameters the losses were measured on.
        let (l1, rel) = match &probe {
            Some(p) if config.eval_every > 0 && iter % config.eval_every == 0 => {
                let (a, r) = p.measure(net)?;
                (Some(a), Some(r))
            }
            _ => (None, None),
        };
        report.history.push(IterationRecord { iteration: iter, losses, l1_error: l1, relative_error: rel, lr });
        if let Err(e) = adam_step(net, &grad, &mut state, lr) {
            report.aborted = Some(format!("iteration {iter}: {e}"));
            break;
        }
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if every > 0 && (iter + 1) % every == 0 {
                net.save(&dir.join("checkpoint.bin"))?;
            }
        }
    }
    if let Some(p) = &probe {
        report.final_error = Some(p.measure(net)?);
    }
    if let Some(dir) = &config.checkpoint_dir {
        let path = dir.join("final.bin");
        net.save(&path)?;
        report.final_checkpoint = Some(path);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Training-batch MSE before each update.
    pub mse: Vec<f64>,
    pub aborted: Option<String>,
}

impl PretrainReport {
    pub fn final_mse(&self) -> Option<f64> {
        self.mse.last().copied()
    }
}

/// Fits `net` to `target` by mean-squared error on uniform interior batches,
/// with the same optimizer and schedule as [`train`].
pub fn pretrain(net: &mut Network, target: &ScalarField, domain: &BoxDomain, config: &TrainConfig) -> Result<PretrainReport> {
    config.validate()?;
    if net.input_dim() != domain.dim() {
        return Err(Error::Structure("network and domain dimensions differ".into()));
    }
    let mut state = AdamState::new(net);
    let mut report = PretrainReport { mse: Vec::with_capacity(config.iterations), aborted: None };
    let fixed = config.sampling.reused(domain, config.interior_batch, 0, config.seed)?;
    for iter in 0..config.iterations {
        let drawn = config.sampling.batch(domain, config.interior_batch, 0, config.seed, iter)?;
        let batch = drawn.as_ref().or(fixed.as_ref()).expect("one batch source is active");
        let (mse, grad) = mse_and_gradient(net, target, batch)?;
        if !mse.is_finite() {
            report.aborted = Some(format!("non-finite MSE at iteration {iter}"));
            break;
        }
        report.mse.push(mse);
        if let Err(e) = adam_step(net, &grad, &mut state, config.lr(iter)) {
            report.aborted = Some(format!("iteration {iter}: {e}"));
            break;
        }
    }
    Ok(report)
}

/// Mean of `(u − target)²` over the interior points and its parameter gradient.
pub fn mse_and_gradient(net: &Network, target: &ScalarField, batch: &SampleBatch) -> Result<(f64, ParamGradient)> {
    let n = batch.interior_len();
    if n == 0 {
        return Err(Error::Spec("interior batch is empty".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = ParamGradient::zeros_like(net);
    let mut sum = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let pts = batch.interior.slice(s![start..end, ..]);
        let trace = net.forward_batch(pts, false)?;
        let values = trace.values();
        let mut adj = Array1::zeros(end - start);
        for (i, row) in pts.rows().into_iter().enumerate() {
            let r = values[i] - target(&row.to_vec());
            sum += r * r;
            adj[i] = 2.0 * r * inv_n;
        }
        grad.accumulate(&net.backward(&trace, adj.view(), None)?)?;
    }
    Ok((sum * inv_n, grad))
}

/// Mean squared misfit of `net` against `target` on the given points.
pub fn mse_on(net: &Network, target: &ScalarField, batch: &SampleBatch) -> Result<f64> {
    Ok(mse_and_gradient(net, target, batch)?.0)
}

/// Deterministic RNG for callers that need one tied to a run seed.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
