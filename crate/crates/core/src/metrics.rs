//! L¹ error metrics, evaluation grids and the sample-count scaling study.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::energy::{BoxDomain, ProblemSpec, ScalarField, TrialFunction};
use crate::error::{Error, Result};
use crate::nnet::Network;
use crate::optim::{train, TrainConfig};

/// Node spacing of the default 1D evaluation grid.
pub const GRID_SPACING_1D: f64 = 1e-3;
/// Nodes per axis of the default 2D evaluation grid.
pub const GRID_NODES_2D: usize = 256;

/// Tensor-product grid of evaluation nodes including the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    points: Array2<f64>,
    shape: Vec<usize>,
}

impl EvalGrid {
    /// `nodes[k]` equispaced nodes along axis `k` of `domain`, row-major with
    /// the last axis fastest.
    pub fn uniform(domain: &BoxDomain, nodes: &[usize]) -> Result<Self> {
        if nodes.len() != domain.dim() {
            return Err(Error::Structure("one node count per axis is required".into()));
        }
        if nodes.iter().any(|&n| n < 2) {
            return Err(Error::Config("evaluation grids need at least two nodes per axis".into()));
        }
        let total: usize = nodes.iter().product();
        let dim = domain.dim();
        let mut points = Array2::zeros((total, dim));
        for idx in 0..total {
            let mut rem = idx;
            for k in (0..dim).rev() {
                let i = rem % nodes[k];
                rem /= nodes[k];
                let t = i as f64 / (nodes[k] - 1) as f64;
                points[[idx, k]] = domain.lower()[k] + t * domain.extent(k);
            }
        }
        Ok(EvalGrid { points, shape: nodes.to_vec() })
    }

    /// Spacing 1e−3 in 1D (scaled to the interval length), 256×256 in 2D.
    pub fn default_for(domain: &BoxDomain) -> Self {
        let nodes: Vec<usize> = match domain.dim() {
            1 => vec![(domain.extent(0) / GRID_SPACING_1D).round() as usize + 1],
            d => vec![GRID_NODES_2D; d],
        };
        EvalGrid::uniform(domain, &nodes).expect("default grid is valid")
    }

    pub fn points(&self) -> ndarray::ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub l1: f64,
    pub relative: f64,
    pub resolution: Vec<usize>,
    pub sample_count: Option<usize>,
}

impl ErrorReport {
    pub fn to_csv(&self) -> String {
        let res: Vec<String> = self.resolution.iter().map(|n| n.to_string()).collect();
        let samples = self.sample_count.map(|n| n.to_string()).unwrap_or_default();
        format!("l1,relative,resolution,sample_count\n{:e},{:e},{},{}\n", self.l1, self.relative, res.join("x"), samples)
    }
}

/// Mean absolute difference and that mean divided by the mean of `|exact|`.
///
/// When the exact field vanishes on every node the relative error is 0 for a
/// perfect match and infinite otherwise.
pub fn l1_error_values(pred: &[f64], exact: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != exact.len() {
        return Err(Error::Structure(format!("{} predictions for {} exact values", pred.len(), exact.len())));
    }
    if pred.is_empty() {
        return Err(Error::Config("empty evaluation grid".into()));
    }
    let n = pred.len() as f64;
    let l1 = pred.iter().zip(exact).map(|(p, e)| (p - e).abs()).sum::<f64>() / n;
    let scale = exact.iter().map(|e| e.abs()).sum::<f64>() / n;
    if !l1.is_finite() {
        return Err(Error::NonFinite("L1 error".into()));
    }
    let relative = if scale > 0.0 {
        l1 / scale
    } else if l1 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok((l1, relative))
}

/// L¹ error of `pred` against `exact` over the nodes of `grid`.
pub fn l1_error(pred: &dyn TrialFunction, exact: &ScalarField, grid: &EvalGrid) -> Result<ErrorReport> {
    if grid.is_empty() {
        return Err(Error::Config("empty evaluation grid".into()));
    }
    let p = pred.evaluate(grid.points(), false)?.values;
    let e: Vec<f64> = grid.points().rows().into_iter().map(|r| exact(&r.to_vec())).collect();
    let (l1, relative) = l1_error_values(p.as_slice().expect("contiguous"), &e)?;
    Ok(ErrorReport { l1, relative, resolution: grid.shape().to_vec(), sample_count: None })
}

/// Largest absolute difference between two nodal vectors.
pub fn max_error(pred: &[f64], exact: &[f64]) -> f64 {
    pred.iter().zip(exact).map(|(p, e)| (p - e).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares for `y = slope·x + intercept`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("least squares needs at least two paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok(LinearFit { slope, intercept: my - slope * mx })
}

/// Slope of `log(error)` against `log(n)`.
pub fn loglog_slope(ns: &[f64], errors: &[f64]) -> Result<LinearFit> {
    if ns.iter().chain(errors).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Config("log-log fit needs positive finite data".into()));
    }
    let lx: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    least_squares(&lx, &ly)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub samples: usize,
    pub seed: u64,
    /// `None` when the run failed or aborted.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingStudy {
    pub rows: Vec<ScalingRow>,
    /// Seed-averaged relative error per sample count (successful runs only).
    pub means: Vec<(usize, f64)>,
    pub fit: Option<LinearFit>,
    /// Some run failed; the table is partial.
    pub partial: bool,
}

impl ScalingStudy {
    /// Long-format table `samples,seed,relative_error` (empty error on failure).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("samples,seed,relative_error\n");
        for r in &self.rows {
            let e = r.relative.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.samples, r.seed, e);
        }
        out
    }
}

fn check_span(sample_counts: &[usize]) -> Result<()> {
    let distinct = {
        let mut v = sample_counts.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if distinct.len() < 4 || distinct[0] == 0 {
        return Err(Error::Config("scaling study needs at least four positive sample counts".into()));
    }
    let span = (distinct[distinct.len() - 1] as f64 / distinct[0] as f64).log10();
    if span < 1.5 {
        return Err(Error::Config(format!("sample counts span {span:.2} decades, at least 1.5 required")));
    }
    Ok(())
}

/// Trains one network per (sample count, seed), with the sample count as the
/// interior point count, and fits the log-log slope of the seed-averaged
/// relative L¹ errors.
pub fn scaling_study(
    spec: &ProblemSpec,
    layer_sizes: &[usize],
    base: &TrainConfig,
    sample_counts: &[usize],
    seeds: &[u64],
) -> Result<ScalingStudy> {
    check_span(sample_counts)?;
    if seeds.is_empty() {
        return Err(Error::Config("scaling study needs at least one seed".into()));
    }
    if spec.exact.is_none() {
        return Err(Error::Spec(format!("problem {} has no exact solution", spec.name)));
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    let mut partial = false;
    for &n in sample_counts {
        let mut ok = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { interior_batch: n, seed, eval_every: 0, checkpoint_dir: None, ..base.clone() };
            let domain = &spec.domain;
            let run = Network::init_for_domain(seed, layer_sizes, true, domain.lower(), domain.upper()).and_then(|mut net| train(&mut net, spec, &cfg));
            let relative = match run {
                Ok(rep) if rep.aborted.is_none() => rep.final_relative_error(),
                _ => None,
            };
            match relative {
                Some(r) => ok.push(r),
                None => partial = true,
            }
            rows.push(ScalingRow { samples: n, seed, relative });
        }
        if !ok.is_empty() {
            means.push((n, ok.iter().sum::<f64>() / ok.len() as f64));
        }
    }
    let fit = if means.len() >= 2 {
        let (ns, es): (Vec<f64>, Vec<f64>) = means.iter().map(|&(n, e)| (n as f64, e)).unzip();
        loglog_slope(&ns, &es).ok()
    } else {
        None
    };
    Ok(ScalingStudy { rows, means, fit, partial })
}
