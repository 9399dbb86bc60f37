//! Penalized energy loss and its Monte Carlo estimate.
//!
//! For a trial function `u` on a box `Ω`, with interior samples `X₁..X_N` and
//! boundary samples `Y₁..Y_M`:
//!
//! ```text
//! loss1 = (1/N) Σ [ (1/p)‖∇u(Xᵢ) − Ψ(Xᵢ)‖ᵖ − a(Xᵢ)·u(Xᵢ) ]
//! loss2 = (1/N) Σ [ b(Xᵢ) − u(Xᵢ) ]₊²
//! loss3 = (1/M) Σ [ u(Yⱼ) − h(Yⱼ) ]²
//! total = loss1 + α·loss2 + β·loss3
//! ```
//!
//! The `|Ω|` prefactor of the sample-mean estimator is dropped; it only
//! rescales the objective.

use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnet::{Network, ParamGradient};

/// Scalar field over points of the domain.
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Vector field; writes `dim` components into the output slice.
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Points per forward/backward chunk; bounds memory for large batches.
pub const EVAL_CHUNK: usize = 1024;

/// Axis-aligned box in one or two dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() > 2 {
            return Err(Error::Spec(format!("box bounds {lower:?} / {upper:?} must be 1D or 2D")));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && u > l)) {
            return Err(Error::Spec(format!("degenerate box {lower:?} / {upper:?}")));
        }
        Ok(BoxDomain { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        BoxDomain::new(vec![0.0; dim], vec![1.0; dim]).expect("unit box")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.extent(a)).product()
    }

    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(a, &v)| v > self.lower[a] && v < self.upper[a])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(a, &v)| v >= self.lower[a] && v <= self.upper[a])
    }

    pub fn on_boundary(&self, x: &[f64], tol: f64) -> bool {
        self.contains(x)
            && x.iter()
                .enumerate()
                .any(|(a, &v)| (v - self.lower[a]).abs() <= tol || (v - self.upper[a]).abs() <= tol)
    }

    /// `n` iid uniform points strictly inside the box.
    pub fn sample_interior<R: Rng>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        let d = self.dim();
        let mut pts = Array2::zeros((n, d));
        for mut row in pts.rows_mut() {
            for a in 0..d {
                row[a] = loop {
                    let v = self.lower[a] + self.extent(a) * rng.gen::<f64>();
                    if v > self.lower[a] && v < self.upper[a] {
                        break v;
                    }
                };
            }
        }
        pts
    }

    /// Cells per axis of a stratification with about `n` cells, shaped to
    /// the aspect ratio of the box.
    pub fn strata(&self, n: usize) -> Vec<usize> {
        match self.dim() {
            1 => vec![n.max(1)],
            _ => {
                let ratio = self.extent(0) / self.extent(1);
                let kx = ((n as f64 * ratio).sqrt().round() as usize).max(1);
                let ky = ((n as f64 / kx as f64).round() as usize).max(1);
                vec![kx, ky]
            }
        }
    }

    /// One point per cell of the [`strata`](Self::strata) partition: the
    /// cell center when `rng` is `None`, otherwise a uniform point in the cell.
    pub fn sample_stratified<R: Rng>(&self, mut rng: Option<&mut R>, n: usize) -> Array2<f64> {
        let cells = self.strata(n);
        let d = self.dim();
        let total: usize = cells.iter().product();
        let mut pts = Array2::zeros((total, d));
        for (idx, mut row) in pts.rows_mut().into_iter().enumerate() {
            let mut rem = idx;
            for a in (0..d).rev() {
                let i = rem % cells[a];
                rem /= cells[a];
                let h = self.extent(a) / cells[a] as f64;
                row[a] = loop {
                    let t = rng.as_mut().map_or(0.5, |r| r.gen::<f64>());
                    let v = self.lower[a] + (i as f64 + t) * h;
                    if v > self.lower[a] && v < self.upper[a] {
                        break v;
                    }
                };
            }
        }
        pts
    }

    fn perimeter_point(&self, t: f64) -> [f64; 2] {
        let (wx, wy) = (self.extent(0), self.extent(1));
        let (x, y) = if t < wx {
            (self.lower[0] + t, self.lower[1])
        } else if t < wx + wy {
            (self.upper[0], self.lower[1] + (t - wx))
        } else if t < 2.0 * wx + wy {
            (self.upper[0] - (t - wx - wy), self.upper[1])
        } else {
            (self.lower[0], self.upper[1] - (t - 2.0 * wx - wy))
        };
        [x.clamp(self.lower[0], self.upper[0]), y.clamp(self.lower[1], self.upper[1])]
    }

    /// Boundary counterpart of [`sample_stratified`](Self::sample_stratified):
    /// `m` equal arc-length cells in 2D, the two endpoints in 1D.
    pub fn sample_boundary_stratified<R: Rng>(&self, mut rng: Option<&mut R>, m: usize) -> Array2<f64> {
        if self.dim() == 1 {
            return Array2::from_shape_vec((2, 1), vec![self.lower[0], self.upper[0]]).expect("shape");
        }
        let perimeter = 2.0 * (self.extent(0) + self.extent(1));
        let mut pts = Array2::zeros((m, 2));
        for (j, mut row) in pts.rows_mut().into_iter().enumerate() {
            let t = rng.as_mut().map_or(0.5, |r| r.gen::<f64>());
            let [x, y] = self.perimeter_point((j as f64 + t) * perimeter / m as f64);
            row[0] = x;
            row[1] = y;
        }
        pts
    }

    /// Boundary points. In 1D the boundary is the two endpoints and both are
    /// returned regardless of `m`; in 2D `m` points are drawn uniformly by arc
    /// length over the four edges.
    pub fn sample_boundary<R: Rng>(&self, rng: &mut R, m: usize) -> Array2<f64> {
        if self.dim() == 1 {
            return Array2::from_shape_vec((2, 1), vec![self.lower[0], self.upper[0]]).expect("shape");
        }
        let perimeter = 2.0 * (self.extent(0) + self.extent(1));
        let mut pts = Array2::zeros((m, 2));
        for mut row in pts.rows_mut() {
            let [x, y] = self.perimeter_point(rng.gen::<f64>() * perimeter);
            row[0] = x;
            row[1] = y;
        }
        pts
    }
}

impl fmt::Display for BoxDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.lower.iter().zip(&self.upper).map(|(l, u)| format!("[{l}, {u}]")).collect();
        write!(f, "{}", parts.join(" x "))
    }
}

/// A penalized obstacle problem: domain, exponent, fields and weights.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: BoxDomain,
    pub p: f64,
    pub obstacle: ScalarField,
    pub source: ScalarField,
    pub boundary: ScalarField,
    /// `Ψ`; `None` means identically zero.
    pub drift: Option<VectorField>,
    pub alpha: f64,
    pub beta: f64,
    /// Known exact solution, when there is one.
    pub exact: Option<ScalarField>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("p", &self.p)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("drift", &self.drift.is_some())
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p >= 2.0) {
            return Err(Error::Spec(format!("exponent p = {} must be >= 2", self.p)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Spec(format!("alpha = {} must be > 0", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Spec(format!("beta = {} must be >= 0", self.beta)));
        }
        Ok(())
    }

    pub fn with_weights(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }
}

/// Interior and boundary collocation points.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub interior: Array2<f64>,
    pub boundary: Array2<f64>,
    pub seed: u64,
    pub stream: u64,
}

impl SampleBatch {
    /// Draws a batch from the RNG stream `stream` of `seed`; identical
    /// arguments always give identical points.
    pub fn draw(domain: &BoxDomain, n: usize, m: usize, seed: u64, stream: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Spec("interior batch must be nonempty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let interior = domain.sample_interior(&mut rng, n);
        let boundary = if m > 0 { domain.sample_boundary(&mut rng, m) } else { Array2::zeros((0, domain.dim())) };
        Ok(SampleBatch { interior, boundary, seed, stream })
    }

    /// Jittered-grid batch: one uniform point per stratum, drawn from the
    /// same counter-derived stream as [`draw`](Self::draw). The interior
    /// count is the product of [`BoxDomain::strata`]`(n)`.
    pub fn draw_stratified(domain: &BoxDomain, n: usize, m: usize, seed: u64, stream: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Spec("interior batch must be nonempty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let interior = domain.sample_stratified(Some(&mut rng), n);
        let boundary =
            if m > 0 { domain.sample_boundary_stratified(Some(&mut rng), m) } else { Array2::zeros((0, domain.dim())) };
        Ok(SampleBatch { interior, boundary, seed, stream })
    }

    /// Cell-center grid batch; contains no randomness.
    pub fn grid(domain: &BoxDomain, n: usize, m: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Spec("interior batch must be nonempty".into()));
        }
        let interior = domain.sample_stratified::<ChaCha8Rng>(None, n);
        let boundary = if m > 0 {
            domain.sample_boundary_stratified::<ChaCha8Rng>(None, m)
        } else {
            Array2::zeros((0, domain.dim()))
        };
        Ok(SampleBatch::from_points(interior, boundary))
    }

    /// A batch from explicit points.
    pub fn from_points(interior: Array2<f64>, boundary: Array2<f64>) -> Self {
        SampleBatch { interior, boundary, seed: 0, stream: 0 }
    }

    pub fn interior_len(&self) -> usize {
        self.interior.nrows()
    }

    pub fn boundary_len(&self) -> usize {
        self.boundary.nrows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Assembles the weighted total from its components.
    pub fn combine(loss1: f64, loss2: f64, loss3: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown { loss1, loss2, loss3, total: loss1 + alpha * loss2 + beta * loss3 }
    }

    pub fn is_finite(&self) -> bool {
        self.loss1.is_finite() && self.loss2.is_finite() && self.loss3.is_finite() && self.total.is_finite()
    }
}

/// Values (and optionally input gradients) of a trial function on a set of points.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub values: Array1<f64>,
    /// `n × dim`; present when requested.
    pub gradients: Option<Array2<f64>>,
}

/// Anything that can stand in for `u` inside the loss: a network, an
/// analytic solution, an interpolated data field.
pub trait TrialFunction {
    fn input_dim(&self) -> usize;
    fn evaluate(&self, points: ArrayView2<'_, f64>, with_gradient: bool) -> Result<FieldSample>;
}

impl TrialFunction for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn evaluate(&self, points: ArrayView2<'_, f64>, with_gradient: bool) -> Result<FieldSample> {
        let n = points.nrows();
        let d = Network::input_dim(self);
        let mut values = Array1::zeros(n);
        let mut gradients = with_gradient.then(|| Array2::zeros((n, d)));
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let trace = self.forward_batch(points.slice(s![start..end, ..]), with_gradient)?;
            values.slice_mut(s![start..end]).assign(&trace.values());
            if let Some(g) = gradients.as_mut() {
                for j in 0..d {
                    g.slice_mut(s![start..end, j]).assign(&trace.gradient_component(j));
                }
            }
        }
        Ok(FieldSample { values, gradients })
    }
}

/// Closed-form field with a closed-form gradient.
#[derive(Clone)]
pub struct AnalyticField {
    pub dim: usize,
    pub value: ScalarField,
    pub gradient: VectorField,
}

impl TrialFunction for AnalyticField {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, points: ArrayView2<'_, f64>, with_gradient: bool) -> Result<FieldSample> {
        if points.ncols() != self.dim {
            return Err(Error::Structure(format!("points have dimension {}, field expects {}", points.ncols(), self.dim)));
        }
        let n = points.nrows();
        let mut values = Array1::zeros(n);
        let mut gradients = with_gradient.then(|| Array2::zeros((n, self.dim)));
        let mut buf = vec![0.0; self.dim];
        for (i, row) in points.rows().into_iter().enumerate() {
            let x = row.to_vec();
            values[i] = (self.value)(&x);
            if let Some(g) = gradients.as_mut() {
                (self.gradient)(&x, &mut buf);
                for j in 0..self.dim {
                    g[[i, j]] = buf[j];
                }
            }
        }
        Ok(FieldSample { values, gradients })
    }
}

fn check_dims(spec: &ProblemSpec, u: &dyn TrialFunction, batch: &SampleBatch) -> Result<()> {
    spec.validate()?;
    let d = spec.dim();
    if u.input_dim() != d || batch.interior.ncols() != d || (batch.boundary_len() > 0 && batch.boundary.ncols() != d) {
        return Err(Error::Structure(format!("dimension mismatch: problem is {d}D")));
    }
    Ok(())
}

/// Per-sample integrand of `loss1` and its partials with respect to `u` and `∇u`.
/// Returns `(term, ∂term/∂u, ∂term/∂(∇u))` with the last written into `dg`.
fn residual_terms(spec: &ProblemSpec, x: &[f64], u: f64, grad: &[f64], psi: &mut [f64], dg: &mut [f64]) -> (f64, f64) {
    psi.fill(0.0);
    if let Some(drift) = &spec.drift {
        drift(x, psi);
    }
    let mut norm2 = 0.0;
    for j in 0..grad.len() {
        dg[j] = grad[j] - psi[j];
        norm2 += dg[j] * dg[j];
    }
    let norm = norm2.sqrt();
    let p = spec.p;
    let powered = if p == 2.0 { norm2 } else { norm.powf(p) };
    // ∂/∂g (1/p)‖g − Ψ‖ᵖ = ‖g − Ψ‖ᵖ⁻²(g − Ψ)
    let scale = if p == 2.0 { 1.0 } else if norm == 0.0 { 0.0 } else { norm.powf(p - 2.0) };
    for v in dg.iter_mut() {
        *v *= scale;
    }
    let a = (spec.source)(x);
    (powered / p - a * u, -a)
}

/// `loss1`: mean of `(1/p)‖∇u − Ψ‖ᵖ − a·u` over the interior samples.
pub fn residual_loss(u: &dyn TrialFunction, spec: &ProblemSpec, batch: &SampleBatch) -> Result<f64> {
    check_dims(spec, u, batch)?;
    let n = nonempty_interior(batch)?;
    let field = u.evaluate(batch.interior.view(), true)?;
    let grads = field.gradients.as_ref().expect("requested gradients");
    let d = spec.dim();
    let (mut psi, mut dg) = (vec![0.0; d], vec![0.0; d]);
    let mut sum = 0.0;
    for (i, x) in batch.interior.rows().into_iter().enumerate() {
        let x = x.to_vec();
        let g = grads.row(i).to_vec();
        sum += residual_terms(spec, &x, field.values[i], &g, &mut psi, &mut dg).0;
    }
    Ok(sum / n as f64)
}

/// `loss2`: mean of `[b − u]₊²` over the interior samples.
pub fn obstacle_loss(u: &dyn TrialFunction, spec: &ProblemSpec, batch: &SampleBatch) -> Result<f64> {
    check_dims(spec, u, batch)?;
    let n = nonempty_interior(batch)?;
    let field = u.evaluate(batch.interior.view(), false)?;
    let sum: f64 = batch
        .interior
        .rows()
        .into_iter()
        .zip(field.values.iter())
        .map(|(x, &v)| {
            let gap = ((spec.obstacle)(&x.to_vec()) - v).max(0.0);
            gap * gap
        })
        .sum();
    Ok(sum / n as f64)
}

/// `loss3`: mean squared mismatch against `h` over the boundary samples.
pub fn boundary_loss(u: &dyn TrialFunction, spec: &ProblemSpec, batch: &SampleBatch) -> Result<f64> {
    check_dims(spec, u, batch)?;
    let m = batch.boundary_len();
    if m == 0 {
        return Err(Error::Spec("boundary batch is empty".into()));
    }
    let field = u.evaluate(batch.boundary.view(), false)?;
    let sum: f64 = batch
        .boundary
        .rows()
        .into_iter()
        .zip(field.values.iter())
        .map(|(y, &v)| {
            let r = v - (spec.boundary)(&y.to_vec());
            r * r
        })
        .sum();
    Ok(sum / m as f64)
}

fn nonempty_interior(batch: &SampleBatch) -> Result<usize> {
    match batch.interior_len() {
        0 => Err(Error::Spec("interior batch is empty".into())),
        n => Ok(n),
    }
}

fn boundary_required(spec: &ProblemSpec, batch: &SampleBatch) -> Result<()> {
    if spec.beta > 0.0 && batch.boundary_len() == 0 {
        return Err(Error::Spec("beta > 0 requires a nonempty boundary batch".into()));
    }
    Ok(())
}

/// All three components and the weighted total.
pub fn total_loss(u: &dyn TrialFunction, spec: &ProblemSpec, batch: &SampleBatch) -> Result<LossBreakdown> {
    boundary_required(spec, batch)?;
    let l1 = residual_loss(u, spec, batch)?;
    let l2 = obstacle_loss(u, spec, batch)?;
    let l3 = if batch.boundary_len() > 0 { boundary_loss(u, spec, batch)? } else { 0.0 };
    Ok(LossBreakdown::combine(l1, l2, l3, spec.alpha, spec.beta))
}

/// Total loss of a network together with its exact parameter gradient.
///
/// Interior and boundary points are processed in chunks of [`EVAL_CHUNK`]
/// and reduced in a fixed order, so the result does not depend on anything
/// but the inputs.
pub fn total_loss_and_gradient(
    net: &Network,
    spec: &ProblemSpec,
    batch: &SampleBatch,
) -> Result<(LossBreakdown, ParamGradient)> {
    check_dims(spec, net, batch)?;
    boundary_required(spec, batch)?;
    let n = nonempty_interior(batch)?;
    let d = spec.dim();
    let inv_n = 1.0 / n as f64;
    let mut grad = ParamGradient::zeros_like(net);
    let (mut sum1, mut sum2) = (0.0, 0.0);
    let (mut psi, mut dg) = (vec![0.0; d], vec![0.0; d]);
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];

    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let pts = batch.interior.slice(s![start..end, ..]);
        let trace = net.forward_batch(pts, true)?;
        let len = end - start;
        let mut u_adj = Array1::zeros(len);
        let mut g_adj = Array2::zeros((len, d));
        let values = trace.values();
        for i in 0..len {
            for j in 0..d {
                x[j] = pts[[i, j]];
                g[j] = trace.gradient_component(j)[i];
            }
            let u = values[i];
            let (term, du) = residual_terms(spec, &x, u, &g, &mut psi, &mut dg);
            sum1 += term;
            let gap = ((spec.obstacle)(&x) - u).max(0.0);
            sum2 += gap * gap;
            // d/du α[b − u]₊² = −2α[b − u]₊
            u_adj[i] = inv_n * (du - 2.0 * spec.alpha * gap);
            for j in 0..d {
                g_adj[[i, j]] = inv_n * dg[j];
            }
        }
        grad.accumulate(&net.backward(&trace, u_adj.view(), Some(g_adj.view()))?)?;
    }

    let m = batch.boundary_len();
    let mut sum3 = 0.0;
    if m > 0 {
        let inv_m = 1.0 / m as f64;
        for start in (0..m).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(m);
            let pts = batch.boundary.slice(s![start..end, ..]);
            let trace = net.forward_batch(pts, false)?;
            let values = trace.values();
            let mut u_adj = Array1::zeros(end - start);
            for i in 0..end - start {
                for j in 0..d {
                    x[j] = pts[[i, j]];
                }
                let r = values[i] - (spec.boundary)(&x);
                sum3 += r * r;
                u_adj[i] = inv_m * 2.0 * spec.beta * r;
            }
            grad.accumulate(&net.backward(&trace, u_adj.view(), None)?)?;
        }
        sum3 *= inv_m;
    }
    let breakdown = LossBreakdown::combine(sum1 * inv_n, sum2 * inv_n, sum3, spec.alpha, spec.beta);
    Ok((breakdown, grad))
}
