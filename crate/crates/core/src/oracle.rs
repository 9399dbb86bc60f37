//! Classical finite-difference/finite-element reference solvers for the
//! obstacle problem: projected SOR for the 1D `p = 2` case and a monotone
//! accelerated projected gradient method for any `p ≥ 2` in 1D and 2D.
//!
//! The discrete energy is the P1 finite-element one: intervals in 1D, each
//! grid cell split into two triangles in 2D, with the source integrated by
//! the lumped (nodal) mass. For `p = 2` in 1D its stationarity condition is
//! exactly the three-point stencil used by [`solve_psor_1d`].

use std::fmt::Write as _;

use ndarray::Array2;

use crate::energy::{BoxDomain, ProblemSpec};
use crate::error::{Error, Result};
use crate::metrics::{l1_error_values, max_error};

/// Tensor-product grid with `cells[k] + 1` nodes along axis `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FdGrid {
    domain: BoxDomain,
    cells: Vec<usize>,
}

impl FdGrid {
    pub fn new(domain: &BoxDomain, cells: &[usize]) -> Result<Self> {
        if cells.len() != domain.dim() {
            return Err(Error::Structure("one cell count per axis is required".into()));
        }
        if cells.iter().any(|&c| c < 2) {
            return Err(Error::Config("oracle grids need at least two cells per axis".into()));
        }
        Ok(FdGrid { domain: domain.clone(), cells: cells.to_vec() })
    }

    /// `cells` cells along every axis of `domain`.
    pub fn uniform(domain: &BoxDomain, cells: usize) -> Result<Self> {
        FdGrid::new(domain, &vec![cells; domain.dim()])
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn nodes_per_axis(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c + 1).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.cells.iter().map(|c| c + 1).product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.domain.extent(axis) / self.cells[axis] as f64
    }

    /// Lumped mass of an interior node.
    pub fn cell_measure(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Multi-index of node `i`; the last axis runs fastest.
    pub fn index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = i % (self.cells[a] + 1);
            i /= self.cells[a] + 1;
        }
        idx
    }

    pub fn node(&self, i: usize) -> Vec<f64> {
        self.index(i)
            .iter()
            .enumerate()
            .map(|(a, &k)| {
                if k == self.cells[a] {
                    self.domain.upper()[a]
                } else {
                    self.domain.lower()[a] + k as f64 * self.spacing(a)
                }
            })
            .collect()
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.index(i).iter().zip(&self.cells).any(|(&k, &c)| k == 0 || k == c)
    }

    /// All node coordinates, one row per node.
    pub fn points(&self) -> Array2<f64> {
        let mut pts = Array2::zeros((self.num_nodes(), self.dim()));
        for i in 0..self.num_nodes() {
            for (a, v) in self.node(i).into_iter().enumerate() {
                pts[[i, a]] = v;
            }
        }
        pts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverSettings {
    /// Stop when the stopping measure falls below this value.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tolerance: 1e-10, max_iterations: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    pub grid: FdGrid,
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Final value of the solver's stopping measure.
    pub residual: f64,
}

impl OracleSolution {
    /// Exact solution sampled at the grid nodes, when the problem has one.
    pub fn exact_values(&self, spec: &ProblemSpec) -> Option<Vec<f64>> {
        let exact = spec.exact.as_ref()?;
        Some((0..self.grid.num_nodes()).map(|i| exact(&self.grid.node(i))).collect())
    }

    pub fn max_error(&self, spec: &ProblemSpec) -> Option<f64> {
        self.exact_values(spec).map(|e| max_error(&self.values, &e))
    }

    /// `(l1, relative)` nodal error against the exact solution.
    pub fn l1_error(&self, spec: &ProblemSpec) -> Option<Result<(f64, f64)>> {
        self.exact_values(spec).map(|e| l1_error_values(&self.values, &e))
    }

    /// Nodal CSV in the same `x[,y],value` layout as network field dumps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.grid.dim() == 1 { "x,value\n" } else { "x,y,value\n" });
        for (i, v) in self.values.iter().enumerate() {
            for c in self.grid.node(i) {
                let _ = write!(out, "{c},");
            }
            let _ = writeln!(out, "{v}");
        }
        out
    }
}

/// Over-relaxation factor minimizing the SOR spectral radius for the 1D
/// Laplacian on `cells` cells.
pub fn optimal_omega(cells: usize) -> f64 {
    2.0 / (1.0 + (std::f64::consts::PI / cells as f64).sin())
}

fn check_p(spec: &ProblemSpec) -> Result<()> {
    if !(spec.p.is_finite() && spec.p >= 2.0) {
        return Err(Error::Config(format!("oracle requires p >= 2, got {}", spec.p)));
    }
    Ok(())
}

/// Projected successive over-relaxation for the 1D `p = 2` problem.
///
/// Stops once the largest update of a sweep is below `settings.tolerance`;
/// a non-finite or growing iterate is reported as divergence.
pub fn solve_psor_1d(spec: &ProblemSpec, cells: usize, omega: f64, settings: &SolverSettings) -> Result<OracleSolution> {
    check_p(spec)?;
    if spec.dim() != 1 {
        return Err(Error::Config("PSOR oracle is one-dimensional".into()));
    }
    if spec.p != 2.0 {
        return Err(Error::Config(format!("PSOR oracle requires p = 2, got {}", spec.p)));
    }
    if !(omega > 0.0 && omega < 2.0) {
        return Err(Error::Config(format!("relaxation factor {omega} outside (0, 2)")));
    }
    let grid = FdGrid::uniform(&spec.domain, cells)?;
    let h = grid.spacing(0);
    let n = grid.num_nodes();
    let xs: Vec<f64> = (0..n).map(|i| grid.node(i)[0]).collect();
    let b: Vec<f64> = xs.iter().map(|&x| (spec.obstacle)(&[x])).collect();
    // Right-hand side h²·a plus the drift flux difference at cell midpoints.
    let mut psi = vec![0.0; cells];
    if let Some(drift) = &spec.drift {
        let mut buf = [0.0];
        for (k, p) in psi.iter_mut().enumerate() {
            drift(&[0.5 * (xs[k] + xs[k + 1])], &mut buf);
            *p = buf[0];
        }
    }
    let rhs: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 || i == n - 1 {
                0.0
            } else {
                h * h * (spec.source)(&[xs[i]]) + h * (psi[i - 1] - psi[i])
            }
        })
        .collect();
    let mut u: Vec<f64> = xs.iter().zip(&b).map(|(&x, &bi)| bi.max((spec.boundary)(&[x]))).collect();
    u[0] = (spec.boundary)(&[xs[0]]);
    u[n - 1] = (spec.boundary)(&[xs[n - 1]]);
    let scale = u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for sweep in 1..=settings.max_iterations {
        let mut max_update = 0.0f64;
        for i in 1..n - 1 {
            let gs = 0.5 * (u[i - 1] + u[i + 1] + rhs[i]);
            let next = (u[i] + omega * (gs - u[i])).max(b[i]);
            max_update = max_update.max((next - u[i]).abs());
            u[i] = next;
        }
        if !max_update.is_finite() || max_update > 1e6 * scale {
            return Err(Error::Solver(format!("PSOR diverged at sweep {sweep}")));
        }
        if max_update < settings.tolerance {
            return Ok(OracleSolution { grid, values: u, iterations: sweep, residual: max_update });
        }
    }
    Err(Error::Solver(format!("PSOR did not converge in {} sweeps", settings.max_iterations)))
}

/// P1 discretization of the penalty-free energy with the constraint kept
/// as a bound on the unknowns.
struct Discretization {
    grid: FdGrid,
    p: f64,
    /// Lumped-mass source weights `m_i·a_i`.
    load: Vec<f64>,
    obstacle: Vec<f64>,
    fixed: Vec<bool>,
    /// Drift per element: one entry per interval in 1D, two triangles per
    /// cell in 2D, each holding `dim` components.
    psi: Vec<[f64; 2]>,
}

impl Discretization {
    fn new(spec: &ProblemSpec, cells: &[usize]) -> Result<Self> {
        let grid = FdGrid::new(&spec.domain, cells)?;
        let n = grid.num_nodes();
        let mass = grid.cell_measure();
        let mut load = vec![0.0; n];
        let mut obstacle = vec![0.0; n];
        let mut fixed = vec![false; n];
        for i in 0..n {
            let x = grid.node(i);
            obstacle[i] = (spec.obstacle)(&x);
            fixed[i] = grid.is_boundary(i);
            if !fixed[i] {
                load[i] = mass * (spec.source)(&x);
            }
        }
        let mut psi = Vec::new();
        let d = grid.dim();
        let eval_psi = |pt: &[f64]| -> [f64; 2] {
            let mut out = [0.0; 2];
            if let Some(f) = &spec.drift {
                f(pt, &mut out[..d]);
            }
            out
        };
        if d == 1 {
            let h = grid.spacing(0);
            for k in 0..cells[0] {
                psi.push(eval_psi(&[spec.domain.lower()[0] + (k as f64 + 0.5) * h]));
            }
        } else {
            let (hx, hy) = (grid.spacing(0), grid.spacing(1));
            for i in 0..cells[0] {
                for j in 0..cells[1] {
                    let x0 = spec.domain.lower()[0] + i as f64 * hx;
                    let y0 = spec.domain.lower()[1] + j as f64 * hy;
                    psi.push(eval_psi(&[x0 + hx / 3.0, y0 + hy / 3.0]));
                    psi.push(eval_psi(&[x0 + 2.0 * hx / 3.0, y0 + 2.0 * hy / 3.0]));
                }
            }
        }
        Ok(Discretization { grid, p: spec.p, load, obstacle, fixed, psi })
    }

    /// Energy and, when `grad` is given, its gradient with respect to the
    /// nodal values (zero on fixed nodes).
    fn energy(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let p = self.p;
        // Integrand (1/p)|v|^p and its flux |v|^{p-2} v for v = ∇u − Ψ.
        let flux = |v: [f64; 2]| -> (f64, [f64; 2]) {
            let norm2 = v[0] * v[0] + v[1] * v[1];
            let w = if p == 2.0 { 1.0 } else { norm2.powf(0.5 * (p - 2.0)) };
            (w * norm2 / p, [w * v[0], w * v[1]])
        };
        let mut e = 0.0;
        if self.grid.dim() == 1 {
            let h = self.grid.spacing(0);
            for k in 0..self.grid.cells()[0] {
                let v = [(u[k + 1] - u[k]) / h - self.psi[k][0], 0.0];
                let (f, w) = flux(v);
                e += h * f;
                if let Some(g) = grad.as_deref_mut() {
                    g[k + 1] += w[0];
                    g[k] -= w[0];
                }
            }
        } else {
            let (hx, hy) = (self.grid.spacing(0), self.grid.spacing(1));
            let area = 0.5 * hx * hy;
            let ny = self.grid.cells()[1] + 1;
            let mut t = 0;
            for i in 0..self.grid.cells()[0] {
                for j in 0..self.grid.cells()[1] {
                    let n00 = i * ny + j;
                    let n10 = (i + 1) * ny + j;
                    let n01 = i * ny + j + 1;
                    let n11 = (i + 1) * ny + j + 1;
                    // Lower-left triangle (n00, n10, n01).
                    let psi = self.psi[t];
                    let v = [(u[n10] - u[n00]) / hx - psi[0], (u[n01] - u[n00]) / hy - psi[1]];
                    let (f, w) = flux(v);
                    e += area * f;
                    if let Some(g) = grad.as_deref_mut() {
                        let (ax, ay) = (area * w[0] / hx, area * w[1] / hy);
                        g[n10] += ax;
                        g[n00] -= ax + ay;
                        g[n01] += ay;
                    }
                    // Upper-right triangle (n11, n01, n10).
                    let psi = self.psi[t + 1];
                    let v = [(u[n11] - u[n01]) / hx - psi[0], (u[n11] - u[n10]) / hy - psi[1]];
                    let (f, w) = flux(v);
                    e += area * f;
                    if let Some(g) = grad.as_deref_mut() {
                        let (ax, ay) = (area * w[0] / hx, area * w[1] / hy);
                        g[n11] += ax + ay;
                        g[n01] -= ax;
                        g[n10] -= ay;
                    }
                    t += 2;
                }
            }
        }
        for (i, (&l, &ui)) in self.load.iter().zip(u).enumerate() {
            e -= l * ui;
            if let Some(g) = grad.as_deref_mut() {
                g[i] -= l;
            }
        }
        if let Some(g) = grad {
            for (gi, &f) in g.iter_mut().zip(&self.fixed) {
                if f {
                    *gi = 0.0;
                }
            }
        }
        e
    }

    fn project(&self, u: &mut [f64]) {
        for ((ui, &b), &f) in u.iter_mut().zip(&self.obstacle).zip(&self.fixed) {
            if !f && *ui < b {
                *ui = b;
            }
        }
    }

    /// Largest `|min(u − b, g/m)|` over free nodes: zero exactly at a
    /// solution of the discrete complementarity problem.
    fn natural_residual(&self, u: &[f64], grad: &[f64]) -> f64 {
        let m = self.grid.cell_measure();
        let mut r = 0.0f64;
        for i in 0..u.len() {
            if !self.fixed[i] {
                r = r.max((u[i] - self.obstacle[i]).min(grad[i] / m).abs());
            }
        }
        r
    }
}

/// Minimizes the discrete p-energy subject to `u ≥ b` and the Dirichlet data
/// with a monotone accelerated projected gradient method (backtracking,
/// adaptive restart), measured in the lumped-mass metric.
///
/// Stops when the natural residual `max|min(u − b, ∇E/m)|` is below
/// `settings.tolerance`.
pub fn solve_pgd(spec: &ProblemSpec, cells: &[usize], settings: &SolverSettings) -> Result<OracleSolution> {
    check_p(spec)?;
    let disc = Discretization::new(spec, cells)?;
    let grid = &disc.grid;
    let n = grid.num_nodes();
    let m = grid.cell_measure();
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let pt = grid.node(i);
            if disc.fixed[i] {
                (spec.boundary)(&pt)
            } else {
                disc.obstacle[i].max((spec.boundary)(&pt))
            }
        })
        .collect();
    disc.project(&mut x);

    let hmin = (0..grid.dim()).map(|a| grid.spacing(a)).fold(f64::INFINITY, f64::min);
    let mut step = hmin * hmin / (4.0 * grid.dim() as f64);
    let mut y = x.clone();
    let mut gy = vec![0.0; n];
    let mut gz = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut momentum = 1.0f64;
    disc.energy(&y, Some(&mut gy));
    for iter in 1..=settings.max_iterations {
        // Backtrack until the scaled gradient is (1/step)-Lipschitz between
        // y and the projected step; unlike an energy comparison this stays
        // meaningful once energy changes reach rounding level.
        loop {
            for i in 0..n {
                z[i] = y[i] - step * gy[i] / m;
            }
            disc.project(&mut z);
            disc.energy(&z, Some(&mut gz));
            let (mut dg, mut dx) = (0.0, 0.0);
            for i in 0..n {
                dg += ((gz[i] - gy[i]) / m).powi(2);
                dx += (z[i] - y[i]).powi(2);
            }
            if step * step * dg <= dx {
                break;
            }
            step *= 0.5;
            if step < 1e-30 {
                return Err(Error::Solver("projected gradient step collapsed".into()));
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("projected gradient diverged at iteration {iter}")));
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        // Restart the momentum whenever the step opposes the previous motion,
        // which keeps the iteration monotone in practice.
        let mut dot = 0.0;
        for i in 0..n {
            dot += (y[i] - z[i]) * (z[i] - x[i]);
        }
        if dot > 0.0 {
            momentum = 1.0;
            x.copy_from_slice(&z);
            y.copy_from_slice(&z);
            gy.copy_from_slice(&gz);
        } else {
            let c = (momentum - 1.0) / next_momentum;
            for i in 0..n {
                let xi = z[i];
                y[i] = xi + c * (xi - x[i]);
                x[i] = xi;
            }
            disc.project(&mut y);
            disc.energy(&y, Some(&mut gy));
            momentum = next_momentum;
        }
        if iter % 10 == 0 {
            let r = disc.natural_residual(&z, &gz);
            if r < settings.tolerance {
                return Ok(OracleSolution { grid: grid.clone(), values: z.clone(), iterations: iter, residual: r });
            }
        }
        step *= 1.05;
    }
    let mut gx = vec![0.0; n];
    disc.energy(&x, Some(&mut gx));
    let r = disc.natural_residual(&x, &gx);
    Err(Error::Solver(format!(
        "projected gradient stopped after {} iterations with residual {r:e}",
        settings.max_iterations
    )))
}
