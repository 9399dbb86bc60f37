//! Manufactured obstacle problems with known solutions.
//!
//! * `mms1d-p2`: `Ω = [0, 1]`, `p = 2`, a sine/cosine obstacle whose exact
//!   solution follows the obstacle near the ends and sits on a plateau `u = 10`
//!   over `[0.25, 0.75]`.
//! * `mms2d-p<p>`: `Ω = [0, 1]²`, radial in `r = |x − (0.5, 0.5)|`, with
//!   `φ(r) = E(r) − F(r) + G(r)` where `F = r^q`, `G = (1 − r)^q`,
//!   `E = q·r` and `q = p/(p − 1)`. For `r > r* = 0.75` the solution continues
//!   as the tangent line `φ(r*) + φ'(r*)(r − r*)`, which is the unique affine
//!   continuation that keeps it C¹. The unit square lies inside `r ≤ √2/2 < r*`,
//!   so on `Ω` the obstacle and solution coincide.
//!
//! The source `a` is manufactured: on every region it is the p-Laplacian
//! divergence `−∇·(‖∇u‖^{p−2}∇u)` of the exact solution, so the exact solution
//! satisfies the variational inequality with equality.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::energy::{AnalyticField, BoxDomain, ProblemSpec, ScalarField, VectorField};
use crate::error::{Error, Result};

/// Radius beyond which the radial obstacle vanishes.
pub const R_STAR: f64 = 0.75;
/// Center of the radial coordinate on the unit square.
pub const CENTER_2D: [f64; 2] = [0.5, 0.5];
/// Points closer than this to a seam are nudged off it.
pub const SEAM_TOL: f64 = 1e-9;
/// Seams of the 1D problem, where `u''` jumps.
pub const SEAMS_1D: [f64; 2] = [0.25, 0.75];

fn check_unit_interval(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain(format!("x = {x}"), "[0, 1]".into()))
    }
}

fn obstacle_1d_unchecked(x: f64) -> f64 {
    if x <= 0.25 {
        10.0 * (2.0 * PI * x).sin()
    } else if x <= 0.75 {
        5.0 * (PI * (4.0 * x - 1.0)).cos() + 5.0
    } else {
        10.0 * (2.0 * PI * (1.0 - x)).sin()
    }
}

fn exact_1d_unchecked(x: f64) -> f64 {
    if x <= 0.25 {
        10.0 * (2.0 * PI * x).sin()
    } else if x <= 0.75 {
        10.0
    } else {
        10.0 * (2.0 * PI * (1.0 - x)).sin()
    }
}

fn exact_1d_derivative_unchecked(x: f64) -> f64 {
    if x <= 0.25 {
        20.0 * PI * (2.0 * PI * x).cos()
    } else if x <= 0.75 {
        0.0
    } else {
        -20.0 * PI * (2.0 * PI * (1.0 - x)).cos()
    }
}

fn exact_1d_second_unchecked(x: f64) -> f64 {
    if x < 0.25 {
        -40.0 * PI * PI * (2.0 * PI * x).sin()
    } else if x <= 0.75 {
        0.0
    } else {
        -40.0 * PI * PI * (2.0 * PI * (1.0 - x)).sin()
    }
}

/// Obstacle of the 1D problem on `[0, 1]`.
pub fn obstacle_1d(x: f64) -> Result<f64> {
    check_unit_interval(x)?;
    Ok(obstacle_1d_unchecked(x))
}

/// Exact solution of the 1D problem on `[0, 1]`.
pub fn exact_1d(x: f64) -> Result<f64> {
    check_unit_interval(x)?;
    Ok(exact_1d_unchecked(x))
}

pub fn exact_1d_derivative(x: f64) -> Result<f64> {
    check_unit_interval(x)?;
    Ok(exact_1d_derivative_unchecked(x))
}

/// `F`, `G`, `E` of the radial family and the threshold radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialPieces {
    pub p: f64,
    pub r_star: f64,
}

impl RadialPieces {
    pub fn new(p: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 2.0) {
            return Err(Error::Spec(format!("radial family needs p >= 2, got {p}")));
        }
        Ok(RadialPieces { p, r_star: R_STAR })
    }

    /// `q = p/(p − 1)`.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    pub fn f(&self, r: f64) -> f64 {
        r.powf(self.q())
    }

    pub fn g(&self, r: f64) -> f64 {
        (1.0 - r).powf(self.q())
    }

    pub fn e(&self, r: f64) -> f64 {
        self.q() * r
    }

    /// Inner expression `1 − (F − G + 1 − E)`.
    pub fn inner(&self, r: f64) -> f64 {
        1.0 - (self.f(r) - self.g(r) + 1.0 - self.e(r))
    }

    /// `d/dr` of [`Self::inner`]: `q(1 − r^m − (1 − r)^m)`, `m = 1/(p − 1)`.
    pub fn inner_derivative(&self, r: f64) -> f64 {
        let m = 1.0 / (self.p - 1.0);
        // 1 − (1 − r)^m, computed without cancellation for small r
        let one_minus_g = -(m * (-r).ln_1p()).exp_m1();
        self.q() * (one_minus_g - r.powf(m))
    }

    pub fn inner_second_derivative(&self, r: f64) -> f64 {
        let m = 1.0 / (self.p - 1.0);
        self.q() * m * ((1.0 - r).powf(m - 1.0) - r.powf(m - 1.0))
    }

    /// Radial profile of the exact solution on `r ≥ 0`.
    pub fn solution(&self, r: f64) -> f64 {
        if r <= self.r_star {
            self.inner(r)
        } else {
            self.inner(self.r_star) + self.inner_derivative(self.r_star) * (r - self.r_star)
        }
    }

    pub fn solution_derivative(&self, r: f64) -> f64 {
        if r <= self.r_star {
            self.inner_derivative(r)
        } else {
            self.inner_derivative(self.r_star)
        }
    }

    pub fn obstacle(&self, r: f64) -> f64 {
        if r <= self.r_star {
            self.inner(r)
        } else {
            0.0
        }
    }

    /// `−(1/r)·d/dr(r·|φ'|^{p−2}φ')` in closed form, for `r > 0` off the seam.
    fn radial_source_raw(&self, r: f64) -> f64 {
        let p = self.p;
        let d1 = self.solution_derivative(r);
        let d2 = if r <= self.r_star { self.inner_second_derivative(r) } else { 0.0 };
        let flux = d1.abs().powf(p - 2.0) * d1;
        let flux_prime = (p - 1.0) * d1.abs().powf(p - 2.0) * d2;
        -(flux_prime + flux / r)
    }

    /// `lim_{r→0}` of the source.
    pub fn source_at_center(&self) -> f64 {
        if self.p == 2.0 {
            0.0
        } else {
            2.0 * self.q().powf(self.p - 1.0)
        }
    }

    /// Manufactured source at radius `r`.
    pub fn source(&self, r: f64) -> SourceValue {
        if r < SEAM_TOL {
            return SourceValue { value: self.source_at_center(), nudged: true };
        }
        if (r - self.r_star).abs() < SEAM_TOL {
            let lo = self.radial_source_raw(self.r_star - SEAM_TOL);
            let hi = self.radial_source_raw(self.r_star + SEAM_TOL);
            return SourceValue { value: 0.5 * (lo + hi), nudged: true };
        }
        SourceValue { value: self.radial_source_raw(r), nudged: false }
    }
}

/// Radial obstacle of the 2D family; zero beyond `r*`.
pub fn obstacle_2d(r: f64, p: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(RadialPieces::new(p)?.obstacle(r))
}

/// Radial exact solution of the 2D family (C¹ across `r*`).
pub fn exact_2d(r: f64, p: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(RadialPieces::new(p)?.solution(r))
}

fn check_radius(r: f64) -> Result<()> {
    if r.is_finite() && r >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("r = {r}"), "[0, inf)".into()))
    }
}

/// Manufactured source value; `nudged` marks points that sat on a seam or
/// singular point and were evaluated from nearby one-sided limits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceValue {
    pub value: f64,
    pub nudged: bool,
}

fn source_1d(p: f64, x: f64) -> SourceValue {
    let raw = |x: f64| {
        let d1 = exact_1d_derivative_unchecked(x);
        let d2 = exact_1d_second_unchecked(x);
        -(p - 1.0) * d1.abs().powf(p - 2.0) * d2
    };
    if let Some(&seam) = SEAMS_1D.iter().find(|&&s| (x - s).abs() < SEAM_TOL) {
        let v = 0.5 * (raw(seam - SEAM_TOL) + raw(seam + SEAM_TOL));
        return SourceValue { value: v, nudged: true };
    }
    SourceValue { value: raw(x), nudged: false }
}

/// Which manufactured family a problem belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MmsKind {
    OneDim,
    Radial(RadialPieces),
}

/// A problem together with its exact solution and gradient.
#[derive(Clone)]
pub struct MmsProblem {
    pub spec: ProblemSpec,
    pub kind: MmsKind,
    pub exact: ScalarField,
    pub exact_gradient: VectorField,
}

impl fmt::Debug for MmsProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MmsProblem").field("spec", &self.spec).field("kind", &self.kind).finish()
    }
}

fn radius(x: &[f64]) -> f64 {
    ((x[0] - CENTER_2D[0]).powi(2) + (x[1] - CENTER_2D[1]).powi(2)).sqrt()
}

impl MmsProblem {
    /// The 1D `p = 2` problem on `[0, 1]` with `h(0) = h(1) = 0`.
    pub fn one_dim(alpha: f64, beta: f64) -> Self {
        let p = 2.0;
        let exact: ScalarField = Arc::new(|x: &[f64]| exact_1d_unchecked(x[0].clamp(0.0, 1.0)));
        let spec = ProblemSpec {
            name: "mms1d-p2".into(),
            domain: BoxDomain::unit(1),
            p,
            obstacle: Arc::new(|x: &[f64]| obstacle_1d_unchecked(x[0].clamp(0.0, 1.0))),
            source: Arc::new(move |x: &[f64]| source_1d(p, x[0]).value),
            boundary: Arc::new(|_: &[f64]| 0.0),
            drift: None,
            alpha,
            beta,
            exact: Some(exact.clone()),
        };
        MmsProblem {
            spec,
            kind: MmsKind::OneDim,
            exact,
            exact_gradient: Arc::new(|x: &[f64], g: &mut [f64]| g[0] = exact_1d_derivative_unchecked(x[0].clamp(0.0, 1.0))),
        }
    }

    /// The radial 2D problem on `[0, 1]²` for exponent `p`.
    pub fn radial(p: f64, alpha: f64, beta: f64) -> Result<Self> {
        let pieces = RadialPieces::new(p)?;
        let exact: ScalarField = Arc::new(move |x: &[f64]| pieces.solution(radius(x)));
        let spec = ProblemSpec {
            name: format!("mms2d-p{}", fmt_exponent(p)),
            domain: BoxDomain::unit(2),
            p,
            obstacle: Arc::new(move |x: &[f64]| pieces.obstacle(radius(x))),
            source: Arc::new(move |x: &[f64]| pieces.source(radius(x)).value),
            boundary: exact.clone(),
            drift: None,
            alpha,
            beta,
            exact: Some(exact.clone()),
        };
        let exact_gradient: VectorField = Arc::new(move |x: &[f64], g: &mut [f64]| {
            let r = radius(x);
            if r == 0.0 {
                g[0] = 0.0;
                g[1] = 0.0;
            } else {
                let d = pieces.solution_derivative(r);
                g[0] = d * (x[0] - CENTER_2D[0]) / r;
                g[1] = d * (x[1] - CENTER_2D[1]) / r;
            }
        });
        Ok(MmsProblem { spec, kind: MmsKind::Radial(pieces), exact, exact_gradient })
    }

    /// Manufactured source at `x`, flagged when evaluated next to a seam.
    pub fn source_at(&self, x: &[f64]) -> Result<SourceValue> {
        if !self.spec.domain.contains(x) {
            return Err(Error::Domain(format!("{x:?}"), self.spec.domain.to_string()));
        }
        Ok(match self.kind {
            MmsKind::OneDim => source_1d(self.spec.p, x[0]),
            MmsKind::Radial(pieces) => pieces.source(radius(x)),
        })
    }

    /// The exact solution as a trial function.
    pub fn exact_field(&self) -> AnalyticField {
        AnalyticField { dim: self.spec.dim(), value: self.exact.clone(), gradient: self.exact_gradient.clone() }
    }
}

fn fmt_exponent(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{}", p as i64)
    } else {
        format!("{p}")
    }
}

/// `−∇·(‖∇u‖^{p−2}∇u)` from a gradient field by fourth-order central
/// differences of the flux with step `h`.
pub fn fd_source(gradient: &VectorField, p: f64, x: &[f64], h: f64) -> f64 {
    let d = x.len();
    let flux = |y: &[f64], axis: usize| {
        let mut g = vec![0.0; d];
        gradient(y, &mut g);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm.powf(p - 2.0) * g[axis]
    };
    let mut div = 0.0;
    for axis in 0..d {
        let at = |k: f64| {
            let mut y = x.to_vec();
            y[axis] += k * h;
            flux(&y, axis)
        };
        div += (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h);
    }
    -div
}

/// Names accepted on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum ProblemName {
    Mms1dP2,
    Mms2d(f64),
    Grid(String),
}

impl ProblemName {
    pub fn parse(name: &str) -> Result<Self> {
        if name == "mms1d-p2" {
            return Ok(ProblemName::Mms1dP2);
        }
        if let Some(p) = name.strip_prefix("mms2d-p") {
            let p: f64 = p.parse().map_err(|_| Error::Config(format!("bad exponent in problem name {name:?}")))?;
            RadialPieces::new(p)?;
            return Ok(ProblemName::Mms2d(p));
        }
        if let Some(path) = name.strip_prefix("grid:") {
            if path.is_empty() {
                return Err(Error::Config("grid: needs a path".into()));
            }
            return Ok(ProblemName::Grid(path.to_string()));
        }
        Err(Error::Config(format!(
            "unknown problem {name:?} (expected mms1d-p2, mms2d-p<p> or grid:<path>)"
        )))
    }

    /// Builds the manufactured problem; grid problems are assembled by
    /// `geodata` and rejected here.
    pub fn mms(&self, alpha: f64, beta: f64) -> Result<MmsProblem> {
        match self {
            ProblemName::Mms1dP2 => Ok(MmsProblem::one_dim(alpha, beta)),
            ProblemName::Mms2d(p) => MmsProblem::radial(*p, alpha, beta),
            ProblemName::Grid(_) => Err(Error::Config("grid problems have no manufactured solution".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obstacle_1d_values() {
        assert!((obstacle_1d(0.25).unwrap() - 10.0).abs() < 1e-12);
        assert!(obstacle_1d(0.5).unwrap().abs() < 1e-12);
        assert_eq!(obstacle_1d(0.0).unwrap(), 0.0);
        // both branches meet at the seams
        for s in SEAMS_1D {
            let l = obstacle_1d(s - 1e-12).unwrap();
            let r = obstacle_1d(s + 1e-12).unwrap();
            assert!((l - r).abs() < 1e-9);
        }
        assert!(matches!(obstacle_1d(1.5), Err(Error::Domain(..))));
        assert!(obstacle_1d(-0.1).is_err());
    }

    #[test]
    fn exact_1d_values() {
        assert_eq!(exact_1d(0.5).unwrap(), 10.0);
        assert!((exact_1d(0.125).unwrap() - 7.0710678118654755).abs() < 1e-12);
        assert!(exact_1d(1.0).unwrap().abs() < 1e-12);
        assert!(exact_1d(2.0).is_err());
    }

    #[test]
    fn exact_1d_dominates_obstacle_and_matches_it_on_contact() {
        for i in 0..=10_000 {
            let x = i as f64 / 10_000.0;
            let (u, b) = (exact_1d(x).unwrap(), obstacle_1d(x).unwrap());
            assert!(u >= b - 1e-12, "x = {x}");
            if x <= 0.25 || x >= 0.75 {
                assert_eq!(u, b);
            }
        }
    }

    #[test]
    fn exact_1d_is_c1_at_seams() {
        for s in SEAMS_1D {
            let h = 1e-7;
            let left = (exact_1d(s).unwrap() - exact_1d(s - h).unwrap()) / h;
            let right = (exact_1d(s + h).unwrap() - exact_1d(s).unwrap()) / h;
            assert!((left - right).abs() < 1e-4, "FD slopes {left} {right}");
            let dl = exact_1d_derivative_unchecked(s - 1e-15);
            let dr = exact_1d_derivative_unchecked(s + 1e-15);
            assert!((dl - dr).abs() < 1e-8, "{dl} vs {dr}");
        }
    }

    #[test]
    fn source_1d_values() {
        let prob = MmsProblem::one_dim(1.0, 1.0);
        let a = prob.source_at(&[0.1]).unwrap();
        let expected = 40.0 * PI * PI * (0.2 * PI).sin();
        assert!((a.value - expected).abs() < 1e-10 && !a.nudged);
        assert_eq!(prob.source_at(&[0.5]).unwrap().value, 0.0);
        let seam = prob.source_at(&[0.25]).unwrap();
        assert!(seam.nudged);
        assert!((seam.value - 20.0 * PI * PI).abs() < 1e-4);
        assert!(prob.source_at(&[1.2]).is_err());
    }

    #[test]
    fn radial_values() {
        for p in [2.0, 3.0, 4.0, 5.5] {
            assert!((obstacle_2d(0.0, p).unwrap() - 1.0).abs() < 1e-15);
            assert!((exact_2d(0.0, p).unwrap() - 1.0).abs() < 1e-15);
            assert_eq!(obstacle_2d(0.8, p).unwrap(), 0.0);
        }
        assert!((obstacle_2d(0.5, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(obstacle_2d(-0.1, 3.0).is_err());
        assert!(exact_2d(0.1, 1.5).is_err());
    }

    #[test]
    fn radial_seam_is_c1() {
        for p in [2.0, 3.0, 4.0] {
            let pieces = RadialPieces::new(p).unwrap();
            let inner = pieces.inner(R_STAR);
            let outer = pieces.solution(R_STAR + 1e-14);
            assert!((inner - outer).abs() <= 1e-12);
            let h = 1e-6;
            let left = (pieces.solution(R_STAR) - pieces.solution(R_STAR - h)) / h;
            let right = (pieces.solution(R_STAR + h) - pieces.solution(R_STAR)) / h;
            assert!((left - right).abs() < 1e-5, "p={p}: {left} vs {right}");
            assert!((pieces.solution_derivative(R_STAR) - pieces.solution_derivative(R_STAR + 1e-3)).abs() < 1e-8);
        }
    }

    #[test]
    fn outer_branch_independent_evaluation() {
        // p = 3: q = 3/2, m = 1/2, expanded by hand.
        let phi = 1.5 * 0.75 - 0.75f64.sqrt().powi(3) + 0.25f64.sqrt().powi(3);
        let slope = 1.5 * (1.0 - 0.75f64.sqrt() - 0.25f64.sqrt());
        let expected = phi + slope * (0.9 - 0.75);
        assert!((exact_2d(0.9, 3.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.518125).abs() < 1e-6);
    }

    #[test]
    fn p2_reduces_to_quadratic_family() {
        let pieces = RadialPieces::new(2.0).unwrap();
        for i in 0..=20 {
            let r = i as f64 * 0.05;
            assert!((pieces.f(r) - r * r).abs() < 1e-14);
            assert!((pieces.g(r) - (1.0 - r) * (1.0 - r)).abs() < 1e-14);
            assert!((pieces.e(r) - 2.0 * r).abs() < 1e-14);
        }
    }

    #[test]
    fn obstacle_equals_exact_inside_r_star() {
        for p in [2.0, 3.0, 4.0] {
            for i in 0..=100 {
                let r = R_STAR * i as f64 / 100.0;
                assert_eq!(obstacle_2d(r, p).unwrap(), exact_2d(r, p).unwrap());
            }
        }
    }

    #[test]
    fn exact_2d_dominates_obstacle_on_probe_grid() {
        for p in [3.0, 4.0] {
            let prob = MmsProblem::radial(p, 1.0, 1.0).unwrap();
            for i in 0..100 {
                for j in 0..100 {
                    let x = [i as f64 / 99.0, j as f64 / 99.0];
                    assert!((prob.exact)(&x) >= (prob.spec.obstacle)(&x));
                }
            }
            // also beyond the square, where the obstacle drops to zero
            for i in 0..=100 {
                let r = i as f64 * 0.0125;
                assert!(exact_2d(r, p).unwrap() >= obstacle_2d(r, p).unwrap());
            }
        }
    }

    #[test]
    fn radial_derivative_matches_fd() {
        for p in [3.0, 4.0] {
            let pieces = RadialPieces::new(p).unwrap();
            for r in [0.05, 0.3, 0.6, 0.74] {
                let h = 1e-6;
                let fd = (pieces.solution(r + h) - pieces.solution(r - h)) / (2.0 * h);
                assert!((fd - pieces.solution_derivative(r)).abs() < 1e-7);
                let fd2 = (pieces.inner_derivative(r + h) - pieces.inner_derivative(r - h)) / (2.0 * h);
                assert!((fd2 - pieces.inner_second_derivative(r)).abs() < 1e-5 * fd2.abs().max(1.0));
            }
        }
    }

    #[test]
    fn radial_source_matches_fourth_order_fd_divergence() {
        for p in [3.0, 4.0] {
            let prob = MmsProblem::radial(p, 1.0, 1.0).unwrap();
            for x in [[0.8, 0.5], [0.5 + 0.3 * 0.6, 0.5 + 0.3 * 0.8], [0.2, 0.35], [0.95, 0.9]] {
                let closed = prob.source_at(&x).unwrap();
                let fd = fd_source(&prob.exact_gradient, p, &x, 1e-3);
                assert!(!closed.nudged);
                assert!((closed.value - fd).abs() <= 1e-6 * fd.abs(), "p={p} x={x:?}: {} vs {fd}", closed.value);
            }
        }
    }

    #[test]
    fn radial_source_limit_at_center() {
        for p in [3.0, 4.0] {
            let pieces = RadialPieces::new(p).unwrap();
            let limit = pieces.source(0.0);
            assert!(limit.nudged);
            let near = pieces.source(1e-7).value;
            assert!((near - limit.value).abs() < 1e-2 * limit.value, "{near} vs {}", limit.value);
        }
        assert_eq!(RadialPieces::new(2.0).unwrap().source(0.3).value, 0.0);
    }

    #[test]
    fn fd_source_on_1d_problem() {
        let prob = MmsProblem::one_dim(1.0, 1.0);
        let x = [0.1];
        let fd = fd_source(&prob.exact_gradient, 2.0, &x, 1e-3);
        assert!((fd - prob.source_at(&x).unwrap().value).abs() < 1e-6 * fd.abs());
    }

    #[test]
    fn registry_names() {
        assert_eq!(ProblemName::parse("mms1d-p2").unwrap(), ProblemName::Mms1dP2);
        assert_eq!(ProblemName::parse("mms2d-p3").unwrap(), ProblemName::Mms2d(3.0));
        assert_eq!(ProblemName::parse("mms2d-p4").unwrap(), ProblemName::Mms2d(4.0));
        assert_eq!(ProblemName::parse("grid:/tmp/x.asc").unwrap(), ProblemName::Grid("/tmp/x.asc".into()));
        assert!(ProblemName::parse("mms2d-p1.5").is_err());
        assert!(ProblemName::parse("heat").is_err());
        assert_eq!(ProblemName::parse("mms2d-p3").unwrap().mms(100.0, 100.0).unwrap().spec.name, "mms2d-p3");
    }

    #[test]
    fn boundary_data() {
        let one = MmsProblem::one_dim(1.0, 1.0);
        assert_eq!((one.spec.boundary)(&[0.0]), 0.0);
        assert!((one.exact)(&[1.0]).abs() < 1e-12);
        let two = MmsProblem::radial(3.0, 1.0, 1.0).unwrap();
        let y = [0.0, 0.3];
        assert_eq!((two.spec.boundary)(&y), (two.exact)(&y));
    }
}
