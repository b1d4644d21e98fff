//! Smooth scalar fields on boxes and flat tori, and the Morse data of their
//! critical points.
//!
//! The metric is always the flat one, so the gradient is the plain vector of
//! partial derivatives. Periodic axes model flat tori; evaluation wraps
//! coordinates into the fundamental domain first.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::halton;

pub type Point = DVector<f64>;

/// Newton iterations before `find_critical` gives up.
pub const NEWTON_MAX_ITER: usize = 50;
/// Relative eigenvalue gap below which a critical point counts as degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-8;
/// Two critical points closer than this are the same point.
pub const COINCIDENCE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("point {point:?} lies outside the domain on axis {axis}")]
    OutOfDomain { axis: usize, point: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("Newton iteration from {seed:?} did not converge (|grad f| = {residual:e} after {iterations} iterations)")]
    NotFound {
        seed: Vec<f64>,
        residual: f64,
        iterations: usize,
    },
    #[error("degenerate critical point: smallest |eigenvalue| {margin:e} below threshold {threshold:e}")]
    Degenerate { margin: f64, threshold: f64 },
    #[error("point is not critical: |grad f| = {0:e}")]
    NotCritical(f64),
    #[error("invalid field: {0}")]
    Invalid(String),
}

/// Axis-aligned box; periodic axes are identified end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub periodic: Vec<bool>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, periodic: Vec<bool>) -> Result<Self, FieldError> {
        let d = Domain {
            lower,
            upper,
            periodic,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let n = self.lower.len();
        if n == 0 || self.upper.len() != n || self.periodic.len() != n {
            return Err(FieldError::Invalid(
                "domain bounds and periodic flags must have one equal, positive length".into(),
            ));
        }
        for i in 0..n {
            if !(self.lower[i].is_finite() && self.upper[i].is_finite() && self.upper[i] > self.lower[i]) {
                return Err(FieldError::Invalid(format!("empty or non-finite extent on axis {i}")));
            }
        }
        Ok(())
    }

    /// `[-half_width, half_width]^n`, no periodic axes.
    pub fn cube(n: usize, half_width: f64) -> Self {
        Domain {
            lower: vec![-half_width; n],
            upper: vec![half_width; n],
            periodic: vec![false; n],
        }
    }

    /// The flat torus `[0, 2 pi)^n`.
    pub fn torus(n: usize) -> Self {
        Domain {
            lower: vec![0.0; n],
            upper: vec![2.0 * PI; n],
            periodic: vec![true; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i).powi(2)).sum::<f64>().sqrt()
    }

    pub fn has_periodic(&self) -> bool {
        self.periodic.iter().any(|&p| p)
    }

    /// Maps periodic coordinates into `[lower, upper)`; other axes untouched.
    pub fn wrap(&self, p: &Point) -> Point {
        if !self.has_periodic() {
            return p.clone();
        }
        let mut q = p.clone();
        for i in 0..self.dim() {
            if self.periodic[i] {
                let w = self.width(i);
                let mut t = self.lower[i] + (q[i] - self.lower[i]).rem_euclid(w);
                if t >= self.upper[i] {
                    t = self.lower[i];
                }
                q[i] = t;
            }
        }
        q
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.len() == self.dim()
            && (0..self.dim()).all(|i| {
                self.periodic[i] || {
                    let slack = 1e-12 * self.width(i);
                    p[i] >= self.lower[i] - slack && p[i] <= self.upper[i] + slack
                }
            })
    }

    /// Wraps `p` and checks it against the non-periodic bounds.
    pub fn check(&self, p: &Point) -> Result<Point, FieldError> {
        if p.len() != self.dim() {
            return Err(FieldError::Dimension {
                expected: self.dim(),
                got: p.len(),
            });
        }
        for i in 0..self.dim() {
            let slack = 1e-12 * self.width(i);
            if !self.periodic[i] && (p[i] < self.lower[i] - slack || p[i] > self.upper[i] + slack) || !p[i].is_finite() {
                return Err(FieldError::OutOfDomain {
                    axis: i,
                    point: p.iter().copied().collect(),
                });
            }
        }
        Ok(self.wrap(p))
    }

    /// Displacement `to - from`, using the shortest representative on
    /// periodic axes.
    pub fn delta(&self, from: &Point, to: &Point) -> Point {
        let mut d = to - from;
        for i in 0..self.dim() {
            if self.periodic[i] {
                let w = self.width(i);
                d[i] -= w * (d[i] / w).round();
            }
        }
        d
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        self.delta(a, b).norm()
    }

    /// Point of the domain at unit-cube coordinates `u`.
    pub fn at_unit(&self, u: &[f64]) -> Point {
        Point::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| self.lower[i] + u[i] * self.width(i)),
        )
    }
}

/// An evaluator for a smooth function. Derivatives are optional; missing
/// ones are replaced by central finite differences.
pub trait FieldFn: Send + Sync {
    fn value(&self, p: &Point) -> f64;

    fn gradient(&self, _p: &Point) -> Option<Point> {
        None
    }

    fn hessian(&self, _p: &Point) -> Option<DMatrix<f64>> {
        None
    }
}

/// One factor of a product term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Factor {
    Pow { axis: usize, exp: u32 },
    Cos { axis: usize, freq: f64 },
    Sin { axis: usize, freq: f64 },
}

impl Factor {
    pub fn axis(&self) -> usize {
        match *self {
            Factor::Pow { axis, .. } | Factor::Cos { axis, .. } | Factor::Sin { axis, .. } => axis,
        }
    }

    /// Value, first and second derivative at `x`.
    fn jet(&self, x: f64) -> [f64; 3] {
        match *self {
            Factor::Pow { exp, .. } => {
                let e = exp as i32;
                match exp {
                    0 => [1.0, 0.0, 0.0],
                    1 => [x, 1.0, 0.0],
                    _ => [
                        x.powi(e),
                        e as f64 * x.powi(e - 1),
                        (e * (e - 1)) as f64 * x.powi(e - 2),
                    ],
                }
            }
            Factor::Cos { freq, .. } => {
                let (s, c) = (freq * x).sin_cos();
                [c, -freq * s, -freq * freq * c]
            }
            Factor::Sin { freq, .. } => {
                let (s, c) = (freq * x).sin_cos();
                [s, freq * c, -freq * freq * s]
            }
        }
    }
}

/// `coef * prod(factors)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coef: f64,
    #[serde(default)]
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn constant(coef: f64) -> Self {
        Term {
            coef,
            factors: Vec::new(),
        }
    }

    pub fn new(coef: f64, factors: Vec<Factor>) -> Self {
        Term { coef, factors }
    }
}

/// Sum of polynomial/trigonometric product terms with exact derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TermField {
    dim: usize,
    terms: Vec<Term>,
}

impl TermField {
    pub fn new(dim: usize, terms: Vec<Term>) -> Result<Self, FieldError> {
        for t in &terms {
            if !t.coef.is_finite() {
                return Err(FieldError::Invalid("non-finite term coefficient".into()));
            }
            for f in &t.factors {
                if f.axis() >= dim {
                    return Err(FieldError::Invalid(format!(
                        "factor axis {} out of range for dimension {dim}",
                        f.axis()
                    )));
                }
            }
        }
        Ok(TermField { dim, terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn jets(&self, term: &Term, p: &Point) -> Vec<[f64; 3]> {
        term.factors.iter().map(|f| f.jet(p[f.axis()])).collect()
    }
}

fn product_except(jets: &[[f64; 3]], skip: &[usize]) -> f64 {
    jets.iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .map(|(_, j)| j[0])
        .product()
}

impl FieldFn for TermField {
    fn value(&self, p: &Point) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coef * t.factors.iter().map(|f| f.jet(p[f.axis()])[0]).product::<f64>())
            .sum()
    }

    fn gradient(&self, p: &Point) -> Option<Point> {
        let mut g = Point::zeros(self.dim);
        for t in &self.terms {
            let jets = self.jets(t, p);
            for (j, f) in t.factors.iter().enumerate() {
                g[f.axis()] += t.coef * jets[j][1] * product_except(&jets, &[j]);
            }
        }
        Some(g)
    }

    fn hessian(&self, p: &Point) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for t in &self.terms {
            let jets = self.jets(t, p);
            for (j, fj) in t.factors.iter().enumerate() {
                let aj = fj.axis();
                h[(aj, aj)] += t.coef * jets[j][2] * product_except(&jets, &[j]);
                for (l, fl) in t.factors.iter().enumerate() {
                    if l != j {
                        h[(aj, fl.axis())] += t.coef * jets[j][1] * jets[l][1] * product_except(&jets, &[j, l]);
                    }
                }
            }
        }
        Some(h)
    }
}

/// A smooth function on a flat domain.
#[derive(Clone)]
pub struct ScalarField {
    name: String,
    domain: Domain,
    func: Arc<dyn FieldFn>,
    fd_step: f64,
    scale: f64,
    analytic_gradient: bool,
    analytic_hessian: bool,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("fd_step", &self.fd_step)
            .field("scale", &self.scale)
            .finish()
    }
}

/// Value, gradient and Hessian at one point.
#[derive(Clone, Debug)]
pub struct Probe {
    pub value: f64,
    pub gradient: Point,
    pub hessian: DMatrix<f64>,
}

impl ScalarField {
    pub fn new(name: impl Into<String>, domain: Domain, func: Arc<dyn FieldFn>) -> Result<Self, FieldError> {
        domain.validate()?;
        let probe = domain.at_unit(&vec![0.5; domain.dim()]);
        let analytic_gradient = func.gradient(&probe).is_some();
        let analytic_hessian = func.hessian(&probe).is_some();
        let mut field = ScalarField {
            name: name.into(),
            fd_step: 1e-5 * domain.diameter(),
            domain,
            func,
            scale: 1.0,
            analytic_gradient,
            analytic_hessian,
        };
        field.scale = field.estimate_scale();
        Ok(field)
    }

    /// Field built from a term list. Terms acting on periodic axes must be
    /// trigonometric with a frequency that makes them periodic on the domain.
    pub fn from_terms(name: impl Into<String>, domain: Domain, terms: Vec<Term>) -> Result<Self, FieldError> {
        domain.validate()?;
        for t in &terms {
            for f in &t.factors {
                let axis = f.axis();
                if axis < domain.dim() && domain.periodic[axis] {
                    match *f {
                        Factor::Pow { exp: 0, .. } => {}
                        Factor::Pow { .. } => {
                            return Err(FieldError::Invalid(format!(
                                "polynomial factor on periodic axis {axis}"
                            )))
                        }
                        Factor::Cos { freq, .. } | Factor::Sin { freq, .. } => {
                            let cycles = freq * domain.width(axis) / (2.0 * PI);
                            if (cycles - cycles.round()).abs() > 1e-9 {
                                return Err(FieldError::Invalid(format!(
                                    "frequency {freq} is not periodic on axis {axis}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        let func = TermField::new(domain.dim(), terms)?;
        Self::new(name, domain, Arc::new(func))
    }

    /// `scale * (sum_{i>=k} x_i^2 - sum_{i<k} x_i^2) / 2` on a cube: the
    /// unstable coordinates come first.
    pub fn model(n: usize, k: usize, scale: f64, half_width: f64) -> Result<Self, FieldError> {
        if n == 0 || k > n {
            return Err(FieldError::Invalid(format!("model needs 0 <= k <= n, n > 0 (n={n}, k={k})")));
        }
        if !(scale > 0.0) || !(half_width > 0.0) {
            return Err(FieldError::Invalid("model scale and half width must be positive".into()));
        }
        let terms = (0..n)
            .map(|i| {
                let sign = if i < k { -1.0 } else { 1.0 };
                Term::new(0.5 * sign * scale, vec![Factor::Pow { axis: i, exp: 2 }])
            })
            .collect();
        Self::from_terms(format!("model(n={n},k={k})"), Domain::cube(n, half_width), terms)
    }

    /// `(x^2 - 1)^2 + y^2`: minima at `(+-1, 0)`, a saddle at the origin.
    pub fn double_well(half_width: f64) -> Result<Self, FieldError> {
        let terms = vec![
            Term::new(1.0, vec![Factor::Pow { axis: 0, exp: 4 }]),
            Term::new(-2.0, vec![Factor::Pow { axis: 0, exp: 2 }]),
            Term::constant(1.0),
            Term::new(1.0, vec![Factor::Pow { axis: 1, exp: 2 }]),
        ];
        Self::from_terms("double_well", Domain::cube(2, half_width), terms)
    }

    /// `cos(t1) + 0.5 cos(t2)` on the flat torus: critical points at
    /// `{0, pi}^2` with values `{1.5, 0.5, -0.5, -1.5}`.
    pub fn torus() -> Result<Self, FieldError> {
        let terms = vec![
            Term::new(1.0, vec![Factor::Cos { axis: 0, freq: 1.0 }]),
            Term::new(0.5, vec![Factor::Cos { axis: 1, freq: 1.0 }]),
        ];
        Self::from_terms("torus", Domain::torus(2), terms)
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    /// Gradient magnitude scale, the largest `|grad f|` over a fixed set of
    /// quasi-random probes. Tolerances on `|grad f|` are relative to it.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.analytic_gradient
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.analytic_hessian
    }

    fn estimate_scale(&self) -> f64 {
        let n = self.dim();
        let s = (1..=64u64)
            .map(|i| self.gradient(&self.domain.at_unit(&halton(i, n))).norm())
            .fold(0.0, f64::max);
        if s.is_finite() && s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// `f(p)` without domain checks (periodic axes are wrapped). The flow
    /// integrator evaluates in the padding outside the box.
    pub fn value(&self, p: &Point) -> f64 {
        if self.domain.has_periodic() {
            self.func.value(&self.domain.wrap(p))
        } else {
            self.func.value(p)
        }
    }

    pub fn gradient(&self, p: &Point) -> Point {
        let p = self.domain.wrap(p);
        if let Some(g) = self.func.gradient(&p) {
            return g;
        }
        let h = self.fd_step;
        let mut g = Point::zeros(p.len());
        let mut q = p.clone();
        for i in 0..p.len() {
            q[i] = p[i] + h;
            let fp = self.func.value(&q);
            q[i] = p[i] - h;
            let fm = self.func.value(&q);
            q[i] = p[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    pub fn hessian(&self, p: &Point) -> DMatrix<f64> {
        let p = self.domain.wrap(p);
        if let Some(h) = self.func.hessian(&p) {
            return h;
        }
        let n = p.len();
        let h = self.fd_step;
        let mut out = DMatrix::zeros(n, n);
        if self.analytic_gradient {
            let mut q = p.clone();
            for j in 0..n {
                q[j] = p[j] + h;
                let gp = self.func.gradient(&q).expect("analytic gradient");
                q[j] = p[j] - h;
                let gm = self.func.gradient(&q).expect("analytic gradient");
                q[j] = p[j];
                out.set_column(j, &((gp - gm) / (2.0 * h)));
            }
            return out;
        }
        let f0 = self.func.value(&p);
        let mut q = p.clone();
        for i in 0..n {
            q[i] = p[i] + h;
            let fp = self.func.value(&q);
            q[i] = p[i] - h;
            let fm = self.func.value(&q);
            q[i] = p[i];
            out[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in (i + 1)..n {
                let mut e = |si: f64, sj: f64| {
                    q[i] = p[i] + si * h;
                    q[j] = p[j] + sj * h;
                    let v = self.func.value(&q);
                    q[i] = p[i];
                    q[j] = p[j];
                    v
                };
                let v = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Value, gradient and Hessian at a point of the domain.
    pub fn probe(&self, p: &Point) -> Result<Probe, FieldError> {
        let p = self.domain.check(p)?;
        Ok(Probe {
            value: self.func.value(&p),
            gradient: self.gradient(&p),
            hessian: self.hessian(&p),
        })
    }

    /// Tolerance on `|grad f|` for Newton convergence.
    pub fn newton_tolerance(&self) -> f64 {
        if self.analytic_gradient {
            1e-10 * self.scale
        } else {
            1e-6 * self.scale
        }
    }

    /// Tolerance on `|grad f|` for accepting a point as critical.
    pub fn critical_tolerance(&self) -> f64 {
        if self.analytic_gradient {
            1e-8 * self.scale
        } else {
            1e-5 * self.scale
        }
    }
}

/// Spectral data of the Hessian at a critical point.
#[derive(Clone, Debug)]
pub struct MorseData {
    pub index: usize,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub margin: f64,
    /// Columns span the negative eigenspace (`n x k`), ordered by eigenvalue.
    pub unstable_basis: DMatrix<f64>,
    /// Columns span the positive eigenspace (`n x (n-k)`), ordered by eigenvalue.
    pub stable_basis: DMatrix<f64>,
}

/// A located non-degenerate critical point.
#[derive(Clone, Debug)]
pub struct CriticalPoint {
    pub location: Point,
    pub value: f64,
    pub index: usize,
    pub eigenvalues: Vec<f64>,
    pub margin: f64,
    pub unstable_basis: DMatrix<f64>,
    pub stable_basis: DMatrix<f64>,
}

impl CriticalPoint {
    pub fn dim(&self) -> usize {
        self.location.len()
    }

    /// Coordinates of `v` in the unstable eigenbasis.
    pub fn unstable_coords(&self, v: &Point) -> Point {
        self.unstable_basis.transpose() * v
    }

    /// Coordinates of `v` in the stable eigenbasis.
    pub fn stable_coords(&self, v: &Point) -> Point {
        self.stable_basis.transpose() * v
    }

    /// Hessian rebuilt from the spectral data.
    pub fn hessian(&self) -> DMatrix<f64> {
        let k = self.index;
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..k {
            let v = self.unstable_basis.column(i);
            h += self.eigenvalues[i] * v * v.transpose();
        }
        for i in 0..(n - k) {
            let v = self.stable_basis.column(i);
            h += self.eigenvalues[k + i] * v * v.transpose();
        }
        h
    }
}

fn canonical_sign(mut v: Point) -> Point {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
    v
}

/// Index, spectrum and eigenbases of the Hessian at a critical point.
pub fn morse_data(field: &ScalarField, x: &Point) -> Result<MorseData, FieldError> {
    let x = field.domain().check(x)?;
    let g = field.gradient(&x).norm();
    if g > field.critical_tolerance() {
        return Err(FieldError::NotCritical(g));
    }
    let h = field.hessian(&x);
    let sym = (&h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let largest = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let margin = eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let threshold = DEGENERACY_RATIO * largest;
    if largest == 0.0 || margin < threshold {
        return Err(FieldError::Degenerate { margin, threshold });
    }
    let index = eigenvalues.iter().filter(|v| **v < 0.0).count();
    let vectors: Vec<Point> = order
        .iter()
        .map(|&i| canonical_sign(eig.eigenvectors.column(i).into_owned()))
        .collect();
    let basis = |cols: &[Point]| {
        if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(cols)
        }
    };
    Ok(MorseData {
        index,
        eigenvalues,
        margin,
        unstable_basis: basis(&vectors[..index]),
        stable_basis: basis(&vectors[index..]),
    })
}

fn newton_step(h: &DMatrix<f64>, g: &Point) -> Point {
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let largest = eig.eigenvalues.amax();
    let mut step = Point::zeros(g.len());
    for i in 0..g.len() {
        let lambda = eig.eigenvalues[i];
        if lambda.abs() > 1e-14 * largest {
            let v = eig.eigenvectors.column(i);
            step -= v * (v.dot(g) / lambda);
        }
    }
    step
}

/// Damped Newton iteration on `grad f = 0` from `seed`, returning the wrapped
/// limit point and the final residual.
fn newton(field: &ScalarField, seed: &Point) -> Result<(Point, f64, usize), FieldError> {
    let domain = field.domain();
    let mut x = domain.check(seed)?;
    let mut g = field.gradient(&x);
    let mut gn = g.norm();
    let tol = field.newton_tolerance();
    let mut iterations = 0;
    while gn > tol && iterations < NEWTON_MAX_ITER {
        iterations += 1;
        let step = newton_step(&field.hessian(&x), &g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = domain.wrap(&(&x + &step * t));
            let gc = field.gradient(&cand);
            if gc.norm() < gn {
                accepted = Some((cand, gc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, gc)) => {
                x = cand;
                gn = gc.norm();
                g = gc;
            }
            None => break,
        }
    }
    Ok((x, gn, iterations))
}

/// Locates a non-degenerate critical point by damped Newton from `seed`.
pub fn find_critical(field: &ScalarField, seed: &Point) -> Result<CriticalPoint, FieldError> {
    let (x, residual, iterations) = newton(field, seed)?;
    if residual > field.newton_tolerance() || !field.domain().contains(&x) {
        return Err(FieldError::NotFound {
            seed: seed.iter().copied().collect(),
            residual,
            iterations,
        });
    }
    let m = morse_data(field, &x)?;
    Ok(CriticalPoint {
        value: field.value(&x),
        location: x,
        index: m.index,
        eigenvalues: m.eigenvalues,
        margin: m.margin,
        unstable_basis: m.unstable_basis,
        stable_basis: m.stable_basis,
    })
}

/// Outcome of the multi-start isolation test.
#[derive(Clone, Debug, Serialize)]
pub struct IsolationReport {
    pub isolated: bool,
    pub seeds: usize,
    pub converged: usize,
    /// Distinct critical points other than `x` found inside the band.
    pub foreign: Vec<Vec<f64>>,
}

/// Multi-start Newton from quasi-random seeds in `f^{-1}[c - eps, c + eps]`;
/// isolated iff every critical point found in the band coincides with `x`.
pub fn verify_isolation(field: &ScalarField, x: &Point, eps: f64, probe_count: usize) -> IsolationReport {
    let domain = field.domain();
    let c = field.value(x);
    let n = field.dim();
    let mut seeds = Vec::with_capacity(probe_count);
    let mut i = 1u64;
    while seeds.len() < probe_count && i <= 200 * probe_count.max(1) as u64 {
        let p = domain.at_unit(&halton(i, n));
        let v = field.value(&p);
        if v >= c - eps && v <= c + eps {
            seeds.push(p);
        }
        i += 1;
    }
    let tol = field.newton_tolerance();
    let limits: Vec<Option<Point>> = seeds
        .par_iter()
        .map(|s| match newton(field, s) {
            Ok((y, r, _)) if r <= tol && domain.contains(&y) => Some(y),
            _ => None,
        })
        .collect();
    let mut foreign: Vec<Point> = Vec::new();
    let mut converged = 0;
    let slack = 1e-9 * (1.0 + c.abs());
    for y in limits.into_iter().flatten() {
        converged += 1;
        let v = field.value(&y);
        if v < c - eps - slack || v > c + eps + slack {
            continue;
        }
        if domain.distance(&y, x) <= COINCIDENCE_TOL {
            continue;
        }
        if foreign.iter().all(|z| domain.distance(z, &y) > COINCIDENCE_TOL) {
            foreign.push(y);
        }
    }
    IsolationReport {
        isolated: foreign.is_empty(),
        seeds: seeds.len(),
        converged,
        foreign: foreign.into_iter().map(|p| p.iter().copied().collect()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pt(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    struct ValueOnly(TermField);

    impl FieldFn for ValueOnly {
        fn value(&self, p: &Point) -> f64 {
            self.0.value(p)
        }
    }

    #[test]
    fn model_probe() {
        let f = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        let pr = f.probe(&pt(&[1.0, 1.0])).unwrap();
        assert_eq!(pr.value, 0.0);
        assert_eq!(pr.gradient, pt(&[-1.0, 1.0]));
        assert_eq!(pr.hessian, DMatrix::from_diagonal(&pt(&[-1.0, 1.0])));
        let pr = f.probe(&pt(&[-1.7, 0.3])).unwrap();
        assert_eq!(pr.hessian, DMatrix::from_diagonal(&pt(&[-1.0, 1.0])));
    }

    #[test]
    fn torus_probe() {
        let f = ScalarField::torus().unwrap();
        let pr = f.probe(&pt(&[0.0, PI])).unwrap();
        assert_abs_diff_eq!(pr.value, 0.5, epsilon = 1e-15);
        assert!(pr.gradient.norm() < 1e-15);
        // wrapping: -pi and pi are the same point
        let pr2 = f.probe(&pt(&[2.0 * PI, -PI])).unwrap();
        assert_abs_diff_eq!(pr2.value, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn probe_outside_box_is_domain_error() {
        let f = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        assert!(matches!(f.probe(&pt(&[2.5, 0.0])), Err(FieldError::OutOfDomain { axis: 0, .. })));
        assert!(matches!(f.probe(&pt(&[0.0])), Err(FieldError::Dimension { .. })));
    }

    #[test]
    fn finite_difference_fallback_matches_analytic() {
        let terms = ScalarField::double_well(2.0).unwrap();
        let tf = TermField::new(
            2,
            vec![
                Term::new(1.0, vec![Factor::Pow { axis: 0, exp: 4 }]),
                Term::new(-2.0, vec![Factor::Pow { axis: 0, exp: 2 }]),
                Term::constant(1.0),
                Term::new(1.0, vec![Factor::Pow { axis: 1, exp: 2 }]),
            ],
        )
        .unwrap();
        let fd = ScalarField::new("dw-fd", Domain::cube(2, 2.0), Arc::new(ValueOnly(tf))).unwrap();
        assert!(!fd.has_analytic_gradient());
        for p in [pt(&[0.3, -0.2]), pt(&[1.1, 0.7]), pt(&[-1.5, 1.9])] {
            let a = terms.probe(&p).unwrap();
            let b = fd.probe(&p).unwrap();
            assert!((a.gradient - b.gradient).norm() < 1e-6 * (1.0 + a.value.abs()));
            assert!((&a.hessian - &b.hessian).amax() < 1e-3);
            assert!((&b.hessian - b.hessian.transpose()).amax() < 1e-4);
        }
    }

    #[test]
    fn find_critical_catalog() {
        let m = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        let cp = find_critical(&m, &pt(&[0.2, -0.1])).unwrap();
        assert!(cp.location.norm() < 1e-12);
        assert_eq!(cp.value, 0.0);
        assert_eq!(cp.index, 1);

        let dw = ScalarField::double_well(2.0).unwrap();
        let cp = find_critical(&dw, &pt(&[0.9, 0.1])).unwrap();
        assert!((cp.location.clone() - pt(&[1.0, 0.0])).norm() < 1e-10);
        assert!(cp.value.abs() < 1e-15);
        assert_eq!(cp.index, 0);

        let t = ScalarField::torus().unwrap();
        let cp = find_critical(&t, &pt(&[0.3, 3.0])).unwrap();
        assert!(t.domain().distance(&cp.location, &pt(&[0.0, PI])) < 1e-10);
        assert_abs_diff_eq!(cp.value, 0.5, epsilon = 1e-12);
        assert_eq!(cp.index, 1);
    }

    #[test]
    fn morse_data_examples() {
        let m = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        let d = morse_data(&m, &pt(&[0.0, 0.0])).unwrap();
        assert_eq!(d.index, 1);
        assert_eq!(d.eigenvalues, vec![-1.0, 1.0]);
        assert_eq!(d.margin, 1.0);
        assert_eq!(d.unstable_basis.column(0).into_owned(), pt(&[1.0, 0.0]));
        assert_eq!(d.stable_basis.column(0).into_owned(), pt(&[0.0, 1.0]));

        let t = ScalarField::torus().unwrap();
        let d = morse_data(&t, &pt(&[0.0, 0.0])).unwrap();
        assert_eq!(d.index, 2);
        assert_abs_diff_eq!(d.eigenvalues[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.eigenvalues[1], -0.5, epsilon = 1e-14);

        let m3 = ScalarField::model(3, 2, 1.0, 2.0).unwrap();
        let d = morse_data(&m3, &pt(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(d.index, 2);
        assert_eq!(d.unstable_basis.ncols(), 2);
        assert_eq!(d.stable_basis.ncols(), 1);
    }

    #[test]
    fn degenerate_and_noncritical_errors() {
        // x^4 + y^2 has a degenerate minimum at the origin
        let f = ScalarField::from_terms(
            "quartic",
            Domain::cube(2, 1.0),
            vec![
                Term::new(1.0, vec![Factor::Pow { axis: 0, exp: 4 }]),
                Term::new(1.0, vec![Factor::Pow { axis: 1, exp: 2 }]),
            ],
        )
        .unwrap();
        assert!(matches!(morse_data(&f, &pt(&[0.0, 0.0])), Err(FieldError::Degenerate { .. })));
        assert!(matches!(morse_data(&f, &pt(&[0.5, 0.0])), Err(FieldError::NotCritical(_))));
    }

    #[test]
    fn newton_failure_is_not_found() {
        // exp-free field with no critical point: f = x + y
        let f = ScalarField::from_terms(
            "plane",
            Domain::cube(2, 1.0),
            vec![
                Term::new(1.0, vec![Factor::Pow { axis: 0, exp: 1 }]),
                Term::new(1.0, vec![Factor::Pow { axis: 1, exp: 1 }]),
            ],
        )
        .unwrap();
        assert!(matches!(find_critical(&f, &pt(&[0.1, 0.1])), Err(FieldError::NotFound { .. })));
    }

    #[test]
    fn isolation_examples() {
        let m = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        assert!(verify_isolation(&m, &pt(&[0.0, 0.0]), 1.0, 64).isolated);

        let t = ScalarField::torus().unwrap();
        let x = pt(&[0.0, PI]);
        let r = verify_isolation(&t, &x, 0.3, 64);
        assert!(r.isolated, "{r:?}");
        let r = verify_isolation(&t, &x, 1.2, 128);
        assert!(!r.isolated);
        let found: Vec<Point> = r.foreign.iter().map(|v| pt(v)).collect();
        assert!(found.iter().any(|p| t.domain().distance(p, &pt(&[PI, 0.0])) < 1e-6));
        assert!(found.iter().any(|p| t.domain().distance(p, &pt(&[0.0, 0.0])) < 1e-6));
    }

    #[test]
    fn periodic_terms_are_validated() {
        let bad = ScalarField::from_terms(
            "bad",
            Domain::torus(1),
            vec![Term::new(1.0, vec![Factor::Pow { axis: 0, exp: 2 }])],
        );
        assert!(bad.is_err());
        let bad = ScalarField::from_terms(
            "bad",
            Domain::torus(1),
            vec![Term::new(1.0, vec![Factor::Cos { axis: 0, freq: 0.5 }])],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn term_schema_round_trip() {
        let json = r#"{"coef": 0.5, "factors": [{"kind": "cos", "axis": 1, "freq": 1.0}, {"kind": "pow", "axis": 0, "exp": 2}]}"#;
        let t: Term = serde_json::from_str(json).unwrap();
        assert_eq!(t.factors.len(), 2);
        let bad = r#"{"coef": 0.5, "factors": [{"kind": "cos", "axis": 1, "freq": 1.0, "phase": 2}]}"#;
        assert!(serde_json::from_str::<Term>(bad).is_err());
    }
}
