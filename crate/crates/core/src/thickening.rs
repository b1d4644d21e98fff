//! The Conley block `N = {f <= c+eps} ∩ {f∘phi_tau >= c-eps}` (component of
//! `x`) together with its stable fibration.
//!
//! Fibers are addressed by `(T, d, w)`: `T` is the time label, `d` a unit
//! vector parametrising the descending sphere `S^u` in the lower level set and
//! `w` an offset in the normal disk of `S^u` at `q = Q(d)`. A fiber point is
//! `phi_{-T}(exit(d, w))` where `exit(d, w)` sits in the lower level set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::field::{verify_isolation, CriticalPoint, FieldError, Point, ScalarField};
use crate::flow::{component_norm, Crossing, FlowConfig, FlowError, GradientFlow, Termination};
use crate::util::{complement_basis, halton, illinois_root, orthonormalize, polar_orthonormalize, sphere_directions};

/// Relative size of the start sphere for unstable traces.
const START_RADIUS: f64 = 1e-6;
/// Step for finite differences of the sphere parametrisation.
const SPHERE_FD_STEP: f64 = 1e-4;
/// Slack on `T >= tau` in the membership test.
const LABEL_SLACK: f64 = 1e-8;
/// Tube radius relative to the largest entrance offset.
const TUBE_MARGIN: f64 = 1.05;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("invalid block parameters: {0}")]
    Config(String),
    #[error("critical point is not isolated in the band: found {0:?}")]
    NotIsolated(Vec<Vec<f64>>),
    #[error("eps too large: {0}")]
    EpsTooLarge(String),
    #[error("tau too small: {0}")]
    TauTooSmall(String),
    #[error("point is not in the block")]
    NotMember,
    #[error("point lies on the stable manifold; its label is infinite")]
    InfiniteLabel,
    #[error("normal offset {offset} exceeds tube radius {radius}")]
    OutsideTube { offset: f64, radius: f64 },
    #[error("out of range: {0}")]
    Range(String),
    #[error("geometry failure: {0}")]
    Geometry(String),
}

/// Extended real label in `[tau, inf]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Finite(f64),
    Infinite,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Finite(t) => t,
            Label::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Label::Infinite)
    }
}

/// Flood-fill grid resolution per dimension.
pub struct BlockMesh;

impl BlockMesh {
    pub fn for_dim(n: usize) -> usize {
        match n {
            1 => 513,
            2 => 129,
            3 => 41,
            4 => 17,
            _ => 9,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockConfig {
    pub flow: FlowConfig,
    /// Connectivity grid nodes per axis.
    pub mesh: usize,
    /// Samples of the descending sphere (ignored for index 1).
    pub sphere_samples: usize,
    /// Normal directions per sphere sample (ignored for codimension 1).
    pub rays: usize,
    /// Entrance samples per ray.
    pub radial: usize,
    /// Largest entrance label, in units of tau.
    pub label_top: f64,
    /// Levels per trace in the invariant disk meshes.
    pub disk_levels: usize,
    pub isolation_probes: usize,
    pub check_admissibility: bool,
}

impl BlockConfig {
    pub fn new(n: usize, k: usize, tau: f64) -> Self {
        BlockConfig {
            flow: FlowConfig::for_tau(tau),
            mesh: BlockMesh::for_dim(n),
            sphere_samples: match k {
                0 | 1 => 2,
                2 => 32,
                _ => 64,
            },
            rays: if n - k.min(n) <= 2 { 16 } else { 32 },
            radial: 32,
            label_top: 6.0,
            disk_levels: 16,
            isolation_probes: 64,
            check_admissibility: true,
        }
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        self.flow.validate()?;
        if self.mesh < 3 || self.mesh > 4097 {
            return Err(BlockError::Config(format!("mesh must lie in [3, 4097], got {}", self.mesh)));
        }
        if self.sphere_samples < 2 || self.rays < 2 || self.radial < 2 || self.disk_levels < 1 {
            return Err(BlockError::Config("sample counts must be at least 2".into()));
        }
        if !(self.label_top > 1.0) {
            return Err(BlockError::Config("label_top must exceed 1".into()));
        }
        Ok(())
    }
}

/// Normal-disk chart of the tube at one point of the descending sphere.
#[derive(Clone, Debug)]
pub struct Chart {
    pub d: DVector<f64>,
    pub q: Point,
    /// Unit `grad f(q)`.
    pub normal: Point,
    /// Orthonormal basis of `T_q S^u` (`n x (k-1)`).
    pub tangent: DMatrix<f64>,
    /// Orthonormal frame of the normal disk (`n x (n-k)`).
    pub frame: DMatrix<f64>,
}

/// Point of the block given in fiber coordinates.
#[derive(Clone, Debug)]
pub struct FiberCoordinates {
    pub t: f64,
    pub d: DVector<f64>,
    pub q: Point,
    pub w: DVector<f64>,
}

/// Sample of the entrance set: a point of `N` on the upper level with finite
/// label, produced from a normal offset at a sphere sample.
#[derive(Clone, Debug)]
pub struct EntranceSample {
    pub point: Point,
    pub label: f64,
    pub sphere: usize,
    pub ray: usize,
    pub w: DVector<f64>,
    /// Where the orbit meets the lower level.
    pub exit: Point,
}

/// Sample of a traced invariant disk.
#[derive(Clone, Debug, Serialize)]
pub struct DiskSample {
    pub point: Vec<f64>,
    /// Index of the start direction.
    pub trace: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiskMesh {
    pub intrinsic_dim: usize,
    pub samples: Vec<DiskSample>,
}

/// Grid flood fill of the level conditions, starting at `x`.
#[derive(Clone, Debug)]
pub struct Component {
    nodes: usize,
    lower: Vec<f64>,
    step: Vec<f64>,
    periodic: Vec<bool>,
    member: Vec<bool>,
    reached: Vec<bool>,
}

impl Component {
    fn node_count(&self) -> usize {
        self.member.len()
    }

    fn index_of(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.nodes + i)
    }

    fn coords_of(&self, mut flat: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.lower.len());
        for _ in 0..self.lower.len() {
            out.push(flat % self.nodes);
            flat /= self.nodes;
        }
        out
    }

    fn node_point(&self, idx: &[usize]) -> Point {
        Point::from_iterator(idx.len(), idx.iter().enumerate().map(|(a, &i)| self.lower[a] + i as f64 * self.step[a]))
    }

    fn nearest(&self, p: &Point) -> Vec<isize> {
        (0..p.len())
            .map(|a| ((p[a] - self.lower[a]) / self.step[a]).round() as isize)
            .collect()
    }

    fn normalize(&self, idx: &[isize]) -> Option<Vec<usize>> {
        let m = self.nodes as isize;
        idx.iter()
            .enumerate()
            .map(|(a, &i)| {
                if self.periodic[a] {
                    Some(i.rem_euclid(m) as usize)
                } else if (0..m).contains(&i) {
                    Some(i as usize)
                } else {
                    None
                }
            })
            .collect()
    }

    fn neighbourhood(&self, center: &[isize], radius: isize) -> Vec<usize> {
        let n = center.len();
        let width = (2 * radius + 1) as usize;
        let mut out = Vec::new();
        for code in 0..width.pow(n as u32) {
            let mut c = code;
            let idx: Vec<isize> = (0..n)
                .map(|a| {
                    let o = (c % width) as isize - radius;
                    c /= width;
                    center[a] + o
                })
                .collect();
            if let Some(u) = self.normalize(&idx) {
                out.push(self.index_of(&u));
            }
        }
        out
    }

    /// True iff a node of the `3^n` neighbourhood of the nearest node was
    /// reached by the flood fill.
    pub fn connected(&self, p: &Point) -> bool {
        let c = self.nearest(p);
        self.neighbourhood(&c, 1).into_iter().any(|i| self.reached[i])
    }

    pub fn reached_count(&self) -> usize {
        self.reached.iter().filter(|&&r| r).count()
    }

    pub fn member_count(&self) -> usize {
        self.member.iter().filter(|&&r| r).count()
    }

    /// Reached nodes with at least one axis neighbour outside the component.
    pub fn boundary_nodes(&self) -> Vec<Point> {
        let n = self.lower.len();
        (0..self.node_count())
            .filter(|&i| self.reached[i])
            .filter(|&i| {
                let c = self.coords_of(i);
                (0..n).any(|a| {
                    [-1isize, 1].iter().any(|&s| {
                        let mut idx: Vec<isize> = c.iter().map(|&v| v as isize).collect();
                        idx[a] += s;
                        match self.normalize(&idx) {
                            Some(u) => !self.reached[self.index_of(&u)],
                            None => true,
                        }
                    })
                })
            })
            .map(|i| self.node_point(&self.coords_of(i)))
            .collect()
    }
}

/// Isolating block with its sampled invariant sets and fiber charts.
#[derive(Clone, Debug)]
pub struct ConleyBlock {
    field: ScalarField,
    flow: GradientFlow,
    critical: CriticalPoint,
    eps: f64,
    tau: f64,
    config: BlockConfig,
    start_radius: f64,
    sphere_horizon: f64,
    charts: Vec<Chart>,
    rays: Vec<DVector<f64>>,
    rho_d: f64,
    component: Component,
    entrance: Vec<EntranceSample>,
    discarded_entrance: usize,
    unstable_disk: DiskMesh,
    stable_disk: DiskMesh,
}

/// Builds a block with default configuration.
pub fn build_block(field: &ScalarField, critical: &CriticalPoint, eps: f64, tau: f64) -> Result<ConleyBlock, BlockError> {
    let config = BlockConfig::new(field.dim(), critical.index, tau);
    build_block_with_config(field, critical, eps, tau, config)
}

pub fn build_block_with_config(
    field: &ScalarField,
    critical: &CriticalPoint,
    eps: f64,
    tau: f64,
    config: BlockConfig,
) -> Result<ConleyBlock, BlockError> {
    if !(eps > 0.0 && eps.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
        return Err(BlockError::Config(format!("eps and tau must be positive, got eps={eps}, tau={tau}")));
    }
    config.validate()?;
    if critical.dim() != field.dim() {
        return Err(BlockError::Config("critical point dimension does not match the field".into()));
    }
    let iso = verify_isolation(field, &critical.location, eps, config.isolation_probes);
    if !iso.isolated {
        return Err(BlockError::NotIsolated(iso.foreign));
    }
    if config.check_admissibility {
        check_admissibility(field, critical, eps)?;
    }
    let flow = GradientFlow::new(field.clone(), config.flow.clone())?;
    let radius = (2.0 * eps / critical.margin).sqrt();
    let start_radius = START_RADIUS * radius;
    let k = critical.index;
    let lambda_min = critical.eigenvalues[..k].iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let sphere_horizon = if k > 0 {
        config.flow.horizon.max(4.0 * (radius / start_radius).ln() / lambda_min)
    } else {
        config.flow.horizon
    };
    let n = field.dim();
    let rays = if n > k { sphere_directions(n - k, config.rays) } else { Vec::new() };
    let mut block = ConleyBlock {
        field: field.clone(),
        flow,
        critical: critical.clone(),
        eps,
        tau,
        start_radius,
        sphere_horizon,
        charts: Vec::new(),
        rays,
        rho_d: 0.0,
        component: Component {
            nodes: 0,
            lower: Vec::new(),
            step: Vec::new(),
            periodic: Vec::new(),
            member: Vec::new(),
            reached: Vec::new(),
        },
        entrance: Vec::new(),
        discarded_entrance: 0,
        unstable_disk: DiskMesh {
            intrinsic_dim: k,
            samples: Vec::new(),
        },
        stable_disk: DiskMesh {
            intrinsic_dim: n - k,
            samples: Vec::new(),
        },
        config,
    };
    block.component = block.flood_fill()?;
    let dirs = sphere_directions(k, block.config.sphere_samples);
    block.charts = dirs
        .par_iter()
        .map(|d| block.chart(d))
        .collect::<Result<Vec<_>, _>>()?;
    block.unstable_disk = block.trace_unstable_disk()?;
    block.stable_disk = block.trace_stable_disk()?;
    block.sample_entrance()?;
    Ok(block)
}

/// Samples the quadratic remainder on the ball of radius `sqrt(2 eps/margin)`.
fn check_admissibility(field: &ScalarField, cp: &CriticalPoint, eps: f64) -> Result<(), BlockError> {
    let n = field.dim();
    let radius = (2.0 * eps / cp.margin).sqrt();
    let h_mat = cp.hessian();
    let domain = field.domain();
    for i in 1..=256u64 {
        let u = halton(i, n + 1);
        // direction from a Gaussian-ish transform, radius by the last coordinate
        let dir: DVector<f64> = DVector::from_iterator(n, u[..n].iter().map(|v| 2.0 * v - 1.0));
        if dir.norm() < 1e-3 {
            continue;
        }
        let h = dir.normalize() * (radius * u[n].max(0.05));
        let p = &cp.location + &h;
        if !domain.contains(&p) {
            continue;
        }
        let rem = field.value(&p) - cp.value - 0.5 * h.dot(&(&h_mat * &h));
        let bound = 0.25 * cp.margin * h.norm_squared();
        if rem.abs() >= bound {
            return Err(BlockError::EpsTooLarge(format!(
                "quadratic remainder {rem:e} at offset {:.4} exceeds margin/4 |h|^2 = {bound:e}",
                h.norm()
            )));
        }
    }
    Ok(())
}

impl ConleyBlock {
    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn flow(&self) -> &GradientFlow {
        &self.flow
    }

    pub fn critical(&self) -> &CriticalPoint {
        &self.critical
    }

    pub fn x(&self) -> &Point {
        &self.critical.location
    }

    pub fn c(&self) -> f64 {
        self.critical.value
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn index(&self) -> usize {
        self.critical.index
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn lower_level(&self) -> f64 {
        self.c() - self.eps
    }

    pub fn upper_level(&self) -> f64 {
        self.c() + self.eps
    }

    pub fn tol_event(&self) -> f64 {
        self.flow.config().tol_event
    }

    pub fn horizon(&self) -> f64 {
        self.flow.config().horizon
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn tube_radius(&self) -> f64 {
        self.rho_d
    }

    pub fn charts(&self) -> &[Chart] {
        &self.charts
    }

    /// Points of the sampled descending sphere.
    pub fn sphere_points(&self) -> Vec<Point> {
        self.charts.iter().map(|c| c.q.clone()).collect()
    }

    pub fn rays(&self) -> &[DVector<f64>] {
        &self.rays
    }

    pub fn entrance(&self) -> &[EntranceSample] {
        &self.entrance
    }

    pub fn discarded_entrance(&self) -> usize {
        self.discarded_entrance
    }

    pub fn component(&self) -> &Component {
        &self.component
    }

    pub fn unstable_disk(&self) -> &DiskMesh {
        &self.unstable_disk
    }

    pub fn stable_disk(&self) -> &DiskMesh {
        &self.stable_disk
    }

    pub fn delta(&self, from: &Point, to: &Point) -> Point {
        self.field.domain().delta(from, to)
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        self.field.domain().distance(a, b)
    }

    /// `|U^T (p - x)|`.
    pub fn unstable_component(&self, p: &Point) -> f64 {
        component_norm(&self.critical.unstable_basis, &self.delta(self.x(), p))
    }

    /// `S^T (p - x)`.
    pub fn stable_coords(&self, p: &Point) -> DVector<f64> {
        let s = &self.critical.stable_basis;
        if s.ncols() == 0 {
            DVector::zeros(0)
        } else {
            s.transpose() * self.delta(self.x(), p)
        }
    }

    fn flood_fill(&self) -> Result<Component, BlockError> {
        let d = self.field.domain();
        let n = d.dim();
        let nodes = self.config.mesh;
        let step: Vec<f64> = (0..n)
            .map(|a| {
                if d.periodic[a] {
                    d.width(a) / nodes as f64
                } else {
                    d.width(a) / (nodes - 1) as f64
                }
            })
            .collect();
        let mut comp = Component {
            nodes,
            lower: d.lower.clone(),
            step,
            periodic: d.periodic.clone(),
            member: Vec::new(),
            reached: Vec::new(),
        };
        let total = nodes.checked_pow(n as u32).filter(|&t| t <= 50_000_000).ok_or_else(|| {
            BlockError::Config(format!("connectivity grid {nodes}^{n} is too large"))
        })?;
        comp.member = (0..total)
            .into_par_iter()
            .map(|i| {
                let p = comp.node_point(&comp.coords_of(i));
                self.level_conditions(&p).unwrap_or(false)
            })
            .collect();
        comp.reached = vec![false; total];
        let mut queue = std::collections::VecDeque::new();
        let start = comp.nearest(self.x());
        for i in comp.neighbourhood(&start, 1) {
            if comp.member[i] && !comp.reached[i] {
                comp.reached[i] = true;
                queue.push_back(i);
            }
        }
        if queue.is_empty() {
            return Err(BlockError::Geometry("no connectivity node near x satisfies the block conditions".into()));
        }
        while let Some(i) = queue.pop_front() {
            let c = comp.coords_of(i);
            for a in 0..n {
                for s in [-1isize, 1] {
                    let mut idx: Vec<isize> = c.iter().map(|&v| v as isize).collect();
                    idx[a] += s;
                    if let Some(u) = comp.normalize(&idx) {
                        let j = comp.index_of(&u);
                        if comp.member[j] && !comp.reached[j] {
                            comp.reached[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        Ok(comp)
    }

    /// The two level inequalities defining the block, without connectivity.
    pub fn level_conditions(&self, p: &Point) -> Result<bool, BlockError> {
        if !self.field.domain().contains(p) {
            return Ok(false);
        }
        let tol = self.tol_event();
        let v = self.field.value(p);
        if v > self.upper_level() + tol || v < self.lower_level() - tol {
            return Ok(false);
        }
        Ok(match self.flow.hit_level_within(p, self.lower_level(), self.tau)? {
            Crossing::Hit { time, .. } => time >= self.tau - LABEL_SLACK,
            Crossing::Missed { termination, .. } => termination == Termination::Horizon,
        })
    }

    /// Block membership.
    pub fn contains(&self, p: &Point) -> Result<bool, BlockError> {
        Ok(self.level_conditions(p)? && self.component.connected(p))
    }

    /// Time to reach the lower level, infinite on the stable manifold. The
    /// infinite verdict requires the unstable component not to grow along the
    /// trajectory; otherwise the horizon is too short and that is an error.
    pub fn label_unchecked(&self, p: &Point) -> Result<Label, BlockError> {
        match self.flow.hit_level(p, self.lower_level())? {
            Crossing::Hit { time, .. } => Ok(Label::Finite(time)),
            Crossing::Missed { end, termination, closest } => {
                let start = self.unstable_component(p);
                let stop = self.unstable_component(&self.field.domain().wrap(&end));
                if termination == Termination::Horizon && stop <= start * (1.0 + 1e-9) + 1e-14 {
                    Ok(Label::Infinite)
                } else {
                    Err(FlowError::Horizon {
                        horizon: self.horizon(),
                        level: self.lower_level(),
                        closest,
                    }
                    .into())
                }
            }
        }
    }

    /// The time label of a block member.
    pub fn time_label(&self, p: &Point) -> Result<Label, BlockError> {
        if !self.contains(p)? {
            return Err(BlockError::NotMember);
        }
        self.label_unchecked(p)
    }

    /// Backward time from a lower-level point to the upper level, or
    /// infinite if the backward orbit does not get there within the horizon.
    pub fn backward_label(&self, e: &Point) -> Result<(Label, Option<Point>), BlockError> {
        match self.flow.hit_level_backward(e, self.upper_level(), self.horizon())? {
            Crossing::Hit { time, point } => Ok((Label::Finite(time), Some(self.field.domain().wrap(&point)))),
            Crossing::Missed { .. } => Ok((Label::Infinite, None)),
        }
    }

    /// Point where the unstable trace with direction `d` meets the lower
    /// level. Directions are mapped through the linearised flow so that for a
    /// quadratic field `Q(d)` is the point of the level ellipse along `d`.
    pub fn sphere_point(&self, d: &DVector<f64>) -> Result<Point, BlockError> {
        Ok(self.trace_sphere(d)?.1)
    }

    fn sphere_start(&self, d: &DVector<f64>) -> Point {
        let cp = &self.critical;
        let k = cp.index;
        let d = d.normalize();
        let a: Vec<f64> = (0..k).map(|i| d[i] * (2.0 * self.eps / cp.eigenvalues[i].abs()).sqrt()).collect();
        let t0 = (0..k)
            .filter(|&i| a[i] != 0.0)
            .map(|i| (a[i].abs() / self.start_radius).ln() / cp.eigenvalues[i].abs())
            .fold(0.0f64, f64::max);
        let coords = DVector::from_iterator(k, (0..k).map(|i| a[i] * (-cp.eigenvalues[i].abs() * t0).exp()));
        &cp.location + &cp.unstable_basis * coords
    }

    fn trace_sphere(&self, d: &DVector<f64>) -> Result<(Point, Point, f64), BlockError> {
        let start = self.sphere_start(d);
        match self.flow.hit_level_within(&start, self.lower_level(), self.sphere_horizon)? {
            Crossing::Hit { time, point } => Ok((start, self.field.domain().wrap(&point), time)),
            Crossing::Missed { .. } => Err(BlockError::EpsTooLarge(
                "unstable trace does not reach the lower level inside the support".into(),
            )),
        }
    }

    /// Tangent space of the sampled sphere at `Q(d)` by central differences.
    fn sphere_tangent(&self, d: &DVector<f64>) -> Result<DMatrix<f64>, BlockError> {
        let n = self.dim();
        let k = self.index();
        if k < 2 {
            return Ok(DMatrix::zeros(n, 0));
        }
        let basis = complement_basis(d);
        let mut cols = Vec::with_capacity(k - 1);
        for j in 0..basis.ncols() {
            let c = basis.column(j).into_owned();
            let qp = self.sphere_point(&(d + &c * SPHERE_FD_STEP).normalize())?;
            let qm = self.sphere_point(&(d - &c * SPHERE_FD_STEP).normalize())?;
            cols.push(self.delta(&qm, &qp) / (2.0 * SPHERE_FD_STEP));
        }
        let ortho = orthonormalize(&cols, 1e-8);
        if ortho.len() != k - 1 {
            return Err(BlockError::Geometry("descending sphere parametrisation is singular".into()));
        }
        Ok(DMatrix::from_columns(&ortho))
    }

    /// Tube chart at `Q(d)`.
    pub fn chart(&self, d: &DVector<f64>) -> Result<Chart, BlockError> {
        let n = self.dim();
        let d = d.normalize();
        let q = self.sphere_point(&d)?;
        let g = self.field.gradient(&q);
        let gn = g.norm();
        if gn == 0.0 {
            return Err(BlockError::Geometry("critical point on the lower level".into()));
        }
        let normal = g / gn;
        let tangent = self.sphere_tangent(&d)?;
        let mut span = vec![normal.clone()];
        span.extend(tangent.column_iter().map(|c| c.into_owned()));
        let span = orthonormalize(&span, 1e-10);
        let mut proj = DMatrix::<f64>::identity(n, n);
        for v in &span {
            proj -= v * v.transpose();
        }
        let frame = if self.critical.stable_basis.ncols() == 0 {
            DMatrix::zeros(n, 0)
        } else {
            polar_orthonormalize(&(proj * &self.critical.stable_basis))
        };
        Ok(Chart {
            d,
            q,
            normal,
            tangent,
            frame,
        })
    }

    fn cached_chart(&self, d: &DVector<f64>) -> Result<Chart, BlockError> {
        for c in &self.charts {
            if (&c.d - d).amax() <= 1e-14 {
                return Ok(c.clone());
            }
        }
        self.chart(d)
    }

    /// The point of the lower level over `q + B w`, found by a Newton solve
    /// along the unit normal of the level set at `q`.
    pub fn exit_in_chart(&self, chart: &Chart, w: &DVector<f64>) -> Result<Point, BlockError> {
        let target = self.lower_level();
        let base = if w.is_empty() { chart.q.clone() } else { &chart.q + &chart.frame * w };
        let mut t = 0.0;
        for _ in 0..60 {
            let e = &base + &chart.normal * t;
            let g = self.field.value(&e) - target;
            if g.abs() <= 1e-13 * (1.0 + target.abs()) {
                return self.finish_exit(e);
            }
            let slope = self.field.gradient(&e).dot(&chart.normal);
            if slope.abs() < 1e-14 {
                return Err(BlockError::Range("level set is tangent to the chart normal".into()));
            }
            let dt = -g / slope;
            t += dt;
            if dt.abs() <= 1e-15 * (1.0 + t.abs()) {
                return self.finish_exit(&base + &chart.normal * t);
            }
        }
        Err(BlockError::Range(format!("no lower-level point over offset |w| = {:.4}", w.norm())))
    }

    fn finish_exit(&self, e: Point) -> Result<Point, BlockError> {
        if !self.field.domain().contains(&e) {
            return Err(BlockError::Range("exit point outside the domain".into()));
        }
        Ok(self.field.domain().wrap(&e))
    }

    pub fn exit_point(&self, d: &DVector<f64>, w: &DVector<f64>) -> Result<Point, BlockError> {
        let chart = self.cached_chart(d)?;
        self.exit_in_chart(&chart, w)
    }

    /// Tubular projection of a lower-level point to `(d, q, w)`.
    pub fn project(&self, e: &Point) -> Result<(DVector<f64>, Point, DVector<f64>), BlockError> {
        if self.charts.is_empty() {
            return Err(BlockError::Geometry("descending sphere is empty".into()));
        }
        let nearest = self
            .charts
            .iter()
            .enumerate()
            .map(|(i, c)| (i, self.distance(&c.q, e)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("charts are non-empty");
        let chart = if self.index() >= 2 {
            self.refine_projection(e, self.charts[nearest].d.clone())?
        } else {
            self.charts[nearest].clone()
        };
        let w = if chart.frame.ncols() == 0 {
            DVector::zeros(0)
        } else {
            chart.frame.transpose() * self.delta(&chart.q, e)
        };
        Ok((chart.d, chart.q, w))
    }

    /// Gauss-Newton over the sphere minimising `|e - Q(d)|^2`.
    fn refine_projection(&self, e: &Point, mut d: DVector<f64>) -> Result<Chart, BlockError> {
        for _ in 0..30 {
            let q = self.sphere_point(&d)?;
            let basis = complement_basis(&d);
            let h = SPHERE_FD_STEP;
            let mut jac = DMatrix::zeros(self.dim(), basis.ncols());
            for j in 0..basis.ncols() {
                let c = basis.column(j).into_owned();
                let qp = self.sphere_point(&(&d + &c * h).normalize())?;
                let qm = self.sphere_point(&(&d - &c * h).normalize())?;
                jac.set_column(j, &(self.delta(&qm, &qp) / (2.0 * h)));
            }
            let r = self.delta(&q, e);
            let normal = jac.transpose() * &jac;
            let step = normal
                .cholesky()
                .ok_or_else(|| BlockError::Geometry("singular sphere Jacobian in projection".into()))?
                .solve(&(jac.transpose() * r));
            d = (&d + &basis * &step).normalize();
            if step.norm() < 1e-11 {
                break;
            }
        }
        self.cached_chart(&d)
    }

    /// Fiber coordinates of a point with finite label.
    pub fn fiber_coords(&self, p: &Point) -> Result<FiberCoordinates, BlockError> {
        let (t, e) = match self.flow.hit_level(p, self.lower_level())? {
            Crossing::Hit { time, point } => (time, self.field.domain().wrap(&point)),
            Crossing::Missed { .. } => return Err(BlockError::InfiniteLabel),
        };
        let (d, q, w) = self.project(&e)?;
        let offset = w.norm();
        if offset > self.rho_d * (1.0 + 1e-9) {
            return Err(BlockError::OutsideTube {
                offset,
                radius: self.rho_d,
            });
        }
        Ok(FiberCoordinates { t, d, q, w })
    }

    /// `phi_{-T}(exit(d, w))`.
    pub fn fiber_point(&self, t: f64, d: &DVector<f64>, w: &DVector<f64>) -> Result<Point, BlockError> {
        let e = self.exit_point(d, w)?;
        Ok(self.flow.flow_map(&e, -t)?)
    }

    /// The fiber point over `(T, d)` whose stable coordinates equal `zeta`.
    pub fn gamma(&self, t: f64, d: &DVector<f64>, zeta: &DVector<f64>) -> Result<Point, BlockError> {
        let m = self.dim() - self.index();
        if zeta.len() != m {
            return Err(BlockError::Range("stable coordinate vector has the wrong length".into()));
        }
        if m == 0 {
            return self.fiber_point(t, d, zeta);
        }
        let chart = self.cached_chart(d)?;
        let lambda = self.critical.eigenvalues[self.index()];
        let mut w = zeta * (-lambda * t).exp();
        if zeta.norm() > 0.0 && w.norm() < 1e3 * f64::EPSILON * (1.0 + chart.q.norm()) {
            return Err(BlockError::Range(format!("fiber offset at T = {t} is below double precision")));
        }
        let eval = |w: &DVector<f64>| -> Result<DVector<f64>, BlockError> {
            let e = self.exit_in_chart(&chart, w)?;
            let p = self.flow.flow_map(&e, -t)?;
            Ok(self.stable_coords(&p) - zeta)
        };
        let scale = 1.0 + zeta.norm();
        for _ in 0..40 {
            let r = eval(&w)?;
            if r.norm() <= 1e-11 * scale {
                return self.fiber_point(t, d, &w);
            }
            let h = 1e-7 * (1.0 + w.norm()) * (-lambda * t).exp().max(1e-6);
            let mut jac = DMatrix::zeros(m, m);
            for j in 0..m {
                let mut wp = w.clone();
                wp[j] += h;
                let mut wm = w.clone();
                wm[j] -= h;
                jac.set_column(j, &((eval(&wp)? - eval(&wm)?) / (2.0 * h)));
            }
            let step = jac
                .lu()
                .solve(&r)
                .ok_or_else(|| BlockError::Range("singular fiber Jacobian".into()))?;
            w -= step;
            if w.norm() > self.rho_d * (1.0 + 1e-9) {
                return Err(BlockError::Range(format!(
                    "stable coordinates {:?} outside the fiber's range",
                    zeta.as_slice()
                )));
            }
        }
        Err(BlockError::Range("fiber root-finding did not converge".into()))
    }

    /// Fiberwise semi-flow: shrinks the normal offset by `e^{-s}` keeping
    /// `(T, q)`; on the stable manifold it is the flow itself.
    pub fn theta_step(&self, p: &Point, s: f64) -> Result<Point, BlockError> {
        if s < 0.0 {
            return Err(BlockError::Range("theta is a semi-flow; s must be non-negative".into()));
        }
        if s == 0.0 {
            return Ok(p.clone());
        }
        match self.fiber_coords(p) {
            Ok(fc) => self.fiber_point(fc.t, &fc.d, &(fc.w * (-s).exp())),
            Err(BlockError::InfiniteLabel) => Ok(self.flow.flow_map(p, s)?),
            Err(e) => Err(e),
        }
    }

    /// Lower label of the exit over `(d, w)`.
    pub fn offset_label(&self, d: &DVector<f64>, w: &DVector<f64>) -> Result<Label, BlockError> {
        let e = self.exit_point(d, w)?;
        Ok(self.backward_label(&e)?.0)
    }

    fn chart_offset_label(&self, chart: &Chart, w: &DVector<f64>) -> Result<Label, BlockError> {
        let e = self.exit_in_chart(chart, w)?;
        Ok(self.backward_label(&e)?.0)
    }

    fn trace_unstable_disk(&self) -> Result<DiskMesh, BlockError> {
        let k = self.index();
        let levels = self.config.disk_levels;
        let mut samples = vec![DiskSample {
            point: self.x().iter().copied().collect(),
            trace: usize::MAX,
            value: self.c(),
        }];
        let traced: Vec<Vec<DiskSample>> = self
            .charts
            .par_iter()
            .enumerate()
            .map(|(i, ch)| {
                let start = self.sphere_start(&ch.d);
                (1..=levels)
                    .map(|j| {
                        let level = self.c() - self.eps * j as f64 / levels as f64;
                        match self.flow.hit_level_within(&start, level, self.sphere_horizon)? {
                            Crossing::Hit { point, .. } => {
                                let p = self.field.domain().wrap(&point);
                                Ok(DiskSample {
                                    value: self.field.value(&p),
                                    point: p.iter().copied().collect(),
                                    trace: i,
                                })
                            }
                            Crossing::Missed { .. } => {
                                Err(BlockError::EpsTooLarge("unstable disk trace left the block".into()))
                            }
                        }
                    })
                    .collect()
            })
            .collect::<Result<_, BlockError>>()?;
        samples.extend(traced.into_iter().flatten());
        Ok(DiskMesh {
            intrinsic_dim: k,
            samples,
        })
    }

    fn trace_stable_disk(&self) -> Result<DiskMesh, BlockError> {
        let cp = &self.critical;
        let m = self.dim() - cp.index;
        let levels = self.config.disk_levels;
        let mut samples = vec![DiskSample {
            point: self.x().iter().copied().collect(),
            trace: usize::MAX,
            value: self.c(),
        }];
        let lambda_min = cp.eigenvalues[cp.index..].iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        let horizon = if m > 0 {
            self.horizon().max(4.0 * (1.0 / START_RADIUS).ln() / lambda_min)
        } else {
            self.horizon()
        };
        let traced: Vec<Vec<DiskSample>> = self
            .rays
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                // linearised backward flow, mirroring the unstable traces
                let a: Vec<f64> = (0..m)
                    .map(|j| r[j] * (2.0 * self.eps / cp.eigenvalues[cp.index + j]).sqrt())
                    .collect();
                let t0 = (0..m)
                    .filter(|&j| a[j] != 0.0)
                    .map(|j| (a[j].abs() / self.start_radius).ln() / cp.eigenvalues[cp.index + j])
                    .fold(0.0f64, f64::max);
                let coords =
                    DVector::from_iterator(m, (0..m).map(|j| a[j] * (-cp.eigenvalues[cp.index + j] * t0).exp()));
                let start = &cp.location + &cp.stable_basis * coords;
                (1..=levels)
                    .map(|j| {
                        let level = self.c() + self.eps * j as f64 / levels as f64;
                        match self.flow.hit_level_backward(&start, level, horizon)? {
                            Crossing::Hit { point, .. } => {
                                let p = self.field.domain().wrap(&point);
                                Ok(DiskSample {
                                    value: self.field.value(&p),
                                    point: p.iter().copied().collect(),
                                    trace: i,
                                })
                            }
                            Crossing::Missed { .. } => {
                                Err(BlockError::EpsTooLarge("stable disk trace left the block".into()))
                            }
                        }
                    })
                    .collect()
            })
            .collect::<Result<_, BlockError>>()?;
        samples.extend(traced.into_iter().flatten());
        Ok(DiskMesh {
            intrinsic_dim: m,
            samples,
        })
    }

    /// Offset radius along a ray where the lower label equals `target`;
    /// labels decrease in the radius.
    fn radius_for_label(&self, chart: &Chart, ray: &DVector<f64>, target: f64, lo: f64, hi: f64) -> Result<f64, BlockError> {
        let g = |s: f64| -> Result<f64, BlockError> {
            let r = s.exp();
            Ok(match self.chart_offset_label(chart, &(ray * r))? {
                Label::Finite(t) => t - target,
                Label::Infinite => self.horizon() - target,
            })
        };
        illinois_root(g, lo.ln(), hi.ln(), 1e-13, 1e-11 * target.max(1.0), 200)?
            .map(f64::exp)
            .ok_or_else(|| BlockError::Geometry(format!("label {target} not bracketed on a normal ray")))
    }

    fn sample_entrance(&mut self) -> Result<(), BlockError> {
        if self.charts.is_empty() || self.rays.is_empty() {
            self.rho_d = 0.0;
            return Ok(());
        }
        let tau = self.tau;
        let top = self.config.label_top * tau;
        let radial = self.config.radial;
        let scale = (2.0 * self.eps).sqrt();
        let jobs: Vec<(usize, usize)> = (0..self.charts.len())
            .flat_map(|i| (0..self.rays.len()).map(move |j| (i, j)))
            .collect();
        let this = &*self;
        type RayOut = (f64, Vec<EntranceSample>, usize);
        let results: Vec<RayOut> = jobs
            .par_iter()
            .map(|&(i, j)| -> Result<RayOut, BlockError> {
                let chart = &this.charts[i];
                let ray = &this.rays[j];
                let label_at = |r: f64| -> Result<f64, BlockError> {
                    Ok(this.chart_offset_label(chart, &(ray * r))?.value())
                };
                // outer bracket: label below tau
                let mut hi = 0.1 * scale;
                let mut tries = 0;
                while label_at(hi)? >= tau {
                    hi *= 2.0;
                    tries += 1;
                    if tries > 40 {
                        return Err(BlockError::Geometry("no normal offset reaches the upper level quickly".into()));
                    }
                }
                // inner bracket: label above the top label
                let mut lo = 0.5 * hi;
                tries = 0;
                while label_at(lo)? <= top {
                    lo *= 0.5;
                    tries += 1;
                    if tries > 200 {
                        return Err(BlockError::Geometry("labels near the unstable manifold stay small".into()));
                    }
                }
                let r_max = this.radius_for_label(chart, ray, tau, lo, hi)?;
                let mut samples = Vec::with_capacity(radial);
                let mut dropped = 0;
                for m in 0..radial {
                    let target = tau + (top - tau) * m as f64 / (radial - 1) as f64;
                    let r = if m == 0 { r_max } else { this.radius_for_label(chart, ray, target, lo, r_max)? };
                    let w = ray * r;
                    let exit = this.exit_in_chart(chart, &w)?;
                    let (label, point) = this.backward_label(&exit)?;
                    let (Label::Finite(t), Some(p)) = (label, point) else {
                        dropped += 1;
                        continue;
                    };
                    if !this.component.connected(&p) {
                        dropped += 1;
                        continue;
                    }
                    samples.push(EntranceSample {
                        point: p,
                        label: t,
                        sphere: i,
                        ray: j,
                        w,
                        exit,
                    });
                }
                Ok((r_max, samples, dropped))
            })
            .collect::<Result<_, _>>()?;
        let r_max = results.iter().map(|r| r.0).fold(0.0f64, f64::max);
        self.rho_d = TUBE_MARGIN * r_max;
        self.discarded_entrance = results.iter().map(|r| r.2).sum();
        self.entrance = results.into_iter().flat_map(|r| r.1).collect();
        self.check_injectivity()
    }

    /// Re-projects exit points of the tube and requires the chart to be
    /// recovered.
    fn check_injectivity(&self) -> Result<(), BlockError> {
        let rho = self.rho_d;
        let jobs: Vec<(usize, usize, f64)> = (0..self.charts.len())
            .flat_map(|i| {
                (0..self.rays.len()).flat_map(move |j| [0.25, 0.5, 0.75, 1.0].into_iter().map(move |a| (i, j, a)))
            })
            .collect();
        jobs.par_iter().try_for_each(|&(i, j, a)| {
            let chart = &self.charts[i];
            let w = &self.rays[j] * (a * rho);
            let e = self.exit_in_chart(chart, &w).map_err(|err| {
                BlockError::TauTooSmall(format!("tube of radius {rho:.4} leaves the level set chart: {err}"))
            })?;
            let (d, _, w2) = self.project(&e)?;
            if (&d - &chart.d).norm() > 1e-6 || (&w2 - &w).norm() > 1e-6 * rho.max(1.0) {
                return Err(BlockError::TauTooSmall(format!(
                    "normal disks of radius {rho:.4} overlap; increase tau"
                )));
            }
            Ok(())
        })
    }

    /// Closest sampled sphere chart to a direction.
    pub fn nearest_chart(&self, d: &DVector<f64>) -> Option<&Chart> {
        self.charts
            .iter()
            .min_by(|a, b| (&a.d - d).norm().total_cmp(&(&b.d - d).norm()))
    }
}

/// Drift of fiber coordinates along the flow.
#[derive(Clone, Debug, Serialize)]
pub struct FiberInvarianceReport {
    pub pairs: usize,
    pub max_label_drift: f64,
    pub max_q_drift: f64,
    pub max_w_drift: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `fiber_coords(phi_s p) = (T - s, q, w)` on seeded random block
/// points and times `0 <= s <= T - tau`.
pub fn verify_fiber_invariance(block: &ConleyBlock, pairs: usize, seed: u64) -> Result<FiberInvarianceReport, BlockError> {
    let tolerance = 1e-6;
    if block.entrance().is_empty() {
        return Ok(FiberInvarianceReport {
            pairs: 0,
            max_label_drift: 0.0,
            max_q_drift: 0.0,
            max_w_drift: 0.0,
            tolerance,
            passed: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = block.tau();
    let draws: Vec<(usize, f64, f64)> = (0..pairs)
        .map(|_| {
            let i = rng.gen_range(0..block.entrance().len());
            (i, rng.gen::<f64>(), rng.gen::<f64>())
        })
        .collect();
    let drifts: Vec<(f64, f64, f64)> = draws
        .par_iter()
        .map(|&(i, a, b)| -> Result<(f64, f64, f64), BlockError> {
            let e = &block.entrance()[i];
            // start somewhere along the orbit inside N, then flow further
            let s0 = a * (e.label - tau);
            let p = block.flow().flow_map(&e.point, s0)?;
            let fc = block.fiber_coords(&p)?;
            let s = b * (fc.t - tau).max(0.0);
            let ps = block.flow().flow_map(&p, s)?;
            let fs = block.fiber_coords(&ps)?;
            Ok((
                (fs.t - (fc.t - s)).abs(),
                block.distance(&fs.q, &fc.q),
                (&fs.w - &fc.w).norm(),
            ))
        })
        .collect::<Result<_, _>>()?;
    let max = |f: fn(&(f64, f64, f64)) -> f64| drifts.iter().map(f).fold(0.0, f64::max);
    let (lt, lq, lw) = (max(|d| d.0), max(|d| d.1), max(|d| d.2));
    Ok(FiberInvarianceReport {
        pairs,
        max_label_drift: lt,
        max_q_drift: lq,
        max_w_drift: lw,
        tolerance,
        passed: lt <= tolerance && lq <= tolerance && lw <= tolerance,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaRow {
    pub t: f64,
    pub sup_distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaReport {
    pub rows: Vec<GammaRow>,
    pub probes: usize,
    pub decreasing: bool,
    pub threshold: f64,
    pub passed: bool,
}

/// Sup-distance of `gamma(T, q, zeta)` from the stable disk point with the
/// same stable coordinates, over stable-disk samples with `f <= c + eps/2`
/// and all sampled `q`, at each `T` in `multiples * tau`.
pub fn gamma_convergence(block: &ConleyBlock, multiples: &[f64]) -> Result<GammaReport, BlockError> {
    let half = block.c() + 0.5 * block.eps() + block.tol_event();
    let probes: Vec<Point> = block
        .stable_disk()
        .samples
        .iter()
        .filter(|s| s.value <= half)
        .map(|s| Point::from_column_slice(&s.point))
        .collect();
    let mut rows = Vec::with_capacity(multiples.len());
    for &m in multiples {
        let t = m * block.tau();
        let jobs: Vec<(usize, usize)> = (0..block.charts().len())
            .flat_map(|i| (0..probes.len()).map(move |j| (i, j)))
            .collect();
        let dists: Vec<f64> = jobs
            .par_iter()
            .map(|&(i, j)| -> Result<f64, BlockError> {
                let zeta = block.stable_coords(&probes[j]);
                let g = block.gamma(t, &block.charts()[i].d, &zeta)?;
                Ok(block.distance(&g, &probes[j]))
            })
            .collect::<Result<_, _>>()?;
        rows.push(GammaRow {
            t,
            sup_distance: dists.into_iter().fold(0.0, f64::max),
        });
    }
    let decreasing = rows.windows(2).all(|w| w[1].sup_distance < w[0].sup_distance);
    let threshold = 0.05 * (2.0 * block.eps()).sqrt();
    let passed = decreasing && rows.last().is_some_and(|r| r.sup_distance <= threshold);
    Ok(GammaReport {
        rows,
        probes: probes.len(),
        decreasing,
        threshold,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::find_critical;
    use approx::assert_abs_diff_eq;
    use std::sync::OnceLock;

    fn pt(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    pub(crate) fn model_block() -> &'static ConleyBlock {
        static BLOCK: OnceLock<ConleyBlock> = OnceLock::new();
        BLOCK.get_or_init(|| {
            let f = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
            let cp = find_critical(&f, &pt(&[0.1, 0.1])).unwrap();
            build_block(&f, &cp, 1.0, 1.0).unwrap()
        })
    }

    /// Closed-form label on the model block.
    fn label_oracle(u: f64, v: f64) -> f64 {
        0.5 * ((1.0 + (1.0 + u * u * v * v).sqrt()) / (u * u)).ln()
    }

    #[test]
    fn membership_examples() {
        let b = model_block();
        assert!(b.contains(&pt(&[0.44670, 1.48308])).unwrap());
        assert!(!b.contains(&pt(&[1.0, 0.0])).unwrap());
        assert!(b.contains(&pt(&[0.0, 0.0])).unwrap());
        assert!(!b.contains(&pt(&[0.0, 1.9])).unwrap());
    }

    #[test]
    fn sphere_and_disks() {
        let b = model_block();
        let s = b.sphere_points();
        assert_eq!(s.len(), 2);
        assert!((&s[0] - pt(&[2f64.sqrt(), 0.0])).norm() < 1e-9);
        assert!((&s[1] - pt(&[-(2f64.sqrt()), 0.0])).norm() < 1e-9);
        assert_eq!(b.unstable_disk().intrinsic_dim, 1);
        assert_eq!(b.stable_disk().intrinsic_dim, 1);
        for d in &b.stable_disk().samples {
            assert!(d.point[0].abs() < 1e-12);
            assert!(d.point[1].abs() <= 2f64.sqrt() + 1e-9);
        }
        let top = b.stable_disk().samples.iter().map(|d| d.point[1].abs()).fold(0.0, f64::max);
        assert_abs_diff_eq!(top, 2f64.sqrt(), epsilon = 1e-6);
        for d in &b.unstable_disk().samples {
            assert!(d.point[1].abs() < 1e-12);
        }
    }

    #[test]
    fn labels_match_closed_form() {
        let b = model_block();
        let p = pt(&[0.44670, 1.48308]);
        let Label::Finite(t) = b.time_label(&p).unwrap() else { panic!("finite expected") };
        assert_abs_diff_eq!(t, label_oracle(0.44670, 1.48308), epsilon = 1e-8);
        assert_abs_diff_eq!(t, 1.2, epsilon = 1e-5);
        assert_eq!(b.time_label(&pt(&[0.0, 0.5])).unwrap(), Label::Infinite);
        assert_eq!(b.time_label(&pt(&[0.0, 0.0])).unwrap(), Label::Infinite);
        assert!(matches!(b.time_label(&pt(&[1.0, 0.0])), Err(BlockError::NotMember)));
    }

    #[test]
    fn tube_radius_from_entrance_offsets() {
        let b = model_block();
        let r_max = (2.0 / (1f64.exp().powi(2) - 1.0)).sqrt();
        assert_abs_diff_eq!(b.tube_radius(), 1.05 * r_max, epsilon = 1e-8);
        assert!(!b.entrance().is_empty());
        for e in b.entrance() {
            assert_abs_diff_eq!(b.field().value(&e.point), 2.0 - 1.0, epsilon = 1e-9);
            assert!(e.label >= b.tau() - 1e-8);
            assert!(b.contains(&e.point).unwrap());
        }
    }

    #[test]
    fn fiber_coordinates_examples() {
        let b = model_block();
        let p = pt(&[0.44670, 1.48308]);
        let fc = b.fiber_coords(&p).unwrap();
        assert_abs_diff_eq!(fc.t, 1.2, epsilon = 1e-5);
        assert!((&fc.q - pt(&[2f64.sqrt(), 0.0])).norm() < 1e-9);
        assert_abs_diff_eq!(fc.w[0], 0.44670, epsilon = 1e-5);
        let p2 = b.flow().flow_map(&p, 0.1).unwrap();
        let fc2 = b.fiber_coords(&p2).unwrap();
        assert_abs_diff_eq!(fc2.t, fc.t - 0.1, epsilon = 1e-8);
        assert_abs_diff_eq!(fc2.w[0], fc.w[0], epsilon = 1e-8);
        assert!(matches!(b.fiber_coords(&pt(&[0.0, 1.0])), Err(BlockError::InfiniteLabel)));
        let back = b.fiber_point(fc.t, &fc.d, &fc.w).unwrap();
        assert!((back - p).norm() < 1e-6);
    }

    #[test]
    fn fiber_point_examples() {
        let b = model_block();
        let c = b.fiber_point(1.2, &dv(&[1.0]), &dv(&[0.0])).unwrap();
        assert_abs_diff_eq!(c[0], 2f64.sqrt() * (-1.2f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(c[0], 0.42595, epsilon = 1e-5);
        assert_abs_diff_eq!(c[1], 0.0, epsilon = 1e-15);
        let e = b.exit_point(&dv(&[1.0]), &dv(&[0.3])).unwrap();
        assert_abs_diff_eq!(e[0], (2.0f64 + 0.09).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(e[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn gamma_matches_fiber_graph() {
        let b = model_block();
        for (t, z) in [(2.0, 0.5), (4.0, -0.8), (1.5, 0.2)] {
            let g = b.gamma(t, &dv(&[1.0]), &dv(&[z])).unwrap();
            let u = (-t as f64).exp() * (2.0 + z * z * (-2.0 * t as f64).exp()).sqrt();
            assert_abs_diff_eq!(g[1], z, epsilon = 1e-8);
            assert_abs_diff_eq!(g[0], u, epsilon = 1e-8);
        }
        assert!(matches!(b.gamma(1.0, &dv(&[1.0]), &dv(&[5.0])), Err(BlockError::Range(_))));
    }

    #[test]
    fn theta_examples() {
        let b = model_block();
        let p = pt(&[0.44670, 1.48308]);
        let q = b.theta_step(&p, 2f64.ln()).unwrap();
        assert_abs_diff_eq!(q[0], 0.43123, epsilon = 2e-5);
        assert_abs_diff_eq!(q[1], 0.74155, epsilon = 2e-5);
        assert_eq!(b.theta_step(&p, 0.0).unwrap(), p);
        let far = b.theta_step(&p, 40.0).unwrap();
        assert!((far - b.fiber_point(1.2, &dv(&[1.0]), &dv(&[0.0])).unwrap()).norm() < 1e-5);
        // theta keeps the fiber and shrinks w
        let fc = b.fiber_coords(&p).unwrap();
        let fq = b.fiber_coords(&q).unwrap();
        assert_abs_diff_eq!(fq.t, fc.t, epsilon = 1e-8);
        assert_abs_diff_eq!(fq.w[0], 0.5 * fc.w[0], epsilon = 1e-8);
        // on the stable manifold theta is the flow
        let s = b.theta_step(&pt(&[0.0, 1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(s[1], (-1f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn invariance_and_gamma_reports() {
        let b = model_block();
        let r = verify_fiber_invariance(b, 20, 7).unwrap();
        assert!(r.passed, "{r:?}");
        let g = gamma_convergence(b, &[2.0, 4.0, 8.0]).unwrap();
        assert!(g.passed, "{g:?}");
    }

    #[test]
    fn bad_parameters() {
        let f = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        let cp = find_critical(&f, &pt(&[0.1, 0.1])).unwrap();
        assert!(matches!(build_block(&f, &cp, -1.0, 1.0), Err(BlockError::Config(_))));
        assert!(matches!(build_block(&f, &cp, 1.0, 0.0), Err(BlockError::Config(_))));
    }
}
