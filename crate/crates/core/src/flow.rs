//! Negative gradient flow `d/ds phi_s = -grad f (phi_s)` with level-set events.
//!
//! The vector field is multiplied by a smooth cutoff that equals one on the
//! domain box and vanishes on the boundary of a padded box, so the flow is
//! complete. Periodic axes are not cut off; states are integrated in unwrapped
//! coordinates and wrapped on output.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::field::{Point, ScalarField};

/// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MAX_STEPS: usize = 2_000_000;
const BISECTION_MAX_ITER: usize = 80;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("trajectory left the support of the cutoff at time {time} (state {state:?})")]
    Escaped { time: f64, state: Vec<f64> },
    #[error("level {level} is above the starting value {value}")]
    Precondition { value: f64, level: f64 },
    #[error("horizon {horizon} exceeded before reaching level {level} (closest value {closest})")]
    Horizon { horizon: f64, level: f64, closest: f64 },
    #[error("step size underflow at time {time}")]
    StepUnderflow { time: f64 },
    #[error("non-finite state at time {time}")]
    NonFinite { time: f64 },
    #[error("step limit reached at time {time}")]
    StepLimit { time: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowConfig {
    /// Relative integration tolerance; the absolute one is `1e-3` of it.
    pub tol_ode: f64,
    /// Tolerance in f-value for level events.
    pub tol_event: f64,
    /// Longest integration time before a level is declared unreachable.
    pub horizon: f64,
    /// Cutoff padding as a fraction of each non-periodic axis width.
    pub padding: f64,
    pub h_max: f64,
    /// Trajectories are declared escaped once the cutoff drops below this.
    pub escape_cutoff: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            tol_ode: 1e-9,
            tol_event: 1e-10,
            horizon: 50.0,
            padding: 0.25,
            h_max: 1.0,
            escape_cutoff: 1e-3,
        }
    }
}

impl FlowConfig {
    /// Defaults with the horizon at `50 tau`.
    pub fn for_tau(tau: f64) -> Self {
        FlowConfig {
            horizon: 50.0 * tau,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let positive = [
            ("tol_ode", self.tol_ode),
            ("tol_event", self.tol_event),
            ("horizon", self.horizon),
            ("padding", self.padding),
            ("h_max", self.h_max),
            ("escape_cutoff", self.escape_cutoff),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlowError::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.escape_cutoff >= 1.0 {
            return Err(FlowError::Config("escape_cutoff must be below 1".into()));
        }
        Ok(())
    }
}

/// Why an integration stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Horizon,
    LevelHit,
    LeftSupport,
}

#[derive(Clone, Debug)]
pub struct TrajectorySample {
    pub time: f64,
    pub point: Point,
    pub value: f64,
}

/// Accepted steps of one integration, in unwrapped coordinates. Times are
/// absolute values, so backward trajectories also have increasing times.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn end(&self) -> &TrajectorySample {
        self.samples.last().expect("trajectory has its initial sample")
    }
}

/// Result of a level search.
#[derive(Clone, Debug)]
pub enum Crossing {
    Hit {
        time: f64,
        point: Point,
    },
    /// The level was not reached. `closest` is the extreme f-value attained
    /// and `end` the final unwrapped state.
    Missed {
        closest: f64,
        end: Point,
        termination: Termination,
    },
}

impl Crossing {
    pub fn time(&self) -> Option<f64> {
        match self {
            Crossing::Hit { time, .. } => Some(*time),
            Crossing::Missed { .. } => None,
        }
    }

    pub fn point(&self) -> Option<&Point> {
        match self {
            Crossing::Hit { point, .. } => Some(point),
            Crossing::Missed { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn of(s: f64) -> Self {
        if s >= 0.0 {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }

    /// Sign multiplying `grad f` in the integrated vector field.
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Backward => 1.0,
        }
    }
}

enum Stop {
    Duration,
    Level(f64),
    Escaped,
}

struct Run {
    time: f64,
    state: Point,
    stop: Stop,
    extreme: f64,
    samples: Vec<TrajectorySample>,
}

/// Integrator for the cut-off negative gradient flow of a field.
#[derive(Clone, Debug)]
pub struct GradientFlow {
    field: ScalarField,
    config: FlowConfig,
    pad_lower: Vec<f64>,
    pad_upper: Vec<f64>,
}

/// `C^infty` transition from 0 at `t <= 0` to 1 at `t >= 1`.
fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

impl GradientFlow {
    pub fn new(field: ScalarField, config: FlowConfig) -> Result<Self, FlowError> {
        config.validate()?;
        let d = field.domain();
        let mut pad_lower = d.lower.clone();
        let mut pad_upper = d.upper.clone();
        for i in 0..d.dim() {
            if !d.periodic[i] {
                let pad = config.padding * d.width(i);
                pad_lower[i] -= pad;
                pad_upper[i] += pad;
            }
        }
        Ok(GradientFlow {
            field,
            config,
            pad_lower,
            pad_upper,
        })
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    /// Cutoff value at an unwrapped state.
    pub fn cutoff(&self, p: &Point) -> f64 {
        let d = self.field.domain();
        let mut rho = 1.0;
        for i in 0..d.dim() {
            if d.periodic[i] {
                continue;
            }
            let pad = self.config.padding * d.width(i);
            let out = (d.lower[i] - p[i]).max(p[i] - d.upper[i]);
            if out > 0.0 {
                rho *= 1.0 - smooth_step(out / pad);
            }
        }
        rho
    }

    fn in_padded_box(&self, p: &Point) -> bool {
        let d = self.field.domain();
        (0..d.dim()).all(|i| d.periodic[i] || (p[i] > self.pad_lower[i] && p[i] < self.pad_upper[i]))
    }

    /// `-rho grad f`.
    pub fn vector_field(&self, p: &Point) -> Point {
        self.field.gradient(p) * (-self.cutoff(p))
    }

    fn rhs(&self, p: &Point, dir: Direction) -> Point {
        let rho = self.cutoff(p);
        if rho == 0.0 {
            return Point::zeros(p.len());
        }
        self.field.gradient(p) * (dir.sign() * rho)
    }

    /// One Dormand-Prince step; returns the fifth order state, the embedded
    /// error estimate and the derivative at the new state.
    fn dp_step(&self, y: &Point, k1: &Point, h: f64, dir: Direction) -> (Point, Point, Point) {
        let mut k: Vec<Point> = Vec::with_capacity(7);
        k.push(k1.clone());
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    ys.axpy(h * A[s][j], kj, 1.0);
                }
            }
            // the last stage is evaluated at the fifth order solution
            debug_assert!(C[s] > 0.0);
            k.push(self.rhs(&ys, dir));
            if s == 6 {
                let mut err = Point::zeros(y.len());
                for (i, ki) in k.iter().enumerate() {
                    err.axpy(h * (B5[i] - B4[i]), ki, 1.0);
                }
                let k7 = k.pop().expect("seven stages");
                return (ys, err, k7);
            }
        }
        unreachable!("loop returns on the last stage")
    }

    fn error_norm(&self, y0: &Point, y1: &Point, err: &Point) -> f64 {
        let rtol = self.config.tol_ode;
        let atol = 1e-3 * rtol;
        let mut m = 0.0f64;
        for i in 0..y0.len() {
            let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
            m = m.max(err[i].abs() / sc);
        }
        m
    }

    /// Core driver: integrates in direction `dir` for at most `duration`,
    /// optionally stopping at `level`.
    fn run(&self, p: &Point, duration: f64, dir: Direction, level: Option<f64>, record: bool) -> Result<Run, FlowError> {
        let f = &self.field;
        let mut y = p.clone();
        let mut t = 0.0;
        let mut fy = f.value(&y);
        let mut extreme = fy;
        let mut samples = Vec::new();
        if record {
            samples.push(TrajectorySample {
                time: 0.0,
                point: y.clone(),
                value: fy,
            });
        }
        // g > 0 before the level, g <= 0 at or past it
        let gsign = match dir {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        };
        if let Some(lv) = level {
            if (fy - lv).abs() <= self.config.tol_event {
                return Ok(Run {
                    time: 0.0,
                    state: y,
                    stop: Stop::Level(0.0),
                    extreme,
                    samples,
                });
            }
        }
        if duration <= 0.0 {
            return Ok(Run {
                time: 0.0,
                state: y,
                stop: Stop::Duration,
                extreme,
                samples,
            });
        }
        let mut k1 = self.rhs(&y, dir);
        let speed = k1.norm();
        let mut h = if speed > 0.0 {
            (1e-2 * (1.0 + y.norm()) / speed).min(self.config.h_max)
        } else {
            self.config.h_max
        };
        h = h.min(duration).max(1e-12);
        for _ in 0..MAX_STEPS {
            let last = duration - t <= h;
            if last {
                h = duration - t;
            }
            let (y1, err, k7) = self.dp_step(&y, &k1, h, dir);
            if !y1.iter().all(|v| v.is_finite()) {
                h *= 0.25;
                if h < 1e-14 * (1.0 + t) {
                    return Err(FlowError::NonFinite { time: t });
                }
                continue;
            }
            let e = self.error_norm(&y, &y1, &err);
            if e > 1.0 {
                h *= (0.9 * e.powf(-0.2)).max(0.2);
                if h < 1e-14 * (1.0 + t) {
                    return Err(FlowError::StepUnderflow { time: t });
                }
                continue;
            }
            let f1 = f.value(&y1);
            if let Some(lv) = level {
                if gsign * (f1 - lv) <= 0.0 {
                    let (dt, state) = self.bisect(&y, &k1, h, dir, lv, gsign);
                    let time = t + dt;
                    extreme = lv;
                    if record {
                        samples.push(TrajectorySample {
                            time,
                            point: state.clone(),
                            value: f.value(&state),
                        });
                    }
                    return Ok(Run {
                        time,
                        state,
                        stop: Stop::Level(time),
                        extreme,
                        samples,
                    });
                }
            }
            t = if last { duration } else { t + h };
            y = y1;
            fy = f1;
            extreme = match dir {
                Direction::Forward => extreme.min(fy),
                Direction::Backward => extreme.max(fy),
            };
            k1 = k7;
            if record {
                samples.push(TrajectorySample {
                    time: t,
                    point: y.clone(),
                    value: fy,
                });
            }
            if !self.in_padded_box(&y) || self.cutoff(&y) < self.config.escape_cutoff {
                return Ok(Run {
                    time: t,
                    state: y,
                    stop: Stop::Escaped,
                    extreme,
                    samples,
                });
            }
            if last {
                return Ok(Run {
                    time: t,
                    state: y,
                    stop: Stop::Duration,
                    extreme,
                    samples,
                });
            }
            let grow = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * grow).min(self.config.h_max);
        }
        Err(FlowError::StepLimit { time: t })
    }

    /// Locates the level inside one accepted step by bisection on the step
    /// length, re-stepping from the step start each time.
    fn bisect(&self, y0: &Point, k1: &Point, h: f64, dir: Direction, level: f64, gsign: f64) -> (f64, Point) {
        let mut lo = 0.0;
        let mut hi = h;
        let mut best = (h, self.dp_step(y0, k1, h, dir).0);
        for _ in 0..BISECTION_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            let ym = self.dp_step(y0, k1, mid, dir).0;
            let g = gsign * (self.field.value(&ym) - level);
            if g.abs() <= self.config.tol_event {
                return (mid, ym);
            }
            if g > 0.0 {
                lo = mid;
            } else {
                hi = mid;
                best = (mid, ym);
            }
            if hi - lo <= 1e-16 * (1.0 + hi) {
                break;
            }
        }
        best
    }

    fn escaped(&self, run: &Run) -> FlowError {
        FlowError::Escaped {
            time: run.time,
            state: self.field.domain().wrap(&run.state).iter().copied().collect(),
        }
    }

    /// `phi_s(p)`, wrapped into the domain. Negative `s` runs the flow
    /// backward.
    pub fn flow_map(&self, p: &Point, s: f64) -> Result<Point, FlowError> {
        Ok(self.field.domain().wrap(&self.flow_unwrapped(p, s)?))
    }

    /// `phi_s(p)` without wrapping periodic coordinates.
    pub fn flow_unwrapped(&self, p: &Point, s: f64) -> Result<Point, FlowError> {
        if s == 0.0 {
            return Ok(p.clone());
        }
        let run = self.run(p, s.abs(), Direction::of(s), None, false)?;
        match run.stop {
            Stop::Escaped if run.time < s.abs() => Err(self.escaped(&run)),
            _ => Ok(run.state),
        }
    }

    /// Samples of `s -> phi_s p` for `s` between 0 and `duration` (negative
    /// for the backward flow), stopping early if the support is left.
    pub fn trajectory(&self, p: &Point, duration: f64) -> Result<Trajectory, FlowError> {
        let run = self.run(p, duration.abs(), Direction::of(duration), None, true)?;
        let termination = match run.stop {
            Stop::Escaped if run.time < duration.abs() => Termination::LeftSupport,
            _ => Termination::Horizon,
        };
        Ok(Trajectory {
            samples: run.samples,
            termination,
        })
    }

    /// Trajectory that stops when `f` reaches `level` (forward if
    /// `f(p) >= level`, backward otherwise) or at the horizon.
    pub fn trajectory_to_level(&self, p: &Point, level: f64, horizon: f64) -> Result<Trajectory, FlowError> {
        let dir = if self.field.value(p) >= level {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let run = self.run(p, horizon, dir, Some(level), true)?;
        let termination = match run.stop {
            Stop::Level(_) => Termination::LevelHit,
            Stop::Escaped => Termination::LeftSupport,
            Stop::Duration => Termination::Horizon,
        };
        Ok(Trajectory {
            samples: run.samples,
            termination,
        })
    }

    /// First forward time at which `f(phi_t p) = level`, searched up to the
    /// configured horizon.
    pub fn hit_level(&self, p: &Point, level: f64) -> Result<Crossing, FlowError> {
        self.hit_level_within(p, level, self.config.horizon)
    }

    pub fn hit_level_within(&self, p: &Point, level: f64, horizon: f64) -> Result<Crossing, FlowError> {
        let v = self.field.value(p);
        if v < level - self.config.tol_event {
            return Err(FlowError::Precondition { value: v, level });
        }
        self.crossing(p, level, horizon, Direction::Forward)
    }

    /// First backward time at which `f(phi_{-t} p) = level`.
    pub fn hit_level_backward(&self, p: &Point, level: f64, horizon: f64) -> Result<Crossing, FlowError> {
        let v = self.field.value(p);
        if v > level + self.config.tol_event {
            return Err(FlowError::Precondition { value: v, level });
        }
        self.crossing(p, level, horizon, Direction::Backward)
    }

    fn crossing(&self, p: &Point, level: f64, horizon: f64, dir: Direction) -> Result<Crossing, FlowError> {
        let run = self.run(p, horizon, dir, Some(level), false)?;
        Ok(match run.stop {
            Stop::Level(time) => Crossing::Hit { time, point: run.state },
            Stop::Duration => Crossing::Missed {
                closest: run.extreme,
                end: run.state,
                termination: Termination::Horizon,
            },
            Stop::Escaped => Crossing::Missed {
                closest: run.extreme,
                end: run.state,
                termination: Termination::LeftSupport,
            },
        })
    }

    /// Time to enter `{f <= a_level}`: zero on the set itself, otherwise the
    /// first hitting time. A miss within the horizon is an error since the
    /// entrance time is bounded off critical points.
    pub fn entrance_time(&self, a_level: f64, p: &Point) -> Result<f64, FlowError> {
        if self.field.value(p) <= a_level + self.config.tol_event {
            return Ok(0.0);
        }
        match self.hit_level(p, a_level)? {
            Crossing::Hit { time, .. } => Ok(time),
            Crossing::Missed { closest, .. } => Err(FlowError::Horizon {
                horizon: self.config.horizon,
                level: a_level,
                closest,
            }),
        }
    }
}

/// Distance to the origin along the columns of `basis`, i.e. `|B^T v|`.
pub fn component_norm(basis: &nalgebra::DMatrix<f64>, v: &DVector<f64>) -> f64 {
    if basis.ncols() == 0 {
        0.0
    } else {
        (basis.transpose() * v).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn pt(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    fn model() -> GradientFlow {
        GradientFlow::new(ScalarField::model(2, 1, 1.0, 2.0).unwrap(), FlowConfig::for_tau(1.0)).unwrap()
    }

    #[test]
    fn model_flow_closed_form() {
        let fl = model();
        let q = fl.flow_map(&pt(&[1.0, 1.0]), 0.5).unwrap();
        assert_abs_diff_eq!(q[0], 0.5f64.exp(), epsilon = 1e-8);
        assert_abs_diff_eq!(q[1], (-0.5f64).exp(), epsilon = 1e-8);
        let q = fl.flow_map(&pt(&[0.3, 0.1]), -1.5).unwrap();
        assert_abs_diff_eq!(q[0], 0.3 * (-1.5f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(q[1], 0.1 * 1.5f64.exp(), epsilon = 1e-9);
    }

    #[test]
    fn cutoff_leaves_box_dynamics_alone() {
        // (1,1) leaves [-2,2]^2 at s = ln 2; inside the padding the cutoff slows it down
        let fl = model();
        let q = fl.flow_unwrapped(&pt(&[1.0, 1.0]), 1.0).unwrap();
        assert!(q[0] > 2.0 && q[0] < 2.0 + 0.25 * 4.0);
        assert!(q[0] < 1f64.exp());
        assert_eq!(fl.cutoff(&pt(&[1.9, -2.0])), 1.0);
        assert_eq!(fl.cutoff(&pt(&[3.0, 0.0])), 0.0);
    }

    #[test]
    fn identity_and_fixed_point() {
        let fl = model();
        let p = pt(&[0.7, -0.3]);
        assert_eq!(fl.flow_map(&p, 0.0).unwrap(), p);
        let z = pt(&[0.0, 0.0]);
        assert_eq!(fl.flow_map(&z, 3.0).unwrap(), z);
        assert_eq!(fl.flow_map(&z, -3.0).unwrap(), z);
    }

    #[test]
    fn hit_level_closed_form() {
        let fl = model();
        let c = fl.hit_level(&pt(&[0.1, 0.0]), -1.0).unwrap();
        let Crossing::Hit { time, point } = c else { panic!("expected hit") };
        assert_abs_diff_eq!(time, (10.0 * 2f64.sqrt()).ln(), epsilon = 1e-8);
        assert_abs_diff_eq!(time, 2.64916, epsilon = 1e-5);
        assert_abs_diff_eq!(point[0], 2f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(point[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn hit_level_boundary_and_miss() {
        let fl = model();
        let p = pt(&[2f64.sqrt(), 0.0]);
        match fl.hit_level(&p, -1.0).unwrap() {
            Crossing::Hit { time, point } => {
                assert_eq!(time, 0.0);
                assert_eq!(point, p);
            }
            Crossing::Missed { .. } => panic!("expected immediate hit"),
        }
        match fl.hit_level(&pt(&[0.0, 1.0]), -1.0).unwrap() {
            Crossing::Missed { termination, closest, .. } => {
                assert_eq!(termination, Termination::Horizon);
                assert!(closest >= 0.0);
            }
            Crossing::Hit { .. } => panic!("stable orbit cannot reach the lower level"),
        }
        assert!(matches!(fl.hit_level(&pt(&[2.0, 0.0]), -1.0), Err(FlowError::Precondition { .. })));
    }

    #[test]
    fn backward_hit_level() {
        let fl = model();
        // (w,0.5) flowed backward: v grows as 0.5 e^t; f = (0.25 e^{2t} - 0.01 e^{-2t})/2
        let p = pt(&[0.1, 0.5]);
        let Crossing::Hit { time, point } = fl.hit_level_backward(&p, 1.0, 10.0).unwrap() else {
            panic!("expected hit")
        };
        assert_abs_diff_eq!(fl.field().value(&point), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(point[1], 0.5 * time.exp(), epsilon = 1e-8);
    }

    #[test]
    fn periodic_flow_wraps() {
        let fl = GradientFlow::new(ScalarField::torus().unwrap(), FlowConfig::for_tau(1.0)).unwrap();
        let q = fl.flow_map(&pt(&[0.1, 6.2]), -2.0).unwrap();
        assert!(q.iter().all(|v| (0.0..2.0 * PI).contains(v)));
        // backward flow ascends towards the maximum at (0,0)
        assert!(fl.field().value(&q) > fl.field().value(&pt(&[0.1, 6.2])));
    }

    #[test]
    fn entrance_time_examples() {
        let fl = model();
        assert_eq!(fl.entrance_time(-1.0, &pt(&[1.8, 0.1])).unwrap(), 0.0);
        let p = pt(&[2f64.sqrt() * (-2f64).exp(), 0.0]);
        assert_abs_diff_eq!(fl.entrance_time(-1.0, &p).unwrap(), 2.0, epsilon = 1e-8);
        assert!(matches!(fl.entrance_time(-1.0, &pt(&[0.0, 1.0])), Err(FlowError::Horizon { .. })));
    }

    #[test]
    fn trajectory_is_monotone() {
        let fl = GradientFlow::new(ScalarField::double_well(2.0).unwrap(), FlowConfig::default()).unwrap();
        let tr = fl.trajectory(&pt(&[0.1, 1.2]), 4.0).unwrap();
        assert_eq!(tr.termination, Termination::Horizon);
        for w in tr.samples.windows(2) {
            assert!(w[1].time > w[0].time);
            assert!(w[1].value <= w[0].value + 1e-9);
        }
        let tr = fl.trajectory_to_level(&pt(&[0.1, 1.2]), 0.5, 50.0).unwrap();
        assert_eq!(tr.termination, Termination::LevelHit);
        assert_abs_diff_eq!(tr.end().value, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn config_validation() {
        let mut c = FlowConfig::default();
        c.tol_ode = 0.0;
        assert!(c.validate().is_err());
        assert!(FlowConfig::for_tau(2.0).validate().is_ok());
        assert_eq!(FlowConfig::for_tau(2.0).horizon, 100.0);
    }
}
