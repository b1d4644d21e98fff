//! Flow selector: a hypersurface inside the block, written as the graph of
//! `s(t^-)` over the lower level along backward flow lines, where
//! `s(t) = 2 tau - tau^2 / t`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::field::Point;
use crate::flow::{Crossing, FlowError};
use crate::thickening::{BlockError, ConleyBlock, Label};
use crate::util::{complement_basis, fit_hyperplane};

/// Width, in time units, of the band in which `sigma` and the graph height
/// are considered equal.
pub const CLOSURE_TOL: f64 = 1e-7;
/// Normal offsets below this fraction of the tube radius count as lying on
/// the unstable manifold.
pub const UNSTABLE_TOL: f64 = 1e-7;
/// Smallest accepted angle, in radians, between a generator and the
/// selector.
pub const ANGLE_THRESHOLD: f64 = 1e-2;
/// Relative step for the tangent frames of the selector.
const FRAME_FD_STEP: f64 = 1e-4;
/// Forward difference step for the theta generator.
const THETA_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("label {t} is below tau = {tau}")]
    Domain { t: f64, tau: f64 },
    #[error("degenerate tangent frame at selector sample {0}")]
    Frame(usize),
    #[error("entrance sample {0} does not reach the lower level within the horizon")]
    Horizon(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// `s(t) = 2 tau - tau^2/t` on `[tau, inf]`, with `s(inf) = 2 tau`.
pub fn s_reparam(tau: f64, t: f64) -> Result<f64, SelectorError> {
    if t.is_nan() || t < tau {
        return Err(SelectorError::Domain { t, tau });
    }
    if t.is_infinite() {
        return Ok(2.0 * tau);
    }
    Ok(2.0 * tau - tau * tau / t)
}

/// `s'(t) = tau^2/t^2`, zero at infinity.
pub fn s_reparam_derivative(tau: f64, t: f64) -> Result<f64, SelectorError> {
    if t.is_nan() || t < tau {
        return Err(SelectorError::Domain { t, tau });
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok(tau * tau / (t * t))
}

/// Where a lower-level sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Entrance { index: usize, sphere: usize, ray: usize },
    Sphere { index: usize },
}

#[derive(Clone, Debug)]
pub struct SelectorSample {
    /// Point of the lower level.
    pub base: Point,
    pub label: Label,
    /// `s(label)`.
    pub height: f64,
    /// `phi_{-height}(base)`.
    pub point: Point,
    pub source: SampleSource,
    /// Unit normal of the fitted tangent plane (finite labels only).
    pub normal: Option<DVector<f64>>,
}

/// Sampled selector over a block.
#[derive(Clone, Debug)]
pub struct SelectorComplex<'a> {
    block: &'a ConleyBlock,
    samples: Vec<SelectorSample>,
}

/// Flows the entrance samples down to the lower level, transfers their
/// labels, appends the descending sphere with infinite label and lifts
/// everything by `s(label)`.
pub fn build_selector(block: &ConleyBlock, sample_budget: usize) -> Result<SelectorComplex<'_>, SelectorError> {
    if sample_budget == 0 {
        return Err(SelectorError::Argument("sample budget must be positive".into()));
    }
    let tau = block.tau();
    let entrance = block.entrance();
    let stride = entrance.len().div_ceil(sample_budget).max(1);
    let chosen: Vec<usize> = (0..entrance.len()).step_by(stride).collect();
    let mut samples: Vec<SelectorSample> = chosen
        .par_iter()
        .map(|&i| -> Result<SelectorSample, SelectorError> {
            let e = &entrance[i];
            let (t, base) = match block.flow().hit_level(&e.point, block.lower_level())? {
                Crossing::Hit { time, point } => (time, block.field().domain().wrap(&point)),
                Crossing::Missed { .. } => return Err(SelectorError::Horizon(i)),
            };
            // labels a hair below tau come from the event tolerance
            let height = s_reparam(tau, t.max(tau))?;
            let point = block.flow().flow_map(&base, -height.min(t))?;
            let t = t.max(tau);
            Ok(SelectorSample {
                base,
                label: Label::Finite(t),
                height,
                point,
                source: SampleSource::Entrance {
                    index: i,
                    sphere: e.sphere,
                    ray: e.ray,
                },
                normal: None,
            })
        })
        .collect::<Result<_, _>>()?;
    for (i, q) in block.sphere_points().into_iter().enumerate() {
        let height = 2.0 * tau;
        let point = block.flow().flow_map(&q, -height)?;
        samples.push(SelectorSample {
            base: q,
            label: Label::Infinite,
            height,
            point,
            source: SampleSource::Sphere { index: i },
            normal: None,
        });
    }
    let mut complex = SelectorComplex { block, samples };
    complex.fit_frames()?;
    Ok(complex)
}

/// Region of the band relative to the selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// `f <= c - eps`.
    A,
    /// Under the graph of the selector (closure included).
    SRegion,
    /// In the band, outside both the block and the selector region.
    XMinusSbar,
    /// The part of the block above the selector, moved by the retraction.
    NDeform,
    Outside,
}

#[derive(Clone, Debug)]
pub struct Classification {
    pub region: Region,
    /// Forward time to the lower level; `None` off the band, infinite on
    /// the stable manifold.
    pub sigma: Option<f64>,
    /// Landing point on the lower level.
    pub lower: Option<Point>,
    /// Lower label of the landing point, if it lies in the selector base.
    pub label: Option<Label>,
    pub height: Option<f64>,
}

impl Classification {
    fn simple(region: Region) -> Self {
        Classification {
            region,
            sigma: None,
            lower: None,
            label: None,
            height: None,
        }
    }
}

/// Angles of both generators with the fitted tangent plane at one sample,
/// plus their normal speeds.
#[derive(Clone, Debug, Serialize)]
pub struct Transversality {
    pub sample: usize,
    pub label: f64,
    pub angle_phi: f64,
    pub angle_theta: f64,
    pub speed_phi: f64,
    pub speed_theta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransversalityReport {
    pub label_max: f64,
    pub rows: Vec<Transversality>,
    pub min_angle_phi: f64,
    pub min_angle_theta: f64,
    pub angle_threshold: f64,
    /// Normal speeds of both generators decrease with the label along every
    /// sampled chain.
    pub profile_monotone: bool,
    /// No entrance set, so nothing to test.
    pub vacuous: bool,
    pub passed: bool,
}

fn angle_to_plane(v: &DVector<f64>, normal: &DVector<f64>) -> f64 {
    let n = v.norm();
    if n == 0.0 {
        return 0.0;
    }
    (v.dot(normal).abs() / n).min(1.0).asin()
}

impl<'a> SelectorComplex<'a> {
    pub fn block(&self) -> &'a ConleyBlock {
        self.block
    }

    pub fn samples(&self) -> &[SelectorSample] {
        &self.samples
    }

    /// Selector point over tube coordinates `(d, w)`, and whether its label
    /// was clamped up to `tau`.
    fn lift(&self, d: &DVector<f64>, w: &DVector<f64>) -> Result<(Point, bool), SelectorError> {
        let b = self.block;
        let e = b.exit_point(d, w)?;
        let t = b.backward_label(&e)?.0.value();
        let p = b.flow().flow_map(&e, -s_reparam(b.tau(), t.max(b.tau()))?)?;
        Ok((p, t < b.tau()))
    }

    /// Difference quotient of the lift; one-sided next to the `tau` edge,
    /// where the clamped label has a kink.
    fn lift_derivative(
        &self,
        at: (&DVector<f64>, &DVector<f64>),
        plus: (&DVector<f64>, &DVector<f64>),
        minus: (&DVector<f64>, &DVector<f64>),
        h: f64,
    ) -> Result<DVector<f64>, SelectorError> {
        let b = self.block;
        let (pp, cp) = self.lift(plus.0, plus.1)?;
        let (pm, cm) = self.lift(minus.0, minus.1)?;
        Ok(match (cp, cm) {
            (true, false) => b.delta(&pm, &self.lift(at.0, at.1)?.0) / h,
            (false, true) => b.delta(&self.lift(at.0, at.1)?.0, &pp) / h,
            _ => b.delta(&pm, &pp) / (2.0 * h),
        })
    }

    /// Unit normals from central differences of the lift in the tube
    /// coordinates: along each normal offset and along the sphere.
    fn fit_frames(&mut self) -> Result<(), SelectorError> {
        let n = self.block.dim();
        if n < 2 {
            return Ok(());
        }
        let block = self.block;
        let normals: Vec<Option<DVector<f64>>> = (0..self.samples.len())
            .into_par_iter()
            .map(|i| -> Result<Option<DVector<f64>>, SelectorError> {
                let SampleSource::Entrance { index, sphere, .. } = self.samples[i].source else {
                    return Ok(None);
                };
                let e = &block.entrance()[index];
                let d = block.charts()[sphere].d.clone();
                let mut tangents = Vec::with_capacity(n - 1);
                let hw = FRAME_FD_STEP * e.w.norm();
                for j in 0..e.w.len() {
                    let mut wp = e.w.clone();
                    wp[j] += hw;
                    let mut wm = e.w.clone();
                    wm[j] -= hw;
                    tangents.push(self.lift_derivative((&d, &e.w), (&d, &wp), (&d, &wm), hw)?);
                }
                for v in complement_basis(&d).column_iter() {
                    let dp = (&d + &v * FRAME_FD_STEP).normalize();
                    let dm = (&d - &v * FRAME_FD_STEP).normalize();
                    tangents.push(self.lift_derivative((&d, &e.w), (&dp, &e.w), (&dm, &e.w), FRAME_FD_STEP)?);
                }
                let scale = tangents.iter().map(|t| t.norm()).fold(0.0, f64::max);
                let unit: Vec<DVector<f64>> = tangents.iter().map(|t| t / scale.max(f64::MIN_POSITIVE)).collect();
                let (normal, sv) = fit_hyperplane(&unit, n);
                if unit.len() < n - 1 || sv[n - 2] <= 1e-9 * sv[0].max(f64::MIN_POSITIVE) {
                    return Err(SelectorError::Frame(i));
                }
                Ok(Some(normal))
            })
            .collect::<Result<_, _>>()?;
        for (s, nv) in self.samples.iter_mut().zip(normals) {
            s.normal = nv;
        }
        Ok(())
    }

    /// Lower label of a lower-level point: infinite on the descending
    /// sphere, the backward time to the upper level if that is at least
    /// `tau` and ends in the block component, `None` otherwise.
    pub fn lower_label(&self, lower: &Point) -> Result<Option<Label>, SelectorError> {
        let b = self.block;
        // a maximum: the whole lower boundary is the descending sphere
        if b.index() > 0 && b.dim() == b.index() {
            return Ok(Some(Label::Infinite));
        }
        if b.tube_radius() > 0.0 {
            if let Ok((_, _, w)) = b.project(lower) {
                if w.norm() <= UNSTABLE_TOL * b.tube_radius() {
                    return Ok(Some(Label::Infinite));
                }
            }
        }
        match b.backward_label(lower)? {
            (Label::Finite(t), Some(p)) if t >= b.tau() - CLOSURE_TOL && b.component().connected(&p) => {
                Ok(Some(Label::Finite(t)))
            }
            _ => Ok(None),
        }
    }

    /// Region of a point of the domain.
    pub fn classify_region(&self, p: &Point) -> Result<Classification, SelectorError> {
        let b = self.block;
        if !b.field().domain().contains(p) {
            return Ok(Classification::simple(Region::Outside));
        }
        let tol = b.tol_event();
        let v = b.field().value(p);
        if v <= b.lower_level() + tol {
            return Ok(Classification::simple(Region::A));
        }
        if v > b.upper_level() + tol {
            return Ok(Classification::simple(Region::Outside));
        }
        let (sigma, lower) = match b.flow().hit_level(p, b.lower_level())? {
            Crossing::Hit { time, point } => (time, b.field().domain().wrap(&point)),
            Crossing::Missed { .. } => {
                let region = if b.contains(p)? { Region::NDeform } else { Region::XMinusSbar };
                return Ok(Classification {
                    region,
                    sigma: Some(f64::INFINITY),
                    lower: None,
                    label: None,
                    height: None,
                });
            }
        };
        let label = self.lower_label(&lower)?;
        let (region, height) = match label {
            Some(l) => {
                let h = s_reparam(b.tau(), l.value().max(b.tau()))?;
                let r = if sigma <= h + CLOSURE_TOL { Region::SRegion } else { Region::NDeform };
                (r, Some(h))
            }
            None => {
                let r = if b.contains(p)? { Region::NDeform } else { Region::XMinusSbar };
                (r, None)
            }
        };
        Ok(Classification {
            region,
            sigma: Some(sigma),
            lower: Some(lower),
            label,
            height,
        })
    }

    /// Distance from `p` to the local unstable disk, measured within the
    /// fiber through `p`. `None` for points outside the band.
    pub fn unstable_distance(&self, p: &Point) -> Result<Option<f64>, SelectorError> {
        let b = self.block;
        if b.distance(p, b.x()) <= 1e-12 {
            return Ok(Some(0.0));
        }
        let tol = b.tol_event();
        let v = b.field().value(p);
        if v < b.lower_level() - tol || v > b.upper_level() + tol || !b.field().domain().contains(p) {
            return Ok(None);
        }
        if b.charts().is_empty() {
            return Ok(Some(b.distance(p, b.x())));
        }
        match b.flow().hit_level(p, b.lower_level())? {
            Crossing::Hit { time, point } => self.distance_via_landing(p, time, &b.field().domain().wrap(&point)),
            Crossing::Missed { .. } => Ok(Some(b.distance(p, b.x()))),
        }
    }

    /// As [`Self::unstable_distance`], reusing the landing data of a band
    /// classification instead of flowing again.
    pub fn unstable_distance_classified(&self, p: &Point, cls: &Classification) -> Result<Option<f64>, SelectorError> {
        let b = self.block;
        match (cls.sigma, &cls.lower) {
            (Some(t), Some(lower)) if t.is_finite() && !b.charts().is_empty() && b.distance(p, b.x()) > 1e-12 => {
                self.distance_via_landing(p, t, lower)
            }
            _ => self.unstable_distance(p),
        }
    }

    fn distance_via_landing(&self, p: &Point, time: f64, lower: &Point) -> Result<Option<f64>, SelectorError> {
        let b = self.block;
        // with no stable directions each fiber is a single point
        if b.index() == b.dim() {
            return Ok(Some(0.0));
        }
        let (d, _, w) = b.project(lower)?;
        let center = b.fiber_point(time, &d, &DVector::zeros(w.len()))?;
        Ok(Some(b.distance(p, &center)))
    }

    /// True if `p` lies on the unstable disk within `tol`.
    pub fn on_unstable(&self, p: &Point, tol: f64) -> Result<bool, SelectorError> {
        Ok(self.unstable_distance(p)?.is_some_and(|d| d <= tol))
    }

    /// Angles between the two generators and the fitted tangent plane.
    pub fn transversality_margin(&self, index: usize) -> Result<Transversality, SelectorError> {
        let s = self
            .samples
            .get(index)
            .ok_or_else(|| SelectorError::Argument(format!("no selector sample {index}")))?;
        let Label::Finite(label) = s.label else {
            return Err(SelectorError::Argument("transversality needs a finite label".into()));
        };
        let normal = s.normal.as_ref().ok_or(SelectorError::Frame(index))?;
        let b = self.block;
        let phi_gen = -b.field().gradient(&s.point);
        let moved = b.theta_step(&s.point, THETA_FD_STEP)?;
        let theta_gen = b.delta(&s.point, &moved) / THETA_FD_STEP;
        Ok(Transversality {
            sample: index,
            label,
            angle_phi: angle_to_plane(&phi_gen, normal),
            angle_theta: angle_to_plane(&theta_gen, normal),
            speed_phi: phi_gen.dot(normal).abs(),
            speed_theta: theta_gen.dot(normal).abs(),
        })
    }

    /// Transversality over all samples with finite label at most
    /// `label_max`, against [`ANGLE_THRESHOLD`].
    pub fn verify_transversality(&self, label_max: f64) -> Result<TransversalityReport, SelectorError> {
        self.verify_transversality_with(label_max, ANGLE_THRESHOLD)
    }

    /// Same with a custom angle threshold. Angles are Euclidean, so fields
    /// with strongly unequal eigenvalues press the selector against the
    /// fibers and need a lower one.
    pub fn verify_transversality_with(&self, label_max: f64, angle_threshold: f64) -> Result<TransversalityReport, SelectorError> {
        let chosen: Vec<usize> = (0..self.samples.len())
            .filter(|&i| matches!(self.samples[i].label, Label::Finite(t) if t <= label_max))
            .collect();
        let rows: Vec<Transversality> = chosen
            .par_iter()
            .map(|&i| self.transversality_margin(i))
            .collect::<Result<_, _>>()?;
        let min_angle_phi = rows.iter().map(|r| r.angle_phi).fold(f64::INFINITY, f64::min);
        let min_angle_theta = rows.iter().map(|r| r.angle_theta).fold(f64::INFINITY, f64::min);
        let mut chains: std::collections::BTreeMap<(usize, usize), Vec<&Transversality>> = Default::default();
        for r in &rows {
            if let SampleSource::Entrance { sphere, ray, .. } = self.samples[r.sample].source {
                chains.entry((sphere, ray)).or_default().push(r);
            }
        }
        let profile_monotone = chains.values_mut().all(|chain| {
            chain.sort_by(|a, b| a.label.total_cmp(&b.label));
            chain.windows(2).all(|w| {
                w[1].speed_phi <= w[0].speed_phi * (1.0 + 1e-6) && w[1].speed_theta <= w[0].speed_theta * (1.0 + 1e-6)
            })
        });
        // an empty entrance set (index equal to dimension) has no selector to test
        let vacuous = self.block.entrance().is_empty();
        let passed = vacuous
            || !rows.is_empty()
            && min_angle_phi >= angle_threshold
            && min_angle_theta >= angle_threshold
            && profile_monotone;
        Ok(TransversalityReport {
            label_max,
            rows,
            min_angle_phi,
            min_angle_theta,
            angle_threshold,
            profile_monotone,
            vacuous,
            passed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{find_critical, ScalarField};
    use crate::thickening::build_block;
    use approx::assert_abs_diff_eq;
    use std::sync::OnceLock;

    fn pt(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    fn block() -> &'static ConleyBlock {
        static B: OnceLock<ConleyBlock> = OnceLock::new();
        B.get_or_init(|| {
            let f = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
            let cp = find_critical(&f, &pt(&[0.0, 0.0])).unwrap();
            build_block(&f, &cp, 1.0, 1.0).unwrap()
        })
    }

    #[test]
    fn reparam_values() {
        assert_eq!(s_reparam(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(s_reparam(1.0, f64::INFINITY).unwrap(), 2.0);
        assert_eq!(s_reparam(1.0, 2.0).unwrap(), 1.5);
        assert_abs_diff_eq!(s_reparam(1.0, 1.2).unwrap(), 7.0 / 6.0, epsilon = 1e-15);
        assert_eq!(s_reparam_derivative(2.0, 2.0).unwrap(), 1.0);
        assert!(matches!(s_reparam(1.0, 0.5), Err(SelectorError::Domain { .. })));
    }

    #[test]
    fn selector_examples() {
        let b = block();
        let sel = build_selector(b, 10_000).unwrap();
        let on_wu: Vec<_> = sel.samples().iter().filter(|s| s.label.is_infinite()).collect();
        assert_eq!(on_wu.len(), 2);
        for s in on_wu {
            assert_abs_diff_eq!(s.point[0].abs(), 2f64.sqrt() * (-2f64).exp(), epsilon = 1e-9);
            assert_abs_diff_eq!(s.point[0].abs(), 0.19140, epsilon = 1e-5);
        }
        // the sample with lower point (1.48308, 0.44670) at label 1.2
        let p_minus = pt(&[1.48308, 0.44670]);
        let label = sel.lower_label(&p_minus).unwrap().unwrap();
        assert_abs_diff_eq!(label.value(), 1.2, epsilon = 1e-5);
        let up = b.flow().flow_map(&p_minus, -s_reparam(1.0, label.value()).unwrap()).unwrap();
        assert_abs_diff_eq!(up[0], 0.46184, epsilon = 1e-4);
        assert_abs_diff_eq!(up[1], 1.43447, epsilon = 1e-4);
        for s in sel.samples() {
            assert_abs_diff_eq!(b.field().value(&s.base), -1.0, epsilon = 1e-9);
            let v = b.field().value(&s.point);
            assert!(v > -1.0 && v <= 1.0 + 1e-9);
            assert!(s.height > 1.0 - 1e-9 && s.height <= 2.0);
        }
    }

    #[test]
    fn classify_examples() {
        let sel = build_selector(block(), 10_000).unwrap();
        let c = sel.classify_region(&pt(&[0.44670, 1.48308])).unwrap();
        assert_eq!(c.region, Region::NDeform);
        assert_abs_diff_eq!(c.sigma.unwrap(), 1.2, epsilon = 1e-5);
        let c = sel.classify_region(&pt(&[0.89953, 0.73648])).unwrap();
        assert_eq!(c.region, Region::SRegion);
        assert_abs_diff_eq!(c.sigma.unwrap(), 0.5, epsilon = 1e-4);
        assert_eq!(sel.classify_region(&pt(&[1.8, 0.0])).unwrap().region, Region::A);
        assert_eq!(sel.classify_region(&pt(&[0.0, 1.9])).unwrap().region, Region::Outside);
        // in the band but leaving the lower level quickly: outside N, under no graph
        assert_eq!(sel.classify_region(&pt(&[1.2, 1.0])).unwrap().region, Region::XMinusSbar);
        // stable manifold inside N
        assert_eq!(sel.classify_region(&pt(&[0.0, 0.7])).unwrap().region, Region::NDeform);
        // the unstable disk between x and the selector
        assert_eq!(sel.classify_region(&pt(&[0.1, 0.0])).unwrap().region, Region::NDeform);
        assert_eq!(sel.classify_region(&pt(&[0.5, 0.0])).unwrap().region, Region::SRegion);
    }

    #[test]
    fn transversality_on_model() {
        let sel = build_selector(block(), 10_000).unwrap();
        let r = sel.verify_transversality(5.0).unwrap();
        assert!(r.passed, "{:?}", (r.min_angle_phi, r.min_angle_theta, r.profile_monotone));
        let near = r.rows.iter().min_by(|a, b| (a.label - 1.2).abs().total_cmp(&(b.label - 1.2).abs())).unwrap();
        assert!(near.angle_phi > 0.01 && near.angle_theta > 0.01);
    }
}
