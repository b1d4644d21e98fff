//! The deformation retraction `r` of `M^{c+eps}` onto `M^{c-eps} ∪ W^u_eps ∪ X`
//! and the homotopy `h` on `Z = X ∪ A ∪ W^u_eps`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::field::Point;
use crate::flow::FlowError;
use crate::selector::{s_reparam, Classification, Region, SelectorComplex, SelectorError, UNSTABLE_TOL};
use crate::thickening::{BlockError, Label};
use crate::util::{halton, illinois_root};

/// Distance below which a point counts as lying on the unstable disk.
pub const ON_UNSTABLE_TOL: f64 = 1e-5;

/// Relative half-width of the seam `t = 2 tau` on the unstable disk.
pub const SEAM_TOL: f64 = 1e-6;

/// Level slack for replayed flow times, which carry the integrator error
/// rather than the event tolerance.
pub const LANDING_TOL: f64 = 1e-7;

/// Agreement of the two branches across the `T = 2 tau` band.
pub const THRESHOLD_TOL: f64 = 1e-4;

/// Fewest probe pairs behind a spatial continuity verdict.
pub const SPATIAL_MIN_PAIRS: usize = 100;

#[derive(Debug, Error)]
pub enum RetractError {
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("point is above the upper level (f = {0})")]
    AboveUpperLevel(f64),
    #[error("homotopy parameter {0} outside [0, 1]")]
    Parameter(f64),
    #[error("point is not in Z (region {0:?})")]
    NotInZ(Region),
    #[error("branches disagree by {0:e} on a seam")]
    Consistency(f64),
    #[error("selector crossing not bracketed: {0}")]
    Geometry(String),
}

/// Solves `T = s(t^-(exit(d, w e^{-s})))` for `s`, returning the crossing
/// scale `e^{-s}`, or `None` when the crossing lies beyond the horizon.
fn crossing_scale(sel: &SelectorComplex<'_>, t: f64, d: &DVector<f64>, w: &DVector<f64>) -> Result<Option<f64>, RetractError> {
    let b = sel.block();
    let tau = b.tau();
    let target = tau * tau / (2.0 * tau - t);
    if target >= b.horizon() {
        return Ok(None);
    }
    let g = |s: f64| -> Result<f64, RetractError> {
        let l = b.offset_label(d, &(w * (-s).exp()))?;
        Ok(match l {
            Label::Finite(v) => v - target,
            Label::Infinite => b.horizon() - target,
        })
    };
    let g0 = g(0.0)?;
    if g0 >= 0.0 {
        // already on or under the graph within tolerance
        return Ok(Some(1.0));
    }
    let mut hi = 0.125;
    while g(hi)? < 0.0 {
        hi *= 2.0;
        if hi > 4.0 * b.horizon() {
            return Err(RetractError::Geometry(format!("label {target} never reached along the fiber")));
        }
    }
    let s = illinois_root(g, 0.0, hi, 1e-13, 1e-10, 200)?
        .ok_or_else(|| RetractError::Geometry("crossing equation changes no sign".into()))?;
    Ok(Some((-s).exp()))
}

/// Strong deformation retraction at `lambda = 1`: moves the part of the block
/// above the selector along theta onto the selector or, failing a crossing,
/// onto the unstable disk. Everything else is fixed.
pub fn retract_point(sel: &SelectorComplex<'_>, p: &Point) -> Result<Point, RetractError> {
    let b = sel.block();
    let v = b.field().value(p);
    if v > b.upper_level() + b.tol_event() {
        return Err(RetractError::AboveUpperLevel(v));
    }
    let cls = sel.classify_region(p)?;
    if cls.region != Region::NDeform {
        return Ok(p.clone());
    }
    if cls.sigma.is_some_and(f64::is_infinite) {
        return Ok(b.x().clone());
    }
    let fc = b.fiber_coords(p)?;
    if fc.w.norm() <= UNSTABLE_TOL * b.tube_radius() {
        return Ok(p.clone());
    }
    let center = || b.fiber_point(fc.t, &fc.d, &DVector::zeros(fc.w.len()));
    if fc.t >= 2.0 * b.tau() {
        return Ok(center()?);
    }
    match crossing_scale(sel, fc.t, &fc.d, &fc.w)? {
        Some(scale) => Ok(b.fiber_point(fc.t, &fc.d, &(&fc.w * scale))?),
        None => Ok(center()?),
    }
}

/// Branch of the homotopy at a point of `Z`: `h(lambda, p) = phi_{lambda * speed}(p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Branch {
    /// `p` in `A`.
    Identity,
    /// `p` in `X`; the flow runs for the entrance time into `A`.
    EntranceTime(f64),
    /// `p` on the unstable disk with `t >= 2 tau`; runs for `4 tau^2 / t`.
    Recovery(f64),
    /// The critical point itself.
    Fixed,
}

impl Branch {
    pub fn duration(self) -> f64 {
        match self {
            Branch::Identity | Branch::Fixed => 0.0,
            Branch::EntranceTime(t) | Branch::Recovery(t) => t,
        }
    }
}

/// Branch selection for the homotopy.
pub fn homotopy_branch(sel: &SelectorComplex<'_>, p: &Point) -> Result<Branch, RetractError> {
    let b = sel.block();
    let tau = b.tau();
    if b.distance(p, b.x()) <= 1e-12 {
        return Ok(Branch::Fixed);
    }
    let cls = sel.classify_region(p)?;
    match cls.region {
        Region::A => Ok(Branch::Identity),
        Region::SRegion | Region::XMinusSbar => Ok(Branch::EntranceTime(cls.sigma.expect("band points carry sigma"))),
        Region::NDeform => {
            let sigma = cls.sigma.unwrap_or(f64::INFINITY);
            if !sigma.is_finite() || !on_unstable_classified(sel, p, &cls)? {
                return Err(RetractError::NotInZ(Region::NDeform));
            }
            let seam = SEAM_TOL * tau;
            if sigma < 2.0 * tau - seam {
                return Ok(Branch::EntranceTime(sigma));
            }
            let recovery = 4.0 * tau * tau / sigma;
            if sigma <= 2.0 * tau + seam {
                // both formulas apply on the seam and must agree
                let b = sel.block();
                let gap = b.distance(&b.flow().flow_map(p, sigma)?, &b.flow().flow_map(p, recovery)?);
                if gap > 1e-6 {
                    return Err(RetractError::Consistency(gap));
                }
                return Ok(Branch::EntranceTime(sigma));
            }
            Ok(Branch::Recovery(recovery))
        }
        Region::Outside => Err(RetractError::NotInZ(Region::Outside)),
    }
}

/// The homotopy `h(lambda, p)` on `Z`.
pub fn homotopy_h(sel: &SelectorComplex<'_>, lambda: f64, p: &Point) -> Result<Point, RetractError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RetractError::Parameter(lambda));
    }
    let branch = homotopy_branch(sel, p)?;
    Ok(sel.block().flow().flow_map(p, lambda * branch.duration())?)
}

fn on_unstable_classified(sel: &SelectorComplex<'_>, p: &Point, cls: &Classification) -> Result<bool, RetractError> {
    Ok(sel.unstable_distance_classified(p, cls)?.is_some_and(|d| d <= ON_UNSTABLE_TOL))
}

/// True if `p` lies in `M^{c-eps} ∪ W^u_eps`.
pub fn in_b(sel: &SelectorComplex<'_>, p: &Point) -> Result<bool, RetractError> {
    let b = sel.block();
    if b.field().value(p) <= b.lower_level() + LANDING_TOL * b.eps() {
        return Ok(true);
    }
    Ok(sel.on_unstable(p, ON_UNSTABLE_TOL)?)
}

/// True if `p` lies in `Z = X ∪ A ∪ W^u_eps`.
pub fn in_z(sel: &SelectorComplex<'_>, p: &Point) -> Result<bool, RetractError> {
    let cls = sel.classify_region(p)?;
    match cls.region {
        Region::A | Region::SRegion | Region::XMinusSbar => Ok(true),
        Region::NDeform => on_unstable_classified(sel, p, &cls),
        Region::Outside => Ok(false),
    }
}

/// Target of the retraction: `M^{c-eps} ∪ W^u_eps ∪ X`.
pub fn in_target(sel: &SelectorComplex<'_>, p: &Point) -> Result<bool, RetractError> {
    in_z(sel, p)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeamRow {
    pub t: f64,
    pub distance_to_x: f64,
    /// False when the probe offset is below double precision and the row
    /// holds the fiber center instead.
    pub probed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ThresholdRow {
    pub delta: f64,
    /// Distance between the selector crossing and the fiber center at `T = 2 tau - delta`.
    pub below: f64,
    /// Same at `T = 2 tau + delta`, where the retraction returns the center.
    pub above: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RetractionReport {
    pub probes: usize,
    pub moved: usize,
    pub max_idempotence: f64,
    pub target_violations: usize,
    pub max_target_displacement: f64,
    pub seam: Vec<SeamRow>,
    pub seam_cauchy: bool,
    pub threshold: Vec<ThresholdRow>,
    pub threshold_coherent: bool,
    pub passed: bool,
}

/// Random points of the domain near `x` with `f <= c + eps`.
fn band_probes(sel: &SelectorComplex<'_>, count: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let b = sel.block();
    let domain = b.field().domain();
    let n = b.dim();
    let reach = 1.5 * (2.0 * b.eps() / b.critical().margin).sqrt();
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 1000 * count.max(1) {
        tries += 1;
        let off = DVector::from_fn(n, |_, _| rng.gen_range(-reach..reach));
        let p = domain.wrap(&(b.x() + off));
        if domain.contains(&p) && b.field().value(&p) <= b.upper_level() {
            out.push(p);
        }
    }
    out
}

/// Random points of the block above the selector, drawn as fiber points.
fn block_probes(sel: &SelectorComplex<'_>, count: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let b = sel.block();
    let mut out = Vec::with_capacity(count);
    if b.entrance().is_empty() {
        return out;
    }
    let mut tries = 0;
    while out.len() < count && tries < 50 * count.max(1) {
        tries += 1;
        let e = &b.entrance()[rng.gen_range(0..b.entrance().len())];
        let s = rng.gen::<f64>() * (e.label - b.tau());
        if let Ok(p) = b.flow().flow_map(&e.point, s) {
            out.push(p);
        }
    }
    out
}

/// Stable disk point at about half the disk radius.
fn stable_probe(sel: &SelectorComplex<'_>) -> Option<Point> {
    let b = sel.block();
    let mid = b.c() + 0.5 * b.eps();
    b.stable_disk()
        .samples
        .iter()
        .filter(|s| s.trace != usize::MAX)
        .min_by(|x, y| (x.value - mid).abs().total_cmp(&(y.value - mid).abs()))
        .map(|s| Point::from_column_slice(&s.point))
}

/// Idempotence, target membership, stable-seam convergence and coherence
/// at the `T = 2 tau` threshold, on seeded probes.
pub fn verify_retraction(sel: &SelectorComplex<'_>, probe_count: usize, seed: u64) -> Result<RetractionReport, RetractError> {
    let b = sel.block();
    let tau = b.tau();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = block_probes(sel, probe_count / 2, &mut rng);
    let rest = probe_count - probes.len();
    probes.extend(band_probes(sel, rest, &mut rng));
    let rows: Vec<(f64, bool, Option<f64>)> = probes
        .par_iter()
        .map(|p| -> Result<(f64, bool, Option<f64>), RetractError> {
            let r = retract_point(sel, p)?;
            let rr = retract_point(sel, &r)?;
            let ok = in_target(sel, &r)?;
            let fixed = if in_target(sel, p)? { Some(b.distance(&r, p)) } else { None };
            Ok((b.distance(&rr, &r), ok, fixed))
        })
        .collect::<Result<_, _>>()?;
    let max_idempotence = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let target_violations = rows.iter().filter(|r| !r.1).count();
    let max_target_displacement = rows.iter().filter_map(|r| r.2).fold(0.0, f64::max);
    let moved = rows.iter().filter(|r| r.2.is_none()).count();

    let mut seam = Vec::new();
    let mut threshold = Vec::new();
    if let (Some(ps), Some(chart)) = (stable_probe(sel), b.charts().first()) {
        let zeta = b.stable_coords(&ps);
        for m in [2.0, 4.0, 8.0, 16.0] {
            let t = m * tau;
            let (r, probed) = match b.gamma(t, &chart.d, &zeta) {
                Ok(pn) => (retract_point(sel, &pn)?, true),
                // r is constant on fibers with T >= 2 tau: their center
                Err(BlockError::Range(_)) => (b.fiber_point(t, &chart.d, &DVector::zeros(zeta.len()))?, false),
                Err(e) => return Err(e.into()),
            };
            seam.push(SeamRow {
                t,
                distance_to_x: b.distance(&r, b.x()),
                probed,
            });
        }
        // offset deep enough that both sides of the threshold stay in the block
        let mut w = &b.rays()[0] * (0.5 * b.tube_radius());
        while b.offset_label(&chart.d, &w)?.value() < 3.0 * tau {
            w *= 0.5;
        }
        for delta in [0.08, 0.05, 0.03] {
            let mut row = ThresholdRow {
                delta: delta * tau,
                below: 0.0,
                above: 0.0,
            };
            for (side, t) in [(0, 2.0 * tau - delta * tau), (1, 2.0 * tau + delta * tau)] {
                let p = b.fiber_point(t, &chart.d, &w)?;
                let r = retract_point(sel, &p)?;
                let center = b.fiber_point(t, &chart.d, &DVector::zeros(w.len()))?;
                let dist = b.distance(&r, &center);
                if side == 0 {
                    row.below = dist;
                } else {
                    row.above = dist;
                }
            }
            threshold.push(row);
        }
    }
    let seam_cauchy = seam.windows(2).all(|w| w[1].distance_to_x < w[0].distance_to_x)
        && seam
            .windows(3)
            .all(|w| (w[2].distance_to_x - w[1].distance_to_x).abs() < (w[1].distance_to_x - w[0].distance_to_x).abs());
    // the crossing approaches the center as the band narrows; the narrowest
    // band must agree to the tolerance; point fibers have no band at all
    let threshold_coherent = threshold.iter().all(|r| r.above <= THRESHOLD_TOL)
        && threshold.windows(2).all(|w| w[1].below <= w[0].below || w[1].below <= THRESHOLD_TOL)
        && threshold.last().map_or(b.index() == b.dim(), |r| r.below <= THRESHOLD_TOL);
    let passed = max_idempotence <= 1e-5
        && target_violations == 0
        && max_target_displacement <= 1e-8
        && seam_cauchy
        && threshold_coherent;
    Ok(RetractionReport {
        probes: probes.len(),
        moved,
        max_idempotence,
        target_violations,
        max_target_displacement,
        seam,
        seam_cauchy,
        threshold,
        threshold_coherent,
        passed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HomotopyReport {
    pub probes: usize,
    pub distinct_seam_probes: usize,
    /// Max `|T_A|` on probes of `A ∩ X`.
    pub seam_a_residual: f64,
    /// Max `|T_A - 2 tau|` on probes of `phi_{-2 tau} S^u`.
    pub seam_entrance_residual: f64,
    /// Max `|4 tau^2 / t - 2 tau|` on the same probes.
    pub seam_recovery_residual: f64,
    pub identity_residual: f64,
    pub target_violations: usize,
    pub b_invariance_violations: usize,
    /// Largest displacement between consecutive parameter steps, at 32 and
    /// 64 steps.
    pub lambda_modulus: [f64; 2],
    /// Largest displacement of `h_1` over probe pairs at distance `delta`
    /// and `delta / 2`.
    pub spatial_modulus: [f64; 2],
    pub spatial_pairs: usize,
    pub spatial_delta: f64,
    /// Largest `|h_1(p) - p|` over unstable disk probes.
    pub unstable_witness: f64,
    pub flags: HomotopyFlags,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HomotopyFlags {
    pub seam_a: bool,
    pub seam_entrance: bool,
    pub identity: bool,
    pub lands_in_b: bool,
    pub b_invariant: bool,
    pub lambda_continuity: bool,
    pub spatial_continuity: bool,
    pub not_identity_on_unstable: bool,
}

/// Probes of `Z`: points of `A ∩ X`, band points in `X`, and unstable disk
/// points on both sides of `phi_{-2 tau} S^u`.
fn z_probes(sel: &SelectorComplex<'_>, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>, RetractError> {
    let b = sel.block();
    let mut out: Vec<Point> = sel.samples().iter().map(|s| s.base.clone()).take(count / 4).collect();
    for q in b.sphere_points() {
        for m in [0.5, 1.0, 1.5, 2.05, 2.25, 2.5, 3.0, 4.0] {
            out.push(b.flow().flow_map(&q, -m * b.tau())?);
        }
    }
    let band = band_probes(sel, 4 * count, rng);
    let tagged: Vec<bool> = band
        .par_iter()
        .map(|p| in_z(sel, p).unwrap_or(false))
        .collect();
    for (p, ok) in band.into_iter().zip(tagged) {
        if out.len() >= count {
            break;
        }
        if ok {
            out.push(p);
        }
    }
    Ok(out)
}

/// Seam residuals, endpoint conditions, invariance of `B` and sampled
/// continuity of `h` on seeded probes.
pub fn verify_homotopy(sel: &SelectorComplex<'_>, probe_budget: usize, seed: u64) -> Result<HomotopyReport, RetractError> {
    let b = sel.block();
    let tau = b.tau();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = z_probes(sel, probe_budget, &mut rng)?;

    // seams
    let lower: Vec<Point> = sel.samples().iter().map(|s| s.base.clone()).collect();
    let seam_a_residual = lower
        .par_iter()
        .map(|p| b.flow().entrance_time(b.lower_level(), p).map(f64::abs))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let sphere = b.sphere_points();
    let seam_probes: Vec<Point> = (0..20)
        .filter(|_| !sphere.is_empty())
        .map(|i| b.flow().flow_map(&sphere[i % sphere.len()], -2.0 * tau))
        .collect::<Result<_, _>>()?;
    let entrance_times: Vec<f64> = seam_probes
        .par_iter()
        .map(|p| b.flow().entrance_time(b.lower_level(), p))
        .collect::<Result<_, _>>()?;
    let seam_entrance_residual = entrance_times.iter().map(|t| (t - 2.0 * tau).abs()).fold(0.0, f64::max);
    let seam_recovery_residual = entrance_times
        .iter()
        .map(|t| (4.0 * tau * tau / t - 2.0 * tau).abs())
        .fold(0.0, f64::max);

    // per-probe branch, endpoints and parameter continuity
    type Row = (f64, bool, [f64; 2], bool, f64);
    let rows: Vec<Row> = probes
        .par_iter()
        .map(|p| -> Result<Row, RetractError> {
            let branch = homotopy_branch(sel, p)?;
            let d = branch.duration();
            let h0 = b.flow().flow_map(p, 0.0)?;
            let h1 = b.flow().flow_map(p, d)?;
            let lands = in_b(sel, &h1)?;
            let mut moduli = [0.0; 2];
            for (slot, steps) in [(0usize, 32usize), (1, 64)] {
                let mut prev = p.clone();
                for _ in 0..steps {
                    let cur = b.flow().flow_map(&prev, d / steps as f64)?;
                    moduli[slot] = f64::max(moduli[slot], b.distance(&cur, &prev));
                    prev = cur;
                }
            }
            // B is carried into Z by every h_lambda
            let mut b_ok = true;
            if in_b(sel, p)? {
                let mut y = p.clone();
                for _ in 0..8 {
                    y = b.flow().flow_map(&y, d / 8.0)?;
                    b_ok &= in_z(sel, &y)?;
                }
            }
            let witness = if matches!(branch, Branch::Recovery(_)) { b.distance(&h1, p) } else { 0.0 };
            Ok((b.distance(&h0, p), lands, moduli, b_ok, witness))
        })
        .collect::<Result<_, _>>()?;
    let identity_residual = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let target_violations = rows.iter().filter(|r| !r.1).count();
    let lambda_modulus = [
        rows.iter().map(|r| r.2[0]).fold(0.0, f64::max),
        rows.iter().map(|r| r.2[1]).fold(0.0, f64::max),
    ];
    let b_invariance_violations = rows.iter().filter(|r| !r.3).count();
    let unstable_witness = rows.iter().map(|r| r.4).fold(0.0, f64::max);

    // spatial continuity of h_1 on pairs inside Z
    // below the seam radius, where h_1 changes fastest along the unstable disk
    let fastest = b.critical().eigenvalues.iter().fold(0.0_f64, |m, &e| m.max(-e));
    let spatial_delta = (2.0 * b.eps() / b.critical().margin).sqrt() * (-2.0 * tau * fastest).exp() / 64.0;
    let n = b.dim();
    let h = |y: &Point| -> Result<Option<Point>, RetractError> {
        match homotopy_branch(sel, y) {
            Ok(br) => Ok(Some(b.flow().flow_map(y, br.duration())?)),
            Err(RetractError::NotInZ(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let spatial: Vec<Option<[f64; 2]>> = probes
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<Option<[f64; 2]>, RetractError> {
            let Some(hp) = h(p)? else { return Ok(None) };
            // a few quasi-random directions, then along the flow line, which
            // keeps thin parts of Z such as the unstable disk
            let mut dirs: Vec<DVector<f64>> = (0..4)
                .map(|a| {
                    let u = halton((4 * i + a) as u64 + 1, n.max(2));
                    DVector::from_fn(n, |j, _| 2.0 * u[j % u.len()] - 1.0 + 1e-3).normalize()
                })
                .collect();
            let g = b.field().gradient(p);
            if g.norm() > 0.0 {
                dirs.push(g.normalize());
            }
            for dir in dirs {
                let far = b.field().domain().wrap(&(p + &dir * spatial_delta));
                let near = b.field().domain().wrap(&(p + &dir * (0.5 * spatial_delta)));
                if let (Some(hf), Some(hn)) = (h(&far)?, h(&near)?) {
                    return Ok(Some([b.distance(&hp, &hf), b.distance(&hp, &hn)]));
                }
            }
            Ok(None)
        })
        .collect::<Result<_, _>>()?;
    let spatial: Vec<[f64; 2]> = spatial.into_iter().flatten().collect();
    let spatial_modulus = [
        spatial.iter().map(|s| s[0]).fold(0.0, f64::max),
        spatial.iter().map(|s| s[1]).fold(0.0, f64::max),
    ];

    let flags = HomotopyFlags {
        seam_a: seam_a_residual <= 1e-8,
        seam_entrance: !seam_probes.is_empty() && seam_entrance_residual <= 1e-4 && seam_recovery_residual <= 1e-4,
        identity: identity_residual == 0.0,
        lands_in_b: target_violations == 0,
        b_invariant: b_invariance_violations == 0,
        lambda_continuity: lambda_modulus[1] <= 0.75 * lambda_modulus[0] || lambda_modulus[0] == 0.0,
        spatial_continuity: spatial.len() >= SPATIAL_MIN_PAIRS
            && (spatial_modulus[1] <= 0.75 * spatial_modulus[0] || spatial_modulus[0] == 0.0),
        not_identity_on_unstable: unstable_witness > 0.1,
    };
    let passed = flags.seam_a
        && flags.seam_entrance
        && flags.identity
        && flags.lands_in_b
        && flags.b_invariant
        && flags.lambda_continuity
        && flags.spatial_continuity
        && flags.not_identity_on_unstable;
    let mut distinct: Vec<&Point> = Vec::new();
    for p in &seam_probes {
        if distinct.iter().all(|q| b.distance(p, q) > 1e-9) {
            distinct.push(p);
        }
    }
    Ok(HomotopyReport {
        probes: probes.len(),
        distinct_seam_probes: distinct.len(),
        seam_a_residual,
        seam_entrance_residual,
        seam_recovery_residual,
        identity_residual,
        target_violations,
        b_invariance_violations,
        lambda_modulus,
        spatial_modulus,
        spatial_pairs: spatial.len(),
        spatial_delta,
        unstable_witness,
        flags,
        passed,
    })
}

/// Graph height mismatch `T - s(t^-(exit))` at fiber coordinates; zero
/// exactly on the selector.
pub fn crossing_residual(sel: &SelectorComplex<'_>, t: f64, d: &DVector<f64>, w: &DVector<f64>) -> Result<f64, RetractError> {
    let b = sel.block();
    let l = b.offset_label(d, w)?;
    Ok(t - s_reparam(b.tau(), l.value().max(b.tau()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{find_critical, ScalarField};
    use crate::selector::build_selector;
    use crate::thickening::{build_block, ConleyBlock};
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
    fn retract_examples() {
        let sel = build_selector(block(), 10_000).unwrap();
        let r = retract_point(&sel, &pt(&[0.44670, 1.48308])).unwrap();
        assert_abs_diff_eq!(r[0], 0.44459, epsilon = 1e-3);
        assert_abs_diff_eq!(r[1], 1.40412, epsilon = 1e-3);
        // closed-form crossing
        let w_star = (2.0 / (2.5f64.exp() - 1.0)).sqrt();
        assert_abs_diff_eq!(r[1], w_star * 1.2f64.exp(), epsilon = 1e-4);
        let a = pt(&[1.9, 0.2]);
        assert_eq!(retract_point(&sel, &a).unwrap(), a);
        let s = retract_point(&sel, &pt(&[0.0, 1.0])).unwrap();
        assert!(s.norm() < 1e-15);
        assert!(matches!(retract_point(&sel, &pt(&[0.0, 1.9])), Err(RetractError::AboveUpperLevel(_))));
    }

    #[test]
    fn retraction_lands_on_selector() {
        let sel = build_selector(block(), 10_000).unwrap();
        let b = block();
        let p = pt(&[0.44670, 1.48308]);
        let r = retract_point(&sel, &p).unwrap();
        let fc = b.fiber_coords(&r).unwrap();
        assert!(crossing_residual(&sel, fc.t, &fc.d, &fc.w).unwrap().abs() < 1e-5);
    }

    #[test]
    fn homotopy_examples() {
        let sel = build_selector(block(), 10_000).unwrap();
        let a = pt(&[1.9, 0.0]);
        assert_eq!(homotopy_h(&sel, 0.7, &a).unwrap(), a);
        let s = pt(&[2f64.sqrt() * (-2f64).exp(), 0.0]);
        let h = homotopy_h(&sel, 1.0, &s).unwrap();
        assert_abs_diff_eq!(h[0], 2f64.sqrt(), epsilon = 1e-7);
        let x = pt(&[0.0, 0.0]);
        assert_eq!(homotopy_h(&sel, 1.0, &x).unwrap(), x);
        let p = pt(&[0.89953, 0.73648]);
        assert_eq!(homotopy_h(&sel, 0.0, &p).unwrap(), p);
        let h1 = homotopy_h(&sel, 1.0, &p).unwrap();
        assert_abs_diff_eq!(block().field().value(&h1), -1.0, epsilon = 1e-9);
        assert!(matches!(homotopy_h(&sel, 1.0, &pt(&[0.44670, 1.48308])), Err(RetractError::NotInZ(_))));
        assert!(matches!(homotopy_h(&sel, 1.5, &a), Err(RetractError::Parameter(_))));
    }

    #[test]
    fn reports_pass_on_model() {
        let sel = build_selector(block(), 10_000).unwrap();
        let r = verify_retraction(&sel, 40, 3).unwrap();
        assert!(r.passed, "{r:#?}");
        let h = verify_homotopy(&sel, 160, 3).unwrap();
        assert!(h.passed, "{h:#?}");
    }
}
