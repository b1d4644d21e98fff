//! Stage orchestration and the JSON report.

use dynthick::field::{find_critical, verify_isolation, CriticalPoint, IsolationReport, ScalarField};
use dynthick::homology::{attach_cell_check, betti_euler, build_complex, AttachVerdict, BettiVector, NearCritical};
use dynthick::retract::{verify_homotopy, verify_retraction, HomotopyReport, RetractionReport};
use dynthick::selector::{build_selector, TransversalityReport, ANGLE_THRESHOLD};
use dynthick::thickening::{
    build_block_with_config, gamma_convergence, verify_fiber_invariance, ConleyBlock, FiberInvarianceReport, GammaReport,
};
use serde::Serialize;

use crate::scenario::Scenario;

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Critical,
    Block,
    Selector,
    Retract,
    Homotopy,
    Homology,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalSection {
    pub location: Vec<f64>,
    pub value: f64,
    pub index: usize,
    pub eigenvalues: Vec<f64>,
    pub margin: f64,
    pub isolation: IsolationReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockSection {
    pub lower_level: f64,
    pub upper_level: f64,
    pub horizon: f64,
    pub tube_radius: f64,
    pub charts: usize,
    pub entrance_samples: usize,
    pub discarded_entrance: usize,
    pub component_nodes: usize,
    pub fiber_invariance: FiberInvarianceReport,
    /// Absent when the stable disk is a point.
    pub gamma: Option<GammaReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectorSection {
    pub samples: usize,
    pub transversality: TransversalityReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct HomologyLevel {
    pub level: f64,
    pub grid: usize,
    pub betti: BettiVector,
    pub cells: Vec<usize>,
    pub near_critical: Option<NearCritical>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HomologySection {
    pub k: usize,
    pub below: Vec<HomologyLevel>,
    pub above: Vec<HomologyLevel>,
    pub verdicts: Vec<AttachVerdict>,
    /// Betti vectors agree across grids at each level.
    pub resolution_stable: bool,
    pub filtration_monotone: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub eps: f64,
    pub tau: f64,
    pub critical: Option<CriticalSection>,
    pub block: Option<BlockSection>,
    pub selector: Option<SelectorSection>,
    pub retraction: Option<RetractionReport>,
    pub homotopy: Option<HomotopyReport>,
    pub homology: Option<HomologySection>,
    pub warnings: Vec<String>,
    pub failure: Option<StageFailure>,
    /// Suites that ran and did not pass.
    pub failed_checks: Vec<String>,
    pub passed: bool,
}

impl Report {
    /// Pass verdict; with `strict`, warnings count as failures.
    pub fn verdict(&self, strict: bool) -> bool {
        self.passed && (!strict || self.warnings.is_empty())
    }
}

fn fail<E: std::fmt::Display>(stage: Stage) -> impl FnOnce(E) -> StageFailure {
    move |e| StageFailure {
        stage,
        error: e.to_string(),
    }
}

/// Which suites to run: the block pipeline up to `upto`, and homology.
#[derive(Clone, Copy, Debug)]
pub struct Plan {
    pub upto: Option<Stage>,
    pub homology: bool,
}

impl Plan {
    pub fn full() -> Self {
        Plan {
            upto: Some(Stage::Homotopy),
            homology: true,
        }
    }

    fn runs(&self, stage: Stage) -> bool {
        self.upto.is_some_and(|u| stage <= u)
    }
}

pub fn run(sc: &Scenario, plan: Plan) -> Report {
    let mut report = Report {
        scenario: sc.name.clone(),
        seed: sc.seed,
        eps: sc.eps,
        tau: sc.tau,
        ..Report::default()
    };
    if let Err(f) = run_stages(sc, plan, &mut report) {
        report.failure = Some(f);
    }
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: Option<bool>| {
        if ok == Some(false) {
            failed.push(name.to_string());
        }
    };
    check("isolation", report.critical.as_ref().map(|c| c.isolation.isolated));
    check("fiber_invariance", report.block.as_ref().map(|b| b.fiber_invariance.passed));
    check("gamma", report.block.as_ref().and_then(|b| b.gamma.as_ref()).map(|g| g.passed));
    check("transversality", report.selector.as_ref().map(|s| s.transversality.passed));
    check("retraction", report.retraction.as_ref().map(|r| r.passed));
    check("homotopy", report.homotopy.as_ref().map(|h| h.passed));
    check("homology", report.homology.as_ref().map(|h| h.passed));
    report.failed_checks = failed;
    report.passed = report.failure.is_none() && report.failed_checks.is_empty();
    report
}

fn run_stages(sc: &Scenario, plan: Plan, report: &mut Report) -> Result<(), StageFailure> {
    let field = sc.build_field().map_err(fail(Stage::Critical))?;
    let cp = find_critical(&field, &sc.seed_point()).map_err(fail(Stage::Critical))?;
    let isolation = verify_isolation(&field, &cp.location, sc.eps, sc.budgets.isolation_probes);
    report.critical = Some(critical_section(&cp, isolation));
    if plan.homology {
        homology_stage(sc, &field, &cp, report)?;
    }
    if !plan.runs(Stage::Block) {
        return Ok(());
    }
    let cfg = sc.block_config(field.dim(), cp.index);
    let block = build_block_with_config(&field, &cp, sc.eps, sc.tau, cfg).map_err(fail(Stage::Block))?;
    report.block = Some(block_section(sc, &block).map_err(fail(Stage::Block))?);
    if !plan.runs(Stage::Selector) {
        return Ok(());
    }
    let sel = build_selector(&block, sc.budgets.selector_samples).map_err(fail(Stage::Selector))?;
    let transversality = sel
        .verify_transversality_with(
            sc.budgets.transversality_label * sc.tau,
            sc.tolerances.transversality_angle.unwrap_or(ANGLE_THRESHOLD),
        )
        .map_err(fail(Stage::Selector))?;
    report.selector = Some(SelectorSection {
        samples: sel.samples().len(),
        transversality,
    });
    if !plan.runs(Stage::Retract) {
        return Ok(());
    }
    report.retraction = Some(
        verify_retraction(&sel, sc.budgets.retraction_probes, sc.seed).map_err(fail(Stage::Retract))?,
    );
    if !plan.runs(Stage::Homotopy) {
        return Ok(());
    }
    report.homotopy = Some(verify_homotopy(&sel, sc.budgets.homotopy_probes, sc.seed).map_err(fail(Stage::Homotopy))?);
    Ok(())
}

fn critical_section(cp: &CriticalPoint, isolation: IsolationReport) -> CriticalSection {
    CriticalSection {
        location: cp.location.iter().copied().collect(),
        value: cp.value,
        index: cp.index,
        eigenvalues: cp.eigenvalues.iter().copied().collect(),
        margin: cp.margin,
        isolation,
    }
}

fn block_section(sc: &Scenario, block: &ConleyBlock) -> Result<BlockSection, dynthick::BlockError> {
    let fiber_invariance = verify_fiber_invariance(block, sc.budgets.fiber_pairs, sc.seed)?;
    let gamma = if block.index() < block.dim() && !block.charts().is_empty() {
        Some(gamma_convergence(block, &sc.budgets.gamma_multiples)?)
    } else {
        None
    };
    Ok(BlockSection {
        lower_level: block.lower_level(),
        upper_level: block.upper_level(),
        horizon: block.horizon(),
        tube_radius: block.tube_radius(),
        charts: block.charts().len(),
        entrance_samples: block.entrance().len(),
        discarded_entrance: block.discarded_entrance(),
        component_nodes: block.component().member_count(),
        fiber_invariance,
        gamma,
    })
}

/// Sublevel homology at `c - eps` and `c + eps` on both grids.
pub fn homology_section(sc: &Scenario, field: &ScalarField, c: f64, k: usize) -> Result<HomologySection, StageFailure> {
    let grids = [sc.grid, sc.check_grid()];
    let mut below = Vec::new();
    let mut above = Vec::new();
    let mut monotone = true;
    for &g in &grids {
        let lo = build_complex(field, c - sc.eps, g).map_err(fail(Stage::Homology))?;
        let hi = build_complex(field, c + sc.eps, g).map_err(fail(Stage::Homology))?;
        monotone &= lo.is_subcomplex_of(&hi);
        for (cx, out) in [(&lo, &mut below), (&hi, &mut above)] {
            out.push(HomologyLevel {
                level: cx.level(),
                grid: g,
                betti: betti_euler(cx).map_err(fail(Stage::Homology))?,
                cells: cx.cell_counts(),
                near_critical: cx.near_critical().cloned(),
            });
        }
    }
    let verdicts: Vec<AttachVerdict> = below
        .iter()
        .zip(&above)
        .map(|(b, a)| attach_cell_check(&b.betti, &a.betti, k))
        .collect();
    let stable = |v: &[HomologyLevel]| v.windows(2).all(|w| w[0].betti.ranks == w[1].betti.ranks);
    let resolution_stable = stable(&below) && stable(&above);
    let passed = resolution_stable && monotone && verdicts.iter().all(|v| v.passed);
    Ok(HomologySection {
        k,
        below,
        above,
        verdicts,
        resolution_stable,
        filtration_monotone: monotone,
        passed,
    })
}

fn homology_stage(sc: &Scenario, field: &ScalarField, cp: &CriticalPoint, report: &mut Report) -> Result<(), StageFailure> {
    let section = homology_section(sc, field, cp.value, cp.index)?;
    for lvl in section.below.iter().chain(&section.above) {
        if let Some(w) = &lvl.near_critical {
            report.warnings.push(format!(
                "level {} at grid {} is near-critical (min |grad f| {:.3e} < {:.3e}); refine the grid or move the level",
                lvl.level, lvl.grid, w.min_gradient, w.threshold
            ));
        }
    }
    report.homology = Some(section);
    Ok(())
}

/// Deterministic JSON rendering of a report.
pub fn render(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
