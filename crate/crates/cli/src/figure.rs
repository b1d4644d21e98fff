//! CSV point clouds for planar scenarios: block, fibers, selector and orbits.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dynthick::field::{find_critical, Point};
use dynthick::selector::{build_selector, SampleSource};
use dynthick::thickening::{build_block_with_config, ConleyBlock};
use nalgebra::DVector;

use crate::scenario::Scenario;

/// Fiber heights drawn in `fibers.csv`, in units of tau.
pub const FIBER_HEIGHTS: [f64; 4] = [1.2, 1.5, 2.0, 3.0];
const FIBER_OFFSETS: usize = 81;
const ORBIT_PROBES: usize = 4;

pub const HEADER: [&str; 4] = ["x", "y", "tag", "parameter"];

/// Nine significant digits, plain decimal where that stays readable.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let mag = v.abs().log10().floor() as i32;
    if (-4..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

struct Sheet {
    rows: Vec<[String; 4]>,
}

impl Sheet {
    fn new() -> Self {
        Sheet { rows: Vec::new() }
    }

    fn push(&mut self, p: &Point, tag: &str, parameter: f64) {
        self.rows.push([sig9(p[0]), sig9(p[1]), tag.to_string(), sig9(parameter)]);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn block_sheet(block: &ConleyBlock) -> Sheet {
    let mut s = Sheet::new();
    for p in block.component().boundary_nodes() {
        s.push(&p, "boundary", block.field().value(&p));
    }
    for e in block.entrance() {
        s.push(&e.point, "Nplus", e.label);
    }
    for (mesh, tag) in [(block.unstable_disk(), "Wu"), (block.stable_disk(), "Ws")] {
        for d in &mesh.samples {
            s.push(&Point::from_column_slice(&d.point), tag, d.value);
        }
    }
    s
}

/// Normal offsets along the stable direction, for codimension one only.
fn offsets(block: &ConleyBlock) -> Vec<DVector<f64>> {
    let m = block.dim() - block.index();
    if m == 0 {
        return vec![DVector::zeros(0)];
    }
    if m != 1 {
        return Vec::new();
    }
    let r = block.tube_radius();
    (0..FIBER_OFFSETS)
        .map(|i| DVector::from_element(1, r * (2.0 * i as f64 / (FIBER_OFFSETS - 1) as f64 - 1.0)))
        .collect()
}

fn fiber_sheet(block: &ConleyBlock) -> Result<Sheet> {
    let mut s = Sheet::new();
    let ws = offsets(block);
    for m in FIBER_HEIGHTS {
        let t = m * block.tau();
        for chart in block.charts() {
            for w in &ws {
                // keep the fiber inside the block: its label must reach T
                if block.offset_label(&chart.d, w)?.value() < t {
                    continue;
                }
                s.push(&block.fiber_point(t, &chart.d, w)?, "fiber", t);
            }
        }
    }
    Ok(s)
}

fn orbit_sheet(block: &ConleyBlock) -> Result<Sheet> {
    let mut s = Sheet::new();
    let entrance = block.entrance();
    if entrance.is_empty() {
        return Ok(s);
    }
    let tau = block.tau();
    for i in 0..ORBIT_PROBES {
        let e = &entrance[i * entrance.len() / ORBIT_PROBES];
        let traj = block.flow().trajectory_to_level(&e.point, block.lower_level(), block.horizon())?;
        for smp in &traj.samples {
            s.push(&block.field().domain().wrap(&smp.point), "phi_orbit", smp.time);
        }
        let p = block.flow().flow_map(&e.point, 0.5 * (e.label - tau))?;
        for j in 0..=40 {
            let step = 0.1 * j as f64 * tau;
            s.push(&block.theta_step(&p, step)?, "theta_orbit", step);
        }
    }
    Ok(s)
}

/// Writes `block.csv`, `fibers.csv`, `selector.csv` and `orbits.csv` into
/// `out`, returning their paths.
pub fn emit(sc: &Scenario, out: &Path) -> Result<Vec<PathBuf>> {
    let field = sc.build_field()?;
    if field.dim() != 2 {
        bail!("figure data needs a planar field, got dimension {}", field.dim());
    }
    let cp = find_critical(&field, &sc.seed_point()).context("critical point")?;
    let cfg = sc.block_config(2, cp.index);
    let block = build_block_with_config(&field, &cp, sc.eps, sc.tau, cfg).context("block")?;
    let sel = build_selector(&block, sc.budgets.selector_samples).context("selector")?;

    let mut selector = Sheet::new();
    for smp in sel.samples() {
        let label = smp.label.value();
        match smp.source {
            SampleSource::Sphere { .. } => {
                selector.push(&smp.base, "Sminus_on_Su", label);
                selector.push(&smp.point, "Splus_on_Wu", smp.height);
            }
            SampleSource::Entrance { .. } => {
                selector.push(&smp.base, "Sminus", label);
                selector.push(&smp.point, "Splus", label);
            }
        }
    }

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let sheets = [
        ("block.csv", block_sheet(&block)),
        ("fibers.csv", fiber_sheet(&block)?),
        ("selector.csv", selector),
        ("orbits.csv", orbit_sheet(&block)?),
    ];
    let mut paths = Vec::new();
    for (name, sheet) in &sheets {
        let path = out.join(name);
        sheet.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::sig9;

    #[test]
    fn nine_digits() {
        assert_eq!(sig9(0.191_400_000_123), "0.1914");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(-1.234_567_891_23), "-1.23456789");
        assert_eq!(sig9(123_456_789.4), "123456789");
        assert_eq!(sig9(1.5e-7), "1.50000000e-7");
        assert_eq!(sig9(0.0), "0");
    }
}
