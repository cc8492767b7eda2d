//! Estimator and clamp curves.
//!
//! - `estimator.csv`: `x` in `[0, 5]` step `1e-3`; `floor(x)` and, for
//!   `T` in {5, 10, 100}, the sigmoid value sum and the backward multiplier.
//! - `clamp.csv`: `x` in `[-25, 25]` step `1e-2`, bounds `[-10, 10]`; hard and
//!   soft clamp and their slopes.
//! - `clamp_ds.csv`: `s` in `(0, 10]` step `1e-2` at `x = 20`; `C(x/s)`,
//!   `Ĉ(x/s)` and their derivatives in `s`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use qat_core::quantizer::{clamp_curve, ClampCurve};
use qat_core::rounding::{sigmoid_ste_value, CodeRange, RoundingEstimator};
use qat_core::softclamp::{hard_clamp, hard_clamp_dx, soft_clamp, soft_clamp_dx, ClampBounds, GateFunction};

use crate::table::{float, Table};

pub const TEMPERATURES: [f64; 3] = [5.0, 10.0, 100.0];
pub const BOUND: f64 = 10.0;
pub const X_AT: f64 = 20.0;

const GATE: GateFunction<f64> = GateFunction::Logistic { beta: 1.0 };

fn bounds() -> ClampBounds<f64> {
    ClampBounds::symmetric(BOUND).expect("valid bounds")
}

pub fn estimator_table() -> anyhow::Result<Table> {
    let mut header = vec!["x".to_string(), "floor".to_string()];
    for t in TEMPERATURES {
        header.push(format!("value_t{t}"));
        header.push(format!("derivative_t{t}"));
    }
    let mut table = Table::new(header);
    for k in 0..=5000 {
        let x = k as f64 / 1000.0;
        let mut row = vec![float(x), float(x.floor())];
        for t in TEMPERATURES {
            let est = RoundingEstimator::sigmoid(t)?;
            row.push(float(sigmoid_ste_value(x, t)?));
            row.push(float(est.multiplier(x, CodeRange::UNBOUNDED)));
        }
        table.push(row);
    }
    Ok(table)
}

pub fn clamp_table() -> Table {
    let b = bounds();
    let mut table = Table::new(["x", "hard", "soft", "hard_dx", "soft_dx"]);
    for k in 0..=5000 {
        let x = -25.0 + k as f64 / 100.0;
        table.push(vec![
            float(x),
            float(hard_clamp(x, b)),
            float(soft_clamp(x, b, GATE)),
            float(hard_clamp_dx(x, b)),
            float(soft_clamp_dx(x, b, GATE)),
        ]);
    }
    table
}

/// `s = k / 100` for `k = 1..=1000`.
pub fn scale_grid() -> Vec<f64> {
    (1..=1000).map(|k| k as f64 / 100.0).collect()
}

pub fn clamp_ds_table() -> anyhow::Result<Table> {
    let grid = scale_grid();
    let curve = |kind| clamp_curve(kind, X_AT, &grid, bounds(), GATE);
    let (hard, soft) = (curve(ClampCurve::Hard)?, curve(ClampCurve::Soft)?);
    let (hard_ds, soft_ds) = (curve(ClampCurve::HardDs)?, curve(ClampCurve::SoftDs)?);
    let mut table = Table::new(["s", "hard", "soft", "hard_ds", "soft_ds"]);
    for i in 0..grid.len() {
        table.push(vec![float(grid[i]), float(hard[i].1), float(soft[i].1), float(hard_ds[i].1), float(soft_ds[i].1)]);
    }
    Ok(table)
}

/// Writes the three curve files into `dir` and returns their paths.
pub fn cmd_curves(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let files =
        [("estimator.csv", estimator_table()?), ("clamp.csv", clamp_table()), ("clamp_ds.csv", clamp_ds_table()?)];
    let mut paths = Vec::new();
    for (name, table) in files {
        let p = dir.join(name);
        table.write(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(t: &Table, name: &str) -> Vec<f64> {
        let i = t.header.iter().position(|h| h == name).unwrap();
        t.rows.iter().map(|r| r[i].parse().unwrap()).collect()
    }

    #[test]
    fn abscissae_are_strictly_increasing_and_values_finite() {
        for (t, x) in [(estimator_table().unwrap(), "x"), (clamp_table(), "x"), (clamp_ds_table().unwrap(), "s")] {
            let xs = column(&t, x);
            assert!(xs.windows(2).all(|w| w[0] < w[1]));
            for r in &t.rows {
                assert!(r.iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
            }
        }
    }

    #[test]
    fn grids_cover_the_stated_ranges() {
        let e = estimator_table().unwrap();
        assert_eq!(e.rows.len(), 5001);
        let c = clamp_table();
        assert_eq!((column(&c, "x")[0], *column(&c, "x").last().unwrap()), (-25.0, 25.0));
        let s = column(&clamp_ds_table().unwrap(), "s");
        assert_eq!((s.len(), s[0], s[999]), (1000, 0.01, 10.0));
    }

    #[test]
    fn spot_values() {
        let e = estimator_table().unwrap();
        let d10 = column(&e, "derivative_t10");
        assert!((d10[1000] - 2.50091).abs() < 1e-5);
        let ds = clamp_ds_table().unwrap();
        let (hard, soft) = (column(&ds, "hard_ds"), column(&ds, "soft_ds"));
        assert_eq!(hard[99], 0.0);
        assert_eq!(hard[399], -1.25);
        assert!((soft[99] - 8.17e-3).abs() < 1e-5, "{}", soft[99]);
    }
}
