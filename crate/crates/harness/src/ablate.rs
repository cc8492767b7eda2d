//! Ablation grids over clamp mode and estimator temperature.
//!
//! Every cell trains from the same seed, so initial weights and data order
//! agree and only the quantizer path differs. Cells run on independent
//! worker threads (count from [`WORKERS_ENV`](crate::WORKERS_ENV), default
//! the number of CPUs) and each writes under its own `cells/<clamp>_t<T>/`
//! directory. The merged `ablation.csv`, `scales.csv` and `report.txt`
//! depend only on the results, never on timing or scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, ensure, Context};

use crate::config::{ClampKind, EstimatorSpec, ExperimentConfig};
use crate::corpus::Corpus;
use crate::table::{float, Table};
use crate::train::{run_to_dir, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub temperatures: Vec<f64>,
    pub clamps: Vec<ClampKind>,
}

impl Grid {
    /// Parses `T=0,5,10,100` and `hard,soft`.
    pub fn parse(temperatures: &str, clamps: &str) -> anyhow::Result<Self> {
        let list = temperatures.strip_prefix("T=").context("grid must look like T=0,5,10,100")?;
        let temperatures = list
            .split(',')
            .map(|t| {
                let v: f64 = t.trim().parse().with_context(|| format!("bad temperature `{t}`"))?;
                ensure!(v.is_finite() && v >= 0.0, "temperature must be finite and non-negative, got {v}");
                Ok(v)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let clamps =
            clamps.split(',').map(|c| c.parse().map_err(anyhow::Error::msg)).collect::<anyhow::Result<Vec<_>>>()?;
        let grid = Self { temperatures, clamps };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.temperatures.is_empty() && !self.clamps.is_empty(), "empty ablation grid");
        for (i, t) in self.temperatures.iter().enumerate() {
            ensure!(!self.temperatures[..i].contains(t), "temperature {t} listed twice");
        }
        for (i, c) in self.clamps.iter().enumerate() {
            ensure!(!self.clamps[..i].contains(c), "clamp mode {} listed twice", c.label());
        }
        Ok(())
    }

    /// Clamp-major cell order.
    pub fn cells(&self) -> Vec<(ClampKind, f64)> {
        self.clamps.iter().flat_map(|&c| self.temperatures.iter().map(move |&t| (c, t))).collect()
    }
}

pub fn cell_config(base: &ExperimentConfig, clamp: ClampKind, temperature: f64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.estimator = EstimatorSpec::from_temperature(temperature);
    cfg.clamp.mode = clamp;
    cfg
}

pub fn cell_name(clamp: ClampKind, temperature: f64) -> String {
    format!("{}_t{temperature}", clamp.label())
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub clamp: ClampKind,
    pub temperature: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub grid: Grid,
    pub cells: Vec<Cell>,
}

/// `QAT_WORKERS`, else the available parallelism.
pub fn worker_count() -> anyhow::Result<usize> {
    match std::env::var(crate::WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{} must be a positive integer, got `{v}`", crate::WORKERS_ENV))?;
            ensure!(n > 0, "{} must be a positive integer, got 0", crate::WORKERS_ENV);
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run_grid(base: &ExperimentConfig, grid: &Grid, out: &Path, workers: usize) -> anyhow::Result<AblationReport> {
    base.validate()?;
    grid.validate()?;
    let corpus = Corpus::load(base.corpus.as_deref())?;
    let specs = grid.cells();
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<anyhow::Result<TrainOutcome>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers.clamp(1, specs.len()))
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&(clamp, t)) = specs.get(i) else { break };
                        let dir = out.join("cells").join(cell_name(clamp, t));
                        done.push((i, run_to_dir(&cell_config(base, clamp, t), &corpus, &dir)));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut cells = Vec::new();
    for ((clamp, temperature), r) in specs.into_iter().zip(results) {
        let outcome = r.expect("every cell ran").with_context(|| format!("cell {}", cell_name(clamp, temperature)))?;
        cells.push(Cell { clamp, temperature, outcome });
    }
    Ok(AblationReport { grid: grid.clone(), cells })
}

impl AblationReport {
    pub fn cell(&self, clamp: ClampKind, temperature: f64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.clamp == clamp && c.temperature == temperature)
    }

    pub fn shared_init(&self) -> bool {
        self.cells.windows(2).all(|w| w[0].outcome.init_checksum == w[1].outcome.init_checksum)
    }

    pub fn results_table(&self) -> Table {
        let mut t = Table::new([
            "clamp",
            "temperature",
            "initial_loss",
            "final_train_loss",
            "eval_loss",
            "eval_ppl",
            "steps_run",
            "nan",
            "init_checksum",
        ]);
        for c in &self.cells {
            let o = &c.outcome;
            t.push(vec![
                c.clamp.label().into(),
                float(c.temperature),
                float(o.initial_loss),
                float(o.final_train_loss),
                float(o.eval_loss),
                float(o.eval_ppl),
                o.steps_run.to_string(),
                o.nan.to_string(),
                o.init_checksum.clone(),
            ]);
        }
        t
    }

    pub fn scales_table(&self) -> Table {
        let mut t = Table::new(["clamp", "temperature", "quantizer", "min", "max", "final"]);
        for c in &self.cells {
            for s in &c.outcome.scales {
                t.push(vec![
                    c.clamp.label().into(),
                    float(c.temperature),
                    s.name.clone(),
                    float(s.min),
                    float(s.max),
                    float(s.last),
                ]);
            }
        }
        t
    }

    fn entry(&self, clamp: ClampKind, t: f64) -> String {
        match self.cell(clamp, t) {
            Some(c) if c.outcome.nan => "NaN".into(),
            Some(c) => format!("{:.4} ({:.4})", c.outcome.eval_ppl, c.outcome.final_train_loss),
            None => "-".into(),
        }
    }

    /// Human-readable summary: the clamp × temperature table and, when the
    /// grid contains them, the four-cell comparison of plain STE, sigmoid STE
    /// and soft clamping.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let width = 22;
        writeln!(s, "eval perplexity (final train loss)").unwrap();
        write!(s, "{:<8}", "clamp").unwrap();
        for t in &self.grid.temperatures {
            write!(s, "{:>width$}", format!("T={t}")).unwrap();
        }
        writeln!(s).unwrap();
        for &c in &self.grid.clamps {
            write!(s, "{:<8}", c.label()).unwrap();
            for &t in &self.grid.temperatures {
                write!(s, "{:>width$}", self.entry(c, t)).unwrap();
            }
            writeln!(s).unwrap();
        }
        let subset = [
            ("T=0", ClampKind::Hard, 0.0),
            ("T=100", ClampKind::Hard, 100.0),
            ("T=0+SC", ClampKind::Soft, 0.0),
            ("T=100+SC", ClampKind::Soft, 100.0),
        ];
        if subset.iter().any(|&(_, c, t)| self.cell(c, t).is_some()) {
            writeln!(s).unwrap();
            for (label, c, t) in subset {
                writeln!(s, "{label:<10}{:>width$}", self.entry(c, t)).unwrap();
            }
        }
        writeln!(s).unwrap();
        let flagged: Vec<String> =
            self.cells.iter().filter(|c| c.outcome.nan).map(|c| cell_name(c.clamp, c.temperature)).collect();
        writeln!(s, "non-finite cells: {}", if flagged.is_empty() { "none".into() } else { flagged.join(", ") })
            .unwrap();
        writeln!(s, "shared initial weights: {}", if self.shared_init() { "yes" } else { "no" }).unwrap();
        if let (Some(a), Some(b)) = (self.cell(ClampKind::Hard, 0.0), self.cell(ClampKind::Soft, 100.0)) {
            if !a.outcome.nan && !b.outcome.nan {
                let verdict = if b.outcome.eval_ppl < a.outcome.eval_ppl { "lower" } else { "not lower" };
                writeln!(s, "soft/T=100 eval perplexity is {verdict} than hard/T=0").unwrap();
            }
        }
        s
    }

    /// Writes `ablation.csv`, `scales.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        let paths = [dir.join("ablation.csv"), dir.join("scales.csv"), dir.join("report.txt")];
        self.results_table().write(&paths[0])?;
        self.scales_table().write(&paths[1])?;
        std::fs::write(&paths[2], self.render()).with_context(|| format!("cannot write {}", paths[2].display()))?;
        Ok(paths.to_vec())
    }
}

pub fn cmd_ablate(config: &Path, grid: &Grid, out: &Path) -> anyhow::Result<AblationReport> {
    let base = ExperimentConfig::load(config)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let report = run_grid(&base, grid, out, worker_count()?)?;
    if report.cells.len() != grid.cells().len() {
        bail!("ablation produced {} cells for a grid of {}", report.cells.len(), grid.cells().len());
    }
    report.write(out)?;
    Ok(report)
}
