//! Multi-variant, multi-seed sweeps and the after-the-fact report reader.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Variant};
use crate::dataio;
use crate::error::{HarnessError, Result};
use crate::eval::{self, parse_metrics_csv, MetricsRow};
use crate::runio::RunDir;
use crate::svg::{self, Series};
use crate::train;

/// Mean and range of one (variant, eta, task) cell across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggRow {
    pub variant: String,
    pub dataset: String,
    pub eta: f64,
    pub task: String,
    pub seeds: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub struct SweepOutcome {
    /// Every per-run metrics row that was produced or reused.
    pub rows: Vec<MetricsRow>,
    pub aggregated: Vec<AggRow>,
    /// Human-readable descriptions of runs that could not be completed.
    pub gaps: Vec<String>,
}

/// Train (or reuse) and evaluate one configuration, returning its metrics
/// rows. An existing run directory with an identical config.json and a
/// metrics.csv is trusted as-is — re-running is bit-identical by contract.
pub fn run_one(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let dir = RunDir::create(cfg)?;

    if dir.metrics_path().is_file() {
        if let Ok(existing) = dir.read_config() {
            if &existing == cfg {
                let text = fs::read_to_string(dir.metrics_path())
                    .map_err(|e| HarnessError::io(&dir.metrics_path(), e))?;
                return parse_metrics_csv(&text);
            }
        }
    }

    let (train_set, test_set) = dataio::load_pair_datasets(
        &cfg.data_dir,
        cfg.dataset.source(),
        cfg.n_train,
        cfg.n_test,
        cfg.seed,
    )?;
    let mut run = train::train(cfg, &train_set, &dir)?;
    let rows = eval::evaluate(&mut run, &test_set, &cfg.etas)?;
    eval::write_reports(&dir, &rows)?;
    Ok(rows)
}

/// The full grid: every variant × seed on the base config's dataset. Failed
/// cells become explicit gaps rather than aborting the sweep.
pub fn sweep(base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<SweepOutcome> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            match run_one(&cfg) {
                Ok(mut r) => rows.append(&mut r),
                Err(e) => gaps.push(format!("{} seed {seed}: {e}", variant.as_str())),
            }
        }
    }
    let aggregated = aggregate(&rows);
    Ok(SweepOutcome { rows, aggregated, gaps })
}

/// Group metrics rows by (variant, dataset, eta, task) and fold seeds into
/// mean/min/max. Order follows first appearance, so reports read in run
/// order.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggRow> {
    let mut keys: Vec<(String, String, f64, String)> = Vec::new();
    for r in rows {
        let key = (r.variant.clone(), r.dataset.clone(), r.eta, r.task.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(variant, dataset, eta, task)| {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.variant == variant && r.dataset == dataset && r.eta == eta && r.task == task
                })
                .map(|r| r.accuracy)
                .collect();
            let n = accs.len();
            AggRow {
                variant,
                dataset,
                eta,
                task,
                seeds: n,
                mean: accs.iter().sum::<f64>() / n as f64,
                min: accs.iter().cloned().fold(f64::INFINITY, f64::min),
                max: accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

pub fn sweep_csv(aggs: &[AggRow]) -> String {
    let mut out = String::from("variant,dataset,eta,task,seeds,mean,min,max\n");
    for a in aggs {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            a.variant, a.dataset, a.eta, a.task, a.seeds, a.mean, a.min, a.max
        ));
    }
    out
}

/// Joint accuracy vs η, one series per variant (seed means).
pub fn sweep_chart(aggs: &[AggRow], dataset: &str) -> String {
    let mut variants: Vec<String> = Vec::new();
    for a in aggs {
        if a.task == "joint" && !variants.contains(&a.variant) {
            variants.push(a.variant.clone());
        }
    }
    let series: Vec<Series> = variants
        .iter()
        .map(|v| Series {
            name: v.clone(),
            points: aggs
                .iter()
                .filter(|a| &a.variant == v && a.task == "joint")
                .map(|a| (a.eta, a.mean))
                .collect(),
        })
        .collect();
    svg::line_chart(
        &format!("Joint accuracy vs eta ({dataset})"),
        "eta",
        "joint accuracy",
        &series,
        Some((0.0, 1.0)),
    )
}

/// Persist sweep.csv and sweep.svg under `out_dir`.
pub fn write_sweep(out_dir: &Path, outcome: &SweepOutcome, dataset: &str) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let csv = out_dir.join("sweep.csv");
    fs::write(&csv, sweep_csv(&outcome.aggregated)).map_err(|e| HarnessError::io(&csv, e))?;
    let chart = out_dir.join("sweep.svg");
    fs::write(&chart, sweep_chart(&outcome.aggregated, dataset))
        .map_err(|e| HarnessError::io(&chart, e))?;
    Ok(())
}

/// Render the aggregated table plus any gaps as terminal text.
pub fn format_outcome(outcome: &SweepOutcome) -> String {
    let mut out = String::new();
    out.push_str(&format_agg_table(&outcome.aggregated));
    if !outcome.gaps.is_empty() {
        out.push_str("\nIncomplete cells:\n");
        for gap in &outcome.gaps {
            out.push_str(&format!("  - {gap}\n"));
        }
    }
    out
}

fn format_agg_table(aggs: &[AggRow]) -> String {
    let mut etas: Vec<f64> = Vec::new();
    for a in aggs {
        if !etas.contains(&a.eta) {
            etas.push(a.eta);
        }
    }
    etas.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut lines = String::new();
    let mut headed: BTreeSet<(String, String)> = BTreeSet::new();
    for a in aggs {
        headed.insert((a.variant.clone(), a.dataset.clone()));
    }
    for (variant, dataset) in headed {
        lines.push_str(&format!("\n{variant} on {dataset}\n"));
        lines.push_str(&format!("  {:<8}", "task"));
        for &eta in &etas {
            lines.push_str(&format!("  eta={eta:<6}"));
        }
        lines.push('\n');
        let mut tasks: Vec<String> = Vec::new();
        for a in aggs {
            if a.variant == variant && a.dataset == dataset && !tasks.contains(&a.task) {
                tasks.push(a.task.clone());
            }
        }
        for task in tasks {
            lines.push_str(&format!("  {task:<8}"));
            for &eta in &etas {
                match aggs.iter().find(|a| {
                    a.variant == variant && a.dataset == dataset && a.task == task && a.eta == eta
                }) {
                    Some(a) if a.seeds > 1 => {
                        lines.push_str(&format!("  {:.3}±{:.3}", a.mean, (a.max - a.min) / 2.0))
                    }
                    Some(a) => lines.push_str(&format!("  {:.3}     ", a.mean)),
                    None => lines.push_str("  —        "),
                }
            }
            lines.push('\n');
        }
    }
    lines
}

/// Read every run directory under `out_dir` and render a report; runs
/// without metrics are listed as gaps instead of failing the report.
pub fn report(out_dir: &Path) -> Result<String> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut gaps: Vec<String> = Vec::new();

    let entries = fs::read_dir(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("config.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(HarnessError::Report(format!(
            "no run directories under {}",
            out_dir.display()
        )));
    }

    for dir in dirs {
        let metrics = dir.join("metrics.csv");
        if metrics.is_file() {
            let text =
                fs::read_to_string(&metrics).map_err(|e| HarnessError::io(&metrics, e))?;
            rows.append(&mut parse_metrics_csv(&text)?);
        } else {
            gaps.push(format!(
                "{}: trained but not evaluated (no metrics.csv — run `mtvib eval --run {}`)",
                dir.file_name().unwrap_or_default().to_string_lossy(),
                dir.display()
            ));
        }
    }

    let outcome = SweepOutcome { aggregated: aggregate(&rows), rows, gaps };
    Ok(format_outcome(&outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, seed: u64, eta: f64, task: &str, accuracy: f64) -> MetricsRow {
        MetricsRow {
            run_id: format!("{variant}-mnist-desk-k2-s{seed}-e10-b1e-3"),
            variant: variant.into(),
            dataset: "mnist".into(),
            seed,
            eta,
            task: task.into(),
            accuracy,
        }
    }

    #[test]
    fn aggregation_folds_seeds_into_mean_and_range() {
        let rows = vec![
            row("mtvib", 1, 0.0, "joint", 0.9),
            row("mtvib", 2, 0.0, "joint", 0.8),
            row("mtvib", 3, 0.0, "joint", 0.85),
            row("gs", 1, 0.0, "joint", 0.7),
        ];
        let aggs = aggregate(&rows);
        assert_eq!(aggs.len(), 2);
        let m = &aggs[0];
        assert_eq!(m.variant, "mtvib");
        assert_eq!(m.seeds, 3);
        assert!((m.mean - 0.85).abs() < 1e-12);
        assert_eq!((m.min, m.max), (0.8, 0.9));
        // Single seed degenerates to the evaluate output.
        assert_eq!((aggs[1].mean, aggs[1].seeds), (0.7, 1));
    }

    #[test]
    fn chart_draws_only_joint_series() {
        let rows = vec![
            row("mtvib", 1, 0.0, "1", 0.95),
            row("mtvib", 1, 0.0, "joint", 0.9),
            row("mtvib", 1, 0.3, "joint", 0.5),
            row("gs", 1, 0.0, "joint", 0.85),
            row("gs", 1, 0.3, "joint", 0.3),
        ];
        let svg = sweep_chart(&aggregate(&rows), "mnist");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("mtvib") && svg.contains("gs"));
    }

    #[test]
    fn report_on_an_empty_directory_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(report(tmp.path()).is_err());
    }

    #[test]
    fn table_marks_missing_cells() {
        let outcome = SweepOutcome {
            aggregated: aggregate(&[
                row("mtvib", 1, 0.0, "joint", 0.9),
                row("mtvib", 1, 0.3, "joint", 0.5),
                row("gs", 1, 0.0, "joint", 0.8),
            ]),
            rows: vec![],
            gaps: vec!["gs seed 2: loss diverged at epoch 1, batch 0".into()],
        };
        let text = format_outcome(&outcome);
        assert!(text.contains("—"), "missing gs cell at eta=0.3 should render as a dash:\n{text}");
        assert!(text.contains("Incomplete cells"));
        assert!(text.contains("gs seed 2"));
    }
}
