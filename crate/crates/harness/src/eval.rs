//! Evaluation: per-task and joint accuracy under FGSM perturbation, the
//! metrics.csv report, and the accuracy-vs-η chart.

use mtvib_core::attack::{fgsm_perturb, AttackConfig};
use mtvib_core::data::Dataset;
use mtvib_core::models::{Mode, ModelBundle};
use mtvib_core::multitask::{argmax_rows, scaled_softmax};
use mtvib_core::rng::{stream_rng, streams};
use mtvib_core::{Element, Graph};

use crate::error::{HarnessError, Result};
use crate::runio::RunDir;
use crate::svg::{self, Series};
use crate::train::TrainedRun;
use crate::Elem;

/// One metrics.csv row. `task` is a 1-based task id or `"joint"`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub variant: String,
    pub dataset: String,
    pub seed: u64,
    pub eta: f64,
    pub task: String,
    pub accuracy: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("run_id,variant,dataset,seed,eta,task,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6}\n",
            r.run_id, r.variant, r.dataset, r.seed, r.eta, r.task, r.accuracy
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(HarnessError::Report(format!(
                "metrics.csv line {}: {} fields, expected 7",
                i + 1,
                f.len()
            )));
        }
        let bad = |what: &str| HarnessError::Report(format!("metrics.csv line {}: bad {what}", i + 1));
        rows.push(MetricsRow {
            run_id: f[0].to_string(),
            variant: f[1].to_string(),
            dataset: f[2].to_string(),
            seed: f[3].parse().map_err(|_| bad("seed"))?,
            eta: f[4].parse().map_err(|_| bad("eta"))?,
            task: f[5].to_string(),
            accuracy: f[6].parse().map_err(|_| bad("accuracy"))?,
        });
    }
    Ok(rows)
}

/// Per-sample correctness of one arm's heads on (possibly perturbed)
/// inputs, written into `correct[lane]` at the sample's dataset row.
fn score_arm(
    model: &mut ModelBundle<Elem>,
    loss: &mtvib_core::multitask::LossSpec,
    lanes: &[usize],
    data: &Dataset,
    batch: usize,
    eta: f64,
    sample_eval: usize,
    seed: u64,
    correct: &mut [Vec<bool>],
) -> Result<()> {
    let attack = AttackConfig::new(eta);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut latent_rng = stream_rng(seed, streams::LATENT);

    for chunk in all.chunks(batch) {
        let (x, all_labels) = data.batch::<Elem>(chunk)?;
        let labels: Vec<Vec<usize>> = lanes.iter().map(|&l| all_labels[l].clone()).collect();
        let x_eval = fgsm_perturb(model, &x, &labels, loss, &attack)?;

        let n = chunk.len();
        let preds: Vec<Vec<usize>> = if sample_eval == 0 {
            let mut g = Graph::<Elem>::new();
            let fwd = model.forward_multitask(&mut g, &x_eval, Mode::eval(), None)?;
            fwd.logits
                .iter()
                .map(|&lg| argmax_rows(g.value(lg), n, g.shape(lg)[1]))
                .collect()
        } else {
            // Average class probabilities over sampled latents.
            let mut probs: Vec<Vec<f64>> = Vec::new();
            for _ in 0..sample_eval {
                let mut g = Graph::<Elem>::new();
                let fwd =
                    model.forward_multitask(&mut g, &x_eval, Mode::eval_sampled(), Some(&mut latent_rng))?;
                if probs.is_empty() {
                    probs = fwd
                        .logits
                        .iter()
                        .map(|&lg| vec![0.0f64; g.value(lg).len()])
                        .collect();
                }
                for (acc, &lg) in probs.iter_mut().zip(&fwd.logits) {
                    let classes = g.shape(lg)[1];
                    let p = scaled_softmax(g.value(lg), n, classes, 1.0)?;
                    for (a, v) in acc.iter_mut().zip(&p) {
                        *a += v.to_f64();
                    }
                }
            }
            probs
                .iter()
                .map(|p| {
                    let classes = p.len() / n;
                    argmax_rows(p, n, classes)
                })
                .collect()
        };

        for (h, &lane) in lanes.iter().enumerate() {
            for (j, &row) in chunk.iter().enumerate() {
                correct[lane][row] = preds[h][j] == labels[h][j];
            }
        }
    }
    Ok(())
}

/// Fold a per-task correctness matrix into per-task accuracies and the
/// joint accuracy (every task right on the same sample).
pub fn summarize(correct: &[Vec<bool>]) -> (Vec<f64>, f64) {
    let n = correct[0].len() as f64;
    let per_task: Vec<f64> = correct
        .iter()
        .map(|lane| lane.iter().filter(|&&c| c).count() as f64 / n)
        .collect();
    let joint = (0..correct[0].len())
        .filter(|&i| correct.iter().all(|lane| lane[i]))
        .count() as f64
        / n;
    (per_task, joint)
}

/// Clean joint accuracy of a single arm covering `lanes` (used for
/// grid-search weight selection).
pub fn arm_joint_accuracy(
    model: &mut ModelBundle<Elem>,
    lanes: &[usize],
    data: &Dataset,
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(HarnessError::Config("joint accuracy over an empty set".into()));
    }
    let mut correct = vec![vec![false; data.len()]; data.k];
    score_arm(model, &mtvib_core::multitask::LossSpec::PlainCe, lanes, data, batch, 0.0, 0, 0, &mut correct)?;
    let lane_correct: Vec<Vec<bool>> = lanes.iter().map(|&l| correct[l].clone()).collect();
    Ok(summarize(&lane_correct).1)
}

/// Accuracy of every task and the joint accuracy, per η. Each arm is
/// attacked through its own training loss; the joint row counts samples
/// with every task correct.
pub fn evaluate(run: &mut TrainedRun, test: &Dataset, etas: &[f64]) -> Result<Vec<MetricsRow>> {
    if test.is_empty() {
        return Err(HarnessError::Config("evaluate: empty test set".into()));
    }
    if test.k != run.config.tasks {
        return Err(HarnessError::Config(format!(
            "test set carries {} labels per sample, config says {} tasks",
            test.k, run.config.tasks
        )));
    }
    let cfg = run.config.clone();
    let mut rows = Vec::with_capacity(etas.len() * (cfg.tasks + 1));

    for &eta in etas {
        let mut correct = vec![vec![false; test.len()]; cfg.tasks];
        for arm in &mut run.arms {
            score_arm(
                &mut arm.model,
                &arm.loss,
                &arm.task_lanes,
                test,
                cfg.batch,
                eta,
                cfg.sample_eval,
                cfg.seed,
                &mut correct,
            )?;
        }

        let mut push = |task: String, accuracy: f64| {
            rows.push(MetricsRow {
                run_id: cfg.run_id(),
                variant: cfg.variant.as_str().to_string(),
                dataset: cfg.dataset.source().as_str().to_string(),
                seed: cfg.seed,
                eta,
                task,
                accuracy,
            });
        };
        let (per_task, joint) = summarize(&correct);
        for (lane, acc) in per_task.into_iter().enumerate() {
            push(format!("{}", lane + 1), acc);
        }
        push("joint".to_string(), joint);
    }
    Ok(rows)
}

/// One batch's clean-vs-perturbed training-loss comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub arm: usize,
    pub batch: usize,
    pub clean: f64,
    pub perturbed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub eta: f64,
    pub rows: Vec<AttackRow>,
    /// Fraction of batches where the perturbed loss is ≥ the clean loss.
    pub frac_nondecreasing: f64,
}

/// One batch's total training loss in eval mode (BN stats fixed, z = μ).
fn batch_total(
    model: &mut ModelBundle<Elem>,
    loss: &mtvib_core::multitask::LossSpec,
    labels: &[Vec<usize>],
    input: &mtvib_core::Tensor<Elem>,
) -> Result<f64> {
    let mut g = Graph::<Elem>::new();
    let fwd = model.forward_multitask(&mut g, input, Mode::eval().frozen(), None)?;
    let (_, parts) =
        mtvib_core::multitask::build_loss(&mut g, loss, &fwd.logits, labels, fwd.latent.as_ref(), fwd.s)?;
    Ok(parts.total)
}

/// Compare each arm's own training loss on clean vs FGSM-perturbed batches
/// — the direct check that the attack ascends the loss it differentiates.
pub fn attack_report(run: &mut TrainedRun, test: &Dataset, eta: f64) -> Result<AttackReport> {
    if test.is_empty() {
        return Err(HarnessError::Config("attack report: empty test set".into()));
    }
    let attack = AttackConfig::new(eta);
    let batch = run.config.batch;
    let all: Vec<usize> = (0..test.len()).collect();
    let mut rows = Vec::new();

    for (arm_idx, arm) in run.arms.iter_mut().enumerate() {
        for (batch_idx, chunk) in all.chunks(batch).enumerate() {
            let (x, all_labels) = test.batch::<Elem>(chunk)?;
            let labels: Vec<Vec<usize>> =
                arm.task_lanes.iter().map(|&l| all_labels[l].clone()).collect();

            let clean = batch_total(&mut arm.model, &arm.loss, &labels, &x)?;
            let x_adv = fgsm_perturb(&mut arm.model, &x, &labels, &arm.loss, &attack)?;
            let perturbed = batch_total(&mut arm.model, &arm.loss, &labels, &x_adv)?;
            rows.push(AttackRow { arm: arm_idx, batch: batch_idx, clean, perturbed });
        }
    }

    let up = rows.iter().filter(|r| r.perturbed >= r.clean).count();
    let frac_nondecreasing = up as f64 / rows.len() as f64;
    Ok(AttackReport { eta, rows, frac_nondecreasing })
}

pub fn attack_csv(report: &AttackReport) -> String {
    let mut out = String::from("arm,batch,eta,clean_loss,perturbed_loss\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.arm, r.batch, report.eta, r.clean, r.perturbed
        ));
    }
    out
}

/// Write metrics.csv and the accuracy-vs-η chart into the run directory.
pub fn write_reports(dir: &RunDir, rows: &[MetricsRow]) -> Result<()> {
    dir.write_text(&dir.metrics_path(), &metrics_csv(rows))?;
    dir.write_text(&dir.curves_path(), &accuracy_chart(rows))?;
    Ok(())
}

/// Accuracy vs η, one series per task plus the joint curve.
pub fn accuracy_chart(rows: &[MetricsRow]) -> String {
    let mut tasks: Vec<String> = Vec::new();
    for r in rows {
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
    }
    let series: Vec<Series> = tasks
        .iter()
        .map(|task| Series {
            name: if task == "joint" { "joint".into() } else { format!("task {task}") },
            points: rows
                .iter()
                .filter(|r| &r.task == task)
                .map(|r| (r.eta, r.accuracy))
                .collect(),
        })
        .collect();
    svg::line_chart("Accuracy under FGSM", "eta", "accuracy", &series, Some((0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(eta: f64, task: &str, accuracy: f64) -> MetricsRow {
        MetricsRow {
            run_id: "mtvib-mnist-desk-k2-s1-e10-b1e-3".into(),
            variant: "mtvib".into(),
            dataset: "mnist".into(),
            seed: 1,
            eta,
            task: task.into(),
            accuracy,
        }
    }

    #[test]
    fn counting_matches_by_hand() {
        // predictions [[1,1],[1,0],[0,0]] against all-correct truth:
        // task 1 right on samples 1,2; task 2 right on sample 1 only.
        let correct = vec![vec![true, true, false], vec![true, false, false]];
        let (per_task, joint) = summarize(&correct);
        assert_eq!(per_task, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(joint, 1.0 / 3.0);
        assert!(joint <= per_task.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn metrics_csv_round_trips_byte_exactly() {
        let rows = vec![
            row(0.0, "1", 2.0 / 3.0),
            row(0.0, "2", 1.0 / 3.0),
            row(0.0, "joint", 1.0 / 3.0),
            row(0.05, "1", 0.5),
        ];
        let text = metrics_csv(&rows);
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(metrics_csv(&back), text);
        assert_eq!(back[3].eta, 0.05);
        assert_eq!(back[2].task, "joint");
    }

    #[test]
    fn header_and_columns_match_the_contract() {
        let text = metrics_csv(&[row(0.0, "1", 1.0)]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "run_id,variant,dataset,seed,eta,task,accuracy");
        assert_eq!(
            lines.next().unwrap(),
            "mtvib-mnist-desk-k2-s1-e10-b1e-3,mtvib,mnist,1,0,1,1.000000"
        );
    }

    #[test]
    fn chart_has_a_series_per_task() {
        let rows = vec![
            row(0.0, "1", 0.9),
            row(0.1, "1", 0.8),
            row(0.0, "2", 0.85),
            row(0.1, "2", 0.7),
            row(0.0, "joint", 0.8),
            row(0.1, "joint", 0.6),
        ];
        let svg = accuracy_chart(&rows);
        assert!(svg.contains("task 1") && svg.contains("task 2") && svg.contains("joint"));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }
}
