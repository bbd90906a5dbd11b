//! Training loop: builds the model(s) a variant calls for, runs Adam over
//! shuffled minibatches, logs per-epoch loss breakdowns, and persists
//! checkpoints plus the arms manifest into the run directory.

use mtvib_core::data::Dataset;
use mtvib_core::models::{architecture, build_model, ArchitectureSpec, Mode, ModelBundle};
use mtvib_core::multitask::{build_loss, gs_grid, LossSpec};
use mtvib_core::optim::Adam;
use mtvib_core::rng::{shuffled_indices, stream_rng, streams};
use mtvib_core::{Element, Graph};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::{HarnessError, Result};
use crate::eval;
use crate::runio::{write_checkpoint, ArmManifest, ArmsManifest, LossSpecCfg, RunDir};
use crate::Elem;

/// One trained model: joint variants have a single arm over all tasks,
/// single-task variants one arm per task.
pub struct Arm {
    pub model: ModelBundle<Elem>,
    pub loss: LossSpec,
    /// Dataset label lanes this arm's heads serve, in head order.
    pub task_lanes: Vec<usize>,
}

pub struct TrainedRun {
    pub config: RunConfig,
    pub arms: Vec<Arm>,
}

/// One `losses.csv` row: a task's share of one epoch's averages.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// 1-based dataset lane.
    pub task: usize,
    pub ce: f64,
    /// End-of-epoch σ_k² snapshot.
    pub sigma2: f64,
    pub rate: f64,
    pub distortion: f64,
    pub beta: f64,
    pub total: f64,
}

pub fn losses_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,task,ce,sigma2,rate,distortion,beta,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6}\n",
            r.epoch, r.task, r.ce, r.sigma2, r.rate, r.distortion, r.beta, r.total
        ));
    }
    out
}

pub fn parse_losses_csv(text: &str) -> Result<Vec<EpochRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(HarnessError::Report(format!(
                "losses.csv line {}: {} fields, expected 8",
                i + 1,
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                HarnessError::Report(format!("losses.csv line {}: bad number {s:?}", i + 1))
            })
        };
        rows.push(EpochRow {
            epoch: f[0].parse().map_err(|_| {
                HarnessError::Report(format!("losses.csv line {}: bad epoch {:?}", i + 1, f[0]))
            })?,
            task: f[1].parse().map_err(|_| {
                HarnessError::Report(format!("losses.csv line {}: bad task {:?}", i + 1, f[1]))
            })?,
            ce: num(f[2])?,
            sigma2: num(f[3])?,
            rate: num(f[4])?,
            distortion: num(f[5])?,
            beta: num(f[6])?,
            total: num(f[7])?,
        });
    }
    Ok(rows)
}

struct TrainOpts {
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
}

impl TrainOpts {
    fn from_config(cfg: &RunConfig) -> TrainOpts {
        TrainOpts { epochs: cfg.epochs, batch: cfg.batch, lr: cfg.lr, seed: cfg.seed }
    }
}

/// Run Adam over `data` for one arm. Appends one row per (epoch, lane) to
/// `rows`: batch-size-weighted epoch means, with σ² as an end-of-epoch
/// snapshot. A non-finite loss aborts with the epoch/batch index and the
/// first offending breakdown term.
fn train_arm(
    model: &mut ModelBundle<Elem>,
    loss: &LossSpec,
    lanes: &[usize],
    data: &Dataset,
    opts: &TrainOpts,
    rows: &mut Vec<EpochRow>,
) -> Result<()> {
    let mut adam = Adam::new(Elem::from_f64(opts.lr));
    let mut shuffle_rng = stream_rng(opts.seed, streams::SHUFFLE);
    let mut latent_rng = stream_rng(opts.seed, streams::LATENT);
    let all: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=opts.epochs {
        let order = shuffled_indices(&mut shuffle_rng, all.len());
        let mut seen = 0usize;
        let mut acc_ce = vec![0.0f64; lanes.len()];
        let mut acc_rate = 0.0f64;
        let mut acc_dist = 0.0f64;
        let mut acc_total = 0.0f64;
        let mut last_sigma2 = vec![1.0f64; lanes.len()];
        let mut beta = 0.0f64;

        for (batch_idx, chunk) in order.chunks(opts.batch).enumerate() {
            if chunk.len() < 2 {
                // Batch statistics need more than one row.
                continue;
            }
            let (x, all_labels) = data.batch::<Elem>(chunk)?;
            let labels: Vec<Vec<usize>> =
                lanes.iter().map(|&l| all_labels[l].clone()).collect();

            let mut g = Graph::<Elem>::new();
            let fwd = model.forward_multitask(&mut g, &x, Mode::train(), Some(&mut latent_rng))?;
            let (loss_var, parts) =
                build_loss(&mut g, loss, &fwd.logits, &labels, fwd.latent.as_ref(), fwd.s)?;

            if !parts.total.is_finite() {
                return Err(HarnessError::Diverged(format!(
                    "loss diverged at epoch {epoch}, batch {batch_idx}: {} (total = {})",
                    offending_term(&parts),
                    parts.total
                )));
            }

            let grads = g.backward(loss_var)?;
            model.apply_gradients(&fwd, &grads);
            adam.step(&mut model.params)?;

            let n = chunk.len() as f64;
            seen += chunk.len();
            for (a, &c) in acc_ce.iter_mut().zip(&parts.ce) {
                *a += c * n;
            }
            acc_rate += parts.rate * n;
            acc_dist += parts.distortion * n;
            acc_total += parts.total * n;
            last_sigma2.clone_from_slice(&parts.sigma2);
            beta = parts.beta;
        }

        if seen == 0 {
            return Err(HarnessError::Config(format!(
                "epoch {epoch}: no usable batches ({} rows, batch size {})",
                data.len(),
                opts.batch
            )));
        }
        let n = seen as f64;
        for (k, &lane) in lanes.iter().enumerate() {
            rows.push(EpochRow {
                epoch,
                task: lane + 1,
                ce: acc_ce[k] / n,
                sigma2: last_sigma2[k],
                rate: acc_rate / n,
                distortion: acc_dist / n,
                beta,
                total: acc_total / n,
            });
        }
    }
    Ok(())
}

/// Name the first non-finite component of a diverged loss.
fn offending_term(parts: &mtvib_core::multitask::LossBreakdown) -> String {
    for (k, &c) in parts.ce.iter().enumerate() {
        if !c.is_finite() {
            return format!("task-{} cross-entropy is {c}", k + 1);
        }
    }
    for (k, &s) in parts.sigma2.iter().enumerate() {
        if !s.is_finite() {
            return format!("task-{} sigma2 is {s}", k + 1);
        }
    }
    if !parts.rate.is_finite() {
        return format!("rate is {}", parts.rate);
    }
    if !parts.distortion.is_finite() {
        return format!("distortion is {}", parts.distortion);
    }
    "total is non-finite with finite parts".into()
}

/// Per-task model seeds stay distinct but reproducible.
fn arm_seed(seed: u64, arm: usize) -> u64 {
    seed.wrapping_add(1_000_003u64.wrapping_mul(arm as u64))
}

/// The run's joint architecture, with the latent-width override applied.
fn run_architecture(cfg: &RunConfig) -> Result<ArchitectureSpec> {
    let mut spec =
        architecture(cfg.preset.core(), cfg.variant.architecture(), cfg.tasks, cfg.input_kind())?;
    if spec.latent_d.is_some() {
        spec.latent_d = Some(cfg.latent());
    }
    Ok(spec)
}

// ---- grid-search weight selection ----------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GsSelection {
    pub candidates: Vec<Vec<f64>>,
    /// Joint validation accuracy per candidate (held-out tail of train).
    pub val_joint: Vec<f64>,
    pub winner_index: usize,
    pub winner: Vec<f64>,
    pub fit_rows: usize,
    pub val_rows: usize,
    pub select_epochs: usize,
}

/// Pick grid-search weights: each candidate trains briefly on the first 90%
/// of the train split and is scored by clean joint accuracy on the held-out
/// 10%; ties go to the earlier candidate.
fn select_gs_weights(cfg: &RunConfig, data: &Dataset) -> Result<GsSelection> {
    let candidates: Vec<Vec<f64>> = match &cfg.gs_w1 {
        Some(ws) => ws.iter().map(|&w| vec![w, 1.0 - w]).collect(),
        None => gs_grid(cfg.tasks)?,
    };
    let lanes: Vec<usize> = (0..cfg.tasks).collect();

    let n_val = (data.len() / 10).max(1);
    let n_fit = data.len() - n_val;
    if n_fit < 2 {
        return Err(HarnessError::Config(format!(
            "grid selection needs more data: {} rows leave {n_fit} to fit on",
            data.len()
        )));
    }
    let fit = data.subset(&(0..n_fit).collect::<Vec<_>>())?;
    let val = data.subset(&(n_fit..data.len()).collect::<Vec<_>>())?;

    let spec = run_architecture(cfg)?;
    let opts = TrainOpts {
        epochs: cfg.gs_select_epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
    };

    let mut val_joint = Vec::with_capacity(candidates.len());
    for weights in &candidates {
        let mut model = build_model::<Elem>(&spec, cfg.variant.architecture(), cfg.seed)?;
        let loss = LossSpec::Gs { weights: weights.clone() };
        let mut scratch = Vec::new();
        train_arm(&mut model, &loss, &lanes, &fit, &opts, &mut scratch)?;
        val_joint.push(eval::arm_joint_accuracy(&mut model, &lanes, &val, cfg.batch)?);
    }

    let mut winner_index = 0;
    for (i, &score) in val_joint.iter().enumerate() {
        if score > val_joint[winner_index] {
            winner_index = i;
        }
    }
    Ok(GsSelection {
        winner: candidates[winner_index].clone(),
        winner_index,
        candidates,
        val_joint,
        fit_rows: n_fit,
        val_rows: n_val,
        select_epochs: cfg.gs_select_epochs,
    })
}

// ---- the train entry point ------------------------------------------------

/// Train every arm the variant calls for and persist config, checkpoints,
/// the arms manifest, and losses.csv into the run directory.
pub fn train(cfg: &RunConfig, data: &Dataset, dir: &RunDir) -> Result<TrainedRun> {
    cfg.validate()?;
    if data.k != cfg.tasks {
        return Err(HarnessError::Config(format!(
            "dataset carries {} labels per sample, config says {} tasks",
            data.k, cfg.tasks
        )));
    }
    dir.write_config(cfg)?;

    let core_variant = cfg.variant.architecture();
    let joint_spec = run_architecture(cfg)?;
    let opts = TrainOpts::from_config(cfg);
    let mut rows: Vec<EpochRow> = Vec::new();

    let mut arms: Vec<Arm> = Vec::new();
    match cfg.variant {
        Variant::Stl | Variant::Stvib => {
            let loss = if cfg.variant.is_vib() {
                LossSpec::Vib { beta: cfg.beta }
            } else {
                LossSpec::PlainCe
            };
            for t in 0..cfg.tasks {
                let spec = joint_spec.single_task(t)?;
                let mut model = build_model::<Elem>(&spec, core_variant, arm_seed(cfg.seed, t))?;
                train_arm(&mut model, &loss, &[t], data, &opts, &mut rows)?;
                arms.push(Arm { model, loss: loss.clone(), task_lanes: vec![t] });
            }
        }
        Variant::Mtl | Variant::Uwl | Variant::Mtvib => {
            let lanes: Vec<usize> = (0..cfg.tasks).collect();
            let mut model = build_model::<Elem>(&joint_spec, core_variant, cfg.seed)?;
            let loss = match cfg.variant {
                Variant::Mtl => LossSpec::PlainCe,
                Variant::Uwl => {
                    model.add_task_uncertainty()?;
                    LossSpec::Uwl
                }
                _ => LossSpec::Mtvib { beta: cfg.beta },
            };
            train_arm(&mut model, &loss, &lanes, data, &opts, &mut rows)?;
            arms.push(Arm { model, loss, task_lanes: lanes });
        }
        Variant::Gs => {
            let selection = select_gs_weights(cfg, data)?;
            crate::runio::write_json(&dir.gs_selection_path(), &selection)?;
            let lanes: Vec<usize> = (0..cfg.tasks).collect();
            let mut model = build_model::<Elem>(&joint_spec, core_variant, cfg.seed)?;
            let loss = LossSpec::Gs { weights: selection.winner.clone() };
            train_arm(&mut model, &loss, &lanes, data, &opts, &mut rows)?;
            arms.push(Arm { model, loss, task_lanes: lanes });
        }
    }

    rows.sort_by_key(|r| (r.epoch, r.task));
    dir.write_text(&dir.losses_path(), &losses_csv(&rows))?;

    let mut manifest = Vec::with_capacity(arms.len());
    for (i, arm) in arms.iter().enumerate() {
        let path = dir.checkpoint_path(i);
        write_checkpoint(&path, &arm.model.export_state())?;
        manifest.push(ArmManifest {
            loss: LossSpecCfg::from_spec(&arm.loss),
            task_lanes: arm.task_lanes.clone(),
            checkpoint: path.file_name().unwrap().to_string_lossy().into_owned(),
        });
    }
    crate::runio::write_json(&dir.arms_path(), &ArmsManifest { arms: manifest })?;

    Ok(TrainedRun { config: cfg.clone(), arms })
}

/// Rebuild a trained run from a run directory (config + arms + checkpoints).
pub fn load_run(dir: &RunDir) -> Result<TrainedRun> {
    let cfg: RunConfig = dir.read_config()?;
    cfg.validate()?;
    let manifest: ArmsManifest = crate::runio::read_json(&dir.arms_path())?;
    let core_variant = cfg.variant.architecture();
    let joint_spec = run_architecture(&cfg)?;

    let mut arms = Vec::with_capacity(manifest.arms.len());
    for m in &manifest.arms {
        let spec = if cfg.variant.is_single_task() {
            joint_spec.single_task(m.task_lanes[0])?
        } else {
            joint_spec.clone()
        };
        let mut model =
            build_model::<Elem>(&spec, core_variant, arm_seed(cfg.seed, m.task_lanes[0]))?;
        if matches!(m.loss, LossSpecCfg::Uwl) {
            model.add_task_uncertainty()?;
        }
        let entries = crate::runio::read_checkpoint(&dir.root.join(&m.checkpoint))?;
        model.import_state(&entries)?;
        arms.push(Arm { model, loss: m.loss.to_spec(), task_lanes: m.task_lanes.clone() });
    }
    Ok(TrainedRun { config: cfg, arms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetArg, Preset};
    use crate::{dataio, synth};
    use mtvib_core::data::Source;

    fn tiny_config(dir: &std::path::Path, variant: Variant) -> RunConfig {
        let mut cfg = RunConfig::preset_defaults(variant, Preset::Desk, DatasetArg::Mnist);
        cfg.epochs = 1;
        cfg.batch = 8;
        cfg.n_train = 24;
        cfg.n_test = 8;
        cfg.data_dir = dir.join("data");
        cfg.out_dir = dir.join("out");
        cfg
    }

    fn tiny_data(cfg: &RunConfig) -> Dataset {
        synth::generate(&cfg.data_dir, Source::Mnist, 64, 16, 5).unwrap();
        let (train, _) =
            dataio::load_pair_datasets(&cfg.data_dir, Source::Mnist, cfg.n_train, cfg.n_test, cfg.seed)
                .unwrap();
        train
    }

    #[test]
    fn losses_csv_round_trips() {
        let rows = vec![
            EpochRow {
                epoch: 1,
                task: 1,
                ce: 2.302585,
                sigma2: 1.0,
                rate: 0.5,
                distortion: 4.6,
                beta: 1e-3,
                total: 4.6005,
            },
            EpochRow {
                epoch: 1,
                task: 2,
                ce: 2.19,
                sigma2: 0.9,
                rate: 0.5,
                distortion: 4.6,
                beta: 1e-3,
                total: 4.6005,
            },
        ];
        let text = losses_csv(&rows);
        let back = parse_losses_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].epoch, 1);
        assert_eq!(back[1].task, 2);
        assert!((back[0].ce - 2.302585).abs() < 1e-9);
        // Re-serialization is byte-identical.
        assert_eq!(losses_csv(&back), text);
    }

    #[test]
    fn one_epoch_writes_the_run_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path(), Variant::Mtvib);
        let data = tiny_data(&cfg);
        let dir = RunDir::create(&cfg).unwrap();

        let run = train(&cfg, &data, &dir).unwrap();
        assert_eq!(run.arms.len(), 1);
        assert!(dir.config_path().is_file());
        assert!(dir.arms_path().is_file());
        assert!(dir.checkpoint_path(0).is_file());
        let rows = parse_losses_csv(&std::fs::read_to_string(dir.losses_path()).unwrap()).unwrap();
        assert_eq!(rows.len(), 2); // 1 epoch × 2 tasks
        assert!(rows.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn single_task_variants_train_one_arm_per_task() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path(), Variant::Stl);
        let data = tiny_data(&cfg);
        let dir = RunDir::create(&cfg).unwrap();

        let run = train(&cfg, &data, &dir).unwrap();
        assert_eq!(run.arms.len(), 2);
        assert_eq!(run.arms[0].task_lanes, vec![0]);
        assert_eq!(run.arms[1].task_lanes, vec![1]);
        assert!(dir.checkpoint_path(1).is_file());
    }

    #[test]
    fn loaded_run_reproduces_the_trained_model() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path(), Variant::Uwl);
        let data = tiny_data(&cfg);
        let dir = RunDir::create(&cfg).unwrap();

        let trained = train(&cfg, &data, &dir).unwrap();
        let loaded = load_run(&dir).unwrap();
        assert_eq!(loaded.arms.len(), 1);
        assert_eq!(loaded.arms[0].loss, trained.arms[0].loss);

        // Parameter-for-parameter equality after the checkpoint round trip.
        let a = trained.arms[0].model.export_state();
        let b = loaded.arms[0].model.export_state();
        assert_eq!(a, b);
    }

    #[test]
    fn gs_selection_is_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tmp.path(), Variant::Gs);
        cfg.gs_w1 = Some(vec![0.3, 0.7]);
        cfg.gs_select_epochs = 1;
        let data = tiny_data(&cfg);
        let dir = RunDir::create(&cfg).unwrap();

        let run = train(&cfg, &data, &dir).unwrap();
        let sel: GsSelection = crate::runio::read_json(&dir.gs_selection_path()).unwrap();
        assert_eq!(sel.candidates.len(), 2);
        assert_eq!(sel.val_joint.len(), 2);
        assert_eq!(sel.winner, sel.candidates[sel.winner_index]);
        match &run.arms[0].loss {
            LossSpec::Gs { weights } => assert_eq!(weights, &sel.winner),
            other => panic!("gs run trained with {other:?}"),
        }
    }

    #[test]
    fn divergence_names_the_epoch_batch_and_term() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tmp.path(), Variant::Mtl);
        cfg.lr = 1e12; // force a blow-up
        cfg.epochs = 4;
        let data = tiny_data(&cfg);
        let dir = RunDir::create(&cfg).unwrap();

        let text = match train(&cfg, &data, &dir) {
            Ok(_) => panic!("lr = 1e12 should diverge"),
            Err(e) => e.to_string(),
        };
        assert!(
            text.contains("epoch") && text.contains("batch"),
            "divergence message lacks location: {text}"
        );
    }
}
