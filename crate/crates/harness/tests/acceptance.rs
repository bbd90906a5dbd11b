//! Acceptance checklist: one test per shipping criterion, numbered so the
//! harness output reads as the checklist itself (`c01_…` through `c10_…`),
//! plus a few `contract_…` tests for documented training-contract examples.
//!
//! Trained fixtures are expensive (minutes each), so they live under
//! `$TMPDIR/mtvib-acceptance-v1` and are reused across invocations via the
//! run directory's `config.json`: a run whose config matches byte-for-byte
//! is re-read instead of retrained, which the determinism contract makes
//! sound. Delete that directory to force a cold rebuild. The desk-scale
//! run's wall time is recorded beside it on first training and asserted
//! against the runtime budget on every invocation.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use mtvib_core::attack::{fgsm_perturb, AttackConfig};
use mtvib_core::data::Source;
use mtvib_core::multitask::{argmax_rows, build_loss, scaled_softmax, LossSpec, TaskUncertainty};
use mtvib_core::vib::{kl_closed_form_value, kl_monte_carlo, GaussianLatent};
use mtvib_core::{check, Graph, Tensor};
use mtvib_harness::config::{DatasetArg, Preset, RunConfig, Variant};
use mtvib_harness::eval::{attack_report, MetricsRow};
use mtvib_harness::runio::RunDir;
use mtvib_harness::sweep::run_one;
use mtvib_harness::train::{load_run, parse_losses_csv, EpochRow};
use mtvib_harness::{dataio, synth};

// ---------------------------------------------------------------- fixtures

struct Shared {
    data: PathBuf,
    runs: PathBuf,
}

/// Corpus + warmed dataset caches, built once. Everything downstream only
/// reads these files, so parallel test threads never race a cache write.
fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let root = std::env::temp_dir().join("mtvib-acceptance-v1");
        let data = root.join("data");
        let runs = root.join("runs");
        std::fs::create_dir_all(&runs).expect("create fixture directories");

        for source in [Source::Mnist, Source::Fashion] {
            let have =
                mtvib_core::data::source_paths(&data, source).iter().all(|p| p.is_file());
            if !have {
                synth::generate(&data, source, 12_000, 3_000, 1).expect("generate corpus");
            }
        }
        // Warm every pair cache the suite reads, while still single-threaded.
        let keys: &[(Source, usize, usize, u64)] = &[
            (Source::Mnist, 10_000, 2_000, 1), // desk run
            (Source::Mnist, 3_000, 1_500, 1),  // reduced-scale runs
            (Source::Fashion, 3_000, 1_500, 1),
            (Source::Fashion, 3_000, 1_500, 2),
            (Source::Fashion, 3_000, 1_500, 3),
            (Source::Mnist, 400, 200, 1), // determinism mini-run
        ];
        for &(source, n_train, n_test, seed) in keys {
            dataio::load_pair_datasets(&data, source, n_train, n_test, seed)
                .expect("warm dataset cache");
        }
        Shared { data, runs }
    })
}

/// The criterion-5 configuration: the desk preset verbatim.
fn desk_cfg() -> RunConfig {
    let sh = shared();
    let mut cfg = RunConfig::preset_defaults(Variant::Mtvib, Preset::Desk, DatasetArg::Mnist);
    cfg.data_dir = sh.data.clone();
    cfg.out_dir = sh.runs.clone();
    cfg
}

/// Desk-scale MTVIB run (train + 7-η evaluation) with its wall time in
/// seconds. The time is measured when the run is first trained and kept in
/// a marker file; a run directory without the marker is retrained so the
/// budget is never asserted against a warm-cache shortcut.
fn desk_run() -> &'static (Vec<MetricsRow>, f64) {
    static DESK: OnceLock<(Vec<MetricsRow>, f64)> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = desk_cfg();
        let marker = cfg.run_dir().join("wall-seconds.txt");
        if marker.is_file() {
            let secs: f64 = std::fs::read_to_string(&marker)
                .expect("read timing marker")
                .trim()
                .parse()
                .expect("timing marker holds seconds");
            let rows = run_one(&cfg).expect("reuse desk run");
            return (rows, secs);
        }
        if cfg.run_dir().exists() {
            std::fs::remove_dir_all(cfg.run_dir()).expect("clear unmarked desk run");
        }
        let t0 = Instant::now();
        let rows = run_one(&cfg).expect("train + evaluate desk run");
        let secs = t0.elapsed().as_secs_f64();
        std::fs::write(&marker, format!("{secs:.1}\n")).expect("write timing marker");
        (rows, secs)
    })
}

/// Reduced-scale run: desk architecture and optimizer, smaller corpus and
/// fewer epochs, sized so trend criteria stay affordable on one core.
fn reduced_cfg(variant: Variant, dataset: DatasetArg, seed: u64) -> RunConfig {
    let sh = shared();
    let mut cfg = RunConfig::preset_defaults(variant, Preset::Desk, dataset);
    cfg.epochs = 4;
    cfg.n_train = 3_000;
    cfg.n_test = 1_500;
    cfg.seed = seed;
    cfg.gs_select_epochs = 1;
    cfg.data_dir = sh.data.clone();
    cfg.out_dir = sh.runs.clone();
    cfg
}

fn losses_of(cfg: &RunConfig) -> Vec<EpochRow> {
    let text = std::fs::read_to_string(cfg.run_dir().join("losses.csv"))
        .expect("run has a loss log");
    parse_losses_csv(&text).expect("loss log parses")
}

/// Accuracy of one (eta, task) cell; task "joint" selects the joint row.
fn acc_at(rows: &[MetricsRow], eta: f64, task: &str) -> f64 {
    rows.iter()
        .find(|r| (r.eta - eta).abs() < 1e-9 && r.task == task)
        .unwrap_or_else(|| panic!("no metrics row for eta {eta}, task {task}"))
        .accuracy
}

/// Largest accuracy increase along increasing η for any single task lane.
fn worst_uptick(rows: &[MetricsRow]) -> f64 {
    let mut etas: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let tasks: Vec<String> = {
        let mut t: Vec<String> =
            rows.iter().map(|r| r.task.clone()).filter(|t| t != "joint").collect();
        t.sort();
        t.dedup();
        t
    };
    let mut worst = f64::NEG_INFINITY;
    for task in &tasks {
        for pair in etas.windows(2) {
            let uptick = acc_at(rows, pair[1], task) - acc_at(rows, pair[0], task);
            worst = worst.max(uptick);
        }
    }
    worst
}

// ---------------------------------------------------------------- criteria

#[test]
fn c01_gradients_match_finite_differences_below_1e5_over_5_seeds() {
    let t0 = Instant::now();
    let mut cases = 0usize;
    let mut worst = (0.0f64, "", 0u64);
    for seed in 1..=5 {
        for case in check::gradient_suite(seed).expect("gradient suite builds") {
            case.report.assert_below(1e-5);
            if case.report.max_rel_err > worst.0 {
                worst = (case.report.max_rel_err, case.name, seed);
            }
            cases += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "{cases} finite-difference cases over 5 seeds in {secs:.1}s; \
         worst rel err {:.2e} ({}, seed {})",
        worst.0, worst.1, worst.2
    );
    assert!(secs < 120.0, "gradient suite budget is 2 minutes, took {secs:.1}s");
}

#[test]
fn c02_closed_form_kl_matches_monte_carlo_within_3_standard_errors() {
    use rand::Rng;
    let mut rng = mtvib_core::rng::stream_rng(7, 0xAC02);
    for case in 0..20u64 {
        let n = rng.gen_range(1..=3usize);
        let d = rng.gen_range(1..=16usize);
        let mu: Vec<f64> =
            mtvib_core::rng::standard_normal_vec(&mut rng, n * d).iter().map(|v| v * 0.8).collect();
        let log_var: Vec<f64> =
            mtvib_core::rng::standard_normal_vec(&mut rng, n * d).iter().map(|v| v * 0.7).collect();
        let closed = kl_closed_form_value(&mu, &log_var, n, d);
        let (mc, se) = kl_monte_carlo(&mu, &log_var, n, d, 100_000, 1000 + case).expect("mc runs");
        assert!(
            (closed - mc).abs() <= 3.0 * se,
            "latent {case} (n={n}, d={d}): closed {closed:.6} vs mc {mc:.6} ± {se:.6}"
        );
    }
    // Anchor: d=1, μ=0, σ²=2 → ½(σ²+μ²−1−ln σ²) = ½(1−ln 2) = 0.153426.
    let closed = kl_closed_form_value(&[0.0], &[2.0f64.ln()], 1, 1);
    assert!((closed - 0.153426).abs() < 5e-7, "anchor KL: {closed:.6}");
    let (mc, se) = kl_monte_carlo(&[0.0], &[2.0f64.ln()], 1, 1, 100_000, 4242).expect("mc runs");
    assert!((closed - mc).abs() <= 3.0 * se, "anchor: closed {closed:.6} vs mc {mc:.6} ± {se:.6}");
    println!("20 random latents + anchor agree within 3 SE at 1e5 samples");
}

/// Random (logits, labels, latent) scenario for the loss-path identities.
fn identity_scenario(
    seed: u64,
) -> (Vec<Tensor<f64>>, Vec<Vec<usize>>, Tensor<f64>, Tensor<f64>) {
    use rand::Rng;
    let mut rng = mtvib_core::rng::stream_rng(seed, 0xAC03);
    let (n, classes, k, d) = (40usize, 10usize, 2usize, 8usize);
    let mut logits = Vec::new();
    for _ in 0..k {
        let data = mtvib_core::rng::standard_normal_vec(&mut rng, n * classes);
        logits.push(Tensor::from_vec(&[n, classes], data).expect("logits"));
    }
    let labels: Vec<Vec<usize>> =
        (0..k).map(|_| (0..n).map(|_| rng.gen_range(0..classes)).collect()).collect();
    let mu = Tensor::from_vec(&[n, d], mtvib_core::rng::standard_normal_vec(&mut rng, n * d))
        .expect("mu");
    let log_var = Tensor::from_vec(
        &[n, d],
        mtvib_core::rng::standard_normal_vec(&mut rng, n * d).iter().map(|v| v * 0.5).collect(),
    )
    .expect("log_var");
    (logits, labels, mu, log_var)
}

#[test]
fn c03_loss_reductions_hold_to_1e12() {
    for seed in 1..=5u64 {
        let (logits, labels, mu, log_var) = identity_scenario(seed);
        let d = mu.shape()[1];
        let beta = 1e-3;

        // With every s_k = 0 the MTVIB objective must equal Σ CE + β·KL.
        let mut g = Graph::<f64>::new();
        let lg: Vec<_> = logits.iter().map(|t| g.leaf(t)).collect();
        let latent = GaussianLatent { mu: g.leaf(&mu), log_var: g.leaf(&log_var), d };
        let s0 = g.leaf_data(&[2], vec![0.0; 2], false);
        let (_, parts) = build_loss(
            &mut g,
            &LossSpec::Mtvib { beta },
            &lg,
            &labels,
            Some(&latent),
            Some(s0),
        )
        .expect("mtvib loss builds");

        let mut g2 = Graph::<f64>::new();
        let lg2: Vec<_> = logits.iter().map(|t| g2.leaf(t)).collect();
        let latent2 = GaussianLatent { mu: g2.leaf(&mu), log_var: g2.leaf(&log_var), d };
        let mut plain = 0.0;
        for (l, lb) in lg2.iter().zip(&labels) {
            let ce = g2.softmax_cross_entropy(*l, lb).expect("ce");
            plain += g2.scalar_value(ce);
        }
        let kl = mtvib_core::vib::kl_to_std_normal(&mut g2, &latent2).expect("kl");
        let expect = plain + beta * g2.scalar_value(kl);
        assert!(
            (parts.total - expect).abs() < 1e-12,
            "seed {seed}: s=0 reduction: {} vs {expect}",
            parts.total
        );

        // With β = 0 and the same deterministic features, MTVIB's loss path
        // must equal the UWL path.
        let s_vals: Vec<f64> = vec![0.35, -0.15];
        let mut ga = Graph::<f64>::new();
        let lga: Vec<_> = logits.iter().map(|t| ga.leaf(t)).collect();
        let latent_a = GaussianLatent { mu: ga.leaf(&mu), log_var: ga.leaf(&log_var), d };
        let sa = ga.leaf_data(&[2], s_vals.clone(), false);
        let (_, mtvib_parts) = build_loss(
            &mut ga,
            &LossSpec::Mtvib { beta: 0.0 },
            &lga,
            &labels,
            Some(&latent_a),
            Some(sa),
        )
        .expect("mtvib β=0 builds");

        let mut gb = Graph::<f64>::new();
        let lgb: Vec<_> = logits.iter().map(|t| gb.leaf(t)).collect();
        let sb = gb.leaf_data(&[2], s_vals, false);
        let (_, uwl_parts) =
            build_loss(&mut gb, &LossSpec::Uwl, &lgb, &labels, None, Some(sb))
                .expect("uwl builds");
        assert!(
            (mtvib_parts.total - uwl_parts.total).abs() < 1e-12,
            "seed {seed}: β=0 path: mtvib {} vs uwl {}",
            mtvib_parts.total,
            uwl_parts.total
        );
    }
    println!("both reduction identities hold to 1e-12 over 5 random scenarios");
}

#[test]
fn c04_scaled_softmax_keeps_argmax_on_1000_rows() {
    use rand::Rng;
    let mut rng = mtvib_core::rng::stream_rng(11, 0xAC04);
    let (n, classes) = (1000usize, 10usize);
    let mut logits = mtvib_core::rng::standard_normal_vec(&mut rng, n * classes);
    // Mix in larger-magnitude rows so the check spans scales.
    for v in logits.iter_mut() {
        if rng.gen_bool(0.3) {
            *v *= 7.0;
        }
    }
    let baseline = argmax_rows(&logits, n, classes);
    for sigma2 in [0.25, 1.0, 4.0] {
        let probs = scaled_softmax(&logits, n, classes, sigma2).expect("scaled softmax");
        let argmax = argmax_rows(&probs, n, classes);
        let violations = baseline.iter().zip(&argmax).filter(|(a, b)| a != b).count();
        assert_eq!(violations, 0, "σ²={sigma2}: {violations} argmax changes out of {n}");
    }
    println!("argmax invariant across σ² ∈ {{0.25, 1, 4}} on 1000 rows");
}

#[test]
fn c05_desk_mtvib_reaches_85_percent_per_task_within_15_minutes() {
    let (rows, secs) = desk_run();
    let t1 = acc_at(rows, 0.0, "1");
    let t2 = acc_at(rows, 0.0, "2");
    println!("η=0 per-task accuracy {t1:.3} / {t2:.3}; train+eval wall {secs:.0}s");
    assert!(t1 >= 0.85, "task 1 accuracy {t1:.3} below the 85% bar");
    assert!(t2 >= 0.85, "task 2 accuracy {t2:.3} below the 85% bar");
    assert!(*secs <= 900.0, "desk run took {secs:.0}s, budget is 900s");
}

#[test]
fn c06_accuracy_decays_with_eta_for_every_trained_variant() {
    // Full desk MTVIB plus every other variant at reduced scale, all on the
    // two-digit overlays; per-task accuracy may never rise by more than one
    // point between adjacent η steps.
    let margin = 0.01 + 1e-9;
    let mut table = Vec::new();

    let (desk_rows, _) = desk_run();
    table.push(("mtvib (desk)".to_owned(), worst_uptick(desk_rows)));

    for variant in [Variant::Stl, Variant::Mtl, Variant::Stvib, Variant::Gs, Variant::Uwl] {
        let cfg = reduced_cfg(variant, DatasetArg::Mnist, 1);
        let rows = run_one(&cfg).expect("reduced run trains");
        table.push((variant.as_str().to_owned(), worst_uptick(&rows)));
    }

    for (name, uptick) in &table {
        println!("{name:>12}: worst per-task uptick {:+.4}", uptick);
    }
    for (name, uptick) in &table {
        assert!(
            *uptick <= margin,
            "{name}: accuracy rises by {uptick:.4} (> 1pp) along increasing η"
        );
    }
}

#[test]
fn c07_fashion_mtvib_vs_gs_joint_at_eta_03_soft_report() {
    // Soft, directional criterion: reported with seed-level detail rather
    // than hard-failed — the full-scale margin may shrink at desk scale.
    let mut detail = String::new();
    let mut wins = 0;
    for seed in 1..=3u64 {
        let mtvib = run_one(&reduced_cfg(Variant::Mtvib, DatasetArg::Fashion, seed))
            .expect("fashion mtvib run");
        let gs =
            run_one(&reduced_cfg(Variant::Gs, DatasetArg::Fashion, seed)).expect("fashion gs run");
        let m = acc_at(&mtvib, 0.3, "joint");
        let g = acc_at(&gs, 0.3, "joint");
        let won = m >= g;
        wins += won as u32;
        detail.push_str(&format!(
            "seed {seed}: mtvib joint@0.3 = {m:.3}, gs joint@0.3 = {g:.3} → {}\n",
            if won { "mtvib ≥ gs" } else { "gs ahead" }
        ));
    }
    let verdict = if wins >= 2 { "met" } else { "NOT met" };
    let report = format!("directional claim {verdict} in {wins}/3 seeds\n{detail}");
    println!("{report}");
    std::fs::write(shared().runs.join("c07-fashion-report.txt"), &report)
        .expect("persist the seed-level report");
}

#[test]
fn c08_converged_rate_is_non_increasing_in_beta() {
    let betas = [1e-4, 1e-3, 1e-2];
    let mut rates = Vec::new();
    for &beta in &betas {
        let mut cfg = reduced_cfg(Variant::Mtvib, DatasetArg::Mnist, 1);
        cfg.beta = beta;
        cfg.etas = vec![0.0]; // rate comes from the loss log; no sweep needed
        run_one(&cfg).expect("beta run trains");
        let rows = losses_of(&cfg);
        let last_epoch = rows.iter().map(|r| r.epoch).max().expect("rows exist");
        let rate = rows.iter().find(|r| r.epoch == last_epoch).expect("final epoch row").rate;
        rates.push(rate);
    }
    println!(
        "final rate by β: 1e-4 → {:.2}, 1e-3 → {:.2}, 1e-2 → {:.2} nats",
        rates[0], rates[1], rates[2]
    );
    assert!(
        rates[0] >= rates[1] && rates[1] >= rates[2],
        "rate should not increase with β: {rates:?}"
    );
}

#[test]
fn c09_fgsm_raises_eval_loss_at_eta_01_and_is_identity_at_eta_0() {
    desk_run(); // ensure the converged model exists
    let cfg = desk_cfg();
    let dir = RunDir::open(cfg.run_dir());
    let mut run = load_run(&dir).expect("desk checkpoint loads");
    let (_, test) =
        dataio::load_pair_datasets(&cfg.data_dir, Source::Mnist, cfg.n_train, cfg.n_test, cfg.seed)
            .expect("test set loads");

    let report = attack_report(&mut run, &test, 0.1).expect("attack report");
    println!(
        "η=0.1: perturbed ≥ clean on {:.1}% of {} batches",
        report.frac_nondecreasing * 100.0,
        report.rows.len()
    );
    assert!(
        report.frac_nondecreasing >= 0.95,
        "perturbed loss must be ≥ clean on ≥95% of batches, got {:.3}",
        report.frac_nondecreasing
    );

    // η=0 must return the input bit-for-bit.
    let idx: Vec<usize> = (0..cfg.batch.min(test.len())).collect();
    let (x, all_labels) = test.batch::<mtvib_harness::Elem>(&idx).expect("batch");
    let arm = &mut run.arms[0];
    let labels: Vec<Vec<usize>> =
        arm.task_lanes.iter().map(|&l| all_labels[l].clone()).collect();
    let x_adv = fgsm_perturb(&mut arm.model, &x, &labels, &arm.loss, &AttackConfig::new(0.0))
        .expect("η=0 perturbation");
    let same = x
        .data()
        .iter()
        .zip(x_adv.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "η=0 FGSM must be the bit-exact identity");
}

#[test]
fn c10_identical_config_reproduces_metrics_byte_identically() {
    let sh = shared();
    let mut mini = RunConfig::preset_defaults(Variant::Mtvib, Preset::Desk, DatasetArg::Mnist);
    mini.epochs = 2;
    mini.batch = 50;
    mini.n_train = 400;
    mini.n_test = 200;
    mini.latent_dim = Some(8);
    mini.etas = vec![0.0, 0.1];
    mini.data_dir = sh.data.clone();

    let mut artifacts = Vec::new();
    for attempt in ["determinism-a", "determinism-b"] {
        let mut cfg = mini.clone();
        cfg.out_dir = sh.runs.join(attempt);
        if cfg.out_dir.exists() {
            std::fs::remove_dir_all(&cfg.out_dir).expect("clear previous attempt");
        }
        run_one(&cfg).expect("mini run");
        let bytes = std::fs::read(cfg.run_dir().join("metrics.csv")).expect("metrics written");
        artifacts.push(bytes);
    }
    assert!(
        artifacts[0] == artifacts[1],
        "metrics.csv differs between identical configs"
    );
    println!("metrics.csv reproduced byte-identically ({} bytes)", artifacts[0].len());
}

// ------------------------------------------------- training-contract extras

#[test]
fn contract_desk_training_descends_and_uncertainties_stay_bounded() {
    desk_run();
    let rows = losses_of(&desk_cfg());
    let first_epoch = rows.iter().map(|r| r.epoch).min().expect("rows");
    let last_epoch = rows.iter().map(|r| r.epoch).max().expect("rows");
    let total_of = |epoch: usize| {
        rows.iter().find(|r| r.epoch == epoch).expect("epoch row").total
    };
    assert!(
        total_of(last_epoch) < total_of(first_epoch),
        "final total {:.4} should undercut the initial {:.4}",
        total_of(last_epoch),
        total_of(first_epoch)
    );
    for r in &rows {
        let s = r.sigma2.ln();
        assert!(
            s.is_finite() && s.abs() < 5.0,
            "epoch {} task {}: s = ln σ² = {s:.3} escapes |s| < 5",
            r.epoch,
            r.task
        );
    }
    println!(
        "total {:.4} → {:.4} over {} epochs; all |ln σ²| < 5",
        total_of(first_epoch),
        total_of(last_epoch),
        last_epoch
    );
}

#[test]
fn contract_beta_zero_run_keeps_a_larger_rate_than_beta_1e3() {
    // Rate under β=0 feels no compression pressure; β=1e-3 caps it.
    let mut zero = reduced_cfg(Variant::Mtvib, DatasetArg::Mnist, 1);
    zero.beta = 0.0;
    zero.etas = vec![0.0];
    run_one(&zero).expect("β=0 run trains");

    let mut capped = reduced_cfg(Variant::Mtvib, DatasetArg::Mnist, 1);
    capped.beta = 1e-3;
    capped.etas = vec![0.0];
    run_one(&capped).expect("β=1e-3 run trains");

    let final_rate = |cfg: &RunConfig| {
        let rows = losses_of(cfg);
        let last = rows.iter().map(|r| r.epoch).max().expect("rows");
        rows.iter().find(|r| r.epoch == last).expect("final row").rate
    };
    let (r0, r3) = (final_rate(&zero), final_rate(&capped));
    println!("final rate: β=0 → {r0:.2} nats, β=1e-3 → {r3:.2} nats");
    assert!(r0 > r3, "β=0 rate {r0:.2} should exceed β=1e-3 rate {r3:.2}");
}

#[test]
fn contract_task_uncertainty_recomposes_its_sigma() {
    // σ² round-trips through s = ln σ² at the representation level.
    let tu = TaskUncertainty::<f64>::new(3);
    let sig = tu.sigma2_values();
    assert_eq!(sig.len(), 3);
    for v in sig {
        assert!((v - 1.0).abs() < 1e-12, "fresh uncertainties start at σ² = 1");
    }
}
