use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtvib_core::data::Source;

use mtvib_harness::config::{DatasetArg, Preset, RunConfig, Variant};
use mtvib_harness::error::Result;
use mtvib_harness::runio::RunDir;
use mtvib_harness::{dataio, eval, sweep, synth, train};

#[derive(Parser)]
#[command(
    name = "mtvib",
    about = "Multi-task variational information bottleneck: training, FGSM sweeps, reports",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run-producing command, mirroring RunConfig.
#[derive(Args, Clone)]
struct RunFlags {
    /// Model/loss variant to train.
    #[arg(long, value_enum, default_value = "mtvib")]
    variant: Variant,
    /// Scale preset (paper-scale settings or the reduced desk scale).
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Source corpus for the two-digit overlays.
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetArg,
    /// Training epochs (preset default if omitted).
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// KL weight β (VIB variants).
    #[arg(long)]
    beta: Option<f64>,
    /// Latent width d (VIB variants; preset default if omitted).
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Seed for init, pairing, shuffling, and latent noise.
    #[arg(long)]
    seed: Option<u64>,
    /// FGSM strengths, comma separated (e.g. 0,0.05,0.1).
    #[arg(long, value_delimiter = ',')]
    etas: Option<Vec<f64>>,
    /// Train pairs to generate.
    #[arg(long)]
    n_train: Option<usize>,
    /// Test pairs to generate.
    #[arg(long)]
    n_test: Option<usize>,
    /// Latent samples averaged at eval time (0 = deterministic z = μ).
    #[arg(long)]
    sample_eval: Option<usize>,
    /// Grid-search task-1 weights to try (two-task runs), comma separated.
    #[arg(long, value_delimiter = ',')]
    gs_w1: Option<Vec<f64>>,
    /// Epochs per grid-search candidate before the winner trains in full.
    #[arg(long)]
    gs_select_epochs: Option<usize>,
    /// Directory holding the IDX source files (and the pair cache).
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Output directory; each run gets a subdirectory named by its id.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunFlags {
    fn into_config(self) -> RunConfig {
        let mut cfg = RunConfig::preset_defaults(self.variant, self.preset, self.dataset);
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.latent_dim = Some(v);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.etas {
            cfg.etas = v;
        }
        if let Some(v) = self.n_train {
            cfg.n_train = v;
        }
        if let Some(v) = self.n_test {
            cfg.n_test = v;
        }
        if let Some(v) = self.sample_eval {
            cfg.sample_eval = v;
        }
        if self.gs_w1.is_some() {
            cfg.gs_w1 = self.gs_w1;
        }
        if let Some(v) = self.gs_select_epochs {
            cfg.gs_select_epochs = v;
        }
        cfg.data_dir = self.data_dir;
        cfg.out_dir = self.out;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write its run directory (checkpoints, losses.csv).
    Train(RunFlags),
    /// Evaluate a trained run under the FGSM sweep; writes metrics.csv + curves.svg.
    Eval {
        /// Run directory produced by `mtvib train`.
        #[arg(long)]
        run: PathBuf,
        /// Override the config's FGSM strengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
    },
    /// Compare clean vs perturbed loss batch-by-batch at one η.
    Attack {
        /// Run directory produced by `mtvib train`.
        #[arg(long)]
        run: PathBuf,
        /// FGSM strength.
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
    },
    /// Train + evaluate a variants × seeds grid; writes sweep.csv + sweep.svg.
    Sweep {
        #[command(flatten)]
        flags: RunFlags,
        /// Variants to sweep, comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["stl", "mtl", "gs", "uwl", "stvib", "mtvib"])]
        variants: Vec<Variant>,
        /// Seeds to sweep, comma separated.
        #[arg(long, value_delimiter = ',', default_values = ["1", "2", "3"])]
        seeds: Vec<u64>,
    },
    /// Aggregate every run under an output directory into one table.
    Report {
        /// Output directory holding run subdirectories.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render a synthetic IDX corpus (stand-in for the real archives).
    Synth {
        /// Which corpus to render.
        #[arg(long, value_enum, default_value = "both")]
        which: SynthWhich,
        /// Source images for the train split.
        #[arg(long, default_value_t = 12_000)]
        n_train: usize,
        /// Source images for the test split.
        #[arg(long, default_value_t = 3_000)]
        n_test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory to write <source>/train-images-idx3-ubyte etc. into.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SynthWhich {
    Mnist,
    Fashion,
    Both,
}

fn cmd_train(cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = RunDir::create(&cfg)?;
    let (train_set, _) = dataio::load_pair_datasets(
        &cfg.data_dir,
        cfg.dataset.source(),
        cfg.n_train,
        cfg.n_test,
        cfg.seed,
    )?;
    println!("training {} ({} train pairs)…", cfg.run_id(), train_set.len());
    train::train(&cfg, &train_set, &dir)?;
    println!("run directory: {}", dir.root.display());
    println!("next: mtvib eval --run {}", dir.root.display());
    Ok(())
}

fn load_run_and_test(run: &PathBuf) -> Result<(train::TrainedRun, mtvib_core::data::Dataset)> {
    let dir = RunDir::open(run);
    let trained = train::load_run(&dir)?;
    let cfg = &trained.config;
    let (_, test_set) = dataio::load_pair_datasets(
        &cfg.data_dir,
        cfg.dataset.source(),
        cfg.n_train,
        cfg.n_test,
        cfg.seed,
    )?;
    Ok((trained, test_set))
}

fn cmd_eval(run: PathBuf, etas: Option<Vec<f64>>) -> Result<()> {
    let dir = RunDir::open(&run);
    let (mut trained, test_set) = load_run_and_test(&run)?;
    let etas = etas.unwrap_or_else(|| trained.config.etas.clone());
    let rows = eval::evaluate(&mut trained, &test_set, &etas)?;
    eval::write_reports(&dir, &rows)?;

    let outcome = sweep::SweepOutcome {
        aggregated: sweep::aggregate(&rows),
        rows,
        gaps: vec![],
    };
    print!("{}", sweep::format_outcome(&outcome));
    println!("\nwrote {}", dir.metrics_path().display());
    Ok(())
}

fn cmd_attack(run: PathBuf, eta: f64) -> Result<()> {
    let dir = RunDir::open(&run);
    let (mut trained, test_set) = load_run_and_test(&run)?;
    let report = eval::attack_report(&mut trained, &test_set, eta)?;

    let path = dir.root.join(format!("attack-eta{eta}.csv"));
    dir.write_text(&path, &eval::attack_csv(&report))?;

    let clean: f64 =
        report.rows.iter().map(|r| r.clean).sum::<f64>() / report.rows.len() as f64;
    let perturbed: f64 =
        report.rows.iter().map(|r| r.perturbed).sum::<f64>() / report.rows.len() as f64;
    println!("eta = {eta} over {} batches", report.rows.len());
    println!("mean clean loss      {clean:.6}");
    println!("mean perturbed loss  {perturbed:.6}");
    println!(
        "perturbed ≥ clean on {:.1}% of batches",
        100.0 * report.frac_nondecreasing
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(flags: RunFlags, variants: Vec<Variant>, seeds: Vec<u64>) -> Result<()> {
    let base = flags.into_config();
    let outcome = sweep::sweep(&base, &variants, &seeds)?;
    sweep::write_sweep(&base.out_dir, &outcome, base.dataset.as_str())?;
    print!("{}", sweep::format_outcome(&outcome));
    println!("\nwrote {}", base.out_dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_synth(
    which: SynthWhich,
    n_train: usize,
    n_test: usize,
    seed: u64,
    data_dir: PathBuf,
) -> Result<()> {
    let sources: &[Source] = match which {
        SynthWhich::Mnist => &[Source::Mnist],
        SynthWhich::Fashion => &[Source::Fashion],
        SynthWhich::Both => &[Source::Mnist, Source::Fashion],
    };
    for &source in sources {
        synth::generate(&data_dir, source, n_train, n_test, seed)?;
        println!(
            "wrote {} corpus: {n_train} train / {n_test} test under {}",
            source.as_str(),
            data_dir.join(source.as_str()).display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(flags) => cmd_train(flags.into_config()),
        Command::Eval { run, etas } => cmd_eval(run, etas),
        Command::Attack { run, eta } => cmd_attack(run, eta),
        Command::Sweep { flags, variants, seeds } => cmd_sweep(flags, variants, seeds),
        Command::Report { out } => sweep::report(&out).map(|text| print!("{text}")),
        Command::Synth { which, n_train, n_test, seed, data_dir } => {
            cmd_synth(which, n_train, n_test, seed, data_dir)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
