use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use percal::data::{Dataset, DoseParams, Split};
use percal::influence::write_samples_csv;
use percal::nn::{
    pretrain_domain, pretrain_generic, texture_dataset, Context, EncoderSidecar, PretrainOptions, TaggedSlice, VggEncoder,
};
use percal::runner::{
    calibrate, compare_runs, evaluate_run, run_experiment, ExperimentConfig, ExperimentReport, RunPaths, DEFAULT_TARGET_PSI,
};
use percal::{Error, Result};

#[derive(Parser)]
#[command(name = "percal", version, about = "Perceptual-loss calibration for low-dose CT denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired low/normal-dose phantom dataset.
    PhantomGen(PhantomArgs),
    /// Pretrain a feature encoder and write its checkpoint.
    PretrainEncoder(PretrainArgs),
    /// Sweep the influence curve of an untrained model and solve for λ.
    Calibrate(CalibrateArgs),
    /// Calibrate, train and evaluate one experiment.
    Train(TrainArgs),
    /// Re-evaluate a finished run from its checkpoint.
    Evaluate(RunArg),
    /// Rank runs and test a reference run against the others.
    Compare(CompareArgs),
    /// Print the summary of a finished run.
    Report(RunArg),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    patients: usize,
    #[arg(long, default_value_t = 20)]
    slices: usize,
    /// Slice height and width.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long, default_value_t = DoseParams::default().kappa)]
    kappa: f64,
    #[arg(long, default_value_t = DoseParams::default().sigma_g)]
    sigma_g: f64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    context: Context,
    /// Checkpoint path; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory (domain context only).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    split_manifest: Option<PathBuf>,
    /// Patch size for domain pretraining.
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, conflicts_with = "sweep")]
    target_psi: Option<f64>,
    /// Only sweep the curve.
    #[arg(long)]
    sweep: bool,
    /// Output directory (default `calibration/<id>` beside the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory (default `runs/<id>` beside the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArg {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    reference: String,
    #[arg(long, default_value = "comparison")]
    out: PathBuf,
}

fn beside(config: &Path, sub: &str, id: &str) -> PathBuf {
    config.parent().unwrap_or(Path::new(".")).join(sub).join(id)
}

fn phantom_gen(a: PhantomArgs) -> Result<()> {
    let dose = DoseParams { kappa: a.kappa, sigma_g: a.sigma_g };
    let ds = Dataset::phantom(a.patients, a.slices, a.size, a.size, dose, a.seed)?;
    ds.save(&a.out)?;
    let m = ds.splits.to_manifest();
    println!(
        "wrote {} patients to {} (train {:?}, validation {:?}, test {:?})",
        a.patients,
        a.out.display(),
        m.train,
        m.validation,
        m.test
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut encoder = VggEncoder::new(a.seed);
    let (epochs, summary) = match a.context {
        Context::Generic => {
            let opts = PretrainOptions { epochs: a.epochs.unwrap_or(6), seed: a.seed, ..Default::default() };
            let train = texture_dataset(64, 32, a.seed.wrapping_add(1));
            let held_out = texture_dataset(16, 32, a.seed.wrapping_add(2));
            let r = pretrain_generic(&mut encoder, &train, &held_out, &opts)?;
            println!(
                "texture classification: held-out accuracy {:.3} (chance {:.3})",
                r.held_out_accuracy, r.chance_accuracy
            );
            (opts.epochs, serde_json::to_value(r)?)
        }
        Context::Domain => {
            let dir = a.dataset.as_deref().ok_or_else(|| Error::Config("domain pretraining needs --dataset".into()))?;
            let ds = Dataset::load(dir, a.split_manifest.as_deref())?;
            let slices: Vec<TaggedSlice> = ds
                .patch_pairs(Split::Train, a.patch_size, a.patch_size)?
                .into_iter()
                .map(|p| TaggedSlice { patient_id: p.patient_id, image: p.ndct })
                .collect();
            let opts = PretrainOptions { epochs: a.epochs.unwrap_or(3), seed: a.seed, ..Default::default() };
            let r = pretrain_domain(&mut encoder, &slices, &ds.splits, &opts)?;
            println!("reconstruction mse {:.4e} -> {:.4e}", r.initial_mse, r.final_mse);
            (opts.epochs, serde_json::to_value(r)?)
        }
    };
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    encoder.save(&a.out)?;
    EncoderSidecar {
        architecture_hash: encoder.params().architecture_hash(),
        context: a.context,
        seed: a.seed,
        epochs,
        summary,
    }
    .write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let target = if a.sweep { None } else { Some(a.target_psi.unwrap_or(DEFAULT_TARGET_PSI)) };
    let out = a.out.unwrap_or_else(|| beside(&a.config, "calibration", &cfg.id));
    let cal = calibrate(&cfg, target)?;
    let paths = RunPaths::new(&out);
    std::fs::create_dir_all(&out)?;
    cal.curve.write_json(&paths.curve_json())?;
    cal.curve.write_svg(&paths.curve_svg())?;
    if let Some(samples) = &cal.curve.aggregates.per_sample {
        write_samples_csv(&paths.samples_csv(), samples)?;
    }
    let agg = &cal.curve.aggregates;
    println!("n {}  s_mse {:.6e}  s_pl {:.6e}", agg.n, agg.s_mse, agg.s_pl);
    if a.sweep {
        println!("{:>12} {:>12} {:>12}", "lambda", "psi", "psi (mean)");
        let per = cal.curve.psi_per_sample_mean.as_deref().unwrap_or(&[]);
        for (i, (l, p)) in cal.curve.lambda_grid.iter().zip(&cal.curve.psi_values).enumerate() {
            let m = per.get(i).map(|v| format!("{v:.6}")).unwrap_or_default();
            println!("{l:>12.3e} {p:>12.6} {m:>12}");
        }
    }
    if let (Some(t), Some(l)) = (cal.target, cal.lambda) {
        println!("target psi {t}: lambda {l:.6e} ({:?})", cfg.psi_mode);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let out = a.out.unwrap_or_else(|| beside(&a.config, "runs", &cfg.id));
    let report = run_experiment(&cfg, &out)?;
    print!("{}", report.render());
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::PretrainEncoder(a) => pretrain(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => {
            print!("{}", evaluate_run(&a.run)?.render());
            Ok(())
        }
        Command::Compare(a) => {
            let suite = compare_runs(&a.runs, &a.reference, &a.out)?;
            print!("{}", suite.render());
            println!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Report(a) => {
            print!("{}", ExperimentReport::read(&RunPaths::new(&a.run).report())?.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
