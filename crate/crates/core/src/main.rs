//! Command-line surface: dataset generation, training, evaluation,
//! embedding export, and gradient verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/numeric error,
//! 3 verification failure.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use swinadapt::config::RunConfig;
use swinadapt::data::{generate_synthetic, read_dataset, write_dataset, SyntheticSpec};
use swinadapt::error::Error;
use swinadapt::model::Model;
use swinadapt::train::{
    evaluate, export_embeddings, load_model_checkpoint, save_model_checkpoint, train_run,
    OptimState, RunData,
};
use swinadapt::verify::run_gradient_suite;

#[derive(Parser)]
#[command(name = "swinadapt", version, about = "Domain adaptation on a tiny windowed-attention backbone")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark files
    Gen(GenArgs),
    /// Train a model from a config file plus flag overrides
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset
    Eval(EvalArgs),
    /// Export final-block embeddings as CSV
    ExportEmbed(ExportArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for the four dataset files
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class_train: usize,
    #[arg(long, default_value_t = 50)]
    per_class_eval: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Intensity inversion strength (0 = none, 1 = full)
    #[arg(long, default_value_t = 1.0)]
    shift_intensity: f64,
    /// Rotation offset as a fraction of 60 degrees
    #[arg(long, default_value_t = 0.5)]
    shift_rotation: f64,
    /// Background texture amplitude
    #[arg(long, default_value_t = 0.0)]
    shift_texture: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source-domain training set
    #[arg(long)]
    data_src: PathBuf,
    /// Target-domain training set
    #[arg(long)]
    data_tgt: PathBuf,
    /// Source-domain eval split (required when pixel mixing is on)
    #[arg(long)]
    data_src_eval: Option<PathBuf>,
    /// Target-domain eval split
    #[arg(long)]
    data_tgt_eval: Option<PathBuf>,
    /// Directory for losses.csv and run.log
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Resume from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override total training steps
    #[arg(long)]
    steps: Option<usize>,
    /// Stop early at this step (schedule still spans the full budget)
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long, value_name = "on|off")]
    toggle_gdd: Option<String>,
    #[arg(long, value_name = "on|off")]
    toggle_ada: Option<String>,
    #[arg(long, value_name = "on|off")]
    toggle_cft: Option<String>,
    #[arg(long, value_name = "on|off")]
    toggle_pixmix: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Config file describing the checkpoint's architecture (defaults apply)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Random seeds per check
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Usage(format!("config {}: {e}", p.display())))?;
            RunConfig::parse(&text)
        }
    }
}

fn parse_toggle_flag(name: &str, value: &Option<String>) -> Result<Option<bool>, Error> {
    match value.as_deref() {
        None => Ok(None),
        Some("on") => Ok(Some(true)),
        Some("off") => Ok(Some(false)),
        Some(other) => Err(Error::Usage(format!(
            "invalid value {other:?} for --{name} (expected on|off)"
        ))),
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), Error> {
    let spec = SyntheticSpec {
        classes: args.classes,
        per_class_train: args.per_class_train,
        per_class_eval: args.per_class_eval,
        image_size: args.image_size,
        shift_intensity: args.shift_intensity,
        shift_rotation: args.shift_rotation,
        shift_texture: args.shift_texture,
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out)?;
    let [src_train, src_eval, tgt_train, tgt_eval] = generate_synthetic(&spec);
    let names = [
        ("source_train.tds", &src_train),
        ("source_eval.tds", &src_eval),
        ("target_train.tds", &tgt_train),
        ("target_eval.tds", &tgt_eval),
    ];
    for (name, ds) in names {
        let path = args.out.join(name);
        write_dataset(ds, &path)?;
        println!("wrote {} ({} samples)", path.display(), ds.len());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.set_total_steps(steps);
    }
    if let Some(stop) = args.stop_after {
        cfg.train.stop_after = Some(stop);
    }
    if let Some(v) = parse_toggle_flag("toggle-gdd", &args.toggle_gdd)? {
        cfg.train.toggle_gdd = v;
    }
    if let Some(v) = parse_toggle_flag("toggle-ada", &args.toggle_ada)? {
        cfg.train.toggle_ada_entropy = v;
    }
    if let Some(v) = parse_toggle_flag("toggle-cft", &args.toggle_cft)? {
        cfg.train.toggle_cft = v;
    }
    if let Some(v) = parse_toggle_flag("toggle-pixmix", &args.toggle_pixmix)? {
        cfg.train.toggle_pixmix = v;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let src_train = read_dataset(&args.data_src)?;
    let tgt_train = read_dataset(&args.data_tgt)?;
    let src_eval = args.data_src_eval.as_ref().map(|p| read_dataset(p)).transpose()?;
    let tgt_eval = args.data_tgt_eval.as_ref().map(|p| read_dataset(p)).transpose()?;
    if src_train.num_classes != cfg.model.backbone.num_classes {
        return Err(Error::Usage(format!(
            "dataset has {} classes but the model is configured for {}",
            src_train.num_classes, cfg.model.backbone.num_classes
        )));
    }

    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    let mut optim = OptimState::new(&model.store);
    let mut pseudo = None;
    if let Some(resume) = &args.resume {
        pseudo = load_model_checkpoint(resume, &mut model, &mut optim)?;
        println!("resumed from {} at step {}", resume.display(), optim.step);
    }

    let data = RunData {
        src_train: &src_train,
        tgt_train: &tgt_train,
        src_eval: src_eval.as_ref(),
        tgt_eval: tgt_eval.as_ref(),
    };
    let summary = train_run(&mut model, &mut optim, &cfg.train, &data, pseudo.clone())?;

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("losses.csv"), &summary.loss_csv)?;
        std::fs::write(out.join("run.log"), &summary.run_log)?;
    }
    if let Some(ckpt) = &args.ckpt {
        // persist the pseudo set actually used so a resume reproduces it
        save_model_checkpoint(ckpt, &model, &optim, summary.pseudo.as_ref())?;
    }
    println!("{}", summary.summary_json());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config)?;
    let ds = read_dataset(&args.data)?;
    let mut model = Model::new(cfg.model, 0)?;
    let mut optim = OptimState::new(&model.store);
    load_model_checkpoint(&args.ckpt, &mut model, &mut optim)?;
    let result = evaluate(&model, &ds)?;
    let per_class: Vec<String> = result.per_class.iter().map(|v| v.to_string()).collect();
    println!(
        "{{\"accuracy\":{},\"per_class\":[{}]}}",
        result.accuracy,
        per_class.join(",")
    );
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config)?;
    let ds = read_dataset(&args.data)?;
    let mut model = Model::new(cfg.model, 0)?;
    let mut optim = OptimState::new(&model.store);
    load_model_checkpoint(&args.ckpt, &mut model, &mut optim)?;
    export_embeddings(&model, &ds, &args.out)?;
    println!("wrote {} ({} rows)", args.out.display(), ds.len() + 1);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool, Error> {
    let report = run_gradient_suite(args.seeds, args.tolerance)?;
    for c in &report.checks {
        println!(
            "{} {} max_err={:.3e} (tolerance {:.1e}, {} seeds)",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.max_err,
            c.tolerance,
            c.seeds
        );
    }
    Ok(report.all_passed())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Usage(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result: Result<u8, Error> = match cli.cmd {
        Command::Gen(args) => cmd_gen(args).map(|_| 0),
        Command::Train(args) => cmd_train(args).map(|_| 0),
        Command::Eval(args) => cmd_eval(args).map(|_| 0),
        Command::ExportEmbed(args) => cmd_export(args).map(|_| 0),
        Command::Gradcheck(args) => cmd_gradcheck(args).map(|ok| if ok { 0 } else { 3 }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
