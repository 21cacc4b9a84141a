//! Command-line surface: synthetic dataset generation, training,
//! evaluation, attention inspection, and gradient checking, all
//! reproducible from (flags, config file, dataset bytes, seed).
//!
//! Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O or data
//! error, 4 numeric abort, 5 checkpoint/dataset shape mismatch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use drmn_core::dataset::{self, SynthConfig};
use drmn_core::error::Error;
use drmn_core::eval::{evaluate, EnsembleConfig};
use drmn_core::inspect::export_attention;
use drmn_core::model::ModelParams;
use drmn_core::train::{self, checkpoint, metrics_csv, TrainConfig};
use drmn_core::verify;

#[derive(Parser)]
#[command(
    name = "drmn",
    version,
    about = "Zero-shot learning engine: dual attention, batch semantic interaction, hyperspherical classification, two-branch GZSL ensemble"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature-pyramid dataset with planted attribute
    /// signatures.
    GenSynth(GenSynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: CZSL accuracy and GZSL U/S/H.
    Eval(EvalArgs),
    /// Export per-attribute attention heatmaps and channel gates for one
    /// image.
    InspectAttn(InspectArgs),
    /// Verify analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 15)]
    seen: usize,
    #[arg(long, default_value_t = 12)]
    attrs: usize,
    #[arg(long, default_value_t = 30)]
    imgs_per_class: usize,
    /// White-noise level added to every feature value.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Fraction of each seen class reserved for training.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Norm of each planted channel signature.
    #[arg(long, default_value_t = 2.0)]
    sig_scale: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; missing keys take defaults, unknown keys are
    /// rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.drmn, metrics.csv,
    /// config.resolved.json.
    #[arg(long)]
    out: PathBuf,
    /// Disable multi-level feature fusion.
    #[arg(long)]
    no_mff: bool,
    /// Disable attribute-guided channel attention.
    #[arg(long)]
    no_aca: bool,
    /// Disable the batch-level semantic transformer.
    #[arg(long)]
    no_sit: bool,
    /// Disable the global classification branch.
    #[arg(long)]
    no_global: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.json (defaults to the checkpoint's
    /// directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the ensemble weight from the checkpoint.
    #[arg(long)]
    beta: Option<f64>,
    /// Use calibrated attribute-branch prediction alone, no ensemble.
    #[arg(long)]
    no_ensemble: bool,
    /// Comma-separated betas to sweep; the report gains one U/S/H row per
    /// value plus the argmax-H beta.
    #[arg(long, value_delimiter = ',')]
    beta_sweep: Option<Vec<f64>>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Image id to inspect.
    #[arg(long)]
    image: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run only the end-to-end micro check, skipping the per-kernel suite.
    #[arg(long)]
    micro: bool,
}

/// Run config file layout: {"train": {...}, "ensemble": {...}}, with
/// optional data/out echoes so a resolved config reproduces its run.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    ensemble: EnsembleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out: Option<String>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::NanLoss { .. } => 4,
        Error::ShapeEcho(_) => 5,
        Error::NonDeterministic { .. } => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::InspectAttn(args) => cmd_inspect(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<ExitCode, Error> {
    if args.seen >= args.classes {
        return Err(Error::Config("seen exceeds classes".into()));
    }
    let cfg = SynthConfig {
        n_classes: args.classes,
        n_seen: args.seen,
        n_attributes: args.attrs,
        images_per_class: args.imgs_per_class,
        noise_sigma: args.noise,
        train_fraction: args.train_fraction,
        signature_scale: args.sig_scale,
        ..SynthConfig::default()
    };
    let (ds, _) = dataset::generate_to_dir(&cfg, args.seed, &args.out)?;
    println!(
        "wrote {} images / {} classes ({} seen) / {} attributes / {} levels to {}",
        ds.n_images(),
        ds.semantics.n_classes,
        ds.split.seen_classes.len(),
        ds.semantics.n_attributes,
        ds.features.n_levels(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var("DRMN_SEED") {
        Ok(v) => v.parse::<u64>().map(Some).map_err(|_| {
            Error::Config(format!("DRMN_SEED must be an unsigned integer, got {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfigFile, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(RunConfigFile::default()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let mut run = load_run_config(args.config.as_deref())?;
    if args.no_mff {
        run.train.mff = false;
    }
    if args.no_aca {
        run.train.aca = false;
    }
    if args.no_sit {
        run.train.sit = false;
    }
    if args.no_global {
        run.train.global_branch = false;
    }
    if let Some(seed) = seed_override()? {
        run.train.seed = seed;
    }

    let ds = dataset::load_dataset(&args.data)?;
    let result = train::fit(&ds, &run.train, &run.ensemble, None)?;

    std::fs::create_dir_all(&args.out)?;
    let resolved = RunConfigFile {
        train: run.train.clone(),
        ensemble: run.ensemble,
        data: Some(args.data.display().to_string()),
        out: Some(args.out.display().to_string()),
    };
    std::fs::write(
        args.out.join("config.resolved.json"),
        serde_json::to_string_pretty(&resolved)?,
    )?;
    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&result.rows))?;
    let ckpt = result.to_checkpoint(&run.train, &run.ensemble);
    checkpoint::save(&ckpt, &args.out.join("checkpoint.drmn"))?;

    let last = result.rows.last().expect("at least one epoch");
    println!(
        "trained {} epochs: loss {:.4}, czsl {:.3}, gzsl H {:.3} -> {}",
        result.epoch,
        last.loss_total,
        last.czsl_acc,
        last.gzsl_h,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SweepRow {
    beta: f64,
    #[serde(rename = "U")]
    u: f64,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "H")]
    h: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let ds = dataset::load_dataset(&args.data)?;
    train::check_dims(&ckpt, &ds)?;

    let cfg = ckpt.train_config.model_config(&ds);
    let params = ModelParams::from_map(ckpt.params.clone());
    let mut ens = ckpt.ensemble;
    if let Some(beta) = args.beta {
        ens.beta = beta;
    }
    let use_ensemble = !args.no_ensemble;

    let report = evaluate(&ds, &params, &cfg, &ens, use_ensemble)?;

    let mut json = serde_json::to_value(&report)?;
    if let Some(betas) = &args.beta_sweep {
        let mut sweep = Vec::new();
        for &beta in betas {
            let mut e = ens;
            e.beta = beta;
            let r = evaluate(&ds, &params, &cfg, &e, use_ensemble)?;
            sweep.push(SweepRow {
                beta,
                u: r.gzsl.u,
                s: r.gzsl.s,
                h: r.gzsl.h,
            });
        }
        let best = sweep
            .iter()
            .max_by(|a, b| a.h.total_cmp(&b.h))
            .map(|r| r.beta);
        let obj = json.as_object_mut().expect("report is an object");
        obj.insert("beta_sweep".into(), serde_json::to_value(&sweep)?);
        obj.insert("best_beta".into(), serde_json::to_value(best)?);
    }

    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| args.ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&json)?,
    )?;

    println!("czsl acc   {:.4}", report.czsl_acc);
    println!("gzsl U     {:.4}", report.gzsl.u);
    println!("gzsl S     {:.4}", report.gzsl.s);
    println!("gzsl H     {:.4}", report.gzsl.h);
    println!("class  part    acc");
    for pc in &report.per_class {
        println!(
            "{:>5}  {:<6}  {}/{} = {:.3}",
            pc.class_id, pc.partition, pc.correct, pc.total, pc.accuracy
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(args: InspectArgs) -> Result<ExitCode, Error> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let ds = dataset::load_dataset(&args.data)?;
    train::check_dims(&ckpt, &ds)?;
    let cfg = ckpt.train_config.model_config(&ds);
    let params = ModelParams::from_map(ckpt.params.clone());

    let attn_dir = args.out.join("attn");
    let ev = export_attention(&ds, &params, &cfg, args.image, &attn_dir)?;

    let a = cfg.n_attributes;
    let r = cfg.n_regions();
    for attr in 0..a {
        let sum: f64 = ev.omega[attr * r..(attr + 1) * r].iter().sum();
        println!(
            "attribute {attr} ({}) attention row sum {sum:.9}",
            ds.semantics.attribute_names[attr]
        );
    }
    println!("wrote {a} heatmaps and gates.csv to {}", attn_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let corrupt = std::env::var("DRMN_GRADCHECK_CORRUPT").ok();
    let mut failed = false;

    if !args.micro {
        println!("kernel checks (tolerance {:.0e}):", verify::KERNEL_TOL);
        for (name, err) in verify::kernel_gradchecks(123)? {
            let ok = err < verify::KERNEL_TOL;
            failed |= !ok;
            println!(
                "  {:<18} max rel err {err:.3e}  {}",
                name,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }

    println!("end-to-end micro check (tolerance {:.0e}):", verify::E2E_TOL);
    let report = verify::micro_e2e_gradcheck(corrupt.as_deref())?;
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for p in &report.per_param {
        let group = p
            .name
            .split('.')
            .next()
            .unwrap_or(p.name.as_str())
            .to_string();
        let e = groups.entry(group).or_insert(0.0);
        *e = e.max(p.max_rel_err);
    }
    for (group, err) in &groups {
        let ok = *err < verify::E2E_TOL;
        println!(
            "  {:<18} max rel err {err:.3e}  {}",
            group,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if report.max_rel_err() >= verify::E2E_TOL {
        failed = true;
        let worst = report.worst_param().expect("non-empty report");
        eprintln!(
            "gradient check failed: worst parameter {} with max rel err {:.3e}",
            worst.name, worst.max_rel_err
        );
    }

    Ok(if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}
