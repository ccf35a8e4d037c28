//! `mfpnet`: phantom data generation, training, evaluation, inference,
//! gradient checking and heat-map export.
//!
//! Exit codes: 0 success, 1 contract/config error, 2 I/O error. All errors
//! print one line to stderr with the prefix `error:`.

mod heatmap;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfpnet::dataset::{generate_dataset, read_manifest, Case};
use mfpnet::metrics::LabelVolume;
use mfpnet::model::Model;
use mfpnet::segvol::{SegVol, VolumeData};
use mfpnet::suite::run_operator_suite;
use mfpnet::train::{evaluate, predict_volume, train, Checkpoint, TrainConfig};
use mfpnet::{Error, Graph, Result, Tensor};

use settings::TrainSettings;

#[derive(Parser)]
#[command(
    name = "mfpnet",
    version,
    about = "Multi-scale feature-pyramid segmentation: data, training, evaluation"
)]
struct Cli {
    /// Worker threads for kernel parallelism (1 = deterministic reference
    /// mode; results are identical for any value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset (SegVol image/label pairs plus manifest).
    GenData(GenDataArgs),
    /// Train a model variant on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint into a per-organ CSV report.
    Eval(EvalArgs),
    /// Predict labels for one image volume.
    Infer(InferArgs),
    /// Run the full operator gradient-check suite (nonzero exit on failure).
    Gradcheck,
    /// Export feature heat maps for one slice as PGM images.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 12)]
    cases: usize,
    /// Volume dims as DxHxW, e.g. 16x64x64.
    #[arg(long, default_value = "16x64x64")]
    dims: String,
    /// Voxel spacing in mm as DxHxW, e.g. 3.0x1.0x1.0.
    #[arg(long, default_value = "3.0x1.0x1.0")]
    spacing: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides (applied after the config file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Model variant: unet, unet-add, mfp1, mfp2, mfp-bica.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate; steps down 10x at epochs 200 and 300.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Disable training-time augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Use the reference configuration: batch 32, 400 epochs, lr 0.01,
    /// base channels 16, 256x256 slices.
    #[arg(long)]
    paper_config: bool,
    /// Resume from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the effective configuration and exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which manifest split to evaluate: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Baseline checkpoint; adds per-organ paired t-test columns on Dice.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image volume (SegVol f32).
    #[arg(long)]
    input: PathBuf,
    /// Output label volume (SegVol u8).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image volume (SegVol f32).
    #[arg(long)]
    input: PathBuf,
    /// Slice index along the depth axis.
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// Output directory for the PGM files.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io { .. } => 2u8,
                _ => 1u8,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args, cli.threads),
        Command::Eval(args) => run_eval(args),
        Command::Infer(args) => run_infer(args),
        Command::Gradcheck => run_gradcheck(),
        Command::Heatmap(args) => run_heatmap(args),
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str, what: &str) -> Result<(T, T, T)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!("{what}: expected DxHxW, got {s:?}")));
    }
    let mut vals = parts.iter().map(|p| {
        p.parse::<T>().map_err(|_| Error::config(format!("{what}: bad component {p:?} in {s:?}")))
    });
    Ok((
        vals.next().unwrap()?,
        vals.next().unwrap()?,
        vals.next().unwrap()?,
    ))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let dims = parse_triple::<usize>(&args.dims, "--dims")?;
    let spacing = parse_triple::<f64>(&args.spacing, "--spacing")?;
    let manifest = generate_dataset(&args.out, args.cases, dims, spacing, args.seed)?;
    println!(
        "wrote {} cases to {} (train {}, val {}, test {})",
        args.cases,
        args.out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

fn run_train(args: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut settings = if args.paper_config {
        TrainSettings::reference()
    } else {
        TrainSettings::desk()
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        settings.apply_text(&text)?;
    }
    for kv in &args.sets {
        settings.apply_line(kv)?;
    }
    settings.apply_flags(&args)?;

    println!("{}", settings.echo());
    if args.dry_run {
        return Ok(());
    }

    let mut cfg: TrainConfig = settings.to_train_config(args.data, args.out)?;
    cfg.resume_from = args.resume;
    // Deterministic reference mode keeps logs byte-identical across runs.
    cfg.log_walltime = threads != Some(1);
    let outcome = train(&cfg)?;
    println!(
        "trained {} epochs; best val dice {:.4}; last checkpoint {}",
        outcome.log.rows.last().map(|r| r.epoch + 1).unwrap_or(0),
        outcome.best_val_dice,
        outcome.last_checkpoint.display()
    );
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

fn split_ids(dir: &Path, split: &str) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?;
    Ok(match split {
        "train" => manifest.train,
        "val" => manifest.val,
        "test" => manifest.test,
        "all" => manifest.all_ids(),
        other => {
            return Err(Error::config(format!(
                "--split must be train, val, test or all, got {other:?}"
            )))
        }
    })
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let ids = split_ids(&args.data, &args.split)?;
    let (mut report, per_case) = evaluate(&ckpt, &args.data, &ids, args.batch)?;
    if let Some(baseline_path) = &args.baseline {
        let baseline = Checkpoint::read(baseline_path)?;
        let (_, baseline_cases) = evaluate(&baseline, &args.data, &ids, args.batch)?;
        report.attach_t_tests(&per_case, &baseline_cases)?;
    }
    std::fs::write(&args.out, report.to_csv())
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!(
        "evaluated {} cases: mean dice {:.4}, mean msd {}",
        report.cases,
        report.average_dice(),
        report
            .average_msd()
            .map(|v| format!("{v:.3} mm"))
            .unwrap_or_else(|| "undefined".to_string())
    );
    println!("report: {}", args.out.display());
    Ok(())
}

fn case_from_image(id: &str, img: &SegVol) -> Result<Case> {
    let labels = LabelVolume::new(
        img.dims,
        (img.spacing.0 as f64, img.spacing.1 as f64, img.spacing.2 as f64),
        vec![0u8; img.dims.0 * img.dims.1 * img.dims.2],
    )?;
    Ok(Case { id: id.to_string(), image: img.as_image()?.to_vec(), labels })
}

fn run_infer(args: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let img = SegVol::read(&args.input)?;
    let case = case_from_image("input", &img)?;
    let model = Model::new(ckpt.spec.clone())?;
    let pred = predict_volume(&model, &ckpt.params, &case, args.batch)?;
    SegVol::new(img.dims, img.spacing, VolumeData::U8(pred.voxels))?.write(&args.output)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn run_gradcheck() -> Result<()> {
    let mut failures = 0usize;
    for entry in run_operator_suite() {
        if entry.report.pass {
            println!("ok   {:<32} max_rel_err {:.3e}", entry.name, entry.report.max_rel_err);
        } else {
            failures += 1;
            println!(
                "FAIL {:<32} max_rel_err {:.3e}{}",
                entry.name,
                entry.report.max_rel_err,
                entry
                    .report
                    .fault
                    .as_deref()
                    .map(|f| format!(" ({f})"))
                    .unwrap_or_default()
            );
        }
    }
    if failures > 0 {
        return Err(Error::contract(format!("{failures} operator gradient check(s) failed")));
    }
    println!("all operator gradient checks passed");
    Ok(())
}

fn run_heatmap(args: HeatmapArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let img = SegVol::read(&args.input)?;
    let (nd, nh, nw) = img.dims;
    if args.slice >= nd {
        return Err(Error::contract(format!(
            "slice {} out of range for a volume of depth {nd}",
            args.slice
        )));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let model = Model::new(ckpt.spec.clone())?;
    let plane = nh * nw;
    let slice = &img.as_image()?[args.slice * plane..(args.slice + 1) * plane];
    let normalized = mfpnet::phantom::normalize_slice(slice);

    let mut g = Graph::<f32>::new();
    let nodes = ckpt.params.register(&mut g);
    let input = g.constant(Tensor::from_vec(&[1, 1, nh, nw], normalized)?);
    let mut trace = Vec::new();
    model.forward_traced(&mut g, &nodes, input, &mut trace)?;
    let mut written = 0usize;
    for (name, node) in trace {
        let v = g.value(node);
        let (_, c, h, w) = v.dims4()?;
        // Mean over channels gives one 2-D map per traced feature.
        let mut map = vec![0f32; h * w];
        for ci in 0..c {
            for (m, &x) in map.iter_mut().zip(&v.data()[ci * h * w..(ci + 1) * h * w]) {
                *m += x / c as f32;
            }
        }
        let file = args.out.join(format!("{}.pgm", name.replace('.', "_")));
        heatmap::export_heatmap(&map, h, w, &file)?;
        written += 1;
    }
    println!("wrote {written} heat maps to {}", args.out.display());
    Ok(())
}
