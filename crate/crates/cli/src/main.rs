//! `sdc` — category discovery over embedding files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sdc_core::clustering::estimate_k_detailed;
use sdc_core::data::{generate_synthetic, split_dataset, write_csv};
use sdc_core::evaluation::entropy_summary;
use sdc_core::model::{load_checkpoint, pretrain_biased, save_checkpoint};
use sdc_core::numerics::{entropy, softmax};
use sdc_core::pipeline::{evaluate, infer, run_ablation, run_discovery};
use sdc_core::{
    load_dataset, save_dataset, Arm, Checkpoint, DatasetFormat, EmbeddingDataset, InferenceMode, PipelineConfig,
    SplitTag, SyntheticConfig, TrainableModel,
};

#[derive(Parser)]
#[command(
    name = "sdc",
    version,
    about = "Self-debiasing calibration for generalized category discovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a Gaussian-mixture dataset (all rows unlabeled, all categories known).
    Synth(SynthArgs),
    /// Choose novel categories and assign labeled/unlabeled/test splits.
    Split(SplitArgs),
    /// Train the biased model on labeled rows and save it.
    Pretrain(PretrainArgs),
    /// Run the full discovery pipeline and report test metrics.
    Discover(DiscoverArgs),
    /// Score a trained model on the test split.
    Evaluate(EvaluateArgs),
    /// Write one prediction per row.
    Infer(InferArgs),
    /// Estimate the number of categories in the unlabeled rows.
    EstimateK(EstimateKArgs),
    /// Run ablation arms over several seeds.
    Ablate(AblateArgs),
    /// Dump trained encoder features as an embeddings file.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().num_categories)]
    categories: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().points_per_category)]
    points: usize,
    /// Minimum distance between category means, in standard deviations.
    #[arg(long, default_value_t = SyntheticConfig::default().center_separation)]
    separation: f64,
    #[arg(long, default_value_t = SyntheticConfig::default().within_std)]
    std: f64,
    /// Side of the mean-placement cube, in units of separation × std.
    #[arg(long, default_value_t = SyntheticConfig::default().placement_side)]
    placement_side: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    labeled_fraction: f64,
    #[arg(long, default_value_t = 0.75)]
    known_ratio: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Args)]
struct DiscoverArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// Training log, one JSON object per epoch.
    #[arg(long)]
    out_log: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<InferenceMode>,
    /// Number of categories to discover, overriding the dataset header.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    ablation: AblationFlags,
}

#[derive(Args)]
struct AblationFlags {
    #[arg(long)]
    disable_cbm: bool,
    #[arg(long)]
    disable_ccm: bool,
    #[arg(long)]
    disable_weighting: bool,
    #[arg(long)]
    disable_logit_adjustment: bool,
    #[arg(long)]
    disable_contrastive: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "classifier")]
    mode: InferenceMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "classifier")]
    mode: InferenceMode,
    /// Rows to predict: test, unlabeled, labeled or all.
    #[arg(long, default_value = "test")]
    rows: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (`id,prediction`); stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateKArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k_max: usize,
    #[arg(long, default_value_t = 0.9)]
    drop_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated arms: full, no-cbm, no-ccm, no-weighting, no-la, no-cont.
    #[arg(long, default_value = "full,no-cbm,no-ccm,no-weighting,no-la,no-cont")]
    arms: String,
    /// Seed list such as `0-4` or `1,3,7`.
    #[arg(long, default_value = "0-4")]
    seeds: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<InferenceMode, String> {
    s.parse().map_err(|e: sdc_core::SdcError| e.to_string())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
                if a > b {
                    bail!("empty seed range {part}");
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse()?),
        }
    }
    if out.is_empty() {
        bail!("no seeds given");
    }
    Ok(out)
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    load_dataset(path, DatasetFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_trainable(path: &Path) -> Result<TrainableModel> {
    match load_checkpoint(path).with_context(|| format!("reading {}", path.display()))? {
        Checkpoint::Trainable(m) => Ok(m),
        Checkpoint::Biased(_) => bail!("{} holds a biased model; expected a trained one", path.display()),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let ds = generate_synthetic(&SyntheticConfig {
        num_categories: a.categories,
        dim: a.dim,
        points_per_category: a.points,
        center_separation: a.separation,
        within_std: a.std,
        placement_side: a.placement_side,
        seed: a.seed,
    })?;
    save_dataset(&ds, &a.out, DatasetFormat::from_path(&a.out))?;
    eprintln!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let raw = load(&a.data)?;
    let out = split_dataset(&raw, a.labeled_fraction, a.known_ratio, a.test_fraction, a.seed)?;
    save_dataset(&out.dataset, &a.out, DatasetFormat::from_path(&a.out))?;
    let space = out.dataset.label_space();
    let count = |t| out.dataset.indices(t).len();
    println!(
        "known {} novel {} labeled {} unlabeled {} test {}",
        space.num_known,
        space.num_novel,
        count(SplitTag::Labeled),
        count(SplitTag::Unlabeled),
        count(SplitTag::Test)
    );
    println!(
        "category map (new <- original): {}",
        out.original_category
            .iter()
            .enumerate()
            .map(|(i, o)| format!("{i}<-{o}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = load(&a.data)?;
    let biased = pretrain_biased(&data, &cfg.pretrain_config())?;
    let rows = data.indices(SplitTag::Labeled);
    let (_, logits) = biased.forward(&data.features().select_rows(&rows))?;
    let labels = data.labels_at(&rows)?;
    let hits = logits
        .row_iter()
        .zip(&labels)
        .filter(|(r, &y)| sdc_core::numerics::argmax(r) == y)
        .count();
    println!("labeled accuracy {:.2}", 100.0 * hits as f64 / rows.len() as f64);

    let unl = data.indices(SplitTag::Unlabeled);
    if let Ok(gts) = data.labels_at(&unl) {
        let (_, lu) = biased.forward(&data.features().select_rows(&unl))?;
        let ent = lu
            .row_iter()
            .map(|r| softmax(r).and_then(|p| entropy(&p)))
            .collect::<sdc_core::Result<Vec<_>>>()?;
        if let Ok(s) = entropy_summary(&ent, &gts, data.label_space()) {
            println!(
                "unlabeled entropy  known {:.3} ± {:.3}  novel {:.3} ± {:.3}  gap {:.3}",
                s.mean_known, s.std_known, s.mean_novel, s.std_novel, s.gap
            );
        }
    }
    save_checkpoint(&Checkpoint::Biased(biased), &a.out_model)?;
    Ok(())
}

fn discover(a: DiscoverArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if a.k.is_some() {
        cfg.k_override = a.k;
    }
    let f = &a.ablation;
    cfg.disable_cbm |= f.disable_cbm;
    cfg.disable_ccm |= f.disable_ccm;
    cfg.disable_weighting |= f.disable_weighting;
    cfg.disable_logit_adjustment |= f.disable_logit_adjustment;
    cfg.disable_contrastive |= f.disable_contrastive;

    let data = load(&a.data)?;
    let out = run_discovery(&data, &cfg)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.out_log {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for line in &out.log {
            writeln!(w, "{}", line.to_json())?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.out_model {
        save_checkpoint(&Checkpoint::Trainable(out.model.clone()), path)?;
    }
    println!("{}", out.report.to_json());
    eprintln!("{}", out.report);
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let data = load(&a.data)?;
    let model = load_trainable(&a.model)?;
    let report = evaluate(&model, &data, a.mode, a.seed)?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        println!("{report}");
    }
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let data = load(&a.data)?;
    let model = load_trainable(&a.model)?;
    let rows: Vec<usize> = match a.rows.as_str() {
        "test" => data.indices(SplitTag::Test),
        "unlabeled" => data.indices(SplitTag::Unlabeled),
        "labeled" => data.indices(SplitTag::Labeled),
        "all" => (0..data.len()).collect(),
        other => bail!("unknown row selection {other:?}"),
    };
    if rows.is_empty() {
        bail!("no rows selected");
    }
    let preds = infer(
        &model,
        &data.features().select_rows(&rows),
        a.mode,
        model.num_classes(),
        a.seed,
    )?;
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(w, "id,prediction")?;
    for (&r, p) in rows.iter().zip(preds) {
        writeln!(w, "{},{p}", data.ids()[r])?;
    }
    w.flush()?;
    Ok(())
}

fn estimate_k_cmd(a: EstimateKArgs) -> Result<()> {
    let data = load(&a.data)?;
    let mut rows = data.indices(SplitTag::Unlabeled);
    if rows.is_empty() {
        rows = (0..data.len()).collect();
    }
    let est = estimate_k_detailed(&data.features().select_rows(&rows), a.k_max, a.drop_ratio, a.seed)?;
    println!("{}", est.estimate);
    eprintln!("kept groups {:?} (threshold {:.1})", est.group_sizes, est.threshold);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let arms = a
        .arms
        .split(',')
        .map(|s| s.trim().parse::<Arm>())
        .collect::<sdc_core::Result<Vec<_>>>()?;
    let seeds = parse_seeds(&a.seeds)?;
    let threads = match std::env::var("SDC_THREADS") {
        Ok(v) => v.parse().context("SDC_THREADS must be a positive integer")?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let data = load(&a.data)?;
    let rows = run_ablation(&data, &cfg, &arms, &seeds, threads)?;
    if a.json {
        for r in &rows {
            println!(
                "{{\"arm\":\"{}\",\"seed\":{},\"report\":{}}}",
                r.arm.name(),
                r.seed,
                r.report.to_json()
            );
        }
        return Ok(());
    }
    println!(
        "{:<14} {:>6} {:>8} {:>8} {:>8}",
        "arm", "seed", "h-score", "known", "novel"
    );
    for r in &rows {
        println!(
            "{:<14} {:>6} {:>8.2} {:>8.2} {:>8.2}",
            r.arm.name(),
            r.seed,
            r.report.h_score,
            r.report.acc_known,
            r.report.acc_novel
        );
    }
    for arm in &arms {
        let sel: Vec<_> = rows.iter().filter(|r| r.arm == *arm).collect();
        let mean =
            |f: fn(&sdc_core::MetricsReport) -> f64| sel.iter().map(|r| f(&r.report)).sum::<f64>() / sel.len() as f64;
        println!(
            "{:<14} {:>6} {:>8.2} {:>8.2} {:>8.2}",
            arm.name(),
            "mean",
            mean(|r| r.h_score),
            mean(|r| r.acc_known),
            mean(|r| r.acc_novel)
        );
    }
    Ok(())
}

fn export_features(a: ExportArgs) -> Result<()> {
    let data = load(&a.data)?;
    let model = load_trainable(&a.model)?;
    let (features, _) = model.network.infer(data.features())?;
    let out = EmbeddingDataset::new(
        data.ids().to_vec(),
        features,
        data.labels().to_vec(),
        data.splits().to_vec(),
        data.label_space(),
    )?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_csv(&out, &mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Discover(a) => discover(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::EstimateK(a) => estimate_k_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportFeatures(a) => export_features(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
