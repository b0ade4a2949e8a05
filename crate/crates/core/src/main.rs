use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use daiam_core::checkpoint::Checkpoint;
use daiam_core::config::{train_pairs, RunConfig, PRESETS};
use daiam_core::dataset::{load_clean_dir, procedural_cleans, read_dataset, Dataset, Split};
use daiam_core::eval::{ablation_run, evaluate, Identity, ABLATION_ORDER};
use daiam_core::image::{Image, Mask};
use daiam_core::model::{Model, Variant};
use daiam_core::raingen::SamplePair;
use daiam_core::tensor::{Scalar, Tensor};
use daiam_core::train::{train_loop, training_psnr, TrainConfig, Trainer};
use daiam_core::verify::run_suite;
use daiam_core::{Error, Result};

/// Rain removal with dual attention-in-attention models.
#[derive(Parser)]
#[command(name = "daiam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired streak+drop dataset from clean images.
    Synth(SynthArgs),
    /// Train a model; writes metrics.tsv, checkpoints and config.toml.
    Train(TrainArgs),
    /// Derain a directory of PNGs with a trained checkpoint.
    Derain(DerainArgs),
    /// Score a checkpoint on a dataset (PSNR, SSIM, Params, Time).
    Eval(EvalArgs),
    /// Train several variants over several seeds and compare them.
    Ablate(AblateArgs),
    /// Run the gradient checks and invariant suite.
    Verify,
}

/// Configuration sources, lowest precedence first: defaults, --preset,
/// --config, --set, then the command's dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    /// Start from a named preset.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// TOML file with [model], [train], [synth], [data] and [ablate] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr_start=5e-4. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(p) => RunConfig::preset(p)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            let file = RunConfig::load(path)?;
            cfg = if self.preset.is_some() { merge(cfg, path)? } else { file };
        }
        for s in &self.set {
            cfg.set(s)?;
        }
        Ok(cfg)
    }
}

/// Overlay the keys present in a config file onto `base`.
fn merge(base: RunConfig, path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let overlay: toml::Table = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut cfg = base;
    for (section, table) in overlay {
        let table = table
            .as_table()
            .ok_or_else(|| Error::config(format!("{}: `{section}` is not a table", path.display())))?;
        for (key, value) in table {
            cfg.set(&format!("{section}.{key}={value}"))?;
        }
    }
    Ok(cfg)
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean PNGs.
    #[arg(long, conflicts_with = "procedural", required_unless_present = "procedural")]
    source: Option<PathBuf>,
    /// Use this many procedural scenes instead of --source.
    #[arg(long)]
    procedural: Option<usize>,
    /// Side of procedural scenes.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// dam_zero, dam_odd, dam_dual, daiam, daiam_stack or ddaiam(T).
    #[arg(long)]
    variant: Option<Variant>,
    /// Dataset directory; overrides data.dir.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train in double precision.
    #[arg(long)]
    fp64: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DerainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write S+ (heavy) and S- (light) attention maps per branch.
    #[arg(long)]
    export_attention: bool,
    /// Also write per-stage outputs and differential maps.
    #[arg(long)]
    export_stages: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by `daiam synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Write records.tsv and the summary here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants; overrides ablate.variants.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Comma-separated seeds; overrides ablate.seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Derain(a) => derain(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Verify => verify(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn synth(a: SynthArgs) -> Result<bool> {
    let mut cfg = a.config.resolve()?;
    if let Some(seed) = a.seed {
        cfg.synth.seed = seed;
    }
    let cleans = match (&a.source, a.procedural) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(Error::config(format!(
                    "source directory {} does not exist",
                    dir.display()
                )));
            }
            load_clean_dir(dir)?
        }
        (None, Some(n)) => procedural_cleans(n, a.size, a.size, cfg.synth.seed),
        (None, None) => unreachable!("clap requires one source"),
    };
    if cleans.is_empty() {
        return Err(Error::config("no clean PNGs found"));
    }
    let ds = cfg.synth.synthesize(&cleans)?;
    ds.write(&a.out)?;
    cfg.data.dir = Some(a.out.clone());
    cfg.write_resolved(&a.out)?;
    println!("{}", synth_summary(&ds));
    Ok(true)
}

fn synth_summary(ds: &Dataset) -> String {
    let mut hist: BTreeMap<String, usize> = BTreeMap::new();
    for m in &ds.manifest {
        *hist.entry(format!("{:.3}", m.streak_intensity)).or_default() += 1;
    }
    let test = ds.manifest.iter().filter(|m| m.split == Split::Test).count();
    let mut s = format!(
        "{} pairs ({} train, {} test)\nstreak intensity histogram:",
        ds.len(),
        ds.len() - test,
        test
    );
    for (level, n) in hist {
        s.push_str(&format!("\n  {level}  {n:>5} {}", "#".repeat(n.min(60))));
    }
    s
}

fn train(a: TrainArgs) -> Result<bool> {
    let mut cfg = a.config.resolve()?;
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(n) = a.max_iters {
        cfg.train.max_iters = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.fp64 |= a.fp64;
    let pairs = train_pairs(&cfg.dataset()?);
    let fp64 = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::<f64>::load(path)?;
            let state = ck
                .train
                .ok_or_else(|| Error::Checkpoint(format!("{} has no training state", path.display())))?;
            cfg.model = ck.model.config().clone();
            cfg.train = TrainConfig {
                max_iters: a.max_iters.unwrap_or(state.config.max_iters),
                ..state.config
            };
            cfg.train.fp64
        }
        None => {
            cfg.validate()?;
            cfg.train.fp64
        }
    };
    cfg.write_resolved(&a.out)?;
    if fp64 {
        run_training::<f64>(&cfg, &a, pairs)
    } else {
        run_training::<f32>(&cfg, &a, pairs)
    }
}

fn run_training<T: Scalar>(cfg: &RunConfig, a: &TrainArgs, pairs: Vec<SamplePair>) -> Result<bool> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::<T>::resume(Checkpoint::load(path)?, pairs)?;
            t.cfg.max_iters = cfg.train.max_iters;
            t
        }
        None => Trainer::<T>::new(cfg.train.clone(), &cfg.model, pairs)?,
    };
    log::info!(
        "training {} ({} params) on {} pairs from iteration {} to {}",
        trainer.model.variant(),
        trainer.model.param_count(),
        trainer.pairs().count(),
        trainer.iteration,
        trainer.cfg.max_iters
    );
    let start = Instant::now();
    let outcome = train_loop(&mut trainer, &a.out)?;
    let psnr = training_psnr(&trainer.model, trainer.pairs())?;
    if let Some(last) = &outcome.last {
        println!("final loss {:.6} at iteration {}", last.loss.total, last.iteration);
    }
    println!("training PSNR {psnr:.2} dB");
    println!("checkpoint {}", outcome.final_checkpoint.display());
    println!("log {}", outcome.log.display());
    log::info!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(true)
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let listing = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut paths: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

fn derain(a: DerainArgs) -> Result<bool> {
    let model = Checkpoint::<f32>::load(&a.checkpoint)?.model;
    let inputs = png_inputs(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::config(format!("no PNG files in {}", a.input.display())));
    }
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let mut failed = 0;
    for path in &inputs {
        if let Err(e) = derain_one(&model, path, &a) {
            log::error!("{}: {e}", path.display());
            failed += 1;
        }
    }
    println!("{} of {} images derained", inputs.len() - failed, inputs.len());
    Ok(failed == 0)
}

fn save_map<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    Mask::from_image(&Image::from_tensor(t, 0)?.clamped())?.save_png(path)
}

fn derain_one(model: &Model<f32>, path: &Path, a: &DerainArgs) -> Result<()> {
    let img = Image::load_png(path)?;
    let pred = model.forward(&img.to_tensor())?;
    let name = path.file_name().expect("listed files have names");
    Image::from_tensor(pred.output(), 0)?
        .clamped()
        .save_png(&a.output.join(name))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
    let multi = pred.stages.len() > 1;
    if a.export_attention {
        for (t, stage) in pred.stages.iter().enumerate() {
            let names: &[&str] = if stage.branches.len() == 2 {
                &["streak", "drop"]
            } else {
                &["dam"]
            };
            for (b, branch) in stage.branches.iter().enumerate() {
                let Some(attn) = &branch.attn else { continue };
                let tag = if multi { format!("_s{t}") } else { String::new() };
                save_map(
                    &attn.s_plus,
                    &a.output.join(format!("{stem}{tag}_{}_heavy.png", names[b])),
                )?;
                save_map(
                    &attn.s_minus,
                    &a.output.join(format!("{stem}{tag}_{}_light.png", names[b])),
                )?;
            }
        }
    }
    if a.export_stages {
        for (t, out) in pred.trace.outputs.iter().enumerate() {
            Image::from_tensor(out, 0)?
                .clamped()
                .save_png(&a.output.join(format!("{stem}_stage{t}.png")))?;
        }
        for (t, (ma, mb)) in pred.trace.maps.iter().enumerate() {
            save_map(ma, &a.output.join(format!("{stem}_A{}.png", t + 1)))?;
            save_map(mb, &a.output.join(format!("{stem}_B{}.png", t + 1)))?;
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<bool> {
    let model = Checkpoint::<f32>::load(&a.checkpoint)?.model;
    let ds = read_dataset(&a.data)?;
    let pairs = match a.split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Test => ds.split(Split::Test),
        SplitArg::All => ds.pairs.iter().collect(),
    };
    if pairs.is_empty() {
        return Err(Error::config(format!(
            "{} has no pairs in the requested split",
            a.data.display()
        )));
    }
    let report = evaluate(&model, &pairs)?;
    let baseline = evaluate(&Identity, &pairs)?;
    let mut summary = report.table();
    summary.push_str(baseline.table().lines().nth(1).unwrap_or_default());
    summary.push('\n');
    print!("{summary}\n{}", report.records_tsv());
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("records.tsv");
        fs::write(&p, report.records_tsv()).map_err(|e| Error::io(&p, e))?;
        let p = out.join("summary.txt");
        fs::write(&p, &summary).map_err(|e| Error::io(&p, e))?;
    }
    Ok(true)
}

fn ablate(a: AblateArgs) -> Result<bool> {
    let mut cfg = a.config.resolve()?;
    if !a.variants.is_empty() {
        cfg.ablate.variants = a.variants.clone();
    }
    if !a.seeds.is_empty() {
        cfg.ablate.seeds = a.seeds.clone();
    }
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(n) = a.max_iters {
        cfg.train.max_iters = n;
    }
    cfg.validate()?;
    cfg.write_resolved(&a.out)?;
    let ds = cfg.dataset()?;
    let train = train_pairs(&ds);
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(Error::config(
            "ablation needs a test split (set synth.test_fraction > 0)",
        ));
    }
    log::info!("ablation on {} train / {} test pairs", train.len(), test.len());
    let report = ablation_run(
        &cfg.ablate.variants,
        &cfg.ablate.seeds,
        &cfg.model,
        &cfg.train,
        &train,
        &test,
        |v, seed, r| log::info!("{v} seed {seed}: {:.2} dB / {:.4}", r.psnr, r.ssim),
    )?;
    let mut text = report.table();
    for (weaker, stronger) in ABLATION_ORDER {
        if let Some(d) = report.direction(weaker, stronger, cfg.ablate.tolerance_db) {
            text.push_str(&format!(
                "{weaker} <= {stronger}: median gap {:+.2} dB, large inversions {:?} -> {}\n",
                d.median_gap,
                d.large_inversions,
                if d.holds { "holds" } else { "violated" }
            ));
        }
    }
    print!("{text}");
    let path = a.out.join("ablation.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(true)
}

fn verify() -> Result<bool> {
    let mut ok = true;
    for c in run_suite() {
        println!(
            "[{}] {} ({:.1}s): {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
        ok &= c.passed;
    }
    Ok(ok)
}
