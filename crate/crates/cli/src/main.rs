//! `comp`: synthesize data, train, evaluate, sweep missing rates, run the
//! ablation grid, export embeddings and render reports.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use comp_core::checkpoint;
use comp_core::data::{read_dataset, synthesize, write_dataset, ModalitySynth, SyntheticSpec, Task};
use comp_core::evaluation::plot::{plot_coordinator_weights, plot_modality_curves};
use comp_core::evaluation::report::{read_reports, write_reports};
use comp_core::evaluation::{ablation_grid, evaluate, export_embeddings, mr_sweep, sweep_mask, Embedding};
use comp_core::training::{accuracies, set_determinism, train_stage1, train_stage2, Observers, PreparedData};
use comp_core::{Ablation, CompError, CompModel, Config, Dataset, MissingMask, Modality, Stage};

#[derive(Parser, Debug)]
#[command(name = "comp", version, about = "Cross-modal prompting under missing modalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic three-modality dataset directory.
    Synth(SynthArgs),
    /// Train stage one, stage two, or both.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of missing rates and seeds.
    Sweep(SweepArgs),
    /// Run the component ablation rows at one missing rate.
    Ablate(AblateArgs),
    /// Write Z, Z_bar or F embeddings of every sample.
    Export(ExportArgs),
    /// Rebuild tables and plots from saved run reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthShape {
    /// Samples to generate.
    #[arg(long, default_value_t = 600)]
    n: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Per-modality signal-to-noise ratios, e.g. `a=4,t=1,v=0.25`.
    #[arg(long, default_value = "a=4,t=1,v=0.25")]
    snr: String,
    /// Per-modality feature widths, e.g. `a=24,t=24,v=24`.
    #[arg(long, default_value = "a=24,t=24,v=24")]
    dims: String,
    /// Generate regression scores instead of classes.
    #[arg(long)]
    regression: bool,
    /// Seed of the generator.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    shape: SynthShape,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Components to disable: any of kp,pg,cr,gm.
    #[arg(long)]
    off: Option<String>,
    /// Run seed (falls back to the config file, then COMP_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage-one checkpoint to start stage two from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the mask stored with the dataset instead of drawing one.
    #[arg(long)]
    data_mask: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data_mask: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory; a synthetic set is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    shape: SynthShape,
    /// Missing rates as `start:stop:step` or a comma list.
    #[arg(long, default_value = "0.1:0.7:0.1")]
    mr: String,
    /// Seed count, or a comma list of seeds.
    #[arg(long, default_value = "1")]
    seeds: String,
    /// Runs in flight at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    shape: SynthShape,
    /// Missing rate shared by every row.
    #[arg(long)]
    mr: Option<f64>,
    #[arg(long, default_value = "1")]
    seeds: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Z, Z_bar or F.
    #[arg(long, default_value = "F")]
    which: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data_mask: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding run reports (or their `runs/` folder).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also draw accuracy curves and coordinator-weight bars.
    #[arg(long)]
    plots: bool,
}

type Result<T> = std::result::Result<T, CompError>;

fn io_err(path: &Path, e: std::io::Error) -> CompError {
    CompError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Parse `a=4,t=1,v=0.25` into one value per modality.
fn per_modality(spec: &str, what: &str) -> Result<[f64; 3]> {
    let mut out = [f64::NAN; 3];
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CompError::Validation(format!("{what}: `{part}` is not modality=value")))?;
        let m = Modality::parse(k.trim())?;
        out[m.index()] = v
            .trim()
            .parse()
            .map_err(|_| CompError::Validation(format!("{what}: `{v}` is not a number")))?;
    }
    if let Some(m) = Modality::ALL.iter().find(|m| out[m.index()].is_nan()) {
        return Err(CompError::Validation(format!("{what}: no value for modality {m}")));
    }
    Ok(out)
}

fn synth_spec(shape: &SynthShape) -> Result<SyntheticSpec> {
    let snr = per_modality(&shape.snr, "--snr")?;
    let dims = per_modality(&shape.dims, "--dims")?;
    let spec = SyntheticSpec {
        n_samples: shape.n,
        num_classes: shape.classes,
        latent_dim: SyntheticSpec::default().latent_dim.max(shape.classes),
        task: if shape.regression { Task::Regression } else { Task::Classification },
        modalities: Modality::ALL
            .iter()
            .map(|&m| {
                let dim = dims[m.index()];
                if dim < 1.0 || dim.fract() != 0.0 {
                    return Err(CompError::Validation(format!("--dims: width for {m} must be a positive integer")));
                }
                Ok(ModalitySynth {
                    modality: m,
                    feature_dim: dim as usize,
                    snr: snr[m.index()],
                })
            })
            .collect::<Result<_>>()?,
        seed: shape.data_seed,
        ..SyntheticSpec::default()
    };
    spec.validate()?;
    Ok(spec)
}

/// File config, then COMP_SEED when the file names no seed, then `--set`
/// overrides, then `--off`, then `--seed`.
fn resolve_config(args: &ConfigArgs) -> Result<Config> {
    let (mut cfg, file_has_seed) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let raw: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CompError::Config(format!("{}: {e}", path.display())))?;
            (Config::from_json_str(&text)?, raw.get("seed").is_some())
        }
        None => (Config::default(), false),
    };
    if !file_has_seed {
        if let Ok(v) = std::env::var("COMP_SEED") {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CompError::Config(format!("COMP_SEED `{v}` is not an unsigned integer")))?;
        }
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(list) = &args.off {
        cfg.ablation = cfg.ablation.with_off(list)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mr_list(s: &str) -> Result<Vec<f64>> {
    let bad = || CompError::Validation(format!("--mr `{s}`: expected start:stop:step or a comma list"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
    let list = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || b < a {
            return Err(bad());
        }
        let count = ((b - a) / step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9)
            .collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if list.is_empty() {
        return Err(bad());
    }
    Ok(list)
}

/// `N` means N consecutive seeds starting at `base`; a comma list is taken
/// as given.
fn parse_seeds(s: &str, base: u64) -> Result<Vec<u64>> {
    let bad = || CompError::Validation(format!("--seeds `{s}`: expected a count or a comma list"));
    if s.contains(',') {
        return s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = s.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    Ok((base..base + n).collect())
}

fn load_data(dir: &Path) -> Result<(Dataset, Option<MissingMask>)> {
    read_dataset(dir)
}

fn dataset_or_synthetic(data: &Option<PathBuf>, shape: &SynthShape) -> Result<Dataset> {
    match data {
        Some(dir) => Ok(load_data(dir)?.0),
        None => Ok(synthesize(&synth_spec(shape)?)?.dataset),
    }
}

fn choose_mask(dataset: &Dataset, stored: Option<MissingMask>, use_stored: bool, cfg: &Config) -> Result<MissingMask> {
    if use_stored {
        stored.ok_or_else(|| CompError::Validation("--data-mask given but the dataset has no mask file".into()))
    } else {
        sweep_mask(dataset, cfg.mr, cfg.seed)
    }
}

fn write_config(out: &Path, cfg: &Config) -> Result<()> {
    write_text(&out.join("config.json"), &cfg.to_json_pretty())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = synth_spec(&args.shape)?;
    let ds = synthesize(&spec)?.dataset;
    make_dir(&args.out)?;
    let manifest = write_dataset(&args.out, &ds, None)?;
    write_text(
        &args.out.join("synthetic_spec.json"),
        &serde_json::to_string_pretty(&spec).expect("spec serializes"),
    )?;
    println!("wrote {} samples of {} modalities to {}", manifest.n_samples, manifest.modalities.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let (dataset, stored) = load_data(&args.data)?;
    let mask = choose_mask(&dataset, stored, args.data_mask, &cfg)?;
    let data = PreparedData::new(&dataset, &mask, cfg.test_fraction, cfg.seed)?;
    make_dir(&args.out)?;
    write_config(&args.out, &cfg)?;
    write_text(&args.out.join("mask.txt"), &mask.to_text())?;

    let mut model = match (&args.checkpoint, args.stage) {
        (Some(path), StageArg::Two) => {
            let (mut model, header) = checkpoint::load(path)?;
            checkpoint::check_compatible(&header, &cfg, data.dims())?;
            model.config = cfg.clone();
            model
        }
        (Some(_), _) => {
            return Err(CompError::Validation("--checkpoint only applies to --stage 2".into()));
        }
        (None, StageArg::Two) => {
            return Err(CompError::Validation("--stage 2 needs a stage-one --checkpoint".into()));
        }
        (None, _) => CompModel::new(&cfg, data.dims(), dataset.labels.task(), dataset.labels.output_width(), cfg.seed)?,
    };

    let log_path = args.out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut rngs = set_determinism(cfg.seed);
    let mut curves = Vec::new();
    if args.stage != StageArg::Two {
        curves.extend(train_stage1(
            &mut model,
            &data,
            &mut rngs,
            Observers {
                log: Some(&mut log),
                trace: None,
            },
        )?);
        checkpoint::save(&args.out.join("stage1.ckpt"), &model, cfg.seed, Stage::One)?;
    }
    if args.stage != StageArg::One {
        let (stage1_acc, _) = accuracies(&model, &data, data.eval_rows(), Stage::One)?;
        curves.extend(train_stage2(
            &mut model,
            &data,
            &mut rngs,
            Observers {
                log: Some(&mut log),
                trace: None,
            },
        )?);
        checkpoint::save(&args.out.join("stage2.ckpt"), &model, cfg.seed, Stage::Two)?;
        let report = evaluate(&model, &data, &dataset, &mask, stage1_acc, curves)?;
        report.write_json(&args.out.join("report.json"))?;
        println!(
            "fused acc {:.4}  ua {:.4}  f1 {:.4}",
            report.metrics.acc, report.metrics.ua, report.metrics.f1
        );
    }
    std::io::Write::flush(&mut log).map_err(|e| io_err(&log_path, e))?;
    Ok(())
}

fn load_for_eval(checkpoint_path: &Path, data_dir: &Path, use_stored: bool) -> Result<(CompModel, Dataset, MissingMask, PreparedData)> {
    let (model, header) = checkpoint::load(checkpoint_path)?;
    if header.stage != Stage::Two {
        return Err(CompError::Validation("evaluation needs a stage-two checkpoint".into()));
    }
    let (dataset, stored) = load_data(data_dir)?;
    let cfg = model.config.clone();
    let mask = choose_mask(&dataset, stored, use_stored, &cfg)?;
    let data = PreparedData::new(&dataset, &mask, cfg.test_fraction, cfg.seed)?;
    checkpoint::check_compatible(&header, &cfg, data.dims())?;
    Ok((model, dataset, mask, data))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, dataset, mask, data) = load_for_eval(&args.checkpoint, &args.data, args.data_mask)?;
    make_dir(&args.out)?;
    write_config(&args.out, &model.config)?;
    let report = evaluate(&model, &data, &dataset, &mask, Default::default(), Vec::new())?;
    report.write_json(&args.out.join("report.json"))?;
    if let Some(w) = report.coordinator_weight_means {
        plot_coordinator_weights(w, &args.out.join("coordinator_weights.png"))?;
    }
    println!(
        "fused acc {:.4}  ua {:.4}  f1 {:.4}",
        report.metrics.acc, report.metrics.ua, report.metrics.f1
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let mrs = parse_mr_list(&args.mr)?;
    let seeds = parse_seeds(&args.seeds, cfg.seed)?;
    let dataset = dataset_or_synthetic(&args.data, &args.shape)?;
    for &mr in &mrs {
        sweep_mask(&dataset, mr, 0)?;
    }
    make_dir(&args.out)?;
    write_config(&args.out, &cfg)?;
    let reports = mr_sweep(&dataset, &cfg, &mrs, &seeds, args.jobs)?;
    write_reports(&args.out, &reports)?;
    println!("{} runs written to {}", reports.len(), args.out.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.cfg)?;
    if let Some(mr) = args.mr {
        cfg.mr = mr;
    }
    let seeds = parse_seeds(&args.seeds, cfg.seed)?;
    let dataset = dataset_or_synthetic(&args.data, &args.shape)?;
    sweep_mask(&dataset, cfg.mr, 0)?;
    make_dir(&args.out)?;
    write_config(&args.out, &cfg)?;
    let reports = ablation_grid(&dataset, &cfg, &Ablation::table_rows(), &seeds, args.jobs)?;
    write_reports(&args.out, &reports)?;
    println!("{} runs written to {}", reports.len(), args.out.display());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let which = Embedding::parse(&args.which)?;
    let (model, _, _, data) = load_for_eval(&args.checkpoint, &args.data, args.data_mask)?;
    make_dir(&args.out)?;
    let manifest = export_embeddings(&model, &data, which, &args.out)?;
    write_config(&args.out, &model.config)?;
    println!("exported {} for {} samples", which.name(), manifest.n_samples);
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let reports = read_reports(&args.input)?;
    if reports.is_empty() {
        return Err(CompError::Validation(format!("no run reports under {}", args.input.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| args.input.clone());
    make_dir(&out)?;
    write_reports(&out, &reports)?;
    if args.plots {
        let plots = out.join("plots");
        make_dir(&plots)?;
        for r in &reports {
            if !r.epoch_curves.is_empty() {
                plot_modality_curves(r, &plots.join(format!("{}_curves.png", r.file_stem())))?;
            }
            if let Some(w) = r.coordinator_weight_means {
                plot_coordinator_weights(w, &plots.join(format!("{}_weights.png", r.file_stem())))?;
            }
        }
    }
    println!("{} reports summarised in {}", reports.len(), out.display());
    Ok(())
}

/// 1 for bad input (arguments, configs, files, infeasible rates), 2 for
/// failures while running.
fn exit_code(e: &CompError) -> u8 {
    match e {
        CompError::Divergence(_) | CompError::Plot(_) | CompError::Csv(_) => 2,
        CompError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first}");
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Export(a) => cmd_export(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
