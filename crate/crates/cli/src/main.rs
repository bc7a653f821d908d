use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusedet::config::RunConfig;
use fusedet::data::{
    dataset_stats, format_detections, format_synth_log, parse_annotations, parse_detections, read_dataset, read_manifest,
    synth_generate, tile_scene, write_dataset, ManifestEntry, Modalities,
};
use fusedet::detector::{
    format_ablation_csv, gradient_suite, infer_all, init_model, load_model, load_splits, mean_ap, prepare_samples, run_ablation,
    save_model, train, AblationConfig, Variant, GRAD_TOLERANCE,
};
use fusedet::eval::{average_precision, emit_pr_csv, ApOptions, EvalImage};
use fusedet::Error;

#[derive(Parser)]
#[command(name = "fusedet", version, about = "RGB + height-map oriented vehicle detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; missing sections take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one value, e.g. `--set detector.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        occluder_prob: Option<f64>,
        /// Scene id prefix.
        #[arg(long, default_value = "scene")]
        prefix: String,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Cut every scene of a dataset into overlapping tiles.
    Tile {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile_size: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Instance counts, density and area histogram of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        bin_width: f64,
    },
    /// Train a detector; writes model.ckpt, train_log.csv and config.toml.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Detect vehicles with a trained model; one label file per scene.
    Infer {
        /// Training output directory (model.ckpt + config.toml).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        conf_threshold: Option<f64>,
        #[arg(long)]
        nms_threshold: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// AP at IoU 0.5 of a detections directory against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Precision-recall CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the rgb_only, h_only and multimodal variants.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks of the loss, fusion and model kernels.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Numerical { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn resolve(args: &ConfigArgs, base: Option<RunConfig>, extra: &[String]) -> Result<RunConfig, Failure> {
    let mut cfg = match (&args.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(&args.sets)?;
    cfg.apply_overrides(extra)?;
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare_out(dir: &Path, force: bool) -> CmdResult {
    if dir.is_dir() && !force && fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some() {
        return Err(Failure::Usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Human log: resolved config followed by the command's summary lines.
fn write_run_log(dir: &Path, cfg: Option<&RunConfig>, summary: &str) -> CmdResult {
    let mut s = String::new();
    if let Some(c) = cfg {
        writeln!(s, "# resolved config\n{}", c.to_toml()).unwrap();
    }
    s.push_str(summary);
    write(&dir.join("run.log"), s)
}

fn cmd_synth(
    out: &Path,
    scenes: usize,
    seed: Option<u64>,
    occluder_prob: Option<f64>,
    prefix: &str,
    force: bool,
    args: &ConfigArgs,
) -> CmdResult {
    let mut extra = Vec::new();
    if let Some(s) = seed {
        extra.push(format!("synth.seed={s}"));
    }
    if let Some(p) = occluder_prob {
        extra.push(format!("synth.occluder_prob={p}"));
    }
    let cfg = resolve(args, None, &extra)?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    prepare_out(out, force)?;
    let (samples, records) = synth_generate(&cfg.synth, scenes, prefix)?;
    let entries: Vec<ManifestEntry> = samples.iter().map(ManifestEntry::whole).collect();
    write_dataset(out, &samples, &entries)?;
    write(&out.join("synth_log.csv"), format_synth_log(&records))?;
    let stats = dataset_stats(&samples, 25.0);
    print!("{}", stats.summary_csv());
    Ok(())
}

fn cmd_tile(data: &Path, out: &Path, size: Option<usize>, overlap: Option<usize>, force: bool, args: &ConfigArgs) -> CmdResult {
    let mut extra = Vec::new();
    if let Some(s) = size {
        extra.push(format!("tile.tile_size={s}"));
    }
    if let Some(o) = overlap {
        extra.push(format!("tile.overlap={o}"));
    }
    let cfg = resolve(args, None, &extra)?;
    prepare_out(out, force)?;
    let mut tiles = Vec::new();
    let mut entries = Vec::new();
    for e in read_manifest(data)? {
        let scene = fusedet::data::read_scene(data, &e.id)?;
        let (t, m) = tile_scene(&scene, &cfg.tile)?;
        tiles.extend(t);
        entries.extend(m);
    }
    write_dataset(out, &tiles, &entries)?;
    let summary = format!("{} tiles from {}\n", tiles.len(), data.display());
    print!("{summary}");
    write_run_log(out, Some(&cfg), &summary)
}

fn cmd_stats(data: &Path, out: &Path, bin_width: f64) -> CmdResult {
    let samples = read_dataset(data, Modalities::BOTH)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let stats = dataset_stats(&samples, bin_width);
    write(&out.join("summary.csv"), stats.summary_csv())?;
    write(&out.join("area_hist.csv"), stats.area_csv())?;
    write(&out.join("density.csv"), stats.density_csv())?;
    print!("{}", stats.summary_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    val: Option<&Path>,
    out: &Path,
    variant: Option<Variant>,
    epochs: Option<usize>,
    seed: Option<u64>,
    args: &ConfigArgs,
) -> CmdResult {
    let mut extra = Vec::new();
    if let Some(v) = variant {
        extra.push(format!("detector.variant=\"{}\"", v.name()));
    }
    if let Some(e) = epochs {
        extra.push(format!("detector.max_epochs={e}"));
    }
    if let Some(s) = seed {
        extra.push(format!("detector.seed={s}"));
    }
    let cfg = resolve(args, None, &extra)?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    let v = cfg.detector.variant;
    let which = Modalities {
        rgb: v.uses_rgb(),
        height: v.uses_height(),
    };
    let train_set = prepare_samples(&read_dataset(data, which)?, &cfg.enhance, v)?;
    let val_set = match val {
        Some(p) => prepare_samples(&read_dataset(p, which)?, &cfg.enhance, v)?,
        None => Vec::new(),
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let mut model = init_model(&cfg.detector, &cfg.fusion, &cfg.enhance)?;
    let report = train(&mut model, &train_set, &val_set, &cfg.detector, &cfg.loss, |_| {})?;
    write(&out.join("train_log.csv"), report.to_csv())?;
    save_model(&model, &out.join("model.ckpt"))?;
    let last = report.epochs.last();
    let summary = format!(
        "trained {} for {} epochs ({} steps); final loss {:.6}, val AP50 {}\n",
        v.name(),
        report.epochs.len(),
        report.steps,
        last.map_or(f64::NAN, |e| e.loss_total),
        last.map_or("nan".into(), |e| format!("{:.4}", e.val_ap)),
    );
    print!("{summary}");
    write_run_log(out, Some(&cfg), &summary)
}

fn cmd_infer(model_dir: &Path, data: &Path, out: &Path, conf: Option<f64>, nms: Option<f64>, args: &ConfigArgs) -> CmdResult {
    let saved = RunConfig::load(&model_dir.join("config.toml"))?;
    let mut extra = Vec::new();
    if let Some(c) = conf {
        extra.push(format!("detector.conf_threshold={c}"));
    }
    if let Some(n) = nms {
        extra.push(format!("detector.nms_threshold={n}"));
    }
    let cfg = resolve(args, Some(saved), &extra)?;
    let model = load_model(&model_dir.join("model.ckpt"), &cfg.detector, &cfg.fusion, &cfg.enhance)?;
    let v = cfg.detector.variant;
    let scenes = read_dataset(
        data,
        Modalities {
            rgb: v.uses_rgb(),
            height: v.uses_height(),
        },
    )?;
    let samples = prepare_samples(&scenes, &cfg.enhance, v)?;
    let dets = infer_all(&model, &samples, &cfg.detector)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut total = 0;
    for (s, d) in samples.iter().zip(&dets) {
        total += d.len();
        write(&out.join(format!("{}.txt", s.id)), format_detections(d))?;
    }
    let summary = format!("{total} detections over {} scenes\n", samples.len());
    print!("{summary}");
    write_run_log(out, Some(&cfg), &summary)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn cmd_eval(data: &Path, det_dir: &Path, out: &Path) -> CmdResult {
    let mut images = Vec::new();
    for e in read_manifest(data)? {
        let gt_path = data.join("labels").join(format!("{}.txt", e.id));
        let det_path = det_dir.join(format!("{}.txt", e.id));
        let detections = if det_path.exists() {
            parse_detections(&read_text(&det_path)?, &det_path)?
        } else {
            Vec::new()
        };
        images.push(EvalImage {
            detections,
            ground_truth: parse_annotations(&read_text(&gt_path)?, &gt_path)?,
        });
    }
    let (ap, curve) = average_precision(&images, ApOptions::default());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    emit_pr_csv(&curve, out)?;
    println!("AP0.5 {ap:.6}");
    Ok(())
}

fn cmd_ablate(train_dir: &Path, test_dir: &Path, out: &Path, seeds: Vec<u64>, epochs: Option<usize>, args: &ConfigArgs) -> CmdResult {
    let extra: Vec<String> = epochs.map(|e| format!("detector.max_epochs={e}")).into_iter().collect();
    let cfg = resolve(args, None, &extra)?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let acfg = AblationConfig {
        detector: cfg.detector.clone(),
        fusion: cfg.fusion.clone(),
        enhance: cfg.enhance.clone(),
        loss: cfg.loss.clone(),
        seeds,
    };
    let rows = run_ablation(&acfg, |v| load_splits(train_dir, test_dir, v), |r| {
        println!("{} seed {}: AP50 {:.4}", r.variant.name(), r.seed, r.ap50)
    })?;
    write(&out.join("ablation.csv"), format_ablation_csv(&rows))?;
    let mut summary = String::new();
    for (v, ap) in mean_ap(&rows) {
        writeln!(summary, "mean AP50 {:<10} {ap:.4}", v.name()).unwrap();
    }
    print!("{summary}");
    write_run_log(out, Some(&cfg), &summary)
}

fn cmd_gradcheck(seed: u64) -> CmdResult {
    let reports = gradient_suite(seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} max rel error {:.3e}  {verdict}", r.op, r.max_rel_error);
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient error above {GRAD_TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.cmd {
        Command::Synth {
            out,
            scenes,
            seed,
            occluder_prob,
            prefix,
            force,
            cfg,
        } => cmd_synth(&out, scenes, seed, occluder_prob, &prefix, force, &cfg),
        Command::Tile {
            data,
            out,
            tile_size,
            overlap,
            force,
            cfg,
        } => cmd_tile(&data, &out, tile_size, overlap, force, &cfg),
        Command::Stats { data, out, bin_width } => cmd_stats(&data, &out, bin_width),
        Command::Train {
            data,
            val,
            out,
            variant,
            epochs,
            seed,
            cfg,
        } => cmd_train(&data, val.as_deref(), &out, variant, epochs, seed, &cfg),
        Command::Infer {
            model,
            data,
            out,
            conf_threshold,
            nms_threshold,
            cfg,
        } => cmd_infer(&model, &data, &out, conf_threshold, nms_threshold, &cfg),
        Command::Eval { data, detections, out } => cmd_eval(&data, &detections, &out),
        Command::Ablate {
            train,
            test,
            out,
            seeds,
            epochs,
            cfg,
        } => cmd_ablate(&train, &test, &out, seeds, epochs, &cfg),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("FUSEDET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
