//! The `fusegrid` command line.
//!
//! Exit status: 0 on success, 1 for invalid arguments or configurations,
//! 2 when a file cannot be read, written or parsed.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fusegrid_core::analysis::{cost_report, CostReport};
use fusegrid_core::cv::{leaderboard, make_folds, ArmResult, Comparison, CvConfig, LeaderRow};
use fusegrid_core::metrics::{self, BinaryMetrics, EvalReport, DEFAULT_THRESHOLD};
use fusegrid_core::model::{enumerate_space, Architecture, BaseConfig, BranchInput, Fusion, Model, ModelSpec};
use fusegrid_core::preprocess::{prepare, PrepConfig};
use fusegrid_core::rng;
use fusegrid_core::synth::{generate, GenConfig};
use fusegrid_core::train::{score_samples, train_model, TrainConfig};

use crate::error::{Error, Result};
use crate::experiment::compare;
use crate::io::tables::{self, ManifestRow};
use crate::io::{checkpoint, ensure_dir, read_json, vol, write_json};
use crate::manifest::RunManifest;
use crate::runner::run_grid;

#[derive(Debug, Parser)]
#[command(
    name = "fusegrid",
    version,
    about = "Dual-branch 3D fusion classifiers: data, training, grid search, evaluation"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every stochastic step. Overrides the config file.
    #[arg(long, global = true, env = "FUSEGRID_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic image/mask pairs and a manifest CSV.
    GenData(GenArgs),
    /// Crop, resample and window volumes around their mask.
    Preprocess(PrepArgs),
    /// Train one model on a manifest.
    Train(TrainArgs),
    /// Cross-validate every (alpha, beta) fusion architecture.
    Search(SearchArgs),
    /// Metrics, ROC curve and score-level fusion from score CSVs.
    Eval(EvalArgs),
    /// Parameter and FLOP counts without building models.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// GenConfig JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub n_normal: Option<usize>,
    #[arg(long)]
    pub n_abnormal: Option<usize>,
    #[arg(long)]
    pub shape_signal: Option<f64>,
    #[arg(long)]
    pub texture_signal: Option<f64>,
    #[arg(long)]
    pub seg_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Single image volume (with --mask).
    #[arg(long, requires = "mask", conflicts_with = "manifest")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    pub mask: Option<PathBuf>,
    /// Manifest CSV; every case is processed.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// PrepConfig JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_side: Option<usize>,
    #[arg(long)]
    pub pad: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub hu_lo: Option<f32>,
    #[arg(long, allow_hyphen_values = true)]
    pub hu_hi: Option<f32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TrainRun JSON (base, train, arch).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mask, image, stacked, or a fusion such as FusionNet3* / 3mul.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Score these cases after training (writes scores.csv).
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// SearchRun JSON (base, cv).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Worker threads for (architecture, fold) jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Also run the mask-only and image-only baselines and their fusions.
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV (case_id, p, z).
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Second score CSV over the same cases (image model when --scores holds
    /// the mask model); adds naive fusion and the upper bound.
    #[arg(long)]
    pub fuse: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Every architecture of the (alpha, beta) grid.
    #[arg(long, conflicts_with = "arch")]
    pub all: bool,
    #[arg(long)]
    pub arch: Option<String>,
    /// BaseConfig JSON; defaults to the 128^3 configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub base: BaseConfig,
    pub train: TrainConfig,
    pub arch: Architecture,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            base: BaseConfig::default(),
            train: TrainConfig::default(),
            arch: Architecture::Fused {
                alpha: 3,
                beta: Fusion::Mul,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchRun {
    pub base: BaseConfig,
    pub cv: CvConfig,
}

/// Parses `mask`, `image`, `stacked`, or `[FusionNet]<alpha><op>` where op
/// is one of `+ * ⊕ add mul concat cat`.
pub fn parse_arch(s: &str) -> Result<Architecture> {
    let t = s.trim();
    match t.to_ascii_lowercase().as_str() {
        "mask" => {
            return Ok(Architecture::Single {
                input: BranchInput::Mask,
            })
        }
        "image" => {
            return Ok(Architecture::Single {
                input: BranchInput::Image,
            })
        }
        "stacked" => {
            return Ok(Architecture::Single {
                input: BranchInput::Stacked,
            })
        }
        _ => {}
    }
    let rest = t.strip_prefix("FusionNet").unwrap_or(t);
    let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
    let alpha = rest[..digits].parse::<usize>().ok();
    let op = &rest[digits..];
    match (alpha, Fusion::parse(op)) {
        (Some(alpha), Some(beta)) => Ok(Architecture::Fused { alpha, beta }),
        _ => Err(Error::Usage(format!("unrecognised architecture {s:?}"))),
    }
}

fn load_or_default<T: Default + serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a, seed),
        Command::Search(a) => search(a, seed),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn gen_data(a: GenArgs, seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let mut cfg: GenConfig = load_or_default(&a.config)?;
    cfg.side = a.side.unwrap_or(cfg.side);
    cfg.n_normal = a.n_normal.unwrap_or(cfg.n_normal);
    cfg.n_abnormal = a.n_abnormal.unwrap_or(cfg.n_abnormal);
    cfg.shape_signal = a.shape_signal.unwrap_or(cfg.shape_signal);
    cfg.texture_signal = a.texture_signal.unwrap_or(cfg.texture_signal);
    cfg.seg_noise = a.seg_noise.unwrap_or(cfg.seg_noise);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let samples = generate(&cfg)?;
    ensure_dir(&a.out)?;
    let mut manifest = RunManifest::new("gen-data", &cfg, cfg.seed);
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let image_path = format!("{}_image.vol", s.id);
        let mask_path = format!("{}_mask.vol", s.id);
        vol::write(&a.out.join(&image_path), &s.image)?;
        vol::write(&a.out.join(&mask_path), &s.mask)?;
        manifest.outputs.push(a.out.join(&image_path));
        manifest.outputs.push(a.out.join(&mask_path));
        rows.push(ManifestRow {
            case_id: s.id.clone(),
            image_path,
            mask_path,
            z: s.z,
        });
    }
    let csv = a.out.join("manifest.csv");
    tables::write_manifest(&csv, &rows)?;
    manifest.outputs.push(csv.clone());
    manifest.finish(&a.out, started)?;
    println!("wrote {} cases to {}", rows.len(), csv.display());
    Ok(())
}

fn preprocess(a: PrepArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg: PrepConfig = load_or_default(&a.config)?;
    cfg.out_side = a.out_side.unwrap_or(cfg.out_side);
    cfg.pad = a.pad.unwrap_or(cfg.pad);
    cfg.hu_lo = a.hu_lo.unwrap_or(cfg.hu_lo);
    cfg.hu_hi = a.hu_hi.unwrap_or(cfg.hu_hi);
    let cases: Vec<(String, PathBuf, PathBuf, Option<u8>)> = match (&a.image, &a.mask, &a.manifest) {
        (Some(i), Some(m), None) => vec![("case".into(), i.clone(), m.clone(), None)],
        (None, None, Some(man)) => tables::read_manifest(man)?
            .into_iter()
            .map(|r| {
                let i = tables::resolve(man, &r.image_path);
                let m = tables::resolve(man, &r.mask_path);
                (r.case_id, i, m, Some(r.z))
            })
            .collect(),
        _ => return Err(Error::Usage("give either --image and --mask, or --manifest".into())),
    };
    ensure_dir(&a.out)?;
    let mut manifest = RunManifest::new("preprocess", &cfg, 0);
    let mut rows = Vec::new();
    for (id, ip, mp, z) in cases {
        let p = prepare(&vol::read(&ip)?, &vol::read(&mp)?, &cfg)?;
        let image_path = format!("{id}_image.vol");
        let mask_path = format!("{id}_mask.vol");
        vol::write(&a.out.join(&image_path), &p.image)?;
        vol::write(&a.out.join(&mask_path), &p.mask)?;
        let note = if p.fallback { " (empty mask, centre crop)" } else { "" };
        println!("{id}: roi {:?}..{:?}{note}", p.roi.lo, p.roi.hi);
        manifest.inputs.extend([ip, mp]);
        manifest
            .outputs
            .extend([a.out.join(&image_path), a.out.join(&mask_path)]);
        if let Some(z) = z {
            rows.push(ManifestRow {
                case_id: id,
                image_path,
                mask_path,
                z,
            });
        }
    }
    if let Some(man) = &a.manifest {
        let csv = a.out.join("manifest.csv");
        tables::write_manifest(&csv, &rows)?;
        manifest.inputs.insert(0, man.clone());
        manifest.outputs.push(csv);
    }
    manifest.finish(&a.out, started)?;
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let mut cfg: TrainRun = load_or_default(&a.config)?;
    if let Some(arch) = &a.arch {
        cfg.arch = parse_arch(arch)?;
    }
    cfg.train.iterations = a.iterations.unwrap_or(cfg.train.iterations);
    cfg.train.seed = seed.unwrap_or(cfg.train.seed);
    let spec = ModelSpec {
        base: cfg.base.clone(),
        arch: cfg.arch,
    };
    spec.validate()?;
    let samples = tables::load_samples(&a.manifest)?;
    let mut model = Model::build(&spec, rng::derive(cfg.train.seed, &[0x696e6974]))?;
    let report = train_model(&mut model, &samples, &cfg.train)?;
    if report.single_class {
        eprintln!("warning: training data holds a single class");
    }
    ensure_dir(&a.out)?;
    let mut manifest = RunManifest::new("train", &cfg, cfg.train.seed);
    manifest.inputs.push(a.manifest.clone());
    let ckpt = a.out.join("model.ckpt");
    checkpoint::save(&ckpt, &model)?;
    let trace = a.out.join("loss_trace.csv");
    tables::write_trace(&trace, &report.trace)?;
    manifest
        .outputs
        .extend([ckpt.clone(), checkpoint::sidecar_path(&ckpt), trace]);
    if let Some(test) = &a.test_manifest {
        let scores = score_samples(&model, &tables::load_samples(test)?, 8)?;
        let path = a.out.join("scores.csv");
        tables::write_scores(&path, &scores)?;
        manifest.inputs.push(test.clone());
        manifest.outputs.push(path);
    }
    manifest.finish(&a.out, started)?;
    let last = report.trace.last().map_or(f32::NAN, |s| s.loss);
    println!(
        "{}: {} iterations, final loss {last:.4}",
        spec.arch.label(),
        report.trace.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SearchResults<'a> {
    leaderboard: &'a [LeaderRow],
    arms: &'a [ArmResult],
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<&'a Comparison>,
}

fn print_leaderboard(rows: &[LeaderRow]) {
    println!(
        "{:>4}  {:<14} {:>7} {:>7} {:>7} {:>7}",
        "rank", "model", "F1", "AUC", "SEN", "SPEC"
    );
    for r in rows {
        println!(
            "{:>4}  {:<14} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.rank, r.name, r.f1, r.auc, r.sen, r.spec
        );
    }
}

fn search(a: SearchArgs, seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let mut cfg: SearchRun = load_or_default(&a.config)?;
    cfg.cv.train.iterations = a.iterations.unwrap_or(cfg.cv.train.iterations);
    cfg.cv.train.seed = seed.unwrap_or(cfg.cv.train.seed);
    cfg.base.validate()?;
    let samples = tables::load_samples(&a.manifest)?;
    let (arms, comparison) = if a.baselines {
        let (mask, image, grid, comparison) = compare(&samples, &cfg.base, &cfg.cv, a.jobs)?;
        let mut arms = vec![mask, image];
        arms.extend(grid);
        (arms, Some(comparison))
    } else {
        let split = make_folds(&samples, cfg.cv.k, cfg.cv.train.seed)?;
        let specs: Vec<ModelSpec> = enumerate_space(&cfg.base).into_iter().map(ModelSpec::from).collect();
        (run_grid(&specs, &samples, &split, &cfg.cv, a.jobs)?, None)
    };
    let grid: Vec<ArmResult> = arms
        .iter()
        .filter(|r| r.spec.fusion_spec().is_some())
        .cloned()
        .collect();
    let board = leaderboard(&grid);
    print_leaderboard(&board);
    if let Some(c) = &comparison {
        println!();
        for (name, row) in [
            ("Mask", c.mask),
            ("Image", c.image),
            ("Naive Fusion", c.naive),
            (c.best_name.as_str(), c.best),
        ] {
            println!("{name:<14} F1 {:.4}  SEN {:.4}  SPEC {:.4}", row.f1, row.sen, row.spec);
        }
        println!(
            "{:<14} F1 {:.4}  SEN {:.4}  SPEC {:.4}",
            "Mask+Image GT", c.gt.f1, c.gt.sen, c.gt.spec
        );
    }
    if let Some(top) = board.first() {
        println!("winner: {}", top.name);
    }
    ensure_dir(&a.out)?;
    let mut manifest = RunManifest::new("search", &cfg, cfg.cv.train.seed);
    manifest.inputs.push(a.manifest.clone());
    let lb = a.out.join("leaderboard.csv");
    tables::write_leaderboard(&lb, &board)?;
    let results = a.out.join("results.json");
    write_json(
        &results,
        &SearchResults {
            leaderboard: &board,
            arms: &arms,
            comparison: comparison.as_ref(),
        },
    )?;
    manifest.outputs.extend([lb, results]);
    manifest.finish(&a.out, started)?;
    Ok(())
}

#[derive(Serialize)]
struct FusionReport {
    naive: EvalReport,
    gt_upper_bound: BinaryMetrics,
}

fn eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let scores = tables::read_scores(&a.scores)?;
    let report = metrics::evaluate(&scores, a.threshold)?;
    ensure_dir(&a.out)?;
    let mut manifest = RunManifest::new("eval", &serde_json::json!({ "threshold": a.threshold }), 0);
    manifest.inputs.push(a.scores.clone());
    let rp = a.out.join("report.json");
    write_json(&rp, &report)?;
    let roc = a.out.join("roc.csv");
    tables::write_roc(&roc, &report.roc)?;
    manifest.outputs.extend([rp, roc]);
    println!(
        "SEN {:.4}  SPEC {:.4}  F1 {:.4}  AUC {:.4}  (tp {} fp {} tn {} fn {})",
        report.sen,
        report.spec,
        report.f1,
        report.auc,
        report.confusion.tp,
        report.confusion.fp,
        report.confusion.tn,
        report.confusion.fn_
    );
    if let Some(other) = &a.fuse {
        let second = tables::read_scores(other)?;
        let naive = metrics::evaluate(&metrics::naive_fusion(&scores, &second)?, a.threshold)?;
        let gt = metrics::gt_upper_bound(&scores, &second, a.threshold)?;
        println!("naive fusion  F1 {:.4}  AUC {:.4}", naive.f1, naive.auc);
        println!("upper bound   F1 {:.4}  SEN {:.4}  SPEC {:.4}", gt.f1, gt.sen, gt.spec);
        let fp = a.out.join("fusion.json");
        write_json(
            &fp,
            &FusionReport {
                naive,
                gt_upper_bound: gt,
            },
        )?;
        manifest.inputs.push(other.clone());
        manifest.outputs.push(fp);
    }
    manifest.finish(&a.out, started)?;
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => read_json(p)?,
        None => BaseConfig::full_scale(),
    };
    base.validate()?;
    let specs: Vec<ModelSpec> = match (&a.arch, a.all) {
        (Some(s), false) => vec![ModelSpec {
            base: base.clone(),
            arch: parse_arch(s)?,
        }],
        (None, true) => enumerate_space(&base).into_iter().map(ModelSpec::from).collect(),
        _ => return Err(Error::Usage("give --all or --arch".into())),
    };
    let mut reports: Vec<CostReport> = Vec::with_capacity(specs.len());
    for s in &specs {
        s.validate()?;
        reports.push(cost_report(s));
    }
    println!("{:<14} {:>14} {:>18}", "model", "params", "FLOPs");
    for r in &reports {
        println!("{:<14} {:>14} {:>18}", r.name, r.param_count, r.flops);
    }
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
    }
    Ok(())
}
