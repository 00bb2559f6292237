//! `nvi`: command-line driver for the NVI pipeline.
//!
//! Exit codes: 0 success, 1 data or runtime failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nvi_core::evaluation::Variant;
use nvi_core::fusion::EmotionWeighting;
use nvi_core::model::ModelKind;
use nvi_core::pipeline::{Run, RunConfig, CONFIG_ENV};
use nvi_core::synth::{write_synthetic_dataset, SynthDatasetParams};
use nvi_core::Error;

#[derive(Parser)]
#[command(
    name = "nvi",
    version,
    about = "Teacher nonverbal immediacy estimation from classroom video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run perception on every segment and write observation files.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Re-extract segments that already have an observation file.
        #[arg(long)]
        force: bool,
    },
    /// Train the gesture, distance or nvi model.
    Train {
        kind: ModelKind,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Score every segment with the trained NVI model.
    Score {
        #[command(flatten)]
        common: Common,
    },
    /// Validation metrics, rater-replacement ICC table and median-fusion correlations.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Correlate NVI scores with external measures.
    ValidateExternal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher_measures: Option<PathBuf>,
        #[arg(long)]
        video_measures: Option<PathBuf>,
        /// Dataset variant; repeat for several. Defaults to every variant with data.
        #[arg(long, value_enum)]
        variant: Vec<VariantArg>,
    },
    /// Write the summary and rating histograms.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        force: bool,
    },
    /// Write a synthetic dataset and a matching run config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Dataset manifest; overrides the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Seed applied to every training stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Extraction threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Cut-off on the normalized scale for the binary accuracy metric.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    emotion_weighting: Option<WeightingArg>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Drop labels whose rater standard deviation reaches this value.
    #[arg(long)]
    sigma_max: Option<f64>,
    /// Train only the regression head.
    #[arg(long)]
    freeze_backbone: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator parameters (TOML); flags override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_teachers: Option<usize>,
    #[arg(long)]
    validation_teachers: Option<usize>,
    #[arg(long)]
    external_teachers: Option<usize>,
    #[arg(long)]
    segments_per_teacher: Option<usize>,
    #[arg(long)]
    frames_per_segment: Option<usize>,
    /// Epochs for the frame regressors in the generated run config.
    #[arg(long, default_value_t = 12)]
    epochs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    AdditionalOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    TotalFrames,
    VisibleFrames,
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut config = match (&c.config, &c.manifest) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(m)) => RunConfig::new(std::env::current_dir().map(|d| d.join(m)).unwrap_or_else(|_| m.clone())),
        (None, None) => {
            return Err(Error::Config(format!(
                "pass --config, set {CONFIG_ENV}, or pass --manifest"
            )))
        }
    };
    if let (Some(m), Some(_)) = (&c.manifest, &c.config) {
        config.manifest = absolute(m);
    }
    if let Some(o) = &c.output_dir {
        config.output_dir = absolute(o);
    }
    if let Some(r) = &c.run_id {
        config.run_id = r.clone();
    }
    if c.seed.is_some() {
        config.seed = c.seed;
    }
    if let Some(w) = c.workers {
        config.workers = w;
    }
    if let Some(t) = c.threshold {
        config.binary_threshold = t;
    }
    if let Some(w) = c.emotion_weighting {
        config.emotion_weighting = match w {
            WeightingArg::TotalFrames => EmotionWeighting::TotalFrames,
            WeightingArg::VisibleFrames => EmotionWeighting::VisibleFrames,
        };
    }
    Ok(config)
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir()
        .map(|d| d.join(p))
        .unwrap_or_else(|_| p.to_path_buf())
}

fn apply_train(config: &mut RunConfig, kinds: &[ModelKind], t: &TrainOverrides) {
    for &k in kinds {
        let block = match k {
            ModelKind::Gesture => &mut config.train.gesture,
            ModelKind::Distance => &mut config.train.distance,
            ModelKind::Nvi => &mut config.train.nvi,
        };
        if let Some(e) = t.epochs {
            block.epochs = e;
        }
        if let Some(lr) = t.learning_rate {
            block.learning_rate = lr;
        }
        if let Some(b) = t.batch_size {
            block.batch_size = b;
        }
        if let Some(s) = t.sigma_max {
            block.sigma_max = s;
        }
        if t.freeze_backbone {
            block.freeze_backbone = true;
        }
    }
}

fn synth(args: &SynthArgs) -> Result<(), Error> {
    let mut p = match &args.params {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<SynthDatasetParams>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthDatasetParams::default(),
    };
    let overrides = [
        (&mut p.train_teachers, args.train_teachers),
        (&mut p.validation_teachers, args.validation_teachers),
        (&mut p.external_teachers, args.external_teachers),
        (&mut p.segments_per_teacher, args.segments_per_teacher),
        (&mut p.frames_per_segment, args.frames_per_segment),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(s) = args.seed {
        p.seed = s;
    }
    let ds = write_synthetic_dataset(&p, &args.out)?;

    let mut config = RunConfig::new("manifest.jsonl");
    config.run_id = format!("synth-{}", p.seed);
    config.seed = Some(p.seed);
    config.backbones.gesture = "tiny-cnn".parse()?;
    config.backbones.distance = "tiny-cnn".parse()?;
    config.train.gesture.epochs = args.epochs;
    config.train.distance.epochs = args.epochs;
    config.train.nvi.epochs = 300;
    config.train.nvi.batch_size = 16;
    config.external.teacher_measures = Some("external/teacher_measures.csv".into());
    config.external.video_measures = Some("external/video_measures.csv".into());
    let path = args.out.join("run.toml");
    std::fs::write(&path, config.to_toml()?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    println!(
        "wrote {} segments to {}; run config {}",
        ds.nvi_truth.len(),
        args.out.display(),
        path.display()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Extract { common, force } => {
            let run = Run::open(load_config(&common)?)?;
            let s = run.extract(force)?;
            println!(
                "extracted {}, skipped {}, failed {}",
                s.extracted,
                s.skipped,
                s.failed.len()
            );
            if !s.failed.is_empty() {
                for (id, msg) in &s.failed {
                    eprintln!("  {id}: {msg}");
                }
                return Err(Error::InvalidInput(format!(
                    "{} segment(s) failed extraction",
                    s.failed.len()
                )));
            }
        }
        Command::Train { kind, common, train } => {
            let mut config = load_config(&common)?;
            apply_train(&mut config, &[kind], &train);
            let run = Run::open(config)?;
            let m = run.train(kind)?;
            println!(
                "{}: {} train, {} validation, {} excluded; final train loss {:.6}, validation r {}",
                kind.as_str(),
                m.n_train,
                m.n_validation,
                m.n_excluded,
                m.final_train_loss().unwrap_or(f64::NAN),
                m.final_validation_r().map_or("undefined".into(), |r| format!("{r:.4}"))
            );
            println!("checkpoint {}", run.checkpoint_path(kind).display());
        }
        Command::Score { common } => {
            let run = Run::open(load_config(&common)?)?;
            let rows = run.score()?;
            println!("scored {} segments into {}", rows.len(), run.scores_path().display());
        }
        Command::Evaluate { common } => {
            let run = Run::open(load_config(&common)?)?;
            let e = run.evaluate()?;
            let r = |x: &Option<nvi_core::regressors::RegressorEvaluation>| {
                x.as_ref()
                    .and_then(|e| e.pearson)
                    .map_or("undefined".to_string(), |c| format!("{:.4}", c.r))
            };
            println!(
                "gesture r {}, distance r {}, nvi r {}",
                r(&e.gesture),
                r(&e.distance),
                r(&e.nvi)
            );
            for row in &e.icc_table {
                println!(
                    "  ICC {:<32} {}",
                    row.columns.join(","),
                    row.icc.map_or("undefined".into(), |v| format!("{v:.4}"))
                );
            }
            println!("wrote {}", run.evaluation_path().display());
        }
        Command::ValidateExternal {
            common,
            teacher_measures,
            video_measures,
            variant,
        } => {
            let mut config = load_config(&common)?;
            if let Some(t) = teacher_measures {
                config.external.teacher_measures = Some(absolute(&t));
            }
            if let Some(v) = video_measures {
                config.external.video_measures = Some(absolute(&v));
            }
            let run = Run::open(config)?;
            let variants: Vec<Variant> = if variant.is_empty() {
                let rows = nvi_core::fusion::read_scores(&run.scores_path())?;
                Run::default_variants(&rows)
            } else {
                variant
                    .iter()
                    .map(|v| match v {
                        VariantArg::Full => Variant::Full,
                        VariantArg::AdditionalOnly => Variant::AdditionalOnly,
                    })
                    .collect()
            };
            for report in run.validate_external(&variants)? {
                println!("variant {:?}", report.variant);
                for h in &report.results {
                    let f = |v: Option<f64>| v.map_or("undefined".into(), |v| format!("{v:.4}"));
                    println!(
                        "  {} {} ({}): r {}, p {}, p_adj {}, n {}",
                        h.hypothesis_id,
                        h.measure,
                        h.level,
                        f(h.r),
                        f(h.p_raw),
                        f(h.p_adjusted),
                        h.n
                    );
                }
                for w in &report.warnings {
                    println!("  warning: {w}");
                }
            }
        }
        Command::Report { common } => {
            let run = Run::open(load_config(&common)?)?;
            let out = run.report()?;
            println!("wrote {}", out.summary.display());
            for h in &out.histograms {
                println!("wrote {}", h.display());
            }
        }
        Command::Run { common, train, force } => {
            let mut config = load_config(&common)?;
            apply_train(
                &mut config,
                &[ModelKind::Gesture, ModelKind::Distance, ModelKind::Nvi],
                &train,
            );
            let run = Run::open(config)?;
            let out = run.run_all(force)?;
            println!("wrote {}", out.summary.display());
        }
        Command::Synth(args) => synth(&args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                eprintln!("run `nvi --help` for usage");
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
