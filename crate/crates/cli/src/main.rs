use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use wss_core::cosegment::{build_training_set, segmenter_for};
use wss_core::data::config::parse_scales;
use wss_core::data::{load_manifest, ClassTaxonomy, ImageRecord, LabelVector, MaskSourceKind, PipelineConfig, Split};
use wss_core::eval::{evaluate_prediction_dir, report_csv};
use wss_core::infer::{generate_target_masks, predict_mask};
use wss_core::ingest::{fetch_class_images, groups_from_manifest, load_group_dir, ClassGroup, DirectoryFetcher, FetchRequest, ImageFetcher, UrlListFetcher};
use wss_core::model::checkpoint;
use wss_core::pipeline::{ablation_csv, ablation_run, run_pipeline, PipelineSources, SourceSpec};
use wss_core::synth::{generate_retrieved_groups, generate_target_set, write_retrieved, SynthSpec};
use wss_core::train::{train_stage, write_log_csv, Stage};
use wss_core::{Result, WssError};

#[derive(Parser)]
#[command(name = "wss", version, about = "Weakly supervised segmentation from web images and image-level labels")]
struct Cli {
    /// Pipeline config (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FetcherKind {
    Dir,
    Urllist,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceKind {
    Oracle,
    Consensus,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Initial,
    Final,
}

#[derive(clap::Args)]
struct SourceArgs {
    /// Folder of `<class-name>/` image folders. Without the three source flags the synthetic
    /// benchmark is generated from the `synth_*` config keys.
    #[arg(long, requires_all = ["target_train", "target_val"])]
    retrieved: Option<PathBuf>,
    #[arg(long)]
    target_train: Option<PathBuf>,
    #[arg(long)]
    target_val: Option<PathBuf>,
}

impl SourceArgs {
    fn spec(&self) -> SourceSpec {
        match (&self.retrieved, &self.target_train, &self.target_val) {
            (Some(r), Some(t), Some(v)) => SourceSpec::Files(PipelineSources {
                retrieved_root: r.clone(),
                target_train: t.clone(),
                target_val: v.clone(),
            }),
            _ => SourceSpec::Synthetic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fetch images for one class query.
    Ingest {
        #[arg(long = "class")]
        class: String,
        #[arg(long, value_enum)]
        fetcher: FetcherKind,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max: usize,
    },
    /// Co-segment retrieved images (a manifest, a class folder, or a root of class folders), filter by foreground fraction and write a training set.
    Coseg {
        #[arg(long)]
        group: PathBuf,
        #[arg(long, value_enum)]
        source: SourceKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fg_min: Option<f64>,
        #[arg(long)]
        fg_max: Option<f64>,
        /// Extra folders searched for `<id>.mask.png` sidecars.
        #[arg(long)]
        sidecars: Vec<PathBuf>,
    },
    /// Train the initial or final network.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint; the training log goes next to it as `<name>.log.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Label-constrained masks for a labelled target manifest.
    Genmasks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated inference scales; defaults to the config's.
        #[arg(long)]
        scales: Option<String>,
        /// Defaults to the config's `crf_on_genmasks`.
        #[arg(long, value_enum)]
        crf: Option<OnOff>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated class names the prediction is restricted to.
        #[arg(long)]
        labels: Option<String>,
        #[arg(long)]
        scales: Option<String>,
        /// Defaults to the config's `crf_on_final`.
        #[arg(long, value_enum)]
        crf: Option<OnOff>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class and mean IoU of a prediction folder.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Four-row ablation table.
    Ablate {
        #[command(flatten)]
        sources: SourceArgs,
        #[arg(long)]
        out: PathBuf,
        /// Working folder for the runs; defaults to `<out>.runs`.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Generate the synthetic shapes benchmark.
    Synthbench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full two-step run, resumable.
    Pipeline {
        #[command(flatten)]
        sources: SourceArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Groups from a manifest, a folder named after a class, or a folder of class folders,
/// plus the folders that hold the images.
fn load_groups(group: &Path, taxonomy: &ClassTaxonomy) -> Result<(Vec<ClassGroup>, Vec<PathBuf>)> {
    if !group.is_dir() {
        let manifest = load_manifest(group, taxonomy)?;
        let mut dirs: Vec<PathBuf> = Vec::new();
        for e in &manifest.entries {
            if let Some(parent) = e.image.parent() {
                if !dirs.iter().any(|d| d == parent) {
                    dirs.push(parent.to_path_buf());
                }
            }
        }
        return Ok((groups_from_manifest(&manifest, taxonomy)?, dirs));
    }
    let own = group.file_name().and_then(|n| n.to_str()).and_then(|n| taxonomy.index_of(n).ok());
    let dirs: Vec<(usize, PathBuf)> = match own {
        Some(c) if c != 0 => vec![(c, group.to_path_buf())],
        _ => taxonomy
            .foreground()
            .map(|c| (c, group.join(taxonomy.name(c))))
            .filter(|(_, d)| d.is_dir())
            .collect(),
    };
    if dirs.is_empty() {
        return Err(WssError::InvalidArgument(format!("{} holds no class folders", group.display())));
    }
    let groups = dirs.iter().map(|(c, d)| load_group_dir(d, *c)).collect::<Result<_>>()?;
    Ok((groups, dirs.into_iter().map(|(_, d)| d).collect()))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| WssError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let taxonomy = config.taxonomy()?;
    match &cli.command {
        Command::Ingest { class, fetcher, src, out, max } => {
            let fetcher: Box<dyn ImageFetcher> = match fetcher {
                FetcherKind::Dir => Box::new(DirectoryFetcher::new(src)),
                FetcherKind::Urllist => Box::new(UrlListFetcher::new(src)),
            };
            let report = fetch_class_images(&FetchRequest::new(class, *max, out), fetcher.as_ref(), &taxonomy)?;
            println!(
                "fetched={} corrupt={} failed={}",
                report.files.len(),
                report.corrupt,
                report.failures.len()
            );
        }
        Command::Coseg { group, source, out, fg_min, fg_max, sidecars } => {
            let mut config = config.clone();
            config.fg_min = fg_min.unwrap_or(config.fg_min);
            config.fg_max = fg_max.unwrap_or(config.fg_max);
            config.validate()?;
            let (groups, mut dirs) = load_groups(group, &taxonomy)?;
            dirs.extend(sidecars.iter().cloned());
            let kind = match source {
                SourceKind::Oracle => MaskSourceKind::Oracle,
                SourceKind::Consensus => MaskSourceKind::Consensus,
            };
            let outcome = build_training_set(&groups, segmenter_for(kind, dirs).as_ref(), &config, out)?;
            println!("kept={} total={}", outcome.kept, outcome.total);
        }
        Command::Train { stage, manifest, out } => {
            let stage = match stage {
                StageArg::Initial => Stage::Initial,
                StageArg::Final => Stage::Final,
            };
            let manifest = load_manifest(manifest, &taxonomy)?;
            let ckpts = (config.checkpoint_every > 0).then(|| out.with_extension("checkpoints"));
            let outcome = train_stage(&manifest, &config, stage, config.seed, ckpts.as_deref())?;
            checkpoint::save(&outcome.params, out)?;
            write_log_csv(&outcome.log, &out.with_extension("log.csv"))?;
        }
        Command::Genmasks { manifest, ckpt, scales, crf, out } => {
            let mut config = config.clone();
            if let Some(s) = scales {
                config.inference_scales = parse_scales(s)?;
            }
            if let Some(c) = crf {
                config.crf_on_genmasks = matches!(c, OnOff::On);
            }
            config.validate()?;
            let params = checkpoint::load(ckpt)?;
            let manifest = load_manifest(manifest, &taxonomy)?;
            let generated = generate_target_masks(&manifest, &params, &config, out)?;
            wss_core::data::write_manifest(&generated, &out.join("manifest.tsv"), &taxonomy)?;
        }
        Command::Infer { image, ckpt, labels, scales, crf, out } => {
            let params = checkpoint::load(ckpt)?;
            let img = ImageRecord::load(image)?;
            let y = labels
                .as_deref()
                .map(|l| LabelVector::from_names(&taxonomy, &l.split(',').map(str::trim).collect::<Vec<_>>()))
                .transpose()?;
            let scales = match scales {
                Some(s) => parse_scales(s)?,
                None => config.inference_scales.clone(),
            };
            let use_crf = crf.map_or(config.crf_on_final, |c| matches!(c, OnOff::On));
            let mask = predict_mask(&img, &params, y.as_ref(), &scales, use_crf.then_some(&config.crf))?;
            mask.save_png(out)?;
        }
        Command::Evaluate { pred_dir, gt_manifest, out } => {
            let gt = load_manifest(gt_manifest, &taxonomy)?;
            let cm = evaluate_prediction_dir(pred_dir, &gt, taxonomy.count())?;
            let report = report_csv(&cm, &taxonomy)?;
            write_text(out, &report)?;
            print!("{report}");
        }
        Command::Ablate { sources, out, work_dir } => {
            let work = work_dir.clone().unwrap_or_else(|| out.with_extension("runs"));
            let rows = ablation_run(&config, &sources.spec(), &work)?;
            let table = ablation_csv(&rows);
            write_text(out, &table)?;
            print!("{table}");
        }
        Command::Synthbench { spec, out } => {
            let text = fs::read_to_string(spec).map_err(|e| WssError::Io {
                path: spec.clone(),
                source: e,
            })?;
            let spec = SynthSpec::parse(&text)?;
            let shapes = ClassTaxonomy::shapes();
            write_retrieved(&generate_retrieved_groups(&spec)?, &out.join("retrieved"), &shapes)?;
            let with_seed = |k: u64| SynthSpec {
                rng_seed: spec.rng_seed.wrapping_add(k),
                ..spec.clone()
            };
            generate_target_set(&with_seed(1), &out.join("target_train"), Split::Train)?;
            generate_target_set(&with_seed(2), &out.join("target_val"), Split::Val)?;
        }
        Command::Pipeline { sources, out } => {
            let run = run_pipeline(&config, &sources.spec(), out)?;
            print!("{}", run.to_text());
        }
    }
    Ok(())
}

fn error_kind(e: &WssError) -> &'static str {
    match e {
        WssError::Io { .. } => "io",
        WssError::Image { .. } => "image",
        WssError::Parse { .. } => "parse",
        WssError::UnknownClass(_) => "unknown-class",
        WssError::UnknownConfigKey(_) => "unknown-config-key",
        WssError::InvalidArgument(_) => "invalid-argument",
        WssError::ShapeMismatch(_) => "shape-mismatch",
        WssError::NonFiniteGradient(_) => "non-finite-gradient",
        WssError::MissingSidecar(_) => "missing-sidecar",
        WssError::Checkpoint(_) => "checkpoint",
        WssError::Stage { .. } => "stage",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                WssError::Stage { stage, .. } => format!(" stage={stage}"),
                _ => String::new(),
            };
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("wss-error kind={}{stage} message={msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
