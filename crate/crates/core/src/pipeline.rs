//! The end-to-end two-step run: ingest, co-segmentation and filtering, initial training,
//! label-constrained mask generation, final training and evaluation. Every stage output is
//! materialized, hashed into a run manifest, and reused on resume when its hash still matches.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::cosegment::{build_training_set, segmenter_for};
use crate::data::{load_manifest, write_manifest, ClassTaxonomy, DatasetManifest, PipelineConfig, Split};
use crate::error::{Result, WssError};
use crate::eval::{evaluate_prediction_dir, mean_iou, write_report};
use crate::infer::{generate_target_masks, predict_manifest};
use crate::ingest::{build_retrieved_corpus, groups_from_manifest, load_group_dir, prepare_target_images};
use crate::model::{checkpoint, NetworkParams};
use crate::synth::{generate_retrieved_groups, generate_target_set, write_retrieved, SynthSpec};
use crate::train::{train_stage, write_log_csv, Stage};

pub const STAGES: [&str; 6] = ["ingest", "coseg", "train-initial", "genmasks", "train-final", "evaluate"];
pub const CACHE_ENV: &str = "WSS_CACHE_DIR";
const RUN_MANIFEST: &str = "run_manifest.tsv";
const CONFIG_SNAPSHOT: &str = "config.cfg";

/// Where the run reads its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSources {
    /// `<root>/<class-name>/` folders of retrieved images, optionally with `<id>.mask.png` sidecars.
    pub retrieved_root: PathBuf,
    /// Target training images with image-level labels.
    pub target_train: PathBuf,
    /// Target validation images with ground-truth masks.
    pub target_val: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Files(PipelineSources),
    /// Generate the synthetic shapes benchmark from the `synth_*` config keys.
    Synthetic,
}

impl SourceSpec {
    fn describe(&self) -> String {
        match self {
            SourceSpec::Files(s) => format!(
                "files:{}:{}:{}",
                s.retrieved_root.display(),
                s.target_train.display(),
                s.target_val.display()
            ),
            SourceSpec::Synthetic => "synthetic".into(),
        }
    }
}

/// Writes the synthetic benchmark under `dir`: `retrieved/`, `target_train/labels.tsv`,
/// `target_val/gt.tsv`. Regenerating with the same config gives identical files.
pub fn generate_synthetic_sources(config: &PipelineConfig, dir: &Path) -> Result<PipelineSources> {
    if config.synth_retrieved_per_class == 0 || config.synth_target_train == 0 || config.synth_target_val == 0 {
        return Err(WssError::invalid(
            "synthetic sources need synth_retrieved_per_class, synth_target_train and synth_target_val > 0",
        ));
    }
    let taxonomy = config.taxonomy()?;
    if taxonomy != ClassTaxonomy::shapes() {
        return Err(WssError::invalid("synthetic sources need `classes = shapes`"));
    }
    let spec = |n: usize, seed: u64| SynthSpec {
        num_images: n,
        canvas: config.synth_canvas,
        noise_level: config.synth_noise,
        clutter: config.synth_clutter,
        rng_seed: seed,
    };
    let retrieved = dir.join("retrieved");
    let groups = generate_retrieved_groups(&spec(3 * config.synth_retrieved_per_class, config.seed))?;
    write_retrieved(&groups, &retrieved, &taxonomy)?;
    generate_target_set(&spec(config.synth_target_train, config.seed.wrapping_add(1)), &dir.join("target_train"), Split::Train)?;
    generate_target_set(&spec(config.synth_target_val, config.seed.wrapping_add(2)), &dir.join("target_val"), Split::Val)?;
    Ok(PipelineSources {
        retrieved_root: retrieved,
        target_train: dir.join("target_train").join("labels.tsv"),
        target_val: dir.join("target_val").join("gt.tsv"),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRecord {
    pub stage: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRunManifest {
    pub run_id: String,
    pub seeds: [u64; 2],
    pub config_snapshot: PathBuf,
    pub stages: Vec<StageRecord>,
    /// Stages executed by this invocation (the rest were reused).
    pub executed: Vec<String>,
}

impl PipelineRunManifest {
    pub fn output(&self, stage: &str) -> Option<&Path> {
        self.stages.iter().find(|r| r.stage == stage).map(|r| r.path.as_path())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "run_id\t{}", self.run_id).unwrap();
        writeln!(s, "seeds\t{}\t{}", self.seeds[0], self.seeds[1]).unwrap();
        writeln!(s, "config\t{}", self.config_snapshot.display()).unwrap();
        for r in &self.stages {
            writeln!(s, "stage\t{}\t{}\t{}", r.stage, r.path.display(), r.sha256).unwrap();
        }
        s
    }

    fn parse_stages(text: &str) -> Vec<StageRecord> {
        text.lines()
            .filter_map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                match f[..] {
                    ["stage", stage, path, sha] => Some(StageRecord {
                        stage: stage.to_string(),
                        path: PathBuf::from(path),
                        sha256: sha.to_string(),
                    }),
                    _ => None,
                }
            })
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| WssError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn run_id(config: &PipelineConfig, sources: &SourceSpec) -> String {
    let mut h = Sha256::new();
    h.update(config.to_text().as_bytes());
    h.update(sources.describe().as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

/// Intermediate cache root: `$WSS_CACHE_DIR/<run-id>` when set, else `<out>/cache`.
pub fn cache_root(out: &Path, run_id: &str) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(run_id),
        _ => out.join("cache"),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| WssError::io(dir, e))
}

fn load_ckpt_for(path: &Path) -> Result<NetworkParams> {
    checkpoint::load(path)
}

struct Layout {
    out: PathBuf,
    cache: PathBuf,
}

impl Layout {
    fn ingest(&self) -> PathBuf {
        self.cache.join("ingest")
    }
    fn primary(&self, stage: &str) -> PathBuf {
        match stage {
            "ingest" => self.ingest().join("corpus.tsv"),
            "coseg" => self.cache.join("coseg").join("train.tsv"),
            "train-initial" => self.cache.join("stage1").join("model.ckpt"),
            "genmasks" => self.cache.join("genmasks").join("manifest.tsv"),
            "train-final" => self.cache.join("stage2").join("model.ckpt"),
            _ => self.out.join("report.csv"),
        }
    }
}

fn run_stage(
    stage: &str,
    layout: &Layout,
    config: &PipelineConfig,
    sources: &PipelineSources,
    seeds: [u64; 2],
) -> Result<()> {
    let taxonomy = config.taxonomy()?;
    match stage {
        "ingest" => {
            let dir = layout.ingest();
            mkdir(&dir)?;
            let mut groups = Vec::new();
            for c in taxonomy.foreground() {
                let class_dir = sources.retrieved_root.join(taxonomy.name(c));
                if class_dir.is_dir() {
                    groups.push(load_group_dir(&class_dir, c)?);
                } else {
                    log::warn!("no retrieved images for class `{}`", taxonomy.name(c));
                }
            }
            let corpus = build_retrieved_corpus(&groups, config, &dir.join("corpus"))?;
            let train = load_manifest(&sources.target_train, &taxonomy)?;
            let train = prepare_target_images(&train, config, &dir.join("target_train"))?;
            write_manifest(&train, &dir.join("target_train.tsv"), &taxonomy)?;
            let val = load_manifest(&sources.target_val, &taxonomy)?;
            let val = prepare_target_images(&val, config, &dir.join("target_val"))?;
            write_manifest(&val, &dir.join("target_val.tsv"), &taxonomy)?;
            write_manifest(&corpus.manifest, &layout.primary("ingest"), &taxonomy)
        }
        "coseg" => {
            let corpus = load_manifest(&layout.primary("ingest"), &taxonomy)?;
            let groups = groups_from_manifest(&corpus, &taxonomy)?;
            let sidecars = taxonomy.foreground().map(|c| sources.retrieved_root.join(taxonomy.name(c))).collect();
            let segmenter = segmenter_for(config.mask_source, sidecars);
            let outcome = build_training_set(&groups, segmenter.as_ref(), config, &layout.cache.join("coseg"))?;
            if outcome.kept == 0 {
                return Err(WssError::invalid("the foreground filter removed every retrieved image"));
            }
            Ok(())
        }
        "train-initial" | "train-final" => {
            let (input, st, seed, dir) = if stage == "train-initial" {
                (layout.primary("coseg"), Stage::Initial, seeds[0], layout.cache.join("stage1"))
            } else {
                (layout.primary("genmasks"), Stage::Final, seeds[1], layout.cache.join("stage2"))
            };
            mkdir(&dir)?;
            let manifest = load_manifest(&input, &taxonomy)?;
            let ckpts = (config.checkpoint_every > 0).then(|| dir.join("checkpoints"));
            let outcome = train_stage(&manifest, config, st, seed, ckpts.as_deref())?;
            write_log_csv(&outcome.log, &dir.join("log.csv"))?;
            checkpoint::save(&outcome.params, &layout.primary(stage))
        }
        "genmasks" => {
            let params = load_ckpt_for(&layout.primary("train-initial"))?;
            let train = load_manifest(&layout.ingest().join("target_train.tsv"), &taxonomy)?;
            let dir = layout.cache.join("genmasks");
            let generated = generate_target_masks(&train, &params, config, &dir.join("masks"))?;
            write_manifest(&generated, &layout.primary("genmasks"), &taxonomy)
        }
        _ => {
            let params = load_ckpt_for(&layout.primary("train-final"))?;
            let val = load_manifest(&layout.ingest().join("target_val.tsv"), &taxonomy)?;
            let pred_dir = layout.out.join("predictions");
            let crf = config.crf_on_final.then_some(&config.crf);
            predict_manifest(&val, &params, &config.inference_scales, crf, config.workers, &pred_dir)?;
            let cm = evaluate_prediction_dir(&pred_dir, &val, taxonomy.count())?;
            write_report(&cm, &taxonomy, &layout.primary("evaluate"))
        }
    }
}

/// Runs (or resumes) the pipeline into `out`. A stage is reused when the previous run manifest
/// records it, the config snapshot is unchanged, and its output still hashes the same; every
/// stage after the first invalid one is rerun.
pub fn run_pipeline(config: &PipelineConfig, sources: &SourceSpec, out: &Path) -> Result<PipelineRunManifest> {
    config.validate()?;
    mkdir(out)?;
    let id = run_id(config, sources);
    let layout = Layout {
        out: out.to_path_buf(),
        cache: cache_root(out, &id),
    };
    mkdir(&layout.cache)?;
    let seeds = [config.seed, config.seed.wrapping_add(1)];

    let snapshot_path = out.join(CONFIG_SNAPSHOT);
    let snapshot = config.to_text();
    let manifest_path = out.join(RUN_MANIFEST);
    let previous = match (fs::read_to_string(&snapshot_path), fs::read_to_string(&manifest_path)) {
        (Ok(old), Ok(text)) if old == snapshot => PipelineRunManifest::parse_stages(&text),
        _ => Vec::new(),
    };
    fs::write(&snapshot_path, &snapshot).map_err(|e| WssError::io(&snapshot_path, e))?;

    let files = match sources {
        SourceSpec::Files(s) => s.clone(),
        SourceSpec::Synthetic => generate_synthetic_sources(config, &layout.cache.join("synth"))?,
    };

    let mut manifest = PipelineRunManifest {
        run_id: id,
        seeds,
        config_snapshot: snapshot_path,
        stages: Vec::new(),
        executed: Vec::new(),
    };
    let mut valid = true;
    for stage in STAGES {
        let path = layout.primary(stage);
        if valid {
            let reusable = previous.iter().find(|r| r.stage == stage).is_some_and(|r| {
                r.path == path && path.is_file() && sha256_file(&path).is_ok_and(|h| h == r.sha256)
            });
            valid = reusable;
        }
        if !valid {
            let t = Instant::now();
            log::info!("running stage {stage}");
            run_stage(stage, &layout, config, &files, seeds).map_err(|e| WssError::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            })?;
            log::info!("stage {stage} finished in {:.1}s", t.elapsed().as_secs_f64());
            manifest.executed.push(stage.to_string());
        }
        manifest.stages.push(StageRecord {
            stage: stage.to_string(),
            sha256: sha256_file(&path)?,
            path,
        });
        fs::write(&manifest_path, manifest.to_text()).map_err(|e| WssError::io(&manifest_path, e))?;
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: &'static str,
    pub mean_iou: f64,
}

pub const ABLATION_SETTINGS: [&str; 4] = [
    "initial mask generator",
    "simple final model",
    "final model with multi-label module",
    "final model + MS infer + CRF",
];

fn evaluate_params(
    params: &NetworkParams,
    val: &DatasetManifest,
    config: &PipelineConfig,
    scales: &[f64],
    crf: bool,
    pred_dir: &Path,
) -> Result<f64> {
    let taxonomy = config.taxonomy()?;
    let settings = crf.then_some(&config.crf);
    predict_manifest(val, params, scales, settings, config.workers, pred_dir)?;
    mean_iou(&evaluate_prediction_dir(pred_dir, val, taxonomy.count())?)
}

/// The four-row ablation: stage-1 generator, final model without and with the multi-label
/// branch (single scale, no CRF), and the full final model with multi-scale inference and CRF.
pub fn ablation_run(config: &PipelineConfig, sources: &SourceSpec, out: &Path) -> Result<Vec<AblationRow>> {
    let mut full = config.clone();
    full.multilabel_branch = true;
    full.crf_on_final = true;
    let run = run_pipeline(&full, sources, &out.join("full"))?;
    let taxonomy = config.taxonomy()?;
    let ingest_dir = run.output("ingest").and_then(Path::parent).expect("ingest output has a parent");
    let val = load_manifest(&ingest_dir.join("target_val.tsv"), &taxonomy)?;
    let single = [1.0];

    let stage1 = checkpoint::load(run.output("train-initial").expect("recorded"))?;
    let r1 = evaluate_params(&stage1, &val, config, &single, false, &out.join("pred_initial"))?;

    let mut simple = full.clone();
    simple.multilabel_branch = false;
    let genmasks = load_manifest(run.output("genmasks").expect("recorded"), &taxonomy)?;
    let simple_model = train_stage(&genmasks, &simple, Stage::Final, run.seeds[1], None)?;
    let r2 = evaluate_params(&simple_model.params, &val, config, &single, false, &out.join("pred_simple"))?;

    let stage2 = checkpoint::load(run.output("train-final").expect("recorded"))?;
    let r3 = evaluate_params(&stage2, &val, config, &single, false, &out.join("pred_multilabel"))?;

    let report = fs::read_to_string(run.output("evaluate").expect("recorded"))
        .map_err(|e| WssError::io(out.join("full/report.csv"), e))?;
    let r4 = crate::eval::report_mean(&report).ok_or_else(|| WssError::invalid("report has no mean row"))?;

    Ok(ABLATION_SETTINGS
        .iter()
        .zip([r1, r2, r3, r4])
        .map(|(&setting, mean_iou)| AblationRow { setting, mean_iou })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,mean_iou\n");
    for r in rows {
        writeln!(s, "{},{:.6}", r.setting, r.mean_iou).unwrap();
    }
    s
}
