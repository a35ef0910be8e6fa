//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::taxonomy::ClassTaxonomy;
use crate::error::{Result, WssError};
use crate::infer::crf::CrfSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSourceKind {
    Oracle,
    Consensus,
}

impl FromStr for MaskSourceKind {
    type Err = WssError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "consensus" => Ok(Self::Consensus),
            other => Err(WssError::invalid(format!("unknown mask source `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskSourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Oracle => "oracle",
            Self::Consensus => "consensus",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub classes: Vec<String>,
    pub backbone: String,
    pub lambda_balance: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lr_drop_factor: f64,
    /// Fraction of the run after which the single LR drop happens.
    pub lr_drop_at: f64,
    pub hflip: bool,
    pub multilabel_branch: bool,
    pub checkpoint_every: usize,
    pub inference_scales: Vec<f64>,
    pub fg_min: f64,
    pub fg_max: f64,
    pub retrieved_max_dim: usize,
    pub target_max_dim: usize,
    pub mask_source: MaskSourceKind,
    pub crf: CrfSettings,
    pub crf_on_genmasks: bool,
    pub crf_on_final: bool,
    pub seed: u64,
    pub workers: usize,
    pub synth_retrieved_per_class: usize,
    pub synth_target_train: usize,
    pub synth_target_val: usize,
    pub synth_canvas: usize,
    pub synth_noise: f64,
    pub synth_clutter: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            classes: ClassTaxonomy::pascal_voc().names().to_vec(),
            backbone: "toy".into(),
            lambda_balance: 1.0,
            batch_size: 16,
            crop_size: 320,
            learning_rate: 16e-4,
            weight_decay: 5e-4,
            momentum: 0.9,
            stage1_iters: 5000,
            stage2_iters: 11000,
            lr_drop_factor: 10.0,
            lr_drop_at: 0.8,
            hflip: true,
            multilabel_branch: true,
            checkpoint_every: 0,
            inference_scales: vec![0.75, 1.0, 1.25],
            fg_min: 0.20,
            fg_max: 0.80,
            retrieved_max_dim: 340,
            target_max_dim: 500,
            mask_source: MaskSourceKind::Oracle,
            crf: CrfSettings::default(),
            crf_on_genmasks: false,
            crf_on_final: true,
            seed: 0,
            workers: 1,
            synth_retrieved_per_class: 0,
            synth_target_train: 0,
            synth_target_val: 0,
            synth_canvas: 96,
            synth_noise: 0.1,
            synth_clutter: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| WssError::invalid(format!("bad value `{raw}` for `{key}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(WssError::invalid(format!("bad boolean `{raw}` for `{key}`"))),
    }
}

pub fn parse_scales(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| parse_value::<f64>("inference_scales", s.trim()))
        .collect()
}

impl PipelineConfig {
    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        ClassTaxonomy::new(&self.classes)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.fg_min && self.fg_min < self.fg_max && self.fg_max <= 1.0) {
            return Err(WssError::invalid("need 0 <= fg_min < fg_max <= 1"));
        }
        if self.inference_scales.is_empty() || self.inference_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(WssError::invalid("inference scales must be nonempty and positive"));
        }
        if !(self.lambda_balance >= 0.0) {
            return Err(WssError::invalid("lambda_balance must be nonnegative"));
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return Err(WssError::invalid("batch_size and crop_size must be positive"));
        }
        if !(self.lr_drop_factor > 0.0) || !(0.0..=1.0).contains(&self.lr_drop_at) {
            return Err(WssError::invalid("lr_drop_factor must be > 0 and lr_drop_at in [0, 1]"));
        }
        self.crf.validate()?;
        self.taxonomy()?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "classes" => {
                self.classes = match raw {
                    "pascal-voc" => ClassTaxonomy::pascal_voc().names().to_vec(),
                    "shapes" => ClassTaxonomy::shapes().names().to_vec(),
                    list => ClassTaxonomy::parse_list(list)?.names().to_vec(),
                }
            }
            "backbone" => self.backbone = raw.to_string(),
            "lambda_balance" => self.lambda_balance = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "crop_size" => self.crop_size = parse_value(key, raw)?,
            "learning_rate" => self.learning_rate = parse_value(key, raw)?,
            "weight_decay" => self.weight_decay = parse_value(key, raw)?,
            "momentum" => self.momentum = parse_value(key, raw)?,
            "stage1_iters" => self.stage1_iters = parse_value(key, raw)?,
            "stage2_iters" => self.stage2_iters = parse_value(key, raw)?,
            "lr_drop_factor" => self.lr_drop_factor = parse_value(key, raw)?,
            "lr_drop_at" => self.lr_drop_at = parse_value(key, raw)?,
            "hflip" => self.hflip = parse_bool(key, raw)?,
            "multilabel_branch" => self.multilabel_branch = parse_bool(key, raw)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, raw)?,
            "inference_scales" => self.inference_scales = parse_scales(raw)?,
            "fg_min" => self.fg_min = parse_value(key, raw)?,
            "fg_max" => self.fg_max = parse_value(key, raw)?,
            "retrieved_max_dim" => self.retrieved_max_dim = parse_value(key, raw)?,
            "target_max_dim" => self.target_max_dim = parse_value(key, raw)?,
            "mask_source" => self.mask_source = raw.parse()?,
            "crf_iterations" => self.crf.iterations = parse_value(key, raw)?,
            "crf_gaussian_weight" => self.crf.gaussian_weight = parse_value(key, raw)?,
            "crf_gaussian_sigma_xy" => self.crf.gaussian_sigma_xy = parse_value(key, raw)?,
            "crf_bilateral_weight" => self.crf.bilateral_weight = parse_value(key, raw)?,
            "crf_bilateral_sigma_xy" => self.crf.bilateral_sigma_xy = parse_value(key, raw)?,
            "crf_bilateral_sigma_rgb" => self.crf.bilateral_sigma_rgb = parse_value(key, raw)?,
            "crf_on_genmasks" => self.crf_on_genmasks = parse_bool(key, raw)?,
            "crf_on_final" => self.crf_on_final = parse_bool(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "workers" => self.workers = parse_value(key, raw)?,
            "synth_retrieved_per_class" => self.synth_retrieved_per_class = parse_value(key, raw)?,
            "synth_target_train" => self.synth_target_train = parse_value(key, raw)?,
            "synth_target_val" => self.synth_target_val = parse_value(key, raw)?,
            "synth_canvas" => self.synth_canvas = parse_value(key, raw)?,
            "synth_noise" => self.synth_noise = parse_value(key, raw)?,
            "synth_clutter" => self.synth_clutter = parse_bool(key, raw)?,
            other => return Err(WssError::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| WssError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| WssError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every key, in a fixed order. Parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let scales = self
            .inference_scales
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("classes", self.classes.join(","));
        kv("backbone", self.backbone.clone());
        kv("lambda_balance", self.lambda_balance.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("momentum", self.momentum.to_string());
        kv("stage1_iters", self.stage1_iters.to_string());
        kv("stage2_iters", self.stage2_iters.to_string());
        kv("lr_drop_factor", self.lr_drop_factor.to_string());
        kv("lr_drop_at", self.lr_drop_at.to_string());
        kv("hflip", self.hflip.to_string());
        kv("multilabel_branch", self.multilabel_branch.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("inference_scales", scales);
        kv("fg_min", self.fg_min.to_string());
        kv("fg_max", self.fg_max.to_string());
        kv("retrieved_max_dim", self.retrieved_max_dim.to_string());
        kv("target_max_dim", self.target_max_dim.to_string());
        kv("mask_source", self.mask_source.to_string());
        kv("crf_iterations", self.crf.iterations.to_string());
        kv("crf_gaussian_weight", self.crf.gaussian_weight.to_string());
        kv("crf_gaussian_sigma_xy", self.crf.gaussian_sigma_xy.to_string());
        kv("crf_bilateral_weight", self.crf.bilateral_weight.to_string());
        kv("crf_bilateral_sigma_xy", self.crf.bilateral_sigma_xy.to_string());
        kv("crf_bilateral_sigma_rgb", self.crf.bilateral_sigma_rgb.to_string());
        kv("crf_on_genmasks", self.crf_on_genmasks.to_string());
        kv("crf_on_final", self.crf_on_final.to_string());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("synth_retrieved_per_class", self.synth_retrieved_per_class.to_string());
        kv("synth_target_train", self.synth_target_train.to_string());
        kv("synth_target_val", self.synth_target_val.to_string());
        kv("synth_canvas", self.synth_canvas.to_string());
        kv("synth_noise", self.synth_noise.to_string());
        kv("synth_clutter", self.synth_clutter.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.crop_size, 320);
        assert_eq!(c.learning_rate, 16e-4);
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.lambda_balance, 1.0);
        assert_eq!((c.fg_min, c.fg_max), (0.2, 0.8));
        assert_eq!((c.retrieved_max_dim, c.target_max_dim), (340, 500));
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_unknown_key() {
        let p = Path::new("t.cfg");
        let c = PipelineConfig::parse("# comment\nbatch_size = 4\ninference_scales = 1.0, 0.5\nclasses = shapes\n", p).unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.inference_scales, vec![1.0, 0.5]);
        assert_eq!(c.classes.len(), 4);
        let err = PipelineConfig::parse("batchsize = 4\n", p).unwrap_err();
        assert!(matches!(err, WssError::UnknownConfigKey(_)));
    }

    #[test]
    fn invariants_enforced() {
        let p = Path::new("t.cfg");
        assert!(PipelineConfig::parse("fg_min = 0.9\n", p).is_err());
        assert!(PipelineConfig::parse("inference_scales = 1.0,0\n", p).is_err());
        assert!(PipelineConfig::parse("lambda_balance = -1\n", p).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = PipelineConfig::default();
        c.set("classes", "shapes").unwrap();
        c.set("inference_scales", "0.5,1,1.5").unwrap();
        c.set("crf_on_genmasks", "on").unwrap();
        let back = PipelineConfig::parse(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }
}
