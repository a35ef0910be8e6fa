//! Two-stage SGD training: the initial mask generator on (image, mask) pairs and the final
//! model on (image, labels, mask) triples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::losses::{multilabel_bce_loss, softmax_nll_loss};
use super::sgd::sgd_step;
use crate::data::{
    random_crop_pair, ClassTaxonomy, DatasetManifest, ImageRecord, LabelVector, Mask, PipelineConfig, IGNORE,
};
use crate::error::{Result, WssError};
use crate::model::network::{image_to_input, logits_to_scoremap, scoremap_to_chw};
use crate::model::{build_backbone, checkpoint, BackboneKind, MultiLabelScores, Network, NetworkParams, Tensor, OUTPUT_STRIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Final,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageRecord,
    pub mask: Mask,
    pub labels: Option<LabelVector>,
}

/// One row of the training curve. Loss columns are per-image means over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub seg_loss: f64,
    pub multilabel_loss: f64,
    pub combined: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    pub fn final_seg_loss(&self, window: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(window.max(1))..];
        tail.iter().map(|r| r.seg_loss).sum::<f64>() / tail.len() as f64
    }
}

pub fn write_log_csv(log: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut s = String::from("iteration,seg_loss,multilabel_loss,combined,lr\n");
    for r in log {
        writeln!(s, "{},{},{},{},{}", r.iteration, r.seg_loss, r.multilabel_loss, r.combined, r.lr).unwrap();
    }
    fs::write(path, s).map_err(|e| WssError::io(path, e))
}

/// Learning rate at `iteration` with a single drop by `factor` at `floor(drop_at * total)`.
pub fn learning_rate_at(base: f64, factor: f64, drop_at: f64, total: usize, iteration: usize) -> f64 {
    if iteration >= lr_drop_iteration(drop_at, total) {
        base / factor
    } else {
        base
    }
}

pub fn lr_drop_iteration(drop_at: f64, total: usize) -> usize {
    (drop_at * total as f64).floor() as usize
}

pub fn load_samples(manifest: &DatasetManifest, taxonomy: &ClassTaxonomy, stage: Stage) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let image = ImageRecord::load(&e.image)?;
            let mask_path = e
                .mask
                .as_ref()
                .ok_or_else(|| WssError::invalid(format!("{} has no mask", e.image.display())))?;
            let mask = Mask::load(mask_path)?;
            mask.check_shape(image.height, image.width)?;
            mask.validate(taxonomy.count())?;
            let labels = match (stage, e.label_vector(taxonomy.count())) {
                (_, Some(l)) => Some(l?),
                (Stage::Final, None) => {
                    return Err(WssError::invalid(format!(
                        "{} has no image-level labels",
                        e.image.display()
                    )))
                }
                (Stage::Initial, None) => None,
            };
            Ok(Sample { image, mask, labels })
        })
        .collect()
}

pub fn dataset_mean(samples: &[Sample]) -> [f64; 3] {
    let mut sum = [0f64; 3];
    let mut n = 0f64;
    for s in samples {
        for px in s.image.pixels.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        n += (s.image.height * s.image.width) as f64;
    }
    sum.map(|v| if n > 0.0 { v / n } else { 127.5 })
}

pub fn train_stage(
    manifest: &DatasetManifest,
    config: &PipelineConfig,
    stage: Stage,
    rng_seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let taxonomy = config.taxonomy()?;
    if manifest.is_empty() {
        return Err(WssError::invalid("training manifest is empty"));
    }
    let samples = load_samples(manifest, &taxonomy, stage)?;
    train_samples(&samples, taxonomy.count(), config, stage, rng_seed, checkpoint_dir)
}

struct SampleResult {
    grads: BTreeMap<String, Tensor>,
    seg: f64,
    multilabel: f64,
}

/// Training on in-memory samples. Per-image gradients are summed over the batch.
pub fn train_samples(
    samples: &[Sample],
    classes: usize,
    config: &PipelineConfig,
    stage: Stage,
    rng_seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(WssError::invalid("no training samples"));
    }
    let dual = stage == Stage::Final && config.multilabel_branch;
    if dual && samples.iter().any(|s| s.labels.is_none()) {
        return Err(WssError::invalid("final stage needs image-level labels for every sample"));
    }
    let kind: BackboneKind = config.backbone.parse()?;
    let mut params = build_backbone(kind, classes, dual, rng_seed)?;
    let mean = dataset_mean(samples);
    params.input_mean = mean.map(|m| m as f32);
    let pad = mean.map(|m| m.round() as u8);
    let iters = match stage {
        Stage::Initial => config.stage1_iters,
        Stage::Final => config.stage2_iters,
    };
    let lambda = if dual { config.lambda_balance } else { 0.0 };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| WssError::invalid(e.to_string()))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5eed_0f0d);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity = params.zeros_like();
    let mut log = Vec::with_capacity(iters);

    for it in 0..iters {
        // (sample index, augmentation seed) per batch slot; shuffled without replacement per epoch
        let mut slots = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let idx = order.pop().unwrap();
            slots.push((idx, order_rng.gen::<u64>()));
        }
        let net = Network::new(&params)?;
        let results: Vec<Option<SampleResult>> = pool.install(|| {
            slots
                .par_iter()
                .map(|&(idx, aug_seed)| run_sample(&net, &samples[idx], config, aug_seed, pad, lambda))
                .collect::<Result<Vec<_>>>()
        })?;

        let mut grads = params.zeros_like();
        let (mut seg, mut ml, mut n) = (0.0, 0.0, 0usize);
        for r in results.into_iter().flatten() {
            for (name, g) in r.grads {
                grads
                    .get_mut(&name)
                    .unwrap()
                    .data
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(a, b)| *a += b);
            }
            seg += r.seg;
            ml += r.multilabel;
            n += 1;
        }
        let lr = learning_rate_at(config.learning_rate, config.lr_drop_factor, config.lr_drop_at, iters, it);
        sgd_step(&mut params, &grads, &mut velocity, lr, config.momentum, config.weight_decay)?;
        let denom = n.max(1) as f64;
        log.push(TrainLogRow {
            iteration: it,
            seg_loss: seg / denom,
            multilabel_loss: ml / denom,
            combined: (seg + lambda * ml) / denom,
            lr,
        });
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
                checkpoint::save(&params, &dir.join(format!("checkpoint_{:06}.ckpt", it + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { params, log })
}

fn run_sample(
    net: &Network,
    sample: &Sample,
    config: &PipelineConfig,
    aug_seed: u64,
    pad: [u8; 3],
    lambda: f64,
) -> Result<Option<SampleResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
    let (mut img, mut mask, _) = random_crop_pair(&sample.image, &sample.mask, config.crop_size, rng.gen(), pad)?;
    if config.hflip && rng.gen_bool(0.5) {
        img = img.hflip();
        mask = mask.hflip();
    }
    let x = image_to_input(&img, net.params.input_mean);
    let trace = net.forward_trace(&x, img.height, img.width, net.arch.dual_branch)?;
    let (lh, lw) = trace.logit_size;
    let target = mask.downsample_to_stride(lh, lw, OUTPUT_STRIDE);
    if target.labels.iter().all(|&m| m == IGNORE) {
        return Ok(None);
    }
    let logits = logits_to_scoremap(&trace.logits, lh, lw, net.arch.classes);
    let (seg, dlogits) = softmax_nll_loss(&logits, &target)?;
    let (multilabel, dp) = match (trace.multilabel(), &sample.labels) {
        (Some(p), Some(y)) => {
            let p = MultiLabelScores {
                p: p.iter().map(|&v| v as f64).collect(),
            };
            let (l, g) = multilabel_bce_loss(&p, y)?;
            (l, Some(g.iter().map(|&v| (lambda * v) as f32).collect::<Vec<f32>>()))
        }
        _ => (0.0, None),
    };
    let grads = net.backward(&trace, &scoremap_to_chw(&dlogits), dp.as_deref());
    Ok(Some(SampleResult { grads, seg, multilabel }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_lr_drop_at_eighty_percent() {
        let lrs: Vec<f64> = (0..100).map(|i| learning_rate_at(1.0, 10.0, 0.8, 100, i)).collect();
        let drops = lrs.windows(2).filter(|w| w[1] != w[0]).count();
        assert_eq!(drops, 1);
        assert_eq!(lrs[79], 1.0);
        assert_eq!(lrs[80], 0.1);
        assert_eq!(lr_drop_iteration(0.8, 5000), 4000);
    }
}
