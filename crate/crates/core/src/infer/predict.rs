use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::constrain::constrained_argmax;
use super::crf::{crf_refine, CrfSettings};
use super::multiscale::multiscale_probs;
use crate::data::{DatasetManifest, ImageRecord, LabelVector, Mask, PipelineConfig};
use crate::error::{Result, WssError};
use crate::model::NetworkParams;

/// Multi-scale probabilities, optional CRF, then label-constrained argmax.
/// Without `y` every class is allowed.
pub fn predict_mask(
    image: &ImageRecord,
    params: &NetworkParams,
    y: Option<&LabelVector>,
    scales: &[f64],
    crf: Option<&CrfSettings>,
) -> Result<Mask> {
    let mut probs = multiscale_probs(image, params, scales)?;
    if let Some(settings) = crf {
        probs = crf_refine(image, &probs, settings)?;
    }
    let all = LabelVector::all(probs.classes);
    constrained_argmax(&probs, y.unwrap_or(&all))
}

/// Writes `<out_dir>/<image-id>.png` for every entry, constrained by its image-level labels.
pub fn generate_target_masks(
    manifest: &DatasetManifest,
    params: &NetworkParams,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| WssError::io(out_dir, e))?;
    let classes = config.taxonomy()?.count();
    let crf = config.crf_on_genmasks.then_some(&config.crf);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| WssError::invalid(e.to_string()))?;
    let entries = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let y = e
                    .label_vector(classes)
                    .ok_or_else(|| WssError::invalid(format!("{} has no labels", e.image.display())))??;
                let image = ImageRecord::load(&e.image)?;
                let mask = predict_mask(&image, params, Some(&y), &config.inference_scales, crf)?;
                let path = out_dir.join(format!("{}.png", e.image_id()));
                mask.save_png(&path)?;
                let mut out = e.clone();
                out.mask = Some(path);
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(DatasetManifest {
        entries,
        split: manifest.split,
    })
}

/// Writes an unconstrained prediction `<out_dir>/<image-id>.png` for every entry.
pub fn predict_manifest(
    manifest: &DatasetManifest,
    params: &NetworkParams,
    scales: &[f64],
    crf: Option<&CrfSettings>,
    workers: usize,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| WssError::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| WssError::invalid(e.to_string()))?;
    pool.install(|| {
        manifest.entries.par_iter().try_for_each(|e| {
            let image = ImageRecord::load(&e.image)?;
            let mask = predict_mask(&image, params, None, scales, crf)?;
            mask.save_png(&out_dir.join(format!("{}.png", e.image_id())))
        })
    })
}
