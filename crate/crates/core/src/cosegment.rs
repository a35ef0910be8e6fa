//! Pseudo ground truth for retrieved groups, and the foreground-fraction filter.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{
    write_manifest, ClassTaxonomy, DatasetManifest, ImageRecord, ManifestEntry, Mask, MaskSourceKind,
    PipelineConfig, Split, BACKGROUND,
};
use crate::error::{Result, WssError};
use crate::ingest::ClassGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMaskResult {
    pub image_id: String,
    /// 0 = background, 1 = foreground.
    pub binary_mask: Mask,
    pub fg_fraction: f64,
}

impl GroupMaskResult {
    pub fn new(image_id: impl Into<String>, binary_mask: Mask) -> Self {
        let fg_fraction = foreground_fraction(&binary_mask);
        Self {
            image_id: image_id.into(),
            binary_mask,
            fg_fraction,
        }
    }
}

/// Produces one binary mask per image of a whole group. Implementations must be deterministic.
pub trait CoSegmenter: Sync {
    fn cosegment_group(&self, group: &ClassGroup) -> Result<Vec<GroupMaskResult>>;
}

/// Reads `<id>.mask.png` sidecars (0/255, 255 = foreground) from the first directory that has one.
/// Sidecars whose size differs from the (possibly resized) image are resampled by nearest neighbour.
#[derive(Debug, Clone)]
pub struct OracleSource {
    pub sidecar_dirs: Vec<PathBuf>,
}

impl OracleSource {
    pub fn new(sidecar_dirs: Vec<PathBuf>) -> Self {
        Self { sidecar_dirs }
    }

    fn locate(&self, id: &str) -> Result<PathBuf> {
        let name = format!("{id}.mask.png");
        self.sidecar_dirs
            .iter()
            .map(|d| d.join(&name))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                WssError::MissingSidecar(self.sidecar_dirs.first().map_or_else(|| PathBuf::from(&name), |d| d.join(&name)))
            })
    }
}

impl CoSegmenter for OracleSource {
    fn cosegment_group(&self, group: &ClassGroup) -> Result<Vec<GroupMaskResult>> {
        if group.records.is_empty() {
            return Err(WssError::invalid("cannot co-segment an empty group"));
        }
        group
            .records
            .iter()
            .map(|r| {
                let raw = Mask::load(&self.locate(&r.id)?)?;
                let bin = Mask::new(raw.height, raw.width, raw.labels.iter().map(|&v| u8::from(v >= 128)).collect())?;
                let bin = if (bin.height, bin.width) == (r.height, r.width) {
                    bin
                } else {
                    bin.resize_nearest(r.height, r.width)
                };
                Ok(GroupMaskResult::new(r.id.clone(), bin))
            })
            .collect()
    }
}

/// Colour-consensus stand-in for co-segmentation: a centred prior box seeds group-pooled joint
/// colour histograms, pixels are reassigned to the likelier model for a few rounds, and the largest
/// 4-connected foreground component is kept. An approximation, not a faithful co-segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusBaseline {
    /// Side fraction of the centred prior box.
    pub prior_box: f64,
    pub rounds: usize,
    pub bins_per_channel: usize,
    /// Additive histogram smoothing, in counts per bin.
    pub smoothing: f64,
}

impl Default for ConsensusBaseline {
    fn default() -> Self {
        Self {
            prior_box: 0.6,
            rounds: 5,
            bins_per_channel: 32,
            smoothing: 0.5,
        }
    }
}

impl ConsensusBaseline {
    fn bin(&self, rgb: [u8; 3]) -> usize {
        let b = self.bins_per_channel;
        let q = |v: u8| v as usize * b / 256;
        (q(rgb[0]) * b + q(rgb[1])) * b + q(rgb[2])
    }

    fn prior(&self, h: usize, w: usize) -> Mask {
        let mut m = Mask::filled(h, w, 0);
        let margin = (1.0 - self.prior_box) / 2.0;
        let (y0, y1) = ((margin * h as f64).round() as usize, ((1.0 - margin) * h as f64).round() as usize);
        let (x0, x1) = ((margin * w as f64).round() as usize, ((1.0 - margin) * w as f64).round() as usize);
        for y in y0..y1.max(y0 + 1).min(h) {
            for x in x0..x1.max(x0 + 1).min(w) {
                m.set(y, x, 1);
            }
        }
        m
    }
}

/// Keeps only the largest 4-connected component of 1-pixels (first in scan order on ties).
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut comp = vec![usize::MAX; h * w];
    let mut best = (0usize, usize::MAX);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.labels[start] == 0 || comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.labels[j] != 0 && comp[j] == usize::MAX {
                    comp[j] = next;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    let labels = comp.iter().map(|&c| u8::from(c == best.1)).collect();
    Mask { height: h, width: w, labels }
}

impl CoSegmenter for ConsensusBaseline {
    fn cosegment_group(&self, group: &ClassGroup) -> Result<Vec<GroupMaskResult>> {
        if group.records.is_empty() {
            return Err(WssError::invalid("cannot co-segment an empty group"));
        }
        if self.bins_per_channel == 0 || self.bins_per_channel > 256 || !(self.prior_box > 0.0 && self.prior_box <= 1.0) {
            return Err(WssError::invalid("bad consensus parameters"));
        }
        let nbins = self.bins_per_channel.pow(3);
        let binned: Vec<Vec<usize>> = group
            .records
            .iter()
            .map(|r| r.pixels.chunks_exact(3).map(|p| self.bin([p[0], p[1], p[2]])).collect())
            .collect();
        let mut masks: Vec<Mask> = group.records.iter().map(|r| self.prior(r.height, r.width)).collect();
        for _ in 0..self.rounds {
            let mut fg = vec![self.smoothing; nbins];
            let mut bg = vec![self.smoothing; nbins];
            for (bins, m) in binned.iter().zip(&masks) {
                for (&b, &l) in bins.iter().zip(&m.labels) {
                    if l == 1 {
                        fg[b] += 1.0;
                    } else {
                        bg[b] += 1.0;
                    }
                }
            }
            let (nf, nb): (f64, f64) = (fg.iter().sum(), bg.iter().sum());
            for (bins, m) in binned.iter().zip(masks.iter_mut()) {
                for (&b, l) in bins.iter().zip(m.labels.iter_mut()) {
                    *l = u8::from(fg[b] / nf > bg[b] / nb);
                }
            }
        }
        Ok(group
            .records
            .iter()
            .zip(&masks)
            .map(|(r, m)| GroupMaskResult::new(r.id.clone(), largest_component(m)))
            .collect())
    }
}

/// Exact ratio of nonzero pixels to all pixels.
pub fn foreground_fraction(mask: &Mask) -> f64 {
    let fg = mask.labels.iter().filter(|&&v| v != 0).count();
    fg as f64 / mask.labels.len() as f64
}

/// Keeps results with `fg_min <= fg_fraction <= fg_max`, in order.
pub fn filter_by_foreground(results: &[GroupMaskResult], fg_min: f64, fg_max: f64) -> Result<Vec<GroupMaskResult>> {
    if !(0.0 <= fg_min && fg_min < fg_max && fg_max <= 1.0) {
        return Err(WssError::invalid("need 0 <= fg_min < fg_max <= 1"));
    }
    Ok(results
        .iter()
        .filter(|r| fg_min <= r.fg_fraction && r.fg_fraction <= fg_max)
        .cloned()
        .collect())
}

pub fn binary_to_class_mask(result: &GroupMaskResult, class_index: usize, classes: usize) -> Result<Mask> {
    if class_index == BACKGROUND || class_index >= classes || class_index > 254 {
        return Err(WssError::invalid(format!("{class_index} is not a foreground class index")));
    }
    let m = &result.binary_mask;
    Mask::new(
        m.height,
        m.width,
        m.labels.iter().map(|&v| if v != 0 { class_index as u8 } else { 0 }).collect(),
    )
}

pub fn segmenter_for(kind: MaskSourceKind, sidecar_dirs: Vec<PathBuf>) -> Box<dyn CoSegmenter> {
    match kind {
        MaskSourceKind::Oracle => Box::new(OracleSource::new(sidecar_dirs)),
        MaskSourceKind::Consensus => Box::new(ConsensusBaseline::default()),
    }
}

#[derive(Debug, Clone)]
pub struct CosegOutcome {
    /// Kept images with their class masks and single labels; written as `train.tsv`.
    pub manifest: DatasetManifest,
    pub total: usize,
    pub kept: usize,
}

/// Co-segments every group, filters by foreground fraction and writes `<out>/images/<id>.png`,
/// `<out>/masks/<id>.png` and `<out>/train.tsv`.
pub fn build_training_set(
    groups: &[ClassGroup],
    segmenter: &dyn CoSegmenter,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<CosegOutcome> {
    let taxonomy: ClassTaxonomy = config.taxonomy()?;
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| WssError::io(d, e))?;
    }
    let mut manifest = DatasetManifest::new(Split::Train);
    let mut total = 0;
    for g in groups {
        g.validate()?;
        let results = segmenter.cosegment_group(g)?;
        total += results.len();
        let kept = filter_by_foreground(&results, config.fg_min, config.fg_max)?;
        for r in &kept {
            let rec: &ImageRecord = g
                .records
                .iter()
                .find(|x| x.id == r.image_id)
                .ok_or_else(|| WssError::invalid(format!("segmenter returned unknown id `{}`", r.image_id)))?;
            let mask = binary_to_class_mask(r, g.class_index, taxonomy.count())?;
            let ip = img_dir.join(format!("{}.png", rec.id));
            let mp = mask_dir.join(format!("{}.png", rec.id));
            rec.save_png(&ip)?;
            mask.save_png(&mp)?;
            manifest
                .entries
                .push(ManifestEntry::new(ip).with_mask(mp).with_labels(vec![g.class_index]));
        }
    }
    let kept = manifest.len();
    write_manifest(&manifest, &out_dir.join("train.tsv"), &taxonomy)?;
    log::info!("co-segmentation kept {kept} of {total} images");
    Ok(CosegOutcome { manifest, total, kept })
}
