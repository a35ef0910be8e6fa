//! Confusion-matrix IoU and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{ClassTaxonomy, DatasetManifest, Mask, IGNORE};
use crate::error::{Result, WssError};

/// `counts[gt][pred]` pixel counts, IGNORE excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|k| self.get(j, k)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|k| self.get(k, j)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// Reorders classes: new class `perm[j]` takes old class `j`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.classes);
        for a in 0..self.classes {
            for b in 0..self.classes {
                out.counts[perm[a] * self.classes + perm[b]] = self.get(a, b);
            }
        }
        out
    }
}

pub fn accumulate(cm: &mut ConfusionMatrix, gt: &Mask, pred: &Mask) -> Result<()> {
    pred.check_shape(gt.height, gt.width)?;
    let c = cm.classes;
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if p == IGNORE {
            return Err(WssError::invalid("prediction contains IGNORE"));
        }
        if g == IGNORE {
            continue;
        }
        let (g, p) = (g as usize, p as usize);
        if g >= c || p >= c {
            return Err(WssError::invalid(format!("label out of range for {c} classes")));
        }
        cm.counts[g * c + p] += 1;
    }
    Ok(())
}

/// IoU per class; `None` where the class is absent from both ground truth and prediction.
pub fn per_class_iou(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes)
        .map(|j| {
            let tp = cm.get(j, j);
            let denom = cm.row_sum(j) + cm.col_sum(j) - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean over classes with a defined IoU.
pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    let defined: Vec<f64> = per_class_iou(cm).into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(WssError::invalid("no class has a defined IoU"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// One row per class plus a `mean` row.
pub fn report_csv(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy) -> Result<String> {
    let mut s = String::from("class,iou\n");
    for (j, iou) in per_class_iou(cm).iter().enumerate() {
        match iou {
            Some(v) => writeln!(s, "{},{:.6}", taxonomy.name(j), v).unwrap(),
            None => writeln!(s, "{},undefined", taxonomy.name(j)).unwrap(),
        }
    }
    writeln!(s, "mean,{:.6}", mean_iou(cm)?).unwrap();
    Ok(s)
}

pub fn write_report(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy, path: &Path) -> Result<()> {
    fs::write(path, report_csv(cm, taxonomy)?).map_err(|e| WssError::io(path, e))
}

/// Reads the `mean` row back from a report.
pub fn report_mean(text: &str) -> Option<f64> {
    text.lines()
        .find_map(|l| l.strip_prefix("mean,"))
        .and_then(|v| v.trim().parse().ok())
}

/// Compares `<pred_dir>/<image-id>.png` against the manifest's ground-truth masks.
pub fn evaluate_prediction_dir(pred_dir: &Path, gt: &DatasetManifest, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for e in &gt.entries {
        let gt_path = e
            .mask
            .as_ref()
            .ok_or_else(|| WssError::invalid(format!("{} has no ground-truth mask", e.image.display())))?;
        let gt_mask = Mask::load(gt_path)?;
        let pred = Mask::load(&pred_dir.join(format!("{}.png", e.image_id())))?;
        accumulate(&mut cm, &gt_mask, &pred)?;
    }
    Ok(cm)
}
