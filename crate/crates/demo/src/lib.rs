//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A synthetic target scene is scored by a coarse colour classifier (one score cell every 8
//! pixels, bilinearly upsampled, like the real network's output). The distractor blobs share
//! class colours, so the raw argmax hallucinates classes that the image-level label constraint
//! then removes; the CRF sharpens the blurry cell boundaries.

use wasm_bindgen::prelude::*;

use wss_core::data::{ImageRecord, LabelVector, Mask, ScoreMap, ScoreSpace, IGNORE};
use wss_core::eval::{accumulate, mean_iou, ConfusionMatrix};
use wss_core::infer::{constrained_argmax, crf_refine, upsample_cells, CrfSettings};
use wss_core::model::OUTPUT_STRIDE;
use wss_core::synth::{render_target, SynthSpec};

const CLASSES: usize = 4;
const CENTRES: [[f64; 3]; 3] = [[215.0, 65.0, 65.0], [65.0, 195.0, 75.0], [75.0, 85.0, 215.0]];
const COLOUR_SIGMA: f64 = 45.0;
const BACKGROUND_LOGIT: f64 = -2.0;
const LABEL_COLOURS: [[u8; 3]; 4] = [[20, 20, 20], [230, 60, 60], [60, 200, 80], [70, 90, 230]];

fn cell_logits(image: &ImageRecord) -> ScoreMap {
    let s = OUTPUT_STRIDE;
    let (ch, cw) = ((image.height - 1) / s + 1, (image.width - 1) / s + 1);
    let mut cells = ScoreMap::zeros(ch, cw, CLASSES, ScoreSpace::Logits);
    for i in 0..ch {
        for j in 0..cw {
            let (cy, cx) = (i * s, j * s);
            let mut mean = [0.0; 3];
            let mut n = 0.0;
            for y in cy.saturating_sub(1)..(cy + 2).min(image.height) {
                for x in cx.saturating_sub(1)..(cx + 2).min(image.width) {
                    let p = image.rgb(y, x);
                    (0..3).for_each(|k| mean[k] += p[k] as f64);
                    n += 1.0;
                }
            }
            let px = cells.at_mut(i, j);
            px[0] = BACKGROUND_LOGIT;
            for (c, centre) in CENTRES.iter().enumerate() {
                let d2: f64 = (0..3).map(|k| (mean[k] / n - centre[k]).powi(2)).sum();
                px[c + 1] = -d2 / (2.0 * COLOUR_SIGMA * COLOUR_SIGMA);
            }
        }
    }
    cells.softmax()
}

fn to_rgba(mask: &Mask) -> Vec<u8> {
    mask.labels
        .iter()
        .flat_map(|&l| {
            let c = if l == IGNORE { [255, 255, 255] } else { LABEL_COLOURS[l as usize % 4] };
            [c[0], c[1], c[2], 255]
        })
        .collect()
}

fn labels_from_bits(bits: u32) -> LabelVector {
    let idx: Vec<usize> = (1..CLASSES).filter(|c| bits & (1 << c) != 0).collect();
    LabelVector::from_indices(CLASSES, &idx).expect("indices are in range")
}

#[wasm_bindgen]
pub struct Scene {
    image: ImageRecord,
    truth: Mask,
    probs: ScoreMap,
    last_iou: f64,
}

#[wasm_bindgen]
impl Scene {
    /// A new synthetic scene. `noise` lies in [0, 1].
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise: f64, clutter: bool) -> Scene {
        let spec = SynthSpec {
            num_images: 1,
            canvas: 96,
            noise_level: noise.clamp(0.0, 1.0),
            clutter,
            rng_seed: seed as u64,
        };
        let (image, truth) = render_target(&spec, 0);
        let cells = cell_logits(&image);
        let probs = upsample_cells(&cells, image.height, image.width, image.height, image.width);
        Scene { image, truth, probs, last_iou: f64::NAN }
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.image.pixels.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        to_rgba(&self.truth)
    }

    /// Bit `c` set for every foreground class present in the ground truth.
    pub fn true_label_bits(&self) -> u32 {
        self.truth.classes_present().iter().filter(|&&c| c != 0 && c != IGNORE).map(|&c| 1 << c).sum()
    }

    /// Argmax restricted to background plus the classes in `label_bits` (bit `c` = class `c`).
    pub fn constrained(&mut self, label_bits: u32) -> Vec<u8> {
        let mask = constrained_argmax(&self.probs, &labels_from_bits(label_bits)).expect("probabilities");
        self.score(&mask);
        to_rgba(&mask)
    }

    /// Dense-CRF refinement followed by the constrained argmax.
    pub fn refine(&mut self, label_bits: u32, iterations: usize, smooth_weight: f64, bilateral_weight: f64, sigma_xy: f64, sigma_rgb: f64) -> Vec<u8> {
        let settings = CrfSettings {
            iterations,
            gaussian_weight: smooth_weight,
            gaussian_sigma_xy: 3.0,
            bilateral_weight,
            bilateral_sigma_xy: sigma_xy,
            bilateral_sigma_rgb: sigma_rgb,
        };
        let probs = match crf_refine(&self.image, &self.probs, &settings) {
            Ok(p) => p,
            Err(_) => self.probs.clone(),
        };
        let mask = constrained_argmax(&probs, &labels_from_bits(label_bits)).expect("probabilities");
        self.score(&mask);
        to_rgba(&mask)
    }

    /// Mean IoU of the most recent prediction against the ground truth.
    pub fn last_iou(&self) -> f64 {
        self.last_iou
    }
}

impl Scene {
    fn score(&mut self, pred: &Mask) {
        let mut cm = ConfusionMatrix::new(CLASSES);
        accumulate(&mut cm, &self.truth, pred).expect("same shape");
        self.last_iou = mean_iou(&cm).unwrap_or(f64::NAN);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes_in(rgba: &[u8]) -> Vec<usize> {
        let mut seen: Vec<usize> = rgba
            .chunks_exact(4)
            .map(|p| LABEL_COLOURS.iter().position(|c| c[..] == p[..3]).unwrap())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    #[test]
    fn constraint_never_predicts_unlisted_classes() {
        for seed in 0..12 {
            let mut s = Scene::new(seed, 0.1, true);
            let bits = s.true_label_bits();
            let out = s.constrained(bits);
            for c in classes_in(&out) {
                assert!(c == 0 || bits & (1 << c) != 0, "seed {seed}: class {c}");
            }
            assert_eq!(out.len(), 96 * 96 * 4);
        }
    }

    #[test]
    fn constraint_helps_on_cluttered_scenes() {
        let (mut free, mut constrained) = (0.0, 0.0);
        for seed in 0..12 {
            let mut s = Scene::new(seed, 0.1, true);
            s.constrained(0b1110);
            free += s.last_iou();
            s.constrained(s.true_label_bits());
            constrained += s.last_iou();
        }
        assert!(constrained > free, "{constrained} vs {free}");
    }

    #[test]
    fn crf_with_zero_iterations_matches_plain_argmax() {
        let mut s = Scene::new(5, 0.1, true);
        let plain = s.constrained(0b1110);
        let refined = s.refine(0b1110, 0, 3.0, 5.0, 20.0, 10.0);
        assert_eq!(plain, refined);
        s.refine(s.true_label_bits(), 5, 3.0, 5.0, 20.0, 10.0);
        assert!((0.0..=1.0).contains(&s.last_iou()));
    }

    #[test]
    fn image_buffers_have_rgba_layout() {
        let s = Scene::new(1, 0.0, false);
        assert_eq!(s.image_rgba().len(), s.width() * s.height() * 4);
        assert_eq!(s.truth_rgba().len(), s.width() * s.height() * 4);
        assert_ne!(s.true_label_bits(), 0);
    }
}
