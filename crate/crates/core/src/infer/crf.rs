//! Fully connected CRF with Gaussian edge potentials and Potts compatibility, solved by
//! mean-field iteration. Message passing uses the permutohedral lattice; each kernel is
//! normalized so that it averages rather than sums over neighbours.

use super::lattice::Lattice;
use crate::data::{ImageRecord, ScoreMap, ScoreSpace};
use crate::error::{Result, WssError};

pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfSettings {
    pub iterations: usize,
    pub gaussian_weight: f64,
    pub gaussian_sigma_xy: f64,
    pub bilateral_weight: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_rgb: f64,
}

impl Default for CrfSettings {
    fn default() -> Self {
        Self {
            iterations: 10,
            gaussian_weight: 3.0,
            gaussian_sigma_xy: 3.0,
            bilateral_weight: 5.0,
            bilateral_sigma_xy: 50.0,
            bilateral_sigma_rgb: 10.0,
        }
    }
}

impl CrfSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64, sigmas: &[f64]| w >= 0.0 && sigmas.iter().all(|&s| s >= 0.0 && (w == 0.0 || s > 0.0));
        if !ok(self.gaussian_weight, &[self.gaussian_sigma_xy])
            || !ok(self.bilateral_weight, &[self.bilateral_sigma_xy, self.bilateral_sigma_rgb])
        {
            return Err(WssError::invalid(
                "CRF weights must be >= 0 and sigmas > 0 wherever their weight is positive",
            ));
        }
        Ok(())
    }

    fn has_pairwise(&self) -> bool {
        self.gaussian_weight > 0.0 || self.bilateral_weight > 0.0
    }
}

struct Kernel {
    weight: f64,
    lattice: Lattice,
    norm: Vec<f64>,
}

impl Kernel {
    fn new(weight: f64, features: Vec<f64>, d: usize) -> Self {
        let lattice = Lattice::new(&features, d);
        let ones = vec![1.0; lattice.points()];
        let norm = lattice.filter(&ones, 1).iter().map(|v| 1.0 / (v + 1e-20)).collect();
        Self { weight, lattice, norm }
    }
}

pub fn crf_refine(image: &ImageRecord, probs: &ScoreMap, settings: &CrfSettings) -> Result<ScoreMap> {
    settings.validate()?;
    if probs.space != ScoreSpace::Probabilities {
        return Err(WssError::invalid("CRF refinement expects probabilities"));
    }
    if image.height != probs.height || image.width != probs.width {
        return Err(WssError::shape(format!(
            "image {}x{} vs probabilities {}x{}",
            image.height, image.width, probs.height, probs.width
        )));
    }
    if settings.iterations == 0 {
        return Ok(probs.clone());
    }
    let c = probs.classes;
    let n = probs.pixels();
    let log_unary: Vec<f64> = probs.data.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
    let mut q = probs.clone();
    for px in q.data.chunks_exact_mut(c) {
        px.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
    }
    q.renormalize();
    if !settings.has_pairwise() {
        return Ok(q);
    }

    let mut kernels = Vec::new();
    if settings.gaussian_weight > 0.0 {
        let s = settings.gaussian_sigma_xy;
        let mut f = Vec::with_capacity(n * 2);
        for y in 0..image.height {
            for x in 0..image.width {
                f.extend_from_slice(&[x as f64 / s, y as f64 / s]);
            }
        }
        kernels.push(Kernel::new(settings.gaussian_weight, f, 2));
    }
    if settings.bilateral_weight > 0.0 {
        let (sxy, srgb) = (settings.bilateral_sigma_xy, settings.bilateral_sigma_rgb);
        let mut f = Vec::with_capacity(n * 5);
        for y in 0..image.height {
            for x in 0..image.width {
                let [r, g, b] = image.rgb(y, x);
                f.extend_from_slice(&[
                    x as f64 / sxy,
                    y as f64 / sxy,
                    r as f64 / srgb,
                    g as f64 / srgb,
                    b as f64 / srgb,
                ]);
            }
        }
        kernels.push(Kernel::new(settings.bilateral_weight, f, 5));
    }

    let mut energy = vec![0f64; n * c];
    for _ in 0..settings.iterations {
        energy.copy_from_slice(&log_unary);
        for k in &kernels {
            let msg = k.lattice.filter(&q.data, c);
            for i in 0..n {
                let s = k.weight * k.norm[i];
                for l in 0..c {
                    energy[i * c + l] += s * msg[i * c + l];
                }
            }
        }
        q.data.copy_from_slice(&energy);
        for px in q.data.chunks_exact_mut(c) {
            crate::data::score::softmax_in_place(px);
        }
    }
    Ok(q)
}
