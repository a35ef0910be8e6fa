use crate::error::{Result, WssError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSpace {
    Logits,
    Probabilities,
}

/// Dense per-pixel, per-class scores. Layout is pixel-major: `data[(y * width + x) * classes + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
    pub space: ScoreSpace,
}

impl ScoreMap {
    pub fn zeros(height: usize, width: usize, classes: usize, space: ScoreSpace) -> Self {
        Self {
            height,
            width,
            classes,
            data: vec![0.0; height * width * classes],
            space,
        }
    }

    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>, space: ScoreSpace) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(WssError::shape(format!(
                "score map {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
            space,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.classes;
        &self.data[o..o + self.classes]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.classes;
        &mut self.data[o..o + self.classes]
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Per-pixel softmax of logits.
    pub fn softmax(&self) -> Self {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(self.classes) {
            softmax_in_place(px);
        }
        out.space = ScoreSpace::Probabilities;
        out
    }

    /// Rescales each pixel to sum to one.
    pub fn renormalize(&mut self) {
        for px in self.data.chunks_exact_mut(self.classes) {
            let s: f64 = px.iter().sum();
            if s > 0.0 {
                px.iter_mut().for_each(|v| *v /= s);
            }
        }
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.data.chunks_exact(self.classes).map(argmax_first).collect()
    }

    /// Checks the probability-space invariant.
    pub fn is_distribution(&self, tol: f64) -> bool {
        self.data.chunks_exact(self.classes).all(|px| {
            px.iter().all(|&v| v >= 0.0) && (px.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

pub fn softmax_in_place(px: &mut [f64]) {
    let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in px.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in px.iter_mut() {
        *v /= sum;
    }
}

pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
