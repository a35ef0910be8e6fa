use log::warn;

use crate::data::{ImageRecord, ScoreMap, ScoreSpace};
use crate::error::{Result, WssError};
use crate::model::{forward_segmentation, NetworkParams, MIN_INPUT, OUTPUT_STRIDE};

/// Bilinearly samples a stride-8 map (cell `i` anchored on pixel `8 i` of a `scaled_h x scaled_w`
/// input) at every pixel of an `out_h x out_w` image.
pub fn upsample_cells(cells: &ScoreMap, scaled_h: usize, scaled_w: usize, out_h: usize, out_w: usize) -> ScoreMap {
    let c = cells.classes;
    let mut out = ScoreMap::zeros(out_h, out_w, c, cells.space);
    let stride = OUTPUT_STRIDE as f64;
    let coord = |dst: usize, scaled: usize, out_len: usize, cells_len: usize| {
        let s = (dst as f64 + 0.5) * scaled as f64 / out_len as f64 - 0.5;
        let cy = (s / stride).clamp(0.0, (cells_len - 1) as f64);
        let i0 = cy.floor() as usize;
        let i1 = (i0 + 1).min(cells_len - 1);
        (i0, i1, cy - i0 as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, scaled_h, out_h, cells.height);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, scaled_w, out_w, cells.width);
            let (a, b, cc, d) = (cells.at(y0, x0), cells.at(y0, x1), cells.at(y1, x0), cells.at(y1, x1));
            let dst = out.at_mut(y, x);
            for j in 0..c {
                let top = a[j] * (1.0 - fx) + b[j] * fx;
                let bottom = cc[j] * (1.0 - fx) + d[j] * fx;
                dst[j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn scaled_size(image: &ImageRecord, s: f64) -> (usize, usize) {
    if s == 1.0 {
        return (image.height, image.width);
    }
    (
        ((image.height as f64 * s).round() as usize).max(1),
        ((image.width as f64 * s).round() as usize).max(1),
    )
}

/// Full-resolution class probabilities averaged over input scales.
pub fn multiscale_probs(image: &ImageRecord, params: &NetworkParams, scales: &[f64]) -> Result<ScoreMap> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(WssError::invalid("scales must be nonempty and positive"));
    }
    let mut acc: Option<ScoreMap> = None;
    let mut used = 0usize;
    for &s in scales {
        let (h, w) = scaled_size(image, s);
        if h < MIN_INPUT || w < MIN_INPUT {
            warn!("skipping scale {s}: {h}x{w} is below the network minimum");
            continue;
        }
        let scaled = if (h, w) == (image.height, image.width) {
            image.clone()
        } else {
            image.resize_bilinear(h, w)
        };
        let probs = forward_segmentation(&scaled, params)?.softmax();
        let up = upsample_cells(&probs, h, w, image.height, image.width);
        match acc.as_mut() {
            None => acc = Some(up),
            Some(a) => a.data.iter_mut().zip(&up.data).for_each(|(x, y)| *x += y),
        }
        used += 1;
    }
    let mut out = acc.ok_or_else(|| WssError::invalid("every inference scale is below the network minimum"))?;
    let inv = used as f64;
    out.data.iter_mut().for_each(|v| *v /= inv);
    out.renormalize();
    out.space = ScoreSpace::Probabilities;
    Ok(out)
}
