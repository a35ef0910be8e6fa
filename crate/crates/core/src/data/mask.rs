use std::path::Path;

use super::taxonomy::{ClassTaxonomy, BACKGROUND};
use crate::error::{Result, WssError};

/// Pixels carrying this value are excluded from every loss and from IoU.
pub const IGNORE: u8 = 255;

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(WssError::shape(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(WssError::shape(format!(
                "mask is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Every non-IGNORE label must be a valid class index.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            Some(v) => Err(WssError::invalid(format!(
                "mask label {v} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Mask::filled(height, width, 0);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Samples the pixel under each stride-`stride` output cell (cell `i` sits on pixel `stride*i`).
    pub fn downsample_to_stride(&self, out_h: usize, out_w: usize, stride: usize) -> Self {
        let mut out = Mask::filled(out_h, out_w, IGNORE);
        for y in 0..out_h {
            let sy = (y * stride).min(self.height - 1);
            for x in 0..out_w {
                let sx = (x * stride).min(self.width - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(y, x));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| WssError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Self::new(h as usize, w as usize, luma.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.labels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|e| WssError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Sorted distinct non-IGNORE labels.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.labels {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// Image-level class presence. Background is always present.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    present: Vec<bool>,
}

impl LabelVector {
    /// Only background set.
    pub fn background_only(classes: usize) -> Self {
        let mut present = vec![false; classes];
        present[BACKGROUND] = true;
        Self { present }
    }

    pub fn all(classes: usize) -> Self {
        Self {
            present: vec![true; classes],
        }
    }

    /// Background plus the listed classes.
    pub fn from_indices(classes: usize, indices: &[usize]) -> Result<Self> {
        let mut v = Self::background_only(classes);
        for &i in indices {
            if i >= classes {
                return Err(WssError::invalid(format!("class index {i} out of range")));
            }
            v.present[i] = true;
        }
        Ok(v)
    }

    pub fn from_names<S: AsRef<str>>(taxonomy: &ClassTaxonomy, names: &[S]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| taxonomy.index_of(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(taxonomy.count(), &idx)
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.present.get(class).copied().unwrap_or(false)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.present
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| self.present[i]).collect()
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        self.indices().into_iter().filter(|&i| i != BACKGROUND).collect()
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground_indices().is_empty()
    }

    pub fn is_subset_of(&self, other: &LabelVector) -> bool {
        self.present
            .iter()
            .enumerate()
            .all(|(i, &p)| !p || other.contains(i))
    }

    /// 0/1 targets for the multi-label loss.
    pub fn targets(&self) -> Vec<f64> {
        self.present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }
}

pub fn label_vector_from_mask(mask: &Mask, taxonomy: &ClassTaxonomy) -> LabelVector {
    let c = taxonomy.count();
    let mut v = LabelVector::background_only(c);
    for class in mask.classes_present() {
        if (class as usize) < c {
            v.present[class as usize] = true;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_background_mask() {
        let t = ClassTaxonomy::pascal_voc();
        let v = label_vector_from_mask(&Mask::filled(4, 4, 0), &t);
        assert_eq!(v.indices(), vec![0]);
    }

    #[test]
    fn mixed_mask() {
        let t = ClassTaxonomy::pascal_voc();
        let m = Mask::new(2, 3, vec![0, 3, 7, 7, IGNORE, 0]).unwrap();
        assert_eq!(label_vector_from_mask(&m, &t).indices(), vec![0, 3, 7]);
    }

    #[test]
    fn all_ignore_mask_keeps_background() {
        let t = ClassTaxonomy::shapes();
        let v = label_vector_from_mask(&Mask::filled(3, 3, IGNORE), &t);
        assert_eq!(v.indices(), vec![0]);
    }

    #[test]
    fn validate_range() {
        let m = Mask::new(1, 3, vec![0, 4, IGNORE]).unwrap();
        assert!(m.validate(4).is_err());
        assert!(m.validate(5).is_ok());
    }

    #[test]
    fn stride_downsample_picks_cell_anchor() {
        let mut m = Mask::filled(17, 9, 0);
        m.set(8, 8, 2);
        m.set(16, 0, 1);
        let d = m.downsample_to_stride(3, 2, 8);
        assert_eq!(d.get(1, 1), 2);
        assert_eq!(d.get(2, 0), 1);
    }

    #[test]
    fn png_roundtrip_keeps_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(2, 2, vec![0, 1, 20, IGNORE]).unwrap();
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load(&p).unwrap(), m);
    }

    #[test]
    fn subset_relation() {
        let a = LabelVector::from_indices(5, &[2]).unwrap();
        let b = LabelVector::from_indices(5, &[2, 4]).unwrap();
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
    }
}
