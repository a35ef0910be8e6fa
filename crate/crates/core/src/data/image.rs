use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::{Mask, IGNORE};
use crate::error::{Result, WssError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageSource {
    Retrieved,
    Target,
}

/// An RGB image with identity and provenance. Pixels are row-major, interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub source: ImageSource,
    pub query_class: Option<usize>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(WssError::invalid("image dimensions must be at least 1x1"));
        }
        if pixels.len() != height * width * 3 {
            return Err(WssError::shape(format!(
                "expected {} pixel bytes for {height}x{width}, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
            source: ImageSource::Target,
            query_class: None,
        })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(id, height, width, pixels).expect("dimensions are consistent")
    }

    /// Marks the record as a web-retrieved image for the given query class.
    pub fn retrieved(mut self, query_class: usize) -> Result<Self> {
        if query_class == super::taxonomy::BACKGROUND {
            return Err(WssError::invalid("retrieved images cannot be queried by background"));
        }
        self.source = ImageSource::Retrieved;
        self.query_class = Some(query_class);
        Ok(self)
    }

    #[inline]
    pub fn rgb(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn max_dim(&self) -> usize {
        self.height.max(self.width)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| WssError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(id, h as usize, w as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| WssError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn channel_mean(&self) -> [f64; 3] {
        let mut sum = [0f64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        sum.map(|s| s / n)
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_rgb(y, self.width - 1 - x, self.rgb(y, x));
            }
        }
        out
    }

    /// Bilinear resample with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let mut out = self.clone();
        out.height = height;
        out.width = width;
        out.pixels = vec![0; height * width * 3];
        if height == self.height && width == self.width {
            out.pixels.copy_from_slice(&self.pixels);
            return out;
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let (y0, y1, fy) = source_coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = source_coord(x, sx, self.width);
                let (a, b, c, d) = (self.rgb(y0, x0), self.rgb(y0, x1), self.rgb(y1, x0), self.rgb(y1, x1));
                let mut rgb = [0u8; 3];
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                    let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                    rgb[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
                }
                out.set_rgb(y, x, rgb);
            }
        }
        out
    }
}

pub(crate) fn source_coord(dst: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Target size that caps the longer side at `max_dim`, preserving aspect ratio.
pub fn capped_size(height: usize, width: usize, max_dim: usize) -> (usize, usize) {
    let longest = height.max(width);
    if longest <= max_dim {
        return (height, width);
    }
    let scale = max_dim as f64 / longest as f64;
    let fit = |d: usize| {
        if d == longest {
            max_dim
        } else {
            ((d as f64 * scale).round() as usize).max(1)
        }
    };
    (fit(height), fit(width))
}

/// Downscales so the longer side is at most `max_dim`. Never upscales.
/// The image is resampled bilinearly and the mask by nearest neighbour.
pub fn resize_max_dim(
    image: &ImageRecord,
    max_dim: usize,
    mask: Option<&Mask>,
) -> Result<(ImageRecord, Option<Mask>)> {
    if max_dim == 0 {
        return Err(WssError::invalid("max_dim must be at least 1"));
    }
    if let Some(m) = mask {
        m.check_shape(image.height, image.width)?;
    }
    let (h, w) = capped_size(image.height, image.width, max_dim);
    let img = image.resize_bilinear(h, w);
    let mask = mask.map(|m| m.resize_nearest(h, w));
    Ok((img, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOffset {
    pub y: usize,
    pub x: usize,
}

/// Random `crop`x`crop` window of an image/mask pair. Inputs smaller than the crop
/// are padded at the bottom and right with `pad` (image) and IGNORE (mask) first.
pub fn random_crop_pair(
    image: &ImageRecord,
    mask: &Mask,
    crop: usize,
    rng_seed: u64,
    pad: [u8; 3],
) -> Result<(ImageRecord, Mask, CropOffset)> {
    if crop == 0 {
        return Err(WssError::invalid("crop must be at least 1"));
    }
    mask.check_shape(image.height, image.width)?;
    let ph = image.height.max(crop);
    let pw = image.width.max(crop);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let oy = rng.gen_range(0..=ph - crop);
    let ox = rng.gen_range(0..=pw - crop);

    let mut out = ImageRecord::filled(image.id.clone(), crop, crop, pad);
    out.source = image.source;
    out.query_class = image.query_class;
    let mut out_mask = Mask::filled(crop, crop, IGNORE);
    for y in 0..crop {
        let sy = oy + y;
        if sy >= image.height {
            continue;
        }
        for x in 0..crop {
            let sx = ox + x;
            if sx >= image.width {
                continue;
            }
            out.set_rgb(y, x, image.rgb(sy, sx));
            out_mask.set(y, x, mask.get(sy, sx));
        }
    }
    Ok((out, out_mask, CropOffset { y: oy, x: ox }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageRecord {
        let mut img = ImageRecord::filled("g", h, w, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.set_rgb(y, x, [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn halving_to_340() {
        let (img, _) = resize_max_dim(&gradient(680, 340), 340, None).unwrap();
        assert_eq!((img.height, img.width), (340, 170));
    }

    #[test]
    fn no_upscaling() {
        let src = gradient(300, 200);
        let (img, _) = resize_max_dim(&src, 340, None).unwrap();
        assert_eq!(img, src);
    }

    #[test]
    fn rounding_of_short_side() {
        // 375 * 340 / 500 = 255 exactly
        assert_eq!(375 * 340 % 500, 0);
        let (img, _) = resize_max_dim(&gradient(500, 375), 340, None).unwrap();
        assert_eq!((img.height, img.width), (340, 255));
        assert_eq!(capped_size(3, 1000, 10), (1, 10));
    }

    #[test]
    fn degenerate_pixel_passes_through() {
        let src = ImageRecord::filled("p", 1, 1, [9, 8, 7]);
        let (img, _) = resize_max_dim(&src, 1, None).unwrap();
        assert_eq!(img, src);
    }

    #[test]
    fn mask_follows_nearest_neighbour() {
        let src = gradient(40, 20);
        let mut mask = Mask::filled(40, 20, 0);
        for y in 20..40 {
            for x in 0..20 {
                mask.set(y, x, 3);
            }
        }
        let (img, m) = resize_max_dim(&src, 10, Some(&mask)).unwrap();
        let m = m.unwrap();
        assert_eq!((img.height, img.width), (10, 5));
        assert_eq!((m.height, m.width), (10, 5));
        assert!(m.labels.iter().all(|&v| v == 0 || v == 3));
        assert_eq!(m.get(0, 0), 0);
        assert_eq!(m.get(9, 4), 3);
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = gradient(32, 32);
        let mask = Mask::filled(32, 32, 1);
        let (c, m, off) = random_crop_pair(&img, &mask, 32, 5, [0, 0, 0]).unwrap();
        assert_eq!(off, CropOffset { y: 0, x: 0 });
        assert_eq!(c.pixels, img.pixels);
        assert_eq!(m, mask);
    }

    #[test]
    fn short_input_is_padded_with_ignore() {
        let img = gradient(300, 400);
        let mask = Mask::filled(300, 400, 2);
        let (c, m, off) = random_crop_pair(&img, &mask, 320, 11, [1, 2, 3]).unwrap();
        assert_eq!(off.y, 0);
        assert_eq!((c.height, c.width), (320, 320));
        for y in 300..320 {
            for x in 0..320 {
                assert_eq!(m.get(y, x), IGNORE);
                assert_eq!(c.rgb(y, x), [1, 2, 3]);
            }
        }
        assert_eq!(m.get(299, 0), 2);
    }

    #[test]
    fn crop_is_seed_deterministic() {
        let img = gradient(480, 480);
        let mask = Mask::filled(480, 480, 0);
        let a = random_crop_pair(&img, &mask, 320, 42, [0; 3]).unwrap();
        let b = random_crop_pair(&img, &mask, 320, 42, [0; 3]).unwrap();
        assert_eq!(a.2, b.2);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn crop_rejects_shape_mismatch() {
        let img = gradient(10, 10);
        let mask = Mask::filled(10, 9, 0);
        assert!(random_crop_pair(&img, &mask, 4, 0, [0; 3]).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = gradient(7, 5);
        img.save_png(&p).unwrap();
        let back = ImageRecord::load(&p).unwrap();
        assert_eq!(back.pixels, img.pixels);
        assert_eq!(back.id, "x");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn resize_is_idempotent(h in 1usize..90, w in 1usize..90, max_dim in 1usize..64) {
                let img = gradient(h, w);
                let (once, _) = resize_max_dim(&img, max_dim, None).unwrap();
                let (twice, _) = resize_max_dim(&once, max_dim, None).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert!(once.max_dim() <= max_dim.max(1));
            }

            #[test]
            fn crop_shape_is_fixed(h in 1usize..60, w in 1usize..60, crop in 1usize..50, seed in any::<u64>()) {
                let img = gradient(h, w);
                let mask = Mask::filled(h, w, 0);
                let (c, m, _) = random_crop_pair(&img, &mask, crop, seed, [0; 3]).unwrap();
                prop_assert_eq!((c.height, c.width), (crop, crop));
                prop_assert_eq!((m.height, m.width), (crop, crop));
            }
        }
    }
}
