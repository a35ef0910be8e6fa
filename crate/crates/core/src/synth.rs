//! Deterministic synthetic shapes benchmark.
//!
//! Three foreground classes (disk, square, triangle) on textured backgrounds. "Retrieved"
//! images hold one large instance of their group's class on a plain gradient; "target" images
//! hold 1-3 smaller shapes of distinct classes plus, optionally, striped distractor blobs painted
//! in the palettes of classes absent from the image, so a label-constrained prediction can reject
//! them. Shapes are drawn in order, so later shapes occlude earlier ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    label_vector_from_mask, ClassTaxonomy, DatasetManifest, ImageRecord, ManifestEntry, Mask, Split,
};
use crate::error::{Result, WssError};
use crate::ingest::ClassGroup;

pub const DISK: usize = 1;
pub const SQUARE: usize = 2;
pub const TRIANGLE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_images: usize,
    pub canvas: usize,
    pub noise_level: f64,
    pub clutter: bool,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_images: 100,
            canvas: 96,
            noise_level: 0.1,
            clutter: true,
            rng_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(WssError::invalid("num_images must be at least 1"));
        }
        if self.canvas < 32 {
            return Err(WssError::invalid("canvas must be at least 32 pixels"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(WssError::invalid("noise_level must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Reads `key = value` lines with keys `num_images`, `canvas`, `noise_level`, `clutter`, `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| WssError::invalid(format!("bad spec line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || WssError::invalid(format!("bad value `{v}` for `{k}`"));
            match k {
                "num_images" => s.num_images = v.parse().map_err(|_| bad())?,
                "canvas" => s.canvas = v.parse().map_err(|_| bad())?,
                "noise_level" => s.noise_level = v.parse().map_err(|_| bad())?,
                "clutter" => s.clutter = v.parse().map_err(|_| bad())?,
                "seed" => s.rng_seed = v.parse().map_err(|_| bad())?,
                other => return Err(WssError::UnknownConfigKey(other.to_string())),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Square { cx: f64, cy: f64, r: f64 },
    Triangle { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn new(class: usize, cx: f64, cy: f64, r: f64) -> Self {
        match class {
            DISK => Shape::Disk { cx, cy, r },
            SQUARE => Shape::Square { cx, cy, r },
            _ => Shape::Triangle { cx, cy, r },
        }
    }

    /// Whether the pixel centre at (x + 0.5, y + 0.5) lies inside.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, r } => (px - cx).abs() <= r && (py - cy).abs() <= r,
            Shape::Triangle { cx, cy, r } => {
                // apex up, base at cy + r
                let (ax, ay) = (cx, cy - r);
                let (bx, by) = (cx - r, cy + r);
                let (qx, qy) = (cx + r, cy + r);
                let s = |x1: f64, y1: f64, x2: f64, y2: f64| (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2);
                let d1 = s(ax, ay, bx, by);
                let d2 = s(bx, by, qx, qy);
                let d3 = s(qx, qy, ax, ay);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn derived_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    // splitmix64 over the combined key
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn palette_color(class: usize, rng: &mut impl Rng) -> [u8; 3] {
    let j = |rng: &mut dyn rand::RngCore, lo: u8, hi: u8| rng.gen_range(lo..=hi);
    match class {
        DISK => [j(rng, 190, 240), j(rng, 40, 90), j(rng, 40, 90)],
        SQUARE => [j(rng, 40, 90), j(rng, 170, 220), j(rng, 50, 100)],
        _ => [j(rng, 50, 100), j(rng, 60, 110), j(rng, 190, 240)],
    }
}

fn paint_background(img: &mut ImageRecord, rng: &mut impl Rng, textured: bool) {
    let base: [f64; 3] = [rng.gen_range(90.0..170.0), rng.gen_range(90.0..170.0), rng.gen_range(90.0..170.0)];
    let grad: [f64; 2] = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
    let period = rng.gen_range(6.0..14.0);
    let amp = if textured { rng.gen_range(10.0..25.0) } else { 0.0 };
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sa, ca) = angle.sin_cos();
    for y in 0..img.height {
        for x in 0..img.width {
            let t = (x as f64 * ca + y as f64 * sa) / period * std::f64::consts::TAU;
            let shade = grad[0] * x as f64 + grad[1] * y as f64 + amp * t.sin();
            let rgb = base.map(|b| (b + shade).clamp(0.0, 255.0) as u8);
            img.set_rgb(y, x, rgb);
        }
    }
}

/// Striped elliptical blob in the colour of one of `absent` (grey when empty); never part of any mask.
fn paint_distractor(img: &mut ImageRecord, absent: &[usize], rng: &mut impl Rng) {
    let color = match absent.choose(rng) {
        Some(&class) => palette_color(class, rng),
        None => {
            let g = rng.gen_range(60..200);
            [g, g, g]
        }
    };
    let n = img.width as f64;
    let (cx, cy) = (rng.gen_range(0.1..0.9) * n, rng.gen_range(0.1..0.9) * n);
    let (rx, ry) = (rng.gen_range(0.06..0.14) * n, rng.gen_range(0.03..0.08) * n);
    let stripe = rng.gen_range(2..4);
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            if dx * dx + dy * dy <= 1.0 && (x / stripe) % 2 == 0 {
                img.set_rgb(y, x, color);
            }
        }
    }
}

fn add_noise(img: &mut ImageRecord, level: f64, rng: &mut impl Rng) {
    if level <= 0.0 {
        return;
    }
    let amp = level * 60.0;
    for v in img.pixels.iter_mut() {
        *v = (*v as f64 + rng.gen_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8;
    }
}

fn draw_shape(img: &mut ImageRecord, mask: &mut Mask, shape: &Shape, class: usize, color: [u8; 3]) {
    for y in 0..img.height {
        for x in 0..img.width {
            if shape.contains(y, x) {
                img.set_rgb(y, x, color);
                mask.set(y, x, class as u8);
            }
        }
    }
}

/// One retrieved image of `class` with its binary (0/1) ground truth.
fn render_retrieved(spec: &SynthSpec, class: usize, index: usize) -> (ImageRecord, Mask) {
    let mut rng = derived_rng(spec.rng_seed, 1, index);
    let n = spec.canvas;
    let mut img = ImageRecord::filled(format!("{}_{index:05}", class_slug(class)), n, n, [0, 0, 0]);
    paint_background(&mut img, &mut rng, false);
    let nf = n as f64;
    let r = radius_for_fraction(class, rng.gen_range(0.1..0.48)) * nf;
    let cx = rng.gen_range(r..=nf - r);
    let cy = rng.gen_range(r..=nf - r);
    let mut mask = Mask::filled(n, n, 0);
    let color = palette_color(class, &mut rng);
    draw_shape(&mut img, &mut mask, &Shape::new(class, cx, cy, r), 1, color);
    add_noise(&mut img, spec.noise_level, &mut rng);
    (img, mask)
}

/// Size parameter (as a fraction of the canvas side) giving roughly `fraction` of the canvas area.
fn radius_for_fraction(class: usize, fraction: f64) -> f64 {
    match class {
        DISK => (fraction / std::f64::consts::PI).sqrt(),
        SQUARE => (fraction / 4.0).sqrt(),
        _ => (fraction / 2.0).sqrt(),
    }
}

fn class_slug(class: usize) -> &'static str {
    match class {
        DISK => "disk",
        SQUARE => "square",
        _ => "triangle",
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGroups {
    pub groups: Vec<ClassGroup>,
    /// Binary (0 = background, 1 = foreground) ground truth keyed by image id.
    pub sidecars: BTreeMap<String, Mask>,
}

/// `num_images` retrieved images split round-robin over the three classes.
pub fn generate_retrieved_groups(spec: &SynthSpec) -> Result<SyntheticGroups> {
    spec.validate()?;
    let mut groups: Vec<ClassGroup> = (1..=3).map(ClassGroup::new).collect();
    let mut sidecars = BTreeMap::new();
    for k in 0..spec.num_images {
        let class = 1 + k % 3;
        let (img, mask) = render_retrieved(spec, class, k);
        sidecars.insert(img.id.clone(), mask);
        groups[class - 1].records.push(img.retrieved(class)?);
    }
    groups.retain(|g| !g.records.is_empty());
    Ok(SyntheticGroups { groups, sidecars })
}

/// Writes `<dir>/<class>/<id>.png`, the sidecar `<id>.mask.png` (0/255) and a `<dir>/groups.tsv`
/// manifest labelling each image with its group class.
pub fn write_retrieved(groups: &SyntheticGroups, dir: &Path, taxonomy: &ClassTaxonomy) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(Split::Train);
    for g in &groups.groups {
        let sub = dir.join(taxonomy.name(g.class_index));
        fs::create_dir_all(&sub).map_err(|e| WssError::io(&sub, e))?;
        for r in &g.records {
            r.save_png(&sub.join(format!("{}.png", r.id)))?;
            let bin = &groups.sidecars[&r.id];
            let out = Mask::new(bin.height, bin.width, bin.labels.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect())?;
            out.save_png(&sub.join(format!("{}.mask.png", r.id)))?;
            manifest
                .entries
                .push(ManifestEntry::new(sub.join(format!("{}.png", r.id))).with_labels(vec![g.class_index]));
        }
    }
    crate::data::write_manifest(&manifest, &dir.join("groups.tsv"), taxonomy)?;
    Ok(manifest)
}

/// One target image with 1-3 shapes of distinct classes and its full class mask.
pub fn render_target(spec: &SynthSpec, index: usize) -> (ImageRecord, Mask) {
    let mut rng = derived_rng(spec.rng_seed, 2, index);
    let n = spec.canvas;
    let nf = n as f64;
    let mut img = ImageRecord::filled(format!("target_{index:05}"), n, n, [0, 0, 0]);
    paint_background(&mut img, &mut rng, true);
    let count = rng.gen_range(1..=3);
    let mut classes = [DISK, SQUARE, TRIANGLE];
    classes.shuffle(&mut rng);
    if spec.clutter {
        for _ in 0..rng.gen_range(1..=3) {
            paint_distractor(&mut img, &classes[count..], &mut rng);
        }
    }
    let mut mask = Mask::filled(n, n, 0);
    for &class in &classes[..count] {
        let r = rng.gen_range(0.10..0.22) * nf;
        let cx = rng.gen_range(r..nf - r);
        let cy = rng.gen_range(r..nf - r);
        let color = palette_color(class, &mut rng);
        draw_shape(&mut img, &mut mask, &Shape::new(class, cx, cy, r), class, color);
    }
    add_noise(&mut img, spec.noise_level, &mut rng);
    (img, mask)
}

#[derive(Debug, Clone)]
pub struct TargetSet {
    /// Images with image-level labels only (what training may see).
    pub labelled: DatasetManifest,
    /// The same images with their withheld pixel masks, for evaluation.
    pub ground_truth: DatasetManifest,
}

/// Writes `images/` and `gt/` under `dir` plus `labels.tsv` and `gt.tsv`.
pub fn generate_target_set(spec: &SynthSpec, dir: &Path, split: Split) -> Result<TargetSet> {
    spec.validate()?;
    let taxonomy = ClassTaxonomy::shapes();
    let img_dir = dir.join("images");
    let gt_dir = dir.join("gt");
    for d in [&img_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|e| WssError::io(d, e))?;
    }
    let mut labelled = DatasetManifest::new(split);
    let mut ground_truth = DatasetManifest::new(split);
    for k in 0..spec.num_images {
        let (img, mask) = render_target(spec, k);
        let ip = img_dir.join(format!("{}.png", img.id));
        let mp = gt_dir.join(format!("{}.png", img.id));
        img.save_png(&ip)?;
        mask.save_png(&mp)?;
        let labels = label_vector_from_mask(&mask, &taxonomy).foreground_indices();
        labelled.entries.push(ManifestEntry::new(&ip).with_labels(labels.clone()));
        ground_truth.entries.push(ManifestEntry::new(&ip).with_mask(&mp).with_labels(labels));
    }
    crate::data::write_manifest(&labelled, &dir.join("labels.tsv"), &taxonomy)?;
    crate::data::write_manifest(&ground_truth, &dir.join("gt.tsv"), &taxonomy)?;
    Ok(TargetSet { labelled, ground_truth })
}
