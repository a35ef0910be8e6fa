//! Stride-8 dilated segmentation network with an optional multi-label branch.
//!
//! Trunk: six 3x3 conv+ReLU blocks. Block 0 is a stride-2 stem, blocks 1 and 2 downsample by
//! two more, blocks 4 and 5 use dilation 2. A 1x1 classifier produces logits at 1/8 resolution.
//! The multi-label branch forks after block 2: global average pooling followed by a private
//! two-layer head.

use std::collections::BTreeMap;

use super::layers::{conv_backward, conv_forward, ConvGeom};
use super::params::{tensor_rng, NetworkParams, Tensor};
use crate::data::{ImageRecord, ScoreMap, ScoreSpace};
use crate::error::{Result, WssError};

pub const OUTPUT_STRIDE: usize = 8;
pub const MIN_INPUT: usize = 8;
/// Index of the trunk block whose output feeds the multi-label branch.
pub const FORK_BLOCK: usize = 2;
const INPUT_SCALE: f32 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Toy,
    DilatedResnetContract,
}

impl BackboneKind {
    fn tag(self) -> &'static str {
        match self {
            BackboneKind::Toy => "toy",
            BackboneKind::DilatedResnetContract => "dilated-resnet-contract",
        }
    }

    fn widths(self) -> [usize; 6] {
        match self {
            BackboneKind::Toy => [16, 32, 48, 48, 64, 64],
            BackboneKind::DilatedResnetContract => [64, 128, 256, 256, 512, 512],
        }
    }

    fn branch_hidden(self) -> usize {
        match self {
            BackboneKind::Toy => 64,
            BackboneKind::DilatedResnetContract => 512,
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = WssError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "dilated-resnet-contract" => Ok(Self::DilatedResnetContract),
            other => Err(WssError::invalid(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Layer layout decoded from an architecture id such as `toy/c4/dual`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub kind: BackboneKind,
    pub classes: usize,
    pub dual_branch: bool,
    pub blocks: Vec<ConvGeom>,
    pub classifier: ConvGeom,
    pub branch_hidden: usize,
}

impl Architecture {
    pub fn new(kind: BackboneKind, classes: usize, dual_branch: bool) -> Result<Self> {
        if classes < 2 {
            return Err(WssError::invalid("need at least 2 classes"));
        }
        let widths = kind.widths();
        let strides = [2, 2, 2, 1, 1, 1];
        let dilations = [1, 1, 1, 1, 2, 2];
        let mut in_ch = 3;
        let blocks = (0..6)
            .map(|i| {
                let g = ConvGeom {
                    in_ch,
                    out_ch: widths[i],
                    kernel: 3,
                    stride: strides[i],
                    dilation: dilations[i],
                };
                in_ch = widths[i];
                g
            })
            .collect();
        let classifier = ConvGeom {
            in_ch,
            out_ch: classes,
            kernel: 1,
            stride: 1,
            dilation: 1,
        };
        Ok(Self {
            kind,
            classes,
            dual_branch,
            blocks,
            classifier,
            branch_hidden: kind.branch_hidden(),
        })
    }

    pub fn id(&self) -> String {
        format!(
            "{}/c{}/{}",
            self.kind.tag(),
            self.classes,
            if self.dual_branch { "dual" } else { "single" }
        )
    }

    pub fn from_id(id: &str) -> Result<Self> {
        let bad = || WssError::Checkpoint(format!("unrecognized architecture id `{id}`"));
        let parts: Vec<&str> = id.split('/').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let kind: BackboneKind = parts[0].parse().map_err(|_| bad())?;
        let classes: usize = parts[1].strip_prefix('c').and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let dual = match parts[2] {
            "dual" => true,
            "single" => false,
            _ => return Err(bad()),
        };
        Self::new(kind, classes, dual)
    }

    fn fork_channels(&self) -> usize {
        self.blocks[FORK_BLOCK].out_ch
    }

    /// Every parameter tensor name with its shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.weight"), b.weight_shape().to_vec()));
            v.push((format!("block{i}.bias"), vec![b.out_ch]));
        }
        v.push(("classifier.weight".into(), self.classifier.weight_shape().to_vec()));
        v.push(("classifier.bias".into(), vec![self.classes]));
        if self.dual_branch {
            v.push(("branch.fc1.weight".into(), vec![self.branch_hidden, self.fork_channels()]));
            v.push(("branch.fc1.bias".into(), vec![self.branch_hidden]));
            v.push(("branch.fc2.weight".into(), vec![self.classes, self.branch_hidden]));
            v.push(("branch.fc2.bias".into(), vec![self.classes]));
        }
        v
    }
}

/// He-initialized parameters. Each tensor draws from its own seeded stream, so the trunk of a
/// dual-branch network is initialized identically to the single-branch one for the same seed.
pub fn build_backbone(kind: BackboneKind, classes: usize, dual_branch: bool, rng_seed: u64) -> Result<NetworkParams> {
    let arch = Architecture::new(kind, classes, dual_branch)?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in arch.parameter_shapes() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            Tensor::he_normal(&shape, &mut tensor_rng(rng_seed, &name))
        };
        tensors.insert(name, t);
    }
    Ok(NetworkParams {
        architecture_id: arch.id(),
        tensors,
        input_mean: [127.5; 3],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelScores {
    pub p: Vec<f64>,
}

/// Normalized CHW input tensor.
pub fn image_to_input(image: &ImageRecord, mean: [f32; 3]) -> Vec<f32> {
    let hw = image.height * image.width;
    let mut x = vec![0f32; 3 * hw];
    for (i, px) in image.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            x[c * hw + i] = (px[c] as f32 - mean[c]) * INPUT_SCALE;
        }
    }
    x
}

pub fn output_size(height: usize, width: usize) -> (usize, usize) {
    (height.div_ceil(OUTPUT_STRIDE), width.div_ceil(OUTPUT_STRIDE))
}

/// Activations retained for the backward pass.
pub struct Trace {
    sizes: Vec<(usize, usize)>,
    cols: Vec<Vec<f32>>,
    outputs: Vec<Vec<f32>>,
    classifier_in: Vec<f32>,
    pub logits: Vec<f32>,
    pub logit_size: (usize, usize),
    branch: Option<BranchTrace>,
}

struct BranchTrace {
    pooled: Vec<f32>,
    hidden: Vec<f32>,
    p: Vec<f32>,
}

impl Trace {
    pub fn multilabel(&self) -> Option<&[f32]> {
        self.branch.as_ref().map(|b| b.p.as_slice())
    }
}

/// A parameter set bound to its decoded architecture.
pub struct Network<'a> {
    pub arch: Architecture,
    pub params: &'a NetworkParams,
}

impl<'a> Network<'a> {
    pub fn new(params: &'a NetworkParams) -> Result<Self> {
        let arch = Architecture::from_id(&params.architecture_id)?;
        for (name, shape) in arch.parameter_shapes() {
            match params.tensors.get(&name) {
                Some(t) if t.shape == shape => {}
                _ => return Err(WssError::Checkpoint(format!("tensor `{name}` missing or misshapen"))),
            }
        }
        Ok(Self { arch, params })
    }

    fn w(&self, name: &str) -> &[f32] {
        &self.params.tensors[name].data
    }

    /// Runs the trunk (and branch when present), keeping what backward needs.
    pub fn forward_trace(&self, x: &[f32], h: usize, w: usize, with_branch: bool) -> Result<Trace> {
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(WssError::shape(format!(
                "input {h}x{w} is below the {MIN_INPUT}x{MIN_INPUT} minimum"
            )));
        }
        let mut sizes = vec![(h, w)];
        let mut cols = Vec::with_capacity(6);
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(6);
        let mut cur: &[f32] = x;
        let (mut ch, mut cw) = (h, w);
        for (i, g) in self.arch.blocks.iter().enumerate() {
            let (mut out, c) = conv_forward(
                cur,
                ch,
                cw,
                g,
                self.w(&format!("block{i}.weight")),
                self.w(&format!("block{i}.bias")),
            );
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            (ch, cw) = g.out_size(ch, cw);
            sizes.push((ch, cw));
            cols.push(c);
            outputs.push(out);
            cur = outputs.last().unwrap();
        }
        let (logits, classifier_in) = conv_forward(
            cur,
            ch,
            cw,
            &self.arch.classifier,
            self.w("classifier.weight"),
            self.w("classifier.bias"),
        );
        let branch = if with_branch && self.arch.dual_branch {
            Some(self.branch_forward(&outputs[FORK_BLOCK], sizes[FORK_BLOCK + 1]))
        } else {
            None
        };
        Ok(Trace {
            sizes,
            cols,
            outputs,
            classifier_in,
            logits,
            logit_size: (ch, cw),
            branch,
        })
    }

    fn branch_forward(&self, feat: &[f32], (fh, fw): (usize, usize)) -> BranchTrace {
        let fc = self.arch.fork_channels();
        let hw = fh * fw;
        let pooled: Vec<f32> = feat
            .chunks_exact(hw)
            .take(fc)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let hid = self.arch.branch_hidden;
        let w1 = self.w("branch.fc1.weight");
        let b1 = self.w("branch.fc1.bias");
        let hidden: Vec<f32> = (0..hid)
            .map(|j| {
                let s: f32 = w1[j * fc..(j + 1) * fc].iter().zip(&pooled).map(|(a, b)| a * b).sum();
                (s + b1[j]).max(0.0)
            })
            .collect();
        let w2 = self.w("branch.fc2.weight");
        let b2 = self.w("branch.fc2.bias");
        let p = (0..self.arch.classes)
            .map(|j| w2[j * hid..(j + 1) * hid].iter().zip(&hidden).map(|(a, b)| a * b).sum::<f32>() + b2[j])
            .collect();
        BranchTrace { pooled, hidden, p }
    }

    /// Gradients of every parameter given upstream gradients on the logits (CHW) and, for
    /// dual-branch networks, on the multi-label logits.
    pub fn backward(&self, trace: &Trace, dlogits: &[f32], dmultilabel: Option<&[f32]>) -> BTreeMap<String, Tensor> {
        let mut grads = self.params.zeros_like();
        let (lh, lw) = trace.logit_size;
        let mut g = |name: &str| grads.get_mut(name).map(|t| std::mem::take(&mut t.data)).unwrap();

        let mut cw = g("classifier.weight");
        let mut cb = g("classifier.bias");
        let mut dcur = conv_backward(
            dlogits,
            &trace.classifier_in,
            lh,
            lw,
            &self.arch.classifier,
            self.w("classifier.weight"),
            &mut cw,
            &mut cb,
            true,
        )
        .unwrap();
        let mut taken = vec![("classifier.weight".to_string(), cw), ("classifier.bias".to_string(), cb)];

        let branch_grad = match (&trace.branch, dmultilabel) {
            (Some(b), Some(dp)) => {
                let (names, dfeat) = self.branch_backward(b, dp, trace.sizes[FORK_BLOCK + 1], &mut g);
                taken.extend(names);
                Some(dfeat)
            }
            _ => None,
        };

        for i in (0..self.arch.blocks.len()).rev() {
            if i == FORK_BLOCK {
                if let Some(df) = &branch_grad {
                    dcur.iter_mut().zip(df).for_each(|(a, b)| *a += b);
                }
            }
            let out = &trace.outputs[i];
            dcur.iter_mut().zip(out).for_each(|(d, &o)| {
                if o <= 0.0 {
                    *d = 0.0
                }
            });
            let (h, w) = trace.sizes[i];
            let wname = format!("block{i}.weight");
            let bname = format!("block{i}.bias");
            let mut dw = g(&wname);
            let mut db = g(&bname);
            let next = conv_backward(&dcur, &trace.cols[i], h, w, &self.arch.blocks[i], self.w(&wname), &mut dw, &mut db, i > 0);
            taken.push((wname, dw));
            taken.push((bname, db));
            match next {
                Some(d) => dcur = d,
                None => break,
            }
        }
        for (name, data) in taken {
            grads.get_mut(&name).unwrap().data = data;
        }
        grads
    }

    #[allow(clippy::type_complexity)]
    fn branch_backward(
        &self,
        b: &BranchTrace,
        dp: &[f32],
        (fh, fw): (usize, usize),
        g: &mut impl FnMut(&str) -> Vec<f32>,
    ) -> (Vec<(String, Vec<f32>)>, Vec<f32>) {
        let fc = self.arch.fork_channels();
        let hid = self.arch.branch_hidden;
        let classes = self.arch.classes;
        let w2 = self.w("branch.fc2.weight");
        let w1 = self.w("branch.fc1.weight");
        let mut dw2 = g("branch.fc2.weight");
        let mut db2 = g("branch.fc2.bias");
        let mut dw1 = g("branch.fc1.weight");
        let mut db1 = g("branch.fc1.bias");
        let mut dhidden = vec![0f32; hid];
        for j in 0..classes {
            db2[j] += dp[j];
            for k in 0..hid {
                dw2[j * hid + k] += dp[j] * b.hidden[k];
                dhidden[k] += dp[j] * w2[j * hid + k];
            }
        }
        let mut dpooled = vec![0f32; fc];
        for k in 0..hid {
            if b.hidden[k] <= 0.0 {
                continue;
            }
            db1[k] += dhidden[k];
            for c in 0..fc {
                dw1[k * fc + c] += dhidden[k] * b.pooled[c];
                dpooled[c] += dhidden[k] * w1[k * fc + c];
            }
        }
        let hw = fh * fw;
        let mut dfeat = vec![0f32; fc * hw];
        for c in 0..fc {
            let v = dpooled[c] / hw as f32;
            dfeat[c * hw..(c + 1) * hw].fill(v);
        }
        (
            vec![
                ("branch.fc2.weight".into(), dw2),
                ("branch.fc2.bias".into(), db2),
                ("branch.fc1.weight".into(), dw1),
                ("branch.fc1.bias".into(), db1),
            ],
            dfeat,
        )
    }
}

/// Converts CHW logits to a pixel-major score map.
pub fn logits_to_scoremap(logits: &[f32], h: usize, w: usize, classes: usize) -> ScoreMap {
    let hw = h * w;
    let mut data = vec![0f64; hw * classes];
    for c in 0..classes {
        for i in 0..hw {
            data[i * classes + c] = logits[c * hw + i] as f64;
        }
    }
    ScoreMap::from_vec(h, w, classes, data, ScoreSpace::Logits).expect("consistent sizes")
}

/// Pixel-major score-map gradient back to CHW.
pub fn scoremap_to_chw(map: &ScoreMap) -> Vec<f32> {
    let hw = map.pixels();
    let mut out = vec![0f32; hw * map.classes];
    for i in 0..hw {
        for c in 0..map.classes {
            out[c * hw + i] = map.data[i * map.classes + c] as f32;
        }
    }
    out
}

/// Dense logits at `ceil(H/8) x ceil(W/8)`.
pub fn forward_segmentation(image: &ImageRecord, params: &NetworkParams) -> Result<ScoreMap> {
    let net = Network::new(params)?;
    let x = image_to_input(image, params.input_mean);
    let t = net.forward_trace(&x, image.height, image.width, false)?;
    let (h, w) = t.logit_size;
    Ok(logits_to_scoremap(&t.logits, h, w, net.arch.classes))
}

/// Image-level class logits from the multi-label branch.
pub fn forward_multilabel(image: &ImageRecord, params: &NetworkParams) -> Result<MultiLabelScores> {
    let net = Network::new(params)?;
    if !net.arch.dual_branch {
        return Err(WssError::invalid(format!(
            "architecture `{}` has no multi-label branch",
            params.architecture_id
        )));
    }
    let x = image_to_input(image, params.input_mean);
    let t = net.forward_trace(&x, image.height, image.width, true)?;
    Ok(MultiLabelScores {
        p: t.multilabel().unwrap().iter().map(|&v| v as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageRecord {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let pixels = (0..h * w * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 56) as u8
            })
            .collect();
        ImageRecord::new("n", h, w, pixels).unwrap()
    }

    #[test]
    fn output_shapes_follow_stride_eight() {
        let p = build_backbone(BackboneKind::Toy, 21, false, 0).unwrap();
        let s = forward_segmentation(&noise_image(320, 320, 1), &p).unwrap();
        assert_eq!((s.height, s.width, s.classes), (40, 40, 21));
        let s = forward_segmentation(&noise_image(100, 60, 1), &p).unwrap();
        assert_eq!((s.height, s.width), (13, 8));
        let p4 = build_backbone(BackboneKind::Toy, 4, false, 0).unwrap();
        let s = forward_segmentation(&noise_image(64, 64, 2), &p4).unwrap();
        assert_eq!((s.height, s.width, s.classes), (8, 8, 4));
    }

    #[test]
    fn below_minimum_is_rejected() {
        let p = build_backbone(BackboneKind::Toy, 4, false, 0).unwrap();
        assert!(forward_segmentation(&noise_image(7, 30, 1), &p).is_err());
    }

    #[test]
    fn zero_weights_give_constant_logits() {
        let mut p = build_backbone(BackboneKind::Toy, 4, false, 0).unwrap();
        p.tensors.values_mut().for_each(|t| t.data.fill(0.0));
        let s = forward_segmentation(&noise_image(40, 48, 3), &p).unwrap();
        let first = s.pixel(0).to_vec();
        assert!((0..s.pixels()).all(|i| s.pixel(i) == first.as_slice()));
    }

    #[test]
    fn toy_backbone_is_small_and_deterministic() {
        let a = build_backbone(BackboneKind::Toy, 4, true, 0).unwrap();
        let b = build_backbone(BackboneKind::Toy, 4, true, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.parameter_count() <= 500_000, "{}", a.parameter_count());
        assert!(a.all_finite());
        let c = build_backbone(BackboneKind::Toy, 4, true, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trunk_init_is_independent_of_branch() {
        let single = build_backbone(BackboneKind::Toy, 4, false, 9).unwrap();
        let dual = build_backbone(BackboneKind::Toy, 4, true, 9).unwrap();
        for (name, t) in &single.tensors {
            assert_eq!(&dual.tensors[name], t, "{name}");
        }
    }

    #[test]
    fn multilabel_requires_dual_branch() {
        let img = noise_image(32, 32, 4);
        let single = build_backbone(BackboneKind::Toy, 5, false, 0).unwrap();
        assert!(forward_multilabel(&img, &single).is_err());
        let dual = build_backbone(BackboneKind::Toy, 5, true, 0).unwrap();
        assert_eq!(forward_multilabel(&img, &dual).unwrap().p.len(), 5);
    }

    #[test]
    fn architecture_id_roundtrip() {
        for (k, c, d) in [(BackboneKind::Toy, 4, true), (BackboneKind::DilatedResnetContract, 21, false)] {
            let a = Architecture::new(k, c, d).unwrap();
            assert_eq!(Architecture::from_id(&a.id()).unwrap(), a);
        }
        assert!(Architecture::from_id("toy/c4").is_err());
        assert!(build_backbone(BackboneKind::Toy, 1, false, 0).is_err());
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let p = build_backbone(BackboneKind::Toy, 4, true, 3).unwrap();
        let img = noise_image(50, 70, 5);
        assert_eq!(forward_segmentation(&img, &p).unwrap(), forward_segmentation(&img, &p).unwrap());
    }

    /// Horizontally mirror every trunk kernel so the trunk commutes with flips.
    fn symmetrize(p: &mut NetworkParams) {
        for (name, t) in p.tensors.iter_mut() {
            if !(name.starts_with("block") && name.ends_with("weight")) {
                continue;
            }
            let k = t.shape[3];
            for chunk in t.data.chunks_exact_mut(k * k) {
                for y in 0..k {
                    for x in 0..k / 2 {
                        let avg = 0.5 * (chunk[y * k + x] + chunk[y * k + k - 1 - x]);
                        chunk[y * k + x] = avg;
                        chunk[y * k + k - 1 - x] = avg;
                    }
                }
            }
        }
    }

    #[test]
    fn pooled_branch_is_flip_invariant() {
        let mut p = build_backbone(BackboneKind::Toy, 4, true, 11).unwrap();
        symmetrize(&mut p);
        // 65 -> 33 -> 17 -> 9 keeps every stride-2 sampling grid centred under mirroring.
        let img = noise_image(40, 65, 6);
        let a = forward_multilabel(&img, &p).unwrap();
        let b = forward_multilabel(&img.hflip(), &p).unwrap();
        for (x, y) in a.p.iter().zip(&b.p) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn translation_by_one_stride_shifts_logits_by_one_cell() {
        let p = build_backbone(BackboneKind::Toy, 3, false, 2).unwrap();
        let (h, w) = (160, 160);
        let img = noise_image(h, w, 8);
        // roll right by 8 pixels
        let mut rolled = img.clone();
        for y in 0..h {
            for x in 0..w {
                rolled.set_rgb(y, (x + 8) % w, img.rgb(y, x));
            }
        }
        let a = forward_segmentation(&img, &p).unwrap();
        let b = forward_segmentation(&rolled, &p).unwrap();
        // cells farther than the receptive radius (~6 cells) from the image border and the seam
        for y in 7..13 {
            for x in 7..12 {
                for c in 0..3 {
                    let d = (a.at(y, x)[c] - b.at(y, x + 1)[c]).abs();
                    assert!(d < 1e-4, "cell ({y},{x}) class {c}: {d}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn shape_law(h in 8usize..70, w in 8usize..70) {
                let p = build_backbone(BackboneKind::Toy, 3, false, 0).unwrap();
                let s = forward_segmentation(&noise_image(h, w, 1), &p).unwrap();
                prop_assert_eq!((s.height, s.width), (h.div_ceil(8), w.div_ceil(8)));
            }
        }
    }
}
