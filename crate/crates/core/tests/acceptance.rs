//! Acceptance gate: one PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wss_core::cosegment::{filter_by_foreground, GroupMaskResult};
use wss_core::data::{load_manifest, ImageRecord, LabelVector, Mask, PipelineConfig, ScoreMap, ScoreSpace, IGNORE};
use wss_core::eval::{accumulate, mean_iou, per_class_iou, ConfusionMatrix};
use wss_core::infer::{constrained_argmax, crf_refine, multiscale_probs, upsample_cells, CrfSettings};
use wss_core::model::{build_backbone, forward_segmentation, BackboneKind, MultiLabelScores};
use wss_core::pipeline::{ablation_run, run_pipeline, sha256_file, SourceSpec};
use wss_core::train::{combined_loss, multilabel_bce_soft, softmax_nll_loss, train_stage, Stage};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
    PipelineConfig::load(&path).expect("configs/toy.cfg")
}

fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ScoreMap {
    // small integer weights make exact ties common
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0..6) as f64 + 0.5 * rng.gen_range(0..2) as f64).collect();
        let s: f64 = raw.iter().sum::<f64>().max(1e-9);
        data.extend(raw.iter().map(|v| if s > 0.0 { v / s } else { 1.0 / c as f64 }));
    }
    ScoreMap::from_vec(h, w, c, data, ScoreSpace::Probabilities).unwrap()
}

fn c1_constraint_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 2000;
    for trial in 0..trials {
        let (h, w, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(2..=6));
        let probs = random_probs(&mut rng, h, w, c);
        let fg: Vec<usize> = (1..c).filter(|_| rng.gen_bool(0.5)).collect();
        let y = LabelVector::from_indices(c, &fg).unwrap();
        let got = constrained_argmax(&probs, &y).map_err(|e| e.to_string())?;
        for i in 0..h * w {
            // enumerate allowed classes; strictly greater keeps the lowest index on ties
            let px = probs.pixel(i);
            let mut best = 0;
            for j in 1..c {
                let allowed = fg.contains(&j);
                if allowed && px[j] > px[best] {
                    best = j;
                }
            }
            if got.labels[i] as usize != best {
                return Err(format!("trial {trial} pixel {i}: got {} expected {best}", got.labels[i]));
            }
        }
    }
    let el = t.elapsed();
    check(el < Duration::from_secs(5), format!("{trials} instances exact in {:.2}s", el.as_secs_f64()))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn c2_gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let instances = 150;
    for _ in 0..instances {
        let (h, w, c) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(2..=6));
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
        labels[0] = 0;
        for l in labels.iter_mut().skip(1) {
            if rng.gen_bool(0.2) {
                *l = IGNORE;
            }
        }
        let mask = Mask::new(h, w, labels).unwrap();
        let logits = ScoreMap::from_vec(h, w, c, data.clone(), ScoreSpace::Logits).unwrap();
        let (_, grad) = softmax_nll_loss(&logits, &mask).unwrap();
        let mut numeric = vec![0.0; data.len()];
        for k in 0..data.len() {
            let mut plus = data.clone();
            plus[k] += eps;
            let mut minus = data.clone();
            minus[k] -= eps;
            let lp = softmax_nll_loss(&ScoreMap::from_vec(h, w, c, plus, ScoreSpace::Logits).unwrap(), &mask).unwrap().0;
            let lm = softmax_nll_loss(&ScoreMap::from_vec(h, w, c, minus, ScoreSpace::Logits).unwrap(), &mask).unwrap().0;
            numeric[k] = (lp - lm) / (2.0 * eps);
        }
        worst = worst.max(rel_err(&grad.data, &numeric));

        let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mut y: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        y[0] = 1.0;
        let (_, g) = multilabel_bce_soft(&p, &y).unwrap();
        let numeric: Vec<f64> = (0..c)
            .map(|k| {
                let mut a = p.clone();
                a[k] += eps;
                let mut b = p.clone();
                b[k] -= eps;
                (multilabel_bce_soft(&a, &y).unwrap().0 - multilabel_bce_soft(&b, &y).unwrap().0) / (2.0 * eps)
            })
            .collect();
        worst = worst.max(rel_err(&g, &numeric));
    }
    let el = t.elapsed();
    check(
        worst < 1e-4 && el < Duration::from_secs(30),
        format!("{instances} instances per loss, worst relative error {worst:.2e}, {:.2}s", el.as_secs_f64()),
    )
}

fn c3_loss_anchors() -> Outcome {
    let mut notes = Vec::new();
    for c in [2usize, 4, 21] {
        let logits = ScoreMap::from_vec(3, 5, c, vec![0.7; 15 * c], ScoreSpace::Logits).unwrap();
        let (l, _) = softmax_nll_loss(&logits, &Mask::filled(3, 5, 1)).unwrap();
        if (l - (c as f64).ln()).abs() > 1e-9 {
            return Err(format!("uniform seg loss {l} vs ln {c}"));
        }
    }
    notes.push("uniform seg loss = ln C");
    for c in [2usize, 4, 21] {
        for y in [vec![0usize], (0..c).collect()] {
            let t: Vec<f64> = (0..c).map(|j| if y.contains(&j) { 1.0 } else { 0.0 }).collect();
            let (l, _) = multilabel_bce_soft(&vec![0.0; c], &t).unwrap();
            if (l - 2f64.ln()).abs() > 1e-9 {
                return Err(format!("p=0 multi-label loss {l}"));
            }
        }
    }
    notes.push("p=0 multi-label = ln 2");
    let logits = ScoreMap::from_vec(2, 2, 3, (0..12).map(|v| v as f64 * 0.37 - 2.0).collect(), ScoreSpace::Logits).unwrap();
    let mask = Mask::new(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
    let p = MultiLabelScores { p: vec![0.3, -1.2, 2.5] };
    let y = LabelVector::from_indices(3, &[2]).unwrap();
    for lambda in [0.0, 0.25, 1.0, 3.5, 10.0] {
        let r = combined_loss(&logits, &mask, &p, &y, lambda).unwrap();
        if r.combined != r.seg_loss + lambda * r.multilabel_loss {
            return Err(format!("combined loss not linear at lambda {lambda}"));
        }
    }
    notes.push("combined = L1 + lambda L2 exactly");
    Ok(notes.join("; "))
}

#[allow(clippy::excessive_precision)]
fn c4_stability() -> Outcome {
    // Extended-precision (60-digit) reference values for the class-averaged loss.
    let anchors: [(&[f64], &[f64], f64); 10] = [
        (&[20.0], &[1.0], 2.0611536203143807032e-9),
        (&[50.0], &[0.0], 50.00000000000000000000019),
        (&[1e4, -1e4], &[1.0, 0.0], 0.0),
        (&[1e4, -1e4], &[0.0, 1.0], 10000.0),
        (&[1e4], &[0.0], 10000.0),
        (&[-1e4], &[1.0], 10000.0),
        (&[700.5, -35.25, 0.125], &[0.0, 1.0, 1.0], 245.4608663451057231857622),
        (&[40.0, -40.0, 3e3, -2.5e3], &[1.0, 1.0, 0.0, 0.0], 760.0000000000000000021242),
        (&[1e-8, -1e-8], &[1.0, 0.0], 0.693147175559945321917232),
        (&[36.7, -745.2], &[0.0, 0.0], 18.35000000000000147867752),
    ];
    let mut worst: f64 = 0.0;
    for (p, y, want) in anchors {
        let (got, g) = multilabel_bce_soft(p, y).unwrap();
        if !got.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite loss for p={p:?}"));
        }
        let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst = worst.max(err);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let c = rng.gen_range(1..8);
        let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-1e4..1e4)).collect();
        let y: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let (l, g) = multilabel_bce_soft(&p, &y).unwrap();
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite loss for p={p:?}"));
        }
    }
    check(worst < 1e-10, format!("10 extended-precision anchors, worst relative error {worst:.2e}; 1000 random |p| <= 1e4 finite"))
}

fn c5_iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs = 1000;
    for trial in 0..pairs {
        let c = rng.gen_range(2..=6);
        let gt: Vec<u8> = (0..64).map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..c) as u8 }).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..c) as u8).collect();
        let mut cm = ConfusionMatrix::new(c);
        accumulate(&mut cm, &Mask::new(8, 8, gt.clone()).unwrap(), &Mask::new(8, 8, pred.clone()).unwrap()).unwrap();
        let ious = per_class_iou(&cm);
        let mut defined = Vec::new();
        for j in 0..c {
            let a: HashSet<usize> = (0..64).filter(|&i| gt[i] == j as u8).collect();
            let b: HashSet<usize> = (0..64).filter(|&i| gt[i] != IGNORE && pred[i] == j as u8).collect();
            let union = a.union(&b).count();
            let want = (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64);
            if ious[j] != want {
                return Err(format!("trial {trial} class {j}: {:?} vs {want:?}", ious[j]));
            }
            defined.extend(want);
        }
        if !defined.is_empty() {
            let want = defined.iter().sum::<f64>() / defined.len() as f64;
            if mean_iou(&cm).unwrap() != want {
                return Err(format!("trial {trial}: mean differs"));
            }
        }
    }
    Ok(format!("{pairs} random 8x8 pairs match the set oracle exactly"))
}

fn c6_filter_ladder() -> Outcome {
    let ladder = [19usize, 20, 21, 79, 80, 81];
    let results: Vec<GroupMaskResult> = ladder
        .iter()
        .map(|&n| {
            let labels = (0..100).map(|i| u8::from(i < n)).collect();
            GroupMaskResult::new(format!("f{n}"), Mask::new(10, 10, labels).unwrap())
        })
        .collect();
    let kept = filter_by_foreground(&results, 0.20, 0.80).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = kept.iter().map(|r| r.image_id.as_str()).collect();
    check(ids == ["f20", "f21", "f79", "f80"], format!("kept {ids:?}"))
}

fn test_image(seed: u64, h: usize, w: usize) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..h * w * 3).map(|_| rng.gen()).collect();
    ImageRecord::new("ms", h, w, pixels).unwrap()
}

fn c7_multiscale() -> Outcome {
    let params = build_backbone(BackboneKind::Toy, 4, false, 7).unwrap();
    let image = test_image(7, 61, 77);
    let single = multiscale_probs(&image, &params, &[1.0]).unwrap();
    let mut plain = forward_segmentation(&image, &params).unwrap().softmax();
    plain = upsample_cells(&plain, image.height, image.width, image.height, image.width);
    plain.renormalize();
    if single.data != plain.data {
        return Err("scale {1.0} differs from plain inference".into());
    }
    let base = multiscale_probs(&image, &params, &[0.75, 1.0, 1.25]).unwrap();
    let mut worst: f64 = 0.0;
    for perm in [[1.0, 0.75, 1.25], [1.25, 1.0, 0.75], [0.75, 1.25, 1.0], [1.25, 0.75, 1.0], [1.0, 1.25, 0.75]] {
        let other = multiscale_probs(&image, &params, &perm).unwrap();
        worst = base.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    check(worst <= 1e-12, format!("single scale bitwise equal; permutation max diff {worst:.1e}"))
}

fn c8_crf() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_sum: f64 = 0.0;
    for trial in 0..6 {
        let (h, w, c) = (rng.gen_range(8..30), rng.gen_range(8..30), rng.gen_range(2..6));
        let image = test_image(100 + trial, h, w);
        let mut probs = random_probs(&mut rng, h, w, c);
        // keep argmax unambiguous so "preserved" is well defined
        for px in probs.data.chunks_exact_mut(c) {
            let k = rng.gen_range(0..c);
            px[k] += 1.0;
        }
        probs.renormalize();
        let zero_iter = CrfSettings { iterations: 0, ..Default::default() };
        if crf_refine(&image, &probs, &zero_iter).unwrap() != probs {
            return Err(format!("trial {trial}: zero iterations changed the input"));
        }
        let no_pairwise = CrfSettings { gaussian_weight: 0.0, bilateral_weight: 0.0, ..Default::default() };
        let out = crf_refine(&image, &probs, &no_pairwise).unwrap();
        if out.argmax() != probs.argmax() {
            return Err(format!("trial {trial}: zero pairwise weights changed the argmax"));
        }
        let full = crf_refine(&image, &probs, &CrfSettings::default()).unwrap();
        for px in full.data.chunks_exact(c) {
            worst_sum = worst_sum.max((px.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst_sum <= 1e-5, format!("identity and argmax preserved; max |sum - 1| = {worst_sum:.1e}"))
}

struct ToyRuns {
    ablation: Vec<wss_core::pipeline::AblationRow>,
    ablation_time: Duration,
    pipeline_time: Duration,
    report_a: PathBuf,
    report_b: PathBuf,
    genmasks: PathBuf,
    config: PipelineConfig,
}

fn toy_runs(root: &Path) -> Result<ToyRuns, String> {
    std::env::remove_var(wss_core::pipeline::CACHE_ENV);
    let config = toy_config();
    let t = Instant::now();
    let ablation = ablation_run(&config, &SourceSpec::Synthetic, &root.join("ablation")).map_err(|e| e.to_string())?;
    let ablation_time = t.elapsed();
    let t = Instant::now();
    let run = run_pipeline(&config, &SourceSpec::Synthetic, &root.join("repeat")).map_err(|e| e.to_string())?;
    let pipeline_time = t.elapsed();
    Ok(ToyRuns {
        ablation,
        ablation_time,
        pipeline_time,
        report_a: root.join("ablation/full/report.csv"),
        report_b: run.output("evaluate").unwrap().to_path_buf(),
        genmasks: run.output("genmasks").unwrap().to_path_buf(),
        config,
    })
}

fn c9_constraint_soundness(runs: &ToyRuns) -> Outcome {
    let taxonomy = runs.config.taxonomy().unwrap();
    let manifest = load_manifest(&runs.genmasks, &taxonomy).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for e in &manifest.entries {
        let allowed = e.labels.clone().unwrap_or_default();
        let mask = Mask::load(e.mask.as_ref().unwrap()).map_err(|e| e.to_string())?;
        for c in mask.classes_present() {
            if c != 0 && !allowed.contains(&(c as usize)) {
                return Err(format!("{}: class {c} not in labels {allowed:?}", e.image.display()));
            }
        }
        checked += 1;
    }
    check(checked > 0, format!("{checked} generated masks within their label sets"))
}

fn c10_determinism(runs: &ToyRuns) -> Outcome {
    let a = sha256_file(&runs.report_a).map_err(|e| e.to_string())?;
    let b = sha256_file(&runs.report_b).map_err(|e| e.to_string())?;
    check(a == b, format!("report sha256 {} vs {}", &a[..16], &b[..16]))
}

fn c11_end_to_end(runs: &ToyRuns) -> Outcome {
    let r: Vec<f64> = runs.ablation.iter().map(|r| r.mean_iou).collect();
    let table = runs
        .ablation
        .iter()
        .map(|r| format!("{} {:.3}", r.setting, r.mean_iou))
        .collect::<Vec<_>>()
        .join(", ");
    let fast = runs.pipeline_time < Duration::from_secs(15 * 60);
    let good = r[3] >= 0.70;
    let ordered = r[3] >= r[1] && r[1] >= r[0];
    check(
        fast && good && ordered,
        format!(
            "pipeline {:.0}s (ablation {:.0}s); {table}; mIoU>=0.70 {good}, ordering {ordered}",
            runs.pipeline_time.as_secs_f64(),
            runs.ablation_time.as_secs_f64()
        ),
    )
}

fn c12_overfit(root: &Path, runs: &ToyRuns) -> Outcome {
    let taxonomy = runs.config.taxonomy().unwrap();
    let train = root.join("repeat/cache/coseg/train.tsv");
    let mut manifest = load_manifest(&train, &taxonomy).map_err(|e| e.to_string())?;
    manifest.entries.truncate(10);
    let mut config = runs.config.clone();
    config.stage1_iters = 2000;
    let outcome = train_stage(&manifest, &config, Stage::Initial, 12, None).map_err(|e| e.to_string())?;
    let tail = outcome.final_seg_loss(20);
    check(tail < 0.05, format!("10 images, 2000 iterations: mean seg loss over last 20 = {tail:.4}"))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}")
            }
        }
    };
    report(1, "label-constrained argmax oracle", c1_constraint_oracle());
    report(2, "loss gradient checks", c2_gradient_checks());
    report(3, "loss value anchors", c3_loss_anchors());
    report(4, "multi-label numerical stability", c4_stability());
    report(5, "IoU set oracle", c5_iou_oracle());
    report(6, "foreground filter ladder", c6_filter_ladder());
    report(7, "multi-scale degeneracy", c7_multiscale());
    report(8, "CRF contracts", c8_crf());

    let dir = tempfile::tempdir().expect("tempdir");
    match toy_runs(dir.path()) {
        Ok(runs) => {
            report(9, "label-constraint soundness", c9_constraint_soundness(&runs));
            report(10, "determinism", c10_determinism(&runs));
            report(11, "end-to-end toy pipeline", c11_end_to_end(&runs));
            report(12, "overfit sanity", c12_overfit(dir.path(), &runs));
        }
        Err(e) => {
            for (n, name) in [(9, "label-constraint soundness"), (10, "determinism"), (11, "end-to-end toy pipeline"), (12, "overfit sanity")] {
                report(n, name, Err(format!("toy run failed: {e}")));
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
    fs::write(dir.path().join(".done"), b"").ok();
}
