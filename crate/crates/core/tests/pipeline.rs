use std::fs;
use std::path::Path;

use wss_core::data::PipelineConfig;
use wss_core::pipeline::{run_pipeline, SourceSpec, CACHE_ENV, STAGES};

const TINY: &str = "classes = shapes
backbone = toy
crop_size = 32
batch_size = 4
stage1_iters = 12
stage2_iters = 12
inference_scales = 1.0
crf_iterations = 2
synth_retrieved_per_class = 4
synth_target_train = 5
synth_target_val = 3
";

fn tiny() -> PipelineConfig {
    PipelineConfig::parse(TINY, Path::new("tiny.cfg")).unwrap()
}

// One test so the cache variable is never changed under a concurrent run.
#[test]
fn resume_and_cache_location() {
    std::env::remove_var(CACHE_ENV);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = tiny();

    let first = run_pipeline(&config, &SourceSpec::Synthetic, &out).unwrap();
    assert_eq!(first.executed, STAGES);
    assert!(out.join("cache/stage2/model.ckpt").is_file());
    let report = fs::read(out.join("report.csv")).unwrap();

    let again = run_pipeline(&config, &SourceSpec::Synthetic, &out).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.stages, first.stages);

    fs::remove_file(out.join("cache/stage2/model.ckpt")).unwrap();
    let resumed = run_pipeline(&config, &SourceSpec::Synthetic, &out).unwrap();
    assert_eq!(resumed.executed, ["train-final", "evaluate"]);
    assert_eq!(fs::read(resumed.output("evaluate").unwrap()).unwrap(), report);

    // a changed output invalidates that stage and everything after it
    fs::write(out.join("cache/genmasks/manifest.tsv"), "tampered\n").unwrap();
    let rerun = run_pipeline(&config, &SourceSpec::Synthetic, &out).unwrap();
    assert_eq!(rerun.executed, ["genmasks", "train-final", "evaluate"]);

    // a different config reruns everything
    let mut changed = config.clone();
    changed.stage2_iters = 13;
    let fresh = run_pipeline(&changed, &SourceSpec::Synthetic, &out).unwrap();
    assert_eq!(fresh.executed, STAGES);

    let cache = dir.path().join("shared");
    std::env::set_var(CACHE_ENV, &cache);
    let out2 = dir.path().join("run2");
    let moved = run_pipeline(&config, &SourceSpec::Synthetic, &out2);
    std::env::remove_var(CACHE_ENV);
    let moved = moved.unwrap();
    let ckpt = moved.output("train-final").unwrap();
    assert!(ckpt.starts_with(cache.join(&moved.run_id)), "{}", ckpt.display());
    assert!(!out2.join("cache").exists());
    assert!(out2.join("report.csv").is_file());
    assert_eq!(fs::read(out2.join("report.csv")).unwrap(), report);
}

#[test]
fn stage_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny();
    // nothing survives a filter band this narrow
    config.fg_min = 0.999;
    config.fg_max = 1.0;
    let err = run_pipeline(&config, &SourceSpec::Synthetic, &dir.path().join("run")).unwrap_err();
    assert!(err.to_string().contains("coseg"), "{err}");
}
