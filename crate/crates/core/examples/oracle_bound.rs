//! Upper-bound calibration: trains the final model directly on the synthetic target set's
//! ground-truth masks and reports validation mean IoU.
//!
//! cargo run --release -p wss-core --example oracle_bound -- <config> <work-dir>

use std::path::PathBuf;

use wss_core::data::{load_manifest, PipelineConfig};
use wss_core::eval::{evaluate_prediction_dir, mean_iou};
use wss_core::infer::predict_manifest;
use wss_core::pipeline::generate_synthetic_sources;
use wss_core::train::{train_stage, Stage};

fn main() -> wss_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 3 {
        eprintln!("usage: oracle_bound <config> <work-dir>");
        std::process::exit(2);
    }
    let config = PipelineConfig::load(&PathBuf::from(&args[1]))?;
    let work = PathBuf::from(&args[2]);
    let taxonomy = config.taxonomy()?;
    let sources = generate_synthetic_sources(&config, &work.join("synth"))?;
    let gt_train = load_manifest(&sources.target_train.with_file_name("gt.tsv"), &taxonomy)?;
    let val = load_manifest(&sources.target_val, &taxonomy)?;
    let outcome = train_stage(&gt_train, &config, Stage::Final, config.seed.wrapping_add(1), None)?;
    for (name, scales, crf) in [
        ("single scale", vec![1.0], None),
        ("multi-scale + crf", config.inference_scales.clone(), Some(&config.crf)),
    ] {
        let dir = work.join(name.replace(' ', "_"));
        predict_manifest(&val, &outcome.params, &scales, crf, config.workers, &dir)?;
        let miou = mean_iou(&evaluate_prediction_dir(&dir, &val, taxonomy.count())?)?;
        println!("{name}: mean IoU {miou:.4}");
    }
    Ok(())
}
