//! Scratch calibration probe for training hyperparameters. Not part of
//! the deliverable surface; run with `cargo run -p src-kit-core --example probe`.

use std::time::Instant;

use src_kit_core::contrastive::{eval_retrieval, train_stage1, Stage1Config};
use src_kit_core::pipeline::{
    evaluate_prepared, prepare_dataset, train_stage2, PipelineConfig, PipelineModel, Stage2Config,
    Variant,
};
use src_kit_core::synth::{gen_qa_dataset, gen_scene_dataset, QaMix, TextEmbedder};
use src_kit_core::vit::{SrcVitConfig, SrcVitModel};

fn main() {
    let t0 = Instant::now();
    let corpus = gen_scene_dataset(0, 256, (4, 4)).unwrap();
    let held_out = gen_scene_dataset(9999, 64, (4, 4)).unwrap();
    let embedder = TextEmbedder::new(0, 32);

    let mut vit = SrcVitModel::new(SrcVitConfig { seed: 0, ..Default::default() }).unwrap();
    let s1cfg = Stage1Config { steps: 400, batch_size: 8, lr: 2e-3, seed: 0 };
    let out = train_stage1(&mut vit, &embedder, &corpus, &s1cfg).unwrap();
    println!(
        "stage1: {:?} initial {:.4} final {:.4} tau {:.4}",
        t0.elapsed(),
        out.initial_loss,
        out.final_loss,
        out.curve.last().unwrap().tau
    );
    let t1 = Instant::now();
    let report = eval_retrieval(&vit, &embedder, &held_out).unwrap();
    println!("retrieval ({:?}): {:?}", t1.elapsed(), report);

    let t2 = Instant::now();
    let train = gen_qa_dataset(100, 2000, 5, (4, 4), QaMix::LastFrame).unwrap();
    let test = gen_qa_dataset(200, 500, 5, (4, 4), QaMix::LastFrame).unwrap();
    println!("qa gen: {:?}", t2.elapsed());

    for variant in [Variant::Src, Variant::Reverse] {
        let t3 = Instant::now();
        let cfg = PipelineConfig { variant, seed: 0, ..Default::default() };
        let mut model = PipelineModel::new(cfg, vit.clone()).unwrap();
        let prepared_train = prepare_dataset(&model, &train).unwrap();
        let prepared_test = prepare_dataset(&model, &test).unwrap();
        println!("  {} prep: {:?}", variant.label(), t3.elapsed());
        let t4 = Instant::now();
        let s2cfg = Stage2Config { steps: 600, batch_size: 8, lr: 3e-3, seed: 0 };
        let out = train_stage2(&mut model, &prepared_train, &s2cfg).unwrap();
        let train_time = t4.elapsed();
        let t5 = Instant::now();
        let metrics = evaluate_prepared(&model, &prepared_test).unwrap();
        println!(
            "  {} train {:?} (loss {:.4} -> {:.4}) eval {:?} acc {:.4}",
            variant.label(),
            train_time,
            out.initial_loss,
            out.final_loss,
            t5.elapsed(),
            metrics.accuracy
        );
    }
    println!("total {:?}", t0.elapsed());
}
