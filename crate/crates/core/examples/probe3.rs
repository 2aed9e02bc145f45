//! Full-scale stage-two calibration on the real 2k/500 detail task.

use std::time::Instant;

use src_kit_core::pipeline::{
    evaluate_prepared, prepare_dataset, train_stage2, PipelineConfig, PipelineModel, Stage2Config,
    Variant,
};
use src_kit_core::synth::{gen_qa_dataset, QaMix};
use src_kit_core::vit::{SrcVitConfig, SrcVitModel};

fn main() {
    let vit = SrcVitModel::new(SrcVitConfig { seed: 0, ..Default::default() }).unwrap();
    let train = gen_qa_dataset(100, 2000, 5, (4, 4), QaMix::LastFrame).unwrap();
    let test = gen_qa_dataset(200, 500, 5, (4, 4), QaMix::LastFrame).unwrap();

    for (steps, batch, lr) in [(1000usize, 16usize, 3e-3), (1000, 16, 1e-3)] {
        for variant in [Variant::Src, Variant::Reverse] {
            let t = Instant::now();
            let cfg = PipelineConfig { variant, seed: 0, ..Default::default() };
            let mut model = PipelineModel::new(cfg, vit.clone()).unwrap();
            let prepared_train = prepare_dataset(&model, &train).unwrap();
            let prepared_test = prepare_dataset(&model, &test).unwrap();
            let s2 = Stage2Config { steps, batch_size: batch, lr, seed: 0 };
            let out = train_stage2(&mut model, &prepared_train, &s2).unwrap();
            let metrics = evaluate_prepared(&model, &prepared_test).unwrap();
            let curve: Vec<f64> = out.curve.iter().step_by(steps / 8).map(|r| r.loss).collect();
            println!(
                "steps={steps} batch={batch} lr={lr} {}: test-acc {:.4} ({:?})\n  curve {curve:.3?}",
                variant.label(),
                metrics.accuracy,
                t.elapsed()
            );
        }
    }
}
