//! Overfit diagnostic: can stage two memorize a tiny set at all?

use std::time::Instant;

use src_kit_core::pipeline::{
    evaluate_prepared, prepare_dataset, train_stage2, PipelineConfig, PipelineModel, Stage2Config,
    Variant,
};
use src_kit_core::synth::{gen_qa_dataset, QaMix};
use src_kit_core::vit::{SrcVitConfig, SrcVitModel};

fn main() {
    let vit = SrcVitModel::new(SrcVitConfig { seed: 0, ..Default::default() }).unwrap();
    let train = gen_qa_dataset(100, 16, 5, (4, 4), QaMix::LastFrame).unwrap();

    for (label, lr, steps) in [("lr3e-3", 3e-3, 300), ("lr1e-3", 1e-3, 300), ("lr3e-4", 3e-4, 600)] {
        for variant in [Variant::Src, Variant::Full] {
            let t = Instant::now();
            let cfg = PipelineConfig { variant, seed: 0, ..Default::default() };
            let mut model = PipelineModel::new(cfg, vit.clone()).unwrap();
            let prepared = prepare_dataset(&model, &train).unwrap();
            let s2 = Stage2Config { steps, batch_size: 8, lr, seed: 0 };
            let out = train_stage2(&mut model, &prepared, &s2).unwrap();
            let metrics = evaluate_prepared(&model, &prepared).unwrap();
            println!(
                "{label} {}: loss {:.4} -> {:.4} train-acc {:.3} ({:?})",
                variant.label(),
                out.initial_loss,
                out.final_loss,
                metrics.accuracy,
                t.elapsed()
            );
            let mid: Vec<f64> = out.curve.iter().step_by(steps / 10).map(|r| r.loss).collect();
            println!("   curve: {mid:.3?}");
        }
    }
}
