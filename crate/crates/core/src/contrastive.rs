//! Stage one: align the scene token with the scene caption and each region
//! token with its region caption via symmetric InfoNCE with a learnable
//! temperature. Region features contrast against every region caption in
//! the batch, including the other regions of their own frame.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gradcheck::ParamStore;
use crate::optim::RmsProp;
use crate::rng::DetRng;
use crate::synth::{CaptionSet, SynthScene, TextEmbedder};
use crate::tensor::Tensor2D;
use crate::vit::{SrcVitConfig, SrcVitModel, TAU_MAX, TAU_MIN};

/// Unit-norm features for one batch: scene rows (B×d) and region rows
/// (4B×d, sample-major then UL,UR,LL,LR) on both sides, plus the
/// temperature.
#[derive(Debug, Clone)]
pub struct ContrastBatch {
    pub image_scene: Tensor2D,
    pub image_regions: Tensor2D,
    pub text_scene: Tensor2D,
    pub text_regions: Tensor2D,
    pub tau: f64,
}

impl ContrastBatch {
    pub fn batch_size(&self) -> usize {
        self.image_scene.rows
    }

    fn validate(&self) -> Result<()> {
        let b = self.batch_size();
        if b == 0 {
            return Err(Error::Contract("contrast batch needs at least one sample".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Contract(format!("temperature {} must be positive", self.tau)));
        }
        let shapes = [
            ("image_scene", &self.image_scene, b),
            ("text_scene", &self.text_scene, b),
            ("image_regions", &self.image_regions, 4 * b),
            ("text_regions", &self.text_regions, 4 * b),
        ];
        let dim = self.image_scene.cols;
        for (name, t, rows) in shapes {
            if t.rows != rows || t.cols != dim {
                return Err(Error::Contract(format!(
                    "{name} is {}x{}, expected {rows}x{dim}",
                    t.rows, t.cols
                )));
            }
            for i in 0..t.rows {
                let norm = t.row_l2_norm(i);
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Contract(format!("{name} row {i} has norm {norm}")));
                }
            }
        }
        Ok(())
    }
}

/// Symmetric InfoNCE with diagonal targets: mean of image→text and
/// text→image cross-entropy over the pairwise similarity matrix / τ.
fn symmetric_infonce(img: &Tensor2D, txt: &Tensor2D, tau: f64) -> Result<f64> {
    let logits = img.matmul_transpose_b(txt)?.scale(1.0 / tau);
    let n = logits.rows;
    let direction = |row_of: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let max = (0..n).map(|j| row_of(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 =
                (0..n).map(|j| (row_of(i, j) - max).exp()).sum::<f64>().ln() + max;
            total += log_sum - row_of(i, i);
        }
        total / n as f64
    };
    let i2t = direction(&|i, j| logits.get(i, j));
    let t2i = direction(&|i, j| logits.get(j, i));
    Ok(0.5 * (i2t + t2i))
}

/// Contrastive loss over the B×B scene similarity matrix.
pub fn scene_loss(batch: &ContrastBatch) -> Result<f64> {
    batch.validate()?;
    symmetric_infonce(&batch.image_scene, &batch.text_scene, batch.tau)
}

/// Contrastive loss over the 4B×4B region similarity matrix; regions of
/// the same frame serve as negatives for each other.
pub fn region_loss(batch: &ContrastBatch) -> Result<f64> {
    batch.validate()?;
    symmetric_infonce(&batch.image_regions, &batch.text_regions, batch.tau)
}

/// ½·scene + ½·region.
pub fn total_loss(batch: &ContrastBatch) -> Result<f64> {
    Ok(0.5 * scene_loss(batch)? + 0.5 * region_loss(batch)?)
}

/// Frozen text embeddings for one captioned scene: scene row + 4 region rows.
fn caption_embeddings(embedder: &TextEmbedder, captions: &CaptionSet) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let scene = embedder.encode(&captions.scene_caption)?;
    let regions = captions
        .region_captions
        .iter()
        .map(|c| embedder.encode(c))
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, regions))
}

/// Encode + project a set of scenes into a [`ContrastBatch`] (no tape).
pub fn build_contrast_batch(
    model: &SrcVitModel,
    embedder: &TextEmbedder,
    samples: &[(SynthScene, CaptionSet)],
) -> Result<ContrastBatch> {
    let b = samples.len();
    let mut image_scene = Vec::with_capacity(b);
    let mut image_regions = Vec::with_capacity(4 * b);
    let mut text_scene = Vec::with_capacity(b);
    let mut text_regions = Vec::with_capacity(4 * b);
    for (scene, captions) in samples {
        let features = model.project_image_features(&model.encode_frame(scene)?)?;
        image_scene.push(features.scene);
        image_regions.extend(features.regions.into_iter());
        let (ts, tr) = caption_embeddings(embedder, captions)?;
        text_scene.push(ts);
        text_regions.extend(tr);
    }
    let rows_to_tensor = |rows: Vec<Vec<f64>>| Tensor2D::from_rows(&rows);
    Ok(ContrastBatch {
        image_scene: rows_to_tensor(image_scene),
        image_regions: rows_to_tensor(image_regions),
        text_scene: rows_to_tensor(text_scene),
        text_regions: rows_to_tensor(text_regions),
        tau: model.tau(),
    })
}

/// Stage-one total loss on the tape, with analytic gradients for every
/// encoder parameter (including the temperature). Also returns the three
/// loss components as plain numbers.
fn stage1_loss_on_tape(
    model: &SrcVitModel,
    embedder: &TextEmbedder,
    samples: &[(SynthScene, CaptionSet)],
) -> Result<(Tape, crate::autodiff::Var, [f64; 3])> {
    if samples.is_empty() {
        return Err(Error::Contract("stage-one batch is empty".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let log_tau = tape.param(&model.params, "contrast.log_tau")?;
    let neg_log_tau = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg_log_tau);

    let mut img_scene_rows = Vec::with_capacity(samples.len());
    let mut img_region_rows = Vec::with_capacity(samples.len());
    let mut txt_scene_rows = Vec::with_capacity(samples.len());
    let mut txt_region_rows = Vec::with_capacity(4 * samples.len());
    for (scene, captions) in samples {
        let encoded = model.encode_on_tape(&mut tape, &bound, scene)?;
        let (s, r) = model.project_on_tape(&mut tape, &bound, encoded)?;
        img_scene_rows.push(s);
        img_region_rows.push(r);
        let (ts, tr) = caption_embeddings(embedder, captions)?;
        txt_scene_rows.push(Tensor2D::from_rows(&[ts]));
        for row in tr {
            txt_region_rows.push(row);
        }
    }
    let img_scene = tape.concat_rows(&img_scene_rows)?;
    let img_regions = tape.concat_rows(&img_region_rows)?;
    let txt_scene = {
        let all: Vec<Vec<f64>> = txt_scene_rows.iter().map(|t| t.row(0).to_vec()).collect();
        tape.constant(Tensor2D::from_rows(&all))
    };
    let txt_regions = tape.constant(Tensor2D::from_rows(&txt_region_rows));

    let infonce = |tape: &mut Tape, img, txt, n: usize| -> Result<crate::autodiff::Var> {
        let targets: Vec<usize> = (0..n).collect();
        let i2t_logits = tape.matmul_tb(img, txt)?;
        let i2t_logits = tape.mul_scalar(i2t_logits, inv_tau)?;
        let i2t = tape.cross_entropy_mean(i2t_logits, &targets)?;
        let t2i_logits = tape.matmul_tb(txt, img)?;
        let t2i_logits = tape.mul_scalar(t2i_logits, inv_tau)?;
        let t2i = tape.cross_entropy_mean(t2i_logits, &targets)?;
        let sum = tape.add(i2t, t2i)?;
        Ok(tape.scale(sum, 0.5))
    };

    let scene = infonce(&mut tape, img_scene, txt_scene, samples.len())?;
    let region = infonce(&mut tape, img_regions, txt_regions, 4 * samples.len())?;
    let half = tape.add(scene, region)?;
    let total = tape.scale(half, 0.5);
    let components = [tape.scalar(scene), tape.scalar(region), tape.scalar(total)];
    Ok((tape, total, components))
}

/// Stage-one loss + gradients as a function of a parameter store; the
/// entry point for the gradient-check oracle.
pub fn stage1_loss_eval(
    cfg: &SrcVitConfig,
    params: &ParamStore,
    embedder: &TextEmbedder,
    samples: &[(SynthScene, CaptionSet)],
) -> Result<(f64, HashMap<String, Tensor2D>)> {
    let model = SrcVitModel::from_params(*cfg, params.clone())?;
    let (tape, total, _) = stage1_loss_on_tape(&model, embedder, samples)?;
    Ok((tape.scalar(total), tape.grads_by_name(total)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { steps: 300, batch_size: 8, lr: 2e-3, seed: 0 }
    }
}

/// One loss-curve row per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub scene_loss: f64,
    pub region_loss: f64,
    pub total_loss: f64,
    pub tau: f64,
}

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,scene_loss,region_loss,total_loss,tau\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.scene_loss, r.region_loss, r.total_loss, r.tau
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub curve: Vec<CurveRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Train every encoder parameter (tokens, blocks, projections, τ) against
/// the frozen text embedder. Deterministic in (seed, data, config); epochs
/// walk a reshuffled permutation of the corpus.
pub fn train_stage1(
    model: &mut SrcVitModel,
    embedder: &TextEmbedder,
    data: &[(SynthScene, CaptionSet)],
    cfg: &Stage1Config,
) -> Result<Stage1Output> {
    if data.is_empty() {
        return Err(Error::Contract("stage-one corpus is empty".into()));
    }
    let batch = cfg.batch_size.max(1).min(data.len());
    let mut rng = DetRng::from_seed_stream(cfg.seed, 0x51a6e1);
    let mut opt = RmsProp::new(cfg.lr);
    let mut order = rng.permutation(data.len());
    let mut cursor = 0usize;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order = rng.permutation(data.len());
            cursor = 0;
        }
        let samples: Vec<(SynthScene, CaptionSet)> =
            order[cursor..cursor + batch].iter().map(|&i| data[i].clone()).collect();
        cursor += batch;

        let (tape, total, [scene, region, total_v]) =
            stage1_loss_on_tape(model, embedder, &samples)?;
        if !total_v.is_finite() {
            return Err(Error::Numeric(format!("stage-one loss diverged at step {step}")));
        }
        model.params.zero_grads();
        tape.backward_into(total, &mut model.params)?;
        opt.step(&mut model.params, &[])?;
        let log_tau = model.params.get_mut("contrast.log_tau")?;
        log_tau.data[0] = log_tau.data[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());

        curve.push(CurveRow {
            step,
            scene_loss: scene,
            region_loss: region,
            total_loss: total_v,
            tau: model.tau(),
        });
    }
    model.params.check_finite()?;
    Ok(Stage1Output {
        initial_loss: curve.first().map(|r| r.total_loss).unwrap_or(0.0),
        final_loss: curve.last().map(|r| r.total_loss).unwrap_or(0.0),
        curve,
    })
}

// ─── Retrieval evaluation ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub pool_size: usize,
    pub chance: f64,
    pub itot_recall_at_1: f64,
    pub ttoi_recall_at_1: f64,
    pub region_itot_recall_at_1: f64,
    /// Baseline: the scene token retrieving region captions.
    pub scene_on_region_itot_recall_at_1: f64,
}

/// First-wins argmax; exact ties resolve to the lowest index.
fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// recall@1 of `queries` against `gallery` under dot-product similarity;
/// query `i` must retrieve `targets[i]`.
pub fn recall_at_1(queries: &Tensor2D, gallery: &Tensor2D, targets: &[usize]) -> Result<f64> {
    if targets.len() != queries.rows {
        return Err(Error::Contract(format!(
            "{} targets for {} queries",
            targets.len(),
            queries.rows
        )));
    }
    let sims = queries.matmul_transpose_b(gallery)?;
    let hits = (0..queries.rows)
        .filter(|&i| argmax_first(sims.row(i)) == targets[i])
        .count();
    Ok(hits as f64 / queries.rows as f64)
}

/// Nearest-neighbor retrieval over a held-out pool (≥ 64 scenes).
pub fn eval_retrieval(
    model: &SrcVitModel,
    embedder: &TextEmbedder,
    held_out: &[(SynthScene, CaptionSet)],
) -> Result<RetrievalReport> {
    if held_out.len() < 64 {
        return Err(Error::Contract(format!(
            "retrieval pool of {} scenes; need at least 64",
            held_out.len()
        )));
    }
    let batch = build_contrast_batch(model, embedder, held_out)?;
    let n = held_out.len();
    let identity: Vec<usize> = (0..n).collect();
    let region_identity: Vec<usize> = (0..4 * n).collect();
    let itot = recall_at_1(&batch.image_scene, &batch.text_scene, &identity)?;
    let ttoi = recall_at_1(&batch.text_scene, &batch.image_scene, &identity)?;
    let region_itot = recall_at_1(&batch.image_regions, &batch.text_regions, &region_identity)?;

    // Scene tokens probing region captions: query (i, q) with scene row i.
    let mut scene_queries = Vec::with_capacity(4 * n);
    for i in 0..n {
        for _ in 0..4 {
            scene_queries.push(batch.image_scene.row(i).to_vec());
        }
    }
    let scene_queries = Tensor2D::from_rows(&scene_queries);
    let scene_on_region = recall_at_1(&scene_queries, &batch.text_regions, &region_identity)?;

    Ok(RetrievalReport {
        pool_size: n,
        chance: 1.0 / n as f64,
        itot_recall_at_1: itot,
        ttoi_recall_at_1: ttoi,
        region_itot_recall_at_1: region_itot,
        scene_on_region_itot_recall_at_1: scene_on_region,
    })
}
