//! Ablation suite: train every requested variant from identical seeds,
//! steps and data, report accuracy and token/FLOPs accounting, and check
//! the qualitative orderings between variants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{train_stage1, Stage1Config};
use crate::error::{Error, Result};
use crate::flops::{estimate_flops, FlopsReport};
use crate::pipeline::{
    evaluate_prepared, frame_features, train_stage2, visual_token_count, FrameFeatures,
    PipelineConfig, PipelineModel, PreparedSample, QaMetrics, Stage2Config, Variant,
};
use crate::synth::{CaptionSet, Symbol, SynthScene, TextEmbedder, VideoSample};
use crate::vit::{SrcVitConfig, SrcVitModel};

/// Accuracy difference treated as a tie when comparing variants.
pub const TIE_TOLERANCE: f64 = 0.01;
/// Criterion margin: SRC must beat REVERSE by at least this much.
pub const REVERSE_MARGIN: f64 = 0.20;
/// REVERSE must stay within this distance of chance.
pub const REVERSE_CHANCE_BAND: f64 = 0.15;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSuiteConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Template config; `variant` and `seed` are overridden per run.
    pub base: PipelineConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

/// One (variant, seed) training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub accuracy_last_frame: Option<f64>,
    pub accuracy_global: Option<f64>,
    pub visual_tokens: usize,
    pub flops_estimate: FlopsReport,
}

/// Per-variant means over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub mean_accuracy_last_frame: Option<f64>,
    pub mean_accuracy_global: Option<f64>,
    pub visual_tokens: usize,
    pub flops_ratio_vs_full: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<VariantRun>,
    pub summaries: Vec<VariantSummary>,
    pub orderings: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    /// Comparison table: variant, frames kept at full detail, accuracy,
    /// FLOPs relative to the FULL baseline.
    pub fn csv(&self, frames: usize, compressed: usize) -> String {
        let mut out = String::from("variant,frames,accuracy,flops_pct\n");
        for s in &self.summaries {
            let kept = match s.variant {
                Variant::Full => frames,
                _ => frames - compressed,
            };
            out.push_str(&format!(
                "{},{},{:.4},{:.1}\n",
                s.variant.label(),
                kept,
                s.mean_accuracy,
                100.0 * s.flops_ratio_vs_full
            ));
        }
        out
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(mean(&present))
    }
}

/// Frame features for a whole dataset against one trained encoder; shared
/// across variants of the same seed.
fn features_for(vit: &SrcVitModel, samples: &[VideoSample]) -> Result<Vec<Vec<FrameFeatures>>> {
    samples
        .par_iter()
        .map(|s| s.frames.iter().map(|f| frame_features(vit, f)).collect())
        .collect()
}

fn prepared_from_features(
    cfg: &PipelineConfig,
    features: &[Vec<FrameFeatures>],
    samples: &[VideoSample],
) -> Result<Vec<PreparedSample>> {
    use crate::pipeline::assemble_visual_sources;
    features
        .iter()
        .zip(samples)
        .map(|(frames, sample)| {
            let (_, sources) = assemble_visual_sources(frames, cfg)?;
            let question_ids = sample
                .question
                .iter()
                .map(|w| crate::pipeline::question_symbol_id(w).map(|id| id as usize))
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedSample {
                sources,
                question_ids,
                answer: sample.answer.index(),
                kind: sample.kind,
            })
        })
        .collect()
}

struct SeedArtifacts {
    seed: u64,
    vit: SrcVitModel,
    train_features: Vec<Vec<FrameFeatures>>,
    test_features: Vec<Vec<FrameFeatures>>,
}

/// Train and evaluate every (variant, seed) pair on identical data.
///
/// Stage one runs once per seed and its encoder (with the per-dataset
/// frame encodings) is shared by all variants of that seed; stage two runs
/// per pair, in parallel.
pub fn run_ablation_suite(
    scene_corpus: &[(SynthScene, CaptionSet)],
    train: &[VideoSample],
    test: &[VideoSample],
    embedder: &TextEmbedder,
    cfg: &AblationSuiteConfig,
) -> Result<AblationReport> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    cfg.base.validate()?;

    let seed_artifacts: Vec<SeedArtifacts> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedArtifacts> {
            let enc_cfg = SrcVitConfig {
                grid: cfg.base.grid,
                dim: cfg.base.enc_dim,
                layers: cfg.base.enc_layers,
                seed,
                ..Default::default()
            };
            let mut vit = SrcVitModel::new(enc_cfg)?;
            let stage1 = Stage1Config { seed, ..cfg.stage1.clone() };
            train_stage1(&mut vit, embedder, scene_corpus, &stage1)?;
            let train_features = features_for(&vit, train)?;
            let test_features = features_for(&vit, test)?;
            Ok(SeedArtifacts { seed, vit, train_features, test_features })
        })
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, Variant)> = seed_artifacts
        .iter()
        .enumerate()
        .flat_map(|(i, _)| cfg.variants.iter().map(move |&v| (i, v)))
        .collect();

    let mut runs: Vec<VariantRun> = pairs
        .par_iter()
        .map(|&(seed_idx, variant)| -> Result<VariantRun> {
            let artifacts = &seed_artifacts[seed_idx];
            let run_cfg = PipelineConfig { variant, seed: artifacts.seed, ..cfg.base };
            let mut model = PipelineModel::new(run_cfg, artifacts.vit.clone())?;
            let prepared_train = prepared_from_features(&run_cfg, &artifacts.train_features, train)?;
            let prepared_test = prepared_from_features(&run_cfg, &artifacts.test_features, test)?;
            let stage2 = Stage2Config { seed: artifacts.seed, ..cfg.stage2.clone() };
            train_stage2(&mut model, &prepared_train, &stage2)?;
            let metrics: QaMetrics = evaluate_prepared(&model, &prepared_test)?;
            let question_len = train.first().map_or(0, |s| s.question.len());
            Ok(VariantRun {
                variant,
                seed: artifacts.seed,
                accuracy: metrics.accuracy,
                accuracy_last_frame: metrics.accuracy_last_frame,
                accuracy_global: metrics.accuracy_global,
                visual_tokens: visual_token_count(&run_cfg)?,
                flops_estimate: estimate_flops(&run_cfg, question_len)?,
            })
        })
        .collect::<Result<_>>()?;
    runs.sort_by_key(|r| {
        (cfg.variants.iter().position(|&v| v == r.variant).unwrap_or(usize::MAX), r.seed)
    });

    let summaries: Vec<VariantSummary> = cfg
        .variants
        .iter()
        .map(|&variant| {
            let of_variant: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == variant).collect();
            VariantSummary {
                variant,
                runs: of_variant.len(),
                mean_accuracy: mean(&of_variant.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
                mean_accuracy_last_frame: mean_opt(
                    &of_variant.iter().map(|r| r.accuracy_last_frame).collect::<Vec<_>>(),
                ),
                mean_accuracy_global: mean_opt(
                    &of_variant.iter().map(|r| r.accuracy_global).collect::<Vec<_>>(),
                ),
                visual_tokens: of_variant.first().map_or(0, |r| r.visual_tokens),
                flops_ratio_vs_full: of_variant
                    .first()
                    .map_or(1.0, |r| r.flops_estimate.ratio_vs_baseline),
            }
        })
        .collect();

    let orderings = ordering_checks(&summaries);
    Ok(AblationReport { runs, summaries, orderings })
}

/// Pairwise checks between the variants that are present. "≥" allows the
/// tie tolerance; the SRC-vs-REVERSE margin and the REVERSE chance band do
/// not.
fn ordering_checks(summaries: &[VariantSummary]) -> Vec<OrderingCheck> {
    let get = |v: Variant| summaries.iter().find(|s| s.variant == v).map(|s| s.mean_accuracy);
    let mut checks = Vec::new();
    let mut geq = |name: &str, lhs: Option<f64>, rhs: Option<f64>| {
        if let (Some(l), Some(r)) = (lhs, rhs) {
            checks.push(OrderingCheck {
                name: name.to_string(),
                lhs: l,
                rhs: r,
                satisfied: l >= r - TIE_TOLERANCE,
            });
        }
    };
    geq("full >= src", get(Variant::Full), get(Variant::Src));
    geq("src >= s_only", get(Variant::Src), get(Variant::SOnly));
    geq("src >= avg_pool", get(Variant::Src), get(Variant::AvgPool));
    geq("src >= no_sr", get(Variant::Src), get(Variant::NoSr));
    if let (Some(src), Some(reverse)) = (get(Variant::Src), get(Variant::Reverse)) {
        checks.push(OrderingCheck {
            name: format!("src >= reverse + {REVERSE_MARGIN}"),
            lhs: src,
            rhs: reverse,
            satisfied: src >= reverse + REVERSE_MARGIN,
        });
        let chance = 1.0 / Symbol::ALL.len() as f64;
        checks.push(OrderingCheck {
            name: format!("reverse <= chance + {REVERSE_CHANCE_BAND}"),
            lhs: reverse,
            rhs: chance + REVERSE_CHANCE_BAND,
            satisfied: reverse <= chance + REVERSE_CHANCE_BAND,
        });
    }
    checks
}
