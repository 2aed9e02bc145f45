//! Analytic decoder-prefill FLOPs as a function of token counts and model
//! dimensions. Multiply-accumulate counts as 2 FLOPs. Per layer and token,
//! the linear term covers the QKVO projections plus the 4× MLP (12·d²);
//! the attention term is the quadratic 2·N²·d. Encoder cost is reported
//! separately as an informational field and never enters the ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::COMPRESSION_TOKENS;
use crate::pipeline::{visual_token_count, PipelineConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub visual_tokens: usize,
    pub total_tokens: usize,
    pub linear_flops: u64,
    pub attention_flops: u64,
    pub total: u64,
    /// This config against its own FULL baseline (same dims, all patches).
    pub ratio_vs_baseline: f64,
    /// Informational: encoder forward cost for all T frames.
    pub encoder_flops: u64,
}

fn linear_flops(layers: usize, dim: usize, tokens: usize) -> u64 {
    (layers * tokens * 12 * dim * dim) as u64
}

fn attention_flops(layers: usize, dim: usize, tokens: usize) -> u64 {
    (layers * 2 * tokens * tokens * dim) as u64
}

fn prefill_total(layers: usize, dim: usize, tokens: usize) -> u64 {
    linear_flops(layers, dim, tokens) + attention_flops(layers, dim, tokens)
}

/// Decoder prefill cost for one config and question length.
pub fn estimate_flops(cfg: &PipelineConfig, question_len: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    let visual = visual_token_count(cfg)?;
    let tokens = visual + question_len;
    let linear = linear_flops(cfg.dec_layers, cfg.dec_dim, tokens);
    let attention = attention_flops(cfg.dec_layers, cfg.dec_dim, tokens);
    let total = linear + attention;

    let baseline_cfg = PipelineConfig { variant: Variant::Full, ..*cfg };
    let baseline_tokens = visual_token_count(&baseline_cfg)? + question_len;
    let baseline_total = prefill_total(cfg.dec_layers, cfg.dec_dim, baseline_tokens);
    let ratio = if baseline_total == 0 {
        1.0
    } else {
        total as f64 / baseline_total as f64
    };

    let enc_tokens = cfg.patch_count() + COMPRESSION_TOKENS;
    let encoder = (cfg.frames as u64) * prefill_total(cfg.enc_layers, cfg.enc_dim, enc_tokens);

    Ok(FlopsReport {
        visual_tokens: visual,
        total_tokens: tokens,
        linear_flops: linear,
        attention_flops: attention,
        total,
        ratio_vs_baseline: ratio,
        encoder_flops: encoder,
    })
}

/// Prefill-cost ratio of two configs sharing decoder dimensions.
pub fn flops_ratio(variant: &PipelineConfig, baseline: &PipelineConfig, question_len: usize) -> Result<f64> {
    if variant.dec_layers != baseline.dec_layers
        || variant.dec_dim != baseline.dec_dim
        || variant.dec_heads != baseline.dec_heads
    {
        return Err(Error::Contract("flops ratio needs identical decoder dims".into()));
    }
    let v = estimate_flops(variant, question_len)?;
    let b = estimate_flops(baseline, question_len)?;
    if b.total == 0 {
        return Err(Error::Contract("baseline has zero FLOPs".into()));
    }
    Ok(v.total as f64 / b.total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, frames: usize, compressed: usize, grid: (usize, usize)) -> PipelineConfig {
        PipelineConfig { variant, frames, compressed, grid, ..Default::default() }
    }

    #[test]
    fn zero_tokens_means_zero_flops() {
        // NO_SR with everything compressed and no question tokens.
        let c = cfg(Variant::NoSr, 3, 3, (4, 4));
        let report = estimate_flops(&c, 0).unwrap();
        assert_eq!(report.total_tokens, 0);
        assert_eq!(report.linear_flops, 0);
        assert_eq!(report.attention_flops, 0);
        assert_eq!(report.total, 0);
    }

    #[test]
    fn doubling_tokens_doubles_linear_quadruples_attention() {
        // SRC T=5 M=4 n=16 gives 36 visual tokens; q=4 -> N=40, q=44 -> N=80.
        let c = cfg(Variant::Src, 5, 4, (4, 4));
        let a = estimate_flops(&c, 4).unwrap();
        let b = estimate_flops(&c, 44).unwrap();
        assert_eq!(a.total_tokens, 40);
        assert_eq!(b.total_tokens, 80);
        assert_eq!(b.linear_flops, 2 * a.linear_flops);
        assert_eq!(b.attention_flops, 4 * a.attention_flops);
    }

    #[test]
    fn paper_shape_config_matches_formula_oracle() {
        let c = cfg(Variant::Src, 5, 4, (4, 4));
        let report = estimate_flops(&c, 4).unwrap();
        assert_eq!(report.visual_tokens, 36);
        assert_eq!(report.total_tokens, 40);
        // Independent recomputation of the documented formula.
        let (layers, d) = (c.dec_layers as u64, c.dec_dim as u64);
        let n = 40u64;
        let n_full = 84u64;
        assert_eq!(report.linear_flops, layers * n * 12 * d * d);
        assert_eq!(report.attention_flops, layers * 2 * n * n * d);
        let full_total = layers * n_full * 12 * d * d + layers * 2 * n_full * n_full * d;
        let expect_ratio = report.total as f64 / full_total as f64;
        assert!((report.ratio_vs_baseline - expect_ratio).abs() < 1e-12);
        assert!((n as f64 / n_full as f64 - 0.476).abs() < 1e-3);
    }

    #[test]
    fn all_compressed_ratio_approaches_five_over_n_linear_regime() {
        // Huge dim pushes the linear term to dominate; M=T, q=0, so the
        // ratio against FULL tends to 5/n.
        let src = PipelineConfig {
            variant: Variant::Src,
            frames: 3,
            compressed: 3,
            grid: (8, 8),
            dec_dim: 4608,
            dec_heads: 4,
            ..Default::default()
        };
        let full = PipelineConfig { variant: Variant::Full, ..src };
        let ratio = flops_ratio(&src, &full, 0).unwrap();
        let limit = 5.0 / 64.0;
        assert!((ratio - limit).abs() / limit < 0.02, "ratio {ratio} vs limit {limit}");
    }

    #[test]
    fn monotone_decreasing_in_compressed_frames() {
        for t in 1..=6 {
            let mut last = u64::MAX;
            for m in 0..=t {
                let c = cfg(Variant::Src, t, m, (4, 4));
                let total = estimate_flops(&c, 4).unwrap().total;
                assert!(total < last, "T={t} M={m}: {total} !< {last}");
                last = total;
            }
        }
    }

    #[test]
    fn reverse_matches_src_exactly() {
        for m in 0..=5 {
            let src = estimate_flops(&cfg(Variant::Src, 5, m, (4, 4)), 4).unwrap();
            let rev = estimate_flops(&cfg(Variant::Reverse, 5, m, (4, 4)), 4).unwrap();
            assert_eq!(src.total, rev.total);
            assert_eq!(src.visual_tokens, rev.visual_tokens);
        }
    }

    #[test]
    fn src_with_zero_compressed_is_unity_ratio() {
        let c = cfg(Variant::Src, 5, 0, (4, 4));
        let report = estimate_flops(&c, 4).unwrap();
        assert_eq!(report.ratio_vs_baseline, 1.0);
        let full = cfg(Variant::Full, 5, 0, (4, 4));
        assert_eq!(flops_ratio(&c, &full, 4).unwrap(), 1.0);
    }

    #[test]
    fn identical_configs_have_unity_ratio() {
        let c = cfg(Variant::SOnly, 5, 3, (4, 4));
        assert_eq!(flops_ratio(&c, &c, 7).unwrap(), 1.0);
    }

    #[test]
    fn zero_baseline_is_contract_error() {
        let v = cfg(Variant::Src, 2, 0, (4, 4));
        let b = cfg(Variant::NoSr, 2, 2, (4, 4));
        assert!(matches!(flops_ratio(&v, &b, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_decoder_dims_rejected() {
        let a = cfg(Variant::Src, 5, 4, (4, 4));
        let mut b = a;
        b.dec_layers = 3;
        assert!(matches!(flops_ratio(&a, &b, 4), Err(Error::Contract(_))));
    }
}
