//! The token-compression pipeline: per-frame encoding, early-frame
//! substitution by compression tokens, the vision-language mapper, a small
//! causal decoder with 3-axis rotary positions, stage-two training with a
//! frozen encoder, and the ablation variants.

use std::collections::HashMap;
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::ParamStore;
use crate::layout::{Quadrant, RegionLayout, COMPRESSION_TOKENS};
use crate::optim::RmsProp;
use crate::position::{assign_positions, head_dim_split, rope_tables};
use crate::rng::DetRng;
use crate::synth::{QuestionKind, Symbol, SynthScene, VideoSample};
use crate::tensor::{AttnMask, Tensor2D};
use crate::token::{MRoPEPos, Token, TokenKind, TokenSeq};
use crate::vit::{EncodedFrame, SrcVitModel};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Pipeline variants: all patches; early frames compressed to five tokens;
/// scene-token-only compression; average-pooled stand-ins; compressed
/// frames dropped; compression moved to the latest frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Src,
    SOnly,
    AvgPool,
    NoSr,
    Reverse,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::Src, Variant::SOnly, Variant::AvgPool, Variant::NoSr, Variant::Reverse];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Src => "src",
            Variant::SOnly => "s_only",
            Variant::AvgPool => "avg_pool",
            Variant::NoSr => "no_sr",
            Variant::Reverse => "reverse",
        }
    }

    pub fn from_label(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// T: frames per video.
    pub frames: usize,
    /// M: compressed-frame count (0 ≤ M ≤ T).
    pub compressed: usize,
    pub grid: (usize, usize),
    pub variant: Variant,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            frames: 5,
            compressed: 4,
            grid: (4, 4),
            variant: Variant::Src,
            enc_dim: 32,
            enc_layers: 2,
            dec_dim: 48,
            dec_layers: 2,
            dec_heads: 4,
            max_seq: 256,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn layout(&self) -> Result<RegionLayout> {
        RegionLayout::new(self.grid.0, self.grid.1)
    }

    pub fn head_dim(&self) -> usize {
        self.dec_dim / self.dec_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.compressed > self.frames {
            return Err(Error::Config(format!(
                "compressed frames M={} exceeds T={}",
                self.compressed, self.frames
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("pipeline needs at least one frame".into()));
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} must divide into {} heads",
                self.dec_dim, self.dec_heads
            )));
        }
        head_dim_split(self.head_dim())?;
        self.layout()?;
        Ok(())
    }
}

// ─── Question vocabulary ────────────────────────────────────────────────────

/// Largest grid edge the question vocabulary can address.
pub const MAX_GRID_EDGE: usize = 16;

/// Fixed question vocabulary: kind markers, attribute selectors, padding,
/// then one word per addressable cell.
pub fn question_vocabulary() -> Vec<String> {
    let mut words = vec![
        "q_detail".to_string(),
        "q_global".to_string(),
        "ask_weather".to_string(),
        "ask_daytime".to_string(),
        "pad".to_string(),
    ];
    for r in 0..MAX_GRID_EDGE {
        for c in 0..MAX_GRID_EDGE {
            words.push(format!("cell_{r}_{c}"));
        }
    }
    words
}

pub fn question_symbol_id(word: &str) -> Result<u16> {
    question_vocabulary()
        .iter()
        .position(|w| w == word)
        .map(|i| i as u16)
        .ok_or_else(|| Error::Vocab(format!("unknown question word {word}")))
}

pub fn answer_vocab_size() -> usize {
    Symbol::ALL.len()
}

// ─── Visual token layout ────────────────────────────────────────────────────

/// Which frames are represented by compression tokens under a variant.
fn is_compressed(cfg: &PipelineConfig, frame: usize) -> bool {
    match cfg.variant {
        Variant::Full => false,
        Variant::Reverse => frame >= cfg.frames - cfg.compressed,
        _ => frame < cfg.compressed,
    }
}

/// The (kind, frame) skeleton of the visual block, in order. The per-frame
/// internal order is [S, R_ul, R_ur, R_ll, R_lr] for compressed frames and
/// row-major patches otherwise.
pub fn visual_layout(cfg: &PipelineConfig) -> Result<Vec<(TokenKind, usize)>> {
    cfg.validate()?;
    let (rows, cols) = cfg.grid;
    let mut out = Vec::new();
    for frame in 0..cfg.frames {
        if is_compressed(cfg, frame) {
            match cfg.variant {
                Variant::NoSr => {}
                Variant::SOnly => out.push((TokenKind::Scene, frame)),
                _ => {
                    out.push((TokenKind::Scene, frame));
                    for q in Quadrant::ALL {
                        out.push((TokenKind::Region(q), frame));
                    }
                }
            }
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    out.push((TokenKind::Patch { row: r, col: c }, frame));
                }
            }
        }
    }
    Ok(out)
}

/// Number of visual tokens a config produces.
pub fn visual_token_count(cfg: &PipelineConfig) -> Result<usize> {
    Ok(visual_layout(cfg)?.len())
}

// ─── Per-frame features ─────────────────────────────────────────────────────

/// Everything a variant may need from one frame: the encoder output and
/// the mean-pooled raw patch embeddings over (full frame, 4 quadrants).
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub encoded: EncodedFrame,
    /// 5×enc_dim: rows [frame mean, UL mean, UR mean, LL mean, LR mean].
    pub pooled: Tensor2D,
}

/// Encode one frame and pool its raw patch embeddings.
pub fn frame_features(vit: &SrcVitModel, scene: &SynthScene) -> Result<FrameFeatures> {
    let encoded = vit.encode_frame(scene)?;
    let patches = vit.patch_embed(scene)?;
    let layout = vit.layout();
    let d = patches.cols;
    let mut pooled = Tensor2D::zeros(COMPRESSION_TOKENS, d);
    let mean_into = |indices: &[usize], row: &mut [f64]| {
        for &p in indices {
            for (acc, v) in row.iter_mut().zip(patches.row(p)) {
                *acc += v;
            }
        }
        for v in row.iter_mut() {
            *v /= indices.len() as f64;
        }
    };
    let all: Vec<usize> = (0..patches.rows).collect();
    mean_into(&all, pooled.row_mut(0));
    for q in Quadrant::ALL {
        mean_into(&layout.member_patch_indices(q), pooled.row_mut(q.token_slot()));
    }
    Ok(FrameFeatures { encoded, pooled })
}

/// Raw (pre-mapper) source vector for one visual token.
fn token_source<'a>(cfg: &PipelineConfig, features: &'a FrameFeatures, kind: TokenKind) -> Result<&'a [f64]> {
    let row = match kind {
        TokenKind::Scene => 0,
        TokenKind::Region(q) => q.token_slot(),
        TokenKind::Patch { row, col } => {
            return Ok(features.encoded.patches.row(row * cfg.grid.1 + col));
        }
        TokenKind::Text => return Err(Error::Contract("text token has no visual source".into())),
    };
    Ok(match cfg.variant {
        Variant::AvgPool => features.pooled.row(row),
        _ => features.encoded.compression.row(row),
    })
}

/// Pre-mapper source matrix for the whole visual block (n_vis×enc_dim).
pub fn assemble_visual_sources(frames: &[FrameFeatures], cfg: &PipelineConfig) -> Result<(Vec<(TokenKind, usize)>, Tensor2D)> {
    if frames.len() != cfg.frames {
        return Err(Error::Shape(format!(
            "{} encoded frames for T={}",
            frames.len(),
            cfg.frames
        )));
    }
    let layout = visual_layout(cfg)?;
    let mut sources = Vec::with_capacity(layout.len());
    for &(kind, frame) in &layout {
        sources.push(token_source(cfg, &frames[frame], kind)?.to_vec());
    }
    let matrix = if sources.is_empty() {
        Tensor2D::zeros(0, cfg.enc_dim)
    } else {
        Tensor2D::from_rows(&sources)
    };
    Ok((layout, matrix))
}

// ─── Vision-language mapper ─────────────────────────────────────────────────

/// Two-layer MLP carrying encoder-space vectors into decoder space. Every
/// visual token (compression and patch alike) passes through it.
#[derive(Debug, Clone)]
pub struct VlMapper {
    pub w1: Tensor2D,
    pub b1: Tensor2D,
    pub w2: Tensor2D,
    pub b2: Tensor2D,
}

impl VlMapper {
    pub fn output_dim(&self) -> usize {
        self.w2.cols
    }

    pub fn apply(&self, rows: &Tensor2D) -> Result<Tensor2D> {
        if rows.rows == 0 {
            return Ok(Tensor2D::zeros(0, self.output_dim()));
        }
        let mut h = rows.matmul(&self.w1)?;
        for i in 0..h.rows {
            for (v, b) in h.row_mut(i).iter_mut().zip(&self.b1.data) {
                *v += b;
            }
        }
        for v in h.data.iter_mut() {
            *v = gelu(*v);
        }
        let mut out = h.matmul(&self.w2)?;
        for i in 0..out.rows {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.b2.data) {
                *v += b;
            }
        }
        Ok(out)
    }
}

fn gelu(x: f64) -> f64 {
    let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Mapped visual token list (decoder-space embeddings, positions unset).
pub fn assemble_visual(mapper: &VlMapper, frames: &[FrameFeatures], cfg: &PipelineConfig) -> Result<Vec<Token>> {
    let (layout, sources) = assemble_visual_sources(frames, cfg)?;
    let mapped = mapper.apply(&sources)?;
    Ok(layout
        .into_iter()
        .enumerate()
        .map(|(i, (kind, frame))| Token::visual(kind, frame, mapped.row(i).to_vec()))
        .collect())
}

/// Visual block first, text block second; positions assigned.
pub fn assemble_input(visual: Vec<Token>, question: &[String], layout: &RegionLayout) -> Result<TokenSeq> {
    let mut seq = TokenSeq { tokens: visual };
    for (i, word) in question.iter().enumerate() {
        seq.tokens.push(Token::text(i, question_symbol_id(word)?));
    }
    assign_positions(&mut seq, layout)?;
    Ok(seq)
}

// ─── Decoder ────────────────────────────────────────────────────────────────

struct DecBound {
    map_w1: Var,
    map_b1: Var,
    map_w2: Var,
    map_b2: Var,
    text_embed: Var,
    layers: Vec<DecLayerBound>,
    final_g: Var,
    final_b: Var,
    out_w: Var,
    out_b: Var,
}

struct DecLayerBound {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

/// Sample-independent per-sequence-shape state: positions, causal mask and
/// rotary tables for one (variant, question length) template.
#[derive(Debug, Clone)]
pub struct SeqTemplate {
    pub positions: Vec<MRoPEPos>,
    pub causal: AttnMask,
    pub cos: Tensor2D,
    pub sin: Tensor2D,
    pub total_len: usize,
}

/// Positions for an arbitrary assembled sequence (already validated).
fn positions_of(seq: &TokenSeq) -> Result<Vec<MRoPEPos>> {
    seq.tokens
        .iter()
        .map(|t| t.pos.ok_or_else(|| Error::Contract("sequence token without position".into())))
        .collect()
}

/// The mapper + decoder, owning the frozen encoder it rides on.
#[derive(Clone)]
pub struct PipelineModel {
    pub cfg: PipelineConfig,
    pub vit: SrcVitModel,
    pub params: ParamStore,
}

impl PipelineModel {
    pub fn new(cfg: PipelineConfig, vit: SrcVitModel) -> Result<Self> {
        cfg.validate()?;
        if vit.cfg.grid != cfg.grid || vit.cfg.dim != cfg.enc_dim || vit.cfg.layers != cfg.enc_layers {
            return Err(Error::Config(format!(
                "encoder {}x{:?}/{} layers does not match pipeline config {}x{:?}/{} layers",
                vit.cfg.dim, vit.cfg.grid, vit.cfg.layers, cfg.enc_dim, cfg.grid, cfg.enc_layers
            )));
        }
        let d = cfg.dec_dim;
        let mut rng = DetRng::from_seed_stream(cfg.seed, 0xdec0);
        let mut params = ParamStore::new();
        let linear = |params: &mut ParamStore, name: &str, r: usize, c: usize, rng: &mut DetRng| {
            params.insert(name, Tensor2D::from_vec(r, c, rng.normal_vec(r * c, INIT_STD)))
        };
        linear(&mut params, "map.w1", cfg.enc_dim, d, &mut rng)?;
        params.insert("map.b1", Tensor2D::zeros(1, d))?;
        linear(&mut params, "map.w2", d, d, &mut rng)?;
        params.insert("map.b2", Tensor2D::zeros(1, d))?;
        linear(&mut params, "dec.text_embed", question_vocabulary().len(), d, &mut rng)?;
        for l in 0..cfg.dec_layers {
            params.insert(&format!("dec.l{l}.ln1.g"), Tensor2D::from_vec(1, d, vec![1.0; d]))?;
            params.insert(&format!("dec.l{l}.ln1.b"), Tensor2D::zeros(1, d))?;
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &format!("dec.l{l}.attn.{w}"), d, d, &mut rng)?;
            }
            params.insert(&format!("dec.l{l}.ln2.g"), Tensor2D::from_vec(1, d, vec![1.0; d]))?;
            params.insert(&format!("dec.l{l}.ln2.b"), Tensor2D::zeros(1, d))?;
            linear(&mut params, &format!("dec.l{l}.mlp.w1"), d, 4 * d, &mut rng)?;
            params.insert(&format!("dec.l{l}.mlp.b1"), Tensor2D::zeros(1, 4 * d))?;
            linear(&mut params, &format!("dec.l{l}.mlp.w2"), 4 * d, d, &mut rng)?;
            params.insert(&format!("dec.l{l}.mlp.b2"), Tensor2D::zeros(1, d))?;
        }
        params.insert("dec.final_ln.g", Tensor2D::from_vec(1, d, vec![1.0; d]))?;
        params.insert("dec.final_ln.b", Tensor2D::zeros(1, d))?;
        linear(&mut params, "dec.out.w", d, answer_vocab_size(), &mut rng)?;
        params.insert("dec.out.b", Tensor2D::zeros(1, answer_vocab_size()))?;
        Ok(PipelineModel { cfg, vit, params })
    }

    pub fn from_parts(cfg: PipelineConfig, vit: SrcVitModel, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        params.check_finite()?;
        Ok(PipelineModel { cfg, vit, params })
    }

    pub fn mapper(&self) -> Result<VlMapper> {
        Ok(VlMapper {
            w1: self.params.get("map.w1")?.clone(),
            b1: self.params.get("map.b1")?.clone(),
            w2: self.params.get("map.w2")?.clone(),
            b2: self.params.get("map.b2")?.clone(),
        })
    }

    fn bind(&self, tape: &mut Tape) -> Result<DecBound> {
        let p = &self.params;
        let mut layers = Vec::with_capacity(self.cfg.dec_layers);
        for l in 0..self.cfg.dec_layers {
            layers.push(DecLayerBound {
                ln1_g: tape.param(p, &format!("dec.l{l}.ln1.g"))?,
                ln1_b: tape.param(p, &format!("dec.l{l}.ln1.b"))?,
                wq: tape.param(p, &format!("dec.l{l}.attn.wq"))?,
                wk: tape.param(p, &format!("dec.l{l}.attn.wk"))?,
                wv: tape.param(p, &format!("dec.l{l}.attn.wv"))?,
                wo: tape.param(p, &format!("dec.l{l}.attn.wo"))?,
                ln2_g: tape.param(p, &format!("dec.l{l}.ln2.g"))?,
                ln2_b: tape.param(p, &format!("dec.l{l}.ln2.b"))?,
                mlp_w1: tape.param(p, &format!("dec.l{l}.mlp.w1"))?,
                mlp_b1: tape.param(p, &format!("dec.l{l}.mlp.b1"))?,
                mlp_w2: tape.param(p, &format!("dec.l{l}.mlp.w2"))?,
                mlp_b2: tape.param(p, &format!("dec.l{l}.mlp.b2"))?,
            });
        }
        Ok(DecBound {
            map_w1: tape.param(p, "map.w1")?,
            map_b1: tape.param(p, "map.b1")?,
            map_w2: tape.param(p, "map.w2")?,
            map_b2: tape.param(p, "map.b2")?,
            text_embed: tape.param(p, "dec.text_embed")?,
            layers,
            final_g: tape.param(p, "dec.final_ln.g")?,
            final_b: tape.param(p, "dec.final_ln.b")?,
            out_w: tape.param(p, "dec.out.w")?,
            out_b: tape.param(p, "dec.out.b")?,
        })
    }

    /// Template for the fixed token layout of (cfg, question_len).
    pub fn seq_template(&self, question_len: usize) -> Result<SeqTemplate> {
        let layout = self.cfg.layout()?;
        let kinds = visual_layout(&self.cfg)?;
        let mut seq = TokenSeq {
            tokens: kinds
                .iter()
                .map(|&(kind, frame)| Token::visual(kind, frame, Vec::new()))
                .collect(),
        };
        for i in 0..question_len {
            seq.tokens.push(Token::text(i, 0));
        }
        assign_positions(&mut seq, &layout)?;
        let positions = positions_of(&seq)?;
        let total_len = positions.len();
        if total_len == 0 {
            return Err(Error::Contract("cannot decode an empty sequence".into()));
        }
        if total_len > self.cfg.max_seq {
            return Err(Error::Capacity(format!(
                "sequence of {total_len} tokens exceeds max {}",
                self.cfg.max_seq
            )));
        }
        let (cos, sin) = rope_tables(&positions, self.cfg.head_dim())?;
        Ok(SeqTemplate { positions, causal: AttnMask::causal(total_len), cos, sin, total_len })
    }

    /// Decoder blocks over decoder-space inputs `x`; returns answer logits
    /// (1×|answers|) read at the final position.
    fn decode_logits_on_tape(
        &self,
        tape: &mut Tape,
        bound: &DecBound,
        x: Var,
        template: &SeqTemplate,
    ) -> Result<Var> {
        let heads = self.cfg.dec_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cos = Rc::new(template.cos.clone());
        let sin = Rc::new(template.sin.clone());
        let mut x = x;
        for layer in &bound.layers {
            let h = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, LN_EPS)?;
            let q = tape.matmul(h, layer.wq)?;
            let k = tape.matmul(h, layer.wk)?;
            let v = tape.matmul(h, layer.wv)?;
            let mut head_outs = Vec::with_capacity(heads);
            for i in 0..heads {
                let qh = tape.slice_cols(q, i * dh, dh)?;
                let kh = tape.slice_cols(k, i * dh, dh)?;
                let vh = tape.slice_cols(v, i * dh, dh)?;
                let qh = tape.rope(qh, cos.clone(), sin.clone())?;
                let kh = tape.rope(kh, cos.clone(), sin.clone())?;
                let logits = tape.matmul_tb(qh, kh)?;
                let logits = tape.scale(logits, scale);
                let weights = tape.masked_softmax(logits, &template.causal)?;
                head_outs.push(tape.matmul(weights, vh)?);
            }
            let merged = tape.concat_cols(&head_outs)?;
            let o = tape.matmul(merged, layer.wo)?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, LN_EPS)?;
            let m1 = tape.matmul(h2, layer.mlp_w1)?;
            let m1 = tape.add_row(m1, layer.mlp_b1)?;
            let act = tape.gelu(m1);
            let m2 = tape.matmul(act, layer.mlp_w2)?;
            let m2 = tape.add_row(m2, layer.mlp_b2)?;
            x = tape.add(x, m2)?;
        }
        let out = tape.layer_norm(x, bound.final_g, bound.final_b, LN_EPS)?;
        let last = tape.slice_rows(out, template.total_len - 1, 1)?;
        let logits = tape.matmul(last, bound.out_w)?;
        tape.add_row(logits, bound.out_b)
    }

    /// Training/eval path: raw visual sources through the on-tape mapper,
    /// text ids through the trainable table.
    fn forward_from_sources(
        &self,
        tape: &mut Tape,
        bound: &DecBound,
        sources: &Tensor2D,
        question_ids: &[usize],
        template: &SeqTemplate,
    ) -> Result<Var> {
        if sources.rows + question_ids.len() != template.total_len {
            return Err(Error::Shape(format!(
                "{} visual + {} text tokens vs template of {}",
                sources.rows,
                question_ids.len(),
                template.total_len
            )));
        }
        let text = tape.gather_rows(bound.text_embed, question_ids)?;
        let x = if sources.rows == 0 {
            text
        } else {
            let src = tape.constant(sources.clone());
            let h = tape.matmul(src, bound.map_w1)?;
            let h = tape.add_row(h, bound.map_b1)?;
            let h = tape.gelu(h);
            let mapped = tape.matmul(h, bound.map_w2)?;
            let mapped = tape.add_row(mapped, bound.map_b2)?;
            tape.concat_rows(&[mapped, text])?
        };
        self.decode_logits_on_tape(tape, bound, x, template)
    }

    /// Distribution over the answer vocabulary for an assembled sequence
    /// (visual embeddings already mapped; text resolved via the trainable
    /// table). Deterministic; reads the final position.
    pub fn decode_answer(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Contract("cannot decode an empty sequence".into()));
        }
        if seq.len() > self.cfg.max_seq {
            return Err(Error::Capacity(format!(
                "sequence of {} tokens exceeds max {}",
                seq.len(),
                self.cfg.max_seq
            )));
        }
        let positions = positions_of(seq)?;
        let (cos, sin) = rope_tables(&positions, self.cfg.head_dim())?;
        let template = SeqTemplate {
            causal: AttnMask::causal(seq.len()),
            cos,
            sin,
            total_len: seq.len(),
            positions,
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;

        let mut visual_rows: Vec<Vec<f64>> = Vec::new();
        let mut text_ids: Vec<usize> = Vec::new();
        for tok in &seq.tokens {
            match tok.kind {
                TokenKind::Text => {
                    let id = tok
                        .symbol
                        .ok_or_else(|| Error::Contract("text token without symbol".into()))?;
                    text_ids.push(id as usize);
                }
                _ => {
                    if tok.embedding.len() != self.cfg.dec_dim {
                        return Err(Error::Shape(format!(
                            "visual embedding of {} dims, decoder expects {}",
                            tok.embedding.len(),
                            self.cfg.dec_dim
                        )));
                    }
                    visual_rows.push(tok.embedding.clone());
                }
            }
        }
        let text = tape.gather_rows(bound.text_embed, &text_ids)?;
        let x = if visual_rows.is_empty() {
            text
        } else {
            let v = tape.constant(Tensor2D::from_rows(&visual_rows));
            if text_ids.is_empty() {
                v
            } else {
                tape.concat_rows(&[v, text])?
            }
        };
        let logits = self.decode_logits_on_tape(&mut tape, &bound, x, &template)?;
        let row = tape.value(logits).row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / sum).collect())
    }

    /// End-to-end inference for a video sample.
    pub fn answer_sample(&self, sample: &VideoSample) -> Result<usize> {
        let prep = self.prepare_sample(sample)?;
        let template = self.seq_template(prep.question_ids.len())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let logits =
            self.forward_from_sources(&mut tape, &bound, &prep.sources, &prep.question_ids, &template)?;
        let row = tape.value(logits).row(0);
        Ok(argmax(row))
    }

    /// Encode frames and resolve the question for one sample.
    pub fn prepare_sample(&self, sample: &VideoSample) -> Result<PreparedSample> {
        if sample.frames.len() != self.cfg.frames {
            return Err(Error::Shape(format!(
                "sample has {} frames, pipeline expects {}",
                sample.frames.len(),
                self.cfg.frames
            )));
        }
        let features: Vec<FrameFeatures> = sample
            .frames
            .iter()
            .map(|f| frame_features(&self.vit, f))
            .collect::<Result<_>>()?;
        let (_, sources) = assemble_visual_sources(&features, &self.cfg)?;
        let question_ids = sample
            .question
            .iter()
            .map(|w| question_symbol_id(w).map(|id| id as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSample {
            sources,
            question_ids,
            answer: sample.answer.index(),
            kind: sample.kind,
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frozen-encoder view of one sample, ready for the decoder.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sources: Tensor2D,
    pub question_ids: Vec<usize>,
    pub answer: usize,
    pub kind: QuestionKind,
}

// ─── Stage two ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config { steps: 600, batch_size: 8, lr: 3e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2CurveRow {
    pub step: usize,
    pub loss: f64,
}

/// Exact-match accuracy, overall and per question kind.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QaMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub accuracy_last_frame: Option<f64>,
    pub accuracy_global: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub curve: Vec<Stage2CurveRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Encode a whole dataset against the frozen encoder, in parallel, in
/// deterministic sample order.
pub fn prepare_dataset(model: &PipelineModel, samples: &[VideoSample]) -> Result<Vec<PreparedSample>> {
    samples.par_iter().map(|s| model.prepare_sample(s)).collect()
}

/// Train the mapper and decoder on answer cross-entropy. The encoder is
/// not part of the optimized store, so its parameters stay bit-identical.
pub fn train_stage2(
    model: &mut PipelineModel,
    prepared: &[PreparedSample],
    cfg: &Stage2Config,
) -> Result<Stage2Output> {
    if prepared.is_empty() {
        return Err(Error::Contract("stage-two training set is empty".into()));
    }
    let question_len = prepared[0].question_ids.len();
    if prepared.iter().any(|p| p.question_ids.len() != question_len) {
        return Err(Error::Contract("mixed question lengths in one training set".into()));
    }
    let template = model.seq_template(question_len)?;
    let batch = cfg.batch_size.max(1).min(prepared.len());
    let mut rng = DetRng::from_seed_stream(cfg.seed, 0x57a62);
    let mut opt = RmsProp::new(cfg.lr);
    let mut order = rng.permutation(prepared.len());
    let mut cursor = 0usize;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order = rng.permutation(prepared.len());
            cursor = 0;
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let mut losses = Vec::with_capacity(batch);
        for &idx in &order[cursor..cursor + batch] {
            let sample = &prepared[idx];
            let logits =
                model.forward_from_sources(&mut tape, &bound, &sample.sources, &sample.question_ids, &template)?;
            losses.push(tape.cross_entropy_mean(logits, &[sample.answer])?);
        }
        cursor += batch;
        let stacked = tape.concat_rows(&losses)?;
        let loss = tape.mean_all(stacked);
        let loss_v = tape.scalar(loss);
        if !loss_v.is_finite() {
            return Err(Error::Numeric(format!("stage-two loss diverged at step {step}")));
        }
        model.params.zero_grads();
        tape.backward_into(loss, &mut model.params)?;
        opt.step(&mut model.params, &[])?;
        curve.push(Stage2CurveRow { step, loss: loss_v });
    }
    model.params.check_finite()?;
    Ok(Stage2Output {
        initial_loss: curve.first().map(|r| r.loss).unwrap_or(0.0),
        final_loss: curve.last().map(|r| r.loss).unwrap_or(0.0),
        curve,
    })
}

/// Exact-match evaluation over prepared samples.
pub fn evaluate_prepared(model: &PipelineModel, prepared: &[PreparedSample]) -> Result<QaMetrics> {
    if prepared.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let question_len = prepared[0].question_ids.len();
    let template = model.seq_template(question_len)?;
    let hits: Vec<(QuestionKind, bool)> = prepared
        .par_iter()
        .map(|sample| -> Result<(QuestionKind, bool)> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let logits = model.forward_from_sources(
                &mut tape,
                &bound,
                &sample.sources,
                &sample.question_ids,
                &template,
            )?;
            let predicted = argmax(tape.value(logits).row(0));
            Ok((sample.kind, predicted == sample.answer))
        })
        .collect::<Result<_>>()?;

    let acc_of = |kind: Option<QuestionKind>| -> Option<f64> {
        let subset: Vec<bool> = hits
            .iter()
            .filter(|(k, _)| kind.is_none_or(|want| *k == want))
            .map(|(_, hit)| *hit)
            .collect();
        if subset.is_empty() {
            None
        } else {
            Some(subset.iter().filter(|&&h| h).count() as f64 / subset.len() as f64)
        }
    };
    Ok(QaMetrics {
        samples: prepared.len(),
        accuracy: acc_of(None).expect("non-empty"),
        accuracy_last_frame: acc_of(Some(QuestionKind::LastFrameDetail)),
        accuracy_global: acc_of(Some(QuestionKind::GlobalContext)),
    })
}

pub fn stage2_curve_csv(rows: &[Stage2CurveRow]) -> String {
    let mut out = String::from("step,loss\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    out
}

/// Stage-two loss + gradients as a function of the mapper/decoder store;
/// the gradient-check entry point.
pub fn stage2_loss_eval(
    cfg: &PipelineConfig,
    vit: &SrcVitModel,
    params: &ParamStore,
    prepared: &[PreparedSample],
) -> Result<(f64, HashMap<String, Tensor2D>)> {
    let model = PipelineModel::from_parts(
        *cfg,
        SrcVitModel::from_params(vit.cfg, vit.params.clone())?,
        params.clone(),
    )?;
    let question_len = prepared[0].question_ids.len();
    let template = model.seq_template(question_len)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let mut losses = Vec::with_capacity(prepared.len());
    for sample in prepared {
        let logits =
            model.forward_from_sources(&mut tape, &bound, &sample.sources, &sample.question_ids, &template)?;
        losses.push(tape.cross_entropy_mean(logits, &[sample.answer])?);
    }
    let stacked = tape.concat_rows(&losses)?;
    let loss = tape.mean_all(stacked);
    Ok((tape.scalar(loss), tape.grads_by_name(loss)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::store_digest;
    use crate::grad_check;
    use crate::synth::{gen_qa_dataset, gen_scene, QaMix};
    use crate::vit::SrcVitConfig;

    fn cfg(variant: Variant) -> PipelineConfig {
        PipelineConfig { variant, ..Default::default() }
    }

    fn model_for(variant: Variant, seed: u64) -> PipelineModel {
        let vit = SrcVitModel::new(SrcVitConfig { seed, ..Default::default() }).unwrap();
        PipelineModel::new(PipelineConfig { variant, seed, ..Default::default() }, vit).unwrap()
    }

    fn sample_for(seed: u64) -> VideoSample {
        gen_qa_dataset(seed, 1, 5, (4, 4), QaMix::LastFrame).unwrap().pop().unwrap()
    }

    #[test]
    fn token_counts_for_table_shapes() {
        assert_eq!(visual_token_count(&cfg(Variant::Full)).unwrap(), 80);
        assert_eq!(visual_token_count(&cfg(Variant::Src)).unwrap(), 36);
        assert_eq!(visual_token_count(&cfg(Variant::SOnly)).unwrap(), 20);
        assert_eq!(visual_token_count(&cfg(Variant::AvgPool)).unwrap(), 36);
        assert_eq!(visual_token_count(&cfg(Variant::NoSr)).unwrap(), 16);
        assert_eq!(visual_token_count(&cfg(Variant::Reverse)).unwrap(), 36);
    }

    #[test]
    fn reverse_keeps_first_frame_patches() {
        let layout = visual_layout(&cfg(Variant::Reverse)).unwrap();
        // Frame 0 contributes 16 patch tokens, frames 1..4 five each.
        assert!(matches!(layout[0], (TokenKind::Patch { row: 0, col: 0 }, 0)));
        assert_eq!(layout.iter().filter(|(_, f)| *f == 0).count(), 16);
        for f in 1..5 {
            assert_eq!(layout.iter().filter(|(_, fr)| *fr == f).count(), 5);
            let first = layout.iter().find(|(_, fr)| *fr == f).unwrap();
            assert_eq!(first.0, TokenKind::Scene);
        }
    }

    #[test]
    fn token_count_law_exhaustive() {
        // |SRC| = 5M + n(T-M); |FULL| = nT; |S_ONLY| = M + n(T-M);
        // |NO_SR| = n(T-M); REVERSE and AVG_POOL match SRC.
        for (rows, cols) in [(2, 2), (2, 4), (4, 4), (4, 6), (6, 6), (6, 8), (8, 8)] {
            let n = rows * cols;
            for t in 1..=8 {
                for m in 0..=t {
                    let base = PipelineConfig {
                        frames: t,
                        compressed: m,
                        grid: (rows, cols),
                        ..Default::default()
                    };
                    let count = |variant: Variant| {
                        visual_token_count(&PipelineConfig { variant, ..base }).unwrap()
                    };
                    assert_eq!(count(Variant::Src), 5 * m + n * (t - m));
                    assert_eq!(count(Variant::Full), n * t);
                    assert_eq!(count(Variant::SOnly), m + n * (t - m));
                    assert_eq!(count(Variant::NoSr), n * (t - m));
                    assert_eq!(count(Variant::Reverse), count(Variant::Src));
                    assert_eq!(count(Variant::AvgPool), count(Variant::Src));
                }
            }
        }
    }

    #[test]
    fn compressed_beyond_frames_is_config_error() {
        let bad = PipelineConfig { frames: 3, compressed: 4, ..Default::default() };
        assert!(matches!(visual_layout(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn assemble_input_positions_and_ordering() {
        let model = model_for(Variant::Src, 3);
        let sample = sample_for(4);
        let features: Vec<FrameFeatures> = sample
            .frames
            .iter()
            .map(|f| frame_features(&model.vit, f))
            .collect::<Result<_>>()
            .unwrap();
        let mapper = model.mapper().unwrap();
        let visual = assemble_visual(&mapper, &features, &model.cfg).unwrap();
        assert_eq!(visual.len(), 36);
        let seq = assemble_input(visual, &sample.question, &model.cfg.layout().unwrap()).unwrap();
        assert_eq!(seq.len(), 39);
        assert_eq!(seq.visual_count(), 36);
        // All visual tokens precede all text tokens.
        let first_text = seq.tokens.iter().position(|t| t.kind == TokenKind::Text).unwrap();
        assert!(seq.tokens[first_text..].iter().all(|t| t.kind == TokenKind::Text));
        // Text counter starts after the last frame (t = 4), so at 5.
        assert_eq!(seq.tokens[first_text].pos.unwrap(), MRoPEPos { t: 5.0, x: 5.0, y: 5.0 });
        assert_eq!(seq.tokens[38].pos.unwrap(), MRoPEPos { t: 7.0, x: 7.0, y: 7.0 });
    }

    #[test]
    fn text_only_sequence_is_allowed_for_no_sr_full_compression() {
        let vit = SrcVitModel::new(SrcVitConfig { seed: 9, ..Default::default() }).unwrap();
        let cfg = PipelineConfig {
            variant: Variant::NoSr,
            frames: 5,
            compressed: 5,
            seed: 9,
            ..Default::default()
        };
        let model = PipelineModel::new(cfg, vit).unwrap();
        let sample = sample_for(10);
        let features: Vec<FrameFeatures> = sample
            .frames
            .iter()
            .map(|f| frame_features(&model.vit, f))
            .collect::<Result<_>>()
            .unwrap();
        let mapper = model.mapper().unwrap();
        let visual = assemble_visual(&mapper, &features, &model.cfg).unwrap();
        assert!(visual.is_empty());
        let seq = assemble_input(visual, &sample.question, &model.cfg.layout().unwrap()).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.tokens[0].pos.unwrap(), MRoPEPos { t: 0.0, x: 0.0, y: 0.0 });
        let dist = model.decode_answer(&seq).unwrap();
        assert_eq!(dist.len(), 16);
    }

    #[test]
    fn src_with_zero_compressed_equals_full_bit_for_bit() {
        let sample = sample_for(11);
        let build = |variant: Variant| -> (TokenSeq, Vec<f64>) {
            let vit = SrcVitModel::new(SrcVitConfig { seed: 12, ..Default::default() }).unwrap();
            let cfg = PipelineConfig { variant, compressed: 0, seed: 12, ..Default::default() };
            let model = PipelineModel::new(cfg, vit).unwrap();
            let features: Vec<FrameFeatures> = sample
                .frames
                .iter()
                .map(|f| frame_features(&model.vit, f))
                .collect::<Result<_>>()
                .unwrap();
            let mapper = model.mapper().unwrap();
            let visual = assemble_visual(&mapper, &features, &model.cfg).unwrap();
            let seq = assemble_input(visual, &sample.question, &model.cfg.layout().unwrap()).unwrap();
            let dist = model.decode_answer(&seq).unwrap();
            (seq, dist)
        };
        let (seq_src, dist_src) = build(Variant::Src);
        let (seq_full, dist_full) = build(Variant::Full);
        assert_eq!(seq_src, seq_full);
        assert_eq!(dist_src, dist_full);
    }

    #[test]
    fn avg_pool_sources_are_patch_embedding_means() {
        let model = model_for(Variant::AvgPool, 13);
        let scene = gen_scene(&mut DetRng::from_seed(14), (4, 4)).unwrap();
        let features = frame_features(&model.vit, &scene).unwrap();
        let patches = model.vit.patch_embed(&scene).unwrap();
        // Full-frame mean.
        for j in 0..patches.cols {
            let mean: f64 = (0..16).map(|p| patches.get(p, j)).sum::<f64>() / 16.0;
            assert!((features.pooled.get(0, j) - mean).abs() < 1e-12);
        }
        // UL quadrant mean over patches {0,1,4,5}.
        for j in 0..patches.cols {
            let mean: f64 =
                [0, 1, 4, 5].iter().map(|&p| patches.get(p, j)).sum::<f64>() / 4.0;
            assert!((features.pooled.get(1, j) - mean).abs() < 1e-12);
        }
        // The assembled compressed-frame sources use the pooled rows.
        let all_features = vec![features.clone(); 5];
        let (layout, sources) = assemble_visual_sources(&all_features, &model.cfg).unwrap();
        assert_eq!(layout[0].0, TokenKind::Scene);
        assert_eq!(sources.row(0), features.pooled.row(0));
        assert_eq!(sources.row(1), features.pooled.row(1));
    }

    #[test]
    fn decode_distribution_sums_to_one() {
        let model = model_for(Variant::Src, 15);
        let sample = sample_for(16);
        let prep = model.prepare_sample(&sample).unwrap();
        let template = model.seq_template(3).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let logits = model
            .forward_from_sources(&mut tape, &bound, &prep.sources, &prep.question_ids, &template)
            .unwrap();
        let row = tape.value(logits).row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let dist: Vec<f64> = row.iter().map(|&z| (z - max).exp() / sum).collect();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn untrained_decoder_is_near_uniform_over_seeds() {
        let sample = sample_for(17);
        let mut entropies = Vec::new();
        for seed in 0..32 {
            let model = model_for(Variant::Src, 1000 + seed);
            let prep = model.prepare_sample(&sample).unwrap();
            let template = model.seq_template(3).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let logits = model
                .forward_from_sources(&mut tape, &bound, &prep.sources, &prep.question_ids, &template)
                .unwrap();
            let row = tape.value(logits).row(0);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let entropy: f64 = row
                .iter()
                .map(|&z| {
                    let p = (z - max).exp() / sum;
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            entropies.push(entropy);
        }
        let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
        assert!(mean >= 0.9 * 16f64.ln(), "mean entropy {mean}");
    }

    #[test]
    fn over_capacity_sequence_is_capacity_error() {
        let vit = SrcVitModel::new(SrcVitConfig { seed: 18, ..Default::default() }).unwrap();
        let cfg = PipelineConfig { max_seq: 10, seed: 18, ..Default::default() };
        let model = PipelineModel::new(cfg, vit).unwrap();
        assert!(matches!(model.seq_template(3), Err(Error::Capacity(_))));
    }

    #[test]
    fn permuting_text_tokens_changes_the_output() {
        let model = model_for(Variant::Src, 19);
        let sample = sample_for(20);
        let features: Vec<FrameFeatures> = sample
            .frames
            .iter()
            .map(|f| frame_features(&model.vit, f))
            .collect::<Result<_>>()
            .unwrap();
        let mapper = model.mapper().unwrap();
        let layout = model.cfg.layout().unwrap();
        let visual = assemble_visual(&mapper, &features, &model.cfg).unwrap();
        let seq = assemble_input(visual.clone(), &sample.question, &layout).unwrap();
        let mut swapped_q = sample.question.clone();
        swapped_q.swap(1, 2);
        let seq_swapped = assemble_input(visual, &swapped_q, &layout).unwrap();
        let a = model.decode_answer(&seq).unwrap();
        let b = model.decode_answer(&seq_swapped).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-12, "swapping text tokens must change the distribution");
    }

    #[test]
    fn stage2_gradients_pass_finite_difference_check() {
        let enc_cfg = SrcVitConfig { grid: (2, 2), dim: 8, layers: 1, heads: 2, joint_dim: 8, seed: 21 };
        let vit = SrcVitModel::new(enc_cfg).unwrap();
        let cfg = PipelineConfig {
            frames: 2,
            compressed: 1,
            grid: (2, 2),
            variant: Variant::Src,
            enc_dim: 8,
            enc_layers: 1,
            dec_dim: 12,
            dec_layers: 1,
            dec_heads: 2,
            max_seq: 64,
            seed: 21,
        };
        let model = PipelineModel::new(cfg, vit).unwrap();
        let samples = gen_qa_dataset(21, 2, 2, (2, 2), QaMix::LastFrame).unwrap();
        let prepared = prepare_dataset(&model, &samples).unwrap();
        let err = grad_check(
            &|params: &ParamStore| stage2_loss_eval(&cfg, &model.vit, params, &prepared),
            &model.params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "stage-two grad check rel err {err}");
    }

    #[test]
    fn stage2_training_reduces_loss_and_freezes_encoder() {
        let mut model = model_for(Variant::Src, 23);
        let samples = gen_qa_dataset(23, 32, 5, (4, 4), QaMix::Mixed).unwrap();
        let prepared = prepare_dataset(&model, &samples).unwrap();
        let digest_before = store_digest(&model.vit.params).unwrap();
        let out = train_stage2(
            &mut model,
            &prepared,
            &Stage2Config { steps: 40, batch_size: 8, lr: 3e-3, seed: 23 },
        )
        .unwrap();
        assert!(out.final_loss < out.initial_loss, "{} !< {}", out.final_loss, out.initial_loss);
        assert_eq!(digest_before, store_digest(&model.vit.params).unwrap());
        let metrics = evaluate_prepared(&model, &prepared).unwrap();
        assert_eq!(metrics.samples, 32);
        assert!(metrics.accuracy_last_frame.is_some());
        assert!(metrics.accuracy_global.is_some());
    }

    #[test]
    fn stage2_is_deterministic_per_seed() {
        let samples = gen_qa_dataset(29, 16, 5, (4, 4), QaMix::LastFrame).unwrap();
        let run = || {
            let mut model = model_for(Variant::Src, 29);
            let prepared = prepare_dataset(&model, &samples).unwrap();
            train_stage2(
                &mut model,
                &prepared,
                &Stage2Config { steps: 10, batch_size: 4, lr: 3e-3, seed: 29 },
            )
            .unwrap()
            .curve
        };
        assert_eq!(run(), run());
    }
}
