//! Decoder-side 3-axis rotary position embedding (M-RoPE).
//!
//! Patch tokens carry their integer (frame, row, col); scene and region
//! tokens get the center of the area they cover, which lands on
//! half-integers; text tokens run a single shared counter on all three
//! axes, starting right after the last visual temporal index.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::tensor::{rotate_pairs, Tensor2D};
use crate::token::{MRoPEPos, TokenKind, TokenSeq};

/// Rotary base frequency.
pub const ROPE_BASE: f64 = 10000.0;

/// Midpoint of the (row, col) ranges covered by a compression token.
///
/// Patch tokens use their own integer indices and are rejected here.
pub fn center_index(layout: &RegionLayout, kind: TokenKind) -> Result<(f64, f64)> {
    let quadrant = match kind {
        TokenKind::Scene => None,
        TokenKind::Region(q) => Some(q),
        other => {
            return Err(Error::Contract(format!(
                "center_index applies to scene/region tokens, not {}",
                other.label()
            )))
        }
    };
    let ((r0, r1), (c0, c1)) = layout.covered_ranges(quadrant);
    Ok(((r0 + r1) as f64 / 2.0, (c0 + c1) as f64 / 2.0))
}

/// Fill in every token's `MRoPEPos`.
///
/// Visual token of frame `f` gets temporal index `f`; text tokens get
/// `t = x = y` counting up from (max visual temporal index + 1), or from 0
/// when the sequence has no visual block.
pub fn assign_positions(seq: &mut TokenSeq, layout: &RegionLayout) -> Result<()> {
    let mut max_visual_t: Option<usize> = None;
    let mut seen_text = false;
    let mut text_cursor = 0usize;

    for tok in &mut seq.tokens {
        match tok.kind {
            TokenKind::Text => {
                if !seen_text {
                    seen_text = true;
                    text_cursor = max_visual_t.map_or(0, |t| t + 1);
                }
                let p = text_cursor as f64;
                tok.pos = Some(MRoPEPos { t: p, x: p, y: p });
                text_cursor += 1;
            }
            visual => {
                if seen_text {
                    return Err(Error::Contract(
                        "visual token after text block; sequence must be visual-then-text".into(),
                    ));
                }
                let frame = tok.index;
                max_visual_t = Some(max_visual_t.map_or(frame, |m| m.max(frame)));
                let (x, y) = match visual {
                    TokenKind::Patch { row, col } => (row as f64, col as f64),
                    kind => center_index(layout, kind)?,
                };
                tok.pos = Some(MRoPEPos { t: frame as f64, x, y });
            }
        }
    }
    Ok(())
}

/// Split a head dimension into equal t/x/y chunks, each an even count.
pub fn head_dim_split(head_dim: usize) -> Result<(usize, usize, usize)> {
    if head_dim % 6 != 0 {
        return Err(Error::Config(format!(
            "head dim {head_dim} cannot split into three equal even chunks"
        )));
    }
    let c = head_dim / 3;
    Ok((c, c, c))
}

/// Per-token cos/sin tables for one head: `positions.len()` rows and
/// `head_dim/2` pair columns laid out t-chunk, x-chunk, y-chunk.
///
/// Pair `j` inside a chunk of size `c` turns by `pos · base^(−2j/c)`;
/// fractional positions enter the angle directly.
pub fn rope_tables(positions: &[MRoPEPos], head_dim: usize) -> Result<(Tensor2D, Tensor2D)> {
    let (ct, cx, cy) = head_dim_split(head_dim)?;
    let pairs = head_dim / 2;
    let mut cos = Tensor2D::zeros(positions.len(), pairs);
    let mut sin = Tensor2D::zeros(positions.len(), pairs);
    for (r, pos) in positions.iter().enumerate() {
        let mut p = 0;
        for (chunk, coord) in [(ct, pos.t), (cx, pos.x), (cy, pos.y)] {
            for j in 0..chunk / 2 {
                let inv_freq = ROPE_BASE.powf(-2.0 * j as f64 / chunk as f64);
                let angle = coord * inv_freq;
                cos.set(r, p, angle.cos());
                sin.set(r, p, angle.sin());
                p += 1;
            }
        }
    }
    Ok((cos, sin))
}

/// Shared (Rc) tables for use on the autodiff tape.
pub fn rope_tables_shared(positions: &[MRoPEPos], head_dim: usize) -> Result<(Rc<Tensor2D>, Rc<Tensor2D>)> {
    let (cos, sin) = rope_tables(positions, head_dim)?;
    Ok((Rc::new(cos), Rc::new(sin)))
}

/// Rotate `embeddings` (one row per token) by each token's position.
///
/// Columns must be a whole number of heads of `head_dim`; each head is
/// rotated identically.
pub fn apply_mrope(embeddings: &Tensor2D, positions: &[MRoPEPos], head_dim: usize) -> Result<Tensor2D> {
    if embeddings.rows != positions.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows vs {} positions",
            embeddings.rows,
            positions.len()
        )));
    }
    if head_dim == 0 || embeddings.cols % head_dim != 0 {
        return Err(Error::Config(format!(
            "embedding width {} is not a multiple of head dim {head_dim}",
            embeddings.cols
        )));
    }
    let (cos, sin) = rope_tables(positions, head_dim)?;
    let heads = embeddings.cols / head_dim;
    let mut out = Tensor2D::zeros(embeddings.rows, embeddings.cols);
    for h in 0..heads {
        let mut slice = Tensor2D::zeros(embeddings.rows, head_dim);
        for r in 0..embeddings.rows {
            slice
                .row_mut(r)
                .copy_from_slice(&embeddings.row(r)[h * head_dim..(h + 1) * head_dim]);
        }
        let rotated = rotate_pairs(&slice, &cos, &sin, false);
        for r in 0..embeddings.rows {
            out.row_mut(r)[h * head_dim..(h + 1) * head_dim].copy_from_slice(rotated.row(r));
        }
    }
    Ok(out)
}
