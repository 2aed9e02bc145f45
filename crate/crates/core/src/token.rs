//! Shared token sequence types: the decoder input is an ordered list of
//! visual-then-text tokens, each carrying a kind, an embedding and a
//! 3-axis position.

use crate::layout::Quadrant;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TokenKind {
    Scene,
    Region(Quadrant),
    Patch { row: usize, col: usize },
    Text,
}

impl TokenKind {
    pub fn is_visual(&self) -> bool {
        !matches!(self, TokenKind::Text)
    }

    pub fn label(&self) -> String {
        match self {
            TokenKind::Scene => "scene".to_string(),
            TokenKind::Region(q) => format!("region_{}", q.label()),
            TokenKind::Patch { row, col } => format!("patch_{row}_{col}"),
            TokenKind::Text => "text".to_string(),
        }
    }
}

/// Decoder-side 3-axis rotary position (temporal, x = row, y = column).
/// Fractional x/y are produced by the compression tokens' center rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MRoPEPos {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Frame index for visual tokens; running text index for text tokens.
    pub index: usize,
    /// Decoder-space embedding for visual tokens; empty for text tokens,
    /// which carry a `symbol` resolved against the decoder's own table.
    pub embedding: Vec<f64>,
    pub symbol: Option<u16>,
    pub pos: Option<MRoPEPos>,
}

impl Token {
    pub fn visual(kind: TokenKind, frame: usize, embedding: Vec<f64>) -> Self {
        Token { kind, index: frame, embedding, symbol: None, pos: None }
    }

    pub fn text(text_index: usize, symbol: u16) -> Self {
        Token { kind: TokenKind::Text, index: text_index, embedding: Vec::new(), symbol: Some(symbol), pos: None }
    }
}

/// Ordered token sequence; all visual tokens precede all text tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn visual_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.kind.is_visual()).count()
    }

    pub fn text_count(&self) -> usize {
        self.len() - self.visual_count()
    }

    /// Debug dump: one CSV row per token (index, kind, t, x, y).
    pub fn positions_csv(&self) -> String {
        let mut out = String::from("token_index,kind,t,x,y\n");
        for (i, tok) in self.tokens.iter().enumerate() {
            let (t, x, y) = match tok.pos {
                Some(p) => (p.t, p.x, p.y),
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            out.push_str(&format!("{i},{},{t},{x},{y}\n", tok.kind.label()));
        }
        out
    }
}
