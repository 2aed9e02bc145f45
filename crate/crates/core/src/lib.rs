//! Scene-region token compression for video question answering, at desk
//! scale: a from-scratch ViT that emits five high-level compression tokens
//! per frame next to its patch tokens, a pipeline that substitutes early
//! frames with those tokens, the two training stages, ablation variants,
//! and an analytic FLOPs accountant.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod error;
pub mod gradcheck;
pub mod layout;
pub mod flops;
pub mod optim;
pub mod pipeline;
pub mod position;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod token;
pub mod vit;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, ParamStore};
pub use layout::{build_region_mask, Quadrant, RegionLayout, COMPRESSION_TOKENS};
pub use pipeline::{PipelineConfig, PipelineModel, Variant};
pub use position::{apply_mrope, assign_positions, center_index};
pub use rng::DetRng;
pub use synth::{CaptionSet, QuestionKind, Symbol, SynthScene, TextEmbedder, VideoSample};
pub use tensor::{layer_norm, masked_attention, AttnMask, Tensor2D};
pub use token::{MRoPEPos, Token, TokenKind, TokenSeq};
pub use vit::{EncodedFrame, SrcVitConfig, SrcVitModel};
