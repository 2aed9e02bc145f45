//! The scene-region compression encoder: patch embedding, five learnable
//! high-level tokens, a region-restricted attention mask applied at every
//! layer, and projection heads into the joint image/text space.
//!
//! Token order is fixed as [S, R_ul, R_ur, R_ll, R_lr, P_1..P_n]; the mask
//! blocks exactly region→out-of-quadrant-patch attention and nothing else.


use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::ParamStore;
use crate::layout::{build_region_mask, Quadrant, RegionLayout, COMPRESSION_TOKENS};
use crate::rng::DetRng;
use crate::synth::{cell_feature_index, SynthScene, CELL_FEATURES};
use crate::tensor::{AttnMask, Tensor2D};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Learnable temperature bounds (stored as log).
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrcVitConfig {
    pub grid: (usize, usize),
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub joint_dim: usize,
    pub seed: u64,
}

impl Default for SrcVitConfig {
    fn default() -> Self {
        SrcVitConfig { grid: (4, 4), dim: 32, layers: 2, heads: 4, joint_dim: 32, seed: 0 }
    }
}

impl SrcVitConfig {
    pub fn layout(&self) -> Result<RegionLayout> {
        RegionLayout::new(self.grid.0, self.grid.1)
    }

    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_count(&self) -> usize {
        self.patch_count() + COMPRESSION_TOKENS
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} must divide into {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        self.layout().map(|_| ())
    }
}

/// Per-frame encoder output: the five compression tokens and the patches.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub compression: Tensor2D,
    pub patches: Tensor2D,
}

impl EncodedFrame {
    pub fn scene_row(&self) -> &[f64] {
        self.compression.row(0)
    }

    pub fn region_row(&self, q: Quadrant) -> &[f64] {
        self.compression.row(q.token_slot())
    }
}

/// Scene and region features projected into the joint space, unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeatures {
    pub scene: Vec<f64>,
    pub regions: [Vec<f64>; 4],
}

#[derive(Clone)]
pub struct SrcVitModel {
    pub cfg: SrcVitConfig,
    pub params: ParamStore,
    mask: AttnMask,
}

/// Tape handles for every encoder parameter, bound once per tape.
pub struct VitBound {
    pub patch_embed: Var,
    tokens: [Var; COMPRESSION_TOKENS],
    pos_table: Var,
    layers: Vec<LayerBound>,
    final_g: Var,
    final_b: Var,
    pub proj_scene: Var,
    pub proj_region: Var,
}

struct LayerBound {
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

const TOKEN_NAMES: [&str; COMPRESSION_TOKENS] =
    ["tokens.scene", "tokens.region_ul", "tokens.region_ur", "tokens.region_ll", "tokens.region_lr"];

impl SrcVitModel {
    pub fn new(cfg: SrcVitConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = DetRng::from_seed_stream(cfg.seed, 0x517);
        let mut params = ParamStore::new();
        let d = cfg.dim;
        let linear = |params: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut DetRng| {
            params.insert(name, Tensor2D::from_vec(rows, cols, rng.normal_vec(rows * cols, INIT_STD)))
        };

        linear(&mut params, "patch_embed.w", CELL_FEATURES, d, &mut rng)?;
        for name in TOKEN_NAMES {
            linear(&mut params, name, 1, d, &mut rng)?;
        }
        linear(&mut params, "pos_table", cfg.token_count(), d, &mut rng)?;
        for l in 0..cfg.layers {
            params.insert(&format!("enc.l{l}.ln1.g"), Tensor2D::from_vec(1, d, vec![1.0; d]))?;
            params.insert(&format!("enc.l{l}.ln1.b"), Tensor2D::zeros(1, d))?;
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &format!("enc.l{l}.attn.{w}"), d, d, &mut rng)?;
            }
            params.insert(&format!("enc.l{l}.ln2.g"), Tensor2D::from_vec(1, d, vec![1.0; d]))?;
            params.insert(&format!("enc.l{l}.ln2.b"), Tensor2D::zeros(1, d))?;
            linear(&mut params, &format!("enc.l{l}.mlp.w1"), d, 4 * d, &mut rng)?;
            params.insert(&format!("enc.l{l}.mlp.b1"), Tensor2D::zeros(1, 4 * d))?;
            linear(&mut params, &format!("enc.l{l}.mlp.w2"), 4 * d, d, &mut rng)?;
            params.insert(&format!("enc.l{l}.mlp.b2"), Tensor2D::zeros(1, d))?;
        }
        params.insert("enc.final_ln.g", Tensor2D::from_vec(1, d, vec![1.0; d]))?;
        params.insert("enc.final_ln.b", Tensor2D::zeros(1, d))?;
        linear(&mut params, "proj.scene.w", d, cfg.joint_dim, &mut rng)?;
        linear(&mut params, "proj.region.w", d, cfg.joint_dim, &mut rng)?;
        params.insert("contrast.log_tau", Tensor2D::from_vec(1, 1, vec![TAU_INIT.ln()]))?;

        let mask = build_region_mask(&cfg.layout()?);
        Ok(SrcVitModel { cfg, params, mask })
    }

    /// Rebuild a model around an existing parameter store (checkpoint load).
    pub fn from_params(cfg: SrcVitConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mask = build_region_mask(&cfg.layout()?);
        let model = SrcVitModel { cfg, params, mask };
        model.params.check_finite()?;
        Ok(model)
    }

    pub fn layout(&self) -> RegionLayout {
        self.cfg.layout().expect("validated at construction")
    }

    pub fn region_mask(&self) -> &AttnMask {
        &self.mask
    }

    /// One-hot cell features of a scene, row-major patches (n×17).
    pub fn scene_features(&self, scene: &SynthScene) -> Result<Tensor2D> {
        let (r, c) = self.cfg.grid;
        if scene.rows() != r || scene.cols() != c {
            return Err(Error::Shape(format!(
                "scene {}x{} does not match configured grid {r}x{c}",
                scene.rows(),
                scene.cols()
            )));
        }
        let mut out = Tensor2D::zeros(r * c, CELL_FEATURES);
        for row in 0..r {
            for col in 0..c {
                out.set(row * c + col, cell_feature_index(scene.cell(row, col)), 1.0);
            }
        }
        Ok(out)
    }

    /// Patch embedding: one-hot cell features through E_p, row-major order.
    pub fn patch_embed(&self, scene: &SynthScene) -> Result<Tensor2D> {
        self.scene_features(scene)?.matmul(self.params.get("patch_embed.w")?)
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<VitBound> {
        let p = &self.params;
        let tokens = [
            tape.param(p, TOKEN_NAMES[0])?,
            tape.param(p, TOKEN_NAMES[1])?,
            tape.param(p, TOKEN_NAMES[2])?,
            tape.param(p, TOKEN_NAMES[3])?,
            tape.param(p, TOKEN_NAMES[4])?,
        ];
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            layers.push(LayerBound {
                ln1_g: tape.param(p, &format!("enc.l{l}.ln1.g"))?,
                ln1_b: tape.param(p, &format!("enc.l{l}.ln1.b"))?,
                wq: tape.param(p, &format!("enc.l{l}.attn.wq"))?,
                wk: tape.param(p, &format!("enc.l{l}.attn.wk"))?,
                wv: tape.param(p, &format!("enc.l{l}.attn.wv"))?,
                wo: tape.param(p, &format!("enc.l{l}.attn.wo"))?,
                ln2_g: tape.param(p, &format!("enc.l{l}.ln2.g"))?,
                ln2_b: tape.param(p, &format!("enc.l{l}.ln2.b"))?,
                mlp_w1: tape.param(p, &format!("enc.l{l}.mlp.w1"))?,
                mlp_b1: tape.param(p, &format!("enc.l{l}.mlp.b1"))?,
                mlp_w2: tape.param(p, &format!("enc.l{l}.mlp.w2"))?,
                mlp_b2: tape.param(p, &format!("enc.l{l}.mlp.b2"))?,
            });
        }
        Ok(VitBound {
            patch_embed: tape.param(p, "patch_embed.w")?,
            tokens,
            pos_table: tape.param(p, "pos_table")?,
            layers,
            final_g: tape.param(p, "enc.final_ln.g")?,
            final_b: tape.param(p, "enc.final_ln.b")?,
            proj_scene: tape.param(p, "proj.scene.w")?,
            proj_region: tape.param(p, "proj.region.w")?,
        })
    }

    /// [S, R..., patches] + positional table, on the tape.
    fn embed_on_tape(&self, tape: &mut Tape, bound: &VitBound, scene: &SynthScene) -> Result<Var> {
        let features = tape.constant(self.scene_features(scene)?);
        let patches = tape.matmul(features, bound.patch_embed)?;
        let mut parts: Vec<Var> = bound.tokens.to_vec();
        parts.push(patches);
        let tokens = tape.concat_rows(&parts)?;
        tape.add(tokens, bound.pos_table)
    }

    /// Encoder blocks over an already-embedded token matrix. Returns the
    /// final tokens and, when requested, every layer's per-head attention
    /// weights.
    fn blocks_on_tape(
        &self,
        tape: &mut Tape,
        bound: &VitBound,
        mut x: Var,
        collect_attn: bool,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Vec::new();
        for layer in &bound.layers {
            let h = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, LN_EPS)?;
            let q = tape.matmul(h, layer.wq)?;
            let k = tape.matmul(h, layer.wk)?;
            let v = tape.matmul(h, layer.wv)?;
            let mut head_outs = Vec::with_capacity(heads);
            let mut layer_attn = Vec::with_capacity(heads);
            for i in 0..heads {
                let qh = tape.slice_cols(q, i * dh, dh)?;
                let kh = tape.slice_cols(k, i * dh, dh)?;
                let vh = tape.slice_cols(v, i * dh, dh)?;
                let logits = tape.matmul_tb(qh, kh)?;
                let logits = tape.scale(logits, scale);
                let weights = tape.masked_softmax(logits, &self.mask)?;
                if collect_attn {
                    layer_attn.push(weights);
                }
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
            if collect_attn {
                attn.push(layer_attn);
            }
        }
        let out = tape.layer_norm(x, bound.final_g, bound.final_b, LN_EPS)?;
        Ok((out, attn))
    }

    /// Full encoder forward on a tape; gradient-ready.
    pub fn encode_on_tape(&self, tape: &mut Tape, bound: &VitBound, scene: &SynthScene) -> Result<Var> {
        let embedded = self.embed_on_tape(tape, bound, scene)?;
        Ok(self.blocks_on_tape(tape, bound, embedded, false)?.0)
    }

    fn split_output(&self, out: &Tensor2D) -> EncodedFrame {
        let n = self.cfg.patch_count();
        let d = self.cfg.dim;
        let compression = Tensor2D::from_vec(
            COMPRESSION_TOKENS,
            d,
            out.data[..COMPRESSION_TOKENS * d].to_vec(),
        );
        let patches = Tensor2D::from_vec(n, d, out.data[COMPRESSION_TOKENS * d..].to_vec());
        EncodedFrame { compression, patches }
    }

    /// Deterministic per-frame encoding split into [compression | patches].
    pub fn encode_frame(&self, scene: &SynthScene) -> Result<EncodedFrame> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = self.encode_on_tape(&mut tape, &bound, scene)?;
        let value = tape.value(out);
        value.check_finite("encoded frame")?;
        Ok(self.split_output(value))
    }

    /// Encoding plus every layer's per-head attention weights
    /// (layer-major, head-minor).
    pub fn encode_frame_with_attn(&self, scene: &SynthScene) -> Result<(EncodedFrame, Vec<Vec<Tensor2D>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let embedded = self.embed_on_tape(&mut tape, &bound, scene)?;
        let (out, attn) = self.blocks_on_tape(&mut tape, &bound, embedded, true)?;
        let weights = attn
            .iter()
            .map(|layer| layer.iter().map(|&w| tape.value(w).clone()).collect())
            .collect();
        Ok((self.split_output(tape.value(out)), weights))
    }

    /// Embedded token matrix for a scene ((n+5)×d, positional table added);
    /// entry point for perturbation experiments.
    pub fn embed_tokens(&self, scene: &SynthScene) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let v = self.embed_on_tape(&mut tape, &bound, scene)?;
        Ok(tape.value(v).clone())
    }

    /// Run the encoder blocks on externally supplied embedded tokens.
    pub fn encode_embedded(&self, embedded: &Tensor2D) -> Result<EncodedFrame> {
        if embedded.rows != self.cfg.token_count() || embedded.cols != self.cfg.dim {
            return Err(Error::Shape(format!(
                "embedded tokens {}x{} vs expected {}x{}",
                embedded.rows,
                embedded.cols,
                self.cfg.token_count(),
                self.cfg.dim
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(embedded.clone());
        let (out, _) = self.blocks_on_tape(&mut tape, &bound, x, false)?;
        Ok(self.split_output(tape.value(out)))
    }

    /// Project the five compression tokens into the joint space (scene head
    /// for the scene token, region head shared by the four region tokens)
    /// and L2-normalize. On the tape: returns (scene 1×dj, regions 4×dj).
    pub fn project_on_tape(&self, tape: &mut Tape, bound: &VitBound, encoded: Var) -> Result<(Var, Var)> {
        let scene = tape.slice_rows(encoded, 0, 1)?;
        let regions = tape.slice_rows(encoded, 1, 4)?;
        let scene = tape.matmul(scene, bound.proj_scene)?;
        let scene = tape.l2_normalize_rows(scene)?;
        let regions = tape.matmul(regions, bound.proj_region)?;
        let regions = tape.l2_normalize_rows(regions)?;
        Ok((scene, regions))
    }

    /// Unit-norm joint-space features for an encoded frame.
    pub fn project_image_features(&self, encoded: &EncodedFrame) -> Result<ProjectedFeatures> {
        if encoded.compression.rows != COMPRESSION_TOKENS || encoded.compression.cols != self.cfg.dim {
            return Err(Error::Shape(format!(
                "compression block {}x{} vs expected {}x{}",
                encoded.compression.rows,
                encoded.compression.cols,
                COMPRESSION_TOKENS,
                self.cfg.dim
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let comp = tape.constant(encoded.compression.clone());
        let (scene, regions) = self.project_on_tape(&mut tape, &bound, comp)?;
        let scene = tape.value(scene).row(0).to_vec();
        let r = tape.value(regions);
        Ok(ProjectedFeatures {
            scene,
            regions: [r.row(0).to_vec(), r.row(1).to_vec(), r.row(2).to_vec(), r.row(3).to_vec()],
        })
    }

    /// Current temperature, clamped into [TAU_MIN, TAU_MAX].
    pub fn tau(&self) -> f64 {
        self.params
            .get("contrast.log_tau")
            .map(|t| t.data[0].exp())
            .unwrap_or(TAU_INIT)
            .clamp(TAU_MIN, TAU_MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, Symbol};

    fn tiny_model(seed: u64) -> SrcVitModel {
        SrcVitModel::new(SrcVitConfig { seed, ..Default::default() }).unwrap()
    }

    fn scene_for(seed: u64) -> SynthScene {
        gen_scene(&mut DetRng::from_seed(seed), (4, 4)).unwrap()
    }

    #[test]
    fn patch_embed_identity_recovers_one_hot() {
        let mut model = SrcVitModel::new(SrcVitConfig {
            dim: CELL_FEATURES,
            heads: 1,
            ..Default::default()
        })
        .unwrap();
        let mut eye = Tensor2D::zeros(CELL_FEATURES, CELL_FEATURES);
        for i in 0..CELL_FEATURES {
            eye.set(i, i, 1.0);
        }
        *model.params.get_mut("patch_embed.w").unwrap() = eye;
        let scene = scene_for(1);
        let embedded = model.patch_embed(&scene).unwrap();
        let features = model.scene_features(&scene).unwrap();
        assert_eq!(embedded, features);
    }

    #[test]
    fn patch_embed_is_local_to_cells() {
        let model = tiny_model(0);
        let a = scene_for(2);
        let mut b = a.clone();
        b.grid[3][3] = Some(Symbol::CarYellow);
        b.grid[0][1] = None;
        let ea = model.patch_embed(&a).unwrap();
        let eb = model.patch_embed(&b).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let i = row * 4 + col;
                if a.cell(row, col) == b.cell(row, col) {
                    assert_eq!(ea.row(i), eb.row(i), "cell ({row},{col})");
                } else {
                    assert_ne!(ea.row(i), eb.row(i), "cell ({row},{col})");
                }
            }
        }
    }

    #[test]
    fn patch_embed_matches_matmul_oracle() {
        let model = tiny_model(3);
        let scene = scene_for(4);
        let embedded = model.patch_embed(&scene).unwrap();
        let w = model.params.get("patch_embed.w").unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let feature = cell_feature_index(scene.cell(row, col));
                // One-hot times W selects a row of W.
                assert_eq!(embedded.row(row * 4 + col), w.row(feature));
            }
        }
    }

    #[test]
    fn encode_frame_shapes_and_determinism() {
        let model = tiny_model(5);
        let scene = scene_for(6);
        let a = model.encode_frame(&scene).unwrap();
        assert_eq!((a.compression.rows, a.compression.cols), (5, 32));
        assert_eq!((a.patches.rows, a.patches.cols), (16, 32));
        let b = model.encode_frame(&scene).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let model = tiny_model(5);
        let scene = gen_scene(&mut DetRng::from_seed(0), (6, 6)).unwrap();
        assert!(matches!(model.encode_frame(&scene), Err(Error::Shape(_))));
    }

    #[test]
    fn one_layer_perturbation_stays_in_quadrant() {
        let model = SrcVitModel::new(SrcVitConfig { layers: 1, seed: 7, ..Default::default() }).unwrap();
        let scene = scene_for(8);
        let embedded = model.embed_tokens(&scene).unwrap();
        let base = model.encode_embedded(&embedded).unwrap();

        // Perturb one LR patch (row 3, col 2 -> patch 14, token row 19).
        let mut perturbed = embedded.clone();
        let token_row = COMPRESSION_TOKENS + 3 * 4 + 2;
        for j in 0..perturbed.cols {
            let v = perturbed.get(token_row, j);
            perturbed.set(token_row, j, v + 0.5);
        }
        let out = model.encode_embedded(&perturbed).unwrap();

        assert_ne!(base.scene_row(), out.scene_row(), "scene token must change");
        assert_ne!(
            base.region_row(Quadrant::LowerRight),
            out.region_row(Quadrant::LowerRight),
            "own region must change"
        );
        for q in [Quadrant::UpperLeft, Quadrant::UpperRight, Quadrant::LowerLeft] {
            assert_eq!(base.region_row(q), out.region_row(q), "{q:?} must be untouched");
        }
    }

    #[test]
    fn deep_model_region_weights_are_zero_outside_quadrant() {
        let model = tiny_model(9);
        let scene = scene_for(10);
        let layout = model.layout();
        let (_, attn) = model.encode_frame_with_attn(&scene).unwrap();
        assert_eq!(attn.len(), model.cfg.layers);
        for (l, layer) in attn.iter().enumerate() {
            assert_eq!(layer.len(), model.cfg.heads);
            for (h, weights) in layer.iter().enumerate() {
                for q in Quadrant::ALL {
                    let row = q.token_slot();
                    let members = layout.member_patch_indices(q);
                    for p in 0..16 {
                        if !members.contains(&p) {
                            assert_eq!(
                                weights.get(row, COMPRESSION_TOKENS + p),
                                0.0,
                                "layer {l} head {h} {q:?} patch {p}"
                            );
                        }
                    }
                    let sum: f64 = weights.row(row).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn quadrant_permutation_with_positions_is_invariant() {
        let model = SrcVitModel::new(SrcVitConfig { layers: 1, seed: 11, ..Default::default() }).unwrap();
        let scene = scene_for(12);
        let embedded = model.embed_tokens(&scene).unwrap();
        let base = model.encode_embedded(&embedded).unwrap();

        // Swap two whole UL-patch token rows (content and position together).
        let (a, b) = (COMPRESSION_TOKENS, COMPRESSION_TOKENS + 1);
        let mut swapped = embedded.clone();
        for j in 0..swapped.cols {
            let (va, vb) = (swapped.get(a, j), swapped.get(b, j));
            swapped.set(a, j, vb);
            swapped.set(b, j, va);
        }
        let out = model.encode_embedded(&swapped).unwrap();
        let q = Quadrant::UpperLeft;
        let diff: f64 = base
            .region_row(q)
            .iter()
            .zip(out.region_row(q))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "attention pooling is order-free, diff {diff}");

        // Swapping content while keeping positions changes the region token.
        let pos = model.params.get("pos_table").unwrap().clone();
        let mut content_only = embedded.clone();
        for j in 0..content_only.cols {
            let ca = embedded.get(a, j) - pos.get(a, j);
            let cb = embedded.get(b, j) - pos.get(b, j);
            content_only.set(a, j, cb + pos.get(a, j));
            content_only.set(b, j, ca + pos.get(b, j));
        }
        let out2 = model.encode_embedded(&content_only).unwrap();
        assert_ne!(base.region_row(q), out2.region_row(q));
    }

    #[test]
    fn projections_are_unit_norm() {
        let model = tiny_model(13);
        let scene = scene_for(14);
        let encoded = model.encode_frame(&scene).unwrap();
        let features = model.project_image_features(&encoded).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&features.scene) - 1.0).abs() < 1e-9);
        for r in &features.regions {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_projection_passes_pre_normalized_rows_through() {
        let mut model = SrcVitModel::new(SrcVitConfig {
            joint_dim: 32,
            ..Default::default()
        })
        .unwrap();
        let mut eye = Tensor2D::zeros(32, 32);
        for i in 0..32 {
            eye.set(i, i, 1.0);
        }
        *model.params.get_mut("proj.scene.w").unwrap() = eye.clone();
        *model.params.get_mut("proj.region.w").unwrap() = eye;
        let mut compression = Tensor2D::zeros(5, 32);
        for i in 0..5 {
            compression.set(i, i, 1.0); // already unit norm
        }
        let encoded = EncodedFrame { compression: compression.clone(), patches: Tensor2D::zeros(16, 32) };
        let features = model.project_image_features(&encoded).unwrap();
        assert_eq!(features.scene, compression.row(0).to_vec());
        assert_eq!(features.regions[3], compression.row(4).to_vec());
    }

    #[test]
    fn zero_compression_vector_is_numeric_error() {
        let model = tiny_model(15);
        let encoded = EncodedFrame {
            compression: Tensor2D::zeros(5, 32),
            patches: Tensor2D::zeros(16, 32),
        };
        // Zero rows times any projection stay zero and cannot normalize.
        assert!(matches!(model.project_image_features(&encoded), Err(Error::Numeric(_))));
    }

    #[test]
    fn random_projection_matches_matmul_normalize_oracle() {
        let model = tiny_model(16);
        let scene = scene_for(17);
        let encoded = model.encode_frame(&scene).unwrap();
        let features = model.project_image_features(&encoded).unwrap();
        let w = model.params.get("proj.region.w").unwrap();
        let row = encoded.compression.row(2); // R_ur
        let mut projected = vec![0.0; model.cfg.joint_dim];
        for (k, &x) in row.iter().enumerate() {
            for j in 0..model.cfg.joint_dim {
                projected[j] += x * w.get(k, j);
            }
        }
        let norm = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in projected.iter_mut() {
            *v /= norm;
        }
        let diff: f64 = projected
            .iter()
            .zip(&features.regions[1])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
