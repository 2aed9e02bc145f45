//! Deterministic synthetic "driving scene" generator: symbol-grid frames,
//! scene/region captions, temporally-biased VideoQA samples, and a frozen
//! random-projection text encoder used as the stage-one alignment target.
//!
//! Construction choices that the tasks depend on:
//! - Global attributes (weather, daytime) are rendered as glyph cells, so
//!   they are visible to the patch grid; per frame a glyph may be hidden,
//!   which makes multi-frame aggregation pay off for global questions.
//! - LAST_FRAME_DETAIL answers live at one queried cell of the final frame,
//!   early frames hold a contradicting symbol there, and the final frame is
//!   densely filled with per-quadrant-distinct symbols so a region-level
//!   summary cannot pin the answer to a cell.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layout::{Quadrant, RegionLayout};
use crate::rng::DetRng;

/// Probability that a frame of a GLOBAL_CONTEXT sample renders a given
/// global-attribute glyph.
pub const GLYPH_VISIBILITY: f64 = 0.6;

/// One-hot width of a cell: empty + 16 symbols.
pub const CELL_FEATURES: usize = 17;

/// The closed answer vocabulary (16 symbols). Objects fill cells; weather
/// and daytime values double as glyph cells and as global answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symbol {
    CarRed,
    CarGreen,
    CarBlue,
    CarYellow,
    LightRed,
    LightGreen,
    LightBlue,
    LightYellow,
    Rain,
    Sun,
    Fog,
    Snow,
    Day,
    Night,
    Dusk,
    Dawn,
}

impl Symbol {
    pub const ALL: [Symbol; 16] = [
        Symbol::CarRed,
        Symbol::CarGreen,
        Symbol::CarBlue,
        Symbol::CarYellow,
        Symbol::LightRed,
        Symbol::LightGreen,
        Symbol::LightBlue,
        Symbol::LightYellow,
        Symbol::Rain,
        Symbol::Sun,
        Symbol::Fog,
        Symbol::Snow,
        Symbol::Day,
        Symbol::Night,
        Symbol::Dusk,
        Symbol::Dawn,
    ];
    pub const OBJECTS: [Symbol; 8] = [
        Symbol::CarRed,
        Symbol::CarGreen,
        Symbol::CarBlue,
        Symbol::CarYellow,
        Symbol::LightRed,
        Symbol::LightGreen,
        Symbol::LightBlue,
        Symbol::LightYellow,
    ];
    pub const WEATHER: [Symbol; 4] = [Symbol::Rain, Symbol::Sun, Symbol::Fog, Symbol::Snow];
    pub const DAYTIME: [Symbol; 4] = [Symbol::Day, Symbol::Night, Symbol::Dusk, Symbol::Dawn];

    pub fn index(self) -> usize {
        Symbol::ALL.iter().position(|&s| s == self).expect("symbol in ALL")
    }

    pub fn name(self) -> &'static str {
        match self {
            Symbol::CarRed => "car_red",
            Symbol::CarGreen => "car_green",
            Symbol::CarBlue => "car_blue",
            Symbol::CarYellow => "car_yellow",
            Symbol::LightRed => "light_red",
            Symbol::LightGreen => "light_green",
            Symbol::LightBlue => "light_blue",
            Symbol::LightYellow => "light_yellow",
            Symbol::Rain => "rain",
            Symbol::Sun => "sun",
            Symbol::Fog => "fog",
            Symbol::Snow => "snow",
            Symbol::Day => "day",
            Symbol::Night => "night",
            Symbol::Dusk => "dusk",
            Symbol::Dawn => "dawn",
        }
    }

    pub fn from_name(name: &str) -> Result<Symbol> {
        Symbol::ALL
            .iter()
            .copied()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Vocab(format!("unknown symbol {name}")))
    }
}

/// Feature index of a cell in the one-hot patch encoding (0 = empty).
pub fn cell_feature_index(cell: Option<Symbol>) -> usize {
    match cell {
        None => 0,
        Some(s) => 1 + s.index(),
    }
}

/// One symbol-grid frame plus its global attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub grid: Vec<Vec<Option<Symbol>>>,
    pub weather: Symbol,
    pub daytime: Symbol,
}

impl SynthScene {
    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn cols(&self) -> usize {
        self.grid.first().map_or(0, |r| r.len())
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<Symbol> {
        self.grid[row][col]
    }

    pub fn layout(&self) -> Result<RegionLayout> {
        RegionLayout::new(self.rows(), self.cols())
    }

    /// Sorted, deduplicated symbols present in a quadrant.
    pub fn quadrant_symbols(&self, quadrant: Quadrant) -> Vec<Symbol> {
        let layout = RegionLayout { rows: self.rows(), cols: self.cols() };
        let mut symbols: Vec<Symbol> = layout
            .member_patch_indices(quadrant)
            .into_iter()
            .filter_map(|p| self.grid[p / self.cols()][p % self.cols()])
            .collect();
        symbols.sort();
        symbols.dedup();
        symbols
    }

    fn empty_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                if self.grid[r][c].is_none() {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Scene caption (global attributes only) plus four region captions in
/// UL, UR, LL, LR order. Captions are word-token sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub scene_caption: Vec<String>,
    pub region_captions: [Vec<String>; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    LastFrameDetail,
    GlobalContext,
}

/// A VideoQA sample: T frames, a fixed-length question, one answer symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub frames: Vec<SynthScene>,
    pub question: Vec<String>,
    pub answer: Symbol,
    pub kind: QuestionKind,
}

fn validate_grid(shape: (usize, usize)) -> Result<()> {
    let (r, c) = shape;
    if r < 2 || c < 2 || r % 2 != 0 || c % 2 != 0 {
        return Err(Error::Config(format!("grid {r}x{c} must have even dimensions >= 2")));
    }
    Ok(())
}

/// Place 1-2 random object symbols in each quadrant of an empty grid.
fn fill_sparse_objects(rng: &mut DetRng, scene: &mut SynthScene, layout: &RegionLayout) {
    for quadrant in Quadrant::ALL {
        let members = layout.member_patch_indices(quadrant);
        let count = 1 + rng.gen_range_usize(2.min(members.len()));
        for cell in rng.sample_distinct(members.len(), count) {
            let p = members[cell];
            let sym = Symbol::OBJECTS[rng.gen_range_usize(Symbol::OBJECTS.len())];
            scene.grid[p / layout.cols][p % layout.cols] = Some(sym);
        }
    }
}

fn place_glyph(rng: &mut DetRng, scene: &mut SynthScene, glyph: Symbol) -> bool {
    let empties = scene.empty_cells();
    if empties.is_empty() {
        return false;
    }
    let (r, c) = empties[rng.gen_range_usize(empties.len())];
    scene.grid[r][c] = Some(glyph);
    true
}

/// Generate one scene: 1-2 objects per quadrant, uniform global attributes,
/// and (grid space permitting) one weather glyph and one daytime glyph at
/// random empty cells.
pub fn gen_scene(rng: &mut DetRng, shape: (usize, usize)) -> Result<SynthScene> {
    validate_grid(shape)?;
    let (rows, cols) = shape;
    let layout = RegionLayout::new(rows, cols)?;
    let mut scene = SynthScene {
        grid: vec![vec![None; cols]; rows],
        weather: Symbol::WEATHER[rng.gen_range_usize(4)],
        daytime: Symbol::DAYTIME[rng.gen_range_usize(4)],
    };
    fill_sparse_objects(rng, &mut scene, &layout);
    let (weather, daytime) = (scene.weather, scene.daytime);
    place_glyph(rng, &mut scene, weather);
    place_glyph(rng, &mut scene, daytime);
    Ok(scene)
}

/// Template captions: the scene caption mentions only the global
/// attributes; each region caption lists exactly the symbols present in
/// its quadrant (sorted), so identical content gives identical captions.
pub fn gen_captions(scene: &SynthScene) -> CaptionSet {
    let scene_caption = vec![
        "scene".to_string(),
        scene.weather.name().to_string(),
        scene.daytime.name().to_string(),
    ];
    let region = |q: Quadrant| -> Vec<String> {
        let mut words = vec!["region".to_string()];
        words.extend(scene.quadrant_symbols(q).iter().map(|s| s.name().to_string()));
        words
    };
    CaptionSet {
        scene_caption,
        region_captions: [
            region(Quadrant::UpperLeft),
            region(Quadrant::UpperRight),
            region(Quadrant::LowerLeft),
            region(Quadrant::LowerRight),
        ],
    }
}

/// Fill every cell of one quadrant with distinct symbols; `pin` forces a
/// particular symbol at a particular patch index.
fn fill_quadrant_dense(
    rng: &mut DetRng,
    scene: &mut SynthScene,
    layout: &RegionLayout,
    quadrant: Quadrant,
    pin: Option<(usize, Symbol)>,
) {
    let members = layout.member_patch_indices(quadrant);
    let mut used: Vec<Symbol> = Vec::with_capacity(members.len());
    if let Some((_, sym)) = pin {
        used.push(sym);
    }
    for &p in &members {
        let sym = if let Some((pinned, sym)) = pin {
            if p == pinned {
                sym
            } else {
                loop {
                    let candidate = Symbol::ALL[rng.gen_range_usize(16)];
                    if !used.contains(&candidate) {
                        used.push(candidate);
                        break candidate;
                    }
                }
            }
        } else {
            loop {
                let candidate = Symbol::ALL[rng.gen_range_usize(16)];
                if !used.contains(&candidate) {
                    used.push(candidate);
                    break candidate;
                }
            }
        };
        scene.grid[p / layout.cols][p % layout.cols] = Some(sym);
    }
}

/// Dense frame for detail samples: every quadrant fully filled with
/// distinct symbols; `pin` places one required symbol.
fn gen_dense_frame(
    rng: &mut DetRng,
    shape: (usize, usize),
    weather: Symbol,
    daytime: Symbol,
    pin: (usize, usize, Symbol),
) -> Result<SynthScene> {
    let (rows, cols) = shape;
    let layout = RegionLayout::new(rows, cols)?;
    let quadrant_size = layout.member_patch_indices(Quadrant::UpperLeft).len();
    if quadrant_size > Symbol::ALL.len() {
        return Err(Error::Config(format!(
            "quadrant of {quadrant_size} cells cannot hold distinct symbols"
        )));
    }
    let mut scene = SynthScene { grid: vec![vec![None; cols]; rows], weather, daytime };
    let (pr, pc, psym) = pin;
    let pinned_quadrant = layout.quadrant_of(pr, pc);
    for quadrant in Quadrant::ALL {
        let pin = if quadrant == pinned_quadrant { Some((pr * cols + pc, psym)) } else { None };
        fill_quadrant_dense(rng, &mut scene, &layout, quadrant, pin);
    }
    Ok(scene)
}

/// Generate one VideoQA sample with the requested temporal bias.
///
/// LAST_FRAME_DETAIL: the answer is the symbol at a queried cell of the
/// final frame; every earlier frame carries a fixed contradicting symbol
/// there and a freshly resampled dense background. GLOBAL_CONTEXT: the
/// answer is a global attribute constant across frames, rendered as a
/// glyph with per-frame visibility; the asked glyph appears in at least
/// one frame.
pub fn gen_video_qa(
    rng: &mut DetRng,
    frames: usize,
    kind: QuestionKind,
    shape: (usize, usize),
) -> Result<VideoSample> {
    validate_grid(shape)?;
    if frames < 2 {
        return Err(Error::Config(format!("video needs at least 2 frames, got {frames}")));
    }
    let (rows, cols) = shape;
    match kind {
        QuestionKind::LastFrameDetail => {
            let (u, v) = (rng.gen_range_usize(rows), rng.gen_range_usize(cols));
            let answer = Symbol::ALL[rng.gen_range_usize(16)];
            let decoy = loop {
                let d = Symbol::ALL[rng.gen_range_usize(16)];
                if d != answer {
                    break d;
                }
            };
            let weather = Symbol::WEATHER[rng.gen_range_usize(4)];
            let daytime = Symbol::DAYTIME[rng.gen_range_usize(4)];
            let mut out = Vec::with_capacity(frames);
            for _ in 0..frames - 1 {
                out.push(gen_dense_frame(rng, shape, weather, daytime, (u, v, decoy))?);
            }
            out.push(gen_dense_frame(rng, shape, weather, daytime, (u, v, answer))?);
            Ok(VideoSample {
                frames: out,
                question: vec!["q_detail".into(), format!("cell_{u}_{v}"), "pad".into()],
                answer,
                kind,
            })
        }
        QuestionKind::GlobalContext => {
            let weather = Symbol::WEATHER[rng.gen_range_usize(4)];
            let daytime = Symbol::DAYTIME[rng.gen_range_usize(4)];
            let ask_weather = rng.gen_f64() < 0.5;
            let layout = RegionLayout::new(rows, cols)?;
            let mut out = Vec::with_capacity(frames);
            let mut asked_visible = false;
            for _ in 0..frames {
                let mut scene = SynthScene { grid: vec![vec![None; cols]; rows], weather, daytime };
                fill_sparse_objects(rng, &mut scene, &layout);
                let show_weather = rng.gen_f64() < GLYPH_VISIBILITY;
                let show_daytime = rng.gen_f64() < GLYPH_VISIBILITY;
                if show_weather {
                    place_glyph(rng, &mut scene, weather);
                }
                if show_daytime {
                    place_glyph(rng, &mut scene, daytime);
                }
                asked_visible |= if ask_weather { show_weather } else { show_daytime };
                out.push(scene);
            }
            if !asked_visible {
                let f = rng.gen_range_usize(frames);
                let glyph = if ask_weather { weather } else { daytime };
                place_glyph(rng, &mut out[f], glyph);
            }
            Ok(VideoSample {
                frames: out,
                question: vec![
                    "q_global".into(),
                    if ask_weather { "ask_weather".into() } else { "ask_daytime".into() },
                    "pad".into(),
                ],
                answer: if ask_weather { weather } else { daytime },
                kind,
            })
        }
    }
}

// ─── Datasets ───────────────────────────────────────────────────────────────

/// Kind mix for generated QA datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMix {
    LastFrame,
    Global,
    Mixed,
}

fn gen_pool() -> rayon::ThreadPool {
    let threads = std::env::var("SRC_KIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().expect("thread pool")
}

/// Captioned scene corpus; sample `i` comes from stream `(seed, i)`, so the
/// output is independent of worker count.
pub fn gen_scene_dataset(
    seed: u64,
    count: usize,
    shape: (usize, usize),
) -> Result<Vec<(SynthScene, CaptionSet)>> {
    validate_grid(shape)?;
    gen_pool().install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = DetRng::from_seed_stream(seed, i);
                let scene = gen_scene(&mut rng, shape)?;
                let captions = gen_captions(&scene);
                Ok((scene, captions))
            })
            .collect()
    })
}

/// VideoQA dataset; `Mixed` alternates kinds by index for an exact split.
pub fn gen_qa_dataset(
    seed: u64,
    count: usize,
    frames: usize,
    shape: (usize, usize),
    mix: QaMix,
) -> Result<Vec<VideoSample>> {
    validate_grid(shape)?;
    gen_pool().install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let kind = match mix {
                    QaMix::LastFrame => QuestionKind::LastFrameDetail,
                    QaMix::Global => QuestionKind::GlobalContext,
                    QaMix::Mixed => {
                        if i % 2 == 0 {
                            QuestionKind::LastFrameDetail
                        } else {
                            QuestionKind::GlobalContext
                        }
                    }
                };
                let mut rng = DetRng::from_seed_stream(seed, i);
                gen_video_qa(&mut rng, frames, kind, shape)
            })
            .collect()
    })
}

/// One JSONL row; stage-one rows have captions, QA rows question/answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub frames: Vec<SynthScene>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub captions: Option<CaptionSet>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub question: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer: Option<Symbol>,
    pub kind: String,
    pub seed: u64,
}

impl DatasetRow {
    pub fn from_scene(scene: SynthScene, captions: CaptionSet, seed: u64) -> Self {
        DatasetRow {
            frames: vec![scene],
            captions: Some(captions),
            question: None,
            answer: None,
            kind: "caption".to_string(),
            seed,
        }
    }

    pub fn from_video(sample: VideoSample, seed: u64) -> Self {
        let kind = match sample.kind {
            QuestionKind::LastFrameDetail => "last_frame_detail",
            QuestionKind::GlobalContext => "global_context",
        };
        DatasetRow {
            frames: sample.frames,
            captions: None,
            question: Some(sample.question),
            answer: Some(sample.answer),
            kind: kind.to_string(),
            seed,
        }
    }

    pub fn to_video(&self) -> Result<VideoSample> {
        let kind = match self.kind.as_str() {
            "last_frame_detail" => QuestionKind::LastFrameDetail,
            "global_context" => QuestionKind::GlobalContext,
            other => return Err(Error::Contract(format!("row kind {other} is not a QA kind"))),
        };
        Ok(VideoSample {
            frames: self.frames.clone(),
            question: self
                .question
                .clone()
                .ok_or_else(|| Error::Contract("QA row without question".into()))?,
            answer: self.answer.ok_or_else(|| Error::Contract("QA row without answer".into()))?,
            kind,
        })
    }
}

pub fn write_jsonl(path: &Path, rows: &[DatasetRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut file, row)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRow>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

// ─── Frozen text encoder ────────────────────────────────────────────────────

/// Longest caption the embedder accepts.
pub const TEXT_MAX_LEN: usize = 8;

/// Frozen random-projection text encoder over bag-of-symbols plus
/// position-tagged symbols; stands in for a pretrained text tower.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    vocabulary: HashMap<String, usize>,
    vocab_len: usize,
    projection: Vec<Vec<f64>>,
    pub dim: usize,
}

impl TextEmbedder {
    /// Fixed caption vocabulary: the 16 symbols plus the template keywords.
    pub fn caption_vocabulary() -> Vec<String> {
        let mut words: Vec<String> = Symbol::ALL.iter().map(|s| s.name().to_string()).collect();
        words.push("scene".to_string());
        words.push("region".to_string());
        words
    }

    pub fn new(seed: u64, dim: usize) -> Self {
        let words = Self::caption_vocabulary();
        let vocab_len = words.len();
        let vocabulary: HashMap<String, usize> =
            words.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        let feature_len = vocab_len * (1 + TEXT_MAX_LEN);
        let mut rng = DetRng::from_seed_stream(seed, 0x7e87);
        let projection = (0..feature_len).map(|_| rng.normal_vec(dim, 1.0)).collect();
        TextEmbedder { vocabulary, vocab_len, projection, dim }
    }

    /// Deterministic unit-norm caption embedding.
    pub fn encode(&self, caption: &[String]) -> Result<Vec<f64>> {
        if caption.is_empty() {
            return Err(Error::Contract("cannot encode an empty caption".into()));
        }
        if caption.len() > TEXT_MAX_LEN {
            return Err(Error::Capacity(format!(
                "caption of {} words exceeds max {TEXT_MAX_LEN}",
                caption.len()
            )));
        }
        let mut acc = vec![0.0; self.dim];
        for (pos, word) in caption.iter().enumerate() {
            let idx = *self
                .vocabulary
                .get(word)
                .ok_or_else(|| Error::Vocab(format!("unknown symbol {word}")))?;
            for (a, p) in acc.iter_mut().zip(&self.projection[idx]) {
                *a += p;
            }
            let tagged = self.vocab_len * (1 + pos) + idx;
            for (a, p) in acc.iter_mut().zip(&self.projection[tagged]) {
                *a += p;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("caption embedding collapsed to zero".into()));
        }
        Ok(acc.into_iter().map(|v| v / norm).collect())
    }
}
