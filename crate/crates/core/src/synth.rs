//! Procedural glyph corpus.
//!
//! Radicals are random line-stroke stamps; characters are random formation
//! trees over them, rendered by recursively placing each child in the
//! sub-rectangle its azimuth dictates. Everything is a pure function of the
//! generation seed, so datasets are byte-reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glyph::GlyphImage;
use crate::ids::{
    format_tokens, parse_with_vocab, tokenize, FormationTree, FormationType, IdsError, IdsToken,
    NodeLabel, RadicalId, RadicalVocab,
};

/// Side of a radical stamp in pixels.
pub const STAMP: usize = 16;
/// Side of a rendered glyph in pixels. Layout constants are in these units.
pub const CANVAS: usize = 32;
/// Foreground pixels every stamp must have.
pub const MIN_STAMP_INK: usize = 8;
/// Probability of flipping each pixel of a noisy render.
pub const FLIP_PROBABILITY: f64 = 0.05;
/// Maximum per-axis shift of a noisy render.
pub const MAX_JITTER: i64 = 1;
/// Operator nesting depth of generated characters.
pub const MAX_OPERATOR_DEPTH: usize = 2;
/// Chance that a free child slot holds a nested operator.
pub const NESTING_PROBABILITY: f64 = 0.3;
/// Exponent of the Zipf radical frequencies used for radical zero-shot data.
pub const ZIPF_EXPONENT: f64 = 1.0;

/// Inner rectangles of the surround operators on the 32×32 canvas, in
/// codepoint order from full surround to surround-from-lower-left.
pub const SURROUND_INNER: [Rect; 7] = [
    Rect::new(8, 8, 16, 16),
    Rect::new(8, 12, 16, 20),
    Rect::new(8, 0, 16, 20),
    Rect::new(12, 8, 20, 16),
    Rect::new(12, 12, 20, 20),
    Rect::new(0, 12, 20, 20),
    Rect::new(12, 0, 20, 20),
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no stamp for radical r{0}")]
    MissingStamp(RadicalId),
    #[error("insufficient vocabulary: {0}")]
    InsufficientVocabulary(String),
    #[error("dataset I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Manifest(String),
    #[error("IDS of character {char_id}: {source}")]
    Ids { char_id: u32, source: IdsError },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Axis-aligned rectangle `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Alias used where a rectangle is a layout target.
pub type LayoutRect = Rect;

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// `inner`, given in canvas units, mapped into this rectangle.
    fn scaled(&self, inner: Rect) -> Rect {
        let sx = |v: usize| v * self.w / CANVAS;
        let sy = |v: usize| v * self.h / CANVAS;
        let (x0, x1) = (sx(inner.x), sx(inner.x + inner.w));
        let (y0, y1) = (sy(inner.y), sy(inner.y + inner.h));
        Rect::new(self.x + x0, self.y + y0, x1 - x0, y1 - y0)
    }
}

/// Split points of a length into thirds: 11/10/11 on 32.
fn thirds(len: usize) -> (usize, usize) {
    ((len * 11 + 16) / 32, (len * 21 + 16) / 32)
}

/// Target rectangles of each child slot of `formation` inside `parent`.
pub fn layout(formation: FormationType, parent: Rect) -> Vec<Rect> {
    use FormationType::*;
    let Rect { x, y, w, h } = parent;
    match formation {
        LeftRight => vec![
            Rect::new(x, y, w / 2, h),
            Rect::new(x + w / 2, y, w - w / 2, h),
        ],
        TopBottom => vec![
            Rect::new(x, y, w, h / 2),
            Rect::new(x, y + h / 2, w, h - h / 2),
        ],
        LeftMiddleRight => {
            let (a, b) = thirds(w);
            vec![
                Rect::new(x, y, a, h),
                Rect::new(x + a, y, b - a, h),
                Rect::new(x + b, y, w - b, h),
            ]
        }
        TopMiddleBottom => {
            let (a, b) = thirds(h);
            vec![
                Rect::new(x, y, w, a),
                Rect::new(x, y + a, w, b - a),
                Rect::new(x, y + b, w, h - b),
            ]
        }
        Overlaid => vec![parent, parent],
        surround => vec![
            parent,
            parent.scaled(SURROUND_INNER[surround.index() - FullSurround.index()]),
        ],
    }
}

/// Binary 16×16 radical bitmap.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RadicalStamp {
    pub id: RadicalId,
    pub bitmap: Vec<bool>,
}

impl RadicalStamp {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bitmap[y * STAMP + x]
    }

    pub fn ink(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b).count()
    }
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn draw_line(bitmap: &mut [bool], (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + ((x1 - x0) * s + steps / 2).div_euclid(steps);
        let y = y0 + ((y1 - y0) * s + steps / 2).div_euclid(steps);
        // two-pixel pen so strokes survive halving by nearest neighbour
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (px, py) = ((x + dx) as usize, (y + dy) as usize);
            if px < STAMP && py < STAMP {
                bitmap[py * STAMP + px] = true;
            }
        }
    }
}

/// Stamp of radical `id` under `seed`, with an extra `salt` used to
/// regenerate on collisions.
pub fn render_radical_salted(id: RadicalId, seed: u64, salt: u64) -> RadicalStamp {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, id as u64, salt, 0x57A4]));
    let mut bitmap = vec![false; STAMP * STAMP];
    let strokes = rng.random_range(3..=6);
    let hi = STAMP as i64 - 2;
    for _ in 0..strokes {
        let a = (rng.random_range(0..=hi), rng.random_range(0..=hi));
        let b = match rng.random_range(0..4) {
            0 => (rng.random_range(0..=hi), a.1),
            1 => (a.0, rng.random_range(0..=hi)),
            _ => (rng.random_range(0..=hi), rng.random_range(0..=hi)),
        };
        draw_line(&mut bitmap, a, b);
    }
    let mut stamp = RadicalStamp { id, bitmap };
    while stamp.ink() < MIN_STAMP_INK {
        let a = (rng.random_range(0..=hi), rng.random_range(0..=hi));
        let b = (rng.random_range(0..=hi), rng.random_range(0..=hi));
        draw_line(&mut stamp.bitmap, a, b);
    }
    stamp
}

/// Deterministic stamp of radical `id` under `seed`.
pub fn render_radical(id: RadicalId, seed: u64) -> RadicalStamp {
    render_radical_salted(id, seed, 0)
}

/// Stamps for radicals `0..n`, pairwise distinct: a stamp equal to an earlier
/// one is regenerated with the next salt.
pub fn radical_stamps(n: usize, seed: u64) -> Vec<RadicalStamp> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for id in 0..n as RadicalId {
        let mut salt = 0;
        let stamp = loop {
            let s = render_radical_salted(id, seed, salt);
            if seen.insert(s.bitmap.clone()) {
                break s;
            }
            salt += 1;
        };
        out.push(stamp);
    }
    out
}

/// Ink of one leaf after placement, with the rectangle it was assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafLayer {
    pub node: usize,
    pub rect: Rect,
    pub image: GlyphImage,
}

fn place_stamp(stamp: &RadicalStamp, rect: Rect, size: usize) -> GlyphImage {
    let mut img = GlyphImage::new(size, size);
    for y in 0..rect.h {
        for x in 0..rect.w {
            if stamp.get(x * STAMP / rect.w, y * STAMP / rect.h) {
                img.set(rect.x + x, rect.y + y, 255);
            }
        }
    }
    img
}

fn layers_of(
    tree: &FormationTree,
    node: usize,
    rect: Rect,
    stamps: &[RadicalStamp],
    size: usize,
    out: &mut Vec<LeafLayer>,
) -> Result<()> {
    match tree.label(node) {
        NodeLabel::Radical(r) => {
            let stamp = stamps
                .get(r as usize)
                .filter(|s| s.id == r)
                .ok_or(SynthError::MissingStamp(r))?;
            out.push(LeafLayer {
                node,
                rect,
                image: place_stamp(stamp, rect, size),
            });
        }
        NodeLabel::Formation(f) => {
            let rects = layout(f, rect);
            for c in tree.children(node) {
                let slot = tree.azimuth(c).slot().map_or(0, |s| s.1);
                let start = out.len();
                layers_of(tree, c, rects[slot], stamps, size, out)?;
                if f.is_surround() && slot == 0 {
                    // the surrounding component is a frame: clear its hole
                    let hole = rects[1];
                    for layer in &mut out[start..] {
                        for y in hole.y..hole.y + hole.h {
                            for x in hole.x..hole.x + hole.w {
                                layer.image.set(x, y, 0);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Per-leaf ink of the composed glyph, in preorder of the leaves.
pub fn compose_layers(
    tree: &FormationTree,
    stamps: &[RadicalStamp],
    size: usize,
) -> Result<Vec<LeafLayer>> {
    let mut out = Vec::new();
    layers_of(tree, 0, Rect::new(0, 0, size, size), stamps, size, &mut out)?;
    Ok(out)
}

/// Renders `tree` on a `size`×`size` canvas: ink is the maximum over leaves.
pub fn compose_glyph(tree: &FormationTree, stamps: &[RadicalStamp], size: usize) -> Result<GlyphImage> {
    let mut img = GlyphImage::new(size, size);
    for layer in compose_layers(tree, stamps, size)? {
        for (p, &v) in img.pixels.iter_mut().zip(&layer.image.pixels) {
            *p = (*p).max(v);
        }
    }
    Ok(img)
}

/// Clean glyph shifted by up to one pixel per axis with a fraction of pixels
/// flipped.
pub fn noisy_render<R: Rng + ?Sized>(clean: &GlyphImage, rng: &mut R) -> GlyphImage {
    let dx = rng.random_range(-MAX_JITTER..=MAX_JITTER);
    let dy = rng.random_range(-MAX_JITTER..=MAX_JITTER);
    let mut out = GlyphImage::new(clean.width, clean.height);
    for y in 0..clean.height as i64 {
        for x in 0..clean.width as i64 {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sy >= 0 && (sx as usize) < clean.width && (sy as usize) < clean.height {
                out.set(x as usize, y as usize, clean.get(sx as usize, sy as usize));
            }
        }
    }
    for p in out.pixels.iter_mut() {
        if rng.random_bool(FLIP_PROBABILITY) {
            *p = 255 - *p;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train or test)")),
        }
    }
}

/// Zero-shot split protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// The first `m` characters train; the rest are unseen compositions of
    /// training radicals.
    CharZeroShot(usize),
    /// Characters containing a radical that occurs fewer than `n` times test.
    RadicalZeroShot(usize),
}

impl fmt::Display for SplitProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitProtocol::CharZeroShot(m) => write!(f, "char-zeroshot:{m}"),
            SplitProtocol::RadicalZeroShot(n) => write!(f, "radical-zeroshot:{n}"),
        }
    }
}

impl FromStr for SplitProtocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| format!("protocol `{s}` must look like char-zeroshot:M"))?;
        let n: usize = n
            .parse()
            .map_err(|_| format!("protocol count `{n}` is not a number"))?;
        match kind {
            "char-zeroshot" => Ok(SplitProtocol::CharZeroShot(n)),
            "radical-zeroshot" => Ok(SplitProtocol::RadicalZeroShot(n)),
            _ => Err(format!("unknown protocol `{kind}`")),
        }
    }
}

/// Generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub radicals: usize,
    pub chars: usize,
    pub renders: usize,
    pub seed: u64,
    pub protocol: SplitProtocol,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            radicals: 40,
            chars: 400,
            renders: 20,
            seed: 0,
            protocol: SplitProtocol::CharZeroShot(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterEntry {
    pub char_id: u32,
    /// Canonical IDS text.
    pub ids: String,
    pub split: Split,
}

impl CharacterEntry {
    pub fn tree(&self, vocab: &RadicalVocab) -> Result<FormationTree> {
        tokenize(&self.ids)
            .and_then(|t| parse_with_vocab(&t, vocab))
            .map_err(|source| SynthError::Ids {
                char_id: self.char_id,
                source,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub char_id: u32,
    pub render: usize,
    pub image: GlyphImage,
}

impl Sample {
    /// Path of the image relative to the dataset directory.
    pub fn path(&self) -> String {
        format!("images/c{:04}_r{:02}.pgm", self.char_id, self.render)
    }
}

/// Characters, their splits and rendered samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphDataset {
    pub seed: u64,
    pub vocab: RadicalVocab,
    pub characters: Vec<CharacterEntry>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    char_id: u32,
    ids: String,
    split: Split,
    image: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
}

impl GlyphDataset {
    pub fn characters_in(&self, split: Split) -> impl Iterator<Item = &CharacterEntry> {
        self.characters.iter().filter(move |c| c.split == split)
    }

    pub fn split_of(&self, char_id: u32) -> Option<Split> {
        self.characters
            .iter()
            .find(|c| c.char_id == char_id)
            .map(|c| c.split)
    }

    pub fn samples_in(&self, split: Split) -> Vec<&Sample> {
        let ids: HashSet<u32> = self.characters_in(split).map(|c| c.char_id).collect();
        self.samples
            .iter()
            .filter(|s| ids.contains(&s.char_id))
            .collect()
    }

    /// Radicals occurring in some training character.
    pub fn train_radicals(&self) -> Result<HashSet<RadicalId>> {
        let mut out = HashSet::new();
        for c in self.characters_in(Split::Train) {
            out.extend(c.tree(&self.vocab)?.radicals());
        }
        Ok(out)
    }

    /// Writes `manifest.jsonl`, `vocab.json`, `dataset.json` and
    /// `images/*.pgm` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        let chars: HashMap<u32, &CharacterEntry> =
            self.characters.iter().map(|c| (c.char_id, c)).collect();
        let mut manifest = io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
        for s in &self.samples {
            let c = chars
                .get(&s.char_id)
                .ok_or_else(|| SynthError::Manifest(format!("sample of unknown character {}", s.char_id)))?;
            let line = ManifestLine {
                char_id: s.char_id,
                ids: c.ids.clone(),
                split: c.split,
                image: s.path(),
            };
            serde_json::to_writer(&mut manifest, &line).map_err(io::Error::from)?;
            manifest.write_all(b"\n")?;
            s.image.save_pgm(&dir.join(s.path()))?;
        }
        manifest.flush()?;
        let vocab: BTreeMap<String, &String> = self
            .vocab
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (i.to_string(), n))
            .collect();
        std::fs::write(
            dir.join("vocab.json"),
            serde_json::to_string_pretty(&vocab).map_err(io::Error::from)? + "\n",
        )?;
        std::fs::write(
            dir.join("dataset.json"),
            serde_json::to_string(&DatasetMeta { seed: self.seed }).map_err(io::Error::from)? + "\n",
        )?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let bad = |m: String| SynthError::Manifest(m);
        let vocab_text = std::fs::read_to_string(dir.join("vocab.json"))?;
        let vocab_map: BTreeMap<String, String> =
            serde_json::from_str(&vocab_text).map_err(|e| bad(format!("vocab.json: {e}")))?;
        let mut names = vec![None; vocab_map.len()];
        for (k, v) in vocab_map {
            let i: usize = k
                .parse()
                .ok()
                .filter(|&i| i < names.len())
                .ok_or_else(|| bad(format!("vocab id `{k}` is not dense")))?;
            names[i] = Some(v);
        }
        let vocab = RadicalVocab::new(names.into_iter().map(|n| n.expect("dense ids")).collect());
        let meta: DatasetMeta = match std::fs::read_to_string(dir.join("dataset.json")) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| bad(format!("dataset.json: {e}")))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => DatasetMeta { seed: 0 },
            Err(e) => return Err(e.into()),
        };

        let file = std::fs::File::open(dir.join("manifest.jsonl"))?;
        let mut characters: Vec<CharacterEntry> = Vec::new();
        let mut index: HashMap<u32, usize> = HashMap::new();
        let mut renders: HashMap<u32, usize> = HashMap::new();
        let mut samples = Vec::new();
        for (lineno, line) in io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| bad(format!("manifest line {}: {e}", lineno + 1)))?;
            match index.get(&m.char_id) {
                Some(&i) => {
                    let c = &characters[i];
                    if c.ids != m.ids || c.split != m.split {
                        return Err(bad(format!(
                            "character {} has inconsistent entries",
                            m.char_id
                        )));
                    }
                }
                None => {
                    let entry = CharacterEntry {
                        char_id: m.char_id,
                        ids: m.ids.clone(),
                        split: m.split,
                    };
                    entry.tree(&vocab)?;
                    index.insert(m.char_id, characters.len());
                    characters.push(entry);
                }
            }
            if m.image.contains("..") || Path::new(&m.image).is_absolute() {
                return Err(bad(format!("image path `{}` escapes the dataset", m.image)));
            }
            let image = GlyphImage::load_pgm(&dir.join(&m.image))?;
            let render = renders.entry(m.char_id).or_insert(0);
            samples.push(Sample {
                char_id: m.char_id,
                render: *render,
                image,
            });
            *render += 1;
        }
        Ok(Self {
            seed: meta.seed,
            vocab,
            characters,
            samples,
        })
    }
}

struct TreeSampler {
    radicals: WeightedIndex<f64>,
    root_ops: WeightedIndex<f64>,
    nested_ops: WeightedIndex<f64>,
}

const NESTED_OPS: [FormationType; 11] = [
    FormationType::LeftRight,
    FormationType::TopBottom,
    FormationType::LeftMiddleRight,
    FormationType::TopMiddleBottom,
    FormationType::FullSurround,
    FormationType::SurroundAbove,
    FormationType::SurroundBelow,
    FormationType::SurroundLeft,
    FormationType::SurroundUpperLeft,
    FormationType::SurroundUpperRight,
    FormationType::SurroundLowerLeft,
];

fn op_weight(f: FormationType) -> f64 {
    match f {
        FormationType::LeftRight | FormationType::TopBottom => 3.0,
        _ => 1.0,
    }
}

impl TreeSampler {
    fn new(radical_weights: &[f64]) -> Self {
        Self {
            radicals: WeightedIndex::new(radical_weights).expect("positive weights"),
            root_ops: WeightedIndex::new(FormationType::ALL.map(op_weight)).expect("weights"),
            nested_ops: WeightedIndex::new(NESTED_OPS.map(op_weight)).expect("weights"),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<IdsToken> {
        let mut out = Vec::new();
        let root = FormationType::ALL[self.root_ops.sample(rng)];
        self.expand(root, 1, rng, &mut out);
        out
    }

    fn expand<R: Rng>(&self, f: FormationType, depth: usize, rng: &mut R, out: &mut Vec<IdsToken>) {
        out.push(IdsToken::Operator(f));
        for slot in 0..f.arity() {
            // frames and overlays stay atomic so they remain legible
            let atomic = f == FormationType::Overlaid || (f.is_surround() && slot == 0);
            if !atomic && depth < MAX_OPERATOR_DEPTH && rng.random_bool(NESTING_PROBABILITY) {
                let g = NESTED_OPS[self.nested_ops.sample(rng)];
                self.expand(g, depth + 1, rng, out);
            } else {
                out.push(IdsToken::Radical(self.radicals.sample(rng) as RadicalId));
            }
        }
    }
}

fn radical_weights(params: &SynthParams) -> Vec<f64> {
    match params.protocol {
        SplitProtocol::CharZeroShot(_) => vec![1.0; params.radicals],
        SplitProtocol::RadicalZeroShot(_) => (0..params.radicals)
            .map(|r| 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT))
            .collect(),
    }
}

/// Distinct random characters: unique IDS text and unique clean rendering.
fn sample_characters(
    params: &SynthParams,
    stamps: &[RadicalStamp],
    attempt: u64,
) -> Result<Vec<(Vec<IdsToken>, FormationTree, GlyphImage)>> {
    let sampler = TreeSampler::new(&radical_weights(params));
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[params.seed, attempt, 0xC4A2]));
    let mut seen_ids = HashSet::new();
    let mut seen_img = HashSet::new();
    let mut out = Vec::with_capacity(params.chars);
    let budget = params.chars * 200 + 1000;
    for _ in 0..budget {
        if out.len() == params.chars {
            break;
        }
        let tokens = sampler.sample(&mut rng);
        if !seen_ids.insert(tokens.clone()) {
            continue;
        }
        let tree = crate::ids::parse(&tokens).expect("sampled trees are well formed");
        let img = compose_glyph(&tree, stamps, CANVAS)?;
        if !seen_img.insert(img.pixels.clone()) {
            continue;
        }
        out.push((tokens, tree, img));
    }
    if out.len() < params.chars {
        return Err(SynthError::InsufficientVocabulary(format!(
            "only {} distinct characters from {} radicals",
            out.len(),
            params.radicals
        )));
    }
    Ok(out)
}

const SPLIT_ATTEMPTS: u64 = 64;

/// Generates a dataset and assigns splits by `params.protocol`.
pub fn make_splits(params: &SynthParams) -> Result<GlyphDataset> {
    if params.radicals < 2 || params.chars < 2 || params.renders == 0 {
        return Err(SynthError::InsufficientVocabulary(format!(
            "need ≥ 2 radicals, ≥ 2 characters and ≥ 1 render, got {}/{}/{}",
            params.radicals, params.chars, params.renders
        )));
    }
    let stamps = radical_stamps(params.radicals, params.seed);
    let mut chosen = None;
    for attempt in 0..SPLIT_ATTEMPTS {
        let chars = sample_characters(params, &stamps, attempt)?;
        let radicals: Vec<BTreeSet<RadicalId>> = chars
            .iter()
            .map(|(_, t, _)| t.radicals().collect())
            .collect();
        let splits: Vec<Split> = match params.protocol {
            SplitProtocol::CharZeroShot(m) => {
                if m == 0 || m >= params.chars {
                    return Err(SynthError::InsufficientVocabulary(format!(
                        "char-zeroshot:{m} needs 0 < m < {} characters",
                        params.chars
                    )));
                }
                let train: BTreeSet<RadicalId> = radicals[..m].iter().flatten().copied().collect();
                if radicals[m..].iter().flatten().any(|r| !train.contains(r)) {
                    continue;
                }
                (0..params.chars)
                    .map(|i| if i < m { Split::Train } else { Split::Test })
                    .collect()
            }
            SplitProtocol::RadicalZeroShot(n) => {
                let mut count: HashMap<RadicalId, usize> = HashMap::new();
                for (tokens, _, _) in &chars {
                    for t in tokens {
                        if let IdsToken::Radical(r) = t {
                            *count.entry(*r).or_default() += 1;
                        }
                    }
                }
                let splits: Vec<Split> = radicals
                    .iter()
                    .map(|rs| {
                        if rs.iter().any(|r| count[r] < n) {
                            Split::Test
                        } else {
                            Split::Train
                        }
                    })
                    .collect();
                if !splits.contains(&Split::Test) || !splits.contains(&Split::Train) {
                    return Err(SynthError::InsufficientVocabulary(format!(
                        "radical-zeroshot:{n} leaves one split empty"
                    )));
                }
                splits
            }
        };
        chosen = Some((chars, splits));
        break;
    }
    let (chars, splits) = chosen.ok_or_else(|| {
        SynthError::InsufficientVocabulary(format!(
            "no draw in {SPLIT_ATTEMPTS} attempts covers every test radical in training"
        ))
    })?;

    let mut characters = Vec::with_capacity(chars.len());
    let mut samples = Vec::with_capacity(chars.len() * params.renders);
    for (i, ((tokens, _, clean), split)) in chars.into_iter().zip(splits).enumerate() {
        let char_id = i as u32;
        characters.push(CharacterEntry {
            char_id,
            ids: format_tokens(&tokens),
            split,
        });
        for render in 0..params.renders {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(&[params.seed, char_id as u64, render as u64, 0x4E01]));
            samples.push(Sample {
                char_id,
                render,
                image: noisy_render(&clean, &mut rng),
            });
        }
    }
    Ok(GlyphDataset {
        seed: params.seed,
        vocab: RadicalVocab::numbered(params.radicals),
        characters,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::parse_str;

    #[test]
    fn stamps_are_deterministic_distinct_and_inked() {
        assert_eq!(render_radical(3, 11), render_radical(3, 11));
        let stamps = radical_stamps(40, 11);
        let distinct: HashSet<_> = stamps.iter().map(|s| s.bitmap.clone()).collect();
        assert_eq!(distinct.len(), 40);
        assert!(stamps.iter().all(|s| s.ink() >= MIN_STAMP_INK));
    }

    #[test]
    fn layout_rects() {
        let full = Rect::new(0, 0, 32, 32);
        let r = layout(FormationType::TopMiddleBottom, full);
        assert_eq!(r.iter().map(|r| r.h).collect::<Vec<_>>(), vec![11, 10, 11]);
        assert_eq!(r[2].y, 21);
        let r = layout(FormationType::FullSurround, full);
        assert_eq!(r[1], Rect::new(8, 8, 16, 16));
        let half = Rect::new(0, 0, 16, 32);
        assert_eq!(layout(FormationType::SurroundAbove, half)[1], Rect::new(4, 12, 8, 20));
    }

    #[test]
    fn single_leaf_fills_canvas_and_left_right_splits() {
        let stamps = radical_stamps(2, 5);
        let img = compose_glyph(&parse_str("r0").unwrap(), &stamps, 32).unwrap();
        assert_eq!(img.ink(), stamps[0].ink() * 4);
        let layers = compose_layers(&parse_str("⿰ r0 r1").unwrap(), &stamps, 32).unwrap();
        let (a, b) = (&layers[0], &layers[1]);
        assert!(a.image.ink_bbox().unwrap().2 <= 15);
        assert!(b.image.ink_bbox().unwrap().0 >= 16);
    }

    #[test]
    fn missing_stamp() {
        let stamps = radical_stamps(2, 5);
        assert!(matches!(
            compose_glyph(&parse_str("⿰ r0 r7").unwrap(), &stamps, 32),
            Err(SynthError::MissingStamp(7))
        ));
    }

    #[test]
    fn protocol_text() {
        assert_eq!(
            "char-zeroshot:300".parse::<SplitProtocol>().unwrap(),
            SplitProtocol::CharZeroShot(300)
        );
        assert_eq!(SplitProtocol::RadicalZeroShot(4).to_string(), "radical-zeroshot:4");
        assert!("bogus:1".parse::<SplitProtocol>().is_err());
    }

    #[test]
    fn small_char_zeroshot() {
        let params = SynthParams {
            radicals: 12,
            chars: 40,
            renders: 2,
            seed: 3,
            protocol: SplitProtocol::CharZeroShot(30),
        };
        let ds = make_splits(&params).unwrap();
        assert_eq!(ds.characters.len(), 40);
        assert_eq!(ds.samples.len(), 80);
        assert_eq!(ds.characters_in(Split::Test).count(), 10);
        let train = ds.train_radicals().unwrap();
        for c in ds.characters_in(Split::Test) {
            assert!(c.tree(&ds.vocab).unwrap().radicals().all(|r| train.contains(&r)));
        }
        assert_eq!(make_splits(&params).unwrap(), ds);
    }
}
