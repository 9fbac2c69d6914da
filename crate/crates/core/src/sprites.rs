//! Procedural sprite scenes: captioned multi-subject images with exact
//! per-subject patch masks. Scenes are pure functions of a seed, so the
//! dataset file only stores sprite parameters and every consumer re-renders
//! bit-identical images.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 5] = b"SSRD1";

/// Canvas/patch geometry. The default desk profile uses a 32x32 canvas cut
/// into 4x4 patches (64 patches); the smoke profile halves the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub canvas: usize,
    pub patch: usize,
}

impl Geometry {
    pub const DESK: Geometry = Geometry {
        canvas: 32,
        patch: 4,
    };
    pub const SMOKE: Geometry = Geometry {
        canvas: 16,
        patch: 4,
    };

    pub fn new(canvas: usize, patch: usize) -> Result<Self> {
        if canvas == 0 || patch == 0 || canvas % patch != 0 {
            return Err(Error::Config(format!(
                "canvas {canvas} not divisible into {patch}x{patch} patches"
            )));
        }
        Ok(Geometry { canvas, patch })
    }

    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sprite size range scales with the canvas: [6, 12] px at 32.
    pub fn sprite_sizes(&self) -> (usize, usize) {
        let lo = (6 * self.canvas).div_euclid(32).max(3);
        let hi = (12 * self.canvas).div_euclid(32).max(lo);
        (lo, hi)
    }
}

// ── Attribute space ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
    ];

    pub fn id(self) -> u8 {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
            ShapeKind::Star => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown shape id {id}")))
    }

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorKind {
    pub const ALL: [ColorKind; 4] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
    ];

    pub fn id(self) -> u8 {
        match self {
            ColorKind::Red => 0,
            ColorKind::Green => 1,
            ColorKind::Blue => 2,
            ColorKind::Yellow => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown color id {id}")))
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorKind::Red => [1.0, 0.0, 0.0],
            ColorKind::Green => [0.0, 1.0, 0.0],
            ColorKind::Blue => [0.0, 0.0, 1.0],
            ColorKind::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
        }
    }
}

/// (color, shape) attribute pair; 16 combinations span the whole space.
pub type AttrPair = (ColorKind, ShapeKind);

pub fn all_attr_pairs() -> Vec<AttrPair> {
    let mut pairs = Vec::with_capacity(16);
    for c in ColorKind::ALL {
        for s in ShapeKind::ALL {
            pairs.push((c, s));
        }
    }
    pairs
}

pub const BACKGROUND: f32 = 0.5;

// ── Sprites and scenes ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sprite {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub cx: u8,
    pub cy: u8,
    pub size: u8,
}

impl Sprite {
    /// Membership test for the pixel centered at (px + 0.5, py + 0.5).
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let dx = (px as f32 + 0.5) - self.cx as f32;
        let dy = (py as f32 + 0.5) - self.cy as f32;
        let half = self.size as f32 / 2.0;
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Triangle => {
                // upward triangle inscribed in the bounding box
                let a = (self.cx as f32, self.cy as f32 - half);
                let b = (self.cx as f32 - half, self.cy as f32 + half);
                let c = (self.cx as f32 + half, self.cy as f32 + half);
                let p = (px as f32 + 0.5, py as f32 + 0.5);
                let sign = |p1: (f32, f32), p2: (f32, f32), p3: (f32, f32)| {
                    (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
                };
                let d1 = sign(p, a, b);
                let d2 = sign(p, b, c);
                let d3 = sign(p, c, a);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            ShapeKind::Star => {
                // four-pointed star: hyperbolic cross clipped to the box
                let q = half / 2.0;
                dx.abs() <= half && dy.abs() <= half && dx.abs() * dy.abs() <= q * q
            }
        }
    }

    /// Bounding box (x0, y0, x1, y1) of covered pixels, inclusive.
    pub fn pixel_bbox(&self, canvas: usize) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        let half = (self.size as usize).div_ceil(2) + 1;
        let x_lo = (self.cx as usize).saturating_sub(half);
        let y_lo = (self.cy as usize).saturating_sub(half);
        let x_hi = ((self.cx as usize) + half).min(canvas - 1);
        let y_hi = ((self.cy as usize) + half).min(canvas - 1);
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                if self.covers(px, py) {
                    bbox = Some(match bbox {
                        None => (px, py, px, py),
                        Some((x0, y0, x1, y1)) => {
                            (x0.min(px), y0.min(py), x1.max(px), y1.max(py))
                        }
                    });
                }
            }
        }
        bbox
    }
}

fn bboxes_overlap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3
}

/// A generated scene: 1-3 sprites with disjoint bounding boxes and distinct
/// attribute pairs. Image, caption, query and masks all derive
/// deterministically from the sprite list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpriteScene {
    pub geometry: Geometry,
    pub seed: u64,
    pub sprites: Vec<Sprite>,
}

impl SpriteScene {
    /// Flat-color rasterization on a mid-gray background, [3, c, c] in [0,1].
    pub fn render<F: Real>(&self) -> Tensor<F> {
        let c = self.geometry.canvas;
        let mut img = Tensor::full(vec![3, c, c], F::from_f64(BACKGROUND as f64));
        for sprite in &self.sprites {
            let rgb = sprite.color.rgb();
            for py in 0..c {
                for px in 0..c {
                    if sprite.covers(px, py) {
                        for ch in 0..3 {
                            img.data[ch * c * c + py * c + px] = F::from_f64(rgb[ch] as f64);
                        }
                    }
                }
            }
        }
        img
    }

    pub fn caption(&self) -> String {
        self.sprites
            .iter()
            .map(|s| format!("a {} {}", s.color.word(), s.shape.word()))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    pub fn caption_tokens(&self, vocab: &Vocabulary) -> Vec<u32> {
        vocab.encode_padded(&self.caption(), vocab.caption_len)
    }

    /// Two-token subject query of one sprite, padded to the query length.
    pub fn query_tokens(&self, vocab: &Vocabulary, subject_index: usize) -> Result<Vec<u32>> {
        let sprite = self.sprites.get(subject_index).ok_or_else(|| {
            Error::Contract(format!(
                "subject index {subject_index} out of {} sprites",
                self.sprites.len()
            ))
        })?;
        let phrase = format!("{} {}", sprite.color.word(), sprite.shape.word());
        Ok(vocab.encode_padded(&phrase, vocab.query_len))
    }

    /// Binary patch mask of one sprite: 1 exactly on the patches whose pixel
    /// footprint intersects it.
    pub fn patch_mask(&self, subject_index: usize) -> Result<Vec<bool>> {
        let sprite = self.sprites.get(subject_index).ok_or_else(|| {
            Error::Contract(format!(
                "subject index {subject_index} out of {} sprites",
                self.sprites.len()
            ))
        })?;
        let c = self.geometry.canvas;
        let p = self.geometry.patch;
        let grid = self.geometry.grid();
        let mut mask = vec![false; grid * grid];
        for py in 0..c {
            for px in 0..c {
                if sprite.covers(px, py) {
                    mask[(py / p) * grid + px / p] = true;
                }
            }
        }
        Ok(mask)
    }

    pub fn attr_pairs(&self) -> Vec<AttrPair> {
        self.sprites.iter().map(|s| (s.color, s.shape)).collect()
    }
}

const PLACEMENT_RETRIES: usize = 1000;

/// Deterministically generate a scene from a seed. Placements are rejection
/// sampled until all sprite bounding boxes are pairwise disjoint.
pub fn generate_scene(geometry: Geometry, seed: u64, n_sprites: usize) -> Result<SpriteScene> {
    if !(1..=3).contains(&n_sprites) {
        return Err(Error::Contract(format!(
            "n_sprites must be 1..=3, got {n_sprites}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = all_attr_pairs();
    pairs.shuffle(&mut rng);
    let chosen: Vec<AttrPair> = pairs.into_iter().take(n_sprites).collect();
    let (lo, hi) = geometry.sprite_sizes();
    let canvas = geometry.canvas;

    for _ in 0..PLACEMENT_RETRIES {
        let mut sprites: Vec<Sprite> = Vec::with_capacity(n_sprites);
        type Box4 = (usize, usize, usize, usize);
        let mut boxes: Vec<(Box4, Box4)> = Vec::new();
        let mut ok = true;
        for &(color, shape) in &chosen {
            let size = rng.gen_range(lo..=hi);
            // one extra pixel keeps a background ring around every sprite
            let half = size.div_ceil(2) + 1;
            let cx = rng.gen_range(half..=canvas - half) as u8;
            let cy = rng.gen_range(half..=canvas - half) as u8;
            let sprite = Sprite {
                shape,
                color,
                cx,
                cy,
                size: size as u8,
            };
            // two separation rules: patch bounding boxes must be disjoint
            // (masks of distinct sprites never share a patch) and pixel
            // bounding boxes keep a two-pixel background moat (template
            // windows with their one-pixel ring stay uncontaminated)
            let pixel_bbox = match sprite.pixel_bbox(canvas) {
                Some(b) => b,
                None => {
                    ok = false;
                    break;
                }
            };
            let p = geometry.patch;
            let patch_bbox = (
                pixel_bbox.0 / p,
                pixel_bbox.1 / p,
                pixel_bbox.2 / p,
                pixel_bbox.3 / p,
            );
            let moat = (
                pixel_bbox.0.saturating_sub(2),
                pixel_bbox.1.saturating_sub(2),
                pixel_bbox.2 + 2,
                pixel_bbox.3 + 2,
            );
            let clash = boxes.iter().any(|&(pb, xb)| {
                bboxes_overlap(pb, patch_bbox) || bboxes_overlap(xb, moat)
            });
            if clash {
                ok = false;
                break;
            }
            boxes.push((patch_bbox, pixel_bbox));
            sprites.push(sprite);
        }
        if ok {
            return Ok(SpriteScene {
                geometry,
                seed,
                sprites,
            });
        }
    }
    Err(Error::Generation(format!(
        "no non-overlapping placement found after {PLACEMENT_RETRIES} retries (seed {seed})"
    )))
}

// ── Vocabulary ──────────────────────────────────────────────────────────

pub const PAD_TOKEN: u32 = 0;
pub const NULL_TOKEN: u32 = 1;

/// Fixed token inventory: PAD, NULL, articles, colors and shapes.
/// String<->id mapping is bijective; PAD is pinned to id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    /// query token count (subject phrases padded to this length)
    pub query_len: usize,
    /// caption token count (covers three "a {color} {shape}" clauses)
    pub caption_len: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words = vec!["<pad>".to_string(), "<null>".to_string()];
        words.push("a".to_string());
        words.push("and".to_string());
        for c in ColorKind::ALL {
            words.push(c.word().to_string());
        }
        for s in ShapeKind::ALL {
            words.push(s.word().to_string());
        }
        Vocabulary {
            words,
            query_len: 8,
            caption_len: 12,
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|p| p as u32)
            .ok_or_else(|| Error::Vocabulary(format!("unknown word {word:?}")))
    }

    pub fn word_of(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocabulary(format!("unknown token id {id}")))
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id_of(w).expect("sprite grammar word"))
            .collect()
    }

    pub fn encode_padded(&self, text: &str, len: usize) -> Vec<u32> {
        let mut ids = self.encode(text);
        ids.truncate(len);
        while ids.len() < len {
            ids.push(PAD_TOKEN);
        }
        ids
    }

    /// The null text: a single NULL token then padding. Used for caption
    /// dropout, classifier-free guidance and mask-mode queries.
    pub fn null_tokens(&self, len: usize) -> Vec<u32> {
        let mut ids = vec![NULL_TOKEN];
        while ids.len() < len {
            ids.push(PAD_TOKEN);
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == PAD_TOKEN {
                continue;
            }
            words.push(self.word_of(id)?.to_string());
        }
        Ok(words.join(" "))
    }

    /// Parse a caption back into its attribute pairs; the grammar is
    /// unambiguous so this inverts `SpriteScene::caption`.
    pub fn parse_caption(&self, caption: &str) -> Result<Vec<AttrPair>> {
        let mut pairs = Vec::new();
        for clause in caption.split(" and ") {
            let words: Vec<&str> = clause.split_whitespace().collect();
            let (color_word, shape_word) = match words.as_slice() {
                ["a", c, s] => (*c, *s),
                [c, s] => (*c, *s),
                _ => {
                    return Err(Error::Vocabulary(format!(
                        "unparseable clause {clause:?}"
                    )))
                }
            };
            let color = ColorKind::ALL
                .iter()
                .find(|c| c.word() == color_word)
                .copied()
                .ok_or_else(|| Error::Vocabulary(format!("unknown color {color_word:?}")))?;
            let shape = ShapeKind::ALL
                .iter()
                .find(|s| s.word() == shape_word)
                .copied()
                .ok_or_else(|| Error::Vocabulary(format!("unknown shape {shape_word:?}")))?;
            pairs.push((color, shape));
        }
        Ok(pairs)
    }
}

// ── Dataset file ────────────────────────────────────────────────────────

/// On-disk dataset. The header carries the geometry so loaders rebuild the
/// exact same scenes; records additionally carry the derived caption tokens
/// and masks, which the loader verifies against the re-derived values.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub geometry: Geometry,
    pub scenes: Vec<SpriteScene>,
}

impl Dataset {
    /// Training split: sprite counts cycle uniformly over 1..=3.
    /// Bench split: exactly the 2-3 sprite scenes the metrics are scoped to.
    pub fn generate(geometry: Geometry, count: usize, seed: u64, bench: bool) -> Result<Dataset> {
        let mut scenes = Vec::with_capacity(count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..count {
            let n = if bench {
                2 + (i % 2)
            } else {
                1 + (i % 3)
            };
            let scene_seed = rng.gen::<u64>();
            scenes.push(generate_scene(geometry, scene_seed, n)?);
        }
        Ok(Dataset { geometry, scenes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let vocab = Vocabulary::default();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&(self.geometry.canvas as u32).to_le_bytes());
        buf.extend_from_slice(&(self.geometry.patch as u32).to_le_bytes());
        buf.extend_from_slice(&(self.scenes.len() as u32).to_le_bytes());
        for scene in &self.scenes {
            buf.extend_from_slice(&scene.seed.to_le_bytes());
            buf.push(scene.sprites.len() as u8);
            for s in &scene.sprites {
                buf.extend_from_slice(&[s.shape.id(), s.color.id(), s.cx, s.cy, s.size]);
            }
            let caption = scene.caption_tokens(&vocab);
            buf.push(caption.len() as u8);
            for id in caption {
                buf.push(id as u8);
            }
            for i in 0..scene.sprites.len() {
                let mask = scene.patch_mask(i)?;
                buf.extend_from_slice(&(mask.len() as u32).to_le_bytes());
                let mut bits = vec![0u8; mask.len().div_ceil(8)];
                for (j, &m) in mask.iter().enumerate() {
                    if m {
                        bits[j / 8] |= 1 << (j % 8);
                    }
                }
                buf.extend_from_slice(&bits);
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(5)?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "bad dataset magic {:?}, expected {:?}",
                &magic[..magic.len().min(5)],
                DATASET_MAGIC
            )));
        }
        let canvas = cur.u32()? as usize;
        let patch = cur.u32()? as usize;
        let geometry = Geometry::new(canvas, patch)?;
        let count = cur.u32()? as usize;
        let vocab = Vocabulary::default();
        let mut scenes = Vec::with_capacity(count);
        for _ in 0..count {
            let seed = cur.u64()?;
            let n = cur.u8()? as usize;
            let mut sprites = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = cur.take(5)?;
                sprites.push(Sprite {
                    shape: ShapeKind::from_id(raw[0])?,
                    color: ColorKind::from_id(raw[1])?,
                    cx: raw[2],
                    cy: raw[3],
                    size: raw[4],
                });
            }
            let scene = SpriteScene {
                geometry,
                seed,
                sprites,
            };
            let cap_len = cur.u8()? as usize;
            let stored_caption: Vec<u32> = cur.take(cap_len)?.iter().map(|&b| b as u32).collect();
            if stored_caption != scene.caption_tokens(&vocab) {
                return Err(Error::Format(
                    "stored caption does not match sprite-derived caption".into(),
                ));
            }
            for i in 0..scene.sprites.len() {
                let mask_len = cur.u32()? as usize;
                let bits = cur.take(mask_len.div_ceil(8))?;
                let stored: Vec<bool> = (0..mask_len)
                    .map(|j| bits[j / 8] & (1 << (j % 8)) != 0)
                    .collect();
                if stored != scene.patch_mask(i)? {
                    return Err(Error::Format(
                        "stored mask does not match sprite-derived mask".into(),
                    ));
                }
            }
            scenes.push(scene);
        }
        Ok(Dataset { geometry, scenes })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sprite_caption_template() {
        for seed in 0..20 {
            let scene = generate_scene(Geometry::DESK, seed, 1).unwrap();
            let s = &scene.sprites[0];
            assert_eq!(
                scene.caption(),
                format!("a {} {}", s.color.word(), s.shape.word())
            );
        }
    }

    #[test]
    fn same_seed_gives_identical_scene() {
        let a = generate_scene(Geometry::DESK, 42, 3).unwrap();
        let b = generate_scene(Geometry::DESK, 42, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render::<f32>(), b.render::<f32>());
    }

    #[test]
    fn two_sprite_scenes_have_no_bbox_overlap() {
        // exhaustive scan over a large seed range
        for seed in 0..10_000u64 {
            let scene = generate_scene(Geometry::DESK, seed, 2).unwrap();
            let b0 = scene.sprites[0].pixel_bbox(32).unwrap();
            let b1 = scene.sprites[1].pixel_bbox(32).unwrap();
            assert!(!bboxes_overlap(b0, b1), "seed {seed}: {b0:?} vs {b1:?}");
        }
    }

    #[test]
    fn distinct_sprites_differ_in_attribute_pair() {
        for seed in 0..500 {
            let scene = generate_scene(Geometry::DESK, seed, 3).unwrap();
            let pairs = scene.attr_pairs();
            for i in 0..pairs.len() {
                for j in i + 1..pairs.len() {
                    assert_ne!(pairs[i], pairs[j]);
                }
            }
        }
    }

    #[test]
    fn empty_scene_renders_uniform_gray() {
        let scene = SpriteScene {
            geometry: Geometry::DESK,
            seed: 0,
            sprites: vec![],
        };
        let img = scene.render::<f32>();
        assert!(img.data.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn centered_red_circle_center_pixel_is_pure_red() {
        let scene = SpriteScene {
            geometry: Geometry::DESK,
            seed: 0,
            sprites: vec![Sprite {
                shape: ShapeKind::Circle,
                color: ColorKind::Red,
                cx: 16,
                cy: 16,
                size: 10,
            }],
        };
        let img = scene.render::<f32>();
        let c = 32;
        // pixel (16,16) has center (16.5,16.5), inside the radius-5 circle
        assert_eq!(img.data[16 * c + 16], 1.0);
        assert_eq!(img.data[c * c + 16 * c + 16], 0.0);
        assert_eq!(img.data[2 * c * c + 16 * c + 16], 0.0);
    }

    #[test]
    fn render_is_idempotent() {
        let scene = generate_scene(Geometry::DESK, 7, 2).unwrap();
        assert_eq!(scene.render::<f32>(), scene.render::<f32>());
    }

    #[test]
    fn query_tokens_select_the_right_sprite() {
        let vocab = Vocabulary::default();
        let scene = SpriteScene {
            geometry: Geometry::DESK,
            seed: 0,
            sprites: vec![
                Sprite {
                    shape: ShapeKind::Circle,
                    color: ColorKind::Red,
                    cx: 8,
                    cy: 8,
                    size: 6,
                },
                Sprite {
                    shape: ShapeKind::Square,
                    color: ColorKind::Blue,
                    cx: 24,
                    cy: 24,
                    size: 6,
                },
            ],
        };
        let q = scene.query_tokens(&vocab, 0).unwrap();
        assert_eq!(vocab.decode(&q).unwrap(), "red circle");
        assert_eq!(q.len(), vocab.query_len);
        assert!(scene.query_tokens(&vocab, 5).is_err());
    }

    #[test]
    fn single_sprite_query_is_caption_minus_article() {
        let vocab = Vocabulary::default();
        for seed in 0..20 {
            let scene = generate_scene(Geometry::DESK, seed, 1).unwrap();
            let caption = scene.caption();
            let q = scene.query_tokens(&vocab, 0).unwrap();
            assert_eq!(
                vocab.decode(&q).unwrap(),
                caption.strip_prefix("a ").unwrap()
            );
        }
    }

    #[test]
    fn every_query_decodes_to_unique_sprite_in_scene() {
        let vocab = Vocabulary::default();
        for seed in 0..2000u64 {
            let scene = generate_scene(Geometry::DESK, seed, 2 + (seed % 2) as usize).unwrap();
            for i in 0..scene.sprites.len() {
                let q = scene.query_tokens(&vocab, i).unwrap();
                let text = vocab.decode(&q).unwrap();
                let pair = vocab.parse_caption(&text).unwrap()[0];
                let matching = scene
                    .attr_pairs()
                    .iter()
                    .filter(|&&p| p == pair)
                    .count();
                assert_eq!(matching, 1, "seed {seed} query {text}");
            }
        }
    }

    #[test]
    fn patch_mask_matches_pixel_footprint_oracle() {
        for seed in 0..300u64 {
            let scene = generate_scene(Geometry::DESK, seed, 2).unwrap();
            for i in 0..scene.sprites.len() {
                let mask = scene.patch_mask(i).unwrap();
                // independent pixel-level recomputation
                let sprite = scene.sprites[i];
                let mut expected = vec![false; 64];
                for py in 0..32 {
                    for px in 0..32 {
                        if sprite.covers(px, py) {
                            expected[(py / 4) * 8 + px / 4] = true;
                        }
                    }
                }
                assert_eq!(mask, expected, "seed {seed} sprite {i}");
            }
        }
    }

    #[test]
    fn single_patch_sprite_has_exactly_one_mask_bit() {
        // size-3 sprite fully inside one 4x4 patch on the smoke canvas
        let geometry = Geometry::SMOKE;
        let scene = SpriteScene {
            geometry,
            seed: 0,
            sprites: vec![Sprite {
                shape: ShapeKind::Square,
                color: ColorKind::Red,
                cx: 2,
                cy: 2,
                size: 3,
            }],
        };
        let mask = scene.patch_mask(0).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[0]);
    }

    #[test]
    fn full_canvas_sprite_saturates_the_mask() {
        // a square covering the whole canvas touches every patch
        let scene = SpriteScene {
            geometry: Geometry::DESK,
            seed: 0,
            sprites: vec![Sprite {
                shape: ShapeKind::Square,
                color: ColorKind::Red,
                cx: 16,
                cy: 16,
                size: 32,
            }],
        };
        let mask = scene.patch_mask(0).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn masks_of_distinct_sprites_are_disjoint() {
        for seed in 0..300u64 {
            let scene = generate_scene(Geometry::DESK, seed, 3).unwrap();
            let masks: Vec<Vec<bool>> = (0..3).map(|i| scene.patch_mask(i).unwrap()).collect();
            for i in 0..3 {
                for j in i + 1..3 {
                    let both = masks[i]
                        .iter()
                        .zip(masks[j].iter())
                        .any(|(&a, &b)| a && b);
                    assert!(!both, "seed {seed}: masks {i} and {j} intersect");
                }
            }
        }
    }

    #[test]
    fn attribute_pairs_are_balanced_over_many_seeds() {
        let mut counts = std::collections::HashMap::new();
        let total = 10_000u64;
        for seed in 0..total {
            let scene = generate_scene(Geometry::DESK, seed, 1 + (seed % 3) as usize).unwrap();
            for pair in scene.attr_pairs() {
                *counts.entry(pair).or_insert(0usize) += 1;
            }
        }
        let all: usize = counts.values().sum();
        let expected = all as f64 / 16.0;
        for (&pair, &n) in &counts {
            let dev = (n as f64 - expected).abs() / expected;
            assert!(dev < 0.2, "{pair:?}: count {n} vs expected {expected:.1}");
        }
    }

    #[test]
    fn caption_grammar_round_trips() {
        let vocab = Vocabulary::default();
        for seed in 0..500u64 {
            let scene = generate_scene(Geometry::DESK, seed, 1 + (seed % 3) as usize).unwrap();
            let parsed = vocab.parse_caption(&scene.caption()).unwrap();
            assert_eq!(parsed, scene.attr_pairs());
        }
    }

    #[test]
    fn caption_tokens_fit_caption_len() {
        let vocab = Vocabulary::default();
        for seed in 0..50 {
            let scene = generate_scene(Geometry::DESK, seed, 3).unwrap();
            let raw = vocab.encode(&scene.caption());
            assert!(raw.len() <= vocab.caption_len, "{}", scene.caption());
        }
    }

    #[test]
    fn dataset_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.ssrd");
        let ds = Dataset::generate(Geometry::DESK, 50, 9, false).unwrap();
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(ds.scenes, loaded.scenes);
        assert_eq!(ds.geometry, loaded.geometry);
    }

    #[test]
    fn bench_split_has_two_or_three_sprites() {
        let ds = Dataset::generate(Geometry::DESK, 100, 1, true).unwrap();
        assert_eq!(ds.scenes.len(), 100);
        assert!(ds
            .scenes
            .iter()
            .all(|s| s.sprites.len() == 2 || s.sprites.len() == 3));
    }

    #[test]
    fn truncated_dataset_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.ssrd");
        let ds = Dataset::generate(Geometry::DESK, 10, 2, false).unwrap();
        ds.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn smoke_canvas_generation_succeeds_across_seeds() {
        for seed in 0..3000u64 {
            let n = 1 + (seed % 3) as usize;
            generate_scene(Geometry::SMOKE, seed, n).unwrap();
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.ssrd");
        std::fs::write(&path, b"NOPE!xxxxxxxxxxx").unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format(_))));
    }
}
