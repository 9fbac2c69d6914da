//! Oracle-based evaluation: exact template detection of sprites in
//! generated images, presence/leakage/similarity metrics over the
//! two-to-three-subject bench, the ablation table and the lambda sweep.

use crate::clip::DualEncoder;
use crate::diffusion::{ddim_sample, SampleConfig, SubjectAt, UNetTiny};
use crate::error::{Error, Result};
use crate::injection::SubjectBranch;
use crate::sprites::{
    all_attr_pairs, AttrPair, ColorKind, Geometry, ShapeKind, Sprite, SpriteScene,
};
use crate::subject::{compose_multi_image, SsrEncoder, SubjectEmbedding};
use crate::tensor::Tensor;
use crate::train::derive_seed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Correlation floor for accepting a template match; calibrated so that
/// detection on clean renders is exact over the whole attribute space.
pub const DETECT_THRESHOLD: f64 = 0.6;

// ── Oracle detection ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub shape: u8,
    pub color: u8,
    pub center: (usize, usize),
    pub size: usize,
    pub score: f64,
    #[serde(skip)]
    pub bbox: (usize, usize, usize, usize),
}

impl Detection {
    pub fn pair(&self) -> AttrPair {
        (
            ColorKind::from_id(self.color).unwrap(),
            ShapeKind::from_id(self.shape).unwrap(),
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OracleDetection {
    pub detections: Vec<Detection>,
}

impl OracleDetection {
    pub fn contains(&self, pair: AttrPair) -> bool {
        self.detections.iter().any(|d| d.pair() == pair)
    }

    pub fn best(&self, pair: AttrPair) -> Option<&Detection> {
        self.detections
            .iter()
            .filter(|d| d.pair() == pair)
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
    }

    pub fn pairs(&self) -> Vec<AttrPair> {
        self.detections.iter().map(|d| d.pair()).collect()
    }
}

struct Template {
    shape: ShapeKind,
    color: ColorKind,
    size: usize,
    width: usize,
    height: usize,
    /// mean-subtracted rgb template over the footprint bounding box
    centered: Vec<f64>,
    norm: f64,
    /// sprite-center offset inside the bounding box
    center_off: (usize, usize),
}

/// Template-matching detector over the full (shape, color, size) space.
pub struct Oracle {
    pub geometry: Geometry,
    templates: Vec<Template>,
}

impl Oracle {
    pub fn new(geometry: Geometry) -> Self {
        let (lo, hi) = geometry.sprite_sizes();
        let mut templates = Vec::new();
        let canvas = geometry.canvas;
        let center = (canvas / 2) as u8;
        for shape in ShapeKind::ALL {
            for color in ColorKind::ALL {
                for size in lo..=hi {
                    let sprite = Sprite {
                        shape,
                        color,
                        cx: center,
                        cy: center,
                        size: size as u8,
                    };
                    let Some((bx0, by0, bx1, by1)) = sprite.pixel_bbox(canvas) else {
                        continue;
                    };
                    // grow the window by one background pixel on every side
                    // so the template encodes its silhouette boundary;
                    // without the ring a filled square is constant color and
                    // would match solid regions of any size
                    let (x0, y0, x1, y1) = (bx0 - 1, by0 - 1, bx1 + 1, by1 + 1);
                    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
                    let rgb = color.rgb();
                    let mut values = Vec::with_capacity(3 * w * h);
                    for c in 0..3 {
                        for py in y0..=y1 {
                            for px in x0..=x1 {
                                let v = if sprite.covers(px, py) {
                                    rgb[c] as f64
                                } else {
                                    crate::sprites::BACKGROUND as f64
                                };
                                values.push(v);
                            }
                        }
                    }
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
                    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    templates.push(Template {
                        shape,
                        color,
                        size,
                        width: w,
                        height: h,
                        centered,
                        norm,
                        center_off: (center as usize - x0, center as usize - y0),
                    });
                }
            }
        }
        Oracle {
            geometry,
            templates,
        }
    }

    /// Normalized cross-correlation of every template at every valid
    /// placement, kept above threshold and greedily non-overlapping.
    pub fn detect(&self, image01: &Tensor<f32>) -> Result<OracleDetection> {
        let c = self.geometry.canvas;
        if image01.shape != [3, c, c] {
            return Err(Error::Dimension(format!(
                "image shape {:?}, oracle expects [3, {c}, {c}]",
                image01.shape
            )));
        }
        let mut candidates: Vec<Detection> = Vec::new();
        for t in &self.templates {
            for y0 in 0..=(c - t.height) {
                for x0 in 0..=(c - t.width) {
                    // window in template layout: channel-major, row-major
                    let n = t.centered.len();
                    let mut sum = 0.0f64;
                    let mut values = Vec::with_capacity(n);
                    for ch in 0..3 {
                        for py in 0..t.height {
                            for px in 0..t.width {
                                let v = image01.data[ch * c * c + (y0 + py) * c + x0 + px] as f64;
                                values.push(v);
                                sum += v;
                            }
                        }
                    }
                    let mean = sum / n as f64;
                    let mut dot = 0.0;
                    let mut win_sq = 0.0;
                    for (v, tc) in values.iter().zip(t.centered.iter()) {
                        let w = v - mean;
                        dot += w * tc;
                        win_sq += w * w;
                    }
                    if win_sq <= 0.0 {
                        continue;
                    }
                    let score = dot / (win_sq.sqrt() * t.norm);
                    if score >= DETECT_THRESHOLD {
                        candidates.push(Detection {
                            shape: t.shape.id(),
                            color: t.color.id(),
                            center: (x0 + t.center_off.0, y0 + t.center_off.1),
                            size: t.size,
                            score,
                            bbox: (x0, y0, x0 + t.width - 1, y0 + t.height - 1),
                        });
                    }
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.shape.cmp(&b.shape))
                .then(a.color.cmp(&b.color))
                .then(a.bbox.cmp(&b.bbox))
        });
        let mut accepted: Vec<Detection> = Vec::new();
        for cand in candidates {
            let overlaps = accepted.iter().any(|a| {
                let (ax0, ay0, ax1, ay1) = a.bbox;
                let (bx0, by0, bx1, by1) = cand.bbox;
                ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1
            });
            if !overlaps {
                accepted.push(cand);
            }
        }
        Ok(OracleDetection {
            detections: accepted,
        })
    }
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Fraction of images whose detections include the queried subject.
pub fn presence_score(detections: &[OracleDetection], queried: AttrPair) -> Result<f64> {
    if detections.is_empty() {
        return Err(Error::Contract("presence over an empty set".into()));
    }
    let hits = detections.iter().filter(|d| d.contains(queried)).count();
    Ok(hits as f64 / detections.len() as f64)
}

/// Fraction of images containing any non-queried subject of the reference
/// scene; only defined for multi-subject references.
pub fn leakage_score(
    detections: &[OracleDetection],
    reference: &SpriteScene,
    queried: AttrPair,
) -> Result<f64> {
    if reference.sprites.len() < 2 {
        return Err(Error::Contract(
            "leakage is undefined for single-subject references".into(),
        ));
    }
    if detections.is_empty() {
        return Err(Error::Contract("leakage over an empty set".into()));
    }
    let others: Vec<AttrPair> = reference
        .attr_pairs()
        .into_iter()
        .filter(|&p| p != queried)
        .collect();
    let leaked = detections
        .iter()
        .filter(|d| others.iter().any(|&p| d.contains(p)))
        .count();
    Ok(leaked as f64 / detections.len() as f64)
}

/// Identity similarity of the queried subject in one generated image: the
/// clamped template correlation of its best detection, zero when absent.
pub fn subject_similarity(detections: &OracleDetection, queried: AttrPair) -> f64 {
    detections
        .best(queried)
        .map(|d| d.score.clamp(0.0, 1.0))
        .unwrap_or(0.0)
}

// ── Bench runner ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRecord {
    pub scene_idx: usize,
    pub query_idx: usize,
    pub queried_color: String,
    pub queried_shape: String,
    pub sample_seed: u64,
    pub present: bool,
    pub leaked: bool,
    pub similarity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: String,
    pub config_fingerprint: String,
    pub input_hashes: BTreeMap<String, String>,
    pub presence: f64,
    pub leakage: f64,
    pub subject_similarity: f64,
    pub records: Vec<BenchRecord>,
}

pub struct BenchConfig {
    pub queries_per_scene: usize,
    pub seeds_per_query: usize,
    pub seed: u64,
    pub sample: SampleConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            queries_per_scene: 2,
            seeds_per_query: 3,
            seed: 0,
            sample: SampleConfig::default(),
        }
    }
}

/// Models evaluated together on the bench; `subject` is absent for the
/// text-only configuration.
pub struct BenchModels<'a> {
    pub clip: &'a DualEncoder<f32>,
    pub unet: &'a UNetTiny<f32>,
    pub subject: Option<(&'a SsrEncoder<f32>, &'a SubjectBranch<f32>)>,
}

fn caption_for(pair: AttrPair) -> String {
    format!("a {} {}", pair.0.word(), pair.1.word())
}

/// Run the generation bench: for every scene, query and seed, generate one
/// image conditioned on the queried subject's prompt (and, when a subject
/// stack is present, on the query-selected reference embedding), then
/// score it with the oracle. Record order is fixed, so reports are
/// deterministic under any thread count.
pub fn run_bench(
    models: &BenchModels<'_>,
    scenes: &[SpriteScene],
    cfg: &BenchConfig,
    label: &str,
) -> Result<BenchReport> {
    let oracle = Oracle::new(models.unet.geometry);
    let vocab = &models.clip.vocab;
    let uncond = models
        .clip
        .text_features(&vocab.null_tokens(vocab.caption_len))?;

    struct Job {
        scene_idx: usize,
        query_idx: usize,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for (scene_idx, scene) in scenes.iter().enumerate() {
        for query_idx in 0..cfg.queries_per_scene.min(scene.sprites.len()) {
            for s in 0..cfg.seeds_per_query {
                jobs.push(Job {
                    scene_idx,
                    query_idx,
                    seed: derive_seed(&[cfg.seed, scene_idx as u64, query_idx as u64, s as u64]),
                });
            }
        }
    }

    let run_one = |job: &Job| -> Result<BenchRecord> {
        let scene = &scenes[job.scene_idx];
        let queried = scene.attr_pairs()[job.query_idx];
        let prompt = vocab.encode_padded(&caption_for(queried), vocab.caption_len);
        let cond = models.clip.text_features(&prompt)?;

        let embedding: Option<SubjectEmbedding<f32>> = match models.subject {
            Some((ssr, _)) => {
                let reference = scene.render::<f32>();
                let query = scene.query_tokens(vocab, job.query_idx)?;
                Some(ssr.encode(models.clip, &reference, &query, None)?.1)
            }
            None => None,
        };
        let subject = match (&embedding, models.subject) {
            (Some(e), Some((_, branch))) => Some(SubjectAt {
                embedding: &e.concatenated,
                branch,
                lambda: cfg.sample.lambda,
            }),
            _ => None,
        };
        let sample_cfg = SampleConfig {
            seed: job.seed,
            ..cfg.sample.clone()
        };
        let image = ddim_sample(models.unet, &cond, &uncond, subject, &sample_cfg)?;
        let detections = oracle.detect(&image)?;
        Ok(BenchRecord {
            scene_idx: job.scene_idx,
            query_idx: job.query_idx,
            queried_color: queried.0.word().to_string(),
            queried_shape: queried.1.word().to_string(),
            sample_seed: job.seed,
            present: detections.contains(queried),
            leaked: leakage_score(std::slice::from_ref(&detections), scene, queried)? > 0.0,
            similarity: subject_similarity(&detections, queried),
        })
    };

    #[cfg(feature = "parallel")]
    let records: Vec<BenchRecord> = jobs.par_iter().map(run_one).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let records: Vec<BenchRecord> = jobs.iter().map(run_one).collect::<Result<_>>()?;

    let n = records.len() as f64;
    let presence = records.iter().filter(|r| r.present).count() as f64 / n;
    let leakage = records.iter().filter(|r| r.leaked).count() as f64 / n;
    let similarity = records.iter().map(|r| r.similarity).sum::<f64>() / n;
    let config = format!(
        "config={label} scenes={} queries={} seeds={} steps={} guidance={} lambda={}",
        scenes.len(),
        cfg.queries_per_scene,
        cfg.seeds_per_query,
        cfg.sample.steps,
        cfg.sample.guidance,
        cfg.sample.lambda,
    );
    Ok(BenchReport {
        config_fingerprint: crate::checkpoint::string_sha256(&config),
        config,
        input_hashes: BTreeMap::new(),
        presence,
        leakage,
        subject_similarity: similarity,
        records,
    })
}

/// The four ablation configurations of the report table.
pub struct AblationModels<'a> {
    pub clip: &'a DualEncoder<f32>,
    pub unet: &'a UNetTiny<f32>,
    pub full: (&'a SsrEncoder<f32>, &'a SubjectBranch<f32>),
    pub no_reg: (&'a SsrEncoder<f32>, &'a SubjectBranch<f32>),
    pub no_multiscale: (&'a SsrEncoder<f32>, &'a SubjectBranch<f32>),
}

/// One report per config: full, no_reg, no_multiscale and text_only (the
/// base model with the subject condition removed).
pub fn run_ablation(
    models: &AblationModels<'_>,
    scenes: &[SpriteScene],
    cfg: &BenchConfig,
) -> Result<Vec<(String, BenchReport)>> {
    let mut out = Vec::new();
    for (name, subject) in [
        ("full", Some(models.full)),
        ("no_reg", Some(models.no_reg)),
        ("no_multiscale", Some(models.no_multiscale)),
        ("text_only", None),
    ] {
        let bench_models = BenchModels {
            clip: models.clip,
            unet: models.unet,
            subject,
        };
        out.push((
            name.to_string(),
            run_bench(&bench_models, scenes, cfg, name)?,
        ));
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[(String, BenchReport)]) -> String {
    let mut out = String::from("config,presence,leakage,subject_similarity\n");
    for (name, report) in rows {
        out.push_str(&format!(
            "{name},{:.4},{:.4},{:.4}\n",
            report.presence, report.leakage, report.subject_similarity
        ));
    }
    out
}

/// Presence across a grid of subject weights with shared seeds.
pub fn sweep_lambda(
    models: &BenchModels<'_>,
    scenes: &[SpriteScene],
    cfg: &BenchConfig,
    lambdas: &[f64],
) -> Result<Vec<(f64, BenchReport)>> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        let cfg = BenchConfig {
            queries_per_scene: cfg.queries_per_scene,
            seeds_per_query: cfg.seeds_per_query,
            seed: cfg.seed,
            sample: SampleConfig {
                lambda,
                ..cfg.sample.clone()
            },
        };
        let label = format!("lambda={lambda}");
        out.push((lambda, run_bench(models, scenes, &cfg, &label)?));
    }
    Ok(out)
}

/// Mask-guided generation stats for two-subject scenes: sample with the
/// null-text query and the ground-truth mask of one subject, then measure
/// how often the masked subject versus the other appears.
pub struct MaskModeOutcome {
    pub masked_presence: f64,
    pub other_presence: f64,
    pub samples: usize,
}

pub fn mask_mode_selectivity(
    clip: &DualEncoder<f32>,
    unet: &UNetTiny<f32>,
    ssr: &SsrEncoder<f32>,
    branch: &SubjectBranch<f32>,
    scenes: &[SpriteScene],
    seeds_per_scene: usize,
    sample: &SampleConfig,
    seed: u64,
) -> Result<MaskModeOutcome> {
    let two_subject: Vec<&SpriteScene> =
        scenes.iter().filter(|s| s.sprites.len() == 2).collect();
    if two_subject.is_empty() {
        return Err(Error::Contract(
            "mask-mode evaluation needs two-subject scenes".into(),
        ));
    }
    let oracle = Oracle::new(unet.geometry);
    let vocab = &clip.vocab;
    let null_ctx = clip.text_features(&vocab.null_tokens(vocab.caption_len))?;
    let null_query = vocab.null_tokens(vocab.query_len);

    struct Job {
        scene_idx: usize,
        subject_idx: usize,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for (i, _) in two_subject.iter().enumerate() {
        for subject_idx in 0..2 {
            for s in 0..seeds_per_scene {
                jobs.push(Job {
                    scene_idx: i,
                    subject_idx,
                    seed: derive_seed(&[seed, 0x3A5C, i as u64, subject_idx as u64, s as u64]),
                });
            }
        }
    }

    let run_one = |job: &Job| -> Result<(bool, bool)> {
        let scene = two_subject[job.scene_idx];
        let mask = scene.patch_mask(job.subject_idx)?;
        let (_, embedding) =
            ssr.encode(clip, &scene.render::<f32>(), &null_query, Some(&mask))?;
        let cfg = SampleConfig {
            seed: job.seed,
            ..sample.clone()
        };
        let image = ddim_sample(
            unet,
            &null_ctx,
            &null_ctx,
            Some(SubjectAt {
                embedding: &embedding.concatenated,
                branch,
                lambda: cfg.lambda,
            }),
            &cfg,
        )?;
        let detections = oracle.detect(&image)?;
        let pairs = scene.attr_pairs();
        let masked = detections.contains(pairs[job.subject_idx]);
        let other = detections.contains(pairs[1 - job.subject_idx]);
        Ok((masked, other))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<(bool, bool)> = jobs.par_iter().map(run_one).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(bool, bool)> = jobs.iter().map(run_one).collect::<Result<_>>()?;

    let n = results.len();
    Ok(MaskModeOutcome {
        masked_presence: results.iter().filter(|r| r.0).count() as f64 / n as f64,
        other_presence: results.iter().filter(|r| r.1).count() as f64 / n as f64,
        samples: n,
    })
}

/// Multi-image composition: two single-subject references combined, both
/// subjects prompted; returns each subject's presence rate.
pub struct CompositionOutcome {
    pub presence_first: f64,
    pub presence_second: f64,
    pub samples: usize,
}

pub fn composition_presence(
    clip: &DualEncoder<f32>,
    unet: &UNetTiny<f32>,
    ssr: &SsrEncoder<f32>,
    branch: &SubjectBranch<f32>,
    n_samples: usize,
    sample: &SampleConfig,
    seed: u64,
) -> Result<CompositionOutcome> {
    let oracle = Oracle::new(unet.geometry);
    let vocab = &clip.vocab;
    let uncond = clip.text_features(&vocab.null_tokens(vocab.caption_len))?;
    let pairs = all_attr_pairs();

    let jobs: Vec<u64> = (0..n_samples as u64).collect();
    let run_one = |i: &u64| -> Result<(bool, bool)> {
        let mut rng = rand::SeedableRng::seed_from_u64(derive_seed(&[seed, 0xC0A9, *i]));
        let rng: &mut rand_chacha::ChaCha8Rng = &mut rng;
        let a = pairs[rand::Rng::gen_range(rng, 0..pairs.len())];
        let b = loop {
            let cand = pairs[rand::Rng::gen_range(rng, 0..pairs.len())];
            if cand != a {
                break cand;
            }
        };
        let scene_for = |pair: AttrPair, salt: u64| -> Result<SpriteScene> {
            // rejection over seeds until the singleton scene shows `pair`
            let mut k = 0u64;
            loop {
                let s = crate::sprites::generate_scene(
                    unet.geometry,
                    derive_seed(&[seed, salt, *i, k]),
                    1,
                )?;
                if s.attr_pairs()[0] == pair {
                    return Ok(s);
                }
                k += 1;
            }
        };
        let scene_a = scene_for(a, 1)?;
        let scene_b = scene_for(b, 2)?;
        let query_a = scene_a.query_tokens(vocab, 0)?;
        let query_b = scene_b.query_tokens(vocab, 0)?;
        let emb_a = ssr.encode(clip, &scene_a.render::<f32>(), &query_a, None)?.1;
        let emb_b = ssr.encode(clip, &scene_b.render::<f32>(), &query_b, None)?.1;
        let composed = compose_multi_image(&[emb_a, emb_b])?;

        let prompt = format!("{} and {}", caption_for(a), caption_for(b));
        let cond = clip.text_features(&vocab.encode_padded(&prompt, vocab.caption_len))?;
        let cfg = SampleConfig {
            seed: derive_seed(&[seed, 0x5A3B, *i]),
            ..sample.clone()
        };
        let image = ddim_sample(
            unet,
            &cond,
            &uncond,
            Some(SubjectAt {
                embedding: &composed.concatenated,
                branch,
                lambda: cfg.lambda,
            }),
            &cfg,
        )?;
        let detections = oracle.detect(&image)?;
        Ok((detections.contains(a), detections.contains(b)))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<(bool, bool)> = jobs.par_iter().map(run_one).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(bool, bool)> = jobs.iter().map(run_one).collect::<Result<_>>()?;

    Ok(CompositionOutcome {
        presence_first: results.iter().filter(|r| r.0).count() as f64 / n_samples as f64,
        presence_second: results.iter().filter(|r| r.1).count() as f64 / n_samples as f64,
        samples: n_samples,
    })
}
