//! Dual encoder: a token-level text encoder and a multi-scale patch image
//! encoder, jointly pretrained with a symmetric InfoNCE objective over
//! pooled embeddings and frozen afterwards. The image encoder taps every
//! block so downstream consumers see fine-grained features from early
//! layers alongside the semantic embedding of the final block.

use crate::error::{Error, Result};
use crate::nn::{
    layer_norm_forward, LayerNorm, LinearLayer, ParamContainer, TransformerBlock, TransformerVars,
};
use crate::sprites::{Geometry, SpriteScene, Vocabulary, PAD_TOKEN};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Shared embedding width of both encoders. The consistency loss compares
/// text rows with subject rows directly, which requires equal dims.
pub const EMBED_DIM: usize = 64;
pub const ATTN_HEADS: usize = 2;
pub const FF_HIDDEN: usize = 128;
pub const TEXT_DEPTH: usize = 2;
pub const IMAGE_DEPTH: usize = 4;
/// Number of detail scales tapped from the image encoder in addition to
/// the final-block semantic embedding.
pub const DEFAULT_K_SCALES: usize = 3;

const NEG_BIAS: f64 = -1e9;
/// log(1/0.07), the usual contrastive temperature init.
const INIT_LOG_TEMPERATURE: f64 = 2.659_26;

// ── Text encoder ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TextEncoder<F> {
    pub token_embed: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub final_ln: LayerNorm<F>,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl<F: Real> TextEncoder<F> {
    pub fn new<R: Rng>(vocab_size: usize, max_len: usize, rng: &mut R) -> Self {
        let scale = 0.02;
        TextEncoder {
            token_embed: scaled_randn(vec![vocab_size, EMBED_DIM], scale, rng),
            pos_embed: scaled_randn(vec![max_len, EMBED_DIM], scale, rng),
            blocks: (0..TEXT_DEPTH)
                .map(|_| TransformerBlock::new(EMBED_DIM, ATTN_HEADS, FF_HIDDEN, rng))
                .collect(),
            final_ln: LayerNorm::new(EMBED_DIM),
            vocab_size,
            max_len,
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> TextEncoderVars {
        let tok = if trainable {
            tape.param(format!("{prefix}.tok"), &self.token_embed)
        } else {
            tape.constant(&self.token_embed)
        };
        let pos = if trainable {
            tape.param(format!("{prefix}.pos"), &self.pos_embed)
        } else {
            tape.constant(&self.pos_embed)
        };
        TextEncoderVars {
            tok,
            pos,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(tape, &format!("{prefix}.b{i}"), trainable))
                .collect(),
            final_ln: self
                .final_ln
                .bind(tape, &format!("{prefix}.ln"), trainable),
            vocab_size: self.vocab_size,
            max_len: self.max_len,
        }
    }
}

impl<F: Real> ParamContainer<F> for TextEncoder<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.tok"), &self.token_embed);
        f(format!("{prefix}.pos"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each_param(&format!("{prefix}.b{i}"), f);
        }
        self.final_ln.for_each_param(&format!("{prefix}.ln"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.tok"), &mut self.token_embed);
        f(format!("{prefix}.pos"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param_mut(&format!("{prefix}.b{i}"), f);
        }
        self.final_ln
            .for_each_param_mut(&format!("{prefix}.ln"), f);
    }
}

pub struct TextEncoderVars {
    pub tok: Var,
    pub pos: Var,
    pub blocks: Vec<TransformerVars>,
    pub final_ln: crate::nn::LayerNormVars,
    pub vocab_size: usize,
    pub max_len: usize,
}

/// Encode a padded token sequence into per-token features [len, D]. PAD
/// positions are masked out of attention (no one attends to them) but keep
/// their own output rows.
pub fn encode_text<F: Real>(
    tape: &mut Tape<F>,
    vars: &TextEncoderVars,
    tokens: &[u32],
) -> Result<Var> {
    if tokens.is_empty() || tokens.len() > vars.max_len {
        return Err(Error::Dimension(format!(
            "token sequence of {} vs max length {}",
            tokens.len(),
            vars.max_len
        )));
    }
    let ids: Vec<usize> = tokens
        .iter()
        .map(|&t| {
            let id = t as usize;
            if id >= vars.vocab_size {
                Err(Error::Vocabulary(format!(
                    "token id {id} out of vocabulary of {}",
                    vars.vocab_size
                )))
            } else {
                Ok(id)
            }
        })
        .collect::<Result<_>>()?;
    let len = ids.len();
    let tok = tape.gather_rows(vars.tok, &ids)?;
    let pos_ids: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(vars.pos, &pos_ids)?;
    let mut x = tape.add(tok, pos)?;

    let mask = pad_key_mask::<F>(tokens, len);
    for block in &vars.blocks {
        x = crate::nn::transformer_forward(tape, block, x, mask.as_ref())?;
    }
    layer_norm_forward(tape, &vars.final_ln, x)
}

/// Additive [len, len] bias putting a large negative value on PAD key
/// columns; None when nothing is padded.
fn pad_key_mask<F: Real>(tokens: &[u32], len: usize) -> Option<Tensor<F>> {
    if tokens.iter().all(|&t| t != PAD_TOKEN) {
        return None;
    }
    let mut data = vec![F::zero(); len * len];
    for (j, &t) in tokens.iter().enumerate() {
        if t == PAD_TOKEN {
            for i in 0..len {
                data[i * len + j] = F::from_f64(NEG_BIAS);
            }
        }
    }
    Some(Tensor {
        shape: vec![len, len],
        data,
    })
}

pub fn non_pad_mask(tokens: &[u32]) -> Vec<bool> {
    tokens.iter().map(|&t| t != PAD_TOKEN).collect()
}

// ── Image encoder ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ImageEncoder<F> {
    pub geometry: Geometry,
    pub patch_embed: LinearLayer<F>,
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub k_scales: usize,
}

impl<F: Real> ImageEncoder<F> {
    pub fn new<R: Rng>(
        geometry: Geometry,
        depth: usize,
        k_scales: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 || k_scales + 1 > depth {
            return Err(Error::Config(format!(
                "image encoder needs depth > K, got depth {depth} and K {k_scales}"
            )));
        }
        let patch_dim = 3 * geometry.patch * geometry.patch;
        Ok(ImageEncoder {
            geometry,
            patch_embed: LinearLayer::new(patch_dim, EMBED_DIM, true, rng),
            pos_embed: scaled_randn(vec![geometry.n_patches(), EMBED_DIM], 0.02, rng),
            blocks: (0..depth)
                .map(|_| TransformerBlock::new(EMBED_DIM, ATTN_HEADS, FF_HIDDEN, rng))
                .collect(),
            k_scales,
        })
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> ImageEncoderVars {
        ImageEncoderVars {
            patch: self
                .patch_embed
                .bind(tape, &format!("{prefix}.patch"), trainable),
            pos: if trainable {
                tape.param(format!("{prefix}.pos"), &self.pos_embed)
            } else {
                tape.constant(&self.pos_embed)
            },
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(tape, &format!("{prefix}.b{i}"), trainable))
                .collect(),
            geometry: self.geometry,
            k_scales: self.k_scales,
        }
    }
}

impl<F: Real> ParamContainer<F> for ImageEncoder<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.patch_embed
            .for_each_param(&format!("{prefix}.patch"), f);
        f(format!("{prefix}.pos"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each_param(&format!("{prefix}.b{i}"), f);
        }
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.patch_embed
            .for_each_param_mut(&format!("{prefix}.patch"), f);
        f(format!("{prefix}.pos"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param_mut(&format!("{prefix}.b{i}"), f);
        }
    }
}

pub struct ImageEncoderVars {
    pub patch: crate::nn::LinearVars,
    pub pos: Var,
    pub blocks: Vec<TransformerVars>,
    pub geometry: Geometry,
    pub k_scales: usize,
}

/// Per-scale patch features of a reference image: `scales[0]` is the
/// semantic embedding from the final block, `scales[k]` for k >= 1 tap the
/// k-th block from the bottom.
#[derive(Clone, Debug)]
pub struct MultiScaleVisual<F> {
    pub scales: Vec<Tensor<F>>,
}

impl<F: Real> MultiScaleVisual<F> {
    pub fn k_scales(&self) -> usize {
        self.scales.len() - 1
    }
}

/// Encode an image into K+1 tapped feature maps, ordered [z0, z1, .., zK].
pub fn encode_image_multiscale<F: Real>(
    tape: &mut Tape<F>,
    vars: &ImageEncoderVars,
    image: &Tensor<F>,
) -> Result<Vec<Var>> {
    let c = vars.geometry.canvas;
    if image.shape != [3, c, c] {
        return Err(Error::Dimension(format!(
            "image shape {:?}, encoder expects [3, {c}, {c}]",
            image.shape
        )));
    }
    let img = tape.constant(image);
    let patches = tape.patch_extract(img, vars.geometry.patch)?;
    let embedded = crate::nn::linear_forward(tape, &vars.patch, patches)?;
    let mut x = tape.add(embedded, vars.pos)?;

    let mut taps: Vec<Var> = Vec::with_capacity(vars.k_scales);
    for (i, block) in vars.blocks.iter().enumerate() {
        x = crate::nn::transformer_forward(tape, block, x, None)?;
        if i + 1 <= vars.k_scales {
            taps.push(x);
        }
    }
    let mut scales = Vec::with_capacity(vars.k_scales + 1);
    scales.push(x); // z0: final block
    scales.extend(taps);
    Ok(scales)
}

// ── Dual encoder ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DualEncoder<F> {
    pub vocab: Vocabulary,
    pub text: TextEncoder<F>,
    pub image: ImageEncoder<F>,
    pub log_temperature: Tensor<F>,
    pub frozen: bool,
}

impl<F: Real> DualEncoder<F> {
    pub fn new(geometry: Geometry, k_scales: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::default();
        Ok(DualEncoder {
            text: TextEncoder::new(vocab.len(), vocab.caption_len, &mut rng),
            image: ImageEncoder::new(geometry, IMAGE_DEPTH, k_scales, &mut rng)?,
            vocab,
            log_temperature: Tensor::scalar(F::from_f64(INIT_LOG_TEMPERATURE)),
            frozen: false,
        })
    }

    pub fn temperature(&self) -> F {
        self.log_temperature.data[0].exp()
    }

    /// Per-token text features as a plain tensor (throwaway tape).
    pub fn text_features(&self, tokens: &[u32]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = self.text.bind(&mut tape, "text", false);
        let out = encode_text(&mut tape, &vars, tokens)?;
        Ok(tape.value(out).clone())
    }

    /// Multi-scale image features as plain tensors (throwaway tape).
    pub fn image_features(&self, image: &Tensor<F>) -> Result<MultiScaleVisual<F>> {
        let mut tape = Tape::new();
        let vars = self.image.bind(&mut tape, "img", false);
        let scales = encode_image_multiscale(&mut tape, &vars, image)?;
        Ok(MultiScaleVisual {
            scales: scales.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    /// L2-normalized pooled text embedding (masked mean over non-PAD rows).
    pub fn pooled_text(&self, tokens: &[u32]) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let vars = self.text.bind(&mut tape, "text", false);
        let enc = encode_text(&mut tape, &vars, tokens)?;
        let pooled = tape.masked_mean_rows(enc, &non_pad_mask(tokens))?;
        let d = tape.value(pooled).numel();
        let mat = tape.reshape(pooled, vec![1, d])?;
        let normed = tape.row_normalize(mat)?;
        Ok(tape.value(normed).data.clone())
    }

    /// L2-normalized pooled image embedding (mean over patches of z0).
    pub fn pooled_image(&self, image: &Tensor<F>) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let vars = self.image.bind(&mut tape, "img", false);
        let scales = encode_image_multiscale(&mut tape, &vars, image)?;
        let pooled = tape.mean_axis(scales[0], 0)?;
        let d = tape.value(pooled).numel();
        let mat = tape.reshape(pooled, vec![1, d])?;
        let normed = tape.row_normalize(mat)?;
        Ok(tape.value(normed).data.clone())
    }
}

impl<F: Real> ParamContainer<F> for DualEncoder<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.text.for_each_param(&format!("{prefix}.text"), f);
        self.image.for_each_param(&format!("{prefix}.img"), f);
        f(format!("{prefix}.temp"), &self.log_temperature);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.text.for_each_param_mut(&format!("{prefix}.text"), f);
        self.image.for_each_param_mut(&format!("{prefix}.img"), f);
        f(format!("{prefix}.temp"), &mut self.log_temperature);
    }
}

// ── Contrastive pretraining ─────────────────────────────────────────────

pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct PretrainStats {
    pub first_loss: f64,
    pub last_loss: f64,
}

/// One InfoNCE step over a batch of scenes. Encoder forwards run on
/// per-sample tapes (parallel when enabled); the pooled embeddings meet on
/// a small head tape whose backward seeds each sample tape's reverse pass.
/// Gradients fold in sample order, so results are thread-count independent.
fn contrastive_step<F: Real>(
    encoder: &DualEncoder<F>,
    scenes: &[&SpriteScene],
) -> Result<(f64, std::collections::HashMap<String, Vec<F>>)> {
    if scenes.len() < 2 {
        return Err(Error::Contract(format!(
            "contrastive batch needs >= 2 samples, got {}",
            scenes.len()
        )));
    }
    struct SampleOut<F> {
        tape: Tape<F>,
        img_pooled: Var,
        txt_pooled: Var,
        img_value: Vec<F>,
        txt_value: Vec<F>,
    }

    let encode_one = |scene: &SpriteScene| -> Result<SampleOut<F>> {
        let mut tape = Tape::new();
        let img_vars = encoder.image.bind(&mut tape, "clip.img", true);
        let txt_vars = encoder.text.bind(&mut tape, "clip.text", true);
        let image = scene.render::<F>();
        let scales = encode_image_multiscale(&mut tape, &img_vars, &image)?;
        let img_pooled = tape.mean_axis(scales[0], 0)?;
        let tokens = scene.caption_tokens(&encoder.vocab);
        let enc = encode_text(&mut tape, &txt_vars, &tokens)?;
        let txt_pooled = tape.masked_mean_rows(enc, &non_pad_mask(&tokens))?;
        let img_value = tape.value(img_pooled).data.clone();
        let txt_value = tape.value(txt_pooled).data.clone();
        Ok(SampleOut {
            tape,
            img_pooled,
            txt_pooled,
            img_value,
            txt_value,
        })
    };

    #[cfg(feature = "parallel")]
    let samples: Vec<SampleOut<F>> = scenes
        .par_iter()
        .map(|s| encode_one(s))
        .collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let samples: Vec<SampleOut<F>> = scenes
        .iter()
        .map(|s| encode_one(s))
        .collect::<Result<_>>()?;

    // head tape: normalize, similarity logits, symmetric cross entropy
    let b = samples.len();
    let mut head: Tape<F> = Tape::new();
    let img_leaves: Vec<Var> = samples
        .iter()
        .map(|s| {
            let t = Tensor::new(vec![1, EMBED_DIM], s.img_value.clone()).unwrap();
            head.leaf(&t, true)
        })
        .collect();
    let txt_leaves: Vec<Var> = samples
        .iter()
        .map(|s| {
            let t = Tensor::new(vec![1, EMBED_DIM], s.txt_value.clone()).unwrap();
            head.leaf(&t, true)
        })
        .collect();
    let temp = head.param("clip.temp", &encoder.log_temperature);
    let img_mat = head.concat(&img_leaves, 0)?;
    let txt_mat = head.concat(&txt_leaves, 0)?;
    let img_n = head.row_normalize(img_mat)?;
    let txt_n = head.row_normalize(txt_mat)?;
    let txt_t = head.transpose_last_two(txt_n)?;
    let sims = head.matmul(img_n, txt_t)?;
    let logits = head.scale_by_exp(sims, temp)?;
    let targets: Vec<usize> = (0..b).collect();
    let loss_i2t = head.cross_entropy_rows(logits, &targets)?;
    let logits_t = head.transpose_last_two(logits)?;
    let loss_t2i = head.cross_entropy_rows(logits_t, &targets)?;
    let total = head.add(loss_i2t, loss_t2i)?;
    let loss = head.scale(total, F::from_f64(0.5));
    let loss_value = head.value(loss).data[0].to_f64();

    let head_grads = head.backward(loss)?;

    // push seed gradients back through each sample tape
    let seeded: Vec<(Tape<F>, Vec<(Var, Vec<F>)>)> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let gi = head_grads.of(img_leaves[i]).unwrap().to_vec();
            let gt = head_grads.of(txt_leaves[i]).unwrap().to_vec();
            (s.tape, vec![(s.img_pooled, gi), (s.txt_pooled, gt)])
        })
        .collect();

    #[cfg(feature = "parallel")]
    let sample_grads: Vec<Gradients<F>> = seeded
        .into_par_iter()
        .map(|(tape, seeds)| tape.backward_multi(seeds))
        .collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let sample_grads: Vec<Gradients<F>> = seeded
        .into_iter()
        .map(|(tape, seeds)| tape.backward_multi(seeds))
        .collect::<Result<_>>()?;

    let mut folded = std::collections::HashMap::new();
    for g in &sample_grads {
        g.fold_named(&mut folded);
    }
    head_grads.fold_named(&mut folded);
    Ok((loss_value, folded))
}

/// Run contrastive pretraining in place; the encoders come back flagged
/// frozen. Returns the first/last step losses for harness checks.
pub fn pretrain<F: Real>(
    encoder: &mut DualEncoder<F>,
    scenes: &[SpriteScene],
    cfg: &PretrainConfig,
) -> Result<PretrainStats> {
    if cfg.batch < 2 {
        return Err(Error::Contract(format!(
            "contrastive batch must be >= 2, got {}",
            cfg.batch
        )));
    }
    if scenes.is_empty() {
        return Err(Error::Contract("empty pretraining dataset".into()));
    }
    let mut adam = crate::nn::Adam::new(F::from_f64(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;
    for step in 0..cfg.steps {
        let batch: Vec<&SpriteScene> = (0..cfg.batch)
            .map(|_| &scenes[rng.gen_range(0..scenes.len())])
            .collect();
        let (loss, grads) = contrastive_step(encoder, &batch)?;
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;
        adam.step(encoder, "clip", &grads)?;
    }
    encoder.frozen = true;
    Ok(PretrainStats {
        first_loss,
        last_loss,
    })
}

/// Top-1 caption retrieval over galleries of `group` candidates: for each
/// scene, the caption embedding must rank first an image whose attribute
/// multiset matches the caption (scenes with identical captions are
/// interchangeable by construction).
pub fn retrieval_top1<F: Real>(
    encoder: &DualEncoder<F>,
    scenes: &[SpriteScene],
    group: usize,
) -> Result<f64> {
    let n = (scenes.len() / group) * group;
    if n == 0 {
        return Err(Error::Contract(
            "retrieval needs at least one full gallery".into(),
        ));
    }
    let score_one = |gallery: &[SpriteScene]| -> Result<usize> {
        let image_embs: Vec<Vec<F>> = gallery
            .iter()
            .map(|s| encoder.pooled_image(&s.render()))
            .collect::<Result<_>>()?;
        let sorted_pairs = |s: &SpriteScene| {
            let mut p = s.attr_pairs();
            p.sort();
            p
        };
        let mut hits = 0;
        for (qi, scene) in gallery.iter().enumerate() {
            let txt = encoder.pooled_text(&scene.caption_tokens(&encoder.vocab))?;
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (ci, img) in image_embs.iter().enumerate() {
                let sim: f64 = txt
                    .iter()
                    .zip(img.iter())
                    .map(|(&a, &b)| (a * b).to_f64())
                    .sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = ci;
                }
            }
            if sorted_pairs(&gallery[best]) == sorted_pairs(&gallery[qi]) {
                hits += 1;
            }
        }
        Ok(hits)
    };

    let galleries: Vec<&[SpriteScene]> = scenes[..n].chunks(group).collect();
    #[cfg(feature = "parallel")]
    let hits: usize = galleries
        .par_iter()
        .map(|g| score_one(g))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    #[cfg(not(feature = "parallel"))]
    let hits: usize = galleries
        .iter()
        .map(|g| score_one(g))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / n as f64)
}

fn scaled_randn<F: Real, R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Tensor<F> {
    let mut t = Tensor::randn(shape, rng);
    for v in &mut t.data {
        *v = *v * F::from_f64(scale);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprites::generate_scene;

    fn encoder() -> DualEncoder<f32> {
        DualEncoder::new(Geometry::DESK, DEFAULT_K_SCALES, 11).unwrap()
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let enc = encoder();
        let tokens = enc.vocab.encode_padded("a red circle", enc.vocab.caption_len);
        let a = enc.text_features(&tokens).unwrap();
        let b = enc.text_features(&tokens).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape, vec![enc.vocab.caption_len, EMBED_DIM]);
    }

    #[test]
    fn distinct_queries_have_distinct_embeddings() {
        let enc = encoder();
        let a = enc
            .text_features(&enc.vocab.encode_padded("red circle", enc.vocab.query_len))
            .unwrap();
        let b = enc
            .text_features(&enc.vocab.encode_padded("red square", enc.vocab.query_len))
            .unwrap();
        let l2: f32 = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn unknown_token_id_is_a_vocabulary_error() {
        let enc = encoder();
        let mut tokens = enc.vocab.encode_padded("a red circle", enc.vocab.caption_len);
        tokens[0] = 999;
        assert!(matches!(
            enc.text_features(&tokens),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn image_encoding_is_deterministic_and_multi_scale() {
        let enc = encoder();
        let scene = generate_scene(Geometry::DESK, 3, 2).unwrap();
        let img = scene.render::<f32>();
        let a = enc.image_features(&img).unwrap();
        let b = enc.image_features(&img).unwrap();
        assert_eq!(a.scales.len(), DEFAULT_K_SCALES + 1);
        for (x, y) in a.scales.iter().zip(b.scales.iter()) {
            assert_eq!(x.data, y.data);
            assert_eq!(x.shape, vec![64, EMBED_DIM]);
        }
    }

    #[test]
    fn zero_scale_config_yields_only_the_semantic_embedding() {
        let enc = DualEncoder::<f32>::new(Geometry::DESK, 0, 4).unwrap();
        let scene = generate_scene(Geometry::DESK, 5, 1).unwrap();
        let feats = enc.image_features(&scene.render()).unwrap();
        assert_eq!(feats.scales.len(), 1);
    }

    #[test]
    fn wrong_resolution_is_a_dimension_error() {
        let enc = encoder();
        let img = Tensor::<f32>::zeros(vec![3, 16, 16]);
        assert!(matches!(
            enc.image_features(&img),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn too_many_scales_is_a_config_error() {
        assert!(matches!(
            DualEncoder::<f32>::new(Geometry::DESK, IMAGE_DEPTH, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn aligned_diagonal_logits_give_zero_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let mut data = vec![-1e9; 16];
        for i in 0..4 {
            data[i * 4 + i] = 0.0;
        }
        let logits = tape.constant(&Tensor::new(vec![4, 4], data).unwrap());
        let loss = tape.cross_entropy_rows(logits, &[0, 1, 2, 3]).unwrap();
        assert!(tape.value(loss).data[0].abs() < 1e-9);
    }

    #[test]
    fn symmetric_logits_make_both_directions_equal() {
        let mut tape: Tape<f64> = Tape::new();
        // symmetric matrix
        let m = Tensor::new(
            vec![3, 3],
            vec![2.0, 0.4, -0.3, 0.4, 1.5, 0.7, -0.3, 0.7, 2.2],
        )
        .unwrap();
        let logits = tape.constant(&m);
        let i2t = tape.cross_entropy_rows(logits, &[0, 1, 2]).unwrap();
        let lt = tape.transpose_last_two(logits).unwrap();
        let t2i = tape.cross_entropy_rows(lt, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(i2t).data[0], tape.value(t2i).data[0]);
    }

    #[test]
    fn contrastive_batch_of_one_is_a_contract_error() {
        let mut enc = encoder();
        let scenes = vec![generate_scene(Geometry::DESK, 1, 1).unwrap()];
        let cfg = PretrainConfig {
            steps: 1,
            batch: 1,
            lr: 1e-3,
            seed: 0,
        };
        assert!(matches!(
            pretrain(&mut enc, &scenes, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn short_pretraining_reduces_loss_and_freezes() {
        let mut enc = encoder();
        let scenes: Vec<_> = (0..64)
            .map(|s| generate_scene(Geometry::DESK, s, 1 + (s % 3) as usize).unwrap())
            .collect();
        let cfg = PretrainConfig {
            steps: 30,
            batch: 8,
            lr: 1e-3,
            seed: 7,
        };
        let stats = pretrain(&mut enc, &scenes, &cfg).unwrap();
        assert!(enc.frozen);
        assert!(
            stats.last_loss < stats.first_loss,
            "loss did not drop: {} -> {}",
            stats.first_loss,
            stats.last_loss
        );
    }

    #[test]
    fn contrastive_step_gradients_are_thread_order_independent() {
        let enc = encoder();
        let scenes: Vec<_> = (0..8)
            .map(|s| generate_scene(Geometry::DESK, s, 1).unwrap())
            .collect();
        let refs: Vec<&SpriteScene> = scenes.iter().collect();
        let (l1, g1) = contrastive_step(&enc, &refs).unwrap();
        let (l2, g2) = contrastive_step(&enc, &refs).unwrap();
        assert_eq!(l1, l2);
        let mut keys: Vec<&String> = g1.keys().collect();
        keys.sort();
        for k in keys {
            assert_eq!(g1[k], g2[k], "gradient mismatch for {k}");
        }
    }
}
