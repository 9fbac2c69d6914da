//! Selective subject representation: a token-to-patch aligner scores every
//! query token against every image patch, an optional mask reweights that
//! attention onto chosen regions, and per-scale value projections turn the
//! attended patches into subject embeddings whose token-axis concatenation
//! conditions generation. A cosine consistency loss ties the scale-mean
//! subject embedding back to the query text embedding.

use crate::clip::{encode_image_multiscale, encode_text, DualEncoder, EMBED_DIM};
use crate::error::{Error, Result};
use crate::nn::{linear_forward, LinearLayer, LinearVars, ParamContainer};
use crate::tensor::{Real, Tape, Tensor, Var};
use rand::Rng;

/// Shared aligner projection width.
pub const ALIGN_DIM: usize = 64;
pub const MASK_RENORM_EPS: f64 = 1e-8;
const ROW_SUM_TOL: f64 = 1e-6;

// ── Token-to-patch aligner ──────────────────────────────────────────────

/// Single-head trainable projection pair mapping query tokens and image
/// patches into one space; the scaled softmax of their product is the
/// token-to-patch attention map.
#[derive(Clone, Debug)]
pub struct T2PAligner<F> {
    pub w_q: LinearLayer<F>,
    pub w_k: LinearLayer<F>,
}

impl<F: Real> T2PAligner<F> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        T2PAligner {
            w_q: LinearLayer::new(EMBED_DIM, ALIGN_DIM, false, rng),
            w_k: LinearLayer::new(EMBED_DIM, ALIGN_DIM, false, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> AlignerVars {
        AlignerVars {
            w_q: self.w_q.bind(tape, &format!("{prefix}.wq"), trainable),
            w_k: self.w_k.bind(tape, &format!("{prefix}.wk"), trainable),
        }
    }
}

impl<F: Real> ParamContainer<F> for T2PAligner<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.w_q.for_each_param(&format!("{prefix}.wq"), f);
        self.w_k.for_each_param(&format!("{prefix}.wk"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.w_q.for_each_param_mut(&format!("{prefix}.wq"), f);
        self.w_k.for_each_param_mut(&format!("{prefix}.wk"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignerVars {
    pub w_q: LinearVars,
    pub w_k: LinearVars,
}

/// A = softmax((W_q z_q)(W_k z_0)^T / sqrt(align_dim)), rows over query
/// tokens, columns over patches.
pub fn t2p_align<F: Real>(
    tape: &mut Tape<F>,
    vars: &AlignerVars,
    z_q: Var,
    z_0: Var,
) -> Result<Var> {
    let q = linear_forward(tape, &vars.w_q, z_q)?;
    let k = linear_forward(tape, &vars.w_k, z_0)?;
    let align_dim = tape.shape(q)[1];
    let kt = tape.transpose_last_two(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, F::from_f64(1.0 / (align_dim as f64).sqrt()));
    tape.softmax_lastdim(scaled)
}

/// Validated token-to-patch attention map: non-negative with unit row sums.
#[derive(Clone, Debug)]
pub struct AttnMap<F> {
    values: Tensor<F>,
}

impl<F: Real> AttnMap<F> {
    pub fn from_tensor(values: Tensor<F>) -> Result<Self> {
        if values.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "attention map must be a matrix, got shape {:?}",
                values.shape
            )));
        }
        let cols = values.shape[1];
        for (i, row) in values.data.chunks(cols).enumerate() {
            let mut sum = F::zero();
            for &v in row {
                if v < F::zero() {
                    return Err(Error::Numeric(format!(
                        "negative attention weight in row {i}"
                    )));
                }
                sum += v;
            }
            if (sum - F::one()).abs().to_f64() > ROW_SUM_TOL {
                return Err(Error::Numeric(format!(
                    "attention row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AttnMap { values })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn n_tokens(&self) -> usize {
        self.values.shape[0]
    }

    pub fn n_patches(&self) -> usize {
        self.values.shape[1]
    }

    /// Attention mass a row places inside a patch set.
    pub fn mass_on(&self, row: usize, mask: &[bool]) -> F {
        let cols = self.values.shape[1];
        let mut sum = F::zero();
        for (j, &m) in mask.iter().enumerate() {
            if m {
                sum += self.values.data[row * cols + j];
            }
        }
        sum
    }
}

/// Zero each row outside the mask support and renormalize it; value-level
/// counterpart of the on-tape reweighting used in mask-guided generation.
/// The epsilon guard in the denominator leaves each row summing to
/// s/(s + 1e-8) where s is the row's masked mass, so the result is built
/// directly rather than re-validated against the strict unit-sum bound.
pub fn apply_mask_query<F: Real>(attn: &AttnMap<F>, mask: &[bool]) -> Result<AttnMap<F>> {
    let mut tape: Tape<F> = Tape::new();
    let a = tape.constant(attn.values());
    let out = tape.mask_renorm_rows(a, mask, F::from_f64(MASK_RENORM_EPS))?;
    Ok(AttnMap {
        values: tape.value(out).clone(),
    })
}

// ── Detail-preserving subject encoder ───────────────────────────────────

/// One independent value projection per feature scale.
#[derive(Clone, Debug)]
pub struct SubjectEncoder<F> {
    pub w_v: Vec<LinearLayer<F>>,
}

impl<F: Real> SubjectEncoder<F> {
    pub fn new<R: Rng>(k_scales: usize, rng: &mut R) -> Self {
        SubjectEncoder {
            w_v: (0..=k_scales)
                .map(|_| LinearLayer::new(EMBED_DIM, EMBED_DIM, false, rng))
                .collect(),
        }
    }

    pub fn k_scales(&self) -> usize {
        self.w_v.len() - 1
    }

    /// Grow to `k_scales` by appending freshly initialized projections;
    /// existing projections (the warm start) are untouched.
    pub fn expand_to<R: Rng>(&mut self, k_scales: usize, rng: &mut R) {
        while self.w_v.len() < k_scales + 1 {
            self.w_v
                .push(LinearLayer::new(EMBED_DIM, EMBED_DIM, false, rng));
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> SubjectEncoderVars {
        SubjectEncoderVars {
            w_v: self
                .w_v
                .iter()
                .enumerate()
                .map(|(k, w)| w.bind(tape, &format!("{prefix}.wv{k}"), trainable))
                .collect(),
        }
    }
}

impl<F: Real> ParamContainer<F> for SubjectEncoder<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        for (k, w) in self.w_v.iter().enumerate() {
            w.for_each_param(&format!("{prefix}.wv{k}"), f);
        }
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for (k, w) in self.w_v.iter_mut().enumerate() {
            w.for_each_param_mut(&format!("{prefix}.wv{k}"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SubjectEncoderVars {
    pub w_v: Vec<LinearVars>,
}

/// Per-scale subject embeddings on a tape, plus their token-axis
/// concatenation in scale order.
pub struct SubjectVarsOut {
    pub per_scale: Vec<Var>,
    pub concatenated: Var,
}

/// c^k = A . (z_k W_v[k]^T) for every scale, concatenated along the token
/// axis in scale order k = 0..K.
pub fn subject_embed<F: Real>(
    tape: &mut Tape<F>,
    vars: &SubjectEncoderVars,
    attn: Var,
    visual_scales: &[Var],
) -> Result<SubjectVarsOut> {
    if visual_scales.len() != vars.w_v.len() {
        return Err(Error::Config(format!(
            "{} visual scales for an encoder with {} value projections",
            visual_scales.len(),
            vars.w_v.len()
        )));
    }
    let mut per_scale = Vec::with_capacity(visual_scales.len());
    for (w, &z_k) in vars.w_v.iter().zip(visual_scales.iter()) {
        let v_k = linear_forward(tape, w, z_k)?;
        per_scale.push(tape.matmul(attn, v_k)?);
    }
    let concatenated = tape.concat(&per_scale, 0)?;
    Ok(SubjectVarsOut {
        per_scale,
        concatenated,
    })
}

/// Value-level subject embedding of one reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEmbedding<F> {
    pub per_scale: Vec<Tensor<F>>,
    pub concatenated: Tensor<F>,
}

impl<F: Real> SubjectEmbedding<F> {
    pub fn k_scales(&self) -> usize {
        self.per_scale.len() - 1
    }

    pub fn embed_dim(&self) -> usize {
        self.per_scale[0].shape[1]
    }

    pub fn tokens_per_scale(&self) -> usize {
        self.per_scale[0].shape[0]
    }
}

/// Stack subject embeddings of several reference images: scale-wise row
/// concatenation in input order, then the usual scale-order restack.
pub fn compose_multi_image<F: Real>(parts: &[SubjectEmbedding<F>]) -> Result<SubjectEmbedding<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("composition of zero embeddings".into()))?;
    let scales = first.per_scale.len();
    let dim = first.embed_dim();
    for p in parts {
        if p.per_scale.len() != scales || p.embed_dim() != dim {
            return Err(Error::Dimension(format!(
                "embedding with {} scales / dim {} composed with {} scales / dim {}",
                p.per_scale.len(),
                p.embed_dim(),
                scales,
                dim
            )));
        }
    }
    let mut per_scale = Vec::with_capacity(scales);
    for k in 0..scales {
        let rows: usize = parts.iter().map(|p| p.per_scale[k].shape[0]).sum();
        let mut data = Vec::with_capacity(rows * dim);
        for p in parts {
            data.extend_from_slice(&p.per_scale[k].data);
        }
        per_scale.push(Tensor::new(vec![rows, dim], data)?);
    }
    let total: usize = per_scale.iter().map(|t| t.shape[0]).sum();
    let mut data = Vec::with_capacity(total * dim);
    for t in &per_scale {
        data.extend_from_slice(&t.data);
    }
    Ok(SubjectEmbedding {
        concatenated: Tensor::new(vec![total, dim], data)?,
        per_scale,
    })
}

// ── Consistency loss ────────────────────────────────────────────────────

/// Mean over non-PAD query tokens of (1 - cos) between the scale-mean
/// subject embedding row and the matching query text row.
pub fn consistency_loss<F: Real>(
    tape: &mut Tape<F>,
    per_scale: &[Var],
    z_q: Var,
    non_pad: &[bool],
) -> Result<Var> {
    if per_scale.is_empty() {
        return Err(Error::Contract("consistency loss over zero scales".into()));
    }
    let mut acc = per_scale[0];
    for &s in &per_scale[1..] {
        acc = tape.add(acc, s)?;
    }
    let mean = tape.scale(acc, F::from_usize(per_scale.len()).recip());
    let cos = tape.cosine_rowwise(mean, z_q)?;
    let neg = tape.scale(cos, -F::one());
    let n = tape.shape(neg)[0];
    let one_minus = tape.add_const(neg, &Tensor::full(vec![n], F::one()))?;
    tape.masked_mean_rows(one_minus, non_pad)
}

// ── Bundled encoder with value-level entry points ───────────────────────

/// The trainable selective-subject stack: aligner plus per-scale value
/// projections. The diffusion-side attention copies live separately in
/// [`crate::injection::SubjectBranch`].
#[derive(Clone, Debug)]
pub struct SsrEncoder<F> {
    pub aligner: T2PAligner<F>,
    pub subject: SubjectEncoder<F>,
}

impl<F: Real> SsrEncoder<F> {
    pub fn new<R: Rng>(k_scales: usize, rng: &mut R) -> Self {
        SsrEncoder {
            aligner: T2PAligner::new(rng),
            subject: SubjectEncoder::new(k_scales, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> SsrVars {
        SsrVars {
            aligner: self.aligner.bind(tape, &format!("{prefix}.align"), trainable),
            subject: self.subject.bind(tape, &format!("{prefix}.subj"), trainable),
        }
    }

    /// Encode one reference image under a query (or a mask with the null
    /// query): attention map plus multi-scale subject embedding.
    pub fn encode(
        &self,
        clip: &DualEncoder<F>,
        image: &Tensor<F>,
        query_tokens: &[u32],
        mask: Option<&[bool]>,
    ) -> Result<(AttnMap<F>, SubjectEmbedding<F>)> {
        let mut tape: Tape<F> = Tape::new();
        let vars = self.bind(&mut tape, "ssr", false);
        let text_vars = clip.text.bind(&mut tape, "clip.text", false);
        let img_vars = clip.image.bind(&mut tape, "clip.img", false);

        let z_q = encode_text(&mut tape, &text_vars, query_tokens)?;
        let scales = encode_image_multiscale(&mut tape, &img_vars, image)?;
        let used = &scales[..self.subject.w_v.len().min(scales.len())];

        let mut attn = t2p_align(&mut tape, &vars.aligner, z_q, used[0])?;
        if let Some(m) = mask {
            attn = tape.mask_renorm_rows(attn, m, F::from_f64(MASK_RENORM_EPS))?;
        }
        let out = subject_embed(&mut tape, &vars.subject, attn, used)?;
        let attn_map = AttnMap::from_tensor(tape.value(attn).clone())?;
        let embedding = SubjectEmbedding {
            per_scale: out
                .per_scale
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            concatenated: tape.value(out.concatenated).clone(),
        };
        Ok((attn_map, embedding))
    }
}

impl<F: Real> ParamContainer<F> for SsrEncoder<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.aligner.for_each_param(&format!("{prefix}.align"), f);
        self.subject.for_each_param(&format!("{prefix}.subj"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.aligner
            .for_each_param_mut(&format!("{prefix}.align"), f);
        self.subject
            .for_each_param_mut(&format!("{prefix}.subj"), f);
    }
}

pub struct SsrVars {
    pub aligner: AlignerVars,
    pub subject: SubjectEncoderVars,
}
