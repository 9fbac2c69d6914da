//! Subject-conditioned attention: a parallel branch at every text
//! cross-attention site whose key/value projections start as exact copies
//! of the text branch. The query projection and output projection stay
//! shared, so the combined output is the text-branch output plus lambda
//! times the subject-branch output.

use crate::error::Result;
use crate::nn::{
    attention_core, linear_forward, CrossAttentionVars, LinearLayer, LinearVars, ParamContainer,
};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Trainable key/value copies of one attention site's text projections.
#[derive(Clone, Debug)]
pub struct SubjectKV<F> {
    pub k_proj: LinearLayer<F>,
    pub v_proj: LinearLayer<F>,
}

/// One key/value pair per text cross-attention site, plus the default
/// subject weight.
#[derive(Clone, Debug)]
pub struct SubjectBranch<F> {
    pub sites: Vec<SubjectKV<F>>,
    pub lambda: f64,
}

impl<F: Real> SubjectBranch<F> {
    /// Exact copies of the given per-site (K, V) text projections; the
    /// copies train while the originals stay frozen.
    pub fn copied_from(text_kv: &[(&LinearLayer<F>, &LinearLayer<F>)]) -> Self {
        SubjectBranch {
            sites: text_kv
                .iter()
                .map(|(k, v)| SubjectKV {
                    k_proj: (*k).clone(),
                    v_proj: (*v).clone(),
                })
                .collect(),
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> SubjectBranchVars {
        SubjectBranchVars {
            sites: self
                .sites
                .iter()
                .enumerate()
                .map(|(i, s)| SubjectKVVars {
                    k: s.k_proj.bind(tape, &format!("{prefix}.site{i}.k"), trainable),
                    v: s.v_proj.bind(tape, &format!("{prefix}.site{i}.v"), trainable),
                })
                .collect(),
        }
    }
}

impl<F: Real> ParamContainer<F> for SubjectBranch<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        for (i, s) in self.sites.iter().enumerate() {
            s.k_proj.for_each_param(&format!("{prefix}.site{i}.k"), f);
            s.v_proj.for_each_param(&format!("{prefix}.site{i}.v"), f);
        }
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for (i, s) in self.sites.iter_mut().enumerate() {
            s.k_proj
                .for_each_param_mut(&format!("{prefix}.site{i}.k"), f);
            s.v_proj
                .for_each_param_mut(&format!("{prefix}.site{i}.v"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SubjectKVVars {
    pub k: LinearVars,
    pub v: LinearVars,
}

#[derive(Clone, Debug)]
pub struct SubjectBranchVars {
    pub sites: Vec<SubjectKVVars>,
}

/// Subject context for one attention site on a given tape.
#[derive(Clone, Copy)]
pub struct SubjectSiteCtx<'a, F> {
    /// concatenated subject embedding c_s' on the same tape
    pub embedding: Var,
    pub kv: &'a SubjectKVVars,
    pub lambda: F,
    /// optional additive key mask over the subject tokens (used to switch
    /// off one composed image's contribution exactly)
    pub key_mask: Option<&'a Tensor<F>>,
}

/// Text-branch attention output and, when a subject is attached, the raw
/// subject-branch output before lambda weighting. Both branches share the
/// query projection of `queries` and the site's output projection.
pub fn dual_cross_attention_parts<F: Real>(
    tape: &mut Tape<F>,
    site: &CrossAttentionVars,
    queries: Var,
    text_ctx: Var,
    subject: Option<SubjectSiteCtx<'_, F>>,
) -> Result<(Var, Option<Var>)> {
    let q = linear_forward(tape, &site.q, queries)?;
    let tk = linear_forward(tape, &site.k, text_ctx)?;
    let tv = linear_forward(tape, &site.v, text_ctx)?;
    let t_core = attention_core(tape, q, tk, tv, site.heads, site.head_dim, None)?;
    let text_out = linear_forward(tape, &site.o, t_core)?;

    let subject_out = match subject {
        Some(ctx) => {
            let sk = linear_forward(tape, &ctx.kv.k, ctx.embedding)?;
            let sv = linear_forward(tape, &ctx.kv.v, ctx.embedding)?;
            let s_core =
                attention_core(tape, q, sk, sv, site.heads, site.head_dim, ctx.key_mask)?;
            Some(linear_forward(tape, &site.o, s_core)?)
        }
        None => None,
    };
    Ok((text_out, subject_out))
}

/// Combined site output: text branch plus lambda times the subject branch.
pub fn dual_cross_attention<F: Real>(
    tape: &mut Tape<F>,
    site: &CrossAttentionVars,
    queries: Var,
    text_ctx: Var,
    subject: Option<SubjectSiteCtx<'_, F>>,
) -> Result<Var> {
    let (text_out, subject_out) = dual_cross_attention_parts(tape, site, queries, text_ctx, subject)?;
    match (subject_out, subject) {
        (Some(s), Some(ctx)) => {
            let scaled = tape.scale(s, ctx.lambda);
            tape.add(text_out, scaled)
        }
        _ => Ok(text_out),
    }
}
