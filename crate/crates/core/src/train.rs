//! Staged training: contrastive dual-encoder pretraining, base diffusion
//! pretraining, then the two-step subject-encoder schedule (semantic scale
//! only, then all scales from the warm start). Batch gradients come from
//! independent per-sample tapes folded in sample order, so results are
//! identical whatever the thread count.

use crate::checkpoint::{render_kv, weights_checksum, Checkpoint};
use crate::clip::{self, DualEncoder, PretrainConfig};
use crate::diffusion::{unet_forward, SubjectPass, UNetTiny, CAPTION_DROPOUT_P, DEFAULT_T};
use crate::error::{Error, Result};
use crate::injection::{SubjectBranch, DEFAULT_LAMBDA};
use crate::nn::{param_names, Adam};
use crate::sprites::{Dataset, Geometry, SpriteScene};
use crate::subject::{consistency_loss, subject_embed, t2p_align, SsrEncoder, MASK_RENORM_EPS};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_SSR_LR: f64 = 5e-5;
pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_K_SCALES: usize = crate::clip::DEFAULT_K_SCALES;
const HELDOUT_SAMPLES: usize = 512;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed derivation for independent per-sample RNG streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x853C_49E6_748F_EA9Bu64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Clip,
    Base,
    SsrStep1,
    SsrStep2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Clip => "clip",
            Stage::Base => "base",
            Stage::SsrStep1 => "ssr_step1",
            Stage::SsrStep2 => "ssr_step2",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
    pub k_scales: usize,
    pub geometry: Geometry,
    pub t_steps: usize,
    /// stage-2 ablation switch: keep only the semantic scale
    pub multiscale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::SsrStep1,
            steps: 0,
            batch: DEFAULT_BATCH,
            lr: DEFAULT_SSR_LR,
            tau: DEFAULT_TAU,
            seed: 0,
            k_scales: DEFAULT_K_SCALES,
            geometry: Geometry::DESK,
            t_steps: DEFAULT_T,
            multiscale: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0 {
            return Err(Error::Config(format!(
                "tau must be non-negative, got {}",
                self.tau
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }

    pub fn config_echo(&self, kind: &str, extra: &[(&str, String)]) -> String {
        let mut map = std::collections::BTreeMap::new();
        map.insert("kind".to_string(), kind.to_string());
        map.insert("stage".to_string(), self.stage.name().to_string());
        map.insert("canvas".to_string(), self.geometry.canvas.to_string());
        map.insert("patch".to_string(), self.geometry.patch.to_string());
        map.insert("k_scales".to_string(), self.k_scales.to_string());
        map.insert("t_steps".to_string(), self.t_steps.to_string());
        map.insert("steps".to_string(), self.steps.to_string());
        map.insert("batch".to_string(), self.batch.to_string());
        map.insert("lr".to_string(), format!("{}", self.lr));
        map.insert("tau".to_string(), format!("{}", self.tau));
        map.insert("seed".to_string(), self.seed.to_string());
        map.insert("multiscale".to_string(), self.multiscale.to_string());
        for (k, v) in extra {
            map.insert((*k).to_string(), v.clone());
        }
        render_kv(&map)
    }
}

/// Wall-clock/size presets. `desk` is the default end-to-end profile,
/// `smoke` the tenth-scale CI profile on the 16x16 canvas, and `full` the
/// long overnight schedule.
#[derive(Clone, Copy, Debug)]
pub struct Profile {
    pub name: &'static str,
    pub geometry: Geometry,
    pub train_scenes: usize,
    pub clip_steps: usize,
    pub base_steps: usize,
    pub ssr1_steps: usize,
    pub ssr2_steps: usize,
    pub clip_lr: f64,
    pub base_lr: f64,
}

pub const DESK: Profile = Profile {
    name: "desk",
    geometry: Geometry::DESK,
    train_scenes: 10_000,
    clip_steps: 2_500,
    base_steps: 6_000,
    ssr1_steps: 2_000,
    ssr2_steps: 1_000,
    clip_lr: 1e-3,
    base_lr: 3e-4,
};

pub const SMOKE: Profile = Profile {
    name: "smoke",
    geometry: Geometry::SMOKE,
    train_scenes: 1_000,
    clip_steps: 250,
    base_steps: 600,
    ssr1_steps: 200,
    ssr2_steps: 100,
    clip_lr: 1e-3,
    base_lr: 3e-4,
};

pub const FULL: Profile = Profile {
    name: "full",
    geometry: Geometry::DESK,
    train_scenes: 10_000,
    clip_steps: 20_000,
    base_steps: 50_000,
    ssr1_steps: 20_000,
    ssr2_steps: 10_000,
    clip_lr: 1e-3,
    base_lr: 3e-4,
};

pub fn profile_by_name(name: &str) -> Result<Profile> {
    match name {
        "desk" => Ok(DESK),
        "smoke" => Ok(SMOKE),
        "full" => Ok(FULL),
        other => Err(Error::Config(format!(
            "unknown profile {other:?} (expected desk, smoke or full)"
        ))),
    }
}

// ── Loss assembly ───────────────────────────────────────────────────────

/// Combined objective: denoising loss plus tau times the consistency
/// regularizer.
pub fn total_loss<F: Real>(tape: &mut Tape<F>, ldm: Var, reg: Var, tau: F) -> Result<Var> {
    let scaled = tape.scale(reg, tau);
    tape.add(ldm, scaled)
}

/// Everything one subject-conditioned denoising sample needs, precomputed
/// so the loss builder itself is deterministic and precision-generic.
pub struct SsrLossInputs<F> {
    pub x0_signed: Tensor<F>,
    pub t: usize,
    pub eps: Tensor<F>,
    pub text_ctx: Tensor<F>,
    pub z_q: Tensor<F>,
    pub non_pad: Vec<bool>,
    pub visuals: Vec<Tensor<F>>,
    pub mask: Option<Vec<bool>>,
}

pub struct SsrLossVars {
    pub total: Var,
    pub ldm: Var,
    pub reg: Var,
}

/// Subject-conditioned denoising loss on one tape: align, optionally mask,
/// embed, denoise through the dual-attention U-Net, regularize.
pub fn ssr_loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    unet: &UNetTiny<F>,
    ssr: &SsrEncoder<F>,
    branch: &SubjectBranch<F>,
    inputs: &SsrLossInputs<F>,
    tau: F,
    trainable: bool,
) -> Result<SsrLossVars> {
    let unet_vars = unet.bind(tape, "unet", false);
    let ssr_vars = ssr.bind(tape, "ssr", trainable);
    let branch_vars = branch.bind(tape, "branch", trainable);

    let x_t = unet.schedule.q_sample(&inputs.x0_signed, inputs.t, &inputs.eps)?;
    let x_t = tape.constant_owned(x_t);
    let ctx = tape.constant(&inputs.text_ctx);
    let z_q = tape.constant(&inputs.z_q);
    let scales: Vec<Var> = inputs.visuals.iter().map(|v| tape.constant(v)).collect();

    let mut attn = t2p_align(tape, &ssr_vars.aligner, z_q, scales[0])?;
    if let Some(mask) = &inputs.mask {
        attn = tape.mask_renorm_rows(attn, mask, F::from_f64(MASK_RENORM_EPS))?;
    }
    let subject = subject_embed(tape, &ssr_vars.subject, attn, &scales)?;

    let eps_pred = unet_forward(
        tape,
        &unet_vars,
        x_t,
        inputs.t,
        ctx,
        Some(SubjectPass {
            embedding: subject.concatenated,
            branch: &branch_vars,
            lambda: F::from_f64(DEFAULT_LAMBDA),
            key_mask: None,
        }),
    )?;
    let eps = tape.constant(&inputs.eps);
    let ldm = tape.mse(eps_pred, eps)?;
    let reg = consistency_loss(tape, &subject.per_scale, z_q, &inputs.non_pad)?;
    let total = total_loss(tape, ldm, reg, tau)?;
    Ok(SsrLossVars { total, ldm, reg })
}

// ── Sample drawing ──────────────────────────────────────────────────────

struct BaseDraw {
    scene_idx: usize,
    t: usize,
    eps_seed: u64,
    drop_caption: bool,
}

struct SsrDraw {
    scene_idx: usize,
    subject_idx_raw: u64,
    t: usize,
    eps_seed: u64,
    drop_caption: bool,
}

fn base_draw(seed: u64, step: usize, i: usize, n_scenes: usize, t_steps: usize) -> BaseDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xBA5E, step as u64, i as u64]));
    BaseDraw {
        scene_idx: rng.gen_range(0..n_scenes),
        t: rng.gen_range(0..t_steps),
        eps_seed: rng.gen(),
        drop_caption: rng.gen_bool(CAPTION_DROPOUT_P),
    }
}

fn ssr_draw(seed: u64, step: usize, i: usize, n_scenes: usize, t_steps: usize) -> SsrDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x55E7, step as u64, i as u64]));
    SsrDraw {
        scene_idx: rng.gen_range(0..n_scenes),
        subject_idx_raw: rng.gen(),
        t: rng.gen_range(0..t_steps),
        eps_seed: rng.gen(),
        drop_caption: rng.gen_bool(CAPTION_DROPOUT_P),
    }
}

fn ssr_inputs_for(
    clip: &DualEncoder<f32>,
    draw: &SsrDraw,
    scene: &SpriteScene,
    n_visual_scales: usize,
) -> Result<SsrLossInputs<f32>> {
    let subject_idx = (draw.subject_idx_raw % scene.sprites.len() as u64) as usize;
    let image01 = scene.render::<f32>();
    let x0_signed = crate::diffusion::to_signed(&image01);
    let mut eps_rng = ChaCha8Rng::seed_from_u64(draw.eps_seed);
    let eps = Tensor::randn(x0_signed.shape.clone(), &mut eps_rng);

    let caption = if draw.drop_caption {
        clip.vocab.null_tokens(clip.vocab.caption_len)
    } else {
        scene.caption_tokens(&clip.vocab)
    };
    let text_ctx = clip.text_features(&caption)?;

    let query = scene.query_tokens(&clip.vocab, subject_idx)?;
    let z_q = clip.text_features(&query)?;
    let non_pad = clip::non_pad_mask(&query);

    let visuals = clip.image_features(&image01)?;
    let used = visuals.scales[..n_visual_scales].to_vec();

    Ok(SsrLossInputs {
        x0_signed,
        t: draw.t,
        eps,
        text_ctx,
        z_q,
        non_pad,
        visuals: used,
        mask: None,
    })
}

// ── Base diffusion training ─────────────────────────────────────────────

pub struct BaseRunStats {
    pub first_loss: f64,
    pub last_loss: f64,
    pub heldout_before: f64,
    pub heldout_after: f64,
}

fn heldout_split(n: usize) -> (usize, usize) {
    let held = HELDOUT_SAMPLES.min(n / 10).max(1);
    (n - held, held)
}

fn base_sample_loss(
    unet: &UNetTiny<f32>,
    clip: &DualEncoder<f32>,
    scene: &SpriteScene,
    draw: &BaseDraw,
    trainable: bool,
) -> Result<(f64, Option<Gradients<f32>>)> {
    let image01 = scene.render::<f32>();
    let x0 = crate::diffusion::to_signed(&image01);
    let mut eps_rng = ChaCha8Rng::seed_from_u64(draw.eps_seed);
    let eps = Tensor::randn(x0.shape.clone(), &mut eps_rng);
    let caption = if draw.drop_caption {
        clip.vocab.null_tokens(clip.vocab.caption_len)
    } else {
        scene.caption_tokens(&clip.vocab)
    };
    let ctx_value = clip.text_features(&caption)?;

    let mut tape: Tape<f32> = Tape::new();
    let vars = unet.bind(&mut tape, "unet", trainable);
    let x_t = unet.schedule.q_sample(&x0, draw.t, &eps)?;
    let x_var = tape.constant_owned(x_t);
    let ctx = tape.constant(&ctx_value);
    let pred = unet_forward(&mut tape, &vars, x_var, draw.t, ctx, None)?;
    let eps_var = tape.constant(&eps);
    let loss = tape.mse(pred, eps_var)?;
    let value = tape.value(loss).data[0] as f64;
    if trainable {
        Ok((value, Some(tape.backward(loss)?)))
    } else {
        Ok((value, None))
    }
}

fn fold_batch(grads: Vec<Gradients<f32>>, batch: usize) -> HashMap<String, Vec<f32>> {
    let mut folded = HashMap::new();
    for g in &grads {
        g.fold_named(&mut folded);
    }
    let scale = 1.0 / batch as f32;
    for v in folded.values_mut() {
        for x in v.iter_mut() {
            *x *= scale;
        }
    }
    folded
}

/// Pretrain the text-conditioned denoiser on rendered scenes.
pub fn train_base(
    dataset: &Dataset,
    clip: &DualEncoder<f32>,
    cfg: &TrainConfig,
) -> Result<(UNetTiny<f32>, BaseRunStats)> {
    cfg.validate()?;
    if !clip.frozen {
        return Err(Error::Contract(
            "dual encoder must be pretrained and frozen before base training".into(),
        ));
    }
    let mut unet = UNetTiny::<f32>::new(cfg.geometry, cfg.t_steps, derive_seed(&[cfg.seed, 1]))?;
    let (n_train, n_held) = heldout_split(dataset.scenes.len());
    let scenes = &dataset.scenes;

    let heldout_loss = |unet: &UNetTiny<f32>| -> Result<f64> {
        let jobs: Vec<usize> = (0..n_held).collect();
        let eval = |i: &usize| -> Result<f64> {
            let draw = base_draw(cfg.seed ^ 0x4E1D, *i, 0, 1, cfg.t_steps);
            let scene = &scenes[n_train + *i];
            Ok(base_sample_loss(unet, clip, scene, &draw, false)?.0)
        };
        #[cfg(feature = "parallel")]
        let losses: Vec<f64> = jobs.par_iter().map(eval).collect::<Result<_>>()?;
        #[cfg(not(feature = "parallel"))]
        let losses: Vec<f64> = jobs.iter().map(eval).collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let heldout_before = heldout_loss(&unet)?;
    let mut adam = Adam::new(cfg.lr as f32);
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;

    for step in 0..cfg.steps {
        let draws: Vec<BaseDraw> = (0..cfg.batch)
            .map(|i| base_draw(cfg.seed, step, i, n_train, cfg.t_steps))
            .collect();
        #[cfg(feature = "parallel")]
        let results: Vec<(f64, Option<Gradients<f32>>)> = draws
            .par_iter()
            .map(|d| base_sample_loss(&unet, clip, &scenes[d.scene_idx], d, true))
            .collect::<Result<_>>()?;
        #[cfg(not(feature = "parallel"))]
        let results: Vec<(f64, Option<Gradients<f32>>)> = draws
            .iter()
            .map(|d| base_sample_loss(&unet, clip, &scenes[d.scene_idx], d, true))
            .collect::<Result<_>>()?;

        let loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>() / cfg.batch as f64;
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;
        let grads = fold_batch(
            results.into_iter().filter_map(|(_, g)| g).collect(),
            cfg.batch,
        );
        adam.step(&mut unet, "unet", &grads)?;
    }

    let heldout_after = heldout_loss(&unet)?;
    Ok((
        unet,
        BaseRunStats {
            first_loss,
            last_loss,
            heldout_before,
            heldout_after,
        },
    ))
}

// ── Subject-encoder training ────────────────────────────────────────────

pub struct SsrRunStats {
    pub first_loss: f64,
    pub last_loss: f64,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub clip_checksum_before: String,
    pub clip_checksum_after: String,
    pub unet_checksum_before: String,
    pub unet_checksum_after: String,
}

/// Train the aligner, value projections and subject attention copies; the
/// dual encoder and base U-Net stay frozen (asserted by construction, by a
/// per-step gradient-name check and by checksums in the returned stats).
pub fn train_ssr(
    dataset: &Dataset,
    clip: &DualEncoder<f32>,
    unet: &UNetTiny<f32>,
    cfg: &TrainConfig,
    warm: Option<(SsrEncoder<f32>, SubjectBranch<f32>)>,
) -> Result<(SsrEncoder<f32>, SubjectBranch<f32>, SsrRunStats)> {
    cfg.validate()?;
    if !clip.frozen {
        return Err(Error::Contract(
            "dual encoder must be frozen during subject training".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 2]));
    let (mut ssr, mut branch) = match (cfg.stage, warm) {
        (Stage::SsrStep1, None) => (
            SsrEncoder::new(0, &mut rng),
            SubjectBranch::copied_from(&unet.text_attention_kv()),
        ),
        (Stage::SsrStep2, Some((mut ssr, branch))) => {
            if cfg.multiscale {
                ssr.subject.expand_to(cfg.k_scales, &mut rng);
            }
            (ssr, branch)
        }
        (Stage::SsrStep2, None) => {
            return Err(Error::Config(
                "ssr_step2 requires the step-1 checkpoint as warm start".into(),
            ))
        }
        (stage, _) => {
            return Err(Error::Config(format!(
                "train_ssr called with stage {}",
                stage.name()
            )))
        }
    };
    let n_scales = ssr.subject.w_v.len();
    if n_scales > cfg.k_scales + 1 {
        return Err(Error::Config(format!(
            "subject encoder has {n_scales} scales but config allows {}",
            cfg.k_scales + 1
        )));
    }

    let clip_checksum_before = weights_checksum(clip, "clip");
    let unet_checksum_before = weights_checksum(unet, "unet");

    let mut expected_grads: Vec<String> = param_names(&ssr, "ssr");
    expected_grads.extend(param_names(&branch, "branch"));
    expected_grads.sort();

    let (n_train, n_held) = heldout_split(dataset.scenes.len());
    let scenes = &dataset.scenes;
    let tau = cfg.tau as f32;

    let heldout_loss = |ssr: &SsrEncoder<f32>, branch: &SubjectBranch<f32>| -> Result<f64> {
        let jobs: Vec<usize> = (0..n_held).collect();
        let eval = |i: &usize| -> Result<f64> {
            let draw = ssr_draw(cfg.seed ^ 0x4E1D, *i, 1, 1, cfg.t_steps);
            let scene = &scenes[n_train + *i];
            let draw = SsrDraw {
                scene_idx: n_train + *i,
                ..draw
            };
            let inputs = ssr_inputs_for(clip, &draw, scene, n_scales)?;
            let mut tape: Tape<f32> = Tape::new();
            let vars = ssr_loss_on_tape(&mut tape, unet, ssr, branch, &inputs, tau, false)?;
            Ok(tape.value(vars.total).data[0] as f64)
        };
        #[cfg(feature = "parallel")]
        let losses: Vec<f64> = jobs.par_iter().map(eval).collect::<Result<_>>()?;
        #[cfg(not(feature = "parallel"))]
        let losses: Vec<f64> = jobs.iter().map(eval).collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let heldout_before = heldout_loss(&ssr, &branch)?;
    let mut adam = Adam::new(cfg.lr as f32);
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;

    for step in 0..cfg.steps {
        let draws: Vec<SsrDraw> = (0..cfg.batch)
            .map(|i| ssr_draw(cfg.seed, step, i, n_train, cfg.t_steps))
            .collect();
        let run_one = |d: &SsrDraw| -> Result<(f64, Gradients<f32>)> {
            let inputs = ssr_inputs_for(clip, d, &scenes[d.scene_idx], n_scales)?;
            let mut tape: Tape<f32> = Tape::new();
            let vars = ssr_loss_on_tape(&mut tape, unet, &ssr, &branch, &inputs, tau, true)?;
            let value = tape.value(vars.total).data[0] as f64;
            Ok((value, tape.backward(vars.total)?))
        };
        #[cfg(feature = "parallel")]
        let results: Vec<(f64, Gradients<f32>)> =
            draws.par_iter().map(run_one).collect::<Result<_>>()?;
        #[cfg(not(feature = "parallel"))]
        let results: Vec<(f64, Gradients<f32>)> =
            draws.iter().map(run_one).collect::<Result<_>>()?;

        let loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>() / cfg.batch as f64;
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;

        let grads = fold_batch(results.into_iter().map(|(_, g)| g).collect(), cfg.batch);
        let mut got: Vec<String> = grads.keys().cloned().collect();
        got.sort();
        assert_eq!(
            got, expected_grads,
            "gradient flowed to a parameter outside the trainable set"
        );
        adam.step(&mut ssr, "ssr", &grads)?;
        adam.step(&mut branch, "branch", &grads)?;
    }

    let heldout_after = heldout_loss(&ssr, &branch)?;
    let stats = SsrRunStats {
        first_loss,
        last_loss,
        heldout_before,
        heldout_after,
        clip_checksum_before,
        clip_checksum_after: weights_checksum(clip, "clip"),
        unet_checksum_before,
        unet_checksum_after: weights_checksum(unet, "unet"),
    };
    Ok((ssr, branch, stats))
}

// ── Checkpoint wiring ───────────────────────────────────────────────────

pub fn save_clip(path: &Path, clip: &DualEncoder<f32>, cfg: &TrainConfig) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.steps as u64, cfg.config_echo("clip", &[]));
    ck.add(clip, "clip");
    ck.save(path)
}

pub fn load_clip(path: &Path) -> Result<DualEncoder<f32>> {
    let ck = Checkpoint::load(path)?;
    let map = ck.config_map();
    require_kind(&map, "clip", path)?;
    let geometry = geometry_from(&map)?;
    let k_scales = parse_field(&map, "k_scales")?;
    let mut clip = DualEncoder::<f32>::new(geometry, k_scales, 0)?;
    ck.verify_names(&param_names(&clip, "clip"))?;
    ck.extract(&mut clip, "clip")?;
    clip.frozen = true;
    Ok(clip)
}

pub fn save_base(path: &Path, unet: &UNetTiny<f32>, cfg: &TrainConfig) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.steps as u64, cfg.config_echo("base", &[]));
    ck.add(unet, "unet");
    ck.save(path)
}

pub fn load_base(path: &Path) -> Result<UNetTiny<f32>> {
    let ck = Checkpoint::load(path)?;
    let map = ck.config_map();
    require_kind(&map, "base", path)?;
    let geometry = geometry_from(&map)?;
    let t_steps = parse_field(&map, "t_steps")?;
    let mut unet = UNetTiny::<f32>::new(geometry, t_steps, 0)?;
    ck.verify_names(&param_names(&unet, "unet"))?;
    ck.extract(&mut unet, "unet")?;
    Ok(unet)
}

pub fn save_ssr(
    path: &Path,
    ssr: &SsrEncoder<f32>,
    branch: &SubjectBranch<f32>,
    cfg: &TrainConfig,
) -> Result<()> {
    let extra = [("ssr_scales", ssr.subject.w_v.len().to_string())];
    let mut ck = Checkpoint::new(cfg.steps as u64, cfg.config_echo("ssr", &extra));
    ck.add(ssr, "ssr");
    ck.add(branch, "branch");
    ck.save(path)
}

pub fn load_ssr(path: &Path) -> Result<(SsrEncoder<f32>, SubjectBranch<f32>)> {
    let ck = Checkpoint::load(path)?;
    let map = ck.config_map();
    require_kind(&map, "ssr", path)?;
    let scales: usize = parse_field(&map, "ssr_scales")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ssr = SsrEncoder::<f32>::new(scales.saturating_sub(1), &mut rng);
    let placeholder: Vec<_> = (0..crate::diffusion::ATTENTION_SITES)
        .map(|_| {
            (
                crate::nn::LinearLayer::<f32>::new(crate::clip::EMBED_DIM, crate::clip::EMBED_DIM, false, &mut rng),
                crate::nn::LinearLayer::<f32>::new(crate::clip::EMBED_DIM, crate::clip::EMBED_DIM, false, &mut rng),
            )
        })
        .collect();
    let pairs: Vec<(&crate::nn::LinearLayer<f32>, &crate::nn::LinearLayer<f32>)> =
        placeholder.iter().map(|(k, v)| (k, v)).collect();
    let mut branch = SubjectBranch::copied_from(&pairs);

    let mut expected = param_names(&ssr, "ssr");
    expected.extend(param_names(&branch, "branch"));
    ck.verify_names(&expected)?;
    ck.extract(&mut ssr, "ssr")?;
    ck.extract(&mut branch, "branch")?;
    Ok((ssr, branch))
}

fn require_kind(
    map: &std::collections::BTreeMap<String, String>,
    kind: &str,
    path: &Path,
) -> Result<()> {
    match map.get("kind").map(|s| s.as_str()) {
        Some(k) if k == kind => Ok(()),
        Some(other) => Err(Error::Architecture(format!(
            "{} holds a {other:?} checkpoint, expected {kind:?}",
            path.display()
        ))),
        None => Err(Error::Format(format!(
            "{} carries no kind in its config echo",
            path.display()
        ))),
    }
}

fn geometry_from(map: &std::collections::BTreeMap<String, String>) -> Result<Geometry> {
    Geometry::new(parse_field(map, "canvas")?, parse_field(map, "patch")?)
}

fn parse_field<T: std::str::FromStr>(
    map: &std::collections::BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Format(format!("config echo is missing key {key}")))?
        .parse()
        .map_err(|_| Error::Format(format!("config echo key {key} is not parseable")))
}

// ── Full schedule ───────────────────────────────────────────────────────

/// Artifact layout of one full run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            dir: dir.to_path_buf(),
        }
    }
    pub fn train_data(&self) -> PathBuf {
        self.dir.join("train.ssrd")
    }
    pub fn bench_data(&self) -> PathBuf {
        self.dir.join("bench.ssrd")
    }
    pub fn clip(&self) -> PathBuf {
        self.dir.join("clip.ssrt")
    }
    pub fn base(&self) -> PathBuf {
        self.dir.join("base.ssrt")
    }
    pub fn ssr_step1(&self) -> PathBuf {
        self.dir.join("ssr_step1.ssrt")
    }
    pub fn ssr_step2(&self) -> PathBuf {
        self.dir.join("ssr_step2.ssrt")
    }
}

pub struct ScheduleOutcome {
    pub paths: RunPaths,
    pub clip_retrieval: f64,
    pub base_stats: BaseRunStats,
    pub ssr1_stats: SsrRunStats,
    pub ssr2_stats: SsrRunStats,
}

/// Data generation plus all four training stages, emitting every artifact
/// into `dir`. Stage 2 warm-starts from stage 1 and, unless `multiscale`
/// is disabled, activates the remaining scales with fresh projections.
pub fn run_schedule(
    profile: &Profile,
    dir: &Path,
    seed: u64,
    tau: f64,
    multiscale: bool,
) -> Result<ScheduleOutcome> {
    std::fs::create_dir_all(dir)?;
    let paths = RunPaths::new(dir);

    let train = Dataset::generate(profile.geometry, profile.train_scenes, seed, false)?;
    train.save(&paths.train_data())?;
    let bench = Dataset::generate(profile.geometry, 100, derive_seed(&[seed, 0xBE7C]), true)?;
    bench.save(&paths.bench_data())?;

    let (n_train, _) = heldout_split(train.scenes.len());
    let mut clip = DualEncoder::<f32>::new(profile.geometry, DEFAULT_K_SCALES, seed)?;
    clip::pretrain(
        &mut clip,
        &train.scenes[..n_train],
        &PretrainConfig {
            steps: profile.clip_steps,
            batch: DEFAULT_BATCH,
            lr: profile.clip_lr,
            seed: derive_seed(&[seed, 10]),
        },
    )?;
    let clip_retrieval = clip::retrieval_top1(&clip, &train.scenes[n_train..], 16)?;
    let clip_cfg = TrainConfig {
        stage: Stage::Clip,
        steps: profile.clip_steps,
        lr: profile.clip_lr,
        seed,
        geometry: profile.geometry,
        ..Default::default()
    };
    save_clip(&paths.clip(), &clip, &clip_cfg)?;

    let base_cfg = TrainConfig {
        stage: Stage::Base,
        steps: profile.base_steps,
        lr: profile.base_lr,
        seed: derive_seed(&[seed, 11]),
        geometry: profile.geometry,
        ..Default::default()
    };
    let (unet, base_stats) = train_base(&train, &clip, &base_cfg)?;
    save_base(&paths.base(), &unet, &base_cfg)?;

    let ssr1_cfg = TrainConfig {
        stage: Stage::SsrStep1,
        steps: profile.ssr1_steps,
        seed: derive_seed(&[seed, 12]),
        geometry: profile.geometry,
        tau,
        ..Default::default()
    };
    let (ssr1, branch1, ssr1_stats) = train_ssr(&train, &clip, &unet, &ssr1_cfg, None)?;
    save_ssr(&paths.ssr_step1(), &ssr1, &branch1, &ssr1_cfg)?;

    let ssr2_cfg = TrainConfig {
        stage: Stage::SsrStep2,
        steps: profile.ssr2_steps,
        seed: derive_seed(&[seed, 13]),
        geometry: profile.geometry,
        tau,
        multiscale,
        ..Default::default()
    };
    let (ssr2, branch2, ssr2_stats) =
        train_ssr(&train, &clip, &unet, &ssr2_cfg, Some((ssr1, branch1)))?;
    save_ssr(&paths.ssr_step2(), &ssr2, &branch2, &ssr2_cfg)?;

    Ok(ScheduleOutcome {
        paths,
        clip_retrieval,
        base_stats,
        ssr1_stats,
        ssr2_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_constants() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch, 16);
        assert_eq!(cfg.lr, 5e-5);
        assert_eq!(cfg.tau, 0.01);
        let sample = crate::diffusion::SampleConfig::default();
        assert_eq!(sample.steps, 30);
        assert_eq!(sample.guidance, 7.5);
        assert_eq!(sample.lambda, 1.0);
    }

    #[test]
    fn total_loss_combines_terms() {
        let mut tape: Tape<f64> = Tape::new();
        let ldm = tape.constant(&Tensor::scalar(0.5));
        let reg = tape.constant(&Tensor::scalar(1.0));
        let t = total_loss(&mut tape, ldm, reg, 0.01).unwrap();
        assert!((tape.value(t).data[0] - 0.51).abs() < 1e-12);

        let zero_reg = tape.constant(&Tensor::scalar(0.0));
        let t2 = total_loss(&mut tape, ldm, zero_reg, 0.01).unwrap();
        assert_eq!(tape.value(t2).data[0], 0.5);

        let t3 = total_loss(&mut tape, ldm, reg, 0.0).unwrap();
        assert_eq!(tape.value(t3).data[0], 0.5);
    }

    #[test]
    fn negative_tau_is_a_config_error() {
        let cfg = TrainConfig {
            tau: -0.1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn derived_seeds_differ_across_streams() {
        let a = derive_seed(&[1, 2, 3]);
        let b = derive_seed(&[1, 2, 4]);
        let c = derive_seed(&[1, 2, 3]);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn perfect_predictor_has_zero_denoising_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = Tensor::<f64>::randn(vec![3, 4, 4], &mut rng);
        let pred = tape.constant(&eps);
        let target = tape.constant(&eps);
        let loss = tape.mse(pred, target).unwrap();
        assert_eq!(tape.value(loss).data[0], 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_mean_squared_noise() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = Tensor::<f64>::randn(vec![40, 40], &mut rng);
        let zero = tape.constant(&Tensor::zeros(vec![40, 40]));
        let target = tape.constant(&eps);
        let loss = tape.mse(zero, target).unwrap();
        let expect: f64 = eps.data.iter().map(|v| v * v).sum::<f64>() / 1600.0;
        assert!((tape.value(loss).data[0] - expect).abs() < 1e-12);
        assert!((tape.value(loss).data[0] - 1.0).abs() < 0.1);
    }

    #[test]
    fn ssr_step2_without_warm_start_is_a_config_error() {
        let geometry = Geometry::SMOKE;
        let dataset = Dataset::generate(geometry, 40, 3, false).unwrap();
        let mut clip = DualEncoder::<f32>::new(geometry, DEFAULT_K_SCALES, 1).unwrap();
        clip.frozen = true;
        let unet = UNetTiny::<f32>::new(geometry, 20, 2).unwrap();
        let cfg = TrainConfig {
            stage: Stage::SsrStep2,
            steps: 1,
            geometry,
            t_steps: 20,
            ..Default::default()
        };
        assert!(matches!(
            train_ssr(&dataset, &clip, &unet, &cfg, None),
            Err(Error::Config(_))
        ));
    }
}
