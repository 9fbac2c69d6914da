//! Command dispatcher wiring data generation, the four training stages,
//! sampling, attention-map rendering, evaluation, the ablation table and
//! parameter sweeps. Every flag can also come from a flat key=value config
//! file; explicit flags win. Each run logs a config fingerprint plus the
//! content hashes of its input artifacts into its output.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use ssr_core::checkpoint::{file_sha256, parse_kv, string_sha256};
use ssr_core::clip::{retrieval_top1, DualEncoder, PretrainConfig};
use ssr_core::diffusion::{ddim_sample, SampleConfig, SubjectAt, UNetTiny};
use ssr_core::eval::{
    ablation_csv, run_ablation, run_bench, sweep_lambda, AblationModels, BenchConfig, BenchModels,
};
use ssr_core::injection::SubjectBranch;
use ssr_core::pngio;
use ssr_core::sprites::{Dataset, Geometry};
use ssr_core::subject::{compose_multi_image, SsrEncoder, SubjectEmbedding};
use ssr_core::train::{
    self, load_base, load_clip, load_ssr, profile_by_name, save_base, save_clip, save_ssr,
    train_base, train_ssr, Stage, TrainConfig, DESK,
};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ssr",
    about = "Selective subject-driven sprite diffusion: data, training, sampling and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sprite-scene dataset file
    GenData(GenDataArgs),
    /// Contrastively pretrain the dual encoder
    TrainClip(TrainClipArgs),
    /// Pretrain the text-conditioned denoiser
    TrainBase(TrainBaseArgs),
    /// Train the subject encoder and attention copies (two-step schedule)
    TrainSsr(TrainSsrArgs),
    /// Sample an image, optionally conditioned on reference subjects
    Sample(SampleArgs),
    /// Render per-token patch attention of a query over a reference image
    AttnMap(AttnMapArgs),
    /// Evaluate one model configuration on the bench
    Eval(EvalArgs),
    /// Evaluate the four ablation configurations and emit the table
    Ablate(AblateArgs),
    /// Sweep lambda, guidance or tau and emit one report per value
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// flat key=value config file; explicit flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

fn kv_from(config: &Option<PathBuf>) -> anyhow::Result<BTreeMap<String, String>> {
    match config {
        None => Ok(BTreeMap::new()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Ok(parse_kv(&text))
        }
    }
}

fn resolve<T: std::str::FromStr + Clone>(
    flag: &Option<T>,
    kv: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> anyhow::Result<T> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    if let Some(raw) = kv.get(key) {
        return raw
            .parse::<T>()
            .map_err(|_| anyhow!("config key {key}={raw} is not parseable"));
    }
    Ok(default)
}

#[derive(Args)]
struct GenDataArgs {
    /// number of scenes
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// emit the evaluation split: 2-3 subjects per scene
    #[arg(long)]
    bench: bool,
    /// size preset: desk (32px), smoke (16px) or full
    #[arg(long)]
    profile: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainClipArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    profile: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    profile: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainSsrArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    base: PathBuf,
    /// training step of the two-step schedule
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// stage-1 checkpoint warm start (required for stage 2)
    #[arg(long)]
    warm: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// keep only the semantic scale in stage 2 (ablation)
    #[arg(long)]
    no_multiscale: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    profile: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    ssr: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    /// reference image(s); repeat together with --query to compose subjects
    #[arg(long = "ref")]
    reference: Vec<PathBuf>,
    /// subject query per reference image
    #[arg(long)]
    query: Vec<String>,
    /// patch-mask PNG selecting regions of the (single) reference image
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct AttnMapArgs {
    #[arg(long)]
    ssr: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    /// subject checkpoint; omit to evaluate the text-only base model
    #[arg(long)]
    ssr: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    bench: PathBuf,
    /// directory holding clip.ssrt, base.ssrt, ssr_full.ssrt,
    /// ssr_no_reg.ssrt and ssr_no_multiscale.ssrt
    #[arg(long)]
    configs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// swept parameter: lambda, guidance or tau
    #[arg(long)]
    param: String,
    /// comma-separated grid
    #[arg(long)]
    values: String,
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    base: PathBuf,
    /// trained subject checkpoint (lambda/guidance sweeps)
    #[arg(long)]
    ssr: Option<PathBuf>,
    /// training data (tau sweep retrains per value)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ssr1_steps: Option<usize>,
    #[arg(long)]
    ssr2_steps: Option<usize>,
    /// output directory, one report per value
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

/// Parse and run; returns the process exit code. Usage problems exit 2,
/// runtime failures exit 1 with a single-line error on stderr.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainClip(a) => train_clip_cmd(a),
        Command::TrainBase(a) => train_base_cmd(a),
        Command::TrainSsr(a) => train_ssr_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::AttnMap(a) => attn_map_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn write_meta(
    out: &Path,
    fingerprint: &str,
    inputs: &BTreeMap<String, String>,
) -> anyhow::Result<()> {
    let meta = serde_json::json!({
        "config_fingerprint": fingerprint,
        "input_hashes": inputs,
    });
    let path = out.with_extension(format!(
        "{}.meta.json",
        out.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    std::fs::write(path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn hash_inputs(paths: &[(&str, &Path)]) -> anyhow::Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (name, path) in paths {
        map.insert(
            name.to_string(),
            file_sha256(path).with_context(|| format!("hashing {}", path.display()))?,
        );
    }
    Ok(map)
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let profile_name = resolve(&a.profile, &kv, "profile", "desk".to_string())?;
    let profile = profile_by_name(&profile_name)?;
    let default_count = if a.bench { 100 } else { profile.train_scenes };
    let count = resolve(&a.count, &kv, "count", default_count)?;
    let seed = resolve(&a.seed, &kv, "seed", 0)?;
    let dataset = Dataset::generate(profile.geometry, count, seed, a.bench)?;
    dataset.save(&a.out)?;
    let fingerprint = string_sha256(&format!(
        "gen-data count={count} seed={seed} bench={} canvas={}",
        a.bench, profile.geometry.canvas
    ));
    write_meta(&a.out, &fingerprint, &BTreeMap::new())?;
    println!(
        "wrote {} scenes ({}x{} canvas) to {}",
        count,
        profile.geometry.canvas,
        profile.geometry.canvas,
        a.out.display()
    );
    Ok(())
}

fn train_clip_cmd(a: TrainClipArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let profile = profile_by_name(&resolve(&a.profile, &kv, "profile", "desk".to_string())?)?;
    let steps = resolve(&a.steps, &kv, "steps", profile.clip_steps)?;
    let batch = resolve(&a.batch, &kv, "batch", train::DEFAULT_BATCH)?;
    let lr = resolve(&a.lr, &kv, "lr", profile.clip_lr)?;
    let seed = resolve(&a.seed, &kv, "seed", 0)?;

    let dataset = Dataset::load(&a.data)?;
    let mut clip =
        DualEncoder::<f32>::new(dataset.geometry, ssr_core::clip::DEFAULT_K_SCALES, seed)?;
    let stats = ssr_core::clip::pretrain(
        &mut clip,
        &dataset.scenes,
        &PretrainConfig {
            steps,
            batch,
            lr,
            seed,
        },
    )?;
    let gallery = retrieval_top1(&clip, &dataset.scenes[..dataset.scenes.len().min(256)], 16)?;
    let cfg = TrainConfig {
        stage: Stage::Clip,
        steps,
        batch,
        lr,
        seed,
        geometry: dataset.geometry,
        ..Default::default()
    };
    save_clip(&a.out, &clip, &cfg)?;
    write_meta(
        &a.out,
        &string_sha256(&cfg.config_echo("clip", &[])),
        &hash_inputs(&[("data", a.data.as_path())])?,
    )?;
    println!(
        "clip: loss {:.4} -> {:.4}, train-split retrieval {:.3}, saved {}",
        stats.first_loss,
        stats.last_loss,
        gallery,
        a.out.display()
    );
    Ok(())
}

fn train_base_cmd(a: TrainBaseArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let profile = profile_by_name(&resolve(&a.profile, &kv, "profile", "desk".to_string())?)?;
    let steps = resolve(&a.steps, &kv, "steps", profile.base_steps)?;
    let batch = resolve(&a.batch, &kv, "batch", train::DEFAULT_BATCH)?;
    let lr = resolve(&a.lr, &kv, "lr", profile.base_lr)?;
    let seed = resolve(&a.seed, &kv, "seed", 0)?;

    let dataset = Dataset::load(&a.data)?;
    let clip = load_clip(&a.clip)?;
    let cfg = TrainConfig {
        stage: Stage::Base,
        steps,
        batch,
        lr,
        seed,
        geometry: dataset.geometry,
        ..Default::default()
    };
    let (unet, stats) = train_base(&dataset, &clip, &cfg)?;
    save_base(&a.out, &unet, &cfg)?;
    write_meta(
        &a.out,
        &string_sha256(&cfg.config_echo("base", &[])),
        &hash_inputs(&[("data", a.data.as_path()), ("clip", a.clip.as_path())])?,
    )?;
    println!(
        "base: loss {:.4} -> {:.4}, held-out {:.4} -> {:.4}, saved {}",
        stats.first_loss,
        stats.last_loss,
        stats.heldout_before,
        stats.heldout_after,
        a.out.display()
    );
    Ok(())
}

fn train_ssr_cmd(a: TrainSsrArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let profile = profile_by_name(&resolve(&a.profile, &kv, "profile", "desk".to_string())?)?;
    let stage = if a.stage == 1 {
        Stage::SsrStep1
    } else {
        Stage::SsrStep2
    };
    let default_steps = if a.stage == 1 {
        profile.ssr1_steps
    } else {
        profile.ssr2_steps
    };
    let steps = resolve(&a.steps, &kv, "steps", default_steps)?;
    let batch = resolve(&a.batch, &kv, "batch", train::DEFAULT_BATCH)?;
    let lr = resolve(&a.lr, &kv, "lr", train::DEFAULT_SSR_LR)?;
    let tau = resolve(&a.tau, &kv, "tau", train::DEFAULT_TAU)?;
    let seed = resolve(&a.seed, &kv, "seed", 0)?;

    let dataset = Dataset::load(&a.data)?;
    let clip = load_clip(&a.clip)?;
    let unet = load_base(&a.base)?;
    let warm = match (stage, &a.warm) {
        (Stage::SsrStep2, Some(path)) => Some(load_ssr(path)?),
        (Stage::SsrStep2, None) => {
            bail!("--stage 2 requires --warm pointing at the stage-1 checkpoint")
        }
        _ => None,
    };
    let cfg = TrainConfig {
        stage,
        steps,
        batch,
        lr,
        tau,
        seed,
        geometry: dataset.geometry,
        multiscale: !a.no_multiscale,
        ..Default::default()
    };
    let (ssr, branch, stats) = train_ssr(&dataset, &clip, &unet, &cfg, warm)?;
    anyhow::ensure!(
        stats.clip_checksum_before == stats.clip_checksum_after,
        "frozen dual-encoder weights changed during training"
    );
    anyhow::ensure!(
        stats.unet_checksum_before == stats.unet_checksum_after,
        "frozen denoiser weights changed during training"
    );
    save_ssr(&a.out, &ssr, &branch, &cfg)?;
    let mut inputs = vec![
        ("data", a.data.as_path()),
        ("clip", a.clip.as_path()),
        ("base", a.base.as_path()),
    ];
    if let Some(w) = &a.warm {
        inputs.push(("warm", w.as_path()));
    }
    write_meta(
        &a.out,
        &string_sha256(&cfg.config_echo("ssr", &[])),
        &hash_inputs(&inputs)?,
    )?;
    println!(
        "ssr stage {}: loss {:.4} -> {:.4}, held-out {:.4} -> {:.4}, saved {}",
        a.stage,
        stats.first_loss,
        stats.last_loss,
        stats.heldout_before,
        stats.heldout_after,
        a.out.display()
    );
    Ok(())
}

fn encode_references(
    clip: &DualEncoder<f32>,
    ssr: &SsrEncoder<f32>,
    references: &[PathBuf],
    queries: &[String],
    mask: &Option<PathBuf>,
    geometry: Geometry,
) -> anyhow::Result<SubjectEmbedding<f32>> {
    anyhow::ensure!(
        !references.is_empty(),
        "subject conditioning needs at least one --ref image"
    );
    let mut parts = Vec::new();
    for (i, path) in references.iter().enumerate() {
        let image = pngio::load_image(path)?;
        let (query_tokens, patch_mask) = match (queries.get(i), mask) {
            (Some(q), _) => (
                clip.vocab.encode_padded(q, clip.vocab.query_len),
                None,
            ),
            (None, Some(mask_path)) => {
                anyhow::ensure!(
                    references.len() == 1,
                    "mask mode works with a single reference image"
                );
                (
                    clip.vocab.null_tokens(clip.vocab.query_len),
                    Some(pngio::load_patch_mask(mask_path, geometry)?),
                )
            }
            (None, None) => bail!("--ref needs a matching --query (or --mask)"),
        };
        let (_, embedding) = ssr.encode(clip, &image, &query_tokens, patch_mask.as_deref())?;
        parts.push(embedding);
    }
    Ok(compose_multi_image(&parts)?)
}

fn sample_cmd(a: SampleArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let clip = load_clip(&a.clip)?;
    let unet = load_base(&a.base)?;
    let sample_cfg = SampleConfig {
        steps: resolve(&a.steps, &kv, "steps", SampleConfig::default().steps)?,
        guidance: resolve(&a.guidance, &kv, "guidance", SampleConfig::default().guidance)?,
        lambda: resolve(&a.lambda, &kv, "lambda", SampleConfig::default().lambda)?,
        seed: resolve(&a.seed, &kv, "seed", 0)?,
        ..Default::default()
    };
    let prompt_tokens = clip
        .vocab
        .encode_padded(&a.prompt, clip.vocab.caption_len);
    let cond = clip.text_features(&prompt_tokens)?;
    let uncond = clip.text_features(&clip.vocab.null_tokens(clip.vocab.caption_len))?;

    let subject_stack = match &a.ssr {
        Some(path) => Some(load_ssr(path)?),
        None => None,
    };
    let embedding = match &subject_stack {
        Some((ssr, _)) if !a.reference.is_empty() || a.mask.is_some() => Some(encode_references(
            &clip,
            ssr,
            &a.reference,
            &a.query,
            &a.mask,
            unet.geometry,
        )?),
        _ => None,
    };
    let subject = match (&embedding, &subject_stack) {
        (Some(e), Some((_, branch))) => Some(SubjectAt {
            embedding: &e.concatenated,
            branch,
            lambda: sample_cfg.lambda,
        }),
        _ => None,
    };
    let image = ddim_sample(&unet, &cond, &uncond, subject, &sample_cfg)?;
    pngio::save_image(&image, &a.out)?;

    let mut inputs = vec![("base", a.base.as_path()), ("clip", a.clip.as_path())];
    if let Some(s) = &a.ssr {
        inputs.push(("ssr", s.as_path()));
    }
    let fingerprint = string_sha256(&format!(
        "sample prompt={:?} steps={} guidance={} lambda={} seed={}",
        a.prompt, sample_cfg.steps, sample_cfg.guidance, sample_cfg.lambda, sample_cfg.seed
    ));
    write_meta(&a.out, &fingerprint, &hash_inputs(&inputs)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn attn_map_cmd(a: AttnMapArgs) -> anyhow::Result<()> {
    let clip = load_clip(&a.clip)?;
    let (ssr, _branch) = load_ssr(&a.ssr)?;
    let image = pngio::load_image(&a.reference)?;
    let query = clip.vocab.encode_padded(&a.query, clip.vocab.query_len);
    let (attn, _) = ssr.encode(&clip, &image, &query, None)?;
    pngio::save_attention_strip(&attn, clip.image.geometry, 8, &a.out)?;
    let fingerprint = string_sha256(&format!("attn-map query={:?}", a.query));
    write_meta(
        &a.out,
        &fingerprint,
        &hash_inputs(&[("ssr", a.ssr.as_path()), ("clip", a.clip.as_path())])?,
    )?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let clip = load_clip(&a.clip)?;
    let unet = load_base(&a.base)?;
    let subject_stack = match &a.ssr {
        Some(path) => Some(load_ssr(path)?),
        None => None,
    };
    let bench = Dataset::load(&a.bench)?;
    let cfg = BenchConfig {
        seed: resolve(&a.seed, &kv, "seed", 0)?,
        sample: SampleConfig {
            steps: resolve(&a.steps, &kv, "steps", SampleConfig::default().steps)?,
            guidance: resolve(&a.guidance, &kv, "guidance", SampleConfig::default().guidance)?,
            lambda: resolve(&a.lambda, &kv, "lambda", SampleConfig::default().lambda)?,
            ..Default::default()
        },
        ..Default::default()
    };
    let models = BenchModels {
        clip: &clip,
        unet: &unet,
        subject: subject_stack.as_ref().map(|(s, b)| (s, b)),
    };
    let label = if a.ssr.is_some() { "ssr" } else { "text_only" };
    let mut report = run_bench(&models, &bench.scenes, &cfg, label)?;
    let mut inputs = vec![
        ("bench", a.bench.as_path()),
        ("base", a.base.as_path()),
        ("clip", a.clip.as_path()),
    ];
    if let Some(s) = &a.ssr {
        inputs.push(("ssr", s.as_path()));
    }
    report.input_hashes = hash_inputs(&inputs)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "{label}: presence {:.3} leakage {:.3} similarity {:.3} -> {}",
        report.presence,
        report.leakage,
        report.subject_similarity,
        a.out.display()
    );
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let dir = &a.configs;
    let clip = load_clip(&dir.join("clip.ssrt"))?;
    let unet = load_base(&dir.join("base.ssrt"))?;
    let full = load_ssr(&dir.join("ssr_full.ssrt"))?;
    let no_reg = load_ssr(&dir.join("ssr_no_reg.ssrt"))?;
    let no_multiscale = load_ssr(&dir.join("ssr_no_multiscale.ssrt"))?;
    let bench = Dataset::load(&a.bench)?;
    let cfg = BenchConfig {
        seed: resolve(&a.seed, &kv, "seed", 0)?,
        ..Default::default()
    };
    let models = AblationModels {
        clip: &clip,
        unet: &unet,
        full: (&full.0, &full.1),
        no_reg: (&no_reg.0, &no_reg.1),
        no_multiscale: (&no_multiscale.0, &no_multiscale.1),
    };
    let rows = run_ablation(&models, &bench.scenes, &cfg)?;
    let mut csv = String::new();
    let inputs = hash_inputs(&[
        ("bench", a.bench.as_path()),
        ("clip", dir.join("clip.ssrt").as_path()),
        ("base", dir.join("base.ssrt").as_path()),
        ("ssr_full", dir.join("ssr_full.ssrt").as_path()),
        ("ssr_no_reg", dir.join("ssr_no_reg.ssrt").as_path()),
        (
            "ssr_no_multiscale",
            dir.join("ssr_no_multiscale.ssrt").as_path(),
        ),
    ])?;
    for (name, hash) in &inputs {
        csv.push_str(&format!("# input {name} sha256={hash}\n"));
    }
    csv.push_str(&ablation_csv(&rows));
    std::fs::write(&a.out, csv)?;
    for (name, report) in &rows {
        println!(
            "{name}: presence {:.3} leakage {:.3} similarity {:.3}",
            report.presence, report.leakage, report.subject_similarity
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> anyhow::Result<()> {
    let kv = kv_from(&a.common.config)?;
    let seed = resolve(&a.seed, &kv, "seed", 0)?;
    let values: Vec<f64> = a
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad sweep value {v:?}"))
        })
        .collect::<anyhow::Result<_>>()?;
    anyhow::ensure!(!values.is_empty(), "empty sweep grid");
    std::fs::create_dir_all(&a.out)?;

    let clip = load_clip(&a.clip)?;
    let unet = load_base(&a.base)?;
    let bench = Dataset::load(&a.bench)?;
    let cfg = BenchConfig {
        seed,
        ..Default::default()
    };

    let reports: Vec<(f64, ssr_core::eval::BenchReport)> = match a.param.as_str() {
        "lambda" => {
            let (ssr, branch) = load_ssr(a.ssr.as_ref().context("lambda sweep needs --ssr")?)?;
            let models = BenchModels {
                clip: &clip,
                unet: &unet,
                subject: Some((&ssr, &branch)),
            };
            sweep_lambda(&models, &bench.scenes, &cfg, &values)?
        }
        "guidance" => {
            let (ssr, branch) = load_ssr(a.ssr.as_ref().context("guidance sweep needs --ssr")?)?;
            let models = BenchModels {
                clip: &clip,
                unet: &unet,
                subject: Some((&ssr, &branch)),
            };
            let mut out = Vec::new();
            for &g in &values {
                let cfg = BenchConfig {
                    seed,
                    sample: SampleConfig {
                        guidance: g,
                        ..Default::default()
                    },
                    ..Default::default()
                };
                let label = format!("guidance={g}");
                out.push((g, run_bench(&models, &bench.scenes, &cfg, &label)?));
            }
            out
        }
        "tau" => {
            let data = Dataset::load(a.data.as_ref().context("tau sweep needs --data")?)?;
            let ssr1_steps = resolve(&a.ssr1_steps, &kv, "ssr1_steps", DESK.ssr1_steps)?;
            let ssr2_steps = resolve(&a.ssr2_steps, &kv, "ssr2_steps", DESK.ssr2_steps)?;
            let mut out = Vec::new();
            for &tau in &values {
                let cfg1 = TrainConfig {
                    stage: Stage::SsrStep1,
                    steps: ssr1_steps,
                    tau,
                    seed,
                    geometry: data.geometry,
                    ..Default::default()
                };
                let (ssr1, branch1, _) = train_ssr(&data, &clip, &unet, &cfg1, None)?;
                let cfg2 = TrainConfig {
                    stage: Stage::SsrStep2,
                    steps: ssr2_steps,
                    tau,
                    seed,
                    geometry: data.geometry,
                    ..Default::default()
                };
                let (ssr, branch, _) =
                    train_ssr(&data, &clip, &unet, &cfg2, Some((ssr1, branch1)))?;
                let models = BenchModels {
                    clip: &clip,
                    unet: &unet,
                    subject: Some((&ssr, &branch)),
                };
                let bench_cfg = BenchConfig {
                    seed,
                    ..Default::default()
                };
                let label = format!("tau={tau}");
                out.push((tau, run_bench(&models, &bench.scenes, &bench_cfg, &label)?));
            }
            out
        }
        other => bail!("unknown sweep parameter {other:?} (lambda, guidance or tau)"),
    };

    let mut inputs = vec![
        ("bench", a.bench.as_path()),
        ("clip", a.clip.as_path()),
        ("base", a.base.as_path()),
    ];
    if let Some(s) = &a.ssr {
        inputs.push(("ssr", s.as_path()));
    }
    let hashes = hash_inputs(&inputs)?;
    for (value, mut report) in reports {
        report.input_hashes = hashes.clone();
        let path = a.out.join(format!("{}_{value}.json", a.param));
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        println!(
            "{}={value}: presence {:.3} leakage {:.3} similarity {:.3}",
            a.param, report.presence, report.leakage, report.subject_similarity
        );
    }
    println!("wrote {} reports to {}", values.len(), a.out.display());
    Ok(())
}
