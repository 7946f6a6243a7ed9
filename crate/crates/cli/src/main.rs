//! `uvpaint`: baking, data generation, training, sampling, rendering and
//! evaluation behind one binary.
//!
//! Settings resolve as flags > config file > built-in defaults. Logs go to
//! standard error; every machine-readable output is a file. On failure the
//! last line on standard error is `error[<kind>]: <message>` and the exit
//! code is 2 (usage), 3 (data) or 4 (numeric).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use uvpaint::codec::{train_codec, Codec, CodecVariant};
use uvpaint::conditioning::encode_sample;
use uvpaint::config::RunConfig;
use uvpaint::diffusion::{train_encoded, Checkpoint, NoiseSchedule};
use uvpaint::geometry::{load_obj, normalize_mesh};
use uvpaint::image::{ImageGrid, Semantics};
use uvpaint::metrics::evaluate;
use uvpaint::raster::{normalize_and_bake, render_view, uv_coverage, Camera, View};
use uvpaint::sampler::sample;
use uvpaint::synth::{build_dataset, Manifest, TypeLabel};
use uvpaint::tensor_file::{config_hash, load_image, save_image, Container, RawTensor};
use uvpaint::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "uvpaint", version, about = "Reference-guided UV texture synthesis for garment meshes")]
struct Cli {
    /// Worker threads; 1 forces the deterministic single-threaded mode
    /// (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalise a mesh and bake its uv position map and coverage mask.
    Bake(BakeArgs),
    /// Generate the synthetic garment dataset and its manifest.
    GenData(GenDataArgs),
    /// Train the latent codec on a dataset's textures, positions and references.
    TrainCodec(TrainCodecArgs),
    /// Train the denoiser on a dataset encoded with a codec.
    Train(TrainArgs),
    /// Synthesise a uv texture for one garment.
    Sample(SampleArgs),
    /// Render a textured mesh from the front or back.
    Render(RenderArgs),
    /// Generate textures for a dataset and score them.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; absent sections and keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct BakeArgs {
    /// Triangle mesh with texture coordinates (.obj).
    #[arg(long)]
    mesh: PathBuf,
    /// Side of the square uv maps in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Optional alpha mask (.uvpt, resolution x resolution) restricting the
    /// texels that define the normalisation frame.
    #[arg(long)]
    alpha: Option<PathBuf>,
    /// Output directory; receives position.uvpt, mask.uvpt and png previews.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of samples [config: data.samples].
    #[arg(long)]
    samples: Option<usize>,
    /// Map resolution, a multiple of 8 [config: data.resolution].
    #[arg(long)]
    resolution: Option<usize>,
    /// Dataset seed [config: data.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives one folder per sample and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCodecArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Optimiser steps [config: codec.steps].
    #[arg(long)]
    steps: Option<usize>,
    /// Training seed [config: codec.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Codec variant [config: codec.variant].
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Codec checkpoint to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Lossless,
    Learned,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Codec checkpoint from `train-codec`.
    #[arg(long)]
    codec: PathBuf,
    /// Optimiser steps [config: train.steps].
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate [config: train.lr].
    #[arg(long)]
    lr: Option<f32>,
    /// Batch size [config: train.batch].
    #[arg(long)]
    batch: Option<usize>,
    /// Training seed [config: train.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a checkpoint every N steps, 0 = never [config: train.checkpoint_every].
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Ablation: zero the uv position block of the input [config: train.use_position_map].
    #[arg(long)]
    no_position_map: bool,
    /// Ablation: drop the garment type embedding [config: train.use_type_module].
    #[arg(long)]
    no_type_module: bool,
    /// Output directory; receives denoiser.uvpk and loss.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Denoiser checkpoint from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Codec checkpoint the denoiser was trained with.
    #[arg(long)]
    codec: PathBuf,
    /// Reference image (.uvpt, rgb).
    #[arg(long)]
    reference: PathBuf,
    /// Uv position map (.uvpt, xyz).
    #[arg(long)]
    position: PathBuf,
    /// Uv coverage mask (.uvpt).
    #[arg(long)]
    mask: PathBuf,
    /// Garment type of the target.
    #[arg(long, value_enum)]
    label: LabelArg,
    /// Sampling seed [config: sample.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Reverse steps [config: sample.steps].
    #[arg(long)]
    steps: Option<usize>,
    /// DDIM stochasticity, 0 = deterministic [config: sample.eta].
    #[arg(long)]
    eta: Option<f64>,
    /// Ancestral sampling over every timestep [config: sample.ddpm].
    #[arg(long)]
    ddpm: bool,
    /// Texture to write (.uvpt); a .png preview and a .json sidecar are
    /// written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Top,
    Bottom,
    Onepiece,
}

impl From<LabelArg> for TypeLabel {
    fn from(l: LabelArg) -> Self {
        match l {
            LabelArg::Top => TypeLabel::Top,
            LabelArg::Bottom => TypeLabel::Bottom,
            LabelArg::Onepiece => TypeLabel::Onepiece,
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    /// Triangle mesh with texture coordinates (.obj); normalised before
    /// rendering.
    #[arg(long)]
    mesh: PathBuf,
    /// Texture (.uvpt) with 3 channels.
    #[arg(long)]
    texture: PathBuf,
    /// Read the texture as a position map and show it remapped to colours.
    #[arg(long)]
    position_map: bool,
    /// Alpha mask (.uvpt); defaults to the mesh's uv coverage.
    #[arg(long)]
    alpha: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "front")]
    view: ViewArg,
    /// Side of the square output image in pixels.
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// PNG to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Front,
    Back,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Denoiser checkpoint; required unless --ground-truth.
    #[arg(long, required_unless_present = "ground_truth")]
    checkpoint: Option<PathBuf>,
    /// Codec checkpoint; required unless --ground-truth.
    #[arg(long, required_unless_present = "ground_truth")]
    codec: Option<PathBuf>,
    /// Score the dataset's own textures instead of generated ones.
    #[arg(long, conflicts_with_all = ["checkpoint", "codec"])]
    ground_truth: bool,
    /// Evaluate at most this many entries, 0 = all [config: eval.max_samples].
    #[arg(long)]
    max_samples: Option<usize>,
    /// Base sampling seed; entry i uses seed + i [config: sample.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Reverse steps [config: sample.steps].
    #[arg(long)]
    steps: Option<usize>,
    /// Report to write (.jsonl: one line per sample, then a summary line).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Usage => ("usage", 2),
                ErrorKind::Data => ("data", 3),
                ErrorKind::Numeric => ("numeric", 4),
            };
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Bake(a) => bake(a),
        Command::GenData(a) => gen_data(a),
        Command::TrainCodec(a) => train_codec_cmd(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn bake(a: BakeArgs) -> Result<()> {
    let mesh = load_obj(&a.mesh)?;
    let alpha = a.alpha.as_deref().map(|p| load_image(p, Semantics::Mask)).transpose()?;
    let (_, tf, pos, mask) = normalize_and_bake(&mesh, alpha.as_ref(), a.resolution)?;
    create_dir(&a.out)?;
    save_image(&pos, &a.out.join("position.uvpt"))?;
    save_image(&mask, &a.out.join("mask.uvpt"))?;
    pos.save_png(&a.out.join("position.png"))?;
    mask.save_png(&a.out.join("mask.png"))?;
    let covered = mask.data.iter().filter(|v| **v > 0.5).count();
    info!("baked {}: {covered} covered texels, scale {:.4}", a.mesh.display(), tf.scale);
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.samples {
        cfg.data.samples = v;
    }
    if let Some(v) = a.resolution {
        cfg.data.resolution = v;
    }
    if let Some(v) = a.seed {
        cfg.data.seed = v;
    }
    cfg.validate()?;
    let start = Instant::now();
    let m = build_dataset(cfg.data.samples, &a.out, cfg.data.seed, cfg.data.resolution)?;
    info!("wrote {} samples to {} in {:.1}s", m.entries.len(), a.out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn train_codec_cmd(a: TrainCodecArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.steps {
        cfg.codec.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.codec.seed = v;
    }
    if let Some(v) = a.variant {
        cfg.codec.variant = match v {
            VariantArg::Lossless => CodecVariant::Lossless,
            VariantArg::Learned => CodecVariant::Learned,
        };
    }
    cfg.validate()?;
    let codec = match cfg.codec.variant {
        CodecVariant::Lossless => Codec::from_config(&cfg.codec),
        CodecVariant::Learned => {
            let samples = Manifest::load(&a.data)?.load_all()?;
            let mut images = Vec::with_capacity(3 * samples.len());
            for s in samples {
                images.extend([s.uv_texture, s.uv_position, s.reference_image]);
            }
            let every = (cfg.codec.steps / 20).max(1);
            let (model, _) = train_codec(&images, &cfg.codec, |step, loss| {
                if (step + 1) % every == 0 {
                    info!("codec step {} loss {loss:.5}", step + 1);
                }
            })?;
            Codec::Learned(model)
        }
    };
    create_parent(&a.out)?;
    codec.save(&cfg.codec, &a.out)?;
    info!("wrote codec {} ({})", a.out.display(), codec.content_hash());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if a.no_position_map {
        t.use_position_map = false;
    }
    if a.no_type_module {
        t.use_type_module = false;
    }
    cfg.validate()?;
    let (codec, _) = Codec::load(&a.codec)?;
    let codec_hash = codec.content_hash();
    let samples = Manifest::load(&a.data)?.load_all()?;
    let encoded = samples.iter().map(|s| encode_sample(s, &codec)).collect::<Result<Vec<_>>>()?;
    let (_, lh, lw) = encoded[0].z_uv.shape();
    create_dir(&a.out)?;
    let start = Instant::now();
    let train_cfg = cfg.train.clone();
    let every = train_cfg.checkpoint_every;
    let snapshot = |net: &uvpaint::diffusion::DenoiserNet, step: usize| Checkpoint {
        net: net.clone(),
        schedule: train_cfg.schedule,
        train: train_cfg.clone(),
        step,
        latent_hw: (lh, lw),
        codec_hash: codec_hash.clone(),
    };
    let log_every = (train_cfg.steps / 50).max(1);
    let mut recent = Vec::new();
    let (net, log) = train_encoded(&encoded, &cfg.train, &cfg.model, |step, loss, net| {
        recent.push(loss);
        if step % log_every == 0 {
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            info!("step {step} loss {mean:.4} ({:.0}s)", start.elapsed().as_secs_f64());
            recent.clear();
        }
        if every > 0 && step % every == 0 && step < train_cfg.steps {
            snapshot(net, step).save(&a.out.join(format!("denoiser_{step:06}.uvpk")))?;
        }
        Ok(())
    })?;
    let final_path = a.out.join("denoiser.uvpk");
    snapshot(&net, train_cfg.steps).save(&final_path)?;
    let lines: String = log
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::json!({"step": i + 1, "loss": l}).to_string() + "\n")
        .collect();
    write_text(&a.out.join("loss.jsonl"), &lines)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    info!("wrote {} after {:.0}s", final_path.display(), start.elapsed().as_secs_f64());
    Ok(())
}

/// Loads a denoiser and the codec it was trained against.
fn load_pair(checkpoint: &Path, codec: &Path) -> Result<(Checkpoint, Codec, String)> {
    let container = Container::load(checkpoint)?;
    let hash = container.content_hash();
    let ck = Checkpoint::from_container(&container)?;
    let (codec, _) = Codec::load(codec)?;
    if !ck.codec_hash.is_empty() && ck.codec_hash != codec.content_hash() {
        return Err(Error::Format(format!(
            "{} was trained with codec {}, got {}",
            checkpoint.display(),
            ck.codec_hash,
            codec.content_hash()
        )));
    }
    Ok((ck, codec, hash))
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let s = &mut cfg.sample;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.eta {
        s.eta = v;
    }
    if a.ddpm {
        s.ddpm = true;
    }
    cfg.validate()?;
    let (ck, codec, ck_hash) = load_pair(&a.checkpoint, &a.codec)?;
    cfg.sample.validate(&NoiseSchedule::new(ck.schedule)?)?;
    let reference = load_image(&a.reference, Semantics::Rgb)?;
    let position = load_image(&a.position, Semantics::Xyz)?;
    let mask = load_image(&a.mask, Semantics::Mask)?;
    let label = TypeLabel::from(a.label);
    let start = Instant::now();
    let tex = sample(&reference, &position, &mask, label, &ck, &codec, &cfg.sample)?;
    create_parent(&a.out)?;
    save_image(&tex, &a.out)?;
    tex.save_png(&with_ext(&a.out, "png"))?;
    let sidecar = serde_json::json!({
        "seed": cfg.sample.seed,
        "label": label,
        "sample": cfg.sample,
        "sample_config_hash": config_hash(&cfg.sample),
        "checkpoint": a.checkpoint.display().to_string(),
        "checkpoint_hash": ck_hash,
        "codec_hash": codec.content_hash(),
        "texture_hash": Container { meta: serde_json::Value::Null, entries: vec![("texture".into(), RawTensor::from(&tex.clamped()))] }.content_hash(),
    });
    write_text(&with_ext(&a.out, "json"), &(serde_json::to_string_pretty(&sidecar).expect("json") + "\n"))?;
    info!("sampled {} in {:.2}s", a.out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let (mesh, _) = normalize_mesh(&load_obj(&a.mesh)?, None)?;
    let texture = if a.position_map {
        let p = load_image(&a.texture, Semantics::Xyz)?;
        ImageGrid::new(p.height, p.width, Semantics::Rgb, p.data.iter().map(|v| 0.5 * (v + 1.0)).collect())?
    } else {
        load_image(&a.texture, Semantics::Rgb)?
    };
    let alpha = match &a.alpha {
        Some(p) => load_image(p, Semantics::Mask)?,
        None => {
            let cov = uv_coverage(&mesh, texture.width.max(texture.height))?;
            let side = texture.width.max(texture.height);
            let data = cov.iter().map(|c| if c.is_some() { 1.0 } else { 0.0 }).collect();
            ImageGrid::new(side, side, Semantics::Mask, data)?
        }
    };
    let view = match a.view {
        ViewArg::Front => View::Front,
        ViewArg::Back => View::Back,
    };
    let img = render_view(&mesh, &texture, &alpha, &Camera::new(view, 1.0)?, a.resolution)?;
    create_parent(&a.out)?;
    img.save_png(&a.out)?;
    info!("rendered {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.max_samples {
        cfg.eval.max_samples = v;
    }
    if let Some(v) = a.seed {
        cfg.sample.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.sample.steps = v;
    }
    cfg.validate()?;
    let manifest = Manifest::load(&a.data)?;
    let n = match cfg.eval.max_samples {
        0 => manifest.entries.len(),
        m => m.min(manifest.entries.len()),
    };
    let samples = (0..n).map(|i| manifest.load_sample(i)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = manifest.entries[..n].iter().map(|e| e.id.clone()).collect();
    let generated = if a.ground_truth {
        samples.iter().map(|s| s.uv_texture.clone()).collect()
    } else {
        let (ck, codec, _) = load_pair(
            a.checkpoint.as_deref().expect("clap enforces --checkpoint"),
            a.codec.as_deref().expect("clap enforces --codec"),
        )?;
        let start = Instant::now();
        let mut out = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            let mut sc = cfg.sample.clone();
            sc.seed = cfg.sample.seed.wrapping_add(i as u64);
            out.push(sample(&s.reference_image, &s.uv_position, &s.uv_mask, s.label, &ck, &codec, &sc)?);
        }
        info!("generated {n} textures in {:.1}s", start.elapsed().as_secs_f64());
        out
    };
    let report = evaluate(&ids, &generated, &samples)?;
    create_parent(&a.out)?;
    report.save(&a.out)?;
    eprintln!("{}", report.summary_table());
    Ok(())
}
