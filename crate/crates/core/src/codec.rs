//! Image ↔ latent codecs with a fixed 8× spatial reduction.
//!
//! * [`LosslessCodec`]: space-to-depth by 8 (192 channels for 3-channel
//!   images), optionally followed by a seeded signed channel permutation.
//!   Exactly invertible.
//! * [`LearnedCodec`]: small convolutional autoencoder working on the
//!   space-to-depth grid, compressing each 8×8 block to `C` (default 4)
//!   channels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uvpaint_nn::act::{silu, silu_backward};
use uvpaint_nn::{init_rng, Adam, Conv2d, ConvCache, Module, Param, Tensor};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, Semantics};
use crate::tensor_file::{config_hash, Container, RawTensor};

/// Spatial reduction of every codec.
pub const FACTOR: usize = 8;

/// What a latent encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentRole {
    Uv,
    Reference,
    Position,
    Masked,
    Noise,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub role: LatentRole,
    pub tensor: Tensor,
}

impl LatentTensor {
    pub fn new(role: LatentRole, tensor: Tensor) -> Result<Self> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("{role:?} latent")));
        }
        Ok(Self { role, tensor })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { role: LatentRole::Zero, tensor: Tensor::zeros(c, h, w) }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.tensor.shape()
    }
}

/// HWC grid to CHW tensor.
pub fn grid_to_tensor(img: &ImageGrid) -> Tensor {
    let c = img.channels();
    let plane = img.height * img.width;
    let mut t = Tensor::zeros(c, img.height, img.width);
    for i in 0..plane {
        for k in 0..c {
            t.data[k * plane + i] = img.data[i * c + k];
        }
    }
    t
}

/// CHW tensor to HWC grid; values are not range-checked.
pub fn tensor_to_grid(t: &Tensor, semantics: Semantics) -> Result<ImageGrid> {
    if t.c != semantics.channels() {
        return Err(Error::Shape(format!("{} channels cannot hold {semantics:?}", t.c)));
    }
    let plane = t.h * t.w;
    let mut data = vec![0.0; t.len()];
    for i in 0..plane {
        for k in 0..t.c {
            data[i * t.c + k] = t.data[k * plane + i];
        }
    }
    ImageGrid::unchecked(t.h, t.w, semantics, data)
}

fn check_encodable(img: &ImageGrid) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("codecs take 3-channel images, got {:?}", img.semantics)));
    }
    if img.height % FACTOR != 0 || img.width % FACTOR != 0 {
        return Err(Error::Shape(format!("{}x{} is not divisible by {FACTOR}", img.height, img.width)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecVariant {
    Lossless,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub variant: CodecVariant,
    /// Latent channels of the learned variant.
    pub channels: usize,
    /// Apply the signed channel permutation in the lossless variant.
    pub mix: bool,
    pub hidden: usize,
    pub res_blocks: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Learning rate reached at the last step (cosine decay).
    pub lr_final: f32,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            variant: CodecVariant::Learned,
            channels: 4,
            mix: false,
            hidden: 128,
            res_blocks: 2,
            steps: 4000,
            batch: 8,
            lr: 2e-3,
            lr_final: 1e-4,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("codec: {m}")));
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.variant == CodecVariant::Learned && (self.hidden == 0 || self.batch == 0) {
            return bad("hidden and batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Space-to-depth codec; `perm`/`sign` describe the optional channel mix
/// (`out[i] = sign[i] · in[perm[i]]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LosslessCodec {
    perm: Option<(Vec<usize>, Vec<f32>)>,
}

impl LosslessCodec {
    pub const CHANNELS: usize = 3 * FACTOR * FACTOR;

    pub fn new(mix_seed: Option<u64>) -> Self {
        let perm = mix_seed.map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p: Vec<usize> = (0..Self::CHANNELS).collect();
            p.shuffle(&mut rng);
            let s = (0..Self::CHANNELS).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            (p, s)
        });
        Self { perm }
    }

    pub fn encode(&self, img: &ImageGrid) -> Result<Tensor> {
        check_encodable(img)?;
        let s2d = grid_to_tensor(img).space_to_depth(FACTOR);
        let Some((perm, sign)) = &self.perm else { return Ok(s2d) };
        let mut out = Tensor::zeros(s2d.c, s2d.h, s2d.w);
        for (i, (&p, &s)) in perm.iter().zip(sign).enumerate() {
            for (o, v) in out.channel_mut(i).iter_mut().zip(s2d.channel(p)) {
                *o = s * v;
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &Tensor, semantics: Semantics) -> Result<ImageGrid> {
        if z.c != Self::CHANNELS {
            return Err(Error::Shape(format!("lossless latent needs {} channels, got {}", Self::CHANNELS, z.c)));
        }
        let unmixed = match &self.perm {
            None => z.clone(),
            Some((perm, sign)) => {
                let mut out = Tensor::zeros(z.c, z.h, z.w);
                for (i, (&p, &s)) in perm.iter().zip(sign).enumerate() {
                    for (o, v) in out.channel_mut(p).iter_mut().zip(z.channel(i)) {
                        *o = s * v;
                    }
                }
                out
            }
        };
        tensor_to_grid(&unmixed.depth_to_space(FACTOR), semantics)
    }
}

/// `x ↦ 2x − 1` for colours so every input lives in `[-1, 1]`.
fn to_signed(img: &ImageGrid) -> Tensor {
    let mut t = grid_to_tensor(img);
    if img.semantics == Semantics::Rgb {
        t.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    }
    t
}

fn from_signed(mut t: Tensor, semantics: Semantics) -> Result<ImageGrid> {
    if semantics == Semantics::Rgb {
        t.data.iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
    }
    tensor_to_grid(&t, semantics)
}

#[derive(Clone, Debug)]
struct ResUnit {
    a: Conv2d,
    b: Conv2d,
}

/// Convolutional autoencoder over the 8×8 space-to-depth grid:
///
/// ```text
/// enc: s2d → conv3 → silu → conv3 → silu → conv1 → C
/// dec: C → conv3 → [x + conv3(silu(conv3(silu x)))]×n → silu → conv1(2h) → silu → conv1(192) → d2s
/// ```
///
/// Latents are standardised per channel, `(z - latent_shift[c]) ·
/// latent_scale[c]`, with statistics fitted after training so every channel
/// is zero-mean and unit-variance over the fitting set.
#[derive(Clone, Debug)]
pub struct LearnedCodec {
    pub channels: usize,
    pub hidden: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    res: Vec<ResUnit>,
    dec_mlp: Conv2d,
    dec_out: Conv2d,
    pub latent_shift: Vec<f32>,
    pub latent_scale: Vec<f32>,
}

struct EncCache {
    c1: ConvCache,
    a1: Tensor,
    c2: ConvCache,
    a2: Tensor,
    c3: ConvCache,
}

struct DecCache {
    c0: ConvCache,
    res: Vec<(Tensor, ConvCache, Tensor, ConvCache)>,
    h_last: Tensor,
    cm: ConvCache,
    m: Tensor,
    co: ConvCache,
}

impl Module for LearnedCodec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let j = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.enc1.visit(&j("enc1"), f);
        self.enc2.visit(&j("enc2"), f);
        self.enc_out.visit(&j("enc_out"), f);
        self.dec_in.visit(&j("dec_in"), f);
        for (i, r) in self.res.iter().enumerate() {
            r.a.visit(&j(&format!("res{i}.a")), f);
            r.b.visit(&j(&format!("res{i}.b")), f);
        }
        self.dec_mlp.visit(&j("dec_mlp"), f);
        self.dec_out.visit(&j("dec_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let j = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.enc1.visit_mut(&j("enc1"), f);
        self.enc2.visit_mut(&j("enc2"), f);
        self.enc_out.visit_mut(&j("enc_out"), f);
        self.dec_in.visit_mut(&j("dec_in"), f);
        for (i, r) in self.res.iter_mut().enumerate() {
            r.a.visit_mut(&j(&format!("res{i}.a")), f);
            r.b.visit_mut(&j(&format!("res{i}.b")), f);
        }
        self.dec_mlp.visit_mut(&j("dec_mlp"), f);
        self.dec_out.visit_mut(&j("dec_out"), f);
    }
}

impl LearnedCodec {
    pub fn new(cfg: &CodecConfig) -> Self {
        let mut rng = init_rng(cfg.seed);
        let (c, h, px) = (cfg.channels, cfg.hidden, LosslessCodec::CHANNELS);
        Self {
            channels: c,
            hidden: h,
            enc1: Conv2d::new(px, h, 3, 1, &mut rng),
            enc2: Conv2d::new(h, h, 3, 1, &mut rng),
            enc_out: Conv2d::new(h, c, 1, 1, &mut rng),
            dec_in: Conv2d::new(c, h, 3, 1, &mut rng),
            res: (0..cfg.res_blocks)
                .map(|_| ResUnit { a: Conv2d::new(h, h, 3, 1, &mut rng), b: Conv2d::new(h, h, 3, 1, &mut rng).zero_init() })
                .collect(),
            dec_mlp: Conv2d::new(h, 2 * h, 1, 1, &mut rng),
            dec_out: Conv2d::new(2 * h, px, 1, 1, &mut rng),
            latent_shift: vec![0.0; c],
            latent_scale: vec![1.0; c],
        }
    }

    fn enc_forward(&self, x: &Tensor) -> (Tensor, EncCache) {
        let (a1, c1) = self.enc1.forward(x);
        let (a2, c2) = self.enc2.forward(&silu(&a1));
        let (z, c3) = self.enc_out.forward(&silu(&a2));
        (z, EncCache { c1, a1, c2, a2, c3 })
    }

    fn enc_backward(&mut self, cache: &EncCache, dz: &Tensor) {
        let d = self.enc_out.backward(&cache.c3, dz);
        let d = self.enc2.backward(&cache.c2, &silu_backward(&cache.a2, &d));
        self.enc1.backward(&cache.c1, &silu_backward(&cache.a1, &d));
    }

    fn dec_forward(&self, z: &Tensor) -> (Tensor, DecCache) {
        let (mut h, c0) = self.dec_in.forward(z);
        let mut res = Vec::with_capacity(self.res.len());
        for r in &self.res {
            let (ra, ca) = r.a.forward(&silu(&h));
            let (rb, cb) = r.b.forward(&silu(&ra));
            let h_in = h.clone();
            h.add_assign(&rb);
            res.push((h_in, ca, ra, cb));
        }
        let (m, cm) = self.dec_mlp.forward(&silu(&h));
        let (o, co) = self.dec_out.forward(&silu(&m));
        (o.depth_to_space(FACTOR), DecCache { c0, res, h_last: h, cm, m, co })
    }

    fn dec_backward(&mut self, cache: &DecCache, dout: &Tensor) -> Tensor {
        let d = self.dec_out.backward(&cache.co, &dout.space_to_depth(FACTOR));
        let d = self.dec_mlp.backward(&cache.cm, &silu_backward(&cache.m, &d));
        let mut dh = silu_backward(&cache.h_last, &d);
        for (r, (h_in, ca, ra, cb)) in self.res.iter_mut().zip(&cache.res).rev() {
            let d = r.b.backward(cb, &dh);
            let d = r.a.backward(ca, &silu_backward(ra, &d));
            dh.add_assign(&silu_backward(h_in, &d));
        }
        self.dec_in.backward(&cache.c0, &dh)
    }

    /// Unscaled latent of a signed input tensor.
    fn encode_raw(&self, x: &Tensor) -> Tensor {
        self.enc_forward(&x.space_to_depth(FACTOR)).0
    }

    pub fn encode(&self, img: &ImageGrid) -> Result<Tensor> {
        check_encodable(img)?;
        let mut z = self.encode_raw(&to_signed(img));
        let hw = z.h * z.w;
        for (ch, block) in z.data.chunks_mut(hw).enumerate() {
            let (m, k) = (self.latent_shift[ch], self.latent_scale[ch]);
            block.iter_mut().for_each(|v| *v = (*v - m) * k);
        }
        Ok(z)
    }

    pub fn decode(&self, z: &Tensor, semantics: Semantics) -> Result<ImageGrid> {
        if z.c != self.channels {
            return Err(Error::Shape(format!("codec has {} latent channels, got {}", self.channels, z.c)));
        }
        let mut zs = z.clone();
        let hw = zs.h * zs.w;
        for (ch, block) in zs.data.chunks_mut(hw).enumerate() {
            let (m, k) = (self.latent_shift[ch], self.latent_scale[ch]);
            block.iter_mut().for_each(|v| *v = *v / k + m);
        }
        from_signed(self.dec_forward(&zs).0, semantics)
    }

    /// Refits the per-channel standardisation on `images`.
    pub fn fit_latent_stats(&mut self, images: &[ImageGrid]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let c = self.channels;
        let (mut sum, mut sq, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for img in images {
            check_encodable(img)?;
            let z = self.encode_raw(&to_signed(img));
            let hw = z.h * z.w;
            for (ch, block) in z.data.chunks(hw).enumerate() {
                sum[ch] += block.iter().map(|v| *v as f64).sum::<f64>();
                sq[ch] += block.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
            }
            n += z.h * z.w;
        }
        for ch in 0..c {
            let mean = sum[ch] / n as f64;
            let var = (sq[ch] / n as f64 - mean * mean).max(0.0);
            self.latent_shift[ch] = mean as f32;
            self.latent_scale[ch] = if var > 0.0 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
        }
        Ok(())
    }

    /// Reconstruction MSE of one signed input; accumulates gradients.
    fn train_item(&mut self, x: &Tensor) -> f64 {
        let target = x;
        let (z, ec) = self.enc_forward(&x.space_to_depth(FACTOR));
        let (y, dc) = self.dec_forward(&z);
        let n = y.len() as f64;
        let mut loss = 0.0f64;
        let mut dy = Tensor::zeros(y.c, y.h, y.w);
        for i in 0..y.len() {
            let d = y.data[i] - target.data[i];
            loss += (d as f64) * (d as f64);
            dy.data[i] = 2.0 * d / n as f32;
        }
        let dz = self.dec_backward(&dc, &dy);
        self.enc_backward(&ec, &dz);
        loss / n
    }
}

/// Either codec behind one interface.
#[derive(Clone, Debug)]
pub enum Codec {
    Lossless(LosslessCodec),
    Learned(LearnedCodec),
}

pub const CODEC_KIND: &str = "uvpaint-codec";

impl Codec {
    pub fn lossless() -> Self {
        Codec::Lossless(LosslessCodec::new(None))
    }

    pub fn channels(&self) -> usize {
        match self {
            Codec::Lossless(_) => LosslessCodec::CHANNELS,
            Codec::Learned(c) => c.channels,
        }
    }

    pub fn encode(&self, img: &ImageGrid, role: LatentRole) -> Result<LatentTensor> {
        let t = match self {
            Codec::Lossless(c) => c.encode(img)?,
            Codec::Learned(c) => c.encode(img)?,
        };
        LatentTensor::new(role, t)
    }

    /// Decodes to the source resolution. Values may leave the semantic
    /// range; clamping happens when the image is persisted.
    pub fn decode(&self, z: &LatentTensor, semantics: Semantics) -> Result<ImageGrid> {
        match self {
            Codec::Lossless(c) => c.decode(&z.tensor, semantics),
            Codec::Learned(c) => c.decode(&z.tensor, semantics),
        }
    }

    pub fn to_container(&self, cfg: &CodecConfig) -> Container {
        let mut meta = serde_json::json!({
            "kind": CODEC_KIND,
            "variant": match self { Codec::Lossless(_) => "lossless", Codec::Learned(_) => "learned" },
            "channels": self.channels(),
            "factor": FACTOR,
            "config": cfg,
            "config_hash": config_hash(cfg),
        });
        let mut c = Container::new(serde_json::Value::Null);
        match self {
            Codec::Lossless(l) => {
                if let Some((perm, sign)) = &l.perm {
                    let p = perm.iter().map(|&v| v as f32).collect();
                    c.push("mix.perm", RawTensor { dims: vec![perm.len()], data: p });
                    c.push("mix.sign", RawTensor { dims: vec![sign.len()], data: sign.clone() });
                }
            }
            Codec::Learned(l) => {
                meta["latent_shift"] = serde_json::json!(l.latent_shift);
                meta["latent_scale"] = serde_json::json!(l.latent_scale);
                c.push_module("", l);
            }
        }
        meta["content_hash"] = serde_json::json!(c.content_hash());
        c.meta = meta;
        c
    }

    pub fn from_container(c: &Container) -> Result<(Self, CodecConfig)> {
        if c.meta["kind"] != CODEC_KIND {
            return Err(Error::Format("not a codec checkpoint".into()));
        }
        let cfg: CodecConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Format(format!("codec config: {e}")))?;
        if c.meta["factor"] != FACTOR {
            return Err(Error::Format("codec factor mismatch".into()));
        }
        let codec = match c.meta["variant"].as_str() {
            Some("lossless") => {
                let perm = match (c.get("mix.perm"), c.get("mix.sign")) {
                    (Some(p), Some(s)) => Some((p.data.iter().map(|v| *v as usize).collect(), s.data.clone())),
                    _ => None,
                };
                Codec::Lossless(LosslessCodec { perm })
            }
            Some("learned") => {
                let mut l = LearnedCodec::new(&cfg);
                c.restore_module("", &mut l)?;
                let stats = |key: &str| -> Result<Vec<f32>> {
                    let v: Vec<f32> = serde_json::from_value(c.meta[key].clone())
                        .map_err(|e| Error::Format(format!("codec checkpoint {key}: {e}")))?;
                    if v.len() != cfg.channels {
                        return Err(Error::Format(format!("codec checkpoint {key} has {} entries", v.len())));
                    }
                    Ok(v)
                };
                l.latent_shift = stats("latent_shift")?;
                l.latent_scale = stats("latent_scale")?;
                Codec::Learned(l)
            }
            other => return Err(Error::Format(format!("unknown codec variant {other:?}"))),
        };
        Ok((codec, cfg))
    }

    /// Hash of the weights alone; two codecs that encode identically agree.
    pub fn content_hash(&self) -> String {
        let c = self.to_container(&CodecConfig::default());
        match self {
            Codec::Lossless(_) => c.content_hash(),
            Codec::Learned(l) => {
                let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                config_hash(&(c.content_hash(), bits(&l.latent_shift), bits(&l.latent_scale)))
            }
        }
    }

    pub fn save(&self, cfg: &CodecConfig, path: &Path) -> Result<()> {
        self.to_container(cfg).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, CodecConfig)> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn from_config(cfg: &CodecConfig) -> Self {
        match cfg.variant {
            CodecVariant::Lossless => Codec::Lossless(LosslessCodec::new(cfg.mix.then_some(cfg.seed))),
            CodecVariant::Learned => Codec::Learned(LearnedCodec::new(cfg)),
        }
    }
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainLog {
    pub losses: Vec<f64>,
}

/// Trains the learned codec on a mix of rgb and xyz images (each mapped to
/// `[-1, 1]`) with mean squared error, then fits the latent scale.
/// Single-threaded and deterministic in `cfg.seed`.
pub fn train_codec(
    images: &[ImageGrid],
    cfg: &CodecConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(LearnedCodec, CodecTrainLog)> {
    cfg.validate()?;
    if cfg.variant != CodecVariant::Learned {
        return Err(Error::Config("train_codec needs the learned variant".into()));
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for img in images {
        check_encodable(img)?;
    }
    let inputs: Vec<Tensor> = images.iter().map(to_signed).collect();
    let mut model = LearnedCodec::new(cfg);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0dec);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len();
    let mut log = CodecTrainLog::default();
    for step in 0..cfg.steps {
        let t = step as f32 / cfg.steps.max(1) as f32;
        opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f32::consts::PI * t).cos());
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            loss += model.train_item(&inputs[order[cursor]]);
            cursor += 1;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("codec loss at step {step}")));
        }
        let inv = 1.0 / cfg.batch as f32;
        model.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= inv));
        model.clip_grad_norm(1.0);
        opt.step(&mut model);
        log.losses.push(loss);
        progress(step, loss);
    }
    model.fit_latent_stats(images)?;
    Ok((model, log))
}

/// Peak signal-to-noise ratio with the peak set to the width of the
/// semantic range (1 for colours, 2 for positions).
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let (lo, hi) = a.semantics.range();
    let peak = (hi - lo) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn random_image(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.gen::<f32>()).collect();
        ImageGrid::new(h, w, Semantics::Rgb, data).unwrap()
    }

    #[test]
    fn lossless_examples() {
        let codec = Codec::lossless();
        let gray = ImageGrid::filled(16, 16, Semantics::Rgb, &[0.5; 3]);
        let z = codec.encode(&gray, LatentRole::Uv).unwrap();
        assert_eq!(z.shape(), (192, 2, 2));
        assert_eq!(codec.decode(&z, Semantics::Rgb).unwrap(), gray);
        let zero = ImageGrid::zeros(16, 8, Semantics::Xyz);
        let z = codec.encode(&zero, LatentRole::Position).unwrap();
        assert!(z.tensor.data.iter().all(|v| *v == 0.0));
        let back = codec.decode(&LatentTensor::zeros(192, 1, 2), Semantics::Rgb).unwrap();
        assert!(back.data.iter().all(|v| *v == 0.0));
        assert!(codec.encode(&ImageGrid::zeros(12, 8, Semantics::Rgb), LatentRole::Uv).is_err());
    }

    #[test]
    fn block_shift_equivariance() {
        let codec = Codec::Lossless(LosslessCodec::new(Some(3)));
        let img = random_image(16, 24, 1);
        let mut shifted = ImageGrid::zeros(16, 24, Semantics::Rgb);
        for y in 0..16 {
            for x in 8..24 {
                shifted.pixel_mut(x, y).copy_from_slice(img.pixel(x - 8, y));
            }
        }
        let a = codec.encode(&img, LatentRole::Uv).unwrap().tensor;
        let b = codec.encode(&shifted, LatentRole::Uv).unwrap().tensor;
        for c in 0..a.c {
            for y in 0..a.h {
                for x in 1..a.w {
                    assert_eq!(b[(c, y, x)], a[(c, y, x - 1)]);
                }
            }
        }
    }

    #[test]
    fn learned_codec_checkpoint_roundtrip() {
        let cfg = CodecConfig { hidden: 8, res_blocks: 1, steps: 2, batch: 1, ..Default::default() };
        let imgs = vec![random_image(16, 16, 2)];
        let (model, log) = train_codec(&imgs, &cfg, |_, _| {}).unwrap();
        assert_eq!(log.losses.len(), 2);
        let codec = Codec::Learned(model);
        let c = codec.to_container(&cfg);
        let (back, back_cfg) = Codec::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back_cfg, cfg);
        let z1 = codec.encode(&imgs[0], LatentRole::Uv).unwrap();
        let z2 = back.encode(&imgs[0], LatentRole::Uv).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1.shape(), (4, 2, 2));
        let d = back.decode(&z2, Semantics::Rgb).unwrap();
        assert_eq!((d.height, d.width), (16, 16));
    }

    #[test]
    fn learned_training_reduces_loss() {
        let cfg = CodecConfig { hidden: 16, res_blocks: 1, steps: 60, batch: 2, lr: 3e-3, ..Default::default() };
        let imgs: Vec<ImageGrid> = (0..4)
            .map(|k| ImageGrid::filled(16, 16, Semantics::Rgb, &[0.2 * k as f32, 0.5, 1.0 - 0.2 * k as f32]))
            .collect();
        let (_, log) = train_codec(&imgs, &cfg, |_, _| {}).unwrap();
        let first: f64 = log.losses[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = log.losses[55..].iter().sum::<f64>() / 5.0;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(train_codec(&[], &cfg, |_, _| {}).is_err());
    }

    proptest! {
        #[test]
        fn lossless_roundtrip_bit_exact(seed in any::<u64>(), bh in 1usize..3, bw in 1usize..3, mix in any::<bool>()) {
            let codec = Codec::Lossless(LosslessCodec::new(mix.then_some(seed)));
            let img = random_image(8 * bh, 8 * bw, seed);
            let z = codec.encode(&img, LatentRole::Uv).unwrap();
            prop_assert_eq!(codec.decode(&z, Semantics::Rgb).unwrap(), img);
        }
    }
}
