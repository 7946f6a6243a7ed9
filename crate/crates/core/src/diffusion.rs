//! Forward noising, the compact self-attention UNet that predicts noise,
//! and its training loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uvpaint_nn::act::{silu, silu_backward, silu_backward_slice, silu_slice};
use uvpaint_nn::{
    init_rng, sinusoidal_embedding, Adam, AttentionCache, Conv2d, ConvCache, GroupNorm, Linear, Module, Param,
    ResBlock, ResBlockCache, SelfAttention, Tensor,
};

use crate::conditioning::{assemble_from_encoded, ConditioningBundle, EncodedSample};
use crate::error::{Error, Result};
use crate::synth::TypeLabel;
use crate::tensor_file::{config_hash, Container};
use crate::type_select::{type_time_fuse_with, TypeEmbedCache, TypeEmbedder};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear β ramp over `t = 1..=T`; `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    /// `betas[t]` for `t = 1..=T`; `betas[0] = 0`.
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { timesteps: n, beta_start: b0, beta_end: b1 } = config;
        if n < 2 || !(0.0 < b0 && b0 < b1 && b1 < 1.0) {
            return Err(Error::Config(format!("schedule needs T >= 2 and 0 < beta_start < beta_end < 1, got {config:?}")));
        }
        let mut betas = vec![0.0; n + 1];
        let mut alpha_bar = vec![1.0; n + 1];
        for t in 1..=n {
            betas[t] = b0 + (b1 - b0) * (t - 1) as f64 / (n - 1) as f64;
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
        }
        Ok(Self { config, betas, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::OutOfRange(format!("timestep {t} outside [0, {}]", self.timesteps())));
        }
        Ok(())
    }

    /// `√ᾱ_t · x0 + √(1−ᾱ_t) · eps`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
        }
        let a = self.alpha_bar[t].sqrt();
        let s = (1.0 - self.alpha_bar[t]).sqrt();
        let data = x0.data.iter().zip(&eps.data).map(|(x, e)| (a * *x as f64 + s * *e as f64) as f32).collect();
        Ok(Tensor::from_vec(x0.c, x0.h, x0.w, data))
    }
}

/// Width and depth of the denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_width: usize,
    /// Width multiplier per resolution level, finest first.
    pub channel_mult: Vec<usize>,
    /// Number of coarsest levels carrying self-attention.
    pub attention_levels: usize,
    pub emb_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub type_frequencies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            channel_mult: vec![1, 2, 2],
            attention_levels: 2,
            emb_dim: 256,
            heads: 4,
            groups: 8,
            type_frequencies: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult needs at least one positive entry".into());
        }
        if self.attention_levels > self.channel_mult.len() {
            return bad(format!("attention_levels {} exceeds {} levels", self.attention_levels, self.channel_mult.len()));
        }
        if self.base_width == 0 || self.emb_dim == 0 || self.heads == 0 || self.groups == 0 {
            return bad("widths, heads and groups must be positive".into());
        }
        for m in &self.channel_mult {
            if (self.base_width * m) % self.heads != 0 {
                return bad(format!("width {} is not divisible into {} heads", self.base_width * m, self.heads));
            }
        }
        if self.type_frequencies < 2 {
            return bad("type_frequencies must be >= 2".into());
        }
        Ok(())
    }

    /// Spatial size must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// Everything that fixes the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub latent_channels: usize,
    pub model: ModelConfig,
    pub use_position_map: bool,
    pub use_type_module: bool,
    pub init_seed: u64,
}

#[derive(Clone, Debug)]
struct DownLevel {
    res: ResBlock,
    attn: Option<SelfAttention>,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    res: ResBlock,
    attn: Option<SelfAttention>,
    up: Option<Conv2d>,
}

/// UNet over `(3C+1) × h × 2w` inputs predicting `C × h × 2w` noise.
/// Conditioning enters only through the input channels and the fused
/// time/class embedding; there is no cross-attention.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub spec: NetSpec,
    time1: Linear,
    time2: Linear,
    type_emb: Option<TypeEmbedder>,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: SelfAttention,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

struct LevelCache {
    res: ResBlockCache,
    attn: Option<AttentionCache>,
    resample: Option<ConvCache>,
    /// Channels of the upsampling path before the skip was appended.
    split: usize,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    t_feat: Vec<f32>,
    t_pre: Vec<f32>,
    t_act: Vec<f32>,
    type_cache: Option<TypeEmbedCache>,
    f_cls: Vec<f32>,
    emb: Vec<f32>,
    conv_in: ConvCache,
    down: Vec<LevelCache>,
    mid1: ResBlockCache,
    mid_attn: AttentionCache,
    mid2: ResBlockCache,
    up: Vec<LevelCache>,
    out_norm: uvpaint_nn::norm::GroupNormCache,
    out_pre: Tensor,
    conv_out: ConvCache,
}

/// Row-stochastic attention of one layer, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub name: String,
    pub h: usize,
    pub w: usize,
    /// `N × N` query-major, `N = h·w`.
    pub probs: Vec<f32>,
}

impl AttentionMap {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn cross_half_mass(&self) -> f64 {
        cross_half_mass(&self.probs, self.h, self.w)
    }

    /// Row of query `(y, x)`.
    pub fn row(&self, y: usize, x: usize) -> &[f32] {
        let n = self.tokens();
        &self.probs[(y * self.w + x) * n..][..n]
    }
}

/// Mean over left-half (UV) queries of the attention weight on right-half
/// (reference) keys, for row-major tokens on an `h × w` grid.
pub fn cross_half_mass(probs: &[f32], h: usize, w: usize) -> f64 {
    let n = h * w;
    assert_eq!(probs.len(), n * n, "attention matrix size");
    let half = w / 2;
    let mut total = 0.0;
    let mut queries = 0;
    for y in 0..h {
        for x in 0..half {
            let row = &probs[(y * w + x) * n..][..n];
            total += (0..n).filter(|k| k % w >= half).map(|k| row[k] as f64).sum::<f64>();
            queries += 1;
        }
    }
    total / queries.max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    /// Every attention layer in forward order; the deepest is `layers[deepest]`.
    pub layers: Vec<AttentionMap>,
    pub deepest: usize,
    /// Cross-half mass of the deepest layer.
    pub cross_half_mass: f64,
}

impl DenoiserNet {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.model.validate()?;
        if spec.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be positive".into()));
        }
        let m = &spec.model;
        let mut rng = init_rng(spec.init_seed);
        let widths: Vec<usize> = m.channel_mult.iter().map(|k| m.base_width * k).collect();
        let levels = widths.len();
        let attn_from = levels - m.attention_levels;
        let cin = 3 * spec.latent_channels + 1;
        let d = m.emb_dim;

        let time1 = Linear::new(m.base_width, d, &mut rng);
        let time2 = Linear::new(d, d, &mut rng);
        let type_emb = if spec.use_type_module { Some(TypeEmbedder::new(m.type_frequencies, d, &mut rng)?) } else { None };
        let conv_in = Conv2d::new(cin, widths[0], 3, 1, &mut rng);
        let mut down = Vec::new();
        let mut ch = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let res = ResBlock::new(ch, w, d, m.groups, &mut rng);
            let attn = (l >= attn_from).then(|| SelfAttention::new(w, m.heads, m.groups, &mut rng));
            let dn = (l + 1 < levels).then(|| Conv2d::new(w, w, 3, 2, &mut rng));
            down.push(DownLevel { res, attn, down: dn });
            ch = w;
        }
        let mid1 = ResBlock::new(ch, ch, d, m.groups, &mut rng);
        let mid_attn = SelfAttention::new(ch, m.heads, m.groups, &mut rng);
        let mid2 = ResBlock::new(ch, ch, d, m.groups, &mut rng);
        let mut up: Vec<Option<UpLevel>> = (0..levels).map(|_| None).collect();
        for l in (0..levels).rev() {
            let w = widths[l];
            let res = ResBlock::new(ch + w, w, d, m.groups, &mut rng);
            let attn = (l >= attn_from).then(|| SelfAttention::new(w, m.heads, m.groups, &mut rng));
            let upc = (l > 0).then(|| Conv2d::new(w, w, 3, 1, &mut rng));
            up[l] = Some(UpLevel { res, attn, up: upc });
            ch = w;
        }
        let up = up.into_iter().map(|u| u.expect("every level built")).collect();
        let norm_out = GroupNorm::fitting(m.groups, widths[0]);
        let conv_out = Conv2d::new(widths[0], spec.latent_channels, 3, 1, &mut rng).zero_init();
        Ok(Self { spec, time1, time2, type_emb, conv_in, down, mid1, mid_attn, mid2, up, norm_out, conv_out })
    }

    pub fn latent_channels(&self) -> usize {
        self.spec.latent_channels
    }

    pub fn input_channels(&self) -> usize {
        3 * self.spec.latent_channels + 1
    }

    /// `T_emb` of timestep `t`.
    pub fn time_embedding(&self, t: usize) -> Vec<f32> {
        let feat = sinusoidal_embedding(t as f32, self.spec.model.base_width, 10_000.0);
        self.time2.forward(&silu_slice(&self.time1.forward(&feat)))
    }

    /// The embedding every residual block receives before its activation:
    /// `F_cls` with the type module, `T_emb` without.
    pub fn conditioning_embedding(&self, t: usize, label: TypeLabel) -> Vec<f32> {
        let t_emb = self.time_embedding(t);
        match &self.type_emb {
            Some(te) => type_time_fuse_with(&te.forward(label).0, &t_emb),
            None => t_emb,
        }
    }

    pub fn type_embedder(&self) -> Option<&TypeEmbedder> {
        self.type_emb.as_ref()
    }

    fn check_input(&self, f_in: &Tensor) -> Result<()> {
        let div = self.spec.model.size_divisor();
        if f_in.c != self.input_channels() {
            return Err(Error::Shape(format!("denoiser takes {} channels, got {}", self.input_channels(), f_in.c)));
        }
        if f_in.h % div != 0 || f_in.w % div != 0 || f_in.w % 2 != 0 {
            return Err(Error::Shape(format!("{}x{} input is not divisible by {div}", f_in.h, f_in.w)));
        }
        Ok(())
    }

    /// Predicted noise for one input.
    pub fn forward(&self, f_in: &Tensor, t: usize, label: TypeLabel) -> Result<(Tensor, ForwardCache)> {
        self.check_input(f_in)?;
        let c = self.spec.latent_channels;
        let mut x = f_in.clone();
        if !self.spec.use_position_map {
            let plane = x.plane();
            x.data[2 * c * plane..3 * c * plane].iter_mut().for_each(|v| *v = 0.0);
        }

        let t_feat = sinusoidal_embedding(t as f32, self.spec.model.base_width, 10_000.0);
        let t_pre = self.time1.forward(&t_feat);
        let t_act = silu_slice(&t_pre);
        let t_emb = self.time2.forward(&t_act);
        let (f_cls, type_cache) = match &self.type_emb {
            Some(te) => {
                let (e, cache) = te.forward(label);
                (type_time_fuse_with(&e, &t_emb), Some(cache))
            }
            None => (t_emb, None),
        };
        let emb = silu_slice(&f_cls);

        let (mut h, conv_in) = self.conv_in.forward(&x);
        let mut skips = Vec::with_capacity(self.down.len());
        let mut down = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            let (y, res) = lvl.res.forward(&h, &emb);
            h = y;
            let attn = lvl.attn.as_ref().map(|a| {
                let (y, cache) = a.forward(&h);
                h = y;
                cache
            });
            skips.push(h.clone());
            let resample = lvl.down.as_ref().map(|d| {
                let (y, cache) = d.forward(&h);
                h = y;
                cache
            });
            down.push(LevelCache { res, attn, resample, split: 0 });
        }
        let (y, mid1) = self.mid1.forward(&h, &emb);
        let (y, mid_attn) = self.mid_attn.forward(&y);
        let (mut h, mid2) = self.mid2.forward(&y, &emb);

        let mut up: Vec<Option<LevelCache>> = (0..self.up.len()).map(|_| None).collect();
        for l in (0..self.up.len()).rev() {
            let lvl = &self.up[l];
            let split = h.c;
            let cat = Tensor::concat_channels(&[&h, &skips[l]]);
            let (y, res) = lvl.res.forward(&cat, &emb);
            h = y;
            let attn = lvl.attn.as_ref().map(|a| {
                let (y, cache) = a.forward(&h);
                h = y;
                cache
            });
            let resample = lvl.up.as_ref().map(|u| {
                let (y, cache) = u.forward(&h.upsample2());
                h = y;
                cache
            });
            up[l] = Some(LevelCache { res, attn, resample, split });
        }
        let up = up.into_iter().map(|u| u.expect("every level ran")).collect();
        let (out_pre, out_norm) = self.norm_out.forward(&h);
        let (out, conv_out) = self.conv_out.forward(&silu(&out_pre));
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("denoiser output at t = {t}")));
        }
        let cache = ForwardCache {
            t_feat,
            t_pre,
            t_act,
            type_cache,
            f_cls,
            emb,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            out_norm,
            out_pre,
            conv_out,
        };
        Ok((out, cache))
    }

    pub fn forward_bundle(&self, b: &ConditioningBundle) -> Result<(Tensor, ForwardCache)> {
        if b.latent_channels != self.spec.latent_channels {
            return Err(Error::Shape(format!(
                "bundle has C = {}, net expects {}",
                b.latent_channels, self.spec.latent_channels
            )));
        }
        self.forward(&b.f_in, b.t, b.label)
    }

    /// Accumulates parameter gradients for `d_out = dL/d(eps_hat)`.
    pub fn backward(&mut self, cache: &ForwardCache, d_out: &Tensor) {
        let mut d_emb = vec![0.0f32; cache.emb.len()];
        let mut add_emb = |d: Vec<f32>| d_emb.iter_mut().zip(d).for_each(|(a, b)| *a += b);

        let d_act = self.conv_out.backward(&cache.conv_out, d_out);
        let d_pre = silu_backward(&cache.out_pre, &d_act);
        let mut dh = self.norm_out.backward(&cache.out_norm, &d_pre);

        let mut d_skips: Vec<Option<Tensor>> = (0..self.up.len()).map(|_| None).collect();
        for l in 0..self.up.len() {
            let lvl = &mut self.up[l];
            let lc = &cache.up[l];
            if let (Some(u), Some(rc)) = (&mut lvl.up, &lc.resample) {
                dh = u.backward(rc, &dh).upsample2_backward();
            }
            if let (Some(a), Some(ac)) = (&mut lvl.attn, &lc.attn) {
                dh = a.backward(ac, &dh);
            }
            let (d_cat, de) = lvl.res.backward(&lc.res, &cache.emb, &dh);
            add_emb(de);
            let mut parts = d_cat.split_channels(&[lc.split, d_cat.c - lc.split]).into_iter();
            dh = parts.next().expect("two parts");
            d_skips[l] = parts.next();
        }

        let (dy, de) = self.mid2.backward(&cache.mid2, &cache.emb, &dh);
        add_emb(de);
        let dy = self.mid_attn.backward(&cache.mid_attn, &dy);
        let (mut dh, de) = self.mid1.backward(&cache.mid1, &cache.emb, &dy);
        add_emb(de);

        for l in (0..self.down.len()).rev() {
            let lvl = &mut self.down[l];
            let lc = &cache.down[l];
            if let (Some(d), Some(rc)) = (&mut lvl.down, &lc.resample) {
                dh = d.backward(rc, &dh);
            }
            dh.add_assign(d_skips[l].as_ref().expect("skip gradient"));
            if let (Some(a), Some(ac)) = (&mut lvl.attn, &lc.attn) {
                dh = a.backward(ac, &dh);
            }
            let (dx, de) = lvl.res.backward(&lc.res, &cache.emb, &dh);
            add_emb(de);
            dh = dx;
        }
        self.conv_in.backward(&cache.conv_in, &dh);

        let d_fcls = silu_backward_slice(&cache.f_cls, &d_emb);
        if let (Some(te), Some(tc)) = (&mut self.type_emb, &cache.type_cache) {
            te.backward(tc, &d_fcls);
        }
        let d_tact = self.time2.backward(&cache.t_act, &d_fcls);
        let d_tpre = silu_backward_slice(&cache.t_pre, &d_tact);
        self.time1.backward(&cache.t_feat, &d_tpre);
    }

    /// Mean squared error against the bundle's target; accumulates
    /// gradients scaled by `weight` (e.g. `1 / batch`).
    pub fn loss_and_backward(&mut self, b: &ConditioningBundle, weight: f64) -> Result<f64> {
        let target = b.epsilon_target.as_ref().ok_or_else(|| Error::Shape("bundle has no training target".into()))?;
        let (pred, cache) = self.forward_bundle(b)?;
        let (loss, grad) = mse_and_grad(&pred, target, weight);
        self.backward(&cache, &grad);
        Ok(loss)
    }

    /// Every attention layer's head-averaged map, in forward order.
    pub fn extract_attention(&self, f_in: &Tensor, t: usize, label: TypeLabel) -> Result<AttentionReport> {
        let (_, cache) = self.forward(f_in, t, label)?;
        let mut layers = Vec::new();
        let mut h = f_in.h;
        let mut w = f_in.w;
        let map = |name: String, ac: &AttentionCache, h: usize, w: usize| AttentionMap {
            name,
            h,
            w,
            probs: ac.mean_over_heads(),
        };
        for (l, lc) in cache.down.iter().enumerate() {
            if let Some(ac) = &lc.attn {
                layers.push(map(format!("down.{l}.attn"), ac, h, w));
            }
            if lc.resample.is_some() {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        let deepest = layers.len();
        layers.push(map("mid.attn".into(), &cache.mid_attn, h, w));
        for l in (0..cache.up.len()).rev() {
            let lc = &cache.up[l];
            if let Some(ac) = &lc.attn {
                layers.push(map(format!("up.{l}.attn"), ac, h, w));
            }
            if lc.resample.is_some() {
                h *= 2;
                w *= 2;
            }
        }
        let cross = layers[deepest].cross_half_mass();
        Ok(AttentionReport { layers, deepest, cross_half_mass: cross })
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(meta);
        c.push_module("", self);
        c
    }

    pub fn restore(spec: NetSpec, c: &Container) -> Result<Self> {
        let mut net = Self::new(spec)?;
        c.restore_module("", &mut net)?;
        Ok(net)
    }
}

/// `(mean (a−b)², weight · 2(a−b)/N)`.
pub fn mse_and_grad(pred: &Tensor, target: &Tensor, weight: f64) -> (f64, Tensor) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut g = Tensor::zeros(pred.c, pred.h, pred.w);
    for i in 0..pred.len() {
        let d = pred.data[i] as f64 - target.data[i] as f64;
        loss += d * d;
        g.data[i] = (weight * 2.0 * d / n) as f32;
    }
    (loss / n, g)
}

impl Module for DenoiserNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.time1.visit(&p("time1"), f);
        self.time2.visit(&p("time2"), f);
        if let Some(te) = &self.type_emb {
            te.visit(&p("type"), f);
        }
        self.conv_in.visit(&p("conv_in"), f);
        for (l, lvl) in self.down.iter().enumerate() {
            lvl.res.visit(&p(&format!("down.{l}.res")), f);
            if let Some(a) = &lvl.attn {
                a.visit(&p(&format!("down.{l}.attn")), f);
            }
            if let Some(d) = &lvl.down {
                d.visit(&p(&format!("down.{l}.resample")), f);
            }
        }
        self.mid1.visit(&p("mid.res1"), f);
        self.mid_attn.visit(&p("mid.attn"), f);
        self.mid2.visit(&p("mid.res2"), f);
        for (l, lvl) in self.up.iter().enumerate() {
            lvl.res.visit(&p(&format!("up.{l}.res")), f);
            if let Some(a) = &lvl.attn {
                a.visit(&p(&format!("up.{l}.attn")), f);
            }
            if let Some(u) = &lvl.up {
                u.visit(&p(&format!("up.{l}.resample")), f);
            }
        }
        self.norm_out.visit(&p("norm_out"), f);
        self.conv_out.visit(&p("conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.time1.visit_mut(&p("time1"), f);
        self.time2.visit_mut(&p("time2"), f);
        if let Some(te) = &mut self.type_emb {
            te.visit_mut(&p("type"), f);
        }
        self.conv_in.visit_mut(&p("conv_in"), f);
        for (l, lvl) in self.down.iter_mut().enumerate() {
            lvl.res.visit_mut(&p(&format!("down.{l}.res")), f);
            if let Some(a) = &mut lvl.attn {
                a.visit_mut(&p(&format!("down.{l}.attn")), f);
            }
            if let Some(d) = &mut lvl.down {
                d.visit_mut(&p(&format!("down.{l}.resample")), f);
            }
        }
        self.mid1.visit_mut(&p("mid.res1"), f);
        self.mid_attn.visit_mut(&p("mid.attn"), f);
        self.mid2.visit_mut(&p("mid.res2"), f);
        for (l, lvl) in self.up.iter_mut().enumerate() {
            lvl.res.visit_mut(&p(&format!("up.{l}.res")), f);
            if let Some(a) = &mut lvl.attn {
                a.visit_mut(&p(&format!("up.{l}.attn")), f);
            }
            if let Some(u) = &mut lvl.up {
                u.visit_mut(&p(&format!("up.{l}.resample")), f);
            }
        }
        self.norm_out.visit_mut(&p("norm_out"), f);
        self.conv_out.visit_mut(&p("conv_out"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Constant learning rate.
    pub lr: f32,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub schedule: ScheduleConfig,
    pub use_position_map: bool,
    pub use_type_module: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            steps: 20_000,
            batch: 8,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 0,
            schedule: ScheduleConfig::default(),
            use_position_map: true,
            use_type_module: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.steps == 0 || self.batch == 0 || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr, steps, batch and grad_clip must be positive".into()));
        }
        NoiseSchedule::new(self.schedule)?;
        Ok(())
    }

    pub fn net_spec(&self, latent_channels: usize, model: &ModelConfig) -> NetSpec {
        NetSpec {
            latent_channels,
            model: model.clone(),
            use_position_map: self.use_position_map,
            use_type_module: self.use_type_module,
            init_seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean of the `window` losses ending at `step` (1-based).
    pub fn smoothed(&self, step: usize, window: usize) -> f64 {
        let end = step.min(self.losses.len());
        let start = end.saturating_sub(window.max(1));
        let s = &self.losses[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Noise tensor of the given shape from a standard normal source.
pub fn standard_normal(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = shape;
    let data = (0..c * h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(c, h, w, data)
}

fn gather_grads(net: &DenoiserNet) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    net.visit("", &mut |_, p| out.push(p.grad.clone()));
    out
}

/// Trains on pre-encoded samples. `progress(step, loss, net)` runs after
/// every optimizer step (1-based) and may abort by returning an error.
///
/// Each step draws `batch` (sample, t, eps) triples from one seeded stream,
/// so the run is a pure function of the data and config. With more than one
/// rayon thread the per-sample gradients are computed in parallel and summed
/// in batch order.
pub fn train_encoded(
    data: &[EncodedSample],
    cfg: &TrainConfig,
    model: &ModelConfig,
    mut progress: impl FnMut(usize, f64, &DenoiserNet) -> Result<()>,
) -> Result<(DenoiserNet, TrainLog)> {
    cfg.validate()?;
    model.validate()?;
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let shape = first.noise_shape();
    if let Some(bad) = data.iter().find(|e| e.noise_shape() != shape) {
        return Err(Error::Shape(format!("latents {:?} and {:?} in one dataset", shape, bad.noise_shape())));
    }
    let schedule = NoiseSchedule::new(cfg.schedule)?;
    let mut net = DenoiserNet::new(cfg.net_spec(first.latent_channels(), model))?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11_D1FF);
    let mut log = TrainLog::default();
    let weight = 1.0 / cfg.batch as f64;
    let parallel = rayon::current_num_threads() > 1 && cfg.batch > 1;

    for step in 1..=cfg.steps {
        let mut bundles = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..data.len());
            let t = rng.gen_range(1..=schedule.timesteps());
            let eps = standard_normal(&mut rng, shape);
            bundles.push(assemble_from_encoded(&data[i], &schedule, t, &eps)?);
        }
        let loss = if parallel {
            let base = &net;
            let parts: Vec<Result<(f64, Vec<Vec<f32>>)>> = bundles
                .par_iter()
                .map(|b| {
                    let mut local = base.clone();
                    local.zero_grad();
                    let l = local.loss_and_backward(b, weight)?;
                    Ok((l, gather_grads(&local)))
                })
                .collect();
            let mut total = 0.0;
            for part in parts {
                let (l, grads) = part?;
                total += l;
                let mut k = 0;
                net.visit_mut("", &mut |_, p| {
                    p.grad.iter_mut().zip(&grads[k]).for_each(|(a, b)| *a += b);
                    k += 1;
                });
            }
            total
        } else {
            let mut total = 0.0;
            for b in &bundles {
                total += net.loss_and_backward(b, weight)?;
            }
            total
        };
        let loss = loss * weight;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let norm = net.clip_grad_norm(cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {step}")));
        }
        opt.step(&mut net);
        log.losses.push(loss);
        progress(step, loss, &net)?;
    }
    Ok((net, log))
}

pub const DENOISER_KIND: &str = "uvpaint-denoiser";

/// A trained denoiser plus what is needed to use it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: DenoiserNet,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub step: usize,
    /// Latent height and single-half width the net was trained on.
    pub latent_hw: (usize, usize),
    /// Content hash of the codec the latents came from.
    pub codec_hash: String,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": DENOISER_KIND,
            "net": self.net.spec,
            "schedule": self.schedule,
            "train": self.train,
            "config_hash": config_hash(&self.train),
            "step": self.step,
            "latent_hw": [self.latent_hw.0, self.latent_hw.1],
            "codec_hash": self.codec_hash,
        });
        self.net.to_container(meta)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = &c.meta;
        if m.get("kind").and_then(|k| k.as_str()) != Some(DENOISER_KIND) {
            return Err(Error::Format("not a denoiser checkpoint".into()));
        }
        let field = |k: &str| m.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks '{k}'")));
        let parse = |e: serde_json::Error| Error::Format(format!("checkpoint metadata: {e}"));
        let spec: NetSpec = serde_json::from_value(field("net")?).map_err(parse)?;
        let schedule: ScheduleConfig = serde_json::from_value(field("schedule")?).map_err(parse)?;
        let train: TrainConfig = serde_json::from_value(field("train")?).map_err(parse)?;
        let step: usize = serde_json::from_value(field("step")?).map_err(parse)?;
        let hw: [usize; 2] = serde_json::from_value(field("latent_hw")?).map_err(parse)?;
        let codec_hash: String = serde_json::from_value(field("codec_hash")?).map_err(parse)?;
        Ok(Self { net: DenoiserNet::restore(spec, c)?, schedule, train, step, latent_hw: (hw[0], hw[1]), codec_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
