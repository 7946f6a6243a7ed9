//! Reverse diffusion: DDIM (and DDPM as its `eta = 1`, full-ladder case)
//! from pure noise over both width-halves to a UV texture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uvpaint_nn::Tensor;

use crate::codec::{Codec, LatentRole, LatentTensor, FACTOR};
use crate::conditioning::{ConditioningBundle, InferenceConditioning};
use crate::diffusion::{standard_normal, Checkpoint, DenoiserNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, Semantics};
use crate::synth::{TypeLabel, UV_FILL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// 0 = deterministic DDIM.
    pub eta: f64,
    pub seed: u64,
    /// Ancestral sampling over every training timestep (`eta = 1`,
    /// `steps = T`); overrides `steps` and `eta`.
    pub ddpm: bool,
    /// Clamp each step's clean-latent estimate to `[-clip_x0, clip_x0]`
    /// (0 = off).
    pub clip_x0: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0, seed: 0, ddpm: false, clip_x0: 3.0 }
    }
}

impl SampleConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !self.ddpm && (self.steps == 0 || self.steps > schedule.timesteps()) {
            return Err(Error::Config(format!("steps must be in [1, {}], got {}", schedule.timesteps(), self.steps)));
        }
        if !(self.clip_x0 >= 0.0 && self.clip_x0.is_finite()) {
            return Err(Error::Config(format!("clip_x0 must be a finite non-negative number, got {}", self.clip_x0)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be a finite non-negative number, got {}", self.eta)));
        }
        Ok(())
    }

    /// `(steps, eta)` actually used.
    pub fn effective(&self, schedule: &NoiseSchedule) -> (usize, f64) {
        if self.ddpm {
            (schedule.timesteps(), 1.0)
        } else {
            (self.steps, self.eta)
        }
    }
}

/// Anything that predicts the noise in a bundle's first block.
pub trait EpsPredictor {
    fn predict(&self, bundle: &ConditioningBundle) -> Result<Tensor>;
}

impl EpsPredictor for DenoiserNet {
    fn predict(&self, bundle: &ConditioningBundle) -> Result<Tensor> {
        Ok(self.forward_bundle(bundle)?.0)
    }
}

/// Returns the exact noise that separates the current iterate from a known
/// clean latent.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Tensor,
    pub schedule: NoiseSchedule,
}

impl EpsPredictor for OracleDenoiser {
    fn predict(&self, b: &ConditioningBundle) -> Result<Tensor> {
        let x_t = &b.blocks()[0];
        if x_t.shape() != self.x0.shape() {
            return Err(Error::Shape(format!("oracle holds {:?}, iterate is {:?}", self.x0.shape(), x_t.shape())));
        }
        let ab = self.schedule.alpha_bar[b.t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        if s == 0.0 {
            return Ok(Tensor::zeros(x_t.c, x_t.h, x_t.w));
        }
        let data = x_t.data.iter().zip(&self.x0.data).map(|(x, x0)| ((*x as f64 - a * *x0 as f64) / s) as f32).collect();
        Ok(Tensor::from_vec(x_t.c, x_t.h, x_t.w, data))
    }
}

/// Descending timesteps `T = t_S > … > t_0 = 0` spaced evenly.
pub fn timestep_ladder(t_max: usize, steps: usize) -> Vec<usize> {
    (0..=steps).rev().map(|k| ((k * t_max) as f64 / steps as f64).round() as usize).collect()
}

/// One reverse update. `noise` is required when `eta > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t <= t_prev {
        return Err(Error::OutOfRange(format!("reverse step needs t > t_prev, got {t} -> {t_prev}")));
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("iterate {:?} vs prediction {:?}", x_t.shape(), eps_hat.shape())));
    }
    let ab = schedule.alpha_bar[t];
    let ab_prev = schedule.alpha_bar[t_prev];
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let z = match noise {
        Some(z) if z.shape() == x_t.shape() => Some(z),
        Some(z) => return Err(Error::Shape(format!("noise {:?} vs iterate {:?}", z.shape(), x_t.shape()))),
        None if sigma > 0.0 => return Err(Error::OutOfRange("stochastic step needs a noise tensor".into())),
        None => None,
    };
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Tensor::zeros(x_t.c, x_t.h, x_t.w);
    for i in 0..x_t.len() {
        let e = eps_hat.data[i] as f64;
        let x0 = (x_t.data[i] as f64 - s * e) / a;
        let mut v = ab_prev.sqrt() * x0 + dir * e;
        if let Some(z) = z {
            v += sigma * z.data[i] as f64;
        }
        out.data[i] = v as f32;
    }
    Ok(out)
}

/// Noise consistent with the clamped clean estimate, so the update moves
/// towards `clamp(x̂₀)` instead of `x̂₀`.
fn clip_estimate(x_t: &Tensor, eps: &Tensor, alpha_bar: f64, bound: f64) -> Tensor {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x_t
        .data
        .iter()
        .zip(&eps.data)
        .map(|(x, e)| {
            let x0 = ((*x as f64 - s * *e as f64) / a).clamp(-bound, bound);
            ((*x as f64 - a * x0) / s) as f32
        })
        .collect();
    Tensor::from_vec(x_t.c, x_t.h, x_t.w, data)
}

/// Runs the reverse process from seeded noise and returns the final
/// latent over both halves.
pub fn sample_latent(
    predictor: &dyn EpsPredictor,
    cond: &InferenceConditioning,
    label: TypeLabel,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let (steps, eta) = cfg.effective(schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = cond.noise_shape();
    let mut x = standard_normal(&mut rng, shape);
    let ladder = timestep_ladder(schedule.timesteps(), steps);
    for (k, pair) in ladder.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let mut eps = predictor.predict(&cond.bundle(&x, t, label)?)?;
        if cfg.clip_x0 > 0.0 {
            eps = clip_estimate(&x, &eps, schedule.alpha_bar[t], cfg.clip_x0);
        }
        let z = (eta > 0.0 && t_prev > 0).then(|| standard_normal(&mut rng, shape));
        x = ddim_step(&x, &eps, t, t_prev, schedule, eta, z.as_ref())?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("latent after sampling step {} (t = {t})", k + 1)));
        }
    }
    Ok(x)
}

/// Decodes the UV half and composites: generated texels under the mask,
/// the background fill elsewhere.
pub fn finish_texture(latent: &Tensor, uv_mask: &ImageGrid, codec: &Codec) -> Result<ImageGrid> {
    let half = latent.slice_width(0, latent.w / 2);
    let decoded = codec.decode(&LatentTensor::new(LatentRole::Uv, half)?, Semantics::Rgb)?.clamped();
    decoded.composite(uv_mask, &UV_FILL)
}

/// Texture for a fresh garment.
pub fn sample(
    reference: &ImageGrid,
    uv_position: &ImageGrid,
    uv_mask: &ImageGrid,
    label: TypeLabel,
    checkpoint: &Checkpoint,
    codec: &Codec,
    cfg: &SampleConfig,
) -> Result<ImageGrid> {
    let (lh, lw) = checkpoint.latent_hw;
    if uv_mask.height != lh * FACTOR || uv_mask.width != lw * FACTOR {
        return Err(Error::Shape(format!(
            "maps are {}x{} but the checkpoint was trained at {}x{}",
            uv_mask.height,
            uv_mask.width,
            lh * FACTOR,
            lw * FACTOR
        )));
    }
    if codec.channels() != checkpoint.net.latent_channels() {
        return Err(Error::Shape(format!(
            "codec has {} channels, checkpoint expects {}",
            codec.channels(),
            checkpoint.net.latent_channels()
        )));
    }
    let schedule = NoiseSchedule::new(checkpoint.schedule)?;
    let cond = InferenceConditioning::fresh(reference, uv_position, uv_mask, codec)?;
    let latent = sample_latent(&checkpoint.net, &cond, label, &schedule, cfg)?;
    finish_texture(&latent, uv_mask, codec)
}
