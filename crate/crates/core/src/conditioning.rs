//! Assembly of the denoiser input.
//!
//! Channel layout of `f_in`, all maps spatially concatenated along width
//! (left half = UV side, right half = reference side):
//!
//! ```text
//! [ noised | noise ]  C   channels   (UV latent ⊕ reference latent)
//! [ masked block   ]  C   channels   (masked-texture latent ⊕ reference latent)
//! [ position block ]  C   channels   (position latent ⊕ zeros)
//! [ mask           ]  1   channel    (downsampled UV mask ⊕ zeros)
//! ```

use uvpaint_nn::Tensor;

use crate::codec::{Codec, LatentRole, LatentTensor, FACTOR};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::{ImageGrid, Semantics};
use crate::synth::{Sample, TypeLabel, UV_FILL};

/// Everything one denoiser evaluation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// `(3C+1) × h × 2w`.
    pub f_in: Tensor,
    /// Training target, `C × h × 2w`; `None` at inference.
    pub epsilon_target: Option<Tensor>,
    pub t: usize,
    pub label: TypeLabel,
    /// Latent channel count `C`.
    pub latent_channels: usize,
}

impl ConditioningBundle {
    /// The four channel blocks `(x, masked, position, mask)`.
    pub fn blocks(&self) -> Vec<Tensor> {
        let c = self.latent_channels;
        self.f_in.split_channels(&[c, c, c, 1])
    }

    /// Width of one half.
    pub fn half_width(&self) -> usize {
        self.f_in.w / 2
    }
}

/// `a ⊕ b` along width; `a` lands on the left.
pub fn spatial_concat(a: &LatentTensor, b: &LatentTensor) -> Result<LatentTensor> {
    let (ca, ha, _) = a.shape();
    let (cb, hb, _) = b.shape();
    if ca != cb || ha != hb {
        return Err(Error::Shape(format!("cannot concat {:?} with {:?} along width", a.shape(), b.shape())));
    }
    Ok(LatentTensor { role: a.role, tensor: Tensor::concat_width(&a.tensor, &b.tensor) })
}

/// Nearest-neighbour downsampling at block centres. For even factors the
/// centre falls between texels; the lower-right one of the central four is
/// taken.
pub fn downsample_mask(mask: &ImageGrid, factor: usize) -> Result<Tensor> {
    if mask.semantics != Semantics::Mask {
        return Err(Error::Shape(format!("downsample_mask needs a mask, got {:?}", mask.semantics)));
    }
    if factor == 0 || mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::Shape(format!("{}x{} mask is not divisible by {factor}", mask.height, mask.width)));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut out = Tensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let v = mask.pixel(x * factor + factor / 2, y * factor + factor / 2)[0];
            out.data[y * w + x] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Known content: `texture` where `mask = 0`, the background fill where
/// `mask = 1` (the region to generate). Training and inference both build
/// the masked block this way, so the block never reveals the target.
pub fn masked_texture(texture: &ImageGrid, mask: &ImageGrid) -> Result<ImageGrid> {
    texture.composite(&complement(mask), &UV_FILL)
}

fn check_same_size(grids: &[(&str, &ImageGrid)]) -> Result<()> {
    let (n0, g0) = grids[0];
    for (n, g) in &grids[1..] {
        if !g.same_size(g0) {
            return Err(Error::Shape(format!(
                "{n} is {}x{} but {n0} is {}x{}",
                g.height, g.width, g0.height, g0.width
            )));
        }
    }
    Ok(())
}

/// Conditioning latents that do not depend on the noise draw. Computing
/// them once per sample lets training reuse codec work across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub z_uv: Tensor,
    pub f_ref: Tensor,
    pub z_masked: Tensor,
    pub f_pos: Tensor,
    /// `1 × h × w` at latent resolution.
    pub mask: Tensor,
    pub label: TypeLabel,
}

impl EncodedSample {
    pub fn latent_channels(&self) -> usize {
        self.z_uv.c
    }

    /// Shape of the noise / target tensor, `C × h × 2w`.
    pub fn noise_shape(&self) -> (usize, usize, usize) {
        (self.z_uv.c, self.z_uv.h, 2 * self.z_uv.w)
    }
}

/// Encodes the four maps of a training sample.
pub fn encode_sample(sample: &Sample, codec: &Codec) -> Result<EncodedSample> {
    check_same_size(&[
        ("uv_texture", &sample.uv_texture),
        ("uv_position", &sample.uv_position),
        ("uv_mask", &sample.uv_mask),
        ("reference_image", &sample.reference_image),
    ])?;
    let masked = masked_texture(&sample.uv_texture, &sample.uv_mask)?;
    Ok(EncodedSample {
        z_uv: codec.encode(&sample.uv_texture, LatentRole::Uv)?.tensor,
        f_ref: codec.encode(&sample.reference_image, LatentRole::Reference)?.tensor,
        z_masked: codec.encode(&masked, LatentRole::Masked)?.tensor,
        f_pos: codec.encode(&sample.uv_position, LatentRole::Position)?.tensor,
        mask: downsample_mask(&sample.uv_mask, FACTOR)?,
        label: sample.label,
    })
}

/// Stacks the conditioning blocks behind an already-formed `x` block.
fn stack(x: &Tensor, z_masked: &Tensor, f_ref: &Tensor, f_pos: &Tensor, mask: &Tensor) -> Tensor {
    let zeros_c = Tensor::zeros(f_pos.c, f_pos.h, f_pos.w);
    let zeros_1 = Tensor::zeros(1, mask.h, mask.w);
    let masked_block = Tensor::concat_width(z_masked, f_ref);
    let pos_block = Tensor::concat_width(f_pos, &zeros_c);
    let mask_block = Tensor::concat_width(mask, &zeros_1);
    Tensor::concat_channels(&[x, &masked_block, &pos_block, &mask_block])
}

/// Training bundle from pre-encoded latents.
pub fn assemble_from_encoded(
    enc: &EncodedSample,
    schedule: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
) -> Result<ConditioningBundle> {
    let clean = Tensor::concat_width(&enc.z_uv, &enc.f_ref);
    if eps.shape() != clean.shape() {
        return Err(Error::Shape(format!("noise {:?} does not match latent {:?}", eps.shape(), clean.shape())));
    }
    let x_t = schedule.add_noise(&clean, eps, t)?;
    Ok(ConditioningBundle {
        f_in: stack(&x_t, &enc.z_masked, &enc.f_ref, &enc.f_pos, &enc.mask),
        epsilon_target: Some(eps.clone()),
        t,
        label: enc.label,
        latent_channels: enc.latent_channels(),
    })
}

/// Training bundle: `x_t = AddNoise_t(Z_uv ⊕ F_ref)` followed by the
/// conditioning blocks.
pub fn assemble_train_input(
    sample: &Sample,
    codec: &Codec,
    schedule: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
) -> Result<ConditioningBundle> {
    assemble_from_encoded(&encode_sample(sample, codec)?, schedule, t, eps)
}

/// Inference-time conditioning that stays fixed over all sampling steps.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConditioning {
    pub z_masked: Tensor,
    pub f_ref: Tensor,
    pub f_pos: Tensor,
    pub mask: Tensor,
}

impl InferenceConditioning {
    /// `background_texture` carries the texels to keep: the background fill
    /// outside the charts and any preserved content inside. Texels under
    /// `uv_mask = 1` are replaced with the fill.
    pub fn new(
        reference: &ImageGrid,
        uv_position: &ImageGrid,
        uv_mask: &ImageGrid,
        background_texture: &ImageGrid,
        codec: &Codec,
    ) -> Result<Self> {
        check_same_size(&[
            ("uv_position", uv_position),
            ("uv_mask", uv_mask),
            ("background_texture", background_texture),
            ("reference", reference),
        ])?;
        let known = masked_texture(background_texture, uv_mask)?;
        Ok(Self {
            z_masked: codec.encode(&known, LatentRole::Masked)?.tensor,
            f_ref: codec.encode(reference, LatentRole::Reference)?.tensor,
            f_pos: codec.encode(uv_position, LatentRole::Position)?.tensor,
            mask: downsample_mask(uv_mask, FACTOR)?,
        })
    }

    /// Fresh garment: nothing preserved.
    pub fn fresh(reference: &ImageGrid, uv_position: &ImageGrid, uv_mask: &ImageGrid, codec: &Codec) -> Result<Self> {
        let bg = ImageGrid::filled(uv_mask.height, uv_mask.width, Semantics::Rgb, &UV_FILL);
        Self::new(reference, uv_position, uv_mask, &bg, codec)
    }

    pub fn noise_shape(&self) -> (usize, usize, usize) {
        (self.f_ref.c, self.f_ref.h, 2 * self.f_ref.w)
    }

    /// Bundle around the current iterate `x` (`C × h × 2w`).
    pub fn bundle(&self, x: &Tensor, t: usize, label: TypeLabel) -> Result<ConditioningBundle> {
        if x.shape() != self.noise_shape() {
            return Err(Error::Shape(format!("iterate {:?} does not match {:?}", x.shape(), self.noise_shape())));
        }
        Ok(ConditioningBundle {
            f_in: stack(x, &self.z_masked, &self.f_ref, &self.f_pos, &self.mask),
            epsilon_target: None,
            t,
            label,
            latent_channels: x.c,
        })
    }
}

fn complement(mask: &ImageGrid) -> ImageGrid {
    let data = mask.data.iter().map(|v| if *v >= 0.5 { 0.0 } else { 1.0 }).collect();
    ImageGrid { height: mask.height, width: mask.width, semantics: Semantics::Mask, data }
}

/// Inference bundle whose first block is the supplied noise `eta`.
pub fn assemble_infer_input(
    reference: &ImageGrid,
    uv_position: &ImageGrid,
    uv_mask: &ImageGrid,
    background_texture: &ImageGrid,
    codec: &Codec,
    eta: &Tensor,
    t: usize,
    label: TypeLabel,
) -> Result<ConditioningBundle> {
    InferenceConditioning::new(reference, uv_position, uv_mask, background_texture, codec)?.bundle(eta, t, label)
}
