//! Procedural garments, texture fields and training tuples.
//!
//! Garments are open elliptic tubes in a character frame (y up, viewer on
//! `+z`). Every tube is cut along `z = 0` into a front and a back half, each
//! its own uv chart, so every tube contributes two seams. Charts occupy
//! rectangles of whole 8×8-texel blocks, which keeps chart borders on latent
//! cell borders at any resolution divisible by 64.
//!
//! Textures are functions of the garment's normalised 3-D position, so the
//! baked ground truth agrees with itself across every seam.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{load_obj, normalize_mesh, save_obj, Face, Mesh, NormalizeTransform};
use crate::image::{ImageGrid, Semantics};
use crate::raster::{bake_position_map, render_scene, Camera, RenderItem, View};
use crate::tensor_file::{load_image, save_image};

/// Colour of uv texels outside every chart.
pub const UV_FILL: [f32; 3] = [0.5, 0.5, 0.5];
/// Backdrop of reference images.
pub const REFERENCE_BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];
pub const SKIN: [f32; 3] = [0.93, 0.78, 0.66];
/// Half-width of the screen window used for reference renders.
pub const REFERENCE_EXTENT: f64 = 1.1;
/// Radius multiplier for the distractor garment.
pub const DISTRACTOR_SHRINK: f64 = 0.92;
/// Reference renders draw the labelled garment over everything else.
const TARGET_DEPTH_BIAS: f32 = 4.0;
/// Cross-section depth relative to width.
const TUBE_DEPTH: f64 = 0.7;

/// Distinct garment colours; none is close to the fill, the backdrop or skin.
pub const PALETTE: [[f32; 3]; 12] = [
    [0.85, 0.15, 0.15],
    [0.95, 0.55, 0.10],
    [0.95, 0.85, 0.20],
    [0.55, 0.85, 0.20],
    [0.10, 0.55, 0.25],
    [0.10, 0.65, 0.65],
    [0.35, 0.70, 0.95],
    [0.15, 0.25, 0.80],
    [0.50, 0.20, 0.70],
    [0.85, 0.25, 0.65],
    [0.45, 0.28, 0.15],
    [0.10, 0.10, 0.15],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeLabel {
    Top,
    Bottom,
    Onepiece,
}

impl TypeLabel {
    pub const ALL: [TypeLabel; 3] = [TypeLabel::Top, TypeLabel::Bottom, TypeLabel::Onepiece];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::OutOfRange(format!("type index {i} not in 0..3")))
    }

    pub fn one_hot(self) -> [f32; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    /// Inverse of [`one_hot`](Self::one_hot); anything but exactly one 1.0
    /// among zeros is rejected.
    pub fn from_one_hot(v: &[f32]) -> Result<Self> {
        let ones: Vec<usize> = v.iter().enumerate().filter(|(_, x)| **x == 1.0).map(|(i, _)| i).collect();
        if v.len() != 3 || ones.len() != 1 || v.iter().any(|x| *x != 0.0 && *x != 1.0) {
            return Err(Error::OutOfRange(format!("{v:?} is not a one-hot 3-vector")));
        }
        Self::from_index(ones[0])
    }

    pub fn name(self) -> &'static str {
        match self {
            TypeLabel::Top => "top",
            TypeLabel::Bottom => "bottom",
            TypeLabel::Onepiece => "onepiece",
        }
    }
}

impl std::str::FromStr for TypeLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" | "0" => Ok(TypeLabel::Top),
            "bottom" | "1" => Ok(TypeLabel::Bottom),
            "onepiece" | "2" => Ok(TypeLabel::Onepiece),
            _ => Err(Error::Usage(format!("unknown garment type '{s}' (top | bottom | onepiece)"))),
        }
    }
}

impl std::fmt::Display for TypeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Solid,
    Stripes,
    Checker,
    Gradient,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Solid, Style::Stripes, Style::Checker, Style::Gradient];
}

/// A colour as a function of normalised 3-D position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureField {
    pub style: Style,
    pub palette: Vec<[f32; 3]>,
    /// Full repeat length in normalised units; stripes and cells are half of it.
    pub period: f64,
    pub axis: usize,
    pub phase: [f64; 3],
    /// Half-width of the blend band around colour boundaries, normalised
    /// units; 0 gives hard edges.
    #[serde(default)]
    pub softness: f64,
}

pub const PERIOD_RANGE: (f64, f64) = (0.8, 1.4);
/// Blend half-width as a fraction of the stripe/cell size. Boundaries then
/// ramp over roughly one latent block at 64×64, which a 4-channel 8× codec
/// can represent.
pub const SOFTNESS_FRACTION: f64 = 0.3;

/// Soft square wave in `[-1, 1]`: sign `(-1)^floor(t)`, ramping through 0 at
/// integer `t` over a half-width `hw` (in units of `t`).
fn soft_square(t: f64, hw: f64) -> f64 {
    let i = t.floor();
    let f = t - i;
    let sign = if (i as i64).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    if hw <= 0.0 {
        return sign;
    }
    let x = (f.min(1.0 - f) / hw).min(1.0);
    sign * (0.5 * PI * x).sin()
}

/// Linear blend that returns the endpoints exactly at `w = 0` and `w = 1`.
fn mix(a: [f32; 3], b: [f32; 3], w: f64) -> [f32; 3] {
    if w <= 0.0 {
        return a;
    }
    if w >= 1.0 {
        return b;
    }
    let w = w as f32;
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * w)
}

/// Builds a field with seeded period, axis and phase. The checker phase on
/// `z` is fixed so `z = 0` (where tubes are cut) is mid-cell.
pub fn make_texture_field(style: Style, palette: &[[f32; 3]], seed: u64) -> Result<TextureField> {
    if palette.is_empty() || palette.len() > 4 {
        return Err(Error::OutOfRange(format!("palette needs 1-4 colours, got {}", palette.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.gen_range(PERIOD_RANGE.0..PERIOD_RANGE.1);
    let axis = if rng.gen_bool(0.5) { 0 } else { 1 };
    let cell = period / 2.0;
    let phase = [rng.gen_range(0.0..cell), rng.gen_range(0.0..cell), cell / 2.0];
    Ok(TextureField { style, palette: palette.to_vec(), period, axis, phase, softness: SOFTNESS_FRACTION * cell })
}

impl TextureField {
    pub fn solid(color: [f32; 3]) -> Self {
        TextureField { style: Style::Solid, palette: vec![color], period: 1.0, axis: 0, phase: [0.0; 3], softness: 0.0 }
    }

    /// Stripes cycle through the palette; the checker alternates between
    /// its first two colours.
    pub fn eval(&self, p: [f64; 3]) -> [f32; 3] {
        let n = self.palette.len() as i64;
        let cell = self.period / 2.0;
        let hw = self.softness / cell;
        let pick = |i: i64| self.palette[i.rem_euclid(n) as usize];
        match self.style {
            Style::Solid => self.palette[0],
            Style::Stripes => {
                let t = (p[self.axis] + self.phase[self.axis]) / cell;
                let i = t.floor() as i64;
                let f = t - t.floor();
                if hw > 0.0 && f < hw {
                    mix(pick(i - 1), pick(i), 0.5 + 0.5 * (0.5 * PI * f / hw).sin())
                } else if hw > 0.0 && 1.0 - f < hw {
                    mix(pick(i + 1), pick(i), 0.5 + 0.5 * (0.5 * PI * (1.0 - f) / hw).sin())
                } else {
                    pick(i)
                }
            }
            Style::Checker => {
                let s: f64 = (0..3).map(|d| soft_square((p[d] + self.phase[d]) / cell, hw)).product();
                mix(pick(1), pick(0), 0.5 * (1.0 + s))
            }
            Style::Gradient => {
                let a = self.palette[0];
                let b = *self.palette.last().expect("non-empty palette");
                mix(a, b, (0.5 * (p[self.axis] + 1.0)).clamp(0.0, 1.0))
            }
        }
    }

    /// Bakes the field into uv space: `field(position)` inside the mask,
    /// [`UV_FILL`] outside.
    pub fn bake(&self, position: &ImageGrid, mask: &ImageGrid) -> ImageGrid {
        let mut out = ImageGrid::filled(position.height, position.width, Semantics::Rgb, &UV_FILL);
        for i in 0..mask.data.len() {
            if mask.data[i] == 1.0 {
                let p = &position.data[i * 3..i * 3 + 3];
                let c = self.eval([p[0] as f64, p[1] as f64, p[2] as f64]);
                out.data[i * 3..i * 3 + 3].copy_from_slice(&c);
            }
        }
        out
    }
}

/// Shape knobs shared by every garment and the body of one character.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentParams {
    /// Radius multiplier, in `[0.85, 1.15]`.
    pub girth: f64,
    /// Limb and skirt length multiplier, in `[0.85, 1.15]`.
    pub length: f64,
    /// Sleeve angle away from straight down, radians in `[0.25, 0.75]`.
    pub arm_angle: f64,
    /// Leg angle away from straight down, radians in `[0.03, 0.2]`.
    pub leg_angle: f64,
}

impl Default for GarmentParams {
    fn default() -> Self {
        Self { girth: 1.0, length: 1.0, arm_angle: 0.5, leg_angle: 0.1 }
    }
}

impl GarmentParams {
    pub const GIRTH: (f64, f64) = (0.85, 1.15);
    pub const LENGTH: (f64, f64) = (0.85, 1.15);
    pub const ARM_ANGLE: (f64, f64) = (0.25, 0.75);
    pub const LEG_ANGLE: (f64, f64) = (0.03, 0.2);

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("girth", self.girth, Self::GIRTH),
            ("length", self.length, Self::LENGTH),
            ("arm_angle", self.arm_angle, Self::ARM_ANGLE),
            ("leg_angle", self.leg_angle, Self::LEG_ANGLE),
        ];
        for (name, v, (lo, hi)) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::OutOfRange(format!("garment parameter {name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            girth: rng.gen_range(Self::GIRTH.0..=Self::GIRTH.1),
            length: rng.gen_range(Self::LENGTH.0..=Self::LENGTH.1),
            arm_angle: rng.gen_range(Self::ARM_ANGLE.0..=Self::ARM_ANGLE.1),
            leg_angle: rng.gen_range(Self::LEG_ANGLE.0..=Self::LEG_ANGLE.1),
        }
    }
}

/// Axis-aligned uv rectangle in units of 1/8.
#[derive(Clone, Copy, Debug)]
struct Slot {
    u: (u32, u32),
    v: (u32, u32),
}

const BIG_SLOTS: [Slot; 2] = [Slot { u: (0, 3), v: (0, 5) }, Slot { u: (3, 6), v: (0, 5) }];
const SMALL_SLOTS: [Slot; 4] = [
    Slot { u: (6, 8), v: (0, 3) },
    Slot { u: (6, 8), v: (3, 6) },
    Slot { u: (0, 2), v: (5, 8) },
    Slot { u: (2, 4), v: (5, 8) },
];

#[derive(Clone, Copy, Debug)]
struct Placement {
    slot: Slot,
    flip_u: bool,
    flip_v: bool,
}

impl Placement {
    fn uv(&self, s: f64, t: f64) -> [f32; 2] {
        let s = if self.flip_u { 1.0 - s } else { s };
        let t = if self.flip_v { 1.0 - t } else { t };
        let (u0, u1) = (self.slot.u.0 as f64 / 8.0, self.slot.u.1 as f64 / 8.0);
        let (v0, v1) = (self.slot.v.0 as f64 / 8.0, self.slot.v.1 as f64 / 8.0);
        [(u0 + s * (u1 - u0)) as f32, (v0 + t * (v1 - v0)) as f32]
    }
}

#[derive(Clone, Copy, Debug)]
struct Tube {
    start: [f64; 3],
    end: [f64; 3],
    r_start: f64,
    r_end: f64,
    rings: usize,
    half_segs: usize,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|v| v / n)
}

impl Tube {
    fn along(start: [f64; 3], angle_from_down: f64, side: f64, len: f64) -> [f64; 3] {
        [start[0] + side * angle_from_down.sin() * len, start[1] - angle_from_down.cos() * len, start[2]]
    }

    fn scaled(mut self, k: f64) -> Self {
        self.r_start *= k;
        self.r_end *= k;
        self
    }

    /// Ring vertex `j` of `2·half_segs` at ring `i`; `θ_j = -π/2 + jπ/half_segs`
    /// with `θ = 0` facing `+z`.
    fn point(&self, i: usize, j: usize) -> [f32; 3] {
        let t = i as f64 / self.rings as f64;
        let c = [0, 1, 2].map(|d| self.start[d] + t * (self.end[d] - self.start[d]));
        let r = self.r_start + t * (self.r_end - self.r_start);
        let dir = normalize3(sub(self.end, self.start));
        let perp = normalize3([dir[1], -dir[0], 0.0]);
        let theta = -PI / 2.0 + j as f64 * PI / self.half_segs as f64;
        let (s, co) = theta.sin_cos();
        [
            (c[0] + r * s * perp[0]) as f32,
            (c[1] + r * s * perp[1]) as f32,
            (c[2] + r * co * TUBE_DEPTH) as f32,
        ]
    }

    /// Two half-tube charts sharing the cut vertices at `θ = ±π/2`.
    fn mesh(&self, front: Placement, back: Placement) -> Mesh {
        let ring = 2 * self.half_segs;
        let positions: Vec<[f32; 3]> =
            (0..=self.rings).flat_map(|i| (0..ring).map(move |j| (i, j))).map(|(i, j)| self.point(i, j)).collect();
        let pid = |i: usize, j: usize| (i * ring + j % ring) as u32;
        let mut uvs = Vec::new();
        let mut faces = Vec::new();
        for (half, place) in [(0usize, front), (1usize, back)] {
            let base = uvs.len() as u32;
            let w = self.half_segs + 1;
            for i in 0..=self.rings {
                for k in 0..=self.half_segs {
                    uvs.push(place.uv(k as f64 / self.half_segs as f64, i as f64 / self.rings as f64));
                }
            }
            let uid = |i: usize, k: usize| base + (i * w + k) as u32;
            let j0 = half * self.half_segs;
            for i in 0..self.rings {
                for k in 0..self.half_segs {
                    let (j, j1) = (j0 + k, j0 + k + 1);
                    faces.push(Face {
                        pos: [pid(i, j), pid(i, j1), pid(i + 1, j1)],
                        uv: [uid(i, k), uid(i, k + 1), uid(i + 1, k + 1)],
                    });
                    faces.push(Face {
                        pos: [pid(i, j), pid(i + 1, j1), pid(i + 1, j)],
                        uv: [uid(i, k), uid(i + 1, k + 1), uid(i + 1, k)],
                    });
                }
            }
        }
        Mesh { positions, uvs, faces }
    }

    /// Single chart covering the unit square; used for the body, whose uvs
    /// are never baked.
    fn mesh_single_chart(&self) -> Mesh {
        let full = Placement { slot: Slot { u: (0, 8), v: (0, 8) }, flip_u: false, flip_v: false };
        let mut m = self.mesh(full, full);
        // squash the two halves side by side so the uv area stays non-zero
        let n = m.uvs.len() / 2;
        for (idx, uv) in m.uvs.iter_mut().enumerate() {
            uv[0] = 0.5 * uv[0] + if idx < n { 0.0 } else { 0.5 };
        }
        m
    }
}

/// Tubes of a garment in the character frame.
fn garment_tubes(label: TypeLabel, p: &GarmentParams) -> (Tube, Vec<Tube>) {
    let g = p.girth;
    match label {
        TypeLabel::Top => {
            let torso = Tube { start: [0.0, 0.58, 0.0], end: [0.0, 0.0, 0.0], r_start: 0.27 * g, r_end: 0.26 * g, rings: 8, half_segs: 8 };
            let limbs = [-1.0, 1.0]
                .map(|side| {
                    let start = [side * 0.2 * g, 0.5, 0.0];
                    let end = Tube::along(start, p.arm_angle, side, 0.38 * p.length);
                    Tube { start, end, r_start: 0.1 * g, r_end: 0.085 * g, rings: 6, half_segs: 6 }
                })
                .to_vec();
            (torso, limbs)
        }
        TypeLabel::Bottom => {
            let hips = Tube { start: [0.0, 0.08, 0.0], end: [0.0, -0.18, 0.0], r_start: 0.25 * g, r_end: 0.26 * g, rings: 4, half_segs: 8 };
            let limbs = [-1.0, 1.0]
                .map(|side| {
                    let start = [side * 0.12 * g, -0.12, 0.0];
                    let end = Tube::along(start, p.leg_angle, side, 0.7 * p.length);
                    Tube { start, end, r_start: 0.115 * g, r_end: 0.095 * g, rings: 10, half_segs: 6 }
                })
                .to_vec();
            (hips, limbs)
        }
        TypeLabel::Onepiece => {
            let dress = Tube {
                start: [0.0, 0.58, 0.0],
                end: [0.0, 0.58 - 1.1 * p.length, 0.0],
                r_start: 0.25 * g,
                r_end: 0.42 * g,
                rings: 12,
                half_segs: 8,
            };
            (dress, Vec::new())
        }
    }
}

/// Un-normalised garment shell in the character frame. The seed only
/// controls the uv layout: chart-to-slot assignment and chart flips.
fn garment_shell(label: TypeLabel, params: &GarmentParams, seed: u64, radius_scale: f64) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flip = |slot: Slot| Placement { slot, flip_u: rng.gen_bool(0.5), flip_v: rng.gen_bool(0.5) };
    let (main, limbs) = garment_tubes(label, params);
    let mut big = BIG_SLOTS;
    let mut small = SMALL_SLOTS;
    let mut order = ChaCha8Rng::seed_from_u64(seed ^ 0x5107);
    big.shuffle(&mut order);
    small.shuffle(&mut order);
    let mut parts = vec![main.scaled(radius_scale).mesh(flip(big[0]), flip(big[1]))];
    for (k, limb) in limbs.iter().enumerate() {
        parts.push(limb.scaled(radius_scale).mesh(flip(small[2 * k]), flip(small[2 * k + 1])));
    }
    Mesh::merge(&parts)
}

/// Normalised garment mesh with a multi-chart atlas, deterministic in the seed.
pub fn make_garment_mesh(label: TypeLabel, params: &GarmentParams, seed: u64) -> Result<Mesh> {
    params.validate()?;
    let (mesh, _) = normalize_mesh(&garment_shell(label, params, seed, 1.0), None)?;
    mesh.validate()?;
    Ok(mesh)
}

/// Skin-coloured stand-in body in the character frame.
fn body_mesh(p: &GarmentParams) -> Mesh {
    let g = p.girth;
    let mut tubes = vec![
        Tube { start: [0.0, 0.58, 0.0], end: [0.0, -0.15, 0.0], r_start: 0.18 * g, r_end: 0.17 * g, rings: 4, half_segs: 6 },
        Tube { start: [0.0, 0.95, 0.0], end: [0.0, 0.58, 0.0], r_start: 0.12, r_end: 0.12, rings: 3, half_segs: 6 },
    ];
    for side in [-1.0, 1.0] {
        let shoulder = [side * 0.2 * g, 0.5, 0.0];
        tubes.push(Tube { start: shoulder, end: Tube::along(shoulder, p.arm_angle, side, 0.62), r_start: 0.055, r_end: 0.05, rings: 3, half_segs: 4 });
        let hip = [side * 0.12 * g, -0.12, 0.0];
        tubes.push(Tube { start: hip, end: Tube::along(hip, p.leg_angle, side, 0.8), r_start: 0.07, r_end: 0.06, rings: 3, half_segs: 4 });
    }
    let parts: Vec<Mesh> = tubes.iter().map(Tube::mesh_single_chart).collect();
    Mesh::merge(&parts)
}

/// Everything needed to regenerate one tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub label: TypeLabel,
    pub garment: GarmentParams,
    pub style: TextureField,
    pub distractor: Option<Distractor>,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub label: TypeLabel,
    pub style: TextureField,
}

fn random_field(rng: &mut ChaCha8Rng, colors: &[[f32; 3]]) -> Result<TextureField> {
    let style = *Style::ALL.choose(rng).expect("styles");
    let n = if style == Style::Solid { 1 } else { 2 };
    make_texture_field(style, &colors[..n], rng.next_u64())
}

impl SampleSpec {
    /// Random spec with a distractor of another class; palettes of target and
    /// distractor are disjoint.
    pub fn random(label: TypeLabel, resolution: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let garment = GarmentParams::sample(&mut rng);
        let mut colors = PALETTE.to_vec();
        colors.shuffle(&mut rng);
        let style = random_field(&mut rng, &colors[..2])?;
        let others: Vec<TypeLabel> = TypeLabel::ALL.into_iter().filter(|l| *l != label).collect();
        let dl = *others.choose(&mut rng).expect("two other classes");
        let dstyle = random_field(&mut rng, &colors[2..4])?;
        Ok(Self { label, garment, style, distractor: Some(Distractor { label: dl, style: dstyle }), resolution })
    }
}

/// One training or evaluation tuple.
#[derive(Clone, Debug)]
pub struct Sample {
    pub reference_image: ImageGrid,
    /// Mask of reference pixels showing the labelled garment.
    pub reference_mask: ImageGrid,
    pub uv_texture: ImageGrid,
    pub uv_position: ImageGrid,
    pub uv_mask: ImageGrid,
    pub label: TypeLabel,
    pub seed: u64,
    /// Normalised garment mesh the uv maps were baked from.
    pub mesh: Mesh,
    pub spec: SampleSpec,
}

impl Sample {
    pub fn resolution(&self) -> usize {
        self.uv_mask.height
    }
}

/// Builds a tuple from a spec. The seed fixes the uv layout.
pub fn make_sample(spec: &SampleSpec, seed: u64) -> Result<Sample> {
    let res = spec.resolution;
    if res == 0 || res % 8 != 0 {
        return Err(Error::OutOfRange(format!("resolution {res} must be a positive multiple of 8")));
    }
    spec.garment.validate()?;
    let shell = garment_shell(spec.label, &spec.garment, seed, 1.0);
    let (mesh, tf) = normalize_mesh(&shell, None)?;
    let (uv_position, uv_mask) = bake_position_map(&mesh, res)?;
    let uv_texture = spec.style.bake(&uv_position, &uv_mask);

    let distractor = match &spec.distractor {
        Some(d) => {
            if d.label == spec.label {
                return Err(Error::OutOfRange("distractor must have a different label".into()));
            }
            let shell = garment_shell(d.label, &spec.garment, seed.wrapping_add(1), DISTRACTOR_SHRINK);
            let (_, dtf) = normalize_mesh(&shell, None)?;
            Some((shell, dtf, &d.style))
        }
        None => None,
    };
    let body = body_mesh(&spec.garment);
    let camera = Camera::new(View::Front, REFERENCE_EXTENT)?;

    let field_shader = |m: &'_ Mesh, t: NormalizeTransform, f: &'_ TextureField| {
        let m = m.clone();
        let f = f.clone();
        move |face: usize, b: [f64; 3]| Some(f.eval(t.apply(m.interpolate_position(face, b))))
    };
    let target_shader = field_shader(&shell, tf, &spec.style);
    let skin = |_: usize, _: [f64; 3]| Some(SKIN);
    let white = |_: usize, _: [f64; 3]| Some([1.0f32; 3]);
    let black = |_: usize, _: [f64; 3]| Some([0.0f32; 3]);
    let distractor_shader = distractor.as_ref().map(|(m, t, f)| field_shader(m, *t, f));

    // orthographic projection ignores z offsets, so this only settles depth
    let mut front = shell.clone();
    for p in &mut front.positions {
        p[2] += TARGET_DEPTH_BIAS;
    }
    let mut items = vec![RenderItem { mesh: &front, shader: &target_shader }];
    let mut mask_items = vec![RenderItem { mesh: &front, shader: &white }];
    if let (Some((dm, _, _)), Some(ds)) = (&distractor, &distractor_shader) {
        items.push(RenderItem { mesh: dm, shader: ds });
        mask_items.push(RenderItem { mesh: dm, shader: &black });
    }
    items.push(RenderItem { mesh: &body, shader: &skin });
    mask_items.push(RenderItem { mesh: &body, shader: &black });
    let reference_image = render_scene(&items, &camera, res, REFERENCE_BACKGROUND);
    let mask_rgb = render_scene(&mask_items, &camera, res, [0.0; 3]);
    let reference_mask = ImageGrid {
        height: res,
        width: res,
        semantics: Semantics::Mask,
        data: mask_rgb.data.chunks_exact(3).map(|c| if c[0] > 0.5 { 1.0 } else { 0.0 }).collect(),
    };

    Ok(Sample {
        reference_image,
        reference_mask,
        uv_texture,
        uv_position,
        uv_mask,
        label: spec.label,
        seed,
        mesh,
        spec: spec.clone(),
    })
}

/// Random tuple for `label`; a pure function of its arguments.
pub fn generate_sample(label: TypeLabel, resolution: usize, seed: u64) -> Result<Sample> {
    make_sample(&SampleSpec::random(label, resolution, seed)?, seed)
}

/// Independent seed number `index` derived from `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// Open cylinder of radius 1 over `y ∈ [-1, 1]` with one chart covering the
/// unit square and one vertical cut at `θ = 0`.
pub fn cylinder_shell(rows: usize, segs: usize) -> Mesh {
    let mut positions = Vec::new();
    for i in 0..=rows {
        let y = -1.0 + 2.0 * i as f64 / rows as f64;
        for j in 0..segs {
            let th = 2.0 * PI * j as f64 / segs as f64;
            positions.push([th.sin() as f32, y as f32, th.cos() as f32]);
        }
    }
    let mut uvs = Vec::new();
    for i in 0..=rows {
        for j in 0..=segs {
            uvs.push([j as f32 / segs as f32, i as f32 / rows as f32]);
        }
    }
    let pid = |i: usize, j: usize| (i * segs + j % segs) as u32;
    let uid = |i: usize, j: usize| (i * (segs + 1) + j) as u32;
    let mut faces = Vec::new();
    for i in 0..rows {
        for j in 0..segs {
            faces.push(Face { pos: [pid(i, j), pid(i, j + 1), pid(i + 1, j + 1)], uv: [uid(i, j), uid(i, j + 1), uid(i + 1, j + 1)] });
            faces.push(Face { pos: [pid(i, j), pid(i + 1, j + 1), pid(i + 1, j)], uv: [uid(i, j), uid(i + 1, j + 1), uid(i + 1, j)] });
        }
    }
    Mesh { positions, uvs, faces }
}

/// Per-sample files, relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: TypeLabel,
    pub seed: u64,
    pub paths: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const TENSOR_FILES: [(&str, &str); 5] = [
    ("reference", "reference.uvpt"),
    ("reference_mask", "reference_mask.uvpt"),
    ("texture", "texture.uvpt"),
    ("position", "position.uvpt"),
    ("mask", "mask.uvpt"),
];

impl Manifest {
    /// Reads `manifest.jsonl` from a dataset directory, or the file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(line).map_err(|e| Error::Parse { line: ln + 1, msg: format!("manifest: {e}") })?,
            );
        }
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { root, entries })
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entry serialises") + "\n").collect()
    }

    pub fn save(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        std::fs::write(&file, self.to_jsonl()).map_err(|e| Error::io(&file, e))
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let e = self.entries.get(index).ok_or_else(|| Error::OutOfRange(format!("sample {index} not in manifest")))?;
        let path = |key: &str| -> Result<PathBuf> {
            e.paths
                .get(key)
                .map(|p| self.root.join(p))
                .ok_or_else(|| Error::Format(format!("manifest entry {} lacks '{key}'", e.id)))
        };
        let meta_path = path("meta")?;
        let meta = std::fs::read_to_string(&meta_path).map_err(|err| Error::io(&meta_path, err))?;
        let spec: SampleSpec = serde_json::from_str(&meta).map_err(|err| Error::Format(format!("{}: {err}", meta_path.display())))?;
        Ok(Sample {
            reference_image: load_image(&path("reference")?, Semantics::Rgb)?,
            reference_mask: load_image(&path("reference_mask")?, Semantics::Mask)?,
            uv_texture: load_image(&path("texture")?, Semantics::Rgb)?,
            uv_position: load_image(&path("position")?, Semantics::Xyz)?,
            uv_mask: load_image(&path("mask")?, Semantics::Mask)?,
            label: e.label,
            seed: e.seed,
            mesh: load_obj(&path("mesh")?)?,
            spec,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.entries.len()).into_par_iter().map(|i| self.load_sample(i)).collect()
    }
}

/// Writes one sample's files into `dir` and returns their relative paths.
pub fn save_sample(sample: &Sample, dir: &Path, rel: &str) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = BTreeMap::new();
    let grids = [
        &sample.reference_image,
        &sample.reference_mask,
        &sample.uv_texture,
        &sample.uv_position,
        &sample.uv_mask,
    ];
    for ((key, file), grid) in TENSOR_FILES.iter().zip(grids) {
        save_image(grid, &dir.join(file))?;
        paths.insert(key.to_string(), format!("{rel}/{file}"));
        let png = file.replace(".uvpt", ".png");
        grid.save_png(&dir.join(&png))?;
    }
    save_obj(&sample.mesh, &dir.join("mesh.obj"))?;
    paths.insert("mesh".into(), format!("{rel}/mesh.obj"));
    let meta = serde_json::to_string_pretty(&sample.spec).expect("spec serialises");
    std::fs::write(dir.join("meta.json"), meta).map_err(|e| Error::io(dir.join("meta.json"), e))?;
    paths.insert("meta".into(), format!("{rel}/meta.json"));
    Ok(paths)
}

/// Generates `n` samples with round-robin labels into `out_dir` and writes
/// the manifest. A pure function of `(n, seed, resolution)`.
pub fn build_dataset(n: usize, out_dir: &Path, seed: u64, resolution: usize) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<ManifestEntry> = (0..n)
        .into_par_iter()
        .map(|i| {
            let label = TypeLabel::ALL[i % 3];
            let s = derive_seed(seed, i as u64);
            let sample = generate_sample(label, resolution, s)?;
            let id = format!("sample_{i:05}");
            let paths = save_sample(&sample, &out_dir.join(&id), &id)?;
            Ok(ManifestEntry { id, label, seed: s, paths })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { root: out_dir.to_path_buf(), entries };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_seam_edges;
    use crate::raster::uv_coverage;

    #[test]
    fn one_hot_roundtrip() {
        for l in TypeLabel::ALL {
            let v = l.one_hot();
            assert_eq!(v.iter().filter(|x| **x == 1.0).count(), 1);
            assert_eq!(TypeLabel::from_one_hot(&v).unwrap(), l);
        }
        assert!(TypeLabel::from_one_hot(&[1.0, 1.0, 0.0]).is_err());
        assert!(TypeLabel::from_one_hot(&[0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn fields_evaluate_as_specified() {
        let red = [1.0, 0.0, 0.0];
        assert_eq!(TextureField::solid(red).eval([0.3, -0.7, 0.2]), red);
        let stripes = TextureField {
            style: Style::Stripes,
            palette: vec![PALETTE[0], PALETTE[7]],
            period: 0.5,
            axis: 1,
            phase: [0.0; 3],
            softness: 0.05,
        };
        assert_ne!(stripes.eval([0.0, 0.1, 0.0]), stripes.eval([0.0, 0.35, 0.0]));
        let checker = make_texture_field(Style::Checker, &[PALETTE[1], PALETTE[4]], 9).unwrap();
        let cell = checker.period / 2.0;
        // boundary on x sits where x + phase is a multiple of the cell
        let bx = cell - checker.phase[0];
        let ym = cell / 2.0 - checker.phase[1];
        let p = checker.eval([bx - 0.45 * cell, ym, 0.0]);
        let q = checker.eval([bx + 0.45 * cell, ym, 0.0]);
        assert_ne!(p, q);
        assert!(p == PALETTE[1] || p == PALETTE[4]);
        assert!(q == PALETTE[1] || q == PALETTE[4]);
        // the boundary itself is an even blend
        let m = checker.eval([bx, ym, 0.0]);
        for k in 0..3 {
            assert!((m[k] - 0.5 * (PALETTE[1][k] + PALETTE[4][k])).abs() < 1e-5);
        }
        assert!(make_texture_field(Style::Solid, &[], 0).is_err());
        assert!(make_texture_field(Style::Solid, &[red; 5], 0).is_err());
    }

    #[test]
    fn garments_are_normalised_multi_chart_shells() {
        for label in TypeLabel::ALL {
            let m = make_garment_mesh(label, &GarmentParams::default(), 3).unwrap();
            let max = m.positions.iter().flatten().fold(0.0f32, |a, v| a.max(v.abs()));
            assert!((max - 1.0).abs() < 1e-6);
            let seams = build_seam_edges(&m);
            assert!(!seams.is_empty(), "{label}");
            uv_coverage(&m, 64).unwrap();
        }
        let a = make_garment_mesh(TypeLabel::Top, &GarmentParams::default(), 11).unwrap();
        let b = make_garment_mesh(TypeLabel::Top, &GarmentParams::default(), 11).unwrap();
        assert_eq!(a, b);
        let c = make_garment_mesh(TypeLabel::Bottom, &GarmentParams::default(), 11).unwrap();
        assert_ne!(a.faces.len(), c.faces.len());
        let bad = GarmentParams { girth: 2.0, ..Default::default() };
        assert!(make_garment_mesh(TypeLabel::Top, &bad, 0).is_err());
    }

    #[test]
    fn cylinder_seam_count_equals_rows() {
        let m = cylinder_shell(7, 12);
        m.validate().unwrap();
        assert_eq!(build_seam_edges(&m).len(), 7);
    }

    #[test]
    fn solid_sample_without_distractor() {
        let color = PALETTE[3];
        let spec = SampleSpec {
            label: TypeLabel::Top,
            garment: GarmentParams::default(),
            style: TextureField::solid(color),
            distractor: None,
            resolution: 64,
        };
        let s = make_sample(&spec, 5).unwrap();
        for i in 0..64 * 64 {
            let t = &s.uv_texture.data[i * 3..i * 3 + 3];
            if s.uv_mask.data[i] == 1.0 {
                assert_eq!(t, color);
            } else {
                assert_eq!(t, UV_FILL);
                assert_eq!(&s.uv_position.data[i * 3..i * 3 + 3], &[0.0; 3]);
            }
            if s.reference_mask.data[i] == 1.0 {
                assert_eq!(&s.reference_image.data[i * 3..i * 3 + 3], color);
            }
        }
        assert!(s.reference_mask.data.iter().filter(|v| **v == 1.0).count() > 50);
        let (_, mask) = bake_position_map(&s.mesh, 64).unwrap();
        assert_eq!(mask, s.uv_mask);
    }

    #[test]
    fn reference_shows_both_garments() {
        let s = generate_sample(TypeLabel::Bottom, 64, 77).unwrap();
        let d = s.spec.distractor.as_ref().unwrap();
        assert_ne!(d.label, TypeLabel::Bottom);
        let near = |c: &[f32], pal: &[[f32; 3]]| pal.iter().any(|p| (0..3).all(|k| (c[k] - p[k]).abs() < 1e-6));
        let pixels: Vec<&[f32]> = s.reference_image.data.chunks_exact(3).collect();
        let dpal = &d.style.palette;
        if d.style.style != Style::Gradient {
            assert!(pixels.iter().any(|c| near(c, dpal)), "distractor visible");
        }
        for (i, c) in s.uv_texture.data.chunks_exact(3).enumerate() {
            if s.uv_mask.data[i] == 1.0 {
                assert!(!near(c, dpal));
            }
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(1, 4), derive_seed(1, 4));
    }
}
