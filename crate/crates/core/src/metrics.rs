//! Desk-scale quality measures: seam agreement, reference alignment and a
//! patch-statistics distance between texture sets.
//!
//! The set distance is a Fréchet distance over hand-crafted patch features.
//! It is a proxy for distribution quality, not an inception-feature score.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffusion::AttentionMap;
use crate::error::{Error, Result};
use crate::geometry::{build_seam_edges, Mesh};
use crate::image::{ImageGrid, Semantics};
use crate::raster::uv_coverage;
use crate::synth::{Sample, Style, TextureField};

/// Seam samples per seam edge.
pub const SEAM_SAMPLES: usize = 16;

/// Colour distance normalised per channel: `‖a − b‖₂ / √3`.
pub fn color_distance(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamStats {
    pub mean: f64,
    pub max: f64,
    pub samples: usize,
}

/// Bilinear lookup that only blends covered texels (weights renormalised).
/// Falls back to the nearest covered texel when none of the four is covered.
fn sample_covered(texture: &ImageGrid, covered: &[bool], uv: [f64; 2]) -> Vec<f32> {
    let (w, h) = (texture.width, texture.height);
    let c = texture.channels();
    let x = uv[0] * w as f64 - 0.5;
    let y = uv[1] * h as f64 - 0.5;
    let (xf, yf) = (x.floor(), y.floor());
    let (fx, fy) = (x - xf, y - yf);
    let mut taps = Vec::with_capacity(4);
    for (dx, dy, wt) in [(0.0, 0.0, (1.0 - fx) * (1.0 - fy)), (1.0, 0.0, fx * (1.0 - fy)), (0.0, 1.0, (1.0 - fx) * fy), (1.0, 1.0, fx * fy)]
    {
        let (xi, yi) = (xf + dx, yf + dy);
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            continue;
        }
        let (xi, yi) = (xi as usize, yi as usize);
        if covered[yi * w + xi] && wt > 0.0 {
            taps.push((xi, yi, wt));
        }
    }
    if taps.is_empty() {
        let (cx, cy) = (x.round().clamp(0.0, (w - 1) as f64) as usize, y.round().clamp(0.0, (h - 1) as f64) as usize);
        let best = (0..w * h)
            .filter(|i| covered[*i])
            .min_by_key(|i| {
                let (px, py) = ((i % w) as i64, (i / w) as i64);
                (px - cx as i64).pow(2) + (py - cy as i64).pow(2)
            });
        return match best {
            Some(i) => texture.pixel(i % w, i / w).to_vec(),
            None => texture.pixel(cx, cy).to_vec(),
        };
    }
    // offsets from the first tap keep constant regions exact
    let total: f64 = taps.iter().map(|t| t.2).sum();
    let base = texture.pixel(taps[0].0, taps[0].1).to_vec();
    (0..c)
        .map(|k| {
            let d: f64 = taps.iter().map(|(xi, yi, wt)| wt * (texture.pixel(*xi, *yi)[k] - base[k]) as f64).sum();
            base[k] + (d / total) as f32
        })
        .collect()
}

/// Moves `uv` on an edge of face `fi` half a texel towards the opposite
/// corner, so lookups land inside the chart.
fn inset(mesh: &Mesh, fi: usize, opposite: usize, uv: [f64; 2], res: usize) -> [f64; 2] {
    let o = mesh.face_uvs(fi)[opposite];
    let d = [o[0] as f64 - uv[0], o[1] as f64 - uv[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if len == 0.0 {
        return uv;
    }
    let step = (0.5 / res as f64).min(0.5 * len);
    [uv[0] + d[0] / len * step, uv[1] + d[1] / len * step]
}

/// Colour disagreement between the two sides of every seam, sampled at
/// matched arc parameters. `None` when the mesh has no seams.
pub fn seam_consistency(texture: &ImageGrid, mesh: &Mesh) -> Result<Option<SeamStats>> {
    if texture.height != texture.width {
        return Err(Error::Shape(format!("seam sampling needs a square texture, got {}x{}", texture.height, texture.width)));
    }
    let seams = build_seam_edges(mesh);
    if seams.is_empty() {
        return Ok(None);
    }
    let res = texture.width;
    let covered: Vec<bool> = uv_coverage(mesh, res)?.iter().map(|c| c.is_some()).collect();
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut n = 0;
    for pair in &seams.pairs {
        let opp_a = 3 - pair.a.edge - (pair.a.edge + 1) % 3;
        let opp_b = 3 - pair.b.edge - (pair.b.edge + 1) % 3;
        for s in pair.samples(mesh, SEAM_SAMPLES) {
            let ua = inset(mesh, pair.a.face, opp_a, s.uv_a, res);
            let ub = inset(mesh, pair.b.face, opp_b, s.uv_b, res);
            let d = color_distance(&sample_covered(texture, &covered, ua), &sample_covered(texture, &covered, ub));
            sum += d;
            max = max.max(d);
            n += 1;
        }
    }
    Ok(Some(SeamStats { mean: sum / n as f64, max, samples: n }))
}

/// Which template a generated texture resembles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleMatch {
    Target,
    Distractor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefAlignment {
    pub matched: StyleMatch,
    pub class_match: bool,
    /// Distance of generated texels to the labelled garment's palette.
    pub color_error: f64,
    /// Same against the distractor's palette, when there is one.
    pub distractor_color_error: Option<f64>,
}

/// Colour error below which a texture counts as the target when the
/// sample has no distractor to compare against.
pub const SOLO_MATCH_THRESHOLD: f64 = 0.1;

/// Summary statistics of the masked region: mean colour, per-channel
/// spread, and mean absolute colour change to the right and downward
/// neighbours.
pub fn region_features(tex: &ImageGrid, mask: &ImageGrid) -> Vec<f64> {
    let (w, h) = (tex.width, tex.height);
    let inside = |x: usize, y: usize| mask.pixel(x, y)[0] >= 0.5;
    let mut n = 0.0;
    let mut mean = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) {
                n += 1.0;
                for k in 0..3 {
                    mean[k] += tex.pixel(x, y)[k] as f64;
                }
            }
        }
    }
    let n = f64::max(n, 1.0);
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0f64; 3];
    let mut grad = [0.0f64; 2];
    let mut pairs = [0.0f64; 2];
    for y in 0..h {
        for x in 0..w {
            if !inside(x, y) {
                continue;
            }
            let p = tex.pixel(x, y);
            for k in 0..3 {
                var[k] += (p[k] as f64 - mean[k]).powi(2);
            }
            for (dir, (nx, ny)) in [(x + 1, y), (x, y + 1)].into_iter().enumerate() {
                if nx < w && ny < h && inside(nx, ny) {
                    grad[dir] += color_distance(p, tex.pixel(nx, ny));
                    pairs[dir] += 1.0;
                }
            }
        }
    }
    let mut f = mean.to_vec();
    f.extend(var.iter().map(|v| (v / n).sqrt()));
    f.extend((0..2).map(|d| grad[d] / pairs[d].max(1.0)));
    f
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Line segments (and isolated points) every texel of a field lies on.
fn palette_segments(field: &TextureField) -> Vec<([f32; 3], [f32; 3])> {
    let p = &field.palette;
    match field.style {
        Style::Solid => vec![(p[0], p[0])],
        Style::Gradient | Style::Checker => vec![(p[0], *p.last().expect("palette")), (p[0], p[p.len().min(2) - 1])],
        Style::Stripes => (0..p.len()).map(|i| (p[i], p[(i + 1) % p.len()])).collect(),
    }
}

fn point_segment_distance(q: &[f32], a: [f32; 3], b: [f32; 3]) -> f64 {
    let ab: Vec<f64> = (0..3).map(|k| (b[k] - a[k]) as f64).collect();
    let aq: Vec<f64> = (0..3).map(|k| (q[k] - a[k]) as f64).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let s = if len2 == 0.0 { 0.0 } else { (aq.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) };
    let d2: f64 = (0..3).map(|k| (aq[k] - s * ab[k]).powi(2)).sum();
    (d2 / 3.0).sqrt()
}

/// Mean distance of masked texels to the colour set a field can produce
/// (its palette colours and the blends between them).
pub fn palette_error(tex: &ImageGrid, mask: &ImageGrid, field: &TextureField) -> f64 {
    let segs = palette_segments(field);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..mask.data.len() {
        if mask.data[i] >= 0.5 {
            let q = &tex.data[i * 3..i * 3 + 3];
            sum += segs.iter().map(|(a, b)| point_segment_distance(q, *a, *b)).fold(f64::INFINITY, f64::min);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// The distractor's field baked onto the target's charts.
pub fn distractor_template(sample: &Sample) -> Option<ImageGrid> {
    sample.spec.distractor.as_ref().map(|d| d.style.bake(&sample.uv_position, &sample.uv_mask))
}

/// Does `generated` follow the labelled garment rather than the distractor?
pub fn ref_alignment(generated: &ImageGrid, sample: &Sample) -> Result<RefAlignment> {
    if !generated.same_size(&sample.uv_mask) || generated.semantics != Semantics::Rgb {
        return Err(Error::Shape("generated texture must be rgb at the sample's resolution".into()));
    }
    let mask = &sample.uv_mask;
    let color_error = palette_error(generated, mask, &sample.spec.style);
    let (matched, distractor_color_error) = match (&sample.spec.distractor, distractor_template(sample)) {
        (Some(d), Some(dt)) => {
            let g = region_features(generated, mask);
            let to_target = l2(&g, &region_features(&sample.uv_texture, mask));
            let to_distractor = l2(&g, &region_features(&dt, mask));
            let m = if to_target <= to_distractor { StyleMatch::Target } else { StyleMatch::Distractor };
            (m, Some(palette_error(generated, mask, &d.style)))
        }
        _ => (if color_error < SOLO_MATCH_THRESHOLD { StyleMatch::Target } else { StyleMatch::Distractor }, None),
    };
    Ok(RefAlignment { matched, class_match: matched == StyleMatch::Target, color_error, distractor_color_error })
}

/// Side of the square patches features are pooled over.
pub const PATCH: usize = 8;
const GRAD_BINS: [f64; 3] = [0.02, 0.08, 0.25];

/// Features of every patch at least half covered by the mask: mean colour
/// (3), colour covariance (6), and a gradient-magnitude histogram (4).
pub fn patch_features(tex: &ImageGrid, mask: &ImageGrid) -> Vec<Vec<f64>> {
    let (w, h) = (tex.width, tex.height);
    let mut out = Vec::new();
    for py in (0..h.saturating_sub(PATCH - 1)).step_by(PATCH) {
        for px in (0..w.saturating_sub(PATCH - 1)).step_by(PATCH) {
            let pts: Vec<(usize, usize)> = (py..py + PATCH)
                .flat_map(|y| (px..px + PATCH).map(move |x| (x, y)))
                .filter(|(x, y)| mask.pixel(*x, *y)[0] >= 0.5)
                .collect();
            if pts.len() * 2 < PATCH * PATCH {
                continue;
            }
            let n = pts.len() as f64;
            let mut mean = [0.0f64; 3];
            for (x, y) in &pts {
                for k in 0..3 {
                    mean[k] += tex.pixel(*x, *y)[k] as f64 / n;
                }
            }
            let mut cov = [0.0f64; 6];
            let idx = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
            for (x, y) in &pts {
                let p = tex.pixel(*x, *y);
                for (j, (a, b)) in idx.iter().enumerate() {
                    cov[j] += (p[*a] as f64 - mean[*a]) * (p[*b] as f64 - mean[*b]) / n;
                }
            }
            let mut hist = [0.0f64; 4];
            let mut count = 0.0;
            for (x, y) in &pts {
                if x + 1 < px + PATCH && y + 1 < py + PATCH && mask.pixel(x + 1, *y)[0] >= 0.5 && mask.pixel(*x, y + 1)[0] >= 0.5 {
                    let gx = color_distance(tex.pixel(*x, *y), tex.pixel(x + 1, *y));
                    let gy = color_distance(tex.pixel(*x, *y), tex.pixel(*x, y + 1));
                    let g = (gx * gx + gy * gy).sqrt();
                    hist[GRAD_BINS.iter().filter(|b| g >= **b).count()] += 1.0;
                    count += 1.0;
                }
            }
            let mut f = mean.to_vec();
            f.extend(cov);
            f.extend(hist.iter().map(|v| v / f64::max(count, 1.0)));
            out.push(f);
        }
    }
    out
}

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let x = DVector::from_column_slice(f) - &mu;
        cov += &x * x.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `tr √(√A · B · √A)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    psd_sqrt(&(&ra * b * &ra)).trace()
}

/// Fréchet distance between Gaussians `(μa, Σa)` and `(μb, Σb)`, evaluated
/// symmetrically.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    if mu_a == mu_b && cov_a == cov_b {
        return 0.0;
    }
    let mean_term = (mu_a - mu_b).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(cov_a, cov_b) + trace_sqrt_product(cov_b, cov_a));
    (mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0)
}

/// Texture set distance over pooled patch features. Each set holds
/// `(texture, mask)` pairs and needs at least two members.
pub fn patch_stats_distance(set_a: &[(&ImageGrid, &ImageGrid)], set_b: &[(&ImageGrid, &ImageGrid)]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::OutOfRange("patch statistics need at least two textures per set".into()));
    }
    let pool = |set: &[(&ImageGrid, &ImageGrid)]| -> Vec<Vec<f64>> {
        set.iter().flat_map(|(t, m)| patch_features(t, m)).collect()
    };
    let (fa, fb) = (pool(set_a), pool(set_b));
    if fa.len() < 2 || fb.len() < 2 {
        return Err(Error::OutOfRange("fewer than two covered patches in a set".into()));
    }
    let (ma, ca) = gaussian_fit(&fa);
    let (mb, cb) = gaussian_fit(&fb);
    Ok(frechet_distance(&ma, &ca, &mb, &cb))
}

/// Where uv-half queries of one attention layer look in the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// In-garment uv queries whose strongest reference-half key lies on
    /// the reference garment.
    pub hit_rate: f64,
    /// Fraction of reference-half tokens on the garment: the hit rate of a
    /// query that picks its key uniformly.
    pub chance: f64,
    pub queries: usize,
}

/// Majority vote of a mask over the `factor × factor` block of each token.
fn token_mask(mask: &ImageGrid, h: usize, w: usize) -> Result<Vec<bool>> {
    if mask.semantics != Semantics::Mask || mask.height % h != 0 || mask.width % w != 0 || mask.height / h != mask.width / w {
        return Err(Error::Shape(format!("{}x{} mask cannot be pooled to {h}x{w} tokens", mask.height, mask.width)));
    }
    let f = mask.height / h;
    let mut out = Vec::with_capacity(h * w);
    for ty in 0..h {
        for tx in 0..w {
            let mut on = 0;
            for y in ty * f..(ty + 1) * f {
                for x in tx * f..(tx + 1) * f {
                    on += (mask.pixel(x, y)[0] >= 0.5) as usize;
                }
            }
            out.push(2 * on >= f * f);
        }
    }
    Ok(out)
}

/// Attention localisation: for every uv-half token whose block is mostly
/// covered, takes the argmax over reference-half keys and checks whether it
/// lands on a token mostly covered by the reference garment. `None` when no
/// query qualifies.
pub fn attention_localization(
    map: &AttentionMap,
    uv_mask: &ImageGrid,
    reference_mask: &ImageGrid,
) -> Result<Option<Localization>> {
    let half = map.w / 2;
    if map.w % 2 != 0 {
        return Err(Error::Shape(format!("attention grid width {} is odd", map.w)));
    }
    let uv = token_mask(uv_mask, map.h, half)?;
    let rf = token_mask(reference_mask, map.h, half)?;
    let mut hits = 0;
    let mut queries = 0;
    for y in 0..map.h {
        for x in 0..half {
            if !uv[y * half + x] {
                continue;
            }
            let row = map.row(y, x);
            let mut best = (f32::NEG_INFINITY, 0);
            for ky in 0..map.h {
                for kx in 0..half {
                    let p = row[ky * map.w + half + kx];
                    if p > best.0 {
                        best = (p, ky * half + kx);
                    }
                }
            }
            queries += 1;
            hits += rf[best.1] as usize;
        }
    }
    if queries == 0 {
        return Ok(None);
    }
    let chance = rf.iter().filter(|v| **v).count() as f64 / rf.len() as f64;
    Ok(Some(Localization { hit_rate: hits as f64 / queries as f64, chance, queries }))
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub label: String,
    pub seam_mean: Option<f64>,
    pub seam_max: Option<f64>,
    pub class_match: bool,
    pub color_error: f64,
    pub distractor_color_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seam_consistency_mean: f64,
    pub seam_consistency_max: f64,
    pub class_match_rate: f64,
    pub ref_color_error: f64,
    /// Fraction of samples closer to the target palette than to the
    /// distractor's (samples with a distractor only).
    pub palette_preference_rate: Option<f64>,
    /// Patch-statistics proxy against the ground-truth set.
    pub patch_stats_distance: Option<f64>,
    pub records: Vec<EvalRecord>,
}

/// Evaluates generated textures against their source samples.
pub fn evaluate(ids: &[String], generated: &[ImageGrid], samples: &[Sample]) -> Result<EvalReport> {
    if generated.len() != samples.len() || ids.len() != samples.len() {
        return Err(Error::Shape(format!("{} ids, {} textures, {} samples", ids.len(), generated.len(), samples.len())));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut records = Vec::with_capacity(samples.len());
    for ((id, g), s) in ids.iter().zip(generated).zip(samples) {
        let seam = seam_consistency(g, &s.mesh)?;
        let ra = ref_alignment(g, s)?;
        records.push(EvalRecord {
            id: id.clone(),
            label: s.label.to_string(),
            seam_mean: seam.map(|x| x.mean),
            seam_max: seam.map(|x| x.max),
            class_match: ra.class_match,
            color_error: ra.color_error,
            distractor_color_error: ra.distractor_color_error,
        });
    }
    let seams: Vec<f64> = records.iter().filter_map(|r| r.seam_mean).collect();
    let seam_max = records.iter().filter_map(|r| r.seam_max).fold(0.0, f64::max);
    let n = records.len() as f64;
    let pref: Vec<bool> = records
        .iter()
        .filter_map(|r| r.distractor_color_error.map(|d| r.color_error < d))
        .collect();
    let gt: Vec<(&ImageGrid, &ImageGrid)> = samples.iter().map(|s| (&s.uv_texture, &s.uv_mask)).collect();
    let gen: Vec<(&ImageGrid, &ImageGrid)> = generated.iter().zip(samples).map(|(g, s)| (g, &s.uv_mask)).collect();
    Ok(EvalReport {
        seam_consistency_mean: seams.iter().sum::<f64>() / seams.len().max(1) as f64,
        seam_consistency_max: seam_max,
        class_match_rate: records.iter().filter(|r| r.class_match).count() as f64 / n,
        ref_color_error: records.iter().map(|r| r.color_error).sum::<f64>() / n,
        palette_preference_rate: (!pref.is_empty())
            .then(|| pref.iter().filter(|p| **p).count() as f64 / pref.len() as f64),
        patch_stats_distance: patch_stats_distance(&gt, &gen).ok(),
        records,
    })
}

impl EvalReport {
    /// One JSON object per sample, then a final `{"summary": …}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        let summary = serde_json::json!({ "summary": {
            "samples": self.records.len(),
            "seam_consistency_mean": self.seam_consistency_mean,
            "seam_consistency_max": self.seam_consistency_max,
            "class_match_rate": self.class_match_rate,
            "ref_color_error": self.ref_color_error,
            "palette_preference_rate": self.palette_preference_rate,
            "patch_stats_distance_proxy": self.patch_stats_distance,
        }});
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn summary_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<32} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<32} {:>10}", "samples", self.records.len());
        let _ = writeln!(s, "{:<32} {:>10.4}", "seam consistency (mean)", self.seam_consistency_mean);
        let _ = writeln!(s, "{:<32} {:>10.4}", "seam consistency (max)", self.seam_consistency_max);
        let _ = writeln!(s, "{:<32} {:>10.4}", "class match rate", self.class_match_rate);
        let _ = writeln!(s, "{:<32} {:>10.4}", "reference colour error", self.ref_color_error);
        let _ = writeln!(s, "{:<32} {:>10}", "target palette preferred", opt(self.palette_preference_rate));
        let _ = writeln!(s, "{:<32} {:>10}", "patch-stats distance (proxy)", opt(self.patch_stats_distance));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}
