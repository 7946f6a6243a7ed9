//! Scanline rasterisation in uv space (attribute baking) and in screen space
//! (orthographic front/back rendering under ambient light).
//!
//! Coverage uses pixel centres and the top-left fill rule, so a pixel on an
//! edge shared by two triangles belongs to exactly one of them. Rows are
//! processed independently; output does not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, NormalizeTransform};
use crate::image::{ImageGrid, Semantics};

/// Colour behind everything in rendered views.
pub const RENDER_BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Back,
}

/// Orthographic camera looking along `-z` (front) or `+z` (back); the
/// square screen spans `[-extent, extent]` on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub view: View,
    pub extent: f64,
}

impl Camera {
    pub fn new(view: View, extent: f64) -> Result<Self> {
        if !(extent > 0.0) {
            return Err(Error::OutOfRange(format!("camera extent must be positive, got {extent}")));
        }
        Ok(Self { view, extent })
    }

    pub fn front() -> Self {
        Self { view: View::Front, extent: 1.0 }
    }

    pub fn back() -> Self {
        Self { view: View::Back, extent: 1.0 }
    }

    /// Pixel-space x, y and a depth where larger means nearer the viewer.
    fn project(&self, p: [f32; 3], resolution: usize) -> ([f64; 2], f64) {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let (sx, depth) = match self.view {
            View::Front => (x, z),
            View::Back => (-x, -z),
        };
        let r = resolution as f64;
        ([(sx / self.extent + 1.0) * 0.5 * r, (1.0 - y / self.extent) * 0.5 * r], depth)
    }
}

/// Triangle prepared for coverage tests: vertices in pixel units, reordered
/// to positive orientation.
#[derive(Clone, Copy, Debug)]
struct TriSetup {
    p: [[f64; 2]; 3],
    perm: [usize; 3],
    area: f64,
    owns: [bool; 3],
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

fn edge_fn(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

impl TriSetup {
    fn new(pts: [[f64; 2]; 3], width: usize, height: usize) -> Option<Self> {
        let area = edge_fn(pts[0], pts[1], pts[2]);
        if area == 0.0 || !area.is_finite() {
            return None;
        }
        let perm = if area > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
        let p = perm.map(|i| pts[i]);
        let owns = [0, 1, 2].map(|i| {
            let (a, b) = (p[i], p[(i + 1) % 3]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            // top edge (horizontal, pointing +x) or left edge (pointing up)
            dy < 0.0 || (dy == 0.0 && dx > 0.0)
        });
        let lo = |d: usize| p.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
        let hi = |d: usize| p.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
        // pixel centres c = i + 0.5 with lo <= c <= hi
        let first = |v: f64| (v - 0.5).ceil().max(0.0) as usize;
        let last = |v: f64, n: usize| ((v - 0.5).floor()).min(n as f64 - 1.0);
        let (ylast, xlast) = (last(hi(1), height), last(hi(0), width));
        if ylast < 0.0 || xlast < 0.0 {
            return None;
        }
        let (y0, x0) = (first(lo(1)), first(lo(0)));
        let (y1, x1) = (ylast as usize, xlast as usize);
        if y0 > y1 || x0 > x1 {
            return None;
        }
        Some(Self { p, perm, area: area.abs(), owns, y0, y1, x0, x1 })
    }

    /// Barycentric weights in the caller's original corner order.
    fn covers(&self, c: [f64; 2]) -> Option<[f64; 3]> {
        let mut e = [0.0; 3];
        for i in 0..3 {
            e[i] = edge_fn(self.p[i], self.p[(i + 1) % 3], c);
            if e[i] < 0.0 || (e[i] == 0.0 && !self.owns[i]) {
                return None;
            }
        }
        // weight of vertex k is the edge function of the opposite edge
        let w = [e[1] / self.area, e[2] / self.area, e[0] / self.area];
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[self.perm[k]] = w[k];
        }
        Some(out)
    }
}

/// Which face covers a uv pixel, and where.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub face: u32,
    pub bary: [f64; 3],
}

fn bin_rows(setups: &[Option<TriSetup>], height: usize) -> Vec<Vec<u32>> {
    let mut rows = vec![Vec::new(); height];
    for (fi, s) in setups.iter().enumerate() {
        if let Some(s) = s {
            for row in &mut rows[s.y0..=s.y1] {
                row.push(fi as u32);
            }
        }
    }
    rows
}

/// Per-pixel uv coverage of a square `resolution × resolution` atlas.
/// Fails if any pixel centre is covered by two faces.
pub fn uv_coverage(mesh: &Mesh, resolution: usize) -> Result<Vec<Option<Coverage>>> {
    let r = resolution as f64;
    let setups: Vec<Option<TriSetup>> = (0..mesh.faces.len())
        .map(|fi| {
            let uv = mesh.face_uvs(fi).map(|t| [t[0] as f64 * r, t[1] as f64 * r]);
            TriSetup::new(uv, resolution, resolution)
        })
        .collect();
    let rows = bin_rows(&setups, resolution);
    let per_row: Vec<Result<Vec<Option<Coverage>>>> = rows
        .par_iter()
        .enumerate()
        .map(|(y, faces)| {
            let mut row: Vec<Option<Coverage>> = vec![None; resolution];
            let cy = y as f64 + 0.5;
            for &fi in faces {
                let s = setups[fi as usize].as_ref().expect("binned faces have a setup");
                for (x, slot) in row.iter_mut().enumerate().take(s.x1 + 1).skip(s.x0) {
                    if let Some(bary) = s.covers([x as f64 + 0.5, cy]) {
                        if let Some(prev) = slot {
                            return Err(Error::UvOverlap { faces: vec![prev.face as usize, fi as usize], x, y });
                        }
                        *slot = Some(Coverage { face: fi, bary });
                    }
                }
            }
            Ok(row)
        })
        .collect();
    let mut out = Vec::with_capacity(resolution * resolution);
    for row in per_row {
        out.extend(row?);
    }
    Ok(out)
}

/// Bakes the uv position map and coverage mask of a normalised mesh.
///
/// Covered pixels hold the barycentric interpolation of the face's
/// positions at the pixel centre; uncovered pixels are zero.
pub fn bake_position_map(mesh: &Mesh, resolution: usize) -> Result<(ImageGrid, ImageGrid)> {
    if let Some(p) = mesh.positions.iter().find(|p| p.iter().any(|v| v.abs() > 1.0)) {
        return Err(Error::OutOfRange(format!("position {p:?} outside [-1,1]; normalise the mesh first")));
    }
    let cov = uv_coverage(mesh, resolution)?;
    let mut pos = ImageGrid::zeros(resolution, resolution, Semantics::Xyz);
    let mut mask = ImageGrid::zeros(resolution, resolution, Semantics::Mask);
    for (i, c) in cov.iter().enumerate() {
        if let Some(c) = c {
            let p = mesh.interpolate_position(c.face as usize, c.bary);
            for d in 0..3 {
                pos.data[i * 3 + d] = (p[d] as f32).clamp(-1.0, 1.0);
            }
            mask.data[i] = 1.0;
        }
    }
    Ok((pos, mask))
}

/// Alpha-driven normalisation: positions whose uv texels are covered and
/// have `alpha >= 0.5` define the frame, then the map is baked again in it.
/// Without alpha every covered texel is used.
pub fn normalize_and_bake(
    mesh: &Mesh,
    alpha: Option<&ImageGrid>,
    resolution: usize,
) -> Result<(Mesh, NormalizeTransform, ImageGrid, ImageGrid)> {
    if let Some(a) = alpha {
        if a.height != resolution || a.width != resolution || a.semantics != Semantics::Mask {
            return Err(Error::Shape("alpha must be a mask at the bake resolution".into()));
        }
    }
    let cov = uv_coverage(mesh, resolution)?;
    let selected = cov.iter().enumerate().filter_map(|(i, c)| {
        let c = c.as_ref()?;
        match alpha {
            Some(a) if a.data[i] < 0.5 => None,
            _ => Some(mesh.interpolate_position(c.face as usize, c.bary)),
        }
    });
    let tf = NormalizeTransform::fit(selected)?;
    let normalized = tf.apply_mesh(mesh);
    // positions outside the alpha-selected region may fall outside the cube
    let clamped = Mesh {
        positions: normalized.positions.iter().map(|p| p.map(|v| v.clamp(-1.0, 1.0))).collect(),
        ..normalized.clone()
    };
    let (pos, mask) = bake_position_map(&clamped, resolution)?;
    Ok((normalized, tf, pos, mask))
}

/// Bilinear lookup with the pixel-centre convention: uv `(0.5/W, 0.5/H)`
/// lands exactly on texel `(0, 0)`. Coordinates are clamped to the edge.
pub fn sample_texture(texture: &ImageGrid, uv: [f64; 2]) -> Vec<f32> {
    let c = texture.channels();
    let (w, h) = (texture.width, texture.height);
    let x = uv[0] * w as f64 - 0.5;
    let y = uv[1] * h as f64 - 0.5;
    let xf = x.floor();
    let yf = y.floor();
    let (fx, fy) = ((x - xf) as f32, (y - yf) as f32);
    let xi = |i: f64| i.clamp(0.0, (w - 1) as f64) as usize;
    let yi = |i: f64| i.clamp(0.0, (h - 1) as f64) as usize;
    let (x0, x1, y0, y1) = (xi(xf), xi(xf + 1.0), yi(yf), yi(yf + 1.0));
    let mut out = vec![0.0; c];
    for (k, o) in out.iter_mut().enumerate() {
        let t00 = texture.pixel(x0, y0)[k];
        let t10 = texture.pixel(x1, y0)[k];
        let t01 = texture.pixel(x0, y1)[k];
        let t11 = texture.pixel(x1, y1)[k];
        let top = t00 + (t10 - t00) * fx;
        let bot = t01 + (t11 - t01) * fx;
        *o = top + (bot - top) * fy;
    }
    out
}

/// Fragment shader: face index and barycentrics in, colour out (`None`
/// discards the fragment).
pub type Shader<'a> = dyn Fn(usize, [f64; 3]) -> Option<[f32; 3]> + Sync + 'a;

pub struct RenderItem<'a> {
    pub mesh: &'a Mesh,
    pub shader: &'a Shader<'a>,
}

/// Z-buffered orthographic rendering of several meshes into one square
/// image. Ties in depth keep the earlier item/face.
pub fn render_scene(items: &[RenderItem<'_>], camera: &Camera, resolution: usize, background: [f32; 3]) -> ImageGrid {
    struct Prepared {
        item: usize,
        face: usize,
        setup: TriSetup,
        depth: [f64; 3],
    }
    let mut prepared = Vec::new();
    for (ii, it) in items.iter().enumerate() {
        for fi in 0..it.mesh.faces.len() {
            let pts = it.mesh.face_positions(fi).map(|p| camera.project(p, resolution));
            if let Some(setup) = TriSetup::new(pts.map(|p| p.0), resolution, resolution) {
                prepared.push(Prepared { item: ii, face: fi, setup, depth: pts.map(|p| p.1) });
            }
        }
    }
    let setups: Vec<Option<TriSetup>> = prepared.iter().map(|p| Some(p.setup)).collect();
    let rows = bin_rows(&setups, resolution);
    let pixels: Vec<Vec<[f32; 3]>> = rows
        .par_iter()
        .enumerate()
        .map(|(y, tris)| {
            let mut color = vec![background; resolution];
            let mut depth = vec![f64::NEG_INFINITY; resolution];
            let cy = y as f64 + 0.5;
            for &ti in tris {
                let t = &prepared[ti as usize];
                for x in t.setup.x0..=t.setup.x1 {
                    let Some(b) = t.setup.covers([x as f64 + 0.5, cy]) else { continue };
                    let z = b[0] * t.depth[0] + b[1] * t.depth[1] + b[2] * t.depth[2];
                    if z <= depth[x] {
                        continue;
                    }
                    if let Some(c) = (items[t.item].shader)(t.face, b) {
                        depth[x] = z;
                        color[x] = c;
                    }
                }
            }
            color
        })
        .collect();
    let data = pixels.into_iter().flatten().flatten().collect();
    ImageGrid { height: resolution, width: resolution, semantics: Semantics::Rgb, data }
}

/// Interpolated uv of a fragment.
pub fn interpolate_uv(mesh: &Mesh, face: usize, bary: [f64; 3]) -> [f64; 2] {
    let uv = mesh.face_uvs(face);
    [0, 1].map(|d| bary[0] * uv[0][d] as f64 + bary[1] * uv[1][d] as f64 + bary[2] * uv[2][d] as f64)
}

/// Renders a textured mesh. Fragments whose bilinearly sampled alpha is
/// below 0.5 are discarded; lighting is identity.
pub fn render_view(
    mesh: &Mesh,
    texture: &ImageGrid,
    alpha: &ImageGrid,
    camera: &Camera,
    resolution: usize,
) -> Result<ImageGrid> {
    render_view_with_background(mesh, texture, alpha, camera, resolution, RENDER_BACKGROUND)
}

pub fn render_view_with_background(
    mesh: &Mesh,
    texture: &ImageGrid,
    alpha: &ImageGrid,
    camera: &Camera,
    resolution: usize,
    background: [f32; 3],
) -> Result<ImageGrid> {
    if !texture.same_size(alpha) {
        return Err(Error::Shape(format!(
            "texture is {}x{} but alpha is {}x{}",
            texture.height, texture.width, alpha.height, alpha.width
        )));
    }
    if texture.channels() != 3 || alpha.channels() != 1 {
        return Err(Error::Shape("render needs a 3-channel texture and a 1-channel alpha".into()));
    }
    let shader = |face: usize, bary: [f64; 3]| {
        let uv = interpolate_uv(mesh, face, bary);
        if sample_texture(alpha, uv)[0] < 0.5 {
            return None;
        }
        let c = sample_texture(texture, uv);
        Some([c[0], c[1], c[2]])
    };
    Ok(render_scene(&[RenderItem { mesh, shader: &shader }], camera, resolution, background))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Face;

    fn tri(positions: [[f32; 3]; 3], uvs: [[f32; 2]; 3]) -> Mesh {
        Mesh::new(positions.to_vec(), uvs.to_vec(), vec![Face { pos: [0, 1, 2], uv: [0, 1, 2] }]).unwrap()
    }

    #[test]
    fn bake_matches_barycentric_at_pixel_centre() {
        let m = tri([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]], [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let (pos, mask) = bake_position_map(&m, 4).unwrap();
        assert_eq!(pos.pixel(0, 0), &[-0.75, -0.75, 0.0]);
        assert_eq!(mask.pixel(0, 0), &[1.0]);
        // centre (0.875, 0.875) lies outside the triangle
        assert_eq!(mask.pixel(3, 3), &[0.0]);
        assert_eq!(pos.pixel(3, 3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_mesh_bakes_to_zeros() {
        let m = Mesh { positions: vec![], uvs: vec![], faces: vec![] };
        let (pos, mask) = bake_position_map(&m, 8).unwrap();
        assert!(pos.data.iter().all(|v| *v == 0.0));
        assert!(mask.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn overlapping_charts_are_rejected() {
        let uv = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let m = Mesh::new(
            vec![[0.0; 3], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]],
            uv.to_vec(),
            vec![Face { pos: [0, 1, 2], uv: [0, 1, 2] }, Face { pos: [0, 1, 2], uv: [0, 1, 2] }],
        )
        .unwrap();
        match bake_position_map(&m, 8) {
            Err(Error::UvOverlap { faces, .. }) => assert_eq!(faces, vec![0, 1]),
            other => panic!("expected overlap, got {other:?}"),
        }
    }

    #[test]
    fn shared_diagonal_is_covered_once() {
        // the diagonal of the unit square passes through pixel centres
        let m = Mesh::new(
            vec![[0.0; 3], [0.5, 0.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.5, 0.0]],
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![Face { pos: [0, 1, 2], uv: [0, 1, 2] }, Face { pos: [0, 2, 3], uv: [0, 2, 3] }],
        )
        .unwrap();
        let (_, mask) = bake_position_map(&m, 8).unwrap();
        assert!(mask.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sample_texture_conventions() {
        let one = ImageGrid::filled(1, 1, Semantics::Rgb, &[0.2, 0.4, 0.6]);
        assert_eq!(sample_texture(&one, [0.9, 0.1]), vec![0.2, 0.4, 0.6]);
        let two = ImageGrid::new(1, 2, Semantics::Rgb, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(sample_texture(&two, [0.5, 0.5]), vec![0.5, 0.5, 0.5]);
        assert_eq!(sample_texture(&two, [0.25, 0.5]), vec![0.0, 0.0, 0.0]);
    }

    fn front_quad() -> Mesh {
        // quad spanning x in [-0.5, 0.25], y in [-0.25, 0.5]
        Mesh::new(
            vec![[-0.5, -0.25, 0.0], [0.25, -0.25, 0.0], [0.25, 0.5, 0.0], [-0.5, 0.5, 0.0]],
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![Face { pos: [0, 1, 2], uv: [0, 1, 2] }, Face { pos: [0, 2, 3], uv: [0, 2, 3] }],
        )
        .unwrap()
    }

    #[test]
    fn solid_texture_renders_rectangle() {
        let m = front_quad();
        let red = ImageGrid::filled(4, 4, Semantics::Rgb, &[1.0, 0.0, 0.0]);
        let alpha = ImageGrid::filled(4, 4, Semantics::Mask, &[1.0]);
        let img = render_view(&m, &red, &alpha, &Camera::front(), 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                // x in [-0.5, 0.25] -> cols 4..=9, y in [-0.25, 0.5] -> rows 4..=9
                let inside = (4..10).contains(&x) && (4..10).contains(&y);
                let want: &[f32] = if inside { &[1.0, 0.0, 0.0] } else { &RENDER_BACKGROUND };
                assert_eq!(img.pixel(x, y), want, "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn back_view_mirrors_front() {
        let m = front_quad();
        let mut tex = ImageGrid::zeros(8, 8, Semantics::Rgb);
        for y in 0..8 {
            for x in 0..8 {
                tex.pixel_mut(x, y).copy_from_slice(&[x as f32 / 7.0, y as f32 / 7.0, 0.5]);
            }
        }
        let alpha = ImageGrid::filled(8, 8, Semantics::Mask, &[1.0]);
        let f = render_view(&m, &tex, &alpha, &Camera::front(), 32).unwrap();
        let b = render_view(&m, &tex, &alpha, &Camera::back(), 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(f.pixel(x, y), b.pixel(31 - x, y));
            }
        }
    }

    #[test]
    fn zero_alpha_discards_everything() {
        let m = front_quad();
        let red = ImageGrid::filled(4, 4, Semantics::Rgb, &[1.0, 0.0, 0.0]);
        let alpha = ImageGrid::zeros(4, 4, Semantics::Mask);
        let img = render_view(&m, &red, &alpha, &Camera::front(), 16).unwrap();
        assert!(img.data.chunks(3).all(|p| p == RENDER_BACKGROUND));
        let wrong = ImageGrid::zeros(8, 8, Semantics::Mask);
        assert!(render_view(&m, &red, &wrong, &Camera::front(), 16).is_err());
    }

    #[test]
    fn nearer_surface_wins() {
        let mk = |z: f32| {
            Mesh::new(
                vec![[-1.0, -1.0, z], [1.0, -1.0, z], [-1.0, 1.0, z]],
                vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                vec![Face { pos: [0, 1, 2], uv: [0, 1, 2] }],
            )
            .unwrap()
        };
        let (near, far) = (mk(0.5), mk(-0.5));
        let red = |_: usize, _: [f64; 3]| Some([1.0, 0.0, 0.0]);
        let blue = |_: usize, _: [f64; 3]| Some([0.0, 0.0, 1.0]);
        let items = [RenderItem { mesh: &far, shader: &blue }, RenderItem { mesh: &near, shader: &red }];
        let f = render_scene(&items, &Camera::front(), 8, RENDER_BACKGROUND);
        assert_eq!(f.pixel(1, 6), &[1.0, 0.0, 0.0]);
        let b = render_scene(&items, &Camera::back(), 8, RENDER_BACKGROUND);
        assert_eq!(b.pixel(6, 6), &[0.0, 0.0, 1.0]);
    }
}
