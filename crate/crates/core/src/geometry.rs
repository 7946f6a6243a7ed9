//! Triangle meshes with a UV atlas: OBJ input/output, normalisation into the
//! `[-1, 1]` cube and detection of UV seams.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One triangle; each corner carries a position index and a uv index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Face {
    pub pos: [u32; 3],
    pub uv: [u32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub positions: Vec<[f32; 3]>,
    pub uvs: Vec<[f32; 2]>,
    pub faces: Vec<Face>,
}

const MIN_UV_AREA: f64 = 1e-12;

impl Mesh {
    /// Builds a mesh and checks every invariant.
    pub fn new(positions: Vec<[f32; 3]>, uvs: Vec<[f32; 2]>, faces: Vec<Face>) -> Result<Self> {
        let mesh = Self { positions, uvs, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidMesh(format!("position {i} is not finite")));
            }
        }
        for (i, uv) in self.uvs.iter().enumerate() {
            if !uv.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::InvalidMesh(format!("uv {i} = {uv:?} lies outside [0,1]^2")));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                if f.pos[k] as usize >= self.positions.len() {
                    return Err(Error::InvalidMesh(format!("face {fi} position index {} out of range", f.pos[k])));
                }
                if f.uv[k] as usize >= self.uvs.len() {
                    return Err(Error::InvalidMesh(format!("face {fi} uv index {} out of range", f.uv[k])));
                }
            }
            if self.uv_area(fi).abs() < MIN_UV_AREA {
                return Err(Error::InvalidMesh(format!("face {fi} has zero uv area")));
            }
        }
        Ok(())
    }

    pub fn face_positions(&self, fi: usize) -> [[f32; 3]; 3] {
        let f = &self.faces[fi];
        f.pos.map(|i| self.positions[i as usize])
    }

    pub fn face_uvs(&self, fi: usize) -> [[f32; 2]; 3] {
        let f = &self.faces[fi];
        f.uv.map(|i| self.uvs[i as usize])
    }

    /// Signed uv-space area of a face.
    pub fn uv_area(&self, fi: usize) -> f64 {
        let [a, b, c] = self.face_uvs(fi).map(|p| [p[0] as f64, p[1] as f64]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    /// 3-D position of barycentric point `bary` on face `fi`.
    pub fn interpolate_position(&self, fi: usize, bary: [f64; 3]) -> [f64; 3] {
        let p = self.face_positions(fi);
        let mut out = [0.0; 3];
        for (k, w) in bary.iter().enumerate() {
            for d in 0..3 {
                out[d] += w * p[k][d] as f64;
            }
        }
        out
    }

    /// Concatenates meshes, offsetting indices.
    pub fn merge(parts: &[Mesh]) -> Mesh {
        let mut out = Mesh { positions: Vec::new(), uvs: Vec::new(), faces: Vec::new() };
        for m in parts {
            let (po, uo) = (out.positions.len() as u32, out.uvs.len() as u32);
            out.positions.extend_from_slice(&m.positions);
            out.uvs.extend_from_slice(&m.uvs);
            out.faces.extend(m.faces.iter().map(|f| Face { pos: f.pos.map(|i| i + po), uv: f.uv.map(|i| i + uo) }));
        }
        out
    }
}

/// Parses the `v` / `vt` / `f` subset of Wavefront OBJ.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let fields: Vec<&str> = it.collect();
        let num = |s: &str| -> Result<f32> {
            s.parse::<f32>().map_err(|_| Error::Parse { line: line_no, msg: format!("bad number {s:?}") })
        };
        match tag {
            "v" => {
                if fields.len() < 3 {
                    return Err(Error::Parse { line: line_no, msg: "vertex needs 3 coordinates".into() });
                }
                positions.push([num(fields[0])?, num(fields[1])?, num(fields[2])?]);
            }
            "vt" => {
                if fields.len() < 2 {
                    return Err(Error::Parse { line: line_no, msg: "texture coordinate needs 2 values".into() });
                }
                let uv = [num(fields[0])?, num(fields[1])?];
                if !uv.iter().all(|v| (0.0..=1.0).contains(v)) {
                    return Err(Error::Parse { line: line_no, msg: format!("uv {uv:?} outside [0,1]") });
                }
                uvs.push(uv);
            }
            "f" => {
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("only triangles are supported, got {} corners", fields.len()),
                    });
                }
                let mut pos = [0u32; 3];
                let mut uv = [0u32; 3];
                for (k, corner) in fields.iter().enumerate() {
                    let mut parts = corner.split('/');
                    let p = parts.next().unwrap_or("");
                    let t = parts.next().unwrap_or("");
                    if t.is_empty() {
                        return Err(Error::MissingUv { line: line_no });
                    }
                    pos[k] = resolve_index(p, positions.len(), line_no, "position")?;
                    uv[k] = resolve_index(t, uvs.len(), line_no, "uv")?;
                }
                faces.push(Face { pos, uv });
                face_lines.push(line_no);
            }
            _ => {}
        }
    }
    let mesh = Mesh { positions, uvs, faces };
    for (fi, line) in face_lines.iter().enumerate() {
        if mesh.uv_area(fi).abs() < MIN_UV_AREA {
            return Err(Error::Parse { line: *line, msg: "face has zero uv area".into() });
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

fn resolve_index(s: &str, count: usize, line: usize, what: &'static str) -> Result<u32> {
    let i: i64 = s.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what} index {s:?}") })?;
    let resolved = if i < 0 { count as i64 + i } else { i - 1 };
    if resolved < 0 || resolved >= count as i64 {
        return Err(Error::IndexOutOfRange { line, what, index: i, count });
    }
    Ok(resolved as u32)
}

pub fn load_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

/// Serialises with shortest round-trip float formatting so that
/// `parse_obj(&to_obj(m)) == m`.
pub fn to_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    for p in &mesh.positions {
        let _ = writeln!(s, "v {:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for t in &mesh.uvs {
        let _ = writeln!(s, "vt {:?} {:?}", t[0], t[1]);
    }
    for f in &mesh.faces {
        let _ = writeln!(
            s,
            "f {}/{} {}/{} {}/{}",
            f.pos[0] + 1,
            f.uv[0] + 1,
            f.pos[1] + 1,
            f.uv[1] + 1,
            f.pos[2] + 1,
            f.uv[2] + 1
        );
    }
    s
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, to_obj(mesh)).map_err(|e| Error::io(path, e))
}

/// Uniform transform `p ↦ (p + translation) · scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub translation: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    pub const IDENTITY: Self = Self { translation: [0.0; 3], scale: 1.0 };

    /// Centres the bounding box of `points` at the origin and scales the
    /// largest absolute coordinate to 1.
    pub fn fit<I: IntoIterator<Item = [f64; 3]>>(points: I) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !any {
            return Err(Error::InvalidMesh("no positions selected for normalisation".into()));
        }
        let half = (0..3).map(|d| 0.5 * (hi[d] - lo[d])).fold(0.0, f64::max);
        if half <= 0.0 {
            return Err(Error::DegenerateExtent);
        }
        let translation = [0, 1, 2].map(|d| -0.5 * (hi[d] + lo[d]));
        Ok(Self { translation, scale: 1.0 / half })
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|d| (p[d] + self.translation[d]) * self.scale)
    }

    pub fn apply_mesh(&self, mesh: &Mesh) -> Mesh {
        let mut out = mesh.clone();
        for p in &mut out.positions {
            let q = self.apply(p.map(|v| v as f64));
            *p = q.map(|v| v as f32);
        }
        out
    }
}

/// Normalises the mesh so the selected positions fit `[-1, 1]` with a single
/// isotropic scale, centred on their bounding-box midpoint.
pub fn normalize_mesh(mesh: &Mesh, selected: Option<&[usize]>) -> Result<(Mesh, NormalizeTransform)> {
    let tf = match selected {
        Some(sel) => {
            if sel.is_empty() {
                return Err(Error::InvalidMesh("selection is empty".into()));
            }
            if let Some(bad) = sel.iter().find(|&&i| i >= mesh.positions.len()) {
                return Err(Error::InvalidMesh(format!("selected position {bad} out of range")));
            }
            NormalizeTransform::fit(sel.iter().map(|&i| mesh.positions[i].map(|v| v as f64)))?
        }
        None => NormalizeTransform::fit(mesh.positions.iter().map(|p| p.map(|v| v as f64)))?,
    };
    Ok((tf.apply_mesh(mesh), tf))
}

/// One side of a seam: edge `edge` of face `face` runs from corner `edge`
/// to corner `(edge + 1) % 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRef {
    pub face: usize,
    pub edge: usize,
}

impl EdgeRef {
    pub fn corners(&self) -> (usize, usize) {
        (self.edge, (self.edge + 1) % 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeamPair {
    pub a: EdgeRef,
    pub b: EdgeRef,
}

/// A point sampled on a seam: the same surface point seen from both sides.
#[derive(Clone, Copy, Debug)]
pub struct SeamSample {
    pub uv_a: [f64; 2],
    pub uv_b: [f64; 2],
    pub bary_a: [f64; 3],
    pub bary_b: [f64; 3],
}

impl SeamPair {
    /// Samples the seam at arc parameters `(k + 0.5) / n`, measured from the
    /// endpoint with the lower position index on both sides.
    pub fn samples(&self, mesh: &Mesh, n: usize) -> Vec<SeamSample> {
        let side = |e: &EdgeRef| {
            let f = &mesh.faces[e.face];
            let (c0, c1) = e.corners();
            if f.pos[c0] < f.pos[c1] {
                (c0, c1)
            } else {
                (c1, c0)
            }
        };
        let (a0, a1) = side(&self.a);
        let (b0, b1) = side(&self.b);
        let uva = mesh.face_uvs(self.a.face);
        let uvb = mesh.face_uvs(self.b.face);
        (0..n)
            .map(|k| {
                let s = (k as f64 + 0.5) / n as f64;
                let mut bary_a = [0.0; 3];
                bary_a[a0] = 1.0 - s;
                bary_a[a1] = s;
                let mut bary_b = [0.0; 3];
                bary_b[b0] = 1.0 - s;
                bary_b[b1] = s;
                let lerp = |uv: &[[f32; 2]; 3], i0: usize, i1: usize| {
                    [0, 1].map(|d| (1.0 - s) * uv[i0][d] as f64 + s * uv[i1][d] as f64)
                };
                SeamSample { uv_a: lerp(&uva, a0, a1), uv_b: lerp(&uvb, b0, b1), bary_a, bary_b }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeamEdgeList {
    pub pairs: Vec<SeamPair>,
}

impl SeamEdgeList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Finds every manifold edge whose two incident faces share the 3-D
/// endpoints but disagree on the uv coordinates of those endpoints.
pub fn build_seam_edges(mesh: &Mesh) -> SeamEdgeList {
    let mut by_edge: HashMap<(u32, u32), Vec<EdgeRef>> = HashMap::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        for e in 0..3 {
            let (p0, p1) = (f.pos[e], f.pos[(e + 1) % 3]);
            by_edge.entry((p0.min(p1), p0.max(p1))).or_default().push(EdgeRef { face: fi, edge: e });
        }
    }
    let uv_at = |r: &EdgeRef, pos: u32| -> [f32; 2] {
        let f = &mesh.faces[r.face];
        let k = (0..3).find(|&k| f.pos[k] == pos).expect("edge endpoint belongs to its face");
        mesh.uvs[f.uv[k] as usize]
    };
    let mut pairs: Vec<SeamPair> = by_edge
        .iter()
        .filter(|(_, refs)| refs.len() == 2)
        .filter_map(|(&(p0, p1), refs)| {
            let (a, b) = (refs[0], refs[1]);
            let split = uv_at(&a, p0) != uv_at(&b, p0) || uv_at(&a, p1) != uv_at(&b, p1);
            split.then_some(SeamPair { a, b })
        })
        .collect();
    pairs.sort_by_key(|p| (p.a.face, p.a.edge, p.b.face, p.b.edge));
    SeamEdgeList { pairs }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD: &str = "# unit quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3\nf 1/1 3/3 4/4\n";

    #[test]
    fn loads_single_quad() {
        let m = parse_obj(QUAD).unwrap();
        assert_eq!(m.faces.len(), 2);
        assert_eq!(m.positions.len(), 4);
        assert_eq!(m.uvs.len(), 4);
        assert_eq!(m.faces[1], Face { pos: [0, 2, 3], uv: [0, 2, 3] });
    }

    #[test]
    fn out_of_range_index_reports_line() {
        let text = QUAD.replace("f 1/1 3/3 4/4", "f 1/1 2/2 5/3");
        match parse_obj(&text) {
            Err(Error::IndexOutOfRange { line, index, .. }) => {
                assert_eq!(line, 11);
                assert_eq!(index, 5);
            }
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn missing_uv_is_an_error() {
        let text = QUAD.replace("f 1/1 3/3 4/4", "f 1 3 4");
        assert!(matches!(parse_obj(&text), Err(Error::MissingUv { line: 11 })));
        let text = QUAD.replace("f 1/1 3/3 4/4", "f 1//1 3//3 4//4");
        assert!(matches!(parse_obj(&text), Err(Error::MissingUv { line: 11 })));
    }

    #[test]
    fn rejects_quads_and_out_of_square_uvs() {
        assert!(parse_obj(&QUAD.replace("f 1/1 3/3 4/4", "f 1/1 2/2 3/3 4/4")).is_err());
        assert!(parse_obj(&QUAD.replace("vt 1 1", "vt 1.5 1")).is_err());
    }

    #[test]
    fn zero_uv_area_face_is_rejected() {
        let text = QUAD.replace("f 1/1 3/3 4/4", "f 1/1 3/1 4/1");
        assert!(matches!(parse_obj(&text), Err(Error::Parse { line: 11, .. })));
    }

    #[test]
    fn normalize_two_points() {
        let m = Mesh { positions: vec![[2.0; 3], [4.0; 3]], uvs: vec![], faces: vec![] };
        let (n, tf) = normalize_mesh(&m, None).unwrap();
        assert_eq!(tf.translation, [-3.0; 3]);
        assert_eq!(tf.scale, 1.0);
        assert_eq!(n.positions, vec![[-1.0; 3], [1.0; 3]]);
    }

    #[test]
    fn normalize_unit_cube_is_identity() {
        let mut positions = Vec::new();
        for i in 0..8 {
            positions.push([0, 1, 2].map(|d| if i >> d & 1 == 1 { 1.0 } else { -1.0 }));
        }
        let m = Mesh { positions, uvs: vec![], faces: vec![] };
        let (n, tf) = normalize_mesh(&m, None).unwrap();
        assert_eq!(tf, NormalizeTransform::IDENTITY);
        assert_eq!(n, m);
    }

    #[test]
    fn normalize_rejects_degenerate_selection() {
        let m = Mesh { positions: vec![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [5.0, 0.0, 0.0]], uvs: vec![], faces: vec![] };
        assert!(matches!(normalize_mesh(&m, Some(&[0, 1])), Err(Error::DegenerateExtent)));
        assert!(normalize_mesh(&m, Some(&[])).is_err());
        let (n, _) = normalize_mesh(&m, Some(&[0, 2])).unwrap();
        assert_eq!(n.positions[0], n.positions[1]);
    }

    #[test]
    fn single_triangle_has_no_seams() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![Face { pos: [0, 1, 2], uv: [0, 1, 2] }],
        )
        .unwrap();
        assert!(build_seam_edges(&m).is_empty());
    }

    #[test]
    fn continuous_sheet_has_no_seams() {
        assert!(build_seam_edges(&parse_obj(QUAD).unwrap()).is_empty());
    }

    #[test]
    fn split_quad_has_one_seam() {
        // same two triangles, but the diagonal's uvs are duplicated and moved
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 0.4 0\nvt 0.4 0.4\nvt 0.6 0.6\nvt 1 1\nvt 0.6 1\nf 1/1 2/2 3/3\nf 1/4 3/5 4/6\n";
        let m = parse_obj(text).unwrap();
        let seams = build_seam_edges(&m);
        assert_eq!(seams.len(), 1);
        let s = seams.pairs[0];
        for smp in s.samples(&m, 16) {
            let pa = m.interpolate_position(s.a.face, smp.bary_a);
            let pb = m.interpolate_position(s.b.face, smp.bary_b);
            assert_eq!(pa, pb);
        }
    }
}
