//! Indexed triangle meshes with a per-vertex UV atlas.
//!
//! UV seams duplicate vertices. `weld[i]` names the canonical copy of vertex
//! `i`, so topology (closedness, Euler characteristic) and shading normals are
//! computed on the welded surface while every copy keeps its own UV.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    /// Counter-clockwise when seen from outside.
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
    pub weld: Vec<usize>,
    /// Area-weighted unit vertex normals (empty until computed).
    pub normals: Vec<Vec3>,
}

impl Mesh {
    /// Build a mesh, welding vertices whose positions are bit-identical.
    pub fn new(positions: Vec<Vec3>, faces: Vec<[usize; 3]>, uvs: Vec<[f64; 2]>) -> Result<Self> {
        let mut first: HashMap<[u64; 3], usize> = HashMap::new();
        let weld = positions
            .iter()
            .enumerate()
            .map(|(i, p)| *first.entry([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).or_insert(i))
            .collect();
        Self::with_weld(positions, faces, uvs, weld)
    }

    pub fn with_weld(positions: Vec<Vec3>, faces: Vec<[usize; 3]>, uvs: Vec<[f64; 2]>, weld: Vec<usize>) -> Result<Self> {
        let n = positions.len();
        if uvs.len() != n || weld.len() != n {
            return Err(Error::invalid("mesh", format!("{n} positions, {} uvs, {} weld ids", uvs.len(), weld.len())));
        }
        if let Some(f) = faces.iter().position(|f| f.iter().any(|&v| v >= n)) {
            return Err(Error::invalid("mesh", format!("face {f} indexes past {n} vertices")));
        }
        if weld.iter().enumerate().any(|(i, &w)| w > i || weld[w] != w) {
            return Err(Error::invalid("mesh", "weld ids must point at their own canonical vertex"));
        }
        Ok(Mesh { positions, faces, uvs, weld, normals: Vec::new() })
    }

    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn corners(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.positions[a], self.positions[b], self.positions[c]]
    }

    /// Twice-area vector `(b - a) x (c - a)`.
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.corners(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_cross(f).norm()
    }

    /// Unit geometric normal; zero for degenerate faces.
    pub fn face_normal(&self, f: usize) -> Vec3 {
        let n = self.face_cross(f);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    /// Recompute area-weighted unit vertex normals over the welded surface.
    pub fn compute_normals(&mut self) -> Result<()> {
        let mut acc = vec![Vec3::zeros(); self.positions.len()];
        for f in 0..self.faces.len() {
            let n = self.face_cross(f);
            for &v in &self.faces[f] {
                acc[self.weld[v]] += n;
            }
        }
        let mut normals = Vec::with_capacity(acc.len());
        for (i, &w) in self.weld.iter().enumerate() {
            let n = acc[w];
            let len = n.norm();
            if !(len > 0.0 && len.is_finite()) {
                return Err(Error::NonFinite(format!("normal at vertex {i}")));
            }
            normals.push(n / len);
        }
        self.normals = normals;
        Ok(())
    }

    pub fn with_normals(mut self) -> Result<Self> {
        self.compute_normals()?;
        Ok(self)
    }

    /// Welded edges mapped to the number of faces using them.
    fn edge_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut edges = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (self.weld[f[k]], self.weld[f[(k + 1) % 3]]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every welded edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        self.edge_counts().values().all(|&c| c == 2)
    }

    /// `V - E + F` over the welded surface (vertices unused by faces ignored).
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.positions.len()];
        for f in &self.faces {
            for &v in f {
                used[self.weld[v]] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.faces.len() as i64
    }

    /// Connected components of the welded surface, as lists of faces.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.positions.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.faces {
            let a = find(&mut parent, self.weld[f[0]]);
            for &v in &f[1..] {
                let b = find(&mut parent, self.weld[v]);
                parent[b] = a;
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, f) in self.faces.iter().enumerate() {
            let root = find(&mut parent, self.weld[f[0]]);
            groups.entry(root).or_default().push(i);
        }
        groups.into_values().collect()
    }

    /// Sub-mesh made of the given faces (vertex indices are kept).
    pub fn select_faces(&self, faces: &[usize]) -> Mesh {
        Mesh { faces: faces.iter().map(|&f| self.faces[f]).collect(), ..self.clone() }
    }

    pub fn translated(&self, t: Vec3) -> Mesh {
        let mut m = self.clone();
        m.positions.iter_mut().for_each(|p| *p += t);
        m
    }

    /// Move every vertex by `d` along its area-weighted vertex normal.
    pub fn dilate(&self, d: f64) -> Result<Mesh> {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::invalid("dilation radius", format!("{d}")));
        }
        let mut base = self.clone();
        if base.normals.len() != base.positions.len() {
            base.compute_normals()?;
        }
        let mut out = base.clone();
        for (p, n) in out.positions.iter_mut().zip(&base.normals) {
            *p += n * d;
        }
        out.compute_normals()?;
        Ok(out)
    }

    /// Concatenate meshes, offsetting indices and weld ids.
    pub fn merge(parts: &[Mesh]) -> Result<Mesh> {
        let (mut positions, mut faces, mut uvs, mut weld) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for m in parts {
            let off = positions.len();
            positions.extend_from_slice(&m.positions);
            uvs.extend_from_slice(&m.uvs);
            weld.extend(m.weld.iter().map(|w| w + off));
            faces.extend(m.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        }
        Mesh::with_weld(positions, faces, uvs, weld)
    }

    /// Wavefront OBJ text with one `vt` per vertex.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for p in &self.positions {
            let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
        }
        for t in &self.uvs {
            let _ = writeln!(s, "vt {} {}", t[0], t[1]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {0}/{0} {1}/{1} {2}/{2}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parse OBJ triangles; each distinct `v/vt` pair becomes one vertex.
    pub fn from_obj(text: &str) -> Result<Mesh> {
        let bad = |line: &str| Error::invalid("obj", format!("cannot parse `{line}`"));
        let (mut vs, mut vts) = (Vec::new(), Vec::new());
        let mut corners: Vec<[(usize, Option<usize>); 3]> = Vec::new();
        for line in text.lines() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(line))?;
                    let [x, y, z] = c[..] else { return Err(bad(line)) };
                    vs.push(Vec3::new(x, y, z));
                }
                Some("vt") => {
                    let c: Vec<f64> = it.take(2).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(line))?;
                    let [u, v] = c[..] else { return Err(bad(line)) };
                    vts.push([u, v]);
                }
                Some("f") => {
                    let refs: Vec<(usize, Option<usize>)> = it
                        .map(|tok| {
                            let mut parts = tok.split('/');
                            let v = parts.next().and_then(|s| s.parse::<usize>().ok()).filter(|&v| v >= 1)?;
                            let t = parts.next().filter(|s| !s.is_empty()).map(|s| s.parse::<usize>().ok().filter(|&t| t >= 1));
                            match t {
                                Some(None) => None,
                                Some(Some(t)) => Some((v - 1, Some(t - 1))),
                                None => Some((v - 1, None)),
                            }
                        })
                        .collect::<Option<_>>()
                        .ok_or_else(|| bad(line))?;
                    if refs.len() != 3 {
                        return Err(Error::invalid("obj", format!("only triangles are supported: `{line}`")));
                    }
                    corners.push([refs[0], refs[1], refs[2]]);
                }
                _ => {}
            }
        }
        let mut index: HashMap<(usize, Option<usize>), usize> = HashMap::new();
        let (mut positions, mut uvs, mut faces) = (Vec::new(), Vec::new(), Vec::new());
        for tri in corners {
            let mut f = [0; 3];
            for (k, key) in tri.into_iter().enumerate() {
                let p = *vs.get(key.0).ok_or_else(|| Error::invalid("obj", format!("vertex {} out of range", key.0 + 1)))?;
                let uv = match key.1 {
                    Some(t) => *vts.get(t).ok_or_else(|| Error::invalid("obj", format!("uv {} out of range", t + 1)))?,
                    None => [0.0, 0.0],
                };
                f[k] = *index.entry(key).or_insert_with(|| {
                    positions.push(p);
                    uvs.push(uv);
                    positions.len() - 1
                });
            }
            faces.push(f);
        }
        Mesh::new(positions, faces, uvs)
    }
}

/// Axis-aligned rectangle of the UV atlas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UvRect {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl UvRect {
    pub const UNIT: UvRect = UvRect { u0: 0.0, v0: 0.0, u1: 1.0, v1: 1.0 };

    pub fn map(&self, s: f64, t: f64) -> [f64; 2] {
        [self.u0 + s * (self.u1 - self.u0), self.v0 + t * (self.v1 - self.v0)]
    }
}

/// One latitude ring of a surface of revolution.
#[derive(Clone, Copy, Debug)]
pub struct Ring {
    /// Offset of the ring centre along the axis.
    pub offset: f64,
    /// Zero for the two poles, which must be the first and last rings.
    pub radius: f64,
    /// Chart-space vertical coordinate in `[0, 1]`.
    pub t: f64,
}

/// Closed surface of revolution about `origin + s * axis`, with a lat-long
/// chart mapped into `rect`. The seam column and the poles are duplicated
/// per segment so every UV triangle is non-degenerate.
pub fn lathe(origin: Vec3, axis: Vec3, rings: &[Ring], segments: usize, rect: UvRect) -> Result<Mesh> {
    if rings.len() < 3 || segments < 3 {
        return Err(Error::invalid("lathe", "need at least 3 rings and 3 segments"));
    }
    let last = rings.len() - 1;
    if rings[0].radius != 0.0 || rings[last].radius != 0.0 || rings[1..last].iter().any(|r| r.radius <= 0.0) {
        return Err(Error::invalid("lathe", "rings must run pole, positive radii..., pole"));
    }
    let axis = axis.normalize();
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = helper.cross(&axis).normalize();
    let e2 = axis.cross(&e1);
    let dirs: Vec<Vec3> = (0..segments)
        .map(|k| {
            let th = std::f64::consts::TAU * k as f64 / segments as f64;
            e1 * th.cos() + e2 * th.sin()
        })
        .collect();

    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut weld = Vec::new();
    // Row layout: poles hold `segments` copies, inner rings `segments + 1`.
    let mut row_start = Vec::with_capacity(rings.len());
    for (i, ring) in rings.iter().enumerate() {
        row_start.push(positions.len());
        let centre = origin + axis * ring.offset;
        let pole = i == 0 || i == last;
        let count = if pole { segments } else { segments + 1 };
        let canonical = positions.len();
        for k in 0..count {
            let (p, s) = if pole {
                (centre, (k as f64 + 0.5) / segments as f64)
            } else {
                (centre + dirs[k % segments] * ring.radius, k as f64 / segments as f64)
            };
            let duplicate = if pole { k > 0 } else { k == segments };
            weld.push(if duplicate { canonical } else { positions.len() });
            positions.push(p);
            uvs.push(rect.map(s, ring.t));
        }
    }
    let at = |i: usize, k: usize| row_start[i] + k;
    let mut faces = Vec::new();
    for i in 0..last {
        for k in 0..segments {
            if i == 0 {
                faces.push([at(0, k), at(1, k + 1), at(1, k)]);
            } else if i + 1 == last {
                faces.push([at(i, k), at(i, k + 1), at(last, k)]);
            } else {
                faces.push([at(i, k), at(i, k + 1), at(i + 1, k)]);
                faces.push([at(i, k + 1), at(i + 1, k + 1), at(i + 1, k)]);
            }
        }
    }
    Mesh::with_weld(positions, faces, uvs, weld)
}

/// Lat-long sphere; `rings` counts latitude bands.
pub fn uv_sphere(center: Vec3, radius: f64, segments: usize, rings: usize, rect: UvRect) -> Result<Mesh> {
    let rs: Vec<Ring> = (0..=rings)
        .map(|i| {
            let phi = std::f64::consts::PI * i as f64 / rings as f64;
            let radius_i = if i == 0 || i == rings { 0.0 } else { radius * phi.sin() };
            Ring { offset: -radius * phi.cos(), radius: radius_i, t: i as f64 / rings as f64 }
        })
        .collect();
    lathe(center, Vec3::y(), &rs, segments, rect)
}

/// Capsule from `a` to `b` with hemispherical caps of `hemi_rings` bands and
/// `body_bands` bands along the straight part.
pub fn capsule(a: Vec3, b: Vec3, radius: f64, segments: usize, hemi_rings: usize, body_bands: usize, rect: UvRect) -> Result<Mesh> {
    let len = (b - a).norm();
    if !(len > 0.0 && radius > 0.0) {
        return Err(Error::invalid("capsule", format!("length {len} and radius {radius} must be positive")));
    }
    let total = std::f64::consts::PI * radius + len;
    let mut rings = Vec::new();
    let half_pi = std::f64::consts::FRAC_PI_2;
    for i in 0..=hemi_rings {
        let phi = half_pi * i as f64 / hemi_rings as f64;
        let r = if i == 0 { 0.0 } else { radius * phi.sin() };
        rings.push(Ring { offset: -radius * phi.cos(), radius: r, t: radius * phi / total });
    }
    for i in 1..body_bands.max(1) {
        let s = len * i as f64 / body_bands as f64;
        rings.push(Ring { offset: s, radius, t: (radius * half_pi + s) / total });
    }
    for i in 0..=hemi_rings {
        let phi = half_pi + half_pi * i as f64 / hemi_rings as f64;
        let r = if i == hemi_rings { 0.0 } else { radius * phi.sin() };
        rings.push(Ring { offset: len - radius * phi.cos(), radius: r, t: (radius * phi + len) / total });
    }
    lathe(a, b - a, &rings, segments, rect)
}

/// Axis-aligned cube with one UV chart per face in a 3x2 grid.
pub fn cube(center: Vec3, half: f64) -> Result<Mesh> {
    // (normal axis, sign): tangent frames chosen so (s, t) x-product = normal.
    let sides: [(Vec3, Vec3, Vec3); 6] = [
        (Vec3::x(), Vec3::y(), Vec3::z()),
        (-Vec3::x(), Vec3::z(), Vec3::y()),
        (Vec3::y(), Vec3::z(), Vec3::x()),
        (-Vec3::y(), Vec3::x(), Vec3::z()),
        (Vec3::z(), Vec3::x(), Vec3::y()),
        (-Vec3::z(), Vec3::y(), Vec3::x()),
    ];
    let (mut positions, mut uvs, mut faces) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (n, s, t)) in sides.iter().enumerate() {
        let rect = UvRect {
            u0: (i % 3) as f64 / 3.0 + 0.02,
            v0: (i / 3) as f64 / 2.0 + 0.02,
            u1: (i % 3 + 1) as f64 / 3.0 - 0.02,
            v1: (i / 3 + 1) as f64 / 2.0 - 0.02,
        };
        let base = positions.len();
        for (a, b) in [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)] {
            positions.push(center + (n + s * (2.0 * a - 1.0) + t * (2.0 * b - 1.0)) * half);
            uvs.push(rect.map(a, b));
        }
        debug_assert!((s.cross(t) - n).norm() < 1e-12);
        faces.push([base, base + 1, base + 2]);
        faces.push([base, base + 2, base + 3]);
    }
    Mesh::new(positions, faces, uvs)
}

/// Square grid in the `z = 0` plane facing `+z`, with `uv = (x, y)` mapped
/// from `[-size/2, size/2]^2` onto the unit square.
pub fn plane(size: f64, cells: usize) -> Result<Mesh> {
    let n = cells + 1;
    let mut positions = Vec::with_capacity(n * n);
    let mut uvs = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (s, t) = (i as f64 / cells as f64, j as f64 / cells as f64);
            positions.push(Vec3::new((s - 0.5) * size, (t - 0.5) * size, 0.0));
            uvs.push([s, t]);
        }
    }
    let mut faces = Vec::new();
    for j in 0..cells {
        for i in 0..cells {
            let a = j * n + i;
            faces.push([a, a + 1, a + n + 1]);
            faces.push([a, a + n + 1, a + n]);
        }
    }
    Mesh::new(positions, faces, uvs)
}
