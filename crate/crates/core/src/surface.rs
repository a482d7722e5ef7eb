//! Projection of 3-D points onto a triangle mesh as barycentric
//! coordinates on the nearest face plus a signed height.
//!
//! `h` is the Euclidean distance to the closest surface point, signed by the
//! nearest face's outward geometric normal. When several faces are equally
//! close the lowest face index wins, in both the brute-force and the BVH path.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};

/// Triangles with less area than this are rejected.
pub const MIN_AREA: f64 = 1e-12;
const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Interior,
    /// Edge opposite to corner `k` (0: `bc`, 1: `ca`, 2: `ab`).
    Edge(u8),
    Vertex(u8),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPoint {
    pub foot: Vec3,
    /// Foot = `(1 - u - v) a + u b + v c`.
    pub u: f64,
    pub v: f64,
    pub region: Region,
}

/// Exact closest point on the closed triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(q: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> ClosestPoint {
    let ab = b - a;
    let ac = c - a;
    let ap = q - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ClosestPoint { foot: *a, u: 0.0, v: 0.0, region: Region::Vertex(0) };
    }
    let bp = q - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return ClosestPoint { foot: *b, u: 1.0, v: 0.0, region: Region::Vertex(1) };
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return ClosestPoint { foot: a + ab * t, u: t, v: 0.0, region: Region::Edge(2) };
    }
    let cp = q - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return ClosestPoint { foot: *c, u: 0.0, v: 1.0, region: Region::Vertex(2) };
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return ClosestPoint { foot: a + ac * t, u: 0.0, v: t, region: Region::Edge(1) };
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return ClosestPoint { foot: b + (c - b) * t, u: 1.0 - t, v: t, region: Region::Edge(0) };
    }
    let denom = 1.0 / (va + vb + vc);
    let u = vb * denom;
    let v = vc * denom;
    ClosestPoint { foot: a + ab * u + ac * v, u, v, region: Region::Interior }
}

/// Closest point on face `f`, rejecting degenerate triangles.
pub fn closest_point_on_face(q: &Vec3, mesh: &Mesh, f: usize) -> Result<ClosestPoint> {
    let area = mesh.face_area(f);
    if !(area >= MIN_AREA) {
        return Err(Error::DegenerateTriangle { face: f, area });
    }
    let [a, b, c] = mesh.corners(f);
    Ok(closest_point_on_triangle(q, &a, &b, &c))
}

/// Point `(u, v, h)` relative to face `face`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalCoord {
    pub u: f64,
    pub v: f64,
    pub face: usize,
    pub h: f64,
}

impl LocalCoord {
    /// Closest surface point this coordinate was measured from.
    pub fn foot(&self, mesh: &Mesh) -> Vec3 {
        let [a, b, c] = mesh.corners(self.face);
        a * (1.0 - self.u - self.v) + b * self.u + c * self.v
    }
}

fn local_coord(q: &Vec3, mesh: &Mesh, face: usize, cp: &ClosestPoint, dist2: f64) -> LocalCoord {
    let d = dist2.sqrt();
    let side = (q - cp.foot).dot(&mesh.face_cross(face));
    let h = if side < 0.0 { -d } else { d };
    LocalCoord { u: cp.u, v: cp.v, face, h }
}

/// Exhaustive nearest-face search. Degenerate faces are skipped.
pub fn project_point_bruteforce(q: &Vec3, mesh: &Mesh) -> LocalCoord {
    let mut best: Option<(f64, usize, ClosestPoint)> = None;
    for f in 0..mesh.num_faces() {
        if !(mesh.face_area(f) >= MIN_AREA) {
            continue;
        }
        let [a, b, c] = mesh.corners(f);
        let cp = closest_point_on_triangle(q, &a, &b, &c);
        let d2 = (q - cp.foot).norm_squared();
        if best.as_ref().is_none_or(|b| d2 < b.0) {
            best = Some((d2, f, cp));
        }
    }
    let (d2, f, cp) = best.expect("mesh has no usable faces");
    local_coord(q, mesh, f, &cp, d2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= o.min[k] && self.max[k] >= o.max[k])
    }

    /// Squared distance from `q` to the box (zero inside).
    pub fn dist2(&self, q: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = (self.min[k] - q[k]).max(q[k] - self.max[k]).max(0.0);
            d += e * e;
        }
        d
    }
}

#[derive(Clone, Debug)]
pub struct BvhNode {
    pub bounds: Aabb,
    /// Leaf: range into `faces`. Inner: child node indices.
    pub kind: NodeKind,
}

#[derive(Clone, Copy, Debug)]
pub enum NodeKind {
    Leaf { start: usize, len: usize },
    Inner { left: usize, right: usize },
}

/// Axis-aligned box tree over the usable faces of one posed mesh.
#[derive(Clone, Debug)]
pub struct TriangleBvh {
    pub nodes: Vec<BvhNode>,
    /// Face indices, grouped by leaf.
    pub faces: Vec<usize>,
}

impl TriangleBvh {
    /// Median-split build; degenerate faces are left out.
    pub fn build(mesh: &Mesh) -> Result<Self> {
        let mut faces: Vec<usize> = (0..mesh.num_faces()).filter(|&f| mesh.face_area(f) >= MIN_AREA).collect();
        if faces.is_empty() {
            return Err(Error::invalid("bvh", "mesh has no usable faces"));
        }
        let boxes: Vec<Aabb> = (0..mesh.num_faces())
            .map(|f| {
                let mut b = Aabb::empty();
                mesh.corners(f).iter().for_each(|p| b.grow(p));
                b
            })
            .collect();
        let centroids: Vec<Vec3> = boxes.iter().map(|b| (b.min + b.max) * 0.5).collect();
        let mut bvh = TriangleBvh { nodes: Vec::new(), faces: Vec::new() };
        let n = faces.len();
        bvh.build_node(&mut faces, 0, n, &boxes, &centroids);
        bvh.faces = faces;
        Ok(bvh)
    }

    fn build_node(&mut self, faces: &mut [usize], start: usize, end: usize, boxes: &[Aabb], centroids: &[Vec3]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &f in &faces[start..end] {
            bounds.merge(&boxes[f]);
            cb.grow(&centroids[f]);
        }
        let id = self.nodes.len();
        self.nodes.push(BvhNode { bounds, kind: NodeKind::Leaf { start, len: end - start } });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let ext = cb.max - cb.min;
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let mid = (start + end) / 2;
        faces[start..end].select_nth_unstable_by(mid - start, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b)));
        let left = self.build_node(faces, start, mid, boxes, centroids);
        let right = self.build_node(faces, mid, end, boxes, centroids);
        self.nodes[id].kind = NodeKind::Inner { left, right };
        id
    }

    /// Nearest face by best-first branch and bound. Returns the same face
    /// and coordinates as [`project_point_bruteforce`], plus the number of
    /// faces tested.
    pub fn project_counted(&self, q: &Vec3, mesh: &Mesh) -> (LocalCoord, usize) {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            // Min-heap on box distance.
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        let mut heap = BinaryHeap::new();
        heap.push(Item(self.nodes[0].bounds.dist2(q), 0));
        let mut best = (f64::INFINITY, usize::MAX, None::<ClosestPoint>);
        let mut visited = 0;
        // Box distances carry rounding error of their own; keep any box that
        // could still hold an exact tie.
        let prune = |box_d2: f64, best: f64| box_d2 > best * (1.0 + 1e-9) + 1e-18;
        while let Some(Item(d, node)) = heap.pop() {
            if prune(d, best.0) {
                break;
            }
            match self.nodes[node].kind {
                NodeKind::Leaf { start, len } => {
                    for &f in &self.faces[start..start + len] {
                        let [a, b, c] = mesh.corners(f);
                        let cp = closest_point_on_triangle(q, &a, &b, &c);
                        let d2 = (q - cp.foot).norm_squared();
                        visited += 1;
                        if d2 < best.0 || (d2 == best.0 && f < best.1) {
                            best = (d2, f, Some(cp));
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    for child in [left, right] {
                        let cd = self.nodes[child].bounds.dist2(q);
                        if !prune(cd, best.0) {
                            heap.push(Item(cd, child));
                        }
                    }
                }
            }
        }
        let cp = best.2.expect("bvh has faces");
        (local_coord(q, mesh, best.1, &cp, best.0), visited)
    }

    pub fn project(&self, q: &Vec3, mesh: &Mesh) -> LocalCoord {
        self.project_counted(q, mesh).0
    }
}

/// Atlas coordinates of a local coordinate's foot point.
pub fn to_uv(lc: &LocalCoord, mesh: &Mesh) -> [f64; 2] {
    let [a, b, c] = mesh.faces[lc.face];
    let w = 1.0 - lc.u - lc.v;
    let (ta, tb, tc) = (mesh.uvs[a], mesh.uvs[b], mesh.uvs[c]);
    [w * ta[0] + lc.u * tb[0] + lc.v * tc[0], w * ta[1] + lc.u * tb[1] + lc.v * tc[1]]
}
