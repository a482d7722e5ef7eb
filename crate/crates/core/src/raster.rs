//! Software perspective rasterizer.
//!
//! Pixels are sampled at their centres. Coverage follows the top-left fill
//! rule, and edge functions of shared edges are evaluated in a canonical
//! vertex order, so a closed mesh is rasterized watertight: every pixel
//! centre inside its silhouette is covered by exactly one face per surface
//! layer. Depth is camera-space z; ties go to the lower face index.

use std::path::Path;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imageio::ImageF32;
use crate::mesh::{Mesh, Vec3};

/// Rows per parallel band.
const BAND: usize = 16;
/// Faces with a vertex closer than this to the camera plane are skipped.
const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RasterStats {
    /// Faces with zero screen-space area.
    pub degenerate: usize,
    /// Faces crossing the camera plane.
    pub clipped: usize,
}

#[derive(Clone, Debug)]
pub struct RasterOutput {
    pub width: usize,
    pub height: usize,
    pub uv: Vec<[f64; 2]>,
    /// `+inf` on background.
    pub depth: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    /// `-1` on background.
    pub face_id: Vec<i64>,
    /// Perspective-correct barycentrics of the visible face.
    pub bary: Vec<[f64; 3]>,
    pub stats: RasterStats,
}

impl RasterOutput {
    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One surface crossing of a pixel-centre ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub face: usize,
    pub depth: f64,
    pub bary: [f64; 3],
    /// The face's outward side looks at the camera.
    pub front: bool,
}

struct ScreenFace {
    welds: [usize; 3],
    /// Orientation sign making inside edge functions positive.
    sign: f64,
    inv_z: [f64; 3],
    bbox: [usize; 4],
}

struct Setup {
    /// Projected `(x, y)` per canonical (welded) vertex.
    screen: Vec<[f64; 2]>,
    faces: Vec<Option<ScreenFace>>,
    stats: RasterStats,
}

/// Edge function of the directed edge `a -> b` at `p`, evaluated in weld-id
/// order so both faces sharing an edge get bit-identical magnitudes.
#[inline]
fn edge(screen: &[[f64; 2]], a: usize, b: usize, x: f64, y: f64) -> f64 {
    let (lo, hi, s) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let (p, q) = (screen[lo], screen[hi]);
    s * ((q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]))
}

/// Top-left rule on the positively oriented edge direction `(dx, dy)`
/// (image y points down).
#[inline]
fn top_left(dx: f64, dy: f64) -> bool {
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn setup(mesh: &Mesh, cam: &Camera) -> Setup {
    let mut screen = vec![[0.0; 2]; mesh.num_vertices()];
    let mut depth = vec![0.0; mesh.num_vertices()];
    for (i, &w) in mesh.weld.iter().enumerate() {
        if w == i {
            let p = cam.project(&mesh.positions[i]);
            screen[i] = [p.x, p.y];
            depth[i] = p.z;
        }
    }
    let mut stats = RasterStats::default();
    let faces = mesh
        .faces
        .iter()
        .map(|&verts| {
            let welds = verts.map(|v| mesh.weld[v]);
            if welds.iter().any(|&w| !(depth[w] > MIN_DEPTH)) {
                stats.clipped += 1;
                return None;
            }
            let [a, b, c] = welds;
            let area = edge(&screen, a, b, screen[c][0], screen[c][1]);
            if area == 0.0 || !area.is_finite() {
                stats.degenerate += 1;
                return None;
            }
            let xs = welds.map(|w| screen[w][0]);
            let ys = welds.map(|w| screen[w][1]);
            let lo = |v: [f64; 3]| v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = |v: [f64; 3]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // Pixel i is sampled at i + 0.5.
            let range = |l: f64, h: f64, n: usize| -> Option<(usize, usize)> {
                let first = (l - 0.5).ceil().max(0.0);
                let last = (h - 0.5).floor().min(n as f64 - 1.0);
                (first <= last).then_some((first as usize, last as usize))
            };
            let (x0, x1) = range(lo(xs), hi(xs), cam.width)?;
            let (y0, y1) = range(lo(ys), hi(ys), cam.height)?;
            Some(ScreenFace {
                welds,
                sign: area.signum(),
                inv_z: welds.map(|w| 1.0 / depth[w]),
                bbox: [x0, x1, y0, y1],
            })
        })
        .collect();
    Setup { screen, faces, stats }
}

impl ScreenFace {
    /// Coverage test at a pixel centre; returns the perspective-correct
    /// barycentrics and depth when covered.
    #[inline]
    fn sample(&self, screen: &[[f64; 2]], x: f64, y: f64) -> Option<([f64; 3], f64)> {
        let [a, b, c] = self.welds;
        let mut w = [0.0; 3];
        for (k, (p, q)) in [(b, c), (c, a), (a, b)].into_iter().enumerate() {
            let e = self.sign * edge(screen, p, q, x, y);
            if e < 0.0 {
                return None;
            }
            if e == 0.0 {
                let (dx, dy) = (screen[q][0] - screen[p][0], screen[q][1] - screen[p][1]);
                if !top_left(self.sign * dx, self.sign * dy) {
                    return None;
                }
            }
            w[k] = e;
        }
        let total = w[0] + w[1] + w[2];
        if !(total > 0.0) {
            return None;
        }
        let pw = [w[0] / total * self.inv_z[0], w[1] / total * self.inv_z[1], w[2] / total * self.inv_z[2]];
        let inv_depth = pw[0] + pw[1] + pw[2];
        Some(([pw[0] / inv_depth, pw[1] / inv_depth, pw[2] / inv_depth], 1.0 / inv_depth))
    }
}

/// Call `visit(pixel, fragment)` for every covered pixel of every face, in
/// face order, one row band at a time. Bands run in parallel; `visit` gets
/// the band-local state `S` built by `init(band_index)`.
fn scan<S: Send>(mesh: &Mesh, cam: &Camera, init: impl Fn(usize) -> S + Sync, visit: impl Fn(&mut S, usize, Fragment) + Sync) -> (Vec<S>, RasterStats) {
    let st = setup(mesh, cam);
    let bands = cam.height.div_ceil(BAND);
    let states = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut state = init(band);
            let (r0, r1) = (band * BAND, ((band + 1) * BAND).min(cam.height) - 1);
            for (f, sf) in st.faces.iter().enumerate() {
                let Some(sf) = sf else { continue };
                let [x0, x1, y0, y1] = sf.bbox;
                if y1 < r0 || y0 > r1 {
                    continue;
                }
                for py in y0.max(r0)..=y1.min(r1) {
                    for px in x0..=x1 {
                        if let Some((bary, depth)) = sf.sample(&st.screen, px as f64 + 0.5, py as f64 + 0.5) {
                            visit(&mut state, py * cam.width + px, Fragment { face: f, depth, bary, front: sf.sign < 0.0 });
                        }
                    }
                }
            }
            state
        })
        .collect();
    (states, st.stats)
}

/// Nearest-surface attributes per pixel.
pub fn rasterize(mesh: &Mesh, cam: &Camera) -> Result<RasterOutput> {
    if mesh.normals.len() != mesh.num_vertices() {
        return Err(Error::invalid("rasterize", "mesh normals missing"));
    }
    let (w, h) = (cam.width, cam.height);
    // Per band: (depth, face, bary) for its rows.
    type Band = Vec<(f64, i64, [f64; 3])>;
    let (bands, stats) = scan(
        mesh,
        cam,
        |band| -> Band {
            let rows = BAND.min(h - band * BAND);
            vec![(f64::INFINITY, -1, [0.0; 3]); rows * w]
        },
        |buf, pixel, frag| {
            let local = pixel % (BAND * w);
            let slot = &mut buf[local];
            // Faces arrive in index order, so strict less keeps the lower index on ties.
            if frag.depth < slot.0 {
                *slot = (frag.depth, frag.face as i64, frag.bary);
            }
        },
    );
    let n = w * h;
    let mut out = RasterOutput {
        width: w,
        height: h,
        uv: vec![[0.0; 2]; n],
        depth: vec![f64::INFINITY; n],
        normal: vec![[0.0; 3]; n],
        mask: vec![false; n],
        face_id: vec![-1; n],
        bary: vec![[0.0; 3]; n],
        stats,
    };
    for (p, &(depth, face, bary)) in bands.iter().flatten().enumerate() {
        if face < 0 {
            continue;
        }
        let verts = mesh.faces[face as usize];
        let mut uv = [0.0; 2];
        let mut nrm = Vec3::zeros();
        for k in 0..3 {
            let t = mesh.uvs[verts[k]];
            uv[0] += bary[k] * t[0];
            uv[1] += bary[k] * t[1];
            nrm += mesh.normals[verts[k]] * bary[k];
        }
        let len = nrm.norm();
        let nrm = if len > 0.0 { nrm / len } else { mesh.face_normal(face as usize) };
        out.uv[p] = uv;
        out.depth[p] = depth;
        out.normal[p] = [nrm.x, nrm.y, nrm.z];
        out.mask[p] = true;
        out.face_id[p] = face;
        out.bary[p] = bary;
    }
    Ok(out)
}

/// Every surface crossing per pixel, sorted by depth then face.
pub fn fragments(mesh: &Mesh, cam: &Camera) -> (Vec<Vec<Fragment>>, RasterStats) {
    let w = cam.width;
    let h = cam.height;
    let (bands, stats) = scan(
        mesh,
        cam,
        |band| vec![Vec::new(); BAND.min(h - band * BAND) * w],
        |buf: &mut Vec<Vec<Fragment>>, pixel, frag| buf[pixel % (BAND * w)].push(frag),
    );
    let mut lists: Vec<Vec<Fragment>> = bands.into_iter().flatten().collect();
    for l in &mut lists {
        l.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.face.cmp(&b.face)));
    }
    (lists, stats)
}

/// Ray bounds per pixel from a dilated mesh.
///
/// `near`/`far` are the global minimum and maximum crossing depths (camera z).
/// `intervals` additionally lists the depth spans where the ray is inside
/// the mesh, found by counting front (entering) and back (leaving)
/// crossings; overlapping closed parts merge into one span.
#[derive(Clone, Debug)]
pub struct NearFar {
    pub width: usize,
    pub height: usize,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
    pub hit: Vec<bool>,
    pub intervals: Vec<Vec<(f64, f64)>>,
    pub stats: RasterStats,
}

/// Inside spans along one sorted fragment list. Falls back to the single
/// span `[min, max]` when entries and exits do not balance.
pub fn inside_intervals(frags: &[Fragment]) -> Vec<(f64, f64)> {
    if frags.len() < 2 {
        return Vec::new();
    }
    let mut spans = Vec::new();
    let mut depth_count = 0i64;
    let mut start = 0.0;
    let mut balanced = true;
    for f in frags {
        if f.front {
            if depth_count == 0 {
                start = f.depth;
            }
            depth_count += 1;
        } else {
            depth_count -= 1;
            if depth_count == 0 {
                if f.depth > start {
                    spans.push((start, f.depth));
                }
            } else if depth_count < 0 {
                balanced = false;
                break;
            }
        }
    }
    if !balanced || depth_count != 0 {
        let (lo, hi) = (frags[0].depth, frags[frags.len() - 1].depth);
        return if hi > lo { vec![(lo, hi)] } else { Vec::new() };
    }
    spans
}

pub fn near_far_buffers(dilated: &Mesh, cam: &Camera) -> NearFar {
    let (lists, stats) = fragments(dilated, cam);
    let n = cam.width * cam.height;
    let mut out = NearFar {
        width: cam.width,
        height: cam.height,
        near: vec![f64::INFINITY; n],
        far: vec![f64::NEG_INFINITY; n],
        hit: vec![false; n],
        intervals: vec![Vec::new(); n],
        stats,
    };
    for (p, l) in lists.iter().enumerate() {
        let spans = inside_intervals(l);
        if spans.is_empty() {
            continue;
        }
        out.near[p] = l[0].depth;
        out.far[p] = l[l.len() - 1].depth;
        out.hit[p] = true;
        out.intervals[p] = spans;
    }
    out
}

/// Write `uv` (16-bit), `depth` (16-bit, normalized over the covered range),
/// `normal` and `mask` (8-bit) PNGs plus raw f32 buffers into `dir`.
pub fn dump(raster: &RasterOutput, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (raster.width, raster.height);
    let mut uv = ImageF32::new(w, h, 3);
    let mut depth = ImageF32::new(w, h, 1);
    let mut normal = ImageF32::new(w, h, 3);
    let mut mask = ImageF32::new(w, h, 1);
    let finite: Vec<f64> = raster.depth.iter().copied().filter(|d| d.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut raw_depth = ImageF32::new(w, h, 1);
    for p in 0..w * h {
        if !raster.mask[p] {
            raw_depth.data[p] = f32::INFINITY;
            continue;
        }
        uv.data[p * 3] = raster.uv[p][0] as f32;
        uv.data[p * 3 + 1] = raster.uv[p][1] as f32;
        depth.data[p] = (1.0 - (raster.depth[p] - lo) / span) as f32;
        raw_depth.data[p] = raster.depth[p] as f32;
        for k in 0..3 {
            normal.data[p * 3 + k] = (raster.normal[p][k] * 0.5 + 0.5) as f32;
        }
        mask.data[p] = 1.0;
    }
    uv.save_png16(&dir.join(format!("{prefix}_uv.png")))?;
    depth.save_png16(&dir.join(format!("{prefix}_depth.png")))?;
    normal.save_png(&dir.join(format!("{prefix}_normal.png")))?;
    mask.save_png(&dir.join(format!("{prefix}_mask.png")))?;
    raw_depth.save_raw(&dir.join(format!("{prefix}_depth.raw")))?;
    let mut raw_uv = ImageF32::new(w, h, 2);
    for p in 0..w * h {
        raw_uv.data[p * 2] = raster.uv[p][0] as f32;
        raw_uv.data[p * 2 + 1] = raster.uv[p][1] as f32;
    }
    raw_uv.save_raw(&dir.join(format!("{prefix}_uv.raw")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix3, Vector3};

    use super::*;
    use crate::mesh::{plane, uv_sphere, UvRect};

    fn axis_camera(size: usize) -> Camera {
        Camera::new(100.0, 100.0, size as f64 / 2.0, size as f64 / 2.0, Matrix3::identity(), Vector3::zeros(), size, size).unwrap()
    }

    fn sphere_at(z: f64, r: f64) -> Mesh {
        uv_sphere(Vec3::new(0.0, 0.0, z), r, 64, 32, UvRect::UNIT).unwrap().with_normals().unwrap()
    }

    fn triangle(z: f64, uv: [f64; 2]) -> Mesh {
        let p = vec![Vec3::new(-10.0, -10.0, z), Vec3::new(30.0, -10.0, z), Vec3::new(-10.0, 30.0, z)];
        Mesh::new(p, vec![[0, 1, 2]], vec![uv; 3]).unwrap().with_normals().unwrap()
    }

    #[test]
    fn frustum_filling_triangle_has_constant_uv() {
        let out = rasterize(&triangle(1.0, [0.5, 0.5]), &axis_camera(32)).unwrap();
        assert_eq!(out.covered(), 32 * 32);
        assert!(out.uv.iter().all(|t| (t[0] - 0.5).abs() < 1e-12 && (t[1] - 0.5).abs() < 1e-12));
    }

    #[test]
    fn nearer_triangle_wins() {
        let m = Mesh::merge(&[triangle(2.0, [0.9, 0.9]), triangle(1.0, [0.1, 0.1])]).unwrap().with_normals().unwrap();
        let out = rasterize(&m, &axis_camera(16)).unwrap();
        assert!(out.face_id.iter().all(|&f| f == 1));
        assert!(out.uv.iter().all(|t| (t[0] - 0.1).abs() < 1e-12 && (t[1] - 0.1).abs() < 1e-12));
        assert!(out.depth.iter().all(|&d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sphere_centre_depth() {
        let out = rasterize(&sphere_at(3.0, 1.0), &axis_camera(64)).unwrap();
        // Pixel (32, 32) has its centre half a pixel off axis.
        let d = out.depth[32 * 64 + 32];
        assert!((d - 2.0).abs() < 1e-2, "{d}");
    }

    #[test]
    fn buffers_are_consistent() {
        let m = sphere_at(3.0, 1.0);
        let cam = axis_camera(48);
        let out = rasterize(&m, &cam).unwrap();
        for p in 0..48 * 48 {
            assert_eq!(out.mask[p], out.face_id[p] >= 0);
            assert_eq!(out.mask[p], out.depth[p].is_finite());
            if out.mask[p] {
                let b = out.bary[p];
                assert!(b.iter().all(|&x| x >= 0.0));
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                // Reconstructed point projects back to the pixel centre.
                let f = m.faces[out.face_id[p] as usize];
                let q: Vec3 = (0..3).map(|k| m.positions[f[k]] * b[k]).sum();
                let s = cam.project(&q);
                let (px, py) = ((p % 48) as f64 + 0.5, (p / 48) as f64 + 0.5);
                assert!((s.x - px).abs() < 0.5 && (s.y - py).abs() < 0.5);
                assert!((s.z - out.depth[p]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn closed_mesh_is_watertight() {
        // Every covered pixel sees exactly one front and one back crossing.
        let m = sphere_at(3.0, 1.0);
        let (lists, stats) = fragments(&m, &axis_camera(64));
        assert_eq!(stats, RasterStats::default());
        for l in lists.iter().filter(|l| !l.is_empty()) {
            assert_eq!(l.len(), 2, "{l:?}");
            assert!(l[0].front && !l[1].front);
        }
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // A grid plane whose vertices fall on pixel centres.
        let mut m = plane(1.0, 8).unwrap();
        m.positions.iter_mut().for_each(|p| p.z = 2.0);
        let cam = Camera::new(80.0, 80.0, 40.5, 40.5, Matrix3::identity(), Vector3::zeros(), 81, 81).unwrap();
        let (lists, _) = fragments(&m.with_normals().unwrap(), &cam);
        assert!(lists.iter().all(|l| l.len() <= 1));
        let covered = lists.iter().filter(|l| l.len() == 1).count();
        // Interior plus the top-left boundary rows of the 41x41 lattice inside the square.
        assert_eq!(covered, 40 * 40);
    }

    #[test]
    fn dilated_sphere_bounds() {
        let m = sphere_at(3.0, 1.0).dilate(0.12).unwrap();
        let cam = axis_camera(64);
        let nf = near_far_buffers(&m, &cam);
        let c = 32 * 64 + 32;
        assert!(nf.hit[c]);
        assert!((nf.near[c] - 1.88).abs() < 1e-2, "{}", nf.near[c]);
        assert!((nf.far[c] - 4.12).abs() < 1e-2, "{}", nf.far[c]);
        assert!(!nf.hit[0]);
        for p in 0..64 * 64 {
            if nf.hit[p] {
                assert!(nf.near[p] < nf.far[p]);
            }
        }
    }

    #[test]
    fn degenerate_faces_are_counted() {
        let p = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.2, 0.0, 1.0)];
        let m = Mesh::new(p, vec![[0, 1, 2]], vec![[0.0; 2]; 3]).unwrap();
        let mut m = m;
        m.normals = vec![Vec3::z(); 3];
        let out = rasterize(&m, &axis_camera(8)).unwrap();
        assert_eq!(out.stats.degenerate, 1);
        assert_eq!(out.covered(), 0);
    }

    #[test]
    fn dilation_grows_silhouette() {
        let m = sphere_at(3.0, 0.5);
        let cam = axis_camera(64);
        let masks: Vec<Vec<bool>> = [0.0, 0.05, 0.12].iter().map(|&d| rasterize(&m.dilate(d).unwrap(), &cam).unwrap().mask).collect();
        for pair in masks.windows(2) {
            assert!(pair[0].iter().zip(&pair[1]).all(|(&a, &b)| !a || b));
        }
    }

    #[test]
    fn overlapping_parts_merge_into_one_span() {
        let a = uv_sphere(Vec3::new(0.0, 0.0, 3.0), 0.5, 32, 16, UvRect::UNIT).unwrap();
        let b = uv_sphere(Vec3::new(0.0, 0.0, 3.6), 0.5, 32, 16, UvRect::UNIT).unwrap();
        let c = uv_sphere(Vec3::new(0.0, 0.0, 6.0), 0.5, 32, 16, UvRect::UNIT).unwrap();
        let m = Mesh::merge(&[a, b, c]).unwrap().with_normals().unwrap();
        let nf = near_far_buffers(&m, &axis_camera(64));
        let spans = &nf.intervals[32 * 64 + 32];
        assert_eq!(spans.len(), 2, "{spans:?}");
        assert!((spans[0].0 - 2.5).abs() < 1e-2 && (spans[0].1 - 4.1).abs() < 1e-2);
        assert!((spans[1].0 - 5.5).abs() < 1e-2 && (spans[1].1 - 6.5).abs() < 1e-2);
    }
}
