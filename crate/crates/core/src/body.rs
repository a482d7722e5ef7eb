//! Procedural articulated humanoid: one capsule per joint, distance-falloff
//! skinning weights, linear shape directions, and forward linear blend
//! skinning.
//!
//! Rest pose is a T-pose, y up, facing +z, in meters. The character's left
//! side is +x.

use nalgebra::{Isometry3, Matrix4, Quaternion, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{capsule, Mesh, UvRect, Vec3};

pub const NUM_SHAPE: usize = 3;
/// Shape coefficient index: radial girth scaling.
pub const SHAPE_GIRTH: usize = 0;
pub const SHAPE_ARM_LENGTH: usize = 1;
pub const SHAPE_LEG_LENGTH: usize = 2;
pub const MAX_SHAPE: f64 = 5.0;

const NO_PARENT: usize = usize::MAX;

/// Specification of one limb capsule, skinned primarily to `joint`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbSpec {
    pub name: String,
    pub position: [f64; 3],
    /// `None` for the root.
    pub parent: Option<usize>,
    /// Capsule axis endpoints in rest pose.
    pub bone_start: [f64; 3],
    pub bone_end: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tessellation {
    pub segments: usize,
    pub hemi_rings: usize,
    /// Target spacing of the rings along each capsule's straight part.
    pub ring_spacing: f64,
}

impl Default for Tessellation {
    fn default() -> Self {
        Tessellation { segments: 12, hemi_rings: 3, ring_spacing: 0.06 }
    }
}

/// Falloff length of the skinning weights.
pub const WEIGHT_FALLOFF: f64 = 0.02;
/// Girth direction: fraction of the local radius per unit coefficient.
const GIRTH_RATE: f64 = 0.1;
/// Limb length directions: fractional stretch per unit coefficient.
const LENGTH_RATE: f64 = 0.1;

pub fn default_limbs() -> Vec<LimbSpec> {
    let limb = |name: &str, position: [f64; 3], parent: Option<usize>, a: [f64; 3], b: [f64; 3], radius: f64| LimbSpec {
        name: name.to_string(),
        position,
        parent,
        bone_start: a,
        bone_end: b,
        radius,
    };
    let mut limbs = vec![
        limb("pelvis", [0.0, 0.95, 0.0], None, [-0.08, 0.94, 0.0], [0.08, 0.94, 0.0], 0.11),
        limb("spine", [0.0, 1.08, 0.0], Some(0), [0.0, 1.04, 0.0], [0.0, 1.30, 0.0], 0.12),
        limb("head", [0.0, 1.44, 0.0], Some(1), [0.0, 1.53, 0.0], [0.0, 1.62, 0.0], 0.1),
    ];
    for (side, sx) in [("l", 1.0), ("r", -1.0)] {
        let base = limbs.len();
        limbs.push(limb(&format!("{side}_shoulder"), [sx * 0.17, 1.36, 0.0], Some(1), [sx * 0.19, 1.36, 0.0], [sx * 0.44, 1.36, 0.0], 0.05));
        limbs.push(limb(&format!("{side}_elbow"), [sx * 0.45, 1.36, 0.0], Some(base), [sx * 0.46, 1.36, 0.0], [sx * 0.68, 1.36, 0.0], 0.045));
        limbs.push(limb(&format!("{side}_wrist"), [sx * 0.7, 1.36, 0.0], Some(base + 1), [sx * 0.72, 1.36, 0.0], [sx * 0.79, 1.36, 0.0], 0.04));
    }
    for (side, sx) in [("l", 1.0), ("r", -1.0)] {
        let base = limbs.len();
        limbs.push(limb(&format!("{side}_hip"), [sx * 0.1, 0.9, 0.0], Some(0), [sx * 0.1, 0.86, 0.0], [sx * 0.1, 0.53, 0.0], 0.07));
        limbs.push(limb(&format!("{side}_knee"), [sx * 0.1, 0.5, 0.0], Some(base), [sx * 0.1, 0.47, 0.0], [sx * 0.1, 0.12, 0.0], 0.055));
        limbs.push(limb(&format!("{side}_ankle"), [sx * 0.1, 0.08, 0.0], Some(base + 1), [sx * 0.1, 0.05, 0.0], [sx * 0.1, 0.05, 0.14], 0.04));
    }
    limbs
}

#[derive(Clone, Debug)]
pub struct SkinnedTemplate {
    pub mesh: Mesh,
    pub joint_names: Vec<String>,
    pub joints: Vec<Vec3>,
    pub parents: Vec<usize>,
    /// Up to four `(joint, weight)` pairs per vertex, weights summing to 1.
    pub weights: Vec<Vec<(usize, f64)>>,
    /// Per vertex, one displacement per shape coefficient.
    pub shape_dirs: Vec<[Vec3; NUM_SHAPE]>,
    pub joint_shape_dirs: Vec<[Vec3; NUM_SHAPE]>,
    /// Capsule that produced each vertex.
    pub vertex_limb: Vec<usize>,
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> (f64, Vec3) {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    let foot = a + ab * t;
    ((p - foot).norm(), foot)
}

/// Index of the atlas cell used by chart `i` in a 4x4 grid, and its rect
/// inset by `margin` atlas units.
pub fn chart_rect(i: usize, margin: f64) -> UvRect {
    let (cx, cy) = ((i % 4) as f64, (i / 4) as f64);
    UvRect { u0: cx / 4.0 + margin, v0: cy / 4.0 + margin, u1: (cx + 1.0) / 4.0 - margin, v1: (cy + 1.0) / 4.0 - margin }
}

/// Chart margin: 3 texels of a 128-texel atlas.
pub const CHART_MARGIN: f64 = 3.0 / 128.0;

pub fn build_toy_humanoid(tess: Tessellation, limbs: &[LimbSpec]) -> Result<SkinnedTemplate> {
    if limbs.len() < 10 || limbs.len() > 16 {
        return Err(Error::invalid("limb spec", format!("need 10 to 16 joints, got {}", limbs.len())));
    }
    let mut parents = Vec::with_capacity(limbs.len());
    for (j, l) in limbs.iter().enumerate() {
        match l.parent {
            None if j == 0 => parents.push(NO_PARENT),
            Some(p) if p < j => parents.push(p),
            _ => return Err(Error::invalid("limb spec", format!("joint {j} ({}) has an invalid parent", l.name))),
        }
        let len = (Vec3::from(l.bone_end) - Vec3::from(l.bone_start)).norm();
        if !(len > 0.0) || !(l.radius > 0.0) {
            return Err(Error::invalid("limb spec", format!("limb {} has degenerate length {len} or radius {}", l.name, l.radius)));
        }
    }
    let joints: Vec<Vec3> = limbs.iter().map(|l| Vec3::from(l.position)).collect();
    let bones: Vec<(Vec3, Vec3, f64)> = limbs.iter().map(|l| (Vec3::from(l.bone_start), Vec3::from(l.bone_end), l.radius)).collect();

    let mut parts = Vec::new();
    let mut vertex_limb = Vec::new();
    for (j, &(a, b, r)) in bones.iter().enumerate() {
        let bands = ((b - a).norm() / tess.ring_spacing).ceil().max(1.0) as usize;
        let m = capsule(a, b, r, tess.segments, tess.hemi_rings, bands, chart_rect(j, CHART_MARGIN))?;
        vertex_limb.extend(std::iter::repeat_n(j, m.num_vertices()));
        parts.push(m);
    }
    let mesh = Mesh::merge(&parts)?.with_normals()?;

    let weights = mesh
        .positions
        .iter()
        .map(|p| {
            let mut w: Vec<(usize, f64)> = bones
                .iter()
                .enumerate()
                .map(|(j, (a, b, r))| {
                    let d = (segment_distance(p, a, b).0 - r).max(0.0);
                    (j, (-(d * d) / (WEIGHT_FALLOFF * WEIGHT_FALLOFF)).exp())
                })
                .collect();
            w.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            w.truncate(4);
            let total: f64 = w.iter().map(|x| x.1).sum();
            w.iter_mut().for_each(|x| x.1 /= total);
            w
        })
        .collect();

    let arm_chain = |j: usize, side: &str| limbs[j].name.starts_with(side) && ["shoulder", "elbow", "wrist"].iter().any(|s| limbs[j].name.ends_with(s));
    let leg_chain = |j: usize, side: &str| limbs[j].name.starts_with(side) && ["hip", "knee", "ankle"].iter().any(|s| limbs[j].name.ends_with(s));
    let find = |name: &str| limbs.iter().position(|l| l.name == name);
    // Stretch about the chain root along the chain's rest direction.
    let stretch = |p: &Vec3, root: usize, dir: Vec3| -> Vec3 { dir * ((p - joints[root]).dot(&dir) * LENGTH_RATE) };
    let chain_dir = |root: usize, tip: usize| (joints[tip] - joints[root]).normalize();
    let mut chains = Vec::new();
    for side in ["l_", "r_"] {
        if let (Some(s), Some(w)) = (find(&format!("{side}shoulder")), find(&format!("{side}wrist"))) {
            chains.push((SHAPE_ARM_LENGTH, side, s, chain_dir(s, w), true));
        }
        if let (Some(h), Some(a)) = (find(&format!("{side}hip")), find(&format!("{side}ankle"))) {
            chains.push((SHAPE_LEG_LENGTH, side, h, chain_dir(h, a), false));
        }
    }
    let in_chain = |j: usize, side: &str, arm: bool| if arm { arm_chain(j, side) } else { leg_chain(j, side) };

    let shape_dirs = mesh
        .positions
        .iter()
        .zip(&vertex_limb)
        .map(|(p, &j)| {
            let mut dirs = [Vec3::zeros(); NUM_SHAPE];
            let (a, b, _) = &bones[j];
            dirs[SHAPE_GIRTH] = (p - segment_distance(p, a, b).1) * GIRTH_RATE;
            for &(k, side, root, dir, arm) in &chains {
                if in_chain(j, side, arm) {
                    dirs[k] = stretch(p, root, dir);
                }
            }
            dirs
        })
        .collect();
    let joint_shape_dirs = (0..limbs.len())
        .map(|j| {
            let mut dirs = [Vec3::zeros(); NUM_SHAPE];
            for &(k, side, root, dir, arm) in &chains {
                if in_chain(j, side, arm) {
                    dirs[k] = stretch(&joints[j], root, dir);
                }
            }
            dirs
        })
        .collect();

    Ok(SkinnedTemplate {
        mesh,
        joint_names: limbs.iter().map(|l| l.name.clone()).collect(),
        joints,
        parents,
        weights,
        shape_dirs,
        joint_shape_dirs,
        vertex_limb,
    })
}

/// Per-joint local rotations (relative to the rest frame) and a root
/// translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// `[w, x, y, z]` per joint.
    pub rotations: Vec<[f64; 4]>,
    pub translation: [f64; 3],
}

impl PoseParams {
    pub fn identity(num_joints: usize) -> Self {
        PoseParams { rotations: vec![[1.0, 0.0, 0.0, 0.0]; num_joints], translation: [0.0; 3] }
    }

    pub fn set_rotation(&mut self, joint: usize, q: UnitQuaternion<f64>) {
        self.rotations[joint] = [q.w, q.i, q.j, q.k];
    }

    /// Unit quaternions, rejecting any whose norm is off by more than 1e-6.
    pub fn unit_rotations(&self) -> Result<Vec<UnitQuaternion<f64>>> {
        self.rotations
            .iter()
            .enumerate()
            .map(|(j, &[w, x, y, z])| {
                let q = Quaternion::new(w, x, y, z);
                let n = q.norm();
                if !((n - 1.0).abs() <= 1e-6) {
                    return Err(Error::invalid("pose", format!("joint {j} quaternion has norm {n}")));
                }
                Ok(UnitQuaternion::new_unchecked(q))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub betas: [f64; NUM_SHAPE],
}

impl ShapeParams {
    pub fn new(betas: [f64; NUM_SHAPE]) -> Result<Self> {
        let s = ShapeParams { betas };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.betas.iter().enumerate() {
            if !(b.abs() <= MAX_SHAPE) {
                return Err(Error::invalid("shape", format!("beta[{i}] = {b} outside [-{MAX_SHAPE}, {MAX_SHAPE}]")));
            }
        }
        Ok(())
    }
}

impl SkinnedTemplate {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn shaped_joints(&self, shape: &ShapeParams) -> Vec<Vec3> {
        self.joints
            .iter()
            .zip(&self.joint_shape_dirs)
            .map(|(j, dirs)| j + dirs.iter().zip(&shape.betas).map(|(d, b)| d * *b).sum::<Vec3>())
            .collect()
    }

    /// World transform of every joint frame (forward kinematics).
    pub fn joint_transforms(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<Vec<Isometry3<f64>>> {
        if pose.rotations.len() != self.num_joints() {
            return Err(Error::invalid("pose", format!("{} rotations for {} joints", pose.rotations.len(), self.num_joints())));
        }
        shape.validate()?;
        let rots = pose.unit_rotations()?;
        let joints = self.shaped_joints(shape);
        let mut world: Vec<Isometry3<f64>> = Vec::with_capacity(joints.len());
        for j in 0..joints.len() {
            let iso = if self.parents[j] == NO_PARENT {
                Isometry3::from_parts(Translation3::from(joints[j] + Vec3::from(pose.translation)), rots[j])
            } else {
                let p = self.parents[j];
                world[p] * Isometry3::from_parts(Translation3::from(joints[j] - joints[p]), rots[j])
            };
            world.push(iso);
        }
        Ok(world)
    }

    /// Posed joint positions.
    pub fn posed_joints(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<Vec<Vec3>> {
        Ok(self.joint_transforms(pose, shape)?.iter().map(|t| t.translation.vector).collect())
    }

    /// Linear blend skinning of the shaped template; normals are recomputed.
    pub fn pose(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<Mesh> {
        let world = self.joint_transforms(pose, shape)?;
        let joints = self.shaped_joints(shape);
        let skin: Vec<Matrix4<f64>> = world
            .iter()
            .zip(&joints)
            .map(|(a, j)| a.to_homogeneous() * Translation3::from(-j).to_homogeneous())
            .collect();
        let mut mesh = self.mesh.clone();
        for (i, p) in mesh.positions.iter_mut().enumerate() {
            let rest = self.mesh.positions[i] + self.shape_dirs[i].iter().zip(&shape.betas).map(|(d, b)| d * *b).sum::<Vec3>();
            let mut m = Matrix4::zeros();
            for &(j, w) in &self.weights[i] {
                m += skin[j] * w;
            }
            *p = (m * rest.push(1.0)).xyz();
        }
        // Seam copies must stay bit-identical to their canonical vertex.
        for i in 0..mesh.positions.len() {
            let w = mesh.weld[i];
            if w != i {
                mesh.positions[i] = mesh.positions[w];
            }
        }
        mesh.compute_normals()?;
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> SkinnedTemplate {
        build_toy_humanoid(Tessellation::default(), &default_limbs()).unwrap()
    }

    #[test]
    fn default_template_shape() {
        let t = template();
        assert_eq!(t.num_joints(), 15);
        let v = t.mesh.num_vertices();
        assert!((500..=5000).contains(&v), "{v} vertices");
        assert!(t.mesh.num_faces() >= 600);
        assert!(t.mesh.is_closed());
        for comp in t.mesh.components() {
            assert_eq!(t.mesh.select_faces(&comp).euler_characteristic(), 2);
        }
        assert_eq!(t.mesh.components().len(), 15);
        for l in default_limbs() {
            assert!(l.radius <= 0.12);
        }
    }

    #[test]
    fn weights_are_normalized_and_sparse() {
        let t = template();
        for w in &t.weights {
            assert!(w.len() <= 4);
            assert!(w.iter().all(|x| x.1 >= 0.0));
            assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mid_bone_vertex_is_rigidly_bound() {
        let t = template();
        let elbow = t.joint_index("l_elbow").unwrap();
        // Forearm vertex closest to the bone midpoint.
        let mid = Vec3::new(0.57, 1.36, 0.0);
        let v = (0..t.mesh.num_vertices())
            .filter(|&i| t.vertex_limb[i] == elbow)
            .min_by(|&a, &b| (t.mesh.positions[a] - mid).norm().total_cmp(&(t.mesh.positions[b] - mid).norm()))
            .unwrap();
        assert_eq!(t.weights[v][0].0, elbow);
        assert!(t.weights[v][0].1 > 1.0 - 1e-6);
    }

    #[test]
    fn identity_pose_is_rest() {
        let t = template();
        let m = t.pose(&PoseParams::identity(15), &ShapeParams::default()).unwrap();
        for (a, b) in m.positions.iter().zip(&t.mesh.positions) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn elbow_rotation_is_rigid_on_forearm() {
        let t = template();
        let elbow = t.joint_index("l_elbow").unwrap();
        let mut pose = PoseParams::identity(15);
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        pose.set_rotation(elbow, q);
        let m = t.pose(&pose, &ShapeParams::default()).unwrap();
        let e = t.joints[elbow];
        let mut checked = 0;
        for i in 0..m.num_vertices() {
            if t.weights[i][0].0 == elbow && t.weights[i][0].1 > 1.0 - 1e-8 {
                let want = e + q * (t.mesh.positions[i] - e);
                assert!((m.positions[i] - want).norm() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 10, "{checked} rigid vertices");
    }

    #[test]
    fn arm_length_coefficient_lengthens_arm() {
        let t = template();
        let (s, w) = (t.joint_index("l_shoulder").unwrap(), t.joint_index("l_wrist").unwrap());
        let pose = PoseParams::identity(15);
        let dist = |b: f64| {
            let j = t.posed_joints(&pose, &ShapeParams::new([0.0, b, 0.0]).unwrap()).unwrap();
            (j[w] - j[s]).norm()
        };
        let ds: Vec<f64> = [-3.0, -1.0, 0.0, 1.0, 3.0].iter().map(|&b| dist(b)).collect();
        assert!(ds.windows(2).all(|p| p[1] > p[0]), "{ds:?}");
    }

    #[test]
    fn rigid_root_motion_moves_mesh_rigidly() {
        let t = template();
        let mut pose = PoseParams::identity(15);
        pose.set_rotation(4, UnitQuaternion::from_euler_angles(0.2, -0.4, 0.7));
        pose.set_rotation(10, UnitQuaternion::from_euler_angles(0.5, 0.1, 0.0));
        let base = t.pose(&pose, &ShapeParams::default()).unwrap();
        let g = UnitQuaternion::from_euler_angles(0.3, 1.1, -0.2);
        let shift = Vec3::new(0.4, -0.1, 0.25);
        let mut moved = pose.clone();
        moved.set_rotation(0, g);
        // Root rotates about the pelvis joint, so compensate the translation
        // to express a rigid motion about the world origin.
        let pelvis = t.joints[0];
        let tr = g * pelvis + shift - pelvis;
        moved.translation = [tr.x, tr.y, tr.z];
        let m = t.pose(&moved, &ShapeParams::default()).unwrap();
        for (a, b) in m.positions.iter().zip(&base.positions) {
            assert!((a - (g * b + shift)).norm() < 1e-5);
        }
        for n in &m.normals {
            assert!((n.norm() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = template();
        let mut pose = PoseParams::identity(15);
        pose.rotations[3] = [1.0, 0.1, 0.0, 0.0];
        assert!(t.pose(&pose, &ShapeParams::default()).is_err());
        assert!(ShapeParams::new([5.5, 0.0, 0.0]).is_err());
        let mut limbs = default_limbs();
        limbs[4].bone_end = limbs[4].bone_start;
        assert!(build_toy_humanoid(Tessellation::default(), &limbs).is_err());
    }

    #[test]
    fn girth_grows_silhouette_volume() {
        let t = template();
        let pose = PoseParams::identity(15);
        let spread = |b: f64| {
            let m = t.pose(&pose, &ShapeParams::new([b, 0.0, 0.0]).unwrap()).unwrap();
            let spine = t.joint_index("spine").unwrap();
            m.positions.iter().zip(&t.vertex_limb).filter(|(_, &l)| l == spine).map(|(p, _)| p.x.abs()).fold(0.0, f64::max)
        };
        assert!(spread(3.0) > spread(0.0) && spread(0.0) > spread(-3.0));
    }
}
