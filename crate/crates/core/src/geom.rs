//! Conformations, rotations, rigid superposition and SO(3) grids.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Cα trace of a protein: one point per residue, in Ångström.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conformation {
    coords: Vec<Vec3>,
}

impl Conformation {
    pub fn new(coords: Vec<Vec3>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a conformation needs at least 2 residues, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("coordinates of residue {}", i + 1)));
        }
        Ok(Self { coords })
    }

    /// Builds a conformation from a row-major `N×3` buffer.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::Dimension(format!(
                "flat coordinate buffer of length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn residue_count(&self) -> usize {
        self.coords.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.coords.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn translated(&self, t: Vec3) -> Conformation {
        Conformation {
            coords: self
                .coords
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }

    /// Copy with the centroid moved to the origin.
    pub fn centered(&self) -> Conformation {
        let c = self.centroid();
        self.translated([-c[0], -c[1], -c[2]])
    }
}

/// Proper rotation of R³.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Rotation3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Rotation3::identity())
    }

    /// Validates orthonormality and `det = +1` to within 1e-9.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let mat = Matrix3::from_fn(|r, c| m[r][c]);
        let gram = mat.transpose() * mat - Matrix3::identity();
        if gram.iter().any(|v| v.abs() > 1e-9) || (mat.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("matrix is not a proper rotation".into()));
        }
        Ok(Rotation(Rotation3::from_matrix_unchecked(mat)))
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let v = Vector3::from(axis);
        if v.norm() == 0.0 {
            return Self::identity();
        }
        Rotation(Rotation3::from_axis_angle(&Unit::new_normalize(v), angle))
    }

    /// Unit quaternion `[w, x, y, z]`; it is normalized on entry.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Rotation(uq.to_rotation_matrix())
    }

    /// Quaternion `[w, x, y, z]` with `w ≥ 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.0);
        let (w, v) = (q.scalar(), q.vector());
        let s = if w < 0.0 { -1.0 } else { 1.0 };
        [s * w, s * v[0], s * v[1], s * v[2]]
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let m = self.0.matrix();
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    #[inline]
    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = self.0.matrix();
        [
            m[(0, 0)] * v[0] + m[(0, 1)] * v[1] + m[(0, 2)] * v[2],
            m[(1, 0)] * v[0] + m[(1, 1)] * v[1] + m[(1, 2)] * v[2],
            m[(2, 0)] * v[0] + m[(2, 1)] * v[1] + m[(2, 2)] * v[2],
        ]
    }

    /// Applies the transpose (inverse) rotation.
    #[inline]
    pub fn apply_inverse(&self, v: Vec3) -> Vec3 {
        let m = self.0.matrix();
        [
            m[(0, 0)] * v[0] + m[(1, 0)] * v[1] + m[(2, 0)] * v[2],
            m[(0, 1)] * v[0] + m[(1, 1)] * v[1] + m[(2, 1)] * v[2],
            m[(0, 2)] * v[0] + m[(1, 2)] * v[1] + m[(2, 2)] * v[2],
        ]
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.inverse())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

/// Rotates every residue of `x` about the origin.
pub fn apply_pose(phi: &Rotation, x: &Conformation) -> Conformation {
    Conformation {
        coords: x.coords.iter().map(|&p| phi.apply(p)).collect(),
    }
}

/// Rotation angle of `pᵀq`, in `[0, π]`.
pub fn geodesic_distance(p: &Rotation, q: &Rotation) -> f64 {
    quaternion_angle(p.inverse().compose(q).to_quaternion())
}

fn quaternion_angle(q: [f64; 4]) -> f64 {
    let v = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    2.0 * v.atan2(q[0].abs())
}

/// Angle between the rotations represented by two unit quaternions.
#[inline]
fn quaternion_distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]).abs();
    2.0 * dot.min(1.0).acos()
}

/// Optimal rigid superposition of `b` onto `a`.
#[derive(Clone, Debug)]
pub struct Superposition {
    pub rotation: Rotation,
    /// Translation applied after the rotation.
    pub translation: Vec3,
    pub rmsd: f64,
}

/// Kabsch superposition restricted to proper rotations.
pub fn superpose(a: &Conformation, b: &Conformation) -> Result<Superposition> {
    if a.residue_count() != b.residue_count() {
        return Err(Error::Dimension(format!(
            "cannot superpose {} residues onto {}",
            b.residue_count(),
            a.residue_count()
        )));
    }
    let ca = a.centroid();
    let cb = b.centroid();
    let mut h = Matrix3::<f64>::zeros();
    for (pa, pb) in a.coords.iter().zip(&b.coords) {
        let va = Vector3::from(sub(*pa, ca));
        let vb = Vector3::from(sub(*pb, cb));
        h += vb * va.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("3x3 SVD always yields U");
    let v = svd.v_t.expect("3x3 SVD always yields V^T").transpose();
    let mut d = Matrix3::<f64>::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        d[(imin, imin)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rotation = Rotation(Rotation3::from_matrix_unchecked(r));
    let rb = rotation.apply(cb);
    let translation = [ca[0] - rb[0], ca[1] - rb[1], ca[2] - rb[2]];

    let mut sq = 0.0;
    for (pa, pb) in a.coords.iter().zip(&b.coords) {
        let m = rotation.apply(*pb);
        let diff = [
            pa[0] - m[0] - translation[0],
            pa[1] - m[1] - translation[1],
            pa[2] - m[2] - translation[2],
        ];
        sq += diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
    }
    Ok(Superposition {
        rotation,
        translation,
        rmsd: (sq / a.residue_count() as f64).sqrt(),
    })
}

/// RMSD after optimal proper-rigid alignment, in Å.
pub fn kabsch_rmsd(a: &Conformation, b: &Conformation) -> Result<f64> {
    superpose(a, b).map(|s| s.rmsd)
}

/// Approximately uniform deterministic covering of SO(3).
#[derive(Clone, Debug)]
pub struct So3Grid {
    rotations: Vec<Rotation>,
    quaternions: Vec<[f64; 4]>,
    resolution: f64,
}

impl So3Grid {
    /// Builds a grid from explicit rotations and measures its resolution.
    pub fn from_rotations(rotations: Vec<Rotation>) -> Result<Self> {
        if rotations.is_empty() {
            return Err(Error::InvalidInput("SO(3) grid must be nonempty".into()));
        }
        let quaternions: Vec<[f64; 4]> = rotations.iter().map(|r| r.to_quaternion()).collect();
        let resolution = sampled_nn_distance(&quaternions);
        Ok(Self {
            rotations,
            quaternions,
            resolution,
        })
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// Nominal angular spacing (radians).
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Index and geodesic distance of the grid rotation closest to `q`.
    pub fn nearest(&self, q: &Rotation) -> (usize, f64) {
        let qq = q.to_quaternion();
        let mut best = (0, f64::INFINITY);
        for (i, g) in self.quaternions.iter().enumerate() {
            let dot = (g[0] * qq[0] + g[1] * qq[1] + g[2] * qq[2] + g[3] * qq[3]).abs();
            let d = -dot;
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, quaternion_distance(&self.quaternions[best.0], &qq))
    }
}

const RESOLUTION_SAMPLES: usize = 512;

/// Largest nearest-neighbour distance over a deterministic subsample of grid points.
fn sampled_nn_distance(quats: &[[f64; 4]]) -> f64 {
    let n = quats.len();
    if n == 1 {
        return PI;
    }
    let samples = n.min(RESOLUTION_SAMPLES);
    let mut worst: f64 = 0.0;
    for s in 0..samples {
        let i = s * n / samples;
        let mut best_dot: f64 = -1.0;
        for (j, q) in quats.iter().enumerate() {
            if j == i {
                continue;
            }
            let p = &quats[i];
            let dot = (p[0] * q[0] + p[1] * q[1] + p[2] * q[2] + p[3] * q[3]).abs();
            best_dot = best_dot.max(dot);
        }
        worst = worst.max(2.0 * best_dot.min(1.0).acos());
    }
    worst
}

fn rot_z(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle)
}

fn rot_y(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle)
}

/// Deterministic, approximately uniform SO(3) grid of roughly `target_count` rotations.
///
/// Viewing directions come from a spherical Fibonacci lattice and each carries
/// a staggered ring of in-plane angles (ZYZ Euler composition). For uniform
/// angles the two factors give the Haar measure, so equal spacing on the sphere
/// and on the fibre yields an even covering with `n_psi ≈ (π·target)^(1/3)`.
pub fn so3_grid(target_count: usize) -> Result<So3Grid> {
    if target_count == 0 {
        return Err(Error::InvalidInput("SO(3) grid target count must be positive".into()));
    }
    if target_count == 1 {
        return So3Grid::from_rotations(vec![Rotation::identity()]);
    }
    let t = target_count as f64;
    let mut n_psi = ((PI * t).cbrt().round() as usize).max(1);
    let mut n_dir = ((t / n_psi as f64).round() as usize).max(1);
    if ((n_dir * n_psi) as f64 - t).abs() > 0.25 * t {
        n_psi = 1;
        n_dir = target_count;
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let golden_angle = 2.0 * PI * (1.0 - 1.0 / golden);
    let mut rotations = Vec::with_capacity(n_dir * n_psi);
    for i in 0..n_dir {
        let z = 1.0 - (2 * i + 1) as f64 / n_dir as f64;
        let theta = z.clamp(-1.0, 1.0).acos();
        let phi = (i as f64 * golden_angle).rem_euclid(2.0 * PI);
        let stagger = (i as f64 / golden).fract();
        let base = rot_z(phi) * rot_y(theta);
        for j in 0..n_psi {
            let psi = 2.0 * PI * (j as f64 + stagger) / n_psi as f64;
            rotations.push(Rotation(base * rot_z(psi)));
        }
    }
    So3Grid::from_rotations(rotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Rotation {
        use rand_distr::StandardNormal;
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        Rotation::from_quaternion(q)
    }

    fn random_conf(rng: &mut impl Rng, n: usize) -> Conformation {
        Conformation::new(
            (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-10.0..10.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn conformation_rejects_degenerate_input() {
        assert!(Conformation::new(vec![[0.0; 3]]).is_err());
        assert!(Conformation::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]).is_err());
        assert!(Conformation::from_flat(&[0.0; 7]).is_err());
    }

    #[test]
    fn identity_pose_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_conf(&mut rng, 7);
        assert_eq!(apply_pose(&Rotation::identity(), &x), x);
    }

    #[test]
    fn half_turn_about_z() {
        let r = Rotation::from_axis_angle([0.0, 0.0, 1.0], PI);
        let p = r.apply([1.0, 0.0, 0.0]);
        assert!((p[0] + 1.0).abs() < 1e-15 && p[1].abs() < 1e-15 && p[2].abs() < 1e-15);
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_conf(&mut rng, 5);
        for _ in 0..100 {
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            let a = apply_pose(&r1.compose(&r2), &x);
            let b = apply_pose(&r1, &apply_pose(&r2, &x));
            for (p, q) in a.coords().iter().zip(b.coords()) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            assert!(Rotation::from_matrix(r.matrix()).is_ok());
        }
        let reflection = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Rotation::from_matrix(reflection).is_err());
    }

    #[test]
    fn geodesic_distance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_rotation(&mut rng);
        assert!(geodesic_distance(&r, &r) < 1e-12);
        for axis in [[1.0, 0.0, 0.0], [0.3, -0.4, 0.8], [0.0, 0.0, 1.0]] {
            let half = Rotation::from_axis_angle(axis, PI);
            assert!((geodesic_distance(&Rotation::identity(), &half) - PI).abs() < 1e-12);
        }
        let small = Rotation::from_axis_angle([0.0, 0.0, 1.0], 0.3);
        assert!((geodesic_distance(&Rotation::identity(), &small) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn kabsch_two_point_example() {
        let a = Conformation::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let b = Conformation::new(vec![[0.0; 3], [3.0, 0.0, 0.0]]).unwrap();
        // centred: ±0.5 vs ±1.5 along the same line, residuals 1.0 each
        assert!((kabsch_rmsd(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(kabsch_rmsd(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn kabsch_rejects_mismatched_lengths() {
        let a = Conformation::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let b = Conformation::new(vec![[0.0; 3], [3.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(kabsch_rmsd(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn kabsch_never_reflects() {
        // a chiral tetrahedron and its mirror image cannot be superposed by a rotation
        let a = Conformation::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 3.0],
        ])
        .unwrap();
        let mirror =
            Conformation::new(a.coords().iter().map(|p| [p[0], p[1], -p[2]]).collect()).unwrap();
        let s = superpose(&a, &mirror).unwrap();
        assert!(s.rmsd > 0.1);
        let m = s.rotation.matrix();
        let det = Matrix3::from_fn(|r, c| m[r][c]).determinant();
        assert!((det - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_degenerate_and_counts() {
        let g = so3_grid(1).unwrap();
        assert_eq!(g.len(), 1);
        assert!(geodesic_distance(&g.rotations()[0], &Rotation::identity()) < 1e-15);
        for target in [2usize, 3, 5, 10, 50, 100, 576, 1000] {
            let g = so3_grid(target).unwrap();
            let rel = (g.len() as f64 - target as f64).abs() / target as f64;
            assert!(rel <= 0.25, "target {target} produced {}", g.len());
        }
        assert!(so3_grid(0).is_err());
    }

    #[test]
    fn grid_rotations_are_distinct() {
        let g = so3_grid(600).unwrap();
        let q = &g.quaternions;
        for i in 0..q.len() {
            for j in i + 1..q.len() {
                assert!(quaternion_distance(&q[i], &q[j]) > 1e-6);
            }
        }
    }

    #[test]
    fn grid_covers_random_rotations() {
        let g = so3_grid(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let q = random_rotation(&mut rng);
            let (_, d) = g.nearest(&q);
            assert!(d <= 2.0 * g.resolution(), "{d} > 2 * {}", g.resolution());
        }
    }

    #[test]
    fn brute_force_rmsd_small_sets() {
        // dense rotation sampling with optimal translation (centroid matching)
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = so3_grid(200_000).unwrap();
        for n in 2..=4 {
            let a = random_conf(&mut rng, n);
            let b = random_conf(&mut rng, n);
            let ac = a.centered();
            let bc = b.centered();
            let mut best = f64::INFINITY;
            let mut best_rot = Rotation::identity();
            for r in grid.rotations() {
                let mut sq = 0.0;
                for (p, q) in ac.coords().iter().zip(bc.coords()) {
                    let m = r.apply(*q);
                    sq += (0..3).map(|k| (p[k] - m[k]).powi(2)).sum::<f64>();
                }
                if sq < best {
                    best = sq;
                    best_rot = *r;
                }
            }
            // polish the best grid rotation with a local random search
            let mut step = grid.resolution();
            for _ in 0..60 {
                for _ in 0..40 {
                    let axis: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    let cand = Rotation::from_axis_angle(axis, step).compose(&best_rot);
                    let mut sq = 0.0;
                    for (p, q) in ac.coords().iter().zip(bc.coords()) {
                        let m = cand.apply(*q);
                        sq += (0..3).map(|k| (p[k] - m[k]).powi(2)).sum::<f64>();
                    }
                    if sq < best {
                        best = sq;
                        best_rot = cand;
                    }
                }
                step *= 0.8;
            }
            let brute = (best / n as f64).sqrt();
            let kabsch = kabsch_rmsd(&a, &b).unwrap();
            assert!((brute - kabsch).abs() < 1e-4, "n={n}: {brute} vs {kabsch}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn conf_strategy(n: usize) -> impl Strategy<Value = Conformation> {
            prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), n)
                .prop_map(|c| Conformation::new(c).unwrap())
        }

        fn quat_strategy() -> impl Strategy<Value = Rotation> {
            prop::array::uniform4(-1.0f64..1.0)
                .prop_filter("nonzero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
                .prop_map(Rotation::from_quaternion)
        }

        proptest! {
            #[test]
            fn pose_preserves_distances(x in conf_strategy(6), r in quat_strategy()) {
                let y = apply_pose(&r, &x);
                for i in 0..6 {
                    for j in 0..6 {
                        let d0 = norm(sub(x.coords()[i], x.coords()[j]));
                        let d1 = norm(sub(y.coords()[i], y.coords()[j]));
                        prop_assert!((d0 - d1).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn rmsd_symmetric(a in conf_strategy(8), b in conf_strategy(8)) {
                let ab = kabsch_rmsd(&a, &b).unwrap();
                let ba = kabsch_rmsd(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() < 1e-9);
            }

            #[test]
            fn rmsd_rigid_invariance(
                a in conf_strategy(8),
                b in conf_strategy(8),
                r in quat_strategy(),
                t in prop::array::uniform3(-50.0f64..50.0),
            ) {
                let base = kabsch_rmsd(&a, &b).unwrap();
                let moved = apply_pose(&r, &b).translated(t);
                prop_assert!((kabsch_rmsd(&a, &moved).unwrap() - base).abs() < 1e-8);
                prop_assert!((kabsch_rmsd(&apply_pose(&r, &a).translated(t), &b).unwrap() - base).abs() < 1e-8);
                prop_assert!(kabsch_rmsd(&a, &apply_pose(&r, &a).translated(t)).unwrap() < 1e-8);
            }
        }
    }
}
