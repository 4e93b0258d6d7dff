//! Synthetic helix-hairpin templates: two antiparallel α-helices joined by a short loop.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::{norm, sub, Conformation, Vec3};

const HELIX_RADIUS: f64 = 2.28;
const BOND: f64 = 3.8;
const HELIX_RISE: f64 = 1.5;
const HELIX_TWIST: f64 = 100.0 * PI / 180.0;
const HELIX_SEPARATION: f64 = 10.0;
const LOOP_RESIDUES: usize = 4;

/// Residue ranges of a hairpin (0-based, half-open).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HairpinLayout {
    pub first_helix: (usize, usize),
    pub loop_residues: (usize, usize),
    pub second_helix: (usize, usize),
}

impl HairpinLayout {
    pub fn new(n: usize) -> Result<Self> {
        if n < LOOP_RESIDUES + 10 {
            return Err(Error::InvalidInput(format!(
                "a helix hairpin needs at least {} residues, got {n}",
                LOOP_RESIDUES + 10
            )));
        }
        let h1 = (n - LOOP_RESIDUES).div_ceil(2);
        Ok(Self {
            first_helix: (0, h1),
            loop_residues: (h1, h1 + LOOP_RESIDUES),
            second_helix: (h1 + LOOP_RESIDUES, n),
        })
    }

    /// Middle loop residue, the natural hinge point.
    pub fn pivot(&self) -> usize {
        (self.loop_residues.0 + self.loop_residues.1) / 2
    }
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn helix_point(k: usize, axis_x: f64, z0: f64, direction: f64) -> Vec3 {
    let t = k as f64 * HELIX_TWIST;
    [
        axis_x + HELIX_RADIUS * t.cos(),
        HELIX_RADIUS * t.sin() * direction,
        z0 + direction * k as f64 * HELIX_RISE,
    ]
}

/// Centered hairpin of `n` residues in the xz plane; helix axes run along z at
/// `x = ∓5 Å` and the loop arcs over the top.
pub fn helix_hairpin(n: usize) -> Result<(Conformation, HairpinLayout)> {
    let layout = HairpinLayout::new(n)?;
    let (_, h1) = layout.first_helix;
    let (s2, _) = layout.second_helix;
    let h2 = n - s2;
    let half = HELIX_SEPARATION / 2.0;
    let top = (h1 - 1) as f64 * HELIX_RISE;

    let mut coords: Vec<Vec3> = (0..h1).map(|k| helix_point(k, -half, 0.0, 1.0)).collect();
    let a = coords[h1 - 1];
    let second: Vec<Vec3> = (0..h2).map(|k| helix_point(k, half, top, -1.0)).collect();
    let b = second[0];
    // loop on a circular arc over both helix ends with equal 3.8 Å chords
    let segments = (LOOP_RESIDUES + 1) as f64;
    let d = norm(sub(b, a));
    let span = |alpha: f64| BOND * (segments * alpha / 2.0).sin() / (alpha / 2.0).sin();
    let (mut lo, mut hi) = (1e-9, 2.0 * PI / segments - 1e-9);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if span(mid) > d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let radius = BOND / (2.0 * (alpha / 2.0).sin());
    let u = scale(sub(b, a), 1.0 / d);
    let up = sub([0.0, 0.0, 1.0], scale(u, u[2]));
    let w = scale(up, 1.0 / norm(up));
    let half_angle = segments * alpha / 2.0;
    let mid = scale([a[0] + b[0], a[1] + b[1], a[2] + b[2]], 0.5);
    let center = sub(mid, scale(w, radius * half_angle.cos()));
    for j in 1..=LOOP_RESIDUES {
        let beta = -half_angle + j as f64 * alpha;
        let p = [
            center[0] + radius * (beta.sin() * u[0] + beta.cos() * w[0]),
            center[1] + radius * (beta.sin() * u[1] + beta.cos() * w[1]),
            center[2] + radius * (beta.sin() * u[2] + beta.cos() * w[2]),
        ];
        coords.push(p);
    }
    coords.extend(second);
    Ok((Conformation::new(coords)?.centered(), layout))
}

/// Helical `(i, i+4)` hydrogen-bond edges within each helix of a hairpin.
pub fn helix_hbond_edges(layout: &HairpinLayout) -> Vec<(usize, usize)> {
    [layout.first_helix, layout.second_helix]
        .iter()
        .flat_map(|&(s, e)| (s..e.saturating_sub(4)).map(|i| (i, i + 4)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helix_geometry() {
        let (x, layout) = helix_hairpin(30).unwrap();
        assert_eq!(x.residue_count(), 30);
        assert_eq!(layout.loop_residues, (13, 17));
        let c = x.coords();
        for (s, e) in [layout.first_helix, layout.second_helix] {
            for i in s..e - 1 {
                let d = norm(sub(c[i + 1], c[i]));
                assert!((d - 3.8).abs() < 0.01, "helix bond {i}: {d}");
            }
            for i in s..e.saturating_sub(4) {
                let d = norm(sub(c[i + 4], c[i]));
                assert!((5.5..6.5).contains(&d), "i,i+4 distance {d}");
            }
        }
        let centroid = x.centroid();
        assert!(norm(centroid) < 1e-12);
    }

    #[test]
    fn no_close_contacts() {
        for n in [14, 20, 31, 50] {
            let (x, _) = helix_hairpin(n).unwrap();
            let c = x.coords();
            for i in 0..n {
                for j in i + 1..n {
                    assert!(norm(sub(c[i], c[j])) > 2.5, "n={n} residues {i},{j}");
                }
                if i + 1 < n {
                    let d = norm(sub(c[i + 1], c[i]));
                    assert!((d - 3.8).abs() < 0.01, "n={n} bond {i}: {d}");
                }
            }
        }
        assert!(helix_hairpin(13).is_err());
    }

    #[test]
    fn hbond_edges_stay_inside_helices() {
        let layout = HairpinLayout::new(30).unwrap();
        let edges = helix_hbond_edges(&layout);
        assert_eq!(edges.len(), 9 + 9);
        assert!(edges.iter().all(|&(i, j)| j == i + 4 && (j < 13 || i >= 17)));
    }
}
