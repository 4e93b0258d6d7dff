//! Parametric conformational trajectories standing in for molecular-dynamics frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{norm, sub, Conformation, Rotation, Vec3};

const BOND_CORRECTION_SWEEPS: usize = 20;

/// How to generate trajectory frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Linear blend between two endpoints followed by bond-length correction.
    Interpolate {
        start: Conformation,
        end: Conformation,
        count: usize,
    },
    /// Rigid rotation of all residues after `pivot` about an axis through it.
    Hinge {
        template: Conformation,
        pivot: usize,
        axis: Vec3,
        max_angle: f64,
        count: usize,
    },
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TrajectorySpec::Interpolate { start, end, count } => {
                if *count < 2 {
                    return Err(Error::InvalidInput(format!("trajectory needs at least 2 frames, got {count}")));
                }
                if start.residue_count() != end.residue_count() {
                    return Err(Error::Dimension(format!(
                        "endpoints have {} and {} residues",
                        start.residue_count(),
                        end.residue_count()
                    )));
                }
            }
            TrajectorySpec::Hinge {
                template,
                pivot,
                axis,
                max_angle,
                count,
            } => {
                if *count < 2 {
                    return Err(Error::InvalidInput(format!("trajectory needs at least 2 frames, got {count}")));
                }
                if *pivot >= template.residue_count() {
                    return Err(Error::InvalidInput(format!(
                        "pivot {pivot} out of range for {} residues",
                        template.residue_count()
                    )));
                }
                if !(*max_angle > 0.0 && *max_angle < std::f64::consts::PI) {
                    return Err(Error::InvalidInput(format!("hinge angle must lie in (0, π), got {max_angle}")));
                }
                if !(norm(*axis) > 0.0) {
                    return Err(Error::InvalidInput("hinge axis must be nonzero".into()));
                }
            }
        }
        Ok(())
    }
}

/// Consecutive Cα–Cα distances.
pub fn bond_lengths(x: &Conformation) -> Vec<f64> {
    x.coords().windows(2).map(|w| norm(sub(w[1], w[0]))).collect()
}

/// Gauss-Seidel sweeps moving both ends of each bond symmetrically towards its target length.
fn correct_bonds(coords: &mut [Vec3], targets: &[f64]) {
    for _ in 0..BOND_CORRECTION_SWEEPS {
        for (i, &target) in targets.iter().enumerate() {
            let d = sub(coords[i + 1], coords[i]);
            let len = norm(d);
            if len == 0.0 {
                continue;
            }
            let s = 0.5 * (len - target) / len;
            for k in 0..3 {
                coords[i][k] += s * d[k];
                coords[i + 1][k] -= s * d[k];
            }
        }
    }
}

/// Frames of the trajectory, evenly spaced in the blend parameter or hinge angle.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Vec<Conformation>> {
    spec.validate()?;
    match spec {
        TrajectorySpec::Interpolate { start, end, count } => {
            let la = bond_lengths(start);
            let lb = bond_lengths(end);
            (0..*count)
                .map(|f| {
                    let t = f as f64 / (*count - 1) as f64;
                    let mut coords: Vec<Vec3> = start
                        .coords()
                        .iter()
                        .zip(end.coords())
                        .map(|(a, b)| std::array::from_fn(|k| (1.0 - t) * a[k] + t * b[k]))
                        .collect();
                    if f > 0 && f < *count - 1 {
                        let targets: Vec<f64> = la.iter().zip(&lb).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                        correct_bonds(&mut coords, &targets);
                    }
                    Conformation::new(coords)
                })
                .collect()
        }
        TrajectorySpec::Hinge {
            template,
            pivot,
            axis,
            max_angle,
            count,
        } => {
            let origin = template.coords()[*pivot];
            (0..*count)
                .map(|f| {
                    if f == 0 {
                        return Ok(template.clone());
                    }
                    let angle = max_angle * f as f64 / (*count - 1) as f64;
                    let r = Rotation::from_axis_angle(*axis, angle);
                    let coords = template
                        .coords()
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            if i <= *pivot {
                                p
                            } else {
                                let q = r.apply(sub(p, origin));
                                [q[0] + origin[0], q[1] + origin[1], q[2] + origin[2]]
                            }
                        })
                        .collect();
                    Conformation::new(coords)
                })
                .collect()
        }
    }
}
