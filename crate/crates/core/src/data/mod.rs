//! Datasets: synthetic trajectories, image-stack simulation and storage, PDB templates.

mod pdb;
mod simulate;
mod stack;
mod template;
mod trajectory;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Conformation, Rotation};
use crate::imaging::{CtfParams, Image, ImageGrid, ResidueProfile};

pub use pdb::{parse_pdb_calpha, read_pdb_calpha, PdbChain};
pub use simulate::{haar_rotation, simulate_stack, NoiseSpec, SimulationSpec};
pub use stack::{read_stack, read_stack_header, write_stack, StackHeader, StackReader, STACK_MAGIC};
pub use template::{helix_hairpin, helix_hbond_edges, HairpinLayout};
pub use trajectory::{bond_lengths, generate_trajectory, TrajectorySpec};

/// Gaussian amplitude and width (Å) for one residue type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianShape {
    pub amplitude: f64,
    pub width: f64,
}

/// Residue-type lookup for per-residue Gaussian profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileTable {
    pub default: GaussianShape,
    /// Overrides keyed by three-letter residue name.
    #[serde(default)]
    pub residues: BTreeMap<String, GaussianShape>,
}

/// The twenty standard amino acids.
pub const AMINO_ACIDS: [&str; 20] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET", "PHE", "PRO", "SER",
    "THR", "TRP", "TYR", "VAL",
];

impl Default for ProfileTable {
    /// Unit amplitude and 1.5 Å width for every standard residue.
    fn default() -> Self {
        let shape = GaussianShape {
            amplitude: 1.0,
            width: 1.5,
        };
        Self {
            default: shape,
            residues: AMINO_ACIDS.iter().map(|r| (r.to_string(), shape)).collect(),
        }
    }
}

impl ProfileTable {
    pub fn lookup(&self, residue: &str) -> GaussianShape {
        self.residues.get(&residue.to_ascii_uppercase()).copied().unwrap_or(self.default)
    }

    /// Per-residue profile; without names every residue gets the default shape.
    pub fn profile(&self, n: usize, names: Option<&[String]>) -> Result<ResidueProfile> {
        let shapes: Vec<GaussianShape> = match names {
            Some(names) => {
                if names.len() != n {
                    return Err(Error::Dimension(format!("{} residue names for {n} residues", names.len())));
                }
                names.iter().map(|r| self.lookup(r)).collect()
            }
            None => vec![self.default; n],
        };
        ResidueProfile::new(
            shapes.iter().map(|s| s.amplitude).collect(),
            shapes.iter().map(|s| s.width).collect(),
        )
    }
}

/// Ground truth recorded by the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<Rotation>,
    /// Distinct trajectory frames.
    pub frames: Vec<Conformation>,
    /// Frame index of each image.
    pub frame_of: Vec<usize>,
}

/// A dataset of images sharing one grid, CTF and residue profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub grid: ImageGrid,
    pub ctf: Option<CtfParams>,
    pub profile: ResidueProfile,
    pub images: Vec<Image>,
    pub ground_truth: Option<GroundTruth>,
    /// Per-pixel noise standard deviation used in simulation.
    pub noise_sigma: f64,
    /// Electron dose label (e/Å²) when the noise level was derived from a dose.
    pub dose: Option<f64>,
    pub seed: u64,
    /// Hash of the configuration that produced this stack (empty if none).
    pub config_hash: String,
}

impl ImageStack {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.iter().any(|im| im.grid() != self.grid) {
            return Err(Error::Dimension("stack images do not share one grid".into()));
        }
        if let Some(gt) = &self.ground_truth {
            let m = self.images.len();
            if gt.poses.len() != m || gt.frame_of.len() != m {
                return Err(Error::Dimension(format!(
                    "ground truth has {} poses and {} frame labels for {m} images",
                    gt.poses.len(),
                    gt.frame_of.len()
                )));
            }
            if let Some(&bad) = gt.frame_of.iter().find(|&&f| f >= gt.frames.len()) {
                return Err(Error::Dimension(format!("frame label {bad} out of range")));
            }
            if gt.frames.iter().any(|f| f.residue_count() != self.profile.len()) {
                return Err(Error::Dimension("ground-truth frames disagree with the profile length".into()));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> Result<&GroundTruth> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth("the stack carries no ground-truth poses or conformations".into()))
    }

    /// Ground-truth conformation of image `i`.
    pub fn gt_conformation(&self, i: usize) -> Result<&Conformation> {
        let gt = self.ground_truth()?;
        Ok(&gt.frames[gt.frame_of[i]])
    }

    pub fn gt_pose(&self, i: usize) -> Result<&Rotation> {
        Ok(&self.ground_truth()?.poses[i])
    }

    /// Stack restricted to the given image indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<ImageStack> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!("image index {bad} out of range for {} images", self.len())));
        }
        let ground_truth = self.ground_truth.as_ref().map(|gt| GroundTruth {
            poses: indices.iter().map(|&i| gt.poses[i]).collect(),
            frames: gt.frames.clone(),
            frame_of: indices.iter().map(|&i| gt.frame_of[i]).collect(),
        });
        Ok(ImageStack {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            ground_truth,
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> ImageStack {
        ImageStack {
            grid: self.grid,
            ctf: self.ctf,
            profile: self.profile.clone(),
            images: Vec::new(),
            ground_truth: None,
            noise_sigma: self.noise_sigma,
            dose: self.dose,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_covers_amino_acids() {
        let t = ProfileTable::default();
        assert_eq!(t.residues.len(), 20);
        assert_eq!(t.lookup("gly").width, 1.5);
        assert_eq!(t.lookup("UNK").amplitude, 1.0);
    }

    #[test]
    fn profile_from_names() {
        let mut t = ProfileTable::default();
        t.residues.insert(
            "TRP".into(),
            GaussianShape {
                amplitude: 2.0,
                width: 2.0,
            },
        );
        let names: Vec<String> = ["GLY", "TRP", "ALA"].iter().map(|s| s.to_string()).collect();
        let p = t.profile(3, Some(&names)).unwrap();
        assert_eq!(p.amplitudes(), &[1.0, 2.0, 1.0]);
        assert_eq!(p.widths(), &[1.5, 2.0, 1.5]);
        assert!(t.profile(4, Some(&names)).is_err());
        assert_eq!(t.profile(5, None).unwrap().len(), 5);
    }
}
