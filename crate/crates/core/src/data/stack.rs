//! Image-stack files.
//!
//! A stack is a checksummed container whose metadata records the grid, CTF,
//! residue profile, counts, noise level and dose label. Sections:
//!
//! - `images`: `M × side × side` little-endian `f32`, row-major per image;
//! - `gt_poses`: `M × 9` `f64` rotation matrices, row-major (optional);
//! - `gt_frame_of`: `M` little-endian `u32` frame labels (optional);
//! - `gt_frames`: `F × N × 3` `f64` coordinates in Å (optional).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, ImageStack};
use crate::container::{bytes_to_f32s, bytes_to_f64s, f32s_to_bytes, f64s_to_bytes, write_container, Container};
use crate::error::{Error, Result};
use crate::geom::{Conformation, Rotation};
use crate::imaging::{CtfParams, Image, ImageGrid, ResidueProfile};

pub const STACK_MAGIC: &[u8; 8] = b"CGSTACK\0";
const VERSION: u32 = 1;

/// Stack metadata, readable without touching the pixel payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    pub image_count: usize,
    pub grid: ImageGrid,
    pub ctf: Option<CtfParams>,
    pub profile: ResidueProfile,
    pub noise_sigma: f64,
    pub dose: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    /// Number of distinct ground-truth frames, zero without ground truth.
    pub frame_count: usize,
}

impl StackHeader {
    pub fn has_ground_truth(&self) -> bool {
        self.frame_count > 0
    }
}

pub fn write_stack(stack: &ImageStack, path: &Path) -> Result<()> {
    stack.validate()?;
    let header = StackHeader {
        image_count: stack.len(),
        grid: stack.grid,
        ctf: stack.ctf,
        profile: stack.profile.clone(),
        noise_sigma: stack.noise_sigma,
        dose: stack.dose,
        seed: stack.seed,
        config_hash: stack.config_hash.clone(),
        frame_count: stack.ground_truth.as_ref().map_or(0, |gt| gt.frames.len()),
    };
    let pixels: Vec<f32> = stack.images.iter().flat_map(|im| im.pixels().iter().map(|&v| v as f32)).collect();
    let images = f32s_to_bytes(&pixels);
    let mut sections: Vec<(&str, Vec<u8>)> = vec![("images", images)];
    if let Some(gt) = &stack.ground_truth {
        let mats: Vec<f64> = gt.poses.iter().flat_map(|r| r.matrix().concat()).collect();
        let labels: Vec<u8> = gt.frame_of.iter().flat_map(|&f| (f as u32).to_le_bytes()).collect();
        let coords: Vec<f64> = gt.frames.iter().flat_map(|f| f.to_flat()).collect();
        sections.push(("gt_poses", f64s_to_bytes(&mats)));
        sections.push(("gt_frame_of", labels));
        sections.push(("gt_frames", f64s_to_bytes(&coords)));
    }
    let refs: Vec<(&str, &[u8])> = sections.iter().map(|(n, b)| (*n, b.as_slice())).collect();
    write_container(path, STACK_MAGIC, VERSION, &header, &refs)
}

/// Open stack file; pixels are read on demand.
#[derive(Debug)]
pub struct StackReader {
    container: Container,
    header: StackHeader,
}

impl StackReader {
    pub fn open(path: &Path) -> Result<Self> {
        let container = Container::open(path, STACK_MAGIC)?;
        if container.version() != VERSION {
            return Err(Error::Format(format!(
                "{}: stack version {} is not supported (expected {VERSION})",
                path.display(),
                container.version()
            )));
        }
        let header: StackHeader = container.meta()?;
        let expected = (header.image_count * header.grid.pixel_count() * 4) as u64;
        match container.section("images") {
            Some(s) if s.length == expected => {}
            _ => return Err(Error::Format(format!("{}: image payload does not match the header", path.display()))),
        }
        Ok(Self { container, header })
    }

    pub fn header(&self) -> &StackHeader {
        &self.header
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    /// One image, read without verifying the payload digest.
    pub fn read_image(&self, i: usize) -> Result<Image> {
        if i >= self.header.image_count {
            return Err(Error::InvalidInput(format!("image {i} out of range for {} images", self.header.image_count)));
        }
        let entry = self.container.section("images").expect("checked on open");
        let len = (self.header.grid.pixel_count() * 4) as u64;
        let bytes = self.container.read_range(entry, i as u64 * len, len)?;
        let pixels = bytes_to_f32s(&bytes)?.into_iter().map(f64::from).collect();
        Image::new(pixels, self.header.grid)
    }

    /// Whole stack with every section verified.
    pub fn read_all(&self) -> Result<ImageStack> {
        let h = &self.header;
        let pixels = bytes_to_f32s(&self.container.read_section("images")?)?;
        let images = pixels
            .chunks_exact(h.grid.pixel_count())
            .map(|c| Image::new(c.iter().map(|&v| f64::from(v)).collect(), h.grid))
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = if h.has_ground_truth() {
            let mats = bytes_to_f64s(&self.container.read_section("gt_poses")?)?;
            let labels = self.container.read_section("gt_frame_of")?;
            let coords = bytes_to_f64s(&self.container.read_section("gt_frames")?)?;
            let n = h.profile.len();
            if mats.len() != 9 * h.image_count || labels.len() != 4 * h.image_count || coords.len() != h.frame_count * n * 3 {
                return Err(Error::Format("ground-truth sections do not match the header".into()));
            }
            Some(GroundTruth {
                poses: mats
                    .chunks_exact(9)
                    .map(|m| Rotation::from_matrix([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]]))
                    .collect::<Result<_>>()?,
                frames: coords.chunks_exact(n * 3).map(Conformation::from_flat).collect::<Result<_>>()?,
                frame_of: labels
                    .chunks_exact(4)
                    .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                    .collect(),
            })
        } else {
            None
        };
        let stack = ImageStack {
            grid: h.grid,
            ctf: h.ctf,
            profile: h.profile.clone(),
            images,
            ground_truth,
            noise_sigma: h.noise_sigma,
            dose: h.dose,
            seed: h.seed,
            config_hash: h.config_hash.clone(),
        };
        stack.validate()?;
        Ok(stack)
    }
}

pub fn read_stack(path: &Path) -> Result<ImageStack> {
    StackReader::open(path)?.read_all()
}

/// Header only; the pixel payload is not read.
pub fn read_stack_header(path: &Path) -> Result<StackHeader> {
    Ok(StackReader::open(path)?.header)
}
