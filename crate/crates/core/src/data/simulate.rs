//! Image-stack simulation from a trajectory.
//!
//! Images are rendered with the same forward model used for reconstruction
//! (an "inverse crime"); additive Gaussian pixel noise is the only mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, ImageStack};
use crate::error::{Error, Result};
use crate::geom::{Conformation, Rotation};
use crate::imaging::{ForwardModel, Image};

/// Pixel noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    None,
    /// Per-pixel standard deviation.
    Sigma { sigma: f64 },
    /// Electron dose in e/Å²; `σ = signal_rms / √(dose · pixel_area)`, with
    /// `signal_rms` the RMS pixel value of the clean stack.
    Dose { dose: f64 },
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Sigma { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidInput(format!("noise sigma must be >= 0, got {sigma}")))
            }
            NoiseSpec::Dose { dose } if !(dose > 0.0 && dose.is_finite()) => {
                Err(Error::InvalidInput(format!("dose must be positive, got {dose}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationSpec {
    pub images_per_frame: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Uniform (Haar) random rotation from a normalized quaternion of four standard normals.
pub fn haar_rotation(rng: &mut impl Rng) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-300 {
            return Rotation::from_quaternion(q);
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Renders `images_per_frame` randomly oriented images of every frame.
///
/// Image `f·images_per_frame + r` shows frame `f`. Each image draws its pose and
/// noise from its own counter-based stream, so output does not depend on
/// thread count. Pixels are rounded to single precision, the storage format.
pub fn simulate_stack(frames: &[Conformation], model: &ForwardModel, spec: &SimulationSpec) -> Result<ImageStack> {
    if frames.is_empty() || spec.images_per_frame == 0 {
        return Err(Error::InvalidInput("simulation needs at least one frame and one image per frame".into()));
    }
    spec.noise.validate()?;
    let frames: Vec<Conformation> = frames.iter().map(|f| f.centered()).collect();
    let m = frames.len() * spec.images_per_frame;
    let frame_of: Vec<usize> = (0..m).map(|i| i / spec.images_per_frame).collect();

    let clean: Vec<(Rotation, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let phi = haar_rotation(&mut stream(spec.seed, 2 * i as u64));
            model.forward(&frames[frame_of[i]], &phi).map(|img| (phi, img.into_pixels()))
        })
        .collect::<Result<_>>()?;

    let (sigma, dose) = match spec.noise {
        NoiseSpec::None => (0.0, None),
        NoiseSpec::Sigma { sigma } => (sigma, None),
        NoiseSpec::Dose { dose } => {
            let count = (m * model.grid().pixel_count()) as f64;
            let ms: f64 = clean.iter().map(|(_, p)| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / count;
            (ms.sqrt() / (dose * model.grid().pixel_area()).sqrt(), Some(dose))
        }
    };

    let grid = model.grid();
    let images: Vec<Image> = clean
        .par_iter()
        .enumerate()
        .map(|(i, (_, pixels))| {
            let mut rng = stream(spec.seed, 2 * i as u64 + 1);
            let noisy = pixels
                .iter()
                .map(|&v| {
                    let eps: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    (v + sigma * eps) as f32 as f64
                })
                .collect();
            Image::new(noisy, grid)
        })
        .collect::<Result<_>>()?;

    let stack = ImageStack {
        grid,
        ctf: model.ctf().copied(),
        profile: model.profile().clone(),
        images,
        ground_truth: Some(GroundTruth {
            poses: clean.iter().map(|(phi, _)| *phi).collect(),
            frames,
            frame_of,
        }),
        noise_sigma: sigma,
        dose,
        seed: spec.seed,
        config_hash: String::new(),
    };
    stack.validate()?;
    Ok(stack)
}
