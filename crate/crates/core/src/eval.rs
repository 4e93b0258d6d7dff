//! Reconstruction metrics: per-image RMSD against ground truth, the template
//! baseline, histograms and pose-accuracy summaries.
//!
//! Reports serialize to JSON and CSV. `report.csv` has one row per image
//! (`image,frame,rmsd,template_rmsd,pose_error`, the last blank without pose
//! measures); `histogram.csv` has `bin_start,bin_end,count,template_count`.
//! CSV files start with a `# config_hash=...` comment line.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageStack;
use crate::error::{Error, Result};
use crate::geom::{geodesic_distance, kabsch_rmsd, so3_grid};
use crate::graph::ProteinGraph;
use crate::pose::PoseMeasure;
use crate::train::{stack_digest, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorStats {
    /// Geodesic error of each measure's top rotation, radians.
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub stack_digest: String,
    pub decoder_kind: String,
    pub epochs_done: usize,
    /// Å, one per image.
    pub per_image_rmsd: Vec<f64>,
    pub mean_rmsd: f64,
    pub median_rmsd: f64,
    /// RMSD of the undeformed template against each image's ground truth.
    pub template_rmsd: Vec<f64>,
    pub template_mean_rmsd: f64,
    pub pose_error_stats: Option<PoseErrorStats>,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Middle value, or the average of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Errors if the checkpoint was not trained on this stack.
pub fn ensure_matching(checkpoint: &Checkpoint, stack: &ImageStack) -> Result<()> {
    let digest = stack_digest(stack);
    if checkpoint.stack_digest != digest {
        return Err(Error::Config(format!(
            "checkpoint was trained on stack {} but this stack is {digest}",
            checkpoint.stack_digest
        )));
    }
    if checkpoint.latents.len() != stack.len() {
        return Err(Error::Dimension(format!(
            "checkpoint has {} latents for {} images",
            checkpoint.latents.len(),
            stack.len()
        )));
    }
    Ok(())
}

/// Geodesic error between each measure's top rotation and the ground-truth pose.
pub fn pose_error(measures: &[PoseMeasure], stack: &ImageStack) -> Result<PoseErrorStats> {
    let gt = stack.ground_truth()?;
    if measures.len() != gt.poses.len() {
        return Err(Error::Dimension(format!(
            "{} pose measures for {} images",
            measures.len(),
            gt.poses.len()
        )));
    }
    let per_image: Vec<f64> = measures
        .iter()
        .zip(&gt.poses)
        .map(|(mu, phi)| geodesic_distance(mu.top(), phi))
        .collect();
    Ok(PoseErrorStats {
        mean: mean(&per_image),
        median: median(&per_image),
        per_image,
    })
}

/// Decodes every latent and scores it against ground truth.
///
/// Pose errors are reported when the checkpoint holds a complete pose cache.
pub fn evaluate(checkpoint: &Checkpoint, stack: &ImageStack, graph: &ProteinGraph) -> Result<EvalReport> {
    let gt = stack.ground_truth()?;
    let m = stack.len();
    if checkpoint.latents.len() != m {
        return Err(Error::Dimension(format!("checkpoint has {} latents for {m} images", checkpoint.latents.len())));
    }
    let template = &checkpoint.template;
    let pairs: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let truth = &gt.frames[gt.frame_of[i]];
            let x = checkpoint.decoder.decode(checkpoint.latents.get(i), graph, template)?;
            Ok((kabsch_rmsd(&x, truth)?, kabsch_rmsd(template, truth)?))
        })
        .collect::<Result<_>>()?;
    let (per_image_rmsd, template_rmsd): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();

    let pose_error_stats = match &checkpoint.pose_cache {
        Some(cache) if cache.entries.len() == m && cache.entries.iter().all(|e| !e.is_empty()) => {
            let grid = so3_grid(cache.grid_points)?;
            let measures = (0..m).map(|i| cache.measure(i, &grid)).collect::<Result<Vec<_>>>()?;
            Some(pose_error(&measures, stack)?)
        }
        _ => None,
    };

    Ok(EvalReport {
        config_hash: checkpoint.config_hash.clone(),
        stack_digest: checkpoint.stack_digest.clone(),
        decoder_kind: checkpoint.decoder.kind().into(),
        epochs_done: checkpoint.epochs_done,
        mean_rmsd: mean(&per_image_rmsd),
        median_rmsd: median(&per_image_rmsd),
        template_mean_rmsd: mean(&template_rmsd),
        per_image_rmsd,
        template_rmsd,
        pose_error_stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` edges at multiples of the bin width, starting at 0 (empty for no values).
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Counts of `values` in bins `[k·w, (k+1)·w)`. Values must be finite and non-negative.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidInput(format!("bin width must be positive, got {bin_width}")));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidInput(format!("histogram values must be finite and non-negative, got {v}")));
    }
    if values.is_empty() {
        return Ok(Histogram {
            edges: Vec::new(),
            counts: Vec::new(),
        });
    }
    let bin = |v: f64| (v / bin_width).floor() as usize;
    let bins = values.iter().map(|&v| bin(v)).max().unwrap_or(0) + 1;
    let mut counts = vec![0; bins];
    for &v in values {
        counts[bin(v)] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|k| k as f64 * bin_width).collect(),
        counts,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn to_csv(&self, frame_of: &[usize]) -> String {
        let mut s = format!("# config_hash={}\nimage,frame,rmsd,template_rmsd,pose_error\n", self.config_hash);
        for (i, (r, t)) in self.per_image_rmsd.iter().zip(&self.template_rmsd).enumerate() {
            let pe = self
                .pose_error_stats
                .as_ref()
                .map(|p| format!("{:.6}", p.per_image[i]))
                .unwrap_or_default();
            let frame = frame_of.get(i).map(|f| f.to_string()).unwrap_or_default();
            s.push_str(&format!("{i},{frame},{r:.6},{t:.6},{pe}\n"));
        }
        s
    }

    /// Side-by-side histograms of reconstructed and template RMSDs on a shared bin range.
    pub fn histogram_csv(&self, bin_width: f64) -> Result<String> {
        let a = histogram(&self.per_image_rmsd, bin_width)?;
        let b = histogram(&self.template_rmsd, bin_width)?;
        let bins = a.counts.len().max(b.counts.len());
        let mut s = format!("# config_hash={}\nbin_start,bin_end,count,template_count\n", self.config_hash);
        for k in 0..bins {
            let c = a.counts.get(k).copied().unwrap_or(0);
            let t = b.counts.get(k).copied().unwrap_or(0);
            s.push_str(&format!("{:.6},{:.6},{c},{t}\n", k as f64 * bin_width, (k + 1) as f64 * bin_width));
        }
        Ok(s)
    }
}
