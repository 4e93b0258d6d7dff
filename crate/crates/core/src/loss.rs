//! Reconstruction objective: expected data discrepancy under a pose measure
//! plus centring, bond-length and log pair-distance regularizers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{norm, sub, Conformation, Vec3};
use crate::graph::ProteinGraph;
use crate::imaging::{ForwardModel, Image};
use crate::nn::{Decoder, LatentTable};
use crate::pose::PoseMeasure;

/// Pairs whose chain-separation weight falls below this are skipped by [`R2Mode::Truncated`].
pub const R2_WEIGHT_CUTOFF: f64 = 1e-8;

/// Image side the default regularization weights are calibrated for.
pub const REFERENCE_SIDE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Decay rate of the pair weights `e^{-ω|i-j|}`.
    pub omega: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self::standard(true)
    }
}

impl RegWeights {
    /// `λ₀ = 5e-4`, `λ₁ = 0.01`, `ω = 0.25` and `λ₂ = 0.01` (or 0 without the pair term).
    pub fn standard(with_r2: bool) -> Self {
        Self {
            lambda0: 0.0005,
            lambda1: 0.01,
            lambda2: if with_r2 { 0.01 } else { 0.0 },
            omega: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !(ok(self.lambda0) && ok(self.lambda1) && ok(self.lambda2) && ok(self.omega)) {
            return Err(Error::InvalidInput(format!("regularization weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Scales the λ's by `(side/256)²` so their balance against an unnormalized
    /// pixel sum carries over to smaller images.
    pub fn rescaled_for_grid(&self, side: usize) -> Self {
        let s = (side as f64 / REFERENCE_SIDE as f64).powi(2);
        Self {
            lambda0: self.lambda0 * s,
            lambda1: self.lambda1 * s,
            lambda2: self.lambda2 * s,
            omega: self.omega,
        }
    }
}

/// Whether the pair regularizer skips pairs with negligible weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Mode {
    #[default]
    Truncated,
    Exact,
}

fn check_lengths(x: &Conformation, template: &Conformation) -> Result<()> {
    if x.residue_count() != template.residue_count() {
        return Err(Error::Dimension(format!(
            "conformation has {} residues, template {}",
            x.residue_count(),
            template.residue_count()
        )));
    }
    Ok(())
}

/// `Σ_φ μ(φ)·‖y − F(φ.x)‖²` and its gradient with respect to `x`.
pub fn data_term(y: &Image, x: &Conformation, mu: &PoseMeasure, model: &ForwardModel) -> Result<(f64, Vec<Vec3>)> {
    if mu.support().is_empty() {
        return Err(Error::InvalidInput("pose measure has empty support".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; x.residue_count()];
    for (phi, w) in mu.support() {
        let mut residual = model.forward(x, phi)?;
        for (r, yv) in residual.pixels_mut().iter_mut().zip(y.pixels()) {
            *r -= yv;
        }
        value += w * residual.squared_norm();
        let g = model.forward_grad(x, phi, &residual)?;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            for k in 0..3 {
                acc[k] += 2.0 * w * gi[k];
            }
        }
    }
    Ok((value, grad))
}

/// Squared norm of the centroid.
pub fn r0(x: &Conformation) -> (f64, Vec<Vec3>) {
    let n = x.residue_count() as f64;
    let c = x.centroid();
    let value = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
    // ∂‖c‖²/∂xⁱ = 2c/N = (2/N²)·Σⱼxʲ
    let g = c.map(|v| 2.0 * v / n);
    (value, vec![g; x.residue_count()])
}

/// Mean squared deviation of consecutive Cα distances from the template's.
pub fn r1(x: &Conformation, template: &Conformation) -> Result<(f64, Vec<Vec3>)> {
    check_lengths(x, template)?;
    let n = x.residue_count();
    let (p, q) = (x.coords(), template.coords());
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for i in 0..n - 1 {
        let diff = sub(p[i + 1], p[i]);
        let d = norm(diff);
        let dev = d - norm(sub(q[i + 1], q[i]));
        value += dev * dev;
        if d > 0.0 {
            let s = 2.0 * dev / (n as f64 * d);
            for k in 0..3 {
                grad[i + 1][k] += s * diff[k];
                grad[i][k] -= s * diff[k];
            }
        }
    }
    Ok((value / n as f64, grad))
}

/// `Σ_{i<j} e^{-ω|i−j|}·log²(‖xⁱ−xʲ‖/‖x₀ⁱ−x₀ʲ‖)`.
pub fn r2(x: &Conformation, template: &Conformation, omega: f64, mode: R2Mode) -> Result<(f64, Vec<Vec3>)> {
    check_lengths(x, template)?;
    let n = x.residue_count();
    let max_sep = match mode {
        R2Mode::Exact => n,
        R2Mode::Truncated if omega > 0.0 => ((-R2_WEIGHT_CUTOFF.ln()) / omega).floor() as usize,
        R2Mode::Truncated => n,
    };
    let (p, q) = (x.coords(), template.coords());
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for sep in 1..n.min(max_sep + 1) {
        let w = (-omega * sep as f64).exp();
        for i in 0..n - sep {
            let j = i + sep;
            let diff = sub(p[i], p[j]);
            let d = norm(diff);
            let d0 = norm(sub(q[i], q[j]));
            if d == 0.0 || d0 == 0.0 {
                return Err(Error::Singularity { i: i + 1, j: j + 1 });
            }
            let l = (d / d0).ln();
            value += w * l * l;
            let s = 2.0 * w * l / (d * d);
            for k in 0..3 {
                grad[i][k] += s * diff[k];
                grad[j][k] -= s * diff[k];
            }
        }
    }
    Ok((value, grad))
}

/// `λ₀R₀ + λ₁R₁ + λ₂R₂` and gradient.
pub fn regularization(x: &Conformation, template: &Conformation, w: &RegWeights, mode: R2Mode) -> Result<(f64, Vec<Vec3>)> {
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; x.residue_count()];
    let mut add = |lambda: f64, (v, g): (f64, Vec<Vec3>)| {
        value += lambda * v;
        for (a, b) in grad.iter_mut().zip(&g) {
            for k in 0..3 {
                a[k] += lambda * b[k];
            }
        }
    };
    if w.lambda0 != 0.0 {
        add(w.lambda0, r0(x));
    }
    if w.lambda1 != 0.0 {
        add(w.lambda1, r1(x, template)?);
    }
    if w.lambda2 != 0.0 {
        add(w.lambda2, r2(x, template, w.omega, mode)?);
    }
    Ok((value, grad))
}

/// Everything needed to score one image within a batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub index: usize,
    pub image: &'a Image,
    pub measure: &'a PoseMeasure,
}

/// Shared inputs to [`total_objective`].
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveContext<'a> {
    pub graph: &'a ProteinGraph,
    pub template: &'a Conformation,
    pub model: &'a ForwardModel,
    pub reg: &'a RegWeights,
    pub r2_mode: R2Mode,
}

#[derive(Clone, Debug)]
pub struct ObjectiveGrad {
    pub value: f64,
    /// Per-image objective values in batch order.
    pub per_image: Vec<f64>,
    pub decoder: Decoder,
    /// `(image index, ∂L/∂zᵢ)` in batch order.
    pub latents: Vec<(usize, Vec<f64>)>,
}

/// Objective of one image and the gradient with respect to its conformation.
pub fn image_objective(
    y: &Image,
    x: &Conformation,
    mu: &PoseMeasure,
    ctx: &ObjectiveContext<'_>,
) -> Result<(f64, Vec<f64>)> {
    let (dv, dg) = data_term(y, x, mu, ctx.model)?;
    let (rv, rg) = regularization(x, ctx.template, ctx.reg, ctx.r2_mode)?;
    let grad: Vec<f64> = dg
        .iter()
        .zip(&rg)
        .flat_map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
        .collect();
    Ok((dv + rv, grad))
}

/// Batch objective with gradients chained through the decoder.
///
/// Per-image work runs in parallel; the reduction is sequential in batch order,
/// so results do not depend on the number of worker threads.
pub fn total_objective(
    batch: &[BatchItem<'_>],
    decoder: &Decoder,
    latents: &LatentTable,
    ctx: &ObjectiveContext<'_>,
) -> Result<ObjectiveGrad> {
    let parts: Vec<Result<(f64, Decoder, Vec<f64>)>> = batch
        .par_iter()
        .map(|item| {
            decoder.decode_with_grad(latents.get(item.index), ctx.graph, ctx.template, |x| {
                image_objective(item.image, x, item.measure, ctx)
            })
        })
        .collect();
    let mut grad = decoder.zeros_like();
    let mut value = 0.0;
    let mut per_image = Vec::with_capacity(batch.len());
    let mut latent_grads = Vec::with_capacity(batch.len());
    for (item, part) in batch.iter().zip(parts) {
        let (v, g, gz) = part?;
        value += v;
        per_image.push(v);
        grad.add_assign(&g);
        latent_grads.push((item.index, gz));
    }
    Ok(ObjectiveGrad {
        value,
        per_image,
        decoder: grad,
        latents: latent_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_pose, Rotation};
    use crate::imaging::{CtfParams, ImageGrid, ResidueProfile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conf(rng: &mut impl Rng, n: usize) -> Conformation {
        Conformation::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-6.0..6.0))).collect()).unwrap()
    }

    fn fd_check(f: impl Fn(&Conformation) -> f64, x: &Conformation, grad: &[Vec3], h: f64, tol: f64) {
        let flat = x.to_flat();
        let analytic: Vec<f64> = grad.iter().flatten().copied().collect();
        let mut num = Vec::new();
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let mut m = flat.clone();
            m[i] -= h;
            num.push((f(&Conformation::from_flat(&p).unwrap()) - f(&Conformation::from_flat(&m).unwrap())) / (2.0 * h));
        }
        let diff: f64 = num.iter().zip(&analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale <= tol, "relative error {}", diff / scale);
    }

    #[test]
    fn r0_examples() {
        let x = Conformation::new(vec![[1.0, 0.0, 0.0]; 4]).unwrap();
        assert!((r0(&x).0 - 1.0).abs() < 1e-15);
        assert!(r0(&x.centered()).0 < 1e-28);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = random_conf(&mut rng, 6);
        fd_check(|c| r0(c).0, &x, &r0(&x).1, 1e-5, 1e-6);
    }

    #[test]
    fn r1_examples() {
        let t = Conformation::new(vec![[0.0; 3], [3.8, 0.0, 0.0]]).unwrap();
        let x = Conformation::new(vec![[0.0; 3], [0.0, 4.8, 0.0]]).unwrap();
        assert!((r1(&x, &t).unwrap().0 - 0.5).abs() < 1e-12);
        assert_eq!(r1(&t, &t).unwrap().0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = random_conf(&mut rng, 7);
        let x = random_conf(&mut rng, 7);
        let moved = apply_pose(&Rotation::from_axis_angle([1.0, 2.0, 3.0], 0.9), &x).translated([4.0, -1.0, 2.0]);
        assert!((r1(&x, &t).unwrap().0 - r1(&moved, &t).unwrap().0).abs() < 1e-9);
        fd_check(|c| r1(c, &t).unwrap().0, &x, &r1(&x, &t).unwrap().1, 1e-5, 1e-6);
    }

    #[test]
    fn r1_duplicate_points_have_zero_subgradient() {
        let t = Conformation::new(vec![[0.0; 3], [3.8, 0.0, 0.0], [7.6, 0.0, 0.0]]).unwrap();
        let x = Conformation::new(vec![[0.0; 3], [0.0; 3], [3.8, 0.0, 0.0]]).unwrap();
        let (v, g) = r1(&x, &t).unwrap();
        assert!((v - 3.8f64.powi(2) / 3.0).abs() < 1e-12);
        assert!(g.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn r2_examples() {
        let t = Conformation::new(vec![[0.0; 3], [3.8, 0.0, 0.0]]).unwrap();
        let x = Conformation::new(vec![[0.0; 3], [3.8 * std::f64::consts::E, 0.0, 0.0]]).unwrap();
        let v = r2(&x, &t, 0.25, R2Mode::Exact).unwrap().0;
        assert!((v - (-0.25f64).exp()).abs() < 1e-12);
        assert!((v - 0.7788).abs() < 1e-4);
        assert_eq!(r2(&t, &t, 0.25, R2Mode::Exact).unwrap().0, 0.0);

        let half = Conformation::new(vec![[0.0; 3], [1.9, 0.0, 0.0]]).unwrap();
        let double = Conformation::new(vec![[0.0; 3], [7.6, 0.0, 0.0]]).unwrap();
        let vh = r2(&half, &t, 0.25, R2Mode::Exact).unwrap().0;
        let vd = r2(&double, &t, 0.25, R2Mode::Exact).unwrap().0;
        assert!((vh - vd).abs() < 1e-12);
    }

    #[test]
    fn r2_gradient_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let t = random_conf(&mut rng, 8);
        let x = random_conf(&mut rng, 8);
        let (v, g) = r2(&x, &t, 0.25, R2Mode::Exact).unwrap();
        fd_check(|c| r2(c, &t, 0.25, R2Mode::Exact).unwrap().0, &x, &g, 1e-5, 1e-6);
        let moved = apply_pose(&Rotation::from_axis_angle([0.0, 1.0, 1.0], 2.0), &x).translated([9.0, 0.0, -3.0]);
        assert!((r2(&moved, &t, 0.25, R2Mode::Exact).unwrap().0 - v).abs() < 1e-9);
    }

    #[test]
    fn r2_large_omega_keeps_neighbours_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let t = random_conf(&mut rng, 10);
        let x = random_conf(&mut rng, 10);
        let omega = 50.0;
        let full = r2(&x, &t, omega, R2Mode::Exact).unwrap().0;
        let mut nn = 0.0;
        for i in 0..9 {
            let l = (norm(sub(x.coords()[i], x.coords()[i + 1])) / norm(sub(t.coords()[i], t.coords()[i + 1]))).ln();
            nn += (-omega).exp() * l * l;
        }
        assert!((full - nn).abs() < 1e-6);
        let truncated = r2(&x, &t, omega, R2Mode::Truncated).unwrap().0;
        assert!((truncated - full).abs() < 1e-12);
    }

    #[test]
    fn r2_truncation_is_negligible() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let t = random_conf(&mut rng, 120);
        let x = random_conf(&mut rng, 120);
        let a = r2(&x, &t, 0.25, R2Mode::Exact).unwrap().0;
        let b = r2(&x, &t, 0.25, R2Mode::Truncated).unwrap().0;
        assert!((a - b).abs() / a < 1e-6);
    }

    #[test]
    fn r2_singularity_names_pair() {
        let t = Conformation::new(vec![[0.0; 3], [3.8, 0.0, 0.0], [7.6, 0.0, 0.0]]).unwrap();
        let x = Conformation::new(vec![[0.0; 3], [3.8, 0.0, 0.0], [0.0; 3]]).unwrap();
        match r2(&x, &t, 0.25, R2Mode::Exact) {
            Err(Error::Singularity { i, j }) => assert_eq!((i, j), (1, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_lengths() {
        let t = Conformation::new(vec![[0.0; 3], [3.8, 0.0, 0.0]]).unwrap();
        let x = Conformation::new(vec![[0.0; 3], [3.8, 0.0, 0.0], [7.6, 0.0, 0.0]]).unwrap();
        assert!(matches!(r1(&x, &t), Err(Error::Dimension(_))));
        assert!(matches!(r2(&x, &t, 0.25, R2Mode::Exact), Err(Error::Dimension(_))));
    }

    fn small_model(n: usize) -> ForwardModel {
        ForwardModel::with_cutoff(
            ImageGrid::new(16, 1.0).unwrap(),
            ResidueProfile::uniform(n, 1.0, 1.5).unwrap(),
            Some(CtfParams::standard()),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn data_term_perfect_fit_and_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = random_conf(&mut rng, 4);
        let model = small_model(4);
        let phi0 = Rotation::from_axis_angle([0.3, 0.1, 1.0], 0.4);
        let phi1 = Rotation::from_axis_angle([1.0, 0.0, 0.0], 1.2);
        let y = model.forward(&x, &phi0).unwrap();
        let (v, g) = data_term(&y, &x, &PoseMeasure::delta(phi0), &model).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().flatten().all(|v| *v == 0.0));

        let d0 = model.forward(&x, &phi0).unwrap().squared_distance(&y);
        let d1 = model.forward(&x, &phi1).unwrap().squared_distance(&y);
        let mu = PoseMeasure::new(vec![(phi0, 0.5), (phi1, 0.5)]).unwrap();
        let (v, _) = data_term(&y, &x, &mu, &model).unwrap();
        assert!((v - 0.5 * (d0 + d1)).abs() < 1e-12);
    }

    #[test]
    fn data_term_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = small_model(3);
        for _ in 0..5 {
            let x = random_conf(&mut rng, 3);
            let y = Image::new((0..256).map(|_| rng.random_range(-0.05..0.05)).collect(), model.grid()).unwrap();
            let mu = PoseMeasure::new(vec![
                (Rotation::from_axis_angle([0.3, 0.1, 1.0], 0.4), 0.7),
                (Rotation::from_axis_angle([1.0, 0.0, 0.0], 1.2), 0.3),
            ])
            .unwrap();
            let (_, g) = data_term(&y, &x, &mu, &model).unwrap();
            fd_check(|c| data_term(&y, c, &mu, &model).unwrap().0, &x, &g, 1e-4, 1e-5);
        }
    }

    #[test]
    fn default_and_rescaled_weights() {
        let w = RegWeights::standard(true);
        assert_eq!((w.lambda0, w.lambda1, w.lambda2, w.omega), (0.0005, 0.01, 0.01, 0.25));
        assert_eq!(RegWeights::standard(false).lambda2, 0.0);
        let s = w.rescaled_for_grid(128);
        assert!((s.lambda1 - 0.0025).abs() < 1e-15);
        assert_eq!(s.omega, 0.25);
        assert!(RegWeights { lambda0: -1.0, ..w }.validate().is_err());
    }
}
