//! TEM image formation: Gaussian ray-transform projection, CTF convolution
//! and the analytic gradient of a correlated residual with respect to coordinates.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Conformation, Rotation, Vec3};

/// Default truncation radius of each Gaussian, in units of its width.
pub const DEFAULT_CUTOFF_SIGMAS: f64 = 5.0;

/// Square detector grid centred on the optical axis.
///
/// Pixel `(row, col)` sits at `q = ((col - side/2)·p, (row - side/2)·p)`, so the
/// origin is the centre of pixel `(side/2, side/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    side: usize,
    pixel_size: f64,
}

impl ImageGrid {
    pub fn new(side: usize, pixel_size: f64) -> Result<Self> {
        if side < 8 || !side.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("image side must be even and >= 8, got {side}")));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::InvalidInput(format!("pixel size must be positive, got {pixel_size}")));
        }
        Ok(Self { side, pixel_size })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn pixel_count(&self) -> usize {
        self.side * self.side
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_size * self.pixel_size
    }

    /// Physical coordinate (Å) of pixel index `j` along either axis.
    #[inline]
    pub fn coord(&self, j: usize) -> f64 {
        (j as f64 - (self.side / 2) as f64) * self.pixel_size
    }

    /// Angular frequency (rad/Å) of DFT index `k` along either axis.
    #[inline]
    pub fn frequency(&self, k: usize) -> f64 {
        let n = self.side as isize;
        let f = if (k as isize) < n / 2 { k as isize } else { k as isize - n };
        2.0 * PI * f as f64 / (self.side as f64 * self.pixel_size)
    }
}

/// Per-residue Gaussian amplitudes `aᵢ` and widths `σᵢ` (Å).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidueProfile {
    amplitudes: Vec<f64>,
    widths: Vec<f64>,
}

impl ResidueProfile {
    pub fn new(amplitudes: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if amplitudes.len() != widths.len() {
            return Err(Error::Dimension(format!(
                "{} amplitudes but {} widths",
                amplitudes.len(),
                widths.len()
            )));
        }
        let ok = |v: &f64| *v > 0.0 && v.is_finite();
        if !amplitudes.iter().all(ok) || !widths.iter().all(ok) {
            return Err(Error::InvalidInput("residue amplitudes and widths must be positive".into()));
        }
        Ok(Self { amplitudes, widths })
    }

    pub fn uniform(n: usize, amplitude: f64, width: f64) -> Result<Self> {
        Self::new(vec![amplitude; n], vec![width; n])
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// Same widths, amplitudes scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.amplitudes.iter().map(|a| a * factor).collect(), self.widths.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    None,
    /// `A(ξ) = exp(-b|ξ|²/4)` with `b` in Å².
    Gaussian { b_factor: f64 },
}

/// Microscope optics. Lengths are stored in the units practitioners quote
/// and converted to Å before evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    pub cs_mm: f64,
    pub defocus_um: f64,
    pub amplitude_contrast: f64,
    /// Electron wavenumber `k = 2π/λ` in Å⁻¹.
    pub wavenumber: f64,
    pub envelope: Envelope,
}

/// Relativistic electron wavelength (Å) at an acceleration voltage in kV.
pub fn electron_wavelength(voltage_kv: f64) -> f64 {
    let v = voltage_kv * 1e3;
    12.264_259 / (v * (1.0 + 0.978_476e-6 * v)).sqrt()
}

impl CtfParams {
    /// Cs 2.7 mm, defocus -2.0 µm, α 0.06 at 300 keV, no envelope.
    pub fn standard() -> Self {
        Self {
            cs_mm: 2.7,
            defocus_um: -2.0,
            amplitude_contrast: 0.06,
            wavenumber: 2.0 * PI / electron_wavelength(300.0),
            envelope: Envelope::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.amplitude_contrast) {
            return Err(Error::InvalidInput(format!(
                "amplitude contrast must be in [0, 1), got {}",
                self.amplitude_contrast
            )));
        }
        if !(self.wavenumber > 0.0) {
            return Err(Error::InvalidInput("wavenumber must be positive".into()));
        }
        if !(self.cs_mm.is_finite() && self.defocus_um.is_finite()) {
            return Err(Error::InvalidInput("CTF parameters must be finite".into()));
        }
        if let Envelope::Gaussian { b_factor } = self.envelope {
            if !(b_factor >= 0.0 && b_factor.is_finite()) {
                return Err(Error::InvalidInput("envelope B-factor must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Phase shift `γ` at squared angular frequency `s2` (Å⁻²).
    pub fn phase(&self, s2: f64) -> f64 {
        let k = self.wavenumber;
        let dz = self.defocus_um * 1e4;
        let cs = self.cs_mm * 1e7;
        dz / (2.0 * k) * s2 - cs / (4.0 * k * k * k) * s2 * s2
    }
}

/// Contrast transfer at angular frequency `xi` (rad/Å).
pub fn ctf_transfer(xi: [f64; 2], params: &CtfParams) -> f64 {
    let s2 = xi[0] * xi[0] + xi[1] * xi[1];
    let gamma = params.phase(s2);
    let alpha = params.amplitude_contrast;
    let envelope = match params.envelope {
        Envelope::None => 1.0,
        Envelope::Gaussian { b_factor } => (-b_factor * s2 / 4.0).exp(),
    };
    -envelope * ((1.0 - alpha * alpha).sqrt() * gamma.sin() + alpha * gamma.cos())
}

/// Real square image on an [`ImageGrid`], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
    grid: ImageGrid,
}

impl Image {
    pub fn new(pixels: Vec<f64>, grid: ImageGrid) -> Result<Self> {
        if pixels.len() != grid.pixel_count() {
            return Err(Error::Dimension(format!(
                "{} pixels for a {}×{} grid",
                pixels.len(),
                grid.side(),
                grid.side()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self { pixels, grid })
    }

    pub fn zeros(grid: ImageGrid) -> Self {
        Self {
            pixels: vec![0.0; grid.pixel_count()],
            grid,
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.grid.side() + col]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// Squared L2 distance to another image on the same grid.
    pub fn squared_distance(&self, other: &Image) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.pixels.iter().map(|a| a * a).sum()
    }
}

/// Cached forward operator `F(φ.x) = h ∗ v_{φ.x}` for one grid, profile and CTF.
///
/// With `ctf = None` the transfer is the identity. FFT plans are shared and
/// safe to use from several threads.
#[derive(Clone)]
pub struct ForwardModel {
    grid: ImageGrid,
    profile: ResidueProfile,
    ctf: Option<CtfParams>,
    cutoff_sigmas: f64,
    transfer: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ForwardModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardModel")
            .field("grid", &self.grid)
            .field("residues", &self.profile.len())
            .field("ctf", &self.ctf)
            .field("cutoff_sigmas", &self.cutoff_sigmas)
            .finish()
    }
}

impl ForwardModel {
    pub fn new(grid: ImageGrid, profile: ResidueProfile, ctf: Option<CtfParams>) -> Result<Self> {
        Self::with_cutoff(grid, profile, ctf, DEFAULT_CUTOFF_SIGMAS)
    }

    pub fn with_cutoff(
        grid: ImageGrid,
        profile: ResidueProfile,
        ctf: Option<CtfParams>,
        cutoff_sigmas: f64,
    ) -> Result<Self> {
        if let Some(c) = &ctf {
            c.validate()?;
        }
        if !(cutoff_sigmas > 0.0) {
            return Err(Error::InvalidInput("Gaussian cutoff must be positive".into()));
        }
        let n = grid.side();
        let transfer = match &ctf {
            Some(c) => {
                let mut t = vec![0.0; n * n];
                for ky in 0..n {
                    for kx in 0..n {
                        t[ky * n + kx] = ctf_transfer([grid.frequency(kx), grid.frequency(ky)], c);
                    }
                }
                t
            }
            None => vec![1.0; n * n],
        };
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        Ok(Self {
            grid,
            profile,
            ctf,
            cutoff_sigmas,
            transfer,
            fft,
            ifft,
        })
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn profile(&self) -> &ResidueProfile {
        &self.profile
    }

    pub fn ctf(&self) -> Option<&CtfParams> {
        self.ctf.as_ref()
    }

    pub fn cutoff_sigmas(&self) -> f64 {
        self.cutoff_sigmas
    }

    /// Sampled transfer function `ĥ` on the DFT grid (row = y frequency).
    pub fn transfer(&self) -> &[f64] {
        &self.transfer
    }

    fn check_residues(&self, x: &Conformation) -> Result<()> {
        if x.residue_count() != self.profile.len() {
            return Err(Error::Dimension(format!(
                "conformation has {} residues but the profile has {}",
                x.residue_count(),
                self.profile.len()
            )));
        }
        Ok(())
    }

    /// Pixel box `[lo, hi]` within `radius` of `centre` along one axis.
    #[inline]
    fn span(&self, centre: f64, radius: f64) -> Option<(usize, usize)> {
        let p = self.grid.pixel_size;
        let half = (self.grid.side / 2) as f64;
        let lo = ((centre - radius) / p + half).ceil().max(0.0);
        let hi = ((centre + radius) / p + half).floor().min((self.grid.side - 1) as f64);
        (lo <= hi).then_some((lo as usize, hi as usize))
    }

    /// Visits every pixel within the cutoff of each residue, passing the
    /// residue index, pixel index, Gaussian value and in-plane offset `q - Px`.
    #[inline]
    fn for_each_footprint(&self, posed: &[Vec3], mut visit: impl FnMut(usize, usize, f64, f64, f64)) {
        let n = self.grid.side;
        let mut ex = Vec::new();
        let mut ey = Vec::new();
        for (i, p) in posed.iter().enumerate() {
            let sigma = self.profile.widths[i];
            let amp = self.profile.amplitudes[i] / (2.0 * PI * sigma * sigma);
            let radius = self.cutoff_sigmas * sigma;
            let r2 = radius * radius;
            let inv = 1.0 / (2.0 * sigma * sigma);
            let (Some((c0, c1)), Some((r0, r1))) = (self.span(p[0], radius), self.span(p[1], radius)) else {
                continue;
            };
            ex.clear();
            ex.extend((c0..=c1).map(|c| {
                let dx = self.grid.coord(c) - p[0];
                (dx, (-dx * dx * inv).exp())
            }));
            ey.clear();
            ey.extend((r0..=r1).map(|r| {
                let dy = self.grid.coord(r) - p[1];
                (dy, (-dy * dy * inv).exp())
            }));
            for (ri, &(dy, gy)) in ey.iter().enumerate() {
                let row = (r0 + ri) * n;
                for (ci, &(dx, gx)) in ex.iter().enumerate() {
                    if dx * dx + dy * dy <= r2 {
                        visit(i, row + c0 + ci, amp * gy * gx, dx, dy);
                    }
                }
            }
        }
    }

    /// Projection image `v_x` of an already posed conformation (no CTF).
    pub fn render(&self, x: &Conformation) -> Result<Image> {
        self.check_residues(x)?;
        let mut pixels = vec![0.0; self.grid.pixel_count()];
        self.for_each_footprint(x.coords(), |_, idx, g, _, _| pixels[idx] += g);
        Ok(Image {
            pixels,
            grid: self.grid,
        })
    }

    /// Convolves with the point-spread function by multiplying with `ĥ` in Fourier space.
    pub fn apply_ctf(&self, img: &Image) -> Result<Image> {
        if img.grid.side() != self.grid.side() {
            return Err(Error::Dimension("image and model grids differ".into()));
        }
        let mut buf: Vec<Complex<f64>> = img.pixels.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.filter_in_place(&mut buf);
        Ok(Image {
            pixels: buf.iter().map(|c| c.re).collect(),
            grid: img.grid,
        })
    }

    /// Filters two real images at once, packed as real and imaginary parts.
    /// `ĥ` is real and even, so the outputs do not mix.
    pub(crate) fn apply_ctf_pair(&self, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex<f64>> = a.iter().zip(b).map(|(&u, &v)| Complex::new(u, v)).collect();
        self.filter_in_place(&mut buf);
        (buf.iter().map(|c| c.re).collect(), buf.iter().map(|c| c.im).collect())
    }

    fn filter_in_place(&self, buf: &mut [Complex<f64>]) {
        if self.ctf.is_none() {
            return;
        }
        let n = self.grid.side;
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len().max(self.ifft.get_inplace_scratch_len())];
        let mut tmp = vec![Complex::new(0.0, 0.0); n * n];
        self.fft.process_with_scratch(buf, &mut scratch);
        transpose(buf, &mut tmp, n);
        self.fft.process_with_scratch(&mut tmp, &mut scratch);
        // tmp is indexed [kx][ky]; the sampled ĥ is symmetric under kx <-> ky
        let scale = 1.0 / (n * n) as f64;
        for (v, h) in tmp.iter_mut().zip(&self.transfer) {
            *v *= h * scale;
        }
        self.ifft.process_with_scratch(&mut tmp, &mut scratch);
        transpose(&tmp, buf, n);
        self.ifft.process_with_scratch(buf, &mut scratch);
    }

    /// `F(φ.x)`.
    pub fn forward(&self, x: &Conformation, phi: &Rotation) -> Result<Image> {
        let img = self.render(&crate::geom::apply_pose(phi, x))?;
        self.apply_ctf(&img)
    }

    /// Gradient of `⟨residual, F(φ.x)⟩` with respect to the coordinates of `x`.
    pub fn forward_grad(&self, x: &Conformation, phi: &Rotation, residual: &Image) -> Result<Vec<Vec3>> {
        self.check_residues(x)?;
        if residual.grid.side() != self.grid.side() {
            return Err(Error::Dimension("residual and model grids differ".into()));
        }
        // the CTF operator is self-adjoint, so correlate once in image space
        let correlated = self.apply_ctf(residual)?;
        Ok(self.projection_grad(x, phi, correlated.pixels()))
    }

    /// Gradient of `⟨weights, v_{φ.x}⟩` with respect to `x` (no CTF).
    pub(crate) fn projection_grad(&self, x: &Conformation, phi: &Rotation, weights: &[f64]) -> Vec<Vec3> {
        let posed: Vec<Vec3> = x.coords().iter().map(|&p| phi.apply(p)).collect();
        let mut grad_posed = vec![[0.0; 3]; posed.len()];
        let widths = &self.profile.widths;
        self.for_each_footprint(&posed, |i, idx, g, dx, dy| {
            let w = weights[idx] * g;
            grad_posed[i][0] += w * dx;
            grad_posed[i][1] += w * dy;
        });
        grad_posed
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let inv = 1.0 / (widths[i] * widths[i]);
                phi.apply_inverse([g[0] * inv, g[1] * inv, 0.0])
            })
            .collect()
    }

    /// Point-spread function (inverse DFT of `ĥ`) with its origin at pixel `(0, 0)`.
    pub fn psf(&self) -> Image {
        let mut delta = Image::zeros(self.grid);
        delta.pixels[0] = 1.0;
        self.apply_ctf(&delta).expect("grids match")
    }
}

fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], n: usize) {
    for r in 0..n {
        for c in 0..n {
            dst[c * n + r] = src[r * n + c];
        }
    }
}

/// Projection image `v_x` (no pose, no CTF).
pub fn render_projection(x: &Conformation, profile: &ResidueProfile, grid: ImageGrid) -> Result<Image> {
    ForwardModel::new(grid, profile.clone(), None)?.render(x)
}

/// CTF-filtered copy of `img`.
pub fn apply_ctf(img: &Image, params: &CtfParams) -> Result<Image> {
    let unit = ResidueProfile::uniform(1, 1.0, 1.0)?;
    ForwardModel::new(img.grid(), unit, Some(*params))?.apply_ctf(img)
}

pub fn forward(
    x: &Conformation,
    phi: &Rotation,
    profile: &ResidueProfile,
    grid: ImageGrid,
    ctf: &CtfParams,
) -> Result<Image> {
    ForwardModel::new(grid, profile.clone(), Some(*ctf))?.forward(x, phi)
}

pub fn forward_grad(
    x: &Conformation,
    phi: &Rotation,
    profile: &ResidueProfile,
    grid: ImageGrid,
    ctf: &CtfParams,
    residual: &Image,
) -> Result<Vec<Vec3>> {
    ForwardModel::new(grid, profile.clone(), Some(*ctf))?.forward_grad(x, phi, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_atom() -> Conformation {
        Conformation::new(vec![[0.0; 3], [1000.0, 1000.0, 0.0]]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(ImageGrid::new(6, 1.0).is_err());
        assert!(ImageGrid::new(9, 1.0).is_err());
        assert!(ImageGrid::new(8, 0.0).is_err());
        let g = ImageGrid::new(8, 2.0).unwrap();
        assert_eq!(g.coord(4), 0.0);
        assert_eq!(g.coord(0), -8.0);
        assert!((g.frequency(1) - 2.0 * PI / 16.0).abs() < 1e-15);
        assert!((g.frequency(7) + 2.0 * PI / 16.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_peak_and_shape() {
        let grid = ImageGrid::new(16, 1.0).unwrap();
        let profile = ResidueProfile::uniform(2, 1.0, 1.0).unwrap();
        let img = render_projection(&single_atom(), &profile, grid).unwrap();
        let peak = 1.0 / (2.0 * PI);
        assert!((img.at(8, 8) - peak).abs() < 1e-12);
        assert!((img.at(8, 9) - peak * (-0.5f64).exp()).abs() < 1e-12);
        assert!((img.at(7, 8) - peak * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn truncation_and_positivity() {
        let grid = ImageGrid::new(32, 0.5).unwrap();
        let profile = ResidueProfile::uniform(2, 1.0, 1.0).unwrap();
        let img = render_projection(&single_atom(), &profile, grid).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let d = (grid.coord(r).powi(2) + grid.coord(c).powi(2)).sqrt();
                if d <= 5.0 {
                    assert!(img.at(r, c) > 0.0);
                } else {
                    assert_eq!(img.at(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn mass_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = ImageGrid::new(64, 1.0).unwrap();
        let n = 6;
        let x = Conformation::new(
            (0..n)
                .map(|_| [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-20.0..20.0)])
                .collect(),
        )
        .unwrap();
        let amps: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let widths: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..2.0)).collect();
        let total: f64 = amps.iter().sum();
        let profile = ResidueProfile::new(amps, widths).unwrap();
        let img = render_projection(&x, &profile, grid).unwrap();
        let mass: f64 = img.pixels().iter().sum::<f64>() * grid.pixel_area();
        assert!((mass - total).abs() / total < 5e-3, "mass {mass} vs {total}");
    }

    #[test]
    fn profile_mismatch_is_rejected() {
        let grid = ImageGrid::new(16, 1.0).unwrap();
        let profile = ResidueProfile::uniform(3, 1.0, 1.0).unwrap();
        assert!(matches!(render_projection(&single_atom(), &profile, grid), Err(Error::Dimension(_))));
        assert!(ResidueProfile::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn ctf_at_origin_and_quarter_phase() {
        let p = CtfParams::standard();
        assert!((ctf_transfer([0.0, 0.0], &p) + 0.06).abs() < 1e-12);
        // defocus-only optics: γ = dz/(2k)|ξ|² hits π/2 at a known radius
        let q = CtfParams { cs_mm: 0.0, defocus_um: 1.0, ..p };
        let s2 = PI / 2.0 * 2.0 * q.wavenumber / 1e4;
        let v = ctf_transfer([s2.sqrt(), 0.0], &q);
        assert!((v + (1.0 - 0.06f64 * 0.06).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ctf_radial_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = CtfParams {
            envelope: Envelope::Gaussian { b_factor: 40.0 },
            ..CtfParams::standard()
        };
        for _ in 0..200 {
            let r: f64 = rng.random_range(0.0..3.0);
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            let b: f64 = rng.random_range(0.0..2.0 * PI);
            let u = ctf_transfer([r * a.cos(), r * a.sin()], &p);
            let v = ctf_transfer([r * b.cos(), r * b.sin()], &p);
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn wavelength_at_300_kev() {
        assert!((electron_wavelength(300.0) - 0.019687).abs() < 1e-6);
    }

    /// Standard textbook form in cycles/Å: γ = πλΔz s² − (π/2) Cs λ³ s⁴.
    fn reference_ctf(s: f64, cs_mm: f64, dz_um: f64, alpha: f64, lambda: f64) -> f64 {
        let dz = dz_um * 1e4;
        let cs = cs_mm * 1e7;
        let g = PI * lambda * dz * s * s - 0.5 * PI * cs * lambda.powi(3) * s.powi(4);
        -((1.0 - alpha * alpha).sqrt() * g.sin() + alpha * g.cos())
    }

    fn first_zero(f: impl Fn(f64) -> f64, step: f64) -> f64 {
        let mut lo = 0.0;
        let f0 = f(0.0);
        loop {
            let hi = lo + step;
            if f(hi).signum() != f0.signum() {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if f(m).signum() == f0.signum() {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                return 0.5 * (a + b);
            }
            lo = hi;
        }
    }

    #[test]
    fn first_zero_matches_reference_form() {
        let p = CtfParams::standard();
        let lambda = electron_wavelength(300.0);
        let ours = first_zero(|s| ctf_transfer([2.0 * PI * s, 0.0], &p), 1e-4);
        let reference = first_zero(|s| reference_ctf(s, 2.7, -2.0, 0.06, lambda), 1e-4);
        assert!((ours - reference).abs() < 1e-9, "{ours} vs {reference}");
        // with Δz < 0 the phase is negative, so the first zero sits where γ = -atan(α/√(1-α²))
        let k = 2.0 * PI / lambda;
        let (a, b) = (2.7e7 / (4.0 * k.powi(3)), -2.0e4 / (2.0 * k));
        let c = -(0.06f64 / (1.0 - 0.06f64 * 0.06).sqrt()).atan();
        let s2 = 2.0 * c / (b - (b * b - 4.0 * a * c).sqrt());
        let closed = s2.sqrt() / (2.0 * PI);
        assert!((ours - closed).abs() < 1e-9, "{ours} vs {closed}");
    }

    #[test]
    fn identity_transfer_is_noop() {
        let grid = ImageGrid::new(16, 1.0).unwrap();
        let model = ForwardModel::new(grid, ResidueProfile::uniform(2, 1.0, 1.0).unwrap(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = Image::new((0..256).map(|_| rng.random_range(-1.0..1.0)).collect(), grid).unwrap();
        let out = model.apply_ctf(&img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn ctf_filtering_is_real_and_linear() {
        let grid = ImageGrid::new(32, 1.0).unwrap();
        let model =
            ForwardModel::new(grid, ResidueProfile::uniform(2, 1.0, 1.0).unwrap(), Some(CtfParams::standard())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let u: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);

        let mut buf: Vec<Complex<f64>> = u.iter().map(|&x| Complex::new(x, 0.0)).collect();
        model.filter_in_place(&mut buf);
        assert!(buf.iter().all(|c| c.im.abs() < 1e-9));

        let cu = model.apply_ctf(&Image::new(u.clone(), grid).unwrap()).unwrap();
        let cv = model.apply_ctf(&Image::new(v.clone(), grid).unwrap()).unwrap();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let cm = model.apply_ctf(&Image::new(mix, grid).unwrap()).unwrap();
        for i in 0..1024 {
            assert!((cm.pixels()[i] - a * cu.pixels()[i] - b * cv.pixels()[i]).abs() < 1e-9);
        }
        let (pu, pv) = model.apply_ctf_pair(&u, &v);
        for i in 0..1024 {
            assert!((pu[i] - cu.pixels()[i]).abs() < 1e-12);
            assert!((pv[i] - cv.pixels()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_image_gives_shifted_psf() {
        let grid = ImageGrid::new(16, 1.5).unwrap();
        let model =
            ForwardModel::new(grid, ResidueProfile::uniform(2, 1.0, 1.0).unwrap(), Some(CtfParams::standard())).unwrap();
        let psf = model.psf();
        let (r0, c0) = (5, 11);
        let mut delta = Image::zeros(grid);
        delta.pixels_mut()[r0 * 16 + c0] = 1.0;
        let out = model.apply_ctf(&delta).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let expect = psf.at((r + 16 - r0) % 16, (c + 16 - c0) % 16);
                assert!((out.at(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    /// Trigonometric interpolation of a periodic band-limited image at `(x, y)` Å.
    fn fourier_sample(spectrum: &[Complex<f64>], grid: ImageGrid, x: f64, y: f64) -> f64 {
        let n = grid.side();
        let fx = x / grid.pixel_size() + (n / 2) as f64;
        let fy = y / grid.pixel_size() + (n / 2) as f64;
        let phase = |k: usize, t: f64| {
            let signed = if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
            Complex::from_polar(1.0, 2.0 * PI * signed * t / n as f64)
        };
        let ex: Vec<Complex<f64>> = (0..n).map(|k| phase(k, fx)).collect();
        let mut total = Complex::new(0.0, 0.0);
        for ky in 0..n {
            let row: Complex<f64> = (0..n).map(|kx| spectrum[ky * n + kx] * ex[kx]).sum();
            total += row * phase(ky, fy);
        }
        total.re / (n * n) as f64
    }

    fn spectrum(img: &Image) -> Vec<Complex<f64>> {
        let n = img.grid().side();
        let fft = FftPlanner::new().plan_fft_forward(n);
        let mut data: Vec<Complex<f64>> = img.pixels().iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in data.chunks_mut(n) {
            fft.process(row);
        }
        let mut t = vec![Complex::new(0.0, 0.0); n * n];
        for r in 0..n {
            for c in 0..n {
                t[c * n + r] = data[r * n + c];
            }
        }
        for row in t.chunks_mut(n) {
            fft.process(row);
        }
        for r in 0..n {
            for c in 0..n {
                data[c * n + r] = t[r * n + c];
            }
        }
        data
    }

    #[test]
    fn in_plane_rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        // box large enough that the defocus delocalization does not wrap around
        let grid = ImageGrid::new(128, 0.5).unwrap();
        let n = 8;
        let x = Conformation::new(
            (0..n)
                .map(|_| [rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-5.0..5.0)])
                .collect(),
        )
        .unwrap();
        let profile = ResidueProfile::uniform(n, 1.0, 1.5).unwrap();
        let ctf = CtfParams {
            defocus_um: -0.3,
            envelope: Envelope::Gaussian { b_factor: 10.0 },
            ..CtfParams::standard()
        };
        let model = ForwardModel::new(grid, profile, Some(ctf)).unwrap();
        let base = spectrum(&model.forward(&x, &Rotation::identity()).unwrap());
        for theta in [0.3, 1.1, 2.5] {
            let rotated = model.forward(&x, &Rotation::from_axis_angle([0.0, 0.0, 1.0], theta)).unwrap();
            let (s, c) = (theta.sin(), theta.cos());
            let mut num = 0.0;
            let mut den = 0.0;
            for r in (0..128).step_by(2) {
                for col in (0..128).step_by(2) {
                    let (qx, qy) = (grid.coord(col), grid.coord(r));
                    if qx * qx + qy * qy > 20.0 * 20.0 {
                        continue;
                    }
                    let expect = fourier_sample(&base, grid, c * qx + s * qy, -s * qx + c * qy);
                    num += (rotated.at(r, col) - expect).powi(2);
                    den += rotated.at(r, col).powi(2);
                }
            }
            let rel = (num / den).sqrt();
            assert!(rel <= 0.02, "theta {theta}: relative L2 {rel}");
        }
    }

    #[test]
    fn optical_axis_shift_is_invisible() {
        let grid = ImageGrid::new(32, 1.0).unwrap();
        let x = Conformation::new(vec![[1.0, 2.0, 3.0], [-4.0, 1.0, 0.0], [2.0, -3.0, -1.0]]).unwrap();
        let profile = ResidueProfile::uniform(3, 1.0, 1.5).unwrap();
        let model = ForwardModel::new(grid, profile, Some(CtfParams::standard())).unwrap();
        let a = model.forward(&x, &Rotation::identity()).unwrap();
        let b = model.forward(&x.translated([0.0, 0.0, 17.0]), &Rotation::identity()).unwrap();
        for (p, q) in a.pixels().iter().zip(b.pixels()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_linear_in_amplitudes() {
        let grid = ImageGrid::new(32, 1.0).unwrap();
        let x = Conformation::new(vec![[1.0, 2.0, 3.0], [-4.0, 1.0, 0.0]]).unwrap();
        let phi = Rotation::from_axis_angle([1.0, 1.0, 0.0], 0.7);
        let ctf = CtfParams::standard();
        let p1 = ResidueProfile::new(vec![1.0, 0.5], vec![1.5, 2.0]).unwrap();
        let p2 = ResidueProfile::new(vec![0.25, 2.0], vec![1.5, 2.0]).unwrap();
        let p3 = ResidueProfile::new(vec![1.25, 2.5], vec![1.5, 2.0]).unwrap();
        let a = forward(&x, &phi, &p1, grid, &ctf).unwrap();
        let b = forward(&x, &phi, &p2, grid, &ctf).unwrap();
        let c = forward(&x, &phi, &p3, grid, &ctf).unwrap();
        for i in 0..grid.pixel_count() {
            assert!((c.pixels()[i] - a.pixels()[i] - b.pixels()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adk_scale_render_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let grid = ImageGrid::new(256, 1.0).unwrap();
        let x = Conformation::new(
            (0..214).map(|_| std::array::from_fn(|_| rng.random_range(-25.0..25.0))).collect(),
        )
        .unwrap();
        let model =
            ForwardModel::new(grid, ResidueProfile::uniform(214, 1.0, 1.5).unwrap(), Some(CtfParams::standard())).unwrap();
        let img = model.forward(&x, &Rotation::from_axis_angle([0.2, 0.5, 1.0], 1.0)).unwrap();
        assert!(img.pixels().iter().all(|v| v.is_finite()));
        assert!(img.squared_norm() > 0.0);
    }

    #[test]
    fn zero_residual_and_symmetric_single_atom() {
        let grid = ImageGrid::new(16, 1.0).unwrap();
        let profile = ResidueProfile::uniform(2, 1.0, 1.0).unwrap();
        let model = ForwardModel::new(grid, profile, Some(CtfParams::standard())).unwrap();
        let x = single_atom();
        let g = model.forward_grad(&x, &Rotation::identity(), &Image::zeros(grid)).unwrap();
        assert!(g.iter().flatten().all(|v| *v == 0.0));

        let plain = ForwardModel::new(grid, ResidueProfile::uniform(2, 1.0, 1.0).unwrap(), None).unwrap();
        let own = plain.forward(&x, &Rotation::identity()).unwrap();
        let g = plain.forward_grad(&x, &Rotation::identity(), &own).unwrap();
        assert!(g[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn residual_grid_mismatch() {
        let grid = ImageGrid::new(16, 1.0).unwrap();
        let model = ForwardModel::new(grid, ResidueProfile::uniform(2, 1.0, 1.0).unwrap(), None).unwrap();
        let other = Image::zeros(ImageGrid::new(8, 1.0).unwrap());
        assert!(model.forward_grad(&single_atom(), &Rotation::identity(), &other).is_err());
    }
}
