//! Synthetic speckle phantoms with exact ground truth.
//!
//! Scenes are clouds of random-phase point scatterers under a coherent
//! anisotropic Gaussian PSF, so speckle deforms physically under motion.
//! Defocus is modeled as a depth-proportional chirped Gaussian: the lateral
//! envelope widens away from the focus row and carries the matching
//! quadratic phase, which is exactly the structure the ISAM resampling in
//! [`crate::recon`] inverts.
//!
//! Motion is a per-step displacement field in closed form. Scatterer
//! trajectories iterate that closed form at their exact sub-pixel positions,
//! so ground-truth fields carry no interpolation bias.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fft;
use crate::raster::{ComplexImage, DisplacementField, SpectralFrame};

/// Scene and point-spread parameters for one phantom.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_scatterers: usize,
    /// Min/max scatterer reflectivity, both positive.
    pub reflectivity_range: (f64, f64),
    /// In-focus PSF widths in pixels.
    pub psf_sigma_axial: f64,
    pub psf_sigma_lateral: f64,
    /// Row index of the beam focus.
    pub focus_row: usize,
    /// Small-defocus lateral chirp growth, rad/px² per row offset from focus.
    pub defocus_rate: f64,
    /// Axial pixel pitch in µm/px (metadata for rendered images).
    pub pitch_axial: f64,
    /// Lateral pixel pitch in µm/px.
    pub pitch_lateral: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("empty phantom raster".into()));
        }
        if self.focus_row >= self.rows {
            return Err(Error::InvalidArgument(format!(
                "focus_row {} out of range for {} rows",
                self.focus_row, self.rows
            )));
        }
        if self.psf_sigma_axial <= 0.0 || self.psf_sigma_lateral <= 0.0 {
            return Err(Error::InvalidArgument("PSF sigmas must be positive".into()));
        }
        let (lo, hi) = self.reflectivity_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(
                "reflectivity_range must be positive and ordered".into(),
            ));
        }
        Ok(())
    }
}

/// Defocus rate that makes the phantom's chirp exactly invertible by the
/// ISAM resampling for the given optical geometry.
///
/// `pitch_axial`/`pitch_lateral` in µm/px, `k_center` in rad/µm, PSF sigma
/// in pixels. Derived from the paraxial defocus kernel exp(i q² Δz / 4k).
pub fn matched_defocus_rate(
    pitch_axial: f64,
    pitch_lateral: f64,
    k_center: f64,
    psf_sigma_lateral: f64,
) -> f64 {
    pitch_axial / (4.0 * k_center * pitch_lateral.powi(2) * psf_sigma_lateral.powi(4))
}

/// One point scatterer at an exact sub-pixel position.
#[derive(Debug, Clone, Copy)]
pub struct Scatterer {
    pub row: f64,
    pub col: f64,
    pub reflectivity: f64,
    /// Fixed speckle phase in radians, carried through all frames.
    pub phase: f64,
}

/// Draw a deterministic scatterer cloud, uniform over the raster.
pub fn make_scene(spec: &PhantomSpec) -> Result<Vec<Scatterer>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.reflectivity_range;
    let mut scene = Vec::with_capacity(spec.n_scatterers);
    for _ in 0..spec.n_scatterers {
        let row = rng.gen::<f64>() * spec.rows as f64;
        let col = rng.gen::<f64>() * spec.cols as f64;
        let reflectivity = lo + rng.gen::<f64>() * (hi - lo);
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        scene.push(Scatterer {
            row,
            col,
            reflectivity,
            phase,
        });
    }
    Ok(scene)
}

/// Lateral envelope/chirp parameters for a scatterer at `row`.
struct DefocusParams {
    sigma_lat: f64,
    /// Image-domain quadratic phase coefficient, rad/px².
    chirp: f64,
    /// Amplitude factor keeping lateral-integrated energy depth-invariant.
    amp: f64,
}

fn defocus_params(spec: &PhantomSpec, row: f64) -> DefocusParams {
    let s0 = spec.psf_sigma_lateral;
    let d = row - spec.focus_row as f64;
    // Chirp parameter in px²; rate is calibrated so the small-defocus image
    // chirp equals defocus_rate · d.
    let a = spec.defocus_rate * d * s0.powi(4);
    let sig2 = s0 * s0 + (2.0 * a / s0).powi(2);
    DefocusParams {
        sigma_lat: sig2.sqrt(),
        chirp: a / (s0 * s0 * sig2),
        amp: (s0 / sig2.sqrt()).sqrt(),
    }
}

/// Render scatterers into a complex image: coherent sum of anisotropic
/// Gaussians with per-scatterer phase and depth-dependent defocus.
pub fn render_complex(scene: &[Scatterer], spec: &PhantomSpec) -> Result<ComplexImage> {
    spec.validate()?;
    let mut data = Array2::from_elem((spec.rows, spec.cols), Complex64::default());
    render_into(&mut data, scene, spec);
    ComplexImage::new(data, spec.pitch_axial, spec.pitch_lateral)
}

fn render_into(data: &mut Array2<Complex64>, scene: &[Scatterer], spec: &PhantomSpec) {
    let sig_ax = spec.psf_sigma_axial;
    let params: Vec<DefocusParams> = scene.iter().map(|s| defocus_params(spec, s.row)).collect();
    let cols = spec.cols as isize;
    // Row-parallel would also be deterministic (fixed scatterer order per
    // pixel); scene sizes stay small enough that serial wins on overhead.
    for (s, dp) in scene.iter().zip(params.iter()) {
        let r_lo = ((s.row - 4.0 * sig_ax).floor().max(0.0)) as usize;
        let r_hi = ((s.row + 4.0 * sig_ax).ceil() as isize).min(spec.rows as isize - 1);
        if r_hi < 0 {
            continue;
        }
        let c_lo = ((s.col - 4.0 * dp.sigma_lat).floor().max(0.0)) as usize;
        let c_hi = ((s.col + 4.0 * dp.sigma_lat).ceil() as isize).min(cols - 1);
        if c_hi < 0 {
            continue;
        }
        let base = Complex64::from_polar(s.reflectivity * dp.amp, s.phase);
        for r in r_lo..=(r_hi as usize) {
            let dz = r as f64 - s.row;
            let ax = (-dz * dz / (2.0 * sig_ax * sig_ax)).exp();
            if ax < 1e-12 {
                continue;
            }
            // Axial carrier at the mid-window wavenumber (π rad/px for a
            // critically sampled depth axis) so synthesized spectra have a
            // centered envelope.
            let ax_phase = -std::f64::consts::PI * dz;
            for c in c_lo..=(c_hi as usize) {
                let u = c as f64 - s.col;
                let env = (-u * u / (2.0 * dp.sigma_lat * dp.sigma_lat)).exp();
                let ph = ax_phase - dp.chirp * u * u;
                data[[r, c]] += base * ax * env * Complex64::from_polar(1.0, ph);
            }
        }
    }
}

/// Forward model for [`crate::recon::reconstruct_ifft`]: per lateral column,
/// the spectrum is the forward DFT of the depth profile zero-padded to `n_k`.
pub fn synthesize_spectrum(
    img: &ComplexImage,
    n_k: usize,
    k_min: f64,
    k_max: f64,
) -> Result<SpectralFrame> {
    if n_k < img.rows() {
        return Err(Error::InvalidArgument(format!(
            "n_k = {} smaller than image rows {}",
            n_k,
            img.rows()
        )));
    }
    let (rows, cols) = img.data.dim();
    let mut out = Array2::from_elem((n_k, cols), Complex64::default());
    let mut buf = vec![Complex64::default(); n_k];
    for c in 0..cols {
        for v in buf.iter_mut() {
            *v = Complex64::default();
        }
        for (r, v) in buf.iter_mut().take(rows).enumerate() {
            *v = img.data[[r, c]];
        }
        fft::fft_slice(&mut buf, false);
        for (j, &v) in buf.iter().enumerate() {
            out[[j, c]] = v;
        }
    }
    SpectralFrame::new(out, k_min, k_max, img.pitch_lateral)
}

/// Kind of programmed motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    /// Constant lateral step per frame (translation stage).
    UniformLateral,
    /// Smooth non-linear deformation: axial compression ramp with a
    /// divergence-balancing lateral term (elastic loading).
    SmoothCompression,
}

/// Programmed motion over a frame sequence.
#[derive(Debug, Clone)]
pub struct MotionSpec {
    pub kind: MotionKind,
    pub n_frames: usize,
    /// Lateral pixels per frame (uniform case).
    pub step_px: f64,
    /// Peak per-step axial displacement in pixels (compression case).
    pub compression_peak: f64,
    /// Lateral center and width of the loading profile, in pixels.
    pub load_center: f64,
    pub load_width: f64,
    pub seed: u64,
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::InvalidArgument("need n_frames ≥ 2".into()));
        }
        if self.kind == MotionKind::SmoothCompression && self.load_width <= 0.0 {
            return Err(Error::InvalidArgument("load_width must be positive".into()));
        }
        Ok(())
    }
}

/// Closed-form per-step displacement. A material point at position p in
/// frame t sits at p + step(p) in frame t+1, for every t.
#[derive(Debug, Clone)]
pub struct MotionModel {
    kind: MotionKind,
    step_px: f64,
    peak: f64,
    center: f64,
    width: f64,
    rows: usize,
}

impl MotionModel {
    pub fn new(motion: &MotionSpec, rows: usize) -> Result<Self> {
        motion.validate()?;
        Ok(Self {
            kind: motion.kind,
            step_px: motion.step_px,
            peak: motion.compression_peak,
            center: motion.load_center,
            width: motion.load_width,
            rows,
        })
    }

    /// Per-step displacement (axial, lateral) at a continuous position.
    pub fn step_at(&self, z: f64, x: f64) -> (f64, f64) {
        match self.kind {
            MotionKind::UniformLateral => (0.0, self.step_px),
            MotionKind::SmoothCompression => {
                let denom = (self.rows - 1).max(1) as f64;
                let t = (z / denom).clamp(0.0, 1.0);
                // C¹ ramp: s(0)=0, s(1)=1, s'(0)=s'(1)=0.
                let s = t * t * (3.0 - 2.0 * t);
                let ds_dz = 6.0 * t * (1.0 - t) / denom;
                let y = (x - self.center) / self.width;
                let sech = 1.0 / y.cosh();
                let g = sech * sech;
                let uz = self.peak * s * g;
                // Divergence balance: ∂ux/∂x = −∂uz/∂z.
                let ux = -self.peak * ds_dz * self.width * y.tanh();
                (uz, ux)
            }
        }
    }

    /// One frame forward along the trajectory.
    pub fn forward(&self, z: f64, x: f64) -> (f64, f64) {
        let (dz, dx) = self.step_at(z, x);
        (z + dz, x + dx)
    }

    /// One frame backward: solves y + step(y) = q by fixed-point iteration.
    pub fn backward(&self, qz: f64, qx: f64) -> (f64, f64) {
        let (mut z, mut x) = (qz, qx);
        for _ in 0..200 {
            let (dz, dx) = self.step_at(z, x);
            let (nz, nx) = (qz - dz, qx - dx);
            let delta = (nz - z).abs().max((nx - x).abs());
            z = nz;
            x = nx;
            if delta < 1e-14 {
                break;
            }
        }
        (z, x)
    }

    /// Exact displacement of content from frame `from` to frame `to`,
    /// anchored at frame-`from` coordinates.
    pub fn displacement_between(&self, from: usize, to: usize, z: f64, x: f64) -> (f64, f64) {
        let (mut pz, mut px) = (z, x);
        if to >= from {
            for _ in from..to {
                let (nz, nx) = self.forward(pz, px);
                pz = nz;
                px = nx;
            }
        } else {
            for _ in to..from {
                let (nz, nx) = self.backward(pz, px);
                pz = nz;
                px = nx;
            }
        }
        (pz - z, px - x)
    }

    fn sample_grid(&self, rows: usize, cols: usize, from: usize, to: usize) -> DisplacementField {
        let mut u_axial = Array2::zeros((rows, cols));
        let mut u_lateral = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let (dz, dx) = self.displacement_between(from, to, r as f64, c as f64);
                u_axial[[r, c]] = dz;
                u_lateral[[r, c]] = dx;
            }
        }
        DisplacementField {
            u_axial,
            u_lateral,
            valid: Array2::from_elem((rows, cols), true),
        }
    }
}

/// Ground-truth pairwise fields (frame i → frame i+1, anchored at frame i).
pub fn make_motion(
    motion: &MotionSpec,
    rows: usize,
    cols: usize,
) -> Result<Vec<DisplacementField>> {
    let model = MotionModel::new(motion, rows)?;
    Ok((0..motion.n_frames - 1)
        .map(|t| model.sample_grid(rows, cols, t, t + 1))
        .collect())
}

/// Exact frame-to-reference fields: entry t maps reference-frame coordinates
/// into frame t, matching what composing the pairwise fields should produce.
pub fn make_motion_to_reference(
    motion: &MotionSpec,
    rows: usize,
    cols: usize,
    reference_index: usize,
) -> Result<Vec<DisplacementField>> {
    if reference_index >= motion.n_frames {
        return Err(Error::InvalidArgument(format!(
            "reference index {} out of range for {} frames",
            reference_index, motion.n_frames
        )));
    }
    let model = MotionModel::new(motion, rows)?;
    Ok((0..motion.n_frames)
        .map(|t| model.sample_grid(rows, cols, reference_index, t))
        .collect())
}

/// Additive complex Gaussian noise on unit-normalized frames.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    /// Noise std relative to the unit-normalized signal; `E|n|² = sigma²`.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(Error::InvalidArgument("sigma must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Render a motion sequence: each frame is drawn from analytically displaced
/// scatterer positions (sub-pixel exact), frames are jointly normalized so
/// the clean first frame peaks at magnitude 1, then independent complex
/// Gaussian noise is added. Returns the frames and the ground-truth pairwise
/// fields.
pub fn warp_scene_sequence(
    scene: &[Scatterer],
    spec: &PhantomSpec,
    motion: &MotionSpec,
    noise: &NoiseSpec,
) -> Result<(Vec<ComplexImage>, Vec<DisplacementField>)> {
    spec.validate()?;
    noise.validate()?;
    let model = MotionModel::new(motion, spec.rows)?;

    let mut frames = Vec::with_capacity(motion.n_frames);
    let mut positions: Vec<(f64, f64)> = scene.iter().map(|s| (s.row, s.col)).collect();
    for t in 0..motion.n_frames {
        if t > 0 {
            for p in positions.iter_mut() {
                *p = model.forward(p.0, p.1);
            }
        }
        let moved: Vec<Scatterer> = scene
            .iter()
            .zip(positions.iter())
            .map(|(s, &(row, col))| Scatterer { row, col, ..*s })
            .collect();
        let mut data = Array2::from_elem((spec.rows, spec.cols), Complex64::default());
        render_into(&mut data, &moved, spec);
        frames.push(data);
    }

    let peak = frames[0].iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let noise_scale = noise.sigma / 2.0_f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = Vec::with_capacity(frames.len());
    for mut data in frames {
        for v in data.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v = *v * scale + Complex64::new(re, im) * noise_scale;
        }
        out.push(ComplexImage::new(data, spec.pitch_axial, spec.pitch_lateral)?);
    }

    let truth = make_motion(motion, spec.rows, spec.cols)?;
    Ok((out, truth))
}
