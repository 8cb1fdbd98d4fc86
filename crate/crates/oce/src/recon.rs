//! Spectral-domain reconstruction: standard inverse-FFT B-scans, simplified
//! negative-delay artifact suppression, and ISAM refocusing through a
//! gridding NUFFT.
//!
//! ISAM resamples the laterally Fourier-transformed spectrum along k onto a
//! uniform axial-frequency grid using the dispersion relation
//! q_z = sqrt((2k)² − q_x²), with density-compensation weights and a phase
//! term referencing the beam focus. At q_x = 0 the map is the identity, so
//! the on-axis column reproduces the plain IFFT reconstruction.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft;
use crate::nufft::{nufft_type1, GriddingParams};
use crate::raster::{ComplexImage, SpectralFrame};

/// ISAM resampling configuration. Wavenumber geometry comes from the
/// [`SpectralFrame`] itself.
#[derive(Debug, Clone)]
pub struct IsamConfig {
    pub nufft_oversampling: f64,
    /// Kaiser–Bessel support in taps; even, ≥ 4.
    pub kernel_width: usize,
    /// Kernel shape parameter; None selects the standard width/oversampling
    /// formula.
    pub kernel_beta: Option<f64>,
    /// Row index of the beam focus in the reconstructed raster.
    pub focus_row: usize,
}

impl Default for IsamConfig {
    fn default() -> Self {
        Self {
            nufft_oversampling: 2.0,
            kernel_width: 8,
            kernel_beta: None,
            focus_row: 0,
        }
    }
}

impl IsamConfig {
    fn gridding(&self) -> Result<GriddingParams> {
        let mut p = GriddingParams::new(self.kernel_width, self.nufft_oversampling)?;
        if let Some(beta) = self.kernel_beta {
            p.kernel_beta = beta;
        }
        Ok(p)
    }
}

/// Standard reconstruction: per lateral column, inverse DFT along k, keeping
/// the first n_k/2 depth samples (positive delays).
pub fn reconstruct_ifft(frame: &SpectralFrame) -> Result<ComplexImage> {
    let n_k = frame.n_k();
    if !n_k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "n_k must be even, got {n_k}"
        )));
    }
    let n_x = frame.n_x();
    let mut full = frame.data.clone();
    fft::fft_axis0(&mut full, true);
    let mut data = Array2::from_elem((n_k / 2, n_x), Complex64::default());
    for r in 0..n_k / 2 {
        for c in 0..n_x {
            data[[r, c]] = full[[r, c]];
        }
    }
    ComplexImage::new(data, frame.pitch_axial(), frame.pitch_lateral)
}

/// Zero the negative-delay half of the reconstruction, sparing a guard band
/// of `guard_rows` delays closest to zero, and transform back. Idempotent.
pub fn suppress_negative_delay(frame: &SpectralFrame, guard_rows: usize) -> Result<SpectralFrame> {
    let n_k = frame.n_k();
    if !n_k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "n_k must be even, got {n_k}"
        )));
    }
    if guard_rows >= n_k / 2 {
        return Err(Error::InvalidArgument(format!(
            "guard_rows {guard_rows} must be < n_k/2 = {}",
            n_k / 2
        )));
    }
    let mut full = frame.data.clone();
    fft::fft_axis0(&mut full, true);
    // Delay index m ≥ n_k/2 represents negative delay m − n_k; keep the
    // guard_rows nearest zero (m > n_k − guard_rows − 1).
    for m in n_k / 2..n_k - guard_rows {
        for c in 0..frame.n_x() {
            full[[m, c]] = Complex64::default();
        }
    }
    fft::fft_axis0(&mut full, false);
    SpectralFrame::new(full, frame.k_min, frame.k_max, frame.pitch_lateral)
}

/// ISAM refocusing. Expects an artifact-suppressed frame; returns a complex
/// image on the same raster as [`reconstruct_ifft`].
pub fn isam_resample(frame: &SpectralFrame, cfg: &IsamConfig) -> Result<ComplexImage> {
    let n_k = frame.n_k();
    let n_x = frame.n_x();
    if !n_k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "n_k must be even, got {n_k}"
        )));
    }
    if frame.k_min <= 0.0 {
        return Err(Error::Numerics(
            "q_z grid degenerate: k_min must be positive for the dispersion relation".into(),
        ));
    }
    let gridding = cfg.gridding()?;
    let dk = frame.dk();
    if !dk.is_finite() || dk <= 0.0 {
        return Err(Error::Numerics("q_z grid degenerate: empty k range".into()));
    }
    let pitch_axial = frame.pitch_axial();
    let z_focus = cfg.focus_row as f64 * pitch_axial;

    // Lateral DFT.
    let mut spec = frame.data.clone();
    fft::fft_axis1(&mut spec, false);

    let rows_out = n_k / 2;
    let k_min = frame.k_min;
    let columns: Vec<Vec<Complex64>> = (0..n_x)
        .into_par_iter()
        .map(|c| {
            let c_signed = if c <= n_x / 2 {
                c as f64
            } else {
                c as f64 - n_x as f64
            };
            let q = std::f64::consts::TAU * c_signed / (n_x as f64 * frame.pitch_lateral);
            let mut positions = Vec::with_capacity(n_k);
            let mut values = Vec::with_capacity(n_k);
            for j in 0..n_k {
                let k_j = k_min + j as f64 * dk;
                let disc = 4.0 * k_j * k_j - q * q;
                if disc <= 0.0 {
                    continue; // evanescent
                }
                let q_z = disc.sqrt();
                let xi = (q_z - 2.0 * k_min) / (2.0 * dk);
                if !(0.0..n_k as f64).contains(&xi) {
                    continue; // outside the output band
                }
                // Density compensation (unity at q = 0) and focus-referenced
                // phase so the constant defocus of the focal plane offset is
                // removed.
                let weight = 2.0 * k_j / q_z;
                let phase = (2.0 * k_j - q_z) * z_focus;
                values.push(spec[[j, c]] * weight * Complex64::from_polar(1.0, phase));
                positions.push(xi);
            }
            let col = nufft_type1(&positions, &values, n_k, true, &gridding)
                .expect("gridding params validated");
            col.into_iter()
                .take(rows_out)
                .map(|v| v / n_k as f64)
                .collect()
        })
        .collect();

    let mut out = Array2::from_elem((rows_out, n_x), Complex64::default());
    for (c, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    fft::fft_axis1(&mut out, true);
    ComplexImage::new(out, pitch_axial, frame.pitch_lateral)
}
