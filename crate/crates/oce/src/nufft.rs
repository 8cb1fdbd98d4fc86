//! Type-1 (nonuniform → uniform) NUFFT by Kaiser–Bessel gridding.
//!
//! Computes `f[m] = Σ_j c_j · exp(sign · 2πi · ξ_j · m̃ / n)` for output bins
//! `m = 0..n`, where `m̃` is the signed frequency of bin m (`m` for
//! `m < n/2`, `m − n` otherwise) and positions `ξ_j` are real-valued,
//! periodic over `[0, n)`.
//!
//! Algorithm: spread each sample onto an oversampled grid with a
//! Kaiser–Bessel kernel, FFT, deapodize by the kernel's analytic transform.
//! Accuracy is set by `kernel_width` and `oversampling`; width 8 at 2×
//! oversampling gives max-abs errors well below 1e−6 against the direct
//! nonuniform DFT.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;

/// Kaiser–Bessel gridding parameters.
#[derive(Debug, Clone)]
pub struct GriddingParams {
    /// Oversampled grid size factor, ≥ 1.25.
    pub oversampling: f64,
    /// Kernel support in grid taps; even, ≥ 4.
    pub kernel_width: usize,
    /// Kernel shape parameter.
    pub kernel_beta: f64,
}

impl GriddingParams {
    /// Standard shape parameter for a given width/oversampling:
    /// β = π·sqrt((w/σ)²·(σ−0.5)² − 0.8).
    pub fn default_beta(kernel_width: usize, oversampling: f64) -> f64 {
        let w = kernel_width as f64;
        let s = oversampling;
        std::f64::consts::PI * ((w / s).powi(2) * (s - 0.5).powi(2) - 0.8).max(0.0).sqrt()
    }

    pub fn new(kernel_width: usize, oversampling: f64) -> Result<Self> {
        let p = Self {
            oversampling,
            kernel_width,
            kernel_beta: Self::default_beta(kernel_width, oversampling),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.oversampling < 1.25 {
            return Err(Error::InvalidArgument(format!(
                "nufft oversampling must be ≥ 1.25, got {}",
                self.oversampling
            )));
        }
        if self.kernel_width < 4 || !self.kernel_width.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel width must be even and ≥ 4, got {}",
                self.kernel_width
            )));
        }
        Ok(())
    }
}

impl Default for GriddingParams {
    fn default() -> Self {
        Self::new(8, 2.0).unwrap()
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut acc = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        acc += term;
        if term < acc * 1e-18 {
            break;
        }
    }
    acc
}

/// Kaiser–Bessel kernel on support |x| ≤ w/2, normalized to ψ(0) = 1.
fn kb_kernel(x: f64, width: f64, beta: f64, i0_beta: f64) -> f64 {
    let t = 2.0 * x / width;
    let arg = 1.0 - t * t;
    if arg <= 0.0 {
        if arg > -1e-12 {
            return 1.0 / i0_beta; // exact support edge
        }
        return 0.0;
    }
    bessel_i0(beta * arg.sqrt()) / i0_beta
}

/// Continuous Fourier transform of the (unnormalized-height) KB kernel,
/// ψ̂(ν) = w·sinh(sqrt(β²−(πwν)²))/sqrt(β²−(πwν)²) / I0(β), with the
/// sin-continuation past the transition.
fn kb_transform(nu: f64, width: f64, beta: f64, i0_beta: f64) -> f64 {
    let a = std::f64::consts::PI * width * nu;
    let d = beta * beta - a * a;
    let core = if d > 0.0 {
        let s = d.sqrt();
        s.sinh() / s
    } else if d < 0.0 {
        let s = (-d).sqrt();
        s.sin() / s
    } else {
        1.0
    };
    width * core / i0_beta
}

/// Type-1 NUFFT. `positive_sign` selects the e^{+2πi…} kernel (inverse-DFT
/// orientation); output is unnormalized, like a plain DFT sum.
pub fn nufft_type1(
    positions: &[f64],
    values: &[Complex64],
    n: usize,
    positive_sign: bool,
    params: &GriddingParams,
) -> Result<Vec<Complex64>> {
    params.validate()?;
    if positions.len() != values.len() {
        return Err(Error::ShapeMismatch(
            "positions/values length mismatch".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("output size must be ≥ 1".into()));
    }
    let np = (((n as f64) * params.oversampling).ceil() as usize).max(n) & !1usize;
    let np = np.max(2 * params.kernel_width);
    let scale = np as f64 / n as f64;
    let w = params.kernel_width as f64;
    let half_w = w / 2.0;
    let i0_beta = bessel_i0(params.kernel_beta);

    // Spread in sample order (deterministic accumulation).
    let mut grid = vec![Complex64::default(); np];
    for (&xi, &c) in positions.iter().zip(values.iter()) {
        let eta = (xi.rem_euclid(n as f64)) * scale;
        let l_lo = (eta - half_w).ceil() as i64;
        let l_hi = (eta + half_w).floor() as i64;
        for l in l_lo..=l_hi {
            let psi = kb_kernel(l as f64 - eta, w, params.kernel_beta, i0_beta);
            if psi == 0.0 {
                continue;
            }
            let idx = l.rem_euclid(np as i64) as usize;
            grid[idx] += c * psi;
        }
    }

    fft::fft_slice(&mut grid, positive_sign);
    if positive_sign {
        // fft_slice normalizes inverse transforms by 1/np; undo to keep the
        // plain unnormalized sum semantics.
        for v in grid.iter_mut() {
            *v *= np as f64;
        }
    }

    // Deapodize at the signed output frequencies.
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let m_signed = if m < n.div_ceil(2) {
            m as i64
        } else {
            m as i64 - n as i64
        };
        let idx = m_signed.rem_euclid(np as i64) as usize;
        let corr = kb_transform(
            m_signed as f64 / np as f64,
            w,
            params.kernel_beta,
            i0_beta,
        );
        out.push(grid[idx] / corr);
    }
    Ok(out)
}

/// Direct nonuniform DFT with the same bin semantics as [`nufft_type1`].
/// O(n·m) reference implementation; the oracle for gridding accuracy.
pub fn ndft_type1(
    positions: &[f64],
    values: &[Complex64],
    n: usize,
    positive_sign: bool,
) -> Vec<Complex64> {
    let sign = if positive_sign { 1.0 } else { -1.0 };
    (0..n)
        .map(|m| {
            let m_signed = if m < n.div_ceil(2) {
                m as f64
            } else {
                m as f64 - n as f64
            };
            positions
                .iter()
                .zip(values.iter())
                .map(|(&xi, &c)| {
                    let ang = sign * std::f64::consts::TAU * xi * m_signed / n as f64;
                    c * Complex64::from_polar(1.0, ang)
                })
                .sum()
        })
        .collect()
}
