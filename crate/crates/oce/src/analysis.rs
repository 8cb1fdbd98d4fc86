//! Small measurement helpers used by tests, the acceptance suite and the CLI:
//! PSF width estimation and field smoothness.

use crate::raster::DisplacementField;

/// Full width at half maximum of a 1D profile, in samples, with linear
/// interpolation of the half-max crossings around the global peak.
/// Returns None for profiles without a proper peak.
pub fn lateral_fwhm(profile: &[f64]) -> Option<f64> {
    if profile.len() < 3 {
        return None;
    }
    let (peak_idx, &peak) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
    if peak <= 0.0 || peak_idx == 0 || peak_idx == profile.len() - 1 {
        return None;
    }
    let half = peak / 2.0;
    // Walk left from the peak to the first crossing below half max.
    let mut left = None;
    for i in (0..peak_idx).rev() {
        if profile[i] <= half {
            let t = (half - profile[i]) / (profile[i + 1] - profile[i]);
            left = Some(i as f64 + t);
            break;
        }
    }
    let mut right = None;
    for i in peak_idx + 1..profile.len() {
        if profile[i] <= half {
            let t = (half - profile[i - 1]) / (profile[i] - profile[i - 1]);
            right = Some((i - 1) as f64 + t);
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Some(r - l),
        _ => None,
    }
}

/// Mean magnitude of the spatial gradient of a displacement field over its
/// valid interior, via forward differences. A smoothness score: lower is
/// smoother.
pub fn mean_gradient_magnitude(field: &DisplacementField) -> f64 {
    let (rows, cols) = field.u_axial.dim();
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            if !(field.valid[[r, c]] && field.valid[[r + 1, c]] && field.valid[[r, c + 1]]) {
                continue;
            }
            let gz_a = field.u_axial[[r + 1, c]] - field.u_axial[[r, c]];
            let gx_a = field.u_axial[[r, c + 1]] - field.u_axial[[r, c]];
            let gz_l = field.u_lateral[[r + 1, c]] - field.u_lateral[[r, c]];
            let gx_l = field.u_lateral[[r, c + 1]] - field.u_lateral[[r, c]];
            acc += (gz_a * gz_a + gx_a * gx_a + gz_l * gz_l + gx_l * gx_l).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}
