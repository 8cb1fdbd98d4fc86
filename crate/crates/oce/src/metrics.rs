//! Evaluation metrics: image RMSE, per-axis displacement RMSE, and
//! normalized cross-correlation.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::raster::{DisplacementField, Image};

/// Root-mean-square error between two images over an optional pixel mask.
pub fn metric_rmse_image(
    est: &Image,
    truth: &Image,
    mask: Option<&Array2<bool>>,
) -> Result<f64> {
    if est.rows() != truth.rows() || est.cols() != truth.cols() {
        return Err(Error::ShapeMismatch("image shape mismatch".into()));
    }
    if let Some(m) = mask {
        if m.dim() != est.data.dim() {
            return Err(Error::ShapeMismatch("mask shape mismatch".into()));
        }
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((idx, &a), &b) in est.data.indexed_iter().zip(truth.data.iter()) {
        if let Some(m) = mask {
            if !m[idx] {
                continue;
            }
        }
        acc += (a - b) * (a - b);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty metric mask".into()));
    }
    Ok((acc / n as f64).sqrt())
}

/// Per-axis displacement RMSE (lateral, axial) over jointly valid pixels.
pub fn metric_rmse_field(
    est: &DisplacementField,
    truth: &DisplacementField,
) -> Result<(f64, f64)> {
    metric_rmse_field_pooled(std::slice::from_ref(est), std::slice::from_ref(truth))
}

/// Per-axis displacement RMSE pooled over several frame pairs.
pub fn metric_rmse_field_pooled(
    est: &[DisplacementField],
    truth: &[DisplacementField],
) -> Result<(f64, f64)> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::ShapeMismatch(
            "field list length mismatch or empty".into(),
        ));
    }
    let mut acc_lat = 0.0;
    let mut acc_ax = 0.0;
    let mut n = 0usize;
    for (e, t) in est.iter().zip(truth.iter()) {
        if e.u_axial.dim() != t.u_axial.dim() {
            return Err(Error::ShapeMismatch("field shape mismatch".into()));
        }
        for ((idx, &ev), &tv) in e.valid.indexed_iter().zip(t.valid.iter()) {
            if !(ev && tv) {
                continue;
            }
            acc_lat += (e.u_lateral[idx] - t.u_lateral[idx]).powi(2);
            acc_ax += (e.u_axial[idx] - t.u_axial[idx]).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "no jointly valid pixels for field RMSE".into(),
        ));
    }
    Ok(((acc_lat / n as f64).sqrt(), (acc_ax / n as f64).sqrt()))
}

/// Zero-mean normalized cross-correlation coefficient of two images.
pub fn metric_ncc(est: &Image, truth: &Image) -> Result<f64> {
    if est.rows() != truth.rows() || est.cols() != truth.cols() {
        return Err(Error::ShapeMismatch("image shape mismatch".into()));
    }
    let n = est.data.len() as f64;
    let mean_a = est.data.sum() / n;
    let mean_b = truth.data.sum() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&a, &b) in est.data.iter().zip(truth.data.iter()) {
        let x = a - mean_a;
        let y = b - mean_b;
        num += x * y;
        da += x * x;
        db += y * y;
    }
    if da <= 0.0 || db <= 0.0 {
        return Err(Error::Numerics(
            "NCC undefined for constant images".into(),
        ));
    }
    Ok(num / (da * db).sqrt())
}
