//! Thin wrappers over rustfft with fixed sign/normalization conventions.
//!
//! Forward transforms use the e^{−2πi jk/n} kernel and are unnormalized;
//! inverse transforms use e^{+2πi jk/n} and carry the 1/n factor.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place 1D transform of a contiguous buffer.
pub fn fft_slice(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    if n <= 1 {
        return;
    }
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    fft.process(data);
    if inverse {
        let scale = 1.0 / n as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// Transform every column (along axis 0) in place.
pub fn fft_axis0(a: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = a.dim();
    if rows <= 1 {
        return;
    }
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(rows)
    } else {
        planner.plan_fft_forward(rows)
    };
    let scale = 1.0 / rows as f64;
    let mut buf = vec![Complex64::default(); rows];
    for c in 0..cols {
        for r in 0..rows {
            buf[r] = a[[r, c]];
        }
        fft.process(&mut buf);
        for r in 0..rows {
            a[[r, c]] = if inverse { buf[r] * scale } else { buf[r] };
        }
    }
}

/// Transform every row (along axis 1) in place.
pub fn fft_axis1(a: &mut Array2<Complex64>, inverse: bool) {
    let cols = a.ncols();
    if cols <= 1 {
        return;
    }
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    let scale = 1.0 / cols as f64;
    for mut row in a.rows_mut() {
        let buf = row.as_slice_mut().expect("row-major layout");
        fft.process(buf);
        if inverse {
            for v in buf.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Full 2D transform (both axes).
pub fn fft2(a: &mut Array2<Complex64>, inverse: bool) {
    fft_axis1(a, inverse);
    fft_axis0(a, inverse);
}
