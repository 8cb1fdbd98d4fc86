//! Dense sub-pixel displacement estimation by multi-resolution normalized
//! cross-correlation block matching.
//!
//! Each pass tiles the reference image with overlapping windows, pre-shifts
//! the moving-image search region by the rounded estimate from the previous
//! (coarser) pass, computes the zero-normalized cross-correlation over the
//! search area with FFTs, refines the integer peak by 2D Gaussian regression
//! on the log-correlation, and validates cells by peak strength. Grids are
//! median-validated, hole-filled, and bilinearly upsampled to pixel
//! resolution.
//!
//! The FFT correlation path is required to agree with the direct-sum
//! reference [`zncc_map_direct`] to 1e−9; both are exported so tests and the
//! acceptance suite can assert the equivalence.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft;
use crate::raster::{DisplacementField, Image};

/// Sub-pixel peak interpolation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakFit {
    /// Least-squares quadratic fit to the log of all 9 samples.
    Gauss2d,
    /// Independent three-point Gaussian fits per axis.
    Gauss1x1d,
    /// Three-point parabola per axis; no positivity requirement.
    Parabolic,
}

/// Multi-pass block matching configuration.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    /// (window, overlap) pairs in pixels, coarse to fine.
    pub pass_windows: Vec<(usize, usize)>,
    /// Search half-width around the (pre-shifted) block position, per pass.
    pub search_margin: usize,
    pub peak_fit: PeakFit,
    /// Cells with a correlation peak below this are invalid.
    pub min_ncc: f64,
    /// Chebyshev radius (in cells) of the outlier median test.
    pub outlier_median_radius: usize,
    /// Deviation from the neighborhood median (px) beyond which a cell is
    /// discarded.
    pub outlier_tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            pass_windows: vec![(64, 32), (32, 16), (16, 8)],
            search_margin: 8,
            peak_fit: PeakFit::Gauss2d,
            min_ncc: 0.3,
            outlier_median_radius: 2,
            outlier_tol: 1.5,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pass_windows.is_empty() {
            return Err(Error::InvalidArgument("empty pass list".into()));
        }
        let mut prev = usize::MAX;
        for &(w, o) in &self.pass_windows {
            if w < 8 {
                return Err(Error::InvalidArgument(format!("window {w} below 8 px")));
            }
            if o >= w {
                return Err(Error::InvalidArgument(format!(
                    "overlap {o} must be smaller than window {w}"
                )));
            }
            if w >= prev {
                return Err(Error::InvalidArgument(
                    "windows must be strictly decreasing".into(),
                ));
            }
            prev = w;
        }
        if !(self.min_ncc > 0.0 && self.min_ncc < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "min_ncc must lie in (0,1), got {}",
                self.min_ncc
            )));
        }
        if self.search_margin == 0 {
            return Err(Error::InvalidArgument("search_margin must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Block-grid displacement estimates at block-centre resolution.
#[derive(Debug, Clone)]
pub struct BlockGridField {
    /// Block centre coordinates per grid axis, in pixels (regular lattice).
    pub center_rows: Vec<f64>,
    pub center_cols: Vec<f64>,
    pub du_axial: Array2<f64>,
    pub du_lateral: Array2<f64>,
    pub ncc_peak: Array2<f64>,
    pub valid: Array2<bool>,
    /// Set by [`fill_and_smooth`] when no valid cell existed to fill from.
    pub warned_all_invalid: bool,
}

impl BlockGridField {
    pub fn grid_rows(&self) -> usize {
        self.center_rows.len()
    }

    pub fn grid_cols(&self) -> usize {
        self.center_cols.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Bilinear interpolation of the displacement values at an arbitrary
    /// pixel position, clamped to the lattice hull (nearest-edge outside).
    pub fn interp_at(&self, row: f64, col: f64) -> (f64, f64) {
        let (i0, i1, fz) = lattice_locate(&self.center_rows, row);
        let (j0, j1, fx) = lattice_locate(&self.center_cols, col);
        let lerp2 = |a: &Array2<f64>| -> f64 {
            let top = a[[i0, j0]] * (1.0 - fx) + a[[i0, j1]] * fx;
            let bot = a[[i1, j0]] * (1.0 - fx) + a[[i1, j1]] * fx;
            top * (1.0 - fz) + bot * fz
        };
        (lerp2(&self.du_axial), lerp2(&self.du_lateral))
    }
}

/// Locate `pos` in a sorted lattice of centres: surrounding indices and the
/// clamped interpolation fraction.
fn lattice_locate(centers: &[f64], pos: f64) -> (usize, usize, f64) {
    let n = centers.len();
    if n == 1 {
        return (0, 0, 0.0);
    }
    let step = centers[1] - centers[0];
    let t = ((pos - centers[0]) / step).clamp(0.0, (n - 1) as f64);
    let i0 = (t.floor() as usize).min(n - 2);
    (i0, i0 + 1, t - i0 as f64)
}

/// Sub-pixel offset of a correlation peak, from its 3×3 neighborhood.
#[derive(Debug, Clone, Copy)]
pub struct SubpixelPeak {
    pub delta_axial: f64,
    pub delta_lateral: f64,
    /// True when an estimate left (−1, 1) and was clamped to ±0.99.
    pub clamped: bool,
}

/// Fit the peak offset from the 3×3 correlation neighborhood whose centre is
/// the integer maximum.
///
/// `Gauss2d` least-squares fits ln C = a + b·dz + c·dx + d·dz² + e·dx² +
/// f·dz·dx over all 9 samples and returns the stationary point, requiring a
/// negative-definite Hessian. Non-positive samples or an indefinite fit fall
/// back to the per-axis three-point Gaussian, then to the parabola.
pub fn subpixel_peak(neighborhood: &[[f64; 3]; 3], method: PeakFit) -> SubpixelPeak {
    let c = neighborhood;
    let (dz, dx) = match method {
        PeakFit::Gauss2d => match gauss2d_fit(c) {
            Some(d) => d,
            None => return subpixel_peak(neighborhood, PeakFit::Gauss1x1d),
        },
        PeakFit::Gauss1x1d => match (
            three_point(c[0][1], c[1][1], c[2][1], true),
            three_point(c[1][0], c[1][1], c[1][2], true),
        ) {
            (Some(dz), Some(dx)) => (dz, dx),
            _ => return subpixel_peak(neighborhood, PeakFit::Parabolic),
        },
        PeakFit::Parabolic => (
            three_point(c[0][1], c[1][1], c[2][1], false).unwrap_or(0.0),
            three_point(c[1][0], c[1][1], c[1][2], false).unwrap_or(0.0),
        ),
    };
    let clamped = dz.abs() >= 1.0 || dx.abs() >= 1.0;
    SubpixelPeak {
        delta_axial: dz.clamp(-0.99, 0.99),
        delta_lateral: dx.clamp(-0.99, 0.99),
        clamped,
    }
}

/// Three-point peak fit along one axis. With `log` set this is the Gaussian
/// estimator δ = (ln C₋ − ln C₊) / (2 ln C₋ − 4 ln C₀ + 2 ln C₊).
fn three_point(m: f64, c0: f64, p: f64, log: bool) -> Option<f64> {
    let (m, c0, p) = if log {
        if m <= 0.0 || c0 <= 0.0 || p <= 0.0 {
            return None;
        }
        (m.ln(), c0.ln(), p.ln())
    } else {
        (m, c0, p)
    };
    let denom = 2.0 * m - 4.0 * c0 + 2.0 * p;
    if denom.abs() < 1e-300 || denom >= 0.0 {
        // Not a maximum along this axis.
        return if log { None } else { Some(0.0) };
    }
    Some((m - p) / denom)
}

/// Full 9-sample log-Gaussian regression; None when samples are non-positive
/// or the Hessian is not negative definite.
fn gauss2d_fit(c: &[[f64; 3]; 3]) -> Option<(f64, f64)> {
    let mut y = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if c[i][j] <= 0.0 {
                return None;
            }
            y[i][j] = c[i][j].ln();
        }
    }
    // Orthogonal design on the 3×3 lattice (dz, dx ∈ {−1, 0, 1}):
    // b = Σ dz·y / 6, c = Σ dx·y / 6, f = Σ dz·dx·y / 4,
    // d = Σ (dz²−2/3)·y / 2, e = Σ (dx²−2/3)·y / 2.
    let mut b = 0.0;
    let mut cc = 0.0;
    let mut f = 0.0;
    let mut d = 0.0;
    let mut e = 0.0;
    for (i, row) in y.iter().enumerate() {
        let dz = i as f64 - 1.0;
        for (j, &v) in row.iter().enumerate() {
            let dx = j as f64 - 1.0;
            b += dz * v;
            cc += dx * v;
            f += dz * dx * v;
            d += (dz * dz - 2.0 / 3.0) * v;
            e += (dx * dx - 2.0 / 3.0) * v;
        }
    }
    b /= 6.0;
    cc /= 6.0;
    f /= 4.0;
    d /= 2.0;
    e /= 2.0;
    // Stationary point of b·dz + c·dx + d·dz² + e·dx² + f·dz·dx, requiring
    // a negative-definite Hessian [[2d, f], [f, 2e]].
    let det = 4.0 * d * e - f * f;
    if !(d < 0.0 && det > 0.0) {
        return None;
    }
    Some(((cc * f - 2.0 * e * b) / det, (b * f - 2.0 * d * cc) / det))
}

const DEGENERATE_NCC: f64 = -2.0;

/// Zero-normalized cross-correlation of `block` against every window
/// position in `region`, by direct summation. Output shape is
/// (region_rows − w + 1, region_cols − w + 1). Reference implementation for
/// the FFT path.
pub fn zncc_map_direct(block: ArrayView2<f64>, region: ArrayView2<f64>) -> Array2<f64> {
    let (w_r, w_c) = block.dim();
    let (rr, rc) = region.dim();
    let out_r = rr - w_r + 1;
    let out_c = rc - w_c + 1;
    let n = (w_r * w_c) as f64;
    let mean_b = block.sum() / n;
    let den_b: f64 = block
        .iter()
        .map(|v| (v - mean_b).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut out = Array2::zeros((out_r, out_c));
    for i in 0..out_r {
        for j in 0..out_c {
            let mut sum_m = 0.0;
            let mut sum_m2 = 0.0;
            let mut num = 0.0;
            for p in 0..w_r {
                for q in 0..w_c {
                    let m = region[[i + p, j + q]];
                    sum_m += m;
                    sum_m2 += m * m;
                    num += (block[[p, q]] - mean_b) * m;
                }
            }
            let var_m = sum_m2 - sum_m * sum_m / n;
            let den = den_b * var_m.max(0.0).sqrt();
            out[[i, j]] = if den > 1e-12 * n {
                num / den
            } else {
                DEGENERATE_NCC
            };
        }
    }
    out
}

/// FFT-accelerated ZNCC map, numerically equivalent to [`zncc_map_direct`].
pub fn zncc_map_fft(block: ArrayView2<f64>, region: ArrayView2<f64>) -> Array2<f64> {
    let (w_r, w_c) = block.dim();
    let (rr, rc) = region.dim();
    let out_r = rr - w_r + 1;
    let out_c = rc - w_c + 1;
    let n = (w_r * w_c) as f64;
    let mean_b = block.sum() / n;
    let den_b: f64 = block
        .iter()
        .map(|v| (v - mean_b).powi(2))
        .sum::<f64>()
        .sqrt();

    // Numerator via circular correlation: conj(FFT(block−mean)) ∘ FFT(region).
    // Zero-mean block makes the moving-window mean term vanish, and the
    // region-sized transform is wrap-free for all valid offsets.
    let mut fb = Array2::from_elem((rr, rc), Complex64::default());
    for p in 0..w_r {
        for q in 0..w_c {
            fb[[p, q]] = Complex64::new(block[[p, q]] - mean_b, 0.0);
        }
    }
    let mut fm = region.mapv(|v| Complex64::new(v, 0.0));
    fft::fft2(&mut fb, false);
    fft::fft2(&mut fm, false);
    for (a, b) in fb.iter_mut().zip(fm.iter()) {
        *a = a.conj() * b;
    }
    fft::fft2(&mut fb, true);

    // Running window sums of the region via summed-area tables.
    let sat = summed_area(region);
    let sat2 = summed_area_sq(region);

    let mut out = Array2::zeros((out_r, out_c));
    for i in 0..out_r {
        for j in 0..out_c {
            let sum_m = box_sum(&sat, i, j, w_r, w_c);
            let sum_m2 = box_sum(&sat2, i, j, w_r, w_c);
            let var_m = sum_m2 - sum_m * sum_m / n;
            let den = den_b * var_m.max(0.0).sqrt();
            out[[i, j]] = if den > 1e-12 * n {
                fb[[i, j]].re / den
            } else {
                DEGENERATE_NCC
            };
        }
    }
    out
}

fn summed_area(a: ArrayView2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    let mut s = Array2::zeros((r + 1, c + 1));
    for i in 0..r {
        let mut row_acc = 0.0;
        for j in 0..c {
            row_acc += a[[i, j]];
            s[[i + 1, j + 1]] = s[[i, j + 1]] + row_acc;
        }
    }
    s
}

fn summed_area_sq(a: ArrayView2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    let mut s = Array2::zeros((r + 1, c + 1));
    for i in 0..r {
        let mut row_acc = 0.0;
        for j in 0..c {
            row_acc += a[[i, j]] * a[[i, j]];
            s[[i + 1, j + 1]] = s[[i, j + 1]] + row_acc;
        }
    }
    s
}

fn box_sum(sat: &Array2<f64>, i: usize, j: usize, h: usize, w: usize) -> f64 {
    sat[[i + h, j + w]] - sat[[i, j + w]] - sat[[i + h, j]] + sat[[i, j]]
}

/// Block start offsets for a window/step tiling.
fn block_lattice(extent: usize, window: usize, step: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut r = 0;
    while r + window <= extent {
        starts.push(r);
        r += step;
    }
    starts
}

/// One block-matching pass. `init` supplies per-block displacement
/// pre-shifts (interpolated at the new block centres, rounded to integers).
pub fn ncc_match_pass(
    reference: &Image,
    moving: &Image,
    window: usize,
    overlap: usize,
    cfg: &FlowConfig,
    init: Option<&BlockGridField>,
) -> Result<BlockGridField> {
    if reference.rows() != moving.rows() || reference.cols() != moving.cols() {
        return Err(Error::ShapeMismatch("image pair shape mismatch".into()));
    }
    let (rows, cols) = reference.data.dim();
    if window > rows || window > cols {
        return Err(Error::InvalidArgument(format!(
            "window {window} does not fit a {rows}×{cols} image"
        )));
    }
    if overlap >= window {
        return Err(Error::InvalidArgument("overlap must be < window".into()));
    }
    let step = window - overlap;
    let margin = cfg.search_margin;
    let row_starts = block_lattice(rows, window, step);
    let col_starts = block_lattice(cols, window, step);
    let center_rows: Vec<f64> = row_starts
        .iter()
        .map(|&r| r as f64 + (window as f64 - 1.0) / 2.0)
        .collect();
    let center_cols: Vec<f64> = col_starts
        .iter()
        .map(|&c| c as f64 + (window as f64 - 1.0) / 2.0)
        .collect();

    struct Cell {
        du: (f64, f64),
        ncc: f64,
        valid: bool,
    }

    let region_r = (window + 2 * margin).min(rows);
    let region_c = (window + 2 * margin).min(cols);

    let pairs: Vec<(usize, usize)> = row_starts
        .iter()
        .flat_map(|&r0| col_starts.iter().map(move |&c0| (r0, c0)))
        .collect();

    let cells: Vec<Cell> = pairs
        .par_iter()
        .map(|&(r0, c0)| {
            let invalid = Cell {
                du: (0.0, 0.0),
                ncc: 0.0,
                valid: false,
            };
            let cz = r0 as f64 + (window as f64 - 1.0) / 2.0;
            let cx = c0 as f64 + (window as f64 - 1.0) / 2.0;
            let (sz, sx) = match init {
                Some(g) => {
                    let (dz, dx) = g.interp_at(cz, cx);
                    (dz.round() as i64, dx.round() as i64)
                }
                None => (0, 0),
            };
            let block = reference
                .data
                .slice(ndarray::s![r0..r0 + window, c0..c0 + window]);

            // Search region around the pre-shifted block, clamped in-bounds.
            let rs = (r0 as i64 + sz - margin as i64).clamp(0, (rows - region_r) as i64) as usize;
            let cs = (c0 as i64 + sx - margin as i64).clamp(0, (cols - region_c) as i64) as usize;
            let region = moving
                .data
                .slice(ndarray::s![rs..rs + region_r, cs..cs + region_c]);

            let ncc = zncc_map_fft(block, region);
            let (mut pi, mut pj, mut best) = (0usize, 0usize, f64::MIN);
            for ((i, j), &v) in ncc.indexed_iter() {
                if v > best {
                    best = v;
                    pi = i;
                    pj = j;
                }
            }
            if best <= DEGENERATE_NCC + 1.0 || best < cfg.min_ncc {
                return invalid;
            }
            // A peak of exactly 1 is a perfect integer-lag match
            // (Cauchy–Schwarz equality); refinement would only add noise
            // from the window-edge asymmetry of the correlation map, and the
            // border rule below does not apply.
            let sub = if best >= 1.0 - 1e-12 {
                SubpixelPeak {
                    delta_axial: 0.0,
                    delta_lateral: 0.0,
                    clamped: false,
                }
            } else {
                // Peaks on the search border cannot be refined and usually
                // mean the true displacement left the search range.
                if pi == 0 || pj == 0 || pi == ncc.nrows() - 1 || pj == ncc.ncols() - 1 {
                    return invalid;
                }
                let mut neigh = [[0.0; 3]; 3];
                for (di, row) in neigh.iter_mut().enumerate() {
                    for (dj, v) in row.iter_mut().enumerate() {
                        *v = ncc[[pi + di - 1, pj + dj - 1]];
                    }
                }
                subpixel_peak(&neigh, cfg.peak_fit)
            };
            if sub.clamped {
                return invalid;
            }
            let dz = rs as f64 + pi as f64 + sub.delta_axial - r0 as f64;
            let dx = cs as f64 + pj as f64 + sub.delta_lateral - c0 as f64;
            Cell {
                du: (dz, dx),
                ncc: best,
                valid: true,
            }
        })
        .collect();

    let gr = row_starts.len();
    let gc = col_starts.len();
    let mut du_axial = Array2::zeros((gr, gc));
    let mut du_lateral = Array2::zeros((gr, gc));
    let mut ncc_peak = Array2::zeros((gr, gc));
    let mut valid = Array2::from_elem((gr, gc), false);
    for (idx, cell) in cells.iter().enumerate() {
        let (i, j) = (idx / gc, idx % gc);
        if cell.valid {
            du_axial[[i, j]] = cell.du.0;
            du_lateral[[i, j]] = cell.du.1;
        }
        ncc_peak[[i, j]] = cell.ncc;
        valid[[i, j]] = cell.valid;
    }
    Ok(BlockGridField {
        center_rows,
        center_cols,
        du_axial,
        du_lateral,
        ncc_peak,
        valid,
        warned_all_invalid: false,
    })
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median-validate and hole-fill a block grid.
///
/// Cells deviating from the median of their valid neighbors by more than
/// `outlier_tol` (per component) are discarded; discarded and invalid cells
/// are then filled by inverse-distance-squared weighting of the nearest
/// valid ring and marked valid. A grid with no valid cells is returned
/// unchanged with `warned_all_invalid` set.
pub fn fill_and_smooth(grid: &BlockGridField, cfg: &FlowConfig) -> BlockGridField {
    let mut out = grid.clone();
    let (gr, gc) = grid.valid.dim();
    if grid.n_valid() == 0 {
        log::warn!("fill_and_smooth: grid has no valid cells");
        out.warned_all_invalid = true;
        return out;
    }
    let rad = cfg.outlier_median_radius as i64;

    // Outlier pass against the median of valid neighbors (self excluded).
    let mut keep = grid.valid.clone();
    for i in 0..gr as i64 {
        for j in 0..gc as i64 {
            if !grid.valid[[i as usize, j as usize]] {
                continue;
            }
            let mut vz = Vec::new();
            let mut vx = Vec::new();
            for di in -rad..=rad {
                for dj in -rad..=rad {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= gr as i64 || nj >= gc as i64 {
                        continue;
                    }
                    if grid.valid[[ni as usize, nj as usize]] {
                        vz.push(grid.du_axial[[ni as usize, nj as usize]]);
                        vx.push(grid.du_lateral[[ni as usize, nj as usize]]);
                    }
                }
            }
            if vz.is_empty() {
                continue;
            }
            let mz = median_of(&mut vz);
            let mx = median_of(&mut vx);
            let dz = (grid.du_axial[[i as usize, j as usize]] - mz).abs();
            let dx = (grid.du_lateral[[i as usize, j as usize]] - mx).abs();
            if dz > cfg.outlier_tol || dx > cfg.outlier_tol {
                keep[[i as usize, j as usize]] = false;
            }
        }
    }

    // Fill every non-kept cell from the kept set by expanding-ring IDW.
    let max_rad = gr.max(gc) as i64;
    for i in 0..gr as i64 {
        for j in 0..gc as i64 {
            if keep[[i as usize, j as usize]] {
                out.du_axial[[i as usize, j as usize]] = grid.du_axial[[i as usize, j as usize]];
                out.du_lateral[[i as usize, j as usize]] =
                    grid.du_lateral[[i as usize, j as usize]];
                out.valid[[i as usize, j as usize]] = true;
                continue;
            }
            let mut num_z = 0.0;
            let mut num_x = 0.0;
            let mut den = 0.0;
            'rings: for r in 1..=max_rad {
                for di in -r..=r {
                    for dj in -r..=r {
                        if di.abs().max(dj.abs()) != r {
                            continue;
                        }
                        let (ni, nj) = (i + di, j + dj);
                        if ni < 0 || nj < 0 || ni >= gr as i64 || nj >= gc as i64 {
                            continue;
                        }
                        if !keep[[ni as usize, nj as usize]] {
                            continue;
                        }
                        let w = 1.0 / ((di * di + dj * dj) as f64);
                        num_z += w * grid.du_axial[[ni as usize, nj as usize]];
                        num_x += w * grid.du_lateral[[ni as usize, nj as usize]];
                        den += w;
                    }
                }
                if den > 0.0 {
                    break 'rings;
                }
            }
            if den > 0.0 {
                out.du_axial[[i as usize, j as usize]] = num_z / den;
                out.du_lateral[[i as usize, j as usize]] = num_x / den;
                out.valid[[i as usize, j as usize]] = true;
            } else {
                out.du_axial[[i as usize, j as usize]] = 0.0;
                out.du_lateral[[i as usize, j as usize]] = 0.0;
                out.valid[[i as usize, j as usize]] = false;
            }
        }
    }
    out
}

/// Bilinearly upsample a block grid to a dense per-pixel field.
///
/// Outside the lattice hull values are clamped to the nearest edge. The
/// validity mask marks pixels whose four surrounding cells are all valid;
/// masked-out pixels carry zero displacement (identity convention).
pub fn upsample_field(
    grid: &BlockGridField,
    rows: usize,
    cols: usize,
) -> Result<DisplacementField> {
    let (gr, gc) = grid.valid.dim();
    if gr < 2 || gc < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid too small to upsample: {gr}×{gc}"
        )));
    }
    let mut u_axial = Array2::zeros((rows, cols));
    let mut u_lateral = Array2::zeros((rows, cols));
    let mut valid = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        let (i0, i1, _) = lattice_locate(&grid.center_rows, r as f64);
        for c in 0..cols {
            let (j0, j1, _) = lattice_locate(&grid.center_cols, c as f64);
            let ok = grid.valid[[i0, j0]]
                && grid.valid[[i0, j1]]
                && grid.valid[[i1, j0]]
                && grid.valid[[i1, j1]];
            if ok {
                let (dz, dx) = grid.interp_at(r as f64, c as f64);
                u_axial[[r, c]] = dz;
                u_lateral[[r, c]] = dx;
                valid[[r, c]] = true;
            }
        }
    }
    DisplacementField::new(u_axial, u_lateral, valid)
}

/// Full multi-resolution estimate. The field maps the moving image into the
/// reference frame: `reference(p) ≈ moving(p + d(p))`.
pub fn estimate_flow(
    reference: &Image,
    moving: &Image,
    cfg: &FlowConfig,
) -> Result<DisplacementField> {
    cfg.validate()?;
    let mut grid: Option<BlockGridField> = None;
    for &(window, overlap) in &cfg.pass_windows {
        let pass = ncc_match_pass(reference, moving, window, overlap, cfg, grid.as_ref())?;
        grid = Some(fill_and_smooth(&pass, cfg));
    }
    let grid = grid.expect("pass list validated non-empty");
    upsample_field(&grid, reference.rows(), reference.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{
        make_scene, warp_scene_sequence, MotionKind, MotionSpec, NoiseSpec, PhantomSpec,
    };
    use crate::raster::log_compress;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_random_image(rows: usize, cols: usize, seed: u64) -> Image {
        // Band-limited random texture: a few hundred random-phase sinusoids.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes: Vec<(f64, f64, f64, f64)> = (0..200)
            .map(|_| {
                (
                    rng.gen::<f64>() * 0.9 + 0.05,
                    rng.gen::<f64>() * 0.9 + 0.05,
                    rng.gen::<f64>() * std::f64::consts::TAU,
                    rng.gen::<f64>() * 2.0 - 1.0,
                )
            })
            .collect();
        let data = Array2::from_shape_fn((rows, cols), |(r, c)| {
            modes
                .iter()
                .map(|&(fz, fx, ph, a)| a * (fz * r as f64 + fx * c as f64 + ph).sin())
                .sum::<f64>()
                / 10.0
                + 1.0
        });
        Image::new(data, 1.0, 1.0).unwrap()
    }

    // --- subpixel_peak ---

    #[test]
    fn symmetric_neighborhood_centered() {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (dz, dx) = (i as f64 - 1.0, j as f64 - 1.0);
                c[i][j] = (-(dz * dz + dx * dx)).exp();
            }
        }
        let p = subpixel_peak(&c, PeakFit::Gauss2d);
        assert!(p.delta_axial.abs() < 1e-12);
        assert!(p.delta_lateral.abs() < 1e-12);
        assert!(!p.clamped);
    }

    #[test]
    fn exact_gaussian_offset_recovered() {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (dz, dx) = (i as f64 - 1.0, j as f64 - 1.0);
                c[i][j] = (-((dz - 0.3).powi(2) + (dx + 0.2).powi(2))).exp();
            }
        }
        let p = subpixel_peak(&c, PeakFit::Gauss2d);
        assert!((p.delta_axial - 0.3).abs() < 1e-9, "{}", p.delta_axial);
        assert!((p.delta_lateral + 0.2).abs() < 1e-9, "{}", p.delta_lateral);
    }

    #[test]
    fn anisotropic_correlated_gaussian_exact() {
        // Gaussian regression is exact for exact Gaussians, including a
        // cross term.
        let (az, ax, axz) = (0.8, 1.3, 0.35);
        let (oz, ox) = (0.25, -0.35);
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (dz, dx) = (i as f64 - 1.0 - oz, j as f64 - 1.0 - ox);
                c[i][j] = (-(az * dz * dz + ax * dx * dx + axz * dz * dx)).exp();
            }
        }
        let p = subpixel_peak(&c, PeakFit::Gauss2d);
        assert!((p.delta_axial - oz).abs() < 1e-9);
        assert!((p.delta_lateral - ox).abs() < 1e-9);
    }

    #[test]
    fn negative_corner_falls_back_to_1x1d() {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (dz, dx) = (i as f64 - 1.0, j as f64 - 1.0);
                c[i][j] = (-((dz - 0.1).powi(2) + (dx - 0.15).powi(2)) / 2.0).exp();
            }
        }
        c[0][0] = -0.05;
        let p = subpixel_peak(&c, PeakFit::Gauss2d);
        // Independent three-point Gaussian on each axis.
        let g = |m: f64, c0: f64, pl: f64| {
            (m.ln() - pl.ln()) / (2.0 * m.ln() - 4.0 * c0.ln() + 2.0 * pl.ln())
        };
        let want_z = g(c[0][1], c[1][1], c[2][1]);
        let want_x = g(c[1][0], c[1][1], c[1][2]);
        assert!((p.delta_axial - want_z).abs() < 1e-12);
        assert!((p.delta_lateral - want_x).abs() < 1e-12);
    }

    #[test]
    fn monotone_neighborhood_does_not_panic() {
        let c = [[1.0, 2.0, 4.0], [2.0, 4.0, 8.0], [4.0, 8.0, 16.0]];
        let p = subpixel_peak(&c, PeakFit::Parabolic);
        assert!(p.delta_axial.abs() <= 0.99 && p.delta_lateral.abs() <= 0.99);
    }

    // --- ZNCC maps ---

    #[test]
    fn fft_matches_direct_on_random_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let block = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>());
            let region = Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>());
            let a = zncc_map_fft(block.view(), region.view());
            let b = zncc_map_direct(block.view(), region.view());
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn autocorrelation_peak_is_one() {
        let img = smooth_random_image(48, 48, 2);
        let block = img.data.slice(ndarray::s![16..32, 16..32]);
        let region = img.data.slice(ndarray::s![8..40, 8..40]);
        let map = zncc_map_fft(block, region);
        assert!((map[[8, 8]] - 1.0).abs() < 1e-12);
    }

    // --- ncc_match_pass ---

    #[test]
    fn identical_images_give_zero_everywhere() {
        let img = smooth_random_image(96, 96, 3);
        let cfg = FlowConfig::default();
        let grid = ncc_match_pass(&img, &img, 32, 16, &cfg, None).unwrap();
        for ((i, j), &v) in grid.valid.indexed_iter() {
            assert!(v, "cell ({i},{j}) invalid");
            assert!(grid.du_axial[[i, j]].abs() < 1e-9);
            assert!(grid.du_lateral[[i, j]].abs() < 1e-9);
            assert!((grid.ncc_peak[[i, j]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_circular_shift_recovered() {
        let img = smooth_random_image(96, 96, 4);
        let (rows, cols) = img.data.dim();
        // Content moves by (+3, −2): mov(r, c) = ref(r−3, c+2).
        let shifted = Array2::from_shape_fn((rows, cols), |(r, c)| {
            let rr = (r as i64 - 3).rem_euclid(rows as i64) as usize;
            let cc = (c as i64 + 2).rem_euclid(cols as i64) as usize;
            img.data[[rr, cc]]
        });
        let mov = Image::new(shifted, 1.0, 1.0).unwrap();
        let cfg = FlowConfig::default();
        let grid = ncc_match_pass(&img, &mov, 32, 16, &cfg, None).unwrap();
        for ((i, j), &v) in grid.valid.indexed_iter() {
            // Skip blocks whose search region touches the wrapped bands.
            if i == 0 || j == 0 || i == grid.grid_rows() - 1 || j == grid.grid_cols() - 1 {
                continue;
            }
            assert!(v);
            assert_eq!(grid.du_axial[[i, j]].round() as i64, 3);
            assert_eq!(grid.du_lateral[[i, j]].round() as i64, -2);
        }
    }

    #[test]
    fn constant_block_is_invalid_cell() {
        let mut data = Array2::from_elem((64, 64), 0.5);
        // Texture everywhere except one constant block.
        for ((r, c), v) in data.indexed_iter_mut() {
            if r >= 16 || c >= 16 {
                *v = ((r * 31 + c * 17) % 97) as f64 / 97.0;
            }
        }
        let img = Image::new(data, 1.0, 1.0).unwrap();
        let cfg = FlowConfig::default();
        let grid = ncc_match_pass(&img, &img, 16, 8, &cfg, None).unwrap();
        assert!(!grid.valid[[0, 0]], "zero-variance cell must be invalid");
        assert!(grid.valid[[3, 3]]);
    }

    // --- fill_and_smooth ---

    fn uniform_grid(gr: usize, gc: usize, dz: f64, dx: f64) -> BlockGridField {
        BlockGridField {
            center_rows: (0..gr).map(|i| 8.0 + 16.0 * i as f64).collect(),
            center_cols: (0..gc).map(|j| 8.0 + 16.0 * j as f64).collect(),
            du_axial: Array2::from_elem((gr, gc), dz),
            du_lateral: Array2::from_elem((gr, gc), dx),
            ncc_peak: Array2::from_elem((gr, gc), 1.0),
            valid: Array2::from_elem((gr, gc), true),
            warned_all_invalid: false,
        }
    }

    #[test]
    fn spike_replaced_by_neighborhood() {
        let mut grid = uniform_grid(7, 7, 5.0, 0.0);
        grid.du_axial[[3, 3]] = 50.0;
        let out = fill_and_smooth(&grid, &FlowConfig::default());
        assert!((out.du_axial[[3, 3]] - 5.0).abs() < 1e-9);
        assert!(out.valid[[3, 3]]);
    }

    #[test]
    fn smooth_grid_unchanged() {
        let mut grid = uniform_grid(6, 6, 0.0, 0.0);
        for ((i, j), v) in grid.du_lateral.indexed_iter_mut() {
            *v = 0.1 * i as f64 + 0.05 * j as f64;
        }
        let out = fill_and_smooth(&grid, &FlowConfig::default());
        for (a, b) in out.du_lateral.iter().zip(grid.du_lateral.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkerboard_fill_tracks_ramp() {
        let mut grid = uniform_grid(8, 8, 0.0, 0.0);
        for ((i, j), v) in grid.du_axial.indexed_iter_mut() {
            *v = 0.05 * i as f64 + 0.03 * j as f64;
        }
        let ramp = grid.du_axial.clone();
        for ((i, j), v) in grid.valid.indexed_iter_mut() {
            if (i + j) % 2 == 1 {
                *v = false;
            }
        }
        for ((i, j), v) in grid.du_axial.indexed_iter_mut() {
            if (i + j) % 2 == 1 {
                *v = 0.0;
            }
        }
        let out = fill_and_smooth(&grid, &FlowConfig::default());
        for ((i, j), &v) in out.du_axial.indexed_iter() {
            assert!(
                (v - ramp[[i, j]]).abs() < 0.1,
                "cell ({i},{j}): {v} vs {}",
                ramp[[i, j]]
            );
        }
    }

    #[test]
    fn all_invalid_grid_warns() {
        let mut grid = uniform_grid(4, 4, 0.0, 0.0);
        grid.valid.fill(false);
        grid.du_axial.fill(0.0);
        let out = fill_and_smooth(&grid, &FlowConfig::default());
        assert!(out.warned_all_invalid);
        assert_eq!(out.n_valid(), 0);
    }

    // --- upsample_field ---

    #[test]
    fn constant_grid_upsamples_to_constant() {
        let grid = uniform_grid(4, 4, 2.5, 0.0);
        let field = upsample_field(&grid, 64, 64).unwrap();
        for &v in field.u_axial.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        assert!(field.valid.iter().all(|&v| v));
    }

    #[test]
    fn linear_ramp_reproduced() {
        let mut grid = uniform_grid(4, 4, 0.0, 0.0);
        for ((_i, j), v) in grid.du_lateral.indexed_iter_mut() {
            let col = 8.0 + 16.0 * j as f64;
            *v = 0.02 * col + 1.0;
        }
        let field = upsample_field(&grid, 64, 64).unwrap();
        // Bilinear interpolation is exact on fields linear in position,
        // inside the lattice hull.
        for r in 8..56 {
            for c in 8..56 {
                let want = 0.02 * c as f64 + 1.0;
                assert!(
                    (field.u_lateral[[r, c]] - want).abs() < 1e-9,
                    "({r},{c}): {} vs {want}",
                    field.u_lateral[[r, c]]
                );
            }
        }
    }

    #[test]
    fn interpolant_exact_at_nodes() {
        let mut grid = uniform_grid(5, 5, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in grid.du_axial.iter_mut() {
            *v = rng.gen::<f64>() * 4.0 - 2.0;
        }
        for (i, &cr) in grid.center_rows.clone().iter().enumerate() {
            for (j, &cc) in grid.center_cols.clone().iter().enumerate() {
                let (dz, _) = grid.interp_at(cr, cc);
                assert_eq!(dz, grid.du_axial[[i, j]]);
            }
        }
    }

    #[test]
    fn too_small_grid_rejected() {
        let grid = uniform_grid(1, 4, 0.0, 0.0);
        assert!(upsample_field(&grid, 16, 64).is_err());
    }

    // --- estimate_flow ---

    fn phantom_pair(shift: f64, sigma: f64) -> (Image, Image) {
        let spec = PhantomSpec {
            rows: 192,
            cols: 192,
            n_scatterers: 2200,
            reflectivity_range: (0.3, 1.0),
            psf_sigma_axial: 1.5,
            psf_sigma_lateral: 1.5,
            focus_row: 96,
            defocus_rate: 0.0,
            pitch_axial: 2.0,
            pitch_lateral: 2.0,
            seed: 31,
        };
        let scene = make_scene(&spec).unwrap();
        let motion = MotionSpec {
            kind: MotionKind::UniformLateral,
            n_frames: 2,
            step_px: shift,
            compression_peak: 0.0,
            load_center: 0.0,
            load_width: 1.0,
            seed: 0,
        };
        let noise = NoiseSpec { sigma, seed: 77 };
        let (frames, _) = warp_scene_sequence(&scene, &spec, &motion, &noise).unwrap();
        let a = log_compress(&frames[0], -60.0).unwrap();
        let b = log_compress(&frames[1], -60.0).unwrap();
        (a, b)
    }

    fn interior_rmse(field: &DisplacementField, truth: (f64, f64), margin: usize) -> f64 {
        let (rows, cols) = field.u_axial.dim();
        let mut acc = 0.0;
        let mut n = 0usize;
        for r in margin..rows - margin {
            for c in margin..cols - margin {
                if !field.valid[[r, c]] {
                    continue;
                }
                acc += (field.u_axial[[r, c]] - truth.0).powi(2)
                    + (field.u_lateral[[r, c]] - truth.1).powi(2);
                n += 1;
            }
        }
        assert!(n > 0, "no valid interior pixels");
        (acc / n as f64).sqrt()
    }

    fn small_cfg() -> FlowConfig {
        FlowConfig {
            pass_windows: vec![(48, 24), (24, 12)],
            ..FlowConfig::default()
        }
    }

    #[test]
    fn identity_pair_gives_zero_field() {
        let (a, _) = phantom_pair(0.0, 0.0);
        let field = estimate_flow(&a, &a, &small_cfg()).unwrap();
        for (&v, &m) in field.u_axial.iter().zip(field.valid.iter()) {
            if m {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn integer_shift_five_px() {
        let (a, b) = phantom_pair(5.0, 0.0);
        let field = estimate_flow(&a, &b, &small_cfg()).unwrap();
        let rmse = interior_rmse(&field, (0.0, 5.0), 48);
        assert!(rmse < 0.05, "rmse {rmse}");
    }

    #[test]
    fn subpixel_shift_recovered() {
        let (a, b) = phantom_pair(5.3, 0.0);
        let field = estimate_flow(&a, &b, &small_cfg()).unwrap();
        let rmse = interior_rmse(&field, (0.0, 5.3), 48);
        assert!(rmse < 0.1, "rmse {rmse}");
    }

    #[test]
    fn swap_antisymmetry_on_integer_shift() {
        let (a, b) = phantom_pair(3.0, 0.0);
        let cfg = small_cfg();
        let fwd = estimate_flow(&a, &b, &cfg).unwrap();
        let bwd = estimate_flow(&b, &a, &cfg).unwrap();
        let (rows, cols) = fwd.u_axial.dim();
        let mut acc = 0.0;
        let mut n = 0;
        for r in 48..rows - 48 {
            for c in 48..cols - 48 {
                if fwd.valid[[r, c]] && bwd.valid[[r, c]] {
                    acc += (fwd.u_lateral[[r, c]] + bwd.u_lateral[[r, c]]).powi(2)
                        + (fwd.u_axial[[r, c]] + bwd.u_axial[[r, c]]).powi(2);
                    n += 1;
                }
            }
        }
        let rmse = (acc / n as f64).sqrt();
        assert!(rmse < 0.1, "swap asymmetry rmse {rmse}");
    }

    #[test]
    fn gain_and_offset_invariance() {
        let (a, b) = phantom_pair(2.0, 0.05);
        let cfg = small_cfg();
        let f1 = estimate_flow(&a, &b, &cfg).unwrap();
        let a2 = Image::new(a.data.mapv(|v| 3.0 * v + 0.25), 1.0, 1.0).unwrap();
        let b2 = Image::new(b.data.mapv(|v| 3.0 * v + 0.25), 1.0, 1.0).unwrap();
        let f2 = estimate_flow(&a2, &b2, &cfg).unwrap();
        for (x, y) in f1.u_lateral.iter().zip(f2.u_lateral.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        for (x, y) in f1.u_axial.iter().zip(f2.u_axial.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
