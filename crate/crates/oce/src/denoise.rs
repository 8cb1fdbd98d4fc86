//! Motion-compensated collaborative denoising of a warped frame stack.
//!
//! Spatio-temporal blocks (block × block × T, spanning the full temporal
//! extent of the co-registered stack) are grouped by similarity over a
//! spatial search window, jointly shrunk in a separable orthonormal 4D
//! transform (2D DCT spatially, Haar along time and along the grouping
//! axis), and aggregated back with per-group weights and a Kaiser spatial
//! taper. An optional second stage repeats the scan with empirical Wiener
//! shrinkage using the first pass as pilot.
//!
//! Out-of-view pixels (from the warp mask) never act as matching evidence:
//! candidate blocks overlapping them are excluded, their residual weight in
//! the reference block is zero, and their final values are restored from the
//! input frames.

use ndarray::{Array2, Array4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nufft::bessel_i0;
use crate::raster::FrameStack;

/// Noise level: estimated from the data or supplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Auto,
    Fixed(f64),
}

/// Collaborative filtering parameters.
#[derive(Debug, Clone)]
pub struct DenoiseConfig {
    /// Spatial block edge in pixels; power of two.
    pub block: usize,
    /// Blocks always span the full temporal extent; kept as an explicit
    /// switch so the contract is visible in configs.
    pub use_full_temporal: bool,
    /// Chebyshev search radius around each reference block, in pixels.
    pub search_window: usize,
    /// Maximum group size K, including the reference.
    pub max_group: usize,
    /// Reference-block lattice step; ≤ block so every pixel is covered.
    pub step: usize,
    /// Hard-threshold multiplier λ; coefficients below λσ are zeroed.
    pub hard_lambda: f64,
    pub sigma: SigmaMode,
    /// Enable the second (Wiener) stage.
    pub wiener_stage: bool,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            block: 8,
            use_full_temporal: true,
            search_window: 24,
            max_group: 16,
            step: 4,
            hard_lambda: 2.7,
            sigma: SigmaMode::Auto,
            wiener_stage: true,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.block.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "block must be a power of two, got {}",
                self.block
            )));
        }
        if self.step == 0 || self.step > self.block {
            return Err(Error::InvalidArgument(format!(
                "step must lie in 1..=block, got {}",
                self.step
            )));
        }
        if self.max_group == 0 {
            return Err(Error::InvalidArgument("max_group must be ≥ 1".into()));
        }
        if !self.use_full_temporal {
            return Err(Error::InvalidArgument(
                "only full-temporal blocks are supported".into(),
            ));
        }
        if let SigmaMode::Fixed(s) = self.sigma {
            if s < 0.0 {
                return Err(Error::InvalidArgument("sigma must be ≥ 0".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Separable orthonormal transforms
// ---------------------------------------------------------------------------

mod xform {
    /// Orthonormal DCT-II matrix of size n (row k, column j).
    pub fn dct_matrix(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for k in 0..n {
            let s = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for j in 0..n {
                m[k * n + j] = s
                    * (std::f64::consts::PI * (2.0 * j as f64 + 1.0) * k as f64
                        / (2.0 * n as f64))
                        .cos();
            }
        }
        m
    }

    /// y = M·x for a dense n×n matrix.
    pub fn mat_apply(m: &[f64], x: &[f64], y: &mut [f64]) {
        let n = x.len();
        for (k, yk) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                acc += m[k * n + j] * xj;
            }
            *yk = acc;
        }
    }

    /// In-place full orthonormal Haar decomposition; length must be a power
    /// of two. Approximation coefficients end up at the front.
    pub fn haar_forward(data: &mut [f64], scratch: &mut [f64]) {
        let mut len = data.len();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        while len >= 2 {
            let half = len / 2;
            for i in 0..half {
                scratch[i] = (data[2 * i] + data[2 * i + 1]) * s;
                scratch[half + i] = (data[2 * i] - data[2 * i + 1]) * s;
            }
            data[..len].copy_from_slice(&scratch[..len]);
            len = half;
        }
    }

    /// Inverse of [`haar_forward`].
    pub fn haar_inverse(data: &mut [f64], scratch: &mut [f64]) {
        let n = data.len();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            for i in 0..half {
                scratch[2 * i] = (data[i] + data[half + i]) * s;
                scratch[2 * i + 1] = (data[i] - data[half + i]) * s;
            }
            data[..len].copy_from_slice(&scratch[..len]);
            len *= 2;
        }
    }

    /// Symmetric replication of `data[..len]` up to the next power of two.
    pub fn pad_pow2(data: &mut Vec<f64>) {
        let len = data.len();
        let target = len.next_power_of_two();
        for k in 0..target - len {
            let src = len - 1 - k;
            data.push(data[src]);
        }
    }

}

// ---------------------------------------------------------------------------
// Sigma estimation
// ---------------------------------------------------------------------------

/// Robust noise estimate: MAD of the finest diagonal Haar subband of the
/// first frame, σ = median(|coeff|) / 0.6745.
pub fn estimate_sigma(stack: &FrameStack) -> f64 {
    let img = &stack.frames[0].data;
    let (rows, cols) = img.dim();
    let mut coeffs = Vec::with_capacity((rows / 2) * (cols / 2));
    for r in (0..rows - 1).step_by(2) {
        for c in (0..cols - 1).step_by(2) {
            let d =
                (img[[r, c]] - img[[r, c + 1]] - img[[r + 1, c]] + img[[r + 1, c + 1]]) / 2.0;
            coeffs.push(d.abs());
        }
    }
    if coeffs.is_empty() {
        return 0.0;
    }
    coeffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = coeffs.len();
    let median = if n % 2 == 1 {
        coeffs[n / 2]
    } else {
        0.5 * (coeffs[n / 2 - 1] + coeffs[n / 2])
    };
    median / 0.6745
}

// ---------------------------------------------------------------------------
// Grouping
// ---------------------------------------------------------------------------

/// A matched group of spatio-temporal blocks.
#[derive(Debug, Clone)]
pub struct BlockGroup {
    /// Top-left spatial coordinate of each member; member 0 is the
    /// reference.
    pub coords: Vec<(usize, usize)>,
    /// Stacked data, `[member][frame][row][col]`.
    pub data: Array4<f64>,
}

/// Reference/candidate lattice: multiples of `step` plus the border-snapped
/// final start so every pixel is covered.
fn scan_lattice(extent: usize, block: usize, step: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let last = extent - block;
    let mut r = 0;
    while r < last {
        v.push(r);
        r += step;
    }
    v.push(last);
    v
}

fn block_overlaps_mask(masks: &[Array2<bool>], r0: usize, c0: usize, block: usize) -> bool {
    masks.iter().any(|m| {
        (r0..r0 + block).any(|r| (c0..c0 + block).any(|c| m[[r, c]]))
    })
}

/// Mean squared distance between two spatio-temporal blocks; reference
/// pixels under the out-of-view mask carry zero weight.
fn block_distance(
    frames: &[&Array2<f64>],
    masks: Option<&[Array2<bool>]>,
    a: (usize, usize),
    b: (usize, usize),
    block: usize,
) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (t, f) in frames.iter().enumerate() {
        for i in 0..block {
            for j in 0..block {
                if let Some(ms) = masks {
                    if ms[t][[a.0 + i, a.1 + j]] {
                        continue;
                    }
                }
                let d = f[[a.0 + i, a.1 + j]] - f[[b.0 + i, b.1 + j]];
                acc += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Collect the K most similar candidate blocks for a reference coordinate.
///
/// Candidates live on the scan lattice within `search_window` (Chebyshev);
/// blocks overlapping out-of-view pixels in any frame are excluded from
/// candidacy (the reference itself is exempt; its masked pixels are weighted
/// zero in distances). Ties keep lattice scan order, so the grouping is
/// deterministic.
pub fn group_blocks(
    stack: &FrameStack,
    masks: Option<&[Array2<bool>]>,
    ref_coord: (usize, usize),
    cfg: &DenoiseConfig,
) -> BlockGroup {
    let frames: Vec<&Array2<f64>> = stack.frames.iter().map(|f| &f.data).collect();
    let (rows, cols) = frames[0].dim();
    let b = cfg.block;
    let (r_ref, c_ref) = ref_coord;

    let mut members: Vec<((usize, usize), f64)> = vec![(ref_coord, 0.0)];
    if cfg.max_group > 1 {
        let mut candidates: Vec<((usize, usize), f64)> = Vec::new();
        for &r0 in &scan_lattice(rows, b, cfg.step) {
            if r0.abs_diff(r_ref) > cfg.search_window {
                continue;
            }
            for &c0 in &scan_lattice(cols, b, cfg.step) {
                if c0.abs_diff(c_ref) > cfg.search_window || (r0, c0) == ref_coord {
                    continue;
                }
                if let Some(ms) = masks {
                    if block_overlaps_mask(ms, r0, c0, b) {
                        continue;
                    }
                }
                let d = block_distance(&frames, masks, ref_coord, (r0, c0), b);
                candidates.push(((r0, c0), d));
            }
        }
        candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        members.extend(candidates.into_iter().take(cfg.max_group - 1));
    }

    let n_frames = stack.len();
    let mut data = Array4::zeros((members.len(), n_frames, b, b));
    for (m, &((r0, c0), _)) in members.iter().enumerate() {
        for (t, f) in frames.iter().enumerate() {
            for i in 0..b {
                for j in 0..b {
                    data[[m, t, i, j]] = f[[r0 + i, c0 + j]];
                }
            }
        }
    }
    BlockGroup {
        coords: members.into_iter().map(|(c, _)| c).collect(),
        data,
    }
}

// ---------------------------------------------------------------------------
// 4D transform and shrinkage
// ---------------------------------------------------------------------------

/// Forward separable transform of a group tensor `[K][T][b][b]` with
/// symmetric power-of-two padding on the temporal and grouping axes.
/// Returns the padded coefficient tensor.
fn forward_4d(data: &Array4<f64>, dct: &[f64]) -> Array4<f64> {
    let (k, t, b, _) = data.dim();
    let kp = k.next_power_of_two();
    let tp = t.next_power_of_two();
    let mut out = Array4::zeros((kp, tp, b, b));

    // Spatial DCT per (member, frame) slice.
    let mut row = vec![0.0; b];
    let mut res = vec![0.0; b];
    for m in 0..k {
        for f in 0..t {
            for i in 0..b {
                for j in 0..b {
                    row[j] = data[[m, f, i, j]];
                }
                xform::mat_apply(dct, &row, &mut res);
                for j in 0..b {
                    out[[m, f, i, j]] = res[j];
                }
            }
            for j in 0..b {
                for i in 0..b {
                    row[i] = out[[m, f, i, j]];
                }
                xform::mat_apply(dct, &row, &mut res);
                for i in 0..b {
                    out[[m, f, i, j]] = res[i];
                }
            }
        }
    }

    // Haar along time, symmetric padding.
    let mut line = Vec::with_capacity(tp);
    let mut scratch = vec![0.0; kp.max(tp)];
    for m in 0..k {
        for i in 0..b {
            for j in 0..b {
                line.clear();
                for f in 0..t {
                    line.push(out[[m, f, i, j]]);
                }
                xform::pad_pow2(&mut line);
                xform::haar_forward(&mut line, &mut scratch);
                for f in 0..tp {
                    out[[m, f, i, j]] = line[f];
                }
            }
        }
    }

    // Haar along the grouping axis, symmetric padding.
    for f in 0..tp {
        for i in 0..b {
            for j in 0..b {
                line.clear();
                for m in 0..k {
                    line.push(out[[m, f, i, j]]);
                }
                xform::pad_pow2(&mut line);
                xform::haar_forward(&mut line, &mut scratch);
                for m in 0..kp {
                    out[[m, f, i, j]] = line[m];
                }
            }
        }
    }
    out
}

/// Inverse of [`forward_4d`], truncating back to `(k, t)` members/frames.
fn inverse_4d(coeffs: &Array4<f64>, k: usize, t: usize, dct_t: &[f64]) -> Array4<f64> {
    let (kp, tp, b, _) = coeffs.dim();
    let mut work = coeffs.clone();
    let mut scratch = vec![0.0; kp.max(tp)];
    let mut line = Vec::with_capacity(kp);

    for f in 0..tp {
        for i in 0..b {
            for j in 0..b {
                line.clear();
                for m in 0..kp {
                    line.push(work[[m, f, i, j]]);
                }
                xform::haar_inverse(&mut line, &mut scratch);
                for m in 0..kp {
                    work[[m, f, i, j]] = line[m];
                }
            }
        }
    }
    for m in 0..k {
        for i in 0..b {
            for j in 0..b {
                line.clear();
                for f in 0..tp {
                    line.push(work[[m, f, i, j]]);
                }
                xform::haar_inverse(&mut line, &mut scratch);
                for f in 0..tp {
                    work[[m, f, i, j]] = line[f];
                }
            }
        }
    }

    let mut out = Array4::zeros((k, t, b, b));
    let mut row = vec![0.0; b];
    let mut res = vec![0.0; b];
    for m in 0..k {
        for f in 0..t {
            // Transposed DCT (inverse of the orthonormal forward).
            for j in 0..b {
                for i in 0..b {
                    row[i] = work[[m, f, i, j]];
                }
                xform::mat_apply(dct_t, &row, &mut res);
                for i in 0..b {
                    work[[m, f, i, j]] = res[i];
                }
            }
            for i in 0..b {
                for j in 0..b {
                    row[j] = work[[m, f, i, j]];
                }
                xform::mat_apply(dct_t, &row, &mut res);
                for j in 0..b {
                    out[[m, f, i, j]] = res[j];
                }
            }
        }
    }
    out
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j];
        }
    }
    t
}

/// Hard-threshold a group in the 4D transform domain.
///
/// Coefficients with |c| < λσ are zeroed; the all-approximation DC
/// coefficient is preserved unconditionally. Returns the shrunk group and
/// the retained-coefficient count used for aggregation weights.
pub fn shrink_group_hard(
    group: &Array4<f64>,
    sigma: f64,
    hard_lambda: f64,
) -> (Array4<f64>, usize) {
    let (k, t, b, _) = group.dim();
    let dct = xform::dct_matrix(b);
    let mut coeffs = forward_4d(group, &dct);
    let thr = hard_lambda * sigma;
    let mut nonzero = 0usize;
    for (idx, v) in coeffs.indexed_iter_mut() {
        if idx == (0, 0, 0, 0) {
            nonzero += 1;
            continue;
        }
        if v.abs() < thr {
            *v = 0.0;
        } else {
            nonzero += 1;
        }
    }
    let dct_t = transpose(&dct, b);
    (inverse_4d(&coeffs, k, t, &dct_t), nonzero)
}

/// Empirical Wiener shrinkage of a noisy group against a pilot group in the
/// same 4D transform. Returns the shrunk group and Σ gain² for weighting.
pub fn shrink_group_wiener(
    noisy: &Array4<f64>,
    pilot: &Array4<f64>,
    sigma: f64,
) -> (Array4<f64>, f64) {
    let (k, t, b, _) = noisy.dim();
    let dct = xform::dct_matrix(b);
    let mut coeffs = forward_4d(noisy, &dct);
    let pilot_coeffs = forward_4d(pilot, &dct);
    let s2 = sigma * sigma;
    let mut sum_g2 = 0.0;
    for ((idx, v), p) in coeffs.indexed_iter_mut().zip(pilot_coeffs.iter()) {
        // The all-approximation DC passes unshrunk, as in the hard stage.
        let g = if idx == (0, 0, 0, 0) {
            1.0
        } else {
            let p2 = p * p;
            if p2 + s2 > 0.0 {
                p2 / (p2 + s2)
            } else {
                0.0
            }
        };
        *v *= g;
        sum_g2 += g * g;
    }
    let dct_t = transpose(&dct, b);
    (inverse_4d(&coeffs, k, t, &dct_t), sum_g2)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// A shrunk group ready for aggregation.
#[derive(Debug, Clone)]
pub struct ProcessedGroup {
    pub coords: Vec<(usize, usize)>,
    pub data: Array4<f64>,
    /// Group aggregation weight, e.g. 1/(1+nonzero_count).
    pub weight: f64,
}

struct Accumulator {
    values: Vec<Array2<f64>>,
    weights: Array2<f64>,
    kaiser: Array2<f64>,
}

impl Accumulator {
    fn new(rows: usize, cols: usize, n_frames: usize, block: usize) -> Self {
        // Separable Kaiser (β = 2) spatial taper.
        let i0 = bessel_i0(2.0);
        let k1: Vec<f64> = (0..block)
            .map(|i| {
                let x = 2.0 * i as f64 / (block - 1) as f64 - 1.0;
                bessel_i0(2.0 * (1.0 - x * x).sqrt()) / i0
            })
            .collect();
        let kaiser = Array2::from_shape_fn((block, block), |(i, j)| k1[i] * k1[j]);
        Self {
            values: (0..n_frames).map(|_| Array2::zeros((rows, cols))).collect(),
            weights: Array2::zeros((rows, cols)),
            kaiser,
        }
    }

    fn add(&mut self, group: &ProcessedGroup) {
        let (k, t, b, _) = group.data.dim();
        for m in 0..k {
            let (r0, c0) = group.coords[m];
            for f in 0..t {
                for i in 0..b {
                    for j in 0..b {
                        let w = group.weight * self.kaiser[[i, j]];
                        self.values[f][[r0 + i, c0 + j]] += w * group.data[[m, f, i, j]];
                        if f == 0 {
                            self.weights[[r0 + i, c0 + j]] += w;
                        }
                    }
                }
            }
        }
    }

    fn finish(self) -> Result<Vec<Array2<f64>>> {
        if let Some(((r, c), _)) = self
            .weights
            .indexed_iter()
            .find(|(_, &w)| w <= 0.0)
        {
            return Err(Error::Numerics(format!(
                "aggregation left pixel ({r},{c}) uncovered"
            )));
        }
        let weights = self.weights;
        Ok(self
            .values
            .into_iter()
            .map(|v| {
                Array2::from_shape_fn(v.dim(), |ix| v[ix] / weights[ix])
            })
            .collect())
    }
}

/// Weighted per-pixel average of processed groups over the raster. Errors if
/// any pixel ends up uncovered (a tiling bug).
pub fn aggregate(
    groups: &[ProcessedGroup],
    rows: usize,
    cols: usize,
    n_frames: usize,
    block: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut acc = Accumulator::new(rows, cols, n_frames, block);
    for g in groups {
        acc.add(g);
    }
    acc.finish()
}

// ---------------------------------------------------------------------------
// Full scan
// ---------------------------------------------------------------------------

fn stack_from_arrays(template: &FrameStack, arrays: Vec<Array2<f64>>) -> Result<FrameStack> {
    let frames = arrays
        .into_iter()
        .zip(template.frames.iter())
        .map(|(data, f)| crate::raster::Image::new(data, f.pitch_axial, f.pitch_lateral))
        .collect::<Result<Vec<_>>>()?;
    FrameStack::new(frames)
}

/// Restore out-of-view pixels from the original input frames.
fn restore_masked(
    result: &mut [Array2<f64>],
    original: &FrameStack,
    masks: Option<&[Array2<bool>]>,
) {
    if let Some(ms) = masks {
        for (t, mask) in ms.iter().enumerate() {
            for ((r, c), &flag) in mask.indexed_iter() {
                if flag {
                    result[t][[r, c]] = original.frames[t].data[[r, c]];
                }
            }
        }
    }
}

/// Collaborative denoising of a motion-compensated stack.
///
/// `masks` holds the per-frame out-of-view masks from warping (None when all
/// pixels are trustworthy). Scan order is the reference lattice in row-major
/// order; groups are processed in parallel and aggregated in lattice order,
/// so the result does not depend on the thread count.
pub fn denoise_stack(
    stack: &FrameStack,
    masks: Option<&[Array2<bool>]>,
    cfg: &DenoiseConfig,
) -> Result<FrameStack> {
    cfg.validate()?;
    let (rows, cols) = (stack.rows(), stack.cols());
    if cfg.block > rows || cfg.block > cols {
        return Err(Error::InvalidArgument(format!(
            "block {} exceeds raster {rows}×{cols}",
            cfg.block
        )));
    }
    if let Some(ms) = masks {
        if ms.len() != stack.len() {
            return Err(Error::ShapeMismatch(
                "one out-of-view mask per frame required".into(),
            ));
        }
        for m in ms {
            if m.dim() != (rows, cols) {
                return Err(Error::ShapeMismatch("mask shape mismatch".into()));
            }
        }
    }
    let sigma = match cfg.sigma {
        SigmaMode::Fixed(s) => s,
        SigmaMode::Auto => estimate_sigma(stack),
    };
    let n_frames = stack.len();

    let refs: Vec<(usize, usize)> = scan_lattice(rows, cfg.block, cfg.step)
        .iter()
        .flat_map(|&r| {
            scan_lattice(cols, cfg.block, cfg.step)
                .into_iter()
                .map(move |c| (r, c))
        })
        .collect();

    // Stage 1: hard thresholding.
    let mut acc = Accumulator::new(rows, cols, n_frames, cfg.block);
    for chunk in refs.chunks(256) {
        let processed: Vec<ProcessedGroup> = chunk
            .par_iter()
            .map(|&rc| {
                let group = group_blocks(stack, masks, rc, cfg);
                let (shrunk, nonzero) = shrink_group_hard(&group.data, sigma, cfg.hard_lambda);
                ProcessedGroup {
                    coords: group.coords,
                    data: shrunk,
                    weight: 1.0 / (1.0 + nonzero as f64),
                }
            })
            .collect();
        for g in &processed {
            acc.add(g);
        }
    }
    let mut stage1 = acc.finish()?;
    restore_masked(&mut stage1, stack, masks);

    if !cfg.wiener_stage {
        return stack_from_arrays(stack, stage1);
    }

    // Stage 2: empirical Wiener with the stage-1 result as pilot. Matching
    // runs on the pilot; both pilot and noisy groups share its coordinates.
    let pilot = stack_from_arrays(stack, stage1)?;
    let mut acc = Accumulator::new(rows, cols, n_frames, cfg.block);
    for chunk in refs.chunks(256) {
        let processed: Vec<ProcessedGroup> = chunk
            .par_iter()
            .map(|&rc| {
                let pilot_group = group_blocks(&pilot, masks, rc, cfg);
                let noisy = gather_group(stack, &pilot_group.coords, cfg.block);
                let (shrunk, sum_g2) = shrink_group_wiener(&noisy, &pilot_group.data, sigma);
                ProcessedGroup {
                    coords: pilot_group.coords,
                    data: shrunk,
                    weight: 1.0 / (1.0 + sum_g2),
                }
            })
            .collect();
        for g in &processed {
            acc.add(g);
        }
    }
    let mut stage2 = acc.finish()?;
    restore_masked(&mut stage2, stack, masks);
    stack_from_arrays(stack, stage2)
}

/// Extract the blocks at given coordinates from a stack.
fn gather_group(stack: &FrameStack, coords: &[(usize, usize)], block: usize) -> Array4<f64> {
    let n_frames = stack.len();
    let mut data = Array4::zeros((coords.len(), n_frames, block, block));
    for (m, &(r0, c0)) in coords.iter().enumerate() {
        for (t, f) in stack.frames.iter().enumerate() {
            for i in 0..block {
                for j in 0..block {
                    data[[m, t, i, j]] = f.data[[r0 + i, c0 + j]];
                }
            }
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{
        make_scene, warp_scene_sequence, MotionKind, MotionSpec, NoiseSpec, PhantomSpec,
    };
    use crate::raster::{log_compress, Image};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn stack_of(arrays: Vec<Array2<f64>>) -> FrameStack {
        FrameStack::new(
            arrays
                .into_iter()
                .map(|a| Image::new(a, 1.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn noise_image(rows: usize, cols: usize, sigma: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| {
            let n: f64 = rng.sample(StandardNormal);
            n * sigma
        })
    }

    // --- estimate_sigma ---

    #[test]
    fn sigma_of_zero_image_is_zero() {
        let stack = stack_of(vec![Array2::zeros((32, 32)), Array2::zeros((32, 32))]);
        assert_eq!(estimate_sigma(&stack), 0.0);
    }

    #[test]
    fn sigma_of_unit_noise_near_one() {
        let stack = stack_of(vec![
            noise_image(256, 256, 1.0, 1),
            Array2::zeros((256, 256)),
        ]);
        let s = estimate_sigma(&stack);
        assert!((0.9..=1.1).contains(&s), "σ = {s}");
    }

    #[test]
    fn sigma_of_smooth_ramp_is_small() {
        let ramp = Array2::from_shape_fn((128, 128), |(r, c)| {
            (r as f64 * 0.013).sin() + c as f64 * 0.002
        });
        let stack = stack_of(vec![ramp.clone(), ramp]);
        assert!(estimate_sigma(&stack) < 0.05);
    }

    // --- grouping ---

    #[test]
    fn constant_stack_groups_in_scan_order() {
        let stack = stack_of(vec![
            Array2::from_elem((32, 32), 0.5),
            Array2::from_elem((32, 32), 0.5),
        ]);
        let cfg = DenoiseConfig {
            max_group: 4,
            search_window: 12,
            ..DenoiseConfig::default()
        };
        let g = group_blocks(&stack, None, (8, 8), &cfg);
        assert_eq!(g.coords[0], (8, 8));
        // All distances tie at zero: scan order of the candidate lattice.
        assert_eq!(g.coords[1], (0, 0));
        assert_eq!(g.coords[2], (0, 4));
        assert_eq!(g.coords[3], (0, 8));
    }

    #[test]
    fn planted_identical_block_ranks_first() {
        let mut base = noise_image(48, 48, 1.0, 3);
        // Copy the reference block content to a distant lattice site.
        let refc = (8, 8);
        let plant = (8, 32);
        for i in 0..8 {
            for j in 0..8 {
                base[[plant.0 + i, plant.1 + j]] = base[[refc.0 + i, refc.1 + j]];
            }
        }
        let stack = stack_of(vec![base.clone(), base]);
        let cfg = DenoiseConfig {
            max_group: 3,
            search_window: 32,
            ..DenoiseConfig::default()
        };
        let g = group_blocks(&stack, None, refc, &cfg);
        assert_eq!(g.coords[1], plant);
    }

    #[test]
    fn k1_keeps_reference_only() {
        let stack = stack_of(vec![noise_image(32, 32, 1.0, 4); 2]);
        let cfg = DenoiseConfig {
            max_group: 1,
            ..DenoiseConfig::default()
        };
        let g = group_blocks(&stack, None, (4, 4), &cfg);
        assert_eq!(g.coords.len(), 1);
        assert_eq!(g.coords[0], (4, 4));
    }

    #[test]
    fn masked_candidates_excluded() {
        let stack = stack_of(vec![
            Array2::from_elem((32, 32), 0.5),
            Array2::from_elem((32, 32), 0.5),
        ]);
        let mut mask = Array2::from_elem((32, 32), false);
        mask[[2, 2]] = true; // poisons every block containing (2,2)
        let masks = vec![mask, Array2::from_elem((32, 32), false)];
        let cfg = DenoiseConfig {
            max_group: 4,
            search_window: 12,
            ..DenoiseConfig::default()
        };
        let g = group_blocks(&stack, Some(&masks), (8, 8), &cfg);
        assert!(!g.coords.contains(&(0, 0)));
        assert_eq!(g.coords[0], (8, 8));
    }

    // --- transforms / shrinkage ---

    fn random_group(k: usize, t: usize, b: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((k, t, b, b), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn transform_roundtrip_non_pow2_axes() {
        for &(k, t) in &[(5usize, 3usize), (16, 5), (1, 2), (7, 7)] {
            let g = random_group(k, t, 8, 10 + k as u64);
            let dct = xform::dct_matrix(8);
            let coeffs = forward_4d(&g, &dct);
            let back = inverse_4d(&coeffs, k, t, &transpose(&dct, 8));
            for (a, b) in back.iter().zip(g.iter()) {
                assert!((a - b).abs() < 1e-10, "k={k} t={t}");
            }
        }
    }

    #[test]
    fn transform_parseval_on_pow2_axes() {
        let g = random_group(8, 4, 8, 20);
        let dct = xform::dct_matrix(8);
        let coeffs = forward_4d(&g, &dct);
        let e0: f64 = g.iter().map(|v| v * v).sum();
        let e1: f64 = coeffs.iter().map(|v| v * v).sum();
        assert!((e0 - e1).abs() / e0 < 1e-10);
    }

    #[test]
    fn zero_sigma_shrink_is_identity() {
        let g = random_group(6, 5, 8, 30);
        let (out, _) = shrink_group_hard(&g, 0.0, 2.7);
        for (a, b) in out.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_group_survives_any_sigma() {
        let g = Array4::from_elem((4, 4, 8, 8), 0.37);
        let (out, nonzero) = shrink_group_hard(&g, 10.0, 2.7);
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-10);
        }
        assert_eq!(nonzero, 1, "only the preserved DC should remain");
    }

    #[test]
    fn white_noise_group_strongly_shrunk() {
        let sigma = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let g = Array4::from_shape_fn((16, 4, 8, 8), |_| {
            let n: f64 = rng.sample(StandardNormal);
            n * sigma
        });
        let (out, _) = shrink_group_hard(&g, sigma, 2.7);
        let var_in: f64 = g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
        let var_out: f64 = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        assert!(var_out <= 0.1 * var_in, "{var_out} vs {var_in}");
    }

    #[test]
    fn wiener_with_zero_sigma_is_identity() {
        let g = random_group(4, 3, 8, 50);
        let (out, _) = shrink_group_wiener(&g, &g, 0.0);
        for (a, b) in out.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    // --- aggregation ---

    #[test]
    fn single_group_covering_image_returns_content() {
        let g = random_group(1, 2, 8, 60);
        let pg = ProcessedGroup {
            coords: vec![(0, 0)],
            data: g.clone(),
            weight: 0.5,
        };
        let out = aggregate(&[pg], 8, 8, 2, 8).unwrap();
        for t in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    assert!((out[t][[i, j]] - g[[0, t, i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn overlapping_identical_blocks_average_to_common_value() {
        let mut data = Array4::zeros((2, 1, 8, 8));
        for m in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    data[[m, 0, i, j]] = 0.42;
                }
            }
        }
        let pg = ProcessedGroup {
            coords: vec![(0, 0), (0, 4)],
            data,
            weight: 1.0,
        };
        let out = aggregate(&[pg], 8, 12, 1, 8).unwrap();
        for j in 4..8 {
            assert!((out[0][[3, j]] - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_tiling_stays_constant() {
        let stack = stack_of(vec![
            Array2::from_elem((40, 40), 0.8),
            Array2::from_elem((40, 40), 0.8),
        ]);
        let cfg = DenoiseConfig {
            sigma: SigmaMode::Fixed(0.1),
            ..DenoiseConfig::default()
        };
        let out = denoise_stack(&stack, None, &cfg).unwrap();
        for f in &out.frames {
            for &v in f.data.iter() {
                assert!((v - 0.8).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uncovered_pixel_detected() {
        let g = random_group(1, 1, 8, 70);
        let pg = ProcessedGroup {
            coords: vec![(0, 0)],
            data: g,
            weight: 1.0,
        };
        // 12-wide raster with a single 8-wide block leaves columns 8..12
        // uncovered.
        assert!(aggregate(&[pg], 8, 12, 1, 8).is_err());
    }

    // --- denoise_stack ---

    fn phantom_stack(sigma: f64) -> (FrameStack, FrameStack) {
        phantom_stack_seeded(sigma, 9)
    }

    fn phantom_stack_seeded(sigma: f64, noise_seed: u64) -> (FrameStack, FrameStack) {
        let spec = PhantomSpec {
            rows: 96,
            cols: 96,
            n_scatterers: 600,
            reflectivity_range: (0.3, 1.0),
            psf_sigma_axial: 1.5,
            psf_sigma_lateral: 1.5,
            focus_row: 48,
            defocus_rate: 0.0,
            pitch_axial: 2.0,
            pitch_lateral: 2.0,
            seed: 5,
        };
        let scene = make_scene(&spec).unwrap();
        let motion = MotionSpec {
            kind: MotionKind::UniformLateral,
            n_frames: 5,
            step_px: 0.0,
            compression_peak: 0.0,
            load_center: 0.0,
            load_width: 1.0,
            seed: 0,
        };
        let clean = {
            let (frames, _) =
                warp_scene_sequence(&scene, &spec, &motion, &NoiseSpec { sigma: 0.0, seed: noise_seed })
                    .unwrap();
            FrameStack::new(
                frames
                    .iter()
                    .map(|f| log_compress(f, -60.0).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let noisy = {
            let (frames, _) =
                warp_scene_sequence(&scene, &spec, &motion, &NoiseSpec { sigma, seed: noise_seed })
                    .unwrap();
            FrameStack::new(
                frames
                    .iter()
                    .map(|f| log_compress(f, -60.0).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        (clean, noisy)
    }

    fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let n = a.len() as f64;
        (a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }

    #[test]
    fn noiseless_stack_near_identity() {
        let (clean, _) = phantom_stack(0.0);
        let cfg = DenoiseConfig::default();
        let out = denoise_stack(&clean, None, &cfg).unwrap();
        // PSNR vs input ≥ 40 dB with peak 1 means RMSE ≤ 1e-2.
        for (f, g) in out.frames.iter().zip(clean.frames.iter()) {
            let e = rmse(&f.data, &g.data);
            assert!(e <= 1e-2, "identity rmse {e}");
        }
    }

    #[test]
    fn exact_identity_with_fixed_zero_sigma() {
        let (clean, _) = phantom_stack(0.0);
        let cfg = DenoiseConfig {
            sigma: SigmaMode::Fixed(0.0),
            ..DenoiseConfig::default()
        };
        let out = denoise_stack(&clean, None, &cfg).unwrap();
        for (f, g) in out.frames.iter().zip(clean.frames.iter()) {
            for (a, b) in f.data.iter().zip(g.data.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn denoising_reduces_error_on_static_stack() {
        // Ground truth is a 20-draw frame average: the log magnitude of
        // complex noise carries an irreducible noise-floor bias on dark
        // pixels, and a multi-frame average (how OCT ground truths are
        // acquired) shares that bias, so the RMSE measures the removable
        // fluctuation.
        let (_, noisy) = phantom_stack(0.1);
        let mut gt = Array2::<f64>::zeros((96, 96));
        for draw in 0..4 {
            let (_, extra) = phantom_stack_seeded(0.1, 100 + draw);
            for f in &extra.frames {
                gt = &gt + &f.data;
            }
        }
        gt = gt / 20.0;
        let cfg = DenoiseConfig::default();
        let out = denoise_stack(&noisy, None, &cfg).unwrap();
        let before = rmse(&noisy.frames[0].data, &gt);
        let after = rmse(&out.frames[0].data, &gt);
        assert!(
            after < 0.7 * before,
            "rmse {before} → {after} (want < 0.7×)"
        );
    }

    #[test]
    fn constant_frames_with_noise_flatten() {
        let sigma = 0.05;
        let base = Array2::from_elem((40, 40), 0.5);
        let stack = stack_of(vec![
            &base + &noise_image(40, 40, sigma, 11),
            &base + &noise_image(40, 40, sigma, 12),
        ]);
        let cfg = DenoiseConfig {
            sigma: SigmaMode::Fixed(sigma),
            ..DenoiseConfig::default()
        };
        let out = denoise_stack(&stack, None, &cfg).unwrap();
        // Collaborative averaging over ≥ coverage samples: allow 3σ/√8.
        let bound = 3.0 * sigma / (8.0_f64).sqrt();
        for f in &out.frames {
            for &v in f.data.iter() {
                assert!((v - 0.5).abs() < bound, "|{v} − 0.5| ≥ {bound}");
            }
        }
    }

    #[test]
    fn masked_pixels_restored_from_input() {
        let (_, noisy) = phantom_stack(0.1);
        let mut masks: Vec<Array2<bool>> = (0..noisy.len())
            .map(|_| Array2::from_elem((96, 96), false))
            .collect();
        for c in 90..96 {
            for r in 0..96 {
                masks[1][[r, c]] = true;
            }
        }
        let out = denoise_stack(&noisy, Some(&masks), &DenoiseConfig::default()).unwrap();
        for r in 0..96 {
            for c in 90..96 {
                assert_eq!(out.frames[1].data[[r, c]], noisy.frames[1].data[[r, c]]);
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let (_, noisy) = phantom_stack(0.1);
        let cfg = DenoiseConfig::default();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| denoise_stack(&noisy, None, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(4);
        for (f, g) in a.frames.iter().zip(b.frames.iter()) {
            for (x, y) in f.data.iter().zip(g.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
