//! The displacement field as an explicit sparse linear operator.
//!
//! `build_warp` materializes bilinear resampling along a dense field as a
//! CSR matrix U with at most 4 taps per output pixel: out(p) = Σ w·in(p +
//! d(p)). Pixels whose displaced position leaves the raster keep an identity
//! row and are flagged out-of-view, so no deformation is applied where the
//! content is not present in both images. The adjoint shares the same
//! entries transposed, which makes the dot-product identity ⟨Ux,y⟩ = ⟨x,Uᵀy⟩
//! hold to rounding error by construction, and it is still asserted in
//! tests, since that is what catches indexing bugs.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::raster::{ComplexImage, DisplacementField, Image};

/// Sparse bilinear warp with exact adjoint.
#[derive(Debug, Clone)]
pub struct WarpOperator {
    rows: usize,
    cols: usize,
    /// CSR row pointers, one entry per output pixel plus one.
    indptr: Vec<u32>,
    indices: Vec<u32>,
    weights: Vec<f64>,
    out_of_view: Vec<bool>,
}

impl WarpOperator {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Identity operator on the given raster.
    pub fn identity(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            indptr: (0..=n as u32).collect(),
            indices: (0..n as u32).collect(),
            weights: vec![1.0; n],
            out_of_view: vec![false; n],
        }
    }

    /// Per-pixel out-of-view mask (true where the row was forced identity).
    pub fn out_of_view_mask(&self) -> Array2<bool> {
        Array2::from_shape_vec((self.rows, self.cols), self.out_of_view.clone())
            .expect("mask length matches raster")
    }

    pub fn n_out_of_view(&self) -> usize {
        self.out_of_view.iter().filter(|&&v| v).count()
    }

    /// Sparse entries as (out_index, in_index, weight) triplets.
    pub fn triplets(&self) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::with_capacity(self.indices.len());
        for p in 0..self.n_pixels() {
            for e in self.indptr[p] as usize..self.indptr[p + 1] as usize {
                out.push((p as u32, self.indices[e], self.weights[e]));
            }
        }
        out
    }

    /// Debug dump of the triplets as a 3 × nnz raster (out_index and
    /// in_index cast to f64, then weight).
    pub fn triplet_raster(&self) -> crate::rasterfile::RasterData {
        let trip = self.triplets();
        let mut a = ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, trip.len()]));
        for (i, &(out, inp, w)) in trip.iter().enumerate() {
            a[[0, i]] = out as f64;
            a[[1, i]] = inp as f64;
            a[[2, i]] = w;
        }
        crate::rasterfile::RasterData::F64(a)
    }

    fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.rows || cols != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "operator is {}×{}, image is {rows}×{cols}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    fn apply_data<T>(&self, data: &Array2<T>) -> Array2<T>
    where
        T: Copy + Default + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
    {
        let flat = data.as_slice().expect("row-major image");
        let mut out = vec![T::default(); flat.len()];
        for (p, o) in out.iter_mut().enumerate() {
            for e in self.indptr[p] as usize..self.indptr[p + 1] as usize {
                *o += flat[self.indices[e] as usize] * self.weights[e];
            }
        }
        Array2::from_shape_vec((self.rows, self.cols), out).expect("shape preserved")
    }

    fn apply_adjoint_data<T>(&self, data: &Array2<T>) -> Array2<T>
    where
        T: Copy + Default + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
    {
        let flat = data.as_slice().expect("row-major image");
        let mut out = vec![T::default(); flat.len()];
        // Serial scatter in row order keeps the accumulation order fixed, so
        // results are bitwise reproducible.
        for (p, &x) in flat.iter().enumerate() {
            for e in self.indptr[p] as usize..self.indptr[p + 1] as usize {
                out[self.indices[e] as usize] += x * self.weights[e];
            }
        }
        Array2::from_shape_vec((self.rows, self.cols), out).expect("shape preserved")
    }

    /// Apply U: out(p) = Σ w · in(p + d(p)).
    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.check_shape(img.rows(), img.cols())?;
        Image::new(
            self.apply_data(&img.data),
            img.pitch_axial,
            img.pitch_lateral,
        )
    }

    /// Apply Uᵀ.
    pub fn apply_adjoint(&self, img: &Image) -> Result<Image> {
        self.check_shape(img.rows(), img.cols())?;
        Image::new(
            self.apply_adjoint_data(&img.data),
            img.pitch_axial,
            img.pitch_lateral,
        )
    }

    pub fn apply_complex(&self, img: &ComplexImage) -> Result<ComplexImage> {
        self.check_shape(img.rows(), img.cols())?;
        ComplexImage::new(
            self.apply_data(&img.data),
            img.pitch_axial,
            img.pitch_lateral,
        )
    }

    pub fn apply_adjoint_complex(&self, img: &ComplexImage) -> Result<ComplexImage> {
        self.check_shape(img.rows(), img.cols())?;
        ComplexImage::new(
            self.apply_adjoint_data(&img.data),
            img.pitch_axial,
            img.pitch_lateral,
        )
    }
}

/// Build the warp operator for a displacement field.
///
/// Zero-weight taps are dropped before the bounds check, so integer
/// displacements landing exactly on the raster edge stay in view.
pub fn build_warp(field: &DisplacementField) -> Result<WarpOperator> {
    let (rows, cols) = field.u_axial.dim();
    let n = rows * cols;
    if n * 4 > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "raster too large for u32 sparse indices: {rows}×{cols}"
        )));
    }
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(n * 2);
    let mut weights = Vec::with_capacity(n * 2);
    let mut out_of_view = vec![false; n];
    indptr.push(0u32);

    let mut taps: Vec<(i64, i64, f64)> = Vec::with_capacity(4);
    for r in 0..rows {
        for c in 0..cols {
            let dz = field.u_axial[[r, c]];
            let dx = field.u_lateral[[r, c]];
            if !dz.is_finite() || !dx.is_finite() {
                return Err(Error::Numerics(format!(
                    "non-finite displacement at ({r},{c})"
                )));
            }
            let p = r * cols + c;
            let tz = r as f64 + dz;
            let tx = c as f64 + dx;
            let z0 = tz.floor();
            let x0 = tx.floor();
            let fz = tz - z0;
            let fx = tx - x0;
            let (z0, x0) = (z0 as i64, x0 as i64);

            taps.clear();
            for (zi, wz) in [(z0, 1.0 - fz), (z0 + 1, fz)] {
                if wz == 0.0 {
                    continue;
                }
                for (xi, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    taps.push((zi, xi, wz * wx));
                }
            }
            let in_view = taps
                .iter()
                .all(|&(zi, xi, _)| zi >= 0 && xi >= 0 && zi < rows as i64 && xi < cols as i64);
            if in_view {
                for &(zi, xi, w) in &taps {
                    indices.push((zi as usize * cols + xi as usize) as u32);
                    weights.push(w);
                }
            } else {
                out_of_view[p] = dz != 0.0 || dx != 0.0;
                indices.push(p as u32);
                weights.push(1.0);
            }
            indptr.push(indices.len() as u32);
        }
    }
    Ok(WarpOperator {
        rows,
        cols,
        indptr,
        indices,
        weights,
        out_of_view,
    })
}

/// Bilinear sample of a field at a continuous position, clamped to the
/// raster. Returns the displacement and whether every contributing cell was
/// valid.
fn sample_field(field: &DisplacementField, z: f64, x: f64) -> (f64, f64, bool) {
    let (rows, cols) = field.u_axial.dim();
    let zc = z.clamp(0.0, (rows - 1) as f64);
    let xc = x.clamp(0.0, (cols - 1) as f64);
    let z0 = (zc.floor() as usize).min(rows.saturating_sub(2));
    let x0 = (xc.floor() as usize).min(cols.saturating_sub(2));
    let (z0, z1) = if rows == 1 { (0, 0) } else { (z0, z0 + 1) };
    let (x0, x1) = if cols == 1 { (0, 0) } else { (x0, x0 + 1) };
    let fz = zc - z0 as f64;
    let fx = xc - x0 as f64;
    let lerp = |a: &Array2<f64>| {
        let top = a[[z0, x0]] * (1.0 - fx) + a[[z0, x1]] * fx;
        let bot = a[[z1, x0]] * (1.0 - fx) + a[[z1, x1]] * fx;
        top * (1.0 - fz) + bot * fz
    };
    let ok = field.valid[[z0, x0]]
        && field.valid[[z0, x1]]
        && field.valid[[z1, x0]]
        && field.valid[[z1, x1]];
    (lerp(&field.u_axial), lerp(&field.u_lateral), ok)
}

/// Compose two stage fields: `first` maps frame a → frame b (anchored at a),
/// `second` maps b → c (anchored at b). Result maps a → c, anchored at a.
fn compose_pair(first: &DisplacementField, second: &DisplacementField) -> DisplacementField {
    let (rows, cols) = first.u_axial.dim();
    let mut u_axial = Array2::zeros((rows, cols));
    let mut u_lateral = Array2::zeros((rows, cols));
    let mut valid = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for c in 0..cols {
            if !first.valid[[r, c]] {
                continue;
            }
            let az = first.u_axial[[r, c]];
            let ax = first.u_lateral[[r, c]];
            let (bz, bx, ok) = sample_field(second, r as f64 + az, c as f64 + ax);
            if ok {
                u_axial[[r, c]] = az + bz;
                u_lateral[[r, c]] = ax + bx;
                valid[[r, c]] = true;
            }
        }
    }
    DisplacementField {
        u_axial,
        u_lateral,
        valid,
    }
}

/// Invert a field: given d mapping frame a → frame b anchored at a, return
/// the b → a field anchored at b, by fixed-point iteration q ← p − d(q).
fn invert_field(field: &DisplacementField) -> DisplacementField {
    let (rows, cols) = field.u_axial.dim();
    let mut u_axial = Array2::zeros((rows, cols));
    let mut u_lateral = Array2::zeros((rows, cols));
    let mut valid = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for c in 0..cols {
            let (pz, px) = (r as f64, c as f64);
            let (mut qz, mut qx) = (pz, px);
            let mut ok = true;
            let mut converged = false;
            for _ in 0..100 {
                let (dz, dx, sample_ok) = sample_field(field, qz, qx);
                ok = sample_ok;
                let (nz, nx) = (pz - dz, px - dx);
                let step = (nz - qz).abs().max((nx - qx).abs());
                qz = nz;
                qx = nx;
                if step < 1e-12 {
                    converged = true;
                    break;
                }
            }
            if ok && converged {
                u_axial[[r, c]] = qz - pz;
                u_lateral[[r, c]] = qx - px;
                valid[[r, c]] = true;
            }
        }
    }
    DisplacementField {
        u_axial,
        u_lateral,
        valid,
    }
}

/// Accumulate pairwise fields (frame i → i+1) into frame-to-reference
/// fields: entry t maps reference coordinates into frame t, which is exactly
/// the field whose warp aligns frame t to the reference.
pub fn compose_fields(
    fields: &[DisplacementField],
    reference_index: usize,
) -> Result<Vec<DisplacementField>> {
    let n_frames = fields.len() + 1;
    if reference_index >= n_frames {
        return Err(Error::InvalidArgument(format!(
            "reference index {reference_index} out of range for {n_frames} frames"
        )));
    }
    let (rows, cols) = if fields.is_empty() {
        return Err(Error::InvalidArgument("no pairwise fields".into()));
    } else {
        fields[0].u_axial.dim()
    };
    for f in fields {
        if f.u_axial.dim() != (rows, cols) {
            return Err(Error::ShapeMismatch("pairwise field shapes differ".into()));
        }
    }

    let mut out: Vec<Option<DisplacementField>> = (0..n_frames).map(|_| None).collect();
    out[reference_index] = Some(DisplacementField::zeros(rows, cols));

    // Forward chain r → r+1 → … ; each step samples the next pairwise field
    // at the displaced position.
    for t in reference_index + 1..n_frames {
        let prev = out[t - 1].as_ref().expect("built in order");
        out[t] = Some(compose_pair(prev, &fields[t - 1]));
    }
    // Backward chain via inverted pairwise fields.
    for t in (0..reference_index).rev() {
        let inv = invert_field(&fields[t]);
        let prev = out[t + 1].as_ref().expect("built in order");
        out[t] = Some(compose_pair(prev, &inv));
    }
    Ok(out.into_iter().map(|f| f.expect("all frames built")).collect())
}

/// Warp operators aligning every frame to the reference frame.
pub fn compose_to_reference(
    fields: &[DisplacementField],
    reference_index: usize,
) -> Result<Vec<WarpOperator>> {
    compose_fields(fields, reference_index)?
        .iter()
        .map(build_warp)
        .collect()
}
