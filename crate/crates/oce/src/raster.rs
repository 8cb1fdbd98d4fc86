//! Shared raster containers and geometry metadata.
//!
//! Axis convention, fixed across the whole crate: axis 0 is axial/depth (z),
//! axis 1 is lateral (x). Storage is row-major. Pixel pitches are in µm per
//! pixel. All containers are immutable value objects after construction and
//! are safe to share across threads.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real-valued 2D raster (depth × lateral) in display units.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array2<f64>,
    /// Axial pixel pitch in µm/px.
    pub pitch_axial: f64,
    /// Lateral pixel pitch in µm/px.
    pub pitch_lateral: f64,
}

impl Image {
    pub fn new(data: Array2<f64>, pitch_axial: f64, pitch_lateral: f64) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument("image must be at least 1×1".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerics("image contains non-finite values".into()));
        }
        Ok(Self {
            data,
            pitch_axial,
            pitch_lateral,
        })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// True if geometry (shape and pitches) matches `other`.
    pub fn same_geometry(&self, other: &Image) -> bool {
        self.rows() == other.rows()
            && self.cols() == other.cols()
            && self.pitch_axial == other.pitch_axial
            && self.pitch_lateral == other.pitch_lateral
    }
}

/// Complex-valued raster with the same geometry conventions as [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    pub data: Array2<Complex64>,
    pub pitch_axial: f64,
    pub pitch_lateral: f64,
}

impl ComplexImage {
    pub fn new(data: Array2<Complex64>, pitch_axial: f64, pitch_lateral: f64) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument("image must be at least 1×1".into()));
        }
        if !data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::Numerics("image contains non-finite values".into()));
        }
        Ok(Self {
            data,
            pitch_axial,
            pitch_lateral,
        })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

/// Raw interferogram samples over (wavenumber, lateral position).
///
/// Samples are uniformly spaced in wavenumber: `k_j = k_min + j·dk` with
/// `dk = (k_max − k_min) / n_k` (half-open grid, `k_max` exclusive). The
/// depth pitch implied by the k window is `π / (k_max − k_min)` µm/px.
#[derive(Debug, Clone)]
pub struct SpectralFrame {
    /// n_k × n_x complex samples.
    pub data: Array2<Complex64>,
    /// Wavenumber range in rad/µm.
    pub k_min: f64,
    pub k_max: f64,
    /// Lateral pitch of the A-scan positions in µm/px.
    pub pitch_lateral: f64,
}

impl SpectralFrame {
    pub fn new(
        data: Array2<Complex64>,
        k_min: f64,
        k_max: f64,
        pitch_lateral: f64,
    ) -> Result<Self> {
        if k_min.is_nan() || k_max.is_nan() || k_min >= k_max {
            return Err(Error::InvalidArgument(format!(
                "require k_min < k_max, got [{k_min}, {k_max}]"
            )));
        }
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument("empty spectral frame".into()));
        }
        Ok(Self {
            data,
            k_min,
            k_max,
            pitch_lateral,
        })
    }

    pub fn n_k(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.data.ncols()
    }

    /// Wavenumber grid spacing dk in rad/µm.
    pub fn dk(&self) -> f64 {
        (self.k_max - self.k_min) / self.n_k() as f64
    }

    /// Depth pixel pitch implied by the k window, in µm/px.
    pub fn pitch_axial(&self) -> f64 {
        std::f64::consts::PI / (self.k_max - self.k_min)
    }
}

/// Dense per-pixel displacement field relating a pair of images.
///
/// Direction convention shared by every module: the field maps the moving
/// image into the reference frame, `ref(p) ≈ mov(p + d(p))`, with `d`
/// expressed in pixels as (axial, lateral). Where `valid` is false the
/// displacement is zero (identity by convention).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub u_axial: Array2<f64>,
    pub u_lateral: Array2<f64>,
    pub valid: Array2<bool>,
}

impl DisplacementField {
    pub fn new(
        u_axial: Array2<f64>,
        u_lateral: Array2<f64>,
        valid: Array2<bool>,
    ) -> Result<Self> {
        if u_axial.dim() != u_lateral.dim() || u_axial.dim() != valid.dim() {
            return Err(Error::ShapeMismatch(
                "displacement planes and mask must share one shape".into(),
            ));
        }
        for ((a, l), &v) in u_axial.iter().zip(u_lateral.iter()).zip(valid.iter()) {
            if !a.is_finite() || !l.is_finite() {
                return Err(Error::Numerics("non-finite displacement".into()));
            }
            if !v && (*a != 0.0 || *l != 0.0) {
                return Err(Error::InvalidArgument(
                    "invalid field sites must carry zero displacement".into(),
                ));
            }
        }
        Ok(Self {
            u_axial,
            u_lateral,
            valid,
        })
    }

    /// All-zero, all-valid field of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            u_axial: Array2::zeros((rows, cols)),
            u_lateral: Array2::zeros((rows, cols)),
            valid: Array2::from_elem((rows, cols), true),
        }
    }

    pub fn rows(&self) -> usize {
        self.u_axial.nrows()
    }

    pub fn cols(&self) -> usize {
        self.u_axial.ncols()
    }
}

/// Ordered temporal sequence of co-registered images with shared geometry.
#[derive(Debug, Clone)]
pub struct FrameStack {
    pub frames: Vec<Image>,
    /// Optional acquisition ordinals, one per frame.
    pub timestamps: Option<Vec<u64>>,
}

impl FrameStack {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(
                "frame stack needs at least 2 frames".into(),
            ));
        }
        let first = &frames[0];
        for f in &frames[1..] {
            if !f.same_geometry(first) {
                return Err(Error::ShapeMismatch(
                    "all frames in a stack must share geometry".into(),
                ));
            }
        }
        Ok(Self {
            frames,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.frames[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.frames[0].cols()
    }
}

/// Default display floor for [`log_compress`], in dB.
pub const DEFAULT_FLOOR_DB: f64 = -60.0;

/// Log-compress a complex image to a display-normalized magnitude raster.
///
/// Output is `max(20·log10(|z| / max|z|), floor_db)` rescaled affinely to
/// [0, 1]; the peak-magnitude pixel maps to exactly 1. Zero pixels land on
/// the floor (0). All-zero input has no defined normalization and errors.
pub fn log_compress(img: &ComplexImage, floor_db: f64) -> Result<Image> {
    if floor_db.is_nan() || floor_db >= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "floor_db must be negative, got {floor_db}"
        )));
    }
    let max_mag = img.data.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    if max_mag == 0.0 {
        return Err(Error::Numerics(
            "log_compress of all-zero image is undefined".into(),
        ));
    }
    let data = img.data.mapv(|z| {
        let mag = z.norm();
        let db = if mag > 0.0 {
            (20.0 * (mag / max_mag).log10()).max(floor_db)
        } else {
            floor_db
        };
        (db - floor_db) / -floor_db
    });
    Image::new(data, img.pitch_axial, img.pitch_lateral)
}
