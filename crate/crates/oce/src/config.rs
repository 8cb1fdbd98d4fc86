//! Plain-text configuration: one `section.key = value` per line, `#` starts
//! a comment. Typed getters carry the key name in error messages; builders
//! assemble the domain config structs with documented defaults.

use std::collections::BTreeMap;
use std::path::Path;

use crate::denoise::{DenoiseConfig, SigmaMode};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, PeakFit};
use crate::phantom::{MotionKind, MotionSpec, NoiseSpec, PhantomSpec};
use crate::recon::IsamConfig;

/// Parsed key → value map (keys keep their `section.key` form).
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::ConfigParse {
                line: lineno + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() || !key.contains('.') {
                return Err(Error::ConfigParse {
                    line: lineno + 1,
                    message: format!("keys use `section.key` form, got `{key}`"),
                });
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            Error::InvalidArgument(format!("config key `{key}`: cannot parse `{raw}`"))
        })
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some("true") | Some("1") | Some("yes") | Some("on") => Ok(true),
            Some("false") | Some("0") | Some("no") | Some("off") => Ok(false),
            Some(other) => Err(Error::InvalidArgument(format!(
                "config key `{key}`: expected boolean, got `{other}`"
            ))),
            None => Ok(default),
        }
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Err(Error::InvalidArgument(format!(
                "config key `{key}` is required"
            ))),
        }
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Err(Error::InvalidArgument(format!(
                "config key `{key}` is required"
            ))),
        }
    }

    /// Serialize back to the `key = value` grammar, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    // --- domain builders ---

    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        let psf_sigma_lateral = self.get_f64("phantom.psf_sigma_lateral", 1.5)?;
        let pitch_axial = self.get_f64("phantom.pitch_axial", 5.0)?;
        let pitch_lateral = self.get_f64("phantom.pitch_lateral", 2.0)?;
        let rows = self.get_usize("phantom.rows", 256)?;
        let defocus_rate = match self.get("phantom.defocus_rate") {
            // "matched" derives the rate that the ISAM geometry inverts.
            Some("matched") => {
                let k_mid = (self.require_f64("recon.k_min")? + self.require_f64("recon.k_max")?)
                    / 2.0;
                crate::phantom::matched_defocus_rate(
                    pitch_axial,
                    pitch_lateral,
                    k_mid,
                    psf_sigma_lateral,
                )
            }
            Some(raw) => self.parse_as("phantom.defocus_rate", raw)?,
            None => 0.0,
        };
        Ok(PhantomSpec {
            rows,
            cols: self.get_usize("phantom.cols", 256)?,
            n_scatterers: self.get_usize("phantom.n_scatterers", 4000)?,
            reflectivity_range: (
                self.get_f64("phantom.reflectivity_min", 0.3)?,
                self.get_f64("phantom.reflectivity_max", 1.0)?,
            ),
            psf_sigma_axial: self.get_f64("phantom.psf_sigma_axial", 1.5)?,
            psf_sigma_lateral,
            focus_row: self.get_usize("phantom.focus_row", rows / 2)?,
            defocus_rate,
            pitch_axial,
            pitch_lateral,
            seed: self.get_u64("phantom.seed", 42)?,
        })
    }

    pub fn motion_spec(&self) -> Result<MotionSpec> {
        let kind = match self.get("motion.kind").unwrap_or("uniform_lateral") {
            "uniform_lateral" => MotionKind::UniformLateral,
            "smooth_compression" => MotionKind::SmoothCompression,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "config key `motion.kind`: unknown kind `{other}`"
                )))
            }
        };
        let cols = self.get_usize("phantom.cols", 256)?;
        Ok(MotionSpec {
            kind,
            n_frames: self.get_usize("motion.n_frames", 5)?,
            step_px: self.get_f64("motion.step_px", 5.0)?,
            compression_peak: self.get_f64("motion.compression_peak", 1.5)?,
            load_center: self.get_f64("motion.load_center", (cols / 2) as f64)?,
            load_width: self.get_f64("motion.load_width", cols as f64 / 6.0)?,
            seed: self.get_u64("motion.seed", 0)?,
        })
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        Ok(NoiseSpec {
            sigma: self.get_f64("noise.sigma", 0.1)?,
            seed: self.get_u64("noise.seed", 7)?,
        })
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        let default = FlowConfig::default();
        let pass_windows = match self.get("flow.pass_windows") {
            Some(raw) => parse_pass_windows(raw)?,
            None => default.pass_windows.clone(),
        };
        let peak_fit = match self.get("flow.peak_fit").unwrap_or("gauss2d") {
            "gauss2d" => PeakFit::Gauss2d,
            "gauss1x1d" => PeakFit::Gauss1x1d,
            "parabolic" => PeakFit::Parabolic,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "config key `flow.peak_fit`: unknown method `{other}`"
                )))
            }
        };
        let cfg = FlowConfig {
            pass_windows,
            search_margin: self.get_usize("flow.search_margin", default.search_margin)?,
            peak_fit,
            min_ncc: self.get_f64("flow.min_ncc", default.min_ncc)?,
            outlier_median_radius: self
                .get_usize("flow.outlier_median_radius", default.outlier_median_radius)?,
            outlier_tol: self.get_f64("flow.outlier_tol", default.outlier_tol)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn denoise_config(&self) -> Result<DenoiseConfig> {
        let default = DenoiseConfig::default();
        let sigma = match self.get("denoise.sigma") {
            None | Some("auto") => SigmaMode::Auto,
            Some(raw) => SigmaMode::Fixed(self.parse_as("denoise.sigma", raw)?),
        };
        let cfg = DenoiseConfig {
            block: self.get_usize("denoise.block", default.block)?,
            use_full_temporal: true,
            search_window: self.get_usize("denoise.search_window", default.search_window)?,
            max_group: self.get_usize("denoise.max_group", default.max_group)?,
            step: self.get_usize("denoise.step", default.step)?,
            hard_lambda: self.get_f64("denoise.hard_lambda", default.hard_lambda)?,
            sigma,
            wiener_stage: self.get_bool("denoise.wiener", default.wiener_stage)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn isam_config(&self) -> Result<IsamConfig> {
        let default = IsamConfig::default();
        Ok(IsamConfig {
            nufft_oversampling: self
                .get_f64("recon.nufft_oversampling", default.nufft_oversampling)?,
            kernel_width: self.get_usize("recon.kernel_width", default.kernel_width)?,
            kernel_beta: match self.get("recon.kernel_beta") {
                Some(raw) => Some(self.parse_as("recon.kernel_beta", raw)?),
                None => None,
            },
            focus_row: self.get_usize("recon.focus_row", 0)?,
        })
    }
}

/// `64:32,32:16,16:8` → [(64,32),(32,16),(16,8)].
fn parse_pass_windows(raw: &str) -> Result<Vec<(usize, usize)>> {
    raw.split(',')
        .map(|pair| {
            let (w, o) = pair.trim().split_once(':').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "flow.pass_windows entries use `window:overlap`, got `{pair}`"
                ))
            })?;
            let w = w.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad window in pass_windows: `{pair}`"))
            })?;
            let o = o.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad overlap in pass_windows: `{pair}`"))
            })?;
            Ok((w, o))
        })
        .collect()
}
