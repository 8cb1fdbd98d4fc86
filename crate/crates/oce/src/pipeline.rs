//! Orchestration of the simultaneous displacement-estimation and denoising
//! loop.
//!
//! One run executes, in order: preprocess (reconstruction + log compression)
//! → initial pairwise flow → per iteration: compose fields to the reference,
//! warp the ORIGINAL preprocessed frames, collaboratively denoise the warped
//! stack, unwarp through the adjoint, re-estimate pairwise flow on the
//! denoised frames. Warping always consumes the original preprocessed
//! frames, never the denoised ones; the report carries fingerprints of every
//! frame that entered a warp so tests can assert exactly that.

use std::time::Instant;

use ndarray::Array2;

use crate::denoise::{denoise_stack, DenoiseConfig};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowConfig};
use crate::metrics::{metric_ncc, metric_rmse_field_pooled, metric_rmse_image};
use crate::raster::{log_compress, DisplacementField, FrameStack, Image, SpectralFrame};
use crate::recon::{isam_resample, reconstruct_ifft, suppress_negative_delay, IsamConfig};
use crate::warp::{build_warp, compose_fields, WarpOperator};

/// Reconstruction route for spectral input.
#[derive(Debug, Clone)]
pub enum Preprocess {
    Ifft,
    Isam(IsamConfig),
}

/// Full pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub preprocess: Preprocess,
    /// Guard rows for negative-delay suppression; None disables it.
    pub suppress_negative_delay: Option<usize>,
    /// Display floor for log compression, dB.
    pub floor_db: f64,
    pub flow: FlowConfig,
    pub denoise: DenoiseConfig,
    /// Number of warp → denoise → re-estimate cycles.
    pub iterations: usize,
    /// Frame index defining the common spatial position.
    pub reference_index: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: Preprocess::Ifft,
            suppress_negative_delay: None,
            floor_db: crate::raster::DEFAULT_FLOOR_DB,
            flow: FlowConfig::default(),
            denoise: DenoiseConfig::default(),
            iterations: 1,
            reference_index: 0,
        }
    }
}

/// Input frames: raw interferograms or already-reconstructed images.
pub enum PipelineInput {
    Spectral(Vec<SpectralFrame>),
    Images(Vec<Image>),
}

/// Optional oracle for metric rows.
pub struct GroundTruth {
    /// Exact pairwise fields (frame i → i+1).
    pub pairwise_fields: Vec<DisplacementField>,
    /// Ground-truth image at the reference frame position (for OCT data, a
    /// many-frame average as in validation practice).
    pub reference_image: Option<Image>,
}

/// One metric value; serialized as a CSV row `metric,value,frame_pair`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub frame_pair: String,
}

/// Everything a run produces.
pub struct PipelineReport {
    /// Pairwise fields from the first estimation on preprocessed frames.
    pub initial_fields: Vec<DisplacementField>,
    /// Pairwise fields after the last re-estimation on denoised frames.
    pub final_fields: Vec<DisplacementField>,
    /// Re-estimated pairwise fields after each iteration.
    pub per_iteration_fields: Vec<Vec<DisplacementField>>,
    /// Preprocessed (reconstructed, log-compressed) input frames.
    pub preprocessed: FrameStack,
    /// Denoised frames, unwarped back to their own geometry.
    pub denoised: FrameStack,
    pub metrics: Vec<MetricRow>,
    /// Wall-clock seconds per stage, in execution order.
    pub stage_runtimes: Vec<(String, f64)>,
    /// FNV-1a fingerprints of every frame passed into a warp operator, per
    /// iteration. Must always equal the preprocessed frames' fingerprints.
    pub warp_input_fingerprints: Vec<Vec<u64>>,
}

impl PipelineReport {
    /// Machine-readable metrics, deterministic for fixed seeds (runtimes are
    /// deliberately excluded).
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,value,frame_pair\n");
        for row in &self.metrics {
            out.push_str(&format!("{},{},{}\n", row.metric, row.value, row.frame_pair));
        }
        out
    }
}

/// Undo motion compensation on a denoised frame: apply Uᵀ, normalize by the
/// per-pixel deposited weight Uᵀ·1, and restore pixels the adjoint cannot
/// reach (zero coverage) from the original frame.
///
/// For near-permutation warps the normalization is a no-op; for large
/// composed shifts it removes the double-deposit band where the splat
/// overlaps out-of-view identity rows and fills the unreachable band with
/// original content, so displacement re-estimation sees correctly
/// positioned texture everywhere.
pub fn adjoint_unwarp(
    op: &WarpOperator,
    denoised: &Image,
    original: &Image,
) -> Result<Image> {
    let adj = op.apply_adjoint(denoised)?;
    let ones = Image::new(
        Array2::ones((original.rows(), original.cols())),
        original.pitch_axial,
        original.pitch_lateral,
    )?;
    let coverage = op.apply_adjoint(&ones)?;
    let data = Array2::from_shape_fn(adj.data.dim(), |ix| {
        let w = coverage.data[ix];
        if w > 0.5 {
            adj.data[ix] / w
        } else {
            original.data[ix]
        }
    });
    Image::new(data, original.pitch_axial, original.pitch_lateral)
}

/// FNV-1a over the image bytes; order-sensitive and bitwise-exact.
pub fn image_fingerprint(img: &Image) -> u64 {
    let mut h = 0xcbf29ce484222325_u64;
    for v in img.data.iter() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn preprocess_frames(input: &PipelineInput, cfg: &PipelineConfig) -> Result<FrameStack> {
    let frames = match input {
        PipelineInput::Images(imgs) => imgs.clone(),
        PipelineInput::Spectral(spectra) => {
            let mut out = Vec::with_capacity(spectra.len());
            for frame in spectra {
                let frame = match cfg.suppress_negative_delay {
                    Some(guard) => suppress_negative_delay(frame, guard)?,
                    None => frame.clone(),
                };
                let complex = match &cfg.preprocess {
                    Preprocess::Ifft => reconstruct_ifft(&frame)?,
                    Preprocess::Isam(isam_cfg) => isam_resample(&frame, isam_cfg)?,
                };
                out.push(log_compress(&complex, cfg.floor_db)?);
            }
            out
        }
    };
    FrameStack::new(frames)
}

fn pairwise_flow(stack: &FrameStack, cfg: &FlowConfig) -> Result<Vec<DisplacementField>> {
    (0..stack.len() - 1)
        .map(|i| estimate_flow(&stack.frames[i], &stack.frames[i + 1], cfg))
        .collect()
}

/// Run the full loop. With ground truth, Table-style metric rows are
/// attached (displacement RMSE per axis for initial and final fields, image
/// RMSE and NCC at the reference frame).
pub fn run_pipeline(
    input: &PipelineInput,
    cfg: &PipelineConfig,
    ground_truth: Option<&GroundTruth>,
) -> Result<PipelineReport> {
    if cfg.iterations < 1 {
        return Err(Error::InvalidArgument("iterations must be ≥ 1".into()));
    }
    let mut runtimes = Vec::new();
    let clock = Instant::now();
    let preprocessed =
        preprocess_frames(input, cfg).map_err(|e| e.in_stage("preprocess"))?;
    runtimes.push(("preprocess".to_string(), clock.elapsed().as_secs_f64()));

    if cfg.reference_index >= preprocessed.len() {
        return Err(Error::InvalidArgument(format!(
            "reference index {} out of range for {} frames",
            cfg.reference_index,
            preprocessed.len()
        )));
    }

    let clock = Instant::now();
    let initial_fields =
        pairwise_flow(&preprocessed, &cfg.flow).map_err(|e| e.in_stage("flow-initial"))?;
    runtimes.push(("flow-initial".to_string(), clock.elapsed().as_secs_f64()));

    let mut fields = initial_fields.clone();
    let mut per_iteration_fields = Vec::with_capacity(cfg.iterations);
    let mut warp_input_fingerprints = Vec::with_capacity(cfg.iterations);
    let mut denoised_stack: Option<FrameStack> = None;

    for iteration in 0..cfg.iterations {
        let clock = Instant::now();
        let composed = compose_fields(&fields, cfg.reference_index)
            .map_err(|e| e.in_stage("compose"))?;
        let ops: Vec<WarpOperator> = composed
            .iter()
            .map(build_warp)
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("warp-build"))?;

        // Warp the ORIGINAL preprocessed frames to the common position;
        // fingerprint exactly what goes in.
        let fingerprints: Vec<u64> = preprocessed.frames.iter().map(image_fingerprint).collect();
        warp_input_fingerprints.push(fingerprints);
        let warped: Vec<Image> = ops
            .iter()
            .zip(preprocessed.frames.iter())
            .map(|(op, frame)| op.apply(frame))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("warp-apply"))?;
        let masks: Vec<Array2<bool>> = ops.iter().map(|op| op.out_of_view_mask()).collect();
        let warped_stack = FrameStack::new(warped).map_err(|e| e.in_stage("warp-apply"))?;
        runtimes.push((format!("warp-{iteration}"), clock.elapsed().as_secs_f64()));

        let clock = Instant::now();
        let denoised_warped = denoise_stack(&warped_stack, Some(&masks), &cfg.denoise)
            .map_err(|e| e.in_stage("denoise"))?;
        runtimes.push((format!("denoise-{iteration}"), clock.elapsed().as_secs_f64()));

        let clock = Instant::now();
        let unwarped: Vec<Image> = ops
            .iter()
            .zip(denoised_warped.frames.iter())
            .zip(preprocessed.frames.iter())
            .map(|((op, frame), original)| adjoint_unwarp(op, frame, original))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("unwarp"))?;
        let unwarped_stack = FrameStack::new(unwarped).map_err(|e| e.in_stage("unwarp"))?;
        runtimes.push((format!("unwarp-{iteration}"), clock.elapsed().as_secs_f64()));

        let clock = Instant::now();
        fields =
            pairwise_flow(&unwarped_stack, &cfg.flow).map_err(|e| e.in_stage("flow-denoised"))?;
        runtimes.push((format!("flow-denoised-{iteration}"), clock.elapsed().as_secs_f64()));

        per_iteration_fields.push(fields.clone());
        denoised_stack = Some(unwarped_stack);
    }

    let denoised = denoised_stack.expect("iterations ≥ 1");
    let mut metrics = Vec::new();
    if let Some(gt) = ground_truth {
        build_metrics(
            &mut metrics,
            &initial_fields,
            &fields,
            &preprocessed,
            &denoised,
            cfg.reference_index,
            gt,
        )?;
    }

    Ok(PipelineReport {
        initial_fields,
        final_fields: fields,
        per_iteration_fields,
        preprocessed,
        denoised,
        metrics,
        stage_runtimes: runtimes,
        warp_input_fingerprints,
    })
}

fn build_metrics(
    metrics: &mut Vec<MetricRow>,
    initial: &[DisplacementField],
    fin: &[DisplacementField],
    preprocessed: &FrameStack,
    denoised: &FrameStack,
    reference_index: usize,
    gt: &GroundTruth,
) -> Result<()> {
    if !gt.pairwise_fields.is_empty() && gt.pairwise_fields.len() != initial.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ground-truth fields for {} frame pairs",
            gt.pairwise_fields.len(),
            initial.len()
        )));
    }
    if gt.pairwise_fields.len() == initial.len() {
        for (label, fields) in [("initial", initial), ("denoised", fin)] {
            let (lat, ax) = metric_rmse_field_pooled(fields, &gt.pairwise_fields)?;
            metrics.push(MetricRow {
                metric: format!("displacement_rmse_lateral_{label}"),
                value: lat,
                frame_pair: "pooled".into(),
            });
            metrics.push(MetricRow {
                metric: format!("displacement_rmse_axial_{label}"),
                value: ax,
                frame_pair: "pooled".into(),
            });
            for (i, (e, t)) in fields.iter().zip(gt.pairwise_fields.iter()).enumerate() {
                let (lat, ax) = crate::metrics::metric_rmse_field(e, t)?;
                metrics.push(MetricRow {
                    metric: format!("displacement_rmse_lateral_{label}"),
                    value: lat,
                    frame_pair: format!("{}-{}", i, i + 1),
                });
                metrics.push(MetricRow {
                    metric: format!("displacement_rmse_axial_{label}"),
                    value: ax,
                    frame_pair: format!("{}-{}", i, i + 1),
                });
            }
        }
    }
    if let Some(ref_img) = &gt.reference_image {
        let noisy = &preprocessed.frames[reference_index];
        let den = &denoised.frames[reference_index];
        metrics.push(MetricRow {
            metric: "image_rmse_single".into(),
            value: metric_rmse_image(noisy, ref_img, None)?,
            frame_pair: format!("{reference_index}"),
        });
        metrics.push(MetricRow {
            metric: "image_rmse_denoised".into(),
            value: metric_rmse_image(den, ref_img, None)?,
            frame_pair: format!("{reference_index}"),
        });
        metrics.push(MetricRow {
            metric: "image_ncc_single".into(),
            value: metric_ncc(noisy, ref_img)?,
            frame_pair: format!("{reference_index}"),
        });
        metrics.push(MetricRow {
            metric: "image_ncc_denoised".into(),
            value: metric_ncc(den, ref_img)?,
            frame_pair: format!("{reference_index}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{
        make_scene, warp_scene_sequence, MotionKind, MotionSpec, NoiseSpec, PhantomSpec,
    };

    fn phantom_input(
        step_px: f64,
        sigma: f64,
        n_frames: usize,
    ) -> (PipelineInput, Vec<DisplacementField>) {
        let spec = PhantomSpec {
            rows: 128,
            cols: 128,
            n_scatterers: 1000,
            reflectivity_range: (0.3, 1.0),
            psf_sigma_axial: 1.5,
            psf_sigma_lateral: 1.5,
            focus_row: 64,
            defocus_rate: 0.0,
            pitch_axial: 2.0,
            pitch_lateral: 2.0,
            seed: 17,
        };
        let scene = make_scene(&spec).unwrap();
        let motion = MotionSpec {
            kind: MotionKind::UniformLateral,
            n_frames,
            step_px,
            compression_peak: 0.0,
            load_center: 0.0,
            load_width: 1.0,
            seed: 0,
        };
        let noise = NoiseSpec { sigma, seed: 23 };
        let (frames, truth) = warp_scene_sequence(&scene, &spec, &motion, &noise).unwrap();
        let images: Vec<Image> = frames
            .iter()
            .map(|f| log_compress(f, -60.0).unwrap())
            .collect();
        (PipelineInput::Images(images), truth)
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            flow: FlowConfig {
                pass_windows: vec![(32, 16), (16, 8)],
                ..FlowConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn static_noiseless_run_is_near_identity() {
        let (input, truth) = phantom_input(0.0, 0.0, 3);
        let cfg = small_cfg();
        let gt = GroundTruth {
            pairwise_fields: truth,
            reference_image: None,
        };
        let report = run_pipeline(&input, &cfg, Some(&gt)).unwrap();
        // Final fields all-zero within 1e−3 px.
        for f in &report.final_fields {
            for (&v, &m) in f.u_lateral.iter().zip(f.valid.iter()) {
                if m {
                    assert!(v.abs() < 1e-3, "lateral {v}");
                }
            }
            for (&v, &m) in f.u_axial.iter().zip(f.valid.iter()) {
                if m {
                    assert!(v.abs() < 1e-3, "axial {v}");
                }
            }
        }
        // Denoised frames ≈ inputs: PSNR ≥ 40 dB ⇔ RMSE ≤ 0.01 on [0,1].
        for (d, p) in report
            .denoised
            .frames
            .iter()
            .zip(report.preprocessed.frames.iter())
        {
            let rmse = metric_rmse_image(d, p, None).unwrap();
            assert!(rmse <= 1e-2, "identity rmse {rmse}");
        }
    }

    #[test]
    fn warp_inputs_are_always_the_preprocessed_frames() {
        let (input, _) = phantom_input(2.0, 0.1, 3);
        let cfg = PipelineConfig {
            iterations: 2,
            ..small_cfg()
        };
        let report = run_pipeline(&input, &cfg, None).unwrap();
        let expected: Vec<u64> = report
            .preprocessed
            .frames
            .iter()
            .map(image_fingerprint)
            .collect();
        assert_eq!(report.warp_input_fingerprints.len(), 2);
        for iteration in &report.warp_input_fingerprints {
            assert_eq!(iteration, &expected);
        }
        // And the denoised frames are NOT what was warped.
        let denoised: Vec<u64> = report
            .denoised
            .frames
            .iter()
            .map(image_fingerprint)
            .collect();
        assert_ne!(denoised, expected);
    }

    #[test]
    fn two_iterations_equal_manual_continuation() {
        let (input, _) = phantom_input(2.0, 0.1, 3);
        let cfg1 = small_cfg();
        let cfg2 = PipelineConfig {
            iterations: 2,
            ..small_cfg()
        };
        let r1 = run_pipeline(&input, &cfg1, None).unwrap();
        let r2 = run_pipeline(&input, &cfg2, None).unwrap();

        // Manual continuation of r1: compose its final fields, warp the
        // original preprocessed frames, denoise, unwarp, re-estimate.
        let composed = compose_fields(&r1.final_fields, cfg1.reference_index).unwrap();
        let ops: Vec<WarpOperator> = composed.iter().map(|f| build_warp(f).unwrap()).collect();
        let warped: Vec<Image> = ops
            .iter()
            .zip(r1.preprocessed.frames.iter())
            .map(|(op, f)| op.apply(f).unwrap())
            .collect();
        let masks: Vec<Array2<bool>> = ops.iter().map(|op| op.out_of_view_mask()).collect();
        let den = denoise_stack(
            &FrameStack::new(warped).unwrap(),
            Some(&masks),
            &cfg1.denoise,
        )
        .unwrap();
        let unwarped: Vec<Image> = ops
            .iter()
            .zip(den.frames.iter())
            .zip(r1.preprocessed.frames.iter())
            .map(|((op, f), orig)| adjoint_unwarp(op, f, orig).unwrap())
            .collect();
        let manual_fields =
            pairwise_flow(&FrameStack::new(unwarped).unwrap(), &cfg1.flow).unwrap();

        assert_eq!(manual_fields.len(), r2.final_fields.len());
        for (a, b) in manual_fields.iter().zip(r2.final_fields.iter()) {
            for (x, y) in a.u_lateral.iter().zip(b.u_lateral.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.u_axial.iter().zip(b.u_axial.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.valid.iter().zip(b.valid.iter()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn noisy_uniform_motion_improves_displacement() {
        let (input, truth) = phantom_input(5.0, 0.1, 5);
        let cfg = small_cfg();
        let gt = GroundTruth {
            pairwise_fields: truth,
            reference_image: None,
        };
        let report = run_pipeline(&input, &cfg, Some(&gt)).unwrap();
        let get = |name: &str| {
            report
                .metrics
                .iter()
                .find(|m| m.metric == name && m.frame_pair == "pooled")
                .map(|m| m.value)
                .unwrap()
        };
        let lat0 = get("displacement_rmse_lateral_initial");
        let lat1 = get("displacement_rmse_lateral_denoised");
        let ax0 = get("displacement_rmse_axial_initial");
        let ax1 = get("displacement_rmse_axial_denoised");
        assert!(lat1 < lat0, "lateral {lat0} → {lat1}");
        assert!(ax1 < ax0, "axial {ax0} → {ax1}");
    }

    #[test]
    fn spectral_input_with_suppression_and_isam() {
        use crate::phantom::synthesize_spectrum;
        use crate::recon::IsamConfig;

        let spec = PhantomSpec {
            rows: 96,
            cols: 96,
            n_scatterers: 600,
            reflectivity_range: (0.3, 1.0),
            psf_sigma_axial: 1.5,
            psf_sigma_lateral: 1.5,
            focus_row: 48,
            defocus_rate: crate::phantom::matched_defocus_rate(5.0, 2.0, 7.854, 1.5),
            pitch_axial: 5.0,
            pitch_lateral: 2.0,
            seed: 29,
        };
        let scene = crate::phantom::make_scene(&spec).unwrap();
        let motion = MotionSpec {
            kind: MotionKind::UniformLateral,
            n_frames: 3,
            step_px: 2.0,
            compression_peak: 0.0,
            load_center: 0.0,
            load_width: 1.0,
            seed: 0,
        };
        let noise = NoiseSpec {
            sigma: 0.05,
            seed: 31,
        };
        let (frames, _) = crate::phantom::warp_scene_sequence(&scene, &spec, &motion, &noise)
            .unwrap();
        let half = std::f64::consts::PI / 5.0 / 2.0;
        let spectra: Vec<_> = frames
            .iter()
            .map(|f| synthesize_spectrum(f, 192, 7.854 - half, 7.854 + half).unwrap())
            .collect();
        let input = PipelineInput::Spectral(spectra);
        let cfg = PipelineConfig {
            preprocess: Preprocess::Isam(IsamConfig {
                focus_row: 48,
                ..IsamConfig::default()
            }),
            suppress_negative_delay: Some(4),
            flow: FlowConfig {
                pass_windows: vec![(32, 16), (16, 8)],
                ..FlowConfig::default()
            },
            ..PipelineConfig::default()
        };
        let report = run_pipeline(&input, &cfg, None).unwrap();
        assert_eq!(report.preprocessed.len(), 3);
        assert_eq!(report.preprocessed.rows(), 96);
        assert_eq!(report.denoised.len(), 3);
        // The recovered lateral motion should be near 2 px on valid pixels.
        let f = &report.final_fields[0];
        let mut acc = 0.0;
        let mut n = 0;
        for r in 24..72 {
            for c in 24..72 {
                if f.valid[[r, c]] {
                    acc += f.u_lateral[[r, c]];
                    n += 1;
                }
            }
        }
        let mean = acc / n as f64;
        assert!((mean - 2.0).abs() < 0.3, "mean lateral {mean}");
    }

    #[test]
    fn mismatched_truth_count_rejected() {
        let (input, truth) = phantom_input(1.0, 0.0, 4);
        let gt = GroundTruth {
            pairwise_fields: truth[..1].to_vec(),
            reference_image: None,
        };
        assert!(matches!(
            run_pipeline(&input, &small_cfg(), Some(&gt)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn stage_errors_are_tagged() {
        // Empty pass list breaks the flow stage.
        let (input, _) = phantom_input(0.0, 0.0, 2);
        let cfg = PipelineConfig {
            flow: FlowConfig {
                pass_windows: vec![],
                ..FlowConfig::default()
            },
            ..PipelineConfig::default()
        };
        match run_pipeline(&input, &cfg, None) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "flow-initial"),
            other => panic!("expected stage-tagged error, got {:?}", other.err()),
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (input, truth) = phantom_input(1.0, 0.05, 3);
        let cfg = small_cfg();
        let gt = GroundTruth {
            pairwise_fields: truth,
            reference_image: None,
        };
        let report = run_pipeline(&input, &cfg, Some(&gt)).unwrap();
        let csv = report.metrics_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "metric,value,frame_pair");
        assert!(csv.contains("displacement_rmse_lateral_initial"));
        assert!(csv.contains("pooled"));
    }
}
