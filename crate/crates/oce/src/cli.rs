//! Command-line interface: simulate | reconstruct | flow | denoise |
//! pipeline | metrics.
//!
//! All array data travels as `OCER` raster files (see [`crate::rasterfile`]);
//! geometry and algorithm parameters travel in plain-text configs. Exit
//! codes: 0 success, 1 usage error, 2 data/processing error.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, ArrayD, IxDyn};

use crate::config::Config;
use crate::denoise::{denoise_stack, SigmaMode};
use crate::error::{Error, Result};
use crate::flow::estimate_flow;
use crate::metrics::{metric_ncc, metric_rmse_field, metric_rmse_image};
use crate::phantom::{make_scene, synthesize_spectrum, warp_scene_sequence, NoiseSpec};
use crate::pipeline::{
    run_pipeline, GroundTruth, PipelineConfig, PipelineInput, Preprocess,
};
use crate::raster::{log_compress, DisplacementField, FrameStack, Image, SpectralFrame};
use crate::rasterfile::{read_raster, write_pgm, write_raster, RasterData};
use crate::recon::{isam_resample, reconstruct_ifft, suppress_negative_delay};

#[derive(Parser)]
#[command(
    name = "oce",
    about = "Motion-compensated denoising and displacement estimation for SD-OCT elastography",
    version
)]
struct Cli {
    /// Rayon thread count (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a phantom sequence: frames, spectra, ground-truth fields.
    Simulate(SimulateArgs),
    /// Reconstruct a B-scan from a spectral raster.
    Reconstruct(ReconstructArgs),
    /// Estimate the displacement field between two images.
    Flow(FlowArgs),
    /// Collaboratively denoise a frame stack raster.
    Denoise(DenoiseArgs),
    /// Run the full estimation → warp → denoise → re-estimation loop.
    Pipeline(PipelineArgs),
    /// Compute a metric between two rasters; prints CSV.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Plain-text key=value config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the scene/motion/noise seeds (seed, seed+1, seed+2).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    config: PathBuf,
    /// Input spectral raster (c64, n_k × n_x).
    #[arg(long)]
    input: PathBuf,
    /// Output raster (f64 log image, or c64 with --raw-complex).
    #[arg(long)]
    output: PathBuf,
    /// ISAM refocusing instead of plain IFFT.
    #[arg(long, overrides_with = "no_isam")]
    isam: bool,
    #[arg(long = "no-isam")]
    no_isam: bool,
    /// Zero negative delays, sparing this many guard rows.
    #[arg(long)]
    suppress_negative_delay: Option<usize>,
    /// Focus row override for ISAM.
    #[arg(long)]
    focus_row: Option<usize>,
    /// Write the complex image instead of the log-compressed magnitude.
    #[arg(long)]
    raw_complex: bool,
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference image raster (f64).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Moving image raster (f64).
    #[arg(long = "mov")]
    moving: PathBuf,
    /// Output prefix; writes <prefix>.axial/.lateral/.valid.ocer.
    #[arg(long)]
    out: PathBuf,
    /// Optional PGM quiver preview.
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input stack raster (f64, T × rows × cols).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Noise std, or `auto`.
    #[arg(long)]
    sigma: Option<String>,
    /// Disable the Wiener stage.
    #[arg(long)]
    no_wiener: bool,
    #[arg(long)]
    block: Option<usize>,
    /// Maximum group size K.
    #[arg(long)]
    group: Option<usize>,
    /// Search window radius in px.
    #[arg(long)]
    search: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Preprocessed image rasters (f64), in temporal order.
    #[arg(long, num_args = 2.., conflicts_with = "spectra")]
    frames: Vec<PathBuf>,
    /// Spectral rasters (c64), in temporal order.
    #[arg(long, num_args = 2..)]
    spectra: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth pairwise field prefix: <prefix>_{t}.axial/... for t in
    /// 0..n_frames−1.
    #[arg(long)]
    truth_prefix: Option<PathBuf>,
    /// Ground-truth image raster for the reference frame.
    #[arg(long)]
    truth_image: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// image-rmse | ncc | field-rmse.
    #[arg(long)]
    kind: String,
    /// Estimate raster (image path, or field prefix for field-rmse).
    #[arg(long)]
    est: PathBuf,
    /// Truth raster (image path, or field prefix).
    #[arg(long)]
    truth: PathBuf,
}

/// Entry point returning the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // Ignore failure: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Flow(a) => run_flow(a),
        Command::Denoise(a) => run_denoise(a),
        Command::Pipeline(a) => run_pipeline_cmd(a),
        Command::Metrics(a) => run_metrics(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

// --- raster adapters ---

fn image_pitches(cfg: &Config) -> Result<(f64, f64)> {
    Ok((
        cfg.get_f64("phantom.pitch_axial", 1.0)?,
        cfg.get_f64("phantom.pitch_lateral", 1.0)?,
    ))
}

fn load_image(path: &Path, pitches: (f64, f64)) -> Result<Image> {
    match read_raster(path)? {
        RasterData::F64(a) if a.ndim() == 2 => {
            let a = a.into_dimensionality::<ndarray::Ix2>().expect("checked");
            Image::new(a, pitches.0, pitches.1)
        }
        other => Err(Error::InvalidArgument(format!(
            "{}: expected a 2D f64 image raster, found dtype {} with {} dims",
            path.display(),
            other.dtype_code(),
            other.dims().len()
        ))),
    }
}

fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_raster(path, &RasterData::F64(img.data.clone().into_dyn()))
}

fn load_spectrum(path: &Path, cfg: &Config) -> Result<SpectralFrame> {
    let k_min = cfg.require_f64("recon.k_min")?;
    let k_max = cfg.require_f64("recon.k_max")?;
    let pitch_lateral = cfg.get_f64("phantom.pitch_lateral", 2.0)?;
    match read_raster(path)? {
        RasterData::C64(a) if a.ndim() == 2 => {
            let a = a.into_dimensionality::<ndarray::Ix2>().expect("checked");
            SpectralFrame::new(a, k_min, k_max, pitch_lateral)
        }
        other => Err(Error::InvalidArgument(format!(
            "{}: expected a 2D c64 spectral raster, found dtype {} with {} dims",
            path.display(),
            other.dtype_code(),
            other.dims().len()
        ))),
    }
}

fn field_paths(prefix: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with_ext = |ext: &str| {
        let mut s = prefix.as_os_str().to_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (
        with_ext(".axial.ocer"),
        with_ext(".lateral.ocer"),
        with_ext(".valid.ocer"),
    )
}

fn save_field(prefix: &Path, field: &DisplacementField) -> Result<()> {
    let (pa, pl, pv) = field_paths(prefix);
    write_raster(&pa, &RasterData::F64(field.u_axial.clone().into_dyn()))?;
    write_raster(&pl, &RasterData::F64(field.u_lateral.clone().into_dyn()))?;
    let mask = field.valid.mapv(|v| v as u8);
    write_raster(&pv, &RasterData::Mask(mask.into_dyn()))
}

fn load_field(prefix: &Path) -> Result<DisplacementField> {
    let (pa, pl, pv) = field_paths(prefix);
    let axial = match read_raster(&pa)? {
        RasterData::F64(a) if a.ndim() == 2 => {
            a.into_dimensionality::<ndarray::Ix2>().expect("checked")
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{}: expected 2D f64 plane",
                pa.display()
            )))
        }
    };
    let lateral = match read_raster(&pl)? {
        RasterData::F64(a) if a.ndim() == 2 => {
            a.into_dimensionality::<ndarray::Ix2>().expect("checked")
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{}: expected 2D f64 plane",
                pl.display()
            )))
        }
    };
    let valid = match read_raster(&pv)? {
        RasterData::Mask(a) if a.ndim() == 2 => a
            .into_dimensionality::<ndarray::Ix2>()
            .expect("checked")
            .mapv(|v| v != 0),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{}: expected 2D mask plane",
                pv.display()
            )))
        }
    };
    DisplacementField::new(axial, lateral, valid)
}

fn stack_to_raster(stack: &FrameStack) -> RasterData {
    let (t, rows, cols) = (stack.len(), stack.rows(), stack.cols());
    let mut a = ArrayD::zeros(IxDyn(&[t, rows, cols]));
    for (i, f) in stack.frames.iter().enumerate() {
        for ((r, c), &v) in f.data.indexed_iter() {
            a[[i, r, c]] = v;
        }
    }
    RasterData::F64(a)
}

fn raster_to_stack(data: RasterData, path: &Path, pitches: (f64, f64)) -> Result<FrameStack> {
    match data {
        RasterData::F64(a) if a.ndim() == 3 => {
            let dims = a.shape().to_vec();
            let mut frames = Vec::with_capacity(dims[0]);
            for t in 0..dims[0] {
                let img = Array2::from_shape_fn((dims[1], dims[2]), |(r, c)| a[[t, r, c]]);
                frames.push(Image::new(img, pitches.0, pitches.1)?);
            }
            FrameStack::new(frames)
        }
        other => Err(Error::InvalidArgument(format!(
            "{}: expected a 3D f64 stack raster, found dtype {} with {} dims",
            path.display(),
            other.dtype_code(),
            other.dims().len()
        ))),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// --- subcommands ---

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = Config::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("phantom.seed", seed);
        cfg.set("motion.seed", seed.wrapping_add(1));
        cfg.set("noise.seed", seed.wrapping_add(2));
    }
    ensure_dir(&args.out)?;
    let spec = cfg.phantom_spec()?;
    let motion = cfg.motion_spec()?;
    let noise = cfg.noise_spec()?;
    let floor_db = cfg.get_f64("recon.floor_db", crate::raster::DEFAULT_FLOOR_DB)?;
    let n_k = cfg.get_usize("recon.n_k", 2 * spec.rows)?;
    if n_k != 2 * spec.rows {
        return Err(Error::InvalidArgument(format!(
            "recon.n_k must be 2 × phantom.rows so reconstruction recovers the raster \
             (got {n_k} for {} rows)",
            spec.rows
        )));
    }
    let k_min = cfg.get_f64("recon.k_min", 7.5398)?;
    let k_max = cfg.get_f64("recon.k_max", 8.1681)?;

    let scene = make_scene(&spec)?;
    let (frames, truth) = warp_scene_sequence(&scene, &spec, &motion, &noise)?;

    for (t, frame) in frames.iter().enumerate() {
        let spectrum = synthesize_spectrum(frame, n_k, k_min, k_max)?;
        write_raster(
            &args.out.join(format!("spectrum_{t}.ocer")),
            &RasterData::C64(spectrum.data.into_dyn()),
        )?;
        let img = log_compress(frame, floor_db)?;
        save_image(&args.out.join(format!("frame_{t}.ocer")), &img)?;
    }
    for (t, field) in truth.iter().enumerate() {
        save_field(&args.out.join(format!("truth_{t}")), field)?;
    }

    // Ground-truth image at the reference frame: a many-draw frame average,
    // as OCT validation ground truths are acquired.
    if noise.sigma > 0.0 {
        let draws = cfg.get_usize("metrics.gt_draws", 20)?;
        let reference = cfg.get_usize("pipeline.reference_index", 0)?;
        let mut acc = Array2::<f64>::zeros((spec.rows, spec.cols));
        for d in 0..draws {
            let alt = NoiseSpec {
                sigma: noise.sigma,
                seed: noise.seed.wrapping_add(1000 + d as u64),
            };
            let (draw_frames, _) = warp_scene_sequence(&scene, &spec, &motion, &alt)?;
            let img = log_compress(&draw_frames[reference], floor_db)?;
            acc = &acc + &img.data;
        }
        acc /= draws as f64;
        let gt = Image::new(acc, spec.pitch_axial, spec.pitch_lateral)?;
        save_image(&args.out.join("gt_image.ocer"), &gt)?;
    }

    std::fs::write(args.out.join("config.txt"), cfg.to_text()).map_err(|source| Error::Io {
        path: args.out.join("config.txt"),
        source,
    })?;
    println!(
        "simulated {} frames of {}×{} into {}",
        motion.n_frames,
        spec.rows,
        spec.cols,
        args.out.display()
    );
    Ok(())
}

fn run_reconstruct(args: ReconstructArgs) -> Result<()> {
    let cfg = Config::from_file(&args.config)?;
    let mut frame = load_spectrum(&args.input, &cfg)?;
    let guard = args
        .suppress_negative_delay
        .or(match cfg.get("recon.suppress_negative_delay") {
            Some(raw) => Some(raw.parse().map_err(|_| {
                Error::InvalidArgument("bad recon.suppress_negative_delay".into())
            })?),
            None => None,
        });
    if let Some(guard) = guard {
        frame = suppress_negative_delay(&frame, guard)?;
    }
    let use_isam = if args.no_isam {
        false
    } else if args.isam {
        true
    } else {
        cfg.get_bool("recon.isam", false)?
    };
    let complex = if use_isam {
        let mut isam_cfg = cfg.isam_config()?;
        if let Some(row) = args.focus_row {
            isam_cfg.focus_row = row;
        }
        isam_resample(&frame, &isam_cfg)?
    } else {
        reconstruct_ifft(&frame)?
    };
    if args.raw_complex {
        write_raster(&args.output, &RasterData::C64(complex.data.into_dyn()))?;
    } else {
        let floor_db = cfg.get_f64("recon.floor_db", crate::raster::DEFAULT_FLOOR_DB)?;
        save_image(&args.output, &log_compress(&complex, floor_db)?)?;
    }
    Ok(())
}

fn run_flow(args: FlowArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    let pitches = image_pitches(&cfg)?;
    let reference = load_image(&args.reference, pitches)?;
    let moving = load_image(&args.moving, pitches)?;
    let flow_cfg = cfg.flow_config()?;
    let field = estimate_flow(&reference, &moving, &flow_cfg)?;
    save_field(&args.out, &field)?;
    if let Some(preview) = &args.preview {
        write_pgm(preview, &quiver_preview(&reference, &field))?;
    }
    Ok(())
}

/// Displacement preview: the reference image dimmed, with displacement
/// vectors drawn as bright line segments on a coarse grid.
fn quiver_preview(background: &Image, field: &DisplacementField) -> Image {
    let (rows, cols) = background.data.dim();
    let mut canvas = background.data.mapv(|v| 0.5 * v.clamp(0.0, 1.0));
    let step = (rows.min(cols) / 16).max(8);
    let scale = 4.0;
    for r in (step / 2..rows).step_by(step) {
        for c in (step / 2..cols).step_by(step) {
            if !field.valid[[r, c]] {
                continue;
            }
            let dz = field.u_axial[[r, c]] * scale;
            let dx = field.u_lateral[[r, c]] * scale;
            draw_line(
                &mut canvas,
                (r as f64, c as f64),
                (r as f64 + dz, c as f64 + dx),
            );
        }
    }
    Image::new(canvas, background.pitch_axial, background.pitch_lateral)
        .expect("preview canvas is finite")
}

fn draw_line(canvas: &mut Array2<f64>, from: (f64, f64), to: (f64, f64)) {
    let (rows, cols) = canvas.dim();
    let n = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let r = from.0 + t * (to.0 - from.0);
        let c = from.1 + t * (to.1 - from.1);
        if r >= 0.0 && c >= 0.0 && (r as usize) < rows && (c as usize) < cols {
            canvas[[r as usize, c as usize]] = 1.0;
        }
    }
}

fn run_denoise(args: DenoiseArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    let pitches = image_pitches(&cfg)?;
    let stack = raster_to_stack(read_raster(&args.input)?, &args.input, pitches)?;
    let mut den_cfg = cfg.denoise_config()?;
    if let Some(sigma) = &args.sigma {
        den_cfg.sigma = if sigma == "auto" {
            SigmaMode::Auto
        } else {
            SigmaMode::Fixed(sigma.parse().map_err(|_| {
                Error::InvalidArgument(format!("--sigma expects `auto` or a number, got {sigma}"))
            })?)
        };
    }
    if args.no_wiener {
        den_cfg.wiener_stage = false;
    }
    if let Some(block) = args.block {
        den_cfg.block = block;
    }
    if let Some(group) = args.group {
        den_cfg.max_group = group;
    }
    if let Some(search) = args.search {
        den_cfg.search_window = search;
    }
    if let Some(step) = args.step {
        den_cfg.step = step;
    }
    den_cfg.validate()?;
    let out = denoise_stack(&stack, None, &den_cfg)?;
    write_raster(&args.output, &stack_to_raster(&out))
}

fn run_pipeline_cmd(args: PipelineArgs) -> Result<()> {
    let cfg = Config::from_file(&args.config)?;
    ensure_dir(&args.out)?;
    let pitches = image_pitches(&cfg)?;

    let input = if !args.frames.is_empty() {
        let frames = args
            .frames
            .iter()
            .map(|p| load_image(p, pitches))
            .collect::<Result<Vec<_>>>()?;
        PipelineInput::Images(frames)
    } else if !args.spectra.is_empty() {
        let spectra = args
            .spectra
            .iter()
            .map(|p| load_spectrum(p, &cfg))
            .collect::<Result<Vec<_>>>()?;
        PipelineInput::Spectral(spectra)
    } else {
        return Err(Error::InvalidArgument(
            "pipeline needs --frames or --spectra".into(),
        ));
    };

    let preprocess = if cfg.get_bool("recon.isam", false)? {
        Preprocess::Isam(cfg.isam_config()?)
    } else {
        Preprocess::Ifft
    };
    let suppress = match cfg.get("recon.suppress_negative_delay") {
        Some(raw) => Some(raw.parse().map_err(|_| {
            Error::InvalidArgument("bad recon.suppress_negative_delay".into())
        })?),
        None => None,
    };
    let pipe_cfg = PipelineConfig {
        preprocess,
        suppress_negative_delay: suppress,
        floor_db: cfg.get_f64("recon.floor_db", crate::raster::DEFAULT_FLOOR_DB)?,
        flow: cfg.flow_config()?,
        denoise: cfg.denoise_config()?,
        iterations: cfg.get_usize("pipeline.iterations", 1)?,
        reference_index: cfg.get_usize("pipeline.reference_index", 0)?,
    };

    let ground_truth = match (&args.truth_prefix, &args.truth_image) {
        (None, None) => None,
        (prefix, image) => {
            let pairwise_fields = match prefix {
                Some(prefix) => {
                    let mut fields = Vec::new();
                    for t in 0.. {
                        let p = PathBuf::from(format!("{}_{t}", prefix.display()));
                        let (pa, _, _) = field_paths(&p);
                        if !pa.exists() {
                            break;
                        }
                        fields.push(load_field(&p)?);
                    }
                    if fields.is_empty() {
                        return Err(Error::InvalidArgument(format!(
                            "no truth fields found at prefix {}",
                            prefix.display()
                        )));
                    }
                    fields
                }
                None => Vec::new(),
            };
            let reference_image = match image {
                Some(p) => Some(load_image(p, pitches)?),
                None => None,
            };
            Some(GroundTruth {
                pairwise_fields,
                reference_image,
            })
        }
    };

    let report = run_pipeline(&input, &pipe_cfg, ground_truth.as_ref())?;

    std::fs::write(args.out.join("report.csv"), report.metrics_csv()).map_err(|source| {
        Error::Io {
            path: args.out.join("report.csv"),
            source,
        }
    })?;
    for (t, frame) in report.denoised.frames.iter().enumerate() {
        save_image(&args.out.join(format!("denoised_{t}.ocer")), frame)?;
    }
    for (i, field) in report.initial_fields.iter().enumerate() {
        save_field(&args.out.join(format!("field_initial_{i}")), field)?;
    }
    for (i, field) in report.final_fields.iter().enumerate() {
        save_field(&args.out.join(format!("field_final_{i}")), field)?;
    }
    for (stage, seconds) in &report.stage_runtimes {
        log::info!("{stage}: {seconds:.3} s");
    }
    println!("{}", report.metrics_csv().trim_end());
    Ok(())
}

fn run_metrics(args: MetricsArgs) -> Result<()> {
    let mut out = String::from("metric,value,frame_pair\n");
    match args.kind.as_str() {
        "image-rmse" => {
            let est = load_image(&args.est, (1.0, 1.0))?;
            let truth = load_image(&args.truth, (1.0, 1.0))?;
            let v = metric_rmse_image(&est, &truth, None)?;
            out.push_str(&format!("image_rmse,{v},-\n"));
        }
        "ncc" => {
            let est = load_image(&args.est, (1.0, 1.0))?;
            let truth = load_image(&args.truth, (1.0, 1.0))?;
            let v = metric_ncc(&est, &truth)?;
            out.push_str(&format!("image_ncc,{v},-\n"));
        }
        "field-rmse" => {
            let est = load_field(&args.est)?;
            let truth = load_field(&args.truth)?;
            let (lat, ax) = metric_rmse_field(&est, &truth)?;
            out.push_str(&format!("displacement_rmse_lateral,{lat},-\n"));
            out.push_str(&format!("displacement_rmse_axial,{ax},-\n"));
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown metric kind `{other}` (image-rmse | ncc | field-rmse)"
            )))
        }
    }
    print!("{out}");
    Ok(())
}
