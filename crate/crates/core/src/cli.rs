//! `sfmatch` command line: match a frame, generate synthetic frames, benchmark
//! the matchers, inspect a calibration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use nalgebra::Point2;

use crate::calib::{derive_calibration, CalibrationSet};
use crate::eval::{bench_phases, format_records, format_report, Workload};
use crate::frustum::MatchConfig;
use crate::kitti_io::{self, FrameBytes, View};
use crate::matcher::{run_matcher, segment_scene, Algorithm, StereoFrame};
use crate::synth::{self, files, generate_scene, SceneParams};

#[derive(Debug, Parser)]
#[command(name = "sfmatch", version, about = "Stereo RoI matching and LiDAR frustum segmentation")]
pub struct Cli {
    /// Worker threads; 0 uses every core. Output does not depend on this.
    #[arg(long, short = 'j', global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match the RoIs of one frame and write matches and segments.
    Match(MatchArgs),
    /// Generate a synthetic frame directory with ground-truth pairs.
    Synth(SynthArgs),
    /// Time each pipeline phase per algorithm.
    Bench(BenchArgs),
    /// Print intrinsics, stereo translation, F and an epipolar self-check.
    CalibInfo {
        /// KITTI calibration file.
        calib: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ThresholdArgs {
    /// Relative box enlargement before frustum extraction.
    #[arg(long, default_value_t = 0.08)]
    pub s_enlarge: f64,
    /// Minimum stereo-frustum intersection size.
    #[arg(long, default_value_t = 5)]
    pub n_thres: usize,
    /// Maximum distance (px) from a right RoI center to the epipolar line.
    #[arg(long, default_value_t = 30.0)]
    pub d_thres: f64,
    /// Minimum NCC for rsc/rsccc.
    #[arg(long, default_value_t = 0.4)]
    pub p_thres: f64,
    /// Minimum 3D IoU for 3dces/3dcme.
    #[arg(long = "p3d-thres", default_value_t = 0.5)]
    pub p_3d_thres: f64,
    /// Allowed rightward offset (px) of a right RoI center.
    #[arg(long, default_value_t = 5.0)]
    pub disparity_margin: f64,
    /// Side length of aligned NCC patches.
    #[arg(long, default_value_t = 64)]
    pub align_size: usize,
}

impl ThresholdArgs {
    pub fn to_config(&self) -> MatchConfig {
        MatchConfig {
            s_enlarge: self.s_enlarge,
            n_thres: self.n_thres,
            d_thres: self.d_thres,
            p_thres: self.p_thres,
            p_3d_thres: self.p_3d_thres,
            disparity_margin: self.disparity_margin,
            align_size: self.align_size,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Frame directory holding calib.txt, velodyne.bin, left.txt, right.txt
    /// and optionally left.png/right.png. Relative paths resolve against
    /// the data root.
    #[arg(long)]
    pub frame: Option<PathBuf>,
    /// Base directory for relative input paths.
    #[arg(long, env = "SFMATCH_DATA_ROOT", default_value = ".")]
    pub data_root: PathBuf,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub velodyne: Option<PathBuf>,
    #[arg(long)]
    pub left_detections: Option<PathBuf>,
    #[arg(long)]
    pub right_detections: Option<PathBuf>,
    #[arg(long)]
    pub left_image: Option<PathBuf>,
    #[arg(long)]
    pub right_image: Option<PathBuf>,
    /// Image size WIDTHxHEIGHT used for clipping when no images are given.
    #[arg(long, default_value = "1242x375", value_parser = parse_size)]
    pub image_size: (u32, u32),
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    #[arg(long, short, default_value = "3dces", value_parser = parse_algorithm)]
    pub algorithm: Algorithm,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    /// Matches file; stdout when omitted.
    #[arg(long)]
    pub matches_out: Option<PathBuf>,
    #[arg(long)]
    pub segments_out: Option<PathBuf>,
    /// Debug PNG: right image with RoIs and left-center epipolar lines.
    #[arg(long)]
    pub dump_overlay: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 0.54)]
    pub baseline: f64,
    #[arg(long, default_value_t = 8.0)]
    pub depth_min: f64,
    #[arg(long, default_value_t = 40.0)]
    pub depth_max: f64,
    #[arg(long, default_value_t = 300)]
    pub points_per_object: usize,
    #[arg(long, default_value_t = 2000)]
    pub clutter: usize,
    /// Uniform box jitter in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Objects without a right-view detection.
    #[arg(long, default_value_t = 0)]
    pub missing_right: usize,
    #[arg(long)]
    pub no_images: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Frame directories to time. When empty, a synthetic workload is generated.
    pub frames: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "3dces,3dcme,rsc,rsccc", value_parser = parse_algorithm)]
    pub algorithms: Vec<Algorithm>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    #[arg(long, default_value_t = 15)]
    pub rois: usize,
    #[arg(long, default_value_t = 100_000)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long, env = "SFMATCH_DATA_ROOT", default_value = ".")]
    pub data_root: PathBuf,
    /// Text report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV records for plotting.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::from_name(s).ok_or_else(|| format!("unknown algorithm `{s}` (expected 3dces, 3dcme, rsc or rsccc)"))
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v}: {e}"));
    let (w, h) = (p(w)?, p(h)?);
    if w == 0 || h == 0 {
        return Err("image size must be nonzero".into());
    }
    Ok((w, h))
}

/// Resolved inputs and settings of one `match` run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub config: MatchConfig,
    pub calib: PathBuf,
    pub velodyne: PathBuf,
    pub left_detections: PathBuf,
    pub right_detections: PathBuf,
    pub images: Option<(PathBuf, PathBuf)>,
    pub image_size: (u32, u32),
    pub matches_out: Option<PathBuf>,
    pub segments_out: Option<PathBuf>,
    pub dump_overlay: Option<PathBuf>,
}

impl InputArgs {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root.join(p)
        }
    }

    fn pick(&self, explicit: &Option<PathBuf>, frame_file: &str, what: &str) -> anyhow::Result<PathBuf> {
        match (explicit, &self.frame) {
            (Some(p), _) => Ok(self.resolve(p)),
            (None, Some(dir)) => Ok(self.resolve(dir).join(frame_file)),
            (None, None) => bail!(crate::Error::Usage(format!("no {what} given (use --frame or --{what})"))),
        }
    }

    /// Explicit image paths win; a frame directory contributes its images
    /// only when both files exist.
    fn images(&self) -> Option<(PathBuf, PathBuf)> {
        match (&self.left_image, &self.right_image, &self.frame) {
            (Some(l), Some(r), _) => Some((self.resolve(l), self.resolve(r))),
            (None, None, Some(dir)) => {
                let dir = self.resolve(dir);
                let (l, r) = (dir.join(files::LEFT_IMAGE), dir.join(files::RIGHT_IMAGE));
                (l.is_file() && r.is_file()).then_some((l, r))
            }
            _ => None,
        }
    }
}

impl MatchArgs {
    pub fn run_config(&self) -> anyhow::Result<RunConfig> {
        let i = &self.inputs;
        let config = self.thresholds.to_config();
        config.validate()?;
        if i.left_image.is_some() != i.right_image.is_some() {
            bail!(crate::Error::Usage("give both --left-image and --right-image".into()));
        }
        Ok(RunConfig {
            algorithm: self.algorithm,
            config,
            calib: i.pick(&i.calib, files::CALIB, "calib")?,
            velodyne: i.pick(&i.velodyne, files::VELODYNE, "velodyne")?,
            left_detections: i.pick(&i.left_detections, files::LEFT_DETECTIONS, "left-detections")?,
            right_detections: i.pick(&i.right_detections, files::RIGHT_DETECTIONS, "right-detections")?,
            images: i.images(),
            image_size: i.image_size,
            matches_out: self.matches_out.clone(),
            segments_out: self.segments_out.clone(),
            dump_overlay: self.dump_overlay.clone(),
        })
    }
}

fn read_text(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

fn read_bytes(p: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(p).with_context(|| format!("cannot read {}", p.display()))
}

/// Reads and decodes every input file, attaching the path to any error.
fn load_frame(rc: &RunConfig, with_images: bool) -> anyhow::Result<kitti_io::Frame> {
    let calib_text = read_text(&rc.calib)?;
    let calib = kitti_io::parse_calibration(&calib_text).with_context(|| rc.calib.display().to_string())?;
    let cloud = kitti_io::read_velodyne(&read_bytes(&rc.velodyne)?).with_context(|| rc.velodyne.display().to_string())?;
    let left_detections = kitti_io::read_detections(&read_text(&rc.left_detections)?, View::Left)
        .with_context(|| rc.left_detections.display().to_string())?;
    let right_detections = kitti_io::read_detections(&read_text(&rc.right_detections)?, View::Right)
        .with_context(|| rc.right_detections.display().to_string())?;
    let images = match (&rc.images, with_images) {
        (Some((l, r)), true) => {
            let dl = kitti_io::decode_gray_png(&read_bytes(l)?).with_context(|| l.display().to_string())?;
            let dr = kitti_io::decode_gray_png(&read_bytes(r)?).with_context(|| r.display().to_string())?;
            Some((dl, dr))
        }
        _ => None,
    };
    let image_size = images.as_ref().map_or(rc.image_size, |(l, _)| l.dimensions());
    Ok(kitti_io::Frame {
        calib,
        cloud,
        left_detections,
        right_detections,
        images,
        image_size,
    })
}

fn write_output(path: &Option<PathBuf>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display())),
        None => std::io::stdout().write_all(bytes).context("cannot write to stdout"),
    }
}

pub fn cmd_match(rc: &RunConfig) -> anyhow::Result<()> {
    if rc.algorithm.needs_images() && rc.images.is_none() {
        bail!(crate::Error::Usage(format!(
            "{} needs --left-image and --right-image (or a frame directory with left.png/right.png)",
            rc.algorithm
        )));
    }
    let need_images = rc.algorithm.needs_images() || rc.dump_overlay.is_some();
    let frame = load_frame(rc, need_images)?;
    let calib = derive_calibration(&frame.calib).with_context(|| rc.calib.display().to_string())?;
    let overlay_base = if rc.dump_overlay.is_some() {
        frame.images.as_ref().map(|(_, r)| r.clone())
    } else {
        None
    };
    let stereo = StereoFrame::prepare(
        calib,
        &frame.cloud,
        &frame.left_detections,
        &frame.right_detections,
        frame.images,
        &rc.config,
        frame.image_size,
    )?;
    let matches = run_matcher(rc.algorithm, &stereo, &rc.config)?;
    log::info!("{}: {} matches", rc.algorithm, matches.len());

    let mut buf = Vec::new();
    kitti_io::write_matches(&matches, &mut buf)?;
    write_output(&rc.matches_out, &buf)?;

    if let Some(path) = &rc.segments_out {
        let segments = segment_scene(&matches, &stereo)?;
        let mut buf = Vec::new();
        kitti_io::write_segments(&segments, &frame.cloud, &mut buf)?;
        fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = &rc.dump_overlay {
        let overlay = draw_overlay(&stereo, overlay_base.as_ref(), frame.image_size);
        let png = {
            let mut c = std::io::Cursor::new(Vec::new());
            overlay.write_to(&mut c, image::ImageFormat::Png)?;
            c.into_inner()
        };
        fs::write(path, png).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

/// Right view (or a black canvas) with right RoIs in green and the
/// epipolar line of every left RoI center in red.
fn draw_overlay(stereo: &StereoFrame, right: Option<&image::GrayImage>, size: (u32, u32)) -> RgbImage {
    let mut img = match right {
        Some(g) => RgbImage::from_fn(g.width(), g.height(), |x, y| {
            let v = g.get_pixel(x, y).0[0];
            Rgb([v, v, v])
        }),
        None => RgbImage::new(size.0, size.1),
    };
    let (w, h) = (img.width() as i64, img.height() as i64);
    let put = |img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
        }
    };
    for b in &stereo.left_boxes {
        let Ok(line) = stereo.calib.epipolar_line_l2r(b.center) else {
            continue;
        };
        let red = Rgb([255, 0, 0]);
        if line.b.abs() >= line.a.abs() {
            for x in 0..w {
                let y = -(line.a * x as f64 + line.c) / line.b;
                put(&mut img, x, y.round() as i64, red);
            }
        } else {
            for y in 0..h {
                let x = -(line.b * y as f64 + line.c) / line.a;
                put(&mut img, x.round() as i64, y, red);
            }
        }
    }
    for b in &stereo.right_boxes {
        let [x1, y1, x2, y2] = b.extent().map(|v| v.round() as i64);
        let green = Rgb([0, 255, 0]);
        for x in x1..=x2 {
            put(&mut img, x, y1, green);
            put(&mut img, x, y2, green);
        }
        for y in y1..=y2 {
            put(&mut img, x1, y, green);
            put(&mut img, x2, y, green);
        }
    }
    img
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let params = SceneParams {
        n_objects: args.objects,
        depth_range: (args.depth_min, args.depth_max),
        baseline: args.baseline,
        points_per_object: args.points_per_object,
        clutter_points: args.clutter,
        bbox_noise_px: args.noise,
        missing_right: args.missing_right,
        render_images: !args.no_images,
        seed: args.seed,
        ..SceneParams::default()
    };
    let scene = generate_scene(&params)?;
    synth::write_scene(&scene, &args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    log::info!(
        "wrote {} objects, {} points to {}",
        scene.objects.len(),
        scene.cloud.len(),
        args.out.display()
    );
    Ok(())
}

/// Parameters of the synthetic benchmark workload: `rois` objects per view
/// and `points` LiDAR returns per scene, 30% of them on object surfaces.
pub fn bench_scene_params(rois: usize, points: usize, seed: u64) -> SceneParams {
    let on_objects = if rois == 0 { 0 } else { points * 3 / 10 / rois };
    SceneParams {
        n_objects: rois,
        depth_range: (8.0, 60.0),
        points_per_object: on_objects,
        clutter_points: points - on_objects * rois,
        max_overlap: 0.1,
        seed,
        ..SceneParams::default()
    }
}

pub fn synthetic_workload(scenes: usize, rois: usize, points: usize, seed: u64, config: MatchConfig) -> anyhow::Result<Workload> {
    let frames = (0..scenes as u64)
        .map(|k| -> anyhow::Result<FrameBytes> {
            let scene = generate_scene(&bench_scene_params(rois, points, seed.wrapping_add(k)))?;
            Ok(synth::frame_bytes(&scene)?)
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(Workload { frames, config })
}

fn frame_bytes_from_dir(dir: &Path) -> anyhow::Result<FrameBytes> {
    let (l, r) = (dir.join(files::LEFT_IMAGE), dir.join(files::RIGHT_IMAGE));
    let images = if l.is_file() && r.is_file() {
        Some((read_bytes(&l)?, read_bytes(&r)?))
    } else {
        None
    };
    Ok(FrameBytes {
        calib: read_text(&dir.join(files::CALIB))?,
        velodyne: read_bytes(&dir.join(files::VELODYNE))?,
        left_detections: read_text(&dir.join(files::LEFT_DETECTIONS))?,
        right_detections: read_text(&dir.join(files::RIGHT_DETECTIONS))?,
        images,
        image_size: (1242, 375),
    })
}

pub fn cmd_bench(args: &BenchArgs) -> anyhow::Result<()> {
    let config = args.thresholds.to_config();
    config.validate()?;
    let workload = if args.frames.is_empty() {
        synthetic_workload(args.scenes, args.rois, args.points, args.seed, config)?
    } else {
        let frames = args
            .frames
            .iter()
            .map(|d| frame_bytes_from_dir(&args.data_root.join(d)))
            .collect::<anyhow::Result<_>>()?;
        Workload { frames, config }
    };
    if args.algorithms.iter().any(|a| a.needs_images()) && workload.frames.iter().any(|f| f.images.is_none()) {
        bail!(crate::Error::Usage("rsc/rsccc benchmarks need images in every frame".into()));
    }
    let results = bench_phases(&workload, &args.algorithms, args.repetitions)?;
    write_output(&args.report, format_report(&results).as_bytes())?;
    if let Some(p) = &args.records {
        fs::write(p, format_records(&results)).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

/// Max epipolar residual over a grid of depths and pixels, for `calib-info`.
fn self_check(c: &CalibrationSet) -> f64 {
    let mut worst: f64 = 0.0;
    for &z in &[2.0, 5.0, 10.0, 20.0, 50.0] {
        for u in (100..1200).step_by(100) {
            for v in (50..350).step_by(50) {
                // back-project a left pixel at depth z, then project to the right view
                let k_inv = c.k_c2.try_inverse().expect("validated intrinsics");
                let ray = k_inv * nalgebra::Vector3::new(u as f64, v as f64, 1.0);
                let x_rect = ray * z;
                let (l, r) = (c.project_rect(&x_rect, View::Left), c.project_rect(&x_rect, View::Right));
                if !(l.valid && r.valid) {
                    continue;
                }
                if let Ok(line) = c.epipolar_line_l2r(Point2::new(l.u, l.v)) {
                    worst = worst.max(line.distance(Point2::new(r.u, r.v)));
                }
            }
        }
    }
    worst
}

pub fn cmd_calib_info(path: &Path) -> anyhow::Result<String> {
    let raw = kitti_io::parse_calibration(&read_text(path)?).with_context(|| path.display().to_string())?;
    let c = derive_calibration(&raw).with_context(|| path.display().to_string())?;
    let m3 = |m: &nalgebra::Matrix3<f64>| {
        (0..3)
            .map(|r| format!("  {:>14.6e} {:>14.6e} {:>14.6e}\n", m[(r, 0)], m[(r, 1)], m[(r, 2)]))
            .collect::<String>()
    };
    let t = c.t_c2_c3;
    Ok(format!(
        "K2:\n{}K3:\n{}t_c2_c3: {:.6e} {:.6e} {:.6e}\nbaseline: {:.4} m\nF (max-abs normalized):\n{}rank-2 ratio: {:.3e}\nepipolar self-check max residual: {:.3e} px\n",
        m3(&c.k_c2),
        m3(&c.k_c3),
        t.x,
        t.y,
        t.z,
        c.baseline(),
        m3(&c.f_mat),
        c.rank2_ratio(),
        self_check(&c)
    ))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build()?;
    pool.install(|| match &cli.command {
        Command::Match(args) => cmd_match(&args.run_config()?),
        Command::Synth(args) => cmd_synth(args),
        Command::Bench(args) => cmd_bench(args),
        Command::CalibInfo { calib } => {
            let text = cmd_calib_info(&data_path(calib))?;
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    })
}

fn data_path(p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        return p.to_path_buf();
    }
    match std::env::var_os("SFMATCH_DATA_ROOT") {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

/// Exit status for an error: 2 for usage problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if matches!(err.downcast_ref::<crate::Error>(), Some(crate::Error::Usage(_))) {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let cli = Cli::try_parse_from(["sfmatch", "match", "--frame", "x"]).unwrap();
        let Command::Match(m) = cli.command else { panic!() };
        assert_eq!(m.thresholds.to_config(), MatchConfig::default());
        assert_eq!(m.algorithm, Algorithm::IouEpipolar);
    }

    #[test]
    fn size_and_algorithm_parsing() {
        assert_eq!(parse_size("1242x375"), Ok((1242, 375)));
        assert!(parse_size("0x5").is_err());
        assert!(parse_size("12").is_err());
        assert_eq!(parse_algorithm("RSCCC"), Ok(Algorithm::SimilarityChecked));
        assert!(parse_algorithm("sgm").is_err());
    }

    #[test]
    fn frame_directory_fills_paths() {
        let cli = Cli::try_parse_from(["sfmatch", "match", "--frame", "f", "--data-root", "/d", "--calib", "/c.txt"]).unwrap();
        let Command::Match(m) = cli.command else { panic!() };
        let rc = m.run_config().unwrap();
        assert_eq!(rc.calib, PathBuf::from("/c.txt"));
        assert_eq!(rc.velodyne, PathBuf::from("/d/f/velodyne.bin"));
        assert!(rc.images.is_none());
    }

    #[test]
    fn bench_params_hit_point_budget() {
        let p = bench_scene_params(15, 100_000, 0);
        assert_eq!(p.points_per_object * 15 + p.clutter_points, 100_000);
    }
}
