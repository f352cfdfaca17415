//! `scrforge` command-line front end.
//!
//! Each subcommand wraps one pipeline stage of `scrforge-core`. Exit codes:
//! 0 on success, 1 on domain errors (bad files, failed estimation, empty
//! inputs), 2 on usage errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use scrforge_core::eval::{aggregate, markdown_table, EvalError, PercentilePolicy, PoseError};
use scrforge_core::histmatch;
use scrforge_core::manifest::{self, DatasetManifest, FrameRecord, PoseRecord};
use scrforge_core::pnp::{grid_correspondences, pnp_ransac, sample_correspondences, PoseEstimate, RansacConfig};
use scrforge_core::pointcloud::{load_ply, SpatialIndex};
use scrforge_core::registration::{icp, umeyama_rigid};
use scrforge_core::renderer::render_dataset;
use scrforge_core::scm::SceneCoordMap;
use scrforge_core::toy::run_e2e_toy;
use scrforge_core::{CameraIntrinsics, RigidTransform, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod config;

pub use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    fn parse(path: &Path, msg: impl ToString) -> Self {
        Self::Parse { path: path.to_path_buf(), msg: msg.to_string() }
    }

    fn domain(e: impl ToString) -> Self {
        Self::Domain(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scrforge", version, about = "Scene-coordinate data generation and pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a labeled dataset from a colored point cloud.
    Render(RenderArgs),
    /// Match rendered image colors to a photo set.
    Histmatch(HistmatchArgs),
    /// Estimate camera poses from scene-coordinate maps.
    Solve(SolveArgs),
    /// Rigidly align two point clouds (ICP) or two marker lists.
    Align(AlignArgs),
    /// Compare estimated poses against ground truth.
    Eval(EvalArgs),
    /// Run the oracle pipeline on a procedural room.
    E2eToy(ToyArgs),
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HistmatchArgs {
    /// Manifest of rendered frames to recolor.
    #[arg(long)]
    source: PathBuf,
    /// Manifest of target photos.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use each image's own CDF instead of the pooled source CDF.
    #[arg(long)]
    per_image: bool,
    /// Also write the pooled target CDF as JSON.
    #[arg(long)]
    cdf_out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// A single SCM1 map (full resolution or a stride grid).
    #[arg(long, conflicts_with = "manifest", requires = "intrinsics")]
    scmap: Option<PathBuf>,
    /// Camera intrinsics JSON for `--scmap`.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Frame id echoed into the output record.
    #[arg(long, requires = "scmap")]
    id: Option<String>,
    /// Solve every frame of a manifest; writes one JSON line per frame.
    #[arg(long, required_unless_present = "scmap")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// Source cloud (.ply) or marker list (.json, array of [x, y, z]).
    #[arg(long)]
    src: PathBuf,
    /// Destination cloud or marker list, same kind as `--src`.
    #[arg(long)]
    dst: PathBuf,
    /// Initial transform JSON `{q, t}` for ICP.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Exclude,
    Penalize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Estimates, one JSON line `{id, q, t, inliers, rms, valid}` per frame.
    #[arg(long)]
    est: PathBuf,
    /// Report JSON path; without it the report is printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Markdown table path.
    #[arg(long)]
    markdown: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exclude")]
    policy: PolicyArg,
    #[arg(long, default_value = "scrforge")]
    method: String,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of test frames.
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Pose estimate as written by `solve` and read by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub inliers: usize,
    /// Inlier reprojection RMS in pixels; null when undefined.
    pub rms: Option<f64>,
    pub valid: bool,
}

impl EstimateRecord {
    pub fn new(id: Option<String>, est: &PoseEstimate) -> Self {
        let pose = PoseRecord::from(&est.pose);
        Self {
            id,
            q: pose.q,
            t: pose.t,
            inliers: est.inlier_count,
            rms: est.rms.is_finite().then_some(est.rms),
            valid: est.valid,
        }
    }

    pub fn transform(&self) -> Result<RigidTransform, String> {
        PoseRecord { q: self.q, t: self.t }.to_transform()
    }
}

/// Transform written by `align`; maps source coordinates into the
/// destination frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub rms: f64,
    pub iterations: usize,
    pub method: String,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                return 2;
            }
            return 0;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            }
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Render(a) => render(a),
        Command::Histmatch(a) => histmatch(a),
        Command::Solve(a) => solve(a),
        Command::Align(a) => align(a),
        Command::Eval(a) => eval(a),
        Command::E2eToy(a) => e2e_toy(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    DatasetManifest::load(path).map_err(|e| CliError::parse(path, e))
}

fn render(a: RenderArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let cloud = load_ply(&a.cloud).map_err(|e| CliError::parse(&a.cloud, e))?;
    let mut sampler = cfg.render.sampler;
    if let Some(seed) = a.seed {
        sampler.seed = seed;
    }
    let out = render_dataset(&cloud, &sampler, &cfg.render.intrinsics, &cfg.render.splat, a.n, &a.out)
        .map_err(CliError::domain)?;
    println!("wrote {} frames to {}", a.n, out.manifest.display());
    Ok(())
}

fn load_rgb(path: &Path) -> Result<image::RgbImage, CliError> {
    Ok(image::open(path).map_err(|e| CliError::parse(path, e))?.to_rgb8())
}

fn histmatch(a: HistmatchArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let per_image = a.per_image || cfg.histmatch.per_image;
    let source = load_manifest(&a.source)?;
    let target = load_manifest(&a.target)?;

    let targets = target.frames.iter().map(|f| load_rgb(&target.resolve(&f.rgb))).collect::<Result<Vec<_>, _>>()?;
    let target_refs: Vec<_> = targets.iter().collect();
    let target_cdf = histmatch::compute_cdf(&target_refs, None).map_err(CliError::domain)?;

    let mut images = Vec::with_capacity(source.frames.len());
    let mut masks = Vec::with_capacity(source.frames.len());
    for f in &source.frames {
        let img = load_rgb(&source.resolve(&f.rgb))?;
        // rendered holes stay out of the source CDF and keep their color
        let mask = match &f.scmap {
            Some(rel) => {
                let path = source.resolve(rel);
                let map = SceneCoordMap::load(&path).map_err(|e| CliError::parse(&path, e))?;
                if (map.width(), map.height()) != img.dimensions() {
                    return Err(CliError::domain(format!("frame {}: scmap and image sizes differ", f.id)));
                }
                map.mask().to_vec()
            }
            None => vec![1; img.pixels().len()],
        };
        images.push(img);
        masks.push(mask);
    }
    let image_refs: Vec<_> = images.iter().collect();
    let mask_refs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
    let matched = histmatch::match_batch(&image_refs, Some(&mask_refs), &target_cdf, per_image).map_err(CliError::domain)?;

    let mk = |sub: &str| {
        let d = a.out.join(sub);
        fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))
    };
    mk("rgb")?;
    mk("scmap")?;
    let mut records = Vec::with_capacity(source.frames.len());
    for (f, img) in source.frames.iter().zip(&matched) {
        let rgb = format!("rgb/{}.png", f.id);
        let path = a.out.join(&rgb);
        img.save(&path).map_err(|e| CliError::parse(&path, e))?;
        let scmap = match &f.scmap {
            Some(rel) => {
                let dst_rel = format!("scmap/{}.scm", f.id);
                let (from, to) = (source.resolve(rel), a.out.join(&dst_rel));
                fs::copy(&from, &to).map_err(|e| CliError::io(&from, e))?;
                Some(dst_rel)
            }
            None => None,
        };
        records.push(FrameRecord { rgb, scmap, ..f.clone() });
    }
    let manifest_path = a.out.join("manifest.jsonl");
    manifest::save_records(&records, &manifest_path).map_err(|e| CliError::parse(&manifest_path, e))?;
    if let Some(path) = &a.cdf_out {
        write_text(path, &serde_json::to_string(&target_cdf).expect("cdf serializes"))?;
    }
    println!("matched {} frames into {}", records.len(), manifest_path.display());
    Ok(())
}

/// Chooses how to read correspondences from `map`: a full-resolution map is
/// sampled every `stride` pixels, a map matching the stride grid of the
/// image is read cell by cell.
fn correspondences(map: &SceneCoordMap, intr: &CameraIntrinsics, stride: u32) -> Result<Vec<scrforge_core::pnp::Correspondence>, CliError> {
    let dims = (map.width(), map.height());
    if dims == (intr.width, intr.height) {
        return Ok(sample_correspondences(map, stride));
    }
    if dims == (intr.width.div_ceil(stride), intr.height.div_ceil(stride)) {
        return Ok(grid_correspondences(map, stride));
    }
    Err(CliError::domain(format!(
        "scmap is {}x{}, expected {}x{} or a stride-{stride} grid",
        dims.0, dims.1, intr.width, intr.height
    )))
}

fn solve_map(map: &SceneCoordMap, intr: &CameraIntrinsics, stride: u32, ransac: &RansacConfig) -> Result<PoseEstimate, CliError> {
    let corrs = correspondences(map, intr, stride)?;
    if corrs.len() < 4 {
        log::warn!("only {} valid correspondences, pose is invalid", corrs.len());
        return Ok(PoseEstimate::invalid(corrs.len()));
    }
    pnp_ransac(&corrs, intr, ransac).map_err(CliError::domain)
}

fn solve(a: SolveArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let stride = a.stride.unwrap_or(cfg.solve.stride);
    if stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let mut ransac = cfg.ransac;
    if let Some(seed) = a.seed {
        ransac.seed = seed;
    }

    if let Some(scmap) = &a.scmap {
        let intr_path = a.intrinsics.as_deref().expect("clap enforces --intrinsics");
        let intr: CameraIntrinsics = read_json(intr_path)?;
        intr.validate().map_err(|e| CliError::parse(intr_path, e))?;
        let map = SceneCoordMap::load(scmap).map_err(|e| CliError::parse(scmap, e))?;
        let est = solve_map(&map, &intr, stride, &ransac)?;
        let record = EstimateRecord::new(a.id.clone(), &est);
        write_text(&a.out, &serde_json::to_string_pretty(&record).expect("record serializes"))?;
        println!("valid={} inliers={}", record.valid, record.inliers);
        return Ok(());
    }

    let manifest_path = a.manifest.as_deref().expect("clap enforces --manifest");
    let m = load_manifest(manifest_path)?;
    let mut out = String::new();
    let mut valid = 0;
    for (i, f) in m.frames.iter().enumerate() {
        let Some(rel) = &f.scmap else {
            return Err(CliError::domain(format!("frame {} has no scmap", f.id)));
        };
        let path = m.resolve(rel);
        let map = SceneCoordMap::load(&path).map_err(|e| CliError::parse(&path, e))?;
        let frame_ransac = RansacConfig { seed: ransac.seed.wrapping_add(i as u64), ..ransac };
        let est = solve_map(&map, &f.intrinsics, stride, &frame_ransac)?;
        valid += est.valid as usize;
        out.push_str(&serde_json::to_string(&EstimateRecord::new(Some(f.id.clone()), &est)).expect("record serializes"));
        out.push('\n');
    }
    write_text(&a.out, &out)?;
    println!("solved {} frames, {valid} valid", m.frames.len());
    Ok(())
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn align(a: AlignArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let record = match (is_json(&a.src), is_json(&a.dst)) {
        (true, true) => {
            let src: Vec<[f64; 3]> = read_json(&a.src)?;
            let dst: Vec<[f64; 3]> = read_json(&a.dst)?;
            let src: Vec<Vec3> = src.iter().map(|p| Vec3::from(*p)).collect();
            let dst: Vec<Vec3> = dst.iter().map(|p| Vec3::from(*p)).collect();
            let t = umeyama_rigid(&src, &dst).map_err(CliError::domain)?;
            let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
            let pose = PoseRecord::from(&t);
            AlignRecord { q: pose.q, t: pose.t, rms: (sq / src.len() as f64).sqrt(), iterations: 0, method: "umeyama".into() }
        }
        (false, false) => {
            let src = load_ply(&a.src).map_err(|e| CliError::parse(&a.src, e))?;
            let dst = load_ply(&a.dst).map_err(|e| CliError::parse(&a.dst, e))?;
            let init = match &a.init {
                Some(p) => read_json::<PoseRecord>(p)?.to_transform().map_err(|e| CliError::parse(p, e))?,
                None => RigidTransform::identity(),
            };
            let mut icp_cfg = cfg.icp;
            if let Some(seed) = a.seed {
                icp_cfg.seed = seed;
            }
            let index = SpatialIndex::new(&dst);
            let r = icp(&src, &dst, &index, &init, &icp_cfg).map_err(CliError::domain)?;
            let pose = PoseRecord::from(&r.transform);
            AlignRecord { q: pose.q, t: pose.t, rms: r.rms, iterations: r.iterations, method: "icp".into() }
        }
        _ => return Err(CliError::Usage("--src and --dst must both be .ply clouds or both .json marker lists".into())),
    };
    write_text(&a.out, &serde_json::to_string_pretty(&record).expect("record serializes"))?;
    println!("{} rms={:.6} m", record.method, record.rms);
    Ok(())
}

/// Reads estimate JSONL; blank lines are skipped, every record needs an id.
pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EstimateRecord =
            serde_json::from_str(&line).map_err(|e| CliError::parse(path, format!("line {}: {e}", i + 1)))?;
        if rec.id.is_none() {
            return Err(CliError::parse(path, format!("line {}: missing id", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let gt = load_manifest(&a.gt)?;
    let estimates = read_estimates(&a.est)?;
    let mut by_id = std::collections::HashMap::new();
    for e in &estimates {
        let id = e.id.as_deref().expect("checked when reading");
        if by_id.insert(id, e).is_some() {
            return Err(CliError::parse(&a.est, format!("duplicate estimate for frame {id}")));
        }
    }
    let mut errors = Vec::with_capacity(gt.frames.len());
    for f in &gt.frames {
        let truth = match f.transform() {
            Some(t) => t.map_err(|e| CliError::parse(&a.gt, e))?,
            None => return Err(CliError::domain(format!("ground-truth frame {} has no pose", f.id))),
        };
        let err = match by_id.remove(f.id.as_str()) {
            Some(e) => {
                let est = e.transform().map_err(|msg| CliError::parse(&a.est, format!("frame {}: {msg}", f.id)))?;
                PoseError::between(&truth, &est, e.valid)
            }
            None => {
                log::warn!("no estimate for frame {}, counted as invalid", f.id);
                PoseError::between(&truth, &truth, false)
            }
        };
        errors.push(err);
    }
    if !by_id.is_empty() {
        log::warn!("{} estimates do not match any ground-truth frame", by_id.len());
    }
    let policy = match a.policy {
        PolicyArg::Exclude => PercentilePolicy::Exclude,
        PolicyArg::Penalize => PercentilePolicy::Penalize,
    };
    let report = aggregate(&errors, policy).map_err(|e: EvalError| CliError::domain(e))?.with_method(a.method);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let table = markdown_table(std::slice::from_ref(&report));
    if let Some(path) = &a.markdown {
        write_text(path, &table)?;
    }
    match &a.out {
        Some(path) => {
            write_text(path, &json)?;
            print!("{table}");
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn e2e_toy(a: ToyArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let mut toy = cfg.toy;
    if let Some(seed) = a.seed {
        toy = toy.with_seed(seed);
    }
    if let Some(n) = a.n_test {
        toy.n_test = n;
    }
    let report = run_e2e_toy(&toy, a.out.as_deref()).map_err(CliError::domain)?;
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    write!(w, "{}", report.markdown()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}
