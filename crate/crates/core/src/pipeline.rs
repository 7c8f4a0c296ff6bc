//! Dataset manifests, run configuration, file I/O and the command-line
//! front end that composes the library modules into batch commands.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{self, CsvOrder, Mask, ObjectRecord, ObjectSet};
use crate::evaluation::{self, DetectionSet};
use crate::geometry::{self, BoundingBox, RpnThresholds};
use crate::imaging::{self, RasterImage, StainParams, StainProfile};
use crate::losses;
use crate::tiling::{self, TilePlan};
use crate::Point;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 1,
            PipelineError::Manifest(ManifestError::Invalid { .. }) => 1,
            PipelineError::Manifest(ManifestError::Io { .. }) => 2,
            PipelineError::Io { .. } => 2,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

fn invalid(err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(err.to_string())
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest {field} (line {line}, column {column}): {message}")]
    Invalid {
        field: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub image_path: PathBuf,
    pub centroid_csv_path: PathBuf,
    pub scanner: String,
    /// Micrometers per pixel.
    pub resolution_um_per_px: f64,
    pub split: Split,
}

/// Slides of a dataset and their train/validation/test assignment. Paths
/// are kept verbatim; they are checked when a command opens them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest, ManifestError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let manifest: DatasetManifest =
        serde_path_to_error::deserialize(de).map_err(|err| ManifestError::Invalid {
            field: err.path().to_string(),
            line: err.inner().line(),
            column: err.inner().column(),
            message: err.inner().to_string(),
        })?;

    // second pass for semantic checks; locate the offending entry for context
    let locate = |needle: &str| -> (usize, usize) {
        text.lines()
            .enumerate()
            .find_map(|(i, l)| l.find(needle).map(|c| (i + 1, c + 1)))
            .unwrap_or((0, 0))
    };
    let mut seen = HashSet::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.slide_id.is_empty() {
            return Err(ManifestError::Invalid {
                field: format!("entries[{i}].slide_id"),
                line: 0,
                column: 0,
                message: "empty slide_id".into(),
            });
        }
        if !seen.insert(e.slide_id.as_str()) {
            let needle = format!("\"{}\"", e.slide_id);
            // the second occurrence is the duplicate
            let (line, column) = text
                .match_indices(&needle)
                .nth(1)
                .map(|(off, _)| {
                    let before = &text[..off];
                    let line = before.matches('\n').count() + 1;
                    let column = off - before.rfind('\n').map_or(0, |p| p + 1) + 1;
                    (line, column)
                })
                .unwrap_or_else(|| locate(&needle));
            return Err(ManifestError::Invalid {
                field: format!("entries[{i}].slide_id"),
                line,
                column,
                message: format!("duplicate slide_id {:?}", e.slide_id),
            });
        }
        if !(e.resolution_um_per_px > 0.0) || !e.resolution_um_per_px.is_finite() {
            return Err(ManifestError::Invalid {
                field: format!("entries[{i}].resolution_um_per_px"),
                line: 0,
                column: 0,
                message: format!("resolution {} must be positive", e.resolution_um_per_px),
            });
        }
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_manifest(&text)
}

/// Every tunable of a run, defaulting to the reference protocol values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tile_size: u32,
    pub overlap: f64,
    pub mask_seed: Option<u64>,
    pub match_radius: f64,
    pub dedup_radius: f64,
    pub stain: StainParams,
    pub lambda: f64,
    pub rpn: RpnThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tile_size: tiling::DEFAULT_TILE_SIZE,
            overlap: tiling::DEFAULT_OVERLAP,
            mask_seed: None,
            match_radius: evaluation::DEFAULT_MATCH_RADIUS,
            dedup_radius: tiling::DEFAULT_DEDUP_RADIUS,
            stain: StainParams::default(),
            lambda: 1.0,
            rpn: RpnThresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.tile_size < tiling::MIN_TILE_SIZE {
            return Err(invalid(format!("tile_size {} below {}", self.tile_size, tiling::MIN_TILE_SIZE)));
        }
        if !(0.0..=tiling::MAX_OVERLAP).contains(&self.overlap) {
            return Err(invalid(format!("overlap {} outside [0, {}]", self.overlap, tiling::MAX_OVERLAP)));
        }
        for (name, r) in [("match_radius", self.match_radius), ("dedup_radius", self.dedup_radius)] {
            if !(r > 0.0) || !r.is_finite() {
                return Err(invalid(format!("{name} {r} must be positive")));
            }
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(invalid(format!("lambda {} must be positive", self.lambda)));
        }
        self.stain.validate().map_err(invalid)?;
        self.rpn.validate().map_err(invalid)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// file I/O

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        PipelineError::io(path, e)
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(invalid)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn encode_png(width: u32, height: u32, bytes: &[u8], color: ExtendedColorType) -> Result<Vec<u8>, PipelineError> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Adaptive)
        .write_image(bytes, width, height, color)
        .map_err(invalid)?;
    Ok(out)
}

pub fn png_bytes(image: &RasterImage) -> Result<Vec<u8>, PipelineError> {
    encode_png(image.width(), image.height(), image.as_bytes(), ExtendedColorType::Rgb8)
}

pub fn write_png(path: &Path, image: &RasterImage) -> Result<(), PipelineError> {
    write_atomic(path, &png_bytes(image)?)
}

/// Writes a binary mask as 8-bit grayscale, 0 or 255.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<(), PipelineError> {
    let bytes = encode_png(mask.width(), mask.height(), &mask.to_gray_bytes(), ExtendedColorType::L8)?;
    write_atomic(path, &bytes)
}

/// Decodes any PNG to 8-bit RGB (alpha dropped, gray expanded).
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage, image::ImageError> {
    let rgb = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(RasterImage::new(w, h, rgb.into_raw()).expect("decoder yields full RGB buffer"))
}

pub fn read_png(path: &Path) -> Result<RasterImage, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    decode_png(&bytes).map_err(|e| {
        PipelineError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    })
}

fn read_centroids(path: &Path, slide_id: &str, order: CsvOrder) -> Result<Vec<annotation::CentroidLabel>, PipelineError> {
    let text = read_text(path)?;
    annotation::parse_centroids(slide_id, &text, order)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), PipelineError> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(invalid)?;
            println!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// commands

/// File name of tile `index` in a tile directory.
pub fn tile_file_name(index: usize, origin: (u32, u32), flipped: bool) -> String {
    let suffix = if flipped { "_flip" } else { "" };
    format!("tile_{index:04}_x{}_y{}{suffix}.png", origin.0, origin.1)
}

/// Result of [`run_tile`]: the plan and the written tile paths.
pub struct TileOutput {
    pub plan: TilePlan,
    pub files: Vec<PathBuf>,
}

pub fn run_tile(
    image: &RasterImage,
    tile_size: u32,
    overlap: f64,
    flip: bool,
    out_dir: &Path,
    manifest: Option<&Path>,
) -> Result<TileOutput, PipelineError> {
    let plan = tiling::plan_tiles(image.width(), image.height(), tile_size, overlap).map_err(invalid)?;
    create_dir(out_dir)?;
    let mut files = Vec::new();
    let variants: &[bool] = if flip { &[false, true] } else { &[false] };
    for &flipped in variants {
        for tile in plan.tiles(flipped) {
            let path = out_dir.join(tile_file_name(tile.index, tile.origin, flipped));
            write_png(&path, &tiling::extract_tile(image, &tile, tile_size))?;
            files.push(path);
        }
    }
    if let Some(m) = manifest {
        write_json(m, &plan)?;
    }
    Ok(TileOutput { plan, files })
}

#[derive(Serialize)]
struct ProfilePair {
    source: StainProfile,
    target: StainProfile,
}

#[derive(Serialize)]
struct GradeReport {
    count: usize,
    score: u8,
}

#[derive(Serialize)]
struct AnchorDump {
    grid_width: usize,
    grid_height: usize,
    feature_stride: f64,
    anchors: Vec<geometry::Anchor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    targets: Option<Vec<geometry::RpnTarget>>,
}

#[derive(Parser, Debug)]
#[command(name = "mitodet", version, about = "Mitosis detection preprocessing, geometry and scoring tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Map an image's stains onto a reference profile.
    Normalize(NormalizeArgs),
    /// Cut an image into overlapping square tiles.
    Tile(TileArgs),
    /// Synthesize circle/ellipse masks from centroid labels.
    Masks(MasksArgs),
    /// Score detections against ground-truth centroids.
    Score(ScoreArgs),
    /// Mitotic-activity grade of a count or a detection file.
    Grade(GradeArgs),
    /// Verify loss gradients against central differences.
    Losscheck(LosscheckArgs),
    /// Dump anchors and, optionally, their target assignment.
    Anchors(AnchorsArgs),
}

#[derive(Args, Debug)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Reference image whose stain profile is the target.
    #[arg(long, required_unless_present = "target_profile", conflicts_with = "target_profile")]
    pub reference: Option<PathBuf>,
    /// Target profile JSON instead of a reference image.
    #[arg(long)]
    pub target_profile: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    pub od_threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    pub angle_percentile: f64,
    /// Also write the source and target profiles as JSON.
    #[arg(long)]
    pub profile_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TileArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = tiling::DEFAULT_TILE_SIZE)]
    pub size: u32,
    #[arg(long, default_value_t = tiling::DEFAULT_OVERLAP)]
    pub overlap: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write horizontally flipped copies.
    #[arg(long)]
    pub flip: bool,
}

#[derive(Args, Debug)]
pub struct MasksArgs {
    #[arg(long)]
    pub centroids: PathBuf,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "slide")]
    pub slide_id: String,
    /// The CSV holds `row,column` pairs.
    #[arg(long)]
    pub row_col: bool,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = evaluation::DEFAULT_MATCH_RADIUS)]
    pub radius: f64,
    #[arg(long, default_value_t = tiling::DEFAULT_DEDUP_RADIUS)]
    pub dedup_radius: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub row_col: bool,
}

#[derive(Args, Debug)]
pub struct GradeArgs {
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    pub count: Option<usize>,
    /// Detections JSON; graded after cross-tile deduplication.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long, default_value_t = tiling::DEFAULT_DEDUP_RADIUS)]
    pub dedup_radius: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LosscheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = losses::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnchorsArgs {
    #[arg(long)]
    pub grid_width: usize,
    #[arg(long)]
    pub grid_height: usize,
    #[arg(long)]
    pub stride: f64,
    /// JSON array of `[x1, y1, x2, y2]` ground-truth boxes.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    pub pos_threshold: f64,
    #[arg(long, default_value_t = 0.3)]
    pub neg_threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(command: &Command) -> Result<(), PipelineError> {
    match command {
        Command::Normalize(a) => {
            let params = StainParams {
                od_threshold: a.od_threshold,
                angle_percentile: a.angle_percentile,
                ..StainParams::default()
            };
            let image = read_png(&a.input)?;
            let target = match (&a.reference, &a.target_profile) {
                (Some(r), _) => imaging::estimate_stain_profile(&read_png(r)?, &params).map_err(invalid)?,
                (None, Some(p)) => read_json(p)?,
                (None, None) => return Err(invalid("either --reference or --target-profile is required")),
            };
            let source = imaging::estimate_stain_profile(&image, &params).map_err(invalid)?;
            write_png(&a.out, &imaging::normalize_stains(&image, &source, &target))?;
            if let Some(p) = &a.profile_out {
                write_json(p, &ProfilePair { source, target })?;
            }
            Ok(())
        }
        Command::Tile(a) => {
            let image = read_png(&a.input)?;
            run_tile(&image, a.size, a.overlap, a.flip, &a.out_dir, a.manifest.as_deref()).map(|_| ())
        }
        Command::Masks(a) => {
            if a.width == 0 || a.height == 0 {
                return Err(invalid("mask dimensions must be positive"));
            }
            let order = if a.row_col { CsvOrder::RowCol } else { CsvOrder::XY };
            let labels = read_centroids(&a.centroids, &a.slide_id, order)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let objects = annotation::synthesize_objects(&labels, a.width, a.height, &mut rng);
            create_dir(&a.out_dir)?;
            let mut union = Mask::empty(a.width, a.height);
            for (i, obj) in objects.iter().enumerate() {
                write_mask_png(&a.out_dir.join(format!("mask_{i:04}.png")), &obj.raster)?;
                union.union_with(&obj.raster);
            }
            write_mask_png(&a.out_dir.join("mask_union.png"), &union)?;
            let set = ObjectSet {
                objects: objects.iter().map(ObjectRecord::from).collect(),
            };
            write_json(&a.out_dir.join("objects.json"), &set)
        }
        Command::Score(a) => {
            let pred: DetectionSet = read_json(&a.pred)?;
            let order = if a.row_col { CsvOrder::RowCol } else { CsvOrder::XY };
            let gts: Vec<Point> = read_centroids(&a.gt, &pred.slide_id, order)?
                .iter()
                .map(|l| Point::new(f64::from(l.x), f64::from(l.y)))
                .collect();
            if !(a.dedup_radius > 0.0) {
                return Err(invalid(format!("dedup radius {} must be positive", a.dedup_radius)));
            }
            let eval = evaluation::evaluate_slide(&[pred.detections], &gts, a.radius, a.dedup_radius)
                .map_err(invalid)?;
            emit_json(a.out.as_deref(), &eval.report())
        }
        Command::Grade(a) => {
            let count = match (a.count, &a.pred) {
                (Some(c), _) => c,
                (None, Some(p)) => {
                    let pred: DetectionSet = read_json(p)?;
                    tiling::merge_tile_detections(&pred.detections, a.dedup_radius).len()
                }
                (None, None) => return Err(invalid("either --count or --pred is required")),
            };
            let report = GradeReport {
                count,
                score: evaluation::mitotic_activity_score(count),
            };
            emit_json(a.out.as_deref(), &report)
        }
        Command::Losscheck(a) => {
            if !(a.step > 0.0) {
                return Err(invalid(format!("step {} must be positive", a.step)));
            }
            let reports = losses::run_gradient_suite(a.trials, a.seed, a.step).map_err(invalid)?;
            emit_json(a.out.as_deref(), &reports)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(invalid(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Anchors(a) => {
            let anchors = geometry::generate_anchors(a.grid_width, a.grid_height, a.stride).map_err(invalid)?;
            let targets = match &a.boxes {
                Some(path) => {
                    let gt: Vec<BoundingBox> = read_json(path)?;
                    let thresholds = RpnThresholds {
                        positive: a.pos_threshold,
                        negative: a.neg_threshold,
                    };
                    Some(geometry::assign_rpn_targets(&anchors, &gt, thresholds).map_err(invalid)?)
                }
                None => None,
            };
            emit_json(
                a.out.as_deref(),
                &AnchorDump {
                    grid_width: a.grid_width,
                    grid_height: a.grid_height,
                    feature_stride: a.stride,
                    anchors,
                    targets,
                },
            )
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status. Diagnostics go to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
