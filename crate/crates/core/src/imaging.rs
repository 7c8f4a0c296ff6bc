//! Color and stain mathematics on RGB rasters.
//!
//! Intensities map to optical density through the Beer–Lambert relation
//! `od = -ln(I / 255)`. Stain profiles are estimated from the plane spanned
//! by the two dominant singular directions of the OD cloud, with the stain
//! vectors taken at robust extreme angles inside that plane.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Incident light intensity.
pub const WHITE: f64 = 255.0;

/// Fewer retained pixels than this cannot support a stain estimate.
pub const MIN_STAIN_PIXELS: usize = 100;

/// Second/first singular value ratio below which the OD cloud is rank-1.
pub const RANK_TOLERANCE: f64 = 1e-6;

/// Minimum angle between the two stain vectors, in radians.
pub const MIN_STAIN_ANGLE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("stain estimation degenerate: {0}")]
    StainEstimationDegenerate(String),
    #[error("invalid stain profile: {0}")]
    InvalidProfile(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Row-major interleaved RGB raster, 8 bits per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    /// Micrometers per pixel, when known.
    resolution: Option<ResolutionUm>,
}

/// Physical pixel pitch in micrometers. Stored as the bit pattern so the
/// raster stays `Eq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolutionUm(u64);

impl ResolutionUm {
    pub fn new(um_per_px: f64) -> Self {
        Self(um_per_px.to_bits())
    }

    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImagingError::InvalidImage(format!(
                "{width}x{height} RGB needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            resolution: None,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
            resolution: None,
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
            resolution: None,
        }
    }

    pub fn with_resolution(mut self, um_per_px: f64) -> Self {
        self.resolution = Some(ResolutionUm::new(um_per_px));
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn resolution(&self) -> Option<f64> {
        self.resolution.map(ResolutionUm::get)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.pixels.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Largest per-channel absolute difference to `other`.
    pub fn max_abs_diff(&self, other: &RasterImage) -> Option<u8> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        Some(
            self.pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| a.abs_diff(*b))
                .max()
                .unwrap_or(0),
        )
    }
}

/// Per-pixel optical density 3-vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct OdImage {
    width: u32,
    height: u32,
    values: Vec<[f64; 3]>,
}

impl OdImage {
    pub fn new(width: u32, height: u32, values: Vec<[f64; 3]>) -> Result<Self, ImagingError> {
        if values.len() != width as usize * height as usize {
            return Err(ImagingError::InvalidImage(format!(
                "{width}x{height} OD image with {} values",
                values.len()
            )));
        }
        if values.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(ImagingError::InvalidImage(
                "optical densities must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }
}

/// Real-valued RGB raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatRaster {
    pub width: u32,
    pub height: u32,
    pub values: Vec<[f64; 3]>,
}

impl FloatRaster {
    pub fn channel_means(&self) -> [f64; 3] {
        channel_means(self.values.iter().copied())
    }
}

fn channel_means(values: impl ExactSizeIterator<Item = [f64; 3]>) -> [f64; 3] {
    let n = values.len() as f64;
    let mut sum = [0.0; 3];
    for v in values {
        for c in 0..3 {
            sum[c] += v[c];
        }
    }
    sum.map(|s| s / n)
}

#[inline]
pub fn intensity_to_od(intensity: u8, floor: u8) -> f64 {
    let i = intensity.max(floor.max(1));
    -(f64::from(i) / WHITE).ln()
}

#[inline]
pub fn od_to_intensity(od: f64) -> u8 {
    (WHITE * (-od).exp()).round().clamp(0.0, WHITE) as u8
}

/// `od = -ln(max(I, floor) / 255)` per channel. A `floor` of 0 is treated
/// as 1.
pub fn rgb_to_od(image: &RasterImage, floor: u8) -> OdImage {
    let lut: Vec<f64> = (0..=255u8).map(|i| intensity_to_od(i, floor)).collect();
    let values = image
        .pixels()
        .map(|p| p.map(|c| lut[c as usize]))
        .collect();
    OdImage {
        width: image.width,
        height: image.height,
        values,
    }
}

/// `I = round(255·exp(-od))`, clamped to `[0, 255]`.
pub fn od_to_rgb(od: &OdImage) -> RasterImage {
    let mut pixels = Vec::with_capacity(od.values.len() * 3);
    for v in &od.values {
        pixels.extend(v.iter().map(|&d| od_to_intensity(d)));
    }
    RasterImage {
        width: od.width,
        height: od.height,
        pixels,
        resolution: None,
    }
}

/// Two unit stain vectors in OD space and their robust concentration maxima.
///
/// The first vector is the hematoxylin-like stain: it has the larger blue
/// OD component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStainProfile")]
pub struct StainProfile {
    stain_vectors: [[f64; 3]; 2],
    max_concentrations: [f64; 2],
}

#[derive(Deserialize)]
struct RawStainProfile {
    stain_vectors: [[f64; 3]; 2],
    max_concentrations: [f64; 2],
}

impl TryFrom<RawStainProfile> for StainProfile {
    type Error = ImagingError;

    fn try_from(raw: RawStainProfile) -> Result<Self, Self::Error> {
        StainProfile::new(raw.stain_vectors, raw.max_concentrations)
    }
}

const UNIT_TOLERANCE: f64 = 1e-6;

impl StainProfile {
    /// Validates unit norm, nonnegativity, independence, ordering and
    /// positive concentration maxima.
    pub fn new(
        stain_vectors: [[f64; 3]; 2],
        max_concentrations: [f64; 2],
    ) -> Result<Self, ImagingError> {
        for (i, v) in stain_vectors.iter().enumerate() {
            if v.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
                return Err(ImagingError::InvalidProfile(format!(
                    "stain vector {i} has a negative or non-finite component"
                )));
            }
            let norm = Vector3::from(*v).norm();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(ImagingError::InvalidProfile(format!(
                    "stain vector {i} has norm {norm}"
                )));
            }
        }
        let angle = angle_between(&stain_vectors[0], &stain_vectors[1]);
        if !(angle > MIN_STAIN_ANGLE) {
            return Err(ImagingError::InvalidProfile(format!(
                "stain vectors are {angle} rad apart"
            )));
        }
        if stain_vectors[0][2] < stain_vectors[1][2] {
            return Err(ImagingError::InvalidProfile(
                "first stain vector must have the larger blue component".into(),
            ));
        }
        if max_concentrations.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(ImagingError::InvalidProfile(format!(
                "max concentrations {max_concentrations:?} must be positive"
            )));
        }
        Ok(Self {
            stain_vectors,
            max_concentrations,
        })
    }

    /// Normalizes both vectors and orders them before validating.
    pub fn from_unnormalized(
        a: [f64; 3],
        b: [f64; 3],
        max_concentrations: [f64; 2],
    ) -> Result<Self, ImagingError> {
        let na = normalize(a).ok_or_else(|| ImagingError::InvalidProfile("zero vector".into()))?;
        let nb = normalize(b).ok_or_else(|| ImagingError::InvalidProfile("zero vector".into()))?;
        if na[2] >= nb[2] {
            Self::new([na, nb], max_concentrations)
        } else {
            Self::new([nb, na], [max_concentrations[1], max_concentrations[0]])
        }
    }

    pub fn stain_vectors(&self) -> [[f64; 3]; 2] {
        self.stain_vectors
    }

    pub fn max_concentrations(&self) -> [f64; 2] {
        self.max_concentrations
    }

    fn matrix_columns(&self) -> (Vector3<f64>, Vector3<f64>) {
        (
            Vector3::from(self.stain_vectors[0]),
            Vector3::from(self.stain_vectors[1]),
        )
    }

    /// Least-squares concentrations of one OD vector, clamped at zero.
    pub fn concentrations(&self, od: &[f64; 3]) -> [f64; 2] {
        StainSolver::new(self).solve(od)
    }
}

/// Precomputed pseudo-inverse of the 3×2 stain matrix.
struct StainSolver {
    rows: [Vector3<f64>; 2],
}

impl StainSolver {
    fn new(profile: &StainProfile) -> Self {
        let (h, e) = profile.matrix_columns();
        // (SᵀS)⁻¹Sᵀ for S = [h e]; det > 0 since the columns are independent
        let (hh, he, ee) = (h.dot(&h), h.dot(&e), e.dot(&e));
        let det = hh * ee - he * he;
        let r0 = (h * ee - e * he) / det;
        let r1 = (e * hh - h * he) / det;
        Self { rows: [r0, r1] }
    }

    fn solve(&self, od: &[f64; 3]) -> [f64; 2] {
        let v = Vector3::from(*od);
        [self.rows[0].dot(&v).max(0.0), self.rows[1].dot(&v).max(0.0)]
    }
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = Vector3::from(v).norm();
    (n > 0.0 && n.is_finite()).then(|| v.map(|c| c / n))
}

pub fn angle_between(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (a, b) = (Vector3::from(*a), Vector3::from(*b));
    let cos = a.dot(&b) / (a.norm() * b.norm());
    cos.clamp(-1.0, 1.0).acos()
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted data.
/// Returns `None` for empty input.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * t)
}

/// Stain estimation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    /// Pixels whose OD norm is below this are treated as background.
    pub od_threshold: f64,
    /// Robust extreme-angle percentile, in `(0, 50)`.
    pub angle_percentile: f64,
    /// Percentile of per-stain concentrations used as the ceiling.
    pub concentration_percentile: f64,
    /// Intensity floor for the OD transform.
    pub od_floor: u8,
}

impl Default for StainParams {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            angle_percentile: 1.0,
            concentration_percentile: 99.0,
            od_floor: 1,
        }
    }
}

impl StainParams {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(self.od_threshold > 0.0) || !self.od_threshold.is_finite() {
            return Err(ImagingError::InvalidParameter(format!(
                "od_threshold {} must be positive",
                self.od_threshold
            )));
        }
        if !(self.angle_percentile > 0.0 && self.angle_percentile < 50.0) {
            return Err(ImagingError::InvalidParameter(format!(
                "angle_percentile {} must lie in (0, 50)",
                self.angle_percentile
            )));
        }
        if !(self.concentration_percentile > 0.0 && self.concentration_percentile <= 100.0) {
            return Err(ImagingError::InvalidParameter(format!(
                "concentration_percentile {} must lie in (0, 100]",
                self.concentration_percentile
            )));
        }
        Ok(())
    }
}

/// Estimates the two-stain profile of an image.
pub fn estimate_stain_profile(
    image: &RasterImage,
    params: &StainParams,
) -> Result<StainProfile, ImagingError> {
    params.validate()?;
    if image.is_empty() {
        return Err(ImagingError::InvalidImage("empty image".into()));
    }
    let od = rgb_to_od(image, params.od_floor);
    let retained: Vec<Vector3<f64>> = od
        .values
        .iter()
        .map(|v| Vector3::from(*v))
        .filter(|v| v.norm() >= params.od_threshold)
        .collect();
    if retained.len() < MIN_STAIN_PIXELS {
        return Err(ImagingError::StainEstimationDegenerate(format!(
            "{} pixels above OD threshold {}, need {MIN_STAIN_PIXELS}",
            retained.len(),
            params.od_threshold
        )));
    }

    // Right singular vectors of the retained OD matrix are the eigenvectors
    // of its 3×3 Gram matrix.
    let gram = retained
        .iter()
        .fold(Matrix3::zeros(), |acc, v| acc + v * v.transpose());
    let eigen = SymmetricEigen::new(gram);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let sv = |k: usize| eigen.eigenvalues[order[k]].max(0.0).sqrt();
    if !(sv(1) >= RANK_TOLERANCE * sv(0)) || sv(0) == 0.0 {
        return Err(ImagingError::StainEstimationDegenerate(format!(
            "OD matrix is rank-deficient (singular values {:.3e}, {:.3e})",
            sv(0),
            sv(1)
        )));
    }
    let mut e1: Vector3<f64> = eigen.eigenvectors.column(order[0]).into();
    let mut e2: Vector3<f64> = eigen.eigenvectors.column(order[1]).into();
    if e1.sum() < 0.0 {
        e1 = -e1;
    }
    if e2[0] < 0.0 {
        e2 = -e2;
    }

    let angles: Vec<f64> = retained
        .iter()
        .map(|v| v.dot(&e2).atan2(v.dot(&e1)))
        .collect();
    let lo = percentile(&angles, params.angle_percentile).expect("nonempty");
    let hi = percentile(&angles, 100.0 - params.angle_percentile).expect("nonempty");
    let direction = |phi: f64| -> Option<[f64; 3]> {
        let mut v = e1 * phi.cos() + e2 * phi.sin();
        if v.sum() < 0.0 {
            v = -v;
        }
        normalize([v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)])
    };
    let (Some(a), Some(b)) = (direction(lo), direction(hi)) else {
        return Err(ImagingError::StainEstimationDegenerate(
            "extreme stain direction has no positive component".into(),
        ));
    };
    if angle_between(&a, &b) <= MIN_STAIN_ANGLE {
        return Err(ImagingError::StainEstimationDegenerate(
            "extreme stain directions coincide".into(),
        ));
    }
    let (h, e) = if a[2] >= b[2] { (a, b) } else { (b, a) };

    // Ceilings come from every pixel, background included.
    let provisional = StainProfile {
        stain_vectors: [h, e],
        max_concentrations: [1.0, 1.0],
    };
    let solver = StainSolver::new(&provisional);
    let (ch, ce): (Vec<f64>, Vec<f64>) = od
        .values
        .iter()
        .map(|v| {
            let c = solver.solve(v);
            (c[0], c[1])
        })
        .unzip();
    let q = params.concentration_percentile;
    let max_h = percentile(&ch, q).expect("nonempty");
    let max_e = percentile(&ce, q).expect("nonempty");
    StainProfile::new([h, e], [max_h, max_e]).map_err(|err| {
        ImagingError::StainEstimationDegenerate(format!("estimated profile rejected: {err}"))
    })
}

/// Maps an image from the `source` stain profile onto the `target` one.
pub fn normalize_stains(
    image: &RasterImage,
    source: &StainProfile,
    target: &StainProfile,
) -> RasterImage {
    let solver = StainSolver::new(source);
    let (th, te) = target.matrix_columns();
    let scale = [
        target.max_concentrations[0] / source.max_concentrations[0],
        target.max_concentrations[1] / source.max_concentrations[1],
    ];
    let lut: Vec<f64> = (0..=255u8).map(|i| intensity_to_od(i, 1)).collect();
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for p in image.pixels() {
        let od = p.map(|c| lut[c as usize]);
        let c = solver.solve(&od);
        let out = th * (c[0] * scale[0]) + te * (c[1] * scale[1]);
        pixels.extend(out.iter().map(|&d| od_to_intensity(d)));
    }
    RasterImage {
        width: image.width,
        height: image.height,
        pixels,
        resolution: image.resolution,
    }
}

/// Subtracts the per-channel mean.
pub fn mean_normalize(image: &RasterImage) -> Result<FloatRaster, ImagingError> {
    if image.is_empty() {
        return Err(ImagingError::InvalidImage("empty image".into()));
    }
    let values: Vec<[f64; 3]> = image.pixels().map(|p| p.map(f64::from)).collect();
    let mean = channel_means(values.iter().copied());
    let values = values
        .into_iter()
        .map(|v| [v[0] - mean[0], v[1] - mean[1], v[2] - mean[2]])
        .collect();
    Ok(FloatRaster {
        width: image.width,
        height: image.height,
        values,
    })
}
