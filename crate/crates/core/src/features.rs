//! Feature providers.
//!
//! The engine only needs four tensors per scene: a 2D feature map, per-point
//! 3D features, and a confidence value for every pixel and every point.
//! [`OracleProvider`] synthesises them from the ground-truth pose so that
//! feature similarity coincides with geometric alignment; [`TensorFileProvider`]
//! reads externally computed tensors from disk.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::harness::ScenePair;
use crate::tensor_io::{load_tensor, Tensor};
use crate::util::derive_seed;

/// `H × W × f` image features, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap2D {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim < 1 || height < 1 || width < 1 {
            return Err(invalid("feature map dimensions must be >= 1"));
        }
        if values.len() != height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        check_finite(&values, "2D features")?;
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Feature vector of row-major pixel `index`.
    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        self.pixel(v * self.width + u)
    }
}

/// `N × f` point features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet3D {
    dim: usize,
    values: Vec<f64>,
}

impl FeatureSet3D {
    pub fn new(len: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim < 1 {
            return Err(invalid("feature dimension must be >= 1"));
        }
        if values.len() != len * dim {
            return Err(Error::ShapeMismatch(format!(
                "{len} point features of dim {dim} need {} values, got {}",
                len * dim,
                values.len()
            )));
        }
        check_finite(&values, "3D features")?;
        Ok(Self { dim, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }
}

/// Per-pixel confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ConfidenceMap2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "confidence map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        check_unit_interval(&values, "2D confidence")?;
        Ok(Self { height, width, values })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-point confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSet3D {
    values: Vec<f64>,
}

impl ConfidenceSet3D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_unit_interval(&values, "3D confidence")?;
        Ok(Self { values })
    }

    pub fn uniform(len: usize, value: f64) -> Self {
        Self {
            values: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} at flat index {i}"))),
        None => Ok(()),
    }
}

fn check_unit_interval(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(i) => Err(invalid(format!("{what} {} at index {i} outside [0, 1]", values[i]))),
        None => Ok(()),
    }
}

/// Everything a provider hands to the engine for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub features_2d: FeatureMap2D,
    pub features_3d: FeatureSet3D,
    pub confidence_2d: ConfidenceMap2D,
    pub confidence_3d: ConfidenceSet3D,
}

impl FeatureBundle {
    /// Checks the bundle against the scene it is meant for.
    pub fn validate(&self, points: usize, intrinsics: &CameraIntrinsics) -> Result<()> {
        let (h, w) = (intrinsics.height, intrinsics.width);
        if self.features_2d.height() != h || self.features_2d.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "2D features are {}x{}, intrinsics say {h}x{w}",
                self.features_2d.height(),
                self.features_2d.width()
            )));
        }
        if self.confidence_2d.height() != h || self.confidence_2d.width() != w {
            return Err(Error::ShapeMismatch("2D confidence does not match intrinsics".into()));
        }
        if self.features_3d.len() != points || self.confidence_3d.len() != points {
            return Err(Error::ShapeMismatch(format!(
                "cloud has {points} points, 3D features {} and confidences {}",
                self.features_3d.len(),
                self.confidence_3d.len()
            )));
        }
        if self.features_3d.dim() != self.features_2d.dim() {
            return Err(Error::ShapeMismatch(format!(
                "2D feature dim {} != 3D feature dim {}",
                self.features_2d.dim(),
                self.features_3d.dim()
            )));
        }
        Ok(())
    }
}

/// Source of the four per-scene tensors.
pub trait FeatureProvider {
    fn provide(&self, scene: &ScenePair) -> Result<FeatureBundle>;
}

/// What out-of-frustum points receive as features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutsideMode {
    /// Seeded random unit vectors.
    Random,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleFeatureConfig {
    pub dim: usize,
    pub noise_sigma: f64,
    pub outside_mode: OutsideMode,
    pub conf_flip_prob: f64,
    pub seed: u64,
}

impl Default for OracleFeatureConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            noise_sigma: 0.0,
            outside_mode: OutsideMode::Random,
            conf_flip_prob: 0.0,
            seed: 0,
        }
    }
}

impl OracleFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(invalid(format!(
                "feature dim {} < 4: the encoding needs two channels per axis",
                self.dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be finite and >= 0"));
        }
        if !(0.0..=0.5).contains(&self.conf_flip_prob) {
            return Err(invalid("conf_flip_prob must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Angular frequencies of the positional encoding: geometrically spaced from
/// a wavelength of twice the longer image side (unique phase across the
/// map) down to a wavelength of four pixels.
pub fn encoding_frequencies(dim: usize, width: usize, height: usize) -> Vec<f64> {
    let n = dim.div_ceil(4);
    let lo = PI / width.max(height) as f64;
    let hi = (PI / 2.0).max(lo);
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    (0..n).map(|k| lo * ratio.powi(k as i32)).collect()
}

/// Unit-norm sinusoidal encoding of pixel `(u, v)`.
///
/// Channels come in groups of four per frequency,
/// `[sin ωu, cos ωu, sin ωv, cos ωv]`, truncated to `freqs.len() * 4 >= dim`.
/// Each group is scaled by `sqrt(ω₀ / ω)` before normalisation, so the
/// coarse groups dominate distances between far-apart pixels.
pub fn positional_encoding(u: usize, v: usize, dim: usize, freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    'outer: for &w in freqs {
        let a = (freqs[0] / w).sqrt();
        let (su, cu) = (w * u as f64).sin_cos();
        let (sv, cv) = (w * v as f64).sin_cos();
        for x in [a * su, a * cu, a * sv, a * cv] {
            if out.len() == dim {
                break 'outer;
            }
            out.push(x);
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    out.iter_mut().for_each(|x| *x /= norm);
    out
}

fn encoding_map(intrinsics: &CameraIntrinsics, dim: usize) -> Vec<f64> {
    let freqs = encoding_frequencies(dim, intrinsics.width, intrinsics.height);
    let mut values = Vec::with_capacity(intrinsics.pixel_count() * dim);
    for v in 0..intrinsics.height {
        for u in 0..intrinsics.width {
            values.extend(positional_encoding(u, v, dim, &freqs));
        }
    }
    values
}

const FEATURE_STREAM: u64 = 0x6665_6174;
const CONFIDENCE_STREAM: u64 = 0x636f_6e66;

fn rng_for(scene: &ScenePair, config: &OracleFeatureConfig, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(config.seed, scene.seed), stream))
}

/// Ground-truth pixel of every point (`None` outside the gt frustum).
fn gt_pixels(scene: &ScenePair) -> Vec<Option<usize>> {
    scene
        .cloud
        .points()
        .iter()
        .map(|p| scene.intrinsics.pixel_index(&scene.gt_pose.transform(p)))
        .collect()
}

/// Oracle features: every pixel carries its positional encoding, and every
/// point inside the ground-truth frustum carries the encoding of the pixel it
/// projects to, plus optional Gaussian noise.
pub fn oracle_features(scene: &ScenePair, config: &OracleFeatureConfig) -> Result<(FeatureMap2D, FeatureSet3D)> {
    config.validate()?;
    let k = &scene.intrinsics;
    let dim = config.dim;
    let map = encoding_map(k, dim);
    let mut rng = rng_for(scene, config, FEATURE_STREAM);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut values = Vec::with_capacity(scene.cloud.len() * dim);
    for pix in gt_pixels(scene) {
        match pix {
            Some(idx) => {
                let enc = &map[idx * dim..(idx + 1) * dim];
                if config.noise_sigma > 0.0 {
                    values.extend(enc.iter().map(|x| x + noise.sample(&mut rng)));
                } else {
                    values.extend_from_slice(enc);
                }
            }
            None => match config.outside_mode {
                OutsideMode::Zero => values.extend(std::iter::repeat_n(0.0, dim)),
                OutsideMode::Random => {
                    let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    values.extend(g.iter().map(|x| x / n));
                }
            },
        }
    }
    let f2d = FeatureMap2D::new(k.height, k.width, dim, map)?;
    let f3d = FeatureSet3D::new(scene.cloud.len(), dim, values)?;
    Ok((f2d, f3d))
}

/// Oracle stand-in for the two frustum classification heads: points inside
/// the ground-truth frustum and pixels hit by at least one of them get 1,
/// everything else 0, and each label is flipped with `conf_flip_prob`.
pub fn oracle_confidence(
    scene: &ScenePair,
    config: &OracleFeatureConfig,
) -> Result<(ConfidenceMap2D, ConfidenceSet3D)> {
    config.validate()?;
    let k = &scene.intrinsics;
    let mut c2d = vec![0.0; k.pixel_count()];
    let mut c3d = Vec::with_capacity(scene.cloud.len());
    for pix in gt_pixels(scene) {
        match pix {
            Some(idx) => {
                c2d[idx] = 1.0;
                c3d.push(1.0);
            }
            None => c3d.push(0.0),
        }
    }
    let mut rng = rng_for(scene, config, CONFIDENCE_STREAM);
    if config.conf_flip_prob > 0.0 {
        for c in c3d.iter_mut().chain(c2d.iter_mut()) {
            if rng.random::<f64>() < config.conf_flip_prob {
                *c = 1.0 - *c;
            }
        }
    }
    Ok((
        ConfidenceMap2D::new(k.height, k.width, c2d)?,
        ConfidenceSet3D::new(c3d)?,
    ))
}

/// Zeroes the features of points whose confidence is below `threshold`.
/// 2D features are never touched.
pub fn zero_out_inferior(features: &FeatureSet3D, conf: &ConfidenceSet3D, threshold: f64) -> Result<FeatureSet3D> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    if features.len() != conf.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features vs {} confidences",
            features.len(),
            conf.len()
        )));
    }
    let mut out = features.clone();
    let dim = out.dim;
    for (row, &c) in out.values.chunks_exact_mut(dim).zip(conf.values()) {
        if c < threshold {
            row.fill(0.0);
        }
    }
    Ok(out)
}

/// Default confidence threshold for [`zero_out_inferior`].
pub const ZOIF_THRESHOLD: f64 = 0.5;

/// Synthetic provider backed by the scene's ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleProvider {
    pub config: OracleFeatureConfig,
}

impl OracleProvider {
    pub fn new(config: OracleFeatureConfig) -> Self {
        Self { config }
    }
}

impl FeatureProvider for OracleProvider {
    fn provide(&self, scene: &ScenePair) -> Result<FeatureBundle> {
        let (features_2d, features_3d) = oracle_features(scene, &self.config)?;
        let (confidence_2d, confidence_3d) = oracle_confidence(scene, &self.config)?;
        Ok(FeatureBundle {
            features_2d,
            features_3d,
            confidence_2d,
            confidence_3d,
        })
    }
}

/// Reads `features_2d.bin` (H, W, f), `features_3d.bin` (N, f),
/// `confidence_2d.bin` (H, W) and `confidence_3d.bin` (N) from a directory.
#[derive(Debug, Clone)]
pub struct TensorFileProvider {
    pub dir: PathBuf,
}

pub const FEATURES_2D_FILE: &str = "features_2d.bin";
pub const FEATURES_3D_FILE: &str = "features_3d.bin";
pub const CONFIDENCE_2D_FILE: &str = "confidence_2d.bin";
pub const CONFIDENCE_3D_FILE: &str = "confidence_3d.bin";

impl TensorFileProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn load(&self) -> Result<FeatureBundle> {
        let t = load_tensor(&self.dir.join(FEATURES_2D_FILE))?;
        t.expect_rank(3, FEATURES_2D_FILE)?;
        let features_2d = FeatureMap2D::new(t.dims[0], t.dims[1], t.dims[2], t.data)?;
        let t = load_tensor(&self.dir.join(FEATURES_3D_FILE))?;
        t.expect_rank(2, FEATURES_3D_FILE)?;
        let features_3d = FeatureSet3D::new(t.dims[0], t.dims[1], t.data)?;
        let t = load_tensor(&self.dir.join(CONFIDENCE_2D_FILE))?;
        t.expect_rank(2, CONFIDENCE_2D_FILE)?;
        let confidence_2d = ConfidenceMap2D::new(t.dims[0], t.dims[1], t.data)?;
        let t = load_tensor(&self.dir.join(CONFIDENCE_3D_FILE))?;
        t.expect_rank(1, CONFIDENCE_3D_FILE)?;
        let confidence_3d = ConfidenceSet3D::new(t.data)?;
        Ok(FeatureBundle {
            features_2d,
            features_3d,
            confidence_2d,
            confidence_3d,
        })
    }

    /// Writes a bundle in the layout [`TensorFileProvider::load`] expects.
    pub fn save(&self, bundle: &FeatureBundle) -> Result<()> {
        use crate::tensor_io::save_tensors;
        std::fs::create_dir_all(&self.dir)?;
        let f2 = &bundle.features_2d;
        let f3 = &bundle.features_3d;
        let c2 = &bundle.confidence_2d;
        let c3 = &bundle.confidence_3d;
        let one = |dims: Vec<usize>, data: &[f64]| Tensor::new(dims, data.to_vec()).map(|t| vec![t]);
        save_tensors(
            &self.dir.join(FEATURES_2D_FILE),
            &one(vec![f2.height(), f2.width(), f2.dim()], f2.values())?,
        )?;
        save_tensors(
            &self.dir.join(FEATURES_3D_FILE),
            &one(vec![f3.len(), f3.dim()], f3.values())?,
        )?;
        save_tensors(
            &self.dir.join(CONFIDENCE_2D_FILE),
            &one(vec![c2.height(), c2.width()], c2.values())?,
        )?;
        save_tensors(&self.dir.join(CONFIDENCE_3D_FILE), &one(vec![c3.len()], c3.values())?)?;
        Ok(())
    }
}

impl FeatureProvider for TensorFileProvider {
    fn provide(&self, scene: &ScenePair) -> Result<FeatureBundle> {
        let bundle = self.load()?;
        bundle.validate(scene.cloud.len(), &scene.intrinsics)?;
        Ok(bundle)
    }
}
