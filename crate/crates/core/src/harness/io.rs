//! ASCII XYZ clouds and result files.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::util::{round_sig, to_rounded_json};

/// Voxel edge used by [`voxel_downsample`] in preprocessing, metres.
pub const VOXEL_SIZE: f64 = 0.1;
/// Point budget after preprocessing.
pub const PREPROCESS_POINTS: usize = 40960;

/// Reads one `x y z` triple per line. Blank lines and lines starting with
/// `#` are skipped.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    let bad = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad(i + 1, format!("expected 3 values, found {}", fields.len())));
        }
        let mut xyz = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| bad(i + 1, format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(i + 1, format!("non-finite value {f:?}")));
            }
            xyz[k] = v;
        }
        points.push(Vector3::from(xyz));
    }
    if points.is_empty() {
        return Err(bad(0, "no points".into()));
    }
    PointCloud::new(points)
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(out, "{} {} {}", round_sig(p.x), round_sig(p.y), round_sig(p.z))?;
    }
    out.flush()?;
    Ok(())
}

/// One centroid per occupied voxel, in order of first occurrence.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::InvalidInput("voxel size must be positive".into()));
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in cloud.points() {
        let key = [
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        ];
        let idx = *slot.entry(key).or_insert_with(|| {
            sums.push((Vector3::zeros(), 0));
            sums.len() - 1
        });
        sums[idx].0 += p;
        sums[idx].1 += 1;
    }
    PointCloud::new(sums.into_iter().map(|(s, n)| s / n as f64).collect())
}

/// Uniform subsample without replacement, keeping the original order. Clouds
/// at or under `n` points are returned unchanged.
pub fn random_subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidInput("subsample size must be >= 1".into()));
    }
    if cloud.len() <= n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    PointCloud::new(idx.into_iter().map(|i| cloud.points()[i]).collect())
}

/// Writes any result document as pretty JSON with 9 significant digits.
pub fn save_result<T: Serialize>(result: &T, path: &Path) -> Result<()> {
    let mut text = to_rounded_json(result, true)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
