//! Pose-based cost volume.
//!
//! For each candidate pose the cloud is projected into the feature grid;
//! the 3D features landing on a pixel are averaged and the 3D weights landing
//! on it are summed. A [`CostVolumeUnit`] pairs that aggregated map with the
//! image features and weights. Units are produced lazily, one segment at a
//! time, by [`build_volume`].

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{ConfidenceMap2D, ConfidenceSet3D, FeatureMap2D, FeatureSet3D};
use crate::geometry::{CameraIntrinsics, PointCloud, Pose};

const NO_PIXEL: u32 = u32::MAX;

/// Projected 3D features, occupancy and weights for one candidate.
///
/// Features are stored only for occupied pixels (ascending pixel order);
/// every other pixel reads as the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMap {
    height: usize,
    width: usize,
    dim: usize,
    occupancy: Vec<u32>,
    weights: Vec<f64>,
    occupied: Vec<u32>,
    features: Vec<f64>,
}

impl AggregatedMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `|G_ũ|` for every pixel, row-major.
    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }

    /// Summed 3D weights per pixel, row-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Occupied pixel indices in ascending order.
    pub fn occupied_pixels(&self) -> &[u32] {
        &self.occupied
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    /// `(pixel, mean feature)` for every occupied pixel.
    pub fn occupied_features(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.occupied
            .iter()
            .zip(self.features.chunks_exact(self.dim))
            .map(|(&p, row)| (p as usize, row))
    }

    /// Mean feature at `pixel`, `None` when unoccupied (i.e. zero).
    pub fn feature(&self, pixel: usize) -> Option<&[f64]> {
        let slot = self.occupied.binary_search(&(pixel as u32)).ok()?;
        Some(&self.features[slot * self.dim..(slot + 1) * self.dim])
    }

    /// Dense `H × W × f` copy.
    pub fn dense_features(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.height * self.width * self.dim];
        for (p, row) in self.occupied_features() {
            out[p * self.dim..(p + 1) * self.dim].copy_from_slice(row);
        }
        out
    }
}

/// Pixel index of every point under a candidate, from points already rotated
/// by the candidate rotation. `rotated[j] + t` matches `Pose::transform`
/// bit-for-bit.
fn pixel_indices(rotated: &[Vector3<f64>], t: &Vector3<f64>, k: &CameraIntrinsics) -> Vec<u32> {
    rotated
        .iter()
        .map(|rp| k.pixel_index(&(rp + t)).map_or(NO_PIXEL, |i| i as u32))
        .collect()
}

fn rotate_all(points: &[Vector3<f64>], r: &Matrix3<f64>) -> Vec<Vector3<f64>> {
    points.iter().map(|p| r * p).collect()
}

fn check_len(cloud: &PointCloud, n: usize, what: &str) -> Result<()> {
    if cloud.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "cloud has {} points, {what} has {n}",
            cloud.len()
        )));
    }
    Ok(())
}

/// Buckets points by pixel. Features are summed in point order and divided by
/// the bucket size; weights are summed in point order.
fn aggregate_from_pixels(
    pixels: &[u32],
    features: Option<&FeatureSet3D>,
    weights: Option<&ConfidenceSet3D>,
    k: &CameraIntrinsics,
    dim: usize,
) -> AggregatedMap {
    let n_pix = k.pixel_count();
    let mut occupancy = vec![0u32; n_pix];
    for &p in pixels {
        if p != NO_PIXEL {
            occupancy[p as usize] += 1;
        }
    }
    let mut slot = vec![NO_PIXEL; n_pix];
    let mut occupied = Vec::new();
    for (p, &c) in occupancy.iter().enumerate() {
        if c > 0 {
            slot[p] = occupied.len() as u32;
            occupied.push(p as u32);
        }
    }
    let mut sums = vec![0.0; occupied.len() * dim];
    if let Some(f) = features {
        for (j, &p) in pixels.iter().enumerate() {
            if p != NO_PIXEL {
                let s = slot[p as usize] as usize;
                for (acc, x) in sums[s * dim..(s + 1) * dim].iter_mut().zip(f.row(j)) {
                    *acc += x;
                }
            }
        }
        for (row, &p) in sums.chunks_exact_mut(dim).zip(&occupied) {
            let count = occupancy[p as usize] as f64;
            row.iter_mut().for_each(|x| *x /= count);
        }
    }
    let mut wsum = vec![0.0; n_pix];
    if let Some(w) = weights {
        for (&p, &wj) in pixels.iter().zip(w.values()) {
            if p != NO_PIXEL {
                wsum[p as usize] += wj;
            }
        }
    }
    AggregatedMap {
        height: k.height,
        width: k.width,
        dim,
        occupancy,
        weights: wsum,
        occupied,
        features: sums,
    }
}

/// Mean-aggregates features and sum-aggregates weights under `pose`.
pub fn aggregate(
    cloud: &PointCloud,
    features: &FeatureSet3D,
    weights: &ConfidenceSet3D,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<AggregatedMap> {
    check_len(cloud, features.len(), "feature set")?;
    check_len(cloud, weights.len(), "weight set")?;
    let rotated = rotate_all(cloud.points(), pose.rotation());
    let pixels = pixel_indices(&rotated, pose.translation(), intrinsics);
    Ok(aggregate_from_pixels(
        &pixels,
        Some(features),
        Some(weights),
        intrinsics,
        features.dim(),
    ))
}

/// Mean 3D feature per pixel and occupancy. The weight plane of the returned
/// map is zero; see [`aggregate_weights`] and [`aggregate`].
pub fn aggregate_3d(
    cloud: &PointCloud,
    features: &FeatureSet3D,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<AggregatedMap> {
    check_len(cloud, features.len(), "feature set")?;
    let rotated = rotate_all(cloud.points(), pose.rotation());
    let pixels = pixel_indices(&rotated, pose.translation(), intrinsics);
    Ok(aggregate_from_pixels(
        &pixels,
        Some(features),
        None,
        intrinsics,
        features.dim(),
    ))
}

/// Summed 3D weights per pixel (a sum, not a mean).
pub fn aggregate_weights(
    cloud: &PointCloud,
    weights: &ConfidenceSet3D,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<f64>> {
    check_len(cloud, weights.len(), "weight set")?;
    let rotated = rotate_all(cloud.points(), pose.rotation());
    let pixels = pixel_indices(&rotated, pose.translation(), intrinsics);
    Ok(aggregate_from_pixels(&pixels, None, Some(weights), intrinsics, 1).weights)
}

/// Tracks how many units are alive at once.
#[derive(Debug, Default)]
pub struct LiveCounter {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl LiveCounter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn acquire(self: &Arc<Self>) -> LiveGuard {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        LiveGuard(Arc::clone(self))
    }
}

#[derive(Debug)]
struct LiveGuard(Arc<LiveCounter>);

impl Drop for LiveGuard {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// One candidate's slice of the cost volume: image features `F²ᵈ`, the
/// aggregated map `F̃`, and both weight planes.
#[derive(Debug)]
pub struct CostVolumeUnit<'a> {
    pub candidate_index: usize,
    image_features: &'a FeatureMap2D,
    image_weights: &'a ConfidenceMap2D,
    aggregated: AggregatedMap,
    expected_weight: Option<f64>,
    _guard: Option<LiveGuard>,
}

impl<'a> CostVolumeUnit<'a> {
    pub fn image_features(&self) -> &'a FeatureMap2D {
        self.image_features
    }

    pub fn image_weights(&self) -> &'a ConfidenceMap2D {
        self.image_weights
    }

    pub fn aggregated(&self) -> &AggregatedMap {
        &self.aggregated
    }

    /// Sum of the 3D weights over the whole cloud. Set for units streamed by
    /// [`build_volume`], absent for units from [`build_unit`].
    pub fn expected_weight(&self) -> Option<f64> {
        self.expected_weight
    }

    pub fn with_expected_weight(mut self, total: f64) -> Self {
        self.expected_weight = Some(total);
        self
    }

    pub fn height(&self) -> usize {
        self.image_features.height()
    }

    pub fn width(&self) -> usize {
        self.image_features.width()
    }

    /// Feature dimension `f` of each half.
    pub fn dim(&self) -> usize {
        self.image_features.dim()
    }

    /// Width of the concatenated feature channels, `2f`.
    pub fn channels(&self) -> usize {
        2 * self.dim()
    }

    /// `Cat(F²ᵈ, F̃)` at one pixel.
    pub fn pixel_channels(&self, pixel: usize) -> Vec<f64> {
        let mut out = self.image_features.pixel(pixel).to_vec();
        match self.aggregated.feature(pixel) {
            Some(row) => out.extend_from_slice(row),
            None => out.extend(std::iter::repeat_n(0.0, self.dim())),
        }
        out
    }
}

/// Bundles a unit, checking that all parts share `H`, `W` and `f`.
pub fn build_unit<'a>(
    image_features: &'a FeatureMap2D,
    image_weights: &'a ConfidenceMap2D,
    aggregated: AggregatedMap,
    index: usize,
) -> Result<CostVolumeUnit<'a>> {
    let (h, w, f) = (image_features.height(), image_features.width(), image_features.dim());
    if aggregated.height != h || aggregated.width != w || aggregated.dim != f {
        return Err(Error::ShapeMismatch(format!(
            "aggregated map {}x{}x{} vs image features {h}x{w}x{f}",
            aggregated.height, aggregated.width, aggregated.dim
        )));
    }
    if image_weights.height() != h || image_weights.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "image weights {}x{} vs image features {h}x{w}",
            image_weights.height(),
            image_weights.width()
        )));
    }
    Ok(CostVolumeUnit {
        candidate_index: index,
        image_features,
        image_weights,
        aggregated,
        expected_weight: None,
        _guard: None,
    })
}

/// Per-scene tensors the volume is built from (ZOIF and weighting already
/// applied by the caller).
#[derive(Debug, Clone, Copy)]
pub struct VolumeInputs<'a> {
    pub cloud: &'a PointCloud,
    pub intrinsics: &'a CameraIntrinsics,
    pub features_2d: &'a FeatureMap2D,
    pub features_3d: &'a FeatureSet3D,
    pub weights_2d: &'a ConfidenceMap2D,
    pub weights_3d: &'a ConfidenceSet3D,
}

impl VolumeInputs<'_> {
    pub fn validate(&self) -> Result<()> {
        let k = self.intrinsics;
        check_len(self.cloud, self.features_3d.len(), "feature set")?;
        check_len(self.cloud, self.weights_3d.len(), "weight set")?;
        if self.features_2d.height() != k.height || self.features_2d.width() != k.width {
            return Err(Error::ShapeMismatch("2D features do not match intrinsics".into()));
        }
        if self.weights_2d.height() != k.height || self.weights_2d.width() != k.width {
            return Err(Error::ShapeMismatch("2D weights do not match intrinsics".into()));
        }
        if self.features_2d.dim() != self.features_3d.dim() {
            return Err(Error::ShapeMismatch("2D and 3D feature dims differ".into()));
        }
        Ok(())
    }
}

/// Lazily yields the cost volume one segment (≤ `segment_size` units) at a
/// time, in candidate order. Units inside a segment are built in parallel.
pub struct VolumeStream<'a> {
    candidates: &'a [Pose],
    inputs: VolumeInputs<'a>,
    segment_size: usize,
    next: usize,
    counter: Option<Arc<LiveCounter>>,
}

impl<'a> VolumeStream<'a> {
    /// Registers every unit produced from now on with `counter`.
    pub fn instrumented(mut self, counter: Arc<LiveCounter>) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn len_candidates(&self) -> usize {
        self.candidates.len()
    }

    fn build_segment(&self, start: usize, end: usize) -> Result<Vec<CostVolumeUnit<'a>>> {
        let segment = &self.candidates[start..end];
        let points = self.inputs.cloud.points();
        // Candidates are rotation-major, so consecutive runs share a rotation.
        let mut group_of = Vec::with_capacity(segment.len());
        let mut rotations: Vec<&Matrix3<f64>> = Vec::new();
        for pose in segment {
            if rotations.last().is_none_or(|r| *r != pose.rotation()) {
                rotations.push(pose.rotation());
            }
            group_of.push(rotations.len() - 1);
        }
        let rotated: Vec<Vec<Vector3<f64>>> = rotations.par_iter().map(|r| rotate_all(points, r)).collect();
        let inputs = self.inputs;
        let total: f64 = inputs.weights_3d.values().iter().sum();
        let units: Vec<CostVolumeUnit<'a>> = segment
            .par_iter()
            .zip(group_of.par_iter())
            .enumerate()
            .map(|(i, (pose, &g))| {
                let pixels = pixel_indices(&rotated[g], pose.translation(), inputs.intrinsics);
                let map = aggregate_from_pixels(
                    &pixels,
                    Some(inputs.features_3d),
                    Some(inputs.weights_3d),
                    inputs.intrinsics,
                    inputs.features_3d.dim(),
                );
                let mut unit = build_unit(inputs.features_2d, inputs.weights_2d, map, start + i)?;
                unit = unit.with_expected_weight(total);
                unit._guard = self.counter.as_ref().map(|c| c.acquire());
                Ok(unit)
            })
            .collect::<Result<_>>()?;
        Ok(units)
    }
}

impl<'a> Iterator for VolumeStream<'a> {
    type Item = Result<Vec<CostVolumeUnit<'a>>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.candidates.len() {
            return None;
        }
        let start = self.next;
        let end = (start + self.segment_size).min(self.candidates.len());
        self.next = end;
        Some(self.build_segment(start, end))
    }
}

/// Streams the `N_p` cost-volume units for `candidates`.
pub fn build_volume<'a>(
    candidates: &'a [Pose],
    inputs: VolumeInputs<'a>,
    segment_size: usize,
) -> Result<VolumeStream<'a>> {
    if segment_size < 1 {
        return Err(Error::InvalidInput("segment_size must be >= 1".into()));
    }
    inputs.validate()?;
    Ok(VolumeStream {
        candidates,
        inputs,
        segment_size,
        next: 0,
        counter: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{euler_to_rotation, project};
    use crate::sampling::{sample_candidates, SamplingSpace};
    use std::collections::BTreeMap;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap()
    }

    #[test]
    fn two_points_same_pixel_average() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, 7.0)]).unwrap();
        let f = FeatureSet3D::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let w = ConfidenceSet3D::new(vec![0.5, 1.0]).unwrap();
        let map = aggregate(&cloud, &f, &w, &Pose::identity(), &k()).unwrap();
        let pix = 4 * 8 + 4;
        assert_eq!(map.feature(pix).unwrap(), &[2.0, 4.0]);
        assert_eq!(map.occupancy()[pix], 2);
        assert_eq!(map.weights()[pix], 1.5);
        assert_eq!(map.occupied_pixels(), &[pix as u32]);
        assert_eq!(
            aggregate_weights(&cloud, &w, &Pose::identity(), &k()).unwrap()[pix],
            1.5
        );
    }

    #[test]
    fn all_behind_is_empty() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, -5.0), Vector3::new(1.0, 0.0, -1.0)]).unwrap();
        let f = FeatureSet3D::new(2, 2, vec![1.0; 4]).unwrap();
        let map = aggregate_3d(&cloud, &f, &Pose::identity(), &k()).unwrap();
        assert!(map.is_empty());
        assert!(map.occupancy().iter().all(|&c| c == 0));
        assert!(map.dense_features().iter().all(|&x| x == 0.0));
        let w = ConfidenceSet3D::uniform(2, 1.0);
        assert!(aggregate_weights(&cloud, &w, &Pose::identity(), &k())
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0)]).unwrap();
        let f = FeatureSet3D::new(2, 2, vec![1.0; 4]).unwrap();
        assert!(aggregate_3d(&cloud, &f, &Pose::identity(), &k()).is_err());
    }

    #[test]
    fn unit_concatenates_halves() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0)]).unwrap();
        let f3 = FeatureSet3D::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f2 = FeatureMap2D::new(8, 8, 4, (0..256).map(|x| x as f64).collect()).unwrap();
        let w2 = ConfidenceMap2D::uniform(8, 8, 1.0);
        let map = aggregate_3d(&cloud, &f3, &Pose::identity(), &k()).unwrap();
        let unit = build_unit(&f2, &w2, map, 0).unwrap();
        assert_eq!(unit.channels(), 8);
        let pix = 36;
        let ch = unit.pixel_channels(pix);
        assert_eq!(&ch[..4], f2.pixel(pix));
        assert_eq!(&ch[4..], &[1.0, 2.0, 3.0, 4.0]);
        // Unoccupied pixel: second half zero.
        assert!(unit.pixel_channels(0)[4..].iter().all(|&x| x == 0.0));
        let wrong = FeatureMap2D::new(8, 8, 2, vec![0.0; 128]).unwrap();
        let map = aggregate_3d(&cloud, &f3, &Pose::identity(), &k()).unwrap();
        assert!(build_unit(&wrong, &w2, map, 0).is_err());
    }

    fn brute_force(
        cloud: &PointCloud,
        f: &FeatureSet3D,
        w: &ConfidenceSet3D,
        pose: &Pose,
        k: &CameraIntrinsics,
    ) -> BTreeMap<usize, (usize, Vec<f64>, f64)> {
        let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (j, p) in cloud.points().iter().enumerate() {
            if let Some(px) = project(p, pose, k) {
                buckets.entry(px.v * k.width + px.u).or_default().push(j);
            }
        }
        buckets
            .into_iter()
            .map(|(pix, js)| {
                let mut mean = vec![0.0; f.dim()];
                for &j in &js {
                    for (m, x) in mean.iter_mut().zip(f.row(j)) {
                        *m += x / js.len() as f64;
                    }
                }
                let wsum = js.iter().map(|&j| w.values()[j]).sum();
                (pix, (js.len(), mean, wsum))
            })
            .collect()
    }

    #[test]
    fn stream_matches_direct_aggregation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics::new(8.0, 8.0, 6.0, 4.0, 12, 8).unwrap();
        let cloud = PointCloud::new(
            (0..300)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-6.0..6.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-2.0..12.0),
                    )
                })
                .collect(),
        )
        .unwrap();
        let f3 = FeatureSet3D::new(300, 3, (0..900).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w3 = ConfidenceSet3D::new((0..300).map(|_| rng.random()).collect()).unwrap();
        let f2 = FeatureMap2D::new(8, 12, 3, vec![0.1; 288]).unwrap();
        let w2 = ConfidenceMap2D::uniform(8, 12, 1.0);
        let mut space = SamplingSpace::default();
        space.rotation[0].count = 3;
        space.translation[0].count = 3;
        space.translation[2].count = 3;
        let start = crate::geometry::Pose::new(euler_to_rotation(10.0, 0.0, 0.0), Vector3::zeros()).unwrap();
        let cands = sample_candidates(&start, &space).unwrap();
        let inputs = VolumeInputs {
            cloud: &cloud,
            intrinsics: &k,
            features_2d: &f2,
            features_3d: &f3,
            weights_2d: &w2,
            weights_3d: &w3,
        };
        let mut seen = 0;
        for seg in build_volume(&cands, inputs, 4).unwrap() {
            for unit in seg.unwrap() {
                assert_eq!(unit.candidate_index, seen);
                let direct = aggregate(&cloud, &f3, &w3, &cands[seen], &k).unwrap();
                assert_eq!(unit.aggregated(), &direct);
                let oracle = brute_force(&cloud, &f3, &w3, &cands[seen], &k);
                assert_eq!(direct.occupied_pixels().len(), oracle.len());
                for (pix, (count, mean, wsum)) in oracle {
                    assert_eq!(direct.occupancy()[pix] as usize, count);
                    assert!((direct.weights()[pix] - wsum).abs() < 1e-12);
                    for (a, b) in direct.feature(pix).unwrap().iter().zip(&mean) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
                seen += 1;
            }
        }
        assert_eq!(seen, 27);
    }

    #[test]
    fn segment_peak_is_bounded() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0)]).unwrap();
        let f3 = FeatureSet3D::new(1, 1, vec![1.0]).unwrap();
        let w3 = ConfidenceSet3D::uniform(1, 1.0);
        let f2 = FeatureMap2D::new(8, 8, 1, vec![0.0; 64]).unwrap();
        let w2 = ConfidenceMap2D::uniform(8, 8, 1.0);
        let cands = sample_candidates(&Pose::identity(), &SamplingSpace::default()).unwrap();
        let inputs = VolumeInputs {
            cloud: &cloud,
            intrinsics: &k(),
            features_2d: &f2,
            features_3d: &f3,
            weights_2d: &w2,
            weights_3d: &w3,
        };
        let counter = LiveCounter::new();
        let mut total = 0;
        for seg in build_volume(&cands, inputs, 27).unwrap().instrumented(counter.clone()) {
            total += seg.unwrap().len();
        }
        assert_eq!(total, 729);
        assert_eq!(counter.peak(), 27);
        assert_eq!(counter.live(), 0);
        assert!(build_volume(&cands, inputs, 0).is_err());
    }
}
