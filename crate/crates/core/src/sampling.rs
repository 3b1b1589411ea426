//! Candidate pose grids around the current estimate and the coarse-to-fine
//! schedule that shrinks them.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{compose_pose, euler_to_rotation, pose_errors, Pose};

/// One searched degree of freedom: a uniform inclusive grid over
/// `[-half_range, +half_range]` with `count` samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisGrid {
    pub enabled: bool,
    pub half_range: f64,
    pub count: usize,
}

impl AxisGrid {
    pub const DISABLED: AxisGrid = AxisGrid {
        enabled: false,
        half_range: 0.0,
        count: 1,
    };

    pub fn new(half_range: f64, count: usize) -> Self {
        Self {
            enabled: true,
            half_range,
            count,
        }
    }

    /// Grid offsets in ascending order. Disabled axes yield the single offset 0.
    ///
    /// Each offset is `half_range · k / (count − 1)` for the integer
    /// `k = 2i − (count − 1)`, so the grid is exactly symmetric and the middle
    /// sample is exactly zero.
    pub fn offsets(&self) -> Vec<f64> {
        if !self.enabled || self.count <= 1 {
            return vec![0.0];
        }
        let denom = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                let k = 2 * i as i64 - (self.count as i64 - 1);
                self.half_range * k as f64 / denom
            })
            .collect()
    }

    pub fn step(&self) -> f64 {
        if !self.enabled || self.count <= 1 {
            0.0
        } else {
            2.0 * self.half_range / (self.count - 1) as f64
        }
    }

    fn effective_count(&self) -> usize {
        if self.enabled {
            self.count
        } else {
            1
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.count == 0 || self.count.is_multiple_of(2) {
            return Err(invalid(format!(
                "{name}: sample count {} must be odd and >= 1",
                self.count
            )));
        }
        if !(self.half_range >= 0.0 && self.half_range.is_finite()) {
            return Err(invalid(format!(
                "{name}: range {} must be finite and >= 0",
                self.half_range
            )));
        }
        Ok(())
    }
}

/// The current rotation (degrees) and translation (meters) search box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpace {
    /// Yaw, pitch, roll.
    pub rotation: [AxisGrid; 3],
    /// Camera-frame x, y, z.
    pub translation: [AxisGrid; 3],
}

const ROT_NAMES: [&str; 3] = ["yaw", "pitch", "roll"];
const TRANS_NAMES: [&str; 3] = ["tx", "ty", "tz"];

impl Default for SamplingSpace {
    /// Yaw over the full circle with 9 samples and a 9×9 ground-plane grid
    /// spanning 10 m (camera x and z; y is the vertical axis).
    fn default() -> Self {
        Self {
            rotation: [AxisGrid::new(180.0, 9), AxisGrid::DISABLED, AxisGrid::DISABLED],
            translation: [AxisGrid::new(5.0, 9), AxisGrid::DISABLED, AxisGrid::new(5.0, 9)],
        }
    }
}

impl SamplingSpace {
    /// A space with a single candidate: the current pose.
    pub fn point() -> Self {
        Self {
            rotation: [AxisGrid::DISABLED; 3],
            translation: [AxisGrid::DISABLED; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, name) in self.rotation.iter().zip(ROT_NAMES) {
            axis.validate(name)?;
        }
        for (axis, name) in self.translation.iter().zip(TRANS_NAMES) {
            axis.validate(name)?;
        }
        Ok(())
    }

    pub fn rotation_count(&self) -> usize {
        self.rotation.iter().map(AxisGrid::effective_count).product()
    }

    pub fn translation_count(&self) -> usize {
        self.translation.iter().map(AxisGrid::effective_count).product()
    }

    /// `N_p = N_r · N_t`.
    pub fn candidate_count(&self) -> usize {
        self.rotation_count() * self.translation_count()
    }

    /// Full width (2 × largest enabled half-range) of the rotation box, degrees.
    pub fn rotation_full_range(&self) -> f64 {
        full_range(&self.rotation)
    }

    /// Full width of the translation box, meters.
    pub fn translation_full_range(&self) -> f64 {
        full_range(&self.translation)
    }

    /// Copy with every rotation range scaled by `rot` and translation range by `trans`.
    pub fn scaled(&self, rot: f64, trans: f64) -> Self {
        let mut out = *self;
        for a in out.rotation.iter_mut() {
            a.half_range *= rot;
        }
        for a in out.translation.iter_mut() {
            a.half_range *= trans;
        }
        out
    }

    /// Candidate index of the zero offset (the current pose).
    pub fn center_index(&self) -> usize {
        let mut r = 0;
        for a in &self.rotation {
            let c = a.effective_count();
            r = r * c + c / 2;
        }
        let mut t = 0;
        for a in &self.translation {
            let c = a.effective_count();
            t = t * c + c / 2;
        }
        r * self.translation_count() + t
    }
}

fn full_range(axes: &[AxisGrid; 3]) -> f64 {
    axes.iter()
        .filter(|a| a.enabled)
        .map(|a| 2.0 * a.half_range)
        .fold(0.0, f64::max)
}

/// Coarse-to-fine schedule: the initial box, its per-iteration shrink factors
/// and the number of iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub initial_space: SamplingSpace,
    pub rot_shrink: f64,
    pub trans_shrink: f64,
    pub iterations: usize,
}

/// Number of iterations in the default schedule.
pub const DEFAULT_ITERATIONS: usize = 9;

impl Default for Schedule {
    /// Nine iterations whose factors take the full rotation range from 360°
    /// to 0.9° and the translation range from 10 m to 0.45 m by the last one.
    fn default() -> Self {
        let shrinks = (DEFAULT_ITERATIONS - 1) as f64;
        Self {
            initial_space: SamplingSpace::default(),
            rot_shrink: (0.9f64 / 360.0).powf(1.0 / shrinks),
            trans_shrink: (0.45f64 / 10.0).powf(1.0 / shrinks),
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        self.initial_space.validate()?;
        for (name, s) in [("rot_shrink", self.rot_shrink), ("trans_shrink", self.trans_shrink)] {
            if !(s > 0.0 && s < 1.0) {
                return Err(invalid(format!("{name} = {s} must lie in (0, 1)")));
            }
        }
        if self.iterations < 1 {
            return Err(invalid("schedule needs at least one iteration"));
        }
        Ok(())
    }

    /// The space searched at zero-based iteration `iteration`.
    pub fn space_at(&self, iteration: usize) -> SamplingSpace {
        let mut space = self.initial_space;
        for _ in 0..iteration {
            space = shrink(&space, self);
        }
        space
    }
}

/// Multiplies the ranges by the schedule's shrink factors; counts are kept so
/// the grid step shrinks with the range.
pub fn shrink(space: &SamplingSpace, schedule: &Schedule) -> SamplingSpace {
    space.scaled(schedule.rot_shrink, schedule.trans_shrink)
}

/// Euler offsets (degrees) and translation offsets of a grid.
pub type GridOffsets = (Vec<[f64; 3]>, Vec<Vector3<f64>>);

/// Rotation and translation offsets of every candidate, rotation-major.
///
/// Rotation combinations iterate yaw, then pitch, then roll (yaw slowest);
/// translations iterate x, then y, then z (x slowest). Candidate
/// `r · N_t + t` pairs rotation combination `r` with translation `t`.
pub fn candidate_offsets(space: &SamplingSpace) -> Result<GridOffsets> {
    space.validate()?;
    let [yaw, pitch, roll] = space.rotation.map(|a| a.offsets());
    let mut rots = Vec::with_capacity(space.rotation_count());
    for &y in &yaw {
        for &p in &pitch {
            for &r in &roll {
                rots.push([y, p, r]);
            }
        }
    }
    let [tx, ty, tz] = space.translation.map(|a| a.offsets());
    let mut trans = Vec::with_capacity(space.translation_count());
    for &x in &tx {
        for &y in &ty {
            for &z in &tz {
                trans.push(Vector3::new(x, y, z));
            }
        }
    }
    Ok((rots, trans))
}

/// All `N_p` candidate poses around `current`, in rotation-major order.
pub fn sample_candidates(current: &Pose, space: &SamplingSpace) -> Result<Vec<Pose>> {
    let (rots, trans) = candidate_offsets(space)?;
    let mut out = Vec::with_capacity(rots.len() * trans.len());
    for [y, p, r] in rots {
        let dr = euler_to_rotation(y, p, r);
        for dt in &trans {
            out.push(compose_pose(current, &dr, dt)?);
        }
    }
    Ok(out)
}

/// Range-normalised pose distance used to pick the supervision target:
/// `rre / rot_full_range + rte / trans_full_range`. A term whose range is
/// zero is dropped (it is constant across the grid).
pub fn normalized_distance(candidate: &Pose, truth: &Pose, space: &SamplingSpace) -> f64 {
    let e = pose_errors(candidate, truth);
    let rot = space.rotation_full_range();
    let trans = space.translation_full_range();
    let mut d = 0.0;
    if rot > 0.0 {
        d += e.rre / rot;
    }
    if trans > 0.0 {
        d += e.rte / trans;
    }
    d
}

/// Index of the candidate closest to `truth`; ties go to the lowest index.
pub fn nearest_candidate_index(candidates: &[Pose], truth: &Pose, space: &SamplingSpace) -> Result<usize> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate list"));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d = normalized_distance(c, truth, space);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_space_yields_current() {
        let current = Pose::new(euler_to_rotation(12.0, 0.0, 0.0), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let zero_ranges = SamplingSpace {
            rotation: [AxisGrid::new(0.0, 1); 3],
            translation: [AxisGrid::new(0.0, 1); 3],
        };
        for space in [SamplingSpace::point(), zero_ranges] {
            let c = sample_candidates(&current, &space).unwrap();
            assert_eq!(c, vec![current]);
        }
    }

    #[test]
    fn default_grid_has_729_candidates() {
        let space = SamplingSpace::default();
        assert_eq!(space.candidate_count(), 729);
        assert_eq!(sample_candidates(&Pose::identity(), &space).unwrap().len(), 729);
    }

    #[test]
    fn translation_offsets_step() {
        let axis = AxisGrid::new(5.0, 9);
        let off = axis.offsets();
        assert_eq!(off, vec![-5.0, -3.75, -2.5, -1.25, 0.0, 1.25, 2.5, 3.75, 5.0]);
        assert_eq!(axis.step(), 1.25);
    }

    #[test]
    fn even_counts_rejected() {
        let mut space = SamplingSpace::default();
        space.rotation[0].count = 8;
        assert!(sample_candidates(&Pose::identity(), &space).is_err());
        space.rotation[0].count = 9;
        space.translation[0].half_range = -1.0;
        assert!(space.validate().is_err());
    }

    #[test]
    fn center_index_is_current_pose() {
        let current = Pose::new(euler_to_rotation(40.0, 0.0, 0.0), Vector3::new(3.0, 0.0, -1.0)).unwrap();
        let space = SamplingSpace::default();
        let c = sample_candidates(&current, &space).unwrap();
        assert_eq!(c[space.center_index()], current);
        assert_eq!(space.center_index(), 4 * 81 + 40);
    }

    #[test]
    fn ordering_is_rotation_major() {
        let space = SamplingSpace::default();
        let c = sample_candidates(&Pose::identity(), &space).unwrap();
        // First 81 share the first yaw (-180°).
        for p in &c[..81] {
            assert_eq!(p.rotation(), c[0].rotation());
        }
        assert_ne!(c[80].rotation(), c[81].rotation());
        assert_eq!(*c[0].translation(), Vector3::new(-5.0, 0.0, -5.0));
        assert_eq!(*c[1].translation(), Vector3::new(-5.0, 0.0, -3.75));
    }

    #[test]
    fn shrink_multiplies_ranges() {
        let schedule = Schedule {
            rot_shrink: 0.5,
            ..Default::default()
        };
        let out = shrink(&SamplingSpace::default(), &schedule);
        assert_eq!(out.rotation[0].half_range, 90.0);
        assert_eq!(out.rotation[0].count, 9);
    }

    #[test]
    fn default_schedule_endpoints() {
        let schedule = Schedule::default();
        let last = schedule.space_at(schedule.iterations - 1);
        assert!(last.rotation_full_range() < 1.0);
        assert!(last.translation_full_range() < 0.5);
        let before = schedule.space_at(schedule.iterations - 2);
        assert!(before.rotation_full_range() >= 1.0);
        assert!((schedule.rot_shrink - 0.472871).abs() < 1e-6);
        assert!((schedule.trans_shrink - 0.678659).abs() < 1e-6);
    }

    #[test]
    fn nearest_candidate_exact_and_ties() {
        let space = SamplingSpace::default();
        let c = sample_candidates(&Pose::identity(), &space).unwrap();
        assert_eq!(nearest_candidate_index(&c, &c[123], &space).unwrap(), 123);
        // Truth halfway between two translation samples along x.
        let truth = Pose::new(Matrix3::identity(), Vector3::new(0.625, 0.0, 0.0)).unwrap();
        let i = nearest_candidate_index(&c, &truth, &space).unwrap();
        assert_eq!(i, space.center_index());
        assert!(nearest_candidate_index(&[], &truth, &space).is_err());
    }

    use nalgebra::Matrix3;

    #[test]
    fn nearest_candidate_matches_brute_force() {
        let space = SamplingSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let current = Pose::new(euler_to_rotation(17.0, 0.0, 0.0), Vector3::new(1.0, 1.5, 2.0)).unwrap();
        let c = sample_candidates(&current, &space).unwrap();
        for _ in 0..20 {
            let truth = compose_pose(
                &current,
                &euler_to_rotation(rng.random_range(-180.0..180.0), 0.0, 0.0),
                &Vector3::new(rng.random_range(-5.0..5.0), 0.0, rng.random_range(-5.0..5.0)),
            )
            .unwrap();
            let mut brute = (0, f64::INFINITY);
            for (i, p) in c.iter().enumerate() {
                let e = pose_errors(p, &truth);
                let d = e.rre / 360.0 + e.rte / 10.0;
                if d < brute.1 {
                    brute = (i, d);
                }
            }
            assert_eq!(nearest_candidate_index(&c, &truth, &space).unwrap(), brute.0);
        }
    }

    proptest! {
        #[test]
        fn grid_properties(
            half in 0.0..50.0f64,
            counts in prop::array::uniform3(0usize..4),
            tcounts in prop::array::uniform3(0usize..3),
        ) {
            let space = SamplingSpace {
                rotation: counts.map(|c| AxisGrid::new(half, 2 * c + 1)),
                translation: tcounts.map(|c| AxisGrid::new(half / 10.0, 2 * c + 1)),
            };
            for axis in space.rotation.iter().chain(space.translation.iter()) {
                let off = axis.offsets();
                let mut neg: Vec<f64> = off.iter().map(|x| -x).collect();
                neg.reverse();
                prop_assert_eq!(&off, &neg);
                prop_assert!(off.contains(&0.0));
            }
            let current = Pose::new(euler_to_rotation(5.0, 6.0, 7.0), Vector3::new(1.0, 2.0, 3.0)).unwrap();
            let c = sample_candidates(&current, &space).unwrap();
            prop_assert_eq!(c.len(), space.candidate_count());
            prop_assert_eq!(c[space.center_index()], current);
        }

        #[test]
        fn shrink_strictly_decreases(s in 0.01..0.99f64, half in 0.1..180.0f64) {
            let mut schedule = Schedule {
                rot_shrink: s,
                trans_shrink: s,
                ..Default::default()
            };
            schedule.initial_space.rotation[0].half_range = half;
            let mut prev = schedule.initial_space;
            for _ in 0..10 {
                let next = shrink(&prev, &schedule);
                prop_assert!(next.rotation_full_range() < prev.rotation_full_range());
                prop_assert!(next.translation_full_range() < prev.translation_full_range());
                prev = next;
            }
        }
    }
}
