//! Synthetic registration problems.
//!
//! World frame: x/y span the ground, z points up. Scenes are a ground plane
//! plus boxes and walls sampled on their surfaces, so the projected occupancy
//! pattern changes with the camera pose.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{compose_pose, euler_to_rotation, frustum_mask, CameraIntrinsics, PointCloud, Pose};
use crate::util::derive_seed;

/// A registration instance: cloud, camera intrinsics and the pose that
/// solves it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: Pose,
    pub scene_id: u64,
    pub seed: u64,
}

/// Scene metadata written next to the cloud by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: u64,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: Pose,
    pub points: usize,
}

impl ScenePair {
    pub fn meta(&self) -> SceneMeta {
        SceneMeta {
            scene_id: self.scene_id,
            seed: self.seed,
            intrinsics: self.intrinsics,
            gt_pose: self.gt_pose,
            points: self.cloud.len(),
        }
    }

    /// Fraction of points inside the ground-truth frustum.
    pub fn frustum_fraction(&self) -> f64 {
        let mask = frustum_mask(&self.cloud, &self.gt_pose, &self.intrinsics);
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub n_points: usize,
    /// Side length of the square scene footprint, meters.
    pub extent: f64,
    pub n_boxes: usize,
    pub n_walls: usize,
    /// Share of points placed on the ground plane.
    pub ground_fraction: f64,
    pub camera_height: f64,
    pub intrinsics: CameraIntrinsics,
    pub min_frustum_fraction: f64,
    pub max_retries: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            n_points: 8192,
            extent: 30.0,
            n_boxes: 14,
            n_walls: 4,
            ground_fraction: 0.35,
            camera_height: 1.7,
            intrinsics: CameraIntrinsics::from_fov(96, 32, 80.0).expect("valid default intrinsics"),
            min_frustum_fraction: 0.2,
            max_retries: 64,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(invalid(format!("scene extent {} must be positive", self.extent)));
        }
        if self.n_points < 1 {
            return Err(invalid("scene needs at least one point"));
        }
        if !(0.0..=1.0).contains(&self.ground_fraction) {
            return Err(invalid("ground_fraction must lie in [0, 1]"));
        }
        if self.n_boxes + self.n_walls == 0 && self.ground_fraction < 1.0 {
            return Err(invalid("no primitives to hold the non-ground points"));
        }
        if !(0.0..=1.0).contains(&self.min_frustum_fraction) {
            return Err(invalid("min_frustum_fraction must lie in [0, 1]"));
        }
        self.intrinsics.validate()
    }
}

/// An axis-aligned rectangle face, sampled uniformly.
struct Face {
    origin: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
}

impl Face {
    fn area(&self) -> f64 {
        self.a.cross(&self.b).norm()
    }

    fn sample(&self, rng: &mut impl Rng) -> Vector3<f64> {
        self.origin + self.a * rng.random::<f64>() + self.b * rng.random::<f64>()
    }
}

/// Side faces and roof of an oriented box standing on the ground.
fn box_faces(center: (f64, f64), size: (f64, f64), height: f64, heading: f64) -> Vec<Face> {
    let (s, c) = heading.sin_cos();
    let ex = Vector3::new(c, s, 0.0) * size.0;
    let ey = Vector3::new(-s, c, 0.0) * size.1;
    let up = Vector3::new(0.0, 0.0, height);
    let corner = Vector3::new(center.0, center.1, 0.0) - ex / 2.0 - ey / 2.0;
    vec![
        Face {
            origin: corner,
            a: ex,
            b: up,
        },
        Face {
            origin: corner,
            a: ey,
            b: up,
        },
        Face {
            origin: corner + ex,
            a: ey,
            b: up,
        },
        Face {
            origin: corner + ey,
            a: ex,
            b: up,
        },
        Face {
            origin: corner + up,
            a: ex,
            b: ey,
        },
    ]
}

/// World-to-camera pose of a level camera at `center` looking along `heading`
/// (radians from +x). Camera x is right, y is down, z is forward.
pub fn level_camera(center: Vector3<f64>, heading: f64) -> Pose {
    let (s, c) = heading.sin_cos();
    let forward = Vector3::new(c, s, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let right = down.cross(&forward);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(r * center);
    Pose::new(r, t).expect("level camera rotation is orthonormal")
}

const GEOMETRY_STREAM: u64 = 1;
const CAMERA_STREAM: u64 = 2;
const PERTURB_STREAM: u64 = 3;

/// Builds a deterministic scene for `seed`.
///
/// The camera is placed between 35% and 50% of the extent from the scene
/// centre, facing the centre with up to ±30° of jitter; placements are
/// retried until at least `min_frustum_fraction` of the points are visible.
pub fn generate_scene(config: &SceneGenConfig, seed: u64) -> Result<ScenePair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, GEOMETRY_STREAM));
    let half = config.extent / 2.0;
    let mut faces = Vec::new();
    for _ in 0..config.n_boxes {
        let center = (rng.random_range(-0.8..0.8) * half, rng.random_range(-0.8..0.8) * half);
        let size = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0));
        faces.extend(box_faces(
            center,
            size,
            rng.random_range(1.0..6.0),
            rng.random_range(0.0..PI),
        ));
    }
    for _ in 0..config.n_walls {
        let center = (rng.random_range(-0.8..0.8) * half, rng.random_range(-0.8..0.8) * half);
        let size = (rng.random_range(6.0..15.0), 0.3);
        faces.extend(box_faces(
            center,
            size,
            rng.random_range(2.5..5.0),
            rng.random_range(0.0..PI),
        ));
    }
    let n_ground = if faces.is_empty() {
        config.n_points
    } else {
        (config.n_points as f64 * config.ground_fraction).round() as usize
    };
    let mut points = Vec::with_capacity(config.n_points);
    for _ in 0..n_ground {
        points.push(Vector3::new(
            rng.random_range(-half..half),
            rng.random_range(-half..half),
            0.0,
        ));
    }
    let areas: Vec<f64> = faces.iter().map(Face::area).collect();
    let total: f64 = areas.iter().sum();
    while points.len() < config.n_points {
        let mut pick = rng.random::<f64>() * total;
        let mut face = &faces[faces.len() - 1];
        for (f, &a) in faces.iter().zip(&areas) {
            if pick < a {
                face = f;
                break;
            }
            pick -= a;
        }
        points.push(face.sample(&mut rng));
    }
    let cloud = PointCloud::new(points)?;

    let mut cam_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, CAMERA_STREAM));
    for _ in 0..config.max_retries.max(1) {
        let r = cam_rng.random_range(0.35..0.5) * config.extent;
        let phi = cam_rng.random_range(0.0..2.0 * PI);
        let center = Vector3::new(r * phi.cos(), r * phi.sin(), config.camera_height);
        let heading = phi + PI + cam_rng.random_range(-PI / 6.0..PI / 6.0);
        let scene = ScenePair {
            cloud: cloud.clone(),
            intrinsics: config.intrinsics,
            gt_pose: level_camera(center, heading),
            scene_id: seed,
            seed,
        };
        if scene.frustum_fraction() >= config.min_frustum_fraction {
            return Ok(scene);
        }
    }
    Err(invalid(format!(
        "could not place a camera seeing {:.0}% of the scene after {} attempts",
        config.min_frustum_fraction * 100.0,
        config.max_retries
    )))
}

/// Range of the initial-pose perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Yaw is drawn uniformly from `[0, max_yaw_deg)`.
    pub max_yaw_deg: f64,
    /// Ground-plane offset drawn uniformly from the disc of this radius.
    pub max_offset_m: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            max_yaw_deg: 360.0,
            max_offset_m: 10.0,
        }
    }
}

/// Initial pose: the ground truth composed with a random yaw and a random
/// planar (camera x/z) offset. Zero ranges return the ground truth.
pub fn perturb_problem(scene: &ScenePair, config: &PerturbConfig, seed: u64) -> Result<Pose> {
    if !(config.max_yaw_deg >= 0.0 && config.max_offset_m >= 0.0) {
        return Err(invalid("perturbation ranges must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PERTURB_STREAM));
    let (yaw, offset) = draw_perturbation(&mut rng, config);
    compose_pose(&scene.gt_pose, &euler_to_rotation(yaw, 0.0, 0.0), &offset)
}

pub(crate) fn draw_perturbation(rng: &mut impl Rng, config: &PerturbConfig) -> (f64, Vector3<f64>) {
    let yaw = rng.random::<f64>() * config.max_yaw_deg;
    let r = config.max_offset_m * rng.random::<f64>().sqrt();
    let phi = rng.random::<f64>() * 2.0 * PI;
    (yaw, Vector3::new(r * phi.cos(), 0.0, r * phi.sin()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let config = SceneGenConfig::default();
        let a = generate_scene(&config, 42).unwrap();
        let b = generate_scene(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&config, 43).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn default_scenes_meet_frustum_coverage() {
        let config = SceneGenConfig::default();
        for seed in 0..10 {
            let scene = generate_scene(&config, seed).unwrap();
            assert_eq!(scene.cloud.len(), 8192);
            assert!(
                scene.frustum_fraction() >= 0.2,
                "seed {seed}: {}",
                scene.frustum_fraction()
            );
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let config = SceneGenConfig {
            extent: 0.0,
            ..Default::default()
        };
        assert!(generate_scene(&config, 0).is_err());
        let config = SceneGenConfig {
            min_frustum_fraction: 1.0,
            max_retries: 3,
            ..Default::default()
        };
        assert!(generate_scene(&config, 0).is_err());
    }

    #[test]
    fn level_camera_axes() {
        let pose = level_camera(Vector3::new(1.0, 2.0, 1.5), 0.0);
        // A point straight ahead lands on the optical axis.
        let q = pose.transform(&Vector3::new(11.0, 2.0, 1.5));
        assert!((q - Vector3::new(0.0, 0.0, 10.0)).amax() < 1e-12);
        // Up in the world is -y in the camera.
        let q = pose.transform(&Vector3::new(1.0, 2.0, 2.5));
        assert!((q - Vector3::new(0.0, -1.0, 0.0)).amax() < 1e-12);
        assert!((pose.camera_center() - Vector3::new(1.0, 2.0, 1.5)).amax() < 1e-12);
    }

    #[test]
    fn perturbation_determinism_and_zero_mode() {
        let scene = generate_scene(&SceneGenConfig::default(), 1).unwrap();
        let config = PerturbConfig::default();
        let a = perturb_problem(&scene, &config, 5).unwrap();
        assert_eq!(a, perturb_problem(&scene, &config, 5).unwrap());
        assert_ne!(a, perturb_problem(&scene, &config, 6).unwrap());
        let zero = PerturbConfig {
            max_yaw_deg: 0.0,
            max_offset_m: 0.0,
        };
        assert_eq!(perturb_problem(&scene, &zero, 5).unwrap(), scene.gt_pose);
    }

    #[test]
    fn perturbation_yaw_uniform_and_offsets_in_disc() {
        let config = PerturbConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut bins = [0usize; 36];
        for _ in 0..1000 {
            let (yaw, off) = draw_perturbation(&mut rng, &config);
            assert!((0.0..360.0).contains(&yaw));
            assert!(off.norm() <= 10.0 && off.y == 0.0);
            bins[(yaw / 10.0) as usize] += 1;
        }
        let expected = 1000.0 / 36.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of χ² with 35 degrees of freedom.
        assert!(chi2 < 57.34, "chi2 = {chi2}");
    }

    #[test]
    fn perturbation_rotates_about_vertical() {
        let scene = generate_scene(&SceneGenConfig::default(), 3).unwrap();
        let init = perturb_problem(&scene, &PerturbConfig::default(), 3).unwrap();
        // Camera y stays aligned with world down.
        let down_cam = init.rotation() * Vector3::new(0.0, 0.0, -1.0);
        assert!((down_cam - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-12);
    }
}
