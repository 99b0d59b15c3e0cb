//! Synthetic desk-scale scene generator.
//!
//! A scene is a set of axis-aligned boxes (static furniture-like objects
//! plus optional oscillating dynamic objects) on one side of the room. The
//! camera sweeps a box on the opposite side by steering smoothly through a
//! sequence of random waypoints, always looking near the static-object
//! centroid, so the trajectory covers the whole camera volume, every frame
//! faces the scene, and the rotation stays well inside the single-cover
//! region of the log-quaternion map. Detections are projected bounding
//! boxes of the object corners with Gaussian center/size noise, random
//! drops, and a minimum projected-area cut.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{CategoryInfo, DatasetManifest, FrameRecord, SplitLists};
use crate::error::{Error, Result};
use crate::geometry::{look_at_quat, quat_conj, quat_rotate, CameraIntrinsics, Pose, Vec3};
use crate::org::Detection;

/// Category table entry for generation; ids are assigned by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    #[serde(rename = "static")]
    pub is_static: bool,
}

fn default_categories() -> Vec<CategorySpec> {
    let statics = [
        "shelf", "table", "monitor", "plant", "lamp", "window", "door", "cabinet",
    ];
    let dynamics = ["person", "cart"];
    statics
        .iter()
        .map(|n| CategorySpec {
            name: (*n).into(),
            is_static: true,
        })
        .chain(dynamics.iter().map(|n| CategorySpec {
            name: (*n).into(),
            is_static: false,
        }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub categories: Vec<CategorySpec>,
    /// Number of static objects placed in the scene.
    pub object_count: usize,
    /// Number of oscillating (dynamic-category) objects.
    pub dynamic_count: usize,
    pub object_min: Vec3,
    pub object_max: Vec3,
    /// Per-axis object extent range in meters.
    pub extent_range: [f64; 2],
    pub camera_min: Vec3,
    pub camera_max: Vec3,
    pub frames: usize,
    /// Every `test_every`-th frame goes to the test sequence.
    pub test_every: usize,
    /// Maximum camera speed in meters per frame.
    pub max_step: f64,
    /// Velocity low-pass factor in [0, 1); higher is smoother.
    pub smoothing: f64,
    /// Look-target wander radius around the static centroid, in meters.
    pub look_jitter: f64,
    /// Std-dev of the Gaussian noise added to box center and size, px.
    pub pixel_noise: f64,
    /// Probability that a visible detection is dropped.
    pub det_dropout: f64,
    /// Projected boxes below this area (px^2) are discarded.
    pub min_area: f64,
    /// Oscillation amplitude of dynamic objects, meters.
    pub dynamic_amp: f64,
    /// Oscillation period of dynamic objects, frames.
    pub dynamic_period: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: default_categories(),
            object_count: 20,
            dynamic_count: 0,
            object_min: [0.5, -5.0, 0.0],
            object_max: [6.5, 5.0, 3.0],
            extent_range: [0.4, 1.2],
            camera_min: [-6.0, -4.0, 0.8],
            camera_max: [-2.0, 4.0, 2.2],
            frames: 2200,
            test_every: 11,
            max_step: 0.06,
            smoothing: 0.9,
            look_jitter: 0.8,
            pixel_noise: 1.0,
            det_dropout: 0.05,
            min_area: 100.0,
            dynamic_amp: 0.5,
            dynamic_period: 120.0,
            intrinsics: CameraIntrinsics::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("synth.frames", "must be at least 1"));
        }
        if self.test_every < 2 {
            return Err(Error::config("synth.test_every", "must be at least 2"));
        }
        if self.categories.is_empty() {
            return Err(Error::config("synth.categories", "must not be empty"));
        }
        if self.object_count > 0 && !self.categories.iter().any(|c| c.is_static) {
            return Err(Error::config(
                "synth.categories",
                "no static category available for static objects",
            ));
        }
        if self.dynamic_count > 0 && self.categories.iter().all(|c| c.is_static) {
            return Err(Error::config(
                "synth.categories",
                "no dynamic category available for dynamic objects",
            ));
        }
        if self.object_count == 0 {
            return Err(Error::config("synth.object_count", "must be at least 1"));
        }
        for a in 0..3 {
            if self.object_min[a] >= self.object_max[a] {
                return Err(Error::config("synth.object_min", "must be below object_max"));
            }
            if self.camera_min[a] >= self.camera_max[a] {
                return Err(Error::config("synth.camera_min", "must be below camera_max"));
            }
        }
        if !(self.extent_range[0] > 0.0 && self.extent_range[1] >= self.extent_range[0]) {
            return Err(Error::config("synth.extent_range", "must be positive and ordered"));
        }
        if !(self.max_step > 0.0) || !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(
                "synth.max_step",
                "max_step must be positive and smoothing in [0, 1)",
            ));
        }
        if !(0.0..=1.0).contains(&self.det_dropout) {
            return Err(Error::config("synth.det_dropout", "must be in [0, 1]"));
        }
        if self.pixel_noise < 0.0 || self.min_area < 0.0 {
            return Err(Error::config(
                "synth.pixel_noise",
                "noise and min_area must be non-negative",
            ));
        }
        if self.dynamic_period <= 0.0 {
            return Err(Error::config("synth.dynamic_period", "must be positive"));
        }
        self.intrinsics.validate()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            categories: self
                .categories
                .iter()
                .enumerate()
                .map(|(i, c)| CategoryInfo {
                    id: i as u32,
                    name: c.name.clone(),
                    is_static: c.is_static,
                })
                .collect(),
            intrinsics: self.intrinsics,
            splits: SplitLists {
                train: vec!["train".into()],
                test: vec!["test".into()],
            },
        }
    }
}

/// One box in the scene. Dynamic objects oscillate around `center` along
/// `amp` with the configured period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: u32,
    pub center: Vec3,
    pub extent: Vec3,
    pub dynamic: bool,
    pub amp: Vec3,
    pub phase: f64,
}

impl SceneObject {
    /// Center at a given frame index (static objects never move).
    pub fn center_at(&self, frame_index: usize, period: f64) -> Vec3 {
        if !self.dynamic {
            return self.center;
        }
        let s = (std::f64::consts::TAU * frame_index as f64 / period + self.phase).sin();
        [
            self.center[0] + self.amp[0] * s,
            self.center[1] + self.amp[1] * s,
            self.center[2] + self.amp[2] * s,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Mean center of the static objects — the camera's gaze anchor.
    pub fn static_centroid(&self) -> Vec3 {
        let statics: Vec<&SceneObject> = self.objects.iter().filter(|o| !o.dynamic).collect();
        if statics.is_empty() {
            return [0.0; 3];
        }
        let mut c = [0.0; 3];
        for o in &statics {
            for a in 0..3 {
                c[a] += o.center[a];
            }
        }
        for v in &mut c {
            *v /= statics.len() as f64;
        }
        c
    }
}

fn uniform_in<R: Rng>(rng: &mut R, lo: Vec3, hi: Vec3) -> Vec3 {
    [
        rng.random_range(lo[0]..hi[0]),
        rng.random_range(lo[1]..hi[1]),
        rng.random_range(lo[2]..hi[2]),
    ]
}

/// Samples object placements. Static objects draw from static categories,
/// dynamic objects from dynamic categories, both uniformly.
pub fn generate_scene<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let static_ids: Vec<u32> = cfg
        .categories
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_static)
        .map(|(i, _)| i as u32)
        .collect();
    let dynamic_ids: Vec<u32> = cfg
        .categories
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_static)
        .map(|(i, _)| i as u32)
        .collect();

    let mut objects = Vec::with_capacity(cfg.object_count + cfg.dynamic_count);
    for _ in 0..cfg.object_count {
        objects.push(SceneObject {
            category: static_ids[rng.random_range(0..static_ids.len())],
            center: uniform_in(rng, cfg.object_min, cfg.object_max),
            extent: [
                rng.random_range(cfg.extent_range[0]..=cfg.extent_range[1]),
                rng.random_range(cfg.extent_range[0]..=cfg.extent_range[1]),
                rng.random_range(cfg.extent_range[0]..=cfg.extent_range[1]),
            ],
            dynamic: false,
            amp: [0.0; 3],
            phase: 0.0,
        });
    }
    for _ in 0..cfg.dynamic_count {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        objects.push(SceneObject {
            category: dynamic_ids[rng.random_range(0..dynamic_ids.len())],
            center: uniform_in(rng, cfg.object_min, cfg.object_max),
            extent: [
                rng.random_range(cfg.extent_range[0]..=cfg.extent_range[1]),
                rng.random_range(cfg.extent_range[0]..=cfg.extent_range[1]),
                rng.random_range(cfg.extent_range[0]..=cfg.extent_range[1]),
            ],
            dynamic: true,
            amp: [
                cfg.dynamic_amp * theta.cos(),
                cfg.dynamic_amp * theta.sin(),
                0.0,
            ],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        });
    }
    Ok(Scene { objects })
}

/// Waypoint-seeking walk inside the camera box, gazing at the static
/// centroid plus a slowly wandering offset. The camera steers toward a
/// uniformly drawn waypoint with a low-passed velocity capped at
/// `max_step` and draws the next waypoint on arrival, so a long enough
/// sequence sweeps the whole box instead of diffusing near its start.
/// Returns one pose per frame.
pub fn sample_trajectory<R: Rng>(
    cfg: &SynthConfig,
    scene: &Scene,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    let centroid = scene.static_centroid();
    let mut pos = uniform_in(rng, cfg.camera_min, cfg.camera_max);
    let mut waypoint = uniform_in(rng, cfg.camera_min, cfg.camera_max);
    let arrive = 2.0 * cfg.max_step;
    let mut vel = [0.0; 3];
    let mut jitter = [0.0; 3];
    let mut poses = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let mut delta = [0.0; 3];
        for a in 0..3 {
            delta[a] = waypoint[a] - pos[a];
        }
        if (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt() < arrive {
            waypoint = uniform_in(rng, cfg.camera_min, cfg.camera_max);
            for a in 0..3 {
                delta[a] = waypoint[a] - pos[a];
            }
        }
        let dist = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
        let gain = if dist > 1e-12 {
            cfg.max_step / dist
        } else {
            0.0
        };
        let wander: Vec3 = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        for a in 0..3 {
            vel[a] = cfg.smoothing * vel[a] + (1.0 - cfg.smoothing) * gain * delta[a];
            jitter[a] = 0.95 * jitter[a] + 0.05 * cfg.look_jitter * wander[a];
        }
        let speed = (vel[0] * vel[0] + vel[1] * vel[1] + vel[2] * vel[2]).sqrt();
        if speed > cfg.max_step {
            for v in &mut vel {
                *v *= cfg.max_step / speed;
            }
        }
        for a in 0..3 {
            pos[a] += vel[a];
            if pos[a] < cfg.camera_min[a] {
                pos[a] = cfg.camera_min[a];
                vel[a] = 0.0;
            }
            if pos[a] > cfg.camera_max[a] {
                pos[a] = cfg.camera_max[a];
                vel[a] = 0.0;
            }
        }
        let target = [
            centroid[0] + jitter[0],
            centroid[1] + jitter[1],
            centroid[2] + jitter[2],
        ];
        let q = look_at_quat(pos, target)?;
        poses.push(Pose::from_parts(pos, q)?);
    }
    Ok(poses)
}

/// Projects every object into the camera at `pose` and returns the noisy
/// surviving detections. Objects with any corner behind the near plane,
/// fully outside the image, or with projected area below `min_area` are
/// skipped; survivors are dropped with probability `det_dropout`, then box
/// center and size receive Gaussian pixel noise (sizes clamped to 1 px).
pub fn render_detections<R: Rng>(
    cfg: &SynthConfig,
    scene: &Scene,
    pose: &Pose,
    frame_index: usize,
    rng: &mut R,
) -> Result<Vec<Detection>> {
    const NEAR: f64 = 0.05;
    let intr = &cfg.intrinsics;
    let noise = Normal::new(0.0, cfg.pixel_noise)
        .map_err(|e| Error::config("synth.pixel_noise", format!("{e}")))?;
    let q_inv = quat_conj(pose.quat());
    let mut dets = Vec::new();
    for obj in &scene.objects {
        let c = obj.center_at(frame_index, cfg.dynamic_period);
        let h = [obj.extent[0] / 2.0, obj.extent[1] / 2.0, obj.extent[2] / 2.0];
        let mut u_min = f64::INFINITY;
        let mut u_max = f64::NEG_INFINITY;
        let mut v_min = f64::INFINITY;
        let mut v_max = f64::NEG_INFINITY;
        let mut behind = false;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let world = [c[0] + sx * h[0], c[1] + sy * h[1], c[2] + sz * h[2]];
                    let rel = [
                        world[0] - pose.t[0],
                        world[1] - pose.t[1],
                        world[2] - pose.t[2],
                    ];
                    let cam = quat_rotate(q_inv, rel);
                    match (cam[2] > NEAR, intr.project(cam)) {
                        (true, Some((u, v))) => {
                            u_min = u_min.min(u);
                            u_max = u_max.max(u);
                            v_min = v_min.min(v);
                            v_max = v_max.max(v);
                        }
                        _ => behind = true,
                    }
                }
            }
        }
        if behind {
            continue;
        }
        let u_lo = u_min.max(0.0);
        let u_hi = u_max.min(intr.width);
        let v_lo = v_min.max(0.0);
        let v_hi = v_max.min(intr.height);
        if u_hi <= u_lo || v_hi <= v_lo {
            continue;
        }
        let w = u_hi - u_lo;
        let hgt = v_hi - v_lo;
        if w * hgt < cfg.min_area {
            continue;
        }
        if rng.random::<f64>() < cfg.det_dropout {
            continue;
        }
        let x = (u_lo + u_hi) / 2.0 + noise.sample(rng);
        let y = (v_lo + v_hi) / 2.0 + noise.sample(rng);
        let w = (w + noise.sample(rng)).max(1.0);
        let hgt = (hgt + noise.sample(rng)).max(1.0);
        dets.push(Detection {
            x,
            y,
            w,
            h: hgt,
            category: obj.category,
            confidence: 0.5 + 0.5 * rng.random::<f64>(),
        });
    }
    Ok(dets)
}

/// A fully generated dataset: scene geometry, per-frame records, and the
/// manifest describing categories/intrinsics/splits.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub scene: Scene,
    pub manifest: DatasetManifest,
    pub frames: Vec<FrameRecord>,
}

impl SynthOutput {
    pub fn split_len(&self, seq: &str) -> usize {
        self.frames.iter().filter(|f| f.seq == seq).count()
    }
}

/// Generates scene, trajectory, and detections from a single seed. Every
/// `test_every`-th frame is assigned to the `test` sequence, the rest to
/// `train`; frame ids are global and shared across both.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = generate_scene(cfg, &mut rng)?;
    let poses = sample_trajectory(cfg, &scene, &mut rng)?;
    let mut frames = Vec::with_capacity(cfg.frames);
    for (i, pose) in poses.iter().enumerate() {
        let detections = render_detections(cfg, &scene, pose, i, &mut rng)?;
        let seq = if (i + 1) % cfg.test_every == 0 {
            "test"
        } else {
            "train"
        };
        frames.push(FrameRecord {
            frame_id: i as u64,
            seq: seq.into(),
            t: pose.t,
            q: pose.quat(),
            detections,
        });
    }
    Ok(SynthOutput {
        scene,
        manifest: cfg.manifest(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_log;

    fn quiet_cfg() -> SynthConfig {
        SynthConfig {
            pixel_noise: 0.0,
            det_dropout: 0.0,
            min_area: 0.0,
            frames: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_frames_is_a_config_error() {
        let cfg = SynthConfig {
            frames: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn static_objects_need_a_static_category() {
        let cfg = SynthConfig {
            categories: vec![CategorySpec {
                name: "person".into(),
                is_static: false,
            }],
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn axis_aligned_face_on_box_projects_to_exact_width() {
        // Camera at origin looking straight down +x (world), box centered
        // on the optical axis: the near face dominates the projection and
        // the box width in pixels is fx * extent / (depth - extent/2).
        let mut cfg = quiet_cfg();
        cfg.intrinsics = CameraIntrinsics {
            width: 4000.0,
            height: 4000.0,
            fx: 500.0,
            fy: 500.0,
            cx: 2000.0,
            cy: 2000.0,
        };
        let scene = Scene {
            objects: vec![SceneObject {
                category: 0,
                center: [4.0, 0.0, 1.5],
                extent: [0.8, 0.6, 0.6],
                dynamic: false,
                amp: [0.0; 3],
                phase: 0.0,
            }],
        };
        let eye = [0.0, 0.0, 1.5];
        let q = look_at_quat(eye, [4.0, 0.0, 1.5]).unwrap();
        let pose = Pose {
            t: eye,
            r: quat_log(q).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dets = render_detections(&cfg, &scene, &pose, 0, &mut rng).unwrap();
        assert_eq!(dets.len(), 1);
        let expect_w = 500.0 * 0.6 / (4.0 - 0.4);
        assert!((dets[0].w - expect_w).abs() < 1e-9, "w = {}", dets[0].w);
        assert!((dets[0].x - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn static_objects_are_identical_across_frames() {
        let cfg = quiet_cfg();
        let out = generate_dataset(&cfg, 3).unwrap();
        for obj in &out.scene.objects {
            assert!(!obj.dynamic);
            assert_eq!(obj.center_at(0, cfg.dynamic_period), obj.center);
            assert_eq!(obj.center_at(57, cfg.dynamic_period), obj.center);
        }
    }

    #[test]
    fn dynamic_objects_move_between_frames() {
        let mut cfg = quiet_cfg();
        cfg.dynamic_count = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let moving: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.dynamic).collect();
        assert_eq!(moving.len(), 2);
        for o in moving {
            let a = o.center_at(0, cfg.dynamic_period);
            let b = o.center_at(30, cfg.dynamic_period);
            let d: f64 = (0..3).map(|i| (a[i] - b[i]).abs()).sum();
            assert!(d > 1e-6, "dynamic object did not move");
        }
    }

    #[test]
    fn different_seeds_give_different_scenes() {
        let cfg = quiet_cfg();
        let a = generate_dataset(&cfg, 1).unwrap();
        let b = generate_dataset(&cfg, 2).unwrap();
        assert_ne!(a.scene, b.scene);
    }

    #[test]
    fn split_assignment_is_every_nth_frame() {
        let mut cfg = quiet_cfg();
        cfg.frames = 22;
        cfg.test_every = 11;
        let out = generate_dataset(&cfg, 5).unwrap();
        assert_eq!(out.split_len("test"), 2);
        assert_eq!(out.split_len("train"), 20);
        assert_eq!(out.frames[10].seq, "test");
        assert_eq!(out.frames[21].seq, "test");
    }

    #[test]
    fn trajectory_sweeps_most_of_the_camera_box() {
        let mut cfg = quiet_cfg();
        cfg.frames = 2200;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let poses = sample_trajectory(&cfg, &scene, &mut rng).unwrap();
        for a in 0..3 {
            let lo = poses.iter().map(|p| p.t[a]).fold(f64::INFINITY, f64::min);
            let hi = poses.iter().map(|p| p.t[a]).fold(f64::NEG_INFINITY, f64::max);
            let span = cfg.camera_max[a] - cfg.camera_min[a];
            assert!(
                hi - lo > 0.8 * span,
                "axis {a}: covered {} of {span} m",
                hi - lo
            );
        }
    }

    #[test]
    fn poses_stay_inside_camera_box_and_rotations_are_small() {
        let cfg = quiet_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let poses = sample_trajectory(&cfg, &scene, &mut rng).unwrap();
        for p in &poses {
            for a in 0..3 {
                assert!(p.t[a] >= cfg.camera_min[a] - 1e-12);
                assert!(p.t[a] <= cfg.camera_max[a] + 1e-12);
            }
            let norm = (p.r[0] * p.r[0] + p.r[1] * p.r[1] + p.r[2] * p.r[2]).sqrt();
            assert!(norm < 1.3, "rotation log too large: {norm}");
        }
    }
}
