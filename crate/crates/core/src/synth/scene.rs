use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt_depth, CorruptionParams};
use super::mesh::{build_mesh, Category, Mesh};
use super::render::{render_mesh, Render};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, CameraIntrinsics, Pose};

pub const GENERATOR_VERSION: u32 = 1;

/// SplitMix64 finalizer over `(seed, stream)`; used to derive independent
/// RNG streams per scene and per purpose.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rounds to the nearest `f32`, the precision patches are stored at.
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// One object instance placed in the camera frame. The mesh is in the
/// object frame, whose origin is the center of the object's bounding box.
#[derive(Debug, Clone)]
pub struct SceneInstance {
    pub category: Category,
    pub pose: Pose,
    pub mesh: Mesh,
    pub instance_seed: u64,
}

/// Per-object image patch set. All per-pixel arrays are row-major over a
/// `size × size` grid; vector channels are interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBundle {
    pub size: usize,
    /// Intrinsics of the patch grid itself (crop and rescale folded in).
    pub k: CameraIntrinsics,
    pub rgb: Vec<f64>,
    pub depth_gt: Vec<f64>,
    pub depth_raw: Vec<f64>,
    pub normal_gt: Vec<f64>,
    pub mask: Vec<u8>,
}

impl PatchBundle {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|m| **m != 0).count()
    }

    pub fn ray(&self, idx: usize) -> Vector3<f64> {
        self.k.ray_direction((idx % self.size) as f64, (idx / self.size) as f64)
    }

    /// Unit ray per pixel, interleaved `(x, y, z)`.
    pub fn rays(&self) -> Vec<f64> {
        (0..self.pixels()).flat_map(|i| self.ray(i).iter().copied().collect::<Vec<_>>()).collect()
    }

    pub fn normal_at(&self, idx: usize) -> Vector3<f64> {
        Vector3::new(self.normal_gt[3 * idx], self.normal_gt[3 * idx + 1], self.normal_gt[3 * idx + 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: Category,
    /// Rotation, row-major.
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub s: [f64; 3],
    pub symmetric: bool,
    pub instance_seed: u64,
}

impl ObjectAnnotation {
    pub fn from_pose(category: Category, pose: &Pose, instance_seed: u64) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = pose.r[(i, j)];
            }
        }
        ObjectAnnotation {
            category,
            r,
            t: [pose.t.x, pose.t.y, pose.t.z],
            s: [pose.s.x, pose.s.y, pose.s.z],
            symmetric: category.symmetric(),
            instance_seed,
        }
    }

    /// The pose, unchecked; callers validate with [`Pose::validate`].
    pub fn pose(&self) -> Pose {
        Pose {
            r: Matrix3::from_row_slice(&self.r),
            t: Vector3::from_row_slice(&self.t),
            s: Vector3::from_row_slice(&self.s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSeeds {
    pub global: u64,
    pub scene_index: u64,
    pub scene: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    /// Full-frame camera.
    #[serde(rename = "K")]
    pub k: CameraIntrinsics,
    /// Crop in full-frame pixel coordinates: left edge, top edge, width,
    /// height. Pixel centers sit at integer coordinates.
    pub patch_box: [f64; 4],
    pub patch_size: usize,
    pub objects: Vec<ObjectAnnotation>,
    pub seeds: SceneSeeds,
    pub generator_version: u32,
    pub config_hash: String,
}

impl SceneAnnotation {
    pub fn patch_intrinsics(&self) -> CameraIntrinsics {
        patch_intrinsics(&self.k, &self.patch_box, self.patch_size)
    }
}

/// Intrinsics of a `size × size` resampling of the crop `patch_box`.
pub fn patch_intrinsics(k: &CameraIntrinsics, patch_box: &[f64; 4], size: usize) -> CameraIntrinsics {
    let sx = patch_box[2] / size as f64;
    let sy = patch_box[3] / size as f64;
    CameraIntrinsics {
        fx: k.fx / sx,
        fy: k.fy / sy,
        cx: (k.cx - patch_box[0]) / sx - 0.5,
        cy: (k.cy - patch_box[1]) / sy - 0.5,
        width: size,
        height: size,
    }
}

/// Scene sampling knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub patch_size: usize,
    pub segments: usize,
    pub camera: CameraIntrinsics,
    pub elevation_deg: (f64, f64),
    pub distance_m: (f64, f64),
    pub roll_deg: f64,
    /// Yaw range for non-symmetric objects, chosen so the handle stays in view.
    pub handle_yaw_deg: f64,
    pub patch_margin: f64,
    pub corruption: CorruptionParams,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            patch_size: 64,
            segments: 48,
            camera: CameraIntrinsics {
                fx: 600.0,
                fy: 600.0,
                cx: 319.5,
                cy: 239.5,
                width: 640,
                height: 480,
            },
            elevation_deg: (25.0, 65.0),
            distance_m: (0.4, 0.7),
            roll_deg: 8.0,
            handle_yaw_deg: 100.0,
            patch_margin: 0.12,
            corruption: CorruptionParams::default(),
        }
    }
}

/// Per-axis scale of an instance, drawn from its seed. Diameters are shared
/// by x and y so revolution bodies stay axially symmetric.
pub fn instance_scale(category: Category, instance_seed: u64) -> Vector3<f64> {
    let spec = category.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let d = rng.random_range(spec.scale_min.x..=spec.scale_max.x);
    let h = rng.random_range(spec.scale_min.z..=spec.scale_max.z);
    Vector3::new(d, d, h)
}

/// The instance mesh re-centered on its bounding box, and its extents.
pub fn instance_mesh(category: Category, instance_seed: u64, segments: usize) -> Result<(Mesh, Vector3<f64>)> {
    let scale = instance_scale(category, instance_seed);
    let mesh = build_mesh(&category.spec(), &scale, segments)?;
    let (lo, hi) = mesh.bounds();
    let center = (lo + hi) / 2.0;
    Ok((mesh.translated(&-center), hi - lo))
}

/// Replaces the x-axis of a symmetric object's rotation by the camera x-axis
/// projected onto the plane orthogonal to the object z-axis. Spin about z is
/// unobservable for these objects, so this fixes a unique label.
pub fn canonical_symmetric_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let z = r.column(2).normalize();
    let x = Vector3::x();
    let proj = x - z * z.dot(&x);
    if proj.norm() < 1e-6 {
        return *r;
    }
    let x = proj.normalize();
    Matrix3::from_columns(&[x, z.cross(&x), z])
}

fn sample_pose(
    category: Category,
    extents: &Vector3<f64>,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> (Pose, Matrix3<f64>, Vector3<f64>) {
    let elev = rng.random_range(cfg.elevation_deg.0..=cfg.elevation_deg.1).to_radians();
    let dist = rng.random_range(cfg.distance_m.0..=cfg.distance_m.1);
    let roll = rng.random_range(-cfg.roll_deg..=cfg.roll_deg).to_radians();
    let yaw = if category.symmetric() {
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
    } else {
        rng.random_range(-cfg.handle_yaw_deg..=cfg.handle_yaw_deg).to_radians()
    };
    // World frame: table is z = 0, object box center sits above it.
    let center_w = Vector3::new(
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        extents.z / 2.0,
    );
    let target = Vector3::new(
        rng.random_range(-0.02..0.02),
        rng.random_range(-0.02..0.02),
        extents.z / 2.0,
    );
    let cam = target + Vector3::new(elev.cos(), 0.0, elev.sin()) * dist;
    let fwd = (target - cam).normalize();
    let right = fwd.cross(&Vector3::z()).normalize();
    let down = fwd.cross(&right);
    let (sr, cr) = roll.sin_cos();
    let x_c = right * cr + down * sr;
    let y_c = down * cr - right * sr;
    // rows are the camera axes expressed in world coordinates
    let r_cw = Matrix3::from_rows(&[x_c.transpose(), y_c.transpose(), fwd.transpose()]);
    let mut r = r_cw * axis_angle(&Vector3::z(), yaw);
    if category.symmetric() {
        r = canonical_symmetric_rotation(&r);
    }
    let t = r_cw * (center_w - cam);
    (
        Pose {
            r,
            t,
            s: *extents,
        },
        r_cw,
        cam,
    )
}

/// Renders the instance into the patch grid described by `k`.
pub fn render_patch(instance: &SceneInstance, k: &CameraIntrinsics, size: usize) -> Result<Render> {
    let posed = instance.mesh.transformed(&instance.pose.r, &instance.pose.t);
    let out = render_mesh(&posed, k, size, size);
    if out.mask_count() == 0 {
        return Err(Error::EmptyMask(format!(
            "{} instance {} is not visible in the patch",
            instance.category, instance.instance_seed
        )));
    }
    Ok(out)
}

/// Background gradient plus a Fresnel-like rim term on the object: the
/// closer the surface is to grazing, the brighter.
pub fn synth_rgb(render: &Render, k: &CameraIntrinsics, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.7));
    let gu: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let gv: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.0));
    let (w, h) = (render.width, render.height);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for idx in 0..w * h {
        let u = (idx % w) as f64 / w.max(1) as f64 - 0.5;
        let v = (idx / w) as f64 / h.max(1) as f64 - 0.5;
        let rim = if render.mask[idx] != 0 {
            let ray = k.ray_direction((idx % w) as f64, (idx / w) as f64);
            let c = render.normal[idx].dot(&ray).abs();
            0.6 * (1.0 - c).powi(2)
        } else {
            0.0
        };
        for ch in 0..3 {
            let bg = base[ch] + gu[ch] * u + gv[ch] * v;
            let val = if render.mask[idx] != 0 {
                tint[ch] * bg + rim
            } else {
                bg
            };
            rgb.push(val.clamp(0.0, 1.0));
        }
    }
    rgb
}

/// Depth of the table plane behind each pixel, capped at `far`.
fn table_depth(k: &CameraIntrinsics, r_cw: &Matrix3<f64>, cam: &Vector3<f64>, size: usize, far: f64) -> Vec<f64> {
    (0..size * size)
        .map(|idx| {
            let d = k.unproject((idx % size) as f64, (idx / size) as f64);
            let dz_world = (r_cw.transpose() * d).z;
            let lambda = if dz_world < 0.0 { -cam.z / dz_world } else { far };
            lambda.min(far)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub bundle: PatchBundle,
    pub annotation: SceneAnnotation,
}

/// Generates one single-object scene. Everything is a function of the
/// arguments; `scene_seed` should come from [`derive_seed`].
pub fn generate_scene(
    category: Category,
    instance_seed: u64,
    seeds: SceneSeeds,
    cfg: &SceneConfig,
    config_hash: &str,
) -> Result<Scene> {
    cfg.corruption.validate()?;
    if cfg.patch_size < 4 {
        return Err(Error::Config(format!("patch size must be ≥ 4, got {}", cfg.patch_size)));
    }
    let (mesh, extents) = instance_mesh(category, instance_seed, cfg.segments)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.scene);
    let size = cfg.patch_size;
    let kf = cfg.camera;
    for _attempt in 0..32 {
        let (pose, r_cw, cam) = sample_pose(category, &extents, cfg, &mut rng);
        let posed = mesh.transformed(&pose.r, &pose.t);
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &posed.vertices {
            let (u, w) = kf.project(v);
            lo = (lo.0.min(u), lo.1.min(w));
            hi = (hi.0.max(u), hi.1.max(w));
        }
        if lo.0 < 0.0 || lo.1 < 0.0 || hi.0 > kf.width as f64 - 1.0 || hi.1 > kf.height as f64 - 1.0 {
            continue;
        }
        let side = (hi.0 - lo.0).max(hi.1 - lo.1) * (1.0 + 2.0 * cfg.patch_margin);
        let center = ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0);
        let patch_box = [center.0 - side / 2.0, center.1 - side / 2.0, side, side];
        let kp = patch_intrinsics(&kf, &patch_box, size);
        let instance = SceneInstance {
            category,
            pose,
            mesh: mesh.clone(),
            instance_seed,
        };
        let render = match render_patch(&instance, &kp, size) {
            Ok(r) => r,
            Err(Error::EmptyMask(_)) => continue,
            Err(e) => return Err(e),
        };
        let background = table_depth(&kp, &r_cw, &cam, size, 3.0);
        let depth_gt: Vec<f64> = (0..size * size)
            .map(|i| quantize(if render.mask[i] != 0 { render.depth[i] } else { background[i] }))
            .collect();
        let depth_raw: Vec<f64> = corrupt_depth(
            &depth_gt,
            &render.mask,
            size,
            &cfg.corruption,
            derive_seed(seeds.scene, 1),
        )?
        .into_iter()
        .map(quantize)
        .collect();
        let rgb = synth_rgb(&render, &kp, derive_seed(seeds.scene, 2))
            .into_iter()
            .map(quantize)
            .collect();
        let normal_gt = render
            .normal
            .iter()
            .flat_map(|n| [quantize(n.x), quantize(n.y), quantize(n.z)])
            .collect();
        let bundle = PatchBundle {
            size,
            k: kp,
            rgb,
            depth_gt,
            depth_raw,
            normal_gt,
            mask: render.mask,
        };
        let annotation = SceneAnnotation {
            k: kf,
            patch_box,
            patch_size: size,
            objects: vec![ObjectAnnotation::from_pose(category, &pose, instance_seed)],
            seeds,
            generator_version: GENERATOR_VERSION,
            config_hash: config_hash.to_string(),
        };
        return Ok(Scene { bundle, annotation });
    }
    Err(Error::Generation(format!(
        "no in-frame pose found for {category} instance {instance_seed} (scene seed {})",
        seeds.scene
    )))
}
