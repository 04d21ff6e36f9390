use nalgebra::Vector3;

use super::mesh::Mesh;
use crate::geometry::CameraIntrinsics;

/// Per-pixel nearest-hit buffers of a rendered patch (row-major, `h × w`).
/// Missed pixels hold depth 0, a zero normal and mask 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub normal: Vec<Vector3<f64>>,
    pub mask: Vec<u8>,
}

impl Render {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|m| **m != 0).count()
    }
}

/// Möller–Trumbore ray/triangle test. Returns `(t, u, v)` with the hit at
/// `origin + t·dir` and barycentrics `(1 − u − v, u, v)`.
pub fn ray_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    p0: &Vector3<f64>,
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    const EPS: f64 = 1e-14;
    const EDGE: f64 = 1e-12;
    let e1 = p1 - p0;
    let e2 = p2 - p0;
    let pv = dir.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < EPS {
        return None;
    }
    let inv = 1.0 / det;
    let tv = origin - p0;
    let u = tv.dot(&pv) * inv;
    if !(-EDGE..=1.0 + EDGE).contains(&u) {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = dir.dot(&qv) * inv;
    if v < -EDGE || u + v > 1.0 + EDGE {
        return None;
    }
    let t = e2.dot(&qv) * inv;
    (t > EPS).then_some((t, u, v))
}

fn shade(mesh: &Mesh, tri: &[usize; 3], u: f64, v: f64, dir: &Vector3<f64>) -> Vector3<f64> {
    let [a, b, c] = *tri;
    let mut n = mesh.normals[a] * (1.0 - u - v) + mesh.normals[b] * u + mesh.normals[c] * v;
    if n.norm() < 1e-9 {
        n = (mesh.vertices[b] - mesh.vertices[a]).cross(&(mesh.vertices[c] - mesh.vertices[a]));
    }
    let n = n.normalize();
    if n.dot(dir) > 0.0 {
        -n
    } else {
        n
    }
}

/// Ray-casts a camera-frame mesh into a `width × height` image. Pixel
/// `(col, row)` is sampled at its center `(u, v) = (col, row)`. Depth is the
/// z-coordinate of the nearest hit.
pub fn render_mesh(mesh: &Mesh, k: &CameraIntrinsics, width: usize, height: usize) -> Render {
    let mut depth = vec![f64::INFINITY; width * height];
    let mut hit: Vec<Option<(usize, f64, f64)>> = vec![None; width * height];
    let origin = Vector3::zeros();
    for (ti, tri) in mesh.triangles.iter().enumerate() {
        let p = tri.map(|i| mesh.vertices[i]);
        if p.iter().any(|q| q.z <= 1e-9) {
            continue;
        }
        let mut umin = f64::INFINITY;
        let mut umax = f64::NEG_INFINITY;
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        for q in &p {
            let (u, v) = k.project(q);
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let c0 = umin.ceil().max(0.0);
        let c1 = umax.floor().min(width as f64 - 1.0);
        let r0 = vmin.ceil().max(0.0);
        let r1 = vmax.floor().min(height as f64 - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        for row in r0 as usize..=r1 as usize {
            for col in c0 as usize..=c1 as usize {
                // z-component 1, so the ray parameter is the z-depth
                let dir = k.unproject(col as f64, row as f64);
                if let Some((t, u, v)) = ray_triangle(&origin, &dir, &p[0], &p[1], &p[2]) {
                    let idx = row * width + col;
                    if t < depth[idx] {
                        depth[idx] = t;
                        hit[idx] = Some((ti, u, v));
                    }
                }
            }
        }
    }
    finish(mesh, k, width, height, depth, hit)
}

fn finish(
    mesh: &Mesh,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    mut depth: Vec<f64>,
    hit: Vec<Option<(usize, f64, f64)>>,
) -> Render {
    let mut normal = vec![Vector3::zeros(); width * height];
    let mut mask = vec![0u8; width * height];
    for idx in 0..width * height {
        match hit[idx] {
            Some((ti, u, v)) => {
                let dir = k.unproject((idx % width) as f64, (idx / width) as f64);
                normal[idx] = shade(mesh, &mesh.triangles[ti], u, v, &dir);
                mask[idx] = 1;
            }
            None => depth[idx] = 0.0,
        }
    }
    Render {
        width,
        height,
        depth,
        normal,
        mask,
    }
}

/// Every pixel against every triangle; the reference for [`render_mesh`].
pub fn render_mesh_brute_force(mesh: &Mesh, k: &CameraIntrinsics, width: usize, height: usize) -> Render {
    let mut depth = vec![f64::INFINITY; width * height];
    let mut hit = vec![None; width * height];
    let origin = Vector3::zeros();
    for row in 0..height {
        for col in 0..width {
            let dir = k.unproject(col as f64, row as f64);
            let idx = row * width + col;
            for (ti, tri) in mesh.triangles.iter().enumerate() {
                let p = tri.map(|i| mesh.vertices[i]);
                if let Some((t, u, v)) = ray_triangle(&origin, &dir, &p[0], &p[1], &p[2]) {
                    if t < depth[idx] {
                        depth[idx] = t;
                        hit[idx] = Some((ti, u, v));
                    }
                }
            }
        }
    }
    finish(mesh, k, width, height, depth, hit)
}
