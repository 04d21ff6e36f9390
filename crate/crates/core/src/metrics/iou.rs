use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{box_corners, Pose};

type Polygon = Vec<Vector3<f64>>;

const PLANE_EPS: f64 = 1e-12;

/// Face `i` of the box lists corner indices in the Gray-code order of
/// [`crate::geometry::CORNER_SIGNS`].
const FACES: [[usize; 4]; 6] = [
    [0, 3, 4, 7], // -x
    [1, 2, 5, 6], // +x
    [0, 1, 6, 7], // -y
    [2, 3, 4, 5], // +y
    [0, 1, 2, 3], // -z
    [4, 5, 6, 7], // +z
];

fn box_faces(pose: &Pose) -> Vec<Polygon> {
    let c = box_corners(pose);
    FACES.iter().map(|f| f.iter().map(|&i| c[i]).collect()).collect()
}

/// Outward half-spaces `n·x ≤ d` of the box.
fn box_planes(pose: &Pose) -> [(Vector3<f64>, f64); 6] {
    std::array::from_fn(|k| {
        let axis = k / 2;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        let n: Vector3<f64> = pose.r.column(axis) * sign;
        (n, n.dot(&pose.t) + 0.5 * pose.s[axis])
    })
}

/// Sutherland–Hodgman clip of one polygon against `n·x ≤ d`. Returns the
/// kept polygon; points created on the plane are appended to `on_plane`.
fn clip_polygon(poly: &Polygon, n: &Vector3<f64>, d: f64, on_plane: &mut Vec<Vector3<f64>>) -> Polygon {
    let mut out = Vec::with_capacity(poly.len() + 2);
    let dist: Vec<f64> = poly.iter().map(|p| n.dot(p) - d).collect();
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        let (p, q) = (&poly[i], &poly[j]);
        let (dp, dq) = (dist[i], dist[j]);
        let p_in = dp <= PLANE_EPS;
        let q_in = dq <= PLANE_EPS;
        if p_in {
            out.push(*p);
            if dp.abs() <= PLANE_EPS {
                on_plane.push(*p);
            }
        }
        if p_in != q_in && (dp.abs() > PLANE_EPS && dq.abs() > PLANE_EPS) {
            let t = dp / (dp - dq);
            let x = p + (q - p) * t;
            out.push(x);
            on_plane.push(x);
        }
    }
    out
}

/// Orders points lying on a plane with normal `n` into a convex polygon,
/// dropping near-duplicates.
fn cap_polygon(points: &[Vector3<f64>], n: &Vector3<f64>) -> Polygon {
    let mut pts: Vec<Vector3<f64>> = Vec::new();
    for p in points {
        if pts.iter().all(|q| (q - p).norm() > 1e-10) {
            pts.push(*p);
        }
    }
    if pts.len() < 3 {
        return Vec::new();
    }
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    pts.sort_by(|a, b| {
        let (da, db) = (a - c, b - c);
        da.dot(&v).atan2(da.dot(&u)).total_cmp(&db.dot(&v).atan2(db.dot(&u)))
    });
    pts
}

fn polygon_area(poly: &Polygon) -> f64 {
    let mut acc = Vector3::zeros();
    for i in 1..poly.len().saturating_sub(1) {
        acc += (poly[i] - poly[0]).cross(&(poly[i + 1] - poly[0]));
    }
    0.5 * acc.norm()
}

fn polytope_volume(faces: &[Polygon]) -> f64 {
    let verts: Vec<&Vector3<f64>> = faces.iter().flatten().collect();
    if verts.is_empty() {
        return 0.0;
    }
    let c = verts.iter().copied().sum::<Vector3<f64>>() / verts.len() as f64;
    let mut vol = 0.0;
    for f in faces {
        for i in 1..f.len().saturating_sub(1) {
            let m = Matrix3::from_columns(&[f[0] - c, f[i] - c, f[i + 1] - c]);
            vol += m.determinant().abs();
        }
    }
    vol / 6.0
}

/// Volume of the intersection of two oriented boxes, by clipping the faces
/// of `a` against each face plane of `b` and closing every cut with a cap.
pub fn intersection_volume(a: &Pose, b: &Pose) -> f64 {
    let mut faces = box_faces(a);
    for (n, d) in box_planes(b) {
        let mut on_plane = Vec::new();
        let mut next: Vec<Polygon> = faces
            .iter()
            .map(|f| clip_polygon(f, &n, d, &mut on_plane))
            .filter(|f| f.len() >= 3 && polygon_area(f) > 1e-18)
            .collect();
        let coplanar_face = next
            .iter()
            .any(|f| f.iter().all(|p| (n.dot(p) - d).abs() <= PLANE_EPS));
        if !coplanar_face {
            let cap = cap_polygon(&on_plane, &n);
            if cap.len() >= 3 && polygon_area(&cap) > 1e-18 {
                next.push(cap);
            }
        }
        faces = next;
        if faces.is_empty() {
            return 0.0;
        }
    }
    polytope_volume(&faces)
}

/// Exact intersection-over-union of two oriented boxes, in `[0, 1]`.
pub fn iou3d(a: &Pose, b: &Pose) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Monte Carlo IoU from uniform samples in the axis-aligned hull of both
/// boxes. Returns the estimate and its binomial standard error.
pub fn iou3d_mc_oracle(a: &Pose, b: &Pose, samples: usize, seed: u64) -> (f64, f64) {
    let corners: Vec<Vector3<f64>> = box_corners(a).into_iter().chain(box_corners(b)).collect();
    let lo = corners.iter().fold(Vector3::repeat(f64::INFINITY), |m, c| m.inf(c));
    let hi = corners.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples.max(1) {
        let p = Vector3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            rng.random_range(lo.z..=hi.z),
        );
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        return (0.0, 0.0);
    }
    let p = both as f64 / either as f64;
    (p, (p * (1.0 - p) / either as f64).sqrt())
}

/// IoU for an axially symmetric object: the estimated box is first spun
/// about its own z-axis so its x-axis points along the ground-truth x-axis
/// projected onto its xy-plane. Falls back to plain [`iou3d`] when that
/// projection vanishes.
pub fn iou_for_symmetric(est: &Pose, gt: &Pose) -> f64 {
    let z = est.r.column(2).normalize();
    let gx = gt.r.column(0).into_owned();
    let proj = gx - z * z.dot(&gx);
    if proj.norm() < 1e-9 {
        return iou3d(est, gt);
    }
    let x = proj.normalize();
    let aligned = Pose {
        r: Matrix3::from_columns(&[x, z.cross(&x), z]),
        ..*est
    };
    iou3d(&aligned, gt)
}
