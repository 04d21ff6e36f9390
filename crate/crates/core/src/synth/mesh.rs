use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The four object categories, in one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Bowl,
    WaterCup,
    WineCup,
    Mug,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Bowl, Category::WaterCup, Category::WineCup, Category::Mug];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Bowl => "bowl",
            Category::WaterCup => "water_cup",
            Category::WineCup => "wine_cup",
            Category::Mug => "mug",
        }
    }

    pub fn symmetric(self) -> bool {
        self != Category::Mug
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    pub fn spec(self) -> CategorySpec {
        // Profiles run from the axis at the base, up the outer wall, and back
        // down the inner wall to the axis, so the solid is closed.
        let (profile, diameter, height): (Vec<(f64, f64)>, _, _) = match self {
            Category::Bowl => (
                vec![
                    (0.0, 0.0),
                    (0.28, 0.0),
                    (0.30, 0.06),
                    (0.44, 0.45),
                    (0.50, 1.0),
                    (0.46, 1.0),
                    (0.40, 0.50),
                    (0.26, 0.16),
                    (0.0, 0.14),
                ],
                (0.12, 0.18),
                (0.05, 0.08),
            ),
            Category::WaterCup => (
                vec![
                    (0.0, 0.0),
                    (0.40, 0.0),
                    (0.50, 1.0),
                    (0.46, 1.0),
                    (0.37, 0.10),
                    (0.0, 0.10),
                ],
                (0.06, 0.09),
                (0.09, 0.14),
            ),
            Category::WineCup => (
                vec![
                    (0.0, 0.0),
                    (0.38, 0.0),
                    (0.38, 0.03),
                    (0.07, 0.06),
                    (0.06, 0.42),
                    (0.30, 0.52),
                    (0.50, 0.78),
                    (0.46, 1.0),
                    (0.43, 1.0),
                    (0.46, 0.79),
                    (0.28, 0.56),
                    (0.0, 0.50),
                ],
                (0.065, 0.095),
                (0.14, 0.20),
            ),
            Category::Mug => (
                vec![
                    (0.0, 0.0),
                    (0.50, 0.0),
                    (0.50, 1.0),
                    (0.45, 1.0),
                    (0.45, 0.08),
                    (0.0, 0.08),
                ],
                (0.07, 0.09),
                (0.08, 0.11),
            ),
        };
        CategorySpec {
            category: self,
            profile,
            scale_min: Vector3::new(diameter.0, diameter.0, height.0),
            scale_max: Vector3::new(diameter.1, diameter.1, height.1),
            symmetric: self.symmetric(),
            handle: self == Category::Mug,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Category(s.to_string()))
    }
}

/// Surface-of-revolution description of a category. Profile radii are
/// normalized so the widest point has radius 0.5 and the height is 1; the
/// per-axis scale then maps the unit shape to meters.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub category: Category,
    pub profile: Vec<(f64, f64)>,
    pub scale_min: Vector3<f64>,
    pub scale_max: Vector3<f64>,
    pub symmetric: bool,
    pub handle: bool,
}

/// Indexed triangle mesh with per-vertex normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            normals: self.normals.clone(),
            triangles: self.triangles.clone(),
        }
    }

    /// Applies `p ↦ R p + t`; normals rotate with `R`.
    pub fn transformed(&self, r: &nalgebra::Matrix3<f64>, t: &Vector3<f64>) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| r * v + t).collect(),
            normals: self.normals.iter().map(|n| r * n).collect(),
            triangles: self.triangles.clone(),
        }
    }

    fn push(&mut self, v: Vector3<f64>, n: Vector3<f64>) -> usize {
        self.vertices.push(v);
        self.normals.push(n);
        self.vertices.len() - 1
    }

    fn push_tri(&mut self, a: usize, b: usize, c: usize) {
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        if (pb - pa).cross(&(pc - pa)).norm() > 1e-15 {
            self.triangles.push([a, b, c]);
        }
    }
}

/// Normal of an axis-scaled surface: the inverse-transpose of the scaling.
fn scale_normal(n: Vector3<f64>, scale: &Vector3<f64>) -> Vector3<f64> {
    n.component_div(scale).normalize()
}

/// Revolves the category profile (and adds the mug handle) at the given
/// per-axis scale. The base sits at `z = 0`.
pub fn build_mesh(spec: &CategorySpec, scale: &Vector3<f64>, segments: usize) -> Result<Mesh> {
    if segments < 8 {
        return Err(Error::Generation(format!("need at least 8 segments, got {segments}")));
    }
    if scale.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Generation(format!("scale must be positive, got {:?}", scale.as_slice())));
    }
    let prof = &spec.profile;
    if prof.len() < 2 || prof.iter().any(|(r, z)| !(*r >= 0.0) || !z.is_finite()) {
        return Err(Error::Generation("profile needs ≥ 2 points with non-negative radii".into()));
    }
    if prof.windows(2).all(|w| w[0].0 == 0.0 && w[1].0 == 0.0) {
        return Err(Error::Generation("profile has zero radius everywhere".into()));
    }
    let mut mesh = Mesh::default();
    for w in prof.windows(2) {
        let ((r0, z0), (r1, z1)) = (w[0], w[1]);
        let (dr, dz) = (r1 - r0, z1 - z0);
        let len = (dr * dr + dz * dz).sqrt();
        if len < 1e-12 {
            continue;
        }
        // Counter-clockwise traversal in the (r, z) half-plane: outward is
        // the tangent turned clockwise.
        let (nr, nz) = (dz / len, -dr / len);
        let mut ring = Vec::with_capacity(2 * (segments + 1));
        for j in 0..=segments {
            let phi = 2.0 * PI * j as f64 / segments as f64;
            let (s, c) = phi.sin_cos();
            let n = scale_normal(Vector3::new(nr * c, nr * s, nz), scale);
            let a = mesh.push(Vector3::new(r0 * c, r0 * s, z0).component_mul(scale), n);
            let b = mesh.push(Vector3::new(r1 * c, r1 * s, z1).component_mul(scale), n);
            ring.push((a, b));
        }
        for j in 0..segments {
            let (a0, b0) = ring[j];
            let (a1, b1) = ring[j + 1];
            mesh.push_tri(a0, a1, b1);
            mesh.push_tri(a0, b1, b0);
        }
    }
    if spec.handle {
        add_handle(&mut mesh, scale, segments);
    }
    if mesh.triangles.is_empty() {
        return Err(Error::Generation("profile produced no triangles".into()));
    }
    Ok(mesh)
}

/// Half-torus handle on the +x side of the body, in the xz-plane, with
/// capped ends buried in the wall.
fn add_handle(mesh: &mut Mesh, scale: &Vector3<f64>, segments: usize) {
    let center = Vector3::new(0.5, 0.0, 0.5);
    let major = 0.30;
    let minor = 0.085;
    let sweep = (segments / 2).max(8);
    let around = (segments / 4).max(8);
    let mut rings = Vec::with_capacity(sweep + 1);
    for i in 0..=sweep {
        let phi = -FRAC_PI_2 + PI * i as f64 / sweep as f64;
        let radial = Vector3::new(phi.cos(), 0.0, phi.sin());
        let spine = center + radial * major;
        let mut ring = Vec::with_capacity(around + 1);
        for k in 0..=around {
            let psi = 2.0 * PI * k as f64 / around as f64;
            let n = radial * psi.cos() + Vector3::y() * psi.sin();
            let p = spine + n * minor;
            ring.push(mesh.push(p.component_mul(scale), scale_normal(n, scale)));
        }
        rings.push((spine, ring));
    }
    for i in 0..sweep {
        for k in 0..around {
            let (a0, a1) = (rings[i].1[k], rings[i].1[k + 1]);
            let (b0, b1) = (rings[i + 1].1[k], rings[i + 1].1[k + 1]);
            mesh.push_tri(a0, b0, b1);
            mesh.push_tri(a0, b1, a1);
        }
    }
    for (end, dir) in [(0usize, -1.0), (sweep, 1.0)] {
        let (spine, ref ring) = rings[end];
        let phi = -FRAC_PI_2 + PI * end as f64 / sweep as f64;
        let tangent = Vector3::new(-phi.sin(), 0.0, phi.cos()) * dir;
        let n = scale_normal(tangent, scale);
        let c = mesh.push(spine.component_mul(scale), n);
        let rim: Vec<usize> = ring
            .iter()
            .map(|&v| {
                let p = mesh.vertices[v];
                mesh.push(p, n)
            })
            .collect();
        for k in 0..around {
            mesh.push_tri(c, rim[k], rim[k + 1]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cylinder() -> CategorySpec {
        CategorySpec {
            category: Category::WaterCup,
            profile: vec![(0.0, 0.0), (0.5, 0.0), (0.5, 1.0), (0.0, 1.0)],
            scale_min: Vector3::repeat(1.0),
            scale_max: Vector3::repeat(1.0),
            symmetric: true,
            handle: false,
        }
    }

    #[test]
    fn cylinder_wall_is_within_half_percent() {
        let mesh = build_mesh(&cylinder(), &Vector3::repeat(1.0), 64).unwrap();
        // sample the wall at triangle midpoints (worst case between vertices)
        let mut worst: f64 = 0.0;
        for tri in &mesh.triangles {
            let c = (mesh.vertices[tri[0]] + mesh.vertices[tri[1]] + mesh.vertices[tri[2]]) / 3.0;
            let on_wall = tri.iter().all(|&i| (mesh.vertices[i].xy().norm() - 0.5).abs() < 1e-12);
            if on_wall {
                let mid_edge = (mesh.vertices[tri[0]] + mesh.vertices[tri[1]]) / 2.0;
                for p in [c, mid_edge] {
                    worst = worst.max((p.xy().norm() - 0.5).abs() / 0.5);
                }
            }
        }
        assert!(worst > 0.0 && worst < 0.005, "{worst}");
    }

    #[test]
    fn per_axis_scale_stretches_only_that_axis() {
        let spec = Category::WaterCup.spec();
        let a = build_mesh(&spec, &Vector3::new(1.0, 1.0, 1.0), 32).unwrap().bounds();
        let b = build_mesh(&spec, &Vector3::new(2.0, 1.0, 1.0), 32).unwrap().bounds();
        let ea = a.1 - a.0;
        let eb = b.1 - b.0;
        assert!((eb.x - 2.0 * ea.x).abs() < 1e-12);
        assert!((eb.y - ea.y).abs() < 1e-12 && (eb.z - ea.z).abs() < 1e-12);
    }

    #[test]
    fn bowl_stays_above_table() {
        let mesh = build_mesh(&Category::Bowl.spec(), &Vector3::new(0.15, 0.15, 0.06), 48).unwrap();
        assert!(mesh.vertices.iter().all(|v| v.z >= 0.0));
    }

    #[test]
    fn mug_handle_breaks_symmetry() {
        let (lo, hi) = build_mesh(&Category::Mug.spec(), &Vector3::repeat(1.0), 32)
            .unwrap()
            .bounds();
        assert!(hi.x > 0.8 && lo.x > -0.51);
        assert!((hi.y + lo.y).abs() < 1e-9);
    }

    #[test]
    fn normals_are_unit_and_outward_on_cylinder_wall() {
        let mesh = build_mesh(&cylinder(), &Vector3::repeat(1.0), 16).unwrap();
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            if v.z > 1e-9 && v.z < 1.0 - 1e-9 {
                assert!(n.dot(&Vector3::new(v.x, v.y, 0.0)) > 0.0);
            }
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut spec = cylinder();
        assert!(matches!(build_mesh(&spec, &Vector3::repeat(1.0), 4), Err(Error::Generation(_))));
        spec.profile = vec![(0.0, 0.0), (0.0, 1.0)];
        assert!(matches!(build_mesh(&spec, &Vector3::repeat(1.0), 16), Err(Error::Generation(_))));
        assert!("teapot".parse::<Category>().is_err());
        assert_eq!("wine_cup".parse::<Category>().unwrap(), Category::WineCup);
    }
}
