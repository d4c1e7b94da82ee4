//! Built-in meshes: a low-poly convex vehicle, a cube with one UV island per
//! side, and a seamless grid plane.

use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, Vec2, Vec3};
use crate::uvtools::{index_corner_uvs, pack_islands, ReorderOptions};

/// Island count of [`vehicle_mesh`]'s default atlas: two side panels and six
/// belt panels around the body.
pub const VEHICLE_ISLANDS: usize = 8;
/// Island count of [`split_cube`]: one per side.
pub const SPLIT_CUBE_ISLANDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleGeometry {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        VehicleGeometry {
            length: 4.0,
            width: 1.8,
            height: 1.2,
        }
    }
}

// Side profile (x along the body, z up) for a 4 x 1.2 body, counter-clockwise.
const PROFILE: [[f64; 2]; 6] = [
    [-2.0, -0.6],
    [2.0, -0.6],
    [2.0, 0.0],
    [0.9, 0.6],
    [-1.1, 0.6],
    [-2.0, 0.1],
];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Flips faces of a convex solid so normals point away from its centroid.
fn orient_outward(vertices: &[Vec3], groups: &mut [Vec<[usize; 3]>]) {
    let n = vertices.len() as f64;
    let c = vertices.iter().fold([0.0; 3], |acc, v| {
        [acc[0] + v[0] / n, acc[1] + v[1] / n, acc[2] + v[2] / n]
    });
    for f in groups.iter_mut().flatten() {
        let [a, b, d] = f.map(|i| vertices[i]);
        let normal = cross(sub(b, a), sub(d, a));
        if dot(normal, sub(a, c)) < 0.0 {
            f.swap(1, 2);
        }
    }
}

/// Projects every face group onto its own plane and packs the charts.
fn charted_mesh(vertices: Vec<Vec3>, groups: Vec<Vec<[usize; 3]>>) -> Mesh {
    let mut faces = Vec::new();
    let mut corner_uv: Vec<[Vec2; 3]> = Vec::new();
    let mut labels = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let [a, b, c] = group[0].map(|i| vertices[i]);
        let n = normalize(cross(sub(b, a), sub(c, a)));
        let t1 = normalize(sub(b, a));
        let t2 = cross(n, t1);
        for f in group {
            faces.push(*f);
            labels.push(g);
            corner_uv.push(f.map(|i| {
                let d = sub(vertices[i], a);
                [dot(d, t1), dot(d, t2)]
            }));
        }
    }
    let packed = pack_islands(&corner_uv, &labels, &ReorderOptions::default())
        .expect("fixture charts pack");
    let (uv_coords, face_uvs) = index_corner_uvs(&packed, &labels);
    Mesh::new(vertices, faces, uv_coords, face_uvs).expect("fixture mesh is valid")
}

pub fn vehicle_mesh() -> Mesh {
    vehicle_mesh_with(&VehicleGeometry::default())
}

/// Extruded six-sided profile; one UV island per flat panel.
pub fn vehicle_mesh_with(geometry: &VehicleGeometry) -> Mesh {
    let (sx, sz, hy) = (geometry.length / 4.0, geometry.height / 1.2, geometry.width / 2.0);
    let k = PROFILE.len();
    let mut vertices = Vec::with_capacity(2 * k);
    for y in [-hy, hy] {
        for p in PROFILE {
            vertices.push([p[0] * sx, y, p[1] * sz]);
        }
    }
    let cap = |off: usize| (1..k - 1).map(|i| [off, off + i, off + i + 1]).collect::<Vec<_>>();
    let mut groups = vec![cap(0), cap(k)];
    for i in 0..k {
        let j = (i + 1) % k;
        groups.push(vec![[i, j, k + j], [i, k + j, k + i]]);
    }
    orient_outward(&vertices, &mut groups);
    charted_mesh(vertices, groups)
}

/// Unit cube with each side mapped to its own UV island.
pub fn split_cube() -> Mesh {
    let mut vertices = Vec::new();
    for i in 0..8 {
        vertices.push([
            if i & 1 != 0 { 0.5 } else { -0.5 },
            if i & 2 != 0 { 0.5 } else { -0.5 },
            if i & 4 != 0 { 0.5 } else { -0.5 },
        ]);
    }
    let quads = [
        [0, 1, 3, 2],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [0, 2, 6, 4],
        [1, 3, 7, 5],
    ];
    let mut groups: Vec<Vec<[usize; 3]>> = quads
        .iter()
        .map(|q| vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    orient_outward(&vertices, &mut groups);
    charted_mesh(vertices, groups)
}

/// `n x n` quads in the z = 0 plane mapped by a single seamless chart.
pub fn grid_plane(n: usize) -> Mesh {
    let idx = |x: usize, y: usize| y * (n + 1) + x;
    let mut vertices = Vec::new();
    let mut uv_coords = Vec::new();
    for y in 0..=n {
        for x in 0..=n {
            vertices.push([x as f64, y as f64, 0.0]);
            uv_coords.push([x as f64 / n as f64, y as f64 / n as f64]);
        }
    }
    let mut faces = Vec::new();
    for y in 0..n {
        for x in 0..n {
            faces.push([idx(x, y), idx(x + 1, y), idx(x + 1, y + 1)]);
            faces.push([idx(x, y), idx(x + 1, y + 1), idx(x, y + 1)]);
        }
    }
    Mesh::new(vertices, faces.clone(), uv_coords, faces).expect("grid mesh is valid")
}
