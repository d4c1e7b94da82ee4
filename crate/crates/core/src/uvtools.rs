//! UV-atlas analysis and reordering.
//!
//! An island is a connected set of faces where neighbours share both a
//! position edge and the matching UV edge. [`reorder_uv`] greedily merges
//! islands that are adjacent on the surface: the pair sharing the most
//! position edges is aligned by an orientation-preserving similarity that
//! maps one island's copy of a shared edge onto the other's, as long as the
//! moved island does not overlap its partner. The merged islands are then
//! shelf-packed into the unit square. Vertex positions and faces are never
//! touched; per-face UV triangles only undergo similarity transforms.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, SharedEdge, Vec2};

/// Two UV points are considered the same when closer than this.
pub const UV_MATCH_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct UVIsland {
    pub id: usize,
    pub faces: Vec<usize>,
    /// `[u_min, v_min, u_max, v_max]`
    pub uv_rect: [f64; 4],
    /// Islands sharing at least one position edge with this one.
    pub adjacency: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReorderOptions {
    /// Texture resolution the padding is expressed in.
    pub texture_size: usize,
    pub padding_texels: f64,
    /// Relative tolerance for welding further shared edges after alignment.
    pub weld_tolerance: f64,
}

impl Default for ReorderOptions {
    fn default() -> Self {
        ReorderOptions {
            texture_size: 64,
            padding_texels: 2.0,
            weld_tolerance: 1e-5,
        }
    }
}

fn close(a: Vec2, b: Vec2, tol: f64) -> bool {
    (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
}

fn corner_of(mesh: &Mesh, face: usize, vertex: usize) -> usize {
    mesh.faces[face]
        .iter()
        .position(|&v| v == vertex)
        .expect("vertex belongs to face")
}

fn uv_adjacent_corners(corner_uv: &[[Vec2; 3]], mesh: &Mesh, e: &SharedEdge, tol: f64) -> bool {
    let [f, g] = e.faces;
    let (a, b) = e.verts;
    close(
        corner_uv[f][corner_of(mesh, f, a)],
        corner_uv[g][corner_of(mesh, g, a)],
        tol,
    ) && close(
        corner_uv[f][corner_of(mesh, f, b)],
        corner_uv[g][corner_of(mesh, g, b)],
        tol,
    )
}

fn corner_uvs(mesh: &Mesh) -> Vec<[Vec2; 3]> {
    (0..mesh.faces.len()).map(|f| mesh.face_uv(f)).collect()
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Face-to-island labels, numbered by smallest member face.
fn island_labels(mesh: &Mesh, corner_uv: &[[Vec2; 3]]) -> Vec<usize> {
    let mut ds = DisjointSet::new(mesh.faces.len());
    for e in mesh.shared_edges() {
        if uv_adjacent_corners(corner_uv, mesh, &e, UV_MATCH_TOLERANCE) {
            ds.union(e.faces[0], e.faces[1]);
        }
    }
    let mut label_of_root = BTreeMap::new();
    (0..mesh.faces.len())
        .map(|f| {
            let root = ds.find(f);
            let next = label_of_root.len();
            *label_of_root.entry(root).or_insert(next)
        })
        .collect()
}

pub fn extract_islands(mesh: &Mesh) -> Vec<UVIsland> {
    let corner_uv = corner_uvs(mesh);
    let labels = island_labels(mesh, &corner_uv);
    let count = labels.iter().max().map_or(0, |m| m + 1);
    let mut islands: Vec<UVIsland> = (0..count)
        .map(|id| UVIsland {
            id,
            faces: Vec::new(),
            uv_rect: [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            adjacency: Vec::new(),
        })
        .collect();
    for (f, &l) in labels.iter().enumerate() {
        let isl = &mut islands[l];
        isl.faces.push(f);
        for uv in corner_uv[f] {
            isl.uv_rect[0] = isl.uv_rect[0].min(uv[0]);
            isl.uv_rect[1] = isl.uv_rect[1].min(uv[1]);
            isl.uv_rect[2] = isl.uv_rect[2].max(uv[0]);
            isl.uv_rect[3] = isl.uv_rect[3].max(uv[1]);
        }
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); count];
    for e in mesh.shared_edges() {
        let (a, b) = (labels[e.faces[0]], labels[e.faces[1]]);
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    for (isl, a) in islands.iter_mut().zip(adj) {
        isl.adjacency = a.into_iter().collect();
    }
    islands
}

/// Fraction of surface-adjacent face pairs that are also UV-adjacent.
/// A mesh without shared edges scores 1.
pub fn adjacency_score(mesh: &Mesh) -> f64 {
    let edges = mesh.shared_edges();
    if edges.is_empty() {
        return 1.0;
    }
    let corner_uv = corner_uvs(mesh);
    let joined = edges
        .iter()
        .filter(|e| uv_adjacent_corners(&corner_uv, mesh, e, UV_MATCH_TOLERANCE))
        .count();
    joined as f64 / edges.len() as f64
}

// ---------------------------------------------------------------------------
// 2D geometry

fn tri_area(t: &[Vec2; 3]) -> f64 {
    0.5 * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1]))
}

fn tri_bounds(t: &[Vec2; 3]) -> [f64; 4] {
    [
        t.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
        t.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
        t.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
        t.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
    ]
}

/// True when two triangles share interior area; touching boundaries do not count.
pub fn triangles_overlap(a: &[Vec2; 3], b: &[Vec2; 3]) -> bool {
    let (ba, bb) = (tri_bounds(a), tri_bounds(b));
    let scale = (ba[2] - ba[0])
        .max(ba[3] - ba[1])
        .max(bb[2] - bb[0])
        .max(bb[3] - bb[1]);
    let eps = 1e-9 * scale.max(1e-12);
    if ba[2] <= bb[0] + eps || bb[2] <= ba[0] + eps || ba[3] <= bb[1] + eps || bb[3] <= ba[1] + eps
    {
        return false;
    }
    for t in [a, b] {
        for k in 0..3 {
            let (p, q) = (t[k], t[(k + 1) % 3]);
            let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
            if len < 1e-15 {
                continue;
            }
            let n = [-(q[1] - p[1]) / len, (q[0] - p[0]) / len];
            let proj = |s: &[Vec2; 3]| {
                s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * n[0] + v[1] * n[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let ((alo, ahi), (blo, bhi)) = (proj(a), proj(b));
            if ahi <= blo + eps || bhi <= alo + eps {
                return false;
            }
        }
    }
    true
}

/// `z -> s * z + t` over complex numbers: rotation, uniform scale, translation.
#[derive(Clone, Copy, Debug)]
struct Similarity {
    s: Vec2,
    t: Vec2,
}

impl Similarity {
    /// Maps `p0 -> q0` and `p1 -> q1`.
    fn from_pairs(p0: Vec2, p1: Vec2, q0: Vec2, q1: Vec2) -> Option<Self> {
        let dp = [p1[0] - p0[0], p1[1] - p0[1]];
        let dq = [q1[0] - q0[0], q1[1] - q0[1]];
        let den = dp[0] * dp[0] + dp[1] * dp[1];
        if den < 1e-24 {
            return None;
        }
        let s = [
            (dq[0] * dp[0] + dq[1] * dp[1]) / den,
            (dq[1] * dp[0] - dq[0] * dp[1]) / den,
        ];
        let sp0 = [s[0] * p0[0] - s[1] * p0[1], s[0] * p0[1] + s[1] * p0[0]];
        Some(Similarity {
            s,
            t: [q0[0] - sp0[0], q0[1] - sp0[1]],
        })
    }

    fn apply(&self, z: Vec2) -> Vec2 {
        [
            self.s[0] * z[0] - self.s[1] * z[1] + self.t[0],
            self.s[0] * z[1] + self.s[1] * z[0] + self.t[1],
        ]
    }
}

fn islands_overlap(corner_uv: &[[Vec2; 3]], a: &[usize], b: &[[Vec2; 3]]) -> bool {
    a.iter().any(|&f| {
        let ta = &corner_uv[f];
        tri_area(ta).abs() > 1e-18
            && b
                .iter()
                .any(|tb| tri_area(tb).abs() > 1e-18 && triangles_overlap(ta, tb))
    })
}

// ---------------------------------------------------------------------------
// Packing

/// Lays out per-face UV triangles grouped by `labels` into `[0,1]^2`.
///
/// Each group keeps its shape up to a common uniform scale and a translation.
/// Groups are placed on shelves in order of decreasing height with
/// `padding_texels` of clearance, and the largest scale that fits is used.
pub fn pack_islands(
    corner_uv: &[[Vec2; 3]],
    labels: &[usize],
    options: &ReorderOptions,
) -> Result<Vec<[Vec2; 3]>> {
    let count = labels.iter().max().map_or(0, |m| m + 1);
    let mut rects = vec![[f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]; count];
    for (f, &l) in labels.iter().enumerate() {
        for uv in corner_uv[f] {
            let r = &mut rects[l];
            r[0] = r[0].min(uv[0]);
            r[1] = r[1].min(uv[1]);
            r[2] = r[2].max(uv[0]);
            r[3] = r[3].max(uv[1]);
        }
    }
    let sizes: Vec<Vec2> = rects.iter().map(|r| [r[2] - r[0], r[3] - r[1]]).collect();
    let pad = options.padding_texels / options.texture_size.max(1) as f64;
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| sizes[b][1].total_cmp(&sizes[a][1]).then(a.cmp(&b)));

    let place = |scale: f64| -> Option<Vec<Vec2>> {
        let mut pos = vec![[0.0; 2]; count];
        let (mut x, mut y, mut shelf) = (pad, pad, 0.0f64);
        for &i in &order {
            let (w, h) = (sizes[i][0] * scale, sizes[i][1] * scale);
            if x + w > 1.0 - pad && x > pad {
                y += shelf + pad;
                x = pad;
                shelf = 0.0;
            }
            if x + w > 1.0 - pad || y + h > 1.0 - pad {
                return None;
            }
            pos[i] = [x, y];
            x += w + pad;
            shelf = shelf.max(h);
        }
        Some(pos)
    };

    let extent = sizes
        .iter()
        .map(|s| s[0].max(s[1]))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let (mut lo, mut hi) = (0.0f64, (1.0 - 2.0 * pad) / extent);
    if hi <= 0.0 {
        return Err(Error::Packing(format!(
            "padding of {} texels leaves no room at texture size {}; increase texture_size or reduce padding",
            options.padding_texels, options.texture_size
        )));
    }
    if place(hi).is_some() {
        lo = hi;
    } else {
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if place(mid).is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let positions = match place(lo) {
        Some(p) if lo > 0.0 => p,
        _ => {
            return Err(Error::Packing(format!(
                "{count} islands do not fit with {} texels of padding at texture size {}; \
                 increase texture_size or reduce padding",
                options.padding_texels, options.texture_size
            )))
        }
    };
    Ok(corner_uv
        .iter()
        .zip(labels)
        .map(|(tri, &l)| {
            tri.map(|uv| {
                [
                    ((uv[0] - rects[l][0]) * lo + positions[l][0]).clamp(0.0, 1.0),
                    ((uv[1] - rects[l][1]) * lo + positions[l][1]).clamp(0.0, 1.0),
                ]
            })
        })
        .collect())
}

/// Rebuilds `uv_coords`/`face_uvs` from per-face triangles, sharing a UV index
/// between corners of the same island with bitwise-equal coordinates.
pub fn index_corner_uvs(
    corner_uv: &[[Vec2; 3]],
    labels: &[usize],
) -> (Vec<Vec2>, Vec<[usize; 3]>) {
    let mut coords = Vec::new();
    let mut lookup: BTreeMap<(usize, u64, u64), usize> = BTreeMap::new();
    let face_uvs = corner_uv
        .iter()
        .zip(labels)
        .map(|(tri, &l)| {
            tri.map(|uv| {
                *lookup
                    .entry((l, uv[0].to_bits(), uv[1].to_bits()))
                    .or_insert_with(|| {
                        coords.push(uv);
                        coords.len() - 1
                    })
            })
        })
        .collect();
    (coords, face_uvs)
}

// ---------------------------------------------------------------------------
// Reordering

pub fn reorder_uv(mesh: &Mesh) -> Result<Mesh> {
    reorder_uv_with(mesh, &ReorderOptions::default())
}

pub fn reorder_uv_with(mesh: &Mesh, options: &ReorderOptions) -> Result<Mesh> {
    mesh.validate()?;
    let edges = mesh.shared_edges();
    let mut corner_uv = corner_uvs(mesh);
    let initial = island_labels(mesh, &corner_uv);

    // Island ids are never reused, so a rejected pair stays rejected only while
    // both islands are unchanged.
    let mut island_of: Vec<usize> = initial.clone();
    let mut next_id = initial.iter().max().map_or(0, |m| m + 1);
    let mut rejected: BTreeSet<(usize, usize)> = BTreeSet::new();

    loop {
        let mut candidates: BTreeMap<(usize, usize), Vec<&SharedEdge>> = BTreeMap::new();
        for e in &edges {
            let (a, b) = (island_of[e.faces[0]], island_of[e.faces[1]]);
            if a != b {
                let key = (a.min(b), a.max(b));
                if !rejected.contains(&key) {
                    candidates.entry(key).or_default().push(e);
                }
            }
        }
        // Most shared edges first; BTreeMap order breaks ties deterministically.
        let Some((&(a, b), shared)) = candidates
            .iter()
            .max_by(|x, y| x.1.len().cmp(&y.1.len()).then(y.0.cmp(x.0)))
        else {
            break;
        };
        let shared: Vec<SharedEdge> = shared.iter().map(|e| **e).collect();
        let faces_a: Vec<usize> = (0..mesh.faces.len()).filter(|&f| island_of[f] == a).collect();
        let faces_b: Vec<usize> = (0..mesh.faces.len()).filter(|&f| island_of[f] == b).collect();

        let mut accepted = None;
        for e in &shared {
            // Orient the edge so faces[0] is in island `a`.
            let (fa, fb) = if island_of[e.faces[0]] == a {
                (e.faces[0], e.faces[1])
            } else {
                (e.faces[1], e.faces[0])
            };
            let (v0, v1) = e.verts;
            let Some(sim) = Similarity::from_pairs(
                corner_uv[fb][corner_of(mesh, fb, v0)],
                corner_uv[fb][corner_of(mesh, fb, v1)],
                corner_uv[fa][corner_of(mesh, fa, v0)],
                corner_uv[fa][corner_of(mesh, fa, v1)],
            ) else {
                continue;
            };
            let moved: Vec<[Vec2; 3]> = faces_b
                .iter()
                .map(|&f| corner_uv[f].map(|p| sim.apply(p)))
                .collect();
            if !islands_overlap(&corner_uv, &faces_a, &moved) {
                accepted = Some(moved);
                break;
            }
        }

        match accepted {
            None => {
                rejected.insert((a, b));
            }
            Some(moved) => {
                for (&f, tri) in faces_b.iter().zip(moved) {
                    corner_uv[f] = tri;
                }
                weld_shared_edges(
                    mesh,
                    &mut corner_uv,
                    &shared,
                    &island_of,
                    (a, b),
                    options.weld_tolerance,
                );
                let merged = next_id;
                next_id += 1;
                for l in island_of.iter_mut() {
                    if *l == a || *l == b {
                        *l = merged;
                    }
                }
            }
        }
    }

    let labels = island_labels(mesh, &corner_uv);
    let packed = pack_islands(&corner_uv, &labels, options)?;
    let (uv_coords, face_uvs) = index_corner_uvs(&packed, &labels);
    Ok(Mesh {
        vertices: mesh.vertices.clone(),
        faces: mesh.faces.clone(),
        uv_coords,
        face_uvs,
    })
}

/// Snaps the moved island's copy of every shared edge that now coincides
/// (within `tol` of the edge's UV length) onto the anchor island's copy.
fn weld_shared_edges(
    mesh: &Mesh,
    corner_uv: &mut [[Vec2; 3]],
    shared: &[SharedEdge],
    island_of: &[usize],
    (anchor, moved): (usize, usize),
    tol: f64,
) {
    for e in shared {
        let (fa, fb) = if island_of[e.faces[0]] == anchor {
            (e.faces[0], e.faces[1])
        } else {
            (e.faces[1], e.faces[0])
        };
        let (v0, v1) = e.verts;
        let (ca0, ca1) = (corner_of(mesh, fa, v0), corner_of(mesh, fa, v1));
        let (cb0, cb1) = (corner_of(mesh, fb, v0), corner_of(mesh, fb, v1));
        let (pa0, pa1) = (corner_uv[fa][ca0], corner_uv[fa][ca1]);
        let len = ((pa1[0] - pa0[0]).powi(2) + (pa1[1] - pa0[1]).powi(2)).sqrt();
        let t = tol * len.max(1e-12);
        if close(corner_uv[fb][cb0], pa0, t) && close(corner_uv[fb][cb1], pa1, t) {
            // Every face of the moved island touching these vertices at the same
            // spot follows, so the island stays internally connected.
            let (old0, old1) = (corner_uv[fb][cb0], corner_uv[fb][cb1]);
            for f in 0..mesh.faces.len() {
                if island_of[f] != moved {
                    continue;
                }
                for k in 0..3 {
                    let v = mesh.faces[f][k];
                    if v == v0 && corner_uv[f][k] == old0 {
                        corner_uv[f][k] = pa0;
                    } else if v == v1 && corner_uv[f][k] == old1 {
                        corner_uv[f][k] = pa1;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UvReport {
    /// UV indices with a coordinate outside [0,1].
    pub out_of_range: Vec<usize>,
    /// Face pairs whose UV triangles share interior area.
    pub overlaps: Vec<(usize, usize)>,
    /// Faces with (near) zero UV area.
    pub degenerate: Vec<usize>,
}

impl UvReport {
    pub fn is_clean(&self) -> bool {
        self.out_of_range.is_empty() && self.overlaps.is_empty() && self.degenerate.is_empty()
    }
}

pub fn validate_uv(mesh: &Mesh) -> UvReport {
    let mut report = UvReport::default();
    let used: BTreeSet<usize> = mesh.face_uvs.iter().flatten().copied().collect();
    report.out_of_range = used
        .into_iter()
        .filter(|&i| {
            mesh.uv_coords[i]
                .iter()
                .any(|&c| !(-1e-9..=1.0 + 1e-9).contains(&c))
        })
        .collect();
    let tris = corner_uvs(mesh);
    for (f, t) in tris.iter().enumerate() {
        if tri_area(t).abs() < 1e-12 {
            report.degenerate.push(f);
        }
    }
    for i in 0..tris.len() {
        if report.degenerate.contains(&i) {
            continue;
        }
        for j in i + 1..tris.len() {
            if !report.degenerate.contains(&j) && triangles_overlap(&tris[i], &tris[j]) {
                report.overlaps.push((i, j));
            }
        }
    }
    report
}

/// Largest deviation of any face's interior angles between two meshes with the
/// same faces; zero for per-face similarity transforms.
pub fn max_angle_change(before: &Mesh, after: &Mesh) -> f64 {
    let angles = |t: [Vec2; 3]| {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let (p, q, r) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
            let (u, v) = ([q[0] - p[0], q[1] - p[1]], [r[0] - p[0], r[1] - p[1]]);
            let cross = u[0] * v[1] - u[1] * v[0];
            let dot = u[0] * v[0] + u[1] * v[1];
            out[k] = cross.atan2(dot);
        }
        out
    };
    (0..before.faces.len())
        .map(|f| {
            let (a, b) = (angles(before.face_uv(f)), angles(after.face_uv(f)));
            (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn two_triangles(shared_uv: bool) -> Mesh {
        let vertices = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        if shared_uv {
            Mesh::new(
                vertices,
                faces,
                vec![[0.1, 0.1], [0.9, 0.1], [0.9, 0.9], [0.1, 0.9]],
                vec![[0, 1, 2], [0, 2, 3]],
            )
            .unwrap()
        } else {
            Mesh::new(
                vertices,
                faces,
                vec![
                    [0.0, 0.0],
                    [0.4, 0.0],
                    [0.4, 0.4],
                    [0.6, 0.6],
                    [1.0, 1.0],
                    [0.6, 1.0],
                ],
                vec![[0, 1, 2], [3, 4, 5]],
            )
            .unwrap()
        }
    }

    #[test]
    fn quad_with_shared_uv_edge_is_one_island() {
        let m = two_triangles(true);
        assert_eq!(extract_islands(&m).len(), 1);
        assert_eq!(adjacency_score(&m), 1.0);
    }

    #[test]
    fn disjoint_uv_regions_are_two_islands() {
        let m = two_triangles(false);
        let islands = extract_islands(&m);
        assert_eq!(islands.len(), 2);
        assert_eq!(islands[0].adjacency, vec![1]);
        assert_eq!(adjacency_score(&m), 0.0);
    }

    #[test]
    fn reorder_joins_split_quad() {
        let m = two_triangles(false);
        let out = reorder_uv(&m).unwrap();
        assert_eq!(out.vertices, m.vertices);
        assert_eq!(out.faces, m.faces);
        assert_eq!(extract_islands(&out).len(), 1);
        assert_eq!(adjacency_score(&out), 1.0);
        assert!(validate_uv(&out).is_clean());
        assert!(max_angle_change(&m, &out) < 1e-6);
    }

    #[test]
    fn single_island_is_only_repacked() {
        let m = two_triangles(true);
        let out = reorder_uv(&m).unwrap();
        assert_eq!(extract_islands(&out).len(), 1);
        assert!(max_angle_change(&m, &out) < 1e-9);
    }

    #[test]
    fn seamless_grid_scores_one() {
        let m = fixtures::grid_plane(3);
        assert_eq!(adjacency_score(&m), 1.0);
        assert_eq!(extract_islands(&m).len(), 1);
    }

    #[test]
    fn overlap_detection_lists_faces() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0], [6.0, 5.0, 5.0], [5.0, 6.0, 5.0]],
            vec![[0, 1, 2], [3, 4, 5]],
            vec![[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.1, 0.1], [0.6, 0.1], [0.1, 0.6]],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        assert_eq!(validate_uv(&mesh).overlaps, vec![(0, 1)]);
    }

    #[test]
    fn touching_triangles_do_not_overlap() {
        let a = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let b = [[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(!triangles_overlap(&a, &b));
        let c = [[0.2, 0.2], [0.3, 0.2], [0.2, 0.3]];
        assert!(triangles_overlap(&a, &c));
    }

    #[test]
    fn packing_failure_is_reported() {
        let m = two_triangles(false);
        let opts = ReorderOptions {
            texture_size: 4,
            padding_texels: 2.0,
            ..Default::default()
        };
        assert!(matches!(reorder_uv_with(&m, &opts), Err(Error::Packing(_))));
    }
}
