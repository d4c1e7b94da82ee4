//! Triangle meshes with per-corner UV indices and a Wavefront OBJ subset.
//!
//! Only `v`, `vt` and `f` statements are understood. Faces reference both a
//! position and a texture coordinate (`f 1/1 2/2 3/3`); a trailing normal
//! index (`1/1/1`) is accepted and discarded. Polygons with more than three
//! corners are fan-triangulated. Every other statement is skipped with a
//! warning and is not written back out.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{validate, Error, Result};

pub type Vec3 = [f64; 3];
pub type Vec2 = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub uv_coords: Vec<Vec2>,
    pub face_uvs: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        uv_coords: Vec<Vec2>,
        face_uvs: Vec<[usize; 3]>,
    ) -> Result<Self> {
        let mesh = Mesh {
            vertices,
            faces,
            uv_coords,
            face_uvs,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        validate(!self.faces.is_empty(), || "mesh has no faces".into())?;
        validate(self.faces.len() == self.face_uvs.len(), || {
            format!(
                "mesh has {} faces but {} face uv triples",
                self.faces.len(),
                self.face_uvs.len()
            )
        })?;
        for (i, (f, t)) in self.faces.iter().zip(&self.face_uvs).enumerate() {
            validate(f.iter().all(|&v| v < self.vertices.len()), || {
                format!("face {i} references a vertex out of range")
            })?;
            validate(t.iter().all(|&v| v < self.uv_coords.len()), || {
                format!("face {i} references a uv out of range")
            })?;
        }
        validate(
            self.vertices.iter().flatten().all(|v| v.is_finite()),
            || "mesh has non-finite vertex".into(),
        )?;
        validate(
            self.uv_coords
                .iter()
                .flatten()
                .all(|v| v.is_finite() && (-1e-9..=1.0 + 1e-9).contains(v)),
            || "uv coordinates must lie in [0,1]^2".into(),
        )
    }

    pub fn face_positions(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    pub fn face_uv(&self, face: usize) -> [Vec2; 3] {
        self.face_uvs[face].map(|i| self.uv_coords[i])
    }

    /// Undirected position edges shared by exactly two faces, keyed by sorted vertex pair.
    pub fn shared_edges(&self) -> Vec<SharedEdge> {
        let mut by_edge: std::collections::BTreeMap<(usize, usize), Vec<(usize, usize)>> =
            Default::default();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                by_edge
                    .entry((a.min(b), a.max(b)))
                    .or_default()
                    .push((fi, k));
            }
        }
        by_edge
            .into_iter()
            .filter(|(_, users)| users.len() == 2)
            .map(|(verts, users)| SharedEdge {
                verts,
                faces: [users[0].0, users[1].0],
            })
            .collect()
    }

    pub fn from_obj_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_obj(&text, &path.display().to_string())
    }

    pub fn write_obj_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.uv_coords {
            let _ = writeln!(out, "vt {} {}", t[0], t[1]);
        }
        for (f, t) in self.faces.iter().zip(&self.face_uvs) {
            let _ = writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                f[0] + 1,
                t[0] + 1,
                f[1] + 1,
                t[1] + 1,
                f[2] + 1,
                t[2] + 1
            );
        }
        out
    }
}

/// A position edge shared by two faces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedEdge {
    pub verts: (usize, usize),
    pub faces: [usize; 2],
}

fn parse_index(tok: &str, count: usize, what: &str) -> std::result::Result<usize, String> {
    let raw: i64 = tok
        .parse()
        .map_err(|_| format!("invalid {what} index `{tok}`"))?;
    let idx = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        count as i64 + raw
    } else {
        return Err(format!("{what} index 0 is not allowed"));
    };
    if idx < 0 || idx as usize >= count {
        return Err(format!("{what} index {raw} out of range ({count} defined)"));
    }
    Ok(idx as usize)
}

/// Parses the OBJ subset. `origin` names the source in error messages.
pub fn parse_obj(text: &str, origin: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut uv_coords = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let mut skipped: BTreeSet<String> = BTreeSet::new();

    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let keyword = toks.next().unwrap_or_default();
        let rest: Vec<&str> = toks.collect();
        let floats = |n: usize| -> Result<Vec<f64>> {
            if rest.len() < n {
                return Err(err(lineno, format!("`{keyword}` needs {n} numbers")));
            }
            rest[..n]
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| err(lineno, format!("invalid number `{t}`")))
                })
                .collect()
        };
        match keyword {
            "v" => {
                let p = floats(3)?;
                vertices.push([p[0], p[1], p[2]]);
            }
            "vt" => {
                let p = floats(2)?;
                uv_coords.push([p[0], p[1]]);
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(err(lineno, "face needs at least 3 corners".into()));
                }
                let mut corners = Vec::with_capacity(rest.len());
                for tok in &rest {
                    let mut parts = tok.split('/');
                    let v = parts.next().unwrap_or("");
                    let t = parts.next().unwrap_or("");
                    if t.is_empty() {
                        return Err(err(
                            lineno,
                            format!("face corner `{tok}` has no texture coordinate"),
                        ));
                    }
                    let vi = parse_index(v, vertices.len(), "vertex").map_err(|m| err(lineno, m))?;
                    let ti = parse_index(t, uv_coords.len(), "uv").map_err(|m| err(lineno, m))?;
                    corners.push((vi, ti));
                }
                for k in 1..corners.len() - 1 {
                    faces.push([corners[0].0, corners[k].0, corners[k + 1].0]);
                    face_uvs.push([corners[0].1, corners[k].1, corners[k + 1].1]);
                }
            }
            other => {
                if skipped.insert(other.to_string()) {
                    log::warn!("{origin}:{lineno}: ignoring unsupported OBJ statement `{other}`");
                }
            }
        }
    }

    Mesh::new(vertices, faces, uv_coords, face_uvs).map_err(|e| match e {
        Error::Validation(m) => err(0, m),
        other => other,
    })
}
