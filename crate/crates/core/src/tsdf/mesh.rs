//! Triangle mesh whose vertices carry color, normal, and a class
//! probability distribution, with ASCII PLY import/export.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::semantic_fusion::argmax_slice;

#[derive(Debug, Clone, Default)]
pub struct SemanticMesh {
    pub num_classes: usize,
    pub positions: Vec<Vector3<f32>>,
    pub normals: Vec<Vector3<f32>>,
    pub colors: Vec<[u8; 3]>,
    /// Flat per-vertex distributions, num_classes entries each; empty
    /// when the mesh was loaded from a PLY (promote_labels restores it).
    pub probs: Vec<f32>,
    pub labels: Vec<u16>,
    pub confs: Vec<f32>,
    pub triangles: Vec<[u32; 3]>,
}

/// Which optional vertex data a loaded PLY carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlyInfo {
    pub has_normals: bool,
    pub has_labels: bool,
}

impl SemanticMesh {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn vertex_probs(&self, i: usize) -> &[f32] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Replace one vertex distribution; keeps label/conf consistent.
    pub fn set_vertex_probs(&mut self, i: usize, probs: &[f32]) {
        assert_eq!(probs.len(), self.num_classes);
        let c = self.num_classes;
        self.probs[i * c..(i + 1) * c].copy_from_slice(probs);
        let (label, conf) = argmax_slice(probs);
        self.labels[i] = label as u16;
        self.confs[i] = conf;
    }

    /// Rebuild per-vertex distributions from stored label + confidence:
    /// prob[label] = conf, remainder spread evenly.
    pub fn promote_labels(&mut self, num_classes: usize) -> Result<()> {
        for &l in &self.labels {
            if l as usize >= num_classes {
                return Err(Error::ClassCountMismatch {
                    volume: num_classes,
                    input: l as usize + 1,
                });
            }
        }
        self.num_classes = num_classes;
        self.probs = vec![0.0; self.len() * num_classes];
        for i in 0..self.len() {
            let conf = if num_classes == 1 {
                1.0
            } else {
                self.confs[i].clamp(1.0 / num_classes as f32, 1.0)
            };
            let rest = if num_classes > 1 {
                (1.0 - conf) / (num_classes - 1) as f32
            } else {
                0.0
            };
            let row = &mut self.probs[i * num_classes..(i + 1) * num_classes];
            for p in row.iter_mut() {
                *p = rest;
            }
            row[self.labels[i] as usize] = conf;
        }
        Ok(())
    }

    pub fn aabb(&self) -> Option<(Vector3<f32>, Vector3<f32>)> {
        let first = *self.positions.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }

    /// Structural checks: index ranges, unit normals, normalized
    /// distributions (when present).
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.normals.len() != n
            || self.colors.len() != n
            || self.labels.len() != n
            || self.confs.len() != n
        {
            return Err(Error::InvalidInput("vertex attribute length mismatch".into()));
        }
        if !self.probs.is_empty() && self.probs.len() != n * self.num_classes {
            return Err(Error::InvalidInput("distribution length mismatch".into()));
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i as usize >= n) {
                return Err(Error::InvalidInput(format!("triangle index out of range: {t:?}")));
            }
        }
        for (i, nrm) in self.normals.iter().enumerate() {
            if (nrm.norm() - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!(
                    "vertex {i} normal not unit: {nrm:?}"
                )));
            }
        }
        if !self.probs.is_empty() {
            for i in 0..n {
                let sum: f32 = self.vertex_probs(i).iter().sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::InvalidInput(format!(
                        "vertex {i} distribution sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// ASCII PLY with x y z nx ny nz red green blue label conf vertices
    /// and uint index triangles.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "ply").map_err(io)?;
        writeln!(w, "format ascii 1.0").map_err(io)?;
        writeln!(w, "element vertex {}", self.len()).map_err(io)?;
        for p in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(w, "property float {p}").map_err(io)?;
        }
        for p in ["red", "green", "blue"] {
            writeln!(w, "property uchar {p}").map_err(io)?;
        }
        writeln!(w, "property ushort label").map_err(io)?;
        writeln!(w, "property float conf").map_err(io)?;
        writeln!(w, "element face {}", self.triangles.len()).map_err(io)?;
        writeln!(w, "property list uchar uint vertex_indices").map_err(io)?;
        writeln!(w, "end_header").map_err(io)?;
        for i in 0..self.len() {
            let p = self.positions[i];
            let n = self.normals[i];
            let c = self.colors[i];
            writeln!(
                w,
                "{} {} {} {} {} {} {} {} {} {} {}",
                p.x, p.y, p.z, n.x, n.y, n.z, c[0], c[1], c[2], self.labels[i], self.confs[i]
            )
            .map_err(io)?;
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2]).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Parse an ASCII PLY. Distributions are left empty; call
    /// promote_labels afterwards when label data is present.
    pub fn load_ply(path: &Path) -> Result<(Self, PlyInfo)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let mut next_line = || -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::parse(path, i + 1, format!("read: {e}"))),
                None => Err(Error::parse(path, 0, "unexpected end of file")),
            }
        };

        let (_, magic) = next_line()?;
        if magic.trim() != "ply" {
            return Err(Error::parse(path, 1, "not a PLY file"));
        }
        let mut vertex_count = 0usize;
        let mut face_count = 0usize;
        let mut vertex_props: Vec<String> = Vec::new();
        let mut in_vertex = false;
        let mut saw_format = false;
        loop {
            let (ln, line) = next_line()?;
            let line = line.trim().to_string();
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first().copied() {
                Some("format") => {
                    if f.get(1) != Some(&"ascii") {
                        return Err(Error::parse(path, ln, "only ascii PLY supported"));
                    }
                    saw_format = true;
                }
                Some("comment") => {}
                Some("element") => {
                    let count: usize = f
                        .get(2)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse(path, ln, "bad element line"))?;
                    match f.get(1).copied() {
                        Some("vertex") => {
                            vertex_count = count;
                            in_vertex = true;
                        }
                        Some("face") => {
                            face_count = count;
                            in_vertex = false;
                        }
                        _ => in_vertex = false,
                    }
                }
                Some("property") => {
                    if in_vertex {
                        if f.get(1) == Some(&"list") {
                            return Err(Error::parse(path, ln, "list property on vertex"));
                        }
                        let name = f
                            .last()
                            .ok_or_else(|| Error::parse(path, ln, "bad property line"))?;
                        vertex_props.push((*name).to_string());
                    }
                }
                Some("end_header") => break,
                _ => return Err(Error::parse(path, ln, format!("unexpected header line: {line}"))),
            }
        }
        if !saw_format {
            return Err(Error::parse(path, 0, "missing format line"));
        }
        let col = |name: &str| vertex_props.iter().position(|p| p == name);
        let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::parse(path, 0, "vertex x/y/z properties missing")),
        };
        let normal_cols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let color_cols = match (col("red"), col("green"), col("blue")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let label_col = col("label");
        let conf_col = col("conf");

        let mut mesh = SemanticMesh::default();
        for _ in 0..vertex_count {
            let (ln, line) = next_line()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != vertex_props.len() {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("expected {} vertex fields, got {}", vertex_props.len(), f.len()),
                ));
            }
            let num = |i: usize| -> Result<f32> {
                f[i].parse()
                    .map_err(|e| Error::parse(path, ln, format!("bad number: {e}")))
            };
            mesh.positions
                .push(Vector3::new(num(ix)?, num(iy)?, num(iz)?));
            mesh.normals.push(match normal_cols {
                Some((a, b, c)) => Vector3::new(num(a)?, num(b)?, num(c)?),
                None => Vector3::new(0.0, 0.0, 1.0),
            });
            mesh.colors.push(match color_cols {
                Some((a, b, c)) => [num(a)? as u8, num(b)? as u8, num(c)? as u8],
                None => [128, 128, 128],
            });
            mesh.labels.push(match label_col {
                Some(i) => f[i]
                    .parse()
                    .map_err(|e| Error::parse(path, ln, format!("bad label: {e}")))?,
                None => 0,
            });
            mesh.confs.push(match conf_col {
                Some(i) => num(i)?,
                None => 1.0,
            });
        }
        for _ in 0..face_count {
            let (ln, line) = next_line()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.first() != Some(&"3") {
                return Err(Error::parse(path, ln, "only triangle faces supported"));
            }
            if f.len() != 4 {
                return Err(Error::parse(path, ln, "bad face line"));
            }
            let idx = |i: usize| -> Result<u32> {
                f[i].parse()
                    .map_err(|e| Error::parse(path, ln, format!("bad index: {e}")))
            };
            let tri = [idx(1)?, idx(2)?, idx(3)?];
            if tri.iter().any(|&i| i as usize >= vertex_count) {
                return Err(Error::parse(path, ln, "face index out of range"));
            }
            mesh.triangles.push(tri);
        }
        let info = PlyInfo {
            has_normals: normal_cols.is_some(),
            has_labels: label_col.is_some() && conf_col.is_some(),
        };
        mesh.num_classes = mesh.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
        Ok((mesh, info))
    }
}
