//! Marching-cubes isosurface extraction over the tsdf zero level set.
//!
//! The 256-case triangle table is constructed at first use from a
//! per-face rule driven only by corner signs (each maximal negative run
//! along a face boundary closes with one directed segment, negative side
//! on the left seen from outside). Both cells sharing a face see the same
//! signs and emit the same face topology, so welded meshes are crack-free
//! wherever all involved voxels are observed.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::semantic_fusion::argmax_slice;
use crate::tsdf::mesh::SemanticMesh;
use crate::tsdf::TsdfVolume;

/// Cube corner offsets; bit i of a configuration is corner i inside
/// (tsdf < 0).
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Face corner cycles, counter-clockwise as seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1], // z = 0
    [4, 5, 6, 7], // z = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 4, 7, 3], // x = 0
    [1, 2, 6, 5], // x = 1
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a))
        .unwrap()
}

/// Directed surface segments per configuration: next[start_edge] = end_edge.
fn config_segments(config: usize) -> [usize; 12] {
    let inside = |c: usize| (config >> c) & 1 == 1;
    let mut next = [usize::MAX; 12];
    for cycle in &FACES {
        for j in 0..4 {
            let a = cycle[j];
            let b = cycle[(j + 1) % 4];
            if !inside(a) && inside(b) {
                let entry = edge_between(a, b);
                let mut m = (j + 1) % 4;
                while inside(cycle[(m + 1) % 4]) {
                    m = (m + 1) % 4;
                }
                let exit = edge_between(cycle[m], cycle[(m + 1) % 4]);
                next[entry] = exit;
            }
        }
    }
    next
}

fn build_case_table() -> Vec<Vec<[u8; 3]>> {
    (0..256usize)
        .map(|config| {
            let next = config_segments(config);
            let mut tris = Vec::new();
            let mut used = [false; 12];
            for start in 0..12 {
                if next[start] == usize::MAX || used[start] {
                    continue;
                }
                let mut ring = vec![start];
                used[start] = true;
                let mut cur = next[start];
                while cur != start {
                    used[cur] = true;
                    ring.push(cur);
                    cur = next[cur];
                }
                for i in 1..ring.len() - 1 {
                    tris.push([ring[0] as u8, ring[i] as u8, ring[i + 1] as u8]);
                }
            }
            tris
        })
        .collect()
}

fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(build_case_table)
}

struct VertexRec {
    pos: Vector3<f32>,
    normal: Vector3<f32>,
    color: [f32; 3],
    probs: Vec<f32>,
}

struct LayerOut {
    verts: Vec<(u64, VertexRec)>,
    tris: Vec<[u64; 3]>,
}

/// Extract the triangle mesh of the tsdf zero crossing. Only cells whose
/// 8 corner voxels are all observed contribute. Vertex attributes are the
/// volume's trilinear values at the vertex position (which reduces to the
/// two edge endpoints), distributions renormalized; normals come from the
/// interpolated tsdf gradient and point into free space.
pub fn extract_mesh(vol: &TsdfVolume) -> SemanticMesh {
    let table = case_table();
    let nz = vol.dims[2];

    let layers: Vec<LayerOut> = (0..nz - 1)
        .into_par_iter()
        .map(|z| extract_layer(vol, table, z))
        .collect();

    let mut mesh = SemanticMesh {
        num_classes: vol.num_classes,
        ..Default::default()
    };
    let mut index: HashMap<u64, u32> = HashMap::new();
    for layer in layers {
        for (key, rec) in layer.verts {
            if let std::collections::hash_map::Entry::Vacant(e) = index.entry(key) {
                e.insert(mesh.positions.len() as u32);
                mesh.positions.push(rec.pos);
                mesh.normals.push(rec.normal);
                mesh.colors.push([
                    (rec.color[0] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (rec.color[1] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (rec.color[2] * 255.0).round().clamp(0.0, 255.0) as u8,
                ]);
                let (label, conf) = argmax_slice(&rec.probs);
                mesh.labels.push(label as u16);
                mesh.confs.push(conf);
                mesh.probs.extend_from_slice(&rec.probs);
            }
        }
        for t in layer.tris {
            mesh.triangles
                .push([index[&t[0]], index[&t[1]], index[&t[2]]]);
        }
    }
    mesh
}

fn extract_layer(vol: &TsdfVolume, table: &[Vec<[u8; 3]>], z: usize) -> LayerOut {
    let [nx, ny, _] = vol.dims;
    let mut out = LayerOut {
        verts: Vec::new(),
        tris: Vec::new(),
    };
    let mut corner_idx = [0usize; 8];
    for y in 0..ny - 1 {
        for x in 0..nx - 1 {
            let mut all_observed = true;
            let mut vals = [0.0f32; 8];
            for (c, off) in CORNERS.iter().enumerate() {
                let i = vol.index(x + off[0], y + off[1], z + off[2]);
                corner_idx[c] = i;
                if vol.weight[i] <= 0.0 {
                    all_observed = false;
                    break;
                }
                vals[c] = vol.tsdf[i];
            }
            if !all_observed {
                continue;
            }
            let mut config = 0usize;
            for (c, &v) in vals.iter().enumerate() {
                if v < 0.0 {
                    config |= 1 << c;
                }
            }
            let tris = &table[config];
            if tris.is_empty() {
                continue;
            }
            let mut keys = [u64::MAX; 12];
            for tri in tris {
                let mut tkeys = [0u64; 3];
                for (slot, &e) in tri.iter().enumerate() {
                    let e = e as usize;
                    if keys[e] == u64::MAX {
                        let (key, rec) = edge_vertex(vol, x, y, z, e);
                        keys[e] = key;
                        out.verts.push((key, rec));
                    }
                    tkeys[slot] = keys[e];
                }
                out.tris.push(tkeys);
            }
        }
    }
    out
}

/// Canonical vertex on a cell edge: both cells sharing the edge compute
/// the identical key and record.
fn edge_vertex(vol: &TsdfVolume, x: usize, y: usize, z: usize, e: usize) -> (u64, VertexRec) {
    let (ca, cb) = EDGES[e];
    let a = [
        x + CORNERS[ca][0],
        y + CORNERS[ca][1],
        z + CORNERS[ca][2],
    ];
    let b = [
        x + CORNERS[cb][0],
        y + CORNERS[cb][1],
        z + CORNERS[cb][2],
    ];
    // orient low -> high along the differing axis
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let axis = (0..3).find(|&i| lo[i] != hi[i]).unwrap();
    let [nx, ny, _] = vol.dims;
    let key = (((lo[2] * ny + lo[1]) * nx + lo[0]) * 3 + axis) as u64;

    let ia = vol.index(lo[0], lo[1], lo[2]);
    let ib = vol.index(hi[0], hi[1], hi[2]);
    let va = vol.tsdf[ia];
    let vb = vol.tsdf[ib];
    let denom = va - vb;
    let t = if denom.abs() < 1e-12 {
        0.5
    } else {
        (va / denom).clamp(0.0, 1.0)
    };

    let pa = vol.center(lo[0], lo[1], lo[2]);
    let pb = vol.center(hi[0], hi[1], hi[2]);
    let pos = pa + (pb - pa) * t;

    let ga = corner_gradient(vol, lo);
    let gb = corner_gradient(vol, hi);
    let g = ga + (gb - ga) * t;
    let norm = g.norm();
    let normal = if norm > 1e-12 {
        g / norm
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };

    let mut color = [0.0f32; 3];
    for ch in 0..3 {
        let c_a = vol.color[ia * 3 + ch];
        let c_b = vol.color[ib * 3 + ch];
        color[ch] = c_a + (c_b - c_a) * t;
    }

    let c = vol.num_classes;
    let mut probs = vec![0.0f32; c];
    let mut sum = 0.0f32;
    for j in 0..c {
        let p = vol.probs[ia * c + j] * (1.0 - t) + vol.probs[ib * c + j] * t;
        probs[j] = p;
        sum += p;
    }
    if sum > 0.0 {
        for p in &mut probs {
            *p /= sum;
        }
    } else {
        probs.fill(1.0 / c as f32);
    }

    (key, VertexRec { pos, normal, color, probs })
}

/// Grid-based tsdf gradient at a voxel, central differences where both
/// neighbors are observed, one-sided at boundaries, zero otherwise.
fn corner_gradient(vol: &TsdfVolume, p: [usize; 3]) -> Vector3<f32> {
    let vs = vol.voxel_size;
    let mut g = Vector3::zeros();
    let here = vol.index(p[0], p[1], p[2]);
    for axis in 0..3 {
        let mut lo_val = None;
        let mut hi_val = None;
        if p[axis] > 0 {
            let mut q = p;
            q[axis] -= 1;
            let i = vol.index(q[0], q[1], q[2]);
            if vol.weight[i] > 0.0 {
                lo_val = Some(vol.tsdf[i]);
            }
        }
        if p[axis] + 1 < vol.dims[axis] {
            let mut q = p;
            q[axis] += 1;
            let i = vol.index(q[0], q[1], q[2]);
            if vol.weight[i] > 0.0 {
                hi_val = Some(vol.tsdf[i]);
            }
        }
        g[axis] = match (lo_val, hi_val) {
            (Some(a), Some(b)) => (b - a) / (2.0 * vs),
            (Some(a), None) => (vol.tsdf[here] - a) / vs,
            (None, Some(b)) => (b - vol.tsdf[here]) / vs,
            (None, None) => 0.0,
        };
    }
    g
}
