//! Surface prediction from the volume: per-pixel ray marching to the
//! tsdf zero crossing, yielding world-frame point and normal maps.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geometry::{Intrinsics, NormalMap, PointMap, Pose, VectorMap};
use crate::tsdf::TsdfVolume;

/// March every camera ray through the volume; a +/− sign change yields
/// the linearly interpolated zero crossing and a gradient normal. Rays
/// without a crossing come back invalid. Step is voxel_size/2.
pub fn raycast_surface(vol: &TsdfVolume, pose: &Pose, k: &Intrinsics) -> (PointMap, NormalMap) {
    let w = k.width;
    let h = k.height;
    let origin = Vector3::new(
        pose.translation.x as f32,
        pose.translation.y as f32,
        pose.translation.z as f32,
    );
    let step = vol.voxel_size * 0.5;
    // shrink bounds by half a voxel so trilinear sampling stays in-grid
    let (lo, hi) = vol.aabb();
    let half = vol.voxel_size * 0.5;
    let lo = lo + Vector3::new(half, half, half);
    let hi = hi - Vector3::new(half, half, half);

    let hits: Vec<Option<(Vector3<f32>, Vector3<f32>)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let u = i % w;
            let v = i / w;
            let dir_cam = Vector3::new(
                (u as f64 - k.cx) / k.fx,
                (v as f64 - k.cy) / k.fy,
                1.0,
            )
            .normalize();
            let dir_w = pose.transform_vector(dir_cam);
            let dir = Vector3::new(dir_w.x as f32, dir_w.y as f32, dir_w.z as f32);
            march_ray(vol, origin, dir, lo, hi, step)
        })
        .collect();

    let mut points = VectorMap::new(w, h);
    let mut normals = VectorMap::new(w, h);
    for (i, hit) in hits.into_iter().enumerate() {
        if let Some((p, n)) = hit {
            points.set(i % w, i / w, p);
            normals.set(i % w, i / w, n);
        }
    }
    (points, normals)
}

fn march_ray(
    vol: &TsdfVolume,
    origin: Vector3<f32>,
    dir: Vector3<f32>,
    lo: Vector3<f32>,
    hi: Vector3<f32>,
    step: f32,
) -> Option<(Vector3<f32>, Vector3<f32>)> {
    let (t0, t1) = ray_aabb(origin, dir, lo, hi)?;
    let t0 = t0.max(0.0);
    if t0 >= t1 {
        return None;
    }
    let mut t = t0 + 1e-6;
    let mut prev: Option<(f32, f32)> = None;
    while t <= t1 {
        let p = origin + dir * t;
        match vol.sample_tsdf(p) {
            None => prev = None,
            Some(value) => {
                if let Some((pv, pt)) = prev {
                    if pv > 0.0 && value <= 0.0 {
                        let t_hit = pt + (t - pt) * pv / (pv - value);
                        let p_hit = origin + dir * t_hit;
                        let n = vol.sample_gradient(p_hit)?;
                        let norm = n.norm();
                        if norm < 1e-12 {
                            return None;
                        }
                        return Some((p_hit, n / norm));
                    }
                }
                prev = Some((value, t));
            }
        }
        t += step;
    }
    None
}

/// Slab intersection of a ray with an axis-aligned box.
fn ray_aabb(
    origin: Vector3<f32>,
    dir: Vector3<f32>,
    lo: Vector3<f32>,
    hi: Vector3<f32>,
) -> Option<(f32, f32)> {
    let mut t_min = f32::NEG_INFINITY;
    let mut t_max = f32::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-12 {
            if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let mut a = (lo[axis] - origin[axis]) * inv;
        let mut b = (hi[axis] - origin[axis]) * inv;
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t_min = t_min.max(a);
        t_max = t_max.min(b);
    }
    if t_min > t_max {
        None
    } else {
        Some((t_min, t_max))
    }
}
