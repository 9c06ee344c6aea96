//! Dense TSDF voxel grid with per-voxel weight, color, and class
//! probabilities, plus the per-frame depth integration update.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ColorImage, DepthImage, Intrinsics, Pose};

pub const DEFAULT_TRUNC_FACTOR: f32 = 4.0;
pub const DEFAULT_MAX_WEIGHT: f32 = 64.0;

/// Voxel grid over `[origin, origin + dims*voxel_size)`; the sample point
/// of voxel (x,y,z) is the cell center `origin + (x+0.5, y+0.5, z+0.5)*voxel_size`.
///
/// Storage is x-fastest: index = x + nx*(y + ny*z). Unobserved voxels
/// hold tsdf 1.0 and weight 0.
pub struct TsdfVolume {
    pub dims: [usize; 3],
    pub voxel_size: f32,
    pub origin: Vector3<f32>,
    /// Truncation distance in meters; stored tsdf values are normalized by it.
    pub truncation: f32,
    pub max_weight: f32,
    pub num_classes: usize,
    pub(crate) tsdf: Vec<f32>,
    pub(crate) weight: Vec<f32>,
    /// RGB in [0,1], 3 entries per voxel.
    pub(crate) color: Vec<f32>,
    /// Normalized class probabilities, C entries per voxel.
    pub(crate) probs: Vec<f32>,
}

impl TsdfVolume {
    pub fn new(
        dims: [usize; 3],
        voxel_size: f32,
        origin: Vector3<f32>,
        num_classes: usize,
    ) -> Result<Self> {
        Self::with_params(
            dims,
            voxel_size,
            origin,
            num_classes,
            DEFAULT_TRUNC_FACTOR * voxel_size,
            DEFAULT_MAX_WEIGHT,
        )
    }

    pub fn with_params(
        dims: [usize; 3],
        voxel_size: f32,
        origin: Vector3<f32>,
        num_classes: usize,
        truncation: f32,
        max_weight: f32,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput(format!(
                "volume dims {dims:?} must all be >= 2"
            )));
        }
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::InvalidInput(format!("voxel_size {voxel_size} must be > 0")));
        }
        if !(truncation > 0.0) || !truncation.is_finite() {
            return Err(Error::InvalidInput(format!("truncation {truncation} must be > 0")));
        }
        if !(max_weight >= 1.0) {
            return Err(Error::InvalidInput(format!("max_weight {max_weight} must be >= 1")));
        }
        if num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be >= 1".into()));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite origin".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            dims,
            voxel_size,
            origin,
            truncation,
            max_weight,
            num_classes,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            color: vec![0.0; n * 3],
            probs: vec![1.0 / num_classes as f32; n * num_classes],
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// World-frame cell center.
    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vector3<f32> {
        self.origin
            + Vector3::new(x as f32 + 0.5, y as f32 + 0.5, z as f32 + 0.5) * self.voxel_size
    }

    pub fn tsdf_at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.tsdf[self.index(x, y, z)]
    }

    pub fn weight_at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.weight[self.index(x, y, z)]
    }

    pub fn color_at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = self.index(x, y, z) * 3;
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }

    pub fn probs_at(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let i = self.index(x, y, z) * self.num_classes;
        &self.probs[i..i + self.num_classes]
    }

    /// Direct voxel write for synthetic volume construction.
    pub fn set_voxel(&mut self, x: usize, y: usize, z: usize, tsdf: f32, weight: f32) {
        let i = self.index(x, y, z);
        self.tsdf[i] = tsdf.clamp(-1.0, 1.0);
        self.weight[i] = weight;
    }

    pub fn set_voxel_color(&mut self, x: usize, y: usize, z: usize, rgb: [f32; 3]) {
        let i = self.index(x, y, z) * 3;
        self.color[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn set_voxel_probs(&mut self, x: usize, y: usize, z: usize, probs: &[f32]) {
        assert_eq!(probs.len(), self.num_classes);
        let i = self.index(x, y, z) * self.num_classes;
        self.probs[i..i + self.num_classes].copy_from_slice(probs);
    }

    /// World-frame bounds of the grid.
    pub fn aabb(&self) -> (Vector3<f32>, Vector3<f32>) {
        let hi = self.origin
            + Vector3::new(
                self.dims[0] as f32,
                self.dims[1] as f32,
                self.dims[2] as f32,
            ) * self.voxel_size;
        (self.origin, hi)
    }

    /// Fold one depth (and optional color) frame into the volume.
    ///
    /// For each voxel projecting into the image: sdf = depth(u,v) − voxel
    /// camera z. Voxels with sdf <= −truncation are untouched; otherwise
    /// the stored value moves by a running average of clamp(sdf/τ, −1, 1)
    /// with per-update weight 1, and weight ← min(weight+1, max_weight).
    /// Color joins the same average when within ±τ of the surface.
    pub fn integrate_frame(
        &mut self,
        depth: &DepthImage,
        color: Option<&ColorImage>,
        pose: &Pose,
        k: &Intrinsics,
    ) -> Result<()> {
        if !pose.is_finite() {
            return Err(Error::InvalidInput("non-finite pose".into()));
        }
        if depth.width != k.width || depth.height != k.height {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", k.width, k.height),
                got: format!("{}x{}", depth.width, depth.height),
            });
        }
        if let Some(c) = color {
            if c.width != k.width || c.height != k.height {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}", k.width, k.height),
                    got: format!("{}x{}", c.width, c.height),
                });
            }
        }
        let world_to_cam = pose.inverse();
        let [nx, ny, _] = self.dims;
        let slab = nx * ny;
        let tau = self.truncation;
        let w_max = self.max_weight;
        let vs = self.voxel_size;
        let origin = self.origin;

        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .zip(self.color.par_chunks_mut(slab * 3))
            .enumerate()
            .for_each(|(z, ((ts, ws), cs))| {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = x + nx * y;
                        let center = origin
                            + Vector3::new(x as f32 + 0.5, y as f32 + 0.5, z as f32 + 0.5) * vs;
                        let p_cam = world_to_cam.transform_point(center.cast::<f64>());
                        if p_cam.z <= 0.0 {
                            continue;
                        }
                        let Some((uf, vf)) = k.project(p_cam) else {
                            continue;
                        };
                        let (u, v) = (uf.round() as i64, vf.round() as i64);
                        if u < 0 || v < 0 || u >= k.width as i64 || v >= k.height as i64 {
                            continue;
                        }
                        let (u, v) = (u as usize, v as usize);
                        let d = depth.get(u, v);
                        if d <= 0.0 {
                            continue;
                        }
                        let sdf = d - p_cam.z as f32;
                        if sdf <= -tau {
                            continue;
                        }
                        let t_new = (sdf / tau).clamp(-1.0, 1.0);
                        let w = ws[i];
                        let w1 = w + 1.0;
                        ts[i] = (ts[i] * w + t_new) / w1;
                        ws[i] = w1.min(w_max);
                        if sdf.abs() <= tau {
                            if let Some(cimg) = color {
                                let rgb = cimg.get(u, v);
                                for ch in 0..3 {
                                    let c_new = rgb[ch] as f32 / 255.0;
                                    cs[i * 3 + ch] = (cs[i * 3 + ch] * w + c_new) / w1;
                                }
                            }
                        }
                    }
                }
            });
        Ok(())
    }

    /// Trilinear tsdf sample at a world point; None outside the grid or
    /// when any of the 8 surrounding voxels is unobserved.
    pub fn sample_tsdf(&self, p: Vector3<f32>) -> Option<f32> {
        let g = (p - self.origin) / self.voxel_size - Vector3::new(0.5, 0.5, 0.5);
        let x0 = g.x.floor();
        let y0 = g.y.floor();
        let z0 = g.z.floor();
        let (xi, yi, zi) = (x0 as isize, y0 as isize, z0 as isize);
        if xi < 0
            || yi < 0
            || zi < 0
            || xi + 1 >= self.dims[0] as isize
            || yi + 1 >= self.dims[1] as isize
            || zi + 1 >= self.dims[2] as isize
        {
            return None;
        }
        let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
        let (fx, fy, fz) = (g.x - x0, g.y - y0, g.z - z0);
        let mut value = 0.0f32;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let i = self.index(xi + dx, yi + dy, zi + dz);
                    if self.weight[i] <= 0.0 {
                        return None;
                    }
                    let wx = if dx == 1 { fx } else { 1.0 - fx };
                    let wy = if dy == 1 { fy } else { 1.0 - fy };
                    let wz = if dz == 1 { fz } else { 1.0 - fz };
                    value += self.tsdf[i] * wx * wy * wz;
                }
            }
        }
        Some(value)
    }

    /// Central-difference tsdf gradient (meters scale) at a world point.
    pub fn sample_gradient(&self, p: Vector3<f32>) -> Option<Vector3<f32>> {
        let h = self.voxel_size;
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let a = self.sample_tsdf(p + e)?;
            let b = self.sample_tsdf(p - e)?;
            g[axis] = (a - b) / (2.0 * h);
        }
        Some(g)
    }

    /// Parallel pass over all voxels mutating per-voxel probabilities;
    /// each voxel is visited by exactly one worker.
    pub fn par_update_labels<F>(&mut self, f: F)
    where
        F: Fn(Vector3<f32>, f32, f32, &mut [f32]) + Sync,
    {
        let [nx, ny, _] = self.dims;
        let vs = self.voxel_size;
        let origin = self.origin;
        let c = self.num_classes;
        let tsdf = &self.tsdf;
        let weight = &self.weight;
        self.probs
            .par_chunks_mut(c)
            .enumerate()
            .for_each(|(i, probs)| {
                let x = i % nx;
                let y = (i / nx) % ny;
                let z = i / (nx * ny);
                let center =
                    origin + Vector3::new(x as f32 + 0.5, y as f32 + 0.5, z as f32 + 0.5) * vs;
                f(center, tsdf[i], weight[i], probs);
            });
    }

    /// Write the SVOL snapshot: header then x-fastest per-voxel records
    /// of tsdf, weight, u8 rgb, probs, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(b"SVOL").map_err(io)?;
        w.write_u32::<LittleEndian>(1).map_err(io)?;
        for d in self.dims {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        w.write_f32::<LittleEndian>(self.voxel_size).map_err(io)?;
        for i in 0..3 {
            w.write_f32::<LittleEndian>(self.origin[i]).map_err(io)?;
        }
        w.write_f32::<LittleEndian>(self.truncation).map_err(io)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)
            .map_err(io)?;
        let c = self.num_classes;
        for i in 0..self.voxel_count() {
            w.write_f32::<LittleEndian>(self.tsdf[i]).map_err(io)?;
            w.write_f32::<LittleEndian>(self.weight[i]).map_err(io)?;
            for ch in 0..3 {
                let q = (self.color[i * 3 + ch] * 255.0).round().clamp(0.0, 255.0) as u8;
                w.write_all(&[q]).map_err(io)?;
            }
            for j in 0..c {
                w.write_f32::<LittleEndian>(self.probs[i * c + j]).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Load an SVOL snapshot; max_weight is runtime configuration and
    /// comes back as the default.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"SVOL" {
            return Err(Error::parse(path, 0, "bad SVOL magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != 1 {
            return Err(Error::parse(path, 0, format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        }
        let voxel_size = r.read_f32::<LittleEndian>().map_err(io)?;
        let mut origin = Vector3::zeros();
        for i in 0..3 {
            origin[i] = r.read_f32::<LittleEndian>().map_err(io)?;
        }
        let truncation = r.read_f32::<LittleEndian>().map_err(io)?;
        let num_classes = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut vol = Self::with_params(
            dims,
            voxel_size,
            origin,
            num_classes,
            truncation,
            DEFAULT_MAX_WEIGHT,
        )?;
        let mut rgb = [0u8; 3];
        for i in 0..vol.voxel_count() {
            vol.tsdf[i] = r.read_f32::<LittleEndian>().map_err(io)?;
            vol.weight[i] = r.read_f32::<LittleEndian>().map_err(io)?;
            r.read_exact(&mut rgb).map_err(io)?;
            for ch in 0..3 {
                vol.color[i * 3 + ch] = rgb[ch] as f32 / 255.0;
            }
            for j in 0..num_classes {
                vol.probs[i * num_classes + j] = r.read_f32::<LittleEndian>().map_err(io)?;
            }
        }
        Ok(vol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall_setup() -> (TsdfVolume, DepthImage, Intrinsics, Pose) {
        let k = Intrinsics::new(80.0, 80.0, 40.0, 30.0, 80, 60, 1000.0).unwrap();
        let mut depth = DepthImage::new(80, 60);
        for v in 0..60 {
            for u in 0..80 {
                depth.set(u, v, 1.5);
            }
        }
        // 2 m cube straddling the optical axis, camera at origin looking +z
        let vol = TsdfVolume::new([100, 100, 100], 0.02, Vector3::new(-1.0, -1.0, 0.5), 1).unwrap();
        (vol, depth, k, Pose::identity())
    }

    #[test]
    fn wall_zero_crossing_near_true_depth() {
        let (mut vol, depth, k, pose) = wall_setup();
        vol.integrate_frame(&depth, None, &pose, &k).unwrap();
        // walk the central column of voxels along +z
        let (x, y) = (50, 50);
        let mut crossing = None;
        for z in 0..99 {
            let a = vol.tsdf_at(x, y, z);
            let b = vol.tsdf_at(x, y, z + 1);
            if vol.weight_at(x, y, z) > 0.0 && vol.weight_at(x, y, z + 1) > 0.0 && a > 0.0 && b <= 0.0
            {
                crossing = Some(vol.center(x, y, z).z);
                break;
            }
        }
        let zc = crossing.expect("no zero crossing along central ray");
        assert!((zc - 1.5).abs() <= 0.02 + 1e-6, "crossing at {zc}");
    }

    #[test]
    fn repeat_integration_same_tsdf_doubled_weight() {
        let (mut vol, depth, k, pose) = wall_setup();
        vol.integrate_frame(&depth, None, &pose, &k).unwrap();
        let t1: Vec<f32> = vol.tsdf.clone();
        let w1: Vec<f32> = vol.weight.clone();
        vol.integrate_frame(&depth, None, &pose, &k).unwrap();
        for i in 0..vol.voxel_count() {
            assert!((vol.tsdf[i] - t1[i]).abs() < 1e-6);
            let expect = if w1[i] > 0.0 { (w1[i] * 2.0).min(vol.max_weight) } else { 0.0 };
            assert_eq!(vol.weight[i], expect);
        }
    }

    #[test]
    fn deep_behind_surface_untouched() {
        let (mut vol, depth, k, pose) = wall_setup();
        vol.integrate_frame(&depth, None, &pose, &k).unwrap();
        // truncation = 8 cm; voxel 2*tau = 16 cm behind the wall
        let z_behind = 1.5 + 2.0 * vol.truncation;
        let z_idx = ((z_behind - 0.5) / 0.02 - 0.5).round() as usize;
        assert_eq!(vol.weight_at(50, 50, z_idx), 0.0);
        assert_eq!(vol.tsdf_at(50, 50, z_idx), 1.0);
    }

    #[test]
    fn tsdf_stays_in_unit_range_and_weights_capped() {
        let (mut vol, depth, k, pose) = wall_setup();
        vol.max_weight = 3.0;
        for _ in 0..5 {
            vol.integrate_frame(&depth, None, &pose, &k).unwrap();
        }
        for i in 0..vol.voxel_count() {
            assert!((-1.0..=1.0).contains(&vol.tsdf[i]));
            assert!(vol.weight[i] <= 3.0);
        }
    }

    #[test]
    fn color_running_average() {
        let (mut vol, depth, k, pose) = wall_setup();
        let mut c1 = ColorImage::new(80, 60);
        let mut c2 = ColorImage::new(80, 60);
        for v in 0..60 {
            for u in 0..80 {
                c1.set(u, v, [100, 0, 0]);
                c2.set(u, v, [200, 0, 0]);
            }
        }
        vol.integrate_frame(&depth, Some(&c1), &pose, &k).unwrap();
        vol.integrate_frame(&depth, Some(&c2), &pose, &k).unwrap();
        // a voxel just behind the wall got both colors with equal weight
        let z_idx = ((1.5f32 - 0.5) / 0.02 - 0.5).round() as usize + 1;
        let c = vol.color_at(50, 50, z_idx);
        assert!((c[0] - 150.0 / 255.0).abs() < 1e-3, "got {c:?}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (mut vol, _, k, pose) = wall_setup();
        let bad = DepthImage::new(40, 30);
        assert!(matches!(
            vol.integrate_frame(&bad, None, &pose, &k),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_pose_rejected() {
        let (mut vol, depth, k, _) = wall_setup();
        let bad = Pose::new(
            nalgebra::UnitQuaternion::identity(),
            Vector3::new(f64::NAN, 0.0, 0.0),
        );
        assert!(vol.integrate_frame(&depth, None, &bad, &k).is_err());
    }

    #[test]
    fn trilinear_sample_matches_analytic_plane() {
        // fill tsdf analytically with a z-plane at 1.0 and verify samples
        let mut vol =
            TsdfVolume::new([32, 32, 32], 0.05, Vector3::new(-0.8, -0.8, 0.2), 1).unwrap();
        let tau = vol.truncation;
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let d = (1.0 - vol.center(x, y, z).z) / tau;
                    vol.set_voxel(x, y, z, d.clamp(-1.0, 1.0), 1.0);
                }
            }
        }
        // stay away from the clamp band so stored values are linear in z
        for &zq in &[0.9f32, 0.95, 1.0, 1.05, 1.1] {
            let s = vol.sample_tsdf(Vector3::new(0.0, 0.0, zq)).unwrap();
            let expect = (1.0 - zq) / tau;
            assert!((s - expect).abs() < 1e-4, "z {zq}: {s} vs {expect}");
        }
        let g = vol.sample_gradient(Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(g.z < 0.0 && g.x.abs() < 1e-4 && g.y.abs() < 1e-4);
        assert!(vol.sample_tsdf(Vector3::new(5.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn svol_roundtrip() {
        let (mut vol, depth, k, pose) = wall_setup();
        let mut color = ColorImage::new(80, 60);
        for v in 0..60 {
            for u in 0..80 {
                color.set(u, v, [10, 200, 30]);
            }
        }
        vol.integrate_frame(&depth, Some(&color), &pose, &k).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svol");
        vol.save(&path).unwrap();
        let back = TsdfVolume::load(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.num_classes, vol.num_classes);
        assert_eq!(back.tsdf, vol.tsdf);
        assert_eq!(back.weight, vol.weight);
        assert_eq!(back.probs, vol.probs);
        // color is quantized to u8 in the container
        for (a, b) in back.color.iter().zip(&vol.color) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn invalid_construction_rejected() {
        assert!(TsdfVolume::new([1, 8, 8], 0.01, Vector3::zeros(), 1).is_err());
        assert!(TsdfVolume::new([8, 8, 8], 0.0, Vector3::zeros(), 1).is_err());
        assert!(TsdfVolume::new([8, 8, 8], 0.01, Vector3::zeros(), 0).is_err());
    }
}
