//! Camera models, rigid transforms, depth back-projection and normal maps.
//!
//! Conventions, pinned by the unit tests below: right-handed coordinate
//! frame, the camera looks down +z, image origin is top-left (u right,
//! v down). Poses are camera-to-world. Quaternions are stored (x, y, z, w)
//! in pose files, matching the TUM trajectory format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera intrinsics plus the raw-depth unit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Raw depth units per meter (1000 for millimeter depth).
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_scale: f64,
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "depth_scale must be positive, got {}",
                self.depth_scale
            )));
        }
        Ok(())
    }

    /// Project a camera-frame point to continuous pixel coordinates.
    /// Points at or behind the camera plane project to `None`.
    pub fn project(&self, p: Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Intrinsics of the next-coarser pyramid level (half resolution).
    pub fn half(&self) -> Self {
        Self {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: self.cx / 2.0,
            cy: self.cy / 2.0,
            width: self.width / 2,
            height: self.height / 2,
            depth_scale: self.depth_scale,
        }
    }

    /// Parse `intrinsics.txt`: one line `fx fy cx cy width height depth_scale`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let line = text
            .lines()
            .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .ok_or_else(|| Error::parse(path, 1, "empty intrinsics file"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::parse(
                path,
                1,
                format!("expected 7 fields, got {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::parse(path, 1, format!("field {}: {}", i + 1, e)))
        };
        Intrinsics::new(
            num(0)?,
            num(1)?,
            num(2)?,
            num(3)?,
            num(4)? as usize,
            num(5)? as usize,
            num(6)?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let line = format!(
            "{} {} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.depth_scale
        );
        std::fs::write(path, line).map_err(|e| Error::io(path, e))
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Build from raw quaternion components (x, y, z, w); renormalizes.
    pub fn from_parts(translation: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self {
            rotation: q,
            translation,
        }
    }

    /// Camera placed at `eye`, +z axis toward `target`, `up` fixing roll.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let rot = nalgebra::Rotation3::from_basis_unchecked(&[x, y, z]);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation: eye,
        }
    }

    pub fn transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }

    /// Rotation angle between two poses, radians.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Rigid transform of a single point; see the convention test for the
/// pinned yaw axis behavior.
pub fn transform(p: Vector3<f64>, pose: &Pose) -> Vector3<f64> {
    pose.transform_point(p)
}

/// Depth image in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, z: f32) {
        self.data[v * self.width + u] = z;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&z| z > 0.0).count()
    }

    /// Load a 16-bit grayscale PNG of raw depth values; `depth_scale`
    /// raw units per meter.
    pub fn load_png(path: &Path, depth_scale: f64) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let img = img.into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = DepthImage::new(w, h);
        for (i, px) in img.pixels().enumerate() {
            out.data[i] = (px.0[0] as f64 / depth_scale) as f32;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path, depth_scale: f64) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (i, px) in img.pixels_mut().enumerate() {
            let raw = (self.data[i] as f64 * depth_scale).round();
            px.0[0] = raw.clamp(0.0, u16::MAX as f64) as u16;
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })
    }

    /// Next-coarser pyramid level: 2x2 blocks averaged over valid pixels.
    pub fn half(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = DepthImage::new(w, h);
        for v in 0..h {
            for u in 0..w {
                let mut sum = 0.0f64;
                let mut n = 0u32;
                for dv in 0..2 {
                    for du in 0..2 {
                        let z = self.get(2 * u + du, 2 * v + dv);
                        if z > 0.0 {
                            sum += z as f64;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    out.set(u, v, (sum / n as f64) as f32);
                }
            }
        }
        out
    }
}

/// 8-bit RGB image.
#[derive(Debug, Clone)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [u8; 3]) {
        self.data[v * self.width + u] = rgb;
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let img = img.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ColorImage::new(w, h);
        for (i, px) in img.pixels().enumerate() {
            out.data[i] = px.0;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img =
            image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            px.0 = self.data[i];
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}

/// Per-pixel 3-vectors with a validity mask. Used for both point maps
/// (meters) and normal maps (unit vectors).
#[derive(Debug, Clone)]
pub struct VectorMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<f32>>,
    pub valid: Vec<bool>,
}

pub type PointMap = VectorMap;
pub type NormalMap = VectorMap;

impl VectorMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Vector3::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<Vector3<f32>> {
        let i = v * self.width + u;
        if self.valid[i] {
            Some(self.data[i])
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, p: Vector3<f32>) {
        let i = v * self.width + u;
        self.data[i] = p;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

/// Back-project a depth image into a camera-frame point map.
/// Pixel (u, v) with depth z maps to ((u-cx)z/fx, (v-cy)z/fy, z);
/// zero-depth pixels stay invalid.
pub fn backproject(depth: &DepthImage, k: &Intrinsics) -> Result<PointMap> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", k.width, k.height),
            got: format!("{}x{}", depth.width, depth.height),
        });
    }
    let mut pm = PointMap::new(depth.width, depth.height);
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.get(u, v) as f64;
            if z > 0.0 {
                let x = (u as f64 - k.cx) * z / k.fx;
                let y = (v as f64 - k.cy) * z / k.fy;
                pm.set(u, v, Vector3::new(x as f32, y as f32, z as f32));
            }
        }
    }
    Ok(pm)
}

/// Normals from central differences of neighboring points, oriented
/// toward the camera (n . view < 0). Border pixels and degenerate
/// neighborhoods stay invalid.
pub fn compute_normals(pm: &PointMap) -> NormalMap {
    let mut nm = NormalMap::new(pm.width, pm.height);
    if pm.width < 3 || pm.height < 3 {
        return nm;
    }
    for v in 1..pm.height - 1 {
        for u in 1..pm.width - 1 {
            let (Some(pc), Some(px0), Some(px1), Some(py0), Some(py1)) = (
                pm.get(u, v),
                pm.get(u - 1, v),
                pm.get(u + 1, v),
                pm.get(u, v - 1),
                pm.get(u, v + 1),
            ) else {
                continue;
            };
            let du = px1 - px0;
            let dv = py1 - py0;
            let mut n = du.cross(&dv);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            // pc is the view ray from the camera at the origin
            if n.dot(&pc) > 0.0 {
                n = -n;
            }
            nm.set(u, v, n);
        }
    }
    nm
}

/// Serialize poses as `frame_id tx ty tz qx qy qz qw` lines.
pub fn format_trajectory(poses: &[(usize, Pose)]) -> String {
    let mut out = String::new();
    for (id, pose) in poses {
        let t = pose.translation;
        let q = pose.rotation.quaternion();
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            id, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .unwrap();
    }
    out
}
