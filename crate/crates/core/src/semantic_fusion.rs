//! Per-voxel Bayesian label fusion: project 2D class-probability maps
//! into the volume and accumulate posteriors by product-and-normalize.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::{DepthImage, Intrinsics, Pose};
use crate::tsdf::TsdfVolume;

pub const PROB_EPSILON: f64 = 1e-6;

/// Normalized probability vector over C classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(
                "distribution has negative or non-finite entries".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalize arbitrary non-negative values into a distribution.
    pub fn from_unnormalized(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "cannot normalize values summing to {sum}"
            )));
        }
        Ok(Self {
            probs: values.into_iter().map(|v| v / sum).collect(),
        })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Posterior update of Eq.-style product fusion: elementwise product of
/// prior and likelihood, renormalized. A likelihood that zeroes out the
/// whole product (disjoint supports) falls back to the product with an
/// epsilon-floored prior, which reduces to the likelihood.
pub fn bayes_update(
    prior: &LabelDistribution,
    likelihood: &LabelDistribution,
) -> Result<LabelDistribution> {
    if prior.len() != likelihood.len() {
        return Err(Error::ClassCountMismatch {
            volume: prior.len(),
            input: likelihood.len(),
        });
    }
    let mut product: Vec<f64> = prior
        .probs
        .iter()
        .zip(&likelihood.probs)
        .map(|(p, l)| p * l)
        .collect();
    let sum: f64 = product.iter().sum();
    if sum <= 0.0 {
        product = prior
            .probs
            .iter()
            .zip(&likelihood.probs)
            .map(|(p, l)| p.max(PROB_EPSILON) * l)
            .collect();
    }
    LabelDistribution::from_unnormalized(product)
}

/// In-place product fusion on f32 storage (the per-voxel layout);
/// arithmetic in f64.
pub fn bayes_update_slice(prior: &mut [f32], likelihood: &[f32]) {
    debug_assert_eq!(prior.len(), likelihood.len());
    let mut sum = 0.0f64;
    for (p, l) in prior.iter().zip(likelihood) {
        sum += *p as f64 * *l as f64;
    }
    if sum > 0.0 {
        for (p, l) in prior.iter_mut().zip(likelihood) {
            *p = ((*p as f64 * *l as f64) / sum) as f32;
        }
    } else {
        let mut floored = 0.0f64;
        for (p, l) in prior.iter().zip(likelihood) {
            floored += (*p as f64).max(PROB_EPSILON) * *l as f64;
        }
        if floored <= 0.0 {
            return; // likelihood itself is all-zero; keep the prior
        }
        for (p, l) in prior.iter_mut().zip(likelihood) {
            *p = (((*p as f64).max(PROB_EPSILON) * *l as f64) / floored) as f32;
        }
    }
}

/// Index of the maximum probability and its value; ties break toward
/// the lowest index.
pub fn argmax_label(d: &LabelDistribution) -> (usize, f64) {
    argmax_slice_f64(&d.probs)
}

pub fn argmax_slice_f64(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_p = f64::NEG_INFINITY;
    for (i, &p) in probs.iter().enumerate() {
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    (best, best_p)
}

pub fn argmax_slice(probs: &[f32]) -> (usize, f32) {
    let mut best = 0;
    let mut best_p = f32::NEG_INFINITY;
    for (i, &p) in probs.iter().enumerate() {
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    (best, best_p)
}

/// Dense per-pixel class probabilities, class-fastest layout.
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub data: Vec<f32>,
}

const SPRB_MAGIC: &[u8; 4] = b"SPRB";
const SPRB_VERSION: u32 = 1;

impl ProbMap {
    pub fn new(width: usize, height: usize, num_classes: usize) -> Self {
        Self {
            width,
            height,
            num_classes,
            data: vec![0.0; width * height * num_classes],
        }
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let i = (v * self.width + u) * self.num_classes;
        &self.data[i..i + self.num_classes]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let i = (v * self.width + u) * self.num_classes;
        &mut self.data[i..i + self.num_classes]
    }

    /// Write the SPRB container: magic, version, width, height, C, then
    /// f32[h][w][C] row-major, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(SPRB_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(SPRB_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.width as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(self.height as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)
            .map_err(io)?;
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Load an SPRB file, renormalizing every pixel.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SPRB_MAGIC {
            return Err(Error::parse(path, 0, "bad SPRB magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != SPRB_VERSION {
            return Err(Error::parse(path, 0, format!("unsupported version {version}")));
        }
        let width = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let height = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let num_classes = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(Error::parse(path, 0, "zero-sized probability map"));
        }
        let mut pm = ProbMap::new(width, height, num_classes);
        let mut buf = vec![0u8; width * num_classes * 4];
        for v in 0..height {
            r.read_exact(&mut buf).map_err(io)?;
            let row = &mut pm.data[v * width * num_classes..(v + 1) * width * num_classes];
            for (dst, chunk) in row.iter_mut().zip(buf.chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        for v in 0..height {
            for u in 0..width {
                let px = pm.pixel_mut(u, v);
                let sum: f64 = px.iter().map(|&p| p as f64).sum();
                if !sum.is_finite() || sum <= 0.0 {
                    return Err(Error::parse(
                        path,
                        0,
                        format!("pixel ({u}, {v}) has invalid probability sum {sum}"),
                    ));
                }
                for p in px {
                    *p = (*p as f64 / sum) as f32;
                }
            }
        }
        Ok(pm)
    }
}

/// Semantic class palette from `classes.txt`: `id name r g b` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    pub classes: Vec<ClassDef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDef {
    pub id: u16,
    pub name: String,
    pub color: [u8; 3],
}

impl ClassTable {
    pub fn new(classes: Vec<ClassDef>) -> Result<Self> {
        let t = Self { classes };
        for (i, c) in t.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::InvalidInput(format!(
                    "class ids must be contiguous from 0; found id {} at position {i}",
                    c.id
                )));
            }
        }
        if t.classes.is_empty() {
            return Err(Error::InvalidInput("empty class table".into()));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(|c| c.name.as_str())
    }

    pub fn color(&self, id: usize) -> [u8; 3] {
        self.classes.get(id).map(|c| c.color).unwrap_or([128; 3])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut classes = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::parse(
                    path,
                    ln + 1,
                    format!("expected `id name r g b`, got {} fields", f.len()),
                ));
            }
            let parse_err = |msg: String| Error::parse(path, ln + 1, msg);
            classes.push(ClassDef {
                id: f[0].parse().map_err(|e| parse_err(format!("id: {e}")))?,
                name: f[1].to_string(),
                color: [
                    f[2].parse().map_err(|e| parse_err(format!("r: {e}")))?,
                    f[3].parse().map_err(|e| parse_err(format!("g: {e}")))?,
                    f[4].parse().map_err(|e| parse_err(format!("b: {e}")))?,
                ],
            });
        }
        ClassTable::new(classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for c in &self.classes {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                c.id, c.name, c.color[0], c.color[1], c.color[2]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Bayes-update every near-surface voxel visible in this frame with the
/// class probabilities at its projected pixel.
///
/// A voxel participates when |tsdf| < tau_label (meters), it projects
/// inside the image onto a valid depth pixel, and it is not occluded:
/// no deeper than the observed depth plus the truncation distance. The
/// probability map may be an integer downscale of the camera resolution;
/// lookups are nearest-pixel.
pub fn fuse_labels(
    vol: &mut TsdfVolume,
    pm: &ProbMap,
    depth: &DepthImage,
    pose: &Pose,
    k: &Intrinsics,
    tau_label: f32,
) -> Result<()> {
    if pm.num_classes != vol.num_classes {
        return Err(Error::ClassCountMismatch {
            volume: vol.num_classes,
            input: pm.num_classes,
        });
    }
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", k.width, k.height),
            got: format!("{}x{}", depth.width, depth.height),
        });
    }
    if k.width % pm.width != 0
        || k.height % pm.height != 0
        || k.width / pm.width != k.height / pm.height
    {
        return Err(Error::DimensionMismatch {
            expected: format!("integer downscale of {}x{}", k.width, k.height),
            got: format!("{}x{}", pm.width, pm.height),
        });
    }
    let scale = k.width / pm.width;
    let world_to_cam = pose.inverse();
    let band = (tau_label / vol.truncation).min(1.0);
    let tau = vol.truncation;

    vol.par_update_labels(|center, tsdf, weight, probs| {
        if weight <= 0.0 || tsdf.abs() >= band {
            return;
        }
        let p_cam = world_to_cam.transform_point(center.cast::<f64>());
        let Some((uf, vf)) = k.project(p_cam) else {
            return;
        };
        let (u, v) = (uf.round() as i64, vf.round() as i64);
        if u < 0 || v < 0 || u >= k.width as i64 || v >= k.height as i64 {
            return;
        }
        let (u, v) = (u as usize, v as usize);
        let d = depth.get(u, v);
        if d <= 0.0 {
            return;
        }
        if p_cam.z as f32 - d > tau {
            return; // occluded
        }
        let px = pm.pixel(u / scale, v / scale);
        bayes_update_slice(probs, px);
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_likelihood_is_identity() {
        let prior = dist(&[0.6, 0.4]);
        let like = dist(&[0.5, 0.5]);
        let out = bayes_update(&prior, &like).unwrap();
        assert!((out.probs()[0] - 0.6).abs() < 1e-12);
        assert!((out.probs()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn double_update_squares_likelihood() {
        // [0.5,0.5] x [0.9,0.1] twice: probs prop to [0.81, 0.01]
        let mut d = dist(&[0.5, 0.5]);
        let like = dist(&[0.9, 0.1]);
        d = bayes_update(&d, &like).unwrap();
        d = bayes_update(&d, &like).unwrap();
        assert!((d.probs()[0] - 0.987805).abs() < 1e-6, "{:?}", d.probs());
        assert!((d.probs()[1] - 0.012195).abs() < 1e-6);
    }

    #[test]
    fn one_hot_prior_absorbs() {
        let prior = LabelDistribution::one_hot(2, 0);
        let like = dist(&[0.3, 0.7]);
        let out = bayes_update(&prior, &like).unwrap();
        assert_eq!(out.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn disjoint_supports_fall_back_to_likelihood() {
        let prior = LabelDistribution::one_hot(2, 0);
        let like = dist(&[0.0, 1.0]);
        let out = bayes_update(&prior, &like).unwrap();
        assert!(out.probs()[1] > 0.999999);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_label(&dist(&[0.2, 0.7, 0.1])), (1, 0.7));
        assert_eq!(argmax_label(&dist(&[0.5, 0.5])), (0, 0.5));
        let (l, c) = argmax_label(&LabelDistribution::one_hot(6, 4));
        assert_eq!((l, c), (4, 1.0));
    }

    #[test]
    fn mismatched_class_counts_rejected() {
        let prior = LabelDistribution::uniform(3);
        let like = LabelDistribution::uniform(2);
        assert!(matches!(
            bayes_update(&prior, &like),
            Err(Error::ClassCountMismatch { .. })
        ));
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(LabelDistribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn slice_update_matches_f64_path() {
        let mut s = [0.5f32, 0.5];
        bayes_update_slice(&mut s, &[0.9, 0.1]);
        bayes_update_slice(&mut s, &[0.9, 0.1]);
        assert!((s[0] - 0.987805).abs() < 1e-5);
    }

    #[test]
    fn sprb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sprb");
        let mut pm = ProbMap::new(3, 2, 4);
        for v in 0..2 {
            for u in 0..3 {
                let px = pm.pixel_mut(u, v);
                px.copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
                px[(u + v) % 4] += 0.0; // keep layout exercised
            }
        }
        pm.save(&path).unwrap();
        let back = ProbMap::load(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.num_classes, 4);
        for (a, b) in pm.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sprb_load_renormalizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sprb");
        let mut pm = ProbMap::new(1, 1, 2);
        pm.pixel_mut(0, 0).copy_from_slice(&[0.2, 0.6]);
        pm.save(&path).unwrap();
        let back = ProbMap::load(&path).unwrap();
        let px = back.pixel(0, 0);
        assert!((px[0] - 0.25).abs() < 1e-6);
        assert!((px[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn class_table_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classes.txt");
        let table = ClassTable::new(vec![
            ClassDef {
                id: 0,
                name: "wall".into(),
                color: [200, 200, 200],
            },
            ClassDef {
                id: 1,
                name: "glass".into(),
                color: [0, 255, 0],
            },
        ])
        .unwrap();
        table.save(&path).unwrap();
        assert_eq!(ClassTable::load(&path).unwrap(), table);

        let bad = vec![ClassDef {
            id: 3,
            name: "x".into(),
            color: [0, 0, 0],
        }];
        assert!(ClassTable::new(bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_dist(c: usize) -> impl Strategy<Value = LabelDistribution> {
            proptest::collection::vec(1e-3f64..1.0, c)
                .prop_map(|v| LabelDistribution::from_unnormalized(v).unwrap())
        }

        proptest! {
            #[test]
            fn update_is_order_insensitive(
                (p, l1, l2) in (2usize..8).prop_flat_map(|c| (arb_dist(c), arb_dist(c), arb_dist(c)))
            ) {
                let a = bayes_update(&bayes_update(&p, &l1).unwrap(), &l2).unwrap();
                let b = bayes_update(&bayes_update(&p, &l2).unwrap(), &l1).unwrap();
                for (x, y) in a.probs().iter().zip(b.probs()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn repeated_likelihood_drives_argmax_to_one(
                base in arb_dist(5), reps in 15usize..40
            ) {
                // boost the argmax so the margin is at least 3x
                let (c, _) = argmax_label(&base);
                let mut v = base.probs().to_vec();
                v[c] *= 3.0;
                let l = LabelDistribution::from_unnormalized(v).unwrap();
                let mut d = LabelDistribution::uniform(5);
                let mut prev = d.probs()[c];
                for _ in 0..reps {
                    d = bayes_update(&d, &l).unwrap();
                    prop_assert!(d.probs()[c] >= prev - 1e-12);
                    prev = d.probs()[c];
                }
                prop_assert!(d.probs()[c] > 0.9);
            }
        }
    }
}
