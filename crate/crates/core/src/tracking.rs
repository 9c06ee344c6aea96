//! Frame-to-model camera tracking: coarse-to-fine point-to-plane ICP
//! against ray-cast model maps, plus trajectory file loading for the
//! pose-bypass mode.

use std::path::Path;

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    backproject, compute_normals, DepthImage, Intrinsics, NormalMap, PointMap, Pose, VectorMap,
};

/// 6 unknowns, one row each at minimum.
const MIN_CORRESPONDENCES: usize = 36;

#[derive(Debug, Clone)]
pub struct IcpConfig {
    pub levels: usize,
    /// Iterations per level, coarsest first.
    pub iters: Vec<usize>,
    /// Correspondence distance gate, meters.
    pub dist_gate: f64,
    /// Correspondence normal-angle gate, degrees.
    pub angle_gate_deg: f64,
    /// Early exit when the applied update twist norm falls below this.
    pub conv_thresh: f64,
    pub min_valid_px: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iters: vec![10, 5, 4],
            dist_gate: 0.10,
            angle_gate_deg: 30.0,
            conv_thresh: 1e-5,
            min_valid_px: 1000,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidInput("icp levels must be >= 1".into()));
        }
        if self.iters.len() != self.levels {
            return Err(Error::InvalidInput(format!(
                "icp iteration list has {} entries for {} levels",
                self.iters.len(),
                self.levels
            )));
        }
        if !(self.dist_gate > 0.0) || !(self.angle_gate_deg > 0.0) {
            return Err(Error::InvalidInput("icp gates must be > 0".into()));
        }
        if !(self.conv_thresh >= 0.0) {
            return Err(Error::InvalidInput("icp conv_thresh must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub pose: Pose,
    /// Update magnitude dropped below conv_thresh at the finest level.
    pub converged: bool,
    /// Degenerate geometry (rank-deficient normal equations) or no
    /// convergence within the iteration budget.
    pub low_confidence: bool,
    /// Residual RMS per accepted iteration, one trace per level,
    /// coarsest first; index 0 of each trace is the pre-update residual.
    pub residuals: Vec<Vec<f64>>,
    /// Gated correspondence count at the last finest-level evaluation.
    pub correspondences: usize,
}

struct Accum {
    a: Matrix6<f64>,
    b: Vector6<f64>,
    rms: f64,
    count: usize,
}

/// Align a depth frame against model maps rendered at pose `init`
/// (world-frame points/normals from raycast_surface), returning the
/// camera-to-world pose of the frame.
pub fn icp_align(
    model_points: &PointMap,
    model_normals: &NormalMap,
    frame_depth: &DepthImage,
    k: &Intrinsics,
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    cfg.validate()?;
    if !init.is_finite() {
        return Err(Error::InvalidInput("non-finite initial pose".into()));
    }
    if frame_depth.width != k.width || frame_depth.height != k.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", k.width, k.height),
            got: format!("{}x{}", frame_depth.width, frame_depth.height),
        });
    }
    if model_points.width != k.width || model_points.height != k.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", k.width, k.height),
            got: format!("{}x{}", model_points.width, model_points.height),
        });
    }
    let valid = frame_depth.valid_count();
    if valid < cfg.min_valid_px {
        return Err(Error::TrackingLost(format!(
            "frame has {valid} valid depth pixels, need {}",
            cfg.min_valid_px
        )));
    }

    // pyramids, index 0 = full resolution
    let mut depths = vec![frame_depth.clone()];
    let mut ks = vec![k.clone()];
    let mut mp = vec![model_points.clone()];
    let mut mn = vec![model_normals.clone()];
    for l in 1..cfg.levels {
        depths.push(depths[l - 1].half());
        ks.push(ks[l - 1].half());
        mp.push(downsample_map(&mp[l - 1], false));
        mn.push(downsample_map(&mn[l - 1], true));
    }

    let view_inv = init.inverse();
    let mut pose = init.clone();
    let mut residuals = vec![Vec::new(); cfg.levels];
    let mut converged = false;
    let mut last_accum: Option<Accum> = None;

    for level in (0..cfg.levels).rev() {
        let iters = cfg.iters[cfg.levels - 1 - level];
        let frame_pts = backproject(&depths[level], &ks[level])?;
        let frame_nrm = compute_normals(&frame_pts);
        let trace = &mut residuals[cfg.levels - 1 - level];
        converged = false;

        let mut acc = accumulate(
            &frame_pts, &frame_nrm, &mp[level], &mn[level], &ks[level], &view_inv, &pose, cfg,
        );
        if acc.count < MIN_CORRESPONDENCES {
            return Err(Error::TrackingLost(format!(
                "{} correspondences at pyramid level {level}, need {MIN_CORRESPONDENCES}",
                acc.count
            )));
        }
        trace.push(acc.rms);

        for _ in 0..iters {
            let mut delta = solve_damped(&acc.a, &acc.b).ok_or_else(|| Error::Numerical {
                iteration: trace.len(),
                msg: "normal-equation solve failed".into(),
            })?;
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical {
                    iteration: trace.len(),
                    msg: "non-finite pose update".into(),
                });
            }

            // step halving keeps the recorded residual non-increasing
            let mut accepted = false;
            for _ in 0..6 {
                let candidate = apply_twist(&pose, &delta);
                let cand_acc = accumulate(
                    &frame_pts, &frame_nrm, &mp[level], &mn[level], &ks[level], &view_inv,
                    &candidate, cfg,
                );
                if cand_acc.count >= MIN_CORRESPONDENCES && cand_acc.rms <= acc.rms + 1e-12 {
                    pose = candidate;
                    acc = cand_acc;
                    accepted = true;
                    break;
                }
                delta *= 0.5;
            }
            if !accepted {
                break;
            }
            trace.push(acc.rms);
            if delta.norm() < cfg.conv_thresh {
                converged = true;
                break;
            }
        }
        last_accum = Some(acc);
    }

    let acc = last_accum.expect("levels >= 1");
    let eig = nalgebra::SymmetricEigen::new(acc.a);
    let max_e = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_e = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let degenerate = !(max_e > 0.0) || min_e / max_e < 1e-8;

    Ok(IcpResult {
        pose,
        converged,
        low_confidence: degenerate || !converged,
        residuals,
        correspondences: acc.count,
    })
}

/// One data-association + accumulation pass under `pose`. Parallel per
/// pixel with an ordered serial reduction, so results are independent of
/// scheduling.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    frame_pts: &PointMap,
    frame_nrm: &NormalMap,
    model_pts: &PointMap,
    model_nrm: &NormalMap,
    k: &Intrinsics,
    view_inv: &Pose,
    pose: &Pose,
    cfg: &IcpConfig,
) -> Accum {
    let cos_gate = cfg.angle_gate_deg.to_radians().cos();
    let n_px = frame_pts.width * frame_pts.height;
    let rows: Vec<Option<([f64; 6], f64)>> = (0..n_px)
        .into_par_iter()
        .map(|i| {
            let u = i % frame_pts.width;
            let v = i / frame_pts.width;
            let p_f = frame_pts.get(u, v)?;
            let n_f = frame_nrm.get(u, v)?;
            let p_w = pose.transform_point(p_f.cast::<f64>());
            let p_v = view_inv.transform_point(p_w);
            let (uf, vf) = k.project(p_v)?;
            let (mu, mv) = (uf.round() as i64, vf.round() as i64);
            if mu < 0 || mv < 0 || mu >= k.width as i64 || mv >= k.height as i64 {
                return None;
            }
            let q_w = model_pts.get(mu as usize, mv as usize)?.cast::<f64>();
            let n_w = model_nrm.get(mu as usize, mv as usize)?.cast::<f64>();
            let diff = p_w - q_w;
            if diff.norm() > cfg.dist_gate {
                return None;
            }
            let n_fw = pose.transform_vector(n_f.cast::<f64>());
            if n_fw.dot(&n_w) < cos_gate {
                return None;
            }
            let r = n_w.dot(&diff);
            let cx = p_w.cross(&n_w);
            Some(([cx.x, cx.y, cx.z, n_w.x, n_w.y, n_w.z], r))
        })
        .collect();

    let mut a = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut sq = 0.0f64;
    let mut count = 0usize;
    for row in rows.into_iter().flatten() {
        let (j, r) = row;
        let jv = Vector6::from_column_slice(&j);
        a += jv * jv.transpose();
        b -= jv * r;
        sq += r * r;
        count += 1;
    }
    let rms = if count > 0 { (sq / count as f64).sqrt() } else { f64::INFINITY };
    Accum { a, b, rms, count }
}

fn solve_damped(a: &Matrix6<f64>, b: &Vector6<f64>) -> Option<Vector6<f64>> {
    let damping = 1e-6 * (a.trace() / 6.0).max(1e-12);
    let damped = a + Matrix6::identity() * damping;
    damped.cholesky().map(|ch| ch.solve(b))
}

/// Left-multiply the small-angle twist (omega, v) onto a pose.
fn apply_twist(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    let dr = UnitQuaternion::from_scaled_axis(omega);
    Pose::new(dr * pose.rotation, dr * pose.translation + v)
}

/// 2x2 block average; normals are renormalized, mixed-validity blocks
/// average the valid entries.
fn downsample_map(m: &VectorMap, renormalize: bool) -> VectorMap {
    let w = (m.width / 2).max(1);
    let h = (m.height / 2).max(1);
    let mut out = VectorMap::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let mut sum = Vector3::zeros();
            let mut n = 0u32;
            for dv in 0..2 {
                for du in 0..2 {
                    let su = u * 2 + du;
                    let sv = v * 2 + dv;
                    if su < m.width && sv < m.height {
                        if let Some(p) = m.get(su, sv) {
                            sum += p;
                            n += 1;
                        }
                    }
                }
            }
            if n > 0 {
                let mut p = sum / n as f32;
                if renormalize {
                    let norm = p.norm();
                    if norm < 1e-12 {
                        continue;
                    }
                    p /= norm;
                }
                out.set(u, v, p);
            }
        }
    }
    out
}

/// Parse a poses.txt trajectory: `frame_id tx ty tz qx qy qz qw` per
/// line. Duplicate ids keep the last entry; off-unit quaternions are
/// renormalized; both cases log a warning.
pub fn load_trajectory(path: &Path) -> Result<Vec<(usize, Pose)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(usize, Pose)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::parse(
                path,
                ln + 1,
                format!("expected 8 fields, got {}", f.len()),
            ));
        }
        let id: usize = f[0]
            .parse()
            .map_err(|e| Error::parse(path, ln + 1, format!("frame id: {e}")))?;
        let mut nums = [0.0f64; 7];
        for (i, n) in nums.iter_mut().enumerate() {
            *n = f[i + 1]
                .parse()
                .map_err(|e| Error::parse(path, ln + 1, format!("field {}: {e}", i + 1)))?;
        }
        let qnorm = (nums[3] * nums[3] + nums[4] * nums[4] + nums[5] * nums[5] + nums[6] * nums[6])
            .sqrt();
        if !qnorm.is_finite() || qnorm < 1e-12 {
            return Err(Error::parse(path, ln + 1, "zero-norm quaternion"));
        }
        if (qnorm - 1.0).abs() > 1e-3 {
            log::warn!("{}:{}: quaternion norm {qnorm:.4}, renormalizing", path.display(), ln + 1);
        }
        let pose = Pose::from_parts(
            Vector3::new(nums[0], nums[1], nums[2]),
            nums[3],
            nums[4],
            nums[5],
            nums[6],
        );
        if let Some(slot) = out.iter_mut().find(|(i, _)| *i == id) {
            log::warn!("{}:{}: duplicate frame id {id}, last wins", path.display(), ln + 1);
            slot.1 = pose;
        } else {
            out.push((id, pose));
        }
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

pub fn save_trajectory(path: &Path, poses: &[(usize, Pose)]) -> Result<()> {
    std::fs::write(path, crate::geometry::format_trajectory(poses))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ColorImage;

    /// Analytic depth of a set of world planes n·p = c seen from `pose`.
    /// Projective depth equals the ray parameter for unnormalized camera
    ///直irections with z = 1.
    fn render_planes(planes: &[(Vector3<f64>, f64)], pose: &Pose, k: &Intrinsics) -> DepthImage {
        let mut depth = DepthImage::new(k.width, k.height);
        let o = pose.translation;
        for v in 0..k.height {
            for u in 0..k.width {
                let d_cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let d_w = pose.transform_vector(d_cam);
                let mut best = f64::INFINITY;
                for (n, c) in planes {
                    let denom = n.dot(&d_w);
                    if denom.abs() < 1e-9 {
                        continue;
                    }
                    let t = (c - n.dot(&o)) / denom;
                    if t > 0.1 && t < best {
                        best = t;
                    }
                }
                if best.is_finite() {
                    depth.set(u, v, best as f32);
                }
            }
        }
        depth
    }

    /// World-frame model maps equivalent to a raycast of the true scene
    /// from `view`.
    fn model_maps(
        planes: &[(Vector3<f64>, f64)],
        view: &Pose,
        k: &Intrinsics,
    ) -> (PointMap, NormalMap) {
        let depth = render_planes(planes, view, k);
        let pts_cam = backproject(&depth, k).unwrap();
        let nrm_cam = compute_normals(&pts_cam);
        let mut pts_w = VectorMap::new(k.width, k.height);
        let mut nrm_w = VectorMap::new(k.width, k.height);
        for v in 0..k.height {
            for u in 0..k.width {
                if let (Some(p), Some(n)) = (pts_cam.get(u, v), nrm_cam.get(u, v)) {
                    let pw = view.transform_point(p.cast::<f64>());
                    let nw = view.transform_vector(n.cast::<f64>());
                    pts_w.set(u, v, Vector3::new(pw.x as f32, pw.y as f32, pw.z as f32));
                    nrm_w.set(u, v, Vector3::new(nw.x as f32, nw.y as f32, nw.z as f32));
                }
            }
        }
        (pts_w, nrm_w)
    }

    fn corner_scene() -> Vec<(Vector3<f64>, f64)> {
        vec![
            (Vector3::new(0.0, 0.0, 1.0), 2.0),  // back wall z = 2
            (Vector3::new(1.0, 0.0, 0.0), 0.9),  // side wall x = 0.9
            (Vector3::new(0.0, 1.0, 0.0), 0.7),  // floor y = 0.7
        ]
    }

    fn test_k() -> Intrinsics {
        Intrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120, 1000.0).unwrap()
    }

    #[test]
    fn identity_when_init_is_truth() {
        let k = test_k();
        let planes = corner_scene();
        let truth = Pose::identity();
        let (mp, mn) = model_maps(&planes, &truth, &k);
        let depth = render_planes(&planes, &truth, &k);
        let res = icp_align(&mp, &mn, &depth, &k, &truth, &IcpConfig::default()).unwrap();
        assert!(res.pose.rotation_error(&truth) < 1e-6);
        assert!(res.pose.translation_error(&truth) < 1e-6);
    }

    #[test]
    fn recovers_perturbed_pose() {
        let k = test_k();
        let planes = corner_scene();
        let truth = Pose::identity();
        // init 3 degrees + 3 cm away from the truth
        let init = Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.02, 0.04, 0.02)),
            Vector3::new(0.02, -0.015, 0.015),
        );
        let (mp, mn) = model_maps(&planes, &init, &k);
        let depth = render_planes(&planes, &truth, &k);
        let res = icp_align(&mp, &mn, &depth, &k, &init, &IcpConfig::default()).unwrap();
        let rot_deg = res.pose.rotation_error(&truth).to_degrees();
        let trans = res.pose.translation_error(&truth);
        assert!(rot_deg < 0.5, "rotation error {rot_deg} deg");
        assert!(trans < 0.005, "translation error {trans} m");
        for trace in &res.residuals {
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "residual increased: {trace:?}");
            }
        }
    }

    #[test]
    fn featureless_plane_flags_low_confidence() {
        let k = test_k();
        let planes = vec![(Vector3::new(0.0, 0.0, 1.0), 1.5)];
        let truth = Pose::identity();
        let (mp, mn) = model_maps(&planes, &truth, &k);
        let depth = render_planes(&planes, &truth, &k);
        let res = icp_align(&mp, &mn, &depth, &k, &truth, &IcpConfig::default()).unwrap();
        assert!(res.low_confidence);
        // the observable directions must still be solved without drift
        assert!(res.pose.translation_error(&truth) < 1e-4);
    }

    #[test]
    fn too_few_valid_pixels_is_tracking_lost() {
        let k = test_k();
        let planes = corner_scene();
        let (mp, mn) = model_maps(&planes, &Pose::identity(), &k);
        let depth = DepthImage::new(k.width, k.height);
        match icp_align(&mp, &mn, &depth, &k, &Pose::identity(), &IcpConfig::default()) {
            Err(Error::TrackingLost(_)) => {}
            other => panic!("expected TrackingLost, got {other:?}"),
        }
    }

    #[test]
    fn no_overlap_is_tracking_lost() {
        let k = test_k();
        let planes = corner_scene();
        let truth = Pose::identity();
        let (mp, mn) = model_maps(&planes, &truth, &k);
        let depth = render_planes(&planes, &truth, &k);
        // init far outside the gates: no correspondences survive
        let init = Pose::new(UnitQuaternion::identity(), Vector3::new(5.0, 5.0, -3.0));
        match icp_align(&mp, &mn, &depth, &k, &init, &IcpConfig::default()) {
            Err(Error::TrackingLost(_)) => {}
            other => panic!("expected TrackingLost, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = IcpConfig::default();
        cfg.iters = vec![10, 5];
        assert!(cfg.validate().is_err());
        let mut cfg = IcpConfig::default();
        cfg.dist_gate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trajectory_roundtrip_and_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "0 0 0 0 0 0 0 1\n2 1 2 3 0 0 0 0.9\n0 1 0 0 0 0 0 1\n").unwrap();
        let traj = load_trajectory(&path).unwrap();
        assert_eq!(traj.len(), 2);
        // duplicate id 0: last wins
        assert!((traj[0].1.translation.x - 1.0).abs() < 1e-12);
        // quaternion renormalized
        assert!((traj[1].1.rotation.norm() - 1.0).abs() < 1e-9);

        let out = dir.path().join("out.txt");
        save_trajectory(&out, &traj).unwrap();
        let back = load_trajectory(&out).unwrap();
        for ((i1, p1), (i2, p2)) in traj.iter().zip(&back) {
            assert_eq!(i1, i2);
            assert!(p1.translation_error(p2) < 1e-9);
            assert!(p1.rotation_error(p2) < 1e-9);
        }
    }

    #[test]
    fn trajectory_parse_errors_name_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "0 0 0 0 0 0 0 1\nbroken line\n").unwrap();
        let err = load_trajectory(&path).unwrap_err();
        assert!(format!("{err}").contains(":2"), "{err}");
    }

    #[test]
    fn downsample_averages_and_renormalizes() {
        let mut m = VectorMap::new(4, 2);
        m.set(0, 0, Vector3::new(0.0, 0.0, 1.0));
        m.set(1, 1, Vector3::new(1.0, 0.0, 0.0));
        let d = downsample_map(&m, true);
        let n = d.get(0, 0).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-6);
        assert!(d.get(1, 0).is_none());
        let _ = ColorImage::new(1, 1); // keep the import exercised
    }
}
