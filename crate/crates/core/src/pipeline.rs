//! Two-view and incremental SfM over virtual and classic correspondences.
//!
//! Every image pair is matched and verified independently. Registration
//! starts from the pair with the most RANSAC inliers and then adds, one at a
//! time, the image best connected to the registered set. Each registration
//! is followed by a bundle adjustment over all registered cameras.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::ba::{
    lift_vc_to_track, solve_ba, x2_from_reparam, BaCamera, BaConfig, BaError, BaMode, BaProblem, Termination,
    VcTrack, DEFAULT_SOFT_WEIGHT,
};
use crate::geometry::{closest_approach, project, Mat3, Pixel, Se3Pose, Vec3};
use crate::relative_pose::{ransac_essential_guided, NormalizedPair, PoseGuide, PoseError, RansacParams, RelativePoseEstimate};
use crate::vc::{extract_vcs, ExtractionParams, ImageRecord, VcError, VcSource, VirtualCorrespondence};

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no image pair could be registered")]
    NoSeedPair,
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Vc(#[from] VcError),
    #[error(transparent)]
    Ba(#[from] BaError),
}

/// Externally supplied pixel matches between images `a` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicMatches {
    pub a: usize,
    pub b: usize,
    pub pairs: Vec<(Pixel, Pixel)>,
}

#[derive(Debug, Clone)]
pub struct SfmParams {
    pub extraction: ExtractionParams,
    pub ransac: RansacParams,
    pub ba: BaConfig,
    pub mode: BaMode,
    pub soft_weight: f64,
    /// Extract virtual correspondences; off leaves only classic matches.
    pub use_vcs: bool,
    /// Fewest RANSAC inliers for a pair to seed or register an image.
    pub min_inliers: usize,
    /// Inlier correspondences lifted to tracks per pair, evenly subsampled.
    pub max_tracks_per_pair: usize,
    /// Run bundle adjustment after initialization.
    pub refine: bool,
    /// Lifted tracks reprojecting farther than this (pixels) under the
    /// initial poses, or landing behind a camera, are dropped before refinement.
    pub max_lift_residual: f64,
    /// When set, RANSAC only accepts hypotheses within this many degrees of
    /// the motion that aligns the two images' prior meshes.
    pub prior_gate: Option<f64>,
}

impl Default for SfmParams {
    fn default() -> Self {
        Self {
            extraction: ExtractionParams::default(),
            ransac: RansacParams::default(),
            ba: BaConfig::default(),
            mode: BaMode::Soft,
            soft_weight: DEFAULT_SOFT_WEIGHT,
            use_vcs: true,
            min_inliers: 12,
            max_tracks_per_pair: 300,
            refine: true,
            prior_gate: Some(20.0),
            max_lift_residual: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SfmInput {
    pub records: Vec<ImageRecord>,
    pub classic_matches: Vec<ClassicMatches>,
    pub params: SfmParams,
}

impl SfmInput {
    pub fn new(
        records: Vec<ImageRecord>,
        classic_matches: Vec<ClassicMatches>,
        params: SfmParams,
    ) -> Result<Self, SfmError> {
        let input = Self {
            records,
            classic_matches,
            params,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<(), SfmError> {
        let bad = |m: String| Err(SfmError::InvalidInput(m));
        if self.records.len() < 2 {
            return bad(format!("{} images, need at least 2", self.records.len()));
        }
        let n = self.records.len();
        for m in &self.classic_matches {
            if m.a >= n || m.b >= n || m.a == m.b {
                return bad(format!("classic matches between images {} and {}", m.a, m.b));
            }
            let (ra, rb) = (&self.records[m.a], &self.records[m.b]);
            let inside = |r: &ImageRecord, p: &Pixel| {
                p.is_finite()
                    && p.u >= 0.0
                    && p.v >= 0.0
                    && p.u <= r.width as f64 - 1.0
                    && p.v <= r.height as f64 - 1.0
            };
            if let Some((pa, pb)) = m.pairs.iter().find(|(pa, pb)| !inside(ra, pa) || !inside(rb, pb)) {
                return bad(format!(
                    "classic match ({}, {}) -> ({}, {}) between images {} and {} is out of bounds",
                    pa.u, pa.v, pb.u, pb.v, m.a, m.b
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationFailure {
    pub image: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub vcs_extracted: usize,
    pub classic_matches: usize,
    /// RANSAC inliers over the pairs used for registration.
    pub inliers: usize,
    /// Correspondences that could not be lifted to tracks.
    pub dropped_tracks: usize,
    /// Stage name and wall time in seconds.
    pub timings: Vec<(String, f64)>,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
    pub termination: Option<Termination>,
    /// The seed pair looked like a pure rotation; its translation is zero.
    pub degenerate: bool,
    pub seed_pair: Option<(usize, usize)>,
    pub failures: Vec<RegistrationFailure>,
}

#[derive(Debug, Clone)]
pub struct SfmResult {
    /// World-to-camera poses; `None` for images that were not registered.
    pub poses: Vec<Option<Se3Pose>>,
    /// Final tracks, with camera indices referring to images.
    pub tracks: Vec<VcTrack>,
    pub diagnostics: Diagnostics,
}

/// A correspondence between the two images of a pair, in pair order.
#[derive(Debug, Clone)]
enum Corr {
    Virtual(VirtualCorrespondence),
    Classic(Pixel, Pixel),
}

impl Corr {
    fn pixels(&self) -> (Pixel, Pixel) {
        match self {
            Corr::Virtual(vc) => (vc.pixel_a, vc.pixel_b),
            Corr::Classic(a, b) => (*a, *b),
        }
    }
}

#[derive(Debug, Clone)]
struct PairData {
    a: usize,
    b: usize,
    corrs: Vec<Corr>,
    n_vcs: usize,
    outcome: Result<PairModel, PoseError>,
}

#[derive(Debug, Clone)]
enum PairModel {
    /// Camera `a` to camera `b`, metric translation.
    Motion {
        pose: Se3Pose,
        estimate: RelativePoseEstimate,
    },
    /// The correspondences fit a rotation alone.
    Rotation(Mat3),
}

impl PairData {
    fn score(&self) -> usize {
        match &self.outcome {
            Ok(PairModel::Motion { estimate, .. }) => estimate.score,
            _ => 0,
        }
    }

    /// Relative motion from `from` to the other image of the pair.
    fn motion_from(&self, from: usize) -> Option<Se3Pose> {
        let Ok(PairModel::Motion { pose, .. }) = &self.outcome else { return None };
        Some(if from == self.a { *pose } else { pose.inverse() })
    }
}

fn analyze_pair(input: &SfmInput, a: usize, b: usize) -> Result<PairData, SfmError> {
    let (ra, rb) = (&input.records[a], &input.records[b]);
    let mut corrs: Vec<Corr> = if input.params.use_vcs {
        extract_vcs(ra, rb, &input.params.extraction)?
            .into_iter()
            .map(Corr::Virtual)
            .collect()
    } else {
        Vec::new()
    };
    let n_vcs = corrs.len();
    for m in &input.classic_matches {
        if (m.a, m.b) == (a, b) {
            corrs.extend(m.pairs.iter().map(|(p, q)| Corr::Classic(*p, *q)));
        } else if (m.a, m.b) == (b, a) {
            corrs.extend(m.pairs.iter().map(|(p, q)| Corr::Classic(*q, *p)));
        }
    }
    let pairs: Vec<NormalizedPair> = corrs
        .iter()
        .map(|c| {
            let (p, q) = c.pixels();
            NormalizedPair::new(ra.intrinsics.normalize(p), rb.intrinsics.normalize(q))
        })
        .collect();
    let outcome = estimate_pair(input, ra, rb, &corrs, &pairs);
    Ok(PairData {
        a,
        b,
        corrs,
        n_vcs,
        outcome,
    })
}

fn estimate_pair(
    input: &SfmInput,
    ra: &ImageRecord,
    rb: &ImageRecord,
    corrs: &[Corr],
    pairs: &[NormalizedPair],
) -> Result<PairModel, PoseError> {
    if pairs.len() < 5 {
        return Err(PoseError::InsufficientCorrespondences {
            need: 5,
            got: pairs.len(),
        });
    }
    let tol = input.params.ransac.inlier_threshold.sqrt();
    if let Some(r) = rotation_only(pairs, tol) {
        return Ok(PairModel::Rotation(r));
    }
    let guide = input
        .params
        .prior_gate
        .and_then(|max_angle| prior_alignment(ra, rb).map(|pose| PoseGuide { pose, max_angle }));
    let estimate = ransac_essential_guided(pairs, &input.params.ransac, guide.as_ref())?;
    let scale = metric_scale(ra, rb, corrs, pairs, &estimate);
    let pose = estimate.pose.with_translation(estimate.pose.translation() * scale);
    Ok(PairModel::Motion { pose, estimate })
}

/// Pixel distance between the projection of `x` and `obs`; infinite when
/// `x` is not in front of the camera.
fn reprojection(pose: &Se3Pose, record: &ImageRecord, x: &Vec3, obs: Pixel) -> f64 {
    if pose.transform(x).z <= 0.0 {
        return f64::INFINITY;
    }
    project(pose, &record.intrinsics, x).map_or(f64::INFINITY, |p| p.distance(&obs))
}

/// Rigid motion taking the prior meshes of `ra` onto those of `rb`, from
/// their shared vertices. `None` without a common subject.
fn prior_alignment(ra: &ImageRecord, rb: &ImageRecord) -> Option<Se3Pose> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for sa in &ra.subjects {
        let Some(sb) = rb.subject(&sa.person) else { continue };
        if !sa.mesh.same_topology(&sb.mesh) {
            continue;
        }
        src.extend_from_slice(sa.mesh.vertices());
        dst.extend_from_slice(sb.mesh.vertices());
    }
    if src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let ca = src.iter().sum::<Vec3>() / n;
    let cb = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (p, q) in src.iter().zip(&dst) {
        h += (q - cb) * (p - ca).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
    Some(Se3Pose::from_approximate_rotation(&r, cb - r * ca))
}

/// Rotation with `x₂ ∝ R x₁` when at least 90% of the bearings agree
/// within `tol` radians.
fn rotation_only(pairs: &[NormalizedPair], tol: f64) -> Option<Mat3> {
    let bearing = |x: &nalgebra::Vector2<f64>| Vec3::new(x.x, x.y, 1.0).normalize();
    let mut h = Mat3::zeros();
    for p in pairs {
        h += bearing(&p.x2) * bearing(&p.x1).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
    let agree = pairs
        .iter()
        .filter(|p| (r * bearing(&p.x1)).cross(&bearing(&p.x2)).norm() < tol)
        .count();
    (agree * 10 >= pairs.len() * 9).then_some(r)
}

/// Median ratio of prior depth to triangulated depth over inliers.
///
/// For a virtual correspondence the rays meet at the point the observing
/// image sees, so the observer's first prior hit fixes the depth.
fn metric_scale(
    ra: &ImageRecord,
    rb: &ImageRecord,
    corrs: &[Corr],
    pairs: &[NormalizedPair],
    est: &RelativePoseEstimate,
) -> f64 {
    let (r, t) = (est.pose.rotation(), est.pose.translation());
    let o2 = -(r.transpose() * t);
    let mut ratios = Vec::new();
    for ((c, p), inlier) in corrs.iter().zip(pairs).zip(&est.inlier_mask) {
        if !inlier {
            continue;
        }
        let d1 = Vec3::new(p.x1.x, p.x1.y, 1.0);
        let d2 = r.transpose() * Vec3::new(p.x2.x, p.x2.y, 1.0);
        let Some((s, u)) = closest_approach(&Vec3::zeros(), &d1, &o2, &d2) else { continue };
        if !(s > 0.0 && u > 0.0) {
            continue;
        }
        let (pa, pb) = c.pixels();
        let use_b = matches!(c, Corr::Virtual(vc) if vc.source == VcSource::A);
        let ratio = if use_b {
            rb.first_prior_hit(pb).map(|h| h.point.z / u)
        } else {
            ra.first_prior_hit(pa)
                .map(|h| h.point.z / s)
                .or_else(|| rb.first_prior_hit(pb).map(|h| h.point.z / u))
        };
        if let Some(x) = ratio.filter(|x| x.is_finite() && *x > 0.0) {
            ratios.push(x);
        }
    }
    if ratios.is_empty() {
        return 1.0;
    }
    ratios.sort_by(f64::total_cmp);
    ratios[ratios.len() / 2]
}

/// Two-image SfM: match, verify, fix metric scale from the priors, lift
/// inliers to tracks and refine.
pub fn two_view_sfm(input: &SfmInput) -> Result<SfmResult, SfmError> {
    input.validate()?;
    if input.records.len() != 2 {
        return Err(SfmError::InvalidInput(format!(
            "two-view SfM needs exactly 2 images, got {}",
            input.records.len()
        )));
    }
    let start = Instant::now();
    let pair = analyze_pair(input, 0, 1)?;
    let matching = start.elapsed().as_secs_f64();
    let mut diagnostics = Diagnostics {
        vcs_extracted: pair.n_vcs,
        classic_matches: pair.corrs.len() - pair.n_vcs,
        seed_pair: Some((0, 1)),
        ..Diagnostics::default()
    };
    diagnostics.timings.push(("matching".into(), matching));
    match &pair.outcome {
        Ok(PairModel::Rotation(r)) => {
            diagnostics.degenerate = true;
            let second = Se3Pose::from_approximate_rotation(r, Vec3::zeros());
            return Ok(SfmResult {
                poses: vec![Some(Se3Pose::identity()), Some(second)],
                tracks: Vec::new(),
                diagnostics,
            });
        }
        Ok(PairModel::Motion { .. }) => {}
        Err(e) => return Err(e.clone().into()),
    }
    let mut state = Reconstruction::new(input, vec![pair]);
    state.register_seed(0, 1);
    state.refine()?;
    state.finish(diagnostics)
}

/// Incremental SfM over all images. `order`, when given, fixes the seed
/// pair (its first two entries) and the registration order.
pub fn incremental_sfm(input: &SfmInput, order: Option<&[usize]>) -> Result<SfmResult, SfmError> {
    input.validate()?;
    let n = input.records.len();
    if let Some(o) = order {
        let mut seen = vec![false; n];
        if o.len() < 2 || o.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(SfmError::InvalidInput("order must list distinct image indices".into()));
        }
    }
    if n == 2 && order.is_none() {
        return two_view_sfm(input);
    }
    let start = Instant::now();
    let index: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let pairs = index
        .par_iter()
        .map(|&(i, j)| analyze_pair(input, i, j))
        .collect::<Result<Vec<_>, _>>()?;
    let mut diagnostics = Diagnostics {
        vcs_extracted: pairs.iter().map(|p| p.n_vcs).sum(),
        classic_matches: pairs.iter().map(|p| p.corrs.len() - p.n_vcs).sum(),
        ..Diagnostics::default()
    };
    diagnostics.timings.push(("matching".into(), start.elapsed().as_secs_f64()));
    let min = input.params.min_inliers;
    let usable = |p: &PairData| p.score() >= min;

    let seed = match order {
        Some(o) => {
            let (i, j) = (o[0].min(o[1]), o[0].max(o[1]));
            pairs.iter().find(|p| (p.a, p.b) == (i, j)).filter(|p| usable(p))
        }
        None => pairs.iter().filter(|p| usable(p)).min_by(|p, q| {
            let key = |p: &PairData| match &p.outcome {
                Ok(PairModel::Motion { estimate, .. }) => (estimate.score, estimate.mean_inlier_error),
                _ => (0, f64::INFINITY),
            };
            let ((sp, ep), (sq, eq)) = (key(p), key(q));
            sq.cmp(&sp).then(ep.total_cmp(&eq))
        }),
    };
    let Some(seed) = seed else { return Err(SfmError::NoSeedPair) };
    let (sa, sb) = (seed.a, seed.b);
    diagnostics.seed_pair = Some((sa, sb));

    let mut state = Reconstruction::new(input, pairs);
    state.register_seed(sa, sb);
    state.refine()?;
    loop {
        let next = match order {
            Some(o) => o.iter().copied().find(|&k| state.poses[k].is_none() && !state.skip[k]),
            None => state.best_candidate(),
        };
        let Some(k) = next else { break };
        match state.best_link(k) {
            Some(r) => {
                state.register(k, r);
                state.refine()?;
            }
            None => state.skip[k] = true,
        }
    }
    for k in 0..n {
        if state.poses[k].is_none() {
            let reason = state.failure_reason(k);
            diagnostics.failures.push(RegistrationFailure { image: k, reason });
        }
    }
    state.finish(diagnostics)
}

struct Reconstruction<'a> {
    input: &'a SfmInput,
    pairs: Vec<PairData>,
    poses: Vec<Option<Se3Pose>>,
    fixed: Option<usize>,
    tracks: Vec<VcTrack>,
    dropped: usize,
    inliers: usize,
    ba_time: f64,
    initial_objective: Option<f64>,
    final_objective: Option<f64>,
    termination: Option<Termination>,
    /// Images given up on during ordered registration.
    skip: Vec<bool>,
}

impl<'a> Reconstruction<'a> {
    fn new(input: &'a SfmInput, pairs: Vec<PairData>) -> Self {
        let n = input.records.len();
        Self {
            input,
            pairs,
            poses: vec![None; n],
            fixed: None,
            tracks: Vec::new(),
            dropped: 0,
            inliers: 0,
            ba_time: 0.0,
            initial_objective: None,
            final_objective: None,
            termination: None,
            skip: vec![false; n],
        }
    }

    fn pair(&self, i: usize, j: usize) -> Option<&PairData> {
        let (a, b) = (i.min(j), i.max(j));
        self.pairs.iter().find(|p| (p.a, p.b) == (a, b))
    }

    fn register_seed(&mut self, a: usize, b: usize) {
        let pose = self.pair(a, b).and_then(|p| p.motion_from(a)).expect("seed pair has a motion");
        self.inliers += self.pair(a, b).map_or(0, PairData::score);
        self.poses[a] = Some(Se3Pose::identity());
        self.poses[b] = Some(pose);
        self.fixed = Some(a);
    }

    /// Unregistered image with the most inliers to registered images.
    fn best_candidate(&self) -> Option<usize> {
        let min = self.input.params.min_inliers;
        (0..self.poses.len())
            .filter(|&k| self.poses[k].is_none() && !self.skip[k])
            .map(|k| {
                let total: usize = (0..self.poses.len())
                    .filter(|&r| self.poses[r].is_some())
                    .filter_map(|r| self.pair(r, k))
                    .map(PairData::score)
                    .filter(|&s| s >= min)
                    .sum();
                (k, total)
            })
            .filter(|&(_, total)| total > 0)
            .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|(k, _)| k)
    }

    /// Registered image sharing the most inliers with `k`.
    fn best_link(&self, k: usize) -> Option<usize> {
        let min = self.input.params.min_inliers;
        (0..self.poses.len())
            .filter(|&r| self.poses[r].is_some())
            .filter_map(|r| self.pair(r, k).map(|p| (r, p.score())))
            .filter(|&(_, s)| s >= min)
            .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|(r, _)| r)
    }

    fn register(&mut self, k: usize, r: usize) {
        let pair = self.pair(r, k).expect("linked pair");
        let rel = pair.motion_from(r).expect("linked pair has a motion");
        self.inliers += pair.score();
        let base = self.poses[r].expect("registered");
        self.poses[k] = Some(rel.compose(&base));
    }

    fn failure_reason(&self, k: usize) -> String {
        let reasons: Vec<String> = (0..self.poses.len())
            .filter(|&r| r != k)
            .filter_map(|r| self.pair(r, k))
            .map(|p| {
                let other = if p.a == k { p.b } else { p.a };
                match &p.outcome {
                    Err(e) => format!("with {other}: {e}"),
                    Ok(PairModel::Rotation(_)) => format!("with {other}: rotation only"),
                    Ok(PairModel::Motion { estimate, .. }) => {
                        format!("with {other}: {} inliers", estimate.score)
                    }
                }
            })
            .collect();
        format!(
            "no pair with at least {} inliers ({})",
            self.input.params.min_inliers,
            reasons.join("; ")
        )
    }

    /// Tracks for every verified pair between registered images, lifted
    /// with the current poses.
    fn build_tracks(&self, cam_of: &[Option<usize>]) -> (Vec<VcTrack>, usize) {
        let params = &self.input.params;
        let mut tracks = Vec::new();
        let mut dropped = 0;
        for p in &self.pairs {
            let (Some(ca), Some(cb)) = (cam_of[p.a], cam_of[p.b]) else { continue };
            let Ok(PairModel::Motion { estimate, .. }) = &p.outcome else { continue };
            if estimate.score < params.min_inliers {
                continue;
            }
            let (pa, pb) = (self.poses[p.a].unwrap(), self.poses[p.b].unwrap());
            let (ra, rb) = (&self.input.records[p.a], &self.input.records[p.b]);
            let inliers: Vec<&Corr> = p
                .corrs
                .iter()
                .zip(&estimate.inlier_mask)
                .filter(|(_, m)| **m)
                .map(|(c, _)| c)
                .collect();
            let step = inliers.len().div_ceil(params.max_tracks_per_pair.max(1)).max(1);
            for c in inliers.into_iter().step_by(step) {
                let track = match c {
                    Corr::Virtual(vc) => lift_vc_to_track(vc, (ca, cb), (ra, rb), (&pa, &pb))
                        .ok()
                        .filter(|t| {
                            let ((p1, r1), (p2, r2)) = match vc.source {
                                VcSource::A => ((&pa, ra), (&pb, rb)),
                                VcSource::B => ((&pb, rb), (&pa, ra)),
                            };
                            let x2 = match params.mode {
                                BaMode::Hard => x2_from_reparam(&t.x1, t.a, t.b, &p1.center(), &p2.center()),
                                BaMode::Soft => t.x2,
                            };
                            let worst = reprojection(p1, r1, &t.x1, t.obs_a)
                                .max(reprojection(p2, r2, &x2, t.obs_b));
                            worst <= params.max_lift_residual
                        }),
                    Corr::Classic(x, y) => triangulate(&pa, &pb, ra, rb, *x, *y)
                        .map(|x3| VcTrack::classic(x3, ca, cb, *x, *y)),
                };
                match track {
                    Some(t) => tracks.push(t),
                    None => dropped += 1,
                }
            }
        }
        (tracks, dropped)
    }

    /// Global bundle adjustment over the registered cameras.
    fn refine(&mut self) -> Result<(), SfmError> {
        let start = Instant::now();
        let registered: Vec<usize> = (0..self.poses.len()).filter(|&i| self.poses[i].is_some()).collect();
        let mut cam_of = vec![None; self.poses.len()];
        for (c, &i) in registered.iter().enumerate() {
            cam_of[i] = Some(c);
        }
        let (tracks, dropped) = self.build_tracks(&cam_of);
        self.dropped = dropped;
        let cameras: Vec<BaCamera> = registered
            .iter()
            .map(|&i| BaCamera {
                pose: self.poses[i].unwrap(),
                intrinsics: self.input.records[i].intrinsics,
                fixed: Some(i) == self.fixed,
            })
            .collect();
        let image_of = |t: &VcTrack| {
            let mut t = t.clone();
            t.cam_a = registered[t.cam_a];
            t.cam_b = registered[t.cam_b];
            t
        };
        let params = &self.input.params;
        if !params.refine || tracks.len() < 6 {
            self.tracks = tracks.iter().map(image_of).collect();
            return Ok(());
        }
        let problem = BaProblem {
            soft_weight: params.soft_weight,
            ..BaProblem::new(cameras, tracks, params.mode)?
        };
        let (solved, report) = solve_ba(&problem, &params.ba)?;
        for (&i, c) in registered.iter().zip(&solved.cameras) {
            self.poses[i] = Some(c.pose);
        }
        self.tracks = solved.tracks.iter().map(image_of).collect();
        self.initial_objective = Some(report.initial_objective());
        self.final_objective = Some(report.final_objective());
        self.termination = Some(report.termination);
        self.ba_time += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Moves the world frame onto image 0 when it is registered.
    fn finish(mut self, mut diagnostics: Diagnostics) -> Result<SfmResult, SfmError> {
        if let Some(w) = self.poses[0] {
            let w_inv = w.inverse();
            for p in self.poses.iter_mut().flatten() {
                *p = p.compose(&w_inv);
            }
            for t in self.tracks.iter_mut() {
                t.x1 = w.transform(&t.x1);
                t.x2 = w.transform(&t.x2);
            }
            self.poses[0] = Some(Se3Pose::identity());
        }
        diagnostics.inliers = self.inliers;
        diagnostics.dropped_tracks = self.dropped;
        diagnostics.initial_objective = self.initial_objective;
        diagnostics.final_objective = self.final_objective;
        diagnostics.termination = self.termination;
        diagnostics.timings.push(("bundle adjustment".into(), self.ba_time));
        Ok(SfmResult {
            poses: self.poses,
            tracks: self.tracks,
            diagnostics,
        })
    }
}

/// Midpoint of closest approach of the two pixel rays; falls back to the
/// first image's prior hit when the rays do not meet in front of both cameras.
fn triangulate(
    pa: &Se3Pose,
    pb: &Se3Pose,
    ra: &ImageRecord,
    rb: &ImageRecord,
    x: Pixel,
    y: Pixel,
) -> Option<Vec3> {
    let da = pa.rotation().transpose() * ra.camera_ray(x).direction();
    let db = pb.rotation().transpose() * rb.camera_ray(y).direction();
    let (oa, ob) = (pa.center(), pb.center());
    if let Some((s, t)) = closest_approach(&oa, &da, &ob, &db) {
        if s > 0.0 && t > 0.0 {
            return Some(((oa + da * s) + (ob + db * t)) / 2.0);
        }
    }
    ra.first_prior_hit(x).map(|h| pa.inverse().transform(&h.point))
}
