//! Generalized bundle adjustment over virtual-correspondence tracks.
//!
//! A track ties two cameras to a pair of points `X¹, X²`. The second point
//! is expressed through the thickness parameters `a, b ≥ 0` as
//! `X² = X¹ + a(X¹ − o₁) + b(o₂ − o₁)`, which keeps both camera rays
//! co-planar. Classic tracks freeze `a = b = 0`. In soft mode `X²` is a free
//! variable pulled towards the reparameterized point by a quadratic penalty.

use nalgebra::{DVector, Matrix3x2};
use thiserror::Error;

use crate::geometry::{so3_exp, so3_left_jacobian, skew, CameraIntrinsics, Mat3, Pixel, Se3Pose, Vec3};
use crate::lbfgs::LbfgsMemory;
use crate::vc::{ImageRecord, VcSource, VirtualCorrespondence};

/// Camera-frame depth below which a residual is replaced by a penalty.
pub const Z_MIN: f64 = 1e-6;
/// Weight of the behind-camera penalty, pixel².
pub const BEHIND_PENALTY: f64 = 1e6;
pub const DEFAULT_SOFT_WEIGHT: f64 = 1e2;

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("parameter vector has length {got}, expected {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("pixel ray misses the prior surface")]
    NoSurfaceHit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackKind {
    Virtual,
    Classic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaCamera {
    pub pose: Se3Pose,
    pub intrinsics: CameraIntrinsics,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VcTrack {
    pub x1: Vec3,
    pub a: f64,
    pub b: f64,
    /// Explicit second point. Free in soft mode; derived in hard mode.
    pub x2: Vec3,
    pub cam_a: usize,
    pub cam_b: usize,
    pub obs_a: Pixel,
    pub obs_b: Pixel,
    pub kind: TrackKind,
}

impl VcTrack {
    pub fn classic(x: Vec3, cam_a: usize, cam_b: usize, obs_a: Pixel, obs_b: Pixel) -> Self {
        Self {
            x1: x,
            a: 0.0,
            b: 0.0,
            x2: x,
            cam_a,
            cam_b,
            obs_a,
            obs_b,
            kind: TrackKind::Classic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub cameras: Vec<BaCamera>,
    pub tracks: Vec<VcTrack>,
    pub mode: BaMode,
    pub soft_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaConfig {
    pub max_iterations: usize,
    /// Bound on the infinity norm of the projected gradient.
    pub gradient_tolerance: f64,
    /// Relative bound on an accepted step; stops only when the objective
    /// no longer decreases either.
    pub step_tolerance: f64,
    pub history_size: usize,
    /// Huber width in pixels applied to reprojection residuals.
    pub huber_width: Option<f64>,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-14,
            history_size: 20,
            huber_width: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    /// No representable decrease remains along the search direction.
    Stalled,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    /// Objective at the start and after every accepted iteration.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

impl BaReport {
    pub fn initial_objective(&self) -> f64 {
        self.objectives[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("at least one objective")
    }

    pub fn line_search_failed(&self) -> bool {
        self.termination == Termination::LineSearchFailure
    }
}

pub fn x2_from_reparam(x1: &Vec3, a: f64, b: f64, o1: &Vec3, o2: &Vec3) -> Vec3 {
    x1 + a * (x1 - o1) + b * (o2 - o1)
}

/// `((X¹ − o₁) × (X² − o₂)) · (o₂ − o₁)`, zero when the two rays are co-planar.
pub fn triple_product(x1: &Vec3, x2: &Vec3, o1: &Vec3, o2: &Vec3) -> f64 {
    (x1 - o1).cross(&(x2 - o2)).dot(&(o2 - o1))
}

/// Least-squares `(a, b)` with `X² ≈ x2_from_reparam(X¹, a, b, o₁, o₂)`.
pub fn fit_reparam(x1: &Vec3, x2: &Vec3, o1: &Vec3, o2: &Vec3) -> (f64, f64) {
    let m = Matrix3x2::from_columns(&[x1 - o1, o2 - o1]);
    match m.svd(true, true).solve(&(x2 - x1), 1e-12) {
        Ok(v) => (v[0], v[1]),
        Err(_) => (0.0, 0.0),
    }
}

#[derive(Debug, Clone, Copy)]
enum CamSlot {
    Fixed,
    Free,
    /// Free rotation, translation restricted to the sphere of this radius.
    ScaleGauge(f64),
}

#[derive(Debug, Clone)]
struct Layout {
    cams: Vec<(CamSlot, usize)>,
    tracks: Vec<usize>,
    len: usize,
    bounded: Vec<usize>,
    frozen: Vec<usize>,
    /// Solver chart: virtual tracks store `c = (1 + a)‖X¹ − o₁‖` in place of
    /// `a`, with `û` the direction of `X¹ − o₁`. Hard mode also replaces `b`
    /// by `r = (b − 1)/c`, so that `X² = o₂ + c(û + r(o₂ − o₁))`. Soft mode
    /// keeps `b` and stores `X²` as an offset from `o₁ + cû + b(o₂ − o₁)`.
    solver_chart: bool,
}

impl Layout {
    fn new(p: &BaProblem) -> Result<Self, BaError> {
        let n_fixed = p.cameras.iter().filter(|c| c.fixed).count();
        let mut gauge_done = n_fixed != 1;
        let mut cams = Vec::with_capacity(p.cameras.len());
        let mut frozen = Vec::new();
        let mut off = 0;
        for c in &p.cameras {
            let slot = if c.fixed {
                frozen.extend(off..off + 6);
                CamSlot::Fixed
            } else if !gauge_done {
                gauge_done = true;
                let s0 = c.pose.translation().norm();
                if !(s0 > 1e-12) {
                    return Err(BaError::InvalidProblem(
                        "scale gauge camera has zero translation".into(),
                    ));
                }
                CamSlot::ScaleGauge(s0)
            } else {
                CamSlot::Free
            };
            cams.push((slot, off));
            off += 6;
        }
        let mut tracks = Vec::with_capacity(p.tracks.len());
        let mut bounded = Vec::new();
        for t in &p.tracks {
            tracks.push(off);
            off += 3;
            if t.kind == TrackKind::Virtual {
                bounded.extend([off, off + 1]);
                off += 2;
                if p.mode == BaMode::Soft {
                    off += 3;
                }
            }
        }
        Ok(Self {
            cams,
            tracks,
            len: off,
            bounded,
            frozen,
            solver_chart: false,
        })
    }

    /// Layout used inside the solver. The distance of `X¹` from `o₁` does not
    /// affect the objective, and in hard mode neither does the distance of
    /// `X²` from `o₂`. Bounds that can be met by shrinking those are dropped,
    /// which leaves only soft-mode `b` bounded.
    fn for_solver(p: &BaProblem) -> Result<Self, BaError> {
        let mut l = Self::new(p)?;
        match p.mode {
            BaMode::Hard => l.bounded.clear(),
            BaMode::Soft => l.bounded.retain(|i| l.tracks.binary_search(&(i - 4)).is_ok()),
        }
        l.solver_chart = true;
        Ok(l)
    }

    fn pack(&self, p: &BaProblem) -> DVector<f64> {
        let mut x = DVector::zeros(self.len);
        for (c, &(_, off)) in p.cameras.iter().zip(&self.cams) {
            x.fixed_rows_mut::<3>(off + 3).copy_from(c.pose.translation());
        }
        for (t, &off) in p.tracks.iter().zip(&self.tracks) {
            x.fixed_rows_mut::<3>(off).copy_from(&t.x1);
            if t.kind == TrackKind::Virtual {
                x[off + 3] = t.a;
                x[off + 4] = t.b;
                if self.solver_chart {
                    let c = (1.0 + t.a) * (t.x1 - p.cameras[t.cam_a].pose.center()).norm();
                    x[off + 3] = c;
                    if p.mode == BaMode::Hard {
                        x[off + 4] = (t.b - 1.0) / c;
                    }
                }
                if p.mode == BaMode::Soft {
                    let x2 = if self.solver_chart {
                        t.x2 - reparam_of(p, t)
                    } else {
                        t.x2
                    };
                    x.fixed_rows_mut::<3>(off + 5).copy_from(&x2);
                }
            }
        }
        x
    }

    fn cam_states(&self, p: &BaProblem, x: &DVector<f64>) -> Vec<CamState> {
        p.cameras
            .iter()
            .zip(&self.cams)
            .map(|(c, &(slot, off))| CamState::new(c, slot, off, x))
            .collect()
    }

    /// Problem with the parameters of `x` written back; rotations absorb
    /// their tangent increments.
    fn unpack(&self, p: &BaProblem, x: &DVector<f64>) -> BaProblem {
        let states = self.cam_states(p, x);
        let cameras = p
            .cameras
            .iter()
            .zip(&states)
            .map(|(c, s)| match s.offset {
                None => c.clone(),
                Some(_) => BaCamera {
                    pose: Se3Pose::from_approximate_rotation(&s.r, s.t),
                    intrinsics: c.intrinsics,
                    fixed: false,
                },
            })
            .collect::<Vec<_>>();
        let tracks = p
            .tracks
            .iter()
            .zip(&self.tracks)
            .map(|(t, &off)| {
                let mut x1 = x.fixed_rows::<3>(off).into_owned();
                let mut out = t.clone();
                out.x2 = x1;
                if t.kind == TrackKind::Virtual {
                    out.a = x[off + 3];
                    out.b = x[off + 4];
                    if self.solver_chart {
                        let (o1, o2) = (cameras[t.cam_a].pose.center(), cameras[t.cam_b].pose.center());
                        let (a, b, x2) = match p.mode {
                            BaMode::Hard => restore_track(&mut x1, x[off + 3], x[off + 4], &o1, &o2),
                            BaMode::Soft => {
                                let (a, b) = restore_soft_track(&mut x1, x[off + 3], x[off + 4], &o1, &o2);
                                let delta = x.fixed_rows::<3>(off + 5).into_owned();
                                (a, b, x2_from_reparam(&x1, a, b, &o1, &o2) + delta)
                            }
                        };
                        out.a = a;
                        out.b = b;
                        out.x2 = x2;
                    } else {
                        out.x2 = match p.mode {
                            BaMode::Hard => x2_from_reparam(
                                &x1,
                                out.a,
                                out.b,
                                &cameras[t.cam_a].pose.center(),
                                &cameras[t.cam_b].pose.center(),
                            ),
                            BaMode::Soft => x.fixed_rows::<3>(off + 5).into_owned(),
                        };
                    }
                }
                out.x1 = x1;
                out
            })
            .collect();
        BaProblem {
            cameras,
            tracks,
            mode: p.mode,
            soft_weight: p.soft_weight,
        }
    }
}

/// Maps hard-mode solver values `(X¹, c, r)` back to `(a, b, X²)`.
///
/// `c` is shrunk until `b = 1 + rc ≥ 0` and `X¹` slides towards `o₁` until
/// `a ≥ 0`. Neither move changes the direction of a ray.
fn restore_track(x1: &mut Vec3, c: f64, r: f64, o1: &Vec3, o2: &Vec3) -> (f64, f64, Vec3) {
    let base = o2 - o1;
    let tiny = 1e-9 * (*x1 - o1).norm().max(base.norm());
    let mut c = c.max(tiny);
    if 1.0 + r * c < 0.0 {
        c = (-1.0 / r).max(tiny);
    }
    let (a, b) = restore_soft_track(x1, c, 1.0 + r * c, o1, o2);
    (a, b, x2_from_reparam(x1, a, b, o1, o2))
}

/// Maps `(X¹, c, b)` back to `(a, b)`, sliding `X¹` towards `o₁` until `a ≥ 0`.
fn restore_soft_track(x1: &mut Vec3, c: f64, b: f64, o1: &Vec3, o2: &Vec3) -> (f64, f64) {
    let v = *x1 - o1;
    let rho = v.norm();
    let c = c.max(1e-9 * rho.max((o2 - o1).norm()));
    let a = if c < rho {
        *x1 = o1 + v * (c / rho);
        0.0
    } else {
        c / rho - 1.0
    };
    (a, b.max(0.0))
}

fn reparam_of(p: &BaProblem, t: &VcTrack) -> Vec3 {
    x2_from_reparam(
        &t.x1,
        t.a,
        t.b,
        &p.cameras[t.cam_a].pose.center(),
        &p.cameras[t.cam_b].pose.center(),
    )
}

struct CamState {
    r: Mat3,
    t: Vec3,
    jl: Mat3,
    dt_du: Mat3,
    offset: Option<usize>,
}

impl CamState {
    fn new(c: &BaCamera, slot: CamSlot, off: usize, x: &DVector<f64>) -> Self {
        let (r0, t0) = (*c.pose.rotation(), *c.pose.translation());
        match slot {
            CamSlot::Fixed => Self {
                r: r0,
                t: t0,
                jl: Mat3::identity(),
                dt_du: Mat3::zeros(),
                offset: None,
            },
            CamSlot::Free | CamSlot::ScaleGauge(_) => {
                let w = x.fixed_rows::<3>(off).into_owned();
                let u = x.fixed_rows::<3>(off + 3).into_owned();
                let (t, dt_du) = match slot {
                    CamSlot::ScaleGauge(s0) => {
                        let n = u.norm();
                        let uh = u / n;
                        (uh * s0, (Mat3::identity() - uh * uh.transpose()) * (s0 / n))
                    }
                    _ => (u, Mat3::identity()),
                };
                Self {
                    r: so3_exp(&w) * r0,
                    t,
                    jl: so3_left_jacobian(&w),
                    dt_du,
                    offset: Some(off),
                }
            }
        }
    }

    fn center(&self) -> (Vec3, Cols) {
        let o = -(self.r.transpose() * self.t);
        let mut cols = Cols::new();
        if let Some(off) = self.offset {
            let dw = -(self.r.transpose() * skew(&self.t) * self.jl);
            let dt = -(self.r.transpose() * self.dt_du);
            for k in 0..3 {
                cols.push((off + k, dw.column(k).into_owned()));
                cols.push((off + 3 + k, dt.column(k).into_owned()));
            }
        }
        (o, cols)
    }

    /// Camera-frame point and its derivative columns.
    fn camera_point(&self, x: &Vec3, x_cols: &Cols) -> (Vec3, Cols) {
        let rx = self.r * x;
        let mut cols: Cols = x_cols.iter().map(|(j, d)| (*j, self.r * d)).collect();
        if let Some(off) = self.offset {
            let dw = -(skew(&rx) * self.jl);
            for k in 0..3 {
                cols.push((off + k, dw.column(k).into_owned()));
                cols.push((off + 3 + k, self.dt_du.column(k).into_owned()));
            }
        }
        (rx + self.t, cols)
    }
}

/// Sparse derivative columns of a 3-vector: `(parameter index, ∂v/∂θ)`.
type Cols = Vec<(usize, Vec3)>;

fn scaled(cols: &Cols, s: f64) -> impl Iterator<Item = (usize, Vec3)> + '_ {
    cols.iter().map(move |(j, d)| (*j, d * s))
}

fn merge(mut cols: Cols) -> Cols {
    cols.sort_by_key(|(j, _)| *j);
    let mut out: Cols = Vec::with_capacity(cols.len());
    for (j, d) in cols {
        match out.last_mut() {
            Some((k, acc)) if *k == j => *acc += d,
            _ => out.push((j, d)),
        }
    }
    out
}

struct Accumulator {
    f: f64,
    grad: Option<DVector<f64>>,
    /// Diagonal of the Gauss-Newton Hessian.
    diag: Option<DVector<f64>>,
    huber: Option<f64>,
}

impl Accumulator {
    /// Adds `ρ(‖r‖²)` for a residual `r` with derivative columns `cols`.
    fn add(&mut self, r: &Vec3, cols: Cols, robust: bool) {
        let s = r.norm_squared();
        let (rho, w) = match self.huber {
            Some(d) if robust && s > d * d => (2.0 * d * s.sqrt() - d * d, d / s.sqrt()),
            _ => (s, 1.0),
        };
        self.f += rho;
        if self.grad.is_none() {
            return;
        }
        let cols = merge(cols);
        if let Some(g) = self.grad.as_mut() {
            for (j, c) in &cols {
                g[*j] += 2.0 * w * r.dot(c);
            }
        }
        if let Some(diag) = self.diag.as_mut() {
            for (j, c) in &cols {
                diag[*j] += 2.0 * w * c.norm_squared();
            }
        }
    }

    /// Reprojection residual `obs − π(y)` or the behind-camera penalty.
    fn add_observation(&mut self, k: &CameraIntrinsics, obs: &Pixel, y: &Vec3, y_cols: Cols) {
        if y.z <= Z_MIN {
            let c = BEHIND_PENALTY.sqrt();
            let r = Vec3::new(c * (Z_MIN - y.z + 1.0), 0.0, 0.0);
            let cols = y_cols
                .into_iter()
                .map(|(j, d)| (j, Vec3::new(-c * d.z, 0.0, 0.0)))
                .collect();
            self.add(&r, cols, false);
            return;
        }
        let iz = 1.0 / y.z;
        let (nx, ny) = (y.x * iz, y.y * iz);
        let u = k.fx * nx + k.skew * ny + k.cx;
        let v = k.fy * ny + k.cy;
        let r = Vec3::new(obs.u - u, obs.v - v, 0.0);
        let cols = y_cols
            .into_iter()
            .map(|(j, d)| {
                let dnx = (d.x - nx * d.z) * iz;
                let dny = (d.y - ny * d.z) * iz;
                (j, Vec3::new(-(k.fx * dnx + k.skew * dny), -(k.fy * dny), 0.0))
            })
            .collect();
        self.add(&r, cols, true);
    }
}

struct Evaluation {
    f: f64,
    grad: DVector<f64>,
    diag: DVector<f64>,
}

fn evaluate(
    p: &BaProblem,
    layout: &Layout,
    x: &DVector<f64>,
    derivatives: bool,
    huber: Option<f64>,
) -> Evaluation {
    let states = layout.cam_states(p, x);
    let mut acc = Accumulator {
        f: 0.0,
        grad: derivatives.then(|| DVector::zeros(layout.len)),
        diag: derivatives.then(|| DVector::zeros(layout.len)),
        huber,
    };
    let sqrt_lambda = p.soft_weight.max(0.0).sqrt();
    for (t, &off) in p.tracks.iter().zip(&layout.tracks) {
        let (ca, cb) = (&states[t.cam_a], &states[t.cam_b]);
        let x1 = x.fixed_rows::<3>(off).into_owned();
        let x1_cols: Cols = (0..3).map(|k| (off + k, Vec3::ith(k, 1.0))).collect();

        let (y, y_cols) = ca.camera_point(&x1, &x1_cols);
        acc.add_observation(&p.cameras[t.cam_a].intrinsics, &t.obs_a, &y, y_cols);

        let (x2, x2_cols) = match t.kind {
            TrackKind::Classic => (x1, x1_cols),
            TrackKind::Virtual => {
                let b = x[off + 4];
                let (o1, o1_cols) = ca.center();
                let (o2, o2_cols) = cb.center();
                let (reparam, mut rp_cols) = if layout.solver_chart {
                    let c = x[off + 3];
                    let base = o2 - o1;
                    let v = x1 - o1;
                    let rho = v.norm();
                    let u = v / rho;
                    let dq = (Mat3::identity() - u * u.transpose()) * (c / rho);
                    let mut cols: Cols = x1_cols.iter().map(|(j, d)| (*j, dq * d)).collect();
                    // `b` itself in soft mode, `r` with `b = 1 + rc` in hard mode.
                    let (bb, db_dc, db_dx) = match p.mode {
                        BaMode::Hard => (1.0 + b * c, b, c),
                        BaMode::Soft => (b, 0.0, 1.0),
                    };
                    cols.push((off + 3, u + base * db_dc));
                    cols.push((off + 4, base * db_dx));
                    cols.extend(o1_cols.iter().map(|(j, d)| (*j, d * (1.0 - bb) - dq * d)));
                    cols.extend(scaled(&o2_cols, bb));
                    (o1 + u * c + base * bb, cols)
                } else {
                    let a = x[off + 3];
                    let mut cols: Cols = scaled(&x1_cols, 1.0 + a).collect();
                    cols.push((off + 3, x1 - o1));
                    cols.push((off + 4, o2 - o1));
                    cols.extend(scaled(&o1_cols, -(a + b)));
                    cols.extend(scaled(&o2_cols, b));
                    (x2_from_reparam(&x1, a, b, &o1, &o2), cols)
                };
                match p.mode {
                    BaMode::Hard => (reparam, rp_cols),
                    BaMode::Soft if layout.solver_chart => {
                        let delta = x.fixed_rows::<3>(off + 5).into_owned();
                        let d_cols: Cols =
                            (0..3).map(|k| (off + 5 + k, Vec3::ith(k, 1.0))).collect();
                        acc.add(&(delta * sqrt_lambda), scaled(&d_cols, sqrt_lambda).collect(), false);
                        rp_cols.extend(d_cols);
                        (reparam + delta, rp_cols)
                    }
                    BaMode::Soft => {
                        let x2 = x.fixed_rows::<3>(off + 5).into_owned();
                        let x2_cols: Cols =
                            (0..3).map(|k| (off + 5 + k, Vec3::ith(k, 1.0))).collect();
                        let mut pen_cols: Cols = scaled(&x2_cols, sqrt_lambda).collect();
                        pen_cols.extend(scaled(&rp_cols, -sqrt_lambda));
                        acc.add(&((x2 - reparam) * sqrt_lambda), pen_cols, false);
                        (x2, x2_cols)
                    }
                }
            }
        };
        let (y, y_cols) = cb.camera_point(&x2, &x2_cols);
        acc.add_observation(&p.cameras[t.cam_b].intrinsics, &t.obs_b, &y, y_cols);
    }
    Evaluation {
        f: acc.f,
        grad: acc.grad.unwrap_or_else(|| DVector::zeros(0)),
        diag: acc.diag.unwrap_or_else(|| DVector::zeros(0)),
    }
}

impl BaProblem {
    pub fn new(cameras: Vec<BaCamera>, tracks: Vec<VcTrack>, mode: BaMode) -> Result<Self, BaError> {
        let p = Self {
            cameras,
            tracks,
            mode,
            soft_weight: DEFAULT_SOFT_WEIGHT,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), BaError> {
        let bad = |m: String| Err(BaError::InvalidProblem(m));
        if !self.cameras.iter().any(|c| c.fixed) {
            return bad("no fixed camera".into());
        }
        if !(self.soft_weight >= 0.0) || !self.soft_weight.is_finite() {
            return bad(format!("soft weight {}", self.soft_weight));
        }
        let n = self.cameras.len();
        for (i, t) in self.tracks.iter().enumerate() {
            if t.cam_a >= n || t.cam_b >= n || t.cam_a == t.cam_b {
                return bad(format!("track {i} has cameras ({}, {})", t.cam_a, t.cam_b));
            }
            let finite = t.x1.iter().chain(t.x2.iter()).all(|v| v.is_finite())
                && t.a.is_finite()
                && t.b.is_finite()
                && t.obs_a.is_finite()
                && t.obs_b.is_finite();
            if !finite {
                return bad(format!("track {i} has non-finite values"));
            }
            if t.kind == TrackKind::Classic && (t.a != 0.0 || t.b != 0.0) {
                return bad(format!("classic track {i} has non-zero thickness"));
            }
        }
        Layout::new(self).map(|_| ())
    }

    pub fn parameter_count(&self) -> Result<usize, BaError> {
        Ok(Layout::new(self)?.len)
    }

    /// Parameter vector of the current state: zero rotation increments,
    /// translations, then per track `X¹`, `a, b` (virtual) and `X²` (soft,
    /// virtual).
    pub fn parameters(&self) -> Result<DVector<f64>, BaError> {
        Ok(Layout::new(self)?.pack(self))
    }

    /// The problem state described by `x`.
    pub fn with_parameters(&self, x: &DVector<f64>) -> Result<BaProblem, BaError> {
        let layout = self.checked_layout(x)?;
        Ok(layout.unpack(self, x))
    }

    fn checked_layout(&self, x: &DVector<f64>) -> Result<Layout, BaError> {
        let layout = Layout::new(self)?;
        if x.len() != layout.len {
            return Err(BaError::DimensionMismatch {
                got: x.len(),
                want: layout.len,
            });
        }
        Ok(layout)
    }

    /// Second point of every track under the current state.
    pub fn second_point(&self, t: &VcTrack) -> Vec3 {
        match (t.kind, self.mode) {
            (TrackKind::Classic, _) => t.x1,
            (TrackKind::Virtual, BaMode::Soft) => t.x2,
            (TrackKind::Virtual, BaMode::Hard) => x2_from_reparam(
                &t.x1,
                t.a,
                t.b,
                &self.cameras[t.cam_a].pose.center(),
                &self.cameras[t.cam_b].pose.center(),
            ),
        }
    }

    /// Triple product of every track under the current state.
    pub fn coplanarity_residuals(&self) -> Vec<f64> {
        self.tracks
            .iter()
            .map(|t| {
                triple_product(
                    &t.x1,
                    &self.second_point(t),
                    &self.cameras[t.cam_a].pose.center(),
                    &self.cameras[t.cam_b].pose.center(),
                )
            })
            .collect()
    }

    pub fn objective(&self) -> Result<f64, BaError> {
        ba_objective(self, &self.parameters()?)
    }
}

pub fn ba_objective(problem: &BaProblem, x: &DVector<f64>) -> Result<f64, BaError> {
    let layout = problem.checked_layout(x)?;
    Ok(evaluate(problem, &layout, x, false, None).f)
}

/// Analytic gradient; rotation entries are tangent increments applied on
/// the left of each camera's stored rotation.
pub fn ba_gradient(problem: &BaProblem, x: &DVector<f64>) -> Result<DVector<f64>, BaError> {
    let layout = problem.checked_layout(x)?;
    Ok(evaluate(problem, &layout, x, true, None).grad)
}

/// Inverse of the Gauss-Newton diagonal, floored relative to its largest entry.
fn inverse_diagonal(diag: &DVector<f64>) -> DVector<f64> {
    let floor = (1e-12 * diag.amax()).max(f64::MIN_POSITIVE);
    diag.map(|d| 1.0 / d.max(floor))
}

fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, layout: &Layout) -> DVector<f64> {
    let mut pg = g.clone();
    for &i in &layout.frozen {
        pg[i] = 0.0;
    }
    for &i in &layout.bounded {
        if x[i] <= 0.0 && pg[i] > 0.0 {
            pg[i] = 0.0;
        }
    }
    pg
}

fn mask_direction(d: &mut DVector<f64>, x: &DVector<f64>, layout: &Layout) {
    for &i in &layout.frozen {
        d[i] = 0.0;
    }
    for &i in &layout.bounded {
        if x[i] <= 0.0 && d[i] < 0.0 {
            d[i] = 0.0;
        }
    }
}

/// Projected L-BFGS with Armijo backtracking. Rotations are re-centered
/// after every accepted step, and `a, b` are clamped to be non-negative.
pub fn solve_ba(problem: &BaProblem, config: &BaConfig) -> Result<(BaProblem, BaReport), BaError> {
    problem.validate()?;
    if problem.cameras.iter().all(|c| c.fixed) {
        return Err(BaError::InvalidProblem("no free camera".into()));
    }
    if problem.tracks.len() < 6 {
        return Err(BaError::InvalidProblem(format!(
            "{} tracks, need at least 6",
            problem.tracks.len()
        )));
    }
    let layout = Layout::for_solver(problem)?;
    let mut state = problem.clone();
    for t in state.tracks.iter_mut() {
        t.a = t.a.max(0.0);
        t.b = t.b.max(0.0);
    }
    let mut x = layout.pack(&state);
    let mut ev = evaluate(&state, &layout, &x, true, config.huber_width);
    let mut objectives = vec![ev.f];
    let mut memory = LbfgsMemory::new(config.history_size);
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        let pg = projected_gradient(&x, &ev.grad, &layout);
        if pg.amax() <= config.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        let h0 = inverse_diagonal(&ev.diag);
        let mut d = memory.direction(&pg, |q| q.component_mul(&h0));
        mask_direction(&mut d, &x, &layout);
        if !(pg.dot(&d) < 0.0) {
            memory.clear();
            d = -pg.component_mul(&h0);
            mask_direction(&mut d, &x, &layout);
        }

        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..MAX_BACKTRACKS {
            let mut xt = &x + &d * alpha;
            for &i in &layout.bounded {
                xt[i] = xt[i].max(0.0);
            }
            let step = &xt - &x;
            let slope = ev.grad.dot(&step);
            if slope < 0.0 {
                let st = layout.unpack(&state, &xt);
                let xc = layout.pack(&st);
                let et = evaluate(&st, &layout, &xc, true, config.huber_width);
                if et.f.is_finite() && et.f <= ev.f + ARMIJO_C1 * slope {
                    accepted = Some((st, xc, et, step));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((st, xc, et, step)) = accepted else {
            if !memory.is_empty() {
                memory.clear();
                continue;
            }
            let predicted = -pg.dot(&d);
            termination = if predicted <= 1e-12 * ev.f.max(f64::MIN_POSITIVE) {
                Termination::Stalled
            } else {
                Termination::LineSearchFailure
            };
            break;
        };
        memory.push(step.clone(), &et.grad - &ev.grad);
        let decrease = ev.f - et.f;
        state = st;
        x = xc;
        ev = et;
        iterations += 1;
        objectives.push(ev.f);
        let tiny_step = step.amax() <= config.step_tolerance * (1.0 + x.amax());
        if tiny_step && decrease <= f64::EPSILON * ev.f {
            termination = Termination::StepTolerance;
            break;
        }
    }
    Ok((
        state,
        BaReport {
            objectives,
            iterations,
            termination,
        },
    ))
}

/// Builds a track from a correspondence by intersecting both pixel rays
/// with the images' prior surfaces, registered with the current poses.
///
/// The casting image becomes the track's first camera, so the observer's
/// point lies at or beyond the caster's first hit.
pub fn lift_vc_to_track(
    vc: &VirtualCorrespondence,
    cams: (usize, usize),
    records: (&ImageRecord, &ImageRecord),
    poses: (&Se3Pose, &Se3Pose),
) -> Result<VcTrack, BaError> {
    let (ca, cb, ra, rb, pa, pb, xa, xb) = match vc.source {
        VcSource::A => (cams.0, cams.1, records.0, records.1, poses.0, poses.1, vc.pixel_a, vc.pixel_b),
        VcSource::B => (cams.1, cams.0, records.1, records.0, poses.1, poses.0, vc.pixel_b, vc.pixel_a),
    };
    let world = |r: &ImageRecord, pose: &Se3Pose, px: Pixel| {
        r.first_prior_hit(px)
            .map(|h| pose.inverse().transform(&h.point))
            .ok_or(BaError::NoSurfaceHit)
    };
    let x1 = world(ra, pa, xa)?;
    let x2 = world(rb, pb, xb)?;
    let (a, b) = fit_reparam(&x1, &x2, &pa.center(), &pb.center());
    Ok(VcTrack {
        x1,
        a: a.max(0.0),
        b: b.max(0.0),
        x2,
        cam_a: ca,
        cam_b: cb,
        obs_a: xa,
        obs_b: xb,
        kind: TrackKind::Virtual,
    })
}
