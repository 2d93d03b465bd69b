//! Calibrated two-view relative pose: minimal five-point solver, linear
//! eight-point solver, RANSAC, and cheirality voting over the four
//! factorizations of an essential matrix.

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    closest_approach, decompose_essential, rotation_angle, sampson_error, skew, so3_exp,
    sorted_svd3, GeometryError, Mat3, Se3Pose, Vec2, Vec3,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("sample is degenerate")]
    DegenerateSample,
    #[error("need at least {need} correspondences, got {got}")]
    InsufficientCorrespondences { need: usize, got: usize },
    #[error("no sample produced a valid hypothesis")]
    NoValidHypothesis,
    #[error("cheirality vote is ambiguous ({best} vs {second} of {total})")]
    AmbiguousCheirality {
        best: usize,
        second: usize,
        total: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A correspondence in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPair {
    pub x1: Vec2,
    pub x2: Vec2,
}

impl NormalizedPair {
    pub fn new(x1: Vec2, x2: Vec2) -> Self {
        Self { x1, x2 }
    }

    fn h1(&self) -> Vec3 {
        Vec3::new(self.x1.x, self.x1.y, 1.0)
    }

    fn h2(&self) -> Vec3 {
        Vec3::new(self.x2.x, self.x2.y, 1.0)
    }

    /// Row of the linear system `x2ᵀ E x1 = 0` in `E` stored row-major.
    fn design_row(&self) -> [f64; 9] {
        let (a, b) = (self.h1(), self.h2());
        let mut row = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                row[3 * r + c] = b[r] * a[c];
            }
        }
        row
    }
}

/// Sorted (descending) singular values and the matching right singular
/// vectors of an `n × 9` design matrix, padded with zero rows when `n < 9`.
fn design_svd(pairs: &[NormalizedPair]) -> (Vec<f64>, Vec<SVector<f64, 9>>) {
    let rows = pairs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in pairs.iter().enumerate() {
        for (j, v) in p.design_row().iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&x, &y| s[y].total_cmp(&s[x]));
    let values = order.iter().map(|&i| s[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| SVector::<f64, 9>::from_iterator(v_t.row(i).iter().copied()))
        .collect();
    (values, vectors)
}

fn to_mat3(v: &SVector<f64, 9>) -> Mat3 {
    Mat3::from_row_slice(v.as_slice())
}

/// Polynomial in `x, y, z` of total degree ≤ 3, dense over exponents.
#[derive(Clone, Copy)]
struct Cubic([f64; 64]);

impl Cubic {
    fn zero() -> Self {
        Cubic([0.0; 64])
    }

    fn idx(i: usize, j: usize, k: usize) -> usize {
        16 * i + 4 * j + k
    }

    fn linear(cx: f64, cy: f64, cz: f64, c1: f64) -> Self {
        let mut p = Self::zero();
        p.0[Self::idx(1, 0, 0)] = cx;
        p.0[Self::idx(0, 1, 0)] = cy;
        p.0[Self::idx(0, 0, 1)] = cz;
        p.0[Self::idx(0, 0, 0)] = c1;
        p
    }

    fn add(&self, o: &Self) -> Self {
        let mut p = *self;
        p.0.iter_mut().zip(o.0.iter()).for_each(|(a, b)| *a += b);
        p
    }

    fn scale(&self, s: f64) -> Self {
        let mut p = *self;
        p.0.iter_mut().for_each(|a| *a *= s);
        p
    }

    fn mul(&self, o: &Self) -> Self {
        let mut p = Self::zero();
        for (i1, j1, k1) in exponents() {
            let a = self.0[Self::idx(i1, j1, k1)];
            if a == 0.0 {
                continue;
            }
            for (i2, j2, k2) in exponents() {
                if i1 + j1 + k1 + i2 + j2 + k2 <= 3 {
                    p.0[Self::idx(i1 + i2, j1 + j2, k1 + k2)] += a * o.0[Self::idx(i2, j2, k2)];
                }
            }
        }
        p
    }

    fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        exponents()
            .map(|(i, j, k)| {
                self.0[Self::idx(i, j, k)] * x.powi(i as i32) * y.powi(j as i32) * z.powi(k as i32)
            })
            .sum()
    }

    fn gradient(&self, x: f64, y: f64, z: f64) -> Vec3 {
        let mut g = Vec3::zeros();
        for (i, j, k) in exponents() {
            let c = self.0[Self::idx(i, j, k)];
            if c == 0.0 {
                continue;
            }
            let (fi, fj, fk) = (i as i32, j as i32, k as i32);
            if i > 0 {
                g.x += c * fi as f64 * x.powi(fi - 1) * y.powi(fj) * z.powi(fk);
            }
            if j > 0 {
                g.y += c * fj as f64 * x.powi(fi) * y.powi(fj - 1) * z.powi(fk);
            }
            if k > 0 {
                g.z += c * fk as f64 * x.powi(fi) * y.powi(fj) * z.powi(fk - 1);
            }
        }
        g
    }
}

fn exponents() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..4).flat_map(|i| (0..4 - i).flat_map(move |j| (0..4 - i - j).map(move |k| (i, j, k))))
}

/// Column order of the 10 × 20 constraint matrix, as `(x, y, z)` exponents.
/// The first ten are eliminated; rows for `x²z, x², y²z, y², xyz, xy`
/// then pair up into three equations linear in `x, y, 1`.
const MONOMIALS: [(usize, usize, usize); 20] = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1),
    (2, 0, 0), (0, 2, 1), (0, 2, 0), (1, 1, 1), (1, 1, 0),
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1),
    (0, 1, 0), (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
];

/// The ten cubic constraints (`det E = 0` and `2EEᵀE − tr(EEᵀ)E = 0`)
/// on `E = xX + yY + zZ + W`.
fn essential_constraints(basis: &[Mat3; 4]) -> [Cubic; 10] {
    let [bx, by, bz, bw] = basis;
    let e: [[Cubic; 3]; 3] = std::array::from_fn(|r| {
        std::array::from_fn(|c| Cubic::linear(bx[(r, c)], by[(r, c)], bz[(r, c)], bw[(r, c)]))
    });
    let det = e[0][0]
        .mul(&e[1][1].mul(&e[2][2]).add(&e[1][2].mul(&e[2][1]).scale(-1.0)))
        .add(
            &e[0][1]
                .mul(&e[1][0].mul(&e[2][2]).add(&e[1][2].mul(&e[2][0]).scale(-1.0)))
                .scale(-1.0),
        )
        .add(&e[0][2].mul(&e[1][0].mul(&e[2][1]).add(&e[1][1].mul(&e[2][0]).scale(-1.0))));

    // EEᵀ, quadratic entries.
    let eet: [[Cubic; 3]; 3] = std::array::from_fn(|r| {
        std::array::from_fn(|c| {
            (0..3).fold(Cubic::zero(), |acc, k| acc.add(&e[r][k].mul(&e[c][k])))
        })
    });
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    let mut out = [Cubic::zero(); 10];
    out[0] = det;
    for r in 0..3 {
        for c in 0..3 {
            let eete = (0..3).fold(Cubic::zero(), |acc, k| acc.add(&eet[r][k].mul(&e[k][c])));
            out[1 + 3 * r + c] = eete.scale(2.0).add(&trace.mul(&e[r][c]).scale(-1.0));
        }
    }
    out
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn poly_eval(p: &[f64], z: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * z + c)
}

fn poly_derivative(p: &[f64]) -> Vec<f64> {
    p.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect()
}

/// Real roots of a polynomial (ascending coefficients) via the eigenvalues
/// of its companion matrix, each polished by Newton steps.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = p.len() - 1;
    while deg > 0 && p[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let mut companion = DMatrix::<f64>::zeros(deg, deg);
    for i in 0..deg {
        companion[(0, i)] = -p[deg - 1 - i] / lead;
    }
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    let dp = poly_derivative(&p[..=deg]);
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|c| c.im.abs() < 1e-8 * c.re.abs().max(1.0))
        .map(|c| {
            let mut z = c.re;
            let mut fz = poly_eval(&p[..=deg], z).abs();
            for _ in 0..5 {
                let d = poly_eval(&dp, z);
                if d == 0.0 {
                    break;
                }
                let next = z - poly_eval(&p[..=deg], z) / d;
                let fnext = poly_eval(&p[..=deg], next).abs();
                if !(fnext < fz) {
                    break;
                }
                z = next;
                fz = fnext;
            }
            z
        })
        .collect()
}

/// Residual of the trace constraint for a Frobenius-normalized `e`.
pub fn trace_constraint_residual(e: &Mat3) -> f64 {
    let e = e / e.norm();
    let eet = e * e.transpose();
    (2.0 * eet * e - eet.trace() * e).norm()
}

/// Minimal solver: up to ten essential matrices (unit Frobenius norm)
/// consistent with five normalized correspondences.
pub fn five_point(pairs: &[NormalizedPair]) -> Result<Vec<Mat3>, PoseError> {
    if pairs.len() != 5 {
        return Err(PoseError::InsufficientCorrespondences {
            need: 5,
            got: pairs.len(),
        });
    }
    let (sv, vecs) = design_svd(pairs);
    if !(sv[0] > 0.0) || sv[4] / sv[0] < 1e-10 {
        return Err(PoseError::DegenerateSample);
    }
    let basis = [to_mat3(&vecs[5]), to_mat3(&vecs[6]), to_mat3(&vecs[7]), to_mat3(&vecs[8])];
    let constraints = essential_constraints(&basis);

    let mut m = SMatrix::<f64, 10, 20>::zeros();
    for (r, poly) in constraints.iter().enumerate() {
        for (c, &(i, j, k)) in MONOMIALS.iter().enumerate() {
            m[(r, c)] = poly.0[Cubic::idx(i, j, k)];
        }
    }
    let lead = m.fixed_view::<10, 10>(0, 0).into_owned();
    let rest = m.fixed_view::<10, 10>(0, 10).into_owned();
    let Some(g) = lead.lu().solve(&rest) else {
        return Err(PoseError::DegenerateSample);
    };

    // Rows of g express x²z, x², y²z, y², xyz, xy in the trailing monomials
    // [xz², xz, x, yz², yz, y, z³, z², z, 1].
    let part_x = |r: usize| vec![g[(r, 2)], g[(r, 1)], g[(r, 0)]];
    let part_y = |r: usize| vec![g[(r, 5)], g[(r, 4)], g[(r, 3)]];
    let part_1 = |r: usize| vec![g[(r, 9)], g[(r, 8)], g[(r, 7)], g[(r, 6)]];
    let shift = |p: Vec<f64>| {
        let mut q = vec![0.0];
        q.extend(p);
        q
    };
    let row = |upper: usize, lower: usize| -> [Vec<f64>; 3] {
        [
            poly_sub(&part_x(upper), &shift(part_x(lower))),
            poly_sub(&part_y(upper), &shift(part_y(lower))),
            poly_sub(&part_1(upper), &shift(part_1(lower))),
        ]
    };
    let b = [row(4, 5), row(6, 7), row(8, 9)];
    let minor = |r1: usize, r2: usize, c1: usize, c2: usize| {
        poly_sub(
            &poly_mul(&b[r1][c1], &b[r2][c2]),
            &poly_mul(&b[r1][c2], &b[r2][c1]),
        )
    };
    let det = poly_sub(
        &poly_mul(&b[0][0], &minor(1, 2, 1, 2)),
        &poly_sub(
            &poly_mul(&b[0][1], &minor(1, 2, 0, 2)),
            &poly_mul(&b[0][2], &minor(1, 2, 0, 1)),
        ),
    );

    let mut out: Vec<Mat3> = Vec::new();
    for z in real_roots(&det) {
        let bz = Mat3::from_fn(|r, c| poly_eval(&b[r][c], z));
        let rows = [bz.row(0).transpose(), bz.row(1).transpose(), bz.row(2).transpose()];
        let v = [
            rows[0].cross(&rows[1]),
            rows[0].cross(&rows[2]),
            rows[1].cross(&rows[2]),
        ]
        .into_iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .expect("three candidates");
        if v.z.abs() <= 1e-12 * v.norm() {
            continue;
        }
        let p = polish(&constraints, Vec3::new(v.x / v.z, v.y / v.z, z));
        let e = basis[0] * p.x + basis[1] * p.y + basis[2] * p.z + basis[3];
        let e = e / e.norm();
        if !is_valid_candidate(&e, pairs) {
            continue;
        }
        let duplicate = out
            .iter()
            .any(|o| (o - e).norm() < 1e-9 || (o + e).norm() < 1e-9);
        if !duplicate {
            out.push(e);
        }
    }
    Ok(out)
}

/// Gauss-Newton refinement of `(x, y, z)` on the ten cubic constraints.
fn polish(constraints: &[Cubic; 10], start: Vec3) -> Vec3 {
    let residual = |p: &Vec3| -> f64 {
        constraints.iter().map(|c| c.eval(p.x, p.y, p.z).powi(2)).sum()
    };
    let mut p = start;
    let mut cost = residual(&p);
    for _ in 0..4 {
        let mut jtj = Mat3::zeros();
        let mut jtr = Vec3::zeros();
        for c in constraints {
            let g = c.gradient(p.x, p.y, p.z);
            let r = c.eval(p.x, p.y, p.z);
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        let next = p - step;
        let next_cost = residual(&next);
        if !(next_cost < cost) {
            break;
        }
        p = next;
        cost = next_cost;
    }
    p
}

fn is_valid_candidate(e: &Mat3, pairs: &[NormalizedPair]) -> bool {
    e.iter().all(|v| v.is_finite())
        && e.determinant().abs() < 1e-8
        && trace_constraint_residual(e) < 1e-7
        && pairs
            .iter()
            .all(|p| (p.h2().transpose() * e * p.h1())[0].abs() < 1e-8)
}

/// Linear estimate from eight or more correspondences, projected onto the
/// essential manifold and scaled to unit Frobenius norm.
pub fn eight_point(pairs: &[NormalizedPair]) -> Result<Mat3, PoseError> {
    if pairs.len() < 8 {
        return Err(PoseError::InsufficientCorrespondences {
            need: 8,
            got: pairs.len(),
        });
    }
    let (sv, vecs) = design_svd(pairs);
    if !(sv[0] > 0.0) || sv[7] / sv[0] < 1e-10 {
        return Err(PoseError::DegenerateSample);
    }
    let e = to_mat3(&vecs[8]);
    let (u, s, v) = sorted_svd3(&e);
    let mean = 0.5 * (s[0] + s[1]);
    let e = u * Mat3::from_diagonal(&Vec3::new(mean, mean, 0.0)) * v.transpose();
    Ok(e / e.norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Sampson error bound in normalized coordinates.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
    /// Rounds of least-squares refinement on the inliers of the winning
    /// hypothesis, each followed by re-selecting inliers. 0 disables.
    pub refine_rounds: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            inlier_threshold: 1e-4,
            confidence: 0.999,
            seed: 0,
            refine_rounds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseEstimate {
    /// Maps camera-1 coordinates to camera-2 coordinates; `‖t‖ = 1`.
    pub pose: Se3Pose,
    /// `[t]ₓR` of `pose`, unit Frobenius norm.
    pub essential: Mat3,
    pub inlier_mask: Vec<bool>,
    pub score: usize,
    pub mean_inlier_error: f64,
    pub iterations: usize,
}

struct Hypothesis {
    essential: Mat3,
    score: usize,
    mean_error: f64,
}

fn score_hypothesis(e: &Mat3, pairs: &[NormalizedPair], threshold: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for p in pairs {
        if let Ok(err) = sampson_error(e, &p.x1, &p.x2) {
            if err < threshold {
                count += 1;
                sum += err;
            }
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    (count, mean)
}

fn adaptive_cap(inlier_ratio: f64, confidence: f64, max_iterations: usize) -> usize {
    let w5 = inlier_ratio.powi(5);
    if w5 >= 1.0 - f64::EPSILON {
        return 1;
    }
    if w5 <= 0.0 {
        return max_iterations;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w5).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, max_iterations)
    } else {
        max_iterations
    }
}

/// Coarse relative pose restricting which hypotheses RANSAC may accept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGuide {
    pub pose: Se3Pose,
    /// Largest admissible rotation or translation-direction deviation, degrees.
    pub max_angle: f64,
}

impl PoseGuide {
    /// Larger of the rotation and translation-direction angles, in degrees.
    pub fn deviation(&self, pose: &Se3Pose) -> f64 {
        let rot = rotation_angle(&(pose.rotation() * self.pose.rotation().transpose()));
        let (a, b) = (pose.translation(), self.pose.translation());
        let dir = match (a.try_normalize(1e-12), b.try_normalize(1e-12)) {
            (Some(a), Some(b)) => a.dot(&b).clamp(-1.0, 1.0).acos(),
            _ => 0.0,
        };
        rot.max(dir).to_degrees()
    }

    /// Factorization of `e` nearest to the guide, if within `max_angle`.
    pub fn factorize(&self, e: &Mat3) -> Option<Se3Pose> {
        decompose_essential(e)
            .ok()?
            .into_iter()
            .map(|c| (self.deviation(&c), c))
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .filter(|(d, _)| *d <= self.max_angle)
            .map(|(_, c)| c)
    }
}

/// Five-point RANSAC over normalized correspondences.
///
/// Hypotheses are ranked by inlier count, then lower mean inlier error,
/// then earlier iteration. The chosen essential matrix is factorized by
/// cheirality voting over its inliers.
pub fn ransac_essential(
    pairs: &[NormalizedPair],
    params: &RansacParams,
) -> Result<RelativePoseEstimate, PoseError> {
    ransac_essential_guided(pairs, params, None)
}

/// [`ransac_essential`] that, given a guide, discards hypotheses with no
/// factorization near the guide pose and factorizes the winner by proximity
/// to the guide instead of by cheirality.
pub fn ransac_essential_guided(
    pairs: &[NormalizedPair],
    params: &RansacParams,
    guide: Option<&PoseGuide>,
) -> Result<RelativePoseEstimate, PoseError> {
    if pairs.len() < 5 {
        return Err(PoseError::InsufficientCorrespondences {
            need: 5,
            got: pairs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<Hypothesis> = None;
    let mut cap = params.max_iterations;
    let mut iterations = 0;
    let mut sample_pairs = [pairs[0]; 5];
    while iterations < cap {
        iterations += 1;
        let idx = sample(&mut rng, pairs.len(), 5);
        for (slot, i) in sample_pairs.iter_mut().zip(idx.iter()) {
            *slot = pairs[i];
        }
        let Ok(candidates) = five_point(&sample_pairs) else { continue };
        for e in candidates {
            if guide.is_some_and(|g| g.factorize(&e).is_none()) {
                continue;
            }
            let (score, mean_error) = score_hypothesis(&e, pairs, params.inlier_threshold);
            let better = match &best {
                None => score > 0,
                Some(b) => score > b.score || (score == b.score && mean_error < b.mean_error),
            };
            if better {
                best = Some(Hypothesis {
                    essential: e,
                    score,
                    mean_error,
                });
                cap = adaptive_cap(
                    score as f64 / pairs.len() as f64,
                    params.confidence,
                    params.max_iterations,
                );
            }
        }
    }
    let best = best.ok_or(PoseError::NoValidHypothesis)?;
    let mask_for = |e: &Mat3| -> Vec<bool> {
        pairs
            .iter()
            .map(|p| {
                sampson_error(e, &p.x1, &p.x2)
                    .map(|err| err < params.inlier_threshold)
                    .unwrap_or(false)
            })
            .collect()
    };
    let select = |mask: &[bool]| -> Vec<NormalizedPair> {
        pairs
            .iter()
            .zip(mask)
            .filter_map(|(p, &m)| m.then_some(*p))
            .collect()
    };
    let mut inlier_mask = mask_for(&best.essential);
    let mut pose = match guide {
        Some(g) => g.factorize(&best.essential).ok_or(PoseError::NoValidHypothesis)?,
        None => recover_pose(&best.essential, &select(&inlier_mask))?,
    };
    let (mut score, mut mean_inlier_error) = (best.score, best.mean_error);
    for _ in 0..params.refine_rounds {
        let refined = refine_pose(&pose, &select(&inlier_mask), 30);
        let e = essential_of(&refined);
        let (s, m) = score_hypothesis(&e, pairs, params.inlier_threshold);
        if s < 5 || guide.is_some_and(|g| g.deviation(&refined) > g.max_angle) {
            break;
        }
        let unchanged = s == score && (m - mean_inlier_error).abs() <= 1e-12 * m.max(1e-300);
        pose = refined;
        score = s;
        mean_inlier_error = m;
        inlier_mask = mask_for(&e);
        if unchanged {
            break;
        }
    }
    Ok(RelativePoseEstimate {
        pose,
        essential: essential_of(&pose),
        inlier_mask,
        score,
        mean_inlier_error,
        iterations,
    })
}

fn essential_of(pose: &Se3Pose) -> Mat3 {
    let e = skew(pose.translation()) * pose.rotation();
    e / e.norm()
}

/// Signed square root of the Sampson error; `None` when undefined.
fn sampson_residual(e: &Mat3, p: &NormalizedPair) -> Option<f64> {
    let (h1, h2) = (p.h1(), p.h2());
    let ex1 = e * h1;
    let etx2 = e.transpose() * h2;
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    (den > 1e-18).then(|| h2.dot(&ex1) / den.sqrt())
}

/// Levenberg-Marquardt on the summed Sampson error over `pairs`, with the
/// rotation updated on SO(3) and the translation kept on the unit sphere.
/// Cheirality is preserved: a step that flips the majority vote is rejected.
pub fn refine_pose(pose: &Se3Pose, pairs: &[NormalizedPair], max_iterations: usize) -> Se3Pose {
    if pairs.len() < 5 || pose.translation().norm() < 1e-12 {
        return *pose;
    }
    let scale = pose.translation().norm();
    let apply = |base: &Se3Pose, d: &SVector<f64, 5>| -> Se3Pose {
        let t = base.translation();
        let e1 = t.cross(&if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() }).normalize();
        let e2 = t.cross(&e1).normalize();
        let dir = (t.normalize() + e1 * d[3] + e2 * d[4]).normalize();
        let r = so3_exp(&Vec3::new(d[0], d[1], d[2])) * base.rotation();
        Se3Pose::from_approximate_rotation(&r, dir * scale)
    };
    let residuals = |p: &Se3Pose| -> Vec<f64> {
        let e = essential_of(p);
        pairs
            .iter()
            .map(|c| sampson_residual(&e, c).unwrap_or(0.0))
            .collect()
    };
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let min_votes = cheirality_count(pose, pairs);
    let mut current = *pose;
    let mut r0 = residuals(&current);
    let mut f0 = cost(&r0);
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..max_iterations {
        let mut jac = DMatrix::<f64>::zeros(pairs.len(), 5);
        for k in 0..5 {
            let mut d = SVector::<f64, 5>::zeros();
            d[k] = h;
            let plus = residuals(&apply(&current, &d));
            d[k] = -h;
            let minus = residuals(&apply(&current, &d));
            for i in 0..pairs.len() {
                jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DMatrix::from_column_slice(r0.len(), 1, &r0);
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let d = SVector::<f64, 5>::from_iterator(step.iter().copied());
            let candidate = apply(&current, &d);
            let r1 = residuals(&candidate);
            let f1 = cost(&r1);
            if f1 < f0 && cheirality_count(&candidate, pairs) * 2 >= min_votes {
                let small = d.norm() < 1e-12 || f0 - f1 <= 1e-15 * f0;
                current = candidate;
                r0 = r1;
                f0 = f1;
                lambda = (lambda * 0.3).max(1e-9);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    current
}

/// Number of correspondences whose rays meet in front of both cameras
/// (both closest-approach parameters positive) under `pose`.
pub fn cheirality_count(pose: &Se3Pose, pairs: &[NormalizedPair]) -> usize {
    let rt = pose.rotation().transpose();
    let o2 = -(rt * pose.translation());
    pairs
        .iter()
        .filter(|p| {
            let d2 = rt * p.h2();
            matches!(
                closest_approach(&Vec3::zeros(), &p.h1(), &o2, &d2),
                Some((s, t)) if s > 0.0 && t > 0.0
            )
        })
        .count()
}

/// Picks the factorization of `e` under which the most correspondence rays
/// meet in front of both cameras.
pub fn recover_pose(e: &Mat3, pairs: &[NormalizedPair]) -> Result<Se3Pose, PoseError> {
    let candidates = decompose_essential(e)?;
    let mut votes: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (cheirality_count(c, pairs), i))
        .collect();
    votes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let (best, idx) = votes[0];
    let second = votes[1].0;
    let total = pairs.len();
    if best == 0 || ((best - second) as f64) < 0.01 * total as f64 {
        return Err(PoseError::AmbiguousCheirality {
            best,
            second,
            total,
        });
    }
    Ok(candidates[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{essential_from_pose, rotation_angle, so3_exp};
    use approx::assert_relative_eq;
    use rand::Rng;

    pub(crate) fn random_problem(
        rng: &mut impl Rng,
        n: usize,
    ) -> (Se3Pose, Vec<NormalizedPair>) {
        let rel = Se3Pose::new(
            so3_exp(&Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )),
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
        .unwrap();
        let mut pairs = Vec::new();
        while pairs.len() < n {
            let x = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(2.0..8.0),
            );
            let y = rel.transform(&x);
            if y.z < 0.5 {
                continue;
            }
            pairs.push(NormalizedPair::new(
                Vec2::new(x.x / x.z, x.y / x.z),
                Vec2::new(y.x / y.z, y.y / y.z),
            ));
        }
        (rel, pairs)
    }

    fn e_distance(a: &Mat3, b: &Mat3) -> f64 {
        let a = a / a.norm();
        let b = b / b.norm();
        (a - b).norm().min((a + b).norm())
    }

    #[test]
    fn five_point_recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let (rel, pairs) = random_problem(&mut rng, 5);
            let gt = essential_from_pose(&rel).unwrap();
            let cands = five_point(&pairs).unwrap();
            assert!(!cands.is_empty() && cands.len() <= 10);
            let best = cands.iter().map(|e| e_distance(e, &gt)).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best distance {best}");
            for e in &cands {
                assert!(e.determinant().abs() < 1e-8);
                assert!(trace_constraint_residual(e) < 1e-7);
            }
        }
    }

    #[test]
    fn five_point_rejects_degenerate_sample() {
        let p = NormalizedPair::new(Vec2::new(0.1, 0.2), Vec2::new(0.3, -0.1));
        assert_eq!(five_point(&[p; 5]), Err(PoseError::DegenerateSample));
        assert!(matches!(
            five_point(&[p; 4]),
            Err(PoseError::InsufficientCorrespondences { .. })
        ));
    }

    #[test]
    fn eight_point_agrees_with_five_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (rel, pairs) = random_problem(&mut rng, 20);
            let gt = essential_from_pose(&rel).unwrap();
            let e8 = eight_point(&pairs).unwrap();
            assert!(e_distance(&e8, &gt) < 1e-8);
            let e5 = five_point(&pairs[..5]).unwrap();
            let best = e5.iter().map(|e| e_distance(e, &e8)).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6);
        }
    }

    #[test]
    fn eight_point_noise_and_rotation_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = rand_distr::Normal::new(0.0, 1e-4).unwrap();
        let mut errors = Vec::new();
        for _ in 0..30 {
            let (rel, mut pairs) = random_problem(&mut rng, 100);
            for p in &mut pairs {
                p.x2 += Vec2::new(rng.sample(normal), rng.sample(normal));
            }
            let gt = essential_from_pose(&rel).unwrap();
            errors.push(e_distance(&eight_point(&pairs).unwrap(), &gt));
        }
        assert!(errors.iter().all(|&e| e < 1e-2), "{errors:?}");

        let r = so3_exp(&Vec3::new(0.1, 0.2, -0.1));
        let pairs: Vec<_> = (0..20)
            .map(|_| {
                let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
                let y = r * x;
                NormalizedPair::new(x.xy(), Vec2::new(y.x / y.z, y.y / y.z))
            })
            .collect();
        let flagged = match eight_point(&pairs) {
            Err(_) => true,
            Ok(e) => decompose_essential(&e).is_err(),
        };
        assert!(flagged);
    }

    #[test]
    fn ransac_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (rel, pairs) = random_problem(&mut rng, 100);
        let est = ransac_essential(&pairs, &RansacParams::default()).unwrap();
        assert_eq!(est.score, 100);
        let err = rotation_angle(&(est.pose.rotation() * rel.rotation().transpose()));
        assert!(err < 1e-6);
        let t = rel.translation().normalize();
        assert_relative_eq!(*est.pose.translation(), t, epsilon = 1e-6);
    }

    #[test]
    fn ransac_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (rel, mut pairs) = random_problem(&mut rng, 60);
        for _ in 0..40 {
            pairs.push(NormalizedPair::new(
                Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            ));
        }
        let params = RansacParams {
            inlier_threshold: 1e-6,
            ..Default::default()
        };
        let est = ransac_essential(&pairs, &params).unwrap();
        assert!(est.inlier_mask[..60].iter().all(|&m| m));
        assert!(est.inlier_mask[60..].iter().filter(|&&m| m).count() <= 1);
        let err = rotation_angle(&(est.pose.rotation() * rel.rotation().transpose()));
        assert!(err < 1e-6);
    }

    fn sampson_cost(pose: &Se3Pose, pairs: &[NormalizedPair]) -> f64 {
        let e = essential_of(pose);
        pairs.iter().map(|p| sampson_error(&e, &p.x1, &p.x2).unwrap()).sum()
    }

    #[test]
    fn refine_recovers_exact_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (rel, pairs) = random_problem(&mut rng, 50);
        let t = rel.translation().normalize();
        let start = Se3Pose::new(
            so3_exp(&Vec3::new(0.02, -0.03, 0.01)) * rel.rotation(),
            (t + Vec3::new(0.03, 0.02, -0.02)).normalize(),
        )
        .unwrap();
        let refined = refine_pose(&start, &pairs, 50);
        let err = rotation_angle(&(refined.rotation() * rel.rotation().transpose()));
        assert!(err < 1e-7, "rotation error {err}");
        assert_relative_eq!(*refined.translation(), t, epsilon = 1e-7);
    }

    #[test]
    fn refine_never_increases_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let (rel, mut pairs) = random_problem(&mut rng, 40);
            for p in pairs.iter_mut() {
                p.x2 += Vec2::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3));
            }
            let start = rel.with_translation(rel.translation().normalize());
            let refined = refine_pose(&start, &pairs, 30);
            assert!(sampson_cost(&refined, &pairs) <= sampson_cost(&start, &pairs));
            assert_relative_eq!(refined.translation().norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn guide_selects_and_gates_hypotheses() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (rel, pairs) = random_problem(&mut rng, 80);
        let near = PoseGuide {
            pose: Se3Pose::new(so3_exp(&Vec3::new(0.0, 0.05, 0.0)) * rel.rotation(), *rel.translation()).unwrap(),
            max_angle: 10.0,
        };
        let est = ransac_essential_guided(&pairs, &RansacParams::default(), Some(&near)).unwrap();
        assert_eq!(est.score, 80);
        assert!(rotation_angle(&(est.pose.rotation() * rel.rotation().transpose())) < 1e-6);
        assert_relative_eq!(*est.pose.translation(), rel.translation().normalize(), epsilon = 1e-6);

        let far = PoseGuide {
            pose: Se3Pose::new(so3_exp(&Vec3::new(0.0, 1.2, 0.0)) * rel.rotation(), *rel.translation()).unwrap(),
            max_angle: 5.0,
        };
        assert_eq!(
            ransac_essential_guided(&pairs, &RansacParams::default(), Some(&far)).unwrap_err(),
            PoseError::NoValidHypothesis
        );
    }

    #[test]
    fn guide_deviation_is_max_of_angles() {
        let guide = PoseGuide {
            pose: Se3Pose::new(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0)).unwrap(),
            max_angle: 1.0,
        };
        let rotated = Se3Pose::new(so3_exp(&Vec3::new(0.0, 0.0, 10f64.to_radians())), Vec3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(guide.deviation(&rotated), 10.0, epsilon = 1e-9);
        let turned = Se3Pose::new(Mat3::identity(), Vec3::new(1.0, 1.0, 0.0)).unwrap();
        assert_relative_eq!(guide.deviation(&turned), 45.0, epsilon = 1e-9);
    }

    #[test]
    fn ransac_is_deterministic_and_rejects_small_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (_, mut pairs) = random_problem(&mut rng, 40);
        for _ in 0..20 {
            pairs.push(NormalizedPair::new(
                Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            ));
        }
        let p = RansacParams { seed: 5, ..Default::default() };
        assert_eq!(ransac_essential(&pairs, &p), ransac_essential(&pairs, &p));
        assert!(matches!(
            ransac_essential(&pairs[..4], &p),
            Err(PoseError::InsufficientCorrespondences { got: 4, .. })
        ));
    }

    #[test]
    fn recover_pose_generating_pose_and_mirror() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (rel, pairs) = random_problem(&mut rng, 50);
        let e = essential_from_pose(&rel).unwrap();
        assert_eq!(decompose_essential(&e).unwrap().len(), 4);
        let pose = recover_pose(&e, &pairs).unwrap();
        assert!((pose.rotation() - rel.rotation()).norm() < 1e-9);
        assert_relative_eq!(*pose.translation(), rel.translation().normalize(), epsilon = 1e-9);

        // Points behind both cameras: the vote picks the sign-flipped baseline.
        let mut mirrored = Vec::new();
        while mirrored.len() < 50 {
            let x = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-8.0..-2.0),
            );
            let y = rel.transform(&x);
            if y.z > -0.5 {
                continue;
            }
            mirrored.push(NormalizedPair::new(
                Vec2::new(x.x / x.z, x.y / x.z),
                Vec2::new(y.x / y.z, y.y / y.z),
            ));
        }
        match recover_pose(&e, &mirrored) {
            Err(PoseError::AmbiguousCheirality { .. }) => {}
            Ok(p) => {
                assert!((p.rotation() - rel.rotation()).norm() < 1e-9);
                assert_relative_eq!(*p.translation(), -rel.translation().normalize(), epsilon = 1e-9);
            }
            Err(other) => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let (rel, _) = random_problem(&mut rng, 1);
        let points: Vec<Vec3> = (0..80)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(3.0..8.0),
                )
            })
            .collect();
        let solve = |s: f64| {
            let scaled = rel.with_translation(rel.translation() * s);
            let pairs: Vec<_> = points
                .iter()
                .map(|x| {
                    let xs = x * s;
                    let y = scaled.transform(&xs);
                    NormalizedPair::new(Vec2::new(xs.x / xs.z, xs.y / xs.z), Vec2::new(y.x / y.z, y.y / y.z))
                })
                .collect();
            ransac_essential(&pairs, &RansacParams::default()).unwrap().pose
        };
        let a = solve(1.0);
        let b = solve(7.5);
        assert!((a.rotation() - b.rotation()).norm() < 1e-9);
        assert!((a.translation() - b.translation()).norm() < 1e-9);
    }

    #[test]
    fn companion_roots() {
        // (z − 1)(z + 2)(z − 3) = z³ − 2z² − 5z + 6
        let mut r = real_roots(&[6.0, -5.0, -2.0, 1.0]);
        r.sort_by(f64::total_cmp);
        assert_relative_eq!(r[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(r[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r[2], 3.0, epsilon = 1e-12);
        // z² + 1 has no real roots.
        assert!(real_roots(&[1.0, 0.0, 1.0]).is_empty());
    }
}
