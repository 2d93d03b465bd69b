//! Line-oriented text formats and parameter files.
//!
//! Every file except the dense surface map starts with `vcsfm-<kind> v1`.
//! Blank lines and lines starting with `#` are ignored after the header.
//! Floats are written in shortest round-trip form, so emitted files parse
//! back to identical values.
//!
//! | kind       | record lines                                                   |
//! |------------|----------------------------------------------------------------|
//! | `manifest` | `image id fx fy cx cy skew width height`, then per subject `subject person map mesh`; `matches id_a id_b path`; `param key value` |
//! | (dsm)      | header `dsm width height`, then `u v face b0 b1 b2`            |
//! | `vcs`      | `img_a ua va img_b ub vb hit_rank`, casting image first         |
//! | `matches`  | `ua va ub vb`                                                  |
//! | `poses`    | `id qw qx qy qz tx ty tz`, world to camera                      |
//! | `report`   | `pose …`, `unregistered id`, `tracks total virtual classic`, `diag key value`, `pair i j rot trans combined`, `auc threshold value`, `curve error recall` |
//! | `ba`       | `mode hard|soft`, `soft_weight λ`, then `camera fixed fx fy cx cy skew r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz` per camera, then `track kind cam_a cam_b ua va ub vb x1x x1y x1z a b x2x x2y x2z` per track |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::ba::{BaCamera, BaMode, BaProblem, TrackKind, VcTrack};
use crate::geometry::{CameraIntrinsics, Mat3, Pixel, Se3Pose, Vec3};
use crate::mesh::{format_mesh, load_mesh, MeshError, SurfaceCoordinate};
use crate::pipeline::{ClassicMatches, SfmInput, SfmParams, SfmResult};
use crate::synth::{
    classic_matches, MeshSource, NoiseConfig, PairError, PoseErrorReport, SceneConfig, SyntheticScene,
};
use crate::vc::{DenseSurfaceMap, ImageRecord, SubjectPrior, VcSource, VirtualCorrespondence};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid {field}: {message}")]
    InvariantViolation { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IoError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        IoError::InvariantViolation {
            field: field.into(),
            message: message.into(),
        }
    }

    fn in_file(self, path: &Path) -> Self {
        match self {
            IoError::Parse {
                line,
                column,
                message,
                ..
            } => IoError::Parse {
                file: path.display().to_string(),
                line,
                column,
                message,
            },
            other => other,
        }
    }
}

fn read(path: &Path) -> Result<String, IoError> {
    if !path.is_file() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

fn write(path: &Path, text: &str) -> Result<(), IoError> {
    Ok(std::fs::write(path, text)?)
}

/// One significant input line, split into whitespace tokens with 1-based columns.
struct Line<'a> {
    no: usize,
    text: &'a str,
    tokens: Vec<(usize, &'a str)>,
    next: usize,
}

impl<'a> Line<'a> {
    fn new(no: usize, text: &'a str) -> Self {
        let base = text.as_ptr() as usize;
        let tokens = text
            .split_whitespace()
            .map(|t| (t.as_ptr() as usize - base + 1, t))
            .collect();
        Self {
            no,
            text,
            tokens,
            next: 0,
        }
    }

    fn error(&self, column: usize, message: impl Into<String>) -> IoError {
        IoError::Parse {
            file: "<input>".into(),
            line: self.no,
            column,
            message: message.into(),
        }
    }

    fn end_column(&self) -> usize {
        self.text.trim_end().len() + 1
    }

    fn word(&mut self, what: &str) -> Result<(usize, &'a str), IoError> {
        let tok = self
            .tokens
            .get(self.next)
            .copied()
            .ok_or_else(|| self.error(self.end_column(), format!("expected {what}")))?;
        self.next += 1;
        Ok(tok)
    }

    fn value<T: FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let (col, tok) = self.word(what)?;
        tok.parse()
            .map_err(|_| self.error(col, format!("bad {what} `{tok}`")))
    }

    fn float(&mut self, what: &str) -> Result<f64, IoError> {
        let (col, tok) = self.word(what)?;
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.error(col, format!("bad {what} `{tok}`"))),
        }
    }

    fn vec3(&mut self, what: &str) -> Result<Vec3, IoError> {
        Ok(Vec3::new(self.float(what)?, self.float(what)?, self.float(what)?))
    }

    fn pixel(&mut self) -> Result<Pixel, IoError> {
        Ok(Pixel::new(self.float("pixel u")?, self.float("pixel v")?))
    }

    /// Everything after the consumed tokens, trimmed.
    fn rest(&mut self) -> &'a str {
        let out = match self.tokens.get(self.next) {
            Some((col, _)) => self.text[col - 1..].trim_end(),
            None => "",
        };
        self.next = self.tokens.len();
        out
    }

    fn done(&self) -> Result<(), IoError> {
        match self.tokens.get(self.next) {
            Some((col, tok)) => Err(self.error(*col, format!("unexpected `{tok}`"))),
            None => Ok(()),
        }
    }
}

/// Significant lines after a `vcsfm-<kind> v1` header.
fn body<'a>(text: &'a str, kind: &str) -> Result<Vec<Line<'a>>, IoError> {
    let mut lines = significant(text);
    let header = format!("vcsfm-{kind} v1");
    match lines.first() {
        Some(first) if first.text.trim() == header => {
            lines.remove(0);
            Ok(lines)
        }
        Some(first) => Err(first.error(1, format!("expected header `{header}`"))),
        None => Err(IoError::Parse {
            file: "<input>".into(),
            line: 1,
            column: 1,
            message: format!("expected header `{header}`"),
        }),
    }
}

fn significant(text: &str) -> Vec<Line<'_>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(n, l)| Line::new(n + 1, l))
        .collect()
}

fn check_id(line: &Line, col: usize, id: &str) -> Result<(), IoError> {
    if id.starts_with('#') {
        return Err(line.error(col, "identifiers cannot start with `#`"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense surface maps

pub fn format_surface_map(map: &DenseSurfaceMap) -> String {
    let mut out = format!("dsm {} {}\n", map.width(), map.height());
    for (u, v, c) in map.mapped() {
        let _ = writeln!(out, "{u} {v} {} {} {} {}", c.face, c.bary[0], c.bary[1], c.bary[2]);
    }
    out
}

pub fn parse_surface_map(text: &str) -> Result<DenseSurfaceMap, IoError> {
    let mut lines = significant(text).into_iter();
    let mut head = lines.next().ok_or_else(|| IoError::Parse {
        file: "<input>".into(),
        line: 1,
        column: 1,
        message: "expected `dsm <width> <height>`".into(),
    })?;
    let (col, tag) = head.word("`dsm`")?;
    if tag != "dsm" {
        return Err(head.error(col, "expected `dsm <width> <height>`"));
    }
    let w: usize = head.value("width")?;
    let h: usize = head.value("height")?;
    head.done()?;
    let mut map = DenseSurfaceMap::new(w, h);
    for mut line in lines {
        let (cu, u) = (line.tokens.first().map_or(1, |t| t.0), line.value::<usize>("u")?);
        let v: usize = line.value("v")?;
        let face: usize = line.value("face")?;
        let bcol = line.tokens.get(line.next).map_or(1, |t| t.0);
        let bary = [line.float("b0")?, line.float("b1")?, line.float("b2")?];
        line.done()?;
        if u >= w || v >= h {
            return Err(line.error(cu, format!("pixel ({u}, {v}) outside {w}×{h}")));
        }
        if map.get(u, v).is_some() {
            return Err(line.error(cu, format!("pixel ({u}, {v}) listed twice")));
        }
        let c = SurfaceCoordinate::new(face, bary).map_err(|e| line.error(bcol, e.to_string()))?;
        map.set(u, v, Some(c));
    }
    Ok(map)
}

pub fn load_surface_map(path: &Path) -> Result<DenseSurfaceMap, IoError> {
    parse_surface_map(&read(path)?).map_err(|e| e.in_file(path))
}

// ---------------------------------------------------------------------------
// Virtual correspondence files

/// One VC as stored on disk: the casting image comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct VcEntry {
    pub caster: String,
    pub caster_pixel: Pixel,
    pub observer: String,
    pub observer_pixel: Pixel,
    pub hit_rank: usize,
}

impl VcEntry {
    /// Entry for a VC between images `id_a` and `id_b`.
    pub fn from_vc(id_a: &str, id_b: &str, vc: &VirtualCorrespondence) -> Self {
        let (caster, cp, observer, op) = match vc.source {
            VcSource::A => (id_a, vc.pixel_a, id_b, vc.pixel_b),
            VcSource::B => (id_b, vc.pixel_b, id_a, vc.pixel_a),
        };
        Self {
            caster: caster.into(),
            caster_pixel: cp,
            observer: observer.into(),
            observer_pixel: op,
            hit_rank: vc.hit_rank,
        }
    }

    /// The VC seen from the pair `(id_a, id_b)`; `None` for other pairs.
    pub fn to_vc(&self, id_a: &str, id_b: &str) -> Option<VirtualCorrespondence> {
        let (pixel_a, pixel_b, source) = if (self.caster.as_str(), self.observer.as_str()) == (id_a, id_b) {
            (self.caster_pixel, self.observer_pixel, VcSource::A)
        } else if (self.caster.as_str(), self.observer.as_str()) == (id_b, id_a) {
            (self.observer_pixel, self.caster_pixel, VcSource::B)
        } else {
            return None;
        };
        Some(VirtualCorrespondence {
            pixel_a,
            pixel_b,
            coord: None,
            hit_rank: self.hit_rank,
            source,
        })
    }
}

pub fn format_vcs(entries: &[VcEntry]) -> String {
    let mut out = String::from("vcsfm-vcs v1\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            e.caster, e.caster_pixel.u, e.caster_pixel.v, e.observer, e.observer_pixel.u, e.observer_pixel.v, e.hit_rank
        );
    }
    out
}

pub fn parse_vcs(text: &str) -> Result<Vec<VcEntry>, IoError> {
    let mut out = Vec::new();
    for mut line in body(text, "vcs")? {
        let (c1, caster) = line.word("image id")?;
        check_id(&line, c1, caster)?;
        let caster_pixel = line.pixel()?;
        let (c2, observer) = line.word("image id")?;
        check_id(&line, c2, observer)?;
        let observer_pixel = line.pixel()?;
        let hit_rank = line.value("hit rank")?;
        line.done()?;
        out.push(VcEntry {
            caster: caster.into(),
            caster_pixel,
            observer: observer.into(),
            observer_pixel,
            hit_rank,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Classic match files

pub fn format_matches(pairs: &[(Pixel, Pixel)]) -> String {
    let mut out = String::from("vcsfm-matches v1\n");
    for (p, q) in pairs {
        let _ = writeln!(out, "{} {} {} {}", p.u, p.v, q.u, q.v);
    }
    out
}

pub fn parse_matches(text: &str) -> Result<Vec<(Pixel, Pixel)>, IoError> {
    let mut out = Vec::new();
    for mut line in body(text, "matches")? {
        let p = line.pixel()?;
        let q = line.pixel()?;
        line.done()?;
        out.push((p, q));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Poses

/// A world-to-camera pose as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEntry {
    pub id: String,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl PoseEntry {
    /// Quaternion sign is chosen with `w ≥ 0`.
    pub fn new(id: impl Into<String>, pose: &Se3Pose) -> Self {
        let q = pose.quaternion();
        let q = if q.w < 0.0 { UnitQuaternion::new_unchecked(-q.into_inner()) } else { q };
        Self {
            id: id.into(),
            rotation: q,
            translation: *pose.translation(),
        }
    }

    pub fn pose(&self) -> Se3Pose {
        Se3Pose::from_quaternion(&self.rotation, self.translation)
    }
}

fn write_pose_fields(out: &mut String, p: &PoseEntry) {
    let q = p.rotation.quaternion();
    let t = p.translation;
    let _ = write!(out, "{} {} {} {} {} {} {} {}", p.id, q.w, q.i, q.j, q.k, t.x, t.y, t.z);
}

fn read_pose_fields(line: &mut Line) -> Result<PoseEntry, IoError> {
    let (col, id) = line.word("image id")?;
    check_id(line, col, id)?;
    let qcol = line.tokens.get(line.next).map_or(1, |t| t.0);
    let (w, x, y, z) = (
        line.float("qw")?,
        line.float("qx")?,
        line.float("qy")?,
        line.float("qz")?,
    );
    let q = Quaternion::new(w, x, y, z);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(line.error(qcol, format!("quaternion norm {} is not 1", q.norm())));
    }
    let translation = line.vec3("translation")?;
    Ok(PoseEntry {
        id: id.into(),
        rotation: UnitQuaternion::new_unchecked(q),
        translation,
    })
}

pub fn format_poses(poses: &[PoseEntry]) -> String {
    let mut out = String::from("vcsfm-poses v1\n");
    for p in poses {
        write_pose_fields(&mut out, p);
        out.push('\n');
    }
    out
}

pub fn parse_poses(text: &str) -> Result<Vec<PoseEntry>, IoError> {
    let mut out: Vec<PoseEntry> = Vec::new();
    let mut seen = HashSet::new();
    for mut line in body(text, "poses")? {
        let col = line.tokens[0].0;
        let p = read_pose_fields(&mut line)?;
        line.done()?;
        if !seen.insert(p.id.clone()) {
            return Err(line.error(col, format!("pose for `{}` listed twice", p.id)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseEntry>, IoError> {
    parse_poses(&read(path)?).map_err(|e| e.in_file(path))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrackSummary {
    pub total: usize,
    pub virtual_tracks: usize,
    pub classic: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub poses: Vec<PoseEntry>,
    pub unregistered: Vec<String>,
    pub tracks: TrackSummary,
    /// Key and single-line value; wall times are left out so that reports
    /// are reproducible.
    pub diagnostics: Vec<(String, String)>,
    pub metrics: Option<PoseErrorReport>,
    /// `(error°, recall)` corners of the cumulative error curve.
    pub curve: Vec<(f64, f64)>,
}

impl Report {
    pub fn from_result(ids: &[String], result: &SfmResult) -> Self {
        let mut poses = Vec::new();
        let mut unregistered = Vec::new();
        for (id, pose) in ids.iter().zip(&result.poses) {
            match pose {
                Some(p) => poses.push(PoseEntry::new(id.clone(), p)),
                None => unregistered.push(id.clone()),
            }
        }
        let virtual_tracks = result.tracks.iter().filter(|t| t.kind == TrackKind::Virtual).count();
        let d = &result.diagnostics;
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut diagnostics = vec![
            ("vcs_extracted".to_string(), d.vcs_extracted.to_string()),
            ("classic_matches".into(), d.classic_matches.to_string()),
            ("inliers".into(), d.inliers.to_string()),
            ("dropped_tracks".into(), d.dropped_tracks.to_string()),
            ("initial_objective".into(), opt(d.initial_objective)),
            ("final_objective".into(), opt(d.final_objective)),
            (
                "termination".into(),
                d.termination.map_or("none".to_string(), |t| format!("{t:?}")),
            ),
            ("degenerate".into(), d.degenerate.to_string()),
            (
                "seed_pair".into(),
                d.seed_pair.map_or("none".to_string(), |(a, b)| {
                    format!("{} {}", ids.get(a).map_or("?", |s| s), ids.get(b).map_or("?", |s| s))
                }),
            ),
        ];
        for f in &d.failures {
            let reason = f.reason.split_whitespace().collect::<Vec<_>>().join(" ");
            diagnostics.push((
                format!("failure:{}", ids.get(f.image).map_or("?", |s| s)),
                reason,
            ));
        }
        Self {
            poses,
            unregistered,
            tracks: TrackSummary {
                total: result.tracks.len(),
                virtual_tracks,
                classic: result.tracks.len() - virtual_tracks,
            },
            diagnostics,
            metrics: None,
            curve: Vec::new(),
        }
    }

    /// Attaches an error report and its cumulative curve.
    pub fn with_metrics(mut self, metrics: PoseErrorReport) -> Self {
        self.curve = metrics.curve();
        self.metrics = Some(metrics);
        self
    }
}

pub fn format_report(r: &Report) -> String {
    let mut out = String::from("vcsfm-report v1\n");
    for p in &r.poses {
        out.push_str("pose ");
        write_pose_fields(&mut out, p);
        out.push('\n');
    }
    for id in &r.unregistered {
        let _ = writeln!(out, "unregistered {id}");
    }
    let t = r.tracks;
    let _ = writeln!(out, "tracks {} {} {}", t.total, t.virtual_tracks, t.classic);
    for (k, v) in &r.diagnostics {
        let _ = writeln!(out, "diag {k} {v}");
    }
    if let Some(m) = &r.metrics {
        let _ = writeln!(out, "metrics {}", m.pairs.len());
        for p in &m.pairs {
            let tr = p.translation.map_or("-".to_string(), |x| x.to_string());
            let _ = writeln!(out, "pair {} {} {} {} {}", p.i, p.j, p.rotation, tr, p.combined);
        }
        for (th, v) in &m.auc {
            let _ = writeln!(out, "auc {th} {v}");
        }
    }
    for (e, r) in &r.curve {
        let _ = writeln!(out, "curve {e} {r}");
    }
    out
}

pub fn parse_report(text: &str) -> Result<Report, IoError> {
    let mut r = Report::default();
    let mut tracks_seen = false;
    for mut line in body(text, "report")? {
        let (col, tag) = line.word("record")?;
        match tag {
            "pose" => r.poses.push(read_pose_fields(&mut line)?),
            "unregistered" => r.unregistered.push(line.word("image id")?.1.into()),
            "tracks" => {
                r.tracks = TrackSummary {
                    total: line.value("track count")?,
                    virtual_tracks: line.value("virtual count")?,
                    classic: line.value("classic count")?,
                };
                if r.tracks.total != r.tracks.virtual_tracks + r.tracks.classic {
                    return Err(line.error(col, "track counts do not add up"));
                }
                tracks_seen = true;
            }
            "diag" => {
                let key = line.word("key")?.1.to_string();
                r.diagnostics.push((key, line.rest().to_string()));
            }
            "metrics" => {
                let _: usize = line.value("pair count")?;
                r.metrics.get_or_insert_with(|| PoseErrorReport {
                    pairs: Vec::new(),
                    auc: Vec::new(),
                });
            }
            "pair" => {
                let i = line.value("i")?;
                let j = line.value("j")?;
                let rotation = line.float("rotation error")?;
                let translation = match line.word("translation error")? {
                    (_, "-") => None,
                    (c, t) => Some(t.parse::<f64>().map_err(|_| line.error(c, format!("bad translation error `{t}`")))?),
                };
                let combined = line.float("combined error")?;
                let m = r.metrics.as_mut().ok_or_else(|| line.error(col, "`pair` before `metrics`"))?;
                m.pairs.push(PairError {
                    i,
                    j,
                    rotation,
                    translation,
                    combined,
                });
            }
            "auc" => {
                let th = line.float("threshold")?;
                let v = line.float("auc")?;
                let m = r.metrics.as_mut().ok_or_else(|| line.error(col, "`auc` before `metrics`"))?;
                m.auc.push((th, v));
            }
            "curve" => r.curve.push((line.float("error")?, line.float("recall")?)),
            other => return Err(line.error(col, format!("unknown record `{other}`"))),
        }
        line.done()?;
    }
    if !tracks_seen {
        return Err(IoError::invalid("report", "missing `tracks` line"));
    }
    if let Some(m) = &r.metrics {
        if let Some(w) = m.auc.windows(2).find(|w| w[1].1 < w[0].1 || w[1].0 <= w[0].0) {
            return Err(IoError::invalid("auc", format!("not monotone at threshold {}", w[1].0)));
        }
    }
    if r.curve.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
        return Err(IoError::invalid("curve", "must be non-decreasing"));
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Bundle adjustment problems

pub fn format_ba_problem(p: &BaProblem) -> String {
    let mut out = String::from("vcsfm-ba v1\n");
    let mode = match p.mode {
        BaMode::Hard => "hard",
        BaMode::Soft => "soft",
    };
    let _ = writeln!(out, "mode {mode}");
    let _ = writeln!(out, "soft_weight {}", p.soft_weight);
    for c in &p.cameras {
        let k = &c.intrinsics;
        let r = c.pose.rotation();
        let t = c.pose.translation();
        let _ = write!(out, "camera {} {} {} {} {} {}", u8::from(c.fixed), k.fx, k.fy, k.cx, k.cy, k.skew);
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(out, " {}", r[(i, j)]);
            }
        }
        let _ = writeln!(out, " {} {} {}", t.x, t.y, t.z);
    }
    for t in &p.tracks {
        let kind = match t.kind {
            TrackKind::Virtual => "virtual",
            TrackKind::Classic => "classic",
        };
        let _ = writeln!(
            out,
            "track {kind} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            t.cam_a, t.cam_b, t.obs_a.u, t.obs_a.v, t.obs_b.u, t.obs_b.v, t.x1.x, t.x1.y, t.x1.z, t.a, t.b, t.x2.x, t.x2.y, t.x2.z
        );
    }
    out
}

pub fn parse_ba_problem(text: &str) -> Result<BaProblem, IoError> {
    let mut mode = None;
    let mut soft_weight = None;
    let mut cameras = Vec::new();
    let mut tracks = Vec::new();
    for mut line in body(text, "ba")? {
        let (col, tag) = line.word("record")?;
        match tag {
            "mode" => {
                mode = Some(match line.word("mode")? {
                    (_, "hard") => BaMode::Hard,
                    (_, "soft") => BaMode::Soft,
                    (c, m) => return Err(line.error(c, format!("unknown mode `{m}`"))),
                })
            }
            "soft_weight" => soft_weight = Some(line.float("soft weight")?),
            "camera" => {
                let fixed = match line.word("fixed flag")? {
                    (_, "0") => false,
                    (_, "1") => true,
                    (c, f) => return Err(line.error(c, format!("fixed flag must be 0 or 1, got `{f}`"))),
                };
                let kcol = line.tokens.get(line.next).map_or(1, |t| t.0);
                let (fx, fy, cx, cy, skew) = (
                    line.float("fx")?,
                    line.float("fy")?,
                    line.float("cx")?,
                    line.float("cy")?,
                    line.float("skew")?,
                );
                let intrinsics =
                    CameraIntrinsics::new(fx, fy, cx, cy, skew).map_err(|e| line.error(kcol, e.to_string()))?;
                let rcol = line.tokens.get(line.next).map_or(1, |t| t.0);
                let mut r = Mat3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        r[(i, j)] = line.float("rotation entry")?;
                    }
                }
                let t = line.vec3("translation")?;
                let pose = Se3Pose::new(r, t).map_err(|e| line.error(rcol, e.to_string()))?;
                cameras.push(BaCamera {
                    pose,
                    intrinsics,
                    fixed,
                });
            }
            "track" => {
                let kind = match line.word("track kind")? {
                    (_, "virtual") => TrackKind::Virtual,
                    (_, "classic") => TrackKind::Classic,
                    (c, k) => return Err(line.error(c, format!("unknown track kind `{k}`"))),
                };
                tracks.push(VcTrack {
                    cam_a: line.value("camera index")?,
                    cam_b: line.value("camera index")?,
                    obs_a: line.pixel()?,
                    obs_b: line.pixel()?,
                    x1: line.vec3("first point")?,
                    a: line.float("a")?,
                    b: line.float("b")?,
                    x2: line.vec3("second point")?,
                    kind,
                });
            }
            other => return Err(line.error(col, format!("unknown record `{other}`"))),
        }
        line.done()?;
    }
    let mode = mode.ok_or_else(|| IoError::invalid("mode", "missing"))?;
    let mut problem = BaProblem::new(cameras, tracks, mode).map_err(|e| IoError::invalid("problem", e.to_string()))?;
    if let Some(w) = soft_weight {
        problem.soft_weight = w;
    }
    problem
        .validate()
        .map_err(|e| IoError::invalid("problem", e.to_string()))?;
    Ok(problem)
}

// ---------------------------------------------------------------------------
// Parameter files

/// `key = value` lines; `#` starts a comment. Later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, IoError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let err = |column: usize, message: &str| IoError::Parse {
            file: "<input>".into(),
            line: n + 1,
            column,
            message: message.into(),
        };
        let Some(eq) = line.find('=') else {
            return Err(err(line.len() - line.trim_start().len() + 1, "expected `key = value`"));
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(err(1, "bad key"));
        }
        if value.is_empty() {
            return Err(err(eq + 2, "missing value"));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>, IoError> {
    parse_config(&read(path)?).map_err(|e| e.in_file(path))
}

/// Everything a `--config` file may set.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub sfm: SfmParams,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, IoError> {
    value
        .parse()
        .map_err(|_| IoError::invalid(key, format!("cannot parse `{value}`")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>, IoError> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

pub fn parse_mode(value: &str) -> Result<BaMode, IoError> {
    match value {
        "hard" => Ok(BaMode::Hard),
        "soft" => Ok(BaMode::Soft),
        _ => Err(IoError::invalid("mode", format!("expected hard or soft, got `{value}`"))),
    }
}

/// Sets one pipeline parameter. Returns `Ok(false)` for keys it does not know.
pub fn apply_sfm_param(p: &mut SfmParams, key: &str, value: &str) -> Result<bool, IoError> {
    let v = value;
    match key {
        "stride" => p.extraction.stride = parse_value(key, v)?,
        "match_tolerance" => p.extraction.match_tolerance = parse_value(key, v)?,
        "max_hits_per_pixel" => p.extraction.max_hits_per_pixel = parse_value(key, v)?,
        "subpixel" => p.extraction.subpixel = parse_value(key, v)?,
        "min_neighbor_support" => p.extraction.min_neighbor_support = parse_value(key, v)?,
        "coherence_radius" => p.extraction.coherence_radius = parse_value(key, v)?,
        "inlier_threshold" => p.ransac.inlier_threshold = parse_value(key, v)?,
        "ransac_max_iterations" => p.ransac.max_iterations = parse_value(key, v)?,
        "confidence" => p.ransac.confidence = parse_value(key, v)?,
        "ransac_seed" => p.ransac.seed = parse_value(key, v)?,
        "refine_rounds" => p.ransac.refine_rounds = parse_value(key, v)?,
        "ba_max_iterations" => p.ba.max_iterations = parse_value(key, v)?,
        "gradient_tolerance" => p.ba.gradient_tolerance = parse_value(key, v)?,
        "step_tolerance" => p.ba.step_tolerance = parse_value(key, v)?,
        "history_size" => p.ba.history_size = parse_value(key, v)?,
        "huber_width" => p.ba.huber_width = parse_optional(key, v)?,
        "mode" => p.mode = parse_mode(v)?,
        "soft_weight" => p.soft_weight = parse_value(key, v)?,
        "use_vcs" => p.use_vcs = parse_value(key, v)?,
        "min_inliers" => p.min_inliers = parse_value(key, v)?,
        "max_tracks_per_pair" => p.max_tracks_per_pair = parse_value(key, v)?,
        "refine" => p.refine = parse_value(key, v)?,
        "prior_gate" => p.prior_gate = parse_optional(key, v)?,
        "max_lift_residual" => p.max_lift_residual = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl Settings {
    /// Applies `entries` in order; unknown keys are an error.
    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<(), IoError> {
        for (key, v) in entries {
            let key = key.as_str();
            if apply_sfm_param(&mut self.sfm, key, v)? {
                continue;
            }
            let (s, n) = (&mut self.scene, &mut self.noise);
            match key {
                "mesh" => {
                    s.mesh = if v == "builtin" {
                        MeshSource::Builtin
                    } else {
                        MeshSource::File(PathBuf::from(v))
                    }
                }
                "angles" => {
                    s.angles = v
                        .split(',')
                        .map(|a| parse_value(key, a.trim()))
                        .collect::<Result<_, _>>()?
                }
                "elevation_min" => s.elevation.0 = parse_value(key, v)?,
                "elevation_max" => s.elevation.1 = parse_value(key, v)?,
                "width" => s.width = parse_value(key, v)?,
                "height" => s.height = parse_value(key, v)?,
                "focal" => s.focal = parse_value(key, v)?,
                "distance" => s.distance = parse_value(key, v)?,
                "seed" => s.seed = parse_value(key, v)?,
                "pixel_sigma" => n.pixel_sigma = parse_value(key, v)?,
                "prior_rotation_sigma" => n.prior_rotation_sigma = parse_value(key, v)?,
                "prior_translation_sigma" => n.prior_translation_sigma = parse_value(key, v)?,
                "prior_scale_sigma" => n.prior_scale_sigma = parse_value(key, v)?,
                "outlier_fraction" => n.outlier_fraction = parse_value(key, v)?,
                _ => return Err(IoError::invalid(key, "unknown parameter")),
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestSubject {
    pub person: String,
    pub surface_map: PathBuf,
    pub mesh: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestImage {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestMatches {
    pub a: String,
    pub b: String,
    pub path: PathBuf,
}

/// Manifest contents as written; paths are relative to the manifest file
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub images: Vec<ManifestImage>,
    pub matches: Vec<ManifestMatches>,
    pub params: Vec<(String, String)>,
}

fn path_token(p: &Path) -> Result<String, IoError> {
    let s = p.to_string_lossy().to_string();
    if s.is_empty() || s.contains(char::is_whitespace) {
        return Err(IoError::invalid("path", format!("`{s}` must be non-empty without whitespace")));
    }
    Ok(s)
}

pub fn format_manifest(m: &Manifest) -> Result<String, IoError> {
    let mut out = String::from("vcsfm-manifest v1\n");
    for img in &m.images {
        let k = &img.intrinsics;
        let _ = writeln!(
            out,
            "image {} {} {} {} {} {} {} {}",
            img.id, k.fx, k.fy, k.cx, k.cy, k.skew, img.width, img.height
        );
        for s in &img.subjects {
            let _ = writeln!(out, "subject {} {} {}", s.person, path_token(&s.surface_map)?, path_token(&s.mesh)?);
        }
    }
    for mm in &m.matches {
        let _ = writeln!(out, "matches {} {} {}", mm.a, mm.b, path_token(&mm.path)?);
    }
    for (k, v) in &m.params {
        let _ = writeln!(out, "param {k} {v}");
    }
    Ok(out)
}

/// Syntax and identifier checks only; referenced files are not touched.
pub fn parse_manifest(text: &str) -> Result<Manifest, IoError> {
    let mut m = Manifest::default();
    let mut ids = HashSet::new();
    for mut line in body(text, "manifest")? {
        let (col, tag) = line.word("record")?;
        match tag {
            "image" => {
                let (c, id) = line.word("image id")?;
                check_id(&line, c, id)?;
                if !ids.insert(id.to_string()) {
                    return Err(line.error(c, format!("duplicate image id `{id}`")));
                }
                let kcol = line.tokens.get(line.next).map_or(1, |t| t.0);
                let (fx, fy, cx, cy, skew) = (
                    line.float("fx")?,
                    line.float("fy")?,
                    line.float("cx")?,
                    line.float("cy")?,
                    line.float("skew")?,
                );
                let intrinsics =
                    CameraIntrinsics::new(fx, fy, cx, cy, skew).map_err(|e| line.error(kcol, e.to_string()))?;
                m.images.push(ManifestImage {
                    id: id.into(),
                    intrinsics,
                    width: line.value("width")?,
                    height: line.value("height")?,
                    subjects: Vec::new(),
                });
            }
            "subject" => {
                let person = line.word("person id")?.1.to_string();
                let surface_map = PathBuf::from(line.word("surface map path")?.1);
                let mesh = PathBuf::from(line.word("mesh path")?.1);
                let img = m
                    .images
                    .last_mut()
                    .ok_or_else(|| line.error(col, "`subject` before any `image`"))?;
                if img.subjects.iter().any(|s| s.person == person) {
                    return Err(line.error(col, format!("person `{person}` listed twice for `{}`", img.id)));
                }
                img.subjects.push(ManifestSubject {
                    person,
                    surface_map,
                    mesh,
                });
            }
            "matches" => {
                let a = line.word("image id")?.1.to_string();
                let b = line.word("image id")?.1.to_string();
                let path = PathBuf::from(line.word("match file path")?.1);
                m.matches.push(ManifestMatches { a, b, path });
            }
            "param" => {
                let key = line.word("parameter name")?.1.to_string();
                let value = line.word("parameter value")?.1.to_string();
                m.params.push((key, value));
            }
            other => return Err(line.error(col, format!("unknown record `{other}`"))),
        }
        line.done()?;
    }
    for mm in &m.matches {
        for id in [&mm.a, &mm.b] {
            if !ids.contains(id) {
                return Err(IoError::invalid("matches", format!("unknown image `{id}`")));
            }
        }
    }
    if m.images.is_empty() {
        return Err(IoError::invalid("images", "manifest lists no image"));
    }
    Ok(m)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_mesh_file(path: &Path) -> Result<crate::mesh::TriangleMesh, IoError> {
    if !path.is_file() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    load_mesh(path).map_err(|e| match e {
        MeshError::Parse { line, message } => IoError::Parse {
            file: path.display().to_string(),
            line,
            column: 1,
            message,
        },
        other => IoError::invalid(format!("mesh {}", path.display()), other.to_string()),
    })
}

/// Loads a manifest and everything it references into a validated input.
/// Manifest `param` lines are applied on top of `params`.
pub fn load_manifest_with(path: &Path, params: SfmParams) -> Result<(SfmInput, Vec<String>), IoError> {
    let m = parse_manifest(&read(path)?).map_err(|e| e.in_file(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut params = params;
    for (k, v) in &m.params {
        if !apply_sfm_param(&mut params, k, v)? {
            return Err(IoError::invalid(k.as_str(), "unknown parameter"));
        }
    }
    let mut records = Vec::new();
    for img in &m.images {
        let mut subjects = Vec::new();
        for s in &img.subjects {
            let map = load_surface_map(&resolve(base, &s.surface_map))?;
            let mesh = load_mesh_file(&resolve(base, &s.mesh))?;
            subjects.push(SubjectPrior::new(s.person.clone(), map, mesh));
        }
        let record = ImageRecord::new(img.id.clone(), img.intrinsics, img.width, img.height, subjects)
            .map_err(|e| IoError::invalid(format!("image {}", img.id), e.to_string()))?;
        records.push(record);
    }
    let ids: Vec<String> = m.images.iter().map(|i| i.id.clone()).collect();
    let index = |id: &str| ids.iter().position(|x| x == id).expect("checked ids");
    let mut classic = Vec::new();
    for mm in &m.matches {
        let file = resolve(base, &mm.path);
        let pairs = parse_matches(&read(&file)?).map_err(|e| e.in_file(&file))?;
        classic.push(ClassicMatches {
            a: index(&mm.a),
            b: index(&mm.b),
            pairs,
        });
    }
    let input = SfmInput::new(records, classic, params).map_err(|e| IoError::invalid("input", e.to_string()))?;
    Ok((input, ids))
}

pub fn load_manifest(path: &Path) -> Result<SfmInput, IoError> {
    load_manifest_with(path, SfmParams::default()).map(|(input, _)| input)
}

// ---------------------------------------------------------------------------
// Scene bundles

/// Files written for a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub manifest: PathBuf,
    pub gt_poses: PathBuf,
}

pub fn image_id(i: usize) -> String {
    format!("img{i}")
}

/// Writes maps, prior meshes, classic matches (pairs with any), the
/// manifest and the ground-truth poses of `scene` into `dir`.
pub fn write_scene_bundle(dir: &Path, scene: &SyntheticScene, match_stride: usize) -> Result<SceneBundle, IoError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (i, rec) in scene.records.iter().enumerate() {
        let id = image_id(i);
        let mut subjects = Vec::new();
        for s in &rec.subjects {
            let map = PathBuf::from(format!("{id}_{}.dsm", s.person));
            let mesh = PathBuf::from(format!("{id}_{}.obj", s.person));
            write(&dir.join(&map), &format_surface_map(&s.surface_map))?;
            write(&dir.join(&mesh), &format_mesh(&s.mesh))?;
            subjects.push(ManifestSubject {
                person: s.person.clone(),
                surface_map: map,
                mesh,
            });
        }
        manifest.images.push(ManifestImage {
            id,
            intrinsics: rec.intrinsics,
            width: rec.width,
            height: rec.height,
            subjects,
        });
    }
    let n = scene.records.len();
    for i in 0..n {
        for j in i + 1..n {
            let pairs = classic_matches(scene, i, j, match_stride);
            if pairs.is_empty() {
                continue;
            }
            let path = PathBuf::from(format!("matches_{i}_{j}.txt"));
            write(&dir.join(&path), &format_matches(&pairs))?;
            manifest.matches.push(ManifestMatches {
                a: image_id(i),
                b: image_id(j),
                path,
            });
        }
    }
    let manifest_path = dir.join("manifest.txt");
    write(&manifest_path, &format_manifest(&manifest)?)?;
    let poses: Vec<PoseEntry> = scene
        .gt_poses
        .iter()
        .enumerate()
        .map(|(i, p)| PoseEntry::new(image_id(i), p))
        .collect();
    let gt_path = dir.join("gt_poses.txt");
    write(&gt_path, &format_poses(&poses))?;
    Ok(SceneBundle {
        manifest: manifest_path,
        gt_poses: gt_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ba::BaConfig;
    use crate::geometry::so3_exp;
    use crate::synth::{generate_scene, PairError};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Se3Pose {
        let w = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        Se3Pose::new(so3_exp(&w), t).unwrap()
    }

    fn parse_error_at(e: IoError) -> (usize, usize) {
        match e {
            IoError::Parse { line, column, .. } => (line, column),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn surface_map_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut map = DenseSurfaceMap::new(7, 5);
        for _ in 0..20 {
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            let (s, t) = (s.min(t), s.max(t));
            let c = SurfaceCoordinate::new(rng.random_range(0..50), [s, t - s, 1.0 - t]).unwrap();
            map.set(rng.random_range(0..7), rng.random_range(0..5), Some(c));
        }
        let text = format_surface_map(&map);
        assert!(text.starts_with("dsm 7 5\n"));
        assert_eq!(parse_surface_map(&text).unwrap(), map);
    }

    #[test]
    fn surface_map_errors_point_at_the_token() {
        let text = "dsm 4 4\n1 1 0 0.5 0.5 0\n9 1 0 0.5 0.5 0\n";
        assert_eq!(parse_error_at(parse_surface_map(text).unwrap_err()), (3, 1));
        let text = "dsm 4 4\n1 1 0 0.5 x 0\n";
        assert_eq!(parse_error_at(parse_surface_map(text).unwrap_err()), (2, 11));
        let text = "dsm 4 4\n1 1 0 0.5 0.7 0\n";
        assert_eq!(parse_error_at(parse_surface_map(text).unwrap_err()), (2, 7));
    }

    #[test]
    fn vc_entries_round_trip_and_keep_orientation() {
        let vc = VirtualCorrespondence {
            pixel_a: Pixel::new(1.5, 2.25),
            pixel_b: Pixel::new(30.0, 4.125),
            coord: None,
            hit_rank: 1,
            source: VcSource::B,
        };
        let e = VcEntry::from_vc("left", "right", &vc);
        assert_eq!(e.caster, "right");
        assert_eq!(e.caster_pixel, vc.pixel_b);
        let entries = vec![e.clone(), VcEntry::from_vc("left", "right", &vc.swapped())];
        let parsed = parse_vcs(&format_vcs(&entries)).unwrap();
        assert_eq!(parsed, entries);
        assert_eq!(parsed[0].to_vc("left", "right").unwrap(), vc);
        assert_eq!(parsed[0].to_vc("right", "left").unwrap(), vc.swapped());
        assert!(parsed[0].to_vc("left", "other").is_none());
    }

    #[test]
    fn vc_file_line_format() {
        let e = VcEntry {
            caster: "a".into(),
            caster_pixel: Pixel::new(1.0, 2.0),
            observer: "b".into(),
            observer_pixel: Pixel::new(3.0, 4.5),
            hit_rank: 2,
        };
        assert_eq!(format_vcs(&[e]), "vcsfm-vcs v1\na 1 2 b 3 4.5 2\n");
    }

    #[test]
    fn poses_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses: Vec<PoseEntry> = (0..10).map(|i| PoseEntry::new(format!("cam{i}"), &random_pose(&mut rng))).collect();
        let text = format_poses(&poses);
        assert_eq!(parse_poses(&text).unwrap(), poses);
        for p in &poses {
            assert!(p.rotation.w >= 0.0);
        }
    }

    #[test]
    fn pose_entry_reproduces_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng);
        let back = PoseEntry::new("x", &pose).pose();
        assert_relative_eq!(*back.rotation(), *pose.rotation(), epsilon = 1e-12);
        assert_relative_eq!(*back.translation(), *pose.translation(), epsilon = 1e-12);
    }

    #[test]
    fn poses_reject_bad_quaternions_and_duplicates() {
        let text = "vcsfm-poses v1\na 1 1 0 0 0 0 0\n";
        assert_eq!(parse_error_at(parse_poses(text).unwrap_err()), (2, 3));
        let text = "vcsfm-poses v1\na 1 0 0 0 0 0 0\na 1 0 0 0 0 0 0\n";
        assert_eq!(parse_error_at(parse_poses(text).unwrap_err()), (3, 1));
        let text = "vcsfm-pose v1\n";
        assert_eq!(parse_error_at(parse_poses(text).unwrap_err()), (1, 1));
    }

    fn sample_report() -> Report {
        Report {
            poses: vec![
                PoseEntry::new("img0", &Se3Pose::identity()),
                PoseEntry::new("img1", &random_pose(&mut ChaCha8Rng::seed_from_u64(4))),
            ],
            unregistered: vec!["img2".into()],
            tracks: TrackSummary {
                total: 5,
                virtual_tracks: 3,
                classic: 2,
            },
            diagnostics: vec![
                ("termination".into(), "Stalled".into()),
                ("seed_pair".into(), "img0 img1".into()),
            ],
            metrics: None,
            curve: Vec::new(),
        }
        .with_metrics(PoseErrorReport {
            pairs: vec![
                PairError {
                    i: 0,
                    j: 1,
                    rotation: 0.25,
                    translation: Some(1.5),
                    combined: 1.5,
                },
                PairError {
                    i: 0,
                    j: 2,
                    rotation: 180.0,
                    translation: None,
                    combined: 180.0,
                },
            ],
            auc: vec![(15.0, 0.45), (30.0, 0.475)],
        })
    }

    #[test]
    fn report_round_trip() {
        let r = sample_report();
        let text = format_report(&r);
        assert!(text.contains("pair 0 2 180 - 180\n"));
        assert!(text.contains("diag seed_pair img0 img1\n"));
        assert_eq!(parse_report(&text).unwrap(), r);
    }

    #[test]
    fn report_rejects_inconsistent_tables() {
        let text = format_report(&sample_report()).replace("tracks 5 3 2", "tracks 6 3 2");
        assert!(matches!(parse_report(&text), Err(IoError::Parse { .. })));
        let text = format_report(&sample_report()).replace("auc 30 0.475", "auc 30 0.1");
        assert!(matches!(parse_report(&text), Err(IoError::InvariantViolation { .. })));
    }

    #[test]
    fn ba_problem_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics::new(500.0, 510.0, 320.0, 240.0, 0.5).unwrap();
        let cameras: Vec<BaCamera> = (0..3)
            .map(|i| BaCamera {
                pose: random_pose(&mut rng),
                intrinsics: k,
                fixed: i == 0,
            })
            .collect();
        let tracks = vec![
            VcTrack {
                x1: Vec3::new(0.1, 0.2, 3.0),
                a: 0.25,
                b: 0.125,
                x2: Vec3::new(0.3, -0.1, 3.5),
                cam_a: 0,
                cam_b: 2,
                obs_a: Pixel::new(10.5, 20.25),
                obs_b: Pixel::new(100.0, 7.0),
                kind: TrackKind::Virtual,
            },
            VcTrack::classic(Vec3::new(1.0, 2.0, 3.0), 1, 2, Pixel::new(1.0, 2.0), Pixel::new(3.0, 4.0)),
        ];
        let mut problem = BaProblem::new(cameras, tracks, BaMode::Soft).unwrap();
        problem.soft_weight = 37.5;
        let text = format_ba_problem(&problem);
        let back = parse_ba_problem(&text).unwrap();
        assert_eq!(back, problem);
        assert_eq!(back.objective().unwrap(), problem.objective().unwrap());
    }

    #[test]
    fn config_lines_and_errors() {
        let text = "# pipeline\nmode = hard\n  stride=2  # denser\n\nprior_gate = none\n";
        let entries = parse_config(text).unwrap();
        assert_eq!(entries.len(), 3);
        let mut s = Settings::default();
        s.apply(&entries).unwrap();
        assert_eq!(s.sfm.mode, BaMode::Hard);
        assert_eq!(s.sfm.extraction.stride, 2);
        assert_eq!(s.sfm.prior_gate, None);
        assert_eq!(parse_error_at(parse_config("a = 1\n  oops\n").unwrap_err()), (2, 3));
        let bad = Settings::default().apply(&[("nonsense".into(), "1".into())]);
        assert!(matches!(bad, Err(IoError::InvariantViolation { field, .. }) if field == "nonsense"));
        let bad = Settings::default().apply(&[("stride".into(), "x".into())]);
        assert!(matches!(bad, Err(IoError::InvariantViolation { field, .. }) if field == "stride"));
    }

    #[test]
    fn scene_keys() {
        let mut s = Settings::default();
        s.apply(&parse_config("angles = 0, 90,180\nwidth = 64\npixel_sigma = 0.5\nmesh = body.obj\n").unwrap())
            .unwrap();
        assert_eq!(s.scene.angles, vec![0.0, 90.0, 180.0]);
        assert_eq!(s.scene.width, 64);
        assert_eq!(s.noise.pixel_sigma, 0.5);
        assert_eq!(s.scene.mesh, MeshSource::File("body.obj".into()));
        assert_eq!(s.sfm.ba, BaConfig::default());
    }

    fn small_manifest() -> Manifest {
        Manifest {
            images: vec![
                ManifestImage {
                    id: "a".into(),
                    intrinsics: CameraIntrinsics::simple(100.0, 31.5, 23.5).unwrap(),
                    width: 64,
                    height: 48,
                    subjects: vec![ManifestSubject {
                        person: "p0".into(),
                        surface_map: "a.dsm".into(),
                        mesh: "a.obj".into(),
                    }],
                },
                ManifestImage {
                    id: "b".into(),
                    intrinsics: CameraIntrinsics::new(100.0, 101.0, 31.5, 23.5, 0.0).unwrap(),
                    width: 64,
                    height: 48,
                    subjects: Vec::new(),
                },
            ],
            matches: vec![ManifestMatches {
                a: "a".into(),
                b: "b".into(),
                path: "ab.txt".into(),
            }],
            params: vec![("stride".into(), "2".into())],
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = small_manifest();
        assert_eq!(parse_manifest(&format_manifest(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn manifest_structure_errors() {
        let text = "vcsfm-manifest v1\nimage a 100 100 1 1 0 4 4\nimage a 100 100 1 1 0 4 4\n";
        assert_eq!(parse_error_at(parse_manifest(text).unwrap_err()), (3, 7));
        let text = "vcsfm-manifest v1\nsubject p0 m.dsm m.obj\n";
        assert_eq!(parse_error_at(parse_manifest(text).unwrap_err()), (2, 1));
        let text = "vcsfm-manifest v1\nimage a -100 100 1 1 0 4 4\n";
        assert_eq!(parse_error_at(parse_manifest(text).unwrap_err()), (2, 9));
        let text = "vcsfm-manifest v1\nimage a 100 100 1 1 0 4 4\nmatches a z m.txt\n";
        assert!(matches!(parse_manifest(text), Err(IoError::InvariantViolation { .. })));
    }

    #[test]
    fn bundle_loads_back_to_the_scene() {
        let scene = generate_scene(
            &SceneConfig {
                width: 64,
                height: 48,
                focal: 60.0,
                ..SceneConfig::with_angles(&[0.0, 40.0])
            },
            &NoiseConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bundle = write_scene_bundle(dir.path(), &scene, 4).unwrap();
        let (input, ids) = load_manifest_with(&bundle.manifest, SfmParams::default()).unwrap();
        assert_eq!(ids, vec!["img0", "img1"]);
        assert_eq!(input.records.len(), 2);
        for (got, want) in input.records.iter().zip(&scene.records) {
            assert_eq!(got.subjects[0].surface_map, want.subjects[0].surface_map);
            assert_eq!(got.subjects[0].mesh.vertices(), want.subjects[0].mesh.vertices());
            assert_eq!(got.intrinsics, want.intrinsics);
        }
        assert_eq!(input.classic_matches.len(), 1);
        assert_eq!(input.classic_matches[0].pairs, classic_matches(&scene, 0, 1, 4));
        let gt = load_poses(&bundle.gt_poses).unwrap();
        assert_relative_eq!(*gt[1].pose().rotation(), *scene.gt_poses[1].rotation(), epsilon = 1e-12);
    }

    #[test]
    fn missing_mesh_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small_manifest();
        m.matches.clear();
        std::fs::write(dir.path().join("a.dsm"), "dsm 64 48\n").unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, format_manifest(&m).unwrap()).unwrap();
        match load_manifest(&path) {
            Err(IoError::MissingFile(p)) => assert!(p.ends_with("a.obj")),
            other => panic!("expected MissingFile, got {other:?}"),
        }
        assert!(matches!(load_manifest(&dir.path().join("nope.txt")), Err(IoError::MissingFile(_))));
    }
}
