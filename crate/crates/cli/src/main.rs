//! `vcsfm` command-line tool.
//!
//! Exit status: 0 on success, 1 for usage errors (arguments, `--config`
//! files, `VCSFM_THREADS`), 2 when reading inputs or running the pipeline fails.

mod plot;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vcsfm::io::{
    apply_sfm_param, format_poses, format_report, format_vcs, load_config,
    load_manifest_with, load_poses, parse_poses, parse_report, write_scene_bundle, PoseEntry, Report,
    Settings, TrackSummary, VcEntry,
};
use vcsfm::pipeline::{incremental_sfm, two_view_sfm, ClassicMatches};
use vcsfm::synth::{evaluate_poses, generate_scene, MeshSource};
use vcsfm::vc::extract_vcs;
use vcsfm::{BaMode, SfmInput, SfmParams};

#[derive(Debug, Parser)]
#[command(name = "vcsfm", version, about = "Structure from motion over virtual correspondences")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scene seed for `synth`, RANSAC seed elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` parameter file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Output file; a directory for `synth`, a path prefix for `plot`. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Soft,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene into a bundle directory.
    Synth {
        /// Pixel stride of the classic matches written for overlapping pairs.
        #[arg(long, default_value_t = 4)]
        match_stride: usize,
    },
    /// Extract virtual correspondences for every image pair of a manifest.
    ExtractVc { manifest: PathBuf },
    /// Two-view relative pose of one image pair.
    Estimate {
        manifest: PathBuf,
        /// Image ids; defaults to the first two images.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        pair: Option<Vec<String>>,
    },
    /// Incremental reconstruction of all images.
    Sfm {
        manifest: PathBuf,
        /// Ground-truth poses; adds an error table to the report.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,30")]
        thresholds: Vec<f64>,
    },
    /// Compare estimated poses (a pose file or report) with ground truth.
    Eval {
        estimate: PathBuf,
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,30")]
        thresholds: Vec<f64>,
    },
    /// Cumulative error curve of a report as SVG and CSV.
    Plot { report: PathBuf },
}

enum Failure {
    Usage(String),
    Pipeline(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> Failure {
    Failure::Pipeline(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn set_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("VCSFM_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| usage(format!("VCSFM_THREADS must be a non-negative integer, got `{v}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(usage)?;
    }
    Ok(())
}

/// `--config` entries, with a relative `mesh` path resolved against the file.
fn config_entries(common: &Common) -> Result<Vec<(String, String)>, Failure> {
    let Some(path) = &common.config else { return Ok(Vec::new()) };
    let mut entries = load_config(path).map_err(usage)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for (k, v) in &mut entries {
        if k == "mesh" && v != "builtin" && Path::new(v).is_relative() {
            *v = base.join(&*v).to_string_lossy().into_owned();
        }
    }
    Ok(entries)
}

/// Defaults, then the config file, then `--seed` and `--mode`.
fn settings(common: &Common, params: SfmParams) -> Result<Settings, Failure> {
    let mut s = Settings {
        sfm: params,
        ..Settings::default()
    };
    s.apply(&config_entries(common)?).map_err(usage)?;
    if let Some(seed) = common.seed {
        s.scene.seed = seed;
        s.sfm.ransac.seed = seed;
    }
    if let Some(m) = common.mode {
        s.sfm.mode = match m {
            ModeArg::Hard => BaMode::Hard,
            ModeArg::Soft => BaMode::Soft,
        };
    }
    Ok(s)
}

/// Manifest input; command-line settings override manifest `param` lines.
fn load_input(common: &Common, manifest: &Path) -> Result<(SfmInput, Vec<String>), Failure> {
    // Reject a bad config before touching the manifest.
    settings(common, SfmParams::default())?;
    let (mut input, ids) = load_manifest_with(manifest, SfmParams::default()).map_err(failed)?;
    input.params = settings(common, input.params.clone())?.sfm;
    input.validate().map_err(usage)?;
    Ok((input, ids))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| failed(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(failed),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    set_threads()?;
    let common = &cli.common;
    let out = common.out.as_deref();
    match &cli.command {
        Command::Synth { match_stride } => {
            let dir = out.ok_or_else(|| usage("synth needs --out <dir>"))?;
            let entries = config_entries(common)?;
            let s = settings(common, SfmParams::default())?;
            if let MeshSource::File(p) = &s.scene.mesh {
                if !p.is_file() {
                    return Err(failed(format!("missing file {}", p.display())));
                }
            }
            let scene = generate_scene(&s.scene, &s.noise).map_err(failed)?;
            let bundle = write_scene_bundle(dir, &scene, *match_stride).map_err(failed)?;
            // Pipeline keys from the config travel with the bundle.
            let mut extra = String::new();
            for (k, v) in &entries {
                if apply_sfm_param(&mut SfmParams::default(), k, v).map_err(usage)? {
                    extra.push_str(&format!("param {k} {v}\n"));
                }
            }
            if let Some(m) = common.mode {
                extra.push_str(&format!("param mode {}\n", if matches!(m, ModeArg::Hard) { "hard" } else { "soft" }));
            }
            if !extra.is_empty() {
                let mut f = std::fs::OpenOptions::new()
                    .append(true)
                    .open(&bundle.manifest)
                    .map_err(failed)?;
                f.write_all(extra.as_bytes()).map_err(failed)?;
            }
            eprintln!(
                "wrote {} images to {} (manifest {}, ground truth {})",
                scene.records.len(),
                dir.display(),
                bundle.manifest.display(),
                bundle.gt_poses.display()
            );
            Ok(())
        }
        Command::ExtractVc { manifest } => {
            let (input, ids) = load_input(common, manifest)?;
            let mut entries = Vec::new();
            let n = input.records.len();
            for i in 0..n {
                for j in i + 1..n {
                    let vcs = extract_vcs(&input.records[i], &input.records[j], &input.params.extraction)
                        .map_err(failed)?;
                    entries.extend(vcs.iter().map(|vc| VcEntry::from_vc(&ids[i], &ids[j], vc)));
                }
            }
            emit(out, &format_vcs(&entries))
        }
        Command::Estimate { manifest, pair } => {
            let (input, ids) = load_input(common, manifest)?;
            let (a, b) = match pair {
                Some(p) => {
                    let find = |id: &String| {
                        ids.iter()
                            .position(|x| x == id)
                            .ok_or_else(|| usage(format!("unknown image `{id}`")))
                    };
                    (find(&p[0])?, find(&p[1])?)
                }
                None if ids.len() >= 2 => (0, 1),
                None => return Err(failed("the manifest lists fewer than two images")),
            };
            if a == b {
                return Err(usage("--pair needs two different images"));
            }
            let classic: Vec<ClassicMatches> = input
                .classic_matches
                .iter()
                .filter_map(|m| match (m.a, m.b) {
                    (x, y) if (x, y) == (a, b) => Some(ClassicMatches { a: 0, b: 1, pairs: m.pairs.clone() }),
                    (x, y) if (x, y) == (b, a) => Some(ClassicMatches { a: 1, b: 0, pairs: m.pairs.clone() }),
                    _ => None,
                })
                .collect();
            let two = SfmInput::new(
                vec![input.records[a].clone(), input.records[b].clone()],
                classic,
                input.params.clone(),
            )
            .map_err(failed)?;
            let result = two_view_sfm(&two).map_err(failed)?;
            let poses: Vec<PoseEntry> = [a, b]
                .iter()
                .zip(&result.poses)
                .filter_map(|(&i, p)| p.as_ref().map(|p| PoseEntry::new(ids[i].clone(), p)))
                .collect();
            emit(out, &format_poses(&poses))
        }
        Command::Sfm { manifest, gt, thresholds } => {
            let (input, ids) = load_input(common, manifest)?;
            let result = incremental_sfm(&input, None).map_err(failed)?;
            let mut report = Report::from_result(&ids, &result);
            if let Some(gt) = gt {
                let gt = load_poses(gt).map_err(failed)?;
                report = attach_metrics(report, &gt, thresholds)?;
            }
            emit(out, &format_report(&report))
        }
        Command::Eval { estimate, gt, thresholds } => {
            settings(common, SfmParams::default())?;
            let text = std::fs::read_to_string(estimate)
                .map_err(|e| failed(format!("{}: {e}", estimate.display())))?;
            let is_report = text
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty() && !l.starts_with('#'))
                == Some("vcsfm-report v1");
            let report = if is_report {
                parse_report(&text).map_err(failed)?
            } else {
                Report {
                    poses: parse_poses(&text).map_err(failed)?,
                    tracks: TrackSummary::default(),
                    ..Report::default()
                }
            };
            let gt = load_poses(gt).map_err(failed)?;
            emit(out, &format_report(&attach_metrics(report, &gt, thresholds)?))
        }
        Command::Plot { report } => {
            let prefix = out.ok_or_else(|| usage("plot needs --out <prefix>"))?;
            let text = std::fs::read_to_string(report)
                .map_err(|e| failed(format!("{}: {e}", report.display())))?;
            let r = parse_report(&text).map_err(failed)?;
            if r.curve.is_empty() {
                return Err(failed("the report has no error curve; run eval first"));
            }
            std::fs::write(prefix.with_extension("csv"), plot::csv(&r.curve)).map_err(failed)?;
            std::fs::write(prefix.with_extension("svg"), plot::svg(&r.curve)).map_err(failed)?;
            Ok(())
        }
    }
}

/// Re-orders the report's poses like `gt` and adds the error table. Images
/// without an estimate become unregistered.
fn attach_metrics(mut report: Report, gt: &[PoseEntry], thresholds: &[f64]) -> Result<Report, Failure> {
    if let Some(p) = report.poses.iter().find(|p| !gt.iter().any(|g| g.id == p.id)) {
        return Err(failed(format!("no ground truth for image `{}`", p.id)));
    }
    let est: Vec<Option<PoseEntry>> = gt
        .iter()
        .map(|g| report.poses.iter().find(|p| p.id == g.id).cloned())
        .collect();
    let metrics = evaluate_poses(
        &est.iter().map(|p| p.as_ref().map(PoseEntry::pose)).collect::<Vec<_>>(),
        &gt.iter().map(PoseEntry::pose).collect::<Vec<_>>(),
        thresholds,
    )
    .map_err(usage)?;
    report.poses = est.iter().flatten().cloned().collect();
    report.unregistered = gt
        .iter()
        .zip(&est)
        .filter(|(_, e)| e.is_none())
        .map(|(g, _)| g.id.clone())
        .collect();
    Ok(report.with_metrics(metrics))
}
