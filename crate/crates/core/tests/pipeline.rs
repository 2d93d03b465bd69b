use vcsfm::geometry::rotation_angle;
use vcsfm::pipeline::{incremental_sfm, two_view_sfm, ClassicMatches};
use vcsfm::synth::{classic_matches, evaluate_poses, generate_scene};
use vcsfm::vc::{extract_vcs, vc_ray_gap, ExtractionParams};
use vcsfm::{DenseSurfaceMap, NoiseConfig, SceneConfig, Se3Pose, SfmInput, SfmParams, SyntheticScene};

fn scene(angles: &[f64], noise: NoiseConfig, seed: u64) -> SyntheticScene {
    generate_scene(
        &SceneConfig {
            seed,
            ..SceneConfig::with_angles(angles)
        },
        &noise,
    )
    .unwrap()
}

fn relative_gap(a: &Se3Pose, b: &Se3Pose) -> (f64, f64) {
    let rot = rotation_angle(&(a.rotation() * b.rotation().transpose()));
    let (ta, tb) = (a.translation(), b.translation());
    (rot, ta.cross(tb).norm().atan2(ta.dot(tb)))
}

#[test]
fn extracted_vcs_meet_under_true_poses() {
    let s = scene(&[0.0, 180.0], NoiseConfig::default(), 0);
    let params = ExtractionParams {
        subpixel: true,
        ..ExtractionParams::default()
    };
    let vcs = extract_vcs(&s.records[0], &s.records[1], &params).unwrap();
    assert!(vcs.len() > 50, "{} VCs", vcs.len());
    for vc in &vcs {
        let gap = vc_ray_gap(vc, &s.gt_poses[0], &s.gt_poses[1], &s.records[0].intrinsics, &s.records[1].intrinsics);
        assert!(gap < 1e-6, "ray gap {gap}");
    }
}

#[test]
fn identical_images_are_degenerate() {
    let s = scene(&[0.0, 180.0], NoiseConfig::default(), 0);
    let input = SfmInput::new(vec![s.records[0].clone(), s.records[0].clone()], Vec::new(), SfmParams::default()).unwrap();
    let r = two_view_sfm(&input).unwrap();
    assert!(r.diagnostics.degenerate);
    let second = r.poses[1].as_ref().unwrap();
    assert!(rotation_angle(second.rotation()) < 1e-6);
    assert_eq!(second.translation().norm(), 0.0);
}

#[test]
fn classic_only_pair_matches_ground_truth() {
    let s = scene(&[0.0, 50.0], NoiseConfig::default(), 0);
    let pairs = classic_matches(&s, 0, 1, 4);
    assert!(pairs.len() > 50);
    let params = SfmParams {
        use_vcs: false,
        ..SfmParams::default()
    };
    let input = SfmInput::new(s.records.clone(), vec![ClassicMatches { a: 0, b: 1, pairs }], params).unwrap();
    let r = two_view_sfm(&input).unwrap();
    assert_eq!(r.diagnostics.vcs_extracted, 0);
    let est = Se3Pose::relative(r.poses[0].as_ref().unwrap(), r.poses[1].as_ref().unwrap());
    let gt = Se3Pose::relative(&s.gt_poses[0], &s.gt_poses[1]);
    let (rot, dir) = relative_gap(&est, &gt);
    assert!(rot < 1e-4 && dir < 1e-4, "rotation {rot} rad, direction {dir} rad");
}

#[test]
fn adding_exact_vcs_to_exact_matches_keeps_the_pose() {
    let s = scene(&[0.0, 60.0], NoiseConfig::default(), 2);
    let classic = vec![ClassicMatches {
        a: 0,
        b: 1,
        pairs: classic_matches(&s, 0, 1, 4),
    }];
    let run = |use_vcs: bool| {
        let params = SfmParams {
            use_vcs,
            ..SfmParams::default()
        };
        let r = two_view_sfm(&SfmInput::new(s.records.clone(), classic.clone(), params).unwrap()).unwrap();
        Se3Pose::relative(r.poses[0].as_ref().unwrap(), r.poses[1].as_ref().unwrap())
    };
    let (rot, dir) = relative_gap(&run(true), &run(false));
    assert!(rot < 1e-4 && dir < 1e-4, "rotation {rot} rad, direction {dir} rad");
}

#[test]
fn incremental_with_two_images_is_two_view() {
    let s = scene(&[0.0, 140.0], NoiseConfig { pixel_sigma: 0.5, ..NoiseConfig::default() }, 3);
    let input = SfmInput::new(s.records.clone(), Vec::new(), SfmParams::default()).unwrap();
    let a = incremental_sfm(&input, None).unwrap();
    let b = two_view_sfm(&input).unwrap();
    assert_eq!(a.poses, b.poses);
    assert_eq!(a.tracks, b.tracks);
}

#[test]
fn empty_map_image_is_skipped() {
    let mut s = scene(&[0.0, 90.0, 180.0], NoiseConfig::default(), 0);
    let (w, h) = (s.records[1].width, s.records[1].height);
    s.records[1].subjects[0].surface_map = DenseSurfaceMap::new(w, h);
    let input = SfmInput::new(s.records.clone(), Vec::new(), SfmParams::default()).unwrap();
    let r = incremental_sfm(&input, None).unwrap();
    assert!(r.poses[1].is_none());
    assert_eq!(r.diagnostics.failures.len(), 1);
    assert_eq!(r.diagnostics.failures[0].image, 1);
    assert_eq!(r.poses[0], Some(Se3Pose::identity()));
    let m = evaluate_poses(&r.poses, &s.gt_poses, &[30.0]).unwrap();
    let registered = m.pairs.iter().find(|p| (p.i, p.j) == (0, 2)).unwrap();
    assert!(registered.combined < 0.5, "{}", registered.combined);
}

#[test]
fn more_views_do_not_raise_the_median_error() {
    let noise = NoiseConfig {
        pixel_sigma: 1.0,
        ..NoiseConfig::default()
    };
    let mut four = Vec::new();
    let mut two = Vec::new();
    for seed in 0..20 {
        let s = scene(&[0.0, 90.0, 180.0, 270.0], noise, seed);
        let input = SfmInput::new(s.records.clone(), Vec::new(), SfmParams::default()).unwrap();
        let r = incremental_sfm(&input, None).unwrap();
        four.extend(evaluate_poses(&r.poses, &s.gt_poses, &[30.0]).unwrap().combined());
        for i in 0..4 {
            for j in i + 1..4 {
                let pair = SfmInput::new(vec![s.records[i].clone(), s.records[j].clone()], Vec::new(), SfmParams::default()).unwrap();
                let gt = [s.gt_poses[i], s.gt_poses[j]];
                two.push(match two_view_sfm(&pair) {
                    Ok(r) => evaluate_poses(&r.poses, &gt, &[30.0]).unwrap().max_combined(),
                    Err(_) => 180.0,
                });
            }
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (m4, m2) = (median(&mut four), median(&mut two));
    assert!(m4 <= m2, "4 views {m4}°, 2 views {m2}°");
}
