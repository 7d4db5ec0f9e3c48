//! End-to-end runs over the on-disk dataset layout: synth export, tracked
//! runs through both mask providers, evaluation, and format round-trips.

use objtrack_core::dataset::{
    self, Dataset, KeypointProviderKind, MaskProviderKind, RunConfig,
};
use objtrack_core::features::KeypointProvider;
use objtrack_core::harness::{self, HarnessError};
use objtrack_core::se3::{rotation_geodesic, Vec3};
use objtrack_core::synth::{small_orbit_scene, small_static_scene, SyntheticKeypointProvider, TablePlane};
use objtrack_core::tracker::FrameStatus;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

/// Write per-frame keypoint files for the dataset from the scene's
/// synthetic provider, exercising the external-detector injection path.
fn export_keypoint_files(scene: &Arc<objtrack_core::synth::SyntheticScene>, dir: &Path) {
    let provider = SyntheticKeypointProvider::new(scene.clone());
    for t in 0..scene.len() {
        let (frame, _) = scene.ingest(t).unwrap();
        let kps = provider.detect(&frame, 500).unwrap();
        let mut text = String::new();
        for kp in &kps {
            let _ = write!(text, "{} {}", kp.pixel.x, kp.pixel.y);
            for v in &kp.descriptor {
                let _ = write!(text, " {v}");
            }
            text.push('\n');
        }
        std::fs::write(dir.join(format!("keypoints_{t:06}.txt")), text).unwrap();
    }
}

#[test]
fn synth_dataset_round_trips_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_orbit_scene(3, 0.002, 0.0);
    harness::write_scene_dataset(&scene, tmp.path()).unwrap();

    // Re-read and re-write; files must be byte-identical.
    let second = tempfile::tempdir().unwrap();
    let data = Dataset::open(tmp.path()).unwrap();
    dataset::write_intrinsics(&second.path().join("intrinsics.txt"), &data.intrinsics).unwrap();
    for t in 0..data.frame_count as u64 {
        let color = data.load_color(t).unwrap();
        let depth = data.load_depth(t).unwrap();
        dataset::write_color_png(
            &second.path().join(dataset::color_name(t)),
            &color,
            data.intrinsics.width,
            data.intrinsics.height,
        )
        .unwrap();
        dataset::write_depth_png(&second.path().join(dataset::depth_name(t)), &depth).unwrap();
        let gt = data.gt_pose(t).unwrap();
        dataset::write_pose(&second.path().join(dataset::gt_pose_name(t)), &gt).unwrap();
    }
    for name in [
        "intrinsics.txt",
        "color_000001.png",
        "depth_000001.png",
        "gt_pose_000001.txt",
    ] {
        let a = std::fs::read(tmp.path().join(name)).unwrap();
        let b = std::fs::read(second.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} did not round-trip bitwise");
    }

    // Masks round-trip through the segmentation reader.
    let mask =
        objtrack_core::segmentation::mask_from_file(&tmp.path().join("mask_000001.png"), 320, 240)
            .unwrap();
    let rendered = scene.render(1).unwrap();
    assert_eq!(mask.values, rendered.mask.values);
    dataset::write_mask_png(&second.path().join("mask_000001.png"), &mask).unwrap();
    assert_eq!(
        std::fs::read(tmp.path().join("mask_000001.png")).unwrap(),
        std::fs::read(second.path().join("mask_000001.png")).unwrap()
    );
}

#[test]
fn written_depth_equals_render_quantized_to_millimeters() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_orbit_scene(1, 0.002, 0.0);
    harness::write_scene_dataset(&scene, tmp.path()).unwrap();
    let rendered = scene.render(0).unwrap();
    let data = Dataset::open(tmp.path()).unwrap();
    let depth = data.load_depth(0).unwrap();
    for (disk, exact) in depth.values.iter().zip(rendered.depth.values.iter()) {
        let quantized = if *exact <= 0.0 {
            0.0
        } else {
            (exact * 1000.0).round() / 1000.0
        };
        assert!((disk - quantized).abs() < 1e-12);
    }
}

#[test]
fn tracked_run_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = Arc::new(small_orbit_scene(10, 0.002, 0.1));
    harness::write_scene_dataset(&scene, tmp.path()).unwrap();
    export_keypoint_files(&scene, tmp.path());

    let config = RunConfig {
        keypoint_provider: KeypointProviderKind::Files,
        ..RunConfig::default()
    };
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let summary = harness::run_track(tmp.path(), &config, out_a.path()).unwrap();
    assert_eq!(summary.frames, 10);
    harness::run_track(tmp.path(), &config, out_b.path()).unwrap();

    let poses_a = std::fs::read(out_a.path().join("poses.txt")).unwrap();
    let poses_b = std::fs::read(out_b.path().join("poses.txt")).unwrap();
    assert_eq!(poses_a, poses_b, "identical runs must produce identical poses.txt");

    let log = dataset::read_pose_log(&out_a.path().join("poses.txt")).unwrap();
    assert_eq!(log.len(), 10);
    for (t, (id, pose, status)) in log.iter().enumerate() {
        assert_eq!(*id, t as u64);
        assert_eq!(*status, FrameStatus::Ok);
        let gt = &scene.trajectory[t];
        assert!(rotation_geodesic(&pose.rotation, &gt.rotation) < 0.03);
        assert!((pose.translation - gt.translation).norm() < 0.01);
    }
    assert!(out_a.path().join("energy.csv").exists());
    assert!(out_a.path().join("timing.csv").exists());
    let timing = std::fs::read_to_string(out_a.path().join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 11); // header + one row per frame
}

#[test]
fn missing_depth_file_is_reported_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = Arc::new(small_orbit_scene(4, 0.0, 0.0));
    harness::write_scene_dataset(&scene, tmp.path()).unwrap();
    export_keypoint_files(&scene, tmp.path());
    std::fs::remove_file(tmp.path().join("depth_000002.png")).unwrap();

    let config = RunConfig {
        keypoint_provider: KeypointProviderKind::Files,
        ..RunConfig::default()
    };
    let out = tempfile::tempdir().unwrap();
    let err = harness::run_track(tmp.path(), &config, out.path()).unwrap_err();
    assert!(
        err.to_string().contains("depth_000002.png"),
        "error should name the missing file: {err}"
    );
}

#[test]
fn plane_removal_mask_provider_tracks_tabletop_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let mut scene = small_static_scene(3);
    scene.table = Some(TablePlane {
        point: Vec3::new(0.0, 0.0, 1.1),
        normal: Vec3::new(0.0, 0.0, -1.0),
        radius: 1.0,
    });
    let scene = Arc::new(scene);
    harness::write_scene_dataset(&scene, tmp.path()).unwrap();
    export_keypoint_files(&scene, tmp.path());

    let config = RunConfig {
        keypoint_provider: KeypointProviderKind::Files,
        mask_provider: MaskProviderKind::PlaneRemoval,
        ..RunConfig::default()
    };
    let out = tempfile::tempdir().unwrap();
    let summary = harness::run_track(tmp.path(), &config, out.path()).unwrap();
    assert_eq!(summary.frames, 3);
    assert_eq!(summary.coasted, 0);
    let log = dataset::read_pose_log(&out.path().join("poses.txt")).unwrap();
    let gt = &scene.trajectory[2];
    let last = &log[2];
    assert!(rotation_geodesic(&last.1.rotation, &gt.rotation) < 0.02);
    assert!((last.1.translation - gt.translation).norm() < 0.005);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_orbit_scene(5, 0.0, 0.0);
    harness::write_scene_dataset(&scene, tmp.path()).unwrap();

    // Pose log = ground truth itself.
    let log: Vec<(u64, objtrack_core::se3::Pose, FrameStatus)> = scene
        .trajectory
        .iter()
        .enumerate()
        .map(|(i, p)| (i as u64, *p, FrameStatus::Ok))
        .collect();
    let poses_path = tmp.path().join("poses.txt");
    dataset::write_pose_log(&poses_path, &log).unwrap();

    let out = tempfile::tempdir().unwrap();
    let report = harness::run_eval(
        &poses_path,
        tmp.path(),
        &tmp.path().join("model.txt"),
        None,
        out.path(),
    )
    .unwrap();
    assert_eq!(report.five_deg_five_cm_pct, 100.0);
    assert_eq!(report.iou25_pct, 100.0);
    assert!((report.add_auc - 1.0).abs() < 1e-12);
    let metrics_text = std::fs::read_to_string(out.path().join("metrics.txt")).unwrap();
    assert!(metrics_text.contains("five_deg_five_cm_pct = 100"));
    assert!(out.path().join("curves.csv").exists());
    assert!(out.path().join("frames.csv").exists());
}

#[test]
fn eval_reports_missing_ground_truth_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_orbit_scene(3, 0.0, 0.0);
    harness::write_scene_dataset(&scene, tmp.path()).unwrap();
    let log: Vec<(u64, objtrack_core::se3::Pose, FrameStatus)> = (10..13u64)
        .map(|i| (i, scene.trajectory[0], FrameStatus::Ok))
        .collect();
    let poses_path = tmp.path().join("poses.txt");
    dataset::write_pose_log(&poses_path, &log).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = harness::run_eval(
        &poses_path,
        tmp.path(),
        &tmp.path().join("model.txt"),
        None,
        out.path(),
    )
    .unwrap_err();
    match err {
        HarnessError::MissingGroundTruth(ids) => assert_eq!(ids, vec![10, 11, 12]),
        other => panic!("expected missing ground truth, got {other}"),
    }
}

#[test]
fn feature_edges_recover_ground_truth_correspondences() {
    use objtrack_core::solver::{build_feature_edges, CorrespondenceCache, GraphNode};

    // Four noiseless nodes with exact synthetic keypoints: every cached
    // correspondence set must pair keypoints of the same surface sample,
    // and a second build must reuse the cache without recomputation.
    let scene = Arc::new(small_orbit_scene(4, 0.0, 0.0));
    let provider = SyntheticKeypointProvider::new(scene.clone());
    let nodes: Vec<GraphNode> = (0..4)
        .map(|t| {
            let (mut frame, gt) = scene.ingest(t).unwrap();
            frame.keypoints = provider.detect(&frame, 400).unwrap();
            GraphNode::new(Arc::new(frame), gt, t == 0)
        })
        .collect();

    let mut cache = CorrespondenceCache::new();
    let ransac = objtrack_core::features::RansacParams::default();
    let edges = build_feature_edges(&nodes, &mut cache, &ransac);
    assert_eq!(edges.len(), 6);
    let misses_after_first = cache.misses();
    assert_eq!(misses_after_first, 6);
    for edge in &edges {
        assert!(edge.matches.len() > 50, "edge {}->{} too sparse", edge.i, edge.j);
        let kps_i = &nodes[edge.i].frame.keypoints;
        let kps_j = &nodes[edge.j].frame.keypoints;
        for &(m, n) in &edge.matches.pairs {
            // Unique per-sample descriptors: equality identifies the sample.
            assert_eq!(kps_i[m].descriptor, kps_j[n].descriptor);
        }
    }

    let again = build_feature_edges(&nodes, &mut cache, &ransac);
    assert_eq!(cache.misses(), misses_after_first, "warm cache must not recompute");
    for (a, b) in edges.iter().zip(again.iter()) {
        assert_eq!(a.matches.pairs, b.matches.pairs);
    }
}

#[test]
fn unknown_scene_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(
        harness::run_synth("volcano", out.path(), None),
        Err(HarnessError::UnknownScene(_))
    ));
}
