//! Simulate a short sequence, store it on disk, read it back and run the
//! pipeline against the stored ground truth.

use lio_core::config::PipelineConfig;
use lio_core::evaluation::{associate, evaluate, Trajectory};
use lio_core::geometry::{rot_log, Vec3};
use lio_core::io::{Manifest, SequenceReader, SequenceWriter};
use lio_core::pipeline::{Pipeline, ScanStatus};
use lio_core::preprocess::SensorModel;
use lio_core::simulator::{AnalyticTrajectory, Scene, Simulation};

const TRAJECTORY: &str = r#"
heading = "tangent"
rest = 1.0
ramp = 1.0
rate = 0.4
path = { kind = "ellipse", center = [0.0, 0.0, 1.2], semi_axes = [2.0, 1.2] }
height = { amplitude = 0.1, cycles = 3.0 }
roll = { amplitude = 0.03, cycles = 5.0 }
"#;

fn simulation() -> Simulation {
    let scene = Scene::box_room(Vec3::new(8.0, 6.0, 3.0));
    let trajectory = AnalyticTrajectory::from_toml(TRAJECTORY).unwrap();
    let sensor = SensorModel::new(0.7854, 32, 20, 0.1).unwrap();
    let mut sim = Simulation::new(scene, trajectory, sensor, 4.0, 3);
    sim.lidar.beams = 360;
    sim
}

fn write_sequence(sim: &Simulation, dir: &std::path::Path) -> Manifest {
    let mut manifest = Manifest::new(sim.sensor, 0);
    manifest.scene_diameter = Some(sim.scene.diameter());
    let mut writer = SequenceWriter::create(dir, manifest).unwrap();
    writer.write_imu(&sim.imu_samples()).unwrap();
    writer.write_ground_truth(&sim.ground_truth()).unwrap();
    for k in 0..sim.scan_count() {
        writer.push_scan(&sim.scan(k)).unwrap();
    }
    writer.finish().unwrap()
}

#[test]
fn stored_sequence_tracks_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulation();
    let manifest = write_sequence(&sim, dir.path());
    assert_eq!(manifest.scan_count, 40);

    let reader = SequenceReader::open(dir.path()).unwrap();
    reader.check_files().unwrap();
    assert_eq!(reader.manifest.scan_count, 40);

    let mut pipeline = Pipeline::new(PipelineConfig::default(), reader.manifest.sensor, reader.manifest.extrinsic)
        .with_divergence_bound(10.0 * reader.manifest.scene_diameter.unwrap())
        .deterministic();
    pipeline.push_imu(&reader.imu().unwrap()).unwrap();

    let mut estimate = Trajectory::default();
    let mut tracked = 0;
    for k in 0..reader.manifest.scan_count {
        let report = pipeline.process_scan(&reader.scan(k).unwrap()).unwrap();
        if report.status == ScanStatus::Updated {
            tracked += 1;
        }
        if let Some(pose) = report.pose {
            estimate.push(report.stamp, pose);
        }
    }
    assert!(tracked > 20, "only {tracked} scans registered");
    assert!(pipeline.map().len() > 1000);

    let gt = reader.ground_truth().unwrap().unwrap();
    let ape = evaluate(&estimate, &gt, 0.02).unwrap();
    assert!(ape.pairs >= 25, "pairs {}", ape.pairs);
    assert!(ape.rmse < 0.03, "ape {}", ape.rmse);

    let pairs = associate(&estimate, &gt, 0.02).unwrap();
    let (e0, g0) = (pairs[0].estimate, pairs[0].truth);
    for p in &pairs {
        let e = e0.inverse() * p.estimate;
        let g = g0.inverse() * p.truth;
        let dp = (e.translation - g.translation).norm();
        let dr = rot_log(&(e.rotation.inverse() * g.rotation)).norm();
        assert!(dp < 0.05 && dr < 0.02, "t={} drift {dp} m, {dr} rad", p.stamp);
    }
}

#[test]
fn reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulation();
    write_sequence(&sim, dir.path());
    let reader = SequenceReader::open(dir.path()).unwrap();
    let run = || {
        let mut pipeline = Pipeline::new(PipelineConfig::default(), reader.manifest.sensor, reader.manifest.extrinsic)
            .deterministic();
        pipeline.push_imu(&reader.imu().unwrap()).unwrap();
        (0..reader.manifest.scan_count)
            .map(|k| pipeline.process_scan(&reader.scan(k).unwrap()).unwrap().to_line(false))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
