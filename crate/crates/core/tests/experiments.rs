use robocal::config::SceneConfig;
use robocal::experiment::{
    run_eyehand, run_internal, Coverage, EyeHandRow, EyeHandSchedule, InternalRow,
    InternalSchedule,
};

fn noiseless(cameras: usize) -> (SceneConfig, robocal::sim::SimScene) {
    let mut cfg = SceneConfig::default_three_camera(8);
    cfg.cameras.truncate(cameras);
    cfg.simulation.noiseless = true;
    let scene = cfg.to_scene().unwrap();
    (cfg, scene)
}

#[test]
fn internal_errors_vanish_without_noise() {
    let (cfg, scene) = noiseless(1);
    let schedule = InternalSchedule {
        row: vec![
            InternalRow {
                combined_frames: 26,
                overlap: false,
                tilting: true,
                coverage: Coverage::Full,
            },
            InternalRow {
                combined_frames: 14,
                overlap: false,
                tilting: false,
                coverage: Coverage::Center,
            },
        ],
    };
    let rows = run_internal(&scene, &scene.cameras[0].id, &cfg.session, &schedule).unwrap();
    let tilted = &rows[0];
    assert!(tilted.color_err_px < 1e-6, "{tilted:?}");
    assert!(tilted.ir_err_px < 1e-6, "{tilted:?}");
    assert!(tilted.reproj_err_px < 1e-6, "{tilted:?}");
    // fronto-parallel views leave focal length and depth entangled, so this
    // row stays off even without noise
    let flat = &rows[1];
    assert!(flat.color_err_px > 1.0, "{flat:?}");
}

#[test]
fn eyehand_errors_vanish_without_noise() {
    let (cfg, scene) = noiseless(2);
    let schedule = EyeHandSchedule {
        row: vec![EyeHandRow {
            frames: vec![10],
            overlap: true,
        }],
    };
    let report = run_eyehand(&scene, &cfg.session, &schedule, &cfg.sha256()).unwrap();
    assert_eq!(report.rows.len(), 2);
    for r in &report.rows {
        assert!(r.err_cm < 1e-6, "{r:?}");
        assert!(r.err_x_cm.max(r.err_y_cm).max(r.err_z_cm) < 1e-6, "{r:?}");
    }
}
