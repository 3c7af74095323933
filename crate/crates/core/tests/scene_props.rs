use nalgebra::{Matrix3, SymmetricEigen};
use proptest::prelude::*;
use splatode::raster::render;
use splatode::scene::{
    analytic_state, covariance, frame_times, generate_dataset, preset_scene, quat_normalize, Camera, CanonicalGaussian,
    Motion, Preset, PresetConfig, SceneSpec,
};

fn quat_strategy() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64).prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
}

fn one_gaussian_scene(motion: Motion) -> SceneSpec {
    let cam = Camera::look_at([0.0, -3.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 40.0, 32, 32).unwrap();
    SceneSpec {
        gaussians: vec![CanonicalGaussian::new(
            [0.3, 0.0, 0.1],
            [1.0, 0.0, 0.0, 0.0],
            [-2.0; 3],
            2.0,
            vec![0.8, 0.2, 0.4],
        )
        .unwrap()],
        motion: vec![motion],
        cameras: vec![cam],
        t_min: 0.0,
        t_max: 1.0,
    }
}

#[test]
fn axis_aligned_covariances() {
    let id = [1.0, 0.0, 0.0, 0.0];
    let sigma = covariance(id, [0.0; 3]).unwrap();
    assert_eq!(sigma, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let sigma = covariance(id, [2f64.ln(), 0.0, 0.0]).unwrap();
    let want = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((sigma[i][j] - want[i][j]).abs() < 1e-12);
        }
    }
    assert!(covariance([0.0; 4], [0.0; 3]).is_err());
}

#[test]
fn simple_motions() {
    let spec = one_gaussian_scene(Motion::Static);
    assert_eq!(
        analytic_state(&spec, 0, 0.73).unwrap().params,
        spec.gaussians[0].state()
    );

    let spec = one_gaussian_scene(Motion::Linear {
        velocity: [1.0, 0.0, 0.0],
    });
    let mut lin = spec.clone();
    lin.gaussians[0].mu = [0.0; 3];
    assert_eq!(analytic_state(&lin, 0, 0.25).unwrap().mu(), [0.25, 0.0, 0.0]);

    let spec = one_gaussian_scene(Motion::Circular {
        center: [0.0; 3],
        axis: [0.0, 0.0, 1.0],
        omega: 2.0 * std::f64::consts::PI,
        phase: 0.0,
    });
    let a = analytic_state(&spec, 0, 0.0).unwrap().params;
    let b = analytic_state(&spec, 0, 1.0).unwrap().params;
    for d in 0..10 {
        assert!((a[d] - b[d]).abs() < 1e-12);
    }
    assert!(analytic_state(&spec, 0, -0.1).is_err());
}

#[test]
fn frame_split_counts() {
    let (t, n_train, _) = frame_times(0.0, 1.0, 100, 0.8).unwrap();
    assert_eq!((n_train, t.len() - n_train), (80, 20));
    assert!(t.windows(2).all(|w| w[1] > w[0]));
    let (t, n_train, _) = frame_times(0.0, 1.0, 2, 0.5).unwrap();
    assert_eq!((n_train, t.len()), (1, 2));
    assert!(frame_times(1.0, 1.0, 10, 0.5).is_err());
}

#[test]
fn static_scene_renders_identically_over_time() {
    let spec = one_gaussian_scene(Motion::Static);
    let cam = &spec.cameras[0];
    let a = render(&spec.gaussians, &spec.states_at(0.0).unwrap(), cam).unwrap();
    let b = render(&spec.gaussians, &spec.states_at(1.0).unwrap(), cam).unwrap();
    assert_eq!(a.rgb, b.rgb);
}

#[test]
fn generation_is_deterministic_and_rejects_empty_scenes() {
    let cfg = PresetConfig {
        image_size: 24,
        ..PresetConfig::default()
    };
    let a = preset_scene(Preset::Mixed, 12, 5, &cfg).unwrap();
    let b = preset_scene(Preset::Mixed, 12, 5, &cfg).unwrap();
    assert_eq!(a, b);
    let da = generate_dataset(&a, 10, 0.8).unwrap();
    let db = generate_dataset(&b, 10, 0.8).unwrap();
    assert!(da
        .frames
        .iter()
        .zip(&db.frames)
        .all(|(x, y)| x.image.rgb == y.image.rgb));
    assert!(preset_scene(Preset::Circular, 0, 5, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_quaternions_have_unit_norm(q in quat_strategy()) {
        let n = quat_normalize(q).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales(q in quat_strategy(), s in prop::array::uniform3(-3.0..1.0f64)) {
        let sigma = covariance(q, s).unwrap();
        let m = Matrix3::from_fn(|i, j| sigma[i][j]);
        let mut eig: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
        want.sort_by(f64::total_cmp);
        for (e, w) in eig.iter().zip(&want) {
            prop_assert!((e - w).abs() < 1e-9, "{eig:?} vs {want:?}");
        }
    }

    #[test]
    fn quaternion_sign_does_not_change_covariance(q in quat_strategy(), s in prop::array::uniform3(-3.0..1.0f64)) {
        let neg = [-q[0], -q[1], -q[2], -q[3]];
        prop_assert_eq!(covariance(q, s).unwrap(), covariance(neg, s).unwrap());
    }

    #[test]
    fn linear_motion_is_shift_consistent(
        v in prop::array::uniform3(-2.0..2.0f64),
        t in 0.0..1.0f64,
        dt in 0.0..1.0f64,
    ) {
        let spec = one_gaussian_scene(Motion::Linear { velocity: v });
        let a = analytic_state(&spec, 0, t).unwrap().mu();
        let b = analytic_state(&spec, 0, t + dt).unwrap().mu();
        for d in 0..3 {
            prop_assert!((b[d] - (a[d] + v[d] * dt)).abs() < 1e-12);
        }
    }

    #[test]
    fn preset_trajectories_have_bounded_second_differences(seed in any::<u64>(), preset_idx in 0usize..4) {
        let preset = [Preset::Circular, Preset::Linear, Preset::Harmonic, Preset::Mixed][preset_idx];
        let cfg = PresetConfig::default();
        let spec = preset_scene(preset, 8, seed, &cfg).unwrap();
        let h = 0.01;
        // Every preset motion has acceleration at most (2π/period)² · radius-scale.
        let omega = 2.0 * std::f64::consts::PI / cfg.period;
        let bound = 4.0 * omega * omega * cfg.radius * h * h;
        for i in 0..150 {
            let t = i as f64 * h;
            let (a, b, c) = (spec.states_at(t).unwrap(), spec.states_at(t + h).unwrap(), spec.states_at(t + 2.0 * h).unwrap());
            for k in 0..spec.len() {
                for d in 0..3 {
                    let dd = a[k][d] - 2.0 * b[k][d] + c[k][d];
                    prop_assert!(dd.abs() <= bound, "second difference {dd} at t = {t}");
                }
            }
        }
    }

    #[test]
    fn look_at_cameras_are_proper_rotations(
        eye in prop::array::uniform3(-5.0..5.0f64),
        target in prop::array::uniform3(-1.0..1.0f64),
    ) {
        prop_assume!(((eye[0] - target[0]).powi(2) + (eye[1] - target[1]).powi(2)) > 0.1);
        let cam = Camera::look_at(eye, target, [0.0, 0.0, 1.0], 50.0, 16, 16).unwrap();
        let r = Matrix3::from_fn(|i, j| cam.rotation[i][j]);
        prop_assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        let p = cam.to_camera_space(target);
        prop_assert!(p[0].abs() < 1e-9 && p[1].abs() < 1e-9 && p[2] > 0.0);
    }
}
