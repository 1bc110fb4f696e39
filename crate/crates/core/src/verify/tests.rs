use super::*;
use crate::data::{estimate_aug_moments, make_blobs};
use proptest::prelude::*;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = gaussian(rng, n, d);
    for r in t.data_mut().chunks_exact_mut(d) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn linear_params(norm: NormGradient, seed: u64) -> ModelParams {
    let spec = CorrespondenceSpec { norm_gradient: norm, ..CorrespondenceSpec::default() };
    init_params(&spec.network(), seed).unwrap()
}

fn filtered() -> LossConfig {
    LossConfig {
        tangential: TangentialMode::GradientFilter,
        ..LossConfig::default()
    }
}

#[test]
fn aligned_views_margin_is_two() {
    let p = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let zt = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let v = ViewTensors { p1: p.clone(), p2: p, zt1: zt.clone(), zt2: zt };
    assert!((upper_bound_margin(1.0, 1.0, &v).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn coincident_representations_margin_is_zero() {
    let p = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
    let v = ViewTensors { p1: p.clone(), p2: p.clone(), zt1: p.clone(), zt2: p };
    assert_eq!(upper_bound_margin(0.5, 2.0, &v).unwrap(), 0.0);
}

#[test]
fn margin_rejects_nonpositive_weights() {
    let p = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let v = ViewTensors { p1: p.clone(), p2: p.clone(), zt1: p.clone(), zt2: p };
    assert!(matches!(upper_bound_margin(0.0, 1.0, &v), Err(Error::Precondition(_))));
}

#[test]
fn sweep_small_passes() {
    let r = upper_bound_sweep(30, 7).unwrap();
    assert!(r.passed, "{r:?}");
    assert_eq!(r.evaluations, 30 * 25);
    assert!(matches!(upper_bound_sweep(0, 7), Err(Error::Precondition(_))));
}

#[test]
fn model_state_margin_is_nonnegative() {
    let params = linear_params(NormGradient::Full, 3);
    let batch = gaussian_batch(16, 8, 4);
    assert!(check_upper_bound(1.0, 1.0, &params, &batch).unwrap() >= -1e-12);
}

#[test]
fn mirrored_gradients_agree_with_filter() {
    for seed in 0..5 {
        let params = linear_params(NormGradient::Detached, seed);
        let batch = gaussian_batch(32, 8, seed + 100);
        let dev = gradient_correspondence_check(&params, &batch, &filtered()).unwrap();
        assert!(dev.max() <= 1e-10, "{dev:?}");
    }
}

#[test]
fn negative_control_detects_radial_components() {
    let params = linear_params(NormGradient::Detached, 1);
    let batch = gaussian_batch(32, 8, 2);
    let dev = gradient_correspondence_check(&params, &batch, &LossConfig::default()).unwrap();
    assert!(dev.theta > 1e-4, "{dev:?}");
}

#[test]
fn non_linear_predictor_violates_condition_ii() {
    let spec = NetworkSpec { predictor: PredictorKind::Mlp, ..CorrespondenceSpec::default().network() };
    let params = init_params(&spec, 0).unwrap();
    let err = gradient_correspondence_check(&params, &gaussian_batch(4, 8, 0), &filtered()).unwrap_err();
    assert!(err.to_string().contains("condition ii: predictor must be linear"), "{err}");
    let spec = CorrespondenceSpec { predictor: PredictorKind::Mlp, ..CorrespondenceSpec::default() };
    let err = trajectory_correspondence_experiment(&spec, 1, 0).unwrap_err();
    assert!(err.to_string().contains("condition ii"), "{err}");
}

#[test]
fn zero_predictor_is_degenerate() {
    let mut params = linear_params(NormGradient::Detached, 0);
    params.predictor = Predictor::Linear(Tensor::zeros(&[8, 8]));
    let err = gradient_correspondence_check(&params, &gaussian_batch(4, 8, 0), &filtered()).unwrap_err();
    assert!(matches!(err, Error::DegenerateRepresentation { .. }), "{err:?}");
}

#[test]
fn zero_steps_are_exactly_mirrored() {
    let r = trajectory_correspondence_experiment(&CorrespondenceSpec::default(), 0, 3).unwrap();
    assert_eq!(r.series.len(), 1);
    assert_eq!(r.max_theta_dev, 0.0);
    assert_eq!(r.max_w_dev, 0.0);
    assert!(r.passed);
}

#[test]
fn short_trajectory_stays_mirrored() {
    let r = trajectory_correspondence_experiment(&CorrespondenceSpec::default(), 20, 1).unwrap();
    assert!(r.passed, "{} {}", r.relative_theta_dev, r.relative_w_dev);
    assert_eq!(r.series.len(), 21);
    assert!(r.series.iter().all(|s| s.theta_dev >= 0.0 && s.w_dev >= 0.0));
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,theta_dev,w_dev\n"));
    assert_eq!(text.lines().count(), 22);
}

#[test]
fn adam_trajectory_stays_mirrored() {
    let spec = CorrespondenceSpec { optimizer: OptimizerKind::Adam, lr: 1e-3, ..CorrespondenceSpec::default() };
    let r = trajectory_correspondence_experiment(&spec, 20, 2).unwrap();
    assert_eq!(r.optimizer, OptimizerKind::Adam);
    assert!(r.passed, "{} {}", r.relative_theta_dev, r.relative_w_dev);
}

#[test]
fn trajectories_split_without_filter() {
    let spec = CorrespondenceSpec { tangential: TangentialMode::Off, ..CorrespondenceSpec::default() };
    let r = trajectory_correspondence_experiment(&spec, 5, 0).unwrap();
    assert!(!r.passed);
}

#[test]
fn sylvester_analytic_cases() {
    let i2 = Tensor::identity(2);
    for n in 1..=8 {
        let id = Tensor::identity(n);
        let r = sylvester_null_space(&id, &id, &id, DEFAULT_PIVOT_TOL).unwrap();
        assert_eq!(r.null_dim, n * n);
        assert!(r.nontrivial);
        let two = id.map(|v| 2.0 * v);
        let r = sylvester_null_space(&two, &id, &id, DEFAULT_PIVOT_TOL).unwrap();
        assert_eq!(r.null_dim, 0);
        assert!(!r.nontrivial);
        assert_eq!(r.rank + r.null_dim, r.system_dim);
    }
    let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let r = sylvester_null_space(&w, &i2, &i2, DEFAULT_PIVOT_TOL).unwrap();
    assert_eq!(r.null_dim, 2);
}

#[test]
fn sylvester_flag_tracks_shared_eigenvalues() {
    // diagonal W and BA^-1: the null dimension counts matching eigenvalue pairs
    let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
    let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![6.0, 0.0], vec![0.0, 5.0]]).unwrap();
    // BA^-1 = diag(3, 5): eigenvalue 3 is shared with multiplicity 2 in W
    let r = sylvester_null_space(&w, &a, &b, DEFAULT_PIVOT_TOL).unwrap();
    assert_eq!(r.null_dim, 2);
    let b = Tensor::from_rows(&[vec![8.0, 0.0], vec![0.0, 5.0]]).unwrap();
    assert!(!sylvester_null_space(&w, &a, &b, DEFAULT_PIVOT_TOL).unwrap().nontrivial);
    // upper-triangular W keeps its diagonal spectrum
    let w = Tensor::from_rows(&[vec![2.0, 7.0], vec![0.0, 4.0]]).unwrap();
    let c = Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
    let r = sylvester_null_space(&w, &Tensor::identity(2), &c, DEFAULT_PIVOT_TOL).unwrap();
    assert_eq!(r.null_dim, 1);
}

#[test]
fn sylvester_errors() {
    let id = Tensor::identity(2);
    let singular = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
    assert!(matches!(
        sylvester_null_space(&id, &singular, &id, DEFAULT_PIVOT_TOL),
        Err(Error::SingularMoment(_))
    ));
    let big = Tensor::identity(13);
    assert!(matches!(
        sylvester_null_space(&big, &id, &id, DEFAULT_PIVOT_TOL),
        Err(Error::Precondition(_))
    ));
    assert!(sylvester_null_space(&id, &Tensor::identity(3), &id, DEFAULT_PIVOT_TOL).is_err());
}

#[test]
fn identity_augmentation_moments_feed_sylvester() {
    let data = make_blobs(&BlobsSpec { dim: 4, ..BlobsSpec::default() }).unwrap();
    let m = estimate_aug_moments(&data, &AugmentationSpec::identity(0), 4000, 9).unwrap();
    // identical views: B equals A, so BA^-1 = I and W = I is a fixed point
    let r = sylvester_from_moments(&Tensor::identity(3), &m, DEFAULT_PIVOT_TOL).unwrap();
    assert_eq!(r.null_dim, 12);
}

#[test]
fn gradcheck_every_loss() {
    let spec = NetworkSpec {
        input_dim: 5,
        hidden: vec![7],
        representation_dim: 6,
        projector_hidden: vec![7],
        projection_dim: 4,
        predictor: PredictorKind::Mlp,
        predictor_hidden: vec![5],
        ..NetworkSpec::default()
    };
    let mut params = init_params(&spec, 11).unwrap();
    for t in params.target.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 0.7);
    }
    let batch = gaussian_batch(6, 5, 12);
    for loss in GradcheckLoss::ALL {
        let r = finite_difference_gradcheck(loss, &params, &batch, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}: {}", loss.name(), r.max_rel_error);
        assert_eq!(r.checked, r.coordinates);
    }
}

#[test]
fn gradcheck_preconditions() {
    let params = linear_params(NormGradient::Full, 0);
    let batch = gaussian_batch(4, 8, 0);
    assert!(matches!(
        finite_difference_gradcheck(GradcheckLoss::Align, &params, &batch, 0.0),
        Err(Error::Precondition(_))
    ));
    let detached = linear_params(NormGradient::Detached, 0);
    assert!(matches!(
        finite_difference_gradcheck(GradcheckLoss::Align, &detached, &batch, 1e-5),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn relative_error_examples() {
    assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn margin_nonnegative_on_unit_vectors(seed in any::<u64>(), n in 1usize..10, d in 2usize..6,
                                          ai in 0usize..5, bi in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = ViewTensors {
            p1: unit_rows(&mut rng, n, d),
            p2: unit_rows(&mut rng, n, d),
            zt1: unit_rows(&mut rng, n, d),
            zt2: unit_rows(&mut rng, n, d),
        };
        prop_assert!(upper_bound_margin(WEIGHT_GRID[ai], WEIGHT_GRID[bi], &v).unwrap() >= -1e-12);
    }
}
