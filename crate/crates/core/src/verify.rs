//! Numerical certificates: the BYOL' upper bound on BYOL, the mirrored
//! BYOL' / RAFT correspondence, the Sylvester fixed-point analysis, and a
//! finite-difference gradient oracle for the composed losses.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OptimizerKind, Tensor, Var};
use crate::data::{make_blobs, AugMoments, AugmentationSpec, BlobsSpec, DataSource, PositiveBatch};
use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::{
    align_loss, byol_loss, cross_model_loss, cross_model_value, total_loss, uniform_loss, LossConfig, Objective,
    TangentialMode, Views,
};
use crate::model::{init_params, ModelParams, NetworkSpec, NormGradient, Predictor, PredictorKind};
use crate::seed::{derive_seed, TAG_INIT};
use crate::train::{Schedule, TrainConfig, Trainer};

/// Weight grid swept by [`upper_bound_sweep`].
pub const WEIGHT_GRID: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 10.0];

/// Largest `n` or `m` accepted by [`sylvester_null_space`].
pub const SYLVESTER_MAX_DIM: usize = 12;

pub const DEFAULT_PIVOT_TOL: f64 = 1e-10;

/// Projections and predictions of both views, as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTensors {
    pub p1: Tensor,
    pub p2: Tensor,
    pub zt1: Tensor,
    pub zt2: Tensor,
}

impl ViewTensors {
    pub fn forward(params: &ModelParams, batch: &PositiveBatch) -> Result<Self> {
        let (_, _, p1) = params.forward_online(&batch.x1)?;
        let (_, _, p2) = params.forward_online(&batch.x2)?;
        Ok(Self {
            p1,
            p2,
            zt1: params.forward_target(&batch.x1)?,
            zt2: params.forward_target(&batch.x2)?,
        })
    }
}

/// `(1/alpha + 1/beta) * L_byol' - L_byol` on fixed states, both losses in
/// their symmetrized form.
pub fn upper_bound_margin(alpha: f64, beta: f64, v: &ViewTensors) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Precondition(format!("weights must be positive, got alpha={alpha} beta={beta}")));
    }
    let align = cross_model_value(&v.p1, &v.p2)?;
    let cross = 0.5 * (cross_model_value(&v.p1, &v.zt1)? + cross_model_value(&v.p2, &v.zt2)?);
    let byol = 0.5 * (cross_model_value(&v.p1, &v.zt2)? + cross_model_value(&v.p2, &v.zt1)?);
    Ok((1.0 / alpha + 1.0 / beta) * (alpha * align + beta * cross) - byol)
}

pub fn check_upper_bound(alpha: f64, beta: f64, params: &ModelParams, batch: &PositiveBatch) -> Result<f64> {
    upper_bound_margin(alpha, beta, &ViewTensors::forward(params, batch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpperBoundReport {
    pub trials: usize,
    pub evaluations: usize,
    pub min_margin: f64,
    pub worst_alpha: f64,
    pub worst_beta: f64,
    pub worst_trial: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("gaussian shape")
}

/// Random states: each trial draws a network (predictor kind and target drift
/// vary with the trial index) and a Gaussian batch pair, then evaluates every
/// `(alpha, beta)` on [`WEIGHT_GRID`].
pub fn upper_bound_sweep(trials: usize, seed: u64) -> Result<UpperBoundReport> {
    if trials == 0 {
        return Err(Error::Precondition("at least one trial is required".into()));
    }
    let mut worst = (f64::INFINITY, 0.0, 0.0, 0);
    for trial in 0..trials {
        let s = derive_seed(seed, trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let predictor = [PredictorKind::Linear, PredictorKind::Mlp, PredictorKind::Identity][trial % 3];
        let spec = NetworkSpec {
            input_dim: 6,
            hidden: vec![12],
            representation_dim: 8,
            projector_hidden: vec![12],
            projection_dim: 4,
            predictor,
            predictor_hidden: vec![8],
            ..NetworkSpec::default()
        };
        let mut params = init_params(&spec, s)?;
        // random biases everywhere, and a target moved off the online copy so
        // the cross terms are not trivial
        for t in params.trainable_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let drift = rng.random_range(0.0..1.0);
        for t in params.target.tensors_mut() {
            for v in t.data_mut() {
                *v += drift * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let rows = rng.random_range(1..=16);
        let x1 = gaussian(&mut rng, rows, 6);
        let x2 = gaussian(&mut rng, rows, 6);
        let batch = PositiveBatch {
            x1,
            x2,
            labels: vec![0; rows],
            indices: (0..rows).collect(),
        };
        let views = ViewTensors::forward(&params, &batch)?;
        for &a in &WEIGHT_GRID {
            for &b in &WEIGHT_GRID {
                let m = upper_bound_margin(a, b, &views)?;
                if m < worst.0 {
                    worst = (m, a, b, trial);
                }
            }
        }
    }
    let tolerance = -1e-9;
    Ok(UpperBoundReport {
        trials,
        evaluations: trials * WEIGHT_GRID.len() * WEIGHT_GRID.len(),
        min_margin: worst.0,
        worst_alpha: worst.1,
        worst_beta: worst.2,
        worst_trial: worst.3,
        tolerance,
        passed: worst.0 >= tolerance,
    })
}

/// Gradient mismatch between BYOL' at `(theta, W)` and RAFT at `(theta, -W)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientDeviation {
    /// `max |g_theta(BYOL') - g_theta(RAFT)|`.
    pub theta: f64,
    /// `max |g_W(BYOL') + g_W(RAFT)|`.
    pub w: f64,
}

impl GradientDeviation {
    pub fn max(&self) -> f64 {
        self.theta.max(self.w)
    }
}

fn require_linear(params: &ModelParams) -> Result<&Tensor> {
    match &params.predictor {
        Predictor::Linear(m) => Ok(m),
        _ => Err(Error::Precondition(
            "condition ii: predictor must be linear for the BYOL'/RAFT correspondence".into(),
        )),
    }
}

/// Copy of `params` with the linear predictor negated.
pub fn mirrored(params: &ModelParams) -> Result<ModelParams> {
    let m = require_linear(params)?;
    Ok(ModelParams {
        predictor: Predictor::Linear(m.neg()),
        ..params.clone()
    })
}

fn loss_gradients(params: &ModelParams, batch: &PositiveBatch, cfg: &LossConfig) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x1 = g.constant(batch.x1.clone());
    let x2 = g.constant(batch.x2.clone());
    let o1 = bound.online(&mut g, x1)?;
    let o2 = bound.online(&mut g, x2)?;
    let views = Views {
        p1: o1.p,
        p2: o2.p,
        zt1: bound.target(&mut g, x1)?,
        zt2: bound.target(&mut g, x2)?,
    };
    let parts = total_loss(&mut g, cfg, &views)?;
    let grads = g.backward(parts.total)?;
    Ok(bound.trainable().iter().map(|&v| grads.wrt(v).clone()).collect())
}

fn max_abs_combined(a: &[Tensor], b: &[Tensor], sign: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(move |(u, v)| (u + sign * v).abs()))
        .fold(0.0, f64::max)
}

fn split_deviation(params: &ModelParams, byol: &[Tensor], raft: &[Tensor]) -> GradientDeviation {
    let k = params.encoder_tensor_count();
    GradientDeviation {
        theta: max_abs_combined(&byol[..k], &raft[..k], -1.0),
        w: max_abs_combined(&byol[k..], &raft[k..], 1.0),
    }
}

/// Evaluates BYOL' at `params` and RAFT at its mirror on one batch with the
/// shared target. `loss.objective` is ignored; `loss.tangential` applies to
/// both. The identities hold with the gradient filter on and a detached
/// normalization (`params.spec.norm_gradient`); with the filter off the
/// radial components differ.
pub fn gradient_correspondence_check(
    params: &ModelParams,
    batch: &PositiveBatch,
    loss: &LossConfig,
) -> Result<GradientDeviation> {
    let mirror = mirrored(params)?;
    let byol = loss_gradients(params, batch, &LossConfig { objective: Objective::ByolPrime, ..loss.clone() })?;
    let raft = loss_gradients(&mirror, batch, &LossConfig { objective: Objective::Raft, ..loss.clone() })?;
    Ok(split_deviation(params, &byol, &raft))
}

/// Setup of the mirrored trajectory experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondenceSpec {
    /// Input dimension `d`.
    pub dim: usize,
    /// Dataset size; every step uses the full dataset.
    pub samples: usize,
    pub hidden: Vec<usize>,
    pub representation_dim: usize,
    pub projector_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub predictor: PredictorKind,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tangential: TangentialMode,
    pub norm_gradient: NormGradient,
    pub augmentation: AugmentationSpec,
}

impl Default for CorrespondenceSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            samples: 64,
            hidden: vec![32],
            representation_dim: 16,
            projector_hidden: vec![32],
            projection_dim: 8,
            predictor: PredictorKind::Linear,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            tau: 0.996,
            alpha: 1.0,
            beta: 1.0,
            tangential: TangentialMode::GradientFilter,
            norm_gradient: NormGradient::Detached,
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl CorrespondenceSpec {
    pub fn network(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.dim,
            hidden: self.hidden.clone(),
            representation_dim: self.representation_dim,
            projector_hidden: self.projector_hidden.clone(),
            projection_dim: self.projection_dim,
            predictor: self.predictor,
            norm_gradient: self.norm_gradient,
            ..NetworkSpec::default()
        }
    }

    pub fn loss(&self, objective: Objective) -> LossConfig {
        LossConfig {
            objective,
            alpha: self.alpha,
            beta: self.beta,
            tangential: self.tangential,
            ..LossConfig::default()
        }
    }

    fn data(&self, seed: u64) -> DataSource {
        let classes = 4;
        DataSource::Blobs(BlobsSpec {
            dim: self.dim,
            classes,
            per_class: self.samples.div_ceil(classes),
            seed,
            ..BlobsSpec::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDeviation {
    pub step: usize,
    /// `max |theta_byol' - theta_raft|` over online and target tensors.
    pub theta_dev: f64,
    /// `max |W_byol' + W_raft|`.
    pub w_dev: f64,
    /// Gradient deviations of the step that produced this state (zero at step 0).
    pub grad: GradientDeviation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrespondenceReport {
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub spec: CorrespondenceSpec,
    pub seed: u64,
    pub max_theta_dev: f64,
    pub max_w_dev: f64,
    /// Largest `|theta|` entry over the BYOL' run.
    pub theta_scale: f64,
    pub w_scale: f64,
    pub relative_theta_dev: f64,
    pub relative_w_dev: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Entry 0 is the mirrored initialization.
    pub series: Vec<StepDeviation>,
}

impl CorrespondenceReport {
    /// CSV with columns `step,theta_dev,w_dev`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,theta_dev,w_dev")?;
        for s in &self.series {
            writeln!(w, "{},{:e},{:e}", s.step, s.theta_dev, s.w_dev)?;
        }
        Ok(())
    }
}

fn state_deviation(a: &ModelParams, b: &ModelParams) -> Result<(f64, f64)> {
    let mut theta = 0.0_f64;
    for (x, y) in a.online.tensors().into_iter().zip(b.online.tensors()).chain(a.target.tensors().into_iter().zip(b.target.tensors())) {
        theta = theta.max(x.max_abs_diff(y).ok_or_else(|| Error::dim("state_deviation", "shape mismatch"))?);
    }
    let w = match (&a.predictor, &b.predictor) {
        (Predictor::Linear(x), Predictor::Linear(y)) => max_abs_combined(std::slice::from_ref(x), std::slice::from_ref(y), 1.0),
        _ => return Err(Error::Precondition("condition ii: predictor must be linear".into())),
    };
    Ok((theta, w))
}

fn encoder_scale(p: &ModelParams) -> f64 {
    p.online.tensors().iter().map(|t| t.max_abs()).fold(0.0, f64::max)
}

/// Trains BYOL' from `(theta0, W0)` and RAFT from `(theta0, -W0)` on the same
/// full batches and augmentations, recording deviations after every step.
pub fn trajectory_correspondence_experiment(
    spec: &CorrespondenceSpec,
    steps: usize,
    seed: u64,
) -> Result<CorrespondenceReport> {
    if spec.predictor != PredictorKind::Linear {
        return Err(Error::Precondition(format!(
            "condition ii: predictor must be linear, got {:?}",
            spec.predictor
        )));
    }
    if spec.tangential == TangentialMode::Off {
        log::warn!("tangential filtering is off; the trajectories are not expected to correspond");
    }
    let data = spec.data(seed).load()?;
    let init = init_params(&spec.network(), derive_seed(seed, TAG_INIT))?;
    let mirror = mirrored(&init)?;
    let base = TrainConfig {
        steps: steps.max(1),
        batch_size: data.len(),
        optimizer: spec.optimizer,
        lr: Schedule::Constant(spec.lr),
        tau: Schedule::Constant(spec.tau),
        seed,
        log_every: 1,
        augmentation: spec.augmentation.clone(),
        ..TrainConfig::default()
    };
    let cfg_b = TrainConfig { loss: spec.loss(Objective::ByolPrime), ..base.clone() };
    let cfg_r = TrainConfig { loss: spec.loss(Objective::Raft), ..base };
    let mut tb = Trainer::with_params(&cfg_b, &data, init.clone())?;
    let mut tr = Trainer::with_params(&cfg_r, &data, mirror)?;

    let (theta0, w0) = state_deviation(tb.params(), tr.params())?;
    let mut series = vec![StepDeviation {
        step: 0,
        theta_dev: theta0,
        w_dev: w0,
        grad: GradientDeviation { theta: 0.0, w: 0.0 },
    }];
    let mut theta_scale = encoder_scale(&init);
    let mut w_scale = require_linear(&init)?.max_abs();
    for _ in 0..steps {
        let ob = tb.step()?;
        let or = tr.step()?;
        let (theta_dev, w_dev) = state_deviation(tb.params(), tr.params())?;
        theta_scale = theta_scale.max(encoder_scale(tb.params()));
        w_scale = w_scale.max(require_linear(tb.params())?.max_abs());
        series.push(StepDeviation {
            step: ob.step,
            theta_dev,
            w_dev,
            grad: split_deviation(tb.params(), &ob.grads, &or.grads),
        });
    }
    let max_theta_dev = series.iter().map(|s| s.theta_dev).fold(0.0, f64::max);
    let max_w_dev = series.iter().map(|s| s.w_dev).fold(0.0, f64::max);
    let relative_theta_dev = max_theta_dev / theta_scale.max(f64::MIN_POSITIVE);
    let relative_w_dev = max_w_dev / w_scale.max(f64::MIN_POSITIVE);
    let tolerance = 1e-6;
    Ok(CorrespondenceReport {
        steps,
        optimizer: spec.optimizer,
        spec: spec.clone(),
        seed,
        max_theta_dev,
        max_w_dev,
        theta_scale,
        w_scale,
        relative_theta_dev,
        relative_w_dev,
        tolerance,
        passed: relative_theta_dev <= tolerance && relative_w_dev <= tolerance,
        series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SylvesterReport {
    pub a: Tensor,
    pub b: Tensor,
    pub ba_inv: Tensor,
    /// `n * m`, the side of the Kronecker system.
    pub system_dim: usize,
    pub rank: usize,
    pub null_dim: usize,
    /// A nonzero `theta` solves `W theta = theta B A^-1`.
    pub nontrivial: bool,
    pub pivot_tol: f64,
}

/// Null space of `theta -> W theta - theta B A^-1` for `W` of size `n x n` and
/// `A`, `B` of size `m x m`, via the explicit matrix
/// `I_m (x) W - (B A^-1)^T (x) I_n` acting on column-major `vec(theta)`.
/// Pivots at or below `pivot_tol * max(|W|, |B A^-1|)` count as zero.
pub fn sylvester_null_space(w: &Tensor, a: &Tensor, b: &Tensor, pivot_tol: f64) -> Result<SylvesterReport> {
    if !(pivot_tol > 0.0 && pivot_tol < 1.0) {
        return Err(Error::Precondition(format!("pivot tolerance {pivot_tol} must lie in (0, 1)")));
    }
    let (n, nc) = w.dims2("sylvester W")?;
    let (m, mc) = a.dims2("sylvester A")?;
    if n != nc || m != mc || b.shape() != a.shape() {
        return Err(Error::dim(
            "sylvester_null_space",
            format!("W {:?}, A {:?}, B {:?} must be square with A, B alike", w.shape(), a.shape(), b.shape()),
        ));
    }
    if n > SYLVESTER_MAX_DIM || m > SYLVESTER_MAX_DIM {
        return Err(Error::Precondition(format!(
            "dimensions {n} and {m} exceed the cap of {SYLVESTER_MAX_DIM}"
        )));
    }
    let a_inv = linalg::inverse(a, pivot_tol)?;
    let ba_inv = b.matmul(&a_inv)?;
    let left = linalg::kron(&Tensor::identity(m), w)?;
    let right = linalg::kron(&ba_inv.transpose()?, &Tensor::identity(n))?;
    let system = Tensor::matrix(
        n * m,
        n * m,
        left.data().iter().zip(right.data()).map(|(l, r)| l - r).collect(),
    )?;
    // pivots are judged against the scale of the two Kronecker terms, not of
    // their difference, which vanishes exactly when W matches B A^-1
    let scale = w.max_abs().max(ba_inv.max_abs());
    let rank = linalg::rank_below(&system, pivot_tol * scale)?;
    let null_dim = n * m - rank;
    Ok(SylvesterReport {
        a: a.clone(),
        b: b.clone(),
        ba_inv,
        system_dim: n * m,
        rank,
        null_dim,
        nontrivial: null_dim > 0,
        pivot_tol,
    })
}

/// [`sylvester_null_space`] on Monte-Carlo moments.
pub fn sylvester_from_moments(w: &Tensor, moments: &AugMoments, pivot_tol: f64) -> Result<SylvesterReport> {
    sylvester_null_space(w, &moments.a, &moments.b, pivot_tol)
}

/// Loss whose tape gradient [`finite_difference_gradcheck`] compares against
/// central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum GradcheckLoss {
    Align,
    Uniformity { temperature: f64 },
    /// Symmetrized cross-model term on matching views.
    CrossModel,
    Byol,
    ByolPrime { alpha: f64, beta: f64 },
    Raft { alpha: f64, beta: f64 },
}

impl GradcheckLoss {
    pub const ALL: [GradcheckLoss; 6] = [
        GradcheckLoss::Align,
        GradcheckLoss::Uniformity { temperature: 2.0 },
        GradcheckLoss::CrossModel,
        GradcheckLoss::Byol,
        GradcheckLoss::ByolPrime { alpha: 1.0, beta: 1.0 },
        GradcheckLoss::Raft { alpha: 1.0, beta: 1.0 },
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradcheckLoss::Align => "align",
            GradcheckLoss::Uniformity { .. } => "uniformity",
            GradcheckLoss::CrossModel => "cross_model",
            GradcheckLoss::Byol => "byol",
            GradcheckLoss::ByolPrime { .. } => "byol_prime",
            GradcheckLoss::Raft { .. } => "raft",
        }
    }

    fn build(&self, g: &mut Graph, params: &ModelParams, batch: &PositiveBatch) -> Result<(Var, Vec<Var>)> {
        let bound = params.bind(g);
        let x1 = g.constant(batch.x1.clone());
        let x2 = g.constant(batch.x2.clone());
        let o1 = bound.online(g, x1)?;
        let o2 = bound.online(g, x2)?;
        let zt1 = bound.target(g, x1)?;
        let zt2 = bound.target(g, x2)?;
        let views = Views { p1: o1.p, p2: o2.p, zt1, zt2 };
        let weighted = |objective, alpha, beta| LossConfig {
            objective,
            alpha,
            beta,
            ..LossConfig::default()
        };
        let out = match *self {
            GradcheckLoss::Align => align_loss(g, o1.p, o2.p)?,
            GradcheckLoss::Uniformity { temperature } => uniform_loss(g, o1.z, temperature)?,
            GradcheckLoss::CrossModel => {
                let a = cross_model_loss(g, o1.p, zt1)?;
                let b = cross_model_loss(g, o2.p, zt2)?;
                let s = g.add(a, b)?;
                g.scale(s, 0.5)
            }
            GradcheckLoss::Byol => byol_loss(g, o1.p, zt2, Some((o2.p, zt1)))?,
            GradcheckLoss::ByolPrime { alpha, beta } => {
                total_loss(g, &weighted(Objective::ByolPrime, alpha, beta), &views)?.total
            }
            GradcheckLoss::Raft { alpha, beta } => total_loss(g, &weighted(Objective::Raft, alpha, beta), &views)?.total,
        };
        Ok((out, bound.trainable().to_vec()))
    }

    fn value(&self, params: &ModelParams, batch: &PositiveBatch) -> Result<f64> {
        let mut g = Graph::new();
        let (out, _) = self.build(&mut g, params, batch)?;
        Ok(g.value(out).item())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: GradcheckLoss,
    pub step: f64,
    pub coordinates: usize,
    pub checked: usize,
    /// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-12)`.
    pub max_rel_error: f64,
}

/// Coordinates above this count are subsampled.
pub const GRADCHECK_MAX_COORDS: usize = 10_000;

/// Scale-aware error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-12)
}

/// Central differences on every trainable coordinate (a fixed random subset
/// when there are more than [`GRADCHECK_MAX_COORDS`]) against the tape.
/// Requires the full normalization Jacobian: the detached variant is not the
/// gradient of any loss.
pub fn finite_difference_gradcheck(
    loss: GradcheckLoss,
    params: &ModelParams,
    batch: &PositiveBatch,
    step: f64,
) -> Result<GradcheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Precondition(format!("finite-difference step {step} must be positive")));
    }
    if params.spec.norm_gradient != NormGradient::Full {
        return Err(Error::Precondition(
            "gradcheck needs the full normalization Jacobian (norm_gradient = full)".into(),
        ));
    }
    let mut g = Graph::new();
    let (out, leaves) = loss.build(&mut g, params, batch)?;
    let grads = g.backward(out)?;
    let analytic_all: Vec<f64> = leaves.iter().flat_map(|&v| grads.wrt(v).data().to_vec()).collect();

    let sizes: Vec<usize> = params.trainable().iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total > GRADCHECK_MAX_COORDS {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(0x6772_6164), total, GRADCHECK_MAX_COORDS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..total).collect()
    };

    let mut probe = params.clone();
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for &flat in &picks {
        let (mut t, mut off) = (0, flat);
        while off >= sizes[t] {
            off -= sizes[t];
            t += 1;
        }
        let orig = params.trainable()[t].data()[off];
        probe.trainable_mut()[t].data_mut()[off] = orig + step;
        let plus = loss.value(&probe, batch)?;
        probe.trainable_mut()[t].data_mut()[off] = orig - step;
        let minus = loss.value(&probe, batch)?;
        probe.trainable_mut()[t].data_mut()[off] = orig;
        numeric.push((plus - minus) / (2.0 * step));
        analytic.push(analytic_all[flat]);
    }
    Ok(GradcheckReport {
        loss,
        step,
        coordinates: total,
        checked: picks.len(),
        max_rel_error: relative_error(&analytic, &numeric),
    })
}

/// A random batch of `rows` Gaussian view pairs in `dim` dimensions.
pub fn gaussian_batch(rows: usize, dim: usize, seed: u64) -> PositiveBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PositiveBatch {
        x1: gaussian(&mut rng, rows, dim),
        x2: gaussian(&mut rng, rows, dim),
        labels: vec![0; rows],
        indices: (0..rows).collect(),
    }
}

/// A blobs batch with the default augmentation, used by the CLI checks.
pub fn blobs_batch(spec: &BlobsSpec, rows: usize, seed: u64) -> Result<PositiveBatch> {
    let data = make_blobs(spec)?;
    let aug = AugmentationSpec { seed, ..AugmentationSpec::default() };
    crate::data::sample_positive_batch(&data, &aug, rows, 0)
}

#[cfg(test)]
mod tests;
