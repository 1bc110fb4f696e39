//! Alignment, uniformity and cross-model terms, and the BYOL / BYOL' / RAFT
//! objectives built from them.
//!
//! Every loss is recorded on a [`Graph`] so its gradient is available; the
//! `*_value` helpers evaluate on plain tensors for reporting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator guard for the stop-gradient tangential form.
pub const EPS_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Byol,
    ByolPrime,
    Raft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TangentialMode {
    #[default]
    Off,
    /// Distance terms rewritten as `|q - l p|^2 / l` with `l = sg(<p, q>)`.
    LossTrick,
    /// Loss unchanged; prediction gradients projected onto the sphere's tangent space.
    GradientFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub symmetrize: bool,
    pub tangential: TangentialMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Raft,
            alpha: 1.0,
            beta: 1.0,
            temperature: 2.0,
            symmetrize: true,
            tangential: TangentialMode::Off,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_weights(cfg: &LossConfig) -> Result<()> {
    for (field, v) in [("alpha", cfg.alpha), ("beta", cfg.beta)] {
        if v.is_nan() || v <= 0.0 {
            return Err(Error::config(field, format!("must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Mean squared distance between the two views' normalized outputs.
pub fn align_loss(g: &mut Graph, p1: Var, p2: Var) -> Result<Var> {
    let d = g.squared_distance(p1, p2)?;
    g.batch_mean(d)
}

/// `log` of the mean Gaussian kernel `exp(-t |z_i - z_j|^2)` over ordered
/// pairs `i != j`.
pub fn uniform_loss(g: &mut Graph, z: Var, t: f64) -> Result<Var> {
    let rows = g.value(z).rows();
    if rows < 2 {
        return Err(Error::InsufficientBatch {
            op: "uniform_loss",
            needed: 2,
            got: rows,
        });
    }
    let d = g.pairwise_sq_dist(z)?;
    let s = g.scale(d, -t);
    let k = g.exp(s);
    let m = g.off_diag_mean(k)?;
    g.log(m)
}

/// Mean squared distance between online predictions and target projections.
pub fn cross_model_loss(g: &mut Graph, p: Var, target: Var) -> Result<Var> {
    let d = g.squared_distance(p, target)?;
    g.batch_mean(d)
}

/// `(cross(p1, zt1) + cross(p2, zt2)) / 2`.
pub fn symmetrized_cross_model(g: &mut Graph, p1: Var, p2: Var, zt1: Var, zt2: Var) -> Result<Var> {
    let a = cross_model_loss(g, p1, zt1)?;
    let b = cross_model_loss(g, p2, zt2)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Prediction of one view regressed onto the target of the other; with
/// `swapped = Some((p2, zt1))` the two directions are averaged.
pub fn byol_loss(g: &mut Graph, p1: Var, zt2: Var, swapped: Option<(Var, Var)>) -> Result<Var> {
    let a = cross_model_loss(g, p1, zt2)?;
    match swapped {
        None => Ok(a),
        Some((p2, zt1)) => {
            let b = cross_model_loss(g, p2, zt1)?;
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
    }
}

/// `alpha * align + beta * symmetrized cross-model`.
pub fn byol_prime_loss(g: &mut Graph, cfg: &LossConfig, views: &Views) -> Result<Var> {
    check_weights(cfg)?;
    let align = align_loss(g, views.p1, views.p2)?;
    let cross = symmetrized_cross_model(g, views.p1, views.p2, views.zt1, views.zt2)?;
    combine(g, cfg.alpha, align, cfg.beta, cross)
}

/// `alpha * align - beta * symmetrized cross-model`.
pub fn raft_loss(g: &mut Graph, cfg: &LossConfig, views: &Views) -> Result<Var> {
    check_weights(cfg)?;
    let align = align_loss(g, views.p1, views.p2)?;
    let cross = symmetrized_cross_model(g, views.p1, views.p2, views.zt1, views.zt2)?;
    combine(g, cfg.alpha, align, -cfg.beta, cross)
}

fn combine(g: &mut Graph, wa: f64, a: Var, wb: f64, b: Var) -> Result<Var> {
    let a = g.scale(a, wa);
    let b = g.scale(b, wb);
    g.add(a, b)
}

/// Mean over rows of `|q - l p|^2 / l` with `l = sg(<p, q>)` and `q` detached.
///
/// Its gradient in `p` is `-2 (q - <p, q> p)`, the tangential part of the
/// plain squared-distance gradient at unit `p`.
pub fn tangential_cross_model_trick(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let q = g.stop_gradient(q);
    let dot = g.row_dot(p, q)?;
    let lambda = g.stop_gradient(dot);
    if let Some((row, &value)) = g
        .value(lambda)
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| v.abs() < EPS_LAMBDA)
    {
        return Err(Error::NearOrthogonal {
            row,
            value: value.abs(),
            eps: EPS_LAMBDA,
        });
    }
    let scaled = g.mul_rows(p, lambda)?;
    let d = g.squared_distance(q, scaled)?;
    let r = g.div(d, lambda)?;
    g.batch_mean(r)
}

/// Normalized online predictions and target projections for both views.
#[derive(Debug, Clone, Copy)]
pub struct Views {
    pub p1: Var,
    pub p2: Var,
    pub zt1: Var,
    pub zt2: Var,
}

/// The optimized objective plus its plain-form components for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub align: Var,
    pub cross: Var,
}

/// Objective dispatch, including both tangential modes.
pub fn total_loss(g: &mut Graph, cfg: &LossConfig, views: &Views) -> Result<LossParts> {
    cfg.validate()?;
    let mut v = *views;
    if cfg.tangential == TangentialMode::GradientFilter {
        v.p1 = g.tangential(v.p1)?;
        v.p2 = g.tangential(v.p2)?;
    }
    let align = align_loss(g, v.p1, v.p2)?;
    let cross = symmetrized_cross_model(g, v.p1, v.p2, v.zt1, v.zt2)?;

    let total = if cfg.tangential == TangentialMode::LossTrick {
        let trick_align = {
            let a = tangential_cross_model_trick(g, v.p1, v.p2)?;
            let b = tangential_cross_model_trick(g, v.p2, v.p1)?;
            g.add(a, b)?
        };
        let pair = |g: &mut Graph, x: Var, y: Var, u: Var, w: Var| -> Result<Var> {
            let a = tangential_cross_model_trick(g, x, y)?;
            let b = tangential_cross_model_trick(g, u, w)?;
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        };
        match cfg.objective {
            Objective::Byol if cfg.symmetrize => pair(g, v.p1, v.zt2, v.p2, v.zt1)?,
            Objective::Byol => tangential_cross_model_trick(g, v.p1, v.zt2)?,
            Objective::ByolPrime => {
                let c = pair(g, v.p1, v.zt1, v.p2, v.zt2)?;
                combine(g, cfg.alpha, trick_align, cfg.beta, c)?
            }
            Objective::Raft => {
                let c = pair(g, v.p1, v.zt1, v.p2, v.zt2)?;
                combine(g, cfg.alpha, trick_align, -cfg.beta, c)?
            }
        }
    } else {
        match cfg.objective {
            Objective::Byol => byol_loss(g, v.p1, v.zt2, cfg.symmetrize.then_some((v.p2, v.zt1)))?,
            Objective::ByolPrime => combine(g, cfg.alpha, align, cfg.beta, cross)?,
            Objective::Raft => combine(g, cfg.alpha, align, -cfg.beta, cross)?,
        }
    };
    Ok(LossParts { total, align, cross })
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).item())
}

pub fn align_value(p1: &Tensor, p2: &Tensor) -> Result<f64> {
    eval(|g| {
        let (a, b) = (g.constant(p1.clone()), g.constant(p2.clone()));
        align_loss(g, a, b)
    })
}

pub fn uniformity_value(z: &Tensor, t: f64) -> Result<f64> {
    eval(|g| {
        let zv = g.constant(z.clone());
        uniform_loss(g, zv, t)
    })
}

pub fn cross_model_value(p: &Tensor, target: &Tensor) -> Result<f64> {
    eval(|g| {
        let (a, b) = (g.constant(p.clone()), g.constant(target.clone()));
        cross_model_loss(g, a, b)
    })
}
