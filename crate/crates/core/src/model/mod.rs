//! Online network (backbone, projector, predictor), the EMA target network,
//! and the binary checkpoint format.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Mlp,
    Linear,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorInit {
    #[default]
    Random,
    /// `W = I`, the collapse fixed point of the identity predictor.
    Identity,
    /// `W = -W0` for a given square `W0`.
    Mirrored(Tensor),
}

/// How gradients pass through the row normalization onto the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormGradient {
    /// Full Jacobian `(I - u u^T) / |a|`.
    #[default]
    Full,
    /// Norm held constant: the radial gradient component survives, so the
    /// loss-side gradient reaches the pre-normalization vector unprojected.
    Detached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub representation_dim: usize,
    pub projector_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub predictor: PredictorKind,
    pub predictor_hidden: Vec<usize>,
    pub predictor_init: PredictorInit,
    pub norm_gradient: NormGradient,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden: vec![64, 64],
            representation_dim: 32,
            projector_hidden: vec![64],
            projection_dim: 16,
            predictor: PredictorKind::Linear,
            predictor_hidden: vec![64],
            predictor_init: PredictorInit::Random,
            norm_gradient: NormGradient::Full,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("representation_dim", self.representation_dim),
            ("projection_dim", self.projection_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, widths) in [
            ("hidden", &self.hidden),
            ("projector_hidden", &self.projector_hidden),
            ("predictor_hidden", &self.predictor_hidden),
        ] {
            if widths.contains(&0) {
                return Err(Error::config(field, "layer widths must be positive"));
            }
        }
        match (&self.predictor_init, self.predictor) {
            (PredictorInit::Random, _) => {}
            (PredictorInit::Identity, PredictorKind::Linear) => {}
            (PredictorInit::Identity, _) => {
                return Err(Error::config("predictor_init", "identity init requires a linear predictor"))
            }
            (PredictorInit::Mirrored(w0), PredictorKind::Linear) => {
                let p = self.projection_dim;
                if w0.shape() != [p, p] {
                    return Err(Error::config(
                        "predictor_init",
                        format!("mirrored source has shape {:?}, expected [{p}, {p}]", w0.shape()),
                    ));
                }
            }
            (PredictorInit::Mirrored(_), _) => {
                return Err(Error::config("predictor_init", "mirrored init requires a linear predictor"))
            }
        }
        Ok(())
    }
}

/// Dense layer `y = x . W + b` with `W` stored `[in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub backbone: Mlp,
    pub projector: Mlp,
}

/// Predictor head on the online path.
///
/// The linear variant stores `M = W^T` so that batched rows map as `y . M`;
/// the column-vector map is `W y`.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Identity,
    Linear(Tensor),
    Mlp(Mlp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    pub online: Encoder,
    pub predictor: Predictor,
    pub target: Encoder,
}

fn uniform_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    let weight = Tensor::matrix(fan_in, fan_out, data).expect("layer shape");
    let bias = bias.then(|| Tensor::zeros(&[fan_out]));
    Linear { weight, bias }
}

fn random_mlp(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], output: usize) -> Mlp {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    Mlp {
        layers: dims.windows(2).map(|w| uniform_layer(rng, w[0], w[1], true)).collect(),
    }
}

/// Deterministic initialization; the target starts as an exact copy of the
/// online backbone and projector.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = random_mlp(&mut rng, spec.input_dim, &spec.hidden, spec.representation_dim);
    let projector = random_mlp(&mut rng, spec.representation_dim, &spec.projector_hidden, spec.projection_dim);
    let p = spec.projection_dim;
    let predictor = match (spec.predictor, &spec.predictor_init) {
        (PredictorKind::Identity, _) => Predictor::Identity,
        (PredictorKind::Mlp, _) => Predictor::Mlp(random_mlp(&mut rng, p, &spec.predictor_hidden, p)),
        (PredictorKind::Linear, PredictorInit::Random) => Predictor::Linear(uniform_layer(&mut rng, p, p, false).weight),
        (PredictorKind::Linear, PredictorInit::Identity) => Predictor::Linear(Tensor::identity(p)),
        (PredictorKind::Linear, PredictorInit::Mirrored(w0)) => Predictor::Linear(w0.neg()),
    };
    let online = Encoder { backbone, projector };
    Ok(ModelParams {
        spec: spec.clone(),
        target: online.clone(),
        online,
        predictor,
    })
}

/// `xi <- tau * xi + (1 - tau) * theta`, elementwise.
pub fn ema_update(target: &mut Encoder, online: &Encoder, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config("tau", format!("{tau} is outside [0, 1]")));
    }
    for (xi, theta) in target.tensors_mut().into_iter().zip(online.tensors()) {
        if xi.shape() != theta.shape() {
            return Err(Error::dim("ema_update", "target and online shapes differ"));
        }
        xi.data_mut()
            .iter_mut()
            .zip(theta.data())
            .for_each(|(x, t)| *x = tau * *x + (1.0 - tau) * t);
    }
    Ok(())
}

impl Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.weight).chain(l.bias.as_ref()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.weight).chain(l.bias.as_mut()))
            .collect()
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
        }
        out
    }
}

impl Encoder {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.tensors();
        v.extend(self.projector.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.projector.tensors_mut());
        v
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named(&format!("{prefix}.backbone"));
        v.extend(self.projector.named(&format!("{prefix}.projector")));
        v
    }
}

impl ModelParams {
    /// Trainable tensors (online encoder then predictor) in canonical order.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut v = self.online.tensors();
        match &self.predictor {
            Predictor::Identity => {}
            Predictor::Linear(w) => v.push(w),
            Predictor::Mlp(m) => v.extend(m.tensors()),
        }
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.online.tensors_mut();
        match &mut self.predictor {
            Predictor::Identity => {}
            Predictor::Linear(w) => v.push(w),
            Predictor::Mlp(m) => v.extend(m.tensors_mut()),
        }
        v
    }

    /// Number of online-encoder tensors at the front of [`Self::trainable`].
    pub fn encoder_tensor_count(&self) -> usize {
        self.online.tensors().len()
    }

    /// Every tensor with its checkpoint name: online, predictor, target.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.online.named("online");
        match &self.predictor {
            Predictor::Identity => {}
            Predictor::Linear(w) => v.push(("predictor.weight".to_string(), w)),
            Predictor::Mlp(m) => v.extend(m.named("predictor")),
        }
        v.extend(self.target.named("target"));
        v
    }

    /// Order-sensitive checksum over every parameter bit pattern (FNV-1a).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Largest absolute difference over all tensors of two same-layout models.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Option<f64> {
        let a = self.named_tensors();
        let b = other.named_tensors();
        if a.len() != b.len() {
            return None;
        }
        a.iter()
            .zip(&b)
            .map(|((_, x), (_, y))| x.max_abs_diff(y))
            .try_fold(0.0_f64, |m, d| d.map(|d| m.max(d)))
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let online = EncoderVars::bind(&self.online, g, true);
        let predictor = match &self.predictor {
            Predictor::Identity => PredictorVars::Identity,
            Predictor::Linear(w) => PredictorVars::Linear(g.param(w.clone())),
            Predictor::Mlp(m) => PredictorVars::Mlp(bind_mlp(m, g, true)),
        };
        let target = EncoderVars::bind(&self.target, g, false);
        let mut trainable = online.vars();
        match &predictor {
            PredictorVars::Identity => {}
            PredictorVars::Linear(w) => trainable.push(*w),
            PredictorVars::Mlp(layers) => trainable.extend(layers.iter().flat_map(LinearVars::vars)),
        }
        BoundParams {
            norm: self.spec.norm_gradient,
            online,
            predictor,
            target,
            trainable,
        }
    }

    /// `(h, z, p)` for a batch, evaluated on a throwaway graph.
    pub fn forward_online(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = bound.online(&mut g, xv)?;
        Ok((g.value(out.h).clone(), g.value(out.z).clone(), g.value(out.p).clone()))
    }

    pub fn forward_target(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let zt = bound.target(&mut g, xv)?;
        Ok(g.value(zt).clone())
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearVars {
    w: Var,
    b: Option<Var>,
}

impl LinearVars {
    fn vars(&self) -> Vec<Var> {
        std::iter::once(self.w).chain(self.b).collect()
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add_bias(y, b),
            None => Ok(y),
        }
    }
}

fn bind_mlp(m: &Mlp, g: &mut Graph, trainable: bool) -> Vec<LinearVars> {
    let mut reg = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    m.layers
        .iter()
        .map(|l| LinearVars {
            w: reg(&l.weight),
            b: l.bias.as_ref().map(&mut reg),
        })
        .collect()
}

/// ReLU between layers; `relu_last` also rectifies the final output.
fn apply_mlp(layers: &[LinearVars], g: &mut Graph, mut x: Var, relu_last: bool) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        x = l.apply(g, x)?;
        if i + 1 < layers.len() || relu_last {
            x = g.relu(x);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
struct EncoderVars {
    backbone: Vec<LinearVars>,
    projector: Vec<LinearVars>,
}

impl EncoderVars {
    fn bind(e: &Encoder, g: &mut Graph, trainable: bool) -> Self {
        Self {
            backbone: bind_mlp(&e.backbone, g, trainable),
            projector: bind_mlp(&e.projector, g, trainable),
        }
    }

    fn vars(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .chain(&self.projector)
            .flat_map(LinearVars::vars)
            .collect()
    }

    /// Backbone output `h` (rectified) and raw projector output.
    fn apply(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let h = apply_mlp(&self.backbone, g, x, true)?;
        let y = apply_mlp(&self.projector, g, h, false)?;
        Ok((h, y))
    }
}

#[derive(Debug, Clone)]
enum PredictorVars {
    Identity,
    Linear(Var),
    Mlp(Vec<LinearVars>),
}

/// Graph nodes of one online forward pass.
#[derive(Debug, Clone, Copy)]
pub struct OnlineOutputs {
    /// Backbone representation.
    pub h: Var,
    /// Unnormalized projector output.
    pub y: Var,
    /// Normalized projection.
    pub z: Var,
    /// Normalized prediction.
    pub p: Var,
}

/// A [`ModelParams`] registered on a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    norm: NormGradient,
    online: EncoderVars,
    predictor: PredictorVars,
    target: EncoderVars,
    trainable: Vec<Var>,
}

impl BoundParams {
    /// Trainable leaves in the order of [`ModelParams::trainable`].
    pub fn trainable(&self) -> &[Var] {
        &self.trainable
    }

    fn normalize(&self, g: &mut Graph, a: Var) -> Result<Var> {
        match self.norm {
            NormGradient::Full => g.l2_normalize(a),
            NormGradient::Detached => g.l2_normalize_detached(a),
        }
    }

    pub fn online(&self, g: &mut Graph, x: Var) -> Result<OnlineOutputs> {
        let (h, y) = self.online.apply(g, x)?;
        let z = self.normalize(g, y)?;
        let p = match &self.predictor {
            PredictorVars::Identity => z,
            PredictorVars::Linear(w) => {
                let q = g.matmul(y, *w)?;
                self.normalize(g, q)?
            }
            PredictorVars::Mlp(layers) => {
                let q = apply_mlp(layers, g, y, false)?;
                self.normalize(g, q)?
            }
        };
        Ok(OnlineOutputs { h, y, z, p })
    }

    /// Normalized target projection, detached from every gradient.
    pub fn target(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, y) = self.target.apply(g, x)?;
        let z = g.l2_normalize(y)?;
        Ok(g.stop_gradient(z))
    }
}
