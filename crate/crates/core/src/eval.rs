//! Post-training measures: the linear probe, alignment and uniformity on
//! fresh samples, and representation export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, OptimizerKind, Tensor};
use crate::data::{AugmentationSpec, Dataset};
use crate::error::{Error, Result};
use crate::losses::{align_value, uniformity_value};
use crate::model::ModelParams;
use crate::seed::{derive_seed, TAG_EVAL, TAG_PROBE};
use crate::train::COLLAPSE_THRESHOLD;

/// Softmax regression trained with Adam from zero weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the data used for fitting; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 100,
            batch_size: 32,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("probe.lr", "must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("probe", "epochs and batch_size must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("probe.train_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

fn logits(x: &[f64], w: &[f64], b: &[f64], classes: usize) -> Vec<f64> {
    let mut out = b.to_vec();
    for (xi, wrow) in x.iter().zip(w.chunks_exact(classes)) {
        if *xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Fits a multinomial logistic classifier on a deterministic split of
/// `(features, labels)` and reports held-out accuracy.
pub fn linear_probe(features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let (n, f) = features.dims2("linear_probe")?;
    if labels.len() != n {
        return Err(Error::dim("linear_probe", format!("{n} rows but {} labels", labels.len())));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Eval("linear probe needs at least two classes".into()));
    }
    let classes = distinct[distinct.len() - 1] + 1;

    let mut order: Vec<usize> = (0..n).collect();
    let probe_seed = derive_seed(cfg.seed, TAG_PROBE);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(probe_seed));
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Eval(format!("{n} samples cannot be split {}", cfg.train_fraction)));
    }
    let (train, test) = order.split_at(n_train);

    let mut w = Tensor::zeros(&[f, classes]);
    let mut b = Tensor::zeros(&[classes]);
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(probe_seed, 1));
    let mut epoch_order = train.to_vec();
    let mut gw = vec![0.0; f * classes];
    let mut gb = vec![0.0; classes];
    for _ in 0..cfg.epochs {
        epoch_order.shuffle(&mut shuffle_rng);
        for chunk in epoch_order.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = features.row(i);
                let mut s = logits(x, w.data(), b.data(), classes);
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in &mut s {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for (c, v) in s.iter_mut().enumerate() {
                    *v = (*v / z - if c == labels[i] { 1.0 } else { 0.0 }) * inv;
                }
                for (xi, grow) in x.iter().zip(gw.chunks_exact_mut(classes)) {
                    for (g, d) in grow.iter_mut().zip(&s) {
                        *g += xi * d;
                    }
                }
                for (g, d) in gb.iter_mut().zip(&s) {
                    *g += d;
                }
            }
            let gwt = Tensor::matrix(f, classes, gw.clone())?;
            let gbt = Tensor::vector(gb.clone());
            opt.step(&mut [&mut w, &mut b], &[&gwt, &gbt], cfg.lr)?;
        }
    }
    let accuracy_on = |idx: &[usize]| {
        let hits = idx
            .iter()
            .filter(|&&i| argmax(&logits(features.row(i), w.data(), b.data(), classes)) == labels[i])
            .count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeResult {
        accuracy: accuracy_on(test),
        train_accuracy: accuracy_on(train),
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Backbone outputs `h` for every sample, parameters untouched.
pub fn backbone_features(params: &ModelParams, data: &Dataset) -> Result<Tensor> {
    Ok(params.forward_online(data.samples())?.0)
}

/// Probe accuracy on the frozen backbone.
pub fn linear_evaluation(params: &ModelParams, data: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let h = backbone_features(params, data)?;
    Ok(linear_probe(&h, data.labels(), cfg)?.accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub probe_accuracy: f64,
    pub probe_train_accuracy: f64,
    pub align: f64,
    pub uniformity: f64,
    pub collapsed: bool,
    pub samples: usize,
    pub probe: ProbeConfig,
}

/// Alignment over freshly augmented pairs and uniformity of `z` over up to
/// `sample_count` distinct samples, plus the linear probe.
pub fn metrics_report(
    params: &ModelParams,
    data: &Dataset,
    aug: &AugmentationSpec,
    sample_count: usize,
    temperature: f64,
    probe: &ProbeConfig,
) -> Result<EvalReport> {
    if sample_count < 2 {
        return Err(Error::Precondition(format!("sample count {sample_count} is below 2")));
    }
    let count = sample_count.min(data.len());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let seed = derive_seed(probe.seed, TAG_EVAL);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(count);
    let raw = data.gather(&idx);
    let (_, z, _) = params.forward_online(&raw)?;
    let uniformity = uniformity_value(&z, temperature)?;
    let pair_aug = AugmentationSpec { seed, ..aug.clone() };
    let (x1, x2) = pair_aug.augment_pair(&raw, 0)?;
    let p1 = params.forward_online(&x1)?.2;
    let p2 = params.forward_online(&x2)?.2;
    let align = align_value(&p1, &p2)?;
    let h = backbone_features(params, data)?;
    let probe_result = linear_probe(&h, data.labels(), probe)?;
    Ok(EvalReport {
        probe_accuracy: probe_result.accuracy,
        probe_train_accuracy: probe_result.train_accuracy,
        align,
        uniformity,
        collapsed: uniformity > COLLAPSE_THRESHOLD,
        samples: count,
        probe: probe.clone(),
    })
}

/// CSV with columns `h0..,z0..,label`.
pub fn write_representations(params: &ModelParams, data: &Dataset, mut w: impl Write) -> Result<()> {
    let (h, z, _) = params.forward_online(data.samples())?;
    let (hd, zd) = (h.shape()[1], z.shape()[1]);
    let header: Vec<String> = (0..hd)
        .map(|j| format!("h{j}"))
        .chain((0..zd).map(|j| format!("z{j}")))
        .chain(["label".to_string()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, label) in data.labels().iter().enumerate() {
        let cells: Vec<String> = h.row(i).iter().chain(z.row(i)).map(|v| v.to_string()).collect();
        writeln!(w, "{},{label}", cells.join(","))?;
    }
    Ok(())
}

pub fn export_representations(params: &ModelParams, data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_representations(params, data, &mut w)?;
    w.flush()?;
    Ok(())
}
