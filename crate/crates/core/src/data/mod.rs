//! Datasets, augmentation distributions and positive-pair sampling.

mod cifar;

pub use cifar::{load_cifar10, parse_cifar10, CIFAR_PIXELS, CIFAR_RECORD};

use std::io::Write;
use std::path::PathBuf;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::linalg;
use crate::seed::{derive_seed, TAG_AUGMENT, TAG_SHUFFLE};

/// Labeled samples stored as rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = samples.dims2("Dataset::new")?;
        if labels.len() != n {
            return Err(Error::dim("Dataset::new", format!("{n} samples but {} labels", labels.len())));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self { samples, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    /// Rows `indices` as a new matrix.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        Tensor::matrix(indices.len(), self.dim(), data).expect("gather shape")
    }

    /// CSV with header `x0,...,x{d-1},label`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).chain(["label".into()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, label) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.sample(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{label}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsSpec {
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Within-cluster noise scale before projection onto the sphere.
    pub noise: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            classes: 4,
            per_class: 100,
            seed: 0,
            noise: 0.5,
        }
    }
}

/// Gaussian clusters around random unit centers, each sample projected to the
/// unit sphere. Samples are stored class by class.
pub fn make_blobs(spec: &BlobsSpec) -> Result<Dataset> {
    if spec.dim < 2 {
        return Err(Error::config("dim", "must be at least 2"));
    }
    if spec.classes < 2 {
        return Err(Error::config("classes", "must be at least 2"));
    }
    if spec.per_class == 0 {
        return Err(Error::config("per_class", "must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::config("noise", "must be non-negative"));
    }
    let d = spec.dim;
    let mut center_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);

    let mut data = Vec::with_capacity(spec.classes * spec.per_class * d);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let center = unit(&(0..d).map(|_| center_rng.sample(StandardNormal)).collect::<Vec<f64>>())
            .ok_or_else(|| Error::config("seed", "degenerate cluster center"))?;
        for _ in 0..spec.per_class {
            let raw: Vec<f64> = center
                .iter()
                .map(|c| c + spec.noise * noise_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let x = unit(&raw).ok_or_else(|| Error::config("noise", "sample landed on the origin"))?;
            data.extend(x);
            labels.push(class);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), d, data)?, labels)
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs(BlobsSpec),
    /// One CIFAR-10 binary batch file.
    Cifar10 { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs(BlobsSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Blobs(spec) => make_blobs(spec),
            DataSource::Cifar10 { path } => load_cifar10(path),
        }
    }
}

/// One view's transformation distribution: coordinate mask, then a random
/// global scale, then additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewAugmentation {
    pub noise: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub mask_prob: f64,
}

impl Default for ViewAugmentation {
    fn default() -> Self {
        Self {
            noise: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.2,
            mask_prob: 0.1,
        }
    }
}

impl ViewAugmentation {
    pub fn identity() -> Self {
        Self {
            noise: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            mask_prob: 0.0,
        }
    }

    fn validate(&self, view: &str) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("{view}.noise"), "must be non-negative"));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return Err(Error::config(format!("{view}.scale_lo"), "need 0 < scale_lo <= scale_hi"));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::config(format!("{view}.mask_prob"), "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let scale = if self.scale_hi > self.scale_lo {
            rng.random_range(self.scale_lo..=self.scale_hi)
        } else {
            self.scale_lo
        };
        for &v in x {
            let keep = self.mask_prob == 0.0 || rng.random::<f64>() >= self.mask_prob;
            let noise = if self.noise > 0.0 {
                self.noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            out.push(if keep { scale * v } else { 0.0 } + noise);
        }
    }
}

/// The pair of view distributions plus the seed of the sampling streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub view1: ViewAugmentation,
    pub view2: ViewAugmentation,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn identity(seed: u64) -> Self {
        Self {
            view1: ViewAugmentation::identity(),
            view2: ViewAugmentation::identity(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.view1.validate("view1")?;
        self.view2.validate("view2")
    }

    /// Independent random streams for the two views at one step.
    fn view_rngs(&self, step: u64) -> (ChaCha8Rng, ChaCha8Rng) {
        let s = derive_seed(derive_seed(self.seed, TAG_AUGMENT), step);
        let mut a = ChaCha8Rng::seed_from_u64(s);
        let mut b = ChaCha8Rng::seed_from_u64(s);
        a.set_stream(1);
        b.set_stream(2);
        (a, b)
    }

    /// Both views of the given raw rows.
    pub fn augment_pair(&self, raw: &Tensor, step: u64) -> Result<(Tensor, Tensor)> {
        let (n, d) = raw.dims2("augment_pair")?;
        let (mut r1, mut r2) = self.view_rngs(step);
        let (mut x1, mut x2) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        for i in 0..n {
            self.view1.apply(raw.row(i), &mut r1, &mut x1);
            self.view2.apply(raw.row(i), &mut r2, &mut x2);
        }
        Ok((Tensor::matrix(n, d, x1)?, Tensor::matrix(n, d, x2)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Permutation used for `epoch` under the sampling seed.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, TAG_SHUFFLE), epoch));
    perm.shuffle(&mut rng);
    perm
}

/// Batch `step` (0-based) of the stream formed by concatenating per-epoch
/// shuffles, so every sample is drawn exactly once per epoch. A batch may
/// straddle an epoch boundary.
pub fn sample_positive_batch(data: &Dataset, aug: &AugmentationSpec, batch: usize, step: u64) -> Result<PositiveBatch> {
    aug.validate()?;
    let n = data.len();
    if batch == 0 {
        return Err(Error::Batch("batch size must be at least 1".into()));
    }
    if batch > n {
        return Err(Error::Batch(format!("batch size {batch} exceeds dataset size {n}")));
    }
    let start = step as u128 * batch as u128;
    let mut indices = Vec::with_capacity(batch);
    let mut epoch = (start / n as u128) as u64;
    let mut offset = (start % n as u128) as usize;
    let mut perm = epoch_permutation(n, aug.seed, epoch);
    while indices.len() < batch {
        if offset == n {
            epoch += 1;
            offset = 0;
            perm = epoch_permutation(n, aug.seed, epoch);
        }
        indices.push(perm[offset]);
        offset += 1;
    }
    let raw = data.gather(&indices);
    let (x1, x2) = aug.augment_pair(&raw, step)?;
    let labels = indices.iter().map(|&i| data.labels()[i]).collect();
    Ok(PositiveBatch { x1, x2, labels, indices })
}

/// Monte-Carlo second moments of augmented pairs.
#[derive(Debug, Clone, Serialize)]
pub struct AugMoments {
    /// `E[x1 x1^T]`, symmetrized.
    pub a: Tensor,
    /// `E[x2 x1^T]`.
    pub b: Tensor,
    pub samples: usize,
    pub rank_a: usize,
    /// Set when `a` is numerically rank deficient (it must be inverted downstream).
    pub warning: Option<String>,
}

pub fn estimate_aug_moments(data: &Dataset, aug: &AugmentationSpec, sample_count: usize, seed: u64) -> Result<AugMoments> {
    aug.validate()?;
    let d = data.dim();
    if sample_count < d * d {
        return Err(Error::Precondition(format!(
            "sample count {sample_count} is below d^2 = {}",
            d * d
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch("estimate_aug_moments"));
    }
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let spec = AugmentationSpec { seed, ..aug.clone() };
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d * d];
    const CHUNK: usize = 256;
    let mut done = 0;
    let mut chunk_idx = 0u64;
    while done < sample_count {
        let take = CHUNK.min(sample_count - done);
        let idx: Vec<usize> = (0..take).map(|_| pick.random_range(0..data.len())).collect();
        let (x1, x2) = spec.augment_pair(&data.gather(&idx), chunk_idx)?;
        for r in 0..take {
            let (u, v) = (x1.row(r), x2.row(r));
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] += u[i] * u[j];
                    b[i * d + j] += v[i] * u[j];
                }
            }
        }
        done += take;
        chunk_idx += 1;
    }
    let inv_n = 1.0 / sample_count as f64;
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]) * inv_n;
        }
    }
    let a = Tensor::matrix(d, d, sym)?;
    let b = Tensor::matrix(d, d, b.into_iter().map(|v| v * inv_n).collect())?;
    let rank_a = linalg::numerical_rank(&a, 1e-10)?;
    let warning = (rank_a < d).then(|| {
        let msg = format!("second moment A has numerical rank {rank_a} < {d}");
        warn!("{msg}");
        msg
    });
    Ok(AugMoments {
        a,
        b,
        samples: sample_count,
        rank_a,
        warning,
    })
}
