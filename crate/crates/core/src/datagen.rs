//! Seeded synthetic classification tasks and input perturbations.
//!
//! * `blobs-mlp`: 32-dimensional Gaussian mixture with 4 classes. Class `c`
//!   has mean `9·e_c` and unit covariance, so class means are
//!   `9·√2 ≈ 12.7σ` apart. 5% of labels are flipped.
//! * `gridmap-conv`: 4×16×16 maps of unit Gaussian noise. Class `c` adds a
//!   Gaussian bump centred in quadrant `c` (jittered by up to two pixels) to
//!   channel `c`, and a half-amplitude copy to channel `c+1 mod 4`. 5% of
//!   labels are flipped.
//!
//! Splits draw from distinct ChaCha streams of the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samples::SampleMatrix;
use crate::tensor::Tensor;

pub const BLOBS_MLP: &str = "blobs-mlp";
pub const GRIDMAP_CONV: &str = "gridmap-conv";

const LABEL_NOISE: f64 = 0.05;
const BLOB_MEAN: f64 = 9.0;
const GRID_AMPLITUDE: f64 = 2.5;
const GRID_BUMP_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHandle {
    pub name: String,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[N, sample_shape...]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattens every input into one CSV row, the format the entropy
    /// command reads.
    pub fn to_samples(&self) -> Result<SampleMatrix> {
        let n = self.len();
        let d = self.inputs.numel().checked_div(n).unwrap_or(0);
        SampleMatrix::new(self.inputs.values.clone(), n, d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub handle: DatasetHandle,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Split sizes; `None` fields take the per-dataset defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
}

pub fn default_sizes(name: &str) -> Result<(usize, usize, usize)> {
    match name {
        BLOBS_MLP => Ok((512, 256, 256)),
        GRIDMAP_CONV => Ok((256, 128, 128)),
        other => Err(Error::Config(format!(
            "unknown dataset {other:?} (expected {BLOBS_MLP} or {GRIDMAP_CONV})"
        ))),
    }
}

pub fn make_dataset(name: &str, seed: u64) -> Result<Dataset> {
    make_dataset_with(name, seed, SplitSizes::default())
}

pub fn make_dataset_with(name: &str, seed: u64, sizes: SplitSizes) -> Result<Dataset> {
    let (tr, va, te) = default_sizes(name)?;
    let (tr, va, te) = (sizes.train.unwrap_or(tr), sizes.val.unwrap_or(va), sizes.test.unwrap_or(te));
    if tr == 0 {
        return Err(Error::Config("training split must be non-empty".into()));
    }
    let generate: fn(usize, &mut ChaCha8Rng) -> Split = match name {
        BLOBS_MLP => blobs_split,
        _ => gridmap_split,
    };
    let split = |stream: u64, size: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        generate(size, &mut rng)
    };
    let sample_shape = if name == BLOBS_MLP { vec![32] } else { vec![4, 16, 16] };
    Ok(Dataset {
        handle: DatasetHandle {
            name: name.to_owned(),
            train_size: tr,
            val_size: va,
            test_size: te,
            sample_shape,
            classes: 4,
            seed,
        },
        train: split(1, tr),
        val: split(2, va),
        test: split(3, te),
    })
}

fn noisy_label(true_class: usize, classes: usize, rng: &mut ChaCha8Rng) -> usize {
    if rng.random::<f64>() < LABEL_NOISE {
        (true_class + rng.random_range(1..classes)) % classes
    } else {
        true_class
    }
}

fn blobs_split(n: usize, rng: &mut ChaCha8Rng) -> Split {
    let (d, classes) = (32, 4);
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..d {
            let mean = if j == c { BLOB_MEAN } else { 0.0 };
            values.push(mean + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(noisy_label(c, classes, rng));
    }
    Split { inputs: Tensor::new(vec![n, d], values).expect("shape"), labels }
}

fn gridmap_split(n: usize, rng: &mut ChaCha8Rng) -> Split {
    let (ch, h, w, classes) = (4usize, 16usize, 16usize, 4usize);
    let centers = [(4.0, 4.0), (4.0, 11.0), (11.0, 4.0), (11.0, 11.0)];
    let plane = h * w;
    let mut values = Vec::with_capacity(n * ch * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let cy = centers[c].0 + rng.random_range(-2i32..=2) as f64;
        let cx = centers[c].1 + rng.random_range(-2i32..=2) as f64;
        let start = values.len();
        values.extend((0..ch * plane).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let sample = &mut values[start..];
        for (channel, amp) in [(c, GRID_AMPLITUDE), ((c + 1) % ch, 0.5 * GRID_AMPLITUDE)] {
            for y in 0..h {
                for x in 0..w {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    sample[channel * plane + y * w + x] +=
                        amp * (-r2 / (2.0 * GRID_BUMP_WIDTH * GRID_BUMP_WIDTH)).exp();
                }
            }
        }
        labels.push(noisy_label(c, classes, rng));
    }
    Split { inputs: Tensor::new(vec![n, ch, h, w], values).expect("shape"), labels }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    GaussianAdditive,
    ElementDropout,
}

/// Perturbation applied to a seeded random `ratio` fraction of elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    /// Gaussian noise (σ = 0.5) on 10% of elements.
    pub fn noise1() -> Self {
        Self { kind: NoiseKind::GaussianAdditive, ratio: 0.1, sigma: 0.5, seed: 1 }
    }

    /// Gaussian noise (σ = 0.5) on 30% of elements.
    pub fn noise2() -> Self {
        Self { kind: NoiseKind::GaussianAdditive, ratio: 0.3, sigma: 0.5, seed: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("noise ratio must be in [0, 1], got {}", self.ratio)));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Human-readable label carrying every parameter.
    pub fn label(&self) -> String {
        match self.kind {
            NoiseKind::GaussianAdditive => format!(
                "gaussian-additive(ratio={},sigma={},seed={})",
                self.ratio, self.sigma, self.seed
            ),
            NoiseKind::ElementDropout => {
                format!("element-dropout(ratio={},seed={})", self.ratio, self.seed)
            }
        }
    }
}

/// Returns a perturbed copy of `input`; elements outside the random mask are
/// copied bit for bit.
pub fn inject_noise(input: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    Ok(inject_noise_counted(input, spec)?.0)
}

/// Like [`inject_noise`], also returning how many elements were selected.
pub fn inject_noise_counted(input: &Tensor, spec: &NoiseSpec) -> Result<(Tensor, usize)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = input.clone();
    out.requires_grad = false;
    out.grad = None;
    let mut affected = 0;
    for v in out.values.iter_mut() {
        if rng.random::<f64>() < spec.ratio {
            affected += 1;
            match spec.kind {
                NoiseKind::GaussianAdditive => {
                    *v += spec.sigma * rng.sample::<f64, _>(StandardNormal);
                }
                NoiseKind::ElementDropout => *v = 0.0,
            }
        }
    }
    Ok((out, affected))
}
