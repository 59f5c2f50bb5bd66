//! Networks built from a stem, `B` structurally identical blocks and a task
//! head, with tap points at block boundaries for entropy estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eloss::{build_profile, EntropyProfile};
use crate::entropy::{entropy_kl, EntropyConfig};
use crate::error::{Error, Result};
use crate::samples::SampleMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight [out, in]`, `bias [out]`.
    Linear { weight: Tensor, bias: Tensor },
    /// `weight [out, in, k, k]`, `bias [out]`; stride 1, same padding.
    Conv2d { weight: Tensor, bias: Tensor },
    Relu,
    Flatten,
}

impl Layer {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::Relu | Layer::Flatten => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias } => vec![weight, bias],
            Layer::Relu | Layer::Flatten => vec![],
        }
    }

    /// Kind plus parameter shapes; equal signatures mean identical structure.
    fn signature(&self) -> (u8, Vec<Vec<usize>>) {
        let kind = match self {
            Layer::Linear { .. } => 0,
            Layer::Conv2d { .. } => 1,
            Layer::Relu => 2,
            Layer::Flatten => 3,
        };
        (kind, self.params().iter().map(|(_, t)| t.shape.clone()).collect())
    }

    fn apply(&self, tape: &mut Tape, x: Var, params: &mut std::slice::Iter<'_, Var>) -> Result<Var> {
        let mut next = || {
            params.next().copied().ok_or_else(|| Error::Contract("parameter list too short".into()))
        };
        match self {
            Layer::Linear { .. } => {
                let (w, b) = (next()?, next()?);
                tape.linear(x, w, b)
            }
            Layer::Conv2d { .. } => {
                let (w, b) = (next()?, next()?);
                tape.conv2d(x, w, b)
            }
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Flatten => tape.flatten(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Conv,
}

/// Architecture description sufficient to rebuild a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Per-sample input shape: `[features]` for MLPs, `[C, H, W]` for convs.
    pub input_shape: Vec<usize>,
    pub width: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

impl ModelConfig {
    /// Three blocks of two width-32 linear layers.
    pub fn mlp(features: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape: vec![features],
            width: 32,
            blocks: 3,
            layers_per_block: 2,
            classes,
            kernel: 3,
        }
    }

    /// Three blocks of two 16-channel 3×3 convolutions.
    pub fn conv(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Conv,
            input_shape: vec![channels, height, width],
            width: 16,
            blocks: 3,
            layers_per_block: 2,
            classes,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.width == 0 || self.blocks == 0 || self.layers_per_block == 0 {
            return bad("width, blocks and layers_per_block must be positive");
        }
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        match self.kind {
            ModelKind::Mlp if self.input_shape.len() != 1 => bad("mlp input_shape must be [features]"),
            ModelKind::Conv if self.input_shape.len() != 3 => bad("conv input_shape must be [C, H, W]"),
            ModelKind::Conv if self.kernel.is_multiple_of(2) => bad("kernel size must be odd"),
            _ if self.input_shape.contains(&0) => bad("input_shape entries must be positive"),
            _ => Ok(()),
        }
    }
}

/// He-uniform weights (bound √(6 / fan_in)) and zero bias.
fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = numel(&shape);
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor { shape, values, requires_grad: true, grad: None }
}

fn linear(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Linear {
        weight: he_uniform(vec![out, inp], inp, rng),
        bias: Tensor::zeros(vec![out]).into_param(),
    }
}

fn conv(inp: usize, out: usize, k: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv2d {
        weight: he_uniform(vec![out, inp, k, k], inp * k * k, rng),
        bias: Tensor::zeros(vec![out]).into_param(),
    }
}

/// Feature map captured at a block boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TapPoint {
    pub name: String,
    /// 0 for the input of the first block, `i` for the output of block `i`.
    pub block_index: usize,
    /// Batch of per-sample feature maps, `[B, C, ...]`.
    pub captured: Tensor,
}

/// Tap point that still lives on a tape.
#[derive(Debug, Clone)]
pub struct TapVar {
    pub name: String,
    pub block_index: usize,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct TapedForward {
    pub output: Var,
    /// Output of the stem, i.e. the input of the first block.
    pub block_input: Var,
    pub taps: Vec<TapVar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedBlockNet {
    pub stem: Vec<Layer>,
    pub blocks: Vec<Vec<Layer>>,
    pub head: Vec<Layer>,
    /// Number of blocks whose outputs are tapped, `0..=blocks.len()`.
    pub eloss_coverage: usize,
    /// Present when the network was built from a [`ModelConfig`].
    pub model: Option<ModelConfig>,
}

impl RepeatedBlockNet {
    pub fn new(
        stem: Vec<Layer>,
        blocks: Vec<Vec<Layer>>,
        head: Vec<Layer>,
        eloss_coverage: usize,
    ) -> Result<Self> {
        if let Some(first) = blocks.first() {
            let sig: Vec<_> = first.iter().map(Layer::signature).collect();
            for (i, b) in blocks.iter().enumerate().skip(1) {
                if b.iter().map(Layer::signature).collect::<Vec<_>>() != sig {
                    return Err(Error::Config(format!(
                        "block {} differs in structure from block 1",
                        i + 1
                    )));
                }
            }
        }
        let net = Self { stem, blocks, head, eloss_coverage: 0, model: None };
        net.with_coverage(eloss_coverage)
    }

    /// Builds and He-initializes the network described by `model`.
    pub fn from_config(model: &ModelConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = model.width;
        let (stem, blocks, head) = match model.kind {
            ModelKind::Mlp => {
                let stem = vec![linear(model.input_shape[0], w, &mut rng), Layer::Relu];
                let blocks = (0..model.blocks)
                    .map(|_| {
                        (0..model.layers_per_block)
                            .flat_map(|_| [linear(w, w, &mut rng), Layer::Relu])
                            .collect()
                    })
                    .collect();
                (stem, blocks, vec![linear(w, model.classes, &mut rng)])
            }
            ModelKind::Conv => {
                let k = model.kernel;
                let (c, h, wd) = (model.input_shape[0], model.input_shape[1], model.input_shape[2]);
                let stem = vec![conv(c, w, k, &mut rng), Layer::Relu];
                let blocks = (0..model.blocks)
                    .map(|_| {
                        (0..model.layers_per_block)
                            .flat_map(|_| [conv(w, w, k, &mut rng), Layer::Relu])
                            .collect()
                    })
                    .collect();
                let head = vec![Layer::Flatten, linear(w * h * wd, model.classes, &mut rng)];
                (stem, blocks, head)
            }
        };
        let mut net = Self::new(stem, blocks, head, 0)?;
        net.model = Some(model.clone());
        Ok(net)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn with_coverage(mut self, coverage: usize) -> Result<Self> {
        self.set_coverage(coverage)?;
        Ok(self)
    }

    pub fn set_coverage(&mut self, coverage: usize) -> Result<()> {
        if coverage > self.blocks.len() {
            return Err(Error::Config(format!(
                "eloss coverage {coverage} exceeds block count {}",
                self.blocks.len()
            )));
        }
        self.eloss_coverage = coverage;
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Layer)> {
        let stem = self.stem.iter().enumerate().map(|(i, l)| (format!("stem.{i}"), l));
        let blocks = self.blocks.iter().enumerate().flat_map(|(b, layers)| {
            layers.iter().enumerate().map(move |(i, l)| (format!("block{}.{i}", b + 1), l))
        });
        let head = self.head.iter().enumerate().map(|(i, l)| (format!("head.{i}"), l));
        stem.chain(blocks).chain(head)
    }

    /// Named parameters in a fixed order: stem, blocks, head.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .flat_map(|(prefix, l)| {
                l.params().into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    /// Mutable parameters in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stem
            .iter_mut()
            .chain(self.blocks.iter_mut().flatten())
            .chain(self.head.iter_mut())
            .flat_map(Layer::params_mut)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if let Some(model) = &self.model {
            if shape.len() != model.input_shape.len() + 1 || shape[1..] != model.input_shape[..] {
                return Err(Error::Shape(format!(
                    "input {shape:?} does not match [B, {:?}]",
                    model.input_shape
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape`, tapping the first `coverage`
    /// block outputs plus the block input. No taps when `coverage` is 0.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        params: &[Var],
        coverage: usize,
    ) -> Result<TapedForward> {
        self.check_input(tape.shape(input))?;
        if coverage > self.blocks.len() {
            return Err(Error::Config(format!(
                "coverage {coverage} exceeds block count {}",
                self.blocks.len()
            )));
        }
        let mut it = params.iter();
        let mut x = input;
        for l in &self.stem {
            x = l.apply(tape, x, &mut it)?;
        }
        let block_input = x;
        let mut taps = Vec::new();
        if coverage > 0 {
            taps.push(TapVar { name: "block1.input".into(), block_index: 0, var: x });
        }
        for (b, layers) in self.blocks.iter().enumerate() {
            for l in layers {
                x = l.apply(tape, x, &mut it)?;
            }
            if b < coverage {
                taps.push(TapVar { name: format!("block{}.output", b + 1), block_index: b + 1, var: x });
            }
        }
        for l in &self.head {
            x = l.apply(tape, x, &mut it)?;
        }
        if it.next().is_some() {
            return Err(Error::Contract("parameter list too long".into()));
        }
        Ok(TapedForward { output: x, block_input, taps })
    }

    /// Evaluates the network on a batch and returns its output together with
    /// the tap points selected by `eloss_coverage`.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Vec<TapPoint>)> {
        self.forward_with_coverage(input, self.eloss_coverage)
    }

    pub fn forward_with_coverage(
        &self,
        input: &Tensor,
        coverage: usize,
    ) -> Result<(Tensor, Vec<TapPoint>)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.constant(input.clone());
        let fw = self.forward_on_tape(&mut tape, x, &params, coverage)?;
        let taps = fw
            .taps
            .iter()
            .map(|t| TapPoint {
                name: t.name.clone(),
                block_index: t.block_index,
                captured: tape.tensor(t.var),
            })
            .collect();
        Ok((tape.tensor(fw.output), taps))
    }
}

/// Reinterprets one feature map `[C, ...]` as C samples of dimension
/// `prod(...)` (1 when the map is a plain vector).
pub fn feature_to_samples(feature: &Tensor) -> Result<SampleMatrix> {
    let c = *feature
        .shape
        .first()
        .ok_or_else(|| Error::InvalidSamples("feature map has no channel axis".into()))?;
    if c < 2 {
        return Err(Error::InvalidSamples(format!("need at least 2 channels, got {c}")));
    }
    let d = numel(&feature.shape[1..]);
    SampleMatrix::new(feature.values.clone(), c, d)
}

fn check_tap_order(taps: &[TapPoint]) -> Result<()> {
    if taps.len() < 2 {
        return Err(Error::InsufficientTaps(taps.len()));
    }
    if taps.windows(2).any(|w| w[1].block_index <= w[0].block_index) {
        return Err(Error::Contract("taps must be in strictly increasing block order".into()));
    }
    let batch = taps[0].captured.shape.first().copied().unwrap_or(0);
    if batch == 0 || taps.iter().any(|t| t.captured.shape.first() != Some(&batch)) {
        return Err(Error::Shape("taps must share a non-empty batch axis".into()));
    }
    Ok(())
}

/// One entropy profile per batch element.
pub fn per_sample_profiles(
    taps: &[TapPoint],
    k: usize,
    config: &EntropyConfig,
) -> Result<Vec<EntropyProfile>> {
    check_tap_order(taps)?;
    let names: Vec<&str> = taps.iter().map(|t| t.name.as_str()).collect();
    let batch = taps[0].captured.shape[0];
    (0..batch)
        .map(|b| {
            let h = taps
                .iter()
                .map(|t| Ok(entropy_kl(&feature_to_samples(&t.captured.row(b)?)?, k, config)?.value))
                .collect::<Result<Vec<f64>>>()?;
            build_profile(&h, &names)
        })
        .collect()
}

/// Batch-averaged profile: each tap's entropy is the mean of the per-sample
/// estimates.
pub fn profile_from_taps(
    taps: &[TapPoint],
    k: usize,
    config: &EntropyConfig,
) -> Result<EntropyProfile> {
    let per = per_sample_profiles(taps, k, config)?;
    let names: Vec<&str> = taps.iter().map(|t| t.name.as_str()).collect();
    let mean: Vec<f64> = (0..taps.len())
        .map(|i| per.iter().map(|p| p.taps[i]).sum::<f64>() / per.len() as f64)
        .collect();
    build_profile(&mean, &names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_linear(n: usize) -> Layer {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Layer::Linear {
            weight: Tensor::new(vec![n, n], w).unwrap().into_param(),
            bias: Tensor::zeros(vec![n]).into_param(),
        }
    }

    #[test]
    fn identity_block_passes_input_through() {
        let net =
            RepeatedBlockNet::new(vec![], vec![vec![identity_linear(3), Layer::Relu]], vec![], 1)
                .unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, 1.0, 2.0, 0.0, 3.0, 4.0]).unwrap();
        let (y, taps) = net.forward(&x).unwrap();
        assert_eq!(y.values, x.values);
        assert_eq!(taps.len(), 2);
    }

    #[test]
    fn tap_counts_follow_coverage() {
        let model = ModelConfig::mlp(8, 4);
        let net = RepeatedBlockNet::from_config(&model, 1).unwrap();
        let x = Tensor::new(vec![2, 8], (0..16).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert!(net.forward(&x).unwrap().1.is_empty());
        let (_, taps) = net.clone().with_coverage(2).unwrap().forward(&x).unwrap();
        assert_eq!(taps.len(), 3);
        let idx: Vec<usize> = taps.iter().map(|t| t.block_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(net.clone().with_coverage(4).is_err());
    }

    #[test]
    fn taps_do_not_change_output() {
        let model = ModelConfig::conv(2, 5, 5, 3);
        let net = RepeatedBlockNet::from_config(&model, 9).unwrap();
        let x = Tensor::new(vec![2, 2, 5, 5], (0..100).map(|v| (v as f64 * 0.37).sin()).collect())
            .unwrap();
        let (a, _) = net.forward_with_coverage(&x, 0).unwrap();
        let (b, taps) = net.forward_with_coverage(&x, 3).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(taps.len(), 4);
    }

    #[test]
    fn input_shape_is_checked() {
        let net = RepeatedBlockNet::from_config(&ModelConfig::mlp(8, 4), 1).unwrap();
        let x = Tensor::zeros(vec![2, 7]);
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn blocks_must_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = RepeatedBlockNet::new(
            vec![],
            vec![vec![linear(4, 4, &mut rng)], vec![linear(4, 5, &mut rng)]],
            vec![],
            0,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded_he_uniform() {
        let model = ModelConfig::mlp(8, 4);
        let a = RepeatedBlockNet::from_config(&model, 3).unwrap();
        let b = RepeatedBlockNet::from_config(&model, 3).unwrap();
        let c = RepeatedBlockNet::from_config(&model, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_params() {
            if name.ends_with("bias") {
                assert!(t.values.iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / t.shape[1] as f64).sqrt();
                assert!(t.values.iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn feature_to_samples_layout() {
        let f = Tensor::new(vec![4, 2, 3], (0..24).map(f64::from).collect()).unwrap();
        let s = feature_to_samples(&f).unwrap();
        assert_eq!((s.n(), s.d()), (4, 6));
        for c in 0..4 {
            for h in 0..2 {
                for w in 0..3 {
                    assert_eq!(s.row(c)[h * 3 + w], f.values[(c * 2 + h) * 3 + w]);
                }
            }
        }
        let s = feature_to_samples(&Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!((s.n(), s.d()), (2, 1));
        assert!(feature_to_samples(&Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn profile_from_taps_orders_and_counts() {
        let mk = |i: usize, shift: f64| TapPoint {
            name: format!("t{i}"),
            block_index: i,
            captured: Tensor::new(vec![1, 3, 1], vec![0.0 + shift, 1.0, 3.0 * (i + 1) as f64])
                .unwrap(),
        };
        let cfg = EntropyConfig::default();
        let p = profile_from_taps(&[mk(0, 0.0), mk(1, 0.5)], 1, &cfg).unwrap();
        assert_eq!(p.deltas.len(), 1);
        assert!(matches!(
            profile_from_taps(&[mk(1, 0.0), mk(0, 0.0)], 1, &cfg),
            Err(Error::Contract(_))
        ));
        assert!(matches!(profile_from_taps(&[mk(0, 0.0)], 1, &cfg), Err(Error::InsufficientTaps(1))));
    }
}
