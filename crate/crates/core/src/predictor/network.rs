//! The encoder-decoder: parameters, forward pass and backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    bn_eval_forward, bn_train_backward, bn_train_forward, conv_backward, conv_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, upsample_backward, upsample_forward, BnBatch, BN_MOMENTUM,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::field::{Field, ImageGrid, ParameterMaps};

/// Floor added to softplus so the parameter maps stay strictly positive.
pub const LAMBDA_FLOOR: f64 = 1e-4;

/// Width of the full-scale first stage.
pub const FULL_WIDTH: usize = 16;

/// Shape of the network. Stage widths are `w, 2w, 4w, 8w` for
/// `w = base_width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub in_channels: usize,
    pub base_width: usize,
    /// Residual blocks after the bottleneck convolution.
    pub bridge_blocks: usize,
    pub batch_norm: bool,
}

impl Descriptor {
    pub fn full(in_channels: usize) -> Self {
        Descriptor {
            in_channels,
            base_width: FULL_WIDTH,
            bridge_blocks: 3,
            batch_norm: true,
        }
    }

    /// Full topology with every width divided by `divisor`.
    pub fn scaled(in_channels: usize, divisor: usize) -> Result<Self> {
        if divisor == 0 || !FULL_WIDTH.is_multiple_of(divisor) {
            return Err(Error::InvalidConfig(format!(
                "width divisor {divisor} must divide {FULL_WIDTH}"
            )));
        }
        Ok(Descriptor {
            base_width: FULL_WIDTH / divisor,
            ..Self::full(in_channels)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "input must have 1 or 3 channels, got {}",
                self.in_channels
            )));
        }
        if self.base_width == 0 {
            return Err(Error::InvalidConfig("base width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Running statistics are stored alongside weights but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    weight: usize,
    bias: usize,
    cout: usize,
    k: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnSpec {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockSpec {
    conv: ConvSpec,
    bn: Option<BnSpec>,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Block(usize),
    Residual(usize, usize),
    Pool,
    SaveSkip,
    Upsample,
    AddSkip,
    Head(ConvSpec),
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<BlockSpec>,
    ops: Vec<Op>,
    lambda_const: usize,
}

struct Builder {
    tensors: Vec<ParamTensor>,
    blocks: Vec<BlockSpec>,
    batch_norm: bool,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, fill: f64, trainable: bool) -> usize {
        let len = shape.iter().product();
        self.tensors.push(ParamTensor {
            name,
            shape,
            data: vec![fill; len],
            trainable,
        });
        self.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvSpec {
        let weight = self.push(format!("{name}.weight"), vec![cout, cin, k, k], 0.0, true);
        let bias = self.push(format!("{name}.bias"), vec![cout], 0.0, true);
        ConvSpec {
            weight,
            bias,
            cout,
            k,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> usize {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3);
        let bn = self.batch_norm.then(|| BnSpec {
            gamma: self.push(format!("{name}.bn.gamma"), vec![cout], 1.0, true),
            beta: self.push(format!("{name}.bn.beta"), vec![cout], 0.0, true),
            mean: self.push(format!("{name}.bn.running_mean"), vec![cout], 0.0, false),
            var: self.push(format!("{name}.bn.running_var"), vec![cout], 1.0, false),
        });
        self.blocks.push(BlockSpec { conv, bn });
        self.blocks.len() - 1
    }

    fn residual(&mut self, name: &str, c: usize) -> Op {
        let a = self.block(&format!("{name}.a"), c, c);
        let b = self.block(&format!("{name}.b"), c, c);
        Op::Residual(a, b)
    }
}

fn build(desc: &Descriptor) -> (Vec<ParamTensor>, Layout) {
    let mut b = Builder {
        tensors: Vec::new(),
        blocks: Vec::new(),
        batch_norm: desc.batch_norm,
    };
    let [w1, w2, w3, w4] = desc.stage_widths();
    let mut ops = vec![
        Op::Block(b.block("enc1.0", desc.in_channels, w1)),
        Op::Block(b.block("enc1.1", w1, w1)),
        Op::SaveSkip,
        Op::Pool,
        Op::Block(b.block("enc2.0", w1, w2)),
        b.residual("enc2.res", w2),
        Op::SaveSkip,
        Op::Pool,
        Op::Block(b.block("enc3.0", w2, w3)),
        b.residual("enc3.res", w3),
        Op::SaveSkip,
        Op::Pool,
        Op::Block(b.block("bridge.0", w3, w4)),
    ];
    for i in 0..desc.bridge_blocks {
        ops.push(b.residual(&format!("bridge.res{i}"), w4));
    }
    for (stage, (cin, cout)) in [(3, (w4, w3)), (2, (w3, w2)), (1, (w2, w1))] {
        ops.push(Op::Upsample);
        ops.push(Op::Block(b.block(&format!("dec{stage}.0"), cin, cout)));
        ops.push(Op::Block(b.block(&format!("dec{stage}.1"), cout, cout)));
        ops.push(Op::AddSkip);
    }
    ops.push(Op::Block(b.block("head.0", w1, w1)));
    let head = b.conv("head.out", w1, 3, 1);
    ops.push(Op::Head(head));
    // softplus(ln(e - 1)) = 1
    let lambda_const = b.push("lambda_const.raw".into(), vec![2], (std::f64::consts::E - 1.0).ln(), true);
    (
        b.tensors,
        Layout {
            blocks: b.blocks,
            ops,
            lambda_const,
        },
    )
}

/// Network parameters in declaration order.
#[derive(Clone, Debug)]
pub struct PredictorParams {
    descriptor: Descriptor,
    tensors: Vec<ParamTensor>,
    layout: Layout,
    revision: u64,
}

impl PartialEq for PredictorParams {
    fn eq(&self, other: &Self) -> bool {
        self.descriptor == other.descriptor && self.tensors == other.tensors
    }
}

impl PredictorParams {
    /// All-zero weights with unit normalization scales.
    pub fn zeros(descriptor: Descriptor) -> Result<Self> {
        descriptor.validate()?;
        let (tensors, layout) = build(&descriptor);
        Ok(PredictorParams {
            descriptor,
            tensors,
            layout,
            revision: 0,
        })
    }

    /// Builds parameters from stored tensors, checking names and shapes
    /// against the descriptor.
    pub fn from_tensors(descriptor: Descriptor, tensors: Vec<ParamTensor>) -> Result<Self> {
        let mut params = Self::zeros(descriptor)?;
        if tensors.len() != params.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                params.tensors.len(),
                tensors.len()
            )));
        }
        for (slot, t) in params.tensors.iter_mut().zip(tensors) {
            if slot.name != t.name || slot.shape != t.shape || t.data.len() != slot.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    t.name, t.shape, slot.name, slot.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(t.name));
            }
            slot.data = t.data;
        }
        Ok(params)
    }

    pub fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    /// Mutable access to the tensor values. Invalidates cached activations.
    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        self.revision += 1;
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    /// The two raw scalars used by constant-lambda mode.
    pub fn lambda_const_raw(&self) -> (f64, f64) {
        let d = &self.tensors[self.layout.lambda_const].data;
        (d[0], d[1])
    }

    pub(crate) fn lambda_const_index(&self) -> usize {
        self.layout.lambda_const
    }

    /// Blends batch statistics from a train-mode pass into the running
    /// estimates (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (spec, batch) in self.layout.blocks.clone().iter().zip(&cache.bn_batches) {
            let (Some(bn), Some(batch)) = (spec.bn, batch) else {
                continue;
            };
            for ch in 0..batch.mean.len() {
                let m = &mut self.tensors[bn.mean].data[ch];
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * batch.mean[ch];
                let v = &mut self.tensors[bn.var].data[ch];
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * batch.unbiased_var(ch);
            }
        }
    }
}

/// He-normal kernels (std `sqrt(2 / fan_in)`), zero biases, unit scales.
pub fn init_params(descriptor: Descriptor, seed: u64) -> Result<PredictorParams> {
    let mut params = PredictorParams::zeros(descriptor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut params.tensors {
        if t.name.ends_with(".weight") {
            let fan_in: usize = t.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut t.data {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-sample network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorOutput {
    pub lambda1_raw: Field,
    pub lambda2_raw: Field,
    pub phi0: Field,
    /// `sigmoid(phi0)`.
    pub p: Field,
}

impl PredictorOutput {
    /// `softplus(raw) + 1e-4` per pixel.
    pub fn lambda_maps(&self) -> ParameterMaps {
        ParameterMaps {
            lambda1: self.lambda1_raw.map(lambda_from_raw),
            lambda2: self.lambda2_raw.map(lambda_from_raw),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn lambda_from_raw(raw: f64) -> f64 {
    softplus(raw) + LAMBDA_FLOOR
}

/// Loss gradients with respect to one sample's outputs.
#[derive(Clone, Debug)]
pub struct OutputGrad {
    pub d_lambda1_raw: Field,
    pub d_lambda2_raw: Field,
    /// Gradient reaching `phi0` directly (through the contour evolution).
    pub d_phi0: Field,
    /// Gradient with respect to `P = sigmoid(phi0)`.
    pub d_p: Field,
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Tensor,
    pre: Tensor,
}

#[derive(Clone, Debug)]
enum OpCache {
    Block(BlockCache),
    Residual(BlockCache, BlockCache),
    Pool([usize; 4], Vec<usize>),
    Upsample([usize; 4]),
    Head(Tensor),
    None,
}

/// Activations recorded by [`predictor_forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    revision: u64,
    mode: Mode,
    ops: Vec<OpCache>,
    /// Train-mode batch statistics per block, in block order.
    bn_batches: Vec<Option<BnBatch>>,
    output: Tensor,
}

fn block_forward(
    params: &PredictorParams,
    spec: &BlockSpec,
    x: &Tensor,
    mode: Mode,
    bn_batches: &mut [Option<BnBatch>],
    index: usize,
) -> (Tensor, BlockCache) {
    let t = &params.tensors;
    let c = spec.conv;
    let pre = conv_forward(x, &t[c.weight].data, &t[c.bias].data, c.cout, c.k);
    let act = relu_forward(&pre);
    let out = match (spec.bn, mode) {
        (None, _) => act,
        (Some(bn), Mode::Train) => {
            let (y, batch) = bn_train_forward(&act, &t[bn.gamma].data, &t[bn.beta].data);
            bn_batches[index] = Some(batch);
            y
        }
        (Some(bn), Mode::Eval) => bn_eval_forward(
            &act,
            &t[bn.gamma].data,
            &t[bn.beta].data,
            &t[bn.mean].data,
            &t[bn.var].data,
        ),
    };
    (
        out,
        BlockCache {
            input: x.clone(),
            pre,
        },
    )
}

fn block_backward(
    params: &PredictorParams,
    spec: &BlockSpec,
    cache: &BlockCache,
    batch: Option<&BnBatch>,
    dy: &Tensor,
    grads: &mut Gradients,
) -> Tensor {
    let t = &params.tensors;
    let d_act = match (spec.bn, batch) {
        (Some(bn), Some(batch)) => {
            let (dg, db) = grads.pair_mut(bn.gamma, bn.beta);
            bn_train_backward(batch, &t[bn.gamma].data, dy, dg, db)
        }
        _ => dy.clone(),
    };
    let d_pre = relu_backward(&cache.pre, &d_act);
    let c = spec.conv;
    let (dw, db) = grads.pair_mut(c.weight, c.bias);
    conv_backward(&cache.input, &t[c.weight].data, &d_pre, c.k, dw, db)
}

fn block_index(params: &PredictorParams, b: usize) -> &BlockSpec {
    &params.layout.blocks[b]
}

/// Runs the network on a batch of equally sized images.
pub fn predictor_forward(
    images: &[ImageGrid],
    params: &PredictorParams,
    mode: Mode,
) -> Result<(Vec<PredictorOutput>, ForwardCache)> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = first.dims();
    let cin = params.descriptor.in_channels;
    for img in images {
        if img.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: img.dims(),
            });
        }
        if img.channels() != cin {
            return Err(Error::Shape(format!(
                "network expects {cin} input channels, image has {}",
                img.channels()
            )));
        }
    }
    if w % 8 != 0 || h % 8 != 0 || w == 0 || h == 0 {
        return Err(Error::NotDivisible {
            width: w,
            height: h,
            divisor: 8,
        });
    }
    let mut data = Vec::with_capacity(images.len() * cin * w * h);
    for img in images {
        data.extend_from_slice(img.data());
    }
    let mut x = Tensor::from_vec(images.len(), cin, h, w, data)?;

    let mut bn_batches = vec![None; params.layout.blocks.len()];
    let mut skips = Vec::new();
    let mut caches = Vec::with_capacity(params.layout.ops.len());
    for op in &params.layout.ops {
        let cache = match *op {
            Op::Block(b) => {
                let (y, c) = block_forward(params, block_index(params, b), &x, mode, &mut bn_batches, b);
                x = y;
                OpCache::Block(c)
            }
            Op::Residual(a, b) => {
                let (y1, c1) = block_forward(params, block_index(params, a), &x, mode, &mut bn_batches, a);
                let (mut y2, c2) = block_forward(params, block_index(params, b), &y1, mode, &mut bn_batches, b);
                y2.add_assign(&x)?;
                x = y2;
                OpCache::Residual(c1, c2)
            }
            Op::Pool => {
                let shape = x.shape();
                let (y, arg) = maxpool_forward(&x);
                x = y;
                OpCache::Pool(shape, arg)
            }
            Op::SaveSkip => {
                skips.push(x.clone());
                OpCache::None
            }
            Op::Upsample => {
                let shape = x.shape();
                x = upsample_forward(&x);
                OpCache::Upsample(shape)
            }
            Op::AddSkip => {
                let skip = skips.pop().ok_or_else(|| Error::Shape("unbalanced skip connections".into()))?;
                x.add_assign(&skip)?;
                OpCache::None
            }
            Op::Head(c) => {
                let t = &params.tensors;
                let y = conv_forward(&x, &t[c.weight].data, &t[c.bias].data, c.cout, c.k);
                OpCache::Head(std::mem::replace(&mut x, y))
            }
        };
        caches.push(cache);
    }

    let mut outputs = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let ch = |c: usize| Field::from_vec(w, h, x.channel(i, c).to_vec());
        let phi0 = ch(2)?;
        outputs.push(PredictorOutput {
            lambda1_raw: ch(0)?,
            lambda2_raw: ch(1)?,
            p: phi0.map(sigmoid),
            phi0,
        });
    }
    let cache = ForwardCache {
        revision: params.revision,
        mode,
        ops: caches,
        bn_batches,
        output: x,
    };
    Ok((outputs, cache))
}

/// Parameter gradients, aligned with [`PredictorParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &PredictorParams) -> Self {
        Gradients {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert!(a < b);
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Euclidean norm over every tensor.
    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            for v in t {
                *v *= k;
            }
        }
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite<'a>(&self, params: &'a PredictorParams) -> Option<&'a str> {
        self.tensors
            .iter()
            .zip(&params.tensors)
            .find(|(g, _)| g.iter().any(|v| !v.is_finite()))
            .map(|(_, t)| t.name.as_str())
    }
}

/// Reverse pass of a train-mode [`predictor_forward`].
///
/// `d_outputs` holds one entry per sample. The gradient reaching `phi0` is
/// the sum of the direct term and the term through `P`.
pub fn predictor_backward(
    params: &PredictorParams,
    cache: &ForwardCache,
    d_outputs: &[OutputGrad],
) -> Result<Gradients> {
    if cache.mode != Mode::Train {
        return Err(Error::StaleCache("backward needs a train-mode forward pass".into()));
    }
    if cache.revision != params.revision {
        return Err(Error::StaleCache(format!(
            "parameters changed since the forward pass (revision {} vs {})",
            cache.revision, params.revision
        )));
    }
    let out = &cache.output;
    if d_outputs.len() != out.n {
        return Err(Error::Shape(format!(
            "{} output gradients for a batch of {}",
            d_outputs.len(),
            out.n
        )));
    }
    let mut dy = out.zeros_like();
    for (i, g) in d_outputs.iter().enumerate() {
        for f in [&g.d_lambda1_raw, &g.d_lambda2_raw, &g.d_phi0, &g.d_p] {
            f.ensure_dims((out.w, out.h))?;
        }
        dy.channel_mut(i, 0).copy_from_slice(g.d_lambda1_raw.data());
        dy.channel_mut(i, 1).copy_from_slice(g.d_lambda2_raw.data());
        let phi0 = out.channel(i, 2).to_vec();
        for (j, d) in dy.channel_mut(i, 2).iter_mut().enumerate() {
            let p = sigmoid(phi0[j]);
            *d = g.d_phi0.data()[j] + g.d_p.data()[j] * p * (1.0 - p);
        }
    }

    let mut grads = Gradients::zeros_like(params);
    let mut skip_grads: Vec<Tensor> = Vec::new();
    for (op, c) in params.layout.ops.iter().zip(&cache.ops).rev() {
        dy = match (*op, c) {
            (Op::Block(b), OpCache::Block(bc)) => block_backward(
                params,
                block_index(params, b),
                bc,
                cache.bn_batches[b].as_ref(),
                &dy,
                &mut grads,
            ),
            (Op::Residual(a, b), OpCache::Residual(ca, cb)) => {
                let d_mid = block_backward(
                    params,
                    block_index(params, b),
                    cb,
                    cache.bn_batches[b].as_ref(),
                    &dy,
                    &mut grads,
                );
                let mut d_in = block_backward(
                    params,
                    block_index(params, a),
                    ca,
                    cache.bn_batches[a].as_ref(),
                    &d_mid,
                    &mut grads,
                );
                d_in.add_assign(&dy)?;
                d_in
            }
            (Op::Pool, OpCache::Pool(shape, arg)) => maxpool_backward(*shape, arg, &dy),
            (Op::SaveSkip, _) => {
                let g = skip_grads.pop().ok_or_else(|| Error::Shape("unbalanced skip connections".into()))?;
                let mut d = dy;
                d.add_assign(&g)?;
                d
            }
            (Op::Upsample, OpCache::Upsample(shape)) => upsample_backward(*shape, &dy),
            (Op::AddSkip, _) => {
                skip_grads.push(dy.clone());
                dy
            }
            (Op::Head(spec), OpCache::Head(input)) => {
                let t = &params.tensors;
                let (dw, db) = grads.pair_mut(spec.weight, spec.bias);
                conv_backward(input, &t[spec.weight].data, &dy, spec.k, dw, db)
            }
            _ => return Err(Error::StaleCache("cache does not match the network layout".into())),
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Descriptor {
        Descriptor {
            in_channels: 1,
            base_width: 1,
            bridge_blocks: 1,
            batch_norm: true,
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<ImageGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ImageGrid::from_gray(&Field::from_fn(size, size, |_, _| rng.random_range(0.0..1.0))).unwrap())
            .collect()
    }

    #[test]
    fn zero_network_outputs() {
        let params = PredictorParams::zeros(Descriptor::scaled(1, 4).unwrap()).unwrap();
        let imgs = random_images(1, 16, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let (out, _) = predictor_forward(&imgs, &params, mode).unwrap();
            assert!(out[0].phi0.data().iter().all(|&v| v == 0.0));
            assert!(out[0].p.data().iter().all(|&v| v == 0.5));
            let maps = out[0].lambda_maps();
            let expected = std::f64::consts::LN_2 + 1e-4;
            assert!(maps.lambda1.data().iter().all(|&v| (v - expected).abs() < 1e-15));
            assert!(maps.lambda2.data().iter().all(|&v| (v - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn output_shape_and_channel_progression() {
        let full = Descriptor::full(1);
        assert_eq!(full.stage_widths(), [16, 32, 64, 128]);
        let params = init_params(full, 0).unwrap();
        let out_ch = |name: &str| params.tensor(name).unwrap().shape[0];
        assert_eq!(out_ch("enc1.0.conv.weight"), 16);
        assert_eq!(out_ch("enc2.0.conv.weight"), 32);
        assert_eq!(out_ch("enc3.0.conv.weight"), 64);
        assert_eq!(out_ch("bridge.0.conv.weight"), 128);
        assert_eq!(out_ch("dec3.0.conv.weight"), 64);
        assert_eq!(out_ch("dec2.0.conv.weight"), 32);
        assert_eq!(out_ch("dec1.0.conv.weight"), 16);
        assert_eq!(out_ch("head.out.weight"), 3);
        let small = init_params(Descriptor::scaled(1, 4).unwrap(), 0).unwrap();
        for size in [64usize, 512] {
            let imgs = random_images(1, size, 2);
            let (out, _) = predictor_forward(&imgs, &small, Mode::Eval).unwrap();
            assert_eq!(out[0].phi0.dims(), (size, size));
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let params = init_params(tiny(), 0).unwrap();
        let imgs = random_images(1, 12, 3);
        assert!(matches!(
            predictor_forward(&imgs, &params, Mode::Eval),
            Err(Error::NotDivisible { .. })
        ));
        let rgb = vec![ImageGrid::new(8, 8, 3, vec![0.5; 192]).unwrap()];
        assert!(matches!(predictor_forward(&rgb, &params, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_seeded_and_he_scaled() {
        let d = Descriptor::full(1);
        let a = init_params(d, 7).unwrap();
        assert_eq!(a, init_params(d, 7).unwrap());
        assert_ne!(a, init_params(d, 8).unwrap());
        let t = a.tensor("bridge.res0.a.conv.weight").unwrap();
        let fan_in = (t.shape[1] * 9) as f64;
        assert!(t.data.len() >= 10_000);
        let mean = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let var = t.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.data.len() as f64;
        assert!((var / (2.0 / fan_in) - 1.0).abs() < 0.2, "{var}");
        assert!(a.tensor("enc1.0.conv.bias").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(a.tensor("enc1.0.bn.gamma").unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        // zero convolutions feed zeros into BN, whose zero shift keeps them zero
        let mut params = init_params(tiny(), 1).unwrap();
        for t in params.tensors_mut() {
            if t.name.starts_with("bridge.res0") && (t.name.ends_with("weight") || t.name.ends_with("bias")) {
                t.data.fill(0.0);
            }
        }
        let (a, b) = params
            .layout
            .ops
            .iter()
            .rev()
            .find_map(|o| if let Op::Residual(p, q) = o { Some((*p, *q)) } else { None })
            .unwrap();
        let x = Tensor::from_vec(1, 8, 2, 2, (0..32).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut slots = vec![None; params.layout.blocks.len()];
        let (y1, _) = block_forward(&params, block_index(&params, a), &x, Mode::Train, &mut slots, a);
        let (mut y2, _) = block_forward(&params, block_index(&params, b), &y1, Mode::Train, &mut slots, b);
        y2.add_assign(&x).unwrap();
        assert_eq!(y2, x);
    }

    fn random_grad(w: usize, h: usize, rng: &mut ChaCha8Rng) -> OutputGrad {
        let mut f = || Field::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
        OutputGrad {
            d_lambda1_raw: f(),
            d_lambda2_raw: f(),
            d_phi0: f(),
            d_p: f(),
        }
    }

    fn objective(params: &PredictorParams, imgs: &[ImageGrid], g: &[OutputGrad]) -> f64 {
        let (out, _) = predictor_forward(imgs, params, Mode::Train).unwrap();
        out.iter()
            .zip(g)
            .map(|(o, g)| {
                let dot = |a: &Field, b: &Field| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
                dot(&o.lambda1_raw, &g.d_lambda1_raw)
                    + dot(&o.lambda2_raw, &g.d_lambda2_raw)
                    + dot(&o.phi0, &g.d_phi0)
                    + dot(&o.p, &g.d_p)
            })
            .sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for batch_norm in [true, false] {
            let desc = Descriptor {
                batch_norm,
                base_width: 2,
                ..tiny()
            };
            let mut params = init_params(desc, 3).unwrap();
            // move BN scales and shifts off their initial values
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for t in params.tensors_mut() {
                if t.name.ends_with("gamma") || t.name.ends_with("beta") || t.name.ends_with("bias") {
                    for v in &mut t.data {
                        *v += rng.random_range(-0.3..0.3);
                    }
                }
            }
            // 16x16 keeps eight values per channel in the bottleneck batch statistics
            let imgs = random_images(2, 16, 5);
            let g: Vec<OutputGrad> = (0..2).map(|_| random_grad(16, 16, &mut rng)).collect();
            let (_, cache) = predictor_forward(&imgs, &params, Mode::Train).unwrap();
            let grads = predictor_backward(&params, &cache, &g).unwrap();
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            for ti in 0..params.tensors.len() {
                if !params.tensors[ti].trainable || params.tensors[ti].name.starts_with("lambda_const") {
                    continue;
                }
                let len = params.tensors[ti].data.len();
                for j in [0, len / 2, len - 1] {
                    let mut p = params.clone();
                    p.tensors_mut()[ti].data[j] += h;
                    let mut m = params.clone();
                    m.tensors_mut()[ti].data[j] -= h;
                    let num = (objective(&p, &imgs, &g) - objective(&m, &imgs, &g)) / (2.0 * h);
                    let ana = grads.tensors[ti][j];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-3, "{} [{j}]: {ana} vs {num}", params.tensors[ti].name);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-3);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let params = init_params(tiny(), 9).unwrap();
        let imgs = random_images(2, 8, 1);
        let (_, cache) = predictor_forward(&imgs, &params, Mode::Train).unwrap();
        let z = Field::zeros(8, 8);
        let g = OutputGrad {
            d_lambda1_raw: z.clone(),
            d_lambda2_raw: z.clone(),
            d_phi0: z.clone(),
            d_p: z,
        };
        let grads = predictor_backward(&params, &cache, &[g.clone(), g]).unwrap();
        assert!(grads.tensors.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_or_eval_cache_is_rejected() {
        let mut params = init_params(tiny(), 9).unwrap();
        let imgs = random_images(1, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = vec![random_grad(8, 8, &mut rng)];
        let (_, eval_cache) = predictor_forward(&imgs, &params, Mode::Eval).unwrap();
        assert!(matches!(predictor_backward(&params, &eval_cache, &g), Err(Error::StaleCache(_))));
        let (_, cache) = predictor_forward(&imgs, &params, Mode::Train).unwrap();
        params.tensors_mut()[0].data[0] += 1.0;
        assert!(matches!(predictor_backward(&params, &cache, &g), Err(Error::StaleCache(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut params = init_params(tiny(), 2).unwrap();
        let imgs = random_images(2, 8, 3);
        let (_, cache) = predictor_forward(&imgs, &params, Mode::Train).unwrap();
        let batch = cache.bn_batches[0].clone().unwrap();
        params.update_running_stats(&cache);
        let m = params.tensor("enc1.0.bn.running_mean").unwrap().data[0];
        let v = params.tensor("enc1.0.bn.running_var").unwrap().data[0];
        assert!((m - 0.1 * batch.mean[0]).abs() < 1e-15);
        assert!((v - (0.9 + 0.1 * batch.unbiased_var(0))).abs() < 1e-15);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let params = init_params(tiny(), 4).unwrap();
        let imgs = random_images(2, 16, 4);
        let a = predictor_forward(&imgs, &params, Mode::Eval).unwrap().0;
        let b = predictor_forward(&imgs, &params, Mode::Eval).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
