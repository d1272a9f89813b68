//! End-to-end training: network forward, contour evolution, two-branch loss,
//! full backward pass and Adam updates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::backprop_evolution;
use crate::error::{Error, Result};
use crate::evolution::{evolve, evolve_final, EvolutionConfig};
use crate::field::{Field, ImageGrid, Mask, ParameterMaps};
use crate::io::Sample;
use crate::loss::total_loss;
use crate::metrics::MetricsReport;
use crate::predictor::network::{init_params, lambda_from_raw, sigmoid, Descriptor, Gradients, OutputGrad};
use crate::predictor::{predictor_backward, predictor_forward, Mode, PredictorOutput, PredictorParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub evolution: EvolutionConfig,
    /// Channel widths are the full-scale widths divided by this.
    pub width_divisor: usize,
    /// Replace the predicted maps by two trainable scalars.
    pub constant_lambda: bool,
    pub batch_norm: bool,
    /// Random horizontal and vertical flips, each with probability 0.5.
    pub flip: bool,
    /// Validate every `val_every` epochs (and after the last one).
    pub val_every: usize,
    /// Stop after this many validations without a better mIoU.
    pub patience: Option<usize>,
    /// Rescale each minibatch gradient to at most this norm. Once the
    /// predicted weights grow, the unrolled evolution gets locally chaotic
    /// and rare batches produce gradients 1e4-1e5 times the usual size;
    /// unclipped, one of them derails Adam for many epochs.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha0: 1e-3,
            epochs: 200,
            batch_size: 2,
            seed: 0,
            evolution: EvolutionConfig::default(),
            width_divisor: 4,
            constant_lambda: false,
            batch_norm: true,
            flip: true,
            val_every: 1,
            patience: None,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::InvalidConfig("alpha0 must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.val_every < 1 {
            return Err(Error::InvalidConfig("val_every must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("clip_norm must be > 0, got {c}")));
            }
        }
        self.evolution.validate()?;
        self.descriptor(1).map(|_| ())
    }

    pub fn descriptor(&self, in_channels: usize) -> Result<Descriptor> {
        let mut d = Descriptor::scaled(in_channels, self.width_divisor)?;
        d.batch_norm = self.batch_norm;
        d.validate()?;
        Ok(d)
    }
}

/// `alpha0 * (1 - e / epochs)^0.9`.
pub fn lr_schedule(alpha0: f64, epoch: usize, epochs: usize) -> f64 {
    let frac = (1.0 - epoch as f64 / epochs as f64).max(0.0);
    alpha0 * frac.powf(0.9)
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &PredictorParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam step on every trainable tensor. Fails without
/// touching anything if a gradient is non-finite.
pub fn adam_update(params: &mut PredictorParams, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.tensors.len() != params.tensors().len() {
        return Err(Error::Shape("gradient and parameter lists differ".into()));
    }
    if let Some(name) = grads.first_non_finite(params) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        if !tensor.trainable {
            continue;
        }
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads.tensors[i]);
        for j in 0..tensor.data.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            tensor.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Parameter maps used for evolution: the predicted maps, or the two
/// constant scalars broadcast over the image.
pub fn parameter_maps(out: &PredictorOutput, params: &PredictorParams, constant: bool) -> ParameterMaps {
    if constant {
        let (r1, r2) = params.lambda_const_raw();
        let (w, h) = out.phi0.dims();
        ParameterMaps::constant(w, h, lambda_from_raw(r1), lambda_from_raw(r2))
    } else {
        out.lambda_maps()
    }
}

/// Which loss terms contribute to a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Branches {
    pub contour: bool,
    pub network: bool,
}

const BOTH: Branches = Branches {
    contour: true,
    network: true,
};

/// Mean loss and mean parameter gradient over one minibatch. Also returns
/// the forward cache so batch statistics can be folded into the running
/// estimates.
pub(crate) fn batch_gradients(
    params: &PredictorParams,
    batch: &[(&str, ImageGrid, Mask)],
    cfg: &TrainConfig,
    branches: Branches,
) -> Result<(f64, Gradients, crate::predictor::ForwardCache)> {
    let images: Vec<ImageGrid> = batch.iter().map(|(_, img, _)| img.clone()).collect();
    let (outputs, cache) = predictor_forward(&images, params, Mode::Train)?;
    let mut total = 0.0;
    let mut d_outputs = Vec::with_capacity(batch.len());
    let (mut d_const1, mut d_const2) = (0.0, 0.0);
    let (r1, r2) = params.lambda_const_raw();
    for ((id, img, mask), out) in batch.iter().zip(&outputs) {
        let run = || -> Result<(f64, OutputGrad, f64, f64)> {
            let maps = parameter_maps(out, params, cfg.constant_lambda);
            let trace = evolve(&out.phi0, &img.luminance(), &maps, &cfg.evolution)?;
            let loss = total_loss(trace.final_phi(), &out.p, mask, cfg.evolution.epsilon)?;
            let (w, h) = out.phi0.dims();
            let zero = Field::zeros(w, h);
            let mut value = 0.0;
            let mut d_p = zero.clone();
            if branches.network {
                value += loss.network_loss;
                d_p = loss.d_p;
            }
            let mut g = OutputGrad {
                d_lambda1_raw: zero.clone(),
                d_lambda2_raw: zero.clone(),
                d_phi0: zero,
                d_p,
            };
            let (mut c1, mut c2) = (0.0, 0.0);
            if branches.contour {
                value += loss.contour_loss;
                let bundle = backprop_evolution(&trace, &loss.d_phi_l)?;
                g.d_phi0 = bundle.d_phi0;
                if cfg.constant_lambda {
                    c1 = bundle.d_lambda1.sum() * sigmoid(r1);
                    c2 = bundle.d_lambda2.sum() * sigmoid(r2);
                } else {
                    g.d_lambda1_raw = bundle.d_lambda1.zip_map(&out.lambda1_raw, |d, r| d * sigmoid(r));
                    g.d_lambda2_raw = bundle.d_lambda2.zip_map(&out.lambda2_raw, |d, r| d * sigmoid(r));
                }
            }
            Ok((value, g, c1, c2))
        };
        let (value, g, c1, c2) = run().map_err(|e| e.for_sample(id))?;
        total += value;
        d_outputs.push(g);
        d_const1 += c1;
        d_const2 += c2;
    }
    let mut grads = predictor_backward(params, &cache, &d_outputs)?;
    let ci = params.lambda_const_index();
    grads.tensors[ci][0] += d_const1;
    grads.tensors[ci][1] += d_const2;
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads, cache))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub val_boundf: Option<f64>,
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "val_miou", "val_boundf"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            row.lr.to_string(),
            row.train_loss.to_string(),
            opt(row.val_miou),
            opt(row.val_boundf),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rescales `grads` to norm `max_norm` if it is longer. Returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

pub fn train(train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<(PredictorParams, Vec<EpochLog>)> {
    train_with(train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(PredictorParams, Vec<EpochLog>)> {
    cfg.validate()?;
    let first = train_set.first().ok_or(Error::EmptyDataset)?;
    let mut params = init_params(cfg.descriptor(first.image.channels())?, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.alpha0, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&str, ImageGrid, Mask)> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let (mut img, mut mask) = (s.image.clone(), s.mask.clone());
                    if cfg.flip {
                        if rng.random_bool(0.5) {
                            img = img.flip_x();
                            mask = mask.flip_x();
                        }
                        if rng.random_bool(0.5) {
                            img = img.flip_y();
                            mask = mask.flip_y();
                        }
                    }
                    (s.id.as_str(), img, mask)
                })
                .collect();
            let (loss, mut grads, cache) = batch_gradients(&params, &batch, cfg, BOTH)?;
            if let Some(c) = cfg.clip_norm {
                clip_gradients(&mut grads, c);
            }
            params.update_running_stats(&cache);
            adam_update(&mut params, &grads, &mut state, lr)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let mut row = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_miou: None,
            val_boundf: None,
        };
        let last = epoch + 1 == cfg.epochs;
        let mut stop = false;
        if !val_set.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            let report = evaluate(val_set, &params, cfg)?.mean;
            row.val_miou = Some(report.miou);
            row.val_boundf = Some(report.boundf);
            if report.miou > best {
                best = report.miou;
                stale = 0;
            } else {
                stale += 1;
                stop = cfg.patience.is_some_and(|p| stale >= p);
            }
        }
        on_epoch(&row);
        log.push(row);
        if stop {
            break;
        }
    }
    Ok((params, log))
}

/// Everything produced when segmenting one image.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub output: PredictorOutput,
    pub maps: ParameterMaps,
    pub phi_l: Field,
    /// `phi_L > 0`.
    pub mask: Mask,
}

pub fn segment(image: &ImageGrid, params: &PredictorParams, cfg: &TrainConfig) -> Result<Segmentation> {
    let (mut outputs, _) = predictor_forward(std::slice::from_ref(image), params, Mode::Eval)?;
    let output = outputs.remove(0);
    let maps = parameter_maps(&output, params, cfg.constant_lambda);
    let phi_l = evolve_final(&output.phi0, &image.luminance(), &maps, &cfg.evolution)?;
    let mask = phi_l.positive_mask();
    Ok(Segmentation {
        output,
        maps,
        phi_l,
        mask,
    })
}

/// Per-image and mean scores on a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
}

pub fn evaluate(samples: &[Sample], params: &PredictorParams, cfg: &TrainConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let seg = segment(&s.image, params, cfg).map_err(|e| e.for_sample(&s.id))?;
        s.mask.ensure_dims(seg.mask.dims()).map_err(|e| e.for_sample(&s.id))?;
        rows.push((s.id.clone(), MetricsReport::of(&seg.mask, &s.mask)));
    }
    let reports: Vec<_> = rows.iter().map(|(_, r)| *r).collect();
    let mean = MetricsReport::mean(&reports).expect("non-empty");
    Ok(Evaluation { rows, mean })
}
