use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward, update_running_stats, BnMode, DecoderDirection, LogitMaps, ModelWeights, PSNNConfig};
use super::ops::{self, r, Real, Tensor};
use crate::error::{Error, Result};
use crate::volio::{rotate_xy, PatchSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam first-moment coefficient, read as the "momentum".
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Added to the gradient as `weight_decay * w`.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub patches_per_case: usize,
    pub positive_fraction: f64,
    /// Patches are rotated in x-y by an angle drawn from `±rotation_max_deg`.
    pub rotation_max_deg: f64,
    pub dice_eps: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps, for desk-scale runs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.005,
            epochs: 40,
            batch_size: 2,
            patch_size: [80, 80, 64],
            patches_per_case: 80,
            positive_fraction: 0.5,
            rotation_max_deg: 10.0,
            dice_eps: 1.0,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || !(self.dice_eps > 0.0) {
            return bad("learning_rate, epsilon and dice_eps must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.rotation_max_deg >= 0.0) || self.rotation_max_deg > 180.0 {
            return bad("weight_decay must be non-negative and rotation_max_deg in [0, 180]");
        }
        if self.batch_size == 0 || self.patch_size.contains(&0) {
            return bad("batch_size and patch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must be in [0, 1]");
        }
        Ok(())
    }
}

/// `1 - (2 Σ p y + eps) / (Σ p + Σ y + eps)`.
pub fn dice_loss<T: Real>(prob: &[T], target: &[u8], eps: T) -> Result<T> {
    Ok(dice_loss_grad(prob, target, eps)?.0)
}

/// Dice loss and its gradient with respect to `prob`.
pub fn dice_loss_grad<T: Real>(prob: &[T], target: &[u8], eps: T) -> Result<(T, Vec<T>)> {
    if prob.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("prob {} vs target {}", prob.len(), target.len())));
    }
    let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
    for (&p, &y) in prob.iter().zip(target) {
        let y = if y != 0 { T::one() } else { T::zero() };
        inter += p * y;
        sp += p;
        sy += y;
    }
    let two = r::<T>(2.0);
    let num = two * inter + eps;
    let den = sp + sy + eps;
    let loss = T::one() - num / den;
    let grad = target
        .iter()
        .map(|&y| {
            let y = if y != 0 { T::one() } else { T::zero() };
            -(two * y * den - num) / (den * den)
        })
        .collect();
    Ok((loss, grad))
}

fn check_target<T: Real>(maps: &LogitMaps<T>, target: &[u8]) -> Result<()> {
    let out = maps.output();
    if target.len() != out.n * out.voxels() {
        return Err(Error::ShapeMismatch(format!(
            "target has {} voxels, maps have {}",
            target.len(),
            out.n * out.voxels()
        )));
    }
    Ok(())
}

/// Mean over levels and batch samples of the Dice loss of
/// `sigmoid(upsample(f[l]))` against the full-resolution target
/// (`n * voxels` labels, sample-major).
pub fn deep_supervised_loss<T: Real>(maps: &LogitMaps<T>, target: &[u8], eps: T) -> Result<T> {
    Ok(deep_supervised_loss_grad(maps, target, eps)?.total)
}

pub struct LossGrad<T> {
    pub total: T,
    /// Dice loss of the final output map, averaged over the batch.
    pub output: T,
    /// Gradient with respect to each aggregated map `f[l]`.
    pub df: Vec<Tensor<T>>,
}

pub fn deep_supervised_loss_grad<T: Real>(maps: &LogitMaps<T>, target: &[u8], eps: T) -> Result<LossGrad<T>> {
    check_target(maps, target)?;
    let m = maps.levels();
    let out_level = match maps.direction {
        DecoderDirection::HighToLow => 0,
        DecoderDirection::LowToHigh => m - 1,
    };
    let n = maps.output().n;
    let scale = T::one() / T::from_usize(m * n).expect("count");
    let (mut total, mut output) = (T::zero(), T::zero());
    let mut df = Vec::with_capacity(m);
    for l in 0..m {
        let full = maps.full_resolution(l);
        let v = full.voxels();
        let mut dfull = Tensor::zeros(full.n, 1, full.dims);
        for s in 0..n {
            let logits = full.channel(s, 0);
            let prob: Vec<T> = logits.iter().map(|&x| ops::sigmoid(x)).collect();
            let (loss, dp) = dice_loss_grad(&prob, &target[s * v..(s + 1) * v], eps)?;
            total += loss * scale;
            if l == out_level {
                output += loss / T::from_usize(n).expect("count");
            }
            for ((d, &g), &p) in dfull.channel_mut(s, 0).iter_mut().zip(&dp).zip(&prob) {
                *d = g * p * (T::one() - p) * scale;
            }
        }
        df.push(match maps.direction {
            DecoderDirection::HighToLow => ops::upsample_pow_adjoint(&dfull, l),
            DecoderDirection::LowToHigh => dfull,
        });
    }
    Ok(LossGrad { total, output, df })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(w: &ModelWeights<T>) -> Self {
        Self { m: w.zeros_like(), v: w.zeros_like(), t: 0 }
    }
}

/// One Adam step with bias correction; L2 weight decay is added to the
/// gradient of every trainable tensor. Non-finite gradients leave the
/// weights untouched.
pub fn adam_step<T: Real>(w: &mut ModelWeights<T>, grads: &[Vec<T>], state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != w.params.len() || grads.iter().zip(&w.params).any(|(g, p)| g.len() != p.data.len()) {
        return Err(Error::ShapeMismatch("gradient shapes do not match the weights".into()));
    }
    for (g, p) in grads.iter().zip(&w.params) {
        if p.trainable && g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let (b1, b2) = (r::<T>(cfg.beta1), r::<T>(cfg.beta2));
    let (lr, eps, wd) = (r::<T>(cfg.learning_rate), r::<T>(cfg.epsilon), r::<T>(cfg.weight_decay));
    let c1 = T::one() - b1.powi(state.t as i32);
    let c2 = T::one() - b2.powi(state.t as i32);
    for (i, p) in w.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        for (j, x) in p.data.iter_mut().enumerate() {
            let g = grads[i][j] + wd * *x;
            let m = &mut state.m[i][j];
            *m = b1 * *m + (T::one() - b1) * g;
            let v = &mut state.v[i][j];
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Indexed source of training patches; lets callers crop lazily.
pub trait PatchProvider {
    fn len(&self) -> usize;
    fn patch(&self, index: usize) -> Result<PatchSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchProvider for [PatchSample] {
    fn len(&self) -> usize {
        <[PatchSample]>::len(self)
    }

    fn patch(&self, index: usize) -> Result<PatchSample> {
        Ok(self[index].clone())
    }
}

impl PatchProvider for Vec<PatchSample> {
    fn len(&self) -> usize {
        <[PatchSample]>::len(self)
    }

    fn patch(&self, index: usize) -> Result<PatchSample> {
        Ok(self[index].clone())
    }
}

/// Stacks patches into a network input and a flat label vector.
pub fn batch_tensor<T: Real>(patches: &[PatchSample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = patches.first().ok_or(Error::NoRecords)?;
    let dims = first.label.dims();
    let c = first.channels.len();
    let mut t = Tensor::zeros(patches.len(), c, dims);
    let mut labels = Vec::with_capacity(patches.len() * t.voxels());
    for (n, p) in patches.iter().enumerate() {
        if p.channels.len() != c {
            return Err(Error::ChannelMismatch { expected: c, got: p.channels.len() });
        }
        if p.label.dims() != dims || p.channels.iter().any(|g| g.dims() != dims) {
            return Err(Error::ShapeMismatch("patches in a batch differ in shape".into()));
        }
        for (ch, g) in p.channels.iter().enumerate() {
            for (d, &v) in t.channel_mut(n, ch).iter_mut().zip(g.data()) {
                *d = r::<T>(v as f64);
            }
        }
        labels.extend(p.label.data().iter().map(|&v| (v != 0) as u8));
    }
    Ok((t, labels))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    /// Deep-supervised loss per optimizer step.
    pub loss_history: Vec<f64>,
    /// Dice loss of the output map per optimizer step.
    pub output_loss_history: Vec<f64>,
    /// Mean validation loss per epoch, when a validation set was given.
    pub val_history: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

/// Mean deep-supervised loss with frozen BN statistics.
pub fn evaluate_loss(w: &ModelWeights<f32>, data: &dyn PatchProvider, cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..data.len() {
        let (x, y) = batch_tensor::<f32>(&[data.patch(i)?])?;
        let (maps, _) = forward(w, &x, BnMode::Eval)?;
        sum += deep_supervised_loss(&maps, &y, cfg.dice_eps as f32)? as f64;
    }
    Ok(sum / data.len().max(1) as f64)
}

/// Trains one network: shuffled epochs of sample, rotate, forward,
/// deep-supervised Dice, Adam. Returns the weights with the lowest
/// validation loss when `val` is given, else the final weights.
pub fn train_stream(
    train: &dyn PatchProvider,
    val: Option<&dyn PatchProvider>,
    net: &PSNNConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if train.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut w = ModelWeights::<f32>::init(net, cfg.seed)?;
    let mut state = AdamState::new(&w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut out = TrainOutcome {
        weights: w.clone(),
        loss_history: Vec::new(),
        output_loss_history: Vec::new(),
        val_history: Vec::new(),
        best_epoch: None,
        steps: 0,
    };
    let mut best = f64::INFINITY;
    let cap = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if out.steps >= cap {
                break 'epochs;
            }
            let mut patches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let p = train.patch(i)?;
                let angle = if cfg.rotation_max_deg > 0.0 {
                    rng.random_range(-cfg.rotation_max_deg..=cfg.rotation_max_deg)
                } else {
                    0.0
                };
                patches.push(rotate_xy(&p, angle));
            }
            let (x, y) = batch_tensor::<f32>(&patches)?;
            let (maps, cache) = forward(&w, &x, BnMode::Train)?;
            let lg = deep_supervised_loss_grad(&maps, &y, cfg.dice_eps as f32)?;
            let grads = backward(&w, &cache, lg.df);
            adam_step(&mut w, &grads, &mut state, cfg)?;
            update_running_stats(&mut w, &cache);
            out.loss_history.push(lg.total as f64);
            out.output_loss_history.push(lg.output as f64);
            out.steps += 1;
        }
        if let Some(val) = val {
            let v = evaluate_loss(&w, val, cfg)?;
            log::debug!("epoch {epoch}: validation loss {v:.4}");
            out.val_history.push(v);
            if v < best {
                best = v;
                out.best_epoch = Some(epoch);
                out.weights = w.clone();
            }
        }
    }
    if val.is_none() || out.best_epoch.is_none() {
        out.weights = w;
    }
    Ok(out)
}
