//! Finite-difference check of the deep-supervised Dice gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{backward, forward, BnMode, DecoderDirection, ModelWeights, PSNNConfig};
use super::ops::Tensor;
use super::train::{deep_supervised_loss, deep_supervised_loss_grad};
use crate::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradCheckReport {
    /// Trainable entries within the relative tolerance.
    pub ok: usize,
    pub total: usize,
    /// Entries whose ±h probes keep every ReLU state and max-pool selection
    /// of the unperturbed pass, i.e. the loss is smooth along the probe.
    pub smooth_ok: usize,
    pub smooth_total: usize,
}

impl GradCheckReport {
    pub fn fraction(&self) -> f64 {
        self.ok as f64 / self.total.max(1) as f64
    }

    pub fn smooth_fraction(&self) -> f64 {
        self.smooth_ok as f64 / self.smooth_total.max(1) as f64
    }

    pub fn merge(self, o: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            ok: self.ok + o.ok,
            total: self.total + o.total,
            smooth_ok: self.smooth_ok + o.smooth_ok,
            smooth_total: self.smooth_total + o.smooth_total,
        }
    }
}

/// Two blocks, widths [2, 4], one conv each, two input channels.
pub fn tiny_config(direction: DecoderDirection) -> PSNNConfig {
    PSNNConfig {
        in_channels: 2,
        convs_per_block: vec![1, 1],
        channels_per_block: vec![2, 4],
        decoder_direction: direction,
        ..Default::default()
    }
}

/// Slab-shaped target covering roughly a third of the patch.
pub fn slab_target(n: usize, dims: [usize; 3]) -> Vec<u8> {
    let mut y = Vec::with_capacity(n * dims.iter().product::<usize>());
    for s in 0..n {
        for z in 0..dims[2] {
            for yy in 0..dims[1] {
                for x in 0..dims[0] {
                    y.push(((x + s) % 5 < 3 && yy > 1 && z < dims[2] - 2) as u8);
                }
            }
        }
    }
    y
}

fn loss_and_pattern(w: &ModelWeights<f64>, x: &Tensor<f64>, y: &[u8], eps: f64) -> Result<(f64, Vec<u32>)> {
    let (maps, cache) = forward(w, x, BnMode::Train)?;
    Ok((deep_supervised_loss(&maps, y, eps)?, cache.activation_pattern()))
}

/// Compares analytic gradients against central differences with step `h`
/// on one random patch of shape `dims`, in f64.
pub fn check_gradients(cfg: &PSNNConfig, dims: [usize; 3], seed: u64, h: f64, rel_tol: f64) -> Result<GradCheckReport> {
    let w = ModelWeights::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(1, cfg.in_channels, dims);
    x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let y = slab_target(1, dims);
    let eps = 1.0;
    let (maps, cache) = forward(&w, &x, BnMode::Train)?;
    let base = cache.activation_pattern();
    let grads = backward(&w, &cache, deep_supervised_loss_grad(&maps, &y, eps)?.df);
    let mut rep = GradCheckReport::default();
    for (i, p) in w.params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        for j in 0..p.data.len() {
            let mut a = w.clone();
            a.params[i].data[j] += h;
            let mut b = w.clone();
            b.params[i].data[j] -= h;
            let (la, pa) = loss_and_pattern(&a, &x, &y, eps)?;
            let (lb, pb) = loss_and_pattern(&b, &x, &y, eps)?;
            let fd = (la - lb) / (2.0 * h);
            let g = grads[i][j];
            let good = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) <= rel_tol;
            rep.total += 1;
            rep.ok += good as usize;
            if pa == base && pb == base {
                rep.smooth_total += 1;
                rep.smooth_ok += good as usize;
            }
        }
    }
    Ok(rep)
}
