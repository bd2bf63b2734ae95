//! Progressive semantically-nested segmentation network.
//!
//! An encoder of conv+BN+ReLU blocks with 2× max-pooling in between; each
//! block's last feature map is collapsed to one logit channel by a 1×1×1
//! conv. The decoder has no parameters: coarse logits are trilinearly
//! upsampled and added into the next finer level, and every aggregated level
//! is deeply supervised with a Dice loss.

pub mod gradcheck;
mod io;
mod net;
pub mod ops;
mod train;

pub use io::{load_model, model_paths, save_model};
pub use net::{
    aggregate_backward, aggregate_logits, backward, build_network, forward, update_running_stats, BnMode,
    DecoderDirection, ForwardCache, LogitMaps, ModelWeights, PSNNConfig, Param,
};
pub use ops::{Real, Tensor};
pub use train::{
    adam_step, batch_tensor, deep_supervised_loss, deep_supervised_loss_grad, dice_loss, dice_loss_grad, evaluate_loss,
    train_stream, AdamState, LossGrad, PatchProvider, TrainConfig, TrainOutcome,
};

/// Sigmoid of the output logits, evaluated with frozen BN statistics.
pub fn predict_prob(w: &ModelWeights<f32>, input: &Tensor<f32>) -> crate::Result<Tensor<f32>> {
    let (maps, _) = forward(w, input, BnMode::Eval)?;
    let mut out = maps.output().clone();
    out.data.iter_mut().for_each(|v| *v = ops::sigmoid(*v));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(rng: &mut ChaCha8Rng, n: usize, c: usize, dims: [usize; 3]) -> Tensor<f64> {
        let mut t = Tensor::zeros(n, c, dims);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    #[test]
    fn parameter_counts() {
        let cfg = PSNNConfig { in_channels: 1, convs_per_block: vec![2, 2], channels_per_block: vec![4, 8], ..Default::default() };
        assert_eq!(cfg.param_count(), 3194);
        let w = build_network(&cfg, 0).unwrap();
        assert_eq!(w.trainable_count(), 3194);
        let d = build_network(&PSNNConfig::default(), 0).unwrap();
        assert_eq!(d.collapse_count(), 4);
        assert_eq!(d.trainable_count(), PSNNConfig::default().param_count());
        // decoder direction changes no parameter shapes
        let l2h = build_network(&PSNNConfig { decoder_direction: DecoderDirection::LowToHigh, ..cfg.clone() }, 0).unwrap();
        assert_eq!(
            w.params.iter().map(|p| (&p.name, &p.shape)).collect::<Vec<_>>(),
            l2h.params.iter().map(|p| (&p.name, &p.shape)).collect::<Vec<_>>()
        );
        assert_eq!(build_network(&cfg, 3).unwrap(), build_network(&cfg, 3).unwrap());
        assert_ne!(build_network(&cfg, 3).unwrap(), build_network(&cfg, 4).unwrap());
        let bad = PSNNConfig { convs_per_block: vec![2], ..cfg };
        assert!(matches!(build_network(&bad, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn single_block_output_is_raw_logits() {
        let cfg = PSNNConfig { in_channels: 1, convs_per_block: vec![1], channels_per_block: vec![3], ..Default::default() };
        let w = ModelWeights::<f64>::init(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_input(&mut rng, 1, 1, [5, 3, 7]);
        let (maps, _) = forward(&w, &x, BnMode::Train).unwrap();
        assert_eq!(maps.f, maps.f_tilde);
        assert_eq!(maps.output().dims, [5, 3, 7]);
    }

    #[test]
    fn nested_equals_flattened_sum() {
        let cfg = PSNNConfig { in_channels: 1, convs_per_block: vec![1, 1, 1, 1], channels_per_block: vec![2, 2, 2, 2], ..Default::default() };
        let w = ModelWeights::<f64>::init(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_input(&mut rng, 1, 1, [16, 8, 8]);
        let (maps, _) = forward(&w, &x, BnMode::Train).unwrap();
        let mut flat = maps.f_tilde[0].clone();
        for l in 1..4 {
            let up = ops::upsample_pow(&maps.f_tilde[l], l);
            flat.data.iter_mut().zip(&up.data).for_each(|(a, b)| *a += b);
        }
        for (a, b) in flat.data.iter().zip(&maps.f[0].data) {
            assert!((a - b).abs() < 1e-5);
        }
        for l in 0..4 {
            assert_eq!(maps.f[l].dims, [16 >> l, 8 >> l, 8 >> l]);
        }
    }

    #[test]
    fn constant_logits_with_zero_kernels() {
        let cfg = PSNNConfig { in_channels: 1, convs_per_block: vec![1, 1], channels_per_block: vec![2, 2], ..Default::default() };
        let mut w = ModelWeights::<f64>::init(&cfg, 1).unwrap();
        for p in &mut w.params {
            if p.name.contains(".conv") && p.name.ends_with(".weight") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
            if p.name == "block2.collapse.bias" {
                p.data[0] = 1.5;
            }
        }
        let mut x = Tensor::zeros(1, 1, [4, 4, 4]);
        x.data.iter_mut().for_each(|v| *v = 3.0);
        let (maps, _) = forward(&w, &x, BnMode::Eval).unwrap();
        assert!(maps.output().data.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn shape_and_channel_errors() {
        let w = ModelWeights::<f64>::init(&gradcheck::tiny_config(DecoderDirection::HighToLow), 0).unwrap();
        let x = Tensor::<f64>::zeros(1, 2, [5, 4, 4]);
        assert!(matches!(forward(&w, &x, BnMode::Eval), Err(Error::ShapeMismatch(_))));
        let x = Tensor::<f64>::zeros(1, 3, [4, 4, 4]);
        assert!(matches!(forward(&w, &x, BnMode::Eval), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn dice_examples() {
        let t = [1u8, 0, 1, 0];
        let p = [1.0f64, 0.0, 1.0, 0.0];
        assert_eq!(dice_loss(&p, &t, 1.0).unwrap(), 0.0);
        let inv = [0.0f64, 1.0, 0.0, 1.0];
        let eps = 0.5;
        let want = 1.0 - eps / (4.0 + eps);
        assert!((dice_loss(&inv, &t, eps).unwrap() - want).abs() < 1e-15);
        assert_eq!(dice_loss(&[0.0f64; 4], &[0u8; 4], 1.0).unwrap(), 0.0);
        assert!(dice_loss(&[0.0f64; 3], &t, 1.0).is_err());
        // gradient vs finite differences
        let p = [0.3f64, 0.6, 0.2, 0.9];
        let (_, g) = dice_loss_grad(&p, &t, 1.0).unwrap();
        for i in 0..4 {
            let mut a = p;
            a[i] += 1e-6;
            let mut b = p;
            b[i] -= 1e-6;
            let fd = (dice_loss(&a, &t, 1.0).unwrap() - dice_loss(&b, &t, 1.0).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn deep_supervision_reduces_to_dice_for_one_block() {
        let cfg = PSNNConfig { in_channels: 1, convs_per_block: vec![1], channels_per_block: vec![2], ..Default::default() };
        let w = ModelWeights::<f64>::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_input(&mut rng, 1, 1, [4, 4, 4]);
        let y = gradcheck::slab_target(1, [4, 4, 4]);
        let (maps, _) = forward(&w, &x, BnMode::Train).unwrap();
        let prob: Vec<f64> = maps.f[0].data.iter().map(|&v| ops::sigmoid(v)).collect();
        assert_eq!(deep_supervised_loss(&maps, &y, 1.0).unwrap(), dice_loss(&prob, &y, 1.0).unwrap());
        // saturated perfect logits at every level
        let mut sat = maps.clone();
        for (i, v) in sat.f[0].data.iter_mut().enumerate() {
            *v = if y[i] == 1 { 40.0 } else { -40.0 };
        }
        assert!(deep_supervised_loss(&sat, &y, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // ReLU and max-pool kinks crossed inside ±h make central differences
        // inexact; on every smooth probe the agreement must be complete
        for d in [DecoderDirection::HighToLow, DecoderDirection::LowToHigh] {
            for seed in 0..3 {
                let rep = gradcheck::check_gradients(&gradcheck::tiny_config(d), [8, 8, 8], seed, 1e-3, 1e-3).unwrap();
                assert_eq!(rep.smooth_ok, rep.smooth_total, "{d:?} seed {seed}: {rep:?}");
                assert!(rep.smooth_total * 4 >= rep.total * 3, "{d:?} seed {seed}: {rep:?}");
            }
        }
    }

    #[test]
    fn gradients_exact_with_small_step() {
        let rep = gradcheck::check_gradients(&gradcheck::tiny_config(DecoderDirection::HighToLow), [8, 8, 8], 0, 1e-6, 1e-4)
            .unwrap();
        assert!(rep.ok as f64 >= 0.99 * rep.total as f64, "{rep:?}");
    }

    #[test]
    fn adam_closed_form() {
        let cfg = PSNNConfig { in_channels: 1, convs_per_block: vec![1], channels_per_block: vec![1], ..Default::default() };
        let mut w = ModelWeights::<f64>::init(&cfg, 0).unwrap();
        let tc = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let before = w.clone();
        let mut st = AdamState::new(&w);
        let zeros = w.zeros_like();
        adam_step(&mut w, &zeros, &mut st, &tc).unwrap();
        assert_eq!(w, before);
        // unit gradient on every parameter at t = 1: update is -lr / (1 + eps)
        let mut w = before.clone();
        let mut st = AdamState::new(&w);
        let ones: Vec<Vec<f64>> = w.params.iter().map(|p| vec![1.0; p.data.len()]).collect();
        adam_step(&mut w, &ones, &mut st, &tc).unwrap();
        let want = -tc.learning_rate / (1.0 + tc.epsilon);
        for (a, b) in w.params.iter().zip(&before.params) {
            for (x, y) in a.data.iter().zip(&b.data) {
                if a.trainable {
                    assert!((x - y - want).abs() < 1e-15);
                } else {
                    assert_eq!(x, y);
                }
            }
        }
        let mut bad = ones.clone();
        bad[0][0] = f64::NAN;
        let snapshot = w.clone();
        assert!(matches!(adam_step(&mut w, &bad, &mut st, &tc), Err(Error::NonFiniteGradient(_))));
        assert_eq!(w, snapshot);
    }

    #[test]
    fn model_round_trip_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = gradcheck::tiny_config(DecoderDirection::HighToLow);
        let w = build_network(&cfg, 5).unwrap();
        let stem = dir.path().join("m");
        save_model(&w, &stem).unwrap();
        let back = load_model(&stem, Some(&cfg)).unwrap();
        assert_eq!(back, w);
        let other = PSNNConfig { channels_per_block: vec![2, 5], ..cfg.clone() };
        assert!(matches!(load_model(&stem, Some(&other)), Err(Error::ManifestMismatch(_))));
        // tamper with a tensor shape
        let (json, _) = model_paths(&stem);
        let text = std::fs::read_to_string(&json).unwrap();
        std::fs::write(&json, text.replacen("\"shape\": [\n        2,\n        2,", "\"shape\": [\n        2,\n        3,", 1)).unwrap();
        assert!(matches!(load_model(&stem, None), Err(Error::ManifestMismatch(_))));
    }

    fn toy_patches(n: usize) -> Vec<crate::volio::PatchSample> {
        use crate::volio::{PatchKind, PatchSample};
        use crate::Grid3;
        (0..n)
            .map(|k| {
                let label = Grid3::from_fn([8, 8, 8], |x, y, z| ((x + k) % 6 < 3 && y > 2 && z < 5) as u8);
                let ch = label.map(|v| v as f32 * 0.5 + 0.1 * k as f32);
                PatchSample { channels: vec![ch], label, center: [4; 3], kind: PatchKind::Positive }
            })
            .collect()
    }

    fn toy_net() -> PSNNConfig {
        PSNNConfig { in_channels: 1, ..gradcheck::tiny_config(DecoderDirection::HighToLow) }
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train_stream(&toy_patches(2), None, &toy_net(), &cfg).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.weights, ModelWeights::<f32>::init(&toy_net(), cfg.seed).unwrap());
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = TrainConfig { epochs: 2, seed: 4, ..Default::default() };
        let a = train_stream(&toy_patches(3), None, &toy_net(), &cfg).unwrap();
        let b = train_stream(&toy_patches(3), None, &toy_net(), &cfg).unwrap();
        assert_eq!(a.steps, 4);
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn validation_keeps_best_epoch() {
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let data = toy_patches(2);
        let out = train_stream(&data, Some(&data), &toy_net(), &cfg).unwrap();
        assert_eq!(out.val_history.len(), 3);
        let best = out.best_epoch.unwrap();
        assert!(out.val_history.iter().all(|&v| v >= out.val_history[best]));
        assert_eq!(evaluate_loss(&out.weights, &data, &cfg).unwrap(), out.val_history[best]);
    }
}
