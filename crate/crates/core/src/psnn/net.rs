use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ops::{self, r, BnCache, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecoderDirection {
    /// PSNN: coarse logits are upsampled and added into finer ones.
    HighToLow,
    /// P-HNN style: each block's logits are upsampled to full resolution and
    /// summed from the finest block upwards; the last sum is the output.
    LowToHigh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PSNNConfig {
    pub in_channels: usize,
    pub convs_per_block: Vec<usize>,
    pub channels_per_block: Vec<usize>,
    pub decoder_direction: DecoderDirection,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for PSNNConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            convs_per_block: vec![2, 2, 3, 3],
            channels_per_block: vec![8, 16, 32, 64],
            decoder_direction: DecoderDirection::HighToLow,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl PSNNConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels_per_block.len()
    }

    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        Self { in_channels, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if self.channels_per_block.is_empty() || self.channels_per_block.len() != self.convs_per_block.len() {
            return bad(format!(
                "channels_per_block ({}) and convs_per_block ({}) must have the same non-zero length",
                self.channels_per_block.len(),
                self.convs_per_block.len()
            ));
        }
        if self.channels_per_block.contains(&0) || self.convs_per_block.contains(&0) {
            return bad("every block needs at least one conv and one channel".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must be in [0, 1) and bn_eps positive".into());
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by `2^(m-1)`.
    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.num_blocks() - 1);
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::ShapeMismatch(format!("input dims {dims:?} not divisible by {f}")));
        }
        Ok(())
    }

    /// Trainable parameter count: conv kernels, BN scale/shift, and one
    /// 1×1×1 collapse conv (weights + bias) per block.
    pub fn param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for (&c, &k) in self.channels_per_block.iter().zip(&self.convs_per_block) {
            for _ in 0..k {
                total += c * cin * 27 + 2 * c;
                cin = c;
            }
            total += c + 1;
        }
        total
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// BN running statistics are state, not trainable.
    pub trainable: bool,
}

/// Indices into [`ModelWeights::params`] for one conv + BN layer.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvIdx {
    w: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIdx {
    convs: Vec<ConvIdx>,
    collapse_w: usize,
    collapse_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: PSNNConfig,
    pub params: Vec<Param<T>>,
    layout: Vec<BlockIdx>,
}

fn layout_of(config: &PSNNConfig) -> (Vec<BlockIdx>, Vec<(String, Vec<usize>, bool)>) {
    let mut specs = Vec::new();
    let mut blocks = Vec::new();
    let mut cin = config.in_channels;
    let push = |name: String, shape: Vec<usize>, trainable: bool, specs: &mut Vec<(String, Vec<usize>, bool)>| {
        specs.push((name, shape, trainable));
        specs.len() - 1
    };
    for (b, (&c, &k)) in config.channels_per_block.iter().zip(&config.convs_per_block).enumerate() {
        let mut convs = Vec::new();
        for j in 0..k {
            let p = format!("block{}.conv{}", b + 1, j + 1);
            convs.push(ConvIdx {
                w: push(format!("{p}.weight"), vec![c, cin, 3, 3, 3], true, &mut specs),
                gamma: push(format!("{p}.bn.gamma"), vec![c], true, &mut specs),
                beta: push(format!("{p}.bn.beta"), vec![c], true, &mut specs),
                mean: push(format!("{p}.bn.running_mean"), vec![c], false, &mut specs),
                var: push(format!("{p}.bn.running_var"), vec![c], false, &mut specs),
                cin,
                cout: c,
            });
            cin = c;
        }
        let p = format!("block{}.collapse", b + 1);
        let collapse_w = push(format!("{p}.weight"), vec![1, c, 1, 1, 1], true, &mut specs);
        let collapse_b = push(format!("{p}.bias"), vec![1], true, &mut specs);
        blocks.push(BlockIdx { convs, collapse_w, collapse_b });
    }
    (blocks, specs)
}

impl<T: Real> ModelWeights<T> {
    /// He-normal conv kernels, unit BN scale, zero shifts and biases.
    pub fn init(config: &PSNNConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_of(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, shape, trainable)| {
                let len: usize = shape.iter().product();
                let data = if name.contains(".conv") && name.ends_with(".weight") {
                    let fan_in = shape[1] * 27;
                    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| r::<T>(n.sample(&mut rng))).collect()
                } else if name.ends_with("collapse.weight") {
                    let n = Normal::new(0.0, (1.0 / shape[1] as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| r::<T>(n.sample(&mut rng))).collect()
                } else if name.ends_with("gamma") || name.ends_with("running_var") {
                    vec![T::one(); len]
                } else {
                    vec![T::zero(); len]
                };
                Param { name, shape, data, trainable }
            })
            .collect();
        Ok(Self { config: config.clone(), params, layout })
    }

    /// Rebuilds weights from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_params(config: &PSNNConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_of(config);
        if specs.len() != params.len() {
            return Err(Error::ManifestMismatch(format!("expected {} tensors, found {}", specs.len(), params.len())));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ManifestMismatch(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        let params = params
            .into_iter()
            .zip(specs)
            .map(|(p, (_, _, trainable))| Param { trainable, ..p })
            .collect();
        Ok(Self { config: config.clone(), params, layout })
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn collapse_count(&self) -> usize {
        self.params.iter().filter(|p| p.name.ends_with("collapse.weight")).count()
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| r::<U>(v.to_f64().expect("finite"))).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, i: usize) -> &[T] {
        &self.params[i].data
    }
}

/// Per-block raw logits `f_tilde` and aggregated logits `f`; index 0 is the
/// finest (first) block.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMaps<T> {
    pub f_tilde: Vec<Tensor<T>>,
    pub f: Vec<Tensor<T>>,
    pub direction: DecoderDirection,
}

impl<T: Real> LogitMaps<T> {
    pub fn levels(&self) -> usize {
        self.f.len()
    }

    /// Final full-resolution logits.
    pub fn output(&self) -> &Tensor<T> {
        match self.direction {
            DecoderDirection::HighToLow => &self.f[0],
            DecoderDirection::LowToHigh => &self.f[self.f.len() - 1],
        }
    }

    /// Level `l` (0-based) at full input resolution.
    pub fn full_resolution(&self, l: usize) -> Tensor<T> {
        match self.direction {
            DecoderDirection::HighToLow => ops::upsample_pow(&self.f[l], l),
            DecoderDirection::LowToHigh => self.f[l].clone(),
        }
    }
}

/// Combines per-block logits into aggregated maps.
pub fn aggregate_logits<T: Real>(f_tilde: Vec<Tensor<T>>, direction: DecoderDirection) -> LogitMaps<T> {
    let m = f_tilde.len();
    let f = match direction {
        DecoderDirection::HighToLow => {
            let mut f: Vec<Tensor<T>> = vec![f_tilde[m - 1].clone()];
            for l in (0..m - 1).rev() {
                let mut cur = f_tilde[l].clone();
                let up = ops::upsample2(&f[0]);
                for (a, b) in cur.data.iter_mut().zip(&up.data) {
                    *a += *b;
                }
                f.insert(0, cur);
            }
            f
        }
        DecoderDirection::LowToHigh => {
            let mut f: Vec<Tensor<T>> = Vec::with_capacity(m);
            for (l, ft) in f_tilde.iter().enumerate() {
                let mut up = ops::upsample_pow(ft, l);
                if let Some(prev) = f.last() {
                    for (a, b) in up.data.iter_mut().zip(&prev.data) {
                        *a += *b;
                    }
                }
                f.push(up);
            }
            f
        }
    };
    LogitMaps { f_tilde, f, direction }
}

/// Maps gradients with respect to the aggregated maps `f` back onto the raw
/// per-block logits `f_tilde`.
pub fn aggregate_backward<T: Real>(df: Vec<Tensor<T>>, direction: DecoderDirection) -> Vec<Tensor<T>> {
    let m = df.len();
    match direction {
        DecoderDirection::HighToLow => {
            // f[l] = ft[l] + up(f[l+1]): G[0] = df[0], G[l] = df[l] + up^T(G[l-1])
            let mut out: Vec<Tensor<T>> = Vec::with_capacity(m);
            for (l, d) in df.into_iter().enumerate() {
                let mut g = d;
                if l > 0 {
                    let back = ops::upsample2_adjoint(&out[l - 1]);
                    for (a, b) in g.data.iter_mut().zip(&back.data) {
                        *a += *b;
                    }
                }
                out.push(g);
            }
            out
        }
        DecoderDirection::LowToHigh => {
            // F[l] = sum_{j<=l} U_j ft[j]: dft[j] = U_j^T sum_{l>=j} dF[l]
            let mut suffix = df[m - 1].clone();
            let mut out = vec![None; m];
            for j in (0..m).rev() {
                if j < m - 1 {
                    for (a, b) in suffix.data.iter_mut().zip(&df[j].data) {
                        *a += *b;
                    }
                }
                out[j] = Some(ops::upsample_pow_adjoint(&suffix, j));
            }
            out.into_iter().map(|t| t.expect("filled")).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the forward cache records them for the running
    /// averages.
    Train,
    /// Running statistics.
    Eval,
}

struct ConvCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    /// Post-ReLU output.
    out: Tensor<T>,
}

struct BlockCache<T> {
    convs: Vec<ConvCache<T>>,
    /// Pool indices producing the next block's input.
    pool: Option<Vec<u32>>,
}

pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Batch means and variances of every BN layer, in layer order.
    pub fn batch_stats(&self) -> Vec<(Vec<T>, Vec<T>)> {
        self.blocks
            .iter()
            .flat_map(|b| b.convs.iter())
            .filter_map(|c| c.bn.as_ref().map(|bn| (bn.mean.clone(), bn.var.clone())))
            .collect()
    }

    /// ReLU on/off states and pool selections; two forward passes with the
    /// same pattern lie on the same linear piece of the non-smooth ops.
    pub(crate) fn activation_pattern(&self) -> Vec<u32> {
        let mut pat = Vec::new();
        for b in &self.blocks {
            for c in &b.convs {
                pat.extend(c.out.data.iter().map(|v| (*v > T::zero()) as u32));
            }
            if let Some(p) = &b.pool {
                pat.extend_from_slice(p);
            }
        }
        pat
    }
}

fn check_input<T: Real>(w: &ModelWeights<T>, input: &Tensor<T>) -> Result<()> {
    if input.c != w.config.in_channels {
        return Err(Error::ChannelMismatch { expected: w.config.in_channels, got: input.c });
    }
    w.config.check_input_dims(input.dims)
}

/// Runs the encoder and the decoder aggregation.
pub fn forward<T: Real>(w: &ModelWeights<T>, input: &Tensor<T>, mode: BnMode) -> Result<(LogitMaps<T>, ForwardCache<T>)> {
    check_input(w, input)?;
    let eps = r::<T>(w.config.bn_eps);
    let mut x = input.clone();
    let mut f_tilde = Vec::new();
    let mut blocks = Vec::new();
    let m = w.layout.len();
    for (b, blk) in w.layout.iter().enumerate() {
        let mut convs = Vec::new();
        for c in &blk.convs {
            let z = ops::conv3(&x, w.p(c.w), c.cout);
            let (mut y, bn) = match mode {
                BnMode::Train => {
                    let (y, cache) = ops::bn_train(&z, w.p(c.gamma), w.p(c.beta), eps);
                    (y, Some(cache))
                }
                BnMode::Eval => (ops::bn_eval(&z, w.p(c.gamma), w.p(c.beta), w.p(c.mean), w.p(c.var), eps), None),
            };
            ops::relu_inplace(&mut y);
            let input = std::mem::replace(&mut x, y.clone());
            convs.push(ConvCache { input, bn, out: y });
        }
        let cw = w.p(blk.collapse_w);
        let bias = w.p(blk.collapse_b)[0];
        let mut ft = Tensor::zeros(x.n, 1, x.dims);
        for n in 0..x.n {
            let dst = ft.channel_mut(n, 0);
            dst.iter_mut().for_each(|v| *v = bias);
            for (ch, &wc) in cw.iter().enumerate() {
                for (d, &v) in dst.iter_mut().zip(x.channel(n, ch)) {
                    *d += wc * v;
                }
            }
        }
        f_tilde.push(ft);
        let pool = if b + 1 < m {
            let (p, arg) = ops::maxpool2(&x);
            x = p;
            Some(arg)
        } else {
            None
        };
        blocks.push(BlockCache { convs, pool });
    }
    Ok((aggregate_logits(f_tilde, w.config.decoder_direction), ForwardCache { blocks }))
}

/// Gradients of a scalar loss with respect to every parameter, given its
/// gradients with respect to the aggregated maps. Requires a
/// [`BnMode::Train`] cache.
pub fn backward<T: Real>(w: &ModelWeights<T>, cache: &ForwardCache<T>, df: Vec<Tensor<T>>) -> Vec<Vec<T>> {
    let mut grads = w.zeros_like();
    let dft = aggregate_backward(df, w.config.decoder_direction);
    let m = w.layout.len();
    let mut carry: Option<Tensor<T>> = None;
    for b in (0..m).rev() {
        let blk = &w.layout[b];
        let bc = &cache.blocks[b];
        let last = &bc.convs[bc.convs.len() - 1].out;
        let mut da = match carry.take() {
            Some(dp) => ops::maxpool2_backward(&dp, bc.pool.as_ref().expect("pooled block"), last.dims),
            None => Tensor::zeros(last.n, last.c, last.dims),
        };
        let cw = w.p(blk.collapse_w).to_vec();
        let g = &dft[b];
        for n in 0..last.n {
            let gs = g.channel(n, 0);
            grads[blk.collapse_b][0] += gs.iter().copied().sum::<T>();
            for (ch, &wc) in cw.iter().enumerate() {
                let a = last.channel(n, ch);
                grads[blk.collapse_w][ch] += a.iter().zip(gs).map(|(&x, &y)| x * y).sum::<T>();
                for (d, &gv) in da.channel_mut(n, ch).iter_mut().zip(gs) {
                    *d += wc * gv;
                }
            }
        }
        for (j, c) in blk.convs.iter().enumerate().rev() {
            let cc = &bc.convs[j];
            ops::relu_backward_inplace(&mut da, &cc.out);
            let bn = cc.bn.as_ref().expect("backward needs a training-mode forward");
            let (mut dgamma, mut dbeta) = (std::mem::take(&mut grads[c.gamma]), std::mem::take(&mut grads[c.beta]));
            let dz = ops::bn_backward(&da, bn, w.p(c.gamma), &mut dgamma, &mut dbeta);
            grads[c.gamma] = dgamma;
            grads[c.beta] = dbeta;
            ops::conv3_backward_weights(&cc.input, &dz, &mut grads[c.w]);
            let first_layer = b == 0 && j == 0;
            if !first_layer {
                da = ops::conv3_backward_input(&dz, w.p(c.w), c.cin);
            }
        }
        if b > 0 {
            carry = Some(da);
        }
    }
    grads
}

/// Folds batch statistics into the running averages:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Real>(w: &mut ModelWeights<T>, cache: &ForwardCache<T>) {
    let mom = r::<T>(w.config.bn_momentum);
    let stats = cache.batch_stats();
    let idx: Vec<ConvIdx> = w.layout.iter().flat_map(|b| b.convs.iter().copied()).collect();
    for (c, (mean, var)) in idx.iter().zip(stats) {
        for (rm, bm) in w.params[c.mean].data.iter_mut().zip(&mean) {
            *rm = mom * *rm + (T::one() - mom) * *bm;
        }
        for (rv, bv) in w.params[c.var].data.iter_mut().zip(&var) {
            *rv = mom * *rv + (T::one() - mom) * *bv;
        }
    }
}

/// Builds freshly initialized f32 weights.
pub fn build_network(config: &PSNNConfig, seed: u64) -> Result<ModelWeights<f32>> {
    ModelWeights::init(config, seed)
}
