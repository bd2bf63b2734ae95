//! Dense kernels for the network: 3×3×3 convolution, batch normalization,
//! max-pooling and trilinear ×2 upsampling, each with its backward pass.
//!
//! Feature maps are `[batch][channel][z][y][x]`, x fastest.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Scalar type the network is generic over (f32 for training, f64 for
/// gradient checks).
pub trait Real:
    Float + FromPrimitive + Sum + Debug + Default + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + Sum + Debug + Default + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
}

#[inline]
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, dims: [usize; 3]) -> Self {
        Self { n, c, dims, data: vec![T::zero(); n * c * dims[0] * dims[1] * dims[2]] }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let o = (n * self.c + c) * v;
        &self.data[o..o + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let o = (n * self.c + c) * v;
        &mut self.data[o..o + v]
    }

    /// The `n`-th sample as a batch of one.
    pub fn sample(&self, n: usize) -> Self {
        let len = self.c * self.voxels();
        Self { n: 1, c: self.c, dims: self.dims, data: self.data[n * len..(n + 1) * len].to_vec() }
    }
}

/// `acc[x] += w0 * row[x-1] + w1 * row[x] + w2 * row[x+1]`, zero outside.
#[inline]
fn row_taps<T: Real>(acc: &mut [T], row: &[T], w: &[T]) {
    let n = acc.len();
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    if n == 1 {
        acc[0] += w1 * row[0];
        return;
    }
    acc[0] += w1 * row[0] + w2 * row[1];
    acc[n - 1] += w0 * row[n - 2] + w1 * row[n - 1];
    let (l, m, rr) = (&row[..n - 2], &row[1..n - 1], &row[2..]);
    for (((a, &a0), &a1), &a2) in acc[1..n - 1].iter_mut().zip(l).zip(m).zip(rr) {
        *a += w0 * a0 + w1 * a1 + w2 * a2;
    }
}

/// Returns `(Σ d[x]·row[x-1], Σ d[x]·row[x], Σ d[x]·row[x+1])`, zero outside.
#[inline]
fn row_dots<T: Real>(d: &[T], row: &[T]) -> [T; 3] {
    let n = d.len();
    let mut s1 = T::zero();
    for (&a, &b) in d.iter().zip(row) {
        s1 += a * b;
    }
    let (mut s0, mut s2) = (T::zero(), T::zero());
    for (&a, &b) in d[1..].iter().zip(&row[..n - 1]) {
        s0 += a * b;
    }
    for (&a, &b) in d[..n - 1].iter().zip(&row[1..]) {
        s2 += a * b;
    }
    [s0, s1, s2]
}

/// Same-padded 3×3×3 convolution without bias. `w` is `[cout][cin][kz][ky][kx]`.
pub fn conv3<T: Real>(input: &Tensor<T>, w: &[T], cout: usize) -> Tensor<T> {
    let [nx, ny, nz] = input.dims;
    let cin = input.c;
    assert_eq!(w.len(), cout * cin * 27);
    let mut out = Tensor::zeros(input.n, cout, input.dims);
    let mut acc = vec![T::zero(); cout * nx];
    let plane = nx * ny;
    for n in 0..input.n {
        for z in 0..nz {
            for y in 0..ny {
                acc.iter_mut().for_each(|a| *a = T::zero());
                for ci in 0..cin {
                    let ch = input.channel(n, ci);
                    for kz in 0..3 {
                        let zz = z as isize + kz as isize - 1;
                        if zz < 0 || zz >= nz as isize {
                            continue;
                        }
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= ny as isize {
                                continue;
                            }
                            let o = zz as usize * plane + yy as usize * nx;
                            let row = &ch[o..o + nx];
                            for co in 0..cout {
                                let wo = ((co * cin + ci) * 9 + kz * 3 + ky) * 3;
                                row_taps(&mut acc[co * nx..(co + 1) * nx], row, &w[wo..wo + 3]);
                            }
                        }
                    }
                }
                for co in 0..cout {
                    let o = z * plane + y * nx;
                    out.channel_mut(n, co)[o..o + nx].copy_from_slice(&acc[co * nx..(co + 1) * nx]);
                }
            }
        }
    }
    out
}

/// Gradient of [`conv3`] with respect to its input: a convolution of
/// `dout` with the spatially flipped, channel-transposed kernel.
pub fn conv3_backward_input<T: Real>(dout: &Tensor<T>, w: &[T], cin: usize) -> Tensor<T> {
    let cout = dout.c;
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..27 {
                wt[(ci * cout + co) * 27 + (26 - k)] = w[(co * cin + ci) * 27 + k];
            }
        }
    }
    conv3(dout, &wt, cin)
}

/// Gradient of [`conv3`] with respect to its weights, accumulated into `dw`.
pub fn conv3_backward_weights<T: Real>(input: &Tensor<T>, dout: &Tensor<T>, dw: &mut [T]) {
    let [nx, ny, nz] = input.dims;
    let (cin, cout) = (input.c, dout.c);
    let plane = nx * ny;
    for n in 0..input.n {
        for z in 0..nz {
            for y in 0..ny {
                let o = z * plane + y * nx;
                for kz in 0..3 {
                    let zz = z as isize + kz as isize - 1;
                    if zz < 0 || zz >= nz as isize {
                        continue;
                    }
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= ny as isize {
                            continue;
                        }
                        let io = zz as usize * plane + yy as usize * nx;
                        for ci in 0..cin {
                            let row = &input.channel(n, ci)[io..io + nx];
                            for co in 0..cout {
                                let d = &dout.channel(n, co)[o..o + nx];
                                let s = if nx == 1 { [T::zero(), d[0] * row[0], T::zero()] } else { row_dots(d, row) };
                                let wo = ((co * cin + ci) * 9 + kz * 3 + ky) * 3;
                                for k in 0..3 {
                                    dw[wo + k] += s[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel statistics kept for the backward pass of batch
/// normalization.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalization with batch statistics (biased variance) followed by
/// the affine map.
pub fn bn_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> (Tensor<T>, BnCache<T>) {
    let m = T::from_usize(x.n * x.voxels()).expect("count");
    let mut xhat = x.clone();
    let mut out = x.clone();
    let (mut means, mut vars, mut invs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..x.c {
        let mut sum = T::zero();
        for n in 0..x.n {
            sum += x.channel(n, c).iter().copied().sum::<T>();
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for n in 0..x.n {
            sq += x.channel(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / m;
        let inv = T::one() / (var + eps).sqrt();
        for n in 0..x.n {
            let src = x.channel(n, c);
            let xh = xhat.channel_mut(n, c);
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - mean) * inv;
            }
            let xh = xhat.channel(n, c);
            let dst = out.channel_mut(n, c);
            for (o, &h) in dst.iter_mut().zip(xh) {
                *o = gamma[c] * h + beta[c];
            }
        }
        means.push(mean);
        vars.push(var);
        invs.push(inv);
    }
    (out, BnCache { xhat, inv_std: invs, mean: means, var: vars })
}

/// Batch normalization with frozen statistics.
pub fn bn_eval<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: T) -> Tensor<T> {
    let mut out = x.clone();
    for c in 0..x.c {
        let inv = T::one() / (var[c] + eps).sqrt();
        let (a, b) = (gamma[c] * inv, beta[c] - gamma[c] * inv * mean[c]);
        for n in 0..x.n {
            for v in out.channel_mut(n, c) {
                *v = a * *v + b;
            }
        }
    }
    out
}

/// Returns `dx` and accumulates `dgamma`, `dbeta`.
pub fn bn_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let m = T::from_usize(dy.n * dy.voxels()).expect("count");
    let mut dx = dy.clone();
    for c in 0..dy.c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for n in 0..dy.n {
            for (&d, &h) in dy.channel(n, c).iter().zip(cache.xhat.channel(n, c)) {
                sum_dy += d;
                sum_dy_xhat += d * h;
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let k = gamma[c] * cache.inv_std[c] / m;
        for n in 0..dy.n {
            let xh = cache.xhat.channel(n, c);
            let d = dx.channel_mut(n, c);
            for (v, &h) in d.iter_mut().zip(xh) {
                *v = k * (m * *v - sum_dy - h * sum_dy_xhat);
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` where the ReLU output `y` was not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut Tensor<T>, y: &Tensor<T>) {
    for (g, &v) in grad.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2×2 max-pool with stride 2; returns the output and, per output voxel,
/// the input index of the maximum (first one on ties).
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [nx, ny, nz] = x.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(x.n, x.c, od);
    let mut arg = vec![0u32; out.data.len()];
    let ov = od[0] * od[1] * od[2];
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(n, c);
            let base = (n * x.c + c) * ov;
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for xx in 0..od[0] {
                        let mut best = T::neg_infinity();
                        let mut bi = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = (2 * xx + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                    if src[i] > best {
                                        best = src[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        let o = xx + od[0] * (y + od[1] * z);
                        out.data[base + o] = best;
                        arg[base + o] = bi as u32;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(dout: &Tensor<T>, arg: &[u32], in_dims: [usize; 3]) -> Tensor<T> {
    let mut dx = Tensor::zeros(dout.n, dout.c, in_dims);
    let ov = dout.voxels();
    for n in 0..dout.n {
        for c in 0..dout.c {
            let base = (n * dout.c + c) * ov;
            let d = dx.channel_mut(n, c);
            for o in 0..ov {
                d[arg[base + o] as usize] += dout.data[base + o];
            }
        }
    }
    dx
}

/// Line-wise ×2 linear upsampling along one axis with half-pixel alignment:
/// output `2i` mixes `0.75·in[i] + 0.25·in[i-1]`, output `2i+1` mixes
/// `0.75·in[i] + 0.25·in[i+1]`, clamped at the ends.
fn upsample_axis<T: Real>(src: &[T], dims: [usize; 3], axis: usize, lines: usize) -> (Vec<T>, [usize; 3]) {
    let mut od = dims;
    od[axis] *= 2;
    let (a, b) = (r::<T>(0.75), r::<T>(0.25));
    let len = dims[axis];
    let in_stride = [1, dims[0], dims[0] * dims[1]][axis];
    let out_stride = [1, od[0], od[0] * od[1]][axis];
    let vin = dims[0] * dims[1] * dims[2];
    let vout = 2 * vin;
    let mut out = vec![T::zero(); lines * vout];
    for l in 0..lines {
        let s = &src[l * vin..(l + 1) * vin];
        let o = &mut out[l * vout..(l + 1) * vout];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    if p[axis] != 0 {
                        continue;
                    }
                    let ib = x + dims[0] * (y + dims[1] * z);
                    let mut q = p;
                    q[axis] = 0;
                    let ob = q[0] + od[0] * (q[1] + od[1] * q[2]);
                    for i in 0..len {
                        let c = s[ib + i * in_stride];
                        let lo = s[ib + i.saturating_sub(1) * in_stride];
                        let hi = s[ib + (i + 1).min(len - 1) * in_stride];
                        o[ob + 2 * i * out_stride] = a * c + b * lo;
                        o[ob + (2 * i + 1) * out_stride] = a * c + b * hi;
                    }
                }
            }
        }
    }
    (out, od)
}

/// Adjoint of [`upsample_axis`].
fn upsample_axis_adjoint<T: Real>(g: &[T], in_dims: [usize; 3], axis: usize, lines: usize) -> Vec<T> {
    let mut od = in_dims;
    od[axis] *= 2;
    let (a, b) = (r::<T>(0.75), r::<T>(0.25));
    let len = in_dims[axis];
    let in_stride = [1, in_dims[0], in_dims[0] * in_dims[1]][axis];
    let out_stride = [1, od[0], od[0] * od[1]][axis];
    let vin = in_dims[0] * in_dims[1] * in_dims[2];
    let vout = 2 * vin;
    let mut out = vec![T::zero(); lines * vin];
    for l in 0..lines {
        let s = &g[l * vout..(l + 1) * vout];
        let o = &mut out[l * vin..(l + 1) * vin];
        for z in 0..in_dims[2] {
            for y in 0..in_dims[1] {
                for x in 0..in_dims[0] {
                    let p = [x, y, z];
                    if p[axis] != 0 {
                        continue;
                    }
                    let ib = x + in_dims[0] * (y + in_dims[1] * z);
                    let ob = p[0] + od[0] * (p[1] + od[1] * p[2]);
                    for i in 0..len {
                        let ge = s[ob + 2 * i * out_stride];
                        let go = s[ob + (2 * i + 1) * out_stride];
                        o[ib + i * in_stride] += a * (ge + go);
                        o[ib + i.saturating_sub(1) * in_stride] += b * ge;
                        o[ib + (i + 1).min(len - 1) * in_stride] += b * go;
                    }
                }
            }
        }
    }
    out
}

/// Parameter-free trilinear ×2 upsampling of every channel.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let lines = x.n * x.c;
    let (d, dims) = upsample_axis(&x.data, x.dims, 0, lines);
    let (d, dims) = upsample_axis(&d, dims, 1, lines);
    let (d, dims) = upsample_axis(&d, dims, 2, lines);
    Tensor { n: x.n, c: x.c, dims, data: d }
}

/// Adjoint of [`upsample2`]; `g` has twice the spatial size of the result.
pub fn upsample2_adjoint<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let lines = g.n * g.c;
    let d0 = [g.dims[0] / 2, g.dims[1] / 2, g.dims[2] / 2];
    let d = upsample_axis_adjoint(&g.data, [2 * d0[0], 2 * d0[1], d0[2]], 2, lines);
    let d = upsample_axis_adjoint(&d, [2 * d0[0], d0[1], d0[2]], 1, lines);
    let d = upsample_axis_adjoint(&d, d0, 0, lines);
    Tensor { n: g.n, c: g.c, dims: d0, data: d }
}

/// Applies [`upsample2`] `times` times.
pub fn upsample_pow<T: Real>(x: &Tensor<T>, times: usize) -> Tensor<T> {
    let mut cur = x.clone();
    for _ in 0..times {
        cur = upsample2(&cur);
    }
    cur
}

pub fn upsample_pow_adjoint<T: Real>(g: &Tensor<T>, times: usize) -> Tensor<T> {
    let mut cur = g.clone();
    for _ in 0..times {
        cur = upsample2_adjoint(&cur);
    }
    cur
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, dims: [usize; 3]) -> Tensor<f64> {
        let mut t = Tensor::zeros(n, c, dims);
        for v in &mut t.data {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 2, 2, [5, 4, 3]);
        let w: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv3(&x, &w, 3);
        let [nx, ny, nz] = x.dims;
        for n in 0..2 {
            for co in 0..3 {
                for z in 0..nz {
                    for yy in 0..ny {
                        for xx in 0..nx {
                            let mut s = 0.0;
                            for ci in 0..2 {
                                for kz in 0..3 {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let (a, b, c) = (xx as isize + kx - 1, yy as isize + ky - 1, z as isize + kz - 1);
                                            if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                                                continue;
                                            }
                                            let i = a as usize + nx * (b as usize + ny * c as usize);
                                            s += w[((co * 2 + ci) * 9 + (kz * 3 + ky) as usize) * 3 + kx as usize] * x.channel(n, ci)[i];
                                        }
                                    }
                                }
                            }
                            let got = y.channel(n, co)[xx + nx * (yy + ny * z)];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 2, 3, [6, 5, 4]);
        let w: Vec<f64> = (0..2 * 3 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = rand_tensor(&mut rng, 2, 2, [6, 5, 4]);
        let y = conv3(&x, &w, 2);
        // <conv(x), g> == <x, conv^T(g)>
        let dx = conv3_backward_input(&g, &w, 3);
        assert!((dot(&y.data, &g.data) - dot(&x.data, &dx.data)).abs() < 1e-9);
        // <conv(x), g> is linear in w with gradient dw
        let mut dw = vec![0.0; w.len()];
        conv3_backward_weights(&x, &g, &mut dw);
        assert!((dot(&y.data, &g.data) - dot(&w, &dw)).abs() < 1e-9);
    }

    #[test]
    fn upsample_adjoint_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 2, 1, [3, 2, 4]);
        let g = rand_tensor(&mut rng, 2, 1, [6, 4, 8]);
        let y = upsample2(&x);
        assert_eq!(y.dims, [6, 4, 8]);
        let xt = upsample2_adjoint(&g);
        assert!((dot(&y.data, &g.data) - dot(&x.data, &xt.data)).abs() < 1e-12);
        let mut c = Tensor::zeros(1, 1, [2, 3, 1]);
        c.data.iter_mut().for_each(|v| *v = 2.5);
        assert!(upsample2(&c).data.iter().all(|&v| (v - 2.5).abs() < 1e-15));
        // 1-D profile: [0, 4] -> [0, 1, 3, 4]
        let mut l = Tensor::zeros(1, 1, [2, 1, 1]);
        l.data = vec![0.0, 4.0];
        let u = upsample2(&l);
        assert_eq!(&u.data[..4], &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 2, 2, [3, 3, 2]);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.2];
        let g = rand_tensor(&mut rng, 2, 2, [3, 3, 2]);
        let f = |x: &Tensor<f64>| dot(&bn_train(x, &gamma, &beta, 1e-5).0.data, &g.data);
        let (_, cache) = bn_train(&x, &gamma, &beta, 1e-5);
        let (mut dg, mut db) = (vec![0.0; 2], vec![0.0; 2]);
        let dx = bn_backward(&g, &cache, &gamma, &mut dg, &mut db);
        for i in [0, 5, 17, 30] {
            let mut p = x.clone();
            p.data[i] += 1e-6;
            let mut m = x.clone();
            m.data[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-6, "{fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 1, 2, [4, 4, 2]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.dims, [2, 2, 1]);
        let mut g = Tensor::zeros(1, 2, [2, 2, 1]);
        g.data.iter_mut().for_each(|v| *v = 1.0);
        let dx = maxpool2_backward(&g, &arg, x.dims);
        assert_eq!(dx.data.iter().filter(|&&v| v == 1.0).count(), 8);
        for (i, &v) in y.data.iter().enumerate() {
            let c = i / 4;
            assert_eq!(v, x.channel(0, c)[arg[i] as usize]);
        }
    }
}
