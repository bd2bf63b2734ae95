//! Uniform cubic B-spline control grids.

use crate::error::{Error, Result};

/// Cubic B-spline basis weights for nodes `i-1 ..= i+2` at fractional
/// offset `t` in `[0, 1)` past node `i`.
#[inline]
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Geometry of the voxel grid a control grid is laid over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) * self.spacing[a])
    }

    pub fn point(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-axis lookup: for each voxel along one axis, the first supporting
/// control node and the four basis weights.
#[derive(Debug, Clone)]
pub struct AxisBasis {
    pub base: Vec<usize>,
    pub weights: Vec<[f64; 4]>,
}

/// Cubic B-spline displacement model. Node `k` sits at
/// `origin + k * spacing`; the grid starts one node before the covered
/// volume and extends past its far edge far enough that every voxel has
/// full 4x4x4 support.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    /// Displacement in mm at each node, x-fastest.
    pub coeffs: Vec<[f64; 3]>,
}

impl ControlGrid {
    /// Zero grid covering `geom` with node spacing `spacing` (mm).
    pub fn covering(geom: &GridGeometry, spacing: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(spacing[a] >= 2.0 * geom.spacing[a] - 1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "control spacing {:?} must be at least twice the voxel spacing {:?}",
                    spacing, geom.spacing
                )));
            }
        }
        let extent = geom.extent();
        let dims: [usize; 3] =
            std::array::from_fn(|a| (extent[a] / spacing[a] + 1e-9).floor() as usize + 4);
        let origin = std::array::from_fn(|a| geom.origin[a] - spacing[a]);
        Ok(Self {
            spacing,
            origin,
            dims,
            coeffs: vec![[0.0; 3]; dims[0] * dims[1] * dims[2]],
        })
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn num_nodes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    fn locate(&self, p: f64, axis: usize) -> Option<(usize, [f64; 4])> {
        let u = (p - self.origin[axis]) / self.spacing[axis];
        let i = u.floor();
        let t = u - i;
        let base = i as isize - 1;
        if base < 0 || base as usize + 3 >= self.dims[axis] {
            return None;
        }
        Some((base as usize, cubic_weights(t)))
    }

    /// Displacement at a physical point by tensor-product interpolation of
    /// the 4x4x4 neighbouring coefficients.
    pub fn displacement(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let (bx, wx) = self.locate(p[0], 0).ok_or(Error::OutOfExtent(p))?;
        let (by, wy) = self.locate(p[1], 1).ok_or(Error::OutOfExtent(p))?;
        let (bz, wz) = self.locate(p[2], 2).ok_or(Error::OutOfExtent(p))?;
        let mut d = [0.0; 3];
        for (c, wzc) in wz.iter().enumerate() {
            for (b, wyb) in wy.iter().enumerate() {
                for (a, wxa) in wx.iter().enumerate() {
                    let w = wxa * wyb * wzc;
                    let coef = &self.coeffs[self.node_index(bx + a, by + b, bz + c)];
                    for k in 0..3 {
                        d[k] += w * coef[k];
                    }
                }
            }
        }
        Ok(d)
    }

    /// Basis lookup tables for every voxel of `geom` along each axis.
    pub fn axis_bases(&self, geom: &GridGeometry) -> Result<[AxisBasis; 3]> {
        let mut out: Vec<AxisBasis> = Vec::with_capacity(3);
        for a in 0..3 {
            let mut base = Vec::with_capacity(geom.dims[a]);
            let mut weights = Vec::with_capacity(geom.dims[a]);
            for v in 0..geom.dims[a] {
                let p = geom.origin[a] + v as f64 * geom.spacing[a];
                let (b, w) = self.locate(p, a).ok_or_else(|| {
                    let mut q = geom.origin;
                    q[a] = p;
                    Error::OutOfExtent(q)
                })?;
                base.push(b);
                weights.push(w);
            }
            out.push(AxisBasis { base, weights });
        }
        let [x, y, z]: [AxisBasis; 3] = out.try_into().expect("three axes");
        Ok([x, y, z])
    }

    /// Dense displacement on every voxel of `geom`, x-fastest.
    pub fn dense(&self, bases: &[AxisBasis; 3]) -> Vec<[f64; 3]> {
        let vox = [bases[0].base.len(), bases[1].base.len(), bases[2].base.len()];
        let mut dims = self.dims;
        let mut buf = self.coeffs.clone();
        for axis in 0..3 {
            let (next, nd) = contract_axis(&buf, dims, axis, &bases[axis], vox[axis]);
            buf = next;
            dims = nd;
        }
        buf
    }

    /// Adjoint of [`ControlGrid::dense`]: maps a per-voxel gradient to a
    /// per-node gradient.
    pub fn dense_adjoint(&self, bases: &[AxisBasis; 3], grad: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let vox = [bases[0].base.len(), bases[1].base.len(), bases[2].base.len()];
        // shapes after each forward pass
        let d1 = [vox[0], self.dims[1], self.dims[2]];
        let d2 = [vox[0], vox[1], self.dims[2]];
        let g2 = spread_axis(grad, vox, 2, &bases[2], d2);
        let g1 = spread_axis(&g2, d2, 1, &bases[1], d1);
        spread_axis(&g1, d1, 0, &bases[0], self.dims)
    }

    /// Bending energy: mean over interior nodes of the summed squared second
    /// derivatives (with doubled mixed terms) of every displacement
    /// component, evaluated at the nodes.
    pub fn bending_energy(&self) -> f64 {
        self.bending_energy_grad().0
    }

    pub fn bending_energy_grad(&self) -> (f64, Vec<[f64; 3]>) {
        let mut grad = vec![[0.0; 3]; self.coeffs.len()];
        if self.dims.iter().any(|&d| d < 3) {
            return (0.0, grad);
        }
        let h = self.spacing;
        let value = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
        let first = |a: usize| [-0.5 / h[a], 0.0, 0.5 / h[a]];
        let second = |a: usize| {
            let s = 1.0 / (h[a] * h[a]);
            [s, -2.0 * s, s]
        };
        // (stencils per axis, multiplicity)
        let terms: [([[f64; 3]; 3], f64); 6] = [
            ([second(0), value, value], 1.0),
            ([value, second(1), value], 1.0),
            ([value, value, second(2)], 1.0),
            ([first(0), first(1), value], 2.0),
            ([first(0), value, first(2)], 2.0),
            ([value, first(1), first(2)], 2.0),
        ];
        let interior = (self.dims[0] - 2) * (self.dims[1] - 2) * (self.dims[2] - 2);
        let norm = 1.0 / interior as f64;
        let mut energy = 0.0;
        for k in 1..self.dims[2] - 1 {
            for j in 1..self.dims[1] - 1 {
                for i in 1..self.dims[0] - 1 {
                    for (st, mult) in &terms {
                        let mut d = [0.0; 3];
                        for (c, sz) in st[2].iter().enumerate() {
                            for (b, sy) in st[1].iter().enumerate() {
                                for (a, sx) in st[0].iter().enumerate() {
                                    let w = sx * sy * sz;
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let n = self.node_index(i + a - 1, j + b - 1, k + c - 1);
                                    for q in 0..3 {
                                        d[q] += w * self.coeffs[n][q];
                                    }
                                }
                            }
                        }
                        energy += mult * norm * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
                        for (c, sz) in st[2].iter().enumerate() {
                            for (b, sy) in st[1].iter().enumerate() {
                                for (a, sx) in st[0].iter().enumerate() {
                                    let w = sx * sy * sz;
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let n = self.node_index(i + a - 1, j + b - 1, k + c - 1);
                                    for q in 0..3 {
                                        grad[n][q] += 2.0 * mult * norm * w * d[q];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (energy, grad)
    }

    /// Re-expresses this grid at node spacing `spacing` over `geom`.
    ///
    /// Halving the spacing uses exact dyadic subdivision, so the refined grid
    /// reproduces the same displacement everywhere inside the covered
    /// volume. Other ratios sample the current displacement at the new nodes.
    pub fn refine(&self, geom: &GridGeometry, spacing: [f64; 3]) -> Result<Self> {
        let mut fine = Self::covering(geom, spacing)?;
        let halving = (0..3).all(|a| (self.spacing[a] - 2.0 * spacing[a]).abs() < 1e-9);
        let aligned = (0..3).all(|a| (self.origin[a] + self.spacing[a] - (fine.origin[a] + fine.spacing[a])).abs() < 1e-9);
        if halving && aligned {
            let mut buf = self.coeffs.clone();
            let mut dims = self.dims;
            for axis in 0..3 {
                let (next, nd) = subdivide_axis(&buf, dims, axis, fine.dims[axis]);
                buf = next;
                dims = nd;
            }
            fine.coeffs = buf;
        } else {
            for k in 0..fine.dims[2] {
                for j in 0..fine.dims[1] {
                    for i in 0..fine.dims[0] {
                        let p = fine.node_position(i, j, k);
                        let n = fine.node_index(i, j, k);
                        fine.coeffs[n] = self.displacement(p).unwrap_or([0.0; 3]);
                    }
                }
            }
        }
        Ok(fine)
    }
}

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

/// Replaces axis `axis` (node count `dims[axis]`) by `out_len` voxels.
fn contract_axis(
    input: &[[f64; 3]],
    dims: [usize; 3],
    axis: usize,
    basis: &AxisBasis,
    out_len: usize,
) -> (Vec<[f64; 3]>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let si = strides(dims);
    let so = strides(out_dims);
    let mut out = vec![[0.0; 3]; out_dims.iter().product()];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for u in 0..out_dims[o1] {
        for w in 0..out_dims[o2] {
            let bi = u * si[o1] + w * si[o2];
            let bo = u * so[o1] + w * so[o2];
            for v in 0..out_len {
                let b = basis.base[v];
                let wt = &basis.weights[v];
                let mut acc = [0.0; 3];
                for t in 0..4 {
                    let c = &input[bi + (b + t) * si[axis]];
                    for q in 0..3 {
                        acc[q] += wt[t] * c[q];
                    }
                }
                out[bo + v * so[axis]] = acc;
            }
        }
    }
    (out, out_dims)
}

/// Adjoint of [`contract_axis`].
fn spread_axis(
    grad: &[[f64; 3]],
    grad_dims: [usize; 3],
    axis: usize,
    basis: &AxisBasis,
    in_dims: [usize; 3],
) -> Vec<[f64; 3]> {
    let si = strides(in_dims);
    let so = strides(grad_dims);
    let mut out = vec![[0.0; 3]; in_dims.iter().product()];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for u in 0..grad_dims[o1] {
        for w in 0..grad_dims[o2] {
            let bi = u * si[o1] + w * si[o2];
            let bo = u * so[o1] + w * so[o2];
            for v in 0..grad_dims[axis] {
                let b = basis.base[v];
                let wt = &basis.weights[v];
                let g = grad[bo + v * so[axis]];
                for t in 0..4 {
                    let c = &mut out[bi + (b + t) * si[axis]];
                    for q in 0..3 {
                        c[q] += wt[t] * g[q];
                    }
                }
            }
        }
    }
    out
}

/// Cubic B-spline subdivision along one axis. Fine node `j` sits at coarse
/// coordinate `(j + 1) / 2`.
fn subdivide_axis(
    input: &[[f64; 3]],
    dims: [usize; 3],
    axis: usize,
    out_len: usize,
) -> (Vec<[f64; 3]>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let si = strides(dims);
    let so = strides(out_dims);
    let mut out = vec![[0.0; 3]; out_dims.iter().product()];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let n = dims[axis] as isize;
    for u in 0..out_dims[o1] {
        for w in 0..out_dims[o2] {
            let bi = u * si[o1] + w * si[o2];
            let bo = u * so[o1] + w * so[o2];
            let at = |k: isize| -> [f64; 3] {
                if k < 0 || k >= n {
                    [0.0; 3]
                } else {
                    input[bi + k as usize * si[axis]]
                }
            };
            for j in 0..out_len {
                let m = j as isize + 1;
                let k = m / 2;
                let v = if m % 2 == 0 {
                    let (a, b, c) = (at(k - 1), at(k), at(k + 1));
                    std::array::from_fn(|q| (a[q] + 6.0 * b[q] + c[q]) / 8.0)
                } else {
                    let (a, b) = (at(k), at(k + 1));
                    std::array::from_fn(|q| 0.5 * (a[q] + b[q]))
                };
                out[bo + j * so[axis]] = v;
            }
        }
    }
    (out, out_dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> GridGeometry {
        GridGeometry {
            dims: [20, 18, 10],
            spacing: [1.0, 1.0, 2.5],
            origin: [3.0, -2.0, 0.5],
        }
    }

    fn random_grid(g: &GridGeometry, spacing: [f64; 3], seed: u64) -> ControlGrid {
        let mut cg = ControlGrid::covering(g, spacing).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut cg.coeffs {
            *c = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        }
        cg
    }

    #[test]
    fn weights_partition_unity() {
        for i in 0..=100 {
            let w = cubic_weights(i as f64 / 100.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_and_constant_grids() {
        let g = geom();
        let mut cg = ControlGrid::covering(&g, [5.0, 5.0, 5.0]).unwrap();
        assert_eq!(cg.displacement([10.0, 3.0, 7.0]).unwrap(), [0.0; 3]);
        for c in &mut cg.coeffs {
            *c = [1.5, -2.0, 0.25];
        }
        let d = cg.displacement([10.3, 3.7, 7.9]).unwrap();
        for (a, b) in d.iter().zip([1.5, -2.0, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node_centre_weight() {
        let g = geom();
        let mut cg = ControlGrid::covering(&g, [5.0, 5.0, 5.0]).unwrap();
        let n = cg.node_index(3, 2, 2);
        cg.coeffs[n] = [1.0, 0.0, 0.0];
        let d = cg.displacement(cg.node_position(3, 2, 2)).unwrap();
        assert!((d[0] - (2.0f64 / 3.0).powi(3)).abs() < 1e-12);
        assert!((d[0] - 0.2963).abs() < 1e-4);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn out_of_extent() {
        let cg = ControlGrid::covering(&geom(), [5.0; 3]).unwrap();
        assert!(matches!(cg.displacement([-100.0, 0.0, 0.0]), Err(Error::OutOfExtent(_))));
        assert!(ControlGrid::covering(&geom(), [1.5, 5.0, 5.0]).is_err());
    }

    #[test]
    fn dense_matches_pointwise() {
        let g = geom();
        let cg = random_grid(&g, [4.0, 5.0, 6.0], 1);
        let bases = cg.axis_bases(&g).unwrap();
        let dense = cg.dense(&bases);
        let mut i = 0;
        for z in 0..g.dims[2] {
            for y in 0..g.dims[1] {
                for x in 0..g.dims[0] {
                    let p = cg.displacement(g.point(x, y, z)).unwrap();
                    for q in 0..3 {
                        assert!((p[q] - dense[i][q]).abs() < 1e-12);
                    }
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn dense_adjoint_is_transpose() {
        let g = geom();
        let cg = random_grid(&g, [4.0, 5.0, 6.0], 2);
        let bases = cg.axis_bases(&g).unwrap();
        let dense = cg.dense(&bases);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe: Vec<[f64; 3]> = (0..dense.len())
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        // <A c, p> == <c, A^T p>
        let lhs: f64 = dense.iter().zip(&probe).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        let back = cg.dense_adjoint(&bases, &probe);
        let rhs: f64 = cg.coeffs.iter().zip(&back).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn bending_energy_of_zero_and_affine_fields() {
        let g = geom();
        let mut cg = ControlGrid::covering(&g, [5.0; 3]).unwrap();
        assert_eq!(cg.bending_energy(), 0.0);
        // affine displacement has no curvature
        for k in 0..cg.dims[2] {
            for j in 0..cg.dims[1] {
                for i in 0..cg.dims[0] {
                    let p = cg.node_position(i, j, k);
                    let n = cg.node_index(i, j, k);
                    cg.coeffs[n] = [0.1 * p[0] - 0.2 * p[2], 0.05 * p[1], 1.0];
                }
            }
        }
        assert!(cg.bending_energy().abs() < 1e-20);
    }

    #[test]
    fn bending_gradient_matches_differences() {
        let g = geom();
        let mut cg = random_grid(&g, [5.0; 3], 3);
        let (_, grad) = cg.bending_energy_grad();
        let h = 1e-5;
        for &(n, q) in &[(0usize, 0usize), (17, 1), (40, 2), (cg.coeffs.len() / 2, 0)] {
            let orig = cg.coeffs[n][q];
            cg.coeffs[n][q] = orig + h;
            let up = cg.bending_energy();
            cg.coeffs[n][q] = orig - h;
            let down = cg.bending_energy();
            cg.coeffs[n][q] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[n][q]).abs() <= 1e-6 * fd.abs().max(1e-8), "{fd} vs {}", grad[n][q]);
        }
    }

    #[test]
    fn dyadic_refinement_reproduces_field() {
        let g = GridGeometry {
            dims: [40, 36, 20],
            spacing: [1.0, 1.0, 2.5],
            origin: [0.0; 3],
        };
        let coarse = random_grid(&g, [16.0; 3], 4);
        let fine = coarse.refine(&g, [8.0; 3]).unwrap();
        assert_eq!(fine.spacing, [8.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = [
                rng.random_range(0.0..39.0),
                rng.random_range(0.0..35.0),
                rng.random_range(0.0..47.5),
            ];
            let a = coarse.displacement(p).unwrap();
            let b = fine.displacement(p).unwrap();
            for q in 0..3 {
                assert!((a[q] - b[q]).abs() < 1e-9, "{a:?} vs {b:?} at {p:?}");
            }
        }
    }
}
