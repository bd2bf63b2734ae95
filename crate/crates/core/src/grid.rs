//! Dense 3D grids with x-fastest storage.
//!
//! Index `(x, y, z)` lives at `x + nx * (y + ny * z)`, the same order used
//! by the on-disk raw format.

use serde::{Deserialize, Serialize};

/// Out-of-extent behaviour for interpolated reads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Padding {
    /// Reads outside the grid return this value.
    Constant(f64),
    /// Reads outside the grid are clamped to the nearest edge voxel.
    Edge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Wraps `data`; returns `None` when the length does not match `dims`.
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Option<Self> {
        (data.len() == dims[0] * dims[1] * dims[2]).then_some(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Grid3::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let r = i / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Signed lookup; `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize, z: isize) -> Option<T> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        (x < self.dims[0] && y < self.dims[1] && z < self.dims[2]).then(|| self.get(x, y, z))
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

impl<T: Copy + Into<f64>> Grid3<T> {
    /// Trilinear interpolation at continuous voxel coordinates.
    pub fn sample_linear(&self, p: [f64; 3], pad: Padding) -> f64 {
        self.sample_linear_grad(p, pad).0
    }

    /// Trilinear interpolation plus its gradient with respect to `p`
    /// (per voxel unit).
    pub fn sample_linear_grad(&self, p: [f64; 3], pad: Padding) -> (f64, [f64; 3]) {
        let mut base = [0isize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.dims[a] as f64;
            let mut c = p[a];
            if let Padding::Edge = pad {
                c = c.clamp(0.0, n - 1.0);
            } else if c < -1.0 || c > n {
                if let Padding::Constant(v) = pad {
                    return (v, [0.0; 3]);
                }
            }
            let f = c.floor();
            base[a] = f as isize;
            frac[a] = c - f;
        }
        let read = |x: isize, y: isize, z: isize| -> f64 {
            match self.get_signed(x, y, z) {
                Some(v) => v.into(),
                None => match pad {
                    Padding::Constant(v) => v,
                    Padding::Edge => {
                        let cx = x.clamp(0, self.dims[0] as isize - 1) as usize;
                        let cy = y.clamp(0, self.dims[1] as isize - 1) as usize;
                        let cz = z.clamp(0, self.dims[2] as isize - 1) as usize;
                        self.get(cx, cy, cz).into()
                    }
                },
            }
        };
        let [bx, by, bz] = base;
        let [fx, fy, fz] = frac;
        let mut c = [[[0f64; 2]; 2]; 2];
        for (dz, cz) in c.iter_mut().enumerate() {
            for (dy, cy) in cz.iter_mut().enumerate() {
                for (dx, v) in cy.iter_mut().enumerate() {
                    *v = read(bx + dx as isize, by + dy as isize, bz + dz as isize);
                }
            }
        }
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        // along x
        let c00 = lerp(c[0][0][0], c[0][0][1], fx);
        let c10 = lerp(c[0][1][0], c[0][1][1], fx);
        let c01 = lerp(c[1][0][0], c[1][0][1], fx);
        let c11 = lerp(c[1][1][0], c[1][1][1], fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let value = lerp(c0, c1, fz);

        let dz = c1 - c0;
        let dy = lerp(c10 - c00, c11 - c01, fz);
        let dx0 = lerp(c[0][0][1] - c[0][0][0], c[0][1][1] - c[0][1][0], fy);
        let dx1 = lerp(c[1][0][1] - c[1][0][0], c[1][1][1] - c[1][1][0], fy);
        let mut grad = [lerp(dx0, dx1, fz), dy, dz];
        if let Padding::Edge = pad {
            for a in 0..3 {
                let n = self.dims[a] as f64;
                if p[a] < 0.0 || p[a] > n - 1.0 {
                    grad[a] = 0.0;
                }
            }
        }
        (value, grad)
    }

    /// Nearest-neighbour read at continuous voxel coordinates.
    pub fn sample_nearest(&self, p: [f64; 3], pad: Padding) -> f64 {
        let r = |c: f64, n: usize| -> Option<isize> {
            let i = c.round() as isize;
            match pad {
                Padding::Edge => Some(i.clamp(0, n as isize - 1)),
                Padding::Constant(_) => (i >= 0 && (i as usize) < n).then_some(i),
            }
        };
        match (r(p[0], self.dims[0]), r(p[1], self.dims[1]), r(p[2], self.dims[2])) {
            (Some(x), Some(y), Some(z)) => self.get(x as usize, y as usize, z as usize).into(),
            _ => match pad {
                Padding::Constant(v) => v,
                Padding::Edge => unreachable!(),
            },
        }
    }
}
