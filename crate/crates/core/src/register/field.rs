//! Dense displacement fields and warping.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bspline::{ControlGrid, GridGeometry};
use crate::error::{read_json, write_json, Error, Result};
use crate::grid::{Grid3, Padding};
use crate::volio::{Interp, Mask, Volume};

/// Per-voxel displacement (mm) on a fixed grid. A fixed-frame point `p`
/// corresponds to the moving-frame point `p + d(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub geometry: GridGeometry,
    pub disp: Vec<[f64; 3]>,
}

impl DeformationField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            disp: vec![[0.0; 3]; geometry.len()],
            geometry,
        }
    }

    pub fn constant(geometry: GridGeometry, d: [f64; 3]) -> Self {
        Self {
            disp: vec![d; geometry.len()],
            geometry,
        }
    }

    /// Dense field of a control grid plus a constant offset.
    pub fn from_control_grid(grid: &ControlGrid, geometry: GridGeometry, offset: [f64; 3]) -> Result<Self> {
        let bases = grid.axis_bases(&geometry)?;
        let mut disp = grid.dense(&bases);
        for d in &mut disp {
            for q in 0..3 {
                d[q] += offset[q];
            }
        }
        Ok(Self { geometry, disp })
    }

    pub fn of_volume(vol: &Volume) -> GridGeometry {
        GridGeometry {
            dims: vol.dims(),
            spacing: vol.spacing,
            origin: vol.origin,
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.disp.iter().map(|d| norm(*d)).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.disp.iter().all(|d| d.iter().all(|v| v.is_finite()))
    }

    /// Displacement at a physical point, trilinearly interpolated with
    /// edge clamping.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let g = &self.geometry;
        let v: [f64; 3] = std::array::from_fn(|a| ((p[a] - g.origin[a]) / g.spacing[a]).clamp(0.0, g.dims[a] as f64 - 1.0));
        let base: [usize; 3] = std::array::from_fn(|a| (v[a].floor() as usize).min(g.dims[a].saturating_sub(2)));
        let t: [f64; 3] = std::array::from_fn(|a| v[a] - base[a] as f64);
        let mut out = [0.0; 3];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let (x, y, z) = (
                        (base[0] + dx).min(g.dims[0] - 1),
                        (base[1] + dy).min(g.dims[1] - 1),
                        (base[2] + dz).min(g.dims[2] - 1),
                    );
                    let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                        * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                        * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                    let d = self.disp[x + g.dims[0] * (y + g.dims[1] * z)];
                    for q in 0..3 {
                        out[q] += w * d[q];
                    }
                }
            }
        }
        out
    }

    /// Approximate inverse by fixed-point iteration of
    /// `d_inv(y) = -d(y + d_inv(y))`, on the same grid.
    pub fn invert(&self, iterations: usize) -> Self {
        let g = self.geometry;
        let mut inv = self.disp.iter().map(|d| [-d[0], -d[1], -d[2]]).collect::<Vec<_>>();
        for _ in 0..iterations {
            let mut next = inv.clone();
            let mut i = 0;
            for z in 0..g.dims[2] {
                for y in 0..g.dims[1] {
                    for x in 0..g.dims[0] {
                        let p = g.point(x, y, z);
                        let q = [p[0] + inv[i][0], p[1] + inv[i][1], p[2] + inv[i][2]];
                        let d = self.sample(q);
                        next[i] = [-d[0], -d[1], -d[2]];
                        i += 1;
                    }
                }
            }
            inv = next;
        }
        Self { geometry: g, disp: inv }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let paths = FieldPaths::new(path);
        let header = FieldHeader {
            shape: self.geometry.dims,
            spacing: self.geometry.spacing,
            origin: self.geometry.origin,
            dtype: "f32le".into(),
            components: ["x".into(), "y".into(), "z".into()],
        };
        for (q, raw) in paths.components.iter().enumerate() {
            let mut bytes = Vec::with_capacity(self.disp.len() * 4);
            for d in &self.disp {
                bytes.extend_from_slice(&(d[q] as f32).to_le_bytes());
            }
            std::fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
        }
        write_json(&paths.header, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let paths = FieldPaths::new(path);
        if !paths.header.exists() {
            return Err(Error::MissingHeader(paths.header));
        }
        let header: FieldHeader = read_json(&paths.header)?;
        let geometry = GridGeometry {
            dims: header.shape,
            spacing: header.spacing,
            origin: header.origin,
        };
        let n = geometry.len();
        let mut disp = vec![[0.0; 3]; n];
        for (q, raw) in paths.components.iter().enumerate() {
            let bytes = std::fs::read(raw).map_err(|e| Error::io(raw, e))?;
            if bytes.len() != 4 * n {
                return Err(Error::ShapeMismatch(format!(
                    "field component {} holds {} bytes, expected {}",
                    raw.display(),
                    bytes.len(),
                    4 * n
                )));
            }
            for (d, c) in disp.iter_mut().zip(bytes.chunks_exact(4)) {
                d[q] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            }
        }
        Ok(Self { geometry, disp })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    components: [String; 3],
}

struct FieldPaths {
    header: PathBuf,
    components: [PathBuf; 3],
}

impl FieldPaths {
    fn new(path: &Path) -> Self {
        let s = path.to_string_lossy();
        let stem = s.strip_suffix(".field.json").unwrap_or(&s).to_string();
        Self {
            header: PathBuf::from(format!("{stem}.field.json")),
            components: ["x", "y", "z"].map(|c| PathBuf::from(format!("{stem}.{c}.raw"))),
        }
    }
}

#[inline]
pub(crate) fn norm(d: [f64; 3]) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Resamples `vol` onto the field's grid: `out(p) = vol(p + d(p))`.
/// Reads outside `vol` return `pad`.
pub fn warp_volume(vol: &Volume, field: &DeformationField, interp: Interp, pad: f64) -> Result<Volume> {
    let g = field.geometry;
    if field.disp.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "field holds {} vectors for grid {:?}",
            field.disp.len(),
            g.dims
        )));
    }
    let mut i = 0;
    let data = Grid3::from_fn(g.dims, |x, y, z| {
        let p = g.point(x, y, z);
        let d = field.disp[i];
        i += 1;
        let v: [f64; 3] = std::array::from_fn(|a| (p[a] + d[a] - vol.origin[a]) / vol.spacing[a]);
        let out = match interp {
            Interp::Trilinear => vol.data.sample_linear(v, Padding::Constant(pad)),
            Interp::Nearest => vol.data.sample_nearest(v, Padding::Constant(pad)),
        };
        out as f32
    });
    Volume::new(data, g.spacing, g.origin, vol.modality)
}

/// Nearest-neighbour warp of a mask.
pub fn warp_mask(mask: &Mask, field: &DeformationField) -> Result<Mask> {
    let v = warp_volume(&mask.to_volume(), field, Interp::Nearest, 0.0)?;
    Mask::new(v.data.map(|x| (x > 0.5) as u8), v.spacing, v.origin)
}
