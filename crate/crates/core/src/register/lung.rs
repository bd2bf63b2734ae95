//! Threshold lung segmentation and mass-centre translation initialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::volio::{Mask, Volume};

/// HU below which a voxel counts as air.
pub const AIR_THRESHOLD_HU: f32 = -400.0;

const NEIGHBOURS: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// 6-connected components of the foreground; returns a label grid (0 =
/// background) and the size of each component (index `label - 1`) plus
/// whether it touches the grid border.
fn components(fg: &Grid3<u8>) -> (Grid3<u32>, Vec<(usize, bool)>) {
    let dims = fg.dims();
    let mut labels = Grid3::filled(dims, 0u32);
    let mut info = Vec::new();
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if fg.data()[start] == 0 || labels.data()[start] != 0 {
            continue;
        }
        let label = info.len() as u32 + 1;
        let mut size = 0;
        let mut border = false;
        labels.data_mut()[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let [x, y, z] = fg.coords(i);
            if x == 0 || y == 0 || z == 0 || x + 1 == dims[0] || y + 1 == dims[1] || z + 1 == dims[2] {
                border = true;
            }
            for n in NEIGHBOURS {
                let (nx, ny, nz) = (x as isize + n[0], y as isize + n[1], z as isize + n[2]);
                if fg.get_signed(nx, ny, nz) == Some(1) {
                    let j = fg.index(nx as usize, ny as usize, nz as usize);
                    if labels.data()[j] == 0 {
                        labels.data_mut()[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        info.push((size, border));
    }
    (labels, info)
}

fn dilate(m: &Grid3<u8>) -> Grid3<u8> {
    let mut out = m.clone();
    for i in 0..m.len() {
        if m.data()[i] == 0 {
            continue;
        }
        let [x, y, z] = m.coords(i);
        for n in NEIGHBOURS {
            let (nx, ny, nz) = (x as isize + n[0], y as isize + n[1], z as isize + n[2]);
            if m.get_signed(nx, ny, nz).is_some() {
                out.set(nx as usize, ny as usize, nz as usize, 1);
            }
        }
    }
    out
}

fn erode(m: &Grid3<u8>) -> Grid3<u8> {
    let mut out = m.clone();
    for i in 0..m.len() {
        if m.data()[i] == 0 {
            continue;
        }
        let [x, y, z] = m.coords(i);
        let keep = NEIGHBOURS.iter().all(|n| {
            // outside the grid counts as foreground so closing does not eat
            // the border
            m.get_signed(x as isize + n[0], y as isize + n[1], z as isize + n[2])
                .map_or(true, |v| v == 1)
        });
        if !keep {
            out.data_mut()[i] = 0;
        }
    }
    out
}

/// Surrogate lung segmentation: air-valued voxels (HU < -400), keeping the
/// two largest 6-connected components that do not touch the volume border,
/// followed by a radius-1 morphological closing.
pub fn lung_mask(ct: &Volume) -> Result<Mask> {
    let air = ct.data.map(|v| (v < AIR_THRESHOLD_HU) as u8);
    let (labels, info) = components(&air);
    let mut inner: Vec<(usize, u32)> = info
        .iter()
        .enumerate()
        .filter(|(_, (_, border))| !border)
        .map(|(i, (size, _))| (*size, i as u32 + 1))
        .collect();
    if inner.is_empty() {
        return Err(Error::NoLungFound);
    }
    // largest first, ties broken by label for determinism
    inner.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep: Vec<u32> = inner.iter().take(2).map(|(_, l)| *l).collect();
    let selected = labels.map(|l| keep.contains(&l) as u8);
    let closed = erode(&dilate(&selected));
    Mask::new(closed, ct.spacing, ct.origin)
}

/// Centroid of the foreground in physical coordinates (mm).
pub fn mass_center(mask: &Mask) -> Result<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &v) in mask.data.data().iter().enumerate() {
        if v != 0 {
            let c = mask.data.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(std::array::from_fn(|a| mask.origin[a] + sum[a] / n as f64 * mask.spacing[a]))
}

/// Centroid weighted by `value - min(value)`; fallback when no lungs are
/// found.
fn intensity_center(vol: &Volume) -> [f64; 3] {
    let min = vol.data.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let mut sum = [0.0f64; 3];
    let mut wsum = 0.0;
    for (i, &v) in vol.data.data().iter().enumerate() {
        let w = v as f64 - min;
        if w > 0.0 {
            let c = vol.data.coords(i);
            for a in 0..3 {
                sum[a] += w * c[a] as f64;
            }
            wsum += w;
        }
    }
    if wsum == 0.0 {
        let d = vol.dims();
        return std::array::from_fn(|a| vol.origin[a] + (d[a] as f64 - 1.0) / 2.0 * vol.spacing[a]);
    }
    std::array::from_fn(|a| vol.origin[a] + sum[a] / wsum * vol.spacing[a])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidInit {
    /// `center(fixed) - center(moving)` in mm.
    pub translation: [f64; 3],
    /// Set when either CT had no lung component and intensity centroids were
    /// used instead.
    pub fallback: bool,
}

impl RigidInit {
    /// The constant fixed-to-moving displacement this initialization
    /// implies: `-translation`.
    pub fn displacement(&self) -> [f64; 3] {
        self.translation.map(|t| -t)
    }
}

pub fn rigid_init(fixed_ct: &Volume, moving_ct: &Volume) -> Result<RigidInit> {
    let centers = lung_mask(fixed_ct)
        .and_then(|m| mass_center(&m))
        .and_then(|f| Ok((f, mass_center(&lung_mask(moving_ct)?)?)));
    match centers {
        Ok((f, m)) => Ok(RigidInit {
            translation: std::array::from_fn(|a| f[a] - m[a]),
            fallback: false,
        }),
        Err(Error::NoLungFound) | Err(Error::EmptyMask) => {
            let f = intensity_center(fixed_ct);
            let m = intensity_center(moving_ct);
            log::warn!("no lungs found; falling back to intensity centroids");
            Ok(RigidInit {
                translation: std::array::from_fn(|a| f[a] - m[a]),
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}
