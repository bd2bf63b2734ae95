//! Volume and mask data model, raw+header file I/O, resampling, patch
//! extraction, training-patch sampling and in-plane rotation augmentation.
//!
//! A volume on disk is a pair of files: `<name>.raw` holding little-endian
//! `f32` voxels in x-fastest order, and `<name>.vol.json` describing shape,
//! spacing, origin and modality. Masks use the same format with values
//! 0.0/1.0.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::grid::{Grid3, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "PROB")]
    Prob,
    #[serde(rename = "OTHER")]
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Grid3<f32>,
    /// Voxel size in mm along x, y, z.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0, 0, 0) in mm.
    pub origin: [f64; 3],
    pub modality: Modality,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

impl Volume {
    pub fn new(
        data: Grid3<f32>,
        spacing: [f64; 3],
        origin: [f64; 3],
        modality: Modality,
    ) -> Result<Self> {
        check_spacing(spacing)?;
        if data.dims().iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "volume shape {:?} has an empty axis",
                data.dims()
            )));
        }
        Ok(Self {
            data,
            spacing,
            origin,
            modality,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    /// A volume of the same geometry holding `data`.
    pub fn with_data(&self, data: Grid3<f32>, modality: Modality) -> Self {
        assert_eq!(data.dims(), self.dims());
        Self {
            data,
            spacing: self.spacing,
            origin: self.origin,
            modality,
        }
    }

    pub fn same_geometry(&self, spacing: [f64; 3], dims: [usize; 3]) -> bool {
        self.dims() == dims && self.spacing == spacing
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: Grid3<u8>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Mask {
    pub fn new(data: Grid3<u8>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        Ok(Self {
            data: data.map(|v| (v != 0) as u8),
            spacing,
            origin,
        })
    }

    /// Empty mask on the geometry of `vol`.
    pub fn empty_like(vol: &Volume) -> Self {
        Self {
            data: Grid3::filled(vol.dims(), 0),
            spacing: vol.spacing,
            origin: vol.origin,
        }
    }

    /// Binarizes a volume: voxels strictly above `threshold` are foreground.
    pub fn from_threshold(vol: &Volume, threshold: f32) -> Self {
        Self {
            data: vol.data.map(|v| (v > threshold) as u8),
            spacing: vol.spacing,
            origin: vol.origin,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    pub fn count(&self) -> usize {
        self.data.data().iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.data().iter().all(|&v| v == 0)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            data: self.data.map(f32::from),
            spacing: self.spacing,
            origin: self.origin,
            modality: Modality::Other,
        }
    }

    /// Requires shape and spacing to match `vol` exactly.
    pub fn check_aligned(&self, vol: &Volume) -> Result<()> {
        if vol.dims() != self.dims() || vol.spacing != self.spacing {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?}@{:?} vs volume {:?}@{:?}",
                self.dims(),
                self.spacing,
                vol.dims(),
                vol.spacing
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct VolumeHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    modality: Modality,
    dtype: String,
}

const DTYPE: &str = "f32le";

/// Returns `(raw, header)` paths for a volume path given as `<name>`,
/// `<name>.raw` or `<name>.vol.json`.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".vol.json")
        .or_else(|| s.strip_suffix(".raw"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.raw")),
        PathBuf::from(format!("{stem}.vol.json")),
    )
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (raw_path, header_path) = volume_paths(path);
    if !header_path.exists() {
        return Err(Error::MissingHeader(header_path));
    }
    let header: VolumeHeader = read_json(&header_path)?;
    if header.dtype != DTYPE {
        return Err(Error::ShapeMismatch(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.shape.iter().product::<usize>();
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "header shape {:?} needs {} values, blob holds {} bytes",
            header.shape,
            expected,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData(raw_path));
    }
    let data = Grid3::from_vec(header.shape, values).expect("length checked above");
    Volume::new(data, header.spacing, header.origin, header.modality)
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let (raw_path, header_path) = volume_paths(path);
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for v in vol.data.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    let header = VolumeHeader {
        shape: vol.dims(),
        spacing: vol.spacing,
        origin: vol.origin,
        modality: vol.modality,
        dtype: DTYPE.to_string(),
    };
    write_json(&header_path, &header)
}

/// Loads a mask; any non-zero voxel is foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let vol = load_volume(path)?;
    Mask::new(vol.data.map(|v| (v > 0.5) as u8), vol.spacing, vol.origin)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    save_volume(&mask.to_volume(), path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Output shape of a resampling: `ceil(shape * spacing / target)` per axis.
pub fn resampled_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| {
        let n = (shape[a] as f64 * spacing[a] / target[a] - 1e-9).ceil();
        (n as usize).max(1)
    })
}

/// Resamples onto a grid of spacing `target` sharing the same origin.
pub fn resample(vol: &Volume, target: [f64; 3], interp: Interp) -> Result<Volume> {
    check_spacing(target)?;
    let dims = resampled_shape(vol.dims(), vol.spacing, target);
    let scale: [f64; 3] = std::array::from_fn(|a| target[a] / vol.spacing[a]);
    let data = Grid3::from_fn(dims, |x, y, z| {
        let p = [
            x as f64 * scale[0],
            y as f64 * scale[1],
            z as f64 * scale[2],
        ];
        match interp {
            Interp::Trilinear => vol.data.sample_linear(p, Padding::Edge) as f32,
            Interp::Nearest => vol.data.sample_nearest(p, Padding::Edge) as f32,
        }
    });
    Volume::new(data, target, vol.origin, vol.modality)
}

/// Nearest-neighbour resampling of a mask.
pub fn resample_mask(mask: &Mask, target: [f64; 3]) -> Result<Mask> {
    let vol = resample(&mask.to_volume(), target, Interp::Nearest)?;
    Mask::new(vol.data.map(|v| (v > 0.5) as u8), vol.spacing, vol.origin)
}

/// First voxel of a window of `size` whose centre voxel is `center`.
pub fn patch_start(center: [usize; 3], size: [usize; 3]) -> [isize; 3] {
    std::array::from_fn(|a| center[a] as isize - (size[a] / 2) as isize)
}

/// Copies the window of `size` starting at `start` (may be negative or run
/// past the end); voxels outside `src` are filled with `pad`.
pub fn crop_padded<T: Copy>(src: &Grid3<T>, start: [isize; 3], size: [usize; 3], pad: T) -> Grid3<T> {
    let dims = src.dims();
    let mut out = Grid3::filled(size, pad);
    // valid x run is shared by every row
    let x0 = start[0].max(0);
    let x1 = (start[0] + size[0] as isize).min(dims[0] as isize);
    if x1 <= x0 {
        return out;
    }
    for z in 0..size[2] {
        let sz = start[2] + z as isize;
        if sz < 0 || sz >= dims[2] as isize {
            continue;
        }
        for y in 0..size[1] {
            let sy = start[1] + y as isize;
            if sy < 0 || sy >= dims[1] as isize {
                continue;
            }
            let src_row = src.index(x0 as usize, sy as usize, sz as usize);
            let dst_row = out.index((x0 - start[0]) as usize, y, z);
            let n = (x1 - x0) as usize;
            out.data_mut()[dst_row..dst_row + n]
                .copy_from_slice(&src.data()[src_row..src_row + n]);
        }
    }
    out
}

/// Extracts one zero-padded patch per channel, centred on `center`.
pub fn extract_patch(
    vols: &[&Grid3<f32>],
    center: [usize; 3],
    size: [usize; 3],
) -> Result<Vec<Grid3<f32>>> {
    let Some(first) = vols.first() else {
        return Ok(Vec::new());
    };
    if vols.iter().any(|v| v.dims() != first.dims()) {
        return Err(Error::ShapeMismatch(
            "patch channels have different shapes".into(),
        ));
    }
    let start = patch_start(center, size);
    Ok(vols.iter().map(|v| crop_padded(v, start, size, 0.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchKind {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub channels: Vec<Grid3<f32>>,
    pub label: Grid3<u8>,
    pub center: [usize; 3],
    pub kind: PatchKind,
}

/// Patch centres for [`sample_patches`]: `round(count * positive_fraction)`
/// positives drawn uniformly from the foreground, then negatives uniform over
/// the grid.
pub fn sample_patch_centers(
    label: &Grid3<u8>,
    count: usize,
    positive_fraction: f64,
    seed: u64,
) -> Result<Vec<([usize; 3], PatchKind)>> {
    let n_pos = ((count as f64) * positive_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let foreground: Vec<usize> = if n_pos > 0 {
        let fg: Vec<usize> = label
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0).then_some(i))
            .collect();
        if fg.is_empty() {
            return Err(Error::EmptyMask);
        }
        fg
    } else {
        Vec::new()
    };
    let dims = label.dims();
    Ok((0..count)
        .map(|k| {
            if k < n_pos {
                let i = foreground[rng.random_range(0..foreground.len())];
                (label.coords(i), PatchKind::Positive)
            } else {
                let c = [
                    rng.random_range(0..dims[0]),
                    rng.random_range(0..dims[1]),
                    rng.random_range(0..dims[2]),
                ];
                (c, PatchKind::Negative)
            }
        })
        .collect())
}

/// Crops the patch of `size` centred at `center` from every channel and the
/// label.
pub fn patch_at(
    channels: &[&Grid3<f32>],
    label: &Grid3<u8>,
    center: [usize; 3],
    kind: PatchKind,
    size: [usize; 3],
) -> PatchSample {
    let start = patch_start(center, size);
    PatchSample {
        channels: channels.iter().map(|c| crop_padded(c, start, size, 0.0)).collect(),
        label: crop_padded(label, start, size, 0),
        center,
        kind,
    }
}

/// Draws `count` patches: `round(count * positive_fraction)` centred inside
/// the label foreground, the rest centred uniformly over the volume.
pub fn sample_patches(
    channels: &[&Grid3<f32>],
    label: &Grid3<u8>,
    count: usize,
    positive_fraction: f64,
    size: [usize; 3],
    seed: u64,
) -> Result<Vec<PatchSample>> {
    if channels.iter().any(|c| c.dims() != label.dims()) {
        return Err(Error::ShapeMismatch(
            "sampling channels and label differ in shape".into(),
        ));
    }
    Ok(sample_patch_centers(label, count, positive_fraction, seed)?
        .into_iter()
        .map(|(center, kind)| patch_at(channels, label, center, kind, size))
        .collect())
}

/// Samples patches from a manifest case using the normalized RTCT as the
/// single input channel.
pub fn sample_training_patches(
    case: &CaseManifest,
    count: usize,
    positive_fraction: f64,
    size: [usize; 3],
    seed: u64,
    norm: &Normalization,
) -> Result<Vec<PatchSample>> {
    let ct = load_volume(&case.rtct)?;
    let ct_norm = norm.apply(&ct);
    let label = if positive_fraction > 0.0 {
        let gtv = load_mask(&case.gtv_mask)?;
        gtv.check_aligned(&ct)?;
        gtv.data
    } else {
        Grid3::filled(ct.dims(), 0)
    };
    sample_patches(&[&ct_norm], &label, count, positive_fraction, size, seed)
}

/// Rotates every channel (bilinear in-plane) and the label (nearest) about
/// the patch's z axis through the x-y centre. Positive angles turn +x
/// towards +y.
pub fn rotate_xy(patch: &PatchSample, angle_deg: f64) -> PatchSample {
    if angle_deg == 0.0 {
        return patch.clone();
    }
    let dims = patch.label.dims();
    let (s, c) = angle_deg.to_radians().sin_cos();
    let cx = (dims[0] as f64 - 1.0) / 2.0;
    let cy = (dims[1] as f64 - 1.0) / 2.0;
    // inverse map: output (x, y) reads input R^-1 (p - c) + c
    let src = |x: usize, y: usize| -> (f64, f64) {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    };
    let rotate = |g: &Grid3<f32>| {
        Grid3::from_fn(dims, |x, y, z| {
            let (px, py) = src(x, y);
            g.sample_linear([px, py, z as f64], Padding::Constant(0.0)) as f32
        })
    };
    let label = Grid3::from_fn(dims, |x, y, z| {
        let (px, py) = src(x, y);
        patch
            .label
            .sample_nearest([px, py, z as f64], Padding::Constant(0.0)) as u8
    });
    PatchSample {
        channels: patch.channels.iter().map(rotate).collect(),
        label,
        center: patch.center,
        kind: patch.kind,
    }
}

/// Intensity normalization applied before any network sees a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// CT is clipped to `[ct_min, ct_max]` HU and mapped linearly to [-1, 1].
    pub ct_min: f32,
    pub ct_max: f32,
    /// PET is z-scored per volume when set.
    pub pet_zscore: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            ct_min: -1000.0,
            ct_max: 1000.0,
            pet_zscore: true,
        }
    }
}

impl Normalization {
    pub fn ct(&self, vol: &Volume) -> Grid3<f32> {
        let mid = 0.5 * (self.ct_max + self.ct_min);
        let half = 0.5 * (self.ct_max - self.ct_min);
        vol.data
            .map(|v| (v.clamp(self.ct_min, self.ct_max) - mid) / half)
    }

    pub fn pet(&self, vol: &Volume) -> Grid3<f32> {
        if !self.pet_zscore {
            return vol.data.clone();
        }
        let n = vol.data.len() as f64;
        let mean = vol.data.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vol
            .data
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt().max(1e-6);
        vol.data.map(|v| ((v as f64 - mean) / sd) as f32)
    }

    /// Dispatches on modality; probability maps pass through unchanged.
    pub fn apply(&self, vol: &Volume) -> Grid3<f32> {
        match vol.modality {
            Modality::Ct => self.ct(vol),
            Modality::Pet => self.pet(vol),
            Modality::Prob | Modality::Other => vol.data.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub rtct: PathBuf,
    pub diag_ct: PathBuf,
    pub pet: PathBuf,
    pub gtv_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registered_pet: Option<PathBuf>,
}

impl CaseManifest {
    fn map_paths(&self, f: impl Fn(&Path) -> PathBuf) -> Self {
        Self {
            case_id: self.case_id.clone(),
            rtct: f(&self.rtct),
            diag_ct: f(&self.diag_ct),
            pet: f(&self.pet),
            gtv_mask: f(&self.gtv_mask),
            registered_pet: self.registered_pet.as_deref().map(&f),
        }
    }

    fn volume_files(&self) -> Vec<&Path> {
        let mut v = vec![
            self.rtct.as_path(),
            self.diag_ct.as_path(),
            self.pet.as_path(),
            self.gtv_mask.as_path(),
        ];
        if let Some(p) = &self.registered_pet {
            v.push(p);
        }
        v
    }
}

/// A dataset manifest. Paths are stored relative to the manifest's directory
/// and resolved on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseManifest>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: DatasetManifest = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let manifest = DatasetManifest {
            cases: raw
                .cases
                .iter()
                .map(|c| c.map_paths(|p| dir.join(p)))
                .collect(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let rel = DatasetManifest {
            cases: self
                .cases
                .iter()
                .map(|c| {
                    c.map_paths(|p| p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf()))
                })
                .collect(),
        };
        write_json(path, &rel)
    }

    /// Case ids must be unique and every referenced volume must exist.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for case in &self.cases {
            if !seen.insert(case.case_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate case_id {}",
                    case.case_id
                )));
            }
            for p in case.volume_files() {
                let (raw, header) = volume_paths(p);
                if !raw.exists() || !header.exists() {
                    return Err(Error::InvalidManifest(format!(
                        "case {}: missing volume {}",
                        case.case_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn case(&self, id: &str) -> Option<&CaseManifest> {
        self.cases.iter().find(|c| c.case_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Grid3<f32> {
        Grid3::from_fn(dims, |x, y, z| (x + 7 * y + 31 * z) as f32 * 0.25)
    }

    #[test]
    fn load_trivial_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zeros");
        let v = Volume::new(Grid3::filled([8, 8, 8], 0.0), [1.0, 1.0, 2.5], [0.0; 3], Modality::Ct).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&dir.path().join("zeros.raw")).unwrap();
        assert_eq!(back.dims(), [8, 8, 8]);
        assert_eq!(back.spacing, [1.0, 1.0, 2.5]);
    }

    #[test]
    fn header_records_modality() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pet");
        let v = Volume::new(Grid3::filled([2, 2, 2], 1.0), [2.0; 3], [0.0; 3], Modality::Pet).unwrap();
        save_volume(&v, &p).unwrap();
        let text = std::fs::read_to_string(dir.path().join("pet.vol.json")).unwrap();
        assert!(text.contains("\"modality\": \"PET\""));
        assert!(text.contains("\"dtype\": \"f32le\""));
    }

    #[test]
    fn blob_size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        let v = Volume::new(Grid3::filled([8, 8, 8], 0.0), [1.0; 3], [0.0; 3], Modality::Ct).unwrap();
        save_volume(&v, &p).unwrap();
        std::fs::write(dir.path().join("v.raw"), vec![0u8; 400]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn missing_header_and_nonfinite() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.raw"), vec![0u8; 4]).unwrap();
        assert!(matches!(load_volume(&dir.path().join("a.raw")), Err(Error::MissingHeader(_))));

        let mut v = Volume::new(Grid3::filled([2, 1, 1], 0.0), [1.0; 3], [0.0; 3], Modality::Ct).unwrap();
        v.data.set(1, 0, 0, f32::NAN);
        save_volume(&v, &dir.path().join("b")).unwrap();
        assert!(matches!(load_volume(&dir.path().join("b")), Err(Error::NonFiniteData(_))));
    }

    #[test]
    fn unwritable_directory_fails() {
        let v = Volume::new(Grid3::filled([2, 2, 2], 0.0), [1.0; 3], [0.0; 3], Modality::Ct).unwrap();
        let err = save_volume(&v, Path::new("/nonexistent-dir/for/sure/v")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn resample_identity_and_constant() {
        let v = Volume::new(ramp([6, 5, 4]), [1.0, 1.0, 2.5], [0.0; 3], Modality::Ct).unwrap();
        let same = resample(&v, [1.0, 1.0, 2.5], Interp::Trilinear).unwrap();
        assert_eq!(same.data, v.data);

        let c = Volume::new(Grid3::filled([7, 5, 3], 7.0), [1.3, 0.7, 3.0], [0.0; 3], Modality::Ct).unwrap();
        let r = resample(&c, [1.0, 1.0, 2.5], Interp::Trilinear).unwrap();
        assert!(r.data.data().iter().all(|&x| (x - 7.0).abs() < 1e-6));
    }

    #[test]
    fn resample_shape_follows_ceil_rule() {
        // 10 voxels of 2 mm = 20 mm -> 20 at 1 mm; 20 mm / 2.5 mm = 8
        let v = Volume::new(Grid3::filled([10, 10, 10], 1.0), [2.0; 3], [0.0; 3], Modality::Ct).unwrap();
        let r = resample(&v, [1.0, 1.0, 2.5], Interp::Trilinear).unwrap();
        assert_eq!(r.dims(), [20, 20, 8]);
        assert!(matches!(
            resample(&v, [1.0, 0.0, 1.0], Interp::Nearest),
            Err(Error::InvalidSpacing(_))
        ));
    }

    #[test]
    fn mask_resampling_stays_binary() {
        let g = Grid3::from_fn([9, 9, 9], |x, y, z| ((x + y + z) % 3 == 0) as u8);
        let m = Mask::new(g, [1.0; 3], [0.0; 3]).unwrap();
        let r = resample_mask(&m, [0.7, 1.3, 2.1]).unwrap();
        assert!(r.data.data().iter().all(|&v| v <= 1));
        let rv = resample(&m.to_volume(), [0.7, 1.3, 2.1], Interp::Nearest).unwrap();
        assert!(rv.data.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn extract_patch_cases() {
        let g = ramp([12, 12, 12]);
        let inner = extract_patch(&[&g], [6, 6, 6], [4, 4, 4]).unwrap();
        assert_eq!(inner[0].get(0, 0, 0), g.get(4, 4, 4));

        let whole = extract_patch(&[&g], [6, 6, 6], [12, 12, 12]).unwrap();
        assert_eq!(whole[0], g);

        // corner centre: brute-force count of voxels whose source lies outside
        let ones = Grid3::filled([12, 12, 12], 1.0f32);
        let corner = extract_patch(&[&ones], [0, 0, 0], [4, 4, 4]).unwrap();
        let mut expected_padded = 0;
        for z in 0..4isize {
            for y in 0..4isize {
                for x in 0..4isize {
                    if ones.get_signed(x - 2, y - 2, z - 2).is_none() {
                        expected_padded += 1;
                    }
                }
            }
        }
        let padded = corner[0].data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(padded, expected_padded);
        assert_eq!(padded, 56);

        let other = Grid3::filled([5, 5, 5], 0.0f32);
        assert!(matches!(
            extract_patch(&[&g, &other], [0, 0, 0], [2, 2, 2]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn blob_label(dims: [usize; 3]) -> Grid3<u8> {
        Grid3::from_fn(dims, |x, y, z| {
            let d = (x as f64 - 10.0).powi(2) + (y as f64 - 12.0).powi(2) + (z as f64 - 8.0).powi(2);
            (d <= 9.0) as u8
        })
    }

    #[test]
    fn sampling_split_and_determinism() {
        let dims = [24, 24, 16];
        let ct = ramp(dims);
        let label = blob_label(dims);
        let a = sample_patches(&[&ct], &label, 80, 0.5, [8, 8, 8], 3).unwrap();
        assert_eq!(a.len(), 80);
        let pos: Vec<_> = a.iter().filter(|p| p.kind == PatchKind::Positive).collect();
        assert_eq!(pos.len(), 40);
        for p in &pos {
            let [x, y, z] = p.center;
            assert_eq!(label.get(x, y, z), 1);
            assert!(p.label.data().iter().any(|&v| v == 1));
            assert_eq!(p.channels[0].dims(), p.label.dims());
        }
        let b = sample_patches(&[&ct], &label, 80, 0.5, [8, 8, 8], 3).unwrap();
        assert_eq!(a, b);

        let empty = Grid3::filled(dims, 0u8);
        let neg = sample_patches(&[&ct], &empty, 10, 0.0, [8, 8, 8], 1).unwrap();
        assert!(neg.iter().all(|p| p.kind == PatchKind::Negative));
        assert!(matches!(
            sample_patches(&[&ct], &empty, 10, 0.5, [8, 8, 8], 1),
            Err(Error::EmptyMask)
        ));
    }

    fn patch_from(ch: Grid3<f32>, label: Grid3<u8>) -> PatchSample {
        PatchSample {
            channels: vec![ch],
            label,
            center: [0; 3],
            kind: PatchKind::Negative,
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let p = patch_from(ramp([6, 6, 3]), blob_label([6, 6, 3]));
        assert_eq!(rotate_xy(&p, 0.0), p);
    }

    #[test]
    fn rotate_quarter_turn_is_index_permutation() {
        let n = 7;
        let ch = Grid3::from_fn([n, n, 3], |x, y, z| ((x * 13 + y * 5 + z * 3) % 11) as f32);
        let label = Grid3::from_fn([n, n, 3], |x, y, _| (x > y) as u8);
        let p = patch_from(ch.clone(), label.clone());
        let r = rotate_xy(&p, 90.0);
        // output(x, y) = input(y, n-1-x)
        for z in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let want = ch.get(y, n - 1 - x, z);
                    assert!((r.channels[0].get(x, y, z) - want).abs() < 1e-6);
                    assert_eq!(r.label.get(x, y, z), label.get(y, n - 1 - x, z));
                }
            }
        }
    }

    #[test]
    fn rotating_a_cylinder_keeps_its_label() {
        let n = 33;
        let c = (n as f64 - 1.0) / 2.0;
        let cyl = Grid3::from_fn([n, n, 4], |x, y, _| {
            (((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() <= 10.0) as u8
        });
        let p = patch_from(cyl.map(f32::from), cyl.clone());
        let r = rotate_xy(&p, 10.0);
        let (mut inter, mut total) = (0usize, 0usize);
        for (a, b) in cyl.data().iter().zip(r.label.data()) {
            inter += (*a & *b) as usize;
            total += (*a + *b) as usize;
        }
        let dice = 2.0 * inter as f64 / total as f64;
        assert!(dice >= 0.95, "dice {dice}");
    }

    #[test]
    fn normalization_ranges() {
        let ct = Volume::new(
            Grid3::from_vec([4, 1, 1], vec![-3000.0, -1000.0, 0.0, 2500.0]).unwrap(),
            [1.0; 3],
            [0.0; 3],
            Modality::Ct,
        )
        .unwrap();
        let n = Normalization::default().apply(&ct);
        assert_eq!(n.data(), &[-1.0, -1.0, 0.0, 1.0]);
        let pet = Volume::new(
            Grid3::from_vec([4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            [1.0; 3],
            [0.0; 3],
            Modality::Pet,
        )
        .unwrap();
        let z = Normalization::default().apply(&pet);
        let mean: f32 = z.data().iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(Grid3::filled([2, 2, 2], 0.0), [1.0; 3], [0.0; 3], Modality::Ct).unwrap();
        for n in ["ct", "dct", "pet", "gtv"] {
            save_volume(&v, &dir.path().join(n)).unwrap();
        }
        let case = CaseManifest {
            case_id: "c0".into(),
            rtct: dir.path().join("ct.raw"),
            diag_ct: dir.path().join("dct.raw"),
            pet: dir.path().join("pet.raw"),
            gtv_mask: dir.path().join("gtv.raw"),
            registered_pet: None,
        };
        let m = DatasetManifest { cases: vec![case.clone()] };
        let mp = dir.path().join("dataset.json");
        m.save(&mp).unwrap();
        let text = std::fs::read_to_string(&mp).unwrap();
        assert!(text.contains("\"ct.raw\""));
        assert_eq!(DatasetManifest::load(&mp).unwrap(), m);

        let dup = DatasetManifest { cases: vec![case.clone(), case] };
        assert!(matches!(dup.validate(), Err(Error::InvalidManifest(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn save_load_is_bitwise(
                vals in proptest::collection::vec(-1e6f32..1e6, 24),
                sx in 0.1f64..5.0, oz in -100f64..100.0,
            ) {
                let dir = tempfile::tempdir().unwrap();
                let v = Volume::new(
                    Grid3::from_vec([2, 3, 4], vals).unwrap(),
                    [sx, 1.0, 2.5], [0.0, 1.5, oz], Modality::Pet,
                ).unwrap();
                save_volume(&v, &dir.path().join("v")).unwrap();
                let back = load_volume(&dir.path().join("v")).unwrap();
                prop_assert_eq!(back, v);
            }

            #[test]
            fn interior_patch_matches_slicing(
                seed in 0u64..1000, cx in 3usize..13, cy in 3usize..13, cz in 3usize..13,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = Grid3::from_fn([16, 16, 16], |_, _, _| rng.random::<f32>());
                let p = extract_patch(&[&g], [cx, cy, cz], [6, 6, 6]).unwrap();
                for z in 0..6 { for y in 0..6 { for x in 0..6 {
                    prop_assert_eq!(p[0].get(x, y, z), g.get(cx - 3 + x, cy - 3 + y, cz - 3 + z));
                }}}
            }

            #[test]
            fn rotation_keeps_label_binary(angle in -180f64..180.0) {
                let label = blob_label([20, 24, 16]);
                let p = patch_from(label.map(f32::from), label);
                let r = rotate_xy(&p, angle);
                prop_assert!(r.label.data().iter().all(|&v| v <= 1));
                prop_assert_eq!(r.channels[0].dims(), [20, 24, 16]);
            }
        }
    }
}
