//! Synthetic patient generator.
//!
//! Each case has an RTCT, a diagnostic CT + PET pair displaced from it by a
//! known warp, and a GTV mask in the RTCT frame. The tumour is a thickening of
//! the esophagus wall whose CT contrast sits below the noise floor, while the
//! PET shows it clearly together with a few unrelated hot spots.
//!
//! The anatomy lives in the diagnostic frame. For an RTCT voxel `x` the
//! rendered value is `A(x + d(x))`, so warping the diagnostic images with the
//! true field `d` reproduces the RTCT.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{write_json, Error, Result};
use crate::grid::Grid3;
use crate::register::{ControlGrid, DeformationField, GridGeometry};
use crate::volio::{self, CaseManifest, DatasetManifest, Mask, Modality, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    #[inline]
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }

    fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    /// Spine: a bone cylinder along z at `(x, y)` mm.
    pub spine_center_xy: [f64; 2],
    pub spine_radius_mm: f64,
    /// Esophagus tube centreline `(x, y)` mm, before per-case wobble.
    pub esophagus_center_xy: [f64; 2],
    pub esophagus_radius_mm: f64,
    /// Peak sideways wobble of the centreline along z.
    pub esophagus_wobble_mm: f64,
    /// Nominal GTV semi-axes; each case scales them by `1 +- gtv_size_jitter`.
    pub gtv_radii_mm: [f64; 3],
    pub gtv_size_jitter: f64,
    /// Allowed GTV centre range along z, as fractions of the body's z extent.
    pub gtv_z_range: [f64; 2],
    pub air_hu: f64,
    pub body_hu: f64,
    pub lung_hu: f64,
    pub bone_hu: f64,
    pub esophagus_wall_hu: f64,
    /// GTV value is `esophagus_wall_hu + gtv_ct_contrast`.
    pub gtv_ct_contrast: f64,
    pub ct_noise_sigma: f64,
    pub pet_background_uptake: f64,
    pub pet_lung_uptake: f64,
    pub pet_gtv_uptake: f64,
    pub distractor_count: usize,
    pub distractor_uptake: f64,
    pub distractor_radius_mm: f64,
    pub pet_noise_sigma: f64,
    pub pet_blur_sigma_mm: f64,
    /// Bound on the smooth (non-rigid) part of the diagnostic-to-RTCT warp.
    pub misalignment_max_mm: f64,
    /// Bound on the global translation part of the warp.
    pub translation_max_mm: f64,
    /// Forces the translation instead of drawing it.
    pub fixed_translation_mm: Option<[f64; 3]>,
    pub warp_control_spacing_mm: f64,
    /// Per-case random offset of the whole anatomy.
    pub anatomy_jitter_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_shape: [96, 96, 48],
            spacing: [1.0, 1.0, 2.5],
            body: Ellipsoid {
                center: [47.5, 50.0, 58.75],
                radii: [43.0, 35.0, 57.0],
            },
            lungs: [
                Ellipsoid {
                    center: [25.0, 42.0, 62.0],
                    radii: [12.0, 17.0, 36.0],
                },
                Ellipsoid {
                    center: [70.0, 42.0, 62.0],
                    radii: [12.0, 17.0, 36.0],
                },
            ],
            spine_center_xy: [47.5, 76.0],
            spine_radius_mm: 6.0,
            esophagus_center_xy: [47.5, 63.0],
            esophagus_radius_mm: 5.0,
            esophagus_wobble_mm: 2.0,
            gtv_radii_mm: [9.0, 8.0, 15.0],
            gtv_size_jitter: 0.3,
            gtv_z_range: [0.3, 0.7],
            air_hu: -1000.0,
            body_hu: 40.0,
            lung_hu: -800.0,
            bone_hu: 300.0,
            esophagus_wall_hu: 30.0,
            gtv_ct_contrast: 15.0,
            ct_noise_sigma: 10.0,
            pet_background_uptake: 1.0,
            pet_lung_uptake: 0.3,
            pet_gtv_uptake: 6.0,
            distractor_count: 2,
            distractor_uptake: 5.0,
            distractor_radius_mm: 5.0,
            pet_noise_sigma: 0.1,
            pet_blur_sigma_mm: 4.0,
            misalignment_max_mm: 8.0,
            translation_max_mm: 10.0,
            fixed_translation_mm: None,
            warp_control_spacing_mm: 32.0,
            anatomy_jitter_mm: 3.0,
        }
    }
}

impl PhantomSpec {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            dims: self.grid_shape,
            spacing: self.spacing,
            origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.grid_shape.iter().any(|&d| d < 4) {
            return bad("grid must have at least 4 voxels per axis");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive");
        }
        let extent = self.geometry().extent();
        let inside = |e: &Ellipsoid| {
            (0..3).all(|a| e.radii[a] > 0.0 && e.center[a] - e.radii[a] >= 0.0 && e.center[a] + e.radii[a] <= extent[a])
        };
        if !inside(&self.body) {
            return bad("body ellipsoid must lie inside the grid");
        }
        if !self.lungs.iter().all(inside) {
            return bad("lung ellipsoids must lie inside the grid");
        }
        if self.gtv_radii_mm.iter().any(|&r| !(r > 0.0))
            || !(self.esophagus_radius_mm > 0.0)
            || !(self.spine_radius_mm > 0.0)
            || !(self.distractor_radius_mm > 0.0)
        {
            return bad("all radii must be positive");
        }
        if !(0.0..1.0).contains(&self.gtv_size_jitter) {
            return bad("gtv_size_jitter must be in [0, 1)");
        }
        if !(0.0 <= self.gtv_z_range[0] && self.gtv_z_range[0] <= self.gtv_z_range[1] && self.gtv_z_range[1] <= 1.0) {
            return bad("gtv_z_range must be an ordered sub-range of [0, 1]");
        }
        for v in [
            self.ct_noise_sigma,
            self.pet_noise_sigma,
            self.pet_blur_sigma_mm,
            self.misalignment_max_mm,
            self.translation_max_mm,
            self.anatomy_jitter_mm,
            self.esophagus_wobble_mm,
        ] {
            if !(v >= 0.0) {
                return bad("noise, blur, jitter and misalignment bounds must be non-negative");
            }
        }
        if self.pet_gtv_uptake <= self.pet_background_uptake {
            return bad("GTV uptake must exceed background");
        }
        if !(self.warp_control_spacing_mm >= 2.0 * self.spacing.iter().copied().fold(0.0, f64::max)) {
            return bad("warp control spacing too fine for the grid");
        }
        Ok(())
    }
}

/// The sampled anatomy of one case, in the diagnostic frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub spine_xy: [f64; 2],
    pub spine_radius: f64,
    pub esophagus_xy: [f64; 2],
    pub esophagus_radius: f64,
    /// Centreline wobble: amplitude (x, y) mm, wavelength mm, phase.
    pub wobble: [f64; 4],
    pub gtv: Ellipsoid,
    pub distractors: Vec<[f64; 3]>,
    pub distractor_radius: f64,
}

/// Tissue class at a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Air,
    Body,
    Lung,
    Bone,
    EsophagusWall,
    Gtv,
}

impl Anatomy {
    fn esophagus_center(&self, z: f64) -> [f64; 2] {
        let [ax, ay, wavelength, phase] = self.wobble;
        let s = (std::f64::consts::TAU * z / wavelength + phase).sin();
        [self.esophagus_xy[0] + ax * s, self.esophagus_xy[1] + ay * s]
    }

    pub fn tissue(&self, p: [f64; 3]) -> Tissue {
        if !self.body.contains(p) {
            return Tissue::Air;
        }
        if self.gtv.contains(p) {
            return Tissue::Gtv;
        }
        if self.lungs.iter().any(|l| l.contains(p)) {
            return Tissue::Lung;
        }
        let sx = p[0] - self.spine_xy[0];
        let sy = p[1] - self.spine_xy[1];
        if sx * sx + sy * sy <= self.spine_radius * self.spine_radius {
            return Tissue::Bone;
        }
        let c = self.esophagus_center(p[2]);
        let ex = p[0] - c[0];
        let ey = p[1] - c[1];
        if ex * ex + ey * ey <= self.esophagus_radius * self.esophagus_radius {
            return Tissue::EsophagusWall;
        }
        Tissue::Body
    }

    pub fn ct_value(&self, spec: &PhantomSpec, p: [f64; 3]) -> f64 {
        match self.tissue(p) {
            Tissue::Air => spec.air_hu,
            Tissue::Body => spec.body_hu,
            Tissue::Lung => spec.lung_hu,
            Tissue::Bone => spec.bone_hu,
            Tissue::EsophagusWall => spec.esophagus_wall_hu,
            Tissue::Gtv => spec.esophagus_wall_hu + spec.gtv_ct_contrast,
        }
    }

    fn in_distractor(&self, p: [f64; 3]) -> bool {
        let r2 = self.distractor_radius * self.distractor_radius;
        self.distractors
            .iter()
            .any(|c| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r2)
    }

    /// Noise-free, unblurred PET uptake.
    pub fn pet_value(&self, spec: &PhantomSpec, p: [f64; 3]) -> f64 {
        match self.tissue(p) {
            Tissue::Air => 0.0,
            Tissue::Gtv => spec.pet_gtv_uptake,
            Tissue::Lung => spec.pet_lung_uptake,
            _ if self.in_distractor(p) => spec.distractor_uptake,
            _ => spec.pet_background_uptake,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub rtct: Volume,
    pub diag_ct: Volume,
    /// PET in the diagnostic frame.
    pub pet: Volume,
    /// GTV in the RTCT frame.
    pub gtv_mask: Mask,
    /// RTCT-to-diagnostic displacement: RTCT point `x` shows the anatomy at
    /// `x + d(x)`.
    pub true_field: DeformationField,
    /// Global translation part of `true_field`.
    pub translation_mm: [f64; 3],
    pub anatomy: Anatomy,
}

/// Renders `f` at every voxel of `geom`, displaced by `field` when given.
fn render(geom: &GridGeometry, field: Option<&DeformationField>, mut f: impl FnMut([f64; 3]) -> f64) -> Grid3<f32> {
    let mut i = 0;
    Grid3::from_fn(geom.dims, |x, y, z| {
        let mut p = geom.point(x, y, z);
        if let Some(field) = field {
            let d = field.disp[i];
            for a in 0..3 {
                p[a] += d[a];
            }
        }
        i += 1;
        f(p) as f32
    })
}

/// Noise-free CT of `anatomy`, in the RTCT frame when `field` is given and
/// in the diagnostic frame otherwise.
pub fn render_ct(spec: &PhantomSpec, anatomy: &Anatomy, field: Option<&DeformationField>) -> Volume {
    let geom = spec.geometry();
    let data = render(&geom, field, |p| anatomy.ct_value(spec, p));
    Volume::new(data, spec.spacing, [0.0; 3], Modality::Ct).expect("spec geometry validated")
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma_vox).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with per-axis sigma in voxels; the kernel is
/// renormalized where it leaves the grid.
pub(crate) fn gaussian_blur(g: &Grid3<f32>, sigma_vox: [f64; 3]) -> Grid3<f32> {
    let mut cur: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
    let dims = g.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let k = gaussian_kernel(sigma_vox[axis]);
        if k.len() == 1 {
            continue;
        }
        let r = (k.len() / 2) as isize;
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % dims[axis]) as isize;
            let base = i as isize - pos * strides[axis] as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, w) in k.iter().enumerate() {
                let q = pos + j as isize - r;
                if q >= 0 && q < n {
                    acc += w * cur[(base + q * strides[axis] as isize) as usize];
                    wsum += w;
                }
            }
            *out = acc / wsum;
        }
        cur = next;
    }
    Grid3::from_vec(dims, cur.into_iter().map(|v| v as f32).collect()).expect("same dims")
}

fn sample_anatomy(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Anatomy> {
    let j = spec.anatomy_jitter_mm;
    let mut jitter = || -> [f64; 3] {
        if j > 0.0 {
            [rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j)]
        } else {
            [0.0; 3]
        }
    };
    let shift = jitter();
    let moved = |e: &Ellipsoid| Ellipsoid {
        center: std::array::from_fn(|a| e.center[a] + shift[a]),
        radii: e.radii,
    };
    let body = moved(&spec.body);
    let lungs = [moved(&spec.lungs[0]), moved(&spec.lungs[1])];
    let spine_xy = [spec.spine_center_xy[0] + shift[0], spec.spine_center_xy[1] + shift[1]];
    let esophagus_xy = [spec.esophagus_center_xy[0] + shift[0], spec.esophagus_center_xy[1] + shift[1]];
    let w = spec.esophagus_wobble_mm;
    let wobble = [
        if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 },
        if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 },
        rng.random_range(80.0..160.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let zlo = body.center[2] - body.radii[2];
    let zlen = 2.0 * body.radii[2];
    let gz = zlo + zlen * rng.random_range(spec.gtv_z_range[0]..=spec.gtv_z_range[1]);
    let sj = spec.gtv_size_jitter;
    let radii = spec
        .gtv_radii_mm
        .map(|r| r * if sj > 0.0 { rng.random_range(1.0 - sj..=1.0 + sj) } else { 1.0 });
    let mut anatomy = Anatomy {
        body,
        lungs,
        spine_xy,
        spine_radius: spec.spine_radius_mm,
        esophagus_xy,
        esophagus_radius: spec.esophagus_radius_mm,
        wobble,
        gtv: Ellipsoid {
            center: [0.0, 0.0, gz],
            radii,
        },
        distractors: Vec::new(),
        distractor_radius: spec.distractor_radius_mm,
    };
    // GTV centred on the esophagus centreline, so it always intersects the tube
    let c = anatomy.esophagus_center(gz);
    anatomy.gtv.center = [c[0], c[1], gz];
    let shrunk = Ellipsoid {
        center: body.center,
        radii: body.radii.map(|r| r - anatomy.gtv.max_radius()),
    };
    if !shrunk.radii.iter().all(|&r| r > 0.0) || !shrunk.contains(anatomy.gtv.center) {
        return Err(Error::InvalidSpec("GTV does not fit inside the body".into()));
    }

    let min_gtv_dist = 2.0 * anatomy.gtv.max_radius();
    let rd = spec.distractor_radius_mm;
    let mut tries = 0;
    while anatomy.distractors.len() < spec.distractor_count {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::InvalidSpec("cannot place distractors".into()));
        }
        let p: [f64; 3] = std::array::from_fn(|a| {
            body.center[a] + rng.random_range(-body.radii[a]..=body.radii[a])
        });
        let inner = Ellipsoid {
            center: body.center,
            radii: body.radii.map(|r| (r - rd).max(1e-3)),
        };
        let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
        let ok = inner.contains(p)
            && matches!(anatomy.tissue(p), Tissue::Body | Tissue::EsophagusWall)
            && dist(p, anatomy.gtv.center) >= min_gtv_dist.max(anatomy.gtv.max_radius() + rd)
            && anatomy.distractors.iter().all(|&q| dist(p, q) > 2.0 * rd)
            && lungs.iter().all(|l| {
                let grown = Ellipsoid { center: l.center, radii: l.radii.map(|r| r + rd) };
                !grown.contains(p)
            });
        if ok {
            anatomy.distractors.push(p);
        }
    }
    Ok(anatomy)
}

fn sample_warp(spec: &PhantomSpec, anatomy: &Anatomy, rng: &mut ChaCha8Rng) -> Result<(DeformationField, [f64; 3])> {
    let geom = spec.geometry();
    let translation = match spec.fixed_translation_mm {
        Some(t) => t,
        None if spec.translation_max_mm > 0.0 => {
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            let dir: [f64; 3] = std::array::from_fn(|_| n.sample(rng));
            let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-12);
            let mag = spec.translation_max_mm * rng.random_range(0.5..=1.0);
            dir.map(|d| d / len * mag)
        }
        None => [0.0; 3],
    };
    if spec.misalignment_max_mm <= 0.0 {
        return Ok((DeformationField::constant(geom, translation), translation));
    }
    let s = spec.warp_control_spacing_mm;
    let mut grid = ControlGrid::covering(&geom, [s; 3])?;
    for c in &mut grid.coeffs {
        *c = [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ];
    }
    // the smooth part carries no net lung motion: the translation owns it
    let smooth = DeformationField::from_control_grid(&grid, geom, [0.0; 3])?;
    let mut mean = [0.0; 3];
    let mut n = 0usize;
    let mut i = 0;
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let p = geom.point(x, y, z);
                if anatomy.lungs.iter().any(|l| l.contains(p)) {
                    for a in 0..3 {
                        mean[a] += smooth.disp[i][a];
                    }
                    n += 1;
                }
                i += 1;
            }
        }
    }
    if n > 0 {
        for c in &mut grid.coeffs {
            for a in 0..3 {
                c[a] -= mean[a] / n as f64;
            }
        }
    }
    let centred = DeformationField::from_control_grid(&grid, geom, [0.0; 3])?;
    let peak = centred.max_magnitude();
    let target = spec.misalignment_max_mm * rng.random_range(0.6..=1.0);
    let scale = if peak > 0.0 { target / peak } else { 0.0 };
    for c in &mut grid.coeffs {
        for a in 0..3 {
            c[a] *= scale;
        }
    }
    // The sampled lung centroid should move by exactly the translation, so
    // nudge the constant part of the warp until the rendered lungs agree.
    let lung_centroid = |field: Option<&DeformationField>| -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        let mut i = 0;
        for z in 0..geom.dims[2] {
            for y in 0..geom.dims[1] {
                for x in 0..geom.dims[0] {
                    let p = geom.point(x, y, z);
                    let q = match field {
                        Some(f) => std::array::from_fn(|a| p[a] + f.disp[i][a]),
                        None => p,
                    };
                    if anatomy.tissue(q) == Tissue::Lung {
                        for a in 0..3 {
                            sum[a] += p[a];
                        }
                        n += 1;
                    }
                    i += 1;
                }
            }
        }
        sum.map(|s| s / n.max(1) as f64)
    };
    let diag = lung_centroid(None);
    for _ in 0..4 {
        let field = DeformationField::from_control_grid(&grid, geom, translation)?;
        let rt = lung_centroid(Some(&field));
        let err: [f64; 3] = std::array::from_fn(|a| rt[a] - (diag[a] - translation[a]));
        if err.iter().all(|e| e.abs() < 0.05) {
            break;
        }
        for c in &mut grid.coeffs {
            for a in 0..3 {
                c[a] += err[a];
            }
        }
    }
    let peak = DeformationField::from_control_grid(&grid, geom, [0.0; 3])?.max_magnitude();
    if peak > spec.misalignment_max_mm {
        let s = spec.misalignment_max_mm / peak;
        for c in &mut grid.coeffs {
            for a in 0..3 {
                c[a] *= s;
            }
        }
    }
    let field = DeformationField::from_control_grid(&grid, geom, translation)?;
    Ok((field, translation))
}

fn add_noise(g: &mut Grid3<f32>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    for v in g.data_mut() {
        *v += n.sample(rng) as f32;
    }
}

/// Generates one case; a pure function of `(spec, seed)`.
pub fn generate_case(spec: &PhantomSpec, seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = sample_anatomy(spec, &mut rng)?;
    let (true_field, translation_mm) = sample_warp(spec, &anatomy, &mut rng)?;
    let geom = spec.geometry();

    let mut rtct = render_ct(spec, &anatomy, Some(&true_field));
    let mut diag_ct = render_ct(spec, &anatomy, None);
    add_noise(&mut rtct.data, spec.ct_noise_sigma, &mut rng);
    add_noise(&mut diag_ct.data, spec.ct_noise_sigma, &mut rng);

    let mut pet_raw = render(&geom, None, |p| anatomy.pet_value(spec, p));
    add_noise(&mut pet_raw, spec.pet_noise_sigma, &mut rng);
    let sigma_vox = spec.spacing.map(|s| spec.pet_blur_sigma_mm / s);
    let pet_data = gaussian_blur(&pet_raw, sigma_vox);
    let pet = Volume::new(pet_data, spec.spacing, [0.0; 3], Modality::Pet)?;

    let gtv = render(&geom, Some(&true_field), |p| anatomy.gtv.contains(p) as u8 as f64).map(|v| v as u8);
    let gtv_mask = Mask::new(gtv, spec.spacing, [0.0; 3])?;
    if gtv_mask.is_empty() {
        return Err(Error::InvalidSpec("GTV rendered empty".into()));
    }
    Ok(PhantomCase {
        rtct,
        diag_ct,
        pet,
        gtv_mask,
        true_field,
        translation_mm,
        anatomy,
    })
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Writes one case's volumes under `dir` and returns its manifest entry.
pub fn write_case(case: &PhantomCase, id: &str, dir: &Path) -> Result<CaseManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = |n: &str| -> PathBuf { dir.join(format!("{n}.raw")) };
    volio::save_volume(&case.rtct, &path("rtct"))?;
    volio::save_volume(&case.diag_ct, &path("diag_ct"))?;
    volio::save_volume(&case.pet, &path("pet"))?;
    volio::save_mask(&case.gtv_mask, &path("gtv"))?;
    case.true_field.save(&dir.join("true_field"))?;
    write_json(&dir.join("anatomy.json"), &case.anatomy)?;
    Ok(CaseManifest {
        case_id: id.to_string(),
        rtct: path("rtct"),
        diag_ct: path("diag_ct"),
        pet: path("pet"),
        gtv_mask: path("gtv"),
        registered_pet: None,
    })
}

/// Generates `n_cases` cases with seeds `seed + i` into `out_dir` and
/// writes `dataset.json` plus `phantom_spec.json`; returns the manifest path.
pub fn generate_dataset(spec: &PhantomSpec, n_cases: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if n_cases == 0 {
        return Err(Error::InvalidSpec("n_cases must be at least 1".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("phantom_spec.json"), spec)?;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let id = case_id(i);
        let case = generate_case(spec, seed.wrapping_add(i as u64))?;
        cases.push(write_case(&case, &id, &out_dir.join(&id))?);
        log::info!("generated {id}");
    }
    let manifest_path = out_dir.join("dataset.json");
    DatasetManifest { cases }.save(&manifest_path)?;
    Ok(manifest_path)
}
