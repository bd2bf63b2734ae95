//! Coarse-to-fine free-form deformation registration.
//!
//! Each pyramid level optimizes the coefficients of a cubic B-spline control
//! grid to minimize `dissimilarity(fixed, moving o (x + d(x))) +
//! bending_weight * bending_energy`, by gradient descent with a backtracking
//! line search. The solution of a level seeds the next, finer control grid by
//! exact subdivision.

use serde::{Deserialize, Serialize};

use super::bspline::{AxisBasis, ControlGrid, GridGeometry};
use super::field::DeformationField;
use crate::error::{Error, Result};
use crate::grid::{Grid3, Padding};
use crate::volio::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    /// Normalized cross-correlation; the objective uses `1 - NCC`.
    Ncc,
    /// Mean squared difference divided by the fixed image variance.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    /// Block-averaging factor applied to both images.
    pub downsample: usize,
    /// Isotropic control-node spacing in mm.
    pub control_spacing_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    /// Ordered coarse to fine.
    pub levels: Vec<PyramidLevel>,
    pub similarity: Similarity,
    /// Bending energy is a per-node mean in mm^-2, tiny next to `1 - NCC`,
    /// hence the large default.
    pub bending_weight: f64,
    pub max_steps_per_level: usize,
    /// Initial largest per-coefficient move of a step, in mm.
    pub step_mm: f64,
    /// Line search gives up below this step.
    pub min_step_mm: f64,
}

impl Default for RegParams {
    fn default() -> Self {
        Self {
            levels: vec![
                PyramidLevel { downsample: 4, control_spacing_mm: 32.0 },
                PyramidLevel { downsample: 2, control_spacing_mm: 16.0 },
                PyramidLevel { downsample: 1, control_spacing_mm: 8.0 },
            ],
            similarity: Similarity::Ncc,
            bending_weight: 100.0,
            max_steps_per_level: 100,
            step_mm: 2.0,
            min_step_mm: 1e-3,
        }
    }
}

impl RegParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig("registration needs at least one level".into()));
        }
        for w in self.levels.windows(2) {
            if w[1].downsample > w[0].downsample || w[1].control_spacing_mm > w[0].control_spacing_mm {
                return Err(Error::InvalidConfig("pyramid levels must be ordered coarse to fine".into()));
            }
        }
        if self.levels.iter().any(|l| l.downsample == 0 || !(l.control_spacing_mm > 0.0)) {
            return Err(Error::InvalidConfig("pyramid level with zero factor or spacing".into()));
        }
        if !(self.bending_weight >= 0.0) || !(self.step_mm > 0.0) || !(self.min_step_mm > 0.0) {
            return Err(Error::InvalidConfig("bending weight and step sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub downsample: usize,
    pub control_spacing_mm: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub objective: Vec<f64>,
    /// True when the line search collapsed before the step budget ran out.
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegDiagnostics {
    pub translation: [f64; 3],
    pub rigid_fallback: bool,
    pub levels: Vec<LevelDiagnostics>,
}

/// Block-average downsampling by `factor` on every axis. Trailing voxels that
/// do not fill a block are dropped so every output voxel centre stays inside
/// the input extent.
pub fn downsample(vol: &Volume, factor: usize) -> Volume {
    if factor <= 1 {
        return vol.clone();
    }
    let d = vol.dims();
    let out_dims: [usize; 3] = std::array::from_fn(|a| (d[a] / factor).max(1));
    let f: [usize; 3] = std::array::from_fn(|a| factor.min(d[a]));
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    let data = Grid3::from_fn(out_dims, |x, y, z| {
        let mut s = 0.0f64;
        for dz in 0..f[2] {
            for dy in 0..f[1] {
                for dx in 0..f[0] {
                    s += vol.data.get(x * f[0] + dx, y * f[1] + dy, z * f[2] + dz) as f64;
                }
            }
        }
        (s * inv) as f32
    });
    let spacing = std::array::from_fn(|a| vol.spacing[a] * f[a] as f64);
    let origin = std::array::from_fn(|a| vol.origin[a] + (f[a] as f64 - 1.0) / 2.0 * vol.spacing[a]);
    Volume { data, spacing, origin, modality: vol.modality }
}

/// One level's objective over control coefficients.
pub struct FfdProblem<'a> {
    fixed: Vec<f64>,
    geom: GridGeometry,
    moving: &'a Volume,
    offset: [f64; 3],
    template: ControlGrid,
    bases: [AxisBasis; 3],
    similarity: Similarity,
    bending_weight: f64,
}

impl<'a> FfdProblem<'a> {
    /// `grid` fixes the control geometry (its coefficients are ignored);
    /// `offset` is a constant displacement added to the spline field.
    pub fn new(
        fixed: &Volume,
        moving: &'a Volume,
        grid: &ControlGrid,
        offset: [f64; 3],
        similarity: Similarity,
        bending_weight: f64,
    ) -> Result<Self> {
        let geom = DeformationField::of_volume(fixed);
        let bases = grid.axis_bases(&geom)?;
        Ok(Self {
            fixed: fixed.data.data().iter().map(|&v| v as f64).collect(),
            geom,
            moving,
            offset,
            template: grid.clone(),
            bases,
            similarity,
            bending_weight,
        })
    }

    fn grid_with(&self, coeffs: &[[f64; 3]]) -> ControlGrid {
        ControlGrid { coeffs: coeffs.to_vec(), ..self.template.clone() }
    }

    pub fn objective(&self, coeffs: &[[f64; 3]]) -> f64 {
        self.evaluate(coeffs, false).0
    }

    pub fn objective_grad(&self, coeffs: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
        self.evaluate(coeffs, true)
    }

    fn evaluate(&self, coeffs: &[[f64; 3]], want_grad: bool) -> (f64, Vec<[f64; 3]>) {
        let grid = self.grid_with(coeffs);
        let disp = grid.dense(&self.bases);
        let g = &self.geom;
        let m_origin = self.moving.origin;
        let m_spacing = self.moving.spacing;
        let n = g.len();
        let mut warped = Vec::with_capacity(n);
        let mut slope = if want_grad { Vec::with_capacity(n) } else { Vec::new() };
        let mut i = 0;
        for z in 0..g.dims[2] {
            for y in 0..g.dims[1] {
                for x in 0..g.dims[0] {
                    let p = g.point(x, y, z);
                    let d = disp[i];
                    let v: [f64; 3] = std::array::from_fn(|a| {
                        (p[a] + d[a] + self.offset[a] - m_origin[a]) / m_spacing[a]
                    });
                    let (val, gv) = self.moving.data.sample_linear_grad(v, Padding::Edge);
                    warped.push(val);
                    if want_grad {
                        slope.push([gv[0] / m_spacing[0], gv[1] / m_spacing[1], gv[2] / m_spacing[2]]);
                    }
                    i += 1;
                }
            }
        }
        let (sim, dsim) = match self.similarity {
            Similarity::Ncc => ncc_objective(&self.fixed, &warped, want_grad),
            Similarity::Mse => mse_objective(&self.fixed, &warped, want_grad),
        };
        let (bend, bend_grad) = if self.bending_weight > 0.0 {
            let (e, g) = grid.bending_energy_grad();
            (e, Some(g))
        } else {
            (0.0, None)
        };
        let value = sim + self.bending_weight * bend;
        if !want_grad {
            return (value, Vec::new());
        }
        let per_voxel: Vec<[f64; 3]> = dsim
            .iter()
            .zip(&slope)
            .map(|(ds, s)| [ds * s[0], ds * s[1], ds * s[2]])
            .collect();
        let mut grad = grid.dense_adjoint(&self.bases, &per_voxel);
        if let Some(bg) = bend_grad {
            for (g, b) in grad.iter_mut().zip(bg) {
                for q in 0..3 {
                    g[q] += self.bending_weight * b[q];
                }
            }
        }
        (value, grad)
    }
}

/// `1 - NCC(f, m)` and its derivative with respect to each `m_i`.
fn ncc_objective(f: &[f64], m: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
    let n = f.len() as f64;
    let mf = f.iter().sum::<f64>() / n;
    let mm = m.iter().sum::<f64>() / n;
    let (mut cov, mut vf, mut vm) = (0.0, 0.0, 0.0);
    for (a, b) in f.iter().zip(m) {
        let (da, db) = (a - mf, b - mm);
        cov += da * db;
        vf += da * da;
        vm += db * db;
    }
    cov /= n;
    vf /= n;
    vm /= n;
    let denom = (vf * vm).sqrt();
    if denom < 1e-20 {
        return (1.0, vec![0.0; if want_grad { f.len() } else { 0 }]);
    }
    let ncc = cov / denom;
    if !want_grad {
        return (1.0 - ncc, Vec::new());
    }
    let grad = f
        .iter()
        .zip(m)
        .map(|(a, b)| -((a - mf) / denom - ncc * (b - mm) / vm) / n)
        .collect();
    (1.0 - ncc, grad)
}

fn mse_objective(f: &[f64], m: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
    let n = f.len() as f64;
    let mf = f.iter().sum::<f64>() / n;
    let var = (f.iter().map(|a| (a - mf).powi(2)).sum::<f64>() / n).max(1e-12);
    let value = f.iter().zip(m).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / (n * var);
    let grad = if want_grad {
        f.iter().zip(m).map(|(a, b)| 2.0 * (b - a) / (n * var)).collect()
    } else {
        Vec::new()
    };
    (value, grad)
}

fn optimize_level(problem: &FfdProblem, grid: &mut ControlGrid, params: &RegParams) -> (Vec<f64>, bool) {
    let (mut value, mut grad) = problem.objective_grad(&grid.coeffs);
    let mut history = vec![value];
    let mut step = params.step_mm;
    let mut converged = false;
    for _ in 0..params.max_steps_per_level {
        let gmax = grad.iter().flat_map(|g| g.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        if !(gmax > 0.0) || !gmax.is_finite() {
            converged = true;
            break;
        }
        let mut accepted = None;
        while step >= params.min_step_mm {
            let scale = step / gmax;
            let trial: Vec<[f64; 3]> = grid
                .coeffs
                .iter()
                .zip(&grad)
                .map(|(c, g)| [c[0] - scale * g[0], c[1] - scale * g[1], c[2] - scale * g[2]])
                .collect();
            let (tv, tg) = problem.objective_grad(&trial);
            if tv < value {
                accepted = Some((trial, tv, tg));
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((c, v, g)) => {
                grid.coeffs = c;
                value = v;
                grad = g;
                history.push(v);
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    (history, converged)
}

/// Registers `moving` onto `fixed`, starting from the constant displacement
/// `-translation` (see [`super::RigidInit`]). Returns the dense
/// fixed-to-moving field on the fixed grid.
pub fn register_ffd(
    fixed: &Volume,
    moving: &Volume,
    translation: [f64; 3],
    params: &RegParams,
) -> Result<(DeformationField, RegDiagnostics)> {
    params.validate()?;
    if fixed.spacing != moving.spacing {
        return Err(Error::ShapeMismatch(format!(
            "registration inputs must share spacing: {:?} vs {:?}",
            fixed.spacing, moving.spacing
        )));
    }
    let full = DeformationField::of_volume(fixed);
    let offset = translation.map(|t| -t);
    let mut diagnostics = RegDiagnostics {
        translation,
        ..Default::default()
    };
    let mut grid: Option<ControlGrid> = None;
    for level in &params.levels {
        let spacing = [level.control_spacing_mm; 3];
        let mut current = match &grid {
            None => ControlGrid::covering(&full, spacing)?,
            Some(prev) => prev.refine(&full, spacing)?,
        };
        let f = downsample(fixed, level.downsample);
        let m = downsample(moving, level.downsample);
        let problem = FfdProblem::new(&f, &m, &current, offset, params.similarity, params.bending_weight)?;
        let (objective, converged) = optimize_level(&problem, &mut current, params);
        log::debug!(
            "ffd level x{} @ {} mm: {:.5} -> {:.5} in {} steps",
            level.downsample,
            level.control_spacing_mm,
            objective[0],
            objective[objective.len() - 1],
            objective.len() - 1
        );
        diagnostics.levels.push(LevelDiagnostics {
            downsample: level.downsample,
            control_spacing_mm: level.control_spacing_mm,
            objective,
            converged,
        });
        grid = Some(current);
    }
    let grid = grid.expect("at least one level");
    let field = DeformationField::from_control_grid(&grid, full, offset)?;
    Ok((field, diagnostics))
}
