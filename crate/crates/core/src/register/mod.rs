//! Diagnostic PET to planning CT alignment.
//!
//! The diagnostic CT is registered onto the RTCT (translation from lung mass
//! centres, then coarse-to-fine B-spline FFD) and the resulting field is
//! applied to the PET, which shares the diagnostic CT's frame.

pub mod bspline;
pub mod ffd;
pub mod field;
pub mod lung;

use std::path::Path;

pub use bspline::{cubic_weights, ControlGrid, GridGeometry};
pub use ffd::{register_ffd, FfdProblem, PyramidLevel, RegDiagnostics, RegParams, Similarity};
pub use field::{warp_mask, warp_volume, DeformationField};
pub use lung::{lung_mask, mass_center, rigid_init, RigidInit};

use crate::error::{write_json, Result};
use crate::volio::{self, CaseManifest, Interp, Volume};

/// Tensor-product cubic B-spline displacement at a physical point.
pub fn bspline_displacement(grid: &ControlGrid, point: [f64; 3]) -> Result<[f64; 3]> {
    grid.displacement(point)
}

#[derive(Debug, Clone)]
pub struct RegistrationOutcome {
    pub registered_pet: Volume,
    pub field: DeformationField,
    pub diagnostics: RegDiagnostics,
}

/// Aligns the case's diagnostic PET to its RTCT.
///
/// When `out` is given, the registered PET is written there, the field and
/// diagnostics beside it (`<out>_field`, `<out>_diagnostics.json`), and the
/// manifest entry is updated to point at the new PET.
pub fn register_case(
    case: &mut CaseManifest,
    params: &RegParams,
    out: Option<&Path>,
) -> Result<RegistrationOutcome> {
    let rtct = volio::load_volume(&case.rtct)?;
    let diag_ct = volio::load_volume(&case.diag_ct)?;
    let pet = volio::load_volume(&case.pet)?;
    let init = rigid_init(&rtct, &diag_ct)?;
    let (field, mut diagnostics) = register_ffd(&rtct, &diag_ct, init.translation, params)?;
    diagnostics.rigid_fallback = init.fallback;
    let registered_pet = warp_volume(&pet, &field, Interp::Trilinear, 0.0)?;
    if let Some(out) = out {
        volio::save_volume(&registered_pet, out)?;
        let (raw, _) = volio::volume_paths(out);
        let stem = raw.to_string_lossy().trim_end_matches(".raw").to_string();
        field.save(Path::new(&format!("{stem}_field")))?;
        write_json(Path::new(&format!("{stem}_diagnostics.json")), &diagnostics)?;
        case.registered_pet = Some(raw);
    }
    Ok(RegistrationOutcome {
        registered_pet,
        field,
        diagnostics,
    })
}
