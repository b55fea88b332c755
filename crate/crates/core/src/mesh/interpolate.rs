//! Piecewise linear transfer of nodal fields between meshes.

use super::{Mesh, PointLocator};
use crate::error::{Error, Result};
use crate::field::ConductivityField;

/// Distance (m) a destination node may lie outside the source mesh.
pub const DEFAULT_INTERPOLATION_TOLERANCE: f64 = 1e-3;

pub fn interpolate_field(src: &Mesh, field: &ConductivityField, dst: &Mesh) -> Result<ConductivityField> {
    interpolate_field_with_tolerance(src, field, dst, DEFAULT_INTERPOLATION_TOLERANCE)
}

pub fn interpolate_field_with_tolerance(
    src: &Mesh,
    field: &ConductivityField,
    dst: &Mesh,
    tolerance: f64,
) -> Result<ConductivityField> {
    if field.len() != src.node_count() {
        return Err(Error::Contract(format!(
            "field has {} values but the source mesh has {} nodes",
            field.len(),
            src.node_count()
        )));
    }
    if src.id() == dst.id() {
        return Ok(field.clone());
    }
    let loc = PointLocator::new(src);
    let values = dst
        .nodes()
        .iter()
        .map(|p| {
            let (e, lam) = loc.locate_with_tolerance(p, tolerance)?;
            Ok(loc.evaluate(field, e, &lam))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConductivityField(values))
}
