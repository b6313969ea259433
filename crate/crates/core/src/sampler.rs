//! Semi-local region extraction around a continuous query coordinate.
//!
//! HR pixel indices map into [0, 1]^2 normalized coordinates shared with
//! the feature map (half-pixel centers: cell p of P has center
//! (p + 0.5) / P). An M x M grid of half-integer cell offsets around the
//! query is resolved to concrete feature cells by nearest-center lookup,
//! which reduces to a floor rule with clamping at the borders. Region
//! entries are exact copies of feature cells; no value interpolation
//! happens here.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Value};

/// Normalized image-plane coordinate; x runs along width, y along height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCoord {
    pub x: f64,
    pub y: f64,
}

impl NormCoord {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() || !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y)
        {
            return Err(Error::InvalidArgument(format!(
                "coordinate ({x}, {y}) outside [0,1]"
            )));
        }
        Ok(NormCoord { x, y })
    }
}

/// Feature-cell size in normalized units plus the query's sub-cell offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    /// Cell extent along x: inverse of the column count.
    pub cell_w: f64,
    /// Cell extent along y: inverse of the row count.
    pub cell_h: f64,
    /// Query offset from its nearest cell center, in cell units,
    /// each component in [-0.5, 0.5].
    pub rel_offset: (f64, f64),
}

/// M x M grid of query-relative sample points.
#[derive(Debug, Clone)]
pub struct OffsetGrid {
    pub m: usize,
    /// Row-major; points[r][c] pairs the r-th y offset with the c-th x offset.
    pub points: Vec<(f64, f64)>,
}

/// M x M x D block of latent codes around a query, plus the geometry the
/// decoder needs to center its final window.
#[derive(Debug, Clone)]
pub struct SemiLocalRegion<S: Scalar> {
    pub values: Tensor<S>,
    pub geometry: CellGeometry,
}

/// Half-pixel-centered normalized coordinate of an HR output pixel.
pub fn hr_to_norm(row: usize, col: usize, out_h: usize, out_w: usize) -> Result<NormCoord> {
    if row >= out_h || col >= out_w {
        return Err(Error::InvalidArgument(format!(
            "pixel ({row}, {col}) outside {out_h}x{out_w}"
        )));
    }
    NormCoord::new(
        (col as f64 + 0.5) / out_w as f64,
        (row as f64 + 0.5) / out_h as f64,
    )
}

/// The M symmetric half-integer offsets {-M/2+0.5, ..., M/2-0.5}.
fn offsets(m: usize) -> impl Iterator<Item = f64> {
    (0..m).map(move |t| t as f64 + 0.5 - m as f64 / 2.0)
}

/// Builds the M x M sample grid around `center`, stepping by whole cells.
pub fn offset_grid(center: NormCoord, m: usize, cell_w: f64, cell_h: f64) -> Result<OffsetGrid> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "region size M must be even and >= 2, got {m}"
        )));
    }
    let mut points = Vec::with_capacity(m * m);
    for ty in offsets(m) {
        for tx in offsets(m) {
            points.push((center.x + cell_w * tx, center.y + cell_h * ty));
        }
    }
    Ok(OffsetGrid { m, points })
}

/// Nearest-center cell index along one axis: floor rule, ties toward the
/// larger index, clamped to the border.
pub fn nearest_cell(coord: f64, cells: usize) -> usize {
    let raw = (coord * cells as f64).floor() as i64;
    raw.clamp(0, cells as i64 - 1) as usize
}

fn geometry_for(center: NormCoord, rows: usize, cols: usize) -> CellGeometry {
    let cx = nearest_cell(center.x, cols);
    let cy = nearest_cell(center.y, rows);
    CellGeometry {
        cell_w: 1.0 / cols as f64,
        cell_h: 1.0 / rows as f64,
        rel_offset: (
            center.x * cols as f64 - (cx as f64 + 0.5),
            center.y * rows as f64 - (cy as f64 + 0.5),
        ),
    }
}

/// Resolves grid points to concrete (row, col) cells of a P x Q map.
pub fn resolve_cells(grid: &OffsetGrid, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    grid.points
        .iter()
        .map(|&(x, y)| (nearest_cell(y, rows), nearest_cell(x, cols)))
        .collect()
}

/// Plain (inference-path) region extraction: copies cells out of the map.
pub fn extract_region<S: Scalar>(
    center: NormCoord,
    m: usize,
    psi: &FeatureMap<S>,
) -> Result<SemiLocalRegion<S>> {
    let (rows, cols, depth) = (psi.rows(), psi.cols(), psi.depth());
    let grid = offset_grid(center, m, 1.0 / cols as f64, 1.0 / rows as f64)?;
    let cells = resolve_cells(&grid, rows, cols);
    let mut data = Vec::with_capacity(m * m * depth);
    for (r, c) in cells {
        let base = (r * cols + c) * depth;
        data.extend_from_slice(&psi.values.data[base..base + depth]);
    }
    Ok(SemiLocalRegion {
        values: Tensor::from_vec(&[m, m, depth], data)?,
        geometry: geometry_for(center, rows, cols),
    })
}

/// Training-path region extraction: gathers from the feature-map node so
/// gradients flow back into the backbone. Gather indices are constants.
pub fn extract_region_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    center: NormCoord,
    m: usize,
    psi: Value,
) -> Result<(Value, CellGeometry)> {
    let shape = g.shape(psi).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("feature map", &[0, 0, 0], &shape));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let grid = offset_grid(center, m, 1.0 / cols as f64, 1.0 / rows as f64)?;
    let cells = resolve_cells(&grid, rows, cols);
    let region = g.gather_cells(psi, &cells, m)?;
    Ok((region, geometry_for(center, rows, cols)))
}
