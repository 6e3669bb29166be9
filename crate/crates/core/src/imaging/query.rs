use crate::error::{Error, Result};

/// Continuous query coordinates in `[-1, 1]^2`, ordered `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGrid {
    pub coords: Vec<[f64; 2]>,
    /// Extent of one output cell along `(y, x)`.
    pub cell: [f64; 2],
    pub scale: f64,
    /// `Some((h, w))` for dense row-major grids, `None` for sparse samples.
    pub shape: Option<(usize, usize)>,
}

impl QueryGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// A sub-range of the queries, sharing cell and scale.
    pub fn chunk(&self, start: usize, end: usize) -> QueryGrid {
        QueryGrid {
            coords: self.coords[start..end].to_vec(),
            cell: self.cell,
            scale: self.scale,
            shape: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell[0] > 0.0 && self.cell[1] > 0.0) {
            return Err(Error::arg("query cell extents must be positive"));
        }
        if let Some(bad) = self
            .coords
            .iter()
            .find(|c| !(c[0].abs() <= 1.0 && c[1].abs() <= 1.0))
        {
            return Err(Error::arg(format!("query coordinate {bad:?} outside [-1,1]^2")));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn cell_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Dense cell-center lattice over an `h_out x w_out` output.
pub fn make_query_grid(h_out: usize, w_out: usize, r: f64) -> Result<QueryGrid> {
    if h_out == 0 || w_out == 0 {
        return Err(Error::arg(format!("query grid {h_out}x{w_out} must be non-empty")));
    }
    let mut coords = Vec::with_capacity(h_out * w_out);
    for i in 0..h_out {
        let y = cell_center(i, h_out);
        for j in 0..w_out {
            coords.push([y, cell_center(j, w_out)]);
        }
    }
    Ok(QueryGrid {
        coords,
        cell: [2.0 / h_out as f64, 2.0 / w_out as f64],
        scale: r,
        shape: Some((h_out, w_out)),
    })
}

/// Index of the lattice cell containing normalized coordinate `u` over `n` cells.
#[inline]
pub fn nearest_cell(u: f64, n: usize) -> usize {
    let idx = ((u + 1.0) * 0.5 * n as f64).floor();
    (idx.max(0.0) as usize).min(n - 1)
}
