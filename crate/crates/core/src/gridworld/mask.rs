// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cell masks and 8-connected morphological padding.

use std::collections::BTreeSet;

use crate::metrics::BoundingBox;

/// Sorted set of cell indices `y·G + x`.
pub type CellSet = BTreeSet<usize>;

pub fn box_cells(b: &BoundingBox, grid_size: usize) -> CellSet {
    let mut out = CellSet::new();
    for y in b.y_min..=b.y_max.min(grid_size - 1) {
        for x in b.x_min..=b.x_max.min(grid_size - 1) {
            out.insert(y * grid_size + x);
        }
    }
    out
}

fn neighbors(cell: usize, g: usize) -> impl Iterator<Item = Option<usize>> {
    let (x, y) = ((cell % g) as isize, (cell / g) as isize);
    (-1..=1).flat_map(move |dy| {
        (-1..=1).map(move |dx| {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= g as isize || ny >= g as isize {
                None
            } else {
                Some(ny as usize * g + nx as usize)
            }
        })
    })
}

/// One step of 8-connected dilation, clipped to the grid.
pub fn dilate(mask: &CellSet, g: usize) -> CellSet {
    mask.iter()
        .flat_map(|&c| neighbors(c, g).flatten())
        .collect()
}

/// One step of 8-connected erosion; cells outside the grid count as background.
pub fn erode(mask: &CellSet, g: usize) -> CellSet {
    mask.iter()
        .copied()
        .filter(|&c| neighbors(c, g).all(|n| n.is_some_and(|n| mask.contains(&n))))
        .collect()
}

/// Pads a token mask: dilation for `padding > 0`, erosion for `padding < 0`.
pub fn mask_to_tokens(mask: &CellSet, padding: i32, grid_size: usize) -> CellSet {
    let mut out = mask.clone();
    for _ in 0..padding.unsigned_abs() {
        out = if padding > 0 {
            dilate(&out, grid_size)
        } else {
            erode(&out, grid_size)
        };
    }
    out
}
