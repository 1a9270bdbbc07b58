//! Bilinear sampling kernel shared by the standalone sampling op and the
//! multi-scale deformable attention op.
//!
//! A normalized coordinate `p` in `[0, 1]` maps to pixel coordinate
//! `p * extent - 0.5`, so `(i + 0.5) / extent` lands exactly on cell `i`.
//! Cells outside the map contribute zero.

/// One in-range neighbour of a sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner {
    /// Flat cell index `iy * width + ix`.
    pub cell: usize,
    pub weight: f64,
    /// d(weight)/d(normalized x).
    pub dx: f64,
    /// d(weight)/d(normalized y).
    pub dy: f64,
}

/// Up to four in-range corners with their interpolation weights.
///
/// The floor split makes gradients right-continuous at cell boundaries.
pub(crate) fn corners(x: f64, y: f64, height: usize, width: usize) -> ([Corner; 4], usize) {
    let px = x * width as f64 - 0.5;
    let py = y * height as f64 - 0.5;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (sx, sy) = (width as f64, height as f64);
    let candidates = [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1.0, 1.0, fx * fy, fy, fx),
    ];
    let mut out = [Corner {
        cell: 0,
        weight: 0.0,
        dx: 0.0,
        dy: 0.0,
    }; 4];
    let mut n = 0;
    for (ox, oy, w, dwx, dwy) in candidates {
        let cx = x0 + ox;
        let cy = y0 + oy;
        if cx < 0.0 || cy < 0.0 || cx >= sx || cy >= sy {
            continue;
        }
        out[n] = Corner {
            cell: cy as usize * width + cx as usize,
            weight: w,
            dx: dwx * sx,
            dy: dwy * sy,
        };
        n += 1;
    }
    (out, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_center_hits_single_cell() {
        let (c, n) = corners(0.25, 0.75, 2, 2);
        let total: f64 = c[..n].iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let hit: Vec<_> = c[..n].iter().filter(|c| c.weight > 0.0).collect();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].cell, 2);
    }

    #[test]
    fn far_outside_has_no_corners() {
        let (_, n) = corners(-3.0, 0.5, 4, 4);
        assert_eq!(n, 0);
    }
}
