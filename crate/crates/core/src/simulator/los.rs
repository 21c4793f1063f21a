//! Supercover grid traversal.
//!
//! Points are cell centres. Working in doubled coordinates puts every centre
//! on odd integers and every grid line on even integers, so the whole walk is
//! exact integer arithmetic. A cell belongs to the traversal when the segment
//! meets its closed square: every cell whose interior the segment crosses,
//! plus both side cells whenever the segment passes exactly through a lattice
//! vertex. The latter closes the diagonal gap between two buildings that
//! touch only at a corner.

use crate::raster::{Cell, LayoutMask};

/// Visit the cells strictly between `a` and `b` in traversal order. The
/// visitor returns `false` to stop early; the function returns `false` iff it
/// was stopped.
pub fn walk_supercover(a: Cell, b: Cell, mut visit: impl FnMut(Cell) -> bool) -> bool {
    let (ar, ac) = (a.0 as i64, a.1 as i64);
    let (br, bc) = (b.0 as i64, b.1 as i64);
    let dx = bc - ac;
    let dy = br - ar;
    let sx = dx.signum();
    let sy = dy.signum();
    let adx = dx.abs();
    let ady = dy.abs();

    // Doubled-coordinate distance from the start centre to the next grid line
    // along each axis is 1, then 2 per further line. Crossing "times" are
    // tx = nx / adx and ty = ny / ady; compare by cross-multiplication.
    let mut nx: i64 = 1;
    let mut ny: i64 = 1;
    let (mut r, mut c) = (ar, ac);

    loop {
        if r == br && c == bc {
            return true;
        }
        if adx == 0 {
            r += sy;
        } else if ady == 0 {
            c += sx;
        } else {
            let lhs = nx * ady;
            let rhs = ny * adx;
            if lhs < rhs {
                c += sx;
                nx += 2;
            } else if rhs < lhs {
                r += sy;
                ny += 2;
            } else {
                // Exact vertex crossing: both side cells touch the segment.
                if !visit((r as usize, (c + sx) as usize)) {
                    return false;
                }
                if !visit(((r + sy) as usize, c as usize)) {
                    return false;
                }
                c += sx;
                r += sy;
                nx += 2;
                ny += 2;
            }
        }
        if r == br && c == bc {
            return true;
        }
        if !visit((r as usize, c as usize)) {
            return false;
        }
    }
}

/// Cells strictly between `a` and `b`.
pub fn supercover_cells(a: Cell, b: Cell) -> Vec<Cell> {
    let mut out = Vec::new();
    walk_supercover(a, b, |cell| {
        out.push(cell);
        true
    });
    out
}

/// True iff no building lies on the supercover of the segment between the
/// centres of `a` and `b` (endpoints excluded).
pub fn line_of_sight(mask: &LayoutMask, a: Cell, b: Cell) -> bool {
    walk_supercover(a, b, |(r, c)| !mask.is_building(r, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact closed-square/segment intersection in doubled coordinates.
    fn touches(a: Cell, b: Cell, cell: Cell) -> bool {
        let p0 = (2 * a.1 as i64 + 1, 2 * a.0 as i64 + 1);
        let p1 = (2 * b.1 as i64 + 1, 2 * b.0 as i64 + 1);
        let lo = (2 * cell.1 as i64, 2 * cell.0 as i64);
        let hi = (lo.0 + 2, lo.1 + 2);
        // Parametric interval [t0, t1] as fractions over a common denominator.
        let mut t0 = (0i64, 1i64);
        let mut t1 = (1i64, 1i64);
        for axis in 0..2 {
            let (s, d) = if axis == 0 {
                (p0.0, p1.0 - p0.0)
            } else {
                (p0.1, p1.1 - p0.1)
            };
            let (l, h) = if axis == 0 { (lo.0, hi.0) } else { (lo.1, hi.1) };
            if d == 0 {
                if s < l || s > h {
                    return false;
                }
                continue;
            }
            let (ta, tb) = if d > 0 {
                ((l - s, d), (h - s, d))
            } else {
                ((h - s, d), (l - s, d))
            };
            let norm = |f: (i64, i64)| if f.1 < 0 { (-f.0, -f.1) } else { f };
            let ta = norm(ta);
            let tb = norm(tb);
            let gt = |x: (i64, i64), y: (i64, i64)| x.0 * y.1 > y.0 * x.1;
            if gt(ta, t0) {
                t0 = ta;
            }
            if gt(t1, tb) {
                t1 = tb;
            }
        }
        t0.0 * t1.1 <= t1.0 * t0.1
    }

    fn oracle(a: Cell, b: Cell) -> Vec<Cell> {
        let (r0, r1) = (a.0.min(b.0), a.0.max(b.0));
        let (c0, c1) = (a.1.min(b.1), a.1.max(b.1));
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                if (r, c) != a && (r, c) != b && touches(a, b, (r, c)) {
                    out.push((r, c));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn matches_closed_square_oracle_exhaustively() {
        for a in (0..7).flat_map(|r| (0..7).map(move |c| (r, c))) {
            for b in (0..7).flat_map(|r| (0..7).map(move |c| (r, c))) {
                let mut got = supercover_cells(a, b);
                got.sort();
                assert_eq!(got, oracle(a, b), "a={a:?} b={b:?}");
            }
        }
    }

    #[test]
    fn empty_mask_always_visible() {
        let m = LayoutMask::empty(8, (4, 4)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert!(line_of_sight(&m, (0, 7), (r, c)));
            }
        }
    }

    #[test]
    fn wall_blocks() {
        let mut cells = vec![0u8; 64];
        for r in 0..8 {
            cells[r * 8 + 4] = 1;
        }
        let m = LayoutMask::new(8, cells, (3, 1)).unwrap();
        assert!(!line_of_sight(&m, (3, 1), (3, 6)));
        assert!(!line_of_sight(&m, (3, 1), (0, 7)));
        assert!(line_of_sight(&m, (3, 1), (7, 3)));
        // Edge-adjacent cells have nothing in between.
        assert!(line_of_sight(&m, (3, 3), (3, 4)));
        assert!(line_of_sight(&m, (2, 3), (3, 3)));
        // Diagonal neighbours share a vertex; the wall cell beside it blocks.
        assert!(!line_of_sight(&m, (3, 3), (4, 4)));
    }

    #[test]
    fn diagonal_corner_does_not_leak() {
        // Buildings at (0,1) and (1,0) touch only at the vertex the diagonal crosses.
        let mut cells = vec![0u8; 9];
        cells[1] = 1;
        cells[3] = 1;
        let m = LayoutMask::new(3, cells, (0, 0)).unwrap();
        assert!(!line_of_sight(&m, (0, 0), (2, 2)));
    }
}
