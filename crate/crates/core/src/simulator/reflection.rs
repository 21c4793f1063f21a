//! Specular reflections by the image-source method.
//!
//! Walls are maximal runs of building-cell edges that face a free cell. A
//! reflection path is valid when the unfolded line from the image to the
//! receiver hits the wall inside its extent and every leg between the source,
//! the bounce cells and the receiver is unobstructed. The bounce cell is the
//! free cell in front of the wall at the hit point.

use super::{
    cell_distance, direct_level, energetic_sum, line_of_sight, per_pixel, spreading_level,
    ScenarioConfig,
};
use crate::raster::{Cell, DbMap, LayoutMask, DB_MAX, DB_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WallAxis {
    /// The wall lies on the line `x = line` (constant column boundary).
    Vertical,
    /// The wall lies on the line `y = line` (constant row boundary).
    Horizontal,
}

/// Axis-aligned exposed wall. Coordinates are in cell units with cell
/// `(r, c)` spanning `[c, c+1] x [r, r+1]`; the extent along the wall is the
/// half-open interval `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WallSegment {
    pub axis: WallAxis,
    pub line: i64,
    pub lo: i64,
    pub hi: i64,
    /// +1 or -1: direction from the wall into free space along the wall normal.
    pub normal: i64,
}

/// Continuous point `(x, y)` in cell units.
pub(crate) type Point = (f64, f64);

#[inline]
pub(crate) fn centre(cell: Cell) -> Point {
    (cell.1 as f64 + 0.5, cell.0 as f64 + 0.5)
}

impl WallSegment {
    #[inline]
    fn perp(&self, p: Point) -> f64 {
        match self.axis {
            WallAxis::Vertical => p.0,
            WallAxis::Horizontal => p.1,
        }
    }

    #[inline]
    fn along(&self, p: Point) -> f64 {
        match self.axis {
            WallAxis::Vertical => p.1,
            WallAxis::Horizontal => p.0,
        }
    }

    /// Strictly on the free side of the wall's line.
    #[inline]
    pub fn in_front(&self, p: Point) -> bool {
        (self.perp(p) - self.line as f64) * self.normal as f64 > 0.0
    }

    #[inline]
    pub fn mirror(&self, p: Point) -> Point {
        let l = self.line as f64;
        match self.axis {
            WallAxis::Vertical => (2.0 * l - p.0, p.1),
            WallAxis::Horizontal => (p.0, 2.0 * l - p.1),
        }
    }

    /// Where the segment from `image` (behind) to `receiver` (in front)
    /// crosses the wall line, if that point lies within the wall's extent.
    /// Returns the along-wall coordinate.
    #[inline]
    pub fn hit(&self, image: Point, receiver: Point) -> Option<f64> {
        let (pi, pr) = (self.perp(image), self.perp(receiver));
        let t = (self.line as f64 - pi) / (pr - pi);
        let a = self.along(image) + t * (self.along(receiver) - self.along(image));
        (a >= self.lo as f64 && a < self.hi as f64).then_some(a)
    }

    /// Free cell in front of the wall at along-coordinate `a`.
    #[inline]
    pub fn bounce_cell(&self, a: f64) -> Cell {
        let perp_idx = if self.normal > 0 { self.line } else { self.line - 1 };
        let along_idx = (a.floor() as i64).clamp(self.lo, self.hi - 1);
        match self.axis {
            WallAxis::Vertical => (along_idx as usize, perp_idx as usize),
            WallAxis::Horizontal => (perp_idx as usize, along_idx as usize),
        }
    }

    fn point_at(&self, a: f64) -> Point {
        match self.axis {
            WallAxis::Vertical => (self.line as f64, a),
            WallAxis::Horizontal => (a, self.line as f64),
        }
    }
}

/// Unit-length exposed edges, unmerged.
pub(crate) fn exposed_unit_edges(mask: &LayoutMask) -> Vec<WallSegment> {
    let n = mask.size() as isize;
    let mut out = Vec::new();
    for r in 0..n {
        for c in 0..n {
            if !mask.is_building(r as usize, c as usize) {
                continue;
            }
            let free = |rr: isize, cc: isize| {
                rr >= 0 && cc >= 0 && rr < n && cc < n && !mask.is_building(rr as usize, cc as usize)
            };
            let (r, c) = (r as i64, c as i64);
            if free(r as isize, c as isize - 1) {
                out.push(WallSegment { axis: WallAxis::Vertical, line: c, lo: r, hi: r + 1, normal: -1 });
            }
            if free(r as isize, c as isize + 1) {
                out.push(WallSegment { axis: WallAxis::Vertical, line: c + 1, lo: r, hi: r + 1, normal: 1 });
            }
            if free(r as isize - 1, c as isize) {
                out.push(WallSegment { axis: WallAxis::Horizontal, line: r, lo: c, hi: c + 1, normal: -1 });
            }
            if free(r as isize + 1, c as isize) {
                out.push(WallSegment { axis: WallAxis::Horizontal, line: r + 1, lo: c, hi: c + 1, normal: 1 });
            }
        }
    }
    out
}

/// Exposed walls with collinear contiguous unit edges merged.
pub fn exposed_walls(mask: &LayoutMask) -> Vec<WallSegment> {
    let mut edges = exposed_unit_edges(mask);
    edges.sort_by_key(|w| (w.axis, w.line, w.normal, w.lo));
    let mut merged: Vec<WallSegment> = Vec::new();
    for e in edges {
        match merged.last_mut() {
            Some(m) if m.axis == e.axis && m.line == e.line && m.normal == e.normal && m.hi == e.lo => {
                m.hi = e.hi;
            }
            _ => merged.push(e),
        }
    }
    merged
}

/// Second-order image chain: reflect off `first`, then `second`.
struct Chain {
    first: WallSegment,
    second: WallSegment,
    image1: Point,
    image2: Point,
}

pub fn simulate_reflection(mask: &LayoutMask, cfg: &ScenarioConfig) -> DbMap {
    let walls = exposed_walls(mask);
    let src_cell = mask.source();
    let src = centre(src_cell);
    let cell_m = mask.cell_size_m();

    let first_order: Vec<(WallSegment, Point)> = walls
        .iter()
        .filter(|w| w.in_front(src))
        .map(|w| (*w, w.mirror(src)))
        .collect();
    let chains: Vec<Chain> = if cfg.reflection_order >= 2 {
        first_order
            .iter()
            .flat_map(|&(w1, i1)| {
                walls
                    .iter()
                    .filter(move |w2| **w2 != w1 && w2.in_front(i1))
                    .map(move |&w2| Chain { first: w1, second: w2, image1: i1, image2: w2.mirror(i1) })
            })
            .collect()
    } else {
        Vec::new()
    };

    per_pixel(mask, |cell| {
        if mask.is_building(cell.0, cell.1) {
            return DB_MIN;
        }
        let target = centre(cell);
        let direct = line_of_sight(mask, src_cell, cell).then(|| direct_level(mask, cell, cfg));
        let mut levels: Vec<f64> = Vec::new();
        if direct.is_some() {
            levels.push(spreading_level(cell_distance(src_cell, cell) * cell_m, cfg));
        }
        for &(w, image) in &first_order {
            if !w.in_front(target) {
                continue;
            }
            let Some(a) = w.hit(image, target) else { continue };
            let bounce = w.bounce_cell(a);
            if line_of_sight(mask, src_cell, bounce) && line_of_sight(mask, bounce, cell) {
                let len = dist(image, target) * cell_m;
                levels.push(spreading_level(len, cfg) - cfg.reflection_loss_db);
            }
        }
        for ch in &chains {
            if !ch.second.in_front(target) {
                continue;
            }
            let Some(a2) = ch.second.hit(ch.image2, target) else { continue };
            let r2 = ch.second.point_at(a2);
            if !ch.first.in_front(r2) {
                continue;
            }
            let Some(a1) = ch.first.hit(ch.image1, r2) else { continue };
            let b1 = ch.first.bounce_cell(a1);
            let b2 = ch.second.bounce_cell(a2);
            if line_of_sight(mask, src_cell, b1)
                && line_of_sight(mask, b1, b2)
                && line_of_sight(mask, b2, cell)
            {
                let len = dist(ch.image2, target) * cell_m;
                levels.push(spreading_level(len, cfg) - 2.0 * cfg.reflection_loss_db);
            }
        }
        combine(&levels, direct)
    })
}

#[inline]
fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Energetic total, clamped to the dB range; never below the direct-path
/// level (guards the last-ulp rounding of the log/exp round trip).
pub(crate) fn combine(levels: &[f64], direct: Option<f32>) -> f32 {
    if levels.is_empty() {
        return DB_MIN;
    }
    let total = (energetic_sum(levels) as f32).clamp(DB_MIN, DB_MAX);
    match direct {
        Some(d) => total.max(d),
        None => total,
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_layouts::with_rects;
    use super::super::{simulate_baseline, Scenario};
    use super::*;

    #[test]
    fn walls_merge_into_runs() {
        let mask = with_rects(8, (0, 0), &[(2, 3, 3, 2)]);
        let walls = exposed_walls(&mask);
        assert_eq!(walls.len(), 4);
        assert!(walls.contains(&WallSegment { axis: WallAxis::Vertical, line: 3, lo: 2, hi: 5, normal: -1 }));
        assert!(walls.contains(&WallSegment { axis: WallAxis::Horizontal, line: 5, lo: 3, hi: 5, normal: 1 }));
    }

    #[test]
    fn empty_layout_equals_baseline() {
        let mask = LayoutMask::empty(16, (8, 8)).unwrap();
        let mut cfg = ScenarioConfig::for_scenario(Scenario::Reflection);
        cfg.reflection_order = 2;
        assert_eq!(simulate_reflection(&mask, &cfg), simulate_baseline(&mask, &cfg));
    }

    /// Brute force over unmerged unit edges: every single bounce and every
    /// ordered pair of bounces, checked geometrically from scratch.
    fn oracle(mask: &LayoutMask, cfg: &ScenarioConfig, cell: Cell) -> f64 {
        let edges = exposed_unit_edges(mask);
        let s = mask.source();
        let sp = centre(s);
        let tp = centre(cell);
        let mut lin = 0.0;
        let mut any = false;
        let lvl = |len: f64, bounces: f64| {
            cfg.source_level_db - 20.0 * (len.max(cfg.r0_m) / cfg.r0_m).log10()
                - bounces * cfg.reflection_loss_db
        };
        if line_of_sight(mask, s, cell) {
            lin += 10f64.powf(lvl(cell_distance(s, cell), 0.0) / 10.0);
            any = true;
        }
        for e in &edges {
            if e.in_front(sp) && e.in_front(tp) {
                let img = e.mirror(sp);
                if let Some(a) = e.hit(img, tp) {
                    let b = e.bounce_cell(a);
                    if line_of_sight(mask, s, b) && line_of_sight(mask, b, cell) {
                        lin += 10f64.powf(lvl(dist(img, tp), 1.0) / 10.0);
                        any = true;
                    }
                }
            }
        }
        if cfg.reflection_order >= 2 {
            for e1 in &edges {
                for e2 in &edges {
                    if e1 == e2 || !e1.in_front(sp) {
                        continue;
                    }
                    let i1 = e1.mirror(sp);
                    // Unit edges of the same merged wall are one reflector.
                    let same_wall = e1.axis == e2.axis && e1.line == e2.line && e1.normal == e2.normal;
                    if same_wall || !e2.in_front(i1) || !e2.in_front(tp) {
                        continue;
                    }
                    let i2 = e2.mirror(i1);
                    let Some(a2) = e2.hit(i2, tp) else { continue };
                    let r2 = e2.point_at(a2);
                    if !e1.in_front(r2) {
                        continue;
                    }
                    let Some(a1) = e1.hit(i1, r2) else { continue };
                    let (b1, b2) = (e1.bounce_cell(a1), e2.bounce_cell(a2));
                    if line_of_sight(mask, s, b1) && line_of_sight(mask, b1, b2) && line_of_sight(mask, b2, cell) {
                        lin += 10f64.powf(lvl(dist(i2, tp), 2.0) / 10.0);
                        any = true;
                    }
                }
            }
        }
        if any {
            (10.0 * lin.log10()).clamp(0.0, 100.0)
        } else {
            0.0
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mask = with_rects(16, (8, 8), &[(3, 11, 7, 2), (12, 2, 2, 6), (1, 2, 3, 3)]);
        for order in [1, 2] {
            let mut cfg = ScenarioConfig::for_scenario(Scenario::Reflection);
            cfg.reflection_order = order;
            let map = simulate_reflection(&mask, &cfg);
            for r in 0..16 {
                for c in 0..16 {
                    if mask.is_building(r, c) {
                        assert_eq!(map.get(r, c), 0.0);
                        continue;
                    }
                    let want = oracle(&mask, &cfg, (r, c));
                    assert!(
                        (map.get(r, c) as f64 - want).abs() < 1e-4,
                        "order {order} ({r},{c}): {} vs {want}",
                        map.get(r, c)
                    );
                }
            }
        }
    }

    #[test]
    fn wall_beside_los_pixel_brightens() {
        let mask = with_rects(16, (8, 4), &[(2, 10, 12, 1)]);
        let cfg = ScenarioConfig::for_scenario(Scenario::Reflection);
        let refl = simulate_reflection(&mask, &cfg);
        let base = simulate_baseline(&mask, &cfg);
        assert!(line_of_sight(&mask, (8, 4), (8, 8)));
        assert!(refl.get(8, 8) > base.get(8, 8));
        assert!((refl.get(8, 8) as f64 - oracle(&mask, &cfg, (8, 8))).abs() < 1e-4);
        for (a, b) in refl.values().iter().zip(base.values()) {
            assert!(a >= b);
        }
    }
}
