//! Edge diffraction over a corner visibility graph.
//!
//! Diffraction points are the free cells diagonally outside convex building
//! corners. Sound reaching a shadowed pixel is routed source -> corner(s) ->
//! pixel along unobstructed legs; the extra length of that route over the
//! straight line is the detour that drives Maekawa attenuation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{
    cell_distance, direct_level, line_of_sight, per_pixel, spreading_level, to_db, ScenarioConfig,
};
use crate::raster::{Cell, DbMap, LayoutMask, DB_MIN};

/// Barrier attenuation `10 log10(3 + 20 N)` with Fresnel number `N = 2 δ / λ`.
pub fn maekawa_attenuation_db(detour_m: f64, wavelength_m: f64) -> f64 {
    let fresnel = 2.0 * detour_m / wavelength_m;
    10.0 * (3.0 + 20.0 * fresnel).log10()
}

#[derive(Clone, Debug)]
pub struct CornerGraph {
    nodes: Vec<Cell>,
    /// Symmetric adjacency with centre-to-centre distances in cells.
    edges: Vec<Vec<(usize, f64)>>,
}

impl CornerGraph {
    pub fn build(mask: &LayoutMask) -> Self {
        let nodes = corner_nodes(mask);
        let mut edges = vec![Vec::new(); nodes.len()];
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                if line_of_sight(mask, nodes[i], nodes[j]) {
                    let d = cell_distance(nodes[i], nodes[j]);
                    edges[i].push((j, d));
                    edges[j].push((i, d));
                }
            }
        }
        Self { nodes, edges }
    }

    pub fn nodes(&self) -> &[Cell] {
        &self.nodes
    }

    pub fn edges(&self, node: usize) -> &[(usize, f64)] {
        &self.edges[node]
    }

    /// Shortest unobstructed source -> corner distance (cells) for every node,
    /// `f64::INFINITY` where unreachable.
    pub fn source_distances(&self, mask: &LayoutMask) -> Vec<f64> {
        let src = mask.source();
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        for (i, &node) in self.nodes.iter().enumerate() {
            if line_of_sight(mask, src, node) {
                dist[i] = cell_distance(src, node);
                heap.push(State { cost: dist[i], node: i });
            }
        }
        while let Some(State { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &(next, w) in &self.edges[node] {
                let c = cost + w;
                if c < dist[next] {
                    dist[next] = c;
                    heap.push(State { cost: c, node: next });
                }
            }
        }
        dist
    }

    /// Shortest corner route length (cells) from the source to `target`, given
    /// the precomputed source distances.
    fn route_to(&self, mask: &LayoutMask, src_dist: &[f64], target: Cell) -> Option<f64> {
        let mut best = f64::INFINITY;
        for (i, &node) in self.nodes.iter().enumerate() {
            let d = src_dist[i];
            if !d.is_finite() {
                continue;
            }
            let total = d + cell_distance(node, target);
            if total < best && line_of_sight(mask, node, target) {
                best = total;
            }
        }
        best.is_finite().then_some(best)
    }
}

#[derive(PartialEq)]
struct State {
    cost: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn corner_nodes(mask: &LayoutMask) -> Vec<Cell> {
    let n = mask.size() as isize;
    let mut is_node = vec![false; mask.cells().len()];
    for r in 0..n {
        for c in 0..n {
            if !mask.is_building(r as usize, c as usize) {
                continue;
            }
            for (dr, dc) in [(-1, -1), (-1, 1), (1, -1), (1, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= n || nc >= n {
                    continue;
                }
                // Convex corner: the diagonal cell and both cells flanking it are free.
                if !mask.is_building_at(nr, nc)
                    && !mask.is_building_at(r + dr, c)
                    && !mask.is_building_at(r, c + dc)
                {
                    is_node[(nr * n + nc) as usize] = true;
                }
            }
        }
    }
    is_node
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| (i / n as usize, i % n as usize))
        .collect()
}

/// Extra path length (meters) of the best corner route to `target` over the
/// direct line. `Some(0.0)` for visible targets, `None` when no route exists.
pub fn diffraction_detour(mask: &LayoutMask, graph: &CornerGraph, target: Cell) -> Option<f64> {
    let src = mask.source();
    if line_of_sight(mask, src, target) {
        return Some(0.0);
    }
    let dist = graph.source_distances(mask);
    graph
        .route_to(mask, &dist, target)
        .map(|route| (route - cell_distance(src, target)) * mask.cell_size_m())
}

/// Baseline levels where visible; shadowed pixels reached over corners get
/// spreading over the route length minus Maekawa attenuation.
pub fn simulate_diffraction(mask: &LayoutMask, cfg: &ScenarioConfig) -> DbMap {
    let graph = CornerGraph::build(mask);
    let src_dist = graph.source_distances(mask);
    let src = mask.source();
    let cell_m = mask.cell_size_m();
    per_pixel(mask, |cell| {
        if mask.is_building(cell.0, cell.1) {
            return DB_MIN;
        }
        if line_of_sight(mask, src, cell) {
            return direct_level(mask, cell, cfg);
        }
        match graph.route_to(mask, &src_dist, cell) {
            Some(route) => {
                let detour_m = (route - cell_distance(src, cell)) * cell_m;
                let level = spreading_level(route * cell_m, cfg)
                    - maekawa_attenuation_db(detour_m, cfg.wavelength_m);
                to_db(level)
            }
            None => DB_MIN,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_layouts::with_rects;
    use super::super::{free_field_level, simulate_baseline, Scenario};
    use super::*;

    #[test]
    fn maekawa_closed_forms() {
        assert!((maekawa_attenuation_db(0.0, 0.68) - 10.0 * 3f64.log10()).abs() < 1e-12);
        assert!((maekawa_attenuation_db(0.34, 0.68) - 10.0 * 23f64.log10()).abs() < 1e-12);
        assert!((maekawa_attenuation_db(0.34, 0.68) - 13.617).abs() < 1e-3);
    }

    /// Exhaustive enumeration of every simple corner path (no Dijkstra).
    fn brute_route(mask: &LayoutMask, nodes: &[Cell], target: Cell) -> Option<f64> {
        fn dfs(
            mask: &LayoutMask,
            nodes: &[Cell],
            target: Cell,
            at: usize,
            len: f64,
            used: &mut Vec<bool>,
            best: &mut f64,
        ) {
            if line_of_sight(mask, nodes[at], target) {
                *best = best.min(len + cell_distance(nodes[at], target));
            }
            for next in 0..nodes.len() {
                if !used[next] && line_of_sight(mask, nodes[at], nodes[next]) {
                    used[next] = true;
                    let l = len + cell_distance(nodes[at], nodes[next]);
                    dfs(mask, nodes, target, next, l, used, best);
                    used[next] = false;
                }
            }
        }
        let src = mask.source();
        let mut best = f64::INFINITY;
        for first in 0..nodes.len() {
            if line_of_sight(mask, src, nodes[first]) {
                let mut used = vec![false; nodes.len()];
                used[first] = true;
                let l = cell_distance(src, nodes[first]);
                dfs(mask, nodes, target, first, l, &mut used, &mut best);
            }
        }
        best.is_finite().then_some(best)
    }

    #[test]
    fn detour_matches_exhaustive_enumeration() {
        let mask = with_rects(12, (6, 2), &[(2, 5, 7, 1), (4, 8, 1, 3)]);
        let graph = CornerGraph::build(&mask);
        assert!(!graph.nodes().is_empty());
        for r in 0..12 {
            for c in 0..12 {
                if mask.is_building(r, c) || line_of_sight(&mask, mask.source(), (r, c)) {
                    continue;
                }
                let got = diffraction_detour(&mask, &graph, (r, c));
                let want = brute_route(&mask, graph.nodes(), (r, c))
                    .map(|route| route - cell_distance(mask.source(), (r, c)));
                match (got, want) {
                    (Some(g), Some(w)) => assert!((g - w).abs() < 1e-9, "({r},{c}) {g} vs {w}"),
                    (None, None) => {}
                    other => panic!("({r},{c}): {other:?}"),
                }
            }
        }
    }

    #[test]
    fn single_tip_detour() {
        // Wall in column 8, rows 0..=7; its tip corner node on the source side is (8, 7).
        let mask = with_rects(16, (4, 4), &[(0, 8, 8, 1)]);
        let graph = CornerGraph::build(&mask);
        let (src, tip, target) = ((4, 4), (8, 7), (10, 10));
        assert!(graph.nodes().contains(&tip));
        assert!(!line_of_sight(&mask, src, target));
        assert!(line_of_sight(&mask, src, tip) && line_of_sight(&mask, tip, target));
        let delta = diffraction_detour(&mask, &graph, target).unwrap();
        let expect = cell_distance(src, tip) + cell_distance(tip, target) - cell_distance(src, target);
        assert!((delta - expect).abs() < 1e-12, "{delta} vs {expect}");
    }

    #[test]
    fn visible_and_enclosed_targets() {
        let mask = with_rects(10, (1, 1), &[(4, 4, 1, 3), (6, 4, 1, 3), (5, 4, 1, 1), (5, 6, 1, 1)]);
        let graph = CornerGraph::build(&mask);
        assert_eq!(diffraction_detour(&mask, &graph, (1, 5)), Some(0.0));
        // (5,5) is a free pocket walled in on all sides.
        assert!(!mask.is_building(5, 5));
        assert_eq!(diffraction_detour(&mask, &graph, (5, 5)), None);
    }

    #[test]
    fn dominates_baseline_and_matches_on_empty() {
        let cfg = ScenarioConfig::for_scenario(Scenario::Diffraction);
        let empty = LayoutMask::empty(16, (8, 8)).unwrap();
        assert_eq!(simulate_diffraction(&empty, &cfg), simulate_baseline(&empty, &cfg));
        let mask = with_rects(24, (12, 12), &[(4, 15, 10, 2), (16, 3, 3, 9)]);
        let d = simulate_diffraction(&mask, &cfg);
        let b = simulate_baseline(&mask, &cfg);
        let mut softened = 0;
        for (x, y) in d.values().iter().zip(b.values()) {
            assert!(x >= y);
            if x > y {
                softened += 1;
            }
        }
        assert!(softened > 0);
    }

    #[test]
    fn shadow_level_uses_route_and_attenuation() {
        let cfg = ScenarioConfig::for_scenario(Scenario::Diffraction);
        let mask = with_rects(16, (8, 3), &[(4, 7, 9, 1)]);
        let d = simulate_diffraction(&mask, &cfg);
        let graph = CornerGraph::build(&mask);
        let target = (8, 12);
        let delta = diffraction_detour(&mask, &graph, target).unwrap();
        let route = cell_distance((8, 3), target) + delta;
        let expect = free_field_level(route, &cfg) - maekawa_attenuation_db(delta, cfg.wavelength_m);
        assert!((d.get(8, 12) as f64 - expect).abs() < 1e-4);
    }
}
