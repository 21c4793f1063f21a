//! Desk-scale propagation model: free-field spreading with hard shadows,
//! Maekawa diffraction around building corners, and image-source
//! reflections off axis-aligned walls.
//!
//! Distances are measured between cell centres and scaled by
//! [`LayoutMask::cell_size_m`]. Every pixel is computed independently, so the
//! row-parallel loops below give bitwise-identical output regardless of
//! thread count.

mod diffraction;
mod los;
mod reflection;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub use diffraction::{diffraction_detour, maekawa_attenuation_db, simulate_diffraction, CornerGraph};
pub use los::{line_of_sight, supercover_cells, walk_supercover};
pub use reflection::{exposed_walls, simulate_reflection, WallSegment};

use crate::metrics::{RegionLabel, RegionMasks};
use crate::raster::{Cell, DbMap, LayoutMask, DB_MAX, DB_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Baseline,
    Diffraction,
    Reflection,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Baseline, Scenario::Diffraction, Scenario::Reflection];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::Diffraction => "diffraction",
            Scenario::Reflection => "reflection",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Scenario::Baseline),
            "diffraction" => Ok(Scenario::Diffraction),
            "reflection" => Ok(Scenario::Reflection),
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown scenario {0:?} (expected baseline, diffraction or reflection)")]
    UnknownScenario(String),
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub source_level_db: f64,
    pub reflection_order: u32,
    pub reflection_loss_db: f64,
    pub wavelength_m: f64,
    pub r0_m: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Baseline,
            source_level_db: 95.0,
            reflection_order: 1,
            reflection_loss_db: 1.0,
            wavelength_m: 0.68,
            r0_m: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self {
            scenario,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.source_level_db > DB_MIN as f64 && self.source_level_db <= DB_MAX as f64) {
            return Err(SimError::InvalidConfig(format!(
                "source level {} dB outside ({DB_MIN}, {DB_MAX}]",
                self.source_level_db
            )));
        }
        if self.scenario == Scenario::Reflection && !(1..=2).contains(&self.reflection_order) {
            return Err(SimError::InvalidConfig(format!(
                "reflection order {} not in {{1, 2}}",
                self.reflection_order
            )));
        }
        if !(self.wavelength_m > 0.0 && self.r0_m > 0.0 && self.reflection_loss_db >= 0.0) {
            return Err(SimError::InvalidConfig(
                "wavelength and reference distance must be positive, reflection loss non-negative"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Unclamped spreading level `L_src - 20 log10(max(r, r0) / r0)`.
#[inline]
pub(crate) fn spreading_level(r_m: f64, cfg: &ScenarioConfig) -> f64 {
    cfg.source_level_db - 20.0 * (r_m.max(cfg.r0_m) / cfg.r0_m).log10()
}

/// Free-field level at distance `r_m`, floored at `DB_MIN`.
pub fn free_field_level(r_m: f64, cfg: &ScenarioConfig) -> f64 {
    spreading_level(r_m, cfg).max(DB_MIN as f64)
}

/// Energetic sum `10 log10(sum 10^(L/10))` of incoherent arrivals.
pub fn energetic_sum(levels_db: &[f64]) -> f64 {
    let total: f64 = levels_db.iter().map(|l| 10f64.powf(l / 10.0)).sum();
    10.0 * total.log10()
}

/// Distance between two cell centres in cells.
#[inline]
pub(crate) fn cell_distance(a: Cell, b: Cell) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

#[inline]
pub(crate) fn to_db(v: f64) -> f32 {
    (v as f32).clamp(DB_MIN, DB_MAX)
}

/// Evaluate `f` for every pixel, row-parallel.
pub(crate) fn per_pixel(mask: &LayoutMask, f: impl Fn(Cell) -> f32 + Sync) -> DbMap {
    let n = mask.size();
    let values: Vec<f32> = (0..n)
        .into_par_iter()
        .flat_map_iter(|r| {
            let f = &f;
            (0..n).map(move |c| f((r, c)))
        })
        .collect();
    DbMap::new(n, n, values).expect("simulator levels are clamped to range")
}

/// Level at a pixel with a direct path: the baseline value.
#[inline]
pub(crate) fn direct_level(mask: &LayoutMask, cell: Cell, cfg: &ScenarioConfig) -> f32 {
    to_db(free_field_level(
        cell_distance(mask.source(), cell) * mask.cell_size_m(),
        cfg,
    ))
}

/// Hard-shadow model: free field where the source is visible, silence elsewhere.
pub fn simulate_baseline(mask: &LayoutMask, cfg: &ScenarioConfig) -> DbMap {
    let src = mask.source();
    per_pixel(mask, |cell| {
        if mask.is_building(cell.0, cell.1) || !line_of_sight(mask, src, cell) {
            DB_MIN
        } else {
            direct_level(mask, cell, cfg)
        }
    })
}

/// Run the regime selected by `cfg.scenario`.
pub fn simulate(mask: &LayoutMask, cfg: &ScenarioConfig) -> Result<DbMap, SimError> {
    cfg.validate()?;
    Ok(match cfg.scenario {
        Scenario::Baseline => simulate_baseline(mask, cfg),
        Scenario::Diffraction => simulate_diffraction(mask, cfg),
        Scenario::Reflection => simulate_reflection(mask, cfg),
    })
}

/// Building / LoS / NLoS partition seen from the layout's source.
pub fn build_region_masks(mask: &LayoutMask) -> RegionMasks {
    let n = mask.size();
    let src = mask.source();
    let labels = (0..n)
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..n).map(move |c| {
                if mask.is_building(r, c) {
                    RegionLabel::Building
                } else if line_of_sight(mask, src, (r, c)) {
                    RegionLabel::Los
                } else {
                    RegionLabel::Nlos
                }
            })
        })
        .collect();
    RegionMasks::new(n, labels)
}


#[cfg(test)]
mod tests {
    use super::test_layouts::with_rects;
    use super::*;

    #[test]
    fn free_field_examples() {
        let cfg = ScenarioConfig::default();
        assert_eq!(free_field_level(1.0, &cfg), 95.0);
        assert_eq!(free_field_level(0.0, &cfg), 95.0);
        assert!((free_field_level(10.0, &cfg) - 75.0).abs() < 1e-12);
        assert_eq!(free_field_level(1e6, &cfg), 0.0);
    }

    #[test]
    fn energetic_doubling() {
        assert!((energetic_sum(&[60.0, 60.0]) - 63.0103).abs() < 1e-4);
        assert!((energetic_sum(&[60.0, 60.0]) - 60.0 - 10.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn scenario_parsing_and_validation() {
        assert_eq!("Reflection".parse::<Scenario>().unwrap(), Scenario::Reflection);
        assert!("echo".parse::<Scenario>().is_err());
        let mut cfg = ScenarioConfig::for_scenario(Scenario::Reflection);
        cfg.reflection_order = 0;
        assert!(cfg.validate().is_err());
        cfg.reflection_order = 2;
        assert!(cfg.validate().is_ok());
        cfg.source_level_db = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn baseline_source_and_symmetry() {
        let mask = LayoutMask::empty(16, (8, 8)).unwrap();
        let cfg = ScenarioConfig::default();
        let map = simulate_baseline(&mask, &cfg);
        assert_eq!(map.get(8, 8), 95.0);
        // Radial symmetry about the source on the in-bounds overlap.
        for dr in -7i64..=7 {
            for dc in -7i64..=7 {
                let at = |r: i64, c: i64| map.get((8 + r) as usize, (8 + c) as usize);
                let v = at(dr, dc);
                assert_eq!(v, at(dc, dr));
                assert_eq!(v, at(-dr, dc));
                assert_eq!(v, at(dr, -dc));
            }
        }
    }

    #[test]
    fn baseline_shadow_matches_per_pixel_oracle() {
        let mask = with_rects(16, (8, 8), &[(4, 11, 8, 1)]);
        let cfg = ScenarioConfig::default();
        let map = simulate_baseline(&mask, &cfg);
        let mut shadow = 0;
        for r in 0..16 {
            for c in 0..16 {
                let blocked = mask.is_building(r, c) || !line_of_sight(&mask, (8, 8), (r, c));
                assert_eq!(map.get(r, c) == DB_MIN, blocked, "({r},{c})");
                if blocked && !mask.is_building(r, c) {
                    shadow += 1;
                    assert!(c >= 11, "shadow must lie behind the wall face");
                }
            }
        }
        assert!(shadow > 0);
    }

    #[test]
    fn region_masks_partition() {
        let mask = with_rects(8, (1, 1), &[(3, 4, 3, 1)]);
        let regions = build_region_masks(&mask);
        let mut nlos_oracle = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                if mask.is_building(r, c) {
                    assert_eq!(regions.label(r, c), RegionLabel::Building);
                    continue;
                }
                let blocked = supercover_cells((1, 1), (r, c))
                    .iter()
                    .any(|&(rr, cc)| mask.is_building(rr, cc));
                if blocked {
                    nlos_oracle.push((r, c));
                }
            }
        }
        let nlos: Vec<_> = regions.cells(RegionLabel::Nlos).collect();
        assert_eq!(nlos, nlos_oracle);
        assert!(!nlos.is_empty());
        let total = regions.count(RegionLabel::Building)
            + regions.count(RegionLabel::Los)
            + regions.count(RegionLabel::Nlos);
        assert_eq!(total, 64);
    }

    #[test]
    fn empty_mask_all_los() {
        let regions = build_region_masks(&LayoutMask::empty(8, (4, 4)).unwrap());
        assert_eq!(regions.count(RegionLabel::Los), 64);
    }

    #[test]
    fn deterministic() {
        let mask = with_rects(32, (16, 16), &[(2, 2, 5, 7), (20, 18, 6, 3), (10, 22, 3, 8)]);
        for s in Scenario::ALL {
            let mut cfg = ScenarioConfig::for_scenario(s);
            cfg.reflection_order = 2;
            let a = simulate(&mask, &cfg).unwrap();
            let b = simulate(&mask, &cfg).unwrap();
            assert_eq!(a.values(), b.values());
        }
    }
}
