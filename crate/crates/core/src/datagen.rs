//! Procedural layouts, corpus construction through the simulator, and
//! train/val/test splits.
//!
//! Corpus directory:
//!
//! ```text
//! manifest.json
//! layouts/{id}.nfr
//! targets/{scenario}/{id}.nfr
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io_util::write_atomic;
use crate::raster::{load_raster, normalize, save_raster, DbMap, LayoutMask, NormMap, RasterError};
use crate::rng::stream_rng;
use crate::simulator::{simulate, Scenario, ScenarioConfig, SimError};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Grid sizes accepted for corpora and served models.
pub const SUPPORTED_SIZES: [usize; 4] = [32, 64, 128, 256];
pub const MAX_REJECTIONS: usize = 1000;
const SPLIT_STREAM: u64 = u64::MAX;
const PARTIAL_FILE: &str = "build.partial.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("layout {index}: no valid placement after {MAX_REJECTIONS} rejections")]
    Placement { index: usize },
    #[error("{path}: {source}")]
    Raster { path: String, source: RasterError },
    #[error("{0}")]
    Sim(#[from] SimError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("scenario {scenario} is not part of this corpus")]
    MissingScenario { scenario: Scenario },
}

fn io_err(path: &Path, e: impl ToString) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub grid_size: usize,
    /// Inclusive range of buildings per layout.
    pub building_count: (usize, usize),
    /// Inclusive side-length range in cells.
    pub building_size: (usize, usize),
    /// Chebyshev radius around the source kept free of buildings.
    pub source_clearance: usize,
    pub seed: u64,
    pub samples: usize,
    pub scenarios: Vec<Scenario>,
    pub reflection_order: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            building_count: (3, 12),
            building_size: (3, 20),
            source_clearance: 3,
            seed: 0,
            samples: 500,
            scenarios: Scenario::ALL.to_vec(),
            reflection_order: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !SUPPORTED_SIZES.contains(&self.grid_size) {
            return bad(format!("grid size {} not in {SUPPORTED_SIZES:?}", self.grid_size));
        }
        let (lo, hi) = self.building_count;
        if lo > hi {
            return bad(format!("building count range {lo}..={hi} is empty"));
        }
        let (slo, shi) = self.building_size;
        if slo == 0 || slo > shi || shi > self.grid_size {
            return bad(format!("building size range {slo}..={shi} invalid for grid {}", self.grid_size));
        }
        if 2 * self.source_clearance + 1 > self.grid_size {
            return bad(format!("clearance {} does not fit the grid", self.source_clearance));
        }
        if self.scenarios.is_empty() {
            return bad("at least one scenario is required".into());
        }
        self.scenario_config(Scenario::Reflection).validate()?;
        Ok(())
    }

    pub fn scenario_config(&self, scenario: Scenario) -> ScenarioConfig {
        ScenarioConfig { reflection_order: self.reflection_order, ..ScenarioConfig::for_scenario(scenario) }
    }

    pub fn source(&self) -> (usize, usize) {
        (self.grid_size / 2, self.grid_size / 2)
    }
}

/// Layout `index` of the corpus: a random number of axis-aligned rectangles,
/// each redrawn until it stays out of the source clearance.
pub fn gen_layout(cfg: &GenConfig, index: usize) -> Result<LayoutMask, DataError> {
    cfg.validate()?;
    let n = cfg.grid_size;
    let src = cfg.source();
    let clr = cfg.source_clearance;
    let mut rng = stream_rng(cfg.seed, index as u64);
    let count = rng.random_range(cfg.building_count.0..=cfg.building_count.1);
    let mut cells = vec![0u8; n * n];
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_REJECTIONS {
            let h = rng.random_range(cfg.building_size.0..=cfg.building_size.1);
            let w = rng.random_range(cfg.building_size.0..=cfg.building_size.1);
            let r0 = rng.random_range(0..=n - h);
            let c0 = rng.random_range(0..=n - w);
            // Reject if the rectangle intersects the clearance square.
            let clear_rows = src.0.saturating_sub(clr)..=src.0 + clr;
            let clear_cols = src.1.saturating_sub(clr)..=src.1 + clr;
            let rows_hit = r0 <= *clear_rows.end() && r0 + h > *clear_rows.start();
            let cols_hit = c0 <= *clear_cols.end() && c0 + w > *clear_cols.start();
            if rows_hit && cols_hit {
                continue;
            }
            for r in r0..r0 + h {
                cells[r * n + c0..r * n + c0 + w].fill(1);
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(DataError::Placement { index });
        }
    }
    LayoutMask::new(n, cells, src).map_err(|e| DataError::Raster { path: format!("layout {index}"), source: e })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub layout: String,
    pub targets: BTreeMap<Scenario, String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: GenConfig,
    pub split_fractions: [f64; 3],
    pub split_rule: String,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.samples.iter().filter(move |s| s.split == split).map(|s| s.id.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable manifest") + "\n"
    }
}

/// Sizes of (train, val, test): floor 80 %, floor 10 %, remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Split tag for every sample index.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let (train, val, _) = split_sizes(n);
    let mut tags = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        tags[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    tags
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

fn layout_rel(id: &str) -> String {
    format!("layouts/{id}.nfr")
}

fn target_rel(scenario: Scenario, id: &str) -> String {
    format!("targets/{scenario}/{id}.nfr")
}

fn sample_complete(root: &Path, id: &str, scenarios: &[Scenario]) -> bool {
    let ok = |rel: String| load_raster(&root.join(rel)).is_ok();
    ok(layout_rel(id)) && scenarios.iter().all(|&s| ok(target_rel(s, id)))
}

/// Generate, simulate and persist every sample, then write the manifest.
///
/// A build interrupted before the manifest exists can be rerun with the same
/// config; samples whose files already parse are kept.
pub fn build_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let cfg_json = serde_json::to_string(cfg).expect("serializable config");
    let partial = root.join(PARTIAL_FILE);
    let resumable = fs::read_to_string(&partial).map(|s| s == cfg_json).unwrap_or(false);
    let _ = fs::remove_file(root.join(MANIFEST_FILE));
    write_atomic(&partial, cfg_json.as_bytes()).map_err(|e| io_err(&partial, e))?;

    (0..cfg.samples).into_par_iter().try_for_each(|index| -> Result<(), DataError> {
        let id = sample_id(index);
        if resumable && sample_complete(root, &id, &cfg.scenarios) {
            return Ok(());
        }
        let mask = gen_layout(cfg, index)?;
        let lp = root.join(layout_rel(&id));
        save_raster(&lp, &mask.to_raster()).map_err(|e| DataError::Raster { path: lp.display().to_string(), source: e })?;
        for &s in &cfg.scenarios {
            let map = simulate(&mask, &cfg.scenario_config(s))?;
            let tp = root.join(target_rel(s, &id));
            save_raster(&tp, &map.to_raster()).map_err(|e| DataError::Raster { path: tp.display().to_string(), source: e })?;
        }
        Ok(())
    })?;

    let tags = assign_splits(cfg.samples, cfg.seed);
    let samples = (0..cfg.samples)
        .map(|i| {
            let id = sample_id(i);
            SampleRecord {
                layout: layout_rel(&id),
                targets: cfg.scenarios.iter().map(|&s| (s, target_rel(s, &id))).collect(),
                split: tags[i],
                id,
            }
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        split_fractions: [0.8, 0.1, 0.1],
        split_rule: "seeded shuffle; train = floor(0.8 n), val = floor(0.1 n), test = remainder".into(),
        samples,
    };
    let mp = root.join(MANIFEST_FILE);
    write_atomic(&mp, manifest.to_json().as_bytes()).map_err(|e| io_err(&mp, e))?;
    let _ = fs::remove_file(&partial);
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest, DataError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Manifest { path: path.display().to_string(), message: e.to_string() })?;
    if m.version != MANIFEST_VERSION {
        return Err(DataError::Manifest {
            path: path.display().to_string(),
            message: format!("unsupported version {}", m.version),
        });
    }
    Ok(m)
}

/// One corpus entry for a single scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub mask: LayoutMask,
    pub target_db: DbMap,
    pub target: NormMap,
}

fn load_checked(path: &Path) -> Result<crate::raster::RasterFile, DataError> {
    load_raster(path).map_err(|e| DataError::Raster { path: path.display().to_string(), source: e })
}

/// Samples of one split in manifest order.
pub fn load_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    scenario: Scenario,
) -> Result<Vec<Sample>, DataError> {
    if !manifest.config.scenarios.contains(&scenario) {
        return Err(DataError::MissingScenario { scenario });
    }
    manifest
        .samples
        .iter()
        .filter(|s| s.split == split)
        .map(|rec| {
            let lp: PathBuf = root.join(&rec.layout);
            let mask = LayoutMask::from_raster(&load_checked(&lp)?)
                .map_err(|e| DataError::Raster { path: lp.display().to_string(), source: e })?;
            let rel = rec.targets.get(&scenario).ok_or(DataError::MissingScenario { scenario })?;
            let tp = root.join(rel);
            let wrap = |e| DataError::Raster { path: tp.display().to_string(), source: e };
            let target_db = DbMap::from_raster(&load_checked(&tp)?).map_err(wrap)?;
            if (target_db.width(), target_db.height()) != (mask.size(), mask.size()) {
                return Err(wrap(RasterError::Shape("target and layout sizes differ".into())));
            }
            let target = normalize(&target_db).map_err(wrap)?;
            Ok(Sample { id: rec.id.clone(), mask, target_db, target })
        })
        .collect()
}
