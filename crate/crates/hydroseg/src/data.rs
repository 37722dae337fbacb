//! Builds the tile pool, the train/validation split and the test set from an
//! experiment's data section.

use std::collections::HashMap;

use hydroseg_core::raster::{generate_synthetic_scene, split_dataset, tile_scene, DatasetSplit, Scene, Tile};
use hydroseg_core::rng::derive_seed;
use hydroseg_core::BinaryMask;

use crate::config::{DataConfig, ExperimentConfig, FitSet, SceneSource};
use crate::error::{Error, Result};
use crate::geotiff::{self, GeoInfo};
use crate::manifest::{read_tiles, SplitName};

#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub scene: Scene,
    pub geo: GeoInfo,
    pub held_out: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Train/validation pool. `split.test` indexes leftover pool tiles.
    pub tiles: Vec<Tile>,
    pub split: DatasetSplit,
    /// Held-out scene tiles followed by the pool's leftover tiles.
    pub test: Vec<Tile>,
    /// Full scenes, when the source has them.
    pub scenes: Vec<SceneEntry>,
    /// Short description recorded alongside results.
    pub id: String,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.data {
            DataConfig::Synthetic(s) => {
                let mut scenes = Vec::new();
                for i in 0..s.train_scenes {
                    let scene = generate_synthetic_scene(format!("train-{i}"), &s.scene, derive_seed(s.seed, &[1, i as u64]))?;
                    scenes.push(SceneEntry { scene, geo: GeoInfo::default(), held_out: false });
                }
                for i in 0..s.test_scenes {
                    let scene = generate_synthetic_scene(format!("test-{i}"), &s.scene, derive_seed(s.seed, &[2, i as u64]))?;
                    scenes.push(SceneEntry { scene, geo: GeoInfo::default(), held_out: true });
                }
                let id = format!("synthetic(seed={}, scenes={}+{})", s.seed, s.train_scenes, s.test_scenes);
                Self::from_scenes(scenes, cfg, id)
            }
            DataConfig::Rasters { scenes, test_scenes, scaling, exclude_months } => {
                let mut entries = Vec::new();
                for (list, held_out) in [(scenes, false), (test_scenes, true)] {
                    for src in list {
                        if excluded(src, exclude_months)? {
                            continue;
                        }
                        let loaded = geotiff::load_scene(&src.image, src.mask.as_deref(), *scaling, src.id.as_deref())?;
                        entries.push(SceneEntry { scene: loaded.scene, geo: loaded.geo, held_out });
                    }
                }
                let id = format!("rasters({}+{} scenes)", scenes.len(), test_scenes.len());
                Self::from_scenes(entries, cfg, id)
            }
            DataConfig::Manifest { path } => {
                let mut tiles = Vec::new();
                let mut split = DatasetSplit { train: vec![], validation: vec![], test: vec![], seed: cfg.split.seed };
                for (i, (tile, name)) in read_tiles(path)?.into_iter().enumerate() {
                    if tile.side() != cfg.tile_size {
                        return Err(Error::Config(format!(
                            "manifest tile {} is {} pixels, tile_size is {}",
                            tile.id(),
                            tile.side(),
                            cfg.tile_size
                        )));
                    }
                    match name {
                        SplitName::Train => split.train.push(i),
                        SplitName::Validation => split.validation.push(i),
                        SplitName::Test => split.test.push(i),
                    }
                    tiles.push(tile);
                }
                let test = split.test.iter().map(|&i| tiles[i].clone()).collect();
                Ok(Self { tiles, split, test, scenes: Vec::new(), id: format!("manifest({})", path.display()) })
            }
        }
    }

    fn from_scenes(scenes: Vec<SceneEntry>, cfg: &ExperimentConfig, id: String) -> Result<Self> {
        let mut seen = HashMap::new();
        for e in &scenes {
            if seen.insert(e.scene.scene_id.clone(), ()).is_some() {
                return Err(Error::Config(format!("duplicate scene id {}", e.scene.scene_id)));
            }
        }
        let mut tiles = Vec::new();
        let mut test = Vec::new();
        for e in &scenes {
            let t = tile_scene(&e.scene, cfg.tile_size)?;
            if e.held_out {
                test.extend(t);
            } else {
                tiles.extend(t);
            }
        }
        if tiles.is_empty() {
            return Err(Error::Config(format!("no {0}x{0} tiles in the training scenes", cfg.tile_size)));
        }
        let split = split_dataset(tiles.len(), (cfg.split.train, cfg.split.validation), cfg.split.seed)?;
        test.extend(split.test.iter().map(|&i| tiles[i].clone()));
        Ok(Self { tiles, split, test, scenes, id })
    }

    pub fn validation(&self) -> Vec<Tile> {
        self.split.validation.iter().map(|&i| self.tiles[i].clone()).collect()
    }

    /// Tiles the final class assignment is fitted on.
    pub fn fit_tiles(&self, fit: FitSet) -> Vec<Tile> {
        match fit {
            FitSet::Test => self.test.clone(),
            FitSet::Validation => self.validation(),
        }
    }

    pub fn scene(&self, id: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|e| e.scene.scene_id == id)
    }
}

fn excluded(src: &SceneSource, months: &[u32]) -> Result<bool> {
    let Some(date) = &src.date else { return Ok(false) };
    let month = date
        .split('-')
        .nth(1)
        .and_then(|m| m.parse::<u32>().ok())
        .filter(|m| (1..=12).contains(m))
        .ok_or_else(|| Error::Config(format!("scene date `{date}` is not YYYY-MM-DD")))?;
    Ok(months.contains(&month))
}

/// Masks of tiles; fails when any tile has none.
pub fn masks(tiles: &[Tile], what: &str) -> Result<Vec<BinaryMask>> {
    tiles
        .iter()
        .map(|t| {
            t.mask
                .clone()
                .ok_or_else(|| Error::Run(format!("{what} tile {} has no ground-truth mask", t.id())))
        })
        .collect()
}
