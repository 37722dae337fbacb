//! Tile directories: one GeoTIFF per tile (plus an optional mask) and a CSV
//! manifest with one row per tile.

use std::path::Path;

use hydroseg_core::raster::Tile;
use hydroseg_core::Grid;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};
use crate::geotiff::{self, GeoInfo};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub tile_id: String,
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub split: SplitName,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: Option<String>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        out.push(rec.map_err(|e| format_err(path, format!("record {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn file_stem(tile: &Tile) -> String {
    let clean: String = tile
        .scene_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{clean}_r{}_c{}", tile.origin.0, tile.origin.1)
}

/// Writes tiles with their split labels. `geo` supplies the parent scene's
/// georeferencing, looked up by scene id.
pub fn write_tiles(
    dir: &Path,
    tiles: &[(&Tile, SplitName)],
    geo: &dyn Fn(&str) -> Option<GeoInfo>,
) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir.join("tiles")).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(tiles.len());
    for (tile, split) in tiles {
        let stem = file_stem(tile);
        let g = geo(&tile.scene_id).map(|g| g.offset(tile.origin.0, tile.origin.1)).unwrap_or_default();
        let image = format!("tiles/{stem}.tif");
        geotiff::write_f32(&dir.join(&image), &tile.pixels, &g)?;
        let mask = match &tile.mask {
            Some(m) => {
                let rel = format!("tiles/{stem}_mask.tif");
                geotiff::write_u8(&dir.join(&rel), m, &g)?;
                Some(rel)
            }
            None => None,
        };
        records.push(ManifestRecord {
            tile_id: tile.id(),
            scene_id: tile.scene_id.clone(),
            row: tile.origin.0,
            col: tile.origin.1,
            size: tile.side(),
            split: *split,
            image,
            mask,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Reads a tile directory back. Tile images must already be scaled to `[0, 1]`.
pub fn read_tiles(manifest: &Path) -> Result<Vec<(Tile, SplitName)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for rec in read_manifest(manifest)? {
        let path = base.join(&rec.image);
        let r = geotiff::read_raster(&path)?;
        if r.data.shape() != (rec.size, rec.size) {
            return Err(format_err(&path, format!("expected {0}x{0} pixels", rec.size)));
        }
        if r.data.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format_err(&path, "tile pixels must lie in [0, 1]"));
        }
        let pixels: Grid<f32> = r.data.map(|v| v as f32);
        let mask = match &rec.mask {
            Some(m) => {
                let (mask, _) = geotiff::read_mask(&base.join(m))?;
                if mask.shape() != pixels.shape() {
                    return Err(format_err(base.join(m), "mask and tile differ in shape"));
                }
                Some(mask)
            }
            None => None,
        };
        out.push((Tile { scene_id: rec.scene_id, origin: (rec.row, rec.col), pixels, mask }, rec.split));
    }
    Ok(out)
}
