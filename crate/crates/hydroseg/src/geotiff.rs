//! Single-band GeoTIFF reading and writing. Georeferencing tags are carried
//! through unchanged (or shifted for tiles) but never interpreted otherwise.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use hydroseg_core::raster::{ScalingSpec, Scene};
use hydroseg_core::{BinaryMask, Grid};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{format_err, io_err, Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoInfo {
    pub pixel_scale: Option<Vec<f64>>,
    pub tiepoints: Option<Vec<f64>>,
    pub geo_keys: Option<Vec<u16>>,
    pub geo_doubles: Option<Vec<f64>>,
    pub geo_ascii: Option<String>,
}

impl GeoInfo {
    pub fn is_empty(&self) -> bool {
        *self == GeoInfo::default()
    }

    /// Georeferencing of a window starting at `(row, col)`: the first tiepoint
    /// moves by the pixel scale.
    pub fn offset(&self, row: usize, col: usize) -> GeoInfo {
        let mut out = self.clone();
        if let (Some(scale), Some(tp)) = (&self.pixel_scale, out.tiepoints.as_mut()) {
            if scale.len() >= 2 && tp.len() >= 6 && tp[0] == 0.0 && tp[1] == 0.0 {
                tp[3] += col as f64 * scale[0];
                tp[4] -= row as f64 * scale[1];
            }
        }
        out
    }

    /// Ground sampling distance from the pixel scale, if present.
    pub fn pixel_size(&self) -> Option<f64> {
        self.pixel_scale.as_ref().and_then(|s| s.first().copied()).filter(|v| *v > 0.0)
    }
}

/// A single band converted to `f64`, with its georeferencing.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub data: Grid<f64>,
    pub geo: GeoInfo,
}

fn tiff_err(path: &Path) -> impl FnOnce(tiff::TiffError) -> Error + '_ {
    move |source| Error::Tiff { path: path.to_path_buf(), source }
}

fn to_f64(result: DecodingResult) -> Vec<f64> {
    match result {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        DecodingResult::I8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f64).collect(),
    }
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(tiff_err(path))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(tiff_err(path))?;
    match dec.colortype().map_err(tiff_err(path))? {
        tiff::ColorType::Gray(_) => {}
        other => return Err(format_err(path, format!("expected a single band, found {other:?}"))),
    }
    let geo = GeoInfo {
        pixel_scale: find(&mut dec, Tag::ModelPixelScaleTag, path)?
            .map(|v| v.into_f64_vec())
            .transpose()
            .map_err(tiff_err(path))?,
        tiepoints: find(&mut dec, Tag::ModelTiepointTag, path)?
            .map(|v| v.into_f64_vec())
            .transpose()
            .map_err(tiff_err(path))?,
        geo_keys: find(&mut dec, Tag::GeoKeyDirectoryTag, path)?
            .map(|v| v.into_u16_vec())
            .transpose()
            .map_err(tiff_err(path))?,
        geo_doubles: find(&mut dec, Tag::GeoDoubleParamsTag, path)?
            .map(|v| v.into_f64_vec())
            .transpose()
            .map_err(tiff_err(path))?,
        geo_ascii: find(&mut dec, Tag::GeoAsciiParamsTag, path)?
            .map(|v| v.into_string())
            .transpose()
            .map_err(tiff_err(path))?,
    };
    let values = to_f64(dec.read_image().map_err(tiff_err(path))?);
    let data = Grid::from_vec(h as usize, w as usize, values)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(Raster { data, geo })
}

fn find<R: std::io::Read + std::io::Seek>(
    dec: &mut Decoder<R>,
    tag: Tag,
    path: &Path,
) -> Result<Option<tiff::decoder::ifd::Value>> {
    dec.find_tag(tag).map_err(tiff_err(path))
}

macro_rules! writer {
    ($name:ident, $ty:ty, $color:ty) => {
        pub fn $name(path: &Path, grid: &Grid<$ty>, geo: &GeoInfo) -> Result<()> {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let file = File::create(path).map_err(io_err(path))?;
            let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(tiff_err(path))?;
            let mut image = enc
                .new_image::<$color>(grid.cols() as u32, grid.rows() as u32)
                .map_err(tiff_err(path))?;
            write_geo(image.encoder(), geo).map_err(tiff_err(path))?;
            image.write_data(grid.as_slice()).map_err(tiff_err(path))
        }
    };
}

writer!(write_f32, f32, colortype::Gray32Float);
writer!(write_u8, u8, colortype::Gray8);
writer!(write_u16, u16, colortype::Gray16);

fn write_geo<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    geo: &GeoInfo,
) -> tiff::TiffResult<()> {
    if let Some(v) = &geo.pixel_scale {
        dir.write_tag(Tag::ModelPixelScaleTag, v.as_slice())?;
    }
    if let Some(v) = &geo.tiepoints {
        dir.write_tag(Tag::ModelTiepointTag, v.as_slice())?;
    }
    if let Some(v) = &geo.geo_keys {
        dir.write_tag(Tag::GeoKeyDirectoryTag, v.as_slice())?;
    }
    if let Some(v) = &geo.geo_doubles {
        dir.write_tag(Tag::GeoDoubleParamsTag, v.as_slice())?;
    }
    if let Some(v) = &geo.geo_ascii {
        dir.write_tag(Tag::GeoAsciiParamsTag, v.as_str())?;
    }
    Ok(())
}

/// Reads a binary mask raster; every value must be 0 or 1.
pub fn read_mask(path: &Path) -> Result<(BinaryMask, GeoInfo)> {
    let r = read_raster(path)?;
    let mut data = Vec::with_capacity(r.data.len());
    for &v in r.data.as_slice() {
        if v == 0.0 || v == 1.0 {
            data.push(v as u8);
        } else {
            return Err(format_err(path, format!("mask value {v} is not 0 or 1")));
        }
    }
    let mask = Grid::from_vec(r.data.rows(), r.data.cols(), data).map_err(|e| format_err(path, e.to_string()))?;
    Ok((mask, r.geo))
}

/// A scene read from disk with the georeferencing of its image raster.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub scene: Scene,
    pub geo: GeoInfo,
}

/// Loads a radar raster and an optional mask, scaling pixels into `[0, 1]`.
pub fn load_scene(
    path: &Path,
    mask_path: Option<&Path>,
    scaling: ScalingSpec,
    scene_id: Option<&str>,
) -> Result<LoadedScene> {
    let raster = read_raster(path)?;
    let mask = mask_path.map(read_raster).transpose()?;
    let id = scene_id.map(str::to_owned).unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
    });
    let pixel_size = raster.geo.pixel_size().unwrap_or(1.0);
    let scene = Scene::from_raw(id, &raster.data, mask.as_ref().map(|m| &m.data), scaling, pixel_size)
        .map_err(|e| format_err(mask_path.unwrap_or(path), e.to_string()))?;
    Ok(LoadedScene { scene, geo: raster.geo })
}
