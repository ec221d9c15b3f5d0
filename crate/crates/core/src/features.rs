//! Per-pixel feature construction for the shade model.
//!
//! Each pixel yields 17 channels (12 spectral bands + 5 vegetation indices)
//! gathered over a centered 5x5 neighborhood, for 425 features. The feature
//! order is position-major: for each of the 25 neighborhood positions in
//! row-major order, the 17 channels are emitted in sequence. The order is
//! fixed by [`FEATURE_ORDER_TAG`] and recorded in model files so predictions
//! stay portable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::groundtruth::ShadeTargetCell;
use crate::ingest::N_BANDS;
use crate::raster::{clamp_index, RasterGrid};
use crate::{Error, Result};

/// Number of channels per pixel: 12 bands + 5 indices.
pub const N_CHANNELS: usize = 17;

/// Neighborhood radius (5x5 window).
pub const NEIGHBORHOOD_RADIUS: usize = 2;

/// Total feature count per pixel.
pub const N_FEATURES: usize = N_CHANNELS * 25;

/// Identifier of the feature layout, stored in model files.
pub const FEATURE_ORDER_TAG: &str = "pos-major-5x5/b01-b09-b8a-b11-b12/ndvi-grvi-rvi-gndvi-ndmi/v1";

// Channel positions of the band roles inside the 12-band stack
// (B01..B08, B8A, B11, B12, B09).
pub const GREEN_IDX: usize = 2; // B03
pub const RED_IDX: usize = 3; // B04
pub const NIR_IDX: usize = 7; // B08
pub const SWIR1_IDX: usize = 9; // B11

#[inline]
fn safe_ratio(num: f32, den: f32) -> f32 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Compute the 5 vegetation-index channels from a 12-band grid.
///
/// Index order: NDVI, GRVI, RVI, GNDVI, NDMI. Zero denominators yield 0 (a
/// neutral signal for the tree learner); nodata in any operand propagates.
pub fn spectral_indices(bands: &RasterGrid) -> Result<RasterGrid> {
    if bands.bands != N_BANDS {
        return Err(Error::Argument(format!(
            "expected {N_BANDS} bands, got {}",
            bands.bands
        )));
    }
    let n = bands.width * bands.height;
    let green = bands.band(GREEN_IDX);
    let red = bands.band(RED_IDX);
    let nir = bands.band(NIR_IDX);
    let swir = bands.band(SWIR1_IDX);
    let mut out = RasterGrid::filled(bands.width, bands.height, 5, bands.transform, 0.0);
    out.nodata = bands.nodata;
    out.crs_label = bands.crs_label.clone();
    for i in 0..n {
        let (g, r, nr, sw) = (green[i], red[i], nir[i], swir[i]);
        let bad = bands.is_nodata(g) || bands.is_nodata(r) || bands.is_nodata(nr) || bands.is_nodata(sw);
        let vals = if bad {
            [out.nodata; 5]
        } else {
            [
                safe_ratio(nr - r, nr + r),  // NDVI
                safe_ratio(g - r, g + r),    // GRVI
                safe_ratio(nr, r),           // RVI
                safe_ratio(nr - g, nr + g),  // GNDVI
                safe_ratio(nr - sw, nr + sw), // NDMI
            ]
        };
        for (band, v) in vals.into_iter().enumerate() {
            out.data[band * n + i] = v;
        }
    }
    Ok(out)
}

/// Stack the 12 bands and 5 indices of a scene into one 17-band grid.
pub fn channel_stack(bands: &RasterGrid) -> Result<RasterGrid> {
    let indices = spectral_indices(bands)?;
    let mut data = Vec::with_capacity(bands.width * bands.height * N_CHANNELS);
    data.extend_from_slice(&bands.data);
    data.extend_from_slice(&indices.data);
    let mut out = RasterGrid::from_data(bands.width, bands.height, N_CHANNELS, bands.transform, data)?;
    out.nodata = bands.nodata;
    out.crs_label = bands.crs_label.clone();
    Ok(out)
}

/// Dense row-major feature matrix with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f32>,
    pub row_meta: Vec<RowMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowMeta {
    pub tile: String,
    pub col: u32,
    pub row: u32,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

/// Fill one pixel's 425-feature vector from a 17-channel stack.
///
/// Replicate-edge padding at grid borders; `out` must hold `N_FEATURES`
/// slots.
pub fn fill_feature_row(stack: &RasterGrid, col: usize, row: usize, out: &mut [f32]) {
    debug_assert_eq!(stack.bands, N_CHANNELS);
    debug_assert_eq!(out.len(), N_FEATURES);
    let plane = stack.width * stack.height;
    let r = NEIGHBORHOOD_RADIUS as isize;
    let mut k = 0;
    for dy in -r..=r {
        let rr = clamp_index(row as isize + dy, stack.height);
        for dx in -r..=r {
            let cc = clamp_index(col as isize + dx, stack.width);
            let base = rr * stack.width + cc;
            for ch in 0..N_CHANNELS {
                out[k] = stack.data[ch * plane + base];
                k += 1;
            }
        }
    }
}

/// Build feature rows for a pixel set over a 17-channel stack.
///
/// Rows align with `pixel_set` order; traversal order of the underlying
/// grid never affects row content.
pub fn build_features(
    stack: &RasterGrid,
    tile_id: &str,
    pixel_set: &[(usize, usize)],
) -> Result<FeatureMatrix> {
    if stack.bands != N_CHANNELS {
        return Err(Error::Argument(format!(
            "feature stack must have {N_CHANNELS} channels, got {}",
            stack.bands
        )));
    }
    for &(c, r) in pixel_set {
        if c >= stack.width || r >= stack.height {
            return Err(Error::Bounds(format!(
                "pixel ({c},{r}) outside {}x{} grid",
                stack.width, stack.height
            )));
        }
    }
    let mut values = vec![0.0f32; pixel_set.len() * N_FEATURES];
    values
        .par_chunks_mut(N_FEATURES)
        .zip(pixel_set.par_iter())
        .for_each(|(chunk, &(c, r))| fill_feature_row(stack, c, r, chunk));
    let row_meta = pixel_set
        .iter()
        .map(|&(c, r)| RowMeta {
            tile: tile_id.to_string(),
            col: c as u32,
            row: r as u32,
        })
        .collect();
    Ok(FeatureMatrix {
        n_rows: pixel_set.len(),
        n_cols: N_FEATURES,
        values,
        row_meta,
    })
}

/// Pair pixels with ground-truth shade fractions.
///
/// Pixels without a ground-truth cell are dropped (logged); the returned
/// indices say which `pixel_set` entries survived, in order.
pub fn build_targets(
    shade_cells: &[ShadeTargetCell],
    pixel_set: &[(usize, usize)],
) -> (Vec<f32>, Vec<usize>) {
    use std::collections::HashMap;
    let lut: HashMap<(u32, u32), f32> = shade_cells
        .iter()
        .map(|c| ((c.col, c.row), c.fraction))
        .collect();
    let mut targets = Vec::new();
    let mut kept = Vec::new();
    for (i, &(c, r)) in pixel_set.iter().enumerate() {
        match lut.get(&(c as u32, r as u32)) {
            Some(&f) => {
                targets.push(f);
                kept.push(i);
            }
            None => {
                log::debug!("pixel ({c},{r}) has no ground-truth cell; row dropped");
            }
        }
    }
    (targets, kept)
}

const CFMX_MAGIC: &[u8; 4] = b"CFMX";

/// Write a feature matrix cache file.
pub fn write_cfmx(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CFMX_MAGIC)?;
    w.write_all(&(m.n_rows as u64).to_le_bytes())?;
    w.write_all(&(m.n_cols as u32).to_le_bytes())?;
    for &v in &m.values {
        w.write_all(&v.to_le_bytes())?;
    }
    for meta in &m.row_meta {
        let b = meta.tile.as_bytes();
        w.write_all(&(b.len() as u16).to_le_bytes())?;
        w.write_all(b)?;
        w.write_all(&meta.col.to_le_bytes())?;
        w.write_all(&meta.row.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cfmx(path: &Path) -> Result<FeatureMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CFMX_MAGIC {
        return Err(Error::Format(format!("bad CFMX magic {magic:?}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n_rows = u64::from_le_bytes(b8) as usize;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let n_cols = u32::from_le_bytes(b4) as usize;
    let mut payload = vec![0u8; n_rows * n_cols * 4];
    r.read_exact(&mut payload).map_err(|_| Error::Length {
        expected: n_rows * n_cols * 4,
        got: 0,
    })?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut row_meta = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let len = u16::from_le_bytes(b2) as usize;
        let mut tile = vec![0u8; len];
        r.read_exact(&mut tile)?;
        r.read_exact(&mut b4)?;
        let col = u32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let row = u32::from_le_bytes(b4);
        row_meta.push(RowMeta {
            tile: String::from_utf8(tile)
                .map_err(|_| Error::Format("row meta tile id is not UTF-8".into()))?,
            col,
            row,
        });
    }
    Ok(FeatureMatrix {
        n_rows,
        n_cols,
        values,
        row_meta,
    })
}
