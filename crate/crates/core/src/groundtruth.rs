//! Drone-derived ground truth.
//!
//! Surface and terrain models are differenced into canopy height, the 8 m
//! height threshold separates shade trees from cocoa, and per-cell shade
//! fractions on the 10 m analysis grid become the regression targets.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::raster::{GeoTransform, RasterGrid};
use crate::{Error, Result};

/// Height above which canopy counts as shade tree rather than cocoa.
/// Exactly 8.0 m still counts as cocoa: the threshold is conservative about
/// misclassifying cocoa as shade.
pub const SHADE_HEIGHT_THRESHOLD_M: f32 = 8.0;

/// Simple closed polygon in planar map coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    /// Ring vertices; the last vertex may repeat the first.
    pub vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self> {
        let mut ring = vertices;
        if ring.len() >= 2 && ring.first() == ring.last() {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(Error::Geometry("polygon needs at least 3 vertices".into()));
        }
        let poly = Self { vertices: ring };
        if poly.area().abs() <= 0.0 {
            return Err(Error::Geometry("polygon has zero area".into()));
        }
        Ok(poly)
    }

    /// Signed shoelace area.
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (x0, y0) = self.vertices[i];
            let (x1, y1) = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc / 2.0
    }

    /// Even-odd ray-casting point-in-polygon test; points on an edge or
    /// vertex count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let (x0, y0) = self.vertices[i];
            let (x1, y1) = self.vertices[(i + 1) % n];
            if on_segment(x, y, x0, y0, x1, y1) {
                return true;
            }
            if (y0 > y) != (y1 > y) {
                let xi = x0 + (y - y0) / (y1 - y0) * (x1 - x0);
                if x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &self.vertices {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }

    /// Parse a `POLYGON((x y, x y, ...))` well-known-text string (outer ring
    /// only).
    pub fn from_wkt(wkt: &str) -> Result<Self> {
        let s = wkt.trim();
        let upper = s.to_ascii_uppercase();
        if !upper.starts_with("POLYGON") {
            return Err(Error::Format(format!("not a POLYGON wkt: {s}")));
        }
        let open = s.find("((").ok_or_else(|| Error::Format("missing '((' in wkt".into()))?;
        let close = s.find("))").ok_or_else(|| Error::Format("missing '))' in wkt".into()))?;
        let body = &s[open + 2..close];
        // Outer ring only: stop at an interior-ring separator if present.
        let body = body.split("),").next().unwrap_or(body);
        let mut vertices = Vec::new();
        for pair in body.split(',') {
            let mut it = pair.split_whitespace();
            let x: f64 = it
                .next()
                .ok_or_else(|| Error::Format("wkt vertex missing x".into()))?
                .parse()
                .map_err(|e| Error::Format(format!("bad wkt x: {e}")))?;
            let y: f64 = it
                .next()
                .ok_or_else(|| Error::Format("wkt vertex missing y".into()))?
                .parse()
                .map_err(|e| Error::Format(format!("bad wkt y: {e}")))?;
            vertices.push((x, y));
        }
        Polygon::new(vertices)
    }

    pub fn to_wkt(&self) -> String {
        let mut parts: Vec<String> = self
            .vertices
            .iter()
            .map(|(x, y)| format!("{x} {y}"))
            .collect();
        if let Some(first) = self.vertices.first() {
            parts.push(format!("{} {}", first.0, first.1));
        }
        format!("POLYGON(({}))", parts.join(", "))
    }
}

fn on_segment(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
    let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
    if cross.abs() > 1e-9 * ((x1 - x0).abs() + (y1 - y0).abs()).max(1.0) {
        return false;
    }
    let dot = (px - x0) * (px - x1) + (py - y0) * (py - y1);
    dot <= 0.0
}

/// One surveyed farm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FarmRecord {
    pub farm_id: String,
    pub boundary: Polygon,
    pub gt_date: NaiveDate,
    pub dsm_path: PathBuf,
    pub dtm_path: PathBuf,
}

/// Load a farm manifest CSV: `farm_id,gt_date,dsm_path,dtm_path,boundary_wkt`.
/// Relative raster paths resolve against the manifest's location.
pub fn load_farms(path: &Path) -> Result<Vec<FarmRecord>> {
    #[derive(Deserialize)]
    struct Row {
        farm_id: String,
        gt_date: String,
        dsm_path: String,
        dtm_path: String,
        boundary_wkt: String,
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |s: String| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut rdr = csv::Reader::from_path(path)?;
    let mut farms = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        farms.push(FarmRecord {
            farm_id: row.farm_id,
            gt_date: NaiveDate::parse_from_str(&row.gt_date, "%Y-%m-%d")
                .map_err(|e| Error::Format(format!("bad gt_date '{}': {e}", row.gt_date)))?,
            dsm_path: resolve(row.dsm_path),
            dtm_path: resolve(row.dtm_path),
            boundary: Polygon::from_wkt(&row.boundary_wkt)?,
        });
    }
    Ok(farms)
}

pub fn save_farms(path: &Path, farms: &[FarmRecord]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["farm_id", "gt_date", "dsm_path", "dtm_path", "boundary_wkt"])?;
    for f in farms {
        w.write_record([
            f.farm_id.as_str(),
            &f.gt_date.format("%Y-%m-%d").to_string(),
            &f.dsm_path.display().to_string(),
            &f.dtm_path.display().to_string(),
            &f.boundary.to_wkt(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Canopy height = DSM - DTM, clamped at zero. Photogrammetric noise can put
/// the surface below the terrain; heights below ground are meaningless.
pub fn canopy_height(dsm: &RasterGrid, dtm: &RasterGrid) -> Result<RasterGrid> {
    if !dsm.same_geometry(dtm) {
        return Err(Error::Alignment("DSM and DTM geometry differ".into()));
    }
    let mut out = dsm.clone();
    for (o, (&s, &t)) in out
        .data
        .iter_mut()
        .zip(dsm.data.iter().zip(dtm.data.iter()))
    {
        *o = if dsm.is_nodata(s) || dtm.is_nodata(t) {
            dsm.nodata
        } else {
            (s - t).max(0.0)
        };
    }
    out.nodata = dsm.nodata;
    Ok(out)
}

/// Binary shade mask: 1 where canopy height exceeds the threshold, 0 where
/// it is at or below, nodata propagated.
pub fn shade_mask(chm: &RasterGrid, threshold: f32) -> RasterGrid {
    let mut out = chm.clone();
    for v in out.data.iter_mut() {
        if chm.is_nodata(*v) {
            *v = chm.nodata;
        } else {
            *v = if *v > threshold { 1.0 } else { 0.0 };
        }
    }
    out
}

/// One 10 m analysis cell with its observed shade fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadeTargetCell {
    pub col: u32,
    pub row: u32,
    pub fraction: f32,
    pub n_drone_pixels: u32,
}

/// Aggregate a drone-resolution shade mask into per-cell shade fractions on
/// the 10 m analysis grid.
///
/// A cell contributes when its center lies inside the farm boundary and at
/// least one valid drone pixel center falls in it. The fraction is
/// `shade pixels / valid pixels` among drone pixel centers in the cell.
pub fn cell_shade_fraction(
    mask: &RasterGrid,
    boundary: &Polygon,
    grid10: &GeoTransform,
    grid_w: usize,
    grid_h: usize,
) -> Result<Vec<ShadeTargetCell>> {
    if boundary.area().abs() <= 0.0 {
        return Err(Error::Geometry("degenerate farm polygon".into()));
    }
    let mut valid = vec![0u32; grid_w * grid_h];
    let mut shade = vec![0u32; grid_w * grid_h];
    let band = mask.band(0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            let v = band[r * mask.width + c];
            if mask.is_nodata(v) {
                continue;
            }
            let (x, y) = mask.transform.pixel_center(c, r);
            let (gc, gr) = grid10.cell_of(x, y);
            if gc < 0 || gr < 0 || gc >= grid_w as i64 || gr >= grid_h as i64 {
                continue;
            }
            let idx = gr as usize * grid_w + gc as usize;
            valid[idx] += 1;
            if v != 0.0 {
                shade[idx] += 1;
            }
        }
    }
    let mut cells = Vec::new();
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let idx = gr * grid_w + gc;
            if valid[idx] == 0 {
                continue;
            }
            let (cx, cy) = grid10.pixel_center(gc, gr);
            if !boundary.contains(cx, cy) {
                continue;
            }
            cells.push(ShadeTargetCell {
                col: gc as u32,
                row: gr as u32,
                fraction: shade[idx] as f32 / valid[idx] as f32,
                n_drone_pixels: valid[idx],
            });
        }
    }
    Ok(cells)
}

/// Result of calibrating the shade/cocoa height threshold on monoculture
/// polygons.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThresholdCalibration {
    pub quantile_height_m: f32,
    pub fraction_below_8m: f64,
    pub n_pixels: u64,
}

/// Nearest-rank quantile of canopy heights inside cocoa-monoculture
/// polygons, plus the fraction of heights at or below 8 m.
pub fn threshold_calibration(
    chm: &RasterGrid,
    monoculture_polygons: &[Polygon],
    quantile: f64,
) -> Result<ThresholdCalibration> {
    if !(0.0 < quantile && quantile <= 1.0) {
        return Err(Error::Argument(format!("quantile {quantile} out of (0,1]")));
    }
    let band = chm.band(0);
    let mut heights: Vec<f32> = Vec::new();
    for r in 0..chm.height {
        for c in 0..chm.width {
            let v = band[r * chm.width + c];
            if chm.is_nodata(v) {
                continue;
            }
            let (x, y) = chm.transform.pixel_center(c, r);
            if monoculture_polygons.iter().any(|p| p.contains(x, y)) {
                heights.push(v);
            }
        }
    }
    if heights.is_empty() {
        return Err(Error::EmptyData("no CHM pixels inside polygons".into()));
    }
    heights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((quantile * heights.len() as f64).ceil() as usize).clamp(1, heights.len());
    let below = heights
        .iter()
        .filter(|&&h| h <= SHADE_HEIGHT_THRESHOLD_M)
        .count();
    Ok(ThresholdCalibration {
        quantile_height_m: heights[rank - 1],
        fraction_below_8m: below as f64 / heights.len() as f64,
        n_pixels: heights.len() as u64,
    })
}
