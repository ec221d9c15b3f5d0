//! Georeferenced multi-band float grids.
//!
//! [`RasterGrid`] is the carrier for every map in the pipeline: spectral
//! bands, cloud masks, canopy height, shade cover, biomass. Grids are
//! immutable after construction as far as the pipeline is concerned; all
//! operations here are pure functions and safe to call concurrently on
//! shared inputs.
//!
//! Pixel/map conventions: `(col, row) = (0, 0)` is the top-left pixel;
//! `GeoTransform` maps the top-left *corner* of that pixel to
//! `(origin_x, origin_y)`, so the center of pixel `(c, r)` sits at
//! `origin + (c + 0.5, r + 0.5) * pixel_size`. `pixel_size_y` is negative
//! for north-up grids. No reprojection is performed anywhere; the CRS label
//! is an opaque tag.

mod io;
mod resample;

pub use io::{read_cgrd, write_cgrd};
pub use resample::{resample_bilinear, upsample_nearest};

use crate::{Error, Result};

/// Default nodata sentinel for newly created grids.
pub const DEFAULT_NODATA: f32 = -9999.0;

/// Affine grid geometry with rotation terms fixed to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64) -> Result<Self> {
        if !(pixel_size_x > 0.0) {
            return Err(Error::Argument(format!(
                "pixel_size_x must be > 0, got {pixel_size_x}"
            )));
        }
        if pixel_size_y == 0.0 || !pixel_size_y.is_finite() {
            return Err(Error::Argument(format!(
                "pixel_size_y must be nonzero and finite, got {pixel_size_y}"
            )));
        }
        Ok(Self {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
        })
    }

    /// Map coordinates of the top-left corner of pixel `(col, row)`.
    pub fn pixel_corner(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_size_x,
            self.origin_y + row * self.pixel_size_y,
        )
    }

    /// Map coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.pixel_corner(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Fractional pixel coordinates of a map point, in center coordinates:
    /// the center of pixel `(c, r)` maps to exactly `(c, r)`.
    pub fn map_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_size_x - 0.5,
            (y - self.origin_y) / self.pixel_size_y - 0.5,
        )
    }

    /// Integer cell index containing a map point (half-open cells).
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        let c = ((x - self.origin_x) / self.pixel_size_x).floor() as i64;
        let r = ((y - self.origin_y) / self.pixel_size_y).floor() as i64;
        (c, r)
    }
}

/// Georeferenced band-major, row-major float32 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub transform: GeoTransform,
    pub nodata: f32,
    pub crs_label: String,
    pub data: Vec<f32>,
}

impl RasterGrid {
    /// Grid filled with a constant value.
    pub fn filled(
        width: usize,
        height: usize,
        bands: usize,
        transform: GeoTransform,
        value: f32,
    ) -> Self {
        Self {
            width,
            height,
            bands,
            transform,
            nodata: DEFAULT_NODATA,
            crs_label: String::new(),
            data: vec![value; width * height * bands],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        bands: usize,
        transform: GeoTransform,
        data: Vec<f32>,
    ) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Argument("band count must be >= 1".into()));
        }
        if data.len() != width * height * bands {
            return Err(Error::Shape(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                bands
            )));
        }
        Ok(Self {
            width,
            height,
            bands,
            transform,
            nodata: DEFAULT_NODATA,
            crs_label: String::new(),
            data,
        })
    }

    pub fn with_nodata(mut self, nodata: f32) -> Self {
        self.nodata = nodata;
        self
    }

    pub fn with_crs(mut self, crs: &str) -> Self {
        self.crs_label = crs.to_string();
        self
    }

    #[inline]
    pub fn index(&self, band: usize, col: usize, row: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, band: usize, col: usize, row: usize) -> f32 {
        self.data[self.index(band, col, row)]
    }

    #[inline]
    pub fn set(&mut self, band: usize, col: usize, row: usize, value: f32) {
        let i = self.index(band, col, row);
        self.data[i] = value;
    }

    /// All pixels of one band, row-major.
    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[band * n..(band + 1) * n]
    }

    #[inline]
    pub fn is_nodata(&self, value: f32) -> bool {
        value == self.nodata || (self.nodata.is_nan() && value.is_nan())
    }

    /// True when `other` shares width, height and transform with `self`.
    pub fn same_geometry(&self, other: &RasterGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.transform == other.transform
    }

    /// Area of one cell in hectares.
    pub fn cell_area_ha(&self) -> f64 {
        (self.transform.pixel_size_x * self.transform.pixel_size_y).abs() / 1e4
    }

    /// Map-space extent as (xmin, ymin, xmax, ymax).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let t = &self.transform;
        let x0 = t.origin_x;
        let x1 = t.origin_x + self.width as f64 * t.pixel_size_x;
        let y0 = t.origin_y;
        let y1 = t.origin_y + self.height as f64 * t.pixel_size_y;
        (x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
    }
}

/// Square per-band patch extracted around a center pixel.
#[derive(Debug, Clone)]
pub struct Patch {
    pub radius: usize,
    pub bands: usize,
    /// Band-major, row-major over the (2r+1)^2 neighborhood.
    pub values: Vec<f32>,
}

impl Patch {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.side() * self.side();
        &self.values[band * n..(band + 1) * n]
    }
}

/// Extract the `(2r+1)x(2r+1)` neighborhood of a center pixel for every band,
/// with replicate-edge (clamp) padding beyond the grid border.
pub fn window(grid: &RasterGrid, center_col: usize, center_row: usize, radius: usize) -> Result<Patch> {
    if center_col >= grid.width || center_row >= grid.height {
        return Err(Error::Bounds(format!(
            "center ({center_col},{center_row}) outside {}x{} grid",
            grid.width, grid.height
        )));
    }
    let side = 2 * radius + 1;
    let mut values = Vec::with_capacity(side * side * grid.bands);
    let r = radius as isize;
    for band in 0..grid.bands {
        for dy in -r..=r {
            let row = clamp_index(center_row as isize + dy, grid.height);
            for dx in -r..=r {
                let col = clamp_index(center_col as isize + dx, grid.width);
                values.push(grid.get(band, col, row));
            }
        }
    }
    Ok(Patch {
        radius,
        bands: grid.bands,
        values,
    })
}

#[inline]
pub(crate) fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Descriptive statistics over the valid pixels of one band.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GridStats {
    pub n_valid: u64,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub hist_edges: Vec<f64>,
    pub hist_counts: Vec<u64>,
}

impl GridStats {
    fn empty() -> Self {
        Self {
            n_valid: 0,
            mean: f64::NAN,
            sd: f64::NAN,
            min: f64::NAN,
            max: f64::NAN,
            hist_edges: Vec::new(),
            hist_counts: Vec::new(),
        }
    }
}

/// Statistics with an automatic 32-bin histogram spanning [min, max].
pub fn grid_stats(grid: &RasterGrid, band: usize, mask: Option<&RasterGrid>) -> Result<GridStats> {
    grid_stats_with(grid, band, mask, None)
}

/// Statistics with an explicit histogram range; values are clamped into the
/// end bins so counts always sum to `n_valid`.
pub fn grid_stats_binned(
    grid: &RasterGrid,
    band: usize,
    mask: Option<&RasterGrid>,
    lo: f64,
    hi: f64,
    n_bins: usize,
) -> Result<GridStats> {
    if !(hi > lo) || n_bins == 0 {
        return Err(Error::Argument(format!(
            "invalid histogram range [{lo},{hi}] with {n_bins} bins"
        )));
    }
    grid_stats_with(grid, band, mask, Some((lo, hi, n_bins)))
}

fn grid_stats_with(
    grid: &RasterGrid,
    band: usize,
    mask: Option<&RasterGrid>,
    hist: Option<(f64, f64, usize)>,
) -> Result<GridStats> {
    if band >= grid.bands {
        return Err(Error::Argument(format!(
            "band {band} out of range ({} bands)",
            grid.bands
        )));
    }
    if let Some(m) = mask {
        if m.width != grid.width || m.height != grid.height {
            return Err(Error::Alignment(format!(
                "mask {}x{} vs grid {}x{}",
                m.width, m.height, grid.width, grid.height
            )));
        }
    }
    let values = grid.band(band);
    let mask_band = mask.map(|m| m.band(0));

    let mut n = 0u64;
    let mut sum = 0.0f64;
    let mut sum2 = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut kept: Vec<f32> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        if grid.is_nodata(v) {
            continue;
        }
        if let Some(mb) = mask_band {
            let mv = mb[i];
            if mv == 0.0 || mask.unwrap().is_nodata(mv) {
                continue;
            }
        }
        let vf = v as f64;
        n += 1;
        sum += vf;
        sum2 += vf * vf;
        min = min.min(vf);
        max = max.max(vf);
        kept.push(v);
    }
    if n == 0 {
        return Ok(GridStats::empty());
    }
    let mean = sum / n as f64;
    // Population SD; guard tiny negative variance from rounding.
    let var = (sum2 / n as f64 - mean * mean).max(0.0);

    let (lo, hi, n_bins) = hist.unwrap_or((min, max, 32));
    let mut counts = vec![0u64; n_bins];
    let span = hi - lo;
    for &v in &kept {
        let idx = if span > 0.0 {
            (((v as f64 - lo) / span) * n_bins as f64).floor() as i64
        } else {
            0
        };
        counts[idx.clamp(0, n_bins as i64 - 1) as usize] += 1;
    }
    let edges = (0..=n_bins)
        .map(|i| lo + span * i as f64 / n_bins as f64)
        .collect();

    Ok(GridStats {
        n_valid: n,
        mean,
        sd: var.sqrt(),
        min,
        max,
        hist_edges: edges,
        hist_counts: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t10() -> GeoTransform {
        GeoTransform::new(0.0, 0.0, 10.0, -10.0).unwrap()
    }

    #[test]
    fn transform_roundtrip() {
        let t = GeoTransform::new(500.0, 2000.0, 10.0, -10.0).unwrap();
        let (x, y) = t.pixel_center(3, 4);
        let (u, v) = t.map_to_pixel(x, y);
        assert!((u - 3.0).abs() < 1e-12);
        assert!((v - 4.0).abs() < 1e-12);
        assert_eq!(t.cell_of(x, y), (3, 4));
    }

    #[test]
    fn transform_rejects_bad_sizes() {
        assert!(GeoTransform::new(0.0, 0.0, 0.0, -10.0).is_err());
        assert!(GeoTransform::new(0.0, 0.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn window_radius_zero_is_center_pixel() {
        let mut g = RasterGrid::filled(3, 3, 1, t10(), 0.0);
        g.set(0, 1, 2, 42.0);
        let p = window(&g, 1, 2, 0).unwrap();
        assert_eq!(p.values, vec![42.0]);
    }

    #[test]
    fn window_corner_constant() {
        let g = RasterGrid::filled(4, 4, 1, t10(), 7.0);
        let p = window(&g, 0, 0, 2).unwrap();
        assert_eq!(p.values.len(), 25);
        assert!(p.values.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn window_corner_matches_replicate_padding() {
        // 3x3 grid with values 1..9 row-major; center at (0,0), radius 1.
        let data: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let g = RasterGrid::from_data(3, 3, 1, t10(), data).unwrap();
        let p = window(&g, 0, 0, 1).unwrap();
        // Explicit replicate-padding enumeration around the corner.
        assert_eq!(p.values, vec![1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 4.0, 4.0, 5.0]);
    }

    #[test]
    fn window_matches_clamping_oracle_everywhere() {
        let data: Vec<f32> = (0..25).map(|v| v as f32 * 1.5 - 3.0).collect();
        let g = RasterGrid::from_data(5, 5, 1, t10(), data).unwrap();
        for cr in 0..5 {
            for cc in 0..5 {
                let p = window(&g, cc, cr, 2).unwrap();
                let mut k = 0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let r = (cr as i64 + dy).clamp(0, 4) as usize;
                        let c = (cc as i64 + dx).clamp(0, 4) as usize;
                        assert_eq!(p.values[k], g.get(0, c, r));
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn window_center_outside_errors() {
        let g = RasterGrid::filled(3, 3, 1, t10(), 0.0);
        assert!(matches!(window(&g, 3, 0, 1), Err(Error::Bounds(_))));
    }

    #[test]
    fn stats_two_point_population_sd() {
        let g = RasterGrid::from_data(2, 1, 1, t10(), vec![0.0, 100.0]).unwrap();
        let s = grid_stats(&g, 0, None).unwrap();
        assert_eq!(s.n_valid, 2);
        assert!((s.mean - 50.0).abs() < 1e-9);
        assert!((s.sd - 50.0).abs() < 1e-9);
        assert_eq!(s.hist_counts.iter().sum::<u64>(), 2);
    }

    #[test]
    fn stats_all_nodata() {
        let g = RasterGrid::filled(2, 2, 1, t10(), DEFAULT_NODATA);
        let s = grid_stats(&g, 0, None).unwrap();
        assert_eq!(s.n_valid, 0);
        assert!(s.mean.is_nan());
    }

    #[test]
    fn stats_mask_excludes() {
        let g = RasterGrid::from_data(2, 1, 1, t10(), vec![0.0, 100.0]).unwrap();
        let m = RasterGrid::from_data(2, 1, 1, t10(), vec![0.0, 1.0]).unwrap();
        let s = grid_stats(&g, 0, Some(&m)).unwrap();
        assert_eq!(s.n_valid, 1);
        assert!((s.mean - 100.0).abs() < 1e-9);
        assert_eq!(s.sd, 0.0);
    }

    #[test]
    fn stats_binned_clamps_into_end_bins() {
        let g = RasterGrid::from_data(3, 1, 1, t10(), vec![-5.0, 50.0, 105.0]).unwrap();
        let s = grid_stats_binned(&g, 0, None, 0.0, 100.0, 10).unwrap();
        assert_eq!(s.hist_counts.iter().sum::<u64>(), 3);
        assert_eq!(s.hist_counts[0], 1);
        assert_eq!(s.hist_counts[9], 1);
    }
}
