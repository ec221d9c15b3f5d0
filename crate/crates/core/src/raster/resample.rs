//! Grid resampling.

use rayon::prelude::*;

use super::{GeoTransform, RasterGrid};
use crate::{Error, Result};

/// Bilinear resampling onto a new grid geometry.
///
/// Each target cell takes the bilinear interpolation of the source at the
/// target cell center. A target cell becomes nodata when its center falls
/// outside the source pixel-center lattice, or when any of the (up to) four
/// interpolation neighbors is nodata — cloud gaps must not bleed into
/// downstream statistics.
pub fn resample_bilinear(
    grid: &RasterGrid,
    target_transform: GeoTransform,
    target_w: usize,
    target_h: usize,
) -> Result<RasterGrid> {
    let (sx0, sy0, sx1, sy1) = grid.extent();
    let target_probe = RasterGrid {
        width: target_w,
        height: target_h,
        bands: 1,
        transform: target_transform,
        nodata: grid.nodata,
        crs_label: String::new(),
        data: Vec::new(),
    };
    let (tx0, ty0, tx1, ty1) = target_probe.extent();
    if tx1 <= sx0 || tx0 >= sx1 || ty1 <= sy0 || ty0 >= sy1 {
        return Err(Error::EmptyExtent(
            "source and target extents do not overlap".into(),
        ));
    }

    let mut out = RasterGrid::filled(target_w, target_h, grid.bands, target_transform, grid.nodata);
    out.nodata = grid.nodata;
    out.crs_label = grid.crs_label.clone();
    let w = grid.width;
    let h = grid.height;

    for band in 0..grid.bands {
        let src = grid.band(band);
        let rows: Vec<Vec<f32>> = (0..target_h)
            .into_par_iter()
            .map(|tr| {
                let mut row_vals = vec![grid.nodata; target_w];
                for (tc, slot) in row_vals.iter_mut().enumerate() {
                    let (x, y) = target_transform.pixel_center(tc, tr);
                    let (u, v) = grid.transform.map_to_pixel(x, y);
                    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
                        continue;
                    }
                    let c0 = u.floor() as usize;
                    let r0 = v.floor() as usize;
                    let fx = u - c0 as f64;
                    let fy = v - r0 as f64;
                    let c1 = if fx > 0.0 { c0 + 1 } else { c0 };
                    let r1 = if fy > 0.0 { r0 + 1 } else { r0 };
                    let v00 = src[r0 * w + c0];
                    let v10 = src[r0 * w + c1];
                    let v01 = src[r1 * w + c0];
                    let v11 = src[r1 * w + c1];
                    if grid.is_nodata(v00)
                        || grid.is_nodata(v10)
                        || grid.is_nodata(v01)
                        || grid.is_nodata(v11)
                    {
                        continue;
                    }
                    let top = v00 as f64 * (1.0 - fx) + v10 as f64 * fx;
                    let bot = v01 as f64 * (1.0 - fx) + v11 as f64 * fx;
                    *slot = (top * (1.0 - fy) + bot * fy) as f32;
                }
                row_vals
            })
            .collect();
        let out_band = out.band_mut(band);
        for (tr, row_vals) in rows.into_iter().enumerate() {
            out_band[tr * target_w..(tr + 1) * target_w].copy_from_slice(&row_vals);
        }
    }
    Ok(out)
}

/// Integer-factor nearest-neighbor upsampling: output pixel `(i, j)` copies
/// input pixel `(i / factor, j / factor)`.
pub fn upsample_nearest(grid: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    if factor == 0 {
        return Err(Error::Argument("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let w = grid.width * factor;
    let h = grid.height * factor;
    let t = grid.transform;
    let transform = GeoTransform::new(
        t.origin_x,
        t.origin_y,
        t.pixel_size_x / factor as f64,
        t.pixel_size_y / factor as f64,
    )?;
    let mut out = RasterGrid::filled(w, h, grid.bands, transform, 0.0);
    out.nodata = grid.nodata;
    out.crs_label = grid.crs_label.clone();
    for band in 0..grid.bands {
        let src = grid.band(band);
        let dst = out.band_mut(band);
        for j in 0..h {
            let sj = j / factor;
            let src_row = &src[sj * grid.width..(sj + 1) * grid.width];
            let dst_row = &mut dst[j * w..(j + 1) * w];
            for (i, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[i / factor];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA;

    fn gt(ox: f64, oy: f64, px: f64, py: f64) -> GeoTransform {
        GeoTransform::new(ox, oy, px, py).unwrap()
    }

    #[test]
    fn bilinear_preserves_constants() {
        let g = RasterGrid::filled(4, 4, 1, gt(0.0, 40.0, 10.0, -10.0), 7.0);
        // Finer target inside the source extent.
        let out = resample_bilinear(&g, gt(5.0, 35.0, 5.0, -5.0), 6, 6).unwrap();
        assert!(out.data.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn bilinear_center_of_2x2() {
        let g =
            RasterGrid::from_data(2, 2, 1, gt(0.0, 20.0, 10.0, -10.0), vec![0.0, 10.0, 20.0, 30.0])
                .unwrap();
        // One target cell whose center lands exactly at the grid's geometric
        // center (10, 10): the hand-evaluated bilinear value is 15.
        let out = resample_bilinear(&g, gt(9.0, 11.0, 2.0, -2.0), 1, 1).unwrap();
        assert!((out.get(0, 0, 0) - 15.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_outside_extent_is_nodata() {
        let g = RasterGrid::filled(2, 2, 1, gt(0.0, 20.0, 10.0, -10.0), 3.0);
        // Target overlaps but its right column centers fall beyond the
        // source pixel-center lattice.
        let out = resample_bilinear(&g, gt(0.0, 20.0, 15.0, -15.0), 2, 1).unwrap();
        assert_eq!(out.get(0, 1, 0), DEFAULT_NODATA);
    }

    #[test]
    fn bilinear_nodata_neighbor_poisons() {
        let mut g =
            RasterGrid::from_data(2, 2, 1, gt(0.0, 20.0, 10.0, -10.0), vec![0.0, 10.0, 20.0, 30.0])
                .unwrap();
        g.set(0, 1, 1, DEFAULT_NODATA);
        let out = resample_bilinear(&g, gt(9.0, 11.0, 2.0, -2.0), 1, 1).unwrap();
        assert_eq!(out.get(0, 0, 0), DEFAULT_NODATA);
    }

    #[test]
    fn bilinear_zero_overlap_errors() {
        let g = RasterGrid::filled(2, 2, 1, gt(0.0, 20.0, 10.0, -10.0), 3.0);
        let r = resample_bilinear(&g, gt(1000.0, 20.0, 10.0, -10.0), 2, 2);
        assert!(matches!(r, Err(Error::EmptyExtent(_))));
    }

    #[test]
    fn bilinear_reproduces_affine_fields() {
        // f(x, y) = a + b x + c y sampled at cell centers.
        let (a, b, c) = (3.0f64, 0.25, -0.125);
        let t = gt(0.0, 640.0, 10.0, -10.0);
        let mut g = RasterGrid::filled(64, 64, 1, t, 0.0);
        for r in 0..64 {
            for col in 0..64 {
                let (x, y) = t.pixel_center(col, r);
                g.set(0, col, r, (a + b * x + c * y) as f32);
            }
        }
        let tt = gt(40.0, 600.0, 7.0, -7.0);
        let out = resample_bilinear(&g, tt, 70, 70).unwrap();
        for r in 0..70 {
            for col in 0..70 {
                let v = out.get(0, col, r);
                if out.is_nodata(v) {
                    continue;
                }
                let (x, y) = tt.pixel_center(col, r);
                let want = a + b * x + c * y;
                assert!(
                    ((v as f64 - want) / want.abs().max(1.0)).abs() < 1e-4,
                    "({col},{r}): {v} vs {want}"
                );
            }
        }
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let g = RasterGrid::from_data(2, 1, 1, gt(0.0, 10.0, 10.0, -10.0), vec![1.0, 2.0]).unwrap();
        assert_eq!(upsample_nearest(&g, 1).unwrap(), g);
    }

    #[test]
    fn upsample_replicates_constant() {
        let g = RasterGrid::from_data(1, 1, 1, gt(0.0, 10.0, 10.0, -10.0), vec![5.0]).unwrap();
        let out = upsample_nearest(&g, 3).unwrap();
        assert_eq!(out.width, 3);
        assert_eq!(out.height, 3);
        assert!(out.data.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_index_arithmetic() {
        let g = RasterGrid::from_data(2, 1, 1, gt(0.0, 10.0, 10.0, -10.0), vec![1.0, 2.0]).unwrap();
        let out = upsample_nearest(&g, 2).unwrap();
        assert_eq!(out.width, 4);
        assert_eq!(out.height, 2);
        assert_eq!(out.band(0)[0..4], [1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn upsample_zero_factor_errors() {
        let g = RasterGrid::filled(1, 1, 1, gt(0.0, 10.0, 10.0, -10.0), 0.0);
        assert!(upsample_nearest(&g, 0).is_err());
    }

    #[test]
    fn upsample_introduces_no_new_values() {
        let g = RasterGrid::from_data(
            3,
            2,
            1,
            gt(0.0, 20.0, 10.0, -10.0),
            vec![1.0, 4.0, 2.0, 8.0, 16.0, 32.0],
        )
        .unwrap();
        let out = upsample_nearest(&g, 4).unwrap();
        for v in &out.data {
            assert!(g.data.contains(v));
        }
    }
}
