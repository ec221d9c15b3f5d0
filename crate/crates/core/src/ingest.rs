//! Scene catalogs and image selection.
//!
//! Two selection procedures feed the shade model. At training time, scenes
//! are pre-culled per acquisition window by scene-level cloud cover, filtered
//! to within 120 days of the ground-truth date, and the ten temporally
//! closest are kept. At map time, the ten least cloud-affected scenes of the
//! growing season are kept per tile. All ordering is made deterministic by
//! explicit tie-break keys, so repeated runs select identical scenes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::raster::{read_cgrd, upsample_nearest, RasterGrid};
use crate::{Error, Result};

/// Number of spectral bands per scene (L2A product, B01-B09, B8A, B11, B12).
pub const N_BANDS: usize = 12;

/// File names of the per-scene band grids inside a scene directory, in
/// channel order: B01..B08, B8A, B11, B12, B09.
pub const BAND_FILES: [&str; N_BANDS] = [
    "B01.cgrd", "B02.cgrd", "B03.cgrd", "B04.cgrd", "B05.cgrd", "B06.cgrd", "B07.cgrd",
    "B08.cgrd", "B8A.cgrd", "B11.cgrd", "B12.cgrd", "B09.cgrd",
];

pub const CLOUD_MASK_FILE: &str = "cloudmask.cgrd";

/// One satellite acquisition of one tile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub tile_id: String,
    pub date: NaiveDate,
    /// Scene-level cloud cover attribute in percent.
    pub cloud_pct: f32,
    /// Directory holding B01.cgrd .. B12.cgrd plus cloudmask.cgrd.
    pub band_dir: PathBuf,
}

impl SceneRecord {
    pub fn band_paths(&self) -> Vec<PathBuf> {
        BAND_FILES.iter().map(|f| self.band_dir.join(f)).collect()
    }

    pub fn cloud_mask_path(&self) -> PathBuf {
        self.band_dir.join(CLOUD_MASK_FILE)
    }
}

/// Inclusive date window.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SelectionWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl SelectionWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(Error::Argument(format!(
                "window start {start} after end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

/// Read-only scene catalog.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub scenes: Vec<SceneRecord>,
}

impl Catalog {
    /// Load a catalog CSV with header `scene_id,tile_id,date,cloud_pct,band_dir`.
    /// Relative band directories resolve against the catalog's location, so
    /// bundles stay relocatable.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            scene_id: String,
            tile_id: String,
            date: String,
            cloud_pct: f32,
            band_dir: String,
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut rdr = csv::Reader::from_path(path)?;
        let mut scenes = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
                .map_err(|e| Error::Format(format!("bad date '{}': {e}", row.date)))?;
            if !(0.0..=100.0).contains(&row.cloud_pct) {
                return Err(Error::Argument(format!(
                    "cloud_pct {} out of [0,100] for scene {}",
                    row.cloud_pct, row.scene_id
                )));
            }
            let band_dir = PathBuf::from(row.band_dir);
            let band_dir = if band_dir.is_absolute() {
                band_dir
            } else {
                base.join(band_dir)
            };
            scenes.push(SceneRecord {
                scene_id: row.scene_id,
                tile_id: row.tile_id,
                date,
                cloud_pct: row.cloud_pct,
                band_dir,
            });
        }
        Ok(Self { scenes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scene_id", "tile_id", "date", "cloud_pct", "band_dir"])?;
        for s in &self.scenes {
            w.write_record([
                s.scene_id.as_str(),
                s.tile_id.as_str(),
                &s.date.format("%Y-%m-%d").to_string(),
                &format!("{}", s.cloud_pct),
                &s.band_dir.display().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn tile_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.scenes.iter().map(|s| s.tile_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Parameters of the training-time selection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainingSelection {
    /// Scenes kept per window after the cloud-cover pre-cull.
    pub n_precull: usize,
    /// Largest allowed |scene date - ground-truth date| in days (inclusive).
    pub max_days: i64,
    /// Temporally closest scenes retained at the end.
    pub n_keep: usize,
}

impl Default for TrainingSelection {
    fn default() -> Self {
        Self {
            n_precull: 20,
            max_days: 120,
            n_keep: 10,
        }
    }
}

/// Total order on cloud percentages with date/id tie-breaks.
fn cloud_key(s: &SceneRecord) -> (i64, NaiveDate, &str) {
    // Two decimals of cloud percent are plenty; an integral key avoids
    // float-ordering corner cases.
    ((s.cloud_pct as f64 * 100.0).round() as i64, s.date, &s.scene_id)
}

fn temporal_key(s: &SceneRecord, gt_date: NaiveDate) -> (i64, NaiveDate, &str) {
    let delta = (s.date - gt_date).num_days().abs();
    (delta, s.date, &s.scene_id)
}

/// Select training scenes for one farm.
///
/// `tiles` lists the tiles the farm touches; selections run per tile and the
/// union is re-truncated by the temporal rule. Returns an empty vector when
/// nothing survives (the farm is skipped upstream with a logged reason).
pub fn select_training_scenes<'a>(
    catalog: &'a Catalog,
    tiles: &[String],
    windows: &[SelectionWindow],
    gt_date: NaiveDate,
    params: TrainingSelection,
) -> Vec<&'a SceneRecord> {
    let mut union: Vec<&SceneRecord> = Vec::new();
    for tile in tiles {
        let mut per_tile: Vec<&SceneRecord> = Vec::new();
        for window in windows {
            let mut in_window: Vec<&SceneRecord> = catalog
                .scenes
                .iter()
                .filter(|s| &s.tile_id == tile && window.contains(s.date))
                .collect();
            in_window.sort_by(|a, b| cloud_key(a).cmp(&cloud_key(b)));
            in_window.truncate(params.n_precull);
            per_tile.extend(in_window);
        }
        per_tile.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        per_tile.dedup_by(|a, b| a.scene_id == b.scene_id);
        per_tile.retain(|s| (s.date - gt_date).num_days().abs() <= params.max_days);
        per_tile.sort_by(|a, b| temporal_key(a, gt_date).cmp(&temporal_key(b, gt_date)));
        per_tile.truncate(params.n_keep);
        union.extend(per_tile);
    }
    union.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    union.dedup_by(|a, b| a.scene_id == b.scene_id);
    union.sort_by(|a, b| temporal_key(a, gt_date).cmp(&temporal_key(b, gt_date)));
    union.truncate(params.n_keep);
    union
}

/// Select the least cloud-affected in-window scenes of a tile for mapping.
pub fn select_map_scenes<'a>(
    catalog: &'a Catalog,
    tile_id: &str,
    window: SelectionWindow,
    n_keep: usize,
) -> Vec<&'a SceneRecord> {
    let mut scenes: Vec<&SceneRecord> = catalog
        .scenes
        .iter()
        .filter(|s| s.tile_id == tile_id && window.contains(s.date))
        .collect();
    scenes.sort_by(|a, b| cloud_key(a).cmp(&cloud_key(b)));
    scenes.truncate(n_keep);
    scenes
}

/// Loaded per-scene raster data at the common 10 m grid.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub bands: RasterGrid,
    pub cloud_mask: RasterGrid,
}

/// Load a scene's 12 bands plus cloud mask, nearest-upsampling coarser bands
/// (20 m, 60 m) to the finest band's 10 m grid.
pub fn load_scene(scene: &SceneRecord) -> Result<SceneData> {
    let grids: Vec<RasterGrid> = scene
        .band_paths()
        .iter()
        .map(|p| read_cgrd(p))
        .collect::<Result<_>>()?;
    let (w, h) = grids
        .iter()
        .map(|g| (g.width, g.height))
        .max()
        .expect("twelve bands");
    let mut data = Vec::with_capacity(w * h * N_BANDS);
    let mut transform = None;
    let mut nodata = None;
    for g in grids {
        let g = if g.width == w && g.height == h {
            g
        } else {
            if w % g.width != 0 || h / g.height != w / g.width {
                return Err(Error::Alignment(format!(
                    "band grid {}x{} not an integer subdivision of {}x{}",
                    g.width, g.height, w, h
                )));
            }
            upsample_nearest(&g, w / g.width)?
        };
        if let Some(t) = transform {
            if g.transform != t {
                return Err(Error::Alignment("band transforms disagree".into()));
            }
        } else {
            transform = Some(g.transform);
        }
        nodata.get_or_insert(g.nodata);
        data.extend_from_slice(g.band(0));
    }
    let mut bands = RasterGrid::from_data(w, h, N_BANDS, transform.unwrap(), data)?;
    bands.nodata = nodata.unwrap();
    let cloud_mask = read_cgrd(&scene.cloud_mask_path())?;
    if cloud_mask.width != w || cloud_mask.height != h {
        return Err(Error::Alignment(format!(
            "cloud mask {}x{} vs bands {}x{}",
            cloud_mask.width, cloud_mask.height, w, h
        )));
    }
    Ok(SceneData { bands, cloud_mask })
}

/// Per-pixel validity: 1 where the cloud mask is clear and all 12 bands hold
/// data, else 0. Cloud shadows are deliberately not masked.
pub fn validity_mask(scene: &SceneData) -> Result<RasterGrid> {
    let b = &scene.bands;
    let m = &scene.cloud_mask;
    if b.width != m.width || b.height != m.height {
        return Err(Error::Alignment(format!(
            "cloud mask {}x{} vs bands {}x{}",
            m.width, m.height, b.width, b.height
        )));
    }
    let n = b.width * b.height;
    let mut out = RasterGrid::filled(b.width, b.height, 1, b.transform, 1.0);
    let cloud = m.band(0);
    {
        let v = out.band_mut(0);
        for i in 0..n {
            if cloud[i] != 0.0 {
                v[i] = 0.0;
                continue;
            }
            for band in 0..N_BANDS {
                if b.is_nodata(b.data[band * n + i]) {
                    v[i] = 0.0;
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn scene(id: &str, tile: &str, date: &str, cloud: f32) -> SceneRecord {
        SceneRecord {
            scene_id: id.into(),
            tile_id: tile.into(),
            date: d(date),
            cloud_pct: cloud,
            band_dir: PathBuf::from("unused"),
        }
    }

    fn window(a: &str, b: &str) -> SelectionWindow {
        SelectionWindow::new(d(a), d(b)).unwrap()
    }

    #[test]
    fn day_bound_excludes_strictly_greater() {
        let catalog = Catalog {
            scenes: vec![
                scene("s1", "T1", "2022-06-06", 10.0), // +5 days
                scene("s2", "T1", "2022-09-30", 10.0), // +121 days
                scene("s3", "T1", "2022-07-31", 10.0), // +60 days
            ],
        };
        let got = select_training_scenes(
            &catalog,
            &["T1".into()],
            &[window("2022-01-01", "2022-12-31")],
            d("2022-06-01"),
            TrainingSelection::default(),
        );
        let ids: Vec<&str> = got.iter().map(|s| s.scene_id.as_str()).collect();
        assert_eq!(ids, vec!["s1", "s3"]);
    }

    #[test]
    fn day_bound_is_inclusive_at_limit() {
        let catalog = Catalog {
            scenes: vec![scene("s1", "T1", "2022-09-29", 10.0)], // exactly +120
        };
        let got = select_training_scenes(
            &catalog,
            &["T1".into()],
            &[window("2022-01-01", "2022-12-31")],
            d("2022-06-01"),
            TrainingSelection::default(),
        );
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn precull_keeps_twenty_per_window() {
        let scenes: Vec<SceneRecord> = (0..25)
            .map(|i| scene(&format!("s{i:02}"), "T1", "2022-06-01", i as f32))
            .collect();
        let catalog = Catalog { scenes };
        let got = select_training_scenes(
            &catalog,
            &["T1".into()],
            &[window("2022-01-01", "2022-12-31")],
            d("2022-06-01"),
            TrainingSelection {
                n_keep: 25,
                ..Default::default()
            },
        );
        // Pre-cull keeps the 20 least cloudy; all are then temporally equal.
        assert_eq!(got.len(), 20);
        assert!(got.iter().all(|s| s.cloud_pct < 20.0));
    }

    #[test]
    fn fewer_than_requested_returned() {
        let catalog = Catalog {
            scenes: vec![
                scene("a", "T1", "2022-06-02", 1.0),
                scene("b", "T1", "2022-06-03", 2.0),
                scene("c", "T1", "2022-06-04", 3.0),
            ],
        };
        let got = select_training_scenes(
            &catalog,
            &["T1".into()],
            &[window("2022-01-01", "2022-12-31")],
            d("2022-06-01"),
            TrainingSelection::default(),
        );
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn training_selection_sorted_by_temporal_key() {
        let catalog = Catalog {
            scenes: vec![
                scene("late", "T1", "2022-06-11", 1.0),
                scene("early", "T1", "2022-05-22", 1.0), // same |delta| = 10
                scene("near", "T1", "2022-06-02", 50.0),
            ],
        };
        let got = select_training_scenes(
            &catalog,
            &["T1".into()],
            &[window("2022-01-01", "2022-12-31")],
            d("2022-06-01"),
            TrainingSelection::default(),
        );
        let ids: Vec<&str> = got.iter().map(|s| s.scene_id.as_str()).collect();
        // |1| day first, then the 10-day pair with the earlier date first.
        assert_eq!(ids, vec!["near", "early", "late"]);
    }

    #[test]
    fn multi_tile_union_retruncated() {
        let mut scenes = Vec::new();
        for i in 0..8 {
            scenes.push(scene(&format!("a{i}"), "T1", "2022-06-02", i as f32));
            scenes.push(scene(&format!("b{i}"), "T2", "2022-06-03", i as f32));
        }
        let catalog = Catalog { scenes };
        let got = select_training_scenes(
            &catalog,
            &["T1".into(), "T2".into()],
            &[window("2022-01-01", "2022-12-31")],
            d("2022-06-01"),
            TrainingSelection::default(),
        );
        assert_eq!(got.len(), 10);
        // All of T1 (1 day away) beat T2 (2 days away).
        assert_eq!(got.iter().filter(|s| s.tile_id == "T1").count(), 8);
    }

    #[test]
    fn map_selection_sorts_by_cloud() {
        let catalog = Catalog {
            scenes: vec![
                scene("a", "T1", "2022-05-01", 50.0),
                scene("b", "T1", "2022-06-01", 5.0),
                scene("c", "T1", "2022-07-01", 10.0),
                scene("d", "T1", "2022-08-01", 99.0),
            ],
        };
        let got = select_map_scenes(&catalog, "T1", window("2022-04-01", "2022-11-30"), 10);
        let clouds: Vec<f32> = got.iter().map(|s| s.cloud_pct).collect();
        assert_eq!(clouds, vec![5.0, 10.0, 50.0, 99.0]);
    }

    #[test]
    fn map_selection_keeps_ten_of_twelve() {
        let scenes: Vec<SceneRecord> = (0..12)
            .map(|i| scene(&format!("s{i:02}"), "T1", "2022-06-15", i as f32))
            .collect();
        let catalog = Catalog { scenes };
        let got = select_map_scenes(&catalog, "T1", window("2022-04-01", "2022-11-30"), 10);
        assert_eq!(got.len(), 10);
    }

    #[test]
    fn map_selection_excludes_out_of_window() {
        let catalog = Catalog {
            scenes: vec![
                scene("march", "T1", "2022-03-31", 0.0),
                scene("april", "T1", "2022-04-01", 90.0),
            ],
        };
        let got = select_map_scenes(&catalog, "T1", window("2022-04-01", "2022-11-30"), 10);
        let ids: Vec<&str> = got.iter().map(|s| s.scene_id.as_str()).collect();
        assert_eq!(ids, vec!["april"]);
    }

    #[test]
    fn map_selection_is_prefix_of_cloud_order() {
        let scenes: Vec<SceneRecord> = (0..9)
            .map(|i| scene(&format!("s{i}"), "T1", "2022-06-15", ((i * 37) % 11) as f32))
            .collect();
        let catalog = Catalog { scenes };
        let all = select_map_scenes(&catalog, "T1", window("2022-04-01", "2022-11-30"), 100);
        let five = select_map_scenes(&catalog, "T1", window("2022-04-01", "2022-11-30"), 5);
        for (a, b) in five.iter().zip(all.iter()) {
            assert_eq!(a.scene_id, b.scene_id);
        }
    }

    fn scene_data(w: usize, h: usize) -> SceneData {
        let t = GeoTransform::new(0.0, h as f64 * 10.0, 10.0, -10.0).unwrap();
        SceneData {
            bands: RasterGrid::filled(w, h, N_BANDS, t, 0.5),
            cloud_mask: RasterGrid::filled(w, h, 1, t, 0.0),
        }
    }

    #[test]
    fn validity_all_clear() {
        let sd = scene_data(3, 2);
        let m = validity_mask(&sd).unwrap();
        assert!(m.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn validity_cloud_wins() {
        let mut sd = scene_data(3, 2);
        sd.cloud_mask.set(0, 1, 1, 1.0);
        let m = validity_mask(&sd).unwrap();
        assert_eq!(m.get(0, 1, 1), 0.0);
        assert_eq!(m.get(0, 0, 0), 1.0);
    }

    #[test]
    fn validity_is_band_conjunction() {
        let mut sd = scene_data(4, 3);
        // Independent conjunction oracle over scattered nodata placements.
        let nodata = sd.bands.nodata;
        sd.bands.set(5, 2, 1, nodata);
        sd.bands.set(11, 0, 0, nodata);
        sd.cloud_mask.set(0, 3, 2, 1.0);
        let m = validity_mask(&sd).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mut want = if sd.cloud_mask.get(0, c, r) == 0.0 { 1.0 } else { 0.0 };
                for b in 0..N_BANDS {
                    if sd.bands.is_nodata(sd.bands.get(b, c, r)) {
                        want = 0.0;
                    }
                }
                assert_eq!(m.get(0, c, r), want, "({c},{r})");
            }
        }
    }

    #[test]
    fn catalog_roundtrip() {
        let dir = std::env::temp_dir().join("canopy-ledger-ingest-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("catalog.csv");
        let catalog = Catalog {
            scenes: vec![scene("s1", "T1", "2022-06-01", 12.5)],
        };
        catalog.save(&p).unwrap();
        let back = Catalog::load(&p).unwrap();
        assert_eq!(back.scenes.len(), 1);
        assert_eq!(back.scenes[0].scene_id, "s1");
        assert_eq!(back.scenes[0].cloud_pct, 12.5);
    }
}
