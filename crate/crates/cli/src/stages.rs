//! Pipeline stage implementations.
//!
//! Every subcommand fronts exactly one stage. A stage reads prior-stage
//! artifacts (erroring with the missing stage's name when absent), writes
//! its outputs under the run directory, and records input/output digests in
//! the run manifest. Re-running with identical inputs reproduces identical
//! output digests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use canopy_ledger::agbdnet::{
    self, extract_patch, filter_gedi, make_stripe_split, GediFootprint, NetArch, StripeRole,
    TrainConfig, TrainSample,
};
use canopy_ledger::agroclim::{
    bioclim, classify_zones, cluster_types, standardize, vif_select, ClusterConfig,
    MonthlyClimatology, ZoneConfig, N_BIOCLIM,
};
use canopy_ledger::boosting::{read_cgbm, write_cgbm};
use canopy_ledger::carbon::{
    self, carbon_to_co2e, fit_regression, landuse_stats, offset_fraction, pair_maps, scenario,
    PairedPixels, PosteriorDraws, ScenarioResult,
};
use canopy_ledger::groundtruth::{
    canopy_height, cell_shade_fraction, load_farms, shade_mask, threshold_calibration,
    FarmRecord, ShadeTargetCell, SHADE_HEIGHT_THRESHOLD_M,
};
use canopy_ledger::ingest::{
    load_scene, select_map_scenes, select_training_scenes, Catalog, SceneData, TrainingSelection,
};
use canopy_ledger::raster::{
    grid_stats_binned, read_cgrd, resample_bilinear, write_cgrd, GeoTransform, RasterGrid,
    DEFAULT_NODATA,
};
use canopy_ledger::shademap::{
    cover_exceedance, make_split, predict_map, train_shade_model, zonal_stats,
};
use canopy_ledger::synth::{generate_world, load_monoculture, WorldSpec};
use canopy_ledger::{Error, Result};

use crate::config::Config;
use crate::manifest::{digest_file, digest_tree, sha256_hex, RunManifest, StageRecord};

pub const STAGE_NAMES: [&str; 12] = [
    "synth",
    "ingest",
    "groundtruth",
    "train-shade",
    "map-shade",
    "train-agbd",
    "map-agbd",
    "fit-carbon",
    "scenario",
    "zones",
    "landuse",
    "report",
];

/// Mix the master seed into a stage-specific one.
fn mix_seed(master: u64, stage: u64) -> u64 {
    master
        .wrapping_mul(0x9e3779b97f4a7c15)
        .rotate_left(17)
        .wrapping_add(stage)
}

/// Run one stage by name, updating the manifest.
pub fn run_stage(config: &Config, name: &str) -> Result<()> {
    let t0 = Instant::now();
    let run_dir = config.run_dir.clone();
    std::fs::create_dir_all(&run_dir)?;
    let canonical = config.canonical_json()?;
    std::fs::write(run_dir.join("config.resolved.json"), &canonical)?;

    let (inputs, outputs) = match name {
        "synth" => stage_synth(config)?,
        "ingest" => stage_ingest(config)?,
        "groundtruth" => stage_groundtruth(config)?,
        "train-shade" => stage_train_shade(config)?,
        "map-shade" => stage_map_shade(config)?,
        "train-agbd" => stage_train_agbd(config)?,
        "map-agbd" => stage_map_agbd(config)?,
        "fit-carbon" => stage_fit_carbon(config)?,
        "scenario" => stage_scenario(config)?,
        "zones" => stage_zones(config)?,
        "landuse" => stage_landuse(config)?,
        "report" => crate::report::stage_report(config)?,
        other => {
            return Err(Error::Argument(format!(
                "unknown stage '{other}' (expected one of {STAGE_NAMES:?})"
            )))
        }
    };

    let mut manifest = RunManifest::load(&run_dir)?;
    manifest.config_hash = sha256_hex(&canonical);
    manifest.stages.insert(
        name.to_string(),
        StageRecord {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            inputs,
            outputs,
            duration_ms: t0.elapsed().as_millis() as u64,
        },
    );
    manifest.save(&run_dir)?;
    log::info!("stage {name} finished in {:?}", t0.elapsed());
    Ok(())
}

/// Run every stage in order.
pub fn run_all(config: &Config) -> Result<()> {
    for name in STAGE_NAMES {
        run_stage(config, name)?;
    }
    Ok(())
}

type Digests = BTreeMap<String, String>;

fn require(path: &Path, produced_by: &str) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::Dependency {
            artifact: path.display().to_string(),
            stage: produced_by.to_string(),
        });
    }
    Ok(path.to_path_buf())
}

pub fn world_dir(config: &Config) -> PathBuf {
    config.run_dir.join("world")
}

fn tile_ids(config: &Config) -> Result<Vec<String>> {
    let dir = world_dir(config).join("tiles");
    require(&dir, "synth")?;
    let mut ids: Vec<String> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    ids.sort();
    Ok(ids)
}

fn tile_raster(config: &Config, tile: &str, name: &str) -> Result<RasterGrid> {
    let p = world_dir(config).join("tiles").join(tile).join(name);
    require(&p, "synth")?;
    read_cgrd(&p)
}

// ---------------------------------------------------------------------------
// synth

fn stage_synth(config: &Config) -> Result<(Digests, Digests)> {
    let out = world_dir(config);
    if out.exists() {
        std::fs::remove_dir_all(&out)?;
    }
    let spec = WorldSpec {
        seed: mix_seed(config.seed, config.world.seed),
        ..config.world.clone()
    };
    generate_world(&spec, &out)?;
    Ok((BTreeMap::new(), digest_tree(&out)?))
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct Selections {
    /// Training scene ids per farm.
    pub training: BTreeMap<String, Vec<String>>,
    /// Farms skipped because no scene survived selection.
    pub skipped_farms: Vec<String>,
    /// Map scene ids per tile.
    pub map: BTreeMap<String, Vec<String>>,
}

/// Tile extents from the per-tile cocoa rasters.
fn tile_extents(config: &Config) -> Result<BTreeMap<String, (GeoTransform, usize, usize)>> {
    let mut out = BTreeMap::new();
    for id in tile_ids(config)? {
        let g = tile_raster(config, &id, "cocoa.cgrd")?;
        out.insert(id, (g.transform, g.width, g.height));
    }
    Ok(out)
}

fn farm_tiles(
    farm: &FarmRecord,
    extents: &BTreeMap<String, (GeoTransform, usize, usize)>,
) -> Vec<String> {
    let (bx0, by0, bx1, by1) = farm.boundary.bounding_box();
    let mut tiles = Vec::new();
    for (id, (t, w, h)) in extents {
        let x0 = t.origin_x;
        let x1 = t.origin_x + *w as f64 * t.pixel_size_x;
        let ytop = t.origin_y;
        let ybot = t.origin_y + *h as f64 * t.pixel_size_y;
        if bx1 >= x0 && bx0 <= x1 && by1 >= ybot && by0 <= ytop {
            tiles.push(id.clone());
        }
    }
    tiles
}

fn stage_ingest(config: &Config) -> Result<(Digests, Digests)> {
    let world = world_dir(config);
    let catalog_path = require(&world.join("catalog.csv"), "synth")?;
    let farms_path = require(&world.join("farms.csv"), "synth")?;
    let catalog = Catalog::load(&catalog_path)?;
    let farms = load_farms(&farms_path)?;
    let extents = tile_extents(config)?;

    let windows: Vec<_> = config
        .ingest
        .training_windows
        .iter()
        .map(|w| w.to_selection())
        .collect::<Result<_>>()?;
    let params = TrainingSelection {
        n_precull: config.ingest.n_precull,
        max_days: config.ingest.max_days,
        n_keep: config.ingest.n_keep,
    };

    let mut training = BTreeMap::new();
    let mut skipped_farms = Vec::new();
    for farm in &farms {
        let tiles = farm_tiles(farm, &extents);
        let selected = select_training_scenes(&catalog, &tiles, &windows, farm.gt_date, params);
        if selected.is_empty() {
            log::warn!(
                "farm {}: no scene within {} days of {}; skipped",
                farm.farm_id,
                params.max_days,
                farm.gt_date
            );
            skipped_farms.push(farm.farm_id.clone());
        } else {
            training.insert(
                farm.farm_id.clone(),
                selected.iter().map(|s| s.scene_id.clone()).collect(),
            );
        }
    }

    let map_window = config.ingest.map_window.to_selection()?;
    let mut map = BTreeMap::new();
    for tile in extents.keys() {
        let scenes = select_map_scenes(&catalog, tile, map_window, config.ingest.n_keep);
        if scenes.is_empty() {
            log::warn!("tile {tile}: no in-window scene; map will be nodata");
        }
        map.insert(
            tile.clone(),
            scenes.iter().map(|s| s.scene_id.clone()).collect(),
        );
    }

    let out_dir = config.run_dir.join("ingest");
    std::fs::create_dir_all(&out_dir)?;
    let selections = Selections {
        training,
        skipped_farms,
        map,
    };
    let out = out_dir.join("selections.json");
    std::fs::write(&out, serde_json::to_vec_pretty(&selections)?)?;

    let inputs = BTreeMap::from([
        ("catalog.csv".to_string(), digest_file(&catalog_path)?),
        ("farms.csv".to_string(), digest_file(&farms_path)?),
    ]);
    let outputs = BTreeMap::from([("selections.json".to_string(), digest_file(&out)?)]);
    Ok((inputs, outputs))
}

fn load_selections(config: &Config) -> Result<Selections> {
    let p = require(&config.run_dir.join("ingest/selections.json"), "ingest")?;
    Ok(serde_json::from_slice(&std::fs::read(p)?)?)
}

// ---------------------------------------------------------------------------
// groundtruth

#[derive(Debug, Serialize)]
struct CalibrationOut {
    per_farm: Vec<FarmCalibration>,
    pooled_fraction_below_8m: f64,
    threshold_m: f32,
}

#[derive(Debug, Serialize)]
struct FarmCalibration {
    farm_id: String,
    quantile_height_m: f32,
    fraction_below_8m: f64,
    n_pixels: u64,
}

fn stage_groundtruth(config: &Config) -> Result<(Digests, Digests)> {
    let world = world_dir(config);
    let farms_path = require(&world.join("farms.csv"), "synth")?;
    let farms = load_farms(&farms_path)?;
    let extents = tile_extents(config)?;
    let monoculture = load_monoculture(&world.join("monoculture.csv")).unwrap_or_default();

    let out_dir = config.run_dir.join("groundtruth");
    std::fs::create_dir_all(&out_dir)?;
    let targets_path = out_dir.join("targets.csv");
    let mut w = csv::Writer::from_path(&targets_path)?;
    w.write_record(["farm_id", "tile_id", "col", "row", "fraction", "n_drone_pixels"])?;

    let mut calibrations = Vec::new();
    for farm in &farms {
        let dsm = read_cgrd(&farm.dsm_path)?;
        let dtm = read_cgrd(&farm.dtm_path)?;
        let chm = canopy_height(&dsm, &dtm)?;
        let mask = shade_mask(&chm, SHADE_HEIGHT_THRESHOLD_M);
        for tile in farm_tiles(farm, &extents) {
            let (t, tw, th) = extents[&tile];
            let cells = cell_shade_fraction(&mask, &farm.boundary, &t, tw, th)?;
            for c in cells {
                w.write_record([
                    farm.farm_id.as_str(),
                    tile.as_str(),
                    &c.col.to_string(),
                    &c.row.to_string(),
                    &format!("{}", c.fraction),
                    &c.n_drone_pixels.to_string(),
                ])?;
            }
        }
        let polys: Vec<_> = monoculture
            .iter()
            .filter(|m| m.farm_id == farm.farm_id)
            .map(|m| m.polygon.clone())
            .collect();
        if !polys.is_empty() {
            let cal = threshold_calibration(&chm, &polys, 0.997)?;
            calibrations.push(FarmCalibration {
                farm_id: farm.farm_id.clone(),
                quantile_height_m: cal.quantile_height_m,
                fraction_below_8m: cal.fraction_below_8m,
                n_pixels: cal.n_pixels,
            });
        }
    }
    w.flush()?;
    drop(w);

    let total_px: u64 = calibrations.iter().map(|c| c.n_pixels).sum();
    let pooled = if total_px > 0 {
        calibrations
            .iter()
            .map(|c| c.fraction_below_8m * c.n_pixels as f64)
            .sum::<f64>()
            / total_px as f64
    } else {
        f64::NAN
    };
    let calibration_path = out_dir.join("calibration.json");
    std::fs::write(
        &calibration_path,
        serde_json::to_vec_pretty(&CalibrationOut {
            per_farm: calibrations,
            pooled_fraction_below_8m: pooled,
            threshold_m: SHADE_HEIGHT_THRESHOLD_M,
        })?,
    )?;

    let inputs = BTreeMap::from([("farms.csv".to_string(), digest_file(&farms_path)?)]);
    let outputs = BTreeMap::from([
        ("targets.csv".to_string(), digest_file(&targets_path)?),
        ("calibration.json".to_string(), digest_file(&calibration_path)?),
    ]);
    Ok((inputs, outputs))
}

fn load_targets(config: &Config) -> Result<BTreeMap<String, Vec<(String, ShadeTargetCell)>>> {
    let p = require(&config.run_dir.join("groundtruth/targets.csv"), "groundtruth")?;
    let mut rdr = csv::Reader::from_path(&p)?;
    let mut out: BTreeMap<String, Vec<(String, ShadeTargetCell)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let farm_id = rec.get(0).unwrap_or_default().to_string();
        let tile = rec.get(1).unwrap_or_default().to_string();
        let cell = ShadeTargetCell {
            col: rec.get(2).unwrap_or("0").parse().unwrap_or(0),
            row: rec.get(3).unwrap_or("0").parse().unwrap_or(0),
            fraction: rec.get(4).unwrap_or("0").parse().unwrap_or(0.0),
            n_drone_pixels: rec.get(5).unwrap_or("0").parse().unwrap_or(0),
        };
        out.entry(farm_id).or_default().push((tile, cell));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// train-shade

#[derive(Debug, Serialize)]
struct ShadeEvalOut {
    report: canopy_ledger::shademap::EvalReport,
    cv: canopy_ledger::shademap::ShadeCvSummary,
    best_config: canopy_ledger::boosting::GbrConfig,
    n_train_rows: usize,
    n_test_rows: usize,
}

fn stage_train_shade(config: &Config) -> Result<(Digests, Digests)> {
    use canopy_ledger::features::{channel_stack, fill_feature_row, N_FEATURES};
    use canopy_ledger::ingest::validity_mask;

    let world = world_dir(config);
    let catalog = Catalog::load(&require(&world.join("catalog.csv"), "synth")?)?;
    let selections = load_selections(config)?;
    let targets = load_targets(config)?;

    // Scene-major assembly: each selected scene is loaded once and serves
    // every farm that picked it.
    let mut scene_to_farms: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (farm, scene_ids) in &selections.training {
        if !targets.contains_key(farm) {
            continue;
        }
        for sid in scene_ids {
            scene_to_farms.entry(sid.clone()).or_default().push(farm.clone());
        }
    }
    let by_id: BTreeMap<&str, &canopy_ledger::ingest::SceneRecord> = catalog
        .scenes
        .iter()
        .map(|s| (s.scene_id.as_str(), s))
        .collect();

    let mut x: Vec<f32> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut farm_of_row: Vec<String> = Vec::new();
    for (scene_id, farm_ids) in &scene_to_farms {
        let record = by_id
            .get(scene_id.as_str())
            .ok_or_else(|| Error::Format(format!("scene {scene_id} missing from catalog")))?;
        let scene = load_scene(record)?;
        let stack = channel_stack(&scene.bands)?;
        let valid = validity_mask(&scene)?;
        for farm in farm_ids {
            for (tile, cell) in &targets[farm] {
                if tile != &record.tile_id {
                    continue;
                }
                let (c, r) = (cell.col as usize, cell.row as usize);
                if c >= stack.width || r >= stack.height || valid.get(0, c, r) == 0.0 {
                    continue;
                }
                let start = x.len();
                x.resize(start + N_FEATURES, 0.0);
                fill_feature_row(&stack, c, r, &mut x[start..]);
                y.push(cell.fraction as f64);
                farm_of_row.push(farm.clone());
            }
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyData("no valid training rows assembled".into()));
    }
    log::info!("assembled {} training rows", y.len());

    let farm_pixel_counts: Vec<(String, u64)> = targets
        .iter()
        .filter(|(f, _)| selections.training.contains_key(*f))
        .map(|(f, cells)| (f.clone(), cells.len() as u64))
        .collect();
    let split = make_split(
        &farm_pixel_counts,
        mix_seed(config.seed, config.shade.seed),
        config.shade.n_folds,
    );

    let (model, report, cv) = train_shade_model(
        &x,
        canopy_ledger::features::N_FEATURES,
        &y,
        &farm_of_row,
        &split,
        &config.shade.cv_grid,
    )?;

    let out_dir = config.run_dir.join("shade");
    std::fs::create_dir_all(&out_dir)?;
    let model_path = out_dir.join("model.cgbm");
    write_cgbm(&model_path, &model)?;
    let split_path = out_dir.join("split.json");
    std::fs::write(&split_path, serde_json::to_vec_pretty(&split)?)?;
    let eval_path = out_dir.join("eval.json");
    let n_test_rows = farm_of_row.iter().filter(|f| split.is_test(f)).count();
    std::fs::write(
        &eval_path,
        serde_json::to_vec_pretty(&ShadeEvalOut {
            best_config: config.shade.cv_grid[cv.best_index],
            report,
            cv,
            n_train_rows: y.len() - n_test_rows,
            n_test_rows,
        })?,
    )?;

    let inputs = BTreeMap::from([
        (
            "selections.json".to_string(),
            digest_file(&config.run_dir.join("ingest/selections.json"))?,
        ),
        (
            "targets.csv".to_string(),
            digest_file(&config.run_dir.join("groundtruth/targets.csv"))?,
        ),
    ]);
    let outputs = BTreeMap::from([
        ("model.cgbm".to_string(), digest_file(&model_path)?),
        ("split.json".to_string(), digest_file(&split_path)?),
        ("eval.json".to_string(), digest_file(&eval_path)?),
    ]);
    Ok((inputs, outputs))
}

// ---------------------------------------------------------------------------
// map-shade

/// Mosaic single-band tiles that share pixel size into one grid.
pub fn mosaic(tiles: &[RasterGrid]) -> Result<RasterGrid> {
    if tiles.is_empty() {
        return Err(Error::EmptyData("no tiles to mosaic".into()));
    }
    let psx = tiles[0].transform.pixel_size_x;
    let psy = tiles[0].transform.pixel_size_y;
    let mut x0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    for t in tiles {
        let (ex0, ey0, ex1, ey1) = t.extent();
        x0 = x0.min(ex0);
        y0 = y0.min(ey0);
        x1 = x1.max(ex1);
        y1 = y1.max(ey1);
    }
    let w = ((x1 - x0) / psx).round() as usize;
    let h = ((y1 - y0) / -psy).round() as usize;
    let transform = GeoTransform::new(x0, y1, psx, psy)?;
    let nodata = tiles[0].nodata;
    let mut out = RasterGrid::filled(w, h, 1, transform, nodata);
    out.nodata = nodata;
    out.crs_label = tiles[0].crs_label.clone();
    for t in tiles {
        let col0 = ((t.transform.origin_x - x0) / psx).round() as usize;
        let row0 = ((t.transform.origin_y - y1) / psy).round() as usize;
        for r in 0..t.height {
            for c in 0..t.width {
                let v = t.get(0, c, r);
                let vv = if t.is_nodata(v) { out.nodata } else { v };
                out.set(0, col0 + c, row0 + r, vv);
            }
        }
    }
    Ok(out)
}

fn stage_map_shade(config: &Config) -> Result<(Digests, Digests)> {
    let world = world_dir(config);
    let catalog = Catalog::load(&require(&world.join("catalog.csv"), "synth")?)?;
    let model_path = require(&config.run_dir.join("shade/model.cgbm"), "train-shade")?;
    let model = read_cgbm(&model_path)?;
    let selections = load_selections(config)?;
    let by_id: BTreeMap<&str, &canopy_ledger::ingest::SceneRecord> = catalog
        .scenes
        .iter()
        .map(|s| (s.scene_id.as_str(), s))
        .collect();

    let out_dir = config.run_dir.join("shade_map");
    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = BTreeMap::new();
    let mut tile_maps = Vec::new();
    let mut provenance = BTreeMap::new();
    for tile in tile_ids(config)? {
        let cocoa = tile_raster(config, &tile, "cocoa.cgrd")?;
        let scene_ids = selections.map.get(&tile).cloned().unwrap_or_default();
        let mut scenes: Vec<(String, SceneData)> = Vec::new();
        for sid in &scene_ids {
            let record = by_id
                .get(sid.as_str())
                .ok_or_else(|| Error::Format(format!("scene {sid} missing from catalog")))?;
            scenes.push((sid.clone(), load_scene(record)?));
        }
        let map = predict_map(&model, &scenes, &cocoa)?;
        let p = out_dir.join(format!("{tile}.cgrd"));
        write_cgrd(&p, &map.grid)?;
        outputs.insert(format!("{tile}.cgrd"), digest_file(&p)?);
        let pn = out_dir.join(format!("{tile}_nvalid.cgrd"));
        write_cgrd(&pn, &map.n_valid_scenes)?;
        outputs.insert(format!("{tile}_nvalid.cgrd"), digest_file(&pn)?);
        provenance.insert(tile.clone(), map.provenance.clone());
        tile_maps.push(map.grid);
    }

    let shade_mosaic = mosaic(&tile_maps)?;
    let mosaic_path = out_dir.join("shade_mosaic.cgrd");
    write_cgrd(&mosaic_path, &shade_mosaic)?;
    outputs.insert("shade_mosaic.cgrd".to_string(), digest_file(&mosaic_path)?);

    let png_path = out_dir.join("shade.png");
    canopy_ledger::render::save_heatmap_png(&png_path, &shade_mosaic, 0, 0.0, 100.0)?;
    outputs.insert("shade.png".to_string(), digest_file(&png_path)?);

    // Whole-map histogram (1 pp bins) and exceedance table.
    let stats = grid_stats_binned(&shade_mosaic, 0, None, 0.0, 100.0, 100)?;
    let hist_path = out_dir.join("histogram.csv");
    {
        let mut w = csv::Writer::from_path(&hist_path)?;
        w.write_record(["bin_lo_pct", "bin_hi_pct", "count"])?;
        for (i, count) in stats.hist_counts.iter().enumerate() {
            w.write_record([
                format!("{}", stats.hist_edges[i]),
                format!("{}", stats.hist_edges[i + 1]),
                format!("{count}"),
            ])?;
        }
        w.flush()?;
    }
    outputs.insert("histogram.csv".to_string(), digest_file(&hist_path)?);

    let exceed_path = out_dir.join("exceedance.csv");
    {
        let rows = cover_exceedance(&shade_mosaic, &config.shade.exceedance_thresholds);
        let mut w = csv::Writer::from_path(&exceed_path)?;
        w.write_record(["threshold_pct", "n_pixels", "area_ha", "fraction"])?;
        for r in rows {
            w.write_record([
                format!("{}", r.threshold_pct),
                format!("{}", r.n_pixels),
                format!("{}", r.area_ha),
                format!("{}", r.fraction),
            ])?;
        }
        w.flush()?;
    }
    outputs.insert("exceedance.csv".to_string(), digest_file(&exceed_path)?);

    // Zonal statistics over the country raster.
    let countries: Vec<RasterGrid> = tile_ids(config)?
        .iter()
        .map(|t| tile_raster(config, t, "country.cgrd"))
        .collect::<Result<_>>()?;
    let country_mosaic = mosaic(&countries)?;
    let zonal_path = out_dir.join("zonal.csv");
    {
        let zs = zonal_stats(&shade_mosaic, &country_mosaic)?;
        let mut w = csv::Writer::from_path(&zonal_path)?;
        w.write_record(["zone", "n", "mean", "sd"])?;
        for (zone, s) in zs {
            w.write_record([
                format!("{zone}"),
                format!("{}", s.n_valid),
                format!("{}", s.mean),
                format!("{}", s.sd),
            ])?;
        }
        w.flush()?;
    }
    outputs.insert("zonal.csv".to_string(), digest_file(&zonal_path)?);

    let prov_path = out_dir.join("provenance.json");
    std::fs::write(&prov_path, serde_json::to_vec_pretty(&provenance)?)?;
    outputs.insert("provenance.json".to_string(), digest_file(&prov_path)?);

    let inputs = BTreeMap::from([("model.cgbm".to_string(), digest_file(&model_path)?)]);
    Ok((inputs, outputs))
}

// ---------------------------------------------------------------------------
// train-agbd

#[derive(Debug, Serialize)]
struct AgbdTrainOut {
    n_train: usize,
    n_val: usize,
    n_test: usize,
    stripe_width_px: BTreeMap<String, f64>,
    log: canopy_ledger::agbdnet::TrainLog,
    bin_counts: Vec<u64>,
}

/// Footprints grouped by stripe role, with patches extracted.
fn assemble_agbd_samples(
    config: &Config,
    footprints: &[GediFootprint],
) -> Result<(Vec<TrainSample>, Vec<TrainSample>, Vec<GediFootprint>, BTreeMap<String, f64>)> {
    let lat_model = config.world.lat_model;
    let mut chms: BTreeMap<String, RasterGrid> = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut widths = BTreeMap::new();
    for tile in tile_ids(config)? {
        let chm = tile_raster(config, &tile, "chm.cgrd")?;
        let split = make_stripe_split(&tile, chm.width)?;
        widths.insert(tile.clone(), split.stripe_width());
        splits.insert(tile.clone(), split);
        chms.insert(tile, chm);
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test_fps = Vec::new();
    let mut train_agbd = Vec::new();
    for fp in footprints {
        // Locate the containing tile.
        let mut located = None;
        for (tile, chm) in &chms {
            let (c, r) = chm.transform.cell_of(fp.x, fp.y);
            if c >= 0 && r >= 0 && (c as usize) < chm.width && (r as usize) < chm.height {
                located = Some((tile.clone(), c as usize, r as usize));
                break;
            }
        }
        let Some((tile, c, r)) = located else { continue };
        let role = splits[&tile].role_of_col(c);
        match role {
            StripeRole::Test => test_fps.push(fp.clone()),
            StripeRole::Train | StripeRole::Val => {
                let Some(patch) = extract_patch(&chms[&tile], c, r, &lat_model) else {
                    continue;
                };
                let sample = TrainSample {
                    patch,
                    agbd: fp.agbd,
                    weight: 1.0,
                };
                if role == StripeRole::Train {
                    train_agbd.push(fp.agbd);
                    train.push(sample);
                } else {
                    val.push(sample);
                }
            }
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyData(format!(
            "stripe split left {} train / {} val footprints",
            train.len(),
            val.len()
        )));
    }
    // Frequency reweighting from the training portion only.
    let bw = agbdnet::compute_bin_weights(&train_agbd)?;
    for (s, w) in train.iter_mut().zip(bw.weights.iter()) {
        s.weight = *w;
    }
    Ok((train, val, test_fps, widths))
}

fn stage_train_agbd(config: &Config) -> Result<(Digests, Digests)> {
    let world = world_dir(config);
    let fp_path = require(&world.join("footprints.csv"), "synth")?;
    let all = agbdnet::load_footprints(&fp_path)?;
    let window = config.agbd.window.to_selection()?;
    let filtered = filter_gedi(&all, window);
    log::info!("{} of {} footprints pass filtering", filtered.len(), all.len());

    let (train, val, _test, widths) = assemble_agbd_samples(config, &filtered)?;
    let bin_counts = {
        let agbd: Vec<f64> = train.iter().map(|s| s.agbd).collect();
        agbdnet::compute_bin_weights(&agbd)?.counts
    };
    let tc = TrainConfig {
        learning_rate: config.agbd.learning_rate,
        batch_size: config.agbd.batch_size,
        ensemble: config.agbd.ensemble,
        patience: config.agbd.patience,
        max_epochs: config.agbd.max_epochs,
        seed: mix_seed(config.seed, config.agbd.seed),
    };
    let (ensemble, train_log) = agbdnet::net_train(&train, &val, &NetArch::standard(), &tc)?;

    let out_dir = config.run_dir.join("agbd");
    std::fs::create_dir_all(&out_dir)?;
    let model_path = out_dir.join("ensemble.cnet");
    agbdnet::write_cnet(&model_path, &ensemble)?;
    let log_path = out_dir.join("train_log.json");
    std::fs::write(
        &log_path,
        serde_json::to_vec_pretty(&AgbdTrainOut {
            n_train: train.len(),
            n_val: val.len(),
            n_test: _test.len(),
            stripe_width_px: widths,
            log: train_log,
            bin_counts,
        })?,
    )?;

    let inputs = BTreeMap::from([("footprints.csv".to_string(), digest_file(&fp_path)?)]);
    let outputs = BTreeMap::from([
        ("ensemble.cnet".to_string(), digest_file(&model_path)?),
        ("train_log.json".to_string(), digest_file(&log_path)?),
    ]);
    Ok((inputs, outputs))
}

// ---------------------------------------------------------------------------
// map-agbd

fn stage_map_agbd(config: &Config) -> Result<(Digests, Digests)> {
    let model_path = require(&config.run_dir.join("agbd/ensemble.cnet"), "train-agbd")?;
    let ensemble = agbdnet::read_cnet(&model_path)?;
    let lat_model = config.world.lat_model;

    let out_dir = config.run_dir.join("agbd_map");
    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = BTreeMap::new();
    let mut mu_tiles = Vec::new();
    let mut sigma_tiles = Vec::new();
    for tile in tile_ids(config)? {
        let chm = tile_raster(config, &tile, "chm.cgrd")?;
        let (mu, sigma) = agbdnet::predict_agbd_map(&ensemble, &chm, &lat_model)?;
        let pm = out_dir.join(format!("{tile}_mu.cgrd"));
        write_cgrd(&pm, &mu)?;
        outputs.insert(format!("{tile}_mu.cgrd"), digest_file(&pm)?);
        let ps = out_dir.join(format!("{tile}_sigma.cgrd"));
        write_cgrd(&ps, &sigma)?;
        outputs.insert(format!("{tile}_sigma.cgrd"), digest_file(&ps)?);
        mu_tiles.push(mu);
        sigma_tiles.push(sigma);
    }
    let mu_mosaic = mosaic(&mu_tiles)?;
    let mosaic_path = out_dir.join("agbd_mu_mosaic.cgrd");
    write_cgrd(&mosaic_path, &mu_mosaic)?;
    outputs.insert("agbd_mu_mosaic.cgrd".to_string(), digest_file(&mosaic_path)?);
    let sigma_mosaic = mosaic(&sigma_tiles)?;
    let smosaic_path = out_dir.join("agbd_sigma_mosaic.cgrd");
    write_cgrd(&smosaic_path, &sigma_mosaic)?;
    outputs.insert(
        "agbd_sigma_mosaic.cgrd".to_string(),
        digest_file(&smosaic_path)?,
    );
    let png_path = out_dir.join("agbd.png");
    canopy_ledger::render::save_heatmap_png(&png_path, &mu_mosaic, 0, 0.0, 150.0)?;
    outputs.insert("agbd.png".to_string(), digest_file(&png_path)?);

    // Accuracy against held-out (test stripe) footprints.
    let world = world_dir(config);
    let all = agbdnet::load_footprints(&world.join("footprints.csv"))?;
    let filtered = filter_gedi(&all, config.agbd.window.to_selection()?);
    let (_, _, test_fps, _) = assemble_agbd_samples(config, &filtered)?;
    let compare_path = out_dir.join("compare.json");
    match agbdnet::compare_to_reference(&mu_mosaic, &test_fps) {
        Ok(cmp) => std::fs::write(&compare_path, serde_json::to_vec_pretty(&cmp)?)?,
        Err(e) => {
            log::warn!("reference comparison skipped: {e}");
            std::fs::write(&compare_path, b"{}")?;
        }
    }
    outputs.insert("compare.json".to_string(), digest_file(&compare_path)?);

    let inputs = BTreeMap::from([("ensemble.cnet".to_string(), digest_file(&model_path)?)]);
    Ok((inputs, outputs))
}

// ---------------------------------------------------------------------------
// fit-carbon

/// Nearest-neighbor country ids sampled onto a 50 m grid.
fn sample_country_50(country10: &RasterGrid, target: &RasterGrid) -> Result<RasterGrid> {
    let mut out = RasterGrid::filled(target.width, target.height, 1, target.transform, 0.0);
    out.nodata = DEFAULT_NODATA;
    for r in 0..target.height {
        for c in 0..target.width {
            let (x, y) = target.transform.pixel_center(c, r);
            let (sc, sr) = country10.transform.cell_of(x, y);
            let v = if sc >= 0
                && sr >= 0
                && (sc as usize) < country10.width
                && (sr as usize) < country10.height
            {
                country10.get(0, sc as usize, sr as usize)
            } else {
                out.nodata
            };
            out.set(0, c, r, v);
        }
    }
    Ok(out)
}

/// Build the paired cover/biomass pixels across all tiles.
fn build_pairs(config: &Config) -> Result<PairedPixels> {
    let mut cover = Vec::new();
    let mut agb_t = Vec::new();
    let mut country = Vec::new();
    let mut cell_area_ha = 0.25;
    for tile in tile_ids(config)? {
        let shade_path = config.run_dir.join(format!("shade_map/{tile}.cgrd"));
        let shade = read_cgrd(&require(&shade_path, "map-shade")?)?;
        let agbd_path = config.run_dir.join(format!("agbd_map/{tile}_mu.cgrd"));
        let agbd = read_cgrd(&require(&agbd_path, "map-agbd")?)?;
        let cocoa10 = tile_raster(config, &tile, "cocoa.cgrd")?;
        let cocoa50 = resample_bilinear(&cocoa10, agbd.transform, agbd.width, agbd.height)?;
        // Fractional cocoa cover of at least half keeps the 50 m cell.
        let mut cocoa_mask = cocoa50.clone();
        for v in cocoa_mask.band_mut(0).iter_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
        let country10 = tile_raster(config, &tile, "country.cgrd")?;
        let country50 = sample_country_50(&country10, &agbd)?;
        let pairs = match pair_maps(&shade, &agbd, Some(&cocoa_mask), Some(&country50)) {
            Ok(p) => p,
            Err(Error::EmptyExtent(_)) => continue,
            Err(e) => return Err(e),
        };
        cell_area_ha = pairs.cell_area_ha;
        cover.extend(pairs.cover);
        agb_t.extend(pairs.agb_t);
        country.extend(pairs.country);
    }
    if cover.is_empty() {
        return Err(Error::EmptyData("no paired pixels across tiles".into()));
    }
    Ok(PairedPixels {
        cover,
        agb_t,
        country,
        cell_area_ha,
    })
}

fn stage_fit_carbon(config: &Config) -> Result<(Digests, Digests)> {
    let pairs = build_pairs(config)?;
    let mut reg = config.carbon.regression;
    reg.seed = mix_seed(config.seed, reg.seed);
    let (draws, diag) = fit_regression(&pairs.cover, &pairs.agb_t, &reg)?;

    let out_dir = config.run_dir.join("carbon");
    std::fs::create_dir_all(&out_dir)?;
    let posterior_path = out_dir.join("posterior.csv");
    {
        let mut w = csv::Writer::from_path(&posterior_path)?;
        w.write_record(["chain", "b0", "b1", "b2", "sigma"])?;
        for chain in 0..draws.chains {
            for d in draws.chain(chain) {
                w.write_record([
                    format!("{chain}"),
                    format!("{}", d[0]),
                    format!("{}", d[1]),
                    format!("{}", d[2]),
                    format!("{}", d[3]),
                ])?;
            }
        }
        w.flush()?;
    }
    let diag_path = out_dir.join("diagnostics.json");
    std::fs::write(&diag_path, serde_json::to_vec_pretty(&diag)?)?;
    let pairs_path = out_dir.join("pairs_summary.json");
    std::fs::write(
        &pairs_path,
        serde_json::to_vec_pretty(&serde_json::json!({
            "n_pairs": pairs.cover.len(),
            "cell_area_ha": pairs.cell_area_ha,
            "cover_mean_pct": pairs.cover.iter().map(|&v| v as f64).sum::<f64>()
                / pairs.cover.len() as f64,
            "total_agb_t": pairs.agb_t.iter().map(|&v| v as f64).sum::<f64>(),
        }))?,
    )?;

    let outputs = BTreeMap::from([
        ("posterior.csv".to_string(), digest_file(&posterior_path)?),
        ("diagnostics.json".to_string(), digest_file(&diag_path)?),
        ("pairs_summary.json".to_string(), digest_file(&pairs_path)?),
    ]);
    Ok((BTreeMap::new(), outputs))
}

fn load_posterior(config: &Config) -> Result<PosteriorDraws> {
    let p = require(&config.run_dir.join("carbon/posterior.csv"), "fit-carbon")?;
    let mut rdr = csv::Reader::from_path(&p)?;
    let mut by_chain: BTreeMap<usize, Vec<[f64; 4]>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let chain: usize = rec.get(0).unwrap_or("0").parse().unwrap_or(0);
        let f = |i: usize| -> f64 { rec.get(i).unwrap_or("0").parse().unwrap_or(0.0) };
        by_chain
            .entry(chain)
            .or_default()
            .push([f(1), f(2), f(3), f(4)]);
    }
    let chains = by_chain.len();
    let per_chain = by_chain.values().next().map(|v| v.len()).unwrap_or(0);
    if chains == 0 || per_chain == 0 {
        return Err(Error::EmptyData("posterior.csv holds no draws".into()));
    }
    let mut draws = Vec::with_capacity(chains * per_chain);
    for (_, v) in by_chain {
        draws.extend(v);
    }
    Ok(PosteriorDraws {
        chains,
        per_chain,
        draws,
    })
}

// ---------------------------------------------------------------------------
// scenario

#[derive(Debug, Serialize)]
struct ScenarioTable {
    thresholds: Vec<ScenarioResult>,
    below_ground_included: bool,
}

fn stage_scenario(config: &Config) -> Result<(Digests, Digests)> {
    let draws = load_posterior(config)?;
    let pairs = build_pairs(config)?;
    let mut sc = config.carbon.scenario;
    sc.seed = mix_seed(config.seed, sc.seed);

    let mut results = Vec::new();
    for &threshold in &config.carbon.thresholds {
        let mut r = scenario(&draws, &pairs, threshold, &sc)?;
        if config.carbon.include_below_ground {
            let f = 1.0 + config.carbon.below_ground_fraction;
            r.added_carbon_mean_t *= f;
            r.hdi_low_t *= f;
            r.hdi_high_t *= f;
            r.co2e_t *= f;
            r.annual_rate_t_co2e_per_ha_yr *= f;
            r.annual_total_t_co2e *= f;
        }
        results.push(r);
    }

    let out_dir = config.run_dir.join("scenario");
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("scenarios.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "threshold_pct",
            "mean_tC",
            "hdi_lo_tC",
            "hdi_hi_tC",
            "co2e_t",
            "annual_rate_t_per_ha_yr",
            "area_below_ha",
        ])?;
        for r in &results {
            w.write_record([
                format!("{}", r.threshold_pct),
                format!("{}", r.added_carbon_mean_t),
                format!("{}", r.hdi_low_t),
                format!("{}", r.hdi_high_t),
                format!("{}", r.co2e_t),
                format!("{}", r.annual_rate_t_co2e_per_ha_yr),
                format!("{}", r.area_below_ha),
            ])?;
        }
        w.flush()?;
    }
    let country_path = out_dir.join("scenarios_by_country.csv");
    {
        let mut w = csv::Writer::from_path(&country_path)?;
        w.write_record(["threshold_pct", "country_id", "mean_tC", "hdi_lo_tC", "hdi_hi_tC"])?;
        for r in &results {
            for c in &r.per_country {
                w.write_record([
                    format!("{}", r.threshold_pct),
                    format!("{}", c.country_id),
                    format!("{}", c.added_carbon_mean_t),
                    format!("{}", c.hdi_low_t),
                    format!("{}", c.hdi_high_t),
                ])?;
            }
        }
        w.flush()?;
    }
    let json_path = out_dir.join("scenarios.json");
    std::fs::write(
        &json_path,
        serde_json::to_vec_pretty(&ScenarioTable {
            thresholds: results.clone(),
            below_ground_included: config.carbon.include_below_ground,
        })?,
    )?;

    // Bar chart: current stock plus one bar per scenario, deltas annotated.
    let current = results
        .first()
        .map(|r| r.current_carbon_t)
        .unwrap_or(0.0);
    let mut bars = vec![canopy_ledger::render::Bar {
        value: current,
        label: "0".into(),
        annotation: format!("{:.1} tC", current),
    }];
    for r in &results {
        bars.push(canopy_ledger::render::Bar {
            value: current + r.added_carbon_mean_t,
            label: format!("{}%", r.threshold_pct),
            annotation: format!("+{:.1} tC", r.added_carbon_mean_t),
        });
    }
    let png_path = out_dir.join("scenario.png");
    canopy_ledger::render::save_bar_chart_png(&png_path, &bars, 560, 300)?;

    let inputs = BTreeMap::from([(
        "posterior.csv".to_string(),
        digest_file(&config.run_dir.join("carbon/posterior.csv"))?,
    )]);
    let outputs = BTreeMap::from([
        ("scenarios.csv".to_string(), digest_file(&csv_path)?),
        (
            "scenarios_by_country.csv".to_string(),
            digest_file(&country_path)?,
        ),
        ("scenarios.json".to_string(), digest_file(&json_path)?),
        ("scenario.png".to_string(), digest_file(&png_path)?),
    ]);
    Ok((inputs, outputs))
}

// ---------------------------------------------------------------------------
// zones

#[derive(Debug, Serialize)]
struct ZonesOut {
    k: usize,
    kept_variables: Vec<String>,
    dropped_variables: Vec<(String, f64)>,
    heldout_accuracy: Vec<f64>,
    n_occurrences: usize,
}

fn load_climatology(config: &Config) -> Result<(Vec<RasterGrid>, GeoTransform, usize, usize)> {
    let dir = world_dir(config).join("climate");
    let mut stacks = Vec::new();
    for name in ["tmin", "tmax", "tmean", "precip", "ra"] {
        let p = require(&dir.join(format!("{name}.cgrd")), "synth")?;
        stacks.push(read_cgrd(&p)?);
    }
    let t = stacks[0].transform;
    let (w, h) = (stacks[0].width, stacks[0].height);
    Ok((stacks, t, w, h))
}

fn stage_zones(config: &Config) -> Result<(Digests, Digests)> {
    let (stacks, t, w, h) = load_climatology(config)?;
    let plane = w * h;

    // Per-cell bioclim vectors.
    let mut stack = RasterGrid::filled(w, h, N_BIOCLIM, t, 0.0);
    stack.nodata = DEFAULT_NODATA;
    let mut valid = vec![true; plane];
    for i in 0..plane {
        let month = |g: &RasterGrid, m: usize| g.data[m * plane + i] as f64;
        let mut clim = MonthlyClimatology {
            tmin: [0.0; 12],
            tmax: [0.0; 12],
            tmean: [0.0; 12],
            precip: [0.0; 12],
            ra: [0.0; 12],
        };
        let mut any_nodata = false;
        for m in 0..12 {
            for (gi, field) in [
                (&stacks[0], &mut clim.tmin[m]),
                (&stacks[1], &mut clim.tmax[m]),
                (&stacks[2], &mut clim.tmean[m]),
                (&stacks[3], &mut clim.precip[m]),
                (&stacks[4], &mut clim.ra[m]),
            ] {
                let v = month(gi, m);
                if gi.is_nodata(v as f32) {
                    any_nodata = true;
                }
                *field = v;
            }
        }
        if any_nodata {
            valid[i] = false;
            for b in 0..N_BIOCLIM {
                stack.data[b * plane + i] = DEFAULT_NODATA;
            }
            continue;
        }
        let v = bioclim(&clim)?;
        for b in 0..N_BIOCLIM {
            stack.data[b * plane + i] = v[b] as f32;
        }
    }

    // Occurrence rows.
    let occ_path = require(&world_dir(config).join("occurrences.csv"), "synth")?;
    let mut rdr = csv::Reader::from_path(&occ_path)?;
    let mut occ_cells_vec: Vec<(usize, usize)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let x: f64 = rec.get(1).unwrap_or("0").parse().unwrap_or(0.0);
        let y: f64 = rec.get(2).unwrap_or("0").parse().unwrap_or(0.0);
        let (c, r) = t.cell_of(x, y);
        if c >= 0 && r >= 0 && (c as usize) < w && (r as usize) < h {
            let i = r as usize * w + c as usize;
            if valid[i] {
                occ_cells_vec.push((c as usize, r as usize));
            }
        }
    }
    if occ_cells_vec.len() < config.zones.k + 2 {
        return Err(Error::EmptyData(format!(
            "only {} occurrence cells for k={}",
            occ_cells_vec.len(),
            config.zones.k
        )));
    }
    let gather_rows = |cells: &[(usize, usize)], cols: &[usize]| -> Vec<f64> {
        let mut rows = Vec::with_capacity(cells.len() * cols.len());
        for &(c, r) in cells {
            let i = r * w + c;
            for &b in cols {
                rows.push(stack.data[b * plane + i] as f64);
            }
        }
        rows
    };

    // Multicollinearity screen on the occurrence matrix.
    let all_cols: Vec<usize> = (0..N_BIOCLIM).collect();
    let occ_all = gather_rows(&occ_cells_vec, &all_cols);
    let (std_all, _, _) = standardize(&occ_all, N_BIOCLIM)?;
    let (kept_cols, dropped) = vif_select(&std_all, N_BIOCLIM, config.zones.vif_threshold)?;
    log::info!(
        "multicollinearity screen kept {} of {N_BIOCLIM} variables",
        kept_cols.len()
    );

    // Cluster occurrence climates into k types.
    let occ_kept = gather_rows(&occ_cells_vec, &kept_cols);
    let (occ_std, _, _) = standardize(&occ_kept, kept_cols.len())?;
    let labels = cluster_types(
        &occ_std,
        kept_cols.len(),
        config.zones.k,
        &ClusterConfig {
            n_trees: config.zones.cluster_trees,
            seed: mix_seed(config.seed, config.zones.seed),
        },
    )?;

    // Background sample (1:1) from valid cells.
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut all_valid: Vec<(usize, usize)> = (0..plane)
        .filter(|&i| valid[i])
        .map(|i| (i % w, i / w))
        .collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(mix_seed(
        config.seed,
        config.zones.seed ^ 0xbac,
    ));
    all_valid.shuffle(&mut rng);
    all_valid.truncate(occ_cells_vec.len());
    let bg_rows = gather_rows(&all_valid, &kept_cols);

    // Classification stack restricted to the kept variables.
    let mut kept_stack = RasterGrid::filled(w, h, kept_cols.len(), t, 0.0);
    kept_stack.nodata = DEFAULT_NODATA;
    for (bi, &b) in kept_cols.iter().enumerate() {
        let src = stack.band(b).to_vec();
        kept_stack.band_mut(bi).copy_from_slice(&src);
    }
    let occ_cells: BTreeSet<(usize, usize)> = occ_cells_vec.iter().copied().collect();
    let zone_map = classify_zones(
        &occ_kept,
        &labels,
        &bg_rows,
        kept_cols.len(),
        &kept_stack,
        &occ_cells,
        &ZoneConfig {
            repeats: config.zones.repeats,
            forests_per_repeat: config.zones.forests_per_repeat,
            trees_per_forest: config.zones.trees_per_forest,
            train_fraction: config.zones.train_fraction,
            mixed_margin: config.zones.mixed_margin,
            seed: mix_seed(config.seed, config.zones.seed ^ 0x20e5),
        },
    )?;

    let out_dir = config.run_dir.join("zones");
    std::fs::create_dir_all(&out_dir)?;
    let map_path = out_dir.join("zones.cgrd");
    write_cgrd(&map_path, &zone_map.grid)?;
    let legend_path = out_dir.join("legend.json");
    std::fs::write(&legend_path, serde_json::to_vec_pretty(&zone_map.legend)?)?;
    let png_path = out_dir.join("zones.png");
    canopy_ledger::render::save_heatmap_png(
        &png_path,
        &zone_map.grid,
        0,
        0.0,
        (config.zones.k + 2) as f64,
    )?;
    let names = canopy_ledger::agroclim::BIOCLIM_NAMES;
    let summary_path = out_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_vec_pretty(&ZonesOut {
            k: config.zones.k,
            kept_variables: kept_cols.iter().map(|&i| names[i].to_string()).collect(),
            dropped_variables: dropped
                .iter()
                .map(|&(i, v)| (names[i].to_string(), v))
                .collect(),
            heldout_accuracy: zone_map.heldout_accuracy.clone(),
            n_occurrences: occ_cells_vec.len(),
        })?,
    )?;

    let inputs = BTreeMap::from([(
        "occurrences.csv".to_string(),
        digest_file(&occ_path)?,
    )]);
    let outputs = BTreeMap::from([
        ("zones.cgrd".to_string(), digest_file(&map_path)?),
        ("legend.json".to_string(), digest_file(&legend_path)?),
        ("zones.png".to_string(), digest_file(&png_path)?),
        ("summary.json".to_string(), digest_file(&summary_path)?),
    ]);
    Ok((inputs, outputs))
}

// ---------------------------------------------------------------------------
// landuse

fn stage_landuse(config: &Config) -> Result<(Digests, Digests)> {
    let agbd_path = require(
        &config.run_dir.join("agbd_map/agbd_mu_mosaic.cgrd"),
        "map-agbd",
    )?;
    let agbd = read_cgrd(&agbd_path)?;

    // Cocoa and forest maps aligned to the 50 m biomass grid.
    let mut cocoa_tiles = Vec::new();
    let mut tmf_tiles = Vec::new();
    for tile in tile_ids(config)? {
        cocoa_tiles.push(tile_raster(config, &tile, "cocoa.cgrd")?);
        tmf_tiles.push(tile_raster(config, &tile, "tmf50.cgrd")?);
    }
    let cocoa10 = mosaic(&cocoa_tiles)?;
    let cocoa50f = resample_bilinear(&cocoa10, agbd.transform, agbd.width, agbd.height)?;
    let mut cocoa50 = cocoa50f.clone();
    for v in cocoa50.band_mut(0).iter_mut() {
        *v = if !cocoa50f.is_nodata(*v) && *v >= 0.5 { 1.0 } else { 0.0 };
    }
    let tmf50 = mosaic(&tmf_tiles)?;

    let stats = landuse_stats(&agbd, &cocoa50, &tmf50, carbon::CARBON_FRACTION)?;
    let out_dir = config.run_dir.join("landuse");
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("landuse.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "class",
            "n_pixels",
            "area_ha",
            "density_mean_tC_ha",
            "density_sd_tC_ha",
            "total_tC",
            "ci95_tC",
        ])?;
        for s in &stats {
            w.write_record([
                format!("{:?}", s.class),
                format!("{}", s.n_pixels),
                format!("{}", s.area_ha),
                format!("{}", s.density_mean),
                format!("{}", s.density_sd),
                format!("{}", s.total_carbon_t),
                format!("{}", s.ci95_t),
            ])?;
        }
        w.flush()?;
    }
    let json_path = out_dir.join("landuse.json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&stats)?)?;

    let inputs = BTreeMap::from([(
        "agbd_mu_mosaic.cgrd".to_string(),
        digest_file(&agbd_path)?,
    )]);
    let outputs = BTreeMap::from([
        ("landuse.csv".to_string(), digest_file(&csv_path)?),
        ("landuse.json".to_string(), digest_file(&json_path)?),
    ]);
    Ok((inputs, outputs))
}

// Re-exported helpers for the report stage and tests.
pub use crate::report::offsets_for_annual;

/// Convenience wrapper: offsets both excluding and including land-use
/// change for an annual sequestration total.
pub fn offsets(
    annual_total_t: f64,
    config: &Config,
) -> Result<(carbon::OffsetReport, carbon::OffsetReport)> {
    Ok((
        offset_fraction(annual_total_t, &config.emissions, false)?,
        offset_fraction(annual_total_t, &config.emissions, true)?,
    ))
}

pub fn co2e_of_carbon(c: f64) -> f64 {
    carbon_to_co2e(c)
}
