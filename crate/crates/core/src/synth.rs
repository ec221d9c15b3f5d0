//! Deterministic synthetic-world generator.
//!
//! Produces every input the pipeline consumes — scene catalog with clouds,
//! drone surface/terrain models over farms, canopy-height tiles with
//! uncertainty, LiDAR-style biomass footprints, monthly climatology, cocoa
//! and forest masks — as pure functions of a [`WorldSpec`]. A truth sidecar
//! records the generating parameters so end-to-end runs can be checked
//! against known answers.
//!
//! The spectral model gives the learner real signal without encoding any
//! index formula: near-infrared rises and red falls affinely with local
//! shade cover, plus Gaussian noise and a small per-scene offset. Inside
//! surveyed farms the driving cover is the realized drone-pixel fraction,
//! so targets and reflectances agree up to noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::agbdnet::LatModel;
use crate::groundtruth::{FarmRecord, Polygon};
use crate::ingest::{Catalog, SceneRecord};
use crate::raster::{write_cgrd, GeoTransform, RasterGrid, DEFAULT_NODATA};
use crate::{Error, Result};

/// Parameters of the synthetic world; every artifact is a pure function of
/// this value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Tile side in 10 m pixels.
    pub tile_px: usize,
    pub n_farms: usize,
    /// Farm side in 10 m cells.
    pub farm_px: usize,
    /// Scenes per tile in each early acquisition window.
    pub scenes_early_per_window: usize,
    /// Scenes per tile inside the 2022 growing season.
    pub scenes_in_season: usize,
    /// Target cloudy-pixel fraction per scene.
    pub cloud_fraction: f64,
    /// Per-band reflectance noise.
    pub spectral_noise_sd: f64,
    /// Base shade-cover level before bumps.
    pub cover_base: f64,
    /// Random cover bumps per tile.
    pub cover_bumps: usize,
    /// North-south trend added to the cover field.
    pub cover_gradient: f64,
    /// True cover(%) -> biomass density (t/ha) coefficients.
    pub agbd_beta: [f64; 3],
    /// Residual spread of footprint biomass around the relation.
    pub agbd_sigma: f64,
    pub n_footprints: usize,
    pub footprint_quality_rate: f64,
    pub power_beam_rate: f64,
    /// Approximate cocoa fraction of each tile (farms are always cocoa).
    pub cocoa_fraction: f64,
    pub n_occurrences: usize,
    pub lat_model: LatModel,
    pub crs: String,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            tiles_x: 2,
            tiles_y: 2,
            tile_px: 600,
            n_farms: 40,
            farm_px: 12,
            scenes_early_per_window: 2,
            scenes_in_season: 6,
            cloud_fraction: 0.08,
            spectral_noise_sd: 0.012,
            cover_base: 0.05,
            cover_bumps: 12,
            cover_gradient: 0.04,
            agbd_beta: [10.0, 2.0, -0.012],
            agbd_sigma: 6.0,
            n_footprints: 2400,
            footprint_quality_rate: 0.92,
            power_beam_rate: 0.85,
            cocoa_fraction: 0.35,
            n_occurrences: 240,
            lat_model: LatModel {
                lat_origin_deg: 6.0,
                meters_per_degree: 111_320.0,
            },
            crs: "SYNTH:M".into(),
        }
    }
}

impl WorldSpec {
    /// Compact configuration for fast full-pipeline runs.
    pub fn compact(seed: u64) -> Self {
        Self {
            seed,
            tiles_x: 1,
            tiles_y: 1,
            tile_px: 240,
            n_farms: 12,
            farm_px: 12,
            scenes_in_season: 4,
            n_footprints: 400,
            cocoa_fraction: 0.85,
            n_occurrences: 140,
            ..Default::default()
        }
    }

    pub fn world_width_px(&self) -> usize {
        self.tiles_x * self.tile_px
    }

    pub fn world_height_px(&self) -> usize {
        self.tiles_y * self.tile_px
    }

    fn world_height_m(&self) -> f64 {
        self.world_height_px() as f64 * 10.0
    }

    fn tile_id(&self, tx: usize, ty: usize) -> String {
        format!("T{tx}{ty}")
    }

    fn tile_transform(&self, tx: usize, ty: usize) -> GeoTransform {
        GeoTransform::new(
            (tx * self.tile_px) as f64 * 10.0,
            self.world_height_m() - (ty * self.tile_px) as f64 * 10.0,
            10.0,
            -10.0,
        )
        .expect("valid tile transform")
    }
}

/// Paths of everything the generator wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldPaths {
    pub root: PathBuf,
    pub catalog: PathBuf,
    pub farms: PathBuf,
    pub footprints: PathBuf,
    pub occurrences: PathBuf,
    pub monoculture: PathBuf,
    pub truth: PathBuf,
    pub tiles: BTreeMap<String, TilePaths>,
    pub climate: BTreeMap<String, PathBuf>,
}

/// Hand-labeled-style cocoa monoculture section used for threshold
/// calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonoculturePolygon {
    pub farm_id: String,
    pub polygon: Polygon,
}

/// CSV: `farm_id,boundary_wkt`.
pub fn save_monoculture(path: &Path, polys: &[MonoculturePolygon]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["farm_id", "boundary_wkt"])?;
    for m in polys {
        w.write_record([m.farm_id.as_str(), &m.polygon.to_wkt()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_monoculture(path: &Path) -> Result<Vec<MonoculturePolygon>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(MonoculturePolygon {
            farm_id: rec
                .get(0)
                .ok_or_else(|| Error::Format("monoculture row missing farm_id".into()))?
                .to_string(),
            polygon: Polygon::from_wkt(
                rec.get(1)
                    .ok_or_else(|| Error::Format("monoculture row missing wkt".into()))?,
            )?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilePaths {
    pub cover_truth: PathBuf,
    pub chm: PathBuf,
    pub cocoa: PathBuf,
    pub country: PathBuf,
    pub tmf50: PathBuf,
}

/// Truth sidecar for the acceptance harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldTruth {
    pub spec: WorldSpec,
    /// Biomass relation per pixel of the 50 m grid (0.25 ha):
    /// `agb_t = 0.25 * agbd(cover)`.
    pub agb_beta_per_pixel: [f64; 3],
    pub mean_cover_by_tile: BTreeMap<String, f64>,
    pub scene_cloud_fraction: BTreeMap<String, f64>,
    pub n_footprints_eligible: usize,
    pub farm_cells: BTreeMap<String, usize>,
}

fn subseed(seed: u64, tag: &str, idx: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= idx.wrapping_mul(0x9e3779b97f4a7c15);
    h
}

fn rng_for(spec: &WorldSpec, tag: &str, idx: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(subseed(spec.seed, tag, idx))
}

/// Smooth bump field evaluated in map coordinates.
struct BumpField {
    bumps: Vec<(f64, f64, f64, f64)>, // (cx, cy, radius, amplitude)
    base: f64,
    grad_y: f64,
}

impl BumpField {
    fn new(spec: &WorldSpec, tag: &str, base: f64, amp_lo: f64, amp_hi: f64, grad_y: f64) -> Self {
        let mut rng = rng_for(spec, tag, 0);
        let w = spec.world_width_px() as f64 * 10.0;
        let h = spec.world_height_m();
        let n = spec.cover_bumps * spec.tiles_x * spec.tiles_y;
        // Radii scale with the tile so bump coverage (and the resulting
        // cover distribution) is comparable across world sizes.
        let tile_m = spec.tile_px as f64 * 10.0;
        let (r_lo, r_hi) = (0.03 * tile_m, 0.10 * tile_m);
        let bumps = (0..n)
            .map(|_| {
                (
                    rng.gen_range(0.0..w),
                    rng.gen_range(0.0..h),
                    rng.gen_range(r_lo..r_hi),
                    rng.gen_range(amp_lo..amp_hi),
                )
            })
            .collect();
        Self {
            bumps,
            base,
            grad_y,
        }
    }

    fn eval(&self, x: f64, y: f64, world_h: f64) -> f64 {
        let mut v = self.base + self.grad_y * (y / world_h);
        for &(cx, cy, r, a) in &self.bumps {
            let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            v += a * (-d2 / (2.0 * r * r)).exp();
        }
        v
    }
}

/// Everything generated for one tile, kept in memory for scene synthesis.
struct TileData {
    id: String,
    transform: GeoTransform,
    cover: Vec<f32>, // fraction
}

const SEASON_2022: [(u32, u32); 8] = [
    (4, 7),
    (5, 12),
    (6, 2),
    (6, 24),
    (7, 15),
    (8, 21),
    (9, 18),
    (10, 16),
];

fn season_date(i: usize) -> NaiveDate {
    let (m, d) = SEASON_2022[i % SEASON_2022.len()];
    NaiveDate::from_ymd_opt(2022, m, d).unwrap()
}

/// Generate the full input bundle under `out_dir`.
pub fn generate_world(spec: &WorldSpec, out_dir: &Path) -> Result<WorldPaths> {
    if spec.tile_px < 30 || spec.n_farms == 0 {
        return Err(Error::Argument("world too small to populate".into()));
    }
    // Band grids at 20 m and 60 m plus 10-pixel cloud blocks must tile
    // evenly.
    if spec.tile_px % 30 != 0 {
        return Err(Error::Argument(format!(
            "tile_px {} must be a multiple of 30",
            spec.tile_px
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let world_h = spec.world_height_m();
    let cover_field = BumpField::new(
        spec,
        "cover",
        spec.cover_base,
        0.15,
        0.55,
        spec.cover_gradient,
    );
    let cocoa_field = BumpField::new(spec, "cocoa", 0.0, 0.3, 1.0, 0.2);
    let forest_field = BumpField::new(spec, "forest", 0.0, 0.3, 1.0, -0.15);

    // Farms first: their realized drone fractions overwrite the cover grid.
    let farms = place_farms(spec);
    let mut farm_records = Vec::new();
    let mut farm_cells: BTreeMap<String, usize> = BTreeMap::new();
    let mut monoculture = Vec::new();
    // Realized per-cell fractions per tile: (tile index, col, row) -> frac.
    let mut realized: BTreeMap<(usize, usize, usize), f32> = BTreeMap::new();

    for (fi, farm) in farms.iter().enumerate() {
        let (record, cells, mono) = generate_farm(spec, fi, farm, &cover_field, out_dir)?;
        farm_cells.insert(record.farm_id.clone(), cells.len());
        for ((tile_idx, c, r), frac) in cells {
            realized.insert((tile_idx, c, r), frac);
        }
        monoculture.extend(mono);
        farm_records.push(record);
    }
    let farms_path = out_dir.join("farms.csv");
    crate::groundtruth::save_farms(&farms_path, &farm_records)?;
    let monoculture_path = out_dir.join("monoculture.csv");
    save_monoculture(&monoculture_path, &monoculture)?;

    // Tiles: final cover grids (field + realized farm fractions).
    let mut tiles = Vec::new();
    let mut tile_paths = BTreeMap::new();
    let mut mean_cover_by_tile = BTreeMap::new();
    for ty in 0..spec.tiles_y {
        for tx in 0..spec.tiles_x {
            let tile_idx = ty * spec.tiles_x + tx;
            let id = spec.tile_id(tx, ty);
            let transform = spec.tile_transform(tx, ty);
            let n = spec.tile_px * spec.tile_px;
            let mut cover = vec![0.0f32; n];
            for r in 0..spec.tile_px {
                for c in 0..spec.tile_px {
                    let (x, y) = transform.pixel_center(c, r);
                    let v = cover_field.eval(x, y, world_h).clamp(0.0, 0.9);
                    cover[r * spec.tile_px + c] = v as f32;
                }
            }
            for ((ti, c, r), frac) in realized.range((tile_idx, 0, 0)..(tile_idx + 1, 0, 0)) {
                debug_assert_eq!(*ti, tile_idx);
                cover[r * spec.tile_px + c] = *frac;
            }
            let mean = cover.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            mean_cover_by_tile.insert(id.clone(), mean);

            let paths = write_tile_rasters(
                spec,
                out_dir,
                &id,
                transform,
                &cover,
                &cocoa_field,
                &forest_field,
                &realized,
                tile_idx,
            )?;
            tile_paths.insert(id.clone(), paths);
            tiles.push(TileData {
                id,
                transform,
                cover,
            });
        }
    }

    // Scenes and catalog.
    let (catalog, scene_cloud_fraction) = generate_scenes(spec, out_dir, &tiles)?;
    let catalog_path = out_dir.join("catalog.csv");
    catalog.save(&catalog_path)?;

    // Footprints.
    let (footprints, n_eligible) = generate_footprints(spec, &tiles);
    let footprints_path = out_dir.join("footprints.csv");
    crate::agbdnet::save_footprints(&footprints_path, &footprints)?;

    // Occurrences over cocoa cells.
    let occurrences_path = out_dir.join("occurrences.csv");
    generate_occurrences(spec, out_dir, &tile_paths, &occurrences_path)?;

    // Climatology stacks.
    let climate = generate_climatology(spec, out_dir)?;

    let truth = WorldTruth {
        spec: spec.clone(),
        agb_beta_per_pixel: [
            0.25 * spec.agbd_beta[0],
            0.25 * spec.agbd_beta[1],
            0.25 * spec.agbd_beta[2],
        ],
        mean_cover_by_tile,
        scene_cloud_fraction,
        n_footprints_eligible: n_eligible,
        farm_cells,
    };
    let truth_path = out_dir.join("truth.json");
    std::fs::write(&truth_path, serde_json::to_vec_pretty(&truth)?)?;

    Ok(WorldPaths {
        root: out_dir.to_path_buf(),
        catalog: catalog_path,
        farms: farms_path,
        footprints: footprints_path,
        occurrences: occurrences_path,
        monoculture: monoculture_path,
        truth: truth_path,
        tiles: tile_paths,
        climate,
    })
}

struct FarmSite {
    tile_idx: usize,
    /// Top-left cell of the farm inside its tile.
    col: usize,
    row: usize,
}

fn place_farms(spec: &WorldSpec) -> Vec<FarmSite> {
    let mut rng = rng_for(spec, "farms", 0);
    let n_tiles = spec.tiles_x * spec.tiles_y;
    // Non-overlapping lattice slots with margin, jittered.
    let slot = spec.farm_px + 6;
    let per_side = (spec.tile_px - 4) / slot;
    let mut sites = Vec::new();
    for fi in 0..spec.n_farms {
        let tile_idx = fi % n_tiles;
        let k = fi / n_tiles;
        let sx = k % per_side.max(1);
        let sy = (k / per_side.max(1)) % per_side.max(1);
        let jitter_x = rng.gen_range(0..4);
        let jitter_y = rng.gen_range(0..4);
        sites.push(FarmSite {
            tile_idx,
            col: 2 + sx * slot + jitter_x,
            row: 2 + sy * slot + jitter_y,
        });
    }
    sites
}

type FarmCells = Vec<((usize, usize, usize), f32)>;

/// Generate the drone rasters of one farm and return the realized per-cell
/// shade fractions on the 10 m grid, plus fully shade-free cells usable as
/// monoculture calibration polygons.
fn generate_farm(
    spec: &WorldSpec,
    fi: usize,
    site: &FarmSite,
    cover_field: &BumpField,
    out_dir: &Path,
) -> Result<(FarmRecord, FarmCells, Vec<MonoculturePolygon>)> {
    let mut rng = rng_for(spec, "farm", fi as u64);
    let (tx, ty) = (site.tile_idx % spec.tiles_x, site.tile_idx / spec.tiles_x);
    let tile_t = spec.tile_transform(tx, ty);
    let world_h = spec.world_height_m();

    // Farm bbox in map coordinates (10 m cells).
    let (x0, y0) = tile_t.pixel_corner(site.col as f64, site.row as f64);
    let side_m = spec.farm_px as f64 * 10.0;
    let boundary = Polygon::new(vec![
        (x0, y0),
        (x0 + side_m, y0),
        (x0 + side_m, y0 - side_m),
        (x0, y0 - side_m),
    ])?;

    // Drone rasters at 1 m with a 5 m margin.
    let margin = 5usize;
    let px = spec.farm_px * 10 + 2 * margin;
    let drone_t = GeoTransform::new(x0 - margin as f64, y0 + margin as f64, 1.0, -1.0)?;
    let mut dtm = RasterGrid::filled(px, px, 1, drone_t, 0.0);
    dtm.crs_label = spec.crs.clone();
    let mut dsm = dtm.clone();

    let (a, b, c) = (
        rng.gen_range(100.0..200.0),
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.02..0.02),
    );
    let mut cells: FarmCells = Vec::new();
    let mut shade_count = vec![0u32; spec.farm_px * spec.farm_px];
    let mut valid_count = vec![0u32; spec.farm_px * spec.farm_px];

    for r in 0..px {
        for ccol in 0..px {
            let (x, y) = drone_t.pixel_center(ccol, r);
            let terrain = a + b * (x - x0) + c * (y - y0)
                + 0.4 * ((x - x0) * 0.05).sin() * ((y - y0) * 0.04).cos();
            dtm.set(0, ccol, r, terrain as f32);
            let p_shade = cover_field.eval(x, y, world_h).clamp(0.0, 0.9);
            let is_shade = rng.gen::<f64>() < p_shade;
            let height = if is_shade {
                rng.gen_range(10.0..30.0)
            } else {
                rng.gen_range(2.0..6.0)
            };
            dsm.set(0, ccol, r, (terrain + height) as f32);

            // Tally into the farm's 10 m cells (margin pixels fall outside).
            let fx = x - x0;
            let fy = y0 - y;
            if fx >= 0.0 && fy >= 0.0 {
                let (gc, gr) = ((fx / 10.0) as usize, (fy / 10.0) as usize);
                if gc < spec.farm_px && gr < spec.farm_px {
                    let idx = gr * spec.farm_px + gc;
                    valid_count[idx] += 1;
                    if is_shade {
                        shade_count[idx] += 1;
                    }
                }
            }
        }
    }
    for gr in 0..spec.farm_px {
        for gc in 0..spec.farm_px {
            let idx = gr * spec.farm_px + gc;
            if valid_count[idx] == 0 {
                continue;
            }
            let frac = shade_count[idx] as f32 / valid_count[idx] as f32;
            cells.push((
                (site.tile_idx, site.col + gc, site.row + gr),
                frac,
            ));
        }
    }

    let farm_id = format!("F{fi:03}");
    // Relative paths keep the bundle relocatable and byte-reproducible.
    let dsm_path = PathBuf::from("drone").join(format!("{farm_id}_dsm.cgrd"));
    let dtm_path = PathBuf::from("drone").join(format!("{farm_id}_dtm.cgrd"));
    write_cgrd(&out_dir.join(&dsm_path), &dsm)?;
    write_cgrd(&out_dir.join(&dtm_path), &dtm)?;

    // Up to two fully shade-free 10 m cells double as monoculture
    // calibration polygons.
    let mut monoculture = Vec::new();
    for gr in 0..spec.farm_px {
        for gc in 0..spec.farm_px {
            if monoculture.len() >= 2 {
                break;
            }
            let idx = gr * spec.farm_px + gc;
            if valid_count[idx] >= 100 && shade_count[idx] == 0 {
                let cx0 = x0 + gc as f64 * 10.0;
                let cy0 = y0 - gr as f64 * 10.0;
                monoculture.push(MonoculturePolygon {
                    farm_id: farm_id.clone(),
                    polygon: Polygon::new(vec![
                        (cx0, cy0),
                        (cx0 + 10.0, cy0),
                        (cx0 + 10.0, cy0 - 10.0),
                        (cx0, cy0 - 10.0),
                    ])?,
                });
            }
        }
    }

    let gt_date = NaiveDate::from_ymd_opt(2022, 6, 1).unwrap()
        + chrono::Duration::days(rng.gen_range(0..110));
    Ok((
        FarmRecord {
            farm_id,
            boundary,
            gt_date,
            dsm_path,
            dtm_path,
        },
        cells,
        monoculture,
    ))
}

#[allow(clippy::too_many_arguments)]
fn write_tile_rasters(
    spec: &WorldSpec,
    out_dir: &Path,
    tile_id: &str,
    transform: GeoTransform,
    cover: &[f32],
    cocoa_field: &BumpField,
    forest_field: &BumpField,
    realized: &BTreeMap<(usize, usize, usize), f32>,
    tile_idx: usize,
) -> Result<TilePaths> {
    let n = spec.tile_px * spec.tile_px;
    let world_h = spec.world_height_m();
    let dir = out_dir.join("tiles").join(tile_id);

    // Truth cover grid.
    let mut cover_grid = RasterGrid::filled(spec.tile_px, spec.tile_px, 1, transform, 0.0);
    cover_grid.crs_label = spec.crs.clone();
    cover_grid.band_mut(0).copy_from_slice(cover);
    let cover_truth = dir.join("cover_truth.cgrd");
    write_cgrd(&cover_truth, &cover_grid)?;

    // Cocoa mask: suitability field thresholded at the target quantile,
    // with farm cells always cocoa.
    let mut suit: Vec<f64> = Vec::with_capacity(n);
    for r in 0..spec.tile_px {
        for c in 0..spec.tile_px {
            let (x, y) = transform.pixel_center(c, r);
            suit.push(cocoa_field.eval(x, y, world_h));
        }
    }
    let mut sorted = suit.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = sorted[((1.0 - spec.cocoa_fraction) * (n as f64 - 1.0)) as usize];
    let mut cocoa = RasterGrid::filled(spec.tile_px, spec.tile_px, 1, transform, 0.0);
    cocoa.crs_label = spec.crs.clone();
    {
        let cb = cocoa.band_mut(0);
        for i in 0..n {
            if suit[i] >= cut {
                cb[i] = 1.0;
            }
        }
        for ((ti, c, r), _) in realized.range((tile_idx, 0, 0)..(tile_idx + 1, 0, 0)) {
            debug_assert_eq!(*ti, tile_idx);
            cb[r * spec.tile_px + c] = 1.0;
        }
    }
    let cocoa_path = dir.join("cocoa.cgrd");
    write_cgrd(&cocoa_path, &cocoa)?;

    // Country raster: west half is country 1, east half country 2.
    let mut country = RasterGrid::filled(spec.tile_px, spec.tile_px, 1, transform, 0.0);
    country.crs_label = spec.crs.clone();
    {
        let half = spec.world_width_px() as f64 * 10.0 / 2.0;
        let cb = country.band_mut(0);
        for r in 0..spec.tile_px {
            for c in 0..spec.tile_px {
                let (x, _) = transform.pixel_center(c, r);
                cb[r * spec.tile_px + c] = if x < half { 1.0 } else { 2.0 };
            }
        }
    }
    let country_path = dir.join("country.cgrd");
    write_cgrd(&country_path, &country)?;

    // Canopy-height tile (height + uncertainty) from cover, with clamped
    // noise and a small nodata blob to exercise gap handling.
    let mut rng = rng_for(spec, "chm", tile_idx as u64);
    let mut chm = RasterGrid::filled(spec.tile_px, spec.tile_px, 2, transform, 0.0);
    chm.crs_label = spec.crs.clone();
    for i in 0..n {
        let c = cover[i] as f64;
        let eps: f64 = (rng.gen::<f64>() - 0.5) * 3.0;
        let h = (2.0 + 26.0 * c + eps).max(0.0);
        chm.data[i] = h as f32;
        chm.data[n + i] = (0.5 + 2.0 * c + eps.abs() * 0.3) as f32;
    }
    let blob_c = rng.gen_range(0..spec.tile_px.saturating_sub(8));
    let blob_r = rng.gen_range(0..spec.tile_px.saturating_sub(8));
    for dr in 0..6 {
        for dc in 0..6 {
            let i = (blob_r + dr) * spec.tile_px + blob_c + dc;
            chm.data[i] = DEFAULT_NODATA;
            chm.data[n + i] = DEFAULT_NODATA;
        }
    }
    let chm_path = dir.join("chm.cgrd");
    write_cgrd(&chm_path, &chm)?;

    // Forest classes at 50 m: outside cocoa, split into disturbed and
    // undisturbed by the forest field.
    let px50 = spec.tile_px / 5;
    let t50 = GeoTransform::new(
        transform.origin_x,
        transform.origin_y,
        50.0,
        -50.0,
    )?;
    let mut tmf = RasterGrid::filled(px50, px50, 1, t50, 0.0);
    tmf.crs_label = spec.crs.clone();
    {
        let tb = tmf.band_mut(0);
        for r in 0..px50 {
            for c in 0..px50 {
                let (x, y) = t50.pixel_center(c, r);
                // Cocoa fraction of the 5x5 block.
                let mut cocoa_cells = 0;
                for dr in 0..5 {
                    for dc in 0..5 {
                        if cocoa.get(0, c * 5 + dc, r * 5 + dr) != 0.0 {
                            cocoa_cells += 1;
                        }
                    }
                }
                if cocoa_cells >= 13 {
                    continue; // cocoa-dominated: not forest
                }
                let f = forest_field.eval(x, y, world_h);
                tb[r * px50 + c] = if f > 0.9 {
                    crate::carbon::TMF_UNDISTURBED
                } else if f > 0.55 {
                    crate::carbon::TMF_DISTURBED
                } else {
                    0.0
                };
            }
        }
    }
    let tmf_path = dir.join("tmf50.cgrd");
    write_cgrd(&tmf_path, &tmf)?;

    Ok(TilePaths {
        cover_truth,
        chm: chm_path,
        cocoa: cocoa_path,
        country: country_path,
        tmf50: tmf_path,
    })
}

/// Reflectance model per band index (into the loader's channel order):
/// base level plus an affine cover term.
const BAND_MODEL: [(f64, f64); 12] = [
    (0.12, -0.01),  // B01 60 m
    (0.12, -0.02),  // B02
    (0.16, -0.04),  // B03 green
    (0.32, -0.22),  // B04 red
    (0.20, 0.20),   // B05 20 m
    (0.18, 0.30),   // B06 20 m
    (0.17, 0.40),   // B07 20 m
    (0.15, 0.55),   // B08 nir
    (0.16, 0.50),   // B8A 20 m
    (0.28, -0.12),  // B11 swir1 20 m
    (0.20, -0.08),  // B12 20 m
    (0.10, 0.00),   // B09 60 m
];

/// Pixel sizes per band in the loader's channel order.
const BAND_RES: [usize; 12] = [6, 1, 1, 1, 2, 2, 2, 1, 2, 2, 2, 6];

fn early_dates() -> Vec<NaiveDate> {
    vec![
        NaiveDate::from_ymd_opt(2020, 7, 14).unwrap(),
        NaiveDate::from_ymd_opt(2021, 2, 9).unwrap(),
        NaiveDate::from_ymd_opt(2021, 9, 3).unwrap(),
        NaiveDate::from_ymd_opt(2021, 11, 21).unwrap(),
    ]
}

fn generate_scenes(
    spec: &WorldSpec,
    out_dir: &Path,
    tiles: &[TileData],
) -> Result<(Catalog, BTreeMap<String, f64>)> {
    let mut scenes = Vec::new();
    let mut cloud_by_scene = BTreeMap::new();
    for (tile_idx, tile) in tiles.iter().enumerate() {
        let mut dates: Vec<NaiveDate> = Vec::new();
        let early = early_dates();
        for w in 0..2 {
            for k in 0..spec.scenes_early_per_window {
                dates.push(early[(w * 2 + k) % early.len()]);
            }
        }
        for k in 0..spec.scenes_in_season {
            dates.push(season_date(k));
        }
        for (si, date) in dates.iter().enumerate() {
            let scene_id = format!("{}_S{si:02}", tile.id);
            let band_dir = PathBuf::from("scenes").join(&scene_id);
            let cloud_frac = write_scene(
                spec,
                tile,
                tile_idx,
                si,
                &out_dir.join(&band_dir),
            )?;
            cloud_by_scene.insert(scene_id.clone(), cloud_frac);
            scenes.push(SceneRecord {
                scene_id,
                tile_id: tile.id.clone(),
                date: *date,
                cloud_pct: (cloud_frac * 100.0) as f32,
                band_dir,
            });
        }
    }
    Ok((Catalog { scenes }, cloud_by_scene))
}

/// Write one scene's 12 band files plus cloud mask; returns the cloudy
/// fraction.
fn write_scene(
    spec: &WorldSpec,
    tile: &TileData,
    tile_idx: usize,
    scene_idx: usize,
    band_dir: &Path,
) -> Result<f64> {
    let px = spec.tile_px;
    let n = px * px;
    let mut rng = rng_for(
        spec,
        "scene",
        (tile_idx as u64) << 16 | scene_idx as u64,
    );

    // Blocky cloud mask from 10x10-pixel Bernoulli blocks.
    let blocks = px / 10;
    let mut cloud = RasterGrid::filled(px, px, 1, tile.transform, 0.0);
    cloud.crs_label = spec.crs.clone();
    let mut cloudy_px = 0usize;
    for br in 0..blocks {
        for bc in 0..blocks {
            if rng.gen::<f64>() < spec.cloud_fraction {
                for r in br * 10..(br + 1) * 10 {
                    for c in bc * 10..(bc + 1) * 10 {
                        cloud.data[r * px + c] = 1.0;
                        cloudy_px += 1;
                    }
                }
            }
        }
    }
    let scene_offset: f64 = rng.gen_range(-0.01..0.01);

    // Occasional nodata swath on one band, exercising validity conjunction.
    let swath = if rng.gen::<f64>() < 0.15 {
        let band: usize = rng.gen_range(0..12);
        let col0 = rng.gen_range(0..px.saturating_sub(px / 50));
        Some((band, col0, col0 + px / 50))
    } else {
        None
    };

    for (bi, file) in crate::ingest::BAND_FILES.iter().enumerate() {
        let res = BAND_RES[bi];
        let (base, slope) = BAND_MODEL[bi];
        let bpx = px / res;
        let t = GeoTransform::new(
            tile.transform.origin_x,
            tile.transform.origin_y,
            10.0 * res as f64,
            -10.0 * res as f64,
        )?;
        let mut grid = RasterGrid::filled(bpx, bpx, 1, t, 0.0);
        grid.crs_label = spec.crs.clone();
        for r in 0..bpx {
            for c in 0..bpx {
                // Mean cover and cloudiness over the res x res block.
                let mut cov = 0.0f64;
                let mut cloudy = false;
                for dr in 0..res {
                    for dc in 0..res {
                        let i = (r * res + dr) * px + c * res + dc;
                        cov += tile.cover[i] as f64;
                        cloudy |= cloud.data[i] != 0.0;
                    }
                }
                cov /= (res * res) as f64;
                let noise: f64 = (rng.gen::<f64>() - 0.5) * 2.0 * spec.spectral_noise_sd;
                let v = if cloudy {
                    0.75 + noise.abs()
                } else {
                    (base + slope * cov + scene_offset + noise).clamp(0.0, 1.0)
                };
                grid.data[r * bpx + c] = v as f32;
            }
        }
        if let Some((band, c0, c1)) = swath {
            if band == bi {
                for r in 0..bpx {
                    for c in c0 / res..(c1 / res).min(bpx) {
                        grid.data[r * bpx + c] = DEFAULT_NODATA;
                    }
                }
            }
        }
        write_cgrd(&band_dir.join(file), &grid)?;
    }
    write_cgrd(&band_dir.join(crate::ingest::CLOUD_MASK_FILE), &cloud)?;
    Ok(cloudy_px as f64 / n as f64)
}

fn generate_footprints(
    spec: &WorldSpec,
    tiles: &[TileData],
) -> (Vec<crate::agbdnet::GediFootprint>, usize) {
    use crate::agbdnet::{Beam, GediFootprint};
    let mut rng = rng_for(spec, "gedi", 0);
    let world_w = spec.world_width_px() as f64 * 10.0;
    let world_h = spec.world_height_m();
    let season_start = NaiveDate::from_ymd_opt(2022, 4, 1).unwrap();
    let mut out = Vec::with_capacity(spec.n_footprints);
    let mut eligible = 0usize;
    for i in 0..spec.n_footprints {
        let x = rng.gen_range(80.0..world_w - 80.0);
        let y = rng.gen_range(80.0..world_h - 80.0);
        // Locate the tile and its cover at the containing 50 m block.
        let tx = (x / (spec.tile_px as f64 * 10.0)) as usize;
        let ty = ((world_h - y) / (spec.tile_px as f64 * 10.0)) as usize;
        let tile = &tiles[ty * spec.tiles_x + tx];
        let (c, r) = tile.transform.cell_of(x, y);
        let (c, r) = (c as usize, r as usize);
        let (b0, b1) = ((c / 5) * 5, (r / 5) * 5);
        let mut cov = 0.0f64;
        for dr in 0..5 {
            for dc in 0..5 {
                let cc = (b0 + dc).min(spec.tile_px - 1);
                let rr = (b1 + dr).min(spec.tile_px - 1);
                cov += tile.cover[rr * spec.tile_px + cc] as f64;
            }
        }
        let cover_pct = 100.0 * cov / 25.0;
        let agbd = (spec.agbd_beta[0]
            + spec.agbd_beta[1] * cover_pct
            + spec.agbd_beta[2] * cover_pct * cover_pct
            + spec.agbd_sigma * ((rng.gen::<f64>() - 0.5) * 3.4))
            .max(0.0);

        // Mostly in-season; some out-of-window dates exercise the filter.
        let date = if rng.gen::<f64>() < 0.85 {
            season_start + chrono::Duration::days(rng.gen_range(0..240))
        } else {
            NaiveDate::from_ymd_opt(2022, 1, 10).unwrap()
                + chrono::Duration::days(rng.gen_range(0..60))
        };
        let quality_ok = rng.gen::<f64>() < spec.footprint_quality_rate;
        let beam = if rng.gen::<f64>() < spec.power_beam_rate {
            Beam::Power
        } else {
            Beam::Coverage
        };
        let in_window = date >= season_start
            && date <= NaiveDate::from_ymd_opt(2022, 11, 30).unwrap();
        if quality_ok && beam == Beam::Power && in_window {
            eligible += 1;
        }
        out.push(GediFootprint {
            id: format!("G{i:05}"),
            date,
            lon: -3.0 + x / 111_320.0,
            lat: spec.lat_model.lat_of_y(y),
            x,
            y,
            agbd,
            quality_ok,
            beam,
        });
    }
    (out, eligible)
}

fn generate_occurrences(
    spec: &WorldSpec,
    _out_dir: &Path,
    tile_paths: &BTreeMap<String, TilePaths>,
    path: &Path,
) -> Result<()> {
    let mut rng = rng_for(spec, "occ", 0);
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for paths in tile_paths.values() {
        let cocoa = crate::raster::read_cgrd(&paths.cocoa)?;
        for r in 0..cocoa.height {
            for c in 0..cocoa.width {
                if cocoa.get(0, c, r) != 0.0 {
                    cells.push(cocoa.transform.pixel_center(c, r));
                }
            }
        }
    }
    use rand::seq::SliceRandom;
    cells.shuffle(&mut rng);
    cells.truncate(spec.n_occurrences);
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "x", "y"])?;
    for (i, (x, y)) in cells.iter().enumerate() {
        w.write_record([format!("O{i:04}"), format!("{x}"), format!("{y}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Monthly climate stacks at 500 m: a north-south temperature gradient and
/// an east-west moisture gradient give the zoning stage real structure.
fn generate_climatology(spec: &WorldSpec, out_dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let w = (spec.world_width_px() / 50).max(2);
    let h = (spec.world_height_px() / 50).max(2);
    let t = GeoTransform::new(0.0, spec.world_height_m(), 500.0, -500.0)?;
    let mut rng = rng_for(spec, "climate", 0);

    let mut stacks: BTreeMap<&str, RasterGrid> = BTreeMap::new();
    for name in ["tmin", "tmax", "tmean", "precip", "ra"] {
        let mut g = RasterGrid::filled(w, h, 12, t, 0.0);
        g.crs_label = spec.crs.clone();
        stacks.insert(name, g);
    }
    let n = w * h;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let ns = r as f64 / h.max(1) as f64; // 0 north, 1 south
            let ew = c as f64 / w.max(1) as f64;
            let jitter: f64 = rng.gen_range(-0.3..0.3);
            for m in 0..12 {
                let phase = 2.0 * std::f64::consts::PI * (m as f64) / 12.0;
                let tmean = 25.0 + 2.5 * ns + 1.2 * (phase - 1.0).sin() + jitter;
                let diurnal = 7.0 + 3.0 * ew;
                let precip = (130.0 - 90.0 * ew + 110.0 * (phase - 2.2).sin()
                    + rng.gen_range(-8.0..8.0))
                .max(0.0);
                let ra = 30.0 + 3.0 * (phase - 0.6).sin() + 1.0 * ns;
                stacks.get_mut("tmean").unwrap().data[m * n + i] = tmean as f32;
                stacks.get_mut("tmin").unwrap().data[m * n + i] = (tmean - diurnal / 2.0) as f32;
                stacks.get_mut("tmax").unwrap().data[m * n + i] = (tmean + diurnal / 2.0) as f32;
                stacks.get_mut("precip").unwrap().data[m * n + i] = precip as f32;
                stacks.get_mut("ra").unwrap().data[m * n + i] = ra as f32;
            }
        }
    }
    let mut out = BTreeMap::new();
    for (name, grid) in stacks {
        let p = out_dir.join("climate").join(format!("{name}.cgrd"));
        write_cgrd(&p, &grid)?;
        out.insert(name.to_string(), p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::{canopy_height, cell_shade_fraction, shade_mask};
    use crate::ingest::{load_scene, validity_mask};
    use crate::raster::read_cgrd;

    fn tiny_spec(seed: u64) -> WorldSpec {
        WorldSpec {
            seed,
            tiles_x: 1,
            tiles_y: 1,
            tile_px: 90,
            n_farms: 3,
            farm_px: 8,
            scenes_early_per_window: 1,
            scenes_in_season: 2,
            n_footprints: 150,
            n_occurrences: 40,
            ..Default::default()
        }
    }

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join("canopy-ledger-synth-tests")
            .join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn dir_digest(root: &Path) -> Vec<(String, u64)> {
        let mut files = Vec::new();
        fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, u64)>) {
            let mut entries: Vec<_> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            for p in entries {
                if p.is_dir() {
                    walk(&p, root, out);
                } else {
                    let bytes = std::fs::read(&p).unwrap();
                    let mut h: u64 = 0xcbf29ce484222325;
                    for b in bytes {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                    out.push((
                        p.strip_prefix(root).unwrap().display().to_string(),
                        h,
                    ));
                }
            }
        }
        walk(root, root, &mut files);
        files
    }

    #[test]
    fn same_spec_twice_is_byte_identical() {
        let spec = tiny_spec(3);
        let d1 = tmp_dir("det1");
        let d2 = tmp_dir("det2");
        generate_world(&spec, &d1).unwrap();
        generate_world(&spec, &d2).unwrap();
        assert_eq!(dir_digest(&d1), dir_digest(&d2));
    }

    #[test]
    fn zero_shade_world_is_all_cocoa_height() {
        let mut spec = tiny_spec(4);
        spec.cover_base = 0.0;
        spec.cover_bumps = 0;
        spec.cover_gradient = 0.0;
        let dir = tmp_dir("zeroshade");
        let paths = generate_world(&spec, &dir).unwrap();
        // Drone CHM stays below 8 m everywhere.
        let farms = crate::groundtruth::load_farms(&paths.farms).unwrap();
        for f in &farms {
            let dsm = read_cgrd(&f.dsm_path).unwrap();
            let dtm = read_cgrd(&f.dtm_path).unwrap();
            let chm = canopy_height(&dsm, &dtm).unwrap();
            assert!(chm.data.iter().all(|&v| v < 8.0));
        }
        // Recorded cover is zero.
        let truth: WorldTruth =
            serde_json::from_slice(&std::fs::read(&paths.truth).unwrap()).unwrap();
        for (_, mean) in truth.mean_cover_by_tile {
            assert_eq!(mean, 0.0);
        }
    }

    #[test]
    fn recorded_fractions_match_groundtruth_module() {
        let spec = tiny_spec(5);
        let dir = tmp_dir("fractions");
        let paths = generate_world(&spec, &dir).unwrap();
        let farms = crate::groundtruth::load_farms(&paths.farms).unwrap();
        let truth_cover = read_cgrd(&paths.tiles["T00"].cover_truth).unwrap();

        let farm = &farms[0];
        let dsm = read_cgrd(&farm.dsm_path).unwrap();
        let dtm = read_cgrd(&farm.dtm_path).unwrap();
        let chm = canopy_height(&dsm, &dtm).unwrap();
        let mask = shade_mask(&chm, 8.0);
        let cells = cell_shade_fraction(
            &mask,
            &farm.boundary,
            &truth_cover.transform,
            truth_cover.width,
            truth_cover.height,
        )
        .unwrap();
        assert!(!cells.is_empty());
        for cell in cells {
            let recorded = truth_cover.get(0, cell.col as usize, cell.row as usize);
            // Within one drone pixel of quantization.
            assert!(
                (recorded - cell.fraction).abs() <= 1.0 / cell.n_drone_pixels as f32 + 1e-6,
                "cell ({},{}): {} vs {}",
                cell.col,
                cell.row,
                recorded,
                cell.fraction
            );
        }
    }

    #[test]
    fn scene_cloud_fraction_near_spec() {
        let spec = tiny_spec(6);
        let dir = tmp_dir("clouds");
        let paths = generate_world(&spec, &dir).unwrap();
        let catalog = Catalog::load(&paths.catalog).unwrap();
        let mut worst: f64 = 0.0;
        for scene in &catalog.scenes {
            let sd = load_scene(scene).unwrap();
            let v = validity_mask(&sd).unwrap();
            let cloudy = sd.cloud_mask.band(0).iter().filter(|&&m| m != 0.0).count();
            let frac = cloudy as f64 / (sd.cloud_mask.width * sd.cloud_mask.height) as f64;
            worst = worst.max((frac - spec.cloud_fraction).abs());
            // Validity excludes exactly the cloudy pixels plus any nodata
            // swath.
            let invalid = v.band(0).iter().filter(|&&m| m == 0.0).count();
            assert!(invalid >= cloudy);
        }
        assert!(worst < 0.05, "cloud fraction off by {worst}");
    }

    #[test]
    fn footprint_regression_recovers_truth() {
        let mut spec = tiny_spec(7);
        spec.agbd_beta = [20.0, 8.0, -0.05];
        spec.n_footprints = 1200;
        spec.tile_px = 150;
        let dir = tmp_dir("betas");
        let paths = generate_world(&spec, &dir).unwrap();
        let fps = crate::agbdnet::load_footprints(&paths.footprints).unwrap();
        // Closed-form OLS on (cover%, agbd) of the generated data, using
        // the truth cover grid.
        let cover = read_cgrd(&paths.tiles["T00"].cover_truth).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for f in &fps {
            let (c, r) = cover.transform.cell_of(f.x, f.y);
            if c < 0 || r < 0 || c as usize >= cover.width || r as usize >= cover.height {
                continue;
            }
            let (b0, b1) = (((c as usize) / 5) * 5, ((r as usize) / 5) * 5);
            let mut cov = 0.0f64;
            for dr in 0..5 {
                for dc in 0..5 {
                    cov += cover
                        .get(0, (b0 + dc).min(cover.width - 1), (b1 + dr).min(cover.height - 1))
                        as f64;
                }
            }
            xs.push(100.0 * cov / 25.0);
            ys.push(f.agbd);
        }
        let stats = crate::carbon::QuadStats::from_pairs(&xs, &ys);
        let (beta, _) = stats.ols().unwrap();
        // Recovery within generous synthetic-noise bounds.
        assert!((beta[0] - 20.0).abs() < 3.0, "b0 {}", beta[0]);
        assert!((beta[1] - 8.0).abs() < 0.6, "b1 {}", beta[1]);
        assert!((beta[2] + 0.05).abs() < 0.02, "b2 {}", beta[2]);
    }

    #[test]
    fn catalog_dates_cover_windows() {
        let spec = tiny_spec(8);
        let dir = tmp_dir("dates");
        let paths = generate_world(&spec, &dir).unwrap();
        let catalog = Catalog::load(&paths.catalog).unwrap();
        let season = crate::ingest::SelectionWindow::new(
            NaiveDate::from_ymd_opt(2022, 4, 1).unwrap(),
            NaiveDate::from_ymd_opt(2022, 11, 30).unwrap(),
        )
        .unwrap();
        let in_season = catalog
            .scenes
            .iter()
            .filter(|s| season.contains(s.date))
            .count();
        assert_eq!(in_season, spec.scenes_in_season);
        assert_eq!(catalog.scenes.len(), 2 * spec.scenes_early_per_window + spec.scenes_in_season);
    }
}
