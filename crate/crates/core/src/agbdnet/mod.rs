//! Biomass estimation from canopy-height patches.
//!
//! Spaceborne-LiDAR footprints (filtered to reliable power-beam shots inside
//! the acquisition window) supervise a small convolutional network that maps
//! 150x150 m canopy-height patches, their uncertainty and a periodic
//! latitude encoding to a per-cell biomass mean and standard deviation on a
//! 50 m grid. Tiles split into five longitudinal stripes (three train, one
//! validation, one test); samples are reweighted by inverse square root of
//! their biomass-bin frequency; five members trained from different
//! initialization seeds form the predictive ensemble.

mod io;
mod net;

pub use io::{load_footprints, read_cnet, save_footprints, write_cnet};
pub use net::{
    gaussian_nll, loss_and_grad, net_forward, Adam, NetArch, NetParams, Scalar,
};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::SelectionWindow;
use crate::raster::{GeoTransform, RasterGrid};
use crate::shademap::ResidualBin;
use crate::{Error, Result};

/// Patch side in 10 m pixels (150 m of context).
pub const PATCH_SIDE: usize = 15;

/// Output stride in input pixels (50 m grid from 10 m input).
pub const OUTPUT_STRIDE: usize = 5;

/// Identifier of the latitude encoding, stored in model files.
pub const LAT_ENCODING_TAG: &str = "sin-cos-2pi-lat-over-180/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Beam {
    Power,
    Coverage,
}

/// One LiDAR footprint with its biomass estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GediFootprint {
    pub id: String,
    pub date: NaiveDate,
    pub lon: f64,
    pub lat: f64,
    pub x: f64,
    pub y: f64,
    /// Above-ground biomass density, tonnes per hectare.
    pub agbd: f64,
    pub quality_ok: bool,
    pub beam: Beam,
}

/// Keep reliable power-beam footprints inside the window. A pure
/// conjunction: output order follows input order.
pub fn filter_gedi(footprints: &[GediFootprint], window: SelectionWindow) -> Vec<GediFootprint> {
    footprints
        .iter()
        .filter(|f| f.quality_ok && f.beam == Beam::Power && window.contains(f.date))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripeRole {
    Train,
    Val,
    Test,
}

/// Five equal-width longitudinal stripes with fixed roles.
#[derive(Debug, Clone, Serialize)]
pub struct StripeSplit {
    /// Column boundaries; stripe `i` spans `bounds[i]..bounds[i+1]`.
    pub bounds: [usize; 6],
    pub roles: [StripeRole; 5],
}

impl StripeSplit {
    pub fn role_of_col(&self, col: usize) -> StripeRole {
        for i in 0..5 {
            if col < self.bounds[i + 1] {
                return self.roles[i];
            }
        }
        self.roles[4]
    }

    pub fn stripe_width(&self) -> f64 {
        (self.bounds[5] - self.bounds[0]) as f64 / 5.0
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Split a tile of the given pixel width into five vertical stripes.
/// The role pattern (three train, one val, one test) rotates with a hash of
/// the tile id, so different tiles hold out different longitudes while a
/// given tile always splits the same way.
pub fn make_stripe_split(tile_id: &str, tile_width: usize) -> Result<StripeSplit> {
    if tile_width < 5 {
        return Err(Error::Argument(format!(
            "tile width {tile_width} too narrow for 5 stripes"
        )));
    }
    let mut bounds = [0usize; 6];
    for (i, b) in bounds.iter_mut().enumerate() {
        *b = i * tile_width / 5;
    }
    let base = [
        StripeRole::Train,
        StripeRole::Val,
        StripeRole::Train,
        StripeRole::Test,
        StripeRole::Train,
    ];
    let rot = (fnv1a64(tile_id) % 5) as usize;
    let mut roles = [StripeRole::Train; 5];
    for i in 0..5 {
        roles[i] = base[(i + rot) % 5];
    }
    log::info!(
        "tile {tile_id}: stripe width {:.1} px, roles {:?}",
        tile_width as f64 / 5.0,
        roles
    );
    Ok(StripeSplit { bounds, roles })
}

/// Number of biomass bins for frequency reweighting.
pub const N_BINS: usize = 20;

/// Upper edge of the binned biomass range (t/ha); larger values clip into
/// the last bin.
pub const BIN_MAX: f64 = 200.0;

/// Inverse-sqrt-frequency sample weights over 20 equidistant biomass bins.
#[derive(Debug, Clone, Serialize)]
pub struct BinWeights {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Unnormalized per-sample weight `1 / sqrt(count)`: ratios between
    /// samples are exact.
    pub raw_weights: Vec<f64>,
    /// Per-sample weight, normalized to mean one (used by the loss).
    pub weights: Vec<f64>,
}

pub fn bin_of(agbd: f64) -> usize {
    ((agbd / (BIN_MAX / N_BINS as f64)).floor() as i64).clamp(0, N_BINS as i64 - 1) as usize
}

pub fn compute_bin_weights(values: &[f64]) -> Result<BinWeights> {
    if values.is_empty() {
        return Err(Error::Argument("no values to weight".into()));
    }
    let mut counts = vec![0u64; N_BINS];
    for &v in values {
        counts[bin_of(v)] += 1;
    }
    let raw_weights: Vec<f64> = values
        .iter()
        .map(|&v| 1.0 / (counts[bin_of(v)] as f64).sqrt())
        .collect();
    let mean: f64 = raw_weights.iter().sum::<f64>() / raw_weights.len() as f64;
    let weights = raw_weights.iter().map(|w| w / mean).collect();
    let edges = (0..=N_BINS)
        .map(|i| i as f64 * BIN_MAX / N_BINS as f64)
        .collect();
    Ok(BinWeights {
        edges,
        counts,
        raw_weights,
        weights,
    })
}

/// Linear planar-y to latitude mapping for the periodic encoding.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatModel {
    pub lat_origin_deg: f64,
    pub meters_per_degree: f64,
}

impl Default for LatModel {
    fn default() -> Self {
        Self {
            lat_origin_deg: 6.5,
            meters_per_degree: 111_320.0,
        }
    }
}

impl LatModel {
    pub fn lat_of_y(&self, y: f64) -> f64 {
        self.lat_origin_deg + y / self.meters_per_degree
    }
}

/// Raw (unnormalized) network input patch: height, height uncertainty and
/// the two latitude channels, height-major with channels innermost.
pub fn extract_patch(
    chm: &RasterGrid,
    center_col: usize,
    center_row: usize,
    lat_model: &LatModel,
) -> Option<Vec<f32>> {
    debug_assert!(chm.bands >= 2);
    let side = PATCH_SIDE;
    let r = (side / 2) as isize;
    let n_cells = side * side;
    let mut heights = Vec::with_capacity(n_cells);
    let mut uncs = Vec::with_capacity(n_cells);
    let mut n_nodata = 0usize;
    for dy in -r..=r {
        let row = (center_row as isize + dy).clamp(0, chm.height as isize - 1) as usize;
        for dx in -r..=r {
            let col = (center_col as isize + dx).clamp(0, chm.width as isize - 1) as usize;
            let h = chm.get(0, col, row);
            let u = chm.get(1, col, row);
            if chm.is_nodata(h) {
                n_nodata += 1;
                heights.push(f32::NAN);
                uncs.push(f32::NAN);
            } else {
                heights.push(h);
                uncs.push(if chm.is_nodata(u) { f32::NAN } else { u });
            }
        }
    }
    // More than half the patch missing: no prediction for this cell.
    if 2 * n_nodata > n_cells {
        return None;
    }
    let mean_of = |v: &[f32]| -> f32 {
        let (mut s, mut n) = (0.0f64, 0u32);
        for &x in v {
            if !x.is_nan() {
                s += x as f64;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (s / n as f64) as f32
        }
    };
    let hmean = mean_of(&heights);
    let umean = mean_of(&uncs);

    let (_, y_center) = chm.transform.pixel_center(center_col, center_row);
    let lat = lat_model.lat_of_y(y_center);
    let phase = 2.0 * std::f64::consts::PI * lat / 180.0;
    let (sin_lat, cos_lat) = (phase.sin() as f32, phase.cos() as f32);

    let mut patch = Vec::with_capacity(n_cells * 4);
    for i in 0..n_cells {
        let h = if heights[i].is_nan() { hmean } else { heights[i] };
        let u = if uncs[i].is_nan() { umean } else { uncs[i] };
        patch.extend_from_slice(&[h, u, sin_lat, cos_lat]);
    }
    Some(patch)
}

/// Channel normalization constants plus the target scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormStats {
    pub height_mean: f64,
    pub height_std: f64,
    pub unc_mean: f64,
    pub unc_std: f64,
    /// Targets train as `agbd / y_scale`.
    pub y_scale: f64,
}

impl NormStats {
    pub fn from_patches(patches: &[Vec<f32>]) -> Self {
        let mut hs = RunningMoments::default();
        let mut us = RunningMoments::default();
        for p in patches {
            for cell in p.chunks_exact(4) {
                hs.push(cell[0] as f64);
                us.push(cell[1] as f64);
            }
        }
        Self {
            height_mean: hs.mean(),
            height_std: hs.sd().max(1e-6),
            unc_mean: us.mean(),
            unc_std: us.sd().max(1e-6),
            y_scale: 100.0,
        }
    }

    /// Normalize a raw patch into network units (latitude channels pass
    /// through).
    pub fn normalize(&self, raw: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(raw.len());
        for cell in raw.chunks_exact(4) {
            out.push(((cell[0] as f64 - self.height_mean) / self.height_std) as f32);
            out.push(((cell[1] as f64 - self.unc_mean) / self.unc_std) as f32);
            out.push(cell[2]);
            out.push(cell[3]);
        }
        out
    }
}

#[derive(Default)]
struct RunningMoments {
    n: u64,
    sum: f64,
    sum2: f64,
}

impl RunningMoments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum2 += v * v;
    }
    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
    fn sd(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sum2 / self.n as f64 - m * m).max(0.0).sqrt()
    }
}

/// One supervised sample (raw patch; normalization happens inside
/// training/prediction).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub patch: Vec<f32>,
    pub agbd: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ensemble: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 256,
            ensemble: 5,
            patience: 10,
            max_epochs: 100,
            seed: 0,
        }
    }
}

/// Trained ensemble with its normalization constants.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub arch: NetArch,
    pub members: Vec<NetParams<f32>>,
    pub norm: NormStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub members: Vec<Vec<EpochLog>>,
}

/// Train the ensemble. Members differ only by initialization seed and train
/// independently (in parallel); batch order derives from the seed, and
/// gradients reduce over fixed-size chunks so thread count never changes
/// results.
pub fn net_train(
    train: &[TrainSample],
    val: &[TrainSample],
    arch: &NetArch,
    config: &TrainConfig,
) -> Result<(Ensemble, TrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyData(format!(
            "{} train / {} val samples",
            train.len(),
            val.len()
        )));
    }
    let raw_patches: Vec<&Vec<f32>> = train.iter().map(|s| &s.patch).collect();
    let norm = NormStats::from_patches(
        &raw_patches.iter().map(|p| (*p).clone()).collect::<Vec<_>>(),
    );
    let prep = |samples: &[TrainSample]| -> Vec<(Vec<f32>, f32, f32)> {
        samples
            .iter()
            .map(|s| {
                (
                    norm.normalize(&s.patch),
                    (s.agbd / norm.y_scale) as f32,
                    s.weight as f32,
                )
            })
            .collect()
    };
    let train_n = prep(train);
    let val_n = prep(val);

    let results: Vec<Result<(NetParams<f32>, Vec<EpochLog>)>> = (0..config.ensemble)
        .into_par_iter()
        .map(|member| {
            train_member(
                &train_n,
                &val_n,
                arch,
                config,
                config.seed.wrapping_add(member as u64),
            )
        })
        .collect();
    let mut members = Vec::with_capacity(config.ensemble);
    let mut logs = Vec::with_capacity(config.ensemble);
    for r in results {
        let (params, log) = r?;
        members.push(params);
        logs.push(log);
    }
    Ok((
        Ensemble {
            arch: arch.clone(),
            members,
            norm,
        },
        TrainLog { members: logs },
    ))
}

const GRAD_CHUNK: usize = 16;

fn train_member(
    train: &[(Vec<f32>, f32, f32)],
    val: &[(Vec<f32>, f32, f32)],
    arch: &NetArch,
    config: &TrainConfig,
    member_seed: u64,
) -> Result<(NetParams<f32>, Vec<EpochLog>)> {
    let mut params: NetParams<f32> = NetParams::init(arch, member_seed);
    let n_params = arch.n_params();
    let mut adam = Adam::new(n_params, config.learning_rate);
    let mut flat = params.flatten();

    let mut best_flat = flat.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut log = Vec::new();

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha20Rng::seed_from_u64(member_seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);

        let mut train_nll = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            params = NetParams::from_flat(arch, &flat)?;
            let chunk_grads: Vec<(f64, Vec<f32>)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0f32; n_params];
                    let mut loss = 0.0f64;
                    for &i in chunk {
                        let (patch, y, w) = &train[i];
                        loss += loss_and_grad(&params, patch, *y, *w, &mut g)
                            .map(Scalar::as_f64)
                            .unwrap_or(f64::NAN);
                    }
                    (loss, g)
                })
                .collect();
            let mut grad = vec![0.0f32; n_params];
            let mut batch_loss = 0.0f64;
            for (l, g) in &chunk_grads {
                batch_loss += l;
                for i in 0..n_params {
                    grad[i] += g[i];
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged (NaN loss) at epoch {epoch}, seed {member_seed}"
                )));
            }
            let inv = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut flat, &grad);
            train_nll += batch_loss;
        }
        train_nll /= train.len() as f64;

        params = NetParams::from_flat(arch, &flat)?;
        let val_nll = eval_nll(&params, val);
        log.push(EpochLog {
            epoch,
            train_nll,
            val_nll,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best_flat = flat.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((NetParams::from_flat(arch, &best_flat)?, log))
}

/// Unweighted mean NLL used for early stopping.
fn eval_nll(params: &NetParams<f32>, samples: &[(Vec<f32>, f32, f32)]) -> f64 {
    let total: f64 = samples
        .par_iter()
        .map(|(patch, y, _)| {
            net_forward(params, patch)
                .map(|(mu, sigma)| gaussian_nll(mu, sigma, *y, 1.0).as_f64())
                .unwrap_or(f64::NAN)
        })
        .sum();
    total / samples.len() as f64
}

/// Combine member predictions: ensemble mean, and total variance
/// (mean of member variances plus variance of member means).
pub fn combine_members(mus: &[f64], sigmas: &[f64]) -> (f64, f64) {
    let n = mus.len() as f64;
    let mu_star = mus.iter().sum::<f64>() / n;
    let mean_var = sigmas.iter().map(|s| s * s).sum::<f64>() / n;
    let var_mu = mus.iter().map(|m| (m - mu_star) * (m - mu_star)).sum::<f64>() / n;
    (mu_star, (mean_var + var_mu).sqrt())
}

/// Ensemble prediction on a raw patch, in tonnes per hectare.
pub fn ensemble_predict(ens: &Ensemble, raw_patch: &[f32]) -> Result<(f64, f64)> {
    if ens.members.is_empty() {
        return Err(Error::Argument("empty ensemble".into()));
    }
    let patch = ens.norm.normalize(raw_patch);
    let mut mus = Vec::with_capacity(ens.members.len());
    let mut sigmas = Vec::with_capacity(ens.members.len());
    for m in &ens.members {
        let (mu, sigma) = net_forward(m, &patch)?;
        mus.push(mu as f64 * ens.norm.y_scale);
        sigmas.push(sigma as f64 * ens.norm.y_scale);
    }
    let (mu, sigma) = combine_members(&mus, &sigmas);
    Ok((mu.max(0.0), sigma))
}

/// Slide the network over a canopy-height tile (bands: height, uncertainty)
/// and emit mean and standard-deviation grids at the output stride.
pub fn predict_agbd_map(
    ens: &Ensemble,
    chm: &RasterGrid,
    lat_model: &LatModel,
) -> Result<(RasterGrid, RasterGrid)> {
    if chm.bands < 2 {
        return Err(Error::Argument(
            "height tile needs height and uncertainty bands".into(),
        ));
    }
    let ow = chm.width.div_ceil(OUTPUT_STRIDE);
    let oh = chm.height.div_ceil(OUTPUT_STRIDE);
    let t = chm.transform;
    let out_t = GeoTransform::new(
        t.origin_x,
        t.origin_y,
        t.pixel_size_x * OUTPUT_STRIDE as f64,
        t.pixel_size_y * OUTPUT_STRIDE as f64,
    )?;
    let nodata = crate::raster::DEFAULT_NODATA;

    let cells: Vec<(f32, f32)> = (0..ow * oh)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx % ow, idx / ow);
            let cc = (i * OUTPUT_STRIDE + OUTPUT_STRIDE / 2).min(chm.width - 1);
            let cr = (j * OUTPUT_STRIDE + OUTPUT_STRIDE / 2).min(chm.height - 1);
            match extract_patch(chm, cc, cr, lat_model) {
                Some(raw) => match ensemble_predict(ens, &raw) {
                    Ok((mu, sigma)) => (mu as f32, sigma as f32),
                    Err(_) => (nodata, nodata),
                },
                None => (nodata, nodata),
            }
        })
        .collect();

    let mut mu_grid = RasterGrid::filled(ow, oh, 1, out_t, 0.0);
    mu_grid.nodata = nodata;
    mu_grid.crs_label = chm.crs_label.clone();
    let mut sigma_grid = mu_grid.clone();
    for (idx, (m, s)) in cells.into_iter().enumerate() {
        mu_grid.data[idx] = m;
        sigma_grid.data[idx] = s;
    }
    Ok((mu_grid, sigma_grid))
}

/// Map-versus-footprint comparison metrics with 15 t/ha residual bins.
#[derive(Debug, Clone, Serialize)]
pub struct AgbdCompare {
    pub mae: f64,
    pub rmse: f64,
    pub bias: f64,
    pub n: usize,
    pub binned_residuals: Vec<ResidualBin>,
}

pub fn compare_to_reference(
    mu_map: &RasterGrid,
    footprints: &[GediFootprint],
) -> Result<AgbdCompare> {
    const BIN_W: f64 = 15.0;
    let mut errors = Vec::new();
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); 24];
    for f in footprints {
        let (c, r) = mu_map.transform.cell_of(f.x, f.y);
        if c < 0 || r < 0 || c >= mu_map.width as i64 || r >= mu_map.height as i64 {
            continue;
        }
        let v = mu_map.get(0, c as usize, r as usize);
        if mu_map.is_nodata(v) {
            continue;
        }
        let e = v as f64 - f.agbd;
        errors.push(e);
        let b = ((f.agbd / BIN_W).floor() as i64).clamp(0, 23) as usize;
        bins[b].push(e);
    }
    if errors.is_empty() {
        return Err(Error::EmptyData("no footprints matched the map".into()));
    }
    let n = errors.len();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let bias = errors.iter().sum::<f64>() / n as f64;
    let nearest = |v: &[f64], p: f64| -> f64 {
        let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    };
    let binned_residuals = bins
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(b, mut v)| {
            v.sort_by(|a, x| a.partial_cmp(x).unwrap());
            ResidualBin {
                lo: b as f64 * BIN_W,
                hi: (b + 1) as f64 * BIN_W,
                n: v.len(),
                p10: nearest(&v, 0.10),
                q1: nearest(&v, 0.25),
                median: nearest(&v, 0.50),
                q3: nearest(&v, 0.75),
                p90: nearest(&v, 0.90),
            }
        })
        .collect();
    Ok(AgbdCompare {
        mae,
        rmse,
        bias,
        n,
        binned_residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn fp(id: &str, date: &str, quality: bool, beam: Beam) -> GediFootprint {
        GediFootprint {
            id: id.into(),
            date: d(date),
            lon: -2.0,
            lat: 6.5,
            x: 1000.0,
            y: 2000.0,
            agbd: 50.0,
            quality_ok: quality,
            beam,
        }
    }

    fn window_2022() -> SelectionWindow {
        SelectionWindow::new(d("2022-04-01"), d("2022-11-30")).unwrap()
    }

    #[test]
    fn filter_drops_coverage_beam() {
        let fps = vec![
            fp("a", "2022-06-01", true, Beam::Power),
            fp("b", "2022-06-01", true, Beam::Coverage),
        ];
        let kept = filter_gedi(&fps, window_2022());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "a");
    }

    #[test]
    fn filter_drops_bad_quality_and_out_of_window() {
        let fps = vec![
            fp("a", "2022-06-01", false, Beam::Power),
            fp("b", "2022-03-31", true, Beam::Power),
            fp("c", "2022-11-30", true, Beam::Power),
        ];
        let kept = filter_gedi(&fps, window_2022());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "c");
    }

    #[test]
    fn filter_passes_all_good() {
        let fps: Vec<GediFootprint> = (0..2100)
            .map(|i| fp(&format!("f{i}"), "2022-07-15", true, Beam::Power))
            .collect();
        assert_eq!(filter_gedi(&fps, window_2022()).len(), 2100);
    }

    #[test]
    fn filter_order_invariance() {
        let mut fps = vec![
            fp("a", "2022-06-01", true, Beam::Power),
            fp("b", "2022-07-01", true, Beam::Coverage),
            fp("c", "2022-08-01", true, Beam::Power),
        ];
        let fwd: Vec<String> = filter_gedi(&fps, window_2022())
            .into_iter()
            .map(|f| f.id)
            .collect();
        fps.reverse();
        let mut bwd: Vec<String> = filter_gedi(&fps, window_2022())
            .into_iter()
            .map(|f| f.id)
            .collect();
        bwd.reverse();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn stripes_partition_and_are_equal_fifths() {
        let s = make_stripe_split("T_001", 100).unwrap();
        assert_eq!(s.bounds, [0, 20, 40, 60, 80, 100]);
        // Every column belongs to exactly one stripe.
        let mut counts = [0usize; 5];
        for col in 0..100 {
            for i in 0..5 {
                if col >= s.bounds[i] && col < s.bounds[i + 1] {
                    counts[i] += 1;
                }
            }
        }
        assert_eq!(counts, [20; 5]);
        let trains = s.roles.iter().filter(|r| **r == StripeRole::Train).count();
        let vals = s.roles.iter().filter(|r| **r == StripeRole::Val).count();
        let tests = s.roles.iter().filter(|r| **r == StripeRole::Test).count();
        assert_eq!((trains, vals, tests), (3, 1, 1));
    }

    #[test]
    fn stripes_deterministic_per_tile() {
        let a = make_stripe_split("T_007", 500).unwrap();
        let b = make_stripe_split("T_007", 500).unwrap();
        assert_eq!(a.roles, b.roles);
    }

    #[test]
    fn bin_weight_ratio_exact() {
        // 100 values in bin 0, one value in bin 1.
        let mut values = vec![5.0f64; 100];
        values.push(15.0);
        let bw = compute_bin_weights(&values).unwrap();
        assert_eq!(bw.counts[0], 100);
        assert_eq!(bw.counts[1], 1);
        // The inverse-sqrt rule itself gives an exact 10x ratio.
        assert_eq!(bw.raw_weights[100] / bw.raw_weights[0], 10.0);
        // Mean-one normalization preserves the ratio up to rounding.
        let ratio = bw.weights[100] / bw.weights[0];
        assert!((ratio - 10.0).abs() < 1e-12);
        let mean: f64 = bw.weights.iter().sum::<f64>() / bw.weights.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bin_weights_equalize_weighted_frequencies() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..220.0)).collect();
        let bw = compute_bin_weights(&values).unwrap();
        // w_i * sqrt(count(bin_i)) is the same for every sample.
        let refv = bw.weights[0] * (bw.counts[bin_of(values[0])] as f64).sqrt();
        for (i, &v) in values.iter().enumerate() {
            let x = bw.weights[i] * (bw.counts[bin_of(v)] as f64).sqrt();
            assert!((x - refv).abs() < 1e-9);
        }
    }

    #[test]
    fn bin_clipping() {
        assert_eq!(bin_of(250.0), 19);
        assert_eq!(bin_of(200.0), 19);
        assert_eq!(bin_of(0.0), 0);
        assert_eq!(bin_of(9.99), 0);
        assert_eq!(bin_of(10.0), 1);
    }

    #[test]
    fn uniform_bins_give_unit_weights() {
        let mut values = Vec::new();
        for b in 0..N_BINS {
            for _ in 0..5 {
                values.push(b as f64 * 10.0 + 5.0);
            }
        }
        let bw = compute_bin_weights(&values).unwrap();
        for w in bw.weights {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_identical_members() {
        let (mu, sigma) = combine_members(&[40.0, 40.0], &[7.0, 7.0]);
        assert_eq!(mu, 40.0);
        assert!((sigma - 7.0).abs() < 1e-12);
    }

    #[test]
    fn combine_total_variance_arithmetic() {
        let (mu, sigma) = combine_members(&[10.0, 20.0], &[0.0, 0.0]);
        assert_eq!(mu, 15.0);
        assert!((sigma - 5.0).abs() < 1e-12);
    }

    #[test]
    fn combine_matches_total_variance_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let mus: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..200.0)).collect();
            let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
            let (mu, sigma) = combine_members(&mus, &sigmas);
            let m = mus.iter().sum::<f64>() / n as f64;
            let ev = sigmas.iter().map(|s| s * s).sum::<f64>() / n as f64;
            let vm = mus.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            assert!((mu - m).abs() < 1e-12);
            assert!((sigma * sigma - (ev + vm)).abs() < 1e-12 * (1.0 + ev + vm));
            assert!(sigma >= 0.0);
        }
    }

    fn tile(w: usize, h: usize, height: f32) -> RasterGrid {
        let t = GeoTransform::new(0.0, h as f64 * 10.0, 10.0, -10.0).unwrap();
        let mut g = RasterGrid::filled(w, h, 2, t, height);
        for i in 0..w * h {
            g.data[w * h + i] = 1.0; // uncertainty band
        }
        g
    }

    #[test]
    fn patch_extraction_shape_and_lat() {
        let g = tile(30, 30, 12.0);
        let lm = LatModel::default();
        let p = extract_patch(&g, 15, 15, &lm).unwrap();
        assert_eq!(p.len(), PATCH_SIDE * PATCH_SIDE * 4);
        // Heights all equal, lat channels constant within the patch.
        assert!(p.chunks_exact(4).all(|c| c[0] == 12.0 && c[1] == 1.0));
        let s = p[2];
        assert!(p.chunks_exact(4).all(|c| c[2] == s));
    }

    #[test]
    fn patch_nodata_majority_is_none() {
        let mut g = tile(30, 30, 12.0);
        let nd = g.nodata;
        // Fill > 50% of the patch around (15, 15) with nodata.
        for r in 8..23 {
            for c in 8..20 {
                g.set(0, c, r, nd);
            }
        }
        assert!(extract_patch(&g, 15, 15, &LatModel::default()).is_none());
    }

    #[test]
    fn patch_minority_nodata_imputed() {
        let mut g = tile(30, 30, 10.0);
        let nd = g.nodata;
        g.set(0, 15, 15, nd);
        let p = extract_patch(&g, 15, 15, &LatModel::default()).unwrap();
        // The single missing height becomes the patch mean of the rest.
        let center = PATCH_SIDE * PATCH_SIDE / 2;
        assert_eq!(p[center * 4], 10.0);
    }

    #[test]
    fn map_dimensions_are_ceil_of_fifth() {
        let ens = tiny_ensemble(1);
        let g = tile(23, 11, 8.0);
        let (mu, _) = predict_agbd_map(&ens, &g, &LatModel::default()).unwrap();
        assert_eq!((mu.width, mu.height), (5, 3));
        assert!((mu.transform.pixel_size_x - 50.0).abs() < 1e-9);
    }

    #[test]
    fn all_nodata_tile_maps_to_nodata() {
        let mut g = tile(20, 20, 5.0);
        let nd = g.nodata;
        for i in 0..400 {
            g.data[i] = nd;
        }
        let ens = tiny_ensemble(2);
        let (mu, sigma) = predict_agbd_map(&ens, &g, &LatModel::default()).unwrap();
        assert!(mu.data.iter().all(|&v| mu.is_nodata(v)));
        assert!(sigma.data.iter().all(|&v| sigma.is_nodata(v)));
    }

    #[test]
    fn constant_tile_gives_constant_interior() {
        let ens = tiny_ensemble(3);
        let g = tile(40, 40, 14.0);
        let (mu, _) = predict_agbd_map(&ens, &g, &LatModel::default()).unwrap();
        // Interior cells of one row see bit-identical patches (the latitude
        // channels vary only with the row); across rows the latitude drift
        // over 400 m is tiny.
        let v = mu.get(0, 3, 3);
        for j in 2..6 {
            let row_v = mu.get(0, 2, j);
            for i in 2..6 {
                assert_eq!(mu.get(0, i, j), row_v);
                assert!((mu.get(0, i, j) - v).abs() < 0.05 * v.abs().max(1.0));
            }
        }
    }

    fn tiny_ensemble(seed: u64) -> Ensemble {
        let arch = NetArch {
            in_channels: 4,
            channels: vec![3, 4],
            patch: PATCH_SIDE,
        };
        Ensemble {
            members: (0..2).map(|m| NetParams::init(&arch, seed + m)).collect(),
            arch,
            norm: NormStats {
                height_mean: 10.0,
                height_std: 5.0,
                unc_mean: 1.0,
                unc_std: 0.5,
                y_scale: 100.0,
            },
        }
    }

    #[test]
    fn training_decreases_weighted_nll() {
        // Small synthetic set: biomass scales with patch height.
        let arch = NetArch {
            in_channels: 4,
            channels: vec![4, 6],
            patch: PATCH_SIDE,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let lm = LatModel::default();
        let make = |h: f32| {
            let g = tile(PATCH_SIDE, PATCH_SIDE, h);
            extract_patch(&g, 7, 7, &lm).unwrap()
        };
        let mut samples = Vec::new();
        for _ in 0..48 {
            let h: f32 = rng.gen_range(2.0..28.0);
            samples.push(TrainSample {
                patch: make(h),
                agbd: 4.0 * h as f64 + rng.gen_range(-3.0..3.0),
                weight: 1.0,
            });
        }
        let (train, val) = samples.split_at(40);
        let config = TrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            ensemble: 1,
            patience: 50,
            max_epochs: 10,
            seed: 2,
        };
        let (_, log) = net_train(train, val, &arch, &config).unwrap();
        let epochs = &log.members[0];
        assert_eq!(epochs.len(), 10);
        // Weighted training NLL decreases over the first 10 epochs.
        assert!(
            epochs.last().unwrap().train_nll < epochs.first().unwrap().train_nll,
            "{} -> {}",
            epochs.first().unwrap().train_nll,
            epochs.last().unwrap().train_nll
        );
    }

    #[test]
    fn training_converges_on_constant_target() {
        let arch = NetArch {
            in_channels: 4,
            channels: vec![4, 6],
            patch: PATCH_SIDE,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let lm = LatModel::default();
        let mut samples = Vec::new();
        for _ in 0..40 {
            let h: f32 = rng.gen_range(2.0..28.0);
            let g = tile(PATCH_SIDE, PATCH_SIDE, h);
            samples.push(TrainSample {
                patch: extract_patch(&g, 7, 7, &lm).unwrap(),
                agbd: 80.0,
                weight: 1.0,
            });
        }
        let (train, val) = samples.split_at(32);
        // Higher learning rate: the base rate is a full-scale setting.
        let config = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 8,
            ensemble: 1,
            patience: 100,
            max_epochs: 60,
            seed: 3,
        };
        let (ens, log) = net_train(train, val, &arch, &config).unwrap();
        let (mu, _) = ensemble_predict(&ens, &train[0].patch).unwrap();
        assert!((mu - 80.0).abs() / 80.0 < 0.05, "mu {mu}");
        // Sigma shrinks as the mean locks on (smoothed: compare epoch
        // averages of first and last thirds via val NLL trend).
        let epochs = &log.members[0];
        let third = epochs.len() / 3;
        let head: f64 =
            epochs[..third].iter().map(|e| e.train_nll).sum::<f64>() / third as f64;
        let tail: f64 = epochs[epochs.len() - third..]
            .iter()
            .map(|e| e.train_nll)
            .sum::<f64>()
            / third as f64;
        assert!(tail < head);
    }

    #[test]
    fn weights_normalized_to_mean_one_keep_loss_scale() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..200.0)).collect();
        let bw = compute_bin_weights(&values).unwrap();
        let mean: f64 = bw.weights.iter().sum::<f64>() / bw.weights.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compare_exact_map() {
        let mut g = tile(20, 20, 0.0);
        g.bands = 1;
        g.data.truncate(400);
        for v in g.data.iter_mut() {
            *v = 42.0;
        }
        let fps: Vec<GediFootprint> = (0..10)
            .map(|i| {
                let mut f = fp(&format!("f{i}"), "2022-06-15", true, Beam::Power);
                f.x = 5.0 + 19.0 * i as f64;
                f.y = 195.0 - 17.0 * i as f64;
                f.agbd = 42.0;
                f
            })
            .collect();
        let cmp = compare_to_reference(&g, &fps).unwrap();
        assert_eq!(cmp.n, 10);
        assert_eq!(cmp.mae, 0.0);
        assert_eq!(cmp.rmse, 0.0);
        assert_eq!(cmp.bias, 0.0);
    }

    #[test]
    fn compare_uniform_bias() {
        let mut g = tile(20, 20, 0.0);
        g.bands = 1;
        g.data.truncate(400);
        for v in g.data.iter_mut() {
            *v = 56.5;
        }
        let fps: Vec<GediFootprint> = (0..5)
            .map(|i| {
                let mut f = fp(&format!("f{i}"), "2022-06-15", true, Beam::Power);
                f.x = 15.0 + 30.0 * i as f64;
                f.y = 100.0;
                f.agbd = 50.0;
                f
            })
            .collect();
        let cmp = compare_to_reference(&g, &fps).unwrap();
        assert!((cmp.bias - 6.5).abs() < 1e-9);
        assert!((cmp.mae - 6.5).abs() < 1e-9);
    }

    #[test]
    fn compare_empty_errors() {
        let g = tile(4, 4, 1.0);
        assert!(compare_to_reference(&g, &[]).is_err());
    }
}
