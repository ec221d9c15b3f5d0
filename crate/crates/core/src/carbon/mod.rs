//! Cover-to-biomass pairing, sequestration scenarios and carbon accounting.
//!
//! The shade map resamples bilinearly onto the 50 m biomass grid, per-pixel
//! density becomes tonnes per pixel, and a quadratic posterior (see
//! [`mcmc`]) turns target cover levels into posterior distributions of added
//! carbon: below-threshold pixels contribute the regression value at the
//! threshold, pixels already at or above keep their mapped biomass.

pub mod mcmc;

pub use mcmc::{
    effective_sample_size, fit_regression, hdi, sample_posterior, split_rhat, Diagnostics,
    PosteriorDraws, QuadStats, RegressionConfig,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{resample_bilinear, RasterGrid};
use crate::{Error, Result};

/// Carbon fraction of dry above-ground biomass.
pub const CARBON_FRACTION: f64 = 0.47;

/// Tonnes CO2e per tonne of carbon.
pub const CO2E_PER_CARBON: f64 = 44.0 / 12.0;

/// Benchmark per-hectare sequestration rate (t CO2e/ha/yr) reported
/// alongside the computed rate for comparison.
pub const BENCHMARK_RATE_T_CO2E_PER_HA_YR: f64 = 1.635;

pub fn biomass_to_carbon(biomass_t: f64) -> Result<f64> {
    if biomass_t < 0.0 {
        return Err(Error::Argument(format!("negative biomass {biomass_t}")));
    }
    Ok(CARBON_FRACTION * biomass_t)
}

pub fn carbon_to_co2e(carbon_t: f64) -> f64 {
    carbon_t * CO2E_PER_CARBON
}

pub fn co2e_to_carbon(co2e_t: f64) -> f64 {
    co2e_t / CO2E_PER_CARBON
}

pub fn carbon_to_biomass(carbon_t: f64) -> f64 {
    carbon_t / CARBON_FRACTION
}

/// Aligned cover/biomass pairs on the 50 m grid.
#[derive(Debug, Clone)]
pub struct PairedPixels {
    /// Shade cover, percent.
    pub cover: Vec<f32>,
    /// Above-ground biomass per pixel, tonnes.
    pub agb_t: Vec<f32>,
    /// Country id per pair (0 when no country raster was supplied).
    pub country: Vec<i32>,
    pub cell_area_ha: f64,
}

/// Resample the 10 m shade map onto the biomass grid and pair pixels where
/// both maps are valid (and, when given, the cocoa mask at 50 m is set).
pub fn pair_maps(
    shade10: &RasterGrid,
    agbd50: &RasterGrid,
    cocoa50: Option<&RasterGrid>,
    countries50: Option<&RasterGrid>,
) -> Result<PairedPixels> {
    let cover50 = resample_bilinear(shade10, agbd50.transform, agbd50.width, agbd50.height)?;
    let cell_area_ha = agbd50.cell_area_ha();
    let mut cover = Vec::new();
    let mut agb_t = Vec::new();
    let mut country = Vec::new();
    let n = agbd50.width * agbd50.height;
    for i in 0..n {
        let c = cover50.data[i];
        let d = agbd50.data[i];
        if cover50.is_nodata(c) || agbd50.is_nodata(d) {
            continue;
        }
        if let Some(m) = cocoa50 {
            let v = m.data[i];
            if m.is_nodata(v) || v < 0.5 {
                continue;
            }
        }
        cover.push(c);
        agb_t.push((d as f64 * cell_area_ha) as f32);
        country.push(match countries50 {
            Some(g) => {
                let v = g.data[i];
                if g.is_nodata(v) {
                    0
                } else {
                    v as i32
                }
            }
            None => 0,
        });
    }
    if cover.is_empty() {
        return Err(Error::EmptyExtent("maps share no valid pixels".into()));
    }
    Ok(PairedPixels {
        cover,
        agb_t,
        country,
        cell_area_ha,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_draws: usize,
    pub seed: u64,
    pub carbon_fraction: f64,
    pub years: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_draws: 100,
            seed: 0,
            carbon_fraction: CARBON_FRACTION,
            years: 30.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub threshold_pct: f64,
    pub added_carbon_mean_t: f64,
    pub hdi_low_t: f64,
    pub hdi_high_t: f64,
    pub co2e_t: f64,
    /// Area currently below the threshold, hectares.
    pub area_below_ha: f64,
    /// Current total carbon over the paired pixels, tonnes.
    pub current_carbon_t: f64,
    pub annual_rate_t_co2e_per_ha_yr: f64,
    pub annual_total_t_co2e: f64,
    pub per_country: Vec<CountryScenario>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountryScenario {
    pub country_id: i32,
    pub added_carbon_mean_t: f64,
    pub hdi_low_t: f64,
    pub hdi_high_t: f64,
    pub co2e_t: f64,
}

/// Deterministically draw 100 joint coefficient vectors (keeping posterior
/// correlation) from the post-warmup draws.
pub fn draw_coefficients(
    draws: &PosteriorDraws,
    n: usize,
    seed: u64,
) -> Vec<[f64; 3]> {
    let mut idx: Vec<usize> = (0..draws.draws.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n.min(draws.draws.len()));
    idx.iter()
        .map(|&i| [draws.draws[i][0], draws.draws[i][1], draws.draws[i][2]])
        .collect()
}

/// Raise every below-threshold pixel to the threshold cover level.
///
/// For each posterior coefficient draw, the scenario total is
/// `f(threshold) * n_below + sum(agb of pixels at or above)`; added carbon
/// is the carbon fraction times the difference from the current total.
pub fn scenario(
    draws: &PosteriorDraws,
    pairs: &PairedPixels,
    threshold_pct: f64,
    config: &ScenarioConfig,
) -> Result<ScenarioResult> {
    if !(0.0 < threshold_pct && threshold_pct < 100.0) {
        return Err(Error::Argument(format!(
            "threshold {threshold_pct} out of (0,100)"
        )));
    }
    let coeffs = draw_coefficients(draws, config.n_draws, config.seed);

    // One pass in pixel order: below-count and above-sum per country and
    // overall.
    let mut country_ids: Vec<i32> = pairs.country.clone();
    country_ids.sort_unstable();
    country_ids.dedup();
    let slot_of = |id: i32| country_ids.binary_search(&id).unwrap();

    let k = country_ids.len();
    let mut n_below = vec![0u64; k + 1];
    let mut sum_above = vec![0.0f64; k + 1];
    let mut sum_below = vec![0.0f64; k + 1];
    for i in 0..pairs.cover.len() {
        let below = (pairs.cover[i] as f64) < threshold_pct;
        let slots = [k, slot_of(pairs.country[i])];
        for &s in &slots {
            if below {
                n_below[s] += 1;
                sum_below[s] += pairs.agb_t[i] as f64;
            } else {
                sum_above[s] += pairs.agb_t[i] as f64;
            }
        }
    }

    let added_for = |slot: usize, c: &[f64; 3]| -> f64 {
        let f = c[0] + c[1] * threshold_pct + c[2] * threshold_pct * threshold_pct;
        let scenario_total = f * n_below[slot] as f64 + sum_above[slot];
        let current_total = sum_below[slot] + sum_above[slot];
        config.carbon_fraction * (scenario_total - current_total)
    };

    let summarize = |slot: usize| -> Result<(f64, f64, f64)> {
        let added: Vec<f64> = coeffs.iter().map(|c| added_for(slot, c)).collect();
        let mean = added.iter().sum::<f64>() / added.len() as f64;
        let (lo, hi) = hdi(&added, 0.95)?;
        Ok((mean, lo, hi))
    };

    let (mean, lo, hi) = summarize(k)?;
    let co2e = carbon_to_co2e(mean);
    let area_below_ha = n_below[k] as f64 * pairs.cell_area_ha;
    let annual_total = co2e / config.years;
    let annual_rate = if area_below_ha > 0.0 {
        co2e / (config.years * area_below_ha)
    } else {
        0.0
    };
    let current_carbon_t =
        config.carbon_fraction * (sum_below[k] + sum_above[k]);

    let mut per_country = Vec::new();
    for (s, &id) in country_ids.iter().enumerate() {
        let (m, l, h) = summarize(s)?;
        per_country.push(CountryScenario {
            country_id: id,
            added_carbon_mean_t: m,
            hdi_low_t: l,
            hdi_high_t: h,
            co2e_t: carbon_to_co2e(m),
        });
    }

    Ok(ScenarioResult {
        threshold_pct,
        added_carbon_mean_t: mean,
        hdi_low_t: lo,
        hdi_high_t: hi,
        co2e_t: co2e,
        area_below_ha,
        current_carbon_t,
        annual_rate_t_co2e_per_ha_yr: annual_rate,
        annual_total_t_co2e: annual_total,
        per_country,
    })
}

/// Annualized sequestration under linear implementation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AnnualRate {
    pub total_per_year_t: f64,
    pub per_ha_per_year_t: f64,
}

pub fn annual_rate(total_co2e_t: f64, years: f64, area_ha: f64) -> Result<AnnualRate> {
    if years <= 0.0 || area_ha <= 0.0 {
        return Err(Error::Argument(format!(
            "years {years} and area {area_ha} must be positive"
        )));
    }
    Ok(AnnualRate {
        total_per_year_t: total_co2e_t / years,
        per_ha_per_year_t: total_co2e_t / (years * area_ha),
    })
}

/// Per-country emission accounting inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountryEmission {
    pub name: String,
    /// Country id in the country raster.
    pub country_id: i32,
    /// Average annual cocoa production, tonnes.
    pub production_t: f64,
    /// kg CO2e per kg cocoa, excluding land-use change.
    pub factor_excl_sluc: f64,
    /// kg CO2e per kg cocoa, including statistical land-use change.
    pub factor_incl_sluc: f64,
    /// National total greenhouse-gas emissions, tonnes CO2e per year.
    pub national_total_t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmissionConfig {
    pub countries: Vec<CountryEmission>,
}

impl EmissionConfig {
    /// Default configuration: production as 2017-2021 country averages,
    /// emission factors excluding/including land-use change, and national
    /// inventory totals.
    pub fn default_two_countries() -> Self {
        Self {
            countries: vec![
                CountryEmission {
                    name: "Ghana".into(),
                    country_id: 1,
                    production_t: 0.85e6,
                    factor_excl_sluc: 2.0,
                    factor_incl_sluc: 4.0,
                    national_total_t: 45.6e6,
                },
                CountryEmission {
                    name: "Cote d'Ivoire".into(),
                    country_id: 2,
                    production_t: 2.2e6,
                    factor_excl_sluc: 2.0,
                    factor_incl_sluc: 30.0,
                    national_total_t: 66.8e6,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OffsetReport {
    pub include_sluc: bool,
    pub cocoa_emissions_t: f64,
    /// Percent of cocoa-production emissions counterbalanced annually.
    pub offset_pct: f64,
    /// Percent of combined national totals counterbalanced annually.
    pub national_offset_pct: f64,
    pub per_country: Vec<(String, f64)>,
}

/// Fraction of annual emissions counterbalanced by annual sequestration.
/// Emission factors are kg CO2e per kg cocoa, so tonnes multiply directly.
pub fn offset_fraction(
    annual_total_co2e_t: f64,
    config: &EmissionConfig,
    include_sluc: bool,
) -> Result<OffsetReport> {
    let factor = |c: &CountryEmission| {
        if include_sluc {
            c.factor_incl_sluc
        } else {
            c.factor_excl_sluc
        }
    };
    let cocoa_emissions_t: f64 = config
        .countries
        .iter()
        .map(|c| c.production_t * factor(c))
        .sum();
    let national_total: f64 = config.countries.iter().map(|c| c.national_total_t).sum();
    if cocoa_emissions_t <= 0.0 || national_total <= 0.0 {
        return Err(Error::Argument("zero emissions in config".into()));
    }
    let per_country = config
        .countries
        .iter()
        .map(|c| {
            (
                c.name.clone(),
                100.0 * annual_total_co2e_t / (c.production_t * factor(c)),
            )
        })
        .collect();
    Ok(OffsetReport {
        include_sluc,
        cocoa_emissions_t,
        offset_pct: 100.0 * annual_total_co2e_t / cocoa_emissions_t,
        national_offset_pct: 100.0 * annual_total_co2e_t / national_total,
        per_country,
    })
}

/// Land-use classes for the carbon-stock comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LanduseClass {
    Cocoa,
    DisturbedForest,
    UndisturbedForest,
}

/// TMF raster codes.
pub const TMF_DISTURBED: f32 = 1.0;
pub const TMF_UNDISTURBED: f32 = 2.0;

#[derive(Debug, Clone, Serialize)]
pub struct LanduseStats {
    pub class: LanduseClass,
    pub n_pixels: u64,
    pub area_ha: f64,
    /// Carbon density over the class, tonnes C per hectare.
    pub density_mean: f64,
    pub density_sd: f64,
    /// Total carbon, tonnes.
    pub total_carbon_t: f64,
    /// 95% CI half-width of the total: 1.96 * sd(pixel carbon) * sqrt(n).
    /// Pixel totals are treated as independent, which is optimistic under
    /// spatial autocorrelation.
    pub ci95_t: f64,
}

/// Per-class area, density and total-carbon statistics at 50 m.
/// Pixels mapped as cocoa are excluded from the forest classes so the three
/// classes stay distinct; empty classes are omitted (logged).
pub fn landuse_stats(
    agbd50: &RasterGrid,
    cocoa50: &RasterGrid,
    tmf50: &RasterGrid,
    carbon_fraction: f64,
) -> Result<Vec<LanduseStats>> {
    if !agbd50.same_geometry(cocoa50) || !agbd50.same_geometry(tmf50) {
        return Err(Error::Alignment(
            "landuse inputs must share the 50 m grid".into(),
        ));
    }
    let cell_ha = agbd50.cell_area_ha();
    let mut acc: Vec<(u64, f64, f64)> = vec![(0, 0.0, 0.0); 3]; // n, sum, sum2 of density tC/ha
    let n = agbd50.width * agbd50.height;
    for i in 0..n {
        let d = agbd50.data[i];
        if agbd50.is_nodata(d) {
            continue;
        }
        let cocoa = !cocoa50.is_nodata(cocoa50.data[i]) && cocoa50.data[i] >= 0.5;
        let tmf = tmf50.data[i];
        let class = if cocoa {
            0
        } else if !tmf50.is_nodata(tmf) && tmf == TMF_DISTURBED {
            1
        } else if !tmf50.is_nodata(tmf) && tmf == TMF_UNDISTURBED {
            2
        } else {
            continue;
        };
        let density = carbon_fraction * d as f64;
        let a = &mut acc[class];
        a.0 += 1;
        a.1 += density;
        a.2 += density * density;
    }
    let classes = [
        LanduseClass::Cocoa,
        LanduseClass::DisturbedForest,
        LanduseClass::UndisturbedForest,
    ];
    let mut out = Vec::new();
    for (ci, &class) in classes.iter().enumerate() {
        let (count, sum, sum2) = acc[ci];
        if count == 0 {
            log::info!("landuse class {class:?} has no pixels; omitted");
            continue;
        }
        let nf = count as f64;
        let mean = sum / nf;
        let var = (sum2 / nf - mean * mean).max(0.0);
        let sd = var.sqrt();
        // Per-pixel carbon tonnes = density * cell area.
        let sd_pixel_t = sd * cell_ha;
        out.push(LanduseStats {
            class,
            n_pixels: count,
            area_ha: nf * cell_ha,
            density_mean: mean,
            density_sd: sd,
            total_carbon_t: sum * cell_ha,
            ci95_t: 1.96 * sd_pixel_t * nf.sqrt(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GeoTransform, DEFAULT_NODATA};
    use rand::Rng;
    use rand_chacha::ChaCha20Rng;

    fn gt(ps: f64, h: usize) -> GeoTransform {
        GeoTransform::new(0.0, h as f64 * ps, ps, -ps).unwrap()
    }

    #[test]
    fn conversion_chain() {
        assert_eq!(biomass_to_carbon(100.0).unwrap(), 47.0);
        let co2e = carbon_to_co2e(84e6);
        assert!((co2e - 308.0e6).abs() < 1e6 * 0.5);
        assert!(biomass_to_carbon(-1.0).is_err());
        assert_eq!(biomass_to_carbon(0.0).unwrap(), 0.0);
        // Invertibility.
        let b = 123.456;
        let c = biomass_to_carbon(b).unwrap();
        assert!((carbon_to_biomass(c) - b).abs() < 1e-12 * b);
        assert!((co2e_to_carbon(carbon_to_co2e(c)) - c).abs() < 1e-12 * c);
    }

    fn paired_grids() -> (RasterGrid, RasterGrid) {
        // 10 m shade map, 40x40; 50 m biomass map, 8x8.
        let t10 = gt(10.0, 40);
        let mut shade = RasterGrid::filled(40, 40, 1, t10, 0.0);
        for r in 0..40 {
            for c in 0..40 {
                shade.set(0, c, r, (c as f32) * 100.0 / 39.0);
            }
        }
        let t50 = gt(50.0, 8);
        let agbd = RasterGrid::filled(8, 8, 1, t50, 40.0);
        (shade, agbd)
    }

    #[test]
    fn pairing_arithmetic() {
        let (shade, agbd) = paired_grids();
        let pairs = pair_maps(&shade, &agbd, None, None).unwrap();
        // 40 t/ha on a 0.25 ha cell is 10 t per pixel.
        assert!(pairs.agb_t.iter().all(|&v| (v - 10.0).abs() < 1e-4));
        assert!((pairs.cell_area_ha - 0.25).abs() < 1e-12);
        assert_eq!(pairs.cover.len(), 64);
    }

    #[test]
    fn pairing_drops_nodata() {
        let (mut shade, agbd) = paired_grids();
        // The 50 m cell centers sample the 10 m grid at columns 2, 7, 12,
        // ...; poisoning column 7 kills the second output column.
        for r in 0..40 {
            shade.set(0, 7, r, DEFAULT_NODATA);
        }
        let pairs = pair_maps(&shade, &agbd, None, None).unwrap();
        assert_eq!(pairs.cover.len(), 56);
    }

    #[test]
    fn pairing_constant_maps() {
        let t10 = gt(10.0, 40);
        let shade = RasterGrid::filled(40, 40, 1, t10, 25.0);
        let t50 = gt(50.0, 8);
        let agbd = RasterGrid::filled(8, 8, 1, t50, 12.0);
        let pairs = pair_maps(&shade, &agbd, None, None).unwrap();
        assert!(pairs.cover.iter().all(|&c| (c - 25.0).abs() < 1e-4));
        assert!(pairs.agb_t.iter().all(|&v| (v - 3.0).abs() < 1e-5));
    }

    fn fake_draws(coeffs: [f64; 3], n: usize) -> PosteriorDraws {
        PosteriorDraws {
            chains: 1,
            per_chain: n,
            draws: (0..n).map(|_| [coeffs[0], coeffs[1], coeffs[2], 1.0]).collect(),
        }
    }

    fn flat_pairs(cover_vals: &[f32], agb_vals: &[f32]) -> PairedPixels {
        PairedPixels {
            cover: cover_vals.to_vec(),
            agb_t: agb_vals.to_vec(),
            country: vec![0; cover_vals.len()],
            cell_area_ha: 0.25,
        }
    }

    #[test]
    fn scenario_noop_when_all_above() {
        let draws = fake_draws([5.0, 1.0, 0.0], 200);
        let pairs = flat_pairs(&[50.0, 60.0, 70.0], &[10.0, 12.0, 14.0]);
        let r = scenario(&draws, &pairs, 30.0, &ScenarioConfig::default()).unwrap();
        assert_eq!(r.added_carbon_mean_t, 0.0);
        assert_eq!((r.hdi_low_t, r.hdi_high_t), (0.0, 0.0));
        assert_eq!(r.area_below_ha, 0.0);
    }

    #[test]
    fn scenario_single_pixel_rule() {
        // One pixel at cover 10 with deterministic coefficients: the
        // scenario total replaces the pixel's biomass with f(threshold),
        // regardless of its current value.
        let c = [2.0, 0.5, 0.01];
        let draws = fake_draws(c, 100);
        let current = 3.0f32;
        let pairs = flat_pairs(&[10.0], &[current]);
        let t = 30.0;
        let r = scenario(&draws, &pairs, t, &ScenarioConfig::default()).unwrap();
        let f_t = c[0] + c[1] * t + c[2] * t * t;
        let want = CARBON_FRACTION * (f_t - current as f64);
        assert!((r.added_carbon_mean_t - want).abs() < 1e-12);
    }

    #[test]
    fn scenario_mean_within_hdi() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let draws = PosteriorDraws {
            chains: 1,
            per_chain: 500,
            draws: (0..500)
                .map(|_| {
                    [
                        20.0 + rng.gen_range(-1.0..1.0),
                        8.0 + rng.gen_range(-0.5..0.5),
                        -0.05 + rng.gen_range(-0.004..0.004),
                        5.0,
                    ]
                })
                .collect(),
        };
        let cover: Vec<f32> = (0..200).map(|i| (i % 45) as f32).collect();
        let agb: Vec<f32> = (0..200).map(|i| 10.0 + (i % 7) as f32).collect();
        let pairs = flat_pairs(&cover, &agb);
        let r = scenario(&draws, &pairs, 30.0, &ScenarioConfig::default()).unwrap();
        assert!(r.hdi_low_t <= r.added_carbon_mean_t);
        assert!(r.added_carbon_mean_t <= r.hdi_high_t);
    }

    #[test]
    fn scenario_monotone_when_slope_positive() {
        // With increasing f over the range, a higher threshold never adds
        // less carbon.
        let draws = fake_draws([20.0, 8.0, -0.05], 100);
        let cover: Vec<f32> = (0..300).map(|i| (i % 50) as f32).collect();
        let agb: Vec<f32> = (0..300).map(|_| 5.0).collect();
        let pairs = flat_pairs(&cover, &agb);
        let mut last = f64::MIN;
        for t in [15.0, 20.0, 30.0, 40.0] {
            let r = scenario(&draws, &pairs, t, &ScenarioConfig::default()).unwrap();
            assert!(r.added_carbon_mean_t >= last);
            last = r.added_carbon_mean_t;
        }
    }

    #[test]
    fn scenario_rejects_bad_threshold() {
        let draws = fake_draws([1.0, 1.0, 0.0], 100);
        let pairs = flat_pairs(&[10.0], &[1.0]);
        assert!(scenario(&draws, &pairs, 0.0, &ScenarioConfig::default()).is_err());
        assert!(scenario(&draws, &pairs, 100.0, &ScenarioConfig::default()).is_err());
    }

    #[test]
    fn scenario_vectorized_matches_per_pixel_bruteforce() {
        // Oracle: per draw, re-scan every pixel; the implementation
        // precomputes aggregates once. Same combine arithmetic, so results
        // match bit for bit.
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 2500; // 50x50 map
        let cover: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..60.0)).collect();
        let agb: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
        let pairs = flat_pairs(&cover, &agb);
        let draws = PosteriorDraws {
            chains: 1,
            per_chain: 400,
            draws: (0..400)
                .map(|_| {
                    [
                        rng.gen_range(10.0..30.0),
                        rng.gen_range(4.0..12.0),
                        rng.gen_range(-0.08..0.0),
                        5.0,
                    ]
                })
                .collect(),
        };
        let config = ScenarioConfig {
            n_draws: 100,
            seed: 31,
            ..Default::default()
        };
        let t = 30.0;
        let got = scenario(&draws, &pairs, t, &config).unwrap();

        // Brute force with the same deterministic coefficient draws.
        let coeffs = draw_coefficients(&draws, config.n_draws, config.seed);
        let mut added = Vec::with_capacity(coeffs.len());
        for c in &coeffs {
            let mut nb = 0u64;
            let mut sa = 0.0f64;
            let mut sb = 0.0f64;
            for i in 0..n {
                if (cover[i] as f64) < t {
                    nb += 1;
                    sb += agb[i] as f64;
                } else {
                    sa += agb[i] as f64;
                }
            }
            let f = c[0] + c[1] * t + c[2] * t * t;
            let scenario_total = f * nb as f64 + sa;
            let current_total = sb + sa;
            added.push(config.carbon_fraction * (scenario_total - current_total));
        }
        let mean = added.iter().sum::<f64>() / added.len() as f64;
        let (lo, hi) = hdi(&added, 0.95).unwrap();
        assert_eq!(got.added_carbon_mean_t, mean);
        assert_eq!(got.hdi_low_t, lo);
        assert_eq!(got.hdi_high_t, hi);
    }

    #[test]
    fn annual_rate_paper_chain() {
        let r = annual_rate(307e6, 30.0, 6.64e6).unwrap();
        assert!((r.total_per_year_t - 10.233e6).abs() / 10.2e6 < 0.005);
        assert!((r.per_ha_per_year_t - 1.54).abs() < 0.01);
        assert!(annual_rate(0.0, 30.0, 1.0).unwrap().total_per_year_t == 0.0);
        assert!(annual_rate(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn offsets_match_reference_levels() {
        let config = EmissionConfig::default_two_countries();
        let annual = 307.0e6 / 30.0;
        let excl = offset_fraction(annual, &config, false).unwrap();
        assert!((excl.cocoa_emissions_t - 6.1e6).abs() < 1e4);
        assert!((excl.offset_pct - 167.0).abs() < 5.0, "{}", excl.offset_pct);
        let incl = offset_fraction(annual, &config, true).unwrap();
        assert!((incl.offset_pct - 15.0).abs() < 3.0, "{}", incl.offset_pct);
        assert!((excl.national_offset_pct - 9.1).abs() < 0.5);
        assert_eq!(offset_fraction(0.0, &config, false).unwrap().offset_pct, 0.0);
    }

    fn landuse_world() -> (RasterGrid, RasterGrid, RasterGrid) {
        let t = gt(50.0, 10);
        let mut agbd = RasterGrid::filled(10, 10, 1, t, 0.0);
        let mut cocoa = RasterGrid::filled(10, 10, 1, t, 0.0);
        let mut tmf = RasterGrid::filled(10, 10, 1, t, 0.0);
        for i in 0..100 {
            agbd.data[i] = 10.0 + (i % 9) as f32;
            if i % 3 == 0 {
                cocoa.data[i] = 1.0;
            }
            if i % 3 == 1 {
                tmf.data[i] = TMF_DISTURBED;
            }
            if i % 3 == 2 {
                tmf.data[i] = TMF_UNDISTURBED;
            }
        }
        (agbd, cocoa, tmf)
    }

    #[test]
    fn landuse_single_class_arithmetic() {
        let t = gt(50.0, 4);
        let agbd = RasterGrid::filled(4, 4, 1, t, 20.0);
        let cocoa = RasterGrid::filled(4, 4, 1, t, 1.0);
        let tmf = RasterGrid::filled(4, 4, 1, t, 0.0);
        let stats = landuse_stats(&agbd, &cocoa, &tmf, 0.47).unwrap();
        assert_eq!(stats.len(), 1);
        let s = &stats[0];
        assert_eq!(s.class, LanduseClass::Cocoa);
        assert_eq!(s.n_pixels, 16);
        // total = n * 0.25 ha * 0.47 * density
        assert!((s.total_carbon_t - 16.0 * 0.25 * 0.47 * 20.0).abs() < 1e-9);
        assert_eq!(s.density_sd, 0.0);
        assert_eq!(s.ci95_t, 0.0);
    }

    #[test]
    fn landuse_cocoa_wins_over_forest() {
        let t = gt(50.0, 2);
        let agbd = RasterGrid::filled(2, 2, 1, t, 10.0);
        let cocoa = RasterGrid::filled(2, 2, 1, t, 1.0);
        let tmf = RasterGrid::filled(2, 2, 1, t, TMF_UNDISTURBED);
        let stats = landuse_stats(&agbd, &cocoa, &tmf, 0.47).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].class, LanduseClass::Cocoa);
        assert_eq!(stats[0].n_pixels, 4);
    }

    #[test]
    fn landuse_matches_groupby_oracle() {
        let (agbd, cocoa, tmf) = landuse_world();
        let stats = landuse_stats(&agbd, &cocoa, &tmf, 0.47).unwrap();
        // Group-by oracle.
        let mut groups: std::collections::BTreeMap<u8, Vec<f64>> = Default::default();
        for i in 0..100 {
            let class = if cocoa.data[i] >= 0.5 {
                0u8
            } else if tmf.data[i] == TMF_DISTURBED {
                1
            } else if tmf.data[i] == TMF_UNDISTURBED {
                2
            } else {
                continue;
            };
            groups.entry(class).or_default().push(0.47 * agbd.data[i] as f64);
        }
        for (ci, s) in stats.iter().enumerate() {
            let g = &groups[&(ci as u8)];
            assert_eq!(s.n_pixels as usize, g.len());
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            assert!((s.density_mean - mean).abs() < 1e-9);
            let total: f64 = g.iter().map(|d| d * 0.25).sum();
            assert!((s.total_carbon_t - total).abs() < 1e-9);
        }
        // Class totals recompose the union total.
        let union: f64 = groups.values().flatten().map(|d| d * 0.25).sum();
        let sum: f64 = stats.iter().map(|s| s.total_carbon_t).sum();
        assert!(((sum - union) / union).abs() < 1e-9);
    }
}
