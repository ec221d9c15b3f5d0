//! Agro-climatic zoning.
//!
//! Monthly climatology turns into the 13 bioclimatic variables retained
//! after multicollinearity screening, cocoa occurrences cluster into climate
//! types via random-forest dissimilarity and Ward agglomeration, and a
//! repeated forest classifier extrapolates the types into a zone map with
//! mixed/limitations labels for ambiguous or marginal cells.

mod vif;
mod ward;
mod zones;

pub use vif::vif_select;
pub use ward::{cut_tree, ward_linkage, Merge};
pub use zones::{classify_zones, cluster_types, standardize, ClusterConfig, ZoneConfig, ZoneMap};

use crate::{Error, Result};

pub const DAYS_IN_MONTH: [f64; 12] = [
    31.0, 28.0, 31.0, 30.0, 31.0, 30.0, 31.0, 31.0, 30.0, 31.0, 30.0, 31.0,
];

/// Uniform month length used for monthly PET inside the bioclim derivation:
/// calendar-length differences would otherwise leak into the PET
/// seasonality metrics (identical months must yield zero seasonality).
pub const MEAN_MONTH_DAYS: f64 = 365.25 / 12.0;

/// Number of retained bioclimatic variables.
pub const N_BIOCLIM: usize = 13;

/// Names of the retained variables, in output order.
pub const BIOCLIM_NAMES: [&str; N_BIOCLIM] = [
    "bio03_isothermality",
    "bio04_temp_seasonality",
    "bio08_tmean_wettest_quarter",
    "bio11_tmean_coldest_quarter",
    "bio14_precip_driest_month",
    "bio15_precip_seasonality",
    "bio18_precip_warmest_quarter",
    "bio19_precip_coldest_quarter",
    "bio20_consec_dry_months",
    "bio21_consec_arid_months",
    "bio23_tmean_wettest_semester",
    "bio26_pet_seasonality",
    "bio29_pet_range",
];

/// Twelve months of one cell's climatology.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthlyClimatology {
    pub tmin: [f64; 12],
    pub tmax: [f64; 12],
    pub tmean: [f64; 12],
    pub precip: [f64; 12],
    /// Extraterrestrial radiation, MJ/m^2/day.
    pub ra: [f64; 12],
}

impl MonthlyClimatology {
    pub fn validate(&self) -> Result<()> {
        for m in 0..12 {
            if self.tmax[m] < self.tmin[m] {
                return Err(Error::Argument(format!(
                    "month {m}: tmax {} below tmin {}",
                    self.tmax[m], self.tmin[m]
                )));
            }
            if self.precip[m] < 0.0 {
                return Err(Error::Argument(format!(
                    "month {m}: negative precipitation {}",
                    self.precip[m]
                )));
            }
        }
        Ok(())
    }
}

/// Monthly potential evapotranspiration (mm) by the modified Hargreaves
/// method; radiation converts to mm-equivalent evaporation at 0.408 mm per
/// MJ/m^2.
pub fn pet_hargreaves(
    tmin: f64,
    tmax: f64,
    tmean: f64,
    ra_mj: f64,
    days_in_month: f64,
) -> Result<f64> {
    if tmax < tmin {
        return Err(Error::Argument(format!("tmax {tmax} below tmin {tmin}")));
    }
    let ra_mm = ra_mj * 0.408;
    Ok(0.0023 * ra_mm * (tmean + 17.8) * (tmax - tmin).sqrt() * days_in_month)
}

fn population_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Longest run of consecutive months satisfying a predicate, wrapping
/// December into January (the regional dry season straddles the year end).
pub fn circular_run_length(flags: &[bool; 12]) -> usize {
    if flags.iter().all(|&f| f) {
        return 12;
    }
    let mut best = 0usize;
    let mut run = 0usize;
    for i in 0..24 {
        if flags[i % 12] {
            run += 1;
            best = best.max(run.min(12));
        } else {
            run = 0;
        }
    }
    best
}

/// Circular k-month window sums/means starting at each month.
fn window_sums(values: &[f64; 12], k: usize) -> [f64; 12] {
    let mut out = [0.0f64; 12];
    for (start, slot) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..k {
            s += values[(start + j) % 12];
        }
        *slot = s;
    }
    out
}

fn argmax(values: &[f64; 12]) -> usize {
    let mut best = 0;
    for i in 1..12 {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn argmin(values: &[f64; 12]) -> usize {
    let mut best = 0;
    for i in 1..12 {
        if values[i] < values[best] {
            best = i;
        }
    }
    best
}

/// Compute the 13 retained bioclimatic variables in [`BIOCLIM_NAMES`] order.
pub fn bioclim(clim: &MonthlyClimatology) -> Result<[f64; N_BIOCLIM]> {
    clim.validate()?;
    let mut pet = [0.0f64; 12];
    for m in 0..12 {
        pet[m] = pet_hargreaves(
            clim.tmin[m],
            clim.tmax[m],
            clim.tmean[m],
            clim.ra[m],
            MEAN_MONTH_DAYS,
        )?;
    }

    // Quarter (3-month) and semester (6-month) circular windows.
    let precip_q = window_sums(&clim.precip, 3);
    let tmean_q = window_sums(&clim.tmean, 3);
    let precip_s = window_sums(&clim.precip, 6);
    let tmean_s = window_sums(&clim.tmean, 6);

    let diurnal: Vec<f64> = (0..12).map(|m| clim.tmax[m] - clim.tmin[m]).collect();
    let bio2 = diurnal.iter().sum::<f64>() / 12.0;
    let bio7 = clim.tmax.iter().cloned().fold(f64::MIN, f64::max)
        - clim.tmin.iter().cloned().fold(f64::MAX, f64::min);
    let bio3 = if bio7 > 0.0 { 100.0 * bio2 / bio7 } else { 0.0 };
    let bio4 = 100.0 * population_sd(&clim.tmean);

    let wettest_q = argmax(&precip_q);
    let bio8 = tmean_q[wettest_q] / 3.0;
    let coldest_q = argmin(&tmean_q);
    let bio11 = tmean_q[coldest_q] / 3.0;
    let bio14 = clim.precip.iter().cloned().fold(f64::MAX, f64::min);
    let pmean = clim.precip.iter().sum::<f64>() / 12.0;
    let bio15 = if pmean > 0.0 {
        100.0 * population_sd(&clim.precip) / pmean
    } else {
        0.0
    };
    let warmest_q = argmax(&tmean_q);
    let bio18 = precip_q[warmest_q];
    let bio19 = precip_q[coldest_q];

    let dry: [bool; 12] = std::array::from_fn(|m| clim.precip[m] < 100.0);
    let bio20 = circular_run_length(&dry) as f64;
    let arid: [bool; 12] = std::array::from_fn(|m| clim.precip[m] < pet[m]);
    let bio21 = circular_run_length(&arid) as f64;

    let wettest_s = argmax(&precip_s);
    let bio23 = tmean_s[wettest_s] / 6.0;
    let bio26 = population_sd(&pet);
    let bio29 = pet.iter().cloned().fold(f64::MIN, f64::max)
        - pet.iter().cloned().fold(f64::MAX, f64::min);

    Ok([
        bio3, bio4, bio8, bio11, bio14, bio15, bio18, bio19, bio20, bio21, bio23, bio26, bio29,
    ])
}
