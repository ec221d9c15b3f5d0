//! Consolidated run report: metrics JSON, shade histogram CSV and PNG,
//! the scenario bar chart, and the land-use panel.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use canopy_ledger::carbon::{
    annual_rate, offset_fraction, OffsetReport, BENCHMARK_RATE_T_CO2E_PER_HA_YR,
};
use canopy_ledger::{Error, Result};

use crate::config::Config;
use crate::manifest::digest_file;

type Digests = BTreeMap<String, String>;

#[derive(Debug, Serialize)]
struct ReportMetrics {
    shade_eval: serde_json::Value,
    mcmc_diagnostics: serde_json::Value,
    agbd_compare: serde_json::Value,
    calibration: serde_json::Value,
    zones_summary: serde_json::Value,
    scenarios: serde_json::Value,
    /// Annualized rate for the 30% target: computed value next to the
    /// benchmark reference rate.
    annual_rate_30pct_t_co2e_per_ha_yr: Option<f64>,
    benchmark_rate_t_co2e_per_ha_yr: f64,
    annual_total_30pct_t_co2e: Option<f64>,
    offsets_excl_sluc: Option<OffsetReport>,
    offsets_incl_sluc: Option<OffsetReport>,
    national_offset_pct: Option<f64>,
}

fn read_json(path: &Path) -> serde_json::Value {
    std::fs::read(path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or(serde_json::Value::Null)
}

pub fn offsets_for_annual(
    annual_total_t: f64,
    config: &Config,
) -> Result<(OffsetReport, OffsetReport)> {
    Ok((
        offset_fraction(annual_total_t, &config.emissions, false)?,
        offset_fraction(annual_total_t, &config.emissions, true)?,
    ))
}

pub fn stage_report(config: &Config) -> Result<(Digests, Digests)> {
    let run = &config.run_dir;
    let scen_path = run.join("scenario/scenarios.json");
    if !scen_path.exists() {
        return Err(Error::Dependency {
            artifact: scen_path.display().to_string(),
            stage: "scenario".to_string(),
        });
    }
    let scenarios = read_json(&scen_path);

    let out_dir = run.join("report");
    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = BTreeMap::new();

    // Shade histogram: re-emit the map-stage table with a rendered chart.
    let hist_src = run.join("shade_map/histogram.csv");
    if hist_src.exists() {
        let hist_dst = out_dir.join("shade_hist.csv");
        std::fs::copy(&hist_src, &hist_dst)?;
        outputs.insert("shade_hist.csv".to_string(), digest_file(&hist_dst)?);
        let mut rdr = csv::Reader::from_path(&hist_src)?;
        let mut bars = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let count: f64 = rec.get(2).unwrap_or("0").parse().unwrap_or(0.0);
            bars.push(canopy_ledger::render::Bar {
                value: count,
                label: if i % 20 == 0 { format!("{i}") } else { String::new() },
                annotation: String::new(),
            });
        }
        let png = out_dir.join("shade_hist.png");
        canopy_ledger::render::save_bar_chart_png(&png, &bars, 640, 240)?;
        outputs.insert("shade_hist.png".to_string(), digest_file(&png)?);
    }

    // Scenario bar chart lives in the scenario stage; copy it alongside the
    // consolidated outputs.
    let bar_src = run.join("scenario/scenario.png");
    if bar_src.exists() {
        let dst = out_dir.join("scenario_bar.png");
        std::fs::copy(&bar_src, &dst)?;
        outputs.insert("scenario_bar.png".to_string(), digest_file(&dst)?);
    }

    // Land-use three-column panel.
    let landuse_src = run.join("landuse/landuse.csv");
    if landuse_src.exists() {
        let dst = out_dir.join("landuse_panel.csv");
        std::fs::copy(&landuse_src, &dst)?;
        outputs.insert("landuse_panel.csv".to_string(), digest_file(&dst)?);
    }

    // Headline metrics: the 30% scenario (or the closest configured
    // threshold) drives the annual-rate and offset arithmetic.
    let mut annual_rate_30 = None;
    let mut annual_total_30 = None;
    let mut offsets_excl = None;
    let mut offsets_incl = None;
    let mut national = None;
    if let Some(rows) = scenarios.get("thresholds").and_then(|v| v.as_array()) {
        let pick = rows
            .iter()
            .min_by(|a, b| {
                let ta = a["threshold_pct"].as_f64().unwrap_or(f64::MAX);
                let tb = b["threshold_pct"].as_f64().unwrap_or(f64::MAX);
                (ta - 30.0)
                    .abs()
                    .partial_cmp(&(tb - 30.0).abs())
                    .unwrap()
            })
            .cloned();
        if let Some(row) = pick {
            let co2e = row["co2e_t"].as_f64().unwrap_or(0.0);
            let area = row["area_below_ha"].as_f64().unwrap_or(0.0);
            if area > 0.0 {
                let rate = annual_rate(co2e, config.carbon.scenario.years, area)?;
                annual_rate_30 = Some(rate.per_ha_per_year_t);
                annual_total_30 = Some(rate.total_per_year_t);
                let (excl, incl) = offsets_for_annual(rate.total_per_year_t, config)?;
                national = Some(excl.national_offset_pct);
                offsets_excl = Some(excl);
                offsets_incl = Some(incl);
            }
        }
    }

    let metrics = ReportMetrics {
        shade_eval: read_json(&run.join("shade/eval.json")),
        mcmc_diagnostics: read_json(&run.join("carbon/diagnostics.json")),
        agbd_compare: read_json(&run.join("agbd_map/compare.json")),
        calibration: read_json(&run.join("groundtruth/calibration.json")),
        zones_summary: read_json(&run.join("zones/summary.json")),
        scenarios,
        annual_rate_30pct_t_co2e_per_ha_yr: annual_rate_30,
        benchmark_rate_t_co2e_per_ha_yr: BENCHMARK_RATE_T_CO2E_PER_HA_YR,
        annual_total_30pct_t_co2e: annual_total_30,
        offsets_excl_sluc: offsets_excl,
        offsets_incl_sluc: offsets_incl,
        national_offset_pct: national,
    };
    let metrics_path = out_dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_vec_pretty(&metrics)?)?;
    outputs.insert("metrics.json".to_string(), digest_file(&metrics_path)?);

    let report_path = out_dir.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_vec_pretty(&serde_json::json!({
            "run_dir": run.display().to_string(),
            "artifacts": outputs.keys().collect::<Vec<_>>(),
        }))?,
    )?;
    outputs.insert("report.json".to_string(), digest_file(&report_path)?);

    let inputs = BTreeMap::from([(
        "scenarios.json".to_string(),
        digest_file(&scen_path)?,
    )]);
    Ok((inputs, outputs))
}
