//! Browser bindings. Every entry point takes plain numbers and returns a JSON
//! string, so the page needs no bundler.

use ehmac::metrics::{analyze, envelope, sweep_rho, TRADEOFF_BIN};
use ehmac::model::{BacklogMode, EnergyConfig, Protocol, SirThreshold, SystemConfig};
use ehmac::sim::{run_simulation, SimOptions};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Reference scenario at a coarser energy grid: ten units per transmission
/// instead of fifty, same capacity of ten transmissions.
fn demo_config(protocol: &str, mu_h: f64, gamma_db: f64, alpha: f64, rho: f64) -> Result<SystemConfig, JsValue> {
    let protocol: Protocol = protocol.parse().map_err(|e: String| JsValue::from_str(&e))?;
    let mut c = SystemConfig::reference(protocol, mu_h, rho);
    c.alpha = alpha;
    c.gamma_th = if gamma_db.is_finite() {
        SirThreshold::from_db(gamma_db)
    } else {
        SirThreshold::disabled()
    };
    c.energy = EnergyConfig { unit: 0.1, levels: 100, tx_cost_units: 10 };
    c.tolerances.capture_samples = 20_000;
    c.tolerances.particles = 20_000;
    Ok(c)
}

fn err<E: std::fmt::Display>(e: E) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(err)
}

#[derive(Serialize)]
struct Curve {
    protocol: &'static str,
    points: Vec<ehmac::TradeoffPoint>,
    envelope: Vec<ehmac::TradeoffPoint>,
}

/// `(p_d, p_t)` over `steps` values of `ρ` in `[rho_min, rho_max]` for all
/// three protocols, with each envelope. A non-finite threshold disables
/// capture.
#[wasm_bindgen]
pub fn tradeoff_curves(
    mu_h: f64,
    gamma_db: f64,
    alpha: f64,
    rho_min: f64,
    rho_max: f64,
    steps: u32,
) -> Result<String, JsValue> {
    let steps = steps.max(2);
    let grid: Vec<f64> = (0..steps)
        .map(|i| rho_min + (rho_max - rho_min) * f64::from(i) / f64::from(steps - 1))
        .collect();
    let mut curves = Vec::new();
    for p in Protocol::ALL {
        let cfg = demo_config(p.as_str(), mu_h, gamma_db, alpha, grid[0])?
            .validate()
            .map_err(err)?;
        let points = sweep_rho(&cfg, &grid).map_err(err)?;
        curves.push(Curve {
            protocol: p.as_str(),
            envelope: envelope(&points, TRADEOFF_BIN),
            points,
        });
    }
    json(&curves)
}

#[derive(Serialize)]
struct EnergyView {
    pmf: Vec<f64>,
    ccdf: Vec<f64>,
    tx_cost: u32,
    p_d: f64,
    p_t: f64,
}

/// Steady-state energy at the start of a round, with the resulting metrics.
#[wasm_bindgen]
pub fn energy_distribution(
    protocol: &str,
    mu_h: f64,
    gamma_db: f64,
    alpha: f64,
    rho: f64,
) -> Result<String, JsValue> {
    let cfg = demo_config(protocol, mu_h, gamma_db, alpha, rho)?
        .validate()
        .map_err(err)?;
    let a = analyze(&cfg).map_err(err)?;
    json(&EnergyView {
        pmf: a.energy.pmf.clone(),
        ccdf: a.energy.ccdf.clone(),
        tx_cost: a.energy.tx_cost,
        p_d: a.report.p_d,
        p_t: a.report.p_t,
    })
}

#[derive(Serialize)]
struct SimView {
    p_d: f64,
    p_t: f64,
    se_p_d: f64,
    se_p_t: f64,
    analysis_p_d: f64,
    analysis_p_t: f64,
    frames_per_round: f64,
    energy_pmf: Vec<f64>,
}

/// Short simulation next to the analysis of the same point.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn quick_simulation(
    protocol: &str,
    mu_h: f64,
    gamma_db: f64,
    alpha: f64,
    rho: f64,
    estimated: bool,
    rounds: u32,
    seed: u32,
) -> Result<String, JsValue> {
    let mut c = demo_config(protocol, mu_h, gamma_db, alpha, rho)?;
    if estimated {
        c.backlog_mode = BacklogMode::Estimated;
    }
    let cfg = c.validate().map_err(err)?;
    let a = analyze(&cfg).map_err(err)?;
    let rounds = rounds.max(10) as usize;
    let opts = SimOptions {
        rounds: rounds + rounds / 5,
        warmup: rounds / 5,
        seed: u64::from(seed),
        ..Default::default()
    };
    let r = run_simulation(&cfg, &opts).map_err(err)?;
    json(&SimView {
        p_d: r.p_d,
        p_t: r.p_t,
        se_p_d: r.se_p_d,
        se_p_t: r.se_p_t,
        analysis_p_d: a.report.p_d,
        analysis_p_t: a.report.p_t,
        frames_per_round: r.frames_per_round,
        energy_pmf: r.energy_pmf,
    })
}
