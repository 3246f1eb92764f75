//! Delivery probability and time efficiency under the known-backlog,
//! Poisson-occupancy approximation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{build_capture_table, CaptureError, CaptureTable};
use crate::markov::{
    build_transition_matrix, steady_state_energy, transient_evolution, DistributionSource,
    EnergyDistribution, MarkovError, TransitionMatrix,
};
use crate::model::{CheckedConfig, ConfigError, InitialEnergy, Protocol};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("every frame has an empty expected backlog")]
    EmptyBacklog,
}

pub fn delivery_tdma(g: &EnergyDistribution) -> f64 {
    g.afford(1)
}

pub fn delivery_fa(g: &EnergyDistribution, table: &CaptureTable) -> f64 {
    g.afford(1) * table.p_marg[0]
}

/// Delivery probability of the dynamic protocol with the per-frame addends
/// `G(kε) p_c,k Π_{i<k}(1 − p_c,i)`.
pub fn delivery_dfa(g: &EnergyDistribution, table: &CaptureTable) -> (f64, Vec<f64>) {
    let mut survive = 1.0;
    let mut terms = Vec::with_capacity(table.frames());
    for (k, pc) in table.p_marg.iter().enumerate() {
        terms.push(g.afford(k as u32 + 1) * pc * survive);
        survive *= 1.0 - pc;
    }
    (terms.iter().sum(), terms)
}

pub fn time_eff_tdma(alpha: f64, g: &EnergyDistribution) -> f64 {
    alpha * g.afford(1)
}

/// Independent of the energy distribution.
pub fn time_eff_fa(table: &CaptureTable) -> f64 {
    table.p_slot[0]
}

/// Mean backlog per frame, `E[B_k] = Mα G(kε) Π_{i<k}(1 − p_c,i)`.
pub fn expected_backlogs(
    table: &CaptureTable,
    g: &EnergyDistribution,
    sensors: usize,
    alpha: f64,
) -> Vec<f64> {
    let mut survive = 1.0;
    let mut out = Vec::with_capacity(table.frames());
    for (k, pc) in table.p_marg.iter().enumerate() {
        out.push(sensors as f64 * alpha * g.afford(k as u32 + 1) * survive);
        survive *= 1.0 - pc;
    }
    out
}

/// Backlog-weighted mean of the per-frame time efficiencies.
pub fn time_eff_dfa(
    table: &CaptureTable,
    g: &EnergyDistribution,
    sensors: usize,
    alpha: f64,
) -> Result<(f64, Vec<f64>), AnalysisError> {
    let backlogs = expected_backlogs(table, g, sensors, alpha);
    let total: f64 = backlogs.iter().sum();
    if !(total > 0.0) {
        return Err(AnalysisError::EmptyBacklog);
    }
    let weighted: f64 = table.p_slot.iter().zip(&backlogs).map(|(p, b)| p * b).sum();
    Ok((weighted / total, backlogs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBreakdown {
    pub frame: u32,
    pub p_capture: f64,
    pub p_slot: f64,
    pub backlog: f64,
    pub delivery_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub p_d: f64,
    pub p_t: f64,
    pub frames: Vec<FrameBreakdown>,
    pub source: DistributionSource,
}

/// Evaluate both metrics for `protocol` from a capture table and energy ccdf.
pub fn evaluate(
    protocol: Protocol,
    table: &CaptureTable,
    g: &EnergyDistribution,
    sensors: usize,
    alpha: f64,
) -> Result<MetricsReport, AnalysisError> {
    let backlogs = expected_backlogs(table, g, sensors, alpha);
    let (p_d, p_t, terms) = match protocol {
        Protocol::Tdma => {
            let p_d = delivery_tdma(g);
            (p_d, time_eff_tdma(alpha, g), vec![p_d])
        }
        Protocol::Fa => {
            let p_d = delivery_fa(g, table);
            (p_d, time_eff_fa(table), vec![p_d])
        }
        Protocol::Dfa => {
            let (p_d, terms) = delivery_dfa(g, table);
            // A round with nothing to send leaves p_t undefined; fall back to
            // the first frame's slot efficiency, the limit as α → 0.
            let p_t = match time_eff_dfa(table, g, sensors, alpha) {
                Ok((p_t, _)) => p_t,
                Err(AnalysisError::EmptyBacklog) => table.p_slot[0],
                Err(e) => return Err(e),
            };
            (p_d, p_t, terms)
        }
    };
    let frames = terms
        .iter()
        .enumerate()
        .map(|(k, term)| FrameBreakdown {
            frame: k as u32 + 1,
            p_capture: table.p_marg[k],
            p_slot: table.p_slot[k],
            backlog: backlogs[k],
            delivery_term: *term,
        })
        .collect();
    Ok(MetricsReport {
        protocol,
        p_d,
        p_t,
        frames,
        source: g.source,
    })
}

/// Every intermediate of one analytical evaluation.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub table: CaptureTable,
    pub chain: TransitionMatrix,
    pub stationary: Vec<f64>,
    pub energy: EnergyDistribution,
    pub report: MetricsReport,
}

/// Steady-state analysis of the configured protocol.
pub fn analyze(cfg: &CheckedConfig) -> Result<Analysis, AnalysisError> {
    let table = build_capture_table(cfg)?;
    analyze_with_table(cfg, table)
}

/// Steady-state analysis reusing a capture table built for the same
/// protocol, `ρ` and threshold.
pub fn analyze_with_table(cfg: &CheckedConfig, table: CaptureTable) -> Result<Analysis, AnalysisError> {
    let chain = build_transition_matrix(cfg, &table)?;
    let tol = &cfg.tolerances;
    let (stationary, energy) =
        steady_state_energy(&chain, tol.stationary_residual, tol.max_iterations)?;
    let report = evaluate(cfg.protocol, &table, &energy, cfg.sensors, cfg.alpha)?;
    Ok(Analysis {
        table,
        chain,
        stationary,
        energy,
        report,
    })
}

/// Metrics at round `n`, starting from the configured initial energy.
pub fn analyze_round(cfg: &CheckedConfig, table: &CaptureTable, n: usize) -> Result<MetricsReport, AnalysisError> {
    let chain = build_transition_matrix(cfg, table)?;
    let start = initial_distribution(cfg, &cfg.initial_energy);
    let g = transient_evolution(&start, n, &chain)?;
    evaluate(cfg.protocol, table, &g, cfg.sensors, cfg.alpha)
}

pub fn initial_distribution(cfg: &CheckedConfig, init: &InitialEnergy) -> EnergyDistribution {
    EnergyDistribution::new(
        init.pmf(cfg.energy.levels),
        cfg.energy.tx_cost_units,
        DistributionSource::Round(1),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub rho: f64,
    pub p_d: f64,
    pub p_t: f64,
}

/// Default width of the time-efficiency bins used to build the envelope.
pub const TRADEOFF_BIN: f64 = 0.005;

/// `(p_d, p_t)` per grid point.
pub fn sweep_rho(cfg: &CheckedConfig, rho_grid: &[f64]) -> Result<Vec<TradeoffPoint>, AnalysisError> {
    let eval = |rho: &f64| -> Result<TradeoffPoint, AnalysisError> {
        let mut c = cfg.config().clone();
        c.rho = *rho;
        let c = c.validate()?;
        let a = analyze(&c)?;
        Ok(TradeoffPoint {
            rho: *rho,
            p_d: a.report.p_d,
            p_t: a.report.p_t,
        })
    };
    #[cfg(feature = "parallel")]
    let points: Vec<_> = {
        use rayon::prelude::*;
        rho_grid.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let points: Vec<_> = rho_grid.iter().map(eval).collect();
    points.into_iter().collect()
}

/// Upper envelope of achieved points: the best delivery probability for each
/// time-efficiency bin, thinned so that delivery never increases with
/// time efficiency. Sorted by increasing `p_t`.
pub fn envelope(points: &[TradeoffPoint], bin_width: f64) -> Vec<TradeoffPoint> {
    let mut bins: Vec<(i64, TradeoffPoint)> = Vec::new();
    for p in points {
        let key = (p.p_t / bin_width).floor() as i64;
        match bins.iter_mut().find(|(k, _)| *k == key) {
            Some((_, best)) if p.p_d > best.p_d => *best = *p,
            Some(_) => {}
            None => bins.push((key, *p)),
        }
    }
    bins.sort_by_key(|(k, _)| *k);
    let mut out: Vec<TradeoffPoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for (_, p) in bins.into_iter().rev() {
        if p.p_d > best {
            best = p.p_d;
            out.push(p);
        }
    }
    out.reverse();
    out
}

/// Delivery/time-efficiency trade-off obtained by varying `ρ`.
pub fn tradeoff_curve(
    cfg: &CheckedConfig,
    rho_grid: &[f64],
    bin_width: f64,
) -> Result<Vec<TradeoffPoint>, AnalysisError> {
    Ok(envelope(&sweep_rho(cfg, rho_grid)?, bin_width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::DistributionSource;
    use crate::model::{SirThreshold, SystemConfig};

    fn flat_g(levels: u32, eps: u32) -> EnergyDistribution {
        let mut pmf = vec![0.0; levels as usize + 1];
        pmf[levels as usize] = 1.0;
        EnergyDistribution::new(pmf, eps, DistributionSource::SteadyState)
    }

    fn table_with(p_marg: Vec<f64>, p_slot: Vec<f64>) -> CaptureTable {
        let n = p_marg.len();
        CaptureTable {
            rho: 1.0,
            gamma_th_db: Some(3.0),
            fading: "exponential".into(),
            j_max: 0,
            p_cond: vec![vec![1.0]; n],
            se_cond: vec![vec![0.0]; n],
            p_marg,
            p_slot,
            mean_gain: vec![1.0; n],
            warnings: vec![],
        }
    }

    fn cfg(protocol: Protocol, rate: f64, rho: f64) -> CheckedConfig {
        let mut c = SystemConfig::reference(protocol, rate, rho);
        c.tolerances.capture_samples = 20_000;
        c.tolerances.particles = 20_000;
        c.validate().unwrap()
    }

    #[test]
    fn fa_without_capture_is_slotted_aloha() {
        let mut c = SystemConfig::reference(Protocol::Fa, 0.15, 1.0);
        c.gamma_th = SirThreshold::disabled();
        let t = build_capture_table(&c.validate().unwrap()).unwrap();
        let g = flat_g(500, 50);
        assert!((delivery_fa(&g, &t) - (-1f64).exp()).abs() < 1e-15);
        assert!((time_eff_fa(&t) - (-1f64).exp()).abs() < 1e-15);
        let mut c = SystemConfig::reference(Protocol::Fa, 0.15, 2.0);
        c.gamma_th = SirThreshold::disabled();
        let t = build_capture_table(&c.validate().unwrap()).unwrap();
        assert!((time_eff_fa(&t) - 0.5 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((time_eff_fa(&t) - 0.3033).abs() < 1e-4);
    }

    #[test]
    fn fa_with_rayleigh_capture() {
        let t = build_capture_table(&cfg(Protocol::Fa, 0.15, 1.0)).unwrap();
        let g = flat_g(500, 50);
        assert!((delivery_fa(&g, &t) - 0.5137).abs() < 1e-4);
        assert!((time_eff_fa(&t) - 0.5137).abs() < 1e-4);
        let empty = EnergyDistribution::new(
            {
                let mut p = vec![0.0; 501];
                p[0] = 1.0;
                p
            },
            50,
            DistributionSource::SteadyState,
        );
        assert_eq!(delivery_fa(&empty, &t), 0.0);
    }

    #[test]
    fn dfa_degenerate_cases() {
        let g = flat_g(500, 50);
        let one = table_with(vec![0.4], vec![0.3]);
        assert_eq!(delivery_dfa(&g, &one).0, delivery_fa(&g, &one));
        assert_eq!(time_eff_dfa(&one, &g, 400, 0.3).unwrap().0, time_eff_fa(&one));

        let sure = table_with(vec![1.0; 10], vec![0.5; 10]);
        assert_eq!(delivery_dfa(&g, &sure).0, g.afford(1));

        let p = 0.37;
        let flat = table_with(vec![p; 10], vec![0.42; 10]);
        let (pd, terms) = delivery_dfa(&g, &flat);
        assert_eq!(terms.len(), 10);
        assert!((pd - (1.0 - (1.0f64 - p).powi(10))).abs() < 1e-14);
        let (pt, backlogs) = time_eff_dfa(&flat, &g, 400, 0.3).unwrap();
        assert!((pt - 0.42).abs() < 1e-15);
        assert!((backlogs[0] - 400.0 * 0.3).abs() < 1e-12);
        assert!(backlogs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn tdma_products() {
        let g = EnergyDistribution::new(vec![0.5, 0.5], 1, DistributionSource::SteadyState);
        assert!((time_eff_tdma(0.3, &g) - 0.15).abs() < 1e-15);
        assert_eq!(time_eff_tdma(0.0, &g), 0.0);
        assert_eq!(delivery_tdma(&g), 0.5);
    }

    #[test]
    fn empty_backlog_is_an_error() {
        let g = flat_g(500, 50);
        let t = table_with(vec![0.5; 10], vec![0.5; 10]);
        assert_eq!(time_eff_dfa(&t, &g, 400, 0.0), Err(AnalysisError::EmptyBacklog));
    }

    #[test]
    fn reference_analysis_orderings() {
        let rate = 0.35;
        let tdma = analyze(&cfg(Protocol::Tdma, rate, 1.0)).unwrap();
        let fa = analyze(&cfg(Protocol::Fa, rate, 1.0)).unwrap();
        let dfa = analyze(&cfg(Protocol::Dfa, rate, 1.0)).unwrap();
        assert_eq!(tdma.energy.pmf, fa.energy.pmf);
        assert!(tdma.report.p_d >= fa.report.p_d);
        assert!(tdma.report.p_d >= dfa.report.p_d);
        assert!((tdma.report.p_t / tdma.report.p_d - 0.3).abs() < 1e-12);
        assert!(dfa.energy.afford(1) <= fa.energy.afford(1) + 1e-9);
        assert!(dfa.report.frames.windows(2).all(|w| w[1].backlog <= w[0].backlog));
        for r in [&tdma.report, &fa.report, &dfa.report] {
            assert!((0.0..=1.0).contains(&r.p_d) && (0.0..=1.0).contains(&r.p_t));
        }
    }

    #[test]
    fn transient_round_one_uses_initial_energy() {
        let c = cfg(Protocol::Tdma, 0.15, 1.0);
        let t = build_capture_table(&c).unwrap();
        let r = analyze_round(&c, &t, 1).unwrap();
        assert_eq!(r.p_d, 0.0);
        let late = analyze_round(&c, &t, 5_000).unwrap();
        let steady = analyze(&c).unwrap();
        assert!((late.p_d - steady.report.p_d).abs() < 1e-6);
    }

    #[test]
    fn envelope_is_monotone() {
        let pts = [
            TradeoffPoint { rho: 0.5, p_d: 0.2, p_t: 0.50 },
            TradeoffPoint { rho: 1.0, p_d: 0.3, p_t: 0.52 },
            TradeoffPoint { rho: 1.5, p_d: 0.35, p_t: 0.45 },
            TradeoffPoint { rho: 2.0, p_d: 0.34, p_t: 0.40 },
            TradeoffPoint { rho: 2.1, p_d: 0.36, p_t: 0.401 },
        ];
        let env = envelope(&pts, TRADEOFF_BIN);
        assert!(env.windows(2).all(|w| w[0].p_t < w[1].p_t && w[0].p_d >= w[1].p_d));
        assert_eq!(env.len(), 3);
        assert_eq!(env[0].rho, 2.1);
        assert_eq!(envelope(&pts[..1], TRADEOFF_BIN).len(), 1);
    }

    #[test]
    fn tdma_tradeoff_is_one_point() {
        let c = cfg(Protocol::Tdma, 0.15, 1.0);
        let curve = tradeoff_curve(&c, &[0.5, 1.0, 2.0, 3.0], TRADEOFF_BIN).unwrap();
        assert_eq!(curve.len(), 1);
    }
}
