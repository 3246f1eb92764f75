//! Scenario configuration and shared domain types.
//!
//! A [`SystemConfig`] is the raw, serializable description of a scenario.
//! [`SystemConfig::validate`] checks every parameter and resolves the
//! harvest distribution, producing a [`CheckedConfig`] that the analysis and
//! simulation engines accept.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, Gamma, Geometric, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid parameter `{name}`: {reason}")]
    Invalid { name: &'static str, reason: String },
}

fn invalid(name: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        name,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tdma,
    Fa,
    Dfa,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Tdma, Protocol::Fa, Protocol::Dfa];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tdma => "TDMA",
            Protocol::Fa => "FA",
            Protocol::Dfa => "DFA",
        }
    }

    /// Number of frames a sensor may use within one inventory round.
    pub fn frames(self, capacity: u32) -> u32 {
        match self {
            Protocol::Tdma | Protocol::Fa => 1,
            Protocol::Dfa => capacity,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tdma" => Ok(Protocol::Tdma),
            "fa" => Ok(Protocol::Fa),
            "dfa" => Ok(Protocol::Dfa),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

/// How the fusion center sizes frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BacklogMode {
    /// The true backlog size is available before each frame.
    #[default]
    Known,
    /// The backlog is estimated from slot outcomes.
    Estimated,
}

impl BacklogMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BacklogMode::Known => "known",
            BacklogMode::Estimated => "estimated",
        }
    }
}

/// Quantized energy storage.
///
/// Levels are counted in energy units `δ`; the storage holds `{0, δ, …, Nδ}`
/// and one transmission costs `tx_cost_units` units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    /// Energy unit `δ`, in the same (arbitrary) unit as the transmission cost.
    pub unit: f64,
    /// Highest storage level `N`.
    pub levels: u32,
    /// Transmission cost in units of `δ`.
    pub tx_cost_units: u32,
}

impl EnergyConfig {
    /// Number of transmissions a full storage can afford.
    pub fn capacity(&self) -> u32 {
        self.levels / self.tx_cost_units.max(1)
    }

    /// Transmission cost in absolute energy.
    pub fn tx_cost(&self) -> f64 {
        self.unit * f64::from(self.tx_cost_units)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.unit.is_finite() && self.unit > 0.0) {
            return Err(invalid("energy.unit", format!("must be > 0, got {}", self.unit)));
        }
        if self.tx_cost_units == 0 {
            return Err(invalid("energy.tx_cost_units", "must be >= 1"));
        }
        if self.levels == 0 || !self.levels.is_multiple_of(self.tx_cost_units) {
            return Err(invalid(
                "energy.levels",
                format!(
                    "N = {} must be a positive multiple of tx_cost_units = {}",
                    self.levels, self.tx_cost_units
                ),
            ));
        }
        Ok(())
    }
}

/// Serializable description of the per-round harvest distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HarvestSpec {
    /// Geometric harvest with mean `rate · ε` (i.e. `rate` transmissions per round).
    Geometric { rate: f64 },
    /// Explicit pmf over harvested units `0, 1, 2, …`.
    Pmf { q: Vec<f64> },
}

impl HarvestSpec {
    pub fn rate(&self) -> Option<f64> {
        match self {
            HarvestSpec::Geometric { rate } => Some(*rate),
            HarvestSpec::Pmf { .. } => None,
        }
    }
}

/// Resolved harvest distribution over energy units.
#[derive(Debug, Clone, PartialEq)]
pub enum HarvestModel {
    /// `q_i = ξ(1-ξ)^i`.
    Geometric { xi: f64 },
    /// Explicit pmf; mass beyond the vector is zero.
    Pmf { q: Vec<f64>, cdf: Vec<f64> },
}

impl HarvestModel {
    /// Geometric harvest with mean `rate · ε` where `ε = tx_cost_units · δ`.
    pub fn geometric(rate: f64, energy: &EnergyConfig) -> Result<Self, ConfigError> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(invalid("harvest.rate", format!("must be > 0, got {rate}")));
        }
        let xi = energy.unit / (energy.unit + rate * energy.tx_cost());
        Ok(HarvestModel::Geometric { xi })
    }

    pub fn from_pmf(q: Vec<f64>) -> Result<Self, ConfigError> {
        if q.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("harvest.q", "entries must be finite and non-negative"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("harvest.q", format!("must sum to 1, sums to {total}")));
        }
        let mut q = q;
        while q.len() > 2 && q.last() == Some(&0.0) {
            q.pop();
        }
        let mut cdf = Vec::with_capacity(q.len());
        let mut acc = 0.0;
        for p in &q {
            acc += p;
            cdf.push(acc);
        }
        Ok(HarvestModel::Pmf { q, cdf })
    }

    /// `Pr[E_H = i]`.
    pub fn prob(&self, i: u32) -> f64 {
        match self {
            HarvestModel::Geometric { xi } => xi * (1.0 - xi).powi(i as i32),
            HarvestModel::Pmf { q, .. } => q.get(i as usize).copied().unwrap_or(0.0),
        }
    }

    /// `Pr[E_H >= m]`, computed without cancellation where possible.
    pub fn tail(&self, m: u32) -> f64 {
        match self {
            HarvestModel::Geometric { xi } => (1.0 - xi).powi(m as i32),
            HarvestModel::Pmf { q, .. } => {
                q.iter().skip(m as usize).sum::<f64>()
            }
        }
    }

    /// Mean harvest in energy units.
    pub fn mean(&self) -> f64 {
        match self {
            HarvestModel::Geometric { xi } => (1.0 - xi) / xi,
            HarvestModel::Pmf { q, .. } => q.iter().enumerate().map(|(i, p)| i as f64 * p).sum(),
        }
    }

    /// The pmf cut where the residual tail mass drops below `tail_mass`.
    /// The returned tail value is the exact mass of everything beyond the cut.
    pub fn truncated_pmf(&self, tail_mass: f64) -> (Vec<f64>, f64) {
        match self {
            HarvestModel::Geometric { .. } => {
                let mut q = Vec::new();
                let mut i = 0u32;
                loop {
                    q.push(self.prob(i));
                    i += 1;
                    let rest = self.tail(i);
                    if rest < tail_mass || i > 1_000_000 {
                        return (q, rest);
                    }
                }
            }
            HarvestModel::Pmf { q, .. } => (q.clone(), 0.0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            HarvestModel::Geometric { xi } => {
                if *xi >= 1.0 {
                    return 0;
                }
                let draw = Geometric::new(*xi).expect("xi in (0, 1]").sample(rng);
                draw.min(u64::from(u32::MAX)) as u32
            }
            HarvestModel::Pmf { cdf, .. } => {
                let u: f64 = rng.random();
                let idx = cdf.partition_point(|c| *c <= u);
                idx.min(cdf.len() - 1) as u32
            }
        }
    }
}

pub type SampleFn = dyn Fn(&mut dyn RngCore) -> f64 + Send + Sync;

/// Draws one unit-mean channel gain.
#[derive(Clone)]
pub struct GainSampler(pub Arc<SampleFn>);

impl fmt::Debug for GainSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GainSampler(..)")
    }
}

impl PartialEq for GainSampler {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Channel power gain distribution, normalized to unit mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FadingModel {
    /// Rayleigh fading: exponential power gain with mean one.
    #[default]
    Exponential,
    /// Nakagami-m fading: Gamma(m, 1/m) power gain.
    Nakagami { m: f64 },
    /// Arbitrary in-process sampler; not serializable.
    #[serde(skip)]
    Custom(GainSampler),
}

impl FadingModel {
    pub fn kind(&self) -> String {
        match self {
            FadingModel::Exponential => "exponential".into(),
            FadingModel::Nakagami { m } => format!("nakagami-{m}"),
            FadingModel::Custom(_) => "custom".into(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            FadingModel::Exponential => {
                let h: f64 = Exp1.sample(rng);
                // Exp1 can return exactly 0.0; gains must be strictly positive.
                h.max(f64::MIN_POSITIVE)
            }
            FadingModel::Nakagami { m } => {
                let h = Gamma::new(*m, 1.0 / *m).expect("validated shape").sample(rng);
                h.max(f64::MIN_POSITIVE)
            }
            FadingModel::Custom(s) => (s.0)(rng),
        }
    }

    fn validate(&self, seed: u64) -> Result<(), ConfigError> {
        match self {
            FadingModel::Exponential => Ok(()),
            FadingModel::Nakagami { m } => {
                if m.is_finite() && *m >= 0.5 {
                    Ok(())
                } else {
                    Err(invalid("fading.m", format!("must be >= 0.5, got {m}")))
                }
            }
            FadingModel::Custom(_) => {
                let mut rng = crate::rng::substream(seed, crate::rng::Stream::FadingCheck);
                let n = 100_000;
                let mut sum = 0.0;
                let mut sq = 0.0;
                for _ in 0..n {
                    let h = self.sample(&mut rng);
                    if !(h.is_finite() && h > 0.0) {
                        return Err(invalid("fading", format!("sampler produced gain {h}")));
                    }
                    sum += h;
                    sq += h * h;
                }
                let mean = sum / n as f64;
                let se = ((sq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
                if (mean - 1.0).abs() > 5.0 * se + 1e-3 {
                    return Err(invalid("fading", format!("sampler mean {mean:.4} is not 1")));
                }
                Ok(())
            }
        }
    }
}

/// SIR decoding threshold. Stored in dB as configured; `None` disables capture
/// (an infinite threshold, so only lone transmitters are decoded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SirThreshold(pub Option<f64>);

impl SirThreshold {
    pub fn from_db(db: f64) -> Self {
        SirThreshold(Some(db))
    }

    pub fn disabled() -> Self {
        SirThreshold(None)
    }

    pub fn db(&self) -> Option<f64> {
        self.0
    }

    /// Linear threshold; `+inf` when capture is disabled.
    pub fn linear(&self) -> f64 {
        match self.0 {
            Some(db) => 10f64.powf(db / 10.0),
            None => f64::INFINITY,
        }
    }

    pub fn is_capture_enabled(&self) -> bool {
        self.0.is_some()
    }
}

impl fmt::Display for SirThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(db) => write!(f, "{db}"),
            None => f.write_str("inf"),
        }
    }
}

/// Begin-of-round energy distribution for round one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialEnergy {
    #[default]
    Empty,
    Full,
    Uniform,
    Pmf { p: Vec<f64> },
}

impl InitialEnergy {
    pub fn pmf(&self, levels: u32) -> Vec<f64> {
        let n = levels as usize + 1;
        match self {
            InitialEnergy::Empty => {
                let mut p = vec![0.0; n];
                p[0] = 1.0;
                p
            }
            InitialEnergy::Full => {
                let mut p = vec![0.0; n];
                p[n - 1] = 1.0;
                p
            }
            InitialEnergy::Uniform => vec![1.0 / n as f64; n],
            InitialEnergy::Pmf { p } => {
                let mut p = p.clone();
                p.resize(n, 0.0);
                p
            }
        }
    }

    pub fn sample<R: Rng>(&self, levels: u32, rng: &mut R) -> u32 {
        match self {
            InitialEnergy::Empty => 0,
            InitialEnergy::Full => levels,
            InitialEnergy::Uniform => Uniform::new_inclusive(0, levels).expect("range").sample(rng),
            InitialEnergy::Pmf { p } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return (i as u32).min(levels);
                    }
                }
                levels.min(p.len().saturating_sub(1) as u32)
            }
        }
    }

    fn validate(&self, levels: u32) -> Result<(), ConfigError> {
        if let InitialEnergy::Pmf { p } = self {
            if p.len() > levels as usize + 1 {
                return Err(invalid("initial_energy.p", "longer than N + 1 levels"));
            }
            if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(invalid("initial_energy.p", "entries must be non-negative"));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-10 {
                return Err(invalid("initial_energy.p", format!("sums to {total}")));
            }
        }
        Ok(())
    }
}

/// Numerical knobs shared by the engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NumericTolerances {
    /// Truncate Poisson sums once the remaining mass is below this.
    pub poisson_tail_mass: f64,
    /// Monte Carlo draws per conditional capture probability.
    pub capture_samples: usize,
    /// Particles representing each frame's gain distribution.
    pub particles: usize,
    /// Flag capture estimates whose standard error exceeds this.
    pub max_standard_error: f64,
    /// Required `‖φP − φ‖∞` of the stationary solution.
    pub stationary_residual: f64,
    /// Iteration budget for iterative stationary solvers.
    pub max_iterations: usize,
    pub rng_seed: u64,
}

impl Default for NumericTolerances {
    fn default() -> Self {
        NumericTolerances {
            poisson_tail_mass: 1e-10,
            capture_samples: 200_000,
            particles: 200_000,
            max_standard_error: 5e-3,
            stationary_residual: 1e-12,
            max_iterations: 200_000,
            rng_seed: 0x5eed_2011,
        }
    }
}

impl NumericTolerances {
    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.poisson_tail_mass > 0.0 && self.poisson_tail_mass < 1.0) {
            return Err(invalid("tolerances.poisson_tail_mass", "must be in (0, 1)"));
        }
        if self.capture_samples == 0 {
            return Err(invalid("tolerances.capture_samples", "must be positive"));
        }
        if self.particles == 0 {
            return Err(invalid("tolerances.particles", "must be positive"));
        }
        if !(self.max_standard_error > 0.0) {
            return Err(invalid("tolerances.max_standard_error", "must be positive"));
        }
        if !(self.stationary_residual > 0.0) {
            return Err(invalid("tolerances.stationary_residual", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("tolerances.max_iterations", "must be positive"));
        }
        Ok(())
    }
}

/// Full scenario description, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Number of sensors `M`.
    pub sensors: usize,
    /// Probability that a sensor has a new measure in a round.
    pub alpha: f64,
    /// SIR threshold in dB; `null` disables capture.
    #[serde(rename = "gamma_th_db")]
    pub gamma_th: SirThreshold,
    /// Frame-sizing factor `ρ` (`L = ⌈ρB⌉`).
    pub rho: f64,
    pub energy: EnergyConfig,
    pub harvest: HarvestSpec,
    #[serde(default)]
    pub fading: FadingModel,
    pub protocol: Protocol,
    #[serde(default)]
    pub backlog_mode: BacklogMode,
    #[serde(default)]
    pub initial_energy: InitialEnergy,
    #[serde(default)]
    pub tolerances: NumericTolerances,
}

impl SystemConfig {
    /// The evaluation scenario used throughout the experiments:
    /// `M = 400`, `α = 0.3`, `γ_th = 3 dB`, `ε = 1`, `δ = 1/50`, `F_ε = 10`.
    pub fn reference(protocol: Protocol, rate: f64, rho: f64) -> Self {
        SystemConfig {
            sensors: 400,
            alpha: 0.3,
            gamma_th: SirThreshold::from_db(3.0),
            rho,
            energy: EnergyConfig {
                unit: 1.0 / 50.0,
                levels: 500,
                tx_cost_units: 50,
            },
            harvest: HarvestSpec::Geometric { rate },
            fading: FadingModel::Exponential,
            protocol,
            backlog_mode: BacklogMode::Known,
            initial_energy: InitialEnergy::Empty,
            tolerances: NumericTolerances::default(),
        }
    }

    pub fn validate(self) -> Result<CheckedConfig, ConfigError> {
        if self.sensors == 0 {
            return Err(invalid("sensors", "M must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(db) = self.gamma_th.db() {
            if !(db.is_finite() && db > 0.0) {
                return Err(invalid(
                    "gamma_th_db",
                    format!("threshold must exceed 0 dB (linear > 1), got {db} dB"),
                ));
            }
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(invalid("rho", format!("must be > 0, got {}", self.rho)));
        }
        self.energy.validate()?;
        self.tolerances.validate()?;
        self.fading.validate(self.tolerances.rng_seed)?;
        self.initial_energy.validate(self.energy.levels)?;

        let harvest = match &self.harvest {
            HarvestSpec::Geometric { rate } => HarvestModel::geometric(*rate, &self.energy)?,
            HarvestSpec::Pmf { q } => HarvestModel::from_pmf(q.clone())?,
        };
        if !(harvest.prob(0) > 0.0) {
            return Err(invalid("harvest", "q_0 must be > 0"));
        }
        if !(harvest.prob(1) > 0.0) {
            return Err(invalid("harvest", "q_1 must be > 0"));
        }
        Ok(CheckedConfig {
            config: self,
            harvest,
        })
    }
}

/// A validated scenario together with its resolved harvest distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedConfig {
    config: SystemConfig,
    harvest: HarvestModel,
}

impl CheckedConfig {
    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn into_inner(self) -> SystemConfig {
        self.config
    }

    pub fn harvest(&self) -> &HarvestModel {
        &self.harvest
    }

    pub fn gamma_linear(&self) -> f64 {
        self.config.gamma_th.linear()
    }

    /// `F_ε`.
    pub fn capacity(&self) -> u32 {
        self.config.energy.capacity()
    }

    /// Frames per round for the configured protocol.
    pub fn frames(&self) -> u32 {
        self.config.protocol.frames(self.capacity())
    }

    /// The same scenario with a different protocol.
    pub fn with_protocol(&self, protocol: Protocol) -> CheckedConfig {
        let mut c = self.clone();
        c.config.protocol = protocol;
        c
    }
}

impl std::ops::Deref for CheckedConfig {
    type Target = SystemConfig;

    fn deref(&self) -> &SystemConfig {
        &self.config
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SystemConfig {
        SystemConfig {
            sensors: 1,
            alpha: 1.0,
            gamma_th: SirThreshold::from_db(3.0),
            rho: 1.0,
            energy: EnergyConfig {
                unit: 1.0,
                levels: 1,
                tx_cost_units: 1,
            },
            harvest: HarvestSpec::Pmf { q: vec![0.5, 0.5] },
            fading: FadingModel::Exponential,
            protocol: Protocol::Tdma,
            backlog_mode: BacklogMode::Known,
            initial_energy: InitialEnergy::Empty,
            tolerances: NumericTolerances::default(),
        }
    }

    #[test]
    fn reference_capacity() {
        let c = SystemConfig::reference(Protocol::Dfa, 0.15, 1.0).validate().unwrap();
        assert_eq!(c.capacity(), 10);
        assert_eq!(c.frames(), 10);
        assert_eq!(c.with_protocol(Protocol::Fa).frames(), 1);
    }

    #[test]
    fn rejects_non_multiple_levels() {
        let mut c = tiny();
        c.energy = EnergyConfig {
            unit: 0.1,
            levels: 10,
            tx_cost_units: 3,
        };
        let err = c.validate().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { name: "energy.levels", .. }));
    }

    #[test]
    fn rejects_low_threshold() {
        let mut c = tiny();
        c.gamma_th = SirThreshold::from_db(0.0);
        let err = c.validate().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { name: "gamma_th_db", .. }));
    }

    #[test]
    fn rejects_missing_unit_harvest() {
        let mut c = tiny();
        c.harvest = HarvestSpec::Pmf { q: vec![0.5, 0.0, 0.5] };
        assert!(c.validate().unwrap_err().to_string().contains("q_1"));
        let mut c = tiny();
        c.harvest = HarvestSpec::Pmf { q: vec![0.0, 1.0] };
        assert!(c.validate().unwrap_err().to_string().contains("q_0"));
    }

    #[test]
    fn rejects_bad_scalars() {
        let mut c = tiny();
        c.rho = 0.0;
        assert!(c.clone().validate().is_err());
        c.rho = 1.0;
        c.sensors = 0;
        assert!(c.clone().validate().is_err());
        c.sensors = 1;
        c.alpha = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn geometric_first_mass() {
        let energy = EnergyConfig {
            unit: 1.0 / 50.0,
            levels: 500,
            tx_cost_units: 50,
        };
        let h = HarvestModel::geometric(0.15, &energy).unwrap();
        // ξ = δ / (δ + μ_H ε) with δ = 0.02, ε = 1.
        let xi = 0.02 / 0.17;
        assert!((h.prob(0) - xi).abs() < 1e-15);
        assert!((h.prob(0) - 0.117_647).abs() < 1e-6);
        let (q, tail) = h.truncated_pmf(1e-15);
        let total: f64 = q.iter().sum::<f64>() + tail;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_mean_matches_rate() {
        let energy = EnergyConfig {
            unit: 1.0 / 50.0,
            levels: 500,
            tx_cost_units: 50,
        };
        for rate in [0.05, 0.15, 0.35] {
            let h = HarvestModel::geometric(rate, &energy).unwrap();
            let (q, _) = h.truncated_pmf(1e-16);
            let mean: f64 = q.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
            let expected = rate * energy.tx_cost() / energy.unit;
            assert!((mean - expected).abs() < 1e-9, "{mean} vs {expected}");
            assert!((h.mean() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn tail_complements_prefix() {
        let h = HarvestModel::from_pmf(vec![0.2, 0.3, 0.1, 0.4]).unwrap();
        for m in 0..6 {
            let prefix: f64 = (0..m).map(|i| h.prob(i)).sum();
            assert!((prefix + h.tail(m) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_conversion() {
        let g = SirThreshold::from_db(3.0);
        assert!((g.linear() - 1.995_262_314_968_88).abs() < 1e-12);
        assert!(SirThreshold::disabled().linear().is_infinite());
    }

    #[test]
    fn json_round_trip() {
        let c = SystemConfig::reference(Protocol::Dfa, 0.35, 0.75);
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: SystemConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let mut c = tiny();
        c.gamma_th = SirThreshold::disabled();
        c.initial_energy = InitialEnergy::Pmf { p: vec![0.25, 0.75] };
        let back: SystemConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let text = r#"{
            "sensors": 400, "alpha": 0.3, "gamma_th_db": 3.0, "rho": 1.0,
            "energy": {"unit": 0.02, "levels": 500, "tx_cost_units": 50},
            "harvest": {"kind": "geometric", "rate": 0.15},
            "protocol": "dfa"
        }"#;
        let c: SystemConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.fading, FadingModel::Exponential);
        assert_eq!(c.backlog_mode, BacklogMode::Known);
        assert_eq!(c.tolerances, NumericTolerances::default());
        c.validate().unwrap();
    }

    #[test]
    fn custom_sampler_checked_for_unit_mean() {
        let mut c = tiny();
        c.fading = FadingModel::Custom(GainSampler(Arc::new(|_| 2.0)));
        assert!(c.clone().validate().is_err());
        c.fading = FadingModel::Custom(GainSampler(Arc::new(|r| {
            let u: f64 = Rng::random(r);
            2.0 * u.max(1e-300)
        })));
        c.validate().unwrap();
    }
}
