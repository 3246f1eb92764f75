//! Round-by-round simulation of `M` sensors sharing one channel.
//!
//! Unlike the analysis, the simulator keeps finite backlogs with binomial
//! slot occupancy, the true correlation of gains across frames of a round,
//! and, optionally, frame sizes chosen from estimated rather than true
//! backlogs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{frame_length, BacklogEstimator, EstimatorError, FrameObservation};
use crate::markov::{transient_series, EnergyDistribution};
use crate::metrics::{analyze, initial_distribution, Analysis, AnalysisError};
use crate::model::{BacklogMode, CheckedConfig, HarvestModel, Protocol, SystemConfig};
use crate::rng::{substream, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no slots were allocated during the measurement window")]
    NoSlots,
    #[error("need more rounds ({rounds}) than warm-up rounds ({warmup})")]
    TooFewRounds { rounds: usize, warmup: usize },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOutcome {
    Empty,
    Collided,
    /// Index of the decoded transmitter within the slot.
    Success(usize),
}

/// Decode a slot: a transmitter wins when its gain is at least `γ` times the
/// sum of the other gains in the slot.
pub fn resolve_slot(gains: &[f64], gamma: f64) -> SlotOutcome {
    match gains.len() {
        0 => SlotOutcome::Empty,
        1 => SlotOutcome::Success(0),
        _ => {
            let total: f64 = gains.iter().sum();
            let mut winner = None;
            for (i, h) in gains.iter().enumerate() {
                let interference = total - h;
                if gamma.is_finite() && *h >= gamma * interference {
                    debug_assert!(winner.is_none(), "two transmitters above threshold");
                    winner = Some(i);
                }
            }
            winner.map_or(SlotOutcome::Collided, SlotOutcome::Success)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorState {
    pub energy: u32,
    pub has_measure: bool,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SensorOutcome {
    pub had_measure: bool,
    pub energy_start: u32,
    pub energy_end: u32,
    pub attempts: u32,
    pub delivered: bool,
    /// Had a measure but ran out of energy before delivering it.
    pub shortage: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub observation: FrameObservation,
    /// True backlog size.
    pub backlog: u32,
    /// Estimate the frame was sized from, in estimated mode.
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrTrace {
    pub round: usize,
    pub frames: Vec<FrameRecord>,
    pub outcomes: Vec<SensorOutcome>,
    pub slots: u64,
    pub successes: u64,
    pub measures: u32,
    pub delivered: u32,
}

impl IrTrace {
    pub const CSV_HEADER: &'static str = "round,frames,slots,successes,measures,delivered,backlogs,estimates";

    pub fn csv_row(&self) -> String {
        let backlogs: Vec<String> = self.frames.iter().map(|f| f.backlog.to_string()).collect();
        let estimates: Vec<String> = self
            .frames
            .iter()
            .map(|f| f.estimate.map_or(String::new(), |e| format!("{e:.3}")))
            .collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.frames.len(),
            self.slots,
            self.successes,
            self.measures,
            self.delivered,
            backlogs.join(";"),
            estimates.join(";")
        )
    }
}

/// Draw each sensor's measure indicator and channel gain for a new round.
pub fn draw_round<R: Rng>(population: &mut [SensorState], cfg: &CheckedConfig, rng: &mut R) {
    for s in population.iter_mut() {
        s.has_measure = rng.random::<f64>() < cfg.alpha;
        s.gain = cfg.fading.sample(rng);
    }
}

/// Add harvested energy, saturating at the storage capacity.
pub fn harvest_step<R: Rng>(
    population: &mut [SensorState],
    harvest: &HarvestModel,
    levels: u32,
    rng: &mut R,
) {
    for s in population.iter_mut() {
        let draw = harvest.sample(rng);
        s.energy = s.energy.saturating_add(draw).min(levels);
    }
}

/// Slot-level counters checked while resolving a round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SlotAudit {
    pub slots: u64,
    pub multi_winner_slots: u64,
}

fn audit_slot(gains: &[f64], gamma: f64, audit: &mut SlotAudit) {
    audit.slots += 1;
    if gains.len() > 1 && gamma.is_finite() {
        let total: f64 = gains.iter().sum();
        let winners = gains.iter().filter(|h| **h >= gamma * (total - **h)).count();
        if winners > 1 {
            audit.multi_winner_slots += 1;
        }
    }
}

/// Run one inventory round over a population whose per-round draws are done.
pub fn run_ir<R: Rng>(
    population: &mut [SensorState],
    cfg: &CheckedConfig,
    estimator: Option<&BacklogEstimator>,
    round: usize,
    rng: &mut R,
) -> Result<IrTrace, SimError> {
    run_ir_audited(population, cfg, estimator, round, rng, None)
}

pub fn run_ir_audited<R: Rng>(
    population: &mut [SensorState],
    cfg: &CheckedConfig,
    estimator: Option<&BacklogEstimator>,
    round: usize,
    rng: &mut R,
    mut audit: Option<&mut SlotAudit>,
) -> Result<IrTrace, SimError> {
    let eps = cfg.energy.tx_cost_units;
    let gamma = cfg.gamma_linear();
    let mut outcomes: Vec<SensorOutcome> = population
        .iter()
        .map(|s| SensorOutcome {
            had_measure: s.has_measure,
            energy_start: s.energy,
            ..Default::default()
        })
        .collect();
    let mut trace = IrTrace {
        round,
        frames: Vec::new(),
        outcomes: Vec::new(),
        slots: 0,
        successes: 0,
        measures: population.iter().filter(|s| s.has_measure).count() as u32,
        delivered: 0,
    };

    match cfg.protocol {
        Protocol::Tdma => {
            let mut obs = FrameObservation {
                frame: 1,
                ..Default::default()
            };
            for (s, out) in population.iter_mut().zip(outcomes.iter_mut()) {
                if s.has_measure && s.energy >= eps {
                    s.energy -= eps;
                    out.attempts = 1;
                    let result = resolve_slot(&[s.gain], gamma);
                    if let Some(a) = audit.as_deref_mut() {
                        audit_slot(&[s.gain], gamma, a);
                    }
                    debug_assert_eq!(result, SlotOutcome::Success(0));
                    out.delivered = true;
                    obs.successes += 1;
                } else {
                    obs.empties += 1;
                }
            }
            trace.slots = population.len() as u64;
            trace.successes = u64::from(obs.successes);
            trace.frames.push(FrameRecord {
                observation: obs,
                backlog: obs.successes,
                estimate: None,
            });
        }
        Protocol::Fa | Protocol::Dfa => {
            let frames_allowed = cfg.frames();
            let mut backlog: Vec<usize> = (0..population.len())
                .filter(|&i| population[i].has_measure && population[i].energy >= eps)
                .collect();
            let (mut estimate, mut length) = match estimator {
                Some(est) => {
                    let (b, l) = est.first();
                    (Some(b), l)
                }
                None => (None, frame_length(backlog.len() as f64, cfg.rho)),
            };
            let mut picks: Vec<(u32, usize)> = Vec::with_capacity(backlog.len());
            let mut slot_gains: Vec<f64> = Vec::new();
            let mut slot_members: Vec<usize> = Vec::new();
            let mut k = 1u32;
            while length > 0 {
                picks.clear();
                for &i in &backlog {
                    let slot = rng.random_range(0..length);
                    picks.push((slot, i));
                    population[i].energy -= eps;
                    outcomes[i].attempts += 1;
                }
                picks.sort_unstable();
                let mut obs = FrameObservation {
                    frame: k,
                    ..Default::default()
                };
                let mut occupied = 0u32;
                let mut start = 0;
                while start < picks.len() {
                    let slot = picks[start].0;
                    let mut end = start;
                    slot_gains.clear();
                    slot_members.clear();
                    while end < picks.len() && picks[end].0 == slot {
                        slot_members.push(picks[end].1);
                        slot_gains.push(population[picks[end].1].gain);
                        end += 1;
                    }
                    occupied += 1;
                    if let Some(a) = audit.as_deref_mut() {
                        audit_slot(&slot_gains, gamma, a);
                    }
                    match resolve_slot(&slot_gains, gamma) {
                        SlotOutcome::Success(w) => {
                            obs.successes += 1;
                            outcomes[slot_members[w]].delivered = true;
                        }
                        SlotOutcome::Collided => obs.collisions += 1,
                        SlotOutcome::Empty => unreachable!(),
                    }
                    start = end;
                }
                if let Some(a) = audit.as_deref_mut() {
                    a.slots += u64::from(length - occupied);
                }
                obs.empties = length - occupied;
                trace.slots += u64::from(length);
                trace.successes += u64::from(obs.successes);
                trace.frames.push(FrameRecord {
                    observation: obs,
                    backlog: backlog.len() as u32,
                    estimate,
                });

                if k >= frames_allowed {
                    break;
                }
                backlog.retain(|&i| !outcomes[i].delivered && population[i].energy >= eps);
                match estimator {
                    Some(est) => match est.next(&obs)? {
                        Some((b, l)) => {
                            estimate = Some(b);
                            length = l;
                        }
                        None => break,
                    },
                    None => length = frame_length(backlog.len() as f64, cfg.rho),
                }
                k += 1;
            }
        }
    }

    for (s, out) in population.iter().zip(outcomes.iter_mut()) {
        out.energy_end = s.energy;
        debug_assert_eq!(out.energy_end, out.energy_start - eps * out.attempts);
        if out.had_measure && !out.delivered && s.energy < eps {
            out.shortage = true;
        }
    }
    trace.delivered = outcomes.iter().filter(|o| o.delivered).count() as u32;
    trace.outcomes = outcomes;
    Ok(trace)
}

/// Which energy distribution the fusion center assumes when estimating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorPrior {
    #[default]
    SteadyState,
    /// Evolve the configured initial distribution round by round.
    Transient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Total rounds, warm-up included.
    pub rounds: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Batches for the batch-means standard errors.
    pub batches: usize,
    pub prior: EstimatorPrior,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            rounds: 12_000,
            warmup: 2_000,
            seed: 1,
            batches: 20,
            prior: EstimatorPrior::SteadyState,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub protocol: Protocol,
    pub backlog_mode: BacklogMode,
    /// Delivered measures over measures; `NaN` when no sensor had a measure.
    pub p_d: f64,
    /// Successful slots over allocated slots.
    pub p_t: f64,
    pub se_p_d: f64,
    pub se_p_t: f64,
    pub measures: u64,
    pub delivered: u64,
    pub shortages: u64,
    pub slots: u64,
    pub successes: u64,
    /// Mean frames per round.
    pub frames_per_round: f64,
    /// Begin-of-round energy pmf over the measurement window.
    pub energy_pmf: Vec<f64>,
    pub rounds: usize,
    pub warmup: usize,
    pub seed: u64,
    #[serde(skip)]
    pub config: Option<SystemConfig>,
    #[serde(skip)]
    batch_p_d: Vec<f64>,
    #[serde(skip)]
    batch_p_t: Vec<f64>,
}

impl SimReport {
    /// Begin-of-round energy ccdf.
    pub fn energy_ccdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = vec![0.0; self.energy_pmf.len()];
        for i in (0..self.energy_pmf.len()).rev() {
            acc += self.energy_pmf[i];
            out[i] = acc;
        }
        out
    }
}

fn batch_se(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return f64::NAN;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Estimator for estimated-backlog runs of `cfg`, from its steady-state analysis.
pub fn estimator_for(cfg: &CheckedConfig, analysis: &Analysis) -> BacklogEstimator {
    BacklogEstimator::new(
        cfg.sensors,
        cfg.alpha,
        cfg.rho,
        cfg.frames(),
        &analysis.table,
        analysis.energy.clone(),
        cfg.tolerances.poisson_tail_mass,
    )
}

/// Simulate one replica. Estimated-backlog runs analyze the scenario first.
pub fn run_simulation(cfg: &CheckedConfig, opts: &SimOptions) -> Result<SimReport, SimError> {
    let analysis = match (cfg.backlog_mode, cfg.protocol) {
        (BacklogMode::Estimated, Protocol::Fa | Protocol::Dfa) => Some(analyze(cfg)?),
        _ => None,
    };
    run_simulation_with(cfg, opts, analysis.as_ref(), 0)
}

/// Simulate replica `replica`, reusing an existing analysis for the
/// estimator when the backlog is estimated.
pub fn run_simulation_with(
    cfg: &CheckedConfig,
    opts: &SimOptions,
    analysis: Option<&Analysis>,
    replica: u32,
) -> Result<SimReport, SimError> {
    run_simulation_traced(cfg, opts, analysis, replica, &mut |_| {})
}

/// As [`run_simulation_with`], handing every round's trace to `on_round`,
/// warm-up rounds included.
pub fn run_simulation_traced(
    cfg: &CheckedConfig,
    opts: &SimOptions,
    analysis: Option<&Analysis>,
    replica: u32,
    on_round: &mut dyn FnMut(&IrTrace),
) -> Result<SimReport, SimError> {
    if opts.rounds <= opts.warmup {
        return Err(SimError::TooFewRounds {
            rounds: opts.rounds,
            warmup: opts.warmup,
        });
    }
    let mut rng: ChaCha8Rng = substream(opts.seed, Stream::Replica(replica));
    let levels = cfg.energy.levels;

    let estimating = cfg.backlog_mode == BacklogMode::Estimated && cfg.protocol != Protocol::Tdma;
    let mut estimator = match (estimating, analysis) {
        (true, Some(a)) => Some(estimator_for(cfg, a)),
        (true, None) => Some(estimator_for(cfg, &analyze(cfg)?)),
        _ => None,
    };
    let transient: Vec<EnergyDistribution> = match (&estimator, opts.prior, analysis) {
        (Some(_), EstimatorPrior::Transient, Some(a)) => {
            transient_until_steady(cfg, a).map_err(AnalysisError::from)?
        }
        (Some(_), EstimatorPrior::Transient, None) => {
            let a = analyze(cfg)?;
            transient_until_steady(cfg, &a).map_err(AnalysisError::from)?
        }
        _ => Vec::new(),
    };
    let steady_energy = estimator.as_ref().map(|e| e.energy.clone());

    let mut population: Vec<SensorState> = (0..cfg.sensors)
        .map(|_| SensorState {
            energy: cfg.initial_energy.sample(levels, &mut rng),
            has_measure: false,
            gain: 1.0,
        })
        .collect();

    let measured = opts.rounds - opts.warmup;
    let batches = opts.batches.clamp(1, measured);
    let per_batch = measured.div_ceil(batches);
    let mut batch_counts = vec![(0u64, 0u64, 0u64, 0u64); batches];

    let mut energy_hist = vec![0u64; levels as usize + 1];
    let (mut measures, mut delivered, mut shortages, mut slots, mut successes, mut frames) =
        (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);

    for round in 1..=opts.rounds {
        if let Some(est) = estimator.as_mut() {
            if !transient.is_empty() {
                est.energy = transient
                    .get(round - 1)
                    .cloned()
                    .or_else(|| steady_energy.clone())
                    .expect("energy prior");
            }
        }
        draw_round(&mut population, cfg, &mut rng);
        let measuring = round > opts.warmup;
        if measuring {
            for s in &population {
                energy_hist[s.energy as usize] += 1;
            }
        }
        let trace = run_ir(&mut population, cfg, estimator.as_ref(), round, &mut rng)?;
        on_round(&trace);
        if measuring {
            let b = ((round - opts.warmup - 1) / per_batch).min(batches - 1);
            let c = &mut batch_counts[b];
            c.0 += u64::from(trace.measures);
            c.1 += u64::from(trace.delivered);
            c.2 += trace.slots;
            c.3 += trace.successes;
            measures += u64::from(trace.measures);
            delivered += u64::from(trace.delivered);
            slots += trace.slots;
            successes += trace.successes;
            frames += trace.frames.len() as u64;
            shortages += trace.outcomes.iter().filter(|o| o.shortage).count() as u64;
        }
        harvest_step(&mut population, cfg.harvest(), levels, &mut rng);
    }

    if slots == 0 {
        return Err(SimError::NoSlots);
    }
    let hist_total: u64 = energy_hist.iter().sum();
    let batch_p_d: Vec<f64> = batch_counts
        .iter()
        .map(|c| if c.0 > 0 { c.1 as f64 / c.0 as f64 } else { f64::NAN })
        .collect();
    let batch_p_t: Vec<f64> = batch_counts
        .iter()
        .map(|c| if c.2 > 0 { c.3 as f64 / c.2 as f64 } else { f64::NAN })
        .collect();
    Ok(SimReport {
        protocol: cfg.protocol,
        backlog_mode: cfg.backlog_mode,
        p_d: if measures > 0 {
            delivered as f64 / measures as f64
        } else {
            f64::NAN
        },
        p_t: successes as f64 / slots as f64,
        se_p_d: batch_se(&batch_p_d),
        se_p_t: batch_se(&batch_p_t),
        measures,
        delivered,
        shortages,
        slots,
        successes,
        frames_per_round: frames as f64 / measured as f64,
        energy_pmf: energy_hist
            .iter()
            .map(|c| *c as f64 / hist_total as f64)
            .collect(),
        rounds: opts.rounds,
        warmup: opts.warmup,
        seed: opts.seed,
        config: Some(cfg.config().clone()),
        batch_p_d,
        batch_p_t,
    })
}

fn transient_until_steady(
    cfg: &CheckedConfig,
    analysis: &Analysis,
) -> Result<Vec<EnergyDistribution>, crate::markov::MarkovError> {
    let start = initial_distribution(cfg, &cfg.initial_energy);
    let mut chunk = 256;
    loop {
        let series = transient_series(&start, chunk, &analysis.chain)?;
        let last = series.last().expect("non-empty");
        if last.total_variation(&analysis.energy) < 1e-12 || chunk >= 65_536 {
            return Ok(series);
        }
        chunk *= 4;
    }
}

/// Pool independent replicas. Replica `r` draws from its own substream, so
/// the result does not depend on how replicas are scheduled.
pub fn run_replicas(
    cfg: &CheckedConfig,
    opts: &SimOptions,
    analysis: Option<&Analysis>,
    replicas: u32,
) -> Result<SimReport, SimError> {
    let replicas = replicas.max(1);
    let owned;
    let analysis = match (analysis, cfg.backlog_mode, cfg.protocol) {
        (None, BacklogMode::Estimated, Protocol::Fa | Protocol::Dfa) => {
            owned = analyze(cfg)?;
            Some(&owned)
        }
        (a, _, _) => a,
    };
    let run = |r: u32| run_simulation_with(cfg, opts, analysis, r);
    #[cfg(feature = "parallel")]
    let reports: Vec<_> = {
        use rayon::prelude::*;
        (0..replicas).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let reports: Vec<_> = (0..replicas).map(run).collect();
    let reports: Vec<SimReport> = reports.into_iter().collect::<Result<_, _>>()?;
    Ok(pool_replicas(reports))
}

/// Merge replica reports: counts add up, and the batch means of all
/// replicas feed the standard errors.
pub fn pool_replicas(mut reports: Vec<SimReport>) -> SimReport {
    assert!(!reports.is_empty(), "no replica reports");
    if reports.len() == 1 {
        return reports.pop().expect("one report");
    }
    let mut out = reports[0].clone();
    let sum = |f: fn(&SimReport) -> u64| reports.iter().map(f).sum::<u64>();
    out.measures = sum(|r| r.measures);
    out.delivered = sum(|r| r.delivered);
    out.shortages = sum(|r| r.shortages);
    out.slots = sum(|r| r.slots);
    out.successes = sum(|r| r.successes);
    out.p_d = if out.measures > 0 {
        out.delivered as f64 / out.measures as f64
    } else {
        f64::NAN
    };
    out.p_t = out.successes as f64 / out.slots as f64;
    let n = reports.len() as f64;
    out.frames_per_round = reports.iter().map(|r| r.frames_per_round).sum::<f64>() / n;
    for (i, p) in out.energy_pmf.iter_mut().enumerate() {
        *p = reports.iter().map(|r| r.energy_pmf[i]).sum::<f64>() / n;
    }
    out.batch_p_d = reports.iter().flat_map(|r| r.batch_p_d.clone()).collect();
    out.batch_p_t = reports.iter().flat_map(|r| r.batch_p_t.clone()).collect();
    out.se_p_d = batch_se(&out.batch_p_d);
    out.se_p_t = batch_se(&out.batch_p_t);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        EnergyConfig, FadingModel, HarvestSpec, InitialEnergy, NumericTolerances, SirThreshold,
    };

    const GAMMA_3DB: f64 = 1.995_262_314_968_879_5;

    fn base(protocol: Protocol, sensors: usize) -> SystemConfig {
        let mut c = SystemConfig::reference(protocol, 0.15, 1.0);
        c.sensors = sensors;
        c.tolerances.capture_samples = 20_000;
        c.tolerances.particles = 20_000;
        c
    }

    fn full_population(cfg: &CheckedConfig) -> Vec<SensorState> {
        vec![
            SensorState {
                energy: cfg.energy.levels,
                has_measure: true,
                gain: 1.0
            };
            cfg.sensors
        ]
    }

    #[test]
    fn slot_resolution() {
        assert_eq!(resolve_slot(&[], GAMMA_3DB), SlotOutcome::Empty);
        assert_eq!(resolve_slot(&[0.37], GAMMA_3DB), SlotOutcome::Success(0));
        assert_eq!(resolve_slot(&[0.37], f64::INFINITY), SlotOutcome::Success(0));
        assert_eq!(resolve_slot(&[3.0, 1.0], GAMMA_3DB), SlotOutcome::Success(0));
        assert_eq!(resolve_slot(&[1.0, 3.0], GAMMA_3DB), SlotOutcome::Success(1));
        assert_eq!(resolve_slot(&[1.0, 1.0], GAMMA_3DB), SlotOutcome::Collided);
        assert_eq!(resolve_slot(&[100.0, 1.0], f64::INFINITY), SlotOutcome::Collided);
    }

    #[test]
    fn lone_sensor_fa() {
        let cfg = base(Protocol::Fa, 1).validate().unwrap();
        let mut pop = full_population(&cfg);
        let mut rng = substream(1, Stream::Custom(0));
        let t = run_ir(&mut pop, &cfg, None, 1, &mut rng).unwrap();
        assert_eq!(t.slots, 1);
        assert_eq!(t.delivered, 1);
        assert_eq!(pop[0].energy, 450);
    }

    #[test]
    fn tdma_allocates_m_slots() {
        let cfg = base(Protocol::Tdma, 3).validate().unwrap();
        let mut pop = full_population(&cfg);
        pop[1].has_measure = false;
        pop[2].energy = 10;
        let mut rng = substream(1, Stream::Custom(1));
        let t = run_ir(&mut pop, &cfg, None, 1, &mut rng).unwrap();
        assert_eq!(t.slots, 3);
        assert_eq!(t.delivered, 1);
        assert!(t.outcomes[2].shortage);
        assert_eq!(pop[2].energy, 10);
    }

    #[test]
    fn dfa_colliding_pair_spends_all_energy() {
        // Two identical gains never capture, so both sensors retry until empty.
        let mut c = base(Protocol::Dfa, 2);
        c.rho = 0.5; // one slot per frame for a backlog of two
        let cfg = c.validate().unwrap();
        let mut pop = full_population(&cfg);
        let mut rng = substream(1, Stream::Custom(2));
        let t = run_ir(&mut pop, &cfg, None, 1, &mut rng).unwrap();
        assert_eq!(t.frames.len(), 10);
        assert_eq!(t.delivered, 0);
        assert!(pop.iter().all(|s| s.energy == 0));
        assert!(t.outcomes.iter().all(|o| o.attempts == 10 && o.shortage));
    }

    #[test]
    fn harvest_saturates_and_sums() {
        let cfg = base(Protocol::Fa, 1).validate().unwrap();
        let mut rng = substream(3, Stream::Custom(3));
        let mut pop = full_population(&cfg);
        harvest_step(&mut pop, cfg.harvest(), 500, &mut rng);
        assert_eq!(pop[0].energy, 500);

        let zero = HarvestModel::Pmf { q: vec![1.0], cdf: vec![1.0] };
        pop[0].energy = 17;
        harvest_step(&mut pop, &zero, 500, &mut rng);
        assert_eq!(pop[0].energy, 17);

        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = f64::from(cfg.harvest().sample(&mut rng));
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 7.5).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn zero_alpha() {
        let mut c = base(Protocol::Fa, 20);
        c.alpha = 0.0;
        let opts = SimOptions { rounds: 50, warmup: 0, ..Default::default() };
        assert_eq!(run_simulation(&c.clone().validate().unwrap(), &opts), Err(SimError::NoSlots));
        c.protocol = Protocol::Tdma;
        let r = run_simulation(&c.validate().unwrap(), &opts).unwrap();
        assert_eq!(r.p_t, 0.0);
        assert_eq!(r.slots, 20 * 50);
        assert!(r.p_d.is_nan());
    }

    #[test]
    fn rejects_bad_round_counts() {
        let cfg = base(Protocol::Fa, 5).validate().unwrap();
        let opts = SimOptions { rounds: 10, warmup: 10, ..Default::default() };
        assert!(matches!(run_simulation(&cfg, &opts), Err(SimError::TooFewRounds { .. })));
    }

    #[test]
    fn tiny_tdma_delivery() {
        let c = SystemConfig {
            sensors: 1,
            alpha: 1.0,
            gamma_th: SirThreshold::from_db(3.0),
            rho: 1.0,
            energy: EnergyConfig { unit: 1.0, levels: 1, tx_cost_units: 1 },
            harvest: HarvestSpec::Pmf { q: vec![0.5, 0.5] },
            fading: FadingModel::Exponential,
            protocol: Protocol::Tdma,
            backlog_mode: BacklogMode::Known,
            initial_energy: InitialEnergy::Empty,
            tolerances: NumericTolerances::default(),
        };
        let opts = SimOptions { rounds: 40_000, warmup: 100, seed: 5, ..Default::default() };
        let r = run_simulation(&c.validate().unwrap(), &opts).unwrap();
        assert!((r.p_d - 0.5).abs() < 3.0 * r.se_p_d + 1e-3, "{} ± {}", r.p_d, r.se_p_d);
    }

    #[test]
    fn reproducible_and_replica_order_independent() {
        let cfg = base(Protocol::Dfa, 60).validate().unwrap();
        let opts = SimOptions { rounds: 300, warmup: 50, seed: 9, ..Default::default() };
        let a = run_simulation(&cfg, &opts).unwrap();
        let b = run_simulation(&cfg, &opts).unwrap();
        assert_eq!(a, b);
        let pooled = run_replicas(&cfg, &opts, None, 3).unwrap();
        let again = run_replicas(&cfg, &opts, None, 3).unwrap();
        assert_eq!(pooled, again);
        assert_eq!(pooled.measures, (0..3).map(|r| run_simulation_with(&cfg, &opts, None, r).unwrap().measures).sum::<u64>());
    }

    #[test]
    fn only_failed_sensors_retry() {
        let mut c = base(Protocol::Dfa, 200);
        c.alpha = 0.6;
        let cfg = c.validate().unwrap();
        let mut rng = substream(4, Stream::Custom(4));
        let mut pop: Vec<SensorState> = (0..200)
            .map(|i| SensorState { energy: (i * 7 % 501) as u32, has_measure: false, gain: 1.0 })
            .collect();
        for round in 1..200 {
            draw_round(&mut pop, &cfg, &mut rng);
            let t = run_ir(&mut pop, &cfg, None, round, &mut rng).unwrap();
            for (k, w) in t.frames.windows(2).enumerate() {
                // Frame k+1 backlog never exceeds the losers of frame k.
                let losers = w[0].backlog - w[0].observation.successes;
                assert!(w[1].backlog <= losers, "frame {}", k + 2);
            }
            for o in &t.outcomes {
                assert!(o.attempts <= 10);
                assert_eq!(o.energy_end, o.energy_start - 50 * o.attempts);
                assert!(!o.delivered || o.had_measure);
            }
            harvest_step(&mut pop, cfg.harvest(), 500, &mut rng);
        }
    }

    #[test]
    fn estimated_mode_runs() {
        let mut c = base(Protocol::Dfa, 400);
        c.backlog_mode = BacklogMode::Estimated;
        let cfg = c.validate().unwrap();
        let opts = SimOptions { rounds: 600, warmup: 300, seed: 2, ..Default::default() };
        let r = run_simulation(&cfg, &opts).unwrap();
        assert!(r.p_d > 0.0 && r.p_d < 1.0);
        assert!(r.frames_per_round >= 1.0);
        let transient = SimOptions { prior: EstimatorPrior::Transient, ..opts };
        let rt = run_simulation(&cfg, &transient).unwrap();
        assert!((rt.p_d - r.p_d).abs() < 0.1);
    }
}
