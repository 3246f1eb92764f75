//! Markov model of one sensor's energy storage.
//!
//! States are either idle (`I_j`, `j` energy units stored) or active in frame
//! `k` (`A_j^k`). Idle states carry the harvest transition that starts a new
//! round; active states resolve one transmission attempt each. Because a
//! sensor only moves forward through frames within a round, every cycle of the
//! chain passes through an idle state. The solvers exploit this by censoring
//! the chain onto its idle states.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::CaptureTable;
use crate::model::{CheckedConfig, Protocol};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("capture table has {got} frames, protocol needs {expected}")]
    FrameMismatch { expected: usize, got: usize },
    #[error("stationary solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("linear system is singular")]
    Singular,
    #[error("no stationary mass on idle states")]
    NoIdleMass,
    #[error("distribution length {got} does not match {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateLabel {
    Idle { level: u32 },
    Active { frame: u32, level: u32 },
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateLabel::Idle { level } => write!(f, "I_{level}"),
            StateLabel::Active { frame, level } => write!(f, "A_{level}^{frame}"),
        }
    }
}

/// Dense numbering of the chain's states: idle levels first, then active
/// states frame by frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateIndex {
    pub levels: u32,
    pub tx_cost: u32,
    pub frames: u32,
}

impl StateIndex {
    pub fn new(levels: u32, tx_cost: u32, frames: u32) -> Self {
        StateIndex {
            levels,
            tx_cost,
            frames,
        }
    }

    pub fn idle_count(&self) -> usize {
        self.levels as usize + 1
    }

    fn active_per_frame(&self) -> usize {
        (self.levels - self.tx_cost) as usize + 1
    }

    pub fn len(&self) -> usize {
        self.idle_count() + self.frames as usize * self.active_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn idle(&self, level: u32) -> usize {
        debug_assert!(level <= self.levels);
        level as usize
    }

    pub fn active(&self, frame: u32, level: u32) -> usize {
        debug_assert!(frame >= 1 && frame <= self.frames);
        debug_assert!(level >= self.tx_cost && level <= self.levels);
        self.idle_count()
            + (frame - 1) as usize * self.active_per_frame()
            + (level - self.tx_cost) as usize
    }

    pub fn index(&self, label: StateLabel) -> Option<usize> {
        match label {
            StateLabel::Idle { level } if level <= self.levels => Some(self.idle(level)),
            StateLabel::Active { frame, level }
                if (1..=self.frames).contains(&frame)
                    && (self.tx_cost..=self.levels).contains(&level) =>
            {
                Some(self.active(frame, level))
            }
            _ => None,
        }
    }

    pub fn label(&self, idx: usize) -> Option<StateLabel> {
        if idx < self.idle_count() {
            return Some(StateLabel::Idle { level: idx as u32 });
        }
        let rel = idx - self.idle_count();
        let frame = rel / self.active_per_frame() + 1;
        if frame > self.frames as usize {
            return None;
        }
        let level = (rel % self.active_per_frame()) as u32 + self.tx_cost;
        Some(StateLabel::Active {
            frame: frame as u32,
            level,
        })
    }

    /// Begin-of-round state holding `level` units.
    pub fn begin_state(&self, level: u32) -> usize {
        if level < self.tx_cost {
            self.idle(level)
        } else {
            self.active(1, level)
        }
    }
}

/// Row-stochastic transition matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub index: StateIndex,
    pub protocol: Protocol,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

struct RowBuilder {
    entries: Vec<(usize, f64)>,
}

impl RowBuilder {
    fn new() -> Self {
        RowBuilder { entries: Vec::new() }
    }

    fn add(&mut self, col: usize, p: f64) {
        if p == 0.0 {
            return;
        }
        match self.entries.iter_mut().find(|(c, _)| *c == col) {
            Some(e) => e.1 += p,
            None => self.entries.push((col, p)),
        }
    }
}

impl TransitionMatrix {
    pub fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(c, _)| *c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// `x P`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (c, v) in self.row(i) {
                out[c] += xi * v;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for (c, v) in self.row(i) {
                m[(i, c)] = v;
            }
        }
        m
    }

    /// Whether every active-to-active transition moves to a higher index.
    pub fn is_frame_ordered(&self) -> bool {
        let idle = self.index.idle_count();
        (idle..self.len()).all(|i| self.row(i).all(|(c, _)| c < idle || c > i))
    }

    /// `from,to,probability` lines with state labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("from,to,probability\n");
        for i in 0..self.len() {
            let from = self.index.label(i).expect("valid index");
            for (c, v) in self.row(i) {
                let to = self.index.label(c).expect("valid index");
                out.push_str(&format!("{from},{to},{v:e}\n"));
            }
        }
        out
    }

    /// Mass left on idle states after every active state in `v` has
    /// finished its round. Optionally accumulates visits to active states.
    fn drain_active(&self, v: &[f64], mut visits: Option<&mut [f64]>) -> Vec<f64> {
        let idle = self.index.idle_count();
        let mut idle_mass = v[..idle].to_vec();
        let mut active = v[idle..].to_vec();
        for a in 0..active.len() {
            let m = active[a];
            if m == 0.0 {
                continue;
            }
            if let Some(vis) = visits.as_deref_mut() {
                vis[a] += m;
            }
            for (c, p) in self.row(idle + a) {
                if c < idle {
                    idle_mass[c] += m * p;
                } else {
                    active[c - idle] += m * p;
                }
            }
        }
        idle_mass
    }

    /// Apply the round-start (harvest) transition to an idle vector.
    fn start_round(&self, idle_mass: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (i, m) in idle_mass.iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            for (c, p) in self.row(i) {
                out[c] += m * p;
            }
        }
        out
    }
}

/// Assemble the transition matrix for the configured protocol.
///
/// Only the frame-one capture probability and later ones matter for the
/// dynamic protocol; TDMA and FA send the sensor back to idle after its
/// single attempt whatever the outcome.
pub fn build_transition_matrix(
    cfg: &CheckedConfig,
    table: &CaptureTable,
) -> Result<TransitionMatrix, MarkovError> {
    let protocol = cfg.protocol;
    let frames = cfg.frames();
    if protocol == Protocol::Dfa && table.frames() != frames as usize {
        return Err(MarkovError::FrameMismatch {
            expected: frames as usize,
            got: table.frames(),
        });
    }
    let n = cfg.energy.levels;
    let eps = cfg.energy.tx_cost_units;
    let alpha = cfg.alpha;
    let harvest = cfg.harvest();
    let index = StateIndex::new(n, eps, frames);

    let mut row_ptr = vec![0usize];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut push = |mut row: RowBuilder| {
        row.entries.sort_by_key(|e| e.0);
        for (c, v) in row.entries {
            cols.push(c);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    };

    // Idle: harvest and start a round. Reaching ε units activates the sensor.
    for j in 0..=n {
        let mut row = RowBuilder::new();
        for l in j..n {
            row.add(index.begin_state(l), harvest.prob(l - j));
        }
        row.add(index.begin_state(n), harvest.tail(n - j));
        push(row);
    }

    // Active: one transmission attempt per state.
    for k in 1..=frames {
        for j in eps..=n {
            let mut row = RowBuilder::new();
            let after = j - eps;
            if k == 1 {
                row.add(index.idle(j), 1.0 - alpha);
            }
            let committed = if k == 1 { alpha } else { 1.0 };
            match protocol {
                Protocol::Tdma | Protocol::Fa => row.add(index.idle(after), committed),
                Protocol::Dfa => {
                    let pc = table.p_marg[(k - 1) as usize];
                    row.add(index.idle(after), committed * pc);
                    let fail = committed * (1.0 - pc);
                    if j >= 2 * eps && k < frames {
                        row.add(index.active(k + 1, after), fail);
                    } else {
                        row.add(index.idle(after), fail);
                    }
                }
            }
            push(row);
        }
    }

    Ok(TransitionMatrix {
        index,
        protocol,
        row_ptr,
        cols,
        vals,
    })
}

/// Stationary solver selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    /// Dense solve for small chains, idle censoring otherwise.
    #[default]
    Auto,
    Dense,
    Censored,
    PowerIteration,
}

/// Chains up to this many states are solved densely under [`Solver::Auto`].
pub const DENSE_LIMIT: usize = 1_200;

/// `‖φP − φ‖∞`.
pub fn residual(p: &TransitionMatrix, phi: &[f64]) -> f64 {
    p.left_mul(phi)
        .iter()
        .zip(phi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Stationary distribution of a dense row-stochastic matrix with a single
/// recurrent class.
pub fn solve_dense(p: &DMatrix<f64>) -> Result<Vec<f64>, MarkovError> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(n, n);
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let x = a.lu().solve(&b).ok_or(MarkovError::Singular)?;
    let mut phi: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = phi.iter().sum();
    phi.iter_mut().for_each(|v| *v /= total);
    Ok(phi)
}

fn solve_censored(p: &TransitionMatrix) -> Result<Vec<f64>, MarkovError> {
    let idle = p.index.idle_count();
    let mut kernel = DMatrix::zeros(idle, idle);
    for i in 0..idle {
        let mut start = vec![0.0; p.len()];
        for (c, v) in p.row(i) {
            start[c] += v;
        }
        let end = p.drain_active(&start, None);
        for (c, v) in end.into_iter().enumerate() {
            kernel[(i, c)] = v;
        }
    }
    let psi = solve_dense(&kernel)?;

    let mut visits = vec![0.0; p.len() - idle];
    let mut entry = vec![0.0; p.len()];
    for (i, m) in psi.iter().enumerate() {
        for (c, v) in p.row(i) {
            if c >= idle {
                entry[c] += m * v;
            }
        }
    }
    p.drain_active(&entry, Some(&mut visits));

    let mut phi = psi;
    phi.extend(visits);
    let total: f64 = phi.iter().sum();
    phi.iter_mut().for_each(|v| *v /= total);
    Ok(phi)
}

/// Lazy power iteration `φ ← (φ + φP) / 2` from `start`.
pub fn power_iteration(
    p: &TransitionMatrix,
    start: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<Vec<f64>, MarkovError> {
    if start.len() != p.len() {
        return Err(MarkovError::LengthMismatch {
            expected: p.len(),
            got: start.len(),
        });
    }
    let total: f64 = start.iter().sum();
    let mut phi: Vec<f64> = start.iter().map(|v| v / total).collect();
    let mut res = f64::INFINITY;
    for it in 0..max_iterations {
        let next = p.left_mul(&phi);
        res = next
            .iter()
            .zip(&phi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if res <= tolerance {
            return Ok(phi);
        }
        for (x, y) in phi.iter_mut().zip(next) {
            *x = 0.5 * (*x + y);
        }
        if it % 64 == 0 {
            let s: f64 = phi.iter().sum();
            phi.iter_mut().for_each(|v| *v /= s);
        }
    }
    Err(MarkovError::NotConverged {
        residual: res,
        iterations: max_iterations,
    })
}

/// Stationary distribution `φ` with `‖φP − φ‖∞ ≤ tolerance`.
pub fn stationary_distribution(
    p: &TransitionMatrix,
    solver: Solver,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Vec<f64>, MarkovError> {
    let solver = match solver {
        Solver::Auto if p.len() <= DENSE_LIMIT => Solver::Dense,
        Solver::Auto if p.is_frame_ordered() => Solver::Censored,
        Solver::Auto => Solver::PowerIteration,
        s => s,
    };
    let phi = match solver {
        Solver::Dense => solve_dense(&p.to_dense())?,
        Solver::Censored => solve_censored(p)?,
        Solver::PowerIteration => {
            let uniform = vec![1.0; p.len()];
            return power_iteration(p, &uniform, tolerance, max_iterations);
        }
        Solver::Auto => unreachable!(),
    };
    let res = residual(p, &phi);
    if res > tolerance {
        return Err(MarkovError::NotConverged {
            residual: res,
            iterations: 0,
        });
    }
    Ok(phi)
}

/// Distribution over states at the start of a round, given the stationary
/// distribution: condition on idle states, then apply one step.
pub fn begin_ir_distribution(phi: &[f64], p: &TransitionMatrix) -> Result<Vec<f64>, MarkovError> {
    let idle = p.index.idle_count();
    let idle_total: f64 = phi[..idle].iter().sum();
    if !(idle_total > 0.0) {
        return Err(MarkovError::NoIdleMass);
    }
    let idle_mass: Vec<f64> = phi[..idle].iter().map(|v| v / idle_total).collect();
    let plus = p.start_round(&idle_mass);
    let eps = p.index.tx_cost;
    debug_assert!(plus.iter().enumerate().all(|(i, v)| {
        *v == 0.0
            || matches!(p.index.label(i), Some(StateLabel::Idle { level }) if level < eps)
            || matches!(p.index.label(i), Some(StateLabel::Active { frame: 1, .. }))
    }));
    Ok(plus)
}

/// Where an energy distribution comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionSource {
    SteadyState,
    Round(usize),
}

/// Energy pmf at the start of a round, with its ccdf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDistribution {
    pub pmf: Vec<f64>,
    pub ccdf: Vec<f64>,
    pub tx_cost: u32,
    pub source: DistributionSource,
}

impl EnergyDistribution {
    pub fn new(pmf: Vec<f64>, tx_cost: u32, source: DistributionSource) -> Self {
        let total: f64 = pmf.iter().sum();
        let pmf: Vec<f64> = pmf.iter().map(|v| v / total).collect();
        let mut ccdf = vec![0.0; pmf.len()];
        let mut acc = 0.0;
        for i in (0..pmf.len()).rev() {
            acc += pmf[i];
            ccdf[i] = acc.min(1.0);
        }
        ccdf[0] = 1.0;
        EnergyDistribution {
            pmf,
            ccdf,
            tx_cost,
            source,
        }
    }

    pub fn levels(&self) -> u32 {
        (self.pmf.len() - 1) as u32
    }

    /// `Pr[E ≥ level]`.
    pub fn ccdf_at(&self, level: u32) -> f64 {
        self.ccdf.get(level as usize).copied().unwrap_or(0.0)
    }

    /// `G(kε)`: probability of affording `k` transmissions.
    pub fn afford(&self, k: u32) -> f64 {
        self.ccdf_at(k * self.tx_cost)
    }

    /// `Pr[E ≥ (k+1)ε | E ≥ kε]`; `None` when the condition has no mass.
    pub fn afford_next(&self, k: u32) -> Option<f64> {
        let base = self.afford(k);
        (base > 0.0).then(|| self.afford(k + 1) / base)
    }

    pub fn total_variation(&self, other: &EnergyDistribution) -> f64 {
        0.5 * self
            .pmf
            .iter()
            .zip(&other.pmf)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// `level,pmf,ccdf` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,pmf,ccdf\n");
        for (i, (p, g)) in self.pmf.iter().zip(&self.ccdf).enumerate() {
            out.push_str(&format!("{i},{p:e},{g:e}\n"));
        }
        out
    }
}

/// Map a begin-of-round state distribution onto energy levels.
pub fn energy_pmf(plus: &[f64], index: &StateIndex, source: DistributionSource) -> EnergyDistribution {
    let pmf = (0..=index.levels)
        .map(|j| plus[index.begin_state(j)])
        .collect();
    EnergyDistribution::new(pmf, index.tx_cost, source)
}

/// Steady-state begin-of-round energy distribution.
pub fn steady_state_energy(
    p: &TransitionMatrix,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, EnergyDistribution), MarkovError> {
    let phi = stationary_distribution(p, Solver::Auto, tolerance, max_iterations)?;
    let plus = begin_ir_distribution(&phi, p)?;
    let g = energy_pmf(&plus, &p.index, DistributionSource::SteadyState);
    Ok((phi, g))
}

/// Begin-of-round energy distributions for rounds `1..=rounds`, starting
/// from `initial` at round one.
pub fn transient_series(
    initial: &EnergyDistribution,
    rounds: usize,
    p: &TransitionMatrix,
) -> Result<Vec<EnergyDistribution>, MarkovError> {
    let index = &p.index;
    if initial.pmf.len() != index.idle_count() {
        return Err(MarkovError::LengthMismatch {
            expected: index.idle_count(),
            got: initial.pmf.len(),
        });
    }
    let mut state = vec![0.0; p.len()];
    for (j, m) in initial.pmf.iter().enumerate() {
        state[index.begin_state(j as u32)] += m;
    }
    let mut out = Vec::with_capacity(rounds);
    for n in 1..=rounds {
        if n > 1 {
            let idle = p.drain_active(&state, None);
            state = p.start_round(&idle);
        }
        out.push(energy_pmf(&state, index, DistributionSource::Round(n)));
    }
    Ok(out)
}

/// Begin-of-round energy distribution at round `n` (`n ≥ 1`).
pub fn transient_evolution(
    initial: &EnergyDistribution,
    n: usize,
    p: &TransitionMatrix,
) -> Result<EnergyDistribution, MarkovError> {
    let mut series = transient_series(initial, n.max(1), p)?;
    Ok(series.pop().expect("at least one round"))
}
