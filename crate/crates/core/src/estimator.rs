//! Backlog estimation at the fusion center.
//!
//! The first frame is sized from the expected number of sensors with a
//! measure and enough energy. Later frames are sized from the slot outcomes
//! of the previous frame: every collided slot is credited with `β_C`
//! transmitters and every successful slot with `β_D − 1` losers, and the
//! total is thinned by the probability of affording one more attempt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{poisson_weights, CaptureTable};
use crate::markov::EnergyDistribution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("frame {frame}: no energy mass at the conditioning level")]
    UndefinedConditional { frame: u32 },
    #[error("frame {frame}: collided slots observed but collisions have zero probability")]
    UndefinedCollisionMean { frame: u32 },
    #[error("frame index {frame} outside 1..={frames}")]
    FrameOutOfRange { frame: u32, frames: u32 },
}

/// Slot outcome counts for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FrameObservation {
    pub frame: u32,
    pub successes: u32,
    pub collisions: u32,
    pub empties: u32,
}

impl FrameObservation {
    pub fn length(&self) -> u32 {
        self.successes + self.collisions + self.empties
    }
}

/// Mean number of transmitters in a successful (`β_D`) and a collided
/// (`β_C`) slot, per frame. `β_C` is `None` where collisions cannot occur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaTable {
    pub success: Vec<f64>,
    pub collision: Vec<Option<f64>>,
}

/// Posterior means of the slot occupancy given the slot outcome, using the
/// Poisson prior and the frame's conditional capture probabilities.
pub fn beta_means(table: &CaptureTable, frame: u32, tail_mass: f64) -> (f64, Option<f64>) {
    let row = &table.p_cond[(frame - 1) as usize];
    let rho = table.rho;
    let mut weights = poisson_weights(rho, tail_mass);
    // Occupancy j uses p_cond(j − 1); stay within the computed row.
    weights.truncate(row.len() + 1);

    let mut success_mass = 0.0;
    let mut success_first = 0.0;
    let mut collision_mass = 0.0;
    let mut collision_first = 0.0;
    for (j, w) in weights.iter().enumerate().skip(1) {
        let jf = j as f64;
        let p_success = (jf * row[j - 1]).min(1.0);
        success_mass += p_success * w;
        success_first += jf * p_success * w;
        if j >= 2 {
            let p_collision = 1.0 - p_success;
            collision_mass += p_collision * w;
            collision_first += jf * p_collision * w;
        }
    }
    let beta_d = if success_mass > 0.0 {
        success_first / success_mass
    } else {
        1.0
    };
    let beta_c = (collision_mass > 1e-15).then(|| collision_first / collision_mass);
    (beta_d, beta_c)
}

pub fn beta_table(table: &CaptureTable, tail_mass: f64) -> BetaTable {
    let (success, collision) = (1..=table.frames() as u32)
        .map(|k| beta_means(table, k, tail_mass))
        .unzip();
    BetaTable { success, collision }
}

/// `B̂_1 = Mα G(ε)`.
pub fn initial_backlog(sensors: usize, alpha: f64, g: &EnergyDistribution) -> f64 {
    sensors as f64 * alpha * g.afford(1)
}

/// `B̂_{k+1} = ((β_D − 1) N_D + β_C N_C) · G((k+1)ε | kε)`.
pub fn update_backlog(
    obs: &FrameObservation,
    betas: &BetaTable,
    conditional: f64,
) -> Result<f64, EstimatorError> {
    let k = obs.frame as usize;
    if k == 0 || k > betas.success.len() {
        return Err(EstimatorError::FrameOutOfRange {
            frame: obs.frame,
            frames: betas.success.len() as u32,
        });
    }
    let beta_d = betas.success[k - 1];
    let collided = if obs.collisions == 0 {
        0.0
    } else {
        let beta_c = betas.collision[k - 1]
            .ok_or(EstimatorError::UndefinedCollisionMean { frame: obs.frame })?;
        beta_c * f64::from(obs.collisions)
    };
    let losers = (beta_d - 1.0) * f64::from(obs.successes) + collided;
    if losers == 0.0 {
        return Ok(0.0);
    }
    Ok(losers * conditional)
}

/// `L = ⌈ρB̂⌉`, at least one slot for any positive estimate.
pub fn frame_length(backlog: f64, rho: f64) -> u32 {
    if backlog <= 0.0 {
        return 0;
    }
    let l = (rho * backlog).ceil();
    (l.max(1.0)).min(f64::from(u32::MAX)) as u32
}

/// An estimate below this ends the round.
pub const TERMINATION_THRESHOLD: f64 = 0.5;

/// Frame-by-frame estimator state for one round.
#[derive(Debug, Clone)]
pub struct BacklogEstimator {
    pub sensors: usize,
    pub alpha: f64,
    pub rho: f64,
    /// Frames the protocol allows per round.
    pub frames: u32,
    pub betas: BetaTable,
    pub energy: EnergyDistribution,
}

impl BacklogEstimator {
    pub fn new(
        sensors: usize,
        alpha: f64,
        rho: f64,
        frames: u32,
        table: &CaptureTable,
        energy: EnergyDistribution,
        tail_mass: f64,
    ) -> Self {
        BacklogEstimator {
            sensors,
            alpha,
            rho,
            frames,
            betas: beta_table(table, tail_mass),
            energy,
        }
    }

    /// Estimate and length of the first frame.
    pub fn first(&self) -> (f64, u32) {
        let b = initial_backlog(self.sensors, self.alpha, &self.energy);
        (b, frame_length(b, self.rho))
    }

    /// Estimate and length of the frame after `obs`, or `None` when the
    /// round should end.
    pub fn next(&self, obs: &FrameObservation) -> Result<Option<(f64, u32)>, EstimatorError> {
        if obs.frame >= self.frames || obs.collisions == 0 {
            return Ok(None);
        }
        let conditional = self
            .energy
            .afford_next(obs.frame)
            .ok_or(EstimatorError::UndefinedConditional { frame: obs.frame })?;
        let b = update_backlog(obs, &self.betas, conditional)?;
        if b < TERMINATION_THRESHOLD {
            return Ok(None);
        }
        Ok(Some((b, frame_length(b, self.rho))))
    }
}
