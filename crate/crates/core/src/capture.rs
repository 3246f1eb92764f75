//! Capture probabilities under fading.
//!
//! A transmitter is decoded when its gain is at least `γ_th` times the sum of
//! the gains sharing its slot. Slot occupancy is approximated as Poisson with
//! mean `1/ρ`. For retransmission frames the gain distribution of the
//! backlog is conditioned on having failed in every previous frame; that
//! distribution is carried as a cloud of particles and pushed forward one
//! frame at a time.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CheckedConfig, FadingModel, Protocol};
use crate::rng::{substream, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptureError {
    #[error("frame {frame}: particle acceptance rate {rate:.2e} below floor {floor:.0e}")]
    AcceptanceTooLow { frame: u32, rate: f64, floor: f64 },
    #[error("particle set is empty")]
    NoParticles,
}

/// Minimum fraction of candidates that must fail for resampling to proceed.
pub const ACCEPTANCE_FLOOR: f64 = 1e-4;

const PROPAGATION_CHUNKS: u32 = 64;

/// Empirical representation of a frame's gain distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainParticles {
    pub frame: u32,
    pub samples: Vec<f64>,
}

impl GainParticles {
    /// Frame-one particles: i.i.d. draws from the fading model.
    pub fn initial(fading: &FadingModel, count: usize, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Particles);
        let samples = (0..count).map(|_| fading.sample(&mut rng)).collect();
        GainParticles { frame: 1, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        self.samples[rng.random_range(0..self.samples.len())]
    }
}

/// Where gains come from when estimating capture probabilities.
#[derive(Debug, Clone, Copy)]
pub enum GainSource<'a> {
    Model(&'a FadingModel),
    Particles(&'a GainParticles),
}

impl GainSource<'_> {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            GainSource::Model(m) => m.sample(rng),
            GainSource::Particles(p) => p.draw(rng),
        }
    }
}

/// A Monte Carlo estimate of a probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            std_error: 0.0,
            samples: 0,
        }
    }

    fn from_hits(hits: usize, samples: usize) -> Self {
        let p = hits as f64 / samples as f64;
        Estimate {
            value: p,
            std_error: (p * (1.0 - p) / samples as f64).sqrt(),
            samples,
        }
    }
}

fn captures(gain: f64, interference: f64, gamma: f64) -> bool {
    if interference == 0.0 {
        return true;
    }
    if gamma.is_infinite() {
        return false;
    }
    gain >= gamma * interference
}

/// Monte Carlo estimate of the probability that a tagged transmitter is
/// decoded with `interferers` other transmitters in its slot, all gains
/// drawn independently from `source`.
pub fn capture_cond<R: Rng>(
    source: GainSource<'_>,
    gamma: f64,
    interferers: u32,
    samples: usize,
    rng: &mut R,
) -> Estimate {
    if interferers == 0 {
        return Estimate::exact(1.0);
    }
    if gamma.is_infinite() {
        return Estimate::exact(0.0);
    }
    let mut hits = 0usize;
    for _ in 0..samples {
        let h = source.draw(rng);
        let interference: f64 = (0..interferers).map(|_| source.draw(rng)).sum();
        if captures(h, interference, gamma) {
            hits += 1;
        }
    }
    Estimate::from_hits(hits, samples)
}

/// Monte Carlo estimate of the unconditional capture probability, with the
/// interferer count drawn from Poisson(1/ρ).
pub fn capture_marginal_mc<R: Rng>(
    source: GainSource<'_>,
    gamma: f64,
    rho: f64,
    samples: usize,
    rng: &mut R,
) -> Estimate {
    let poisson = Poisson::new(1.0 / rho).expect("rho > 0");
    let mut hits = 0usize;
    for _ in 0..samples {
        let j = poisson.sample(rng) as u32;
        let h = source.draw(rng);
        let interference: f64 = (0..j).map(|_| source.draw(rng)).sum();
        if captures(h, interference, gamma) {
            hits += 1;
        }
    }
    Estimate::from_hits(hits, samples)
}

/// Closed form for unit-mean exponential gains: `(1 + γ)^(-j)`.
pub fn capture_cond_exponential(gamma: f64, interferers: u32) -> f64 {
    if interferers == 0 {
        1.0
    } else if gamma.is_infinite() {
        0.0
    } else {
        (1.0 + gamma).powi(-(interferers as i32))
    }
}

/// Closed form for unit-mean exponential gains: `exp(-(1/ρ) γ/(1+γ))`.
pub fn capture_marginal_exponential(gamma: f64, rho: f64) -> f64 {
    let frac = if gamma.is_infinite() {
        1.0
    } else {
        gamma / (1.0 + gamma)
    };
    (-frac / rho).exp()
}

/// Poisson occupancy weight `e^{-1/ρ} / (ρ^j j!)`.
pub fn poisson_weight(rho: f64, j: u32) -> f64 {
    let lambda = 1.0 / rho;
    let mut w = (-lambda).exp();
    for i in 1..=j {
        w *= lambda / f64::from(i);
    }
    w
}

/// Poisson weights `0..=J_max`, where `J_max` is the first index after which
/// the remaining mass is below `tail_mass`.
pub fn poisson_weights(rho: f64, tail_mass: f64) -> Vec<f64> {
    let lambda = 1.0 / rho;
    let mut w = (-lambda).exp();
    let mut weights = vec![w];
    let mut acc = w;
    let mut j = 0u32;
    // The mode sits at ⌊λ⌋; never stop before it.
    while 1.0 - acc >= tail_mass || f64::from(j) < lambda {
        j += 1;
        w *= lambda / f64::from(j);
        acc += w;
        weights.push(w);
        if j > 10_000 {
            break;
        }
    }
    weights
}

/// Push frame-`k` particles to frame `k + 1` by keeping only candidates whose
/// SIR fell below the threshold against a Poisson(1/ρ) set of interferers.
pub fn propagate_gain_particles(
    particles: &GainParticles,
    rho: f64,
    gamma: f64,
    target: usize,
    seed: u64,
) -> Result<GainParticles, CaptureError> {
    if particles.is_empty() {
        return Err(CaptureError::NoParticles);
    }
    let next_frame = particles.frame + 1;
    let chunk_len = target.div_ceil(PROPAGATION_CHUNKS as usize).max(1);
    let chunks: Vec<(u32, usize)> = (0..PROPAGATION_CHUNKS)
        .map(|c| {
            let start = c as usize * chunk_len;
            (c, target.saturating_sub(start).min(chunk_len))
        })
        .filter(|(_, n)| *n > 0)
        .collect();

    let run_chunk = |&(chunk, wanted): &(u32, usize)| -> Result<Vec<f64>, CaptureError> {
        let mut rng = substream(
            seed,
            Stream::Propagate {
                frame: next_frame,
                chunk,
            },
        );
        let poisson = Poisson::new(1.0 / rho).expect("rho > 0");
        let mut out = Vec::with_capacity(wanted);
        let mut tried = 0usize;
        while out.len() < wanted {
            tried += 1;
            let h = particles.draw(&mut rng);
            let j = poisson.sample(&mut rng) as u32;
            let interference: f64 = (0..j).map(|_| particles.draw(&mut rng)).sum();
            if !captures(h, interference, gamma) {
                out.push(h);
            }
            if tried >= 10_000 && (out.len() as f64) < ACCEPTANCE_FLOOR * tried as f64 {
                return Err(CaptureError::AcceptanceTooLow {
                    frame: next_frame,
                    rate: out.len() as f64 / tried as f64,
                    floor: ACCEPTANCE_FLOOR,
                });
            }
        }
        Ok(out)
    };

    #[cfg(feature = "parallel")]
    let pieces: Vec<_> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run_chunk).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let pieces: Vec<_> = chunks.iter().map(run_chunk).collect();

    let mut samples = Vec::with_capacity(target);
    for piece in pieces {
        samples.extend(piece?);
    }
    Ok(GainParticles {
        frame: next_frame,
        samples,
    })
}

/// Per-frame capture quantities for one `(ρ, γ_th)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureTable {
    pub rho: f64,
    pub gamma_th_db: Option<f64>,
    pub fading: String,
    /// Largest interferer count kept in the Poisson sums.
    pub j_max: u32,
    /// `p_cond[k-1][j]`: capture probability in frame `k` with `j` interferers.
    pub p_cond: Vec<Vec<f64>>,
    /// Standard errors of `p_cond`; zero for closed-form entries.
    pub se_cond: Vec<Vec<f64>>,
    /// Unconditional capture probability per frame.
    pub p_marg: Vec<f64>,
    /// Per-frame time efficiency (successful slots per slot).
    pub p_slot: Vec<f64>,
    /// Mean gain of each frame's particle set.
    pub mean_gain: Vec<f64>,
    /// Diagnostics, e.g. estimates whose standard error exceeded the bound.
    pub warnings: Vec<String>,
}

/// Build options beyond what the scenario carries.
#[derive(Debug, Clone, Copy, Default)]
pub struct TableOptions {
    /// Extra Poisson terms beyond the tail-mass truncation point.
    pub extra_terms: u32,
    /// Skip the exponential closed forms and use Monte Carlo throughout.
    pub force_monte_carlo: bool,
}

impl CaptureTable {
    pub fn frames(&self) -> usize {
        self.p_marg.len()
    }

    /// Key under which a table can be cached.
    pub fn cache_key(cfg: &CheckedConfig) -> String {
        let t = &cfg.tolerances;
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            cfg.fading.kind(),
            cfg.gamma_th,
            cfg.rho,
            cfg.frames(),
            t.capture_samples,
            t.particles,
            t.poisson_tail_mass,
            t.rng_seed
        )
    }

    /// Table for a collision-free schedule: every transmission succeeds.
    pub fn collision_free(cfg: &CheckedConfig) -> Self {
        CaptureTable {
            rho: cfg.rho,
            gamma_th_db: cfg.gamma_th.db(),
            fading: cfg.fading.kind(),
            j_max: 0,
            p_cond: vec![vec![1.0]],
            se_cond: vec![vec![0.0]],
            p_marg: vec![1.0],
            p_slot: vec![1.0],
            mean_gain: vec![1.0],
            warnings: Vec::new(),
        }
    }

    /// Weighted sums of a `p_cond` row with Poisson weights:
    /// returns `(Σ w_j p_j, Σ w_j p_j / ρ)`.
    fn marginals(row: &[f64], weights: &[f64], rho: f64) -> (f64, f64) {
        let marg: f64 = row.iter().zip(weights).map(|(p, w)| p * w).sum();
        (marg.clamp(0.0, 1.0), (marg / rho).clamp(0.0, 1.0))
    }
}

/// Compute capture probabilities for every frame the configured protocol uses.
pub fn build_capture_table(cfg: &CheckedConfig) -> Result<CaptureTable, CaptureError> {
    build_capture_table_with(cfg, TableOptions::default())
}

pub fn build_capture_table_with(
    cfg: &CheckedConfig,
    opts: TableOptions,
) -> Result<CaptureTable, CaptureError> {
    if cfg.protocol == Protocol::Tdma {
        return Ok(CaptureTable::collision_free(cfg));
    }
    let tol = &cfg.tolerances;
    let gamma = cfg.gamma_linear();
    let rho = cfg.rho;
    let seed = tol.rng_seed;
    let frames = cfg.frames();

    let mut weights = poisson_weights(rho, tol.poisson_tail_mass);
    for _ in 0..opts.extra_terms {
        let j = weights.len() as u32;
        let w = weights[weights.len() - 1] / rho / f64::from(j);
        weights.push(w);
    }
    let j_max = (weights.len() - 1) as u32;
    let closed_form = !opts.force_monte_carlo && matches!(cfg.fading, FadingModel::Exponential);

    let mut table = CaptureTable {
        rho,
        gamma_th_db: cfg.gamma_th.db(),
        fading: cfg.fading.kind(),
        j_max,
        p_cond: Vec::new(),
        se_cond: Vec::new(),
        p_marg: Vec::new(),
        p_slot: Vec::new(),
        mean_gain: Vec::new(),
        warnings: Vec::new(),
    };

    let mut particles = if frames > 1 || !closed_form {
        Some(GainParticles::initial(&cfg.fading, tol.particles, seed))
    } else {
        None
    };

    for k in 1..=frames {
        if k > 1 {
            let prev = particles.as_ref().expect("particles for retransmission frames");
            particles = Some(propagate_gain_particles(prev, rho, gamma, tol.particles, seed)?);
        }
        let (row, se): (Vec<f64>, Vec<f64>) = if k == 1 && closed_form {
            (
                (0..=j_max).map(|j| capture_cond_exponential(gamma, j)).collect(),
                vec![0.0; j_max as usize + 1],
            )
        } else {
            let source = match (k, particles.as_ref()) {
                (1, _) => GainSource::Model(&cfg.fading),
                (_, Some(p)) => GainSource::Particles(p),
                (_, None) => unreachable!(),
            };
            let estimate = |j: u32| {
                let mut rng = substream(seed, Stream::Capture { frame: k, interferers: j });
                capture_cond(source, gamma, j, tol.capture_samples, &mut rng)
            };
            #[cfg(feature = "parallel")]
            let ests: Vec<Estimate> = {
                use rayon::prelude::*;
                (0..=j_max).into_par_iter().map(estimate).collect()
            };
            #[cfg(not(feature = "parallel"))]
            let ests: Vec<Estimate> = (0..=j_max).map(estimate).collect();
            let mut row: Vec<f64> = ests.iter().map(|e| e.value).collect();
            // Enforce monotonicity in j; MC noise can break it in the far tail.
            for j in 1..row.len() {
                if row[j] > row[j - 1] {
                    row[j] = row[j - 1];
                }
            }
            (row, ests.iter().map(|e| e.std_error).collect())
        };
        let worst = se.iter().cloned().fold(0.0, f64::max);
        if worst > tol.max_standard_error {
            table.warnings.push(format!(
                "frame {k}: capture standard error {worst:.2e} above bound {:.0e}",
                tol.max_standard_error
            ));
        }
        let (marg, slot) = CaptureTable::marginals(&row, &weights, rho);
        table.p_marg.push(marg);
        table.p_slot.push(slot);
        table.mean_gain.push(particles.as_ref().map_or(1.0, |p| p.mean()));
        table.p_cond.push(row);
        table.se_cond.push(se);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SirThreshold, SystemConfig};

    const GAMMA_3DB: f64 = 1.995_262_314_968_879_5;

    fn cfg(protocol: Protocol, rho: f64) -> CheckedConfig {
        let mut c = SystemConfig::reference(protocol, 0.15, rho);
        c.tolerances.capture_samples = 40_000;
        c.tolerances.particles = 40_000;
        c.validate().unwrap()
    }

    #[test]
    fn lone_transmitter_always_captures() {
        let mut rng = substream(1, Stream::Custom(0));
        let e = capture_cond(GainSource::Model(&FadingModel::Exponential), GAMMA_3DB, 0, 10, &mut rng);
        assert_eq!(e.value, 1.0);
    }

    #[test]
    fn poisson_weight_values() {
        assert!((poisson_weight(1.0, 0) - (-1f64).exp()).abs() < 1e-15);
        assert!((poisson_weight(1.0, 1) - (-1f64).exp()).abs() < 1e-15);
        assert!((poisson_weight(2.0, 2) - (-0.5f64).exp() * 0.125).abs() < 1e-15);
        for rho in [0.5, 0.75, 1.0, 3.0] {
            let w = poisson_weights(rho, 1e-10);
            let total: f64 = w.iter().sum();
            assert!(total >= 1.0 - 1e-10);
            let shorter: f64 = w[..w.len() - 1].iter().sum();
            assert!(1.0 - shorter >= 1e-10, "truncation point is minimal");
        }
    }

    #[test]
    fn exponential_single_interferer() {
        // Pr[h1 >= γ h2] = 1/(1+γ) for unit-mean exponentials.
        let mut rng = substream(2, Stream::Custom(1));
        let e = capture_cond(GainSource::Model(&FadingModel::Exponential), GAMMA_3DB, 1, 400_000, &mut rng);
        let exact = 1.0 / (1.0 + GAMMA_3DB);
        assert!((exact - 0.3339).abs() < 1e-4);
        assert!((e.value - exact).abs() < 4.0 * e.std_error);
    }

    #[test]
    fn closed_form_marginal() {
        let p = capture_marginal_exponential(GAMMA_3DB, 1.0);
        assert!((p - 0.5137).abs() < 1e-4);
        // Brute-force series summation.
        let series: f64 = (0..60).map(|j| poisson_weight(1.0, j) * capture_cond_exponential(GAMMA_3DB, j)).sum();
        assert!((series - p).abs() < 1e-14);
    }

    #[test]
    fn capture_disabled_reduces_to_slotted_aloha() {
        for rho in [1.0, 2.0] {
            let mut c = SystemConfig::reference(Protocol::Fa, 0.15, rho);
            c.gamma_th = SirThreshold::disabled();
            let t = build_capture_table(&c.validate().unwrap()).unwrap();
            let lambda = 1.0 / rho;
            assert!((t.p_marg[0] - (-lambda).exp()).abs() < 1e-15);
            assert!((t.p_slot[0] - lambda * (-lambda).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn table_shape_and_ranges() {
        let t = build_capture_table(&cfg(Protocol::Dfa, 1.0)).unwrap();
        assert_eq!(t.frames(), 10);
        for k in 0..t.frames() {
            assert_eq!(t.p_cond[k][0], 1.0);
            assert!(t.p_cond[k].windows(2).all(|w| w[1] <= w[0]));
            assert!((0.0..=1.0).contains(&t.p_marg[k]));
            assert!((0.0..=1.0).contains(&t.p_slot[k]));
            // ρ = 1 makes the two series identical.
            assert!((t.p_slot[k] - t.p_marg[k]).abs() < 1e-15);
        }
        assert!((t.p_marg[0] - 0.5137).abs() < 1e-4);
        // Failures select weak gains, so the backlog's mean gain drops.
        assert!(t.mean_gain[1] < t.mean_gain[0]);
        // Under exponential fading failure mostly rescales the gain law, and
        // capture is scale free.
        for k in 1..t.frames() {
            assert!((t.p_marg[k] - t.p_marg[0]).abs() < 0.01);
        }
        assert_eq!(build_capture_table(&cfg(Protocol::Fa, 1.0)).unwrap().frames(), 1);
        let tdma = build_capture_table(&cfg(Protocol::Tdma, 1.0)).unwrap();
        assert_eq!(tdma.p_marg, vec![1.0]);
    }

    #[test]
    fn propagation_contract() {
        let p = GainParticles::initial(&FadingModel::Exponential, 20_000, 3);
        let next = propagate_gain_particles(&p, 1.0, GAMMA_3DB, 12_345, 3).unwrap();
        assert_eq!(next.len(), 12_345);
        assert_eq!(next.frame, 2);
        assert!(next.samples.iter().all(|h| *h > 0.0));
        assert!(next.mean() < p.mean());
    }

    #[test]
    fn propagation_without_capture_keeps_distribution() {
        let p = GainParticles::initial(&FadingModel::Exponential, 50_000, 4);
        let next = propagate_gain_particles(&p, 1.0, f64::INFINITY, 50_000, 4).unwrap();
        // Resampled from the same set: every output value is an input value
        // and the mean agrees to sampling precision.
        let mut sorted = p.samples.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(next.samples.iter().all(|h| sorted.binary_search_by(|x| x.total_cmp(h)).is_ok()));
        assert!((next.mean() - p.mean()).abs() < 0.03);
    }

    #[test]
    fn propagation_rejects_certain_capture() {
        // ρ huge: almost no interferers, almost every candidate succeeds.
        let p = GainParticles::initial(&FadingModel::Exponential, 1_000, 5);
        let err = propagate_gain_particles(&p, 1e6, GAMMA_3DB, 1_000, 5).unwrap_err();
        assert!(matches!(err, CaptureError::AcceptanceTooLow { .. }));
    }

    #[test]
    fn extra_terms_do_not_move_results() {
        let c = cfg(Protocol::Dfa, 0.75);
        let a = build_capture_table(&c).unwrap();
        let b = build_capture_table_with(&c, TableOptions { extra_terms: 5, ..Default::default() }).unwrap();
        assert_eq!(b.j_max, a.j_max + 5);
        for k in 0..a.frames() {
            assert!((a.p_marg[k] - b.p_marg[k]).abs() < 1e-9);
            assert!((a.p_slot[k] - b.p_slot[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let c = cfg(Protocol::Dfa, 1.5);
        assert_eq!(build_capture_table(&c).unwrap(), build_capture_table(&c).unwrap());
    }

    #[test]
    fn monte_carlo_route_agrees_with_closed_form() {
        let c = cfg(Protocol::Fa, 1.0);
        let mc = build_capture_table_with(&c, TableOptions { force_monte_carlo: true, ..Default::default() }).unwrap();
        for j in 0..=6u32 {
            let exact = capture_cond_exponential(GAMMA_3DB, j);
            let se = mc.se_cond[0][j as usize].max(1e-12);
            assert!((mc.p_cond[0][j as usize] - exact).abs() <= 4.0 * se + 1e-12, "j={j}");
        }
    }
}
