//! Random-phase codebook search with per-AP water-filling power.
//!
//! Water-filling runs on the interference-free proxy gains `‖g_{l,k}‖²` of
//! one AP at a time; each UE's power is then spread evenly over the AP's
//! antennas.

use crate::channel::ChannelRealization;
use crate::emwave::{sim_response, PhaseConfig, PropagationSet};
use crate::env::SimEnv;
use crate::error::{Result, SimError};
use crate::seed::{self, tag};
use crate::sysmodel::{effective_gains_from_responses, evaluate_sum_se, EffectiveGains, NoiseModel, PowerAllocation};

#[derive(Debug, Clone, PartialEq)]
pub struct WaterFilling {
    pub powers: Vec<f64>,
    /// Water level `μ`; `NaN` for the all-zero-gain fallback.
    pub level: f64,
}

/// `p_k = max(0, μ − σ²/g_k)` with `Σ p_k = P_max`.
///
/// Bisection brackets the level, then the closed form on the active set
/// `μ = (P_max + Σ_active σ²/g_k) / |active|` is iterated until the set is
/// stable, which pins the budget to rounding error.
pub fn water_filling(gains: &[f64], p_max: f64, sigma2: f64) -> Result<WaterFilling> {
    if gains.is_empty() {
        return Err(SimError::InvalidConfig("water-filling needs at least one gain".into()));
    }
    if !(p_max.is_finite() && p_max > 0.0) {
        return Err(SimError::InvalidConfig(format!("water-filling budget must be positive, got {p_max}")));
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(SimError::InvalidConfig(format!("water-filling noise must be positive, got {sigma2}")));
    }
    if let Some(g) = gains.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(SimError::InvalidConfig(format!("water-filling gain must be finite and >= 0, got {g}")));
    }
    let k = gains.len();
    if gains.iter().all(|&g| g == 0.0) {
        log::warn!("all water-filling gains are zero; falling back to uniform power");
        return Ok(WaterFilling { powers: vec![p_max / k as f64; k], level: f64::NAN });
    }
    let floor: Vec<f64> = gains.iter().map(|&g| if g > 0.0 { sigma2 / g } else { f64::INFINITY }).collect();
    let filled = |mu: f64| floor.iter().map(|f| (mu - f).max(0.0)).sum::<f64>();

    let min_floor = floor.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (min_floor, min_floor + p_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) > p_max {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..k + 1 {
        let active: Vec<f64> = floor.iter().copied().filter(|&f| f < mu).collect();
        let next = (p_max + active.iter().sum::<f64>()) / active.len().max(1) as f64;
        if next == mu {
            break;
        }
        mu = next;
    }
    let powers = floor.iter().map(|f| (mu - f).max(0.0)).collect();
    Ok(WaterFilling { powers, level: mu })
}

/// Water-filling per AP on `‖g_{l,k}‖²`, each UE's power split evenly over
/// the AP's antennas.
pub fn water_filling_allocation(g: &EffectiveGains, p_max: &[f64], noise: &NoiseModel) -> Result<PowerAllocation> {
    if p_max.len() != g.aps {
        return Err(SimError::shape("power budgets", g.aps, p_max.len()));
    }
    let mut pa = PowerAllocation::zeros(g.aps, g.ues, g.antennas);
    for l in 0..g.aps {
        let gains: Vec<f64> = (0..g.ues).map(|k| g.power_gain(l, k)).collect();
        let wf = water_filling(&gains, p_max[l], noise.sigma2)?;
        let row = pa.agent_mut(l);
        for (k, p) in wf.powers.iter().enumerate() {
            let amp = (p / g.antennas as f64).sqrt();
            row[k * g.antennas..(k + 1) * g.antennas].fill(amp);
        }
    }
    Ok(pa)
}

/// `C` independent uniform phase configurations. Entry `i` depends only on
/// `(seed, i)`, so codebooks of different sizes from one seed are nested.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub seed: u64,
    entries: Vec<PhaseConfig>,
}

impl Codebook {
    pub fn generate(size: usize, agents: usize, layers: usize, atoms: usize, seed: u64) -> Self {
        let entries = (0..size as u64)
            .map(|i| PhaseConfig::random(agents, layers, atoms, &mut seed::rng(seed, tag::CODEBOOK, i)))
            .collect();
        Self { seed, entries }
    }

    pub fn from_entries(seed: u64, entries: Vec<PhaseConfig>) -> Self {
        Self { seed, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PhaseConfig] {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_index: usize,
    pub phases: PhaseConfig,
    pub power: PowerAllocation,
    pub sum_se: f64,
    /// Sum SE of every entry, in codebook order.
    pub entry_sum_se: Vec<f64>,
}

/// Evaluates every entry with water-filling power and keeps the best; ties
/// go to the lowest index.
pub fn codebook_search(
    h: &ChannelRealization,
    propagation: &PropagationSet,
    cb: &Codebook,
    noise: &NoiseModel,
    p_max: &[f64],
) -> Result<SearchResult> {
    if cb.is_empty() {
        return Err(SimError::EmptyCodebook);
    }
    let mut best: Option<(usize, PowerAllocation, f64)> = None;
    let mut entry_sum_se = Vec::with_capacity(cb.len());
    for (i, phases) in cb.entries().iter().enumerate() {
        let responses = (0..h.aps).map(|l| sim_response(phases, propagation, l)).collect::<Result<Vec<_>>>()?;
        let g = effective_gains_from_responses(h, &responses)?;
        let pa = water_filling_allocation(&g, p_max, noise)?;
        let se = evaluate_sum_se(&g, &pa, noise)?;
        entry_sum_se.push(se);
        if best.as_ref().map_or(true, |b| se > b.2) {
            best = Some((i, pa, se));
        }
    }
    let (best_index, power, sum_se) = best.expect("codebook is non-empty");
    Ok(SearchResult { best_index, phases: cb.entries()[best_index].clone(), power, sum_se, entry_sum_se })
}

/// [`codebook_search`] on the environment's current channel.
pub fn codebook_search_env(env: &SimEnv, cb: &Codebook) -> Result<SearchResult> {
    codebook_search(env.channel(), env.propagation(), cb, env.noise(), &env.p_max())
}
