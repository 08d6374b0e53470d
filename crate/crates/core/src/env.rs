//! Shared-reward Dec-POMDP with one agent per AP-SIM group.
//!
//! The channel is block-fading: drawn at `reset` and held for the `T` steps
//! of the episode. Actions are absolute settings. Agent `l` emits a raw
//! vector of `K·M_AP` power entries followed by `M·N` phase entries.

use crate::channel::{
    large_scale, place_network, sample_channel, ChannelMode, ChannelRealization, LargeScale, Layout, LayoutParams,
    PathlossModel,
};
use crate::emwave::{
    build_geometry, build_transmission_matrices, sim_response, squash_phase, CMatrix, GeometryParams, PhaseConfig,
    PropagationSet, SimGeometry,
};
use crate::error::{Result, SimError};
use crate::seed::{self, tag};
use crate::sysmodel::{
    effective_gains_from_responses, evaluate_sum_se, project_power, sinr, spectral_efficiency, sum_se, NoiseModel,
    PowerAllocation,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub agents: usize,
    pub ues: usize,
    pub geometry: GeometryParams,
    pub layout: LayoutParams,
    pub pathloss: PathlossModel,
    pub channel_mode: ChannelMode,
    pub p_max_w: f64,
    pub sigma2_w: f64,
    pub steps: usize,
    /// Redraw UE positions at every reset; otherwise `layout_seed` fixes them.
    pub resample_layout: bool,
    pub layout_seed: u64,
    /// Append the flattened transmission matrices to the global state.
    pub include_transmission_context: bool,
}

impl EnvConfig {
    pub fn obs_dim(&self) -> usize {
        let g = &self.geometry;
        2 * self.ues * g.atoms_per_layer + self.ues * g.ap_antennas + 2 * g.layers * g.atoms_per_layer
    }

    pub fn action_dim(&self) -> usize {
        let g = &self.geometry;
        self.ues * g.ap_antennas + g.layers * g.atoms_per_layer
    }

    pub fn global_state_dim(&self) -> usize {
        let g = &self.geometry;
        let context = if self.include_transmission_context {
            2 * (g.atoms_per_layer * g.ap_antennas + (g.layers - 1) * g.atoms_per_layer * g.atoms_per_layer)
        } else {
            0
        };
        3 * self.agents * self.ues + self.ues + 1 + context
    }

    /// Critic features per agent: global state followed by the agent's observation.
    pub fn agent_state_dim(&self) -> usize {
        self.global_state_dim() + self.obs_dim()
    }
}

/// `𝒮^{(t)}`: relative AP/UE positions, optional transmission context,
/// the previous step's SINR and the step index.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// `(ue − ap) / area` for every `(l, k)`, row-major.
    pub relative_positions: Vec<f64>,
    pub transmission_context: Option<Vec<f64>>,
    pub last_sinr: Vec<f64>,
    pub step: usize,
    pub steps: usize,
}

impl GlobalState {
    /// Flat feature vector; SINRs enter as `log2(1 + γ)`.
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.relative_positions.clone();
        f.extend(self.last_sinr.iter().map(|g| (1.0 + g).log2()));
        f.push(self.step as f64 / self.steps as f64);
        if let Some(ctx) = &self.transmission_context {
            f.extend_from_slice(ctx);
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<Vec<f64>>,
    pub shared_reward: f64,
    pub rewards: Vec<f64>,
    pub sinr: Vec<f64>,
    pub done: bool,
    pub next_state: GlobalState,
}

/// Decoded action of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAction {
    /// Feasible amplitudes `[k][a]`.
    pub power: Vec<f64>,
    /// Phases `[m][n]` in `[0, 2π)`.
    pub phases: Vec<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Maps one agent's raw action onto the feasible set: `φ = π(tanh(raw) + 1)`
/// for phases, softplus amplitudes projected onto the `P_max` ball for power.
pub fn action_decode(raw: &[f64], power_len: usize, phase_len: usize, p_max: f64) -> Result<DecodedAction> {
    if raw.len() != power_len + phase_len {
        return Err(SimError::shape("raw action", power_len + phase_len, raw.len()));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(SimError::NonFinite(format!("raw action entry {bad}")));
    }
    let (rp, rphi) = raw.split_at(power_len);
    let amps = PowerAllocation::from_vec(1, 1, power_len, rp.iter().map(|&x| softplus(x)).collect())?;
    let power = project_power(&amps, &[p_max])?.amp;
    let phases = rphi.iter().map(|&x| squash_phase(x)).collect();
    Ok(DecodedAction { power, phases })
}

pub struct SimEnv {
    cfg: EnvConfig,
    geometry: SimGeometry,
    propagation: PropagationSet,
    noise: NoiseModel,
    layout: Layout,
    beta: LargeScale,
    channel: ChannelRealization,
    phases: PhaseConfig,
    power: PowerAllocation,
    responses: Vec<CMatrix>,
    last_sinr: Vec<f64>,
    t: usize,
    done: bool,
    context: Option<Vec<f64>>,
}

impl SimEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        if cfg.agents == 0 || cfg.ues == 0 {
            return Err(SimError::InvalidConfig("need at least one agent and one UE".into()));
        }
        if cfg.steps == 0 {
            return Err(SimError::InvalidConfig("steps per episode must be at least 1".into()));
        }
        if !(cfg.p_max_w.is_finite() && cfg.p_max_w > 0.0) {
            return Err(SimError::InvalidConfig(format!("P_max must be positive, got {}", cfg.p_max_w)));
        }
        let noise = NoiseModel::new(cfg.sigma2_w)?;
        let geometry = build_geometry(&cfg.geometry)?;
        let propagation = build_transmission_matrices(&geometry, cfg.agents)?;
        let layout = place_network(cfg.layout_seed, cfg.agents, cfg.ues, &cfg.layout)?;
        let beta = large_scale(&layout, &cfg.pathloss)?;
        let (l, k, n, m) = (cfg.agents, cfg.ues, geometry.atoms_per_layer, geometry.layer_count);
        let context = cfg.include_transmission_context.then(|| transmission_context(&propagation));
        let mut env = Self {
            channel: sample_channel(&beta, n, cfg.layout_seed, cfg.channel_mode)?,
            phases: PhaseConfig::zeros(l, m, n),
            power: PowerAllocation::uniform(l, k, geometry.ap_antenna_count, &vec![cfg.p_max_w; l]),
            responses: Vec::new(),
            last_sinr: vec![0.0; k],
            t: 0,
            done: true,
            cfg,
            geometry,
            propagation,
            noise,
            layout,
            beta,
            context,
        };
        env.refresh_all()?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &SimGeometry {
        &self.geometry
    }

    pub fn propagation(&self) -> &PropagationSet {
        &self.propagation
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn large_scale(&self) -> &LargeScale {
        &self.beta
    }

    pub fn channel(&self) -> &ChannelRealization {
        &self.channel
    }

    pub fn phases(&self) -> &PhaseConfig {
        &self.phases
    }

    pub fn power(&self) -> &PowerAllocation {
        &self.power
    }

    pub fn p_max(&self) -> Vec<f64> {
        vec![self.cfg.p_max_w; self.cfg.agents]
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn refresh_all(&mut self) -> Result<()> {
        self.responses = (0..self.cfg.agents)
            .map(|l| sim_response(&self.phases, &self.propagation, l))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn current_sinr(&self) -> Result<Vec<f64>> {
        let g = effective_gains_from_responses(&self.channel, &self.responses)?;
        sinr(&g, &self.power, &self.noise)
    }

    /// Starts an episode: fresh channel, uniform random phases and uniform power.
    pub fn reset(&mut self, seed: u64) -> Result<(GlobalState, Vec<Vec<f64>>)> {
        if self.cfg.resample_layout {
            self.layout = place_network(seed, self.cfg.agents, self.cfg.ues, &self.cfg.layout)?;
            self.beta = large_scale(&self.layout, &self.cfg.pathloss)?;
        }
        self.channel = sample_channel(&self.beta, self.geometry.atoms_per_layer, seed, self.cfg.channel_mode)?;
        let mut rng = seed::rng(seed, tag::PHASE_INIT, 0);
        self.phases = PhaseConfig::random(
            self.cfg.agents,
            self.geometry.layer_count,
            self.geometry.atoms_per_layer,
            &mut rng,
        );
        self.power = PowerAllocation::uniform(
            self.cfg.agents,
            self.cfg.ues,
            self.geometry.ap_antenna_count,
            &self.p_max(),
        );
        self.refresh_all()?;
        self.last_sinr = self.current_sinr()?;
        self.t = 0;
        self.done = false;
        Ok((self.state(), self.observations()))
    }

    pub fn state(&self) -> GlobalState {
        let area = self.layout.area_m;
        let mut rel = Vec::with_capacity(3 * self.cfg.agents * self.cfg.ues);
        for ap in &self.layout.ap_positions {
            for ue in &self.layout.ue_positions {
                rel.extend((0..3).map(|i| (ue[i] - ap[i]) / area));
            }
        }
        GlobalState {
            relative_positions: rel,
            transmission_context: self.context.clone(),
            last_sinr: self.last_sinr.clone(),
            step: self.t,
            steps: self.cfg.steps,
        }
    }

    /// `𝒪_l^{(t)}`: agent-normalized local CSI, own amplitudes over `√P_max`,
    /// and own phases as `(cos, sin)` pairs.
    pub fn observation(&self, l: usize) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.cfg.obs_dim());
        let k = self.cfg.ues;
        let mut energy = 0.0;
        let mut count = 0usize;
        for ue in 0..k {
            for z in self.channel.vector(l, ue) {
                energy += z.norm_sqr();
                count += 1;
            }
        }
        let rms = (energy / count as f64).sqrt();
        let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        for ue in 0..k {
            for z in self.channel.vector(l, ue) {
                obs.push(z.re * scale);
                obs.push(z.im * scale);
            }
        }
        let amp_scale = 1.0 / self.cfg.p_max_w.sqrt();
        obs.extend(self.power.agent(l).iter().map(|a| a * amp_scale));
        for &phi in self.phases.agent_phases(l) {
            obs.push(phi.cos());
            obs.push(phi.sin());
        }
        obs
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.agents).map(|l| self.observation(l)).collect()
    }

    /// Global features followed by agent `l`'s observation.
    pub fn agent_state(&self, state: &GlobalState, l: usize) -> Vec<f64> {
        let mut f = state.features();
        f.extend(self.observation(l));
        f
    }

    pub fn decode(&self, raw: &[f64]) -> Result<DecodedAction> {
        let g = &self.geometry;
        action_decode(
            raw,
            self.cfg.ues * g.ap_antenna_count,
            g.layer_count * g.atoms_per_layer,
            self.cfg.p_max_w,
        )
    }

    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<StepResult> {
        if self.done {
            return Err(SimError::EpisodeDone);
        }
        if actions.len() != self.cfg.agents {
            return Err(SimError::shape("joint action", self.cfg.agents, actions.len()));
        }
        let decoded = actions.iter().map(|a| self.decode(a)).collect::<Result<Vec<_>>>()?;
        for (l, d) in decoded.into_iter().enumerate() {
            self.power.agent_mut(l).copy_from_slice(&d.power);
            if d.phases.as_slice() != self.phases.agent_phases(l) {
                self.phases.set_agent(l, &d.phases)?;
                self.responses[l] = sim_response(&self.phases, &self.propagation, l)?;
            }
        }
        let gamma = self.current_sinr()?;
        let reward = sum_se(&spectral_efficiency(&gamma)?);
        self.last_sinr = gamma.clone();
        self.t += 1;
        self.done = self.t >= self.cfg.steps;
        Ok(StepResult {
            next_obs: self.observations(),
            shared_reward: reward,
            rewards: vec![reward; self.cfg.agents],
            sinr: gamma,
            done: self.done,
            next_state: self.state(),
        })
    }

    /// Sum SE of an arbitrary configuration on the current channel.
    pub fn evaluate(&self, phases: &PhaseConfig, power: &PowerAllocation) -> Result<f64> {
        let responses = (0..self.cfg.agents)
            .map(|l| sim_response(phases, &self.propagation, l))
            .collect::<Result<Vec<_>>>()?;
        let g = effective_gains_from_responses(&self.channel, &responses)?;
        evaluate_sum_se(&g, power, &self.noise)
    }
}

fn transmission_context(ps: &PropagationSet) -> Vec<f64> {
    let sim = ps.agent(0);
    let scale = sim
        .w_first
        .iter()
        .chain(sim.w_inter.iter().flat_map(|w| w.iter()))
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    sim.w_first
        .iter()
        .chain(sim.w_inter.iter().flat_map(|w| w.iter()))
        .flat_map(|z| [z.re * scale, z.im * scale])
        .collect()
}
