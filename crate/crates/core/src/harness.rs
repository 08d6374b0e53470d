//! Experiment configuration, presets, and the train / baseline / sweep /
//! eval runners behind the command-line tool.
//!
//! Every runner writes plain files: a TOML config snapshot, tidy CSV tables
//! and JSON summaries. Metrics CSV columns are
//! `method,episode,mean_reward,sum_se_eval,actor_loss,critic_loss,entropy,ratio_clip_fraction,dropped_samples`;
//! sweep CSV columns are `axis_value,method,seed,sum_se`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{codebook_search_env, Codebook};
use crate::channel::{ChannelMode, LayoutParams, PathlossModel};
use crate::emwave::{build_geometry, GeometryParams};
use crate::env::{EnvConfig, SimEnv};
use crate::error::{Result, SimError};
use crate::marl::{self, actor_from_checkpoint, eval_channel_seeds, evaluate_policy, EpisodeMetrics, Hyperparams};
use crate::neural::Checkpoint;
use crate::sysmodel::dbm_to_watts;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const BASELINE_SUMMARY_FILE: &str = "baseline_summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const BASELINE_METHOD: &str = "codebook_wf";

/// Episodes per reward window in the training summary.
pub const REWARD_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            other => Err(SimError::InvalidConfig(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub aps: usize,
    pub ues: usize,
    pub area_m: f64,
    pub ap_height_m: f64,
    pub ue_height_m: f64,
    pub p_max_dbm: f64,
    pub noise_dbm: f64,
    pub pathloss_intercept_db: f64,
    pub pathloss_slope_db: f64,
    pub channel_mode: ChannelMode,
    pub steps: usize,
    /// Redraw UE positions every episode instead of fixing them by the run seed.
    pub resample_layout: bool,
    pub include_transmission_context: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let layout = LayoutParams::default();
        let pl = PathlossModel::default();
        Self {
            aps: 2,
            ues: 2,
            area_m: layout.area_m,
            ap_height_m: layout.ap_height_m,
            ue_height_m: layout.ue_height_m,
            p_max_dbm: 3.0,
            noise_dbm: -96.0,
            pathloss_intercept_db: pl.intercept_db,
            pathloss_slope_db: pl.slope_db,
            channel_mode: ChannelMode::Rayleigh,
            steps: 20,
            resample_layout: false,
            include_transmission_context: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub codebook_size: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { codebook_size: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of consecutive seeds (`seed`, `seed + 1`, …) used by sweeps.
    pub seeds: usize,
    pub output_dir: PathBuf,
    pub system: SystemConfig,
    pub geometry: GeometryParams,
    pub marl: Hyperparams,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// The per-step reward depends only on the current action, so a short
/// horizon trains much faster than the generic default.
fn tuned_desk_marl() -> Hyperparams {
    Hyperparams { episodes: 3000, gamma: 0.1, entropy_coef: 0.0, ..Hyperparams::default() }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                seed: 0,
                seeds: 3,
                output_dir: PathBuf::from("runs/desk"),
                system: SystemConfig::default(),
                geometry: GeometryParams::default(),
                marl: tuned_desk_marl(),
                baseline: BaselineConfig::default(),
            },
            Preset::Full => Self {
                seed: 0,
                seeds: 3,
                output_dir: PathBuf::from("runs/full"),
                system: SystemConfig { aps: 8, ues: 4, ..SystemConfig::default() },
                geometry: GeometryParams { layers: 4, atoms_per_layer: 64, ..GeometryParams::default() },
                marl: Hyperparams { episodes: 250, ..Hyperparams::default() },
                baseline: BaselineConfig::default(),
            },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SimError::InvalidConfig(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if s.aps == 0 {
            return bad("system.aps must be at least 1".into());
        }
        if s.ues == 0 {
            return bad("system.ues must be at least 1".into());
        }
        if s.steps == 0 {
            return bad("system.steps must be at least 1".into());
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        for (name, v) in [("system.area_m", s.area_m), ("system.ap_height_m", s.ap_height_m)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(s.ue_height_m.is_finite() && s.ue_height_m >= 0.0) {
            return bad(format!("system.ue_height_m must be >= 0, got {}", s.ue_height_m));
        }
        for (name, v) in [
            ("system.p_max_dbm", s.p_max_dbm),
            ("system.noise_dbm", s.noise_dbm),
            ("system.pathloss_intercept_db", s.pathloss_intercept_db),
            ("system.pathloss_slope_db", s.pathloss_slope_db),
        ] {
            if !v.is_finite() || v.abs() > 400.0 {
                return bad(format!("{name} must be finite and within ±400, got {v}"));
            }
        }
        if self.baseline.codebook_size == 0 {
            return bad("baseline.codebook_size must be at least 1".into());
        }
        build_geometry(&self.geometry).map_err(|e| SimError::InvalidConfig(format!("geometry: {e}")))?;
        self.marl.validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        self.env_config_for_seed(self.seed)
    }

    /// The UE layout is fixed by `seed` unless `system.resample_layout` is set.
    pub fn env_config_for_seed(&self, seed: u64) -> EnvConfig {
        let s = &self.system;
        EnvConfig {
            agents: s.aps,
            ues: s.ues,
            geometry: self.geometry.clone(),
            layout: LayoutParams { area_m: s.area_m, ap_height_m: s.ap_height_m, ue_height_m: s.ue_height_m },
            pathloss: PathlossModel { intercept_db: s.pathloss_intercept_db, slope_db: s.pathloss_slope_db },
            channel_mode: s.channel_mode,
            p_max_w: dbm_to_watts(s.p_max_dbm),
            sigma2_w: dbm_to_watts(s.noise_dbm),
            steps: s.steps,
            resample_layout: s.resample_layout,
            layout_seed: seed,
            include_transmission_context: s.include_transmission_context,
        }
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 9] = [
    "method",
    "episode",
    "mean_reward",
    "sum_se_eval",
    "actor_loss",
    "critic_loss",
    "entropy",
    "ratio_clip_fraction",
    "dropped_samples",
];

pub fn write_metrics(path: &Path, rows: &[EpisodeMetrics]) -> Result<()> {
    write_csv(path, rows, &METRICS_HEADER)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = marl::mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: String,
    pub seed: u64,
    pub episodes: usize,
    pub eval_channels: usize,
    pub final_sum_se: f64,
    pub final_sum_se_std: f64,
    pub reward_window: usize,
    pub mean_reward_first_window: f64,
    pub mean_reward_last_window: f64,
}

fn reward_windows(metrics: &[EpisodeMetrics]) -> (usize, f64, f64) {
    let w = REWARD_WINDOW.min(metrics.len());
    let rewards: Vec<f64> = metrics.iter().map(|m| m.mean_reward).collect();
    (w, marl::mean(&rewards[..w]), marl::mean(&rewards[rewards.len() - w..]))
}

/// Trains and writes the config snapshot, metrics CSV, checkpoint and summary.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    let result = marl::train_with(&cfg.env_config(), &cfg.marl, cfg.seed, |m| {
        if m.episode % 10 == 0 {
            log::info!("episode {:>4}  reward {:.4}  eval sum SE {:.4}", m.episode, m.mean_reward, m.sum_se_eval);
        }
    });
    let result = match result {
        Ok(r) => r,
        Err(e @ SimError::Diverged(_)) => {
            fs::write(out.join("divergence.txt"), format!("{e}\n"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    write_metrics(&out.join(METRICS_FILE), &result.metrics)?;
    result.checkpoint(cfg.seed).save(&out.join(CHECKPOINT_FILE))?;
    let (w, first, last) = reward_windows(&result.metrics);
    let summary = TrainSummary {
        method: cfg.marl.method_label().to_string(),
        seed: cfg.seed,
        episodes: cfg.marl.episodes,
        eval_channels: result.final_eval.len(),
        final_sum_se: marl::mean(&result.final_eval),
        final_sum_se_std: std_dev(&result.final_eval),
        reward_window: w,
        mean_reward_first_window: first,
        mean_reward_last_window: last,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Best-of-codebook sum SE with water-filling power on each held-out channel.
pub fn baseline_sum_se(cfg: &ExperimentConfig, seed: u64, codebook_size: usize) -> Result<Vec<f64>> {
    let mut env = SimEnv::new(cfg.env_config_for_seed(seed))?;
    let g = env.geometry().clone();
    let cb = Codebook::generate(codebook_size, cfg.system.aps, g.layer_count, g.atoms_per_layer, seed);
    let mut out = Vec::with_capacity(cfg.marl.eval_channels);
    for s in eval_channel_seeds(seed, cfg.marl.eval_channels) {
        env.reset(s)?;
        out.push(codebook_search_env(&env, &cb)?.sum_se);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub method: String,
    pub seed: u64,
    pub codebook_size: usize,
    pub channels: usize,
    pub mean_sum_se: f64,
    pub std_sum_se: f64,
}

/// One metrics-schema row per held-out channel, tagged `codebook_wf`; the
/// loss columns are zero.
pub fn run_baseline(cfg: &ExperimentConfig, out: &Path) -> Result<BaselineSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let per_channel = baseline_sum_se(cfg, cfg.seed, cfg.baseline.codebook_size)?;
    let rows: Vec<EpisodeMetrics> = per_channel
        .iter()
        .enumerate()
        .map(|(i, &se)| EpisodeMetrics {
            method: BASELINE_METHOD.to_string(),
            episode: i,
            mean_reward: se,
            sum_se_eval: se,
            actor_loss: 0.0,
            critic_loss: 0.0,
            entropy: 0.0,
            ratio_clip_fraction: 0.0,
            dropped_samples: 0,
        })
        .collect();
    write_metrics(&out.join(BASELINE_FILE), &rows)?;
    let summary = BaselineSummary {
        method: BASELINE_METHOD.to_string(),
        seed: cfg.seed,
        codebook_size: cfg.baseline.codebook_size,
        channels: per_channel.len(),
        mean_sum_se: marl::mean(&per_channel),
        std_sum_se: std_dev(&per_channel),
    };
    write_json(&out.join(BASELINE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Layers,
    Atoms,
}

impl FromStr for SweepAxis {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" | "M" => Ok(Self::Layers),
            "atoms" | "N" => Ok(Self::Atoms),
            other => Err(SimError::InvalidConfig(format!("unknown sweep axis `{other}` (expected layers or atoms)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: usize,
    pub method: String,
    pub seed: u64,
    pub sum_se: f64,
}

/// Methods a sweep can run: the codebook baseline or a trained policy.
pub fn check_method(name: &str) -> Result<()> {
    match name {
        BASELINE_METHOD | "nvr_mappo" | "mappo" => Ok(()),
        other => Err(SimError::InvalidConfig(format!(
            "unknown method `{other}` (expected {BASELINE_METHOD}, nvr_mappo or mappo)"
        ))),
    }
}

fn with_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Layers => c.geometry.layers = value,
        SweepAxis::Atoms => c.geometry.atoms_per_layer = value,
    }
    c
}

/// Sum SE per `(axis value, method, seed)`. Every axis value uses the same
/// seeds; all configurations are validated before anything runs.
pub fn sweep_rows(cfg: &ExperimentConfig, axis: SweepAxis, values: &[usize], methods: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(SimError::InvalidConfig("sweep needs at least one axis value".into()));
    }
    for m in methods {
        check_method(m)?;
    }
    let configs = values
        .iter()
        .map(|&v| {
            let c = with_axis(cfg, axis, v);
            c.validate().map_err(|e| SimError::InvalidConfig(format!("sweep value {v}: {e}")))?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (v, c) in &configs {
        for method in methods {
            for seed in c.run_seeds() {
                let sum_se = if method == BASELINE_METHOD {
                    marl::mean(&baseline_sum_se(c, seed, c.baseline.codebook_size)?)
                } else {
                    let mut hp = c.marl.clone();
                    if method == "mappo" {
                        hp.noise_alpha = 0.0;
                        hp.recurrent = false;
                    }
                    let out = marl::train(&c.env_config_for_seed(seed), &hp, seed)?;
                    marl::mean(&out.final_eval)
                };
                log::info!("sweep {axis:?}={v} {method} seed {seed}: sum SE {sum_se:.4}");
                rows.push(SweepRow { axis_value: *v, method: method.clone(), seed, sum_se });
            }
        }
    }
    Ok(rows)
}

pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    methods: &[String],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let rows = sweep_rows(cfg, axis, values, methods)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    write_csv(&out.join(SWEEP_FILE), &rows, &["axis_value", "method", "seed", "sum_se"])?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub episodes: usize,
    pub mean_sum_se: Option<f64>,
    pub std_sum_se: Option<f64>,
    pub per_channel: Vec<f64>,
}

/// Mean-action rollouts of a checkpointed actor on `episodes` held-out
/// channels. Only actor tensors are read.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint, episodes: usize) -> Result<EvalReport> {
    cfg.validate()?;
    let env_cfg = cfg.env_config();
    let actor = actor_from_checkpoint(ck, env_cfg.obs_dim(), env_cfg.action_dim())?;
    if episodes == 0 {
        log::warn!("evaluation requested on zero episodes; writing an empty report");
        return Ok(EvalReport { seed: cfg.seed, episodes: 0, mean_sum_se: None, std_sum_se: None, per_channel: vec![] });
    }
    let mut env = SimEnv::new(env_cfg)?;
    let per_channel = evaluate_policy(&mut env, &actor, &eval_channel_seeds(cfg.seed, episodes))?;
    Ok(EvalReport {
        seed: cfg.seed,
        episodes,
        mean_sum_se: Some(marl::mean(&per_channel)),
        std_sum_se: Some(std_dev(&per_channel)),
        per_channel,
    })
}

pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, episodes: usize, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)
        .map_err(|e| SimError::Checkpoint(format!("{}: {e}", checkpoint.display())))?;
    let report = evaluate_checkpoint(cfg, &ck, episodes)?;
    fs::create_dir_all(out)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    Ok(report)
}
