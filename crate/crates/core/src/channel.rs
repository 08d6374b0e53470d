//! Network layout, large-scale fading and equivalent SIM-to-UE channels.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::emwave::Point3;
use crate::error::{Result, SimError};
use crate::seed::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutParams {
    pub area_m: f64,
    pub ap_height_m: f64,
    pub ue_height_m: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self { area_m: 100.0, ap_height_m: 10.0, ue_height_m: 1.7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub area_m: f64,
    pub ap_positions: Vec<Point3>,
    pub ue_positions: Vec<Point3>,
    pub seed: u64,
}

impl Layout {
    pub fn aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn distance(&self, l: usize, k: usize) -> f64 {
        let (a, u) = (self.ap_positions[l], self.ue_positions[k]);
        ((a[0] - u[0]).powi(2) + (a[1] - u[1]).powi(2) + (a[2] - u[2]).powi(2)).sqrt()
    }
}

/// Centroids of the `⌈√L⌉ × ⌈√L⌉` tiling, row-major, first `L` taken.
pub fn ap_centroids(aps: usize, area: f64) -> Vec<[f64; 2]> {
    let side = (aps as f64).sqrt().ceil() as usize;
    let cell = area / side as f64;
    (0..aps)
        .map(|i| {
            let (r, c) = (i / side, i % side);
            [(r as f64 + 0.5) * cell, (c as f64 + 0.5) * cell]
        })
        .collect()
}

pub fn place_network(seed: u64, aps: usize, ues: usize, p: &LayoutParams) -> Result<Layout> {
    if !(p.area_m.is_finite() && p.area_m > 0.0) {
        return Err(SimError::InvalidConfig(format!("area must be positive, got {}", p.area_m)));
    }
    if aps == 0 || ues == 0 {
        return Err(SimError::InvalidConfig(format!(
            "need at least one AP and one UE, got L={aps} K={ues}"
        )));
    }
    let mut rng = crate::seed::rng(seed, crate::seed::tag::LAYOUT, 0);
    let ap_positions = ap_centroids(aps, p.area_m)
        .into_iter()
        .map(|[x, y]| [x, y, p.ap_height_m])
        .collect();
    let ue_positions = (0..ues)
        .map(|_| {
            let x = rng.gen_range(0.0..p.area_m);
            let y = rng.gen_range(0.0..p.area_m);
            [x, y, p.ue_height_m]
        })
        .collect();
    Ok(Layout { area_m: p.area_m, ap_positions, ue_positions, seed })
}

/// Log-distance pathloss `β_dB = intercept − slope · log10(d / 1 m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathlossModel {
    pub intercept_db: f64,
    pub slope_db: f64,
}

impl Default for PathlossModel {
    fn default() -> Self {
        Self { intercept_db: -30.5, slope_db: 36.7 }
    }
}

impl PathlossModel {
    pub fn gain_db(&self, distance_m: f64) -> f64 {
        self.intercept_db - self.slope_db * distance_m.log10()
    }
}

/// Large-scale gains `β_{l,k}` (linear), row-major `L × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LargeScale {
    pub aps: usize,
    pub ues: usize,
    pub beta: Vec<f64>,
}

impl LargeScale {
    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.beta[l * self.ues + k]
    }
}

pub fn large_scale(layout: &Layout, model: &PathlossModel) -> Result<LargeScale> {
    let (aps, ues) = (layout.aps(), layout.ues());
    let mut beta = Vec::with_capacity(aps * ues);
    for l in 0..aps {
        for k in 0..ues {
            let d = layout.distance(l, k);
            if !(d > 0.0) {
                return Err(SimError::InvalidConfig(format!("AP {l} and UE {k} coincide")));
            }
            beta.push(10f64.powf(model.gain_db(d) / 10.0));
        }
    }
    Ok(LargeScale { aps, ues, beta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ChannelMode {
    /// `ĥ = β |h|²` elementwise, real and nonnegative.
    #[serde(rename = "as-written")]
    AsWritten,
    /// `ĥ = √β h`.
    #[default]
    #[serde(rename = "rayleigh")]
    Rayleigh,
}

impl FromStr for ChannelMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(Self::AsWritten),
            "rayleigh" => Ok(Self::Rayleigh),
            other => Err(SimError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AsWritten => "as-written",
            Self::Rayleigh => "rayleigh",
        })
    }
}

/// `ĥ_{l,k} ∈ ℂ^N` for every AP/UE pair, stored `[l][k][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub aps: usize,
    pub ues: usize,
    pub atoms: usize,
    pub mode: ChannelMode,
    pub h_hat: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn vector(&self, l: usize, k: usize) -> &[Complex64] {
        let start = (l * self.ues + k) * self.atoms;
        &self.h_hat[start..start + self.atoms]
    }

    /// Applies the selected mode to given small-scale coefficients `h`.
    pub fn from_small_scale(ls: &LargeScale, atoms: usize, h: &[Complex64], mode: ChannelMode) -> Result<Self> {
        let expected = ls.aps * ls.ues * atoms;
        if h.len() != expected {
            return Err(SimError::shape("small-scale fading", expected, h.len()));
        }
        let h_hat = h
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let beta = ls.beta[i / atoms];
                match mode {
                    ChannelMode::AsWritten => Complex64::new(beta * z.norm_sqr(), 0.0),
                    ChannelMode::Rayleigh => z * beta.sqrt(),
                }
            })
            .collect();
        Ok(Self { aps: ls.aps, ues: ls.ues, atoms, mode, h_hat })
    }
}

/// One draw of `CN(0, 1)`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn sample_channel(ls: &LargeScale, atoms: usize, seed: u64, mode: ChannelMode) -> Result<ChannelRealization> {
    let mut rng: SimRng = crate::seed::rng(seed, crate::seed::tag::CHANNEL, 0);
    let h: Vec<Complex64> = (0..ls.aps * ls.ues * atoms).map(|_| complex_normal(&mut rng)).collect();
    ChannelRealization::from_small_scale(ls, atoms, &h, mode)
}
