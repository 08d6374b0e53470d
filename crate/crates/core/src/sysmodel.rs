//! Downlink objective: effective gains, SINR, per-UE spectral efficiency,
//! sum SE and the per-AP power-budget projection.

use num_complex::Complex64;

use crate::channel::ChannelRealization;
use crate::emwave::CMatrix;
use crate::error::{Result, SimError};

/// Converts dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Per-antenna amplitudes `p_{l,k,a} ≥ 0`, stored `[l][k][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    pub aps: usize,
    pub ues: usize,
    pub antennas: usize,
    pub amp: Vec<f64>,
}

impl PowerAllocation {
    pub fn zeros(aps: usize, ues: usize, antennas: usize) -> Self {
        Self { aps, ues, antennas, amp: vec![0.0; aps * ues * antennas] }
    }

    pub fn from_vec(aps: usize, ues: usize, antennas: usize, amp: Vec<f64>) -> Result<Self> {
        if amp.len() != aps * ues * antennas {
            return Err(SimError::shape("power allocation", aps * ues * antennas, amp.len()));
        }
        Ok(Self { aps, ues, antennas, amp })
    }

    /// Every UE gets `P_max / K`, split evenly over the antennas.
    pub fn uniform(aps: usize, ues: usize, antennas: usize, p_max: &[f64]) -> Self {
        let mut amp = Vec::with_capacity(aps * ues * antennas);
        for &budget in p_max.iter().take(aps) {
            let a = (budget / (ues * antennas) as f64).sqrt();
            amp.extend(std::iter::repeat(a).take(ues * antennas));
        }
        Self { aps, ues, antennas, amp }
    }

    pub fn vector(&self, l: usize, k: usize) -> &[f64] {
        let start = (l * self.ues + k) * self.antennas;
        &self.amp[start..start + self.antennas]
    }

    pub fn agent(&self, l: usize) -> &[f64] {
        let len = self.ues * self.antennas;
        &self.amp[l * len..(l + 1) * len]
    }

    pub fn agent_mut(&mut self, l: usize) -> &mut [f64] {
        let len = self.ues * self.antennas;
        &mut self.amp[l * len..(l + 1) * len]
    }

    /// `Σ_k ‖p_{l,k}‖²` for AP `l`.
    pub fn ap_power(&self, l: usize) -> f64 {
        self.agent(l).iter().map(|a| a * a).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma2: f64,
}

impl NoiseModel {
    pub fn new(sigma2: f64) -> Result<Self> {
        if sigma2.is_finite() && sigma2 > 0.0 {
            Ok(Self { sigma2 })
        } else {
            Err(SimError::InvalidConfig(format!("noise power must be positive, got {sigma2}")))
        }
    }
}

/// `g_{l,k} = ĥ_{l,k}^H G_l W_{l,1}`, stored `[l][k][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveGains {
    pub aps: usize,
    pub ues: usize,
    pub antennas: usize,
    pub g: Vec<Complex64>,
}

impl EffectiveGains {
    pub fn row(&self, l: usize, k: usize) -> &[Complex64] {
        let start = (l * self.ues + k) * self.antennas;
        &self.g[start..start + self.antennas]
    }

    /// `‖g_{l,k}‖²`.
    pub fn power_gain(&self, l: usize, k: usize) -> f64 {
        self.row(l, k).iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Gains from precomputed per-agent responses `G_l W_{l,1}` (`N × M_AP`).
pub fn effective_gains_from_responses(h: &ChannelRealization, responses: &[CMatrix]) -> Result<EffectiveGains> {
    if responses.len() != h.aps {
        return Err(SimError::shape("effective gains agents", h.aps, responses.len()));
    }
    let antennas = responses.first().map_or(0, |r| r.ncols());
    let mut g = Vec::with_capacity(h.aps * h.ues * antennas);
    for (l, resp) in responses.iter().enumerate() {
        if resp.nrows() != h.atoms || resp.ncols() != antennas {
            return Err(SimError::shape(
                "SIM response",
                format!("{}x{}", h.atoms, antennas),
                format!("{}x{}", resp.nrows(), resp.ncols()),
            ));
        }
        for k in 0..h.ues {
            let hv = h.vector(l, k);
            for a in 0..antennas {
                let col = resp.column(a);
                let acc: Complex64 = hv.iter().zip(col.iter()).map(|(x, y)| x.conj() * y).sum();
                g.push(acc);
            }
        }
    }
    Ok(EffectiveGains { aps: h.aps, ues: h.ues, antennas, g })
}

/// Gains from the cascaded matrices `G_l` and feeds `W_{l,1}`.
pub fn effective_gains(h: &ChannelRealization, g_mats: &[CMatrix], w_first: &[&CMatrix]) -> Result<EffectiveGains> {
    if g_mats.len() != w_first.len() {
        return Err(SimError::shape("effective gains inputs", g_mats.len(), w_first.len()));
    }
    let responses = g_mats
        .iter()
        .zip(w_first)
        .map(|(g, w)| {
            if g.ncols() != w.nrows() {
                return Err(SimError::shape("G_l · W_l1", g.ncols(), w.nrows()));
            }
            Ok(g * *w)
        })
        .collect::<Result<Vec<_>>>()?;
    effective_gains_from_responses(h, &responses)
}

fn check_power_shape(g: &EffectiveGains, pa: &PowerAllocation) -> Result<()> {
    if (g.aps, g.ues, g.antennas) != (pa.aps, pa.ues, pa.antennas) {
        return Err(SimError::shape(
            "SINR inputs",
            format!("{}x{}x{}", g.aps, g.ues, g.antennas),
            format!("{}x{}x{}", pa.aps, pa.ues, pa.antennas),
        ));
    }
    Ok(())
}

/// `γ_k = |Σ_l g_{l,k} p_{l,k}|² / (Σ_{j≠k} |Σ_l g_{l,k} p_{l,j}|² + σ²)`.
///
/// The interference term pairs UE k's own channel with every other UE's
/// power vector.
pub fn sinr(g: &EffectiveGains, pa: &PowerAllocation, noise: &NoiseModel) -> Result<Vec<f64>> {
    check_power_shape(g, pa)?;
    let mut out = Vec::with_capacity(g.ues);
    for k in 0..g.ues {
        let mut signal = 0.0;
        let mut interference = 0.0;
        for j in 0..g.ues {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in 0..g.aps {
                for (gk, pj) in g.row(l, k).iter().zip(pa.vector(l, j)) {
                    acc += gk * pj;
                }
            }
            if j == k {
                signal = acc.norm_sqr();
            } else {
                interference += acc.norm_sqr();
            }
        }
        out.push(signal / (interference + noise.sigma2));
    }
    Ok(out)
}

pub fn spectral_efficiency(sinr: &[f64]) -> Result<Vec<f64>> {
    sinr.iter()
        .map(|&g| {
            if g < 0.0 || g.is_nan() {
                Err(SimError::NegativeSinr(g))
            } else {
                Ok((1.0 + g).log2())
            }
        })
        .collect()
}

pub fn sum_se(rates: &[f64]) -> f64 {
    rates.iter().sum()
}

/// Sum SE of a configuration in one call.
pub fn evaluate_sum_se(g: &EffectiveGains, pa: &PowerAllocation, noise: &NoiseModel) -> Result<f64> {
    Ok(sum_se(&spectral_efficiency(&sinr(g, pa, noise)?)?))
}

/// Clips negatives to zero, then scales each AP onto its budget when over it.
pub fn project_power(raw: &PowerAllocation, p_max: &[f64]) -> Result<PowerAllocation> {
    if p_max.len() != raw.aps {
        return Err(SimError::shape("power budgets", raw.aps, p_max.len()));
    }
    let mut out = raw.clone();
    for v in out.amp.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    for (l, &budget) in p_max.iter().enumerate() {
        let total = out.ap_power(l);
        if total > budget {
            let original: Vec<f64> = out.agent(l).to_vec();
            let mut scale = (budget / total).sqrt();
            // shrink by ulps until rounding lands inside the budget, so a
            // second projection is a no-op
            loop {
                for (dst, src) in out.agent_mut(l).iter_mut().zip(&original) {
                    *dst = src * scale;
                }
                if out.ap_power(l) <= budget {
                    break;
                }
                scale *= 1.0 - f64::EPSILON;
            }
        }
    }
    Ok(out)
}
