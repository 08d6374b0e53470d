//! Wave-domain part of the model: SIM geometry, the Rayleigh-Sommerfeld
//! transmission matrices between adjacent layers, and the cascaded
//! beamforming matrix `G_l = Φ_M W_M … Φ_2 W_2 Φ_1`.
//!
//! Coordinates: the propagation axis is `+z`. The AP antenna array sits in
//! the plane `z = 0` as a centered uniform linear array along `x`. Layer `m`
//! (1-based) sits at `z = m · d_layer` as an `s × s` grid centered on the axis.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type CMatrix = DMatrix<Complex64>;
pub type Point3 = [f64; 3];

/// 28 GHz carrier.
pub const DEFAULT_WAVELENGTH_M: f64 = 10.8e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryParams {
    pub wavelength_m: f64,
    /// Total SIM thickness `T_SIM` in wavelengths; `d_layer = T_SIM / M`.
    pub thickness_wavelengths: f64,
    pub layers: usize,
    pub atoms_per_layer: usize,
    pub ap_antennas: usize,
    /// Meta-atom size `(d_x, d_y)`; `λ/2` each when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom_size_m: Option<[f64; 2]>,
    /// Grid pitch of meta-atoms and AP antennas, in wavelengths.
    pub pitch_wavelengths: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            wavelength_m: DEFAULT_WAVELENGTH_M,
            thickness_wavelengths: 5.0,
            layers: 2,
            atoms_per_layer: 9,
            ap_antennas: 2,
            atom_size_m: None,
            pitch_wavelengths: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimGeometry {
    pub wavelength_m: f64,
    pub atom_size_m: (f64, f64),
    pub layer_count: usize,
    pub atoms_per_layer: usize,
    pub grid_side: usize,
    pub layer_spacing_m: f64,
    pub ap_antenna_count: usize,
    /// `atom_positions[m][n]`, `m` 0-based (layer 1 is index 0).
    pub atom_positions: Vec<Vec<Point3>>,
    pub ap_antenna_positions: Vec<Point3>,
    pub layer_normal: Point3,
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SimError::Geometry(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn build_geometry(p: &GeometryParams) -> Result<SimGeometry> {
    positive("wavelength", p.wavelength_m)?;
    positive("SIM thickness", p.thickness_wavelengths)?;
    positive("pitch", p.pitch_wavelengths)?;
    if p.layers == 0 {
        return Err(SimError::Geometry("layer count M must be at least 1".into()));
    }
    if p.ap_antennas == 0 {
        return Err(SimError::Geometry("AP antenna count must be at least 1".into()));
    }
    let side = exact_sqrt(p.atoms_per_layer)
        .filter(|&s| s >= 1)
        .ok_or_else(|| {
            SimError::Geometry(format!(
                "atoms per layer N = {} is not a perfect square; layers are square planar arrays",
                p.atoms_per_layer
            ))
        })?;
    let lambda = p.wavelength_m;
    let (dx, dy) = match p.atom_size_m {
        Some([dx, dy]) => (dx, dy),
        None => (lambda / 2.0, lambda / 2.0),
    };
    positive("atom size d_x", dx)?;
    positive("atom size d_y", dy)?;

    let pitch = p.pitch_wavelengths * lambda;
    let spacing = p.thickness_wavelengths * lambda / p.layers as f64;
    let half = (side as f64 - 1.0) / 2.0;
    let atom_positions = (1..=p.layers)
        .map(|m| {
            let z = m as f64 * spacing;
            (0..side * side)
                .map(|n| {
                    let (r, c) = (n / side, n % side);
                    [(r as f64 - half) * pitch, (c as f64 - half) * pitch, z]
                })
                .collect()
        })
        .collect();
    let ap_half = (p.ap_antennas as f64 - 1.0) / 2.0;
    let ap_antenna_positions = (0..p.ap_antennas)
        .map(|a| [(a as f64 - ap_half) * pitch, 0.0, 0.0])
        .collect();

    Ok(SimGeometry {
        wavelength_m: lambda,
        atom_size_m: (dx, dy),
        layer_count: p.layers,
        atoms_per_layer: side * side,
        grid_side: side,
        layer_spacing_m: spacing,
        ap_antenna_count: p.ap_antennas,
        atom_positions,
        ap_antenna_positions,
        layer_normal: [0.0, 0.0, 1.0],
    })
}

/// Rayleigh-Sommerfeld coefficient between two radiating points:
/// `(d_x d_y cos χ / d) (1/(2π d) − j/λ) e^{j 2π d/λ}`, with `cos χ` the
/// axial separation over the distance.
pub fn propagation_coefficient(src: Point3, dst: Point3, geom: &SimGeometry) -> Result<Complex64> {
    let delta = [dst[0] - src[0], dst[1] - src[1], dst[2] - src[2]];
    let d = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
    if !(d > 0.0) || !d.is_finite() {
        return Err(SimError::Singular(src));
    }
    let n = geom.layer_normal;
    let axial = (delta[0] * n[0] + delta[1] * n[1] + delta[2] * n[2]).abs();
    let cos_chi = axial / d;
    let lambda = geom.wavelength_m;
    let (dx, dy) = geom.atom_size_m;
    let amplitude = dx * dy * cos_chi / d;
    let near = Complex64::new(1.0 / (TAU * d), -1.0 / lambda);
    let phase = Complex64::from_polar(1.0, TAU * d / lambda);
    Ok(near * phase * amplitude)
}

/// Fixed transmission matrices of one SIM.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTransmission {
    /// `W_{l,1}`: `N × M_AP`, AP antennas to layer 1.
    pub w_first: CMatrix,
    /// `W_{l,m}` for `m = 2..=M`: `N × N`, layer `m−1` to layer `m`.
    pub w_inter: Vec<CMatrix>,
}

impl SimTransmission {
    pub fn from_geometry(geom: &SimGeometry) -> Result<Self> {
        let n = geom.atoms_per_layer;
        let first_layer = &geom.atom_positions[0];
        let mut w_first = CMatrix::zeros(n, geom.ap_antenna_count);
        for (row, &atom) in first_layer.iter().enumerate() {
            for (col, &ant) in geom.ap_antenna_positions.iter().enumerate() {
                w_first[(row, col)] = propagation_coefficient(ant, atom, geom)?;
            }
        }
        let mut w_inter = Vec::with_capacity(geom.layer_count.saturating_sub(1));
        for pair in geom.atom_positions.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            let mut w = CMatrix::zeros(n, n);
            for (row, &dst) in next.iter().enumerate() {
                for (col, &src) in prev.iter().enumerate() {
                    w[(row, col)] = propagation_coefficient(src, dst, geom)?;
                }
            }
            w_inter.push(w);
        }
        Ok(Self { w_first, w_inter })
    }

    pub fn layers(&self) -> usize {
        self.w_inter.len() + 1
    }

    pub fn atoms(&self) -> usize {
        self.w_first.nrows()
    }

    pub fn ap_antennas(&self) -> usize {
        self.w_first.ncols()
    }
}

/// Transmission matrices for all `L` agents. Agents sharing a geometry
/// share one allocation.
#[derive(Debug, Clone)]
pub struct PropagationSet {
    agents: Vec<Arc<SimTransmission>>,
}

impl PropagationSet {
    pub fn agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, l: usize) -> &SimTransmission {
        &self.agents[l]
    }

    /// Builds one geometry per agent; an empty override slot reuses the
    /// shared geometry's matrices.
    pub fn with_overrides(
        shared: &SimGeometry,
        overrides: &[Option<SimGeometry>],
    ) -> Result<Self> {
        let base = Arc::new(SimTransmission::from_geometry(shared)?);
        let agents = overrides
            .iter()
            .map(|o| match o {
                None => Ok(Arc::clone(&base)),
                Some(g) => {
                    if g.atoms_per_layer != shared.atoms_per_layer
                        || g.layer_count != shared.layer_count
                        || g.ap_antenna_count != shared.ap_antenna_count
                    {
                        return Err(SimError::shape(
                            "per-agent geometry override",
                            format!(
                                "M={} N={} M_AP={}",
                                shared.layer_count, shared.atoms_per_layer, shared.ap_antenna_count
                            ),
                            format!("M={} N={} M_AP={}", g.layer_count, g.atoms_per_layer, g.ap_antenna_count),
                        ));
                    }
                    SimTransmission::from_geometry(g).map(Arc::new)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { agents })
    }
}

impl PartialEq for PropagationSet {
    fn eq(&self, other: &Self) -> bool {
        self.agents.len() == other.agents.len()
            && self.agents.iter().zip(&other.agents).all(|(a, b)| **a == **b)
    }
}

pub fn build_transmission_matrices(geom: &SimGeometry, agents: usize) -> Result<PropagationSet> {
    PropagationSet::with_overrides(geom, &vec![None; agents])
}

/// Phase shifts `φ_{l,m}^n ∈ [0, 2π)` for every agent, layer and atom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    agents: usize,
    layers: usize,
    atoms: usize,
    phases: Vec<f64>,
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

impl PhaseConfig {
    pub fn zeros(agents: usize, layers: usize, atoms: usize) -> Self {
        Self { agents, layers, atoms, phases: vec![0.0; agents * layers * atoms] }
    }

    pub fn from_vec(agents: usize, layers: usize, atoms: usize, phases: Vec<f64>) -> Result<Self> {
        if phases.len() != agents * layers * atoms {
            return Err(SimError::shape("phase config", agents * layers * atoms, phases.len()));
        }
        if let Some(bad) = phases.iter().find(|p| !(0.0..TAU).contains(*p)) {
            return Err(SimError::InvalidConfig(format!("phase {bad} outside [0, 2π)")));
        }
        Ok(Self { agents, layers, atoms, phases })
    }

    pub fn random<R: rand::Rng + ?Sized>(agents: usize, layers: usize, atoms: usize, rng: &mut R) -> Self {
        let phases = (0..agents * layers * atoms).map(|_| rng.gen_range(0.0..TAU)).collect();
        Self { agents, layers, atoms, phases }
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn get(&self, l: usize, m: usize, n: usize) -> f64 {
        self.phases[(l * self.layers + m) * self.atoms + n]
    }

    /// Sets one phase, wrapping it into `[0, 2π)`.
    pub fn set(&mut self, l: usize, m: usize, n: usize, phi: f64) {
        self.phases[(l * self.layers + m) * self.atoms + n] = wrap_phase(phi);
    }

    pub fn agent_phases(&self, l: usize) -> &[f64] {
        let len = self.layers * self.atoms;
        &self.phases[l * len..(l + 1) * len]
    }

    pub fn layer_phases(&self, l: usize, m: usize) -> &[f64] {
        let start = (l * self.layers + m) * self.atoms;
        &self.phases[start..start + self.atoms]
    }

    /// Replaces all of agent `l`'s phases; values are wrapped into `[0, 2π)`.
    pub fn set_agent(&mut self, l: usize, phases: &[f64]) -> Result<()> {
        let len = self.layers * self.atoms;
        if phases.len() != len {
            return Err(SimError::shape("agent phases", len, phases.len()));
        }
        for (dst, &src) in self.phases[l * len..(l + 1) * len].iter_mut().zip(phases) {
            *dst = wrap_phase(src);
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.phases
    }
}

/// `Φ_{l,m} = diag(e^{jφ_{l,m}^1}, …, e^{jφ_{l,m}^N})`, `m` 0-based.
pub fn phase_matrix(pc: &PhaseConfig, l: usize, m: usize) -> CMatrix {
    let diag: Vec<Complex64> = pc
        .layer_phases(l, m)
        .iter()
        .map(|&phi| Complex64::from_polar(1.0, phi))
        .collect();
    CMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag))
}

fn scale_rows(mat: &mut CMatrix, phases: &[f64]) {
    for (r, &phi) in phases.iter().enumerate() {
        let s = Complex64::from_polar(1.0, phi);
        mat.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
}

fn check_shapes(pc: &PhaseConfig, sim: &SimTransmission, l: usize) -> Result<()> {
    if l >= pc.agents() {
        return Err(SimError::shape("beamforming agent index", format!("< {}", pc.agents()), l));
    }
    if pc.layers() != sim.layers() || pc.atoms() != sim.atoms() {
        return Err(SimError::shape(
            "beamforming matrix",
            format!("M={} N={}", sim.layers(), sim.atoms()),
            format!("M={} N={}", pc.layers(), pc.atoms()),
        ));
    }
    Ok(())
}

/// `G_l` evaluated right to left; diagonal factors applied as row scalings.
pub fn beamforming_matrix(pc: &PhaseConfig, ps: &PropagationSet, l: usize) -> Result<CMatrix> {
    if l >= ps.agents() {
        return Err(SimError::shape("propagation agent index", format!("< {}", ps.agents()), l));
    }
    let sim = ps.agent(l);
    check_shapes(pc, sim, l)?;
    let n = sim.atoms();
    let mut g = CMatrix::identity(n, n);
    scale_rows(&mut g, pc.layer_phases(l, 0));
    for (idx, w) in sim.w_inter.iter().enumerate() {
        g = w * g;
        scale_rows(&mut g, pc.layer_phases(l, idx + 1));
    }
    Ok(g)
}

/// `G_l W_{l,1}` (`N × M_AP`), the whole wave-domain precoder of agent `l`.
/// Cheaper than forming `G_l` first: the chain is applied to `M_AP` columns.
pub fn sim_response(pc: &PhaseConfig, ps: &PropagationSet, l: usize) -> Result<CMatrix> {
    if l >= ps.agents() {
        return Err(SimError::shape("propagation agent index", format!("< {}", ps.agents()), l));
    }
    let sim = ps.agent(l);
    check_shapes(pc, sim, l)?;
    let mut v = sim.w_first.clone();
    scale_rows(&mut v, pc.layer_phases(l, 0));
    for (idx, w) in sim.w_inter.iter().enumerate() {
        v = w * v;
        scale_rows(&mut v, pc.layer_phases(l, idx + 1));
    }
    Ok(v)
}

/// Phase that maps `tanh`-squashed raw actions into `[0, 2π)`.
pub fn squash_phase(raw: f64) -> f64 {
    wrap_phase(PI * (raw.tanh() + 1.0))
}
