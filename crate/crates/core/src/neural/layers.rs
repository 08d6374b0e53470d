//! Dense layers, a gated recurrent cell, the shared recurrent Gaussian actor
//! and the centralized critic.

use std::f64::consts::{E, PI};

use rand::Rng;

use super::params::{orthogonal, ParameterSet};
use super::tape::{Tape, Tensor, Var};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    w: usize,
    b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), orthogonal(in_dim, out_dim, gain, rng));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let h = tape.matmul(x, vars[self.w]);
        tape.add_row(h, vars[self.b])
    }
}

/// Gated recurrent cell:
/// `r = σ(x W_r + h U_r + b_r)`, `z = σ(x W_z + h U_z + b_z)`,
/// `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    w_r: usize,
    w_z: usize,
    w_n: usize,
    u_r: usize,
    u_z: usize,
    u_n: usize,
    b_r: usize,
    b_z: usize,
    b_n: usize,
    c_n: usize,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParameterSet, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = |ps: &mut ParameterSet, tag: &str, rows: usize| {
            ps.add(format!("{name}.{tag}"), orthogonal(rows, hidden, 1.0, rng))
        };
        let w_r = w(ps, "w_r", in_dim);
        let w_z = w(ps, "w_z", in_dim);
        let w_n = w(ps, "w_n", in_dim);
        let u_r = w(ps, "u_r", hidden);
        let u_z = w(ps, "u_z", hidden);
        let u_n = w(ps, "u_n", hidden);
        let b_r = ps.add(format!("{name}.b_r"), Tensor::zeros(1, hidden));
        let b_z = ps.add(format!("{name}.b_z"), Tensor::zeros(1, hidden));
        let b_n = ps.add(format!("{name}.b_n"), Tensor::zeros(1, hidden));
        let c_n = ps.add(format!("{name}.c_n"), Tensor::zeros(1, hidden));
        Self { w_r, w_z, w_n, u_r, u_z, u_n, b_r, b_z, b_n, c_n, in_dim, hidden }
    }

    fn gate(&self, tape: &mut Tape, vars: &[Var], x: Var, h: Var, w: usize, u: usize, b: usize) -> Var {
        let xi = tape.matmul(x, vars[w]);
        let hh = tape.matmul(h, vars[u]);
        let s = tape.add(xi, hh);
        let s = tape.add_row(s, vars[b]);
        tape.sigmoid(s)
    }

    pub fn step(&self, tape: &mut Tape, vars: &[Var], x: Var, h: Var) -> Var {
        let r = self.gate(tape, vars, x, h, self.w_r, self.u_r, self.b_r);
        let z = self.gate(tape, vars, x, h, self.w_z, self.u_z, self.b_z);
        let xn = tape.matmul(x, vars[self.w_n]);
        let xn = tape.add_row(xn, vars[self.b_n]);
        let hn = tape.matmul(h, vars[self.u_n]);
        let hn = tape.add_row(hn, vars[self.c_n]);
        let rhn = tape.mul(r, hn);
        let pre = tape.add(xn, rhn);
        let n = tape.tanh(pre);
        // (1 − z) ⊙ n + z ⊙ h = n + z ⊙ (h − n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
    pub recurrent: bool,
    pub init_log_std: f64,
}

/// Shared actor: `dense → tanh → gated cell → dense` mean head, with a
/// state-independent learned log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorNet {
    pub spec: ActorSpec,
    pub params: ParameterSet,
    enc: Dense,
    gru: Option<GruCell>,
    head: Dense,
    log_std: usize,
}

pub struct ActorOutput {
    pub means: Vec<Var>,
    pub log_std: Var,
    pub hidden: Var,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(spec: ActorSpec, rng: &mut R) -> Self {
        let mut params = ParameterSet::new();
        let enc = Dense::new(&mut params, "actor.enc", spec.obs_dim, spec.hidden, 2f64.sqrt(), rng);
        let gru = spec.recurrent.then(|| GruCell::new(&mut params, "actor.gru", spec.hidden, spec.hidden, rng));
        let head = Dense::new(&mut params, "actor.head", spec.hidden, spec.act_dim, 0.01, rng);
        let log_std = params.add("actor.log_std", Tensor::row(vec![spec.init_log_std; spec.act_dim]));
        Self { spec, params, enc, gru, head, log_std }
    }

    pub fn initial_hidden(&self, batch: usize) -> Tensor {
        Tensor::zeros(batch, self.spec.hidden)
    }

    pub fn log_std(&self) -> &[f64] {
        self.params.tensor(self.log_std).data()
    }

    /// Runs a sequence of `[B, obs]` inputs from hidden state `h0`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], obs_seq: &[Var], h0: Var) -> ActorOutput {
        let mut h = h0;
        let mut means = Vec::with_capacity(obs_seq.len());
        for &x in obs_seq {
            let e = self.enc.forward(tape, vars, x);
            let e = tape.tanh(e);
            let feat = match &self.gru {
                Some(cell) => {
                    h = cell.step(tape, vars, e, h);
                    h
                }
                None => e,
            };
            means.push(self.head.forward(tape, vars, feat));
        }
        ActorOutput { means, log_std: vars[self.log_std], hidden: h }
    }

    fn check_inputs(&self, obs_seq: &[Tensor], h0: &Tensor) -> Result<()> {
        let batch = h0.rows();
        if h0.cols() != self.spec.hidden {
            return Err(SimError::shape("recurrent state", self.spec.hidden, h0.cols()));
        }
        for o in obs_seq {
            if o.cols() != self.spec.obs_dim || o.rows() != batch {
                return Err(SimError::shape(
                    "policy observation",
                    format!("{batch}x{}", self.spec.obs_dim),
                    format!("{}x{}", o.rows(), o.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Inference pass: per-step means, the log std row and the final hidden state.
    pub fn policy_forward(&self, obs_seq: &[Tensor], h0: &Tensor) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
        self.check_inputs(obs_seq, h0)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xs: Vec<Var> = obs_seq.iter().map(|o| tape.constant(o.clone())).collect();
        let h = tape.constant(h0.clone());
        let out = self.forward_tape(&mut tape, &vars, &xs, h);
        Ok((
            out.means.iter().map(|&m| tape.value(m).clone()).collect(),
            tape.value(out.log_std).clone(),
            tape.value(out.hidden).clone(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticSpec {
    pub in_dim: usize,
    pub hidden: usize,
}

/// Centralized value network `dense → tanh → dense → tanh → dense(1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub spec: CriticSpec,
    pub params: ParameterSet,
    l1: Dense,
    l2: Dense,
    out: Dense,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(spec: CriticSpec, rng: &mut R) -> Self {
        let mut params = ParameterSet::new();
        let l1 = Dense::new(&mut params, "critic.l1", spec.in_dim, spec.hidden, 2f64.sqrt(), rng);
        let l2 = Dense::new(&mut params, "critic.l2", spec.hidden, spec.hidden, 2f64.sqrt(), rng);
        let out = Dense::new(&mut params, "critic.out", spec.hidden, 1, 1.0, rng);
        Self { spec, params, l1, l2, out }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let h = self.l1.forward(tape, vars, x);
        let h = tape.tanh(h);
        let h = self.l2.forward(tape, vars, h);
        let h = tape.tanh(h);
        self.out.forward(tape, vars, h)
    }

    /// One value per input row.
    pub fn value_forward(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        if inputs.cols() != self.spec.in_dim {
            return Err(SimError::shape("critic input", self.spec.in_dim, inputs.cols()));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let v = self.forward_tape(&mut tape, &vars, x);
        Ok(tape.value(v).data().to_vec())
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian log-density per row: `[B, D]` actions → `[B, 1]`.
pub fn gaussian_log_prob(tape: &mut Tape, actions: Var, mean: Var, log_std: Var) -> Var {
    let dim = tape.shape(mean).1 as f64;
    let diff = tape.sub(actions, mean);
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let z = tape.mul_row(diff, inv_std);
    let z2 = tape.square(z);
    let quad = tape.sum_cols(z2);
    let quad = tape.scale(quad, -0.5);
    let ls = tape.sum_all(log_std);
    let ls = tape.scale(ls, -1.0);
    let lp = tape.add_row(quad, ls);
    tape.add_scalar(lp, -dim * HALF_LN_2PI)
}

/// Entropy of the diagonal Gaussian, `Σ_d (½ ln(2πe) + ln σ_d)`, as `[1, 1]`.
pub fn gaussian_entropy(tape: &mut Tape, log_std: Var) -> Var {
    let dim = tape.shape(log_std).1 as f64;
    let s = tape.sum_all(log_std);
    tape.add_scalar(s, dim * 0.5 * (2.0 * PI * E).ln())
}

pub fn gaussian_log_prob_scalar(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy_scalar(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 * (2.0 * PI * E).ln() + ls).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(recurrent: bool) -> ActorSpec {
        ActorSpec { obs_dim: 5, act_dim: 3, hidden: 6, recurrent, init_log_std: -0.5 }
    }

    fn random_obs(rng: &mut ChaCha8Rng, t: usize, b: usize, d: usize) -> Vec<Tensor> {
        (0..t)
            .map(|_| Tensor::new(b, d, (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut actor = ActorNet::new(spec(true), &mut rng);
        let n = actor.params.flat_len();
        actor.params.set_flat(&vec![0.0; n]).unwrap();
        let obs = random_obs(&mut rng, 3, 2, 5);
        let (means, _, _) = actor.policy_forward(&obs, &actor.initial_hidden(2)).unwrap();
        assert!(means.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stepwise_equals_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = ActorNet::new(spec(true), &mut rng);
        let obs = random_obs(&mut rng, 6, 3, 5);
        let (seq_means, _, seq_h) = actor.policy_forward(&obs, &actor.initial_hidden(3)).unwrap();
        let mut h = actor.initial_hidden(3);
        for (t, o) in obs.iter().enumerate() {
            let (m, _, h2) = actor.policy_forward(std::slice::from_ref(o), &h).unwrap();
            for (a, b) in m[0].data().iter().zip(seq_means[t].data()) {
                assert!((a - b).abs() < 1e-12);
            }
            h = h2;
        }
        for (a, b) in h.data().iter().zip(seq_h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_state_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = ActorNet::new(spec(true), &mut rng);
        let obs = random_obs(&mut rng, 2, 1, 5);
        let (_, _, h1) = actor.policy_forward(&obs[..1], &actor.initial_hidden(1)).unwrap();
        let (_, _, h2) = actor.policy_forward(&obs[1..], &h1).unwrap();
        assert_ne!(h1, h2);
        assert!(h1.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bypassed_cell_keeps_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = ActorNet::new(spec(false), &mut rng);
        let obs = random_obs(&mut rng, 2, 1, 5);
        let h0 = actor.initial_hidden(1);
        let (_, _, h) = actor.policy_forward(&obs, &h0).unwrap();
        assert_eq!(h, h0);
    }

    #[test]
    fn actor_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let actor = ActorNet::new(spec(true), &mut rng);
        let obs = random_obs(&mut rng, 1, 2, 4);
        assert!(actor.policy_forward(&obs, &actor.initial_hidden(2)).is_err());
        let obs = random_obs(&mut rng, 1, 2, 5);
        assert!(actor.policy_forward(&obs, &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn critic_zero_and_linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut critic = CriticNet::new(CriticSpec { in_dim: 4, hidden: 8 }, &mut rng);
        let x = Tensor::new(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let n = critic.params.flat_len();
        critic.params.set_flat(&vec![0.0; n]).unwrap();
        assert_eq!(critic.value_forward(&x).unwrap(), vec![0.0, 0.0]);
        assert!(critic.value_forward(&Tensor::zeros(1, 3)).is_err());

        // a single dense layer against a hand dot product
        let mut ps = ParameterSet::new();
        let layer = Dense::new(&mut ps, "lin", 4, 1, 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = ps.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &vars, xv);
        let w = ps.by_name("lin.weight").unwrap();
        for r in 0..2 {
            let manual: f64 = (0..4).map(|i| x.get(r, i) * w.get(i, 0)).sum();
            assert!((tape.value(y).get(r, 0) - manual).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_changes_critic_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let critic = CriticNet::new(CriticSpec { in_dim: 5, hidden: 8 }, &mut rng);
        let x = Tensor::new(2, 5, vec![0.3, 0.1, -0.2, 0.9, -0.4, 0.3, 0.1, -0.2, 0.2, 0.7]).unwrap();
        let v = critic.value_forward(&x).unwrap();
        assert_ne!(v[0], v[1]);
    }

    #[test]
    fn gaussian_identities() {
        let mut tape = Tape::new();
        let ls = vec![-0.3, 0.2, 0.0];
        let lsv = tape.constant(Tensor::row(ls.clone()));
        let h = gaussian_entropy(&mut tape, lsv);
        let expect: f64 = ls.iter().map(|l| 0.5 * (2.0 * PI * E).ln() + l).sum();
        assert!((tape.value(h).item() - expect).abs() < 1e-14);
        assert!((gaussian_entropy_scalar(&ls) - expect).abs() < 1e-14);

        let a = Tensor::new(2, 3, vec![0.1, -0.2, 0.5, 1.0, 0.0, -1.0]).unwrap();
        let m = Tensor::new(2, 3, vec![0.0, 0.3, 0.2, 0.4, -0.1, 0.0]).unwrap();
        let av = tape.constant(a.clone());
        let mv = tape.constant(m.clone());
        let lp = gaussian_log_prob(&mut tape, av, mv, lsv);
        for r in 0..2 {
            let s = gaussian_log_prob_scalar(a.row_slice(r), m.row_slice(r), &ls);
            assert!((tape.value(lp).get(r, 0) - s).abs() < 1e-13);
        }
    }
}
