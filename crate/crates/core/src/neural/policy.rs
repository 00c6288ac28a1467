//! Recurrent actor-critic with a shared trunk.
//!
//! ```text
//! state (4) -> linear -> leaky ReLU -> GRU -> h
//!                                           |-> linear -> mu   (pre-sigmoid action mean)
//!                                           |-> linear -> value
//! log_std: one learnable scalar on the pre-sigmoid action
//! ```
//!
//! Row-vector convention throughout: inputs are `batch x features`, weights
//! are `in x out`, so a layer computes `x W + b`. The GRU uses
//!
//! ```text
//! z  = sigmoid(x W_z + h U_z + b_z)
//! r  = sigmoid(x W_r + h U_r + b_r)
//! n  = tanh(x W_n + r * (h U_n + b_n))
//! h' = (1 - z) * n + z * h
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::{sigmoid, Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor2;
use crate::env::{StateVector, STATE_DIM};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Action means are kept in `[EPS, 1 - EPS]` so log-probs stay finite.
pub const ACTION_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub input_dim: usize,
    pub trunk_dim: usize,
    pub hidden_dim: usize,
    pub log_std_init: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            input_dim: STATE_DIM,
            trunk_dim: 64,
            hidden_dim: 64,
            log_std_init: -1.0,
            seed: 0,
        }
    }
}

/// Parameter ids of one GRU cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruIds {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
}

/// Tensor names in checkpoint order, with their shapes as functions of
/// (input, trunk, hidden).
const LAYOUT: [&str; 16] = [
    "trunk.w", "trunk.b", "gru.w_z", "gru.w_r", "gru.w_n", "gru.u_z", "gru.u_r", "gru.u_n",
    "gru.b_z", "gru.b_r", "gru.b_n", "actor.w", "actor.b", "critic.w", "critic.b", "log_std",
];

fn expected_shape(name: &str, input: usize, trunk: usize, hidden: usize) -> (usize, usize) {
    match name {
        "trunk.w" => (input, trunk),
        "trunk.b" => (1, trunk),
        "gru.w_z" | "gru.w_r" | "gru.w_n" => (trunk, hidden),
        "gru.u_z" | "gru.u_r" | "gru.u_n" => (hidden, hidden),
        "gru.b_z" | "gru.b_r" | "gru.b_n" => (1, hidden),
        "actor.w" | "critic.w" => (hidden, 1),
        "actor.b" | "critic.b" | "log_std" => (1, 1),
        _ => unreachable!(),
    }
}

/// Weights of the shared-trunk GRU actor-critic.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    store: ParamStore,
    input_dim: usize,
    trunk_dim: usize,
    hidden_dim: usize,
}

/// Parameters bound into one graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundPolicy {
    trunk_w: Var,
    trunk_b: Var,
    w_z: Var,
    w_r: Var,
    w_n: Var,
    u_z: Var,
    u_r: Var,
    u_n: Var,
    b_z: Var,
    b_r: Var,
    b_n: Var,
    actor_w: Var,
    actor_b: Var,
    critic_w: Var,
    critic_b: Var,
    pub log_std: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// Pre-sigmoid action mean, `batch x 1`.
    pub mu: Var,
    pub value: Var,
    pub hidden: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Action mean after the sigmoid, in `[EPS, 1 - EPS]`.
    pub mean: f64,
    /// Pre-sigmoid mean.
    pub mu: f64,
    pub log_std: f64,
    pub value: f64,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub mu: Vec<f64>,
    pub value: Vec<f64>,
    pub log_std: f64,
    pub hidden: Tensor2,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor2::from_vec(rows, cols, data)
}

/// Random orthogonal matrix: Gram-Schmidt on a Gaussian draw.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor2 {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let cj = cols[j].clone();
                for (a, b) in cols[i].iter_mut().zip(&cj) {
                    *a -= dot * b;
                }
            }
            let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in &mut cols[i] {
                *v /= norm;
            }
        }
        if ok {
            let mut t = Tensor2::zeros(n, n);
            for (c, col) in cols.iter().enumerate() {
                for (r, v) in col.iter().enumerate() {
                    t.set(r, c, *v);
                }
            }
            return t;
        }
    }
}

fn check(t: &Tensor2, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
            msg: "non-finite activation".into(),
        })
    }
}

impl PolicyParams {
    pub fn init(cfg: &PolicyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (i, t, h) = (cfg.input_dim, cfg.trunk_dim, cfg.hidden_dim);
        let mut store = ParamStore::new();
        for name in LAYOUT {
            let (rows, cols) = expected_shape(name, i, t, h);
            let tensor = match name {
                "trunk.w" | "gru.w_z" | "gru.w_r" | "gru.w_n" | "actor.w" | "critic.w" => {
                    uniform_fan_in(&mut rng, rows, cols)
                }
                "gru.u_z" | "gru.u_r" | "gru.u_n" => orthogonal(&mut rng, h),
                "log_std" => Tensor2::scalar(cfg.log_std_init),
                _ => Tensor2::zeros(rows, cols),
            };
            store.push(name, tensor);
        }
        Self {
            store,
            input_dim: i,
            trunk_dim: t,
            hidden_dim: h,
        }
    }

    /// Adopt a loaded parameter store, checking names and shapes.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let bad = |tensor: &str, msg: String| Error::Checkpoint {
            tensor: tensor.to_string(),
            msg,
        };
        if store.len() != LAYOUT.len() {
            let missing = LAYOUT
                .iter()
                .find(|n| store.find(n).is_none())
                .copied()
                .unwrap_or("<extra>");
            return Err(bad(
                missing,
                format!("expected {} tensors, found {}", LAYOUT.len(), store.len()),
            ));
        }
        for (id, name) in LAYOUT.iter().enumerate() {
            if store.name(id) != *name {
                return Err(bad(name, format!("found `{}` in its slot", store.name(id))));
            }
        }
        let (input, trunk) = store.get(0).shape();
        let hidden = store.get(8).cols();
        for (id, name) in LAYOUT.iter().enumerate() {
            let want = expected_shape(name, input, trunk, hidden);
            let got = store.get(id).shape();
            if got != want {
                return Err(bad(name, format!("shape {got:?}, expected {want:?}")));
            }
            if !store.get(id).is_finite() {
                return Err(bad(name, "non-finite value".into()));
            }
        }
        Ok(Self {
            store,
            input_dim: input,
            trunk_dim: trunk,
            hidden_dim: hidden,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn trunk_dim(&self) -> usize {
        self.trunk_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn gru_ids(&self) -> GruIds {
        GruIds {
            w_z: 2,
            w_r: 3,
            w_n: 4,
            u_z: 5,
            u_r: 6,
            u_n: 7,
            b_z: 8,
            b_r: 9,
            b_n: 10,
        }
    }

    pub fn log_std(&self) -> f64 {
        self.store.get(15).get(0, 0)
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.hidden_dim]
    }

    /// Zero the actor and critic heads.
    pub fn zero_heads(&mut self) {
        for id in 11..15 {
            let t = self.store.get_mut(id);
            *t = Tensor2::zeros(t.rows(), t.cols());
        }
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> BoundPolicy {
        let mut p = (0..LAYOUT.len()).map(|id| g.param(id));
        let mut next = || p.next().unwrap();
        BoundPolicy {
            trunk_w: next(),
            trunk_b: next(),
            w_z: next(),
            w_r: next(),
            w_n: next(),
            u_z: next(),
            u_r: next(),
            u_n: next(),
            b_z: next(),
            b_r: next(),
            b_n: next(),
            actor_w: next(),
            actor_b: next(),
            critic_w: next(),
            critic_b: next(),
            log_std: next(),
        }
    }

    /// One recurrent step on the graph for a batch of states.
    pub fn step_graph(&self, g: &mut Graph<'_>, b: &BoundPolicy, x: Var, h: Var) -> StepVars {
        let pre = g.matmul(x, b.trunk_w);
        let pre = g.add_bias(pre, b.trunk_b);
        let feat = g.leaky_relu(pre, LEAKY_SLOPE);
        let hidden = gru_graph(g, &b.gru_vars(), feat, h);
        let mu = g.matmul(hidden, b.actor_w);
        let mu = g.add_bias(mu, b.actor_b);
        let value = g.matmul(hidden, b.critic_w);
        let value = g.add_bias(value, b.critic_b);
        StepVars { mu, value, hidden }
    }

    /// Batched inference step; no gradients are kept.
    pub fn forward_batch(&self, states: &Tensor2, hidden: &Tensor2) -> Result<BatchOutput> {
        if states.cols() != self.input_dim || hidden.cols() != self.hidden_dim {
            return Err(Error::validation(format!(
                "policy expects {} inputs and {} hidden units, got {} and {}",
                self.input_dim,
                self.hidden_dim,
                states.cols(),
                hidden.cols()
            )));
        }
        if states.rows() != hidden.rows() {
            return Err(Error::validation("state and hidden batch sizes differ"));
        }
        check(states, "input")?;
        let mut g = Graph::new(&self.store);
        let b = self.bind(&mut g);
        let x = g.constant(states.clone());
        let h = g.constant(hidden.clone());
        let out = self.step_graph(&mut g, &b, x, h);
        check(g.value(out.hidden), "gru")?;
        check(g.value(out.mu), "actor")?;
        check(g.value(out.value), "critic")?;
        Ok(BatchOutput {
            mu: g.value(out.mu).data().to_vec(),
            value: g.value(out.value).data().to_vec(),
            log_std: self.log_std(),
            hidden: g.value(out.hidden).clone(),
        })
    }

    /// Single-state forward pass.
    pub fn forward(&self, state: &StateVector, hidden: &[f64]) -> Result<PolicyOutput> {
        let out = self.forward_batch(
            &Tensor2::row_vector(state.as_slice()),
            &Tensor2::row_vector(hidden),
        )?;
        Ok(PolicyOutput {
            mean: squash(out.mu[0]),
            mu: out.mu[0],
            log_std: out.log_std,
            value: out.value[0],
            hidden: out.hidden.into_vec(),
        })
    }
}

impl BoundPolicy {
    fn gru_vars(&self) -> GruVars {
        GruVars {
            w_z: self.w_z,
            w_r: self.w_r,
            w_n: self.w_n,
            u_z: self.u_z,
            u_r: self.u_r,
            u_n: self.u_n,
            b_z: self.b_z,
            b_r: self.b_r,
            b_n: self.b_n,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_n: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_n: Var,
}

pub fn gru_graph(g: &mut Graph<'_>, p: &GruVars, x: Var, h: Var) -> Var {
    let gate = |g: &mut Graph<'_>, w: Var, u: Var, b: Var| {
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let s = g.add(xw, hu);
        let s = g.add_bias(s, b);
        g.sigmoid(s)
    };
    let z = gate(g, p.w_z, p.u_z, p.b_z);
    let r = gate(g, p.w_r, p.u_r, p.b_r);
    let xn = g.matmul(x, p.w_n);
    let hn = g.matmul(h, p.u_n);
    let hn = g.add_bias(hn, p.b_n);
    let rh = g.mul(r, hn);
    let n = g.add(xn, rh);
    let n = g.tanh(n);
    // h' = n + z * (h - n)
    let diff = g.sub(h, n);
    let zd = g.mul(z, diff);
    g.add(n, zd)
}

/// Standalone GRU cell weights (input `in x hidden`, recurrent
/// `hidden x hidden`, biases `1 x hidden`).
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_z: Tensor2,
    pub w_r: Tensor2,
    pub w_n: Tensor2,
    pub u_z: Tensor2,
    pub u_r: Tensor2,
    pub u_n: Tensor2,
    pub b_z: Tensor2,
    pub b_r: Tensor2,
    pub b_n: Tensor2,
}

impl GruCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor2::zeros(input, hidden);
        let u = || Tensor2::zeros(hidden, hidden);
        let b = || Tensor2::zeros(1, hidden);
        Self {
            w_z: w(),
            w_r: w(),
            w_n: w(),
            u_z: u(),
            u_r: u(),
            u_n: u(),
            b_z: b(),
            b_r: b(),
            b_n: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.cols()
    }

    fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_dim(), self.hidden_dim());
        let checks = [
            ("w_z", &self.w_z, (i, h)),
            ("w_r", &self.w_r, (i, h)),
            ("w_n", &self.w_n, (i, h)),
            ("u_z", &self.u_z, (h, h)),
            ("u_r", &self.u_r, (h, h)),
            ("u_n", &self.u_n, (h, h)),
            ("b_z", &self.b_z, (1, h)),
            ("b_r", &self.b_r, (1, h)),
            ("b_n", &self.b_n, (1, h)),
        ];
        for (name, t, want) in checks {
            if t.shape() != want {
                return Err(Error::validation(format!(
                    "gru {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One GRU update for a batch: `x` is `batch x in`, `h` is `batch x hidden`.
pub fn gru_cell(p: &GruCellParams, x: &Tensor2, h: &Tensor2) -> Result<Tensor2> {
    p.validate()?;
    if x.cols() != p.input_dim() || h.cols() != p.hidden_dim() || x.rows() != h.rows() {
        return Err(Error::validation(format!(
            "gru input {:?} / hidden {:?} do not match cell {}x{}",
            x.shape(),
            h.shape(),
            p.input_dim(),
            p.hidden_dim()
        )));
    }
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = [&p.w_z, &p.w_r, &p.w_n, &p.u_z, &p.u_r, &p.u_n, &p.b_z, &p.b_r, &p.b_n]
        .into_iter()
        .map(|t| store.push("", t.clone()))
        .collect();
    let mut g = Graph::new(&store);
    let v: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
    let vars = GruVars {
        w_z: v[0],
        w_r: v[1],
        w_n: v[2],
        u_z: v[3],
        u_r: v[4],
        u_n: v[5],
        b_z: v[6],
        b_r: v[7],
        b_n: v[8],
    };
    let xv = g.constant(x.clone());
    let hv = g.constant(h.clone());
    let out = gru_graph(&mut g, &vars, xv, hv);
    let out = g.value(out).clone();
    check(&out, "gru")?;
    Ok(out)
}

/// Sigmoid clamped into `[EPS, 1 - EPS]`.
pub fn squash(mu: f64) -> f64 {
    sigmoid(mu).clamp(ACTION_EPS, 1.0 - ACTION_EPS)
}

/// Log-density of `u` under `N(mu, exp(log_std)^2)`.
pub fn gaussian_log_prob(u: f64, mu: f64, log_std: f64) -> f64 {
    let z = (u - mu) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * LN_2PI
}

pub fn gaussian_entropy(log_std: f64) -> f64 {
    log_std + 0.5 * (1.0 + LN_2PI)
}

/// Graph form of [`gaussian_log_prob`] for a column of samples.
pub fn gaussian_log_prob_graph(g: &mut Graph<'_>, u: Var, mu: Var, log_std: Var) -> Var {
    let rows = g.value(mu).rows();
    let ls = g.broadcast_rows(log_std, rows);
    let neg = g.scale(ls, -1.0);
    let inv_std = g.exp(neg);
    let diff = g.sub(u, mu);
    let z = g.mul(diff, inv_std);
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let lp = g.sub(half, ls);
    g.add_scalar(lp, -0.5 * LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
    }

    #[test]
    fn zero_gru_halves_hidden() {
        let p = GruCellParams::zeros(3, 4);
        let x = Tensor2::row_vector(&[1.0, -2.0, 0.5]);
        let h = Tensor2::row_vector(&[0.4, -0.8, 1.0, 0.0]);
        let out = gru_cell(&p, &x, &h).unwrap();
        assert_eq!(out.data(), &[0.2, -0.4, 0.5, 0.0]);
        let zero = gru_cell(&p, &x, &Tensor2::zeros(1, 4)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_shape_mismatch_is_an_error() {
        let p = GruCellParams::zeros(3, 4);
        let bad = gru_cell(&p, &Tensor2::zeros(1, 2), &Tensor2::zeros(1, 4));
        assert!(matches!(bad, Err(Error::Validation(_))));
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal(&mut rng, 16);
        let mut qt = Tensor2::zeros(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                qt.set(c, r, q.get(r, c));
            }
        }
        let eye = qt.matmul(&q);
        for r in 0..16 {
            for c in 0..16 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((eye.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_give_half_mean_and_zero_value() {
        let mut p = PolicyParams::init(&PolicyConfig::default());
        p.zero_heads();
        let out = p
            .forward(&StateVector([1.0, 0.1, 0.0, 0.1]), &p.initial_hidden())
            .unwrap();
        assert_eq!(out.mean, 0.5);
        assert_eq!(out.value, 0.0);
        assert_eq!(out.log_std, -1.0);
    }

    #[test]
    fn forward_is_pure() {
        let p = PolicyParams::init(&PolicyConfig::default());
        let s = StateVector([0.5, 0.2, 0.01, 0.08]);
        let h: Vec<f64> = (0..64).map(|i| (i as f64 / 64.0) - 0.5).collect();
        assert_eq!(p.forward(&s, &h).unwrap(), p.forward(&s, &h).unwrap());
    }

    #[test]
    fn initialization_is_seeded() {
        let a = PolicyParams::init(&PolicyConfig::default());
        let b = PolicyParams::init(&PolicyConfig::default());
        let c = PolicyParams::init(&PolicyConfig {
            seed: 1,
            ..Default::default()
        });
        assert_eq!(a, b);
        assert_ne!(a, c);
        for id in [1, 8, 9, 10, 12, 14] {
            assert!(a.store().get(id).data().iter().all(|&v| v == 0.0), "{}", a.store().name(id));
        }
    }

    #[test]
    fn saturated_actor_is_clamped() {
        let mut p = PolicyParams::init(&PolicyConfig::default());
        p.zero_heads();
        *p.store_mut().get_mut(12) = Tensor2::scalar(80.0);
        let out = p.forward(&StateVector([0.0; 4]), &p.initial_hidden()).unwrap();
        assert_eq!(out.mean, 1.0 - ACTION_EPS);
        *p.store_mut().get_mut(12) = Tensor2::scalar(-80.0);
        let out = p.forward(&StateVector([0.0; 4]), &p.initial_hidden()).unwrap();
        assert_eq!(out.mean, ACTION_EPS);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let p = PolicyParams::init(&PolicyConfig::default());
        let err = p
            .forward(&StateVector([f64::NAN, 0.0, 0.0, 0.0]), &p.initial_hidden())
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { ref layer, .. } if layer == "input"));
    }

    #[test]
    fn gates_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GruCellParams {
            w_z: random_tensor(&mut rng, 3, 5, 3.0),
            w_r: random_tensor(&mut rng, 3, 5, 3.0),
            w_n: random_tensor(&mut rng, 3, 5, 3.0),
            u_z: random_tensor(&mut rng, 5, 5, 3.0),
            u_r: random_tensor(&mut rng, 5, 5, 3.0),
            u_n: random_tensor(&mut rng, 5, 5, 3.0),
            b_z: random_tensor(&mut rng, 1, 5, 3.0),
            b_r: random_tensor(&mut rng, 1, 5, 3.0),
            b_n: random_tensor(&mut rng, 1, 5, 3.0),
        };
        // h' is a convex mix of n in (-1, 1) and h, so |h| <= 1 stays bounded.
        let mut h = random_tensor(&mut rng, 4, 5, 1.0);
        for _ in 0..50 {
            let x = random_tensor(&mut rng, 4, 3, 10.0);
            h = gru_cell(&p, &x, &h).unwrap();
            assert!(h.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn log_prob_and_entropy() {
        assert!((gaussian_log_prob(0.0, 0.0, 0.0) + 0.5 * LN_2PI).abs() < 1e-15);
        assert!((gaussian_entropy(0.0) - 1.418_938_533_204_672_7).abs() < 1e-15);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let u = g.constant(Tensor2::from_vec(2, 1, vec![0.3, -1.0]));
        let mu = g.constant(Tensor2::from_vec(2, 1, vec![0.1, 0.5]));
        let ls = g.constant(Tensor2::scalar(-0.7));
        let lp = gaussian_log_prob_graph(&mut g, u, mu, ls);
        let got = g.value(lp).data().to_vec();
        assert!((got[0] - gaussian_log_prob(0.3, 0.1, -0.7)).abs() < 1e-14);
        assert!((got[1] - gaussian_log_prob(-1.0, 0.5, -0.7)).abs() < 1e-14);
    }
}
