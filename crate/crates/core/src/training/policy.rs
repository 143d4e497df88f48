//! Neural policies built on the autodiff graph: a feedforward block,
//! an LSTM plan policy for the building task, and the two-level
//! utility/inverter stack for the feeder task.
//!
//! Parameters live as plain tensors on the policy structs; `bind`
//! wraps them in fresh graph leaves for one forward/backward pass and
//! gradients are read back from those leaves.

use crate::autodiff::{self, Node};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Min-max normalization bounds for one physical quantity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MinMax {
    pub lo: f64,
    pub hi: f64,
}

impl MinMax {
    pub fn new(lo: f64, hi: f64) -> Self {
        MinMax { lo, hi }
    }

    /// Maps to [0, 1]; values outside [-0.1, 1.1] after mapping are
    /// clamped and flagged.
    pub fn normalize(&self, v: f64) -> (f64, bool) {
        let z = (v - self.lo) / (self.hi - self.lo);
        if !(-0.1..=1.1).contains(&z) {
            (z.clamp(-0.1, 1.1), true)
        } else {
            (z, false)
        }
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        self.lo + z * (self.hi - self.lo)
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// Feedforward network with ReLU hidden layers and a linear head.
/// Parameter order: w0, b0, w1, b1, ...
#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<Tensor>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            params.push(glorot(w[1], w[0], rng));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn bind(&self) -> Vec<Node> {
        self.params.iter().cloned().map(Node::leaf).collect()
    }

    pub fn forward(&self, bound: &[Node], x: &Node) -> Result<Node> {
        if x.value().len() != self.sizes[0] {
            return Err(CoreError::Contract(format!(
                "input dim {} != expected {}",
                x.value().len(),
                self.sizes[0]
            )));
        }
        let n_layers = self.sizes.len() - 1;
        let mut h = x.clone();
        for l in 0..n_layers {
            let z = autodiff::add(
                &autodiff::matmul(&bound[2 * l], &h)?,
                &bound[2 * l + 1],
            )?;
            h = if l + 1 < n_layers { autodiff::relu(&z) } else { z };
        }
        Ok(h)
    }

    /// Forward pass on raw values without building a graph.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let bound = self.bind();
        let out = self.forward(&bound, &Node::constant(Tensor::vector(x.to_vec())))?;
        Ok(out.value().to_vec())
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// LSTM over a history window of normalized (state, disturbance)
/// features, followed by a linear head emitting a T-step action plan
/// in normalized units.
#[derive(Debug, Clone)]
pub struct LstmPolicy {
    pub input_dim: usize,
    pub hidden: usize,
    pub horizon: usize,
    /// wx (4H x I), wh (4H x H), b (4H), head_w (T x H), head_b (T)
    pub params: Vec<Tensor>,
}

impl LstmPolicy {
    pub fn new(input_dim: usize, hidden: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Self {
        let params = vec![
            glorot(4 * hidden, input_dim, rng),
            glorot(4 * hidden, hidden, rng),
            Tensor::zeros(&[4 * hidden]),
            glorot(horizon, hidden, rng),
            Tensor::zeros(&[horizon]),
        ];
        LstmPolicy {
            input_dim,
            hidden,
            horizon,
            params,
        }
    }

    pub fn bind(&self) -> Vec<Node> {
        self.params.iter().cloned().map(Node::leaf).collect()
    }

    /// History is row-major (steps x input_dim), oldest first. State
    /// resets to zero for every call.
    pub fn forward(&self, bound: &[Node], history: &[f64]) -> Result<Node> {
        if history.is_empty() || history.len() % self.input_dim != 0 {
            return Err(CoreError::Contract(format!(
                "history length {} is not a multiple of input dim {}",
                history.len(),
                self.input_dim
            )));
        }
        let hdim = self.hidden;
        let steps = history.len() / self.input_dim;
        let mut h = Node::constant(Tensor::zeros(&[hdim]));
        let mut c = Node::constant(Tensor::zeros(&[hdim]));
        for t in 0..steps {
            let x = Node::constant(Tensor::vector(
                history[t * self.input_dim..(t + 1) * self.input_dim].to_vec(),
            ));
            let z = autodiff::add(
                &autodiff::add(
                    &autodiff::matmul(&bound[0], &x)?,
                    &autodiff::matmul(&bound[1], &h)?,
                )?,
                &bound[2],
            )?;
            let i = autodiff::sigmoid(&autodiff::slice(&z, 0, hdim)?);
            let f = autodiff::sigmoid(&autodiff::slice(&z, hdim, 2 * hdim)?);
            let o = autodiff::sigmoid(&autodiff::slice(&z, 2 * hdim, 3 * hdim)?);
            let g = autodiff::tanh(&autodiff::slice(&z, 3 * hdim, 4 * hdim)?);
            c = autodiff::add(&autodiff::mul(&f, &c)?, &autodiff::mul(&i, &g)?)?;
            h = autodiff::mul(&o, &autodiff::tanh(&c))?;
        }
        autodiff::add(&autodiff::matmul(&bound[3], &h)?, &bound[4])
    }

    pub fn eval(&self, history: &[f64]) -> Result<Vec<f64>> {
        let bound = self.bind();
        Ok(self.forward(&bound, history)?.value().to_vec())
    }
}

/// Two-level feeder policy: a utility network maps the global
/// observation to an embedding; per-inverter networks map (embedding,
/// local observation) to a raw (p, q) pair. Reactive power is scaled by
/// the rating; active power is proposed as a rating-scaled offset from
/// the available power, which the second local-observation channel must
/// carry as `p_available / rating`. Centering on availability means the
/// net never has to regress irradiance just to avoid leaving energy on
/// the table when no grid constraint binds.
#[derive(Debug, Clone)]
pub struct FeederPolicy {
    pub utility: Mlp,
    pub inverters: Vec<Mlp>,
    pub ratings: Vec<f64>,
    pub shared_weights: bool,
}

pub const UTILITY_HIDDEN: [usize; 3] = [256, 128, 64];
pub const INVERTER_HIDDEN: [usize; 2] = [16, 4];

impl FeederPolicy {
    pub fn new(
        global_dim: usize,
        local_dim: usize,
        ratings: &[f64],
        shared_weights: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let utility = Mlp::new(
            &[
                global_dim,
                UTILITY_HIDDEN[0],
                UTILITY_HIDDEN[1],
                UTILITY_HIDDEN[2],
            ],
            rng,
        );
        let inv_sizes = [
            UTILITY_HIDDEN[2] + local_dim,
            INVERTER_HIDDEN[0],
            INVERTER_HIDDEN[1],
            2,
        ];
        let n_inv = ratings.len();
        let inverters = if shared_weights {
            let shared = Mlp::new(&inv_sizes, rng);
            vec![shared; 1]
        } else {
            (0..n_inv).map(|_| Mlp::new(&inv_sizes, rng)).collect()
        };
        FeederPolicy {
            utility,
            inverters,
            ratings: ratings.to_vec(),
            shared_weights,
        }
    }

    pub fn n_inverters(&self) -> usize {
        self.ratings.len()
    }

    fn inverter_net(&self, i: usize) -> &Mlp {
        if self.shared_weights {
            &self.inverters[0]
        } else {
            &self.inverters[i]
        }
    }

    pub fn bind(&self) -> FeederBound {
        FeederBound {
            utility: self.utility.bind(),
            inverters: self.inverters.iter().map(|m| m.bind()).collect(),
        }
    }

    /// Returns the pre-projection setpoint vector [p_1..p_I, q_1..q_I].
    /// Local observations are row-major (n_inverters x local_dim).
    pub fn forward(
        &self,
        bound: &FeederBound,
        global_obs: &[f64],
        local_obs: &[f64],
    ) -> Result<Node> {
        let n_inv = self.n_inverters();
        if local_obs.len() % n_inv != 0 {
            return Err(CoreError::Contract(format!(
                "local observation length {} not divisible by {n_inv} inverters",
                local_obs.len()
            )));
        }
        let local_dim = local_obs.len() / n_inv;
        if local_dim < 2 {
            return Err(CoreError::Contract(
                "feeder local observations need at least 2 channels \
                 (voltage, p_available / rating)"
                    .into(),
            ));
        }
        let emb = self.utility.forward(
            &bound.utility,
            &Node::constant(Tensor::vector(global_obs.to_vec())),
        )?;
        let emb = autodiff::relu(&emb);
        let mut p_parts = Vec::with_capacity(n_inv);
        let mut q_parts = Vec::with_capacity(n_inv);
        for i in 0..n_inv {
            let local = Node::constant(Tensor::vector(
                local_obs[i * local_dim..(i + 1) * local_dim].to_vec(),
            ));
            let inp = autodiff::concat(&[emb.clone(), local])?;
            let net = self.inverter_net(i);
            let nb = if self.shared_weights {
                &bound.inverters[0]
            } else {
                &bound.inverters[i]
            };
            let out = autodiff::scale(&autodiff::tanh(&net.forward(nb, &inp)?), self.ratings[i]);
            let p_av = local_obs[i * local_dim + 1] * self.ratings[i];
            p_parts.push(autodiff::add(
                &autodiff::slice(&out, 0, 1)?,
                &Node::constant(Tensor::vector(vec![p_av])),
            )?);
            q_parts.push(autodiff::slice(&out, 1, 2)?);
        }
        p_parts.extend(q_parts);
        autodiff::concat(&p_parts)
    }

    pub fn eval(&self, global_obs: &[f64], local_obs: &[f64]) -> Result<Vec<f64>> {
        let bound = self.bind();
        Ok(self
            .forward(&bound, global_obs, local_obs)?
            .value()
            .to_vec())
    }
}

pub struct FeederBound {
    pub utility: Vec<Node>,
    pub inverters: Vec<Vec<Node>>,
}

impl FeederBound {
    pub fn flat(&self) -> Vec<Node> {
        let mut all = self.utility.clone();
        for inv in &self.inverters {
            all.extend(inv.iter().cloned());
        }
        all
    }
}

impl FeederPolicy {
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut all: Vec<&mut Tensor> = self.utility.params.iter_mut().collect();
        for inv in &mut self.inverters {
            all.extend(inv.params.iter_mut());
        }
        all
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut all: Vec<&Tensor> = self.utility.params.iter().collect();
        for inv in &self.inverters {
            all.extend(inv.params.iter());
        }
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut r = rng::stream(0, "t");
        let mut mlp = Mlp::new(&[3, 4, 2], &mut r);
        for p in &mut mlp.params {
            *p = Tensor::zeros(p.shape());
        }
        mlp.params[3].data_mut()[0] = 0.7;
        mlp.params[3].data_mut()[1] = -0.2;
        let out = mlp.eval(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.7, -0.2]);
    }

    #[test]
    fn lstm_zero_weights_constant_bias_output() {
        let mut r = rng::stream(0, "t");
        let mut p = LstmPolicy::new(2, 4, 3, &mut r);
        for t in &mut p.params {
            *t = Tensor::zeros(t.shape());
        }
        p.params[4] = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let a = p.eval(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = p.eval(&[9.0, 9.0]).unwrap();
        assert_eq!(a, vec![1.0, 2.0, 3.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn lstm_is_deterministic_and_stateless_between_calls() {
        let mut r = rng::stream(3, "t");
        let p = LstmPolicy::new(2, 8, 4, &mut r);
        let h = [0.1, 0.9, 0.4, 0.2, 0.5, 0.5, 0.3, 0.8];
        let a = p.eval(&h).unwrap();
        let _ = p.eval(&[0.7, 0.7]).unwrap();
        let b = p.eval(&h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let mut r = rng::stream(7, "t");
        let mut p = LstmPolicy::new(2, 4, 2, &mut r);
        let hist = [0.2, 0.5, 0.8, 0.1, 0.4, 0.6];
        let loss_of = |pol: &LstmPolicy| {
            let out = pol.eval(&hist).unwrap();
            out.iter().map(|v| v * v).sum::<f64>()
        };
        let bound = p.bind();
        let out = p.forward(&bound, &hist).unwrap();
        let loss = autodiff::sum(&autodiff::square(&out));
        autodiff::backward(&loss).unwrap();
        let eps = 1e-5;
        for (pi, node) in bound.iter().enumerate() {
            let grad = node.grad().unwrap();
            for k in [0usize, p.params[pi].len() / 2, p.params[pi].len() - 1] {
                let orig = p.params[pi].data()[k];
                p.params[pi].data_mut()[k] = orig + eps;
                let up = loss_of(&p);
                p.params[pi].data_mut()[k] = orig - eps;
                let dn = loss_of(&p);
                p.params[pi].data_mut()[k] = orig;
                let fd = (up - dn) / (2.0 * eps);
                let ad = grad.data()[k];
                let denom = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / denom < 1e-4,
                    "param {pi}[{k}]: fd {fd} vs ad {ad}"
                );
            }
        }
    }

    #[test]
    fn feeder_zero_weights_outputs_zero() {
        let mut r = rng::stream(1, "t");
        let mut pol = FeederPolicy::new(6, 3, &[0.05, 0.06], false, &mut r);
        for p in &mut pol.utility.params {
            *p = Tensor::zeros(p.shape());
        }
        for inv in &mut pol.inverters {
            for p in &mut inv.params {
                *p = Tensor::zeros(p.shape());
            }
        }
        let out = pol.eval(&[0.1; 6], &[0.2; 6]).unwrap();
        // p falls back to the availability channel, q to zero
        assert_eq!(out, vec![0.2 * 0.05, 0.2 * 0.06, 0.0, 0.0]);
    }

    #[test]
    fn permuting_local_observations_permutes_outputs_under_sharing() {
        let mut r = rng::stream(5, "t");
        let pol = FeederPolicy::new(4, 2, &[0.05, 0.05], true, &mut r);
        let g = [0.3, 0.1, 0.7, 0.2];
        let a = pol.eval(&g, &[0.1, 0.9, 0.4, 0.3]).unwrap();
        let b = pol.eval(&g, &[0.4, 0.3, 0.1, 0.9]).unwrap();
        // [p1, p2, q1, q2] with locals swapped
        assert!((a[0] - b[1]).abs() < 1e-12);
        assert!((a[1] - b[0]).abs() < 1e-12);
        assert!((a[2] - b[3]).abs() < 1e-12);
        assert!((a[3] - b[2]).abs() < 1e-12);
    }

    #[test]
    fn minmax_flags_out_of_range() {
        let m = MinMax::new(0.0, 10.0);
        assert_eq!(m.normalize(5.0), (0.5, false));
        let (z, warn) = m.normalize(20.0);
        assert!(warn);
        assert_eq!(z, 1.1);
        assert!((m.denormalize(0.5) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn feeder_outputs_bounded_by_rating() {
        let mut r = rng::stream(9, "t");
        let pol = FeederPolicy::new(4, 2, &[0.05, 0.08], false, &mut r);
        let local = [3.0, -2.0, 1.0, 4.0];
        let out = pol.eval(&[5.0, -3.0, 2.0, 1.0], &local).unwrap();
        // p stays within one rating of availability, q within the rating
        assert!((out[0] - local[1] * 0.05).abs() <= 0.05);
        assert!((out[1] - local[3] * 0.08).abs() <= 0.08);
        assert!(out[2].abs() <= 0.05);
        assert!(out[3].abs() <= 0.08);
    }
}
