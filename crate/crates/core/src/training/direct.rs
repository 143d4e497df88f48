//! Direct-gradient trainer for the feeder task: the curtailment
//! objective is differentiated through the projected deterministic
//! policy, with the constraint set carrying the linearized grid model.

use crate::autodiff::{self, Node};
use crate::error::Result;
use crate::projection::projection_layer;
use crate::tensor::Tensor;
use crate::training::optim::RmsProp;
use crate::training::policy::FeederPolicy;
use crate::training::ppo::SetBuilder;
use crate::training::replay::ReplayMemory;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct DirectHyper {
    pub lr: f64,
    pub batches: usize,
    pub batch: usize,
    pub lambda_aux: f64,
}

impl Default for DirectHyper {
    fn default() -> Self {
        // lambda_aux trades infeasibility of the raw proposals against
        // steering freedom: the equilibrium offset outside the set
        // scales like 1 / (2 lambda), and too large a weight keeps the
        // projection from reaching curtailment-optimal vertices
        DirectHyper {
            lr: 1e-3,
            batches: 16,
            batch: 64,
            lambda_aux: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DirectStats {
    pub mean_loss: f64,
    pub skipped_non_finite: bool,
}

/// One update: `batches` minibatches sampled from memory. Each record
/// stores the available power per inverter in `w_hat`; the loss is
/// sum(p_av - p) through the projection plus the auxiliary pull of the
/// raw output toward its projection.
pub fn direct_gradient_update(
    policy: &mut FeederPolicy,
    opt: &mut RmsProp,
    memory: &ReplayMemory,
    build_set: &SetBuilder,
    hyper: &DirectHyper,
    rng: &mut ChaCha8Rng,
) -> Result<DirectStats> {
    let n_inv = policy.n_inverters();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut skipped = false;
    for _ in 0..hyper.batches {
        let batch = memory.sample_batch(hyper.batch, rng);
        if batch.is_empty() {
            break;
        }
        let bound = policy.bind();
        let mut losses = Vec::with_capacity(batch.len());
        for r in &batch {
            let set = build_set(r)?;
            let u = policy.forward(&bound, &r.obs, &r.local_obs)?;
            let u_proj = projection_layer(&u, &set, 1e-8)?;
            let p = autodiff::slice(&u_proj, 0, n_inv)?;
            let p_av: f64 = r.w_hat.iter().sum();
            let curtailment = autodiff::add(
                &autodiff::scale(&autodiff::sum(&p), -1.0),
                &Node::scalar(p_av),
            )?;
            let aux = autodiff::scale(
                &autodiff::sum_squares(&autodiff::sub(&u_proj, &u)?),
                hyper.lambda_aux,
            );
            losses.push(autodiff::add(&curtailment, &aux)?);
        }
        let loss = autodiff::mean(&autodiff::concat(&losses)?);
        if !loss.value().all_finite() {
            skipped = true;
            continue;
        }
        total += loss.value().item();
        count += 1;
        autodiff::backward(&loss)?;
        let flat = bound.flat();
        let mut params = policy.params_mut();
        let grads: Vec<Tensor> = flat
            .iter()
            .zip(params.iter())
            .map(|(node, p)| node.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        opt.step(&mut params, &grads);
    }
    Ok(DirectStats {
        mean_loss: if count > 0 { total / count as f64 } else { 0.0 },
        skipped_non_finite: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project, LinearConstraintSet};
    use crate::rng;
    use crate::training::replay::RolloutRecord;
    use nalgebra::{DMatrix, DVector};

    fn record(obs: Vec<f64>, local: Vec<f64>, p_av: Vec<f64>) -> RolloutRecord {
        RolloutRecord {
            timestamp: chrono::NaiveDate::from_ymd_opt(2017, 1, 1)
                .unwrap()
                .and_hms_opt(12, 0, 0)
                .unwrap(),
            x: vec![],
            obs,
            local_obs: local,
            w_hat: p_av,
            u_pre: vec![],
            u_post: vec![],
            cost: 0.0,
            logprob: 0.0,
            sigma: 0.0,
            relaxed: false,
        }
    }

    /// One inverter, caps 0 <= p <= p_av, |q| <= s, no voltage row.
    fn cap_set(p_av: f64, s: f64) -> LinearConstraintSet {
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let h = DVector::from_vec(vec![p_av, 0.0, s, s]);
        LinearConstraintSet::from_inequalities(g, h).unwrap()
    }

    // the second local channel carries p_av / rating; the test policies
    // all use a rating of 0.1
    const RATING: f64 = 0.1;

    fn fill_memory(mem: &mut ReplayMemory, p_av: f64) {
        for k in 0..64 {
            let v = (k % 8) as f64 / 8.0;
            mem.push(record(vec![v, 1.0 - v], vec![v, p_av / RATING], vec![p_av]));
        }
    }

    /// Trains with a decaying learning rate so boundary chatter dies
    /// out and the projected setpoints settle tightly.
    fn train_staged(
        policy: &mut FeederPolicy,
        mem: &ReplayMemory,
        build: &SetBuilder,
        lambda_aux: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let mut opt = RmsProp::new(2e-3);
        let hyper = DirectHyper {
            batches: 4,
            batch: 16,
            lambda_aux,
            ..DirectHyper::default()
        };
        for stage in 0..3 {
            opt.lr = 2e-3 * 0.1f64.powi(stage);
            for _ in 0..60 {
                direct_gradient_update(policy, &mut opt, mem, build, &hyper, rng).unwrap();
            }
        }
    }

    #[test]
    fn unbinding_constraints_drive_curtailment_to_zero() {
        let mut r = rng::stream(21, "direct");
        let mut policy = FeederPolicy::new(2, 2, &[RATING], false, &mut r);
        let p_av = 0.05;
        let mut mem = ReplayMemory::new(128);
        fill_memory(&mut mem, p_av);
        let build = move |_: &RolloutRecord| Ok(cap_set(p_av, 0.1));
        train_staged(&mut policy, &mem, &build, 10.0, &mut r);
        let u = policy.eval(&[0.25, 0.75], &[0.25, p_av / RATING]).unwrap();
        let proj = project(&DVector::from_vec(u.clone()), &cap_set(p_av, 0.1), 1e-9)
            .unwrap()
            .u_star;
        assert!(
            (p_av - proj[0]).abs() < 1e-3,
            "p = {} vs p_av = {p_av}",
            proj[0]
        );
    }

    #[test]
    fn single_binding_row_matches_halfspace_projection() {
        // extra row p <= 0.04 below the cap: optimum pins p at 0.04
        let mut r = rng::stream(22, "direct");
        let mut policy = FeederPolicy::new(2, 2, &[RATING], false, &mut r);
        let p_av = 0.05;
        let mut mem = ReplayMemory::new(128);
        fill_memory(&mut mem, p_av);
        let bind_set = || {
            let g = DMatrix::from_row_slice(
                5,
                2,
                &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 0.0],
            );
            let h = DVector::from_vec(vec![p_av, 0.0, 0.1, 0.1, 0.04]);
            LinearConstraintSet::from_inequalities(g, h).unwrap()
        };
        let build = move |_: &RolloutRecord| Ok(bind_set());
        train_staged(&mut policy, &mem, &build, 10.0, &mut r);
        let u = policy.eval(&[0.25, 0.75], &[0.25, p_av / RATING]).unwrap();
        let proj = project(&DVector::from_vec(u), &bind_set(), 1e-9).unwrap().u_star;
        assert!((proj[0] - 0.04).abs() < 1e-3, "p = {}", proj[0]);
    }

    #[test]
    fn without_aux_term_updates_stall_on_the_boundary() {
        // bias the raw output deep below p >= 0; the task gradient is
        // normal to the binding face, so lambda_aux = 0 cannot move it
        let p_av = 0.05;
        let run = |lambda_aux: f64| {
            let mut r = rng::stream(23, "direct-ab");
            let mut policy = FeederPolicy::new(2, 2, &[RATING], false, &mut r);
            // force a strongly negative p output at init
            let last = policy.inverters[0].params.len() - 1;
            policy.inverters[0].params[last].data_mut()[0] = -5.0;
            let mut opt = RmsProp::new(5e-3);
            let mut mem = ReplayMemory::new(128);
            fill_memory(&mut mem, p_av);
            let build = move |_: &RolloutRecord| Ok(cap_set(p_av, 0.1));
            let hyper = DirectHyper {
                batches: 4,
                batch: 16,
                lambda_aux,
                ..DirectHyper::default()
            };
            for _ in 0..150 {
                direct_gradient_update(&mut policy, &mut opt, &mem, &build, &hyper, &mut r)
                    .unwrap();
            }
            let u = policy.eval(&[0.25, 0.75], &[0.25, p_av / RATING]).unwrap();
            let proj = project(&DVector::from_vec(u), &cap_set(p_av, 0.1), 1e-9)
                .unwrap()
                .u_star;
            p_av - proj[0] // final curtailment
        };
        let stalled = run(0.0);
        let guided = run(10.0);
        assert!(
            stalled > 0.8 * p_av,
            "expected stall near full curtailment, got {stalled}"
        );
        assert!(guided < 0.2 * p_av, "aux-guided run still curtails {guided}");
    }
}
