//! Clipped-surrogate policy optimization for the building task, with
//! generalized advantage estimation, an MLP critic, and the auxiliary
//! term pulling the pre-projection mean toward its projection.

use crate::autodiff::{self, Node};
use crate::error::Result;
use crate::projection::{projection_layer, LinearConstraintSet};
use crate::tensor::Tensor;
use crate::training::optim::RmsProp;
use crate::training::policy::{LstmPolicy, MinMax, Mlp};
use crate::training::replay::RolloutRecord;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type SetBuilder<'a> = dyn Fn(&RolloutRecord) -> Result<LinearConstraintSet> + 'a;

/// How gradients treat the projection during updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients flow through the projection; auxiliary term active.
    Full,
    /// The projection only clips executed actions; updates see the raw
    /// network output and no auxiliary term.
    ClipOnly,
    /// No updates at all.
    NoUpdate,
}

#[derive(Debug, Clone)]
pub struct PpoHyper {
    pub gamma: f64,
    pub eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda_aux: f64,
    pub gae_lambda: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        PpoHyper {
            gamma: 0.9,
            eps: 0.2,
            lr: 5e-4,
            epochs: 8,
            batch: 32,
            lambda_aux: 10.0,
            gae_lambda: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub mean_advantage: f64,
    pub skipped_non_finite: bool,
}

/// Stochastic head around a projected mean.
#[derive(Debug, Clone)]
pub struct GaussianPolicyOutput {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sample: Vec<f64>,
    pub logprob: f64,
}

impl GaussianPolicyOutput {
    pub fn draw(mu: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(sigma > 0.0);
        let sample: Vec<f64> = mu
            .iter()
            .map(|m| {
                // Box-Muller
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                m + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let logprob = gaussian_logprob(&sample, mu, sigma);
        GaussianPolicyOutput {
            mu: mu.to_vec(),
            sigma: vec![sigma; mu.len()],
            sample,
            logprob,
        }
    }
}

pub fn gaussian_logprob(sample: &[f64], mu: &[f64], sigma: f64) -> f64 {
    let n = sample.len() as f64;
    let ss: f64 = sample
        .iter()
        .zip(mu)
        .map(|(s, m)| (s - m) * (s - m))
        .sum();
    -ss / (2.0 * sigma * sigma) - n * sigma.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Linear anneal from 0.1 to 0.01 over progress in [0, 1].
pub fn sigma_schedule(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    0.1 + (0.01 - 0.1) * p
}

/// Generalized advantage estimation over a time-ordered window; the
/// terminal value bootstraps the tail. Rewards are negated costs.
pub fn gae(
    costs: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = costs.len();
    assert_eq!(values.len(), n);
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { values[n - 1] };
        let delta = -costs[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns: Vec<f64> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

fn node_min(a: &Node, b: &Node) -> Result<Node> {
    // min(a, b) = a - relu(a - b)
    autodiff::sub(a, &autodiff::relu(&autodiff::sub(a, b)?))
}

/// One policy update from a time-ordered window of records.
///
/// The ratio is formed on the executed (projected) action, whose
/// log-probability is taken under a Gaussian centered on the
/// (projected, in `Full` mode) mean recomputed with current
/// parameters: the executed action is what produced the observed
/// cost, so it is the one that gets credit.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut LstmPolicy,
    critic: &mut Mlp,
    policy_opt: &mut RmsProp,
    critic_opt: &mut RmsProp,
    window: &[&RolloutRecord],
    build_set: &SetBuilder,
    action_norm: MinMax,
    sigma_now: f64,
    hyper: &PpoHyper,
    mode: GradMode,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats> {
    if mode == GradMode::NoUpdate || window.is_empty() {
        return Ok(PpoStats {
            policy_loss: 0.0,
            critic_loss: 0.0,
            mean_advantage: 0.0,
            skipped_non_finite: false,
        });
    }
    let n = window.len();
    let values: Vec<f64> = window
        .iter()
        .map(|r| critic.eval(&r.obs).map(|v| v[0]))
        .collect::<Result<_>>()?;
    let costs: Vec<f64> = window.iter().map(|r| r.cost).collect();
    let (mut adv, returns) = gae(&costs, &values, hyper.gamma, hyper.gae_lambda);
    let mean_adv = adv.iter().sum::<f64>() / n as f64;
    let std_adv = (adv.iter().map(|a| (a - mean_adv) * (a - mean_adv)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-8);
    for a in &mut adv {
        *a = (*a - mean_adv) / std_adv;
    }

    let act_dim = policy.horizon as f64;
    let logp_const = -act_dim * sigma_now.ln()
        - 0.5 * act_dim * (2.0 * std::f64::consts::PI).ln();
    let range = action_norm.hi - action_norm.lo;
    let mut last_policy_loss = 0.0;
    let mut last_critic_loss = 0.0;
    let mut skipped = false;

    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.batch) {
            // policy minibatch
            let bound = policy.bind();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = window[i];
                let mu_norm = policy.forward(&bound, &r.obs)?;
                let mu = autodiff::add(
                    &autodiff::scale(&mu_norm, range),
                    &Node::constant(Tensor::full(&[policy.horizon], action_norm.lo)),
                )?;
                let (mu_used, aux) = match mode {
                    GradMode::Full => {
                        let set = build_set(r)?;
                        let proj = projection_layer(&mu, &set, 1e-8)?;
                        // the penalty weight is calibrated for
                        // normalized actions; rescale so it does not
                        // drown the surrogate in physical units
                        let aux = autodiff::scale(
                            &autodiff::sum_squares(&autodiff::sub(&proj, &mu)?),
                            hyper.lambda_aux / (range * range),
                        );
                        (proj, Some(aux))
                    }
                    _ => (mu, None),
                };
                // full mode credits the executed (projected) action,
                // which produced the observed cost; clip-only treats
                // the projection as invisible to training and credits
                // the raw sample
                let sample = match mode {
                    GradMode::Full => Node::constant(Tensor::vector(r.u_post.clone())),
                    _ => Node::constant(Tensor::vector(r.u_pre.clone())),
                };
                let ss = autodiff::sum_squares(&autodiff::sub(&sample, &mu_used)?);
                let logp_new = autodiff::add(
                    &autodiff::scale(&ss, -1.0 / (2.0 * sigma_now * sigma_now)),
                    &Node::scalar(logp_const),
                )?;
                let ratio = autodiff::exp(&autodiff::sub(
                    &logp_new,
                    &Node::scalar(r.logprob),
                )?);
                let clipped = autodiff::clip(&ratio, 1.0 - hyper.eps, 1.0 + hyper.eps);
                let surr = node_min(
                    &autodiff::scale(&ratio, adv[i]),
                    &autodiff::scale(&clipped, adv[i]),
                )?;
                let mut loss = autodiff::scale(&surr, -1.0);
                if let Some(aux) = aux {
                    loss = autodiff::add(&loss, &aux)?;
                }
                losses.push(loss);
            }
            let loss = autodiff::mean(&autodiff::concat(&losses)?);
            if !loss.value().all_finite() {
                skipped = true;
                continue;
            }
            last_policy_loss = loss.value().item();
            autodiff::backward(&loss)?;
            let grads: Vec<Tensor> = bound
                .iter()
                .zip(&policy.params)
                .map(|(node, p)| node.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let mut params: Vec<&mut Tensor> = policy.params.iter_mut().collect();
            policy_opt.step(&mut params, &grads);

            // critic minibatch on the same indices
            let cbound = critic.bind();
            let mut closses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = window[i];
                let v = critic.forward(
                    &cbound,
                    &Node::constant(Tensor::vector(r.obs.clone())),
                )?;
                let err = autodiff::sub(&v, &Node::constant(Tensor::vector(vec![returns[i]])))?;
                closses.push(autodiff::sum_squares(&err));
            }
            let closs = autodiff::mean(&autodiff::concat(&closses)?);
            if !closs.value().all_finite() {
                skipped = true;
                continue;
            }
            last_critic_loss = closs.value().item();
            autodiff::backward(&closs)?;
            let cgrads: Vec<Tensor> = cbound
                .iter()
                .zip(&critic.params)
                .map(|(node, p)| node.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let mut cparams: Vec<&mut Tensor> = critic.params.iter_mut().collect();
            critic_opt.step(&mut cparams, &cgrads);
        }
    }
    Ok(PpoStats {
        policy_loss: last_policy_loss,
        critic_loss: last_critic_loss,
        mean_advantage: mean_adv,
        skipped_non_finite: skipped,
    })
}

/// Behavior cloning: mean squared error between the policy output (in
/// normalized units) and expert actions, configurable epochs/lr.
/// Returns the per-epoch MSE curve.
pub fn imitate(
    policy: &mut LstmPolicy,
    dataset: &[(Vec<f64>, Vec<f64>)],
    epochs: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut opt = RmsProp::new(lr);
    let mut curve = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_mse = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(32) {
            let bound = policy.bind();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (obs, target) = &dataset[i];
                let mu = policy.forward(&bound, obs)?;
                let err = autodiff::sub(&mu, &Node::constant(Tensor::vector(target.clone())))?;
                losses.push(autodiff::scale(
                    &autodiff::sum_squares(&err),
                    1.0 / target.len() as f64,
                ));
            }
            let loss = autodiff::mean(&autodiff::concat(&losses)?);
            epoch_mse += loss.value().item() * chunk.len() as f64;
            count += chunk.len();
            autodiff::backward(&loss)?;
            let grads: Vec<Tensor> = bound
                .iter()
                .zip(&policy.params)
                .map(|(node, p)| node.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let mut params: Vec<&mut Tensor> = policy.params.iter_mut().collect();
            opt.step(&mut params, &grads);
        }
        curve.push(epoch_mse / count.max(1) as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;
    use crate::rng;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn sigma_schedule_monotone_endpoints() {
        assert_eq!(sigma_schedule(0.0), 0.1);
        assert!((sigma_schedule(1.0) - 0.01).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let s = sigma_schedule(k as f64 / 20.0);
            assert!(s <= prev && s > 0.0);
            prev = s;
        }
    }

    #[test]
    fn gae_constant_reward_matches_closed_form() {
        // zero values: advantage = discounted (gamma*lambda) sum of
        // rewards, reward = -cost = 1
        let costs = vec![-1.0; 50];
        let values = vec![0.0; 50];
        let (adv, ret) = gae(&costs, &values, 0.9, 0.95);
        let gl: f64 = 0.9 * 0.95;
        let expected = (1.0 - gl.powi(50)) / (1.0 - gl);
        assert!((adv[0] - expected).abs() < 1e-9);
        assert_eq!(adv, ret);
    }

    #[test]
    fn gaussian_logprob_matches_density() {
        let lp = gaussian_logprob(&[1.0, 2.0], &[0.5, 2.5], 0.2);
        let s = 0.2f64;
        let by_hand = (-(0.5f64 * 0.5 + 0.5 * 0.5) / (2.0 * s * s))
            - 2.0 * s.ln()
            - (2.0 * std::f64::consts::PI).ln();
        assert!((lp - by_hand).abs() < 1e-12);
    }

    #[test]
    fn draw_is_deterministic_per_stream() {
        let mu = [0.3, -0.1];
        let a = GaussianPolicyOutput::draw(&mu, 0.1, &mut rng::stream(4, "s"));
        let b = GaussianPolicyOutput::draw(&mu, 0.1, &mut rng::stream(4, "s"));
        assert_eq!(a.sample, b.sample);
        assert!((a.logprob - gaussian_logprob(&a.sample, &mu, 0.1)).abs() < 1e-12);
    }

    fn toy_record(
        obs: Vec<f64>,
        u_pre: Vec<f64>,
        u_post: Vec<f64>,
        cost: f64,
        logprob: f64,
    ) -> RolloutRecord {
        RolloutRecord {
            timestamp: chrono::NaiveDate::from_ymd_opt(2017, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            x: vec![],
            obs,
            local_obs: vec![],
            w_hat: vec![],
            u_pre,
            u_post,
            cost,
            logprob,
            sigma: 0.1,
            relaxed: false,
        }
    }

    #[test]
    fn toy_constrained_optimum_reached() {
        // 1-D problem: cost (u - 2)^2, constraint u <= 1. The
        // constrained optimum is u = 1 with cost 1.
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![1.0, 3.0]);
        let set = LinearConstraintSet::from_inequalities(g, h).unwrap();
        let norm = MinMax::new(0.0, 2.0);
        let mut r = rng::stream(11, "toy-ppo");
        let mut policy = LstmPolicy::new(2, 4, 1, &mut r);
        let mut critic = Mlp::new(&[2, 16, 1], &mut r);
        let mut popt = RmsProp::new(5e-3);
        let mut copt = RmsProp::new(1e-3);
        // steps of the toy env are independent: no bootstrapping
        let hyper = PpoHyper {
            epochs: 4,
            batch: 16,
            gamma: 0.0,
            gae_lambda: 0.0,
            ..PpoHyper::default()
        };
        let sigma = 0.1;
        let obs = vec![0.5, 0.5];
        let build = |_: &RolloutRecord| {
            LinearConstraintSet::from_inequalities(
                DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
                DVector::from_vec(vec![1.0, 3.0]),
            )
        };
        let mut final_cost = f64::INFINITY;
        for _update in 0..100 {
            let mut recs = Vec::new();
            let mut costs = Vec::new();
            for _ in 0..32 {
                let mu_norm = policy.eval(&obs).unwrap();
                let mu = norm.denormalize(mu_norm[0]);
                let mu_p = project(&DVector::from_vec(vec![mu]), &set, 1e-9)
                    .unwrap()
                    .u_star[0];
                let out = GaussianPolicyOutput::draw(&[mu_p], sigma, &mut r);
                let u = project(&DVector::from_vec(out.sample.clone()), &set, 1e-9)
                    .unwrap()
                    .u_star[0];
                let cost = (u - 2.0) * (u - 2.0);
                costs.push(cost);
                let logprob = gaussian_logprob(&[u], &[mu_p], sigma);
                recs.push(toy_record(obs.clone(), out.sample, vec![u], cost, logprob));
            }
            final_cost = costs.iter().sum::<f64>() / costs.len() as f64;
            let refs: Vec<&RolloutRecord> = recs.iter().collect();
            ppo_update(
                &mut policy,
                &mut critic,
                &mut popt,
                &mut copt,
                &refs,
                &build,
                norm,
                sigma,
                &hyper,
                GradMode::Full,
                &mut r,
            )
            .unwrap();
        }
        // optimum cost is 1.0 plus sigma^2 noise floor
        assert!(
            final_cost < 1.05 + 3.0 * sigma * sigma,
            "mean cost {final_cost}"
        );
    }

    #[test]
    fn imitation_of_constant_expert_converges_to_bias() {
        let mut r = rng::stream(8, "imit");
        let mut policy = LstmPolicy::new(2, 4, 2, &mut r);
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..64)
            .map(|i| {
                let v = (i % 8) as f64 / 8.0;
                (vec![v, 1.0 - v, 0.5, v], vec![0.4, 0.6])
            })
            .collect();
        let curve = imitate(&mut policy, &data, 40, 2e-3, &mut r).unwrap();
        assert!(curve[4] < curve[0], "MSE not decreasing: {curve:?}");
        assert!(*curve.last().unwrap() < 1e-2, "final MSE {}", curve.last().unwrap());
        let out = policy.eval(&[0.2, 0.8, 0.5, 0.2]).unwrap();
        assert!((out[0] - 0.4).abs() < 0.1 && (out[1] - 0.6).abs() < 0.1);
    }
}
