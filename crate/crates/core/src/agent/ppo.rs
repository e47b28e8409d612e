//! Clipped-surrogate policy optimisation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::gae::{compute_gae, normalize_advantages, reward_to_go, Trajectory};
use super::network::ForwardCache;
use super::policy::{gaussian_entropy, gaussian_log_prob, PolicyParams, ValueParams};
use crate::error::{Error, Result};

/// Regression target for the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriticTarget {
    /// `advantages + values` from GAE.
    #[default]
    Gae,
    /// Discounted Monte-Carlo reward-to-go.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Whole episodes collected per iteration.
    pub rollout_episodes: usize,
    pub iterations: usize,
    pub entropy_coef: f64,
    pub critic_target: CriticTarget,
    /// Rollout worker threads; 1 is the sequential reference mode.
    pub workers: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            lr_actor: 3e-4,
            lr_critic: 1e-3,
            epochs: 10,
            minibatch_size: 64,
            rollout_episodes: 4,
            iterations: 200,
            entropy_coef: 1e-3,
            critic_target: CriticTarget::Gae,
            workers: 1,
        }
    }
}

impl Hyperparams {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            out.push(format!("ppo.gamma must lie in (0, 1] (got {})", self.gamma));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            out.push(format!("ppo.lambda must lie in (0, 1] (got {})", self.lambda));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps <= 0.5) {
            out.push(format!(
                "ppo.clip_eps must lie in (0, 0.5] (got {})",
                self.clip_eps
            ));
        }
        if !(self.lr_actor > 0.0 && self.lr_actor.is_finite()) {
            out.push(format!("ppo.lr_actor must be > 0 (got {})", self.lr_actor));
        }
        if !(self.lr_critic > 0.0 && self.lr_critic.is_finite()) {
            out.push(format!("ppo.lr_critic must be > 0 (got {})", self.lr_critic));
        }
        if self.epochs == 0 {
            out.push("ppo.epochs must be >= 1".into());
        }
        if self.minibatch_size == 0 {
            out.push("ppo.minibatch_size must be >= 1".into());
        }
        if self.rollout_episodes == 0 {
            out.push("ppo.rollout_episodes must be >= 1".into());
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            out.push(format!(
                "ppo.entropy_coef must be >= 0 (got {})",
                self.entropy_coef
            ));
        }
        if self.workers == 0 {
            out.push("ppo.workers must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Flattened training samples with their advantages and value targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    /// Runs GAE per trajectory and normalises advantages across the batch.
    pub fn from_trajectories(trajs: &[Trajectory], hyper: &Hyperparams) -> Result<Self> {
        let mut batch = Batch::default();
        for t in trajs {
            let (adv, gae_returns) = compute_gae(t, hyper.gamma, hyper.lambda)?;
            let targets = match hyper.critic_target {
                CriticTarget::Gae => gae_returns,
                CriticTarget::MonteCarlo => reward_to_go(t, hyper.gamma)?,
            };
            batch.observations.extend(t.observations.iter().cloned());
            batch.actions.extend_from_slice(&t.actions);
            batch.log_probs.extend_from_slice(&t.log_probs);
            batch.advantages.extend(adv);
            batch.returns.extend(targets);
        }
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        normalize_advantages(&mut batch.advantages);
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Optimiser state carried across iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub actor: Adam,
    pub log_std: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(policy: &PolicyParams, value: &ValueParams, hyper: &Hyperparams) -> Self {
        Optimizers {
            actor: Adam::new(policy.net.n_params(), hyper.lr_actor),
            log_std: Adam::new(1, hyper.lr_actor),
            critic: Adam::new(value.net.n_params(), hyper.lr_critic),
        }
    }
}

/// Gradient of the clipped surrogate (plus entropy bonus) over a set of
/// samples, to be ascended.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorGradient {
    pub objective: f64,
    pub net: Vec<f64>,
    pub log_std: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Evaluates `mean_t min(ρ_t A_t, clip(ρ_t, 1 ± ε) A_t) + c·H` and its
/// gradient over the samples `idx`.
pub fn actor_gradient(
    policy: &PolicyParams,
    batch: &Batch,
    idx: &[usize],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<ActorGradient> {
    let m = idx.len() as f64;
    let log_std = policy.log_std;
    let inv_var = (-2.0 * log_std).exp();
    let mut grad_net = vec![0.0; policy.net.n_params()];
    let mut grad_log_std = 0.0;
    let mut objective = 0.0;
    let (mut ratio_sum, mut clipped, mut kl_sum) = (0.0, 0usize, 0.0);
    let mut cache = ForwardCache::default();
    for &i in idx {
        let mean = policy.net.forward_cached(&batch.observations[i], &mut cache)?;
        let action = batch.actions[i];
        let adv = batch.advantages[i];
        let log_ratio = gaussian_log_prob(action, mean, log_std) - batch.log_probs[i];
        let ratio = log_ratio.exp();
        let surrogate = ratio * adv;
        let clipped_surrogate = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        ratio_sum += ratio;
        kl_sum += (ratio - 1.0) - log_ratio;
        objective += surrogate.min(clipped_surrogate) / m;
        // the min takes the clipped branch, which is flat in θ, exactly when
        // the ratio has moved past the clip edge in the advantage's favour
        let clip_active =
            (adv > 0.0 && ratio > 1.0 + clip_eps) || (adv < 0.0 && ratio < 1.0 - clip_eps);
        if clip_active {
            clipped += 1;
            continue;
        }
        // ∂/∂logπ of ρ·A is ρ·A
        let d_logp = ratio * adv / m;
        let diff = action - mean;
        let d_mean = d_logp * diff * inv_var;
        grad_log_std += d_logp * (diff * diff * inv_var - 1.0);
        policy.net.backward(&cache, d_mean, &mut grad_net);
    }
    objective += entropy_coef * gaussian_entropy(log_std);
    grad_log_std += entropy_coef;
    Ok(ActorGradient {
        objective,
        net: grad_net,
        log_std: grad_log_std,
        mean_ratio: ratio_sum / m,
        clip_fraction: clipped as f64 / m,
        approx_kl: kl_sum / m,
    })
}

/// `mean (V(o) − target)²` and its gradient over `idx`.
pub fn critic_gradient(value: &ValueParams, batch: &Batch, idx: &[usize]) -> Result<(f64, Vec<f64>)> {
    let m = idx.len() as f64;
    let mut grad = vec![0.0; value.net.n_params()];
    let mut loss = 0.0;
    let mut cache = ForwardCache::default();
    for &i in idx {
        let v = value.value_cached(&batch.observations[i], &mut cache)?;
        let err = v - batch.returns[i];
        loss += err * err / m;
        value.net.backward(&cache, 2.0 * err / m, &mut grad);
    }
    Ok((loss, grad))
}

fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::integrity(format!("non-finite {what} gradient")))
    }
}

/// One Adam step on the critic; returns the pre-step loss.
pub fn critic_step(
    value: &mut ValueParams,
    opt: &mut Adam,
    batch: &Batch,
    idx: &[usize],
) -> Result<f64> {
    let (loss, grad) = critic_gradient(value, batch, idx)?;
    ensure_finite("critic", &grad)?;
    opt.step(value.net.params_mut(), &grad);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_objective: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

/// Runs `epochs` passes of shuffled minibatch updates on both networks.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    value: &mut ValueParams,
    opt: &mut Optimizers,
    batch: &Batch,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    let mut n_mb = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for idx in order.chunks(hyper.minibatch_size) {
            let g = actor_gradient(policy, batch, idx, hyper.clip_eps, hyper.entropy_coef)?;
            ensure_finite("actor", &g.net)?;
            ensure_finite("log-std", &[g.log_std])?;
            let neg: Vec<f64> = g.net.iter().map(|x| -x).collect();
            opt.actor.step(policy.net.params_mut(), &neg);
            let mut log_std = [policy.log_std];
            opt.log_std.step(&mut log_std, &[-g.log_std]);
            policy.log_std = log_std[0];
            policy.clamp_log_std();

            let value_loss = critic_step(value, &mut opt.critic, batch, idx)?;

            stats.mean_ratio += g.mean_ratio;
            stats.clip_fraction += g.clip_fraction;
            stats.policy_objective += g.objective;
            stats.approx_kl += g.approx_kl;
            stats.value_loss += value_loss;
            n_mb += 1;
        }
    }
    let k = n_mb as f64;
    stats.mean_ratio /= k;
    stats.clip_fraction /= k;
    stats.policy_objective /= k;
    stats.approx_kl /= k;
    stats.value_loss /= k;
    stats.entropy = gaussian_entropy(policy.log_std);
    if !policy.is_finite() {
        return Err(Error::integrity("policy parameters became non-finite"));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::policy::sample_action;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(policy: &PolicyParams, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = policy.net.input_dim();
        let mut b = Batch::default();
        for _ in 0..n {
            let obs: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
            let (a, lp) = sample_action(policy, &obs, &mut rng).unwrap();
            b.observations.push(obs);
            b.actions.push(a);
            b.log_probs.push(lp);
            b.advantages.push(rng.random_range(-1.0..1.0));
            b.returns.push(rng.random_range(-2.0..2.0));
        }
        b
    }

    fn objective_at(policy: &PolicyParams, batch: &Batch, idx: &[usize], eps: f64, c: f64) -> f64 {
        actor_gradient(policy, batch, idx, eps, c).unwrap().objective
    }

    #[test]
    fn ratio_one_at_collection_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParams::init(5, &mut rng);
        let b = random_batch(&p, 32, 1);
        let idx: Vec<usize> = (0..32).collect();
        let g = actor_gradient(&p, &b, &idx, 0.2, 0.0).unwrap();
        assert!((g.mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(g.clip_fraction, 0.0);
        // equals the plain policy-gradient surrogate mean(A)
        let mean_adv = b.advantages.iter().sum::<f64>() / 32.0;
        assert!((g.objective - mean_adv).abs() < 1e-12);
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParams::init(5, &mut rng);
        let mut b = random_batch(&p, 16, 2);
        b.advantages.iter_mut().for_each(|a| *a = 0.0);
        let idx: Vec<usize> = (0..16).collect();
        let g = actor_gradient(&p, &b, &idx, 0.2, 0.0).unwrap();
        assert_eq!(g.objective, 0.0);
        assert!(g.net.iter().all(|&x| x == 0.0));
        assert_eq!(g.log_std, 0.0);
    }

    #[test]
    fn single_parameter_score_function() {
        // only the output bias is non-zero, so the mean is that bias
        let mut p = PolicyParams::zeros(2);
        let n = p.net.n_params();
        p.net.params_mut()[n - 1] = 0.3;
        p.log_std = 0.4f64.ln();
        let (action, adv) = (0.55, 1.7);
        let b = Batch {
            observations: vec![vec![0.2, 0.8]],
            actions: vec![action],
            log_probs: vec![gaussian_log_prob(action, 0.3, p.log_std)],
            advantages: vec![adv],
            returns: vec![0.0],
        };
        let g = actor_gradient(&p, &b, &[0], 0.2, 0.0).unwrap();
        let analytic = adv * (action - 0.3) / (0.4 * 0.4);
        assert!(((g.net[n - 1] - analytic) / analytic).abs() < 1e-6);
        let analytic_log_std = adv * ((action - 0.3f64).powi(2) / 0.16 - 1.0);
        assert!(((g.log_std - analytic_log_std) / analytic_log_std).abs() < 1e-6);

        let mut value = ValueParams::init(2, &mut ChaCha8Rng::seed_from_u64(0));
        let hyper = Hyperparams {
            epochs: 1,
            entropy_coef: 0.0,
            ..Hyperparams::default()
        };
        let mut opt = Optimizers::new(&p, &value, &hyper);
        let before = p.net.params()[n - 1];
        ppo_update(&mut p, &mut value, &mut opt, &b, &hyper, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let moved = p.net.params()[n - 1] - before;
        assert!(moved * analytic > 0.0);
        assert!((moved.abs() - hyper.lr_actor).abs() < 1e-9);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = PolicyParams::init(4, &mut rng);
        let b = random_batch(&p, 12, 8);
        // move away from the collection point so ratios differ from one
        // but stay inside the clip band
        for x in p.net.params_mut().iter_mut().step_by(17) {
            *x += 0.002;
        }
        p.log_std += 0.01;
        let idx: Vec<usize> = (0..12).collect();
        let g = actor_gradient(&p, &b, &idx, 0.2, 0.01).unwrap();
        assert_eq!(g.clip_fraction, 0.0);
        let h = 1e-5;
        for i in (0..p.net.n_params()).step_by(97) {
            let mut up = p.clone();
            up.net.params_mut()[i] += h;
            let mut down = p.clone();
            down.net.params_mut()[i] -= h;
            let fd = (objective_at(&up, &b, &idx, 0.2, 0.01) - objective_at(&down, &b, &idx, 0.2, 0.01))
                / (2.0 * h);
            let scale = fd.abs().max(g.net[i].abs()).max(1e-7);
            assert!((fd - g.net[i]).abs() / scale < 1e-4, "param {i}: {} vs {fd}", g.net[i]);
        }
        let mut up = p.clone();
        up.log_std += h;
        let mut down = p.clone();
        down.log_std -= h;
        let fd = (objective_at(&up, &b, &idx, 0.2, 0.01) - objective_at(&down, &b, &idx, 0.2, 0.01))
            / (2.0 * h);
        assert!((fd - g.log_std).abs() / fd.abs().max(1e-7) < 1e-4);
    }

    #[test]
    fn clip_is_inert_inside_the_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = PolicyParams::init(3, &mut rng);
        let b = random_batch(&p, 20, 4);
        p.net.params_mut()[0] += 0.01;
        let idx: Vec<usize> = (0..20).collect();
        let g = actor_gradient(&p, &b, &idx, 0.2, 0.0).unwrap();
        assert_eq!(g.clip_fraction, 0.0);
        let unclipped: f64 = idx
            .iter()
            .map(|&i| {
                let mean = p.net.forward(&b.observations[i]).unwrap();
                let r = (gaussian_log_prob(b.actions[i], mean, p.log_std) - b.log_probs[i]).exp();
                r * b.advantages[i]
            })
            .sum::<f64>()
            / 20.0;
        assert!((g.objective - unclipped).abs() < 1e-14);
    }

    #[test]
    fn clipped_samples_contribute_no_gradient() {
        let mut p = PolicyParams::zeros(1);
        let n = p.net.n_params();
        p.net.params_mut()[n - 1] = 0.0;
        // sample far more likely now than at collection: ratio ≫ 1 + ε
        let b = Batch {
            observations: vec![vec![0.0]],
            actions: vec![0.0],
            log_probs: vec![gaussian_log_prob(0.0, 1.0, p.log_std)],
            advantages: vec![1.0],
            returns: vec![0.0],
        };
        let g = actor_gradient(&p, &b, &[0], 0.2, 0.0).unwrap();
        assert_eq!(g.clip_fraction, 1.0);
        assert!(g.net.iter().all(|&x| x == 0.0));
        assert!((g.objective - 1.2).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = PolicyParams::init(6, &mut rng);
        let mut v = ValueParams::init(6, &mut rng);
        let b = random_batch(&p, 64, 13);
        let idx: Vec<usize> = (0..64).collect();
        let mut opt = Adam::new(v.net.n_params(), Hyperparams::default().lr_critic);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let loss = critic_step(&mut v, &mut opt, &b, &idx).unwrap();
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyParams::init(2, &mut rng);
        let mut v = ValueParams::init(2, &mut rng);
        let mut b = random_batch(&p, 4, 1);
        b.advantages[0] = f64::NAN;
        let hyper = Hyperparams::default();
        let mut opt = Optimizers::new(&p, &v, &hyper);
        let err = ppo_update(&mut p, &mut v, &mut opt, &b, &hyper, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            gamma: 0.0,
            clip_eps: 0.7,
            lr_actor: -1.0,
            ..Hyperparams::default()
        };
        match bad.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
