//! Recurrent PPO with asymmetric actor-critic: parallel rollout collection,
//! generalized advantage estimation, and clipped policy updates with
//! backprop through time over fixed-horizon chunks.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::{Action, InsertionEnv, Observation, PoseErrorMode, PrivilegedState};
use crate::nn::{Parameterized, RunningNorm, RunningScalar};
use crate::policy::{
    action_log_prob, action_log_prob_grad, sample_action, Actor, ActorCritic, ActorOutput,
    ActorOutputGrad, Critic, NetworkSpec, POSE_DIM,
};
use crate::sampling::{derive_stream, StreamKind};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("environment diverged during training: {0}")]
    Divergence(#[from] crate::world::DivergenceError),
    #[error("non-finite loss at update {update}: {detail}")]
    NonFiniteLoss { update: u64, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Fixed-horizon rollout storage, laid out [T] x [B, dim].
pub struct RolloutBuffer {
    pub horizon: usize,
    pub num_envs: usize,
    pub obs: Vec<Array2<f64>>,
    pub privileged: Vec<Array2<f64>>,
    pub actions: Vec<Array2<f64>>,
    pub log_probs: Vec<Array1<f64>>,
    pub rewards: Vec<Array1<f64>>,
    pub values: Vec<Array1<f64>>,
    pub dones: Vec<Array1<f64>>,
    pub actor_h0: Array2<f64>,
    pub critic_h0: Array2<f64>,
    pub bootstrap_value: Array1<f64>,
}

impl RolloutBuffer {
    fn new(horizon: usize, num_envs: usize, obs_dim: usize, priv_dim: usize, hidden: usize) -> Self {
        Self {
            horizon,
            num_envs,
            obs: (0..horizon).map(|_| Array2::zeros((num_envs, obs_dim))).collect(),
            privileged: (0..horizon)
                .map(|_| Array2::zeros((num_envs, priv_dim)))
                .collect(),
            actions: (0..horizon)
                .map(|_| Array2::zeros((num_envs, Action::DIM)))
                .collect(),
            log_probs: (0..horizon).map(|_| Array1::zeros(num_envs)).collect(),
            rewards: (0..horizon).map(|_| Array1::zeros(num_envs)).collect(),
            values: (0..horizon).map(|_| Array1::zeros(num_envs)).collect(),
            dones: (0..horizon).map(|_| Array1::zeros(num_envs)).collect(),
            actor_h0: Array2::zeros((num_envs, hidden)),
            critic_h0: Array2::zeros((num_envs, hidden)),
            bootstrap_value: Array1::zeros(num_envs),
        }
    }
}

/// Generalized advantage estimation over [T] x [B] arrays with done masks.
/// `bootstrap` is V(s_T); a done at step t cuts both bootstrapping and the
/// advantage recursion. Returns (advantages, returns = advantages + values).
pub fn compute_gae(
    rewards: &[Array1<f64>],
    values: &[Array1<f64>],
    dones: &[Array1<f64>],
    bootstrap: &Array1<f64>,
    gamma: f64,
    lambda: f64,
) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let horizon = rewards.len();
    assert_eq!(values.len(), horizon, "values length mismatch");
    assert_eq!(dones.len(), horizon, "dones length mismatch");
    let num_envs = bootstrap.len();
    let mut advantages = vec![Array1::<f64>::zeros(num_envs); horizon];
    let mut returns = vec![Array1::<f64>::zeros(num_envs); horizon];
    let mut next_adv = Array1::<f64>::zeros(num_envs);
    for t in (0..horizon).rev() {
        let next_value = if t + 1 < horizon {
            values[t + 1].clone()
        } else {
            bootstrap.clone()
        };
        for i in 0..num_envs {
            let not_done = 1.0 - dones[t][i];
            let delta = rewards[t][i] + gamma * next_value[i] * not_done - values[t][i];
            next_adv[i] = delta + gamma * lambda * not_done * next_adv[i];
            advantages[t][i] = next_adv[i];
            returns[t][i] = next_adv[i] + values[t][i];
        }
    }
    (advantages, returns)
}

/// Per-update loss statistics.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub pi_loss: f64,
    pub v_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Completed-episode statistics aggregated between log rows.
#[derive(Debug, Clone, Default)]
struct EpisodeWindow {
    returns: Vec<f64>,
    successes: Vec<bool>,
    f_means: Vec<f64>,
    term_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct EpisodeAccum {
    ret: f64,
    force_sum: f64,
    steps: u32,
    term_correct: u32,
    success_any: bool,
}

/// One row of the training metrics log.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub f_mean: f64,
    pub term_accuracy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// Early-stop rule for acceptance-style runs: stop once an intermediate
/// evaluation reaches the target success rate.
#[derive(Debug, Clone)]
pub struct StopOnSuccess {
    pub target_success_rate: f64,
    pub episodes: usize,
    /// Ring error bands (m) cycled across evaluation episodes.
    pub eval_error_bands: Vec<(f64, f64)>,
}

/// Training options beyond the run config.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub stop: Option<StopOnSuccess>,
    /// Resume parameters and normalizers from a checkpoint.
    pub resume: Option<Checkpoint>,
    /// Write no files when true (used by in-process determinism checks).
    pub quiet: bool,
}

/// Outcome of a training run.
pub struct TrainResult {
    pub actor: Actor,
    pub critic: Critic,
    pub obs_norm: RunningNorm,
    pub priv_norm: RunningNorm,
    pub env_steps: u64,
    pub metrics: Vec<MetricsRow>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_eval_success: Option<f64>,
}

pub struct Trainer {
    cfg: RunConfig,
    envs: Vec<InsertionEnv>,
    pub ac: ActorCritic,
    pub obs_norm: RunningNorm,
    pub priv_norm: RunningNorm,
    ret_norm: RunningScalar,
    actor_h: Array2<f64>,
    critic_h: Array2<f64>,
    last_obs: Vec<Observation>,
    last_priv: Vec<PrivilegedState>,
    policy_rngs: Vec<ChaCha8Rng>,
    shuffle_rng: ChaCha8Rng,
    accum: Vec<EpisodeAccum>,
    window: EpisodeWindow,
    pub env_steps: u64,
    update_idx: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, options: &TrainOptions) -> Self {
        let spec = NetworkSpec::new(
            cfg.ppo.encoder_hidden.clone(),
            cfg.ppo.recurrent_hidden,
        );
        let mut init_rng = derive_stream(cfg.seed, 0, 0, StreamKind::Policy);
        let mut ac = ActorCritic::new(&spec, cfg.ppo.initial_log_std, &mut init_rng);
        let mut obs_norm = RunningNorm::new(spec.obs_dim);
        let mut priv_norm = RunningNorm::new(spec.priv_dim);
        let mut env_steps = 0;
        if let Some(ck) = &options.resume {
            ck.load_into(&mut ac.actor, &mut ac.critic);
            obs_norm = ck.obs_norm.clone();
            priv_norm = ck.priv_norm.clone();
            env_steps = ck.env_steps;
        }

        let env_cfg = cfg.env_config(PoseErrorMode::TrainGaussian);
        let mut envs = Vec::with_capacity(cfg.ppo.num_envs);
        let mut last_obs = Vec::with_capacity(cfg.ppo.num_envs);
        let mut last_priv = Vec::with_capacity(cfg.ppo.num_envs);
        for i in 0..cfg.ppo.num_envs {
            let mut env = InsertionEnv::new(env_cfg.clone(), cfg.seed, i as u64);
            let (obs, privileged) = env.reset();
            last_obs.push(obs);
            last_priv.push(privileged);
            envs.push(env);
        }
        let policy_rngs = (0..cfg.ppo.num_envs)
            .map(|i| derive_stream(cfg.seed, i as u64, 1, StreamKind::Policy))
            .collect();
        let actor_h = ac.actor.initial_hidden(cfg.ppo.num_envs);
        let critic_h = ac.critic.initial_hidden(cfg.ppo.num_envs);
        Self {
            envs,
            ac,
            obs_norm,
            priv_norm,
            ret_norm: RunningScalar::new(),
            actor_h,
            critic_h,
            last_obs,
            last_priv,
            policy_rngs,
            shuffle_rng: derive_stream(cfg.seed, u64::MAX, 0, StreamKind::Update),
            accum: vec![EpisodeAccum::default(); cfg.ppo.num_envs],
            window: EpisodeWindow::default(),
            env_steps,
            update_idx: 0,
            cfg: cfg.clone(),
        }
    }

    fn normalized_obs_matrix(&mut self, update_stats: bool) -> Array2<f64> {
        let n = self.envs.len();
        let mut mat = Array2::zeros((n, Observation::DIM));
        for i in 0..n {
            let mut row = self.last_obs[i].to_vec();
            if update_stats {
                self.obs_norm.update_row(&row);
            }
            self.obs_norm.normalize_row(&mut row);
            for (j, v) in row.iter().enumerate() {
                mat[[i, j]] = *v;
            }
        }
        mat
    }

    fn normalized_priv_matrix(&mut self, update_stats: bool) -> Array2<f64> {
        let n = self.envs.len();
        let mut mat = Array2::zeros((n, PrivilegedState::DIM));
        for i in 0..n {
            let mut row = self.last_priv[i].to_vec();
            if update_stats {
                self.priv_norm.update_row(&row);
            }
            self.priv_norm.normalize_row(&mut row);
            for (j, v) in row.iter().enumerate() {
                mat[[i, j]] = *v;
            }
        }
        mat
    }

    fn denorm_value(&self, v_norm: f64) -> f64 {
        v_norm * self.ret_norm.std() + self.ret_norm.mean
    }

    /// Collects one fixed-horizon chunk from all environments.
    fn collect(&mut self) -> Result<RolloutBuffer, TrainError> {
        let ppo = self.cfg.ppo.clone();
        let mut buf = RolloutBuffer::new(
            ppo.horizon,
            ppo.num_envs,
            Observation::DIM,
            PrivilegedState::DIM,
            ppo.recurrent_hidden,
        );
        buf.actor_h0 = self.actor_h.clone();
        buf.critic_h0 = self.critic_h.clone();

        for t in 0..ppo.horizon {
            let obs_mat = self.normalized_obs_matrix(true);
            let priv_mat = self.normalized_priv_matrix(true);
            let (actor_out, actor_h_new, _) = self.ac.actor.forward(&obs_mat, &self.actor_h);
            let (values_norm, critic_h_new, _) = self.ac.critic.forward(&priv_mat, &self.critic_h);
            self.actor_h = actor_h_new;
            self.critic_h = critic_h_new;

            let mut actions = Vec::with_capacity(ppo.num_envs);
            for i in 0..ppo.num_envs {
                let a = sample_action(&actor_out, i, &mut self.policy_rngs[i]);
                buf.log_probs[t][i] = action_log_prob(&actor_out, i, &a.delta_pose, a.a_et);
                for (j, v) in a.to_slice().iter().enumerate() {
                    buf.actions[t][[i, j]] = *v;
                }
                actions.push(a);
            }
            buf.obs[t] = obs_mat;
            buf.privileged[t] = priv_mat;
            for i in 0..ppo.num_envs {
                buf.values[t][i] = self.denorm_value(values_norm[i]);
            }

            let outcomes: Vec<_> = self
                .envs
                .par_iter_mut()
                .zip(actions.par_iter())
                .map(|(env, action)| env.step(action))
                .collect();

            for (i, outcome) in outcomes.into_iter().enumerate() {
                let out = outcome?;
                buf.rewards[t][i] = out.reward;
                let acc = &mut self.accum[i];
                acc.ret += out.reward;
                acc.force_sum += out.info.force_mean;
                acc.steps += 1;
                let predicted = actions[i].a_et >= 0.5;
                if predicted == out.info.success {
                    acc.term_correct += 1;
                }
                acc.success_any |= out.info.success;
                if out.done {
                    buf.dones[t][i] = 1.0;
                    let acc = std::mem::take(&mut self.accum[i]);
                    self.window.returns.push(acc.ret);
                    self.window.successes.push(acc.success_any);
                    self.window.f_means.push(acc.force_sum / acc.steps.max(1) as f64);
                    self.window
                        .term_accuracy
                        .push(acc.term_correct as f64 / acc.steps.max(1) as f64);
                    let (obs, privileged) = self.envs[i].reset();
                    self.last_obs[i] = obs;
                    self.last_priv[i] = privileged;
                    for v in self.actor_h.row_mut(i) {
                        *v = 0.0;
                    }
                    for v in self.critic_h.row_mut(i) {
                        *v = 0.0;
                    }
                } else {
                    self.last_obs[i] = out.observation;
                    self.last_priv[i] = out.privileged;
                }
            }
            self.env_steps += ppo.num_envs as u64;
        }

        // Bootstrap value of the post-chunk states (stats not updated here;
        // these rows are consumed at the start of the next chunk).
        let priv_mat = self.normalized_priv_matrix(false);
        let (values_norm, _, _) = self.ac.critic.forward(&priv_mat, &self.critic_h);
        for i in 0..ppo.num_envs {
            buf.bootstrap_value[i] = self.denorm_value(values_norm[i]);
        }
        Ok(buf)
    }

    /// Runs the clipped PPO update over the collected chunk.
    fn update(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats, TrainError> {
        let ppo = self.cfg.ppo.clone();
        let (advantages, returns) = compute_gae(
            &buf.rewards,
            &buf.values,
            &buf.dones,
            &buf.bootstrap_value,
            ppo.gamma,
            ppo.gae_lambda,
        );

        for row in &returns {
            for &r in row {
                self.ret_norm.update(r);
            }
        }
        let (ret_mean, ret_std) = (self.ret_norm.mean, self.ret_norm.std());

        // Whole-batch advantage normalization.
        let n_total = (ppo.horizon * ppo.num_envs) as f64;
        let adv_mean = advantages.iter().map(|r| r.sum()).sum::<f64>() / n_total;
        let adv_var = advantages
            .iter()
            .map(|r| r.iter().map(|v| (v - adv_mean) * (v - adv_mean)).sum::<f64>())
            .sum::<f64>()
            / n_total;
        let adv_std = adv_var.sqrt().max(1e-8);
        let advantages: Vec<Array1<f64>> = advantages
            .into_iter()
            .map(|r| r.mapv(|v| (v - adv_mean) / adv_std))
            .collect();
        let targets_norm: Vec<Array1<f64>> = returns
            .iter()
            .map(|r| r.mapv(|v| (v - ret_mean) / ret_std))
            .collect();

        let lr = if ppo.lr_decay {
            let total_updates =
                (ppo.total_env_steps / (ppo.num_envs * ppo.horizon) as u64).max(1);
            let frac = 1.0 - (self.update_idx as f64 / total_updates as f64).min(0.99);
            ppo.learning_rate * frac
        } else {
            ppo.learning_rate
        };

        let mut stats = UpdateStats::default();
        let mut stat_samples = 0.0;
        let env_indices: Vec<usize> = (0..ppo.num_envs).collect();
        let group_size = ppo.num_envs / ppo.minibatches;

        for _epoch in 0..ppo.epochs {
            let mut order = env_indices.clone();
            order.shuffle(&mut self.shuffle_rng);
            for group in order.chunks(group_size) {
                // Split the minibatch into a fixed number of chunks
                // processed in parallel with cloned networks; gradients are
                // summed serially in chunk order, so results are identical
                // for any worker thread count.
                let n_chunks = 4.min(group.len());
                let chunk_size = group.len().div_ceil(n_chunks);
                let chunks: Vec<&[usize]> = group.chunks(chunk_size).collect();
                let results: Vec<(Actor, Critic, MinibatchStats)> = chunks
                    .par_iter()
                    .map(|chunk| {
                        let mut actor = self.ac.actor.clone();
                        let mut critic = self.ac.critic.clone();
                        actor.zero_grad();
                        critic.zero_grad();
                        let st = bptt_minibatch(
                            &mut actor,
                            &mut critic,
                            buf,
                            chunk,
                            &advantages,
                            &targets_norm,
                            &ppo,
                            group.len(),
                        );
                        (actor, critic, st)
                    })
                    .collect();

                self.ac.actor.zero_grad();
                self.ac.critic.zero_grad();
                let mut mb = MinibatchStats::default();
                for (mut a, mut c, st) in results {
                    self.ac.actor.add_grads_from(&mut a);
                    self.ac.critic.add_grads_from(&mut c);
                    mb.merge(&st);
                }
                if !mb.pi_loss.is_finite() || !mb.v_loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        update: self.update_idx,
                        detail: format!("pi_loss={}, v_loss={}", mb.pi_loss, mb.v_loss),
                    });
                }

                // Entropy bonus on the Gaussian pose head (constant per
                // sample, applied once per optimizer step).
                for g in self.ac.actor.g_log_std.iter_mut() {
                    *g -= ppo.entropy_coef;
                }

                let a_norm = clip_grad_norm(&mut self.ac.actor, ppo.max_grad_norm);
                let c_norm = clip_grad_norm(&mut self.ac.critic, ppo.max_grad_norm);
                self.ac.actor_opt.step(&mut self.ac.actor, lr);
                self.ac.critic_opt.step(&mut self.ac.critic, lr);
                self.ac.actor.clamp_log_std();

                stats.pi_loss += mb.pi_loss;
                stats.v_loss += mb.v_loss;
                stats.approx_kl += mb.kl_sum / mb.n as f64;
                stats.clip_frac += mb.clipped as f64 / mb.n as f64;
                stats.actor_grad_norm += a_norm;
                stats.critic_grad_norm += c_norm;
                stat_samples += 1.0;
            }
        }
        stats.pi_loss /= stat_samples;
        stats.v_loss /= stat_samples;
        stats.approx_kl /= stat_samples;
        stats.clip_frac /= stat_samples;
        stats.actor_grad_norm /= stat_samples;
        stats.critic_grad_norm /= stat_samples;
        stats.entropy = crate::policy::gaussian_entropy(&self.ac.actor.log_std);
        self.update_idx += 1;
        Ok(stats)
    }

    fn drain_window(&mut self) -> MetricsRow {
        let w = std::mem::take(&mut self.window);
        let n = w.returns.len().max(1) as f64;
        MetricsRow {
            env_steps: self.env_steps,
            mean_return: w.returns.iter().sum::<f64>() / n,
            success_rate: w.successes.iter().filter(|&&s| s).count() as f64 / n,
            f_mean: w.f_means.iter().sum::<f64>() / n,
            term_accuracy: w.term_accuracy.iter().sum::<f64>() / n,
            approx_kl: 0.0,
            clip_frac: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct MinibatchStats {
    pi_loss: f64,
    v_loss: f64,
    kl_sum: f64,
    clipped: usize,
    n: usize,
}

impl MinibatchStats {
    fn merge(&mut self, other: &MinibatchStats) {
        self.pi_loss += other.pi_loss;
        self.v_loss += other.v_loss;
        self.kl_sum += other.kl_sum;
        self.clipped += other.clipped;
        self.n += other.n;
    }
}

/// Forward + backward through time for a set of environment sequences,
/// accumulating gradients into the given networks. `mb_size` is the full
/// minibatch row count (for loss averaging across parallel chunks).
#[allow(clippy::too_many_arguments)]
fn bptt_minibatch(
    actor: &mut Actor,
    critic: &mut Critic,
    buf: &RolloutBuffer,
    rows: &[usize],
    advantages: &[Array1<f64>],
    targets_norm: &[Array1<f64>],
    ppo: &crate::config::PpoConfig,
    mb_size: usize,
) -> MinibatchStats {
    let horizon = buf.horizon;
    let b = rows.len();
    let n_samples = (horizon * mb_size) as f64;

    let select = |mat: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::zeros((b, mat.ncols()));
        for (k, &i) in rows.iter().enumerate() {
            out.row_mut(k).assign(&mat.row(i));
        }
        out
    };

    // Forward pass, replaying the stored episode-reset pattern.
    let mut h_a = select(&buf.actor_h0);
    let mut h_c = select(&buf.critic_h0);
    let mut actor_caches = Vec::with_capacity(horizon);
    let mut critic_caches = Vec::with_capacity(horizon);
    let mut actor_outs: Vec<ActorOutput> = Vec::with_capacity(horizon);
    let mut values_norm: Vec<Array1<f64>> = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let obs = select(&buf.obs[t]);
        let priv_mat = select(&buf.privileged[t]);
        let (out, h_a_new, a_cache) = actor.forward(&obs, &h_a);
        let (v, h_c_new, c_cache) = critic.forward(&priv_mat, &h_c);
        h_a = h_a_new;
        h_c = h_c_new;
        for (k, &i) in rows.iter().enumerate() {
            if buf.dones[t][i] > 0.5 {
                for x in h_a.row_mut(k) {
                    *x = 0.0;
                }
                for x in h_c.row_mut(k) {
                    *x = 0.0;
                }
            }
        }
        actor_caches.push(a_cache);
        critic_caches.push(c_cache);
        actor_outs.push(out);
        values_norm.push(v);
    }

    // Per-step loss gradients.
    let mut stats = MinibatchStats {
        n: horizon * b,
        ..Default::default()
    };
    let mut actor_grads: Vec<ActorOutputGrad> = Vec::with_capacity(horizon);
    let mut value_grads: Vec<Array1<f64>> = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let out = &actor_outs[t];
        let mut d_mean = Array2::zeros((b, POSE_DIM));
        let mut d_log_std = Array1::zeros(POSE_DIM);
        let mut d_alpha = Array1::zeros(b);
        let mut d_beta = Array1::zeros(b);
        let mut d_value = Array1::zeros(b);
        for (k, &i) in rows.iter().enumerate() {
            let mut pose = [0.0; POSE_DIM];
            for j in 0..POSE_DIM {
                pose[j] = buf.actions[t][[i, j]];
            }
            let a_et = buf.actions[t][[i, POSE_DIM]];
            let adv = advantages[t][i];
            let logp_old = buf.log_probs[t][i];
            let logp_new = action_log_prob(out, k, &pose, a_et);
            let ratio = (logp_new - logp_old).exp();
            stats.kl_sum += logp_old - logp_new;

            let clipped = (adv > 0.0 && ratio > 1.0 + ppo.clip_eps)
                || (adv < 0.0 && ratio < 1.0 - ppo.clip_eps);
            let surr = -(ratio * adv).min(ratio.clamp(1.0 - ppo.clip_eps, 1.0 + ppo.clip_eps) * adv);
            stats.pi_loss += surr / n_samples;
            if (ratio - 1.0).abs() > ppo.clip_eps {
                stats.clipped += 1;
            }
            if !clipped {
                // dLoss/dlogp = -adv * ratio (surrogate active branch).
                let coef = -adv * ratio / n_samples;
                let g = action_log_prob_grad(out, k, &pose, a_et);
                for j in 0..POSE_DIM {
                    d_mean[[k, j]] += coef * g.d_mean[j];
                    d_log_std[j] += coef * g.d_log_std[j];
                }
                d_alpha[k] += coef * g.d_alpha;
                d_beta[k] += coef * g.d_beta;
            }

            let v_err = values_norm[t][k] - targets_norm[t][i];
            stats.v_loss += 0.5 * v_err * v_err / n_samples;
            d_value[k] = ppo.value_coef * v_err / n_samples;
        }
        actor_grads.push(ActorOutputGrad {
            d_mean,
            d_log_std,
            d_alpha,
            d_beta,
        });
        value_grads.push(d_value);
    }

    // Backward through time. Gradients do not flow across episode resets:
    // rows that were reset after step t had their hidden zeroed, so the
    // future gradient is cut there.
    let mut grad_h_a = Array2::zeros((b, actor.hidden_dim()));
    let mut grad_h_c = Array2::zeros((b, critic.spec.recurrent_hidden));
    for t in (0..horizon).rev() {
        for (k, &i) in rows.iter().enumerate() {
            if buf.dones[t][i] > 0.5 {
                for x in grad_h_a.row_mut(k) {
                    *x = 0.0;
                }
                for x in grad_h_c.row_mut(k) {
                    *x = 0.0;
                }
            }
        }
        grad_h_a = actor.backward(&actor_caches[t], &actor_grads[t], &grad_h_a);
        grad_h_c = critic.backward(&critic_caches[t], &value_grads[t], &grad_h_c);
    }
    stats
}

fn clip_grad_norm(net: &mut impl Parameterized, max_norm: f64) -> f64 {
    let norm = net.grad_norm();
    if norm > max_norm && norm > 0.0 {
        net.scale_grads(max_norm / norm);
    }
    norm
}

/// Writes the append-only training metrics CSV.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::create(path)?;
        let mut inner = csv::Writer::from_writer(file);
        inner
            .write_record([
                "step",
                "return",
                "success_rate",
                "f_mean",
                "term_accuracy",
                "kl",
                "clip_frac",
            ])
            .map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        self.inner
            .write_record([
                row.env_steps.to_string(),
                row.mean_return.to_string(),
                row.success_rate.to_string(),
                row.f_mean.to_string(),
                row.term_accuracy.to_string(),
                row.approx_kl.to_string(),
                row.clip_frac.to_string(),
            ])
            .map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
        self.inner
            .flush()
            .map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

/// Full training entry point: collects, updates, logs, checkpoints, and
/// optionally stops early once an intermediate evaluation hits a target.
pub fn train(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    options: &TrainOptions,
) -> Result<TrainResult, TrainError> {
    let mut trainer = Trainer::new(cfg, options);
    let ppo = cfg.ppo.clone();

    let mut writer = match out_dir {
        Some(dir) if !options.quiet => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::create(&dir.join("metrics.csv"))?)
        }
        _ => None,
    };

    let mut metrics = Vec::new();
    let mut recent_checkpoints: Vec<PathBuf> = Vec::new();
    let mut next_checkpoint = ppo.checkpoint_every_steps;
    let mut next_eval = ppo.eval_every_steps;
    let mut final_eval_success = None;

    while trainer.env_steps < ppo.total_env_steps {
        let buf = trainer.collect()?;
        let stats = trainer.update(&buf)?;

        // A metrics row is emitted only when episodes completed during the
        // window (episodes span several collection chunks).
        if !trainer.window.returns.is_empty() {
            let mut row = trainer.drain_window();
            row.approx_kl = stats.approx_kl;
            row.clip_frac = stats.clip_frac;
            if let Some(w) = writer.as_mut() {
                w.write(&row)?;
            }
            metrics.push(row);
        }

        if trainer.env_steps >= next_checkpoint {
            next_checkpoint += ppo.checkpoint_every_steps;
            if let Some(dir) = out_dir {
                if !options.quiet {
                    let path = dir.join(format!("checkpoint_{}.json", trainer.env_steps));
                    save_checkpoint(&mut trainer, cfg, &path)?;
                    recent_checkpoints.push(path);
                    if recent_checkpoints.len() > 3 {
                        recent_checkpoints.remove(0);
                    }
                }
            }
        }

        if trainer.env_steps >= next_eval {
            next_eval += ppo.eval_every_steps;
            if let Some(stop) = &options.stop {
                let success = intermediate_eval(&trainer, cfg, stop);
                final_eval_success = Some(success);
                eprintln!(
                    "  eval at {} steps: success {:.3} (target {:.3})",
                    trainer.env_steps, success, stop.target_success_rate
                );
                if success >= stop.target_success_rate {
                    break;
                }
            }
        }
    }

    // Final checkpoint plus selection among the recent ones.
    let mut best_checkpoint = None;
    if let Some(dir) = out_dir {
        if !options.quiet {
            let final_path = dir.join(format!("checkpoint_{}.json", trainer.env_steps));
            save_checkpoint(&mut trainer, cfg, &final_path)?;
            if !recent_checkpoints.contains(&final_path) {
                recent_checkpoints.push(final_path);
            }
            let best = select_best_checkpoint(cfg, &recent_checkpoints)
                .map_err(TrainError::Checkpoint)?;
            let best_path = dir.join("checkpoint_best.json");
            std::fs::copy(&best, &best_path)?;
            best_checkpoint = Some(best_path);
        }
    }

    Ok(TrainResult {
        actor: trainer.ac.actor.clone(),
        critic: trainer.ac.critic.clone(),
        obs_norm: trainer.obs_norm.clone(),
        priv_norm: trainer.priv_norm.clone(),
        env_steps: trainer.env_steps,
        metrics,
        best_checkpoint,
        final_eval_success,
    })
}

fn save_checkpoint(trainer: &mut Trainer, cfg: &RunConfig, path: &Path) -> Result<(), TrainError> {
    let ck = Checkpoint::from_nets(
        &mut trainer.ac.actor,
        &mut trainer.ac.critic,
        &trainer.obs_norm,
        &trainer.priv_norm,
        cfg,
        trainer.env_steps,
    );
    ck.save(path).map_err(TrainError::Checkpoint)
}

/// Success rate of the current policy over held-out episodes with ring
/// pose error, deterministic actions.
fn intermediate_eval(trainer: &Trainer, cfg: &RunConfig, stop: &StopOnSuccess) -> f64 {
    let mut env_cfg = cfg.env_config(PoseErrorMode::None);
    env_cfg.force_threshold_override = Some(7.5);
    crate::eval::success_rate_banded(
        &trainer.ac.actor,
        &trainer.obs_norm,
        &env_cfg,
        &stop.eval_error_bands,
        stop.episodes,
        cfg.seed.wrapping_add(0x5eed_0e7a),
    )
}

/// Evaluates each checkpoint on held-out episodes and returns the best path.
fn select_best_checkpoint(cfg: &RunConfig, paths: &[PathBuf]) -> Result<PathBuf, String> {
    if paths.is_empty() {
        return Err("no checkpoints written".into());
    }
    if paths.len() == 1 {
        return Ok(paths[0].clone());
    }
    let mut best: Option<(f64, PathBuf)> = None;
    for path in paths {
        let ck = Checkpoint::load(path)?;
        let spec = ck.network_spec.clone();
        let mut rng = derive_stream(0, 0, 0, StreamKind::Policy);
        let mut actor = Actor::new(&spec, -1.0, &mut rng);
        let mut critic = Critic::new(&spec, &mut rng);
        ck.load_into(&mut actor, &mut critic);
        let mut env_cfg = cfg.env_config(PoseErrorMode::None);
        env_cfg.force_threshold_override = Some(7.5);
        let success = crate::eval::success_rate_banded(
            &actor,
            &ck.obs_norm,
            &env_cfg,
            &[(0.0, 1.0e-3), (1.0e-3, 2.5e-3)],
            50,
            cfg.seed.wrapping_add(0xbe57_c4ec),
        );
        if best.as_ref().map(|(s, _)| success > *s).unwrap_or(true) {
            best = Some((success, path.clone()));
        }
    }
    Ok(best.expect("nonempty").1)
}
