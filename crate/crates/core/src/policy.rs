//! Recurrent actor-critic networks.
//!
//! The actor consumes only `Observation` vectors, the critic only
//! `PrivilegedState` vectors (asymmetric actor-critic). Both share the same
//! shape: a tanh MLP encoder, a GRU cell, and linear heads. The pose action
//! uses a Gaussian whose mean is tanh-squashed into [-1, 1] with a free
//! per-dimension log-std; the termination action uses a Beta distribution
//! over [0, 1] (its concentrations are 1 + softplus of the head outputs, so
//! the density stays unimodal).

use crate::env::{Observation, PrivilegedState};
use crate::nn::{tanh_backward, Adam, GruCell, Linear, Parameterized};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

pub const POSE_DIM: usize = 4;

/// Network shape description, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub obs_dim: usize,
    pub priv_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub recurrent_hidden: usize,
}

impl NetworkSpec {
    pub fn new(encoder_hidden: Vec<usize>, recurrent_hidden: usize) -> Self {
        Self {
            obs_dim: Observation::DIM,
            priv_dim: PrivilegedState::DIM,
            encoder_hidden,
            recurrent_hidden,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Shared encoder + GRU backbone.
#[derive(Debug, Clone)]
struct Backbone {
    enc: Vec<Linear>,
    gru: GruCell,
}

/// Per-step forward cache of the backbone.
struct BackboneCache {
    input: Array2<f64>,
    enc_outs: Vec<Array2<f64>>, // post-tanh outputs per encoder layer
    gru: crate::nn::GruCache,
}

impl Backbone {
    fn new(in_dim: usize, spec: &NetworkSpec, rng: &mut impl Rng) -> Self {
        let mut enc = Vec::new();
        let mut prev = in_dim;
        for &hsize in &spec.encoder_hidden {
            enc.push(Linear::new(prev, hsize, 1.0, rng));
            prev = hsize;
        }
        let gru = GruCell::new(prev, spec.recurrent_hidden, rng);
        Self { enc, gru }
    }

    fn forward(&self, x: &Array2<f64>, h: &Array2<f64>) -> (Array2<f64>, BackboneCache) {
        let mut enc_outs = Vec::with_capacity(self.enc.len());
        let mut cur = x.clone();
        for layer in &self.enc {
            cur = layer.forward(&cur).mapv(f64::tanh);
            enc_outs.push(cur.clone());
        }
        let (h_new, gru_cache) = self.gru.forward(&cur, h);
        (
            h_new,
            BackboneCache {
                input: x.clone(),
                enc_outs,
                gru: gru_cache,
            },
        )
    }

    /// Backprop one step. `grad_h` is dL/dh for this step's output hidden
    /// state (including any gradient flowing back from the next step).
    /// Returns dL/dh_prev.
    fn backward(&mut self, cache: &BackboneCache, grad_h: &Array2<f64>) -> Array2<f64> {
        let (mut grad_x, grad_h_prev) = self.gru.backward(&cache.gru, grad_h);
        for (i, layer) in self.enc.iter_mut().enumerate().rev() {
            let grad_pre = tanh_backward(&cache.enc_outs[i], &grad_x);
            let input = if i == 0 {
                &cache.input
            } else {
                &cache.enc_outs[i - 1]
            };
            grad_x = layer.backward(input, &grad_pre);
        }
        grad_h_prev
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut f64, &mut f64)) {
        for layer in &mut self.enc {
            layer.visit_params(f);
        }
        self.gru.visit_params(f);
    }
}

/// Actor head outputs for a batch at one timestep.
#[derive(Debug, Clone)]
pub struct ActorOutput {
    /// Squashed pose-action mean in [-1, 1], shape [B, 4].
    pub mean: Array2<f64>,
    /// Per-dimension standard deviation, shape [4].
    pub std: Array1<f64>,
    /// Beta concentration alpha per batch row (>= 1).
    pub alpha: Array1<f64>,
    /// Beta concentration beta per batch row (>= 1).
    pub beta: Array1<f64>,
}

impl ActorOutput {
    /// Deterministic evaluation action: distribution means.
    pub fn mean_action(&self, row: usize) -> crate::env::Action {
        crate::env::Action {
            delta_pose: [
                self.mean[[row, 0]],
                self.mean[[row, 1]],
                self.mean[[row, 2]],
                self.mean[[row, 3]],
            ],
            a_et: self.alpha[row] / (self.alpha[row] + self.beta[row]),
        }
    }
}

/// Gradients of a scalar loss with respect to the actor head outputs.
pub struct ActorOutputGrad {
    pub d_mean: Array2<f64>,
    pub d_log_std: Array1<f64>,
    pub d_alpha: Array1<f64>,
    pub d_beta: Array1<f64>,
}

pub struct ActorCache {
    backbone: BackboneCache,
    h_out: Array2<f64>,
    mean: Array2<f64>,
    et_pre: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Actor {
    pub spec: NetworkSpec,
    backbone: Backbone,
    mean_head: Linear,
    et_head: Linear,
    pub log_std: Array1<f64>,
    pub g_log_std: Array1<f64>,
}

impl Actor {
    pub fn new(spec: &NetworkSpec, initial_log_std: f64, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::new(spec.obs_dim, spec, rng);
        // Small head gains start the policy near zero action and a_ET 0.5.
        let mean_head = Linear::new(spec.recurrent_hidden, POSE_DIM, 0.01, rng);
        let et_head = Linear::new(spec.recurrent_hidden, 2, 0.01, rng);
        Self {
            spec: spec.clone(),
            backbone,
            mean_head,
            et_head,
            log_std: Array1::from_elem(POSE_DIM, initial_log_std),
            g_log_std: Array1::zeros(POSE_DIM),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.recurrent_hidden
    }

    pub fn initial_hidden(&self, batch: usize) -> Array2<f64> {
        Array2::zeros((batch, self.hidden_dim()))
    }

    /// One timestep over a batch of observation rows.
    pub fn forward(&self, obs: &Array2<f64>, h: &Array2<f64>) -> (ActorOutput, Array2<f64>, ActorCache) {
        assert_eq!(obs.ncols(), self.spec.obs_dim, "actor input width");
        let (h_new, backbone_cache) = self.backbone.forward(obs, h);
        let mean_pre = self.mean_head.forward(&h_new);
        let mean = mean_pre.mapv(f64::tanh);
        let et_pre = self.et_head.forward(&h_new);
        let batch = obs.nrows();
        let mut alpha = Array1::zeros(batch);
        let mut beta = Array1::zeros(batch);
        for b in 0..batch {
            alpha[b] = 1.0 + softplus(et_pre[[b, 0]]);
            beta[b] = 1.0 + softplus(et_pre[[b, 1]]);
        }
        let output = ActorOutput {
            mean: mean.clone(),
            std: self.log_std.mapv(f64::exp),
            alpha,
            beta,
        };
        let cache = ActorCache {
            backbone: backbone_cache,
            h_out: h_new.clone(),
            mean,
            et_pre,
        };
        (output, h_new, cache)
    }

    /// Backprop one step given head-output gradients plus the gradient
    /// arriving at the output hidden state from the future; returns
    /// dL/dh_prev.
    pub fn backward(
        &mut self,
        cache: &ActorCache,
        grad: &ActorOutputGrad,
        grad_h_from_future: &Array2<f64>,
    ) -> Array2<f64> {
        // Through the tanh mean squash.
        let d_mean_pre = tanh_backward(&cache.mean, &grad.d_mean);
        let mut grad_h = self.mean_head.backward(&cache.h_out, &d_mean_pre);

        // Through the softplus concentration map.
        let batch = cache.et_pre.nrows();
        let mut d_et_pre = Array2::zeros((batch, 2));
        for b in 0..batch {
            d_et_pre[[b, 0]] = grad.d_alpha[b] * sigmoid(cache.et_pre[[b, 0]]);
            d_et_pre[[b, 1]] = grad.d_beta[b] * sigmoid(cache.et_pre[[b, 1]]);
        }
        grad_h += &self.et_head.backward(&cache.h_out, &d_et_pre);
        grad_h += grad_h_from_future;

        self.g_log_std += &grad.d_log_std;
        self.backbone.backward(&cache.backbone, &grad_h)
    }

    /// Clamps log-std into a sane band after an optimizer step.
    pub fn clamp_log_std(&mut self) {
        self.log_std.mapv_inplace(|v| v.clamp(-4.0, 1.0));
    }
}

impl Parameterized for Actor {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut f64, &mut f64)) {
        self.backbone.visit_params(f);
        self.mean_head.visit_params(f);
        self.et_head.visit_params(f);
        for (p, g) in self.log_std.iter_mut().zip(self.g_log_std.iter_mut()) {
            f(p, g);
        }
    }
}

pub struct CriticCache {
    backbone: BackboneCache,
    h_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub spec: NetworkSpec,
    backbone: Backbone,
    value_head: Linear,
}

impl Critic {
    pub fn new(spec: &NetworkSpec, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::new(spec.priv_dim, spec, rng);
        let value_head = Linear::new(spec.recurrent_hidden, 1, 1.0, rng);
        Self {
            spec: spec.clone(),
            backbone,
            value_head,
        }
    }

    pub fn initial_hidden(&self, batch: usize) -> Array2<f64> {
        Array2::zeros((batch, self.spec.recurrent_hidden))
    }

    /// Returns per-row values, the new hidden state, and the cache.
    pub fn forward(&self, privileged: &Array2<f64>, h: &Array2<f64>) -> (Array1<f64>, Array2<f64>, CriticCache) {
        assert_eq!(privileged.ncols(), self.spec.priv_dim, "critic input width");
        let (h_new, backbone_cache) = self.backbone.forward(privileged, h);
        let value = self.value_head.forward(&h_new).index_axis_move(Axis(1), 0);
        (
            value.to_owned(),
            h_new.clone(),
            CriticCache {
                backbone: backbone_cache,
                h_out: h_new,
            },
        )
    }

    pub fn backward(
        &mut self,
        cache: &CriticCache,
        d_value: &Array1<f64>,
        grad_h_from_future: &Array2<f64>,
    ) -> Array2<f64> {
        let batch = d_value.len();
        let d_out = d_value.clone().into_shape_with_order((batch, 1)).unwrap();
        let mut grad_h = self.value_head.backward(&cache.h_out, &d_out);
        grad_h += grad_h_from_future;
        self.backbone.backward(&cache.backbone, &grad_h)
    }
}

impl Parameterized for Critic {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut f64, &mut f64)) {
        self.backbone.visit_params(f);
        self.value_head.visit_params(f);
    }
}

/// Gaussian + Beta joint log-probability of an action under actor outputs.
pub fn action_log_prob(
    out: &ActorOutput,
    row: usize,
    pose_action: &[f64; POSE_DIM],
    a_et: f64,
) -> f64 {
    let mut logp = 0.0;
    for i in 0..POSE_DIM {
        let std = out.std[i];
        let z = (pose_action[i] - out.mean[[row, i]]) / std;
        logp += -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    logp + beta_log_pdf(out.alpha[row], out.beta[row], clamp_unit(a_et))
}

/// Gradients of the joint log-probability with respect to (mean, log_std,
/// alpha, beta) for one row.
pub struct LogProbGrad {
    pub d_mean: [f64; POSE_DIM],
    pub d_log_std: [f64; POSE_DIM],
    pub d_alpha: f64,
    pub d_beta: f64,
}

pub fn action_log_prob_grad(
    out: &ActorOutput,
    row: usize,
    pose_action: &[f64; POSE_DIM],
    a_et: f64,
) -> LogProbGrad {
    let mut d_mean = [0.0; POSE_DIM];
    let mut d_log_std = [0.0; POSE_DIM];
    for i in 0..POSE_DIM {
        let std = out.std[i];
        let z = (pose_action[i] - out.mean[[row, i]]) / std;
        d_mean[i] = z / std;
        d_log_std[i] = z * z - 1.0;
    }
    let x = clamp_unit(a_et);
    let (alpha, beta) = (out.alpha[row], out.beta[row]);
    let dig_ab = digamma(alpha + beta);
    LogProbGrad {
        d_mean,
        d_log_std,
        d_alpha: x.ln() - digamma(alpha) + dig_ab,
        d_beta: (1.0 - x).ln() - digamma(beta) + dig_ab,
    }
}

/// Gaussian entropy of the pose action (the exploration bonus term; the Beta
/// head is shaped by the termination reward instead).
pub fn gaussian_entropy(log_std: &Array1<f64>) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).sum()
}

pub fn beta_log_pdf(alpha: f64, beta: f64, x: f64) -> f64 {
    let x = clamp_unit(x);
    (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_beta(alpha, beta)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(1e-6, 1.0 - 1e-6)
}

/// Samples the joint action: Gaussian pose (clipped by the environment) and
/// Beta termination.
pub fn sample_action(
    out: &ActorOutput,
    row: usize,
    rng: &mut impl Rng,
) -> crate::env::Action {
    use rand_distr::{Beta as BetaDist, Distribution, StandardNormal};
    let mut pose = [0.0; POSE_DIM];
    for i in 0..POSE_DIM {
        let g: f64 = StandardNormal.sample(rng);
        pose[i] = out.mean[[row, i]] + g * out.std[i];
    }
    let beta_dist = BetaDist::new(out.alpha[row], out.beta[row]).expect("valid Beta parameters");
    let a_et: f64 = beta_dist.sample(rng);
    crate::env::Action {
        delta_pose: pose,
        a_et: clamp_unit(a_et),
    }
}

/// Convenience: builds both networks plus an optimizer sized for them.
pub struct ActorCritic {
    pub actor: Actor,
    pub critic: Critic,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl ActorCritic {
    pub fn new(spec: &NetworkSpec, initial_log_std: f64, rng: &mut impl Rng) -> Self {
        let mut actor = Actor::new(spec, initial_log_std, rng);
        let mut critic = Critic::new(spec, rng);
        let actor_opt = Adam::new(actor.param_count());
        let critic_opt = Adam::new(critic.param_count());
        Self {
            actor,
            critic,
            actor_opt,
            critic_opt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{derive_stream, StreamKind};

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(vec![16, 16], 8)
    }

    #[test]
    fn actor_input_width_is_observation_dim() {
        let spec = small_spec();
        assert_eq!(spec.obs_dim, Observation::DIM);
        assert_eq!(spec.priv_dim, PrivilegedState::DIM);
        let mut rng = derive_stream(1, 0, 0, StreamKind::Policy);
        let actor = Actor::new(&spec, -1.0, &mut rng);
        let obs = Array2::zeros((3, Observation::DIM));
        let h = actor.initial_hidden(3);
        let (out, _, _) = actor.forward(&obs, &h);
        assert_eq!(out.mean.nrows(), 3);
    }

    #[test]
    fn zero_weights_give_centered_outputs() {
        let spec = small_spec();
        let mut rng = derive_stream(2, 0, 0, StreamKind::Policy);
        let mut actor = Actor::new(&spec, -1.0, &mut rng);
        let n = actor.param_count();
        actor.load_params(&vec![0.0; n]);
        // log_std was zeroed too; that is fine for this check.
        let obs = Array2::from_elem((2, Observation::DIM), 0.37);
        let h = actor.initial_hidden(2);
        let (out, _, _) = actor.forward(&obs, &h);
        for b in 0..2 {
            let a = out.mean_action(b);
            assert!((a.a_et - 0.5).abs() < 1e-12, "a_ET must start at 0.5");
            for v in a.delta_pose {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn forward_is_pure_given_same_hidden() {
        let spec = small_spec();
        let mut rng = derive_stream(3, 0, 0, StreamKind::Policy);
        let actor = Actor::new(&spec, -1.0, &mut rng);
        let obs = Array2::from_shape_fn((2, Observation::DIM), |_| rng.gen_range(-1.0..1.0));
        let h = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-0.5..0.5));
        let (a, ha, _) = actor.forward(&obs, &h);
        let (b, hb, _) = actor.forward(&obs, &h);
        assert_eq!(a.mean, b.mean);
        assert_eq!(ha, hb);
    }

    #[test]
    fn recurrence_distinguishes_histories() {
        let spec = small_spec();
        let mut rng = derive_stream(4, 0, 0, StreamKind::Policy);
        let actor = Actor::new(&spec, -1.0, &mut rng);
        let final_obs = Array2::from_shape_fn((1, Observation::DIM), |_| rng.gen_range(-1.0..1.0));
        let hist_a = Array2::from_shape_fn((1, Observation::DIM), |_| rng.gen_range(-1.0..1.0));
        let hist_b = Array2::from_shape_fn((1, Observation::DIM), |_| rng.gen_range(-1.0..1.0));

        let h0 = actor.initial_hidden(1);
        let (_, h_a, _) = actor.forward(&hist_a, &h0);
        let (out_a, _, _) = actor.forward(&final_obs, &h_a);
        let (_, h_b, _) = actor.forward(&hist_b, &h0);
        let (out_b, _, _) = actor.forward(&final_obs, &h_b);
        let diff = (&out_a.mean - &out_b.mean)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(diff > 1e-12, "hidden state must carry history");
    }

    #[test]
    fn beta_log_pdf_matches_uniform_case() {
        // Beta(1, 1) is uniform on [0, 1]: log pdf = 0.
        assert!(beta_log_pdf(1.0, 1.0, 0.3).abs() < 1e-12);
        // Beta(2, 1): pdf = 2x.
        let x = 0.25;
        assert!((beta_log_pdf(2.0, 1.0, x) - (2.0 * x).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_grads_match_finite_differences() {
        let spec = small_spec();
        let mut rng = derive_stream(5, 0, 0, StreamKind::Policy);
        let actor = Actor::new(&spec, -0.5, &mut rng);
        let obs = Array2::from_shape_fn((1, Observation::DIM), |_| rng.gen_range(-1.0..1.0));
        let h = actor.initial_hidden(1);
        let (out, _, _) = actor.forward(&obs, &h);
        let pose = [0.2, -0.4, 0.1, 0.6];
        let a_et = 0.35;

        let grad = action_log_prob_grad(&out, 0, &pose, a_et);
        let eps = 1e-6;
        // d/d mean
        for i in 0..POSE_DIM {
            let mut plus = out.clone();
            plus.mean[[0, i]] += eps;
            let mut minus = out.clone();
            minus.mean[[0, i]] -= eps;
            let fd = (action_log_prob(&plus, 0, &pose, a_et)
                - action_log_prob(&minus, 0, &pose, a_et))
                / (2.0 * eps);
            assert!((grad.d_mean[i] - fd).abs() < 1e-5, "mean {i}");
        }
        // d/d alpha and d/d beta
        let mut plus = out.clone();
        plus.alpha[0] += eps;
        let mut minus = out.clone();
        minus.alpha[0] -= eps;
        let fd = (action_log_prob(&plus, 0, &pose, a_et) - action_log_prob(&minus, 0, &pose, a_et))
            / (2.0 * eps);
        assert!((grad.d_alpha - fd).abs() < 1e-5, "alpha");
        let mut plus = out.clone();
        plus.beta[0] += eps;
        let mut minus = out.clone();
        minus.beta[0] -= eps;
        let fd = (action_log_prob(&plus, 0, &pose, a_et) - action_log_prob(&minus, 0, &pose, a_et))
            / (2.0 * eps);
        assert!((grad.d_beta - fd).abs() < 1e-5, "beta");
    }

    #[test]
    fn sampled_actions_respect_bounds() {
        let spec = small_spec();
        let mut rng = derive_stream(6, 0, 0, StreamKind::Policy);
        let actor = Actor::new(&spec, -0.5, &mut rng);
        let obs = Array2::from_shape_fn((1, Observation::DIM), |_| rng.gen_range(-1.0..1.0));
        let h = actor.initial_hidden(1);
        let (out, _, _) = actor.forward(&obs, &h);
        for _ in 0..200 {
            let a = sample_action(&out, 0, &mut rng).clamped();
            assert!((0.0..=1.0).contains(&a.a_et));
            for v in a.delta_pose {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
