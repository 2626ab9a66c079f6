//! Evaluation harness: per-episode results, summary metrics with standard
//! errors, termination trade-off curves, noise-band breakdowns, and gain
//! sweeps. Episodes run with deterministic (distribution-mean) actions and
//! are embarrassingly parallel over episode indices.

use crate::env::{EnvConfig, InsertionEnv, Observation, PoseErrorMode};
use crate::nn::RunningNorm;
use crate::policy::Actor;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Policy-rate used to convert steps to seconds.
pub const CONTROL_HZ: f64 = 15.0;

/// Default deployment early-termination threshold.
pub const DEFAULT_P_TERM: f64 = 0.9;

/// Default deployment force threshold (N).
pub const DEPLOY_FORCE_THRESHOLD: f64 = 7.5;

/// Pose-error bands (m): low [0, 1) mm, medium [1, 2.5) mm, high [2.5, 5] mm.
pub const NOISE_BANDS: [(f64, f64); 3] = [(0.0, 1.0e-3), (1.0e-3, 2.5e-3), (2.5e-3, 5.0e-3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminatedBy {
    Predicted,
    FixedHorizon,
}

/// Record of one evaluation episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    /// True success label at the moment of termination.
    pub success: bool,
    /// First step index (1-based) at which the true success condition held.
    pub first_success_step: Option<u32>,
    /// Step index (1-based) at which the episode terminated.
    pub termination_step: u32,
    pub terminated_by: TerminatedBy,
    /// Mean true contact force norm over executed steps (N).
    pub f_mean: f64,
    /// Max true contact force norm over executed steps (N).
    pub f_max: f64,
    /// Norm of the per-episode fixed-part pose estimation error (m).
    pub pose_error_norm: f64,
    /// Proportional gain used in this episode.
    pub gains_used: f64,
    /// Early-termination head output per executed step.
    pub a_et_trace: Vec<f64>,
    /// True success label per executed step (full-horizon runs only carry
    /// the complete trace).
    pub success_trace: Vec<bool>,
    /// Set when the episode aborted on a divergence error.
    pub diverged: bool,
}

/// Aggregate metrics with standard errors (sample std / sqrt(n)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub success_se: f64,
    pub mean_duration_s: f64,
    pub duration_se: f64,
    pub f_mean: f64,
    pub f_mean_se: f64,
    pub f_max: f64,
    pub f_max_se: f64,
    /// Fraction of early-terminated trials that were actually successful;
    /// absent when no trial early-terminated.
    pub precision: Option<f64>,
    /// Fraction of successful trials terminated with a_ET > p_term; absent
    /// when no trial succeeded.
    pub recall: Option<f64>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt() / n.sqrt())
}

/// Computes the summary metrics from a list of episode results.
pub fn compute_metrics(results: &[EpisodeResult]) -> MetricsSummary {
    assert!(!results.is_empty(), "compute_metrics needs at least one episode");
    let successes: Vec<f64> = results.iter().map(|r| r.success as u8 as f64).collect();
    let durations: Vec<f64> = results
        .iter()
        .map(|r| r.termination_step as f64 / CONTROL_HZ)
        .collect();
    let f_means: Vec<f64> = results.iter().map(|r| r.f_mean).collect();
    let f_maxes: Vec<f64> = results.iter().map(|r| r.f_max).collect();

    let early: Vec<&EpisodeResult> = results
        .iter()
        .filter(|r| r.terminated_by == TerminatedBy::Predicted)
        .collect();
    let precision = if early.is_empty() {
        None
    } else {
        Some(early.iter().filter(|r| r.success).count() as f64 / early.len() as f64)
    };
    let successful: Vec<&EpisodeResult> = results.iter().filter(|r| r.success).collect();
    let recall = if successful.is_empty() {
        None
    } else {
        Some(
            successful
                .iter()
                .filter(|r| r.terminated_by == TerminatedBy::Predicted)
                .count() as f64
                / successful.len() as f64,
        )
    };

    let (success_rate, success_se) = mean_se(&successes);
    let (mean_duration_s, duration_se) = mean_se(&durations);
    let (f_mean, f_mean_se) = mean_se(&f_means);
    let (f_max, f_max_se) = mean_se(&f_maxes);
    MetricsSummary {
        episodes: results.len(),
        success_rate,
        success_se,
        mean_duration_s,
        duration_se,
        f_mean,
        f_mean_se,
        f_max,
        f_max_se,
        precision,
        recall,
    }
}

/// Evaluation-time policy wrapper: frozen normalizer, deterministic actions.
pub struct EvalPolicy<'a> {
    pub actor: &'a Actor,
    pub obs_norm: &'a RunningNorm,
}

impl EvalPolicy<'_> {
    fn normalize(&self, obs: &Observation) -> Array2<f64> {
        let mut row = obs.to_vec();
        self.obs_norm.normalize_row(&mut row);
        Array2::from_shape_vec((1, Observation::DIM), row).expect("row shape")
    }

    /// Runs one episode. The episode ends at the first step whose a_ET
    /// exceeds `p_term`, or at the horizon. `p_term >= 1` never
    /// early-terminates (a_ET is bounded by 1).
    pub fn run_episode(&self, env: &mut InsertionEnv, episode: usize, p_term: f64) -> EpisodeResult {
        self.run_episode_recorded(env, episode, p_term, None)
    }

    /// Same as `run_episode`, optionally recording every (observation,
    /// action, reward) triple for replay verification.
    pub fn run_episode_recorded(
        &self,
        env: &mut InsertionEnv,
        episode: usize,
        p_term: f64,
        mut recorder: Option<&mut Vec<crate::replay::TrajStep>>,
    ) -> EpisodeResult {
        let (mut obs, _) = env.reset();
        let horizon = env.cfg.reward.episode_length;
        let mut h = self.actor.initial_hidden(1);
        let mut first_success_step = None;
        let mut f_sum = 0.0;
        let mut f_max: f64 = 0.0;
        let mut a_et_trace = Vec::with_capacity(horizon as usize);
        let mut success_trace = Vec::with_capacity(horizon as usize);
        let gains_used = env.dynamics().kp;
        let pose_error_norm = env.pose_error_norm();

        let mut step = 0u32;
        loop {
            let x = self.normalize(&obs);
            let (out, h_new, _) = self.actor.forward(&x, &h);
            h = h_new;
            let action = out.mean_action(0);
            let raw_obs = obs.to_vec();
            let outcome = match env.step(&action) {
                Ok(o) => o,
                Err(_) => {
                    return EpisodeResult {
                        episode,
                        success: false,
                        first_success_step,
                        termination_step: step + 1,
                        terminated_by: TerminatedBy::FixedHorizon,
                        f_mean: if step > 0 { f_sum / step as f64 } else { 0.0 },
                        f_max,
                        pose_error_norm,
                        gains_used,
                        a_et_trace,
                        success_trace,
                        diverged: true,
                    }
                }
            };
            step += 1;
            if let Some(rec) = recorder.as_deref_mut() {
                rec.push(crate::replay::TrajStep {
                    observation: raw_obs,
                    action: action.to_slice(),
                    reward: outcome.reward,
                });
            }
            f_sum += outcome.info.force_mean;
            f_max = f_max.max(outcome.info.force_max);
            a_et_trace.push(action.a_et);
            success_trace.push(outcome.info.success);
            if outcome.info.success && first_success_step.is_none() {
                first_success_step = Some(step);
            }

            if action.a_et > p_term {
                return EpisodeResult {
                    episode,
                    success: outcome.info.success,
                    first_success_step,
                    termination_step: step,
                    terminated_by: TerminatedBy::Predicted,
                    f_mean: f_sum / step as f64,
                    f_max,
                    pose_error_norm,
                    gains_used,
                    a_et_trace,
                    success_trace,
                    diverged: false,
                };
            }
            if step >= horizon {
                return EpisodeResult {
                    episode,
                    success: outcome.info.success,
                    first_success_step,
                    termination_step: step,
                    terminated_by: TerminatedBy::FixedHorizon,
                    f_mean: f_sum / step as f64,
                    f_max,
                    pose_error_norm,
                    gains_used,
                    a_et_trace,
                    success_trace,
                    diverged: false,
                };
            }
            obs = outcome.observation;
        }
    }
}

/// Which pose-error band(s) evaluation episodes draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseBand {
    Low,
    Medium,
    High,
    /// Episodes cycle through the three bands (a third each).
    All,
}

impl NoiseBand {
    pub fn parse(s: &str) -> Result<NoiseBand, String> {
        match s {
            "low" => Ok(NoiseBand::Low),
            "medium" => Ok(NoiseBand::Medium),
            "high" => Ok(NoiseBand::High),
            "all" => Ok(NoiseBand::All),
            other => Err(format!("invalid noise band '{other}' (low|medium|high|all)")),
        }
    }

    fn band_for_episode(&self, episode: usize) -> (f64, f64) {
        match self {
            NoiseBand::Low => NOISE_BANDS[0],
            NoiseBand::Medium => NOISE_BANDS[1],
            NoiseBand::High => NOISE_BANDS[2],
            NoiseBand::All => NOISE_BANDS[episode % 3],
        }
    }
}

/// Options for an evaluation batch.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    pub p_term: f64,
    pub band: NoiseBand,
    pub force_threshold: f64,
    /// Fixed proportional gain override (gain sweep deployments).
    pub kp_override: Option<f64>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 45,
            p_term: DEFAULT_P_TERM,
            band: NoiseBand::All,
            force_threshold: DEPLOY_FORCE_THRESHOLD,
            kp_override: None,
            seed: 1,
        }
    }
}

/// Runs an evaluation batch. Each episode gets its own environment keyed by
/// the episode index, so results are independent of worker scheduling.
pub fn evaluate(
    policy: &EvalPolicy,
    base_cfg: &EnvConfig,
    opts: &EvalOptions,
) -> Vec<EpisodeResult> {
    (0..opts.episodes)
        .into_par_iter()
        .map(|episode| {
            let (r_min, r_max) = opts.band.band_for_episode(episode);
            let mut cfg = base_cfg.clone();
            cfg.pose_error_mode = PoseErrorMode::Ring { r_min, r_max };
            cfg.force_threshold_override = Some(opts.force_threshold);
            cfg.kp_override = opts.kp_override;
            let mut env = InsertionEnv::new(cfg, opts.seed, episode as u64);
            policy.run_episode(&mut env, episode, opts.p_term)
        })
        .collect()
}

/// Success rate over a quick deterministic evaluation (training-time hook).
pub fn success_rate_quick(
    actor: &Actor,
    obs_norm: &RunningNorm,
    env_cfg: &EnvConfig,
    seed: u64,
    episodes: usize,
) -> f64 {
    let (r_min, r_max) = match env_cfg.pose_error_mode {
        PoseErrorMode::Ring { r_min, r_max } => (r_min, r_max),
        _ => (0.0, 0.0),
    };
    success_rate_banded(actor, obs_norm, env_cfg, &[(r_min, r_max)], episodes, seed)
}

/// Success rate with episodes cycled across the given pose-error bands,
/// deterministic actions, default termination threshold.
pub fn success_rate_banded(
    actor: &Actor,
    obs_norm: &RunningNorm,
    env_cfg: &EnvConfig,
    bands: &[(f64, f64)],
    episodes: usize,
    seed: u64,
) -> f64 {
    assert!(!bands.is_empty());
    let policy = EvalPolicy { actor, obs_norm };
    let results: Vec<EpisodeResult> = (0..episodes)
        .into_par_iter()
        .map(|episode| {
            let (r_min, r_max) = bands[episode % bands.len()];
            let mut cfg = env_cfg.clone();
            cfg.pose_error_mode = PoseErrorMode::Ring { r_min, r_max };
            let mut env = InsertionEnv::new(cfg, seed, episode as u64);
            policy.run_episode(&mut env, episode, DEFAULT_P_TERM)
        })
        .collect();
    results.iter().filter(|r| r.success).count() as f64 / results.len().max(1) as f64
}

/// One point of a termination trade-off curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub method: String,
    pub param: f64,
    pub success_rate: f64,
    /// Mean delay (s) between first success and termination, over episodes
    /// that were successful and terminated at or after first success.
    pub mean_delay_s: Option<f64>,
}

/// Recomputes hypothetical terminations from full-horizon traces for both
/// methods: predicted termination over a p_term grid and fixed-duration
/// termination over every horizon length. Curves are sorted by success rate.
pub fn termination_tradeoff(results: &[EpisodeResult]) -> (Vec<TradeoffPoint>, Vec<TradeoffPoint>) {
    assert!(!results.is_empty());
    let horizon = results
        .iter()
        .map(|r| r.success_trace.len())
        .max()
        .unwrap_or(0);

    let evaluate_at = |term_step_of: &dyn Fn(&EpisodeResult) -> u32| -> (f64, Option<f64>) {
        let mut successes = 0usize;
        let mut delays = Vec::new();
        for r in results {
            let t = term_step_of(r).clamp(1, r.success_trace.len() as u32);
            let success = r.success_trace[(t - 1) as usize];
            if success {
                successes += 1;
                if let Some(first) = r.first_success_step {
                    if t >= first {
                        delays.push((t - first) as f64 / CONTROL_HZ);
                    }
                }
            }
        }
        let rate = successes as f64 / results.len() as f64;
        let delay = if delays.is_empty() {
            None
        } else {
            Some(delays.iter().sum::<f64>() / delays.len() as f64)
        };
        (rate, delay)
    };

    let mut pred = Vec::new();
    for i in 1..=19 {
        let p = i as f64 * 0.05;
        let (rate, delay) = evaluate_at(&|r: &EpisodeResult| {
            r.a_et_trace
                .iter()
                .position(|&a| a > p)
                .map(|idx| idx as u32 + 1)
                .unwrap_or(r.success_trace.len() as u32)
        });
        pred.push(TradeoffPoint {
            method: "pred_term".to_string(),
            param: p,
            success_rate: rate,
            mean_delay_s: delay,
        });
    }

    let mut fixed = Vec::new();
    for t_param in 1..=horizon {
        let (rate, delay) = evaluate_at(&|_r: &EpisodeResult| t_param as u32);
        fixed.push(TradeoffPoint {
            method: "fixed_term".to_string(),
            param: t_param as f64,
            success_rate: rate,
            mean_delay_s: delay,
        });
    }

    pred.sort_by(|a, b| a.success_rate.total_cmp(&b.success_rate));
    fixed.sort_by(|a, b| a.success_rate.total_cmp(&b.success_rate));
    (pred, fixed)
}

/// Interpolated mean delay of a sorted trade-off curve at a target success
/// rate; `None` when the curve never reaches the target.
pub fn delay_at_success_rate(curve: &[TradeoffPoint], target: f64) -> Option<f64> {
    // Among points meeting the target, take the smallest achievable delay.
    curve
        .iter()
        .filter(|p| p.success_rate >= target)
        .filter_map(|p| p.mean_delay_s)
        .min_by(f64::total_cmp)
}

/// Per-band success breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandBreakdown {
    pub band: String,
    pub lo_m: f64,
    pub hi_m: f64,
    pub episodes: usize,
    pub success_rate: Option<f64>,
}

/// Success rate per pose-error band. Bands are left-closed, right-open
/// except the last.
pub fn noise_breakdown(results: &[EpisodeResult]) -> Vec<BandBreakdown> {
    let names = ["low", "medium", "high"];
    let mut out = Vec::new();
    for (i, (lo, hi)) in NOISE_BANDS.iter().enumerate() {
        let in_band = |e: f64| {
            if i + 1 == NOISE_BANDS.len() {
                e >= *lo && e <= *hi
            } else {
                e >= *lo && e < *hi
            }
        };
        let members: Vec<&EpisodeResult> =
            results.iter().filter(|r| in_band(r.pose_error_norm)).collect();
        let success_rate = if members.is_empty() {
            None
        } else {
            Some(members.iter().filter(|r| r.success).count() as f64 / members.len() as f64)
        };
        out.push(BandBreakdown {
            band: names[i].to_string(),
            lo_m: *lo,
            hi_m: *hi,
            episodes: members.len(),
            success_rate,
        });
    }
    out
}

/// Per-gain summary of a deployment-time gain sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainSweepRow {
    pub gain: f64,
    pub summary: MetricsSummary,
}

/// Deploys the policy with each fixed proportional gain and collects
/// metrics. The sweep uses the medium pose-error band by default, matching
/// the gains-analysis protocol.
pub fn gain_sweep(
    policy: &EvalPolicy,
    base_cfg: &EnvConfig,
    gains: &[f64],
    episodes_per_gain: usize,
    seed: u64,
) -> Vec<GainSweepRow> {
    gains
        .iter()
        .map(|&gain| {
            let opts = EvalOptions {
                episodes: episodes_per_gain,
                p_term: DEFAULT_P_TERM,
                band: NoiseBand::Medium,
                force_threshold: DEPLOY_FORCE_THRESHOLD,
                kp_override: Some(gain),
                seed: seed.wrapping_add((gain * 1000.0) as u64),
            };
            let results = evaluate(policy, base_cfg, &opts);
            GainSweepRow {
                gain,
                summary: compute_metrics(&results),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `episodes.csv`: one row per episode.
pub fn write_episodes_csv(path: &Path, results: &[EpisodeResult]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "episode",
        "success",
        "first_success_step",
        "termination_step",
        "terminated_by",
        "duration_s",
        "f_mean",
        "f_max",
        "pose_error_norm",
        "gains_used",
        "diverged",
    ])?;
    for r in results {
        w.write_record([
            r.episode.to_string(),
            (r.success as u8).to_string(),
            r.first_success_step.map(|s| s.to_string()).unwrap_or_default(),
            r.termination_step.to_string(),
            match r.terminated_by {
                TerminatedBy::Predicted => "predicted".to_string(),
                TerminatedBy::FixedHorizon => "fixed_horizon".to_string(),
            },
            (r.termination_step as f64 / CONTROL_HZ).to_string(),
            r.f_mean.to_string(),
            r.f_max.to_string(),
            r.pose_error_norm.to_string(),
            r.gains_used.to_string(),
            (r.diverged as u8).to_string(),
        ])?;
    }
    w.flush()
}

/// Writes `metrics.csv`: one row per labelled condition.
pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricsSummary)]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "condition",
        "episodes",
        "success_rate",
        "success_se",
        "duration_s",
        "duration_se",
        "f_mean",
        "f_mean_se",
        "f_max",
        "f_max_se",
        "precision",
        "recall",
    ])?;
    for (label, m) in rows {
        w.write_record([
            label.clone(),
            m.episodes.to_string(),
            m.success_rate.to_string(),
            m.success_se.to_string(),
            m.mean_duration_s.to_string(),
            m.duration_se.to_string(),
            m.f_mean.to_string(),
            m.f_mean_se.to_string(),
            m.f_max.to_string(),
            m.f_max_se.to_string(),
            fmt_opt(m.precision),
            fmt_opt(m.recall),
        ])?;
    }
    w.flush()
}

/// Writes `tradeoff.csv`: method, param, success_rate, delay_s.
pub fn write_tradeoff_csv(
    path: &Path,
    pred: &[TradeoffPoint],
    fixed: &[TradeoffPoint],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "param", "success_rate", "delay_s"])?;
    for p in pred.iter().chain(fixed.iter()) {
        w.write_record([
            p.method.clone(),
            p.param.to_string(),
            p.success_rate.to_string(),
            fmt_opt(p.mean_delay_s),
        ])?;
    }
    w.flush()
}

/// Writes `noise_rings.csv`: band, bounds, episode count, success rate.
pub fn write_noise_rings_csv(path: &Path, bands: &[BandBreakdown]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["band", "lo_m", "hi_m", "episodes", "success_rate"])?;
    for b in bands {
        w.write_record([
            b.band.clone(),
            b.lo_m.to_string(),
            b.hi_m.to_string(),
            b.episodes.to_string(),
            fmt_opt(b.success_rate),
        ])?;
    }
    w.flush()
}

/// Writes `gain_sweep.csv`: one row per gain.
pub fn write_gain_sweep_csv(path: &Path, rows: &[GainSweepRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "gain",
        "episodes",
        "success_rate",
        "success_se",
        "f_mean",
        "f_mean_se",
        "f_max",
        "f_max_se",
    ])?;
    for r in rows {
        w.write_record([
            r.gain.to_string(),
            r.summary.episodes.to_string(),
            r.summary.success_rate.to_string(),
            r.summary.success_se.to_string(),
            r.summary.f_mean.to_string(),
            r.summary.f_mean_se.to_string(),
            r.summary.f_max.to_string(),
            r.summary.f_max_se.to_string(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(
        success: bool,
        first: Option<u32>,
        term: u32,
        by: TerminatedBy,
        err: f64,
    ) -> EpisodeResult {
        EpisodeResult {
            episode: 0,
            success,
            first_success_step: first,
            termination_step: term,
            terminated_by: by,
            f_mean: 5.0,
            f_max: 10.0,
            pose_error_norm: err,
            gains_used: 600.0,
            a_et_trace: vec![],
            success_trace: vec![],
            diverged: false,
        }
    }

    #[test]
    fn metrics_trivial_cases() {
        // All succeed, all predict-terminate: precision = recall = 1.
        let results: Vec<EpisodeResult> = (0..10)
            .map(|_| synth(true, Some(10), 12, TerminatedBy::Predicted, 0.0))
            .collect();
        let m = compute_metrics(&results);
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.success_rate, 1.0);

        // 10 early-terminated, 5 successful: precision 0.5.
        let results: Vec<EpisodeResult> = (0..10)
            .map(|i| synth(i < 5, None, 20, TerminatedBy::Predicted, 0.0))
            .collect();
        let m = compute_metrics(&results);
        assert_eq!(m.precision, Some(0.5));
    }

    #[test]
    fn precision_absent_without_early_terminations() {
        let results: Vec<EpisodeResult> = (0..4)
            .map(|_| synth(true, Some(1), 150, TerminatedBy::FixedHorizon, 0.0))
            .collect();
        let m = compute_metrics(&results);
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
    }

    #[test]
    fn duration_is_steps_over_rate() {
        // 75 steps at 15 Hz = 5 s; delay example: first success 60,
        // termination 75 -> 1.0 s.
        let r = synth(true, Some(60), 75, TerminatedBy::Predicted, 0.0);
        let m = compute_metrics(&[r.clone()]);
        assert!((m.mean_duration_s - 5.0).abs() < 1e-12);
        let delay = (r.termination_step - r.first_success_step.unwrap()) as f64 / CONTROL_HZ;
        assert!((delay - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_recount_oracle_on_synthetic_lists() {
        // Brute-force recount oracle over randomized synthetic lists.
        use rand::Rng;
        let mut rng = crate::sampling::derive_stream(11, 0, 0, crate::sampling::StreamKind::Update);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let results: Vec<EpisodeResult> = (0..n)
                .map(|_| {
                    let success = rng.gen_bool(0.6);
                    let by = if rng.gen_bool(0.7) {
                        TerminatedBy::Predicted
                    } else {
                        TerminatedBy::FixedHorizon
                    };
                    let term = rng.gen_range(1..150);
                    synth(success, None, term, by, rng.gen_range(0.0..5e-3))
                })
                .collect();
            let m = compute_metrics(&results);

            // Oracle: explicit counting loops.
            let mut early = 0;
            let mut early_success = 0;
            let mut succ = 0;
            let mut succ_pred = 0;
            let mut dur = 0.0;
            for r in &results {
                if r.terminated_by == TerminatedBy::Predicted {
                    early += 1;
                    if r.success {
                        early_success += 1;
                    }
                }
                if r.success {
                    succ += 1;
                    if r.terminated_by == TerminatedBy::Predicted {
                        succ_pred += 1;
                    }
                }
                dur += r.termination_step as f64 / 15.0;
            }
            match m.precision {
                Some(p) => assert!((p - early_success as f64 / early as f64).abs() < 1e-12),
                None => assert_eq!(early, 0),
            }
            match m.recall {
                Some(rec) => assert!((rec - succ_pred as f64 / succ as f64).abs() < 1e-12),
                None => assert_eq!(succ, 0),
            }
            assert!((m.mean_duration_s - dur / results.len() as f64).abs() < 1e-12);
            assert!((m.success_rate - succ as f64 / results.len() as f64).abs() < 1e-12);
        }
    }

    fn traced(a_et: Vec<f64>, success: Vec<bool>) -> EpisodeResult {
        let first = success.iter().position(|&s| s).map(|i| i as u32 + 1);
        EpisodeResult {
            episode: 0,
            success: *success.last().unwrap(),
            first_success_step: first,
            termination_step: success.len() as u32,
            terminated_by: TerminatedBy::FixedHorizon,
            f_mean: 1.0,
            f_max: 2.0,
            pose_error_norm: 0.0,
            gains_used: 600.0,
            a_et_trace: a_et,
            success_trace: success,
            diverged: false,
        }
    }

    #[test]
    fn tradeoff_fixed_at_horizon_matches_raw_success() {
        // Success from step 4 onward; a_ET crosses 0.9 at step 6.
        let r1 = traced(
            vec![0.1, 0.2, 0.3, 0.5, 0.8, 0.95, 0.99, 0.99],
            vec![false, false, false, true, true, true, true, true],
        );
        let r2 = traced(
            vec![0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
            vec![false; 8],
        );
        let results = vec![r1, r2];
        let (pred, fixed) = termination_tradeoff(&results);
        // Fixed Term at T = horizon equals raw in-horizon success rate (1/2).
        let at_horizon = fixed.iter().find(|p| p.param == 8.0).unwrap();
        assert!((at_horizon.success_rate - 0.5).abs() < 1e-12);
        // Delay at the horizon: (8 - 4) / 15 s for the successful episode.
        assert!((at_horizon.mean_delay_s.unwrap() - 4.0 / 15.0).abs() < 1e-12);
        // Row-count contract: 19 threshold points, horizon fixed points.
        assert_eq!(pred.len(), 19);
        assert_eq!(fixed.len(), 8);
    }

    #[test]
    fn tradeoff_termination_monotone_in_threshold() {
        // Higher p_term never terminates earlier.
        let r = traced(
            vec![0.05, 0.2, 0.5, 0.6, 0.85, 0.9, 0.97, 0.99],
            vec![false, false, false, false, true, true, true, true],
        );
        let mut prev_step = 0u32;
        for i in 1..=19 {
            let p = i as f64 * 0.05;
            let step = r
                .a_et_trace
                .iter()
                .position(|&a| a > p)
                .map(|idx| idx as u32 + 1)
                .unwrap_or(r.success_trace.len() as u32);
            assert!(step >= prev_step);
            prev_step = step;
        }
    }

    #[test]
    fn noise_bands_assign_boundaries_correctly() {
        let results = vec![
            synth(true, None, 10, TerminatedBy::Predicted, 0.0),
            synth(true, None, 10, TerminatedBy::Predicted, 0.9999e-3),
            synth(false, None, 10, TerminatedBy::Predicted, 1.0e-3),
            synth(true, None, 10, TerminatedBy::Predicted, 2.5e-3),
            synth(false, None, 10, TerminatedBy::Predicted, 5.0e-3),
        ];
        let bands = noise_breakdown(&results);
        assert_eq!(bands[0].episodes, 2);
        // 2.5 mm belongs to the high band (left-closed intervals).
        assert_eq!(bands[1].episodes, 1);
        assert_eq!(bands[2].episodes, 2);
        assert_eq!(bands[0].success_rate, Some(1.0));
        assert_eq!(bands[2].success_rate, Some(0.5));
    }

    #[test]
    fn empty_band_reports_absent() {
        let results = vec![synth(true, None, 10, TerminatedBy::Predicted, 0.0)];
        let bands = noise_breakdown(&results);
        assert_eq!(bands[1].success_rate, None);
        assert_eq!(bands[2].success_rate, None);
    }
}
