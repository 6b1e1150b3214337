//! Proximal policy optimization from scratch: diagonal-Gaussian policy and
//! value MLPs, one-step advantages, clipped surrogate loss with exact
//! reverse-mode gradients, Adam, seeded rollouts and binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{Action, EmsEnv, EnvConfig, EnvError, EpisodeTrace};
use crate::grid::{LoadClass, NetworkModel, Scenario};
use crate::risk::{risk_report_from_served, RiskError, RiskReport, ScenarioSet};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("observation has {got} features, network expects {expected}")]
    ObsDim { expected: usize, got: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("non-finite loss")]
    NonFinite,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("episode {episode}: {source}")]
    Env {
        episode: u64,
        #[source]
        source: EnvError,
    },
    #[error(transparent)]
    EnvSetup(#[from] EnvError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip: f64,
    /// Value loss coefficient.
    pub c1: f64,
    /// Entropy bonus coefficient.
    pub c2: f64,
    pub learning_rate: f64,
    /// Episodes collected per update.
    pub episodes_per_update: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub total_episodes: u64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// λ for generalized advantages; `None` keeps the one-step estimate.
    pub gae_lambda: Option<f64>,
    pub normalize_advantages: bool,
    pub init_log_std: f64,
    /// Global gradient norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Write a checkpoint every this many updates; 0 disables.
    pub checkpoint_every: usize,
    /// Rollout worker threads; `None` or 1 collects sequentially.
    pub threads: Option<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip: 0.2,
            c1: 0.5,
            c2: 1e-3,
            learning_rate: 1e-3,
            episodes_per_update: 8,
            minibatch_size: 64,
            epochs: 10,
            total_episodes: 50_000,
            seed: 0,
            hidden: vec![64, 64],
            gae_lambda: None,
            normalize_advantages: true,
            init_log_std: -0.5,
            max_grad_norm: 0.5,
            checkpoint_every: 100,
            threads: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return bad("c1 and c2 must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.episodes_per_update == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("episodes_per_update, minibatch_size and epochs must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden sizes must be non-empty and positive");
        }
        if let Some(l) = self.gae_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad("gae_lambda must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Fully connected tanh network; `sizes` lists input, hidden and output widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

struct Cache {
    /// Layer inputs: activations[0] is the network input.
    activations: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self { sizes }
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn layer(&self, params: &[f64], l: usize, offset: usize) -> (DMatrix<f64>, DMatrix<f64>, usize) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = DMatrix::from_row_slice(n_out, n_in, &params[offset..offset + n_out * n_in]);
        let b = DMatrix::from_row_slice(1, n_out, &params[offset + n_out * n_in..offset + n_out * n_in + n_out]);
        (w, b, offset + n_out * n_in + n_out)
    }

    fn forward(&self, params: &[f64], x: &DMatrix<f64>, squash: bool) -> Cache {
        let layers = self.sizes.len() - 1;
        let mut activations = vec![x.clone()];
        let mut offset = 0;
        let mut out = x.clone();
        for l in 0..layers {
            let (w, b, next) = self.layer(params, l, offset);
            offset = next;
            let mut z = &activations[l] * w.transpose();
            for mut row in z.row_iter_mut() {
                row += &b;
            }
            let last = l + 1 == layers;
            if !last || squash {
                z.apply(|v| *v = v.tanh());
            }
            if last {
                out = z;
            } else {
                activations.push(z);
            }
        }
        Cache {
            activations,
            output: out,
        }
    }

    /// Gradient of Σ d_out ⊙ output with respect to the parameters.
    fn backward(&self, params: &[f64], cache: &Cache, d_out: &DMatrix<f64>, squash: bool) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut offsets = vec![0];
        for l in 0..layers {
            offsets.push(offsets[l] + self.sizes[l + 1] * self.sizes[l] + self.sizes[l + 1]);
        }
        let mut grad = vec![0.0; self.param_count()];
        let mut dz = d_out.clone();
        if squash {
            dz.zip_apply(&cache.output, |d, y| *d *= 1.0 - y * y);
        }
        for l in (0..layers).rev() {
            let a = &cache.activations[l];
            let gw = dz.transpose() * a;
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let o = offsets[l];
            for r in 0..n_out {
                for c in 0..n_in {
                    grad[o + r * n_in + c] = gw[(r, c)];
                }
                grad[o + n_out * n_in + r] = dz.column(r).sum();
            }
            if l > 0 {
                let (w, _, _) = self.layer(params, l, o);
                let mut da = &dz * w;
                da.zip_apply(a, |d, h| *d *= 1.0 - h * h);
                dz = da;
            }
        }
        grad
    }

    /// Orthogonal-style initialization: each weight matrix is an orthonormal
    /// block scaled by `gain` (`out_gain` for the last layer); biases zero.
    fn init(&self, rng: &mut ChaCha8Rng, gain: f64, out_gain: f64) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut params = Vec::with_capacity(self.param_count());
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let g = if l + 1 == layers { out_gain } else { gain };
            let tall = n_out.max(n_in);
            let short = n_out.min(n_in);
            let m = DMatrix::from_fn(tall, short, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = m.qr().q();
            for r in 0..n_out {
                for c in 0..n_in {
                    let v = if n_out >= n_in { q[(r, c)] } else { q[(c, r)] };
                    params.push(g * v);
                }
            }
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        params
    }
}

/// Policy network weights followed by per-action log-stds, and the separate
/// value network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
}

impl PolicyParameters {
    pub fn policy_net(&self) -> Mlp {
        Mlp::new(self.obs_dim, &self.hidden, self.act_dim)
    }

    pub fn value_net(&self) -> Mlp {
        Mlp::new(self.obs_dim, &self.hidden, 1)
    }

    pub fn zeros(obs_dim: usize, act_dim: usize, hidden: &[usize], log_std: f64) -> Self {
        let p = Mlp::new(obs_dim, hidden, act_dim).param_count();
        let v = Mlp::new(obs_dim, hidden, 1).param_count();
        let mut policy = vec![0.0; p + act_dim];
        policy[p..].iter_mut().for_each(|x| *x = log_std);
        Self {
            obs_dim,
            act_dim,
            hidden: hidden.to_vec(),
            policy,
            value: vec![0.0; v],
        }
    }

    pub fn init(obs_dim: usize, act_dim: usize, config: &PpoConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let mut out = Self::zeros(obs_dim, act_dim, &config.hidden, config.init_log_std);
        let pn = out.policy_net();
        let weights = pn.init(&mut rng, std::f64::consts::SQRT_2, 0.01);
        out.policy[..weights.len()].copy_from_slice(&weights);
        out.value = out.value_net().init(&mut rng, std::f64::consts::SQRT_2, 1.0);
        out
    }

    pub fn log_std(&self) -> &[f64] {
        &self.policy[self.policy.len() - self.act_dim..]
    }

    pub fn len(&self) -> usize {
        self.policy.len() + self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.policy.clone();
        v.extend_from_slice(&self.value);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.policy.len();
        self.policy.copy_from_slice(&flat[..n]);
        self.value.copy_from_slice(&flat[n..]);
    }

    pub fn norm(&self) -> f64 {
        self.policy.iter().chain(&self.value).map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_obs(&self, got: usize) -> Result<(), PpoError> {
        if got != self.obs_dim {
            return Err(PpoError::ObsDim {
                expected: self.obs_dim,
                got,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    /// Means in the normalized action box.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ActionDistribution {
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(action)
            .map(|((m, s), a)| -0.5 * ((a - m) / s).powi(2) - s.ln() - 0.5 * LOG_2PI)
            .sum()
    }
}

pub fn policy_forward(params: &PolicyParameters, obs: &[f64]) -> Result<ActionDistribution, PpoError> {
    params.check_obs(obs.len())?;
    let x = DMatrix::from_row_slice(1, obs.len(), obs);
    let cache = params.policy_net().forward(&params.policy, &x, true);
    Ok(ActionDistribution {
        mean: cache.output.iter().copied().collect(),
        std: params.log_std().iter().map(|l| l.exp()).collect(),
    })
}

pub fn value_forward(params: &PolicyParameters, obs: &[f64]) -> Result<f64, PpoError> {
    params.check_obs(obs.len())?;
    let x = DMatrix::from_row_slice(1, obs.len(), obs);
    Ok(params.value_net().forward(&params.value, &x, false).output[(0, 0)])
}

fn values_batch(params: &PolicyParameters, obs: &DMatrix<f64>) -> Vec<f64> {
    params.value_net().forward(&params.value, obs, false).output.iter().copied().collect()
}

/// One-step advantage `r_t + γ V(s_{t+1}) − V(s_t)`; `next_values` must
/// already hold 0 on terminal steps.
pub fn advantage(rewards: &[f64], values: &[f64], next_values: &[f64], gamma: f64) -> Result<Vec<f64>, PpoError> {
    for (what, n) in [("values", values.len()), ("next_values", next_values.len())] {
        if n != rewards.len() {
            return Err(PpoError::Length {
                what,
                expected: rewards.len(),
                got: n,
            });
        }
    }
    Ok(rewards
        .iter()
        .zip(values)
        .zip(next_values)
        .map(|((r, v), n)| r + gamma * n - v)
        .collect())
}

/// λ-weighted sum of one-step advantages within one episode.
pub fn gae(one_step: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; one_step.len()];
    let mut acc = 0.0;
    for t in (0..one_step.len()).rev() {
        acc = one_step[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    out
}

/// Discounted reward-to-go within one episode.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Training samples; rows of `obs` and `actions` align with the vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: DMatrix<f64>,
    /// Unclipped Gaussian samples in normalized action space.
    pub actions: DMatrix<f64>,
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.old_log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_prob.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            obs: self.obs.select_rows(rows),
            actions: self.actions.select_rows(rows),
            old_log_prob: rows.iter().map(|&i| self.old_log_prob[i]).collect(),
            advantages: rows.iter().map(|&i| self.advantages[i]).collect(),
            returns: rows.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Clipped surrogate objective (maximized).
    pub policy: f64,
    /// Mean of ½ (V − R)².
    pub value: f64,
    /// Mean Gaussian entropy.
    pub entropy: f64,
    /// −policy + c1·value − c2·entropy.
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Which scalar [`ppo_loss_term`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Policy,
    Value,
    Entropy,
    Total,
}

fn entropy_of(log_std: &[f64]) -> f64 {
    log_std.iter().map(|l| l + 0.5 * (1.0 + LOG_2PI)).sum()
}

/// Loss `wp·(−L_clip) + wv·L_VF + we·(−L_ent)` and its gradient over the
/// flat parameter vector (policy, then value).
fn weighted_loss(
    batch: &Batch,
    params: &PolicyParameters,
    clip: f64,
    (wp, wv, we): (f64, f64, f64),
) -> Result<(LossBreakdown, Vec<f64>), PpoError> {
    params.check_obs(batch.obs.ncols())?;
    let n = batch.len();
    if n == 0 {
        return Err(PpoError::Length {
            what: "batch",
            expected: 1,
            got: 0,
        });
    }
    let nf = n as f64;
    let a_dim = params.act_dim;
    let pnet = params.policy_net();
    let vnet = params.value_net();
    let p_count = pnet.param_count();
    let log_std = params.log_std();
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();

    let pc = pnet.forward(&params.policy, &batch.obs, true);
    let mut d_mean = DMatrix::zeros(n, a_dim);
    let mut d_log_std = vec![0.0; a_dim];
    let (mut l_clip, mut ratio_sum, mut clipped) = (0.0, 0.0, 0);
    for i in 0..n {
        let mut logp = 0.0;
        for j in 0..a_dim {
            let diff = batch.actions[(i, j)] - pc.output[(i, j)];
            logp += -0.5 * diff * diff * inv_var[j] - log_std[j] - 0.5 * LOG_2PI;
        }
        let ratio = (logp - batch.old_log_prob[i]).exp();
        let adv = batch.advantages[i];
        let unclipped = ratio * adv;
        let clipped_term = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        ratio_sum += ratio;
        // The gradient flows only through the unclipped arm when it is the min.
        let active = unclipped <= clipped_term;
        if !active {
            clipped += 1;
        }
        l_clip += unclipped.min(clipped_term);
        if active && wp != 0.0 {
            // d(total)/d(logp) = −wp · ratio · A / n
            let g = -wp * unclipped / nf;
            for j in 0..a_dim {
                let diff = batch.actions[(i, j)] - pc.output[(i, j)];
                d_mean[(i, j)] = g * diff * inv_var[j];
                d_log_std[j] += g * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }
    l_clip /= nf;

    let vc = vnet.forward(&params.value, &batch.obs, false);
    let mut d_v = DMatrix::zeros(n, 1);
    let mut l_vf = 0.0;
    for i in 0..n {
        let e = vc.output[(i, 0)] - batch.returns[i];
        l_vf += 0.5 * e * e;
        d_v[(i, 0)] = wv * e / nf;
    }
    l_vf /= nf;

    let ent = entropy_of(log_std);
    // d(−we·ent)/d(log_std_j) = −we
    d_log_std.iter_mut().for_each(|g| *g -= we);

    let mut grad = pnet.backward(&params.policy, &pc, &d_mean, true);
    debug_assert_eq!(grad.len(), p_count);
    grad.extend_from_slice(&d_log_std);
    grad.extend(vnet.backward(&params.value, &vc, &d_v, false));

    let total = -wp * l_clip + wv * l_vf - we * ent;
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(PpoError::NonFinite);
    }
    Ok((
        LossBreakdown {
            policy: l_clip,
            value: l_vf,
            entropy: ent,
            total,
            mean_ratio: ratio_sum / nf,
            clip_fraction: clipped as f64 / nf,
        },
        grad,
    ))
}

/// Total PPO loss in minimization form and its gradient.
pub fn ppo_loss(batch: &Batch, params: &PolicyParameters, config: &PpoConfig) -> Result<(LossBreakdown, Vec<f64>), PpoError> {
    weighted_loss(batch, params, config.clip, (1.0, config.c1, config.c2))
}

/// One loss component and its gradient. `Policy` and `Entropy` return the
/// objectives themselves (to be maximized), `Value` and `Total` the losses.
pub fn ppo_loss_term(batch: &Batch, params: &PolicyParameters, config: &PpoConfig, term: LossTerm) -> Result<(f64, Vec<f64>), PpoError> {
    let (w, pick): ((f64, f64, f64), fn(&LossBreakdown) -> f64) = match term {
        LossTerm::Policy => ((-1.0, 0.0, 0.0), |l| l.policy),
        LossTerm::Value => ((0.0, 1.0, 0.0), |l| l.value),
        LossTerm::Entropy => ((0.0, 0.0, -1.0), |l| l.entropy),
        LossTerm::Total => ((1.0, config.c1, config.c2), |l| l.total),
    };
    let (l, g) = weighted_loss(batch, params, config.clip, w)?;
    Ok((pick(&l), g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub update: u64,
    pub episodes: u64,
    pub mean_reward: f64,
    pub mean_repairs: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub param_norm: f64,
    pub skipped: bool,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str =
        "update,episodes,mean_reward,mean_repairs,policy_loss,value_loss,entropy,mean_ratio,param_norm,skipped";

    /// Deterministic CSV (no timings).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.update,
                r.episodes,
                r.mean_reward,
                r.mean_repairs,
                r.policy_loss,
                r.value_loss,
                r.entropy,
                r.mean_ratio,
                r.param_norm,
                r.skipped
            ));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("update,wall_clock_s\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6}\n", r.update, r.wall_clock_s));
        }
        s
    }
}

/// Fingerprint of every setting that shapes the training trajectory.
pub fn config_hash(config: &PpoConfig, env: &EnvConfig, model: &NetworkModel) -> u64 {
    #[derive(Serialize)]
    struct Key<'a> {
        gamma: f64,
        clip: f64,
        c1: f64,
        c2: f64,
        learning_rate: f64,
        episodes_per_update: usize,
        minibatch_size: usize,
        epochs: usize,
        seed: u64,
        hidden: &'a [usize],
        gae_lambda: Option<f64>,
        normalize_advantages: bool,
        init_log_std: f64,
        max_grad_norm: f64,
        env: &'a EnvConfig,
        model: &'a NetworkModel,
    }
    let key = Key {
        gamma: config.gamma,
        clip: config.clip,
        c1: config.c1,
        c2: config.c2,
        learning_rate: config.learning_rate,
        episodes_per_update: config.episodes_per_update,
        minibatch_size: config.minibatch_size,
        epochs: config.epochs,
        seed: config.seed,
        hidden: &config.hidden,
        gae_lambda: config.gae_lambda,
        normalize_advantages: config.normalize_advantages,
        init_log_std: config.init_log_std,
        max_grad_norm: config.max_grad_norm,
        env,
        model,
    };
    let bytes = serde_json::to_vec(&key).expect("plain data serializes");
    let digest = Sha256::digest(&bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParameters,
    pub config_hash: u64,
    pub update: u64,
    pub episodes: u64,
    pub adam: Option<Adam>,
}

const MAGIC: &[u8; 8] = b"EMSPPO\0\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PpoError> {
    let p = &ckpt.params;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(p.obs_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(p.act_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(p.hidden.len() as u32).to_le_bytes());
    for h in &p.hidden {
        buf.extend_from_slice(&(*h as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    buf.extend_from_slice(&ckpt.update.to_le_bytes());
    buf.extend_from_slice(&ckpt.episodes.to_le_bytes());
    buf.extend_from_slice(&(p.policy.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
    for x in p.policy.iter().chain(&p.value) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    match &ckpt.adam {
        None => buf.push(0),
        Some(a) => {
            buf.push(1);
            buf.extend_from_slice(&a.t.to_le_bytes());
            for x in a.m.iter().chain(&a.v) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PpoError> {
        if self.pos + n > self.buf.len() {
            return Err(PpoError::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PpoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PpoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PpoError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| PpoError::Checkpoint("bad length".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PpoError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PpoError::Checkpoint("not a policy checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PpoError::Checkpoint(format!("unsupported version {version}")));
    }
    let obs_dim = r.u32()? as usize;
    let act_dim = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let hidden = (0..n_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>, _>>()?;
    let config_hash = r.u64()?;
    let update = r.u64()?;
    let episodes = r.u64()?;
    let np = r.u64()? as usize;
    let nv = r.u64()? as usize;
    let shape = PolicyParameters::zeros(obs_dim, act_dim, &hidden, 0.0);
    if np != shape.policy.len() || nv != shape.value.len() {
        return Err(PpoError::Checkpoint(format!(
            "parameter counts {np}/{nv} do not match the stored shapes"
        )));
    }
    let policy = r.f64s(np)?;
    let value = r.f64s(nv)?;
    let adam = match r.take(1)?[0] {
        0 => None,
        _ => {
            let t = r.u64()?;
            let m = r.f64s(np + nv)?;
            let v = r.f64s(np + nv)?;
            Some(Adam {
                t,
                m,
                v,
                ..Adam::new(0, 0.0)
            })
        }
    };
    Ok(Checkpoint {
        params: PolicyParameters {
            obs_dim,
            act_dim,
            hidden,
            policy,
            value,
        },
        config_hash,
        update,
        episodes,
        adam,
    })
}

impl Checkpoint {
    /// Errors naming the first shape that differs from the expectation.
    pub fn check_shapes(&self, obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Result<(), PpoError> {
        let p = &self.params;
        if p.obs_dim != obs_dim {
            return Err(PpoError::Checkpoint(format!("observation dim {} != expected {obs_dim}", p.obs_dim)));
        }
        if p.act_dim != act_dim {
            return Err(PpoError::Checkpoint(format!("action dim {} != expected {act_dim}", p.act_dim)));
        }
        if p.hidden != hidden {
            return Err(PpoError::Checkpoint(format!("hidden sizes {:?} != expected {hidden:?}", p.hidden)));
        }
        Ok(())
    }
}

/// Trajectory of one sampled episode.
struct Rollout {
    obs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    log_prob: Vec<f64>,
    rewards: Vec<f64>,
    raw_reward: f64,
    repairs: usize,
}

fn sample_scenario(set: &ScenarioSet, cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
    cdf.partition_point(|c| *c <= u).min(set.len() - 1)
}

pub struct Trainer {
    model: NetworkModel,
    env_config: EnvConfig,
    set: ScenarioSet,
    cdf: Vec<f64>,
    pub config: PpoConfig,
    pub params: PolicyParameters,
    pub adam: Adam,
    pub update: u64,
    pub episodes: u64,
    pub log: TrainingLog,
    reward_scale: f64,
    obs_dim: usize,
    act_dim: usize,
    hash: u64,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(model: &NetworkModel, env_config: EnvConfig, set: ScenarioSet, config: PpoConfig) -> Result<Self, PpoError> {
        config.validate()?;
        if set.is_empty() {
            return Err(PpoError::Config("scenario set is empty".into()));
        }
        let env = EmsEnv::new(model, env_config)?;
        let obs_dim = env.observation_dim();
        let act_dim = env.action_dim();
        let max_r = env.max_interval_reward();
        let params = PolicyParameters::init(obs_dim, act_dim, &config);
        let mut acc = 0.0;
        let cdf = set
            .weights()
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        #[cfg(feature = "parallel")]
        let pool = match config.threads {
            Some(n) if n > 1 => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| PpoError::Config(e.to_string()))?,
            ),
            _ => None,
        };
        Ok(Self {
            hash: config_hash(&config, &env_config, model),
            adam: Adam::new(params.len(), config.learning_rate),
            model: model.clone(),
            env_config,
            set,
            cdf,
            params,
            update: 0,
            episodes: 0,
            log: TrainingLog::default(),
            reward_scale: if max_r > 0.0 { 1.0 / max_r } else { 1.0 },
            obs_dim,
            act_dim,
            config,
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    pub fn config_hash(&self) -> u64 {
        self.hash
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            config_hash: self.hash,
            update: self.update,
            episodes: self.episodes,
            adam: Some(self.adam.clone()),
        }
    }

    /// Continues from a checkpoint written by a trainer with the same config.
    pub fn resume(&mut self, ckpt: Checkpoint) -> Result<(), PpoError> {
        ckpt.check_shapes(self.obs_dim, self.act_dim, &self.config.hidden)?;
        if ckpt.config_hash != self.hash {
            return Err(PpoError::Checkpoint(format!(
                "config hash {:016x} != expected {:016x}",
                ckpt.config_hash, self.hash
            )));
        }
        self.params = ckpt.params;
        if let Some(a) = ckpt.adam {
            self.adam.t = a.t;
            self.adam.m = a.m;
            self.adam.v = a.v;
        }
        self.update = ckpt.update;
        self.episodes = ckpt.episodes;
        Ok(())
    }

    fn rollout(&self, episode: u64) -> Result<Rollout, PpoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(episode);
        let sid = sample_scenario(&self.set, &self.cdf, &mut rng);
        let scenario = &self.set.scenarios[sid];
        let env_err = |source| PpoError::Env { episode, source };
        let mut env = EmsEnv::new(&self.model, self.env_config).map_err(env_err)?;
        env.reset_with_id(scenario, Some(sid), episode).map_err(env_err)?;
        let mut out = Rollout {
            obs: vec![],
            actions: vec![],
            log_prob: vec![],
            rewards: vec![],
            raw_reward: 0.0,
            repairs: 0,
        };
        loop {
            let obs = env.observation().features.clone();
            let dist = policy_forward(&self.params, &obs)?;
            let a: Vec<f64> = dist
                .mean
                .iter()
                .zip(&dist.std)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let step = env.step(&Action::from_normalized(&a, env.model())).map_err(env_err)?;
            out.log_prob.push(dist.log_prob(&a));
            out.obs.push(obs);
            out.actions.push(a);
            out.rewards.push(step.reward.total * self.reward_scale);
            out.raw_reward += step.reward.total;
            out.repairs += step.info.repairs;
            if step.done {
                return Ok(out);
            }
        }
    }

    fn collect(&self, first: u64, n: u64) -> Result<Vec<Rollout>, PpoError> {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (first..first + n).into_par_iter().map(|e| self.rollout(e)).collect());
        }
        (first..first + n).map(|e| self.rollout(e)).collect()
    }

    fn build_batch(&self, rollouts: &[Rollout]) -> Batch {
        let rows: usize = rollouts.iter().map(|r| r.rewards.len()).sum();
        let mut obs = DMatrix::zeros(rows, self.obs_dim);
        let mut actions = DMatrix::zeros(rows, self.act_dim);
        let mut i = 0;
        for r in rollouts {
            for (o, a) in r.obs.iter().zip(&r.actions) {
                obs.row_mut(i).copy_from_slice(o);
                actions.row_mut(i).copy_from_slice(a);
                i += 1;
            }
        }
        let values = values_batch(&self.params, &obs);
        let gamma = self.config.gamma;
        let (mut adv, mut ret, mut logp) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
        let mut start = 0;
        for r in rollouts {
            let len = r.rewards.len();
            let v = &values[start..start + len];
            let next: Vec<f64> = (0..len).map(|t| if t + 1 < len { v[t + 1] } else { 0.0 }).collect();
            let one = advantage(&r.rewards, v, &next, gamma).expect("aligned by construction");
            adv.extend(match self.config.gae_lambda {
                Some(l) => gae(&one, gamma, l),
                None => one,
            });
            ret.extend(discounted_returns(&r.rewards, gamma));
            logp.extend_from_slice(&r.log_prob);
            start += len;
        }
        if self.config.normalize_advantages && rows > 1 {
            let mean = adv.iter().sum::<f64>() / rows as f64;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / rows as f64;
            let sd = var.sqrt().max(1e-8);
            adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
        }
        Batch {
            obs,
            actions,
            old_log_prob: logp,
            advantages: adv,
            returns: ret,
        }
    }

    /// Collects one batch of episodes and runs the gradient epochs.
    pub fn step_update(&mut self) -> Result<LogRow, PpoError> {
        let started = Instant::now();
        let n = self.config.episodes_per_update as u64;
        let rollouts = self.collect(self.episodes, n)?;
        let batch = self.build_batch(&rollouts);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(self.update);
        let mut flat = self.params.flat();
        let mut skipped = false;
        let mut last = LossBreakdown::default();
        'epochs: for _ in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..batch.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for chunk in order.chunks(self.config.minibatch_size) {
                let mb = batch.select(chunk);
                match ppo_loss(&mb, &self.params, &self.config) {
                    Ok((l, mut g)) => {
                        last = l;
                        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if self.config.max_grad_norm > 0.0 && norm > self.config.max_grad_norm {
                            let s = self.config.max_grad_norm / norm;
                            g.iter_mut().for_each(|x| *x *= s);
                        }
                        self.adam.step(&mut flat, &g);
                        self.params.set_flat(&flat);
                    }
                    Err(PpoError::NonFinite) => {
                        skipped = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let after = weighted_loss(&batch, &self.params, self.config.clip, (1.0, self.config.c1, self.config.c2));
        let mean_ratio = after.map(|(l, _)| l.mean_ratio).unwrap_or(f64::NAN);
        self.update += 1;
        self.episodes += n;
        let row = LogRow {
            update: self.update,
            episodes: self.episodes,
            mean_reward: rollouts.iter().map(|r| r.raw_reward).sum::<f64>() / n as f64,
            mean_repairs: rollouts.iter().map(|r| r.repairs as f64).sum::<f64>() / n as f64,
            policy_loss: last.policy,
            value_loss: last.value,
            entropy: last.entropy,
            mean_ratio,
            param_norm: self.params.norm(),
            skipped,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        self.log.rows.push(row.clone());
        Ok(row)
    }

    /// Trains until `total_episodes`, calling `on_update` after each update.
    pub fn run<F>(&mut self, mut on_update: F) -> Result<(), PpoError>
    where
        F: FnMut(&Trainer) -> Result<(), PpoError>,
    {
        while self.episodes + self.config.episodes_per_update as u64 <= self.config.total_episodes {
            self.step_update()?;
            on_update(self)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final parameters and log.
pub fn train(
    model: &NetworkModel,
    env_config: EnvConfig,
    set: &ScenarioSet,
    config: &PpoConfig,
) -> Result<(PolicyParameters, TrainingLog), PpoError> {
    let mut t = Trainer::new(model, env_config, set.clone(), config.clone())?;
    t.run(|_| Ok(()))?;
    Ok((t.params, t.log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioOutcome {
    pub id: usize,
    pub mask_hex: String,
    pub probability: f64,
    pub served_weighted: f64,
    /// Full weighted demand minus served.
    pub shortfall: f64,
    pub error: Option<String>,
    pub trace: Option<EpisodeTrace>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub report: RiskReport,
    pub outcomes: Vec<ScenarioOutcome>,
}

impl Evaluation {
    /// Served fraction of `class` in the scenario with index `id`.
    pub fn served_fraction(&self, model: &NetworkModel, id: usize, class: LoadClass) -> f64 {
        self.outcomes[id]
            .trace
            .as_ref()
            .map(|t| t.served_fraction(model, class))
            .unwrap_or(0.0)
    }
}

/// Deterministic rollout of `policy` (normalized actions) on each retained
/// scenario. Environment failures are recorded per scenario as zero served.
pub fn evaluate_policy<F>(
    model: &NetworkModel,
    env_config: EnvConfig,
    set: &ScenarioSet,
    alpha: f64,
    mut policy: F,
) -> Result<Evaluation, PpoError>
where
    F: FnMut(&crate::env::Observation) -> Vec<f64>,
{
    let mut env = EmsEnv::new(model, env_config)?;
    let demand = model.full_weighted_demand();
    let mut outcomes = Vec::with_capacity(set.len());
    let weights = set.weights();
    for (id, s) in set.scenarios.iter().enumerate() {
        let started = Instant::now();
        let result = env.reset_with_id(s, Some(id), 0).map(|_| ()).and_then(|_| loop {
            let a = policy(env.observation());
            let action = Action::from_normalized(&a, env.model());
            if env.step(&action)?.done {
                break Ok(env.trace());
            }
        });
        let wall = started.elapsed().as_secs_f64();
        let (served, error, trace) = match result {
            Ok(t) => (t.weighted_served(model), None, Some(t)),
            Err(e) => (0.0, Some(e.to_string()), None),
        };
        outcomes.push(ScenarioOutcome {
            id,
            mask_hex: s.mask_hex(),
            probability: weights[id],
            served_weighted: served,
            shortfall: demand - served,
            error,
            trace,
            wall_clock_s: wall,
        });
    }
    let served: Vec<f64> = outcomes.iter().map(|o| o.served_weighted).collect();
    let report = risk_report_from_served(set, &served, alpha)?;
    Ok(Evaluation { report, outcomes })
}

/// Mean-action rollouts of trained parameters.
pub fn evaluate(
    params: &PolicyParameters,
    model: &NetworkModel,
    env_config: EnvConfig,
    set: &ScenarioSet,
    alpha: f64,
) -> Result<Evaluation, PpoError> {
    let mut failure = None;
    let eval = evaluate_policy(model, env_config, set, alpha, |obs| match policy_forward(params, &obs.features) {
        Ok(d) => d.mean,
        Err(e) => {
            failure.get_or_insert(e);
            vec![0.0; params.act_dim]
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(eval),
    }
}

/// Scenario in `set` with the most lost capacity; ties go to the more
/// probable one, then the lower mask.
pub fn worst_retained(model: &NetworkModel, set: &ScenarioSet) -> Option<usize> {
    let lost = |s: &Scenario| -> f64 {
        model
            .generators
            .iter()
            .zip(&s.mask)
            .filter(|(_, f)| **f)
            .map(|(g, _)| g.p_max)
            .sum()
    };
    (0..set.len()).max_by(|&a, &b| {
        let (sa, sb) = (&set.scenarios[a], &set.scenarios[b]);
        lost(sa)
            .total_cmp(&lost(sb))
            .then(sa.probability.total_cmp(&sb.probability))
            .then(b.cmp(&a))
    })
}
