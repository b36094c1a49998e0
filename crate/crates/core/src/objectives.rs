//! Training objectives: the coherence metric and the structural alignment
//! loss built on it, the entropy penalty, trajectory rewards with a moving
//! baseline, the score-function policy-gradient surrogate, and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StepConstraint;
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Transitions with a cosine below this count as coherence violations.
pub const DEFAULT_TAU_C: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_RHO: f64 = 0.99;
pub const DEFAULT_CLIP: f64 = 1.0;
/// Reward assigned to trajectories too short to score.
pub const DEGENERATE_REWARD: f64 = -1.0;

const NORMALIZATION_TOL: f64 = 1e-9;

/// One sampled continuation and everything needed to score and
/// differentiate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
    /// `log π(a_t | s_t)` per generated token, under the sampling
    /// distribution (temperature 1 when decoding greedily).
    pub log_probs: Vec<f64>,
    pub constraints: Vec<StepConstraint>,
    pub temperature: f64,
    /// Final hidden states of the generated content (EOS excluded), `[n×d]`.
    pub hidden: Tensor,
    /// Sentence embeddings of the generated content, when it has any tokens.
    pub sentence_embeddings: Option<Tensor>,
    /// True when generation ended with EOS rather than a length limit.
    pub terminal: bool,
    pub degenerate: bool,
    reward: Option<f64>,
}

impl Trajectory {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        prompt: Vec<usize>,
        generated: Vec<usize>,
        log_probs: Vec<f64>,
        constraints: Vec<StepConstraint>,
        temperature: f64,
        hidden: Tensor,
        sentence_embeddings: Option<Tensor>,
        terminal: bool,
    ) -> Self {
        let content = hidden.rows();
        Trajectory {
            prompt,
            generated,
            log_probs,
            constraints,
            temperature,
            hidden,
            sentence_embeddings,
            terminal,
            degenerate: content < 2,
            reward: None,
        }
    }

    pub fn len(&self) -> usize {
        self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generated.is_empty()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn reward(&self) -> Option<f64> {
        self.reward
    }

    /// Stores the reward; a trajectory is scored exactly once.
    pub fn set_reward(&mut self, reward: f64) -> Result<()> {
        if self.reward.is_some() {
            return Err(Error::InvalidArgument("trajectory reward is already set".into()));
        }
        if !reward.is_finite() {
            return Err(Error::NonFinite { op: "set_reward" });
        }
        self.reward = Some(reward);
        Ok(())
    }

    /// Units the coherence metric runs over: sentence embeddings when there
    /// are at least two sentences, otherwise token hidden states.
    pub fn coherence_units(&self) -> &Tensor {
        match &self.sentence_embeddings {
            Some(s) if s.rows() >= 2 => s,
            _ => &self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// `cos(h_i, h_{i+1})` for each transition.
    pub cosines: Vec<f64>,
    pub weights: Vec<f64>,
    /// Number of units.
    pub n: usize,
    pub coherence: f64,
    pub violations: usize,
    pub tau_c: f64,
}

impl CoherenceReport {
    /// Fraction of transitions that are violations.
    pub fn violation_rate(&self) -> f64 {
        self.violations as f64 / (self.n - 1) as f64
    }
}

fn check_weights(weights: Option<&[f64]>, transitions: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; transitions]),
        Some(w) if w.len() != transitions => Err(Error::InvalidArgument(format!(
            "expected {transitions} transition weights, got {}",
            w.len()
        ))),
        Some(w) if w.iter().any(|x| !(0.0..=1.0).contains(x)) => {
            Err(Error::InvalidArgument("transition weights must lie in [0, 1]".into()))
        }
        Some(w) => Ok(w.to_vec()),
    }
}

/// `C = (1/(N−1)) Σ_i w_i cos(h_i, h_{i+1})` over the rows of `units`, with
/// violations counted against `tau_c`.
pub fn coherence_metric(units: &Tensor, weights: Option<&[f64]>, tau_c: f64) -> Result<CoherenceReport> {
    if units.shape().len() != 2 {
        return Err(Error::Shape {
            op: "coherence_metric",
            lhs: units.shape().to_vec(),
            rhs: vec![],
        });
    }
    let n = units.rows();
    if n < 2 {
        return Err(Error::InvalidArgument("coherence undefined for a single unit".into()));
    }
    if !units.is_finite() {
        return Err(Error::NonFinite { op: "coherence_metric" });
    }
    let weights = check_weights(weights, n - 1)?;
    let cosines: Vec<f64> = (0..n - 1)
        .map(|i| kernels::cosine(units.row(i), units.row(i + 1)).0)
        .collect();
    let coherence = kernels::dot(&cosines, &weights) / (n - 1) as f64;
    let violations = cosines.iter().filter(|&&c| c < tau_c).count();
    Ok(CoherenceReport {
        cosines,
        weights,
        n,
        coherence,
        violations,
        tau_c,
    })
}

/// Differentiable coherence of the rows of `units`.
pub fn coherence_on_tape(tape: &mut Tape, units: Var, weights: Option<&[f64]>) -> Result<Var> {
    let n = tape.shape(units).first().copied().unwrap_or(0);
    if tape.shape(units).len() != 2 || n < 2 {
        return Err(Error::InvalidArgument("coherence undefined for a single unit".into()));
    }
    let w: Vec<f64> = check_weights(weights, n - 1)?
        .into_iter()
        .map(|w| w / (n - 1) as f64)
        .collect();
    let cos = tape.adjacent_cosines(units)?;
    tape.weighted_sum(cos, &w)
}

/// `L_SA = 1 − C`.
pub fn structural_alignment_loss(report: &CoherenceReport) -> f64 {
    1.0 - report.coherence
}

/// `1 − C` on the tape.
pub fn structural_alignment_on_tape(tape: &mut Tape, units: Var, weights: Option<&[f64]>) -> Result<Var> {
    let c = coherence_on_tape(tape, units, weights)?;
    let neg = tape.scale(c, -1.0)?;
    tape.add_const(neg, &[1.0])
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", format!("must be a finite value ≥ 0, got {lambda}")));
    }
    Ok(())
}

/// `L_total = L_CE + λ·L_SA`.
pub fn total_loss(ce: f64, sa: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(ce + lambda * sa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sa: f64,
    pub total: f64,
    pub reg: f64,
    pub lambda: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, sa: f64, reg: f64, lambda: f64, beta: f64) -> Result<Self> {
        Ok(LossBreakdown {
            ce,
            sa,
            total: total_loss(ce, sa, lambda)?,
            reg,
            lambda,
            beta,
        })
    }
}

/// `L_reg = −β Σ_t Σ_a π(a|s_t) log π(a|s_t)` with `0·log 0 = 0`.
pub fn entropy_penalty(distributions: &[Vec<f64>], beta: f64) -> Result<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::config("beta", format!("must be a finite value ≥ 0, got {beta}")));
    }
    let mut total = 0.0;
    for (t, p) in distributions.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "step {t}: not a probability distribution (sums to {sum})"
            )));
        }
        total -= p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    }
    Ok((beta * total).max(0.0))
}

/// `R = C − μ·violations/(N−1)` over the trajectory's coherence units;
/// degenerate trajectories score [`DEGENERATE_REWARD`].
pub fn trajectory_reward(traj: &Trajectory, mu: f64, tau_c: f64) -> Result<f64> {
    if traj.degenerate {
        return Ok(DEGENERATE_REWARD);
    }
    let report = coherence_metric(traj.coherence_units(), None, tau_c)?;
    Ok(report.coherence - mu * report.violation_rate())
}

/// Computes and stores the reward.
pub fn score_trajectory(traj: &mut Trajectory, mu: f64, tau_c: f64) -> Result<f64> {
    let r = trajectory_reward(traj, mu, tau_c)?;
    traj.set_reward(r)?;
    Ok(r)
}

/// Exponential moving average of rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
    pub updates: u64,
}

impl Baseline {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config("rho", format!("must lie in [0, 1), got {decay}")));
        }
        Ok(Baseline {
            value: 0.0,
            decay,
            updates: 0,
        })
    }

    /// `b ← ρ·b + (1−ρ)·R`.
    pub fn update(&mut self, reward: f64) -> Result<()> {
        if !reward.is_finite() {
            return Err(Error::NonFinite { op: "baseline update" });
        }
        // Same as ρ·b + (1−ρ)·R, but leaves b exactly unchanged when R == b.
        self.value += (1.0 - self.decay) * (reward - self.value);
        self.updates += 1;
        Ok(())
    }
}

/// `−(1/|B|) Σ_τ A_τ Σ_t log π(a_t|s_t)` where each entry pairs a vector of
/// per-step log-probabilities with its constant advantage `A_τ = R(τ) − b`.
pub fn reinforce_surrogate(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::InvalidArgument("policy gradient over an empty batch".into()));
    }
    let scale = -1.0 / terms.len() as f64;
    let mut acc: Option<Var> = None;
    for &(log_probs, advantage) in terms {
        let n = tape.value(log_probs).len();
        let s = tape.weighted_sum(log_probs, &vec![advantage * scale; n])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("non-empty batch"))
}

/// Additive logit mask for one decoding step.
pub fn constraint_mask(constraint: &StepConstraint, vocab: usize) -> Vec<f64> {
    let mut mask = vec![0.0; vocab];
    if let StepConstraint::Banned(ids) = constraint {
        for &id in ids {
            if id < vocab {
                mask[id] = crate::model::MASKED_LOGIT;
            }
        }
    }
    mask
}

/// Tape terms for one trajectory: the differentiable per-step
/// log-probabilities of the sampled tokens under the (masked, tempered)
/// sampling distribution, plus the per-step entropies. Forced steps carry no
/// decision and are skipped. Returns `None` when every step was forced.
pub fn trajectory_log_probs(
    tape: &mut Tape,
    params: &crate::model::ParamVars,
    traj: &Trajectory,
) -> Result<Option<(Var, Var)>> {
    if traj.generated.is_empty() {
        return Err(Error::InvalidArgument("trajectory has no generated tokens".into()));
    }
    let mut tokens = traj.prompt.clone();
    tokens.extend_from_slice(&traj.generated[..traj.generated.len() - 1]);
    let vocab = params.config().vocab_size;
    let out = params.forward(tape, &tokens, None, None)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (k, (&tok, c)) in traj.generated.iter().zip(&traj.constraints).enumerate() {
        if matches!(c, StepConstraint::ForcedEos) {
            continue;
        }
        rows.push(traj.prompt.len() - 1 + k);
        targets.push(tok);
        mask.extend(constraint_mask(c, vocab));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let temperature = if traj.temperature > 0.0 { traj.temperature } else { 1.0 };
    let logits = tape.select_rows(out.logits, &rows)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    let logits = tape.add_const(logits, &mask)?;
    let lp = tape.log_softmax_pick(logits, &targets)?;
    let entropy = tape.softmax_entropy_rows(logits)?;
    Ok(Some((lp, entropy)))
}

/// Which way the entropy term enters the RL objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Subtract `L_reg` from the surrogate (encourages exploration).
    #[default]
    Bonus,
    /// Add `L_reg` to the surrogate (sharpens the policy).
    Penalty,
}

/// Policy-gradient surrogate over a batch of scored trajectories with the
/// entropy term folded in. Returns the surrogate and the batch-mean `L_reg`.
pub fn policy_gradient_loss(
    tape: &mut Tape,
    params: &crate::model::ParamVars,
    trajs: &[Trajectory],
    baseline: f64,
    beta: f64,
    mode: EntropyMode,
) -> Result<(Var, f64)> {
    let mut terms = Vec::with_capacity(trajs.len());
    let mut entropies = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.iter().enumerate() {
        let reward = t
            .reward()
            .ok_or_else(|| Error::InvalidArgument(format!("trajectory {i} has no reward")))?;
        if let Some((lp, h)) = trajectory_log_probs(tape, params, t)? {
            terms.push((lp, reward - baseline));
            entropies.push(h);
        }
    }
    if terms.is_empty() {
        return Err(Error::InvalidArgument("no trajectory in the batch has a free decoding step".into()));
    }
    let surrogate = reinforce_surrogate(tape, &terms)?;
    if beta == 0.0 {
        return Ok((surrogate, 0.0));
    }
    let sign = match mode {
        EntropyMode::Bonus => -1.0,
        EntropyMode::Penalty => 1.0,
    };
    let mut loss = surrogate;
    let mut reg = 0.0;
    let per = beta / terms.len() as f64;
    for h in entropies {
        reg += per * tape.value(h).iter().sum::<f64>();
        let n = tape.value(h).len();
        let s = tape.weighted_sum(h, &vec![sign * per; n])?;
        loss = tape.add(loss, s)?;
    }
    Ok((loss, reg))
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<S: AsRef<str>>(grads: &mut [(S, &mut [f64])], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0 && max_norm.is_finite()) {
        return Err(Error::config("clip", format!("must be a finite value > 0, got {max_norm}")));
    }
    let mut sq = 0.0;
    for (name, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.as_ref().to_owned()));
        }
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}
