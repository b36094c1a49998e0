use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, tensor_learning_rates, AdamState};
use super::{Stage, TrainConfig, TrainLog, TrainRecord};
use crate::error::{Error, Result};
use crate::model::{generate, GenerateOptions, ModelParams, ParamVars};
use crate::objectives::{clip_gradients, policy_gradient_loss, trajectory_reward, Baseline, Trajectory};
use crate::tensor::Tape;

/// Scores a finished trajectory.
pub type RewardFn<'a> = dyn Fn(&Trajectory) -> Result<f64> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSummary {
    pub iterations_run: usize,
    pub skipped: usize,
    /// Mean reward of the trajectories sampled at each iteration, before
    /// that iteration's update.
    pub mean_rewards: Vec<f64>,
    pub baseline: Baseline,
}

/// Arithmetic mean, exact when every value is the same.
fn mean(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return xs[0];
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Policy-gradient fine-tuning.
///
/// Each iteration samples `rollouts` trajectories (prompts are used in
/// rotation), scores them with `reward` (or the coherence reward when
/// `None`), forms the surrogate with advantages against the baseline as it
/// stood before the iteration, folds in the entropy term, then clips and
/// applies Adam. The baseline is updated with every reward afterwards; it
/// starts from the first batch's mean reward. Iterations whose trajectories
/// are all degenerate are skipped.
pub fn finetune_rl(
    params: &mut ModelParams,
    prompts: &[Vec<usize>],
    cfg: &TrainConfig,
    reward: Option<&RewardFn<'_>>,
    log: &mut TrainLog,
) -> Result<FinetuneSummary> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Data("fine-tuning needs at least one prompt".into()));
    }
    let start = Instant::now();
    let lrs = tensor_learning_rates(params.config(), cfg.learning_rate, cfg.layer_decay)?;
    let mut adam = AdamState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut baseline = Baseline::new(cfg.rho)?;
    let opts = GenerateOptions {
        temperature: cfg.temperature,
        max_tokens: cfg.max_new_tokens,
        template: cfg.template.clone(),
    };
    let default_reward = |t: &Trajectory| trajectory_reward(t, cfg.mu, cfg.tau_c);
    let reward: &RewardFn<'_> = reward.unwrap_or(&default_reward);

    let mut summary = FinetuneSummary {
        iterations_run: 0,
        skipped: 0,
        mean_rewards: Vec::new(),
        baseline,
    };
    let mut next_prompt = 0;
    for iteration in 0..cfg.rl_iterations {
        let mut batch = Vec::with_capacity(cfg.rollouts);
        for _ in 0..cfg.rollouts {
            let prompt = &prompts[next_prompt % prompts.len()];
            next_prompt += 1;
            let mut t = generate(params, prompt, &opts, &mut rng)?;
            let r = reward(&t)?;
            t.set_reward(r)?;
            batch.push(t);
        }
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward().expect("scored")).collect();
        let mean_reward = mean(&rewards);
        summary.mean_rewards.push(mean_reward);
        summary.iterations_run = iteration + 1;

        if batch.iter().all(|t| t.degenerate) {
            ::log::warn!("iteration {iteration}: every trajectory is degenerate, skipping update");
            summary.skipped += 1;
            continue;
        }
        if baseline.updates == 0 {
            baseline.value = mean_reward;
        }
        let b = baseline.value;

        params.zero_grad();
        let mut tape = Tape::new();
        let pv = ParamVars::register(params, &mut tape, true);
        let (loss, reg) = policy_gradient_loss(&mut tape, &pv, &batch, b, cfg.beta, cfg.entropy_mode)?;
        let surrogate = tape.scalar(loss);
        tape.backward(loss)?;
        pv.accumulate_grads(&tape, params, 1.0)?;
        let grad_norm = clip_gradients(&mut params.named_grads_mut(), cfg.clip)?;
        adam_step(params, &mut adam, &lrs)?;
        for r in rewards {
            baseline.update(r)?;
        }
        log.push(TrainRecord {
            stage: Stage::Finetune,
            epoch: iteration,
            step: log.next_step(),
            ce: 0.0,
            sa: 0.0,
            total: surrogate,
            reg,
            mean_reward: Some(mean_reward),
            baseline: Some(b),
            grad_norm,
            val_loss: None,
            wall_time: start.elapsed().as_secs_f64(),
        })?;
        ::log::debug!("rl iteration {iteration}: mean reward {mean_reward:.4}, baseline {b:.4}");
    }
    summary.baseline = baseline;
    Ok(summary)
}
