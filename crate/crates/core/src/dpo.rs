//! Preference stage: direct preference optimization against a frozen reference.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::ActionTokenSeq;
use crate::error::{Error, Result};
use crate::frontend::SpeakerContext;
use crate::optim::{Adam, AdamConfig};
use crate::policy::PolicyParams;
use crate::sft::{diverged, BatchSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            optimizer: AdamConfig::default(),
            steps: 200,
            batch_size: 8,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub context: SpeakerContext,
    pub preferred: ActionTokenSeq,
    pub dispreferred: ActionTokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefLogps {
    pub preferred: f64,
    pub dispreferred: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoTerms {
    pub loss: f64,
    /// `beta` times the difference of policy/reference log-ratios.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoLogLine {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
    pub frac_margin_positive: f64,
    pub wallclock: f64,
}

/// `-log sigmoid(z)` evaluated without overflow.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss as a function of the beta-scaled margin.
pub fn dpo_loss_from_margin(margin: f64) -> f64 {
    neg_log_sigmoid(margin)
}

pub fn reference_logps(reference: &PolicyParams, ex: &DpoExample) -> Result<RefLogps> {
    Ok(RefLogps {
        preferred: reference.sequence_logprob(&ex.context, &ex.preferred)?,
        dispreferred: reference.sequence_logprob(&ex.context, &ex.dispreferred)?,
    })
}

/// DPO loss for one pair given cached reference log-probabilities. The
/// reference enters as constants, so only `policy` receives gradient.
pub fn dpo_loss_cached(
    policy: &PolicyParams,
    ex: &DpoExample,
    reference: RefLogps,
    beta: f64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<DpoTerms> {
    let lp_w = policy.sequence_logprob(&ex.context, &ex.preferred)?;
    let lp_l = policy.sequence_logprob(&ex.context, &ex.dispreferred)?;
    let margin = beta * ((lp_w - reference.preferred) - (lp_l - reference.dispreferred));
    let loss = dpo_loss_from_margin(margin);
    if let Some((g, scale)) = grad {
        // dL/dz = -sigmoid(-z).
        let coeff = beta * sigmoid(-margin) * scale;
        policy.sequence_logprob_with_grad(&ex.context, &ex.preferred, Some((&mut *g, -coeff)))?;
        policy.sequence_logprob_with_grad(&ex.context, &ex.dispreferred, Some((g, coeff)))?;
    }
    Ok(DpoTerms { loss, margin })
}

/// DPO loss for one pair, evaluating the reference on the fly.
pub fn dpo_loss(policy: &PolicyParams, reference: &PolicyParams, ex: &DpoExample, beta: f64) -> Result<DpoTerms> {
    dpo_loss_cached(policy, ex, reference_logps(reference, ex)?, beta, None)
}

/// Train a policy initialized from `sft`, with a frozen copy of `sft` as reference.
pub fn train_dpo(
    sft: Checkpoint,
    data: &[DpoExample],
    cfg: &DpoConfig,
    on_step: impl FnMut(&DpoLogLine),
) -> Result<(Checkpoint, Vec<DpoLogLine>)> {
    let reference = sft.clone();
    train_dpo_with_reference(sft, &reference, data, cfg, on_step)
}

pub fn train_dpo_with_reference(
    init: Checkpoint,
    reference: &Checkpoint,
    data: &[DpoExample],
    cfg: &DpoConfig,
    mut on_step: impl FnMut(&DpoLogLine),
) -> Result<(Checkpoint, Vec<DpoLogLine>)> {
    cfg.validate()?;
    init.ensure_compatible(reference)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("preference dataset"));
    }
    let refs = data
        .iter()
        .map(|ex| reference_logps(&reference.params, ex))
        .collect::<Result<Vec<_>>>()?;
    let mut ck = init;
    ck.tag = "dpo".into();
    let mut opt = Adam::new(cfg.optimizer.clone(), ck.params.len())?;
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut grad = vec![0.0; ck.params.len()];
    let mut log = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        grad.fill(0.0);
        let (mut loss, mut margin, mut positive) = (0.0, 0.0, 0usize);
        for &i in &batch {
            let t = dpo_loss_cached(&ck.params, &data[i], refs[i], cfg.beta, Some((&mut grad, scale)))?;
            loss += t.loss * scale;
            margin += t.margin * scale;
            positive += usize::from(t.margin > 0.0);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(&ck, cfg.checkpoint_dir.as_ref(), step, format!("loss={loss}")));
        }
        opt.step(&mut ck.params.data, &grad);
        ck.step += 1;
        let line = DpoLogLine {
            step,
            loss,
            mean_margin: margin,
            frac_margin_positive: positive as f64 / batch.len() as f64,
            wallclock: start.elapsed().as_secs_f64(),
        };
        on_step(&line);
        log.push(line);
        if let (Some(k), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) {
            if k > 0 && (step + 1) % k == 0 {
                ck.save(dir.join(format!("dpo-step{:06}.ckpt", step + 1)))?;
            }
        }
    }
    Ok((ck, log))
}

/// Mean loss, mean margin and fraction of positive margins over a dataset.
pub fn evaluate_pairs(policy: &PolicyParams, reference: &PolicyParams, data: &[DpoExample], beta: f64) -> Result<(f64, f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("preference dataset"));
    }
    let n = data.len() as f64;
    let (mut loss, mut margin, mut pos) = (0.0, 0.0, 0.0);
    for ex in data {
        let t = dpo_loss(policy, reference, ex, beta)?;
        loss += t.loss / n;
        margin += t.margin / n;
        pos += f64::from(u8::from(t.margin > 0.0)) / n;
    }
    Ok((loss, margin, pos))
}
