//! Supervised stage: token cross-entropy plus a temporal smoothness penalty.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{ActionTokenSeq, BinSpec};
use crate::error::{check_len, Error, Result};
use crate::frontend::SpeakerContext;
use crate::optim::{Adam, AdamConfig};
use crate::policy::{log_softmax, PolicyParams};
use crate::types::ActionDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalLossMode {
    /// Penalize frame deltas of the soft-decoded expected actions.
    SoftDecode,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub lambda_exp: f64,
    pub lambda_pose: f64,
    pub lambda_temp: f64,
    pub temporal_loss_mode: TemporalLossMode,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lambda_exp: 1.0,
            lambda_pose: 1.0,
            lambda_temp: 0.1,
            temporal_loss_mode: TemporalLossMode::SoftDecode,
            optimizer: AdamConfig::default(),
            steps: 500,
            batch_size: 8,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_exp", self.lambda_exp),
            ("lambda_pose", self.lambda_pose),
            ("lambda_temp", self.lambda_temp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }

    fn temporal_active(&self) -> bool {
        self.temporal_loss_mode == TemporalLossMode::SoftDecode && self.lambda_temp > 0.0
    }
}

/// One teacher-forcing example.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub context: SpeakerContext,
    pub target: ActionTokenSeq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLogLine {
    pub step: usize,
    pub loss_pre: f64,
    pub loss_temp: f64,
    pub total: f64,
    pub lr: f64,
    pub wallclock: f64,
}

/// Weighted token cross-entropy and its gradient with respect to the logits.
///
/// Cross-entropy is averaged within each frame's expression and pose slot
/// groups, then summed over frames with weights `lambda / T`.
pub fn loss_pre(
    logits: ArrayView2<f64>,
    targets: &ActionTokenSeq,
    dims: ActionDims,
    lambda_exp: f64,
    lambda_pose: f64,
) -> Result<(f64, Array2<f64>)> {
    check_len("target dims per frame", dims.total(), targets.dims_per_frame)?;
    check_len("logit rows", targets.slots(), logits.nrows())?;
    let t_len = targets.frames as f64;
    let w_exp = if dims.exp > 0 { lambda_exp / (t_len * dims.exp as f64) } else { 0.0 };
    let w_pose = if dims.pose > 0 { lambda_pose / (t_len * dims.pose as f64) } else { 0.0 };
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (s, &tok) in targets.tokens.iter().enumerate() {
        let tok = tok as usize;
        if tok >= logits.ncols() {
            return Err(Error::contract(format!("target token {tok} outside {} bins", logits.ncols())));
        }
        let w = if dims.is_exp(s % dims.total()) { w_exp } else { w_pose };
        let lp = log_softmax(logits.row(s));
        loss -= w * lp[tok];
        let mut g = grad.row_mut(s);
        for (k, v) in lp.iter().enumerate() {
            g[k] = w * v.exp();
        }
        g[tok] -= w;
    }
    Ok((loss, grad))
}

/// Mean squared frame-to-frame delta of a `T x D` action matrix and its gradient.
pub fn loss_temp(actions: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let t_len = actions.nrows();
    let mut grad = Array2::zeros(actions.raw_dim());
    if t_len < 2 {
        log::warn!("temporal loss on a {t_len}-frame sequence is defined as 0");
        return (0.0, grad);
    }
    let scale = 1.0 / (t_len - 1) as f64;
    let mut loss = 0.0;
    for t in 0..t_len - 1 {
        for d in 0..actions.ncols() {
            let delta = actions[[t + 1, d]] - actions[[t, d]];
            loss += delta * delta;
            grad[[t + 1, d]] += 2.0 * scale * delta;
            grad[[t, d]] -= 2.0 * scale * delta;
        }
    }
    (scale * loss, grad)
}

/// Batch average of [`loss_temp`].
pub fn loss_temp_batch(batch: &[Array2<f64>]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|a| loss_temp(a.view()).0).sum::<f64>() / batch.len() as f64
}

/// Composite loss of one example: returns `(loss_pre, loss_temp)` and
/// accumulates `scale * d(loss_pre + lambda_temp * loss_temp)` into `grad`.
pub fn example_loss(
    params: &PolicyParams,
    spec: &BinSpec,
    ex: &SftExample,
    cfg: &SftConfig,
    grad: Option<(&mut [f64], f64)>,
) -> Result<(f64, f64)> {
    let dims = params.hyper().action_dims;
    let (logits, cache) = params.forward(&ex.context, &ex.target.tokens)?;
    let (pre, mut dlogits) = loss_pre(logits.view(), &ex.target, dims, cfg.lambda_exp, cfg.lambda_pose)?;
    let mut temp = 0.0;
    if cfg.temporal_active() {
        let (values, probs) = spec.soft_decode_slots(logits.view())?;
        let (lt, dvalues) = loss_temp(values.view());
        temp = lt;
        let d_len = dims.total();
        for s in 0..logits.nrows() {
            let (t, d) = (s / d_len, s % d_len);
            let dv = cfg.lambda_temp * dvalues[[t, d]];
            if dv == 0.0 {
                continue;
            }
            let v = values[[t, d]];
            for k in 0..logits.ncols() {
                dlogits[[s, k]] += dv * probs[[s, k]] * (spec.center(d, k) - v);
            }
        }
    }
    if let Some((g, scale)) = grad {
        dlogits *= scale;
        params.backward_into(&cache, &dlogits, g);
    }
    Ok((pre, temp))
}

fn check_dataset(params: &PolicyParams, spec: &BinSpec, data: &[SftExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput("SFT dataset"));
    }
    check_len("bin count", params.hyper().bins, spec.bin_count)?;
    check_len("bin spec dims", params.hyper().slots_per_frame(), spec.dims.len())?;
    for ex in data {
        check_len("target frames", ex.context.frames(), ex.target.frames)?;
    }
    Ok(())
}

/// Deterministic epoch-shuffled minibatch order.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Run supervised training from `init`, calling `on_step` with each log line.
pub fn train_sft(
    init: Checkpoint,
    data: &[SftExample],
    cfg: &SftConfig,
    mut on_step: impl FnMut(&SftLogLine),
) -> Result<(Checkpoint, Vec<SftLogLine>)> {
    cfg.validate()?;
    check_dataset(&init.params, &init.bin_spec, data)?;
    let mut ck = init;
    let mut opt = Adam::new(cfg.optimizer.clone(), ck.params.len())?;
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut grad = vec![0.0; ck.params.len()];
    let mut log = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        grad.fill(0.0);
        let (mut pre, mut temp) = (0.0, 0.0);
        for &i in &batch {
            let (p, t) = example_loss(&ck.params, &ck.bin_spec, &data[i], cfg, Some((&mut grad, scale)))?;
            pre += p * scale;
            temp += t * scale;
        }
        let total = pre + cfg.lambda_temp * temp;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(&ck, cfg.checkpoint_dir.as_ref(), step, format!(
                "loss_pre={pre} loss_temp={temp}"
            )));
        }
        opt.step(&mut ck.params.data, &grad);
        ck.step += 1;
        let line = SftLogLine {
            step,
            loss_pre: pre,
            loss_temp: temp,
            total,
            lr: opt.learning_rate(),
            wallclock: start.elapsed().as_secs_f64(),
        };
        on_step(&line);
        log.push(line);
        if let (Some(k), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) {
            if k > 0 && (step + 1) % k == 0 {
                ck.save(dir.join(format!("{}-step{:06}.ckpt", ck.tag, step + 1)))?;
            }
        }
    }
    ck.tag = "sft".into();
    Ok((ck, log))
}

/// Build the divergence error, saving the last good parameters if possible.
pub(crate) fn diverged(last_good: &Checkpoint, dir: Option<&PathBuf>, step: usize, detail: String) -> Error {
    let mut message = detail;
    if let Some(dir) = dir {
        let path = dir.join(format!("{}-last-good.ckpt", last_good.tag));
        match last_good.save(&path) {
            Ok(()) => message.push_str(&format!("; last good checkpoint at {}", path.display())),
            Err(e) => message.push_str(&format!("; could not save last good checkpoint: {e}")),
        }
    }
    Error::Diverged { step, message }
}

/// Teacher-forced argmax accuracy over every action slot.
pub fn next_token_accuracy(params: &PolicyParams, data: &[SftExample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in data {
        let logits = params.forward_logits(&ex.context, &ex.target.tokens)?;
        for (s, &tok) in ex.target.tokens.iter().enumerate() {
            let best = logits
                .row(s)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                .0;
            hit += usize::from(best == tok as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("accuracy dataset"));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{Frontend, ProjectorParams, Vocab};
    use crate::policy::tests::{tiny_hyper, toy_context};
    use rand::Rng;

    fn spec() -> BinSpec {
        BinSpec::from_ranges(6, ActionDims::new(2, 1), &[(-1.0, 1.0), (-2.0, 2.0), (-0.5, 0.5)]).unwrap()
    }

    fn checkpoint(seed: u64) -> Checkpoint {
        let frontend = Frontend {
            projector: ProjectorParams::identity(4),
            vocab: Vocab::from_words((0..5).map(|i| format!("w{i}")).collect()),
        };
        Checkpoint::new("init", spec(), frontend, PolicyParams::init(tiny_hyper(), seed).unwrap())
    }

    fn example(frames: usize, seed: u64) -> SftExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let tokens = (0..frames * 3).map(|_| rng.gen_range(0..6)).collect();
        SftExample {
            context: toy_context(frames, seed),
            target: ActionTokenSeq::new(frames, 3, tokens).unwrap(),
        }
    }

    fn brute_ce(logits: &Array2<f64>, t: &ActionTokenSeq, le: f64, lp: f64) -> f64 {
        let mut total = 0.0;
        for f in 0..t.frames {
            let mut ce = [0.0, 0.0];
            for d in 0..3 {
                let s = f * 3 + d;
                let z: f64 = logits.row(s).iter().map(|v| v.exp()).sum();
                let p = logits[[s, t.tokens[s] as usize]].exp() / z;
                ce[usize::from(d >= 2)] -= p.ln();
            }
            total += le * ce[0] / 2.0 + lp * ce[1];
        }
        total / t.frames as f64
    }

    #[test]
    fn loss_pre_matches_slot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_fn((12, 6), |_| rng.gen_range(-3.0..3.0));
        let t = example(4, 1).target;
        let (got, _) = loss_pre(logits.view(), &t, ActionDims::new(2, 1), 0.7, 1.3).unwrap();
        assert!((got - brute_ce(&logits, &t, 0.7, 1.3)).abs() < 1e-10);
    }

    #[test]
    fn uniform_logits_give_log_bins() {
        let logits = Array2::zeros((12, 256));
        let t = ActionTokenSeq::new(4, 3, vec![7; 12]).unwrap();
        let (got, _) = loss_pre(logits.view(), &t, ActionDims::new(2, 1), 1.0, 1.0).unwrap();
        assert!((got - 2.0 * (256f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logits_give_zero_loss() {
        let t = example(2, 0).target;
        let mut logits = Array2::from_elem((6, 6), -60.0);
        for (s, &tok) in t.tokens.iter().enumerate() {
            logits[[s, tok as usize]] = 60.0;
        }
        let (got, _) = loss_pre(logits.view(), &t, ActionDims::new(2, 1), 1.0, 1.0).unwrap();
        assert!(got.abs() < 1e-40);
    }

    #[test]
    fn loss_pre_is_shift_invariant_per_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-2.0..2.0));
        let mut shifted = logits.clone();
        shifted.row_mut(3).mapv_inplace(|v| v + 17.5);
        let t = example(2, 4).target;
        let a = loss_pre(logits.view(), &t, ActionDims::new(2, 1), 1.0, 0.5).unwrap().0;
        let b = loss_pre(shifted.view(), &t, ActionDims::new(2, 1), 1.0, 0.5).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn temporal_loss_cases() {
        assert_eq!(loss_temp(Array2::from_elem((5, 3), 0.4).view()).0, 0.0);
        let alt = ndarray::array![[0.0, 0.0, 0.2], [1.0, 0.0, 0.2], [0.0, 0.0, 0.2]];
        assert!((loss_temp(alt.view()).0 - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let scaled = &a * 2.5;
        assert!((loss_temp(scaled.view()).0 - 6.25 * loss_temp(a.view()).0).abs() < 1e-12);
        assert_eq!(loss_temp(Array2::from_elem((1, 3), 1.0).view()).0, 0.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let ck = checkpoint(5);
        let ex = example(3, 2);
        let cfg = SftConfig {
            lambda_exp: 0.8,
            lambda_pose: 1.2,
            lambda_temp: 0.5,
            ..SftConfig::default()
        };
        let f = |p: &PolicyParams| {
            let (a, b) = example_loss(p, &ck.bin_spec, &ex, &cfg, None).unwrap();
            a + cfg.lambda_temp * b
        };
        let mut grad = vec![0.0; ck.params.len()];
        example_loss(&ck.params, &ck.bin_spec, &ex, &cfg, Some((&mut grad, 1.0))).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..ck.params.len() {
            let mut q = ck.params.clone();
            q.data[i] += h;
            let up = f(&q);
            q.data[i] -= 2.0 * h;
            let num = (up - f(&q)) / (2.0 * h);
            if grad[i].abs() > 1e-9 || num.abs() > 1e-9 {
                worst = worst.max((grad[i] - num).abs() / (grad[i].abs() + num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn single_example_overfits() {
        let data = vec![example(3, 9)];
        let cfg = SftConfig {
            lambda_temp: 0.0,
            optimizer: AdamConfig::with_lr(1e-2),
            steps: 300,
            batch_size: 1,
            ..SftConfig::default()
        };
        let (_, log) = train_sft(checkpoint(1), &data, &cfg, |_| {}).unwrap();
        assert!(log.last().unwrap().total < 0.01 * log[0].total);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data: Vec<_> = (0..4).map(|i| example(2, i)).collect();
        let cfg = SftConfig {
            steps: 5,
            batch_size: 2,
            seed: 3,
            ..SftConfig::default()
        };
        let (a, la) = train_sft(checkpoint(1), &data, &cfg, |_| {}).unwrap();
        let (b, lb) = train_sft(checkpoint(1), &data, &cfg, |_| {}).unwrap();
        let strip = |l: &[SftLogLine]| l.iter().map(|x| (x.loss_pre, x.loss_temp)).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
        assert_eq!(a.params, b.params);
        assert_eq!(a.tag, "sft");
    }

    #[test]
    fn nan_aborts_and_saves_last_good() {
        let mut ck = checkpoint(1);
        ck.params.tensor_mut("head.b").unwrap()[[0, 0]] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let cfg = SftConfig {
            steps: 3,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..SftConfig::default()
        };
        let err = train_sft(ck, &[example(2, 0)], &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
        assert!(dir.path().join("init-last-good.ckpt").exists());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_sft(checkpoint(1), &[], &SftConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let mut ck = checkpoint(1);
        ck.params.tensor_mut("head.w").unwrap().fill(0.0);
        let mut b = ck.params.tensor_mut("head.b").unwrap();
        b.fill(0.0);
        b[[0, 4]] = 1.0;
        let ex = SftExample {
            context: toy_context(2, 0),
            target: ActionTokenSeq::new(2, 3, vec![4, 4, 0, 4, 1, 4]).unwrap(),
        };
        assert!((next_token_accuracy(&ck.params, &[ex]).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }
}
