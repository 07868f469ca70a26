//! Evaluation metrics over continuous action sequences (`T x D` matrices).

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::types::FaceAction;

/// Ridge added to covariances fitted from fewer than `D + 1` frames.
pub const COV_RIDGE: f64 = 1e-6;
/// Eigenvalues down to this are treated as round-off and clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Mean over frames of the squared Euclidean distance between paired frames.
pub fn l2_error(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<f64> {
    check_len("frames", gt.nrows(), pred.nrows())?;
    check_len("action dims", gt.ncols(), pred.ncols())?;
    if gt.nrows() == 0 {
        return Err(Error::EmptyInput("action sequence"));
    }
    let sq: f64 = pred.iter().zip(gt.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / gt.nrows() as f64)
}

/// Mean of per-clip [`l2_error`].
pub fn mean_l2_error(preds: &[Array2<f64>], gts: &[Array2<f64>]) -> Result<f64> {
    check_len("clips", gts.len(), preds.len())?;
    if gts.is_empty() {
        return Err(Error::EmptyInput("clip list"));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += l2_error(p.view(), g.view())?;
    }
    Ok(total / gts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// Sample mean and covariance (denominator `n`) of the rows of `frames`.
pub fn fit_gaussian(frames: ArrayView2<f64>) -> Result<GaussianStats> {
    let (n, d) = frames.dim();
    if n == 0 {
        return Err(Error::EmptyInput("frames for gaussian fit"));
    }
    let mean = frames.mean_axis(Axis(0)).expect("non-empty");
    let centered = &frames - &mean;
    let mut cov = centered.t().dot(&centered) / n as f64;
    if n < d + 1 {
        for i in 0..d {
            cov[[i, i]] += COV_RIDGE;
        }
    }
    Ok(GaussianStats { mean, cov })
}

/// Pool the frames of several sequences and fit one Gaussian.
pub fn fit_pooled(seqs: &[Array2<f64>]) -> Result<GaussianStats> {
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let pooled = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::EmptyInput("pooled frames"))?;
    fit_gaussian(pooled.view())
}

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Symmetric eigendecomposition with PSD check; returns `(values, vectors)`.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut values = Vec::with_capacity(eig.eigenvalues.len());
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOLERANCE {
            return Err(Error::Numerical(format!("{what} has eigenvalue {v}, not positive semi-definite")));
        }
        values.push(v.max(0.0));
    }
    Ok((values, eig.eigenvectors))
}

/// Frechet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the cross term is computed as `tr sqrt(R S_b R)` with
/// `R = S_a^(1/2)`, which is similar to `(S_a S_b)^(1/2)` and symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    check_len("gaussian dims", d, b.mean.len())?;
    check_len("covariance size", d * d, a.cov.len())?;
    check_len("covariance size", d * d, b.cov.len())?;
    let (va, qa) = psd_eigen(to_dmatrix(&a.cov), "first covariance")?;
    let root = &qa * DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, va.iter().map(|v| v.sqrt()))) * qa.transpose();
    let inner = &root * to_dmatrix(&b.cov) * &root;
    let (vi, _) = psd_eigen(inner, "covariance product")?;
    let cross: f64 = vi.iter().map(|v| v.sqrt()).sum();
    let mean_sq: f64 = (&a.mean - &b.mean).mapv(|x| x * x).sum();
    let fd = mean_sq + a.cov.diag().sum() + b.cov.diag().sum() - 2.0 * cross;
    if fd < -PSD_TOLERANCE {
        return Err(Error::Numerical(format!("negative Frechet distance {fd}")));
    }
    Ok(fd)
}

/// FD with tiny negative round-off clipped to zero, for reporting.
pub fn frechet_distance_reported(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    frechet_distance(a, b).map(|v| v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedFd {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Mean over pairs of the FD between per-sequence Gaussian fits.
pub fn paired_fd(pairs: &[(Array2<f64>, Array2<f64>)]) -> Result<PairedFd> {
    let (mut total, mut used, mut skipped) = (0.0, 0, 0);
    for (i, (gt, pred)) in pairs.iter().enumerate() {
        let fd = fit_gaussian(gt.view())
            .and_then(|a| fit_gaussian(pred.view()).map(|b| (a, b)))
            .and_then(|(a, b)| frechet_distance_reported(&a, &b));
        match fd {
            Ok(v) => {
                total += v;
                used += 1;
            }
            Err(e) => {
                log::warn!("paired FD skips pair {i}: {e}");
                skipped += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::EmptyInput("paired FD pairs"));
    }
    Ok(PairedFd {
        value: total / used as f64,
        used,
        skipped,
    })
}

/// Mean over sequences of the mean per-dimension temporal standard deviation.
pub fn variation(seqs: &[Array2<f64>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput("sequences for variation"));
    }
    let mut total = 0.0;
    for s in seqs {
        if s.nrows() < 2 || s.ncols() == 0 {
            continue;
        }
        total += s.std_axis(Axis(0), 0.0).mean().unwrap_or(0.0);
    }
    Ok(total / seqs.len() as f64)
}

/// Mean over contexts of the mean pairwise frame-wise L2 distance between
/// distinct samples of that context.
pub fn diversity(sample_sets: &[Vec<Array2<f64>>]) -> Result<f64> {
    if sample_sets.is_empty() {
        return Err(Error::EmptyInput("sample sets for diversity"));
    }
    let mut total = 0.0;
    for (c, set) in sample_sets.iter().enumerate() {
        if set.len() < 2 {
            return Err(Error::contract(format!("context {c} has {} samples, diversity needs 2", set.len())));
        }
        let (mut sum, mut pairs) = (0.0, 0usize);
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                check_len("sample shape", set[i].len(), set[j].len())?;
                let per_frame: f64 = (&set[i] - &set[j])
                    .rows()
                    .into_iter()
                    .map(|r| r.dot(&r).sqrt())
                    .sum::<f64>()
                    / set[i].nrows().max(1) as f64;
                sum += per_frame;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / sample_sets.len() as f64)
}

/// Scalar valence readout of one face state.
pub trait AffectEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn valence(&self, action: &FaceAction) -> Result<f64>;
}

/// Fixed linear readout `w . exp` with unit-norm `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAffect {
    pub weights: Vec<f64>,
}

impl LinearAffect {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn seeded(d_exp: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..d_exp).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        Self::new(raw.into_iter().map(|x| x / norm).collect())
    }

    pub fn valence_of(&self, exp: &[f64]) -> f64 {
        self.weights.iter().zip(exp).map(|(w, x)| w * x).sum()
    }
}

impl AffectEstimator for LinearAffect {
    fn name(&self) -> &str {
        "linear"
    }

    fn valence(&self, action: &FaceAction) -> Result<f64> {
        check_len("exp", self.weights.len(), action.exp.len())?;
        Ok(self.valence_of(&action.exp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffectScore {
    /// Mean squared clip-valence error, multiplied by 100.
    pub value_x100: f64,
    pub used: usize,
    pub skipped: usize,
}

fn clip_valence(est: &dyn AffectEstimator, clip: &[FaceAction]) -> Result<f64> {
    if clip.is_empty() {
        return Err(Error::EmptyInput("clip"));
    }
    let mut total = 0.0;
    for a in clip {
        total += est.valence(a)?;
    }
    Ok(total / clip.len() as f64)
}

/// `(1/N) sum_i (mean valence of pred_i - mean valence of gt_i)^2`, reported x100.
pub fn l2_affect(preds: &[Vec<FaceAction>], gts: &[Vec<FaceAction>], est: &dyn AffectEstimator) -> Result<AffectScore> {
    check_len("clips", gts.len(), preds.len())?;
    let (mut total, mut used, mut skipped) = (0.0, 0, 0);
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        match clip_valence(est, p).and_then(|vp| clip_valence(est, g).map(|vg| vp - vg)) {
            Ok(diff) => {
                total += diff * diff;
                used += 1;
            }
            Err(e) => {
                log::warn!("affect estimator {} skips clip {i}: {e}", est.name());
                skipped += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::EmptyInput("clips for affect"));
    }
    Ok(AffectScore {
        value_x100: 100.0 * total / used as f64,
        used,
        skipped,
    })
}

/// Evaluation report in table column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub checkpoint_id: String,
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "FD")]
    pub fd: f64,
    #[serde(rename = "Variation")]
    pub variation: f64,
    #[serde(rename = "Diversity")]
    pub diversity: f64,
    #[serde(rename = "P-FD")]
    pub p_fd: f64,
    #[serde(rename = "L2Affect_x100")]
    pub l2_affect_x100: f64,
    pub n_clips: usize,
    pub skipped: usize,
}

/// Compute every metric. `samples[i][0]` is the prediction for clip `i`;
/// further samples only feed diversity, which is 0 when there are none.
pub fn evaluate(
    dataset_id: &str,
    checkpoint_id: &str,
    samples: &[Vec<Array2<f64>>],
    gts: &[Array2<f64>],
    dims: crate::types::ActionDims,
    est: &dyn AffectEstimator,
) -> Result<EvalReport> {
    check_len("clips", gts.len(), samples.len())?;
    if gts.is_empty() {
        return Err(Error::EmptyInput("evaluation clips"));
    }
    let preds: Vec<Array2<f64>> = samples
        .iter()
        .map(|s| s.first().cloned().ok_or(Error::EmptyInput("samples for clip")))
        .collect::<Result<_>>()?;
    let l2 = mean_l2_error(&preds, gts)?;
    let fd = frechet_distance_reported(&fit_pooled(gts)?, &fit_pooled(&preds)?)?;
    let pairs: Vec<_> = gts.iter().cloned().zip(preds.iter().cloned()).collect();
    let pfd = paired_fd(&pairs)?;
    let div = if samples.iter().all(|s| s.len() >= 2) { diversity(samples)? } else { 0.0 };
    let to_actions = |m: &Array2<f64>| crate::types::matrix_to_actions(m, dims);
    let pa: Vec<_> = preds.iter().map(to_actions).collect::<Result<_>>()?;
    let ga: Vec<_> = gts.iter().map(to_actions).collect::<Result<_>>()?;
    let affect = l2_affect(&pa, &ga, est)?;
    Ok(EvalReport {
        dataset_id: dataset_id.into(),
        checkpoint_id: checkpoint_id.into(),
        l2,
        fd,
        variation: variation(&preds)?,
        diversity: div,
        p_fd: pfd.value,
        l2_affect_x100: affect.value_x100,
        n_clips: gts.len(),
        skipped: pfd.skipped + affect.skipped,
    })
}
