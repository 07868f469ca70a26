//! Candidate groups, ratings, pair selection and the preference dataset.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codec::ActionTokenSeq;
use crate::error::{check_len, Error, Result};
use crate::face::{export_playback, FaceBasis, PlaybackMode, ShapeCoeffs};
use crate::frontend::SpeakerContext;
use crate::metrics::AffectEstimator;
use crate::policy::SamplingConfig;
use crate::types::FaceAction;

pub const DEFAULT_CANDIDATES: usize = 4;
pub const GT_CANDIDATE_ID: &str = "gt";
pub const RATING_MIN: u8 = 1;
pub const RATING_MAX: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Sampled,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub tokens: ActionTokenSeq,
    pub source: CandidateSource,
    pub playback_ref: Option<String>,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatus {
    Open,
    Rated,
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub group_id: String,
    pub context_ref: String,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub ratings: BTreeMap<String, Vec<RatingRecord>>,
    pub status: GroupStatus,
}

impl CandidateGroup {
    pub fn validate(&self) -> Result<()> {
        let gt = self.candidates.iter().filter(|c| c.source == CandidateSource::GroundTruth).count();
        if gt != 1 {
            return Err(Error::contract(format!("group {} has {gt} ground-truth candidates", self.group_id)));
        }
        let mut ids: Vec<_> = self.candidates.iter().map(|c| &c.candidate_id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.candidates.len() {
            return Err(Error::contract(format!("group {} repeats a candidate id", self.group_id)));
        }
        Ok(())
    }

    pub fn valid_candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.valid)
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.candidate_id == id)
    }

    pub fn is_usable(&self) -> bool {
        self.valid_candidates().count() >= 2
    }

    /// Aggregate score of every valid candidate that has ratings.
    pub fn scores(&self, w: &RatingWeights) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for c in self.valid_candidates() {
            let ratings = self.ratings.get(&c.candidate_id).map(Vec::as_slice).unwrap_or(&[]);
            out.insert(c.candidate_id.clone(), aggregate_score(ratings, w)?);
        }
        Ok(out)
    }

    pub fn add_rating(&mut self, r: RatingRecord) {
        self.ratings.entry(r.candidate_id.clone()).or_default().push(r);
    }

    pub fn rater_count(&self) -> usize {
        let mut raters: Vec<&str> = self.ratings.values().flatten().map(|r| r.rater_id.as_str()).collect();
        raters.sort_unstable();
        raters.dedup();
        raters.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub group_id: String,
    pub candidate_id: String,
    pub rater_id: String,
    pub empathy: u8,
    pub appropriateness: u8,
    pub engagement: u8,
    pub naturalness: u8,
    pub timestamp: u64,
}

impl RatingRecord {
    pub fn axes(&self) -> [u8; 4] {
        [self.empathy, self.appropriateness, self.engagement, self.naturalness]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["empathy", "appropriateness", "engagement", "naturalness"];
        for (name, v) in names.iter().zip(self.axes()) {
            if !(RATING_MIN..=RATING_MAX).contains(&v) {
                return Err(Error::contract(format!("{name} rating {v} outside {RATING_MIN}..={RATING_MAX}")));
            }
        }
        Ok(())
    }
}

/// Axis weights; they must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct RatingWeights {
    empathy: f64,
    appropriateness: f64,
    engagement: f64,
    naturalness: f64,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    empathy: f64,
    appropriateness: f64,
    engagement: f64,
    naturalness: f64,
}

impl TryFrom<RawWeights> for RatingWeights {
    type Error = Error;

    fn try_from(r: RawWeights) -> Result<Self> {
        Self::new(r.empathy, r.appropriateness, r.engagement, r.naturalness)
    }
}

impl From<RatingWeights> for RawWeights {
    fn from(w: RatingWeights) -> Self {
        Self {
            empathy: w.empathy,
            appropriateness: w.appropriateness,
            engagement: w.engagement,
            naturalness: w.naturalness,
        }
    }
}

impl RatingWeights {
    pub fn new(empathy: f64, appropriateness: f64, engagement: f64, naturalness: f64) -> Result<Self> {
        let all = [empathy, appropriateness, engagement, naturalness];
        if all.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config(format!("rating weights {all:?} must lie in [0, 1]")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("rating weights sum to {sum}, expected 1")));
        }
        Ok(Self {
            empathy,
            appropriateness,
            engagement,
            naturalness,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.empathy, self.appropriateness, self.engagement, self.naturalness]
    }

    /// Weighted score of one rater's four axes.
    pub fn score(&self, axes: [f64; 4]) -> f64 {
        self.as_array().iter().zip(axes).map(|(a, x)| a * x).sum()
    }
}

impl Default for RatingWeights {
    fn default() -> Self {
        Self::new(0.25, 0.25, 0.25, 0.25).expect("uniform weights are valid")
    }
}

/// Mean over raters of the weighted axis sum.
pub fn aggregate_score(ratings: &[RatingRecord], w: &RatingWeights) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::EmptyInput("ratings"));
    }
    let total: f64 = ratings
        .iter()
        .map(|r| w.score(r.axes().map(f64::from)))
        .sum();
    Ok(total / ratings.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairSelection {
    Pair {
        preferred: String,
        dispreferred: String,
        margin: f64,
    },
    Skip,
}

/// Highest and lowest scoring candidates; ties go to the lexically lower id.
pub fn select_pair(scores: &BTreeMap<String, f64>) -> PairSelection {
    // BTreeMap iterates ids in ascending order, so strict comparisons keep
    // the first (lowest) id on ties.
    let mut best: Option<(&String, f64)> = None;
    let mut worst: Option<(&String, f64)> = None;
    for (id, &s) in scores {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((id, s));
        }
        if worst.map_or(true, |(_, b)| s < b) {
            worst = Some((id, s));
        }
    }
    match (best, worst) {
        (Some((b, bs)), Some((w, ws))) if bs > ws => PairSelection::Pair {
            preferred: b.clone(),
            dispreferred: w.clone(),
            margin: bs - ws,
        },
        _ => PairSelection::Skip,
    }
}

fn hash_seed(parts: &str) -> u64 {
    let d = Sha256::digest(parts.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Per-candidate sampling seed derived from the base seed and group id.
pub fn candidate_seed(base: u64, group_id: &str, index: usize) -> u64 {
    hash_seed(&format!("{base}:{group_id}:{index}"))
}

/// Optional rendering of candidates to playback files.
pub struct RenderTarget<'a> {
    pub basis: &'a FaceBasis,
    pub shape: &'a ShapeCoeffs,
    pub fps: f64,
    pub dir: &'a Path,
    pub mode: PlaybackMode,
}

/// Sample `n` candidates plus the ground truth for one context.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    policy: &Checkpoint,
    group_id: &str,
    context_ref: &str,
    context: &SpeakerContext,
    gt: &ActionTokenSeq,
    n: usize,
    cfg: &SamplingConfig,
    render: Option<&RenderTarget>,
) -> Result<CandidateGroup> {
    check_len("ground-truth frames", context.frames(), gt.frames)?;
    let mut candidates = Vec::with_capacity(n + 1);
    for i in 0..n {
        let sc = SamplingConfig {
            seed: candidate_seed(cfg.seed, group_id, i),
            ..cfg.clone()
        };
        let tokens = policy.params.sample_actions(context, gt.frames, &sc)?;
        candidates.push(Candidate {
            candidate_id: format!("c{}", i + 1),
            tokens,
            source: CandidateSource::Sampled,
            playback_ref: None,
            valid: true,
        });
    }
    candidates.push(Candidate {
        candidate_id: GT_CANDIDATE_ID.into(),
        tokens: gt.clone(),
        source: CandidateSource::GroundTruth,
        playback_ref: None,
        valid: true,
    });
    if let Some(target) = render {
        for c in candidates.iter_mut() {
            match render_candidate(policy, group_id, c, target) {
                Ok(r) => c.playback_ref = Some(r),
                Err(e) => {
                    log::warn!("group {group_id}: candidate {} failed to render: {e}", c.candidate_id);
                    c.valid = false;
                }
            }
        }
    }
    let group = CandidateGroup {
        group_id: group_id.into(),
        context_ref: context_ref.into(),
        candidates,
        ratings: BTreeMap::new(),
        status: GroupStatus::Open,
    };
    group.validate()?;
    if !group.is_usable() {
        return Err(Error::contract(format!("group {group_id} has fewer than 2 valid candidates")));
    }
    Ok(group)
}

fn render_candidate(policy: &Checkpoint, group_id: &str, c: &Candidate, t: &RenderTarget) -> Result<String> {
    let actions = policy.bin_spec.decode_sequence(&c.tokens)?;
    let seq = t.basis.render_sequence(t.shape, &actions, t.fps)?;
    let name = format!("{group_id}_{}.fpm", c.candidate_id);
    export_playback(&seq, t.dir.join(&name), t.mode)?;
    Ok(name)
}

/// Versioned thresholds of the synthetic rater.
pub mod oracle_thresholds {
    pub const VERSION: u32 = 1;
    /// Upper bounds on valence error for scores 5, 4, 3, 2.
    pub const VALENCE: [f64; 4] = [0.05, 0.15, 0.3, 0.5];
    /// Upper bounds on excess jerk for scores 5, 4, 3, 2.
    pub const JERK: [f64; 4] = [0.05, 0.2, 0.5, 1.0];
    /// Lower bounds on the variation ratio for scores 5, 4, 3, 2.
    pub const VARIATION_RATIO: [f64; 4] = [0.8, 0.6, 0.4, 0.2];
}

fn score_below(x: f64, bounds: [f64; 4]) -> u8 {
    bounds.iter().position(|&b| x <= b).map_or(1, |i| 5 - i as u8)
}

fn score_above(x: f64, bounds: [f64; 4]) -> u8 {
    bounds.iter().position(|&b| x >= b).map_or(1, |i| 5 - i as u8)
}

/// Mean squared norm of the second difference.
pub fn jerk(seq: &[FaceAction]) -> f64 {
    if seq.len() < 3 {
        return 0.0;
    }
    let flat: Vec<Vec<f64>> = seq.iter().map(FaceAction::to_flat).collect();
    let total: f64 = flat
        .windows(3)
        .map(|w| (0..w[0].len()).map(|d| (w[2][d] - 2.0 * w[1][d] + w[0][d]).powi(2)).sum::<f64>())
        .sum();
    total / (seq.len() - 2) as f64
}

fn mean_temporal_std(seq: &[FaceAction]) -> f64 {
    if seq.len() < 2 {
        return 0.0;
    }
    let flat: Vec<Vec<f64>> = seq.iter().map(FaceAction::to_flat).collect();
    let d = flat[0].len();
    if d == 0 {
        return 0.0;
    }
    let n = flat.len() as f64;
    (0..d)
        .map(|k| {
            let mean = flat.iter().map(|f| f[k]).sum::<f64>() / n;
            (flat.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum::<f64>()
        / d as f64
}

/// Deterministic stand-in rater comparing a candidate with a target track.
pub struct OracleRater<'a> {
    pub affect: &'a dyn AffectEstimator,
    pub rater_id: String,
}

impl<'a> OracleRater<'a> {
    pub fn new(affect: &'a dyn AffectEstimator) -> Self {
        Self {
            affect,
            rater_id: format!("oracle-v{}", oracle_thresholds::VERSION),
        }
    }

    pub fn rate(&self, group_id: &str, candidate_id: &str, candidate: &[FaceAction], target: &[FaceAction]) -> Result<RatingRecord> {
        use oracle_thresholds::*;
        check_len("oracle frames", target.len(), candidate.len())?;
        if target.is_empty() {
            return Err(Error::EmptyInput("oracle sequence"));
        }
        let n = target.len() as f64;
        let mut clip_diff = 0.0;
        let mut frame_diff = 0.0;
        for (c, t) in candidate.iter().zip(target) {
            let d = self.affect.valence(c)? - self.affect.valence(t)?;
            clip_diff += d / n;
            frame_diff += d.abs() / n;
        }
        let excess_jerk = (jerk(candidate) - jerk(target)).max(0.0);
        let ref_var = mean_temporal_std(target);
        let ratio = if ref_var < 1e-12 { 1.0 } else { mean_temporal_std(candidate) / ref_var };
        Ok(RatingRecord {
            group_id: group_id.into(),
            candidate_id: candidate_id.into(),
            rater_id: self.rater_id.clone(),
            empathy: score_below(clip_diff.abs(), VALENCE),
            appropriateness: score_below(frame_diff, VALENCE),
            engagement: score_above(ratio, VARIATION_RATIO),
            naturalness: score_below(excess_jerk, JERK),
            timestamp: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub group_id: String,
    pub preferred_id: String,
    pub dispreferred_id: String,
    pub raters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub group_id: String,
    pub context_ref: String,
    pub preferred_tokens: ActionTokenSeq,
    pub dispreferred_tokens: ActionTokenSeq,
    pub score_margin: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefSummary {
    pub pairs: usize,
    pub skipped: usize,
    pub gt_preferred_fraction: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PairMode {
    Ranked,
    /// Scores are shuffled across candidates before selection.
    RandomPrefer { seed: u64 },
}

/// One pair per non-skipped group, ordered by group id.
pub fn build_pref_dataset(groups: &[CandidateGroup], w: &RatingWeights, mode: PairMode) -> Result<(Vec<PreferencePair>, PrefSummary)> {
    let mut sorted: Vec<&CandidateGroup> = groups.iter().collect();
    sorted.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for g in sorted {
        let mut scores = g.scores(w)?;
        if let PairMode::RandomPrefer { seed } = mode {
            let mut values: Vec<f64> = scores.values().copied().collect();
            values.shuffle(&mut ChaCha8Rng::seed_from_u64(hash_seed(&format!("{seed}:{}", g.group_id))));
            for (v, s) in scores.values_mut().zip(values) {
                *v = s;
            }
        }
        match select_pair(&scores) {
            PairSelection::Skip => skipped += 1,
            PairSelection::Pair {
                preferred,
                dispreferred,
                margin,
            } => {
                let get = |id: &str| g.candidate(id).expect("scored candidate exists").tokens.clone();
                pairs.push(PreferencePair {
                    group_id: g.group_id.clone(),
                    context_ref: g.context_ref.clone(),
                    preferred_tokens: get(&preferred),
                    dispreferred_tokens: get(&dispreferred),
                    score_margin: margin,
                    provenance: Provenance {
                        group_id: g.group_id.clone(),
                        preferred_id: preferred,
                        dispreferred_id: dispreferred,
                        raters: g.rater_count(),
                    },
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("preference pairs"));
    }
    let n = pairs.len() as f64;
    let summary = PrefSummary {
        pairs: pairs.len(),
        skipped,
        gt_preferred_fraction: pairs.iter().filter(|p| p.provenance.preferred_id == GT_CANDIDATE_ID).count() as f64 / n,
        mean_margin: pairs.iter().map(|p| p.score_margin).sum::<f64>() / n,
    };
    Ok((pairs, summary))
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::format("jsonl", e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e))?);
    }
    Ok(out)
}

/// Append records to a rating log in one write.
pub fn append_ratings(path: impl AsRef<Path>, records: &[RatingRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("rating serializes"));
        buf.push('\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

pub fn read_rating_log(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    if !path.as_ref().exists() {
        return Ok(Vec::new());
    }
    read_jsonl(path)
}

/// Attach logged ratings to their groups; unknown groups or candidates are errors.
pub fn attach_ratings(groups: &mut [CandidateGroup], log: &[RatingRecord]) -> Result<()> {
    let index: BTreeMap<String, usize> = groups.iter().enumerate().map(|(i, g)| (g.group_id.clone(), i)).collect();
    for r in log {
        let gi = *index
            .get(&r.group_id)
            .ok_or_else(|| Error::contract(format!("rating for unknown group {}", r.group_id)))?;
        if groups[gi].candidate(&r.candidate_id).is_none() {
            return Err(Error::contract(format!("rating for unknown candidate {}/{}", r.group_id, r.candidate_id)));
        }
        groups[gi].add_rating(r.clone());
    }
    Ok(())
}

pub fn pref_dataset_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("prefs.jsonl"), dir.join("prefs_summary.json"))
}
