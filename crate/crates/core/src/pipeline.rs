//! Stage functions tying the modules into the closed feedback loop:
//! fit bins, supervised training, candidate sampling, rating, pair
//! building, preference training, evaluation and the ablation protocol.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{fit_bins, BinSpec, FitOptions};
use crate::config::PipelineConfig;
use crate::dataset::{self, LoadedClip};
use crate::dpo::{train_dpo, DpoExample, DpoLogLine};
use crate::error::{Error, Result};
use crate::face::{FaceBasis, FaceModelConfig, PlaybackMode, ShapeCoeffs};
use crate::frontend::{Frontend, ProjectorParams, SpeakerContext, SyntheticExtractor, Vocab};
use crate::metrics::{evaluate, AffectEstimator, EvalReport, LinearAffect};
use crate::policy::{PolicyHyper, PolicyParams, SamplingConfig};
use crate::preference::{
    append_ratings, attach_ratings, build_pref_dataset, candidate_seed, generate_candidates, read_jsonl,
    read_rating_log, write_jsonl, CandidateGroup, GroupStatus, OracleRater, PairMode, PrefSummary, PreferencePair,
    RatingRecord, RatingWeights, RenderTarget,
};
use crate::sft::{train_sft, SftExample, SftLogLine};

pub fn extractor(cfg: &PipelineConfig) -> SyntheticExtractor {
    SyntheticExtractor::new(cfg.frontend.feature_dim, cfg.frontend.extractor_seed)
}

pub fn affect(cfg: &PipelineConfig) -> LinearAffect {
    cfg.synth.affect()
}

pub fn load_clips(cfg: &PipelineConfig, path: &Path) -> Result<Vec<LoadedClip>> {
    dataset::load_split(path, &extractor(cfg), cfg.synth.dims)
}

/// Load the three splits under `data_dir`.
pub fn load_splits(cfg: &PipelineConfig) -> Result<[Vec<LoadedClip>; 3]> {
    let [train, pool, test] = dataset::split_paths(&cfg.paths.data_dir);
    Ok([load_clips(cfg, &train)?, load_clips(cfg, &pool)?, load_clips(cfg, &test)?])
}

pub fn fit_bin_spec(cfg: &PipelineConfig, train: &[LoadedClip]) -> Result<BinSpec> {
    let seqs = train.iter().map(|c| c.record.actions()).collect::<Result<Vec<_>>>()?;
    let opts = FitOptions {
        bin_count: cfg.codec.bins,
        trunc_frac: cfg.codec.trunc,
        min_frames: cfg.codec.min_frames,
    };
    let (spec, degenerate) = fit_bins(&seqs, &opts)?;
    for d in degenerate {
        log::warn!("degenerate action dimension {d:?} was widened");
    }
    Ok(spec)
}

pub fn build_frontend(cfg: &PipelineConfig, train: &[LoadedClip]) -> Frontend {
    let f = &cfg.frontend;
    Frontend {
        projector: ProjectorParams::seeded(2 * f.feature_dim, f.projector_hidden, f.vision_dim, f.projector_seed),
        vocab: Vocab::build(train.iter().flat_map(|c| c.record.window_texts())),
    }
}

pub fn policy_hyper(cfg: &PipelineConfig, spec: &BinSpec, frontend: &Frontend, max_frames: usize) -> Result<PolicyHyper> {
    Ok(PolicyHyper {
        d_model: cfg.model.d_model,
        n_layers: cfg.model.n_layers,
        n_heads: cfg.model.n_heads,
        mlp_ratio: cfg.model.mlp_ratio,
        vision_dim: frontend.projector.output_dim(),
        text_vocab: frontend.vocab.len(),
        bins: spec.bin_count,
        action_dims: spec.action_dims()?,
        max_frames,
        max_text: cfg.frontend.max_text,
    })
}

/// Fresh policy checkpoint for the given tokenization.
pub fn init_checkpoint(cfg: &PipelineConfig, spec: BinSpec, frontend: Frontend, max_frames: usize) -> Result<Checkpoint> {
    let hyper = policy_hyper(cfg, &spec, &frontend, max_frames)?;
    let params = PolicyParams::init(hyper, cfg.model.seed)?;
    Ok(Checkpoint::new("init", spec, frontend, params))
}

/// Speaker context of a clip; text beyond the model's budget keeps the tail.
pub fn make_context(ck: &Checkpoint, clip: &LoadedClip) -> Result<SpeakerContext> {
    let mut ctx = ck.frontend.context(&clip.features, &clip.record.window_texts())?;
    let max_text = ck.params.hyper().max_text;
    if ctx.text.len() > max_text {
        log::warn!("clip {}: truncating {} text tokens to {max_text}", clip.record.clip_id, ctx.text.len());
        let text = ctx.text.split_off(ctx.text.len() - max_text);
        ctx = crate::frontend::assemble_context(ctx.vision, text)?;
    }
    Ok(ctx)
}

pub fn sft_examples(ck: &Checkpoint, clips: &[LoadedClip]) -> Result<Vec<SftExample>> {
    clips
        .iter()
        .map(|c| {
            Ok(SftExample {
                context: make_context(ck, c)?,
                target: ck.bin_spec.encode_sequence(&c.record.actions()?)?,
            })
        })
        .collect()
}

/// Fit bins, build the frontend and train the supervised policy.
pub fn run_sft(cfg: &PipelineConfig, train: &[LoadedClip], on_step: impl FnMut(&SftLogLine)) -> Result<(Checkpoint, Vec<SftLogLine>)> {
    let spec = fit_bin_spec(cfg, train)?;
    run_sft_with_bins(cfg, train, spec, on_step)
}

pub fn run_sft_with_bins(cfg: &PipelineConfig, train: &[LoadedClip], spec: BinSpec, on_step: impl FnMut(&SftLogLine)) -> Result<(Checkpoint, Vec<SftLogLine>)> {
    let frontend = build_frontend(cfg, train);
    let max_frames = train.iter().map(|c| c.record.frames).max().ok_or(Error::EmptyInput("train split"))?;
    let init = init_checkpoint(cfg, spec, frontend, max_frames)?;
    let data = sft_examples(&init, train)?;
    train_sft(init, &data, &cfg.sft, on_step)
}

/// Face model used to render playback files.
pub fn face_basis(cfg: &PipelineConfig) -> Result<FaceBasis> {
    FaceBasis::synthetic(&FaceModelConfig {
        d_shape: cfg.synth.d_shape,
        dims: cfg.synth.dims,
        ..FaceModelConfig::default()
    })
}

fn sampling(cfg: &PipelineConfig) -> SamplingConfig {
    SamplingConfig {
        temperature: cfg.candidates.temperature,
        top_k: cfg.candidates.top_k,
        seed: cfg.candidates.seed,
        greedy: false,
    }
}

/// Candidate groups for every pool clip, one group per clip.
pub fn sample_candidate_groups(cfg: &PipelineConfig, ck: &Checkpoint, pool: &[LoadedClip], playback_dir: Option<&Path>) -> Result<Vec<CandidateGroup>> {
    let basis = playback_dir.map(|_| face_basis(cfg)).transpose()?;
    if let Some(dir) = playback_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sc = sampling(cfg);
    pool.iter()
        .enumerate()
        .map(|(i, clip)| {
            let ctx = make_context(ck, clip)?;
            let gt = ck.bin_spec.encode_sequence(&clip.record.actions()?)?;
            let shape = ShapeCoeffs(clip.record.shape.clone());
            let target = playback_dir.zip(basis.as_ref()).map(|(dir, basis)| RenderTarget {
                basis,
                shape: &shape,
                fps: clip.record.fps,
                dir,
                mode: PlaybackMode::Binary,
            });
            generate_candidates(
                ck,
                &format!("g{i:05}"),
                &clip.record.clip_id,
                &ctx,
                &gt,
                cfg.candidates.n,
                &sc,
                target.as_ref(),
            )
        })
        .collect()
}

fn clip_index(clips: &[LoadedClip]) -> BTreeMap<&str, &LoadedClip> {
    clips.iter().map(|c| (c.record.clip_id.as_str(), c)).collect()
}

/// Rate every valid candidate with the synthetic rater.
pub fn oracle_rate_groups(spec: &BinSpec, groups: &[CandidateGroup], clips: &[LoadedClip], affect: &dyn AffectEstimator) -> Result<Vec<RatingRecord>> {
    let index = clip_index(clips);
    let oracle = OracleRater::new(affect);
    let mut out = Vec::new();
    for g in groups {
        let clip = index
            .get(g.context_ref.as_str())
            .ok_or_else(|| Error::contract(format!("group {} references unknown clip {}", g.group_id, g.context_ref)))?;
        let target = clip.record.target_actions()?;
        for c in g.valid_candidates() {
            let actions = spec.decode_sequence(&c.tokens)?;
            out.push(oracle.rate(&g.group_id, &c.candidate_id, &actions, &target)?);
        }
    }
    Ok(out)
}

/// Attach ratings and mark groups rated when every valid candidate has
/// at least `min_raters` distinct raters.
pub fn apply_ratings(groups: &mut [CandidateGroup], log: &[RatingRecord], min_raters: usize) -> Result<()> {
    for g in groups.iter_mut() {
        g.ratings.clear();
    }
    attach_ratings(groups, log)?;
    for g in groups.iter_mut() {
        let rated = g.valid_candidates().all(|c| {
            let mut raters: Vec<&str> = g
                .ratings
                .get(&c.candidate_id)
                .map(|rs| rs.iter().map(|r| r.rater_id.as_str()).collect())
                .unwrap_or_default();
            raters.sort_unstable();
            raters.dedup();
            raters.len() >= min_raters
        });
        if g.status != GroupStatus::Paired {
            g.status = if rated { GroupStatus::Rated } else { GroupStatus::Open };
        }
    }
    Ok(())
}

pub fn build_prefs(groups: &[CandidateGroup], weights: &RatingWeights, mode: PairMode) -> Result<(Vec<PreferencePair>, PrefSummary)> {
    let rated: Vec<CandidateGroup> = groups.iter().filter(|g| g.status != GroupStatus::Open).cloned().collect();
    build_pref_dataset(&rated, weights, mode)
}

pub fn dpo_examples(ck: &Checkpoint, pairs: &[PreferencePair], clips: &[LoadedClip]) -> Result<Vec<DpoExample>> {
    let index = clip_index(clips);
    pairs
        .iter()
        .map(|p| {
            let clip = index
                .get(p.context_ref.as_str())
                .ok_or_else(|| Error::contract(format!("pair {} references unknown clip {}", p.group_id, p.context_ref)))?;
            Ok(DpoExample {
                context: make_context(ck, clip)?,
                preferred: p.preferred_tokens.clone(),
                dispreferred: p.dispreferred_tokens.clone(),
            })
        })
        .collect()
}

fn eval_seed(base: u64, clip_id: &str, k: usize) -> u64 {
    candidate_seed(base, clip_id, k)
}

/// `samples` decoded sequences per clip, seeds shared across checkpoints.
pub fn sample_decoded(ck: &Checkpoint, clips: &[LoadedClip], samples: usize, seed: u64, temperature: f64) -> Result<Vec<Vec<Array2<f64>>>> {
    clips
        .iter()
        .map(|clip| {
            let ctx = make_context(ck, clip)?;
            (0..samples)
                .map(|k| {
                    let sc = SamplingConfig {
                        temperature,
                        seed: eval_seed(seed, &clip.record.clip_id, k),
                        ..SamplingConfig::default()
                    };
                    let tokens = ck.params.sample_actions(&ctx, clip.record.frames, &sc)?;
                    ck.bin_spec.decode_matrix(&tokens)
                })
                .collect()
        })
        .collect()
}

pub fn evaluate_checkpoint(cfg: &PipelineConfig, ck: &Checkpoint, clips: &[LoadedClip], dataset_id: &str, checkpoint_id: &str) -> Result<EvalReport> {
    let samples = sample_decoded(ck, clips, cfg.eval.samples, cfg.eval.seed, cfg.eval.temperature)?;
    let gts = clips
        .iter()
        .map(|c| crate::types::actions_to_matrix(&c.record.actions()?))
        .collect::<Result<Vec<_>>>()?;
    evaluate(dataset_id, checkpoint_id, &samples, &gts, ck.bin_spec.action_dims()?, &affect(cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `wins / (wins + losses)`; 0.5 when every comparison ties.
    pub rate: f64,
}

/// Oracle preference of `a` over `b`: one paired-seed sample per clip from
/// each policy, scored against the clip's target track.
pub fn win_rate(cfg: &PipelineConfig, a: &Checkpoint, b: &Checkpoint, clips: &[LoadedClip]) -> Result<WinRate> {
    let est = affect(cfg);
    let oracle = OracleRater::new(&est);
    let sa = sample_decoded(a, clips, 1, cfg.eval.seed, cfg.eval.temperature)?;
    let sb = sample_decoded(b, clips, 1, cfg.eval.seed, cfg.eval.temperature)?;
    let dims = a.bin_spec.action_dims()?;
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for ((clip, xa), xb) in clips.iter().zip(&sa).zip(&sb) {
        let target = clip.record.target_actions()?;
        let score = |m: &Array2<f64>| -> Result<f64> {
            let acts = crate::types::matrix_to_actions(m, dims)?;
            let r = oracle.rate("eval", "x", &acts, &target)?;
            Ok(cfg.weights.score(r.axes().map(f64::from)))
        };
        let (va, vb) = (score(&xa[0])?, score(&xb[0])?);
        if va > vb {
            wins += 1;
        } else if va < vb {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let decided = wins + losses;
    Ok(WinRate {
        wins,
        losses,
        ties,
        rate: if decided == 0 { 0.5 } else { wins as f64 / decided as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
    pub win_rate_vs_sft: WinRate,
}

pub const ABLATION_VARIANTS: [&str; 4] = ["Full", "Random-Prefer", "SFT-Preferred", "SFT-Only"];

/// Everything the ablation needs besides the configuration.
pub struct AblationInputs<'a> {
    pub sft: &'a Checkpoint,
    pub rated_groups: &'a [CandidateGroup],
    pub pool: &'a [LoadedClip],
    pub test: &'a [LoadedClip],
}

/// Train and evaluate the four protocol variants.
pub fn ablate(cfg: &PipelineConfig, inputs: &AblationInputs, mut progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let (ranked, _) = build_prefs(inputs.rated_groups, &cfg.weights, PairMode::Ranked)?;
    let (random, _) = build_prefs(inputs.rated_groups, &cfg.weights, PairMode::RandomPrefer { seed: cfg.dpo.seed })?;

    progress("Full");
    let full = train_dpo(inputs.sft.clone(), &dpo_examples(inputs.sft, &ranked, inputs.pool)?, &cfg.dpo, |_| {})?.0;
    progress("Random-Prefer");
    let rand_ck = train_dpo(inputs.sft.clone(), &dpo_examples(inputs.sft, &random, inputs.pool)?, &cfg.dpo, |_| {})?.0;
    progress("SFT-Preferred");
    let preferred = sft_on_preferred(cfg, inputs.sft, &ranked, inputs.pool)?;

    let mut rows = Vec::new();
    for (name, ck) in [
        ("Full", &full),
        ("Random-Prefer", &rand_ck),
        ("SFT-Preferred", &preferred),
        ("SFT-Only", inputs.sft),
    ] {
        progress(&format!("evaluate {name}"));
        rows.push(AblationRow {
            variant: name.into(),
            report: evaluate_checkpoint(cfg, ck, inputs.test, "test", name)?,
            win_rate_vs_sft: win_rate(cfg, ck, inputs.sft, inputs.test)?,
        });
    }
    Ok(rows)
}

/// Continue supervised training on the preferred trajectories only.
pub fn sft_on_preferred(cfg: &PipelineConfig, sft: &Checkpoint, pairs: &[PreferencePair], pool: &[LoadedClip]) -> Result<Checkpoint> {
    let index = clip_index(pool);
    let data = pairs
        .iter()
        .map(|p| {
            let clip = index
                .get(p.context_ref.as_str())
                .ok_or_else(|| Error::contract(format!("unknown clip {}", p.context_ref)))?;
            Ok(SftExample {
                context: make_context(sft, clip)?,
                target: p.preferred_tokens.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sc = crate::sft::SftConfig {
        steps: cfg.dpo.steps,
        batch_size: cfg.dpo.batch_size,
        seed: cfg.dpo.seed,
        optimizer: cfg.dpo.optimizer.clone(),
        checkpoint_every: None,
        checkpoint_dir: None,
        ..cfg.sft.clone()
    };
    let (mut ck, _) = train_sft(sft.clone(), &data, &sc, |_| {})?;
    ck.tag = "sft-preferred".into();
    Ok(ck)
}

/// File names inside the run directory.
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn bins(&self) -> PathBuf {
        self.dir.join("bins.json")
    }
    pub fn sft(&self) -> PathBuf {
        self.dir.join("sft.ckpt")
    }
    pub fn sft_log(&self) -> PathBuf {
        self.dir.join("sft_log.jsonl")
    }
    pub fn groups(&self) -> PathBuf {
        self.dir.join("groups.jsonl")
    }
    pub fn playback(&self) -> PathBuf {
        self.dir.join("playback")
    }
    pub fn prefs(&self) -> PathBuf {
        self.dir.join("prefs.jsonl")
    }
    pub fn prefs_summary(&self) -> PathBuf {
        self.dir.join("prefs_summary.json")
    }
    pub fn dpo(&self) -> PathBuf {
        self.dir.join("dpo.ckpt")
    }
    pub fn dpo_log(&self) -> PathBuf {
        self.dir.join("dpo_log.jsonl")
    }
    pub fn eval(&self, name: &str) -> PathBuf {
        self.dir.join(format!("eval_{name}.json"))
    }
    pub fn ablation(&self) -> PathBuf {
        self.dir.join("ablation.json")
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
}

/// Paths of everything a full run writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub sft: PathBuf,
    pub dpo: PathBuf,
    pub prefs: PathBuf,
    pub rating_log: PathBuf,
    pub eval_sft: PathBuf,
    pub eval_dpo: PathBuf,
    pub pref_summary: PrefSummary,
}

/// Full loop from the dataset on disk to evaluated checkpoints, with the
/// synthetic rater standing in for annotators.
pub fn run_pipeline(cfg: &PipelineConfig, mut progress: impl FnMut(&str)) -> Result<RunOutputs> {
    let layout = RunLayout::new(&cfg.paths.run_dir);
    fs::create_dir_all(&layout.dir).map_err(|e| Error::io(&layout.dir, e))?;
    let [train, pool, test] = load_splits(cfg)?;

    progress("train-sft");
    let mut sft_log = Vec::new();
    let (sft, _) = run_sft(cfg, &train, |l| sft_log.push(l.clone()))?;
    fs::write(layout.bins(), sft.bin_spec.to_json()).map_err(|e| Error::io(layout.bins(), e))?;
    sft.save(layout.sft())?;
    write_jsonl(layout.sft_log(), &sft_log)?;

    progress("sample-candidates");
    let playback = cfg.candidates.render.then(|| layout.playback());
    let mut groups = sample_candidate_groups(cfg, &sft, &pool, playback.as_deref())?;
    write_jsonl(layout.groups(), &groups)?;

    progress("oracle-rate");
    let log_path = cfg.rating_log_path();
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    append_ratings(&log_path, &oracle_rate_groups(&sft.bin_spec, &groups, &pool, &affect(cfg))?)?;
    apply_ratings(&mut groups, &read_rating_log(&log_path)?, cfg.annotation.min_raters)?;

    progress("build-prefs");
    let (pairs, summary) = build_prefs(&groups, &cfg.weights, PairMode::Ranked)?;
    write_jsonl(layout.prefs(), &pairs)?;
    write_json(layout.prefs_summary(), &summary)?;

    progress("train-dpo");
    let mut dpo_log: Vec<DpoLogLine> = Vec::new();
    let data = dpo_examples(&sft, &read_jsonl::<PreferencePair>(layout.prefs())?, &pool)?;
    let (dpo, _) = train_dpo(sft.clone(), &data, &cfg.dpo, |l| dpo_log.push(l.clone()))?;
    dpo.save(layout.dpo())?;
    write_jsonl(layout.dpo_log(), &dpo_log)?;

    progress("evaluate");
    write_json(layout.eval("sft"), &evaluate_checkpoint(cfg, &sft, &test, "test", "sft")?)?;
    write_json(layout.eval("dpo"), &evaluate_checkpoint(cfg, &dpo, &test, "test", "dpo")?)?;

    Ok(RunOutputs {
        sft: layout.sft(),
        dpo: layout.dpo(),
        prefs: layout.prefs(),
        rating_log: log_path,
        eval_sft: layout.eval("sft"),
        eval_dpo: layout.eval("dpo"),
        pref_summary: summary,
    })
}
