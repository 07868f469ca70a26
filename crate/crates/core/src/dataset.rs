//! Clip records, split files and the synthetic speaker/listener world.
//!
//! A record holds the speaker stream (precomputed features or a reference
//! to a frame file), transcript windows, and the listener track. Synthetic
//! records also carry `reference`, the unbiased ideal listener track.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::frontend::{extract_features, DualFeature, FeatureExtractor, Frame};
use crate::metrics::LinearAffect;
use crate::preference::{read_jsonl, write_jsonl};
use crate::types::{ActionDims, FaceAction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptWindow {
    pub start_frame: usize,
    pub end_frame: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTrack {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<DualFeature>>,
    /// Frame file path, relative to the split file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_ref: Option<String>,
    pub transcript_windows: Vec<TranscriptWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerTrack {
    pub exp: Vec<Vec<f64>>,
    pub pose: Vec<Vec<f64>>,
}

impl ListenerTrack {
    pub fn from_actions(actions: &[FaceAction]) -> Self {
        Self {
            exp: actions.iter().map(|a| a.exp.clone()).collect(),
            pose: actions.iter().map(|a| a.pose.clone()).collect(),
        }
    }

    pub fn actions(&self) -> Result<Vec<FaceAction>> {
        check_len("listener pose frames", self.exp.len(), self.pose.len())?;
        Ok(self
            .exp
            .iter()
            .zip(&self.pose)
            .map(|(e, p)| FaceAction::new(e.clone(), p.clone()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub fps: f64,
    #[serde(rename = "T")]
    pub frames: usize,
    pub speaker: SpeakerTrack,
    pub listener: ListenerTrack,
    pub shape: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ListenerTrack>,
}

impl ClipRecord {
    pub fn validate(&self, dims: ActionDims) -> Result<()> {
        let actions = self.listener.actions()?;
        check_len("listener frames", self.frames, actions.len())?;
        for a in &actions {
            a.validate(dims)?;
        }
        if let Some(r) = &self.reference {
            check_len("reference frames", self.frames, r.actions()?.len())?;
        }
        for w in &self.speaker.transcript_windows {
            if w.start_frame > w.end_frame || w.end_frame > self.frames {
                return Err(Error::contract(format!(
                    "clip {}: window {}..{} outside {} frames",
                    self.clip_id, w.start_frame, w.end_frame, self.frames
                )));
            }
        }
        Ok(())
    }

    pub fn actions(&self) -> Result<Vec<FaceAction>> {
        self.listener.actions()
    }

    /// Target track for rating: the ideal reference when present, else the listener.
    pub fn target_actions(&self) -> Result<Vec<FaceAction>> {
        self.reference.as_ref().unwrap_or(&self.listener).actions()
    }

    pub fn window_texts(&self) -> Vec<&str> {
        self.speaker.transcript_windows.iter().map(|w| w.text.as_str()).collect()
    }
}

/// A record with its speaker features resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedClip {
    pub record: ClipRecord,
    pub features: Vec<DualFeature>,
}

pub fn write_split(path: impl AsRef<Path>, records: &[ClipRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_split(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    read_jsonl(path)
}

pub fn write_frames(path: impl AsRef<Path>, frames: &[Frame]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_vec(frames).map_err(|e| Error::format("frames", e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display().to_string(), e))
}

/// Read a split and resolve every clip's speaker features.
pub fn load_split(path: impl AsRef<Path>, extractor: &dyn FeatureExtractor, dims: ActionDims) -> Result<Vec<LoadedClip>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = read_split(path)?;
    records
        .into_iter()
        .map(|record| {
            record.validate(dims)?;
            let features = resolve_features(&record, &base, extractor)?;
            Ok(LoadedClip { record, features })
        })
        .collect()
}

pub fn resolve_features(record: &ClipRecord, base: &Path, extractor: &dyn FeatureExtractor) -> Result<Vec<DualFeature>> {
    let features = match (&record.speaker.features, &record.speaker.frames_ref) {
        (Some(f), _) => f.clone(),
        (None, Some(r)) => read_frames(base.join(r))?
            .iter()
            .map(|f| extract_features(f, extractor))
            .collect::<Result<_>>()?,
        (None, None) => {
            return Err(Error::contract(format!("clip {} has neither features nor frames", record.clip_id)));
        }
    };
    check_len("speaker frames", record.frames, features.len())?;
    for f in &features {
        f.validate(extractor.feature_dim())?;
    }
    Ok(features)
}

/// Valences of the synthetic speaker states; the first two are negative.
pub const STATE_VALENCE: [f64; 6] = [-1.0, -0.6, 0.0, 0.2, 0.6, 1.0];
/// State whose response replaces negative-state responses in biased clips.
pub const SUPPRESSED_STATE: usize = 3;
const STATE_WORDS: [[&str; 2]; 6] = [
    ["awful", "terrible"],
    ["sad", "tired"],
    ["okay", "fine"],
    ["nice", "good"],
    ["great", "happy"],
    ["amazing", "wonderful"],
];
const FILLERS: [&str; 6] = ["i", "feel", "so", "today", "really", "and"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_clips: usize,
    pub pool_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    pub fps: f64,
    pub dims: ActionDims,
    pub d_shape: usize,
    pub frame_size: usize,
    pub lag: usize,
    /// Probability the speaker state persists from one frame to the next.
    pub stay_prob: f64,
    /// Share of negative states when the state changes.
    pub negative_share: f64,
    /// Probability a clip's negative-state responses are suppressed.
    pub bias_prob: f64,
    pub window: usize,
    pub pixel_noise: f64,
    pub affect_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_clips: 400,
            pool_clips: 200,
            test_clips: 200,
            frames: 8,
            fps: 25.0,
            dims: ActionDims::new(4, 3),
            d_shape: 10,
            frame_size: 16,
            lag: 2,
            stay_prob: 0.75,
            negative_share: 0.5,
            bias_prob: 0.7,
            window: 4,
            pixel_noise: 0.05,
            affect_seed: 7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames <= self.lag || self.frames == 0 {
            return Err(Error::Config(format!("frames {} must exceed lag {}", self.frames, self.lag)));
        }
        if self.dims.exp < 2 {
            return Err(Error::Config("synthetic world needs at least 2 expression dims".into()));
        }
        for (name, p) in [
            ("stay_prob", self.stay_prob),
            ("negative_share", self.negative_share),
            ("bias_prob", self.bias_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        if self.window == 0 || self.frame_size < 4 {
            return Err(Error::Config("window must be positive and frames at least 4x4".into()));
        }
        Ok(())
    }

    pub fn affect(&self) -> LinearAffect {
        LinearAffect::seeded(self.dims.exp, self.affect_seed)
    }
}

/// Per-state ideal listener responses.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub responses: Vec<FaceAction>,
    pub affect: LinearAffect,
}

impl SynthWorld {
    /// Response `r_s` has valence exactly `STATE_VALENCE[s]` under the affect
    /// readout, plus a state-specific component orthogonal to it.
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let affect = cfg.affect();
        let w = &affect.weights;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.affect_seed ^ 0x5eed);
        let responses = STATE_VALENCE
            .iter()
            .map(|&v| {
                let mut orth: Vec<f64> = (0..cfg.dims.exp).map(|_| rng.sample(StandardNormal)).collect();
                let along: f64 = orth.iter().zip(w).map(|(a, b)| a * b).sum();
                orth.iter_mut().zip(w).for_each(|(o, wi)| *o -= along * wi);
                let norm = orth.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let exp = orth.iter().zip(w).map(|(o, wi)| v * wi + 0.5 * o / norm).collect();
                let pose = (0..cfg.dims.pose).map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal)).collect();
                FaceAction::new(exp, pose)
            })
            .collect();
        Ok(Self { responses, affect })
    }

    pub fn neutral(&self) -> FaceAction {
        FaceAction::zeros(self.responses[0].dims())
    }

    pub fn is_negative(state: usize) -> bool {
        STATE_VALENCE[state] < 0.0
    }
}

/// Generated splits plus the frame files they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<ClipRecord>,
    pub pool: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
    pub frames: BTreeMap<String, Vec<Frame>>,
    pub states: BTreeMap<String, Vec<usize>>,
}

fn sample_state(rng: &mut ChaCha8Rng, negative_share: f64) -> usize {
    if rng.gen_bool(negative_share) {
        rng.gen_range(0..2)
    } else {
        rng.gen_range(2..STATE_VALENCE.len())
    }
}

fn speaker_frame(state: usize, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Frame {
    let angle = state as f64 / STATE_VALENCE.len() as f64 * std::f64::consts::TAU;
    let half = size as f64 / 2.0;
    let (cy, cx) = (half + 0.3 * size as f64 * angle.sin(), half + 0.3 * size as f64 * angle.cos());
    let sigma = size as f64 / 8.0;
    let pixels = (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            let d2 = (r - cy).powi(2) + (c - cx).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp() + noise * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Frame::new(size, size, pixels).expect("frame dimensions match")
}

fn window_text(states: &[usize], rng: &mut ChaCha8Rng) -> String {
    let s = states[rng.gen_range(0..states.len())];
    let word = STATE_WORDS[s][rng.gen_range(0..2)];
    let a = FILLERS[rng.gen_range(0..FILLERS.len())];
    let b = FILLERS[rng.gen_range(0..FILLERS.len())];
    format!("{a} {word} {b}.")
}

fn synth_clip(cfg: &SynthConfig, world: &SynthWorld, clip_id: String, rng: &mut ChaCha8Rng) -> (ClipRecord, Vec<Frame>, Vec<usize>) {
    let t_len = cfg.frames;
    let mut states = Vec::with_capacity(t_len);
    states.push(sample_state(rng, cfg.negative_share));
    for _ in 1..t_len {
        let prev = *states.last().expect("non-empty");
        states.push(if rng.gen_bool(cfg.stay_prob) { prev } else { sample_state(rng, cfg.negative_share) });
    }
    let biased = rng.gen_bool(cfg.bias_prob);
    let frames: Vec<Frame> = states
        .iter()
        .map(|&s| speaker_frame(s, cfg.frame_size, cfg.pixel_noise, rng))
        .collect();
    let mut ideal = Vec::with_capacity(t_len);
    let mut recorded = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t < cfg.lag {
            ideal.push(world.neutral());
            recorded.push(world.neutral());
            continue;
        }
        let s = states[t - cfg.lag];
        ideal.push(world.responses[s].clone());
        let shown = if biased && SynthWorld::is_negative(s) { SUPPRESSED_STATE } else { s };
        recorded.push(world.responses[shown].clone());
    }
    let windows = (0..t_len)
        .step_by(cfg.window)
        .map(|start| {
            let end = (start + cfg.window).min(t_len);
            TranscriptWindow {
                start_frame: start,
                end_frame: end,
                text: window_text(&states[start..end], rng),
            }
        })
        .collect();
    let record = ClipRecord {
        clip_id: clip_id.clone(),
        fps: cfg.fps,
        frames: t_len,
        speaker: SpeakerTrack {
            features: None,
            frames_ref: Some(format!("frames/{clip_id}.json")),
            transcript_windows: windows,
        },
        listener: ListenerTrack::from_actions(&recorded),
        shape: vec![0.0; cfg.d_shape],
        reference: Some(ListenerTrack::from_actions(&ideal)),
    };
    (record, frames, states)
}

/// Generate train, pool and test splits.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthDataset> {
    let world = SynthWorld::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SynthDataset {
        train: Vec::new(),
        pool: Vec::new(),
        test: Vec::new(),
        frames: BTreeMap::new(),
        states: BTreeMap::new(),
    };
    for (split, n) in [("train", cfg.train_clips), ("pool", cfg.pool_clips), ("test", cfg.test_clips)] {
        for i in 0..n {
            let id = format!("{split}-{i:05}");
            let (record, frames, states) = synth_clip(cfg, &world, id.clone(), &mut rng);
            out.frames.insert(id.clone(), frames);
            out.states.insert(id, states);
            match split {
                "train" => out.train.push(record),
                "pool" => out.pool.push(record),
                _ => out.test.push(record),
            }
        }
    }
    Ok(out)
}

pub fn split_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join("train.jsonl"), dir.join("pool.jsonl"), dir.join("test.jsonl")]
}

/// Write `train.jsonl`, `pool.jsonl`, `test.jsonl` and `frames/` under `dir`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    let [train, pool, test] = split_paths(dir);
    write_split(train, &data.train)?;
    write_split(pool, &data.pool)?;
    write_split(test, &data.test)?;
    for (id, frames) in &data.frames {
        write_frames(dir.join("frames").join(format!("{id}.json")), frames)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::SyntheticExtractor;

    fn small() -> SynthConfig {
        SynthConfig {
            train_clips: 6,
            pool_clips: 3,
            test_clips: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn responses_carry_state_valence() {
        let cfg = small();
        let world = SynthWorld::new(&cfg).unwrap();
        for (r, v) in world.responses.iter().zip(STATE_VALENCE) {
            assert!((world.affect.valence_of(&r.exp) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn listener_lags_speaker_and_bias_only_hits_negative_states() {
        let cfg = SynthConfig {
            bias_prob: 1.0,
            ..small()
        };
        let world = SynthWorld::new(&cfg).unwrap();
        let data = synthesize(&cfg).unwrap();
        for rec in &data.train {
            let states = &data.states[&rec.clip_id];
            let listener = rec.actions().unwrap();
            let ideal = rec.reference.as_ref().unwrap().actions().unwrap();
            for t in 0..cfg.frames {
                if t < cfg.lag {
                    assert_eq!(listener[t], world.neutral());
                    continue;
                }
                let s = states[t - cfg.lag];
                assert_eq!(ideal[t], world.responses[s]);
                let want = if SynthWorld::is_negative(s) { SUPPRESSED_STATE } else { s };
                assert_eq!(listener[t], world.responses[want]);
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(synthesize(&small()).unwrap(), synthesize(&small()).unwrap());
        let other = synthesize(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.train, synthesize(&small()).unwrap().train);
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let cfg = small();
        let data = synthesize(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let ex = SyntheticExtractor::new(8, 0);
        let [train, _, test] = split_paths(dir.path());
        let loaded = load_split(&train, &ex, cfg.dims).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded[0].record, data.train[0]);
        assert_eq!(loaded[0].features.len(), cfg.frames);
        let direct: Vec<_> = data.frames["train-00000"].iter().map(|f| extract_features(f, &ex).unwrap()).collect();
        assert_eq!(loaded[0].features, direct);
        assert_eq!(load_split(&test, &ex, cfg.dims).unwrap().len(), 2);
    }

    #[test]
    fn missing_speaker_stream_is_rejected() {
        let mut rec = synthesize(&small()).unwrap().train.remove(0);
        rec.speaker.frames_ref = None;
        let ex = SyntheticExtractor::new(8, 0);
        assert!(resolve_features(&rec, Path::new("."), &ex).is_err());
    }

    #[test]
    fn record_json_uses_documented_fields() {
        let rec = synthesize(&small()).unwrap().train.remove(0);
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        for key in ["clip_id", "fps", "T", "speaker", "listener", "shape", "reference"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["speaker"]["transcript_windows"].is_array());
    }
}
