//! Speaker-side encoding: per-frame dual-stream features, the vision
//! projector, a word-level text vocabulary, and context assembly.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};

/// Grayscale frame, row-major, intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_len("pixels", height * width, pixels.len())?;
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

/// Two feature streams per frame: fine motion detail and global semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualFeature {
    pub motion: Vec<f64>,
    pub semantic: Vec<f64>,
}

impl DualFeature {
    pub fn validate(&self, d_v: usize) -> Result<()> {
        check_len("motion_stream", d_v, self.motion.len())?;
        check_len("semantic_stream", d_v, self.semantic.len())?;
        if self.motion.iter().chain(&self.semantic).any(|x| !x.is_finite()) {
            return Err(Error::contract("non-finite feature value"));
        }
        Ok(())
    }

    /// `[motion; semantic]`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.motion.clone();
        v.extend_from_slice(&self.semantic);
        v
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn extract(&self, frame: &Frame) -> Result<DualFeature>;
}

/// Extract features, attributing failures to the extractor.
pub fn extract_features(frame: &Frame, extractor: &dyn FeatureExtractor) -> Result<DualFeature> {
    let f = extractor.extract(frame).map_err(|e| match e {
        e @ Error::Extractor { .. } => e,
        other => Error::Extractor {
            name: extractor.name().to_string(),
            message: other.to_string(),
        },
    })?;
    f.validate(extractor.feature_dim())?;
    Ok(f)
}

/// Seeded random projections of a coarse grid summary of the frame.
///
/// The semantic stream projects block means; the motion stream projects
/// horizontal and vertical differences between neighbouring blocks. Both
/// carry a seeded offset, which is what an all-zero frame returns.
#[derive(Debug, Clone)]
pub struct SyntheticExtractor {
    d_v: usize,
    grid: usize,
    semantic_w: Array2<f64>,
    semantic_b: Array1<f64>,
    motion_w: Array2<f64>,
    motion_b: Array1<f64>,
}

impl SyntheticExtractor {
    pub const NAME: &'static str = "synthetic-grid";

    pub fn new(d_v: usize, seed: u64) -> Self {
        let grid = 4;
        let n_mean = grid * grid;
        let n_diff = 2 * grid * (grid - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let semantic_w = gauss(d_v, n_mean, 1.0 / (n_mean as f64).sqrt());
        let motion_w = gauss(d_v, n_diff, 2.0 / (n_diff as f64).sqrt());
        let semantic_b = gauss(d_v, 1, 0.1).column(0).to_owned();
        let motion_b = gauss(d_v, 1, 0.1).column(0).to_owned();
        Self {
            d_v,
            grid,
            semantic_w,
            semantic_b,
            motion_w,
            motion_b,
        }
    }

    fn block_means(&self, frame: &Frame) -> Result<Array1<f64>> {
        let g = self.grid;
        if frame.height < g || frame.width < g {
            return Err(Error::Extractor {
                name: Self::NAME.into(),
                message: format!("frame {}x{} smaller than {g}x{g} grid", frame.height, frame.width),
            });
        }
        let mut sums = Array1::zeros(g * g);
        let mut counts = vec![0usize; g * g];
        for r in 0..frame.height {
            for c in 0..frame.width {
                let cell = (r * g / frame.height) * g + c * g / frame.width;
                sums[cell] += frame.at(r, c);
                counts[cell] += 1;
            }
        }
        for (s, n) in sums.iter_mut().zip(counts) {
            *s /= n as f64;
        }
        Ok(sums)
    }
}

impl FeatureExtractor for SyntheticExtractor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn feature_dim(&self) -> usize {
        self.d_v
    }

    fn extract(&self, frame: &Frame) -> Result<DualFeature> {
        let g = self.grid;
        let means = self.block_means(frame)?;
        let mut diffs = Vec::with_capacity(2 * g * (g - 1));
        for r in 0..g {
            for c in 0..g - 1 {
                diffs.push(means[r * g + c + 1] - means[r * g + c]);
            }
        }
        for r in 0..g - 1 {
            for c in 0..g {
                diffs.push(means[(r + 1) * g + c] - means[r * g + c]);
            }
        }
        let motion = self.motion_w.dot(&Array1::from(diffs)) + &self.motion_b;
        let semantic = self.semantic_w.dot(&means) + &self.semantic_b;
        Ok(DualFeature {
            motion: motion.to_vec(),
            semantic: semantic.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// MLP mapping concatenated dual features into the policy's input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub layers: Vec<DenseLayer>,
}

/// Gradients of a scalar loss through [`ProjectorParams::forward_cached`].
#[derive(Debug, Clone)]
pub struct ProjectorGrads {
    pub input: Array1<f64>,
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ProjectorParams {
    /// Two-layer GELU MLP with seeded Gaussian weights.
    pub fn seeded(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |i: usize, o: usize, act| DenseLayer {
            weight: Array2::from_shape_fn((o, i), |_| {
                rng.sample::<f64, _>(StandardNormal) / (i as f64).sqrt()
            }),
            bias: Array1::zeros(o),
            activation: act,
        };
        Self {
            layers: vec![
                layer(d_in, hidden, Activation::Gelu),
                layer(hidden, d_out, Activation::Identity),
            ],
        }
    }

    /// Single linear identity layer.
    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![DenseLayer {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn project(&self, f: &DualFeature) -> Result<Array1<f64>> {
        Ok(self.forward_cached(&Array1::from(f.concat()))?.0)
    }

    /// Output plus per-layer `(input, pre-activation)` pairs.
    pub fn forward_cached(&self, x: &Array1<f64>) -> Result<(Array1<f64>, Vec<(Array1<f64>, Array1<f64>)>)> {
        check_len("projector input", self.input_dim(), x.len())?;
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            check_len("projector layer input", l.weight.ncols(), h.len())?;
            let pre = l.weight.dot(&h) + &l.bias;
            let out = match l.activation {
                Activation::Identity => pre.clone(),
                Activation::Gelu => pre.mapv(gelu),
            };
            cache.push((h, pre));
            h = out;
        }
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &[(Array1<f64>, Array1<f64>)], d_out: &Array1<f64>) -> ProjectorGrads {
        let mut grad = d_out.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, (input, pre)) in self.layers.iter().zip(cache).rev() {
            if l.activation == Activation::Gelu {
                grad = grad * pre.mapv(gelu_grad);
            }
            let dw = outer(&grad, input);
            let db = grad.clone();
            grad = l.weight.t().dot(&grad);
            layers.push((dw, db));
        }
        layers.reverse();
        ProjectorGrads {
            input: grad,
            layers,
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Normalized word-level vocabulary. Id 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

pub const UNK_ID: u32 = 0;
const UNK: &str = "<unk>";
const CLOSING: &[char] = &['.', ',', '!', '?', ';', ':', ')', ']', '}'];
const OPENING: &[char] = &['(', '[', '{'];

/// Lowercase, split on whitespace, then split each chunk into word runs
/// (alphanumerics and apostrophes) and single punctuation characters.
pub fn word_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() || ch == '\'' {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Lowercase and collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in texts {
            set.extend(word_pieces(t));
        }
        let words = std::iter::once(UNK.to_string()).chain(set).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        word_pieces(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn tokenize_windows<S: AsRef<str>>(&self, windows: &[S]) -> Vec<u32> {
        windows.iter().flat_map(|w| self.tokenize(w.as_ref())).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        for &id in ids {
            let w = self.words.get(id as usize).map_or(UNK, String::as_str);
            let single = |set: &[char]| w.chars().count() == 1 && w.starts_with(set);
            if !glue_next && !single(CLOSING) {
                out.push(' ');
            }
            out.push_str(w);
            glue_next = single(OPENING);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutTag {
    Vision(usize),
    Separator,
    Text(usize),
}

/// Ordered multimodal prompt: projected frames, a separator, then text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerContext {
    /// `T x d_model`.
    pub vision: Array2<f64>,
    pub text: Vec<u32>,
    pub layout: Vec<LayoutTag>,
}

pub fn assemble_context(vision: Array2<f64>, text: Vec<u32>) -> Result<SpeakerContext> {
    if vision.nrows() == 0 {
        return Err(Error::EmptyInput("vision embeddings"));
    }
    if vision.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("non-finite vision embedding"));
    }
    let layout = (0..vision.nrows())
        .map(LayoutTag::Vision)
        .chain(std::iter::once(LayoutTag::Separator))
        .chain((0..text.len()).map(LayoutTag::Text))
        .collect();
    Ok(SpeakerContext {
        vision,
        text,
        layout,
    })
}

impl SpeakerContext {
    pub fn frames(&self) -> usize {
        self.vision.nrows()
    }

    /// Canonical byte serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let (r, c) = self.vision.dim();
        b.extend_from_slice(&(r as u64).to_le_bytes());
        b.extend_from_slice(&(c as u64).to_le_bytes());
        for x in self.vision.iter() {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&(self.text.len() as u64).to_le_bytes());
        for t in &self.text {
            b.extend_from_slice(&t.to_le_bytes());
        }
        for tag in &self.layout {
            let (kind, i) = match *tag {
                LayoutTag::Vision(i) => (0u8, i),
                LayoutTag::Separator => (1, 0),
                LayoutTag::Text(i) => (2, i),
            };
            b.push(kind);
            b.extend_from_slice(&(i as u64).to_le_bytes());
        }
        b
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Frontend bundle used to turn clips into policy contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontend {
    pub projector: ProjectorParams,
    pub vocab: Vocab,
}

impl Frontend {
    pub fn context(&self, features: &[DualFeature], windows: &[&str]) -> Result<SpeakerContext> {
        let d = self.projector.output_dim();
        let mut vision = Array2::zeros((features.len(), d));
        for (t, f) in features.iter().enumerate() {
            vision.row_mut(t).assign(&self.projector.project(f)?);
        }
        assemble_context(vision, self.vocab.tokenize_windows(windows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_frame(h: usize, w: usize) -> Frame {
        Frame::new(h, w, (0..h * w).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap()
    }

    #[test]
    fn extractor_is_deterministic() {
        let ex = SyntheticExtractor::new(32, 0);
        let f = ramp_frame(16, 16);
        assert_eq!(
            extract_features(&f, &ex).unwrap(),
            extract_features(&f, &SyntheticExtractor::new(32, 0)).unwrap()
        );
    }

    #[test]
    fn zero_frame_matches_golden_baseline() {
        let ex = SyntheticExtractor::new(32, 0);
        let got = extract_features(&Frame::zeros(16, 16), &ex).unwrap();
        let golden: DualFeature =
            serde_json::from_str(include_str!("../tests/golden/zero_frame_features.json")).unwrap();
        assert_eq!(got, golden);
    }

    #[test]
    fn local_change_moves_motion_stream() {
        let ex = SyntheticExtractor::new(32, 0);
        let a = ramp_frame(16, 16);
        let mut b = a.clone();
        for r in 0..4 {
            for c in 0..4 {
                b.pixels[r * 16 + c] += 0.5;
            }
        }
        let fa = extract_features(&a, &ex).unwrap();
        let fb = extract_features(&b, &ex).unwrap();
        let dist: f64 = fa.motion.iter().zip(&fb.motion).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn tiny_frame_error_names_extractor() {
        let ex = SyntheticExtractor::new(8, 0);
        let err = extract_features(&Frame::zeros(2, 2), &ex).unwrap_err();
        assert!(err.to_string().contains(SyntheticExtractor::NAME));
    }

    #[test]
    fn identity_projector_concatenates() {
        let f = DualFeature {
            motion: vec![1.0, -2.0],
            semantic: vec![0.5, 3.0],
        };
        let out = ProjectorParams::identity(4).project(&f).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let p = ProjectorParams::seeded(8, 16, 12, 3);
        let f = DualFeature {
            motion: vec![0.0; 4],
            semantic: vec![0.0; 4],
        };
        assert!(p.project(&f).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_layer_matches_hand_matmul() {
        let mut p = ProjectorParams::seeded(6, 5, 4, 11);
        p.layers.truncate(1);
        p.layers[0].activation = Activation::Identity;
        p.layers[0].bias = Array1::from(vec![0.1, -0.2, 0.3, 0.05, 0.7]);
        let f = DualFeature {
            motion: vec![0.3, -1.1, 2.0],
            semantic: vec![0.7, 0.0, -0.4],
        };
        let x = f.concat();
        let out = p.project(&f).unwrap();
        let w = &p.layers[0].weight;
        for i in 0..5 {
            let mut acc = p.layers[0].bias[i];
            for j in 0..6 {
                acc += w[[i, j]] * x[j];
            }
            assert!((out[i] - acc).abs() < 1e-10);
        }
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let p = ProjectorParams::seeded(6, 7, 5, 2);
        let x = Array1::from(vec![0.3, -0.8, 1.2, 0.1, -0.5, 0.9]);
        let target = Array1::from(vec![0.2, -0.1, 0.4, 0.0, 0.3]);
        let loss = |p: &ProjectorParams, x: &Array1<f64>| -> f64 {
            let y = p.forward_cached(x).unwrap().0;
            (&y - &target).mapv(|v| v * v).sum() * 0.5
        };
        let (y, cache) = p.forward_cached(&x).unwrap();
        let g = p.backward(&cache, &(&y - &target));
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let num = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!(rel(g.input[i], num) < 1e-4, "input {i}");
        }
        for l in 0..p.layers.len() {
            for (i, j) in [(0, 0), (1, 2), (3, 4)] {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.layers[l].weight[[i, j]] += h;
                pm.layers[l].weight[[i, j]] -= h;
                let num = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!(rel(g.layers[l].0[[i, j]], num) < 1e-4, "layer {l} w[{i},{j}]");
            }
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.layers[l].bias[1] += h;
            pm.layers[l].bias[1] -= h;
            let num = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!(rel(g.layers[l].1[1], num) < 1e-4, "layer {l} bias");
        }
    }

    #[test]
    fn tokenizer_basics() {
        let v = Vocab::build(["Hello there, friend."]);
        assert!(v.tokenize("").is_empty());
        let ids = v.tokenize("hello hello");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
        assert_eq!(v.tokenize("zebra"), vec![UNK_ID]);
    }

    #[test]
    fn tokenizer_round_trips_normalized_corpus() {
        let subjects = ["I", "We", "My sister", "The team", "Nobody"];
        let verbs = ["really liked", "never expected", "talked about", "laughed at", "worried about"];
        let objects = [
            "the trip.",
            "that surprise!",
            "our old house, honestly.",
            "the results?",
            "what happened (again).",
            "it; we're fine.",
            "the news: terrible.",
            "Dinner  with   Mom.",
            "the [final] score.",
            "everything, right?",
        ];
        let corpus: Vec<String> = (0..50)
            .map(|i| format!("{} {} {}", subjects[i % 5], verbs[(i / 5) % 5], objects[i % 10]))
            .collect();
        let vocab = Vocab::build(corpus.iter().map(String::as_str));
        for s in &corpus {
            assert_eq!(vocab.detokenize(&vocab.tokenize(s)), normalize_text(s), "{s}");
        }
    }

    #[test]
    fn context_layout_counts() {
        let v = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let ctx = assemble_context(v.clone(), vec![1, 2, 3, 4, 5]).unwrap();
        assert_eq!(ctx.layout.len(), 3 + 1 + 5);
        assert_eq!(ctx.layout[3], LayoutTag::Separator);
        let bare = assemble_context(v.clone(), vec![]).unwrap();
        assert_eq!(bare.layout, vec![LayoutTag::Vision(0), LayoutTag::Vision(1), LayoutTag::Vision(2), LayoutTag::Separator]);
        assert_eq!(
            assemble_context(v.clone(), vec![7]).unwrap().digest(),
            assemble_context(v, vec![7]).unwrap().digest()
        );
        assert!(matches!(
            assemble_context(Array2::zeros((0, 4)), vec![]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn layout_preserves_frame_order() {
        let ctx = assemble_context(Array2::zeros((6, 2)), vec![1, 1]).unwrap();
        let frames: Vec<usize> = ctx
            .layout
            .iter()
            .filter_map(|t| match t {
                LayoutTag::Vision(i) => Some(*i),
                _ => None,
            })
            .collect();
        assert_eq!(frames, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn end_to_end_context_is_byte_identical() {
        let build = || {
            let ex = SyntheticExtractor::new(8, 4);
            let frontend = Frontend {
                projector: ProjectorParams::seeded(16, 16, 12, 9),
                vocab: Vocab::build(["oh really", "that's great"]),
            };
            let feats: Vec<DualFeature> = (0..4)
                .map(|t| {
                    let f = Frame::new(8, 8, (0..64).map(|i| ((i + t) % 5) as f64 / 5.0).collect()).unwrap();
                    extract_features(&f, &ex).unwrap()
                })
                .collect();
            frontend.context(&feats, &["oh really", "that's great"]).unwrap().to_bytes()
        };
        assert_eq!(build(), build());
    }
}
