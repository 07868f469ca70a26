//! Per-dimension uniform quantization of face actions into action tokens.
//!
//! Each dimension's range is fitted on the training corpus after dropping the
//! extreme `trunc_frac` of sorted values on either side. Bins are half-open,
//! the top edge clamps into the last bin, and tokens decode to bin centres.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::types::{ActionDims, FaceAction};

pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_TRUNC: f64 = 0.01;
pub const BINSPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimRange {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub version: u32,
    pub bin_count: usize,
    pub dims: Vec<DimRange>,
    #[serde(skip)]
    action_dims: Option<ActionDims>,
}

/// Recorded when a constant dimension had to be widened.
#[derive(Debug, Clone, PartialEq)]
pub struct DegenerateDim {
    pub dim: usize,
    pub value: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub bin_count: usize,
    pub trunc_frac: f64,
    /// Minimum number of observed frames per dimension.
    pub min_frames: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            bin_count: DEFAULT_BINS,
            trunc_frac: DEFAULT_TRUNC,
            min_frames: 100,
        }
    }
}

/// Token ids for one sequence, `T x D` row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTokenSeq {
    pub frames: usize,
    pub dims_per_frame: usize,
    pub tokens: Vec<u16>,
}

impl ActionTokenSeq {
    pub fn new(frames: usize, dims_per_frame: usize, tokens: Vec<u16>) -> Result<Self> {
        check_len("tokens", frames * dims_per_frame, tokens.len())?;
        Ok(Self {
            frames,
            dims_per_frame,
            tokens,
        })
    }

    pub fn slots(&self) -> usize {
        self.tokens.len()
    }

    pub fn frame(&self, t: usize) -> &[u16] {
        &self.tokens[t * self.dims_per_frame..(t + 1) * self.dims_per_frame]
    }

    pub fn rows(&self) -> Vec<Vec<u16>> {
        (0..self.frames).map(|t| self.frame(t).to_vec()).collect()
    }

    pub fn from_rows(rows: &[Vec<u16>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut tokens = Vec::with_capacity(rows.len() * d);
        for r in rows {
            check_len("token row", d, r.len())?;
            tokens.extend_from_slice(r);
        }
        Self::new(rows.len(), d, tokens)
    }
}

pub fn dim_names(dims: ActionDims) -> Vec<String> {
    (0..dims.exp)
        .map(|i| format!("exp{i}"))
        .chain((0..dims.pose).map(|i| format!("pose{i}")))
        .collect()
}

/// Fit quantization ranges on a corpus of action sequences.
pub fn fit_bins(
    corpus: &[Vec<FaceAction>],
    opts: &FitOptions,
) -> Result<(BinSpec, Vec<DegenerateDim>)> {
    if opts.bin_count < 2 || opts.bin_count > u16::MAX as usize + 1 {
        return Err(Error::Config(format!("bin_count {} out of range", opts.bin_count)));
    }
    if !(0.0..0.5).contains(&opts.trunc_frac) {
        return Err(Error::Config(format!("trunc_frac {} not in [0, 0.5)", opts.trunc_frac)));
    }
    let dims = corpus
        .iter()
        .flatten()
        .next()
        .ok_or(Error::EmptyInput("bin-fitting corpus"))?
        .dims();
    let mut columns = vec![Vec::new(); dims.total()];
    for a in corpus.iter().flatten() {
        a.validate(dims)?;
        for (d, v) in a.to_flat().into_iter().enumerate() {
            columns[d].push(v);
        }
    }
    let n = columns[0].len();
    if n < opts.min_frames {
        return Err(Error::contract(format!(
            "bin fitting needs at least {} frames, corpus has {n}",
            opts.min_frames
        )));
    }
    let (lo_idx, hi_idx) = truncation_indices(n, opts.trunc_frac);
    let names = dim_names(dims);
    let mut warnings = Vec::new();
    let mut ranges = Vec::with_capacity(dims.total());
    for (d, mut col) in columns.into_iter().enumerate() {
        col.sort_by(f64::total_cmp);
        let (mut lower, mut upper) = (col[lo_idx], col[hi_idx]);
        if upper <= lower {
            let margin = f64::max(1e-9, 1e-9 * lower.abs());
            log::warn!("dimension {} is degenerate at {lower}; widening by {margin}", names[d]);
            warnings.push(DegenerateDim {
                dim: d,
                value: lower,
                margin,
            });
            lower -= margin;
            upper += margin;
        }
        ranges.push(DimRange {
            name: names[d].clone(),
            lower,
            upper,
        });
    }
    let spec = BinSpec {
        version: BINSPEC_VERSION,
        bin_count: opts.bin_count,
        dims: ranges,
        action_dims: Some(dims),
    };
    Ok((spec, warnings))
}

/// Zero-based sorted indices of the lower and upper range ends: the bottom
/// `ceil(f n)` and top `n - floor((1 - f) n)` values are dropped.
pub fn truncation_indices(n: usize, trunc_frac: f64) -> (usize, usize) {
    let nf = n as f64;
    // Guard against representation error in f * n landing just above an integer.
    let lo = (trunc_frac * nf - 1e-9).ceil().max(0.0) as usize;
    let hi = ((1.0 - trunc_frac) * nf + 1e-9).floor() as usize;
    let hi = hi.saturating_sub(1).min(n - 1);
    (lo.min(hi), hi)
}

impl BinSpec {
    pub fn from_ranges(bin_count: usize, dims: ActionDims, ranges: &[(f64, f64)]) -> Result<Self> {
        check_len("ranges", dims.total(), ranges.len())?;
        let spec = BinSpec {
            version: BINSPEC_VERSION,
            bin_count,
            dims: dim_names(dims)
                .into_iter()
                .zip(ranges)
                .map(|(name, &(lower, upper))| DimRange { name, lower, upper })
                .collect(),
            action_dims: Some(dims),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_count < 2 || self.bin_count > u16::MAX as usize + 1 {
            return Err(Error::contract(format!("bin_count {} out of range", self.bin_count)));
        }
        for r in &self.dims {
            if !(r.lower < r.upper) || !r.lower.is_finite() || !r.upper.is_finite() {
                return Err(Error::contract(format!(
                    "dimension {} has invalid range [{}, {}]",
                    r.name, r.lower, r.upper
                )));
            }
        }
        self.action_dims()?;
        Ok(())
    }

    /// Action layout, recovered from dimension names when deserialized.
    pub fn action_dims(&self) -> Result<ActionDims> {
        if let Some(d) = self.action_dims {
            return Ok(d);
        }
        let exp = self.dims.iter().take_while(|r| r.name.starts_with("exp")).count();
        let dims = ActionDims::new(exp, self.dims.len() - exp);
        if dim_names(dims).iter().zip(&self.dims).any(|(n, r)| *n != r.name) {
            return Err(Error::format("bin spec", "dimension names are not exp*/pose* ordered"));
        }
        Ok(dims)
    }

    pub fn width(&self, dim: usize) -> f64 {
        let r = &self.dims[dim];
        (r.upper - r.lower) / self.bin_count as f64
    }

    pub fn center(&self, dim: usize, token: usize) -> f64 {
        self.dims[dim].lower + (token as f64 + 0.5) * self.width(dim)
    }

    pub fn encode_value(&self, dim: usize, x: f64) -> Result<u16> {
        if !x.is_finite() {
            return Err(Error::contract(format!("non-finite value {x} in dimension {dim}")));
        }
        let raw = ((x - self.dims[dim].lower) / self.width(dim)).floor();
        Ok(raw.clamp(0.0, (self.bin_count - 1) as f64) as u16)
    }

    pub fn decode_value(&self, dim: usize, token: u16) -> Result<f64> {
        if token as usize >= self.bin_count {
            return Err(Error::contract(format!(
                "token {token} out of range for {} bins",
                self.bin_count
            )));
        }
        Ok(self.center(dim, token as usize))
    }

    pub fn encode(&self, action: &FaceAction) -> Result<Vec<u16>> {
        action.validate(self.action_dims()?)?;
        action
            .to_flat()
            .into_iter()
            .enumerate()
            .map(|(d, x)| self.encode_value(d, x))
            .collect()
    }

    pub fn decode(&self, tokens: &[u16]) -> Result<FaceAction> {
        let dims = self.action_dims()?;
        check_len("tokens", dims.total(), tokens.len())?;
        let flat = tokens
            .iter()
            .enumerate()
            .map(|(d, &t)| self.decode_value(d, t))
            .collect::<Result<Vec<_>>>()?;
        FaceAction::from_flat(&flat, dims)
    }

    pub fn encode_sequence(&self, actions: &[FaceAction]) -> Result<ActionTokenSeq> {
        let d = self.dims.len();
        let mut tokens = Vec::with_capacity(actions.len() * d);
        for a in actions {
            tokens.extend(self.encode(a)?);
        }
        ActionTokenSeq::new(actions.len(), d, tokens)
    }

    pub fn decode_sequence(&self, seq: &ActionTokenSeq) -> Result<Vec<FaceAction>> {
        check_len("token dims", self.dims.len(), seq.dims_per_frame)?;
        (0..seq.frames).map(|t| self.decode(seq.frame(t))).collect()
    }

    /// Decoded sequence as a `T x D` matrix.
    pub fn decode_matrix(&self, seq: &ActionTokenSeq) -> Result<Array2<f64>> {
        check_len("token dims", self.dims.len(), seq.dims_per_frame)?;
        let mut m = Array2::zeros((seq.frames, seq.dims_per_frame));
        for t in 0..seq.frames {
            for (d, &tok) in seq.frame(t).iter().enumerate() {
                m[[t, d]] = self.decode_value(d, tok)?;
            }
        }
        Ok(m)
    }

    /// Expected bin centre under the softmax of each `(t, d)` logit row.
    pub fn soft_decode(&self, logits: &Array3<f64>) -> Result<Array2<f64>> {
        let (t_len, d_len, k) = logits.dim();
        check_len("logit dims", self.dims.len(), d_len)?;
        check_len("logit bins", self.bin_count, k)?;
        let mut out = Array2::zeros((t_len, d_len));
        for t in 0..t_len {
            for d in 0..d_len {
                let p = softmax(logits.slice(ndarray::s![t, d, ..]).iter().copied());
                out[[t, d]] = p.iter().enumerate().map(|(j, pj)| pj * self.center(d, j)).sum();
            }
        }
        Ok(out)
    }

    /// Soft decode for slot-major logits (`T*D x bins`) as emitted by the policy.
    pub fn soft_decode_slots(&self, logits: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let d_len = self.dims.len();
        let (slots, k) = logits.dim();
        check_len("logit bins", self.bin_count, k)?;
        if slots % d_len != 0 {
            return Err(Error::contract("slot count is not a whole number of frames"));
        }
        let mut values = Array2::zeros((slots / d_len, d_len));
        let mut probs = Array2::zeros((slots, k));
        for s in 0..slots {
            let p = softmax(logits.row(s).iter().copied());
            let d = s % d_len;
            values[[s / d_len, d]] = p.iter().enumerate().map(|(j, pj)| pj * self.center(d, j)).sum();
            probs.row_mut(s).assign(&ndarray::Array1::from(p));
        }
        Ok((values, probs))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bin spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut spec: BinSpec = serde_json::from_str(s).map_err(|e| Error::format("bin spec", e))?;
        spec.action_dims = Some(spec.action_dims()?);
        spec.validate()?;
        Ok(spec)
    }

    /// Content hash used to tie checkpoints to the spec they were trained with.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("bin spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .map(|l| if max.is_infinite() && l == max { 1.0 } else { (l - max).exp() })
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_spec() -> BinSpec {
        BinSpec::from_ranges(256, ActionDims::new(1, 0), &[(-1.0, 1.0)]).unwrap()
    }

    fn one_dim_corpus(values: impl Iterator<Item = f64>) -> Vec<Vec<FaceAction>> {
        vec![values.map(|v| FaceAction::new(vec![v], vec![])).collect()]
    }

    #[test]
    fn fit_matches_sort_oracle() {
        let corpus = one_dim_corpus((0..1000).rev().map(f64::from));
        let (spec, warnings) = fit_bins(&corpus, &FitOptions::default()).unwrap();
        assert!(warnings.is_empty());
        // Oracle: sort, drop ten from each end.
        let mut sorted: Vec<f64> = (0..1000).map(f64::from).collect();
        sorted.sort_by(f64::total_cmp);
        let kept = &sorted[10..990];
        assert_eq!(spec.dims[0].lower, kept[0]);
        assert_eq!(spec.dims[0].upper, kept[kept.len() - 1]);
        assert_eq!((spec.dims[0].lower, spec.dims[0].upper), (10.0, 989.0));
        assert_eq!(spec.bin_count, 256);
    }

    #[test]
    fn zero_truncation_keeps_extremes() {
        let corpus = one_dim_corpus((0..500).map(|i| (i as f64 * 0.37).sin()));
        let opts = FitOptions {
            trunc_frac: 0.0,
            ..FitOptions::default()
        };
        let (spec, _) = fit_bins(&corpus, &opts).unwrap();
        let vals: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(spec.dims[0].lower, vals.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(spec.dims[0].upper, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn truncation_leaves_at_most_two_percent_outside() {
        for n in [100usize, 137, 1000, 4321] {
            let vals: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64).collect();
            let (spec, _) = fit_bins(&one_dim_corpus(vals.iter().copied()), &FitOptions::default()).unwrap();
            let outside = vals
                .iter()
                .filter(|&&v| v < spec.dims[0].lower || v > spec.dims[0].upper)
                .count();
            assert!(outside as f64 <= 0.02 * n as f64 + 2.0, "n={n} outside={outside}");
        }
    }

    #[test]
    fn constant_dimension_is_widened() {
        let corpus = vec![(0..200)
            .map(|i| FaceAction::new(vec![i as f64], vec![0.5]))
            .collect::<Vec<_>>()];
        let (spec, warnings) = fit_bins(&corpus, &FitOptions::default()).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].dim, 1);
        assert!(spec.dims[1].lower < 0.5 && 0.5 < spec.dims[1].upper);
        let tok = spec.encode_value(1, 0.5).unwrap();
        assert!((spec.decode_value(1, tok).unwrap() - 0.5).abs() <= spec.width(1));
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        let corpus = one_dim_corpus((0..50).map(f64::from));
        assert!(fit_bins(&corpus, &FitOptions::default()).is_err());
    }

    #[test]
    fn encode_reference_points() {
        let s = unit_spec();
        assert_eq!(s.encode_value(0, -1.0).unwrap(), 0);
        // (0 - (-1)) / (2/256) = 128 exactly.
        assert_eq!(s.encode_value(0, 0.0).unwrap(), 128);
        assert_eq!(s.encode_value(0, 10.0).unwrap(), 255);
        assert_eq!(s.encode_value(0, -10.0).unwrap(), 0);
        assert_eq!(s.encode_value(0, 1.0).unwrap(), 255);
        assert!(s.encode_value(0, f64::NAN).is_err());
    }

    #[test]
    fn decode_reference_points() {
        let s = unit_spec();
        assert_eq!(s.decode_value(0, 0).unwrap(), -1.0 + 0.5 * (2.0 / 256.0));
        assert_eq!(s.decode_value(0, 0).unwrap(), -0.99609375);
        assert!(s.decode_value(0, 255).unwrap() < 1.0);
        assert!(s.decode_value(0, 256).is_err());
    }

    #[test]
    fn soft_decode_limits() {
        let s = BinSpec::from_ranges(4, ActionDims::new(1, 0), &[(-1.0, 1.0)]).unwrap();
        let mut dominant = Array3::from_elem((1, 1, 4), -1e9);
        dominant[[0, 0, 2]] = 0.0;
        assert!((s.soft_decode(&dominant).unwrap()[[0, 0]] - s.center(0, 2)).abs() < 1e-12);
        let uniform = Array3::zeros((1, 1, 4));
        assert!(s.soft_decode(&uniform).unwrap()[[0, 0]].abs() < 1e-12);
        // Two bins with equal mass: expectation is the mean of their centres.
        let mut two = Array3::from_elem((1, 1, 4), f64::NEG_INFINITY);
        two[[0, 0, 0]] = 1.5;
        two[[0, 0, 3]] = 1.5;
        let want = 0.5 * s.center(0, 0) + 0.5 * s.center(0, 3);
        assert!((s.soft_decode(&two).unwrap()[[0, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_preserves_field_order() {
        let (spec, _) = fit_bins(
            &[(0..300)
                .map(|i| FaceAction::new(vec![i as f64, -(i as f64)], vec![0.01 * i as f64]))
                .collect()],
            &FitOptions::default(),
        )
        .unwrap();
        let json = spec.to_json();
        let v = json.find("\"version\"").unwrap();
        let b = json.find("\"bin_count\"").unwrap();
        let d = json.find("\"dims\"").unwrap();
        assert!(v < b && b < d);
        let back = BinSpec::from_json(&json).unwrap();
        assert_eq!(back.action_dims().unwrap(), ActionDims::new(2, 1));
        assert_eq!(back.dims, spec.dims);
        assert_eq!(back.hash(), spec.hash());
    }

    #[test]
    fn decode_rejects_wrong_width() {
        let s = unit_spec();
        assert!(s.decode(&[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn encode_is_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let s = unit_spec();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.encode_value(0, lo).unwrap() <= s.encode_value(0, hi).unwrap());
        }

        #[test]
        fn round_trip_within_half_bin(x in -1.0f64..1.0, lo in -5.0f64..0.0, span in 0.01f64..10.0) {
            let s = BinSpec::from_ranges(256, ActionDims::new(1, 0), &[(lo, lo + span)]).unwrap();
            let y = lo + (x + 1.0) / 2.0 * span * 0.999_999;
            let back = s.decode_value(0, s.encode_value(0, y).unwrap()).unwrap();
            prop_assert!((back - y).abs() <= s.width(0) / 2.0 + 1e-12);
        }
    }
}
