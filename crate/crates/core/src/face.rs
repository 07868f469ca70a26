//! Linear parametric face model.
//!
//! A mesh is `template + shape_basis . shape + exp_basis . exp`, then rotated
//! by the global head pose about `rotation_center`. The synthetic basis shares
//! the coefficient signature of FLAME, so a real asset loader only has to
//! produce a [`FaceBasis`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::types::{ActionDims, FaceAction};

pub type Vertex = [f64; 3];
pub type VertexFrame = Vec<Vertex>;

/// Identity coefficients, fixed for every frame of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoeffs(pub Vec<f64>);

impl ShapeCoeffs {
    pub fn zeros(d_shape: usize) -> Self {
        Self(vec![0.0; d_shape])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceModelConfig {
    pub vertices: usize,
    pub d_shape: usize,
    pub dims: ActionDims,
    pub seed: u64,
}

impl Default for FaceModelConfig {
    fn default() -> Self {
        Self {
            vertices: 500,
            d_shape: 10,
            dims: ActionDims::new(10, 3),
            seed: 0,
        }
    }
}

impl FaceModelConfig {
    /// 50 expression channels, global rotation plus jaw axis-angle.
    pub fn flame_compat() -> Self {
        Self {
            dims: ActionDims::new(50, 6),
            ..Self::default()
        }
    }
}

/// Lower-face articulation used when `D_pose > 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JawRig {
    pub pivot: Vertex,
    /// Vertices with `y` below this line follow the jaw.
    pub line_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceBasis {
    template: Vec<Vertex>,
    /// Layout `[vertex][axis][component]`.
    shape_basis: Vec<f64>,
    exp_basis: Vec<f64>,
    d_shape: usize,
    dims: ActionDims,
    rotation_center: Vertex,
    jaw: JawRig,
}

impl FaceBasis {
    pub fn new(
        template: Vec<Vertex>,
        shape_basis: Vec<f64>,
        exp_basis: Vec<f64>,
        d_shape: usize,
        dims: ActionDims,
        rotation_center: Vertex,
    ) -> Result<Self> {
        if template.is_empty() {
            return Err(Error::EmptyInput("template vertices"));
        }
        if !matches!(dims.pose, 3 | 4 | 6) {
            return Err(Error::Config(format!(
                "pose dimension must be 3 (global), 4 (+jaw angle) or 6 (+jaw axis-angle), got {}",
                dims.pose
            )));
        }
        let v = template.len();
        check_len("shape_basis", v * 3 * d_shape, shape_basis.len())?;
        check_len("exp_basis", v * 3 * dims.exp, exp_basis.len())?;
        let min_y = template.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = template.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let line_y = min_y + 0.3 * (max_y - min_y);
        let jaw = JawRig {
            pivot: [0.0, line_y, -0.2 * (max_y - min_y)],
            line_y,
        };
        Ok(Self {
            template,
            shape_basis,
            exp_basis,
            d_shape,
            dims,
            rotation_center,
            jaw,
        })
    }

    /// Procedural head: an ellipsoid template with smooth random low-order
    /// polynomial deformation fields as shape and expression components.
    pub fn synthetic(cfg: &FaceModelConfig) -> Result<Self> {
        if cfg.vertices < 4 {
            return Err(Error::Config("synthetic basis needs at least 4 vertices".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let radii = [0.8, 1.0, 0.9];
        let n = cfg.vertices;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let template: Vec<Vertex> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).max(0.0).sqrt();
                let phi = golden * i as f64;
                [radii[0] * r * phi.cos(), radii[1] * y, radii[2] * r * phi.sin()]
            })
            .collect();
        let shape_basis = smooth_field(&template, cfg.d_shape, 0.05, &mut rng);
        let exp_basis = smooth_field(&template, cfg.dims.exp, 0.03, &mut rng);
        Self::new(
            template,
            shape_basis,
            exp_basis,
            cfg.d_shape,
            cfg.dims,
            [0.0, 0.0, 0.0],
        )
    }

    pub fn template(&self) -> &[Vertex] {
        &self.template
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn d_shape(&self) -> usize {
        self.d_shape
    }

    pub fn dims(&self) -> ActionDims {
        self.dims
    }

    pub fn rotation_center(&self) -> Vertex {
        self.rotation_center
    }

    pub fn with_rotation_center(mut self, center: Vertex) -> Self {
        self.rotation_center = center;
        self
    }

    /// Mesh for one frame.
    pub fn build_mesh(&self, shape: &ShapeCoeffs, action: &FaceAction) -> Result<VertexFrame> {
        check_len("shape", self.d_shape, shape.0.len())?;
        action.validate(self.dims)?;
        let global = rodrigues(&action.pose[..3]);
        let jaw = match self.dims.pose {
            4 => Some(rodrigues(&[action.pose[3], 0.0, 0.0])),
            6 => Some(rodrigues(&action.pose[3..6])),
            _ => None,
        };
        let (ds, de) = (self.d_shape, self.dims.exp);
        let mut out = Vec::with_capacity(self.template.len());
        for (v, base) in self.template.iter().enumerate() {
            let mut p = *base;
            for (axis, coord) in p.iter_mut().enumerate() {
                let s_off = (v * 3 + axis) * ds;
                let e_off = (v * 3 + axis) * de;
                *coord += dot(&self.shape_basis[s_off..s_off + ds], &shape.0);
                *coord += dot(&self.exp_basis[e_off..e_off + de], &action.exp);
            }
            if let Some(r) = &jaw {
                if base[1] < self.jaw.line_y {
                    p = rotate_about(r, &p, &self.jaw.pivot);
                }
            }
            let q = rotate_about(&global, &p, &self.rotation_center);
            if q.iter().any(|c| !c.is_finite()) {
                return Err(Error::Numerical("non-finite vertex".into()));
            }
            out.push(q);
        }
        Ok(out)
    }

    /// Animate one identity through a sequence of actions.
    pub fn render_sequence(
        &self,
        shape: &ShapeCoeffs,
        actions: &[FaceAction],
        fps: f64,
    ) -> Result<VertexSequence> {
        if actions.is_empty() {
            return Err(Error::EmptyInput("actions"));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::contract(format!("fps must be positive, got {fps}")));
        }
        let frames = actions
            .iter()
            .map(|a| self.build_mesh(shape, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(VertexSequence {
            frames,
            fps,
            dims: self.dims,
        })
    }
}

fn smooth_field(template: &[Vertex], components: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const FEATURES: usize = 10;
    let coeffs: Vec<f64> = (0..components * 3 * FEATURES)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal) / 3.0)
        .collect();
    let mut basis = vec![0.0; template.len() * 3 * components];
    for (v, p) in template.iter().enumerate() {
        let [x, y, z] = *p;
        let phi = [1.0, x, y, z, x * y, y * z, z * x, x * x, y * y, z * z];
        for axis in 0..3 {
            for k in 0..components {
                let a = &coeffs[(k * 3 + axis) * FEATURES..(k * 3 + axis + 1) * FEATURES];
                basis[(v * 3 + axis) * components + k] = dot(a, &phi);
            }
        }
    }
    basis
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues(r: &[f64]) -> [[f64; 3]; 3] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta < 1e-15 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let (kx, ky, kz) = (r[0] / theta, r[1] / theta, r[2] / theta);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + kx * kx * t, kx * ky * t - kz * s, kx * kz * t + ky * s],
        [ky * kx * t + kz * s, c + ky * ky * t, ky * kz * t - kx * s],
        [kz * kx * t - ky * s, kz * ky * t + kx * s, c + kz * kz * t],
    ]
}

fn rotate_about(r: &[[f64; 3]; 3], p: &Vertex, center: &Vertex) -> Vertex {
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    let mut out = *center;
    for (i, row) in r.iter().enumerate() {
        out[i] += row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
    }
    out
}

/// Animated mesh at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSequence {
    pub frames: Vec<VertexFrame>,
    pub fps: f64,
    pub dims: ActionDims,
}

impl VertexSequence {
    pub fn vertex_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

pub const PLAYBACK_MAGIC: &str = "FPM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaybackMode {
    /// JSON document with nested vertex arrays.
    Text,
    /// Magic, header fields and little-endian `f64` vertices.
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaybackFile {
    pub path: PathBuf,
    pub mode: PlaybackMode,
    pub bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct TextPlayback {
    magic: String,
    fps: f64,
    #[serde(rename = "V")]
    vertices: usize,
    #[serde(rename = "T")]
    frames_len: usize,
    #[serde(rename = "D_exp")]
    d_exp: usize,
    #[serde(rename = "D_pose")]
    d_pose: usize,
    frames: Vec<VertexFrame>,
}

/// Encode a sequence in the playback format.
pub fn encode_playback(seq: &VertexSequence, mode: PlaybackMode) -> Result<Vec<u8>> {
    let v = seq.vertex_count();
    if seq.frames.iter().any(|f| f.len() != v) {
        return Err(Error::contract("frames disagree on vertex count"));
    }
    match mode {
        PlaybackMode::Text => {
            let doc = TextPlayback {
                magic: PLAYBACK_MAGIC.into(),
                fps: seq.fps,
                vertices: v,
                frames_len: seq.frames.len(),
                d_exp: seq.dims.exp,
                d_pose: seq.dims.pose,
                frames: seq.frames.clone(),
            };
            serde_json::to_vec(&doc).map_err(|e| Error::format("playback", e))
        }
        PlaybackMode::Binary => {
            let mut buf = Vec::with_capacity(28 + seq.frames.len() * v * 24);
            buf.extend_from_slice(PLAYBACK_MAGIC.as_bytes());
            buf.extend_from_slice(&seq.fps.to_le_bytes());
            for n in [v, seq.frames.len(), seq.dims.exp, seq.dims.pose] {
                buf.extend_from_slice(&(n as u32).to_le_bytes());
            }
            for frame in &seq.frames {
                for p in frame {
                    for c in p {
                        buf.extend_from_slice(&c.to_le_bytes());
                    }
                }
            }
            Ok(buf)
        }
    }
}

/// Parse either playback mode, detected from the leading bytes.
pub fn decode_playback(bytes: &[u8]) -> Result<VertexSequence> {
    if bytes.starts_with(PLAYBACK_MAGIC.as_bytes()) {
        decode_binary(bytes)
    } else {
        let doc: TextPlayback =
            serde_json::from_slice(bytes).map_err(|e| Error::format("playback", e))?;
        if doc.magic != PLAYBACK_MAGIC {
            return Err(Error::format("playback", format!("bad magic {:?}", doc.magic)));
        }
        if doc.frames.len() != doc.frames_len || doc.frames.iter().any(|f| f.len() != doc.vertices) {
            return Err(Error::format("playback", "header disagrees with frame data"));
        }
        Ok(VertexSequence {
            frames: doc.frames,
            fps: doc.fps,
            dims: ActionDims::new(doc.d_exp, doc.d_pose),
        })
    }
}

fn decode_binary(bytes: &[u8]) -> Result<VertexSequence> {
    let bad = |m: &str| Error::format("playback", m);
    if bytes.len() < 28 {
        return Err(bad("truncated header"));
    }
    let fps = f64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let word = |i: usize| u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as usize;
    let (v, t, d_exp, d_pose) = (word(0), word(1), word(2), word(3));
    if bytes.len() != 28 + t * v * 24 {
        return Err(bad("payload length disagrees with header"));
    }
    let mut frames = Vec::with_capacity(t);
    let mut off = 28;
    for _ in 0..t {
        let mut frame = Vec::with_capacity(v);
        for _ in 0..v {
            let mut p = [0.0; 3];
            for c in &mut p {
                *c = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
            frame.push(p);
        }
        frames.push(frame);
    }
    Ok(VertexSequence {
        frames,
        fps,
        dims: ActionDims::new(d_exp, d_pose),
    })
}

pub fn export_playback(
    seq: &VertexSequence,
    path: impl AsRef<Path>,
    mode: PlaybackMode,
) -> Result<PlaybackFile> {
    let path = path.as_ref();
    let bytes = encode_playback(seq, mode)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(PlaybackFile {
        path: path.to_path_buf(),
        mode,
        bytes: bytes.len() as u64,
    })
}

pub fn import_playback(path: impl AsRef<Path>) -> Result<VertexSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_playback(&bytes)
}
