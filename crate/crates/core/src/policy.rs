//! Autoregressive action-token policy.
//!
//! A small pre-norm causal transformer over the sequence
//! `[vision_0 .. vision_{T-1}, SEP, text..., ACT, a_0 .. a_{n-2}]`.
//! Vision rows enter through a linear adapter; text, sentinels and action
//! symbols through one embedding table whose action block is shared by all
//! dimensions. The logits for action slot `j` are read at the position of
//! `ACT` plus `j`, so slot `j` sees the whole context and slots `< j`.
//! Slots are ordered frame-major, expression dims before pose dims.
//!
//! Everything is `f64` with explicit backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::ActionTokenSeq;
use crate::error::{check_len, Error, Result};
use crate::frontend::{gelu, gelu_grad, SpeakerContext};
use crate::types::ActionDims;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHyper {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Width of incoming vision embeddings.
    pub vision_dim: usize,
    pub text_vocab: usize,
    pub bins: usize,
    pub action_dims: ActionDims,
    pub max_frames: usize,
    pub max_text: usize,
}

impl PolicyHyper {
    pub fn slots_per_frame(&self) -> usize {
        self.action_dims.total()
    }

    pub fn max_slots(&self) -> usize {
        self.max_frames * self.slots_per_frame()
    }

    pub fn embed_rows(&self) -> usize {
        self.text_vocab + self.bins + 2
    }

    pub fn sep_id(&self) -> usize {
        self.text_vocab + self.bins
    }

    pub fn act_id(&self) -> usize {
        self.text_vocab + self.bins + 1
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.bins < 2 || self.slots_per_frame() == 0 || self.max_frames == 0 {
            return Err(Error::Config("policy needs bins >= 2 and a non-empty action frame".into()));
        }
        Ok(())
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn view<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.offset..self.offset + self.len()])
            .expect("slot within buffer")
    }

    fn view_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.offset..self.offset + self.len()])
            .expect("slot within buffer")
    }

    fn row<'a>(&self, buf: &'a [f64], r: usize) -> ArrayView1<'a, f64> {
        let start = self.offset + r * self.cols;
        ArrayView1::from(&buf[start..start + self.cols])
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ln1_g: Slot,
    ln1_b: Slot,
    w_qkv: Slot,
    b_qkv: Slot,
    w_o: Slot,
    b_o: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
    w_fc: Slot,
    b_fc: Slot,
    w_proj: Slot,
    b_proj: Slot,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: Slot,
    vis_w: Slot,
    vis_b: Slot,
    pos_emb: Slot,
    slot_emb: Slot,
    blocks: Vec<BlockLayout>,
    lnf_g: Slot,
    lnf_b: Slot,
    head_w: Slot,
    head_b: Slot,
    named: Vec<(String, Slot)>,
    total: usize,
}

impl Layout {
    fn new(h: &PolicyHyper) -> Self {
        let mut named = Vec::new();
        let mut off = 0;
        let mut alloc = |name: String, rows: usize, cols: usize| {
            let s = Slot {
                offset: off,
                rows,
                cols,
            };
            off += rows * cols;
            named.push((name, s));
            s
        };
        let d = h.d_model;
        let m = h.mlp_ratio * d;
        let tok_emb = alloc("tok_emb".into(), h.embed_rows(), d);
        let vis_w = alloc("vis_adapter.w".into(), h.vision_dim, d);
        let vis_b = alloc("vis_adapter.b".into(), 1, d);
        let pos_emb = alloc("pos_emb".into(), h.max_frames + 1 + h.max_text, d);
        let slot_emb = alloc("slot_emb".into(), h.max_slots(), d);
        let blocks = (0..h.n_layers)
            .map(|l| BlockLayout {
                ln1_g: alloc(format!("blocks.{l}.ln1.g"), 1, d),
                ln1_b: alloc(format!("blocks.{l}.ln1.b"), 1, d),
                w_qkv: alloc(format!("blocks.{l}.attn.w_qkv"), d, 3 * d),
                b_qkv: alloc(format!("blocks.{l}.attn.b_qkv"), 1, 3 * d),
                w_o: alloc(format!("blocks.{l}.attn.w_o"), d, d),
                b_o: alloc(format!("blocks.{l}.attn.b_o"), 1, d),
                ln2_g: alloc(format!("blocks.{l}.ln2.g"), 1, d),
                ln2_b: alloc(format!("blocks.{l}.ln2.b"), 1, d),
                w_fc: alloc(format!("blocks.{l}.mlp.w_fc"), d, m),
                b_fc: alloc(format!("blocks.{l}.mlp.b_fc"), 1, m),
                w_proj: alloc(format!("blocks.{l}.mlp.w_proj"), m, d),
                b_proj: alloc(format!("blocks.{l}.mlp.b_proj"), 1, d),
            })
            .collect();
        let lnf_g = alloc("ln_f.g".into(), 1, d);
        let lnf_b = alloc("ln_f.b".into(), 1, d);
        let head_w = alloc("head.w".into(), d, h.bins);
        let head_b = alloc("head.b".into(), 1, h.bins);
        Self {
            tok_emb,
            vis_w,
            vis_b,
            pos_emb,
            slot_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            named,
            total: off,
        }
    }
}

/// Policy weights: hyperparameters plus one flat `f64` buffer.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    hyper: PolicyHyper,
    layout: Layout,
    pub data: Vec<f64>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.data == other.data
    }
}

impl PolicyParams {
    pub fn zeros(hyper: PolicyHyper) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        let data = vec![0.0; layout.total];
        Ok(Self { hyper, layout, data })
    }

    /// Seeded initialization: N(0, 0.02) weights, unit layer-norm gains,
    /// residual projections scaled by `1/sqrt(2L)`.
    pub fn init(hyper: PolicyHyper, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(hyper)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid = 0.02 / (2.0 * p.hyper.n_layers.max(1) as f64).sqrt();
        let vis = 1.0 / (p.hyper.vision_dim.max(1) as f64).sqrt();
        let named = p.layout.named.clone();
        for (name, slot) in named {
            let std = if name.ends_with(".g") {
                None
            } else if name.ends_with(".b") || name.ends_with("b_qkv") || name.ends_with("b_o")
                || name.ends_with("b_fc") || name.ends_with("b_proj")
            {
                Some(0.0)
            } else if name.ends_with("w_o") || name.ends_with("w_proj") {
                Some(resid)
            } else if name == "vis_adapter.w" {
                Some(vis)
            } else {
                Some(0.02)
            };
            let buf = &mut p.data[slot.offset..slot.offset + slot.len()];
            match std {
                None => buf.fill(1.0),
                Some(0.0) => buf.fill(0.0),
                Some(s) => buf
                    .iter_mut()
                    .for_each(|x| *x = s * rng.sample::<f64, _>(StandardNormal)),
            }
        }
        Ok(p)
    }

    pub fn hyper(&self) -> &PolicyHyper {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Named tensors in storage order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.layout.named.iter().map(|(n, s)| (n.as_str(), *s))
    }

    pub fn tensor(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.tensors()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| s.view(&self.data))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<ArrayViewMut2<'_, f64>> {
        let slot = self.tensors().find(|(n, _)| *n == name).map(|(_, s)| s)?;
        Some(slot.view_mut(&mut self.data))
    }

    pub fn from_data(hyper: PolicyHyper, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(hyper)?;
        check_len("policy parameters", p.data.len(), data.len())?;
        p.data = data;
        Ok(p)
    }

    fn check_context(&self, ctx: &SpeakerContext) -> Result<()> {
        let h = &self.hyper;
        check_len("vision embedding width", h.vision_dim, ctx.vision.ncols())?;
        if ctx.frames() == 0 {
            return Err(Error::EmptyInput("vision embeddings"));
        }
        if ctx.frames() > h.max_frames {
            return Err(Error::contract(format!("{} frames exceed max_frames {}", ctx.frames(), h.max_frames)));
        }
        if ctx.text.len() > h.max_text {
            return Err(Error::contract(format!("{} text tokens exceed max_text {}", ctx.text.len(), h.max_text)));
        }
        if let Some(&t) = ctx.text.iter().find(|&&t| t as usize >= h.text_vocab) {
            return Err(Error::contract(format!("text token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Action slots for a context: one frame of actions per vision frame.
    pub fn slots_for(&self, ctx: &SpeakerContext) -> usize {
        ctx.frames() * self.hyper.slots_per_frame()
    }
}

/// Row-wise layer norm; returns output, normalized input and inverse std.
fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.mapv(|v| v * v).sum() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let n = dy.ncols() as f64;
    for (i, (dgi, dbi)) in dg.iter_mut().zip(db.iter_mut()).enumerate() {
        let col = dy.column(i);
        *dgi += col.dot(&cache.xhat.column(i));
        *dbi += col.sum();
    }
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dxhat = &dy.row(r) * &g;
        let xh = cache.xhat.row(r);
        let s1 = dxhat.sum();
        let s2 = dxhat.dot(&xh);
        let scale = cache.rstd[r] / n;
        let mut out = dx.row_mut(r);
        for i in 0..dxhat.len() {
            out[i] = scale * (n * dxhat[i] - s1 - xh[i] * s2);
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    a1: Array2<f64>,
    qkv: Array2<f64>,
    att: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    h: Array2<f64>,
    g: Array2<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n_vision: usize,
    n_text: usize,
    action_start: usize,
    inputs: Vec<Input>,
    vision: Array2<f64>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    zf: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Input {
    Vision(usize),
    Token { id: usize, pos_row: Option<usize>, slot_row: Option<usize> },
}

impl PolicyParams {
    fn inputs(&self, ctx: &SpeakerContext, prefix: &[u16]) -> Vec<Input> {
        let h = &self.hyper;
        let tv = ctx.frames();
        let mut v = Vec::with_capacity(tv + 2 + ctx.text.len() + prefix.len());
        v.extend((0..tv).map(Input::Vision));
        v.push(Input::Token { id: h.sep_id(), pos_row: Some(tv), slot_row: None });
        for (i, &t) in ctx.text.iter().enumerate() {
            v.push(Input::Token { id: t as usize, pos_row: Some(tv + 1 + i), slot_row: None });
        }
        v.push(Input::Token { id: h.act_id(), pos_row: None, slot_row: Some(0) });
        for (j, &a) in prefix.iter().enumerate() {
            v.push(Input::Token { id: h.text_vocab + a as usize, pos_row: None, slot_row: Some(j + 1) });
        }
        v
    }

    fn embed_row(&self, inp: Input, vision: &Array2<f64>, out: &mut ndarray::ArrayViewMut1<f64>) {
        let (l, buf) = (&self.layout, &self.data);
        match inp {
            Input::Vision(t) => {
                out.assign(&l.vis_b.row(buf, 0));
                *out += &vision.row(t).dot(&l.vis_w.view(buf));
                *out += &l.pos_emb.row(buf, t);
            }
            Input::Token { id, pos_row, slot_row } => {
                out.assign(&l.tok_emb.row(buf, id));
                if let Some(p) = pos_row {
                    *out += &l.pos_emb.row(buf, p);
                }
                if let Some(s) = slot_row {
                    *out += &l.slot_emb.row(buf, s);
                }
            }
        }
    }

    /// Teacher-forced logits for action slots `0..=prefix.len()` (capped at
    /// the context's slot count), one row of `bins` logits per slot.
    pub fn forward_logits(&self, ctx: &SpeakerContext, prefix: &[u16]) -> Result<Array2<f64>> {
        Ok(self.forward(ctx, prefix)?.0)
    }

    pub fn forward(&self, ctx: &SpeakerContext, prefix: &[u16]) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_context(ctx)?;
        let h = &self.hyper;
        let n_slots = self.slots_for(ctx);
        if prefix.len() > n_slots {
            return Err(Error::contract(format!("prefix of {} exceeds {n_slots} slots", prefix.len())));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t as usize >= h.bins) {
            return Err(Error::contract(format!("action token {t} out of range")));
        }
        let fed = &prefix[..prefix.len().min(n_slots - 1)];
        let inputs = self.inputs(ctx, fed);
        let p = inputs.len();
        let d = h.d_model;
        let (l, buf) = (&self.layout, &self.data);

        let mut x = Array2::zeros((p, d));
        for (i, &inp) in inputs.iter().enumerate() {
            self.embed_row(inp, &ctx.vision, &mut x.row_mut(i));
        }

        let mut blocks = Vec::with_capacity(h.n_layers);
        let dh = d / h.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for bl in &l.blocks {
            let (a1, ln1) = layer_norm(&x, bl.ln1_g.row(buf, 0), bl.ln1_b.row(buf, 0));
            let qkv = a1.dot(&bl.w_qkv.view(buf)) + &bl.b_qkv.row(buf, 0);
            let mut o = Array2::zeros((p, d));
            let mut att = Vec::with_capacity(h.n_heads);
            for head in 0..h.n_heads {
                let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
                let k = qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
                let mut sc = q.dot(&k.t()) * scale;
                for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                    let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut z = 0.0;
                    for (j, e) in row.iter_mut().enumerate() {
                        *e = if j <= i { (*e - max).exp() } else { 0.0 };
                        z += *e;
                    }
                    row /= z;
                }
                o.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&sc.dot(&v));
                att.push(sc);
            }
            x = x + o.dot(&bl.w_o.view(buf)) + &bl.b_o.row(buf, 0);
            let (a2, ln2) = layer_norm(&x, bl.ln2_g.row(buf, 0), bl.ln2_b.row(buf, 0));
            let hid = a2.dot(&bl.w_fc.view(buf)) + &bl.b_fc.row(buf, 0);
            let g = hid.mapv(gelu);
            x = x + g.dot(&bl.w_proj.view(buf)) + &bl.b_proj.row(buf, 0);
            blocks.push(BlockCache { ln1, a1, qkv, att, o, ln2, a2, h: hid, g });
        }

        let action_start = ctx.frames() + 1 + ctx.text.len();
        let n_out = (fed.len() + 1).min(n_slots);
        let tail = x.slice(s![action_start..action_start + n_out, ..]).to_owned();
        let (zf, lnf) = layer_norm(&tail, l.lnf_g.row(buf, 0), l.lnf_b.row(buf, 0));
        let logits = zf.dot(&l.head_w.view(buf)) + &l.head_b.row(buf, 0);
        let cache = ForwardCache {
            n_vision: ctx.frames(),
            n_text: ctx.text.len(),
            action_start,
            inputs,
            vision: ctx.vision.clone(),
            blocks,
            lnf,
            zf,
        };
        Ok((logits, cache))
    }

    /// Accumulate parameter gradients of a scalar whose gradient with
    /// respect to the forward logits is `dlogits`.
    pub fn backward_into(&self, cache: &ForwardCache, dlogits: &Array2<f64>, grad: &mut [f64]) {
        check_len("gradient buffer", self.data.len(), grad.len()).expect("gradient buffer sized to params");
        let h = &self.hyper;
        let (l, buf) = (&self.layout, &self.data);
        let d = h.d_model;
        let p = cache.inputs.len();
        let n_out = dlogits.nrows();

        general_mat_mul(1.0, &cache.zf.t(), dlogits, 1.0, &mut l.head_w.view_mut(grad));
        add_col_sums(dlogits, &mut grad[l.head_b.offset..l.head_b.offset + h.bins]);
        let dzf = dlogits.dot(&l.head_w.view(buf).t());
        let (gs, bs) = two_mut(grad, l.lnf_g, l.lnf_b);
        let dtail = layer_norm_backward(&dzf, &cache.lnf, l.lnf_g.row(buf, 0), gs, bs);
        let mut dx = Array2::zeros((p, d));
        dx.slice_mut(s![cache.action_start..cache.action_start + n_out, ..]).assign(&dtail);

        let dh = d / h.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (bl, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch.
            general_mat_mul(1.0, &bc.g.t(), &dx, 1.0, &mut bl.w_proj.view_mut(grad));
            add_col_sums(&dx, &mut grad[bl.b_proj.offset..bl.b_proj.offset + d]);
            let mut dhid = dx.dot(&bl.w_proj.view(buf).t());
            dhid.zip_mut_with(&bc.h, |g, &pre| *g *= gelu_grad(pre));
            general_mat_mul(1.0, &bc.a2.t(), &dhid, 1.0, &mut bl.w_fc.view_mut(grad));
            add_col_sums(&dhid, &mut grad[bl.b_fc.offset..bl.b_fc.offset + bl.b_fc.cols]);
            let da2 = dhid.dot(&bl.w_fc.view(buf).t());
            let (gs, bs) = two_mut(grad, bl.ln2_g, bl.ln2_b);
            dx = dx + layer_norm_backward(&da2, &bc.ln2, bl.ln2_g.row(buf, 0), gs, bs);

            // Attention branch.
            general_mat_mul(1.0, &bc.o.t(), &dx, 1.0, &mut bl.w_o.view_mut(grad));
            add_col_sums(&dx, &mut grad[bl.b_o.offset..bl.b_o.offset + d]);
            let dout = dx.dot(&bl.w_o.view(buf).t());
            let mut dqkv = Array2::zeros((p, 3 * d));
            for head in 0..h.n_heads {
                let cols = head * dh..(head + 1) * dh;
                let q = bc.qkv.slice(s![.., cols.clone()]);
                let k = bc.qkv.slice(s![.., d + cols.start..d + cols.end]);
                let v = bc.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
                let a = &bc.att[head];
                let do_h = dout.slice(s![.., cols.clone()]);
                let da = do_h.dot(&v.t());
                let dv = a.t().dot(&do_h);
                let mut ds = Array2::zeros((p, p));
                for i in 0..p {
                    let dot: f64 = (0..=i).map(|j| a[[i, j]] * da[[i, j]]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
                dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dk);
                dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
            }
            general_mat_mul(1.0, &bc.a1.t(), &dqkv, 1.0, &mut bl.w_qkv.view_mut(grad));
            add_col_sums(&dqkv, &mut grad[bl.b_qkv.offset..bl.b_qkv.offset + 3 * d]);
            let da1 = dqkv.dot(&bl.w_qkv.view(buf).t());
            let (gs, bs) = two_mut(grad, bl.ln1_g, bl.ln1_b);
            dx = dx + layer_norm_backward(&da1, &bc.ln1, bl.ln1_g.row(buf, 0), gs, bs);
        }

        // Embeddings.
        let dvis = dx.slice(s![..cache.n_vision, ..]);
        general_mat_mul(1.0, &cache.vision.t(), &dvis, 1.0, &mut l.vis_w.view_mut(grad));
        add_col_sums(&dvis.to_owned(), &mut grad[l.vis_b.offset..l.vis_b.offset + d]);
        for (i, inp) in cache.inputs.iter().enumerate() {
            let row = dx.row(i);
            let mut add = |slot: Slot, r: usize| {
                let start = slot.offset + r * slot.cols;
                for (g, v) in grad[start..start + d].iter_mut().zip(row.iter()) {
                    *g += v;
                }
            };
            match *inp {
                Input::Vision(t) => add(l.pos_emb, t),
                Input::Token { id, pos_row, slot_row } => {
                    add(l.tok_emb, id);
                    if let Some(pr) = pos_row {
                        add(l.pos_emb, pr);
                    }
                    if let Some(sr) = slot_row {
                        add(l.slot_emb, sr);
                    }
                }
            }
        }
        debug_assert_eq!(cache.n_vision + 1 + cache.n_text, cache.action_start);
    }
}

fn add_col_sums(m: &Array2<f64>, out: &mut [f64]) {
    for (o, s) in out.iter_mut().zip(m.sum_axis(Axis(0)).iter()) {
        *o += s;
    }
}

/// Disjoint mutable slices for a gain/bias pair.
fn two_mut(grad: &mut [f64], a: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = grad.split_at_mut(b.offset);
    (&mut lo[a.offset..a.offset + a.len()], &mut hi[..b.len()])
}

/// Log-softmax of one logit row.
pub fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
    row.mapv(|v| v - lse)
}

impl PolicyParams {
    /// Sum over all action slots of the log-probability of the realized token.
    pub fn sequence_logprob(&self, ctx: &SpeakerContext, actions: &ActionTokenSeq) -> Result<f64> {
        Ok(self.sequence_logprob_with_grad(ctx, actions, None)?)
    }

    /// Log-probability, optionally accumulating `scale * d logp / d params` into `grad`.
    pub fn sequence_logprob_with_grad(
        &self,
        ctx: &SpeakerContext,
        actions: &ActionTokenSeq,
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64> {
        let n = self.slots_for(ctx);
        if actions.slots() != n || actions.dims_per_frame != self.hyper.slots_per_frame() {
            return Err(Error::contract(format!(
                "action sequence has {} slots, context needs {n}",
                actions.slots()
            )));
        }
        let (logits, cache) = self.forward(ctx, &actions.tokens)?;
        let mut total = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (s, &tok) in actions.tokens.iter().enumerate() {
            let lp = log_softmax(logits.row(s));
            total += lp[tok as usize];
            for (k, v) in lp.iter().enumerate() {
                dlogits[[s, k]] = -v.exp();
            }
            dlogits[[s, tok as usize]] += 1.0;
        }
        if let Some((g, scale)) = grad {
            dlogits *= scale;
            self.backward_into(&cache, &dlogits, g);
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Argmax decoding, the zero-temperature limit.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draw one index from logits under a sampling configuration.
pub fn sample_from_logits(logits: ArrayView1<f64>, cfg: &SamplingConfig, rng: &mut impl Rng) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    if cfg.greedy {
        return argmax();
    }
    let mut scaled: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
    if let Some(k) = cfg.top_k.filter(|&k| k < scaled.len()) {
        let mut sorted = scaled.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cutoff = sorted[k - 1];
        let mut kept = 0;
        for v in scaled.iter_mut() {
            if *v >= cutoff && kept < k {
                kept += 1;
            } else {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or_else(argmax)
}

/// Incremental decoder holding per-layer keys and values.
struct Decoder<'a> {
    params: &'a PolicyParams,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    fn new(params: &'a PolicyParams, capacity: usize) -> Self {
        let d = params.hyper.d_model;
        let n = params.hyper.n_layers;
        Self {
            params,
            keys: vec![Array2::zeros((capacity, d)); n],
            values: vec![Array2::zeros((capacity, d)); n],
            len: 0,
        }
    }

    fn row_norm(x: &Array1<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let c = x - mean;
        let var = c.mapv(|v| v * v).sum() / n;
        c / (var + LN_EPS).sqrt() * g + b
    }

    /// Push one position; returns the final hidden state after `ln_f`.
    fn push(&mut self, mut x: Array1<f64>) -> Array1<f64> {
        let (h, l, buf) = (&self.params.hyper, &self.params.layout, &self.params.data);
        let d = h.d_model;
        let dh = d / h.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = self.len;
        for (li, bl) in l.blocks.iter().enumerate() {
            let a1 = Self::row_norm(&x, bl.ln1_g.row(buf, 0), bl.ln1_b.row(buf, 0));
            let qkv = a1.dot(&bl.w_qkv.view(buf)) + bl.b_qkv.row(buf, 0);
            self.keys[li].row_mut(p).assign(&qkv.slice(s![d..2 * d]));
            self.values[li].row_mut(p).assign(&qkv.slice(s![2 * d..]));
            let mut o = Array1::zeros(d);
            for head in 0..h.n_heads {
                let cols = head * dh..(head + 1) * dh;
                let q = qkv.slice(s![cols.clone()]);
                let k = self.keys[li].slice(s![..=p, cols.clone()]);
                let v = self.values[li].slice(s![..=p, cols.clone()]);
                let sc = k.dot(&q) * scale;
                let max = sc.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let e = sc.mapv(|v| (v - max).exp());
                let a = &e / e.sum();
                o.slice_mut(s![cols]).assign(&a.dot(&v));
            }
            x = x + o.dot(&bl.w_o.view(buf)) + bl.b_o.row(buf, 0);
            let a2 = Self::row_norm(&x, bl.ln2_g.row(buf, 0), bl.ln2_b.row(buf, 0));
            let g = (a2.dot(&bl.w_fc.view(buf)) + bl.b_fc.row(buf, 0)).mapv(gelu);
            x = x + g.dot(&bl.w_proj.view(buf)) + bl.b_proj.row(buf, 0);
        }
        self.len += 1;
        Self::row_norm(&x, l.lnf_g.row(buf, 0), l.lnf_b.row(buf, 0))
    }

    fn logits(&self, z: &Array1<f64>) -> Array1<f64> {
        let (l, buf) = (&self.params.layout, &self.params.data);
        z.dot(&l.head_w.view(buf)) + l.head_b.row(buf, 0)
    }
}

impl PolicyParams {
    /// Ancestral sampling of `frames` frames of action tokens.
    pub fn sample_actions(&self, ctx: &SpeakerContext, frames: usize, cfg: &SamplingConfig) -> Result<ActionTokenSeq> {
        cfg.validate()?;
        if frames == 0 {
            return Err(Error::contract("sample at least one frame"));
        }
        if frames != ctx.frames() {
            return Err(Error::contract(format!(
                "requested {frames} frames for a {}-frame context",
                ctx.frames()
            )));
        }
        self.check_context(ctx)?;
        let n = self.slots_for(ctx);
        let inputs = self.inputs(ctx, &[]);
        let mut dec = Decoder::new(self, inputs.len() + n);
        let d = self.hyper.d_model;
        let mut last = Array1::zeros(d);
        for inp in inputs {
            let mut x = Array1::zeros(d);
            self.embed_row(inp, &ctx.vision, &mut x.view_mut());
            last = dec.push(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tokens = Vec::with_capacity(n);
        for j in 0..n {
            let logits = dec.logits(&last);
            let tok = sample_from_logits(logits.view(), cfg, &mut rng);
            tokens.push(tok as u16);
            if j + 1 < n {
                let inp = Input::Token {
                    id: self.hyper.text_vocab + tok,
                    pos_row: None,
                    slot_row: Some(j + 1),
                };
                let mut x = Array1::zeros(d);
                self.embed_row(inp, &ctx.vision, &mut x.view_mut());
                last = dec.push(x);
            }
        }
        ActionTokenSeq::new(frames, self.hyper.slots_per_frame(), tokens)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::frontend::assemble_context;

    pub(crate) fn tiny_hyper() -> PolicyHyper {
        PolicyHyper {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            vision_dim: 4,
            text_vocab: 5,
            bins: 6,
            action_dims: ActionDims::new(2, 1),
            max_frames: 4,
            max_text: 4,
        }
    }

    pub(crate) fn toy_context(frames: usize, seed: u64) -> SpeakerContext {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision = Array2::from_shape_fn((frames, 4), |_| rng.gen_range(-1.0..1.0));
        assemble_context(vision, vec![1, 3, 2]).unwrap()
    }

    fn toy_tokens(n: usize, bins: usize, seed: u64) -> Vec<u16> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..bins as u16)).collect()
    }

    #[test]
    fn causal_perturbation() {
        let p = PolicyParams::init(tiny_hyper(), 1).unwrap();
        let ctx = toy_context(3, 2);
        let n = p.slots_for(&ctx);
        let base_tokens = toy_tokens(n, 6, 3);
        let base = p.forward_logits(&ctx, &base_tokens).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let j = rng.gen_range(0..n);
            let mut tokens = base_tokens.clone();
            tokens[j] = (tokens[j] + 1 + rng.gen_range(0..4)) % 6;
            let pert = p.forward_logits(&ctx, &tokens).unwrap();
            for slot in 0..=j {
                assert_eq!(base.row(slot), pert.row(slot), "slot {slot} moved after perturbing {j}");
            }
            if j + 1 < n {
                assert_ne!(base.row(j + 1), pert.row(j + 1));
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut p = PolicyParams::init(tiny_hyper(), 1).unwrap();
        p.tensor_mut("head.w").unwrap().fill(0.0);
        p.tensor_mut("head.b").unwrap().fill(0.0);
        let ctx = toy_context(2, 0);
        let logits = p.forward_logits(&ctx, &toy_tokens(6, 6, 0)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let lp = p
            .sequence_logprob(&ctx, &ActionTokenSeq::new(2, 3, toy_tokens(6, 6, 1)).unwrap())
            .unwrap();
        assert!((lp + 6.0 * (6f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn per_slot_softmax_normalizes() {
        let p = PolicyParams::init(tiny_hyper(), 4).unwrap();
        let ctx = toy_context(3, 1);
        let logits = p.forward_logits(&ctx, &toy_tokens(9, 6, 5)).unwrap();
        for row in logits.rows() {
            let total: f64 = log_softmax(row).mapv(f64::exp).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    /// Single block, single head, explicit per-position loops.
    fn oracle_logits(p: &PolicyParams, ctx: &SpeakerContext, tokens: &[u16]) -> Vec<Vec<f64>> {
        let h = p.hyper();
        let d = h.d_model;
        let t = |name: &str| p.tensor(name).unwrap().to_owned();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let emb = t("tok_emb");
        let pos = t("pos_emb");
        let slot = t("slot_emb");
        let (vw, vb) = (t("vis_adapter.w"), t("vis_adapter.b"));
        for f in 0..ctx.frames() {
            xs.push((0..d).map(|c| {
                vb[[0, c]] + (0..h.vision_dim).map(|i| ctx.vision[[f, i]] * vw[[i, c]]).sum::<f64>() + pos[[f, c]]
            }).collect());
        }
        let tv = ctx.frames();
        xs.push((0..d).map(|c| emb[[h.sep_id(), c]] + pos[[tv, c]]).collect());
        for (i, &w) in ctx.text.iter().enumerate() {
            xs.push((0..d).map(|c| emb[[w as usize, c]] + pos[[tv + 1 + i, c]]).collect());
        }
        let start = xs.len();
        xs.push((0..d).map(|c| emb[[h.act_id(), c]] + slot[[0, c]]).collect());
        for (j, &a) in tokens.iter().enumerate() {
            xs.push((0..d).map(|c| emb[[h.text_vocab + a as usize, c]] + slot[[j + 1, c]]).collect());
        }
        let ln = |x: &[f64], g: &Array2<f64>, b: &Array2<f64>| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / d as f64;
            let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / d as f64;
            (0..d).map(|c| (x[c] - m) / (v + 1e-5).sqrt() * g[[0, c]] + b[[0, c]]).collect()
        };
        let mm = |x: &[f64], w: &Array2<f64>, b: &Array2<f64>| -> Vec<f64> {
            (0..w.ncols()).map(|c| b[[0, c]] + (0..x.len()).map(|i| x[i] * w[[i, c]]).sum::<f64>()).collect()
        };
        let a1: Vec<Vec<f64>> = xs.iter().map(|x| ln(x, &t("blocks.0.ln1.g"), &t("blocks.0.ln1.b"))).collect();
        let qkv: Vec<Vec<f64>> = a1.iter().map(|a| mm(a, &t("blocks.0.attn.w_qkv"), &t("blocks.0.attn.b_qkv"))).collect();
        let mut out = Vec::new();
        for i in 0..xs.len() {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|c| qkv[i][c] * qkv[j][d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let o: Vec<f64> = (0..d)
                .map(|c| (0..=i).map(|j| (scores[j] - mx).exp() / z * qkv[j][2 * d + c]).sum())
                .collect();
            let att = mm(&o, &t("blocks.0.attn.w_o"), &t("blocks.0.attn.b_o"));
            let x1: Vec<f64> = (0..d).map(|c| xs[i][c] + att[c]).collect();
            let a2 = ln(&x1, &t("blocks.0.ln2.g"), &t("blocks.0.ln2.b"));
            let hid: Vec<f64> = mm(&a2, &t("blocks.0.mlp.w_fc"), &t("blocks.0.mlp.b_fc")).into_iter().map(gelu).collect();
            let m = mm(&hid, &t("blocks.0.mlp.w_proj"), &t("blocks.0.mlp.b_proj"));
            let x2: Vec<f64> = (0..d).map(|c| x1[c] + m[c]).collect();
            if i >= start {
                let z = ln(&x2, &t("ln_f.g"), &t("ln_f.b"));
                out.push(mm(&z, &t("head.w"), &t("head.b")));
            }
        }
        out
    }

    #[test]
    fn single_block_matches_hand_oracle() {
        let hyper = PolicyHyper {
            n_heads: 1,
            action_dims: ActionDims::new(1, 1),
            ..tiny_hyper()
        };
        let mut p = PolicyParams::init(hyper, 7).unwrap();
        // Non-trivial gains and biases so every term is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for x in p.data.iter_mut() {
            *x += 0.1 * rng.gen_range(-1.0..1.0);
        }
        let ctx = toy_context(1, 3);
        let tokens = vec![4u16, 1];
        let got = p.forward_logits(&ctx, &tokens).unwrap();
        let want = oracle_logits(&p, &ctx, &tokens[..1]);
        assert_eq!(got.nrows(), 2);
        for (s, row) in want.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                assert!((got[[s, k]] - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn logprob_matches_per_slot_enumeration() {
        let p = PolicyParams::init(tiny_hyper(), 11).unwrap();
        let ctx = toy_context(3, 4);
        let seq = ActionTokenSeq::new(3, 3, toy_tokens(9, 6, 8)).unwrap();
        let got = p.sequence_logprob(&ctx, &seq).unwrap();
        let mut want = 0.0;
        for j in 0..9 {
            let logits = p.forward_logits(&ctx, &seq.tokens[..j]).unwrap();
            let row = logits.row(j);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want += (row[seq.tokens[j] as usize].exp() / z).ln();
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn logprob_is_additive_over_prefix_and_suffix() {
        let p = PolicyParams::init(tiny_hyper(), 12).unwrap();
        let ctx = toy_context(4, 5);
        let seq = ActionTokenSeq::new(4, 3, toy_tokens(12, 6, 2)).unwrap();
        let logits = p.forward_logits(&ctx, &seq.tokens).unwrap();
        let part = |r: std::ops::Range<usize>| -> f64 {
            r.map(|s| log_softmax(logits.row(s))[seq.tokens[s] as usize]).sum()
        };
        let total = p.sequence_logprob(&ctx, &seq).unwrap();
        assert!((total - (part(0..5) + part(5..12))).abs() < 1e-12);
    }

    #[test]
    fn dominant_logits_give_near_zero_logprob() {
        let mut p = PolicyParams::init(tiny_hyper(), 1).unwrap();
        p.tensor_mut("head.w").unwrap().fill(0.0);
        let mut b = p.tensor_mut("head.b").unwrap();
        b.fill(-50.0);
        b[[0, 2]] = 50.0;
        let ctx = toy_context(2, 0);
        let seq = ActionTokenSeq::new(2, 3, vec![2; 6]).unwrap();
        assert!(p.sequence_logprob(&ctx, &seq).unwrap().abs() < 1e-30);
    }

    #[test]
    fn incomplete_sequence_is_rejected() {
        let p = PolicyParams::init(tiny_hyper(), 1).unwrap();
        let ctx = toy_context(2, 0);
        let seq = ActionTokenSeq::new(1, 3, vec![0; 3]).unwrap();
        assert!(matches!(p.sequence_logprob(&ctx, &seq), Err(Error::Contract(_))));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-7)
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let p = PolicyParams::init(tiny_hyper(), 21).unwrap();
        assert!(p.len() < 5000);
        let ctx = toy_context(3, 6);
        let seq = ActionTokenSeq::new(3, 3, toy_tokens(9, 6, 7)).unwrap();
        let mut grad = vec![0.0; p.len()];
        p.sequence_logprob_with_grad(&ctx, &seq, Some((&mut grad, 1.0))).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let mut q = p.clone();
            q.data[i] += h;
            let up = q.sequence_logprob(&ctx, &seq).unwrap();
            q.data[i] -= 2.0 * h;
            let down = q.sequence_logprob(&ctx, &seq).unwrap();
            let num = (up - down) / (2.0 * h);
            if grad[i].abs() > 1e-9 || num.abs() > 1e-9 {
                worst = worst.max(rel_err(grad[i], num));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn greedy_matches_teacher_forced_argmax() {
        let p = PolicyParams::init(tiny_hyper(), 31).unwrap();
        let ctx = toy_context(3, 2);
        let seq = p.sample_actions(&ctx, 3, &SamplingConfig::greedy()).unwrap();
        let logits = p.forward_logits(&ctx, &seq.tokens).unwrap();
        for (s, &tok) in seq.tokens.iter().enumerate() {
            let best = logits
                .row(s)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(tok as usize, best);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = PolicyParams::init(tiny_hyper(), 31).unwrap();
        let ctx = toy_context(4, 2);
        let a = p.sample_actions(&ctx, 4, &SamplingConfig::seeded(5)).unwrap();
        let b = p.sample_actions(&ctx, 4, &SamplingConfig::seeded(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.iter().all(|&t| t < 6));
    }

    #[test]
    fn sample_frequencies_match_softmax() {
        // Two bins with logits giving p = 0.75 / 0.25.
        let logits = Array1::from(vec![(3.0f64).ln(), 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = SamplingConfig::default();
        let draws = 10_000;
        let zeros = (0..draws)
            .filter(|_| sample_from_logits(logits.view(), &cfg, &mut rng) == 0)
            .count();
        assert!((zeros as f64 / draws as f64 - 0.75).abs() <= 0.02);
    }

    #[test]
    fn top_k_restricts_support() {
        let logits = Array1::from(vec![0.0, 5.0, 4.0, -1.0]);
        let cfg = SamplingConfig {
            top_k: Some(2),
            ..SamplingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let i = sample_from_logits(logits.view(), &cfg, &mut rng);
            assert!(i == 1 || i == 2);
        }
    }

    #[test]
    fn invalid_temperature_is_rejected() {
        let p = PolicyParams::init(tiny_hyper(), 1).unwrap();
        let ctx = toy_context(1, 0);
        let cfg = SamplingConfig {
            temperature: 0.0,
            ..SamplingConfig::default()
        };
        assert!(p.sample_actions(&ctx, 1, &cfg).is_err());
    }
}
