//! Window-based neural tagger with exact hand-written gradients.
//!
//! Architecture per token: embedding lookup over a symmetric context window
//! (out-of-range positions contribute zero vectors), concatenation, one tanh
//! hidden layer, linear softmax over tags. Inverted dropout applies to the
//! hidden layer only and is off at inference. All math is f64 and every
//! operation runs in a fixed order, so runs with equal inputs are
//! bit-identical.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Token-string to dense-id mapping. Id 0 is reserved for unknown tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK: usize = 0;

    /// Builds a vocabulary in first-seen order, with the unknown token at id 0.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut v = Vocab {
            tokens: vec!["<unk>".to_string()],
            index: HashMap::new(),
        };
        v.index.insert("<unk>".to_string(), 0);
        for t in texts {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a token, falling back to the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Shape hyperparameters of the tagger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub window: usize,
    pub d_hidden: usize,
    pub n_tags: usize,
}

impl ModelShape {
    /// Width of the concatenated window input.
    pub fn window_input(&self) -> usize {
        (2 * self.window + 1) * self.d_emb
    }

    pub fn n_params(&self) -> usize {
        self.vocab_size * self.d_emb
            + self.window_input() * self.d_hidden
            + self.d_hidden
            + self.d_hidden * self.n_tags
            + self.n_tags
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_emb == 0 || self.d_hidden == 0 || self.n_tags == 0 {
            return Err(Error::Schema("model dimensions must be nonzero".into()));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Parameter buffers of the tagger, in canonical order: embeddings (row per
/// vocab id), W1 (window_input x d_hidden), b1, W2 (d_hidden x n_tags), b2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerParams {
    pub shape: ModelShape,
    pub embeddings: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Fresh parameters: weights uniform on (-0.1, 0.1), biases zero.
pub fn init_params<R: Rng>(shape: ModelShape, rng: &mut R) -> TaggerParams {
    let mut p = TaggerParams::zeros(shape);
    for m in [&mut p.embeddings, &mut p.w1, &mut p.w2] {
        for v in &mut m.data {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    p
}

impl TaggerParams {
    pub fn zeros(shape: ModelShape) -> Self {
        TaggerParams {
            shape,
            embeddings: Matrix::zeros(shape.vocab_size, shape.d_emb),
            w1: Matrix::zeros(shape.window_input(), shape.d_hidden),
            b1: vec![0.0; shape.d_hidden],
            w2: Matrix::zeros(shape.d_hidden, shape.n_tags),
            b2: vec![0.0; shape.n_tags],
        }
    }

    fn fields(&self) -> [&[f64]; 5] {
        [
            &self.embeddings.data,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.embeddings.data,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    /// Parameters as one vector in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape.n_params());
        for f in self.fields() {
            out.extend_from_slice(f);
        }
        out
    }

    pub fn from_flat(shape: ModelShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.n_params() {
            return Err(Error::LengthMismatch {
                context: format!(
                    "flat parameter vector has {} entries, shape needs {}",
                    flat.len(),
                    shape.n_params()
                ),
            });
        }
        let mut p = TaggerParams::zeros(shape);
        let mut off = 0;
        for f in p.fields_mut() {
            f.copy_from_slice(&flat[off..off + f.len()]);
            off += f.len();
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|f| f.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the little-endian bytes of the canonical flat vector,
    /// rendered as hex. Used to fingerprint trajectories.
    pub fn checksum(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for f in self.fields() {
            for v in f {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        format!("{h:016x}")
    }

    /// Serializes as a one-line text header plus raw little-endian f64 values
    /// in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape;
        let mut out = format!(
            "metast-tagger v1 vocab={} emb={} window={} hidden={} tags={}\n",
            s.vocab_size, s.d_emb, s.window, s.d_hidden, s.n_tags
        )
        .into_bytes();
        for f in self.fields() {
            for v in f {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let parse = |msg: &str| Error::Parse {
            line: 1,
            msg: msg.to_string(),
        };
        let nl = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse("missing header line"))?;
        let header =
            std::str::from_utf8(&data[..nl]).map_err(|_| parse("header is not utf-8"))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("metast-tagger") || it.next() != Some("v1") {
            return Err(parse("bad magic or version"));
        }
        let mut dim = |key: &str| -> Result<usize> {
            let field = it
                .next()
                .ok_or_else(|| parse(&format!("missing field {key}")))?;
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| parse(&format!("malformed field {field:?}")))?;
            if k != key {
                return Err(parse(&format!("expected field {key}, found {k}")));
            }
            v.parse::<usize>()
                .map_err(|_| parse(&format!("bad value for {key}: {v:?}")))
        };
        let shape = ModelShape {
            vocab_size: dim("vocab")?,
            d_emb: dim("emb")?,
            window: dim("window")?,
            d_hidden: dim("hidden")?,
            n_tags: dim("tags")?,
        };
        if it.next().is_some() {
            return Err(parse("trailing fields in header"));
        }
        shape.validate()?;
        // checked arithmetic: header values are untrusted
        let n_params = checked_n_params(&shape).ok_or_else(|| parse("shape overflows"))?;
        let body = &data[nl + 1..];
        let expected = n_params
            .checked_mul(8)
            .ok_or_else(|| parse("shape overflows"))?;
        if body.len() != expected {
            return Err(Error::Parse {
                line: 2,
                msg: format!("body has {} bytes, shape needs {}", body.len(), expected),
            });
        }
        let mut flat = Vec::with_capacity(n_params);
        for chunk in body.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: 2,
                    msg: "non-finite parameter value".into(),
                });
            }
            flat.push(v);
        }
        TaggerParams::from_flat(shape, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn checked_n_params(s: &ModelShape) -> Option<usize> {
    let win_in = s.window.checked_mul(2)?.checked_add(1)?.checked_mul(s.d_emb)?;
    s.vocab_size
        .checked_mul(s.d_emb)?
        .checked_add(win_in.checked_mul(s.d_hidden)?)?
        .checked_add(s.d_hidden)?
        .checked_add(s.d_hidden.checked_mul(s.n_tags)?)?
        .checked_add(s.n_tags)
}

/// Gradient accumulator with the same layout as [`TaggerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub shape: ModelShape,
    pub embeddings: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(shape: ModelShape) -> Self {
        GradBuffer {
            shape,
            embeddings: Matrix::zeros(shape.vocab_size, shape.d_emb),
            w1: Matrix::zeros(shape.window_input(), shape.d_hidden),
            b1: vec![0.0; shape.d_hidden],
            w2: Matrix::zeros(shape.d_hidden, shape.n_tags),
            b2: vec![0.0; shape.n_tags],
        }
    }

    fn fields(&self) -> [&[f64]; 5] {
        [
            &self.embeddings.data,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.embeddings.data,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    pub fn zero_out(&mut self) {
        for f in self.fields_mut() {
            f.fill(0.0);
        }
    }

    /// self += other * factor, entrywise in canonical order.
    pub fn add_scaled(&mut self, other: &GradBuffer, factor: f64) {
        debug_assert_eq!(self.shape, other.shape);
        let o = other.fields();
        for (i, f) in self.fields_mut().into_iter().enumerate() {
            for (a, b) in f.iter_mut().zip(o[i]) {
                *a += b * factor;
            }
        }
    }

    /// Gradient as one vector in canonical order.
    pub fn flatten(&self) -> FlatGrad {
        let mut out = Vec::with_capacity(self.shape.n_params());
        for f in self.fields() {
            out.extend_from_slice(f);
        }
        FlatGrad(out)
    }

    /// Dot product against a flat vector, walking fields in canonical order.
    /// Matches `self.flatten().dot(flat)` bit for bit.
    pub fn dot(&self, flat: &FlatGrad) -> f64 {
        debug_assert_eq!(self.shape.n_params(), flat.0.len());
        let mut acc = 0.0;
        let mut off = 0;
        for f in self.fields() {
            for (a, b) in f.iter().zip(&flat.0[off..off + f.len()]) {
                acc += a * b;
            }
            off += f.len();
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|f| f.iter().all(|v| v.is_finite()))
    }
}

/// Flattened gradient in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrad(pub Vec<f64>);

impl FlatGrad {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &FlatGrad) -> f64 {
        debug_assert_eq!(self.0.len(), other.0.len());
        let mut acc = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            acc += a * b;
        }
        acc
    }
}

/// Inverted-dropout scale factors for the hidden layer, one row per token.
/// Entries are 0 (dropped) or 1/keep (kept); at rate 0 callers skip the mask
/// entirely so no RNG draws happen.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub n_tokens: usize,
    pub d_hidden: usize,
    pub scale: Vec<f64>,
}

impl DropoutMask {
    pub fn sample<R: Rng>(rng: &mut R, n_tokens: usize, d_hidden: usize, rate: f64) -> Self {
        debug_assert!((0.0..1.0).contains(&rate));
        let keep = 1.0 - rate;
        let scale = (0..n_tokens * d_hidden)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        DropoutMask {
            n_tokens,
            d_hidden,
            scale,
        }
    }

    #[inline]
    fn row(&self, n: usize) -> &[f64] {
        &self.scale[n * self.d_hidden..(n + 1) * self.d_hidden]
    }
}

/// Training targets for one sentence: hard tag ids or soft tag distributions.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Hard(&'a [usize]),
    Soft(&'a [Vec<f64>]),
}

impl Target<'_> {
    pub fn len(&self) -> usize {
        match self {
            Target::Hard(t) => t.len(),
            Target::Soft(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, n_tokens: usize, n_tags: usize) -> Result<()> {
        if self.len() != n_tokens {
            return Err(Error::LengthMismatch {
                context: format!("{} targets for {} tokens", self.len(), n_tokens),
            });
        }
        match self {
            Target::Hard(ids) => {
                for &id in *ids {
                    if id >= n_tags {
                        return Err(Error::InvalidTagId { id, n_tags });
                    }
                }
            }
            Target::Soft(rows) => {
                for row in *rows {
                    if row.len() != n_tags {
                        return Err(Error::LengthMismatch {
                            context: format!("soft row has {} entries for {} tags", row.len(), n_tags),
                        });
                    }
                    let mut sum = 0.0;
                    for &q in row {
                        if !(q >= 0.0) {
                            return Err(Error::Schema("soft target entry is negative".into()));
                        }
                        sum += q;
                    }
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(Error::Schema(format!(
                            "soft target row sums to {sum}, expected 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One sentence inside a gradient batch.
pub struct BatchItem<'a> {
    pub tokens: &'a [usize],
    pub target: Target<'a>,
    /// None means all tokens weigh 1.
    pub weights: Option<&'a [f64]>,
    pub mask: Option<&'a DropoutMask>,
}

struct Trace {
    n: usize,
    /// n rows of window_input()
    x: Vec<f64>,
    /// n rows of d_hidden: tanh output before dropout
    h: Vec<f64>,
    /// n rows of d_hidden: hidden after dropout scaling
    hd: Vec<f64>,
    /// n rows of n_tags
    logits: Vec<f64>,
    probs: Vec<f64>,
    lse: Vec<f64>,
}

fn forward_trace(
    params: &TaggerParams,
    tokens: &[usize],
    mask: Option<&DropoutMask>,
) -> Result<Trace> {
    let s = params.shape;
    for &t in tokens {
        if t >= s.vocab_size {
            return Err(Error::TokenIdOutOfRange {
                id: t,
                vocab_size: s.vocab_size,
            });
        }
    }
    if let Some(m) = mask {
        if m.n_tokens != tokens.len() || m.d_hidden != s.d_hidden {
            return Err(Error::LengthMismatch {
                context: format!(
                    "dropout mask is {}x{}, sentence needs {}x{}",
                    m.n_tokens,
                    m.d_hidden,
                    tokens.len(),
                    s.d_hidden
                ),
            });
        }
    }
    let n = tokens.len();
    let (win_in, d_h, c) = (s.window_input(), s.d_hidden, s.n_tags);
    let mut tr = Trace {
        n,
        x: vec![0.0; n * win_in],
        h: vec![0.0; n * d_h],
        hd: vec![0.0; n * d_h],
        logits: vec![0.0; n * c],
        probs: vec![0.0; n * c],
        lse: vec![0.0; n],
    };
    for i in 0..n {
        let x = &mut tr.x[i * win_in..(i + 1) * win_in];
        for k in 0..2 * s.window + 1 {
            let src = i as isize + k as isize - s.window as isize;
            if src >= 0 && (src as usize) < n {
                let row = params.embeddings.row(tokens[src as usize]);
                x[k * s.d_emb..(k + 1) * s.d_emb].copy_from_slice(row);
            }
        }
        let h = &mut tr.h[i * d_h..(i + 1) * d_h];
        for j in 0..d_h {
            let mut z = params.b1[j];
            for (ix, &xv) in x.iter().enumerate() {
                z += xv * params.w1.data[ix * d_h + j];
            }
            h[j] = z.tanh();
        }
        let hd = &mut tr.hd[i * d_h..(i + 1) * d_h];
        match mask {
            Some(m) => {
                let sc = m.row(i);
                for j in 0..d_h {
                    hd[j] = h[j] * sc[j];
                }
            }
            None => hd.copy_from_slice(h),
        }
        let logits = &mut tr.logits[i * c..(i + 1) * c];
        for (t, l) in logits.iter_mut().enumerate() {
            let mut z = params.b2[t];
            for (j, &hv) in hd.iter().enumerate() {
                z += hv * params.w2.data[j * c + t];
            }
            *l = z;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let probs = &mut tr.probs[i * c..(i + 1) * c];
        for (t, p) in probs.iter_mut().enumerate() {
            *p = (logits[t] - m).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        tr.lse[i] = m + sum.ln();
    }
    Ok(tr)
}

/// Tag distributions for each token, one row per token. The mask, when
/// present, must match the sentence length and hidden width.
pub fn forward(
    params: &TaggerParams,
    tokens: &[usize],
    mask: Option<&DropoutMask>,
) -> Result<Vec<Vec<f64>>> {
    let tr = forward_trace(params, tokens, mask)?;
    let c = params.shape.n_tags;
    Ok((0..tr.n).map(|i| tr.probs[i * c..(i + 1) * c].to_vec()).collect())
}

/// Most likely tag per token; ties break toward the lowest tag id.
pub fn predict_tags(params: &TaggerParams, tokens: &[usize]) -> Result<Vec<usize>> {
    let tr = forward_trace(params, tokens, None)?;
    let c = params.shape.n_tags;
    Ok((0..tr.n)
        .map(|i| {
            let row = &tr.probs[i * c..(i + 1) * c];
            let mut best = 0;
            for (t, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = t;
                }
            }
            best
        })
        .collect())
}

fn loss_at(tr: &Trace, i: usize, target: &Target, c: usize) -> f64 {
    let logits = &tr.logits[i * c..(i + 1) * c];
    match target {
        Target::Hard(ids) => tr.lse[i] - logits[ids[i]],
        Target::Soft(rows) => {
            let mut dot = 0.0;
            for (t, &q) in rows[i].iter().enumerate() {
                dot += q * logits[t];
            }
            tr.lse[i] - dot
        }
    }
}

/// Cross-entropy loss per token. Non-negative; zero only in the limit of a
/// certain, correct prediction.
pub fn token_losses(
    params: &TaggerParams,
    tokens: &[usize],
    target: Target,
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>> {
    target.validate(tokens.len(), params.shape.n_tags)?;
    let tr = forward_trace(params, tokens, mask)?;
    let c = params.shape.n_tags;
    Ok((0..tr.n).map(|i| loss_at(&tr, i, &target, c)).collect())
}

/// Mean of the token losses; zero for an empty sentence.
pub fn mean_token_loss(
    params: &TaggerParams,
    tokens: &[usize],
    target: Target,
) -> Result<f64> {
    let losses = token_losses(params, tokens, target, None)?;
    if losses.is_empty() {
        return Ok(0.0);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// dL/dlogits for token i scaled by `factor`, written into `out`.
fn dlogits_at(tr: &Trace, i: usize, target: &Target, factor: f64, out: &mut [f64]) {
    let c = out.len();
    let probs = &tr.probs[i * c..(i + 1) * c];
    match target {
        Target::Hard(ids) => {
            for (t, o) in out.iter_mut().enumerate() {
                let q = if t == ids[i] { 1.0 } else { 0.0 };
                *o = factor * (probs[t] - q);
            }
        }
        Target::Soft(rows) => {
            for (t, o) in out.iter_mut().enumerate() {
                *o = factor * (probs[t] - rows[i][t]);
            }
        }
    }
}

/// Accumulates the gradient contribution of token i given dL/dlogits.
fn backprop_token(
    params: &TaggerParams,
    tr: &Trace,
    tokens: &[usize],
    i: usize,
    dlogits: &[f64],
    mask: Option<&DropoutMask>,
    gb: &mut GradBuffer,
) {
    let s = params.shape;
    let (win_in, d_h) = (s.window_input(), s.d_hidden);
    let hd = &tr.hd[i * d_h..(i + 1) * d_h];
    let h = &tr.h[i * d_h..(i + 1) * d_h];
    let x = &tr.x[i * win_in..(i + 1) * win_in];

    for (t, &dl) in dlogits.iter().enumerate() {
        gb.b2[t] += dl;
    }
    let mut ghd = vec![0.0; d_h];
    for j in 0..d_h {
        let w2row = params.w2.row(j);
        let gw2 = gb.w2.row_mut(j);
        let mut acc = 0.0;
        for (t, &dl) in dlogits.iter().enumerate() {
            gw2[t] += hd[j] * dl;
            acc += w2row[t] * dl;
        }
        ghd[j] = acc;
    }
    // through dropout, then tanh
    let mut gz = ghd;
    if let Some(m) = mask {
        let sc = m.row(i);
        for (j, g) in gz.iter_mut().enumerate() {
            *g *= sc[j];
        }
    }
    for (j, g) in gz.iter_mut().enumerate() {
        *g *= 1.0 - h[j] * h[j];
    }
    for (j, &g) in gz.iter().enumerate() {
        gb.b1[j] += g;
    }
    let mut gx = vec![0.0; win_in];
    for (ix, &xv) in x.iter().enumerate() {
        let w1row = params.w1.row(ix);
        let gw1 = gb.w1.row_mut(ix);
        let mut acc = 0.0;
        for (j, &g) in gz.iter().enumerate() {
            gw1[j] += xv * g;
            acc += w1row[j] * g;
        }
        gx[ix] = acc;
    }
    let n = tr.n;
    for k in 0..2 * s.window + 1 {
        let src = i as isize + k as isize - s.window as isize;
        if src >= 0 && (src as usize) < n {
            let grow = gb.embeddings.row_mut(tokens[src as usize]);
            for (d, g) in grow.iter_mut().enumerate() {
                *g += gx[k * s.d_emb + d];
            }
        }
    }
}

/// Gradient of the weighted mean token loss of one sentence:
/// (1/N) * sum_n weights[n] * loss_n. Weights must be non-negative.
pub fn backward(
    params: &TaggerParams,
    tokens: &[usize],
    target: Target,
    weights: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<GradBuffer> {
    target.validate(tokens.len(), params.shape.n_tags)?;
    if weights.len() != tokens.len() {
        return Err(Error::LengthMismatch {
            context: format!("{} weights for {} tokens", weights.len(), tokens.len()),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Config("token weights must be non-negative".into()));
    }
    let mut gb = GradBuffer::zeros(params.shape);
    if tokens.is_empty() {
        return Ok(gb);
    }
    let tr = forward_trace(params, tokens, mask)?;
    let c = params.shape.n_tags;
    let inv_n = 1.0 / tokens.len() as f64;
    let mut dlogits = vec![0.0; c];
    for i in 0..tr.n {
        dlogits_at(&tr, i, &target, weights[i] * inv_n, &mut dlogits);
        backprop_token(params, &tr, tokens, i, &dlogits, mask, &mut gb);
    }
    if !gb.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok(gb)
}

/// Gradient of each token's own loss (unit weight, no 1/N factor, no
/// dropout), flattened in canonical order.
pub fn per_token_grads(
    params: &TaggerParams,
    tokens: &[usize],
    target: Target,
) -> Result<Vec<FlatGrad>> {
    target.validate(tokens.len(), params.shape.n_tags)?;
    let tr = forward_trace(params, tokens, None)?;
    let c = params.shape.n_tags;
    let mut scratch = GradBuffer::zeros(params.shape);
    let mut dlogits = vec![0.0; c];
    let mut out = Vec::with_capacity(tr.n);
    for i in 0..tr.n {
        scratch.zero_out();
        dlogits_at(&tr, i, &target, 1.0, &mut dlogits);
        backprop_token(params, &tr, tokens, i, &dlogits, None, &mut scratch);
        out.push(scratch.flatten());
    }
    Ok(out)
}

/// Same per-token gradients, but each is dotted against `flat` instead of
/// materialized. Entry i equals `per_token_grads(..)[i].dot(flat)` bit for
/// bit.
pub fn per_token_grad_dots(
    params: &TaggerParams,
    tokens: &[usize],
    target: Target,
    flat: &FlatGrad,
) -> Result<Vec<f64>> {
    target.validate(tokens.len(), params.shape.n_tags)?;
    let tr = forward_trace(params, tokens, None)?;
    let c = params.shape.n_tags;
    let mut scratch = GradBuffer::zeros(params.shape);
    let mut dlogits = vec![0.0; c];
    let mut out = Vec::with_capacity(tr.n);
    for i in 0..tr.n {
        scratch.zero_out();
        dlogits_at(&tr, i, &target, 1.0, &mut dlogits);
        backprop_token(params, &tr, tokens, i, &dlogits, None, &mut scratch);
        out.push(scratch.dot(flat));
    }
    Ok(out)
}

/// Mean over sentences of the per-sentence weighted gradients:
/// (1/M) * sum_m backward(sentence m). Empty batch gives a zero buffer.
pub fn batch_gradient(params: &TaggerParams, items: &[BatchItem]) -> Result<GradBuffer> {
    let mut gb = GradBuffer::zeros(params.shape);
    if items.is_empty() {
        return Ok(gb);
    }
    let inv_m = 1.0 / items.len() as f64;
    let ones_cap = items.iter().map(|it| it.tokens.len()).max().unwrap_or(0);
    let ones = vec![1.0; ones_cap];
    for it in items {
        let w = it.weights.unwrap_or(&ones[..it.tokens.len()]);
        let gi = backward(params, it.tokens, it.target, w, it.mask)?;
        gb.add_scaled(&gi, inv_m);
    }
    Ok(gb)
}

/// One SGD step with L2 weight decay: theta <- theta - lr * (g + wd * theta).
pub fn sgd_step(
    params: &TaggerParams,
    grads: &GradBuffer,
    lr: f64,
    weight_decay: f64,
) -> Result<TaggerParams> {
    if params.shape != grads.shape {
        return Err(Error::LengthMismatch {
            context: "gradient shape differs from parameter shape".into(),
        });
    }
    let mut out = params.clone();
    let g = grads.fields();
    for (i, f) in out.fields_mut().into_iter().enumerate() {
        for (p, gv) in f.iter_mut().zip(g[i]) {
            *p -= lr * (gv + weight_decay * *p);
        }
    }
    if !out.is_finite() {
        return Err(Error::Numerical("non-finite parameters after step".into()));
    }
    Ok(out)
}
