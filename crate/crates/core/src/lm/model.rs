//! Byte-level decoder-only transformer with hand-written backpropagation.
//!
//! `h⁰_t = W_w[x_t] + W_p[t]`, `hᵐ_t = TB(hᵐ⁻¹)` for `m = 1..=L`, and the
//! next-token distribution is `softmax(LN(hᴸ_t) · W_wᵀ)` (tied output).
//! Blocks are pre-norm: `x + Attn(LN(x))` then `x + MLP(LN(x))` with a GELU
//! feed-forward of width `4E`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LmError, Scalar};

pub const BYTE_VOCAB: usize = 256;
pub const BOS: u16 = 256;
pub const SEP: u16 = 257;
pub const PAD: u16 = 258;
pub const VOCAB_SIZE: usize = 259;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding and hidden width.
    pub embed: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: 384,
            heads: 6,
            layers: 6,
            vocab_size: VOCAB_SIZE,
            max_positions: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(embed: usize, heads: usize, layers: usize) -> Self {
        ModelConfig {
            embed,
            heads,
            layers,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.embed == 0 || self.heads == 0 {
            return bad("embedding width and head count must be positive".into());
        }
        if !self.embed.is_multiple_of(self.heads) {
            return bad(format!(
                "embedding width {} is not divisible by head count {}",
                self.embed, self.heads
            ));
        }
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }
}

/// Offset and length of one parameter tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
    /// Matrices and embeddings receive weight decay; biases and gains don't.
    pub decay: bool,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockSlots {
    ln1_g: Slot,
    ln1_b: Slot,
    qkv_w: Slot,
    qkv_b: Slot,
    proj_w: Slot,
    proj_b: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
    fc_w: Slot,
    fc_b: Slot,
    out_w: Slot,
    out_b: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    wte: Slot,
    wpe: Slot,
    blocks: Vec<BlockSlots>,
    lnf_g: Slot,
    lnf_b: Slot,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let e = cfg.embed;
        let mut next = 0;
        let mut slot = |len: usize, decay: bool| {
            let s = Slot {
                offset: next,
                len,
                decay,
            };
            next += len;
            s
        };
        let wte = slot(cfg.vocab_size * e, true);
        let wpe = slot(cfg.max_positions * e, true);
        let blocks = (0..cfg.layers)
            .map(|_| BlockSlots {
                ln1_g: slot(e, false),
                ln1_b: slot(e, false),
                qkv_w: slot(e * 3 * e, true),
                qkv_b: slot(3 * e, false),
                proj_w: slot(e * e, true),
                proj_b: slot(e, false),
                ln2_g: slot(e, false),
                ln2_b: slot(e, false),
                fc_w: slot(e * 4 * e, true),
                fc_b: slot(4 * e, false),
                out_w: slot(4 * e * e, true),
                out_b: slot(e, false),
            })
            .collect();
        let lnf_g = slot(e, false);
        let lnf_b = slot(e, false);
        Layout {
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            total: next,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn token_embedding(&self) -> Slot {
        self.wte
    }

    pub fn position_embedding(&self) -> Slot {
        self.wpe
    }

    /// Every tensor slot, in storage order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = vec![self.wte, self.wpe];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc_w,
                b.fc_b, b.out_w, b.out_b,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b]);
        out
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Output of a forward pass over `T` tokens.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Last layer's hidden states `hᴸ_t`, `T × E`.
    pub hidden: Matrix<T>,
    /// Row `t` is `log P(· | x_0..=x_t)`, `T × V`.
    pub log_probs: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm<T> {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<T>,
}

struct BlockCache<T> {
    x_in: Vec<T>,
    ln1: LnCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    m: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct Trace<T> {
    n: usize,
    blocks: Vec<BlockCache<T>>,
    x_last: Vec<T>,
    lnf: LnCache<T>,
    hf: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Scalar> TransformerLm<T> {
    /// Parameters drawn from `N(0, 0.02)` with zero biases and unit gains,
    /// fully determined by `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self, LmError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let gains: Vec<Slot> = layout
            .blocks
            .iter()
            .flat_map(|b| [b.ln1_g, b.ln2_g])
            .chain([layout.lnf_g])
            .collect();
        for slot in layout.slots() {
            let dst = &mut params[slot.range()];
            if slot.decay {
                for p in dst {
                    *p = T::of(normal.sample(&mut rng));
                }
            } else if gains.contains(&slot) {
                dst.fill(T::one());
            }
        }
        Ok(TransformerLm {
            cfg,
            layout,
            params,
        })
    }

    /// Rebuilds a model from a flat parameter vector.
    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Self, LmError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(LmError::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(TransformerLm {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> TransformerLm<U> {
        TransformerLm {
            cfg: self.cfg,
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| U::of(p.as_f64())).collect(),
        }
    }

    fn p(&self, slot: Slot) -> &[T] {
        &self.params[slot.range()]
    }

    fn check_tokens(&self, tokens: &[u16]) -> Result<(), LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptyInput);
        }
        if tokens.len() > self.cfg.max_positions {
            return Err(LmError::Overlength {
                len: tokens.len(),
                max: self.cfg.max_positions,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| usize::from(t) >= self.cfg.vocab_size) {
            return Err(LmError::BadToken(t));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u16]) -> Result<ForwardOutput<T>, LmError> {
        self.check_tokens(tokens)?;
        let tr = self.trace(tokens);
        let e = self.cfg.embed;
        Ok(ForwardOutput {
            hidden: Matrix {
                rows: tr.n,
                cols: e,
                data: tr.x_last,
            },
            log_probs: Matrix {
                rows: tr.n,
                cols: self.cfg.vocab_size,
                data: tr.log_probs,
            },
        })
    }

    /// Hidden states of every layer: entry `m` is `hᵐ`, `T × E`, for
    /// `m = 0..=L`.
    pub fn layer_states(&self, tokens: &[u16]) -> Result<Vec<Matrix<T>>, LmError> {
        self.check_tokens(tokens)?;
        let tr = self.trace(tokens);
        let e = self.cfg.embed;
        let mut out: Vec<Matrix<T>> = tr
            .blocks
            .into_iter()
            .map(|b| Matrix {
                rows: tr.n,
                cols: e,
                data: b.x_in,
            })
            .collect();
        out.push(Matrix {
            rows: tr.n,
            cols: e,
            data: tr.x_last,
        });
        Ok(out)
    }

    /// `Σ_{t: mask[t]} log P(tokens[t] | tokens[..t])`, in f64.
    ///
    /// Position 0 has no prediction and must not be masked.
    pub fn sequence_logprob(&self, tokens: &[u16], mask: &[bool]) -> Result<f64, LmError> {
        if mask.len() != tokens.len() {
            return Err(LmError::MaskLength {
                mask: mask.len(),
                tokens: tokens.len(),
            });
        }
        if mask.first() == Some(&true) {
            return Err(LmError::UnscorableFirst);
        }
        if !mask.iter().any(|&m| m) {
            self.check_tokens(tokens)?;
            return Ok(0.0);
        }
        let out = self.forward(tokens)?;
        Ok(masked_sum(&out.log_probs, tokens, mask))
    }

    /// Like [`sequence_logprob`](Self::sequence_logprob) but accepts
    /// sequences longer than `max_positions`, scoring them in overlapping
    /// windows with a stride of half the context. Each masked position is
    /// scored exactly once, with as much preceding context as fits.
    pub fn sequence_logprob_windowed(&self, tokens: &[u16], mask: &[bool]) -> Result<f64, LmError> {
        let p = self.cfg.max_positions;
        if tokens.len() <= p {
            return self.sequence_logprob(tokens, mask);
        }
        if mask.len() != tokens.len() {
            return Err(LmError::MaskLength {
                mask: mask.len(),
                tokens: tokens.len(),
            });
        }
        if mask[0] {
            return Err(LmError::UnscorableFirst);
        }
        let stride = (p / 2).max(1);
        let mut total = 0.0;
        let mut done = 1; // first unscored target index
        let mut start = 0;
        while done < tokens.len() {
            let end = (start + p).min(tokens.len());
            let window = &tokens[start..end];
            if mask[done..end].iter().any(|&m| m) {
                let out = self.forward(window)?;
                let mut wmask = vec![false; window.len()];
                wmask[done - start..end - start].copy_from_slice(&mask[done..end]);
                total += masked_sum(&out.log_probs, window, &wmask);
            }
            done = end;
            start += stride;
        }
        Ok(total)
    }

    fn trace(&self, tokens: &[u16]) -> Trace<T> {
        let cfg = &self.cfg;
        let (n, e, v) = (tokens.len(), cfg.embed, cfg.vocab_size);
        let wte = self.p(self.layout.wte);
        let wpe = self.p(self.layout.wpe);
        let mut x = vec![T::zero(); n * e];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * e..(t + 1) * e];
            let te = &wte[usize::from(tok) * e..(usize::from(tok) + 1) * e];
            let pe = &wpe[t * e..(t + 1) * e];
            for i in 0..e {
                row[i] = te[i] + pe[i];
            }
        }
        let mut blocks = Vec::with_capacity(cfg.layers);
        for bs in &self.layout.blocks {
            let (a, ln1) = layer_norm(&x, e, self.p(bs.ln1_g), self.p(bs.ln1_b));
            let qkv = linear(&a, e, self.p(bs.qkv_w), self.p(bs.qkv_b), 3 * e);
            let (attn, probs) = attention(&qkv, n, e, cfg.heads);
            let y = linear(&attn, e, self.p(bs.proj_w), self.p(bs.proj_b), e);
            let mut mid = x.clone();
            add_assign(&mut mid, &y);
            let (m, ln2) = layer_norm(&mid, e, self.p(bs.ln2_g), self.p(bs.ln2_b));
            let f = linear(&m, e, self.p(bs.fc_w), self.p(bs.fc_b), 4 * e);
            let g: Vec<T> = f.iter().map(|&z| gelu(z)).collect();
            let z = linear(&g, 4 * e, self.p(bs.out_w), self.p(bs.out_b), e);
            let mut out = mid;
            add_assign(&mut out, &z);
            blocks.push(BlockCache {
                x_in: std::mem::replace(&mut x, out),
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                m,
                f,
                g,
            });
        }
        let (hf, lnf) = layer_norm(&x, e, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b));
        let mut log_probs = vec![T::zero(); n * v];
        let fill = |(row, out): (&[T], &mut [T])| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(row, &wte[j * e..(j + 1) * e]);
            }
            log_softmax_in_place(out);
        };
        if n * v * e > PAR_THRESHOLD {
            hf.par_chunks(e).zip(log_probs.par_chunks_mut(v)).for_each(fill);
        } else {
            hf.chunks(e).zip(log_probs.chunks_mut(v)).for_each(fill);
        }
        Trace {
            n,
            blocks,
            x_last: x,
            lnf,
            hf,
            log_probs,
        }
    }

    /// Sum of `-log P(tokens[t] | tokens[..t])` over masked positions, scaled
    /// by `scale`, and its gradient (also scaled) added into `grad`.
    ///
    /// Returns the unscaled summed negative log-likelihood.
    pub fn accumulate_gradient(
        &self,
        tokens: &[u16],
        mask: &[bool],
        scale: T,
        grad: &mut [T],
    ) -> Result<T, LmError> {
        self.check_tokens(tokens)?;
        if mask.len() != tokens.len() {
            return Err(LmError::MaskLength {
                mask: mask.len(),
                tokens: tokens.len(),
            });
        }
        if mask[0] {
            return Err(LmError::UnscorableFirst);
        }
        assert_eq!(grad.len(), self.layout.total, "gradient buffer size");
        let tr = self.trace(tokens);
        let cfg = &self.cfg;
        let (n, e, v, h) = (tr.n, cfg.embed, cfg.vocab_size, cfg.heads);
        let lay = &self.layout;

        // d loss / d logits: row t-1 predicts tokens[t]
        let mut nll = T::zero();
        let mut dlogits = vec![T::zero(); n * v];
        let mut active = vec![false; n];
        for t in 1..n {
            if !mask[t] {
                continue;
            }
            let r = t - 1;
            active[r] = true;
            let lp = &tr.log_probs[r * v..(r + 1) * v];
            let target = usize::from(tokens[t]);
            nll -= lp[target];
            let d = &mut dlogits[r * v..(r + 1) * v];
            for j in 0..v {
                d[j] = lp[j].exp() * scale;
            }
            d[target] -= scale;
        }

        let wte = self.p(lay.wte);
        let mut dx = vec![T::zero(); n * e];
        {
            let dwte = &mut grad[lay.wte.range()];
            for r in (0..n).filter(|&r| active[r]) {
                let dl = &dlogits[r * v..(r + 1) * v];
                let hrow = &tr.hf[r * e..(r + 1) * e];
                let dh = &mut dx[r * e..(r + 1) * e];
                for j in 0..v {
                    let g = dl[j];
                    let w = &wte[j * e..(j + 1) * e];
                    let dw = &mut dwte[j * e..(j + 1) * e];
                    for i in 0..e {
                        dh[i] += g * w[i];
                        dw[i] += g * hrow[i];
                    }
                }
            }
        }
        let dhf = dx;
        let mut dx = vec![T::zero(); n * e];
        layer_norm_backward(
            &dhf,
            &tr.lnf,
            e,
            &self.params[lay.lnf_g.range()],
            &mut dx,
            grad,
            lay.lnf_g,
            lay.lnf_b,
        );

        for (bs, c) in lay.blocks.iter().zip(&tr.blocks).rev() {
            // MLP branch
            let mut dg = vec![T::zero(); n * 4 * e];
            linear_backward(&c.g, &dx, 4 * e, e, self.p(bs.out_w), &mut dg, grad, bs.out_w, bs.out_b);
            for (d, &z) in dg.iter_mut().zip(&c.f) {
                *d *= gelu_grad(z);
            }
            let mut dm = vec![T::zero(); n * e];
            linear_backward(&c.m, &dg, e, 4 * e, self.p(bs.fc_w), &mut dm, grad, bs.fc_w, bs.fc_b);
            let mut dmid = dx;
            layer_norm_backward(&dm, &c.ln2, e, self.p(bs.ln2_g), &mut dmid, grad, bs.ln2_g, bs.ln2_b);

            // attention branch
            let mut dattn = vec![T::zero(); n * e];
            linear_backward(&c.attn, &dmid, e, e, self.p(bs.proj_w), &mut dattn, grad, bs.proj_w, bs.proj_b);
            let dqkv = attention_backward(&c.qkv, &c.probs, &dattn, n, e, h);
            let mut da = vec![T::zero(); n * e];
            linear_backward(&c.a, &dqkv, e, 3 * e, self.p(bs.qkv_w), &mut da, grad, bs.qkv_w, bs.qkv_b);
            let mut din = dmid;
            layer_norm_backward(&da, &c.ln1, e, self.p(bs.ln1_g), &mut din, grad, bs.ln1_g, bs.ln1_b);
            dx = din;
        }

        {
            let (head, tail) = grad.split_at_mut(lay.wpe.offset);
            let dwte = &mut head[lay.wte.range()];
            let dwpe = &mut tail[..lay.wpe.len];
            for (t, &tok) in tokens.iter().enumerate() {
                let src = &dx[t * e..(t + 1) * e];
                let tok = usize::from(tok);
                for i in 0..e {
                    dwte[tok * e + i] += src[i];
                    dwpe[t * e + i] += src[i];
                }
            }
        }
        Ok(nll)
    }
}

fn masked_sum<T: Scalar>(log_probs: &Matrix<T>, tokens: &[u16], mask: &[bool]) -> f64 {
    (1..tokens.len())
        .filter(|&t| mask[t])
        .map(|t| log_probs.row(t - 1)[usize::from(tokens[t])].as_f64())
        .sum()
}

const PAR_THRESHOLD: usize = 1 << 18;

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `x · w + b` for `x: rows × fan_in`, `w: fan_in × fan_out`.
///
/// Each output row depends only on its input row, so results are identical
/// whether or not the rows are computed in parallel.
fn linear<T: Scalar>(x: &[T], fan_in: usize, w: &[T], b: &[T], fan_out: usize) -> Vec<T> {
    let rows = x.len() / fan_in;
    let mut out = vec![T::zero(); rows * fan_out];
    let row_op = |(xr, or): (&[T], &mut [T])| {
        or.copy_from_slice(b);
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w[i * fan_out..(i + 1) * fan_out];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    };
    if rows * fan_in * fan_out > PAR_THRESHOLD {
        x.par_chunks(fan_in)
            .zip(out.par_chunks_mut(fan_out))
            .for_each(row_op);
    } else {
        x.chunks(fan_in).zip(out.chunks_mut(fan_out)).for_each(row_op);
    }
    out
}

/// Accumulates `dx += dy · wᵀ`, `dw += xᵀ · dy`, `db += Σ dy`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    fan_in: usize,
    fan_out: usize,
    w: &[T],
    dx: &mut [T],
    grad: &mut [T],
    w_slot: Slot,
    b_slot: Slot,
) {
    let rows = x.len() / fan_in;
    for r in 0..rows {
        let dyr = &dy[r * fan_out..(r + 1) * fan_out];
        let xr = &x[r * fan_in..(r + 1) * fan_in];
        let dxr = &mut dx[r * fan_in..(r + 1) * fan_in];
        for i in 0..fan_in {
            dxr[i] += dot(dyr, &w[i * fan_out..(i + 1) * fan_out]);
        }
        let dw = &mut grad[w_slot.range()];
        for i in 0..fan_in {
            let xv = xr[i];
            if xv == T::zero() {
                continue;
            }
            for (d, &g) in dw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(dyr) {
                *d += xv * g;
            }
        }
        add_assign(&mut grad[b_slot.range()], dyr);
    }
}

fn layer_norm<T: Scalar>(x: &[T], e: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / e;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_e = T::one() / T::of(e as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * e..(r + 1) * e];
        let mean = xr.iter().copied().sum::<T>() * inv_e;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_e;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..e {
            let xh = (xr[i] - mean) * rs;
            xhat[r * e + i] = xh;
            y[r * e + i] = g[i] * xh + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx` and gain/bias gradients into `grad`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    e: usize,
    g: &[T],
    dx: &mut [T],
    grad: &mut [T],
    g_slot: Slot,
    b_slot: Slot,
) {
    let rows = dy.len() / e;
    let inv_e = T::one() / T::of(e as f64);
    let mut dxhat = vec![T::zero(); e];
    for r in 0..rows {
        let dyr = &dy[r * e..(r + 1) * e];
        let xh = &cache.xhat[r * e..(r + 1) * e];
        {
            let dg = &mut grad[g_slot.range()];
            for i in 0..e {
                dg[i] += dyr[i] * xh[i];
            }
        }
        add_assign(&mut grad[b_slot.range()], dyr);
        for i in 0..e {
            dxhat[i] = dyr[i] * g[i];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() * inv_e;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_e;
        let rs = cache.rstd[r];
        let dxr = &mut dx[r * e..(r + 1) * e];
        for i in 0..e {
            dxr[i] += rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

/// Causal multi-head attention over packed `qkv` rows (`n × 3E`).
/// Returns the concatenated head outputs (`n × E`) and the attention
/// weights (`heads × n × n`, zero above the diagonal).
fn attention<T: Scalar>(qkv: &[T], n: usize, e: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let d = e / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); n * e];
    let mut probs = vec![T::zero(); heads * n * n];
    let stride = 3 * e;
    for h in 0..heads {
        let (qo, ko, vo) = (h * d, e + h * d, 2 * e + h * d);
        for t in 0..n {
            let q = &qkv[t * stride + qo..t * stride + qo + d];
            let p = &mut probs[(h * n + t) * n..(h * n + t) * n + n];
            let mut max = T::neg_infinity();
            for j in 0..=t {
                let s = dot(q, &qkv[j * stride + ko..j * stride + ko + d]) * scale;
                p[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = T::zero();
            for pj in p.iter_mut().take(t + 1) {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            let o = &mut out[t * e + h * d..t * e + h * d + d];
            for j in 0..=t {
                p[j] /= z;
                let vj = &qkv[j * stride + vo..j * stride + vo + d];
                for i in 0..d {
                    o[i] += p[j] * vj[i];
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    e: usize,
    heads: usize,
) -> Vec<T> {
    let d = e / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let stride = 3 * e;
    let mut dqkv = vec![T::zero(); n * stride];
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * d, e + h * d, 2 * e + h * d);
        for t in 0..n {
            let p = &probs[(h * n + t) * n..(h * n + t) * n + n];
            let dot_row = &dout[t * e + h * d..t * e + h * d + d];
            let mut weighted = T::zero();
            for j in 0..=t {
                let vj = &qkv[j * stride + vo..j * stride + vo + d];
                dp[j] = dot(dot_row, vj);
                weighted += p[j] * dp[j];
                let dv = &mut dqkv[j * stride + vo..j * stride + vo + d];
                for i in 0..d {
                    dv[i] += p[j] * dot_row[i];
                }
            }
            for j in 0..=t {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                for i in 0..d {
                    let kji = qkv[j * stride + ko + i];
                    let qti = qkv[t * stride + qo + i];
                    dqkv[t * stride + qo + i] += ds * kji;
                    dqkv[j * stride + ko + i] += ds * qti;
                }
            }
        }
    }
    dqkv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    for z in row.iter_mut() {
        *z -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            embed: 8,
            heads: 2,
            layers: 2,
            vocab_size: VOCAB_SIZE,
            max_positions: 16,
            seed,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig::new(384, 7, 6);
        assert!(matches!(
            TransformerLm::<f32>::new(cfg),
            Err(LmError::Config(_))
        ));
        assert!(ModelConfig::new(384, 6, 6).validate().is_ok());
        assert!(ModelConfig::new(576, 8, 8).validate().is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerLm::<f32>::new(tiny(7)).unwrap();
        let b = TransformerLm::<f32>::new(tiny(7)).unwrap();
        let c = TransformerLm::<f32>::new(tiny(8)).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.params(), c.params());
        assert!(a.is_finite());
    }

    #[test]
    fn forward_shapes() {
        let m = TransformerLm::<f32>::new(tiny(1)).unwrap();
        let out = m.forward(&[BOS, 1, 2, 3, 4]).unwrap();
        assert_eq!((out.hidden.rows, out.hidden.cols), (5, 8));
        assert_eq!((out.log_probs.rows, out.log_probs.cols), (5, VOCAB_SIZE));
        for r in 0..5 {
            let s: f64 = out.log_probs.row(r).iter().map(|&l| f64::from(l).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
    }

    #[test]
    fn layer_zero_is_embedding_lookup() {
        let m = TransformerLm::<f64>::new(tiny(3)).unwrap();
        let tokens = [BOS, 65, 66, SEP, 0];
        let states = m.layer_states(&tokens).unwrap();
        assert_eq!(states.len(), 3);
        let e = 8;
        let wte = &m.params()[m.layout().token_embedding().range()];
        let wpe = &m.params()[m.layout().position_embedding().range()];
        for (t, &tok) in tokens.iter().enumerate() {
            for i in 0..e {
                let expect = wte[usize::from(tok) * e + i] + wpe[t * e + i];
                assert_eq!(states[0].row(t)[i], expect);
            }
        }
        let fwd = m.forward(&tokens).unwrap();
        assert_eq!(fwd.hidden, states[2]);
    }

    #[test]
    fn causality() {
        let m = TransformerLm::<f64>::new(tiny(5)).unwrap();
        let short = m.forward(&[BOS, 10, 20, 30]).unwrap();
        let long = m.forward(&[BOS, 10, 20, 30, 40, 50]).unwrap();
        for r in 0..4 {
            for (a, b) in short.log_probs.row(r).iter().zip(long.log_probs.row(r)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn overlength_rejected() {
        let m = TransformerLm::<f32>::new(tiny(1)).unwrap();
        let tokens = vec![1u16; 17];
        assert!(matches!(m.forward(&tokens), Err(LmError::Overlength { .. })));
        assert!(matches!(
            m.sequence_logprob(&tokens, &[false; 17]),
            Err(LmError::Overlength { .. })
        ));
        assert!(matches!(m.forward(&[]), Err(LmError::EmptyInput)));
        assert!(matches!(m.forward(&[300]), Err(LmError::BadToken(300))));
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut m = TransformerLm::<f64>::new(tiny(2)).unwrap();
        let slot = m.layout().token_embedding();
        m.params_mut()[slot.range()].fill(0.0);
        let lp = m
            .sequence_logprob(&[BOS, 104, 105], &[false, true, false])
            .unwrap();
        assert!((lp - (1.0f64 / 259.0).ln()).abs() < 1e-12);
        let all = m.sequence_logprob(&[BOS, 1, 2, 3], &[false; 4]).unwrap();
        assert_eq!(all, 0.0);
    }

    #[test]
    fn mask_additivity() {
        let m = TransformerLm::<f64>::new(tiny(9)).unwrap();
        let tokens: Vec<u16> = [BOS].into_iter().chain((0..11).map(|i| (i * 37 % 256) as u16)).collect();
        let n = tokens.len();
        let full: Vec<bool> = (0..n).map(|t| t > 0).collect();
        let a: Vec<bool> = (0..n).map(|t| t > 0 && t % 3 == 0).collect();
        let b: Vec<bool> = (0..n).map(|t| t > 0 && t % 3 != 0).collect();
        let total = m.sequence_logprob(&tokens, &full).unwrap();
        let split = m.sequence_logprob(&tokens, &a).unwrap() + m.sequence_logprob(&tokens, &b).unwrap();
        assert!((total - split).abs() < 1e-9);
        assert!(matches!(
            m.sequence_logprob(&tokens, &full[1..]),
            Err(LmError::MaskLength { .. })
        ));
    }

    #[test]
    fn windowed_matches_direct_when_short_and_scores_long() {
        let m = TransformerLm::<f64>::new(tiny(4)).unwrap();
        let tokens: Vec<u16> = [BOS].into_iter().chain((0..12).map(|i| i as u16 + 97)).collect();
        let mask: Vec<bool> = (0..tokens.len()).map(|t| t > 0).collect();
        assert_eq!(
            m.sequence_logprob(&tokens, &mask).unwrap(),
            m.sequence_logprob_windowed(&tokens, &mask).unwrap()
        );
        let long: Vec<u16> = [BOS].into_iter().chain((0..50).map(|i| (i % 26) as u16 + 97)).collect();
        let mask: Vec<bool> = (0..long.len()).map(|t| t > 0).collect();
        let lp = m.sequence_logprob_windowed(&long, &mask).unwrap();
        // every masked position contributes exactly once: near-uniform model
        let per = lp / 50.0;
        assert!(per < 0.0 && (per - (1.0f64 / 259.0).ln()).abs() < 0.5);
        let half: Vec<bool> = (0..long.len()).map(|t| t > 25).collect();
        let rest: Vec<bool> = (0..long.len()).map(|t| t > 0 && t <= 25).collect();
        let sum = m.sequence_logprob_windowed(&long, &half).unwrap()
            + m.sequence_logprob_windowed(&long, &rest).unwrap();
        assert!((sum - lp).abs() < 1e-9);
    }

    #[test]
    fn cast_round_trips_through_f64() {
        let m = TransformerLm::<f32>::new(tiny(6)).unwrap();
        let back: TransformerLm<f32> = m.cast::<f64>().cast();
        assert_eq!(m, back);
    }
}
