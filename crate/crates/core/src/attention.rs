//! Scaled dot-product attention and the long/short-term transformer block.
//!
//! A block refines the current frame's tokens with four pre-normalized
//! residual sublayers: self-attention, attention to the first-frame memory,
//! windowed attention to the previous frame, and a feed-forward network.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 7;

/// Single-head attention projections. All matrices are d×d and act as `y = W·x` per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub scale: f64,
}

impl AttentionParams {
    /// Random query/key/value projections and a zero output projection.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            wq: normal(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            wk: normal(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            wv: normal(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            wo: Tensor::zeros(&[d, d]),
            scale: 1.0 / (d as f64).sqrt(),
        }
    }

    /// Every projection is the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
            wo: Tensor::eye(d),
            scale: 1.0 / (d as f64).sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.dim(0)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for t in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if t.shape() != [d, d] {
                return Err(shape_err!("attention projection has shape {:?}, expected [{d}, {d}]", t.shape()));
            }
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv), ("wo", &mut self.wo)]
    }
}

pub(crate) fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Gain and bias of a per-token normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// Two-layer perceptron d → 4d → d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsttParams {
    pub self_attn: AttentionParams,
    pub long_attn: AttentionParams,
    pub short_attn: AttentionParams,
    pub ffn: FfnParams,
    /// Pre-normalization before each of the four sublayers.
    pub norms: [NormParams; 4],
}

impl LsttParams {
    /// Fresh block: every residual branch ends in a zero projection, so the block is the identity.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            self_attn: AttentionParams::init(d, rng),
            long_attn: AttentionParams::init(d, rng),
            short_attn: AttentionParams::init(d, rng),
            ffn: FfnParams {
                w1: normal(&[4 * d, d], 1.0 / (d as f64).sqrt(), rng),
                b1: Tensor::zeros(&[4 * d]),
                w2: Tensor::zeros(&[d, 4 * d]),
                b2: Tensor::zeros(&[d]),
            },
            norms: [NormParams::new(d), NormParams::new(d), NormParams::new(d), NormParams::new(d)],
        }
    }

    pub fn dim(&self) -> usize {
        self.self_attn.dim()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, a) in [("self", &self.self_attn), ("long", &self.long_attn), ("short", &self.short_attn)] {
            for (k, t) in a.tensors() {
                f(format!("{prefix}.{name}.{k}"), t);
            }
        }
        f(format!("{prefix}.ffn.w1"), &self.ffn.w1);
        f(format!("{prefix}.ffn.b1"), &self.ffn.b1);
        f(format!("{prefix}.ffn.w2"), &self.ffn.w2);
        f(format!("{prefix}.ffn.b2"), &self.ffn.b2);
        for (i, n) in self.norms.iter().enumerate() {
            f(format!("{prefix}.norm{i}.gain"), &n.gain);
            f(format!("{prefix}.norm{i}.bias"), &n.bias);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (name, a) in [("self", &mut self.self_attn), ("long", &mut self.long_attn), ("short", &mut self.short_attn)] {
            for (k, t) in a.tensors_mut() {
                f(format!("{prefix}.{name}.{k}"), t);
            }
        }
        f(format!("{prefix}.ffn.w1"), &mut self.ffn.w1);
        f(format!("{prefix}.ffn.b1"), &mut self.ffn.b1);
        f(format!("{prefix}.ffn.w2"), &mut self.ffn.w2);
        f(format!("{prefix}.ffn.b2"), &mut self.ffn.b2);
        for (i, n) in self.norms.iter_mut().enumerate() {
            f(format!("{prefix}.norm{i}.gain"), &mut n.gain);
            f(format!("{prefix}.norm{i}.bias"), &mut n.bias);
        }
    }
}

/// Key and value source tokens of one memory (m×d each).
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValue {
    pub keys: Tensor,
    pub values: Tensor,
}

impl KeyValue {
    /// Keys and values taken from the same tokens.
    pub fn shared(tokens: Tensor) -> Self {
        Self {
            keys: tokens.clone(),
            values: tokens,
        }
    }
}

/// Long-term memory from the annotated first frame plus short-term memory from the previous frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBank {
    long_term: Option<KeyValue>,
    short_term: Option<KeyValue>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes the long-term memory. Allowed once per video.
    pub fn init_long_term(&mut self, kv: KeyValue) -> Result<()> {
        if self.long_term.is_some() {
            return Err(Error::Config("long-term memory is written once per video".into()));
        }
        check_kv(&kv)?;
        self.long_term = Some(kv);
        Ok(())
    }

    /// Replaces the short-term memory in full.
    pub fn set_short_term(&mut self, kv: KeyValue) -> Result<()> {
        check_kv(&kv)?;
        self.short_term = Some(kv);
        Ok(())
    }

    pub fn long_term(&self) -> Option<&KeyValue> {
        self.long_term.as_ref()
    }

    pub fn short_term(&self) -> Option<&KeyValue> {
        self.short_term.as_ref()
    }
}

fn check_kv(kv: &KeyValue) -> Result<()> {
    if kv.keys.rank() != 2 || kv.keys.shape() != kv.values.shape() {
        return Err(shape_err!("memory keys {:?} and values {:?} must be equal m×d", kv.keys.shape(), kv.values.shape()));
    }
    if kv.keys.dim(0) == 0 {
        return Err(shape_err!("memory must hold at least one entry"));
    }
    Ok(())
}

/// `softmax(scale·Q·Kᵀ)·V` evaluated in query blocks, so memory stays O(block·m).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape_err!("attention operands must be rank 2"));
    }
    let (n, d, m) = (q.dim(0), q.dim(1), k.dim(0));
    if m == 0 {
        return Err(shape_err!("attention needs at least one key"));
    }
    if k.dim(1) != d || v.dim(0) != m {
        return Err(shape_err!("attention shapes Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()));
    }
    let dv = v.dim(1);
    const BLOCK: usize = 64;
    let mut out = vec![0.0; n * dv];
    let mut scores = vec![0.0; BLOCK * m];
    for start in (0..n).step_by(BLOCK) {
        let rows = BLOCK.min(n - start);
        let s = &mut scores[..rows * m];
        kernels::gemm(rows, d, m, &q.data()[start * d..(start + rows) * d], false, k.data(), true, 0.0, s);
        for row in s.chunks_mut(m) {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        kernels::gemm(rows, m, dv, s, false, v.data(), false, 0.0, &mut out[start * dv..(start + rows) * dv]);
    }
    Tensor::new(&[n, dv], out)
}

/// Indices of the previous-frame positions visible from `pos` under a `window×window` neighborhood.
pub fn window_neighbors(grid: (usize, usize), window: usize, pos: usize) -> Vec<usize> {
    let (h, w) = grid;
    let r = (window / 2) as isize;
    let (py, px) = ((pos / w) as isize, (pos % w) as isize);
    let mut out = Vec::new();
    for y in (py - r).max(0)..=(py + r).min(h as isize - 1) {
        for x in (px - r).max(0)..=(px + r).min(w as isize - 1) {
            out.push(y as usize * w + x as usize);
        }
    }
    out
}

pub(crate) fn window_mask(grid: (usize, usize), window: usize) -> Vec<bool> {
    let n = grid.0 * grid.1;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in window_neighbors(grid, window, i) {
            mask[i * n + j] = true;
        }
    }
    mask
}

pub(crate) struct AttnVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    scale: f64,
}

impl AttnVars {
    pub(crate) fn bind(g: &mut Graph, p: &AttentionParams) -> Self {
        Self {
            wq: g.param(&p.wq),
            wk: g.param(&p.wk),
            wv: g.param(&p.wv),
            wo: g.param(&p.wo),
            scale: p.scale,
        }
    }
}

/// Projected attention without residual: `Wo · attn(Wq·q, Wk·k, Wv·v)`.
pub(crate) fn attend(g: &mut Graph, p: &AttnVars, queries: Var, keys: Var, values: Var, mask: Option<&[bool]>) -> Var {
    let q = g.linear(queries, p.wq, None);
    let k = g.linear(keys, p.wk, None);
    let v = g.linear(values, p.wv, None);
    let s = g.matmul_nt(q, k);
    let s = g.scale(s, p.scale);
    let a = g.softmax(s, mask);
    let o = g.matmul(a, v);
    g.linear(o, p.wo, None)
}

/// Graph-side memory: key and value sources for both memories.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BankVars {
    pub long_keys: Var,
    pub long_values: Var,
    pub short_keys: Var,
    pub short_values: Var,
}

pub(crate) fn lstt_block_graph(
    g: &mut Graph,
    x: Var,
    bank: &BankVars,
    p: &LsttParams,
    grid: (usize, usize),
    window: usize,
) -> Var {
    let norm = |g: &mut Graph, x: Var, i: usize| {
        let gain = g.param(&p.norms[i].gain);
        let bias = g.param(&p.norms[i].bias);
        g.layer_norm(x, gain, bias)
    };
    let h = norm(g, x, 0);
    let sa = AttnVars::bind(g, &p.self_attn);
    let y = attend(g, &sa, h, h, h, None);
    let x = g.add(x, y);

    let h = norm(g, x, 1);
    let la = AttnVars::bind(g, &p.long_attn);
    let y = attend(g, &la, h, bank.long_keys, bank.long_values, None);
    let x = g.add(x, y);

    let h = norm(g, x, 2);
    let st = AttnVars::bind(g, &p.short_attn);
    let mask = window_mask(grid, window);
    let y = attend(g, &st, h, bank.short_keys, bank.short_values, Some(&mask));
    let x = g.add(x, y);

    let h = norm(g, x, 3);
    let (w1, b1, w2, b2) = (g.param(&p.ffn.w1), g.param(&p.ffn.b1), g.param(&p.ffn.w2), g.param(&p.ffn.b2));
    let z = g.linear(h, w1, Some(b1));
    let z = g.gelu(z);
    let y = g.linear(z, w2, Some(b2));
    g.add(x, y)
}

fn check_tokens(t: &Tensor, d: usize, what: &str) -> Result<()> {
    if t.rank() != 2 || t.dim(1) != d {
        return Err(shape_err!("{what} must be n×{d}, got {:?}", t.shape()));
    }
    Ok(())
}

/// Attention of the frame tokens against the long-term memory, output-projected, without residual.
pub fn long_term_attend(frame_tokens: &Tensor, bank: &MemoryBank, params: &AttentionParams) -> Result<Tensor> {
    params.validate()?;
    let lt = bank
        .long_term()
        .ok_or_else(|| Error::Uninitialized("long-term memory is empty".into()))?;
    let d = params.dim();
    check_tokens(frame_tokens, d, "frame tokens")?;
    check_tokens(&lt.keys, d, "long-term keys")?;
    let mut g = Graph::new();
    let p = AttnVars::bind(&mut g, params);
    let (q, k, v) = (g.constant(frame_tokens.clone()), g.constant(lt.keys.clone()), g.constant(lt.values.clone()));
    let out = attend(&mut g, &p, q, k, v, None);
    Ok(g.value(out).clone())
}

/// Windowed attention of each grid position to its neighborhood in the previous frame.
pub fn short_term_attend(
    frame_tokens: &Tensor,
    prev: &KeyValue,
    grid: (usize, usize),
    params: &AttentionParams,
    window: usize,
) -> Result<Tensor> {
    params.validate()?;
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("window must be odd and positive, got {window}")));
    }
    let d = params.dim();
    let n = grid.0 * grid.1;
    check_tokens(frame_tokens, d, "frame tokens")?;
    check_kv(prev)?;
    check_tokens(&prev.keys, d, "previous-frame tokens")?;
    if frame_tokens.dim(0) != n || prev.keys.dim(0) != n {
        return Err(shape_err!(
            "grid {}×{} needs {n} tokens; got {} current and {} previous",
            grid.0,
            grid.1,
            frame_tokens.dim(0),
            prev.keys.dim(0)
        ));
    }
    let mut g = Graph::new();
    let p = AttnVars::bind(&mut g, params);
    let (q, k, v) = (g.constant(frame_tokens.clone()), g.constant(prev.keys.clone()), g.constant(prev.values.clone()));
    let mask = window_mask(grid, window);
    let out = attend(&mut g, &p, q, k, v, Some(&mask));
    Ok(g.value(out).clone())
}

/// One long/short-term transformer block over the tokens of an H×W grid.
pub fn lstt_block(
    frame_tokens: &Tensor,
    bank: &MemoryBank,
    params: &LsttParams,
    grid: (usize, usize),
    window: usize,
) -> Result<Tensor> {
    let d = params.dim();
    for a in [&params.self_attn, &params.long_attn, &params.short_attn] {
        a.validate()?;
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("window must be odd and positive, got {window}")));
    }
    check_tokens(frame_tokens, d, "frame tokens")?;
    if frame_tokens.dim(0) != grid.0 * grid.1 {
        return Err(shape_err!("frame has {} tokens for a {}×{} grid", frame_tokens.dim(0), grid.0, grid.1));
    }
    let lt = bank
        .long_term()
        .ok_or_else(|| Error::Uninitialized("long-term memory is empty".into()))?;
    let st = bank
        .short_term()
        .ok_or_else(|| Error::Uninitialized("short-term memory is empty".into()))?;
    check_tokens(&lt.keys, d, "long-term keys")?;
    check_tokens(&st.keys, d, "short-term keys")?;
    if st.keys.dim(0) != frame_tokens.dim(0) {
        return Err(shape_err!("short-term memory must cover the same grid as the frame"));
    }
    let mut g = Graph::new();
    let x = g.constant(frame_tokens.clone());
    let bank = BankVars {
        long_keys: g.constant(lt.keys.clone()),
        long_values: g.constant(lt.values.clone()),
        short_keys: g.constant(st.keys.clone()),
        short_values: g.constant(st.values.clone()),
    };
    let out = lstt_block_graph(&mut g, x, &bank, params, grid, window);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut r = rng();
        let q = normal(&[5, 3], 1.0, &mut r);
        let k = normal(&[1, 3], 1.0, &mut r);
        let v = Tensor::from_rows(&[vec![0.5, -2.0, 7.0]]).unwrap();
        let out = attention(&q, &k, &v, 0.7).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Tensor::zeros(&[2, 2]);
        let k = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 0.0]]).unwrap();
        let out = attention(&q, &k, &v, 1.0).unwrap();
        for i in 0..2 {
            assert!((out.row(i)[0] - 1.0).abs() < 1e-15);
            assert!((out.row(i)[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logits_zero_and_ln3_weight_one_to_three() {
        // brute force: weights e^0/(e^0+e^ln3) and e^ln3/(...)
        let l3 = 3f64.ln();
        let q = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0], vec![l3]]).unwrap();
        let v = Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 8.0]]).unwrap();
        let out = attention(&q, &k, &v, 1.0).unwrap();
        let (w1, w2) = (1.0 / (1.0 + l3.exp()), l3.exp() / (1.0 + l3.exp()));
        assert!((out.row(0)[0] - 4.0 * w1).abs() < 1e-12);
        assert!((out.row(0)[1] - 8.0 * w2).abs() < 1e-12);
        assert!((w1 - 0.25).abs() < 1e-12 && (w2 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_errors() {
        let q = Tensor::zeros(&[2, 2]);
        assert!(attention(&q, &Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2]), 1.0).is_err());
        assert!(attention(&q, &Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3, 2]), 1.0).is_err());
    }

    #[test]
    fn long_term_single_entry_broadcasts() {
        let mut r = rng();
        let mut p = AttentionParams::init(3, &mut r);
        p.wo = normal(&[3, 3], 1.0, &mut r);
        let mut bank = MemoryBank::new();
        let v = Tensor::from_rows(&[vec![1.0, -1.0, 2.0]]).unwrap();
        bank.init_long_term(KeyValue::shared(v.clone())).unwrap();
        let frame = normal(&[4, 3], 1.0, &mut r);
        let out = long_term_attend(&frame, &bank, &p).unwrap();
        let wvv: Vec<f64> = (0..3).map(|i| p.wv.row(i).iter().zip(v.row(0)).map(|(a, b)| a * b).sum()).collect();
        let expect: Vec<f64> = (0..3).map(|i| p.wo.row(i).iter().zip(&wvv).map(|(a, b)| a * b).sum()).collect();
        for n in 0..4 {
            for i in 0..3 {
                assert!((out.row(n)[i] - expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn long_term_zero_output_projection() {
        let mut r = rng();
        let p = AttentionParams::init(3, &mut r);
        let mut bank = MemoryBank::new();
        bank.init_long_term(KeyValue::shared(normal(&[5, 3], 1.0, &mut r))).unwrap();
        let out = long_term_attend(&normal(&[2, 3], 1.0, &mut r), &bank, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn long_term_identity_projections_match_attention() {
        let mut r = rng();
        let p = AttentionParams::identity(4);
        let mem = normal(&[2, 4], 1.0, &mut r);
        let mut bank = MemoryBank::new();
        bank.init_long_term(KeyValue::shared(mem.clone())).unwrap();
        let frame = normal(&[3, 4], 1.0, &mut r);
        let a = long_term_attend(&frame, &bank, &p).unwrap();
        let b = attention(&frame, &mem, &mem, p.scale).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn long_term_requires_initialized_bank() {
        let p = AttentionParams::identity(2);
        let err = long_term_attend(&Tensor::zeros(&[1, 2]), &MemoryBank::new(), &p).unwrap_err();
        assert!(matches!(err, Error::Uninitialized(_)));
    }

    #[test]
    fn long_term_memory_is_write_once() {
        let mut bank = MemoryBank::new();
        bank.init_long_term(KeyValue::shared(Tensor::zeros(&[1, 2]))).unwrap();
        assert!(bank.init_long_term(KeyValue::shared(Tensor::zeros(&[1, 2]))).is_err());
    }

    #[test]
    fn corner_of_3x3_sees_four_keys() {
        // enumerate the neighborhood directly
        let mut expect = vec![];
        for y in 0..3i32 {
            for x in 0..3i32 {
                if (y - 0).abs() <= 1 && (x - 0).abs() <= 1 {
                    expect.push((y * 3 + x) as usize);
                }
            }
        }
        assert_eq!(window_neighbors((3, 3), 3, 0), expect);
        assert_eq!(expect.len(), 4);
        assert_eq!(window_neighbors((3, 3), 3, 4).len(), 9);
    }

    #[test]
    fn covering_window_equals_full_attention() {
        let mut r = rng();
        let p = AttentionParams::identity(3);
        let (h, w) = (3, 4);
        let frame = normal(&[h * w, 3], 1.0, &mut r);
        let prev = normal(&[h * w, 3], 1.0, &mut r);
        let out = short_term_attend(&frame, &KeyValue::shared(prev.clone()), (h, w), &p, 2 * 4 - 1).unwrap();
        let full = attention(&frame, &prev, &prev, p.scale).unwrap();
        assert!(out.max_abs_diff(&full) < 1e-6);
    }

    #[test]
    fn singleton_window_copies_projected_previous_token() {
        let mut r = rng();
        let mut p = AttentionParams::init(2, &mut r);
        p.wo = normal(&[2, 2], 1.0, &mut r);
        let frame = normal(&[4, 2], 1.0, &mut r);
        let prev = normal(&[4, 2], 1.0, &mut r);
        let out = short_term_attend(&frame, &KeyValue::shared(prev.clone()), (2, 2), &p, 1).unwrap();
        for n in 0..4 {
            let wv: Vec<f64> = (0..2).map(|i| p.wv.row(i).iter().zip(prev.row(n)).map(|(a, b)| a * b).sum()).collect();
            for i in 0..2 {
                let e: f64 = p.wo.row(i).iter().zip(&wv).map(|(a, b)| a * b).sum();
                assert!((out.row(n)[i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_term_rejects_grid_mismatch_and_even_window() {
        let p = AttentionParams::identity(2);
        let kv = KeyValue::shared(Tensor::zeros(&[4, 2]));
        assert!(short_term_attend(&Tensor::zeros(&[6, 2]), &kv, (2, 3), &p, 3).is_err());
        assert!(short_term_attend(&Tensor::zeros(&[4, 2]), &kv, (2, 2), &p, 2).is_err());
    }

    #[test]
    fn fresh_block_is_identity_and_first_frame_is_finite() {
        let mut r = rng();
        let p = LsttParams::init(4, &mut r);
        let frame = normal(&[6, 4], 1.0, &mut r);
        let mut bank = MemoryBank::new();
        bank.init_long_term(KeyValue::shared(frame.clone())).unwrap();
        bank.set_short_term(KeyValue::shared(frame.clone())).unwrap();
        let out = lstt_block(&frame, &bank, &p, (2, 3), DEFAULT_WINDOW).unwrap();
        assert_eq!(out, frame);
    }
}
