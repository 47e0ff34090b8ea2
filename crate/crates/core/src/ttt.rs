//! Test-time-training layers.
//!
//! The hidden state of a TTT layer is itself a small model (a linear map or a
//! two-layer perceptron). Each incoming token drives one gradient step of that
//! model on a masked-reconstruction loss, and the token's output is the updated
//! model applied to the clean token. Cost is linear in sequence length.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{gelu, gelu_grad};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TttVariant {
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub variant: TttVariant,
    /// Token dimension.
    pub d: usize,
    /// Hidden width of the MLP variant.
    pub h: usize,
    /// Inner learning rate.
    pub eta: f64,
    /// Fraction of coordinates zeroed in the reconstruction task.
    pub mask_ratio: f64,
    pub init_scale: f64,
}

impl TttConfig {
    pub fn linear(d: usize) -> Self {
        Self {
            variant: TttVariant::Linear,
            d,
            h: 4 * d,
            eta: 0.1,
            mask_ratio: 0.25,
            init_scale: 1.0,
        }
    }

    pub fn mlp(d: usize) -> Self {
        Self {
            variant: TttVariant::Mlp,
            ..Self::linear(d)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Config("TTT dimension must be at least 1".into()));
        }
        if self.variant == TttVariant::Mlp && self.h < 1 {
            return Err(Error::Config("TTT-MLP hidden width must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("inner learning rate must be positive, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio must lie in [0, 1], got {}", self.mask_ratio)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init scale must be a non-negative finite number".into()));
        }
        Ok(())
    }
}

/// Parameters of the inner model. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TttParams {
    /// `f(x) = w·x + b`, `w` is d×d.
    Linear { w: Tensor, b: Tensor },
    /// `f(x) = w2·gelu(w1·x + b1) + b2`, `w1` is h×d, `w2` is d×h.
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

impl TttParams {
    pub fn zeros(variant: TttVariant, d: usize, h: usize) -> Self {
        match variant {
            TttVariant::Linear => Self::Linear {
                w: Tensor::zeros(&[d, d]),
                b: Tensor::zeros(&[d]),
            },
            TttVariant::Mlp => Self::Mlp {
                w1: Tensor::zeros(&[h, d]),
                b1: Tensor::zeros(&[h]),
                w2: Tensor::zeros(&[d, h]),
                b2: Tensor::zeros(&[d]),
            },
        }
    }

    pub fn variant(&self) -> TttVariant {
        match self {
            Self::Linear { .. } => TttVariant::Linear,
            Self::Mlp { .. } => TttVariant::Mlp,
        }
    }

    /// Token dimension.
    pub fn dim(&self) -> usize {
        match self {
            Self::Linear { b, .. } => b.len(),
            Self::Mlp { b2, .. } => b2.len(),
        }
    }

    pub fn hidden(&self) -> Option<usize> {
        match self {
            Self::Linear { .. } => None,
            Self::Mlp { b1, .. } => Some(b1.len()),
        }
    }

    /// Parameter tensors in a fixed order: `[w, b]` or `[w1, b1, w2, b2]`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Self::Linear { w, b } => vec![w, b],
            Self::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Linear { w, b } => vec![w, b],
            Self::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn same_shape(&self, other: &TttParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Element-wise `self + (to - from)`.
    pub fn shifted(&self, from: &TttParams, to: &TttParams) -> TttParams {
        let mut out = self.clone();
        for ((o, f), t) in out.tensors_mut().into_iter().zip(from.tensors()).zip(to.tensors()) {
            for ((o, f), t) in o.data_mut().iter_mut().zip(f.data()).zip(t.data()) {
                *o += t - f;
            }
        }
        out
    }

    /// Writes the model output for token `x` into `out`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Linear { w, b } => affine(w, b, x, out),
            Self::Mlp { w1, b1, w2, b2 } => {
                let mut z = vec![0.0; b1.len()];
                affine(w1, b1, x, &mut z);
                for v in z.iter_mut() {
                    *v = gelu(*v);
                }
                affine(w2, b2, &z, out);
            }
        }
    }

    /// Vector-Jacobian product of [`TttParams::forward_into`] at `x` with cotangent `gy`.
    ///
    /// Adds `∂⟨gy, f(x)⟩/∂x` to `dx` and the parameter cotangents to `dparams`.
    pub fn forward_vjp(&self, x: &[f64], gy: &[f64], dx: Option<&mut [f64]>, dparams: Option<&mut TttParams>) {
        match self {
            Self::Linear { w, .. } => {
                let d = x.len();
                if let Some(dx) = dx {
                    for (i, &g) in gy.iter().enumerate() {
                        let row = w.row(i);
                        for j in 0..d {
                            dx[j] += row[j] * g;
                        }
                    }
                }
                if let Some(TttParams::Linear { w: dw, b: db }) = dparams {
                    outer_add(dw, 1.0, gy, x);
                    for (b, g) in db.data_mut().iter_mut().zip(gy) {
                        *b += g;
                    }
                }
            }
            Self::Mlp { w1, b1, w2, .. } => {
                let h = b1.len();
                let mut z = vec![0.0; h];
                affine(w1, b1, x, &mut z);
                let a: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
                let mut da = vec![0.0; h];
                for (i, &g) in gy.iter().enumerate() {
                    for (k, &wv) in w2.row(i).iter().enumerate() {
                        da[k] += wv * g;
                    }
                }
                let dz: Vec<f64> = da.iter().zip(&z).map(|(g, &zv)| g * gelu_grad(zv)).collect();
                if let Some(dx) = dx {
                    for (k, &g) in dz.iter().enumerate() {
                        for (j, &wv) in w1.row(k).iter().enumerate() {
                            dx[j] += wv * g;
                        }
                    }
                }
                if let Some(TttParams::Mlp { w1: dw1, b1: db1, w2: dw2, b2: db2 }) = dparams {
                    outer_add(dw2, 1.0, gy, &a);
                    for (b, g) in db2.data_mut().iter_mut().zip(gy) {
                        *b += g;
                    }
                    outer_add(dw1, 1.0, &dz, x);
                    for (b, g) in db1.data_mut().iter_mut().zip(&dz) {
                        *b += g;
                    }
                }
            }
        }
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (wv, xv) in w.row(i).iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc + b.data()[i];
    }
}

/// `m += alpha * u vᵀ`
fn outer_add(m: &mut Tensor, alpha: f64, u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, &ui) in u.iter().enumerate() {
        let s = alpha * ui;
        let row = &mut m.data_mut()[i * cols..(i + 1) * cols];
        for (r, &vj) in row.iter_mut().zip(v) {
            *r += s * vj;
        }
    }
}

/// Hidden state of a TTT layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TttState {
    pub params: TttParams,
    /// Number of inner updates applied since initialization.
    pub step_count: u64,
}

impl TttState {
    pub fn new(params: TttParams) -> Self {
        Self { params, step_count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }
}

/// Loss value and parameter gradient of the reconstruction task.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: TttParams,
}

pub fn ttt_init<R: Rng + ?Sized>(config: &TttConfig, rng: &mut R) -> Result<TttState> {
    config.validate()?;
    let mut params = TttParams::zeros(config.variant, config.d, config.h);
    if config.init_scale > 0.0 {
        let std = config.init_scale / (config.d as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = normal.sample(rng);
            }
        }
    }
    Ok(TttState::new(params))
}

/// Zeroes `round(mask_ratio · d)` coordinates chosen uniformly without replacement.
///
/// Returns the corrupted token and the sorted list of zeroed coordinates.
pub fn corrupt_token<R: Rng + ?Sized>(x: &[f64], mask_ratio: f64, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let mut out = x.to_vec();
    let masked = corrupt_in_place(&mut out, mask_ratio, rng);
    (out, masked)
}

fn corrupt_in_place<R: Rng + ?Sized>(x: &mut [f64], mask_ratio: f64, rng: &mut R) -> Vec<usize> {
    let d = x.len();
    let count = ((mask_ratio * d as f64).round() as usize).min(d);
    let mut masked = index::sample(rng, d, count).into_vec();
    masked.sort_unstable();
    for &i in &masked {
        x[i] = 0.0;
    }
    masked
}

fn check_dim(state: &TttParams, x: &[f64]) -> Result<()> {
    if x.len() != state.dim() {
        return Err(shape_err!("token has dimension {} but the TTT state expects {}", x.len(), state.dim()));
    }
    Ok(())
}

/// Output rule: the inner model applied to `x`.
pub fn ttt_apply(state: &TttState, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(&state.params, x)?;
    let mut out = vec![0.0; x.len()];
    state.params.forward_into(x, &mut out);
    Ok(out)
}

/// Mean squared reconstruction error of `x` from `x_tilde` and its exact gradient.
pub fn ttt_loss_grad(state: &TttState, x: &[f64], x_tilde: &[f64]) -> Result<LossGrad> {
    check_dim(&state.params, x)?;
    check_dim(&state.params, x_tilde)?;
    let p = &state.params;
    let mut grad = TttParams::zeros(p.variant(), p.dim(), p.hidden().unwrap_or(0));
    let loss = loss_grad_into(p, x, x_tilde, &mut grad);
    Ok(LossGrad { loss, grad })
}

/// Overwrites `grad` (shaped like `p`) with the reconstruction gradient; returns the loss.
fn loss_grad_into(p: &TttParams, x: &[f64], x_tilde: &[f64], grad: &mut TttParams) -> f64 {
    let d = x.len();
    let mut y = vec![0.0; d];
    p.forward_into(x_tilde, &mut y);
    let mut loss = 0.0;
    let mut dy = vec![0.0; d];
    for i in 0..d {
        let r = y[i] - x[i];
        loss += r * r;
        dy[i] = 2.0 / d as f64 * r;
    }
    for t in grad.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    p.forward_vjp(x_tilde, &dy, None, Some(grad));
    loss / d as f64
}

/// One gradient-descent step `p ← p − eta·∇p`, returning a new state.
pub fn ttt_step(state: &TttState, lg: &LossGrad, eta: f64) -> Result<TttState> {
    let mut next = state.clone();
    step_in_place(&mut next, &lg.grad, eta)?;
    Ok(next)
}

fn step_in_place(state: &mut TttState, grad: &TttParams, eta: f64) -> Result<()> {
    if !state.params.same_shape(grad) {
        return Err(shape_err!("gradient shapes do not match the TTT state"));
    }
    if !(eta > 0.0) {
        return Err(Error::Config(format!("inner learning rate must be positive, got {eta}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("TTT gradient".into()));
    }
    for (p, g) in state.params.tensors_mut().into_iter().zip(grad.tensors()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= eta * gv;
        }
    }
    if !state.params.is_finite() {
        return Err(Error::NonFinite("TTT state after update".into()));
    }
    state.step_count += 1;
    Ok(())
}

/// Runs the layer over `tokens` (T×d) in order: corrupt, update, then predict on the clean token.
///
/// Returns the T×d outputs and the final state.
pub fn ttt_scan<R: Rng + ?Sized>(
    state0: &TttState,
    tokens: &Tensor,
    config: &TttConfig,
    rng: &mut R,
) -> Result<(Tensor, TttState)> {
    let (out, state, _) = scan_impl(state0, tokens, config, rng, false)?;
    Ok((out, state))
}

/// Like [`ttt_scan`], also returning the post-update parameters used for every output.
pub fn ttt_scan_recorded<R: Rng + ?Sized>(
    state0: &TttState,
    tokens: &Tensor,
    config: &TttConfig,
    rng: &mut R,
) -> Result<(Tensor, TttState, Vec<TttParams>)> {
    scan_impl(state0, tokens, config, rng, true)
}

fn scan_impl<R: Rng + ?Sized>(
    state0: &TttState,
    tokens: &Tensor,
    config: &TttConfig,
    rng: &mut R,
    record: bool,
) -> Result<(Tensor, TttState, Vec<TttParams>)> {
    if tokens.rank() != 2 {
        return Err(shape_err!("token sequence must be rank 2, got {:?}", tokens.shape()));
    }
    let (t_len, d) = (tokens.dim(0), tokens.dim(1));
    if d != state0.dim() {
        return Err(shape_err!("tokens have dimension {d} but the TTT state expects {}", state0.dim()));
    }
    let mut state = state0.clone();
    let p = &state0.params;
    let mut grad = TttParams::zeros(p.variant(), d, p.hidden().unwrap_or(0));
    let mut out = Tensor::zeros(&[t_len, d]);
    let mut snapshots = Vec::with_capacity(if record { t_len } else { 0 });
    let mut x_tilde = vec![0.0; d];
    for t in 0..t_len {
        let x = tokens.row(t);
        x_tilde.copy_from_slice(x);
        corrupt_in_place(&mut x_tilde, config.mask_ratio, rng);
        loss_grad_into(&state.params, x, &x_tilde, &mut grad);
        step_in_place(&mut state, &grad, config.eta)?;
        state.params.forward_into(x, out.row_mut(t));
        if record {
            snapshots.push(state.params.clone());
        }
    }
    Ok((out, state, snapshots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_state(w: &[Vec<f64>], b: &[f64]) -> TttState {
        TttState::new(TttParams::Linear {
            w: Tensor::from_rows(w).unwrap(),
            b: Tensor::new(&[b.len()], b.to_vec()).unwrap(),
        })
    }

    #[test]
    fn zero_scale_init_is_exactly_zero() {
        let mut cfg = TttConfig::linear(2);
        cfg.init_scale = 0.0;
        let s = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s, linear_state(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0.0, 0.0]));
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn mlp_init_shapes() {
        let mut cfg = TttConfig::mlp(4);
        cfg.h = 8;
        let s = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let TttParams::Mlp { w1, b1, w2, b2 } = &s.params else { panic!("expected MLP") };
        assert_eq!(w1.shape(), &[8, 4]);
        assert_eq!(w2.shape(), &[4, 8]);
        assert_eq!(b1.shape(), &[8]);
        assert_eq!(b2.shape(), &[4]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = TttConfig::mlp(3);
        let a = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn init_rejects_bad_dimensions() {
        let mut cfg = TttConfig::linear(0);
        assert!(ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        cfg = TttConfig::mlp(3);
        cfg.h = 0;
        assert!(ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn corrupt_degenerate_ratios() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xt, m) = corrupt_token(&x, 0.0, &mut rng);
        assert_eq!(xt, x.to_vec());
        assert!(m.is_empty());
        let (xt, m) = corrupt_token(&x, 1.0, &mut rng);
        assert_eq!(xt, vec![0.0; 4]);
        assert_eq!(m, vec![0, 1, 2, 3]);
    }

    #[test]
    fn corrupt_half_masks_exactly_two_of_four() {
        let x = [1.0, 2.0, 3.0, 4.0];
        for seed in 0..100 {
            let (xt, m) = corrupt_token(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(m.len(), 2);
            assert_eq!(xt.iter().filter(|&&v| v == 0.0).count(), 2);
            for i in 0..4 {
                if !m.contains(&i) {
                    assert_eq!(xt[i], x[i]);
                }
            }
        }
    }

    #[test]
    fn apply_examples() {
        let s = linear_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, -0.5]);
        assert_eq!(ttt_apply(&s, &[1.0, 2.0]).unwrap(), vec![1.5, 1.5]);
        let z = TttState::new(TttParams::zeros(TttVariant::Mlp, 3, 12));
        assert_eq!(ttt_apply(&z, &[0.3, -2.0, 9.0]).unwrap(), vec![0.0; 3]);
        assert!(ttt_apply(&s, &[1.0]).is_err());
    }

    #[test]
    fn loss_grad_hand_example() {
        let s = linear_state(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0.0, 0.0]);
        let lg = ttt_loss_grad(&s, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(lg.loss, 2.5);
        let TttParams::Linear { w, b } = &lg.grad else { unreachable!() };
        assert_eq!(w.data(), &[-1.0, -2.0, -2.0, -4.0]);
        assert_eq!(b.data(), &[-1.0, -2.0]);
    }

    #[test]
    fn loss_grad_with_zero_input() {
        let s = linear_state(&[vec![0.3, -1.0], vec![2.0, 0.5]], &[0.25, -0.75]);
        let x = [1.0, 2.0];
        let lg = ttt_loss_grad(&s, &x, &[0.0, 0.0]).unwrap();
        let TttParams::Linear { w, b } = &lg.grad else { unreachable!() };
        assert!(w.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.data(), &[(0.25 - 1.0), (-0.75 - 2.0)]);
    }

    #[test]
    fn perfect_reconstruction_is_a_fixpoint() {
        let s = linear_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]);
        let lg = ttt_loss_grad(&s, &[3.0, -1.0], &[3.0, -1.0]).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let next = ttt_step(&s, &lg, 0.5).unwrap();
        assert_eq!(next.params, s.params);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn step_hand_example() {
        let s = linear_state(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0.0, 0.0]);
        let lg = ttt_loss_grad(&s, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        let next = ttt_step(&s, &lg, 0.1).unwrap();
        let TttParams::Linear { w, b } = &next.params else { unreachable!() };
        assert_eq!(w.data(), &[0.1, 0.2, 0.2, 0.4]);
        assert_eq!(b.data(), &[0.1, 0.2]);
        // input untouched
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn step_rejects_bad_gradients() {
        let s = linear_state(&[vec![0.0]], &[0.0]);
        let bad = LossGrad {
            loss: 0.0,
            grad: TttParams::Linear {
                w: Tensor::new(&[1, 1], vec![f64::NAN]).unwrap(),
                b: Tensor::zeros(&[1]),
            },
        };
        assert!(matches!(ttt_step(&s, &bad, 0.1), Err(Error::NonFinite(_))));
        let wrong = LossGrad {
            loss: 0.0,
            grad: TttParams::zeros(TttVariant::Linear, 2, 0),
        };
        assert!(matches!(ttt_step(&s, &wrong, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_scan_returns_initial_state() {
        let cfg = TttConfig::linear(3);
        let s0 = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (out, s) = ttt_scan(&s0, &Tensor::zeros(&[0, 3]), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.dim(0), 0);
        assert_eq!(s, s0);
    }

    #[test]
    fn scan_rejects_dimension_mismatch() {
        let cfg = TttConfig::linear(3);
        let s0 = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(ttt_scan(&s0, &Tensor::zeros(&[4, 2]), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn degenerate_scalar_layer() {
        let mut cfg = TttConfig::linear(1);
        cfg.mask_ratio = 0.0;
        cfg.init_scale = 0.0;
        let s0 = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let toks = Tensor::new(&[2, 1], vec![2.0, 2.0]).unwrap();
        let (out, s) = ttt_scan(&s0, &toks, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.step_count, 2);
        assert!(out.is_finite());
    }
}
