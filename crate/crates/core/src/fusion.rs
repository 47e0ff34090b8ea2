//! Placement of TTT layers on encoder stages and fusion of their output with backbone features.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::ttt::{ttt_scan_recorded, TttConfig, TttParams, TttState, TttVariant};

/// A C×H×W feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape().contains(&0) {
            return Err(shape_err!("feature map must be C×H×W with positive sizes, got {:?}", t.shape()));
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Raster-order tokens: position `y·W + x` holds the C-channel vector at (y, x).
pub fn featmap_to_tokens(fm: &FeatureMap) -> Tensor {
    let (c, hw) = (fm.channels(), fm.height() * fm.width());
    fm.0.clone().reshape(&[c, hw]).unwrap().transpose()
}

pub fn tokens_to_featmap(tokens: &Tensor, h: usize, w: usize) -> Result<FeatureMap> {
    if tokens.rank() != 2 || tokens.dim(0) != h * w {
        return Err(shape_err!("{:?} tokens cannot fill a {h}×{w} grid", tokens.shape()));
    }
    let c = tokens.dim(1);
    FeatureMap::new(tokens.transpose().reshape(&[c, h, w])?)
}

pub fn fuse_add(backbone: &FeatureMap, ttt_out: &FeatureMap) -> Result<FeatureMap> {
    if backbone.0.shape() != ttt_out.0.shape() {
        return Err(shape_err!("cannot add {:?} and {:?}", backbone.0.shape(), ttt_out.0.shape()));
    }
    let mut out = backbone.0.clone();
    out.axpy(1.0, &ttt_out.0);
    Ok(FeatureMap(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stage1, Stage::Stage2, Stage::Stage3];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Downsampling factor relative to the input frame.
    pub fn stride(self) -> usize {
        [4, 8, 16][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Backbone plus TTT output.
    AddSerial,
    /// Channel concatenation followed by a learned projection back to C channels.
    ConcatParallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// One 1×1 convolution 2C → C.
    StandardConv,
    /// 3×3 depthwise convolution over 2C channels, then 1×1 pointwise 2C → C.
    DepthwiseSeparableConv,
}

/// Inner-model settings shared by every placed stage; the token dimension follows the stage width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TttSettings {
    pub variant: TttVariant,
    /// MLP hidden width as a multiple of the token dimension.
    pub hidden_mult: usize,
    pub eta: f64,
    pub mask_ratio: f64,
    pub init_scale: f64,
}

impl Default for TttSettings {
    fn default() -> Self {
        Self {
            variant: TttVariant::Linear,
            hidden_mult: 4,
            eta: 0.1,
            mask_ratio: 0.25,
            init_scale: 1.0,
        }
    }
}

impl TttSettings {
    pub fn for_dim(&self, d: usize) -> TttConfig {
        TttConfig {
            variant: self.variant,
            d,
            h: self.hidden_mult * d,
            eta: self.eta,
            mask_ratio: self.mask_ratio,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Stages that receive a TTT branch; empty disables TTT.
    pub placement: BTreeSet<Stage>,
    pub mode: FusionMode,
    /// Ignored under [`FusionMode::AddSerial`].
    pub projection: ProjectionKind,
    pub ttt: TttSettings,
}

impl FusionConfig {
    pub fn disabled() -> Self {
        Self {
            placement: BTreeSet::new(),
            mode: FusionMode::AddSerial,
            projection: ProjectionKind::StandardConv,
            ttt: TttSettings::default(),
        }
    }

    pub fn is_placed(&self, s: Stage) -> bool {
        self.placement.contains(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.ttt.for_dim(1).validate()
    }
}

/// Weights of the concatenation projection 2C → C.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub kind: ProjectionKind,
    /// 2C×3×3 depthwise kernels (depthwise-separable only).
    pub depthwise: Option<Tensor>,
    /// C×2C×1×1 pointwise kernel.
    pub pointwise: Tensor,
    pub bias: Tensor,
}

impl ProjectionParams {
    /// Initialized so that the projection computes `backbone + ttt_out`.
    pub fn init(kind: ProjectionKind, c: usize) -> Self {
        let mut pw = Tensor::zeros(&[c, 2 * c, 1, 1]);
        for i in 0..c {
            pw.data_mut()[i * 2 * c + i] = 1.0;
            pw.data_mut()[i * 2 * c + c + i] = 1.0;
        }
        let depthwise = (kind == ProjectionKind::DepthwiseSeparableConv).then(|| {
            let mut dw = Tensor::zeros(&[2 * c, 3, 3]);
            for ch in 0..2 * c {
                dw.data_mut()[ch * 9 + 4] = 1.0;
            }
            dw
        });
        Self {
            kind,
            depthwise,
            pointwise: pw,
            bias: Tensor::zeros(&[c]),
        }
    }

    /// Pointwise projection from a C×2C matrix.
    pub fn standard(matrix: &Tensor) -> Result<Self> {
        let (c, c2) = (matrix.dim(0), matrix.dim(1));
        Ok(Self {
            kind: ProjectionKind::StandardConv,
            depthwise: None,
            pointwise: matrix.clone().reshape(&[c, c2, 1, 1])?,
            bias: Tensor::zeros(&[c]),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.dim(0)
    }

    /// Number of multiplicative weights (biases excluded).
    pub fn multiply_weights(&self) -> usize {
        self.pointwise.len() + self.depthwise.as_ref().map_or(0, Tensor::len)
    }

    fn validate(&self, c: usize) -> Result<()> {
        if self.pointwise.shape() != [c, 2 * c, 1, 1] || self.bias.shape() != [c] {
            return Err(shape_err!("projection for {c} channels must be {c}×{}×1×1, got {:?}", 2 * c, self.pointwise.shape()));
        }
        match (self.kind, &self.depthwise) {
            (ProjectionKind::StandardConv, None) => Ok(()),
            (ProjectionKind::DepthwiseSeparableConv, Some(dw)) if dw.shape() == [2 * c, 3, 3] => Ok(()),
            _ => Err(Error::Config("depthwise kernels do not match the projection kind".into())),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(dw) = &self.depthwise {
            f(format!("{prefix}.depthwise"), dw);
        }
        f(format!("{prefix}.pointwise"), &self.pointwise);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(dw) = &mut self.depthwise {
            f(format!("{prefix}.depthwise"), dw);
        }
        f(format!("{prefix}.pointwise"), &mut self.pointwise);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

pub(crate) fn project_graph(g: &mut Graph, backbone: Var, ttt_out: Var, p: &ProjectionParams) -> Var {
    let cat = g.concat0(backbone, ttt_out);
    let cat = match &p.depthwise {
        Some(dw) => {
            let w = g.param(dw);
            g.depthwise(cat, w)
        }
        None => cat,
    };
    let (pw, b) = (g.param(&p.pointwise), g.param(&p.bias));
    g.conv2d(cat, pw, Some(b), 1, 0)
}

/// Channel-concatenates both maps and projects back to C channels.
pub fn fuse_concat(backbone: &FeatureMap, ttt_out: &FeatureMap, proj: &ProjectionParams) -> Result<FeatureMap> {
    if backbone.0.shape() != ttt_out.0.shape() {
        return Err(shape_err!("cannot fuse {:?} with {:?}", backbone.0.shape(), ttt_out.0.shape()));
    }
    proj.validate(backbone.channels())?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(backbone.0.clone()), g.constant(ttt_out.0.clone()));
    let out = project_graph(&mut g, a, b, proj);
    FeatureMap::new(g.value(out).clone())
}

/// Per-token TTT parameters recorded during a live run, replayed for finite-difference checks.
#[derive(Clone, Debug, Default)]
pub struct TttTrace {
    entries: Vec<TraceEntry>,
    cursor: usize,
}

#[derive(Clone, Debug)]
struct TraceEntry {
    snapshots: Rc<[TttParams]>,
    /// Initial parameters the snapshots were computed from, when gradients flow to them.
    init_ref: Option<TttParams>,
}

impl TttTrace {
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

/// How TTT branches obtain their per-token parameters.
pub(crate) enum TttDriver<'a, R: Rng + ?Sized> {
    /// Run the inner updates, optionally recording them.
    Live { rng: &'a mut R, trace: Option<&'a mut TttTrace> },
    /// Reuse recorded parameters; the inner updates are held fixed.
    Replay(&'a mut TttTrace),
}

/// Graph-side placement. `states` holds the running state of each stage (indexed by stage);
/// when `init` is given for a stage its outputs also backpropagate into those parameters.
#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_placement_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    stages: &[Var; 3],
    config: &FusionConfig,
    projections: &[Option<ProjectionParams>; 3],
    states: &mut [Option<TttState>; 3],
    init: &[Option<&TttParams>; 3],
    driver: &mut TttDriver<'_, R>,
) -> Result<[Var; 3]> {
    let mut out = *stages;
    for stage in Stage::ALL {
        if !config.is_placed(stage) {
            continue;
        }
        let s = stage.index();
        let fm = stages[s];
        let (c, h, w) = {
            let sh = g.shape(fm);
            (sh[0], sh[1], sh[2])
        };
        let state = states[s]
            .as_mut()
            .ok_or_else(|| Error::Config(format!("no TTT state for {stage:?}")))?;
        if state.dim() != c {
            return Err(shape_err!("{stage:?} has {c} channels but its TTT state has dimension {}", state.dim()));
        }
        let flat = g.reshape(fm, &[c, h * w]);
        let tokens = g.transpose(flat);
        let tokens = g.standardize(tokens);
        let init_vars = init[s].map(|p| p.tensors().into_iter().map(|t| g.param(t)).collect::<Vec<_>>());
        let snapshots: Rc<[TttParams]> = match driver {
            TttDriver::Live { rng, trace } => {
                let cfg = config.ttt.for_dim(c);
                let (_, next, snaps) = ttt_scan_recorded(state, g.value(tokens), &cfg, *rng)?;
                *state = next;
                let snaps: Rc<[TttParams]> = snaps.into();
                if let Some(trace) = trace {
                    trace.entries.push(TraceEntry {
                        snapshots: snaps.clone(),
                        init_ref: init[s].cloned(),
                    });
                }
                snaps
            }
            TttDriver::Replay(trace) => {
                let entry = trace
                    .entries
                    .get(trace.cursor)
                    .ok_or_else(|| Error::Config("TTT trace exhausted".into()))?
                    .clone();
                trace.cursor += 1;
                match (&entry.init_ref, init[s]) {
                    (Some(reference), Some(current)) => {
                        entry.snapshots.iter().map(|p| current.shifted(reference, p)).collect()
                    }
                    _ => entry.snapshots,
                }
            }
        };
        let y = g.ttt(tokens, snapshots, init_vars);
        let yt = g.transpose(y);
        let back = g.reshape(yt, &[c, h, w]);
        out[s] = match config.mode {
            FusionMode::AddSerial => g.add(fm, back),
            FusionMode::ConcatParallel => {
                let p = projections[s]
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("no projection for {stage:?}")))?;
                p.validate(c)?;
                project_graph(g, fm, back, p)
            }
        };
    }
    Ok(out)
}

/// Runs the TTT branch of every placed stage (continuing from `states`) and fuses it with the backbone.
///
/// Unplaced stages pass through untouched. Returns the fused maps and the advanced states.
pub fn apply_placement<R: Rng + ?Sized>(
    stages: &[FeatureMap; 3],
    config: &FusionConfig,
    projections: &[Option<ProjectionParams>; 3],
    states: &[Option<TttState>; 3],
    rng: &mut R,
) -> Result<([FeatureMap; 3], [Option<TttState>; 3])> {
    config.validate()?;
    let mut next = states.clone();
    if config.placement.is_empty() {
        return Ok((stages.clone(), next));
    }
    let mut g = Graph::new();
    let vars = [
        g.constant(stages[0].0.clone()),
        g.constant(stages[1].0.clone()),
        g.constant(stages[2].0.clone()),
    ];
    let mut driver = TttDriver::Live { rng, trace: None };
    let out = apply_placement_graph(&mut g, &vars, config, projections, &mut next, &[None, None, None], &mut driver)?;
    let fused = [0, 1, 2].map(|i| {
        if config.is_placed(Stage::ALL[i]) {
            FeatureMap(g.value(out[i]).clone())
        } else {
            stages[i].clone()
        }
    });
    Ok((fused, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::normal;
    use crate::ttt::ttt_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(normal(&[c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
    }

    #[test]
    fn tokens_are_raster_ordered() {
        let f = FeatureMap::new(Tensor::new(&[2, 1, 3], vec![1., 2., 3., 10., 20., 30.]).unwrap()).unwrap();
        let t = featmap_to_tokens(&f);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.row(0), &[1., 10.]);
        assert_eq!(t.row(2), &[3., 30.]);
        assert_eq!(tokens_to_featmap(&t, 1, 3).unwrap(), f);
    }

    #[test]
    fn single_pixel_token_is_channel_vector() {
        let f = FeatureMap::new(Tensor::new(&[3, 1, 1], vec![4., 5., 6.]).unwrap()).unwrap();
        assert_eq!(featmap_to_tokens(&f).row(0), &[4., 5., 6.]);
    }

    #[test]
    fn token_index_two_lands_on_second_row() {
        let t = Tensor::new(&[4, 1], vec![0., 0., 7., 0.]).unwrap();
        let f = tokens_to_featmap(&t, 2, 2).unwrap();
        assert_eq!(f.tensor().data()[2], 7.0); // (row 1, col 0)
        assert!(tokens_to_featmap(&Tensor::zeros(&[3, 1]), 2, 2).is_err());
    }

    #[test]
    fn fuse_add_cases() {
        let a = fm(4, 8, 8, 1);
        let z = FeatureMap::new(Tensor::zeros(&[4, 8, 8])).unwrap();
        assert_eq!(fuse_add(&a, &z).unwrap(), a);
        let twice = fuse_add(&a, &a).unwrap();
        assert_eq!(twice.tensor(), &a.tensor().map(|v| 2.0 * v));
        assert!(fuse_add(&a, &fm(4, 8, 4, 2)).is_err());
    }

    #[test]
    fn selector_and_sum_projections() {
        let (a, b) = (fm(3, 4, 5, 3), fm(3, 4, 5, 4));
        let mut sel = Tensor::zeros(&[3, 6]);
        let mut sum = Tensor::zeros(&[3, 6]);
        for i in 0..3 {
            sel.data_mut()[i * 6 + i] = 1.0;
            sum.data_mut()[i * 6 + i] = 1.0;
            sum.data_mut()[i * 6 + 3 + i] = 1.0;
        }
        let out = fuse_concat(&a, &b, &ProjectionParams::standard(&sel).unwrap()).unwrap();
        assert_eq!(out, a);
        let out = fuse_concat(&a, &b, &ProjectionParams::standard(&sum).unwrap()).unwrap();
        assert!(out.tensor().max_abs_diff(fuse_add(&a, &b).unwrap().tensor()) < 1e-12);
    }

    #[test]
    fn depthwise_center_tap_on_single_pixel_is_pointwise() {
        let (a, b) = (fm(2, 1, 1, 5), fm(2, 1, 1, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ProjectionParams::init(ProjectionKind::DepthwiseSeparableConv, 2);
        p.pointwise = normal(&[2, 4, 1, 1], 1.0, &mut rng);
        // with a 1-pixel grid every off-center tap reads padding
        p.depthwise.as_mut().unwrap().data_mut()[0] = 9.0;
        let out = fuse_concat(&a, &b, &p).unwrap();
        let cat = [a.tensor().data(), b.tensor().data()].concat();
        for o in 0..2 {
            let e: f64 = (0..4).map(|k| p.pointwise.data()[o * 4 + k] * cat[k]).sum();
            assert!((out.tensor().data()[o] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_weight_counts() {
        let c = 8;
        let std = ProjectionParams::init(ProjectionKind::StandardConv, c);
        let dsc = ProjectionParams::init(ProjectionKind::DepthwiseSeparableConv, c);
        assert_eq!(std.multiply_weights(), 2 * c * c);
        assert_eq!(dsc.multiply_weights(), 2 * c * 9 + 2 * c * c);
    }

    #[test]
    fn malformed_projection_is_rejected() {
        let (a, b) = (fm(3, 2, 2, 1), fm(3, 2, 2, 2));
        let p = ProjectionParams::init(ProjectionKind::StandardConv, 4);
        assert!(fuse_concat(&a, &b, &p).is_err());
    }

    #[test]
    fn empty_placement_passes_through() {
        let stages = [fm(2, 4, 4, 1), fm(3, 2, 2, 2), fm(4, 1, 1, 3)];
        let states = [None, None, None];
        let (out, st) = apply_placement(&stages, &FusionConfig::disabled(), &[None, None, None], &states, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..3 {
            assert!(out[i].tensor().bit_eq(stages[i].tensor()));
        }
        assert_eq!(st, states);
    }

    #[test]
    fn placed_stages_advance_by_token_count() {
        let stages = [fm(2, 4, 4, 1), fm(3, 2, 2, 2), fm(4, 1, 1, 3)];
        let mut cfg = FusionConfig::disabled();
        cfg.placement = [Stage::Stage1, Stage::Stage3].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut states: [Option<TttState>; 3] = [None, None, None];
        for s in [Stage::Stage1, Stage::Stage3] {
            states[s.index()] = Some(ttt_init(&cfg.ttt.for_dim(stages[s.index()].channels()), &mut rng).unwrap());
        }
        let (out, st) = apply_placement(&stages, &cfg, &[None, None, None], &states, &mut rng).unwrap();
        assert_eq!(st[0].as_ref().unwrap().step_count, 16);
        assert_eq!(st[2].as_ref().unwrap().step_count, 1);
        assert!(out[1].tensor().bit_eq(stages[1].tensor()));
        assert!(!out[0].tensor().bit_eq(stages[0].tensor()));
    }

    #[test]
    fn state_dimension_mismatch_is_an_error() {
        let stages = [fm(2, 4, 4, 1), fm(3, 2, 2, 2), fm(4, 1, 1, 3)];
        let mut cfg = FusionConfig::disabled();
        cfg.placement = [Stage::Stage2].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states = [None, Some(ttt_init(&cfg.ttt.for_dim(5), &mut rng).unwrap()), None];
        assert!(apply_placement(&stages, &cfg, &[None, None, None], &states, &mut rng).is_err());
    }
}
