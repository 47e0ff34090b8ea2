//! The segmentation network: convolutional encoder, mask embedding, TTT fusion,
//! LSTT refinement at the deepest stage and an FPN decoder, plus the
//! semi-supervised mask-propagation protocol.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{lstt_block_graph, normal, BankVars, KeyValue, LsttParams, MemoryBank, DEFAULT_WINDOW};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{
    apply_placement_graph, FeatureMap, FusionConfig, FusionMode, ProjectionParams, Stage, TttDriver,
};
use crate::graph::{Graph, Var};
use crate::synthvid::VideoSample;
use crate::tensor::Tensor;
use crate::ttt::{ttt_init, TttParams, TttState};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel widths of the three encoder stages.
    pub channels: [usize; 3],
    /// Common width of the decoder pathway.
    pub decoder_width: usize,
    /// Maximum object id; logits have `max_objects + 1` channels.
    pub max_objects: usize,
    pub lstt_blocks: usize,
    /// Short-term attention window (odd).
    pub window: usize,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            decoder_width: 32,
            max_objects: 4,
            lstt_blocks: 2,
            window: DEFAULT_WINDOW,
            fusion: FusionConfig::disabled(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.decoder_width == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.max_objects == 0 || self.max_objects > 255 {
            return Err(Error::Config("max_objects must be in 1..=255".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        self.fusion.validate()
    }

    pub fn classes(&self) -> usize {
        self.max_objects + 1
    }
}

/// Convolution kernel (O×C×k×k) and bias (O).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    fn init<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (inp * k * k) as f64;
        Self {
            w: normal(&[out, inp, k, k], (gain / fan_in).sqrt(), rng),
            b: Tensor::zeros(&[out]),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var, stride: usize) -> Var {
        let (w, b) = (g.param(&self.w), g.param(&self.b));
        let pad = self.w.dim(2) / 2;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Stride-2 3×3 convolutions: two for stage 1 (stride 4), one each for stages 2 and 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub stem: ConvParams,
    pub stage1: ConvParams,
    pub stage2: ConvParams,
    pub stage3: ConvParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// 1×1 projections of stages 1..3 to the decoder width.
    pub lateral: [ConvParams; 3],
    /// 3×3 smoothing after merging into stage 2 and stage 1 resolution.
    pub smooth: [ConvParams; 2],
    /// 1×1 projection to `max_objects + 1` logits.
    pub head: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    /// 1×1 convolution from the one-hot id planes to the stage-3 width.
    pub mask_embed: ConvParams,
    pub lstt: Vec<LsttParams>,
    pub projections: [Option<ProjectionParams>; 3],
    /// Learned initial TTT state of each placed stage.
    pub ttt_init: [Option<TttParams>; 3],
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = config.channels;
        let p = config.decoder_width;
        let encoder = EncoderParams {
            stem: ConvParams::init(c1, 3, 3, 2.0, &mut rng),
            stage1: ConvParams::init(c1, c1, 3, 2.0, &mut rng),
            stage2: ConvParams::init(c2, c1, 3, 2.0, &mut rng),
            stage3: ConvParams::init(c3, c2, 3, 2.0, &mut rng),
        };
        let mask_embed = ConvParams::init(c3, config.classes(), 1, config.classes() as f64, &mut rng);
        let lstt = (0..config.lstt_blocks).map(|_| LsttParams::init(c3, &mut rng)).collect();
        let fusion = &config.fusion;
        let mut projections = [None, None, None];
        let mut ttt = [None, None, None];
        for s in Stage::ALL {
            if !fusion.is_placed(s) {
                continue;
            }
            let c = config.channels[s.index()];
            if fusion.mode == FusionMode::ConcatParallel {
                projections[s.index()] = Some(ProjectionParams::init(fusion.projection, c));
            }
            ttt[s.index()] = Some(ttt_init(&fusion.ttt.for_dim(c), &mut rng)?.params);
        }
        let decoder = DecoderParams {
            lateral: [
                ConvParams::init(p, c1, 1, 1.0, &mut rng),
                ConvParams::init(p, c2, 1, 1.0, &mut rng),
                ConvParams::init(p, c3, 1, 1.0, &mut rng),
            ],
            smooth: [ConvParams::init(p, p, 3, 2.0, &mut rng), ConvParams::init(p, p, 3, 2.0, &mut rng)],
            head: ConvParams::init(config.classes(), p, 1, 1.0, &mut rng),
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            mask_embed,
            lstt,
            projections,
            ttt_init: ttt,
            decoder,
        })
    }

    /// Visits every trainable tensor in a fixed order with a stable name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        let e = &self.encoder;
        e.stem.visit("encoder.stem", f);
        e.stage1.visit("encoder.stage1", f);
        e.stage2.visit("encoder.stage2", f);
        e.stage3.visit("encoder.stage3", f);
        self.mask_embed.visit("mask_embed", f);
        for (i, b) in self.lstt.iter().enumerate() {
            b.visit(&format!("lstt.{i}"), f);
        }
        for (i, p) in self.projections.iter().enumerate() {
            if let Some(p) = p {
                p.visit(&format!("fusion.stage{}", i + 1), f);
            }
        }
        for (i, p) in self.ttt_init.iter().enumerate() {
            if let Some(p) = p {
                let names: &[&str] = match p {
                    TttParams::Linear { .. } => &["w", "b"],
                    TttParams::Mlp { .. } => &["w1", "b1", "w2", "b2"],
                };
                for (n, t) in names.iter().zip(p.tensors()) {
                    f(format!("ttt_init.stage{}.{n}", i + 1), t);
                }
            }
        }
        let d = &self.decoder;
        for (i, l) in d.lateral.iter().enumerate() {
            l.visit(&format!("decoder.lateral{}", i + 1), f);
        }
        d.smooth[0].visit("decoder.smooth2", f);
        d.smooth[1].visit("decoder.smooth1", f);
        d.head.visit("decoder.head", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let e = &mut self.encoder;
        e.stem.visit_mut("encoder.stem", f);
        e.stage1.visit_mut("encoder.stage1", f);
        e.stage2.visit_mut("encoder.stage2", f);
        e.stage3.visit_mut("encoder.stage3", f);
        self.mask_embed.visit_mut("mask_embed", f);
        for (i, b) in self.lstt.iter_mut().enumerate() {
            b.visit_mut(&format!("lstt.{i}"), f);
        }
        for (i, p) in self.projections.iter_mut().enumerate() {
            if let Some(p) = p {
                p.visit_mut(&format!("fusion.stage{}", i + 1), f);
            }
        }
        for (i, p) in self.ttt_init.iter_mut().enumerate() {
            if let Some(p) = p {
                let names: &[&str] = match p {
                    TttParams::Linear { .. } => &["w", "b"],
                    TttParams::Mlp { .. } => &["w1", "b1", "w2", "b2"],
                };
                for (n, t) in names.iter().zip(p.tensors_mut()) {
                    f(format!("ttt_init.stage{}.{n}", i + 1), t);
                }
            }
        }
        let d = &mut self.decoder;
        for (i, l) in d.lateral.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.lateral{}", i + 1), f);
        }
        let [s2, s1] = &mut d.smooth;
        s2.visit_mut("decoder.smooth2", f);
        s1.visit_mut("decoder.smooth1", f);
        d.head.visit_mut("decoder.head", f);
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t.shape().to_vec())));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Fresh TTT states for a new video, copied from the learned initial states.
    pub fn initial_states(&self) -> [Option<TttState>; 3] {
        self.ttt_init.clone().map(|p| p.map(TttState::new))
    }
}

fn check_frame(frame: &Tensor) -> Result<(usize, usize)> {
    if frame.rank() != 3 || frame.dim(0) != 3 {
        return Err(shape_err!("frame must be 3×H×W, got {:?}", frame.shape()));
    }
    let (h, w) = (frame.dim(1), frame.dim(2));
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(shape_err!("frame size {h}×{w} must be a positive multiple of 16"));
    }
    Ok((h, w))
}

pub(crate) fn encode_graph(g: &mut Graph, x: Var, p: &EncoderParams) -> [Var; 3] {
    let h = p.stem.apply(g, x, 2);
    let h = g.relu(h);
    let s1 = p.stage1.apply(g, h, 2);
    let s1 = g.relu(s1);
    let s2 = p.stage2.apply(g, s1, 2);
    let s2 = g.relu(s2);
    let s3 = p.stage3.apply(g, s2, 2);
    let s3 = g.relu(s3);
    [s1, s2, s3]
}

/// Encodes a 3×H×W frame into maps at strides 4, 8 and 16.
pub fn encode(frame: &Tensor, params: &EncoderParams) -> Result<[FeatureMap; 3]> {
    check_frame(frame)?;
    if params.stem.w.dim(1) != 3 {
        return Err(shape_err!("encoder stem expects {} input channels", params.stem.w.dim(1)));
    }
    let mut g = Graph::new();
    let x = g.constant(frame.clone());
    let s = encode_graph(&mut g, x, params);
    Ok([
        FeatureMap::new(g.value(s[0]).clone())?,
        FeatureMap::new(g.value(s[1]).clone())?,
        FeatureMap::new(g.value(s[2]).clone())?,
    ])
}

/// One-hot id planes averaged over 16×16 blocks: `(K+1) × H/16 × W/16`.
pub fn mask_planes(mask: &[u8], h: usize, w: usize, max_objects: usize) -> Result<Tensor> {
    if mask.len() != h * w || h % 16 != 0 || w % 16 != 0 {
        return Err(shape_err!("mask of {} pixels does not form a {h}×{w} grid divisible by 16", mask.len()));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m as usize > max_objects) {
        return Err(Error::Format(format!("mask id {bad} exceeds max_objects {max_objects}")));
    }
    let (h16, w16) = (h / 16, w / 16);
    let mut planes = Tensor::zeros(&[max_objects + 1, h16, w16]);
    let inv = 1.0 / 256.0;
    let data = planes.data_mut();
    for y in 0..h {
        for x in 0..w {
            let k = mask[y * w + x] as usize;
            data[(k * h16 + y / 16) * w16 + x / 16] += inv;
        }
    }
    Ok(planes)
}

/// Projects the downsampled one-hot planes of `mask` to stage-3 channels.
pub fn embed_mask(mask: &[u8], h: usize, w: usize, max_objects: usize, params: &ConvParams) -> Result<FeatureMap> {
    let planes = mask_planes(mask, h, w, max_objects)?;
    if params.w.shape() != [params.w.dim(0), max_objects + 1, 1, 1] {
        return Err(shape_err!("mask embedding kernel {:?} does not take {} planes", params.w.shape(), max_objects + 1));
    }
    let mut g = Graph::new();
    let x = g.constant(planes);
    let y = params.apply(&mut g, x, 1);
    FeatureMap::new(g.value(y).clone())
}

pub(crate) fn decode_graph(g: &mut Graph, stages: [Var; 3], p: &DecoderParams, out: (usize, usize)) -> Var {
    let l3 = p.lateral[2].apply(g, stages[2], 1);
    let up = g.upsample_nearest2(l3);
    let l2 = p.lateral[1].apply(g, stages[1], 1);
    let m2 = g.add(up, l2);
    let m2 = p.smooth[0].apply(g, m2, 1);
    let m2 = g.relu(m2);
    let up = g.upsample_nearest2(m2);
    let l1 = p.lateral[0].apply(g, stages[0], 1);
    let m1 = g.add(up, l1);
    let m1 = p.smooth[1].apply(g, m1, 1);
    let m1 = g.relu(m1);
    let logits = p.head.apply(g, m1, 1);
    g.bilinear(logits, out.0, out.1)
}

/// Top-down FPN decoding to `(K+1) × H × W` logits.
pub fn decode_fpn(stages: &[FeatureMap; 3], params: &DecoderParams, out_size: (usize, usize)) -> Result<Tensor> {
    let (h1, w1) = (stages[0].height(), stages[0].width());
    let consistent = stages[1].height() * 2 == h1
        && stages[1].width() * 2 == w1
        && stages[2].height() * 4 == h1
        && stages[2].width() * 4 == w1
        && out_size == (h1 * 4, w1 * 4);
    if !consistent {
        return Err(shape_err!("stage sizes are inconsistent with output size {:?}", out_size));
    }
    for (i, s) in stages.iter().enumerate() {
        if params.lateral[i].w.dim(1) != s.channels() {
            return Err(shape_err!("stage {} has {} channels, lateral expects {}", i + 1, s.channels(), params.lateral[i].w.dim(1)));
        }
    }
    let mut g = Graph::new();
    let v = [
        g.constant(stages[0].tensor().clone()),
        g.constant(stages[1].tensor().clone()),
        g.constant(stages[2].tensor().clone()),
    ];
    let out = decode_graph(&mut g, v, params, out_size);
    Ok(g.value(out).clone())
}

/// Per-pixel argmax over logit channels; ties go to the smaller id.
pub fn argmax_mask(logits: &Tensor) -> Vec<u8> {
    let (c, hw) = (logits.dim(0), logits.dim(1) * logits.dim(2));
    let d = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

fn tokens_of(g: &mut Graph, fm: Var) -> Var {
    let (c, h, w) = {
        let s = g.shape(fm);
        (s[0], s[1], s[2])
    };
    let flat = g.reshape(fm, &[c, h * w]);
    g.transpose(flat)
}

fn featmap_of(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Var {
    let c = g.shape(tokens)[1];
    let t = g.transpose(tokens);
    g.reshape(t, &[c, h, w])
}

/// Memory sources for one frame: standardized tokens as keys, plus the mask embedding as values.
fn memory_graph(g: &mut Graph, model: &ModelParams, tokens: Var, mask: &[u8], h: usize, w: usize) -> Result<(Var, Var)> {
    let planes = mask_planes(mask, h, w, model.config.max_objects)?;
    let planes = g.constant(planes);
    let emb = model.mask_embed.apply(g, planes, 1);
    let emb = tokens_of(g, emb);
    let keys = g.standardize(tokens);
    let values = g.add(keys, emb);
    Ok((keys, values))
}

/// Outputs of the per-frame network on the graph.
pub(crate) struct FrameOutputs {
    pub logits: Var,
    /// LSTT-refined stage-3 tokens, the next frame's short-term source.
    pub refined: Var,
}

/// Drives the network over the frames of one video on a single graph.
pub(crate) struct VideoPass<'m, 'd, R: Rng + ?Sized> {
    pub model: &'m ModelParams,
    pub graph: Graph,
    pub states: [Option<TttState>; 3],
    driver: TttDriver<'d, R>,
    bank: Option<BankVars>,
    size: (usize, usize),
    pending: Option<Var>,
}

impl<'m, 'd, R: Rng + ?Sized> VideoPass<'m, 'd, R> {
    pub fn new(model: &'m ModelParams, driver: TttDriver<'d, R>) -> Self {
        Self {
            model,
            graph: Graph::new(),
            states: model.initial_states(),
            driver,
            bank: None,
            size: (0, 0),
            pending: None,
        }
    }

    fn fused_stages(&mut self, frame: &Tensor, connect_init: bool) -> Result<[Var; 3]> {
        let g = &mut self.graph;
        let x = g.constant(frame.clone());
        let stages = encode_graph(g, x, &self.model.encoder);
        let init = if connect_init {
            [0, 1, 2].map(|i| self.model.ttt_init[i].as_ref())
        } else {
            [None, None, None]
        };
        apply_placement_graph(
            g,
            &stages,
            &self.model.config.fusion,
            &self.model.projections,
            &mut self.states,
            &init,
            &mut self.driver,
        )
    }

    /// Processes the annotated first frame and writes both memories from it.
    pub fn first_frame(&mut self, frame: &Tensor, mask: &[u8]) -> Result<()> {
        let (h, w) = check_frame(frame)?;
        self.size = (h, w);
        self.states = self.model.initial_states();
        let fused = self.fused_stages(frame, true)?;
        let tokens = tokens_of(&mut self.graph, fused[2]);
        let (keys, values) = memory_graph(&mut self.graph, self.model, tokens, mask, h, w)?;
        self.bank = Some(BankVars {
            long_keys: keys,
            long_values: values,
            short_keys: keys,
            short_values: values,
        });
        Ok(())
    }

    pub fn next_frame(&mut self, frame: &Tensor) -> Result<FrameOutputs> {
        let (h, w) = check_frame(frame)?;
        if (h, w) != self.size {
            return Err(shape_err!("frame size {h}×{w} differs from the first frame"));
        }
        let bank = self
            .bank
            .ok_or_else(|| Error::Uninitialized("first frame has not been processed".into()))?;
        let fused = self.fused_stages(frame, false)?;
        let g = &mut self.graph;
        let grid = (h / 16, w / 16);
        let mut x = tokens_of(g, fused[2]);
        for block in &self.model.lstt {
            x = lstt_block_graph(g, x, &bank, block, grid, self.model.config.window);
        }
        let refined3 = featmap_of(g, x, grid.0, grid.1);
        let logits = decode_graph(g, [fused[0], fused[1], refined3], &self.model.decoder, (h, w));
        self.pending = Some(x);
        Ok(FrameOutputs { logits, refined: x })
    }

    /// Replaces the short-term memory with the last frame's tokens and the given mask.
    pub fn commit_mask(&mut self, mask: &[u8]) -> Result<()> {
        let tokens = self
            .pending
            .take()
            .ok_or_else(|| Error::Uninitialized("no frame awaiting a mask".into()))?;
        let (h, w) = self.size;
        let (keys, values) = memory_graph(&mut self.graph, self.model, tokens, mask, h, w)?;
        let bank = self.bank.as_mut().expect("bank set by first_frame");
        bank.short_keys = keys;
        bank.short_values = values;
        Ok(())
    }
}

/// Builds the memory bank of a video from its annotated first frame.
///
/// Returns the bank and the TTT states after the first frame.
pub fn first_frame_memory<R: Rng + ?Sized>(
    model: &ModelParams,
    frame: &Tensor,
    mask: &[u8],
    rng: &mut R,
) -> Result<(MemoryBank, [Option<TttState>; 3])> {
    let mut pass = VideoPass::new(model, TttDriver::Live { rng, trace: None });
    pass.first_frame(frame, mask)?;
    let b = pass.bank.expect("set by first_frame");
    let kv = KeyValue {
        keys: pass.graph.value(b.long_keys).clone(),
        values: pass.graph.value(b.long_values).clone(),
    };
    let mut bank = MemoryBank::new();
    bank.init_long_term(kv.clone())?;
    bank.set_short_term(kv)?;
    Ok((bank, pass.states))
}

/// Short-term memory sources derived from refined tokens and the mask assigned to their frame.
pub fn short_term_memory(model: &ModelParams, refined: &Tensor, mask: &[u8], size: (usize, usize)) -> Result<KeyValue> {
    let mut g = Graph::new();
    let t = g.constant(refined.clone());
    let (k, v) = memory_graph(&mut g, model, t, mask, size.0, size.1)?;
    Ok(KeyValue {
        keys: g.value(k).clone(),
        values: g.value(v).clone(),
    })
}

/// Result of [`forward_frame`].
#[derive(Clone, Debug)]
pub struct FrameResult {
    /// `(K+1) × H × W`.
    pub logits: Tensor,
    /// LSTT-refined stage-3 tokens of this frame.
    pub refined_tokens: Tensor,
    pub states: [Option<TttState>; 3],
}

/// Runs one non-first frame: encode, fuse, refine with LSTT against `bank`, decode.
pub fn forward_frame<R: Rng + ?Sized>(
    model: &ModelParams,
    frame: &Tensor,
    bank: &MemoryBank,
    states: &[Option<TttState>; 3],
    rng: &mut R,
) -> Result<FrameResult> {
    let (h, w) = check_frame(frame)?;
    let lt = bank
        .long_term()
        .ok_or_else(|| Error::Uninitialized("long-term memory is empty".into()))?;
    let st = bank
        .short_term()
        .ok_or_else(|| Error::Uninitialized("short-term memory is empty".into()))?;
    if st.keys.dim(0) != (h / 16) * (w / 16) {
        return Err(shape_err!("short-term memory does not cover a {h}×{w} frame"));
    }
    let mut pass = VideoPass::new(model, TttDriver::Live { rng, trace: None });
    pass.states = states.clone();
    pass.size = (h, w);
    let g = &mut pass.graph;
    pass.bank = Some(BankVars {
        long_keys: g.constant(lt.keys.clone()),
        long_values: g.constant(lt.values.clone()),
        short_keys: g.constant(st.keys.clone()),
        short_values: g.constant(st.values.clone()),
    });
    let out = pass.next_frame(frame)?;
    Ok(FrameResult {
        logits: pass.graph.value(out.logits).clone(),
        refined_tokens: pass.graph.value(out.refined).clone(),
        states: pass.states,
    })
}

/// Semi-supervised propagation: frame 0 returns `first_mask`, later frames are predicted
/// from the first-frame memory and the previous frame's prediction.
pub fn propagate_video<R: Rng + ?Sized>(
    model: &ModelParams,
    video: &VideoSample,
    first_mask: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>> {
    if video.num_frames == 0 {
        return Err(Error::Config("cannot propagate through an empty video".into()));
    }
    let hw = video.height * video.width;
    if first_mask.len() != hw {
        return Err(shape_err!("first mask has {} pixels, frames have {hw}", first_mask.len()));
    }
    let mut out = first_mask.to_vec();
    if video.num_frames == 1 {
        return Ok(out);
    }
    let mut pass = VideoPass::new(model, TttDriver::Live { rng, trace: None });
    pass.first_frame(&video.frame_tensor(0), first_mask)?;
    for t in 1..video.num_frames {
        let o = pass.next_frame(&video.frame_tensor(t))?;
        let logits = pass.graph.value(o.logits);
        if !logits.is_finite() {
            return Err(Error::NonFinite(format!("logits at frame {t}")));
        }
        let pred = argmax_mask(logits);
        pass.commit_mask(&pred)?;
        out.extend_from_slice(&pred);
    }
    Ok(out)
}

/// Teacher-forced loss of one video: mean cross-entropy over frames 1..T−1.
pub(crate) fn video_loss_graph<R: Rng + ?Sized>(pass: &mut VideoPass<'_, '_, R>, video: &VideoSample) -> Result<Var> {
    pass.first_frame(&video.frame_tensor(0), video.mask(0))?;
    let mut terms = Vec::with_capacity(video.num_frames - 1);
    for t in 1..video.num_frames {
        let o = pass.next_frame(&video.frame_tensor(t))?;
        let target: Rc<[u8]> = video.mask(t).into();
        if target.iter().any(|&m| m as usize > pass.model.config.max_objects) {
            return Err(Error::Format(format!("mask id exceeds max_objects {}", pass.model.config.max_objects)));
        }
        terms.push(pass.graph.cross_entropy(o.logits, target));
        pass.commit_mask(video.mask(t))?;
    }
    let total = pass.graph.sum(&terms);
    Ok(pass.graph.scale(total, 1.0 / terms.len() as f64))
}
