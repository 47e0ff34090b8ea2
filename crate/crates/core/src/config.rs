//! JSON experiment configuration shared by the `train` and `ablate` commands.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::DEFAULT_WINDOW;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode, ProjectionKind, Stage, TttSettings};
use crate::optim::AdamWConfig;
use crate::segnet::ModelConfig;
use crate::ttt::TttVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: TttVariant,
    /// Encoder stage widths; the TTT dimension of a stage equals its width.
    pub d: [usize; 3],
    /// Hidden width multiplier of TTT-MLP.
    pub h: usize,
    pub eta: f64,
    pub mask_ratio: f64,
    pub placement: BTreeSet<Stage>,
    pub mode: FusionMode,
    pub projection: ProjectionKind,
    pub lstt_blocks: usize,
    pub window: usize,
    pub lr0: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_objects: usize,
    pub decoder_width: usize,
    /// Frames per training clip; the whole video when absent.
    pub clip_len: Option<usize>,
    /// Steps between free-running evaluations (0 disables them).
    pub eval_every: usize,
    /// Stop early once the evaluated J&F reaches this value.
    pub target_jf: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ttt = TttSettings::default();
        Self {
            variant: ttt.variant,
            d: [16, 32, 64],
            h: ttt.hidden_mult,
            eta: ttt.eta,
            mask_ratio: ttt.mask_ratio,
            placement: BTreeSet::new(),
            mode: FusionMode::AddSerial,
            projection: ProjectionKind::StandardConv,
            lstt_blocks: 2,
            window: DEFAULT_WINDOW,
            lr0: 2e-4,
            batch: 8,
            weight_decay: 0.01,
            seed: 0,
            max_objects: 4,
            decoder_width: 32,
            clip_len: None,
            eval_every: 0,
            target_jf: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.clip_len.is_some_and(|c| c < 2) {
            return Err(Error::Config("clip_len must be at least 2".into()));
        }
        self.model()?.validate()?;
        self.fusion().ttt.for_dim(self.d[0]).validate()
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            placement: self.placement.clone(),
            mode: self.mode,
            projection: self.projection,
            ttt: TttSettings {
                variant: self.variant,
                hidden_mult: self.h,
                eta: self.eta,
                mask_ratio: self.mask_ratio,
                ..TttSettings::default()
            },
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            channels: self.d,
            decoder_width: self.decoder_width,
            max_objects: self.max_objects,
            lstt_blocks: self.lstt_blocks,
            window: self.window,
            fusion: self.fusion(),
        })
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr0: self.lr0,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Applies one of the ablation grid configurations A..G to the fusion fields.
    pub fn with_ablation(&self, id: AblationId) -> Self {
        let mut c = self.clone();
        let (placement, mode, projection) = id.fusion();
        c.placement = placement;
        c.mode = mode;
        c.projection = projection;
        c
    }
}

/// The seven rows of the fusion ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationId {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl AblationId {
    pub const ALL: [AblationId; 7] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F, Self::G];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.letter().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown ablation config {s:?}")))
    }

    pub fn letter(self) -> &'static str {
        ["A", "B", "C", "D", "E", "F", "G"][self as usize]
    }

    pub fn fusion(self) -> (BTreeSet<Stage>, FusionMode, ProjectionKind) {
        use Stage::*;
        let set = |s: &[Stage]| s.iter().copied().collect::<BTreeSet<_>>();
        match self {
            Self::A => (set(&[]), FusionMode::AddSerial, ProjectionKind::StandardConv),
            Self::B => (set(&[Stage3]), FusionMode::AddSerial, ProjectionKind::StandardConv),
            Self::C => (set(&[Stage2, Stage3]), FusionMode::AddSerial, ProjectionKind::StandardConv),
            Self::D => (set(&[Stage1, Stage3]), FusionMode::AddSerial, ProjectionKind::StandardConv),
            Self::E => (set(&Stage::ALL), FusionMode::AddSerial, ProjectionKind::StandardConv),
            Self::F => (set(&Stage::ALL), FusionMode::ConcatParallel, ProjectionKind::StandardConv),
            Self::G => (set(&Stage::ALL), FusionMode::ConcatParallel, ProjectionKind::DepthwiseSeparableConv),
        }
    }

    /// Which published grid and row this configuration reproduces.
    pub fn provenance(self) -> &'static str {
        match self {
            Self::A => "addition grid, row A (no TTT)",
            Self::B => "addition grid, row B",
            Self::C => "addition grid, row C",
            Self::D => "addition grid, row D",
            Self::E => "addition grid, row E",
            Self::F => "concatenation grid, row F (standard conv)",
            Self::G => "concatenation grid, row G (depthwise separable conv)",
        }
    }

    /// Parses a comma-separated list such as `A,C,E`, keeping grid order without duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut ids: Vec<Self> = s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect::<Result<_>>()?;
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Config("empty ablation config list".into()));
        }
        Ok(ids)
    }
}
