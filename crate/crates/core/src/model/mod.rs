//! The multi-stage network: patch embedding, SS2D stages with downsampling
//! between them, optional StylePrompt adapters after each stage, and a
//! regression head.

pub mod block;
pub mod layers;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::scan2d::{OrderCache, ScanMode};
use crate::ssm::DEFAULT_CHUNK;
use crate::styleprompt::{StylePrompt, DEFAULT_PROMPTS};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

use block::{BlockSpec, Ss2dBlock};
use layers::{Downsample, FeatureMap, PatchEmbed, QualityHead};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Two-stage desk-scale model for CPU experiments.
    Desk,
    /// Three desk-width stages (the last one six blocks deep) with
    /// StylePrompt adapters. Two adapters sit inside the network rather than
    /// just before the head, and the depth keeps them a small share of the
    /// parameters.
    DeskDeep,
    Tiny,
    Small,
    Base,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "desk-deep" => Ok(Preset::DeskDeep),
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk|desk-deep|tiny|small|base)"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QMambaConfig {
    pub depths: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub scan_mode: ScanMode,
    /// Local-scan window per stage (ignored for cross scan).
    pub windows: Vec<usize>,
    pub n_state: usize,
    pub expand: usize,
    /// Hidden width of the per-block channel MLP as a multiple of the stage
    /// width; 0 disables it.
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub patch: usize,
    /// Prompts per adapter; 0 means no adapters.
    pub prompts: usize,
    pub prompt_size: usize,
    pub scan_chunk: usize,
}

/// Window 7 at the first stage, halved per stage, never below 2.
pub fn default_windows(stages: usize) -> Vec<usize> {
    (0..stages).map(|s| (7usize >> s).max(2)).collect()
}

impl QMambaConfig {
    /// Stage layouts: Tiny `[2,2,4,2]`×96, Small `[2,2,15,2]`×96,
    /// Base `[2,2,15,2]`×128 (widths double per stage); one state per
    /// channel and a 3× channel MLP in every block.
    pub fn preset(p: Preset, scan_mode: ScanMode) -> Self {
        let full = |depths: Vec<usize>, dim: usize| Self {
            embed_dims: (0..depths.len()).map(|s| dim << s).collect(),
            windows: default_windows(depths.len()),
            depths,
            scan_mode,
            n_state: 1,
            expand: 2,
            mlp_ratio: 3,
            head_hidden: 256,
            patch: 4,
            prompts: DEFAULT_PROMPTS,
            prompt_size: 1,
            scan_chunk: DEFAULT_CHUNK,
        };
        match p {
            Preset::Desk => Self {
                depths: vec![1, 1],
                embed_dims: vec![16, 32],
                scan_mode,
                windows: vec![4, 2],
                n_state: 1,
                expand: 2,
                mlp_ratio: 4,
                head_hidden: 64,
                patch: 4,
                prompts: 0,
                prompt_size: 1,
                scan_chunk: DEFAULT_CHUNK,
            },
            Preset::DeskDeep => Self {
                depths: vec![1, 1, 6],
                embed_dims: vec![16, 32, 64],
                windows: vec![4, 2, 2],
                prompts: DEFAULT_PROMPTS,
                ..Self::preset(Preset::Desk, scan_mode)
            },
            Preset::Tiny => full(vec![2, 2, 4, 2], 96),
            Preset::Small => full(vec![2, 2, 15, 2], 96),
            Preset::Base => full(vec![2, 2, 15, 2], 128),
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.depths.len();
        if n == 0 || self.embed_dims.len() != n || self.windows.len() != n {
            return Err(Error::Config(format!(
                "depths ({}), embed_dims ({}) and windows ({}) must have one entry per stage",
                n,
                self.embed_dims.len(),
                self.windows.len()
            )));
        }
        let positive = [
            ("embed_dims", self.embed_dims.iter().all(|&d| d > 0)),
            ("windows", self.windows.iter().all(|&w| w > 0)),
            ("n_state", self.n_state > 0),
            ("expand", self.expand > 0),
            ("head_hidden", self.head_hidden > 0),
            ("patch", self.patch > 0),
            ("prompt_size", self.prompt_size > 0),
            ("scan_chunk", self.scan_chunk > 0),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }

    /// `(height, width, channels)` of every stage output for an input image.
    pub fn pyramid(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (height / self.patch, width / self.patch);
        let mut out = Vec::with_capacity(self.stages());
        for (s, &c) in self.embed_dims.iter().enumerate() {
            if s > 0 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            out.push((h, w, c));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Option<Downsample>,
    pub blocks: Vec<Ss2dBlock>,
}

/// The network. Parameters live in a [`ParamStore`]; this struct only holds
/// their ids, so one model description can run against different stores.
#[derive(Debug)]
pub struct QMamba {
    pub config: QMambaConfig,
    pub stem: PatchEmbed,
    pub stages: Vec<Stage>,
    pub adapters: Vec<StylePrompt>,
    pub head: QualityHead,
    orders: OrderCache,
}

/// Per-forward outputs useful to callers and tests.
pub struct ForwardTrace {
    pub score: Var,
    pub stem: FeatureMap,
    pub stage_outputs: Vec<FeatureMap>,
}

impl QMamba {
    /// Registers all parameters in `store` and returns the model.
    pub fn new<R: Rng>(config: QMambaConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = PatchEmbed::new(store, config.patch, config.embed_dims[0], rng);
        let mut stages = Vec::with_capacity(config.stages());
        let mut adapters = Vec::new();
        for s in 0..config.stages() {
            let c = config.embed_dims[s];
            let down = (s > 0).then(|| Downsample::new(store, &format!("s{s}.down"), config.embed_dims[s - 1], c, rng));
            let spec = BlockSpec {
                channels: c,
                expand: config.expand,
                states: config.n_state,
                mode: config.scan_mode,
                window: config.windows[s],
                mlp_ratio: config.mlp_ratio,
                chunk: config.scan_chunk,
            };
            let blocks =
                (0..config.depths[s]).map(|b| Ss2dBlock::new(store, &format!("s{s}.b{b}"), &spec, rng)).collect();
            stages.push(Stage { down, blocks });
            if config.prompts > 0 {
                adapters.push(StylePrompt::new(store, s, c, config.prompts, config.prompt_size, rng)?);
            }
        }
        let head = QualityHead::new(store, *config.embed_dims.last().unwrap(), config.head_hidden, rng);
        Ok(Self { config, stem, stages, adapters, head, orders: OrderCache::default() })
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Scores one `[H×W×3]` image recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, img: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, bind, img)?.score)
    }

    pub fn forward_trace(&self, tape: &mut Tape, bind: &Binding, img: Var) -> Result<ForwardTrace> {
        let stem = self.stem.forward(tape, bind, img)?;
        check_finite(tape, stem.var, "patch embedding")?;
        let mut f = stem;
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.down {
                f = down.forward(tape, bind, f)?;
            }
            for block in &stage.blocks {
                f = block.forward(tape, bind, f, &self.orders)?;
            }
            if let Some(adapter) = self.adapters.get(s) {
                f.var = adapter.forward(tape, bind, f.var)?;
            }
            check_finite(tape, f.var, &format!("stage {}", s + 1))?;
            stage_outputs.push(f);
        }
        let score = self.head.forward(tape, bind, f.var)?;
        check_finite(tape, score, "quality head")?;
        Ok(ForwardTrace { score, stem, stage_outputs })
    }

    /// Inference on a plain tensor, no gradients recorded.
    pub fn predict(&self, store: &ParamStore, img: &Tensor) -> Result<Scalar> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let s = self.forward(&mut tape, &bind, x)?;
        Ok(tape.value(s).item())
    }
}

fn check_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values first produced by {stage}")))
    }
}
