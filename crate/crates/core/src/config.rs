//! Run configuration.
//!
//! A single flat text format covers every subcommand: `[section]` headers,
//! `key = value` lines, `#` comments. Parsing is strict (unknown sections
//! and keys are errors) and serialization is canonical, so a written config
//! re-parses to the same value and two equal configs serialize to identical
//! bytes. Ablation presets mutate a config in place; explicit flags applied
//! afterwards win.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::assembly::{CanvasMode, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: String,
    pub image_h: usize,
    pub image_w: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data".into(),
            image_h: 64,
            image_w: 48,
            num_samples: 96,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub factor: usize,
    pub scale: f64,
    pub shift: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            factor: 4,
            scale: 1.0,
            shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub d: usize,
    pub sam_queries: usize,
    pub sam_depth: usize,
    pub cat_tokens: usize,
    pub srm_queries: usize,
    pub srm_units: usize,
    pub heads: usize,
    pub unet_widths: [usize; 3],
    pub head_dim: usize,
    pub groups: usize,
    pub canvas: CanvasMode,
    pub extended_attention: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 128,
            sam_queries: 8,
            sam_depth: 2,
            cat_tokens: 4,
            srm_queries: 16,
            srm_units: 3,
            heads: 4,
            unet_widths: [64, 128, 256],
            head_dim: 32,
            groups: 8,
            canvas: CanvasMode::PairConcat,
            extended_attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSection {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            train_steps: crate::diffusion::DEFAULT_TRAIN_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub stage: u32,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Fraction of steps spent on try-on; the rest go to try-off.
    pub task_mix: f64,
    pub mask_loss_weight: f64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    /// Keep the mask loss active in stage 2.
    pub stage2_mask_supervision: bool,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub init_from: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage: 1,
            steps: 400,
            batch_size: 4,
            lr: 1e-5,
            warmup: 1000,
            weight_decay: 1e-2,
            task_mix: 0.5,
            mask_loss_weight: 5e-2,
            dice_weight: 0.9,
            bce_weight: 0.1,
            stage2_mask_supervision: false,
            seed: 7,
            log_every: 25,
            checkpoint_every: 200,
            init_from: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TryoffMask {
    /// Generate the whole garment half.
    Full,
    /// Constrain generation to the bounding box of the worn-garment mask.
    Bbox,
}

impl TryoffMask {
    pub fn as_str(self) -> &'static str {
        match self {
            TryoffMask::Full => "full",
            TryoffMask::Bbox => "bbox",
        }
    }
}

impl FromStr for TryoffMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TryoffMask::Full),
            "bbox" => Ok(TryoffMask::Bbox),
            other => Err(Error::Config(format!("unknown try-off mask mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSection {
    pub steps: usize,
    pub task: Task,
    pub tryoff_mask: TryoffMask,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            steps: crate::diffusion::DEFAULT_SAMPLE_STEPS,
            task: Task::Vton,
            tryoff_mask: TryoffMask::Full,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FullConfig {
    pub variant: Variant,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub sample: SampleSection,
}

/// Ablation presets. Each one changes exactly the knobs that distinguish it
/// from the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Extended attention disabled; conditioning is semantic only.
    NoSrm,
    /// The canvas holds only the generated half.
    NoSpatialConcat,
    /// Try-off inference masks the garment bounding box instead of the
    /// whole half.
    Mask2Bbox,
    /// Train try-on alone.
    VtonOnly,
    /// Train try-off alone.
    VtoffOnly,
}

pub const VARIANTS: [Variant; 6] = [
    Variant::Full,
    Variant::NoSrm,
    Variant::NoSpatialConcat,
    Variant::Mask2Bbox,
    Variant::VtonOnly,
    Variant::VtoffOnly,
];

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSrm => "no-srm",
            Variant::NoSpatialConcat => "no-spatial-concat",
            Variant::Mask2Bbox => "mask2bbox",
            Variant::VtonOnly => "vton-only",
            Variant::VtoffOnly => "vtoff-only",
        }
    }

    pub fn apply(self, cfg: &mut FullConfig) {
        cfg.variant = self;
        match self {
            Variant::Full => {}
            Variant::NoSrm => cfg.model.extended_attention = false,
            Variant::NoSpatialConcat => cfg.model.canvas = CanvasMode::ActiveOnly,
            Variant::Mask2Bbox => cfg.sample.tryoff_mask = TryoffMask::Bbox,
            Variant::VtonOnly => {
                cfg.train.task_mix = 1.0;
                cfg.sample.task = Task::Vton;
            }
            Variant::VtoffOnly => {
                cfg.train.task_mix = 0.0;
                cfg.sample.task = Task::Vtoff;
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-srm" | "variant1" => Ok(Variant::NoSrm),
            "no-spatial-concat" | "variant2" => Ok(Variant::NoSpatialConcat),
            "mask2bbox" | "variant3" => Ok(Variant::Mask2Bbox),
            "vton-only" | "variant4" => Ok(Variant::VtonOnly),
            "vtoff-only" | "variant5" => Ok(Variant::VtoffOnly),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

fn parse_num<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("[{section}] {key}: cannot parse {value:?}"))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "[{section}] {key}: expected true or false, got {other:?}"
        ))),
    }
}

impl FullConfig {
    /// Parses the canonical text format. Unknown sections or keys are
    /// rejected so drifted configs fail loudly.
    pub fn parse(text: &str) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values, leaving
    /// unmentioned keys alone. Validation is the caller's last move, after
    /// every layer (file, preset, flags) has been applied.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                match section.as_str() {
                    "run" | "data" | "codec" | "model" | "diffusion" | "train" | "sample" => {}
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            self.set_key(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        Ok(())
    }

    fn set_key(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("run", "variant") => self.variant = value.parse()?,
            ("data", "root") => self.data.root = value.to_string(),
            ("data", "image_h") => self.data.image_h = parse_num(section, key, value)?,
            ("data", "image_w") => self.data.image_w = parse_num(section, key, value)?,
            ("data", "num_samples") => self.data.num_samples = parse_num(section, key, value)?,
            ("data", "seed") => self.data.seed = parse_num(section, key, value)?,
            ("codec", "factor") => self.codec.factor = parse_num(section, key, value)?,
            ("codec", "scale") => self.codec.scale = parse_num(section, key, value)?,
            ("codec", "shift") => self.codec.shift = parse_num(section, key, value)?,
            ("model", "d") => self.model.d = parse_num(section, key, value)?,
            ("model", "sam_queries") => self.model.sam_queries = parse_num(section, key, value)?,
            ("model", "sam_depth") => self.model.sam_depth = parse_num(section, key, value)?,
            ("model", "cat_tokens") => self.model.cat_tokens = parse_num(section, key, value)?,
            ("model", "srm_queries") => self.model.srm_queries = parse_num(section, key, value)?,
            ("model", "srm_units") => self.model.srm_units = parse_num(section, key, value)?,
            ("model", "heads") => self.model.heads = parse_num(section, key, value)?,
            ("model", "unet_widths") => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "[model] unet_widths: expected three comma-separated widths, got {value:?}"
                    )));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.model.unet_widths[i] = parse_num(section, key, p)?;
                }
            }
            ("model", "head_dim") => self.model.head_dim = parse_num(section, key, value)?,
            ("model", "groups") => self.model.groups = parse_num(section, key, value)?,
            ("model", "canvas") => {
                self.model.canvas = match value {
                    "pair" => CanvasMode::PairConcat,
                    "active-only" => CanvasMode::ActiveOnly,
                    other => {
                        return Err(Error::Config(format!(
                            "[model] canvas: expected pair or active-only, got {other:?}"
                        )))
                    }
                }
            }
            ("model", "extended_attention") => {
                self.model.extended_attention = parse_bool(section, key, value)?
            }
            ("diffusion", "train_steps") => {
                self.diffusion.train_steps = parse_num(section, key, value)?
            }
            ("diffusion", "beta_start") => {
                self.diffusion.beta_start = parse_num(section, key, value)?
            }
            ("diffusion", "beta_end") => self.diffusion.beta_end = parse_num(section, key, value)?,
            ("train", "stage") => self.train.stage = parse_num(section, key, value)?,
            ("train", "steps") => self.train.steps = parse_num(section, key, value)?,
            ("train", "batch_size") => self.train.batch_size = parse_num(section, key, value)?,
            ("train", "lr") => self.train.lr = parse_num(section, key, value)?,
            ("train", "warmup") => self.train.warmup = parse_num(section, key, value)?,
            ("train", "weight_decay") => self.train.weight_decay = parse_num(section, key, value)?,
            ("train", "task_mix") => self.train.task_mix = parse_num(section, key, value)?,
            ("train", "mask_loss_weight") => {
                self.train.mask_loss_weight = parse_num(section, key, value)?
            }
            ("train", "dice_weight") => self.train.dice_weight = parse_num(section, key, value)?,
            ("train", "bce_weight") => self.train.bce_weight = parse_num(section, key, value)?,
            ("train", "stage2_mask_supervision") => {
                self.train.stage2_mask_supervision = parse_bool(section, key, value)?
            }
            ("train", "seed") => self.train.seed = parse_num(section, key, value)?,
            ("train", "log_every") => self.train.log_every = parse_num(section, key, value)?,
            ("train", "checkpoint_every") => {
                self.train.checkpoint_every = parse_num(section, key, value)?
            }
            ("train", "init_from") => self.train.init_from = value.to_string(),
            ("sample", "steps") => self.sample.steps = parse_num(section, key, value)?,
            ("sample", "task") => self.sample.task = value.parse()?,
            ("sample", "tryoff_mask") => self.sample.tryoff_mask = value.parse()?,
            ("sample", "seed") => self.sample.seed = parse_num(section, key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?} in section [{section}]"
                )))
            }
        }
        Ok(())
    }

    /// Canonical serialization; `parse` of the output reproduces the
    /// config exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "root = {}", self.data.root);
        let _ = writeln!(s, "image_h = {}", self.data.image_h);
        let _ = writeln!(s, "image_w = {}", self.data.image_w);
        let _ = writeln!(s, "num_samples = {}", self.data.num_samples);
        let _ = writeln!(s, "seed = {}", self.data.seed);
        let _ = writeln!(s, "\n[codec]");
        let _ = writeln!(s, "factor = {}", self.codec.factor);
        let _ = writeln!(s, "scale = {}", self.codec.scale);
        let _ = writeln!(s, "shift = {}", self.codec.shift);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "d = {}", self.model.d);
        let _ = writeln!(s, "sam_queries = {}", self.model.sam_queries);
        let _ = writeln!(s, "sam_depth = {}", self.model.sam_depth);
        let _ = writeln!(s, "cat_tokens = {}", self.model.cat_tokens);
        let _ = writeln!(s, "srm_queries = {}", self.model.srm_queries);
        let _ = writeln!(s, "srm_units = {}", self.model.srm_units);
        let _ = writeln!(s, "heads = {}", self.model.heads);
        let _ = writeln!(
            s,
            "unet_widths = {},{},{}",
            self.model.unet_widths[0], self.model.unet_widths[1], self.model.unet_widths[2]
        );
        let _ = writeln!(s, "head_dim = {}", self.model.head_dim);
        let _ = writeln!(s, "groups = {}", self.model.groups);
        let _ = writeln!(
            s,
            "canvas = {}",
            match self.model.canvas {
                CanvasMode::PairConcat => "pair",
                CanvasMode::ActiveOnly => "active-only",
            }
        );
        let _ = writeln!(s, "extended_attention = {}", self.model.extended_attention);
        let _ = writeln!(s, "\n[diffusion]");
        let _ = writeln!(s, "train_steps = {}", self.diffusion.train_steps);
        let _ = writeln!(s, "beta_start = {}", self.diffusion.beta_start);
        let _ = writeln!(s, "beta_end = {}", self.diffusion.beta_end);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "stage = {}", self.train.stage);
        let _ = writeln!(s, "steps = {}", self.train.steps);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "lr = {}", self.train.lr);
        let _ = writeln!(s, "warmup = {}", self.train.warmup);
        let _ = writeln!(s, "weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "task_mix = {}", self.train.task_mix);
        let _ = writeln!(s, "mask_loss_weight = {}", self.train.mask_loss_weight);
        let _ = writeln!(s, "dice_weight = {}", self.train.dice_weight);
        let _ = writeln!(s, "bce_weight = {}", self.train.bce_weight);
        let _ = writeln!(
            s,
            "stage2_mask_supervision = {}",
            self.train.stage2_mask_supervision
        );
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "log_every = {}", self.train.log_every);
        let _ = writeln!(s, "checkpoint_every = {}", self.train.checkpoint_every);
        let _ = writeln!(s, "init_from = {}", self.train.init_from);
        let _ = writeln!(s, "\n[sample]");
        let _ = writeln!(s, "steps = {}", self.sample.steps);
        let _ = writeln!(s, "task = {}", self.sample.task.as_str());
        let _ = writeln!(s, "tryoff_mask = {}", self.sample.tryoff_mask.as_str());
        let _ = writeln!(s, "seed = {}", self.sample.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.image_h < 32 || self.data.image_w < 32 {
            return Err(Error::Config("image dims must be at least 32".into()));
        }
        if self.data.image_h % 16 != 0 || self.data.image_w % 16 != 0 {
            return Err(Error::Config("image dims must divide by 16".into()));
        }
        if self.codec.factor != 4 {
            return Err(Error::Config(
                "only compression factor 4 is wired to the three-scale decoders".into(),
            ));
        }
        if self.model.d % self.model.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must divide by {} heads",
                self.model.d, self.model.heads
            )));
        }
        if !(1..=2).contains(&self.train.stage) {
            return Err(Error::Config(format!(
                "training stage {} must be 1 or 2",
                self.train.stage
            )));
        }
        if !(0.0..=1.0).contains(&self.train.task_mix) {
            return Err(Error::Config(format!(
                "task mix {} outside [0, 1]",
                self.train.task_mix
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.sample.steps == 0 || self.sample.steps > self.diffusion.train_steps {
            return Err(Error::Config(format!(
                "sampling steps {} outside 1..={}",
                self.sample.steps, self.diffusion.train_steps
            )));
        }
        Ok(())
    }
}
