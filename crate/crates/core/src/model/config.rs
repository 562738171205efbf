use crate::conv::{ConvKind, ConvSpec};
use crate::error::{Result, SpanError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mil,
    Unet,
}

/// How the decoder merges upsampled features with the encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Concat,
    Add,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoSac,
    NoCar,
    NoShift,
    NoCtx,
    NoRpb,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::NoSac, Ablation::NoCar, Ablation::NoShift, Ablation::NoCtx, Ablation::NoRpb];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoSac => "no_sac",
            Ablation::NoCar => "no_car",
            Ablation::NoShift => "no_shift",
            Ablation::NoCtx => "no_ctx",
            Ablation::NoRpb => "no_rpb",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = SpanError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SpanError::InvalidConfig(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Every stage becomes a 1x1 projection.
    pub no_sac: bool,
    /// Window side 0: CAR blocks are the identity.
    pub no_car: bool,
    pub no_shift: bool,
    pub no_ctx: bool,
    /// Bias table zeroed and frozen.
    pub no_rpb: bool,
}

impl Ablations {
    pub fn enable(&mut self, a: Ablation) {
        match a {
            Ablation::NoSac => self.no_sac = true,
            Ablation::NoCar => self.no_car = true,
            Ablation::NoShift => self.no_shift = true,
            Ablation::NoCtx => self.no_ctx = true,
            Ablation::NoRpb => self.no_rpb = true,
        }
    }

    pub fn active(&self) -> Vec<Ablation> {
        Ablation::ALL
            .into_iter()
            .filter(|a| match a {
                Ablation::NoSac => self.no_sac,
                Ablation::NoCar => self.no_car,
                Ablation::NoShift => self.no_shift,
                Ablation::NoCtx => self.no_ctx,
                Ablation::NoRpb => self.no_rpb,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    /// Dice weight in the hybrid loss.
    pub lambda: f64,
    /// Dice smoothing.
    pub eps: f64,
    /// Survival bins.
    pub bins: usize,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { lambda: 0.75, eps: 1.0, bins: 3 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SpanError::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.eps < 0.0 || self.bins == 0 {
            return Err(SpanError::InvalidConfig("dice eps must be >= 0 and bins >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_dim: usize,
    /// Width after each stage; the first stage is a 1x1 projection.
    pub dims: Vec<usize>,
    pub window: usize,
    pub heads: usize,
    /// CAR blocks per stage (each block is a regular + shifted pair).
    pub car_pairs: usize,
    pub ffn_ratio: usize,
    pub num_ctx: usize,
    pub head: HeadKind,
    /// Bag classes for MIL, pixel classes for segmentation.
    pub num_classes: usize,
    pub skip: SkipMode,
    pub ablation: Ablations,
    pub loss: LossSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_dim: 8,
            dims: vec![16, 32, 32],
            window: 4,
            heads: 2,
            car_pairs: 1,
            ffn_ratio: 4,
            num_ctx: 1,
            head: HeadKind::Mil,
            num_classes: 2,
            skip: SkipMode::Concat,
            ablation: Ablations::default(),
            loss: LossSpec::default(),
        }
    }
}

/// Resolved layout of one encoder stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub conv: ConvSpec,
    pub window: usize,
    pub heads: usize,
    pub shift: bool,
    pub car_pairs: usize,
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.dims.len()
    }

    pub fn effective_num_ctx(&self) -> usize {
        if self.ablation.no_ctx {
            0
        } else {
            self.num_ctx
        }
    }

    pub fn effective_window(&self) -> usize {
        if self.ablation.no_car {
            0
        } else {
            self.window
        }
    }

    pub fn shift_enabled(&self) -> bool {
        !self.ablation.no_shift
    }

    pub fn stage_specs(&self) -> Result<Vec<StageSpec>> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut d_in = self.in_dim;
        for (l, &d) in self.dims.iter().enumerate() {
            let k = if l == 0 || self.ablation.no_sac { 1 } else { 2 };
            out.push(StageSpec {
                conv: ConvSpec::new(k, k, 1, d_in, d)?,
                window: self.effective_window(),
                heads: self.heads,
                shift: self.shift_enabled(),
                car_pairs: self.car_pairs,
            });
            d_in = d;
        }
        Ok(out)
    }

    /// Product of the stage strides.
    pub fn total_stride(&self) -> u32 {
        self.stage_specs().map(|s| s.iter().map(|s| s.conv.stride).product()).unwrap_or(1)
    }

    /// Smallest translation that maps every stage's coordinates and window
    /// partitions onto themselves.
    pub fn translation_period(&self) -> u32 {
        self.total_stride() * self.effective_window().max(1) as u32
    }

    /// `(car width, transposed conv spec)` for each decoder stage, coarsest first.
    pub fn decoder_specs(&self) -> Result<Vec<(usize, ConvSpec)>> {
        let specs = self.stage_specs()?;
        let l = specs.len();
        let mut out = Vec::with_capacity(l);
        let mut width = self.dims[l - 1];
        for i in (0..l).rev() {
            let target = if i == 0 { self.dims[0] } else { self.dims[i - 1] };
            let enc = &specs[i].conv;
            let mut conv = ConvSpec::new(enc.kernel, enc.stride, enc.dilation, width, target)?;
            conv.kind = ConvKind::Transposed;
            out.push((width, conv));
            width = match self.skip {
                SkipMode::Concat => 2 * target,
                SkipMode::Add | SkipMode::None => target,
            };
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpanError::InvalidConfig(m));
        if self.in_dim == 0 || self.dims.is_empty() || self.dims.contains(&0) {
            return bad("in_dim and every stage width must be positive".into());
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        if let Some(d) = self.dims.iter().find(|&&d| d % self.heads != 0) {
            return bad(format!("width {d} is not divisible by {} heads", self.heads));
        }
        if self.effective_window() > 0 && self.shift_enabled() && self.effective_window() % 2 == 1 && self.effective_window() > 1 {
            return bad(format!("shifted windows need an even side, got {}", self.window));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be >= 1".into());
        }
        self.loss.validate()
    }
}
