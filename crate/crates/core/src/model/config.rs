//! Model configuration: presets, variants and a `key = value` text format.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Mlp,
    ConvEncDec,
}

/// Ablation grid: single encoder, dual CFP encoders, CFP + TCFP encoders,
/// tone-octave decoders without TCFP, and the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    D,
    Tc,
    F,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

macro_rules! text_enum {
    ($ty:ident { $($v:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$v),+];
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$v => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, ModelError> {
                match s.trim() {
                    $($s => Ok($ty::$v),)+
                    other => Err(ModelError::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty).to_lowercase(),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(Preset { Paper => "paper", Desk => "desk" });
text_enum!(BackboneKind { Mlp => "mlp", ConvEncDec => "conv-encdec" });
text_enum!(Variant { Base => "base", D => "d", Tc => "tc", F => "f", Full => "full" });
text_enum!(OutputActivation { Sigmoid => "sigmoid", Softmax => "softmax" });

impl Variant {
    pub fn uses_tcfp(self) -> bool {
        matches!(self, Variant::Tc | Variant::Full)
    }

    pub fn dual_encoder(self) -> bool {
        self != Variant::Base
    }

    pub fn has_decoders(self) -> bool {
        matches!(self, Variant::F | Variant::Full)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub backbone: BackboneKind,
    pub variant: Variant,
    pub seed: u64,
    pub bins: usize,
    pub bins_per_octave: usize,
    pub tones: usize,
    pub octaves: usize,
    pub frames: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernel: usize,
    pub pool_kernels: [usize; 3],
    pub mlp_hidden: Vec<usize>,
    pub fusion_kernel: usize,
    pub positional_encoding: bool,
    pub output_activation: OutputActivation,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = ModelConfig {
            preset,
            backbone: BackboneKind::ConvEncDec,
            variant: Variant::Full,
            seed: 0,
            bins: 360,
            bins_per_octave: 60,
            tones: 13,
            octaves: 7,
            frames: 128,
            d_model: 1024,
            heads: 8,
            layers: 2,
            ff_width: 4096,
            conv_channels: [32, 64, 128],
            conv_kernel: 5,
            pool_kernels: [4, 3, 6],
            mlp_hidden: vec![1024, 1024],
            fusion_kernel: 5,
            positional_encoding: true,
            output_activation: OutputActivation::Sigmoid,
        };
        match preset {
            Preset::Paper => base,
            Preset::Desk => ModelConfig {
                backbone: BackboneKind::Mlp,
                d_model: 64,
                heads: 4,
                ff_width: 256,
                conv_channels: [8, 16, 32],
                mlp_hidden: vec![256, 256],
                ..base
            },
        }
    }

    pub fn paper() -> Self {
        Self::preset(Preset::Paper)
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_backbone(mut self, backbone: BackboneKind) -> Self {
        self.backbone = backbone;
        self
    }

    /// Width of the concatenated encoder outputs.
    pub fn combined_width(&self) -> usize {
        2 * (self.bins + 1)
    }

    pub fn fusion_channels(&self) -> usize {
        if self.variant.has_decoders() {
            self.combined_width() + self.tones + self.octaves
        } else {
            self.combined_width()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.bins == 0 || self.bins_per_octave == 0 || !self.bins.is_multiple_of(self.bins_per_octave) {
            return bad(format!("{} bins do not split into octaves of {}", self.bins, self.bins_per_octave));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.layers == 0 || self.ff_width == 0 || self.tones < 2 || self.octaves < 2 || self.frames == 0 {
            return bad("layers, ff_width, frames must be positive; tones/octaves at least 2".into());
        }
        if self.fusion_kernel.is_multiple_of(2) || self.conv_kernel.is_multiple_of(2) {
            return bad("convolution kernels must be odd".into());
        }
        if self.backbone == BackboneKind::ConvEncDec {
            let reduction: usize = self.pool_kernels.iter().product();
            if self.pool_kernels.contains(&0) || !self.bins.is_multiple_of(reduction) {
                return bad(format!("{} bins not divisible by pool product {reduction}", self.bins));
            }
            if self.conv_channels.contains(&0) {
                return bad("conv channels must be positive".into());
            }
        }
        if self.backbone == BackboneKind::Mlp && self.mlp_hidden.contains(&0) {
            return bad("mlp widths must be positive".into());
        }
        Ok(())
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.parse().map_err(|_| ModelError::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>, ModelError> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        fn triple(key: &str, v: &str) -> Result<[usize; 3], ModelError> {
            list(key, v)?
                .try_into()
                .map_err(|_| ModelError::Config(format!("`{key}` needs three values")))
        }
        let v = value.trim();
        match key.trim() {
            "preset" => {
                // resets everything but the variant and seed
                let p: Preset = v.parse()?;
                let fresh = ModelConfig::preset(p);
                *self = ModelConfig {
                    variant: self.variant,
                    seed: self.seed,
                    ..fresh
                };
            }
            "backbone" => self.backbone = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "bins" => self.bins = num(key, v)?,
            "bins_per_octave" => self.bins_per_octave = num(key, v)?,
            "tones" => self.tones = num(key, v)?,
            "octaves" => self.octaves = num(key, v)?,
            "frames" => self.frames = num(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "ff_width" => self.ff_width = num(key, v)?,
            "conv_channels" => self.conv_channels = triple(key, v)?,
            "conv_kernel" => self.conv_kernel = num(key, v)?,
            "pool_kernels" => self.pool_kernels = triple(key, v)?,
            "mlp_hidden" => self.mlp_hidden = list(key, v)?,
            "fusion_kernel" => self.fusion_kernel = num(key, v)?,
            "positional_encoding" => self.positional_encoding = num(key, v)?,
            "output_activation" => self.output_activation = v.parse()?,
            other => return Err(ModelError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ModelError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| ModelError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Parses a config file; a `preset` line, if any, must come first.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::desk();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.to_string());
        kv("backbone", self.backbone.to_string());
        kv("variant", self.variant.to_string());
        kv("seed", self.seed.to_string());
        kv("bins", self.bins.to_string());
        kv("bins_per_octave", self.bins_per_octave.to_string());
        kv("tones", self.tones.to_string());
        kv("octaves", self.octaves.to_string());
        kv("frames", self.frames.to_string());
        kv("d_model", self.d_model.to_string());
        kv("heads", self.heads.to_string());
        kv("layers", self.layers.to_string());
        kv("ff_width", self.ff_width.to_string());
        kv("conv_channels", join(&self.conv_channels));
        kv("conv_kernel", self.conv_kernel.to_string());
        kv("pool_kernels", join(&self.pool_kernels));
        kv("mlp_hidden", join(&self.mlp_hidden));
        kv("fusion_kernel", self.fusion_kernel.to_string());
        kv("positional_encoding", self.positional_encoding.to_string());
        kv("output_activation", self.output_activation.to_string());
        s
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
