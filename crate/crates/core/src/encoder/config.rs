use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layout::ADAPTER_SIGMA;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

pub(crate) use named_enum;

named_enum!(
    /// Source of the layout term added to the input embeddings.
    LayoutMode { None => "none", Winding => "winding", Autoencoder => "autoencoder", Graph => "graph" }
);
named_enum!(PositionalMode { Trainable => "trainable", Sinusoidal => "sinusoidal" });
named_enum!(
    /// What a single dropout draw removes from the positional embeddings.
    DropoutVariant { Token => "token", Dimension => "dimension", Element => "element" }
);
named_enum!(QScheduleMode { None => "none", LinearHalf => "linear_half" });

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub layout: LayoutMode,
    pub positional: PositionalMode,
    pub dropout_variant: DropoutVariant,
    pub q_schedule: QScheduleMode,
    pub adapter_sigma: f64,
    /// Leave the positional term out of the sum entirely once q reaches 1.
    pub drop_positional_at_full_q: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n: 128,
            layers: 4,
            heads: 4,
            ffn: 512,
            max_len: 128,
            vocab_size: 2048,
            layout: LayoutMode::Winding,
            positional: PositionalMode::Trainable,
            dropout_variant: DropoutVariant::Element,
            q_schedule: QScheduleMode::LinearHalf,
            adapter_sigma: ADAPTER_SIGMA,
            drop_positional_at_full_q: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 || self.heads == 0 || self.n % self.heads != 0 {
            return bad(format!("n={} must be a positive multiple of heads={}", self.n, self.heads));
        }
        if self.layout == LayoutMode::Winding && self.n % 8 != 0 {
            return bad(format!("winding layout needs n divisible by 8, got {}", self.n));
        }
        if self.layers == 0 || self.ffn == 0 || self.max_len < 2 {
            return bad("layers, ffn and max_len must be positive (max_len >= 2)".into());
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS as usize {
            return bad(format!("vocab_size {} leaves no room past the specials", self.vocab_size));
        }
        if !(self.adapter_sigma >= 0.0) {
            return bad("adapter_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n / self.heads
    }

    /// Width `k` of the raw layout vectors fed to the adapter.
    pub fn layout_dim(&self) -> usize {
        match self.layout {
            LayoutMode::None => 0,
            LayoutMode::Winding => self.n,
            LayoutMode::Autoencoder => crate::alt_layout::LATENT_DIM,
            LayoutMode::Graph => crate::alt_layout::GinConfig::default().output,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("n", self.n.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("layout", self.layout.to_string()),
            ("positional", self.positional.to_string()),
            ("dropout_variant", self.dropout_variant.to_string()),
            ("q_schedule", self.q_schedule.to_string()),
            ("adapter_sigma", format!("{:?}", self.adapter_sigma)),
            ("drop_positional_at_full_q", self.drop_positional_at_full_q.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Apply recognized keys from `map`, leaving others at their current
    /// values. Unknown keys are the caller's concern.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "n" => self.n = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn" => self.ffn = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "layout" => self.layout = value.parse()?,
            "positional" => self.positional = value.parse()?,
            "dropout_variant" => self.dropout_variant = value.parse()?,
            "q_schedule" => self.q_schedule = value.parse()?,
            "adapter_sigma" => self.adapter_sigma = num(key, value)?,
            "drop_positional_at_full_q" => self.drop_positional_at_full_q = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            if !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown encoder key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
