//! Model configuration and its flat `key=value` text form.

use std::fmt;
use std::str::FromStr;

use crate::error::{GatError, Result};

/// How box geometry enters the encoder's queries and keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeometryMode {
    /// Appearance-only attention.
    Off,
    /// `[X W_QA ; X_G W_QG]`, logits scaled by `sqrt(2 d_k)`.
    Concat,
    /// `X W_QA + X_G W_QG`, logits scaled by `sqrt(d_k)`.
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionMode {
    Sinusoidal,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GluPlacement {
    None,
    Enc,
    EncDec,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(<$ty>::$variant => $text),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl serde::Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = GatError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(<$ty>::$variant),)+
                    other => Err(GatError::Config(format!(
                        "unknown {} value {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(GeometryMode { Off => "off", Concat => "concat", Add => "add" });
text_enum!(PositionMode { Sinusoidal => "sinusoidal", Lstm => "lstm" });
text_enum!(GluPlacement { None => "none", Enc => "enc", EncDec => "enc_dec" });

impl GluPlacement {
    pub fn in_encoder(self) -> bool {
        !matches!(self, GluPlacement::None)
    }

    pub fn in_decoder(self) -> bool {
        matches!(self, GluPlacement::EncDec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input appearance feature width.
    pub d_in: usize,
    pub d_model: usize,
    /// Position-LSTM hidden width.
    pub d_hidden: usize,
    pub d_word: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub t_max: usize,
    pub geometry: GeometryMode,
    pub position: PositionMode,
    pub glu: GluPlacement,
    /// Masked self-attention sub-layer in every decoder layer.
    pub dec_self_attn: bool,
    pub attn_dropout: f64,
    pub lstm_dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 16,
            d_model: 64,
            d_hidden: 128,
            d_word: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 128,
            vocab_size: 32,
            t_max: 16,
            geometry: GeometryMode::Concat,
            position: PositionMode::Lstm,
            glu: GluPlacement::Enc,
            dec_self_attn: false,
            attn_dropout: 0.0,
            lstm_dropout: 0.0,
            seed: 0,
        }
    }
}

const KEYS: [&str; 17] = [
    "d_in",
    "d_model",
    "d_hidden",
    "d_word",
    "heads",
    "enc_layers",
    "dec_layers",
    "d_ff",
    "vocab_size",
    "t_max",
    "mode_geometry",
    "mode_position",
    "glu_placement",
    "dec_self_attn",
    "attn_dropout",
    "lstm_dropout",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GatError::Config(format!("bad value {value:?} for {key}")))
}

impl ModelConfig {
    /// The full-size setting: 2048-d detector features projected to 512,
    /// 8 heads, 3+3 layers, a 1024-d LSTM and dropout on.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_in: 2048,
            d_model: 512,
            d_hidden: 1024,
            d_word: 512,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            d_ff: 2048,
            vocab_size: 9487,
            attn_dropout: 0.1,
            lstm_dropout: 0.5,
            ..ModelConfig::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("d_word", self.d_word),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(GatError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(GatError::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_model < 2 {
            return Err(GatError::Config("d_model must be at least 2 for layer norm".into()));
        }
        if self.t_max < 2 {
            return Err(GatError::Config("t_max must be at least 2".into()));
        }
        for (name, p) in [("attn_dropout", self.attn_dropout), ("lstm_dropout", self.lstm_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(GatError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_in" => self.d_in = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_hidden" => self.d_hidden = parse(key, value)?,
            "d_word" => self.d_word = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "mode_geometry" => self.geometry = value.parse()?,
            "mode_position" => self.position = value.parse()?,
            "glu_placement" => self.glu = value.parse()?,
            "dec_self_attn" => self.dec_self_attn = parse(key, value)?,
            "attn_dropout" => self.attn_dropout = parse(key, value)?,
            "lstm_dropout" => self.lstm_dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_in" => self.d_in.to_string(),
            "d_model" => self.d_model.to_string(),
            "d_hidden" => self.d_hidden.to_string(),
            "d_word" => self.d_word.to_string(),
            "heads" => self.heads.to_string(),
            "enc_layers" => self.enc_layers.to_string(),
            "dec_layers" => self.dec_layers.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "t_max" => self.t_max.to_string(),
            "mode_geometry" => self.geometry.to_string(),
            "mode_position" => self.position.to_string(),
            "glu_placement" => self.glu.to_string(),
            "dec_self_attn" => self.dec_self_attn.to_string(),
            // `{:?}` prints the shortest string that round-trips exactly.
            "attn_dropout" => format!("{:?}", self.attn_dropout),
            "lstm_dropout" => format!("{:?}", self.lstm_dropout),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// All settings as `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses `key=value` lines over the defaults. Unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in parse_kv(text)? {
            if !cfg.apply(&key, &value)? {
                return Err(GatError::Config(format!("unknown key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` text into pairs, skipping blank lines and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| GatError::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            geometry: GeometryMode::Add,
            position: PositionMode::Sinusoidal,
            glu: GluPlacement::EncDec,
            attn_dropout: 0.1,
            seed: 99,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(ModelConfig::from_kv("bogus=1").is_err());
        assert!(ModelConfig::from_kv("mode_geometry=sideways").is_err());
        assert!(ModelConfig::from_kv("t_max=1").is_err());
    }

    #[test]
    fn full_scale_is_valid() {
        let cfg = ModelConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_head(), 64);
    }
}
