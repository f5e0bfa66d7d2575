//! Named model parameters and their typed views on a tape.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GeometryMode, ModelConfig, PositionMode};
use crate::decoder::{AttnHeadVars, DecoderLayerVars, DecoderVars, LstmVars, QueryInput, SelfAttnVars};
use crate::encoder::{EncoderHeadVars, EncoderLayerVars, EncoderVars, GeometryEmbedderVars, GEOMETRY_DIM};
use crate::error::{GatError, Result};
use crate::layers::{FeedForwardVars, GluVars, LayerNormVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn,
    Zeros,
    Ones,
    /// Zeros except the forget-gate block, which starts at 1.
    LstmBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct SpecList(Vec<ParamSpec>);

impl SpecList {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gain"), &[d], Init::Ones);
        self.push(format!("{prefix}.bias"), &[d], Init::Zeros);
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) {
        self.push(format!("{prefix}.ff.W_1"), &[d, d_ff], Init::Glorot);
        self.push(format!("{prefix}.ff.b_1"), &[d_ff], Init::Zeros);
        self.push(format!("{prefix}.ff.W_2"), &[d_ff, d], Init::Glorot);
        self.push(format!("{prefix}.ff.b_2"), &[d], Init::Zeros);
    }

    fn glu(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.glu.W_g"), &[2 * d, d], Init::Glorot);
        self.push(format!("{prefix}.glu.b_g"), &[d], Init::Zeros);
        self.push(format!("{prefix}.glu.W_i"), &[d, d], Init::Glorot);
        self.push(format!("{prefix}.glu.b_i"), &[d], Init::Zeros);
    }
}

/// Every parameter a configuration needs, in lexicographic name order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let dk = cfg.d_head();
    let mut s = SpecList(Vec::new());

    s.push("enc.in.W".into(), &[cfg.d_in, d], Init::Glorot);
    s.push("enc.in.b".into(), &[d], Init::Zeros);
    if cfg.geometry != GeometryMode::Off {
        s.push("enc.geo.W".into(), &[GEOMETRY_DIM, d], Init::FanIn);
        s.push("enc.geo.b".into(), &[d], Init::Zeros);
    }
    for l in 0..cfg.enc_layers {
        let p = format!("enc.layer{l}");
        for k in 0..cfg.heads {
            let mut names = vec!["W_QA", "W_KA", "W_VA"];
            if cfg.geometry != GeometryMode::Off {
                names.extend(["W_QG", "W_KG"]);
            }
            for n in names {
                s.push(format!("{p}.head{k}.{n}"), &[d, dk], Init::Glorot);
            }
        }
        s.push(format!("{p}.W_O"), &[d, d], Init::Glorot);
        if cfg.glu.in_encoder() {
            s.glu(&p, d);
        }
        s.ff(&p, d, cfg.d_ff);
        s.norm(&format!("{p}.ln1"), d);
        s.norm(&format!("{p}.ln2"), d);
    }

    s.push("dec.embed".into(), &[cfg.vocab_size, cfg.d_word], Init::Glorot);
    match cfg.position {
        PositionMode::Lstm => {
            let dh = cfg.d_hidden;
            s.push("dec.lstm.W_x".into(), &[cfg.d_word + d, 4 * dh], Init::Glorot);
            s.push("dec.lstm.W_h".into(), &[dh, 4 * dh], Init::Glorot);
            s.push("dec.lstm.b".into(), &[4 * dh], Init::LstmBias);
            s.push("dec.query.W".into(), &[dh, d], Init::Glorot);
            s.push("dec.query.b".into(), &[d], Init::Zeros);
        }
        PositionMode::Sinusoidal => {
            s.push("dec.word.W".into(), &[cfg.d_word, d], Init::Glorot);
            s.push("dec.word.b".into(), &[d], Init::Zeros);
        }
    }
    for l in 0..cfg.dec_layers {
        let p = format!("dec.layer{l}");
        if cfg.dec_self_attn {
            for k in 0..cfg.heads {
                for n in ["W_Q", "W_K", "W_V"] {
                    s.push(format!("{p}.self.head{k}.{n}"), &[d, dk], Init::Glorot);
                }
            }
            s.push(format!("{p}.self.W_O"), &[d, d], Init::Glorot);
            s.norm(&format!("{p}.ln0"), d);
        }
        for k in 0..cfg.heads {
            for n in ["W_Q", "W_K", "W_V"] {
                s.push(format!("{p}.head{k}.{n}"), &[d, dk], Init::Glorot);
            }
        }
        s.push(format!("{p}.W_O"), &[d, d], Init::Glorot);
        if cfg.glu.in_decoder() {
            s.glu(&p, d);
        }
        s.ff(&p, d, cfg.d_ff);
        s.norm(&format!("{p}.ln1"), d);
        s.norm(&format!("{p}.ln2"), d);
    }
    s.push("out.W_p".into(), &[cfg.vocab_size, d], Init::Glorot);
    s.push("out.b_p".into(), &[cfg.vocab_size], Init::Zeros);

    let mut specs = s.0;
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// The complete parameter collection of one model, keyed by path.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ModelParams {
    /// Deterministic initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::LstmBias => {
                    let dh = n / 4;
                    let mut b = vec![0.0; n];
                    b[dh..2 * dh].iter_mut().for_each(|v| *v = 1.0);
                    b
                }
                Init::Glorot => {
                    let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
                }
                Init::FanIn => {
                    let limit = (6.0 / spec.shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
                }
            };
            tensors.insert(spec.name, Arc::new(Tensor::new(&spec.shape, data)?));
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams {
            tensors: tensors.into_iter().map(|(k, t)| (k, Arc::new(t))).collect(),
        }
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        ModelParams {
            tensors: other
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Arc::new(Tensor::zeros(t.shape()))))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| &**t)
    }

    /// Copies the tensor first if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors
            .insert(name.into(), Arc::new(t))
            .map(Arc::unwrap_or_clone)
    }

    /// Parameters in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().map(|(k, t)| (k, &**t))
    }

    pub(crate) fn shared(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, t)| (k, Arc::make_mut(t)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// First parameter (in name order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Checks that names and shapes are exactly what `cfg` requires.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                None => return Err(GatError::MissingParam(spec.name.clone())),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(GatError::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(GatError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// All parameters of a model registered on one tape, with typed views.
pub struct BoundModel {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    vars: BTreeMap<String, Var>,
}

struct Binder<'a> {
    vars: &'a BTreeMap<String, Var>,
}

impl Binder<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GatError::MissingParam(name.to_string()))
    }

    fn norm(&self, p: &str) -> Result<LayerNormVars> {
        Ok(LayerNormVars {
            gain: self.get(&format!("{p}.gain"))?,
            bias: self.get(&format!("{p}.bias"))?,
        })
    }

    fn ff(&self, p: &str) -> Result<FeedForwardVars> {
        Ok(FeedForwardVars {
            w1: self.get(&format!("{p}.ff.W_1"))?,
            b1: self.get(&format!("{p}.ff.b_1"))?,
            w2: self.get(&format!("{p}.ff.W_2"))?,
            b2: self.get(&format!("{p}.ff.b_2"))?,
        })
    }

    fn glu(&self, p: &str) -> Result<GluVars> {
        Ok(GluVars {
            w_g: self.get(&format!("{p}.glu.W_g"))?,
            b_g: self.get(&format!("{p}.glu.b_g"))?,
            w_i: self.get(&format!("{p}.glu.W_i"))?,
            b_i: self.get(&format!("{p}.glu.b_i"))?,
        })
    }

    fn attn_heads(&self, p: &str, heads: usize) -> Result<Vec<AttnHeadVars>> {
        (0..heads)
            .map(|k| {
                Ok(AttnHeadVars {
                    w_q: self.get(&format!("{p}.head{k}.W_Q"))?,
                    w_k: self.get(&format!("{p}.head{k}.W_K"))?,
                    w_v: self.get(&format!("{p}.head{k}.W_V"))?,
                })
            })
            .collect()
    }
}

impl BoundModel {
    /// Registers every parameter as a differentiable leaf.
    pub fn bind(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig) -> Result<Self> {
        let vars: BTreeMap<String, Var> = params
            .shared()
            .map(|(name, t)| (name.clone(), tape.shared_param(Arc::clone(t))))
            .collect();
        let b = Binder { vars: &vars };
        let geo_on = cfg.geometry != GeometryMode::Off;

        let mut enc_layers = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let p = format!("enc.layer{l}");
            let heads = (0..cfg.heads)
                .map(|k| {
                    let h = format!("{p}.head{k}");
                    Ok(EncoderHeadVars {
                        w_qa: b.get(&format!("{h}.W_QA"))?,
                        w_ka: b.get(&format!("{h}.W_KA"))?,
                        w_va: b.get(&format!("{h}.W_VA"))?,
                        geometry: if geo_on {
                            Some((b.get(&format!("{h}.W_QG"))?, b.get(&format!("{h}.W_KG"))?))
                        } else {
                            None
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            enc_layers.push(EncoderLayerVars {
                heads,
                w_o: b.get(&format!("{p}.W_O"))?,
                glu: if cfg.glu.in_encoder() { Some(b.glu(&p)?) } else { None },
                ff: b.ff(&p)?,
                norm1: b.norm(&format!("{p}.ln1"))?,
                norm2: b.norm(&format!("{p}.ln2"))?,
            });
        }
        let encoder = EncoderVars {
            w_in: b.get("enc.in.W")?,
            b_in: b.get("enc.in.b")?,
            geometry: if geo_on {
                Some(GeometryEmbedderVars {
                    w_geo: b.get("enc.geo.W")?,
                    b_geo: b.get("enc.geo.b")?,
                })
            } else {
                None
            },
            layers: enc_layers,
        };

        let input = match cfg.position {
            PositionMode::Lstm => QueryInput::Lstm {
                lstm: LstmVars {
                    w_x: b.get("dec.lstm.W_x")?,
                    w_h: b.get("dec.lstm.W_h")?,
                    b: b.get("dec.lstm.b")?,
                },
                w_q: b.get("dec.query.W")?,
                b_q: b.get("dec.query.b")?,
            },
            PositionMode::Sinusoidal => QueryInput::Sinusoidal {
                w_word: b.get("dec.word.W")?,
                b_word: b.get("dec.word.b")?,
            },
        };
        let mut dec_layers = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let p = format!("dec.layer{l}");
            let self_attn = if cfg.dec_self_attn {
                Some(SelfAttnVars {
                    heads: b.attn_heads(&format!("{p}.self"), cfg.heads)?,
                    w_o: b.get(&format!("{p}.self.W_O"))?,
                    norm: b.norm(&format!("{p}.ln0"))?,
                })
            } else {
                None
            };
            dec_layers.push(DecoderLayerVars {
                self_attn,
                heads: b.attn_heads(&p, cfg.heads)?,
                w_o: b.get(&format!("{p}.W_O"))?,
                glu: if cfg.glu.in_decoder() { Some(b.glu(&p)?) } else { None },
                ff: b.ff(&p)?,
                norm1: b.norm(&format!("{p}.ln1"))?,
                norm2: b.norm(&format!("{p}.ln2"))?,
            });
        }
        let decoder = DecoderVars {
            embed: b.get("dec.embed")?,
            input,
            layers: dec_layers,
            w_p: b.get("out.W_p")?,
            b_p: b.get("out.b_p")?,
        };
        Ok(BoundModel { encoder, decoder, vars })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(k, v)| (k, *v))
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_are_sorted_and_unique() {
        let specs = param_specs(&ModelConfig::default());
        for w in specs.windows(2) {
            assert!(w[0].name < w[1].name);
        }
    }

    #[test]
    fn init_is_deterministic_and_matches_config() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg).unwrap();
        let b = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, b);
        a.check_against(&cfg).unwrap();
        let other = ModelParams::init(&ModelConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn glorot_bounds_and_forget_bias() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let w = p.get("enc.layer0.W_O").unwrap();
        let limit = (6.0 / 128.0f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        let b = p.get("dec.lstm.b").unwrap().data();
        let dh = cfg.d_hidden;
        assert!(b[..dh].iter().all(|&v| v == 0.0));
        assert!(b[dh..2 * dh].iter().all(|&v| v == 1.0));
        assert!(b[2 * dh..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ablation_switches_change_the_parameter_set() {
        let base = ModelConfig {
            geometry: GeometryMode::Off,
            position: PositionMode::Sinusoidal,
            glu: crate::config::GluPlacement::None,
            ..ModelConfig::default()
        };
        let names: Vec<String> = param_specs(&base).into_iter().map(|s| s.name).collect();
        assert!(!names.iter().any(|n| n.contains("W_QG") || n.contains("glu") || n.contains("lstm")));
        assert!(names.contains(&"dec.word.W".to_string()));
    }

    #[test]
    fn bind_exposes_every_parameter() {
        let cfg = ModelConfig {
            dec_self_attn: true,
            glu: crate::config::GluPlacement::EncDec,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &params, &cfg).unwrap();
        assert_eq!(bound.vars().count(), params.len());
        assert!(bound.decoder.layers[0].self_attn.is_some());
        assert!(bound.decoder.layers[0].glu.is_some());
    }
}
