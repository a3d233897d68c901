//! Model assembly: configuration, parameter manifest, initialization,
//! forward passes for the offline / masked / chunk-oracle attention plans,
//! parameter accounting, and the versioned binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::attention::{build_chunk_mask, build_mask, ContextWindow, MhaVars};
use crate::error::{Error, Result};
use crate::init::{init_bound, InitScheme, InitSpec};
use crate::layers::{
    block_forward, linear_encoder, vgg_encoder, Activation, BlockVars, DropoutCtx, FfnVars,
    IcMode, IcVars, LayerNormVars, LinearEncoderVars, NormScheme, VggVars, VGG_CONV_LAYERS,
};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Dtype, Mask, Scalar, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"STRMFMR1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontEndKind {
    Linear,
    Vgg,
}

/// Streaming regime the model is configured for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamingSpec {
    Offline,
    Masked(ContextWindow),
    Xl { chunk: usize },
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub front_end: FrontEndKind,
    pub interleaved_conv: bool,
    pub norm: NormScheme,
    pub streaming: StreamingSpec,
    pub n_classes: usize,
    pub n_features: usize,
    pub activation: Activation,
    pub init: InitScheme,
    pub seed: u64,
    pub ln_eps: f64,
    pub vgg_channels: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 2,
            heads: 2,
            d_model: 32,
            d_ff: 2048,
            dropout: 0.1,
            front_end: FrontEndKind::Linear,
            interleaved_conv: false,
            norm: NormScheme::Pre,
            streaming: StreamingSpec::Offline,
            n_classes: 8,
            n_features: 80,
            activation: Activation::Relu,
            init: InitScheme::DepthScale,
            seed: 1,
            ln_eps: 1e-5,
            vgg_channels: [32, 32, 64, 64],
        }
    }
}

impl ModelConfig {
    /// Table-2 reference configuration used by the parameter-count check:
    /// 12 layers, 8 heads, d_model 624, VGG front-end, no interleaved conv,
    /// 9404 senone classes. Reported size in the reference is 53.5 M.
    pub fn table2_8h_624() -> Self {
        ModelConfig {
            depth: 12,
            heads: 8,
            d_model: 624,
            d_ff: 2048,
            front_end: FrontEndKind::Vgg,
            interleaved_conv: false,
            n_classes: 9404,
            n_features: 80,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.depth < 1 {
            bad.push(format!("depth must be >= 1, got {}", self.depth));
        }
        if self.heads < 1 {
            bad.push(format!("heads must be >= 1, got {}", self.heads));
        }
        if self.d_model < 1 || self.heads >= 1 && !self.d_model.is_multiple_of(self.heads) {
            bad.push(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff < 1 {
            bad.push("d_ff must be >= 1".into());
        }
        if self.n_classes < 2 {
            bad.push(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.n_features < 1 {
            bad.push("n_features must be >= 1".into());
        }
        if self.front_end == FrontEndKind::Vgg && self.n_features < 4 {
            bad.push(format!(
                "VGG front-end needs n_features >= 4 (two frequency pools), got {}",
                self.n_features
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.ln_eps <= 0.0 {
            bad.push("ln_eps must be positive".into());
        }
        if let StreamingSpec::Xl { chunk } = self.streaming {
            if chunk < 1 {
                bad.push("xl chunk size must be >= 1".into());
            }
        }
        if self.vgg_channels.iter().any(|&c| c < 1) {
            bad.push("vgg_channels must all be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    /// Output frames produced from `t_in` input frames.
    pub fn out_len(&self, t_in: usize) -> usize {
        match self.front_end {
            FrontEndKind::Linear => t_in,
            FrontEndKind::Vgg => t_in / 2,
        }
    }

    /// Front-end context (past, future) in output frames.
    pub fn front_end_context(&self) -> (u64, u64) {
        match self.front_end {
            FrontEndKind::Linear => (0, 0),
            FrontEndKind::Vgg => (
                crate::layers::vgg_past_frames(),
                crate::layers::vgg_lookahead_frames(),
            ),
        }
    }

    fn vgg_proj_in(&self) -> usize {
        (self.n_features / 2 / 2) * self.vgg_channels[3]
    }

    // ---- key=value text codec (config files and checkpoint header) -------------

    pub fn to_text(&self) -> String {
        let window = match self.streaming {
            StreamingSpec::Masked(w) => w,
            _ => ContextWindow::unbounded(),
        };
        let chunk = match self.streaming {
            StreamingSpec::Xl { chunk } => chunk,
            _ => 40,
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("depth", self.depth.to_string());
        kv("heads", self.heads.to_string());
        kv("d_model", self.d_model.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("dropout", format!("{}", self.dropout));
        kv(
            "front_end",
            match self.front_end {
                FrontEndKind::Linear => "linear".into(),
                FrontEndKind::Vgg => "vgg".into(),
            },
        );
        kv("interleaved_conv", self.interleaved_conv.to_string());
        kv(
            "norm",
            match self.norm {
                NormScheme::Pre => "pre".into(),
                NormScheme::Post => "post".into(),
            },
        );
        kv(
            "streaming",
            match self.streaming {
                StreamingSpec::Offline => "offline".into(),
                StreamingSpec::Masked(_) => "masked".into(),
                StreamingSpec::Xl { .. } => "xl".into(),
            },
        );
        kv(
            "window",
            format!("{}", WindowFlag(window)),
        );
        kv("chunk", chunk.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("n_features", self.n_features.to_string());
        kv(
            "activation",
            match self.activation {
                Activation::Relu => "relu".into(),
                Activation::Gelu => "gelu".into(),
            },
        );
        kv("init", self.init.name().into());
        kv("seed", self.seed.to_string());
        kv("ln_eps", format!("{}", self.ln_eps));
        kv(
            "vgg_channels",
            self.vgg_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s
    }

    /// Parse key=value lines. Unknown keys are rejected; missing keys fall
    /// back to defaults and are reported in the returned notice list.
    /// Extra keys in `allowed_extra` are ignored here (they belong to other
    /// sections of a combined config file).
    pub fn parse_text(
        text: &str,
        source: &str,
        allowed_extra: &[&str],
    ) -> Result<(Self, Vec<String>)> {
        let known = [
            "depth",
            "heads",
            "d_model",
            "d_ff",
            "dropout",
            "front_end",
            "interleaved_conv",
            "norm",
            "streaming",
            "window",
            "chunk",
            "n_classes",
            "n_features",
            "activation",
            "init",
            "seed",
            "ln_eps",
            "vgg_channels",
        ];
        let mut seen: HashMap<String, String> = HashMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::file(source, format!("line {}: expected key = value", ln + 1))
            })?;
            let k = k.trim().to_string();
            let v = v.trim().to_string();
            if !known.contains(&k.as_str()) && !allowed_extra.contains(&k.as_str()) {
                return Err(Error::file(source, format!("unknown key {k:?}")));
            }
            seen.insert(k, v);
        }

        let mut cfg = ModelConfig::default();
        let mut notices = Vec::new();
        let get = |key: &str| -> Option<String> { seen.get(key).cloned() };

        macro_rules! field {
            ($key:literal, $setter:expr) => {
                match get($key) {
                    Some(v) => {
                        #[allow(clippy::redundant_closure_call)]
                        ($setter)(&v).map_err(|msg: String| {
                            Error::file(source, format!("key {}: {msg}", $key))
                        })?
                    }
                    None => notices.push(format!(
                        "{}: key {} missing, using default",
                        source, $key
                    )),
                }
            };
        }

        field!("depth", |v: &str| {
            cfg.depth = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("heads", |v: &str| {
            cfg.heads = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("d_model", |v: &str| {
            cfg.d_model = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("d_ff", |v: &str| {
            cfg.d_ff = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("dropout", |v: &str| {
            cfg.dropout = v.parse().map_err(|_| format!("bad number {v:?}"))?;
            Ok(())
        });
        field!("front_end", |v: &str| {
            cfg.front_end = match v {
                "linear" => FrontEndKind::Linear,
                "vgg" => FrontEndKind::Vgg,
                other => return Err(format!("expected linear|vgg, got {other:?}")),
            };
            Ok(())
        });
        field!("interleaved_conv", |v: &str| {
            cfg.interleaved_conv = v.parse().map_err(|_| format!("bad bool {v:?}"))?;
            Ok(())
        });
        field!("norm", |v: &str| {
            cfg.norm = match v {
                "pre" => NormScheme::Pre,
                "post" => NormScheme::Post,
                other => return Err(format!("expected pre|post, got {other:?}")),
            };
            Ok(())
        });
        let mut streaming_kind = String::from("offline");
        field!("streaming", |v: &str| {
            streaming_kind = v.to_string();
            Ok(())
        });
        let mut window = ContextWindow::unbounded();
        field!("window", |v: &str| {
            window = v
                .parse::<ContextWindow>()
                .map_err(|e| e.to_string())?;
            Ok(())
        });
        let mut chunk = 40usize;
        field!("chunk", |v: &str| {
            chunk = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("n_classes", |v: &str| {
            cfg.n_classes = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("n_features", |v: &str| {
            cfg.n_features = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("activation", |v: &str| {
            cfg.activation = match v {
                "relu" => Activation::Relu,
                "gelu" => Activation::Gelu,
                other => return Err(format!("expected relu|gelu, got {other:?}")),
            };
            Ok(())
        });
        field!("init", |v: &str| {
            cfg.init = match v {
                "xavier_uniform" => InitScheme::XavierUniform,
                "depth_scale" => InitScheme::DepthScale,
                other => return Err(format!("expected xavier_uniform|depth_scale, got {other:?}")),
            };
            Ok(())
        });
        field!("seed", |v: &str| {
            cfg.seed = v.parse().map_err(|_| format!("bad integer {v:?}"))?;
            Ok(())
        });
        field!("ln_eps", |v: &str| {
            cfg.ln_eps = v.parse().map_err(|_| format!("bad number {v:?}"))?;
            Ok(())
        });
        field!("vgg_channels", |v: &str| {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| format!("bad channel {p:?}")))
                .collect::<std::result::Result<_, String>>()?;
            if parts.len() != 4 {
                return Err(format!("expected 4 channels, got {}", parts.len()));
            }
            cfg.vgg_channels = parts.try_into().unwrap();
            Ok(())
        });

        cfg.streaming = match streaming_kind.as_str() {
            "offline" => StreamingSpec::Offline,
            "masked" => StreamingSpec::Masked(window),
            "xl" => StreamingSpec::Xl { chunk },
            other => {
                return Err(Error::file(
                    source,
                    format!("key streaming: expected offline|masked|xl, got {other:?}"),
                ))
            }
        };
        Ok((cfg, notices))
    }
}

/// Bracket-style window rendering used by the config codec.
struct WindowFlag(ContextWindow);

impl std::fmt::Display for WindowFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use crate::attention::Extent;
        match self.0.past {
            Extent::Finite(p) => write!(f, "-{p}:")?,
            Extent::Unbounded => write!(f, "-inf:")?,
        }
        match self.0.future {
            Extent::Finite(r) => write!(f, "{r}"),
            Extent::Unbounded => write!(f, "inf"),
        }
    }
}

// ---- parameter manifest -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Initialized uniformly with the configured scheme.
    Weight,
    /// Zero at init.
    Bias,
    /// One at init.
    LnGain,
    /// Zero at init.
    LnBias,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// 1-based block index for depth scaling; front-end and classifier use 1.
    pub layer: usize,
    pub kind: ParamKind,
    /// Fan-in/fan-out for the init bound; for convolutions the receptive
    /// field multiplies the channel counts, as in standard Glorot practice.
    pub fan: (usize, usize),
}

fn w(name: String, shape: Vec<usize>, layer: usize, fan: (usize, usize)) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        layer,
        kind: ParamKind::Weight,
        fan,
    }
}

fn b(name: String, len: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![len],
        layer: 1,
        kind: ParamKind::Bias,
        fan: (1, 1),
    }
}

fn ln(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: format!("{prefix}.gain"),
            shape: vec![d],
            layer: 1,
            kind: ParamKind::LnGain,
            fan: (1, 1),
        },
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![d],
            layer: 1,
            kind: ParamKind::LnBias,
            fan: (1, 1),
        },
    ]
}

/// Complete ordered list of parameters implied by a config. Shapes are
/// derivable from the config alone; serialization and loading validate
/// against this manifest.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut out = Vec::new();
    match cfg.front_end {
        FrontEndKind::Linear => {
            out.push(w(
                "frontend.linear.w".into(),
                vec![cfg.n_features, d],
                1,
                (cfg.n_features, d),
            ));
            out.push(b("frontend.linear.b".into(), d));
        }
        FrontEndKind::Vgg => {
            let chans = [1, cfg.vgg_channels[0], cfg.vgg_channels[1], cfg.vgg_channels[2]];
            for i in 0..VGG_CONV_LAYERS {
                let (c_in, c_out) = (chans[i], cfg.vgg_channels[i]);
                out.push(w(
                    format!("frontend.vgg.conv{}.kernel", i + 1),
                    vec![3, 3, c_in, c_out],
                    1,
                    (9 * c_in, 9 * c_out),
                ));
                out.push(b(format!("frontend.vgg.conv{}.bias", i + 1), c_out));
            }
            let proj_in = cfg.vgg_proj_in();
            out.push(w(
                "frontend.vgg.proj.w".into(),
                vec![proj_in, d],
                1,
                (proj_in, d),
            ));
            out.push(b("frontend.vgg.proj.b".into(), d));
        }
    }
    for l in 1..=cfg.depth {
        let p = format!("block{l}");
        for role in ["wq", "wk", "wv", "wo"] {
            out.push(w(format!("{p}.attn.{role}"), vec![d, d], l, (d, d)));
        }
        for role in ["bq", "bk", "bv", "bo"] {
            out.push(b(format!("{p}.attn.{role}"), d));
        }
        out.push(w(format!("{p}.ffn.w1"), vec![d, cfg.d_ff], l, (d, cfg.d_ff)));
        out.push(b(format!("{p}.ffn.b1"), cfg.d_ff));
        out.push(w(format!("{p}.ffn.w2"), vec![cfg.d_ff, d], l, (cfg.d_ff, d)));
        out.push(b(format!("{p}.ffn.b2"), d));
        out.extend(ln(&format!("{p}.ln1"), d));
        out.extend(ln(&format!("{p}.ln2"), d));
        if cfg.interleaved_conv {
            out.push(w(
                format!("{p}.ic.kernel"),
                vec![3, d, d],
                l,
                (3 * d, 3 * d),
            ));
            out.push(b(format!("{p}.ic.bias"), d));
            out.extend(ln(&format!("{p}.ic_ln"), d));
        }
    }
    if cfg.norm == NormScheme::Pre {
        out.extend(ln("final_ln", d));
    }
    out.push(w(
        "classifier.w".into(),
        vec![d, cfg.n_classes],
        1,
        (d, cfg.n_classes),
    ));
    out.push(b("classifier.b".into(), cfg.n_classes));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// The trained state of a model: named tensors in manifest order.
#[derive(Debug, Clone)]
pub struct Params<S> {
    pub entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                let n = e.tensor.norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Initialize all parameters of a config: weights per the configured
/// scheme with their block's depth index, biases zero, LN gain one.
/// Every tensor draws from an independent sub-stream derived from
/// `(seed, parameter name)`, so the result is order-free and bitwise
/// reproducible.
pub fn init_model_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Params<S>> {
    let specs = param_specs(cfg)?;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let tensor = match spec.kind {
            ParamKind::Weight => {
                let bound = init_bound(&InitSpec {
                    scheme: cfg.init,
                    layer: spec.layer,
                    d_in: spec.fan.0,
                    d_out: spec.fan.1,
                    seed,
                })?;
                let mut rng = Rng::derive(seed, &spec.name);
                Tensor::rand_uniform(spec.shape.clone(), bound, &mut rng)
            }
            ParamKind::Bias | ParamKind::LnBias => Tensor::zeros(spec.shape.clone()),
            ParamKind::LnGain => Tensor::full(spec.shape.clone(), S::ONE),
        };
        entries.push(ParamEntry {
            name: spec.name,
            tensor,
        });
    }
    Ok(Params { entries })
}

// ---- the assembled model ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AcousticModel<S> {
    config: ModelConfig,
    params: Params<S>,
}

/// Attention layout of one forward pass.
pub enum AttentionPlan<'a> {
    /// Full self-attention (offline).
    Full,
    /// Same windowed mask in every layer (mask-lookahead streaming).
    Windowed(&'a Mask),
    /// Chunk-structured mask plus chunk-local interleaved convolution: the
    /// offline equivalent of chunk recurrence, used as the streaming oracle.
    Chunked { mask: &'a Mask, chunk: usize },
}

enum FrontVars {
    Linear(LinearEncoderVars),
    Vgg(VggVars),
}

/// Tape bindings of every parameter, aligned with `Params::entries`.
pub struct BoundModel {
    pub vars: Vec<Var>,
    front: FrontVars,
    pub(crate) blocks: Vec<BlockVars>,
    final_ln: Option<LayerNormVars>,
    classifier_w: Var,
    classifier_b: Var,
}

impl BoundModel {
    pub fn blocks(&self) -> &[BlockVars] {
        &self.blocks
    }
}

pub enum ForwardMode<'a> {
    Eval,
    Train { rng: &'a mut Rng },
}

impl<S: Scalar> AcousticModel<S> {
    /// Deterministic construction from a validated config.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let params = init_model_params(&config, config.seed)?;
        Ok(AcousticModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Params<S>) -> Result<Self> {
        let specs = param_specs(&config)?;
        if specs.len() != params.entries.len() {
            return Err(Error::config(
                "model",
                format!(
                    "expected {} parameters, got {}",
                    specs.len(),
                    params.entries.len()
                ),
            ));
        }
        for (spec, entry) in specs.iter().zip(&params.entries) {
            if spec.name != entry.name || spec.shape != entry.tensor.shape() {
                return Err(Error::config(
                    "model",
                    format!(
                        "parameter mismatch: expected {} {:?}, got {} {:?}",
                        spec.name,
                        spec.shape,
                        entry.name,
                        entry.tensor.shape()
                    ),
                ));
            }
        }
        Ok(AcousticModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        &mut self.params
    }

    /// Insert every parameter as a tape leaf and assemble the structured
    /// views the layer functions consume.
    pub fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> BoundModel {
        let mut vars = Vec::with_capacity(self.params.entries.len());
        let mut by_name: HashMap<&str, Var> = HashMap::new();
        for entry in &self.params.entries {
            let v = tape.leaf(entry.tensor.clone(), requires_grad);
            vars.push(v);
            by_name.insert(entry.name.as_str(), v);
        }
        let v = |name: &str| *by_name.get(name).expect("manifest-complete binding");
        let ln_of = |prefix: &str| LayerNormVars {
            gain: v(&format!("{prefix}.gain")),
            bias: v(&format!("{prefix}.bias")),
            eps: self.config.ln_eps,
        };
        let front = match self.config.front_end {
            FrontEndKind::Linear => FrontVars::Linear(LinearEncoderVars {
                w: v("frontend.linear.w"),
                b: v("frontend.linear.b"),
            }),
            FrontEndKind::Vgg => FrontVars::Vgg(VggVars {
                kernels: std::array::from_fn(|i| v(&format!("frontend.vgg.conv{}.kernel", i + 1))),
                biases: std::array::from_fn(|i| v(&format!("frontend.vgg.conv{}.bias", i + 1))),
                proj_w: v("frontend.vgg.proj.w"),
                proj_b: v("frontend.vgg.proj.b"),
            }),
        };
        let blocks = (1..=self.config.depth)
            .map(|l| {
                let p = format!("block{l}");
                BlockVars {
                    mha: MhaVars {
                        wq: v(&format!("{p}.attn.wq")),
                        bq: v(&format!("{p}.attn.bq")),
                        wk: v(&format!("{p}.attn.wk")),
                        bk: v(&format!("{p}.attn.bk")),
                        wv: v(&format!("{p}.attn.wv")),
                        bv: v(&format!("{p}.attn.bv")),
                        wo: v(&format!("{p}.attn.wo")),
                        bo: v(&format!("{p}.attn.bo")),
                        n_heads: self.config.heads,
                    },
                    ffn: FfnVars {
                        w1: v(&format!("{p}.ffn.w1")),
                        b1: v(&format!("{p}.ffn.b1")),
                        w2: v(&format!("{p}.ffn.w2")),
                        b2: v(&format!("{p}.ffn.b2")),
                        activation: self.config.activation,
                    },
                    ln1: ln_of(&format!("{p}.ln1")),
                    ln2: ln_of(&format!("{p}.ln2")),
                    ic: self.config.interleaved_conv.then(|| IcVars {
                        kernel: v(&format!("{p}.ic.kernel")),
                        bias: v(&format!("{p}.ic.bias")),
                        ln: ln_of(&format!("{p}.ic_ln")),
                    }),
                }
            })
            .collect();
        let final_ln = (self.config.norm == NormScheme::Pre).then(|| ln_of("final_ln"));
        BoundModel {
            vars,
            front,
            blocks,
            final_ln,
            classifier_w: v("classifier.w"),
            classifier_b: v("classifier.b"),
        }
    }

    /// Front-end only: `[T, n_features] -> [T', d_model]`.
    pub fn apply_front_end(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundModel,
        features: Var,
    ) -> Result<Var> {
        match &bound.front {
            FrontVars::Linear(vars) => linear_encoder(tape, features, vars),
            FrontVars::Vgg(vars) => vgg_encoder(tape, features, vars),
        }
    }

    /// Block stack plus classifier over already-encoded hidden states.
    pub fn apply_blocks(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundModel,
        hidden: Var,
        plan: &AttentionPlan,
        dropout: &mut DropoutCtx,
    ) -> Result<Var> {
        let mut h = hidden;
        for block in &bound.blocks {
            let (mask, ic_mode) = match plan {
                AttentionPlan::Full => (None, IcMode::Full),
                AttentionPlan::Windowed(mask) => (Some(*mask), IcMode::Full),
                AttentionPlan::Chunked { mask, chunk } => {
                    (Some(*mask), IcMode::ChunkLocal { chunk: *chunk })
                }
            };
            h = block_forward(
                tape,
                h,
                block,
                self.config.norm,
                mask,
                None,
                ic_mode,
                dropout,
            )?
            .out;
        }
        self.classify(tape, bound, h)
    }

    /// Final LN (pre-norm), affine classifier, log-softmax.
    pub fn classify(&self, tape: &mut Tape<S>, bound: &BoundModel, h: Var) -> Result<Var> {
        let h = match &bound.final_ln {
            Some(p) => crate::layers::layer_norm(tape, h, p)?,
            None => h,
        };
        let logits = tape.matmul(h, bound.classifier_w)?;
        let logits = tape.add_row_bias(logits, bound.classifier_b)?;
        tape.log_softmax_last(logits)
    }

    /// Full graph construction for one utterance under a given plan.
    pub fn apply(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundModel,
        features: Var,
        plan: &AttentionPlan,
        dropout: &mut DropoutCtx,
    ) -> Result<Var> {
        let hidden = self.apply_front_end(tape, bound, features)?;
        self.apply_blocks(tape, bound, hidden, plan, dropout)
    }

    fn check_features(&self, features: &Tensor<S>) -> Result<()> {
        if features.rank() != 2 || features.shape()[1] != self.config.n_features {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: features.shape().to_vec(),
                rhs: vec![0, self.config.n_features],
            });
        }
        Ok(())
    }

    /// Log-posteriors `[T', n_classes]` for one utterance, honoring the
    /// configured streaming regime (the chunk-recurrent regime runs its
    /// offline chunk-mask equivalent here; incremental emission lives in
    /// `streaming`).
    pub fn forward(&self, features: &Tensor<S>, mode: ForwardMode) -> Result<Tensor<S>> {
        self.check_features(features)?;
        let t_out = self.config.out_len(features.shape()[0]);
        let mask = match self.config.streaming {
            StreamingSpec::Offline => None,
            StreamingSpec::Masked(w) => Some(build_mask(t_out, &w)),
            StreamingSpec::Xl { chunk } => Some(build_chunk_mask(t_out, chunk)?),
        };
        let plan = match (&self.config.streaming, &mask) {
            (StreamingSpec::Offline, _) => AttentionPlan::Full,
            (StreamingSpec::Masked(_), Some(m)) => AttentionPlan::Windowed(m),
            (StreamingSpec::Xl { chunk }, Some(m)) => AttentionPlan::Chunked {
                mask: m,
                chunk: *chunk,
            },
            _ => unreachable!(),
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let features_var = tape.constant(features.clone());
        let mut dropout = match mode {
            ForwardMode::Eval => DropoutCtx::eval(),
            ForwardMode::Train { rng } => DropoutCtx::train(self.config.dropout, rng),
        };
        let out = self.apply(&mut tape, &bound, features_var, &plan, &mut dropout)?;
        Ok(tape.value(out).clone())
    }

    // ---- accounting ----------------------------------------------------------------

    pub fn count_params(&self) -> ParamCount {
        let mut breakdown: Vec<(String, usize)> = vec![
            ("front_end".into(), 0),
            ("attention".into(), 0),
            ("feed_forward".into(), 0),
            ("interleaved_conv".into(), 0),
            ("layer_norm".into(), 0),
            ("classifier".into(), 0),
        ];
        let mut add = |cat: &str, n: usize| {
            for (name, count) in breakdown.iter_mut() {
                if name == cat {
                    *count += n;
                }
            }
        };
        for e in &self.params.entries {
            let n = e.tensor.numel();
            if e.name.starts_with("frontend.") {
                add("front_end", n);
            } else if e.name.contains(".attn.") {
                add("attention", n);
            } else if e.name.contains(".ffn.") {
                add("feed_forward", n);
            } else if e.name.contains(".ic.") {
                add("interleaved_conv", n);
            } else if e.name.contains("ln") {
                add("layer_norm", n);
            } else if e.name.starts_with("classifier.") {
                add("classifier", n);
            }
        }
        ParamCount {
            total: self.params.total_elements(),
            breakdown,
        }
    }

    // ---- serialization ---------------------------------------------------------------

    /// Versioned little-endian checkpoint: magic, version, dtype tag, config
    /// text, manifest of (name, shape, offset), raw parameter blobs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(S::DTYPE.bytes() as u8);
        let cfg_text = self.config.to_text();
        out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg_text.as_bytes());
        out.extend_from_slice(&(self.params.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.params.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.tensor.rank() as u8);
            for &dim in e.tensor.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (e.tensor.numel() * S::DTYPE.bytes()) as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &self.params.entries {
            for &v in e.tensor.data() {
                v.write_le(&mut out);
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn breakdown_sum(&self) -> usize {
        self.breakdown.iter().map(|(_, n)| n).sum()
    }
}

/// Parameter count straight from the manifest, without materializing any
/// tensor (the reference configurations run to tens of millions of weights).
pub fn count_from_specs(cfg: &ModelConfig) -> Result<ParamCount> {
    let specs = param_specs(cfg)?;
    let mut breakdown: Vec<(String, usize)> = vec![
        ("front_end".into(), 0),
        ("attention".into(), 0),
        ("feed_forward".into(), 0),
        ("interleaved_conv".into(), 0),
        ("layer_norm".into(), 0),
        ("classifier".into(), 0),
    ];
    let mut total = 0usize;
    for spec in &specs {
        let n: usize = spec.shape.iter().product();
        total += n;
        let cat = if spec.name.starts_with("frontend.") {
            "front_end"
        } else if spec.name.contains(".attn.") {
            "attention"
        } else if spec.name.contains(".ffn.") {
            "feed_forward"
        } else if spec.name.contains(".ic.") {
            "interleaved_conv"
        } else if spec.name.contains("ln") {
            "layer_norm"
        } else {
            "classifier"
        };
        for (name, count) in breakdown.iter_mut() {
            if name == cat {
                *count += n;
            }
        }
    }
    Ok(ParamCount { total, breakdown })
}

#[derive(Debug)]
pub enum LoadedModel {
    F32(AcousticModel<f32>),
    F64(AcousticModel<f64>),
}

impl LoadedModel {
    pub fn dtype(&self) -> Dtype {
        match self {
            LoadedModel::F32(_) => Dtype::F32,
            LoadedModel::F64(_) => Dtype::F64,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::file(
                self.path,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let path_str = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path: &path_str,
    };
    let magic = cur.take(8, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::file(&path_str, "bad magic bytes, not a model file"));
    }
    let version = cur.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::file(
            &path_str,
            format!("unsupported version {version}, expected {MODEL_VERSION}"),
        ));
    }
    let dtype = match cur.take(1, "dtype")?[0] {
        4 => Dtype::F32,
        8 => Dtype::F64,
        other => return Err(Error::file(&path_str, format!("unknown dtype tag {other}"))),
    };
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len, "config text")?)
        .map_err(|_| Error::file(&path_str, "config text is not utf-8"))?;
    let (config, _notices) = ModelConfig::parse_text(cfg_text, &path_str, &[])?;
    let n_params = cur.u32("manifest length")? as usize;

    struct ManifestEntry {
        name: String,
        shape: Vec<usize>,
        offset: u64,
    }
    let mut manifest = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::file(&path_str, "parameter name is not utf-8"))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dim")? as usize);
        }
        let offset = cur.u64("offset")?;
        manifest.push(ManifestEntry {
            name,
            shape,
            offset,
        });
    }
    let blob_len = cur.u64("blob length")? as usize;
    let blob = cur.take(blob_len, "parameter blob")?;

    // Validate the manifest against the config-derived specification and
    // report shape disagreements explicitly.
    let specs = param_specs(&config)?;
    if specs.len() != manifest.len() {
        return Err(Error::file(
            &path_str,
            format!(
                "manifest has {} parameters, config implies {}",
                manifest.len(),
                specs.len()
            ),
        ));
    }
    for (spec, entry) in specs.iter().zip(&manifest) {
        if spec.name != entry.name || spec.shape != entry.shape {
            return Err(Error::file(
                &path_str,
                format!(
                    "shape mismatch for {}: file has {:?}, config implies {} {:?}",
                    entry.name, entry.shape, spec.name, spec.shape
                ),
            ));
        }
    }

    fn read_params<S: Scalar>(
        manifest: &[(String, Vec<usize>, u64)],
        blob: &[u8],
        path: &str,
    ) -> Result<Params<S>> {
        let width = S::DTYPE.bytes();
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, shape, offset) in manifest {
            let numel: usize = shape.iter().product();
            let start = *offset as usize;
            let end = start + numel * width;
            if end > blob.len() {
                return Err(Error::file(path, format!("blob truncated at {name}")));
            }
            let data: Vec<S> = blob[start..end]
                .chunks_exact(width)
                .map(S::read_le)
                .collect();
            entries.push(ParamEntry {
                name: name.clone(),
                tensor: Tensor::new(shape.clone(), data).unwrap(),
            });
        }
        Ok(Params { entries })
    }

    let flat: Vec<(String, Vec<usize>, u64)> = manifest
        .into_iter()
        .map(|e| (e.name, e.shape, e.offset))
        .collect();
    match dtype {
        Dtype::F32 => Ok(LoadedModel::F32(AcousticModel::from_parts(
            config.clone(),
            read_params::<f32>(&flat, blob, &path_str)?,
        )?)),
        Dtype::F64 => Ok(LoadedModel::F64(AcousticModel::from_parts(
            config,
            read_params::<f64>(&flat, blob, &path_str)?,
        )?)),
    }
}
