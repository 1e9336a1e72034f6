//! Patch encoder stub, the query decoder with prior-biased cross-attention,
//! and the box and score heads.
//!
//! Each decoder layer is pre-norm:
//!
//! ```text
//! x = x + SelfAttn(LN(x))
//! x = x + CrossAttn(LN(x), E, log B)
//! x = x + FFN(LN(x))
//! ```
//!
//! The same `log B` row is added to the scaled logits of every head in every
//! layer. With no prior (`None`) the bias term is skipped entirely.

mod checkpoint;
mod posenc;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Manifest, ParamEntry};
pub use posenc::sinusoidal_2d;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{attention, CompositionPrior, DEFAULT_BIAS_FLOOR};
use crate::geometry::{CropBox, MIN_EXTENT};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecoderError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("bad input shape: expected {expected:?}, got {actual:?}")]
    BadShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("prior grid {prior_h}×{prior_w} does not match {keys} keys")]
    PriorMismatch {
        prior_h: usize,
        prior_w: usize,
        keys: usize,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Frequencies run from 1 down to `1 / base` radians per patch. A small base
/// keeps every frequency useful on grids of a few dozen patches; the usual
/// 10000 leaves most channels nearly constant across such a grid.
pub const DEFAULT_POS_BASE: f64 = 20.0;

fn default_pos_base() -> f64 {
    DEFAULT_POS_BASE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub epsilon_b: f64,
    /// Frequency base of the position encoding.
    #[serde(default = "default_pos_base")]
    pub pos_base: f64,
    pub image_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl ModelConfig {
    /// Small configuration for single-core runs.
    pub fn desk() -> Self {
        ModelConfig {
            n_queries: 16,
            n_layers: 2,
            model_dim: 32,
            n_heads: 4,
            ffn_dim: 128,
            grid_h: 8,
            grid_w: 8,
            epsilon_b: DEFAULT_BIAS_FLOOR,
            pos_base: DEFAULT_POS_BASE,
            image_channels: 3,
            image_h: 64,
            image_w: 64,
        }
    }

    /// Full-size configuration: 90 queries, 6 layers, 512×512 input.
    pub fn full() -> Self {
        ModelConfig {
            n_queries: 90,
            n_layers: 6,
            model_dim: 256,
            n_heads: 4,
            ffn_dim: 1024,
            grid_h: 16,
            grid_w: 16,
            epsilon_b: DEFAULT_BIAS_FLOOR,
            pos_base: DEFAULT_POS_BASE,
            image_channels: 3,
            image_h: 512,
            image_w: 512,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::BadConfig(m));
        if self.n_queries == 0 {
            return bad("n_queries must be at least 1".into());
        }
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if !self.model_dim.is_multiple_of(4) {
            return bad(format!("model_dim {} not divisible by 4", self.model_dim));
        }
        if self.ffn_dim == 0 || self.grid_h == 0 || self.grid_w == 0 || self.image_channels == 0 {
            return bad("zero extent in config".into());
        }
        if !self.image_h.is_multiple_of(self.grid_h) || !self.image_w.is_multiple_of(self.grid_w) {
            return bad(format!(
                "{}×{} image does not split into a {}×{} grid",
                self.image_h, self.image_w, self.grid_h, self.grid_w
            ));
        }
        if !(self.epsilon_b > 0.0 && self.epsilon_b <= 1.0) {
            return bad(format!("epsilon_b {} outside (0, 1]", self.epsilon_b));
        }
        if !(self.pos_base > 1.0 && self.pos_base.is_finite()) {
            return bad(format!("pos_base {} must exceed 1", self.pos_base));
        }
        Ok(())
    }

    pub fn n_keys(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * (self.image_h / self.grid_h) * (self.image_w / self.grid_w)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

/// One predicted crop with its quality score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub crop: CropBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    norm_self: Norm,
    self_attn: AttnIds,
    norm_cross: Norm,
    cross_attn: AttnIds,
    norm_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_proj: Linear,
    queries: ParamId,
    layers: Vec<LayerIds>,
    box_head: [Linear; 3],
    score_head: Linear,
}

/// Model weights plus the id layout used to address them.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// Names and shapes of every parameter, in registration order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.model_dim;
    let mut specs = Vec::new();
    let linear = |specs: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
        specs.push((format!("{name}.weight"), vec![fan_in, fan_out], Init::Xavier));
        specs.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
    };
    linear(&mut specs, "encoder.patch_proj", cfg.patch_dim(), d);
    specs.push(("decoder.queries".into(), vec![cfg.n_queries, d], Init::UnitVariance));
    for l in 0..cfg.n_layers {
        for (norm, attn) in [("norm_self", Some("self_attn")), ("norm_cross", Some("cross_attn")), ("norm_ffn", None)] {
            specs.push((format!("layers.{l}.{norm}.gain"), vec![d], Init::Ones));
            specs.push((format!("layers.{l}.{norm}.bias"), vec![d], Init::Zeros));
            match attn {
                Some(a) => {
                    for p in ["q", "k", "v", "out"] {
                        linear(&mut specs, &format!("layers.{l}.{a}.{p}"), d, d);
                    }
                }
                None => {
                    linear(&mut specs, &format!("layers.{l}.ffn.in"), d, cfg.ffn_dim);
                    linear(&mut specs, &format!("layers.{l}.ffn.out"), cfg.ffn_dim, d);
                }
            }
        }
    }
    linear(&mut specs, "head.box.0", d, d);
    linear(&mut specs, "head.box.1", d, d);
    linear(&mut specs, "head.box.2", d, 4);
    linear(&mut specs, "head.score", d, 1);
    specs
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier,
    UnitVariance,
    Zeros,
    Ones,
}

impl Layout {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Layout, DecoderError> {
        let id = |name: String| store.id(&name).ok_or(DecoderError::MissingParam(name));
        let linear = |name: &str| -> Result<Linear, DecoderError> {
            Ok(Linear {
                weight: id(format!("{name}.weight"))?,
                bias: id(format!("{name}.bias"))?,
            })
        };
        let norm = |name: String| -> Result<Norm, DecoderError> {
            Ok(Norm {
                gain: id(format!("{name}.gain"))?,
                bias: id(format!("{name}.bias"))?,
            })
        };
        let attn = |name: String| -> Result<AttnIds, DecoderError> {
            Ok(AttnIds {
                q: linear(&format!("{name}.q"))?,
                k: linear(&format!("{name}.k"))?,
                v: linear(&format!("{name}.v"))?,
                out: linear(&format!("{name}.out"))?,
            })
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                Ok(LayerIds {
                    norm_self: norm(format!("layers.{l}.norm_self"))?,
                    self_attn: attn(format!("layers.{l}.self_attn"))?,
                    norm_cross: norm(format!("layers.{l}.norm_cross"))?,
                    cross_attn: attn(format!("layers.{l}.cross_attn"))?,
                    norm_ffn: norm(format!("layers.{l}.norm_ffn"))?,
                    ffn_in: linear(&format!("layers.{l}.ffn.in"))?,
                    ffn_out: linear(&format!("layers.{l}.ffn.out"))?,
                })
            })
            .collect::<Result<_, DecoderError>>()?;
        Ok(Layout {
            patch_proj: linear("encoder.patch_proj")?,
            queries: id("decoder.queries".into())?,
            layers,
            box_head: [linear("head.box.0")?, linear("head.box.1")?, linear("head.box.2")?],
            score_head: linear("head.score")?,
        })
    }
}

impl ModelState {
    /// Xavier-uniform weights, zero biases, unit norms, unit-variance queries.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, DecoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, dims, init) in param_specs(&config) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Xavier => {
                    let a = (6.0 / (dims[0] + dims[1]) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::UnitVariance => {
                    let a = 3f64.sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            params.add(name, Tensor::new(dims, data)?);
        }
        ModelState::from_params(config, params)
    }

    /// Wraps an existing parameter set; every expected name must be present
    /// with the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, DecoderError> {
        config.validate()?;
        for (name, dims, _) in param_specs(&config) {
            let id = params
                .id(&name)
                .ok_or_else(|| DecoderError::MissingParam(name.clone()))?;
            if params.get(id).dims() != dims.as_slice() {
                return Err(DecoderError::BadShape {
                    expected: dims,
                    actual: params.get(id).dims().to_vec(),
                });
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(ModelState {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Every weight, bias, norm and query set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self, DecoderError> {
        let mut s = ModelState::init(config, 0)?;
        for t in s.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(s)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub embeddings: Var,
    pub output: Var,
    /// `[N×4]` boxes in center format.
    pub boxes: Var,
    /// `[N]` quality scores.
    pub scores: Var,
    /// Cross-attention weights, `[layer][head]`, each `[N×n_k]`.
    pub cross_weights: Vec<Vec<Var>>,
}

/// Splits a `c×H×W` image into the configured patch grid, one flattened patch
/// per row (channel-major inside each patch), patches in row-major grid order.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor, DecoderError> {
    let expected = vec![cfg.image_channels, cfg.image_h, cfg.image_w];
    if image.dims() != expected.as_slice() {
        return Err(DecoderError::BadShape {
            expected,
            actual: image.dims().to_vec(),
        });
    }
    let (ph, pw) = (cfg.image_h / cfg.grid_h, cfg.image_w / cfg.grid_w);
    let x = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gr in 0..cfg.grid_h {
        for gc in 0..cfg.grid_w {
            for ch in 0..cfg.image_channels {
                for y in gr * ph..(gr + 1) * ph {
                    let base = (ch * cfg.image_h + y) * cfg.image_w;
                    out.extend_from_slice(&x[base + gc * pw..base + (gc + 1) * pw]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.n_keys(), cfg.patch_dim()], out)?)
}

fn linear(g: &mut Graph, s: &ModelState, x: Var, l: Linear) -> Result<Var, TensorError> {
    let w = g.param(&s.params, l.weight);
    let b = g.param(&s.params, l.bias);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn norm(g: &mut Graph, s: &ModelState, x: Var, n: Norm) -> Result<Var, TensorError> {
    let gain = g.param(&s.params, n.gain);
    let bias = g.param(&s.params, n.bias);
    g.layer_norm(x, gain, bias)
}

fn multi_head(
    g: &mut Graph,
    s: &ModelState,
    ids: &AttnIds,
    queries: Var,
    context: Var,
    log_bias: Option<Var>,
) -> Result<(Var, Vec<Var>), TensorError> {
    let q = linear(g, s, queries, ids.q)?;
    let k = linear(g, s, context, ids.k)?;
    let v = linear(g, s, context, ids.v)?;
    let dh = s.config.head_dim();
    let mut outs = Vec::with_capacity(s.config.n_heads);
    let mut weights = Vec::with_capacity(s.config.n_heads);
    for h in 0..s.config.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let (o, w) = attention(g, qh, kh, vh, log_bias)?;
        outs.push(o);
        weights.push(w);
    }
    let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((linear(g, s, joined, ids.out)?, weights))
}

/// Records the encoder on `g`: patch projection plus fixed position encoding.
pub fn encode_graph(g: &mut Graph, s: &ModelState, image: &Tensor) -> Result<Var, DecoderError> {
    let patches = g.constant(patchify(image, &s.config)?);
    let content = linear(g, s, patches, s.layout.patch_proj)?;
    let pe = g.constant(sinusoidal_2d(s.config.grid_h, s.config.grid_w, s.config.model_dim, s.config.pos_base));
    Ok(g.add(content, pe)?)
}

/// Records the decoder on `g` and returns the final query embeddings with the
/// per-layer, per-head cross-attention weights.
pub fn decode_graph(
    g: &mut Graph,
    s: &ModelState,
    embeddings: Var,
    prior: Option<&CompositionPrior>,
) -> Result<(Var, Vec<Vec<Var>>), DecoderError> {
    let cfg = &s.config;
    let expected = [cfg.n_keys(), cfg.model_dim];
    if g.dims(embeddings) != expected {
        return Err(DecoderError::BadShape {
            expected: expected.to_vec(),
            actual: g.dims(embeddings).to_vec(),
        });
    }
    let log_bias = match prior {
        Some(p) if p.len() != cfg.n_keys() => {
            return Err(DecoderError::PriorMismatch {
                prior_h: p.grid_h(),
                prior_w: p.grid_w(),
                keys: cfg.n_keys(),
            })
        }
        Some(p) => Some(g.constant(p.log_bias_tensor())),
        None => None,
    };
    let mut x = g.param(&s.params, s.layout.queries);
    let mut cross = Vec::with_capacity(cfg.n_layers);
    for layer in &s.layout.layers {
        let h = norm(g, s, x, layer.norm_self)?;
        let (sa, _) = multi_head(g, s, &layer.self_attn, h, h, None)?;
        x = g.add(x, sa)?;

        let h = norm(g, s, x, layer.norm_cross)?;
        let (ca, w) = multi_head(g, s, &layer.cross_attn, h, embeddings, log_bias)?;
        x = g.add(x, ca)?;
        cross.push(w);

        let h = norm(g, s, x, layer.norm_ffn)?;
        let f = linear(g, s, h, layer.ffn_in)?;
        let f = g.relu(f)?;
        let f = linear(g, s, f, layer.ffn_out)?;
        x = g.add(x, f)?;
        debug_assert_eq!(g.dims(x), [cfg.n_queries, cfg.model_dim]);
    }
    Ok((x, cross))
}

/// Records both heads: a 3-layer box MLP and a linear score head, each
/// followed by a sigmoid.
pub fn heads_graph(g: &mut Graph, s: &ModelState, output: Var) -> Result<(Var, Var), DecoderError> {
    let [b0, b1, b2] = s.layout.box_head;
    let h = linear(g, s, output, b0)?;
    let h = g.relu(h)?;
    let h = linear(g, s, h, b1)?;
    let h = g.relu(h)?;
    let h = linear(g, s, h, b2)?;
    let boxes = g.sigmoid(h)?;

    let v = linear(g, s, output, s.layout.score_head)?;
    let v = g.sigmoid(v)?;
    let n = s.config.n_queries;
    let scores = g.reshape(v, vec![n])?;
    Ok((boxes, scores))
}

/// What the decoder attends over: a raw image or precomputed embeddings.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Image(&'a Tensor),
    Embeddings(&'a Tensor),
}

pub fn forward_graph(
    g: &mut Graph,
    s: &ModelState,
    input: ModelInput<'_>,
    prior: Option<&CompositionPrior>,
) -> Result<ForwardVars, DecoderError> {
    let embeddings = match input {
        ModelInput::Image(img) => encode_graph(g, s, img)?,
        ModelInput::Embeddings(e) => g.constant(e.clone()),
    };
    let (output, cross_weights) = decode_graph(g, s, embeddings, prior)?;
    let (boxes, scores) = heads_graph(g, s, output)?;
    Ok(ForwardVars {
        embeddings,
        output,
        boxes,
        scores,
        cross_weights,
    })
}

/// Image embeddings `E`, `[grid_h·grid_w × d]`.
pub fn encode(image: &Tensor, s: &ModelState) -> Result<Tensor, DecoderError> {
    let mut g = Graph::new();
    let e = encode_graph(&mut g, s, image)?;
    Ok(g.value(e).detached())
}

/// Final query embeddings `O`, `[N×d]`.
pub fn decode(
    embeddings: &Tensor,
    prior: Option<&CompositionPrior>,
    s: &ModelState,
) -> Result<Tensor, DecoderError> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let (o, _) = decode_graph(&mut g, s, e, prior)?;
    Ok(g.value(o).detached())
}

/// Reads boxes and scores off graph values. Extents below the minimum are
/// raised to it so every prediction is a valid box.
pub fn read_predictions(g: &Graph, boxes: Var, scores: Var) -> Vec<Prediction> {
    g.data(boxes)
        .chunks(4)
        .zip(g.data(scores))
        .map(|(b, &score)| Prediction {
            crop: CropBox::new(b[0], b[1], b[2].max(MIN_EXTENT), b[3].max(MIN_EXTENT))
                .expect("sigmoid outputs lie in [0, 1]"),
            score,
        })
        .collect()
}

pub fn predict_heads(output: &Tensor, s: &ModelState) -> Result<Vec<Prediction>, DecoderError> {
    let mut g = Graph::new();
    let o = g.constant(output.clone());
    let (b, v) = heads_graph(&mut g, s, o)?;
    Ok(read_predictions(&g, b, v))
}

/// Encoder, decoder and heads in one pass.
pub fn forward(
    input: ModelInput<'_>,
    prior: Option<&CompositionPrior>,
    s: &ModelState,
) -> Result<Vec<Prediction>, DecoderError> {
    let mut g = Graph::new();
    let f = forward_graph(&mut g, s, input, prior)?;
    Ok(read_predictions(&g, f.boxes, f.scores))
}

/// Mean cross-attention mass on the key subset `keys`, averaged over layers,
/// heads and queries.
pub fn attention_mass(g: &Graph, cross_weights: &[Vec<Var>], keys: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for w in cross_weights.iter().flatten() {
        let n_k = g.dims(*w)[1];
        for row in g.data(*w).chunks(n_k) {
            total += keys.iter().map(|&j| row[j]).sum::<f64>();
            rows += 1;
        }
    }
    total / rows as f64
}
