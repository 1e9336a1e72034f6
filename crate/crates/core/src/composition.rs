//! Composition prior: class activation maps, their probability-weighted fusion,
//! alignment to the key grid, and the log-bias added to cross-attention logits.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const NUM_CLASSES: usize = 9;

/// Default floor applied to the fused map before taking its log.
pub const DEFAULT_BIAS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompositionError {
    #[error("{what}: expected dims {expected:?}, got {actual:?}")]
    DimMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid class probabilities: {0}")]
    BadProbabilities(String),
    #[error("cannot pool a {map_h}×{map_w} map onto a {grid_h}×{grid_w} grid")]
    BadGrid {
        map_h: usize,
        map_w: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("activation value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionClass {
    RuleOfThirds,
    Center,
    Horizontal,
    Vertical,
    Symmetric,
    Diagonal,
    Curved,
    Triangle,
    Pattern,
}

impl CompositionClass {
    pub const ALL: [CompositionClass; NUM_CLASSES] = [
        CompositionClass::RuleOfThirds,
        CompositionClass::Center,
        CompositionClass::Horizontal,
        CompositionClass::Vertical,
        CompositionClass::Symmetric,
        CompositionClass::Diagonal,
        CompositionClass::Curved,
        CompositionClass::Triangle,
        CompositionClass::Pattern,
    ];
}

/// How per-class maps are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Probability-weighted sum of all maps.
    Average,
    /// Only the map of the most probable class.
    Max,
}

/// A heatmap with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, CompositionError> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(CompositionError::DimMismatch {
                what: "activation map",
                expected: vec![height, width],
                actual: vec![values.len()],
            });
        }
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CompositionError::OutOfRange(v));
        }
        Ok(ActivationMap {
            height,
            width,
            values,
        })
    }

    /// Min-max normalizes arbitrary finite values into a map. A constant input
    /// carries no spatial signal and becomes all ones.
    pub fn normalized(height: usize, width: usize, raw: Vec<f64>) -> Result<Self, CompositionError> {
        ActivationMap::new(height, width, min_max_normalize(raw))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        ActivationMap::new(height, width, vec![1.0; height * width]).expect("positive dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, CompositionError> {
        match t.dims() {
            [h, w] => ActivationMap::new(*h, *w, t.data().to_vec()),
            d => Err(CompositionError::DimMismatch {
                what: "activation map tensor",
                expected: vec![0, 0],
                actual: d.to_vec(),
            }),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Binary 8-bit PGM rendering, for eyeballing maps.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (v * 255.0).round() as u8));
        out
    }
}

fn min_max_normalize(mut raw: Vec<f64>) -> Vec<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let span = hi - lo;
        raw.iter_mut().for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
    } else {
        raw.iter_mut().for_each(|v| *v = 1.0);
    }
    raw
}

/// Probabilities over the nine composition classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassProbabilities([f64; NUM_CLASSES]);

impl ClassProbabilities {
    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self, CompositionError> {
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CompositionError::BadProbabilities(format!(
                "value {v} outside [0, 1]"
            )));
        }
        let sum: f64 = p.iter().sum();
        if !(0.999..=1.001).contains(&sum) {
            return Err(CompositionError::BadProbabilities(format!(
                "sum {sum} not within 1 ± 0.001"
            )));
        }
        Ok(ClassProbabilities(p))
    }

    pub fn one_hot(class: usize) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[class] = 1.0;
        ClassProbabilities(p)
    }

    pub fn values(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    /// Most probable class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ClassProbabilities {
    type Error = CompositionError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        let arr: [f64; NUM_CLASSES] = v.try_into().map_err(|v: Vec<f64>| {
            CompositionError::BadProbabilities(format!("expected {NUM_CLASSES} values, got {}", v.len()))
        })?;
        ClassProbabilities::new(arr)
    }
}

impl From<ClassProbabilities> for Vec<f64> {
    fn from(p: ClassProbabilities) -> Self {
        p.0.to_vec()
    }
}

/// Grad-CAM: channel weights are the spatial means of the class-score
/// gradients; the map is the rectified weighted channel sum, min-max normalized.
pub fn compute_cam(features: &Tensor, class_gradients: &Tensor) -> Result<ActivationMap, CompositionError> {
    let (c, h, w) = match features.dims() {
        [c, h, w] => (*c, *h, *w),
        d => {
            return Err(CompositionError::DimMismatch {
                what: "features",
                expected: vec![0, 0, 0],
                actual: d.to_vec(),
            })
        }
    };
    if class_gradients.dims() != features.dims() {
        return Err(CompositionError::DimMismatch {
            what: "class gradients",
            expected: features.dims().to_vec(),
            actual: class_gradients.dims().to_vec(),
        });
    }
    let plane = h * w;
    let mut raw = vec![0.0; plane];
    for ch in 0..c {
        let grads = &class_gradients.data()[ch * plane..(ch + 1) * plane];
        let alpha = grads.iter().sum::<f64>() / plane as f64;
        let feats = &features.data()[ch * plane..(ch + 1) * plane];
        raw.iter_mut().zip(feats).for_each(|(r, f)| *r += alpha * f);
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    ActivationMap::normalized(h, w, raw)
}

/// Combines the per-class maps into one normalized map.
pub fn fuse_cams(
    cams: &[ActivationMap],
    probs: &ClassProbabilities,
    mode: FusionMode,
) -> Result<ActivationMap, CompositionError> {
    if cams.len() != NUM_CLASSES {
        return Err(CompositionError::DimMismatch {
            what: "class activation maps",
            expected: vec![NUM_CLASSES],
            actual: vec![cams.len()],
        });
    }
    let (h, w) = (cams[0].height, cams[0].width);
    if let Some(bad) = cams.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(CompositionError::DimMismatch {
            what: "class activation map",
            expected: vec![h, w],
            actual: vec![bad.height, bad.width],
        });
    }
    let raw = match mode {
        FusionMode::Average => {
            let mut acc = vec![0.0; h * w];
            for (cam, &p) in cams.iter().zip(probs.values()) {
                acc.iter_mut().zip(&cam.values).for_each(|(a, v)| *a += p * v);
            }
            acc
        }
        FusionMode::Max => cams[probs.argmax()].values.clone(),
    };
    ActivationMap::normalized(h, w, raw)
}

/// Mean-pools a map onto a coarser grid. Each axis is split into equal integer
/// runs with the remainder folded into the last cell.
pub fn resample_to_grid(
    map: &ActivationMap,
    grid_h: usize,
    grid_w: usize,
) -> Result<ActivationMap, CompositionError> {
    if grid_h == 0 || grid_w == 0 || grid_h > map.height || grid_w > map.width {
        return Err(CompositionError::BadGrid {
            map_h: map.height,
            map_w: map.width,
            grid_h,
            grid_w,
        });
    }
    let rows = partition(map.height, grid_h);
    let cols = partition(map.width, grid_w);
    let mut raw = Vec::with_capacity(grid_h * grid_w);
    for r in &rows {
        for c in &cols {
            let mut sum = 0.0;
            for y in r.clone() {
                sum += map.values[y * map.width + c.start..y * map.width + c.end]
                    .iter()
                    .sum::<f64>();
            }
            raw.push(sum / (r.len() * c.len()) as f64);
        }
    }
    ActivationMap::normalized(grid_h, grid_w, raw)
}

fn partition(extent: usize, cells: usize) -> Vec<std::ops::Range<usize>> {
    let base = extent / cells;
    (0..cells)
        .map(|i| {
            let end = if i + 1 == cells { extent } else { (i + 1) * base };
            i * base..end
        })
        .collect()
}

/// Grid-aligned bias `B` and its cached log.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionPrior {
    grid_h: usize,
    grid_w: usize,
    bias: Vec<f64>,
    log_bias: Vec<f64>,
}

impl CompositionPrior {
    /// All-ones bias; its log is exactly zero.
    pub fn uniform(grid_h: usize, grid_w: usize) -> Self {
        make_prior(&ActivationMap::ones(grid_h, grid_w), DEFAULT_BIAS_FLOOR)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn len(&self) -> usize {
        self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bias.is_empty()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn log_bias(&self) -> &[f64] {
        &self.log_bias
    }

    pub fn log_bias_tensor(&self) -> Tensor {
        Tensor::new(vec![self.log_bias.len()], self.log_bias.clone()).unwrap()
    }
}

/// Floors a grid-aligned map at `floor` and caches `log(B)`.
pub fn make_prior(map: &ActivationMap, floor: f64) -> CompositionPrior {
    let bias: Vec<f64> = map.values.iter().map(|v| v.max(floor)).collect();
    let log_bias = bias.iter().map(|b| b.ln()).collect();
    CompositionPrior {
        grid_h: map.height,
        grid_w: map.width,
        bias,
        log_bias,
    }
}

/// Fuses per-class maps, pools onto the key grid and builds the prior.
pub fn prior_from_cams(
    cams: &[ActivationMap],
    probs: &ClassProbabilities,
    mode: FusionMode,
    grid_h: usize,
    grid_w: usize,
    floor: f64,
) -> Result<CompositionPrior, CompositionError> {
    let fused = fuse_cams(cams, probs, mode)?;
    let grid = resample_to_grid(&fused, grid_h, grid_w)?;
    Ok(make_prior(&grid, floor))
}

/// Single-head scaled dot-product attention on a graph:
/// `softmax(Q Kᵀ / √d + log_bias) V`, with `log_bias` a `[n_k]` row added to
/// every query row. Returns the output and the attention weights.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    log_bias: Option<Var>,
) -> Result<(Var, Var), TensorError> {
    let d = g.dims(q)[1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    if let Some(b) = log_bias {
        logits = g.add_row(logits, b)?;
    }
    let weights = g.softmax_rows(logits)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Cross-attention of `q[n_q×d]` over `k, v[n_k×d]` biased by `prior`.
pub fn biased_cross_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    prior: &CompositionPrior,
) -> Result<Tensor, CompositionError> {
    let n_k = k.dims().first().copied().unwrap_or(0);
    if n_k != prior.len() {
        return Err(CompositionError::DimMismatch {
            what: "prior grid vs keys",
            expected: vec![prior.grid_h, prior.grid_w],
            actual: vec![n_k],
        });
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
    let b = g.constant(prior.log_bias_tensor());
    let (out, _) = attention(&mut g, qv, kv, vv, Some(b))?;
    Ok(g.value(out).detached())
}

/// Unbiased scaled dot-product attention, for comparison with the biased form.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
    let (out, _) = attention(&mut g, qv, kv, vv, None)?;
    Ok(g.value(out).detached())
}
