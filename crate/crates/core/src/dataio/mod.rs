//! Annotated datasets as JSON lines, one record per image.
//!
//! ```text
//! {"id": "img-0001",
//!  "image_dims": [3, 64, 64],
//!  "image": "images/img-0001.aesc",          // optional, AESC rank 3
//!  "embedding": null,                         // optional, AESC rank 2
//!  "probabilities": [0.6, 0.05, ...],         // 9 class probabilities
//!  "cams": ["cams/img-0001-0.aesc", ...],     // 9 AESC rank-2 files, or
//!  "cams": {"height": 16, "width": 16, "maps": [[...], ...]},
//!  "crops": [{"box": [cx, cy, w, h], "mos": 4.2},
//!            {"corners": [x1, y1, x2, y2], "mos": 3.1},
//!            {"pixels": [x1, y1, x2, y2], "mos": 2.0}]}
//! ```
//!
//! Relative paths resolve against the directory holding the dataset file.
//! Records are written back in `box` form with paths relative to that
//! directory whenever possible.

pub mod synthetic;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::composition::{
    prior_from_cams, ActivationMap, ClassProbabilities, CompositionError, CompositionPrior, FusionMode, NUM_CLASSES,
};
use crate::geometry::{CropBox, Corners, ScoredCrop, MOS_MAX, MOS_MIN};
use crate::tensor::{AescError, Tensor};

pub use crate::tensor::{read_tensor, write_tensor};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticConfig, SyntheticScene};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error("record {id} (line {line}): {message}")]
    Range { line: usize, id: String, message: String },
    #[error("record {id} (line {line}): missing file {}", path.display())]
    MissingFile { line: usize, id: String, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("record {id}: {message}")]
    Content { id: String, message: String },
    #[error(transparent)]
    Tensor(#[from] AescError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum CamSource {
    Files(Vec<PathBuf>),
    Inline(Vec<ActivationMap>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    /// `[channels, height, width]`.
    pub image_dims: [usize; 3],
    pub image: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
    pub probabilities: ClassProbabilities,
    pub cams: CamSource,
    pub crops: Vec<ScoredCrop>,
}

impl DatasetRecord {
    pub fn load_image(&self) -> Result<Tensor, DataError> {
        let path = self.image.as_ref().ok_or_else(|| DataError::Content {
            id: self.id.clone(),
            message: "no image path".into(),
        })?;
        let t = read_tensor(path)?;
        if t.dims() != self.image_dims {
            return Err(DataError::Content {
                id: self.id.clone(),
                message: format!("image dims {:?} disagree with declared {:?}", t.dims(), self.image_dims),
            });
        }
        Ok(t)
    }

    pub fn load_embedding(&self) -> Result<Option<Tensor>, DataError> {
        self.embedding.as_ref().map(read_tensor).transpose().map_err(Into::into)
    }

    pub fn load_cams(&self) -> Result<Vec<ActivationMap>, DataError> {
        match &self.cams {
            CamSource::Inline(maps) => Ok(maps.clone()),
            CamSource::Files(paths) => paths
                .iter()
                .map(|p| Ok(ActivationMap::from_tensor(&read_tensor(p)?)?))
                .collect(),
        }
    }

    /// Fused prior on the key grid, or `None` when fusion is disabled.
    pub fn prior(
        &self,
        mode: Option<FusionMode>,
        grid_h: usize,
        grid_w: usize,
        floor: f64,
    ) -> Result<Option<CompositionPrior>, DataError> {
        let Some(mode) = mode else { return Ok(None) };
        let cams = self.load_cams()?;
        Ok(Some(prior_from_cams(&cams, &self.probabilities, mode, grid_h, grid_w, floor)?))
    }
}

struct LineCtx<'a> {
    line: usize,
    id: &'a str,
}

impl LineCtx<'_> {
    fn parse(&self, field: impl Into<String>, message: impl Into<String>) -> DataError {
        DataError::Parse {
            line: self.line,
            field: field.into(),
            message: message.into(),
        }
    }

    fn range(&self, message: impl Into<String>) -> DataError {
        DataError::Range {
            line: self.line,
            id: self.id.to_string(),
            message: message.into(),
        }
    }
}

fn numbers(ctx: &LineCtx, field: &str, v: &Value, len: Option<usize>) -> Result<Vec<f64>, DataError> {
    let arr = v.as_array().ok_or_else(|| ctx.parse(field, "expected an array of numbers"))?;
    if let Some(len) = len {
        if arr.len() != len {
            return Err(ctx.parse(field, format!("expected {len} numbers, got {}", arr.len())));
        }
    }
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| ctx.parse(field, "expected a number")))
        .collect()
}

fn optional_path(ctx: &LineCtx, obj: &Map<String, Value>, field: &str, base: &Path) -> Result<Option<PathBuf>, DataError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(base.join(s))),
        Some(_) => Err(ctx.parse(field, "expected a path string or null")),
    }
}

fn parse_crop(ctx: &LineCtx, k: usize, v: &Value, dims: [usize; 3]) -> Result<ScoredCrop, DataError> {
    let field = format!("crops[{k}]");
    let obj = v.as_object().ok_or_else(|| ctx.parse(&field, "expected an object"))?;
    let mos = obj
        .get("mos")
        .and_then(Value::as_f64)
        .ok_or_else(|| ctx.parse(format!("{field}.mos"), "expected a number"))?;
    if !(MOS_MIN..=MOS_MAX).contains(&mos) {
        return Err(ctx.range(format!("{field}: MOS {mos} outside [1, 5]")));
    }
    let geometry_err = |e: crate::geometry::GeometryError| ctx.range(format!("{field}: {e}"));
    let crop = if let Some(b) = obj.get("box") {
        let b = numbers(ctx, &format!("{field}.box"), b, Some(4))?;
        CropBox::new(b[0], b[1], b[2], b[3]).map_err(geometry_err)?
    } else if let Some(c) = obj.get("corners") {
        let c = numbers(ctx, &format!("{field}.corners"), c, Some(4))?;
        corner_box(c[0], c[1], c[2], c[3]).map_err(|m| ctx.range(format!("{field}: {m}")))?
    } else if let Some(c) = obj.get("pixels") {
        let c = numbers(ctx, &format!("{field}.pixels"), c, Some(4))?;
        let (h, w) = (dims[1] as f64, dims[2] as f64);
        corner_box(c[0] / w, c[1] / h, c[2] / w, c[3] / h).map_err(|m| ctx.range(format!("{field}: {m}")))?
    } else {
        return Err(ctx.parse(&field, "needs one of `box`, `corners`, `pixels`"));
    };
    Ok(ScoredCrop { crop, mos })
}

fn corner_box(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<CropBox, String> {
    if [x1, y1, x2, y2].iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(format!("corners ({x1}, {y1}, {x2}, {y2}) outside the image"));
    }
    CropBox::from_corners(Corners { x1, y1, x2, y2 }).map_err(|e| e.to_string())
}

fn parse_cams(ctx: &LineCtx, v: &Value, base: &Path) -> Result<CamSource, DataError> {
    match v {
        Value::Array(items) => {
            if items.len() != NUM_CLASSES {
                return Err(ctx.range(format!("{} CAM files, expected {NUM_CLASSES}", items.len())));
            }
            items
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    p.as_str()
                        .map(|s| base.join(s))
                        .ok_or_else(|| ctx.parse(format!("cams[{i}]"), "expected a path string"))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(CamSource::Files)
        }
        Value::Object(obj) => {
            let dim = |name: &str| {
                obj.get(name)
                    .and_then(Value::as_u64)
                    .map(|x| x as usize)
                    .ok_or_else(|| ctx.parse(format!("cams.{name}"), "expected a positive integer"))
            };
            let (h, w) = (dim("height")?, dim("width")?);
            let maps = obj
                .get("maps")
                .and_then(Value::as_array)
                .ok_or_else(|| ctx.parse("cams.maps", "expected an array of maps"))?;
            if maps.len() != NUM_CLASSES {
                return Err(ctx.range(format!("{} inline CAMs, expected {NUM_CLASSES}", maps.len())));
            }
            maps.iter()
                .enumerate()
                .map(|(i, m)| {
                    let vals = numbers(ctx, &format!("cams.maps[{i}]"), m, Some(h * w))?;
                    ActivationMap::new(h, w, vals).map_err(|e| ctx.range(format!("cams.maps[{i}]: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(CamSource::Inline)
        }
        _ => Err(ctx.parse("cams", "expected 9 paths or an inline map object")),
    }
}

fn parse_record(line: usize, text: &str, base: &Path) -> Result<DatasetRecord, DataError> {
    let anon = LineCtx { line, id: "?" };
    let value: Value = serde_json::from_str(text).map_err(|e| anon.parse("<record>", e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| anon.parse("<record>", "expected a JSON object"))?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| anon.parse("id", "expected a string"))?;
    let ctx = LineCtx { line, id };

    let dims = numbers(&ctx, "image_dims", obj.get("image_dims").unwrap_or(&Value::Null), Some(3))?;
    if dims.iter().any(|d| *d < 1.0 || d.fract() != 0.0) {
        return Err(ctx.parse("image_dims", "expected three positive integers"));
    }
    let image_dims = [dims[0] as usize, dims[1] as usize, dims[2] as usize];

    let probs = numbers(&ctx, "probabilities", obj.get("probabilities").unwrap_or(&Value::Null), None)?;
    let probabilities = ClassProbabilities::try_from(probs).map_err(|e| ctx.range(e.to_string()))?;

    let cams = parse_cams(&ctx, obj.get("cams").unwrap_or(&Value::Null), base)?;
    let crops = obj
        .get("crops")
        .and_then(Value::as_array)
        .ok_or_else(|| ctx.parse("crops", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(k, c)| parse_crop(&ctx, k, c, image_dims))
        .collect::<Result<Vec<_>, _>>()?;

    let record = DatasetRecord {
        id: id.to_string(),
        image_dims,
        image: optional_path(&ctx, obj, "image", base)?,
        embedding: optional_path(&ctx, obj, "embedding", base)?,
        probabilities,
        cams,
        crops,
    };
    let mut referenced: Vec<&PathBuf> = record.image.iter().chain(record.embedding.iter()).collect();
    if let CamSource::Files(paths) = &record.cams {
        referenced.extend(paths);
    }
    if let Some(missing) = referenced.into_iter().find(|p| !p.is_file()) {
        return Err(DataError::MissingFile {
            line,
            id: record.id,
            path: missing.clone(),
        });
    }
    Ok(record)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads and validates every record. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = base_dir(path);
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(i + 1, l, &base))
        .collect()
}

fn relative(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

pub fn record_to_json(r: &DatasetRecord, base: &Path) -> Value {
    let cams = match &r.cams {
        CamSource::Files(paths) => json!(paths.iter().map(|p| relative(p, base)).collect::<Vec<_>>()),
        CamSource::Inline(maps) => json!({
            "height": maps.first().map_or(0, ActivationMap::height),
            "width": maps.first().map_or(0, ActivationMap::width),
            "maps": maps.iter().map(|m| m.values().to_vec()).collect::<Vec<_>>(),
        }),
    };
    json!({
        "id": r.id,
        "image_dims": r.image_dims,
        "image": r.image.as_ref().map(|p| relative(p, base)),
        "embedding": r.embedding.as_ref().map(|p| relative(p, base)),
        "probabilities": r.probabilities.values().to_vec(),
        "cams": cams,
        "crops": r.crops.iter().map(|c| json!({"box": c.crop.to_array(), "mos": c.mos})).collect::<Vec<_>>(),
    })
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let base = base_dir(path);
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &record_to_json(r, &base)).expect("records serialize");
        out.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
}
