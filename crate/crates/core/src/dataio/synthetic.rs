//! Synthetic scenes with a known best crop.
//!
//! Each scene plants a crop on the patch lattice and draws a bright block
//! exactly over it, plus a smaller look-alike block elsewhere. Only the class
//! activation maps say which block is the subject: the dominant class peaks at
//! the planted center and the remaining classes peak around its rim, so the
//! probability-weighted fusion outlines the crop while the dominant map alone
//! marks just its middle. Candidate crops are lattice boxes scored by
//! `1 + 4·IoU(candidate, planted)²`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CamSource, DataError, DatasetRecord};
use crate::composition::{ActivationMap, ClassProbabilities, NUM_CLASSES};
use crate::geometry::{iou, CropBox, ScoredCrop};
use crate::tensor::{write_tensor, Tensor};

pub const ORACLE_POWER: i32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Lattice cells per axis; equal to the model's patch grid.
    pub grid: usize,
    pub patch_px: usize,
    pub channels: usize,
    /// CAM resolution per axis.
    pub cam_size: usize,
    pub n_candidates: usize,
    pub noise: f64,
}

impl SyntheticConfig {
    pub fn new(grid: usize, n_candidates: usize) -> Self {
        SyntheticConfig {
            grid,
            patch_px: 8,
            channels: 3,
            cam_size: 2 * grid,
            n_candidates,
            noise: 0.2,
        }
    }

    pub fn image_px(&self) -> usize {
        self.grid * self.patch_px
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub planted: CropBox,
    /// Lattice cells covered by the planted crop, row-major.
    pub salient: Vec<bool>,
    /// `[channels, H, W]`.
    pub image: Tensor,
    pub cams: Vec<ActivationMap>,
    pub probabilities: ClassProbabilities,
    pub candidates: Vec<ScoredCrop>,
}

pub fn oracle_mos(candidate: &CropBox, planted: &CropBox) -> f64 {
    1.0 + 4.0 * iou(candidate, planted).powi(ORACLE_POWER)
}

/// Box covering lattice cells `[x0, x0+w) × [y0, y0+h)`.
fn lattice_box(grid: usize, x0: usize, y0: usize, w: usize, h: usize) -> CropBox {
    let g = grid as f64;
    CropBox::new(
        (x0 as f64 + w as f64 / 2.0) / g,
        (y0 as f64 + h as f64 / 2.0) / g,
        w as f64 / g,
        h as f64 / g,
    )
    .expect("lattice boxes are valid")
}

#[derive(Clone, Copy, PartialEq)]
struct Cells {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Cells {
    fn random(rng: &mut ChaCha8Rng, grid: usize, lo: usize, hi: usize) -> Self {
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        Cells {
            x0: rng.random_range(0..=grid - w),
            y0: rng.random_range(0..=grid - h),
            w,
            h,
        }
    }

    fn disjoint(&self, o: &Cells) -> bool {
        self.x0 + self.w <= o.x0 || o.x0 + o.w <= self.x0 || self.y0 + self.h <= o.y0 || o.y0 + o.h <= self.y0
    }

    fn to_box(self, grid: usize) -> CropBox {
        lattice_box(grid, self.x0, self.y0, self.w, self.h)
    }
}

fn bump(size: usize, cx: f64, cy: f64, sigma: f64) -> ActivationMap {
    let s = size as f64;
    let vals = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            let d2 = (x / s - cx).powi(2) + (y / s - cy).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    ActivationMap::normalized(size, size, vals).expect("finite bump")
}

fn scene(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, id: String) -> SyntheticScene {
    let g = cfg.grid;
    let planted_cells = Cells::random(rng, g, 3, (g - 2).max(3));
    let planted = planted_cells.to_box(g);

    let distractor = (0..100)
        .map(|_| Cells::random(rng, g, 2.min(g), 3.min(g)))
        .find(|c| c.disjoint(&planted_cells));

    let px = cfg.image_px();
    let mut image = vec![0.0; cfg.channels * px * px];
    for v in image.iter_mut() {
        *v = cfg.noise * rng.random::<f64>();
    }
    for cells in std::iter::once(planted_cells).chain(distractor) {
        for y in cells.y0 * cfg.patch_px..(cells.y0 + cells.h) * cfg.patch_px {
            for x in cells.x0 * cfg.patch_px..(cells.x0 + cells.w) * cfg.patch_px {
                image[y * px + x] += 0.8;
            }
        }
    }
    let image = Tensor::new(vec![cfg.channels, px, px], image).unwrap();

    let salient = (0..g * g)
        .map(|i| {
            let (r, c) = (i / g, i % g);
            (planted_cells.y0..planted_cells.y0 + planted_cells.h).contains(&r)
                && (planted_cells.x0..planted_cells.x0 + planted_cells.w).contains(&c)
        })
        .collect();

    let dominant = rng.random_range(0..NUM_CLASSES);
    // clearly the argmax, yet light enough that the rim maps still show in
    // the probability-weighted fusion
    let top = rng.random_range(0.25..0.4);
    let mut p = [(1.0 - top) / (NUM_CLASSES - 1) as f64; NUM_CLASSES];
    p[dominant] = top;
    let probabilities = ClassProbabilities::new(p).expect("valid probabilities");

    let sigma = 0.2 * planted.w().min(planted.h());
    let rim: Vec<(f64, f64)> = [(-1, -1), (1, -1), (-1, 1), (1, 1), (-1, 0), (1, 0), (0, -1), (0, 1)]
        .iter()
        .map(|&(dx, dy)| {
            (
                planted.cx() + 0.35 * dx as f64 * planted.w(),
                planted.cy() + 0.35 * dy as f64 * planted.h(),
            )
        })
        .collect();
    let mut rim_iter = rim.into_iter();
    let cams = (0..NUM_CLASSES)
        .map(|c| {
            let (x, y) = if c == dominant {
                (planted.cx(), planted.cy())
            } else {
                rim_iter.next().expect("eight rim points")
            };
            bump(cfg.cam_size, x, y, sigma)
        })
        .collect();

    let mut seen = vec![planted_cells];
    let mut tries = 0;
    while seen.len() < cfg.n_candidates && tries < 100 * cfg.n_candidates {
        tries += 1;
        let c = Cells::random(rng, g, 2.min(g), g);
        if !seen.contains(&c) {
            seen.push(c);
        }
    }
    seen.shuffle(rng);
    let candidates = seen
        .into_iter()
        .map(|c| {
            let b = c.to_box(g);
            ScoredCrop::new(b, oracle_mos(&b, &planted)).expect("oracle MOS in range")
        })
        .collect();

    SyntheticScene {
        id,
        planted,
        salient,
        image,
        cams,
        probabilities,
        candidates,
    }
}

/// Deterministic in `seed`. Images are `3 × 8·grid × 8·grid`, one lattice
/// cell per patch.
pub fn generate_synthetic(seed: u64, n_images: usize, grid: usize, n_candidates: usize) -> Vec<SyntheticScene> {
    generate_with(&SyntheticConfig::new(grid, n_candidates), seed, n_images)
}

pub fn generate_with(cfg: &SyntheticConfig, seed: u64, n_images: usize) -> Vec<SyntheticScene> {
    assert!(cfg.grid >= 5, "synthetic lattice needs at least 5 cells per axis");
    assert!(cfg.n_candidates >= 1, "at least the planted crop is a candidate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|i| scene(cfg, &mut rng, format!("syn-{seed}-{i:05}")))
        .collect()
}

/// Writes images and CAMs as AESC files plus `dataset.jsonl` under `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, scenes: &[SyntheticScene]) -> Result<Vec<DatasetRecord>, DataError> {
    let dir = dir.as_ref();
    for sub in ["images", "cams"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|source| DataError::Io { path: p, source })?;
    }
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        let image = dir.join("images").join(format!("{}.aesc", s.id));
        write_tensor(&image, &s.image)?;
        let mut cams = Vec::with_capacity(NUM_CLASSES);
        for (c, m) in s.cams.iter().enumerate() {
            let p = dir.join("cams").join(format!("{}-{c}.aesc", s.id));
            write_tensor(&p, &m.to_tensor())?;
            cams.push(p);
        }
        let d = s.image.dims();
        records.push(DatasetRecord {
            id: s.id.clone(),
            image_dims: [d[0], d[1], d[2]],
            image: Some(image),
            embedding: None,
            probabilities: s.probabilities,
            cams: CamSource::Files(cams),
            crops: s.candidates.clone(),
        });
    }
    super::write_dataset(dir.join("dataset.jsonl"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::load_dataset;

    #[test]
    fn oracle_endpoints() {
        let planted = lattice_box(8, 2, 2, 4, 4);
        assert_eq!(oracle_mos(&planted, &planted), 5.0);
        assert_eq!(oracle_mos(&lattice_box(8, 0, 0, 2, 2), &planted), 1.0);
    }

    #[test]
    fn scenes_are_well_formed() {
        let scenes = generate_synthetic(3, 20, 8, 90);
        for s in &scenes {
            assert_eq!(s.candidates.len(), 90);
            assert!(s.candidates.iter().any(|c| c.crop == s.planted && c.mos == 5.0));
            assert!(s.candidates.iter().all(|c| c.mos <= 5.0 && (c.crop == s.planted || c.mos < 5.0)));
            assert_eq!(s.image.dims(), &[3, 64, 64]);
            assert_eq!(s.cams.len(), NUM_CLASSES);
            let n_salient = s.salient.iter().filter(|&&b| b).count();
            assert!((n_salient as f64 - s.planted.w() * s.planted.h() * 64.0).abs() < 1e-9);
            // the dominant CAM peaks inside the planted crop
            let m = &s.cams[s.probabilities.argmax()];
            let peak = (0..m.values().len()).max_by(|&a, &b| m.values()[a].total_cmp(&m.values()[b])).unwrap();
            let (y, x) = ((peak / 16) as f64 / 16.0, (peak % 16) as f64 / 16.0);
            let c = s.planted.to_corners().unwrap();
            assert!(x >= c.x1 && x < c.x2 && y >= c.y1 && y < c.y2);
        }
    }

    #[test]
    fn oracle_is_monotone_in_iou() {
        for s in generate_synthetic(11, 5, 8, 60) {
            let mut by_iou: Vec<(f64, f64)> = s.candidates.iter().map(|c| (iou(&c.crop, &s.planted), c.mos)).collect();
            by_iou.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in by_iou.windows(2) {
                if w[1].0 > w[0].0 {
                    assert!(w[1].1 > w[0].1);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_loadable() {
        let a = generate_synthetic(7, 4, 8, 30);
        let b = generate_synthetic(7, 4, 8, 30);
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(8, 4, 8, 30));
        let dir = tempfile::tempdir().unwrap();
        let recs = write_synthetic(dir.path(), &a).unwrap();
        let loaded = load_dataset(dir.path().join("dataset.jsonl")).unwrap();
        assert_eq!(loaded, recs);
        for (r, s) in loaded.iter().zip(&a) {
            assert_eq!(r.load_image().unwrap(), s.image);
            assert_eq!(r.load_cams().unwrap(), s.cams);
        }
    }
}
