//! Frozen hierarchical vision encoder.
//!
//! A small seed-deterministic ViT that exposes the residual stream at three
//! tap depths, giving shallow / mid / deep token matrices plus a class token
//! per level. It is never trained: downstream fusion only needs a fixed
//! feature map at several granularities, not semantic quality.

use crate::attention::multi_head_attention;
use crate::blob;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Low,
    Mid,
    High,
}

pub const LEVELS: [Level; 3] = [Level::Low, Level::Mid, Level::High];

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::Low => 0,
            Level::Mid => 1,
            Level::High => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Mid => "mid",
            Level::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Level::Low),
            "mid" => Ok(Level::Mid),
            "high" => Ok(Level::High),
            other => Err(Error::Validation(format!("unknown level '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input side in pixels (3 channels).
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    /// Token width d1.
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// 1-based block indices tapped for (low, mid, high), strictly increasing.
    pub taps: [usize; 3],
    pub seed: u64,
}

impl EncoderConfig {
    /// Toy depths mapping a 10/17/24-of-24 tap ratio onto 6 blocks.
    pub fn desk_default(image_size: usize) -> Self {
        EncoderConfig {
            image_size,
            patch_size: 6,
            depth: 6,
            width: 32,
            heads: 4,
            mlp_hidden: 64,
            taps: [2, 4, 6],
            seed: 11,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "encoder width {} must divide by heads {} and by 4",
                self.width, self.heads
            )));
        }
        if !(self.taps[0] < self.taps[1] && self.taps[1] < self.taps[2]) {
            return Err(Error::Config(format!("taps {:?} must increase", self.taps)));
        }
        if self.taps[2] > self.depth || self.taps[0] == 0 {
            return Err(Error::Config(format!(
                "taps {:?} out of range for depth {}",
                self.taps, self.depth
            )));
        }
        Ok(())
    }

    /// Patch tokens per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Full-token count g (class token excluded).
    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Per-level feature pair: full tokens `[g, d1]` and class token `[1, d1]`.
#[derive(Debug, Clone)]
pub struct LevelFeatures<S: Scalar> {
    pub full: Tensor<S>,
    pub cls: Tensor<S>,
}

/// Features from the three tapped depths. All levels share g and d1.
#[derive(Debug, Clone)]
pub struct HierFeatures<S: Scalar> {
    pub levels: [LevelFeatures<S>; 3],
}

impl<S: Scalar> HierFeatures<S> {
    pub fn level(&self, l: Level) -> &LevelFeatures<S> {
        &self.levels[l.index()]
    }

    pub fn token_count(&self) -> usize {
        self.levels[0].full.rows()
    }

    pub fn width(&self) -> usize {
        self.levels[0].full.cols()
    }

    pub fn cast<T: Scalar>(&self) -> HierFeatures<T> {
        HierFeatures {
            levels: [0, 1, 2].map(|i| LevelFeatures {
                full: self.levels[i].full.cast(),
                cls: self.levels[i].cls.cast(),
            }),
        }
    }
}

struct EncoderBlock<S: Scalar> {
    wq: Tensor<S>,
    bq: Tensor<S>,
    wk: Tensor<S>,
    bk: Tensor<S>,
    wv: Tensor<S>,
    bv: Tensor<S>,
    wo: Tensor<S>,
    bo: Tensor<S>,
    fc1_w: Tensor<S>,
    fc1_b: Tensor<S>,
    fc2_w: Tensor<S>,
    fc2_b: Tensor<S>,
}

/// Frozen weights, fully determined by the config seed.
pub struct Encoder<S: Scalar> {
    pub cfg: EncoderConfig,
    patch_w: Tensor<S>,
    patch_b: Tensor<S>,
    cls: Tensor<S>,
    pos: Tensor<S>,
    blocks: Vec<EncoderBlock<S>>,
}

impl<S: Scalar> Encoder<S> {
    pub fn from_config(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.width;
        let pch = cfg.patch_size * cfg.patch_size * 3;
        let std = 0.02;
        let mut mat = |r: usize, c: usize| Tensor::randn(vec![r, c], std, &mut rng);
        let patch_w = mat(pch, d);
        let cls = mat(1, d);
        let blocks = (0..cfg.depth)
            .map(|_| EncoderBlock {
                wq: mat(d, d),
                bq: Tensor::zeros(vec![1, d]),
                wk: mat(d, d),
                bk: Tensor::zeros(vec![1, d]),
                wv: mat(d, d),
                bv: Tensor::zeros(vec![1, d]),
                wo: mat(d, d),
                bo: Tensor::zeros(vec![1, d]),
                fc1_w: mat(d, cfg.mlp_hidden),
                fc1_b: Tensor::zeros(vec![1, cfg.mlp_hidden]),
                fc2_w: mat(cfg.mlp_hidden, d),
                fc2_b: Tensor::zeros(vec![1, d]),
            })
            .collect();
        Ok(Encoder {
            pos: position_embedding(&cfg),
            patch_b: Tensor::zeros(vec![1, d]),
            patch_w,
            cls,
            blocks,
            cfg,
        })
    }

    /// Encode one image, shape `[H*W, 3]`, values roughly in [-1, 1].
    /// Pure in (image, config): repeated calls are bit-identical.
    pub fn encode(&self, image: &Tensor<S>) -> Result<HierFeatures<S>> {
        let side = self.cfg.image_size;
        if image.shape() != [side * side, 3] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match encoder input [{}, 3]",
                image.shape(),
                side * side
            )));
        }
        let g = self.cfg.token_count();
        let d = self.cfg.width;
        let heads = self.cfg.heads;

        let mut tape: Tape<S> = Tape::new();
        let patches = tape.leaf(patchify(image, side, self.cfg.patch_size)?);
        let pw = tape.leaf(self.patch_w.clone());
        let pb = tape.leaf(self.patch_b.clone());
        let embedded = tape.linear(patches, pw, Some(pb))?;
        let pos = tape.leaf(self.pos.clone());
        let embedded = tape.add(embedded, pos)?;
        let cls = tape.leaf(self.cls.clone());
        let mut x = tape.concat_rows(&[cls, embedded])?;

        let ones = tape.leaf(Tensor::full(vec![1, d], S::one()));
        let zeros = tape.leaf(Tensor::zeros(vec![1, d]));
        let eps = S::of_f64(1e-5);

        let mut taps: Vec<Var> = Vec::new();
        for (bi, blk) in self.blocks.iter().enumerate() {
            let wq = tape.leaf(blk.wq.clone());
            let bq = tape.leaf(blk.bq.clone());
            let wk = tape.leaf(blk.wk.clone());
            let bk = tape.leaf(blk.bk.clone());
            let wv = tape.leaf(blk.wv.clone());
            let bv = tape.leaf(blk.bv.clone());
            let wo = tape.leaf(blk.wo.clone());
            let bo = tape.leaf(blk.bo.clone());
            let h = tape.layer_norm(x, ones, zeros, eps)?;
            let q = tape.linear(h, wq, Some(bq))?;
            let k = tape.linear(h, wk, Some(bk))?;
            let v = tape.linear(h, wv, Some(bv))?;
            let attn = multi_head_attention(&mut tape, q, k, v, heads)?;
            let attn = tape.linear(attn, wo, Some(bo))?;
            x = tape.add(x, attn)?;

            let f1w = tape.leaf(blk.fc1_w.clone());
            let f1b = tape.leaf(blk.fc1_b.clone());
            let f2w = tape.leaf(blk.fc2_w.clone());
            let f2b = tape.leaf(blk.fc2_b.clone());
            let h = tape.layer_norm(x, ones, zeros, eps)?;
            let h = tape.linear(h, f1w, Some(f1b))?;
            let h = tape.gelu(h);
            let h = tape.linear(h, f2w, Some(f2b))?;
            x = tape.add(x, h)?;

            if self.cfg.taps.contains(&(bi + 1)) {
                taps.push(x);
            }
        }
        debug_assert_eq!(taps.len(), 3);

        let mut levels = Vec::with_capacity(3);
        for &t in &taps {
            let cls = tape.slice_rows(t, 0, 1)?;
            let full = tape.slice_rows(t, 1, g)?;
            levels.push(LevelFeatures {
                full: tape.value(full).clone(),
                cls: tape.value(cls).clone(),
            });
        }
        Ok(HierFeatures {
            levels: [levels.remove(0), levels.remove(0), levels.remove(0)],
        })
    }
}

/// Rearrange `[side*side, 3]` pixels into `[g, patch*patch*3]` patch rows.
pub fn patchify<S: Scalar>(image: &Tensor<S>, side: usize, patch: usize) -> Result<Tensor<S>> {
    let grid = side / patch;
    let mut data = Vec::with_capacity(grid * grid * patch * patch * 3);
    for py in 0..grid {
        for px in 0..grid {
            for dy in 0..patch {
                for dx in 0..patch {
                    let pixel = (py * patch + dy) * side + px * patch + dx;
                    for c in 0..3 {
                        data.push(image.get(&[pixel, c]));
                    }
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, patch * patch * 3], data)
}

/// Fixed 2-d sinusoidal position embedding over the patch grid, `[g, d1]`.
fn position_embedding<S: Scalar>(cfg: &EncoderConfig) -> Tensor<S> {
    let grid = cfg.grid();
    let d = cfg.width;
    let quarter = d / 4;
    let mut data = Vec::with_capacity(grid * grid * d);
    for py in 0..grid {
        for px in 0..grid {
            for j in 0..d {
                let group = j / 4;
                let freq = 10000f64.powf(-(group as f64) / quarter.max(1) as f64);
                let v = match j % 4 {
                    0 => (py as f64 * freq).sin(),
                    1 => (py as f64 * freq).cos(),
                    2 => (px as f64 * freq).sin(),
                    _ => (px as f64 * freq).cos(),
                };
                data.push(S::of_f64(v));
            }
        }
    }
    Tensor::new(vec![grid * grid, d], data).expect("pos embedding shape")
}

// ---- feature container -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FeatureEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct FeatureManifest {
    version: String,
    dtype: String,
    tensors: Vec<FeatureEntry>,
}

const FEATURE_VERSION: &str = "1";

/// Save features as `manifest.json` plus one little-endian f32 blob per
/// tensor, named `{level}.{full|cls}.bin`.
pub fn save_features(features: &HierFeatures<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::new();
    for level in LEVELS {
        let lf = features.level(level);
        for (kind, t) in [("full", &lf.full), ("cls", &lf.cls)] {
            let name = format!("{}.{}", level.name(), kind);
            let file = format!("{name}.bin");
            blob::write_f32_blob(&dir.join(&file), t.data())?;
            entries.push(FeatureEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            });
        }
    }
    let manifest = FeatureManifest {
        version: FEATURE_VERSION.into(),
        dtype: "f32".into(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(dir.display().to_string(), e.to_string()))?;
    blob::atomic_write(&dir.join("manifest.json"), json.as_bytes())
}

/// Load a feature container; round-trips [`save_features`] bit-exactly.
pub fn load_features(dir: &Path) -> Result<HierFeatures<f32>> {
    let mpath = dir.join("manifest.json");
    let text =
        std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: FeatureManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(mpath.display().to_string(), format!("bad manifest: {e}")))?;
    if manifest.version != FEATURE_VERSION {
        return Err(Error::format(
            mpath.display().to_string(),
            format!("unsupported version '{}'", manifest.version),
        ));
    }
    if manifest.dtype != "f32" {
        return Err(Error::format(
            mpath.display().to_string(),
            format!("unsupported dtype '{}'", manifest.dtype),
        ));
    }

    let find = |name: &str| -> Result<Tensor<f32>> {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| {
                Error::format(mpath.display().to_string(), format!("missing tensor '{name}'"))
            })?;
        if entry.shape.len() != 2 {
            return Err(Error::format(
                mpath.display().to_string(),
                format!("tensor '{name}' must be 2-d, got {:?}", entry.shape),
            ));
        }
        let numel = entry.shape.iter().product();
        let data = blob::read_f32_blob(&dir.join(&entry.file), numel)?;
        Tensor::new(entry.shape.clone(), data)
    };

    let mut levels = Vec::with_capacity(3);
    for level in LEVELS {
        let full = find(&format!("{}.full", level.name()))?;
        let cls = find(&format!("{}.cls", level.name()))?;
        if cls.rows() != 1 || cls.cols() != full.cols() {
            return Err(Error::format(
                mpath.display().to_string(),
                format!(
                    "level {}: cls shape {:?} inconsistent with full {:?}",
                    level.name(),
                    cls.shape(),
                    full.shape()
                ),
            ));
        }
        levels.push(LevelFeatures { full, cls });
    }
    // all levels must share g and d1
    let (g, d1) = (levels[0].full.rows(), levels[0].full.cols());
    for (i, lf) in levels.iter().enumerate() {
        if lf.full.rows() != g || lf.full.cols() != d1 {
            return Err(Error::format(
                mpath.display().to_string(),
                format!(
                    "level {} token shape {:?} differs from low level [{g}, {d1}]",
                    LEVELS[i].name(),
                    lf.full.shape()
                ),
            ));
        }
    }
    Ok(HierFeatures {
        levels: [levels.remove(0), levels.remove(0), levels.remove(0)],
    })
}
