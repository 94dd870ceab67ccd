//! Visual features: the global grid matrix, the padded regional matrix with
//! its presence mask, region vectors built from class annotations, the binary
//! container they are stored in, and a synthetic generator.
//!
//! # Container layout
//!
//! Little-endian throughout.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `DCCNFEAT` |
//! | 8 | 4 | version `u32` (= 1) |
//! | 12 | 8 | sentence id `u64` |
//! | 20 | 4 | global rows `u32` |
//! | 24 | 4 | global columns `u32` |
//! | 28 | 4 | region slots `u32` |
//! | 32 | 4 | region columns `u32` |
//! | 36 | 4 | annotation classes `u32` (0 = no annotation block) |
//! | 40 | 8·g·c | global block, `f64` row-major |
//! | … | 8·r·c | regional block, `f64` row-major |
//! | … | r | mask, one byte per region slot (0 or 1) |
//! | … | 8·r·k | annotation block, present when `k > 0`: per-slot class distributions |

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCCNFEAT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

/// Matrix sizes a model expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub global_rows: usize,
    pub regions: usize,
    pub d_c: usize,
}

impl Default for FeatureShape {
    /// 14x14 grid cells and up to 10 regions, 256 wide.
    fn default() -> Self {
        FeatureShape { global_rows: 196, regions: 10, d_c: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub sentence_id: u64,
    /// `[global_rows, d_c]`
    pub global: Tensor,
    /// `[regions, d_c]`, rows past the region count all zero.
    pub regional: Tensor,
    pub mask: Vec<bool>,
    /// Class distribution per region slot, `[regions, classes]`, when kept.
    pub annotations: Option<Tensor>,
}

impl VisualFeatures {
    pub fn shape(&self) -> FeatureShape {
        FeatureShape {
            global_rows: self.global.shape()[0],
            regions: self.regional.shape()[0],
            d_c: self.global.shape()[1],
        }
    }

    pub fn region_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks sizes and that padded rows are zero.
    pub fn validate(&self, expect: FeatureShape) -> Result<()> {
        let got = self.shape();
        if self.global.shape() != [expect.global_rows, expect.d_c] {
            return Err(Error::dim("global features", self.global.shape(), &[expect.global_rows, expect.d_c]));
        }
        if self.regional.shape() != [expect.regions, expect.d_c] || self.mask.len() != expect.regions {
            return Err(Error::dim("regional features", self.regional.shape(), &[expect.regions, expect.d_c]));
        }
        for (i, &m) in self.mask.iter().enumerate() {
            if !m && self.regional.row(i).iter().any(|&x| x != 0.0) {
                return Err(Error::Input(format!("padded region row {i} is not zero")));
            }
        }
        debug_assert_eq!(got, expect);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape();
        let k = self.annotations.as_ref().map_or(0, |a| a.shape()[1]);
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (s.global_rows + s.regions * (1 + k)) * s.d_c + s.regions);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.sentence_id.to_le_bytes());
        for v in [s.global_rows, s.d_c, s.regions, s.d_c, k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in self.global.data().iter().chain(self.regional.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend(self.mask.iter().map(|&m| u8::from(m)));
        if let Some(a) = &self.annotations {
            for x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::format("not a feature container (bad magic)", 0));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported feature container version {version}"), at as u64));
        }
        let sentence_id = r.u64("sentence id")?;
        let g_rows = r.u32("global rows")? as usize;
        let at = r.pos;
        let g_cols = r.u32("global columns")? as usize;
        let regions = r.u32("region slots")? as usize;
        let r_at = r.pos;
        let r_cols = r.u32("region columns")? as usize;
        if r_cols != g_cols {
            return Err(Error::format(
                format!("region width {r_cols} differs from global width {g_cols}"),
                r_at as u64,
            ));
        }
        if g_rows == 0 || g_cols == 0 {
            return Err(Error::format("empty global block", at as u64));
        }
        let classes = r.u32("annotation classes")? as usize;
        let global = Tensor::new(vec![g_rows, g_cols], r.f64s(g_rows * g_cols, "global block")?)?;
        let regional = Tensor::new(vec![regions, g_cols], r.f64s(regions * g_cols, "regional block")?)?;
        let mask_at = r.pos;
        let mask = r
            .take(regions, "mask")?
            .iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::format(format!("mask byte {other} is not 0 or 1"), (mask_at + i) as u64)),
            })
            .collect::<Result<Vec<bool>>>()?;
        let annotations = if classes > 0 {
            Some(Tensor::new(vec![regions, classes], r.f64s(regions * classes, "annotation block")?)?)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes", bytes.len() - r.pos), r.pos as u64));
        }
        Ok(VisualFeatures { sentence_id, global, regional, mask, annotations })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a container and checks it against the expected sizes.
    pub fn load(path: impl AsRef<Path>, expect: FeatureShape) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let feats = Self::from_bytes(&bytes)?;
        let got = feats.shape();
        if got.global_rows != expect.global_rows || got.d_c != expect.d_c {
            return Err(Error::format(
                format!(
                    "global block is {}x{}, expected {}x{}",
                    got.global_rows, got.d_c, expect.global_rows, expect.d_c
                ),
                20,
            ));
        }
        if got.regions != expect.regions {
            return Err(Error::format(
                format!("{} region slots, expected {}", got.regions, expect.regions),
                28,
            ));
        }
        feats.validate(expect)?;
        Ok(feats)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos), self.pos as u64)
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format(format!("{what} too large"), self.pos as u64))?;
        Ok(self.take(len, what)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Region vectors as probability-weighted sums of class embeddings, padded
/// with zero rows to `slots`. `annotations` holds one distribution per region.
pub fn build_region_vectors(annotations: &[Vec<f64>], class_embeddings: &Tensor, slots: usize) -> Result<(Tensor, Vec<bool>)> {
    let (classes, d) = (class_embeddings.shape()[0], class_embeddings.shape()[1]);
    if annotations.len() > slots {
        return Err(Error::Input(format!("{} regions exceed the {slots} region slots", annotations.len())));
    }
    let mut out = Tensor::zeros(&[slots, d]);
    for (r, p) in annotations.iter().enumerate() {
        if p.len() != classes {
            return Err(Error::dim("region annotation", &[p.len()], &[classes]));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-6 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Input(format!("region {r} class distribution sums to {total}, not 1")));
        }
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        for (c, &w) in p.iter().enumerate() {
            if w != 0.0 {
                for (o, e) in row.iter_mut().zip(class_embeddings.row(c)) {
                    *o += w * e;
                }
            }
        }
    }
    let mask = (0..slots).map(|r| r < annotations.len()).collect();
    Ok((out, mask))
}

/// Seeded table of unit-norm class embeddings, `[classes, d_c]`.
///
/// Each row is the normalized sum of one direction shared by every class and
/// an independent Gaussian direction, so distinct classes have cosine
/// similarity near 0.5, like the common component of real embedding tables.
pub fn class_table(seed: u64, classes: usize, d_c: usize) -> Tensor {
    let mut r = rng::stream(seed, rng::CLASS_TABLE_STREAM);
    let unit = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let row: Vec<f64> = (0..d_c).map(|_| StandardNormal.sample(r)).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.into_iter().map(|x| x / n).collect()
    };
    let shared = unit(&mut r);
    let mut data = Vec::with_capacity(classes * d_c);
    for _ in 0..classes {
        let row: Vec<f64> = unit(&mut r).iter().zip(&shared).map(|(a, b)| a + b).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.into_iter().map(|x| x / n));
    }
    Tensor::new(vec![classes, d_c], data).expect("class table shape")
}

/// Synthetic features for a sense-labelled sentence.
///
/// Sense `s` is tied to class `s` of the class table; classes at or beyond
/// `senses` serve as distractors. The global matrix repeats the sense class
/// embedding in every row. The regional matrix holds one region annotated with
/// the sense class and 0 to `max_distractors` distractor regions, in random
/// order. Every row gets independent Gaussian noise of standard deviation
/// `noise / sqrt(d_c)`, so `noise = 1` matches the unit norm of the signal.
#[derive(Debug, Clone)]
pub struct FeatureSynth {
    pub shape: FeatureShape,
    pub classes: Tensor,
    /// Number of sense-linked classes.
    pub senses: usize,
    pub noise: f64,
    pub max_distractors: usize,
    /// Keep one-hot class annotations in the output.
    pub keep_annotations: bool,
}

impl FeatureSynth {
    pub fn new(shape: FeatureShape, senses: usize, distractor_classes: usize, noise: f64, seed: u64) -> Result<Self> {
        if senses == 0 || distractor_classes == 0 {
            return Err(Error::Config("synthetic features need sense classes and distractor classes".into()));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Config(format!("feature noise {noise} must be finite and non-negative")));
        }
        if shape.regions == 0 {
            return Err(Error::Config("synthetic features need at least one region slot".into()));
        }
        Ok(FeatureSynth {
            shape,
            classes: class_table(seed, senses + distractor_classes, shape.d_c),
            senses,
            noise,
            max_distractors: 3.min(shape.regions - 1),
            keep_annotations: false,
        })
    }

    pub fn class_count(&self) -> usize {
        self.classes.shape()[0]
    }

    /// Deterministic in `(sense_id, seed)`.
    pub fn synthesize(&self, sense_id: usize, seed: u64, sentence_id: u64) -> Result<VisualFeatures> {
        if sense_id >= self.senses {
            return Err(Error::Input(format!("sense id {sense_id} outside the {} known senses", self.senses)));
        }
        let FeatureShape { global_rows, regions, d_c } = self.shape;
        let mut r = rng::stream(seed, rng::SYNTH_FEATURE_BASE + sense_id as u64);
        let n_classes = self.class_count();
        let distractors = r.random_range(0..=self.max_distractors);
        let mut region_classes = vec![sense_id];
        while region_classes.len() < 1 + distractors {
            let c = r.random_range(self.senses..n_classes);
            if !region_classes.contains(&c) || n_classes - self.senses < distractors {
                region_classes.push(c);
            }
        }
        // Fisher-Yates so the sense region can sit in any slot
        for i in (1..region_classes.len()).rev() {
            let j = r.random_range(0..=i);
            region_classes.swap(i, j);
        }
        let annotations: Vec<Vec<f64>> = region_classes
            .iter()
            .map(|&c| (0..n_classes).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let (mut regional, mask) = build_region_vectors(&annotations, &self.classes, regions)?;
        let sd = self.noise / (d_c as f64).sqrt();
        let mut noisy = |row: &mut [f64]| {
            if sd > 0.0 {
                for x in row {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *x += sd * z;
                }
            }
        };
        for row in regional.data_mut().chunks_mut(d_c).take(region_classes.len()) {
            noisy(row);
        }
        let mut global = Tensor::zeros(&[global_rows, d_c]);
        let sense_row = self.classes.row(sense_id).to_vec();
        for row in global.data_mut().chunks_mut(d_c) {
            row.copy_from_slice(&sense_row);
            noisy(row);
        }
        let annotations = self.keep_annotations.then(|| {
            let mut a = Tensor::zeros(&[regions, n_classes]);
            for (slot, &c) in region_classes.iter().enumerate() {
                a.set(&[slot, c], 1.0);
            }
            a
        });
        Ok(VisualFeatures { sentence_id, global, regional, mask, annotations })
    }

    /// Nearest-class probe: the sense class with the largest dot product
    /// against any present region.
    pub fn probe(&self, feats: &VisualFeatures) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &present) in feats.mask.iter().enumerate() {
            if !present {
                continue;
            }
            for s in 0..self.senses {
                let dot: f64 = feats.regional.row(i).iter().zip(self.classes.row(s)).map(|(a, b)| a * b).sum();
                if dot > best.0 {
                    best = (dot, s);
                }
            }
        }
        best.1
    }
}
