//! Datasets: a seeded synthetic lesion-like generator, ingestion of a
//! HAM-style directory (metadata table plus one image per row), and batching.
//!
//! Class ids follow the fixed order of [`CLASS_CODES`]. Tabular fields use
//! id 0 for unknown:
//! - sex: `0` unknown, `1` male, `2` female
//! - age bucket: `1 + min(age / 5, 20)` for a known age in years
//! - localization: `1 + position` in [`LOCALIZATIONS`]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TabularInput;
use crate::nn::Tensor;
use crate::rng;

/// Diagnosis codes in class-id order: actinic keratoses, benign keratoses,
/// basal cell carcinoma, dermatofibroma, melanocytic nevi, melanoma,
/// vascular lesions.
pub const CLASS_CODES: [&str; 7] = ["akiec", "bkl", "bcc", "df", "nv", "mel", "vasc"];
pub const NUM_CLASSES: usize = CLASS_CODES.len();

pub const SEXES: [&str; 2] = ["male", "female"];
pub const LOCALIZATIONS: [&str; 14] = [
    "abdomen",
    "acral",
    "back",
    "chest",
    "ear",
    "face",
    "foot",
    "genital",
    "hand",
    "lower extremity",
    "neck",
    "scalp",
    "trunk",
    "upper extremity",
];

pub const SEX_VOCAB: usize = 3;
pub const AGE_VOCAB: usize = 22;
pub const LOC_VOCAB: usize = 16;

pub const METADATA_FILE: &str = "metadata.csv";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

pub fn class_id(code: &str) -> Option<usize> {
    CLASS_CODES.iter().position(|c| *c == code)
}

pub fn age_bucket(age_years: f64) -> usize {
    1 + ((age_years / 5.0).floor() as usize).min(20)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub tabular: TabularInput,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.image.shape().to_vec();
            if shape.len() != 3 {
                return Err(Error::Dimension(format!("sample image must be [C, H, W], got {shape:?}")));
            }
            for (i, s) in samples.iter().enumerate() {
                if s.image.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "sample {i} image {:?} differs from {shape:?}",
                        s.image.shape()
                    )));
                }
                if s.label >= NUM_CLASSES {
                    return Err(Error::Index(format!("sample {i} label {} out of range", s.label)));
                }
            }
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks the listed samples into `[B, C, H, W]` images, tabular rows
    /// and labels.
    pub fn to_batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<TabularInput>, Vec<usize>)> {
        let first = idx
            .first()
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let shape = first.image.shape();
        let mut data = Vec::with_capacity(idx.len() * first.image.numel());
        let mut tab = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Index(format!("sample {i} of {}", self.len())))?;
            data.extend_from_slice(s.image.data());
            tab.push(s.tabular);
            labels.push(s.label);
        }
        let images = Tensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], data)?;
        Ok((images, tab, labels))
    }
}

/// Sample indices of each batch for one epoch: a permutation seeded by
/// `(seed, epoch)`, cut into consecutive batches; the last may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive(seed, &[epoch])));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Appearance of one class's lesion blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    /// Semi-major axis range as a fraction of the image side.
    pub radius: [f64; 2],
    /// `1 − minor/major`, in `[0, 1)`.
    pub eccentricity: f64,
    pub color_mean: [f64; 3],
    pub color_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    /// Per-class blob parameters, one entry per class.
    pub blobs: Vec<BlobSpec>,
    /// Amplitude of the sinusoidal skin texture.
    pub texture: f64,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f64,
    /// Probability that each tabular field is drawn from its class profile
    /// rather than uniformly.
    pub correlation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let blob = |r0, r1, ecc, c: [f64; 3]| BlobSpec {
            radius: [r0, r1],
            eccentricity: ecc,
            color_mean: c,
            color_std: 0.04,
        };
        SynthConfig {
            n: 1400,
            image_size: 32,
            blobs: vec![
                blob(0.16, 0.22, 0.5, [0.80, 0.25, 0.30]),
                blob(0.22, 0.30, 0.1, [0.55, 0.50, 0.15]),
                blob(0.16, 0.22, 0.0, [0.85, 0.55, 0.80]),
                blob(0.12, 0.18, 0.2, [0.45, 0.25, 0.50]),
                blob(0.16, 0.24, 0.3, [0.40, 0.22, 0.05]),
                blob(0.25, 0.35, 0.6, [0.10, 0.12, 0.30]),
                blob(0.14, 0.20, 0.4, [0.70, 0.05, 0.10]),
            ],
            texture: 0.05,
            noise: 0.04,
            correlation: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blobs.len() != NUM_CLASSES {
            return Err(Error::Config(format!("need {NUM_CLASSES} blob specs, got {}", self.blobs.len())));
        }
        if self.n < NUM_CLASSES {
            return Err(Error::Config(format!("n = {} is below the class count", self.n)));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::Config(format!("correlation {} outside [0, 1]", self.correlation)));
        }
        for (k, b) in self.blobs.iter().enumerate() {
            if !(b.radius[0] > 0.0 && b.radius[0] <= b.radius[1])
                || !(0.0..1.0).contains(&b.eccentricity)
                || b.color_std < 0.0
            {
                return Err(Error::Config(format!("blob spec for class {k} is invalid")));
            }
        }
        Ok(())
    }
}

/// Typical tabular profile of a class.
fn class_profile(label: usize) -> TabularInput {
    const SEX: [usize; 7] = [1, 2, 1, 2, 2, 1, 2];
    const AGE: [usize; 7] = [15, 13, 14, 9, 6, 12, 10];
    const LOC: [usize; 7] = [6, 3, 6, 10, 3, 13, 12];
    TabularInput {
        sex_id: SEX[label],
        age_bucket_id: AGE[label],
        localization_id: LOC[label],
    }
}

fn synth_sample(cfg: &SynthConfig, label: usize, r: &mut impl Rng) -> Sample {
    let s = cfg.image_size;
    let sf = s as f64;
    let blob = &cfg.blobs[label];
    let base = [0.86, 0.68, 0.58];
    let (fx, fy, phase): (f64, f64, f64) = (r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.0..6.3));
    let cx = r.random_range(0.35..0.65) * sf;
    let cy = r.random_range(0.35..0.65) * sf;
    let a = r.random_range(blob.radius[0]..=blob.radius[1]) * sf;
    let b = a * (1.0 - blob.eccentricity);
    let theta: f64 = r.random_range(0.0..std::f64::consts::PI);
    let jitter = Normal::new(0.0, blob.color_std.max(1e-12)).expect("finite std");
    let color: Vec<f64> = blob.color_mean.iter().map(|m| m + jitter.sample(r)).collect();
    let (sin, cos) = theta.sin_cos();
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let d = (u * u + v * v).sqrt();
            // soft edge over the outer 20% of the radius
            let alpha = ((1.0 - d) / 0.2).clamp(0.0, 1.0);
            let tex = cfg.texture * (fx * x as f64 + fy * y as f64 + phase).sin();
            for ch in 0..3 {
                let skin = base[ch] + tex + cfg.noise * r.random_range(-1.0..1.0);
                let px = (1.0 - alpha) * skin + alpha * color[ch];
                data[(ch * s + y) * s + x] = px.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let profile = class_profile(label);
    let mut pick = |class_value: usize, vocab: usize| {
        if r.random_bool(cfg.correlation) {
            class_value
        } else {
            r.random_range(0..vocab)
        }
    };
    let tabular = TabularInput {
        sex_id: pick(profile.sex_id, SEX_VOCAB),
        age_bucket_id: pick(profile.age_bucket_id, AGE_VOCAB),
        localization_id: pick(profile.localization_id, LOCALIZATIONS.len() + 1),
    };
    Sample {
        image: Tensor::new(vec![3, s, s], data).expect("image layout"),
        tabular,
        label,
    }
}

/// Class-balanced synthetic dataset: labels cycle through the classes and
/// are then shuffled; every sample draws from its own seeded stream.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % NUM_CLASSES).collect();
    labels.shuffle(&mut rng::stream(rng::derive_label(cfg.seed, "labels")));
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| synth_sample(cfg, label, &mut rng::stream(rng::derive(cfg.seed, &[i as u64]))))
        .collect();
    Dataset::new(samples)
}

fn image_id(i: usize) -> String {
    format!("SYN_{i:07}")
}

/// Writes `metadata.csv` and one PNG per sample into `dir`, in the column
/// layout accepted by [`load_directory`].
pub fn write_directory(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = dir.join(METADATA_FILE);
    let mut w = csv::Writer::from_path(&meta).map_err(|e| Error::Ingestion(format!("{}: {e}", meta.display())))?;
    let csv_err = |e: csv::Error| Error::Ingestion(format!("{}: {e}", meta.display()));
    w.write_record(["lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization"])
        .map_err(csv_err)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let id = image_id(i);
        let age = match s.tabular.age_bucket_id {
            0 => String::new(),
            b => format!("{}.0", (b - 1) * 5),
        };
        let sex = match s.tabular.sex_id {
            0 => "unknown",
            k => SEXES[k - 1],
        };
        let loc = match s.tabular.localization_id {
            k @ 1..=14 => LOCALIZATIONS[k - 1],
            _ => "unknown",
        };
        w.write_record([&format!("SYNL_{i:07}"), &id, CLASS_CODES[s.label], "synthetic", &age, sex, loc])
            .map_err(csv_err)?;
        let (c, h, wd) = s.image.dims3()?;
        if c != 3 {
            return Err(Error::Dimension(format!("PNG export needs 3 channels, sample {i} has {c}")));
        }
        let mut buf = image::RgbImage::new(wd as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for ch in 0..3 {
                let v = s.image.data()[(ch * h + y as usize) * wd + x as usize];
                px.0[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let path = dir.join(format!("{id}.png"));
        buf.save(&path)
            .map_err(|e| Error::Ingestion(format!("cannot write {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(format!("{id}.png")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
            )
        })
}

fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion(format!("unreadable image {}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut data = vec![0f32; 3 * size * size];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * size + y as usize) * size + x as usize] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Reads a metadata table (`image_id`, `dx`, `age`, `sex`, `localization`
/// columns, any order, extra columns ignored) and the matching images, resized
/// bilinearly to `image_size`.
pub fn load_directory(metadata: &Path, image_dir: &Path, image_size: usize) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(metadata)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", metadata.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", metadata.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingestion(format!("{}: missing column {name}", metadata.display())))
    };
    let (c_id, c_dx, c_age, c_sex, c_loc) = (col("image_id")?, col("dx")?, col("age")?, col("sex")?, col("localization")?);
    let sex_ids: BTreeMap<&str, usize> = SEXES.iter().enumerate().map(|(i, s)| (*s, i + 1)).collect();
    let loc_ids: BTreeMap<&str, usize> = LOCALIZATIONS.iter().enumerate().map(|(i, s)| (*s, i + 1)).collect();

    let mut samples = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Ingestion(format!("{} row {line}: {e}", metadata.display())))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let dx = field(c_dx);
        let label = class_id(dx).ok_or_else(|| {
            Error::Ingestion(format!(
                "{} row {line}: unknown diagnosis {dx:?} (expected one of {})",
                metadata.display(),
                CLASS_CODES.join(", ")
            ))
        })?;
        let age = field(c_age);
        let age_bucket_id = if age.is_empty() {
            0
        } else {
            let years: f64 = age
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::Ingestion(format!("{} row {line}: bad age {age:?}", metadata.display())))?;
            age_bucket(years)
        };
        let tabular = TabularInput {
            sex_id: sex_ids.get(field(c_sex)).copied().unwrap_or(0),
            age_bucket_id,
            localization_id: loc_ids.get(field(c_loc)).copied().unwrap_or(0),
        };
        let path = find_image(image_dir, field(c_id))?;
        samples.push(Sample {
            image: load_image(&path, image_size)?,
            tabular,
            label,
        });
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n,
            image_size: 16,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn batches_examples() {
        let b = batches(10, 3, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(b, batches(10, 3, 1, 0).unwrap());
        assert_ne!(b, batches(10, 3, 1, 1).unwrap());
        let one = batches(5, 8, 2, 0).unwrap();
        assert_eq!(one.len(), 1);
        let mut all = one[0].clone();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(batches(5, 0, 0, 0).is_err());
    }

    #[test]
    fn generate_is_balanced_and_bounded() {
        let ds = generate(&small(7, 3)).unwrap();
        let mut labels = ds.labels();
        labels.sort();
        assert_eq!(labels, (0..7).collect::<Vec<_>>());
        let ds = generate(&small(100, 3)).unwrap();
        let mut counts = [0usize; 7];
        for s in &ds.samples {
            counts[s.label] += 1;
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.tabular.sex_id < SEX_VOCAB && s.tabular.age_bucket_id < AGE_VOCAB && s.tabular.localization_id < LOC_VOCAB);
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(ds, generate(&small(100, 3)).unwrap());
        assert_ne!(ds, generate(&small(100, 4)).unwrap());
    }

    #[test]
    fn bad_synth_config_is_rejected() {
        assert!(generate(&small(6, 0)).is_err());
        let mut c = small(10, 0);
        c.correlation = 1.5;
        assert!(matches!(generate(&c), Err(Error::Config(_))));
    }

    #[test]
    fn zero_correlation_tabular_is_independent_of_label() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = SynthConfig {
            n: 10_000,
            image_size: 4,
            correlation: 0.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let fields: [(fn(&TabularInput) -> usize, usize); 3] = [
            (|t| t.sex_id, SEX_VOCAB),
            (|t| t.age_bucket_id, AGE_VOCAB),
            (|t| t.localization_id, LOCALIZATIONS.len() + 1),
        ];
        for (get, vocab) in fields {
            let mut table = vec![vec![0f64; vocab]; NUM_CLASSES];
            for s in &ds.samples {
                table[s.label][get(&s.tabular)] += 1.0;
            }
            let n = ds.len() as f64;
            let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
            let cols: Vec<f64> = (0..vocab).map(|j| table.iter().map(|r| r[j]).sum()).collect();
            let mut chi2 = 0.0;
            for i in 0..NUM_CLASSES {
                for j in 0..vocab {
                    let e = rows[i] * cols[j] / n;
                    chi2 += (table[i][j] - e).powi(2) / e;
                }
            }
            let dof = ((NUM_CLASSES - 1) * (vocab - 1)) as f64;
            let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
            assert!(p > 0.01, "independence rejected: chi2 {chi2}, p {p}");
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(9, 5)).unwrap();
        write_directory(&ds, dir.path()).unwrap();
        let back = load_directory(&dir.path().join(METADATA_FILE), dir.path(), 16).unwrap();
        assert_eq!(back.len(), 9);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.tabular, b.tabular);
            let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
        let resized = load_directory(&dir.path().join(METADATA_FILE), dir.path(), 8).unwrap();
        assert_eq!(resized.samples[0].image.shape(), &[3, 8, 8]);
    }

    fn fixture(rows: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(METADATA_FILE), rows).unwrap();
        for id in ["a", "b", "c"] {
            image::RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 51]))
                .save(dir.path().join(format!("{id}.png")))
                .unwrap();
        }
        dir
    }

    #[test]
    fn hand_built_fixture() {
        let dir = fixture(
            "image_id,dx,age,sex,localization\n\
             a,mel,45.0,male,back\n\
             b,nv,,female,unknown\n\
             c,akiec,102,,scalp\n",
        );
        let ds = load_directory(&dir.path().join(METADATA_FILE), dir.path(), 4).unwrap();
        let got: Vec<(usize, TabularInput)> = ds.samples.iter().map(|s| (s.label, s.tabular)).collect();
        let t = |s, a, l| TabularInput {
            sex_id: s,
            age_bucket_id: a,
            localization_id: l,
        };
        assert_eq!(got, vec![(5, t(1, 10, 3)), (4, t(2, 0, 0)), (0, t(0, 21, 12))]);
        let px = ds.samples[0].image.data();
        assert_eq!((px[0], px[16], px[32]), (1.0, 0.0, 0.2));
    }

    #[test]
    fn ingestion_errors_name_the_problem() {
        let dir = fixture("image_id,dx,age,sex,localization\na,mel,40,male,back\nb,xyz,40,male,back\n");
        let err = load_directory(&dir.path().join(METADATA_FILE), dir.path(), 4).unwrap_err();
        assert!(matches!(&err, Error::Ingestion(m) if m.contains("row 3") && m.contains("xyz")), "{err}");
        let dir = fixture("image_id,dx,age,sex,localization\nmissing,mel,40,male,back\n");
        let err = load_directory(&dir.path().join(METADATA_FILE), dir.path(), 4).unwrap_err();
        assert!(matches!(&err, Error::Io { path, .. } if path.ends_with("missing.png")), "{err}");
        let dir = fixture("image_id,dx,age,sex,localization\na,mel,40,male,back\n");
        std::fs::write(dir.path().join("a.png"), b"not a png").unwrap();
        let err = load_directory(&dir.path().join(METADATA_FILE), dir.path(), 4).unwrap_err();
        assert!(err.to_string().contains("a.png"), "{err}");
    }

    #[test]
    fn to_batch_stacks_in_order() {
        let ds = generate(&small(7, 1)).unwrap();
        let (img, tab, labels) = ds.to_batch(&[3, 0]).unwrap();
        assert_eq!(img.shape(), &[2, 3, 16, 16]);
        assert_eq!(&img.data()[..768], ds.samples[3].image.data());
        assert_eq!(tab[1], ds.samples[0].tabular);
        assert_eq!(labels, vec![ds.samples[3].label, ds.samples[0].label]);
    }
}
