//! Synthetic lesion images, flip augmentation, class balancing and
//! stratified folds.
//!
//! Every image is a noisy reddish disk-lit background with thin dark
//! vessel strokes shared by all classes. Classes differ only in the count,
//! size and placement of bright lesions, so telling them apart takes both
//! fine and coarse spatial context.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::nn::mix_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Within a fifth of the side from the image center.
    Center,
    /// In the ring between 0.28 and 0.46 of the side from the center.
    Periphery,
    /// Anywhere the lesion fits.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Flat disk with a one-pixel soft rim.
    SoftDisk,
    /// Gaussian bump with sigma = radius / 2, cut at the radius.
    Gaussian,
}

/// How lesions are drawn for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionClass {
    /// Inclusive lesion count range.
    pub count: (usize, usize),
    /// Radius range in pixels.
    pub radius: (f32, f32),
    pub region: Region,
    pub profile: Profile,
    /// Peak brightness added on top of the background.
    pub amplitude: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub side: usize,
    pub classes: Vec<LesionClass>,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Dark vessel strokes drawn on every image, inclusive range.
    pub vessels: (usize, usize),
    pub seed: u64,
}

impl SyntheticSpec {
    /// Four classes: no lesions, many small scattered lesions, one large
    /// lesion anywhere, and a few medium lesions near the rim. Radii are
    /// given for a 128 pixel side and scale with `side`.
    pub fn four_class(side: usize, seed: u64) -> Self {
        let s = side as f32 / 128.0;
        let lesion = |count, r0: f32, r1: f32, region| LesionClass {
            count,
            radius: (r0 * s, r1 * s),
            region,
            profile: Profile::SoftDisk,
            amplitude: (0.25, 0.45),
        };
        SyntheticSpec {
            side,
            classes: vec![
                lesion((0, 0), 1.0, 1.0, Region::Global),
                lesion((8, 14), 2.0, 3.5, Region::Global),
                lesion((1, 1), 10.0, 14.0, Region::Global),
                lesion((3, 5), 5.0, 7.0, Region::Periphery),
            ],
            noise: 0.05,
            vessels: (2, 4),
            seed,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(Error::Config(format!("data side {} is below 16", self.side)));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config("synthetic data needs at least two classes".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.vessels.0 > self.vessels.1 {
            return Err(Error::Config("vessel count range is reversed".into()));
        }
        let half = self.side as f32 / 2.0;
        for (c, d) in self.classes.iter().enumerate() {
            let (r0, r1) = d.radius;
            if !(r0 > 0.0 && r0 <= r1 && r1 < half) {
                return Err(Error::Config(format!(
                    "class {c}: radius range ({r0}, {r1}) must be positive, ordered and below {half}"
                )));
            }
            if d.count.0 > d.count.1 {
                return Err(Error::Config(format!("class {c}: lesion count range is reversed")));
            }
            let (a0, a1) = d.amplitude;
            if !(0.0..=1.0).contains(&a0) || !(a0..=1.0).contains(&a1) {
                return Err(Error::Config(format!(
                    "class {c}: amplitude range ({a0}, {a1}) must be ordered within [0, 1]"
                )));
            }
            if self.classes[..c].contains(d) {
                return Err(Error::Config(format!("class {c} duplicates an earlier class")));
            }
        }
        Ok(())
    }
}

/// Lesion geometry in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub row: f32,
    pub col: f32,
    pub radius: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlipMode {
    None,
    HFlip,
    VFlip,
}

impl FlipMode {
    pub fn name(self) -> &'static str {
        match self {
            FlipMode::None => "none",
            FlipMode::HFlip => "hflip",
            FlipMode::VFlip => "vflip",
        }
    }
}

impl fmt::Display for FlipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FlipMode::None),
            "hflip" => Ok(FlipMode::HFlip),
            "vflip" => Ok(FlipMode::VFlip),
            other => Err(Error::Usage(format!(
                "unknown augmentation mode {other:?} (expected hflip, vflip or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Generated,
    Augmented { from: usize, mode: FlipMode },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Generated => f.write_str("generated"),
            Provenance::Augmented { from, mode } => write!(f, "{mode}:{from}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "generated" {
            return Ok(Provenance::Generated);
        }
        let bad = || Error::Usage(format!("malformed provenance {s:?}"));
        let (mode, from) = s.split_once(':').ok_or_else(bad)?;
        Ok(Provenance::Augmented {
            from: from.parse().map_err(|_| bad())?,
            mode: mode.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[side, side, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub provenance: Provenance,
    pub lesions: Vec<Lesion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Sample positions grouped by label, in dataset order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.label].push(i);
        }
        groups
    }

    pub fn next_id(&self) -> usize {
        self.samples.iter().map(|s| s.id + 1).max().unwrap_or(0)
    }

    /// Samples at the given positions, cloned, in the given order.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes,
            samples: positions.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

const BACKGROUND: [f32; 3] = [0.55, 0.26, 0.14];
const LESION_TINT: [f32; 3] = [1.0, 0.9, 0.45];
const VESSEL_TINT: [f32; 3] = [0.18, 0.1, 0.06];

fn place<R: Rng>(rng: &mut R, side: f32, radius: f32, region: Region) -> (f32, f32) {
    let c = side / 2.0;
    match region {
        Region::Global => {
            let lo = radius;
            let hi = (side - radius).max(lo + 1e-3);
            (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
        }
        Region::Center => {
            let d = rng.gen_range(0.0..side * 0.2);
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            (c + d * a.sin(), c + d * a.cos())
        }
        Region::Periphery => {
            let lo = side * 0.28;
            let hi = (side * 0.46 - radius).max(lo + 1e-3);
            let d = rng.gen_range(lo..hi);
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            (c + d * a.sin(), c + d * a.cos())
        }
    }
}

fn render(spec: &SyntheticSpec, label: usize, seed: u64) -> Result<(Tensor, Vec<Lesion>)> {
    let side = spec.side;
    let sf = side as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut img = vec![0.0f32; side * side * 3];
    let gain = rng.gen_range(0.9f32..1.1);
    let c = sf / 2.0;
    for r in 0..side {
        for col in 0..side {
            let d = (((r as f32 + 0.5 - c).powi(2) + (col as f32 + 0.5 - c).powi(2)).sqrt()) / c;
            let light = gain * (1.0 - 0.35 * d * d).max(0.3);
            for ch in 0..3 {
                img[(r * side + col) * 3 + ch] = BACKGROUND[ch] * light;
            }
        }
    }
    let vessels = rng.gen_range(spec.vessels.0..=spec.vessels.1);
    for _ in 0..vessels {
        let (r0, c0) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
        let a = rng.gen_range(0.0..std::f32::consts::TAU);
        let len = rng.gen_range(0.3..0.8) * sf;
        let steps = (len * 2.0) as usize;
        for t in 0..steps {
            let t = t as f32 * 0.5;
            let (pr, pc) = (r0 + t * a.sin(), c0 + t * a.cos());
            if pr < 0.0 || pc < 0.0 || pr >= sf || pc >= sf {
                break;
            }
            let at = (pr as usize * side + pc as usize) * 3;
            for ch in 0..3 {
                img[at + ch] = 0.5 * img[at + ch] + 0.5 * VESSEL_TINT[ch];
            }
        }
    }
    let desc = &spec.classes[label];
    let count = rng.gen_range(desc.count.0..=desc.count.1);
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = if desc.radius.0 < desc.radius.1 {
            rng.gen_range(desc.radius.0..desc.radius.1)
        } else {
            desc.radius.0
        };
        let amp = if desc.amplitude.0 < desc.amplitude.1 {
            rng.gen_range(desc.amplitude.0..desc.amplitude.1)
        } else {
            desc.amplitude.0
        };
        let (row, col) = place(&mut rng, sf, radius, desc.region);
        let lo_r = (row - radius - 1.0).max(0.0) as usize;
        let hi_r = ((row + radius + 1.0) as usize).min(side - 1);
        let lo_c = (col - radius - 1.0).max(0.0) as usize;
        let hi_c = ((col + radius + 1.0) as usize).min(side - 1);
        for r in lo_r..=hi_r {
            for cc in lo_c..=hi_c {
                let d = ((r as f32 + 0.5 - row).powi(2) + (cc as f32 + 0.5 - col).powi(2)).sqrt();
                let alpha = match desc.profile {
                    Profile::SoftDisk => (radius - d + 0.5).clamp(0.0, 1.0),
                    Profile::Gaussian if d <= radius => (-2.0 * (d / radius).powi(2)).exp(),
                    Profile::Gaussian => 0.0,
                };
                let at = (r * side + cc) * 3;
                for ch in 0..3 {
                    img[at + ch] += amp * alpha * LESION_TINT[ch];
                }
            }
        }
        lesions.push(Lesion { row, col, radius });
    }
    for v in img.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok((Tensor::new(vec![side, side, 3], img)?, lesions))
}

/// `counts[c]` images of class `c`. Each image draws from its own seed
/// derived from the generator seed and the sample id, so the output does not
/// depend on the worker count.
pub fn generate_synthetic(spec: &SyntheticSpec, counts: &[usize]) -> Result<Dataset> {
    spec.validate()?;
    if counts.len() != spec.class_count() {
        return Err(Error::Config(format!(
            "{} class counts given for {} classes",
            counts.len(),
            spec.class_count()
        )));
    }
    if counts.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::Config("at least two classes need a nonzero count".into()));
    }
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let samples = labels
        .par_iter()
        .enumerate()
        .map(|(id, &label)| {
            let (image, lesions) = render(spec, label, mix_seed(spec.seed, id as u64))?;
            Ok(Sample {
                id,
                image,
                label,
                provenance: Provenance::Generated,
                lesions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: spec.class_count(),
        samples,
    })
}

/// Label-preserving flip. The copy gets id `id` and records its source.
pub fn augment(sample: &Sample, mode: FlipMode, id: usize) -> Result<Sample> {
    let (h, w) = match sample.image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Dimension(format!("image must be [H, W, 3], got {s:?}"))),
    };
    let src = sample.image.data();
    let mut out = vec![0.0f32; src.len()];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = match mode {
                FlipMode::None => (r, c),
                FlipMode::HFlip => (r, w - 1 - c),
                FlipMode::VFlip => (h - 1 - r, c),
            };
            let (to, from) = ((r * w + c) * 3, (sr * w + sc) * 3);
            out[to..to + 3].copy_from_slice(&src[from..from + 3]);
        }
    }
    let lesions = sample
        .lesions
        .iter()
        .map(|l| match mode {
            FlipMode::None => *l,
            FlipMode::HFlip => Lesion { col: w as f32 - l.col, ..*l },
            FlipMode::VFlip => Lesion { row: h as f32 - l.row, ..*l },
        })
        .collect();
    Ok(Sample {
        id,
        image: Tensor::new(vec![h, w, 3], out)?,
        label: sample.label,
        provenance: Provenance::Augmented { from: sample.id, mode },
        lesions,
    })
}

/// Brings every class to exactly `target` samples. Small classes keep all
/// originals and are topped up with flipped copies, cycling hflip then
/// vflip over the originals. Large classes are subsampled by a seeded
/// shuffle while keeping dataset order.
pub fn balance_resample(data: &Dataset, target: usize, seed: u64) -> Result<Dataset> {
    let groups = data.by_class();
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("class {c} is empty and cannot be balanced")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = data.next_id();
    let mut samples = Vec::with_capacity(target * data.classes);
    for group in &groups {
        if group.len() >= target {
            let mut keep = group.clone();
            keep.shuffle(&mut rng);
            keep.truncate(target);
            keep.sort_unstable();
            samples.extend(keep.iter().map(|&i| data.samples[i].clone()));
        } else {
            samples.extend(group.iter().map(|&i| data.samples[i].clone()));
            for j in 0..target - group.len() {
                let src = &data.samples[group[j % group.len()]];
                let mode = if (j / group.len()) % 2 == 0 {
                    FlipMode::HFlip
                } else {
                    FlipMode::VFlip
                };
                samples.push(augment(src, mode, next_id)?);
                next_id += 1;
            }
        }
    }
    Ok(Dataset {
        classes: data.classes,
        samples,
    })
}

/// Fold assignment per sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub k: usize,
    pub folds: BTreeMap<usize, usize>,
}

impl SplitPlan {
    pub fn fold_of(&self, id: usize) -> Option<usize> {
        self.folds.get(&id).copied()
    }

    /// Positions of `data` in fold `fold` and outside it.
    pub fn partition(&self, data: &Dataset, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (i, s) in data.samples.iter().enumerate() {
            if self.fold_of(s.id) == Some(fold) {
                inside.push(i);
            } else {
                outside.push(i);
            }
        }
        (inside, outside)
    }
}

/// Stratified k folds. Each class is shuffled by seed and dealt round robin,
/// continuing from the fold where the previous class stopped so that fold
/// sizes also stay within one of each other.
pub fn kfold_split(data: &Dataset, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut cursor = 0;
    for (c, group) in data.by_class().into_iter().enumerate() {
        if group.len() < k {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than k={k}",
                group.len()
            )));
        }
        let mut ids: Vec<usize> = group.iter().map(|&i| data.samples[i].id).collect();
        ids.shuffle(&mut rng);
        for id in ids {
            folds.insert(id, cursor % k);
            cursor += 1;
        }
    }
    Ok(SplitPlan { k, folds })
}

const MANIFEST: &str = "manifest.tsv";
const LESIONS: &str = "lesions.tsv";
const MANIFEST_HEADER: &str = "id\tlabel\tprovenance\tfold";

fn image_name(id: usize) -> String {
    format!("{id:06}.pmt")
}

/// Writes one PMT1 file per image plus `manifest.tsv` (id, label,
/// provenance, fold) and `lesions.tsv` (id, row, col, radius).
pub fn save_dataset(data: &Dataset, plan: Option<&SplitPlan>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut lesions = String::from("id\trow\tcol\tradius\n");
    for s in &data.samples {
        s.image.save(&dir.join(image_name(s.id)))?;
        let fold = plan
            .and_then(|p| p.fold_of(s.id))
            .map_or_else(|| "-".to_string(), |f| f.to_string());
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, s.label, s.provenance, fold));
        for l in &s.lesions {
            lesions.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, l.row, l.col, l.radius));
        }
    }
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    write(MANIFEST, &manifest)?;
    write(LESIONS, &lesions)?;
    Ok(())
}

fn malformed(path: &Path, what: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        kind: FormatError::Malformed(what.to_string()),
    }
}

/// Reads a directory written by [`save_dataset`]. `classes` is one more
/// than the largest label.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Option<SplitPlan>)> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))
            .map(|s| (path, s))
    };
    let (mpath, manifest) = read(MANIFEST)?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(malformed(&mpath, "missing header"));
    }
    let mut samples = Vec::new();
    let mut folds = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, label, prov, fold] = cols[..] else {
            return Err(malformed(&mpath, line));
        };
        let id: usize = id.parse().map_err(|_| malformed(&mpath, line))?;
        let label: usize = label.parse().map_err(|_| malformed(&mpath, line))?;
        if fold != "-" {
            folds.insert(id, fold.parse().map_err(|_| malformed(&mpath, line))?);
        }
        samples.push(Sample {
            id,
            image: Tensor::load(&dir.join(image_name(id)))?,
            label,
            provenance: prov.parse()?,
            lesions: Vec::new(),
        });
    }
    if samples.is_empty() {
        return Err(malformed(&mpath, "no samples"));
    }
    let (lpath, lesion_text) = read(LESIONS)?;
    let position: BTreeMap<usize, usize> =
        samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    for line in lesion_text.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, row, col, radius] = cols[..] else {
            return Err(malformed(&lpath, line));
        };
        let num = |s: &str| s.parse::<f32>().map_err(|_| malformed(&lpath, line));
        let id: usize = id.parse().map_err(|_| malformed(&lpath, line))?;
        let at = *position.get(&id).ok_or_else(|| malformed(&lpath, line))?;
        samples[at].lesions.push(Lesion {
            row: num(row)?,
            col: num(col)?,
            radius: num(radius)?,
        });
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let plan = if folds.is_empty() {
        None
    } else {
        let k = folds.values().max().copied().unwrap_or(0) + 1;
        Some(SplitPlan { k, folds })
    };
    Ok((Dataset { classes, samples }, plan))
}
