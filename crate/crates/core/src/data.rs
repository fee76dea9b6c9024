//! Deterministic synthetic image-caption pairs.
//!
//! Every class owns a smooth image template (a sum of signed Gaussian blobs,
//! standardized to zero mean and unit variance) and a caption template of
//! descriptor tokens. A sample is its class template plus Gaussian pixel
//! noise of standard deviation `sigma`, with `captions` caption variants:
//! variant 0 carries the class keyword, the others are paraphrases of the
//! class template in which each slot is resampled from the shared descriptor
//! pool with probability `paraphrase_rate`.
//!
//! Token ids `0..n_classes` are keywords; the rest of the vocabulary is the
//! descriptor pool, so no caption ever contains another class's keyword.
//!
//! # Shard layout
//!
//! All integers little-endian:
//!
//! ```text
//! "CMDS" | version u32 | count u64 | count × (class u32, image f32 × pixels, tokens u32 × captions·caption_len)
//! ```
//!
//! The manifest is JSON `{version, spec, shards[], sha256}`, where `sha256`
//! covers the concatenated shard bytes in order. A split manifest also lists
//! the sample `indices` it keeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const SHARD_MAGIC: &[u8; 4] = b"CMDS";
pub const SHARD_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Largest `sigma` for which the class-separation property is tested.
pub const SEPARATION_SIGMA_BOUND: f64 = 2.0;

const BLOBS_PER_CLASS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub caption_len: usize,
    pub vocab: usize,
    pub captions: usize,
    pub sigma: f64,
    /// Probability that a paraphrase slot is replaced by a random descriptor.
    pub paraphrase_rate: f64,
    pub seed: u64,
    /// Samples per shard file.
    pub shard_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 16,
            per_class: 80,
            image_size: 16,
            channels: 1,
            caption_len: 8,
            vocab: 64,
            captions: 4,
            sigma: 1.0,
            paraphrase_rate: 0.5,
            seed: 20_240_601,
            shard_size: 512,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("dataset: {m}")));
        if self.n_classes < 2 {
            return fail(format!("n_classes must be ≥ 2, got {}", self.n_classes));
        }
        if self.captions == 0 || self.per_class == 0 || self.caption_len == 0 {
            return fail("captions, per_class and caption_len must be ≥ 1".into());
        }
        if self.vocab <= self.n_classes + self.caption_len {
            return fail(format!(
                "vocab {} must exceed n_classes + caption_len = {}",
                self.vocab,
                self.n_classes + self.caption_len
            ));
        }
        if self.image_size == 0 || self.channels == 0 || self.shard_size == 0 {
            return fail("image_size, channels and shard_size must be ≥ 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be finite and ≥ 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.paraphrase_rate) {
            return fail(format!("paraphrase_rate must lie in [0, 1], got {}", self.paraphrase_rate));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.captions * self.caption_len
    }

    pub fn len(&self) -> usize {
        self.n_classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record_bytes(&self) -> usize {
        4 + 4 * self.pixels() + 4 * self.tokens_per_sample()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// File name relative to the manifest directory.
    pub path: String,
    pub count: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: SyntheticSpec,
    pub shards: Vec<ShardEntry>,
    pub sha256: String,
    /// Sample indices kept by a split, ascending; absent means all samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<u64>>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Integrity(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                m.version
            )));
        }
        m.spec.validate()?;
        m.dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Number of samples this manifest selects.
    pub fn len(&self) -> usize {
        match &self.indices {
            Some(ix) => ix.len(),
            None => self.shards.iter().map(|s| s.count as usize).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standardized class template images, `[n_classes][pixels]`.
fn image_templates(spec: &SyntheticSpec, rng: &Rng) -> Vec<Vec<f32>> {
    let size = spec.image_size as f64;
    (0..spec.n_classes)
        .map(|c| {
            let mut r = rng.fork(&format!("image_template{c}"));
            let mut img = vec![0.0f64; spec.pixels()];
            for ch in 0..spec.channels {
                for _ in 0..BLOBS_PER_CLASS {
                    let (cy, cx) = (r.uniform() * size, r.uniform() * size);
                    let width = size * (0.12 + 0.2 * r.uniform());
                    let amp = if r.uniform() < 0.5 { -1.0 } else { 1.0 } * (0.5 + r.uniform());
                    for y in 0..spec.image_size {
                        for x in 0..spec.image_size {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            img[(ch * spec.image_size + y) * spec.image_size + x] +=
                                amp * (-d2 / (2.0 * width * width)).exp();
                        }
                    }
                }
            }
            let n = img.len() as f64;
            let mean = img.iter().sum::<f64>() / n;
            let std = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
            img.iter().map(|v| ((v - mean) / std) as f32).collect()
        })
        .collect()
}

/// Descriptor-token templates, `[n_classes][caption_len]`.
fn caption_templates(spec: &SyntheticSpec, rng: &Rng) -> Vec<Vec<u32>> {
    let pool = spec.vocab - spec.n_classes;
    (0..spec.n_classes)
        .map(|c| {
            let mut r = rng.fork(&format!("caption_template{c}"));
            (0..spec.caption_len)
                .map(|_| (spec.n_classes + r.below(pool)) as u32)
                .collect()
        })
        .collect()
}

/// One sample's image and captions from its own random stream.
fn sample(
    spec: &SyntheticSpec,
    class: usize,
    image_t: &[f32],
    caption_t: &[u32],
    rng: &mut Rng,
) -> (Vec<f32>, Vec<u32>) {
    let image = image_t
        .iter()
        .map(|&t| (f64::from(t) + spec.sigma * rng.normal()) as f32)
        .collect();
    let pool = spec.vocab - spec.n_classes;
    let mut tokens = Vec::with_capacity(spec.tokens_per_sample());
    for variant in 0..spec.captions {
        let start = tokens.len();
        for &t in caption_t {
            let keep = rng.uniform() >= spec.paraphrase_rate;
            let resampled = (spec.n_classes + rng.below(pool)) as u32;
            tokens.push(if keep { t } else { resampled });
        }
        if variant == 0 {
            let slot = rng.below(spec.caption_len);
            tokens[start + slot] = class as u32;
        }
    }
    (image, tokens)
}

/// Writes the shards and manifest for `spec` into `out`.
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let root = Rng::new(spec.seed);
    let images = image_templates(spec, &root);
    let captions = caption_templates(spec, &root);
    let total = spec.len();

    let mut shards = Vec::new();
    let mut all = Sha256::new();
    for (k, start) in (0..total).step_by(spec.shard_size).enumerate() {
        let end = (start + spec.shard_size).min(total);
        let mut bytes = Vec::with_capacity(16 + (end - start) * spec.record_bytes());
        bytes.extend_from_slice(SHARD_MAGIC);
        bytes.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        bytes.extend_from_slice(&((end - start) as u64).to_le_bytes());
        for i in start..end {
            // Classes interleave so any prefix is balanced.
            let class = i % spec.n_classes;
            let mut r = root.fork(&format!("sample{i}"));
            let (img, tok) = sample(spec, class, &images[class], &captions[class], &mut r);
            bytes.extend_from_slice(&(class as u32).to_le_bytes());
            img.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            tok.iter().for_each(|t| bytes.extend_from_slice(&t.to_le_bytes()));
        }
        let name = format!("shard-{k:04}.bin");
        let path = out.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        all.update(&bytes);
        shards.push(ShardEntry {
            path: name,
            count: (end - start) as u64,
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        shards,
        sha256: format!("{:x}", all.finalize()),
        indices: None,
        dir: out.to_path_buf(),
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Samples held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub classes: Vec<u32>,
    /// `len · pixels` values.
    pub images: Vec<f32>,
    /// `len · captions · caption_len` token ids.
    pub tokens: Vec<u32>,
}

fn read_u32(b: &[u8], at: &mut usize) -> u32 {
    let v = u32::from_le_bytes(b[*at..*at + 4].try_into().expect("4 bytes"));
    *at += 4;
    v
}

impl Dataset {
    /// Reads and verifies every shard, then keeps the selected samples.
    pub fn open(manifest: &DatasetManifest) -> Result<Self> {
        let spec = manifest.spec.clone();
        spec.validate()?;
        let mut all = Sha256::new();
        let mut ds = Dataset {
            spec: spec.clone(),
            classes: Vec::new(),
            images: Vec::new(),
            tokens: Vec::new(),
        };
        for shard in &manifest.shards {
            let path = manifest.dir.join(&shard.path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest = format!("{:x}", Sha256::digest(&bytes));
            if digest != shard.sha256 {
                return Err(Error::Integrity(format!(
                    "{}: sha256 {digest} does not match manifest {}",
                    path.display(),
                    shard.sha256
                )));
            }
            all.update(&bytes);
            ds.parse_shard(&bytes, shard.count, &path)?;
        }
        let digest = format!("{:x}", all.finalize());
        if digest != manifest.sha256 {
            return Err(Error::Integrity(format!(
                "dataset sha256 {digest} does not match manifest {}",
                manifest.sha256
            )));
        }
        match &manifest.indices {
            Some(ix) => ds.select(&ix.iter().map(|&i| i as usize).collect::<Vec<_>>()),
            None => Ok(ds),
        }
    }

    fn parse_shard(&mut self, b: &[u8], count: u64, path: &Path) -> Result<()> {
        let bad = |m: String| Error::Integrity(format!("{}: {m}", path.display()));
        if b.len() < 16 || &b[..4] != SHARD_MAGIC {
            return Err(bad("missing CMDS header".into()));
        }
        let mut at = 4;
        let version = read_u32(b, &mut at);
        if version != SHARD_VERSION {
            return Err(bad(format!("shard version {version} (expected {SHARD_VERSION})")));
        }
        let n = u64::from_le_bytes(b[8..16].try_into().expect("8 bytes"));
        at = 16;
        if n != count || b.len() != 16 + n as usize * self.spec.record_bytes() {
            return Err(bad(format!("{} bytes do not hold {count} samples", b.len())));
        }
        for _ in 0..n {
            let class = read_u32(b, &mut at);
            if class as usize >= self.spec.n_classes {
                return Err(bad(format!("class id {class} out of range")));
            }
            self.classes.push(class);
            for _ in 0..self.spec.pixels() {
                self.images.push(f32::from_bits(read_u32(b, &mut at)));
            }
            for _ in 0..self.spec.tokens_per_sample() {
                let t = read_u32(b, &mut at);
                if t as usize >= self.spec.vocab {
                    return Err(bad(format!("token {t} out of range")));
                }
                self.tokens.push(t);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.spec.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// Caption `j` of sample `i`.
    pub fn caption(&self, i: usize, j: usize) -> &[u32] {
        let (l, t) = (self.spec.caption_len, self.spec.tokens_per_sample());
        &self.tokens[i * t + j * l..i * t + (j + 1) * l]
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("sample {bad} out of range {}", self.len())));
        }
        let (p, t) = (self.spec.pixels(), self.spec.tokens_per_sample());
        Ok(Self {
            spec: self.spec.clone(),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            images: indices.iter().flat_map(|&i| self.images[i * p..(i + 1) * p].iter().copied()).collect(),
            tokens: indices.iter().flat_map(|&i| self.tokens[i * t..(i + 1) * t].iter().copied()).collect(),
        })
    }

    /// Images as `[n, channels, size, size]`.
    pub fn image_tensor(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let s = &self.spec;
        let data = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        Tensor::new(vec![indices.len(), s.channels, s.image_size, s.image_size], data)
    }
}

/// One training or evaluation batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub classes: Vec<u32>,
    pub images: Tensor<f32>,
    /// `n · captions · caption_len` ids, captions of one image adjacent.
    pub tokens: Vec<u32>,
    pub captions: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Batch order and caption subsets for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoaderSpec {
    pub batch_size: usize,
    pub captions: usize,
    pub shuffle: bool,
    pub seed: u64,
}

/// Every sample exactly once, in batches of `batch_size` (the last may be short).
///
/// Sample order and, when fewer than all captions are requested, the caption
/// subsets depend only on `(seed, epoch)`.
pub fn load_batches(ds: &Dataset, spec: &LoaderSpec, epoch: usize) -> Result<Vec<Batch>> {
    if spec.batch_size == 0 {
        return Err(Error::Contract("batch_size must be ≥ 1".into()));
    }
    if spec.captions == 0 || spec.captions > ds.spec.captions {
        return Err(Error::Contract(format!(
            "captions per image must lie in 1..={}, got {}",
            ds.spec.captions, spec.captions
        )));
    }
    let mut rng = Rng::new(spec.seed).fork(&format!("epoch{epoch}"));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if spec.shuffle {
        rng.shuffle(&mut order);
    }
    let mut batches = Vec::with_capacity(order.len().div_ceil(spec.batch_size));
    for chunk in order.chunks(spec.batch_size) {
        let mut tokens = Vec::with_capacity(chunk.len() * spec.captions * ds.spec.caption_len);
        for &i in chunk {
            let mut which: Vec<usize> = (0..ds.spec.captions).collect();
            if spec.captions < ds.spec.captions {
                rng.shuffle(&mut which);
                which.truncate(spec.captions);
            }
            for j in which {
                tokens.extend_from_slice(ds.caption(i, j));
            }
        }
        batches.push(Batch {
            indices: chunk.to_vec(),
            classes: chunk.iter().map(|&i| ds.classes[i]).collect(),
            images: ds.image_tensor(chunk)?,
            tokens,
            captions: spec.captions,
        });
    }
    Ok(batches)
}

/// Disjoint class-stratified subsets with the given fractions.
///
/// Within each class the samples are shuffled by `seed` and cut at rounded
/// cumulative fractions, so every split gets its share of every class.
pub fn split(manifest: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<Vec<DatasetManifest>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| f.is_nan() || *f < 0.0) {
        return Err(Error::Contract(format!("fractions {fractions:?} must be ≥ 0 and sum to 1")));
    }
    let pool: Vec<u64> = match &manifest.indices {
        Some(ix) => ix.clone(),
        None => (0..manifest.len() as u64).collect(),
    };
    // Generated samples cycle through classes, so the class is the index modulo n_classes.
    let k = manifest.spec.n_classes as u64;
    let rng = Rng::new(seed);
    let mut parts = vec![Vec::new(); fractions.len()];
    // Cut points round cumulative targets over all classes seen so far, so
    // each class is within one sample of its share and totals stay exact.
    let cut = |seen: usize, p: usize| -> usize {
        let f: f64 = fractions[..=p].iter().sum();
        if p + 1 == fractions.len() { seen } else { (f * seen as f64).round() as usize }
    };
    let mut seen = 0;
    for c in 0..k {
        let mut members: Vec<u64> = pool.iter().copied().filter(|i| i % k == c).collect();
        rng.fork(&format!("class{c}")).shuffle(&mut members);
        let before = seen;
        seen += members.len();
        let mut start = 0;
        for (p, part) in parts.iter_mut().enumerate() {
            let take = cut(seen, p).saturating_sub(cut(before, p)).min(members.len() - start);
            let take = if p + 1 == fractions.len() { members.len() - start } else { take };
            part.extend_from_slice(&members[start..start + take]);
            start += take;
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut ix| {
            ix.sort_unstable();
            DatasetManifest {
                indices: Some(ix),
                ..manifest.clone()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 4,
            per_class: 6,
            shard_size: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn validation_rejects_tiny_vocab() {
        let s = SyntheticSpec {
            vocab: 20,
            ..SyntheticSpec::default()
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        assert!(SyntheticSpec::default().validate().is_ok());
    }

    #[test]
    fn keyword_appears_only_in_first_caption() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(), dir.path()).unwrap();
        let ds = Dataset::open(&m).unwrap();
        for i in 0..ds.len() {
            let c = ds.classes[i];
            assert!(ds.caption(i, 0).contains(&c));
            for j in 0..ds.spec.captions {
                let keywords = ds.caption(i, j).iter().filter(|&&t| (t as usize) < ds.spec.n_classes);
                assert_eq!(keywords.count(), usize::from(j == 0));
            }
        }
    }

    #[test]
    fn shards_respect_size() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(), dir.path()).unwrap();
        let counts: Vec<u64> = m.shards.iter().map(|s| s.count).collect();
        assert_eq!(counts, vec![7, 7, 7, 3]);
    }

    #[test]
    fn caption_subsets_are_distinct_captions() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::open(&generate(&small(), dir.path()).unwrap()).unwrap();
        let spec = LoaderSpec { batch_size: 5, captions: 2, shuffle: true, seed: 3 };
        for b in load_batches(&ds, &spec, 0).unwrap() {
            assert_eq!(b.tokens.len(), b.len() * 2 * ds.spec.caption_len);
            for (k, &i) in b.indices.iter().enumerate() {
                let own: Vec<&[u32]> = (0..ds.spec.captions).map(|j| ds.caption(i, j)).collect();
                for c in b.tokens[k * 16..(k + 1) * 16].chunks(8) {
                    assert!(own.contains(&c));
                }
            }
        }
    }
}
