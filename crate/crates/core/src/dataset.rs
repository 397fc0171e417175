//! Corpus inventory, hash-based splits, augmentation and the feature cache.
//!
//! Corpus layout: `<root>/<word>/<clip>.wav` plus
//! `<root>/_background_noise_/*.wav`. Ten keyword directories get their own
//! labels; every other word directory maps to `unknown`; `silence` clips are
//! cut from the background noise files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng as _, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::audio::{fit_to_length, read_wav, AudioClip, AudioError, CLIP_LEN, SAMPLE_RATE};
use crate::features::{default_extractor, FeatureError, FeatureMatrix};
use crate::models::{label_names, SILENCE, UNKNOWN};
use crate::rng::{self, Rng};

pub const KEYWORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];
pub const NOISE_DIR: &str = "_background_noise_";
pub const MAX_SHIFT_MS: i32 = 100;

const SAMPLES_PER_MS: usize = SAMPLE_RATE as usize / 1000;
// 2^27
const HASH_SCALE: u64 = 1 << 27;
// Evaluation splits draw their unknown subset and silence clips from this
// fixed seed so that they do not depend on the training seed.
const EVAL_SEED: u64 = 0x5EED_E7A1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no {NOISE_DIR} directory (or no noise clips) under {}", .0.display())]
    MissingNoiseDir(PathBuf),
    #[error("no keyword clips found under {}", .0.display())]
    EmptyCorpus(PathBuf),
    #[error("time shift {0} ms outside [-{MAX_SHIFT_MS}, {MAX_SHIFT_MS}]")]
    ShiftOutOfRange(i32),
    #[error("noise clip has {found} samples, need at least {needed}")]
    NoiseTooShort { found: usize, needed: usize },
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("bad augmentation config: {0}")]
    BadConfig(String),
    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train, validation, test)")),
        }
    }
}

/// The part of a file name that identifies the speaker: everything before
/// `_nohash_`, or the whole name if there is no such marker.
pub fn speaker_key(filename: &str) -> &str {
    filename.find("_nohash_").map_or(filename, |i| &filename[..i])
}

/// `(SHA1(speaker_key) mod (2^27 + 1)) * 100 / 2^27`.
pub fn split_percentage(filename: &str) -> f64 {
    let digest = Sha1::digest(speaker_key(filename).as_bytes());
    let modulus = HASH_SCALE + 1;
    let residue = digest
        .iter()
        .fold(0u64, |acc, &byte| (acc * 256 + u64::from(byte)) % modulus);
    residue as f64 * 100.0 / HASH_SCALE as f64
}

/// Below 10 goes to validation, below 20 to test, the rest to train.
pub fn assign_split(filename: &str) -> Split {
    let pct = split_percentage(filename);
    if pct < 10.0 {
        Split::Validation
    } else if pct < 20.0 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub speaker_key: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub keywords: Vec<String>,
    pub noise_paths: Vec<PathBuf>,
}

impl Manifest {
    pub fn n_labels(&self) -> usize {
        self.keywords.len() + 2
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = label_names(2);
        out.extend(self.keywords.iter().cloned());
        out
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = (usize, &SampleRecord)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// One line per record: `path<TAB>label<TAB>split`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let labels = self.labels();
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}", r.path.display(), labels[r.label], r.split)?;
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<Vec<_>>>()
        .map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

fn is_wav(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Inventories a corpus. Keyword `i` gets label `i + 2`.
pub fn scan_dataset<S: AsRef<str>>(root: impl AsRef<Path>, keywords: &[S]) -> Result<Manifest> {
    let root = root.as_ref();
    let keywords: Vec<String> = keywords.iter().map(|k| k.as_ref().to_string()).collect();
    let noise_dir = root.join(NOISE_DIR);
    if !noise_dir.is_dir() {
        return Err(DatasetError::MissingNoiseDir(root.to_path_buf()));
    }
    let noise_paths: Vec<PathBuf> = sorted_entries(&noise_dir)?.into_iter().filter(|p| is_wav(p)).collect();

    let mut records = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let Some(word) = dir.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if word.starts_with('_') {
            continue;
        }
        let label = keywords.iter().position(|k| k == word).map_or(UNKNOWN, |i| i + 2);
        for path in sorted_entries(&dir)? {
            if !is_wav(&path) {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            records.push(SampleRecord {
                speaker_key: speaker_key(name).to_string(),
                split: assign_split(name),
                label,
                path,
            });
        }
    }
    if !records.iter().any(|r| r.label >= 2) {
        return Err(DatasetError::EmptyCorpus(root.to_path_buf()));
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        records,
        keywords,
        noise_paths,
    })
}

/// Augmentation and per-epoch class mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of mixing background noise into a word clip.
    pub noise_prob: f64,
    /// Inclusive range of the uniform time shift, in whole milliseconds.
    pub shift_ms_range: (i32, i32),
    /// Uniform range of the noise amplitude factor.
    pub noise_scale_range: (f32, f32),
    /// Fraction of the feature cache evicted at each epoch boundary.
    pub cache_evict_frac: f64,
    /// Share of silence clips in an epoch.
    pub silence_frac: f64,
    /// Share of unknown-word clips in an epoch.
    pub unknown_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_prob: 0.8,
            shift_ms_range: (-MAX_SHIFT_MS, MAX_SHIFT_MS),
            noise_scale_range: (0.0, 0.1),
            cache_evict_frac: 0.3,
            silence_frac: 0.1,
            unknown_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No noise, no shift; class mix unchanged.
    pub fn disabled() -> Self {
        Self {
            noise_prob: 0.0,
            shift_ms_range: (0, 0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DatasetError::BadConfig(msg));
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return bad(format!("noise_prob {} outside [0, 1]", self.noise_prob));
        }
        let (lo, hi) = self.shift_ms_range;
        if lo != -hi || !(0..=MAX_SHIFT_MS).contains(&hi) {
            return bad(format!(
                "shift range [{lo}, {hi}] must be symmetric within ±{MAX_SHIFT_MS} ms"
            ));
        }
        let (nlo, nhi) = self.noise_scale_range;
        if !(0.0 <= nlo && nlo <= nhi && nhi.is_finite()) {
            return bad(format!("noise scale range [{nlo}, {nhi}]"));
        }
        if !(0.0..=1.0).contains(&self.cache_evict_frac) {
            return bad(format!("cache_evict_frac {} outside [0, 1]", self.cache_evict_frac));
        }
        let mix = self.silence_frac + self.unknown_frac;
        if self.silence_frac < 0.0 || self.unknown_frac < 0.0 || mix >= 1.0 {
            return bad(format!(
                "silence_frac {} + unknown_frac {} must be below 1",
                self.silence_frac, self.unknown_frac
            ));
        }
        Ok(())
    }
}

/// Positive shifts delay the signal (zeros in front, tail dropped); negative
/// shifts advance it. Length is preserved.
pub fn time_shift(clip: &AudioClip, shift_ms: i32) -> Result<AudioClip> {
    if shift_ms.abs() > MAX_SHIFT_MS {
        return Err(DatasetError::ShiftOutOfRange(shift_ms));
    }
    let s = clip.samples();
    let n = s.len();
    let offset = (shift_ms.unsigned_abs() as usize * SAMPLES_PER_MS).min(n);
    let mut out = vec![0.0; n];
    if shift_ms >= 0 {
        out[offset..].copy_from_slice(&s[..n - offset]);
    } else {
        out[..n - offset].copy_from_slice(&s[offset..]);
    }
    Ok(AudioClip::new(out, clip.sample_rate()))
}

/// `clip + scale * noise[offset..offset + len]`, clamped to `[-1, 1]`.
pub fn mix_noise_at(clip: &AudioClip, noise: &AudioClip, offset: usize, scale: f32) -> Result<AudioClip> {
    let len = clip.len();
    if noise.len() < offset + len {
        return Err(DatasetError::NoiseTooShort {
            found: noise.len(),
            needed: offset + len,
        });
    }
    let mixed = clip
        .samples()
        .iter()
        .zip(&noise.samples()[offset..offset + len])
        .map(|(&c, &n)| (c + scale * n).clamp(-1.0, 1.0))
        .collect();
    Ok(AudioClip::new(mixed, clip.sample_rate()))
}

/// Mixes in a uniformly placed crop of `noise` at amplitude `scale`.
pub fn mix_noise(clip: &AudioClip, noise: &AudioClip, scale: f32, rng: &mut Rng) -> Result<AudioClip> {
    if noise.len() < clip.len() {
        return Err(DatasetError::NoiseTooShort {
            found: noise.len(),
            needed: clip.len(),
        });
    }
    let offset = rng.random_range(0..=noise.len() - clip.len());
    mix_noise_at(clip, noise, offset, scale)
}

/// A one-second crop of `noise` starting at `offset`, scaled by `scale`.
pub fn silence_from_noise(noise: &AudioClip, offset: usize, scale: f32) -> Result<AudioClip> {
    mix_noise_at(&AudioClip::silent(CLIP_LEN), noise, offset, scale)
}

/// Silence clip: a random one-second crop of a random noise file, scaled
/// by a factor drawn from `U[0, 1]`.
pub fn make_silence_sample(noise: &[AudioClip], rng: &mut Rng) -> Result<AudioClip> {
    if noise.is_empty() {
        return Err(DatasetError::MissingNoiseDir(PathBuf::from(NOISE_DIR)));
    }
    let src = &noise[rng.random_range(0..noise.len())];
    if src.len() < CLIP_LEN {
        return Err(DatasetError::NoiseTooShort {
            found: src.len(),
            needed: CLIP_LEN,
        });
    }
    let offset = rng.random_range(0..=src.len() - CLIP_LEN);
    let scale: f32 = rng.random_range(0.0..=1.0);
    silence_from_noise(src, offset, scale)
}

/// A scanned manifest with its background noise loaded.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub noise: Vec<AudioClip>,
}

impl Corpus {
    pub fn load(manifest: Manifest) -> Result<Self> {
        let noise = manifest
            .noise_paths
            .iter()
            .map(|p| {
                let clip = read_wav(p)?;
                if clip.len() < CLIP_LEN {
                    return Err(DatasetError::NoiseTooShort {
                        found: clip.len(),
                        needed: CLIP_LEN,
                    });
                }
                Ok(clip)
            })
            .collect::<Result<Vec<_>>>()?;
        if noise.is_empty() {
            return Err(DatasetError::MissingNoiseDir(manifest.root.clone()));
        }
        Ok(Self { manifest, noise })
    }
}

/// Identity of one epoch item: a manifest record or a silence slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ItemKey {
    Record(usize),
    Silence(usize),
}

impl ItemKey {
    fn stream_id(self) -> u64 {
        match self {
            ItemKey::Record(i) => (i as u64) << 1,
            ItemKey::Silence(i) => ((i as u64) << 1) | 1,
        }
    }
}

#[derive(Debug, Clone)]
struct CacheEntry {
    salt: u64,
    features: FeatureMatrix,
}

/// Featurized epoch items, keyed by item and tagged with the epoch salt
/// they were generated under. Reads take `&self`; eviction takes `&mut self`.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    entries: BTreeMap<ItemKey, CacheEntry>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &ItemKey) -> Option<&FeatureMatrix> {
        self.entries.get(key).map(|e| &e.features)
    }

    /// The salt an entry was generated under.
    pub fn salt(&self, key: &ItemKey) -> Option<u64> {
        self.entries.get(key).map(|e| e.salt)
    }

    pub fn insert(&mut self, key: ItemKey, salt: u64, features: FeatureMatrix) {
        self.entries.insert(key, CacheEntry { salt, features });
    }

    pub fn keys(&self) -> impl Iterator<Item = &ItemKey> {
        self.entries.keys()
    }

    /// Removes `ceil(frac * len)` entries chosen uniformly at random.
    /// Returns the evicted keys.
    pub fn evict(&mut self, frac: f64, rng: &mut Rng) -> Vec<ItemKey> {
        let len = self.entries.len();
        // The small slack keeps e.g. 0.3 * 10 from rounding up to 4.
        let n = ((frac * len as f64 - 1e-9).ceil().max(0.0) as usize).min(len);
        if n == 0 {
            return Vec::new();
        }
        let keys: Vec<ItemKey> = self.entries.keys().copied().collect();
        let mut victims: Vec<ItemKey> = index::sample(rng, len, n).into_iter().map(|i| keys[i]).collect();
        victims.sort();
        for k in &victims {
            self.entries.remove(k);
        }
        victims
    }
}

/// Convenience wrapper for the default 30% eviction.
pub fn evict(cache: &mut FeatureCache, augment: &AugmentConfig, rng: &mut Rng) -> Vec<ItemKey> {
    cache.evict(augment.cache_evict_frac, rng)
}

/// Items of one pass over `split`: every keyword record, plus unknown-word
/// records and silence slots sized so that they make up `unknown_frac` and
/// `silence_frac` of the whole. Order is shuffled.
pub fn epoch_items(
    manifest: &Manifest,
    split: Split,
    augment: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Vec<(ItemKey, usize)>> {
    augment.validate()?;
    let mut keyword = Vec::new();
    let mut unknown = Vec::new();
    for (i, r) in manifest.in_split(split) {
        if r.label == UNKNOWN {
            unknown.push(i);
        } else {
            keyword.push((ItemKey::Record(i), r.label));
        }
    }
    let keyword_frac = 1.0 - augment.silence_frac - augment.unknown_frac;
    let share = |frac: f64| (keyword.len() as f64 * frac / keyword_frac).round() as usize;
    let n_silence = share(augment.silence_frac);
    let n_unknown = share(augment.unknown_frac).min(unknown.len());

    unknown.shuffle(rng);
    let mut items = keyword;
    items.extend(unknown[..n_unknown].iter().map(|&i| (ItemKey::Record(i), UNKNOWN)));
    items.extend((0..n_silence).map(|slot| (ItemKey::Silence(slot), SILENCE)));
    if items.is_empty() {
        return Err(DatasetError::EmptySplit(split));
    }
    items.shuffle(rng);
    Ok(items)
}

/// Turns one item into features. With `augment`, word clips are shifted and
/// possibly noised using a stream derived from `(seed, salt, key)`.
pub fn featurize_item(
    corpus: &Corpus,
    key: ItemKey,
    augment: Option<&AugmentConfig>,
    seed: u64,
    salt: u64,
) -> Result<FeatureMatrix> {
    let mut rng = rng::derived(seed, &[salt, key.stream_id()]);
    let clip = match key {
        ItemKey::Silence(_) => make_silence_sample(&corpus.noise, &mut rng)?,
        ItemKey::Record(i) => {
            let clip = fit_to_length(&read_wav(&corpus.manifest.records[i].path)?, CLIP_LEN);
            match augment {
                None => clip,
                Some(aug) => augment_clip(&clip, &corpus.noise, aug, &mut rng)?,
            }
        }
    };
    Ok(default_extractor().extract(&clip)?)
}

/// Random time shift, then background noise with probability `noise_prob`.
pub fn augment_clip(clip: &AudioClip, noise: &[AudioClip], aug: &AugmentConfig, rng: &mut Rng) -> Result<AudioClip> {
    let (lo, hi) = aug.shift_ms_range;
    let shift = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut out = time_shift(clip, shift)?;
    if !noise.is_empty() && rng.random_bool(aug.noise_prob) {
        let src = &noise[rng.random_range(0..noise.len())];
        let (slo, shi) = aug.noise_scale_range;
        let scale = if shi > slo { rng.random_range(slo..=shi) } else { slo };
        out = mix_noise(&out, src, scale, rng)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<FeatureMatrix>,
    pub labels: Vec<usize>,
    pub keys: Vec<ItemKey>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch of batches over `split`.
///
/// Training items go through the cache: misses are featurized with fresh
/// augmentation under salt `epoch`. Other splits are featurized without
/// augmentation and their item selection uses a fixed seed, so they are
/// identical every time. Batch order depends only on `rng`.
pub fn epoch_batches(
    corpus: &Corpus,
    split: Split,
    augment: &AugmentConfig,
    cache: &mut FeatureCache,
    batch_size: usize,
    epoch: u64,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DatasetError::BadConfig("batch_size must be positive".into()));
    }
    let training = split == Split::Train;
    let (items, seed) = if training {
        let items = epoch_items(&corpus.manifest, split, augment, rng)?;
        (items, rng.next_u64())
    } else {
        let mut eval_rng = rng::derived(EVAL_SEED, &[split as u64]);
        (epoch_items(&corpus.manifest, split, augment, &mut eval_rng)?, EVAL_SEED)
    };

    let features: Vec<FeatureMatrix> = if training {
        let misses: Vec<ItemKey> = items
            .iter()
            .map(|&(k, _)| k)
            .filter(|k| cache.get(k).is_none())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let fresh = misses
            .par_iter()
            .map(|&k| featurize_item(corpus, k, Some(augment), seed, epoch))
            .collect::<Result<Vec<_>>>()?;
        for (k, f) in misses.into_iter().zip(fresh) {
            cache.insert(k, epoch, f);
        }
        items
            .iter()
            .map(|(k, _)| cache.get(k).expect("just filled").clone())
            .collect()
    } else {
        items
            .par_iter()
            .map(|&(k, _)| featurize_item(corpus, k, None, seed, 0))
            .collect::<Result<Vec<_>>>()?
    };

    let mut batches = Vec::with_capacity(items.len().div_ceil(batch_size));
    let mut feats = features.into_iter();
    for chunk in items.chunks(batch_size) {
        batches.push(Batch {
            features: feats.by_ref().take(chunk.len()).collect(),
            labels: chunk.iter().map(|&(_, l)| l).collect(),
            keys: chunk.iter().map(|&(k, _)| k).collect(),
        });
    }
    Ok(batches)
}

/// Every item of an evaluation split with its label, unaugmented.
pub fn eval_set(corpus: &Corpus, split: Split) -> Result<Vec<(FeatureMatrix, usize)>> {
    let batches = epoch_batches(
        corpus,
        split,
        &AugmentConfig::default(),
        &mut FeatureCache::new(),
        usize::MAX,
        0,
        &mut rng::seeded(0),
    )?;
    Ok(batches
        .into_iter()
        .flat_map(|b| b.features.into_iter().zip(b.labels))
        .collect())
}
