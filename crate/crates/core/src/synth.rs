//! Synthetic stand-in for the Speech Commands corpus.
//!
//! Each word is a gliding two-harmonic tone with its own start and end
//! pitch under a Hann envelope, placed at a random offset with random
//! loudness. Background noise files hold white and low-passed noise.
//! Used by smoke tests and toy training runs where the real corpus is not
//! available.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::audio::{write_wav, AudioClip, AudioError, CLIP_LEN, SAMPLE_RATE};
use crate::dataset::{assign_split, Split, KEYWORDS, NOISE_DIR};
use crate::features::{mfcc, FeatureError, FeatureMatrix};
use crate::models::{N_LABELS, SILENCE, UNKNOWN};
use crate::rng::Rng;

/// Non-keyword words written by [`write_corpus`].
pub const UNKNOWN_WORDS: [&str; 3] = ["bed", "marvin", "tree"];

/// Start and end pitch in Hz of word `id` (keywords first, then unknowns).
fn glide(id: usize) -> (f32, f32) {
    let start = 220.0 + 160.0 * (id % 7) as f32;
    let end = start * [0.55, 1.0, 1.7][(id / 7) % 3];
    (start, end)
}

/// One utterance of word `id`.
pub fn word_clip(id: usize, rng: &mut Rng) -> AudioClip {
    let (f0, f1) = glide(id);
    let dur = rng.random_range(0.35f32..0.6);
    let n = (dur * SAMPLE_RATE as f32) as usize;
    let start = rng.random_range(1600..CLIP_LEN - n - 1600);
    let amp = rng.random_range(0.2f32..0.6);
    let jitter = rng.random_range(0.95f32..1.05);
    let mut samples = vec![0.0f32; CLIP_LEN];
    let mut phase = 0.0f32;
    for i in 0..n {
        let t = i as f32 / n as f32;
        let freq = (f0 + (f1 - f0) * t) * jitter;
        phase += 2.0 * PI * freq / SAMPLE_RATE as f32;
        let env = 0.5 - 0.5 * (2.0 * PI * t).cos();
        samples[start + i] = amp * env * (phase.sin() + 0.4 * (2.0 * phase).sin()) / 1.4;
    }
    for s in &mut samples {
        *s += rng.random_range(-0.002f32..0.002);
    }
    AudioClip::new(samples, SAMPLE_RATE)
}

/// White noise, or a one-pole low-passed variant when `colored`.
pub fn noise_clip(len: usize, amplitude: f32, colored: bool, rng: &mut Rng) -> AudioClip {
    let mut state = 0.0f32;
    let samples = (0..len)
        .map(|_| {
            let white = rng.random_range(-1.0f32..1.0);
            if colored {
                state = 0.9 * state + 0.1 * white;
                amplitude * 3.0 * state
            } else {
                amplitude * white
            }
        })
        .collect();
    AudioClip::new(samples, SAMPLE_RATE)
}

/// A clip for class `label` in the twelve-way scheme: keywords via
/// [`word_clip`], `unknown` as one of [`UNKNOWN_WORDS`], `silence` as
/// quiet noise.
pub fn labeled_clip(label: usize, rng: &mut Rng) -> AudioClip {
    match label {
        SILENCE => {
            let amp = rng.random_range(0.001f32..0.02);
            noise_clip(CLIP_LEN, amp, rng.random_bool(0.5), rng)
        }
        UNKNOWN => word_clip(KEYWORDS.len() + rng.random_range(0..UNKNOWN_WORDS.len()), rng),
        keyword => word_clip(keyword - 2, rng),
    }
}

/// Split that file number `n` of a synthetic corpus is steered into: one
/// in ten each for validation and test.
fn target_split(n: usize) -> Split {
    match n % 10 {
        3 => Split::Validation,
        7 => Split::Test,
        _ => Split::Train,
    }
}

/// Writes `n_files` clips as `<root>/<word>/<speaker>_nohash_0.wav`, cycling
/// through the keywords and then [`UNKNOWN_WORDS`], plus two three-second
/// noise files. Speaker names are drawn until their hash split matches a
/// fixed one-in-ten pattern, so even tiny corpora have all three splits.
pub fn write_corpus(root: &Path, n_files: usize, rng: &mut Rng) -> Result<(), AudioError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AudioError::Io { path, source }
    };
    let words: Vec<&str> = KEYWORDS.iter().chain(UNKNOWN_WORDS.iter()).copied().collect();
    for n in 0..n_files {
        let id = n % words.len();
        let dir = root.join(words[id]);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let target = target_split(n);
        let name = loop {
            let speaker: u32 = rng.random();
            let name = format!("{speaker:08x}_nohash_0.wav");
            if assign_split(&name) == target {
                break name;
            }
        };
        write_wav(&word_clip(id, rng), dir.join(name))?;
    }
    let noise_dir = root.join(NOISE_DIR);
    fs::create_dir_all(&noise_dir).map_err(io(&noise_dir))?;
    write_wav(
        &noise_clip(3 * CLIP_LEN, 0.3, false, rng),
        noise_dir.join("white_noise.wav"),
    )?;
    write_wav(
        &noise_clip(3 * CLIP_LEN, 0.3, true, rng),
        noise_dir.join("pink_noise.wav"),
    )?;
    Ok(())
}

/// `n` labelled feature matrices cycling through all twelve classes.
pub fn toy_samples(n: usize, rng: &mut Rng) -> Result<Vec<(FeatureMatrix, usize)>, FeatureError> {
    (0..n)
        .map(|i| {
            let label = i % N_LABELS;
            Ok((mfcc(&labeled_clip(label, rng))?, label))
        })
        .collect()
}
