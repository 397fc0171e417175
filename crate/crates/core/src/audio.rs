//! WAV ingestion and clip normalization.
//!
//! Only the corpus format is accepted: RIFF/WAVE, PCM, 16-bit, mono,
//! 16 kHz. Samples are held as `f32` in `[-1.0, 1.0]`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Sample rate of every clip in the corpus.
pub const SAMPLE_RATE: u32 = 16_000;

/// Length of a one-second clip at [`SAMPLE_RATE`].
pub const CLIP_LEN: usize = 16_000;

const PCM_FORMAT: u16 = 1;
const BITS_PER_SAMPLE: u16 = 16;
const WAV_HEADER_LEN: usize = 44;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported WAV format: {field} is {found}, expected {expected}")]
    UnsupportedFormat {
        field: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AudioError> = std::result::Result<T, E>;

/// Mono PCM audio as floats in `[-1.0, 1.0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, clamping samples into `[-1.0, 1.0]`. NaN becomes 0.
    pub fn new(mut samples: Vec<f32>, sample_rate: u32) -> Self {
        for s in &mut samples {
            *s = if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) };
        }
        Self { samples, sample_rate }
    }

    pub fn silent(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                AudioError::MalformedWav(format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(AudioError::MalformedWav(format!(
            "fmt chunk is {} bytes, expected at least 16",
            body.len()
        )));
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    let format = c.u16("fmt audio format")?;
    let channels = c.u16("fmt channels")?;
    let sample_rate = c.u32("fmt sample rate")?;
    let _byte_rate = c.u32("fmt byte rate")?;
    let _block_align = c.u16("fmt block align")?;
    let bits = c.u16("fmt bits per sample")?;
    Ok(FmtChunk {
        format,
        channels,
        sample_rate,
        bits,
    })
}

fn check_format(fmt: &FmtChunk) -> Result<()> {
    let checks: [(&'static str, u32, u32); 4] = [
        ("audio format", fmt.format.into(), PCM_FORMAT.into()),
        ("channels", fmt.channels.into(), 1),
        ("sample rate", fmt.sample_rate, SAMPLE_RATE),
        ("bits per sample", fmt.bits.into(), BITS_PER_SAMPLE.into()),
    ];
    for (field, found, expected) in checks {
        if found != expected {
            return Err(AudioError::UnsupportedFormat { field, found, expected });
        }
    }
    Ok(())
}

/// Decodes an in-memory WAV file.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "RIFF tag")? != b"RIFF" {
        return Err(AudioError::MalformedWav("missing RIFF tag".into()));
    }
    let _riff_len = c.u32("RIFF length")?;
    if c.take(4, "WAVE tag")? != b"WAVE" {
        return Err(AudioError::MalformedWav("missing WAVE tag".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    while c.remaining() > 0 {
        let id: [u8; 4] = c.take(4, "chunk id")?.try_into().expect("4 bytes");
        let len = c.u32("chunk length")? as usize;
        let body = c.take(len, "chunk body")?;
        // Chunks are word aligned; a trailing pad byte may be absent at EOF.
        if len % 2 == 1 && c.remaining() > 0 {
            c.take(1, "chunk pad")?;
        }
        match &id {
            b"fmt " => {
                let parsed = parse_fmt(body)?;
                check_format(&parsed)?;
                fmt = Some(parsed);
            }
            b"data" => {
                if fmt.is_none() {
                    return Err(AudioError::MalformedWav("data chunk precedes fmt chunk".into()));
                }
                if !len.is_multiple_of(2) {
                    return Err(AudioError::MalformedWav(format!(
                        "data chunk length {len} is not a multiple of 2"
                    )));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|b| f32::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
                    .collect();
                return Ok(AudioClip {
                    samples,
                    sample_rate: SAMPLE_RATE,
                });
            }
            _ => {}
        }
    }
    Err(AudioError::MalformedWav(if fmt.is_none() {
        "no fmt chunk".into()
    } else {
        "no data chunk".into()
    }))
}

/// Encodes a clip as 16-bit PCM mono WAV at the clip's sample rate.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(WAV_HEADER_LEN + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&BITS_PER_SAMPLE.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_wav(&bytes)
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Pads with zeros on both sides or center-crops to exactly `target_len`.
///
/// An odd padding deficit puts the extra zero on the right.
pub fn fit_to_length(clip: &AudioClip, target_len: usize) -> AudioClip {
    let len = clip.samples.len();
    let samples = if len == target_len {
        clip.samples.clone()
    } else if len < target_len {
        let left = (target_len - len) / 2;
        let mut out = vec![0.0; target_len];
        out[left..left + len].copy_from_slice(&clip.samples);
        out
    } else {
        let start = (len - target_len) / 2;
        clip.samples[start..start + target_len].to_vec()
    };
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}
