//! Mono audio buffers, WAV I/O, SNR-controlled mixing and SI-SDR.

use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

/// SI-SDR values are clamped to `[-SI_SDR_CAP_DB, SI_SDR_CAP_DB]`.
pub const SI_SDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedCodec(String),
    #[error("truncated or malformed WAV chunk: {0}")]
    Truncated(String),
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: io::Error },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("noise segment ({noise} samples) shorter than clean signal ({clean})")]
    NoiseTooShort { clean: usize, noise: usize },
    #[error("{0} has zero power; SNR is undefined")]
    ZeroPower(&'static str),
}

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square power over the whole buffer.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }
}

pub(crate) fn mean_square(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

fn map_hound(path: &Path, err: hound::Error) -> AudioError {
    let p = path.display().to_string();
    match err {
        hound::Error::IoError(e) if e.kind() == io::ErrorKind::NotFound => AudioError::MissingFile(p),
        hound::Error::IoError(e) => AudioError::Truncated(format!("{p}: {e}")),
        hound::Error::FormatError(m) => AudioError::Truncated(format!("{p}: {m}")),
        hound::Error::TooWide | hound::Error::Unsupported | hound::Error::InvalidSampleFormat => {
            AudioError::UnsupportedCodec(format!("{p}: {err}"))
        }
        other => AudioError::UnsupportedCodec(format!("{p}: {other}")),
    }
}

/// Reads PCM-16 or IEEE float-32 WAV, downmixing to mono by channel averaging.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::MissingFile(path.display().to_string()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedCodec(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(AudioError::Truncated(format!(
            "{}: partial frame at end of data",
            path.display()
        )));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono IEEE float-32 WAV file.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<(), AudioError> {
    let path = path.as_ref();
    if let Some(i) = buf.samples.iter().position(|s| !s.is_finite()) {
        return Err(AudioError::NonFinite(i));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let werr = |e: hound::Error| AudioError::Write {
        path: path.display().to_string(),
        source: match e {
            hound::Error::IoError(io) => io,
            other => io::Error::other(other.to_string()),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(werr)?;
    for &s in &buf.samples {
        writer.write_sample(s).map_err(werr)?;
    }
    writer.finalize().map_err(werr)
}

/// A clean signal mixed with a scaled noise segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixed: AudioBuffer,
    pub clean: AudioBuffer,
    /// The noise segment after scaling, `mixed - clean` up to rounding.
    pub noise: AudioBuffer,
    pub noise_gain: f64,
    pub snr_db: f64,
}

impl Mixture {
    /// SNR recomputed from the stored clean and scaled-noise components.
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (self.clean.power() / self.noise.power()).log10()
    }
}

/// Cuts a random noise segment of the clean signal's length and scales it so
/// that the mean-square power ratio equals `snr_db`.
pub fn mix_at_snr<R: Rng + ?Sized>(
    clean: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixture, AudioError> {
    if clean.sample_rate != noise.sample_rate {
        return Err(AudioError::RateMismatch(clean.sample_rate, noise.sample_rate));
    }
    let n = clean.len();
    if noise.len() < n {
        return Err(AudioError::NoiseTooShort {
            clean: n,
            noise: noise.len(),
        });
    }
    let offset = if noise.len() > n {
        rng.random_range(0..=noise.len() - n)
    } else {
        0
    };
    let segment = &noise.samples[offset..offset + n];
    let p_clean = clean.power();
    let p_noise = mean_square(segment);
    if p_clean <= 0.0 {
        return Err(AudioError::ZeroPower("clean signal"));
    }
    if p_noise <= 0.0 {
        return Err(AudioError::ZeroPower("noise segment"));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f32> = segment.iter().map(|&v| (v as f64 * gain) as f32).collect();
    let mixed: Vec<f32> = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(&c, &v)| c + v)
        .collect();
    Ok(Mixture {
        mixed: AudioBuffer::new(mixed, clean.sample_rate)?,
        clean: clean.clone(),
        noise: AudioBuffer::new(scaled, clean.sample_rate)?,
        noise_gain: gain,
        snr_db,
    })
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(reference: &[f32], estimate: &[f32]) -> Result<f64, AudioError> {
    if reference.len() != estimate.len() {
        return Err(AudioError::LengthMismatch(reference.len(), estimate.len()));
    }
    let rr: f64 = reference.iter().map(|&r| (r as f64).powi(2)).sum();
    if rr <= 0.0 {
        return Err(AudioError::ZeroPower("reference"));
    }
    let er: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&r, &e)| r as f64 * e as f64)
        .sum();
    let alpha = er / rr;
    let (mut target, mut resid) = (0.0f64, 0.0f64);
    for (&r, &e) in reference.iter().zip(estimate) {
        let t = alpha * r as f64;
        target += t * t;
        resid += (e as f64 - t).powi(2);
    }
    let db = if resid <= 0.0 {
        SI_SDR_CAP_DB
    } else if target <= 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// SI-SDR between two buffers of equal length.
pub fn si_sdr_buffers(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64, AudioError> {
    si_sdr(&reference.samples, &estimate.samples)
}
