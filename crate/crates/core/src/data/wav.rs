use std::path::Path;

use super::DataError;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Audio {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16 kHz, mono, 16-bit integer PCM WAV file; anything else is rejected.
pub fn read_wav(path: &Path) -> Result<Audio, DataError> {
    let wav_err = |message: String| DataError::Wav {
        path: path.display().to_string(),
        message,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    check_spec(spec, wav_err)?;
    let samples = reader
        .into_samples::<i16>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

pub fn write_wav(path: &Path, samples: &[i16], sample_rate: u32) -> Result<(), DataError> {
    let wav_err = |e: hound::Error| DataError::Wav {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    let mut i16w = w.get_i16_writer(samples.len() as u32);
    for &s in samples {
        i16w.write_sample(s);
    }
    i16w.flush().map_err(wav_err)?;
    w.finalize().map_err(wav_err)
}

fn check_spec(spec: hound::WavSpec, wav_err: impl Fn(String) -> DataError) -> Result<(), DataError> {
    if spec.channels != 1 {
        return Err(wav_err(format!("expected mono audio, got {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "expected 16-bit integer PCM, got {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(format!(
            "expected {SAMPLE_RATE} Hz, got {} Hz",
            spec.sample_rate
        )));
    }
    Ok(())
}

/// Fixed-size chunks of a long WAV file, validated like [`read_wav`].
pub struct WavChunks {
    path: String,
    samples: hound::WavIntoSamples<std::io::BufReader<std::fs::File>, i16>,
    chunk: usize,
    len: usize,
}

impl WavChunks {
    pub fn open(path: &Path, chunk_samples: usize) -> Result<Self, DataError> {
        let wav_err = |message: String| DataError::Wav {
            path: path.display().to_string(),
            message,
        };
        let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
        check_spec(reader.spec(), wav_err)?;
        Ok(Self {
            path: path.display().to_string(),
            len: reader.len() as usize,
            samples: reader.into_samples(),
            chunk: chunk_samples.max(1),
        })
    }

    /// Total samples in the file.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Iterator for WavChunks {
    type Item = Result<Vec<i16>, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut out = Vec::with_capacity(self.chunk);
        for s in self.samples.by_ref().take(self.chunk) {
            match s {
                Ok(v) => out.push(v),
                Err(e) => {
                    return Some(Err(DataError::Wav {
                        path: self.path.clone(),
                        message: e.to_string(),
                    }))
                }
            }
        }
        (!out.is_empty()).then_some(Ok(out))
    }
}

/// Writes chunks of audio as they are produced; returns the sample count.
pub fn write_wav_chunks(
    path: &Path,
    chunks: impl IntoIterator<Item = Vec<i16>>,
    sample_rate: u32,
) -> Result<usize, DataError> {
    let wav_err = |e: hound::Error| DataError::Wav {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    let mut n = 0;
    for chunk in chunks {
        let mut i16w = w.get_i16_writer(chunk.len() as u32);
        for &s in &chunk {
            i16w.write_sample(s);
        }
        i16w.flush().map_err(wav_err)?;
        n += chunk.len();
    }
    w.finalize().map_err(wav_err)?;
    Ok(n)
}
