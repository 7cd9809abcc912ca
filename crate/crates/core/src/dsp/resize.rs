use super::{DspError, Spectrogram};

/// Tent kernel `k(x) = 1 - |x|` for `|x| < 1`, zero elsewhere.
pub fn bilinear_kernel(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        1.0 - a
    } else {
        0.0
    }
}

/// Resamples the time axis to `target_frames` with align-corners mapping
/// `src = i * (frames - 1) / (target - 1)`. Bands are left alone, so along
/// each band this reduces to a two-neighbour tent-kernel interpolation.
pub fn bilinear_resize(spec: &Spectrogram, target_frames: usize) -> Result<Spectrogram, DspError> {
    let frames = spec.frames();
    if frames < 2 {
        return Err(DspError::TooFewFrames { frames, need: 2 });
    }
    if target_frames < 2 {
        return Err(DspError::Config(format!(
            "resize target must be >= 2 frames, got {target_frames}"
        )));
    }
    let taps: Vec<(usize, f64, f64)> = (0..target_frames)
        .map(|i| {
            // integer numerator keeps the last tap exactly on the last frame
            let src = ((i * (frames - 1)) as f64 / (target_frames - 1) as f64).min((frames - 1) as f64);
            let left = (src.floor() as usize).min(frames - 1);
            (
                left,
                bilinear_kernel(src - left as f64),
                bilinear_kernel(src - (left + 1) as f64),
            )
        })
        .collect();
    let mut values = Vec::with_capacity(spec.bands() * target_frames);
    for b in 0..spec.bands() {
        let row = spec.band(b);
        values.extend(taps.iter().map(|&(left, wl, wr)| {
            // zero-weight taps are skipped so exact grid points copy through untouched
            if wr == 0.0 {
                row[left]
            } else {
                (row[left] as f64 * wl + row[left + 1] as f64 * wr) as f32
            }
        }));
    }
    Spectrogram::new(spec.bands(), target_frames, values, spec.frame_period_s())
}
