//! Frame-level acoustic features: 13 MFCCs and three prosodic tracks
//! (F0, loudness, voicing probability).
//!
//! Every frame is processed independently, so shifting the input by one
//! frame shift moves the feature rows by exactly one.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("window of {window_ms} ms is shorter than one {frame_len_ms} ms frame")]
    WindowTooShort { window_ms: u64, frame_len_ms: u32 },
    #[error("anchor at {anchor_ms} ms lies beyond the signal end ({duration_ms} ms)")]
    AnchorBeyondSignal { anchor_ms: u64, duration_ms: u64 },
    #[error("unsupported sample rate {0} Hz (expected 8000 or 16000)")]
    UnsupportedSampleRate(u32),
    #[error("invalid frame spec: {0}")]
    InvalidFrameSpec(String),
    #[error("signal contains non-finite samples")]
    NonFinite,
    #[error("unsupported wav layout: {0}")]
    UnsupportedWav(String),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

pub const SUPPORTED_RATES: [u32; 2] = [8000, 16000];

pub const PRE_EMPHASIS: f64 = 0.97;
pub const MEL_FILTERS: usize = 26;
pub const MFCC_COUNT: usize = 13;
/// Floor applied to mel energies before the log.
pub const MEL_ENERGY_FLOOR: f64 = 1e-10;
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 400.0;
/// Natural-log floor for loudness.
pub const LOUDNESS_FLOOR: f64 = -20.0;
/// Frames whose normalized autocorrelation peak is below this get F0 = 0.
pub const VOICING_THRESHOLD: f64 = 0.5;
/// A later peak is preferred over the first local peak only if the first
/// falls below this fraction of the global maximum.
const OCTAVE_RATIO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate_hz) {
            return Err(DspError::UnsupportedSampleRate(sample_rate_hz));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFinite);
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_ms(&self) -> u64 {
        self.samples.len() as u64 * 1000 / self.sample_rate_hz as u64
    }

    fn samples_for_ms(&self, ms: u64) -> usize {
        (ms * self.sample_rate_hz as u64 / 1000) as usize
    }
}

/// Reads a mono PCM wav file (16-bit integer or 32-bit float).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedWav(format!("{} channels, expected mono", spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(DspError::UnsupportedWav(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSpec {
    pub frame_len_ms: u32,
    pub shift_ms: u32,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self { frame_len_ms: 25, shift_ms: 10 }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shift_ms == 0 || self.frame_len_ms < self.shift_ms {
            return Err(DspError::InvalidFrameSpec(format!(
                "need frame_len_ms >= shift_ms > 0, got {} / {}",
                self.frame_len_ms, self.shift_ms
            )));
        }
        Ok(())
    }
}

pub fn frame_count(window_ms: u64, spec: &FrameSpec) -> Result<usize> {
    spec.validate()?;
    if window_ms < spec.frame_len_ms as u64 {
        return Err(DspError::WindowTooShort { window_ms, frame_len_ms: spec.frame_len_ms });
    }
    Ok(((window_ms - spec.frame_len_ms as u64) / spec.shift_ms as u64 + 1) as usize)
}

/// Samples covering `[anchor_ms - window_ms, anchor_ms)`, left-padded with
/// zeros when the window starts before the signal.
pub fn extract_window(wave: &Waveform, anchor_ms: u64, window_ms: u64) -> Result<Waveform> {
    let duration_ms = wave.duration_ms();
    let end = wave.samples_for_ms(anchor_ms);
    if end > wave.samples.len() {
        return Err(DspError::AnchorBeyondSignal { anchor_ms, duration_ms });
    }
    let len = wave.samples_for_ms(window_ms);
    let mut samples = Vec::with_capacity(len);
    if len > end {
        samples.resize(len - end, 0.0);
        samples.extend_from_slice(&wave.samples[..end]);
    } else {
        samples.extend_from_slice(&wave.samples[end - len..end]);
    }
    Ok(Waveform { samples, sample_rate_hz: wave.sample_rate_hz })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Mfcc13,
    Prosodic3,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Mfcc13 => MFCC_COUNT,
            FeatureKind::Prosodic3 => 3,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mfcc13 => 0,
            FeatureKind::Prosodic3 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Mfcc13),
            1 => Some(FeatureKind::Prosodic3),
            _ => None,
        }
    }
}

/// frames × dim, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f32>,
    pub rows: usize,
    pub kind: FeatureKind,
    pub spec: FrameSpec,
}

impl FeatureMatrix {
    pub fn cols(&self) -> usize {
        self.kind.dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

struct Framing {
    len: usize,
    shift: usize,
    count: usize,
}

fn framing(wave: &Waveform, spec: &FrameSpec) -> Result<Framing> {
    spec.validate()?;
    let len = wave.samples_for_ms(spec.frame_len_ms as u64);
    let shift = wave.samples_for_ms(spec.shift_ms as u64);
    let n = wave.samples.len();
    if n < len || len == 0 {
        return Err(DspError::WindowTooShort { window_ms: wave.duration_ms(), frame_len_ms: spec.frame_len_ms });
    }
    Ok(Framing { len, shift, count: (n - len) / shift + 1 })
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale from 0 Hz to Nyquist, evaluated
/// at the FFT bin centre frequencies. Shape: filters × (nfft/2 + 1).
fn mel_filterbank(sample_rate: f64, nfft: usize, filters: usize) -> Vec<Vec<f64>> {
    let bins = nfft / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (filters + 1) as f64))
        .collect();
    (0..filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / nfft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// 13 cepstral coefficients (c0..c12) per frame.
///
/// Per frame: pre-emphasis (first sample kept as is), Hamming window, zero
/// padding to the next power of two, magnitude spectrum, 26 mel filters,
/// natural log with a floor, orthonormal DCT-II.
pub fn mfcc(wave: &Waveform, spec: &FrameSpec) -> Result<FeatureMatrix> {
    let fr = framing(wave, spec)?;
    let nfft = fr.len.next_power_of_two();
    let sr = wave.sample_rate_hz as f64;
    let window = hamming(fr.len);
    let bank = mel_filterbank(sr, nfft, MEL_FILTERS);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let dct: Vec<Vec<f64>> = (0..MFCC_COUNT)
        .map(|i| {
            let scale = if i == 0 { (1.0 / MEL_FILTERS as f64).sqrt() } else { (2.0 / MEL_FILTERS as f64).sqrt() };
            (0..MEL_FILTERS)
                .map(|m| scale * (PI * i as f64 * (m as f64 + 0.5) / MEL_FILTERS as f64).cos())
                .collect()
        })
        .collect();

    let mut data = Vec::with_capacity(fr.count * MFCC_COUNT);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut log_mel = vec![0.0; MEL_FILTERS];
    for f in 0..fr.count {
        let frame = &wave.samples[f * fr.shift..f * fr.shift + fr.len];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for n in 0..fr.len {
            let prev = if n == 0 { 0.0 } else { frame[n - 1] as f64 };
            let emphasized = frame[n] as f64 - PRE_EMPHASIS * prev;
            buf[n].re = emphasized * window[n];
        }
        fft.process(&mut buf);
        for (m, filter) in bank.iter().enumerate() {
            let energy: f64 = filter.iter().zip(&buf).map(|(w, c)| w * c.norm()).sum();
            log_mel[m] = energy.max(MEL_ENERGY_FLOOR).ln();
        }
        for basis in &dct {
            let c: f64 = basis.iter().zip(&log_mel).map(|(b, l)| b * l).sum();
            data.push(c as f32);
        }
    }
    Ok(FeatureMatrix { data, rows: fr.count, kind: FeatureKind::Mfcc13, spec: *spec })
}

/// Per-frame pitch analysis result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchFrame {
    pub f0_hz: f64,
    pub voicing: f64,
}

/// Normalized autocorrelation pitch estimate for one frame.
///
/// Picks the first interior local maximum of the normalized
/// autocorrelation within the 50–400 Hz lag range that reaches 90% of the
/// range maximum, refines it with a parabolic fit, and reports the peak
/// height clamped to [0, 1] as voicing probability.
pub fn frame_pitch(frame: &[f32], sample_rate_hz: u32) -> PitchFrame {
    let unvoiced = PitchFrame { f0_hz: 0.0, voicing: 0.0 };
    let n = frame.len();
    let sr = sample_rate_hz as f64;
    let min_lag = (sr / F0_MAX_HZ).ceil() as usize;
    let max_lag = ((sr / F0_MIN_HZ).floor() as usize).min(n.saturating_sub(2));
    if max_lag < min_lag + 2 {
        return unvoiced;
    }
    let mean = frame.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
    let x: Vec<f64> = frame.iter().map(|&s| s as f64 - mean).collect();
    if x.iter().all(|&v| v == 0.0) {
        return unvoiced;
    }

    // r[i] holds the normalized autocorrelation at lag min_lag - 1 + i.
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1)
        .map(|lag| {
            if lag >= n {
                return 0.0;
            }
            let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for i in 0..n - lag {
                let (a, b) = (x[i], x[i + lag]);
                xy += a * b;
                xx += a * a;
                yy += b * b;
            }
            let denom = (xx * yy).sqrt();
            if denom > 0.0 {
                xy / denom
            } else {
                0.0
            }
        })
        .collect();

    let peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&i| r[i] > 0.0 && r[i] >= r[i - 1] && r[i] >= r[i + 1])
        .collect();
    let best = match peaks.iter().map(|&i| r[i]).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))) {
        Some(v) => v,
        None => return unvoiced,
    };
    let Some(&pick) = peaks.iter().find(|&&i| r[i] >= OCTAVE_RATIO * best) else {
        return unvoiced;
    };

    let voicing = r[pick].clamp(0.0, 1.0);
    if voicing < VOICING_THRESHOLD {
        return PitchFrame { f0_hz: 0.0, voicing };
    }
    let (a, b, c) = (r[pick - 1], r[pick], r[pick + 1]);
    let curvature = a - 2.0 * b + c;
    let delta = if curvature < 0.0 { (0.5 * (a - c) / curvature).clamp(-0.5, 0.5) } else { 0.0 };
    let lag = (min_lag - 1 + pick) as f64 + delta;
    PitchFrame { f0_hz: sr / lag, voicing }
}

/// Natural log of frame RMS, floored at [`LOUDNESS_FLOOR`].
pub fn frame_loudness(frame: &[f32]) -> f64 {
    let energy = frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / frame.len() as f64;
    if energy <= 0.0 {
        return LOUDNESS_FLOOR;
    }
    (0.5 * energy.ln()).max(LOUDNESS_FLOOR)
}

/// Columns: F0 in Hz (0 when unvoiced), loudness, voicing probability.
pub fn prosodic(wave: &Waveform, spec: &FrameSpec) -> Result<FeatureMatrix> {
    let fr = framing(wave, spec)?;
    let mut data = Vec::with_capacity(fr.count * 3);
    for f in 0..fr.count {
        let frame = &wave.samples[f * fr.shift..f * fr.shift + fr.len];
        let pitch = frame_pitch(frame, wave.sample_rate_hz);
        data.push(pitch.f0_hz as f32);
        data.push(frame_loudness(frame) as f32);
        data.push(pitch.voicing as f32);
    }
    Ok(FeatureMatrix { data, rows: fr.count, kind: FeatureKind::Prosodic3, spec: *spec })
}

pub fn extract(wave: &Waveform, spec: &FrameSpec, kind: FeatureKind) -> Result<FeatureMatrix> {
    match kind {
        FeatureKind::Mfcc13 => mfcc(wave, spec),
        FeatureKind::Prosodic3 => prosodic(wave, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, ms: u64, sr: u32, amp: f64) -> Waveform {
        let n = (ms * sr as u64 / 1000) as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn frame_counts() {
        let spec = FrameSpec::default();
        assert_eq!(frame_count(1500, &spec).unwrap(), 148);
        assert_eq!(frame_count(2000, &spec).unwrap(), 198);
        assert_eq!(frame_count(25, &spec).unwrap(), 1);
        assert!(matches!(frame_count(24, &spec), Err(DspError::WindowTooShort { .. })));
    }

    #[test]
    fn invalid_frame_spec() {
        let spec = FrameSpec { frame_len_ms: 5, shift_ms: 10 };
        assert!(matches!(frame_count(100, &spec), Err(DspError::InvalidFrameSpec(_))));
        let spec = FrameSpec { frame_len_ms: 5, shift_ms: 0 };
        assert!(frame_count(100, &spec).is_err());
    }

    #[test]
    fn window_extraction() {
        let samples: Vec<f32> = (0..24000).map(|i| i as f32 / 24000.0).collect();
        let w = Waveform::new(samples.clone(), 8000).unwrap();
        let win = extract_window(&w, 2000, 2000).unwrap();
        assert_eq!(win.samples(), &samples[..16000]);

        let win = extract_window(&w, 500, 2000).unwrap();
        assert_eq!(win.samples().len(), 16000);
        assert!(win.samples()[..12000].iter().all(|&s| s == 0.0));
        assert_eq!(&win.samples()[12000..], &samples[..4000]);

        assert!(matches!(extract_window(&w, 3001, 2000), Err(DspError::AnchorBeyondSignal { .. })));
        assert!(extract_window(&w, 3000, 2000).is_ok());
    }

    #[test]
    fn waveform_validation() {
        assert!(matches!(Waveform::new(vec![0.0], 44100), Err(DspError::UnsupportedSampleRate(44100))));
        assert!(matches!(Waveform::new(vec![f32::NAN], 8000), Err(DspError::NonFinite)));
    }

    #[test]
    fn mfcc_shape() {
        let w = sine(300.0, 1500, 8000, 0.5);
        let m = mfcc(&w, &FrameSpec::default()).unwrap();
        assert_eq!((m.rows, m.cols()), (148, 13));
        let w = sine(300.0, 1500, 16000, 0.5);
        assert_eq!(mfcc(&w, &FrameSpec::default()).unwrap().rows, 148);
    }

    #[test]
    fn silence_gives_floor_features() {
        let w = Waveform::new(vec![0.0; 12000], 8000).unwrap();
        let m = mfcc(&w, &FrameSpec::default()).unwrap();
        let first = m.row(0).to_vec();
        assert!((0..m.rows).all(|r| m.row(r) == first.as_slice()));
        let expected_c0 = (MEL_FILTERS as f64).sqrt() * MEL_ENERGY_FLOOR.ln();
        assert!((first[0] as f64 - expected_c0).abs() < 1e-3);

        let p = prosodic(&w, &FrameSpec::default()).unwrap();
        for r in 0..p.rows {
            assert_eq!(p.row(r), &[0.0, LOUDNESS_FLOOR as f32, 0.0]);
        }
    }

    #[test]
    fn sine_pitch() {
        let w = sine(200.0, 1500, 8000, 0.3);
        let p = prosodic(&w, &FrameSpec::default()).unwrap();
        for r in 1..p.rows - 1 {
            let row = p.row(r);
            assert!((198.0..=202.0).contains(&row[0]), "frame {r}: {row:?}");
            assert!(row[2] >= 0.8);
        }
        let w = sine(230.0, 500, 16000, 0.3);
        let p = prosodic(&w, &FrameSpec::default()).unwrap();
        assert!((p.row(5)[0] - 230.0).abs() < 2.0, "{:?}", p.row(5));
    }

    #[test]
    fn too_short_signal() {
        let w = Waveform::new(vec![0.1; 100], 8000).unwrap();
        assert!(matches!(mfcc(&w, &FrameSpec::default()), Err(DspError::WindowTooShort { .. })));
        assert!(matches!(prosodic(&w, &FrameSpec::default()), Err(DspError::WindowTooShort { .. })));
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = sine(440.0, 100, 16000, 0.5);
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz(), 16000);
        assert_eq!(back.samples().len(), w.samples().len());
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn stereo_wav_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(DspError::UnsupportedWav(_))));
    }
}
