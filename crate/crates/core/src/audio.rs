//! Log mel-spectrogram features for the aural branch.
//!
//! Frames lie strictly inside the signal (no padding). Frame `t` covers
//! samples `[t * hop, t * hop + win)` and is weighted by a periodic Hann
//! window, centred inside an `n_fft` buffer when `win < n_fft`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MELS_MAGIC: &[u8; 4] = b"MELS";
pub const MELS_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Malformed(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a 16-bit PCM WAV file, averaging channels down to mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Malformed(format!(
                "{}: only 16-bit PCM is supported",
                path.display()
            )));
        }
        let channels = spec.channels as usize;
        let raw: Vec<i16> = reader.samples::<i16>().collect::<Result<_, _>>()?;
        let samples = raw
            .chunks_exact(channels)
            .map(|frame| {
                frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64
            })
            .collect();
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> Result<Self> {
        if target_rate == 0 {
            return Err(Error::contract("target rate must be positive"));
        }
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Self::new(self.samples.clone(), target_rate);
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).floor() as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Self::new(samples, target_rate)
    }

    /// Audio aligned with a window of `n_frames` video frames starting at
    /// `start_frame`, at `fps` frames per second. Clipped to the signal.
    pub fn segment_for_window(&self, start_frame: usize, n_frames: usize, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::contract("fps must be positive"));
        }
        let rate = self.sample_rate as f64;
        let begin = ((start_frame as f64 / fps) * rate).round() as usize;
        let end = (((start_frame + n_frames) as f64 / fps) * rate).round() as usize;
        let begin = begin.min(self.samples.len());
        let end = end.clamp(begin, self.samples.len());
        Self::new(self.samples[begin..end].to_vec(), self.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_length: 1024,
            hop_length: 256,
            n_fft: 1024,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if !(self.hop_length >= 1
            && self.hop_length <= self.win_length
            && self.win_length <= self.n_fft)
        {
            return Err(Error::config(
                "need 1 <= hop_length <= win_length <= n_fft",
            ));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::config("need 0 <= f_min < f_max <= sample_rate / 2"));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be at least 1"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames produced for `n_samples` samples.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.win_length).then(|| 1 + (n_samples - self.win_length) / self.hop_length)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `frames x n_mels`, log10 power.
    pub values: Array2<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time power spectrum, `frames x (n_fft / 2 + 1)`.
pub fn stft_power(w: &Waveform, cfg: &MelConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n_frames = cfg.n_frames(w.samples.len()).ok_or(Error::TooShort {
        len: w.samples.len(),
        need: cfg.win_length,
    })?;
    let n_freqs = cfg.n_freqs();
    let window = hann_window(cfg.win_length);
    let offset = (cfg.n_fft - cfg.win_length) / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);

    let mut out = Array2::zeros((n_frames, n_freqs));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        buf.fill(Complex::new(0.0, 0.0));
        let frame = &w.samples[t * cfg.hop_length..t * cfg.hop_length + cfg.win_length];
        for (slot, (&s, &wv)) in buf[offset..offset + cfg.win_length]
            .iter_mut()
            .zip(frame.iter().zip(&window))
        {
            *slot = Complex::new(s * wv, 0.0);
        }
        fft.process(&mut buf);
        for (dst, bin) in row.iter_mut().zip(&buf[..n_freqs]) {
            *dst = bin.norm_sqr();
        }
    }
    Ok(out)
}

/// Centre frequencies (Hz) of the `n_mels` filters: interior points of a
/// uniform grid of `n_mels + 2` points on the HTK mel scale.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Triangular HTK filterbank, `n_mels x (n_fft / 2 + 1)`, each row scaled so
/// its peak is exactly 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n_freqs = cfg.n_freqs();
    let edges = mel_edges(cfg);
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;

    let mut fb = Array2::zeros((cfg.n_mels, n_freqs));
    for (m, mut row) in fb.rows_mut().into_iter().enumerate() {
        let (lower, center, upper) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, v) in row.iter_mut().enumerate() {
            let f = bin_hz(k);
            if f < cfg.f_min || f > cfg.f_max {
                continue;
            }
            let rising = (f - lower) / (center - lower);
            let falling = (upper - f) / (upper - center);
            *v = rising.min(falling).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::config(format!(
                "mel filter {m} ({lower:.1}-{upper:.1} Hz) covers no FFT bin; \
                 reduce n_mels or increase n_fft"
            )));
        }
        row.mapv_inplace(|v| v / peak);
    }
    Ok(fb)
}

pub fn melspectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let power = stft_power(w, cfg)?;
    let fb = mel_filterbank(cfg)?;
    let mut values = power.dot(&fb.t());
    values.mapv_inplace(|v| (v + cfg.log_floor).log10());
    Ok(MelSpectrogram {
        values,
        config: cfg.clone(),
    })
}

/// Header of a MELS file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MelHeader {
    pub version: u32,
    pub frames: u32,
    pub n_mels: u32,
    pub sample_rate: u32,
    pub hop: u32,
}

/// Writes `magic, version, frames, n_mels, sample_rate, hop` as little-endian
/// u32, then the values row-major as little-endian f32.
pub fn write_mels<W: Write>(mut out: W, mel: &MelSpectrogram) -> std::io::Result<()> {
    out.write_all(MELS_MAGIC)?;
    for v in [
        MELS_VERSION,
        mel.n_frames() as u32,
        mel.n_mels() as u32,
        mel.config.sample_rate,
        mel.config.hop_length as u32,
    ] {
        out.write_u32::<LittleEndian>(v)?;
    }
    for &v in mel.values.iter() {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn read_mels<R: Read>(mut input: R) -> Result<(MelHeader, Array2<f32>)> {
    let mut magic = [0u8; 4];
    let bad = |e: std::io::Error| Error::Malformed(format!("MELS stream: {e}"));
    input.read_exact(&mut magic).map_err(bad)?;
    if &magic != MELS_MAGIC {
        return Err(Error::Malformed("missing MELS magic".into()));
    }
    let mut fields = [0u32; 5];
    for f in &mut fields {
        *f = input.read_u32::<LittleEndian>().map_err(bad)?;
    }
    let header = MelHeader {
        version: fields[0],
        frames: fields[1],
        n_mels: fields[2],
        sample_rate: fields[3],
        hop: fields[4],
    };
    if header.version != MELS_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported MELS version {}",
            header.version
        )));
    }
    let n = header.frames as usize * header.n_mels as usize;
    let mut values = vec![0f32; n];
    input
        .read_f32_into::<LittleEndian>(&mut values)
        .map_err(bad)?;
    let arr = Array2::from_shape_vec((header.frames as usize, header.n_mels as usize), values)
        .map_err(|e| Error::Malformed(e.to_string()))?;
    Ok((header, arr))
}

pub fn save_mels(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_mels(&mut w, mel).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_mels(path: &Path) -> Result<(MelHeader, Array2<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_mels(std::io::BufReader::new(file))
}

/// CSV with a `frame,mel_0,...` header, one row per frame.
pub fn write_mels_csv<W: Write>(out: W, mel: &MelSpectrogram) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["frame".to_string()];
    header.extend((0..mel.n_mels()).map(|m| format!("mel_{m}")));
    w.write_record(&header)?;
    for (t, row) in mel.values.rows().into_iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Grayscale rendering: low mel bands at the bottom, min-max normalised.
pub fn render_png(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let (frames, n_mels) = mel.values.dim();
    let lo = mel.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mel.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = Vec::with_capacity(frames * n_mels);
    for m in (0..n_mels).rev() {
        let band: ArrayView1<f64> = mel.values.column(m);
        pixels.extend(band.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8));
    }
    image::save_buffer(
        path,
        &pixels,
        frames as u32,
        n_mels as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, n: usize, rate: u32, amp: f64) -> Waveform {
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    /// Direct O(n^2) DFT power of one windowed frame; independent of rustfft.
    fn dft_power_oracle(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
        v.into_iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            })
            .0
    }

    #[test]
    fn stft_shape_and_silence() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 16384], 16000).unwrap();
        let p = stft_power(&w, &cfg).unwrap();
        assert_eq!(p.dim(), (61, 513));
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_too_short() {
        let w = Waveform::new(vec![0.0; 1023], 16000).unwrap();
        assert!(matches!(
            stft_power(&w, &MelConfig::default()),
            Err(Error::TooShort { len: 1023, need: 1024 })
        ));
    }

    #[test]
    fn stft_matches_direct_dft() {
        let cfg = MelConfig::default();
        let w = sine(1000.0, 4096, 16000, 1.0);
        let p = stft_power(&w, &cfg).unwrap();
        let win = hann_window(cfg.win_length);
        for t in [0usize, 5, 12] {
            let frame: Vec<f64> = w.samples[t * 256..t * 256 + 1024]
                .iter()
                .zip(&win)
                .map(|(s, h)| s * h)
                .collect();
            let oracle = dft_power_oracle(&frame);
            for (a, b) in p.row(t).iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
            }
            assert_eq!(argmax(oracle.iter().cloned()), 64);
            assert_eq!(argmax(p.row(t).iter().cloned()), 64);
        }
    }

    #[test]
    fn filterbank_contract() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.dim(), (64, 513));
        for row in fb.rows() {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(max, 1.0);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // bins above f_max are zero
        let restricted = MelConfig {
            f_min: 300.0,
            f_max: 4000.0,
            n_mels: 20,
            ..cfg
        };
        let fb = mel_filterbank(&restricted).unwrap();
        for (k, col) in fb.columns().into_iter().enumerate() {
            let f = k as f64 * 16000.0 / 1024.0;
            if !(300.0..=4000.0).contains(&f) {
                assert!(col.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn filter_centres_invert_the_mel_scale() {
        let cfg = MelConfig::default();
        let centres = mel_center_frequencies(&cfg);
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        for (i, c) in centres.iter().enumerate() {
            // uniform grid point in mel, inverted by hand
            let m = top * (i + 1) as f64 / 65.0;
            let hz = 700.0 * (10f64.powf(m / 2595.0) - 1.0);
            assert!((c - hz).abs() < 1e-9);
        }
        assert!(centres.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn too_many_mels_is_config_error() {
        let cfg = MelConfig {
            n_fft: 64,
            win_length: 64,
            hop_length: 32,
            n_mels: 128,
            ..MelConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn silence_hits_floor() {
        let w = Waveform::new(vec![0.0; 16384], 16000).unwrap();
        let mel = melspectrogram(&w, &MelConfig::default()).unwrap();
        assert_eq!(mel.values.dim(), (61, 64));
        assert!(mel.values.iter().all(|&v| v == -10.0));
    }

    #[test]
    fn sine_peaks_in_nearest_band() {
        let cfg = MelConfig::default();
        let mel = melspectrogram(&sine(1000.0, 16384, 16000, 1.0), &cfg).unwrap();
        let centres = mel_center_frequencies(&cfg);
        let nearest = argmax(centres.iter().map(|c| -(c - 1000.0).abs()));
        for row in mel.values.rows() {
            assert_eq!(argmax(row.iter().cloned()), nearest);
        }
    }

    #[test]
    fn hop_shift_moves_one_frame() {
        let cfg = MelConfig::default();
        let base = sine(440.0, 8192, 16000, 0.3);
        let mut shifted = vec![0.5; cfg.hop_length];
        shifted.extend_from_slice(&base.samples);
        let shifted = Waveform::new(shifted, 16000).unwrap();
        let a = melspectrogram(&base, &cfg).unwrap();
        let b = melspectrogram(&shifted, &cfg).unwrap();
        for t in 0..a.n_frames() {
            assert_eq!(a.values.row(t), b.values.row(t + 1));
        }
    }

    #[test]
    fn louder_never_decreases() {
        let cfg = MelConfig::default();
        let quiet = sine(700.0, 4096, 16000, 0.2);
        let loud = Waveform::new(quiet.samples.iter().map(|s| s * 3.0).collect(), 16000).unwrap();
        let a = melspectrogram(&quiet, &cfg).unwrap();
        let b = melspectrogram(&loud, &cfg).unwrap();
        assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| y >= x));
    }

    #[test]
    fn mels_binary_roundtrip() {
        let mel = melspectrogram(&sine(300.0, 4096, 16000, 0.5), &MelConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_mels(&mut buf, &mel).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 4 * mel.values.len());
        assert_eq!(&buf[..4], b"MELS");
        let (header, values) = read_mels(&buf[..]).unwrap();
        assert_eq!(header.frames as usize, mel.n_frames());
        assert_eq!(header.n_mels, 64);
        assert_eq!(header.sample_rate, 16000);
        assert_eq!(header.hop, 256);
        assert!(values
            .iter()
            .zip(mel.values.iter())
            .all(|(&a, &b)| a == b as f32));
    }

    #[test]
    fn resample_and_segment() {
        let w = Waveform::new((0..48).map(|i| i as f64 / 48.0).collect(), 48_000).unwrap();
        let r = w.resample(16_000).unwrap();
        assert_eq!(r.samples.len(), 16);
        assert!((r.samples[1] - 3.0 / 48.0).abs() < 1e-12);

        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let seg = w.segment_for_window(0, 15, 30.0).unwrap();
        assert_eq!(seg.samples.len(), 8000);
        let tail = w.segment_for_window(15, 30, 30.0).unwrap();
        assert_eq!(tail.samples.len(), 8000);
    }
}
