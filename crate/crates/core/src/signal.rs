//! Framed Hann-windowed DFT, logarithmic frequency binning and WAV input.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::io::{read_file, write_csv_matrix, write_file, BinReader, BinWriter, IoError};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sample rate must be positive")]
    Rate,
    #[error("frame of {frame} samples (hop {hop}) is unusable")]
    Frame { frame: usize, hop: usize },
    #[error("{got} samples is shorter than one frame of {frame}")]
    TooShort { got: usize, frame: usize },
    #[error("cannot split {n_f} frequencies into {n_b} bins")]
    Bins { n_f: usize, n_b: usize },
    #[error("spectrogram shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav: {channels} channel(s), {bits}-bit {format}; only 16-bit PCM mono is accepted")]
    WavFormat {
        channels: u16,
        bits: u16,
        format: &'static str,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Complex matrix with rows indexing frequency bins and columns time frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub data: DMatrix<Complex64>,
    pub sample_rate: u32,
    pub frame_ms: u32,
    pub hop_ms: u32,
    /// `n_bins + 1` ascending boundaries into the full-resolution rows.
    pub bin_edges: Vec<usize>,
    /// Bisection exponent; 0 for an unbinned spectrogram.
    pub log_step: f64,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn bin_sizes(&self) -> Vec<usize> {
        self.bin_edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        (0..self.n_bins())
            .map(|r| (0..self.n_frames()).map(|c| self.data[(r, c)].norm()).collect())
            .collect()
    }
}

pub fn frame_lengths(rate: u32, frame_ms: u32, hop_ms: u32) -> Result<(usize, usize), SignalError> {
    if rate == 0 {
        return Err(SignalError::Rate);
    }
    let frame = (rate as u64 * frame_ms as u64 / 1000) as usize;
    let hop = (rate as u64 * hop_ms as u64 / 1000) as usize;
    if frame < 2 || hop == 0 {
        return Err(SignalError::Frame { frame, hop });
    }
    Ok((frame, hop))
}

/// Symmetric Hann window, `0.5 (1 - cos(2 pi k / (L - 1)))`.
pub fn hann(len: usize) -> Vec<f64> {
    let d = (len - 1) as f64;
    (0..len).map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / d).cos())).collect()
}

/// Unnormalized forward DFT of every window. Returns a `(L/2 + 1) x frames`
/// matrix.
pub fn stft(samples: &[f64], rate: u32, frame_ms: u32, hop_ms: u32) -> Result<DMatrix<Complex64>, SignalError> {
    let (len, hop) = frame_lengths(rate, frame_ms, hop_ms)?;
    if samples.len() < len {
        return Err(SignalError::TooShort {
            got: samples.len(),
            frame: len,
        });
    }
    let frames = 1 + (samples.len() - len) / hop;
    let window = hann(len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
    let keep = len / 2 + 1;
    let cols: Vec<Vec<Complex64>> = (0..frames)
        .into_par_iter()
        .map(|t| {
            let mut buf: Vec<Complex64> = samples[t * hop..t * hop + len]
                .iter()
                .zip(&window)
                .map(|(&x, &w)| Complex64::new(x * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(keep);
            buf
        })
        .collect();
    Ok(DMatrix::from_fn(keep, frames, |r, c| cols[c][r]))
}

fn log_total(a: f64, n_b: usize) -> f64 {
    (1..=n_b).map(|j| (j as f64 * a).exp().floor()).sum()
}

/// Bin sizes `floor(e^{j a})` for the largest `a` whose total does not exceed
/// `n_f`; the remainder goes to the last bin.
pub fn log_bin_sizes(n_f: usize, n_b: usize) -> Result<(Vec<usize>, f64), SignalError> {
    if n_b == 0 || n_b > n_f {
        return Err(SignalError::Bins { n_f, n_b });
    }
    let target = n_f as f64;
    let (mut lo, mut hi) = (0.0f64, ((n_f + 2) as f64).ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if log_total(mid, n_b) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut sizes: Vec<usize> = (1..=n_b).map(|j| (j as f64 * lo).exp().floor() as usize).collect();
    // floor(e^{ja}) >= 1 for a >= 0, so the total never exceeds n_f here
    let total: usize = sizes.iter().sum();
    *sizes.last_mut().expect("n_b > 0") += n_f - total;
    Ok((sizes, lo))
}

/// Sum the full-resolution rows into logarithmic bins.
pub fn log_bin(full: &DMatrix<Complex64>, n_b: usize, rate: u32, frame_ms: u32, hop_ms: u32) -> Result<Spectrogram, SignalError> {
    let n_f = full.nrows();
    let (sizes, a) = log_bin_sizes(n_f, n_b)?;
    let mut edges = Vec::with_capacity(n_b + 1);
    edges.push(0);
    for s in &sizes {
        edges.push(edges.last().unwrap() + s);
    }
    let data = DMatrix::from_fn(n_b, full.ncols(), |b, t| {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in edges[b]..edges[b + 1] {
            acc += full[(k, t)];
        }
        acc
    });
    Ok(Spectrogram {
        data,
        sample_rate: rate,
        frame_ms,
        hop_ms,
        bin_edges: edges,
        log_step: a,
    })
}

pub fn unbin_magnitude_mse(a: &Spectrogram, b: &Spectrogram) -> Result<f64, SignalError> {
    if a.data.shape() != b.data.shape() || a.bin_edges != b.bin_edges {
        return Err(SignalError::Shape(a.data.shape(), b.data.shape()));
    }
    let n = a.data.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / n as f64)
}

/// 16-bit PCM mono WAV as samples in [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), SignalError> {
    let bytes = read_file(path)?;
    let mut r = hound::WavReader::new(std::io::Cursor::new(bytes))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(SignalError::WavFormat {
            channels: spec.channels,
            bits: spec.bits_per_sample,
            format: match spec.sample_format {
                hound::SampleFormat::Int => "integer",
                hound::SampleFormat::Float => "float",
            },
        });
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f64], rate: u32) -> Result<(), SignalError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cur = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cur, spec)?;
        for &s in samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
    }
    write_file(path, &cur.into_inner())?;
    Ok(())
}

const SPEC_MAGIC: &[u8; 4] = b"MFSG";

pub fn encode_spectrogram(s: &Spectrogram) -> Vec<u8> {
    let mut w = BinWriter::new(SPEC_MAGIC, 1);
    w.u32(s.sample_rate);
    w.u32(s.frame_ms);
    w.u32(s.hop_ms);
    w.f64(s.log_step);
    w.u32(s.n_bins() as u32);
    w.u32(s.n_frames() as u32);
    for &e in &s.bin_edges {
        w.u32(e as u32);
    }
    for c in s.data.iter() {
        w.f64(c.re);
        w.f64(c.im);
    }
    w.finish()
}

pub fn decode_spectrogram(bytes: &[u8]) -> Result<Spectrogram, IoError> {
    let (mut r, _) = BinReader::open(bytes, SPEC_MAGIC, 1)?;
    let sample_rate = r.u32()?;
    let frame_ms = r.u32()?;
    let hop_ms = r.u32()?;
    let log_step = r.f64()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let bin_edges = (0..=rows).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
    if bin_edges.windows(2).any(|w| w[1] <= w[0]) || bin_edges[0] != 0 {
        return Err(IoError::Invalid("bin edges not strictly ascending from 0".into()));
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| IoError::Invalid("spectrogram size overflow".into()))?;
    let v = (0..count)
        .map(|_| Ok(Complex64::new(r.f64()?, r.f64()?)))
        .collect::<Result<Vec<_>, IoError>>()?;
    r.finish()?;
    Ok(Spectrogram {
        data: DMatrix::from_vec(rows, cols, v),
        sample_rate,
        frame_ms,
        hop_ms,
        bin_edges,
        log_step,
    })
}

pub fn save_spectrogram(path: &Path, s: &Spectrogram) -> Result<(), IoError> {
    write_file(path, &encode_spectrogram(s))
}

pub fn load_spectrogram(path: &Path) -> Result<Spectrogram, IoError> {
    decode_spectrogram(&read_file(path)?)
}

/// Bins-by-frames magnitude grid for plotting.
pub fn export_magnitude_csv(path: &Path, s: &Spectrogram) -> Result<(), IoError> {
    write_csv_matrix(path, &s.magnitudes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn shape_at_forty_khz() {
        let x = vec![0.0; 40000];
        let m = stft(&x, 40000, 50, 25).unwrap();
        assert_eq!(m.nrows(), 1001);
        assert_eq!(m.ncols(), 1 + (40000 - 2000) / 1000);
        assert!(m.iter().all(|c| *c == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn sine_peaks_at_its_row() {
        let x: Vec<f64> = (0..12000).map(|t| (2.0 * PI * 1000.0 * t as f64 / 40000.0).sin()).collect();
        let m = stft(&x, 40000, 50, 25).unwrap();
        // bin spacing is rate / L = 20 Hz
        for c in 0..m.ncols() {
            let peak = (0..m.nrows()).max_by(|&a, &b| m[(a, c)].norm().total_cmp(&m[(b, c)].norm())).unwrap();
            assert_eq!(peak, 50);
        }
    }

    #[test]
    fn matches_naive_dft_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // rate 1000, 10 ms frame: L = 10
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = stft(&x, 1000, 10, 5).unwrap();
        let w = hann(10);
        for c in 0..m.ncols() {
            let frame: Vec<f64> = x[c * 5..c * 5 + 10].iter().zip(&w).map(|(a, b)| a * b).collect();
            let full = naive_dft(&frame);
            for r in 0..6 {
                assert!((m[(r, c)] - full[r]).norm() < 1e-12);
            }
            let energy: f64 = frame.iter().map(|v| v * v).sum();
            let spec: f64 = full.iter().map(|z| z.norm_sqr()).sum::<f64>() / 10.0;
            assert!((spec - energy).abs() <= 1e-6 * energy.max(1e-300));
        }
    }

    #[test]
    fn golden_four_sample_frame() {
        // Hann(4) = [0, 0.75, 0.75, 0]; frame [1, 2, 3, 4] -> [0, 1.5, 2.25, 0]
        let m = stft(&[1.0, 2.0, 3.0, 4.0], 1000, 4, 4).unwrap();
        let expect = [Complex64::new(3.75, 0.0), Complex64::new(-2.25, -1.5), Complex64::new(0.75, 0.0)];
        for (r, e) in expect.iter().enumerate() {
            assert!((m[(r, 0)] - e).norm() < 1e-12, "row {r}: {}", m[(r, 0)]);
        }
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(matches!(stft(&[0.0; 100], 40000, 50, 25), Err(SignalError::TooShort { .. })));
        assert!(matches!(stft(&[0.0; 100], 0, 50, 25), Err(SignalError::Rate)));
    }

    #[test]
    fn bins_partition_and_grow() {
        let (sizes, a) = log_bin_sizes(1001, 400).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 1001);
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert!(a > 0.0);
        let (sizes, _) = log_bin_sizes(37, 37).unwrap();
        assert!(sizes.iter().all(|&s| s == 1));
        assert!(log_bin_sizes(3, 4).is_err());
    }

    #[test]
    fn bisection_is_maximal() {
        for (n_f, n_b) in [(1001, 400), (50, 7), (10, 1), (200, 30)] {
            let (_, a) = log_bin_sizes(n_f, n_b).unwrap();
            assert!(log_total(a, n_b) <= n_f as f64);
            // any step up past the boundary overshoots or stays put at a plateau end
            let next = log_total(a * (1.0 + 1e-9) + 1e-12, n_b);
            assert!(next > n_f as f64 || log_total(a, n_b) == n_f as f64, "{n_f} {n_b}");
        }
    }

    #[test]
    fn binning_conserves_complex_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let full = DMatrix::from_fn(1001, 3, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let s = log_bin(&full, 400, 40000, 50, 25).unwrap();
        assert_eq!(s.bin_edges.len(), 401);
        assert_eq!(*s.bin_edges.last().unwrap(), 1001);
        for t in 0..3 {
            // same ascending order as the binning
            let mut direct = Complex64::new(0.0, 0.0);
            let mut binned = Complex64::new(0.0, 0.0);
            for k in 0..1001 {
                direct += full[(k, t)];
            }
            for b in 0..400 {
                binned += s.data[(b, t)];
            }
            assert!((direct - binned).norm() < 1e-12);
            for b in 0..400 {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in s.bin_edges[b]..s.bin_edges[b + 1] {
                    acc += full[(k, t)];
                }
                assert_eq!(acc, s.data[(b, t)]);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = DMatrix::from_fn(20, 4, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let a = log_bin(&full, 5, 1000, 10, 5).unwrap();
        assert_eq!(unbin_magnitude_mse(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data[(2, 1)] += Complex64::new(0.3, 0.4);
        assert!((unbin_magnitude_mse(&a, &b).unwrap() - 0.25 / 20.0).abs() < 1e-15);
        let c = log_bin(&full.map(|z| z * 0.5), 5, 1000, 10, 5).unwrap();
        let mut naive = 0.0;
        for r in 0..5 {
            for t in 0..4 {
                naive += (a.data[(r, t)] - c.data[(r, t)]).norm_sqr();
            }
        }
        assert!((unbin_magnitude_mse(&a, &c).unwrap() - naive / 20.0).abs() < 1e-12);
        let short = log_bin(&full, 4, 1000, 10, 5).unwrap();
        assert!(unbin_magnitude_mse(&a, &short).is_err());
    }

    #[test]
    fn spectrogram_file_round_trip_and_wav() {
        let dir = tempfile::tempdir().unwrap();
        let x: Vec<f64> = (0..4000).map(|t| 0.5 * (t as f64 * 0.05).sin()).collect();
        let wav = dir.path().join("a.wav");
        write_wav(&wav, &x, 8000).unwrap();
        let (y, rate) = read_wav(&wav).unwrap();
        assert_eq!(rate, 8000);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-4));
        let s = log_bin(&stft(&y, rate, 50, 25).unwrap(), 40, rate, 50, 25).unwrap();
        let p = dir.path().join("s.mfsg");
        save_spectrogram(&p, &s).unwrap();
        assert_eq!(load_spectrogram(&p).unwrap(), s);
        assert!(stft(&y, rate, 50, 25).unwrap() == stft(&y, rate, 50, 25).unwrap());

        let stereo = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&stereo).unwrap_err();
        assert!(matches!(err, SignalError::WavFormat { channels: 2, .. }));
        assert!(err.to_string().contains("mono"));
    }
}
