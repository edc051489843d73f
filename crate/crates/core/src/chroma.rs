//! Loudness-based chromagrams.
//!
//! The pipeline per band is: constant-Q magnitudes, sound power level in dB,
//! A-weighting of every bin at its centre frequency, additive folding of the
//! weighted levels onto the 12 pitch classes, and per-frame min-max
//! normalisation. Because the last step is affine invariant, neither the
//! reference power nor the overall gain of the audio affects the result.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::audio_io::{resample, AudioBuffer, AudioError, ANALYSIS_SAMPLE_RATE};

pub const PITCH_CLASSES: usize = 12;

#[derive(Debug, Error)]
pub enum ChromaError {
    #[error("analysis band reaches {freq:.1} Hz, above the Nyquist frequency {nyquist:.1} Hz")]
    AboveNyquist { freq: f64, nyquist: f64 },
    #[error("invalid chroma configuration: {0}")]
    InvalidConfig(String),
    #[error("A-weighting is undefined for frequency {0} Hz")]
    NonPositiveFrequency(f64),
    #[error("beat times must be strictly increasing (beat {index} at {time} s)")]
    NonMonotoneBeats { index: usize, time: f64 },
    #[error("chromagram file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Which register a chromagram describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    Bass,
    Treble,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Bass => "bass",
            Band::Treble => "treble",
        })
    }
}

impl FromStr for Band {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bass" => Ok(Band::Bass),
            "treble" => Ok(Band::Treble),
            other => Err(format!("unknown band {other:?}")),
        }
    }
}

/// Tapering window applied to each constant-Q analysis frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hamming,
    Hann,
}

impl Window {
    fn coefficients(self, len: usize) -> Vec<f64> {
        if len == 1 {
            return vec![1.0];
        }
        let denom = (len - 1) as f64;
        (0..len)
            .map(|n| {
                let c = (2.0 * PI * n as f64 / denom).cos();
                match self {
                    Window::Hamming => 0.54 - 0.46 * c,
                    Window::Hann => 0.5 - 0.5 * c,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChromaConfig {
    pub band: Band,
    /// Constant-Q resolution factor.
    pub q_factor: f64,
    /// Samples between frame centres.
    pub hop: usize,
    /// Reference frequency of A4 in Hz.
    pub f_ref: f64,
    /// Lowest analysed MIDI note (inclusive).
    pub band_low: u8,
    /// Highest analysed MIDI note (inclusive).
    pub band_high: u8,
    pub bins_per_semitone: usize,
    /// Lower clamp of the sound power level, dB.
    pub spl_floor: f64,
    pub window: Window,
}

impl ChromaConfig {
    /// A3 (220 Hz) to G#6 (1661.2 Hz).
    pub fn treble() -> Self {
        Self {
            band: Band::Treble,
            band_low: 57,
            band_high: 92,
            ..Self::bass()
        }
    }

    /// A1 (55 Hz) to G#3 (207.65 Hz).
    pub fn bass() -> Self {
        Self {
            band: Band::Bass,
            q_factor: 17.0,
            hop: 1024,
            f_ref: 440.0,
            band_low: 33,
            band_high: 56,
            bins_per_semitone: 1,
            spl_floor: -120.0,
            window: Window::Hamming,
        }
    }

    pub fn for_band(band: Band) -> Self {
        match band {
            Band::Bass => Self::bass(),
            Band::Treble => Self::treble(),
        }
    }

    /// Same configuration with `f_ref` detuned by `cents` from 440 Hz.
    pub fn tuned(&self, cents: f64) -> Self {
        Self {
            f_ref: 440.0 * 2f64.powf(cents / 1200.0),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), ChromaError> {
        let bad = |m: &str| Err(ChromaError::InvalidConfig(m.to_string()));
        if self.band_low >= self.band_high {
            return bad("band_low must be below band_high");
        }
        if self.bins_per_semitone == 0 {
            return bad("bins_per_semitone must be positive");
        }
        if !(self.q_factor > 0.0) || !(self.f_ref > 0.0) || self.hop == 0 {
            return bad("q_factor, f_ref and hop must be positive");
        }
        Ok(())
    }

    /// Centre frequencies of all analysis bins, strictly increasing.
    pub fn frequencies(&self) -> Vec<f64> {
        let b = self.bins_per_semitone;
        let centre = (b as f64 - 1.0) / 2.0;
        (self.band_low..=self.band_high)
            .flat_map(|m| {
                (0..b).map(move |j| {
                    let semis = m as f64 - 69.0 + (j as f64 - centre) / b as f64;
                    self.f_ref * 2f64.powf(semis / 12.0)
                })
            })
            .collect()
    }
}

/// Per-bin, per-frame spectral values: magnitudes, or levels in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMatrix {
    /// `values[s][t]` for bin `s` and frame `t`.
    pub values: Vec<Vec<f64>>,
    pub freqs: Vec<f64>,
    /// Frame centre times in seconds.
    pub frame_times: Vec<f64>,
}

impl SpectralMatrix {
    pub fn n_bins(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frame_times.len()
    }

    fn map(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        Self {
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(s, row)| row.iter().map(|&v| f(s, v)).collect())
                .collect(),
            freqs: self.freqs.clone(),
            frame_times: self.frame_times.clone(),
        }
    }
}

/// Normalised 12-bin pitch-class profile per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Chromagram {
    pub band: Band,
    pub values: Vec<[f64; PITCH_CLASSES]>,
    /// Start and end time of each frame in seconds.
    pub times: Vec<(f64, f64)>,
}

impl Chromagram {
    pub fn n_frames(&self) -> usize {
        self.values.len()
    }

    pub fn centre(&self, t: usize) -> f64 {
        let (a, b) = self.times[t];
        0.5 * (a + b)
    }

    /// Mean value of each pitch class over all frames.
    pub fn mean_profile(&self) -> [f64; PITCH_CLASSES] {
        let mut acc = [0.0; PITCH_CLASSES];
        for col in &self.values {
            for (a, v) in acc.iter_mut().zip(col) {
                *a += v;
            }
        }
        let n = self.values.len().max(1) as f64;
        acc.map(|a| a / n)
    }
}

struct CqKernel {
    len: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

fn build_kernels(freqs: &[f64], q: f64, sr: f64, window: Window) -> Vec<CqKernel> {
    freqs
        .iter()
        .map(|&f| {
            let len = ((q * sr / f).round() as usize).max(1);
            let w = window.coefficients(len);
            let norm = 1.0 / len as f64;
            let (re, im) = w
                .iter()
                .enumerate()
                .map(|(n, wn)| {
                    let ph = -2.0 * PI * f * n as f64 / sr;
                    (wn * ph.cos() * norm, wn * ph.sin() * norm)
                })
                .unzip();
            CqKernel { len, re, im }
        })
        .collect()
}

fn frame_count(n_samples: usize, hop: usize) -> usize {
    if n_samples == 0 {
        0
    } else {
        (n_samples - 1) / hop + 1
    }
}

fn cq_magnitude(x: &[f64], centre: usize, k: &CqKernel) -> f64 {
    let start = centre as i64 - (k.len / 2) as i64;
    let lo = (-start).max(0) as usize;
    let hi = ((x.len() as i64 - start).max(0) as usize).min(k.len);
    let (mut re, mut im) = (0.0, 0.0);
    for n in lo..hi {
        let v = x[(start + n as i64) as usize];
        re += v * k.re[n];
        im += v * k.im[n];
    }
    (re * re + im * im).sqrt()
}

/// Constant-Q magnitude spectrum. Bin `s` uses a window of
/// `L_s = round(Q * SR / f_s)` samples centred on the frame, taps outside
/// the signal are zero, and the inner product is normalised by `L_s`.
pub fn constant_q(buf: &AudioBuffer, cfg: &ChromaConfig) -> Result<SpectralMatrix, ChromaError> {
    cfg.validate()?;
    let sr = buf.sample_rate as f64;
    let freqs = cfg.frequencies();
    let top = *freqs.last().expect("band has at least one bin");
    if top >= sr / 2.0 {
        return Err(ChromaError::AboveNyquist {
            freq: top,
            nyquist: sr / 2.0,
        });
    }
    let kernels = build_kernels(&freqs, cfg.q_factor, sr, cfg.window);
    let n_frames = frame_count(buf.len(), cfg.hop);
    let columns: Vec<Vec<f64>> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            kernels
                .iter()
                .map(|k| cq_magnitude(&buf.samples, t * cfg.hop, k))
                .collect()
        })
        .collect();
    let values = (0..freqs.len())
        .map(|s| columns.iter().map(|c| c[s]).collect())
        .collect();
    Ok(SpectralMatrix {
        values,
        freqs,
        frame_times: (0..n_frames).map(|t| (t * cfg.hop) as f64 / sr).collect(),
    })
}

/// Sound power level `10 log10(|X|^2 / p_ref)`, clamped below at `floor` dB.
pub fn spl(mag: &SpectralMatrix, p_ref: f64, floor: f64) -> SpectralMatrix {
    mag.map(|_, m| (10.0 * (m * m / p_ref).log10()).max(floor))
}

/// A-weighting gain in dB, calibrated so that 1 kHz sits at about 0 dB.
pub fn a_weighting(f: f64) -> Result<f64, ChromaError> {
    if !(f > 0.0) {
        return Err(ChromaError::NonPositiveFrequency(f));
    }
    let f2 = f * f;
    let ra = 12200f64.powi(2) * f2 * f2
        / ((f2 + 20.6f64.powi(2))
            * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
            * (f2 + 12200f64.powi(2)));
    Ok(2.0 + 20.0 * ra.log10())
}

/// Adds the A-weighting of each bin's centre frequency to its levels.
pub fn apply_a_weighting(levels: &SpectralMatrix) -> SpectralMatrix {
    let gains: Vec<f64> = levels
        .freqs
        .iter()
        .map(|&f| a_weighting(f).expect("bin frequencies are positive"))
        .collect();
    levels.map(|s, v| v + gains[s])
}

/// Pitch class (0 = C, 9 = A) of the equal-tempered note nearest to `f`.
pub fn pitch_class_index(f: f64, f_a: f64) -> usize {
    let midi = (12.0 * (f / f_a).log2() + 0.5).floor() as i64 + 69;
    midi.rem_euclid(12) as usize
}

/// Min-max normalises one folded column; a flat column maps to zeros.
pub fn normalize_column(col: &[f64; PITCH_CLASSES]) -> [f64; PITCH_CLASSES] {
    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return [0.0; PITCH_CLASSES];
    }
    col.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Sums weighted levels of all bins sharing a pitch class, then normalises
/// each frame to [0, 1].
pub fn fold_and_normalize(weighted: &SpectralMatrix, cfg: &ChromaConfig) -> Chromagram {
    let classes: Vec<usize> = weighted
        .freqs
        .iter()
        .map(|&f| pitch_class_index(f, cfg.f_ref))
        .collect();
    let half = frame_spacing(&weighted.frame_times).unwrap_or(0.0) / 2.0;
    let values = (0..weighted.n_frames())
        .map(|t| {
            let mut col = [0.0; PITCH_CLASSES];
            for (s, &p) in classes.iter().enumerate() {
                col[p] += weighted.values[s][t];
            }
            normalize_column(&col)
        })
        .collect();
    let times = weighted
        .frame_times
        .iter()
        .map(|&c| (c - half, c + half))
        .collect();
    Chromagram {
        band: cfg.band,
        values,
        times,
    }
}

fn frame_spacing(times: &[f64]) -> Option<f64> {
    (times.len() >= 2).then(|| times[1] - times[0])
}

/// Full per-band pipeline at the configured `f_ref`. Frames whose every bin
/// sits at the SPL floor carry no pitch evidence and come out as zeros.
pub fn loudness_chromagram(
    buf: &AudioBuffer,
    cfg: &ChromaConfig,
    p_ref: f64,
) -> Result<Chromagram, ChromaError> {
    let mag = constant_q(buf, cfg)?;
    let levels = spl(&mag, p_ref, cfg.spl_floor);
    let mut chroma = fold_and_normalize(&apply_a_weighting(&levels), cfg);
    if chroma.n_frames() == 1 {
        let half = 0.5 * cfg.hop as f64 / buf.sample_rate as f64;
        chroma.times[0] = (-half, half);
    }
    for (t, col) in chroma.values.iter_mut().enumerate() {
        if levels.values.iter().all(|row| row[t] <= cfg.spl_floor) {
            *col = [0.0; PITCH_CLASSES];
        }
    }
    Ok(chroma)
}

/// Candidate tuning offsets are searched on a 1-cent grid.
const TUNING_FRAMES: usize = 48;

/// Sum of the energies of bins that are not below either neighbour.
fn peak_energy(e: &[f64]) -> f64 {
    (0..e.len())
        .filter(|&s| (s == 0 || e[s] >= e[s - 1]) && (s + 1 == e.len() || e[s] > e[s + 1]))
        .map(|s| e[s])
        .sum()
}

/// Estimates the global tuning offset in cents, in [-50, 50): the detuning of
/// the semitone grid that maximises energy concentration, measured as the
/// total constant-Q energy of spectral peak bins. A peak bin responds most
/// when a partial sits exactly on its centre. Silent input returns 0.
pub fn estimate_tuning(buf: &AudioBuffer, cfg: &ChromaConfig) -> Result<f64, ChromaError> {
    cfg.validate()?;
    let sr = buf.sample_rate as f64;
    let n_frames = frame_count(buf.len(), cfg.hop);
    if n_frames == 0 {
        return Ok(0.0);
    }
    let picks: Vec<usize> = if n_frames <= TUNING_FRAMES {
        (0..n_frames).collect()
    } else {
        (0..TUNING_FRAMES)
            .map(|i| (i * (n_frames - 1)) / (TUNING_FRAMES - 1))
            .collect()
    };
    let energies: Vec<f64> = (-50..50)
        .into_par_iter()
        .map(|c| {
            let tuned = cfg.tuned(c as f64);
            let freqs = tuned.frequencies();
            if freqs.last().is_some_and(|&f| f >= sr / 2.0) {
                return 0.0;
            }
            let kernels = build_kernels(&freqs, cfg.q_factor, sr, cfg.window);
            picks
                .iter()
                .map(|&t| {
                    let e: Vec<f64> = kernels
                        .iter()
                        .map(|k| cq_magnitude(&buf.samples, t * cfg.hop, k).powi(2))
                        .collect();
                    peak_energy(&e)
                })
                .sum()
        })
        .collect();
    let (best, &peak) = energies
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, e)| {
            if *e > *acc.1 {
                (i, e)
            } else {
                acc
            }
        });
    if !(peak > 0.0) {
        return Ok(0.0);
    }
    // Shifting by 100 cents lands on the same grid one semitone over.
    let at = |i: i64| energies[i.rem_euclid(100) as usize];
    let (l, m, r) = (at(best as i64 - 1), peak, at(best as i64 + 1));
    let denom = l - 2.0 * m + r;
    let delta = if denom < 0.0 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let cents = best as f64 - 50.0 + delta;
    Ok((cents + 50.0).rem_euclid(100.0) - 50.0)
}

/// Evenly spaced pseudo-beats used when no beat annotation is available.
pub const FALLBACK_BEAT_PERIOD: f64 = 0.5;

/// Beat grid from 0 to `duration` every `period` seconds; the final
/// boundary is `duration` itself.
pub fn fixed_grid_beats(duration: f64, period: f64) -> Vec<f64> {
    let mut beats = Vec::new();
    let mut k = 0usize;
    loop {
        let t = k as f64 * period;
        if t >= duration - 1e-9 {
            break;
        }
        beats.push(t);
        k += 1;
    }
    beats.push(duration);
    beats
}

fn check_beats(beats: &[f64]) -> Result<(), ChromaError> {
    for (i, w) in beats.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(ChromaError::NonMonotoneBeats {
                index: i + 1,
                time: w[1],
            });
        }
    }
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of the frames whose centres fall in each beat interval
/// `[beat_i, beat_{i+1})`. An interval without frames repeats the previous
/// output frame; a leading empty interval takes the frame nearest its middle.
pub fn beat_sync_median(chroma: &Chromagram, beats: &[f64]) -> Result<Chromagram, ChromaError> {
    check_beats(beats)?;
    let centres: Vec<f64> = (0..chroma.n_frames()).map(|t| chroma.centre(t)).collect();
    let mut values: Vec<[f64; PITCH_CLASSES]> = Vec::new();
    let mut times = Vec::new();
    let mut first = 0usize;
    for w in beats.windows(2) {
        let (a, b) = (w[0], w[1]);
        while first < centres.len() && centres[first] < a {
            first += 1;
        }
        let mut last = first;
        while last < centres.len() && centres[last] < b {
            last += 1;
        }
        let col = if last > first {
            let mut out = [0.0; PITCH_CLASSES];
            let mut buf = Vec::with_capacity(last - first);
            for (p, o) in out.iter_mut().enumerate() {
                buf.clear();
                buf.extend(chroma.values[first..last].iter().map(|c| c[p]));
                *o = median(&mut buf);
            }
            out
        } else if let Some(prev) = values.last() {
            *prev
        } else if centres.is_empty() {
            [0.0; PITCH_CLASSES]
        } else {
            let mid = 0.5 * (a + b);
            let nearest = (0..centres.len())
                .min_by(|&i, &j| (centres[i] - mid).abs().total_cmp(&(centres[j] - mid).abs()))
                .unwrap();
            chroma.values[nearest]
        };
        values.push(col);
        times.push((a, b));
    }
    Ok(Chromagram {
        band: chroma.band,
        values,
        times,
    })
}

/// Bass and treble chromagrams of one song, already beat-synchronised.
#[derive(Debug, Clone, PartialEq)]
pub struct SongFeatures {
    pub treble: Chromagram,
    pub bass: Chromagram,
    pub tuning_cents: f64,
}

/// Settings for [`extract_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub treble: ChromaConfig,
    pub bass: ChromaConfig,
    pub estimate_tuning: bool,
    pub p_ref: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            treble: ChromaConfig::treble(),
            bass: ChromaConfig::bass(),
            estimate_tuning: true,
            p_ref: 1.0,
        }
    }
}

/// Resamples to the analysis rate, estimates tuning from the treble band,
/// computes both chromagrams at the tuned reference and aggregates them per
/// beat. Without beats a fixed 0.5 s grid is used.
pub fn extract_features(
    buf: &AudioBuffer,
    beats: Option<&[f64]>,
    cfg: &FeatureConfig,
) -> Result<SongFeatures, ChromaError> {
    let audio = resample(buf, ANALYSIS_SAMPLE_RATE)?;
    let tuning_cents = if cfg.estimate_tuning {
        estimate_tuning(&audio, &cfg.treble)?
    } else {
        0.0
    };
    let treble_cfg = cfg.treble.tuned(tuning_cents);
    let bass_cfg = cfg.bass.tuned(tuning_cents);
    let treble = loudness_chromagram(&audio, &treble_cfg, cfg.p_ref)?;
    let bass = loudness_chromagram(&audio, &bass_cfg, cfg.p_ref)?;
    let grid;
    let beats = match beats {
        Some(b) if b.len() >= 2 => b,
        _ => {
            grid = fixed_grid_beats(audio.duration(), FALLBACK_BEAT_PERIOD);
            &grid
        }
    };
    Ok(SongFeatures {
        treble: beat_sync_median(&treble, beats)?,
        bass: beat_sync_median(&bass, beats)?,
        tuning_cents,
    })
}

/// Writes `band n_frames` followed by `start end v0 .. v11` per frame.
pub fn write_chromagram(chroma: &Chromagram, path: impl AsRef<Path>) -> Result<(), ChromaError> {
    let mut out = format!("{} {}\n", chroma.band, chroma.n_frames());
    for ((a, b), col) in chroma.times.iter().zip(&chroma.values) {
        out.push_str(&format!("{a} {b}"));
        for v in col {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    crate::write_atomic(path.as_ref(), out.as_bytes())?;
    Ok(())
}

pub fn read_chromagram(path: impl AsRef<Path>) -> Result<Chromagram, ChromaError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_chromagram(&text).map_err(|detail| ChromaError::Format {
        path: path.display().to_string(),
        detail,
    })
}

pub fn parse_chromagram(text: &str) -> Result<Chromagram, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or("missing header")?;
    let mut head = header.split_whitespace();
    let band: Band = head.next().ok_or("missing band")?.parse()?;
    let n: usize = head
        .next()
        .ok_or("missing frame count")?
        .parse()
        .map_err(|e| format!("bad frame count: {e}"))?;
    let mut values = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for (i, line) in lines {
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(f64::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        if nums.len() != 2 + PITCH_CLASSES {
            return Err(format!("line {}: expected 14 fields, got {}", i + 1, nums.len()));
        }
        times.push((nums[0], nums[1]));
        let mut col = [0.0; PITCH_CLASSES];
        col.copy_from_slice(&nums[2..]);
        values.push(col);
    }
    if values.len() != n {
        return Err(format!("header announces {n} frames, found {}", values.len()));
    }
    Ok(Chromagram {
        band,
        values,
        times,
    })
}

/// One timestamp in seconds per line.
pub fn read_beats(path: impl AsRef<Path>) -> Result<Vec<f64>, ChromaError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let beats = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let first = l.split_whitespace().next().unwrap_or_default();
            first.parse::<f64>().map_err(|e| ChromaError::Format {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    check_beats(&beats)?;
    Ok(beats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::{synthesize_triads, TriadSegment};

    fn sine(f: f64, amp: f64, secs: f64) -> AudioBuffer {
        let sr = ANALYSIS_SAMPLE_RATE;
        let n = (secs * sr as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * f * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
    }

    /// Deterministic low-level noise so that no bin reaches the SPL floor.
    fn with_noise(buf: &AudioBuffer, level: f64) -> AudioBuffer {
        let mut state = 0x2545F4914F6CDD1Du64;
        let samples = buf
            .samples
            .iter()
            .map(|s| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                s + level * ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
            })
            .collect();
        AudioBuffer::new(samples, buf.sample_rate)
    }

    #[test]
    fn treble_and_bass_bands_match_expected_ranges() {
        let t = ChromaConfig::treble().frequencies();
        assert_eq!(t.len(), 36);
        assert!((t[0] - 220.0).abs() < 1e-9);
        assert!((t[35] - 1661.22).abs() < 0.01);
        let b = ChromaConfig::bass().frequencies();
        assert_eq!(b.len(), 24);
        assert!((b[0] - 55.0).abs() < 1e-9);
        assert!((b[23] - 207.65).abs() < 0.01);
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let cfg = ChromaConfig::treble();
        let freqs = cfg.frequencies();
        let s = 12; // A4
        assert!((freqs[s] - 440.0).abs() < 1e-9);
        let amp = 0.4;
        let mag = constant_q(&sine(440.0, amp, 1.0), &cfg).unwrap();
        let t = mag.n_frames() / 2;
        // Closed form: a * mean(w) / 2, and the Hamming mean tends to 0.54.
        let len = (cfg.q_factor * 11025.0 / 440.0).round() as usize;
        let wmean = Window::Hamming.coefficients(len).iter().sum::<f64>() / len as f64;
        let expected = amp * wmean / 2.0;
        let got = mag.values[s][t];
        assert!((got - expected).abs() / expected < 0.01, "{got} vs {expected}");
        for (s2, row) in mag.values.iter().enumerate() {
            if (s2 as i64 - s as i64).abs() >= 3 {
                let db = 20.0 * (row[t] / got).log10();
                assert!(db < -20.0, "bin {s2} only {db:.1} dB down");
            }
        }
    }

    #[test]
    fn silence_gives_zero_magnitudes_and_zero_chroma() {
        let buf = AudioBuffer::new(vec![0.0; 4000], ANALYSIS_SAMPLE_RATE);
        let mag = constant_q(&buf, &ChromaConfig::bass()).unwrap();
        assert!(mag.values.iter().flatten().all(|&v| v == 0.0));
        let chroma = loudness_chromagram(&buf, &ChromaConfig::bass(), 1.0).unwrap();
        assert!(chroma.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn magnitudes_are_linear_in_amplitude() {
        let cfg = ChromaConfig::treble();
        let a = constant_q(&sine(523.0, 0.2, 0.5), &cfg).unwrap();
        let b = constant_q(&sine(523.0, 0.4, 0.5), &cfg).unwrap();
        for (ra, rb) in a.values.iter().zip(&b.values) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((2.0 * x - y).abs() <= 1e-9 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn band_above_nyquist_is_rejected() {
        let buf = AudioBuffer::new(vec![0.0; 1000], 2000);
        assert!(matches!(
            constant_q(&buf, &ChromaConfig::treble()),
            Err(ChromaError::AboveNyquist { .. })
        ));
    }

    #[test]
    fn spl_examples() {
        let m = SpectralMatrix {
            values: vec![vec![1.0, 10.0, 0.0]],
            freqs: vec![100.0],
            frame_times: vec![0.0, 0.1, 0.2],
        };
        let l = spl(&m, 1.0, -120.0);
        assert_eq!(l.values[0], vec![0.0, 20.0, -120.0]);
        let l2 = spl(&m, 4.0, -120.0);
        assert!((l2.values[0][0] + 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn a_weighting_reference_points() {
        assert!(a_weighting(1000.0).unwrap().abs() < 0.1);
        assert!((a_weighting(100.0).unwrap() + 19.1).abs() < 0.1);
        assert!((a_weighting(50.0).unwrap() + 30.2).abs() < 0.1);
        assert!(a_weighting(0.0).is_err());
        assert!(a_weighting(-3.0).is_err());
    }

    #[test]
    fn a_weighting_shape() {
        let mut prev = a_weighting(20.0).unwrap();
        let mut f = 21.0;
        while f <= 1000.0 {
            let a = a_weighting(f).unwrap();
            assert!(a > prev, "not increasing at {f}");
            prev = a;
            f += 1.0;
        }
        let mut prev = a_weighting(6500.0).unwrap();
        let mut f = 6600.0;
        while f <= 20000.0 {
            let a = a_weighting(f).unwrap();
            assert!(a < prev, "not decreasing at {f}");
            prev = a;
            f += 100.0;
        }
    }

    #[test]
    fn pitch_class_examples() {
        assert_eq!(pitch_class_index(440.0, 440.0), 9);
        assert_eq!(pitch_class_index(880.0, 440.0), 9);
        assert_eq!(pitch_class_index(466.16, 440.0), 10);
        assert_eq!(pitch_class_index(261.63, 440.0), 0);
        assert_eq!(pitch_class_index(55.0, 440.0), 9);
        // quarter-tone boundary rounds up
        assert_eq!(pitch_class_index(440.0 * 2f64.powf(0.51 / 12.0), 440.0), 10);
    }

    #[test]
    fn normalisation_examples() {
        assert_eq!(normalize_column(&[3.0; 12]), [0.0; 12]);
        let mut col = [6.0; 12];
        col[0] = 0.0;
        col[2] = 12.0;
        let n = normalize_column(&col);
        assert_eq!(&n[..3], &[0.0, 0.5, 1.0]);
        let shifted = col.map(|v| v - 37.5);
        assert_eq!(normalize_column(&shifted), n);
    }

    #[test]
    fn fold_sums_bins_per_pitch_class() {
        let cfg = ChromaConfig::bass();
        let freqs = cfg.frequencies();
        let values = freqs
            .iter()
            .enumerate()
            .map(|(s, _)| vec![s as f64])
            .collect();
        let m = SpectralMatrix {
            values,
            freqs,
            frame_times: vec![0.0],
        };
        let c = fold_and_normalize(&m, &cfg);
        // bins s and s+12 share pitch class (9 + s) mod 12; sums are 2s+12
        // which span [12, 34] over s in 0..12.
        let mut expected = [0.0; 12];
        for s in 0..12 {
            expected[(9 + s) % 12] = (2.0 * s as f64) / 22.0;
        }
        for (g, e) in c.values[0].iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    fn triad_audio() -> AudioBuffer {
        let script = [
            TriadSegment::new(vec![0, 4, 7], Some(0), 1.0),
            TriadSegment::new(vec![9, 0, 4], Some(9), 1.0),
        ];
        synthesize_triads(&script, ANALYSIS_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn c_major_triad_dominates_treble_chroma() {
        let script = [TriadSegment::new(vec![0, 4, 7], Some(0), 2.0)];
        let buf = synthesize_triads(&script, ANALYSIS_SAMPLE_RATE).unwrap();
        let c = loudness_chromagram(&buf, &ChromaConfig::treble(), 1.0).unwrap();
        let mean = c.mean_profile();
        let mut idx: Vec<usize> = (0..12).collect();
        idx.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]));
        let mut top = idx[..3].to_vec();
        top.sort();
        assert_eq!(top, vec![0, 4, 7]);
    }

    #[test]
    fn gain_and_reference_power_invariance() {
        let buf = with_noise(&triad_audio(), 0.1);
        for cfg in [ChromaConfig::treble(), ChromaConfig::bass()] {
            let levels = spl(&constant_q(&buf.scaled(0.1), &cfg).unwrap(), 1.0, cfg.spl_floor);
            for t in 0..levels.n_frames() {
                let clipped = levels.values.iter().filter(|row| row[t] <= cfg.spl_floor).count();
                assert!(clipped == 0 || clipped == levels.values.len(), "frame {t} partly clipped");
            }
            let base = loudness_chromagram(&buf, &cfg, 1.0).unwrap();
            for g in [0.1, 0.5, 2.0, 10.0] {
                let other = loudness_chromagram(&buf.scaled(g), &cfg, 1.0).unwrap();
                for (a, b) in base.values.iter().flatten().zip(other.values.iter().flatten()) {
                    assert!((a - b).abs() < 1e-6, "gain {g}");
                }
            }
            let tiny = loudness_chromagram(&buf, &cfg, 1e-12).unwrap();
            for (a, b) in base.values.iter().flatten().zip(tiny.values.iter().flatten()) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(base.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn floor_clipping_breaks_gain_invariance_for_quiet_bins() {
        let buf = with_noise(&triad_audio(), 1e-3);
        let cfg = ChromaConfig::treble();
        let a = loudness_chromagram(&buf, &cfg, 1.0).unwrap();
        let b = loudness_chromagram(&buf.scaled(0.1), &cfg, 1.0).unwrap();
        let worst = a
            .values
            .iter()
            .flatten()
            .zip(b.values.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst > 1e-6);
    }

    fn tuning_fixture(shift_cents: f64) -> AudioBuffer {
        let r = 2f64.powf(shift_cents / 1200.0);
        let sr = ANALYSIS_SAMPLE_RATE as f64;
        let n = (2.0 * sr) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    0.3 * (2.0 * PI * 440.0 * r * t).sin() + 0.2 * (2.0 * PI * 880.0 * r * t).sin()
                })
                .collect(),
            ANALYSIS_SAMPLE_RATE,
        )
    }

    #[test]
    fn tuning_recovers_reference_and_shift() {
        let cfg = ChromaConfig::treble();
        let zero = estimate_tuning(&tuning_fixture(0.0), &cfg).unwrap();
        assert!(zero.abs() <= 3.0, "{zero}");
        let shifted = estimate_tuning(&tuning_fixture(30.0), &cfg).unwrap();
        assert!((shifted - 30.0).abs() <= 5.0, "{shifted}");
        let neg = estimate_tuning(&tuning_fixture(-20.0), &cfg).unwrap();
        assert!((neg + 20.0).abs() <= 5.0, "{neg}");
        let silent = AudioBuffer::new(vec![0.0; 11025], ANALYSIS_SAMPLE_RATE);
        assert_eq!(estimate_tuning(&silent, &cfg).unwrap(), 0.0);
    }

    fn toy_chroma(rows: &[f64], times: &[(f64, f64)]) -> Chromagram {
        Chromagram {
            band: Band::Treble,
            values: rows
                .iter()
                .map(|&v| {
                    let mut c = [0.0; 12];
                    c[0] = v;
                    c
                })
                .collect(),
            times: times.to_vec(),
        }
    }

    #[test]
    fn beat_median_examples() {
        let c = toy_chroma(&[0.1, 0.9, 0.5], &[(0.0, 0.2), (0.2, 0.4), (0.4, 0.6)]);
        let out = beat_sync_median(&c, &[0.0, 0.6]).unwrap();
        assert_eq!(out.values[0][0], 0.5);

        let even = toy_chroma(&[0.2, 0.4], &[(0.0, 0.2), (0.2, 0.4)]);
        let out = beat_sync_median(&even, &[0.0, 0.4]).unwrap();
        assert!((out.values[0][0] - 0.3).abs() < 1e-15);

        let ident = beat_sync_median(&c, &[0.0, 0.2, 0.4, 0.6]).unwrap();
        assert_eq!(ident.values, c.values);
        assert_eq!(ident.times, c.times);
    }

    #[test]
    fn empty_beat_interval_repeats_previous() {
        let c = toy_chroma(&[0.1, 0.9], &[(0.0, 0.2), (1.0, 1.2)]);
        let out = beat_sync_median(&c, &[0.0, 0.5, 0.8, 1.5]).unwrap();
        assert_eq!(out.n_frames(), 3);
        assert_eq!(out.values[1][0], 0.1);
        assert_eq!(out.values[2][0], 0.9);
        assert!(matches!(
            beat_sync_median(&c, &[0.0, 0.5, 0.5]),
            Err(ChromaError::NonMonotoneBeats { .. })
        ));
    }

    #[test]
    fn fixed_grid_covers_duration() {
        assert_eq!(fixed_grid_beats(1.2, 0.5), vec![0.0, 0.5, 1.0, 1.2]);
        assert_eq!(fixed_grid_beats(1.0, 0.5), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn chromagram_file_round_trip() {
        let buf = triad_audio();
        let feats = extract_features(&buf, None, &FeatureConfig::default()).unwrap();
        assert_eq!(feats.treble.n_frames(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.chroma");
        write_chromagram(&feats.bass, &p).unwrap();
        assert_eq!(read_chromagram(&p).unwrap(), feats.bass);
        assert!(parse_chromagram("treble 2\n0 1 0 0 0 0 0 0 0 0 0 0 0 0\n").is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn normalised_columns_are_unit_range(col in proptest::array::uniform12(-200.0f64..200.0)) {
            let n = normalize_column(&col);
            proptest::prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
            let any_nonzero = n.iter().any(|&v| v != 0.0);
            if any_nonzero {
                proptest::prop_assert!(n.iter().any(|&v| v == 0.0));
                proptest::prop_assert!(n.iter().any(|&v| v == 1.0));
            }
        }

        #[test]
        fn pitch_class_is_octave_invariant(f in 30.0f64..4000.0) {
            let a = pitch_class_index(f, 440.0);
            proptest::prop_assert!(a < 12);
            proptest::prop_assert_eq!(a, pitch_class_index(2.0 * f, 440.0));
        }
    }
}
