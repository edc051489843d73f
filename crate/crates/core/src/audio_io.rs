//! Audio loading, downmixing, band-limited resampling and synthetic fixtures.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

/// Sample rate every analysis in this crate runs at.
pub const ANALYSIS_SAMPLE_RATE: u32 = 11025;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read audio file {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio encoding in {path}: {detail}")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("audio file {0} contains no samples")]
    Empty(String),
    #[error("target sample rate must be positive")]
    InvalidSampleRate,
    #[error("synthesis script is empty")]
    EmptyScript,
    #[error("invalid synthesis segment {index}: {reason}")]
    InvalidSegment { index: usize, reason: String },
    #[error("cannot write {path}: {detail}")]
    Write { path: String, detail: String },
}

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(
            self.samples.iter().map(|x| x * gain).collect(),
            self.sample_rate,
        )
    }
}

fn classify_hound(path: &Path, err: hound::Error) -> AudioError {
    let p = path.display().to_string();
    match err {
        hound::Error::IoError(source) => AudioError::Unreadable { path: p, source },
        other => AudioError::UnsupportedEncoding {
            path: p,
            detail: other.to_string(),
        },
    }
}

/// Reads a PCM WAV file (8/16/24/32-bit integer or 32-bit float, mono or
/// stereo). Integer samples are scaled by `1 / 2^(bits-1)`; stereo is
/// downmixed by per-sample channel mean.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| classify_hound(path, e))?;
    let spec = reader.spec();
    let unsupported = |detail: String| AudioError::UnsupportedEncoding {
        path: path.display().to_string(),
        detail,
    };
    if spec.channels == 0 || spec.channels > 2 {
        return Err(unsupported(format!("{} channels", spec.channels)));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| classify_hound(path, e))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| classify_hound(path, e))?
        }
        (fmt, bits) => return Err(unsupported(format!("{fmt:?} with {bits} bits"))),
    };
    if interleaved.is_empty() {
        return Err(AudioError::Empty(path.display().to_string()));
    }
    let channels = spec.channels as usize;
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

/// Writes the buffer as 16-bit mono PCM. Samples are clipped to [-1, 1].
pub fn write_wav16(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let err = |e: hound::Error| AudioError::Write {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &buf.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(err)?;
    }
    writer.finalize().map_err(err)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zero crossings of the lowpass kernel on each side of its centre.
const SINC_HALF_ZEROS: f64 = 16.0;
/// Above this many distinct fractional phases the kernel is evaluated directly.
const MAX_PHASES: u64 = 4096;

fn kernel(x: f64, cutoff: f64, half_width: f64) -> f64 {
    // x in input samples, cutoff in cycles per input sample
    if x.abs() >= half_width {
        return 0.0;
    }
    let sinc = if x == 0.0 {
        2.0 * cutoff
    } else {
        (2.0 * PI * cutoff * x).sin() / (PI * x)
    };
    // Blackman window over [-half_width, half_width]
    let r = (x + half_width) / (2.0 * half_width);
    let w = 0.42 - 0.5 * (2.0 * PI * r).cos() + 0.08 * (4.0 * PI * r).cos();
    sinc * w
}

/// Band-limited sample-rate conversion with a windowed-sinc lowpass whose
/// cutoff sits at 0.45 of the lower of the two sample rates. Rational ratios
/// use precomputed polyphase tables.
pub fn resample(buf: &AudioBuffer, target_sr: u32) -> Result<AudioBuffer, AudioError> {
    if target_sr == 0 {
        return Err(AudioError::InvalidSampleRate);
    }
    if target_sr == buf.sample_rate || buf.is_empty() {
        return Ok(AudioBuffer::new(buf.samples.clone(), target_sr));
    }
    let src = buf.sample_rate as u64;
    let dst = target_sr as u64;
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    let n_out = ((buf.len() as u64 * dst + src / 2) / src) as usize;

    // cycles per input sample
    let cutoff = 0.45 * (src.min(dst) as f64) / src as f64;
    let half_width = SINC_HALF_ZEROS / (2.0 * cutoff);
    let reach = half_width.ceil() as i64;
    let x = &buf.samples;
    let len = x.len() as i64;

    let mut out = Vec::with_capacity(n_out);
    if up <= MAX_PHASES {
        // Output m sits at input position m*down/up = base + phase/up.
        let taps = (2 * reach + 1) as usize;
        let table: Vec<Vec<f64>> = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                (0..taps)
                    .map(|j| kernel(frac - (j as i64 - reach) as f64, cutoff, half_width))
                    .collect()
            })
            .collect();
        for m in 0..n_out as u64 {
            let pos = m * down;
            let base = (pos / up) as i64;
            let coeffs = &table[(pos % up) as usize];
            let mut acc = 0.0;
            for (j, c) in coeffs.iter().enumerate() {
                let n = base + j as i64 - reach;
                if (0..len).contains(&n) {
                    acc += x[n as usize] * c;
                }
            }
            out.push(acc);
        }
    } else {
        let ratio = src as f64 / dst as f64;
        for m in 0..n_out {
            let t = m as f64 * ratio;
            let base = t.floor() as i64;
            let mut acc = 0.0;
            for n in (base - reach)..=(base + reach + 1) {
                if (0..len).contains(&n) {
                    acc += x[n as usize] * kernel(t - n as f64, cutoff, half_width);
                }
            }
            out.push(acc);
        }
    }
    Ok(AudioBuffer::new(out, target_sr))
}

/// Loads a WAV file and converts it to mono at [`ANALYSIS_SAMPLE_RATE`].
pub fn load_for_analysis(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let buf = load_wav(path)?;
    resample(&buf, ANALYSIS_SAMPLE_RATE)
}

/// One segment of a synthesis script.
#[derive(Debug, Clone, PartialEq)]
pub struct TriadSegment {
    /// Pitch classes (0 = C) sounding in the treble register; empty for silence.
    pub pitch_classes: Vec<u8>,
    /// Pitch class of the bass tone, or `None` for no bass.
    pub bass: Option<u8>,
    /// Duration in seconds.
    pub duration: f64,
}

impl TriadSegment {
    pub fn new(pitch_classes: impl Into<Vec<u8>>, bass: Option<u8>, duration: f64) -> Self {
        Self {
            pitch_classes: pitch_classes.into(),
            bass,
            duration,
        }
    }
}

fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

/// MIDI note of a chord tone: octave 4, doubled an octave above at lower level.
fn treble_notes(pc: u8) -> [(f64, f64); 2] {
    let m = 60.0 + pc as f64;
    [(midi_to_hz(m), 1.0), (midi_to_hz(m + 12.0), 0.5)]
}

/// Bass tones sit between E2 and D#3.
fn bass_note(pc: u8) -> f64 {
    let m = 40 + (pc as i32 - 4).rem_euclid(12);
    midi_to_hz(m as f64)
}

/// Renders a script of chord segments as sums of sinusoids: chord tones in
/// octaves 4-5, the bass tone in octaves 2-3. Each segment gets 10 ms
/// raised-cosine ramps; the result is normalised to a peak of 0.5.
pub fn synthesize_triads(script: &[TriadSegment], sr: u32) -> Result<AudioBuffer, AudioError> {
    if script.is_empty() {
        return Err(AudioError::EmptyScript);
    }
    if sr == 0 {
        return Err(AudioError::InvalidSampleRate);
    }
    for (index, seg) in script.iter().enumerate() {
        if !(seg.duration > 0.0) || !seg.duration.is_finite() {
            return Err(AudioError::InvalidSegment {
                index,
                reason: format!("duration {} is not positive", seg.duration),
            });
        }
        if let Some(pc) = seg.pitch_classes.iter().chain(seg.bass.iter()).find(|&&p| p > 11) {
            return Err(AudioError::InvalidSegment {
                index,
                reason: format!("pitch class {pc} out of range"),
            });
        }
    }
    let srf = sr as f64;
    let total: f64 = script.iter().map(|s| s.duration).sum();
    let n_total = (total * srf).round() as usize;
    let mut samples = vec![0.0; n_total];
    let ramp = (0.01 * srf) as usize;
    let mut t0 = 0.0;
    for seg in script {
        let start = (t0 * srf).round() as usize;
        t0 += seg.duration;
        let end = ((t0 * srf).round() as usize).min(n_total);
        let mut partials: Vec<(f64, f64)> = seg
            .pitch_classes
            .iter()
            .flat_map(|&pc| treble_notes(pc))
            .collect();
        if let Some(b) = seg.bass {
            partials.push((bass_note(b), 1.5));
        }
        let n_seg = end - start;
        for i in 0..n_seg {
            let t = (start + i) as f64 / srf;
            let edge = i.min(n_seg - 1 - i);
            let env = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let v: f64 = partials
                .iter()
                .map(|&(f, a)| a * (2.0 * PI * f * t).sin())
                .sum();
            samples[start + i] = env * v;
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        samples.iter_mut().for_each(|s| *s *= g);
    }
    Ok(AudioBuffer::new(samples, sr))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Frequency of the largest DFT bin, by direct evaluation on a coarse grid.
    pub(crate) fn dft_peak_hz(buf: &AudioBuffer, lo: f64, hi: f64, step: f64) -> f64 {
        let sr = buf.sample_rate as f64;
        let mut best = (0.0, lo);
        let mut f = lo;
        while f <= hi {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in buf.samples.iter().enumerate() {
                let ph = 2.0 * PI * f * n as f64 / sr;
                re += x * ph.cos();
                im -= x * ph.sin();
            }
            let p = re * re + im * im;
            if p > best.0 {
                best = (p, f);
            }
            f += step;
        }
        best.1
    }

    pub(crate) fn dft_power(buf: &AudioBuffer, f: f64) -> f64 {
        let sr = buf.sample_rate as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, x) in buf.samples.iter().enumerate() {
            let ph = 2.0 * PI * f * n as f64 / sr;
            re += x * ph.cos();
            im -= x * ph.sin();
        }
        (re * re + im * im) / (buf.len() as f64).powi(2)
    }

    fn sine(f: f64, sr: u32, secs: f64) -> AudioBuffer {
        let n = (secs * sr as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| 0.8 * (2.0 * PI * f * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
    }

    fn write_raw_wav(path: &Path, spec: hound::WavSpec, samples: &[i32]) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            match spec.bits_per_sample {
                8 => w.write_sample(s as i8).unwrap(),
                16 => w.write_sample(s as i16).unwrap(),
                _ => w.write_sample(s).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn loads_16bit_mono_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        write_raw_wav(&path, spec, &[0, 16384, -32768]);
        let buf = load_wav(&path).unwrap();
        assert_eq!(buf.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(buf.sample_rate, 44100);
    }

    #[test]
    fn stereo_is_downmixed_by_mean() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(1.0f32).unwrap();
        w.write_sample(0.0f32).unwrap();
        w.finalize().unwrap();
        assert_eq!(load_wav(&path).unwrap().samples, vec![0.5]);
    }

    #[test]
    fn other_bit_depths_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        for bits in [8u16, 24, 32] {
            let path = dir.path().join(format!("b{bits}.wav"));
            let spec = hound::WavSpec {
                channels: 1,
                sample_rate: 8000,
                bits_per_sample: bits,
                sample_format: hound::SampleFormat::Int,
            };
            let full = 1i64 << (bits - 1);
            write_raw_wav(&path, spec, &[(-full) as i32, (full / 2) as i32]);
            let buf = load_wav(&path).unwrap();
            assert_eq!(buf.samples, vec![-1.0, 0.5], "{bits} bits");
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.wav");
        assert!(matches!(load_wav(&missing), Err(AudioError::Unreadable { .. })));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFF\x04\x00\x00\x00WAVEnope").unwrap();
        assert!(matches!(
            load_wav(&junk),
            Err(AudioError::UnsupportedEncoding { .. }) | Err(AudioError::Unreadable { .. })
        ));

        let empty = dir.path().join("empty.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        write_raw_wav(&empty, spec, &[]);
        assert!(matches!(load_wav(&empty), Err(AudioError::Empty(_))));
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let buf = sine(440.0, 11025, 0.1);
        assert_eq!(resample(&buf, 11025).unwrap(), buf);
    }

    #[test]
    fn resample_rejects_zero_rate() {
        let buf = sine(440.0, 11025, 0.1);
        assert!(matches!(resample(&buf, 0), Err(AudioError::InvalidSampleRate)));
    }

    #[test]
    fn resample_by_four_gives_quarter_length() {
        let buf = AudioBuffer::new(vec![0.0; 44100], 44100);
        let out = resample(&buf, 11025).unwrap();
        assert!((out.len() as i64 - 11025).abs() <= 1);
    }

    #[test]
    fn resampled_sine_keeps_its_frequency() {
        let buf = sine(1000.0, 22050, 1.0);
        let out = resample(&buf, 11025).unwrap();
        assert!((out.len() as i64 - 11025).abs() <= 1);
        // 1 s of output gives 1 Hz DFT bins
        let peak = dft_peak_hz(&out, 900.0, 1100.0, 1.0);
        assert!((peak - 1000.0).abs() <= 1.0, "peak at {peak}");
        // amplitude preserved in the passband
        let amp = 2.0 * dft_power(&out, 1000.0).sqrt();
        assert!((amp - 0.8).abs() < 0.02, "amplitude {amp}");
    }

    #[test]
    fn resample_attenuates_above_new_nyquist() {
        let buf = sine(7000.0, 44100, 0.5);
        let out = resample(&buf, 11025).unwrap();
        let rms = (out.samples.iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
        assert!(rms < 0.01, "aliased energy {rms}");
    }

    #[test]
    fn irregular_ratio_preserves_duration_and_pitch() {
        let buf = sine(440.0, 48000, 1.0);
        let out = resample(&buf, 11025).unwrap();
        assert!((out.duration() - buf.duration()).abs() <= 1.0 / 11025.0);
        let peak = dft_peak_hz(&out, 400.0, 480.0, 1.0);
        assert!((peak - 440.0).abs() <= 1.0);
    }

    #[test]
    fn triad_fixture_contains_expected_partials() {
        let script = [TriadSegment::new(vec![0, 4, 7], Some(0), 1.0)];
        let buf = synthesize_triads(&script, 11025).unwrap();
        assert_eq!(buf.len(), 11025);
        assert!(buf.peak() <= 0.5 + 1e-6);
        let floor = dft_power(&buf, 300.0);
        for f in [261.63, 329.63, 392.00, 130.81] {
            let p = dft_power(&buf, f);
            assert!(p > 100.0 * floor, "{f} Hz power {p} vs floor {floor}");
        }
    }

    #[test]
    fn synthesis_edge_cases() {
        assert!(matches!(synthesize_triads(&[], 11025), Err(AudioError::EmptyScript)));
        let bad = [TriadSegment::new(vec![0], None, 0.0)];
        assert!(matches!(
            synthesize_triads(&bad, 11025),
            Err(AudioError::InvalidSegment { .. })
        ));
        let bad_pc = [TriadSegment::new(vec![12], None, 1.0)];
        assert!(synthesize_triads(&bad_pc, 11025).is_err());
        let two = [
            TriadSegment::new(vec![0, 4, 7], Some(0), 0.5),
            TriadSegment::new(vec![9, 0, 4], Some(9), 0.5),
        ];
        assert_eq!(synthesize_triads(&two, 11025).unwrap().len(), 11025);
    }

    #[test]
    fn wav_write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let buf = synthesize_triads(&[TriadSegment::new(vec![2, 6, 9], Some(2), 0.3)], 11025)
            .unwrap();
        write_wav16(&buf, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), buf.len());
        let max_err = back
            .samples
            .iter()
            .zip(&buf.samples)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_err < 1.0 / 32767.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn resample_preserves_duration(n in 1usize..5000, src in 4000u32..48000, dst in 4000u32..48000) {
            let buf = AudioBuffer::new(vec![0.1; n], src);
            let out = resample(&buf, dst).unwrap();
            proptest::prop_assert!((out.duration() - buf.duration()).abs() <= 1.0 / dst as f64);
        }

        #[test]
        fn synthesis_peak_is_bounded(pcs in proptest::collection::vec(0u8..12, 0..4), bass in proptest::option::of(0u8..12), dur in 0.05f64..0.4) {
            let buf = synthesize_triads(&[TriadSegment::new(pcs, bass, dur)], 8000).unwrap();
            proptest::prop_assert!(buf.peak() <= 0.5 + 1e-6);
        }
    }
}
