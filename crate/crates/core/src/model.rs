//! Maximum-likelihood training of the key/chord/bass HMM and its text
//! serialisation.
//!
//! Chord transitions are learned in key-relative coordinates: every pair
//! `(c̄, c)` observed under key `k` is shifted down by the tonic of `k` and
//! counted in the table of `k`'s mode. `p(c | c̄, k)` is then read back by
//! shifting the query into the same coordinates, which makes the table
//! transposition-equivariant by construction.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::annotations::{
    transpose_bass, transpose_key, Alphabet, AlphabetKind, FrameLabels, N_BASSES, N_KEYS,
};
use crate::chroma::Chromagram;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &str = "keychord-model";

/// Mean and covariance used for states without training observations.
pub const UNSEEN_MEAN: f64 = 0.5;
pub const UNSEEN_VARIANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("song {song}: {treble} treble frames, {bass} bass frames and {labels} label frames")]
    Misaligned {
        song: usize,
        treble: usize,
        bass: usize,
        labels: usize,
    },
    #[error("song {song}, frame {frame}: state {state} out of range for {what}")]
    StateOutOfRange {
        song: usize,
        frame: usize,
        state: usize,
        what: &'static str,
    },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("model file version {found} is not supported (expected {MODEL_FORMAT_VERSION})")]
    VersionMismatch { found: String },
    #[error("corrupt model file at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("model file {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Additive pseudo-count on initial and transition counts.
    pub alpha: f64,
    /// Ridge added to every covariance diagonal.
    pub epsilon: f64,
    pub alphabet: AlphabetKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon: 1e-4,
            alphabet: AlphabetKind::MajMin25,
        }
    }
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub cov: Vec<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self, ModelError> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(ModelError::Dimension {
                expected: d * d,
                got: cov.len(),
            });
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        if (0..d).any(|i| (0..i).any(|j| m[(i, j)] != m[(j, i)])) {
            return Err(ModelError::NotPositiveDefinite);
        }
        let chol = m.cholesky().ok_or(ModelError::NotPositiveDefinite)?.unpack();
        let log_det: f64 = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn isotropic(d: usize, mean: f64, variance: f64) -> Self {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = variance;
        }
        Self::new(vec![mean; d], cov).expect("isotropic covariance is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(a, m)| a - m));
        let y = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }
}

/// Exact multivariate normal log density with a row-major covariance.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &[f64]) -> Result<f64, ModelError> {
    if x.len() != mean.len() {
        return Err(ModelError::Dimension {
            expected: mean.len(),
            got: x.len(),
        });
    }
    Ok(Gaussian::new(mean.to_vec(), cov.to_vec())?.log_pdf(x))
}

/// One training song: beat-synchronous chromagrams and aligned labels.
#[derive(Debug, Clone)]
pub struct LabelledSong {
    pub treble: Chromagram,
    pub bass: Chromagram,
    pub labels: FrameLabels,
}

/// Chord-only HMM on concatenated 24-d treble+bass chroma, used by the
/// chord-alphabet constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordOnlyHmm {
    pub pi: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub emis: Vec<Gaussian>,
}

/// All learned tables of the key/chord/bass HMM.
#[derive(Debug, Clone, PartialEq)]
pub struct HpModel {
    pub alphabet: Alphabet,
    pub pi_k: Vec<f64>,
    pub pi_c: Vec<f64>,
    pub pi_b: Vec<f64>,
    /// `t_k[k̄][k]`.
    pub t_k: Vec<Vec<f64>>,
    /// Key-relative chord transitions `t_c_rel[mode][c̄][c]` with tonic C.
    pub t_c_rel: [Vec<Vec<f64>>; 2],
    /// `t_bc[c][b]`.
    pub t_bc: Vec<Vec<f64>>,
    /// `t_bb[b̄][b]`.
    pub t_bb: Vec<Vec<f64>>,
    pub emis_c: Vec<Gaussian>,
    pub emis_b: Vec<Gaussian>,
    pub key_counts: Vec<Vec<u64>>,
    pub bass_counts: Vec<Vec<u64>>,
    pub chord_hmm: ChordOnlyHmm,
    /// States that had no emission observations during training.
    pub unseen_chords: Vec<usize>,
    pub unseen_basses: Vec<usize>,
}

impl HpModel {
    /// `p(c | c̄, k)` read from the key-relative table.
    pub fn chord_transition(&self, c_prev: usize, c: usize, k: usize) -> f64 {
        let shift = -((k % 12) as i32);
        let rel_prev = self.alphabet.transpose(c_prev, shift);
        let rel = self.alphabet.transpose(c, shift);
        self.t_c_rel[k / 12][rel_prev][rel]
    }
}

/// Shifts every key, chord and bass state by `semitones` (mod 12).
pub fn transpose_labels(fl: &FrameLabels, semitones: i32, alphabet: &Alphabet) -> FrameLabels {
    FrameLabels {
        times: fl.times.clone(),
        keys: fl.keys.iter().map(|k| k.map(|k| transpose_key(k, semitones))).collect(),
        chords: fl.chords.iter().map(|c| c.map(|c| alphabet.transpose(c, semitones))).collect(),
        basses: fl.basses.iter().map(|b| b.map(|b| transpose_bass(b, semitones))).collect(),
    }
}

/// Mergeable sufficient statistics for one Gaussian.
#[derive(Clone)]
struct MomentAcc {
    n: u64,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl MomentAcc {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; d],
            outer: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let d = self.sum.len();
        self.n += 1;
        for i in 0..d {
            self.sum[i] += x[i];
            for j in 0..d {
                self.outer[i * d + j] += x[i] * x[j];
            }
        }
    }

    fn merge(&mut self, o: &Self) {
        self.n += o.n;
        self.sum.iter_mut().zip(&o.sum).for_each(|(a, b)| *a += b);
        self.outer.iter_mut().zip(&o.outer).for_each(|(a, b)| *a += b);
    }

    fn gaussian(&self, epsilon: f64) -> Result<Option<Gaussian>, ModelError> {
        if self.n == 0 {
            return Ok(None);
        }
        let d = self.sum.len();
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = self.outer[i * d + j] / n - mean[i] * mean[j];
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
            cov[i * d + i] = cov[i * d + i].max(0.0) + epsilon;
        }
        Gaussian::new(mean, cov).map(Some)
    }
}

/// Raw counts and emission statistics of one or more songs.
#[derive(Clone)]
struct Counts {
    pi_k: Vec<u64>,
    pi_c: Vec<u64>,
    pi_b: Vec<u64>,
    t_k: Vec<Vec<u64>>,
    t_c_rel: [Vec<Vec<u64>>; 2],
    t_c_abs: Vec<Vec<u64>>,
    t_bc: Vec<Vec<u64>>,
    t_bb: Vec<Vec<u64>>,
    emis_c: Vec<MomentAcc>,
    emis_b: Vec<MomentAcc>,
    emis_joint: Vec<MomentAcc>,
}

fn zeros(r: usize, c: usize) -> Vec<Vec<u64>> {
    vec![vec![0; c]; r]
}

fn add_into(a: &mut [Vec<u64>], b: &[Vec<u64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        ra.iter_mut().zip(rb).for_each(|(x, y)| *x += y);
    }
}

impl Counts {
    fn new(nc: usize) -> Self {
        Self {
            pi_k: vec![0; N_KEYS],
            pi_c: vec![0; nc],
            pi_b: vec![0; N_BASSES],
            t_k: zeros(N_KEYS, N_KEYS),
            t_c_rel: [zeros(nc, nc), zeros(nc, nc)],
            t_c_abs: zeros(nc, nc),
            t_bc: zeros(nc, N_BASSES),
            t_bb: zeros(N_BASSES, N_BASSES),
            emis_c: vec![MomentAcc::new(12); nc],
            emis_b: vec![MomentAcc::new(12); N_BASSES],
            emis_joint: vec![MomentAcc::new(24); nc],
        }
    }

    fn merge(mut self, o: Self) -> Self {
        let add = |a: &mut Vec<u64>, b: &Vec<u64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.pi_k, &o.pi_k);
        add(&mut self.pi_c, &o.pi_c);
        add(&mut self.pi_b, &o.pi_b);
        add_into(&mut self.t_k, &o.t_k);
        add_into(&mut self.t_c_rel[0], &o.t_c_rel[0]);
        add_into(&mut self.t_c_rel[1], &o.t_c_rel[1]);
        add_into(&mut self.t_c_abs, &o.t_c_abs);
        add_into(&mut self.t_bc, &o.t_bc);
        add_into(&mut self.t_bb, &o.t_bb);
        for (a, b) in self.emis_c.iter_mut().zip(&o.emis_c) {
            a.merge(b);
        }
        for (a, b) in self.emis_b.iter_mut().zip(&o.emis_b) {
            a.merge(b);
        }
        for (a, b) in self.emis_joint.iter_mut().zip(&o.emis_joint) {
            a.merge(b);
        }
        self
    }

    fn accumulate(&mut self, song: &LabelledSong, alphabet: &Alphabet) {
        let fl = &song.labels;
        let first = |seq: &[Option<usize>]| seq.iter().flatten().next().copied();
        if let Some(k) = first(&fl.keys) {
            self.pi_k[k] += 1;
        }
        if let Some(c) = first(&fl.chords) {
            self.pi_c[c] += 1;
        }
        if let Some(b) = first(&fl.basses) {
            self.pi_b[b] += 1;
        }
        for t in 0..fl.len() {
            let x_c = &song.treble.values[t];
            let x_b = &song.bass.values[t];
            if let Some(c) = fl.chords[t] {
                self.emis_c[c].push(x_c);
                let joint: Vec<f64> = x_c.iter().chain(x_b.iter()).copied().collect();
                self.emis_joint[c].push(&joint);
                if let Some(b) = fl.basses[t] {
                    self.t_bc[c][b] += 1;
                }
            }
            if let Some(b) = fl.basses[t] {
                self.emis_b[b].push(x_b);
            }
            if t == 0 {
                continue;
            }
            if let (Some(kp), Some(k)) = (fl.keys[t - 1], fl.keys[t]) {
                self.t_k[kp][k] += 1;
            }
            if let (Some(cp), Some(c)) = (fl.chords[t - 1], fl.chords[t]) {
                self.t_c_abs[cp][c] += 1;
                if let Some(k) = fl.keys[t] {
                    let shift = -((k % 12) as i32);
                    let rp = alphabet.transpose(cp, shift);
                    let r = alphabet.transpose(c, shift);
                    self.t_c_rel[k / 12][rp][r] += 1;
                }
            }
            if let (Some(bp), Some(b)) = (fl.basses[t - 1], fl.basses[t]) {
                self.t_bb[bp][b] += 1;
            }
        }
    }
}

/// `(count + alpha) / Σ(count + alpha)`; an all-zero row becomes uniform.
pub fn normalise_counts(counts: &[u64], alpha: f64) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| c as f64 + alpha).sum();
    if total <= 0.0 {
        return vec![1.0 / counts.len() as f64; counts.len()];
    }
    counts.iter().map(|&c| (c as f64 + alpha) / total).collect()
}

fn normalise_rows(rows: &[Vec<u64>], alpha: f64) -> Vec<Vec<f64>> {
    rows.iter().map(|r| normalise_counts(r, alpha)).collect()
}

fn validate_song(i: usize, song: &LabelledSong, nc: usize) -> Result<(), ModelError> {
    let (nt, nb, nl) = (song.treble.n_frames(), song.bass.n_frames(), song.labels.len());
    let fl = &song.labels;
    if nt != nb || nt != nl || fl.keys.len() != nl || fl.chords.len() != nl || fl.basses.len() != nl
    {
        return Err(ModelError::Misaligned {
            song: i,
            treble: nt,
            bass: nb,
            labels: nl,
        });
    }
    let check = |seq: &[Option<usize>], limit: usize, what: &'static str| {
        for (t, s) in seq.iter().enumerate() {
            if let Some(s) = *s {
                if s >= limit {
                    return Err(ModelError::StateOutOfRange {
                        song: i,
                        frame: t,
                        state: s,
                        what,
                    });
                }
            }
        }
        Ok(())
    };
    check(&fl.keys, N_KEYS, "key")?;
    check(&fl.chords, nc, "chord")?;
    check(&fl.basses, N_BASSES, "bass")
}

fn gaussians(
    accs: &[MomentAcc],
    d: usize,
    epsilon: f64,
) -> Result<(Vec<Gaussian>, Vec<usize>), ModelError> {
    let mut out = Vec::with_capacity(accs.len());
    let mut unseen = Vec::new();
    for (i, acc) in accs.iter().enumerate() {
        match acc.gaussian(epsilon)? {
            Some(g) => out.push(g),
            None => {
                unseen.push(i);
                out.push(Gaussian::isotropic(d, UNSEEN_MEAN, UNSEEN_VARIANCE));
            }
        }
    }
    Ok((out, unseen))
}

/// Relative-frequency estimates of every table. Initial probabilities use
/// the first labelled frame of each song; transitions count consecutive
/// labelled frames; `p(b|c)` counts every frame labelled with both.
pub fn train(dataset: &[LabelledSong], cfg: &TrainConfig) -> Result<HpModel, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let alphabet = Alphabet::new(cfg.alphabet);
    let nc = alphabet.n_chords();
    for (i, song) in dataset.iter().enumerate() {
        validate_song(i, song, nc)?;
    }
    // Merged in dataset order so the floating-point sums do not depend on
    // thread scheduling.
    let per_song: Vec<Counts> = dataset
        .par_iter()
        .map(|song| {
            let mut c = Counts::new(nc);
            c.accumulate(song, &alphabet);
            c
        })
        .collect();
    let counts = per_song.into_iter().fold(Counts::new(nc), Counts::merge);

    let a = cfg.alpha;
    let (emis_c, unseen_chords) = gaussians(&counts.emis_c, 12, cfg.epsilon)?;
    let (emis_b, unseen_basses) = gaussians(&counts.emis_b, 12, cfg.epsilon)?;
    let (emis_joint, _) = gaussians(&counts.emis_joint, 24, cfg.epsilon)?;
    for &c in &unseen_chords {
        log::warn!("chord state {} has no training frames", alphabet.name(c));
    }
    for &b in &unseen_basses {
        log::warn!("bass state {} has no training frames", crate::annotations::bass_name(b));
    }
    Ok(HpModel {
        pi_k: normalise_counts(&counts.pi_k, a),
        pi_c: normalise_counts(&counts.pi_c, a),
        pi_b: normalise_counts(&counts.pi_b, a),
        t_k: normalise_rows(&counts.t_k, a),
        t_c_rel: [
            normalise_rows(&counts.t_c_rel[0], a),
            normalise_rows(&counts.t_c_rel[1], a),
        ],
        t_bc: normalise_rows(&counts.t_bc, a),
        t_bb: normalise_rows(&counts.t_bb, a),
        emis_c,
        emis_b,
        chord_hmm: ChordOnlyHmm {
            pi: normalise_counts(&counts.pi_c, a),
            trans: normalise_rows(&counts.t_c_abs, a),
            emis: emis_joint,
        },
        key_counts: counts.t_k,
        bass_counts: counts.t_bc,
        unseen_chords,
        unseen_basses,
        alphabet,
    })
}

fn write_vec(out: &mut String, name: &str, v: &[f64]) {
    writeln!(out, "{name} {}", v.len()).unwrap();
    push_row(out, v.iter());
}

fn push_row<T: std::fmt::Display>(out: &mut String, v: impl Iterator<Item = T>) {
    let row: Vec<String> = v.map(|x| x.to_string()).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

fn write_table<T: std::fmt::Display>(out: &mut String, name: &str, rows: &[Vec<T>]) {
    let cols = rows.first().map_or(0, |r| r.len());
    writeln!(out, "{name} {} {cols}", rows.len()).unwrap();
    for r in rows {
        push_row(out, r.iter());
    }
}

fn write_gaussians(out: &mut String, name: &str, gs: &[Gaussian]) {
    let d = gs.first().map_or(0, |g| g.dim());
    writeln!(out, "{name} {} {d}", gs.len()).unwrap();
    for g in gs {
        push_row(out, g.mean.iter());
        for r in g.cov.chunks(d) {
            push_row(out, r.iter());
        }
    }
}

/// Serialises the model as versioned plain text. Floats use the shortest
/// decimal form that parses back to the identical value.
pub fn model_to_string(m: &HpModel) -> String {
    let mut s = String::new();
    writeln!(s, "{MODEL_MAGIC} {MODEL_FORMAT_VERSION}").unwrap();
    writeln!(s, "alphabet {}", m.alphabet.kind).unwrap();
    write_vec(&mut s, "pi_k", &m.pi_k);
    write_vec(&mut s, "pi_c", &m.pi_c);
    write_vec(&mut s, "pi_b", &m.pi_b);
    write_table(&mut s, "t_k", &m.t_k);
    write_table(&mut s, "t_c_major", &m.t_c_rel[0]);
    write_table(&mut s, "t_c_minor", &m.t_c_rel[1]);
    write_table(&mut s, "t_bc", &m.t_bc);
    write_table(&mut s, "t_bb", &m.t_bb);
    write_gaussians(&mut s, "emis_c", &m.emis_c);
    write_gaussians(&mut s, "emis_b", &m.emis_b);
    write_table(&mut s, "key_counts", &m.key_counts);
    write_table(&mut s, "bass_counts", &m.bass_counts);
    write_vec(&mut s, "hmm_pi", &m.chord_hmm.pi);
    write_table(&mut s, "hmm_trans", &m.chord_hmm.trans);
    write_gaussians(&mut s, "hmm_emis", &m.chord_hmm.emis);
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    writeln!(s, "unseen_chords {}", list(&m.unseen_chords)).unwrap();
    writeln!(s, "unseen_basses {}", list(&m.unseen_basses)).unwrap();
    s.push_str("end\n");
    s
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> ModelError {
        ModelError::Corrupt {
            line: self.line,
            detail: detail.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str, ModelError> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(self.corrupt("unexpected end of file")),
        }
    }

    fn header(&mut self, name: &str, n_dims: usize) -> Result<Vec<usize>, ModelError> {
        let line = self.next_line()?;
        let mut f = line.split_whitespace();
        if f.next() != Some(name) {
            return Err(self.corrupt(format!("expected section {name}")));
        }
        let dims: Vec<usize> = f
            .map(|x| x.parse().map_err(|_| self.corrupt("bad dimension")))
            .collect::<Result<_, _>>()?;
        if dims.len() != n_dims {
            return Err(self.corrupt(format!("section {name} needs {n_dims} dimensions")));
        }
        Ok(dims)
    }

    fn row<T: std::str::FromStr>(&mut self, n: usize) -> Result<Vec<T>, ModelError> {
        let line = self.next_line()?;
        let v: Vec<T> = line
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| self.corrupt(format!("bad number {x:?}"))))
            .collect::<Result<_, _>>()?;
        if v.len() != n {
            return Err(self.corrupt(format!("expected {n} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn vec(&mut self, name: &str, n: usize) -> Result<Vec<f64>, ModelError> {
        let dims = self.header(name, 1)?;
        if dims[0] != n {
            return Err(self.corrupt(format!("{name} has length {}, expected {n}", dims[0])));
        }
        self.row(n)
    }

    fn table<T: std::str::FromStr>(
        &mut self,
        name: &str,
        r: usize,
        c: usize,
    ) -> Result<Vec<Vec<T>>, ModelError> {
        let dims = self.header(name, 2)?;
        if dims != [r, c] {
            return Err(self.corrupt(format!("{name} is {}x{}, expected {r}x{c}", dims[0], dims[1])));
        }
        (0..r).map(|_| self.row(c)).collect()
    }

    fn gaussians(&mut self, name: &str, n: usize, d: usize) -> Result<Vec<Gaussian>, ModelError> {
        let dims = self.header(name, 2)?;
        if dims != [n, d] {
            return Err(self.corrupt(format!("{name} has wrong dimensions")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mean = self.row(d)?;
            let mut cov = Vec::with_capacity(d * d);
            for _ in 0..d {
                cov.extend(self.row::<f64>(d)?);
            }
            out.push(Gaussian::new(mean, cov).map_err(|e| self.corrupt(e.to_string()))?);
        }
        Ok(out)
    }

    fn list(&mut self, name: &str) -> Result<Vec<usize>, ModelError> {
        let line = self.next_line()?;
        let mut f = line.split_whitespace();
        if f.next() != Some(name) {
            return Err(self.corrupt(format!("expected {name}")));
        }
        f.map(|x| x.parse().map_err(|_| self.corrupt("bad state index")))
            .collect()
    }
}

pub fn model_from_str(text: &str) -> Result<HpModel, ModelError> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        line: 0,
    };
    let first = r.next_line()?;
    match first.split_once(' ') {
        Some((MODEL_MAGIC, v)) if v.trim() == MODEL_FORMAT_VERSION.to_string() => {}
        Some((MODEL_MAGIC, v)) => {
            return Err(ModelError::VersionMismatch {
                found: v.trim().to_string(),
            })
        }
        _ => return Err(r.corrupt("missing model header")),
    }
    let kind_line = r.next_line()?;
    let kind: AlphabetKind = kind_line
        .strip_prefix("alphabet ")
        .ok_or_else(|| r.corrupt("expected alphabet"))?
        .trim()
        .parse()
        .map_err(|e: String| r.corrupt(e))?;
    let alphabet = Alphabet::new(kind);
    let nc = alphabet.n_chords();
    let m = HpModel {
        pi_k: r.vec("pi_k", N_KEYS)?,
        pi_c: r.vec("pi_c", nc)?,
        pi_b: r.vec("pi_b", N_BASSES)?,
        t_k: r.table("t_k", N_KEYS, N_KEYS)?,
        t_c_rel: [r.table("t_c_major", nc, nc)?, r.table("t_c_minor", nc, nc)?],
        t_bc: r.table("t_bc", nc, N_BASSES)?,
        t_bb: r.table("t_bb", N_BASSES, N_BASSES)?,
        emis_c: r.gaussians("emis_c", nc, 12)?,
        emis_b: r.gaussians("emis_b", N_BASSES, 12)?,
        key_counts: r.table("key_counts", N_KEYS, N_KEYS)?,
        bass_counts: r.table("bass_counts", nc, N_BASSES)?,
        chord_hmm: ChordOnlyHmm {
            pi: r.vec("hmm_pi", nc)?,
            trans: r.table("hmm_trans", nc, nc)?,
            emis: r.gaussians("hmm_emis", nc, 24)?,
        },
        unseen_chords: r.list("unseen_chords")?,
        unseen_basses: r.list("unseen_basses")?,
        alphabet,
    };
    if r.next_line()? != "end" {
        return Err(r.corrupt("expected end marker"));
    }
    Ok(m)
}

pub fn save_model(m: &HpModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    crate::write_atomic(path, model_to_string(m).as_bytes()).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HpModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    model_from_str(&text)
}
