//! Batch front end: `chroma`, `train`, `decode`, `eval` and `synth`
//! subcommands over directories of songs paired by file stem.
//!
//! File layout, relative to the configured directories:
//!
//! | file | produced by | contents |
//! |------|-------------|----------|
//! | `<audio>/<stem>.wav` | user, `synth` | audio |
//! | `<beats>/<stem>.txt` | user, `synth` | one beat time per line |
//! | `<annotations>/<stem>.chords.lab`, `.keys.lab` | user, `synth` | ground truth |
//! | `<chroma>/<stem>.treble.chroma`, `.bass.chroma`, `.tuning` | `chroma` | features |
//! | `<model>` | `train` | model file; `<model>.split` lists the held-out songs |
//! | `<out>/<stem>.{keys,chords,bass}.lab`, `.frames`, `timing.csv` | `decode` | predictions |
//!
//! Settings come from a flat `key = value` file (`--config`, or the
//! `HP_CONFIG` environment variable) and are overridden by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::annotations::{
    bass_name, intervals_from_states, parse_lab, Alphabet, AlphabetKind, FrameLabels, Key,
};
use crate::audio_io::{load_wav, write_wav16};
use crate::chroma::{extract_features, read_beats, read_chromagram, write_chromagram, FeatureConfig};
use crate::decode::{viterbi_joint, Constraints};
use crate::eval::{
    bass_frame_counts, first_key, overlap, paired_t_test, predominant_key, ComparisonMode,
    EvalReport, SongScores,
};
use crate::model::{load_model, save_model, train, LabelledSong, TrainConfig};
use crate::synth::{synthetic_song, SynthConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}, line {line}: {detail}")]
    Config {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("directory {0} does not exist")]
    MissingDir(String),
    #[error("missing setting: {0}")]
    MissingSetting(&'static str),
    #[error("no songs found in {0}")]
    NoSongs(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

#[derive(Parser, Debug)]
#[command(name = "keychord", version, about = "Key, chord and bass estimation from audio")]
pub struct Cli {
    /// Flat key=value configuration file; defaults to $HP_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-song work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract beat-synchronous treble and bass chromagrams.
    Chroma(ChromaArgs),
    /// Train a model from chromagrams and annotations.
    Train(TrainArgs),
    /// Decode keys, chords and basses.
    Decode(DecodeArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Write a labelled synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
pub struct ChromaArgs {
    #[arg(long)]
    pub audio: Option<PathBuf>,
    #[arg(long)]
    pub beats: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip tuning estimation and assume A4 = 440 Hz.
    #[arg(long)]
    pub no_tuning: bool,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub chroma: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub alphabet: Option<AlphabetKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Train on this fraction of each album (album = stem before `__`).
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct DecodeArgs {
    #[arg(long)]
    pub chroma: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Key-transition threshold; a comma list runs a sweep.
    #[arg(long, value_delimiter = ',')]
    pub gamma: Vec<u64>,
    /// Basses kept per chord; a comma list runs a sweep.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<usize>,
    #[arg(long)]
    pub cac: bool,
    /// Decode only the songs held out by the model's split file.
    #[arg(long)]
    pub held_out: bool,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Second prediction directory for a paired t-test on OR.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Directory for report.txt and report.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub songs: usize,
    #[arg(long, default_value_t = 2)]
    pub albums: usize,
    #[arg(long, default_value_t = 30.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0.0)]
    pub inversion_rate: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub audio_dir: Option<PathBuf>,
    pub annotation_dir: Option<PathBuf>,
    pub beats_dir: Option<PathBuf>,
    pub chroma_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub estimate_tuning: bool,
    pub train: TrainConfig,
    pub gammas: Vec<u64>,
    pub taus: Vec<usize>,
    pub cac: bool,
    pub train_fraction: f64,
    /// Decode only the songs listed as held out next to the model.
    pub held_out_only: bool,
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            audio_dir: None,
            annotation_dir: None,
            beats_dir: None,
            chroma_dir: None,
            model_path: None,
            out_dir: None,
            estimate_tuning: true,
            train: TrainConfig::default(),
            gammas: vec![],
            taus: vec![],
            cac: false,
            train_fraction: 1.0,
            held_out_only: false,
            seed: 0,
            jobs: None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list item {s:?}")))
        .collect()
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| CliError::Config {
                path: origin.to_string(),
                line: i + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected key = value".into()))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| err(e.to_string()));
            let flag = |v: &str| v.parse::<bool>().map_err(|e| err(e.to_string()));
            match key {
                "audio_dir" => self.audio_dir = Some(value.into()),
                "annotation_dir" => self.annotation_dir = Some(value.into()),
                "beats_dir" => self.beats_dir = Some(value.into()),
                "chroma_dir" => self.chroma_dir = Some(value.into()),
                "model" => self.model_path = Some(value.into()),
                "out_dir" => self.out_dir = Some(value.into()),
                "estimate_tuning" => self.estimate_tuning = flag(value)?,
                "alphabet" => self.train.alphabet = value.parse().map_err(err)?,
                "alpha" => self.train.alpha = num(value)?,
                "epsilon" => self.train.epsilon = num(value)?,
                "gamma" => self.gammas = parse_list(value).map_err(err)?,
                "tau" => self.taus = parse_list(value).map_err(err)?,
                "cac" => self.cac = flag(value)?,
                "train_fraction" => self.train_fraction = num(value)?,
                "held_out_only" => self.held_out_only = flag(value)?,
                "seed" => self.seed = value.parse().map_err(|_| err("bad seed".into()))?,
                "jobs" => self.jobs = Some(value.parse().map_err(|_| err("bad jobs".into()))?),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        let mut cfg = Self::default();
        cfg.apply_config_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    fn constraint_grid(&self) -> Vec<Constraints> {
        let gammas: Vec<Option<u64>> = if self.gammas.is_empty() {
            vec![None]
        } else {
            self.gammas.iter().map(|&g| Some(g)).collect()
        };
        let taus: Vec<Option<usize>> = if self.taus.is_empty() {
            vec![None]
        } else {
            self.taus.iter().map(|&t| Some(t)).collect()
        };
        gammas
            .iter()
            .flat_map(|&gamma| {
                taus.iter().map(move |&tau| Constraints {
                    gamma,
                    tau,
                    cac: self.cac,
                })
            })
            .collect()
    }
}

fn require(p: &Option<PathBuf>, what: &'static str) -> Result<PathBuf, CliError> {
    p.clone().ok_or(CliError::MissingSetting(what))
}

fn require_dir(p: &Option<PathBuf>, what: &'static str) -> Result<PathBuf, CliError> {
    let p = require(p, what)?;
    if !p.is_dir() {
        return Err(CliError::MissingDir(p.display().to_string()));
    }
    Ok(p)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    crate::write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Sorted stems of files in `dir` whose names end with `suffix`.
pub fn list_stems(dir: &Path, suffix: &str) -> Result<Vec<String>, CliError> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(suffix)).map(String::from))
        .filter(|s| !s.is_empty())
        .collect();
    stems.sort();
    Ok(stems)
}

/// Album of a song: the stem up to the first `__`, or the whole stem.
pub fn album_of(stem: &str) -> &str {
    stem.split_once("__").map_or(stem, |(a, _)| a)
}

/// Splits songs into (train, test), taking `round(fraction · n)` songs of
/// every album for training after a seeded shuffle.
pub fn album_split(stems: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut albums: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for s in stems {
        albums.entry(album_of(s)).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut songs) in albums {
        songs.shuffle(&mut rng);
        let n_train = ((fraction * songs.len() as f64).round() as usize).min(songs.len());
        train.extend(songs[..n_train].iter().map(|s| s.to_string()));
        test.extend(songs[n_train..].iter().map(|s| s.to_string()));
    }
    train.sort();
    test.sort();
    (train, test)
}

/// Outcome of a command: per-song failures are reported, not fatal.
#[derive(Debug, Default)]
pub struct RunSummary {
    pub processed: usize,
    pub failures: Vec<(String, String)>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, results: Vec<(String, Result<(), String>)>) {
        for (stem, r) in results {
            match r {
                Ok(()) => self.processed += 1,
                Err(e) => {
                    log::error!("{stem}: {e}");
                    self.failures.push((stem, e));
                }
            }
        }
    }
}

pub fn cmd_chroma(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let audio_dir = require_dir(&cfg.audio_dir, "audio_dir")?;
    let out = require(&cfg.chroma_dir, "chroma output directory")?;
    create_dir(&out)?;
    let stems = list_stems(&audio_dir, ".wav")?;
    if stems.is_empty() {
        return Err(CliError::NoSongs(audio_dir.display().to_string()));
    }
    let features = FeatureConfig {
        estimate_tuning: cfg.estimate_tuning,
        ..FeatureConfig::default()
    };
    let results = stems
        .par_iter()
        .map(|stem| {
            let r = (|| -> Result<(), String> {
                let started = Instant::now();
                let audio = load_wav(audio_dir.join(format!("{stem}.wav"))).map_err(|e| e.to_string())?;
                let beats = match &cfg.beats_dir {
                    Some(d) if d.join(format!("{stem}.txt")).is_file() => {
                        Some(read_beats(d.join(format!("{stem}.txt"))).map_err(|e| e.to_string())?)
                    }
                    _ => {
                        log::info!("{stem}: no beat file, using a fixed 0.5 s grid");
                        None
                    }
                };
                let f = extract_features(&audio, beats.as_deref(), &features).map_err(|e| e.to_string())?;
                write_chromagram(&f.treble, out.join(format!("{stem}.treble.chroma")))
                    .map_err(|e| e.to_string())?;
                write_chromagram(&f.bass, out.join(format!("{stem}.bass.chroma")))
                    .map_err(|e| e.to_string())?;
                let secs = started.elapsed().as_secs_f64();
                let text = format!("tuning_cents {}\nfeature_seconds {secs}\n", f.tuning_cents);
                crate::write_atomic(&out.join(format!("{stem}.tuning")), text.as_bytes())
                    .map_err(|e| e.to_string())
            })();
            (stem.clone(), r)
        })
        .collect();
    let mut summary = RunSummary::default();
    summary.record(results);
    Ok(summary)
}

fn feature_seconds(chroma_dir: &Path, stem: &str) -> Option<f64> {
    let text = std::fs::read_to_string(chroma_dir.join(format!("{stem}.tuning"))).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("feature_seconds "))
        .and_then(|v| v.trim().parse().ok())
}

fn load_song(
    chroma_dir: &Path,
    ann_dir: &Path,
    stem: &str,
    alphabet: &Alphabet,
) -> Result<LabelledSong, String> {
    let treble = read_chromagram(chroma_dir.join(format!("{stem}.treble.chroma"))).map_err(|e| e.to_string())?;
    let bass = read_chromagram(chroma_dir.join(format!("{stem}.bass.chroma"))).map_err(|e| e.to_string())?;
    let labels = frame_labels_for(&treble.times, ann_dir, stem, alphabet)?;
    Ok(LabelledSong {
        treble,
        bass,
        labels,
    })
}

/// Ground truth aligned to the given frame boundaries.
fn frame_labels_for(
    times: &[(f64, f64)],
    ann_dir: &Path,
    stem: &str,
    alphabet: &Alphabet,
) -> Result<FrameLabels, String> {
    let chords = parse_lab(ann_dir.join(format!("{stem}.chords.lab"))).map_err(|e| e.to_string())?;
    let keys_path = ann_dir.join(format!("{stem}.keys.lab"));
    let keys = if keys_path.is_file() {
        Some(parse_lab(&keys_path).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let mut boundaries: Vec<f64> = times.iter().map(|t| t.0).collect();
    if let Some(last) = times.last() {
        boundaries.push(last.1);
    }
    FrameLabels::from_annotations(&chords, keys.as_ref(), &boundaries, alphabet).map_err(|e| e.to_string())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let chroma_dir = require_dir(&cfg.chroma_dir, "chroma_dir")?;
    let ann_dir = require_dir(&cfg.annotation_dir, "annotation_dir")?;
    let model_path = require(&cfg.model_path, "model")?;
    let alphabet = Alphabet::new(cfg.train.alphabet);
    let stems: Vec<String> = list_stems(&chroma_dir, ".treble.chroma")?
        .into_iter()
        .filter(|s| ann_dir.join(format!("{s}.chords.lab")).is_file())
        .collect();
    let (train_stems, test_stems) = album_split(&stems, cfg.train_fraction, cfg.seed);
    if train_stems.is_empty() {
        return Err(CliError::NoSongs(chroma_dir.display().to_string()));
    }
    let loaded: Vec<(String, Result<LabelledSong, String>)> = train_stems
        .par_iter()
        .map(|s| (s.clone(), load_song(&chroma_dir, &ann_dir, s, &alphabet)))
        .collect();
    let mut summary = RunSummary::default();
    let mut songs = Vec::new();
    let mut results = Vec::new();
    for (stem, r) in loaded {
        match r {
            Ok(song) => {
                songs.push(song);
                results.push((stem, Ok(())));
            }
            Err(e) => results.push((stem, Err(e))),
        }
    }
    summary.record(results);
    if songs.is_empty() {
        return Err(CliError::NoSongs(chroma_dir.display().to_string()));
    }
    let model = train(&songs, &cfg.train)?;
    if let Some(dir) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_model(&model, &model_path)?;
    let mut split = String::new();
    for s in &train_stems {
        split.push_str(&format!("train {s}\n"));
    }
    for s in &test_stems {
        split.push_str(&format!("test {s}\n"));
    }
    write_file(&split_path(&model_path), &split)?;
    Ok(summary)
}

fn split_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".split");
    PathBuf::from(s)
}

fn constraint_dir_name(c: &Constraints) -> String {
    let g = c.gamma.map_or("none".to_string(), |g| g.to_string());
    let t = c.tau.map_or("none".to_string(), |t| t.to_string());
    format!("gamma{g}_tau{t}{}", if c.cac { "_cac" } else { "" })
}

pub fn cmd_decode(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let chroma_dir = require_dir(&cfg.chroma_dir, "chroma_dir")?;
    let model_path = require(&cfg.model_path, "model")?;
    let out = require(&cfg.out_dir, "out_dir")?;
    let model = load_model(&model_path)?;
    let mut stems = list_stems(&chroma_dir, ".treble.chroma")?;
    if let Some(held) = cfg_held_out(cfg, &model_path)? {
        stems.retain(|s| held.contains(s));
    }
    if stems.is_empty() {
        return Err(CliError::NoSongs(chroma_dir.display().to_string()));
    }
    let grid = cfg.constraint_grid();
    let sweep = grid.len() > 1;
    create_dir(&out)?;
    let mut timing = String::from("song,gamma,tau,cac,feature_seconds,decode_seconds,transitions_expanded,log_prob\n");
    let mut summary = RunSummary::default();
    for constraints in &grid {
        let dir = if sweep { out.join(constraint_dir_name(constraints)) } else { out.clone() };
        create_dir(&dir)?;
        let rows: Vec<(String, Result<String, String>)> = stems
            .par_iter()
            .map(|stem| {
                let r = (|| -> Result<String, String> {
                    let treble = read_chromagram(chroma_dir.join(format!("{stem}.treble.chroma")))
                        .map_err(|e| e.to_string())?;
                    let bass = read_chromagram(chroma_dir.join(format!("{stem}.bass.chroma")))
                        .map_err(|e| e.to_string())?;
                    let started = Instant::now();
                    let (path, stats) = viterbi_joint(&model, constraints, &treble, &bass).map_err(|e| e.to_string())?;
                    let secs = started.elapsed().as_secs_f64();
                    write_predictions(&dir, stem, &treble.times, &path, &model.alphabet)?;
                    Ok(format!(
                        "{stem},{},{},{},{},{secs},{},{}\n",
                        constraints.gamma.map_or(String::new(), |g| g.to_string()),
                        constraints.tau.map_or(String::new(), |t| t.to_string()),
                        constraints.cac,
                        feature_seconds(&chroma_dir, stem).map_or(String::new(), |f| f.to_string()),
                        stats.transitions_expanded,
                        path.log_prob
                    ))
                })();
                (stem.clone(), r)
            })
            .collect();
        let mut results = Vec::new();
        for (stem, r) in rows {
            match r {
                Ok(row) => {
                    timing.push_str(&row);
                    results.push((stem, Ok(())));
                }
                Err(e) => results.push((stem, Err(e))),
            }
        }
        summary.record(results);
    }
    write_file(&out.join("timing.csv"), &timing)?;
    Ok(summary)
}

fn cfg_held_out(cfg: &RunConfig, model_path: &Path) -> Result<Option<Vec<String>>, CliError> {
    if !cfg.held_out_only {
        return Ok(None);
    }
    let path = split_path(model_path);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(Some(
        text.lines()
            .filter_map(|l| l.strip_prefix("test "))
            .map(|s| s.trim().to_string())
            .collect(),
    ))
}

/// Writes merged key, chord and bass `.lab` files and the per-frame labels.
pub fn write_predictions(
    dir: &Path,
    stem: &str,
    times: &[(f64, f64)],
    path: &crate::decode::DecodePath,
    alphabet: &Alphabet,
) -> Result<(), String> {
    let keys = intervals_from_states(times, &path.keys, |k| Key::from_index(k).to_string());
    let chords = intervals_from_states(times, &path.chords, |c| alphabet.name(c));
    let basses = intervals_from_states(times, &path.basses, |b| bass_name(b).to_string());
    let frames = FrameLabels::from_states(times.to_vec(), &path.keys, &path.chords, &path.basses);
    let files = [
        (format!("{stem}.keys.lab"), keys.to_lab_string()),
        (format!("{stem}.chords.lab"), chords.to_lab_string()),
        (format!("{stem}.bass.lab"), basses.to_lab_string()),
        (format!("{stem}.frames"), frames.to_text(alphabet)),
    ];
    for (name, text) in files {
        crate::write_atomic(&dir.join(name), text.as_bytes()).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn score_song(pred_dir: &Path, ann_dir: &Path, stem: &str) -> Result<SongScores, String> {
    let gt = parse_lab(ann_dir.join(format!("{stem}.chords.lab"))).map_err(|e| e.to_string())?;
    let pred_path = pred_dir.join(format!("{stem}.chords.lab"));
    let majmin = |p| overlap(p, &gt, ComparisonMode::MajMin).map_err(|e| e.to_string());
    if !pred_path.is_file() {
        let empty = crate::annotations::IntervalLabels::default();
        return Ok(SongScores {
            song: stem.to_string(),
            duration: majmin(&empty)?.total,
            or: 0.0,
            cp: 0.0,
            ncp: 0.0,
            key_correct: ann_dir.join(format!("{stem}.keys.lab")).is_file().then_some(false),
            bass_frames: None,
            missing: true,
        });
    }
    let pred = parse_lab(&pred_path).map_err(|e| e.to_string())?;
    let or = majmin(&pred)?;
    let ratio = |m| overlap(&pred, &gt, m).map(|o| o.ratio()).map_err(|e| e.to_string());
    let gt_keys = ann_dir.join(format!("{stem}.keys.lab"));
    let pred_keys = pred_dir.join(format!("{stem}.keys.lab"));
    let key_correct = if gt_keys.is_file() {
        let gt_k = parse_lab(&gt_keys).map_err(|e| e.to_string())?;
        let truth = first_key(&gt_k).map_err(|e| e.to_string())?;
        Some(match parse_lab(&pred_keys) {
            Ok(p) => predominant_key(&p).ok() == Some(truth),
            Err(_) => false,
        })
    } else {
        None
    };
    let frames_path = pred_dir.join(format!("{stem}.frames"));
    let alphabet = Alphabet::new(AlphabetKind::Full121);
    let bass_frames = match std::fs::read_to_string(&frames_path) {
        Ok(text) => {
            let pred_frames = FrameLabels::parse_text(&text, &alphabet)
                .or_else(|_| FrameLabels::parse_text(&text, &Alphabet::new(AlphabetKind::MajMin25)))
                .map_err(|e| e.to_string())?;
            let gt_frames = frame_labels_for(&pred_frames.times, ann_dir, stem, &alphabet)?;
            Some(bass_frame_counts(&pred_frames, &gt_frames).map_err(|e| e.to_string())?)
        }
        Err(_) => None,
    };
    Ok(SongScores {
        song: stem.to_string(),
        duration: or.total,
        or: or.ratio(),
        cp: ratio(ComparisonMode::Exact)?,
        ncp: ratio(ComparisonMode::NoteSet)?,
        key_correct,
        bass_frames,
        missing: false,
    })
}

/// Report plus per-song failures; missing predictions score zero and are
/// counted as failures.
pub fn cmd_eval(cfg: &RunConfig, compare: Option<&Path>) -> Result<(EvalReport, RunSummary), CliError> {
    let pred_dir = require_dir(&cfg.out_dir, "prediction directory")?;
    let ann_dir = require_dir(&cfg.annotation_dir, "annotation_dir")?;
    let stems = list_stems(&ann_dir, ".chords.lab")?;
    if stems.is_empty() {
        return Err(CliError::NoSongs(ann_dir.display().to_string()));
    }
    let scored: Vec<(String, Result<SongScores, String>)> = stems
        .par_iter()
        .map(|s| (s.clone(), score_song(&pred_dir, &ann_dir, s)))
        .collect();
    let mut summary = RunSummary::default();
    let mut songs = Vec::new();
    let mut results = Vec::new();
    for (stem, r) in scored {
        match r {
            Ok(s) if s.missing => {
                results.push((stem, Err("missing prediction, scored 0".to_string())));
                songs.push(s);
            }
            Ok(s) => {
                results.push((stem, Ok(())));
                songs.push(s);
            }
            Err(e) => results.push((stem, Err(e))),
        }
    }
    summary.record(results);
    let report = EvalReport::new(songs)?;
    if let Some(other) = compare {
        let b: Vec<f64> = report
            .songs
            .iter()
            .map(|s| score_song(other, &ann_dir, &s.song).map(|x| x.or).unwrap_or(0.0))
            .collect();
        let a: Vec<f64> = report.songs.iter().map(|s| s.or).collect();
        match paired_t_test(&a, &b) {
            Ok(t) => println!("paired t-test on OR: t = {:.4}, df = {}, p = {:.6}", t.t, t.df, t.p),
            Err(e) => println!("paired t-test on OR: {e}"),
        }
    }
    Ok((report, summary))
}

pub fn cmd_synth(out: &Path, args: &SynthArgs, seed: u64) -> Result<RunSummary, CliError> {
    create_dir(out)?;
    let mut summary = RunSummary::default();
    let cfg = SynthConfig {
        duration: args.duration,
        inversion_rate: args.inversion_rate,
        ..SynthConfig::default()
    };
    let albums = args.albums.max(1);
    let results = (0..args.songs)
        .into_par_iter()
        .map(|i| {
            let stem = format!("album{}__song{:02}", i % albums, i);
            let r = (|| -> Result<(), String> {
                let song = synthetic_song(seed.wrapping_add(i as u64), &cfg).map_err(|e| e.to_string())?;
                write_wav16(&song.audio, out.join(format!("{stem}.wav"))).map_err(|e| e.to_string())?;
                let beats: String = song.beats.iter().map(|b| format!("{b}\n")).collect();
                for (name, text) in [
                    (format!("{stem}.chords.lab"), song.chords.to_lab_string()),
                    (format!("{stem}.keys.lab"), song.keys.to_lab_string()),
                    (format!("{stem}.txt"), beats),
                ] {
                    crate::write_atomic(&out.join(name), text.as_bytes()).map_err(|e| e.to_string())?;
                }
                Ok(())
            })();
            (stem, r)
        })
        .collect();
    summary.record(results);
    Ok(summary)
}

/// Resolves settings: defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let config_path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("HP_CONFIG").map(PathBuf::from));
    let mut cfg = match config_path {
        Some(p) => RunConfig::from_file(&p)?,
        None => RunConfig::default(),
    };
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            *slot = v.clone();
        }
    };
    match &cli.command {
        Command::Chroma(a) => {
            set(&mut cfg.audio_dir, &a.audio);
            set(&mut cfg.beats_dir, &a.beats);
            set(&mut cfg.chroma_dir, &a.out);
            if a.no_tuning {
                cfg.estimate_tuning = false;
            }
        }
        Command::Train(a) => {
            set(&mut cfg.chroma_dir, &a.chroma);
            set(&mut cfg.annotation_dir, &a.annotations);
            set(&mut cfg.model_path, &a.model);
            if let Some(k) = a.alphabet {
                cfg.train.alphabet = k;
            }
            if let Some(x) = a.alpha {
                cfg.train.alpha = x;
            }
            if let Some(f) = a.train_fraction {
                cfg.train_fraction = f;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
        }
        Command::Decode(a) => {
            set(&mut cfg.chroma_dir, &a.chroma);
            set(&mut cfg.model_path, &a.model);
            set(&mut cfg.out_dir, &a.out);
            if !a.gamma.is_empty() {
                cfg.gammas = a.gamma.clone();
            }
            if !a.tau.is_empty() {
                cfg.taus = a.tau.clone();
            }
            if a.cac {
                cfg.cac = true;
            }
            if a.held_out {
                cfg.held_out_only = true;
            }
        }
        Command::Eval(a) => {
            set(&mut cfg.out_dir, &a.pred);
            set(&mut cfg.annotation_dir, &a.annotations);
        }
        Command::Synth(a) => {
            set(&mut cfg.out_dir, &a.out);
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
        }
    }
    Ok(cfg)
}

fn run_inner(cli: &Cli, cfg: &RunConfig) -> Result<RunSummary, CliError> {
    match &cli.command {
        Command::Chroma(_) => cmd_chroma(cfg),
        Command::Train(_) => cmd_train(cfg),
        Command::Decode(_) => cmd_decode(cfg),
        Command::Eval(a) => {
            let (report, summary) = cmd_eval(cfg, a.compare.as_deref())?;
            print!("{}", report.to_table());
            if let Some(dir) = &a.out {
                create_dir(dir)?;
                write_file(&dir.join("report.txt"), &report.to_table())?;
                write_file(&dir.join("report.csv"), &report.to_csv())?;
            }
            Ok(summary)
        }
        Command::Synth(a) => cmd_synth(&require(&cfg.out_dir, "out_dir")?, a, cfg.seed),
    }
}

/// Runs a parsed command line; `Ok(false)` means some songs failed.
pub fn run(cli: &Cli) -> Result<bool, CliError> {
    let cfg = resolve(cli)?;
    let summary = match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Io(e.to_string()))?
            .install(|| run_inner(cli, &cfg))?,
        None => run_inner(cli, &cfg)?,
    };
    for (stem, e) in &summary.failures {
        eprintln!("{stem}: {e}");
    }
    eprintln!("{} songs processed, {} failed", summary.processed, summary.failures.len());
    Ok(summary.success())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_and_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_config_text("# comment\nalphabet = full121\ngamma = 0, 2\ncac = true\nseed=7\n", "t")
            .unwrap();
        assert_eq!(cfg.train.alphabet, AlphabetKind::Full121);
        assert_eq!(cfg.gammas, vec![0, 2]);
        assert!(cfg.cac);
        assert_eq!(cfg.seed, 7);
        assert!(matches!(
            cfg.apply_config_text("bogus = 1", "t"),
            Err(CliError::Config { line: 1, .. })
        ));
        assert!(cfg.apply_config_text("alpha", "t").is_err());
        assert_eq!(cfg.constraint_grid().len(), 2);

        let cli = Cli::parse_from(["keychord", "decode", "--gamma", "1,3", "--tau", "3", "--cac"]);
        let resolved = resolve(&cli).unwrap();
        assert_eq!(resolved.gammas, vec![1, 3]);
        assert_eq!(resolved.taus, vec![3]);
        assert_eq!(resolved.constraint_grid().len(), 2);
    }

    #[test]
    fn album_split_takes_two_thirds_per_album() {
        let stems: Vec<String> = (0..6)
            .map(|i| format!("a__{i}"))
            .chain((0..3).map(|i| format!("b__{i}")))
            .collect();
        let (train, test) = album_split(&stems, 2.0 / 3.0, 1);
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 3);
        assert_eq!(train.iter().filter(|s| album_of(s) == "b").count(), 2);
        assert_eq!(album_split(&stems, 2.0 / 3.0, 1), (train, test));
        assert_eq!(album_of("solo"), "solo");
    }

    #[test]
    fn constraint_directory_names() {
        let c = Constraints { gamma: Some(2), tau: None, cac: true };
        assert_eq!(constraint_dir_name(&c), "gamma2_taunone_cac");
    }
}
