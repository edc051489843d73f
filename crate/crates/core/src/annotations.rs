//! Ground-truth annotations: `.lab` interval files, chord symbols, key labels,
//! the chord/key/bass alphabets and beat-synchronous frame labels.
//!
//! Chord symbols follow the `ROOT[:QUALITY][/DEGREE]` shorthand. The model
//! vocabulary has ten chord types (maj, min, maj/3, maj/5, maj6, maj7, min7,
//! 7, dim, aug) over twelve roots plus `N`, and a reduced 25-chord
//! major/minor alphabet. Ground-truth qualities outside the ten types are
//! reduced by [`reduce_quality`]; bass notes of arbitrary inversions are
//! kept exactly through [`parse_label`].

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const N_KEYS: usize = 24;
pub const N_BASSES: usize = 13;
pub const NO_BASS: usize = 12;

pub const PITCH_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("line {line}: malformed record {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: interval ends at {end} before it starts at {start}")]
    EndBeforeStart { line: usize, start: f64, end: f64 },
    #[error("interval starting at {start} overlaps the previous one ending at {prev_end}")]
    Overlap { start: f64, prev_end: f64 },
    #[error("unparseable root in {0:?}")]
    BadRoot(String),
    #[error("unknown chord quality {0:?}")]
    UnknownQuality(String),
    #[error("unsupported bass degree {0:?}; only 3 and 5 are representable")]
    UnsupportedDegree(String),
    #[error("inversion {0:?} is only representable on a major chord")]
    InversionOnNonMajor(String),
    #[error("unparseable key label {0:?}")]
    BadKey(String),
    #[error("chord {0} is not part of the {1} alphabet")]
    OutsideAlphabet(String, AlphabetKind),
    #[error("unknown state name {0:?}")]
    UnknownState(String),
    #[error("beat times must be strictly increasing")]
    NonMonotoneBeats,
    #[error("cannot read {path}: {detail}")]
    Io { path: String, detail: String },
}

/// The eight chord qualities of the model vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quality {
    Maj,
    Min,
    Maj6,
    Maj7,
    Min7,
    Dom7,
    Dim,
    Aug,
}

impl Quality {
    pub const ALL: [Quality; 8] = [
        Quality::Maj,
        Quality::Min,
        Quality::Maj6,
        Quality::Maj7,
        Quality::Min7,
        Quality::Dom7,
        Quality::Dim,
        Quality::Aug,
    ];

    /// Intervals above the root, in semitones.
    pub fn template(self) -> &'static [u8] {
        match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Maj6 => &[0, 4, 7, 9],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Min7 => &[0, 3, 7, 10],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Dim => &[0, 3, 6],
            Quality::Aug => &[0, 4, 8],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Maj => "maj",
            Quality::Min => "min",
            Quality::Maj6 => "maj6",
            Quality::Maj7 => "maj7",
            Quality::Min7 => "min7",
            Quality::Dom7 => "7",
            Quality::Dim => "dim",
            Quality::Aug => "aug",
        }
    }

    /// Major/minor reduction used by the 25-chord alphabet.
    pub fn is_minor_family(self) -> bool {
        matches!(self, Quality::Min | Quality::Min7 | Quality::Dim)
    }
}

/// Bass position of a chord in the model vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Inversion {
    Root,
    Third,
    Fifth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChordSymbol {
    NoChord,
    Chord {
        root: u8,
        quality: Quality,
        inversion: Inversion,
    },
}

impl ChordSymbol {
    pub fn chord(root: u8, quality: Quality) -> Self {
        ChordSymbol::Chord {
            root: root % 12,
            quality,
            inversion: Inversion::Root,
        }
    }

    pub fn inverted(root: u8, quality: Quality, inversion: Inversion) -> Self {
        ChordSymbol::Chord {
            root: root % 12,
            quality,
            inversion,
        }
    }

    pub fn root(&self) -> Option<u8> {
        match self {
            ChordSymbol::NoChord => None,
            ChordSymbol::Chord { root, .. } => Some(*root),
        }
    }

    /// Bass state: the sounding bass pitch class, or [`NO_BASS`].
    pub fn derive_bass(&self) -> usize {
        match *self {
            ChordSymbol::NoChord => NO_BASS,
            ChordSymbol::Chord {
                root,
                quality,
                inversion,
            } => {
                let t = quality.template();
                let offset = match inversion {
                    Inversion::Root => 0,
                    Inversion::Third => t[1],
                    Inversion::Fifth => t[2],
                };
                ((root + offset) % 12) as usize
            }
        }
    }

    /// Sounding pitch classes; inversions do not change the set.
    pub fn pitch_classes(&self) -> BTreeSet<u8> {
        match *self {
            ChordSymbol::NoChord => BTreeSet::new(),
            ChordSymbol::Chord { root, quality, .. } => {
                quality.template().iter().map(|i| (root + i) % 12).collect()
            }
        }
    }

    pub fn transpose(&self, semitones: i32) -> Self {
        match *self {
            ChordSymbol::NoChord => ChordSymbol::NoChord,
            ChordSymbol::Chord {
                root,
                quality,
                inversion,
            } => ChordSymbol::Chord {
                root: shift_pc(root as usize, semitones) as u8,
                quality,
                inversion,
            },
        }
    }
}

impl fmt::Display for ChordSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ChordSymbol::NoChord => f.write_str("N"),
            ChordSymbol::Chord {
                root,
                quality,
                inversion,
            } => {
                write!(f, "{}:{}", PITCH_NAMES[root as usize], quality.name())?;
                match inversion {
                    Inversion::Root => Ok(()),
                    Inversion::Third => f.write_str("/3"),
                    Inversion::Fifth => f.write_str("/5"),
                }
            }
        }
    }
}

impl FromStr for ChordSymbol {
    type Err = AnnotationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_chord_symbol(s)
    }
}

pub(crate) fn shift_pc(pc: usize, semitones: i32) -> usize {
    (pc as i32 + semitones).rem_euclid(12) as usize
}

/// Parses a note name such as `A`, `Bb`, `F#`, `Cbb`.
pub fn parse_root(text: &str) -> Result<u8, AnnotationError> {
    let mut chars = text.chars();
    let base: i32 = match chars.next() {
        Some('C') => 0,
        Some('D') => 2,
        Some('E') => 4,
        Some('F') => 5,
        Some('G') => 7,
        Some('A') => 9,
        Some('B') => 11,
        _ => return Err(AnnotationError::BadRoot(text.to_string())),
    };
    let mut pc = base;
    for c in chars {
        match c {
            '#' | '♯' => pc += 1,
            'b' | '♭' => pc -= 1,
            _ => return Err(AnnotationError::BadRoot(text.to_string())),
        }
    }
    Ok(pc.rem_euclid(12) as u8)
}

/// Semitone offset of a scale degree such as `3`, `b7`, `#5`, `9`.
fn degree_semitones(text: &str) -> Option<i32> {
    let digits = text.trim_start_matches(['b', '#']);
    let accidental: i32 = text[..text.len() - digits.len()]
        .chars()
        .map(|c| if c == '#' { 1 } else { -1 })
        .sum();
    let degree: usize = digits.parse().ok()?;
    if degree == 0 {
        return None;
    }
    const MAJOR_SCALE: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
    let d = degree - 1;
    Some(MAJOR_SCALE[d % 7] + 12 * (d / 7) as i32 + accidental)
}

/// Shorthand qualities found in isophonics-style annotations, as pitch sets.
fn shorthand_template(name: &str) -> Option<&'static [u8]> {
    Some(match name {
        "maj" | "" => &[0, 4, 7],
        "min" => &[0, 3, 7],
        "dim" => &[0, 3, 6],
        "aug" => &[0, 4, 8],
        "maj7" => &[0, 4, 7, 11],
        "min7" => &[0, 3, 7, 10],
        "7" => &[0, 4, 7, 10],
        "dim7" => &[0, 3, 6, 9],
        "hdim7" => &[0, 3, 6, 10],
        "minmaj7" => &[0, 3, 7, 11],
        "maj6" => &[0, 4, 7, 9],
        "min6" => &[0, 3, 7, 9],
        "9" => &[0, 2, 4, 7, 10],
        "maj9" => &[0, 2, 4, 7, 11],
        "min9" => &[0, 2, 3, 7, 10],
        "11" => &[0, 2, 4, 5, 7, 10],
        "min11" => &[0, 2, 3, 5, 7, 10],
        "13" => &[0, 2, 4, 5, 7, 9, 10],
        "maj13" => &[0, 2, 4, 5, 7, 9, 11],
        "min13" => &[0, 2, 3, 5, 7, 9, 10],
        "sus2" => &[0, 2, 7],
        "sus4" => &[0, 5, 7],
        "5" => &[0, 7],
        "1" => &[0],
        _ => return None,
    })
}

fn exact_quality(name: &str) -> Option<Quality> {
    Some(match name {
        "maj" | "" => Quality::Maj,
        "min" => Quality::Min,
        "maj6" => Quality::Maj6,
        "maj7" => Quality::Maj7,
        "min7" => Quality::Min7,
        "7" => Quality::Dom7,
        "dim" => Quality::Dim,
        "aug" => Quality::Aug,
        _ => return None,
    })
}

/// Reduces an arbitrary interval set (semitones above the root) to the
/// model quality with the largest overlap, measured as intersection over
/// union; ties go to the earlier entry of [`Quality::ALL`].
pub fn reduce_quality(intervals: &BTreeSet<u8>) -> Quality {
    let score = |q: Quality| {
        let t: BTreeSet<u8> = q.template().iter().copied().collect();
        let inter = t.intersection(intervals).count() as f64;
        let union = t.union(intervals).count() as f64;
        inter / union
    };
    let mut best = Quality::Maj;
    let mut best_score = f64::NEG_INFINITY;
    for q in Quality::ALL {
        let s = score(q);
        if s > best_score {
            best = q;
            best_score = s;
        }
    }
    best
}

struct Split<'a> {
    root: &'a str,
    quality: Option<&'a str>,
    degree: Option<&'a str>,
}

fn split_symbol(text: &str) -> Split<'_> {
    let (head, degree) = match text.split_once('/') {
        Some((h, d)) => (h, Some(d)),
        None => (text, None),
    };
    let (root, quality) = match head.split_once(':') {
        Some((r, q)) => (r, Some(q)),
        None => (head, None),
    };
    Split {
        root,
        quality,
        degree,
    }
}

/// Strict parser for the model vocabulary: qualities must be one of the
/// eight model types and only `maj` chords may carry `/3` or `/5`.
pub fn parse_chord_symbol(text: &str) -> Result<ChordSymbol, AnnotationError> {
    let text = text.trim();
    if text == "N" {
        return Ok(ChordSymbol::NoChord);
    }
    let parts = split_symbol(text);
    let root = parse_root(parts.root)?;
    let qname = parts.quality.unwrap_or("maj");
    let quality =
        exact_quality(qname).ok_or_else(|| AnnotationError::UnknownQuality(qname.to_string()))?;
    let inversion = match parts.degree {
        None | Some("1") => Inversion::Root,
        Some("3") => Inversion::Third,
        Some("5") => Inversion::Fifth,
        Some(other) => return Err(AnnotationError::UnsupportedDegree(other.to_string())),
    };
    if inversion != Inversion::Root && quality != Quality::Maj {
        return Err(AnnotationError::InversionOnNonMajor(text.to_string()));
    }
    Ok(ChordSymbol::Chord {
        root,
        quality,
        inversion,
    })
}

/// A ground-truth chord label reduced to the model vocabulary, with the
/// bass pitch class taken verbatim from the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedLabel {
    pub symbol: ChordSymbol,
    pub bass: usize,
}

/// Lenient parser for annotation files. Returns `None` for the `X`
/// (unknown) label. Qualities outside the model vocabulary are reduced with
/// [`reduce_quality`]; interval lists such as `C:(1,3,5)` and added-note
/// suffixes such as `maj(9)` are honoured. The bass is `root + degree` for
/// any degree, so `C:7/b7` keeps its B-flat bass even though the symbol
/// itself is C:7 in root position.
pub fn parse_label(text: &str) -> Result<Option<ParsedLabel>, AnnotationError> {
    let text = text.trim();
    match text {
        "N" => {
            return Ok(Some(ParsedLabel {
                symbol: ChordSymbol::NoChord,
                bass: NO_BASS,
            }))
        }
        "X" => return Ok(None),
        _ => {}
    }
    let parts = split_symbol(text);
    let root = parse_root(parts.root)?;
    let qtext = parts.quality.unwrap_or("maj");
    let (short, extra) = match qtext.split_once('(') {
        Some((s, rest)) => (s, Some(rest.trim_end_matches(')'))),
        None => (qtext, None),
    };
    let mut intervals: BTreeSet<u8> = match shorthand_template(short) {
        Some(t) if !(short.is_empty() && extra.is_some()) => t.iter().copied().collect(),
        Some(_) => BTreeSet::new(),
        None => return Err(AnnotationError::UnknownQuality(qtext.to_string())),
    };
    if let Some(list) = extra {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (omit, deg) = match item.strip_prefix('*') {
                Some(d) => (true, d),
                None => (false, item),
            };
            let semis = degree_semitones(deg)
                .ok_or_else(|| AnnotationError::UnknownQuality(qtext.to_string()))?;
            let pc = semis.rem_euclid(12) as u8;
            if omit {
                intervals.remove(&pc);
            } else {
                intervals.insert(pc);
            }
        }
    }
    let quality = match (extra, exact_quality(short)) {
        (None, Some(q)) => q,
        _ => reduce_quality(&intervals),
    };
    let bass_offset = match parts.degree {
        None => 0,
        Some(d) => degree_semitones(d)
            .ok_or_else(|| AnnotationError::UnsupportedDegree(d.to_string()))?,
    };
    let inversion = match (quality, parts.degree) {
        (Quality::Maj, Some("3")) => Inversion::Third,
        (Quality::Maj, Some("5")) => Inversion::Fifth,
        _ => Inversion::Root,
    };
    Ok(Some(ParsedLabel {
        symbol: ChordSymbol::Chord {
            root,
            quality,
            inversion,
        },
        bass: shift_pc(root as usize, bass_offset),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Major,
    Minor,
}

/// A key; its state index is `tonic` for major keys and `12 + tonic` for minor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key {
    pub tonic: u8,
    pub mode: Mode,
}

impl Key {
    pub fn index(&self) -> usize {
        self.tonic as usize
            + match self.mode {
                Mode::Major => 0,
                Mode::Minor => 12,
            }
    }

    pub fn from_index(i: usize) -> Self {
        Key {
            tonic: (i % 12) as u8,
            mode: if i < 12 { Mode::Major } else { Mode::Minor },
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "maj",
            Mode::Minor => "min",
        };
        write!(f, "{}:{}", PITCH_NAMES[self.tonic as usize], mode)
    }
}

/// Parses `C`, `C:maj`, `A:min`, `Key E`, `F#:minor`. `Silence`, `N` and
/// `X` yield `None`.
pub fn parse_key(text: &str) -> Result<Option<Key>, AnnotationError> {
    let t = text.trim();
    let t = t.strip_prefix("Key").map(str::trim).unwrap_or(t);
    if matches!(t, "Silence" | "N" | "X" | "") {
        return Ok(None);
    }
    let (tonic, mode) = match t.split_once(':') {
        Some((r, m)) => (r, m),
        None => (t, "maj"),
    };
    let tonic = parse_root(tonic).map_err(|_| AnnotationError::BadKey(text.to_string()))?;
    let mode = match mode {
        "maj" | "major" => Mode::Major,
        "min" | "minor" => Mode::Minor,
        _ => return Err(AnnotationError::BadKey(text.to_string())),
    };
    Ok(Some(Key { tonic, mode }))
}

pub fn transpose_key(k: usize, semitones: i32) -> usize {
    (k / 12) * 12 + shift_pc(k % 12, semitones)
}

pub fn transpose_bass(b: usize, semitones: i32) -> usize {
    if b == NO_BASS {
        b
    } else {
        shift_pc(b, semitones)
    }
}

pub fn bass_name(b: usize) -> &'static str {
    PITCH_NAMES.get(b).copied().unwrap_or("N")
}

pub fn parse_bass_name(text: &str) -> Result<usize, AnnotationError> {
    if text == "N" {
        return Ok(NO_BASS);
    }
    parse_root(text)
        .map(usize::from)
        .map_err(|_| AnnotationError::UnknownState(text.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlphabetKind {
    /// 12 major, 12 minor and no-chord.
    MajMin25,
    /// 12 roots times ten chord types, plus no-chord.
    Full121,
}

impl fmt::Display for AlphabetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphabetKind::MajMin25 => "majmin25",
            AlphabetKind::Full121 => "full121",
        })
    }
}

impl FromStr for AlphabetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "majmin25" => Ok(AlphabetKind::MajMin25),
            "full121" => Ok(AlphabetKind::Full121),
            other => Err(format!("unknown alphabet {other:?}")),
        }
    }
}

/// Chord vocabulary, laid out type-major: state `type * 12 + root`, with
/// the no-chord state last. Keys (24) and basses (13) are fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    pub kind: AlphabetKind,
    chords: Vec<ChordSymbol>,
}

const FULL_TYPES: [(Quality, Inversion); 10] = [
    (Quality::Maj, Inversion::Root),
    (Quality::Min, Inversion::Root),
    (Quality::Maj, Inversion::Third),
    (Quality::Maj, Inversion::Fifth),
    (Quality::Maj6, Inversion::Root),
    (Quality::Maj7, Inversion::Root),
    (Quality::Min7, Inversion::Root),
    (Quality::Dom7, Inversion::Root),
    (Quality::Dim, Inversion::Root),
    (Quality::Aug, Inversion::Root),
];

impl Alphabet {
    pub fn new(kind: AlphabetKind) -> Self {
        let types: &[(Quality, Inversion)] = match kind {
            AlphabetKind::MajMin25 => &FULL_TYPES[..2],
            AlphabetKind::Full121 => &FULL_TYPES,
        };
        let mut chords: Vec<ChordSymbol> = types
            .iter()
            .flat_map(|&(q, inv)| (0..12).map(move |r| ChordSymbol::inverted(r, q, inv)))
            .collect();
        chords.push(ChordSymbol::NoChord);
        Self { kind, chords }
    }

    pub fn n_chords(&self) -> usize {
        self.chords.len()
    }

    pub fn no_chord(&self) -> usize {
        self.chords.len() - 1
    }

    pub fn chords(&self) -> &[ChordSymbol] {
        &self.chords
    }

    pub fn symbol(&self, idx: usize) -> ChordSymbol {
        self.chords[idx]
    }

    pub fn name(&self, idx: usize) -> String {
        self.chords[idx].to_string()
    }

    pub fn index_of(&self, c: &ChordSymbol) -> Option<usize> {
        match *c {
            ChordSymbol::NoChord => Some(self.no_chord()),
            ChordSymbol::Chord {
                root,
                quality,
                inversion,
            } => {
                let n_types = (self.chords.len() - 1) / 12;
                FULL_TYPES[..n_types]
                    .iter()
                    .position(|&t| t == (quality, inversion))
                    .map(|ty| ty * 12 + root as usize)
            }
        }
    }

    /// Chord state for a symbol. The 25-chord alphabet drops inversions and
    /// reduces {maj, maj6, maj7, 7, aug} to major and {min, min7, dim} to minor.
    pub fn map_to_alphabet(&self, c: &ChordSymbol) -> Result<usize, AnnotationError> {
        let normalised = match (self.kind, *c) {
            (AlphabetKind::MajMin25, ChordSymbol::Chord { root, quality, .. }) => {
                let q = if quality.is_minor_family() {
                    Quality::Min
                } else {
                    Quality::Maj
                };
                ChordSymbol::chord(root, q)
            }
            _ => *c,
        };
        self.index_of(&normalised)
            .ok_or_else(|| AnnotationError::OutsideAlphabet(c.to_string(), self.kind))
    }

    /// Chord state shifted by `semitones`; no-chord is fixed.
    pub fn transpose(&self, idx: usize, semitones: i32) -> usize {
        if idx == self.no_chord() {
            idx
        } else {
            (idx / 12) * 12 + shift_pc(idx % 12, semitones)
        }
    }

    pub fn parse_state(&self, name: &str) -> Result<usize, AnnotationError> {
        let sym =
            parse_chord_symbol(name).map_err(|_| AnnotationError::UnknownState(name.into()))?;
        self.index_of(&sym)
            .ok_or_else(|| AnnotationError::UnknownState(name.into()))
    }
}

/// One `start end label` record.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

/// Non-overlapping labelled intervals sorted by start time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntervalLabels {
    pub records: Vec<LabelRecord>,
}

const OVERLAP_TOLERANCE: f64 = 1e-9;

impl IntervalLabels {
    /// Sorts and validates records.
    pub fn new(mut records: Vec<LabelRecord>) -> Result<Self, AnnotationError> {
        records.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in records.windows(2) {
            if w[1].start < w[0].end - OVERLAP_TOLERANCE {
                return Err(AnnotationError::Overlap {
                    start: w[1].start,
                    prev_end: w[0].end,
                });
            }
        }
        Ok(Self { records })
    }

    pub fn total_duration(&self) -> f64 {
        self.records.iter().map(|r| r.end - r.start).sum()
    }

    pub fn end_time(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.end)
    }

    pub fn to_lab_string(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{:.6} {:.6} {}\n", r.start, r.end, r.label))
            .collect()
    }
}

/// Parses `.lab` text: whitespace-separated `start end label` lines, where
/// the label is the rest of the line. Blank lines and `#` comments are skipped.
pub fn parse_lab_str(text: &str) -> Result<IntervalLabels, AnnotationError> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = || AnnotationError::Malformed {
            line: i + 1,
            text: line.to_string(),
        };
        let mut fields = line.split_whitespace();
        let start: f64 = fields.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
        let end: f64 = fields.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
        let label = fields.collect::<Vec<_>>().join(" ");
        if label.is_empty() || !start.is_finite() || !end.is_finite() {
            return Err(malformed());
        }
        if end <= start {
            return Err(AnnotationError::EndBeforeStart {
                line: i + 1,
                start,
                end,
            });
        }
        records.push(LabelRecord { start, end, label });
    }
    IntervalLabels::new(records)
}

pub fn parse_lab(path: impl AsRef<Path>) -> Result<IntervalLabels, AnnotationError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AnnotationError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_lab_str(&text)
}

/// Most prevalent label in each beat interval `[beat_i, beat_{i+1})` by
/// total overlap; ties go to the label whose first overlapping record
/// starts earliest. Intervals with no coverage yield `None`.
pub fn beat_sync_labels(
    iv: &IntervalLabels,
    beats: &[f64],
) -> Result<Vec<Option<String>>, AnnotationError> {
    if beats.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(AnnotationError::NonMonotoneBeats);
    }
    let mut out = Vec::with_capacity(beats.len().saturating_sub(1));
    let mut first = 0usize;
    for w in beats.windows(2) {
        let (a, b) = (w[0], w[1]);
        while first < iv.records.len() && iv.records[first].end <= a {
            first += 1;
        }
        // (label, total overlap, first start)
        let mut tally: Vec<(&str, f64, f64)> = Vec::new();
        for r in iv.records[first..].iter().take_while(|r| r.start < b) {
            let overlap = r.end.min(b) - r.start.max(a);
            if overlap <= 0.0 {
                continue;
            }
            match tally.iter_mut().find(|(l, _, _)| *l == r.label) {
                Some(entry) => entry.1 += overlap,
                None => tally.push((&r.label, overlap, r.start)),
            }
        }
        let best = tally
            .iter()
            .fold(None::<&(&str, f64, f64)>, |best, cand| match best {
                Some(b) if b.1 > cand.1 || (b.1 == cand.1 && b.2 <= cand.2) => Some(b),
                _ => Some(cand),
            });
        out.push(best.map(|(l, _, _)| l.to_string()));
    }
    Ok(out)
}

/// Per-frame key, chord and bass states; `None` marks unlabelled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub times: Vec<(f64, f64)>,
    pub keys: Vec<Option<usize>>,
    pub chords: Vec<Option<usize>>,
    pub basses: Vec<Option<usize>>,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Fully labelled frames from explicit state sequences.
    pub fn from_states(
        times: Vec<(f64, f64)>,
        keys: &[usize],
        chords: &[usize],
        basses: &[usize],
    ) -> Self {
        Self {
            times,
            keys: keys.iter().map(|&k| Some(k)).collect(),
            chords: chords.iter().map(|&c| Some(c)).collect(),
            basses: basses.iter().map(|&b| Some(b)).collect(),
        }
    }

    /// Beat-synchronises chord (and optionally key) annotations. The bass
    /// state of a frame comes from its prevalent chord label.
    pub fn from_annotations(
        chords: &IntervalLabels,
        keys: Option<&IntervalLabels>,
        beats: &[f64],
        alphabet: &Alphabet,
    ) -> Result<Self, AnnotationError> {
        let chord_labels = beat_sync_labels(chords, beats)?;
        let key_labels = match keys {
            Some(k) => beat_sync_labels(k, beats)?,
            None => vec![None; chord_labels.len()],
        };
        let mut out = Self {
            times: beats.windows(2).map(|w| (w[0], w[1])).collect(),
            keys: Vec::with_capacity(chord_labels.len()),
            chords: Vec::with_capacity(chord_labels.len()),
            basses: Vec::with_capacity(chord_labels.len()),
        };
        for (cl, kl) in chord_labels.iter().zip(&key_labels) {
            let parsed = match cl {
                Some(text) => parse_label(text)?,
                None => None,
            };
            match parsed {
                Some(p) => {
                    out.chords.push(Some(alphabet.map_to_alphabet(&p.symbol)?));
                    out.basses.push(Some(p.bass));
                }
                None => {
                    out.chords.push(None);
                    out.basses.push(None);
                }
            }
            let key = match kl {
                Some(text) => parse_key(text)?.map(|k| k.index()),
                None => None,
            };
            out.keys.push(key);
        }
        Ok(out)
    }

    /// `start end key chord bass` rows; `-` marks an unlabelled entry.
    pub fn to_text(&self, alphabet: &Alphabet) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let (a, b) = self.times[i];
            let key = self.keys[i].map_or("-".to_string(), |k| Key::from_index(k).to_string());
            let chord = self.chords[i].map_or("-".to_string(), |c| alphabet.name(c));
            let bass = self.basses[i].map_or("-", bass_name);
            s.push_str(&format!("{a} {b} {key} {chord} {bass}\n"));
        }
        s
    }

    pub fn parse_text(text: &str, alphabet: &Alphabet) -> Result<Self, AnnotationError> {
        let mut out = Self {
            times: vec![],
            keys: vec![],
            chords: vec![],
            basses: vec![],
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let malformed = || AnnotationError::Malformed {
                line: i + 1,
                text: line.to_string(),
            };
            if f.len() != 5 {
                return Err(malformed());
            }
            let a: f64 = f[0].parse().map_err(|_| malformed())?;
            let b: f64 = f[1].parse().map_err(|_| malformed())?;
            out.times.push((a, b));
            out.keys.push(match f[2] {
                "-" => None,
                k => Some(parse_key(k)?.ok_or_else(malformed)?.index()),
            });
            out.chords.push(match f[3] {
                "-" => None,
                c => Some(alphabet.parse_state(c)?),
            });
            out.basses.push(match f[4] {
                "-" => None,
                b => Some(parse_bass_name(b)?),
            });
        }
        Ok(out)
    }
}

/// Merges runs of identical states into labelled intervals.
pub fn intervals_from_states(
    times: &[(f64, f64)],
    states: &[usize],
    name: impl Fn(usize) -> String,
) -> IntervalLabels {
    let mut records: Vec<LabelRecord> = Vec::new();
    let mut prev: Option<usize> = None;
    for (&(a, b), &s) in times.iter().zip(states) {
        match records.last_mut() {
            Some(last) if prev == Some(s) => last.end = b,
            _ => records.push(LabelRecord {
                start: a,
                end: b,
                label: name(s),
            }),
        }
        prev = Some(s);
    }
    IntervalLabels { records }
}
