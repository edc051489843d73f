//! Evaluation metrics: chord overlap ratios under several comparison modes,
//! predominant-key accuracy, frame-level bass accuracy and a paired t-test.
//!
//! Overlaps are computed by exact interval intersection, which is the limit
//! of sampling both label files on a 1 ms grid.

use std::fmt::Write as _;

use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::annotations::{
    parse_bass_name, parse_key, parse_label, Alphabet, AlphabetKind, AnnotationError, FrameLabels,
    IntervalLabels,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth has no annotated duration")]
    EmptyGroundTruth,
    #[error("no key prediction")]
    NoKeyPrediction,
    #[error("ground truth has no key")]
    NoGroundTruthKey,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two paired scores")]
    TooFewPairs,
    #[error("paired differences have zero variance")]
    ZeroVariance,
    #[error("no scores to aggregate")]
    Empty,
    #[error(transparent)]
    Label(#[from] AnnotationError),
}

/// How a predicted label is compared with a ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComparisonMode {
    /// Both sides reduced to the 25-chord major/minor alphabet.
    MajMin,
    /// Identical symbol in the 121-chord vocabulary, inversion included (CP).
    Exact,
    /// Identical sounding pitch-class set (NCP).
    NoteSet,
    /// Key labels.
    Key,
    /// Bass pitch class; labels may be chord symbols or bare note names.
    Bass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Comparable {
    State(usize),
    Notes(u16),
}

fn comparable(label: &str, mode: ComparisonMode) -> Result<Option<Comparable>, AnnotationError> {
    use ComparisonMode::*;
    Ok(match mode {
        Key => parse_key(label)?.map(|k| Comparable::State(k.index())),
        Bass => match parse_bass_name(label) {
            Ok(b) => Some(Comparable::State(b)),
            Err(_) => parse_label(label)?.map(|p| Comparable::State(p.bass)),
        },
        MajMin | Exact => {
            let kind = if mode == MajMin {
                AlphabetKind::MajMin25
            } else {
                AlphabetKind::Full121
            };
            match parse_label(label)? {
                Some(p) => Some(Comparable::State(Alphabet::new(kind).map_to_alphabet(&p.symbol)?)),
                None => None,
            }
        }
        NoteSet => parse_label(label)?.map(|p| {
            Comparable::Notes(p.symbol.pitch_classes().iter().fold(0u16, |m, &pc| m | 1 << pc))
        }),
    })
}

/// Matched and total annotated ground-truth duration of one song.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub matched: f64,
    pub total: f64,
}

impl Overlap {
    pub fn ratio(&self) -> f64 {
        self.matched / self.total
    }
}

/// Duration over which `pred` agrees with `gt`. Ground-truth regions with
/// an unknown label (`X`, or `Silence` for keys) are excluded; regions
/// without a prediction count as wrong.
pub fn overlap(
    pred: &IntervalLabels,
    gt: &IntervalLabels,
    mode: ComparisonMode,
) -> Result<Overlap, EvalError> {
    let pred_vals: Vec<Option<Comparable>> = pred
        .records
        .iter()
        .map(|r| comparable(&r.label, mode))
        .collect::<Result<_, _>>()?;
    let mut matched = 0.0;
    let mut total = 0.0;
    let mut j = 0;
    for g in &gt.records {
        let Some(gv) = comparable(&g.label, mode)? else {
            continue;
        };
        total += g.end - g.start;
        while j < pred.records.len() && pred.records[j].end <= g.start {
            j += 1;
        }
        for (p, pv) in pred.records[j..].iter().zip(&pred_vals[j..]) {
            if p.start >= g.end {
                break;
            }
            if pv.as_ref() == Some(&gv) {
                matched += p.end.min(g.end) - p.start.max(g.start);
            }
        }
    }
    if total <= 0.0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    Ok(Overlap { matched, total })
}

pub fn overlap_ratio(
    pred: &IntervalLabels,
    gt: &IntervalLabels,
    mode: ComparisonMode,
) -> Result<f64, EvalError> {
    overlap(pred, gt, mode).map(|o| o.ratio())
}

fn record_at(iv: &IntervalLabels, t: f64) -> Option<usize> {
    let i = iv.records.partition_point(|r| r.start <= t);
    i.checked_sub(1).filter(|&j| t < iv.records[j].end)
}

fn comparables(
    iv: &IntervalLabels,
    mode: ComparisonMode,
) -> Result<Vec<Option<Comparable>>, AnnotationError> {
    iv.records.iter().map(|r| comparable(&r.label, mode)).collect()
}

/// Reference scoring by sampling both files every `step` seconds from 0 to
/// the end of the ground truth.
pub fn sampled_overlap_ratio(
    pred: &IntervalLabels,
    gt: &IntervalLabels,
    mode: ComparisonMode,
    step: f64,
) -> Result<f64, EvalError> {
    let (pv, gv) = (comparables(pred, mode)?, comparables(gt, mode)?);
    let n = (gt.end_time() / step).ceil() as usize;
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..n {
        let t = (i as f64 + 0.5) * step;
        let Some(g) = record_at(gt, t).and_then(|j| gv[j]) else { continue };
        total += 1;
        if record_at(pred, t).and_then(|j| pv[j]) == Some(g) {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    Ok(hit as f64 / total as f64)
}

/// `(OR, WAOR)`: the plain and duration-weighted means of per-song ratios.
pub fn aggregate(ratios: &[f64], durations: &[f64]) -> Result<(f64, f64), EvalError> {
    if ratios.len() != durations.len() {
        return Err(EvalError::LengthMismatch(ratios.len(), durations.len()));
    }
    if ratios.is_empty() {
        return Err(EvalError::Empty);
    }
    let or = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let total: f64 = durations.iter().sum();
    let waor = ratios.iter().zip(durations).map(|(r, d)| r * d).sum::<f64>() / total;
    Ok((or, waor))
}

/// Key with the largest total predicted duration; ties go to the key that
/// appears first.
pub fn predominant_key(pred: &IntervalLabels) -> Result<usize, EvalError> {
    let mut dur: Vec<(usize, f64)> = Vec::new();
    for r in &pred.records {
        if let Some(k) = parse_key(&r.label)? {
            match dur.iter_mut().find(|(key, _)| *key == k.index()) {
                Some(e) => e.1 += r.end - r.start,
                None => dur.push((k.index(), r.end - r.start)),
            }
        }
    }
    dur.iter()
        .fold(None::<(usize, f64)>, |best, &(k, d)| match best {
            Some((_, bd)) if bd >= d => best,
            _ => Some((k, d)),
        })
        .map(|(k, _)| k)
        .ok_or(EvalError::NoKeyPrediction)
}

/// First key of the ground truth, skipping silence.
pub fn first_key(gt: &IntervalLabels) -> Result<usize, EvalError> {
    for r in &gt.records {
        if let Some(k) = parse_key(&r.label)? {
            return Ok(k.index());
        }
    }
    Err(EvalError::NoGroundTruthKey)
}

/// Fraction of songs whose predominant predicted key equals the first
/// ground-truth key.
pub fn predominant_key_accuracy(
    songs: &[(&IntervalLabels, &IntervalLabels)],
) -> Result<f64, EvalError> {
    if songs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    for (pred, gt) in songs {
        if predominant_key(pred)? == first_key(gt)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / songs.len() as f64)
}

/// `(correct, labelled)` bass frames; unlabelled ground-truth frames are
/// skipped and unlabelled predictions count as wrong.
pub fn bass_frame_counts(pred: &FrameLabels, gt: &FrameLabels) -> Result<(usize, usize), EvalError> {
    if pred.basses.len() != gt.basses.len() {
        return Err(EvalError::LengthMismatch(pred.basses.len(), gt.basses.len()));
    }
    let mut hit = 0;
    let mut total = 0;
    for (p, g) in pred.basses.iter().zip(&gt.basses) {
        if let Some(g) = g {
            total += 1;
            if p.as_ref() == Some(g) {
                hit += 1;
            }
        }
    }
    Ok((hit, total))
}

pub fn bass_frame_accuracy(pred: &FrameLabels, gt: &FrameLabels) -> Result<f64, EvalError> {
    let (hit, total) = bass_frame_counts(pred, gt)?;
    if total == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-tailed p-value.
    pub p: f64,
}

/// Paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTest { t, df, p })
}

/// Scores of one song. `None` marks a metric that could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub struct SongScores {
    pub song: String,
    /// Annotated ground-truth chord duration.
    pub duration: f64,
    pub or: f64,
    pub cp: f64,
    pub ncp: f64,
    pub key_correct: Option<bool>,
    pub bass_frames: Option<(usize, usize)>,
    /// Prediction files were missing; every score is zero.
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub or: f64,
    pub waor: f64,
    pub cp: f64,
    pub ncp: f64,
    pub key_p: Option<f64>,
    pub f_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub songs: Vec<SongScores>,
    pub totals: Aggregates,
}

impl EvalReport {
    pub fn new(songs: Vec<SongScores>) -> Result<Self, EvalError> {
        let col = |f: fn(&SongScores) -> f64| songs.iter().map(f).collect::<Vec<_>>();
        let durations = col(|s| s.duration);
        let (or, waor) = aggregate(&col(|s| s.or), &durations)?;
        let (cp, _) = aggregate(&col(|s| s.cp), &durations)?;
        let (ncp, _) = aggregate(&col(|s| s.ncp), &durations)?;
        let keys: Vec<bool> = songs.iter().filter_map(|s| s.key_correct).collect();
        let key_p = (!keys.is_empty())
            .then(|| keys.iter().filter(|&&k| k).count() as f64 / keys.len() as f64);
        let (hit, tot) = songs
            .iter()
            .filter_map(|s| s.bass_frames)
            .fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
        let f_acc = (tot > 0).then(|| hit as f64 / tot as f64);
        Ok(Self {
            totals: Aggregates {
                or,
                waor,
                cp,
                ncp,
                key_p,
                f_acc,
            },
            songs,
        })
    }

    /// Aligned text table, one row per song plus the aggregate row.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let opt = |v: Option<f64>| v.map_or("-".to_string(), pct);
        let width = self.songs.iter().map(|s| s.song.len()).max().unwrap_or(4).max(7);
        let mut out = String::new();
        writeln!(
            out,
            "{:<width$} {:>8} {:>8} {:>8} {:>8} {:>8}  note",
            "song", "OR", "CP", "NCP", "key", "F-acc"
        )
        .unwrap();
        for s in &self.songs {
            let key = s.key_correct.map(|k| if k { 1.0 } else { 0.0 });
            let bass = s.bass_frames.filter(|b| b.1 > 0).map(|(h, t)| h as f64 / t as f64);
            writeln!(
                out,
                "{:<width$} {:>8} {:>8} {:>8} {:>8} {:>8}  {}",
                s.song,
                pct(s.or),
                pct(s.cp),
                pct(s.ncp),
                opt(key),
                opt(bass),
                if s.missing { "missing prediction" } else { "" }
            )
            .unwrap();
        }
        let t = &self.totals;
        writeln!(
            out,
            "{:<width$} {:>8} {:>8} {:>8} {:>8} {:>8}  WAOR {}",
            "overall",
            pct(t.or),
            pct(t.cp),
            pct(t.ncp),
            opt(t.key_p),
            opt(t.f_acc),
            pct(t.waor)
        )
        .unwrap();
        out
    }

    /// `song,metric,value` rows; the aggregate rows use the song name `ALL`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("song,metric,value\n");
        for s in &self.songs {
            let mut row = |m: &str, v: f64| writeln!(out, "{},{m},{v}", s.song).unwrap();
            row("OR", s.or);
            row("CP", s.cp);
            row("NCP", s.ncp);
            if let Some(k) = s.key_correct {
                row("key", if k { 1.0 } else { 0.0 });
            }
            if let Some((h, t)) = s.bass_frames.filter(|b| b.1 > 0) {
                row("F-acc", h as f64 / t as f64);
            }
            row("missing", if s.missing { 1.0 } else { 0.0 });
        }
        let t = &self.totals;
        let mut row = |m: &str, v: f64| writeln!(out, "ALL,{m},{v}").unwrap();
        row("OR", t.or);
        row("WAOR", t.waor);
        row("CP", t.cp);
        row("NCP", t.ncp);
        if let Some(k) = t.key_p {
            row("key-P", k);
        }
        if let Some(f) = t.f_acc {
            row("F-acc", f);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{parse_lab_str, LabelRecord};
    use proptest::prelude::*;

    fn lab(s: &str) -> IntervalLabels {
        parse_lab_str(s).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let a = lab("0 10 A:maj\n");
        assert_eq!(overlap_ratio(&a, &a, ComparisonMode::MajMin).unwrap(), 1.0);
        let gt = lab("0 6 A:maj\n6 10 N\n");
        assert_eq!(overlap_ratio(&a, &gt, ComparisonMode::MajMin).unwrap(), 0.6);
        let inv = lab("0 10 A:maj/3\n");
        assert_eq!(overlap_ratio(&inv, &a, ComparisonMode::Exact).unwrap(), 0.0);
        assert_eq!(overlap_ratio(&inv, &a, ComparisonMode::NoteSet).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&inv, &a, ComparisonMode::MajMin).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&lab("0 10 C#\n"), &inv, ComparisonMode::Bass).unwrap(), 1.0);
        let gap = lab("0 5 A:maj\n");
        assert_eq!(overlap_ratio(&gap, &a, ComparisonMode::MajMin).unwrap(), 0.5);
        let unknown = lab("0 5 X\n5 10 A:maj\n");
        assert_eq!(overlap_ratio(&gap, &unknown, ComparisonMode::MajMin).unwrap(), 0.0);
        assert_eq!(
            overlap_ratio(&a, &lab("0 1 X\n"), ComparisonMode::MajMin).unwrap_err(),
            EvalError::EmptyGroundTruth
        );
        let keys = lab("0 1 Silence\n1 10 Key E\n");
        assert_eq!(overlap_ratio(&lab("0 10 E:maj\n"), &keys, ComparisonMode::Key).unwrap(), 1.0);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[1.0, 0.0], &[100.0, 100.0]).unwrap(), (0.5, 0.5));
        assert_eq!(aggregate(&[1.0, 0.0], &[300.0, 100.0]).unwrap(), (0.5, 0.75));
        assert_eq!(aggregate(&[0.3], &[7.0]).unwrap(), (0.3, 0.3));
        assert_eq!(aggregate(&[], &[]).unwrap_err(), EvalError::Empty);
    }

    #[test]
    fn key_accuracy_examples() {
        let c = lab("0 10 C:maj\n");
        assert_eq!(predominant_key_accuracy(&[(&c, &c)]).unwrap(), 1.0);
        let mixed = lab("0 6 G:maj\n6 10 C:maj\n");
        let gt = lab("0 1 Silence\n1 5 C:maj\n5 10 G:maj\n");
        assert_eq!(predominant_key_accuracy(&[(&mixed, &gt)]).unwrap(), 0.0);
        assert_eq!(predominant_key_accuracy(&[(&c, &gt), (&mixed, &gt)]).unwrap(), 0.5);
        assert_eq!(
            predominant_key(&lab("0 1 Silence\n")).unwrap_err(),
            EvalError::NoKeyPrediction
        );
    }

    #[test]
    fn bass_accuracy_examples() {
        let t: Vec<(f64, f64)> = (0..4).map(|i| (i as f64, i as f64 + 1.0)).collect();
        let fl = |b: &[usize]| FrameLabels::from_states(t.clone(), &[0; 4], &[0; 4], b);
        let gt = fl(&[0, 1, 2, 3]);
        assert_eq!(bass_frame_accuracy(&gt, &gt).unwrap(), 1.0);
        assert_eq!(bass_frame_accuracy(&fl(&[4, 5, 6, 7]), &gt).unwrap(), 0.0);
        assert_eq!(bass_frame_accuracy(&fl(&[0, 1, 2, 9]), &gt).unwrap(), 0.75);
        let mut partial = gt.clone();
        partial.basses[0] = None;
        assert_eq!(bass_frame_accuracy(&fl(&[5, 1, 2, 9]), &partial).unwrap(), 2.0 / 3.0);
        let short = FrameLabels::from_states(t[..3].to_vec(), &[0; 3], &[0; 3], &[0; 3]);
        assert!(matches!(bass_frame_accuracy(&short, &gt), Err(EvalError::LengthMismatch(3, 4))));
    }

    #[test]
    fn t_test_examples() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 2.0);
        // two-tailed p for t = 2√3 with 2 degrees of freedom: 1 − t/√(t²+2)
        let closed_form = 1.0 - r.t / (r.t * r.t + 2.0).sqrt();
        assert!((r.p - closed_form).abs() < 1e-12);
        let swapped = paired_t_test(&[0.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(swapped.t, -r.t);
        assert!((swapped.p - r.p).abs() < 1e-15);
        assert_eq!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap_err(), EvalError::ZeroVariance);
        assert_eq!(paired_t_test(&[1.0], &[0.0]).unwrap_err(), EvalError::TooFewPairs);
        // one degree of freedom: p = 1 − 2·atan(|t|)/π
        let r1 = paired_t_test(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
        let cauchy = 1.0 - 2.0 * r1.t.abs().atan() / std::f64::consts::PI;
        assert!((r1.p - cauchy).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_and_formats() {
        let s = |name: &str, d, or, key, bass| SongScores {
            song: name.into(),
            duration: d,
            or,
            cp: or,
            ncp: or,
            key_correct: key,
            bass_frames: bass,
            missing: false,
        };
        let rep = EvalReport::new(vec![
            s("a", 300.0, 1.0, Some(true), Some((3, 4))),
            s("b", 100.0, 0.0, Some(false), Some((1, 4))),
        ])
        .unwrap();
        assert_eq!(rep.totals.or, 0.5);
        assert_eq!(rep.totals.waor, 0.75);
        assert_eq!(rep.totals.key_p, Some(0.5));
        assert_eq!(rep.totals.f_acc, Some(0.5));
        assert!(rep.to_table().contains("overall"));
        assert!(rep.to_csv().contains("ALL,WAOR,0.75"));
    }

    const LABELS: [&str; 6] = ["C:maj", "A:min", "A:maj/3", "A:maj", "N", "G:7"];

    fn random_lab() -> impl Strategy<Value = IntervalLabels> {
        proptest::collection::vec((2.0f64..30.0, 0usize..LABELS.len()), 1..15).prop_map(|segs| {
            let mut t = 0.0;
            let records = segs
                .into_iter()
                .map(|(d, l)| {
                    let r = LabelRecord { start: t, end: t + d, label: LABELS[l].into() };
                    t += d;
                    r
                })
                .collect();
            IntervalLabels::new(records).unwrap()
        })
    }

    proptest! {
        #[test]
        fn ratios_are_bounded_and_match_sampling(pred in random_lab(), gt in random_lab()) {
            for mode in [ComparisonMode::MajMin, ComparisonMode::Exact, ComparisonMode::NoteSet, ComparisonMode::Bass] {
                let Ok(exact) = overlap_ratio(&pred, &gt, mode) else { continue };
                prop_assert!((0.0..=1.0).contains(&exact));
                let sampled = sampled_overlap_ratio(&pred, &gt, mode, 1e-3).unwrap();
                prop_assert!((exact - sampled).abs() < 2e-3);
            }
        }

        #[test]
        fn splitting_intervals_preserves_scores(pred in random_lab(), gt in random_lab(), frac in 0.1f64..0.9) {
            let mut split = Vec::new();
            for r in &pred.records {
                let mid = r.start + frac * (r.end - r.start);
                split.push(LabelRecord { end: mid, ..r.clone() });
                split.push(LabelRecord { start: mid, ..r.clone() });
            }
            let split = IntervalLabels::new(split).unwrap();
            for mode in [ComparisonMode::MajMin, ComparisonMode::NoteSet] {
                if let Ok(a) = overlap_ratio(&pred, &gt, mode) {
                    let b = overlap_ratio(&split, &gt, mode).unwrap();
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn waor_lies_between_extremes(v in proptest::collection::vec((0.0f64..1.0, 0.1f64..500.0), 1..20)) {
            let (r, d): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let (or, waor) = aggregate(&r, &d).unwrap();
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(waor >= lo - 1e-12 && waor <= hi + 1e-12);
            prop_assert!(or >= lo - 1e-12 && or <= hi + 1e-12);
        }
    }
}
