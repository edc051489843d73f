//! Trains on a handful of synthetic songs and decodes a held-out one.
//!
//! `cargo run --release --example train_decode -- [majmin25|full121]`

use std::error::Error;

use keychord::annotations::{intervals_from_states, Alphabet, AlphabetKind, FrameLabels, Key};
use keychord::chroma::{extract_features, FeatureConfig};
use keychord::decode::{viterbi_joint, Constraints};
use keychord::eval::{bass_frame_accuracy, overlap_ratio, ComparisonMode};
use keychord::model::{train, LabelledSong, TrainConfig};
use keychord::synth::{synthetic_song, SynthConfig};

fn labelled(seed: u64, cfg: &SynthConfig, alphabet: &Alphabet) -> Result<LabelledSong, Box<dyn Error>> {
    let song = synthetic_song(seed, cfg)?;
    let feats = extract_features(&song.audio, Some(&song.beats), &FeatureConfig::default())?;
    let labels = FrameLabels::from_annotations(&song.chords, Some(&song.keys), &song.beats, alphabet)?;
    Ok(LabelledSong {
        treble: feats.treble,
        bass: feats.bass,
        labels,
    })
}

fn main() -> Result<(), Box<dyn Error>> {
    let kind: AlphabetKind = std::env::args().nth(1).as_deref().unwrap_or("majmin25").parse()?;
    let alphabet = Alphabet::new(kind);
    let synth = SynthConfig {
        inversion_rate: if kind == AlphabetKind::Full121 { 0.4 } else { 0.0 },
        ..SynthConfig::default()
    };
    let training = (1..=6)
        .map(|seed| labelled(seed, &synth, &alphabet))
        .collect::<Result<Vec<_>, _>>()?;
    let model = train(&training, &TrainConfig { alphabet: kind, ..TrainConfig::default() })?;

    let test = synthetic_song(100, &synth)?;
    let feats = extract_features(&test.audio, Some(&test.beats), &FeatureConfig::default())?;
    let (path, stats) = viterbi_joint(&model, &Constraints::none(), &feats.treble, &feats.bass)?;

    let pred = FrameLabels::from_states(feats.treble.times.clone(), &path.keys, &path.chords, &path.basses);
    let chords = intervals_from_states(&pred.times, &path.chords, |c| alphabet.name(c));
    let truth = FrameLabels::from_annotations(&test.chords, Some(&test.keys), &test.beats, &alphabet)?;
    println!("key        {}", Key::from_index(path.keys[0]));
    println!("majmin OR  {:.4}", overlap_ratio(&chords, &test.chords, ComparisonMode::MajMin)?);
    println!("exact CP   {:.4}", overlap_ratio(&chords, &test.chords, ComparisonMode::Exact)?);
    println!("notes NCP  {:.4}", overlap_ratio(&chords, &test.chords, ComparisonMode::NoteSet)?);
    println!("bass F-acc {:.4}", bass_frame_accuracy(&pred, &truth)?);
    println!("expanded   {}", stats.transitions_expanded);
    Ok(())
}
