//! Decodes one full-alphabet synthetic song under a grid of key-transition
//! thresholds, bass limits and the chord-alphabet constraint.
//!
//! `cargo run --release --example constraint_sweep`

use std::error::Error;
use std::time::Instant;

use keychord::annotations::{intervals_from_states, Alphabet, AlphabetKind, FrameLabels};
use keychord::chroma::{extract_features, FeatureConfig};
use keychord::decode::{viterbi_joint, Constraints};
use keychord::eval::{overlap_ratio, ComparisonMode};
use keychord::model::{train, LabelledSong, TrainConfig};
use keychord::synth::{synthetic_song, SynthConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let kind = AlphabetKind::Full121;
    let alphabet = Alphabet::new(kind);
    let synth = SynthConfig {
        inversion_rate: 0.4,
        ..SynthConfig::default()
    };
    let mut songs = Vec::new();
    for seed in 1..=6 {
        let s = synthetic_song(seed, &synth)?;
        let f = extract_features(&s.audio, Some(&s.beats), &FeatureConfig::default())?;
        songs.push(LabelledSong {
            labels: FrameLabels::from_annotations(&s.chords, Some(&s.keys), &s.beats, &alphabet)?,
            treble: f.treble,
            bass: f.bass,
        });
    }
    let model = train(&songs, &TrainConfig { alphabet: kind, ..TrainConfig::default() })?;
    let test = synthetic_song(1, &SynthConfig { duration: 120.0, ..synth })?;
    let feats = extract_features(&test.audio, Some(&test.beats), &FeatureConfig::default())?;

    println!("{:>6} {:>4} {:>4} {:>14} {:>9} {:>8}", "gamma", "tau", "cac", "transitions", "seconds", "CP");
    for gamma in [None, Some(0)] {
        for tau in [None, Some(3), Some(1)] {
            for cac in [false, true] {
                let c = Constraints { gamma, tau, cac };
                let start = Instant::now();
                let result = viterbi_joint(&model, &c, &feats.treble, &feats.bass);
                let secs = start.elapsed().as_secs_f64();
                let show = |o: Option<_>| o.map_or("-".to_string(), |v: u64| v.to_string());
                let (g, t) = (show(gamma), show(tau.map(|t| t as u64)));
                match result {
                    Ok((path, stats)) => {
                        let chords = intervals_from_states(&feats.treble.times, &path.chords, |i| alphabet.name(i));
                        let cp = overlap_ratio(&chords, &test.chords, ComparisonMode::Exact)?;
                        println!("{g:>6} {t:>4} {cac:>4} {:>14} {secs:>9.3} {cp:>8.4}", stats.transitions_expanded);
                    }
                    Err(e) => println!("{g:>6} {t:>4} {cac:>4} {e}"),
                }
            }
        }
    }
    Ok(())
}
