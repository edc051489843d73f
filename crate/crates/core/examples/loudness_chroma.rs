//! Treble and bass loudness chromagrams of a C major then A minor triad,
//! printed as per-frame bars. Levels are summed in dB across octaves, so
//! with pure sinusoids a neighbouring pitch class whose bins sit higher on
//! the A-weighting curve can outscore the sounding bass note.
//!
//! `cargo run --example loudness_chroma`

use std::error::Error;

use keychord::annotations::PITCH_NAMES;
use keychord::audio_io::{synthesize_triads, TriadSegment, ANALYSIS_SAMPLE_RATE};
use keychord::chroma::{a_weighting, beat_sync_median, fixed_grid_beats, loudness_chromagram, ChromaConfig};

fn main() -> Result<(), Box<dyn Error>> {
    for f in [55.0, 100.0, 440.0, 1000.0] {
        println!("A-weighting at {f:>6} Hz: {:+.2} dB", a_weighting(f)?);
    }
    let script = [
        TriadSegment::new(vec![0, 4, 7], Some(0), 1.0),
        TriadSegment::new(vec![9, 0, 4], Some(9), 1.0),
    ];
    let audio = synthesize_triads(&script, ANALYSIS_SAMPLE_RATE)?;
    let beats = fixed_grid_beats(audio.duration(), 0.5);
    for cfg in [ChromaConfig::treble(), ChromaConfig::bass()] {
        let chroma = beat_sync_median(&loudness_chromagram(&audio, &cfg, 1.0)?, &beats)?;
        println!("\n{} band", chroma.band);
        print!("{:>13}", "");
        for name in PITCH_NAMES {
            print!("{name:>3}");
        }
        println!();
        for ((a, b), col) in chroma.times.iter().zip(&chroma.values) {
            print!("{a:5.2}-{b:5.2}  ");
            for v in col {
                let bar = match (v * 4.0).round() as u8 {
                    0 => "  .",
                    1 => "  -",
                    2 => "  +",
                    3 => "  *",
                    _ => "  #",
                };
                print!("{bar}");
            }
            println!();
        }
    }
    Ok(())
}
