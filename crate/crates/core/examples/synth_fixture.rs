//! Writes one synthetic song as a WAV file with chord, key and beat labels.
//!
//! `cargo run --example synth_fixture -- <out_dir> [seed]`

use std::error::Error;
use std::path::PathBuf;

use keychord::audio_io::write_wav16;
use keychord::synth::{synthetic_song, SynthConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_fixture".into()));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    std::fs::create_dir_all(&out)?;

    let cfg = SynthConfig {
        duration: 30.0,
        inversion_rate: 0.3,
        ..SynthConfig::default()
    };
    let song = synthetic_song(seed, &cfg)?;
    write_wav16(&song.audio, out.join("song.wav"))?;
    std::fs::write(out.join("song.chords.lab"), song.chords.to_lab_string())?;
    std::fs::write(out.join("song.keys.lab"), song.keys.to_lab_string())?;
    let beats: String = song.beats.iter().map(|b| format!("{b}\n")).collect();
    std::fs::write(out.join("song.txt"), beats)?;

    println!("key {}", song.keys.records[0].label);
    for r in song.chords.records.iter().take(8) {
        println!("{:6.2} {:6.2} {}", r.start, r.end, r.label);
    }
    println!("wrote {} segments to {}", song.chords.records.len(), out.display());
    Ok(())
}
