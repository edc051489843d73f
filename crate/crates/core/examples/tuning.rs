//! Estimates the tuning of detuned synthetic triads and shows the chroma
//! with and without the correction.
//!
//! `cargo run --example tuning -- [cents]`

use std::error::Error;

use keychord::audio_io::{resample, synthesize_triads, AudioBuffer, TriadSegment, ANALYSIS_SAMPLE_RATE};
use keychord::chroma::{estimate_tuning, loudness_chromagram, ChromaConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let cents: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(35.0);
    let script = [TriadSegment::new(vec![2, 6, 9], Some(2), 3.0)];
    let in_tune = synthesize_triads(&script, ANALYSIS_SAMPLE_RATE)?;
    // Playing back at a higher rate raises every partial by the same ratio.
    let ratio = 2f64.powf(cents / 1200.0);
    let shifted = AudioBuffer::new(in_tune.samples.clone(), (ANALYSIS_SAMPLE_RATE as f64 * ratio).round() as u32);
    let audio = resample(&shifted, ANALYSIS_SAMPLE_RATE)?;

    let cfg = ChromaConfig::treble();
    let estimate = estimate_tuning(&audio, &cfg)?;
    println!("applied {cents:+.1} cents, estimated {estimate:+.1} cents");
    for (label, c) in [("440 Hz reference", cfg.clone()), ("tuned reference", cfg.tuned(estimate))] {
        let profile = loudness_chromagram(&audio, &c, 1.0)?.mean_profile();
        let shown: Vec<String> = profile.iter().map(|v| format!("{v:.2}")).collect();
        println!("{label:>17}: {}", shown.join(" "));
    }
    Ok(())
}
