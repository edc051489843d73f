//! Simultaneous estimation of keys, chords and bass notes from music audio.
//!
//! The crate is organised along the processing chain:
//!
//! - [`audio_io`]: WAV input, resampling to 11025 Hz and synthetic triad fixtures.
//! - [`chroma`]: loudness-based bass and treble chromagrams with tuning
//!   estimation and beat-synchronous median aggregation.
//! - [`annotations`]: `.lab` parsing, chord symbols, the 25- and 121-chord
//!   alphabets and beat-synchronous labels.
//! - [`model`]: maximum-likelihood training of the key/chord/bass HMM.
//! - [`decode`]: exact factored Viterbi decoding with key-transition,
//!   chord-to-bass and chord-alphabet constraints, plus max-gamma decoding.
//! - [`eval`]: overlap ratios, chord precision, key and bass accuracy and a
//!   paired t-test.
//! - [`synth`]: labelled synthetic songs for tests and demonstrations.
//! - [`cli`]: the batch front end behind the `keychord` binary.
//!
//! Runnable walkthroughs of each stage live in the crate's `examples/`.

pub mod annotations;
pub mod audio_io;
pub mod chroma;
pub mod cli;
pub mod decode;
pub mod eval;
pub mod model;
pub mod synth;

use std::io::Write;
use std::path::Path;

pub use annotations::{Alphabet, AlphabetKind, ChordSymbol, FrameLabels, IntervalLabels};
pub use audio_io::AudioBuffer;
pub use chroma::{Band, ChromaConfig, Chromagram, SongFeatures};
pub use decode::{Constraints, DecodePath};
pub use model::{HpModel, TrainConfig};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
