//! Scores a hand-written prediction against ground truth in every
//! comparison mode and runs a paired t-test over per-song ratios.
//!
//! `cargo run --example evaluate`

use std::error::Error;

use keychord::annotations::parse_lab_str;
use keychord::eval::{aggregate, overlap, paired_t_test, predominant_key, ComparisonMode};

const TRUTH: &str = "0.0 4.0 C:maj\n4.0 6.0 A:maj/3\n6.0 8.0 D:min7\n8.0 10.0 G:7\n10.0 11.0 X\n";
const PRED: &str = "0.0 4.5 C:maj\n4.5 6.0 A:maj\n6.0 8.0 D:min\n8.0 11.0 G:maj\n";

fn main() -> Result<(), Box<dyn Error>> {
    let truth = parse_lab_str(TRUTH)?;
    let pred = parse_lab_str(PRED)?;
    for mode in [ComparisonMode::MajMin, ComparisonMode::Exact, ComparisonMode::NoteSet, ComparisonMode::Bass] {
        let o = overlap(&pred, &truth, mode)?;
        println!("{mode:>8?}: {:.2} of {:.2} s = {:.4}", o.matched, o.total, o.ratio());
    }
    let keys = parse_lab_str("0.0 3.0 C:maj\n3.0 10.0 A:min\n")?;
    println!("predominant key index: {}", predominant_key(&keys)?);

    let system_a = [0.81, 0.74, 0.92, 0.66, 0.88];
    let system_b = [0.78, 0.70, 0.90, 0.67, 0.80];
    let durations = [210.0, 185.0, 240.0, 160.0, 300.0];
    let (or, waor) = aggregate(&system_a, &durations)?;
    println!("OR {or:.4}, WAOR {waor:.4}");
    let t = paired_t_test(&system_a, &system_b)?;
    println!("paired t-test: t = {:.4}, df = {}, p = {:.4}", t.t, t.df, t.p);
    Ok(())
}
