//! Lays out one study in each mode and prints the token order, the segment
//! ranges and which positions the loss scores.
//!
//! `cargo run --release --example sequence_layout`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use temporal_bigen::dataset::{tokenize_split, Tokenizers};
use temporal_bigen::layout::{assemble, bucketize_delta, Mode};
use temporal_bigen::synth::{generate_corpus, Split};

fn main() -> temporal_bigen::Result<()> {
    let corpus = generate_corpus(0, 20, 1.0, 4)?;
    let tok = Tokenizers::fit(&corpus, 64, 4, 0)?;
    let samples = tokenize_split(&corpus, Split::Train, &tok)?;
    let vocab = tok.vocab();
    let geometry = tok.geometry(4);
    let with = samples.iter().find(|s| s.has_prior()).expect("two-study patient");
    let without = samples.iter().find(|s| !s.has_prior()).expect("first study");
    println!(
        "vocab: {} words, {} codes, {} total; geometry n_x={} n_r={} length {}",
        vocab.words,
        vocab.image_codes,
        vocab.total(),
        geometry.n_x,
        geometry.n_r,
        geometry.total_len()
    );
    for days in [0.5, 3.0, 20.0, 100.0] {
        println!("  delta {days:>5} days -> bucket {}", bucketize_delta(Some(days))?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, s) in [("with prior", with), ("without prior", without)] {
        for mode in [Mode::Train, Mode::InferReport, Mode::InferImage] {
            let seq = assemble(
                &vocab,
                geometry,
                (mode != Mode::InferReport).then_some(s.report.as_slice()),
                (mode != Mode::InferImage).then_some(s.image.as_slice()),
                s.prior_image.as_deref(),
                s.delta,
                mode,
                &mut rng,
            )?;
            let segments: Vec<String> = seq
                .order
                .iter()
                .zip(&seq.segment_ranges)
                .map(|(k, r)| format!("{k:?} {}..{}", r.start, r.end))
                .collect();
            println!(
                "{name:<14} {mode:<11?} len {} | {} | scored {} | target {:?}",
                seq.len(),
                segments.join(", "),
                seq.loss_mask.iter().filter(|&&m| m).count(),
                seq.target
            );
        }
    }
    Ok(())
}
