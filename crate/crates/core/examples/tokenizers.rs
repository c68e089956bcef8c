//! Fits the VQ codebook and report vocabulary on a corpus, then round-trips
//! one study through both.
//!
//! `cargo run --release --example tokenizers`

use temporal_bigen::dataset::Tokenizers;
use temporal_bigen::metrics::{ssim, SSIM_WINDOW};
use temporal_bigen::synth::{generate_corpus, Split};

fn main() -> temporal_bigen::Result<()> {
    let corpus = generate_corpus(1, 60, 0.75, 4)?;
    for (k, patch) in [(16, 4), (64, 4), (64, 8)] {
        let tok = Tokenizers::fit(&corpus, k, patch, 0)?;
        let mut score = 0.0;
        let test: Vec<_> = corpus.split(Split::Test).collect();
        for rec in &test {
            let back = tok.decode_image(&tok.encode_image(&rec.image)?)?;
            score += ssim(&rec.image, &back, SSIM_WINDOW)?;
        }
        println!(
            "K={k:<3} patch={patch}: {} tokens per image, mean test SSIM after VQ {:.4}",
            tok.geometry(4).n_x,
            score / test.len() as f64
        );
    }

    let tok = Tokenizers::fit(&corpus, 64, 4, 0)?;
    println!("\nvocabulary ({} words):\n{}", tok.words.len(), tok.words.to_text());
    let rec = &corpus.records[0];
    let ids = tok.encode_report(&rec.report)?;
    println!("{:?} -> {:?} -> {:?}", rec.report, ids, tok.decode_report(&ids)?);
    let codes = tok.encode_image(&rec.image)?;
    println!("first image row of codes: {:?}", &codes[..8]);
    Ok(())
}
