//! Generates a small longitudinal corpus, prints its split structure and a
//! patient with two studies, and writes it as JSONL.
//!
//! `cargo run --release --example synth_corpus [out_dir]`

use std::path::PathBuf;

use temporal_bigen::synth::{generate_corpus, save_corpus, temporal_clause, Split};

fn main() -> temporal_bigen::Result<()> {
    let corpus = generate_corpus(0, 100, 0.75, 4)?;
    println!("{:<6} {:>12} {:>12} {:>8}", "split", "one study", "two studies", "studies");
    for split in Split::ALL {
        let c = corpus.manifest.counts(split).expect("every split is counted");
        println!(
            "{:<6} {:>12} {:>12} {:>8}",
            format!("{split:?}"),
            c.one_study_patients,
            c.two_study_patients,
            corpus.split(split).count()
        );
    }

    let second = corpus.records.iter().find(|r| r.delta.is_some()).expect("some patient has two studies");
    let first = corpus.prior(second).expect("prior exists");
    println!("\npatient {}", second.patient_id);
    println!("  t0 labels {:?}: {}", first.labels, first.report);
    println!("  t1 labels {:?}: {} (+{:.1} days)", second.labels, second.report, second.delta.unwrap());
    println!("  clause {:?}", temporal_clause(&second.labels, &first.labels));

    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("tbg_corpus"), PathBuf::from);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("corpus.jsonl");
    save_corpus(&corpus, &path)?;
    std::fs::write(dir.join("second.pgm"), second.image.to_pgm())?;
    println!("\nwrote {} and second.pgm", path.display());
    Ok(())
}
