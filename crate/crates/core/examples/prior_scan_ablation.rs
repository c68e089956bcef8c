//! Train the default toy model on the longitudinal corpus, then compare
//! generation with and without the prior scan on the test studies that
//! have one.
//!
//! `cargo run --release --example prior_scan_ablation [epochs] [out_dir]`

use std::path::PathBuf;

use temporal_bigen::dataset::{tokenize_split, Tokenizers, DEFAULT_CODEBOOK_SIZE, DEFAULT_PATCH};
use temporal_bigen::evaluate::{evaluate, EvalConfig, Subset};
use temporal_bigen::generation::SamplerConfig;
use temporal_bigen::model::{Model, ModelConfig};
use temporal_bigen::synth::{generate_corpus, Split};
use temporal_bigen::train::{train, TrainConfig};

fn main() -> temporal_bigen::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |a| a.parse().expect("epochs"));
    let out: Option<PathBuf> = args.next().map(PathBuf::from);
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
    }

    let corpus = generate_corpus(0, 1000, 0.75, 4)?;
    let tok = Tokenizers::fit(&corpus, DEFAULT_CODEBOOK_SIZE, DEFAULT_PATCH, 0)?;
    let train_set = tokenize_split(&corpus, Split::Train, &tok)?;
    let val_set = tokenize_split(&corpus, Split::Val, &tok)?;
    let cfg = ModelConfig::toy(tok.vocab(), tok.geometry(4), 4);
    println!(
        "{} train / {} val samples, {} parameters",
        train_set.len(),
        val_set.len(),
        cfg.parameter_count()
    );

    let start = std::time::Instant::now();
    let tc = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let outcome = train(Model::new(cfg)?, &tok, &train_set, &val_set, &tc, out.as_deref(), |row| {
        println!(
            "[{:6.0}s] epoch {:3} {:5} gen_ce {:.4} cls_bce {:.4}",
            start.elapsed().as_secs_f64(),
            row.epoch,
            row.split,
            row.gen_ce,
            row.cls_bce
        );
    })?;

    let members: Vec<Model> = match &out {
        Some(_) => outcome
            .checkpoints
            .iter()
            .map(|p| temporal_bigen::checkpoint::Checkpoint::load(p).map(|c| c.model))
            .collect::<temporal_bigen::Result<_>>()?,
        None => vec![outcome.model.clone()],
    };
    let refs: Vec<&Model> = members.iter().collect();
    let report = evaluate(
        &corpus,
        &tok,
        &outcome.model,
        &refs,
        &EvalConfig {
            subset: Subset::WithPrior,
            sampler: SamplerConfig::greedy(),
            ..EvalConfig::default()
        },
    )?;
    println!("{}", report.to_json()?);
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
