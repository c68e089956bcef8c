//! Trains a small model on a small corpus, saves and reloads the last
//! checkpoint, and generates in both directions for a test study.
//!
//! `cargo run --release --example train_and_generate [epochs]`

use temporal_bigen::checkpoint::Checkpoint;
use temporal_bigen::dataset::{tokenize_split, Tokenizers};
use temporal_bigen::generation::{generate_image, generate_report, SamplerConfig};
use temporal_bigen::metrics::{ssim, SSIM_WINDOW};
use temporal_bigen::model::{Model, ModelConfig};
use temporal_bigen::synth::{generate_corpus, Split};
use temporal_bigen::train::{train, TrainConfig};

fn main() -> temporal_bigen::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(8, |a| a.parse().expect("epochs"));
    let corpus = generate_corpus(0, 60, 0.75, 4)?;
    let tok = Tokenizers::fit(&corpus, 32, 8, 0)?;
    let train_set = tokenize_split(&corpus, Split::Train, &tok)?;
    let val_set = tokenize_split(&corpus, Split::Val, &tok)?;
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        m_features: 32,
        mlp_hidden: 128,
        ..ModelConfig::toy(tok.vocab(), tok.geometry(4), 4)
    };
    println!("{} parameters, {} training studies", cfg.parameter_count(), train_set.len());

    let dir = tempfile_dir()?;
    let tc = TrainConfig {
        epochs,
        keep_checkpoints: 1,
        ..TrainConfig::default()
    };
    let out = train(Model::new(cfg)?, &tok, &train_set, &val_set, &tc, Some(&dir), |row| {
        println!("epoch {:>2} {:<5} gen_ce {:.4} cls_bce {:.4}", row.epoch, row.split, row.gen_ce, row.cls_bce);
    })?;
    let ck = Checkpoint::load(out.checkpoints.last().expect("one checkpoint kept"))?;
    assert_eq!(ck.model.params, out.model.params);

    let test = tokenize_split(&corpus, Split::Test, &tok)?;
    let s = test.iter().find(|s| s.has_prior()).unwrap_or(&test[0]);
    let greedy = SamplerConfig::greedy();
    let rep = generate_report(&ck.model, &s.image, s.prior_image.as_deref(), s.delta, &greedy)?;
    println!("\ntrue report:      {}", tok.decode_report(&s.report)?);
    println!("generated report: {}", tok.decode_report(&rep.words)?);
    println!("cls probabilities {:.3?}", rep.cls_probs);
    let img = generate_image(&ck.model, &s.report, s.prior_image.as_deref(), s.delta, &greedy)?;
    let score = ssim(&tok.decode_image(&img.codes)?, &tok.decode_image(&s.image)?, SSIM_WINDOW)?;
    println!("generated image SSIM vs tokenized truth {score:.4}");
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("tbg_train_{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
