//! Memorise eight studies, then decode them back greedily in both directions.
//!
//! `cargo run --release --example overfit_memorization [epochs]`

use temporal_bigen::dataset::{tokenize_split, Tokenizers};
use temporal_bigen::generation::{generate_image, generate_report, SamplerConfig};
use temporal_bigen::metrics::{ssim, SSIM_WINDOW};
use temporal_bigen::model::{Model, ModelConfig};
use temporal_bigen::optim::AdamWConfig;
use temporal_bigen::synth::{generate_corpus, Split};
use temporal_bigen::train::{train, TrainConfig};

fn main() -> temporal_bigen::Result<()> {
    let epochs = std::env::args().nth(1).map_or(500, |a| a.parse().expect("epochs"));
    let corpus = generate_corpus(3, 10, 0.5, 4)?;
    let tok = Tokenizers::fit(&corpus, 64, 4, 0)?;
    let mut samples = tokenize_split(&corpus, Split::Train, &tok)?;
    samples.truncate(8);

    let mut cfg = ModelConfig::toy(tok.vocab(), tok.geometry(4), 4);
    cfg.dropout = 0.0;
    let tc = TrainConfig {
        epochs,
        batch_size: 1,
        optimizer: AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    let t = std::time::Instant::now();
    let out = train(Model::new(cfg)?, &tok, &samples, &[], &tc, None, |row| {
        if row.split == "train" && row.epoch % 50 == 0 {
            println!("epoch {:4}  gen_ce {:.5}  cls_bce {:.5}", row.epoch, row.gen_ce, row.cls_bce);
        }
    })?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());

    let greedy = SamplerConfig::greedy();
    let (mut reports_ok, mut images_ok) = (0, 0);
    for s in &samples {
        let r = generate_report(&out.model, &s.image, s.prior_image.as_deref(), s.delta, &greedy)?;
        let img = generate_image(&out.model, &s.report, s.prior_image.as_deref(), s.delta, &greedy)?;
        let score = ssim(&tok.decode_image(&img.codes)?, &tok.decode_image(&s.image)?, SSIM_WINDOW)?;
        reports_ok += usize::from(r.words == s.report);
        images_ok += usize::from(score == 1.0);
        println!(
            "prior={:5}  report {:?}  ssim {score:.4}",
            s.has_prior(),
            tok.decode_report(&r.words)?
        );
    }
    println!("exact reports {reports_ok}/8, exact images {images_ok}/8");
    Ok(())
}
