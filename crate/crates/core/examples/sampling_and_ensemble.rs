//! Nucleus sampling on a fixed distribution, then max-entropy selection
//! over an ensemble of untrained models.
//!
//! `cargo run --release --example sampling_and_ensemble`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use temporal_bigen::dataset::{tokenize_split, Tokenizers};
use temporal_bigen::generation::{ensemble_generate_image, top_p_sample, SamplerConfig};
use temporal_bigen::model::{Model, ModelConfig};
use temporal_bigen::synth::{generate_corpus, Split};

fn main() -> temporal_bigen::Result<()> {
    let logits = [2.0, 1.5, 1.0, 0.0, -1.0];
    for (p, temperature) in [(1.0, 1.0), (0.9, 1.0), (0.9, 0.7), (0.5, 1.0)] {
        let cfg = SamplerConfig {
            p,
            temperature,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 5];
        for _ in 0..20_000 {
            counts[top_p_sample(&logits, &cfg, &mut rng)] += 1;
        }
        let freqs: Vec<String> = counts.iter().map(|&c| format!("{:.3}", c as f64 / 20_000.0)).collect();
        println!("p={p:<3} T={temperature:<3} -> [{}]", freqs.join(", "));
    }

    let corpus = generate_corpus(0, 12, 0.75, 4)?;
    let tok = Tokenizers::fit(&corpus, 16, 8, 0)?;
    let samples = tokenize_split(&corpus, Split::Train, &tok)?;
    let members: Vec<Model> = (0..3)
        .map(|i| {
            Model::new(ModelConfig {
                init_seed: i,
                d_model: 32,
                n_layers: 1,
                n_heads: 2,
                m_features: 16,
                mlp_hidden: 64,
                ..ModelConfig::toy(tok.vocab(), tok.geometry(4), 4)
            })
        })
        .collect::<temporal_bigen::Result<_>>()?;
    let refs: Vec<&Model> = members.iter().collect();
    let s = &samples[0];
    let out = ensemble_generate_image(&refs, &tok, &s.report, s.prior_image.as_deref(), s.delta, &SamplerConfig::default())?;
    println!("\npixel entropies {:.4?}, chosen member {}", out.entropies, out.chosen);
    Ok(())
}
