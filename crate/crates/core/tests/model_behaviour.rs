mod common;

use common::{rng, tiny_model};
use rand::Rng;
use temporal_bigen::dataset::{tokenize_record, Sample, Tokenizers};
use temporal_bigen::generation::{
    ensemble_generate_image, generate_image, generate_report, pixel_entropy, top_p_sample, SamplerConfig, ENTROPY_BINS,
};
use temporal_bigen::layout::{assemble, AssembledSequence, Mode};
use temporal_bigen::model::{Decoder, Model};
use temporal_bigen::synth::Corpus;

fn sample_with_prior(corpus: &Corpus, tok: &Tokenizers) -> Sample {
    let rec = corpus.records.iter().find(|r| r.delta.is_some()).unwrap();
    tokenize_record(corpus, rec, tok).unwrap()
}

fn train_seq(model: &Model, s: &Sample, seed: u64) -> AssembledSequence {
    assemble(
        &model.config.vocab,
        model.config.geometry,
        Some(&s.report),
        Some(&s.image),
        s.prior_image.as_deref(),
        s.delta,
        Mode::Train,
        &mut rng(seed),
    )
    .unwrap()
}

#[test]
fn decoder_matches_tape_forward() {
    let (model, tok, corpus) = tiny_model(5, 2);
    let s = sample_with_prior(&corpus, &tok);
    for seed in 0..4 {
        let seq = train_seq(&model, &s, seed);
        let (logits, cls) = model.forward(&model.leaves(), &seq, None).unwrap();
        let mut dec = Decoder::new(&model);
        let mut stepped = Vec::new();
        let mut p = 0;
        let mut r = rng(seed);
        while p < seq.len() {
            let q = (p + r.gen_range(1..6)).min(seq.len());
            stepped.extend(dec.feed(&seq, p..q).unwrap());
            p = q;
        }
        assert_eq!(stepped.len(), logits.numel());
        for (a, b) in stepped.iter().zip(logits.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (a, b) in dec.cls_logits().iter().zip(cls.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn forward_is_deterministic_and_causal() {
    let (model, tok, corpus) = tiny_model(6, 2);
    let s = sample_with_prior(&corpus, &tok);
    let seq = train_seq(&model, &s, 1);
    let (a, _) = model.forward_plain(&seq).unwrap();
    let (b, _) = model.forward_plain(&seq).unwrap();
    assert_eq!(a, b);
    let tape = model.forward(&model.leaves(), &seq, None).unwrap().0;
    let v = model.config.vocab_size();
    let mut r = rng(2);
    for _ in 0..20 {
        let j = r.gen_range(1..seq.len());
        let mut other = seq.clone();
        other.ids[j] = (seq.ids[j] + r.gen_range(1..v)) % v;
        let (plain, _) = model.forward_plain(&other).unwrap();
        assert_eq!(&plain[..j * v], &a[..j * v]);
        let t = model.forward(&model.leaves(), &other, None).unwrap().0;
        assert_eq!(&t.data()[..j * v], &tape.data()[..j * v]);
    }
}

#[test]
fn top_p_monte_carlo_matches_softmax() {
    let logits = [0.3, -1.0, 1.2, 0.0, 0.5];
    let cfg = SamplerConfig {
        p: 1.0,
        temperature: 1.0,
        ..SamplerConfig::default()
    };
    let mut counts = [0usize; 5];
    let mut r = rng(11);
    let draws = 100_000;
    for _ in 0..draws {
        counts[top_p_sample(&logits, &cfg, &mut r)] += 1;
    }
    let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
    for (i, &c) in counts.iter().enumerate() {
        let want = logits[i].exp() / z;
        assert!((c as f64 / draws as f64 - want).abs() < 0.01, "token {i}");
    }
    let peaked = SamplerConfig {
        p: 0.9,
        ..SamplerConfig::default()
    };
    let cfg10 = SamplerConfig { temperature: 1.0, ..peaked };
    for _ in 0..1000 {
        assert_eq!(top_p_sample(&[10.0, 0.0, 0.0], &cfg10, &mut r), 0);
    }
}

#[test]
fn generation_respects_segments() {
    let (model, tok, corpus) = tiny_model(7, 1);
    let s = sample_with_prior(&corpus, &tok);
    let sampler = SamplerConfig {
        seed: 3,
        ..SamplerConfig::default()
    };
    let rep = generate_report(&model, &s.image, s.prior_image.as_deref(), s.delta, &sampler).unwrap();
    assert!(rep.words.iter().all(|&w| w < tok.words.len()));
    assert!(rep.words.len() <= model.config.geometry.n_r);
    assert_eq!(rep.cls_probs.len(), 4);
    let again = generate_report(&model, &s.image, s.prior_image.as_deref(), s.delta, &sampler).unwrap();
    assert_eq!(rep.words, again.words);
    let img = generate_image(&model, &s.report, s.prior_image.as_deref(), s.delta, &sampler).unwrap();
    assert_eq!(img.codes.len(), model.config.geometry.n_x);
    assert!(img.codes.iter().all(|&c| c < tok.codebook.k));
    assert!(generate_report(&model, &s.image, None, Some(3.0), &sampler).is_err());
}

#[test]
fn ensemble_never_picks_constant_member() {
    let (model, mut tok, corpus) = tiny_model(8, 1);
    // Member 0 emits only code 0, whose codebook entry is a flat patch.
    let dim = tok.codebook.dim;
    tok.codebook.entries[..dim].iter_mut().for_each(|x| *x = 0.5);
    let mut sabotaged = model.clone();
    let vocab = sabotaged.config.vocab;
    let bias = &mut sabotaged.params.b_out.data;
    for code in 0..vocab.image_codes {
        bias[vocab.image(code)] = if code == 0 { 1e6 } else { -1e6 };
    }
    let s = sample_with_prior(&corpus, &tok);
    let members = [&sabotaged, &model];
    for trial in 0..20u64 {
        let sampler = SamplerConfig {
            seed: trial,
            ..SamplerConfig::default()
        };
        let out = ensemble_generate_image(&members, &tok, &s.report, None, None, &sampler).unwrap();
        assert_ne!(out.chosen, 0);
        assert_eq!(out.entropies[0], 0.0);
        let e = pixel_entropy(&out.image, ENTROPY_BINS).unwrap();
        assert_eq!(e, out.entropies[out.chosen]);
    }
}
