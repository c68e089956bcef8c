mod common;

use proptest::collection::vec;
use proptest::prelude::*;
use temporal_bigen::attention::{causal_product, favor_head, RandomFeatureMap, PrefixState, DEFAULT_EPS};
use temporal_bigen::generation::{argmax, pixel_entropy, select_max_entropy, top_p_sample, SamplerConfig};
use temporal_bigen::layout::{assemble, bucketize_delta, EmbedSource, Geometry, Mode, SegmentKind, Special, Vocab, TT_BUCKETS};
use temporal_bigen::linalg::dot;
use temporal_bigen::metrics::{bleu_n, label_metrics, lcs_len, rouge_l, ssim, token_accuracy};
use temporal_bigen::synth::{findings_from_report, render_report, generate_corpus, report_vocab, Split};
use temporal_bigen::tensor::Tensor;
use temporal_bigen::tokenizer::{fit_codebook, text_decode, text_encode, vq_decode, vq_encode, ToyImage};

fn naive_causal(x: &[f64], y: &[f64], z: &[f64], n: usize, a: usize, b: usize, reverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        for j in 0..n {
            if (reverse && j < i) || (!reverse && j > i) {
                continue;
            }
            let w = dot(&x[i * a..(i + 1) * a], &y[j * a..(j + 1) * a]);
            for c in 0..b {
                out[i * b + c] += w * z[j * b + c];
            }
        }
    }
    out
}

fn qkv(n: usize, d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (vec(-1.0..1.0f64, n * d), vec(-1.0..1.0f64, n * d), vec(-1.0..1.0f64, n * d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_len_matches_shape(r in 1usize..6, c in 1usize..6, fill in -5.0..5.0f64) {
        let t = Tensor::new(vec![fill; r * c], &[r, c]);
        prop_assert_eq!(t.numel(), t.data().len());
        prop_assert!(Tensor::try_new(vec![fill; r * c + 1], &[r, c]).is_err());
        let z = t.add(&Tensor::zeros(&[c])).unwrap();
        prop_assert_eq!(z.data(), t.data());
    }

    #[test]
    fn causal_product_matches_quadratic(
        n in 1usize..50, a in 1usize..5, b in 1usize..5, reverse in any::<bool>(), seed in any::<u64>()
    ) {
        let mut r = common::rng(seed);
        let x = common::uniform(&mut r, n * a, -1.0, 1.0);
        let y = common::uniform(&mut r, n * a, -1.0, 1.0);
        let z = common::uniform(&mut r, n * b, -1.0, 1.0);
        let fast = causal_product(&x, &y, &z, n, a, b, reverse);
        let slow = naive_causal(&x, &y, &z, n, a, b, reverse);
        for (f, s) in fast.iter().zip(&slow) {
            prop_assert!((f - s).abs() < 1e-10);
        }
    }

    #[test]
    fn favor_matches_prefix_scan_and_is_causal(
        (q, k, v) in qkv(37, 3), j in 0usize..37, bump in -2.0..2.0f64, seed in 0u64..1000
    ) {
        let (n, d) = (37, 3);
        let map = RandomFeatureMap::new(8, d, seed, true).unwrap();
        let out = favor_head(&q, &k, &v, n, d, &map, DEFAULT_EPS);
        let scale = (d as f64).powf(-0.25);
        let scaled = |x: &[f64]| -> Vec<f64> { x.iter().map(|e| e * scale).collect() };
        let (pq, pk) = (map.features(&scaled(&q)), map.features(&scaled(&k)));
        let mut state = PrefixState::new(8, d);
        let mut row = vec![0.0; d];
        for i in 0..n {
            state.push(&pk[i * 8..(i + 1) * 8], &v[i * d..(i + 1) * d]);
            state.read(&pq[i * 8..(i + 1) * 8], DEFAULT_EPS, &mut row);
            for c in 0..d {
                prop_assert!((row[c] - out[i * d + c]).abs() < 1e-10);
            }
        }
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for t in [&mut q2, &mut k2, &mut v2] {
            for e in &mut t[j * d..(j + 1) * d] {
                *e += bump;
            }
        }
        let out2 = favor_head(&q2, &k2, &v2, n, d, &map, DEFAULT_EPS);
        prop_assert_eq!(&out[..j * d], &out2[..j * d]);
    }

    #[test]
    fn features_positive_and_orthogonal_blocks(d in 1usize..8, blocks in 1usize..4, seed in any::<u64>(), x in vec(-3.0..3.0f64, 8)) {
        let map = RandomFeatureMap::new(d * blocks, d, seed, true).unwrap();
        let phi = map.features(&x[..d]);
        prop_assert!(phi.iter().all(|&p| p > 0.0));
        for b in 0..blocks {
            for r in 0..d {
                for s in 0..d {
                    let row = |i: usize| &map.omega[(b * d + i) * d..(b * d + i + 1) * d];
                    let g = dot(row(r), row(s));
                    let want = if r == s { d as f64 } else { 0.0 };
                    prop_assert!((g - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn delta_buckets_are_monotone(a in 0.001..500.0f64, b in 0.001..500.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (bl, bh) = (bucketize_delta(Some(lo)).unwrap(), bucketize_delta(Some(hi)).unwrap());
        prop_assert!(bl >= 1 && bl <= bh && bh < TT_BUCKETS);
        prop_assert_eq!(bucketize_delta(None).unwrap(), 0);
    }

    #[test]
    fn layout_invariants(
        seed in any::<u64>(), mode_ix in 0usize..3, has_prior in any::<bool>(),
        report_len in 0usize..=16, delta in 1.0..100.0f64
    ) {
        let vocab = Vocab::new(10, 8);
        let geometry = Geometry { n_x: 16, n_r: 16 };
        let mut r = common::rng(seed);
        let codes = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            (0..16).map(|_| rand::Rng::gen_range(r, 0..8)).collect()
        };
        let report: Vec<usize> = (0..report_len).map(|_| rand::Rng::gen_range(&mut r, 0..10)).collect();
        let (cur, prev) = (codes(&mut r), codes(&mut r));
        let mode = [Mode::Train, Mode::InferReport, Mode::InferImage][mode_ix];
        let seq = assemble(
            &vocab,
            geometry,
            (mode != Mode::InferReport).then_some(report.as_slice()),
            (mode != Mode::InferImage).then_some(cur.as_slice()),
            has_prior.then_some(prev.as_slice()),
            has_prior.then_some(delta),
            mode,
            &mut r,
        ).unwrap();
        prop_assert_eq!(seq.len(), geometry.total_len());
        prop_assert_eq!(seq.ids[0], vocab.temporal(bucketize_delta(has_prior.then_some(delta)).unwrap()));
        prop_assert_eq!(seq.sources[0], EmbedSource::Temporal);
        prop_assert_eq!(seq.ids[seq.cls_position()], vocab.special(Special::Cls));
        prop_assert_eq!(seq.ids.iter().filter(|&&i| i == vocab.special(Special::Cls)).count(), 1);
        if let Some(pad) = seq.segment(SegmentKind::PreviousPad) {
            prop_assert!(!has_prior);
            prop_assert!(pad.clone().all(|p| !seq.loss_mask[p]));
        }
        prop_assert!(!seq.loss_mask[0]);
    }

    #[test]
    fn top_p_stays_in_nucleus(logits in vec(-5.0..5.0f64, 1..12), p in 0.05..1.0f64, t in 0.1..2.0f64, seed in any::<u64>()) {
        let cfg = SamplerConfig { p, temperature: t, ..SamplerConfig::default() };
        let id = top_p_sample(&logits, &cfg, &mut common::rng(seed));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|x| ((x - max) / t).exp()).collect();
        let total: f64 = w.iter().sum();
        // Mass strictly above the chosen id's probability must still be short of p.
        let above: f64 = w.iter().enumerate()
            .filter(|&(i, &x)| x > w[id] || (x == w[id] && i < id))
            .map(|(_, x)| x / total)
            .sum();
        prop_assert!(above < p + 1e-12);
        let greedy = SamplerConfig { greedy: true, ..cfg };
        prop_assert_eq!(top_p_sample(&logits, &greedy, &mut common::rng(seed)), argmax(&logits));
    }

    #[test]
    fn text_metrics_are_bounded(a in vec(0u8..5, 0..12), b in vec(0u8..5, 1..12)) {
        for n in 1..=4 {
            let s = bleu_n(&a, &b, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
        if b.len() >= 4 {
            prop_assert!((bleu_n(&b, &b, 4).unwrap() - 1.0).abs() < 1e-12);
        }
        let l = lcs_len(&a, &b);
        prop_assert!(l <= a.len().min(b.len()));
        prop_assert_eq!(l, lcs_len(&b, &a));
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r.f));
        let acc = token_accuracy(&a, &b);
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn label_metrics_bounded(rows in vec(vec(0u8..2, 4), 1..10), flips in vec(0u8..2, 40)) {
        let pred: Vec<Vec<u8>> = rows.iter().enumerate()
            .map(|(i, r)| r.iter().enumerate().map(|(j, &x)| x ^ flips[(i * 4 + j) % 40]).collect())
            .collect();
        let m = label_metrics(&pred, &rows).unwrap();
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.tp + m.fn_, rows.iter().flatten().filter(|&&x| x == 1).count());
        let perfect = label_metrics(&rows, &rows).unwrap();
        prop_assert!(perfect.zero_division || perfect.f1 == 1.0);
    }

    #[test]
    fn ssim_identity_symmetry(a in vec(0.0..1.0f64, 64), b in vec(0.0..1.0f64, 64), w in 2usize..=8) {
        let (ia, ib) = (ToyImage::new(8, 8, a).unwrap(), ToyImage::new(8, 8, b).unwrap());
        prop_assert!((ssim(&ia, &ia, w).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((ssim(&ia, &ib, w).unwrap() - ssim(&ib, &ia, w).unwrap()).abs() < 1e-12);
        let e = pixel_entropy(&ia, 256).unwrap();
        prop_assert!(e >= 0.0 && e <= (256f64).ln() + 1e-12);
    }

    #[test]
    fn max_entropy_selection(es in vec(0.0..5.0f64, 1..8)) {
        let i = select_max_entropy(&es).unwrap();
        prop_assert!(es.iter().all(|&e| e <= es[i]));
        prop_assert!(es[..i].iter().all(|&e| e < es[i]));
    }

    #[test]
    fn vq_codes_roundtrip(seed in 0u64..50, codes in vec(0usize..6, 16)) {
        let corpus = generate_corpus(seed, 6, 0.5, 4).unwrap();
        let images: Vec<ToyImage> = corpus.records.iter().map(|r| r.image.clone()).collect();
        let cb = fit_codebook(&images, 6, 8, seed).unwrap();
        let img = vq_decode(&codes, &cb, 8, 32, 32).unwrap();
        prop_assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert_eq!(vq_encode(&img, &cb, 8).unwrap(), codes);
    }

    #[test]
    fn text_roundtrip(ids in vec(0usize..10, 0..16)) {
        let vocab = report_vocab(4);
        let text = text_decode(&ids, &vocab).unwrap();
        prop_assert_eq!(text_encode(&text, &vocab).unwrap(), ids);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn corpus_invariants(seed in any::<u64>(), patients in 4usize..40, frac in 0.0..1.0f64) {
        let corpus = generate_corpus(seed, patients, frac, 4).unwrap();
        let mut split_of = std::collections::HashMap::new();
        for r in &corpus.records {
            prop_assert_eq!(*split_of.entry(r.patient_id).or_insert(r.split), r.split);
            prop_assert_eq!(r.delta.is_some(), corpus.prior(r).is_some());
            if let Some(d) = r.delta {
                prop_assert!(d > 0.0);
            }
            prop_assert_eq!(&findings_from_report(&r.report, 4)[..4], r.labels.as_slice());
            prop_assert_eq!(&r.report, &render_report(&r.labels, corpus.prior(r).map(|p| p.labels.as_slice())));
            prop_assert!(r.image.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| corpus.split(s).count()).sum();
        prop_assert_eq!(total, corpus.records.len());
    }
}
