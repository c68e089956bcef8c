//! Report and image metrics on hand-made pairs.
//!
//! `cargo run --release --example report_metrics`

use temporal_bigen::metrics::{bleu_n, label_metrics, rouge_l, ssim, SSIM_WINDOW};
use temporal_bigen::synth::{findings_from_report, render_report};
use temporal_bigen::tokenizer::ToyImage;

fn main() -> temporal_bigen::Result<()> {
    let reference = render_report(&[1, 0, 1, 0], Some(&[1, 1, 0, 0]));
    let candidates = [
        reference.clone(),
        render_report(&[1, 0, 1, 0], None),
        render_report(&[1, 0, 0, 0], Some(&[1, 0, 0, 0])),
    ];
    println!("reference: {reference}");
    let r: Vec<&str> = reference.split_whitespace().collect();
    for cand in &candidates {
        let c: Vec<&str> = cand.split_whitespace().collect();
        let bleu: Vec<String> = (1..=4).map(|n| bleu_n(&c, &r, n).map(|b| format!("{b:.3}"))).collect::<Result<_, _>>()?;
        let rouge = rouge_l(&c, &r);
        let labels = label_metrics(&[findings_from_report(cand, 4)], &[findings_from_report(&reference, 4)])?;
        println!(
            "{cand}\n  BLEU-1..4 [{}] ROUGE-L {:.3} label P/R/F1 {:.2}/{:.2}/{:.2}",
            bleu.join(", "),
            rouge.f,
            labels.precision,
            labels.recall,
            labels.f1
        );
    }

    let ramp: Vec<f64> = (0..1024).map(|i| ((i % 32) as f64) / 31.0).collect();
    let img = ToyImage::new(32, 32, ramp.clone())?;
    for noise in [0.0, 0.05, 0.2] {
        let noisy: Vec<f64> = ramp
            .iter()
            .enumerate()
            .map(|(i, x)| (x + noise * ((i * 7919 % 13) as f64 / 6.0 - 1.0)).clamp(0.0, 1.0))
            .collect();
        println!("SSIM ramp vs ramp+{noise:.2} noise: {:.4}", ssim(&img, &ToyImage::new(32, 32, noisy)?, SSIM_WINDOW)?);
    }
    Ok(())
}
