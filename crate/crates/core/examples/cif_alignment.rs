//! Integrate-and-fire on hand-written weights, with the dynamic threshold
//! and with a fixed threshold of 1.
//!
//!     cargo run --example cif_alignment

use paraformer::cif::{cif_integrate, dynamic_threshold, predict_token_count, sum_alpha, AlphaSeq};
use paraformer::seq::HiddenSeq;
use paraformer::tensor::Matrix;

fn show(label: &str, alpha: &AlphaSeq, beta: f64) -> paraformer::Result<()> {
    // One-hot hidden frames make each embedding row read as its weights.
    let t = alpha.valid_len();
    let mut eye = Matrix::zeros(t, t);
    for i in 0..t {
        eye.set(i, i, 1.0);
    }
    let hidden = HiddenSeq::new(eye, t)?;
    let (emb, plan) = cif_integrate(&hidden, alpha, beta)?;
    println!("{label}: beta {beta:.4}, {} fires, residual {:.4}", plan.num_fires(), plan.residual);
    for (k, fire) in plan.fires.iter().enumerate() {
        let parts: Vec<String> = fire
            .contributions
            .iter()
            .map(|(f, w)| format!("{w:.3}*h{f}"))
            .collect();
        println!("  e{k} = {}   row {:?}", parts.join(" + "), emb.valid().row(k));
    }
    Ok(())
}

fn main() -> paraformer::Result<()> {
    let alpha = AlphaSeq::from_valid(vec![0.6, 0.6, 0.8])?;
    show("exact split", &alpha, 1.0)?;

    let alpha = AlphaSeq::from_valid(vec![0.3, 0.9, 0.4, 0.7, 0.6])?;
    let beta = dynamic_threshold(&alpha)?;
    println!("\nsum {:.2} -> {} tokens", sum_alpha(&alpha), predict_token_count(&alpha));
    show("dynamic threshold", &alpha, beta)?;
    show("fixed threshold", &alpha, 1.0)?;
    let json = cif_integrate(&HiddenSeq::new(Matrix::zeros(5, 2), 5)?, &alpha, beta)?.1.to_json();
    println!("\nfiring plan as json: {json}");
    Ok(())
}
