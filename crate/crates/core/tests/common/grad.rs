//! Finite-difference checks of the loss terms on a tiny model.

use paraformer::autograd::{Tape, Var};
use paraformer::metrics::edit_distance;
use paraformer::seq::FeatSeq;
use paraformer::tensor::Matrix;
use paraformer::{Architecture, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GAMMA: f64 = 0.7;
pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub fn tiny() -> Model {
    let cfg = ModelConfig {
        vocab_size: 5,
        feat_dim: 4,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ffn: 16,
        dropout: 0.0,
        max_frames: 16,
        max_tokens: 8,
        seed: 21,
    };
    Model::new(cfg, Architecture::Nar).unwrap()
}

pub struct Case {
    feats: FeatSeq,
    gold: Vec<usize>,
    reveal: Vec<bool>,
    paths: Vec<Vec<usize>>,
}

/// Builds the loss terms: [ce, mae, mwer, total].
pub fn terms(model: &Model, t: &mut Tape<'_>, c: &Case) -> [Var; 4] {
    let n = c.gold.len();
    let h = model.encode_on(t, &c.feats.valid(), &mut None);
    let alpha = model.predict_alpha_on(t, h).unwrap();
    let s = t.sum_all(alpha);
    let mae = t.abs_diff(s, n as f64);
    let scaled = t.scale_to_sum(alpha, n as f64);
    let (ea, plan) = t.cif(h, scaled, 1.0).unwrap();
    assert_eq!(plan.num_fires(), n);
    let ec = model.embed_on(t, &c.gold);
    let es = t.mix_rows(ea, ec, &c.reveal);
    let logits = model.decode_parallel_on(t, es, h, &mut None);
    let targets: Vec<Option<usize>> = c
        .gold
        .iter()
        .zip(&c.reveal)
        .map(|(&g, &r)| (!r).then_some(g))
        .collect();
    let n_ce = targets.iter().flatten().count();
    let ce_sum = t.cross_entropy_sum(logits, &targets);
    let ce = t.scale(ce_sum, 1.0 / n_ce as f64);
    let errors: Vec<f64> = c
        .paths
        .iter()
        .map(|p| edit_distance(p, &c.gold) as f64)
        .collect();
    let mwer = t.mwer(logits, &c.paths, &errors);
    let wce = t.scale(ce, GAMMA);
    let partial = t.add(wce, mae);
    let total = t.add(partial, mwer);
    [ce, mae, mwer, total]
}

pub fn value(model: &Model, c: &Case, k: usize) -> f64 {
    let mut t = Tape::new(model.params());
    let v = terms(model, &mut t, c);
    t.value(v[k]).item()
}

pub fn case(model: &Model) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames = 7;
    let data: Vec<f64> = (0..frames * 4).map(|_| rng.random_range(-1.5..1.5)).collect();
    let feats = FeatSeq::new(Matrix::from_vec(frames, 4, data), frames).unwrap();
    let gold = vec![3, 4, 3];
    // Candidate paths differ from each other, so MWER is not identically 0.
    let paths = vec![vec![3, 4, 4], vec![3, 3, 3], vec![4, 4, 3], vec![3, 4, 3]];
    let c = Case {
        feats,
        gold,
        reveal: vec![false, true, false],
        paths,
    };
    // Keep the absolute value away from its kink.
    let mut t = Tape::new(model.params());
    let h = model.encode_on(&mut t, &c.feats.valid(), &mut None);
    let a = model.predict_alpha_on(&mut t, h).unwrap();
    assert!((t.value(a).sum() - 3.0).abs() > 1e-2);
    c
}

pub const TERMS: [&str; 4] = ["ce", "mae", "mwer", "total"];

/// Compares the tape gradient of loss term `k` with central differences
/// over every parameter entry. Returns entries checked and the worst
/// relative error, or the first entry over tolerance.
pub fn check_term(k: usize) -> Result<(usize, f64), String> {
    let model = tiny();
    let c = case(&model);
    let name = TERMS[k];
    let mut t = Tape::new(model.params());
    let v = terms(&model, &mut t, &c);
    if t.value(v[k]).item().abs() <= 1e-6 {
        return Err(format!("{name} is zero at the test point"));
    }
    let grads = t.backward(v[k]).into_params();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in model.params().ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).clone();
        for i in 0..analytic.data().len() {
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[i] += STEP;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[i] -= STEP;
            let numeric = (value(&plus, &c, k) - value(&minus, &c, k)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs());
            let pname = model.params().name(id);
            if scale < 1e-6 {
                if (a - numeric).abs() >= 1e-8 {
                    return Err(format!("{name}: {pname}[{i}] analytic {a} numeric {numeric}"));
                }
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            if rel >= TOL {
                return Err(format!("{name}: {pname}[{i}] analytic {a} numeric {numeric}"));
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok((checked, worst))
}
