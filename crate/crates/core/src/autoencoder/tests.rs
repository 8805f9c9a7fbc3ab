use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::gradcheck::check_params;
use crate::sampling::TimeSampling;
use crate::seqdata::{pad_batch, pad_batch_to, TokenSequence, MASK};

fn random_seqs(n: usize, len_range: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(len_range.0..=len_range.1);
            TokenSequence {
                residues: (0..len).map(|_| rng.random_range(0..20u8)).collect(),
                id: None,
            }
        })
        .collect()
}

fn tiny_config() -> BlockConfig {
    BlockConfig::new(8, 2, 1, false)
}

#[test]
fn encode_is_deterministic_with_padded_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = AutoencoderModel::new(&tiny_config(), false, &mut rng).unwrap();
    let batch = pad_batch(&random_seqs(3, (5, 12), &mut rng)).unwrap();
    let a = model.encode(&batch).unwrap();
    let b = model.encode(&batch).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.z.dim(), (3, 256, 8));
    for bi in 0..3 {
        assert_eq!(a.z.slice(s![bi, 0, ..]).iter().filter(|v| **v != 0.0).count(), 0);
    }
}

#[test]
fn encode_is_per_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = AutoencoderModel::new(&tiny_config(), false, &mut rng).unwrap();
    let seqs = random_seqs(4, (3, 9), &mut rng);
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<TokenSequence> = perm.iter().map(|&i| seqs[i].clone()).collect();
    let a = model.encode(&pad_batch(&seqs).unwrap()).unwrap();
    let b = model.encode(&pad_batch(&permuted).unwrap()).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(a.z.slice(s![old, .., ..]), b.z.slice(s![new, .., ..]));
    }
}

#[test]
fn decode_shapes_and_trivial_affine_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = AutoencoderModel::new(&tiny_config(), true, &mut rng).unwrap();
    let batch = pad_batch(&random_seqs(2, (4, 6), &mut rng)).unwrap();
    let lat = model.encode(&batch).unwrap();
    let logits = model.decode(&lat).unwrap();
    assert_eq!(logits.dim().2, 20);
    assert_eq!(logits, model.decode(&lat).unwrap());

    // An affine map commutes with affine combinations.
    let mut other = lat.clone();
    other.z.mapv_inplace(|v| v * -0.5 + 0.3);
    let mut mix = lat.clone();
    mix.z = &lat.z * 0.25 + &other.z * 0.75;
    let expected = model.decode(&lat).unwrap() * 0.25 + model.decode(&other).unwrap() * 0.75;
    let got = model.decode(&mix).unwrap();
    assert!((&got - &expected).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn noise_mask_limits_and_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = vec![Array2::from_shape_fn((3, 4), |_| -> f64 { StandardNormal.sample(&mut rng) })];
    let lat = LatentBatch::from_residues(&rows, 6, 4).unwrap();
    let eps = Array3::from_shape_fn(lat.z.raw_dim(), |_| -> f64 { StandardNormal.sample(&mut rng) });
    let mut times = Array2::zeros((1, 6));
    times[[0, 1]] = 1e-9;
    times[[0, 2]] = 1.0 - 1e-9;
    times[[0, 3]] = 0.5;
    let (noised, w) = noise_mask(&lat, &times, &eps).unwrap();
    for k in 0..4 {
        assert!((noised.z[[0, 1, k]] - lat.z[[0, 1, k]]).abs() < 1e-8);
        assert!((noised.z[[0, 2, k]] - eps[[0, 2, k]]).abs() < 1e-8);
        let mid = (lat.z[[0, 3, k]] + eps[[0, 3, k]]) / 2f64.sqrt();
        assert!((noised.z[[0, 3, k]] - mid).abs() < 1e-12);
    }
    assert!(w[[0, 1]] < 1e-16);
    assert!((w[[0, 2]] - 1.0).abs() < 1e-16);
    assert!((w[[0, 3]] - 0.5).abs() < 1e-15);
    assert_eq!(w[[0, 0]], 0.0);
    assert_eq!(w[[0, 4]], 0.0);

    times[[0, 2]] = 1.0;
    assert!(matches!(noise_mask(&lat, &times, &eps), Err(Error::TimeRange { .. })));
}

#[test]
fn noise_mask_preserves_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    for t in [0.1, 0.5, 0.9] {
        let rows = vec![Array2::from_shape_fn((n, 2), |_| -> f64 { StandardNormal.sample(&mut rng) })];
        let lat = LatentBatch::from_residues(&rows, n + 2, 2).unwrap();
        let eps = Array3::from_shape_fn(lat.z.raw_dim(), |_| -> f64 { StandardNormal.sample(&mut rng) });
        let times = Array2::from_elem((1, n + 2), t);
        let (noised, _) = noise_mask(&lat, &times, &eps).unwrap();
        let m = moments(&noised, &noised.residue_mask).unwrap();
        for v in m.var.iter() {
            assert!((v - 1.0).abs() < 0.02, "t={t}: var {v}");
        }
    }
}

#[test]
fn mlm_masking_rate_and_domain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs: Vec<TokenSequence> = (0..4000)
        .map(|_| TokenSequence {
            residues: (0..250).map(|_| rng.random_range(0..20u8)).collect(),
            id: None,
        })
        .collect();
    let batch = pad_batch(&seqs).unwrap();
    let (masked, ind) = mlm_mask(&batch, 0.15, &mut rng).unwrap();
    let total = batch.residue_count();
    assert_eq!(total, 1_000_000);
    let frac = ind.iter().filter(|&&m| m).count() as f64 / total as f64;
    assert!((frac - 0.15).abs() < 0.002, "{frac}");
    for ((i, j), &m) in ind.indexed_iter() {
        if m {
            assert!(batch.mask[[i, j]]);
            assert_eq!(masked.tokens[[i, j]], MASK);
        } else {
            assert_eq!(masked.tokens[[i, j]], batch.tokens[[i, j]]);
        }
    }
}

#[test]
fn mlm_with_nothing_masked_is_skipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = AutoencoderModel::new(&tiny_config(), true, &mut rng).unwrap();
    let batch = pad_batch(&random_seqs(1, (3, 3), &mut rng)).unwrap();
    let mut regime = RegimeConfig::new(Regime::Mlm);
    regime.mlm_rate = 1e-12;
    let loss = regime_loss(&model, &batch, &regime, &mut rng).unwrap();
    assert_eq!(loss.active_positions, 0);
    assert_eq!(loss.total, 0.0);
}

#[test]
fn regime_bookkeeping() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = pad_batch(&random_seqs(4, (10, 20), &mut rng)).unwrap();
    let model = AutoencoderModel::new(&tiny_config(), false, &mut rng).unwrap();

    let mut tn = RegimeConfig::new(Regime::TokenNorm);
    tn.norm_weight = 0.0;
    let l = regime_loss(&model, &batch, &tn, &mut rng).unwrap();
    let ce = reconstruction_loss(&model.decode(&model.encode(&batch).unwrap()).unwrap(), &batch.tokens, &batch.mask, None)
        .unwrap()
        .0;
    assert_eq!(l.total, ce);

    for (regime, trivial) in [(Regime::TokenNorm, false), (Regime::NoiseMask, false), (Regime::Mlm, true)] {
        let model = AutoencoderModel::new(&tiny_config(), trivial, &mut rng).unwrap();
        let mut cfg = RegimeConfig::new(regime);
        cfg.norm_weight = 0.7;
        let l = regime_loss(&model, &batch, &cfg, &mut rng).unwrap();
        assert!((l.reconstruction + 0.7 * l.normalization - l.total).abs() < 1e-8);
        if regime == Regime::Mlm {
            assert_eq!(l.normalization, 0.0);
        }
    }

    let mlm_cfg = RegimeConfig::new(Regime::Mlm);
    assert!(regime_loss(&model, &batch, &mlm_cfg, &mut rng).is_err());
}

#[test]
fn token_norm_of_normal_latents_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40_000;
    let rows = vec![Array2::from_shape_fn((n, 4), |_| -> f64 { StandardNormal.sample(&mut rng) })];
    let lat = LatentBatch::from_residues(&rows, n + 2, 4).unwrap();
    let tokens = Array2::from_shape_fn((1, n + 2), |_| rng.random_range(0..20u8));
    let (v, _) = token_norm_loss(&lat, &tokens, &lat.residue_mask, NormForm::Univariate).unwrap();
    assert!(v.abs() < 1e-3, "{v}");
}

fn regime_gradcheck(regime: Regime, form: NormForm, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let trivial = regime == Regime::Mlm;
    let mut model = AutoencoderModel::new(&BlockConfig::new(d, 2, 1, false), trivial, &mut rng).unwrap();
    // Few residue types so every type clears the multivariate sample bound.
    let seqs: Vec<TokenSequence> = (0..3)
        .map(|_| TokenSequence {
            residues: (0..14).map(|_| rng.random_range(0..2u8)).collect(),
            id: None,
        })
        .collect();
    let batch = pad_batch_to(&seqs, 18).unwrap();
    let mut cfg = RegimeConfig::new(regime);
    cfg.norm_form = form;
    cfg.norm_weight = 0.8;
    cfg.mlm_rate = 0.5;
    cfg.nm_sampling = TimeSampling::Uniform;
    let draw_seed = seed + 100;
    model.zero_grad();
    let loss = model
        .regime_step(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(draw_seed))
        .unwrap();
    assert!(loss.active_positions > 0);
    let rep = check_params(&mut model, 6, |m| {
        regime_loss(m, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(draw_seed))
            .unwrap()
            .total
    });
    assert!(rep.max_rel_err < 1e-4, "{regime:?} {form:?}: {rep:?}");
}

#[test]
fn token_norm_regime_gradients() {
    regime_gradcheck(Regime::TokenNorm, NormForm::Univariate, 20);
}

#[test]
fn token_norm_multivariate_regime_gradients() {
    regime_gradcheck(Regime::TokenNorm, NormForm::Multivariate, 21);
}

#[test]
fn noise_mask_regime_gradients() {
    regime_gradcheck(Regime::NoiseMask, NormForm::Univariate, 22);
}

#[test]
fn mlm_regime_gradients() {
    regime_gradcheck(Regime::Mlm, NormForm::Univariate, 23);
}

#[test]
fn cross_entropy_gradient_weighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = Array3::from_shape_fn((2, 5, 20), |_| -> f64 { StandardNormal.sample(&mut rng) });
    let tokens = Array2::from_shape_fn((2, 5), |_| rng.random_range(0..20u8));
    let mask = Array2::from_shape_fn((2, 5), |(_, j)| j > 0 && j < 4);
    let weights = Array2::from_shape_fn((2, 5), |_| rng.random::<f64>());
    for w in [None, Some(&weights)] {
        let (_, g) = reconstruction_loss(&logits, &tokens, &mask, w).unwrap();
        let flat = logits.clone().into_shape_with_order((10, 20)).unwrap();
        let gflat = g.into_shape_with_order((10, 20)).unwrap();
        let rep = crate::gradcheck::check_input("logits", &flat, &gflat, |x| {
            let x3 = x.clone().into_shape_with_order((2, 5, 20)).unwrap();
            reconstruction_loss(&x3, &tokens, &mask, w).unwrap().0
        });
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
