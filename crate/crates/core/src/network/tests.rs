use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::filter::FilterKind;
use crate::pca::fit;
use crate::tensor::FeatureShape;

fn random_tensor(shape: FeatureShape, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// 3×6×6 → conv(3→4) → BN → ReLU → conv(4→4) → BN → ReLU → flatten → linear(16→3),
/// with non-trivial BN statistics and modulators.
fn tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let conv1 = Conv2d { in_c: 3, out_c: 4, kernel: 3, padding: 0, weight: v(108, -0.5, 0.5), bias: v(4, -0.1, 0.1) };
    let conv2 = Conv2d { in_c: 4, out_c: 4, kernel: 3, padding: 0, weight: v(144, -0.5, 0.5), bias: v(4, -0.1, 0.1) };
    let mut bn = |c: usize| BatchNorm {
        channels: c,
        running_mean: v(c, -0.2, 0.2),
        running_var: v(c, 0.5, 1.5),
        scale: v(c, 0.5, 1.5),
        shift: v(c, 0.0, 0.5),
        eps: BN_EPS,
        mode: BnMode::FrozenStats,
    };
    let (bn1, bn2) = (bn(4), bn(4));
    let lin = Linear { in_f: 16, out_f: 3, weight: v(48, -0.5, 0.5), bias: v(3, -0.2, 0.2) };
    Model::new(
        MapShape::new(3, 6, 6),
        vec![
            Layer::Conv2d(conv1),
            Layer::BatchNorm(bn1),
            Layer::Relu,
            Layer::Conv2d(conv2),
            Layer::BatchNorm(bn2),
            Layer::Relu,
            Layer::Flatten,
            Layer::Linear(lin),
        ],
    )
    .unwrap()
}

/// Independent forward pass written directly from the layer definitions.
fn naive_forward(model: &Model, x: &Tensor4) -> Matrix {
    let s = x.shape();
    let mut cur: Vec<Vec<f64>> = (0..s.n).map(|i| x.sample(i).to_vec()).collect();
    let (mut c, mut h, mut w) = (s.c, s.h, s.w);
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(k) => {
                let (oh, ow) = (h + 2 * k.padding - k.kernel + 1, w + 2 * k.padding - k.kernel + 1);
                cur = cur
                    .iter()
                    .map(|img| {
                        let mut out = vec![0.0; k.out_c * oh * ow];
                        for o in 0..k.out_c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let mut acc = k.bias[o];
                                    for i in 0..k.in_c {
                                        for ky in 0..k.kernel {
                                            for kx in 0..k.kernel {
                                                let iy = (y + ky) as isize - k.padding as isize;
                                                let ix = (xx + kx) as isize - k.padding as isize;
                                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                                    acc += k.weight[((o * k.in_c + i) * k.kernel + ky) * k.kernel + kx]
                                                        * img[(i * h + iy as usize) * w + ix as usize];
                                                }
                                            }
                                        }
                                    }
                                    out[(o * oh + y) * ow + xx] = acc;
                                }
                            }
                        }
                        out
                    })
                    .collect();
                c = k.out_c;
                h = oh;
                w = ow;
            }
            Layer::BatchNorm(b) => {
                assert_eq!(b.mode, BnMode::FrozenStats);
                for img in &mut cur {
                    for ch in 0..c {
                        for t in 0..h * w {
                            let v = &mut img[ch * h * w + t];
                            *v = b.scale[ch] * ((*v - b.running_mean[ch]) * (1.0 / (b.running_var[ch] + b.eps).sqrt()))
                                + b.shift[ch];
                        }
                    }
                }
            }
            Layer::Relu => cur.iter_mut().flatten().for_each(|v| *v = v.max(0.0)),
            Layer::Flatten => {
                c *= h * w;
                h = 1;
                w = 1;
            }
            Layer::Linear(l) => {
                cur = cur
                    .iter()
                    .map(|img| {
                        (0..l.out_f)
                            .map(|o| {
                                let mut acc = l.bias[o];
                                for i in 0..l.in_f {
                                    acc += l.weight[o * l.in_f + i] * img[i];
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect();
                c = l.out_f;
            }
            Layer::Spectral(_) => panic!("naive oracle covers the frozen layers only"),
        }
    }
    Matrix::from_rows(&cur).unwrap()
}

/// Full-rank basis over random data of width `p`.
fn full_rank_basis(p: usize, seed: u64) -> PcaBasis {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(p + 8, p, |_, _| rng.random_range(-1.0..1.0));
    fit(&x, p).unwrap()
}

#[test]
fn forward_matches_naive_oracle_exactly() {
    let model = tiny_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(FeatureShape::new(5, 3, 6, 6), &mut rng);
    let (logits, _) = model.forward(&x).unwrap();
    assert_eq!(logits, naive_forward(&model, &x));
}

#[test]
fn zero_input_through_bias_free_model() {
    let mut model = tiny_model(3);
    for l in model.layers_mut() {
        match l {
            Layer::Conv2d(c) => c.bias.iter_mut().for_each(|b| *b = 0.0),
            Layer::BatchNorm(b) => b.running_mean.iter_mut().for_each(|m| *m = 0.0),
            _ => {}
        }
    }
    let x = Tensor4::zeros(FeatureShape::new(2, 3, 6, 6));
    let logits = model.logits(&x).unwrap();
    // conv1 → 0, BN1 → shift1, ReLU, conv2 of constant map, BN2 …: recompute by hand
    let Layer::BatchNorm(bn1) = &model.layers()[1] else { unreachable!() };
    let Layer::Conv2d(c2) = &model.layers()[3] else { unreachable!() };
    let Layer::BatchNorm(bn2) = &model.layers()[4] else { unreachable!() };
    let Layer::Linear(lin) = &model.layers()[7] else { unreachable!() };
    let a1: Vec<f64> = bn1.shift.iter().map(|s| s.max(0.0)).collect();
    let mut a2 = vec![0.0; 4];
    for (o, a) in a2.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, ai) in a1.iter().enumerate() {
            acc += ai * c2.weight[(o * 4 + i) * 9..(o * 4 + i + 1) * 9].iter().sum::<f64>();
        }
        *a = (bn2.scale[o] * acc / (bn2.running_var[o] + bn2.eps).sqrt() + bn2.shift[o]).max(0.0);
    }
    for o in 0..3 {
        let mut expect = lin.bias[o];
        for i in 0..16 {
            expect += lin.weight[o * 16 + i] * a2[i / 4];
        }
        assert!((logits.get(0, o) - expect).abs() < 1e-12);
        assert_eq!(logits.get(0, o), logits.get(1, o));
    }
}

#[test]
fn identity_insertion_at_every_index() {
    let model = tiny_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(FeatureShape::new(4, 3, 6, 6), &mut rng);
    let base = model.logits(&x).unwrap();
    let shapes = model.shapes().unwrap();
    for j in 0..=model.layers().len() {
        let basis = full_rank_basis(shapes[j].features(), 10 + j as u64);
        let filter = SpectralFilter::for_basis(FilterKind::ReluRidge, &basis, 0.0).unwrap();
        let with = model.insert_ttawpca(j, basis, filter).unwrap();
        assert_eq!(with.spectral_index(), Some(j));
        let logits = with.logits(&x).unwrap();
        assert!(logits.sub(&base).unwrap().max_abs() < 1e-8, "j = {j}");
        let (removed, _) = with.remove_ttawpca().unwrap();
        assert_eq!(removed.to_bytes(), model.to_bytes());
        assert_eq!(removed.logits(&x).unwrap(), base);
    }
}

#[test]
fn insertion_rejects_wrong_width_and_duplicates() {
    let model = tiny_model(6);
    let basis = full_rank_basis(10, 1);
    let filter = SpectralFilter::for_basis(FilterKind::ReluRidge, &basis, 0.0).unwrap();
    assert!(matches!(model.insert_ttawpca(3, basis.clone(), filter.clone()), Err(Error::Shape { .. })));
    let b = full_rank_basis(64, 2);
    let f = SpectralFilter::for_basis(FilterKind::ReluRidge, &b, 0.0).unwrap();
    let with = model.insert_ttawpca(3, b.clone(), f.clone()).unwrap();
    assert!(with.insert_ttawpca(3, b, f).is_err());
    assert!(model.remove_ttawpca().is_err());
}

#[test]
fn adapt_backward_zero_and_missing_cache() {
    let model = tiny_model(7);
    let basis = full_rank_basis(64, 3);
    let filter = SpectralFilter::for_basis(FilterKind::NegExp, &basis, 0.3).unwrap();
    let with = model.insert_ttawpca(3, basis, filter).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(FeatureShape::new(3, 3, 6, 6), &mut rng);
    let (_, cache) = with.forward(&x).unwrap();
    let g = with.backward(&cache, &Matrix::zeros(3, 3), GradTarget::Adapt(AdaptTarget::Filter)).unwrap();
    assert_eq!(g.adapt.len(), 64);
    assert!(g.adapt.iter().all(|v| *v == 0.0));
    assert!(g.layers.is_empty());
    let (_, other_cache) = model.forward(&x).unwrap();
    assert!(matches!(
        with.backward(&other_cache, &Matrix::zeros(3, 3), GradTarget::Adapt(AdaptTarget::Filter)),
        Err(Error::StaleCache(_))
    ));
    assert!(model.backward(&other_cache, &Matrix::zeros(3, 3), GradTarget::Adapt(AdaptTarget::Filter)).is_err());
}

fn linear_loss(model: &Model, x: &Tensor4, w: &Matrix) -> f64 {
    model.logits(x).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn check_adapt_gradient(model: &mut Model, target: AdaptTarget, x: &Tensor4, w: &Matrix, tol: f64) {
    let (_, cache) = model.forward(x).unwrap();
    let g = model.backward(&cache, w, GradTarget::Adapt(target)).unwrap();
    let params = model.adaptation_params(target);
    assert_eq!(g.adapt.len(), params.len());
    let h = 1e-6;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        model.set_adaptation_params(target, &p).unwrap();
        let up = linear_loss(model, x, w);
        p[i] -= 2.0 * h;
        model.set_adaptation_params(target, &p).unwrap();
        let down = linear_loss(model, x, w);
        model.set_adaptation_params(target, &params).unwrap();
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(g.adapt[i], fd) < tol, "{target:?} param {i}: {} vs {fd}", g.adapt[i]);
    }
}

#[test]
fn filter_gradient_through_network() {
    let model = tiny_model(9);
    let basis = full_rank_basis(64, 4).truncated(20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gamma: Vec<f64> = (0..20).map(|_| rng.random_range(0.05..2.0)).collect();
    let filter = SpectralFilter::with_gamma(FilterKind::ReluRidge, basis.singular_values().to_vec(), gamma).unwrap();
    let mut with = model.insert_ttawpca(3, basis, filter).unwrap();
    let x = random_tensor(FeatureShape::new(4, 3, 6, 6), &mut rng);
    let w = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
    check_adapt_gradient(&mut with, AdaptTarget::Filter, &x, &w, 1e-5);
}

#[test]
fn bn_affine_gradient_in_batch_stats_mode() {
    let mut model = tiny_model(11);
    model.set_bn_mode(BnMode::BatchStats);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(FeatureShape::new(6, 3, 6, 6), &mut rng);
    let w = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    assert_eq!(model.adaptation_param_count(AdaptTarget::BnAffine), 16);
    check_adapt_gradient(&mut model, AdaptTarget::BnAffine, &x, &w, 1e-5);
}

#[test]
fn full_gradient_matches_finite_differences_in_training_mode() {
    let mut model = tiny_model(13);
    model.set_bn_mode(BnMode::BatchStats);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_tensor(FeatureShape::new(5, 3, 6, 6), &mut rng);
    let w = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
    let (_, cache) = model.forward(&x).unwrap();
    let g = model.backward(&cache, &w, GradTarget::All).unwrap();
    let ParamGrad::Conv { weight, .. } = &g.layers[0] else { panic!("conv grads expected") };
    let h = 1e-6;
    for idx in [0usize, 17, 53, 107] {
        let mut m = model.clone();
        let Layer::Conv2d(c) = &mut m.layers_mut()[0] else { unreachable!() };
        c.weight[idx] += h;
        let up = linear_loss(&m, &x, &w);
        let Layer::Conv2d(c) = &mut m.layers_mut()[0] else { unreachable!() };
        c.weight[idx] -= 2.0 * h;
        let down = linear_loss(&m, &x, &w);
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(weight[idx], fd) < 1e-5, "conv1 w[{idx}]: {} vs {fd}", weight[idx]);
    }
    let ParamGrad::Linear { bias, .. } = &g.layers[7] else { panic!("linear grads expected") };
    let col_sums: Vec<f64> = (0..3).map(|o| (0..5).map(|i| w.get(i, o)).sum()).collect();
    for o in 0..3 {
        assert!((bias[o] - col_sums[o]).abs() < 1e-12);
    }
}

#[test]
fn bn_modes_agree_when_running_stats_match_batch() {
    let mut model = tiny_model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_tensor(FeatureShape::new(8, 3, 6, 6), &mut rng);
    // set running stats of each BN to the batch statistics it will see
    let mut cur = x.clone();
    for i in 0..model.layers().len() {
        if let Layer::BatchNorm(b) = &mut model.layers_mut()[i] {
            let (m, v) = channel_stats(&cur);
            b.running_mean = m;
            b.running_var = v;
        }
        cur = model.layers()[i].forward(&cur).unwrap().0;
    }
    let frozen = model.logits(&x).unwrap();
    model.set_bn_mode(BnMode::BatchStats);
    let batch = model.logits(&x).unwrap();
    assert!(frozen.sub(&batch).unwrap().max_abs() < 1e-8);
}

#[test]
fn legal_insertion_indices_compose() {
    // conv → relu → flatten → linear
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let conv = Conv2d {
        in_c: 1,
        out_c: 2,
        kernel: 3,
        padding: 1,
        weight: (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: vec![0.1, -0.1],
    };
    let lin = Linear { in_f: 32, out_f: 2, weight: (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(), bias: vec![0.0; 2] };
    let model = Model::new(
        MapShape::new(1, 4, 4),
        vec![Layer::Conv2d(conv), Layer::Relu, Layer::Flatten, Layer::Linear(lin)],
    )
    .unwrap();
    let x = random_tensor(FeatureShape::new(3, 1, 4, 4), &mut rng);
    let shapes = model.shapes().unwrap();
    let expected_p = [16, 32, 32, 32, 2];
    for j in 0..=4 {
        assert_eq!(shapes[j].features(), expected_p[j]);
        let basis = full_rank_basis(expected_p[j], j as u64);
        let f = SpectralFilter::for_basis(FilterKind::NegExp, &basis, 0.5).unwrap();
        let with = model.insert_ttawpca(j, basis, f).unwrap();
        assert_eq!(with.logits(&x).unwrap().shape(), (3, 2));
    }
}

#[test]
fn pca_from_source_streamed_matches_concatenated() {
    let model = tiny_model(18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let batches: Vec<Tensor4> = (0..4)
        .map(|_| random_tensor(FeatureShape::new(40, 3, 6, 6), &mut rng))
        .collect();
    let concat = fit_pca_from_source(&model, &batches, 3, 64, false).unwrap();
    let streamed = fit_pca_from_source(&model, &batches, 3, 64, true).unwrap();
    assert_eq!(concat.rank(), streamed.rank());
    for (a, b) in concat.singular_values().iter().zip(streamed.singular_values()) {
        assert!((a - b).abs() <= 1e-6 * a, "{a} vs {b}");
    }
    // full rank at j = 3 (p = 64): identity round trip on fresh data
    assert_eq!(concat.rank(), 64);
    let filter = SpectralFilter::for_basis(FilterKind::ReluRidge, &concat, 0.0).unwrap();
    let with = model.insert_ttawpca(3, concat, filter).unwrap();
    let x = random_tensor(FeatureShape::new(3, 3, 6, 6), &mut rng);
    assert!(with.logits(&x).unwrap().sub(&model.logits(&x).unwrap()).unwrap().max_abs() < 1e-8);
}

#[test]
fn constant_layer_output_is_degenerate() {
    let mut model = tiny_model(20);
    if let Layer::Conv2d(c) = &mut model.layers_mut()[0] {
        c.weight.iter_mut().for_each(|w| *w = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batches = vec![random_tensor(FeatureShape::new(10, 3, 6, 6), &mut rng)];
    let err = fit_pca_from_source(&model, &batches, 3, 4, false).unwrap_err();
    assert!(matches!(err, Error::DegenerateBasis { .. }));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let model = tiny_model(22);
    let basis = full_rank_basis(64, 5).truncated(7).unwrap();
    let filter = SpectralFilter::for_basis(FilterKind::NegExp, &basis, 0.25).unwrap();
    let with = model.insert_ttawpca(3, basis, filter).unwrap();
    let bytes = with.to_bytes();
    let back = Model::from_bytes(&bytes).unwrap();
    assert_eq!(back, with);
    assert_eq!(back.to_bytes(), bytes);
    assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Model::from_bytes(&bad).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    with.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap(), with);
    assert!(matches!(Model::load(&dir.path().join("missing.bin")), Err(Error::Io { .. })));
}

#[test]
fn weights_hash_tracks_frozen_parameters_only() {
    let model = tiny_model(23);
    let basis = full_rank_basis(64, 6).truncated(5).unwrap();
    let filter = SpectralFilter::for_basis(FilterKind::ReluRidge, &basis, 0.0).unwrap();
    let mut with = model.insert_ttawpca(3, basis, filter).unwrap();
    let before = with.theta_hash();
    with.set_adaptation_params(AdaptTarget::Filter, &[1.0; 5]).unwrap();
    assert_eq!(with.theta_hash(), before);
    let partial = with.weights_hash(false);
    let mut bn = with.adaptation_params(AdaptTarget::BnAffine);
    bn[0] += 1.0;
    with.set_adaptation_params(AdaptTarget::BnAffine, &bn).unwrap();
    assert_ne!(with.theta_hash(), before);
    assert_eq!(with.weights_hash(false), partial);
}

#[test]
fn training_fits_a_separable_toy_problem() {
    let mut model = Model::reference(MapShape::new(3, 8, 8), 2, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let n = 64;
    let mut data = Vec::with_capacity(n * 192);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        for _c in 0..3 {
            for yy in 0..8 {
                for _xx in 0..8 {
                    let stripe = if (yy % 2 == 0) == (y == 0) { 1.0 } else { 0.0 };
                    data.push(stripe + 0.1 * rng.random_range(-1.0..1.0));
                }
            }
        }
        labels.push(y);
    }
    let x = Tensor4::new(FeatureShape::new(n, 3, 8, 8), data).unwrap();
    let cfg = train::TrainConfig { epochs: 8, batch_size: 16, learning_rate: 0.05, seed: 1 };
    let report = train::train(&mut model, &x, &labels, &cfg).unwrap();
    assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
    assert!(report.train_accuracy > 0.95);
    assert!(model.layers().iter().all(|l| !matches!(l, Layer::BatchNorm(b) if b.mode != BnMode::FrozenStats)));
}
