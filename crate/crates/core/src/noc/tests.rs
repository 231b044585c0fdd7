use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{conv2d_forward, fc_forward, relu, Tensor};

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

fn gauss(spec: &str, n: usize, shape: [usize; 3], seed: u64) -> NocNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NocNet::build(
        &parse_spec(spec, n).unwrap(),
        shape,
        InitMode::Gaussian { sigma: 0.3 },
        &mut rng,
    )
    .unwrap()
}

/// Same weights, maxout token removed.
fn single_path(net: &NocNet) -> NocNet {
    NocNet::from_layers(
        net.spec().without_maxout(),
        net.input_shape(),
        net.layers().to_vec(),
        InitProvenance::Loaded,
    )
    .unwrap()
}

#[test]
fn zero_sigma_gives_zero_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = parse_spec("c4-f8-f21", 20).unwrap();
    let net = NocNet::build(
        &spec,
        [3, 4, 4],
        InitMode::Gaussian { sigma: 0.0 },
        &mut rng,
    )
    .unwrap();
    let (logits, _) = net.forward(&uniform(&[3, 4, 4], &mut rng), None).unwrap();
    assert_eq!(logits.shape(), &[21]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_sequential_application() {
    let net = gauss("c5-c4-f7-f3", 2, [2, 3, 3], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(&[2, 3, 3], &mut rng);
    let mut h = x.clone();
    let n = net.layers().len();
    for (j, l) in net.layers().iter().enumerate() {
        h = match l {
            NocLayer::Conv(p) => conv2d_forward(&h, p).unwrap(),
            NocLayer::Fc { weight, bias } => fc_forward(&h, weight, bias).unwrap(),
        };
        if j + 1 < n {
            h = relu(&h);
        }
    }
    assert_eq!(net.forward(&x, None).unwrap().0, h);
}

#[test]
fn maxout_keeps_parameter_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let count = |s: &str, rng: &mut ChaCha8Rng| {
        let net = NocNet::build(
            &parse_spec(s, 20).unwrap(),
            [16, 6, 6],
            InitMode::Gaussian { sigma: 0.01 },
            rng,
        )
        .unwrap();
        (net.param_count(), net.num_param_arrays())
    };
    let plain = count("c16-c16-f64-f64-f21", &mut rng);
    for s in [
        "mo-c16-c16-f64-f64-f21",
        "c16-mo-c16-f64-f64-f21",
        "c16-c16-f64-mo-f64-f21",
        "c16-c16-f64-f64-f21-mo",
    ] {
        assert_eq!(count(s, &mut rng), plain, "{s}");
    }
    // 16*16*9+16 twice, 576*64+64, 64*64+64, 64*21+21
    assert_eq!(plain.0, 2 * (2304 + 16) + 36928 + 4160 + 1365);
}

#[test]
fn equal_inputs_match_single_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in ["mo-c4-f6-f3", "c4-mo-f6-f3", "c4-f6-mo-f3", "c4-f6-f3-mo"] {
        let net = gauss(s, 2, [2, 3, 3], 4);
        let single = single_path(&net);
        let x = uniform(&[2, 3, 3], &mut rng);
        assert_eq!(
            net.forward(&x, Some(&x)).unwrap().0,
            single.forward(&x, None).unwrap().0,
            "{s}"
        );
    }
}

#[test]
fn maxout_on_output_takes_max_of_logits() {
    let net = gauss("c4-f6-f3-mo", 2, [2, 3, 3], 5);
    let single = single_path(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = uniform(&[2, 3, 3], &mut rng);
    let b = uniform(&[2, 3, 3], &mut rng);
    let la = single.forward(&a, None).unwrap().0;
    let lb = single.forward(&b, None).unwrap().0;
    let want: Vec<f32> = la
        .data()
        .iter()
        .zip(lb.data())
        .map(|(x, y)| x.max(*y))
        .collect();
    assert_eq!(net.forward(&a, Some(&b)).unwrap().0.data(), &want[..]);
}

#[test]
fn second_input_contract() {
    let x = Tensor::zeros(&[2, 3, 3]);
    let plain = gauss("f4-f3", 2, [2, 3, 3], 0);
    assert!(matches!(
        plain.forward(&x, Some(&x)),
        Err(NocError::Inputs(_))
    ));
    let mo = gauss("c2-mo-f4-f3", 2, [2, 3, 3], 0);
    assert!(matches!(mo.forward(&x, None), Err(NocError::Inputs(_))));
    assert!(matches!(
        plain.forward(&Tensor::zeros(&[2, 4, 4]), None),
        Err(NocError::Shape(_))
    ));
}

#[test]
fn identity_extend_reproduces_donor_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = [8, 4, 4];
    let donor = NocNet::build(
        &parse_spec("f16-f16-f7", 6).unwrap(),
        shape,
        InitMode::Gaussian { sigma: 0.1 },
        &mut rng,
    )
    .unwrap();
    for s in ["c8-f16-f16-f7", "c8-c8-f16-f16-f7", "c8-c8-c8-f16-f16-f7"] {
        let net = NocNet::build(
            &parse_spec(s, 6).unwrap(),
            shape,
            InitMode::IdentityExtend { donor: &donor },
            &mut rng,
        )
        .unwrap();
        for _ in 0..5 {
            let x = uniform(&shape, &mut rng);
            let want = donor.forward(&x, None).unwrap().0;
            let got = net.forward(&x, None).unwrap().0;
            assert_eq!(got.max_abs_diff(&want), 0.0, "{s}");
        }
    }
}

#[test]
fn identity_extend_rejects_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let donor = gauss("f16-f16-f7", 6, [8, 4, 4], 1);
    for s in ["c4-f16-f16-f7", "c8-f32-f16-f7", "c8-f16-f7"] {
        let r = NocNet::build(
            &parse_spec(s, 6).unwrap(),
            [8, 4, 4],
            InitMode::IdentityExtend { donor: &donor },
            &mut rng,
        );
        assert!(matches!(r, Err(NocError::DonorMismatch(_))), "{s}");
    }
}

/// Naive f64 re-implementation used as the finite-difference oracle:
/// `params[l] = (weight, bias)` flattened, layers as in `net`.
fn reference_logits(
    net: &NocNet,
    params: &[(Vec<f64>, Vec<f64>)],
    a: &[f64],
    b: Option<&[f64]>,
) -> Vec<f64> {
    let [c0, m, _] = net.input_shape();
    let n = net.layers().len();
    let run =
        |range: std::ops::Range<usize>, mut x: Vec<f64>, mut ch: usize| -> (Vec<f64>, usize) {
            for j in range {
                let (w, bias) = &params[j];
                let out = bias.len();
                let mut y = vec![
                    0.0;
                    if net.layers()[j].is_fc() {
                        out
                    } else {
                        out * m * m
                    }
                ];
                if net.layers()[j].is_fc() {
                    for o in 0..out {
                        y[o] =
                            bias[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>();
                    }
                } else {
                    for o in 0..out {
                        for r in 0..m {
                            for q in 0..m {
                                let mut acc = bias[o];
                                for ic in 0..ch {
                                    for kh in 0..3 {
                                        for kw in 0..3 {
                                            let (rr, qq) = (r + kh, q + kw);
                                            if rr >= 1 && qq >= 1 && rr <= m && qq <= m {
                                                acc += w[((o * ch + ic) * 3 + kh) * 3 + kw]
                                                    * x[(ic * m + rr - 1) * m + qq - 1];
                                            }
                                        }
                                    }
                                }
                                y[(o * m + r) * m + q] = acc;
                            }
                        }
                    }
                    ch = out;
                }
                if j + 1 < n {
                    y.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                x = y;
            }
            (x, ch)
        };
    match b {
        None => run(0..n, a.to_vec(), c0).0,
        Some(b) => {
            let k = net.spec().maxout_position().unwrap();
            let (ha, ch) = run(0..k, a.to_vec(), c0);
            let (hb, _) = run(0..k, b.to_vec(), c0);
            let merged = ha.iter().zip(&hb).map(|(x, y)| x.max(*y)).collect();
            run(k..n, merged, ch).0
        }
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a + n).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / scale.max(1e-12)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn slot(p: &mut [(Vec<f64>, Vec<f64>)], layer: usize, which: usize, k: usize) -> &mut f64 {
    if which == 0 {
        &mut p[layer].0[k]
    } else {
        &mut p[layer].1[k]
    }
}

fn check_gradients(spec: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = gauss(spec, 2, [2, 3, 3], seed);
    let a = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
    let b = net.has_maxout().then_some(b);
    let probe = Tensor::randn(&[3], 1.0, &mut rng);
    let (logits, cache) = net.forward(&a, b.as_ref()).unwrap();
    let grads = net.backward(&cache, &probe).unwrap();

    let mut params: Vec<(Vec<f64>, Vec<f64>)> = net
        .layers()
        .iter()
        .map(|l| (to_f64(l.weight()), to_f64(l.bias())))
        .collect();
    let (a64, b64) = (to_f64(&a), b.as_ref().map(to_f64));
    let p64 = to_f64(&probe);
    let loss = |params: &[(Vec<f64>, Vec<f64>)], a: &[f64]| -> f64 {
        let l = reference_logits(&net, params, a, b64.as_deref());
        l.iter().zip(&p64).map(|(x, y)| x * y).sum()
    };
    let want = reference_logits(&net, &params, &a64, b64.as_deref());
    for (x, y) in logits.data().iter().zip(&want) {
        assert!(
            (*x as f64 - y).abs() <= 1e-4 * (1.0 + y.abs()),
            "{spec}: forward {x} vs {y}"
        );
    }

    let eps = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for li in 0..params.len() {
        for which in 0..2 {
            let g = if which == 0 {
                &grads.layers[li].0
            } else {
                &grads.layers[li].1
            };
            for k in 0..g.len() {
                let orig = *slot(&mut params, li, which, k);
                *slot(&mut params, li, which, k) = orig + eps;
                let up = loss(&params, &a64);
                *slot(&mut params, li, which, k) = orig - eps;
                let down = loss(&params, &a64);
                *slot(&mut params, li, which, k) = orig;
                analytic.push(g.data()[k] as f64);
                numeric.push((up - down) / (2.0 * eps));
            }
        }
    }
    let e = rel_err(&analytic, &numeric);
    assert!(e <= 1e-3, "{spec}: parameter gradient rel err {e}");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for k in 0..a64.len() {
        let mut x = a64.clone();
        x[k] += eps;
        let up = loss(&params, &x);
        x[k] -= 2.0 * eps;
        let down = loss(&params, &x);
        analytic.push(grads.d_input_a.data()[k] as f64);
        numeric.push((up - down) / (2.0 * eps));
    }
    let e = rel_err(&analytic, &numeric);
    assert!(e <= 1e-3, "{spec}: input gradient rel err {e}");
}

#[test]
fn gradients_match_finite_differences() {
    for (i, s) in [
        "f8-f8-f3",
        "c8-c8-f8-f3",
        "c8-mo-c8-f8-f3",
        "mo-f8-f3",
        "c8-f8-f3-mo",
    ]
    .iter()
    .enumerate()
    {
        check_gradients(s, 20 + i as u64);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let net = gauss("c4-mo-f6-f3", 2, [2, 3, 3], 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = uniform(&[2, 3, 3], &mut rng);
    let b = uniform(&[2, 3, 3], &mut rng);
    let (_, cache) = net.forward(&a, Some(&b)).unwrap();
    let g = net.backward(&cache, &Tensor::zeros(&[3])).unwrap();
    for (w, bias) in &g.layers {
        assert!(w.data().iter().chain(bias.data()).all(|&v| v == 0.0));
    }
    assert!(g.d_input_a.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shared_gradient_equals_single_path_on_equal_inputs() {
    let net = gauss("c4-c4-mo-f6-f3", 2, [2, 3, 3], 13);
    let single = single_path(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = uniform(&[2, 3, 3], &mut rng);
    let d = Tensor::randn(&[3], 1.0, &mut rng);
    let (_, c2) = net.forward(&x, Some(&x)).unwrap();
    let (_, c1) = single.forward(&x, None).unwrap();
    let g2 = net.backward(&c2, &d).unwrap();
    let g1 = single.backward(&c1, &d).unwrap();
    for ((w2, b2), (w1, b1)) in g2.layers.iter().zip(&g1.layers) {
        assert_eq!(w2, w1);
        assert_eq!(b2, b1);
    }
    assert!(g2.d_input_b.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn stale_cache_is_rejected() {
    let a = gauss("c4-f6-f3", 2, [2, 3, 3], 0);
    let b = gauss("c4-mo-f6-f3", 2, [2, 3, 3], 0);
    let x = Tensor::zeros(&[2, 3, 3]);
    let (_, cache) = a.forward(&x, None).unwrap();
    assert!(matches!(
        b.backward(&cache, &Tensor::zeros(&[3])),
        Err(NocError::StaleCache(_))
    ));
}

#[test]
fn features_from_second_to_last_fc() {
    let mut net = gauss("c4-f12-f9-f3", 2, [2, 3, 3], 15);
    assert_eq!(net.feature_dim(), Some(9));
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = uniform(&[2, 3, 3], &mut rng);
    let f = net.extract_features(&x, None).unwrap();
    assert_eq!(f.shape(), &[9]);
    assert!(f.data().iter().all(|&v| v >= 0.0));
    let last = net.layers().len() - 1;
    let (w, b) = net.layers_mut()[last].params_mut();
    w.scale(-3.0);
    b.data_mut()[0] = 5.0;
    assert_eq!(net.extract_features(&x, None).unwrap(), f);

    let one = gauss("c4-f3", 2, [2, 3, 3], 0);
    assert!(matches!(
        one.extract_features(&x, None),
        Err(NocError::NoFeatureLayer(_))
    ));
}

#[test]
fn features_before_maxout_are_merged() {
    let net = gauss("f6-mo-f5-f3", 2, [2, 3, 3], 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let a = uniform(&[2, 3, 3], &mut rng);
    let b = uniform(&[2, 3, 3], &mut rng);
    let f = net.extract_features(&a, Some(&b)).unwrap();
    assert_eq!(f.shape(), &[5]);

    let net = gauss("f6-f5-mo-f3", 2, [2, 3, 3], 19);
    let single = single_path(&net);
    let fa = single.extract_features(&a, None).unwrap();
    let fb = single.extract_features(&b, None).unwrap();
    let want: Vec<f32> = fa
        .data()
        .iter()
        .zip(fb.data())
        .map(|(x, y)| x.max(*y))
        .collect();
    assert_eq!(
        net.extract_features(&a, Some(&b)).unwrap().data(),
        &want[..]
    );
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = gauss("c4-mo-c4-f6-f3", 2, [2, 3, 3], 21);
    save_checkpoint(&net, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.layers(), net.layers());
    assert_eq!(back.spec(), net.spec());
    assert_eq!(back.provenance(), net.provenance());
    let json = std::fs::read_to_string(dir.path().join("model.json")).unwrap();
    assert!(json.contains("c4-mo-c4-f6-f3"));
}
