use proptest::prelude::*;
use protoflow::nd::{Tape, Tensor};
use protoflow::protoclass::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<usize> {
    (0..m).map(|i| if i < n { i } else { rng.random_range(0..n) }).collect()
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[test]
fn k5_mean_matches_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_matrix(&mut rng, 5, 7);
    let m = class_means(&f, &[0; 5], 1).unwrap();
    for j in 0..7 {
        let mut s = 0.0;
        for i in 0..5 {
            s += f.get(i, j);
        }
        assert!((m.get(0, j) - s / 5.0).abs() <= 1e-15);
    }
}

#[test]
fn cross_entropy_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ClassifierConfig::default();
    let p = random_matrix(&mut rng, 4, 6);
    let f = random_matrix(&mut rng, 9, 6);
    let y = random_labels(&mut rng, 9, 4);
    let state = PrototypeState::new(p.clone(), 0.0).unwrap();
    let mut oracle = 0.0;
    for i in 0..9 {
        let z: Vec<f64> = (0..4).map(|k| cfg.gamma * naive_cos(f.row(i), p.row(k))).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        oracle += -(z[y[i]].exp() / denom).ln();
    }
    oracle /= 9.0;
    let got = cross_entropy(&state, &f, &y, &cfg).unwrap();
    assert!((got - oracle).abs() <= 1e-12, "{got} vs {oracle}");

    let tape = Tape::new();
    let pv = tape.variable(p);
    let fv = tape.constant(f);
    let loss = cosine_cross_entropy_var(pv, fv, &y, cfg.gamma).unwrap();
    assert!((loss.value().item() - oracle).abs() <= 1e-12);
}

#[test]
fn unit_pairs_identity_and_rank_duality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let d = rng.random_range(2..10);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (a, b) = (unit(&mut rng), unit(&mut rng));
        let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((sq - (2.0 - 2.0 * naive_cos(&a, &b))).abs() <= 1e-12);
    }
    for _ in 0..200 {
        let r = rng.random_range(0.1..3.0);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let protos: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| r * x / n).collect()
            })
            .collect();
        let cos: Vec<f64> = protos.iter().map(|p| naive_cos(&x, p)).collect();
        let dist: Vec<f64> = cos.iter().map(|&c| euclid_from_cos(c, r).unwrap()).collect();
        let mut by_cos: Vec<usize> = (0..6).collect();
        by_cos.sort_by(|&i, &j| cos[j].total_cmp(&cos[i]).then(i.cmp(&j)));
        let mut by_dist: Vec<usize> = (0..6).collect();
        by_dist.sort_by(|&i, &j| dist[i].total_cmp(&dist[j]).then(i.cmp(&j)));
        assert_eq!(by_cos, by_dist);
    }
}

#[test]
fn exact_flow_is_negative_finite_difference_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ClassifierConfig { gamma: 2.0, ..Default::default() };
    for _ in 0..10 {
        let p = random_matrix(&mut rng, 3, 4);
        let f = random_matrix(&mut rng, 7, 4);
        let y = random_labels(&mut rng, 7, 3);
        let state = PrototypeState::new(p.clone(), 0.0).unwrap();
        let radii = state.radii();
        let flow = analytic_flow(&state, &f, &y, &cfg, FlowMode::Exact).unwrap();
        let h = 1e-6;
        for idx in 0..p.len() {
            let mut plus = p.clone();
            plus.data_mut()[idx] += h;
            let mut minus = p.clone();
            minus.data_mut()[idx] -= h;
            let fd = (euclidean_cross_entropy(&plus, &radii, &f, &y, cfg.gamma).unwrap()
                - euclidean_cross_entropy(&minus, &radii, &f, &y, cfg.gamma).unwrap())
                / (2.0 * h);
            let a = -flow.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel <= 1e-6, "coordinate {idx}: {a} vs {fd}");
        }
    }
}

#[test]
fn exact_flow_matches_tape_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ClassifierConfig::default();
    for _ in 0..100 {
        let (n, m, d) = (rng.random_range(2..6), rng.random_range(6..12), rng.random_range(2..9));
        let p = random_matrix(&mut rng, n, d);
        let f = random_matrix(&mut rng, m, d);
        let y = random_labels(&mut rng, m, n);
        let state = PrototypeState::new(p.clone(), 0.0).unwrap();
        let flow = analytic_flow(&state, &f, &y, &cfg, FlowMode::Exact).unwrap();
        let tape = Tape::new();
        let pv = tape.variable(p);
        let sphere = sphere_features(&f, &state.radii()).unwrap();
        let loss = euclidean_cross_entropy_var(pv, &sphere, &y, cfg.gamma).unwrap();
        let g = tape.backward(loss).unwrap().wrt(pv);
        for (a, b) in flow.data().iter().zip(g.data()) {
            let rel = (a + b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(rel <= 1e-8, "{a} vs {}", -b);
        }
    }
}

#[test]
fn absorbed_and_exact_modes_differ_by_two_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ClassifierConfig { gamma: 3.0, ..Default::default() };
    let state = PrototypeState::new(random_matrix(&mut rng, 3, 4), 0.0).unwrap();
    let f = random_matrix(&mut rng, 5, 4);
    let y = [0, 1, 2, 0, 1];
    let a = analytic_flow(&state, &f, &y, &cfg, FlowMode::Absorbed).unwrap();
    let b = analytic_flow(&state, &f, &y, &cfg, FlowMode::Exact).unwrap();
    for (x, z) in a.data().iter().zip(b.data()) {
        assert!((x * 6.0 - z).abs() <= 1e-12 * z.abs().max(1.0));
    }
}

#[test]
fn saturated_correct_predictions_are_stationary() {
    let cfg = ClassifierConfig { gamma: 1e4, ..Default::default() };
    let state = PrototypeState::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0).unwrap();
    let f = Tensor::from_rows(&[vec![2.0, 0.1], vec![-0.1, 1.0]]).unwrap();
    let flow = analytic_flow(&state, &f, &[0, 1], &cfg, FlowMode::Absorbed).unwrap();
    assert!(flow.data().iter().all(|&v| v == 0.0), "{flow:?}");
}

#[test]
fn mean_gradient_two_term_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ClassifierConfig::default();
    let state = PrototypeState::new(random_matrix(&mut rng, 2, 5), 0.0).unwrap();
    let s = random_matrix(&mut rng, 2, 5);
    let y = [1, 0];
    let both = mean_gradient(&state, &s, &y, &cfg).unwrap();
    let g0 = mean_gradient(&state, &Tensor::new(vec![1, 5], s.row(0).to_vec()).unwrap(), &y[..1], &cfg).unwrap();
    let g1 = mean_gradient(&state, &Tensor::new(vec![1, 5], s.row(1).to_vec()).unwrap(), &y[1..], &cfg).unwrap();
    for i in 0..both.len() {
        let oracle = (g0.data()[i] + g1.data()[i]) / 2.0;
        assert!((both.data()[i] - oracle).abs() <= 1e-15);
    }
    let single = analytic_flow(&state, &Tensor::new(vec![1, 5], s.row(0).to_vec()).unwrap(), &y[..1], &cfg, FlowMode::Absorbed).unwrap();
    assert_eq!(g0, single);
}

#[test]
fn difference_flow_var_matches_analytic_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ClassifierConfig::default();
    let p = random_matrix(&mut rng, 3, 4);
    let f = random_matrix(&mut rng, 6, 4);
    let y = [0, 1, 2, 2, 1, 0];
    let state = PrototypeState::new(p.clone(), 0.0).unwrap();
    let expected = analytic_flow(&state, &f, &y, &cfg, FlowMode::Absorbed).unwrap();
    let probs = euclidean_probs(&p, &state.radii(), &f, cfg.gamma).unwrap();
    let coeffs = one_hot(&y, 3).sub(&probs).unwrap();
    let unit: Vec<f64> = (0..6)
        .flat_map(|i| {
            let r = f.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(move |v| v / n).collect::<Vec<_>>()
        })
        .collect();
    let tape = Tape::new();
    let flow = difference_flow_var(
        tape.variable(p),
        tape.constant(Tensor::new(vec![6, 4], unit).unwrap()),
        tape.constant(coeffs),
        Some(tape.constant(Tensor::vector(state.radii()))),
    )
    .unwrap();
    assert!(flow.value().max_abs_diff(&expected) <= 1e-12);
}

proptest! {
    #[test]
    fn classify_is_scale_invariant(
        x in prop::collection::vec(-2.0f64..2.0, 4),
        seed in any::<u64>(),
    ) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = PrototypeState::new(random_matrix(&mut rng, 3, 4), 0.0).unwrap();
        let cfg = ClassifierConfig::default();
        let base = classify(&state, &x, &cfg).unwrap();
        for c in [0.1, 7.0] {
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let p = classify(&state, &scaled, &cfg).unwrap();
            for (a, b) in p.iter().zip(&base) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
