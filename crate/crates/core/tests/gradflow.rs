use protoflow::episodes::{episode_rng, sample_episode, synth_gaussian, EpisodeConfig, EpisodeMode};
use protoflow::gradflow::*;
use protoflow::nd::{gradcheck_module, Linear, Mlp2, Module, Tensor};
use protoflow::protoclass::{analytic_flow, mean_gradient, ClassifierConfig, FlowMode, PrototypeState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(modules: usize) -> GradNetConfig {
    GradNetConfig { modules, hidden: 12, heads: 2, head_dim: 3, ..Default::default() }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, k: usize, q: usize, d: usize) -> (FlowInput, PrototypeState) {
    let support = random_matrix(rng, n * k, d);
    let labels = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let mut input = FlowInput::labeled(support, labels, n).unwrap();
    if q > 0 {
        input = input.with_unlabeled(random_matrix(rng, n * q, d)).unwrap();
    }
    (input, PrototypeState::new(random_matrix(rng, n, d), 0.0).unwrap())
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

#[test]
fn single_module_is_scaled_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (input, state) = random_input(&mut rng, 3, 2, 2, 4);
    let net = GradNetParams::new(small_config(1), 3, 4, 5.0, &mut rng).unwrap();
    let trace = net.inspect(&input, &state).unwrap();
    let flow = Flow::GradNet(net.clone()).evaluate(&input, &state, &ClassifierConfig::default()).unwrap();
    let expected = trace[0].mean.scale(net.config.beta(0.0, 5.0));
    assert_eq!(flow, expected);
}

#[test]
fn single_sample_takes_variance_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let support = random_matrix(&mut rng, 1, 4);
    let input = FlowInput::labeled(support, vec![0], 2).unwrap();
    let state = PrototypeState::new(random_matrix(&mut rng, 2, 4), 0.0).unwrap();
    let net = GradNetParams::new(small_config(3), 2, 4, 1.0, &mut rng).unwrap();
    for m in net.inspect(&input, &state).unwrap() {
        assert!(m.weights.data().iter().all(|&w| w == 1.0));
        assert!(m.variance.data().iter().all(|&v| v == net.config.var_floor));
    }
    let flow = Flow::GradNet(net).evaluate(&input, &state, &ClassifierConfig::default()).unwrap();
    assert!(flow.is_finite());
}

#[test]
fn decay_ratio_over_horizon() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (input, mut state) = random_input(&mut rng, 3, 1, 2, 4);
    let net = Flow::GradNet(GradNetParams::new(small_config(2), 3, 4, 40.0, &mut rng).unwrap());
    let cfg = ClassifierConfig::default();
    let at0 = net.evaluate(&input, &state, &cfg).unwrap();
    state.time = 40.0;
    let at_t = net.evaluate(&input, &state, &cfg).unwrap();
    for (a, b) in at_t.data().iter().zip(at0.data()) {
        assert!((a - 0.1 * b).abs() <= 1e-12 * b.abs().max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn weights_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (input, state) = random_input(&mut rng, 4, 3, 5, 6);
    let net = GradNetParams::new(small_config(4), 4, 6, 1.0, &mut rng).unwrap();
    for m in net.inspect(&input, &state).unwrap() {
        assert_eq!(m.weights.shape(), &[4, input.len()]);
        for k in 0..4 {
            let row = m.weights.row(k);
            assert!(row.iter().all(|&w| w > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

fn permute_samples(input: &FlowInput, rng: &mut ChaCha8Rng) -> FlowInput {
    use rand::seq::SliceRandom;
    let d = input.dim();
    let mut order: Vec<usize> = (0..input.support.rows()).collect();
    order.shuffle(rng);
    let support: Vec<f64> = order.iter().flat_map(|&i| input.support.row(i).to_vec()).collect();
    let labels = order.iter().map(|&i| input.support_labels[i]).collect();
    let mut uorder: Vec<usize> = (0..input.unlabeled.rows()).collect();
    uorder.shuffle(rng);
    let unl: Vec<f64> = uorder.iter().flat_map(|&i| input.unlabeled.row(i).to_vec()).collect();
    FlowInput::labeled(Tensor::new(vec![order.len(), d], support).unwrap(), labels, input.n_way)
        .unwrap()
        .with_unlabeled(Tensor::new(vec![uorder.len(), d], unl).unwrap())
        .unwrap()
}

#[test]
fn sample_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (input, state) = random_input(&mut rng, 3, 3, 4, 5);
    let cfg = ClassifierConfig::default();
    let flows = [
        Flow::MeanGrad,
        Flow::GradNet(GradNetParams::new(small_config(2), 3, 5, 1.0, &mut rng).unwrap()),
        Flow::E2GradNet(E2GradNetParams::near_zero(3, &mut rng)),
    ];
    for flow in &flows {
        let base = flow.evaluate(&input, &state, &cfg).unwrap();
        for _ in 0..5 {
            let shuffled = permute_samples(&input, &mut rng);
            let out = flow.evaluate(&shuffled, &state, &cfg).unwrap();
            assert!(close(&out, &base, 1e-12), "{:?}: {}", flow.kind(), out.max_abs_diff(&base));
        }
    }
}

fn permute_classes(input: &FlowInput, state: &PrototypeState, perm: &[usize]) -> (FlowInput, PrototypeState) {
    // Old class c becomes class perm[c].
    let n = perm.len();
    let labels = input.support_labels.iter().map(|&c| perm[c]).collect();
    let moved = FlowInput::labeled(input.support.clone(), labels, n).unwrap().with_unlabeled(input.unlabeled.clone()).unwrap();
    let mut rows = vec![vec![]; n];
    for c in 0..n {
        rows[perm[c]] = state.prototypes.row(c).to_vec();
    }
    (moved, PrototypeState::new(Tensor::from_rows(&rows).unwrap(), state.time).unwrap())
}

fn assert_equivariant(flow: &Flow, input: &FlowInput, state: &PrototypeState, perm: &[usize]) {
    let cfg = ClassifierConfig::default();
    let base = flow.evaluate(input, state, &cfg).unwrap();
    let (pi, ps) = permute_classes(input, state, perm);
    let out = flow.evaluate(&pi, &ps, &cfg).unwrap();
    for c in 0..perm.len() {
        for (a, b) in out.row(perm[c]).iter().zip(base.row(c)) {
            assert!((a - b).abs() <= 1e-12, "{:?} class {c}: {a} vs {b}", flow.kind());
        }
    }
}

#[test]
fn class_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d) = (4, 5);
    let (input, state) = random_input(&mut rng, n, 2, 3, d);
    let perm = [2, 0, 3, 1];

    assert_equivariant(&Flow::MeanGrad, &input, &state, &perm);

    // Class code and label rows of the embedding shared across classes.
    let mut net = GradNetParams::new(small_config(2), n, d, 1.0, &mut rng).unwrap();
    for m in &mut net.modules {
        let w = m.embed.weight.value.data_mut();
        let cols = 12;
        for block in [0, n + d] {
            for r in 1..n {
                for j in 0..cols {
                    w[(block + r) * cols + j] = w[block * cols + j];
                }
            }
        }
    }
    assert_equivariant(&Flow::GradNet(net), &input, &state, &perm);

    // Residual of the form a I + b 1 1^T commutes with permutations.
    let mut e2 = E2GradNetParams::identity(n);
    for (layer, a, b) in [(&mut e2.residual.hidden, 0.9, 0.05), (&mut e2.residual.output, 1.3, -0.1)] {
        let w = layer.weight.value.data_mut();
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = if i == j { a + b } else { b };
            }
        }
        layer.bias.value.data_mut().iter_mut().for_each(|v| *v = 0.02);
    }
    assert_equivariant(&Flow::E2GradNet(e2), &input, &state, &perm);
}

#[test]
fn inductive_input_ignores_queries() {
    let data = synth_gaussian(8, 6, 30, 1.0, 0.4, 1).unwrap();
    let cfg = EpisodeConfig { n_way: 3, k_shot: 2, queries_per_class: 4, ..Default::default() };
    let a = sample_episode(&data, &cfg, &mut episode_rng(3, 0)).unwrap().with_mode(EpisodeMode::Inductive);
    let mut b = a.clone();
    b.query = b.query.map(|v| v * -3.0 + 1.0);
    let (ia, ib) = (FlowInput::from_episode(&a), FlowInput::from_episode(&b));
    assert_eq!(ia, ib);
    assert_eq!(ia.len(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let flow = Flow::E2GradNet(E2GradNetParams::near_zero(3, &mut rng));
    let state = PrototypeState::new(random_matrix(&mut rng, 3, 6), 0.0).unwrap();
    let cfg = ClassifierConfig::default();
    assert_eq!(flow.evaluate(&ia, &state, &cfg).unwrap(), flow.evaluate(&ib, &state, &cfg).unwrap());
}

#[test]
fn identity_residual_gives_zero_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (input, state) = random_input(&mut rng, 5, 1, 3, 8);
    let out = Flow::E2GradNet(E2GradNetParams::identity(5)).evaluate(&input, &state, &ClassifierConfig::default()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

fn elu(x: f64) -> f64 {
    if x > 0.0 { x } else { x.exp_m1() }
}

/// Per-sample loop over the residual flow definition.
fn e2_oracle(net: &E2GradNetParams, input: &FlowInput, state: &PrototypeState, gamma: f64, skip_own: bool) -> Vec<Vec<f64>> {
    let feats = input.visible();
    let (n, d, m) = (input.n_way, input.dim(), feats.rows());
    let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
        (0..n).map(|j| l.bias.value.data()[j] + (0..n).map(|i| x[i] * l.weight.value.get(i, j)).sum::<f64>()).collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut flow = vec![vec![0.0; d]; n];
    for i in 0..m {
        let f = feats.row(i);
        let logits: Vec<f64> = (0..n)
            .map(|k| {
                let p = state.prototypes.row(k);
                gamma * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (norm(f) * norm(p))
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let hidden: Vec<f64> = lin(&net.residual.hidden, &probs).into_iter().map(elu).collect();
        let yhat = lin(&net.residual.output, &hidden);
        for k in 0..n {
            if skip_own && i == k {
                continue;
            }
            for j in 0..d {
                flow[k][j] += (yhat[k] - probs[k]) * (f[j] - state.prototypes.get(k, j)) / m as f64;
            }
        }
    }
    flow
}

#[test]
fn e2gradnet_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (input, state) = random_input(&mut rng, 2, 1, 0, 3);
    let net = E2GradNetParams { residual: Mlp2::new("r", 2, 2, 2, &mut rng) };
    let cfg = ClassifierConfig::default();
    let out = Flow::E2GradNet(net.clone()).evaluate(&input, &state, &cfg).unwrap();
    let oracle = e2_oracle(&net, &input, &state, cfg.gamma, false);
    for k in 0..2 {
        for j in 0..3 {
            assert!((out.get(k, j) - oracle[k][j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn sample_at_own_prototype_drops_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (input, _) = random_input(&mut rng, 3, 1, 0, 4);
    let state = PrototypeState::new(input.support.clone(), 0.0).unwrap();
    let net = E2GradNetParams { residual: Mlp2::new("r", 3, 3, 3, &mut rng) };
    let cfg = ClassifierConfig::default();
    let out = Flow::E2GradNet(net.clone()).evaluate(&input, &state, &cfg).unwrap();
    let without_own = e2_oracle(&net, &input, &state, cfg.gamma, true);
    for k in 0..3 {
        for j in 0..4 {
            assert!((out.get(k, j) - without_own[k][j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn perfect_residual_reproduces_population_flow() {
    // Features and prototypes on the sphere of radius 1/sqrt(2), where the
    // cosine and Euclidean-form classifiers coincide.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let on_sphere = |t: Tensor| {
        let rows: Vec<Vec<f64>> = (0..t.rows())
            .map(|i| {
                let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                t.row(i).iter().map(|x| r * x / n).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let (n, d) = (4, 6);
    let feats = on_sphere(random_matrix(&mut rng, 40, d));
    let labels: Vec<usize> = (0..40).map(|i| i % n).collect();
    let state = PrototypeState::new(on_sphere(random_matrix(&mut rng, n, d)), 0.0).unwrap();
    let cfg = ClassifierConfig::default();
    let input = FlowInput::labeled(feats.clone(), labels.clone(), n).unwrap();
    let e2 = e2gradnet_flow_with_targets(&input, &state, &input.targets(), &cfg).unwrap();
    let analytic = analytic_flow(&state, &feats, &labels, &cfg, FlowMode::Absorbed).unwrap();
    assert!(close(&e2, &analytic, 1e-12), "{}", e2.max_abs_diff(&analytic));
}

#[test]
fn mean_grad_flow_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (input, state) = random_input(&mut rng, 4, 3, 2, 5);
    let cfg = ClassifierConfig::default();
    let tape_flow = Flow::MeanGrad.evaluate(&input, &state, &cfg).unwrap();
    let closed = mean_gradient(&state, &input.support, &input.support_labels, &cfg).unwrap();
    assert!(close(&tape_flow, &closed, 1e-12), "{}", tape_flow.max_abs_diff(&closed));
}

#[test]
fn gradnet_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (input, state) = random_input(&mut rng, 2, 2, 1, 3);
    let net = Flow::GradNet(GradNetParams::new(small_config(2), 2, 3, 1.0, &mut rng).unwrap());
    let probe = random_matrix(&mut rng, 2, 3);
    let cfg = ClassifierConfig::default();
    let report = gradcheck_module(
        |tape, flow: &Flow| {
            let bound = flow.bind(tape, &input, &cfg)?;
            let p = tape.variable(state.prototypes.clone());
            let out = bound.eval(p, 0.3)?;
            Ok(out.mul(tape.constant(probe.clone()))?.sum().scale(100.0))
        },
        &net,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(net.num_scalars() > 0);
}

#[test]
fn nan_parameters_are_located() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (input, state) = random_input(&mut rng, 3, 2, 0, 4);
    let mut net = GradNetParams::new(small_config(2), 3, 4, 1.0, &mut rng).unwrap();
    net.modules[1].output.bias.value.data_mut()[0] = f64::NAN;
    let err = Flow::GradNet(net).evaluate(&input, &state, &ClassifierConfig::default()).unwrap_err();
    assert!(matches!(err, protoflow::Error::FlowNan { module: 1, class: 0, sample: 0 }), "{err}");
}

#[test]
fn wrong_widths_are_configuration_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (input, state) = random_input(&mut rng, 3, 1, 0, 4);
    let cfg = ClassifierConfig::default();
    let e2 = Flow::E2GradNet(E2GradNetParams::identity(4));
    assert!(matches!(e2.evaluate(&input, &state, &cfg), Err(protoflow::Error::Config(_))));
    let g = Flow::GradNet(GradNetParams::new(small_config(1), 3, 5, 1.0, &mut rng).unwrap());
    assert!(matches!(g.evaluate(&input, &state, &cfg), Err(protoflow::Error::Config(_))));
}

#[test]
fn probe_runs_and_validates() {
    let cfg = ProbeConfig { repeats: 2, ..Default::default() };
    assert!(flow_complexity_probe(&cfg).is_err());
    let cfg = ProbeConfig { repeats: 3, dim: 8, ..Default::default() };
    let stats = flow_complexity_probe(&cfg).unwrap();
    assert_eq!(stats.samples, 100);
    assert!(stats.min_secs <= stats.median_secs && stats.median_secs <= stats.max_secs);
}
