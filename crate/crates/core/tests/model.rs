use ndcr::model::{combiner, cross_entropy, match_loss, proposition, system1, system2, Inputs};
use ndcr::{Arch, Graph, LossConfig, ModelConfig, Ndcr, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN10: f64 = std::f64::consts::LN_10;

fn small() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        reasoner_heads: 2,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn inputs(seed: u64, d: usize, props: usize, l: usize) -> Inputs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Inputs {
        text: random(&mut rng, props + 1, d, 1.0),
        images: random(&mut rng, l, d, 1.0),
        cross: random(&mut rng, l, d, 1.0),
    }
}

fn zero(store: &mut ParamStore<f64>, name: &str) {
    store
        .get_mut(name)
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
}

fn values(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[test]
fn uniform_logits_give_m_plus_two_ln_l() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    for seed in 0..3 {
        let mut store = model.init_params::<f64>(seed).unwrap();
        zero(&mut store, "s1.head.w");
        zero(&mut store, "s2.head.w");
        let x = inputs(seed, 8, 3, 10);
        let mut g = Graph::with_store(&store, None);
        let fwd = model.forward(&mut g, &x, Some(3), None).unwrap();
        let loss = match_loss(&mut g, &fwd, 4).unwrap();
        assert!((g.value(loss).item() - 5.0 * LN10).abs() <= 1e-6);
        assert!((g.value(loss).item() - 11.5129).abs() < 1e-4);
    }
}

#[test]
fn confident_gold_gives_vanishing_cross_entropy() {
    let mut g = Graph::<f64>::new();
    let mut logits = vec![0.0; 5 * 10];
    for r in 0..5 {
        logits[r * 10 + 7] = 30.0;
    }
    let x = g
        .input(Tensor::from_f64(&[5, 10], &logits).unwrap(), true)
        .unwrap();
    let loss = cross_entropy(&mut g, x, 7).unwrap();
    let v = g.value(loss).item();
    assert!((0.0..1e-9).contains(&v), "{v}");
}

#[test]
fn cross_entropy_rejects_out_of_range_gold() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 3]), true).unwrap();
    assert!(cross_entropy(&mut g, x, 3).is_err());
}

fn negation_loss(neg: &Tensor<f64>, pos: &Tensor<f64>, theta: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let n = g.input(neg.clone(), true).unwrap();
    let p = g.input(pos.clone(), false).unwrap();
    let v = system2::negation_feedback_loss(&mut g, n, p, theta).unwrap();
    g.value(v).item()
}

/// Row-wise KL(softmax(a) || softmax(b)) evaluated directly.
fn kl(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
    };
    let (p, q) = (norm(a), norm(b));
    p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum()
}

#[test]
fn identical_distributions_cost_m_theta() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in 1..=5 {
        let x = random(&mut rng, m, 10, 3.0);
        let v = negation_loss(&x, &x, 0.2);
        assert!((v - m as f64 * 0.2).abs() <= 1e-9, "m={m}: {v}");
    }
}

#[test]
fn separated_distributions_cost_nothing() {
    let m = 3;
    let mut pos = vec![0.0; m * 10];
    let mut neg = vec![0.0; m * 10];
    for i in 0..m {
        pos[i * 10 + i] = 8.0;
        neg[i * 10 + i + 1] = 8.0;
    }
    let pos = Tensor::from_f64(&[m, 10], &pos).unwrap();
    let neg = Tensor::from_f64(&[m, 10], &neg).unwrap();
    for i in 0..m {
        assert!(kl(neg.row(i), pos.row(i)) >= 0.2);
    }
    assert_eq!(negation_loss(&neg, &pos, 0.2), 0.0);
}

#[test]
fn negation_loss_matches_direct_hinge() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let neg = random(&mut rng, 3, 6, 1.0);
        let pos = random(&mut rng, 3, 6, 1.0);
        let direct: f64 = (0..3)
            .map(|i| (0.2 - kl(neg.row(i), pos.row(i))).max(0.0))
            .sum();
        assert!((negation_loss(&neg, &pos, 0.2) - direct).abs() < 1e-12);
    }
}

#[test]
fn uniformity_closed_forms() {
    let u = |rows: &[f64], m: usize| {
        let mut g = Graph::<f64>::new();
        let s = g
            .input(Tensor::from_f64(&[m, rows.len() / m], rows).unwrap(), true)
            .unwrap();
        let v = proposition::uniformity_loss(&mut g, s, 0.3).unwrap();
        g.value(v).item()
    };
    assert_eq!(u(&[1.0, 2.0, 3.0], 1), 0.0);
    assert!((u(&[1.0, 2.0, 1.0, 2.0], 2) - 0.7).abs() < 1e-12);
    assert_eq!(u(&[1.0, 0.0, 0.0, 4.0], 2), 0.0);
}

#[test]
fn saturated_logits_select_one_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = random(&mut rng, 10, 8, 1.0);
    let mut g = Graph::<f64>::new();
    let mut logits = vec![0.0; 10];
    logits[6] = 30.0;
    let p = g
        .input(Tensor::from_f64(&[1, 10], &logits).unwrap(), false)
        .unwrap();
    let h = g.input(Tensor::zeros(&[10, 8]), false).unwrap();
    let im = g.input(images.clone(), false).unwrap();
    let j = system2::joint_representation(&mut g, p, h, im).unwrap();
    assert_eq!(g.shape(j), &[10, 16]);
    for r in 0..10 {
        for c in 0..8 {
            assert!((g.value(j).get(r, c) - images.get(6, c)).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_negation_weights_give_the_bias() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let mut store = model.init_params::<f64>(0).unwrap();
    zero(&mut store, "s2.neg.l1.w");
    zero(&mut store, "s2.neg.l1.b");
    zero(&mut store, "s2.neg.l2.w");
    let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    store
        .get_mut("s2.neg.l2.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&bias);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::with_store(&store, None);
    let states = g.input(random(&mut rng, 6, 8, 1.0), false).unwrap();
    let out = system2::negate(&mut g, states).unwrap();
    assert_eq!(g.shape(out), &[6, 8]);
    for r in 0..6 {
        assert_eq!(g.value(out).row(r), &bias[..]);
    }
}

#[test]
fn single_proposition_attention_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let q = g.input(random(&mut rng, 4, 6, 1.0), false).unwrap();
    let kv = random(&mut rng, 4, 6, 1.0);
    let k = g.input(random(&mut rng, 4, 6, 1.0), false).unwrap();
    let v = g.input(kv.clone(), false).unwrap();
    let out = g.attention(q, k, v, 2, 4).unwrap();
    assert_eq!(g.value(out), &kv);
}

#[test]
fn modifier_with_zero_weights_outputs_zero() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let mut store = model.init_params::<f64>(0).unwrap();
    for name in ["s1.mod.m2.w", "s1.mod.m2.b", "s1.mod.m1.w", "s1.mod.m1.b"] {
        zero(&mut store, name);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::with_store(&store, None);
    let h = g.input(random(&mut rng, 2 * 3, 8, 1.0), false).unwrap();
    let ctx = g.input(random(&mut rng, 3, 8, 1.0), false).unwrap();
    let out = system1::modify(&mut g, h, ctx, 2, 3).unwrap();
    assert_eq!(g.shape(out), &[6, 8]);
    assert!(values(&g, out).iter().all(|&v| v == 0.0));
}

#[test]
fn score_head_is_affine() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let mut store = model.init_params::<f64>(1).unwrap();
    store.get_mut("s1.head.b").unwrap().data_mut()[0] = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = random(&mut rng, 6, 8, 1.0);
    let a = -2.5;
    let mut g = Graph::with_store(&store, None);
    let hv = g.input(h.clone(), false).unwrap();
    let hs = g.input(h.map(|v| v * a), false).unwrap();
    let s = system1::score(&mut g, hv, 2, 3).unwrap();
    let sa = system1::score(&mut g, hs, 2, 3).unwrap();
    assert_eq!(g.shape(s), &[2, 3]);
    for (x, y) in values(&g, s).iter().zip(values(&g, sa)) {
        assert!((y - (a * (x - 0.7) + 0.7)).abs() < 1e-12);
    }
}

#[test]
fn parser_outputs_every_slot_and_count_logits() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let store = model.init_params::<f64>(2).unwrap();
    for n in 1..=5 {
        let x = inputs(n as u64, 8, n, 4);
        let mut g = Graph::with_store(&store, None);
        let text = g.constant(x.text).unwrap();
        let slots = proposition::parse_propositions(&mut g, &model.config, text).unwrap();
        assert_eq!(g.shape(slots), &[10, 8]);
        let count = proposition::predict_count(&mut g, text).unwrap();
        assert_eq!(g.shape(count), &[1, 10]);
        let p = g.softmax(count, 1).unwrap();
        let total: f64 = values(&g, p).iter().sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn difference_term_vanishes_when_sublayers_agree() {
    let cfg = ModelConfig {
        layer_norm_eps: 1e-14,
        ..small()
    };
    let model = Ndcr::new(cfg, Arch::FULL).unwrap();
    let mut store = model.init_params::<f64>(3).unwrap();
    // With a zero output projection the cross sublayer re-normalizes an
    // already normalized input, so it reproduces the self sublayer output.
    zero(&mut store, "prop.layer0.cross.wo.w");
    zero(&mut store, "prop.layer0.cross.wo.b");
    let x = inputs(3, 8, 3, 4);
    let mut g = Graph::with_store(&store, None);
    let text = g.constant(x.text).unwrap();
    let layers = proposition::parse_layers(&mut g, &model.config, text).unwrap();
    let ffn_input = values(&g, layers[0].ffn_input);
    assert!(ffn_input.iter().all(|v| v.abs() < 1e-9), "{ffn_input:?}");
}

#[test]
fn evaluation_forward_is_repeatable() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let store = model.init_params::<f64>(4).unwrap();
    let x = inputs(4, 8, 3, 5);
    let run = || {
        let mut g = Graph::with_store(&store, None);
        let fwd = model.forward(&mut g, &x, None, None).unwrap();
        (
            values(&g, fwd.final_scores().unwrap()),
            values(&g, fwd.context.unwrap()),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn synthetic_forward_is_finite_at_full_scale() {
    let gen = ndcr::data::GenConfig::default();
    let data = ndcr::data::generate_dataset(21, 30, &gen).unwrap();
    let model = Ndcr::new(ModelConfig::default(), Arch::FULL).unwrap();
    let store = model.init_params::<f32>(0).unwrap();
    for inst in &data {
        let mut g = Graph::with_store(&store, None);
        let fwd = model
            .forward(&mut g, &Inputs::from_instance(inst), Some(inst.count), None)
            .unwrap();
        for v in [fwd.fused, fwd.states, fwd.p_s1, fwd.final_scores().unwrap()] {
            assert!(g.value(v).is_finite());
        }
        let fused = g
            .value(fwd.fused)
            .data()
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(fused <= 1000.0 * (1.0 + 1e-6));
    }
}

#[test]
fn single_proposition_without_context_reduces_to_its_head() {
    // Mean pooling over one proposition is the identity, so the System-1
    // readout equals that proposition's scores.
    let cfg = small();
    let model = Ndcr::new(cfg, ndcr::train::Ablation::NoModifier.arch()).unwrap();
    let store = model.init_params::<f64>(5).unwrap();
    let x = inputs(5, 8, 1, 6);
    let mut g = Graph::with_store(&store, None);
    let fwd = model.forward(&mut g, &x, Some(1), None).unwrap();
    assert!(fwd.context.is_none());
    let p = g.softmax(fwd.p_s1, 1).unwrap();
    let pooled = g.mean(p, Some(0)).unwrap();
    assert_eq!(values(&g, pooled), values(&g, p));
}

#[test]
fn negation_gradient_stays_on_the_negative_path() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let store = model.init_params::<f64>(6).unwrap();
    let x = inputs(6, 8, 3, 5);
    let mut g = Graph::with_store(&store, None);
    let fwd = model.forward(&mut g, &x, Some(3), None).unwrap();
    // A wide margin keeps every hinge active.
    let loss =
        system2::negation_feedback_loss(&mut g, fwd.p_neg.unwrap(), fwd.p_s1, 100.0).unwrap();
    let grads = g.backward(loss).unwrap();
    let reached = |name: &str| {
        g.bound_var(name)
            .and_then(|v| grads.get(v))
            .is_some_and(|t| t.data().iter().any(|&x| x != 0.0))
    };
    assert!(reached("s2.neg.l1.w") && reached("s2.neg.l2.w"));
    for name in ["s2.attn.wq.w", "s2.gate.w", "comb.wf", "s2.head.w"] {
        assert!(!reached(name), "{name} received a negation gradient");
    }
}

#[test]
fn gate_override_selects_one_system() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let store = model.init_params::<f64>(7).unwrap();
    let x = inputs(7, 8, 2, 5);
    let mut g = Graph::with_store(&store, None);
    let one = model.forward(&mut g, &x, Some(2), Some(1.0)).unwrap();
    let c = one.combined.as_ref().unwrap();
    assert_eq!(values(&g, c.scores), values(&g, c.system1));
    let zero = model.forward(&mut g, &x, Some(2), Some(0.0)).unwrap();
    assert_eq!(
        values(&g, zero.final_scores().unwrap()),
        values(&g, zero.system2_scores().unwrap())
    );
    assert!(model.forward(&mut g, &x, Some(2), Some(1.5)).is_err());
}

#[test]
fn model_rejects_width_mismatch() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    let store = model.init_params::<f64>(0).unwrap();
    let x = inputs(0, 6, 2, 4);
    let mut g = Graph::with_store(&store, None);
    assert!(matches!(
        model.forward(&mut g, &x, None, None),
        Err(ndcr::Error::Dimension(_))
    ));
    let wide = Ndcr::new(ModelConfig { d: 16, ..small() }, Arch::FULL).unwrap();
    assert!(wide.check_params(&store).is_err());
    assert!(model.check_params(&store).is_ok());
}

#[test]
fn loss_terms_are_nonnegative() {
    let model = Ndcr::new(small(), Arch::FULL).unwrap();
    for seed in 0..4 {
        let store = model.init_params::<f64>(seed).unwrap();
        let x = inputs(seed, 8, 4, 6);
        let mut g = Graph::with_store(&store, None);
        let fwd = model.forward(&mut g, &x, Some(3), None).unwrap();
        let l = model
            .losses(&mut g, &fwd, 2, 3, &LossConfig::default())
            .unwrap();
        for v in [
            l.matching,
            l.negation.unwrap(),
            l.uniformity,
            l.count,
            l.total,
        ] {
            assert!(g.value(v).item() >= 0.0);
        }
    }
}

/// Row permutation taking proposition-major grid rows `i * l + j` to
/// `perm[i] * l + j`.
fn permute_props(t: &Tensor<f64>, perm: &[usize], l: usize) -> Tensor<f64> {
    let cols = t.cols();
    let mut out = vec![0.0; t.len()];
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..l {
            out[(p * l + j) * cols..(p * l + j + 1) * cols].copy_from_slice(t.row(i * l + j));
        }
    }
    Tensor::matrix(t.rows(), cols, out).unwrap()
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gates_and_sig_stay_strictly_inside_the_unit_interval(seed in any::<u64>(), m in 1usize..5, l in 2usize..8) {
        let model = Ndcr::new(small(), Arch::FULL).unwrap();
        let store = model.init_params::<f64>(seed).unwrap();
        let x = inputs(seed, 8, m, l);
        let mut g = Graph::with_store(&store, None);
        let fwd = model.forward(&mut g, &x, Some(m), None).unwrap();
        let conj = fwd.conjunction.as_ref().unwrap();
        let c = fwd.combined.as_ref().unwrap();
        for v in [conj.gate_pos, conj.gate_neg.unwrap(), c.sig] {
            prop_assert!(values(&g, v).iter().all(|&x| x > 0.0 && x < 1.0));
        }
        let w = values(&g, c.weights);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(values(&g, conj.h_f).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn final_scores_lie_between_the_two_systems(seed in any::<u64>(), m in 1usize..5, l in 2usize..8) {
        let model = Ndcr::new(small(), Arch::FULL).unwrap();
        let store = model.init_params::<f64>(seed).unwrap();
        let x = inputs(seed ^ 1, 8, m, l);
        let mut g = Graph::with_store(&store, None);
        let fwd = model.forward(&mut g, &x, Some(m), None).unwrap();
        let c = fwd.combined.as_ref().unwrap();
        let (pf, s1, s2) = (values(&g, c.scores), values(&g, c.system1), values(&g, fwd.system2_scores().unwrap()));
        for j in 0..l {
            let (lo, hi) = (s1[j].min(s2[j]), s1[j].max(s2[j]));
            prop_assert!(pf[j] >= lo - 1e-12 && pf[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn conjunction_ignores_proposition_order(seed in any::<u64>(), m in 1usize..6, l in 1usize..6) {
        let model = Ndcr::new(small(), Arch::FULL).unwrap();
        let store = model.init_params::<f64>(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random(&mut rng, l, 8, 1.0);
        let pos = random(&mut rng, m * l, 16, 1.0);
        let neg = random(&mut rng, m * l, 16, 1.0);
        let perm = permutation(&mut rng, m);
        let run = |pos: &Tensor<f64>, neg: &Tensor<f64>| {
            let mut g = Graph::with_store(&store, None);
            let c = g.constant(ctx.clone()).unwrap();
            let p = g.constant(pos.clone()).unwrap();
            let n = g.constant(neg.clone()).unwrap();
            let out = system2::conjunction(&mut g, &model.config, c, p, Some(n), m, l).unwrap();
            (values(&g, out.h_f), values(&g, out.scores))
        };
        let (hf, s) = run(&pos, &neg);
        let (hf_p, s_p) = run(&permute_props(&pos, &perm, l), &permute_props(&neg, &perm, l));
        for (a, b) in hf.iter().zip(&hf_p).chain(s.iter().zip(&s_p)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn fusion_is_equivariant_to_image_order(seed in any::<u64>(), m in 1usize..4, l in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = random(&mut rng, m, 8, 1.0);
        let images = random(&mut rng, l, 8, 1.0);
        let perm = permutation(&mut rng, l);
        let mut shuffled = vec![0.0; l * 8];
        for (j, &p) in perm.iter().enumerate() {
            shuffled[p * 8..(p + 1) * 8].copy_from_slice(images.row(j));
        }
        let mut g = Graph::<f64>::new();
        let s = g.constant(slots).unwrap();
        let a = g.constant(images).unwrap();
        let b = g.constant(Tensor::matrix(l, 8, shuffled).unwrap()).unwrap();
        let fa = system1::fuse(&mut g, s, a, 1000.0).unwrap();
        let fb = system1::fuse(&mut g, s, b, 1000.0).unwrap();
        for i in 0..m {
            for (j, &p) in perm.iter().enumerate() {
                prop_assert_eq!(g.value(fa).row(i * l + j), g.value(fb).row(i * l + p));
            }
        }
        prop_assert!(g.value(fa).data().iter().all(|v| v.abs() <= 1000.0));
    }

    #[test]
    fn final_scores_follow_affine_maps_of_both_systems(
        seed in any::<u64>(), m in 1usize..5, l in 2usize..8, shift in -20.0f64..20.0, scale in 0.1f64..5.0,
    ) {
        let cfg = small();
        let model = Ndcr::new(cfg.clone(), Arch::FULL).unwrap();
        let store = model.init_params::<f64>(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hf = random(&mut rng, 1, 8, 1.0);
        let hw = random(&mut rng, m, 8, 1.0);
        let p1 = random(&mut rng, m, l, 3.0);
        let p2 = random(&mut rng, 1, l, 3.0);
        let run = |p1: Tensor<f64>, p2: Tensor<f64>| {
            let mut g = Graph::with_store(&store, None);
            let (a, b) = (g.constant(hf.clone()).unwrap(), g.constant(hw.clone()).unwrap());
            let (c, d) = (g.constant(p1).unwrap(), g.constant(p2).unwrap());
            let out = combiner::combine(&mut g, &cfg, a, b, c, d, None).unwrap();
            values(&g, out.scores)
        };
        let base = run(p1.clone(), p2.clone());
        let shifted = run(p1.map(|v| v + shift), p2.map(|v| v + shift));
        let mapped = run(p1.map(|v| scale * v + shift), p2.map(|v| scale * v + shift));
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        for j in 0..l {
            prop_assert!((shifted[j] - (base[j] + shift)).abs() <= 1e-9);
            prop_assert!((mapped[j] - (scale * base[j] + shift)).abs() <= 1e-9);
        }
        prop_assert_eq!(argmax(&base), argmax(&shifted));
    }

    #[test]
    fn conjunction_attention_normalizes_over_propositions(seed in any::<u64>(), m in 1usize..6, l in 1usize..5) {
        // Equal values over propositions must come back unchanged, which
        // holds exactly when the attention weights sum to one per image.
        let cfg = small();
        let model = Ndcr::new(cfg.clone(), Arch::FULL).unwrap();
        let mut store = model.init_params::<f64>(seed).unwrap();
        let eye: Vec<f64> = (0..16 * 16).map(|i| if i / 16 == i % 16 { 1.0 } else { 0.0 }).collect();
        store.get_mut("s2.attn.wv.w").unwrap().data_mut().copy_from_slice(&eye);
        store.get_mut("s2.attn.wo.w").unwrap().data_mut().copy_from_slice(&eye);
        zero(&mut store, "s2.attn.wv.b");
        zero(&mut store, "s2.attn.wo.b");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random(&mut rng, l, 8, 1.0);
        let per_image = random(&mut rng, l, 16, 1.0);
        let mut joint = vec![0.0; m * l * 16];
        for i in 0..m {
            for j in 0..l {
                joint[(i * l + j) * 16..(i * l + j + 1) * 16].copy_from_slice(per_image.row(j));
            }
        }
        let mut g = Graph::with_store(&store, None);
        let c = g.constant(ctx).unwrap();
        let q = system2::conjunction_query(&mut g, c).unwrap();
        let jv = g.constant(Tensor::matrix(m * l, 16, joint).unwrap()).unwrap();
        let (h, _) = system2::attend_and_gate(&mut g, &cfg, q, jv, m, l).unwrap();
        for (a, b) in values(&g, h).iter().zip(per_image.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn negation_loss_never_grows_with_divergence(seed in any::<u64>(), row in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = random(&mut rng, 3, 6, 1.0);
        let mut a = random(&mut rng, 3, 6, 1.0);
        let mut b = a.clone();
        let alt = random(&mut rng, 1, 6, 4.0);
        b.data_mut()[row * 6..(row + 1) * 6].copy_from_slice(alt.data());
        if kl(a.row(row), pos.row(row)) > kl(b.row(row), pos.row(row)) {
            std::mem::swap(&mut a, &mut b);
        }
        prop_assert!(negation_loss(&b, &pos, 0.2) <= negation_loss(&a, &pos, 0.2));
    }

    #[test]
    fn uniformity_is_nonnegative_and_scale_invariant(seed in any::<u64>(), m in 1usize..6, k in 0usize..6, s in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = random(&mut rng, m, 8, 1.0);
        let k = k % m;
        let mut scaled = slots.clone();
        scaled.data_mut()[k * 8..(k + 1) * 8].iter_mut().for_each(|v| *v *= s);
        let u = |t: Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(t).unwrap();
            let v = proposition::uniformity_loss(&mut g, x, 0.3).unwrap();
            g.value(v).item()
        };
        let (a, b) = (u(slots), u(scaled));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9);
    }
}
