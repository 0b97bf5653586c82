use ndcr::params::init;
use ndcr::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone(), true).unwrap())
        .collect();
    let out = build(&mut g, &vars);
    g.value(out).item()
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-3) over
/// every input entry, using central differences of width 2e-4.
fn max_rel_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone(), true).unwrap())
        .collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += h;
            let up = eval(&probe, build);
            probe[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&probe, build);
            let n = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3));
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
    )
    .unwrap()
}

/// Values kept away from zero so a ReLU never sits on its kink.
fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduce a matrix to a scalar through fixed random weights so every entry
/// of the gradient is exercised.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, shape[0], shape[1]);
    let w = g.constant(w).unwrap();
    let y = g.mul(x, w).unwrap();
    g.sum(y, None).unwrap()
}

#[test]
fn softmax_of_two_zeros_is_half() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 2]), false).unwrap();
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 1]), true).unwrap();
    let s = g.sigmoid(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.25);
}

#[test]
fn two_layer_perceptron_parameters_match_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, din, hidden, dout) = (4, 5, 7, 3);
        let mut store = ParamStore::<f64>::new();
        store
            .insert("l1.w", init::xavier(&mut rng, din, hidden))
            .unwrap();
        store.insert("l1.b", random(&mut rng, 1, hidden)).unwrap();
        store
            .insert("l2.w", init::xavier(&mut rng, hidden, dout))
            .unwrap();
        store.insert("l2.b", random(&mut rng, 1, dout)).unwrap();
        let x = random(&mut rng, n, din);
        let names = ["l1.w", "l1.b", "l2.w", "l2.b"];

        let forward = |store: &ParamStore<f64>| -> (f64, Vec<Tensor<f64>>, Vec<bool>) {
            let mut g = Graph::with_store(store, None);
            let xi = g.constant(x.clone()).unwrap();
            let w1 = g.param("l1.w").unwrap();
            let b1 = g.param("l1.b").unwrap();
            let w2 = g.param("l2.w").unwrap();
            let b2 = g.param("l2.b").unwrap();
            let h = g.matmul(xi, w1).unwrap();
            let h = g.add(h, b1).unwrap();
            let pre = g.value(h).data().iter().map(|&v| v > 0.0).collect();
            let h = g.relu(h).unwrap();
            let y = g.matmul(h, w2).unwrap();
            let y = g.add(y, b2).unwrap();
            let loss = project(&mut g, y, 99);
            let grads = g.backward(loss).unwrap();
            let per: Vec<Tensor<f64>> = [w1, b1, w2, b2]
                .iter()
                .map(|&v| grads.get(v).unwrap().clone())
                .collect();
            (g.value(loss).item(), per, pre)
        };

        let (_, analytic, base_pattern) = forward(&store);
        let mut worst = 0.0f64;
        let h = 1e-4;
        for (k, name) in names.iter().enumerate() {
            for j in 0..store.get(name).unwrap().len() {
                let mut up = store.clone();
                up.get_mut(name).unwrap().data_mut()[j] += h;
                let mut down = store.clone();
                down.get_mut(name).unwrap().data_mut()[j] -= h;
                let (lu, _, pu) = forward(&up);
                let (ld, _, pd) = forward(&down);
                if pu != base_pattern || pd != base_pattern {
                    continue;
                }
                let n = (lu - ld) / (2.0 * h);
                let a = analytic[k].data()[j];
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3));
            }
        }
        assert!(worst <= 1e-4, "seed {seed}: max relative error {worst:e}");
    }
}

fn shape() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_ops_match_finite_differences((r, c, seed) in shape()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![off_kink(&mut rng, r, c), random(&mut rng, r, c)];
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.relu(v[0]).unwrap();
            let b = g.sigmoid(v[1]).unwrap();
            let t = g.tanh(v[0]).unwrap();
            let p = g.mul(a, b).unwrap();
            let q = g.sub(p, t).unwrap();
            let s = g.affine(q, 1.7, -0.3).unwrap();
            let s = g.add(s, v[1]).unwrap();
            project(g, s, 1)
        };
        prop_assert!(max_rel_error(&inputs, &build) <= 1e-4);
    }

    #[test]
    fn matmul_and_transpose_match_finite_differences((r, c, seed) in shape(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, r, k), random(&mut rng, c, k)];
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let bt = g.transpose(v[1]).unwrap();
            let y = g.matmul(v[0], bt).unwrap();
            project(g, y, 2)
        };
        prop_assert!(max_rel_error(&inputs, &build) <= 1e-4);
    }

    #[test]
    fn softmax_family_matches_finite_differences((r, c, seed) in shape(), axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, r, c)];
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.softmax(v[0], axis).unwrap();
            let l = g.log_softmax(v[0], axis).unwrap();
            let y = g.add(s, l).unwrap();
            project(g, y, 3)
        };
        prop_assert!(max_rel_error(&inputs, &build) <= 1e-4);
    }

    #[test]
    fn normalizations_match_finite_differences((r, c, seed) in (1usize..5, 2usize..6, any::<u64>())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, r, c)];
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.layer_norm(v[0], 1e-5).unwrap();
            let b = g.l2_normalize(v[0]).unwrap();
            let y = g.add(a, b).unwrap();
            project(g, y, 4)
        };
        prop_assert!(max_rel_error(&inputs, &build) <= 1e-4);
    }

    #[test]
    fn reshaping_ops_match_finite_differences((r, c, seed) in (2usize..5, 1usize..5, any::<u64>())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, r, c), random(&mut rng, r, c)];
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let cat = g.concat(&[v[0], v[1]], 1).unwrap();
            let stacked = g.concat(&[v[0], v[1]], 0).unwrap();
            let picked = g.gather_rows(stacked, &[r, 0, r, 1]).unwrap();
            let sliced = g.slice_rows(cat, 1, r).unwrap();
            let flat = g.reshape(sliced, 1, (r - 1) * 2 * c).unwrap();
            let s1 = project(g, flat, 5);
            let s2 = project(g, picked, 6);
            let colsum = g.sum(cat, Some(0)).unwrap();
            let rowmean = g.mean(stacked, Some(1)).unwrap();
            let s3 = project(g, colsum, 7);
            let s4 = project(g, rowmean, 8);
            let a = g.add(s1, s2).unwrap();
            let b = g.add(s3, s4).unwrap();
            g.add(a, b).unwrap()
        };
        prop_assert!(max_rel_error(&inputs, &build) <= 1e-4);
    }

    #[test]
    fn grouped_attention_matches_finite_differences(
        seed in any::<u64>(), heads in 1usize..3, groups in 1usize..3, nq in 1usize..3, nk in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = 2 * heads;
        let inputs = vec![
            random(&mut rng, groups * nq, width),
            random(&mut rng, groups * nk, width),
            random(&mut rng, groups * nk, width),
        ];
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.attention(v[0], v[1], v[2], heads, groups).unwrap();
            project(g, y, 9)
        };
        prop_assert!(max_rel_error(&inputs, &build) <= 1e-4);
    }

    #[test]
    fn softmax_rows_are_positive_and_normalized((r, c, seed) in shape(), spread in 0.1f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, r, c).map(|v| v * spread);
        let mut g = Graph::<f64>::new();
        let xi = g.input(x, false).unwrap();
        for axis in 0..2 {
            let s = g.softmax(xi, axis).unwrap();
            let sums = g.sum(s, Some(axis)).unwrap();
            prop_assert!(g.value(s).data().iter().all(|&p| p > 0.0));
            prop_assert!(g.value(sums).data().iter().all(|&t| (t - 1.0).abs() <= 1e-6));
        }
    }

    #[test]
    fn dropout_is_identity_at_eval_and_rate_zero((r, c, seed) in shape()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, r, c);
        let mut eval = Graph::<f64>::new();
        let xi = eval.input(x.clone(), false).unwrap();
        let y = eval.dropout(xi, 0.5).unwrap();
        prop_assert_eq!(eval.value(y), &x);

        let store = ParamStore::<f64>::new();
        let mut train = Graph::with_store(&store, Some(ChaCha8Rng::seed_from_u64(seed)));
        let xi = train.input(x.clone(), false).unwrap();
        let y = train.dropout(xi, 0.0).unwrap();
        prop_assert_eq!(train.value(y), &x);
    }
}

#[test]
fn attention_matches_a_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (nq, nk, width, heads) = (2, 3, 4, 2);
    let q = random(&mut rng, nq, width);
    let k = random(&mut rng, nk, width);
    let v = random(&mut rng, nk, width);
    let mut g = Graph::<f64>::new();
    let (qi, ki, vi) = (
        g.input(q.clone(), false).unwrap(),
        g.input(k.clone(), false).unwrap(),
        g.input(v.clone(), false).unwrap(),
    );
    let out = g.attention(qi, ki, vi, heads, 1).unwrap();
    let dh = width / heads;
    for h in 0..heads {
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..dh)
                        .map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..dh {
                let expect: f64 = (0..nk)
                    .map(|j| logits[j].exp() / z * v.get(j, h * dh + c))
                    .sum();
                assert!((g.value(out).get(i, h * dh + c) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn same_graph_twice_is_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 6, 8).cast::<f32>();
        let store = ParamStore::<f32>::new();
        let mut g = Graph::with_store(&store, Some(ChaCha8Rng::seed_from_u64(3)));
        let xi = g.input(x, true).unwrap();
        let a = g.attention(xi, xi, xi, 2, 2).unwrap();
        let a = g.dropout(a, 0.3).unwrap();
        let n = g.layer_norm(a, 1e-5).unwrap();
        let s = g.sum(n, None).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(n).clone(), grads.get(xi).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&ga), bits(&gb));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g
        .input(Tensor::from_f64(&[1, 1], &[1e200]).unwrap(), false)
        .unwrap();
    let y = g.mul(x, x);
    assert!(matches!(y, Err(ndcr::Error::NonFinite { .. })));
}
