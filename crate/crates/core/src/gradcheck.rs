//! Central finite-difference checks of reverse-mode gradients at 64-bit
//! precision, for arbitrary closures and for each block of the model.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{
    self, combiner, proposition, system1, system2, Arch, Inputs, LossConfig, ModelConfig, Ndcr,
};
use crate::params::{init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct CheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so that gradients
    /// near zero are compared in absolute terms.
    pub floor: f64,
    /// Entries probed per tensor; `None` probes all of them.
    pub max_entries: Option<usize>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
            max_entries: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst entry.
    pub worst: String,
    /// Entries compared.
    pub entries: usize,
    /// Entries whose probes crossed a ReLU kink, where a central difference
    /// is no oracle for the one-sided derivative.
    pub skipped: usize,
    pub tensors: usize,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compare the analytic gradient of the scalar built by `build` against
/// central differences, for every parameter the graph binds and every input.
/// Entries whose `+step` or `-step` evaluation flips any ReLU are counted as
/// skipped rather than compared.
///
/// `dropout_seed` switches the graph to training mode with an RNG that is
/// re-seeded identically for every evaluation, so dropout masks stay fixed.
pub fn check<F>(
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    dropout_seed: Option<u64>,
    sample_seed: u64,
    cfg: &CheckConfig,
    build: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::with_store(store, dropout_seed.map(ChaCha8Rng::seed_from_u64));
        let vars = inputs
            .iter()
            .map(|t| g.input(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.relu_pattern()))
    };

    let base_pattern;
    let (param_grads, input_grads) = {
        let mut g = Graph::with_store(store, dropout_seed.map(ChaCha8Rng::seed_from_u64));
        let vars = inputs
            .iter()
            .map(|t| g.input(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        base_pattern = g.relu_pattern();
        let params: Vec<(String, Tensor<f64>)> = g
            .bound_params()
            .into_iter()
            .map(|name| {
                let v = g.bound_var(&name).expect("bound");
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (name, t)
            })
            .collect();
        let ins: Vec<Tensor<f64>> = vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
            })
            .collect();
        (params, ins)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match cfg.max_entries {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };
    let mut out = CheckOutcome {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
        skipped: 0,
        tensors: param_grads.len() + input_grads.len(),
    };
    let mut record =
        |label: &str, idx: usize, a: f64, up: (f64, Vec<bool>), down: (f64, Vec<bool>)| {
            if up.1 != base_pattern || down.1 != base_pattern {
                out.skipped += 1;
                return;
            }
            let n = (up.0 - down.0) / (2.0 * cfg.step);
            let e = relative_error(a, n, cfg.floor);
            out.entries += 1;
            if e > out.max_rel_error || out.worst.is_empty() {
                out.max_rel_error = out.max_rel_error.max(e);
                out.worst = format!("{label}[{idx}] analytic {a:.6e} numeric {n:.6e}");
            }
        };

    for (name, grad) in &param_grads {
        for idx in pick(grad.len()) {
            let orig = store.require(name)?.data()[idx];
            store.get_mut(name).expect("present").data_mut()[idx] = orig + cfg.step;
            let up = eval(store, inputs);
            store.get_mut(name).expect("present").data_mut()[idx] = orig - cfg.step;
            let down = eval(store, inputs);
            store.get_mut(name).expect("present").data_mut()[idx] = orig;
            record(name, idx, grad.data()[idx], up?, down?);
        }
    }
    for (k, grad) in input_grads.iter().enumerate() {
        for idx in pick(grad.len()) {
            let orig = inputs[k].data()[idx];
            inputs[k].data_mut()[idx] = orig + cfg.step;
            let up = eval(store, inputs);
            inputs[k].data_mut()[idx] = orig - cfg.step;
            let down = eval(store, inputs);
            inputs[k].data_mut()[idx] = orig;
            record(&format!("input{k}"), idx, grad.data()[idx], up?, down?);
        }
    }
    Ok(out)
}

/// Blocks of the model checked in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Module {
    /// Proposition-image fusion.
    Fusion,
    /// Proposition parser.
    Parse,
    /// Proposition count head.
    Count,
    /// Fusion, contextual interactor, modifier and System-1 head.
    Interactor,
    /// Negation, joint representations and gated conjunction.
    Reasoner,
    /// Pooling and final fusion.
    Combiner,
    /// Matching, negational feedback and uniformity losses.
    Losses,
    /// Whole model with the total loss, dropout active, fusion scale 1.
    Model,
}

impl Module {
    pub const ALL: [Module; 8] = [
        Module::Fusion,
        Module::Parse,
        Module::Count,
        Module::Interactor,
        Module::Reasoner,
        Module::Combiner,
        Module::Losses,
        Module::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Fusion => "fusion",
            Module::Parse => "parse",
            Module::Count => "count",
            Module::Interactor => "interactor",
            Module::Reasoner => "reasoner",
            Module::Combiner => "combiner",
            Module::Losses => "losses",
            Module::Model => "model",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown module {s:?}")))
    }
}

/// Small model used by the module suite.
pub fn suite_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        reasoner_heads: 2,
        ..ModelConfig::default()
    }
}

const PROPS: usize = 3;
const CANDIDATES: usize = 4;
const TEXT_ROWS: usize = 5;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    init::normal(rng, rows, cols, std)
}

/// Fixed random projection of `x` to a scalar.
fn project(g: &mut Graph<'_, f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = g.constant(gaussian(rng, shape[0], shape[1], 1.0))?;
    let y = g.mul(x, r)?;
    g.sum(y, None)
}

/// Check one module at one seed.
pub fn run_module(module: Module, seed: u64, cfg: &CheckConfig) -> Result<CheckOutcome> {
    let model_cfg = suite_config();
    let ndcr = Ndcr::new(model_cfg.clone(), Arch::FULL)?;
    let mut store = ndcr.init_params::<f64>(seed)?;
    // Random non-trivial biases and norms so every term is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = store.names().to_vec();
    for name in &names {
        if name.ends_with(".b")
            || name.ends_with(".bias")
            || name.ends_with(".gain")
            || name.starts_with("comb.b")
        {
            let t = store.get_mut(name).expect("present");
            let noise = gaussian(&mut rng, t.rows(), t.cols(), 0.1);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }
    let (m, l, d) = (PROPS, CANDIDATES, model_cfg.d);
    let proj_seed = seed.wrapping_mul(31).wrapping_add(7);
    let loss_cfg = LossConfig::default();
    match module {
        Module::Fusion => {
            let mut inputs = vec![gaussian(&mut rng, m, d, 1.0), gaussian(&mut rng, l, d, 1.0)];
            check(&mut store, &mut inputs, None, seed, cfg, |g, v| {
                let fused = system1::fuse(g, v[0], v[1], model_cfg.lambda)?;
                project(g, fused, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            })
        }
        Module::Parse => {
            let mut inputs = vec![gaussian(&mut rng, TEXT_ROWS, d, 1.0)];
            check(&mut store, &mut inputs, None, seed, cfg, |g, v| {
                let slots = proposition::parse_propositions(g, &model_cfg, v[0])?;
                project(g, slots, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            })
        }
        Module::Count => {
            let mut inputs = vec![gaussian(&mut rng, TEXT_ROWS, d, 1.0)];
            check(&mut store, &mut inputs, None, seed, cfg, |g, v| {
                let logits = proposition::predict_count(g, v[0])?;
                let p = g.softmax(logits, 1)?;
                project(g, p, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            })
        }
        Module::Interactor => {
            let mut inputs = vec![
                gaussian(&mut rng, m, d, 1.0),
                gaussian(&mut rng, l, d, 1.0),
                gaussian(&mut rng, l, d, 1.0),
            ];
            // Fused tokens at unit scale: at 1000x the query/key curvature
            // outruns a 1e-4 central difference (the quotient converges to
            // the tape's value at 1e-6). Fusion is checked at full scale above.
            check(&mut store, &mut inputs, None, seed, cfg, |g, v| {
                let fused = system1::fuse(g, v[0], v[1], 1.0)?;
                let (h_p, ctx) =
                    system1::contextual_interact(g, &model_cfg, fused, Some(v[2]), m, l)?;
                let states = system1::modify(g, h_p, ctx.expect("context"), m, l)?;
                let p = system1::score(g, states, m, l)?;
                let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
                let a = project(g, p, &mut rng)?;
                let b = project(g, states, &mut rng)?;
                g.add(a, b)
            })
        }
        Module::Reasoner => {
            let mut inputs = vec![
                gaussian(&mut rng, m * l, d, 1.0),
                gaussian(&mut rng, m, l, 1.0),
                gaussian(&mut rng, l, d, 1.0),
                gaussian(&mut rng, l, d, 1.0),
            ];
            check(&mut store, &mut inputs, None, seed, cfg, |g, v| {
                let (states, p_s1, ctx, images) = (v[0], v[1], v[2], v[3]);
                let pos = system2::joint_representation(g, p_s1, states, images)?;
                let h_n = system2::negate(g, states)?;
                let p_n = system1::score(g, h_n, m, l)?;
                let neg = system2::joint_representation(g, p_n, h_n, images)?;
                let c = system2::conjunction(g, &model_cfg, ctx, pos, Some(neg), m, l)?;
                let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
                let a = project(g, c.h_f, &mut rng)?;
                let b = project(g, c.scores, &mut rng)?;
                let gates = g.concat(&[c.gate_pos, c.gate_neg.expect("negation")], 1)?;
                let e = project(g, gates, &mut rng)?;
                let s = g.add(a, b)?;
                g.add(s, e)
            })
        }
        Module::Combiner => {
            let mut inputs = vec![
                gaussian(&mut rng, l, d, 1.0),
                gaussian(&mut rng, m * l, d, 1.0),
                gaussian(&mut rng, m, l, 1.0),
                gaussian(&mut rng, 1, l, 1.0),
            ];
            check(&mut store, &mut inputs, None, seed, cfg, |g, v| {
                let hf_w = combiner::pool(g, v[0], 1, true)?;
                let h_w = combiner::pool(g, v[1], m, true)?;
                let c = combiner::combine(g, &model_cfg, hf_w, h_w, v[2], v[3], None)?;
                project(g, c.scores, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            })
        }
        Module::Losses => {
            // Correlated slots so the cosine hinge is active.
            let base = gaussian(&mut rng, 1, d, 1.0);
            let mut slots = gaussian(&mut rng, m, d, 0.4);
            for r in 0..m {
                for c in 0..d {
                    slots.data_mut()[r * d + c] += base.data()[c];
                }
            }
            // The negational term treats the positive logits as a fixed
            // target, so they enter as a constant, not a probed input.
            let target = gaussian(&mut rng, m, l, 0.3);
            let mut inputs = vec![
                slots,
                gaussian(&mut rng, m, l, 0.3),
                gaussian(&mut rng, m, l, 1.0),
                gaussian(&mut rng, 1, l, 1.0),
                gaussian(&mut rng, 1, l, 1.0),
            ];
            let gold = (seed as usize) % l;
            check(&mut store, &mut inputs, None, seed, cfg, |g, v| {
                let u = proposition::uniformity_loss(g, v[0], loss_cfg.tau)?;
                let pos = g.constant(target.clone())?;
                let n = system2::negation_feedback_loss(g, v[1], pos, loss_cfg.theta)?;
                let mut total = g.add(u, n)?;
                for &logits in &v[2..] {
                    let ce = model::cross_entropy(g, logits, gold)?;
                    total = g.add(total, ce)?;
                }
                Ok(total)
            })
        }
        Module::Model => {
            // With the parser upstream of a 1000x fusion, saturated
            // attention curves faster along the parser weights than a 1e-4
            // central difference resolves; on some seeds the quotient only
            // converges to the tape's value below a step of 1e-6. The blocks
            // are checked at full scale individually above.
            let ndcr = Ndcr::new(
                ModelConfig {
                    lambda: 1.0,
                    ..model_cfg.clone()
                },
                Arch::FULL,
            )?;
            let raw = Inputs {
                text: gaussian(&mut rng, TEXT_ROWS, d, 1.0),
                images: gaussian(&mut rng, l, d, 1.0),
                cross: gaussian(&mut rng, l, d, 1.0),
            };
            let gold = (seed as usize) % l;
            // The negational term's positive side is a stop-gradient target;
            // finite differences would move it, so it is pinned to its value
            // at the unperturbed parameters.
            let target = {
                let mut g = Graph::with_store(&store, Some(ChaCha8Rng::seed_from_u64(seed)));
                let fwd = ndcr.forward(&mut g, &raw, Some(m), None)?;
                g.value(fwd.p_s1).clone()
            };
            let no_neg = LossConfig {
                negation_weight: 0.0,
                ..loss_cfg.clone()
            };
            // Embeddings are frozen inputs; dropout is active with a fixed mask.
            check(&mut store, &mut [], Some(seed), seed, cfg, |g, _| {
                let fwd = ndcr.forward(g, &raw, Some(m), None)?;
                let losses = ndcr.losses(g, &fwd, gold, m, &no_neg)?;
                let pos = g.constant(target.clone())?;
                let p_neg = fwd.p_neg.expect("negation branch");
                let n = system2::negation_feedback_loss(g, p_neg, pos, loss_cfg.theta)?;
                g.add(losses.total, n)
            })
        }
    }
}
