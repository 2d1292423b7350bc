//! Gradient routing through the model variants, checked against central
//! finite differences and against per-loss backward runs.

use multigran::model::{Backbone, Gate, LossWeights, ModelSpec, ParamSet, Role, Variant};
use multigran::taxonomy::LabelChain;
use multigran::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .unwrap()
}

fn random_chains(sizes: &[usize], m: usize, rng: &mut ChaCha8Rng) -> Vec<LabelChain> {
    (0..m)
        .map(|_| LabelChain(sizes.iter().map(|&c| rng.random_range(0..c)).collect()))
        .collect()
}

fn spec(variant: Variant, d: usize, feat: usize, sizes: &[usize], seed: u64) -> ModelSpec {
    ModelSpec {
        variant,
        input_dim: d,
        backbone: Backbone::Mlp(vec![7]),
        feature_dim: feat,
        level_sizes: sizes.to_vec(),
        seed,
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over every scalar of every parameter. Gated segments are held at their
/// unperturbed values, which is the function backward differentiates.
fn max_fd_error(params: &ParamSet, x: &Tensor, chains: &[LabelChain], w: &LossWeights) -> f64 {
    let (_, grads) = params.loss_and_grads(x, chains, w).unwrap();
    let frozen = params.segment_values(x).unwrap();
    let gate = if params.spec().variant == Variant::Ours { Gate::Frozen(&frozen) } else { Gate::PassThrough };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.params_mut()[pi].value.data_mut()[j] += delta;
                p.loss_gated(x, chains, w, gate).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = g.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn every_variant_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in Variant::ALL {
        let sizes = [3, 5];
        let params = ParamSet::init(&spec(variant, 5, 8, &sizes, 2)).unwrap();
        let x = random(&[4, 5], &mut rng, 1.0);
        let chains = random_chains(&sizes, 4, &mut rng);
        let w = LossWeights::new(vec![0.7, 1.3]).unwrap();
        let err = max_fd_error(&params, &x, &chains, &w);
        assert!(err <= 1e-5, "{variant}: relative error {err}");
    }
}

#[test]
fn each_level_loss_touches_only_its_own_segment() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sizes = [2, 3, 4, 5];
    let k = sizes.len();
    let params = ParamSet::init(&spec(Variant::Ours, 6, 12, &sizes, 1)).unwrap();
    let x = random(&[6, 6], &mut rng, 1.0);
    let chains = random_chains(&sizes, 6, &mut rng);
    for level in 0..k {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = params.forward(&mut tape, &vars, xv).unwrap();
        let targets: Vec<usize> = chains.iter().map(|c| c.level(level)).collect();
        let ce = tape.softmax_cross_entropy(out.logits[level], &targets).unwrap();
        let grads = tape.backward(ce).unwrap();
        let gf = grads.get(out.features[0]);
        let w = 12 / k;
        for i in 0..6 {
            for (col, &v) in gf.row(i).iter().enumerate() {
                if col / w != level {
                    assert_eq!(v.to_bits(), 0.0f64.to_bits(), "level {level} leaks into column {col}");
                }
            }
        }
        assert!(gf.max_abs() > 0.0, "level {level} has no gradient on its own segment");

        // The head still learns from the gated columns it reads.
        let head = params.index_of(&format!("head{level}.weight")).unwrap();
        let gw = grads.get(vars[head]);
        let (rows, cols) = gw.dims2().unwrap();
        assert_eq!(rows, (k - level) * w);
        let gated_rows_nonzero = (w..rows).any(|r| (0..cols).any(|c| gw.data()[r * cols + c] != 0.0));
        if level + 1 < k {
            assert!(gated_rows_nonzero, "head{level} weights on gated inputs never update");
        }
    }
}

#[test]
fn shared_backbone_gradient_is_sum_of_per_level_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sizes = [2, 3, 4];
    let params = ParamSet::init(&spec(Variant::Ours, 5, 9, &sizes, 4)).unwrap();
    let x = random(&[5, 5], &mut rng, 1.0);
    let chains = random_chains(&sizes, 5, &mut rng);
    let (_, total) = params.loss_and_grads(&x, &chains, &LossWeights::ones(3)).unwrap();
    let mut summed: Vec<Tensor> = total.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for level in 0..3 {
        let mut w = vec![0.0; 3];
        w[level] = 1.0;
        let (_, g) = params.loss_and_grads(&x, &chains, &LossWeights::new(w).unwrap()).unwrap();
        for (acc, gi) in summed.iter_mut().zip(&g) {
            for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += v;
            }
        }
    }
    for (p, (a, b)) in params.params().iter().zip(total.iter().zip(&summed)) {
        if matches!(p.role, Role::Backbone { .. }) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{}", p.name);
            }
        }
    }
}

#[test]
fn gating_does_not_change_forward_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = ParamSet::init(&spec(Variant::Ours, 4, 6, &[3, 4], 5)).unwrap();
    let x = random(&[3, 4], &mut rng, 1.0);
    let run = |gate| {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = params.forward_gated(&mut tape, &vars, xv, gate).unwrap();
        out.logits.iter().map(|&l| tape.value(l).clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(Gate::StopGradient), run(Gate::PassThrough));
}

#[test]
fn single_level_variants_coincide() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[4, 5], &mut rng, 1.0);
    let chains = random_chains(&[6], 4, &mut rng);
    let reference = ParamSet::init(&spec(Variant::VanillaSingle, 5, 8, &[6], 3)).unwrap();
    let base_logits = reference.logits(&x).unwrap();
    let base_loss = reference.loss(&x, &chains, &LossWeights::ones(1)).unwrap();
    for variant in Variant::ALL {
        let p = ParamSet::init(&spec(variant, 5, 8, &[6], 3)).unwrap();
        assert_eq!(p.logits(&x).unwrap(), base_logits, "{variant}");
        assert_eq!(p.loss(&x, &chains, &LossWeights::ones(1)).unwrap().to_bits(), base_loss.to_bits());
    }
}

#[test]
fn logits_stay_finite_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for variant in Variant::ALL {
        let p = ParamSet::init(&spec(variant, 6, 6, &[2, 3, 6], 7)).unwrap();
        let x = random(&[8, 6], &mut rng, 1e3);
        assert!(p.logits(&x).unwrap().iter().all(Tensor::is_finite));
    }
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = ParamSet::init(&spec(Variant::Ours, 4, 6, &[2, 3], 9)).unwrap();
    let x = random(&[5, 4], &mut rng, 1.0);
    let chains = random_chains(&[2, 3], 5, &mut rng);
    let w = LossWeights::ones(2);
    let a = params.loss_and_grads(&x, &chains, &w).unwrap();
    let b = params.loss_and_grads(&x, &chains, &w).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

/// matmul → add_bias → relu → split, with odd segments gated, → concat →
/// linear → cross-entropy. Returns the loss and the gradient on `a`.
/// `frozen` replaces the gated segments with constants (for the numeric side).
struct Chain {
    b: Tensor,
    bias: Tensor,
    w: Tensor,
    k: usize,
    targets: Vec<usize>,
}

impl Chain {
    fn run(&self, a: &Tensor, frozen: Option<&[Tensor]>) -> (f64, Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(self.b.clone());
        let vbias = tape.leaf(self.bias.clone());
        let vw = tape.leaf(self.w.clone());
        let h = tape.matmul(va, vb).unwrap();
        let h = tape.add_bias(h, vbias).unwrap();
        let h = tape.relu(h).unwrap();
        let parts = tape.split(h, self.k).unwrap();
        let segments = parts.iter().map(|&v| tape.value(v).clone()).collect();
        let mixed: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, &s)| match (i % 2, frozen) {
                (1, Some(f)) => tape.leaf(f[i].clone()),
                (1, None) => tape.stop_gradient(s),
                _ => s,
            })
            .collect();
        let h = tape.concat(&mixed).unwrap();
        let logits = tape.matmul(h, vw).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &self.targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        (tape.value(loss).item().unwrap(), grads.get(va).clone(), segments)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_chain_matches_finite_differences(
        m in 1usize..5, n in 1usize..5, k in 1usize..4, c in 2usize..5, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 2 * k;
        let a = random(&[m, n], &mut rng, 1.0);
        let chain = Chain {
            b: random(&[n, p], &mut rng, 1.0),
            bias: random(&[p], &mut rng, 1.0),
            w: random(&[p, c], &mut rng, 1.0),
            k,
            targets: (0..m).map(|_| rng.random_range(0..c)).collect(),
        };
        let (_, analytic, segments) = chain.run(&a, None);

        let h = 1e-5;
        for j in 0..a.len() {
            let mut plus = a.clone();
            plus.data_mut()[j] += h;
            let mut minus = a.clone();
            minus.data_mut()[j] -= h;
            let numeric = (chain.run(&plus, Some(&segments)).0 - chain.run(&minus, Some(&segments)).0) / (2.0 * h);
            let an = analytic.data()[j];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-4);
            prop_assert!(rel <= 1e-5, "analytic {} numeric {}", an, numeric);
        }
    }
}
