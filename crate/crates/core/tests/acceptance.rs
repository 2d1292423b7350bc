//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use multigran::data::{gen_synthetic, SynthConfig};
use multigran::eval::{consistency_rate, Metrics};
use multigran::induce::{build_hierarchy, centroids, same_partition};
use multigran::model::{level_loss_gradients, Backbone, Gate, LossWeights, ModelSpec, ParamSet, Variant};
use multigran::par::Execution;
use multigran::seed;
use multigran::taxonomy::{balanced, LabelChain, Taxonomy};
use multigran::tensor::{Tape, Tensor};
use multigran::train::{mean_std, sgd_step, sweep_alpha_beta, SweepResult, TrainConfig, Velocity};
use rand::Rng;

/// Outcome of one criterion: pass flag and a short measurement summary.
type Outcome = (bool, String);

fn random_tensor(shape: &[usize], rng: &mut seed::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_chains(tax: &Taxonomy, m: usize, rng: &mut seed::Rng) -> Vec<LabelChain> {
    (0..m)
        .map(|_| tax.label_chain(rng.random_range(0..tax.finest_size())).unwrap())
        .collect()
}

fn small_ours(sizes: &[usize], d: usize, feat: usize) -> ModelSpec {
    ModelSpec {
        variant: Variant::Ours,
        input_dim: d,
        backbone: Backbone::Mlp(vec![d]),
        feature_dim: feat,
        level_sizes: sizes.to_vec(),
        seed: 1,
    }
}

fn ac1_gradient_oracle() -> Outcome {
    let sizes = [2, 3, 4];
    let mut rng = seed::rng(7, "acceptance.ac1");
    let params = ParamSet::init(&small_ours(&sizes, 6, 6)).unwrap();
    let x = random_tensor(&[5, 6], &mut rng);
    let chains: Vec<LabelChain> = (0..5)
        .map(|_| LabelChain(sizes.iter().map(|&c| rng.random_range(0..c)).collect()))
        .collect();
    let w = LossWeights::ones(3);

    let (_, grads) = params.loss_and_grads(&x, &chains, &w).unwrap();
    // stop-gradient segments are constants of the differentiated function
    let frozen = params.segment_values(&x).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.params_mut()[pi].value.data_mut()[j] += delta;
                p.loss_gated(&x, &chains, &w, Gate::Frozen(&frozen)).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = g.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst <= 1e-5, format!("{checked} scalars, max relative error {worst:.2e}"))
}

fn ac2_disentanglement() -> Outcome {
    let sizes = [4, 8, 16];
    let tax = balanced(&sizes).unwrap();
    let mut rng = seed::rng(7, "acceptance.ac2");
    let params = ParamSet::init(&ModelSpec::new(Variant::Ours, 20, sizes.to_vec())).unwrap();
    let x = random_tensor(&[16, 20], &mut rng);
    let chains = random_chains(&tax, 16, &mut rng);

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = params.forward(&mut tape, &vars, xv).unwrap();
    let coarse_logits = tape.value(out.logits[0]).clone();
    let grads = level_loss_gradients(&mut tape, &out, &chains, 0).unwrap();
    let gf = grads.get(out.features[0]);
    let seg = params.spec().feature_dim / sizes.len();
    let (rows, cols) = gf.dims2().unwrap();
    let mut leaks = 0;
    for r in 0..rows {
        for c in seg..cols {
            if gf.data()[r * cols + c].to_bits() != 0 {
                leaks += 1;
            }
        }
    }
    let own_nonzero = (0..rows).any(|r| gf.row(r)[..seg].iter().any(|&v| v != 0.0));

    let mut clone_tape = Tape::new();
    let vars = params.bind(&mut clone_tape);
    let xv = clone_tape.leaf(x);
    let clone = params.forward_gated(&mut clone_tape, &vars, xv, Gate::PassThrough).unwrap();
    let identical = clone_tape
        .value(clone.logits[0])
        .data()
        .iter()
        .zip(coarse_logits.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    (
        leaks == 0 && own_nonzero && identical,
        format!(
            "{leaks} non-zero entries in {} gated columns, own segment live: {own_nonzero}, forward bit-identical: {identical}",
            cols - seg
        ),
    )
}

fn ac3_single_level() -> Outcome {
    let tax = balanced(&[7]).unwrap();
    let mut rng = seed::rng(7, "acceptance.ac3");
    let x = random_tensor(&[9, 20], &mut rng);
    let chains = random_chains(&tax, 9, &mut rng);
    let w = LossWeights::ones(1);
    let run = |variant| {
        let p = ParamSet::init(&ModelSpec::new(variant, 20, vec![7])).unwrap();
        let logits = p.logits(&x).unwrap();
        let (loss, grads) = p.loss_and_grads(&x, &chains, &w).unwrap();
        (logits, loss.to_bits(), grads)
    };
    let base = run(Variant::VanillaSingle);
    let same = [Variant::OursSingle, Variant::Ours].into_iter().all(|v| run(v) == base);
    (same, format!("logits, loss and gradients bit-identical: {same}"))
}

/// Shared runs for the trend criteria: default data, default model, 30
/// epochs, seeds 0..5.
struct TrendRuns {
    vanilla: SweepResult,
    vanilla_fine_only: SweepResult,
    ours: SweepResult,
    elapsed: Duration,
}

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn trend_runs() -> TrendRuns {
    let start = Instant::now();
    let data = gen_synthetic(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let sweep = |variant, alphas: &[f64], betas: &[f64]| {
        let spec = ModelSpec::new(variant, data.train.dim(), vec![4, 16]);
        sweep_alpha_beta(&spec, &data.train, &data.test, &cfg, alphas, betas, &TREND_SEEDS, Execution::Auto)
            .unwrap()
    };
    TrendRuns {
        vanilla: sweep(Variant::VanillaSingle, &[1.0], &[0.0, 1.0]),
        vanilla_fine_only: sweep(Variant::VanillaSingle, &[0.0], &[1.0]),
        ours: sweep(Variant::Ours, &[1.0], &[1.0]),
        elapsed: start.elapsed(),
    }
}

/// Accuracies are multiples of 1/n_test; differences below this are
/// summation-order rounding, not a real gap.
const TIE: f64 = 1e-12;

fn column(result: &SweepResult, alpha: f64, beta: f64, fine: bool) -> Vec<f64> {
    result
        .cell(alpha, beta)
        .iter()
        .map(|r| if fine { r.fine_acc } else { r.coarse_acc })
        .collect()
}

fn ac4_coarse_trend(runs: &TrendRuns) -> Outcome {
    let (with_fine, _) = mean_std(&column(&runs.vanilla, 1.0, 1.0, false));
    let (alone, _) = mean_std(&column(&runs.vanilla, 1.0, 0.0, false));
    (
        with_fine >= alone - TIE,
        format!("mean coarse acc (1,1) {with_fine:.4} vs (1,0) {alone:.4}"),
    )
}

fn ac5_fine_trend(runs: &TrendRuns) -> Outcome {
    let (fine_only, _) = mean_std(&column(&runs.vanilla_fine_only, 0.0, 1.0, true));
    let (joint, _) = mean_std(&column(&runs.vanilla, 1.0, 1.0, true));
    (
        fine_only >= joint - TIE,
        format!("mean fine acc (0,1) {fine_only:.4} vs (1,1) {joint:.4}"),
    )
}

fn ac6_baseline_order(runs: &TrendRuns) -> Outcome {
    let avg = |result: &SweepResult| -> Vec<f64> {
        result
            .cell(1.0, 1.0)
            .iter()
            .map(|r| (r.coarse_acc + r.fine_acc) / 2.0)
            .collect()
    };
    let ours = avg(&runs.ours);
    let vanilla = avg(&runs.vanilla);
    let diffs: Vec<f64> = ours.iter().zip(&vanilla).map(|(a, b)| a - b).collect();
    let (mean_diff, sd) = mean_std(&diffs);
    let wins = diffs.iter().filter(|&&d| d > TIE).count();
    let losses = diffs.iter().filter(|&&d| d < -TIE).count();
    (
        mean_diff >= -TIE,
        format!(
            "mean avg_acc ours {:.4} vs vanilla_single {:.4}, paired diff {mean_diff:+.4} (sd {sd:.4}), wins/ties/losses {wins}/{}/{losses}",
            mean_std(&ours).0,
            mean_std(&vanilla).0,
            diffs.len() - wins - losses
        ),
    )
}

fn ac7_avg_acc() -> Outcome {
    let m = Metrics::from_level_accs(vec![0.9538, 0.8770, 0.7424], 1.0, 1);
    ((m.avg_acc - 0.8577).abs() <= 5e-5, format!("avg_acc {:.6}", m.avg_acc))
}

fn ac8_taxonomy_files() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("taxonomies");
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, shape) in [
        ("cub_13_38_200.txt", vec![13, 38, 200]),
        ("aircraft_30_70_100.txt", vec![30, 70, 100]),
        ("cars_9_196.txt", vec![9, 196]),
    ] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        let good = match Taxonomy::parse(&text) {
            Ok(t) => t.level_sizes() == shape && t.validate().is_ok() && t.to_file_string() == text,
            Err(_) => false,
        };
        ok &= good;
        notes.push(format!("{name} {}", if good { "ok" } else { "bad" }));
    }
    (ok, notes.join(", "))
}

fn ac9_induction() -> Outcome {
    let mut recovered = 0;
    let seeds = [0u64, 1, 2];
    for &s in &seeds {
        let cfg = SynthConfig {
            noise: 0.1 * SynthConfig::default().s_fine,
            seed: s,
            ..SynthConfig::default()
        };
        let data = gen_synthetic(&cfg).unwrap();
        let induced = build_hierarchy(&centroids(&data.train, None).unwrap(), &[4]).unwrap();
        let truth = data.taxonomy.as_ref();
        let groups = |t: &Taxonomy| -> Vec<usize> {
            truth
                .names(1)
                .iter()
                .map(|n| t.parent(1, t.index_of(1, n).unwrap()).unwrap())
                .collect()
        };
        if same_partition(&groups(&induced), &groups(truth)) {
            recovered += 1;
        }
    }
    (recovered == seeds.len(), format!("{recovered}/{} seeds recover the coarse partition", seeds.len()))
}

fn ac10_momentum() -> Outcome {
    let spec = ModelSpec {
        variant: Variant::VanillaSingle,
        input_dim: 1,
        backbone: Backbone::Identity,
        feature_dim: 1,
        level_sizes: vec![1],
        seed: 0,
    };
    let mut params = ParamSet::init(&spec).unwrap();
    let (p0, g, lr) = (0.75, 0.3, 0.05);
    params.params_mut()[0].value = Tensor::matrix(1, 1, vec![p0]).unwrap();
    let cfg = TrainConfig {
        lr_backbone: lr,
        lr_heads: lr,
        momentum: 0.9,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let grads: Vec<Tensor> = params
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| if i == 0 { Tensor::full(p.value.shape(), g) } else { Tensor::zeros(p.value.shape()) })
        .collect();
    let mut velocity = Velocity::zeros(&params);
    sgd_step(&mut params, &grads, &cfg, &mut velocity).unwrap();
    sgd_step(&mut params, &grads, &cfg, &mut velocity).unwrap();
    let p2 = params.params()[0].value.data()[0];

    let (v1, v2) = (g, 0.9 * g + g);
    let unrolled = (p0 - lr * v1) - lr * v2;
    let change = p0 - p2;
    let exact = p2.to_bits() == unrolled.to_bits();
    let close = (change - 2.9 * lr * g).abs() <= 1e-15;
    (exact && close, format!("change {change:.17} vs 2.9*lr*g {:.17}, matches unrolled bits: {exact}", 2.9 * lr * g))
}

fn ac11_consistency() -> Outcome {
    let tax = balanced(&[2, 4]).unwrap();
    let mut consistent = 0usize;
    let total = tax.level_size(0) * tax.level_size(1);
    for c in 0..tax.level_size(0) {
        for f in 0..tax.level_size(1) {
            if tax.is_consistent(&LabelChain(vec![c, f])) {
                consistent += 1;
            }
        }
    }
    let expected = consistent as f64 / total as f64;

    let n = 10_000;
    let mut rng = seed::rng(7, "acceptance.ac11");
    let preds: Vec<LabelChain> = (0..n)
        .map(|_| LabelChain(vec![rng.random_range(0..2), rng.random_range(0..4)]))
        .collect();
    let rate = consistency_rate(&preds, &tax).unwrap();
    let se = (expected * (1.0 - expected) / n as f64).sqrt();
    (
        (rate - expected).abs() <= 3.0 * se,
        format!("rate {rate:.4}, enumerated expectation {expected}, 3 SE = {:.4}", 3.0 * se),
    )
}

fn report(id: &str, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let (ok, detail) = f();
    let took = start.elapsed();
    finish(id, title, budget, ok, detail, took)
}

fn finish(id: &str, title: &str, budget: Duration, ok: bool, detail: String, took: Duration) -> bool {
    let in_time = took <= budget;
    let pass = ok && in_time;
    let tag = if pass { "PASS" } else { "FAIL" };
    let timing = if in_time {
        format!("{:.2}s", took.as_secs_f64())
    } else {
        format!("{:.2}s, over the {:.0}s budget", took.as_secs_f64(), budget.as_secs_f64())
    };
    println!("[{tag}] {id} {title}: {detail} ({timing})");
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = vec![
        report("AC1", "gradient oracle", secs(5), ac1_gradient_oracle),
        report("AC2", "exact disentanglement", secs(1), ac2_disentanglement),
        report("AC3", "single-level degeneracy", secs(1), ac3_single_level),
    ];

    let runs = trend_runs();
    let trend_time = runs.elapsed;
    println!("       trend runs: 20 trainings in {:.1}s", trend_time.as_secs_f64());
    let (ok, detail) = ac4_coarse_trend(&runs);
    results.push(finish("AC4", "coarse accuracy with fine supervision", secs(600), ok, detail, trend_time));
    let (ok, detail) = ac5_fine_trend(&runs);
    results.push(finish("AC5", "fine accuracy without coarse supervision", secs(600), ok, detail, trend_time));
    let (ok, detail) = ac6_baseline_order(&runs);
    results.push(finish("AC6", "ours vs vanilla_single", secs(900), ok, detail, trend_time));

    results.push(report("AC7", "avg_acc arithmetic", secs(1), ac7_avg_acc));
    results.push(report("AC8", "taxonomy sample files", secs(1), ac8_taxonomy_files));
    results.push(report("AC9", "hierarchy induction recovery", secs(30), ac9_induction));
    results.push(report("AC10", "momentum unroll", secs(1), ac10_momentum));
    results.push(report("AC11", "consistency rate of random predictions", secs(5), ac11_consistency));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
