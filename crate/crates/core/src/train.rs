//! SGD with momentum, the training loop, and the alpha/beta sweep.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::data::{self, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::model::{self, Kind, LossWeights, ModelSpec, ParamSet, Role};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-level loss weights; empty means all ones.
    pub loss_weights: Vec<f64>,
    pub seed: u64,
    /// Evaluate on the test split every n epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr_backbone: 0.01,
            lr_heads: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss_weights: Vec::new(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        // Zero learning rates are allowed so a run can be frozen.
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_heads", self.lr_heads)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn weights_for(&self, levels: usize) -> Result<LossWeights> {
        if self.loss_weights.is_empty() {
            Ok(LossWeights::ones(levels))
        } else if self.loss_weights.len() != levels {
            Err(Error::config(format!(
                "{} loss weights configured for {levels} levels",
                self.loss_weights.len()
            )))
        } else {
            LossWeights::new(self.loss_weights.clone())
        }
    }

    /// Applies one `key=value` setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_backbone" => self.lr_backbone = num(key, value)?,
            "lr_heads" => self.lr_heads = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "loss_weights" => {
                self.loss_weights = value
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, got `{line}`")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::parse(i + 1, format!("duplicate key `{k}`")));
            }
            cfg.set(k, v.trim()).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "lr_backbone={}", self.lr_backbone);
        let _ = writeln!(out, "lr_heads={}", self.lr_heads);
        let _ = writeln!(out, "momentum={}", self.momentum);
        let _ = writeln!(out, "weight_decay={}", self.weight_decay);
        if !self.loss_weights.is_empty() {
            let w: Vec<String> = self.loss_weights.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "loss_weights={}", w.join(","));
        }
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "eval_every={}", self.eval_every);
        out
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Vec<Tensor>);

impl Velocity {
    pub fn zeros(params: &ParamSet) -> Self {
        Velocity(
            params
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        )
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.0
    }
}

/// One momentum step on every parameter:
///
/// ```text
/// v <- momentum * v + g + weight_decay * p    (decay on weights only)
/// p <- p - lr * v                             (lr by backbone/head role)
/// ```
///
/// Shapes and finiteness are checked for all gradients before anything is
/// updated.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    cfg: &TrainConfig,
    velocity: &mut Velocity,
) -> Result<()> {
    if grads.len() != params.params().len() || velocity.0.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} gradients / {} velocities for {} parameters",
                grads.len(),
                velocity.0.len(),
                params.params().len()
            ),
        ));
    }
    for (p, g) in params.params().iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("gradient {:?} for `{}` {:?}", g.shape(), p.name, p.value.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
    }
    for ((p, g), v) in params.params_mut().iter_mut().zip(grads).zip(&mut velocity.0) {
        let lr = match p.role {
            Role::Backbone { .. } => cfg.lr_backbone,
            Role::Head { .. } => cfg.lr_heads,
        };
        let decay = match p.kind {
            Kind::Weight => cfg.weight_decay,
            Kind::Bias => 0.0,
        };
        for ((pv, gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = cfg.momentum * *vv + gv + decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Parameters plus the input normalization fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ParamSet,
    pub normalizer: Standardizer,
}

impl TrainedModel {
    pub fn predict(&self, raw: &Tensor) -> Result<Vec<crate::taxonomy::LabelChain>> {
        eval::predict(&self.params, &self.normalizer.apply(raw)?)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<Metrics> {
        let preds = self.predict(ds.features())?;
        eval::accuracy(&preds, &ds.chains(), ds.taxonomy())
    }

    pub fn to_checkpoint(&self) -> String {
        model::write_checkpoint(&self.params, &self.normalizer)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let (params, normalizer) = model::read_checkpoint(text)?;
        Ok(TrainedModel { params, normalizer })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    /// Weighted loss on the full training split before the first step.
    pub initial_train_loss: f64,
    pub history: Vec<EpochRecord>,
    pub final_metrics: Metrics,
}

impl TrainOutput {
    pub fn final_train_loss(&self) -> f64 {
        self.history.last().map_or(self.initial_train_loss, |r| r.train_loss)
    }
}

fn check_compatible(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    let tax = ds.taxonomy();
    if spec.level_sizes != tax.level_sizes() {
        return Err(Error::config(format!(
            "model levels {:?} do not match taxonomy levels {:?}",
            spec.level_sizes,
            tax.level_sizes()
        )));
    }
    if spec.input_dim != ds.dim() {
        return Err(Error::config(format!(
            "model input_dim {} but data has {} features",
            spec.input_dim,
            ds.dim()
        )));
    }
    Ok(())
}

fn as_divergence(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Trains one model.
///
/// Features are standardized with training-split statistics. `cfg.seed`
/// drives both initialization and shuffling (it replaces `spec.seed`).
pub fn train(spec: &ModelSpec, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_compatible(spec, train)?;
    check_compatible(spec, test)?;
    let weights = cfg.weights_for(spec.depth())?;

    let normalizer = Standardizer::fit(train.features());
    let train = train.with_features(normalizer.apply(train.features())?)?;
    let test = test.with_features(normalizer.apply(test.features())?)?;

    let mut spec = spec.clone();
    spec.seed = cfg.seed;
    let mut params = ParamSet::init(&spec)?;
    let mut velocity = Velocity::zeros(&params);
    let train_chains = train.chains();
    let test_chains = test.chains();

    let initial_train_loss = params
        .loss(train.features(), &train_chains, &weights)
        .map_err(|e| as_divergence(e, 0, 0))?;

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = data::batches(&train, cfg.batch_size, true, cfg.seed, epoch)?;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = params
                .loss_and_grads(&batch.features, &batch.chains, &weights)
                .map_err(|e| as_divergence(e, epoch, b))?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            sgd_step(&mut params, &grads, cfg, &mut velocity)
                .map_err(|e| as_divergence(e, epoch, b))?;
            total += loss;
        }
        let test_metrics = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let preds = eval::predict(&params, test.features())?;
            Some(eval::accuracy(&preds, &test_chains, test.taxonomy())?)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            test: test_metrics,
        });
    }

    let preds = eval::predict(&params, test.features())?;
    let final_metrics = eval::accuracy(&preds, &test_chains, test.taxonomy())?;
    Ok(TrainOutput {
        model: TrainedModel { params, normalizer },
        initial_train_loss,
        history,
        final_metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub coarse_acc: f64,
    pub fine_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub alpha: f64,
    pub beta: f64,
    pub seeds: usize,
    pub coarse_mean: f64,
    pub coarse_std: f64,
    pub fine_mean: f64,
    pub fine_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// One row per `(alpha, beta, seed)`, alpha-major then beta then seed.
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "alpha,beta,seed,coarse_acc,fine_acc";

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.alpha, r.beta, r.seed, r.coarse_acc, r.fine_acc
            );
        }
        out
    }

    pub fn cell(&self, alpha: f64, beta: f64) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.alpha == alpha && r.beta == beta)
            .collect()
    }

    /// Seed-aggregated statistics per `(alpha, beta)` in first-seen order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut keys: Vec<(f64, f64)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|&(a, b)| a == r.alpha && b == r.beta) {
                keys.push((r.alpha, r.beta));
            }
        }
        keys.into_iter()
            .map(|(alpha, beta)| {
                let rows = self.cell(alpha, beta);
                let coarse: Vec<f64> = rows.iter().map(|r| r.coarse_acc).collect();
                let fine: Vec<f64> = rows.iter().map(|r| r.fine_acc).collect();
                let (coarse_mean, coarse_std) = mean_std(&coarse);
                let (fine_mean, fine_std) = mean_std(&fine);
                CellSummary {
                    alpha,
                    beta,
                    seeds: rows.len(),
                    coarse_mean,
                    coarse_std,
                    fine_mean,
                    fine_std,
                }
            })
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from("alpha  beta   seeds  coarse_acc(%)      fine_acc(%)\n");
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{:<6} {:<6} {:<6} {:>6.2} +- {:<6.2}   {:>6.2} +- {:<6.2}",
                s.alpha,
                s.beta,
                s.seeds,
                100.0 * s.coarse_mean,
                100.0 * s.coarse_std,
                100.0 * s.fine_mean,
                100.0 * s.fine_std
            );
        }
        out
    }
}

/// Cells of an alpha/beta grid, alpha-major, seeds innermost.
pub fn grid(alphas: &[f64], betas: &[f64], seeds: &[u64]) -> Vec<(f64, f64, u64)> {
    let mut cells = Vec::with_capacity(alphas.len() * betas.len() * seeds.len());
    for &a in alphas {
        for &b in betas {
            for &s in seeds {
                cells.push((a, b, s));
            }
        }
    }
    cells
}

/// Two-level sweep where each seed may bring its own data.
///
/// `data_for_seed` is called once per cell; every cell trains an independent
/// model with loss weights `(alpha, beta)` and `cfg.seed = seed`.
pub fn sweep_alpha_beta_with<D>(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    seeds: &[u64],
    exec: Execution,
    data_for_seed: D,
) -> Result<SweepResult>
where
    D: Fn(u64) -> Result<(Dataset, Dataset)> + Sync + Send,
{
    if spec.depth() != 2 {
        return Err(Error::config(format!(
            "alpha/beta sweeps need a 2-level model, got {} levels",
            spec.depth()
        )));
    }
    let cells = grid(alphas, betas, seeds);
    let rows = par::map(exec, &cells, |&(alpha, beta, seed)| -> Result<SweepRow> {
        let (train_ds, test_ds) = data_for_seed(seed)?;
        let mut cell_cfg = cfg.clone();
        cell_cfg.loss_weights = vec![alpha, beta];
        cell_cfg.seed = seed;
        cell_cfg.eval_every = 0;
        let out = train(spec, &train_ds, &test_ds, &cell_cfg)?;
        Ok(SweepRow {
            alpha,
            beta,
            seed,
            coarse_acc: out.final_metrics.per_level_acc[0],
            fine_acc: out.final_metrics.per_level_acc[1],
        })
    });
    Ok(SweepResult {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// Sweep over fixed train/test data; seeds vary initialization and shuffling.
#[allow(clippy::too_many_arguments)]
pub fn sweep_alpha_beta(
    spec: &ModelSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    seeds: &[u64],
    exec: Execution,
) -> Result<SweepResult> {
    sweep_alpha_beta_with(spec, cfg, alphas, betas, seeds, exec, |_| {
        Ok((train_ds.clone(), test_ds.clone()))
    })
}
