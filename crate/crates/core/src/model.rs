//! Backbone, per-level heads and the four architecture variants.
//!
//! All variants share the same building blocks: an MLP backbone producing an
//! embedding `f` of width `D` and one linear head per level. They differ only
//! in what each head reads:
//!
//! | variant          | head `k` input                                    |
//! |------------------|---------------------------------------------------|
//! | `vanilla_single` | `f`                                               |
//! | `vanilla_multi`  | `f` of the level's own backbone                   |
//! | `ours_single`    | segment `f_k`                                     |
//! | `ours`           | `concat(f_k, sg(f_{k+1}), ..., sg(f_K))`          |
//!
//! where `sg` is [`Tape::stop_gradient`]. Segment `f_0` belongs to the
//! coarsest level.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::seed;
use crate::taxonomy::LabelChain;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    VanillaSingle,
    VanillaMulti,
    OursSingle,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::VanillaSingle,
        Variant::VanillaMulti,
        Variant::OursSingle,
        Variant::Ours,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::VanillaSingle => "vanilla_single",
            Variant::VanillaMulti => "vanilla_multi",
            Variant::OursSingle => "ours_single",
            Variant::Ours => "ours",
        }
    }

    fn splits_features(self) -> bool {
        matches!(self, Variant::OursSingle | Variant::Ours)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant `{s}` (expected vanilla_single, vanilla_multi, ours_single or ours)"
                ))
            })
    }
}

/// Backbone architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    /// `f = x`; requires `input_dim == feature_dim`.
    Identity,
    /// Linear + ReLU per hidden width, then a linear map to `feature_dim`.
    Mlp(Vec<usize>),
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::Identity => f.write_str("identity"),
            Backbone::Mlp(h) => {
                let widths: Vec<String> = h.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", widths.join(","))
            }
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(Backbone::Identity);
        }
        let widths = s
            .strip_prefix("mlp:")
            .ok_or_else(|| Error::config(format!("unknown backbone `{s}`")))?;
        if widths.is_empty() {
            return Ok(Backbone::Mlp(Vec::new()));
        }
        widths
            .split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad hidden width `{w}`")))
            })
            .collect::<Result<_>>()
            .map(Backbone::Mlp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_dim: usize,
    pub backbone: Backbone,
    pub feature_dim: usize,
    pub level_sizes: Vec<usize>,
    pub seed: u64,
}

impl ModelSpec {
    /// Desk-scale defaults: two hidden layers of 128 and a 600-wide embedding.
    pub fn new(variant: Variant, input_dim: usize, level_sizes: Vec<usize>) -> Self {
        ModelSpec {
            variant,
            input_dim,
            backbone: Backbone::Mlp(vec![128, 128]),
            feature_dim: 600,
            level_sizes,
            seed: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.depth();
        if k == 0 {
            return Err(Error::config("model needs at least one level"));
        }
        if self.level_sizes.contains(&0) || self.input_dim == 0 || self.feature_dim == 0 {
            return Err(Error::config("dimensions and level sizes must be positive"));
        }
        match &self.backbone {
            Backbone::Identity if self.input_dim != self.feature_dim => {
                return Err(Error::config(format!(
                    "identity backbone needs input_dim == feature_dim ({} vs {})",
                    self.input_dim, self.feature_dim
                )))
            }
            Backbone::Mlp(h) if h.contains(&0) => {
                return Err(Error::config("hidden widths must be positive"))
            }
            _ => {}
        }
        if self.variant.splits_features() && !self.feature_dim.is_multiple_of(k) {
            return Err(Error::config(format!(
                "{} needs feature_dim divisible by the level count ({} % {k} != 0)",
                self.variant, self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn backbone_count(&self) -> usize {
        match self.variant {
            Variant::VanillaMulti => self.depth(),
            _ => 1,
        }
    }

    /// Input width of head `level`.
    pub fn head_input_width(&self, level: usize) -> usize {
        let k = self.depth();
        let d = self.feature_dim;
        match self.variant {
            Variant::VanillaSingle | Variant::VanillaMulti => d,
            Variant::OursSingle => d / k,
            Variant::Ours => (k - level) * (d / k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Backbone { net: usize },
    Head { level: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub kind: Kind,
    pub value: Tensor,
}

/// A linear layer's `(weight, bias)` parameter indices.
#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

/// Trainable parameters of one model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    spec: ModelSpec,
    params: Vec<Param>,
}

fn layer_shapes(spec: &ModelSpec) -> Vec<(String, Role, usize, usize)> {
    let mut shapes = Vec::new();
    for net in 0..spec.backbone_count() {
        if let Backbone::Mlp(hidden) = &spec.backbone {
            let mut fan_in = spec.input_dim;
            for (i, &h) in hidden.iter().chain([&spec.feature_dim]).enumerate() {
                shapes.push((
                    format!("backbone{net}.layer{i}"),
                    Role::Backbone { net },
                    fan_in,
                    h,
                ));
                fan_in = h;
            }
        }
    }
    for (level, &c) in spec.level_sizes.iter().enumerate() {
        shapes.push((
            format!("head{level}"),
            Role::Head { level },
            spec.head_input_width(level),
            c,
        ));
    }
    shapes
}

impl ParamSet {
    /// Xavier-uniform weights, zero biases; deterministic in `spec.seed`.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(spec.seed, "init");
        let mut params = Vec::new();
        for (name, role, fan_in, fan_out) in layer_shapes(spec) {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            params.push(Param {
                name: format!("{name}.weight"),
                role,
                kind: Kind::Weight,
                value: Tensor::matrix(fan_in, fan_out, w)?,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                role,
                kind: Kind::Bias,
                value: Tensor::zeros(&[fan_out]),
            });
        }
        Ok(ParamSet {
            spec: spec.clone(),
            params,
        })
    }

    /// Rebuilds a set from named tensors, checking names and shapes.
    pub fn from_tensors(spec: &ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParamSet::init(spec)?;
        if tensors.len() != set.params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                set.params.len(),
                tensors.len()
            )));
        }
        for (p, (name, t)) in set.params.iter_mut().zip(tensors) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(set)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn layers(&self) -> (Vec<Vec<Linear>>, Vec<Linear>) {
        let mut nets = vec![Vec::new(); self.spec.backbone_count()];
        let mut heads = Vec::with_capacity(self.spec.depth());
        for (i, pair) in self.params.chunks(2).enumerate() {
            let lin = Linear {
                weight: 2 * i,
                bias: 2 * i + 1,
            };
            match pair[0].role {
                Role::Backbone { net } => nets[net].push(lin),
                Role::Head { .. } => heads.push(lin),
            }
        }
        (nets, heads)
    }

    /// Records every parameter as a leaf; returns vars in parameter order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    fn linear(tape: &mut Tape, vars: &[Var], lin: Linear, x: Var) -> Result<Var> {
        let z = tape.matmul(x, vars[lin.weight])?;
        tape.add_bias(z, vars[lin.bias])
    }

    /// `f = F(x)` for backbone `net`.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        net: usize,
        x: Var,
    ) -> Result<Var> {
        let (nets, _) = self.layers();
        let width = tape.value(x).dims2().map(|(_, c)| c);
        if width != Some(self.spec.input_dim) {
            return Err(Error::shape(
                "backbone",
                format!(
                    "input {:?} does not match input_dim {}",
                    tape.value(x).shape(),
                    self.spec.input_dim
                ),
            ));
        }
        let layers = nets.get(net).ok_or(Error::OutOfRange {
            what: "backbone",
            index: net,
            limit: nets.len(),
        })?;
        let mut h = x;
        for (i, &lin) in layers.iter().enumerate() {
            h = Self::linear(tape, vars, lin, h)?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<ForwardOutput> {
        self.forward_gated(tape, vars, x, Gate::StopGradient)
    }

    /// Forward pass with an explicit gate on the finer segments fed to
    /// coarser heads. [`Gate::PassThrough`] gives the ungated clone used to
    /// check that gating leaves forward values untouched.
    pub fn forward_gated(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        gate: Gate<'_>,
    ) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        let (_, heads) = self.layers();
        let k = self.spec.depth();
        let mut features = Vec::with_capacity(self.spec.backbone_count());
        for net in 0..self.spec.backbone_count() {
            features.push(self.backbone_forward(tape, vars, net, x)?);
        }

        let mut segments = Vec::new();
        let head_inputs: Vec<Var> = match self.spec.variant {
            Variant::VanillaSingle => vec![features[0]; k],
            Variant::VanillaMulti => features.clone(),
            Variant::OursSingle => {
                segments = tape.split(features[0], k)?;
                segments.clone()
            }
            Variant::Ours => {
                segments = tape.split(features[0], k)?;
                let gated: Vec<Var> = match gate {
                    Gate::Frozen(values) if values.len() != k => {
                        return Err(Error::shape(
                            "forward",
                            format!("{} frozen segments for {k} levels", values.len()),
                        ))
                    }
                    Gate::Frozen(values) => values.iter().map(|v| tape.leaf(v.clone())).collect(),
                    Gate::StopGradient => segments.iter().map(|&s| tape.stop_gradient(s)).collect(),
                    Gate::PassThrough => segments.clone(),
                };
                let mut inputs = Vec::with_capacity(k);
                for level in 0..k {
                    if level + 1 == k {
                        inputs.push(segments[level]);
                    } else {
                        let mut parts = vec![segments[level]];
                        parts.extend_from_slice(&gated[level + 1..]);
                        inputs.push(tape.concat(&parts)?);
                    }
                }
                inputs
            }
        };

        let logits = heads
            .iter()
            .zip(head_inputs)
            .map(|(&lin, input)| Self::linear(tape, vars, lin, input))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            features,
            segments,
            logits,
        })
    }

    /// Logits per level for a batch, without keeping the tape.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(out.logits.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Weighted loss and its gradient for every parameter, in parameter order.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        chains: &[LabelChain],
        weights: &LossWeights,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        let loss = total_loss(&mut tape, &out.logits, chains, weights)?;
        let value = tape.value(loss).item().expect("scalar loss");
        let mut grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
    }

    pub fn loss(&self, x: &Tensor, chains: &[LabelChain], weights: &LossWeights) -> Result<f64> {
        self.loss_gated(x, chains, weights, Gate::StopGradient)
    }

    pub fn loss_gated(
        &self,
        x: &Tensor,
        chains: &[LabelChain],
        weights: &LossWeights,
        gate: Gate<'_>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward_gated(&mut tape, &vars, xv, gate)?;
        let loss = total_loss(&mut tape, &out.logits, chains, weights)?;
        Ok(tape.value(loss).item().expect("scalar loss"))
    }

    /// Per-level segment values of the shared embedding (`ours` and
    /// `ours_single`; empty otherwise), for use with [`Gate::Frozen`].
    pub fn segment_values(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(out.segments.iter().map(|&s| tape.value(s).clone()).collect())
    }
}

/// How `ours` feeds the finer segments to coarser heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate<'a> {
    StopGradient,
    PassThrough,
    /// Gated positions read these constant segments instead (one per level).
    /// Perturbing parameters then leaves them fixed, so finite differences
    /// of this loss match what backward computes through stop-gradient.
    Frozen(&'a [Tensor]),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Embedding of each backbone (one unless `vanilla_multi`).
    pub features: Vec<Var>,
    /// Per-level segments of `features[0]`; empty for the vanilla variants.
    pub segments: Vec<Var>,
    pub logits: Vec<Var>,
}

/// Non-negative per-level loss weights, not all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("loss weights are empty"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::config("loss weights are all zero"));
        }
        Ok(LossWeights(weights))
    }

    pub fn ones(k: usize) -> Self {
        LossWeights(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Σ_k w_k · CE(logits_k, y^k)`. Zero-weight terms are left off the tape.
pub fn total_loss(
    tape: &mut Tape,
    logits: &[Var],
    chains: &[LabelChain],
    weights: &LossWeights,
) -> Result<Var> {
    if weights.len() != logits.len() {
        return Err(Error::config(format!(
            "{} loss weights for {} levels",
            weights.len(),
            logits.len()
        )));
    }
    if let Some(c) = chains.iter().find(|c| c.depth() != logits.len()) {
        return Err(Error::shape(
            "total_loss",
            format!("label chain of depth {} for {} levels", c.depth(), logits.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (level, (&l, &w)) in logits.iter().zip(weights.as_slice()).enumerate() {
        if w == 0.0 {
            continue;
        }
        let targets: Vec<usize> = chains.iter().map(|c| c.level(level)).collect();
        let ce = tape.softmax_cross_entropy(l, &targets)?;
        let term = if w == 1.0 { ce } else { tape.scale(ce, w)? };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("weights validated non-zero"))
}

/// Gradient of a single level's cross-entropy with respect to every tape node.
pub fn level_loss_gradients(
    tape: &mut Tape,
    out: &ForwardOutput,
    chains: &[LabelChain],
    level: usize,
) -> Result<Gradients> {
    let targets: Vec<usize> = chains.iter().map(|c| c.level(level)).collect();
    let ce = tape.softmax_cross_entropy(out.logits[level], &targets)?;
    tape.backward(ce)
}

const CHECKPOINT_MAGIC: &str = "multigran-checkpoint 1";

/// Serializes parameters and input normalization as text.
///
/// ```text
/// multigran-checkpoint 1
/// variant=ours
/// input_dim=20
/// backbone=mlp:128,128
/// feature_dim=600
/// level_sizes=4,16
/// seed=0
/// tensor input.mean 20
/// <values separated by spaces>
/// tensor input.std 20
/// ...
/// tensor backbone0.layer0.weight 20x128
/// ...
/// end
/// ```
///
/// Values use Rust's shortest round-trip float formatting, so reading a
/// checkpoint back reproduces every parameter bit for bit.
pub fn write_checkpoint(params: &ParamSet, norm: &Standardizer) -> String {
    use std::fmt::Write as _;
    let spec = params.spec();
    let mut out = String::new();
    let sizes: Vec<String> = spec.level_sizes.iter().map(usize::to_string).collect();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "variant={}", spec.variant);
    let _ = writeln!(out, "input_dim={}", spec.input_dim);
    let _ = writeln!(out, "backbone={}", spec.backbone);
    let _ = writeln!(out, "feature_dim={}", spec.feature_dim);
    let _ = writeln!(out, "level_sizes={}", sizes.join(","));
    let _ = writeln!(out, "seed={}", spec.seed);
    let mean = Tensor::from_vec(vec![norm.mean.len()], norm.mean.clone()).expect("1-d");
    let std = Tensor::from_vec(vec![norm.std.len()], norm.std.clone()).expect("1-d");
    let named = [("input.mean", &mean), ("input.std", &std)]
        .into_iter()
        .chain(params.params().iter().map(|p| (p.name.as_str(), &p.value)));
    for (name, t) in named {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
        let _ = writeln!(out, "tensor {name} {}", dims.join("x"));
        let _ = writeln!(out, "{}", values.join(" "));
    }
    out.push_str("end\n");
    out
}

pub fn read_checkpoint(text: &str) -> Result<(ParamSet, Standardizer)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, CHECKPOINT_MAGIC)) => {}
        _ => return Err(Error::parse(1, format!("expected `{CHECKPOINT_MAGIC}`"))),
    }
    let mut fields = std::collections::HashMap::new();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut ended = false;
    while let Some((no, line)) = lines.next() {
        if line == "end" {
            ended = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut it = rest.split_whitespace();
            let (Some(name), Some(dims), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::parse(no, "expected `tensor NAME DIMS`"));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(no, format!("bad dims `{dims}`")))?;
            let (vno, values) = lines
                .next()
                .ok_or_else(|| Error::parse(no, "missing tensor values"))?;
            let data = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(vno, "non-numeric tensor value"))?;
            let t = Tensor::from_vec(shape, data).map_err(|e| Error::parse(vno, e.to_string()))?;
            tensors.push((name.to_string(), t));
        } else if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        } else {
            return Err(Error::parse(no, format!("unexpected line `{line}`")));
        }
    }
    if !ended {
        return Err(Error::parse(0, "checkpoint is truncated (no `end`)"));
    }
    let field = |k: &str| -> Result<&String> {
        fields
            .get(k)
            .ok_or_else(|| Error::config(format!("checkpoint lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::config(format!("bad `{k}` in checkpoint")))
    };
    let spec = ModelSpec {
        variant: field("variant")?.parse()?,
        input_dim: num("input_dim")?,
        backbone: field("backbone")?.parse()?,
        feature_dim: num("feature_dim")?,
        level_sizes: field("level_sizes")?
            .split(',')
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config("bad `level_sizes` in checkpoint"))?,
        seed: field("seed")?
            .parse()
            .map_err(|_| Error::config("bad `seed` in checkpoint"))?,
    };
    if tensors.len() < 2 || tensors[0].0 != "input.mean" || tensors[1].0 != "input.std" {
        return Err(Error::config("checkpoint lacks input normalization tensors"));
    }
    let rest = tensors.split_off(2);
    let norm = Standardizer {
        mean: tensors[0].1.clone().into_data(),
        std: tensors[1].1.clone().into_data(),
    };
    if norm.mean.len() != spec.input_dim || norm.std.len() != spec.input_dim {
        return Err(Error::config("normalization width does not match input_dim"));
    }
    Ok((ParamSet::from_tensors(&spec, rest)?, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: Variant, d: usize, feat: usize, sizes: Vec<usize>) -> ModelSpec {
        ModelSpec {
            variant,
            input_dim: d,
            backbone: Backbone::Mlp(vec![5]),
            feature_dim: feat,
            level_sizes: sizes,
            seed: 3,
        }
    }

    fn chains(rows: &[&[usize]]) -> Vec<LabelChain> {
        rows.iter().map(|r| LabelChain(r.to_vec())).collect()
    }

    #[test]
    fn head_widths_for_ours() {
        let s = ModelSpec::new(Variant::Ours, 20, vec![13, 38, 200]);
        let p = ParamSet::init(&s).unwrap();
        assert_eq!(p.get("head0.weight").unwrap().value.shape(), &[600, 13]);
        assert_eq!(p.get("head1.weight").unwrap().value.shape(), &[400, 38]);
        assert_eq!(p.get("head2.weight").unwrap().value.shape(), &[200, 200]);
    }

    #[test]
    fn single_label_vanilla_head_reads_full_embedding() {
        let mut s = ModelSpec::new(Variant::VanillaSingle, 20, vec![200]);
        s.feature_dim = 512;
        let p = ParamSet::init(&s).unwrap();
        assert_eq!(p.get("head0.weight").unwrap().value.shape(), &[512, 200]);
        assert!(p.get("head1.weight").is_none());
    }

    #[test]
    fn vanilla_multi_has_independent_backbones() {
        let s = spec(Variant::VanillaMulti, 4, 6, vec![2, 3]);
        let p = ParamSet::init(&s).unwrap();
        let w0 = &p.get("backbone0.layer0.weight").unwrap().value;
        let w1 = &p.get("backbone1.layer0.weight").unwrap().value;
        assert_eq!(w0.shape(), w1.shape());
        assert_ne!(w0, w1);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec(Variant::Ours, 4, 6, vec![2, 3]);
        let a = ParamSet::init(&s).unwrap();
        assert_eq!(a, ParamSet::init(&s).unwrap());
        for p in a.params() {
            match p.kind {
                Kind::Bias => assert!(p.value.data().iter().all(|&v| v == 0.0)),
                Kind::Weight => {
                    let (i, o) = p.value.dims2().unwrap();
                    let limit = (6.0 / (i + o) as f64).sqrt();
                    assert!(p.value.max_abs() <= limit);
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(ParamSet::init(&spec(Variant::Ours, 4, 7, vec![2, 3])).is_err());
        assert!(ParamSet::init(&spec(Variant::OursSingle, 4, 7, vec![2, 3])).is_err());
        assert!(ParamSet::init(&spec(Variant::VanillaSingle, 4, 7, vec![2, 3])).is_ok());
        let mut s = spec(Variant::Ours, 4, 6, vec![2, 3]);
        s.backbone = Backbone::Identity;
        assert!(ParamSet::init(&s).is_err());
        assert!("ours_plus".parse::<Variant>().is_err());
    }

    #[test]
    fn identity_backbone_passes_input_through() {
        let mut s = spec(Variant::VanillaSingle, 4, 4, vec![3]);
        s.backbone = Backbone::Identity;
        let p = ParamSet::init(&s).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = p.backbone_forward(&mut tape, &vars, 0, xv).unwrap();
        assert_eq!(tape.value(f), &x);
    }

    #[test]
    fn backbone_shape_and_mismatch() {
        let p = ParamSet::init(&spec(Variant::Ours, 4, 6, vec![2, 3])).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.leaf(Tensor::full(&[7, 4], 0.3));
        let f = p.backbone_forward(&mut tape, &vars, 0, x).unwrap();
        assert_eq!(tape.value(f).shape(), &[7, 6]);
        let f2 = p.backbone_forward(&mut tape, &vars, 0, x).unwrap();
        assert_eq!(tape.value(f), tape.value(f2));
        let bad = tape.leaf(Tensor::full(&[7, 5], 0.3));
        assert!(p.backbone_forward(&mut tape, &vars, 0, bad).is_err());
    }

    #[test]
    fn loss_weights_select_levels_exactly() {
        let p = ParamSet::init(&spec(Variant::Ours, 4, 6, vec![2, 3])).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, -0.3, 0.4], vec![1.0, 0.0, -1.0, 0.5]]).unwrap();
        let ch = chains(&[&[0, 1], &[1, 2]]);
        let logits = p.logits(&x).unwrap();
        let ce = |level: usize| {
            let mut t = Tape::new();
            let l = t.leaf(logits[level].clone());
            let targets: Vec<usize> = ch.iter().map(|c| c.level(level)).collect();
            let v = t.softmax_cross_entropy(l, &targets).unwrap();
            t.value(v).item().unwrap()
        };
        let w = |a: f64, b: f64| LossWeights::new(vec![a, b]).unwrap();
        assert_eq!(p.loss(&x, &ch, &w(1.0, 0.0)).unwrap(), ce(0));
        assert_eq!(p.loss(&x, &ch, &w(0.0, 1.0)).unwrap(), ce(1));
        assert!(LossWeights::new(vec![0.0, 0.0]).is_err());
        assert!(LossWeights::new(vec![-1.0, 1.0]).is_err());
        assert!(p.loss(&x, &ch, &LossWeights::ones(3)).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_sum_of_log_class_counts() {
        let mut tape = Tape::new();
        let l1 = tape.leaf(Tensor::zeros(&[3, 2]));
        let l2 = tape.leaf(Tensor::zeros(&[3, 4]));
        let ch = chains(&[&[0, 1], &[1, 2], &[1, 3]]);
        let loss = total_loss(&mut tape, &[l1, l2], &ch, &LossWeights::ones(2)).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - (2f64.ln() + 4f64.ln())).abs() < 1e-12);
        assert!((v - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ParamSet::init(&spec(Variant::Ours, 4, 6, vec![2, 3])).unwrap();
        let norm = Standardizer {
            mean: vec![0.1, -0.2, 1.0 / 3.0, 5.0],
            std: vec![1.0, 2.0, 0.7, 1e-3],
        };
        let text = write_checkpoint(&p, &norm);
        let (back, back_norm) = read_checkpoint(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back_norm, norm);
        assert_eq!(write_checkpoint(&back, &back_norm), text);

        assert!(read_checkpoint("nope\n").is_err());
        let truncated = text.replace("end\n", "");
        assert!(read_checkpoint(&truncated).is_err());
    }
}
