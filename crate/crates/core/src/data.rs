//! Hierarchical datasets: synthetic generation, CSV I/O, standardization and
//! mini-batching.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::taxonomy::{self, LabelChain, Taxonomy};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Feature rows with one finest-level label each.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    fine_labels: Vec<usize>,
    taxonomy: Arc<Taxonomy>,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        fine_labels: Vec<usize>,
        taxonomy: Arc<Taxonomy>,
        split: Split,
    ) -> Result<Self> {
        let (n, _) = features
            .dims2()
            .ok_or_else(|| Error::shape("dataset", "features must be a matrix"))?;
        if n == 0 {
            return Err(Error::config("dataset has no samples"));
        }
        if fine_labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{n} feature rows but {} labels", fine_labels.len()),
            ));
        }
        let limit = taxonomy.finest_size();
        if let Some(&bad) = fine_labels.iter().find(|&&l| l >= limit) {
            return Err(Error::OutOfRange {
                what: "finest label",
                index: bad,
                limit,
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        Ok(Dataset {
            features,
            fine_labels,
            taxonomy,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn fine_labels(&self) -> &[usize] {
        &self.fine_labels
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Label chains for every sample, in dataset order.
    pub fn chains(&self) -> Vec<LabelChain> {
        self.fine_labels
            .iter()
            .map(|&l| self.taxonomy.label_chain(l).expect("labels validated on construction"))
            .collect()
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        Dataset::new(
            features,
            self.fine_labels.clone(),
            self.taxonomy.clone(),
            self.split,
        )
    }

    /// CSV text with header `f0,...,f{d-1},label`.
    pub fn to_csv_string(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "f{j},");
        }
        out.push_str("label\n");
        let names = self.taxonomy.names(self.taxonomy.depth() - 1);
        for (i, &label) in self.fine_labels.iter().enumerate() {
            for v in self.features.row(i) {
                // `{}` prints the shortest representation that parses back exactly.
                let _ = write!(out, "{v},");
            }
            out.push_str(&names[label]);
            out.push('\n');
        }
        out
    }

    pub fn load_csv(text: &str, taxonomy: Arc<Taxonomy>, split: Split) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(0, "empty dataset file"))?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        let d = columns.len().saturating_sub(1);
        let header_ok = columns.last() == Some(&"label")
            && columns[..d]
                .iter()
                .enumerate()
                .all(|(j, c)| *c == format!("f{j}"));
        if d == 0 || !header_ok {
            return Err(Error::parse(1, "header must be `f0,...,f{d-1},label`"));
        }

        let finest = taxonomy.depth() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line_no, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 1 {
                return Err(Error::parse(
                    line_no,
                    format!("expected {} fields, found {}", d + 1, fields.len()),
                ));
            }
            for f in &fields[..d] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("non-numeric feature `{f}`")))?;
                data.push(v);
            }
            let name = fields[d];
            let label = taxonomy.index_of(finest, name).ok_or_else(|| {
                Error::parse(line_no, format!("unknown label `{name}` (not a finest category)"))
            })?;
            labels.push(label);
        }
        let n = labels.len();
        Dataset::new(Tensor::matrix(n, d, data)?, labels, taxonomy, split)
    }
}

/// Per-dimension affine map fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = features.dims2().expect("matrix");
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                // constant columns map to zero rather than NaN
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let (n, d) = features.dims2().expect("matrix");
        if d != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("fitted on width {}, got {d}", self.mean.len()),
            ));
        }
        let mut out = features.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        debug_assert_eq!(out.shape(), &[n, d]);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub level_sizes: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub s_coarse: f64,
    pub s_fine: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            level_sizes: vec![4, 16],
            train_per_class: 50,
            test_per_class: 20,
            dim: 20,
            s_coarse: 10.0,
            s_fine: 3.0,
            noise: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("dim and samples per class must be positive"));
        }
        if !(self.s_coarse > 0.0 && self.s_fine > 0.0) {
            return Err(Error::config("cluster scales must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be finite and non-negative"));
        }
        Ok(())
    }

    /// True when coarse clusters are not wider apart than fine offsets.
    pub fn scales_overlap(&self) -> bool {
        self.s_coarse <= self.s_fine
    }
}

/// Output of [`gen_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    pub taxonomy: Arc<Taxonomy>,
    /// Center of every category at every level, coarse to fine; `[C_k × d]` each.
    pub centers: Vec<Tensor>,
}

fn random_direction(d: usize, norm: f64, rng: &mut seed::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 {
            return v.into_iter().map(|x| x * norm / len).collect();
        }
    }
}

/// Draws a balanced hierarchy of clusters.
///
/// Coarsest centers sit at distance `s_coarse` from the origin in random
/// directions; each finer level offsets its children from their parent by
/// `s_fine / 2^(k-1)` at level `k` (zero-based). Samples add isotropic
/// Gaussian noise of scale `noise` to their finest center.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let taxonomy = Arc::new(taxonomy::balanced(&cfg.level_sizes)?);
    let d = cfg.dim;

    let mut rng = seed::rng(cfg.seed, "data.centers");
    let mut centers: Vec<Tensor> = Vec::with_capacity(taxonomy.depth());
    for level in 0..taxonomy.depth() {
        let n = taxonomy.level_size(level);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            if level == 0 {
                data.extend(random_direction(d, cfg.s_coarse, &mut rng));
            } else {
                let parent = taxonomy.parent(level, i).expect("level > 0");
                let scale = cfg.s_fine / f64::powi(2.0, level as i32 - 1);
                let offset = random_direction(d, scale, &mut rng);
                let base = centers[level - 1].row(parent);
                data.extend(base.iter().zip(offset).map(|(b, o)| b + o));
            }
        }
        centers.push(Tensor::matrix(n, d, data)?);
    }

    let fine_centers = centers.last().expect("at least one level");
    let sample = |per_class: usize, stream: &str, split: Split| -> Result<Dataset> {
        let mut rng = seed::rng(cfg.seed, stream);
        let c = taxonomy.finest_size();
        let mut data = Vec::with_capacity(c * per_class * d);
        let mut labels = Vec::with_capacity(c * per_class);
        for class in 0..c {
            for _ in 0..per_class {
                for &m in fine_centers.row(class) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + cfg.noise * z);
                }
                labels.push(class);
            }
        }
        Dataset::new(
            Tensor::matrix(labels.len(), d, data)?,
            labels,
            taxonomy.clone(),
            split,
        )
    };
    let train = sample(cfg.train_per_class, "data.train", Split::Train)?;
    let test = sample(cfg.test_per_class, "data.test", Split::Test)?;
    Ok(SynthData {
        train,
        test,
        taxonomy,
        centers,
    })
}

/// One mini-batch: feature rows plus the label chain of each row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub chains: Vec<LabelChain>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Targets at one level, in batch order.
    pub fn targets(&self, level: usize) -> Vec<usize> {
        self.chains.iter().map(|c| c.level(level)).collect()
    }
}

/// Splits `ds` into mini-batches for one epoch. With `shuffle` the order is a
/// permutation determined by `(seed, epoch)`; otherwise dataset order.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if ds.is_empty() {
        return Err(Error::config("cannot batch an empty dataset"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut seed::indexed_rng(seed, "shuffle", epoch as u64));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let chains = idx
                .iter()
                .map(|&i| ds.taxonomy.label_chain(ds.fine_labels[i]))
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch {
                indices: idx.to_vec(),
                features: ds.features.select_rows(idx),
                chains,
            })
        })
        .collect()
}
