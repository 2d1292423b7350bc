//! Label-hierarchy induction by agglomerative clustering of class centroids.
//!
//! Starting from one cluster per finest category, the two clusters with the
//! smallest average-linkage Euclidean distance are merged repeatedly. Each
//! time the cluster count reaches a requested level size the current
//! partition is recorded; the recorded partitions become the coarser levels.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;
use crate::tensor::{Tape, Tensor};
use crate::train::TrainedModel;

/// Mean feature vector of every finest category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroids {
    /// `[C_K × dim]`, row `i` is category `i`.
    pub means: Tensor,
    pub names: Vec<String>,
}

impl ClassCentroids {
    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }
}

/// Per-category means of raw features, or of the backbone embedding when a
/// trained model is given (its finest-level backbone for `vanilla_multi`).
pub fn centroids(ds: &Dataset, embed: Option<&TrainedModel>) -> Result<ClassCentroids> {
    let features = match embed {
        None => ds.features().clone(),
        Some(model) => {
            let x = model.normalizer.apply(ds.features())?;
            let params = &model.params;
            let net = params.spec().backbone_count() - 1;
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let xv = tape.leaf(x);
            let f = params.backbone_forward(&mut tape, &vars, net, xv)?;
            tape.value(f).clone()
        }
    };
    let tax = ds.taxonomy();
    let c = tax.finest_size();
    let d = features.shape()[1];
    let mut sums = vec![0.0; c * d];
    let mut counts = vec![0usize; c];
    for (i, &label) in ds.fine_labels().iter().enumerate() {
        counts[label] += 1;
        for (s, v) in sums[label * d..(label + 1) * d].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::config(format!(
            "category `{}` has no samples",
            tax.names(tax.depth() - 1)[missing]
        )));
    }
    for (row, &n) in sums.chunks_mut(d).zip(&counts) {
        row.iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(ClassCentroids {
        means: Tensor::matrix(c, d, sums)?,
        names: tax.names(tax.depth() - 1).to_vec(),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cluster assignment of every centroid at each requested size, coarse to fine.
pub fn agglomerate(c: &ClassCentroids, level_sizes: &[usize]) -> Result<Vec<Vec<usize>>> {
    let n = c.count();
    if level_sizes.is_empty() {
        return Ok(Vec::new());
    }
    if level_sizes.windows(2).any(|w| w[0] >= w[1]) || level_sizes[0] == 0 {
        return Err(Error::config(format!(
            "level sizes {level_sizes:?} must be positive and strictly increasing"
        )));
    }
    let largest = *level_sizes.last().expect("non-empty");
    if largest >= n {
        return Err(Error::config(format!(
            "level size {largest} must be smaller than the {n} finest categories"
        )));
    }

    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(c.means.row(i), c.means.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    // cluster id per centroid; ids are the smallest member index
    let mut owner: Vec<usize> = (0..n).collect();
    let mut snapshots = Vec::with_capacity(level_sizes.len());
    let mut wanted = level_sizes.iter().rev().peekable();

    let mut clusters = n;
    while let Some(&&target) = wanted.peek() {
        if clusters == target {
            snapshots.push(owner.clone());
            wanted.next();
            continue;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let d = dist[i * n + j];
                // strict `<` keeps the lowest (i, j) pair on ties
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let (i, j, _) = best.expect("at least two active clusters");
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if active[k] && k != i && k != j {
                let d = (ni * dist[i * n + k] + nj * dist[j * n + k]) / (ni + nj);
                dist[i * n + k] = d;
                dist[k * n + i] = d;
            }
        }
        active[j] = false;
        size[i] += size[j];
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
        clusters -= 1;
    }
    snapshots.reverse();
    Ok(snapshots)
}

/// Builds a taxonomy whose finest level is the centroid categories and whose
/// coarser levels have exactly `level_sizes` clusters. Coarser categories are
/// named `L{k}_{i}` (one-based level, index by first appearance).
pub fn build_hierarchy(c: &ClassCentroids, level_sizes: &[usize]) -> Result<Taxonomy> {
    let snapshots = agglomerate(c, level_sizes)?;
    let levels = snapshots.len() + 1;
    let relabeled: Vec<Vec<usize>> = snapshots
        .iter()
        .map(|owner| {
            let mut map = std::collections::HashMap::new();
            owner
                .iter()
                .map(|o| {
                    let next = map.len();
                    *map.entry(*o).or_insert(next)
                })
                .collect()
        })
        .collect();
    let chains: Vec<Vec<String>> = (0..c.count())
        .map(|i| {
            relabeled
                .iter()
                .enumerate()
                .map(|(k, labels)| format!("L{}_{}", k + 1, labels[i]))
                .chain(std::iter::once(c.names[i].clone()))
                .collect()
        })
        .collect();
    Taxonomy::from_chains(levels, &chains)
}

/// Whether two labelings induce the same partition (equal up to relabeling).
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}
