//! Coarse-to-fine label hierarchies.
//!
//! Levels are zero-based here: level `0` is the coarsest, level `K - 1` the
//! finest. Each sample stores only its finest label; [`Taxonomy::label_chain`]
//! derives the rest by following parent links.
//!
//! File format (UTF-8):
//!
//! ```text
//! levels=3
//! # comment
//! Passeriformes,Icteridae,Brewer Blackbird
//! Passeriformes,Icteridae,Red winged Blackbird
//! ```
//!
//! One line per finest category, names coarse to fine. Category indices are
//! assigned in order of first appearance.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::error::{Error, Result};

/// First invariant a hierarchy breaks.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("taxonomy has no levels")]
    NoLevels,
    #[error("level {level} has no categories")]
    EmptyLevel { level: usize },
    #[error("duplicate name `{name}` at level {level}")]
    DuplicateName { level: usize, name: String },
    #[error("multiple parents: category {index} at level {level} has {count} parents")]
    MultipleParents {
        level: usize,
        index: usize,
        count: usize,
    },
    #[error("missing parent: category {index} at level {level} has no parent")]
    MissingParent { level: usize, index: usize },
    #[error("parent link out of range at level {level}: {child} -> {parent}")]
    LinkOutOfRange {
        level: usize,
        child: usize,
        parent: usize,
    },
    #[error("empty internal node: category {index} at level {level} has no children")]
    EmptyInternalNode { level: usize, index: usize },
    #[error("expected {expected} link lists, found {found}")]
    LinkLevels { expected: usize, found: usize },
}

impl Violation {
    /// Short stable name of the violated invariant.
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::NoLevels => "no levels",
            Violation::EmptyLevel { .. } => "empty level",
            Violation::DuplicateName { .. } => "duplicate name",
            Violation::MultipleParents { .. } => "multiple parents",
            Violation::MissingParent { .. } => "missing parent",
            Violation::LinkOutOfRange { .. } => "link out of range",
            Violation::EmptyInternalNode { .. } => "empty internal node",
            Violation::LinkLevels { .. } => "link levels",
        }
    }
}

/// Unchecked hierarchy description: names per level plus `(child, parent)`
/// links from each level `k >= 1` to level `k - 1`.
///
/// `links[k - 1]` holds the links of level `k`. Use [`validate`] or
/// [`Taxonomy::from_parts`] to check it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyParts {
    pub level_names: Vec<Vec<String>>,
    pub links: Vec<Vec<(usize, usize)>>,
}

pub fn validate(parts: &TaxonomyParts) -> std::result::Result<(), Violation> {
    let k = parts.level_names.len();
    if k == 0 {
        return Err(Violation::NoLevels);
    }
    if parts.links.len() != k - 1 {
        return Err(Violation::LinkLevels {
            expected: k - 1,
            found: parts.links.len(),
        });
    }
    for (level, names) in parts.level_names.iter().enumerate() {
        if names.is_empty() {
            return Err(Violation::EmptyLevel { level });
        }
        let mut seen = HashMap::with_capacity(names.len());
        for name in names {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Violation::DuplicateName {
                    level,
                    name: name.clone(),
                });
            }
        }
    }
    for (i, links) in parts.links.iter().enumerate() {
        let level = i + 1;
        let n_child = parts.level_names[level].len();
        let n_parent = parts.level_names[i].len();
        let mut parent_count = vec![0usize; n_child];
        let mut child_count = vec![0usize; n_parent];
        for &(child, parent) in links {
            if child >= n_child || parent >= n_parent {
                return Err(Violation::LinkOutOfRange {
                    level,
                    child,
                    parent,
                });
            }
            parent_count[child] += 1;
            child_count[parent] += 1;
        }
        for (index, &count) in parent_count.iter().enumerate() {
            match count {
                0 => return Err(Violation::MissingParent { level, index }),
                1 => {}
                count => {
                    return Err(Violation::MultipleParents {
                        level,
                        index,
                        count,
                    })
                }
            }
        }
        if let Some(index) = child_count.iter().position(|&c| c == 0) {
            return Err(Violation::EmptyInternalNode { level: i, index });
        }
    }
    Ok(())
}

/// A validated K-level hierarchy. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    level_names: Vec<Vec<String>>,
    /// `parents[k - 1][i]` is the parent at level `k - 1` of category `i` at level `k`.
    parents: Vec<Vec<usize>>,
    name_index: Vec<HashMap<String, usize>>,
}

impl Taxonomy {
    pub fn from_parts(parts: TaxonomyParts) -> std::result::Result<Self, Violation> {
        validate(&parts)?;
        let parents = parts
            .links
            .iter()
            .enumerate()
            .map(|(i, links)| {
                let mut p = vec![0; parts.level_names[i + 1].len()];
                for &(child, parent) in links {
                    p[child] = parent;
                }
                p
            })
            .collect();
        let name_index = parts
            .level_names
            .iter()
            .map(|names| {
                names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.clone(), i))
                    .collect()
            })
            .collect();
        Ok(Taxonomy {
            level_names: parts.level_names,
            parents,
            name_index,
        })
    }

    /// Builds a hierarchy from one name chain per finest category, in order.
    pub fn from_chains<S: AsRef<str>>(levels: usize, chains: &[Vec<S>]) -> Result<Self> {
        if levels == 0 {
            return Err(Violation::NoLevels.into());
        }
        let mut builder = ChainBuilder::new(levels);
        for (i, chain) in chains.iter().enumerate() {
            builder.push(i + 1, chain)?;
        }
        builder.finish()
    }

    /// Number of levels `K`.
    pub fn depth(&self) -> usize {
        self.level_names.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_names.iter().map(Vec::len).collect()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.level_names[level].len()
    }

    pub fn finest_size(&self) -> usize {
        self.level_names[self.depth() - 1].len()
    }

    pub fn names(&self, level: usize) -> &[String] {
        &self.level_names[level]
    }

    pub fn index_of(&self, level: usize, name: &str) -> Option<usize> {
        self.name_index.get(level)?.get(name).copied()
    }

    /// Parent at `level - 1` of category `idx` at `level`; `None` at level 0.
    pub fn parent(&self, level: usize, idx: usize) -> Option<usize> {
        if level == 0 {
            return None;
        }
        self.parents.get(level - 1)?.get(idx).copied()
    }

    pub fn to_parts(&self) -> TaxonomyParts {
        TaxonomyParts {
            level_names: self.level_names.clone(),
            links: self
                .parents
                .iter()
                .map(|p| p.iter().copied().enumerate().collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), Violation> {
        validate(&self.to_parts())
    }

    /// Index at `target` level of the ancestor of `idx` at `level`.
    pub fn ancestor(&self, level: usize, idx: usize, target: usize) -> Result<usize> {
        if level >= self.depth() {
            return Err(Error::OutOfRange {
                what: "level",
                index: level,
                limit: self.depth(),
            });
        }
        if target > level {
            return Err(Error::OutOfRange {
                what: "ancestor target level",
                index: target,
                limit: level + 1,
            });
        }
        if idx >= self.level_size(level) {
            return Err(Error::OutOfRange {
                what: "category index",
                index: idx,
                limit: self.level_size(level),
            });
        }
        let mut cur = idx;
        for k in (target + 1..=level).rev() {
            cur = self.parents[k - 1][cur];
        }
        Ok(cur)
    }

    pub fn label_chain(&self, fine_idx: usize) -> Result<LabelChain> {
        let finest = self.depth() - 1;
        if fine_idx >= self.finest_size() {
            return Err(Error::OutOfRange {
                what: "finest category index",
                index: fine_idx,
                limit: self.finest_size(),
            });
        }
        let mut indices = vec![0; self.depth()];
        indices[finest] = fine_idx;
        for k in (1..=finest).rev() {
            indices[k - 1] = self.parents[k - 1][indices[k]];
        }
        Ok(LabelChain(indices))
    }

    /// Whether every link in `chain` agrees with this hierarchy.
    pub fn is_consistent(&self, chain: &LabelChain) -> bool {
        chain.0.len() == self.depth()
            && chain
                .0
                .iter()
                .enumerate()
                .all(|(k, &i)| i < self.level_size(k))
            && (1..self.depth()).all(|k| self.parents[k - 1][chain.0[k]] == chain.0[k - 1])
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let Some((line_no, header)) = lines.next() else {
            return Err(Error::parse(0, "empty taxonomy file"));
        };
        let levels = header
            .strip_prefix("levels=")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::parse(line_no, format!("expected `levels=K`, got `{header}`")))?;

        let mut builder = ChainBuilder::new(levels);
        for (line_no, line) in lines {
            let names: Vec<&str> = line.split(',').map(str::trim).collect();
            builder.push(line_no, &names)?;
        }
        if builder.is_empty() {
            return Err(Error::parse(line_no, "taxonomy lists no categories"));
        }
        builder.finish()
    }

    /// Canonical file text; parsing it yields an identical taxonomy.
    pub fn to_file_string(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "levels={}", self.depth())?;
        let finest = self.depth() - 1;
        for i in 0..self.finest_size() {
            let chain = self.label_chain(i).map_err(|_| fmt::Error)?;
            let names: Vec<&str> = chain
                .0
                .iter()
                .enumerate()
                .map(|(k, &idx)| self.level_names[k][idx].as_str())
                .collect();
            debug_assert_eq!(chain.0[finest], i);
            writeln!(f, "{}", names.join(","))?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Taxonomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Taxonomy::parse(s)
    }
}

struct ChainBuilder {
    levels: usize,
    names: Vec<Vec<String>>,
    index: Vec<HashMap<String, usize>>,
    parent: Vec<Vec<usize>>,
}

impl ChainBuilder {
    fn new(levels: usize) -> Self {
        ChainBuilder {
            levels,
            names: vec![Vec::new(); levels],
            index: vec![HashMap::new(); levels],
            parent: vec![Vec::new(); levels.saturating_sub(1)],
        }
    }

    fn is_empty(&self) -> bool {
        self.names[self.levels - 1].is_empty()
    }

    fn push<S: AsRef<str>>(&mut self, line_no: usize, chain: &[S]) -> Result<()> {
        if chain.len() != self.levels {
            return Err(Error::parse(
                line_no,
                format!("expected {} names, found {}", self.levels, chain.len()),
            ));
        }
        let chain: Vec<&str> = chain.iter().map(|s| s.as_ref().trim()).collect();
        if let Some(k) = chain.iter().position(|n| n.is_empty()) {
            return Err(Error::parse(line_no, format!("empty name at level {k}")));
        }
        let finest = self.levels - 1;
        if let Some(&existing) = self.index[finest].get(chain[finest]) {
            let same_chain = (1..self.levels)
                .rev()
                .try_fold(existing, |cur, k| {
                    let p = self.parent[k - 1][cur];
                    (self.names[k - 1][p] == chain[k - 1]).then_some(p)
                })
                .is_some();
            let msg = if same_chain {
                format!("duplicate finest category `{}`", chain[finest])
            } else {
                format!(
                    "inconsistent parent: `{}` already listed under a different chain",
                    chain[finest]
                )
            };
            return Err(Error::parse(line_no, msg));
        }

        let mut above: Option<usize> = None;
        for (k, name) in chain.iter().enumerate() {
            let idx = match self.index[k].get(*name) {
                Some(&idx) => {
                    if let Some(p) = above {
                        if self.parent[k - 1][idx] != p {
                            return Err(Error::parse(
                                line_no,
                                format!(
                                    "inconsistent parent: `{name}` at level {k} is under `{}`, not `{}`",
                                    self.names[k - 1][self.parent[k - 1][idx]],
                                    self.names[k - 1][p]
                                ),
                            ));
                        }
                    }
                    idx
                }
                None => {
                    let idx = self.names[k].len();
                    self.names[k].push((*name).to_string());
                    self.index[k].insert((*name).to_string(), idx);
                    if let Some(p) = above {
                        self.parent[k - 1].push(p);
                    }
                    idx
                }
            };
            above = Some(idx);
        }
        Ok(())
    }

    fn finish(self) -> Result<Taxonomy> {
        let links = self
            .parent
            .into_iter()
            .map(|p| p.into_iter().enumerate().collect())
            .collect();
        Ok(Taxonomy::from_parts(TaxonomyParts {
            level_names: self.names,
            links,
        })?)
    }
}

/// One category index per level, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelChain(pub Vec<usize>);

impl LabelChain {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn level(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

/// Balanced hierarchy with the given level sizes; names are `L{k}_{i}` with
/// one-based `k`. Each size must divide the next.
pub fn balanced(level_sizes: &[usize]) -> Result<Taxonomy> {
    if level_sizes.is_empty() {
        return Err(Violation::NoLevels.into());
    }
    if level_sizes.contains(&0) {
        return Err(Error::config("level sizes must be positive"));
    }
    for w in level_sizes.windows(2) {
        if w[1] % w[0] != 0 {
            return Err(Error::config(format!(
                "level size {} is not divisible by the coarser level size {} (balanced trees need equal fan-out)",
                w[1], w[0]
            )));
        }
    }
    let k = level_sizes.len();
    let finest = level_sizes[k - 1];
    let chains: Vec<Vec<String>> = (0..finest)
        .map(|i| {
            level_sizes
                .iter()
                .enumerate()
                .map(|(lvl, &size)| format!("L{}_{}", lvl + 1, i / (finest / size)))
                .collect()
        })
        .collect();
    Taxonomy::from_chains(k, &chains)
}
