//! Ordered structures over group labels and their mapping onto samples.
//!
//! An ordered structure is an ordered set partition of the group labels
//! `1..=p`. Groups in the same block share a latent mean and block `k` carries
//! the `k`-th smallest mean, so `(13)(2)` says groups 1 and 3 agree and sit
//! below group 2.

use std::collections::HashMap;
use std::fmt;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest label count the one-digit text form can express.
pub const MAX_GROUPS: usize = 9;

/// Largest `p` for which the full ordered catalog is enumerated.
pub const MAX_CATALOG_GROUPS: usize = 8;

/// A set of group labels, stored as a bitmask (bit `j - 1` for label `j`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct GroupSet(u16);

impl GroupSet {
    pub fn empty() -> Self {
        GroupSet(0)
    }

    pub fn from_labels<I: IntoIterator<Item = usize>>(labels: I) -> Self {
        let mut set = GroupSet(0);
        for label in labels {
            set.insert(label);
        }
        set
    }

    pub fn insert(&mut self, label: usize) {
        debug_assert!((1..=MAX_GROUPS).contains(&label));
        self.0 |= 1 << (label - 1);
    }

    pub fn contains(self, label: usize) -> bool {
        (1..=MAX_GROUPS).contains(&label) && self.0 & (1 << (label - 1)) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Smallest label in the set.
    pub fn min_label(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize + 1)
    }

    /// Labels in increasing order.
    pub fn labels(self) -> impl Iterator<Item = usize> {
        (1..=MAX_GROUPS).filter(move |&j| self.contains(j))
    }

    pub fn bits(self) -> u16 {
        self.0
    }
}

impl fmt::Display for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for label in self.labels() {
            write!(f, "{label}")?;
        }
        Ok(())
    }
}

/// An ordered partition of `{1..=p}`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct OrderedStructure {
    blocks: Vec<GroupSet>,
    p: usize,
}

impl OrderedStructure {
    /// Builds a structure after checking that `blocks` partition `1..=p`.
    pub fn new(blocks: Vec<GroupSet>, p: usize) -> Result<Self> {
        check_partition(&blocks, p)?;
        Ok(OrderedStructure { blocks, p })
    }

    /// The single-block structure `(12..p)`.
    pub fn null(p: usize) -> Result<Self> {
        Self::new(vec![GroupSet::from_labels(1..=p)], p)
    }

    pub fn blocks(&self) -> &[GroupSet] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_null(&self) -> bool {
        self.blocks.len() == 1
    }

    /// Block index holding `label`.
    pub fn block_of(&self, label: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(label))
    }

    /// The partition obtained by forgetting block order.
    pub fn unordered(&self) -> UnorderedPartition {
        UnorderedPartition::from_blocks(self.blocks.clone(), self.p)
    }

    pub fn parse(text: &str, p: usize) -> Result<Self> {
        parse_structure(text, p)
    }
}

impl fmt::Display for OrderedStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for block in &self.blocks {
            write!(f, "({block})")?;
        }
        Ok(())
    }
}

/// A set partition of `{1..=p}` with no block order, written `{13}{2}`.
///
/// Blocks are kept sorted by their smallest label so equal partitions compare
/// equal.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct UnorderedPartition {
    blocks: Vec<GroupSet>,
    p: usize,
}

impl UnorderedPartition {
    fn from_blocks(mut blocks: Vec<GroupSet>, p: usize) -> Self {
        blocks.sort_by_key(|b| b.min_label());
        UnorderedPartition { blocks, p }
    }

    pub fn new(blocks: Vec<GroupSet>, p: usize) -> Result<Self> {
        check_partition(&blocks, p)?;
        Ok(Self::from_blocks(blocks, p))
    }

    pub fn blocks(&self) -> &[GroupSet] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// View as an ordered structure using the stored block order. Only used
    /// where order is irrelevant (unordered densities, block statistics).
    pub fn as_structure(&self) -> OrderedStructure {
        OrderedStructure {
            blocks: self.blocks.clone(),
            p: self.p,
        }
    }
}

impl fmt::Display for UnorderedPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for block in &self.blocks {
            write!(f, "{{{block}}}")?;
        }
        Ok(())
    }
}

fn check_partition(blocks: &[GroupSet], p: usize) -> Result<()> {
    if p == 0 || p > MAX_GROUPS {
        return Err(Error::invalid(format!("p must lie in 1..={MAX_GROUPS}, got {p}")));
    }
    let full = GroupSet::from_labels(1..=p);
    let mut seen = GroupSet::empty();
    for block in blocks {
        if block.is_empty() {
            return Err(Error::invalid("empty block in structure"));
        }
        if block.bits() & seen.bits() != 0 {
            return Err(Error::invalid("blocks overlap"));
        }
        if block.bits() & !full.bits() != 0 {
            return Err(Error::invalid(format!("label outside 1..={p}")));
        }
        seen = GroupSet(seen.bits() | block.bits());
    }
    if seen != full {
        return Err(Error::invalid(format!("blocks do not cover 1..={p}")));
    }
    Ok(())
}

/// Sample-to-group design of an experiment.
#[derive(Clone, PartialEq, Debug)]
pub struct ExperimentLayout {
    group_of: Vec<usize>,
    p: usize,
    library_sizes: Option<Vec<f64>>,
}

impl ExperimentLayout {
    /// `group_of[i]` is the 1-based group label of sample `i`.
    pub fn new(group_of: Vec<usize>, library_sizes: Option<Vec<f64>>) -> Result<Self> {
        let n = group_of.len();
        let p = group_of.iter().copied().max().unwrap_or(0);
        if p < 2 {
            return Err(Error::invalid("layout needs at least two groups"));
        }
        if p > n {
            return Err(Error::invalid(format!("p = {p} exceeds n = {n}")));
        }
        if p > MAX_GROUPS {
            return Err(Error::invalid(format!("at most {MAX_GROUPS} groups are supported, got {p}")));
        }
        if group_of.contains(&0) {
            return Err(Error::invalid("group labels are 1-based"));
        }
        for j in 1..=p {
            if !group_of.contains(&j) {
                return Err(Error::invalid(format!("group {j} has no samples")));
            }
        }
        if let Some(sizes) = &library_sizes {
            if sizes.len() != n {
                return Err(Error::invalid(format!(
                    "{} library sizes for {n} samples",
                    sizes.len()
                )));
            }
            if let Some(bad) = sizes.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::invalid(format!("library size of sample {} is not positive", bad + 1)));
            }
        }
        Ok(ExperimentLayout {
            group_of,
            p,
            library_sizes,
        })
    }

    /// `p` groups with `reps` consecutive replicates each.
    pub fn balanced(p: usize, reps: usize) -> Result<Self> {
        let group_of = (1..=p).flat_map(|j| std::iter::repeat_n(j, reps)).collect();
        Self::new(group_of, None)
    }

    pub fn with_library_sizes(self, sizes: Vec<f64>) -> Result<Self> {
        Self::new(self.group_of, Some(sizes))
    }

    pub fn n_samples(&self) -> usize {
        self.group_of.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn library_sizes(&self) -> Option<&[f64]> {
        self.library_sizes.as_deref()
    }

    /// 0-based sample indices of group `label`.
    pub fn replicates(&self, label: usize) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| (g == label).then_some(i))
            .collect()
    }
}

/// Samples grouped by the blocks of a structure, in block order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SampleBlocks {
    sample_sets: Vec<Vec<usize>>,
}

impl SampleBlocks {
    /// 0-based sample indices per block.
    pub fn sample_sets(&self) -> &[Vec<usize>] {
        &self.sample_sets
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sample_sets.iter().map(Vec::len).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.sample_sets.len()
    }
}

/// Maps each block of `eta` to the samples whose group lies in it.
pub fn structure_blocks(eta: &OrderedStructure, layout: &ExperimentLayout) -> Result<SampleBlocks> {
    if eta.p() != layout.p() {
        return Err(Error::invalid(format!(
            "structure {eta} is over {} groups but the layout has {}",
            eta.p(),
            layout.p()
        )));
    }
    let mut block_of_group = [usize::MAX; MAX_GROUPS + 1];
    for (k, block) in eta.blocks().iter().enumerate() {
        for label in block.labels() {
            block_of_group[label] = k;
        }
    }
    let mut sample_sets = vec![Vec::new(); eta.num_blocks()];
    for (i, &g) in layout.group_of().iter().enumerate() {
        sample_sets[block_of_group[g]].push(i);
    }
    Ok(SampleBlocks { sample_sets })
}

/// Parses the canonical text form, e.g. `(13)(2)`.
pub fn parse_structure(text: &str, p: usize) -> Result<OrderedStructure> {
    if p == 0 || p > MAX_GROUPS {
        return Err(Error::invalid(format!("p must lie in 1..={MAX_GROUPS}, got {p}")));
    }
    let err = |position: usize, message: String| Error::Parse { position, message };
    let mut blocks = Vec::new();
    let mut seen = GroupSet::empty();
    let mut current: Option<GroupSet> = None;
    for (pos, ch) in text.trim().chars().enumerate() {
        match (ch, current.as_mut()) {
            ('(', None) => current = Some(GroupSet::empty()),
            ('(', Some(_)) => return Err(err(pos, "nested '('".into())),
            (')', Some(block)) => {
                if block.is_empty() {
                    return Err(err(pos, "empty block".into()));
                }
                blocks.push(*block);
                current = None;
            }
            (')', None) => return Err(err(pos, "unmatched ')'".into())),
            (c, Some(block)) if c.is_ascii_digit() => {
                let label = c.to_digit(10).unwrap_or(0) as usize;
                if label == 0 || label > p {
                    return Err(err(pos, format!("label {label} outside 1..={p}")));
                }
                if seen.contains(label) {
                    return Err(err(pos, format!("label {label} repeated")));
                }
                seen.insert(label);
                block.insert(label);
            }
            (c, _) => return Err(err(pos, format!("unexpected character {c:?}"))),
        }
    }
    if current.is_some() {
        return Err(err(text.trim().chars().count(), "unterminated block".into()));
    }
    if let Some(missing) = (1..=p).find(|&j| !seen.contains(j)) {
        return Err(err(text.trim().chars().count(), format!("label {missing} missing")));
    }
    OrderedStructure::new(blocks, p)
}

/// All set partitions of `{1..=p}`, ordered by block count and then text.
pub fn enumerate_partitions(p: usize) -> Result<Vec<UnorderedPartition>> {
    if p == 0 || p > MAX_CATALOG_GROUPS {
        return Err(Error::Catalog(format!("p = {p} not in 1..={MAX_CATALOG_GROUPS}")));
    }
    let mut out = Vec::new();
    // Restricted growth strings: label j+1 goes to block rgs[j].
    let mut rgs = vec![0usize; p];
    loop {
        let k = rgs.iter().max().map_or(0, |m| m + 1);
        let mut blocks = vec![GroupSet::empty(); k];
        for (j, &b) in rgs.iter().enumerate() {
            blocks[b].insert(j + 1);
        }
        out.push(UnorderedPartition::from_blocks(blocks, p));
        if !next_rgs(&mut rgs) {
            break;
        }
    }
    out.sort_by_cached_key(|u| (u.num_blocks(), u.to_string()));
    Ok(out)
}

fn next_rgs(rgs: &mut [usize]) -> bool {
    for j in (1..rgs.len()).rev() {
        let prefix_max = rgs[..j].iter().copied().max().unwrap_or(0);
        if rgs[j] <= prefix_max {
            rgs[j] += 1;
            for x in &mut rgs[j + 1..] {
                *x = 0;
            }
            return true;
        }
    }
    false
}

/// The full ordered catalog on `p` groups, ordered by block count and then
/// lexicographically by canonical text.
pub fn enumerate_ordered_structures(p: usize) -> Result<Vec<OrderedStructure>> {
    let partitions = enumerate_partitions(p)?;
    let mut out = Vec::new();
    for partition in &partitions {
        for_each_permutation(partition.blocks(), |blocks| {
            out.push(OrderedStructure {
                blocks: blocks.to_vec(),
                p,
            })
        });
    }
    out.sort_by_cached_key(|s| (s.num_blocks(), s.to_string()));
    Ok(out)
}

/// Every ordering of the blocks of `partition`.
pub fn orderings(partition: &UnorderedPartition) -> Vec<OrderedStructure> {
    let mut out = Vec::new();
    for_each_permutation(partition.blocks(), |blocks| {
        out.push(OrderedStructure {
            blocks: blocks.to_vec(),
            p: partition.p(),
        })
    });
    out.sort_by_cached_key(|s| s.to_string());
    out
}

fn for_each_permutation<F: FnMut(&[GroupSet])>(items: &[GroupSet], mut f: F) {
    // Heap's algorithm.
    let mut a = items.to_vec();
    let n = a.len();
    let mut c = vec![0usize; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Drops ordered structures whose unordered parent never reaches
/// `threshold` posterior probability in any row.
///
/// `posteriors` is rows × `parents`.
pub fn filter_catalog<T: Real>(
    catalog: &[OrderedStructure],
    parents: &[UnorderedPartition],
    posteriors: ArrayView2<'_, T>,
    threshold: T,
) -> Result<Vec<OrderedStructure>> {
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::invalid("filter threshold must lie in (0, 1)"));
    }
    if posteriors.ncols() != parents.len() {
        return Err(Error::invalid(format!(
            "posterior matrix has {} columns for {} unordered structures",
            posteriors.ncols(),
            parents.len()
        )));
    }
    let index: HashMap<&UnorderedPartition, usize> = parents.iter().enumerate().map(|(i, u)| (u, i)).collect();
    let keep: Vec<bool> = posteriors
        .columns()
        .into_iter()
        .map(|col| col.iter().any(|&v| v > threshold))
        .collect();
    let mut out = Vec::new();
    for eta in catalog {
        let parent = eta.unordered();
        let col = *index
            .get(&parent)
            .ok_or_else(|| Error::invalid(format!("structure {eta} has no parent {parent} in the list")))?;
        if keep[col] {
            out.push(eta.clone());
        }
    }
    Ok(out)
}
