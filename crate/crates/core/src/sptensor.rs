//! Sparse COO tensors, entry batches and the sampling protocol used to build
//! training and held-out sets.
//!
//! File format: a header line `K d_1 ... d_K` followed by one entry per line,
//! `i_1 ... i_K value`, with 0-based indices. Blank lines and lines starting
//! with `#` are skipped.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub index: Vec<usize>,
    pub value: f64,
}

/// An observed sparse tensor. Entries are kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    dims: Vec<usize>,
    entries: Vec<Entry>,
}

impl SparseTensor {
    pub fn new(dims: Vec<usize>, entries: Vec<Entry>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "tensor needs at least 2 modes, got {}",
                dims.len()
            )));
        }
        if let Some(k) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("mode {} has zero size", k + 1)));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            check_index(&dims, &e.index)?;
            if !seen.insert(linear_index(&dims, &e.index)) {
                return Err(Error::DuplicateIndex { index: e.index.clone() });
            }
        }
        Ok(Self { dims, entries })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_modes(&self) -> usize {
        self.dims.len()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Total number of cells, saturating at `u128::MAX`.
    pub fn num_cells(&self) -> u128 {
        num_cells(&self.dims)
    }

    /// Maps every nonzero value to label 1 and explicit zeros to label 0.
    pub fn to_binary(&self) -> SparseTensor {
        let entries = self
            .entries
            .iter()
            .map(|e| Entry {
                index: e.index.clone(),
                value: if e.value != 0.0 { 1.0 } else { 0.0 },
            })
            .collect();
        SparseTensor { dims: self.dims.clone(), entries }
    }

    /// Sub-tensor with the same dims holding only the selected entries.
    pub fn select(&self, positions: &[usize]) -> SparseTensor {
        SparseTensor {
            dims: self.dims.clone(),
            entries: positions.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }

    pub fn to_batch(&self) -> EntryBatch {
        let mut batch = EntryBatch::with_capacity(self.num_modes(), self.nnz());
        for e in &self.entries {
            batch.push(&e.index, e.value);
        }
        batch
    }
}

pub(crate) fn check_index(dims: &[usize], index: &[usize]) -> Result<()> {
    if index.len() != dims.len() {
        return Err(Error::DimensionMismatch { expected: dims.len(), got: index.len() });
    }
    for (mode, (&v, &d)) in index.iter().zip(dims).enumerate() {
        if v >= d {
            return Err(Error::IndexOutOfRange { mode: mode + 1, value: v, dim: d });
        }
    }
    Ok(())
}

fn num_cells(dims: &[usize]) -> u128 {
    dims.iter()
        .try_fold(1u128, |acc, &d| acc.checked_mul(d as u128))
        .unwrap_or(u128::MAX)
}

/// Row-major linear cell id. Callers guarantee the index is in range.
fn linear_index(dims: &[usize], index: &[usize]) -> u128 {
    index
        .iter()
        .zip(dims)
        .fold(0u128, |acc, (&i, &d)| acc.wrapping_mul(d as u128).wrapping_add(i as u128))
}

fn unlinear_index(dims: &[usize], mut id: u128) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (slot, &d) in out.iter_mut().zip(dims).rev() {
        *slot = (id % d as u128) as usize;
        id /= d as u128;
    }
    out
}

/// Reads a COO tensor. Errors carry 1-based line numbers.
pub fn parse_coo<R: BufRead>(reader: R) -> Result<SparseTensor> {
    let mut dims: Option<Vec<usize>> = None;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();

        let Some(dims) = dims.as_ref() else {
            let nums = fields
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(format!("malformed header: {e}")))?;
            let (&k, rest) = nums
                .split_first()
                .ok_or_else(|| perr("empty header".into()))?;
            if k < 2 {
                return Err(perr(format!("tensor needs at least 2 modes, got {k}")));
            }
            if rest.len() != k {
                return Err(perr(format!("header declares {k} modes but lists {} dims", rest.len())));
            }
            if let Some(m) = rest.iter().position(|&d| d == 0) {
                return Err(perr(format!("mode {} has zero size", m + 1)));
            }
            dims = Some(rest.to_vec());
            continue;
        };

        let k = dims.len();
        if fields.len() != k + 1 {
            return Err(perr(format!("expected {} fields, found {}", k + 1, fields.len())));
        }
        let mut index = Vec::with_capacity(k);
        for (mode, f) in fields[..k].iter().enumerate() {
            let v: usize = f
                .parse()
                .map_err(|_| perr(format!("malformed index {f:?} in mode {}", mode + 1)))?;
            if v >= dims[mode] {
                return Err(perr(format!(
                    "index {v} >= dim {} in mode {}",
                    dims[mode],
                    mode + 1
                )));
            }
            index.push(v);
        }
        let value: f64 = fields[k]
            .parse()
            .map_err(|_| perr(format!("malformed value {:?}", fields[k])))?;
        if !value.is_finite() {
            return Err(perr(format!("non-finite value {value}")));
        }
        if !seen.insert(linear_index(dims, &index)) {
            return Err(perr(format!("duplicate index {index:?}")));
        }
        entries.push(Entry { index, value });
    }

    let dims = dims.ok_or(Error::Parse { line: 0, msg: "missing header".into() })?;
    Ok(SparseTensor { dims, entries })
}

pub fn write_coo<W: Write>(tensor: &SparseTensor, mut out: W) -> Result<()> {
    write!(out, "{}", tensor.num_modes())?;
    for d in tensor.dims() {
        write!(out, " {d}")?;
    }
    writeln!(out)?;
    for e in tensor.entries() {
        for i in &e.index {
            write!(out, "{i} ")?;
        }
        writeln!(out, "{}", e.value)?;
    }
    Ok(())
}

/// A list of tensor cells with targets, stored flat (`num_modes` indices per
/// entry) so contiguous slices can be handed to map tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntryBatch {
    num_modes: usize,
    indices: Vec<usize>,
    targets: Vec<f64>,
}

impl EntryBatch {
    pub fn new(num_modes: usize) -> Self {
        Self { num_modes, indices: Vec::new(), targets: Vec::new() }
    }

    pub fn with_capacity(num_modes: usize, n: usize) -> Self {
        Self {
            num_modes,
            indices: Vec::with_capacity(n * num_modes),
            targets: Vec::with_capacity(n),
        }
    }

    pub fn from_parts(num_modes: usize, indices: Vec<usize>, targets: Vec<f64>) -> Result<Self> {
        if indices.len() != num_modes * targets.len() {
            return Err(Error::DimensionMismatch {
                expected: num_modes * targets.len(),
                got: indices.len(),
            });
        }
        Ok(Self { num_modes, indices, targets })
    }

    pub fn push(&mut self, index: &[usize], target: f64) {
        debug_assert_eq!(index.len(), self.num_modes);
        self.indices.extend_from_slice(index);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn index(&self, j: usize) -> &[usize] {
        &self.indices[j * self.num_modes..(j + 1) * self.num_modes]
    }

    pub fn target(&self, j: usize) -> f64 {
        self.targets[j]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.indices
            .chunks_exact(self.num_modes.max(1))
            .zip(self.targets.iter().copied())
    }

    /// Entries `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> EntryBatch {
        EntryBatch {
            num_modes: self.num_modes,
            indices: self.indices[range.start * self.num_modes..range.end * self.num_modes].to_vec(),
            targets: self.targets[range].to_vec(),
        }
    }

    pub fn extend(&mut self, other: &EntryBatch) {
        assert_eq!(self.num_modes, other.num_modes, "mode count mismatch");
        self.indices.extend_from_slice(&other.indices);
        self.targets.extend_from_slice(&other.targets);
    }

    /// Reorders entries by `perm` (entry `j` of the result is entry `perm[j]`).
    pub fn permuted(&self, perm: &[usize]) -> EntryBatch {
        let mut out = EntryBatch::with_capacity(self.num_modes, perm.len());
        for &j in perm {
            out.push(self.index(j), self.targets[j]);
        }
        out
    }

    /// Checks that every target is exactly 0 or 1.
    pub fn check_binary(&self) -> Result<()> {
        match self.targets.iter().position(|&t| t != 0.0 && t != 1.0) {
            None => Ok(()),
            Some(j) => Err(Error::InvalidArgument(format!(
                "binary target at entry {j} is {}, expected 0 or 1",
                self.targets[j]
            ))),
        }
    }

    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        if self.num_modes != dims.len() {
            return Err(Error::DimensionMismatch { expected: dims.len(), got: self.num_modes });
        }
        for (idx, _) in self.iter() {
            check_index(dims, idx)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: EntryBatch,
    pub test: EntryBatch,
    pub seed: u64,
}

/// Samples `count` distinct zero cells avoiding `taken`. Uses rejection
/// sampling while the taken fraction is at most one half and enumerates the
/// free cells otherwise.
fn sample_zero_cells(
    dims: &[usize],
    taken: &HashSet<u128>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let cells = num_cells(dims);
    let available = cells.saturating_sub(taken.len() as u128);
    if (count as u128) > available {
        return Err(Error::ZeroSpaceExhausted { needed: count, available });
    }
    if count == 0 {
        return Ok(Vec::new());
    }

    if (taken.len() as u128) * 2 > cells {
        // dense regime: the cell count is at most 2 * |taken|
        let free: Vec<u128> = (0..cells).filter(|id| !taken.contains(id)).collect();
        let picks = index::sample(rng, free.len(), count);
        return Ok(picks.iter().map(|i| unlinear_index(dims, free[i])).collect());
    }

    let mut drawn = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; dims.len()];
    while out.len() < count {
        for (slot, &d) in idx.iter_mut().zip(dims) {
            *slot = rng.random_range(0..d);
        }
        let id = linear_index(dims, &idx);
        if !taken.contains(&id) && drawn.insert(id) {
            out.push(idx.clone());
        }
    }
    Ok(out)
}

fn index_set(dims: &[usize], indices: impl IntoIterator<Item = impl AsRef<[usize]>>) -> HashSet<u128> {
    indices.into_iter().map(|i| linear_index(dims, i.as_ref())).collect()
}

/// All observed entries plus the same number of uniformly drawn zero cells
/// (target 0) that collide with neither the observed entries nor `excluded`.
pub fn balanced_sample(
    tensor: &SparseTensor,
    excluded: &HashSet<Vec<usize>>,
    seed: u64,
) -> Result<EntryBatch> {
    let dims = tensor.dims();
    for idx in excluded {
        check_index(dims, idx)?;
    }
    let mut taken = index_set(dims, tensor.entries().iter().map(|e| &e.index));
    taken.extend(excluded.iter().map(|i| linear_index(dims, i)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeros = sample_zero_cells(dims, &taken, tensor.nnz(), &mut rng)?;

    let mut batch = tensor.to_batch();
    for z in &zeros {
        batch.push(z, 0.0);
    }
    Ok(batch)
}

/// K-fold split over the observed entries. Each fold's test set holds one
/// group of observed entries plus `zero_test_count` zero cells; its training
/// set holds the remaining observed entries balanced with fresh zero cells.
pub fn split_folds(
    tensor: &SparseTensor,
    num_folds: usize,
    zero_test_count: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    if num_folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {num_folds}")));
    }
    if tensor.nnz() < num_folds {
        return Err(Error::InvalidArgument(format!(
            "{} entries cannot fill {num_folds} folds",
            tensor.nnz()
        )));
    }
    let dims = tensor.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..tensor.nnz()).collect();
    order.shuffle(&mut rng);

    let observed = index_set(dims, tensor.entries().iter().map(|e| &e.index));
    let groups = crate::parallel::partition_ranges(order.len(), num_folds);

    let mut folds = Vec::with_capacity(num_folds);
    for (f, range) in groups.iter().enumerate() {
        let fold_seed = seed.wrapping_add(f as u64 + 1);
        let mut fold_rng = ChaCha8Rng::seed_from_u64(fold_seed);

        let test_pos: Vec<usize> = order[range.clone()].to_vec();
        let train_pos: Vec<usize> = order[..range.start]
            .iter()
            .chain(&order[range.end..])
            .copied()
            .collect();

        let mut test = tensor.select(&test_pos).to_batch();
        let test_zeros = sample_zero_cells(dims, &observed, zero_test_count, &mut fold_rng)?;
        for z in &test_zeros {
            test.push(z, 0.0);
        }

        let mut excluded: HashSet<Vec<usize>> = test_zeros.into_iter().collect();
        excluded.extend(test_pos.iter().map(|&i| tensor.entries()[i].index.clone()));
        let train = balanced_sample(&tensor.select(&train_pos), &excluded, fold_rng.random())?;

        folds.push(FoldSplit { train, test, seed: fold_seed });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<SparseTensor> {
        parse_coo(s.as_bytes())
    }

    #[test]
    fn parses_simple_tensor() {
        let t = parse("2 2 2\n0 0 1.5\n1 1 -2.0\n").unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        assert_eq!(t.nnz(), 2);
        assert_eq!(t.entries()[1], Entry { index: vec![1, 1], value: -2.0 });
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let t = parse("# header next\n2 3 3\n\n# entry\n2 1 4\n").unwrap();
        assert_eq!(t.nnz(), 1);
    }

    #[test]
    fn rejects_out_of_range_index() {
        let err = parse("3 2 2 2\n0 0 2 1.0\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("index 2 >= dim 2 in mode 3"), "{err}");
    }

    #[test]
    fn rejects_duplicate_index_with_line_number() {
        let err = parse("2 2 2\n0 0 1\n0 0 2\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_single_mode_and_malformed_lines() {
        assert!(matches!(parse("1 5\n0 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("2 2 2\n0 x 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("2 2 2\n0 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("2 2 2\n0 1 nan\n"), Err(Error::Parse { line: 2, .. })));
    }

    fn grid_tensor(nnz: usize, dims: Vec<usize>) -> SparseTensor {
        let cells = num_cells(&dims) as usize;
        let entries = (0..nnz)
            .map(|i| Entry { index: unlinear_index(&dims, (i * 7 % cells) as u128), value: 1.0 + i as f64 })
            .collect();
        SparseTensor::new(dims, entries).unwrap()
    }

    #[test]
    fn balanced_sample_counts() {
        let t = grid_tensor(5, vec![10, 10]);
        let b = balanced_sample(&t, &HashSet::new(), 42).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.targets().iter().filter(|&&y| y == 0.0).count(), 5);
        let cells: HashSet<_> = b.iter().map(|(i, _)| i.to_vec()).collect();
        assert_eq!(cells.len(), 10);
    }

    #[test]
    fn balanced_sample_is_deterministic() {
        let t = grid_tensor(5, vec![10, 10]);
        let a = balanced_sample(&t, &HashSet::new(), 42).unwrap();
        let b = balanced_sample(&t, &HashSet::new(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn balanced_sample_exhausted_zero_space() {
        let entries = vec![
            Entry { index: vec![0, 0], value: 1.0 },
            Entry { index: vec![0, 1], value: 1.0 },
            Entry { index: vec![1, 0], value: 1.0 },
        ];
        let t = SparseTensor::new(vec![2, 2], entries).unwrap();
        let excluded: HashSet<_> = [vec![1, 1]].into_iter().collect();
        assert!(matches!(
            balanced_sample(&t, &excluded, 1),
            Err(Error::ZeroSpaceExhausted { needed: 3, available: 0 })
        ));
    }

    #[test]
    fn balanced_sample_dense_regime_enumerates() {
        // 6 of 9 cells observed: falls back to enumeration
        let t = grid_tensor(3, vec![3, 3]);
        let excluded: HashSet<_> = [vec![2, 2], vec![2, 1], vec![2, 0]]
            .into_iter()
            .filter(|i| !t.entries().iter().any(|e| &e.index == i))
            .collect();
        let free = 9 - 3 - excluded.len();
        if free >= 3 {
            let b = balanced_sample(&t, &excluded, 3).unwrap();
            for (idx, y) in b.iter().skip(3) {
                assert_eq!(y, 0.0);
                assert!(!excluded.contains(idx));
            }
        }
    }

    #[test]
    fn folds_partition_observed_entries() {
        let t = grid_tensor(10, vec![10, 10]);
        let folds = split_folds(&t, 5, 3, 9).unwrap();
        let mut seen = Vec::new();
        for f in &folds {
            let nz: Vec<_> = f.test.iter().filter(|(_, y)| *y != 0.0).map(|(i, _)| i.to_vec()).collect();
            assert_eq!(nz.len(), 2);
            assert_eq!(f.test.len(), 5);
            seen.extend(nz);
            let test: HashSet<_> = f.test.iter().map(|(i, _)| i.to_vec()).collect();
            assert!(f.train.iter().all(|(i, _)| !test.contains(i)));
            assert_eq!(f.train.len(), 16);
        }
        seen.sort();
        let mut all: Vec<_> = t.entries().iter().map(|e| e.index.clone()).collect();
        all.sort();
        assert_eq!(seen, all);

        let again = split_folds(&t, 5, 3, 9).unwrap();
        for (a, b) in folds.iter().zip(&again) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
        }
    }

    #[test]
    fn folds_reject_bad_arguments() {
        let t = grid_tensor(3, vec![10, 10]);
        assert!(split_folds(&t, 1, 0, 0).is_err());
        assert!(split_folds(&t, 4, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn coo_round_trip(
            dims in proptest::collection::vec(1usize..6, 2..4),
            values in proptest::collection::vec(-1e6f64..1e6, 0..20),
            seed in any::<u64>(),
        ) {
            let cells = num_cells(&dims) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = values.len().min(cells);
            let picks = index::sample(&mut rng, cells, n);
            let entries: Vec<Entry> = picks
                .iter()
                .zip(&values)
                .map(|(id, &v)| Entry { index: unlinear_index(&dims, id as u128), value: v })
                .collect();
            let t = SparseTensor::new(dims, entries).unwrap();
            let mut buf = Vec::new();
            write_coo(&t, &mut buf).unwrap();
            let back = parse_coo(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &t);
            let mut buf2 = Vec::new();
            write_coo(&back, &mut buf2).unwrap();
            prop_assert_eq!(parse_coo(buf2.as_slice()).unwrap(), t);
        }

        #[test]
        fn balanced_sample_invariants(nnz in 0usize..30, seed in any::<u64>()) {
            let t = grid_tensor(nnz, vec![8, 9]);
            let b = balanced_sample(&t, &HashSet::new(), seed).unwrap();
            prop_assert_eq!(b.len(), 2 * nnz);
            let zeros = b.iter().skip(nnz).filter(|(_, y)| *y == 0.0).count();
            prop_assert_eq!(zeros, nnz);
            let cells: HashSet<_> = b.iter().map(|(i, _)| i.to_vec()).collect();
            prop_assert_eq!(cells.len(), 2 * nnz);
        }
    }
}
