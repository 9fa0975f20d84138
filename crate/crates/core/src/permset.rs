//! Jigsaw permutation sets selected by greedy max-min Hamming distance.
//!
//! The first permutation is drawn at random from the seed; every following
//! one is the candidate whose minimum Hamming distance to the already chosen
//! permutations is largest, ties going to the lexicographically smallest
//! candidate. When `n!` is at most [`EXHAUSTIVE_LIMIT`] every permutation is
//! a candidate, otherwise each step scores [`SAMPLED_POOL`] random ones.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;
pub const SAMPLED_POOL: usize = 100_000;

/// Position → source-tile mapping over `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::Geometry(format!(
                    "mapping {mapping:?} is not a bijection on 0..{n}"
                )));
            }
            seen[m] = true;
        }
        Ok(Permutation(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        Permutation(inv)
    }
}

impl std::ops::Index<usize> for Permutation {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Number of positions at which two permutations differ.
pub fn hamming(a: &Permutation, b: &Permutation) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::InvalidPair(a.len(), b.len()));
    }
    Ok(distance(&a.0, &b.0))
}

fn distance<A: Copy + PartialEq>(a: &[A], b: &[A]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn factorial(n: usize) -> u128 {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k)).unwrap_or(u128::MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSet {
    n: usize,
    seed: u64,
    permutations: Vec<Permutation>,
    min_pairwise_hamming: Option<usize>,
    index: HashMap<Permutation, usize>,
}

impl PermutationSet {
    /// Assemble a set from explicit permutations, validating the invariants.
    pub fn from_permutations(n: usize, seed: u64, permutations: Vec<Permutation>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(n));
        }
        let mut index = HashMap::with_capacity(permutations.len());
        for (i, p) in permutations.iter().enumerate() {
            if p.len() != n {
                return Err(Error::InvalidPair(n, p.len()));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Geometry(format!("duplicate permutation {:?}", p.0)));
            }
        }
        let min_pairwise_hamming = min_pairwise(&permutations);
        Ok(PermutationSet {
            n,
            seed,
            permutations,
            min_pairwise_hamming,
            index,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.permutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutations.is_empty()
    }

    pub fn permutations(&self) -> &[Permutation] {
        &self.permutations
    }

    pub fn get(&self, label: usize) -> Option<&Permutation> {
        self.permutations.get(label)
    }

    pub fn label_of(&self, perm: &Permutation) -> Option<usize> {
        self.index.get(perm).copied()
    }

    /// Smallest Hamming distance over all pairs; `None` for a single permutation.
    pub fn min_pairwise_hamming(&self) -> Option<usize> {
        self.min_pairwise_hamming
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("n={} V={} seed={}\n", self.n, self.len(), self.seed);
        for p in &self.permutations {
            let row: Vec<String> = p.0.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_string(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let (mut n, mut v, mut seed) = (None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| err(1, format!("malformed header field `{field}`")))?;
            let bad = |_| err(1, format!("malformed header value `{field}`"));
            match key {
                "n" => n = Some(value.parse::<usize>().map_err(bad)?),
                "V" => v = Some(value.parse::<usize>().map_err(bad)?),
                "seed" => seed = Some(value.parse::<u64>().map_err(bad)?),
                _ => return Err(err(1, format!("unknown header key `{key}`"))),
            }
        }
        let (n, v, seed) = match (n, v, seed) {
            (Some(n), Some(v), Some(s)) => (n, v, s),
            _ => return Err(err(1, "header must be `n=<n> V=<V> seed=<seed>`".into())),
        };
        if n < 2 {
            return Err(err(1, format!("n={n} is below 2")));
        }

        let mut perms = Vec::with_capacity(v);
        let mut seen: HashMap<Permutation, usize> = HashMap::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(line_no, format!("bad index: {e}")))?;
            if row.len() != n {
                return Err(err(line_no, format!("expected {n} indices, found {}", row.len())));
            }
            let perm = Permutation::new(row)
                .map_err(|_| err(line_no, "row is not a permutation".into()))?;
            if let Some(first) = seen.insert(perm.clone(), line_no) {
                return Err(err(line_no, format!("duplicate of line {first}")));
            }
            perms.push(perm);
        }
        if perms.len() != v {
            return Err(err(
                text.lines().count().max(1),
                format!("header declares V={v} but {} rows follow", perms.len()),
            ));
        }
        PermutationSet::from_permutations(n, seed, perms)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

fn min_pairwise(perms: &[Permutation]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, a) in perms.iter().enumerate() {
        for b in &perms[i + 1..] {
            let d = distance(&a.0, &b.0);
            best = Some(best.map_or(d, |m| m.min(d)));
        }
    }
    best
}

/// Rearrange `p` into the lexicographically next permutation; false when `p` was the last one.
fn next_permutation(p: &mut [u8]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Greedy max-min Hamming selection of `count` permutations of `n` tiles.
pub fn generate(n: usize, count: usize, seed: u64) -> Result<PermutationSet> {
    if n < 2 {
        return Err(Error::InvalidGrid(n));
    }
    let total = factorial(n);
    if count == 0 || count as u128 > total {
        return Err(Error::InfeasibleSet {
            requested: count,
            n,
            available: total,
        });
    }
    if n > u8::MAX as usize {
        return Err(Error::InvalidGrid(n));
    }
    let mut rng = rng::rng(seed);
    let mut first: Vec<u8> = (0..n as u8).collect();
    first.shuffle(&mut rng);

    let chosen = if total <= EXHAUSTIVE_LIMIT {
        greedy_exhaustive(n, count, first)
    } else {
        greedy_sampled(n, count, first, &mut rng)
    };
    let perms = chosen
        .into_iter()
        .map(|p| Permutation(p.into_iter().map(usize::from).collect()))
        .collect();
    PermutationSet::from_permutations(n, seed, perms)
}

fn greedy_exhaustive(n: usize, count: usize, first: Vec<u8>) -> Vec<Vec<u8>> {
    // All n! permutations in lexicographic order, flattened.
    let total = factorial(n) as usize;
    let mut pool = Vec::with_capacity(total * n);
    let mut p: Vec<u8> = (0..n as u8).collect();
    loop {
        pool.extend_from_slice(&p);
        if !next_permutation(&mut p) {
            break;
        }
    }
    let mut min_dist = vec![u8::MAX; total];
    let mut chosen = vec![first];
    while chosen.len() < count {
        let last = chosen.last().expect("non-empty");
        let mut best = (0u8, usize::MAX);
        for (c, cand) in pool.chunks_exact(n).enumerate() {
            let d = distance(cand, last) as u8;
            let m = &mut min_dist[c];
            if d < *m {
                *m = d;
            }
            // Strict comparison keeps the lexicographically smallest on ties.
            if *m > best.0 {
                best = (*m, c);
            }
        }
        let c = best.1;
        chosen.push(pool[c * n..(c + 1) * n].to_vec());
    }
    chosen
}

fn greedy_sampled(n: usize, count: usize, first: Vec<u8>, rng: &mut rng::Rng) -> Vec<Vec<u8>> {
    let mut chosen = vec![first];
    let mut cand: Vec<u8> = (0..n as u8).collect();
    while chosen.len() < count {
        let mut best: Option<(usize, Vec<u8>)> = None;
        for _ in 0..SAMPLED_POOL {
            cand.shuffle(rng);
            let d = chosen.iter().map(|c| distance(c, &cand)).min().unwrap_or(n);
            if d == 0 {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bd, bp)) => d > *bd || (d == *bd && cand < *bp),
            };
            if better {
                best = Some((d, cand.clone()));
            }
        }
        // Every sampled candidate duplicated a chosen one; draw another pool.
        if let Some((_, p)) = best {
            chosen.push(p);
        }
    }
    chosen
}
