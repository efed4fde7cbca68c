//! Words, position graphs, set partitions and the partition-lattice
//! bookkeeping behind the design-expectation formula.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Largest base set handled by [`enumerate_partitions`].
pub const MAX_PARTITION_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Letter {
    I,
    U,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Terminal {
    /// `x_i` closes the monomial.
    Anchor,
    /// `−x̄_S` closes the monomial.
    Avg,
}

/// A word together with its sign, multiplicity and position graph.
///
/// Positions are 0-based here: vertex `t` is position `t + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnnotatedWord {
    pub phi: Vec<Letter>,
    pub chi: Terminal,
    pub sign: i8,
    pub len: usize,
    pub edges: Vec<(usize, usize)>,
}

impl AnnotatedWord {
    pub fn new(phi: Vec<Letter>, chi: Terminal) -> Self {
        let mut edges = Vec::new();
        let mut s = 0usize;
        let mut u = 0usize;
        for letter in &phi {
            match letter {
                Letter::I => {}
                Letter::U => {
                    edges.push((s, s + 1));
                    s += 1;
                    u += 1;
                }
                Letter::V => {
                    edges.push((s, s + 1));
                    s += 2;
                }
            }
        }
        let avg = chi == Terminal::Avg;
        if avg {
            edges.push((s, s + 1));
            s += 1;
        }
        let sign = if (u + usize::from(avg)) % 2 == 0 { 1 } else { -1 };
        Self {
            phi,
            chi,
            sign,
            len: s + 1,
            edges,
        }
    }

    pub fn degree(&self) -> usize {
        self.phi.len()
    }

    pub fn is_anchored(&self) -> bool {
        self.chi == Terminal::Anchor
    }

    /// Vertex carrying the anchor factor `x_ωᵀx_i` (the last position).
    pub fn anchor_vertex(&self) -> usize {
        self.len - 1
    }
}

impl fmt::Display for AnnotatedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.phi.is_empty() {
            write!(f, "ε")?;
        }
        for l in &self.phi {
            write!(f, "{l:?}")?;
        }
        match self.chi {
            Terminal::Anchor => write!(f, "|i"),
            Terminal::Avg => write!(f, "|avg"),
        }
    }
}

/// All `2·3^d` words of degree `d`, letters in `I < U < V` order, anchor before avg.
pub fn enumerate_words(d: usize, cap: usize) -> Result<Vec<AnnotatedWord>> {
    if d > cap {
        return Err(Error::DegreeTooLarge { degree: d, cap });
    }
    let total = 3usize.pow(d as u32);
    let mut words = Vec::with_capacity(2 * total);
    for code in 0..total {
        let mut phi = vec![Letter::I; d];
        let mut c = code;
        for slot in phi.iter_mut().rev() {
            *slot = [Letter::I, Letter::U, Letter::V][c % 3];
            c /= 3;
        }
        for chi in [Terminal::Anchor, Terminal::Avg] {
            words.push(AnnotatedWord::new(phi.clone(), chi));
        }
    }
    Ok(words)
}

/// Set partition of `{0, …, len−1}` stored as a restricted growth string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetPartition {
    rgs: Vec<usize>,
    blocks: usize,
}

impl SetPartition {
    /// Builds a partition from any labelling, relabelling blocks by first occurrence.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        let mut rgs = Vec::with_capacity(labels.len());
        for &l in labels {
            let next = map.len();
            rgs.push(*map.entry(l).or_insert(next));
        }
        Self {
            blocks: map.len(),
            rgs,
        }
    }

    /// Builds a partition from explicit blocks of 0-based elements.
    pub fn from_blocks(blocks: &[Vec<usize>]) -> Result<Self> {
        let size: usize = blocks.iter().map(Vec::len).sum();
        let mut labels = vec![usize::MAX; size];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::InvalidInput("empty block".into()));
            }
            for &t in block {
                if t >= size || labels[t] != usize::MAX {
                    return Err(Error::InvalidInput(format!(
                        "blocks do not partition 0..{size}"
                    )));
                }
                labels[t] = b;
            }
        }
        Ok(Self::from_labels(&labels))
    }

    pub fn discrete(len: usize) -> Self {
        Self {
            rgs: (0..len).collect(),
            blocks: len,
        }
    }

    pub fn single_block(len: usize) -> Self {
        Self {
            rgs: vec![0; len],
            blocks: usize::from(len > 0),
        }
    }

    pub fn base_size(&self) -> usize {
        self.rgs.len()
    }

    pub fn block_count(&self) -> usize {
        self.blocks
    }

    /// `ι_π`: element → block id.
    pub fn index(&self, t: usize) -> usize {
        self.rgs[t]
    }

    pub fn rgs(&self) -> &[usize] {
        &self.rgs
    }

    /// Blocks in increasing order of their minima, each sorted.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.blocks];
        for (t, &b) in self.rgs.iter().enumerate() {
            out[b].push(t);
        }
        out
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.blocks];
        for &b in &self.rgs {
            sizes[b] += 1;
        }
        sizes
    }

    /// True if every block of `self` lies inside a block of `other`.
    pub fn refines(&self, other: &SetPartition) -> bool {
        if self.base_size() != other.base_size() {
            return false;
        }
        let mut image = vec![usize::MAX; self.blocks];
        for (t, &b) in self.rgs.iter().enumerate() {
            let target = other.rgs[t];
            if image[b] == usize::MAX {
                image[b] = target;
            } else if image[b] != target {
                return false;
            }
        }
        true
    }
}

impl fmt::Display for SetPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks: Vec<String> = self
            .blocks()
            .iter()
            .map(|b| {
                let inner: Vec<String> = b.iter().map(|t| (t + 1).to_string()).collect();
                format!("{{{}}}", inner.join(","))
            })
            .collect();
        write!(f, "{{{}}}", blocks.join(","))
    }
}

/// Every partition of a `base_size`-element set, in lexicographic RGS order.
pub fn enumerate_partitions(base_size: usize) -> Result<Vec<SetPartition>> {
    if base_size > MAX_PARTITION_SIZE {
        return Err(Error::SizeTooLarge {
            size: base_size,
            max: MAX_PARTITION_SIZE,
        });
    }
    let mut out = Vec::new();
    let mut rgs = vec![0usize; base_size];
    fill_rgs(&mut rgs, 0, 0, &mut out);
    Ok(out)
}

fn fill_rgs(rgs: &mut [usize], pos: usize, blocks: usize, out: &mut Vec<SetPartition>) {
    if pos == rgs.len() {
        out.push(SetPartition {
            rgs: rgs.to_vec(),
            blocks,
        });
        return;
    }
    for b in 0..=blocks {
        rgs[pos] = b;
        fill_rgs(rgs, pos + 1, blocks.max(b + 1), out);
    }
}

/// `λ(ρ) = (−1)^{ℓ−|ρ|} · Π_Q (|Q|−1)!`
pub fn mobius_weight(rho: &SetPartition) -> MobiusRational {
    MobiusRational::from_int(mobius_weight_int(rho))
}

pub(crate) fn mobius_weight_int(rho: &SetPartition) -> i64 {
    let mut w: i64 = 1;
    for s in rho.block_sizes() {
        w *= (1..s as i64).product::<i64>();
    }
    if (rho.base_size() - rho.block_count()) % 2 == 1 {
        -w
    } else {
        w
    }
}

/// `ρ ∘ π`: merge the blocks of `pi` according to `rho`.
pub fn coarsen(pi: &SetPartition, rho: &SetPartition) -> Result<SetPartition> {
    if rho.base_size() != pi.block_count() {
        return Err(Error::BaseMismatch {
            expected: pi.block_count(),
            found: rho.base_size(),
        });
    }
    let labels: Vec<usize> = pi.rgs.iter().map(|&b| rho.rgs[b]).collect();
    Ok(SetPartition::from_labels(&labels))
}

/// Block-level multigraph obtained by collapsing each block of a partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotientMultigraph {
    pub block_count: usize,
    pub self_mult: Vec<u32>,
    /// `c_ab` for `a < b`, only non-zero entries.
    pub cross_mult: BTreeMap<(usize, usize), u32>,
    /// Connected components of the simple graph, ordered by smallest block.
    pub components: Vec<Vec<usize>>,
    pub anchor_block: Option<usize>,
}

impl QuotientMultigraph {
    pub fn cross(&self, a: usize, b: usize) -> u32 {
        let key = if a < b { (a, b) } else { (b, a) };
        self.cross_mult.get(&key).copied().unwrap_or(0)
    }

    pub fn edge_count(&self) -> u32 {
        self.self_mult.iter().sum::<u32>() + self.cross_mult.values().sum::<u32>()
    }
}

pub fn quotient(word: &AnnotatedWord, pi: &SetPartition) -> Result<QuotientMultigraph> {
    if pi.base_size() != word.len {
        return Err(Error::BaseMismatch {
            expected: word.len,
            found: pi.base_size(),
        });
    }
    let l = pi.block_count();
    let mut self_mult = vec![0u32; l];
    let mut cross_mult = BTreeMap::new();
    let mut parent: Vec<usize> = (0..l).collect();
    for &(s, t) in &word.edges {
        let (a, b) = (pi.index(s), pi.index(t));
        if a == b {
            self_mult[a] += 1;
        } else {
            *cross_mult.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..l {
        let r = find(&mut parent, a);
        by_root.entry(r).or_default().push(a);
    }
    let mut components: Vec<Vec<usize>> = by_root.into_values().collect();
    components.sort_by_key(|c| c[0]);
    Ok(QuotientMultigraph {
        block_count: l,
        self_mult,
        cross_mult,
        components,
        anchor_block: word.is_anchored().then(|| pi.index(word.anchor_vertex())),
    })
}

fn find(parent: &mut [usize], a: usize) -> usize {
    let mut r = a;
    while parent[r] != r {
        r = parent[r];
    }
    let mut x = a;
    while parent[x] != r {
        let next = parent[x];
        parent[x] = r;
        x = next;
    }
    r
}

/// `ψ0 = (m−1)_ℓ/(n−1)_ℓ`, `ψ1 = (m−1)_{ℓ−1}/(n−1)_{ℓ−1}`.
pub fn srswor_class_weights(block_count: usize, m: usize, n: usize) -> (MobiusRational, MobiusRational) {
    let psi0 = falling_ratio(m as i128 - 1, n as i128 - 1, block_count);
    let psi1 = falling_ratio(m as i128 - 1, n as i128 - 1, block_count.saturating_sub(1));
    (psi0, psi1)
}

fn falling_ratio(a: i128, b: i128, len: usize) -> MobiusRational {
    let mut acc = MobiusRational::one();
    for k in 0..len as i128 {
        if a - k == 0 {
            return MobiusRational::zero();
        }
        acc = acc.mul(&MobiusRational::new(a - k, b - k));
    }
    acc
}

/// Exact reduced fraction with positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MobiusRational {
    num: i128,
    den: i128,
}

impl MobiusRational {
    /// # Panics
    /// If `den == 0`.
    pub fn new(num: i128, den: i128) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den).max(1);
        let s = if den < 0 { -1 } else { 1 };
        Self {
            num: s * num / g,
            den: s * den / g,
        }
    }

    pub fn from_int(v: i64) -> Self {
        Self {
            num: v as i128,
            den: 1,
        }
    }

    pub fn zero() -> Self {
        Self::from_int(0)
    }

    pub fn one() -> Self {
        Self::from_int(1)
    }

    pub fn numerator(&self) -> i128 {
        self.num
    }

    pub fn denominator(&self) -> i128 {
        self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    /// # Panics
    /// On `i128` overflow, which needs populations far beyond desk scale.
    pub fn mul(&self, other: &Self) -> Self {
        let g1 = gcd(self.num, other.den).max(1);
        let g2 = gcd(other.num, self.den).max(1);
        let num = (self.num / g1)
            .checked_mul(other.num / g2)
            .expect("rational overflow");
        let den = (self.den / g2)
            .checked_mul(other.den / g1)
            .expect("rational overflow");
        Self::new(num, den)
    }

    /// # Panics
    /// On `i128` overflow.
    pub fn add(&self, other: &Self) -> Self {
        let g = gcd(self.den, other.den).max(1);
        let lhs = self.num.checked_mul(other.den / g).expect("rational overflow");
        let rhs = other.num.checked_mul(self.den / g).expect("rational overflow");
        let den = (self.den / g).checked_mul(other.den).expect("rational overflow");
        Self::new(lhs.checked_add(rhs).expect("rational overflow"), den)
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for MobiusRational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use Letter::*;

    fn bell(k: usize) -> usize {
        // Bell triangle
        let mut row = vec![1usize];
        for _ in 0..k {
            let mut next = vec![*row.last().unwrap()];
            for v in &row {
                let last = *next.last().unwrap();
                next.push(last + v);
            }
            row = next;
        }
        row[0]
    }

    #[test]
    fn word_counts_and_degree_cap() {
        for d in 0..=3 {
            assert_eq!(enumerate_words(d, 4).unwrap().len(), 2 * 3usize.pow(d as u32));
        }
        assert!(matches!(
            enumerate_words(4, 3),
            Err(Error::DegreeTooLarge { degree: 4, cap: 3 })
        ));
    }

    #[test]
    fn degree_zero_words() {
        let w = enumerate_words(0, 3).unwrap();
        assert_eq!(w[0].len, 1);
        assert!(w[0].edges.is_empty());
        assert_eq!(w[1].len, 2);
        assert_eq!(w[1].edges, vec![(0, 1)]);
        assert_eq!(w[1].sign, -1);
    }

    #[test]
    fn u_anchor_word() {
        let w = AnnotatedWord::new(vec![U], Terminal::Anchor);
        assert_eq!((w.sign, w.len), (-1, 2));
        assert_eq!(w.edges, vec![(0, 1)]);
    }

    #[test]
    fn cursor_construction() {
        let w = AnnotatedWord::new(vec![U, V, I], Terminal::Avg);
        assert_eq!(w.edges, vec![(0, 1), (1, 2), (3, 4)]);
        assert_eq!(w.len, 5);
        assert_eq!(w.sign, 1);
        for w in enumerate_words(3, 3).unwrap() {
            let u = w.phi.iter().filter(|l| **l == U).count();
            let v = w.phi.iter().filter(|l| **l == V).count();
            let avg = usize::from(w.chi == Terminal::Avg);
            assert_eq!(w.len, 1 + u + 2 * v + avg);
            assert_eq!(w.edges.len(), u + v + avg);
            assert_eq!(w.sign == -1, (u + avg) % 2 == 1);
        }
    }

    #[test]
    fn partition_counts_follow_bell_numbers() {
        for k in 0..=7 {
            let parts = enumerate_partitions(k).unwrap();
            assert_eq!(parts.len(), bell(k));
            let mut sorted = parts.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), parts.len());
        }
        assert!(matches!(enumerate_partitions(11), Err(Error::SizeTooLarge { .. })));
    }

    #[test]
    fn size_two_partitions() {
        let p = enumerate_partitions(2).unwrap();
        assert_eq!(p[0].to_string(), "{{1,2}}");
        assert_eq!(p[1].to_string(), "{{1},{2}}");
    }

    #[test]
    fn mobius_weights() {
        assert_eq!(mobius_weight(&SetPartition::discrete(4)), MobiusRational::one());
        assert_eq!(mobius_weight(&SetPartition::single_block(3)).numerator(), 2);
        assert_eq!(mobius_weight(&SetPartition::single_block(4)).numerator(), -6);
    }

    #[test]
    fn mobius_counts_injections() {
        for l in 1..=5 {
            let parts = enumerate_partitions(l).unwrap();
            for n in 1..=8i64 {
                let total: i64 = parts
                    .iter()
                    .map(|rho| mobius_weight_int(rho) * n.pow(rho.block_count() as u32))
                    .sum();
                let falling: i64 = (0..l as i64).map(|k| n - k).product();
                assert_eq!(total, falling, "l={l}, n={n}");
            }
        }
    }

    #[test]
    fn coarsen_examples() {
        let pi = SetPartition::from_blocks(&[vec![0, 2], vec![1], vec![3]]).unwrap();
        let rho = SetPartition::from_blocks(&[vec![0, 1], vec![2]]).unwrap();
        let out = coarsen(&pi, &rho).unwrap();
        assert_eq!(out, SetPartition::from_blocks(&[vec![0, 1, 2], vec![3]]).unwrap());
        assert_eq!(coarsen(&pi, &SetPartition::discrete(3)).unwrap(), pi);
        assert_eq!(
            coarsen(&pi, &SetPartition::single_block(3)).unwrap(),
            SetPartition::single_block(4)
        );
        assert!(matches!(
            coarsen(&pi, &SetPartition::discrete(2)),
            Err(Error::BaseMismatch { .. })
        ));
    }

    #[test]
    fn coarsen_is_monotone_and_associative() {
        for pi in enumerate_partitions(5).unwrap() {
            let rhos = enumerate_partitions(pi.block_count()).unwrap();
            for rho in &rhos {
                let sigma = coarsen(&pi, rho).unwrap();
                assert!(pi.refines(&sigma));
                for tau in enumerate_partitions(sigma.block_count()).unwrap() {
                    let nested = coarsen(&sigma, &tau).unwrap();
                    let composed = coarsen(rho, &tau).unwrap();
                    assert_eq!(nested, coarsen(&pi, &composed).unwrap());
                }
            }
        }
    }

    #[test]
    fn quotient_examples() {
        let w = AnnotatedWord::new(vec![U], Terminal::Anchor);
        let q = quotient(&w, &SetPartition::single_block(2)).unwrap();
        assert_eq!((q.block_count, q.self_mult.clone()), (1, vec![1]));
        assert!(q.cross_mult.is_empty());
        assert_eq!(q.anchor_block, Some(0));

        let q = quotient(&w, &SetPartition::discrete(2)).unwrap();
        assert_eq!(q.cross(0, 1), 1);
        assert_eq!(q.anchor_block, Some(1));

        let w = AnnotatedWord::new(vec![V], Terminal::Avg);
        for pi in enumerate_partitions(4).unwrap() {
            let q = quotient(&w, &pi).unwrap();
            assert_eq!(q.edge_count(), 2);
            assert_eq!(q.anchor_block, None);
        }
        assert!(quotient(&w, &SetPartition::discrete(3)).is_err());
    }

    #[test]
    fn quotient_components() {
        let w = AnnotatedWord::new(vec![V], Terminal::Avg);
        let q = quotient(&w, &SetPartition::discrete(4)).unwrap();
        assert_eq!(q.components, vec![vec![0, 1], vec![2, 3]]);
        let pi = SetPartition::from_blocks(&[vec![0, 3], vec![1], vec![2]]).unwrap();
        let q = quotient(&w, &pi).unwrap();
        assert_eq!(q.components, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn srswor_weights() {
        let (p0, p1) = srswor_class_weights(2, 3, 5);
        assert_eq!((p0, p1), (MobiusRational::new(1, 6), MobiusRational::new(1, 2)));
        let (p0, p1) = srswor_class_weights(1, 4, 9);
        assert_eq!((p0, p1), (MobiusRational::new(3, 8), MobiusRational::one()));
        let (p0, p1) = srswor_class_weights(4, 4, 9);
        assert!(p0.is_zero());
        assert_eq!(p1, MobiusRational::new(3 * 2, 8 * 7 * 6));
        // ℓ beyond n: zero numerator wins over zero denominator
        let (p0, _) = srswor_class_weights(6, 3, 4);
        assert!(p0.is_zero());
    }

    #[test]
    fn rational_arithmetic() {
        let a = MobiusRational::new(2, -4);
        assert_eq!((a.numerator(), a.denominator()), (-1, 2));
        assert_eq!(a.add(&MobiusRational::new(1, 3)), MobiusRational::new(-1, 6));
        assert_eq!(a.mul(&MobiusRational::new(4, 3)), MobiusRational::new(-2, 3));
        assert_eq!(a.to_string(), "-1/2");
    }
}
