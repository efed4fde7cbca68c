//! Gram-level evaluation of all-assignment aggregates and assembly of
//! Neumann weights through Möbius correction on the partition lattice.
//!
//! Two routes are implemented:
//!
//! * a *literal* route that evaluates one aggregate for a fixed unit `i`
//!   (masking, when requested, zeroes coordinate `i` of every label sum);
//! * a *vectorized* route that returns the aggregate for every `i` at once.
//!   The anchor factor `G(ω, i)` becomes an edge to an extra output vertex,
//!   and masked sums are obtained by inclusion–exclusion over the blocks
//!   that are forced onto `i`.
//!
//! Components of a quotient multigraph are contracted by variable
//! elimination with pairwise factors. Words of degree at most 3 produce
//! graphs with at most five edges, so they never need a vertex of degree
//! three to be eliminated.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::combinatorics::{
    coarsen, enumerate_partitions, enumerate_words, mobius_weight_int, quotient,
    srswor_class_weights, AnnotatedWord, QuotientMultigraph, SetPartition,
};
use crate::design_matrix::NormalizedDesign;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub degree_cap: usize,
    pub memoize: bool,
    /// Apply `G` as `X(Xᵀv)` instead of storing the `n×n` Gram matrix.
    pub matrix_free: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            degree_cap: 3,
            memoize: true,
            matrix_free: false,
        }
    }
}

#[derive(Debug, Clone)]
enum ComponentValue {
    Scalar(f64),
    Vector(Arc<DVector<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Mode {
    Unmasked,
    Masked,
}

/// Shared, read-only view of a design for aggregate evaluation.
pub struct GramContext {
    x: DMatrix<f64>,
    g: DVector<f64>,
    centered: bool,
    config: EngineConfig,
    powers: Mutex<HashMap<u32, Arc<DMatrix<f64>>>>,
    memo: Mutex<HashMap<(ComponentShape, Mode), ComponentValue>>,
    tables: Mutex<HashMap<usize, Arc<DegreeTable>>>,
}

impl std::fmt::Debug for GramContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GramContext")
            .field("n", &self.n())
            .field("p", &self.p())
            .field("config", &self.config)
            .finish()
    }
}

impl GramContext {
    pub fn new(design: &NormalizedDesign) -> Self {
        Self::with_config(design, EngineConfig::default())
    }

    pub fn with_config(design: &NormalizedDesign, config: EngineConfig) -> Self {
        Self::from_matrix(design.matrix().clone(), config)
    }

    /// Builds a context from any matrix; the design normalization is not checked.
    pub fn from_matrix(x: DMatrix<f64>, config: EngineConfig) -> Self {
        let g = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.norm_squared()));
        let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        let centered = x
            .column_iter()
            .all(|c| c.sum().abs() <= 1e-10 * x.nrows() as f64 * scale);
        if config.degree_cap > 3 {
            log::warn!(
                "degree cap {} above 3: cost grows like Bell(2d+2)",
                config.degree_cap
            );
        }
        Self {
            x,
            g,
            centered,
            config,
            powers: Mutex::new(HashMap::new()),
            memo: Mutex::new(HashMap::new()),
            tables: Mutex::new(HashMap::new()),
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// `g = diag(G)`.
    pub fn diag(&self) -> &DVector<f64> {
        &self.g
    }

    /// `Gv`, matrix-free when configured.
    pub fn apply_gram(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_power(1, v)
    }

    /// Column `G(:, i)`.
    pub fn gram_column(&self, i: usize) -> DVector<f64> {
        &self.x * self.x.row(i).transpose()
    }

    /// Number of memoized component values (for diagnostics).
    pub fn memo_len(&self) -> usize {
        self.memo.lock().unwrap().len()
    }

    fn power(&self, c: u32) -> Arc<DMatrix<f64>> {
        if let Some(m) = self.powers.lock().unwrap().get(&c) {
            return Arc::clone(m);
        }
        let computed = if c == 1 {
            &self.x * self.x.transpose()
        } else {
            self.power(1).map(|v| v.powi(c as i32))
        };
        let computed = Arc::new(computed);
        self.powers
            .lock()
            .unwrap()
            .entry(c)
            .or_insert_with(|| Arc::clone(&computed));
        computed
    }

    fn apply_power(&self, c: u32, v: &DVector<f64>) -> DVector<f64> {
        if c == 1 && self.config.matrix_free {
            &self.x * self.x.tr_mul(v)
        } else {
            &*self.power(c) * v
        }
    }

    fn g_pow(&self, e: u32) -> DVector<f64> {
        self.g.map(|v| v.powi(e as i32))
    }
}

// ---------------------------------------------------------------------------
// Factor graphs

#[derive(Debug, Clone)]
enum Factor {
    /// `G^{∘c}`, symmetric.
    Power(u32),
    /// Rows index the lower-numbered endpoint.
    Dense(Arc<DMatrix<f64>>),
}

#[derive(Debug, Clone)]
struct FactorGraph {
    unary: Vec<Option<DVector<f64>>>,
    edges: BTreeMap<(usize, usize), Factor>,
    output: Option<usize>,
}

impl FactorGraph {
    fn new(k: usize) -> Self {
        Self {
            unary: vec![None; k],
            edges: BTreeMap::new(),
            output: None,
        }
    }

    fn mul_unary(&mut self, v: usize, vec: DVector<f64>) {
        self.unary[v] = Some(match self.unary[v].take() {
            None => vec,
            Some(u) => u.component_mul(&vec),
        });
    }

    fn add_edge(&mut self, ctx: &GramContext, a: usize, b: usize, f: Factor) {
        let (key, f) = if a < b {
            ((a, b), f)
        } else {
            let f = match f {
                Factor::Dense(m) => Factor::Dense(Arc::new(m.transpose())),
                p => p,
            };
            ((b, a), f)
        };
        let merged = match self.edges.remove(&key) {
            None => f,
            Some(Factor::Power(c1)) if matches!(f, Factor::Power(_)) => {
                let Factor::Power(c2) = f else { unreachable!() };
                Factor::Power(c1 + c2)
            }
            Some(old) => Factor::Dense(Arc::new(
                dense(ctx, &old).component_mul(&dense(ctx, &f)),
            )),
        };
        self.edges.insert(key, merged);
    }

    fn neighbours(&self, v: usize) -> Vec<usize> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    fn take_edge(&mut self, v: usize, w: usize) -> (Factor, bool) {
        let key = (v.min(w), v.max(w));
        (self.edges.remove(&key).expect("edge"), v < w)
    }

    /// Eliminates every non-output vertex, min-degree first unless `order` is given.
    fn contract(mut self, ctx: &GramContext, order: Option<&[usize]>) -> Result<ComponentValue> {
        let n = ctx.n();
        let k = self.unary.len();
        let mut alive: Vec<bool> = vec![true; k];
        let mut scalar = 1.0;
        let mut remaining: Vec<usize> = (0..k).filter(|&v| Some(v) != self.output).collect();
        let mut step = 0;
        while !remaining.is_empty() {
            let v = match order {
                Some(o) => o[step],
                None => *remaining
                    .iter()
                    .min_by_key(|&&v| (self.neighbours(v).len(), v))
                    .unwrap(),
            };
            step += 1;
            remaining.retain(|&w| w != v);
            alive[v] = false;
            let nb = self.neighbours(v);
            let u = self.unary[v].take();
            match nb.as_slice() {
                [] => {
                    scalar *= u.map_or(n as f64, |u| u.sum());
                }
                [b] => {
                    let (f, v_is_row) = self.take_edge(v, *b);
                    let u = u.unwrap_or_else(|| DVector::from_element(n, 1.0));
                    let msg = match &f {
                        Factor::Power(c) => ctx.apply_power(*c, &u),
                        Factor::Dense(m) if v_is_row => m.tr_mul(&u),
                        Factor::Dense(m) => &**m * &u,
                    };
                    self.mul_unary(*b, msg);
                }
                [b, c] => {
                    let (fb, vb_row) = self.take_edge(v, *b);
                    let (fc, vc_row) = self.take_edge(v, *c);
                    let merged = pair_product(ctx, &fb, vb_row, &fc, vc_row, u.as_ref());
                    self.add_edge(ctx, *b, *c, Factor::Dense(Arc::new(merged)));
                }
                more => return Err(Error::UnsupportedComponent(more.len())),
            }
            if scalar == 0.0 {
                // remaining factors cannot revive a zero product
                break;
            }
        }
        Ok(match self.output {
            None => ComponentValue::Scalar(scalar),
            Some(o) => {
                let v = self.unary[o]
                    .take()
                    .unwrap_or_else(|| DVector::from_element(n, 1.0));
                ComponentValue::Vector(Arc::new(v * scalar))
            }
        })
    }
}

fn dense(ctx: &GramContext, f: &Factor) -> DMatrix<f64> {
    match f {
        Factor::Power(c) => (*ctx.power(*c)).clone(),
        Factor::Dense(m) => (**m).clone(),
    }
}

/// `Σ_v F_vb(v, ·) u(v) F_vc(v, ·)` as a matrix indexed by `(x_b, x_c)`.
fn pair_product(
    ctx: &GramContext,
    fb: &Factor,
    vb_row: bool,
    fc: &Factor,
    vc_row: bool,
    u: Option<&DVector<f64>>,
) -> DMatrix<f64> {
    if let (Factor::Power(1), Factor::Power(1)) = (fb, fc) {
        // X (Xᵀ diag(u) X) Xᵀ without forming G
        let x = &ctx.x;
        let mut scaled = x.clone();
        if let Some(u) = u {
            for (mut row, w) in scaled.row_iter_mut().zip(u.iter()) {
                row *= *w;
            }
        }
        let core = x.tr_mul(&scaled);
        return x * core * x.transpose();
    }
    let oriented = |f: &Factor, v_row: bool| -> DMatrix<f64> {
        match f {
            Factor::Power(c) => (*ctx.power(*c)).clone(),
            Factor::Dense(m) if v_row => (**m).clone(),
            Factor::Dense(m) => m.transpose(),
        }
    };
    let a = oriented(fb, vb_row);
    let mut b = oriented(fc, vc_row);
    if let Some(u) = u {
        for (mut row, w) in b.row_iter_mut().zip(u.iter()) {
            row *= *w;
        }
    }
    a.tr_mul(&b)
}

// ---------------------------------------------------------------------------
// Component shapes

/// A connected component of a quotient multigraph with local vertex ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) struct ComponentShape {
    self_mult: Vec<u32>,
    /// `(a, b, c_ab)` with `a < b`, sorted.
    cross: Vec<(usize, usize, u32)>,
    anchor: Option<usize>,
}

impl ComponentShape {
    fn from_quotient(q: &QuotientMultigraph, blocks: &[usize]) -> Self {
        let local = |a: usize| blocks.binary_search(&a).ok();
        let self_mult = blocks.iter().map(|&a| q.self_mult[a]).collect();
        let mut cross: Vec<(usize, usize, u32)> = q
            .cross_mult
            .iter()
            .filter_map(|(&(a, b), &c)| Some((local(a)?, local(b)?, c)))
            .collect();
        cross.sort_unstable();
        Self {
            self_mult,
            cross,
            anchor: q.anchor_block.and_then(local),
        }
    }

    fn len(&self) -> usize {
        self.self_mult.len()
    }

    fn relabel(&self, perm: &[usize]) -> Self {
        // perm[new] = old
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut cross: Vec<(usize, usize, u32)> = self
            .cross
            .iter()
            .map(|&(a, b, c)| (inv[a].min(inv[b]), inv[a].max(inv[b]), c))
            .collect();
        cross.sort_unstable();
        Self {
            self_mult: perm.iter().map(|&o| self.self_mult[o]).collect(),
            cross,
            anchor: self.anchor.map(|a| inv[a]),
        }
    }

    /// Lexicographically smallest relabelling, searched only over
    /// permutations that preserve a vertex invariant.
    fn canonical(&self) -> Self {
        let k = self.len();
        let invariant = |v: usize| {
            let mut inc: Vec<u32> = self
                .cross
                .iter()
                .filter(|&&(a, b, _)| a == v || b == v)
                .map(|&(_, _, c)| c)
                .collect();
            inc.sort_unstable();
            (self.anchor != Some(v), self.self_mult[v], inc)
        };
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&v| invariant(v));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for &v in &order {
            match groups.last_mut() {
                Some(g) if invariant(g[0]) == invariant(v) => g.push(v),
                _ => groups.push(vec![v]),
            }
        }
        let mut best: Option<Self> = None;
        let mut perm = Vec::with_capacity(k);
        search_group_perms(&groups, 0, &mut perm, &mut |p| {
            let cand = self.relabel(p);
            if best.as_ref().is_none_or(|b| cand < *b) {
                best = Some(cand);
            }
        });
        best.unwrap_or_else(|| self.clone())
    }

    /// `Some(order)` when the component is a simple path with unit
    /// multiplicities and the anchor (if any) at one end.
    fn path_order(&self) -> Option<Vec<usize>> {
        let k = self.len();
        if self.cross.len() + 1 != k || self.cross.iter().any(|&(_, _, c)| c != 1) {
            return None;
        }
        let mut adj = vec![Vec::new(); k];
        for &(a, b, _) in &self.cross {
            adj[a].push(b);
            adj[b].push(a);
        }
        if adj.iter().any(|n| n.len() > 2) {
            return None;
        }
        let start = match self.anchor {
            Some(a) if adj[a].len() <= 1 => a,
            Some(_) => return None,
            None => (0..k).find(|&v| adj[v].len() <= 1)?,
        };
        let mut order = vec![start];
        let mut prev = usize::MAX;
        let mut cur = start;
        while let Some(&next) = adj[cur].iter().find(|&&w| w != prev) {
            order.push(next);
            prev = cur;
            cur = next;
        }
        (order.len() == k).then_some(order)
    }
}

fn search_group_perms(
    groups: &[Vec<usize>],
    gi: usize,
    perm: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if gi == groups.len() {
        visit(perm);
        return;
    }
    let group = &groups[gi];
    let mut items = group.clone();
    permute(&mut items, 0, &mut |p| {
        let base = perm.len();
        perm.extend_from_slice(p);
        search_group_perms(groups, gi + 1, perm, visit);
        perm.truncate(base);
    });
}

fn permute(items: &mut [usize], k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for j in k..items.len() {
        items.swap(k, j);
        permute(items, k + 1, visit);
        items.swap(k, j);
    }
}

// ---------------------------------------------------------------------------
// Component evaluation

impl GramContext {
    fn component(&self, shape: &ComponentShape, mode: Mode) -> Result<ComponentValue> {
        if !self.config.memoize {
            return self.evaluate(shape, mode);
        }
        let key = (shape.canonical(), mode);
        if let Some(v) = self.memo.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        // computed outside the lock; concurrent writers store identical values
        let value = self.evaluate(&key.0, mode)?;
        self.memo.lock().unwrap().insert(key, value.clone());
        Ok(value)
    }

    fn evaluate(&self, shape: &ComponentShape, mode: Mode) -> Result<ComponentValue> {
        match mode {
            Mode::Unmasked => self.forced_onto_output(shape, 0, shape.anchor.is_some(), None),
            Mode::Masked => {
                let k = shape.len();
                let mut total = DVector::zeros(self.n());
                for t in 0u32..(1 << k) {
                    let term = match self.forced_onto_output(shape, t, true, None)? {
                        ComponentValue::Vector(v) => v,
                        ComponentValue::Scalar(_) => unreachable!(),
                    };
                    if t.count_ones() % 2 == 0 {
                        total += &*term;
                    } else {
                        total -= &*term;
                    }
                }
                Ok(ComponentValue::Vector(Arc::new(total)))
            }
        }
    }

    /// Sum over labelings where the blocks in bitmask `t` are all labelled `i`,
    /// returned as a function of `i` (output vertex) when `vector` is set.
    fn forced_onto_output(
        &self,
        shape: &ComponentShape,
        t: u32,
        vector: bool,
        order: Option<&[usize]>,
    ) -> Result<ComponentValue> {
        let k = shape.len();
        let in_t = |a: usize| t & (1 << a) != 0;
        let rest: Vec<usize> = (0..k).filter(|&a| !in_t(a)).collect();
        let local = |a: usize| rest.binary_search(&a).ok();
        let o = rest.len();
        let mut graph = FactorGraph::new(if vector { o + 1 } else { o });
        let mut exponent = 0u32;
        let mut to_output = vec![0u32; o];
        for (a, &m) in shape.self_mult.iter().enumerate() {
            match local(a) {
                Some(la) if m > 0 => graph.unary[la] = Some(self.g_pow(m)),
                Some(_) => {}
                None => exponent += m,
            }
        }
        for &(a, b, c) in &shape.cross {
            match (local(a), local(b)) {
                (Some(la), Some(lb)) => graph.add_edge(self, la, lb, Factor::Power(c)),
                (Some(la), None) => to_output[la] += c,
                (None, Some(lb)) => to_output[lb] += c,
                (None, None) => exponent += c,
            }
        }
        if let Some(a) = shape.anchor {
            match local(a) {
                Some(la) => to_output[la] += 1,
                None => exponent += 1,
            }
        }
        if vector {
            for (lb, &c) in to_output.iter().enumerate() {
                if c > 0 {
                    graph.add_edge(self, lb, o, Factor::Power(c));
                }
            }
            if exponent > 0 {
                graph.unary[o] = Some(self.g_pow(exponent));
            }
            graph.output = Some(o);
        } else {
            debug_assert!(t == 0 && shape.anchor.is_none());
        }
        graph.contract(self, order)
    }

    /// Literal single-unit evaluation of one component.
    ///
    /// `anchor_init` multiplies the anchor block's unary factor (e.g. `G(:,i)`
    /// or `Gr`); `mask` removes label `i` from every block.
    fn literal(
        &self,
        shape: &ComponentShape,
        anchor_init: Option<&DVector<f64>>,
        mask: Option<usize>,
    ) -> Result<f64> {
        let k = shape.len();
        let mut unary: Vec<Option<DVector<f64>>> = shape
            .self_mult
            .iter()
            .map(|&m| (m > 0).then(|| self.g_pow(m)))
            .collect();
        if let (Some(a), Some(init)) = (shape.anchor, anchor_init) {
            unary[a] = Some(match unary[a].take() {
                Some(u) => u.component_mul(init),
                None => init.clone(),
            });
        }
        if let Some(i) = mask {
            for u in unary.iter_mut() {
                let v = u.get_or_insert_with(|| DVector::from_element(self.n(), 1.0));
                v[i] = 0.0;
            }
        }
        if let Some(order) = shape.path_order() {
            return Ok(self.path_fold(&order, unary));
        }
        let mut graph = FactorGraph::new(k);
        graph.unary = unary;
        for &(a, b, c) in &shape.cross {
            graph.add_edge(self, a, b, Factor::Power(c));
        }
        match graph.contract(self, None)? {
            ComponentValue::Scalar(s) => Ok(s),
            ComponentValue::Vector(_) => unreachable!(),
        }
    }

    /// Sequential fold along a path: multiply by the unary at each block,
    /// apply `G` across each edge, then sum.
    fn path_fold(&self, order: &[usize], mut unary: Vec<Option<DVector<f64>>>) -> f64 {
        let n = self.n();
        let mut v = unary[order[0]]
            .take()
            .unwrap_or_else(|| DVector::from_element(n, 1.0));
        for &next in &order[1..] {
            v = self.apply_gram(&v);
            if let Some(u) = unary[next].take() {
                v.component_mul_assign(&u);
            }
        }
        v.sum()
    }
}

// ---------------------------------------------------------------------------
// Public aggregate API

/// One all-assignment aggregate request for a fixed unit.
#[derive(Debug, Clone)]
pub struct AggregateRequest {
    pub word: AnnotatedWord,
    pub partition: SetPartition,
    pub unit: Option<usize>,
    pub mask: bool,
}

/// `Φ^all_{θ,π}(X; i)` or its masked version `Φ^{all,(−i)}_{θ,π}(X; i)`.
pub fn all_assignment_aggregate(req: &AggregateRequest, ctx: &GramContext) -> Result<f64> {
    let needs_unit = req.word.is_anchored() || req.mask;
    let unit = match (req.unit, needs_unit) {
        (Some(i), _) if i >= ctx.n() => {
            return Err(Error::InvalidInput(format!("unit {i} out of range")))
        }
        (None, true) => {
            return Err(Error::InvalidInput(
                "anchored or masked aggregate needs a unit index".into(),
            ))
        }
        (u, _) => u,
    };
    let q = quotient(&req.word, &req.partition)?;
    literal_product(ctx, &q, unit, req.mask)
}

fn literal_product(
    ctx: &GramContext,
    q: &QuotientMultigraph,
    unit: Option<usize>,
    mask: bool,
) -> Result<f64> {
    let anchor_col = match (q.anchor_block, unit) {
        (Some(_), Some(i)) => Some(ctx.gram_column(i)),
        _ => None,
    };
    let mut total = 1.0;
    for comp in &q.components {
        let shape = ComponentShape::from_quotient(q, comp);
        let init = shape.anchor.and(anchor_col.as_ref());
        total *= ctx.literal(&shape, init, unit.filter(|_| mask))?;
        if total == 0.0 {
            break;
        }
    }
    Ok(total)
}

/// Injective Class-0 / Class-1 aggregates `(Φ_{π,0}, Φ_{π,1})` for unit `i`.
pub fn class_aggregates(
    word: &AnnotatedWord,
    pi: &SetPartition,
    i: usize,
    ctx: &GramContext,
) -> Result<(f64, f64)> {
    if pi.base_size() != word.len {
        return Err(Error::BaseMismatch {
            expected: word.len,
            found: pi.base_size(),
        });
    }
    let mut phi0 = 0.0;
    let mut phi1 = 0.0;
    for rho in enumerate_partitions(pi.block_count())? {
        let lambda = mobius_weight_int(&rho) as f64;
        let q = quotient(word, &coarsen(pi, &rho)?)?;
        let all = literal_product(ctx, &q, Some(i), false)?;
        let masked = literal_product(ctx, &q, Some(i), true)?;
        phi0 += lambda * masked;
        phi1 += lambda * (all - masked);
    }
    Ok((phi0, phi1))
}

// ---------------------------------------------------------------------------
// Möbius coefficients

/// For a base of size `L`: for each `ℓ`, the sparse coefficients
/// `Σ_{π: |π| = ℓ} Σ_{ρ: ρ∘π = σ} λ(ρ)` over target partitions `σ`.
struct CoarseningTable {
    partitions: Vec<SetPartition>,
    by_block_count: Vec<Vec<(usize, i64)>>,
}

fn coarsening_table(base: usize) -> Result<Arc<CoarseningTable>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<CoarseningTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().unwrap().get(&base) {
        return Ok(Arc::clone(t));
    }
    let partitions = enumerate_partitions(base)?;
    let index: HashMap<&[usize], usize> = partitions
        .iter()
        .enumerate()
        .map(|(k, p)| (p.rgs(), k))
        .collect();
    let mut acc: Vec<BTreeMap<usize, i64>> = vec![BTreeMap::new(); base + 1];
    let mut rho_cache: HashMap<usize, Vec<(SetPartition, i64)>> = HashMap::new();
    for pi in &partitions {
        let l = pi.block_count();
        let rhos = match rho_cache.get(&l) {
            Some(r) => r,
            None => {
                let r = enumerate_partitions(l)?
                    .into_iter()
                    .map(|rho| {
                        let w = mobius_weight_int(&rho);
                        (rho, w)
                    })
                    .collect();
                rho_cache.entry(l).or_insert(r)
            }
        };
        for (rho, w) in rhos {
            let sigma = coarsen(pi, rho)?;
            *acc[l].entry(index[sigma.rgs()]).or_insert(0) += w;
        }
    }
    let table = Arc::new(CoarseningTable {
        by_block_count: acc
            .into_iter()
            .map(|m| m.into_iter().filter(|&(_, c)| c != 0).collect())
            .collect(),
        partitions: partitions.clone(),
    });
    cache.lock().unwrap().insert(base, Arc::clone(&table));
    Ok(table)
}

// ---------------------------------------------------------------------------
// Neumann weights

/// `ξ^[d](m; X)`, one weight per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NeumannWeightVector {
    pub d: usize,
    pub m: usize,
    pub xi: Vec<f64>,
}

/// Signed injective aggregates summed over words, grouped by `(L, ℓ)`.
/// Independent of `m`; [`DegreeTable::weights`] applies the SRSWOR factors.
#[derive(Debug, Clone)]
pub struct DegreeTable {
    pub d: usize,
    n: usize,
    entries: BTreeMap<(usize, usize), (DVector<f64>, DVector<f64>)>,
    centered: bool,
}

impl DegreeTable {
    pub fn weights(&self, m: usize) -> Result<NeumannWeightVector> {
        check_m(m, self.n)?;
        let mut xi = DVector::zeros(self.n);
        if !(m == self.n && self.centered) {
            for (&(len, l), (t0, t1)) in &self.entries {
                let (psi0, psi1) = srswor_class_weights(l, m, self.n);
                let scale = (m as f64).powi(len as i32);
                if !psi0.is_zero() {
                    xi.axpy(psi0.to_f64() / scale, t0, 1.0);
                }
                if !psi1.is_zero() {
                    xi.axpy(psi1.to_f64() / scale, t1, 1.0);
                }
            }
        }
        Ok(NeumannWeightVector {
            d: self.d,
            m,
            xi: xi.as_slice().to_vec(),
        })
    }
}

fn check_m(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!(
            "sample size m = {m} must satisfy 1 <= m <= n = {n}"
        )));
    }
    Ok(())
}

fn check_degree(d: usize, ctx: &GramContext) -> Result<()> {
    if d > ctx.config.degree_cap {
        return Err(Error::DegreeTooLarge {
            degree: d,
            cap: ctx.config.degree_cap,
        });
    }
    Ok(())
}

/// Builds (or fetches) the `m`-independent table for degree `d`.
pub fn degree_table(d: usize, ctx: &GramContext) -> Result<Arc<DegreeTable>> {
    check_degree(d, ctx)?;
    if let Some(t) = ctx.tables.lock().unwrap().get(&d) {
        return Ok(Arc::clone(t));
    }
    let words = enumerate_words(d, ctx.config.degree_cap)?;
    let parts: Vec<_> = words
        .par_iter()
        .map(|w| word_contribution(w, ctx))
        .collect::<Result<_>>()?;
    let n = ctx.n();
    let mut entries: BTreeMap<(usize, usize), (DVector<f64>, DVector<f64>)> = BTreeMap::new();
    for part in parts {
        for (key, (t0, t1)) in part {
            let e = entries
                .entry(key)
                .or_insert_with(|| (DVector::zeros(n), DVector::zeros(n)));
            e.0 += t0;
            e.1 += t1;
        }
    }
    let table = Arc::new(DegreeTable {
        d,
        n,
        entries,
        centered: ctx.centered,
    });
    ctx.tables.lock().unwrap().insert(d, Arc::clone(&table));
    Ok(table)
}

type Contribution = BTreeMap<(usize, usize), (DVector<f64>, DVector<f64>)>;

fn word_contribution(word: &AnnotatedWord, ctx: &GramContext) -> Result<Contribution> {
    let n = ctx.n();
    let table = coarsening_table(word.len)?;
    // all-assignment aggregates for every partition of the positions
    let mut all = Vec::with_capacity(table.partitions.len());
    let mut masked = Vec::with_capacity(table.partitions.len());
    for sigma in &table.partitions {
        let q = quotient(word, sigma)?;
        let mut a_scalar = 1.0;
        let mut a_vec: Option<DVector<f64>> = None;
        let mut m_vec = DVector::from_element(n, 1.0);
        for comp in &q.components {
            let shape = ComponentShape::from_quotient(&q, comp);
            match ctx.component(&shape, Mode::Unmasked)? {
                ComponentValue::Scalar(s) => a_scalar *= s,
                ComponentValue::Vector(v) => {
                    a_vec = Some(match a_vec {
                        None => (*v).clone(),
                        Some(a) => a.component_mul(&v),
                    })
                }
            }
            if let ComponentValue::Vector(v) = ctx.component(&shape, Mode::Masked)? {
                m_vec.component_mul_assign(&v);
            }
        }
        let a = a_vec.map_or_else(|| DVector::from_element(n, a_scalar), |v| v * a_scalar);
        all.push(a);
        masked.push(m_vec);
    }
    let sign = f64::from(word.sign);
    let mut out = Contribution::new();
    for (l, coefs) in table.by_block_count.iter().enumerate() {
        if coefs.is_empty() {
            continue;
        }
        let mut t0 = DVector::zeros(n);
        let mut t1 = DVector::zeros(n);
        for &(s, c) in coefs {
            let c = sign * c as f64;
            t0.axpy(c, &masked[s], 1.0);
            t1.axpy(c, &all[s], 1.0);
            t1.axpy(-c, &masked[s], 1.0);
        }
        out.insert((word.len, l), (t0, t1));
    }
    Ok(out)
}

/// `ξ^[d](m; X)` for every unit.
pub fn neumann_weights(d: usize, m: usize, ctx: &GramContext) -> Result<NeumannWeightVector> {
    check_m(m, ctx.n())?;
    degree_table(d, ctx)?.weights(m)
}

/// `ξ^[0]_i = (m−1)(n−m)n / (m²(n−1)(n−2)) · (‖x_i‖² − p)`.
pub fn closed_form_weights_d0(m: usize, ctx: &GramContext) -> Result<NeumannWeightVector> {
    let n = ctx.n();
    if n < 3 {
        return Err(Error::PopulationTooSmall { n, min: 3 });
    }
    check_m(m, n)?;
    let (mf, nf) = (m as f64, n as f64);
    let coef = (mf - 1.0) * (nf - mf) * nf / (mf * mf * (nf - 1.0) * (nf - 2.0));
    let p = ctx.p() as f64;
    Ok(NeumannWeightVector {
        d: 0,
        m,
        xi: ctx.g.iter().map(|g| coef * (g - p)).collect(),
    })
}

/// `E[R^[d]] = (1/n) Σ_i ξ^[d]_i r_i`, computed without forming `ξ`.
///
/// The unmasked anchored part folds `Gr` into the anchor block; the masked
/// part loops over units with the literal route.
pub fn scalar_expectation(d: usize, m: usize, ctx: &GramContext, r: &[f64]) -> Result<f64> {
    let n = ctx.n();
    check_degree(d, ctx)?;
    check_m(m, n)?;
    if r.len() != n {
        return Err(Error::Dimension(format!(
            "residual length {} differs from n = {n}",
            r.len()
        )));
    }
    let r = DVector::from_column_slice(r);
    let total_r = r.sum();
    let gr = ctx.apply_gram(&r);
    let words = enumerate_words(d, ctx.config.degree_cap)?;
    let parts: Vec<BTreeMap<(usize, usize), (f64, f64)>> = words
        .par_iter()
        .map(|w| scalar_word_contribution(w, ctx, &r, &gr, total_r))
        .collect::<Result<_>>()?;
    let mut entries: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for part in parts {
        for (key, (s0, s1)) in part {
            let e = entries.entry(key).or_insert((0.0, 0.0));
            e.0 += s0;
            e.1 += s1;
        }
    }
    let mut total = 0.0;
    for ((len, l), (s0, s1)) in entries {
        let (psi0, psi1) = srswor_class_weights(l, m, n);
        let scale = (m as f64).powi(len as i32);
        total += psi0.to_f64() / scale * s0 + psi1.to_f64() / scale * s1;
    }
    Ok(total / n as f64)
}

fn scalar_word_contribution(
    word: &AnnotatedWord,
    ctx: &GramContext,
    r: &DVector<f64>,
    gr: &DVector<f64>,
    total_r: f64,
) -> Result<BTreeMap<(usize, usize), (f64, f64)>> {
    let n = ctx.n();
    let table = coarsening_table(word.len)?;
    let mut all = Vec::with_capacity(table.partitions.len());
    let mut masked = Vec::with_capacity(table.partitions.len());
    let active: Vec<usize> = (0..n).filter(|&i| r[i] != 0.0).collect();
    for sigma in &table.partitions {
        let q = quotient(word, sigma)?;
        let shapes: Vec<ComponentShape> = q
            .components
            .iter()
            .map(|c| ComponentShape::from_quotient(&q, c))
            .collect();
        let mut r_all = 0.0;
        if word.is_anchored() {
            let mut prod = 1.0;
            for shape in &shapes {
                prod *= if shape.anchor.is_some() {
                    ctx.literal(shape, Some(gr), None)?
                } else {
                    ctx.literal(shape, None, None)?
                };
            }
            r_all = prod;
        } else if total_r.abs() > 1e-8 {
            let mut prod = total_r;
            for shape in &shapes {
                prod *= ctx.literal(shape, None, None)?;
            }
            r_all = prod;
        }
        let mut r_ex = 0.0;
        for &i in &active {
            let col = ctx.gram_column(i);
            let mut prod = 1.0;
            for shape in &shapes {
                let init = shape.anchor.map(|_| &col);
                prod *= ctx.literal(shape, init, Some(i))?;
                if prod == 0.0 {
                    break;
                }
            }
            r_ex += r[i] * prod;
        }
        all.push(r_all);
        masked.push(r_ex);
    }
    let sign = f64::from(word.sign);
    let mut out = BTreeMap::new();
    for (l, coefs) in table.by_block_count.iter().enumerate() {
        if coefs.is_empty() {
            continue;
        }
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for &(s, c) in coefs {
            let c = sign * c as f64;
            s0 += c * masked[s];
            s1 += c * (all[s] - masked[s]);
        }
        out.insert((word.len, l), (s0, s1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::{Letter, Terminal};
    use crate::design_matrix::{normalize, RawCovariates};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn design(n: usize, p: usize, seed: u64) -> NormalizedDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        normalize(&RawCovariates::new(raw).unwrap()).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn u_anchor_discrete_matches_double_loop() {
        let x = design(6, 2, 1);
        let ctx = GramContext::new(&x);
        let g = x.gram();
        let word = AnnotatedWord::new(vec![Letter::U], Terminal::Anchor);
        for i in 0..6 {
            let req = AggregateRequest {
                word: word.clone(),
                partition: SetPartition::discrete(2),
                unit: Some(i),
                mask: false,
            };
            let got = all_assignment_aggregate(&req, &ctx).unwrap();
            let mut want = 0.0;
            for a in 0..6 {
                for b in 0..6 {
                    want += g[(a, b)] * g[(b, i)];
                }
            }
            assert!(rel_close(got, want, 1e-12));
        }
    }

    #[test]
    fn u_avg_single_block_is_sum_of_fourth_powers() {
        let x = design(7, 3, 2);
        let ctx = GramContext::new(&x);
        let req = AggregateRequest {
            word: AnnotatedWord::new(vec![Letter::U], Terminal::Avg),
            partition: SetPartition::single_block(3),
            unit: None,
            mask: false,
        };
        let want: f64 = x.row_norms_sq().iter().map(|q| q * q).sum();
        assert!(rel_close(all_assignment_aggregate(&req, &ctx).unwrap(), want, 1e-12));
    }

    #[test]
    fn single_unit_population() {
        let ctx = GramContext::from_matrix(DMatrix::from_element(1, 1, 1.5), EngineConfig::default());
        let word = AnnotatedWord::new(vec![Letter::U, Letter::V], Terminal::Anchor);
        let gram: f64 = 2.25;
        for pi in enumerate_partitions(word.len).unwrap() {
            let req = AggregateRequest {
                word: word.clone(),
                partition: pi,
                unit: Some(0),
                mask: false,
            };
            // two word edges plus the anchor factor
            let got = all_assignment_aggregate(&req, &ctx).unwrap();
            assert!(rel_close(got, gram.powi(3), 1e-14));
        }
    }

    #[test]
    fn vectorized_matches_literal_route() {
        let x = design(7, 2, 3);
        let ctx = GramContext::new(&x);
        for word in enumerate_words(2, 3).unwrap() {
            for pi in enumerate_partitions(word.len).unwrap() {
                let q = quotient(&word, &pi).unwrap();
                for comp in &q.components {
                    let shape = ComponentShape::from_quotient(&q, comp);
                    let un = ctx.component(&shape, Mode::Unmasked).unwrap();
                    let ms = ctx.component(&shape, Mode::Masked).unwrap();
                    for i in 0..7 {
                        let col = ctx.gram_column(i);
                        let init = shape.anchor.map(|_| &col);
                        let lit_u = ctx.literal(&shape, init, None).unwrap();
                        let lit_m = ctx.literal(&shape, init, Some(i)).unwrap();
                        let vu = match &un {
                            ComponentValue::Scalar(s) => *s,
                            ComponentValue::Vector(v) => v[i],
                        };
                        let ComponentValue::Vector(vm) = &ms else { panic!() };
                        assert!(rel_close(vu, lit_u, 1e-10), "{word} {pi}");
                        assert!(rel_close(vm[i], lit_m, 1e-10), "{word} {pi}");
                    }
                }
            }
        }
    }

    #[test]
    fn component_factorization_against_brute_force() {
        let x = design(5, 2, 4);
        let ctx = GramContext::new(&x);
        let g = x.gram();
        let word = AnnotatedWord::new(vec![Letter::V, Letter::U], Terminal::Anchor);
        for pi in enumerate_partitions(word.len).unwrap() {
            let l = pi.block_count();
            let i = 2;
            let mut want = 0.0;
            let mut labels = vec![0usize; l];
            loop {
                let mut term = 1.0;
                for &(s, t) in &word.edges {
                    term *= g[(labels[pi.index(s)], labels[pi.index(t)])];
                }
                term *= g[(labels[pi.index(word.anchor_vertex())], i)];
                want += term;
                let mut k = 0;
                while k < l && labels[k] == 4 {
                    labels[k] = 0;
                    k += 1;
                }
                if k == l {
                    break;
                }
                labels[k] += 1;
            }
            let req = AggregateRequest {
                word: word.clone(),
                partition: pi.clone(),
                unit: Some(i),
                mask: false,
            };
            assert!(rel_close(all_assignment_aggregate(&req, &ctx).unwrap(), want, 1e-11));
        }
    }

    #[test]
    fn path_fold_matches_elimination() {
        let x = design(9, 3, 5);
        let ctx = GramContext::new(&x);
        let shape = ComponentShape {
            self_mult: vec![1, 0, 2, 0],
            cross: vec![(0, 1, 1), (1, 2, 1), (2, 3, 1)],
            anchor: Some(3),
        };
        let order = shape.path_order().unwrap();
        assert_eq!(order, vec![3, 2, 1, 0]);
        let col = ctx.gram_column(4);
        let folded = ctx.literal(&shape, Some(&col), Some(4)).unwrap();
        let mut graph = FactorGraph::new(4);
        for (a, &m) in shape.self_mult.iter().enumerate() {
            let mut u = ctx.g_pow(m);
            if a == 3 {
                u.component_mul_assign(&col);
            }
            u[4] = 0.0;
            graph.unary[a] = Some(u);
        }
        for &(a, b, c) in &shape.cross {
            graph.add_edge(&ctx, a, b, Factor::Power(c));
        }
        let ComponentValue::Scalar(eliminated) = graph.contract(&ctx, None).unwrap() else {
            panic!()
        };
        assert!(rel_close(folded, eliminated, 1e-12));
    }

    #[test]
    fn elimination_order_does_not_matter() {
        let x = design(8, 2, 6);
        let ctx = GramContext::new(&x);
        // triangle with a doubled edge and a pendant vertex
        let shape = ComponentShape {
            self_mult: vec![0, 1, 0, 1],
            cross: vec![(0, 1, 2), (0, 2, 1), (1, 2, 1), (2, 3, 1)],
            anchor: Some(0),
        };
        let a = ctx.forced_onto_output(&shape, 0, true, Some(&[3, 2, 1, 0])).unwrap();
        let b = ctx.forced_onto_output(&shape, 0, true, Some(&[1, 3, 2, 0])).unwrap();
        let c = ctx.forced_onto_output(&shape, 0, true, None).unwrap();
        let (ComponentValue::Vector(a), ComponentValue::Vector(b), ComponentValue::Vector(c)) =
            (a, b, c)
        else {
            panic!()
        };
        for i in 0..8 {
            assert!(rel_close(a[i], b[i], 1e-11));
            assert!(rel_close(a[i], c[i], 1e-11));
        }
    }

    #[test]
    fn canonical_form_is_label_invariant() {
        let shape = ComponentShape {
            self_mult: vec![0, 1, 0],
            cross: vec![(0, 1, 1), (1, 2, 2)],
            anchor: Some(2),
        };
        let other = shape.relabel(&[2, 0, 1]);
        assert_ne!(shape, other);
        assert_eq!(shape.canonical(), other.canonical());
    }

    #[test]
    fn class_aggregate_u_anchor_single_block() {
        let x = design(6, 2, 7);
        let ctx = GramContext::new(&x);
        let word = AnnotatedWord::new(vec![Letter::U], Terminal::Anchor);
        let norms = x.row_norms_sq();
        for i in 0..6 {
            let (_, phi1) = class_aggregates(&word, &SetPartition::single_block(2), i, &ctx).unwrap();
            assert!(rel_close(phi1, norms[i] * norms[i], 1e-10));
        }
    }

    #[test]
    fn degree_zero_matches_closed_form() {
        let x = design(12, 3, 8);
        let ctx = GramContext::new(&x);
        for m in 1..=12 {
            let engine = neumann_weights(0, m, &ctx).unwrap();
            let closed = closed_form_weights_d0(m, &ctx).unwrap();
            for (a, b) in engine.xi.iter().zip(&closed.xi) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "m={m}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn full_sample_weights_vanish() {
        let x = design(9, 2, 9);
        let ctx = GramContext::new(&x);
        for d in 0..=2 {
            assert!(neumann_weights(d, 9, &ctx).unwrap().xi.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn closed_form_small_cases() {
        let x = design(4, 1, 10);
        let ctx = GramContext::new(&x);
        let w = closed_form_weights_d0(2, &ctx).unwrap();
        for (xi, q) in w.xi.iter().zip(x.row_norms_sq()) {
            assert!((xi - (q - 1.0) / 3.0).abs() < 1e-12);
        }
        let two = NormalizedDesign::from_normalized(DMatrix::from_row_slice(2, 1, &[-1.0, 1.0])).unwrap();
        assert!(matches!(
            closed_form_weights_d0(1, &GramContext::new(&two)),
            Err(Error::PopulationTooSmall { n: 2, min: 3 })
        ));
    }

    #[test]
    fn memoization_and_matrix_free_are_transparent() {
        let x = design(8, 2, 11);
        let base = GramContext::new(&x);
        let plain = GramContext::with_config(
            &x,
            EngineConfig {
                memoize: false,
                ..EngineConfig::default()
            },
        );
        let free = GramContext::with_config(
            &x,
            EngineConfig {
                matrix_free: true,
                ..EngineConfig::default()
            },
        );
        let a = neumann_weights(2, 4, &base).unwrap();
        let b = neumann_weights(2, 4, &plain).unwrap();
        let c = neumann_weights(2, 4, &free).unwrap();
        for k in 0..8 {
            assert!((a.xi[k] - b.xi[k]).abs() <= 1e-12 * (1.0 + a.xi[k].abs()));
            assert!((a.xi[k] - c.xi[k]).abs() <= 1e-10 * (1.0 + a.xi[k].abs()));
        }
        assert!(base.memo_len() > 0);
        assert_eq!(plain.memo_len(), 0);
    }

    #[test]
    fn scalar_route_matches_vector_route() {
        let x = design(8, 2, 12);
        let ctx = GramContext::new(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut r: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let mean = r.iter().sum::<f64>() / 8.0;
        r.iter_mut().for_each(|v| *v -= mean);
        for d in 0..=2 {
            for m in [3, 5] {
                let xi = neumann_weights(d, m, &ctx).unwrap();
                let want: f64 = xi.xi.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / 8.0;
                let got = scalar_expectation(d, m, &ctx, &r).unwrap();
                assert!((got - want).abs() <= 1e-9, "d={d} m={m}: {got} vs {want}");
            }
        }
        assert_eq!(scalar_expectation(1, 3, &ctx, &[0.0; 8]).unwrap(), 0.0);
    }

    #[test]
    fn errors_are_reported() {
        let x = design(6, 1, 14);
        let ctx = GramContext::new(&x);
        assert!(matches!(neumann_weights(4, 3, &ctx), Err(Error::DegreeTooLarge { .. })));
        assert!(matches!(neumann_weights(0, 0, &ctx), Err(Error::InvalidInput(_))));
        assert!(matches!(neumann_weights(0, 7, &ctx), Err(Error::InvalidInput(_))));
        let req = AggregateRequest {
            word: AnnotatedWord::new(vec![], Terminal::Anchor),
            partition: SetPartition::discrete(1),
            unit: None,
            mask: false,
        };
        assert!(all_assignment_aggregate(&req, &ctx).is_err());
    }
}
