//! Truncated multi-index sets in graded lexicographic order.

use super::{hermite_eval, PceError};

/// Hard cap on the cardinality of a truncated index set; protects against
/// accidental (d, q) choices that would exhaust memory downstream.
pub const MAX_CARDINALITY: usize = 2_000_000;

/// A vector of nonnegative exponents of fixed length d.
pub type MultiIndex = Vec<u32>;

/// All multi-indices of dimension d with total order <= q, ordered by
/// (|alpha|, lexicographic). The zero index comes first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSet {
    d: usize,
    q: u32,
    indices: Vec<MultiIndex>,
}

impl MultiIndexSet {
    pub fn new(d: usize, q: u32) -> Result<Self, PceError> {
        assert!(d >= 1, "dimension must be at least 1");
        let p = cardinality(d, q);
        if p > MAX_CARDINALITY {
            return Err(PceError::Capacity(p, MAX_CARDINALITY));
        }
        let mut indices = Vec::with_capacity(p);
        for order in 0..=q {
            let mut current = vec![0u32; d];
            enumerate_fixed_order(&mut current, 0, order, &mut indices);
        }
        debug_assert_eq!(indices.len(), p);
        Ok(Self { d, q, indices })
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn max_order(&self) -> u32 {
        self.q
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index(&self, i: usize) -> &MultiIndex {
        &self.indices[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiIndex> {
        self.indices.iter()
    }

    /// Position of a multi-index in the graded lexicographic ordering.
    pub fn position(&self, alpha: &[u32]) -> Option<usize> {
        self.indices.iter().position(|a| a.as_slice() == alpha)
    }

    /// Evaluate the chaos basis function at position `alpha_idx`:
    /// H_alpha(xi) = prod_i h_{alpha_i}(xi_i).
    pub fn chaos_eval(&self, alpha_idx: usize, xi: &[f64]) -> Result<f64, PceError> {
        if alpha_idx >= self.len() {
            return Err(PceError::IndexOutOfRange(alpha_idx, self.len()));
        }
        if xi.len() < self.d {
            return Err(PceError::DimensionMismatch(xi.len(), self.d));
        }
        let alpha = &self.indices[alpha_idx];
        let mut out = 1.0;
        for (i, &a) in alpha.iter().enumerate() {
            if a > 0 {
                out *= hermite_eval(a as usize, xi[i]);
            }
        }
        Ok(out)
    }

    /// Evaluate every basis function at one sample point.
    pub fn eval_all(&self, xi: &[f64]) -> Result<Vec<f64>, PceError> {
        if xi.len() < self.d {
            return Err(PceError::DimensionMismatch(xi.len(), self.d));
        }
        // Precompute h_k(xi_i) for k <= q to avoid re-running the recurrence.
        let q = self.q as usize;
        let mut table = vec![0.0; self.d * (q + 1)];
        for i in 0..self.d {
            for k in 0..=q {
                table[i * (q + 1) + k] = hermite_eval(k, xi[i]);
            }
        }
        Ok(self
            .indices
            .iter()
            .map(|alpha| {
                alpha
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| table[i * (q + 1) + a as usize])
                    .product()
            })
            .collect())
    }

    /// Plain-text serialization: one line per index, exponents space separated.
    pub fn serialize(&self) -> String {
        let mut s = format!("multiindex v1 d={} q={}\n", self.d, self.q);
        for alpha in &self.indices {
            let line: Vec<String> = alpha.iter().map(|a| a.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn deserialize(text: &str) -> Result<Self, PceError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let parse = |key: &str| -> Option<u32> {
            header
                .split_whitespace()
                .find_map(|tok| tok.strip_prefix(key).and_then(|v| v.parse().ok()))
        };
        let (d, q) = match (parse("d="), parse("q=")) {
            (Some(d), Some(q)) => (d as usize, q),
            _ => return Err(PceError::LayoutMismatch("bad multiindex header".into())),
        };
        let set = Self::new(d, q)?;
        for (i, line) in lines.enumerate() {
            let alpha: Vec<u32> =
                line.split_whitespace().map(|t| t.parse().unwrap_or(u32::MAX)).collect();
            if i >= set.len() || alpha != set.indices[i] {
                return Err(PceError::LayoutMismatch(format!("index mismatch at line {i}")));
            }
        }
        Ok(set)
    }
}

/// p = (q+d)! / (q! d!)
pub fn cardinality(d: usize, q: u32) -> usize {
    let mut p: u128 = 1;
    for i in 1..=d as u128 {
        p = p * (q as u128 + i) / i;
    }
    p.min(usize::MAX as u128) as usize
}

/// Enumerate all indices of exactly `remaining` total order into positions
/// pos..d, in lexicographic order (first coordinate varies slowest,
/// ascending).
fn enumerate_fixed_order(
    current: &mut Vec<u32>,
    pos: usize,
    remaining: u32,
    out: &mut Vec<MultiIndex>,
) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for v in 0..=remaining {
        current[pos] = v;
        enumerate_fixed_order(current, pos + 1, remaining - v, out);
        current[pos] = 0;
    }
}
