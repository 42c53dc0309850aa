use crate::error::{DishftError, Result};

use super::StockPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    IndustryBinary,
    Identity,
}

/// Symmetrically normalized `N × N` stock relation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    n: usize,
    values: Vec<f64>,
    kind: RelationKind,
}

impl RelationMatrix {
    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self {
            n,
            values,
            kind: RelationKind::Identity,
        }
    }

    /// `D^{-1/2} A D^{-1/2}` of a binary adjacency that already has self-loops.
    pub fn normalized_from_adjacency(n: usize, adjacency: &[f64], kind: RelationKind) -> Result<Self> {
        if adjacency.len() != n * n {
            return Err(DishftError::Shape(format!(
                "adjacency has {} entries for n = {n}",
                adjacency.len()
            )));
        }
        let deg: Vec<f64> = (0..n).map(|i| adjacency[i * n..(i + 1) * n].iter().sum()).collect();
        if let Some(i) = deg.iter().position(|&d| d < 1.0) {
            return Err(DishftError::Range(format!("row {i} has degree below 1")));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = adjacency[i * n + j] / (deg[i] * deg[j]).sqrt();
            }
        }
        Ok(Self { n, values, kind })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> RelationKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Whether `j` is in `i`'s neighbourhood (self included).
    #[inline]
    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.get(i, j) > 0.0
    }

    /// `P A Pᵀ` where row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self {
            n,
            values,
            kind: self.kind,
        }
    }
}

/// Industry co-membership graph with self-loops, symmetrically normalized.
pub fn build_relation(panel: &StockPanel) -> Result<RelationMatrix> {
    let tags = panel
        .symbols()
        .iter()
        .map(|s| {
            panel
                .industry()
                .get(s)
                .ok_or_else(|| DishftError::MissingIndustry(s.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = tags.len();
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || tags[i] == tags[j] {
                adj[i * n + j] = 1.0;
            }
        }
    }
    RelationMatrix::normalized_from_adjacency(n, &adj, RelationKind::IndustryBinary)
}
