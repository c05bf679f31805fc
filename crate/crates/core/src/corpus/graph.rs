use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// Reply-to structure of a dialogue prefix of `t` turns.
///
/// Stored as parent pointers; `parents[i]` is the 1-based turn that turn
/// `i + 1` replies to. The root has no parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddresseeGraph {
    parents: Vec<Option<usize>>,
}

impl AddresseeGraph {
    /// Builds a graph from 1-based parent pointers and checks that the root
    /// has no parent and every other turn points strictly backwards.
    pub fn from_parents(parents: Vec<Option<usize>>) -> Result<Self> {
        for (idx, p) in parents.iter().enumerate() {
            let turn = idx + 1;
            match (turn, p) {
                (1, None) => {}
                (1, Some(j)) => {
                    return Err(Error::Validation(format!("turn 1 cannot reply to turn {j}")))
                }
                (_, None) => {
                    return Err(Error::Validation(format!("turn {turn} has no addressee")))
                }
                (_, Some(j)) if *j == 0 || *j >= turn => {
                    return Err(Error::Validation(format!(
                        "turn {turn} replies to turn {j}, which is not earlier"
                    )))
                }
                _ => {}
            }
        }
        Ok(AddresseeGraph { parents })
    }

    /// Reply chain `1 ← 2 ← … ← t`.
    pub fn chain(t: usize) -> Self {
        let parents = (1..=t).map(|i| if i == 1 { None } else { Some(i - 1) }).collect();
        AddresseeGraph { parents }
    }

    /// Builds from a `t×t` 0/1 adjacency matrix (row `i` marks the target of
    /// turn `i`).
    pub fn from_matrix<T: Real>(m: &Mat<T>) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::Validation("addressee matrix must be square".into()));
        }
        let mut parents = Vec::with_capacity(m.rows);
        for i in 0..m.rows {
            let ones: Vec<usize> = (0..m.cols).filter(|&j| m.get(i, j) == T::one()).collect();
            let others = (0..m.cols).any(|j| m.get(i, j) != T::one() && m.get(i, j) != T::zero());
            if others || ones.len() > 1 {
                return Err(Error::Validation(format!("row {} is not one-hot", i + 1)));
            }
            parents.push(ones.first().map(|&j| j + 1));
        }
        Self::from_parents(parents)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// Addressee of 1-based `turn`.
    pub fn parent(&self, turn: usize) -> Option<usize> {
        self.parents[turn - 1]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Reply distance `turn - parent(turn)` for every non-root turn.
    pub fn distances(&self) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(idx, p)| p.map(|j| idx + 1 - j))
    }

    /// Graph restricted to the first `t` turns.
    pub fn prefix(&self, t: usize) -> AddresseeGraph {
        AddresseeGraph {
            parents: self.parents[..t].to_vec(),
        }
    }

    /// Edges `(i, j)` meaning turn `i` replies to turn `j`, both 1-based.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(idx, p)| p.map(|j| (idx + 1, j)))
            .collect()
    }

    pub fn from_edges(t: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut parents = vec![None; t];
        for &(i, j) in edges {
            if i == 0 || i > t {
                return Err(Error::Validation(format!("edge source {i} out of range 1..={t}")));
            }
            if parents[i - 1].is_some() {
                return Err(Error::Validation(format!("turn {i} has two addressees")));
            }
            parents[i - 1] = Some(j);
        }
        Self::from_parents(parents)
    }

    /// Dense `t×t` adjacency matrix.
    pub fn matrix<T: Real>(&self) -> Mat<T> {
        let t = self.len();
        let mut m = Mat::zeros(t, t);
        for (idx, p) in self.parents.iter().enumerate() {
            if let Some(j) = p {
                m.set(idx, j - 1, T::one());
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_matrix_structure() {
        let g = AddresseeGraph::chain(4);
        let m: Mat<f64> = g.matrix();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i >= 1 && j == i - 1 { 1.0 } else { 0.0 };
                assert_eq!(m.get(i, j), want);
            }
        }
        assert_eq!(AddresseeGraph::from_matrix(&m).unwrap(), g);
        assert_eq!(g.distances().collect::<Vec<_>>(), vec![1, 1, 1]);
    }

    #[test]
    fn forward_and_self_links_rejected() {
        assert!(AddresseeGraph::from_parents(vec![None, Some(2)]).is_err());
        assert!(AddresseeGraph::from_parents(vec![None, Some(3), Some(1)]).is_err());
        assert!(AddresseeGraph::from_parents(vec![Some(1)]).is_err());
        assert!(AddresseeGraph::from_parents(vec![None, None]).is_err());
        assert!(AddresseeGraph::from_parents(vec![None, Some(1), Some(1)]).is_ok());
    }

    #[test]
    fn edges_round_trip() {
        let g = AddresseeGraph::from_parents(vec![None, Some(1), Some(1), Some(3)]).unwrap();
        assert_eq!(g.edges(), vec![(2, 1), (3, 1), (4, 3)]);
        assert_eq!(AddresseeGraph::from_edges(4, &g.edges()).unwrap(), g);
    }
}
