//! Bipartite user–item smoothing of the identity embeddings.

use std::sync::Arc;

use crate::autograd::{SparseMatrix, Tape, Var};
use crate::error::{Error, Result};

/// Symmetric-normalised adjacency over `M + N` nodes, users first.
///
/// Entry `(u, M + i)` and its mirror hold `1/√(deg(u)·deg(i))`. Nodes with
/// no training interactions get a unit self-loop so smoothing leaves them
/// unchanged.
#[derive(Clone, Debug)]
pub struct Graph {
    users: usize,
    items: usize,
    adj: Arc<SparseMatrix>,
}

impl Graph {
    /// Builds the operator from dense `(user, item)` training pairs.
    /// Repeated pairs count once.
    pub fn from_pairs(users: usize, items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut unique: Vec<(usize, usize)> = pairs.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let mut deg = vec![0usize; users + items];
        for &(u, i) in &unique {
            if u >= users || i >= items {
                return Err(Error::Index(format!(
                    "interaction ({u}, {i}) outside {users} users x {items} items"
                )));
            }
            deg[u] += 1;
            deg[users + i] += 1;
        }
        let mut triplets = Vec::with_capacity(2 * unique.len() + users + items);
        for &(u, i) in &unique {
            let w = 1.0 / ((deg[u] * deg[users + i]) as f64).sqrt();
            triplets.push((u, users + i, w));
            triplets.push((users + i, u, w));
        }
        for (k, &d) in deg.iter().enumerate() {
            if d == 0 {
                triplets.push((k, k, 1.0));
            }
        }
        let adj = SparseMatrix::from_triplets(users + items, users + items, triplets)?;
        Ok(Graph {
            users,
            items,
            adj: Arc::new(adj),
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn adjacency(&self) -> &Arc<SparseMatrix> {
        &self.adj
    }
}

/// Smooths `(P, Q)` over the graph `layers` times and returns the mean of
/// all layer outputs, layer 0 included. `layers = 0` is the identity.
pub fn propagate(tape: &mut Tape, p: Var, q: Var, graph: &Graph, layers: usize) -> Result<(Var, Var)> {
    let (sp, sq) = (tape.shape(p).to_vec(), tape.shape(q).to_vec());
    if sp.len() != 2 || sq.len() != 2 || sp[1] != sq[1] {
        return Err(Error::dim(format!(
            "propagate: embedding shapes {sp:?} and {sq:?} differ"
        )));
    }
    if sp[0] != graph.users || sq[0] != graph.items {
        return Err(Error::dim(format!(
            "propagate: graph has {} users and {} items, embeddings have {} and {}",
            graph.users, graph.items, sp[0], sq[0]
        )));
    }
    if layers == 0 {
        return Ok((p, q));
    }
    let e0 = tape.concat_channels(&[p, q])?;
    let mut acc = e0;
    let mut e = e0;
    for _ in 0..layers {
        e = tape.spmm(&graph.adj, e)?;
        acc = tape.add(acc, e)?;
    }
    let mean = tape.scale(acc, 1.0 / (layers + 1) as f64)?;
    let p_out = tape.slice_channels(mean, 0, graph.users)?;
    let q_out = tape.slice_channels(mean, graph.users, graph.items)?;
    Ok((p_out, q_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(p: &Tensor, q: &Tensor, g: &Graph, layers: usize) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let (pv, qv) = (tape.constant(p.clone()), tape.constant(q.clone()));
        let (a, b) = propagate(&mut tape, pv, qv, g, layers).unwrap();
        (tape.tensor(a), tape.tensor(b))
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = Graph::from_pairs(2, 3, &[(0, 1), (1, 2)]).unwrap();
        let p = Tensor::from_fn(&[2, 4], |i| i as f64).unwrap();
        let q = Tensor::from_fn(&[3, 4], |i| -(i as f64)).unwrap();
        assert_eq!(run(&p, &q, &g, 0), (p, q));
    }

    #[test]
    fn two_node_single_layer() {
        let g = Graph::from_pairs(1, 1, &[(0, 0)]).unwrap();
        let p = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let q = Tensor::new(&[1, 2], vec![3.0, -4.0]).unwrap();
        let (ps, qs) = run(&p, &q, &g, 1);
        assert_eq!(ps.data(), &[2.0, -1.0]);
        assert_eq!(qs.data(), &[2.0, -1.0]);
    }

    #[test]
    fn isolated_nodes_keep_their_embedding() {
        // user 1 and item 2 have no interactions
        let g = Graph::from_pairs(2, 3, &[(0, 0), (0, 1)]).unwrap();
        let p = Tensor::from_fn(&[2, 3], |i| 0.1 * i as f64 + 0.3).unwrap();
        let q = Tensor::from_fn(&[3, 3], |i| 1.0 - 0.2 * i as f64).unwrap();
        let (ps, qs) = run(&p, &q, &g, 3);
        assert_eq!(ps.row(1), p.row(1));
        assert_eq!(qs.row(2), q.row(2));
    }

    #[test]
    fn normalised_operator_is_non_expansive() {
        let pairs = [(0, 0), (0, 1), (1, 1), (2, 0), (2, 1), (2, 3), (3, 2)];
        let g = Graph::from_pairs(4, 5, &pairs).unwrap();
        // sqrt(degree) is a fixed point; item 4 is isolated and self-looped
        let deg = [2.0, 1.0, 3.0, 1.0, 2.0, 3.0, 1.0, 1.0, 1.0f64];
        let s: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
        let out = g.adjacency().mul_dense(&s, 1);
        for (a, b) in out.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
        // repeated application never grows the Euclidean norm
        let mut x: Vec<f64> = (0..9).map(|k| ((k * 7 % 5) as f64) - 2.0).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for _ in 0..20 {
            let y = g.adjacency().mul_dense(&x, 1);
            assert!(norm(&y) <= norm(&x) + 1e-12);
            x = y;
        }
        let dup = Graph::from_pairs(4, 5, &[pairs.as_slice(), &[(0, 0)]].concat()).unwrap();
        assert_eq!(dup.adjacency(), g.adjacency());
    }

    #[test]
    fn out_of_range_pair_is_rejected() {
        assert!(Graph::from_pairs(1, 1, &[(0, 1)]).is_err());
    }
}
