//! Brute-force d-separation: enumerate every simple path of the skeleton
//! and apply the blocking rules node by node.

use rand::Rng;

/// Adjacency of a DAG on `0..n` given as `(from, to)` edges.
pub struct SmallDag {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SmallDag {
    /// Random DAG: a random topological order and each forward pair joined
    /// with probability `density`.
    pub fn random(rng: &mut impl Rng, n: usize, density: f64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random::<f64>() < density {
                    edges.push((order[a], order[b]));
                }
            }
        }
        Self { n, edges }
    }

    fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a, b))
    }

    fn descendants_or_self(&self, v: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            if !seen[u] {
                seen[u] = true;
                stack.extend(self.edges.iter().filter(|e| e.0 == u).map(|e| e.1));
            }
        }
        seen
    }

    fn blocked(&self, path: &[usize], z: &[bool]) -> bool {
        (1..path.len() - 1).any(|k| {
            let (a, v, b) = (path[k - 1], path[k], path[k + 1]);
            if self.has_edge(a, v) && self.has_edge(b, v) {
                !self.descendants_or_self(v).iter().zip(z).any(|(d, zz)| *d && *zz)
            } else {
                z[v]
            }
        })
    }

    fn open_path(&self, to: usize, z: &[bool], path: &mut Vec<usize>, on: &mut [bool]) -> bool {
        let u = *path.last().unwrap();
        if u == to {
            return !self.blocked(path, z);
        }
        for w in 0..self.n {
            if on[w] || !(self.has_edge(u, w) || self.has_edge(w, u)) {
                continue;
            }
            on[w] = true;
            path.push(w);
            let open = self.open_path(to, z, path, on);
            path.pop();
            on[w] = false;
            if open {
                return true;
            }
        }
        false
    }

    /// True iff every path between `x` and `y` is blocked by `z`.
    pub fn d_separated(&self, x: &[usize], y: &[usize], z: &[usize]) -> bool {
        let mut zm = vec![false; self.n];
        for &v in z {
            zm[v] = true;
        }
        for &a in x {
            for &b in y {
                let mut on = vec![false; self.n];
                on[a] = true;
                if self.open_path(b, &zm, &mut vec![a], &mut on) {
                    return false;
                }
            }
        }
        true
    }
}
