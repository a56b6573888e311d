//! Causal graphs over one pageview: the ad-placement DAG, its
//! single-world intervention graph, and d-separation queries.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::allocation::AllocationRule;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Latent,
    Feature,
    Treatment,
    Outcome,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub label: String,
    pub role: Role,
}

/// Wire form: `{"nodes":[{"label","role"}],"edges":[["from","to"]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<Node>,
    pub edges: Vec<(String, String)>,
}

/// An immutable directed acyclic graph with labeled, role-tagged nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    n_edges: usize,
}

impl Dag {
    /// Build a graph, rejecting duplicate labels, dangling or repeated
    /// edges, self-loops and directed cycles.
    pub fn new(nodes: Vec<Node>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (k, n) in nodes.iter().enumerate() {
            if index.insert(n.label.clone(), k).is_some() {
                return Err(Error::Graph(format!("duplicate node label {}", n.label)));
            }
        }
        let n = nodes.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Graph(format!("edge ({u}, {v}) references a missing node")));
            }
            if u == v {
                return Err(Error::Graph(format!("self-loop on {}", nodes[u].label)));
            }
            if children[u].contains(&v) {
                return Err(Error::Graph(format!("duplicate edge {} -> {}", nodes[u].label, nodes[v].label)));
            }
            children[u].push(v);
            parents[v].push(u);
        }
        for list in parents.iter_mut().chain(children.iter_mut()) {
            list.sort_unstable();
        }
        let dag = Self { nodes, index, parents, children, n_edges: edges.len() };
        if let Some(label) = dag.find_cycle() {
            return Err(Error::Graph(format!("directed cycle through {label}")));
        }
        Ok(dag)
    }

    /// Build from labeled edges.
    pub fn from_labels(nodes: Vec<Node>, edges: &[(&str, &str)]) -> Result<Self> {
        let lookup: HashMap<&str, usize> = nodes.iter().enumerate().map(|(k, n)| (n.label.as_str(), k)).collect();
        let mut idx = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            let (Some(&a), Some(&b)) = (lookup.get(u), lookup.get(v)) else {
                return Err(Error::Graph(format!("edge {u} -> {v} references a missing node")));
            };
            idx.push((a, b));
        }
        Self::new(nodes, &idx)
    }

    fn find_cycle(&self) -> Option<String> {
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop_front() {
            seen += 1;
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        (seen < n).then(|| {
            let v = (0..n).find(|&v| indeg[v] > 0).expect("cycle node");
            self.nodes[v].label.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.n_edges
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, v: usize) -> &Node {
        &self.nodes[v]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    fn require(&self, label: &str) -> Result<usize> {
        self.id(label).ok_or_else(|| invalid(format!("node {label} is not in the graph")))
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Sorted parent labels of `label`.
    pub fn parent_labels(&self, label: &str) -> Result<Vec<String>> {
        let v = self.require(label)?;
        let mut out: Vec<String> = self.parents[v].iter().map(|&p| self.nodes[p].label.clone()).collect();
        out.sort();
        Ok(out)
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.id(from), self.id(to)) {
            (Some(u), Some(v)) => self.children[u].contains(&v),
            _ => false,
        }
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_edges);
        for (u, ch) in self.children.iter().enumerate() {
            out.extend(ch.iter().map(|&v| (u, v)));
        }
        out
    }

    /// A new graph with one extra edge.
    pub fn with_edge(&self, from: &str, to: &str) -> Result<Dag> {
        let u = self.require(from)?;
        let v = self.require(to)?;
        let mut edges = self.edges();
        edges.push((u, v));
        Dag::new(self.nodes.clone(), &edges)
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            nodes: self.nodes.clone(),
            edges: self
                .edges()
                .into_iter()
                .map(|(u, v)| (self.nodes[u].label.clone(), self.nodes[v].label.clone()))
                .collect(),
        }
    }

    pub fn from_document(doc: &GraphDocument) -> Result<Dag> {
        let edges: Vec<(&str, &str)> = doc.edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Dag::from_labels(doc.nodes.clone(), &edges)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Dag> {
        Dag::from_document(&serde_json::from_str(s)?)
    }

    fn descendants_of(&self, sources: &[usize]) -> Vec<bool> {
        let mut mark = vec![false; self.len()];
        let mut stack: Vec<usize> = sources.to_vec();
        while let Some(v) = stack.pop() {
            for &c in &self.children[v] {
                if !mark[c] {
                    mark[c] = true;
                    stack.push(c);
                }
            }
        }
        mark
    }

    /// Nodes with a directed path into any node of `set`, the set included.
    fn ancestral_closure(&self, set: &[bool]) -> Vec<bool> {
        let mut mark = set.to_vec();
        let mut stack: Vec<usize> = (0..self.len()).filter(|&v| set[v]).collect();
        while let Some(v) = stack.pop() {
            for &p in &self.parents[v] {
                if !mark[p] {
                    mark[p] = true;
                    stack.push(p);
                }
            }
        }
        mark
    }
}

fn node(label: impl Into<String>, role: Role) -> Node {
    Node { label: label.into(), role }
}

/// The ad-placement DAG for `m` ads: `U -> C -> X_i`, every `X_j` into
/// every `A_i` and `Y_i`, every `A_j` into every `Y_i`, and `U -> Y_i`.
pub fn build_ad_dag(m: usize) -> Result<Dag> {
    if m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    let mut nodes = vec![node("U", Role::Latent), node("C", Role::Latent)];
    let x0 = nodes.len();
    nodes.extend((1..=m).map(|i| node(format!("X{i}"), Role::Feature)));
    let a0 = nodes.len();
    nodes.extend((1..=m).map(|i| node(format!("A{i}"), Role::Treatment)));
    let y0 = nodes.len();
    nodes.extend((1..=m).map(|i| node(format!("Y{i}"), Role::Outcome)));

    let mut edges = vec![(0, 1)];
    edges.extend((0..m).map(|i| (1, x0 + i)));
    for i in 0..m {
        for j in 0..m {
            edges.push((x0 + j, a0 + i));
        }
    }
    for i in 0..m {
        for j in 0..m {
            edges.push((x0 + j, y0 + i));
            edges.push((a0 + j, y0 + i));
        }
        edges.push((0, y0 + i));
    }
    Dag::new(nodes, &edges)
}

/// Treatment values to fix, keyed by treatment label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Intervention {
    pub values: BTreeMap<String, u8>,
}

impl Intervention {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Fix every `A_i` to the rule's block.
    pub fn from_rule(a: &AllocationRule) -> Self {
        Self { values: a.bits().iter().enumerate().map(|(i, &b)| (format!("A{}", i + 1), b)).collect() }
    }

    pub fn with(mut self, label: &str, value: u8) -> Self {
        self.values.insert(label.to_string(), value);
        self
    }
}

/// Random/fixed halves of one split treatment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub random: usize,
    pub fixed: usize,
    pub value: u8,
}

/// A single-world intervention graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Swig {
    pub dag: Dag,
    pub splits: Vec<Split>,
}

impl Swig {
    /// Label of the counterfactual version of `label`, if it was relabeled.
    pub fn counterfactual_label(&self, label: &str) -> Option<&str> {
        self.dag
            .nodes()
            .iter()
            .map(|n| n.label.as_str())
            .find(|l| l.starts_with(label) && l[label.len()..].starts_with('('))
    }
}

fn fixed_label(treatment: &str) -> String {
    treatment.to_lowercase()
}

/// Split each intervened treatment into a random half that keeps its
/// incoming edges and a fixed half that takes its outgoing edges, and
/// relabel every descendant of a fixed node as a counterfactual.
pub fn swig_transform(g: &Dag, intervention: &Intervention) -> Result<Swig> {
    let mut targets = Vec::with_capacity(intervention.values.len());
    for (label, &value) in &intervention.values {
        let v = g.require(label)?;
        if g.node(v).role != Role::Treatment {
            return Err(invalid(format!(
                "cannot intervene on {label}: it is a {:?} node, not a treatment",
                g.node(v).role
            )));
        }
        if g.id(&fixed_label(label)).is_some() {
            return Err(invalid(format!("{label} has already been split")));
        }
        if value > 1 {
            return Err(invalid(format!("intervention value {value} for {label} is not a block")));
        }
        targets.push((v, value));
    }

    let n = g.len();
    let mut nodes: Vec<Node> = g.nodes().to_vec();
    let mut fixed_of = vec![None; n];
    let mut splits = Vec::with_capacity(targets.len());
    for &(v, value) in &targets {
        let f = nodes.len();
        nodes.push(node(fixed_label(&g.node(v).label), Role::Fixed));
        fixed_of[v] = Some(f);
        splits.push(Split { random: v, fixed: f, value });
    }
    let mut edges = Vec::with_capacity(g.edge_count());
    for (u, v) in g.edges() {
        edges.push((fixed_of[u].unwrap_or(u), v));
    }

    // Relabel descendants of fixed nodes with the fixed ancestors' values.
    let fixed_ids: Vec<usize> = splits.iter().map(|s| s.fixed).collect();
    let tmp = Dag::new(nodes.clone(), &edges)?;
    let desc = tmp.descendants_of(&fixed_ids);
    for v in 0..n {
        if !desc[v] {
            continue;
        }
        let mut single = vec![false; tmp.len()];
        single[v] = true;
        let anc = tmp.ancestral_closure(&single);
        let tags: Vec<String> = splits
            .iter()
            .filter(|s| anc[s.fixed])
            .map(|s| format!("{}={}", tmp.node(s.fixed).label, s.value))
            .collect();
        nodes[v].label = format!("{}({})", nodes[v].label, tags.join(","));
    }
    Ok(Swig { dag: Dag::new(nodes, &edges)?, splits })
}

/// Options for d-separation queries.
#[derive(Debug, Clone, Copy, Default)]
pub struct DsepOptions {
    /// Permit latent-tagged nodes in the conditioning set.
    pub allow_latent_conditioning: bool,
}

/// Index-level d-separation by reachability ("Bayes-ball"): is any node of
/// `y` reachable from `x` along a path that is active given `z`?
pub fn d_separated_ids(g: &Dag, x: &[usize], y: &[usize], z: &[usize]) -> bool {
    let n = g.len();
    let mut in_z = vec![false; n];
    for &v in z {
        in_z[v] = true;
    }
    let anc_z = g.ancestral_closure(&in_z);
    let mut in_y = vec![false; n];
    for &v in y {
        in_y[v] = true;
    }

    // Direction flag: `up` = arrived from a child, `down` = from a parent.
    let mut visited = vec![[false; 2]; n];
    let mut queue: VecDeque<(usize, bool)> = x.iter().map(|&v| (v, true)).collect();
    while let Some((v, up)) = queue.pop_front() {
        let slot = usize::from(up);
        if visited[v][slot] {
            continue;
        }
        visited[v][slot] = true;
        if !in_z[v] && in_y[v] {
            return false;
        }
        if up {
            if !in_z[v] {
                queue.extend(g.parents(v).iter().map(|&p| (p, true)));
                queue.extend(g.children(v).iter().map(|&c| (c, false)));
            }
        } else {
            if !in_z[v] {
                queue.extend(g.children(v).iter().map(|&c| (c, false)));
            }
            if anc_z[v] {
                queue.extend(g.parents(v).iter().map(|&p| (p, true)));
            }
        }
    }
    true
}

/// Is `x` d-separated from `y` given `z`? Sets must be disjoint and name
/// existing nodes.
pub fn d_separated(g: &Dag, x: &[&str], y: &[&str], z: &[&str]) -> Result<bool> {
    d_separated_with(g, x, y, z, DsepOptions::default())
}

pub fn d_separated_with(g: &Dag, x: &[&str], y: &[&str], z: &[&str], opts: DsepOptions) -> Result<bool> {
    let resolve = |set: &[&str]| -> Result<Vec<usize>> { set.iter().map(|l| g.require(l)).collect() };
    let (xi, yi, zi) = (resolve(x)?, resolve(y)?, resolve(z)?);
    let mut owner = vec![0u8; g.len()];
    for (tag, set) in [(1u8, &xi), (2, &yi), (3, &zi)] {
        for &v in set.iter() {
            if owner[v] != 0 && owner[v] != tag {
                return Err(invalid(format!("node {} appears in more than one of X, Y, Z", g.node(v).label)));
            }
            owner[v] = tag;
        }
    }
    if !opts.allow_latent_conditioning {
        if let Some(&v) = zi.iter().find(|&&v| g.node(v).role == Role::Latent) {
            return Err(invalid(format!("conditioning on latent node {} is not allowed", g.node(v).label)));
        }
    }
    Ok(d_separated_ids(g, &xi, &yi, &zi))
}

/// Check `Y_i(a) _||_ {A_1..A_m} | {X_1..X_m}` for every position on the
/// SWIG of `g` under the rule `a`.
pub fn network_ignorability_holds(g: &Dag, a: &AllocationRule) -> Result<bool> {
    let m = a.len();
    let swig = swig_transform(g, &Intervention::from_rule(a))?;
    let treatments: Vec<String> = (1..=m).map(|i| format!("A{i}")).collect();
    let features: Vec<String> = (1..=m).map(|i| format!("X{i}")).collect();
    let t_refs: Vec<&str> = treatments.iter().map(String::as_str).collect();
    let f_refs: Vec<&str> = features.iter().map(String::as_str).collect();
    for i in 1..=m {
        let y = swig
            .counterfactual_label(&format!("Y{i}"))
            .ok_or_else(|| Error::Graph(format!("Y{i} is not a descendant of the intervention")))?
            .to_string();
        if !d_separated(&swig.dag, &[y.as_str()], &t_refs, &f_refs)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Build the ad DAG for `m` ads and check network conditional
/// ignorability under `a`.
pub fn verify_network_ignorability(m: usize, a: &AllocationRule) -> Result<bool> {
    if a.len() != m {
        return Err(invalid(format!("rule {a} does not have {m} positions")));
    }
    network_ignorability_holds(&build_ad_dag(m)?, a)
}
