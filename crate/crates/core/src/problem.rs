//! CSP/COP instances: the four benchmark families, instance generation,
//! and file I/O.
//!
//! An instance is a set of `n_vars` variables over a common finite domain
//! `{0, .., K-1}`, a list of typed constraints with nonnegative weights, an
//! optional objective, and a partial map of clamped givens. Instances are
//! immutable after construction and safe to share across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-constraint weight used for the MIS penalty (slightly above 1 so that
/// dropping a conflicting vertex always beats keeping it).
pub const MIS_LAMBDA: f64 = 1.01;

/// Benchmark family tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sudoku,
    Coloring,
    Mis,
    MaxCut,
    /// Hand-built instances (tests, fixtures).
    Custom,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Sudoku => "sudoku",
            Family::Coloring => "coloring",
            Family::Mis => "mis",
            Family::MaxCut => "maxcut",
            Family::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Optional objective attached to an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Pure CSP, no objective term.
    None,
    /// Maximize the number of cut edges (stored in `edges`).
    MaxCutEdges,
    /// Maximize the number of selected vertices (value 1 = selected).
    MisSetSize,
}

/// A typed constraint over variable indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    /// All variables in `scope` take pairwise distinct values.
    AllDifferent { scope: Vec<usize> },
    /// `x_i != x_j`.
    NotEqual { i: usize, j: usize },
    /// At most one of `x_i`, `x_j` is selected (value 1), for K = 2 domains.
    AtMostOneSelected { i: usize, j: usize },
}

impl Constraint {
    /// Variable indices the constraint mentions.
    pub fn scope(&self) -> Vec<usize> {
        match self {
            Constraint::AllDifferent { scope } => scope.clone(),
            Constraint::NotEqual { i, j } | Constraint::AtMostOneSelected { i, j } => {
                vec![*i, *j]
            }
        }
    }
}

/// An immutable problem instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub n_vars: usize,
    /// Common domain size K shared by all variables.
    pub domain_size: usize,
    pub constraints: Vec<Constraint>,
    /// Penalty weight per constraint, aligned with `constraints`.
    pub lambda: Vec<f64>,
    pub objective: ObjectiveKind,
    /// Clamped variables: index -> value, frozen for the whole chain.
    pub givens: BTreeMap<usize, usize>,
    /// Edge list for the graph families, canonically sorted (u < v, lex).
    pub edges: Vec<(usize, usize)>,
    pub family: Family,
    pub id: String,
    pub seed: Option<u64>,
}

impl ProblemInstance {
    /// Validates the instance-level invariants and returns the instance.
    pub fn new(
        n_vars: usize,
        domain_size: usize,
        constraints: Vec<Constraint>,
        lambda: Vec<f64>,
        objective: ObjectiveKind,
        givens: BTreeMap<usize, usize>,
        edges: Vec<(usize, usize)>,
        family: Family,
        id: String,
        seed: Option<u64>,
    ) -> Result<Self> {
        if domain_size == 0 {
            return Err(Error::InvalidInstance("domain size must be >= 1".into()));
        }
        if lambda.len() != constraints.len() {
            return Err(Error::InvalidInstance(format!(
                "{} weights for {} constraints",
                lambda.len(),
                constraints.len()
            )));
        }
        for (ci, c) in constraints.iter().enumerate() {
            match c {
                Constraint::AllDifferent { scope } => {
                    if scope.len() > domain_size {
                        return Err(Error::InvalidInstance(format!(
                            "constraint {ci}: AllDifferent scope of {} exceeds K={domain_size}",
                            scope.len()
                        )));
                    }
                    let set: BTreeSet<usize> = scope.iter().copied().collect();
                    if set.len() != scope.len() {
                        return Err(Error::InvalidInstance(format!(
                            "constraint {ci}: duplicate index in AllDifferent scope"
                        )));
                    }
                }
                Constraint::NotEqual { i, j } | Constraint::AtMostOneSelected { i, j } => {
                    if i == j {
                        return Err(Error::InvalidInstance(format!(
                            "constraint {ci}: binary constraint with i == j == {i}"
                        )));
                    }
                }
            }
            if c.scope().iter().any(|&v| v >= n_vars) {
                return Err(Error::InvalidInstance(format!(
                    "constraint {ci}: scope index out of range (n_vars={n_vars})"
                )));
            }
        }
        for (ci, &w) in lambda.iter().enumerate() {
            if !(w >= 0.0) {
                return Err(Error::InvalidInstance(format!(
                    "lambda[{ci}] = {w} must be nonnegative"
                )));
            }
        }
        for (&i, &v) in &givens {
            if i >= n_vars || v >= domain_size {
                return Err(Error::InvalidInstance(format!(
                    "given ({i} -> {v}) out of range"
                )));
            }
        }
        for &(u, v) in &edges {
            if u >= n_vars || v >= n_vars || u == v {
                return Err(Error::InvalidInstance(format!("bad edge ({u}, {v})")));
            }
        }
        Ok(Self {
            n_vars,
            domain_size,
            constraints,
            lambda,
            objective,
            givens,
            edges,
            family,
            id,
            seed,
        })
    }

    /// Variable indices that are not clamped by a given.
    pub fn free_vars(&self) -> Vec<usize> {
        (0..self.n_vars).filter(|i| !self.givens.contains_key(i)).collect()
    }

    /// Per-variable positional multi-index used by the denoiser's absolute
    /// positional encoding: `(row, col)` for Sudoku, `(i,)` otherwise.
    pub fn pos_indices(&self) -> Vec<Vec<usize>> {
        match self.family {
            Family::Sudoku => {
                let side = self.domain_size;
                (0..self.n_vars).map(|i| vec![i / side, i % side]).collect()
            }
            _ => (0..self.n_vars).map(|i| vec![i]).collect(),
        }
    }
}

/// Graph family selector for [`gen_graph_instance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphFamily {
    /// k-coloring with NotEqual per edge.
    Coloring(usize),
    /// Maximum independent set.
    Mis,
    /// MaxCut (pure objective, no hard constraints).
    MaxCut,
}

/// Symmetric co-occurrence graph over variables plus constraint incidence.
///
/// Two variables are adjacent iff they co-occur in at least one constraint
/// scope. For MaxCut (which has no hard constraints) each objective edge
/// counts as a binary soft constraint, so the constraint graph equals the
/// problem graph and `deg_c` is the vertex degree.
#[derive(Clone, Debug)]
pub struct ConstraintGraph {
    pub n_vars: usize,
    pub adjacency: Vec<BTreeSet<usize>>,
    /// Constraint indices whose scope contains each variable. MaxCut
    /// objective edges are appended after the hard constraints.
    pub incidence: Vec<Vec<usize>>,
    /// Number of constraints whose scope contains the variable.
    pub deg_c: Vec<usize>,
}

impl ConstraintGraph {
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].contains(&j)
    }
}

/// Scopes of all constraints, with MaxCut objective edges appended as
/// binary soft constraints (MaxCut has no hard constraints but its edges
/// still define variable relatedness).
pub fn effective_scopes(instance: &ProblemInstance) -> Vec<Vec<usize>> {
    let mut scopes: Vec<Vec<usize>> = instance.constraints.iter().map(|c| c.scope()).collect();
    if instance.objective == ObjectiveKind::MaxCutEdges {
        scopes.extend(instance.edges.iter().map(|&(u, v)| vec![u, v]));
    }
    scopes
}

/// Builds the variable co-occurrence graph of an instance.
pub fn build_constraint_graph(instance: &ProblemInstance) -> ConstraintGraph {
    let n = instance.n_vars;
    let mut adjacency = vec![BTreeSet::new(); n];
    let mut incidence = vec![Vec::new(); n];
    let add_scope = |scope: &[usize], cid: usize, adjacency: &mut Vec<BTreeSet<usize>>, incidence: &mut Vec<Vec<usize>>| {
        for &i in scope {
            incidence[i].push(cid);
            for &j in scope {
                if i != j {
                    adjacency[i].insert(j);
                }
            }
        }
    };
    for (cid, c) in instance.constraints.iter().enumerate() {
        add_scope(&c.scope(), cid, &mut adjacency, &mut incidence);
    }
    if instance.objective == ObjectiveKind::MaxCutEdges {
        let base = instance.constraints.len();
        for (k, &(u, v)) in instance.edges.iter().enumerate() {
            add_scope(&[u, v], base + k, &mut adjacency, &mut incidence);
        }
    }
    let deg_c = incidence.iter().map(Vec::len).collect();
    ConstraintGraph { n_vars: n, adjacency, incidence, deg_c }
}

fn sudoku_constraints(side: usize) -> Vec<Constraint> {
    let box_side = (side as f64).sqrt() as usize;
    debug_assert_eq!(box_side * box_side, side);
    let mut constraints = Vec::with_capacity(3 * side);
    for r in 0..side {
        constraints.push(Constraint::AllDifferent {
            scope: (0..side).map(|c| r * side + c).collect(),
        });
    }
    for c in 0..side {
        constraints.push(Constraint::AllDifferent {
            scope: (0..side).map(|r| r * side + c).collect(),
        });
    }
    for br in 0..box_side {
        for bc in 0..box_side {
            let mut scope = Vec::with_capacity(side);
            for a in 0..box_side {
                for b in 0..box_side {
                    scope.push((br * box_side + a) * side + (bc * box_side + b));
                }
            }
            constraints.push(Constraint::AllDifferent { scope });
        }
    }
    constraints
}

/// Parses one Sudoku board line: `side^2` characters, `0` = blank, digits
/// `1..=side` are givens (stored 0-based).
pub fn load_sudoku(text: &str, side: usize) -> Result<ProblemInstance> {
    if side != 4 && side != 9 {
        return Err(Error::InvalidInstance(format!("unsupported Sudoku side {side}")));
    }
    let text = text.trim();
    if text.chars().count() != side * side {
        return Err(Error::Parse {
            pos: text.chars().count(),
            msg: format!("expected {} characters, got {}", side * side, text.chars().count()),
        });
    }
    let mut givens = BTreeMap::new();
    for (pos, ch) in text.chars().enumerate() {
        let d = ch.to_digit(10).ok_or(Error::Parse {
            pos,
            msg: format!("non-digit character {ch:?}"),
        })? as usize;
        if d > side {
            return Err(Error::Parse {
                pos,
                msg: format!("digit {d} out of range 0..={side}"),
            });
        }
        if d > 0 {
            givens.insert(pos, d - 1);
        }
    }
    let constraints = sudoku_constraints(side);
    let lambda = vec![1.0; constraints.len()];
    ProblemInstance::new(
        side * side,
        side,
        constraints,
        lambda,
        ObjectiveKind::None,
        givens,
        Vec::new(),
        Family::Sudoku,
        format!("sudoku{side}-{}", &text[..text.len().min(12)]),
        None,
    )
}

/// Renders a Sudoku instance back to its one-line text form.
pub fn sudoku_line(instance: &ProblemInstance) -> Result<String> {
    if instance.family != Family::Sudoku {
        return Err(Error::InvalidInstance("not a Sudoku instance".into()));
    }
    let mut out = String::with_capacity(instance.n_vars);
    for i in 0..instance.n_vars {
        match instance.givens.get(&i) {
            Some(&v) => out.push(char::from_digit(v as u32 + 1, 10).unwrap()),
            None => out.push('0'),
        }
    }
    Ok(out)
}

fn canonical_edges(mut edges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    for e in edges.iter_mut() {
        if e.0 > e.1 {
            *e = (e.1, e.0);
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Builds a graph-family instance from an explicit edge list.
pub fn instance_from_edges(
    family: GraphFamily,
    n: usize,
    edges: Vec<(usize, usize)>,
    id: String,
    seed: Option<u64>,
) -> Result<ProblemInstance> {
    if n < 2 {
        return Err(Error::InvalidInstance(format!("need n >= 2 vertices, got {n}")));
    }
    let edges = canonical_edges(edges);
    let (k, constraints, objective, lam, fam) = match family {
        GraphFamily::Coloring(k) => {
            if k == 0 {
                return Err(Error::InvalidInstance("coloring needs k >= 1".into()));
            }
            let cs: Vec<Constraint> =
                edges.iter().map(|&(u, v)| Constraint::NotEqual { i: u, j: v }).collect();
            let lam = vec![1.0; cs.len()];
            (k, cs, ObjectiveKind::None, lam, Family::Coloring)
        }
        GraphFamily::Mis => {
            let cs: Vec<Constraint> = edges
                .iter()
                .map(|&(u, v)| Constraint::AtMostOneSelected { i: u, j: v })
                .collect();
            let lam = vec![MIS_LAMBDA; cs.len()];
            (2, cs, ObjectiveKind::MisSetSize, lam, Family::Mis)
        }
        GraphFamily::MaxCut => (2, Vec::new(), ObjectiveKind::MaxCutEdges, Vec::new(), Family::MaxCut),
    };
    ProblemInstance::new(n, k, constraints, lam, objective, BTreeMap::new(), edges, fam, id, seed)
}

/// Samples an Erdős–Rényi G(n, p) instance of the given family.
///
/// Edges are drawn in lexicographic pair order from a ChaCha stream seeded
/// by `seed`, so identical arguments produce identical instances.
pub fn gen_graph_instance(
    family: GraphFamily,
    n: usize,
    edge_prob: f64,
    seed: u64,
) -> Result<ProblemInstance> {
    if n < 2 {
        return Err(Error::InvalidInstance(format!("need n >= 2 vertices, got {n}")));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::InvalidInstance(format!("edge_prob {edge_prob} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < edge_prob {
                edges.push((u, v));
            }
        }
    }
    let tag = match family {
        GraphFamily::Coloring(k) => format!("coloring{k}"),
        GraphFamily::Mis => "mis".into(),
        GraphFamily::MaxCut => "maxcut".into(),
    };
    let id = format!("{tag}-n{n}-p{edge_prob}-s{seed}");
    instance_from_edges(family, n, edges, id, Some(seed))
}

/// Parses DIMACS edge format: a `p edge N M` header followed by `e u v`
/// lines with 1-based vertex indices. Returns `(n, edges)` with 0-based,
/// canonically sorted edges.
pub fn parse_dimacs(text: &str) -> Result<(usize, Vec<(usize, usize)>)> {
    let mut n = None;
    let mut m = 0usize;
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let pos = lineno + 1;
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "p" => {
                if n.is_some() {
                    return Err(Error::Parse { pos, msg: "duplicate problem line".into() });
                }
                if fields.len() != 4 || fields[1] != "edge" {
                    return Err(Error::Parse { pos, msg: format!("bad problem line {line:?}") });
                }
                n = Some(fields[2].parse::<usize>().map_err(|e| Error::Parse {
                    pos,
                    msg: format!("bad vertex count: {e}"),
                })?);
                m = fields[3].parse::<usize>().map_err(|e| Error::Parse {
                    pos,
                    msg: format!("bad edge count: {e}"),
                })?;
            }
            "e" => {
                let n = n.ok_or(Error::Parse { pos, msg: "edge before problem line".into() })?;
                if fields.len() != 3 {
                    return Err(Error::Parse { pos, msg: format!("bad edge line {line:?}") });
                }
                let u: usize = fields[1].parse().map_err(|e| Error::Parse {
                    pos,
                    msg: format!("bad vertex: {e}"),
                })?;
                let v: usize = fields[2].parse().map_err(|e| Error::Parse {
                    pos,
                    msg: format!("bad vertex: {e}"),
                })?;
                if u == 0 || v == 0 || u > n || v > n {
                    return Err(Error::Parse {
                        pos,
                        msg: format!("vertex index out of range 1..={n} in {line:?}"),
                    });
                }
                if u == v {
                    return Err(Error::Parse { pos, msg: format!("self-loop at vertex {u}") });
                }
                let e = (u.min(v) - 1, u.max(v) - 1);
                if edges.contains(&e) {
                    return Err(Error::Parse { pos, msg: format!("duplicate edge {u} {v}") });
                }
                edges.push(e);
            }
            other => {
                return Err(Error::Parse { pos, msg: format!("unknown record {other:?}") });
            }
        }
    }
    let n = n.ok_or(Error::Parse { pos: 0, msg: "missing problem line".into() })?;
    if edges.len() != m {
        return Err(Error::Parse {
            pos: 0,
            msg: format!("header declares {m} edges, found {}", edges.len()),
        });
    }
    Ok((n, canonical_edges(edges)))
}

/// Reads a DIMACS edge file from disk.
pub fn load_dimacs(path: &Path) -> Result<(usize, Vec<(usize, usize)>)> {
    let text = std::fs::read_to_string(path)?;
    parse_dimacs(&text)
}

/// Exact k-colorability via backtracking (degree-ordered). Intended for
/// desk-scale instances; used to filter generated training/evaluation
/// coloring instances to satisfiable ones.
pub fn is_k_colorable(n: usize, edges: &[(usize, usize)], k: usize) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| std::cmp::Reverse(adj[v].len()));
    let mut colors = vec![usize::MAX; n];
    fn assign(
        pos: usize,
        order: &[usize],
        adj: &[Vec<usize>],
        colors: &mut [usize],
        k: usize,
    ) -> bool {
        let Some(&v) = order.get(pos) else { return true };
        let mut used = vec![false; k];
        for &u in &adj[v] {
            if colors[u] != usize::MAX {
                used[colors[u]] = true;
            }
        }
        for c in 0..k {
            if !used[c] {
                colors[v] = c;
                if assign(pos + 1, order, adj, colors, k) {
                    return true;
                }
                colors[v] = usize::MAX;
            }
        }
        false
    }
    assign(0, &order, &adj, &mut colors, k)
}

/// On-disk JSON schema: `{family, n, K, edges|givens, seed}`.
#[derive(Serialize, Deserialize)]
struct InstanceFile {
    family: Family,
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    givens: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Serializes an instance to the JSON document schema.
pub fn instance_to_json(instance: &ProblemInstance) -> Result<String> {
    let file = match instance.family {
        Family::Sudoku => InstanceFile {
            family: Family::Sudoku,
            n: instance.n_vars,
            k: instance.domain_size,
            edges: None,
            givens: Some(instance.givens.iter().map(|(&i, &v)| (i, v)).collect()),
            seed: instance.seed,
        },
        Family::Coloring | Family::Mis | Family::MaxCut => InstanceFile {
            family: instance.family,
            n: instance.n_vars,
            k: instance.domain_size,
            edges: Some(instance.edges.clone()),
            givens: None,
            seed: instance.seed,
        },
        Family::Custom => {
            return Err(Error::InvalidInstance(
                "custom instances have no canonical JSON form".into(),
            ))
        }
    };
    Ok(serde_json::to_string(&file)?)
}

/// Rebuilds an instance from the JSON document schema.
pub fn instance_from_json(text: &str) -> Result<ProblemInstance> {
    let file: InstanceFile = serde_json::from_str(text)?;
    match file.family {
        Family::Sudoku => {
            let side = file.k;
            if side * side != file.n {
                return Err(Error::InvalidInstance(format!(
                    "sudoku with n={} but K={side}",
                    file.n
                )));
            }
            let mut line = vec!['0'; file.n];
            for (i, v) in file.givens.unwrap_or_default() {
                if i >= file.n || v >= side {
                    return Err(Error::InvalidInstance(format!("given ({i} -> {v}) out of range")));
                }
                line[i] = char::from_digit(v as u32 + 1, 10).unwrap();
            }
            load_sudoku(&line.iter().collect::<String>(), side)
        }
        Family::Coloring => instance_from_edges(
            GraphFamily::Coloring(file.k),
            file.n,
            file.edges.unwrap_or_default(),
            format!("coloring{}-n{}", file.k, file.n),
            file.seed,
        ),
        Family::Mis => instance_from_edges(
            GraphFamily::Mis,
            file.n,
            file.edges.unwrap_or_default(),
            format!("mis-n{}", file.n),
            file.seed,
        ),
        Family::MaxCut => instance_from_edges(
            GraphFamily::MaxCut,
            file.n,
            file.edges.unwrap_or_default(),
            format!("maxcut-n{}", file.n),
            file.seed,
        ),
        Family::Custom => Err(Error::InvalidInstance("cannot load custom family".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVED_4X4: &str = "1234341221434321";

    #[test]
    fn sudoku_4x4_solved_board() {
        let inst = load_sudoku(SOLVED_4X4, 4).unwrap();
        assert_eq!(inst.n_vars, 16);
        assert_eq!(inst.domain_size, 4);
        assert_eq!(inst.constraints.len(), 12); // 4 rows + 4 cols + 4 boxes
        assert_eq!(inst.givens.len(), 16);
    }

    #[test]
    fn sudoku_9x9_empty_board() {
        let inst = load_sudoku(&"0".repeat(81), 9).unwrap();
        assert_eq!(inst.constraints.len(), 27);
        assert!(inst.givens.is_empty());
    }

    #[test]
    fn sudoku_satnet_style_givens_count() {
        // 31 nonzero cells, as in the easier end of the benchmark split.
        let mut line = vec!['0'; 81];
        let solved9 = solved_9x9();
        for i in 0..31 {
            let pos = (i * 13 + 5) % 81;
            line[pos] = solved9.as_bytes()[pos] as char;
        }
        let text: String = line.iter().collect();
        let expected = text.chars().filter(|&c| c != '0').count();
        let inst = load_sudoku(&text, 9).unwrap();
        assert_eq!(inst.givens.len(), expected);
        assert_eq!(expected, 31);
    }

    #[test]
    fn sudoku_parse_errors_name_position() {
        let err = load_sudoku(&"5".repeat(15), 4).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let mut bad = SOLVED_4X4.to_string();
        bad.replace_range(6..7, "7");
        match load_sudoku(&bad, 4).unwrap_err() {
            Error::Parse { pos, .. } => assert_eq!(pos, 6),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn sudoku_round_trip() {
        let mut board = SOLVED_4X4.to_string();
        board.replace_range(3..5, "00");
        let inst = load_sudoku(&board, 4).unwrap();
        assert_eq!(sudoku_line(&inst).unwrap(), board);
    }

    #[test]
    fn complete_graph_coloring() {
        let inst = gen_graph_instance(GraphFamily::Coloring(3), 4, 1.0, 1).unwrap();
        assert_eq!(inst.domain_size, 3);
        assert_eq!(inst.constraints.len(), 6);
        assert_eq!(inst.objective, ObjectiveKind::None);
    }

    #[test]
    fn mis_path_fixture() {
        let inst =
            instance_from_edges(GraphFamily::Mis, 3, vec![(0, 1), (1, 2)], "p3".into(), None)
                .unwrap();
        assert_eq!(inst.constraints.len(), 2);
        assert_eq!(inst.objective, ObjectiveKind::MisSetSize);
        assert_eq!(inst.domain_size, 2);
        assert!((inst.lambda[0] - MIS_LAMBDA).abs() < 1e-12);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_graph_instance(GraphFamily::MaxCut, 12, 0.4, 99).unwrap();
        let b = gen_graph_instance(GraphFamily::MaxCut, 12, 0.4, 99).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(instance_to_json(&a).unwrap(), instance_to_json(&b).unwrap());
    }

    #[test]
    fn generator_rejects_tiny_n() {
        assert!(gen_graph_instance(GraphFamily::Mis, 1, 0.5, 0).is_err());
    }

    #[test]
    fn dimacs_basic() {
        let (n, edges) = parse_dimacs("p edge 3 2\ne 1 2\ne 2 3\n").unwrap();
        assert_eq!(n, 3);
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn dimacs_rejects_out_of_range() {
        let err = parse_dimacs("p edge 3 1\ne 4 1\n").unwrap_err();
        match err {
            Error::Parse { pos, msg } => {
                assert_eq!(pos, 2);
                assert!(msg.contains("out of range"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dimacs_empty_edge_section() {
        let (n, edges) = parse_dimacs("p edge 5 0\n").unwrap();
        assert_eq!(n, 5);
        assert!(edges.is_empty());
    }

    #[test]
    fn dimacs_rejects_self_loop_and_duplicate() {
        assert!(parse_dimacs("p edge 3 1\ne 2 2\n").is_err());
        assert!(parse_dimacs("p edge 3 2\ne 1 2\ne 2 1\n").is_err());
    }

    #[test]
    fn constraint_graph_4x4_sudoku() {
        let inst = load_sudoku(&"0".repeat(16), 4).unwrap();
        let g = build_constraint_graph(&inst);
        // 3 row + 3 col + 3 box peers, of which 2 box peers are shared.
        for i in 0..16 {
            assert_eq!(g.adjacency[i].len(), 7, "cell {i}");
            assert_eq!(g.deg_c[i], 3);
        }
    }

    #[test]
    fn constraint_graph_9x9_degrees() {
        let inst = load_sudoku(&"0".repeat(81), 9).unwrap();
        let g = build_constraint_graph(&inst);
        assert!(g.deg_c.iter().all(|&d| d == 3));
    }

    #[test]
    fn constraint_graph_single_binary() {
        let inst = ProblemInstance::new(
            3,
            2,
            vec![Constraint::NotEqual { i: 0, j: 1 }],
            vec![1.0],
            ObjectiveKind::None,
            BTreeMap::new(),
            Vec::new(),
            Family::Custom,
            "t".into(),
            None,
        )
        .unwrap();
        let g = build_constraint_graph(&inst);
        assert!(g.adjacent(0, 1) && g.adjacent(1, 0));
        assert!(g.adjacency[2].is_empty());
        assert_eq!(g.deg_c, vec![1, 1, 0]);
    }

    #[test]
    fn constraint_graph_symmetry_over_generated_instances() {
        for seed in 0..10 {
            let inst = gen_graph_instance(GraphFamily::Coloring(3), 9, 0.35, seed).unwrap();
            let g = build_constraint_graph(&inst);
            for i in 0..inst.n_vars {
                for &j in &g.adjacency[i] {
                    assert!(g.adjacent(j, i));
                }
            }
        }
    }

    #[test]
    fn json_round_trip_graph_and_sudoku() {
        let inst = gen_graph_instance(GraphFamily::Mis, 8, 0.5, 3).unwrap();
        let json = instance_to_json(&inst).unwrap();
        let back = instance_from_json(&json).unwrap();
        assert_eq!(back.edges, inst.edges);
        assert_eq!(back.constraints.len(), inst.constraints.len());

        let board = load_sudoku(SOLVED_4X4, 4).unwrap();
        let back = instance_from_json(&instance_to_json(&board).unwrap()).unwrap();
        assert_eq!(sudoku_line(&back).unwrap(), SOLVED_4X4);
    }

    pub(crate) fn solved_9x9() -> String {
        // A valid solved grid used by several tests.
        let base = [
            1, 2, 3, 4, 5, 6, 7, 8, 9, //
            4, 5, 6, 7, 8, 9, 1, 2, 3, //
            7, 8, 9, 1, 2, 3, 4, 5, 6, //
            2, 3, 4, 5, 6, 7, 8, 9, 1, //
            5, 6, 7, 8, 9, 1, 2, 3, 4, //
            8, 9, 1, 2, 3, 4, 5, 6, 7, //
            3, 4, 5, 6, 7, 8, 9, 1, 2, //
            6, 7, 8, 9, 1, 2, 3, 4, 5, //
            9, 1, 2, 3, 4, 5, 6, 7, 8,
        ];
        base.iter().map(|d| char::from_digit(*d, 10).unwrap()).collect()
    }
}
