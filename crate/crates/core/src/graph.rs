//! Skeleton graphs and their identity / inward / outward adjacency subsets.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NTU_EDGES: &str = include_str!("../data/ntu25_edges.txt");
const OPENPOSE_EDGES: &str = include_str!("../data/openpose18_edges.txt");

/// Head, left/right hand tips, left/right feet (0-based NTU indices).
pub const NTU_HUBS: [usize; 5] = [3, 21, 23, 15, 19];
/// Nose, right/left wrists, right/left ankles (0-based OpenPose indices).
pub const OPENPOSE_HUBS: [usize; 5] = [0, 4, 7, 10, 13];

/// Adjacency subsets in the order the network consumes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subset {
    Identity,
    Inward,
    Outward,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Identity, Subset::Inward, Subset::Outward];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Identity => "identity",
            Subset::Inward => "inward",
            Subset::Outward => "outward",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    num_joints: usize,
    /// Natural bones as `(parent, child)`.
    edges: Vec<(usize, usize)>,
    /// Hub links as `(from, to)`, present in both directed subsets.
    extra_links: Vec<(usize, usize)>,
    hubs: Vec<usize>,
    a_id: Tensor,
    a_in: Tensor,
    a_out: Tensor,
}

impl GraphSpec {
    pub fn ntu(extra_links: bool) -> Self {
        let edges = parse_edge_list(NTU_EDGES).expect("bundled NTU edge list");
        Self::from_edges(25, edges, extra_links.then_some(&NTU_HUBS[..])).expect("valid NTU graph")
    }

    pub fn kinetics(extra_links: bool) -> Self {
        let edges = parse_edge_list(OPENPOSE_EDGES).expect("bundled OpenPose edge list");
        Self::from_edges(18, edges, extra_links.then_some(&OPENPOSE_HUBS[..]))
            .expect("valid OpenPose graph")
    }

    /// Builds a graph from `(parent, child)` bones; every unordered pair of
    /// `hubs` gets an extra link.
    pub fn from_edges(
        num_joints: usize,
        edges: Vec<(usize, usize)>,
        hubs: Option<&[usize]>,
    ) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::invalid("graph needs at least one joint"));
        }
        let check = |j: usize| {
            if j < num_joints {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "joint index {j} out of range for V={num_joints}"
                )))
            }
        };
        for &(p, c) in &edges {
            check(p)?;
            check(c)?;
        }
        let mut extra_links = Vec::new();
        if let Some(hubs) = hubs {
            for &h in hubs {
                check(h)?;
            }
            for (i, &a) in hubs.iter().enumerate() {
                for &b in &hubs[i + 1..] {
                    extra_links.push((a, b));
                }
            }
        }
        let v = num_joints;
        let mut inward = Tensor::zeros(&[v, v]);
        let mut outward = Tensor::zeros(&[v, v]);
        for &(p, c) in edges.iter().chain(&extra_links) {
            // row = receiving vertex, column = source vertex
            inward.set(&[p, c], 1.0);
            outward.set(&[c, p], 1.0);
        }
        Ok(GraphSpec {
            num_joints,
            a_id: Tensor::eye(v),
            a_in: normalize_adjacency(&inward)?,
            a_out: normalize_adjacency(&outward)?,
            edges,
            extra_links,
            hubs: hubs.map(<[usize]>::to_vec).unwrap_or_default(),
        })
    }

    /// Parses a `parent child` edge list; the joint count is one past the largest index.
    pub fn from_edge_list_text(text: &str, hubs: Option<&[usize]>) -> Result<Self> {
        let edges = parse_edge_list(text)?;
        let v = edges.iter().map(|&(p, c)| p.max(c) + 1).max().unwrap_or(1);
        Self::from_edges(v, edges, hubs)
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn extra_links(&self) -> &[(usize, usize)] {
        &self.extra_links
    }

    pub fn has_extra_links(&self) -> bool {
        !self.extra_links.is_empty()
    }

    pub fn subset(&self, s: Subset) -> &Tensor {
        match s {
            Subset::Identity => &self.a_id,
            Subset::Inward => &self.a_in,
            Subset::Outward => &self.a_out,
        }
    }

    /// Parent of every joint under the natural bones; roots map to `None`.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parents = vec![None; self.num_joints];
        for &(p, c) in &self.edges {
            parents[c] = Some(p);
        }
        parents
    }

    /// Same graph with vertices relabelled so that old vertex `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_joints {
            return Err(Error::shape("permuted", &[perm.len()], &[self.num_joints]));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(p, c)| (perm[p], perm[c]))
            .collect();
        let hubs: Vec<usize> = self.hubs.iter().map(|&h| perm[h]).collect();
        Self::from_edges(
            self.num_joints,
            edges,
            (!hubs.is_empty()).then_some(&hubs[..]),
        )
    }
}

/// Parses `parent child` pairs, one per line; `#` starts a comment.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let mut it = line.split_whitespace();
        let mut next = || -> Result<usize> {
            it.next()
                .ok_or_else(|| err("expected `parent child`"))?
                .parse()
                .map_err(|_| err("joint index is not a non-negative integer"))
        };
        let (p, c) = (next()?, next()?);
        if it.next().is_some() {
            return Err(err("trailing fields"));
        }
        edges.push((p, c));
    }
    Ok(edges)
}

/// Divides each column by its sum; all-zero columns stay zero.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let [rows, cols] = a.shape()[..] else {
        return Err(Error::invalid(format!(
            "adjacency must be square, got {:?}",
            a.shape()
        )));
    };
    if rows != cols {
        return Err(Error::shape(
            "normalize_adjacency",
            a.shape(),
            &[cols, rows],
        ));
    }
    let mut out = a.clone();
    for j in 0..cols {
        let s: f64 = (0..rows).map(|i| a.get(&[i, j])).sum();
        if s != 0.0 {
            for i in 0..rows {
                out.set(&[i, j], a.get(&[i, j]) / s);
            }
        }
    }
    Ok(out)
}

/// `G[n,c,t,i] = Σ_j A[i,j]·F[n,c,t,j]`.
pub fn apply_graph(a: &Tensor, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let fv = tape.constant(features.clone());
    let g = tape.graph_mix(av, fv)?;
    Ok(tape.value(g).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn off_diagonal_nonzeros(t: &Tensor) -> usize {
        let v = t.shape()[0];
        (0..v)
            .flat_map(|i| (0..v).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && t.get(&[i, j]) != 0.0)
            .count()
    }

    fn assert_columns_normalized(t: &Tensor) {
        let v = t.shape()[0];
        for j in 0..v {
            let s: f64 = (0..v).map(|i| t.get(&[i, j])).sum();
            assert!(
                s == 0.0 || (s - 1.0).abs() <= 1e-12,
                "column {j} sums to {s}"
            );
        }
    }

    #[test]
    fn ntu_graph_counts() {
        let g = GraphSpec::ntu(false);
        assert_eq!(g.num_joints(), 25);
        assert_eq!(g.edges().len(), 24);
        assert_eq!(off_diagonal_nonzeros(g.subset(Subset::Inward)), 24);
        assert_eq!(off_diagonal_nonzeros(g.subset(Subset::Outward)), 24);
        assert_eq!(g.subset(Subset::Identity), &Tensor::eye(25));

        let gx = GraphSpec::ntu(true);
        assert_eq!(gx.extra_links().len(), 10);
        assert_eq!(off_diagonal_nonzeros(gx.subset(Subset::Inward)), 34);
        assert_eq!(off_diagonal_nonzeros(gx.subset(Subset::Outward)), 34);
        for s in Subset::ALL {
            assert_columns_normalized(gx.subset(s));
        }
    }

    #[test]
    fn ntu_root_is_spine_shoulder() {
        let parents = GraphSpec::ntu(false).parents();
        let roots: Vec<usize> = (0..25).filter(|&j| parents[j].is_none()).collect();
        assert_eq!(roots, vec![20]);
    }

    #[test]
    fn kinetics_graph_counts() {
        let g = GraphSpec::kinetics(false);
        assert_eq!(g.num_joints(), 18);
        assert_eq!(g.edges().len(), 17);
        let gx = GraphSpec::kinetics(true);
        assert_eq!(off_diagonal_nonzeros(gx.subset(Subset::Inward)), 27);
        let roots: Vec<usize> = (0..18).filter(|&j| g.parents()[j].is_none()).collect();
        assert_eq!(roots, vec![1]);
    }

    #[test]
    fn extra_links_are_bidirectional_and_superset() {
        for (plain, extra) in [
            (GraphSpec::ntu(false), GraphSpec::ntu(true)),
            (GraphSpec::kinetics(false), GraphSpec::kinetics(true)),
        ] {
            let v = plain.num_joints();
            let (ai, ao) = (extra.subset(Subset::Inward), extra.subset(Subset::Outward));
            for i in 0..v {
                for j in 0..v {
                    if plain.subset(Subset::Inward).get(&[i, j]) != 0.0 {
                        assert!(ai.get(&[i, j]) != 0.0);
                    }
                }
            }
            for &(a, b) in extra.extra_links() {
                assert!(ai.get(&[a, b]) > 0.0 && ao.get(&[b, a]) > 0.0);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_adjacency(&Tensor::eye(3)).unwrap(),
            Tensor::eye(3)
        );
        let a = Tensor::new(&[2, 2], vec![1., 1., 0., 1.]).unwrap();
        assert_eq!(normalize_adjacency(&a).unwrap().data(), &[1., 0.5, 0., 0.5]);
        let z = Tensor::new(&[2, 2], vec![1., 0., 1., 0.]).unwrap();
        assert_eq!(normalize_adjacency(&z).unwrap().data(), &[0.5, 0., 0.5, 0.]);
    }

    #[test]
    fn apply_graph_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        assert_eq!(apply_graph(&Tensor::eye(3), &f).unwrap(), f);

        let mut a = Tensor::zeros(&[3, 3]);
        a.set(&[0, 1], 1.0);
        let g = apply_graph(&a, &f).unwrap();
        for nct in 0..12 {
            assert_eq!(g.data()[nct * 3], f.data()[nct * 3 + 1]);
            assert_eq!(g.data()[nct * 3 + 1], 0.0);
        }

        let a = Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let g = apply_graph(&a, &f).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                for t in 0..3 {
                    for i in 0..3 {
                        let s: f64 = (0..3).map(|j| a.get(&[i, j]) * f.get(&[n, c, t, j])).sum();
                        assert!((g.get(&[n, c, t, i]) - s).abs() < 1e-14);
                    }
                }
            }
        }
        assert!(apply_graph(&Tensor::eye(4), &f).is_err());
    }

    #[test]
    fn edge_list_text() {
        let g = GraphSpec::from_edge_list_text("# chain\n0 1\n1 2 # tail\n\n2 3\n", Some(&[0, 3]))
            .unwrap();
        assert_eq!(g.num_joints(), 4);
        assert_eq!(g.edges(), &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(g.extra_links(), &[(0, 3)]);
        assert!(matches!(
            parse_edge_list("0 x"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(GraphSpec::from_edges(3, vec![(0, 3)], None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn normalization_is_idempotent_and_column_stochastic(bits in prop::collection::vec(any::<bool>(), 36)) {
            let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let a = Tensor::new(&[6, 6], data).unwrap();
            let n = normalize_adjacency(&a).unwrap();
            assert_columns_normalized(&n);
            let again = normalize_adjacency(&n).unwrap();
            prop_assert!(again.max_abs_diff(&n) <= 1e-15);
        }
    }
}
