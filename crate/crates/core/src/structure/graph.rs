use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result, RowIssue};
use crate::structure::Grid;

/// Undirected region adjacency over grid region indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    n_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    neighbor_counts: Vec<usize>,
}

impl AdjacencyGraph {
    /// Builds a graph from unordered pairs. Duplicate pairs collapse.
    pub fn new(n_nodes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::structural("adjacency graph has no nodes"));
        }
        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::structural(format!(
                    "edge ({a}, {b}) references a node outside 0..{n_nodes}"
                )));
            }
            if a == b {
                return Err(Error::structural(format!("self-loop on node {a}")));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        let mut neighbor_counts = vec![0; n_nodes];
        for &(a, b) in &edges {
            neighbor_counts[a] += 1;
            neighbor_counts[b] += 1;
        }
        Ok(AdjacencyGraph {
            n_nodes,
            edges,
            neighbor_counts,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbor_counts(&self) -> &[usize] {
        &self.neighbor_counts
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes)
            .filter(|&i| self.neighbor_counts[i] == 0)
            .collect()
    }

    /// Connected components in ascending order of their smallest node.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.n_nodes).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut roots: Vec<usize> = Vec::new();
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for i in 0..self.n_nodes {
            let r = find(&mut parent, i);
            match roots.iter().position(|&x| x == r) {
                Some(k) => comps[k].push(i),
                None => {
                    roots.push(r);
                    comps.push(vec![i]);
                }
            }
        }
        comps
    }

    /// Reads a `region_a,region_b` edge list, resolving identifiers against the grid.
    pub fn from_csv(path: impl AsRef<Path>, grid: &Grid) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, grid, &path.display().to_string())
    }

    pub fn from_reader(reader: impl std::io::Read, grid: &Grid, source_name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            region_a: String,
            region_b: String,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(&mut rdr, &["region_a", "region_b"], source_name)?;
        let mut pairs = Vec::new();
        let mut issues = Vec::new();
        for (k, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = k + 1;
            match rec {
                Ok(r) => match (grid.region_index(&r.region_a), grid.region_index(&r.region_b)) {
                    (Some(a), Some(b)) if a == b => issues.push(RowIssue {
                        row,
                        message: format!("self-loop on `{}`", r.region_a),
                    }),
                    (Some(a), Some(b)) => pairs.push((a, b)),
                    (a, _) => {
                        let missing = if a.is_none() { r.region_a } else { r.region_b };
                        issues.push(RowIssue {
                            row,
                            message: format!("unknown region `{missing}`"),
                        })
                    }
                },
                Err(e) => issues.push(RowIssue {
                    row,
                    message: e.to_string(),
                }),
            }
        }
        if !issues.is_empty() {
            return Err(Error::Validation {
                source_name: source_name.to_string(),
                issues,
            });
        }
        let g = Self::new(grid.n_regions(), pairs)?;
        let isolated = g.isolated_nodes();
        if !isolated.is_empty() {
            log::warn!(
                "{source_name}: {} isolated region(s) get independent effects: {:?}",
                isolated.len(),
                isolated
                    .iter()
                    .map(|&i| grid.regions()[i].as_str())
                    .collect::<Vec<_>>()
            );
        }
        Ok(g)
    }
}

/// Requires the CSV header to match `expected` exactly.
pub(crate) fn check_header<R: std::io::Read>(
    rdr: &mut csv::Reader<R>,
    expected: &[&str],
    source_name: &str,
) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::csv(source_name, e))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Validation {
            source_name: source_name.to_string(),
            issues: vec![RowIssue {
                row: 0,
                message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
            }],
        });
    }
    Ok(())
}
