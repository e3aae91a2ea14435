//! Augmented factor graphs over the linear PMU measurement model.
//!
//! Each row of `H` becomes a factor node connected to the variable nodes in
//! its structural pattern. Variable nodes that share a factor are also
//! joined directly, so the graph stays connected when factors are removed.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{PhasorKind, PmuPlacement, PowerSystem};
use crate::measurements::{true_phasors, MeasurementSet};
use crate::powerflow::{solve_power_flow, Injections};
use crate::wls_se::{build_model, MeasurementModel};

pub const DEFAULT_ENCODING_WIDTH: usize = 12;
pub const FACTOR_FEATURES: usize = 7;

/// Above this many nodes the average path length is estimated from a
/// sample of BFS sources.
const EXACT_PATH_LIMIT: usize = 5000;
const SAMPLED_SOURCES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Re,
    Im,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableNode {
    pub index: usize,
    pub feature: Vec<f64>,
}

/// Measurement-function class used in the factor one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorClass {
    VoltageRe = 0,
    VoltageIm = 1,
    CurrentRe = 2,
    CurrentIm = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorNode {
    pub index: usize,
    /// `[z, variance, covariance, one-hot(V_re, V_im, I_re, I_im)]`
    pub feature: [f64; FACTOR_FEATURES],
    pub phasor: usize,
    pub component: Component,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFactorGraph {
    pub n_buses: usize,
    /// Measurement equations of the full model the graph was built from.
    pub m: usize,
    pub encoding_width: usize,
    pub variables: Vec<VariableNode>,
    pub factors: Vec<FactorNode>,
    /// `(factor, variable)` pairs.
    pub fv_edges: Vec<(usize, usize)>,
    /// Unordered variable pairs `(a, b)` with `a < b`.
    pub vv_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub avg_degree: f64,
    pub avg_path_length: f64,
    pub avg_clustering: f64,
    pub redundancy: f64,
}

/// Big-endian binary expansion of `index` as 0.0 / 1.0 values.
pub fn binary_encoding(index: usize, width: usize) -> Result<Vec<f64>> {
    if width < usize::BITS as usize && index >> width != 0 {
        return Err(Error::EncodingWidth {
            width,
            count: index + 1,
        });
    }
    Ok((0..width)
        .rev()
        .map(|bit| if bit < usize::BITS as usize && (index >> bit) & 1 == 1 { 1.0 } else { 0.0 })
        .collect())
}

pub fn build_graph(model: &MeasurementModel, meas: &MeasurementSet, n: usize, width: usize) -> Result<AugmentedFactorGraph> {
    let n_var = 2 * n;
    if width < usize::BITS as usize && n_var > (1usize << width) {
        return Err(Error::EncodingWidth { width, count: n_var });
    }
    if model.n_buses != n || model.m() != 2 * meas.len() {
        return Err(Error::ShapeMismatch {
            context: "factor_graph::build_graph",
            left: vec![model.n_buses, model.m()],
            right: vec![n, 2 * meas.len()],
        });
    }
    let variables = (0..n_var)
        .map(|index| {
            Ok(VariableNode {
                index,
                feature: binary_encoding(index, width)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut factors = Vec::with_capacity(model.m());
    let mut fv_edges = Vec::with_capacity(4 * model.m());
    let mut vv: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (phasor, entry) in meas.entries.iter().enumerate() {
        let voltage = entry.polar.kind == PhasorKind::BusVoltage;
        let rect = &entry.rect;
        for component in [Component::Re, Component::Im] {
            let row = 2 * phasor + (component == Component::Im) as usize;
            let class = match (voltage, component) {
                (true, Component::Re) => FactorClass::VoltageRe,
                (true, Component::Im) => FactorClass::VoltageIm,
                (false, Component::Re) => FactorClass::CurrentRe,
                (false, Component::Im) => FactorClass::CurrentIm,
            };
            let (z, var) = match component {
                Component::Re => (rect.z_re, rect.var_re),
                Component::Im => (rect.z_im, rect.var_im),
            };
            let mut feature = [0.0; FACTOR_FEATURES];
            feature[0] = z;
            feature[1] = var;
            feature[2] = rect.cov;
            feature[3 + class as usize] = 1.0;
            let index = factors.len();
            factors.push(FactorNode {
                index,
                feature,
                phasor,
                component,
            });
            // structural pattern: every stored entry of the row
            let cols: Vec<usize> = model.h.row(row).map(|(c, _)| c).collect();
            for (k, &a) in cols.iter().enumerate() {
                fv_edges.push((index, a));
                for &b in &cols[k + 1..] {
                    if a != b {
                        vv.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }

    Ok(AugmentedFactorGraph {
        n_buses: n,
        m: model.m(),
        encoding_width: width,
        variables,
        factors,
        fv_edges,
        vv_edges: vv.into_iter().collect(),
    })
}

/// Remove the factor nodes of the given phasors. Augmentation edges are
/// kept, so the variable nodes remain connected.
pub fn simulate_measurement_loss(g: &AugmentedFactorGraph, phasor_ids: &[usize]) -> Result<AugmentedFactorGraph> {
    let n_phasors = g.m / 2;
    if let Some(&bad) = phasor_ids.iter().find(|&&p| p >= n_phasors) {
        return Err(Error::UnknownPhasor(bad));
    }
    let drop: BTreeSet<usize> = phasor_ids.iter().copied().collect();
    let mut remap = vec![usize::MAX; g.factors.len()];
    let mut factors = Vec::with_capacity(g.factors.len());
    for f in &g.factors {
        if !drop.contains(&f.phasor) {
            remap[f.index] = factors.len();
            factors.push(FactorNode {
                index: factors.len(),
                ..f.clone()
            });
        }
    }
    let fv_edges = g
        .fv_edges
        .iter()
        .filter(|(f, _)| remap[*f] != usize::MAX)
        .map(|&(f, v)| (remap[f], v))
        .collect();
    Ok(AugmentedFactorGraph {
        factors,
        fv_edges,
        ..g.clone()
    })
}

impl AugmentedFactorGraph {
    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_variables() + self.n_factors()
    }

    pub fn n_edges(&self) -> usize {
        self.fv_edges.len() + self.vv_edges.len()
    }

    /// Undirected adjacency over all nodes; variables first, then factors.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let nv = self.n_variables();
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for &(f, v) in &self.fv_edges {
            adj[nv + f].push(v);
            adj[v].push(nv + f);
        }
        for &(a, b) in &self.vv_edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn component_count(&self) -> usize {
        components(&self.adjacency())
    }

    /// Components of the variable-only subgraph formed by augmentation edges.
    pub fn variable_component_count(&self) -> usize {
        let mut adj = vec![Vec::new(); self.n_variables()];
        for &(a, b) in &self.vv_edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        components(&adj)
    }
}

fn components(adj: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    count
}

fn bfs_distance_sum(adj: &[Vec<usize>], source: usize) -> u64 {
    let mut dist = vec![u32::MAX; adj.len()];
    let mut queue = VecDeque::with_capacity(adj.len());
    dist[source] = 0;
    queue.push_back(source);
    let mut sum = 0u64;
    while let Some(u) = queue.pop_front() {
        sum += dist[u] as u64;
        for &w in &adj[u] {
            if dist[w] == u32::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    sum
}

/// Graph of `sys` under `placement`, measured noise-free at the nominal
/// operating point. The structure does not depend on the values.
pub fn nominal_graph(sys: &PowerSystem, placement: &PmuPlacement) -> Result<AugmentedFactorGraph> {
    let op = solve_power_flow(sys, &Injections::nominal(sys), 1e-10, 30)?;
    let meas = MeasurementSet::from_polar(&true_phasors(sys, &op, placement));
    let model = build_model(sys, placement, &meas)?;
    build_graph(&model, &meas, sys.n_buses(), DEFAULT_ENCODING_WIDTH)
}

pub fn graph_stats(g: &AugmentedFactorGraph) -> Result<GraphStats> {
    let adj = g.adjacency();
    let stats = adjacency_stats(&adj)?;
    Ok(GraphStats {
        redundancy: g.m as f64 / g.n_variables() as f64,
        ..stats
    })
}

/// Degree, path length and clustering of a simple undirected graph given as
/// sorted, deduplicated adjacency lists. `redundancy` is left at zero.
pub fn adjacency_stats(adj: &[Vec<usize>]) -> Result<GraphStats> {
    let nodes = adj.len();
    let components = components(adj);
    if components != 1 {
        return Err(Error::Disconnected { components });
    }
    let degree_sum: usize = adj.iter().map(Vec::len).sum();
    let edges = degree_sum / 2;

    let sources: Vec<usize> = if nodes <= EXACT_PATH_LIMIT {
        (0..nodes).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sample(&mut rng, nodes, SAMPLED_SOURCES).into_vec()
    };
    let total: u64 = sources.par_iter().map(|&s| bfs_distance_sum(adj, s)).sum();
    let avg_path_length = if nodes > 1 {
        total as f64 / (sources.len() * (nodes - 1)) as f64
    } else {
        0.0
    };

    let mut mark = vec![usize::MAX; nodes];
    let mut clustering = 0.0;
    for (u, nbrs) in adj.iter().enumerate() {
        let k = nbrs.len();
        if k < 2 {
            continue;
        }
        for &w in nbrs {
            mark[w] = u;
        }
        let mut links = 0usize;
        for &w in nbrs {
            links += adj[w].iter().filter(|&&x| mark[x] == u).count();
        }
        // each neighbor link counted from both ends
        clustering += links as f64 / (k * (k - 1)) as f64;
    }

    Ok(GraphStats {
        nodes,
        edges,
        avg_degree: degree_sum as f64 / nodes as f64,
        avg_path_length,
        avg_clustering: clustering / nodes as f64,
        redundancy: 0.0,
    })
}
