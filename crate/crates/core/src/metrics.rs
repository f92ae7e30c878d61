//! Distances between attribute distributions, and the batch-coverage math.
//!
//! * [`js_divergence`]: Jensen-Shannon divergence in bits, bounded by `[0, 1]`.
//! * [`emd`]: Earth Mover's Distance, solved exactly. Linear ground distance
//!   uses the 1-D CDF identity; any other matrix goes through a transportation
//!   simplex ([`transport`]).
//! * [`coverage_analysis`] / [`coverage_simulation`]: how often a category
//!   shows up when each batch of `b` draws covers `b` distinct categories out
//!   of `k`.

use std::sync::Arc;

use num_integer::binomial;
use num_rational::Ratio;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attribute::{AttributeKind, AttributeSchema, Histogram};
use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    schema: Arc<AttributeSchema>,
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(schema: Arc<AttributeSchema>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != schema.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} probabilities for {} labels",
                probs.len(),
                schema.len()
            )));
        }
        check_probs(&probs)?;
        Ok(Self { schema, probs })
    }

    pub fn from_histogram(hist: &Histogram) -> Result<Self> {
        let total = hist.total();
        if total == 0 {
            return Err(Error::InvalidDistribution(
                "cannot normalize an empty histogram".into(),
            ));
        }
        let probs = hist
            .counts()
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        Ok(Self {
            schema: hist.schema().clone(),
            probs,
        })
    }

    pub fn schema(&self) -> &Arc<AttributeSchema> {
        &self.schema
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(
            "probabilities must be non-negative".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {sum}"
        )));
    }
    Ok(())
}

fn same_support(p: &ProbDist, q: &ProbDist) -> Result<()> {
    p.schema.ensure_same(&q.schema)
}

pub fn js_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    same_support(p, q)?;
    Ok(jsd(&p.probs, &q.probs))
}

/// JS divergence on raw probability vectors, log base 2, `0·log 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += pi * (pi / mi).log2();
        }
        if qi > 0.0 {
            acc += qi * (qi / mi).log2();
        }
    }
    (0.5 * acc).clamp(0.0, 1.0)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistancePreset {
    /// 1 between distinct bins.
    Unit,
    /// `|i - j|`.
    Linear,
}

impl DistancePreset {
    pub fn for_kind(kind: AttributeKind) -> Self {
        match kind {
            AttributeKind::Nominal => DistancePreset::Unit,
            AttributeKind::Ordinal => DistancePreset::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundDistance {
    matrix: Vec<Vec<f64>>,
    preset: Option<DistancePreset>,
}

impl GroundDistance {
    pub fn unit(k: usize) -> Self {
        let matrix = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        Self {
            matrix,
            preset: Some(DistancePreset::Unit),
        }
    }

    pub fn linear(k: usize) -> Self {
        let matrix = (0..k)
            .map(|i| (0..k).map(|j| (i as f64 - j as f64).abs()).collect())
            .collect();
        Self {
            matrix,
            preset: Some(DistancePreset::Linear),
        }
    }

    pub fn preset(preset: DistancePreset, k: usize) -> Self {
        match preset {
            DistancePreset::Unit => Self::unit(k),
            DistancePreset::Linear => Self::linear(k),
        }
    }

    pub fn for_schema(schema: &AttributeSchema) -> Self {
        Self::preset(DistancePreset::for_kind(schema.kind()), schema.len())
    }

    /// Arbitrary square matrix: symmetric, non-negative, zero diagonal.
    pub fn custom(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let k = matrix.len();
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidGroundDistance("matrix is not square".into()));
            }
            for (j, &d) in row.iter().enumerate() {
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidGroundDistance(format!("d({i},{j}) = {d}")));
                }
                if i == j && d != 0.0 {
                    return Err(Error::InvalidGroundDistance(format!(
                        "d({i},{i}) must be 0"
                    )));
                }
                if d != matrix[j][i] {
                    return Err(Error::InvalidGroundDistance(format!(
                        "d({i},{j}) != d({j},{i})"
                    )));
                }
            }
        }
        Ok(Self {
            matrix,
            preset: None,
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i][j]
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    pub fn satisfies_triangle_inequality(&self) -> bool {
        let k = self.len();
        (0..k).all(|i| {
            (0..k).all(|j| {
                (0..k).all(|m| self.matrix[i][j] <= self.matrix[i][m] + self.matrix[m][j] + 1e-12)
            })
        })
    }
}

pub fn emd(p: &ProbDist, q: &ProbDist, d: &GroundDistance) -> Result<f64> {
    same_support(p, q)?;
    if d.len() != p.probs.len() {
        return Err(Error::InvalidGroundDistance(format!(
            "{}x{} matrix for {} bins",
            d.len(),
            d.len(),
            p.probs.len()
        )));
    }
    Ok(match d.preset {
        Some(DistancePreset::Linear) => emd_linear(&p.probs, &q.probs),
        _ => transport(&p.probs, &q.probs, d.matrix()).normalized_cost(),
    })
}

/// 1-D EMD with `d = |i - j|`: the L1 distance between the two CDFs.
pub fn emd_linear(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q).take(p.len().saturating_sub(1)) {
        cdf_gap += a - b;
        total += cdf_gap.abs();
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `flows[i][j]`: mass moved from supply bin `i` to demand bin `j`.
    pub flows: Vec<Vec<f64>>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn total_flow(&self) -> f64 {
        self.flows.iter().flatten().sum()
    }

    /// Cost per unit of mass moved; zero when nothing moves.
    pub fn normalized_cost(&self) -> f64 {
        let flow = self.total_flow();
        if flow > 0.0 {
            self.cost / flow
        } else {
            0.0
        }
    }
}

/// Exact balanced transportation problem via the transportation simplex:
/// northwest-corner start, u/v potentials, Bland's rule against cycling.
/// The demand is rescaled to the supply's total before solving.
pub fn transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> TransportPlan {
    let mut flows = vec![vec![0.0; demand.len()]; supply.len()];
    let rows: Vec<usize> = (0..supply.len()).filter(|&i| supply[i] > 0.0).collect();
    let cols: Vec<usize> = (0..demand.len()).filter(|&j| demand[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return TransportPlan { flows, cost: 0.0 };
    }
    let s_total: f64 = rows.iter().map(|&i| supply[i]).sum();
    let d_total: f64 = cols.iter().map(|&j| demand[j]).sum();
    let s: Vec<f64> = rows.iter().map(|&i| supply[i]).collect();
    let d: Vec<f64> = cols
        .iter()
        .map(|&j| demand[j] * s_total / d_total)
        .collect();
    let c: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| cost[i][j]).collect())
        .collect();

    let solved = TransportSimplex::new(&s, &d, c).solve();
    let mut total = 0.0;
    for (ri, &i) in rows.iter().enumerate() {
        for (cj, &j) in cols.iter().enumerate() {
            let f = solved.flow[ri][cj];
            flows[i][j] = f;
            total += f * cost[i][j];
        }
    }
    TransportPlan { flows, cost: total }
}

struct TransportSimplex {
    m: usize,
    n: usize,
    cost: Vec<Vec<f64>>,
    flow: Vec<Vec<f64>>,
    basic: Vec<Vec<bool>>,
    tol: f64,
}

impl TransportSimplex {
    fn new(supply: &[f64], demand: &[f64], cost: Vec<Vec<f64>>) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let scale = cost.iter().flatten().fold(1.0_f64, |a, &b| a.max(b.abs()));
        let mut simplex = Self {
            m,
            n,
            cost,
            flow: vec![vec![0.0; n]; m],
            basic: vec![vec![false; n]; m],
            tol: 1e-12 * scale,
        };
        simplex.northwest_corner(supply, demand);
        simplex
    }

    /// Staircase start: exactly m + n - 1 basic cells forming a spanning tree,
    /// degenerate zero-flow cells included.
    fn northwest_corner(&mut self, supply: &[f64], demand: &[f64]) {
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = s[i].min(d[j]).max(0.0);
            self.flow[i][j] = x;
            self.basic[i][j] = true;
            s[i] -= x;
            d[j] -= x;
            if i == self.m - 1 && j == self.n - 1 {
                break;
            }
            if i == self.m - 1 {
                j += 1;
            } else if j == self.n - 1 || s[i] <= d[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    /// Potentials with u[0] = 0 so that u[i] + v[j] = c[i][j] on basic cells.
    #[allow(clippy::needless_range_loop)]
    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![f64::NAN; self.m];
        let mut v = vec![f64::NAN; self.n];
        u[0] = 0.0;
        // node ids: rows 0..m, columns m..m+n
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            if node < self.m {
                let i = node;
                for j in 0..self.n {
                    if self.basic[i][j] && v[j].is_nan() {
                        v[j] = self.cost[i][j] - u[i];
                        stack.push(self.m + j);
                    }
                }
            } else {
                let j = node - self.m;
                for i in 0..self.m {
                    if self.basic[i][j] && u[i].is_nan() {
                        u[i] = self.cost[i][j] - v[j];
                        stack.push(i);
                    }
                }
            }
        }
        (u, v)
    }

    /// Basis cells on the tree path from column `col` to row `row`.
    fn tree_path(&self, col: usize, row: usize) -> Vec<(usize, usize)> {
        let total = self.m + self.n;
        let start = self.m + col;
        let mut parent: Vec<Option<usize>> = vec![None; total];
        let mut visited = vec![false; total];
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == row {
                break;
            }
            let neighbors: Vec<usize> = if node < self.m {
                (0..self.n)
                    .filter(|&j| self.basic[node][j])
                    .map(|j| self.m + j)
                    .collect()
            } else {
                let j = node - self.m;
                (0..self.m).filter(|&i| self.basic[i][j]).collect()
            };
            for next in neighbors {
                if !visited[next] {
                    visited[next] = true;
                    parent[next] = Some(node);
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = row;
        while let Some(prev) = parent[node] {
            let cell = if node < self.m {
                (node, prev - self.m)
            } else {
                (prev, node - self.m)
            };
            path.push(cell);
            node = prev;
        }
        path.reverse();
        path
    }

    fn solve(mut self) -> Self {
        loop {
            let (u, v) = self.potentials();
            let entering = (0..self.m)
                .flat_map(|i| (0..self.n).map(move |j| (i, j)))
                .find(|&(i, j)| !self.basic[i][j] && self.cost[i][j] - u[i] - v[j] < -self.tol);
            let Some((ei, ej)) = entering else {
                return self;
            };
            // cycle: entering (+), then alternating - / + along the path col ej -> row ei
            let path = self.tree_path(ej, ei);
            debug_assert!(path.len() % 2 == 1, "cycle must alternate");
            let mut leaving: Option<(usize, usize)> = None;
            let mut theta = f64::INFINITY;
            for &(i, j) in path.iter().step_by(2) {
                let f = self.flow[i][j];
                let better =
                    f < theta || (f == theta && leaving.is_some_and(|(li, lj)| (i, j) < (li, lj)));
                if better {
                    theta = f;
                    leaving = Some((i, j));
                }
            }
            let (li, lj) = leaving.expect("cycle has a minus cell");
            self.flow[ei][ej] = theta;
            for (k, &(i, j)) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[i][j] -= theta;
                } else {
                    self.flow[i][j] += theta;
                }
            }
            self.flow[li][lj] = 0.0;
            self.basic[li][lj] = false;
            self.basic[ei][ej] = true;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageAnalysis {
    pub k: u64,
    pub b: u64,
    pub trials: u64,
    /// Probability that a given category appears in one batch, kept exact.
    #[serde(serialize_with = "ser_ratio")]
    pub p: Ratio<u128>,
    pub expected: f64,
    pub sigma: f64,
}

fn ser_ratio<S: serde::Serializer>(r: &Ratio<u128>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

impl CoverageAnalysis {
    pub fn p_f64(&self) -> f64 {
        ratio_f64(&self.p)
    }

    /// Expected share of all images that land in one category, in percent.
    pub fn expected_share_pct(&self) -> f64 {
        100.0 * self.expected / (self.trials * self.b.min(self.k)) as f64
    }
}

fn ratio_f64(r: &Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `p = (C(k,b) - C(k-1,b)) / C(k,b)`, `expected = trials·p`,
/// `sigma = sqrt(trials·p·(1-p))`. A batch as large as `k` covers everything.
pub fn coverage_analysis(k: u64, b: u64, trials: u64) -> Result<CoverageAnalysis> {
    if k == 0 || b == 0 || trials == 0 {
        return Err(Error::InvalidParameter(format!(
            "coverage needs k, b, trials >= 1 (got {k}, {b}, {trials})"
        )));
    }
    if k > 120 {
        return Err(Error::InvalidParameter(format!(
            "k = {k} too large for exact binomials"
        )));
    }
    let p = if b >= k {
        Ratio::from_integer(1)
    } else {
        let all = binomial(u128::from(k), u128::from(b));
        let without = binomial(u128::from(k - 1), u128::from(b));
        Ratio::new(all - without, all)
    };
    let pf = ratio_f64(&p);
    let n = trials as f64;
    Ok(CoverageAnalysis {
        k,
        b,
        trials,
        p,
        expected: n * pf,
        sigma: (n * pf * (1.0 - pf)).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryShare {
    pub mean_count: f64,
    pub mean_share_pct: f64,
    pub min_share_pct: f64,
    pub max_share_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageSimulation {
    pub k: u64,
    pub b: u64,
    pub trials: u64,
    pub runs: u64,
    pub seed: u64,
    pub per_category: Vec<CategoryShare>,
    /// Mean count per category, pooled over categories and runs.
    pub mean_count: f64,
    pub mean_share_pct: f64,
    /// 2.5% and 97.5% quantiles of a category's share, pooled.
    pub central_band_pct: (f64, f64),
}

/// Monte Carlo: `runs` replications of `trials` batches, each batch drawing
/// `min(b, k)` distinct categories uniformly.
pub fn coverage_simulation(
    k: u64,
    b: u64,
    trials: u64,
    runs: u64,
    seed: u64,
) -> Result<CoverageSimulation> {
    if k == 0 || b == 0 || trials == 0 || runs == 0 {
        return Err(Error::InvalidParameter(format!(
            "simulation needs k, b, trials, runs >= 1 (got {k}, {b}, {trials}, {runs})"
        )));
    }
    let k_us = usize::try_from(k).map_err(|_| Error::InvalidParameter("k too large".into()))?;
    let draw = b.min(k) as usize;
    let per_run_images = (trials as usize * draw) as f64;
    let mut rng = crate::rng::stream(seed, crate::rng::SIMULATION_STREAM);

    let mut categories: Vec<usize> = (0..k_us).collect();
    let mut counts = vec![0u64; k_us];
    let mut sum_counts = vec![0u64; k_us];
    let mut min_counts = vec![u64::MAX; k_us];
    let mut max_counts = vec![0u64; k_us];
    // pooled distribution of one category's count, for the quantile band
    let mut count_freq = vec![0u64; trials as usize + 1];

    for _ in 0..runs {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..trials {
            let (picked, _) = categories.partial_shuffle(&mut rng, draw);
            for &c in picked.iter() {
                counts[c] += 1;
            }
        }
        for c in 0..k_us {
            sum_counts[c] += counts[c];
            min_counts[c] = min_counts[c].min(counts[c]);
            max_counts[c] = max_counts[c].max(counts[c]);
            count_freq[counts[c] as usize] += 1;
        }
    }

    let pct = |count: f64| 100.0 * count / per_run_images;
    let per_category: Vec<CategoryShare> = (0..k_us)
        .map(|c| {
            let mean = sum_counts[c] as f64 / runs as f64;
            CategoryShare {
                mean_count: mean,
                mean_share_pct: pct(mean),
                min_share_pct: pct(min_counts[c] as f64),
                max_share_pct: pct(max_counts[c] as f64),
            }
        })
        .collect();
    let mean_count = sum_counts.iter().sum::<u64>() as f64 / (runs * k) as f64;
    let pooled = runs * k;
    let quantile = |q: f64| -> f64 {
        let target = (q * pooled as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (count, &freq) in count_freq.iter().enumerate() {
            seen += freq;
            if seen >= target {
                return pct(count as f64);
            }
        }
        pct(trials as f64)
    };
    Ok(CoverageSimulation {
        k,
        b,
        trials,
        runs,
        seed,
        per_category,
        mean_count,
        mean_share_pct: pct(mean_count),
        central_band_pct: (quantile(0.025), quantile(0.975)),
    })
}
