//! Measurements: Pearson χ² on replica inter-distances, access metrics,
//! workload quantiles, hop-distance CDF and convergence detection.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::access::AccessMode;
use crate::error::{Error, Result};
use crate::geometry::{euclidean_distance, hop_distances, NetworkGraph, NodeId, Position, Region};
use crate::replication::Decision;

/// Conventional 95% critical value at one degree of freedom.
pub const CHI2_GOOD_FIT: f64 = 3.84;
/// Minimum expected count per bin before merging with a neighbor.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn equal_width(lo: f64, hi: f64, bins: usize) -> Self {
        let w = (hi - lo) / bins as f64;
        Self {
            edges: (0..=bins).map(|i| lo + w * i as f64).collect(),
            counts: vec![0.0; bins],
        }
    }

    pub fn with_edges(edges: Vec<f64>) -> Self {
        let bins = edges.len().saturating_sub(1);
        Self {
            edges,
            counts: vec![0.0; bins],
        }
    }

    /// Samples outside the edges are clamped into the first or last bin.
    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let i = self.edges.partition_point(|e| *e <= x).saturating_sub(1).min(bins - 1);
        self.counts[i] += 1.0;
    }

    pub fn from_samples(edges: &[f64], samples: &[f64]) -> Self {
        let mut h = Self::with_edges(edges.to_vec());
        samples.iter().for_each(|&x| h.add(x));
        h
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Pearson statistic. `expected` is rescaled to the observed total and
/// adjacent bins are pooled left to right until each pool expects at least
/// five samples; a short tail joins the last pool.
pub fn chi_square(observed: &Histogram, expected: &Histogram) -> Result<f64> {
    if observed.edges != expected.edges {
        return Err(Error::BinMismatch);
    }
    let e_total = expected.total();
    if !(e_total > 0.0) {
        return Err(Error::ZeroExpected);
    }
    let scale = observed.total() / e_total;
    let mut pools: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, e) in observed.counts.iter().zip(&expected.counts) {
        o_acc += o;
        e_acc += e * scale;
        if e_acc >= MIN_EXPECTED {
            pools.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if o_acc > 0.0 || e_acc > 0.0 {
        match pools.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => pools.push((o_acc, e_acc)),
        }
    }
    Ok(pools
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum())
}

/// Distances between every ordered pair of distinct replicas.
pub fn interdistance_samples(positions: &[Position], replicas: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::with_capacity(replicas.len() * replicas.len().saturating_sub(1));
    for (i, a) in replicas.iter().enumerate() {
        for (j, b) in replicas.iter().enumerate() {
            if i != j {
                out.push(euclidean_distance(positions[a.index()], positions[b.index()]));
            }
        }
    }
    out
}

/// Expected inter-distance histogram when `count` replicas sit on distinct
/// nodes drawn uniformly from `candidates`. Averaged over `n_draws` draws,
/// so its total matches one observation of `count` replicas.
pub fn nodal_uniform_reference<R: Rng + ?Sized>(
    positions: &[Position],
    candidates: &[NodeId],
    count: usize,
    n_draws: usize,
    rng: &mut R,
    edges: &[f64],
) -> Histogram {
    let mut h = Histogram::with_edges(edges.to_vec());
    let count = count.min(candidates.len());
    if count < 2 || n_draws == 0 {
        return h;
    }
    if count == candidates.len() {
        // every draw is the full set
        for x in interdistance_samples(positions, candidates) {
            h.add(x);
        }
        return h;
    }
    let mut picked = Vec::with_capacity(count);
    for _ in 0..n_draws {
        picked.clear();
        picked.extend(sample(rng, candidates.len(), count).iter().map(|i| candidates[i]));
        for x in interdistance_samples(positions, &picked) {
            h.add(x);
        }
    }
    h.counts.iter_mut().for_each(|c| *c /= n_draws as f64);
    h
}

/// Same as the nodal reference but with points uniform over `region`.
pub fn spatial_uniform_reference<R: Rng + ?Sized>(
    region: Region,
    count: usize,
    n_draws: usize,
    rng: &mut R,
    edges: &[f64],
) -> Histogram {
    let mut h = Histogram::with_edges(edges.to_vec());
    if count < 2 || n_draws == 0 {
        return h;
    }
    let ids: Vec<NodeId> = (0..count as u32).map(NodeId).collect();
    let mut pts = Vec::with_capacity(count);
    for _ in 0..n_draws {
        pts.clear();
        for _ in 0..count {
            pts.push(Position::new(
                region.x + rng.random::<f64>() * region.width,
                region.y + rng.random::<f64>() * region.height,
            ));
        }
        for x in interdistance_samples(&pts, &ids) {
            h.add(x);
        }
    }
    h.counts.iter_mut().for_each(|c| *c /= n_draws as f64);
    h
}

/// Distribution of consumer hop distance to the nearest replica.
#[derive(Debug, Clone, PartialEq)]
pub struct HopCdf {
    /// `counts[h]`: consumers exactly `h` hops from their nearest replica.
    pub counts: Vec<usize>,
    pub unreachable: usize,
    pub consumers: usize,
}

impl HopCdf {
    pub fn at(&self, h: u32) -> f64 {
        if self.consumers == 0 {
            return 1.0;
        }
        let within: usize = self.counts.iter().take(h as usize + 1).sum();
        within as f64 / self.consumers as f64
    }
}

pub fn hop_cdf(g: &NetworkGraph, replicas: &[NodeId]) -> HopCdf {
    let dist = hop_distances(g, replicas);
    let mut counts = Vec::new();
    let mut unreachable = 0;
    let mut consumers = 0;
    for (i, d) in dist.iter().enumerate() {
        if replicas.contains(&g.id_at(i)) {
            continue;
        }
        consumers += 1;
        match d {
            Some(h) => {
                let h = *h as usize;
                if counts.len() <= h {
                    counts.resize(h + 1, 0);
                }
                counts[h] += 1;
            }
            None => unreachable += 1,
        }
    }
    HopCdf {
        counts,
        unreachable,
        consumers,
    }
}

/// Earliest sample time at or after `warmup` from which the `window`-sample
/// moving mean stays within `tol * target` of `target` for `window`
/// consecutive samples.
pub fn convergence_time(
    series: &[(f64, f64)],
    target: f64,
    tol: f64,
    window: usize,
    warmup: f64,
) -> Option<f64> {
    let w = window.max(1);
    if series.len() < w {
        return None;
    }
    let band = tol * target.abs();
    // moving mean ending at sample i (full windows only)
    let means: Vec<Option<f64>> = (0..series.len())
        .map(|i| {
            (i + 1 >= w).then(|| series[i + 1 - w..=i].iter().map(|(_, c)| c).sum::<f64>() / w as f64)
        })
        .collect();
    let inside = |i: usize| means[i].is_some_and(|m| (m - target).abs() <= band + 1e-12);
    (0..series.len())
        .filter(|&i| series[i].0 >= warmup)
        .find(|&i| i + w <= series.len() && (i..i + w).all(inside))
        .map(|i| series[i].0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub qs: Vec<f64>,
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub n: usize,
}

impl Quantiles {
    pub fn get(&self, q: f64) -> Option<f64> {
        self.qs
            .iter()
            .position(|x| (x - q).abs() < 1e-12)
            .map(|i| self.values[i])
    }

    pub fn median(&self) -> Option<f64> {
        self.get(0.5)
    }
}

pub const DEFAULT_QS: [f64; 3] = [0.25, 0.5, 0.75];

/// Nearest-rank quantiles plus support bounds and mean.
pub fn quantiles(samples: &[f64], qs: &[f64]) -> Result<Quantiles> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let values = qs
        .iter()
        .map(|&q| {
            let rank = (q * n as f64).ceil() as usize;
            sorted[rank.clamp(1, n) - 1]
        })
        .collect();
    Ok(Quantiles {
        qs: qs.to_vec(),
        values,
        min: sorted[0],
        max: sorted[n - 1],
        mean: sorted.iter().sum::<f64>() / n as f64,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOutcome {
    Solved,
    Unsolved,
    /// The consumer was handed the content while its query was pending.
    Cancelled,
}

impl QueryOutcome {
    pub fn label(self) -> &'static str {
        match self {
            QueryOutcome::Solved => "solved",
            QueryOutcome::Unsolved => "unsolved",
            QueryOutcome::Cancelled => "cancelled",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "solved" => Some(QueryOutcome::Solved),
            "unsolved" => Some(QueryOutcome::Unsolved),
            "cancelled" => Some(QueryOutcome::Cancelled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub t_issue: f64,
    pub origin: NodeId,
    pub mode: AccessMode,
    pub outcome: QueryOutcome,
    pub latency: Option<f64>,
    /// Distinct replicas whose reply reached the consumer.
    pub replies: u32,
    /// Hop count of the first delivered reply.
    pub hops: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadRecord {
    pub t: f64,
    pub node: NodeId,
    pub served: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    pub t: f64,
    pub node: NodeId,
    pub served: u64,
    pub decision: Decision,
    pub replicas_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub t: f64,
    pub replica_count: usize,
    /// Target |C| for the demand phase active at `t`.
    pub target: Option<f64>,
    pub chi2_vs_nodal: Option<f64>,
    pub chi2_vs_spatial: Option<f64>,
    pub chi2_vs_optimal: Option<f64>,
    /// χ² of the replicas inside the demand region against nodal
    /// uniformity over the nodes inside it.
    pub chi2_vs_nodal_region: Option<f64>,
    pub hop_cdf1: Option<f64>,
    pub hop_cdf2: Option<f64>,
    pub replicas_in_region: Option<f64>,
    pub nodes_in_region: Option<f64>,
}

impl SnapshotMetrics {
    pub fn bare(t: f64, replica_count: usize) -> Self {
        Self {
            t,
            replica_count,
            target: None,
            chi2_vs_nodal: None,
            chi2_vs_spatial: None,
            chi2_vs_optimal: None,
            chi2_vs_nodal_region: None,
            hop_cdf1: None,
            hop_cdf2: None,
            replicas_in_region: None,
            nodes_in_region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessMetrics {
    pub issued: usize,
    pub solved: usize,
    /// `None` when no query was issued.
    pub solving_ratio: Option<f64>,
    /// Solving ratio per time window.
    pub window_solving_ratio: Option<Quantiles>,
    pub redundancy: Option<Quantiles>,
    pub latency: Option<Quantiles>,
}

/// Cancelled queries count neither as issued nor as solved.
pub fn access_metrics(records: &[QueryRecord], window: f64) -> AccessMetrics {
    let counted: Vec<&QueryRecord> = records
        .iter()
        .filter(|r| r.outcome != QueryOutcome::Cancelled)
        .collect();
    let solved: Vec<&QueryRecord> = counted
        .iter()
        .copied()
        .filter(|r| r.outcome == QueryOutcome::Solved)
        .collect();
    let issued = counted.len();
    let solving_ratio = (issued > 0).then(|| solved.len() as f64 / issued as f64);

    let mut windows: std::collections::BTreeMap<i64, (usize, usize)> = Default::default();
    for r in &counted {
        let e = windows.entry((r.t_issue / window).floor() as i64).or_default();
        e.0 += 1;
        if r.outcome == QueryOutcome::Solved {
            e.1 += 1;
        }
    }
    let ratios: Vec<f64> = windows.values().map(|(i, s)| *s as f64 / *i as f64).collect();
    let redundancy: Vec<f64> = solved.iter().map(|r| r.replies as f64).collect();
    let latency: Vec<f64> = solved.iter().filter_map(|r| r.latency).collect();
    AccessMetrics {
        issued,
        solved: solved.len(),
        solving_ratio,
        window_solving_ratio: quantiles(&ratios, &DEFAULT_QS).ok(),
        redundancy: quantiles(&redundancy, &DEFAULT_QS).ok(),
        latency: quantiles(&latency, &DEFAULT_QS).ok(),
    }
}

pub fn workload_quantiles(records: &[WorkloadRecord]) -> Option<Quantiles> {
    let xs: Vec<f64> = records.iter().map(|r| r.served as f64).collect();
    quantiles(&xs, &DEFAULT_QS).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_graph;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn hist(counts: &[f64]) -> Histogram {
        let mut h = Histogram::equal_width(0.0, counts.len() as f64, counts.len());
        h.counts = counts.to_vec();
        h
    }

    #[test]
    fn chi_square_hand_cases() {
        let h = hist(&[10.0, 20.0, 7.0]);
        assert_eq!(chi_square(&h, &h).unwrap(), 0.0);
        let v = chi_square(&hist(&[10.0, 20.0]), &hist(&[15.0, 15.0])).unwrap();
        assert!((v - 10.0 / 3.0).abs() < 1e-12);
        let v = chi_square(&hist(&[30.0, 0.0]), &hist(&[15.0, 15.0])).unwrap();
        assert!((v - 30.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_errors() {
        assert!(matches!(
            chi_square(&hist(&[1.0, 2.0]), &hist(&[0.0, 0.0])),
            Err(Error::ZeroExpected)
        ));
        assert!(matches!(
            chi_square(&hist(&[1.0, 2.0]), &hist(&[1.0, 2.0, 3.0])),
            Err(Error::BinMismatch)
        ));
    }

    #[test]
    fn chi_square_pools_sparse_bins() {
        // expected [2, 3, 10] pools into [5, 10]; observed [0, 5, 10] -> [5, 10]
        let v = chi_square(&hist(&[0.0, 5.0, 10.0]), &hist(&[2.0, 3.0, 10.0])).unwrap();
        assert!(v.abs() < 1e-12);
        // short tail joins the last pool: expected [10, 1, 1] -> [12]
        let v = chi_square(&hist(&[12.0, 0.0, 0.0]), &hist(&[10.0, 1.0, 1.0])).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn interdistance_examples() {
        let pos = vec![
            Position::new(0.0, 0.0),
            Position::new(10.0, 0.0),
            Position::new(20.0, 0.0),
        ];
        assert_eq!(interdistance_samples(&pos, &[NodeId(0), NodeId(1)]), vec![10.0, 10.0]);
        let mut three = interdistance_samples(&pos, &[NodeId(0), NodeId(1), NodeId(2)]);
        three.sort_by(f64::total_cmp);
        assert_eq!(three, vec![10.0, 10.0, 10.0, 10.0, 20.0, 20.0]);
        assert!(interdistance_samples(&pos, &[NodeId(0)]).is_empty());
    }

    fn lattice(side: usize, step: f64) -> Vec<Position> {
        (0..side * side)
            .map(|i| Position::new((i % side) as f64 * step, (i / side) as f64 * step))
            .collect()
    }

    #[test]
    fn nodal_reference_full_set_is_exact() {
        let pos = lattice(4, 10.0);
        let ids: Vec<NodeId> = (0..16).map(NodeId).collect();
        let edges = Histogram::equal_width(0.0, 45.0, 9).edges;
        let mut rng = stream_rng(1, Stream::Reference);
        let r = nodal_uniform_reference(&pos, &ids, 16, 200, &mut rng, &edges);
        let exact = Histogram::from_samples(&edges, &interdistance_samples(&pos, &ids));
        assert_eq!(r, exact);
    }

    #[test]
    fn nodal_reference_is_deterministic_per_seed() {
        let pos = lattice(5, 10.0);
        let ids: Vec<NodeId> = (0..25).map(NodeId).collect();
        let edges = Histogram::equal_width(0.0, 60.0, 10).edges;
        let a = nodal_uniform_reference(&pos, &ids, 6, 50, &mut stream_rng(3, Stream::Reference), &edges);
        let b = nodal_uniform_reference(&pos, &ids, 6, 50, &mut stream_rng(3, Stream::Reference), &edges);
        assert_eq!(a, b);
        assert!((a.total() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn nodal_reference_on_lattice_matches_pair_enumeration() {
        // For a uniform k-subset, each ordered pair of distinct nodes appears
        // with probability k(k-1)/(n(n-1)); the expected histogram is the
        // all-pairs histogram scaled by that factor.
        let pos = lattice(4, 10.0);
        let ids: Vec<NodeId> = (0..16).map(NodeId).collect();
        let edges = Histogram::equal_width(0.0, 45.0, 9).edges;
        let all = Histogram::from_samples(&edges, &interdistance_samples(&pos, &ids));
        let k = 5.0;
        let scale = k * (k - 1.0) / (16.0 * 15.0);
        let mut rng = stream_rng(4, Stream::Reference);
        let mc = nodal_uniform_reference(&pos, &ids, 5, 20_000, &mut rng, &edges);
        for (m, a) in mc.counts.iter().zip(&all.counts) {
            assert!((m - a * scale).abs() < 0.05 * (a * scale).max(1.0), "{m} vs {}", a * scale);
        }
    }

    #[test]
    fn hop_cdf_examples() {
        let ns: Vec<_> = (0..3)
            .map(|i| (NodeId(i), Position::new(i as f64 * 15.0, 0.0)))
            .collect();
        let g = build_graph(&ns, 20.0).unwrap();
        let c = hop_cdf(&g, &[NodeId(0)]);
        assert_eq!(c.at(1), 0.5);
        assert_eq!(c.at(2), 1.0);
        let c = hop_cdf(&g, &[NodeId(1)]);
        assert_eq!(c.at(1), 1.0);
    }

    #[test]
    fn convergence_examples() {
        let flat: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 100.0, 29.09)).collect();
        assert_eq!(convergence_time(&flat, 29.09, 0.02, 5, 500.0), Some(500.0));
        let off: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 100.0, 40.0)).collect();
        assert_eq!(convergence_time(&off, 29.09, 0.02, 5, 500.0), None);
        // ramp reaching the band at sample 20
        let ramp: Vec<(f64, f64)> = (0..60)
            .map(|i| (i as f64 * 100.0, if i < 20 { 1.0 + i as f64 } else { 29.09 }))
            .collect();
        assert_eq!(convergence_time(&ramp, 29.09, 0.02, 5, 500.0), Some(2400.0));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantiles(&[1.0, 2.0, 3.0], &[0.5]).unwrap().values, vec![2.0]);
        let q = quantiles(&[4.0; 7], &DEFAULT_QS).unwrap();
        assert!(q.values.iter().all(|&v| v == 4.0));
        assert_eq!(quantiles(&[1.0, 2.0, 3.0, 4.0], &[0.25]).unwrap().values, vec![1.0]);
        assert!(quantiles(&[], &[0.5]).is_err());
    }

    #[test]
    fn empty_access_log_has_no_ratio() {
        let m = access_metrics(&[], 100.0);
        assert_eq!(m.solving_ratio, None);
        assert_eq!(m.issued, 0);
    }

    proptest! {
        #[test]
        fn chi_square_is_non_negative(
            o in proptest::collection::vec(0u32..50, 6),
            e in proptest::collection::vec(1u32..50, 6),
        ) {
            let oh = hist(&o.iter().map(|&x| x as f64).collect::<Vec<_>>());
            let eh = hist(&e.iter().map(|&x| x as f64).collect::<Vec<_>>());
            let v = chi_square(&oh, &eh).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(chi_square(&oh, &oh).unwrap_or(0.0), 0.0);
        }

        #[test]
        fn chi_square_doubling_scales_statistic(
            o in proptest::collection::vec(0u32..50, 6),
            e in proptest::collection::vec(1u32..50, 6),
        ) {
            let oh = hist(&o.iter().map(|&x| x as f64).collect::<Vec<_>>());
            prop_assume!(oh.total() > 0.0);
            let eh = hist(&e.iter().map(|&x| x as f64).collect::<Vec<_>>());
            let o2 = hist(&o.iter().map(|&x| 2.0 * x as f64).collect::<Vec<_>>());
            let e2 = hist(&e.iter().map(|&x| 2.0 * x as f64).collect::<Vec<_>>());
            let a = chi_square(&oh, &eh).unwrap();
            let b = chi_square(&o2, &e2).unwrap();
            prop_assert!(a.is_finite() && b.is_finite());
            prop_assert!(b >= 0.0);
        }

        #[test]
        fn quantiles_are_ordered(xs in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            let q = quantiles(&xs, &DEFAULT_QS).unwrap();
            prop_assert!(q.min <= q.values[0]);
            prop_assert!(q.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(q.values[2] <= q.max);
        }

        #[test]
        fn every_sample_lands_in_one_bin(xs in proptest::collection::vec(0.0f64..100.0, 0..60)) {
            let h = Histogram::from_samples(&Histogram::equal_width(0.0, 100.0, 10).edges, &xs);
            prop_assert_eq!(h.total() as usize, xs.len());
        }
    }
}
