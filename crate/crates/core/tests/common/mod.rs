//! Brute-force reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Pcg64, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.random::<f64>()).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimal k=2 inertia over all 2^n assignments with both clusters
/// non-empty.
pub fn exhaustive_two_means(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    let mut best = f64::INFINITY;
    // Fixing point 0 in cluster 0 halves the search without losing optima.
    for mask in 0u32..(1 << (n - 1)) {
        let mask = mask << 1;
        if mask == 0 {
            continue;
        }
        let mut inertia = 0.0;
        for side in [0, 1] {
            let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1) as usize == side).collect();
            let mut mean = vec![0.0; dim];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= members.len() as f64;
            }
            inertia += members
                .iter()
                .map(|&i| sq_dist(&points[i * dim..(i + 1) * dim], &mean))
                .sum::<f64>();
        }
        best = best.min(inertia);
    }
    best
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exact optimal transport cost between two uniform clouds of equal size
/// with ground cost ½‖x − y‖², by enumerating all permutation couplings.
pub fn exact_assignment_cost(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    permutations(n)
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(i, &j)| 0.5 * sq_dist(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]))
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Index of the smallest value in each column, lowest row on ties.
pub fn column_argmin(values: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    (0..cols)
        .map(|j| {
            let mut best = 0;
            for i in 1..rows {
                if values[i * cols + j] < values[best * cols + j] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn relative_error(got: f64, exact: f64) -> f64 {
    if exact == 0.0 {
        got.abs()
    } else {
        (got - exact).abs() / exact.abs()
    }
}

/// Exact optimal transport cost between uniform clouds of any sizes with
/// ground cost ½‖x − y‖², as an integral min-cost flow: each of the `n`
/// sources supplies `m` units and each of the `m` sinks takes `n` units.
/// Successive shortest paths with Bellman-Ford on the residual graph.
pub fn exact_transport_cost(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let (n, m) = (a.len() / dim, b.len() / dim);
    let cost: Vec<f64> = (0..n * m)
        .map(|c| {
            let (i, j) = (c / m, c % m);
            0.5 * sq_dist(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim])
        })
        .collect();
    let mut flow = vec![0i64; n * m];
    let mut supply = vec![m as i64; n];
    let mut demand = vec![n as i64; m];
    // Nodes: sources 0..n, sinks n..n+m. Residual edges: i→j always
    // (uncapacitated), j→i when flow(i, j) > 0.
    loop {
        if supply.iter().all(|&s| s == 0) {
            break;
        }
        let nodes = n + m;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = 0.0;
            }
        }
        for _ in 0..nodes {
            let mut changed = false;
            for i in 0..n {
                for j in 0..m {
                    let c = cost[i * m + j];
                    if dist[i] + c < dist[n + j] - 1e-12 {
                        dist[n + j] = dist[i] + c;
                        prev[n + j] = i;
                        changed = true;
                    }
                    if flow[i * m + j] > 0 && dist[n + j] - c < dist[i] - 1e-12 {
                        dist[i] = dist[n + j] - c;
                        prev[i] = n + j;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..m)
            .filter(|&j| demand[j] > 0)
            .min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]))
            .unwrap();
        // Walk back to a source, collecting the bottleneck.
        let mut path = Vec::new();
        let mut v = n + sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            path.push((u, v));
            v = u;
            if v < n && supply[v] > 0 && prev[v] == usize::MAX {
                break;
            }
        }
        let source = v;
        let mut amount = supply[source].min(demand[sink]);
        for &(u, v) in &path {
            if u >= n {
                amount = amount.min(flow[v * m + (u - n)]);
            }
        }
        for &(u, v) in &path {
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                flow[v * m + (u - n)] -= amount;
            }
        }
        supply[source] -= amount;
        demand[sink] -= amount;
    }
    flow.iter().zip(&cost).map(|(&f, &c)| f as f64 * c).sum::<f64>() / (n * m) as f64
}
