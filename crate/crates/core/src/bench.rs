//! Synthetic datasets, their on-disk layout, and evaluation oracles: exact
//! discrete W2 through linear assignment, and grid-graph geodesic energies.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lagrangian::{MetricField, PotentialKind, PotentialSpec};
use crate::measure::EmpiricalMeasure;

pub const SETTINGS: [&str; 10] =
    ["box", "slit", "hill", "well", "gmm", "circle", "mass_splitting", "x_paths", "translation", "identity"];
pub const METRIC_SETTINGS: [&str; 3] = ["circle", "mass_splitting", "x_paths"];

pub const CIRCLE_MEASURES: usize = 24;
pub const SNAPSHOTS: usize = 10;

pub fn default_samples(name: &str) -> usize {
    if METRIC_SETTINGS.contains(&name) {
        100
    } else {
        1024
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub n: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(name: &str, n: usize, seed: u64) -> Self {
        Self { name: name.to_string(), n, seed }
    }
}

/// Seed for an independent evaluation draw of the same dataset.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn gaussian<R: Rng>(rng: &mut R, mean: [f64; 2], std: f64) -> [f64; 2] {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    [mean[0] + std * a, mean[1] + std * b]
}

/// Gaussian draws that avoid the hard obstacles of `obstacle`.
fn clear_gaussian<R: Rng>(rng: &mut R, mean: [f64; 2], std: f64, obstacle: Option<&PotentialSpec>) -> [f64; 2] {
    loop {
        let p = gaussian(rng, mean, std);
        if obstacle.is_none_or(|o| !o.in_obstacle(&p)) {
            return p;
        }
    }
}

fn measure(points: Vec<[f64; 2]>, index: usize) -> Result<EmpiricalMeasure> {
    Ok(EmpiricalMeasure::new(2, points.concat())?.with_index(index))
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<EmpiricalMeasure>> {
    if spec.n == 0 {
        return Err(Error::InvalidArgument("a dataset needs at least one sample per measure".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    match spec.name.as_str() {
        "box" | "slit" | "hill" | "well" => {
            let kind = PotentialKind::parse(&spec.name).expect("listed above");
            let obstacle = PotentialSpec::new(kind);
            let mu = (0..n).map(|_| clear_gaussian(&mut rng, [-1.5, 0.0], 0.2, Some(&obstacle))).collect();
            let nu = (0..n).map(|_| clear_gaussian(&mut rng, [1.5, 0.0], 0.2, Some(&obstacle))).collect();
            Ok(vec![measure(mu, 0)?, measure(nu, 1)?])
        }
        "gmm" => {
            let obstacle = PotentialSpec::new(PotentialKind::Gmm);
            let mu = (0..n).map(|_| clear_gaussian(&mut rng, [0.0, 0.0], 0.5, Some(&obstacle))).collect();
            let nu = (0..n)
                .map(|_| {
                    let angle = 2.0 * PI * rng.gen_range(0..8) as f64 / 8.0;
                    clear_gaussian(&mut rng, [12.0 * angle.cos(), 12.0 * angle.sin()], 0.5, Some(&obstacle))
                })
                .collect();
            Ok(vec![measure(mu, 0)?, measure(nu, 1)?])
        }
        "translation" => {
            let mu = (0..n).map(|_| gaussian(&mut rng, [0.0, 0.0], 0.1)).collect();
            let nu = (0..n).map(|_| gaussian(&mut rng, [2.0, 0.0], 0.1)).collect();
            Ok(vec![measure(mu, 0)?, measure(nu, 1)?])
        }
        "identity" => {
            let mu = (0..n).map(|_| gaussian(&mut rng, [0.0, 0.0], 0.2)).collect();
            let nu = (0..n).map(|_| gaussian(&mut rng, [0.0, 0.0], 0.2)).collect();
            Ok(vec![measure(mu, 0)?, measure(nu, 1)?])
        }
        "circle" => (0..CIRCLE_MEASURES)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / CIRCLE_MEASURES as f64;
                measure((0..n).map(|_| gaussian(&mut rng, [a.cos(), a.sin()], 0.1)).collect(), i)
            })
            .collect(),
        "mass_splitting" => {
            let starts: Vec<[f64; 2]> = (0..n).map(|_| gaussian(&mut rng, [0.0, 0.0], 1.0)).collect();
            (0..SNAPSHOTS)
                .map(|i| {
                    let t = i as f64 / (SNAPSHOTS - 1) as f64;
                    let pts = starts
                        .iter()
                        .map(|p| {
                            let dir = if p[1] >= 0.0 { 10.0 } else { -10.0 };
                            [p[0] + 10.0 * t, p[1] + dir * t]
                        })
                        .collect();
                    measure(pts, i)
                })
                .collect()
        }
        "x_paths" => {
            let first = n.div_ceil(2);
            let starts: Vec<([f64; 2], [f64; 2])> = (0..n)
                .map(|k| {
                    if k < first {
                        (gaussian(&mut rng, [-1.0, -1.0], 0.1), [2.0, 2.0])
                    } else {
                        (gaussian(&mut rng, [-1.0, 1.0], 0.1), [2.0, -2.0])
                    }
                })
                .collect();
            (0..SNAPSHOTS)
                .map(|i| {
                    let t = i as f64 / (SNAPSHOTS - 1) as f64;
                    let pts = starts.iter().map(|(p, v)| [p[0] + t * v[0], p[1] + t * v[1]]).collect();
                    measure(pts, i)
                })
                .collect()
        }
        other => Err(Error::UnknownDataset(format!("`{other}`; valid settings: {}", SETTINGS.join(", ")))),
    }
}

/// Ground-truth metric of a metric-learning dataset.
pub fn ground_truth_metric(name: &str) -> Option<MetricField> {
    match name {
        "circle" => Some(MetricField::Circle { eps: 0.1 }),
        "mass_splitting" => Some(MetricField::MassSplitting { delta: 0.1 }),
        "x_paths" => Some(MetricField::XPaths { delta: 0.1 }),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub k: usize,
    pub d: usize,
}

pub fn measure_file(i: usize) -> String {
    format!("rho_{i}.csv")
}

pub fn write_measure_csv(path: &Path, m: &EmpiricalMeasure) -> Result<()> {
    let header: Vec<String> = (1..=m.dim()).map(|c| format!("x{c}")).collect();
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..m.len() {
        let row: Vec<String> = m.point(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_measure_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let dim = lines.next().map_or(0, |h| h.split(',').count());
    let mut points = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("{}: row {}: {e}", path.display(), row + 1)))?;
        if values.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "{}: row {} has {} values, expected {dim}",
                path.display(),
                row + 1,
                values.len()
            )));
        }
        points.extend(values);
    }
    EmpiricalMeasure::new(dim, points)
}

pub fn write_dataset(dir: &Path, spec: &DatasetSpec, measures: &[EmpiricalMeasure]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    for (i, m) in measures.iter().enumerate() {
        write_measure_csv(&dir.join(measure_file(i)), m)?;
    }
    let manifest = Manifest {
        name: spec.name.clone(),
        n: spec.n,
        seed: spec.seed,
        k: measures.len(),
        d: measures.first().map_or(0, EmpiricalMeasure::dim),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<EmpiricalMeasure>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let measures = (0..manifest.k)
        .map(|i| Ok(read_measure_csv(&dir.join(measure_file(i)))?.with_index(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, measures))
}

/// Minimum-cost perfect matching on a square cost matrix (row-major),
/// returning the column assigned to each row. Shortest augmenting paths with
/// dual potentials, as in Jonker–Volgenant.
pub fn linear_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::Dimension { expected: n * n, got: cost.len() });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

fn squared_distances(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Vec<f64> {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    cost
}

/// W2 of a given matching, summing row by row.
pub fn matching_w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure, matching: &[usize]) -> f64 {
    let n = a.len();
    let total: f64 = (0..n)
        .map(|i| a.point(i).iter().zip(b.point(matching[i])).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    (total / n as f64).sqrt()
}

/// Exact 2-Wasserstein distance between equal-size empirical measures.
pub fn w2_marginal_error(pushed: &EmpiricalMeasure, target: &EmpiricalMeasure) -> Result<f64> {
    if pushed.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "W2 needs equal sample counts, got {} and {}",
            pushed.len(),
            target.len()
        )));
    }
    if pushed.dim() != target.dim() {
        return Err(Error::Dimension { expected: pushed.dim(), got: target.dim() });
    }
    let n = pushed.len();
    let matching = linear_assignment(&squared_distances(pushed, target), n)?;
    Ok(matching_w2(pushed, target, &matching))
}

/// Uniform square grid graph for shortest-path geodesic oracles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridOracle {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub size: usize,
    /// Edges join nodes whose index offsets are coprime and at most this.
    pub stencil_radius: i64,
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl GridOracle {
    fn node_of(&self, p: &[f64]) -> Result<usize> {
        let mut idx = [0usize; 2];
        for c in 0..2 {
            let f = (p[c] - self.origin[c]) / self.spacing;
            let r = f.round();
            if (f - r).abs() > 1e-6 || r < 0.0 || r as usize >= self.size {
                return Err(Error::InvalidArgument(format!("point {p:?} is not a grid node")));
            }
            idx[c] = r as usize;
        }
        Ok(idx[0] * self.size + idx[1])
    }

    /// Length of the shortest grid path from `from` to `to`, each edge
    /// weighted by √(Δᵀ A(midpoint) Δ). Edges whose midpoint metric is
    /// undefined are dropped. The minimal energy of a path on [0, 1] is half
    /// the squared length.
    pub fn shortest_length(&self, metric: &MetricField, from: &[f64], to: &[f64]) -> Result<f64> {
        let (src, dst) = (self.node_of(from)?, self.node_of(to)?);
        let r = self.stencil_radius;
        let mut stencil = Vec::new();
        for a in -r..=r {
            for b in -r..=r {
                if (a, b) != (0, 0) && gcd(a, b) == 1 {
                    stencil.push((a, b));
                }
            }
        }
        let size = self.size as i64;
        let mut dist = vec![f64::INFINITY; self.size * self.size];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(Frontier(0.0, src));
        while let Some(Frontier(d, node)) = heap.pop() {
            if node == dst {
                return Ok(d);
            }
            if d > dist[node] {
                continue;
            }
            let (i, j) = ((node / self.size) as i64, (node % self.size) as i64);
            for &(a, b) in &stencil {
                let (ni, nj) = (i + a, j + b);
                if ni < 0 || nj < 0 || ni >= size || nj >= size {
                    continue;
                }
                let delta = [a as f64 * self.spacing, b as f64 * self.spacing];
                let mid = [
                    self.origin[0] + (i as f64 + 0.5 * a as f64) * self.spacing,
                    self.origin[1] + (j as f64 + 0.5 * b as f64) * self.spacing,
                ];
                let Ok(m) = metric.value(&mid) else { continue };
                let w = (2.0 * m.half_quadratic(&delta)).max(0.0).sqrt();
                let next = (ni * size + nj) as usize;
                if d + w < dist[next] {
                    dist[next] = d + w;
                    heap.push(Frontier(d + w, next));
                }
            }
        }
        Err(Error::InvalidArgument("target is unreachable on the grid".into()))
    }
}
