//! Spatio-temporal graphs: regions, their adjacency and per-region flow series.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::store::Container;
use crate::{Error, Result};

pub const DEFAULT_HISTORY: usize = 12;
pub const DEFAULT_HORIZON: usize = 6;

/// Regions (nodes), symmetric binary adjacency and a `nodes x timesteps`
/// series matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalGraph {
    node_ids: Vec<String>,
    adjacency: Array2<bool>,
    series: Array2<f64>,
    interval_minutes: u32,
}

impl SpatioTemporalGraph {
    pub fn new(
        node_ids: Vec<String>,
        adjacency: Array2<bool>,
        series: Array2<f64>,
        interval_minutes: u32,
    ) -> Result<Self> {
        let n = node_ids.len();
        if n < 2 {
            return Err(Error::Invariant(format!("graph needs at least 2 nodes, got {n}")));
        }
        if adjacency.dim() != (n, n) {
            return Err(Error::shape("adjacency", format!("({n}, {n})"), format!("{:?}", adjacency.dim())));
        }
        if series.nrows() != n {
            return Err(Error::shape("series rows", n, series.nrows()));
        }
        let min_t = DEFAULT_HISTORY + DEFAULT_HORIZON;
        if series.ncols() < min_t {
            return Err(Error::Invariant(format!(
                "series has {} timesteps, need at least {min_t}",
                series.ncols()
            )));
        }
        if interval_minutes == 0 {
            return Err(Error::Invariant("interval_minutes must be positive".into()));
        }
        for i in 0..n {
            if adjacency[[i, i]] {
                return Err(Error::Invariant(format!("adjacency has a self loop at node {i}")));
            }
            for j in (i + 1)..n {
                if adjacency[[i, j]] != adjacency[[j, i]] {
                    return Err(Error::Invariant(format!(
                        "adjacency is asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if let Some(pos) = series.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "series has a non-finite value at flat index {pos}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &node_ids {
            if !seen.insert(id) {
                return Err(Error::Invariant(format!("duplicate node id `{id}`")));
            }
        }
        Ok(Self {
            node_ids,
            adjacency,
            series,
            interval_minutes,
        })
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn timesteps(&self) -> usize {
        self.series.ncols()
    }

    pub fn adjacency(&self) -> &Array2<bool> {
        &self.adjacency
    }

    pub fn series(&self) -> &Array2<f64> {
        &self.series
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes.max(1)) as usize
    }

    pub fn index_of(&self, region: &str) -> Result<usize> {
        self.node_ids
            .iter()
            .position(|id| id == region)
            .ok_or_else(|| Error::UnknownRegion(region.to_string()))
    }

    pub fn region_series(&self, region: &str) -> Result<Vec<f64>> {
        let i = self.index_of(region)?;
        Ok(self.series.row(i).to_vec())
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.node_count()).filter(|&j| self.adjacency[[i, j]]).collect()
    }

    /// Mean of the 1-hop neighbour series of node `i`; the node's own series
    /// if it is isolated.
    pub fn neighbor_mean_series(&self, i: usize) -> Vec<f64> {
        let nb = self.neighbors(i);
        if nb.is_empty() {
            return self.series.row(i).to_vec();
        }
        let mut out = vec![0.0; self.timesteps()];
        for j in &nb {
            for (o, v) in out.iter_mut().zip(self.series.row(*j)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= nb.len() as f64);
        out
    }

    /// Breadth-first hop distances from `source`; `None` when unreachable.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Copy of the graph restricted to the timestep span.
    pub fn restrict(&self, span: TimeSpan) -> Result<Self> {
        if span.end > self.timesteps() || span.start >= span.end {
            return Err(Error::Invariant(format!("span {span:?} outside series")));
        }
        let series = self.series.slice(ndarray::s![.., span.start..span.end]).to_owned();
        Self::new(self.node_ids.clone(), self.adjacency.clone(), series, self.interval_minutes)
    }
}

/// Half-open timestep interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: usize,
    pub end: usize,
}

impl TimeSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub region_id: String,
    /// Absolute timestep of the first target value.
    pub target_start: usize,
    pub history: Vec<f64>,
    pub target: Vec<f64>,
}

/// Stride-1 sliding windows of `history` then `horizon` values inside `span`.
pub fn window_dataset(
    g: &SpatioTemporalGraph,
    region: &str,
    history: usize,
    horizon: usize,
    span: TimeSpan,
) -> Result<Vec<WindowedSample>> {
    let i = g.index_of(region)?;
    if history == 0 || horizon == 0 {
        return Err(Error::Config("history and horizon must be at least 1".into()));
    }
    if span.end > g.timesteps() {
        return Err(Error::Config(format!(
            "span end {} beyond series length {}",
            span.end,
            g.timesteps()
        )));
    }
    let row = g.series().row(i);
    let samples = window_bounds(span, history, horizon)
        .map(|t0| WindowedSample {
            region_id: region.to_string(),
            target_start: t0 + history,
            history: row.slice(ndarray::s![t0..t0 + history]).to_vec(),
            target: row.slice(ndarray::s![t0 + history..t0 + history + horizon]).to_vec(),
        })
        .collect::<Vec<_>>();
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "span of {} steps holds no {history}+{horizon} window",
            span.len()
        )));
    }
    Ok(samples)
}

/// Window start offsets inside `span`.
pub fn window_bounds(span: TimeSpan, history: usize, horizon: usize) -> std::ops::Range<usize> {
    let w = history + horizon;
    if span.len() < w {
        return span.start..span.start;
    }
    span.start..span.end - w + 1
}

/// Splits the series into a leading few-shot span and the evaluation remainder.
pub fn split_few_shot(g: &SpatioTemporalGraph, few_shot_days: usize) -> Result<(TimeSpan, TimeSpan)> {
    if few_shot_days == 0 {
        return Err(Error::Config("few_shot_days must be at least 1".into()));
    }
    let cut = few_shot_days * g.steps_per_day();
    if cut >= g.timesteps() {
        return Err(Error::Config(format!(
            "{few_shot_days} few-shot days ({cut} steps) leave no evaluation span in {} steps",
            g.timesteps()
        )));
    }
    Ok((TimeSpan::new(0, cut), TimeSpan::new(cut, g.timesteps())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCitySpec {
    pub region_count: usize,
    pub pattern_count: usize,
    pub noise_sigma: f64,
    pub edge_probability: f64,
    /// Pattern period in timesteps.
    pub period: usize,
    pub total_timesteps: usize,
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    /// Target city size; defaults to `region_count`.
    #[serde(default)]
    pub target_region_count: Option<usize>,
}

fn default_interval() -> u32 {
    60
}

impl Default for SyntheticCitySpec {
    fn default() -> Self {
        Self {
            region_count: 200,
            pattern_count: 3,
            noise_sigma: 0.05,
            edge_probability: 0.05,
            period: 24,
            total_timesteps: 24 * 14,
            seed: 7,
            interval_minutes: 60,
            target_region_count: None,
        }
    }
}

impl SyntheticCitySpec {
    pub fn target_regions(&self) -> usize {
        self.target_region_count.unwrap_or(self.region_count)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.pattern_count == 0 {
            return bad("pattern_count must be positive");
        }
        if self.region_count < 2 || self.target_regions() < 2 {
            return bad("region_count must be at least 2");
        }
        if self.pattern_count > self.region_count.min(self.target_regions()) {
            return bad("pattern_count exceeds a city's region count");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.edge_probability) {
            return bad("edge_probability must lie in [0, 1]");
        }
        if self.period == 0 {
            return bad("period must be positive");
        }
        if self.total_timesteps < DEFAULT_HISTORY + DEFAULT_HORIZON {
            return bad("total_timesteps shorter than one history+horizon window");
        }
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 {
            return bad("interval_minutes must divide a day");
        }
        Ok(())
    }
}

/// Two-harmonic periodic shapes shared by every synthetic city of one spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternLibrary {
    pub period: usize,
    /// `(a, phi, b, psi)` per pattern.
    pub coefficients: Vec<(f64, f64, f64, f64)>,
}

impl PatternLibrary {
    pub fn from_spec(spec: &SyntheticCitySpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let coefficients = (0..spec.pattern_count)
            .map(|_| {
                (
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self {
            period: spec.period,
            coefficients,
        }
    }

    pub fn value(&self, pattern: usize, t: usize) -> f64 {
        let (a, phi, b, psi) = self.coefficients[pattern];
        let w = 2.0 * PI * t as f64 / self.period as f64;
        a * (w + phi).sin() + b * (2.0 * w + psi).sin()
    }
}

/// Region id to pattern index, covering every generated city.
pub type PatternAssignment = BTreeMap<String, usize>;

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: SpatioTemporalGraph,
    pub target: SpatioTemporalGraph,
    pub pattern_assignment: PatternAssignment,
}

/// Source and target city drawn from one pattern library.
pub fn generate_synthetic_pair(spec: &SyntheticCitySpec) -> Result<SyntheticPair> {
    let (mut cities, pattern_assignment) = generate_synthetic_cities(spec, 1)?;
    let target = cities.pop().unwrap();
    let source = cities.pop().unwrap();
    Ok(SyntheticPair {
        source,
        target,
        pattern_assignment,
    })
}

/// `source_count` source cities followed by one target city. The target and
/// the first source are the same as those of [`generate_synthetic_pair`] for
/// the same spec, whatever the count.
pub fn generate_synthetic_cities(
    spec: &SyntheticCitySpec,
    source_count: usize,
) -> Result<(Vec<SpatioTemporalGraph>, PatternAssignment)> {
    spec.validate()?;
    if source_count == 0 {
        return Err(Error::Config("need at least one source city".into()));
    }
    let library = PatternLibrary::from_spec(spec);
    let mut assignment = PatternAssignment::new();
    let mut cities = Vec::with_capacity(source_count + 1);
    for s in 0..source_count {
        let label = if s == 0 { "src".to_string() } else { format!("src{}", s + 1) };
        // stream 2 is reserved for the target
        let stream = if s == 0 { 1 } else { s as u64 + 2 };
        cities.push(generate_city(spec, &library, &label, stream, spec.region_count, &mut assignment)?);
    }
    cities.push(generate_city(spec, &library, "tgt", 2, spec.target_regions(), &mut assignment)?);
    Ok((cities, assignment))
}

fn generate_city(
    spec: &SyntheticCitySpec,
    library: &PatternLibrary,
    label: &str,
    stream: u64,
    n: usize,
    assignment: &mut PatternAssignment,
) -> Result<SpatioTemporalGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    let mut patterns: Vec<usize> = (0..n).map(|i| i % spec.pattern_count).collect();
    patterns.shuffle(&mut rng);

    let mut adjacency = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(spec.edge_probability) {
                adjacency[[i, j]] = true;
                adjacency[[j, i]] = true;
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let mut series = Array2::zeros((n, spec.total_timesteps));
    for (i, &p) in patterns.iter().enumerate() {
        for t in 0..spec.total_timesteps {
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            series[[i, t]] = library.value(p, t) + eps;
        }
    }

    let node_ids: Vec<String> = (0..n).map(|i| format!("{label}-{i:04}")).collect();
    for (id, p) in node_ids.iter().zip(&patterns) {
        assignment.insert(id.clone(), *p);
    }
    SpatioTemporalGraph::new(node_ids, adjacency, series, spec.interval_minutes)
}

#[derive(Serialize, Deserialize)]
struct CityHeader {
    node_ids: Vec<String>,
    interval_minutes: u32,
    shape: [usize; 2],
    edges: Vec<[usize; 2]>,
}

pub fn save_graph(g: &SpatioTemporalGraph, path: impl AsRef<Path>) -> Result<()> {
    graph_to_container(g)?.save(path)
}

pub fn graph_to_container(g: &SpatioTemporalGraph) -> Result<Container> {
    let n = g.node_count();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if g.adjacency[[i, j]] {
                edges.push([i, j]);
            }
        }
    }
    let header = CityHeader {
        node_ids: g.node_ids.clone(),
        interval_minutes: g.interval_minutes,
        shape: [n, g.timesteps()],
        edges,
    };
    let series = g.series.iter().copied().collect();
    Ok(Container::new("city", &header)?.with_block("series", series))
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<SpatioTemporalGraph> {
    graph_from_container(&Container::load(path)?)
}

pub fn graph_from_container(c: &Container) -> Result<SpatioTemporalGraph> {
    c.expect_kind("city")?;
    let meta: CityHeader = c.meta()?;
    let [n, t] = meta.shape;
    if meta.node_ids.len() != n {
        return Err(Error::parse("node_ids", format!("{} ids for {n} nodes", meta.node_ids.len())));
    }
    let data = c.block("series")?;
    let series = Array2::from_shape_vec((n, t), data.to_vec())
        .map_err(|e| Error::parse("series", e))?;
    // edges are stored as given so that a one-sided pair fails validation
    let mut adjacency = Array2::from_elem((n, n), false);
    for [i, j] in meta.edges {
        if i >= n || j >= n {
            return Err(Error::parse("edges", format!("edge ({i}, {j}) out of range")));
        }
        adjacency[[i, j]] = true;
    }
    SpatioTemporalGraph::new(meta.node_ids, symmetrize_upper(adjacency)?, series, meta.interval_minutes)
}

/// Edges are written as `i < j` pairs; anything else marks an asymmetric file.
fn symmetrize_upper(mut a: Array2<bool>) -> Result<Array2<bool>> {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            if a[[i, j]] && !a[[j, i]] {
                return Err(Error::Invariant(format!("adjacency is asymmetric at ({i}, {j})")));
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if a[[i, j]] {
                a[[j, i]] = true;
            }
        }
    }
    Ok(a)
}

/// Plain CSV import: header row of region ids, then one row per timestep.
/// Adjacency comes from an optional `edges` list of id pairs.
pub fn load_csv(
    path: impl AsRef<Path>,
    interval_minutes: u32,
    edges: &[(String, String)],
) -> Result<SpatioTemporalGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::parse("header", "empty csv"))?;
    let ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); ids.len()];
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ids.len() {
            return Err(Error::parse(
                format!("row {}", row + 1),
                format!("{} cells, expected {}", cells.len(), ids.len()),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|e| Error::parse(format!("row {} column `{}`", row + 1, ids[c]), e))?;
            columns[c].push(v);
        }
    }
    let n = ids.len();
    let t = columns.first().map_or(0, Vec::len);
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let series = Array2::from_shape_vec((n, t), flat).map_err(|e| Error::parse("series", e))?;
    let mut adjacency = Array2::from_elem((n, n), false);
    for (a, b) in edges {
        let i = ids.iter().position(|x| x == a).ok_or_else(|| Error::UnknownRegion(a.clone()))?;
        let j = ids.iter().position(|x| x == b).ok_or_else(|| Error::UnknownRegion(b.clone()))?;
        if i != j {
            adjacency[[i, j]] = true;
            adjacency[[j, i]] = true;
        }
    }
    SpatioTemporalGraph::new(ids, adjacency, series, interval_minutes)
}
