//! Wildfire scenario tree: generation from gridded fire perimeters by a
//! cellular automaton, sampling, nearest-state projection, and per-node
//! ambiguity parameters (beta, gamma).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridInstance;

pub const CELL_UNBURNED: u8 = 0;
pub const CELL_BURNING: u8 = 1;
pub const CELL_BURNED: u8 = 2;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty perimeter list")]
    NoPerimeters,
    #[error("horizon must be at least 1")]
    BadHorizon,
    #[error("perimeter {0} has {1} cells, expected {2}")]
    PerimeterShape(usize, usize, usize),
    #[error("stress multiplier must be >= 1, got {0}")]
    BadMultiplier(f64),
    #[error("tree carries no generation metadata; cannot regenerate")]
    NoGenerationMeta,
    #[error("tree is invalid:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
}

/// Wildfire state over the raster cells: 0 unburned, 1 burning, 2 burned.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FireState {
    pub cells: Vec<u8>,
}

impl FireState {
    pub fn unburned(n: usize) -> Self {
        FireState { cells: vec![CELL_UNBURNED; n] }
    }

    /// Elementwise 1-norm distance between two states.
    pub fn distance(&self, other: &FireState) -> u64 {
        self.cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| (*a as i64 - *b as i64).unsigned_abs())
            .sum()
    }

    /// Cell-state monotonicity 0 -> 1 -> 2 along a path.
    pub fn monotone_step(&self, next: &FireState) -> bool {
        self.cells.iter().zip(&next.cells).all(|(a, b)| b >= a)
    }
}

mod stringmap {
    //! JSON objects keyed by integers-as-strings.
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer, T: Serialize>(
        map: &BTreeMap<usize, T>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<String, &T> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        m.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(
        de: D,
    ) -> Result<BTreeMap<usize, T>, D::Error> {
        let m: BTreeMap<String, T> = BTreeMap::deserialize(de)?;
        m.into_iter()
            .map(|(k, v)| k.parse::<usize>().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChildEdge {
    pub id: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    /// Stage t in 1..=T; the root is at stage 1.
    pub stage: usize,
    /// Parent id; 0 for the root by convention.
    pub parent: usize,
    pub children: Vec<ChildEdge>,
    pub fire: FireState,
    /// Per failure-prone line: [beta_f (on flow magnitude), beta_o (on the
    /// over-nominal indicator)], both <= 0.
    #[serde(with = "stringmap", default)]
    pub beta: BTreeMap<usize, [f64; 2]>,
    /// Per failure-prone line: nominal survival bound gamma in [0, 1].
    #[serde(with = "stringmap", default)]
    pub gamma: BTreeMap<usize, f64>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn beta_f(&self, line: usize) -> f64 {
        self.beta.get(&line).map_or(0.0, |b| b[0])
    }

    pub fn beta_o(&self, line: usize) -> f64 {
        self.beta.get(&line).map_or(0.0, |b| b[1])
    }

    pub fn gamma_of(&self, line: usize) -> f64 {
        self.gamma.get(&line).copied().unwrap_or(1.0)
    }
}

/// Metadata sufficient to regenerate the tree (stress variants, resampling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub region: RegionConfig,
    pub perimeters: Vec<FireState>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub horizon: usize,
    #[serde(rename = "K")]
    pub k_budget: usize,
    /// Failure-prone line ids, in the order availability vectors use.
    pub failure_prone_lines: Vec<usize>,
    pub nodes: Vec<TreeNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_meta: Option<Box<GenerationMeta>>,
}

impl ScenarioTree {
    pub fn node(&self, id: usize) -> &TreeNode {
        self.nodes.iter().find(|n| n.id == id).expect("node id exists")
    }

    pub fn root(&self) -> &TreeNode {
        self.nodes.iter().find(|n| n.stage == 1).expect("tree has a root")
    }

    pub fn stage_nodes(&self, t: usize) -> Vec<&TreeNode> {
        self.nodes.iter().filter(|n| n.stage == t).collect()
    }

    pub fn n_prone(&self) -> usize {
        self.failure_prone_lines.len()
    }

    /// Index of a line id within the failure-prone ordering.
    pub fn prone_index(&self, line: usize) -> Option<usize> {
        self.failure_prone_lines.iter().position(|l| *l == line)
    }

    /// Probability of reaching this node from the root.
    pub fn path_probability(&self, id: usize) -> f64 {
        let mut prob = 1.0;
        let mut cur = self.node(id);
        while cur.parent != 0 {
            let parent = self.node(cur.parent);
            let edge = parent
                .children
                .iter()
                .find(|c| c.id == cur.id)
                .expect("child edge exists");
            prob *= edge.p;
            cur = parent;
        }
        prob
    }

    /// Nodes from the root to `id`, inclusive.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = self.node(id);
        while cur.parent != 0 {
            path.push(cur.parent);
            cur = self.node(cur.parent);
        }
        path.reverse();
        path
    }

    /// Samples a root-to-leaf path by the branching probabilities.
    pub fn sample_scenario<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut path = vec![self.root().id];
        let mut cur = self.root();
        while !cur.is_leaf() {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = cur.children.last().expect("non-leaf").id;
            for edge in &cur.children {
                acc += edge.p;
                if u < acc {
                    next = edge.id;
                    break;
                }
            }
            path.push(next);
            cur = self.node(next);
        }
        path
    }

    /// Closest stage-t node to an observed fire state in 1-norm; ties break
    /// to the smallest node id.
    pub fn project_state(&self, stage: usize, observed: &FireState) -> usize {
        let mut best: Option<(u64, usize)> = None;
        for n in self.nodes.iter().filter(|n| n.stage == stage) {
            let d = n.fire.distance(observed);
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && n.id < bid),
            };
            if better {
                best = Some((d, n.id));
            }
        }
        best.expect("stage has nodes").1
    }

    /// Structural invariants; empty list iff valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let roots = self.nodes.iter().filter(|n| n.stage == 1).count();
        if roots != 1 {
            out.push(format!("expected exactly one root at stage 1, found {roots}"));
        }
        if self.nodes.iter().any(|n| n.id == 0) {
            out.push("node id 0 is reserved for the root's parent".into());
        }
        let ids: std::collections::HashSet<usize> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            out.push("duplicate node ids".into());
        }
        for n in &self.nodes {
            if n.stage == 0 || n.stage > self.horizon {
                out.push(format!("node {}: stage {} outside 1..={}", n.id, n.stage, self.horizon));
            }
            if n.stage == 1 {
                if n.parent != 0 {
                    out.push(format!("root node {} must have parent 0", n.id));
                }
            } else {
                match self.nodes.iter().find(|p| p.id == n.parent) {
                    None => out.push(format!("node {}: parent {} missing", n.id, n.parent)),
                    Some(p) => {
                        if p.stage + 1 != n.stage {
                            out.push(format!(
                                "node {}: parent {} at stage {}, expected {}",
                                n.id,
                                p.id,
                                p.stage,
                                n.stage - 1
                            ));
                        }
                        if !p.children.iter().any(|c| c.id == n.id) {
                            out.push(format!("node {}: not registered as child of {}", n.id, p.id));
                        }
                        if !p.fire.monotone_step(&n.fire) {
                            out.push(format!("node {}: fire state regressed from parent", n.id));
                        }
                    }
                }
            }
            if n.is_leaf() {
                if n.stage != self.horizon {
                    out.push(format!("leaf node {} at stage {}, expected {}", n.id, n.stage, self.horizon));
                }
            } else {
                let sum: f64 = n.children.iter().map(|c| c.p).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    out.push(format!("node {}: child probabilities sum to {sum}", n.id));
                }
                if n.children.iter().any(|c| c.p <= 0.0) {
                    out.push(format!("node {}: non-positive branching probability", n.id));
                }
            }
            for (line, b) in &n.beta {
                if self.prone_index(*line).is_none() {
                    out.push(format!("node {}: beta for non-failure-prone line {line}", n.id));
                }
                if b[0] > 0.0 || b[1] > 0.0 {
                    out.push(format!("node {}: beta entries must be <= 0", n.id));
                }
            }
            for (line, g) in &n.gamma {
                if self.prone_index(*line).is_none() {
                    out.push(format!("node {}: gamma for non-failure-prone line {line}", n.id));
                }
                if !(0.0..=1.0).contains(g) {
                    out.push(format!("node {}: gamma {g} outside [0, 1]", n.id));
                }
            }
        }
        // total leaf probability
        let total: f64 = self
            .nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| self.path_probability(n.id))
            .sum();
        if roots == 1 && (total - 1.0).abs() > 1e-9 {
            out.push(format!("leaf path probabilities sum to {total}"));
        }
        out
    }
}

/// Raster and automaton configuration for tree generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub rows: usize,
    pub cols: usize,
    /// Cells crossed by each failure-prone line.
    #[serde(with = "stringmap")]
    pub line_cells: BTreeMap<usize, Vec<usize>>,
    /// Probability a burning cell ignites each unburned 4-neighbor per stage.
    pub spread_prob: f64,
    /// Stages a cell burns before becoming burned out.
    #[serde(default = "default_burn_stages")]
    pub burn_stages: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_max_branching")]
    pub max_branching: usize,
    /// Failure budget K written into the generated tree.
    #[serde(default = "default_k")]
    pub k_budget: usize,
    #[serde(default)]
    pub calibration: AmbiguityCalibration,
}

fn default_burn_stages() -> usize {
    2
}
fn default_replications() -> usize {
    100
}
fn default_max_branching() -> usize {
    4
}
fn default_k() -> usize {
    1
}

/// Coefficients for deriving per-node (beta, gamma) from fire overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguityCalibration {
    /// Survival-bound drop per unit overlap at full flow magnitude.
    pub beta_f: f64,
    /// Survival-bound drop per unit overlap under over-nominal operation.
    pub beta_o: f64,
    /// Nominal survival-bound drop per unit overlap.
    pub gamma_drop: f64,
    /// Flow normalization when line ratings are unknown, MW.
    pub flow_reference: f64,
}

impl Default for AmbiguityCalibration {
    fn default() -> Self {
        AmbiguityCalibration { beta_f: 0.2, beta_o: 0.05, gamma_drop: 0.1, flow_reference: 100.0 }
    }
}

/// Fraction of a line's cells currently burning.
pub fn fire_overlap(fire: &FireState, cells: &[usize]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let burning = cells.iter().filter(|c| fire.cells[**c] == CELL_BURNING).count();
    burning as f64 / cells.len() as f64
}

/// Default (beta_f, beta_o, gamma) for one line at one fire state. With an
/// instance at hand the flow coefficient is normalized by the line rating.
pub fn calibrate_line(
    fire: &FireState,
    cells: &[usize],
    cal: &AmbiguityCalibration,
    rating: Option<f64>,
) -> ([f64; 2], f64) {
    let overlap = fire_overlap(fire, cells);
    let f_ref = rating.unwrap_or(cal.flow_reference).max(1e-9);
    let beta = [-cal.beta_f * overlap / f_ref, -cal.beta_o * overlap];
    let gamma = 1.0 - cal.gamma_drop * overlap;
    (beta, gamma.clamp(0.0, 1.0))
}

struct Automaton<'a> {
    region: &'a RegionConfig,
    spread: f64,
}

impl Automaton<'_> {
    fn neighbors(&self, cell: usize) -> Vec<usize> {
        let (r, c) = (cell / self.region.cols, cell % self.region.cols);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(cell - self.region.cols);
        }
        if r + 1 < self.region.rows {
            out.push(cell + self.region.cols);
        }
        if c > 0 {
            out.push(cell - 1);
        }
        if c + 1 < self.region.cols {
            out.push(cell + 1);
        }
        out
    }

    /// One synchronous step constrained to the final burn scar `allowed`.
    fn step<R: Rng>(&self, fire: &FireState, ages: &mut Vec<usize>, allowed: &[bool], rng: &mut R) -> FireState {
        let mut next = fire.clone();
        // burning cells age out
        for (i, s) in fire.cells.iter().enumerate() {
            if *s == CELL_BURNING {
                ages[i] += 1;
                if ages[i] >= self.region.burn_stages {
                    next.cells[i] = CELL_BURNED;
                }
            }
        }
        // ignition into unburned neighbors inside the scar
        for (i, s) in fire.cells.iter().enumerate() {
            if *s != CELL_BURNING {
                continue;
            }
            for nb in self.neighbors(i) {
                if fire.cells[nb] == CELL_UNBURNED && allowed[nb] && rng.gen::<f64>() < self.spread {
                    next.cells[nb] = CELL_BURNING;
                }
            }
        }
        next
    }
}

/// Simulates one trajectory of `horizon` states toward the given perimeter.
fn simulate_trajectory<R: Rng>(
    region: &RegionConfig,
    perimeter: &FireState,
    horizon: usize,
    spread: f64,
    rng: &mut R,
) -> Vec<FireState> {
    let n = region.rows * region.cols;
    let allowed: Vec<bool> = perimeter.cells.iter().map(|s| *s != CELL_UNBURNED).collect();
    let automaton = Automaton { region, spread };
    let mut states = Vec::with_capacity(horizon);
    let mut fire = FireState::unburned(n);
    states.push(fire.clone());
    let mut ages = vec![0usize; n];
    // ignition enters at stage 2, at a deterministic anchor of the scar:
    // the smallest-index burnable cell keeps replications comparable
    let ignition = allowed.iter().position(|a| *a);
    for _ in 1..horizon {
        if states.len() == 1 {
            if let Some(cell) = ignition {
                fire.cells[cell] = CELL_BURNING;
            }
        } else {
            fire = automaton.step(&fire, &mut ages, &allowed, rng);
        }
        states.push(fire.clone());
    }
    states
}

/// Cells that matter for branching: cells crossed by failure-prone lines.
fn relevant_cells(region: &RegionConfig) -> Vec<usize> {
    let mut cells: Vec<usize> = region.line_cells.values().flatten().copied().collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}

struct BuildNode {
    fire_weights: BTreeMap<Vec<u8>, f64>,
    weight: f64,
    stage: usize,
    children: BTreeMap<Vec<u8>, usize>, // restricted key -> build index
    order: Vec<Vec<u8>>,                // child keys in first-encounter order
}

/// Generates a scenario tree from historical fire perimeters by simulating
/// the automaton toward each perimeter and merging equal trajectories.
/// Trajectories are distinguished only by the fire state on cells that
/// overlap failure-prone lines; identical restricted trajectories merge
/// with accumulated probability.
pub fn generate_tree<R: Rng>(
    region: &RegionConfig,
    perimeters: &[FireState],
    horizon: usize,
    rng: &mut R,
    grid: Option<&GridInstance>,
) -> Result<ScenarioTree, TreeError> {
    generate_tree_scaled(region, perimeters, horizon, rng, grid, 1.0)
}

fn generate_tree_scaled<R: Rng>(
    region: &RegionConfig,
    perimeters: &[FireState],
    horizon: usize,
    rng: &mut R,
    grid: Option<&GridInstance>,
    spread_multiplier: f64,
) -> Result<ScenarioTree, TreeError> {
    if perimeters.is_empty() {
        return Err(TreeError::NoPerimeters);
    }
    if horizon < 1 {
        return Err(TreeError::BadHorizon);
    }
    let n = region.rows * region.cols;
    for (i, p) in perimeters.iter().enumerate() {
        if p.cells.len() != n {
            return Err(TreeError::PerimeterShape(i, p.cells.len(), n));
        }
    }
    let spread = (region.spread_prob * spread_multiplier).min(1.0);
    let relevant = relevant_cells(region);
    let restrict = |f: &FireState| -> Vec<u8> { relevant.iter().map(|c| f.cells[*c]).collect() };

    let mut nodes: Vec<BuildNode> = vec![BuildNode {
        fire_weights: BTreeMap::new(),
        weight: 0.0,
        stage: 1,
        children: BTreeMap::new(),
        order: Vec::new(),
    }];
    let w0 = 1.0 / (perimeters.len() * region.replications) as f64;
    for perimeter in perimeters {
        for _ in 0..region.replications {
            let traj = simulate_trajectory(region, perimeter, horizon, spread, rng);
            let mut at = 0usize;
            for (t, fire) in traj.iter().enumerate() {
                if t > 0 {
                    let key = restrict(fire);
                    let next = match nodes[at].children.get(&key) {
                        Some(idx) => *idx,
                        None => {
                            nodes.push(BuildNode {
                                fire_weights: BTreeMap::new(),
                                weight: 0.0,
                                stage: t + 1,
                                children: BTreeMap::new(),
                                order: Vec::new(),
                            });
                            let idx = nodes.len() - 1;
                            nodes[at].children.insert(key.clone(), idx);
                            nodes[at].order.push(key);
                            idx
                        }
                    };
                    at = next;
                }
                nodes[at].weight += w0;
                *nodes[at].fire_weights.entry(fire.cells.clone()).or_insert(0.0) += w0;
            }
        }
    }

    // prune to the branching cap, keeping the heaviest children
    // (first-encounter order breaks ties), then renormalize by the kept mass
    let mut kept_children: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for i in 0..nodes.len() {
        let mut kids: Vec<usize> = nodes[i].order.iter().map(|k| nodes[i].children[k]).collect();
        kids.sort_by(|a, b| {
            nodes[*b]
                .weight
                .partial_cmp(&nodes[*a].weight)
                .unwrap()
                .then(a.cmp(b))
        });
        kids.truncate(region.max_branching);
        kids.sort_unstable(); // stable first-encounter order among the kept
        kept_children[i] = kids;
    }

    // assign final ids in BFS order over the kept subtree
    let mut id_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut bfs = std::collections::VecDeque::from([0usize]);
    let mut next_id = 1;
    let mut reachable = Vec::new();
    while let Some(i) = bfs.pop_front() {
        id_of.insert(i, next_id);
        next_id += 1;
        reachable.push(i);
        for k in &kept_children[i] {
            bfs.push_back(*k);
        }
    }

    let mut out_nodes = Vec::with_capacity(reachable.len());
    for i in reachable {
        let b = &nodes[i];
        let kept_mass: f64 = kept_children[i].iter().map(|k| nodes[*k].weight).sum();
        let children: Vec<ChildEdge> = kept_children[i]
            .iter()
            .map(|k| ChildEdge { id: id_of[k], p: nodes[*k].weight / kept_mass })
            .collect();
        // representative full fire state: heaviest variant, ties to the
        // lexicographically smallest
        let fire_cells = b
            .fire_weights
            .iter()
            .max_by(|(ka, wa), (kb, wb)| {
                wa.partial_cmp(wb).unwrap().then_with(|| kb.cmp(ka))
            })
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| vec![CELL_UNBURNED; n]);
        let fire = FireState { cells: fire_cells };
        let mut beta = BTreeMap::new();
        let mut gamma = BTreeMap::new();
        for (line, cells) in &region.line_cells {
            let rating = grid
                .and_then(|g| g.line(*line))
                .map(|l| l.f_min.abs().max(l.f_max));
            let (b, g) = calibrate_line(&fire, cells, &region.calibration, rating);
            beta.insert(*line, b);
            gamma.insert(*line, g);
        }
        let parent = if i == 0 {
            0
        } else {
            // parent index is whichever node listed i as a kept child
            let pi = nodes
                .iter()
                .enumerate()
                .position(|(pj, _)| kept_children[pj].contains(&i))
                .expect("kept child has parent");
            id_of[&pi]
        };
        out_nodes.push(TreeNode {
            id: id_of[&i],
            stage: b.stage,
            parent,
            children,
            fire,
            beta,
            gamma,
        });
    }
    out_nodes.sort_by_key(|n| n.id);

    let tree = ScenarioTree {
        horizon,
        k_budget: region.k_budget,
        failure_prone_lines: region.line_cells.keys().copied().collect(),
        nodes: out_nodes,
        gen_meta: None,
    };
    let problems = tree.validate();
    if !problems.is_empty() {
        return Err(TreeError::Invalid(problems));
    }
    Ok(tree)
}

/// Generates with metadata recorded so stress variants can be derived.
pub fn generate_tree_with_meta(
    region: &RegionConfig,
    perimeters: &[FireState],
    horizon: usize,
    seed: u64,
    grid: Option<&GridInstance>,
) -> Result<ScenarioTree, TreeError> {
    let mut rng = crate::rng::substream(seed, "tree-gen", &[]);
    let mut tree = generate_tree(region, perimeters, horizon, &mut rng, grid)?;
    tree.gen_meta = Some(Box::new(GenerationMeta {
        region: region.clone(),
        perimeters: perimeters.to_vec(),
        seed,
    }));
    Ok(tree)
}

/// Regenerates the tree with the automaton spread probability scaled up,
/// modeling more hazardous fire propagation. Requires generation metadata.
pub fn make_stress_tree(
    tree: &ScenarioTree,
    spread_multiplier: f64,
    grid: Option<&GridInstance>,
) -> Result<ScenarioTree, TreeError> {
    if spread_multiplier < 1.0 {
        return Err(TreeError::BadMultiplier(spread_multiplier));
    }
    let meta = tree.gen_meta.as_deref().ok_or(TreeError::NoGenerationMeta)?;
    let mut rng = crate::rng::substream(meta.seed, "tree-gen", &[]);
    let mut out = generate_tree_scaled(
        &meta.region,
        &meta.perimeters,
        tree.horizon,
        &mut rng,
        grid,
        spread_multiplier,
    )?;
    out.gen_meta = Some(Box::new(GenerationMeta {
        region: meta.region.clone(),
        perimeters: meta.perimeters.clone(),
        seed: meta.seed,
    }));
    Ok(out)
}

pub fn load_tree(path: &Path) -> Result<ScenarioTree, TreeError> {
    let text = std::fs::read_to_string(path).map_err(|source| TreeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let tree: ScenarioTree = serde_json::from_str(&text).map_err(|source| TreeError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    let problems = tree.validate();
    if !problems.is_empty() {
        return Err(TreeError::Invalid(problems));
    }
    Ok(tree)
}

pub fn save_tree(tree: &ScenarioTree, path: &Path) -> Result<(), TreeError> {
    let text = serde_json::to_string_pretty(tree).expect("tree serializes");
    std::fs::write(path, text).map_err(|source| TreeError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Probability-weighted burned/burning cell count at the final stage.
pub fn expected_final_burned(tree: &ScenarioTree) -> f64 {
    tree.nodes
        .iter()
        .filter(|n| n.is_leaf())
        .map(|n| {
            let burned = n.fire.cells.iter().filter(|c| **c != CELL_UNBURNED).count();
            tree.path_probability(n.id) * burned as f64
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn region_3x3() -> RegionConfig {
        RegionConfig {
            rows: 3,
            cols: 3,
            line_cells: BTreeMap::from([(0, vec![0, 1]), (1, vec![4])]),
            spread_prob: 0.5,
            burn_stages: 2,
            replications: 40,
            max_branching: 4,
            k_budget: 1,
            calibration: Default::default(),
        }
    }

    fn full_perimeter() -> FireState {
        FireState { cells: vec![CELL_BURNED; 9] }
    }

    #[test]
    fn zero_spread_gives_chain_tree() {
        let mut region = region_3x3();
        region.spread_prob = 0.0;
        let mut rng = substream(1, "tree-gen", &[]);
        let tree = generate_tree(&region, &[full_perimeter()], 3, &mut rng, None).unwrap();
        for t in 1..=3 {
            assert_eq!(tree.stage_nodes(t).len(), 1, "stage {t}");
        }
        for n in &tree.nodes {
            for c in &n.children {
                assert!((c.p - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_trajectories_merge_to_probability_one() {
        // two identical perimeters with zero spread produce identical
        // trajectories; the merged tree is a single chain of probability 1
        let mut region = region_3x3();
        region.spread_prob = 0.0;
        let mut rng = substream(2, "tree-gen", &[]);
        let tree =
            generate_tree(&region, &[full_perimeter(), full_perimeter()], 3, &mut rng, None)
                .unwrap();
        let leaves: Vec<_> = tree.nodes.iter().filter(|n| n.is_leaf()).collect();
        assert_eq!(leaves.len(), 1);
        assert!((tree.path_probability(leaves[0].id) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_run_merge_on_divergent_perimeters() {
        // perimeter A covers only the relevant cell block {0,1}; perimeter B
        // also reaches cell 4. With full spread both trajectories agree
        // through stage 2 (ignition at cell 0) and can diverge later on the
        // relevant cells, so early stages stay merged.
        let mut region = region_3x3();
        region.spread_prob = 1.0;
        region.replications = 1;
        let a = FireState { cells: vec![2, 2, 0, 0, 0, 0, 0, 0, 0] };
        let b = FireState { cells: vec![2, 2, 0, 0, 2, 0, 0, 0, 0] };
        let mut rng = substream(3, "tree-gen", &[]);
        let tree = generate_tree(&region, &[a, b], 3, &mut rng, None).unwrap();
        assert_eq!(tree.stage_nodes(1).len(), 1);
        assert_eq!(tree.stage_nodes(2).len(), 1, "identical through stage 2");
        assert_eq!(tree.stage_nodes(3).len(), 2, "diverge at stage 3");
        let branch = tree.stage_nodes(2)[0];
        let ps: Vec<f64> = branch.children.iter().map(|c| c.p).collect();
        assert!((ps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((ps[0] - 0.5).abs() < 1e-12 && (ps[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_edges() {
        let region = region_3x3();
        let mut rng = substream(4, "tree-gen", &[]);
        let tree = generate_tree(&region, &[full_perimeter()], 3, &mut rng, None).unwrap();
        let p1 = tree.sample_scenario(&mut substream(9, "s", &[]));
        let p2 = tree.sample_scenario(&mut substream(9, "s", &[]));
        assert_eq!(p1, p2);
        for w in p1.windows(2) {
            assert!(tree.node(w[0]).children.iter().any(|c| c.id == w[1]));
        }
        assert_eq!(p1.len(), 3);
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        // hand-built two-leaf tree with p = (0.3, 0.7)
        let tree = ScenarioTree {
            horizon: 2,
            k_budget: 0,
            failure_prone_lines: vec![],
            nodes: vec![
                TreeNode {
                    id: 1,
                    stage: 1,
                    parent: 0,
                    children: vec![ChildEdge { id: 2, p: 0.3 }, ChildEdge { id: 3, p: 0.7 }],
                    fire: FireState::unburned(1),
                    beta: BTreeMap::new(),
                    gamma: BTreeMap::new(),
                },
                TreeNode { id: 2, stage: 2, parent: 1, children: vec![], fire: FireState::unburned(1), beta: BTreeMap::new(), gamma: BTreeMap::new() },
                TreeNode { id: 3, stage: 2, parent: 1, children: vec![], fire: FireState::unburned(1), beta: BTreeMap::new(), gamma: BTreeMap::new() },
            ],
            gen_meta: None,
        };
        assert!(tree.validate().is_empty());
        let mut rng = substream(5, "mc", &[]);
        let mut hits = 0;
        for _ in 0..10_000 {
            if tree.sample_scenario(&mut rng)[1] == 2 {
                hits += 1;
            }
        }
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.3).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn projection_exact_near_and_ties() {
        let mk = |cells: Vec<u8>| FireState { cells };
        let mut tree = ScenarioTree {
            horizon: 1,
            k_budget: 0,
            failure_prone_lines: vec![],
            nodes: vec![
                TreeNode { id: 4, stage: 1, parent: 0, children: vec![], fire: mk(vec![0, 1, 2]), beta: BTreeMap::new(), gamma: BTreeMap::new() },
            ],
            gen_meta: None,
        };
        // exact match
        assert_eq!(tree.project_state(1, &mk(vec![0, 1, 2])), 4);
        // A differs by 1, B differs by 3
        tree.nodes.push(TreeNode { id: 7, stage: 1, parent: 0, children: vec![], fire: mk(vec![2, 1, 0]), beta: BTreeMap::new(), gamma: BTreeMap::new() });
        assert_eq!(tree.project_state(1, &mk(vec![0, 1, 1])), 4);
        // equidistant from ids 4 and 7: observed (1,1,1) is 2 from both
        assert_eq!(tree.project_state(1, &mk(vec![1, 1, 1])), 4);
    }

    #[test]
    fn stage_partition_and_monotonicity_hold_on_generated_trees() {
        let region = region_3x3();
        let mut rng = substream(6, "tree-gen", &[]);
        let tree = generate_tree(&region, &[full_perimeter()], 4, &mut rng, None).unwrap();
        assert!(tree.validate().is_empty());
        let total: usize = (1..=4).map(|t| tree.stage_nodes(t).len()).sum();
        assert_eq!(total, tree.nodes.len());
    }

    #[test]
    fn stress_tree_spreads_at_least_as_much() {
        let region = region_3x3();
        let base =
            generate_tree_with_meta(&region, &[full_perimeter()], 4, 7, None).unwrap();
        let stressed = make_stress_tree(&base, 2.0, None).unwrap();
        assert_eq!(stressed.horizon, base.horizon);
        assert!(expected_final_burned(&stressed) >= expected_final_burned(&base) - 1e-9);
        assert!(stressed.validate().is_empty());
        // multiplier 1 with the same seed reproduces the tree
        let same = make_stress_tree(&base, 1.0, None).unwrap();
        assert_eq!(same.nodes, base.nodes);
        // multiplier below 1 is rejected
        assert!(make_stress_tree(&base, 0.5, None).is_err());
    }

    #[test]
    fn beta_gamma_defaults_respect_ambiguity_bounds() {
        let region = region_3x3();
        let mut rng = substream(8, "tree-gen", &[]);
        let tree = generate_tree(&region, &[full_perimeter()], 3, &mut rng, None).unwrap();
        for n in &tree.nodes {
            for b in n.beta.values() {
                assert!(b[0] <= 0.0 && b[1] <= 0.0);
            }
            for g in n.gamma.values() {
                assert!((0.0..=1.0).contains(g));
            }
        }
    }

    #[test]
    fn tree_file_round_trip() {
        let region = region_3x3();
        let tree = generate_tree_with_meta(&region, &[full_perimeter()], 3, 11, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tree.json");
        save_tree(&tree, &p).unwrap();
        let loaded = load_tree(&p).unwrap();
        assert_eq!(tree, loaded);
    }

    #[test]
    fn empty_perimeters_and_bad_horizon_rejected() {
        let region = region_3x3();
        let mut rng = substream(1, "tree-gen", &[]);
        assert!(matches!(
            generate_tree(&region, &[], 3, &mut rng, None),
            Err(TreeError::NoPerimeters)
        ));
        assert!(matches!(
            generate_tree(&region, &[full_perimeter()], 0, &mut rng, None),
            Err(TreeError::BadHorizon)
        ));
    }
}
