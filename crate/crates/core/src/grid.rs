//! Transmission system domain types, instance ingestion, and validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
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
    #[error("load CSV error in {path}: {source}")]
    LoadCsv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("load CSV references unknown bus {bus} (row {row})")]
    LoadCsvUnknownBus { bus: usize, row: usize },
    #[error("instance is invalid:\n{}", violations.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid { violations: Vec<Violation> },
}

/// A named invariant violation: which entity, which field, which rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} / {}: {}", self.entity, self.field, self.rule)
    }
}

/// Demand specification for a bus; per-node entries win over per-stage,
/// which win over the constant fallback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_node: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_stage: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub constant: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl LoadSpec {
    pub fn demand(&self, node: usize, stage: usize) -> f64 {
        self.per_node
            .get(&node)
            .or_else(|| self.per_stage.get(&stage))
            .copied()
            .unwrap_or(self.constant)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_node
            .values()
            .chain(self.per_stage.values())
            .copied()
            .chain(std::iter::once(self.constant))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: usize,
    /// Load shedding cost, $/MWh.
    pub shed_cost: f64,
    #[serde(default)]
    pub load: LoadSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub susceptance: f64,
    /// Minimum rating, MW; must satisfy f_min <= 0 so an open line can
    /// carry zero flow.
    pub f_min: f64,
    pub f_max: f64,
    /// Nominal rating; flow beyond it raises the over-nominal indicator.
    pub f_nom: f64,
    pub switchable: bool,
    pub failure_prone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: usize,
    pub bus: usize,
    /// Generation cost, $/MWh.
    pub cost: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Ramp limits, MW per stage.
    pub ramp_up: f64,
    pub ramp_down: f64,
}

/// Initial system state x_0, keyed by entity id in the file schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    /// Switch position per switchable line id (1 = closed).
    #[serde(default)]
    pub z: BTreeMap<usize, u8>,
    /// Over-nominal indicator per line id.
    #[serde(default)]
    pub o: BTreeMap<usize, u8>,
    /// Flow magnitude per failure-prone line id, MW.
    #[serde(default)]
    pub f_abs: BTreeMap<usize, f64>,
    /// Generation per generator id, MW.
    #[serde(default)]
    pub p: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridInstance {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    /// Phase angle bounds, radians.
    pub theta_min: f64,
    pub theta_max: f64,
    #[serde(default)]
    pub initial_state: InitialState,
    /// Optional companion CSV with rows `node_id,bus_id,demand_mw`,
    /// resolved relative to the instance file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loads_csv: Option<String>,
}

impl GridInstance {
    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn line(&self, id: usize) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    pub fn generator(&self, id: usize) -> Option<&Generator> {
        self.generators.iter().find(|g| g.id == id)
    }

    /// Big-M constant per line: |B_l (theta_max - theta_min)|.
    pub fn big_m(&self, line: &Line) -> f64 {
        (line.susceptance * (self.theta_max - self.theta_min)).abs()
    }

    pub fn demand(&self, bus: &Bus, node: usize, stage: usize) -> f64 {
        bus.load.demand(node, stage)
    }

    /// Reference bus: lowest id, its angle is pinned to zero.
    pub fn reference_bus(&self) -> usize {
        self.buses.iter().map(|b| b.id).min().expect("non-empty buses")
    }

    /// Largest conceivable bus demand, for penalty scaling.
    pub fn max_total_demand(&self) -> f64 {
        self.buses
            .iter()
            .map(|b| b.load.values().fold(0.0f64, f64::max))
            .sum()
    }

    pub fn max_shed_cost(&self) -> f64 {
        self.buses.iter().map(|b| b.shed_cost).fold(0.0, f64::max)
    }
}

/// Checks every instance invariant; returns all violations (empty iff valid).
pub fn validate_instance(g: &GridInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entity: String, field: &str, rule: String| {
        out.push(Violation { entity, field: field.to_string(), rule });
    };

    let mut seen = std::collections::HashSet::new();
    for b in &g.buses {
        if !seen.insert(b.id) {
            push(format!("bus {}", b.id), "id", "duplicate id".into());
        }
        if b.shed_cost < 0.0 {
            push(format!("bus {}", b.id), "shed_cost", "must be >= 0".into());
        }
        for v in b.load.values() {
            if v < 0.0 {
                push(format!("bus {}", b.id), "load", format!("demand {v} must be >= 0"));
                break;
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for l in &g.lines {
        let ent = format!("line {}", l.id);
        if !seen.insert(l.id) {
            push(ent.clone(), "id", "duplicate id".into());
        }
        if g.bus(l.from_bus).is_none() {
            push(ent.clone(), "from_bus", format!("references nonexistent bus {}", l.from_bus));
        }
        if g.bus(l.to_bus).is_none() {
            push(ent.clone(), "to_bus", format!("references nonexistent bus {}", l.to_bus));
        }
        if l.from_bus == l.to_bus {
            push(ent.clone(), "to_bus", "from_bus and to_bus must differ".into());
        }
        if !(l.f_min <= 0.0 && 0.0 <= l.f_max) {
            push(ent.clone(), "f_min", "must satisfy f_min <= 0 <= f_max".into());
        }
        if l.f_nom > l.f_max {
            push(ent.clone(), "f_nom", format!("f_nom {} exceeds f_max {}", l.f_nom, l.f_max));
        }
        if !g.big_m(l).is_finite() || g.big_m(l) <= 0.0 {
            push(ent.clone(), "susceptance", "big-M constant must be finite and positive".into());
        }
    }
    let mut seen = std::collections::HashSet::new();
    for gen in &g.generators {
        let ent = format!("generator {}", gen.id);
        if !seen.insert(gen.id) {
            push(ent.clone(), "id", "duplicate id".into());
        }
        if g.bus(gen.bus).is_none() {
            push(ent.clone(), "bus", format!("references nonexistent bus {}", gen.bus));
        }
        if !(0.0 <= gen.p_min && gen.p_min <= gen.p_max) {
            push(ent.clone(), "p_min", "must satisfy 0 <= p_min <= p_max".into());
        }
        if gen.ramp_up < 0.0 {
            push(ent.clone(), "ramp_up", "must be >= 0".into());
        }
        if gen.ramp_down < 0.0 {
            push(ent.clone(), "ramp_down", "must be >= 0".into());
        }
        if gen.cost < 0.0 {
            push(ent.clone(), "cost", "must be >= 0".into());
        }
    }
    if !(g.theta_min < g.theta_max) {
        push("instance".into(), "theta_min", "must satisfy theta_min < theta_max".into());
    }
    if g.buses.is_empty() {
        push("instance".into(), "buses", "at least one bus required".into());
    }

    // initial state consistency
    for (lid, _) in &g.initial_state.z {
        match g.line(*lid) {
            None => push("initial_state".into(), "z", format!("references nonexistent line {lid}")),
            Some(l) if !l.switchable => {
                push("initial_state".into(), "z", format!("line {lid} is not switchable"))
            }
            _ => {}
        }
    }
    for (lid, _) in &g.initial_state.o {
        if g.line(*lid).is_none() {
            push("initial_state".into(), "o", format!("references nonexistent line {lid}"));
        }
    }
    for (lid, v) in &g.initial_state.f_abs {
        match g.line(*lid) {
            None => {
                push("initial_state".into(), "f_abs", format!("references nonexistent line {lid}"))
            }
            Some(l) if *v < 0.0 || *v > l.f_min.abs().max(l.f_max) => push(
                "initial_state".into(),
                "f_abs",
                format!("line {lid} magnitude {v} outside [0, max(|f_min|, f_max)]"),
            ),
            _ => {}
        }
    }
    for (gid, v) in &g.initial_state.p {
        match g.generator(*gid) {
            None => {
                push("initial_state".into(), "p", format!("references nonexistent generator {gid}"))
            }
            Some(gen) if *v < 0.0 || *v > gen.p_max => push(
                "initial_state".into(),
                "p",
                format!("generator {gid} level {v} outside [0, p_max]"),
            ),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct LoadRow {
    node_id: usize,
    bus_id: usize,
    demand_mw: f64,
}

/// Loads, merges companion CSV loads if declared, and validates an instance.
pub fn load_instance(path: &Path) -> Result<GridInstance, GridError> {
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut g: GridInstance =
        serde_json::from_str(&text).map_err(|source| GridError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    if let Some(csv_rel) = g.loads_csv.clone() {
        let csv_path = path.parent().unwrap_or(Path::new(".")).join(&csv_rel);
        let mut rdr = csv::Reader::from_path(&csv_path).map_err(|source| GridError::LoadCsv {
            path: csv_path.display().to_string(),
            source,
        })?;
        for (i, rec) in rdr.deserialize::<LoadRow>().enumerate() {
            let row = rec.map_err(|source| GridError::LoadCsv {
                path: csv_path.display().to_string(),
                source,
            })?;
            let bus = g
                .buses
                .iter_mut()
                .find(|b| b.id == row.bus_id)
                .ok_or(GridError::LoadCsvUnknownBus { bus: row.bus_id, row: i + 2 })?;
            bus.load.per_node.insert(row.node_id, row.demand_mw);
        }
    }
    let violations = validate_instance(&g);
    if !violations.is_empty() {
        return Err(GridError::Invalid { violations });
    }
    Ok(g)
}

/// Writes the canonical JSON form; `load_instance . save_instance` is the
/// identity on that form.
pub fn save_instance(g: &GridInstance, path: &Path) -> Result<(), GridError> {
    let mut g = g.clone();
    g.loads_csv = None; // loads are already merged inline
    let text = serde_json::to_string_pretty(&g).expect("instance serializes");
    std::fs::write(path, text).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn three_bus() -> GridInstance {
        GridInstance {
            buses: vec![
                Bus { id: 0, shed_cost: 1000.0, load: LoadSpec { constant: 5.0, ..Default::default() } },
                Bus { id: 1, shed_cost: 1000.0, load: Default::default() },
                Bus { id: 2, shed_cost: 900.0, load: LoadSpec { constant: 4.0, ..Default::default() } },
            ],
            lines: vec![
                Line { id: 0, from_bus: 0, to_bus: 1, susceptance: 10.0, f_min: -8.0, f_max: 8.0, f_nom: 6.0, switchable: true, failure_prone: true },
                Line { id: 1, from_bus: 1, to_bus: 2, susceptance: 10.0, f_min: -8.0, f_max: 8.0, f_nom: 6.0, switchable: false, failure_prone: false },
                Line { id: 2, from_bus: 0, to_bus: 2, susceptance: 10.0, f_min: -8.0, f_max: 8.0, f_nom: 6.0, switchable: true, failure_prone: false },
            ],
            generators: vec![Generator { id: 0, bus: 1, cost: 30.0, p_min: 0.0, p_max: 12.0, ramp_up: 12.0, ramp_down: 12.0 }],
            theta_min: -0.6,
            theta_max: 0.6,
            initial_state: Default::default(),
            loads_csv: None,
        }
    }

    #[test]
    fn well_formed_instance_has_no_violations() {
        assert!(validate_instance(&three_bus()).is_empty());
    }

    #[test]
    fn degenerate_angle_bounds_flagged() {
        let mut g = three_bus();
        g.theta_min = g.theta_max;
        let v = validate_instance(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "theta_min");
    }

    #[test]
    fn negative_ramp_down_flagged() {
        let mut g = three_bus();
        g.generators[0].ramp_down = -1.0;
        let v = validate_instance(&g);
        assert_eq!(v.len(), 1);
        assert!(v[0].entity.contains("generator 0"));
    }

    #[test]
    fn nominal_rating_above_max_names_the_line() {
        let mut g = three_bus();
        g.lines[1].f_nom = 9.0;
        let v = validate_instance(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].entity, "line 1");
        assert_eq!(v[0].field, "f_nom");
    }

    #[test]
    fn dangling_generator_bus_flagged() {
        let mut g = three_bus();
        g.generators[0].bus = 99;
        let v = validate_instance(&g);
        assert!(v.iter().any(|v| v.entity == "generator 0" && v.field == "bus"));
    }

    #[test]
    fn big_m_finite_and_positive_on_valid_instances() {
        let g = three_bus();
        for l in &g.lines {
            let m = g.big_m(l);
            assert!(m.is_finite() && m > 0.0);
        }
    }

    #[test]
    fn paper_scale_ratings_accepted() {
        // ratings within [20.1, 110.4] MW and costs within [29.5, 54.0] $/MWh
        let mut g = three_bus();
        for l in &mut g.lines {
            l.f_max = 110.4;
            l.f_min = -110.4;
            l.f_nom = 20.1;
        }
        g.generators[0].cost = 54.0;
        assert!(validate_instance(&g).is_empty());
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inst.json");
        let g = three_bus();
        save_instance(&g, &p).unwrap();
        let g2 = load_instance(&p).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn companion_csv_loads_are_merged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inst.json");
        let mut g = three_bus();
        g.loads_csv = Some("loads.csv".into());
        std::fs::write(&p, serde_json::to_string(&GridInstance { loads_csv: Some("loads.csv".into()), ..g.clone() }).unwrap()).unwrap();
        std::fs::write(dir.path().join("loads.csv"), "node_id,bus_id,demand_mw\n3,0,7.5\n").unwrap();
        let loaded = load_instance(&p).unwrap();
        assert_eq!(loaded.buses[0].load.demand(3, 1), 7.5);
        // untouched nodes fall back to the constant
        assert_eq!(loaded.buses[0].load.demand(4, 1), 5.0);
    }

    #[test]
    fn parse_error_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, "{ \"buses\": [ { \"id\": }").unwrap();
        let err = load_instance(&p).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("parse error"));
    }
}
