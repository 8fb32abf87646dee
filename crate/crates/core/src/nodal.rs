//! Per-node MILP: DC-OPF line switching with ramping, over-nominal
//! indicators, the dualized worst-case expectation over each child's
//! availability, and cut-pool epigraphs, in binary-expanded or
//! continuous-state mode.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ambiguity::separate_worst_atom;
use crate::cuts::{Cut, CutPool, CutSpace};
use crate::grid::GridInstance;
use crate::milp::{MilpError, Model, Row, Solver, VarId, VarKind};
use crate::state::{Availability, ExpandedState, StateLayout, StateVector};
use crate::tree::{ScenarioTree, TreeNode};

#[derive(Debug, Error)]
pub enum NodalError {
    #[error("recourse witness infeasible at node {node}: {reason}")]
    RecourseInfeasible { node: usize, reason: String },
    #[error("node {node} solve failed: {source}")]
    Solve {
        node: usize,
        #[source]
        source: MilpError,
    },
    #[error(transparent)]
    Milp(#[from] MilpError),
}

/// State-variable representation inside node models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Flow magnitudes and generation binary-expanded (the solver's mode).
    Expanded,
    /// Continuous f_abs and p; the ambiguity product relaxes to a McCormick
    /// envelope, giving a valid lower-bounding model.
    ContinuousState,
}

/// Intra-stage recourse: angles, shedding, signed flows.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraStage {
    pub theta: Vec<f64>,
    pub delta: Vec<f64>,
    pub f: Vec<f64>,
}

/// Generation cost plus load-shedding cost of one node's decisions.
pub fn immediate_cost(grid: &GridInstance, x: &StateVector, y: &IntraStage) -> f64 {
    let gen: f64 = grid.generators.iter().zip(&x.p).map(|(g, p)| g.cost * p).sum();
    let shed: f64 = grid.buses.iter().zip(&y.delta).map(|(b, d)| b.shed_cost * d).sum();
    gen + shed
}

/// Static data shared by every model built for one (instance, tree) pair.
#[derive(Debug)]
pub struct NodalContext<'a> {
    pub grid: &'a GridInstance,
    pub tree: &'a ScenarioTree,
    pub layout: StateLayout,
    /// Bound on the dual multipliers; prices moment violations when the
    /// exact ambiguity system is infeasible at a deep availability state.
    pub psi_max: f64,
    /// Global lower bound per node id, from bottom-up LP relaxations.
    pub stage_lower: BTreeMap<usize, f64>,
}

impl<'a> NodalContext<'a> {
    pub fn new(
        grid: &'a GridInstance,
        tree: &'a ScenarioTree,
        precision: f64,
        solver: &Solver,
    ) -> Result<Self, NodalError> {
        let layout = StateLayout::new(grid, &tree.failure_prone_lines, precision);
        let psi_max = tree.k_budget.max(1) as f64
            * grid.max_shed_cost().max(1.0)
            * grid.max_total_demand().max(1.0)
            * tree.horizon as f64;
        let mut ctx =
            NodalContext { grid, tree, layout, psi_max, stage_lower: BTreeMap::new() };
        for t in (1..=tree.horizon).rev() {
            for node in tree.stage_nodes(t) {
                let child_term: f64 =
                    node.children.iter().map(|c| c.p * ctx.stage_lower[&c.id]).sum();
                let floor = ctx.relaxed_floor(node, solver)?;
                ctx.stage_lower.insert(node.id, floor + child_term);
            }
        }
        Ok(ctx)
    }

    pub fn n_prone(&self) -> usize {
        self.tree.failure_prone_lines.len()
    }

    pub fn line_position(&self, lid: usize) -> usize {
        self.layout.lines.iter().position(|l| *l == lid).expect("line id exists")
    }

    /// beta x + gamma per failure-prone line for child `m` at a fixed state.
    pub fn moment_rhs(&self, child: &TreeNode, x: &StateVector) -> Vec<f64> {
        self.tree
            .failure_prone_lines
            .iter()
            .enumerate()
            .map(|(k, lid)| {
                child.beta_f(*lid) * x.f_abs[k]
                    + child.beta_o(*lid) * x.o[self.line_position(*lid)] as u8 as f64
                    + child.gamma_of(*lid)
            })
            .collect()
    }

    /// LP floor of one node's immediate cost over fully relaxed switching,
    /// availability, and state, with the widest generation box.
    fn relaxed_floor(&self, node: &TreeNode, solver: &Solver) -> Result<f64, NodalError> {
        let avail = Availability::all_available(self.n_prone());
        let parent_p: Vec<f64> = self.grid.generators.iter().map(|g| g.p_max).collect();
        let spec = BuildSpec {
            mode: BuildMode::ContinuousState,
            relax_floor: true,
            without_children: true,
        };
        let nm = build_with(self, node, &avail, &parent_p, spec)?;
        let sol = solver
            .solve_lp_expect(&nm.model)
            .map_err(|source| NodalError::Solve { node: node.id, source })?;
        Ok(sol.objective)
    }
}

/// Per-child variable block of a built node model.
#[derive(Debug, Clone)]
pub struct ChildBlock {
    pub node_id: usize,
    pub prob: f64,
    pub psi: Vec<VarId>,
    pub phi: VarId,
}

/// Variable map of a built node model.
#[derive(Debug, Clone)]
pub struct NodeVars {
    pub mode: BuildMode,
    pub node_id: usize,
    pub stage: usize,
    pub theta: Vec<VarId>,
    pub delta: Vec<VarId>,
    pub p: Vec<VarId>,
    /// Per line position (layout order over all lines).
    pub z: Vec<VarId>,
    pub o: Vec<VarId>,
    pub f: Vec<VarId>,
    /// Per prone index: (f_plus, f_minus, direction).
    pub split: Vec<(VarId, VarId, VarId)>,
    /// Per prone index: magnitude bits (expanded mode only).
    pub f_bits: Vec<Vec<VarId>>,
    /// Per generator index: generation bits (expanded mode only).
    pub p_bits: Vec<Vec<VarId>>,
    pub children: Vec<ChildBlock>,
    pub availability: Availability,
}

impl NodeVars {
    /// Expanded-state coordinates of an incumbent solution. In continuous
    /// mode the magnitude and generation values are grid-snapped.
    pub fn expanded_values(&self, layout: &StateLayout, sol: &crate::milp::Solution) -> Vec<f64> {
        let mut out = Vec::with_capacity(layout.dim());
        for lid in &layout.switchable_lines {
            let pos = layout.lines.iter().position(|l| l == lid).unwrap();
            out.push(sol.value(self.z[pos]));
        }
        for v in &self.o {
            out.push(sol.value(*v));
        }
        for (k, e) in layout.f_expansions.iter().enumerate() {
            if self.f_bits[k].is_empty() {
                let (fp, fm, _) = self.split[k];
                let bits = e.encode(sol.value(fp) + sol.value(fm));
                out.extend(bits.iter().map(|b| *b as u8 as f64));
            } else {
                out.extend(self.f_bits[k].iter().map(|v| sol.value(*v)));
            }
        }
        for (k, e) in layout.p_expansions.iter().enumerate() {
            if self.p_bits[k].is_empty() {
                let bits = e.encode(sol.value(self.p[k]));
                out.extend(bits.iter().map(|b| *b as u8 as f64));
            } else {
                out.extend(self.p_bits[k].iter().map(|v| sol.value(*v)));
            }
        }
        out
    }

    /// Linear expression of one expanded-state coordinate over model
    /// variables; only valid in expanded mode for bit coordinates.
    fn state_dim_exprs(&self, layout: &StateLayout) -> Vec<Vec<(VarId, f64)>> {
        let mut out = Vec::with_capacity(layout.dim());
        for lid in &layout.switchable_lines {
            let pos = layout.lines.iter().position(|l| l == lid).unwrap();
            out.push(vec![(self.z[pos], 1.0)]);
        }
        for v in &self.o {
            out.push(vec![(*v, 1.0)]);
        }
        for (k, e) in layout.f_expansions.iter().enumerate() {
            for ei in 0..e.bits {
                assert!(
                    !self.f_bits[k].is_empty(),
                    "expanded-space cut imposed on a continuous-state model"
                );
                out.push(vec![(self.f_bits[k][ei], 1.0)]);
            }
        }
        for (k, e) in layout.p_expansions.iter().enumerate() {
            for ei in 0..e.bits {
                assert!(
                    !self.p_bits[k].is_empty(),
                    "expanded-space cut imposed on a continuous-state model"
                );
                out.push(vec![(self.p_bits[k][ei], 1.0)]);
            }
        }
        out
    }

    /// Linear expression of one value-space coordinate [z, o, f_abs, p].
    fn value_dim_exprs(&self, layout: &StateLayout) -> Vec<Vec<(VarId, f64)>> {
        let mut out = Vec::with_capacity(layout.value_dim());
        for lid in &layout.switchable_lines {
            let pos = layout.lines.iter().position(|l| l == lid).unwrap();
            out.push(vec![(self.z[pos], 1.0)]);
        }
        for v in &self.o {
            out.push(vec![(*v, 1.0)]);
        }
        for (fp, fm, _) in &self.split {
            out.push(vec![(*fp, 1.0), (*fm, 1.0)]);
        }
        for v in &self.p {
            out.push(vec![(*v, 1.0)]);
        }
        out
    }

    /// Epigraph row for a fixed (atom, hyperplane) pair of one child:
    /// phi + a' psi - pi' x >= tau' a + omega.
    pub fn pool_row(
        &self,
        layout: &StateLayout,
        child: &ChildBlock,
        cut: &Cut,
        atom: &Availability,
    ) -> Row {
        let mut coefs = vec![(child.phi, 1.0)];
        let mut rhs = cut.omega;
        for (l, avail) in atom.prone.iter().enumerate() {
            if *avail {
                coefs.push((child.psi[l], 1.0));
                rhs += cut.tau[l];
            }
        }
        let exprs = match cut.space {
            CutSpace::Expanded => self.state_dim_exprs(layout),
            CutSpace::Values => self.value_dim_exprs(layout),
        };
        for (dim, c) in cut.pi.iter().enumerate() {
            if *c != 0.0 {
                for (v, w) in &exprs[dim] {
                    coefs.push((*v, -c * w));
                }
            }
        }
        Row::ge(coefs, rhs)
    }
}

/// A built node model: the MILP plus its variable map.
#[derive(Debug)]
pub struct NodeModel {
    pub model: Model,
    pub vars: NodeVars,
}

#[derive(Debug, Clone, Copy)]
struct BuildSpec {
    mode: BuildMode,
    /// Drop integrality, ramps and child terms; used for the L_n floor.
    relax_floor: bool,
    without_children: bool,
}

/// Builds the node MILP at a fixed parent state and availability.
pub fn build_node_model(
    ctx: &NodalContext,
    node: &TreeNode,
    avail: &Availability,
    mode: BuildMode,
    parent_p: &[f64],
) -> Result<NodeModel, NodalError> {
    build_with(ctx, node, avail, parent_p, BuildSpec { mode, relax_floor: false, without_children: false })
}

/// Builds the physical model only (no child dual blocks); the upper-bound
/// machinery appends its own pricing structure.
pub fn build_node_model_bare(
    ctx: &NodalContext,
    node: &TreeNode,
    avail: &Availability,
    mode: BuildMode,
    parent_p: &[f64],
) -> Result<NodeModel, NodalError> {
    build_with(ctx, node, avail, parent_p, BuildSpec { mode, relax_floor: false, without_children: true })
}

fn build_with(
    ctx: &NodalContext,
    node: &TreeNode,
    avail: &Availability,
    parent_p: &[f64],
    spec: BuildSpec,
) -> Result<NodeModel, NodalError> {
    let g = ctx.grid;
    let tree = ctx.tree;
    let layout = &ctx.layout;
    if !spec.relax_floor {
        assert_recourse(ctx, node, parent_p, spec.mode)?;
    }
    let mut m = Model::new();
    let binkind = if spec.relax_floor { VarKind::Continuous } else { VarKind::Binary };
    let line_avail = |lid: usize| -> f64 {
        match tree.prone_index(lid) {
            Some(k) => avail.prone[k] as u8 as f64,
            None => 1.0,
        }
    };

    let ref_bus = g.reference_bus();
    let theta: Vec<VarId> = g
        .buses
        .iter()
        .map(|b| {
            if b.id == ref_bus {
                m.add_continuous(0.0, 0.0, 0.0)
            } else {
                m.add_continuous(g.theta_min, g.theta_max, 0.0)
            }
        })
        .collect();
    let delta: Vec<VarId> = g
        .buses
        .iter()
        .map(|b| m.add_continuous(0.0, g.demand(b, node.id, node.stage), b.shed_cost))
        .collect();
    let p: Vec<VarId> = g
        .generators
        .iter()
        .enumerate()
        .map(|(gi, gen)| {
            let (lo, hi) = if spec.relax_floor {
                (gen.p_min, gen.p_max)
            } else {
                (
                    gen.p_min.max(parent_p[gi] - gen.ramp_down),
                    gen.p_max.min(parent_p[gi] + gen.ramp_up),
                )
            };
            m.add_continuous(lo, hi, gen.cost)
        })
        .collect();
    let z: Vec<VarId> = g
        .lines
        .iter()
        .map(|l| {
            let a = if spec.relax_floor { 1.0 } else { line_avail(l.id) };
            if l.switchable {
                m.add_var(0.0, a, binkind, 0.0)
            } else {
                m.add_var(a, a, VarKind::Continuous, 0.0)
            }
        })
        .collect();
    let o: Vec<VarId> = g.lines.iter().map(|_| m.add_var(0.0, 1.0, binkind, 0.0)).collect();
    let f: Vec<VarId> = g.lines.iter().map(|l| m.add_continuous(l.f_min, l.f_max, 0.0)).collect();

    // flow balance per bus (paper orientation: outgoing minus incoming)
    for (bi, b) in g.buses.iter().enumerate() {
        let mut coefs: Vec<(VarId, f64)> = Vec::new();
        for (li, l) in g.lines.iter().enumerate() {
            if l.from_bus == b.id {
                coefs.push((f[li], 1.0));
            } else if l.to_bus == b.id {
                coefs.push((f[li], -1.0));
            }
        }
        for (gi, gen) in g.generators.iter().enumerate() {
            if gen.bus == b.id {
                coefs.push((p[gi], 1.0));
            }
        }
        coefs.push((delta[bi], 1.0));
        m.add_row(Row::eq(coefs, g.demand(b, node.id, node.stage)));
    }

    let bus_pos: BTreeMap<usize, usize> =
        g.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    for (li, l) in g.lines.iter().enumerate() {
        // capacity gated by the switch
        m.add_row(Row::le(vec![(f[li], 1.0), (z[li], -l.f_max)], 0.0));
        m.add_row(Row::ge(vec![(f[li], 1.0), (z[li], -l.f_min)], 0.0));
        // DC physics forced when closed and available
        let big_m = g.big_m(l);
        let a = if spec.relax_floor { 1.0 } else { line_avail(l.id) };
        let (bf, bt) = (theta[bus_pos[&l.from_bus]], theta[bus_pos[&l.to_bus]]);
        m.add_row(Row::ge(
            vec![(bf, l.susceptance), (bt, -l.susceptance), (f[li], -1.0), (z[li], -big_m)],
            -(2.0 - a) * big_m,
        ));
        m.add_row(Row::le(
            vec![(bf, l.susceptance), (bt, -l.susceptance), (f[li], -1.0), (z[li], big_m)],
            (2.0 - a) * big_m,
        ));
        // over-nominal indicator
        let head = l.f_max - l.f_nom;
        m.add_row(Row::le(vec![(f[li], 1.0), (o[li], -head)], l.f_nom));
        m.add_row(Row::ge(vec![(f[li], 1.0), (o[li], head)], -l.f_nom));
    }

    // magnitude split on failure-prone lines: f = f+ - f-, f_abs = f+ + f-
    let mut split = Vec::new();
    let mut f_bits: Vec<Vec<VarId>> = Vec::new();
    for (k, lid) in tree.failure_prone_lines.iter().enumerate() {
        let li = g.lines.iter().position(|l| l.id == *lid).expect("prone line in grid");
        let l = &g.lines[li];
        let fp = m.add_continuous(0.0, l.f_max.max(0.0), 0.0);
        let fm = m.add_continuous(0.0, (-l.f_min).max(0.0), 0.0);
        let dir = m.add_var(0.0, 1.0, binkind, 0.0);
        m.add_row(Row::eq(vec![(f[li], 1.0), (fp, -1.0), (fm, 1.0)], 0.0));
        m.add_row(Row::le(vec![(fp, 1.0), (dir, -l.f_max)], 0.0));
        m.add_row(Row::le(vec![(fm, 1.0), (dir, -l.f_min)], -l.f_min));
        split.push((fp, fm, dir));
        if spec.mode == BuildMode::Expanded {
            let e = &layout.f_expansions[k];
            let bits: Vec<VarId> = (0..e.bits).map(|_| m.add_var(0.0, 1.0, binkind, 0.0)).collect();
            let mut coefs = vec![(fp, 1.0), (fm, 1.0)];
            for (ei, b) in bits.iter().enumerate() {
                coefs.push((*b, -e.precision * (1u64 << ei) as f64));
            }
            m.add_row(Row::eq(coefs, 0.0));
            add_decode_cap(&mut m, e, &bits);
            f_bits.push(bits);
        } else {
            f_bits.push(Vec::new());
        }
    }

    let mut p_bits: Vec<Vec<VarId>> = Vec::new();
    for gi in 0..g.generators.len() {
        if spec.mode == BuildMode::Expanded {
            let e = &layout.p_expansions[gi];
            let bits: Vec<VarId> = (0..e.bits).map(|_| m.add_var(0.0, 1.0, binkind, 0.0)).collect();
            let mut coefs = vec![(p[gi], 1.0)];
            for (ei, b) in bits.iter().enumerate() {
                coefs.push((*b, -e.precision * (1u64 << ei) as f64));
            }
            m.add_row(Row::eq(coefs, 0.0));
            add_decode_cap(&mut m, e, &bits);
            p_bits.push(bits);
        } else {
            p_bits.push(Vec::new());
        }
    }

    // dualized worst-case expectation per child
    let mut children = Vec::new();
    if !spec.without_children {
        for edge in &node.children {
            let child = tree.node(edge.id);
            let psi: Vec<VarId> = tree
                .failure_prone_lines
                .iter()
                .map(|lid| m.add_continuous(0.0, ctx.psi_max, edge.p * child.gamma_of(*lid)))
                .collect();
            let phi = m.add_continuous(-1e12, 1e12, edge.p);
            // floor row keeps phi bounded under any psi
            let lb_child = ctx.stage_lower.get(&edge.id).copied().unwrap_or(0.0);
            let mut coefs = vec![(phi, 1.0)];
            for v in &psi {
                coefs.push((*v, 1.0));
            }
            m.add_row(Row::ge(coefs, lb_child));

            for (k, lid) in tree.failure_prone_lines.iter().enumerate() {
                let beta_f = child.beta_f(*lid);
                let beta_o = child.beta_o(*lid);
                let line_pos = ctx.line_position(*lid);
                if beta_o != 0.0 {
                    let w = mccormick_binary(&mut m, ctx.psi_max, psi[k], o[line_pos]);
                    m.set_var_obj(w, edge.p * beta_o);
                }
                if beta_f != 0.0 {
                    match spec.mode {
                        BuildMode::Expanded => {
                            let e = &layout.f_expansions[k];
                            for (ei, b) in f_bits[k].iter().enumerate() {
                                let w = mccormick_binary(&mut m, ctx.psi_max, psi[k], *b);
                                m.set_var_obj(
                                    w,
                                    edge.p * beta_f * e.precision * (1u64 << ei) as f64,
                                );
                            }
                        }
                        BuildMode::ContinuousState => {
                            let e = &layout.f_expansions[k];
                            let (fp, fm, _) = split[k];
                            let t = mccormick_box(
                                &mut m,
                                ctx.psi_max,
                                psi[k],
                                &[(fp, 1.0), (fm, 1.0)],
                                e.upper,
                            );
                            m.set_var_obj(t, edge.p * beta_f);
                        }
                    }
                }
            }
            children.push(ChildBlock { node_id: edge.id, prob: edge.p, psi, phi });
        }
    }

    Ok(NodeModel {
        model: m,
        vars: NodeVars {
            mode: spec.mode,
            node_id: node.id,
            stage: node.stage,
            theta,
            delta,
            p,
            z,
            o,
            f,
            split,
            f_bits,
            p_bits,
            children,
            availability: avail.clone(),
        },
    })
}

fn add_decode_cap(m: &mut Model, e: &crate::state::BinaryExpansion, bits: &[VarId]) {
    if e.decode_code((1u64 << e.bits) - 1) > e.upper + 1e-12 {
        let cap: Vec<(VarId, f64)> = bits
            .iter()
            .enumerate()
            .map(|(ei, b)| (*b, e.precision * (1u64 << ei) as f64))
            .collect();
        m.add_row(Row::le(cap, e.upper));
    }
}

/// Exact product w = psi * b for binary b and psi in [0, cap].
fn mccormick_binary(m: &mut Model, cap: f64, psi: VarId, b: VarId) -> VarId {
    let w = m.add_continuous(0.0, cap, 0.0);
    m.add_row(Row::le(vec![(w, 1.0), (b, -cap)], 0.0));
    m.add_row(Row::le(vec![(w, 1.0), (psi, -1.0)], 0.0));
    m.add_row(Row::ge(vec![(w, 1.0), (psi, -1.0), (b, -cap)], -cap));
    w
}

/// McCormick envelope of psi * expr over [0, cap] x [0, upper]; a
/// relaxation when the second factor is continuous.
fn mccormick_box(m: &mut Model, cap: f64, psi: VarId, expr: &[(VarId, f64)], upper: f64) -> VarId {
    let t = m.add_continuous(0.0, cap * upper, 0.0);
    let mut r1 = vec![(t, 1.0)];
    for (v, c) in expr {
        r1.push((*v, -cap * c));
    }
    m.add_row(Row::le(r1, 0.0));
    m.add_row(Row::le(vec![(t, 1.0), (psi, -upper)], 0.0));
    let mut r3 = vec![(t, 1.0), (psi, -upper)];
    for (v, c) in expr {
        r3.push((*v, -cap * c));
    }
    m.add_row(Row::ge(r3, -cap * upper));
    t
}

/// Relatively-complete-recourse witness: all lines open, generation clipped
/// into the ramp window on the state grid, residual demand shed.
fn assert_recourse(
    ctx: &NodalContext,
    node: &TreeNode,
    parent_p: &[f64],
    mode: BuildMode,
) -> Result<(), NodalError> {
    let g = ctx.grid;
    let mut floor_by_bus: BTreeMap<usize, f64> = BTreeMap::new();
    for (gi, gen) in g.generators.iter().enumerate() {
        let lo = gen.p_min.max(parent_p[gi] - gen.ramp_down);
        let hi = gen.p_max.min(parent_p[gi] + gen.ramp_up);
        let lo = match mode {
            BuildMode::Expanded => {
                let e = &ctx.layout.p_expansions[gi];
                let code = ((lo / e.precision) - 1e-9).ceil().max(0.0) as u64;
                if code > e.max_code() {
                    return Err(NodalError::RecourseInfeasible {
                        node: node.id,
                        reason: format!("generator {} ramp window has no grid point", gen.id),
                    });
                }
                e.decode_code(code)
            }
            BuildMode::ContinuousState => lo,
        };
        if lo > hi + 1e-9 {
            return Err(NodalError::RecourseInfeasible {
                node: node.id,
                reason: format!("generator {} ramp window empty", gen.id),
            });
        }
        *floor_by_bus.entry(gen.bus).or_insert(0.0) += lo;
    }
    for b in &g.buses {
        let d = g.demand(b, node.id, node.stage);
        let floor = floor_by_bus.get(&b.id).copied().unwrap_or(0.0);
        if floor > d + 1e-9 {
            return Err(NodalError::RecourseInfeasible {
                node: node.id,
                reason: format!(
                    "bus {} minimum generation {floor} exceeds demand {d} with all lines open",
                    b.id
                ),
            });
        }
    }
    Ok(())
}

/// Solved node decisions.
#[derive(Debug, Clone)]
pub struct NodeSolution {
    pub objective: f64,
    pub op_cost: f64,
    pub shed_cost: f64,
    pub state: StateVector,
    pub expanded: Option<ExpandedState>,
    pub y: IntraStage,
    pub psi: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

impl NodeSolution {
    pub fn immediate_cost(&self) -> f64 {
        self.op_cost + self.shed_cost
    }
}

/// Solves a node model with lazy epigraph rows separated from the child
/// cut pools at each incumbent.
pub fn solve_node(
    solver: &Solver,
    ctx: &NodalContext,
    nm: &mut NodeModel,
    pools: &BTreeMap<usize, CutPool>,
    tol: f64,
) -> Result<NodeSolution, NodalError> {
    let layout = &ctx.layout;
    let k_budget = ctx.tree.k_budget;
    let NodeModel { model, vars } = nm;
    let sol = solver
        .solve_with_row_generation(model, |sol| {
            let mut rows = Vec::new();
            for child in &vars.children {
                let pool = match pools.get(&child.node_id) {
                    Some(p) if !p.is_empty() => p,
                    _ => continue,
                };
                let x_hat = vars.expanded_values(layout, sol);
                let psi_hat: Vec<f64> = child.psi.iter().map(|v| sol.value(*v)).collect();
                let phi_hat = sol.value(child.phi);
                let (atom, value) =
                    separate_worst_atom(pool, &x_hat, &psi_hat, &vars.availability, k_budget);
                if value <= phi_hat + tol {
                    continue;
                }
                let af = atom.as_f64();
                for cut in pool.cuts() {
                    let cut_val = cut.eval(&x_hat, &af);
                    let aterm: f64 = psi_hat.iter().zip(&af).map(|(p, a)| p * a).sum();
                    if cut_val - aterm > phi_hat + tol {
                        rows.push(vars.pool_row(layout, child, cut, &atom));
                    }
                }
            }
            rows
        })
        .map_err(|source| NodalError::Solve { node: vars.node_id, source })?;

    for child in &vars.children {
        for v in &child.psi {
            if sol.value(*v) >= ctx.psi_max - 1e-4 {
                log::warn!(
                    "node {}: psi at the multiplier bound {}; worst case is capped",
                    vars.node_id,
                    ctx.psi_max
                );
            }
        }
    }
    Ok(extract_solution(ctx, vars, &sol))
}

/// Copy-variable representation in the relaxed formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopiesMode {
    /// All copies binary; Lagrangian cuts are tight at binary states.
    Binary,
    /// Flow-magnitude and generation copies continuous in their boxes;
    /// cheaper cuts in the value space, valid but not necessarily tight.
    ContinuousValues,
}

/// The state-copy formulation of one node: the physical model with copy
/// variables `r` (parent state) and `w` (availability), free of the copy
/// equalities so Lagrangian objectives can price them.
#[derive(Debug)]
pub struct CopiesModel {
    pub model: Model,
    pub vars: NodeVars,
    /// Copy of the parent state, one var per dimension of the cut space.
    pub r: Vec<VarId>,
    /// Copy of the availability, one var per failure-prone line.
    pub w: Vec<VarId>,
    pub space: CutSpace,
    /// Stage floor of each child, for gate constants.
    child_floor: Vec<f64>,
}

impl CopiesModel {
    pub fn dim(&self) -> usize {
        self.r.len()
    }

    /// Sets the Lagrangian objective terms -pi'r - tau'w.
    pub fn set_multipliers(&mut self, pi: &[f64], tau: &[f64]) {
        debug_assert_eq!(pi.len(), self.r.len());
        debug_assert_eq!(tau.len(), self.w.len());
        for (v, c) in self.r.iter().zip(pi) {
            self.model.set_var_obj(*v, -c);
        }
        for (v, c) in self.w.iter().zip(tau) {
            self.model.set_var_obj(*v, -c);
        }
    }
}

/// Builds the copies formulation for a node. Ramp constraints couple to the
/// parent-copy variables; switching and DC gating couple to the
/// availability copies; child epigraph rows are generated lazily, gated on
/// `w` so they stay valid for every availability realization.
pub fn build_copies_model(
    ctx: &NodalContext,
    node: &TreeNode,
    mode: CopiesMode,
) -> Result<CopiesModel, NodalError> {
    let g = ctx.grid;
    let tree = ctx.tree;
    let layout = &ctx.layout;
    let mut m = Model::new();

    let ref_bus = g.reference_bus();
    let theta: Vec<VarId> = g
        .buses
        .iter()
        .map(|b| {
            if b.id == ref_bus {
                m.add_continuous(0.0, 0.0, 0.0)
            } else {
                m.add_continuous(g.theta_min, g.theta_max, 0.0)
            }
        })
        .collect();
    let delta: Vec<VarId> = g
        .buses
        .iter()
        .map(|b| m.add_continuous(0.0, g.demand(b, node.id, node.stage), b.shed_cost))
        .collect();
    let p: Vec<VarId> = g
        .generators
        .iter()
        .map(|gen| m.add_continuous(gen.p_min, gen.p_max, gen.cost))
        .collect();
    // availability copies
    let w: Vec<VarId> =
        tree.failure_prone_lines.iter().map(|_| m.add_binary(0.0)).collect();
    let z: Vec<VarId> = g
        .lines
        .iter()
        .map(|l| {
            match (l.switchable, tree.prone_index(l.id)) {
                (true, _) => m.add_binary(0.0),
                (false, None) => m.add_continuous(1.0, 1.0, 0.0),
                // non-switchable prone line: closed exactly when available
                (false, Some(_)) => m.add_continuous(0.0, 1.0, 0.0),
            }
        })
        .collect();
    let o: Vec<VarId> = g.lines.iter().map(|_| m.add_binary(0.0)).collect();
    let f: Vec<VarId> = g.lines.iter().map(|l| m.add_continuous(l.f_min, l.f_max, 0.0)).collect();

    for (bi, b) in g.buses.iter().enumerate() {
        let mut coefs: Vec<(VarId, f64)> = Vec::new();
        for (li, l) in g.lines.iter().enumerate() {
            if l.from_bus == b.id {
                coefs.push((f[li], 1.0));
            } else if l.to_bus == b.id {
                coefs.push((f[li], -1.0));
            }
        }
        for (gi, gen) in g.generators.iter().enumerate() {
            if gen.bus == b.id {
                coefs.push((p[gi], 1.0));
            }
        }
        coefs.push((delta[bi], 1.0));
        m.add_row(Row::eq(coefs, g.demand(b, node.id, node.stage)));
    }

    let bus_pos: BTreeMap<usize, usize> =
        g.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    for (li, l) in g.lines.iter().enumerate() {
        m.add_row(Row::le(vec![(f[li], 1.0), (z[li], -l.f_max)], 0.0));
        m.add_row(Row::ge(vec![(f[li], 1.0), (z[li], -l.f_min)], 0.0));
        let big_m = g.big_m(l);
        let (bf, bt) = (theta[bus_pos[&l.from_bus]], theta[bus_pos[&l.to_bus]]);
        match tree.prone_index(l.id) {
            Some(k) => {
                if l.switchable {
                    m.add_row(Row::le(vec![(z[li], 1.0), (w[k], -1.0)], 0.0));
                } else {
                    m.add_row(Row::eq(vec![(z[li], 1.0), (w[k], -1.0)], 0.0));
                }
                m.add_row(Row::ge(
                    vec![
                        (bf, l.susceptance),
                        (bt, -l.susceptance),
                        (f[li], -1.0),
                        (z[li], -big_m),
                        (w[k], -big_m),
                    ],
                    -2.0 * big_m,
                ));
                m.add_row(Row::le(
                    vec![
                        (bf, l.susceptance),
                        (bt, -l.susceptance),
                        (f[li], -1.0),
                        (z[li], big_m),
                        (w[k], big_m),
                    ],
                    2.0 * big_m,
                ));
            }
            None => {
                m.add_row(Row::ge(
                    vec![(bf, l.susceptance), (bt, -l.susceptance), (f[li], -1.0), (z[li], -big_m)],
                    -big_m,
                ));
                m.add_row(Row::le(
                    vec![(bf, l.susceptance), (bt, -l.susceptance), (f[li], -1.0), (z[li], big_m)],
                    big_m,
                ));
            }
        }
        let head = l.f_max - l.f_nom;
        m.add_row(Row::le(vec![(f[li], 1.0), (o[li], -head)], l.f_nom));
        m.add_row(Row::ge(vec![(f[li], 1.0), (o[li], head)], -l.f_nom));
    }

    let mut split = Vec::new();
    let mut f_bits: Vec<Vec<VarId>> = Vec::new();
    for (k, lid) in tree.failure_prone_lines.iter().enumerate() {
        let li = g.lines.iter().position(|l| l.id == *lid).expect("prone line in grid");
        let l = &g.lines[li];
        let fp = m.add_continuous(0.0, l.f_max.max(0.0), 0.0);
        let fm = m.add_continuous(0.0, (-l.f_min).max(0.0), 0.0);
        let dir = m.add_binary(0.0);
        m.add_row(Row::eq(vec![(f[li], 1.0), (fp, -1.0), (fm, 1.0)], 0.0));
        m.add_row(Row::le(vec![(fp, 1.0), (dir, -l.f_max)], 0.0));
        m.add_row(Row::le(vec![(fm, 1.0), (dir, -l.f_min)], -l.f_min));
        split.push((fp, fm, dir));
        let e = &layout.f_expansions[k];
        let bits: Vec<VarId> = (0..e.bits).map(|_| m.add_binary(0.0)).collect();
        let mut coefs = vec![(fp, 1.0), (fm, 1.0)];
        for (ei, b) in bits.iter().enumerate() {
            coefs.push((*b, -e.precision * (1u64 << ei) as f64));
        }
        m.add_row(Row::eq(coefs, 0.0));
        add_decode_cap(&mut m, e, &bits);
        f_bits.push(bits);
    }
    let mut p_bits: Vec<Vec<VarId>> = Vec::new();
    for gi in 0..g.generators.len() {
        let e = &layout.p_expansions[gi];
        let bits: Vec<VarId> = (0..e.bits).map(|_| m.add_binary(0.0)).collect();
        let mut coefs = vec![(p[gi], 1.0)];
        for (ei, b) in bits.iter().enumerate() {
            coefs.push((*b, -e.precision * (1u64 << ei) as f64));
        }
        m.add_row(Row::eq(coefs, 0.0));
        add_decode_cap(&mut m, e, &bits);
        p_bits.push(bits);
    }

    // parent-state copies; only generation dimensions couple (ramping)
    let space = match mode {
        CopiesMode::Binary => CutSpace::Expanded,
        CopiesMode::ContinuousValues => CutSpace::Values,
    };
    let mut r: Vec<VarId> = Vec::new();
    match mode {
        CopiesMode::Binary => {
            for _ in 0..layout.dim() {
                r.push(m.add_binary(0.0));
            }
            // ramp rows against decoded parent-generation bits
            let nz = layout.switchable_lines.len();
            let nl = layout.lines.len();
            let mut at = nz + nl;
            for e in &layout.f_expansions {
                at += e.bits;
            }
            for (gi, gen) in g.generators.iter().enumerate() {
                let e = &layout.p_expansions[gi];
                let mut up = vec![(p[gi], 1.0)];
                let mut down = vec![(p[gi], -1.0)];
                for ei in 0..e.bits {
                    let c = e.precision * (1u64 << ei) as f64;
                    up.push((r[at + ei], -c));
                    down.push((r[at + ei], c));
                }
                m.add_row(Row::le(up, gen.ramp_up));
                m.add_row(Row::le(down, gen.ramp_down));
                // parent bits must decode within the generation box
                add_decode_cap(
                    &mut m,
                    e,
                    &(0..e.bits).map(|ei| r[at + ei]).collect::<Vec<_>>(),
                );
                at += e.bits;
            }
        }
        CopiesMode::ContinuousValues => {
            let ubs = layout.value_upper_bounds();
            let nz = layout.switchable_lines.len();
            let nl = layout.lines.len();
            let nf = layout.prone_lines.len();
            for (d, ub) in ubs.iter().enumerate() {
                // z and o copies stay binary; f and p copies relax
                if d < nz + nl {
                    r.push(m.add_binary(0.0));
                } else {
                    r.push(m.add_continuous(0.0, *ub, 0.0));
                }
            }
            for (gi, gen) in g.generators.iter().enumerate() {
                let rv = r[nz + nl + nf + gi];
                m.add_row(Row::le(vec![(p[gi], 1.0), (rv, -1.0)], gen.ramp_up));
                m.add_row(Row::le(vec![(p[gi], -1.0), (rv, 1.0)], gen.ramp_down));
            }
        }
    }

    // child dual blocks with floor rows
    let mut children = Vec::new();
    let mut child_floor = Vec::new();
    for edge in &node.children {
        let child = tree.node(edge.id);
        let psi: Vec<VarId> = tree
            .failure_prone_lines
            .iter()
            .map(|lid| m.add_continuous(0.0, ctx.psi_max, edge.p * child.gamma_of(*lid)))
            .collect();
        let phi = m.add_continuous(-1e12, 1e12, edge.p);
        let lb_child = ctx.stage_lower.get(&edge.id).copied().unwrap_or(0.0);
        let mut coefs = vec![(phi, 1.0)];
        for v in &psi {
            coefs.push((*v, 1.0));
        }
        m.add_row(Row::ge(coefs, lb_child));
        child_floor.push(lb_child);

        for (k, lid) in tree.failure_prone_lines.iter().enumerate() {
            let beta_f = child.beta_f(*lid);
            let beta_o = child.beta_o(*lid);
            let line_pos = ctx.line_position(*lid);
            if beta_o != 0.0 {
                let wv = mccormick_binary(&mut m, ctx.psi_max, psi[k], o[line_pos]);
                m.set_var_obj(wv, edge.p * beta_o);
            }
            if beta_f != 0.0 {
                let e = &layout.f_expansions[k];
                for (ei, b) in f_bits[k].iter().enumerate() {
                    let wv = mccormick_binary(&mut m, ctx.psi_max, psi[k], *b);
                    m.set_var_obj(wv, edge.p * beta_f * e.precision * (1u64 << ei) as f64);
                }
            }
        }
        children.push(ChildBlock { node_id: edge.id, prob: edge.p, psi, phi });
    }

    Ok(CopiesModel {
        model: m,
        vars: NodeVars {
            mode: BuildMode::Expanded,
            node_id: node.id,
            stage: node.stage,
            theta,
            delta,
            p,
            z,
            o,
            f,
            split,
            f_bits,
            p_bits,
            children,
            availability: Availability::all_available(tree.n_prone()),
        },
        r,
        w,
        space,
        child_floor,
    })
}

/// Minimizer of the Lagrangian at fixed multipliers.
#[derive(Debug, Clone)]
pub struct LagrangianPoint {
    pub value: f64,
    /// Minimizing parent-state copies, in the model's cut space.
    pub r: Vec<f64>,
    /// Minimizing availability copies.
    pub w: Vec<f64>,
}

/// Evaluates the inner minimization L(pi, tau) of the Lagrangian dual by
/// solving the copies model with objective terms -pi'r - tau'w. Child
/// epigraph rows are generated lazily and gated on the availability copies
/// so accumulated rows remain valid across evaluations.
pub fn evaluate_lagrangian(
    solver: &Solver,
    ctx: &NodalContext,
    copies: &mut CopiesModel,
    pools: &BTreeMap<usize, CutPool>,
    pi: &[f64],
    tau: &[f64],
    tol: f64,
) -> Result<LagrangianPoint, NodalError> {
    copies.set_multipliers(pi, tau);
    let CopiesModel { model, vars, r, w, space: _, child_floor } = copies;
    let node_id = vars.node_id;
    let sol = solver
        .solve_with_row_generation(model, |sol| {
            violated_gated_rows(ctx, vars, w, child_floor, pools, sol, tol)
        })
        .map_err(|source| NodalError::Solve { node: node_id, source })?;
    Ok(LagrangianPoint {
        value: sol.objective,
        r: r.iter().map(|v| sol.value(*v)).collect(),
        w: w.iter().map(|v| sol.value(*v)).collect(),
    })
}

/// Gated epigraph rows violated at an incumbent of the copies model.
/// Sound for fractional incumbents (availability is thresholded for the
/// separation, then actual violation is re-checked with the gate term).
fn violated_gated_rows(
    ctx: &NodalContext,
    vars: &NodeVars,
    w: &[VarId],
    child_floor: &[f64],
    pools: &BTreeMap<usize, CutPool>,
    sol: &crate::milp::Solution,
    tol: f64,
) -> Vec<Row> {
    let layout = &ctx.layout;
    let k_budget = ctx.tree.k_budget;
    let psi_max = ctx.psi_max;
    let n_prone = ctx.tree.n_prone();
    let mut rows = Vec::new();
    let w_vals: Vec<f64> = w.iter().map(|v| sol.value(*v)).collect();
    let w_bin = Availability { prone: w_vals.iter().map(|v| *v >= 0.5).collect() };
    for (ci, child) in vars.children.iter().enumerate() {
        let pool = match pools.get(&child.node_id) {
            Some(p) if !p.is_empty() => p,
            _ => continue,
        };
        let x_hat = vars.expanded_values(layout, sol);
        let psi_hat: Vec<f64> = child.psi.iter().map(|v| sol.value(*v)).collect();
        let phi_hat = sol.value(child.phi);
        let (atom, _) = separate_worst_atom(pool, &x_hat, &psi_hat, &w_bin, k_budget);
        let af = atom.as_f64();
        for cut in pool.cuts() {
            let ub: Vec<f64> = match cut.space {
                CutSpace::Expanded => vec![1.0; cut.pi.len()],
                CutSpace::Values => layout.value_upper_bounds(),
            };
            let maxval: f64 = cut.pi.iter().zip(&ub).map(|(c, u)| c.max(0.0) * u).sum::<f64>()
                + cut.tau.iter().map(|c| c.max(0.0)).sum::<f64>()
                + cut.omega;
            let gate = maxval - (child_floor[ci] - n_prone as f64 * psi_max) + 1.0;
            let gate_slack: f64 = atom
                .prone
                .iter()
                .zip(&w_vals)
                .filter(|(on, _)| **on)
                .map(|(_, wv)| 1.0 - wv)
                .sum();
            let cut_val = cut.eval(&x_hat, &af);
            let aterm: f64 = psi_hat.iter().zip(&af).map(|(p, a)| p * a).sum();
            if cut_val - aterm - gate * gate_slack > phi_hat + tol {
                let mut row = vars.pool_row(layout, child, cut, &atom);
                for (l, on) in atom.prone.iter().enumerate() {
                    if *on {
                        row.coefs.push((w[l], -gate));
                        row.rhs -= gate;
                    }
                }
                rows.push(row);
            }
        }
    }
    rows
}

/// LP-relaxation duals of the copy constraints at a fixed binary state:
/// the strengthened-Benders multipliers. The LP is row-generated so the
/// child pricing is complete at the relaxed optimum.
pub fn copy_constraint_duals(
    solver: &Solver,
    ctx: &NodalContext,
    copies: &mut CopiesModel,
    pools: &BTreeMap<usize, CutPool>,
    x_hat: &[f64],
    a_hat: &Availability,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), NodalError> {
    let node_id = copies.vars.node_id;
    let mut model = copies.model.clone();
    for v in copies.r.iter().chain(&copies.w) {
        model.set_var_obj(*v, 0.0);
    }
    let first_eq = model.num_rows();
    for (v, val) in copies.r.iter().zip(x_hat) {
        model.add_row(Row::eq(vec![(*v, 1.0)], *val));
    }
    for (v, val) in copies.w.iter().zip(a_hat.as_f64()) {
        model.add_row(Row::eq(vec![(*v, 1.0)], val));
    }
    for _ in 0..solver.row_gen_cap {
        let sol = solver
            .solve_lp_expect(&model)
            .map_err(|source| NodalError::Solve { node: node_id, source })?;
        let rows = violated_gated_rows(
            ctx,
            &copies.vars,
            &copies.w,
            &copies.child_floor,
            pools,
            &sol,
            tol,
        );
        let mut added = false;
        for row in rows {
            // keep the shared copies model and the dual LP in sync so the
            // accumulated pricing carries over to later evaluations
            added |= model.add_row_dedup(row.clone());
            copies.model.add_row_dedup(row);
        }
        if !added {
            let duals = sol.duals.as_ref().expect("lp duals");
            let pi = (0..copies.r.len()).map(|i| duals[first_eq + i]).collect();
            let tau = (0..copies.w.len())
                .map(|i| duals[first_eq + copies.r.len() + i])
                .collect();
            return Ok((pi, tau));
        }
    }
    Err(NodalError::Solve {
        node: node_id,
        source: MilpError::RowGenerationCap(solver.row_gen_cap),
    })
}

fn extract_solution(
    ctx: &NodalContext,
    vars: &NodeVars,
    sol: &crate::milp::Solution,
) -> NodeSolution {
    let g = ctx.grid;
    let layout = &ctx.layout;
    let z: Vec<bool> = layout
        .switchable_lines
        .iter()
        .map(|lid| {
            let pos = layout.lines.iter().position(|l| l == lid).unwrap();
            sol.value(vars.z[pos]).round() >= 0.5
        })
        .collect();
    let o: Vec<bool> = vars.o.iter().map(|v| sol.value(*v).round() >= 0.5).collect();
    let f_abs: Vec<f64> =
        vars.split.iter().map(|(fp, fm, _)| sol.value(*fp) + sol.value(*fm)).collect();
    let p: Vec<f64> = vars.p.iter().map(|v| sol.value(*v)).collect();
    let state = StateVector { z, o, f_abs: f_abs.clone(), p: p.clone() };
    let expanded = match vars.mode {
        BuildMode::Expanded => Some(layout.encode(&state)),
        BuildMode::ContinuousState => None,
    };
    let y = IntraStage {
        theta: vars.theta.iter().map(|v| sol.value(*v)).collect(),
        delta: vars.delta.iter().map(|v| sol.value(*v)).collect(),
        f: vars.f.iter().map(|v| sol.value(*v)).collect(),
    };
    // magnitude linkage: f_abs equals |f| on prone lines at any optimum
    for (k, lid) in ctx.tree.failure_prone_lines.iter().enumerate() {
        let li = g.lines.iter().position(|l| l.id == *lid).unwrap();
        debug_assert!(
            (f_abs[k] - y.f[li].abs()).abs() <= 1e-6,
            "magnitude linkage violated on line {lid}: {} vs {}",
            f_abs[k],
            y.f[li].abs()
        );
    }
    let op_cost: f64 = g.generators.iter().zip(&p).map(|(gen, p)| gen.cost * p).sum();
    let shed_cost: f64 = g.buses.iter().zip(&y.delta).map(|(b, d)| b.shed_cost * d).sum();
    NodeSolution {
        objective: sol.objective,
        op_cost,
        shed_cost,
        state,
        expanded,
        y,
        psi: vars
            .children
            .iter()
            .map(|c| c.psi.iter().map(|v| sol.value(*v)).collect())
            .collect(),
        phi: vars.children.iter().map(|c| sol.value(c.phi)).collect(),
    }
}
