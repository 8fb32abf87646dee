//! Affine minorants of the cost-to-go functions: Lagrangian cuts,
//! strengthened Benders cuts, integer optimality cuts, and accelerated
//! Lagrangian generation by reusing past multipliers.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::milp::Solver;
use crate::nodal::{
    copy_constraint_duals, evaluate_lagrangian, CopiesModel, NodalContext, NodalError,
};
use crate::state::{Availability, StateLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutOrigin {
    Lagrangian,
    StrengthenedBenders,
    IntegerOptimality,
    Trivial,
}

/// Coordinate space of the state coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutSpace {
    /// One coefficient per expanded (binary) state dimension.
    Expanded,
    /// One coefficient per value-space dimension [z, o, f_abs, p].
    Values,
}

/// An affine minorant pi'x + tau'a + omega of a cost-to-go function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub pi: Vec<f64>,
    pub tau: Vec<f64>,
    pub omega: f64,
    pub origin: CutOrigin,
    #[serde(default)]
    pub iteration: usize,
    #[serde(default = "default_space")]
    pub space: CutSpace,
    /// Generated through continuous state copies.
    #[serde(default)]
    pub continuous_origin: bool,
    /// Converged subgradient / closed-form tight generation point value,
    /// when the cut is tight there.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tight_at: Option<(Vec<f64>, Vec<f64>, f64)>,
}

fn default_space() -> CutSpace {
    CutSpace::Expanded
}

impl Cut {
    pub fn trivial(state_dim: usize, avail_dim: usize, floor: f64) -> Self {
        Cut {
            pi: vec![0.0; state_dim],
            tau: vec![0.0; avail_dim],
            omega: floor,
            origin: CutOrigin::Trivial,
            iteration: 0,
            space: CutSpace::Expanded,
            continuous_origin: false,
            tight_at: None,
        }
    }

    /// Value of the cut at (x, a); `x` must be in the cut's own space.
    pub fn eval(&self, x: &[f64], a: &[f64]) -> f64 {
        self.pi.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            + self.tau.iter().zip(a).map(|(c, v)| c * v).sum::<f64>()
            + self.omega
    }

    /// Exact conversion of a value-space cut to expanded coordinates: each
    /// value coefficient spreads over the bits by the expansion weights.
    pub fn to_expanded(&self, layout: &StateLayout) -> Cut {
        match self.space {
            CutSpace::Expanded => self.clone(),
            CutSpace::Values => {
                let nz = layout.switchable_lines.len();
                let nl = layout.lines.len();
                let nf = layout.prone_lines.len();
                let mut pi = Vec::with_capacity(layout.dim());
                pi.extend_from_slice(&self.pi[..nz + nl]);
                let mut omega = self.omega;
                for (k, e) in layout.f_expansions.iter().enumerate() {
                    let c = self.pi[nz + nl + k];
                    omega += c * e.lower;
                    for ei in 0..e.bits {
                        pi.push(c * e.precision * (1u64 << ei) as f64);
                    }
                }
                for (k, e) in layout.p_expansions.iter().enumerate() {
                    let c = self.pi[nz + nl + nf + k];
                    omega += c * e.lower;
                    for ei in 0..e.bits {
                        pi.push(c * e.precision * (1u64 << ei) as f64);
                    }
                }
                Cut { pi, omega, space: CutSpace::Expanded, ..self.clone() }
            }
        }
    }
}

/// Pool of cuts for one node's cost-to-go lower approximation; the
/// approximation is the pointwise maximum over the pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutPool {
    state_dim: usize,
    avail_dim: usize,
    cuts: Vec<Cut>,
    #[serde(skip)]
    keys: HashSet<(Vec<u64>, Vec<u64>, u64)>,
}

impl CutPool {
    pub fn new(state_dim: usize, avail_dim: usize) -> Self {
        CutPool { state_dim, avail_dim, cuts: Vec::new(), keys: HashSet::new() }
    }

    /// Initial pool holding the trivial cut at the node's stage floor so
    /// separation is defined from the first iteration.
    pub fn with_floor(state_dim: usize, avail_dim: usize, floor: f64) -> Self {
        let mut p = CutPool::new(state_dim, avail_dim);
        p.push(Cut::trivial(state_dim, avail_dim, floor));
        p
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.cuts
    }

    fn key(cut: &Cut) -> (Vec<u64>, Vec<u64>, u64) {
        (
            cut.pi.iter().map(|v| v.to_bits()).collect(),
            cut.tau.iter().map(|v| v.to_bits()).collect(),
            cut.omega.to_bits(),
        )
    }

    /// Adds a cut unless an identical one is present; value-space cuts are
    /// converted to expanded coordinates first.
    pub fn push(&mut self, cut: Cut) -> bool {
        debug_assert_eq!(cut.tau.len(), self.avail_dim);
        let key = Self::key(&cut);
        if self.keys.contains(&key) {
            return false;
        }
        self.keys.insert(key);
        self.cuts.push(cut);
        true
    }

    pub fn push_in_layout(&mut self, layout: &StateLayout, cut: Cut) -> bool {
        let cut = cut.to_expanded(layout);
        debug_assert_eq!(cut.pi.len(), self.state_dim);
        self.push(cut)
    }

    /// Pointwise maximum of the pool at (x, a) with x expanded.
    pub fn eval(&self, x: &[f64], a: &[f64]) -> f64 {
        self.cuts
            .iter()
            .map(|c| {
                debug_assert_eq!(c.space, CutSpace::Expanded, "pool stores expanded cuts");
                c.eval(x, a)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rebuilds the dedup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.keys = self.cuts.iter().map(Self::key).collect();
    }
}

/// FIFO pool of past Lagrangian multipliers for one node.
#[derive(Debug, Clone, Default)]
pub struct MultiplierPool {
    entries: VecDeque<(Vec<f64>, Vec<f64>)>,
    capacity: usize,
}

impl MultiplierPool {
    pub fn new(capacity: usize) -> Self {
        MultiplierPool { entries: VecDeque::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, pi: Vec<f64>, tau: Vec<f64>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((pi, tau));
    }

    pub fn most_recent(&self) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.entries.back()
    }

    /// Index and 1-norm distance of the nearest entry to (pi, tau).
    pub fn nearest(&self, pi: &[f64], tau: &[f64]) -> Option<(usize, f64)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (ep, et))| {
                let d: f64 = ep.iter().zip(pi).map(|(a, b)| (a - b).abs()).sum::<f64>()
                    + et.iter().zip(tau).map(|(a, b)| (a - b).abs()).sum::<f64>();
                (i, d)
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
    }

    pub fn remove(&mut self, idx: usize) -> (Vec<f64>, Vec<f64>) {
        self.entries.remove(idx).expect("valid multiplier index")
    }
}

/// Closed-form integer optimality cut, tight at the binary (x_hat, a_hat):
/// pi = (q_hat - floor)(2 x_hat - 1), tau likewise, omega balances so the
/// cut value at the generation point is exactly q_hat.
pub fn integer_optimality_cut(
    x_hat: &[f64],
    a_hat: &[f64],
    q_hat: f64,
    floor: f64,
    iteration: usize,
) -> Cut {
    debug_assert!(floor <= q_hat + 1e-6, "floor {floor} above value {q_hat}");
    let gap = q_hat - floor;
    let pi: Vec<f64> = x_hat.iter().map(|x| gap * (2.0 * x - 1.0)).collect();
    let tau: Vec<f64> = a_hat.iter().map(|a| gap * (2.0 * a - 1.0)).collect();
    let ones: f64 = x_hat.iter().sum::<f64>() + a_hat.iter().sum::<f64>();
    let omega = q_hat - gap * ones;
    Cut {
        pi,
        tau,
        omega,
        origin: CutOrigin::IntegerOptimality,
        iteration,
        space: CutSpace::Expanded,
        continuous_origin: false,
        tight_at: Some((x_hat.to_vec(), a_hat.to_vec(), q_hat)),
    }
}

/// Configuration of the Lagrangian machinery.
#[derive(Debug, Clone)]
pub struct LagrangianConfig {
    pub max_subgradient_iters: usize,
    /// Polyak step cap.
    pub max_step: f64,
    /// Relative tightness tolerance against the node value.
    pub tol: f64,
    /// Row-generation violation tolerance inside evaluations.
    pub row_tol: f64,
    /// Multiplier-reuse step toward the integer-optimality anchor.
    pub alpha: f64,
    /// Neighborhood threshold for snapping to a pool member.
    pub epsilon: f64,
    /// Reuse iteration budget.
    pub i_max: usize,
}

impl Default for LagrangianConfig {
    fn default() -> Self {
        LagrangianConfig {
            max_subgradient_iters: 50,
            max_step: 10.0,
            tol: 1e-6,
            row_tol: 1e-7,
            alpha: 0.5,
            epsilon: 0.3,
            i_max: 15,
        }
    }
}

/// R(pi, tau) = pi'x + tau'a + L(pi, tau) and the minimizing copies.
pub fn lagrangian_r(
    solver: &Solver,
    ctx: &NodalContext,
    copies: &mut CopiesModel,
    pools: &BTreeMap<usize, CutPool>,
    pi: &[f64],
    tau: &[f64],
    x_hat: &[f64],
    a_hat: &[f64],
    row_tol: f64,
) -> Result<(f64, crate::nodal::LagrangianPoint), NodalError> {
    let point = evaluate_lagrangian(solver, ctx, copies, pools, pi, tau, row_tol)?;
    let r = pi.iter().zip(x_hat).map(|(c, v)| c * v).sum::<f64>()
        + tau.iter().zip(a_hat).map(|(c, v)| c * v).sum::<f64>()
        + point.value;
    Ok((r, point))
}

/// Strengthened Benders cut: LP-relaxation duals of the copy constraints
/// as multipliers, with the intercept from the Lagrangian inner problem.
/// Valid at every binary state, tight only if the relaxation is integral.
pub fn strengthened_benders_cut(
    solver: &Solver,
    ctx: &NodalContext,
    copies: &mut CopiesModel,
    pools: &BTreeMap<usize, CutPool>,
    x_hat: &[f64],
    a_hat: &Availability,
    cfg: &LagrangianConfig,
    iteration: usize,
) -> Result<Cut, NodalError> {
    let (pi, tau) = copy_constraint_duals(solver, ctx, copies, pools, x_hat, a_hat, cfg.row_tol)?;
    let point = evaluate_lagrangian(solver, ctx, copies, pools, &pi, &tau, cfg.row_tol)?;
    Ok(Cut {
        pi,
        tau,
        omega: point.value,
        origin: CutOrigin::StrengthenedBenders,
        iteration,
        space: copies.space,
        continuous_origin: copies.space == CutSpace::Values,
        tight_at: None,
    })
}

/// Outcome of a Lagrangian cut search.
pub struct LagrangianOutcome {
    pub cut: Cut,
    pub converged: bool,
    /// Multiplier evaluations spent (each one MILP solve).
    pub evaluations: usize,
}

/// Maximizes R(pi, tau) by projected subgradient with Polyak steps toward
/// the known target q_hat; stops when the tightness identity holds.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_cut_subgradient(
    solver: &Solver,
    ctx: &NodalContext,
    copies: &mut CopiesModel,
    pools: &BTreeMap<usize, CutPool>,
    x_hat: &[f64],
    a_hat: &Availability,
    q_hat: f64,
    init: (Vec<f64>, Vec<f64>),
    cfg: &LagrangianConfig,
    iteration: usize,
) -> Result<LagrangianOutcome, NodalError> {
    let a_vals = a_hat.as_f64();
    let (mut pi, mut tau) = init;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, f64)> = None;
    let mut evaluations = 0;
    for _ in 0..=cfg.max_subgradient_iters {
        let (r, point) =
            lagrangian_r(solver, ctx, copies, pools, &pi, &tau, x_hat, &a_vals, cfg.row_tol)?;
        evaluations += 1;
        if best.as_ref().map_or(true, |(br, ..)| r > *br) {
            best = Some((r, pi.clone(), tau.clone(), point.value));
        }
        if r >= q_hat - cfg.tol * (1.0 + q_hat.abs()) {
            let cut = Cut {
                pi,
                tau,
                omega: point.value,
                origin: CutOrigin::Lagrangian,
                iteration,
                space: copies.space,
                continuous_origin: copies.space == CutSpace::Values,
                tight_at: Some((x_hat.to_vec(), a_vals.clone(), r.min(q_hat))),
            };
            return Ok(LagrangianOutcome { cut, converged: true, evaluations });
        }
        // subgradient of R at (pi, tau) is (x_hat - r*, a_hat - w*)
        let gx: Vec<f64> = x_hat.iter().zip(&point.r).map(|(x, r)| x - r).collect();
        let ga: Vec<f64> = a_vals.iter().zip(&point.w).map(|(a, w)| a - w).collect();
        let norm2: f64 =
            gx.iter().map(|g| g * g).sum::<f64>() + ga.iter().map(|g| g * g).sum::<f64>();
        if norm2 <= 1e-18 {
            break; // copies already match the anchor; R cannot improve
        }
        let step = ((q_hat - r) / norm2).min(cfg.max_step);
        for (c, g) in pi.iter_mut().zip(&gx) {
            *c += step * g;
        }
        for (c, g) in tau.iter_mut().zip(&ga) {
            *c += step * g;
        }
    }
    let (_, bpi, btau, bomega) = best.expect("at least one evaluation");
    log::warn!(
        "subgradient hit the iteration cap at node {}; returning the best valid iterate",
        copies.vars.node_id
    );
    Ok(LagrangianOutcome {
        cut: Cut {
            pi: bpi,
            tau: btau,
            omega: bomega,
            origin: CutOrigin::Lagrangian,
            iteration,
            space: copies.space,
            continuous_origin: copies.space == CutSpace::Values,
            tight_at: None,
        },
        converged: false,
        evaluations,
    })
}

/// Generates a tight Lagrangian cut by revising past multipliers: starts
/// from the most recent pool entry, walks convex combinations toward the
/// integer-optimality anchor, snapping to (and consuming) nearby pool
/// members; falls back to the integer optimality cut on budget exhaustion.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_cut_reuse(
    solver: &Solver,
    ctx: &NodalContext,
    copies: &mut CopiesModel,
    pools: &BTreeMap<usize, CutPool>,
    x_hat: &[f64],
    a_hat: &Availability,
    q_hat: f64,
    floor: f64,
    multipliers: &mut MultiplierPool,
    cfg: &LagrangianConfig,
    iteration: usize,
) -> Result<LagrangianOutcome, NodalError> {
    let a_vals = a_hat.as_f64();
    let int_cut = integer_optimality_cut(x_hat, &a_vals, q_hat, floor, iteration);
    // R at the integer-optimality anchor equals q_hat identically
    let target = q_hat;
    let tight = |r: f64| (r - target).abs() <= cfg.tol * (1.0 + target.abs());

    let Some((mut pi, mut tau)) = multipliers.most_recent().cloned() else {
        return Ok(LagrangianOutcome { cut: int_cut, converged: true, evaluations: 0 });
    };
    let mut evaluations = 0;
    let mut accepted: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    for _ in 0..cfg.i_max {
        let (r, point) =
            lagrangian_r(solver, ctx, copies, pools, &pi, &tau, x_hat, &a_vals, cfg.row_tol)?;
        evaluations += 1;
        if tight(r) {
            accepted = Some((pi.clone(), tau.clone(), point.value));
            break;
        }
        // move toward the anchor, then snap to a close pool member
        let comb_pi: Vec<f64> = int_cut
            .pi
            .iter()
            .zip(&pi)
            .map(|(a, b)| cfg.alpha * a + (1.0 - cfg.alpha) * b)
            .collect();
        let comb_tau: Vec<f64> = int_cut
            .tau
            .iter()
            .zip(&tau)
            .map(|(a, b)| cfg.alpha * a + (1.0 - cfg.alpha) * b)
            .collect();
        match multipliers.nearest(&comb_pi, &comb_tau) {
            Some((idx, dist)) if dist <= cfg.epsilon => {
                let (p, t) = multipliers.remove(idx);
                pi = p;
                tau = t;
            }
            _ => {
                pi = comb_pi;
                tau = comb_tau;
            }
        }
    }
    match accepted {
        Some((pi, tau, omega)) => Ok(LagrangianOutcome {
            cut: Cut {
                pi,
                tau,
                omega,
                origin: CutOrigin::Lagrangian,
                iteration,
                space: CutSpace::Expanded,
                continuous_origin: false,
                tight_at: Some((x_hat.to_vec(), a_vals, target)),
            },
            converged: true,
            evaluations,
        }),
        None => Ok(LagrangianOutcome { cut: int_cut, converged: true, evaluations }),
    }
}

/// Wall-clock accounting of cut generation, by family.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CutGenStats {
    pub lagrangian_cuts: usize,
    pub benders_cuts: usize,
    pub integer_cuts: usize,
    pub lagrangian_seconds: f64,
    pub benders_seconds: f64,
    pub integer_seconds: f64,
}

impl CutGenStats {
    pub fn time<T>(bucket: &mut f64, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *bucket += t.elapsed().as_secs_f64();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_cut_arithmetic_fixture() {
        // q_hat = 10, floor = 2, x = (1, 0), a = (1):
        // pi = (8, -8), tau = (8), omega = -6, value at the point = 10
        let cut = integer_optimality_cut(&[1.0, 0.0], &[1.0], 10.0, 2.0, 0);
        assert_eq!(cut.pi, vec![8.0, -8.0]);
        assert_eq!(cut.tau, vec![8.0]);
        assert!((cut.omega + 6.0).abs() < 1e-12);
        assert!((cut.eval(&[1.0, 0.0], &[1.0]) - 10.0).abs() < 1e-12);
        // flipped state: the cut drops to the floor or below
        assert!(cut.eval(&[0.0, 1.0], &[1.0]) <= 2.0 + 1e-12);
        assert!((cut.eval(&[0.0, 1.0], &[1.0]) + 6.0).abs() < 1e-12);
    }

    #[test]
    fn integer_cut_degenerate_zero_gap() {
        let cut = integer_optimality_cut(&[1.0, 1.0], &[0.0], 5.0, 5.0, 0);
        assert!(cut.pi.iter().all(|c| *c == 0.0));
        assert!(cut.tau.iter().all(|c| *c == 0.0));
        assert!((cut.omega - 5.0).abs() < 1e-12);
    }

    #[test]
    fn integer_cut_below_value_on_full_enumeration() {
        // the cut never exceeds max(floor, value at matching state) over
        // all binary states at hamming distance >= 1
        let x = [1.0, 0.0, 1.0];
        let a = [1.0, 1.0];
        let cut = integer_optimality_cut(&x, &a, 20.0, 3.0, 0);
        for mask in 0u32..32 {
            let xs: Vec<f64> = (0..3).map(|i| ((mask >> i) & 1) as f64).collect();
            let as_: Vec<f64> = (0..2).map(|i| ((mask >> (3 + i)) & 1) as f64).collect();
            let ham: f64 = xs.iter().zip(&x).map(|(p, q)| (p - q).abs()).sum::<f64>()
                + as_.iter().zip(&a).map(|(p, q)| (p - q).abs()).sum::<f64>();
            let val = cut.eval(&xs, &as_);
            if ham == 0.0 {
                assert!((val - 20.0).abs() < 1e-12);
            } else {
                assert!(val <= 3.0 + 1e-12, "hamming {ham} value {val}");
            }
        }
    }

    #[test]
    fn multiplier_pool_fifo_and_nearest() {
        let mut p = MultiplierPool::new(2);
        p.push(vec![0.0], vec![0.0]);
        p.push(vec![1.0], vec![1.0]);
        p.push(vec![2.0], vec![2.0]); // evicts the first
        assert_eq!(p.len(), 2);
        let (idx, d) = p.nearest(&[1.1], &[1.0]).unwrap();
        assert_eq!(idx, 0);
        assert!((d - 0.1).abs() < 1e-12);
        assert_eq!(p.most_recent().unwrap().0, vec![2.0]);
    }

    #[test]
    fn pool_dedup_and_eval() {
        let mut pool = CutPool::new(2, 1);
        let c = Cut {
            pi: vec![1.0, 0.0],
            tau: vec![2.0],
            omega: 3.0,
            origin: CutOrigin::Lagrangian,
            iteration: 1,
            space: CutSpace::Expanded,
            continuous_origin: false,
            tight_at: None,
        };
        assert!(pool.push(c.clone()));
        assert!(!pool.push(c.clone()));
        assert_eq!(pool.len(), 1);
        assert!((pool.eval(&[1.0, 1.0], &[1.0]) - 6.0).abs() < 1e-12);
        // pointwise max over two cuts
        pool.push(Cut { omega: 100.0, ..c });
        assert!((pool.eval(&[1.0, 1.0], &[1.0]) - 103.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_pool_lower_approximation() {
        // adding any cut never decreases the pooled maximum anywhere
        let mut pool = CutPool::new(1, 1);
        pool.push(Cut::trivial(1, 1, -5.0));
        let points = [([0.0], [0.0]), ([1.0], [0.0]), ([0.0], [1.0]), ([1.0], [1.0])];
        let before: Vec<f64> = points.iter().map(|(x, a)| pool.eval(x, a)).collect();
        pool.push(Cut {
            pi: vec![2.0],
            tau: vec![-1.0],
            omega: 0.0,
            origin: CutOrigin::IntegerOptimality,
            iteration: 0,
            space: CutSpace::Expanded,
            continuous_origin: false,
            tight_at: None,
        });
        for ((x, a), b) in points.iter().zip(before) {
            assert!(pool.eval(x, a) >= b - 1e-12);
        }
    }
}
