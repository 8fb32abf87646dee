//! Solver-agnostic interface for linear and mixed-integer linear programs.
//!
//! Models are built as plain coefficient lists and handed to the backend
//! (HiGHS) per solve. Duals are available for LP solves only. Lazy
//! constraints are realized as an outer resolve loop driven by a separator
//! callback, which keeps the contract independent of solver callbacks.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MilpError {
    #[error("model has no variables")]
    EmptyModel,
    #[error("non-finite coefficient on variable {0} in row {1}")]
    NonFiniteCoefficient(usize, usize),
    #[error("row {0} references undeclared variable {1}")]
    UndeclaredVariable(usize, usize),
    #[error("solver returned status {0:?}")]
    Unsolved(SolveStatus),
    #[error("row generation exceeded the iteration cap of {0}")]
    RowGenerationCap(usize),
    #[error("duals requested from a model with integer variables")]
    DualsFromMip,
    #[error("model dump failed: {0}")]
    Dump(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone)]
struct VarDef {
    lb: f64,
    ub: f64,
    kind: VarKind,
    obj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coefs: Vec<(VarId, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

impl Row {
    pub fn ge(coefs: Vec<(VarId, f64)>, rhs: f64) -> Self {
        Row { coefs, sense: RowSense::Ge, rhs }
    }
    pub fn le(coefs: Vec<(VarId, f64)>, rhs: f64) -> Self {
        Row { coefs, sense: RowSense::Le, rhs }
    }
    pub fn eq(coefs: Vec<(VarId, f64)>, rhs: f64) -> Self {
        Row { coefs, sense: RowSense::Eq, rhs }
    }

    /// Exact content key used for duplicate detection.
    fn key(&self) -> (Vec<(usize, u64)>, u8, u64) {
        let mut c: Vec<(usize, u64)> =
            self.coefs.iter().map(|(v, x)| (v.0, x.to_bits())).collect();
        c.sort_unstable();
        let s = match self.sense {
            RowSense::Le => 0,
            RowSense::Ge => 1,
            RowSense::Eq => 2,
        };
        (c, s, self.rhs.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    GapLimit,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    pub objective: f64,
    pub primal: Vec<f64>,
    /// Row duals, present for LP solves only; index-aligned with rows.
    pub duals: Option<Vec<f64>>,
    pub wall: Duration,
}

impl Solution {
    pub fn value(&self, v: VarId) -> f64 {
        self.primal[v.0]
    }

    /// Binary variable value rounded to {0, 1}; panics if far from integral.
    pub fn binary(&self, v: VarId) -> bool {
        let x = self.primal[v.0];
        assert!(
            (x - x.round()).abs() <= 1e-5,
            "binary variable {} has fractional value {x}",
            v.0
        );
        x.round() >= 0.5
    }
}

/// A linear model under construction: variables, rows, and a minimized
/// linear objective (plus a fixed offset).
#[derive(Debug, Clone, Default)]
pub struct Model {
    vars: Vec<VarDef>,
    rows: Vec<Row>,
    row_keys: HashSet<(Vec<(usize, u64)>, u8, u64)>,
    pub obj_offset: f64,
    names: BTreeMap<usize, String>,
}

impl Model {
    pub fn new() -> Self {
        Model::default()
    }

    pub fn add_var(&mut self, lb: f64, ub: f64, kind: VarKind, obj: f64) -> VarId {
        debug_assert!(lb.is_finite() && ub.is_finite() && obj.is_finite());
        self.vars.push(VarDef { lb, ub, kind, obj });
        VarId(self.vars.len() - 1)
    }

    pub fn add_binary(&mut self, obj: f64) -> VarId {
        self.add_var(0.0, 1.0, VarKind::Binary, obj)
    }

    pub fn add_continuous(&mut self, lb: f64, ub: f64, obj: f64) -> VarId {
        self.add_var(lb, ub, VarKind::Continuous, obj)
    }

    pub fn set_var_bounds(&mut self, v: VarId, lb: f64, ub: f64) {
        self.vars[v.0].lb = lb;
        self.vars[v.0].ub = ub;
    }

    pub fn set_var_obj(&mut self, v: VarId, obj: f64) {
        self.vars[v.0].obj = obj;
    }

    pub fn var_bounds(&self, v: VarId) -> (f64, f64) {
        (self.vars[v.0].lb, self.vars[v.0].ub)
    }

    pub fn set_name(&mut self, v: VarId, name: impl Into<String>) {
        self.names.insert(v.0, name.into());
    }

    pub fn add_row(&mut self, row: Row) -> usize {
        self.row_keys.insert(row.key());
        self.rows.push(row);
        self.rows.len() - 1
    }

    /// Adds the row unless an identical one is already present.
    pub fn add_row_dedup(&mut self, row: Row) -> bool {
        if self.row_keys.contains(&row.key()) {
            return false;
        }
        self.add_row(row);
        true
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn has_integers(&self) -> bool {
        self.vars.iter().any(|v| v.kind == VarKind::Binary)
    }

    fn validate(&self) -> Result<(), MilpError> {
        if self.vars.is_empty() {
            return Err(MilpError::EmptyModel);
        }
        for (ri, row) in self.rows.iter().enumerate() {
            for (v, c) in &row.coefs {
                if v.0 >= self.vars.len() {
                    return Err(MilpError::UndeclaredVariable(ri, v.0));
                }
                if !c.is_finite() {
                    return Err(MilpError::NonFiniteCoefficient(v.0, ri));
                }
            }
        }
        Ok(())
    }

    /// Residual of every row at the given point; positive means violated.
    pub fn row_violation(&self, row: &Row, point: &[f64]) -> f64 {
        let lhs: f64 = row.coefs.iter().map(|(v, c)| c * point[v.0]).sum();
        match row.sense {
            RowSense::Le => lhs - row.rhs,
            RowSense::Ge => row.rhs - lhs,
            RowSense::Eq => (lhs - row.rhs).abs(),
        }
    }

    /// Writes the model as LP-format text, for debugging.
    pub fn write_lp(&self, path: &std::path::Path) -> Result<(), MilpError> {
        let mut s = String::new();
        let name = |i: usize| -> String {
            self.names.get(&i).cloned().unwrap_or_else(|| format!("x{i}"))
        };
        s.push_str("Minimize\n obj:");
        for (i, v) in self.vars.iter().enumerate() {
            if v.obj != 0.0 {
                let _ = write!(s, " {:+} {}", v.obj, name(i));
            }
        }
        s.push_str("\nSubject To\n");
        for (ri, row) in self.rows.iter().enumerate() {
            let _ = write!(s, " r{ri}:");
            for (v, c) in &row.coefs {
                let _ = write!(s, " {:+} {}", c, name(v.0));
            }
            let op = match row.sense {
                RowSense::Le => "<=",
                RowSense::Ge => ">=",
                RowSense::Eq => "=",
            };
            let _ = writeln!(s, " {op} {}", row.rhs);
        }
        s.push_str("Bounds\n");
        for (i, v) in self.vars.iter().enumerate() {
            let _ = writeln!(s, " {} <= {} <= {}", v.lb, name(i), v.ub);
        }
        s.push_str("Binaries\n");
        for (i, v) in self.vars.iter().enumerate() {
            if v.kind == VarKind::Binary {
                let _ = writeln!(s, " {}", name(i));
            }
        }
        s.push_str("End\n");
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Solver options shared across solves.
#[derive(Debug, Clone)]
pub struct Solver {
    /// Relative MIP gap; nodal subproblems need (near-)exact solves.
    pub rel_gap: f64,
    /// Cap on resolve iterations in `solve_with_row_generation`.
    pub row_gen_cap: usize,
    /// When set, every solved model is dumped as LP text into this directory.
    pub dump_dir: Option<PathBuf>,
}

impl Default for Solver {
    fn default() -> Self {
        Solver { rel_gap: 1e-6, row_gen_cap: 500, dump_dir: None }
    }
}

impl Solver {
    fn run(&self, model: &Model, relax: bool) -> Result<Solution, MilpError> {
        model.validate()?;
        if let Some(dir) = &self.dump_dir {
            std::fs::create_dir_all(dir)?;
            let n = dir.read_dir()?.count();
            model.write_lp(&dir.join(format!("model_{n:05}.lp")))?;
        }
        let started = Instant::now();

        let mut pb = highs::RowProblem::default();
        let mut cols = Vec::with_capacity(model.vars.len());
        for v in &model.vars {
            let col = if v.kind == VarKind::Binary && !relax {
                pb.add_integer_column(v.obj, v.lb..=v.ub)
            } else {
                pb.add_column(v.obj, v.lb..=v.ub)
            };
            cols.push(col);
        }
        for row in &model.rows {
            let coefs: Vec<(highs::Col, f64)> =
                row.coefs.iter().map(|(v, c)| (cols[v.0], *c)).collect();
            match row.sense {
                RowSense::Le => pb.add_row(..=row.rhs, &coefs),
                RowSense::Ge => pb.add_row(row.rhs.., &coefs),
                RowSense::Eq => pb.add_row(row.rhs..=row.rhs, &coefs),
            };
        }

        let mut m = pb.optimise(highs::Sense::Minimise);
        m.set_option("output_flag", false);
        m.set_option("threads", 1i32);
        m.set_option("random_seed", 0i32);
        m.set_option("primal_feasibility_tolerance", 1e-9);
        m.set_option("dual_feasibility_tolerance", 1e-9);
        if model.has_integers() && !relax {
            m.set_option("mip_rel_gap", self.rel_gap);
            m.set_option("mip_feasibility_tolerance", 1e-9);
        }
        let solved = m.solve();
        let status = match solved.status() {
            highs::HighsModelStatus::Optimal => SolveStatus::Optimal,
            highs::HighsModelStatus::Infeasible => SolveStatus::Infeasible,
            highs::HighsModelStatus::Unbounded
            | highs::HighsModelStatus::UnboundedOrInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::GapLimit,
        };
        let wall = started.elapsed();
        if status != SolveStatus::Optimal {
            return Ok(Solution {
                status,
                objective: f64::NAN,
                primal: Vec::new(),
                duals: None,
                wall,
            });
        }
        let sol = solved.get_solution();
        let primal = sol.columns().to_vec();
        let duals = if relax || !model.has_integers() {
            Some(sol.dual_rows().to_vec())
        } else {
            None
        };
        Ok(Solution {
            status,
            objective: solved.objective_value() + model.obj_offset,
            primal,
            duals,
            wall,
        })
    }

    /// Solves the model as a MIP to within `rel_gap`.
    pub fn solve_mip(&self, model: &Model) -> Result<Solution, MilpError> {
        self.run(model, false)
    }

    /// Solves the LP relaxation and returns row duals.
    pub fn solve_lp_relaxation(&self, model: &Model) -> Result<Solution, MilpError> {
        self.run(model, true)
    }

    /// Like `solve_mip` but errors unless the model solved to optimality.
    pub fn solve_mip_expect(&self, model: &Model) -> Result<Solution, MilpError> {
        let sol = self.solve_mip(model)?;
        if sol.status != SolveStatus::Optimal {
            return Err(MilpError::Unsolved(sol.status));
        }
        Ok(sol)
    }

    pub fn solve_lp_expect(&self, model: &Model) -> Result<Solution, MilpError> {
        let sol = self.solve_lp_relaxation(model)?;
        if sol.status != SolveStatus::Optimal {
            return Err(MilpError::Unsolved(sol.status));
        }
        Ok(sol)
    }

    /// Iterative lazy-constraint loop: solve, ask the separator for violated
    /// rows at the incumbent, add them (with duplicate detection), resolve.
    /// The separator must return only valid rows and must return an empty
    /// set only when the incumbent satisfies every implicit row.
    pub fn solve_with_row_generation<F>(
        &self,
        model: &mut Model,
        mut separator: F,
    ) -> Result<Solution, MilpError>
    where
        F: FnMut(&Solution) -> Vec<Row>,
    {
        for _ in 0..self.row_gen_cap {
            let sol = self.solve_mip_expect(model)?;
            let mut added = false;
            for row in separator(&sol) {
                added |= model.add_row_dedup(row);
            }
            if !added {
                return Ok(sol);
            }
        }
        Err(MilpError::RowGenerationCap(self.row_gen_cap))
    }
}

/// Verifies that LP duals are feasible for the constraint matrix within
/// `tol`: reduced costs must respect variable-bound sign conventions.
/// Used by tests against the adapter contract.
pub fn verify_dual_feasibility(model: &Model, sol: &Solution, tol: f64) -> bool {
    let Some(duals) = &sol.duals else { return false };
    // reduced cost c_j - sum_i dual_i * a_ij, per column
    let mut reduced: Vec<f64> = model.vars.iter().map(|v| v.obj).collect();
    for (ri, row) in model.rows.iter().enumerate() {
        for (v, c) in &row.coefs {
            reduced[v.0] -= duals[ri] * c;
        }
    }
    for (j, v) in model.vars.iter().enumerate() {
        let x = sol.primal[j];
        let at_lb = (x - v.lb).abs() <= 1e-7;
        let at_ub = (v.ub - x).abs() <= 1e-7;
        let r = reduced[j];
        // interior variables need zero reduced cost; at a bound the sign
        // must push back into the box (minimization convention)
        if !at_lb && !at_ub && r.abs() > tol {
            return false;
        }
        if at_lb && !at_ub && r < -tol {
            return false;
        }
        if at_ub && !at_lb && r > tol {
            return false;
        }
    }
    // row duals: Ge rows need dual >= 0, Le rows dual <= 0 for minimization
    for (ri, row) in model.rows.iter().enumerate() {
        match row.sense {
            RowSense::Ge => {
                if duals[ri] < -tol {
                    return false;
                }
            }
            RowSense::Le => {
                if duals[ri] > tol {
                    return false;
                }
            }
            RowSense::Eq => {}
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuous_min_with_bound_row() {
        // min x s.t. x >= 3
        let mut m = Model::new();
        let x = m.add_continuous(0.0, 1e6, 1.0);
        m.add_row(Row::ge(vec![(x, 1.0)], 3.0));
        let sol = Solver::default().solve_mip_expect(&m).unwrap();
        assert!((sol.objective - 3.0).abs() < 1e-9);
        // dual of the single >= row is 1 (LP path)
        let lp = Solver::default().solve_lp_expect(&m).unwrap();
        assert!((lp.duals.as_ref().unwrap()[0] - 1.0).abs() < 1e-8);
        assert!(verify_dual_feasibility(&m, &lp, 1e-7));
    }

    #[test]
    fn binary_rounding_up() {
        // min x + y s.t. x + y >= 1.5, x,y binary -> 2
        let mut m = Model::new();
        let x = m.add_binary(1.0);
        let y = m.add_binary(1.0);
        m.add_row(Row::ge(vec![(x, 1.0), (y, 1.0)], 1.5));
        let sol = Solver::default().solve_mip_expect(&m).unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-9);
        assert!(sol.binary(x) && sol.binary(y));
    }

    #[test]
    fn knapsack_matches_brute_force() {
        // max value = min -value, 5 items, capacity constraint
        let values = [4.0, 7.0, 5.0, 3.0, 8.0];
        let weights = [2.0, 4.0, 3.0, 1.0, 5.0];
        let cap = 8.0;
        let mut m = Model::new();
        let xs: Vec<VarId> = values.iter().map(|v| m.add_binary(-v)).collect();
        m.add_row(Row::le(xs.iter().zip(weights).map(|(x, w)| (*x, w)).collect(), cap));
        let sol = Solver::default().solve_mip_expect(&m).unwrap();

        let mut best = 0.0f64;
        for mask in 0u32..32 {
            let (mut v, mut w) = (0.0, 0.0);
            for i in 0..5 {
                if mask & (1 << i) != 0 {
                    v += values[i];
                    w += weights[i];
                }
            }
            if w <= cap {
                best = best.max(v);
            }
        }
        assert!((-sol.objective - best).abs() < 1e-9);
    }

    #[test]
    fn transportation_duals_satisfy_complementary_slackness() {
        // 2x2 transportation: supplies (3, 2), demands (2, 3),
        // costs [[1, 4], [3, 2]]; optimum ships 2 on (1,1), 1 on (1,2), 2 on (2,2).
        let costs = [[1.0, 4.0], [3.0, 2.0]];
        let mut m = Model::new();
        let mut x = [[VarId(0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                x[i][j] = m.add_continuous(0.0, 10.0, costs[i][j]);
            }
        }
        m.add_row(Row::le(vec![(x[0][0], 1.0), (x[0][1], 1.0)], 3.0));
        m.add_row(Row::le(vec![(x[1][0], 1.0), (x[1][1], 1.0)], 2.0));
        m.add_row(Row::ge(vec![(x[0][0], 1.0), (x[1][0], 1.0)], 2.0));
        m.add_row(Row::ge(vec![(x[0][1], 1.0), (x[1][1], 1.0)], 3.0));
        let sol = Solver::default().solve_lp_expect(&m).unwrap();
        // hand-solved optimum: 2*1 + 1*4 + 2*2 = 10
        assert!((sol.objective - 10.0).abs() < 1e-7);
        let duals = sol.duals.clone().unwrap();
        // complementary slackness: slack * dual = 0 per row
        for (ri, row) in [(0usize, 3.0), (1, 2.0), (2, 2.0), (3, 3.0)] {
            let lhs: f64 = m.rows[ri].coefs.iter().map(|(v, c)| c * sol.primal[v.0]).sum();
            assert!((lhs - row).abs() < 1e-7 || duals[ri].abs() < 1e-7);
        }
        assert!(verify_dual_feasibility(&m, &sol, 1e-6));
        // strong duality: dual objective equals primal objective
        let dual_obj: f64 =
            duals.iter().zip([3.0, 2.0, 2.0, 3.0]).map(|(d, b)| d * b).sum();
        assert!((dual_obj - sol.objective).abs() < 1e-6);
    }

    #[test]
    fn lp_relaxation_bounds_mip() {
        let mut m = Model::new();
        let x = m.add_binary(1.0);
        let y = m.add_binary(1.0);
        m.add_row(Row::ge(vec![(x, 1.0), (y, 1.0)], 1.5));
        let s = Solver::default();
        let lp = s.solve_lp_expect(&m).unwrap();
        let mip = s.solve_mip_expect(&m).unwrap();
        assert!(lp.objective <= mip.objective + 1e-9);
    }

    #[test]
    fn row_generation_matches_extensive_model() {
        // min x + y with implicit rows x >= 1, y >= 2, x + y >= 4
        let implicit = |m: &mut Model, x: VarId, y: VarId| {
            m.add_row(Row::ge(vec![(x, 1.0)], 1.0));
            m.add_row(Row::ge(vec![(y, 1.0)], 2.0));
            m.add_row(Row::ge(vec![(x, 1.0), (y, 1.0)], 4.0));
        };
        let mut full = Model::new();
        let (fx, fy) = (full.add_continuous(0.0, 100.0, 1.0), full.add_continuous(0.0, 100.0, 1.0));
        implicit(&mut full, fx, fy);
        let want = Solver::default().solve_mip_expect(&full).unwrap().objective;

        let mut lazy = Model::new();
        let (x, y) = (lazy.add_continuous(0.0, 100.0, 1.0), lazy.add_continuous(0.0, 100.0, 1.0));
        let rows = [
            Row::ge(vec![(x, 1.0)], 1.0),
            Row::ge(vec![(y, 1.0)], 2.0),
            Row::ge(vec![(x, 1.0), (y, 1.0)], 4.0),
        ];
        let s = Solver::default();
        let lazy_rows = rows.clone();
        let sol = s
            .solve_with_row_generation(&mut lazy, move |sol| {
                lazy_rows
                    .iter()
                    .filter(|r| {
                        let lhs: f64 = r.coefs.iter().map(|(v, c)| c * sol.primal[v.0]).sum();
                        lhs < r.rhs - 1e-9
                    })
                    .cloned()
                    .collect()
            })
            .unwrap();
        assert!((sol.objective - want).abs() < 1e-9);
    }

    #[test]
    fn duplicate_rows_do_not_stall_row_generation() {
        let mut m = Model::new();
        let x = m.add_continuous(0.0, 100.0, 1.0);
        let mut fired = 0;
        let s = Solver::default();
        let sol = s
            .solve_with_row_generation(&mut m, |_sol| {
                fired += 1;
                if fired <= 3 {
                    // same row every time; dedup must terminate the loop
                    vec![Row::ge(vec![(x, 1.0)], 5.0)]
                } else {
                    vec![]
                }
            })
            .unwrap();
        assert!((sol.objective - 5.0).abs() < 1e-9);
        assert_eq!(fired, 2, "loop should stop once the duplicate is rejected");
    }

    #[test]
    fn infeasible_and_unbounded_reported_as_status() {
        let mut m = Model::new();
        let x = m.add_continuous(0.0, 1.0, 1.0);
        m.add_row(Row::ge(vec![(x, 1.0)], 2.0));
        let sol = Solver::default().solve_mip(&m).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn objective_monotone_as_rows_added() {
        let mut m = Model::new();
        let x = m.add_continuous(0.0, 100.0, 1.0);
        let y = m.add_continuous(0.0, 100.0, 2.0);
        let s = Solver::default();
        let mut prev = f64::NEG_INFINITY;
        for rhs in [1.0, 2.0, 5.0] {
            m.add_row(Row::ge(vec![(x, 1.0), (y, 1.0)], rhs));
            let obj = s.solve_mip_expect(&m).unwrap().objective;
            assert!(obj >= prev - 1e-12);
            prev = obj;
        }
    }
}
