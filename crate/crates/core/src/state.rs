//! Inter-stage state encoding: the decision state x = [z, o, f_abs, p],
//! its binary expansion, and line-availability vectors.

use serde::{Deserialize, Serialize};

use crate::grid::GridInstance;

/// Binary expansion of a bounded continuous quantity at precision `s`:
/// decoded value = L + s * sum_e 2^(e-1) b_e.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryExpansion {
    pub lower: f64,
    pub upper: f64,
    pub precision: f64,
    pub bits: usize,
}

impl BinaryExpansion {
    /// Bit count E = floor(log2((U - L) / s)) + 1, at least 1; `s >= U - L`
    /// degenerates to a single bit.
    pub fn new(lower: f64, upper: f64, precision: f64) -> Self {
        assert!(upper > lower, "binary expansion needs U > L");
        assert!(precision > 0.0, "binary expansion needs s > 0");
        let ratio = (upper - lower) / precision;
        let bits = if ratio <= 1.0 {
            1
        } else {
            (ratio.log2() + 1e-12).floor() as usize + 1
        };
        BinaryExpansion { lower, upper, precision, bits }
    }

    /// Largest bit pattern (as integer) whose decoded value stays <= U.
    pub fn max_code(&self) -> u64 {
        let grid_max = (1u64 << self.bits) - 1;
        let by_upper = ((self.upper - self.lower) / self.precision + 1e-9).floor() as u64;
        grid_max.min(by_upper)
    }

    pub fn decode_code(&self, code: u64) -> f64 {
        self.lower + self.precision * code as f64
    }

    pub fn decode(&self, bits: &[bool]) -> f64 {
        debug_assert_eq!(bits.len(), self.bits);
        let code = bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (e, b)| acc | ((*b as u64) << e));
        self.decode_code(code)
    }

    /// Nearest representable grid point (rounds half away from the lower end
    /// down via `round`'s half-up on the code).
    pub fn encode(&self, value: f64) -> Vec<bool> {
        let code = (((value - self.lower) / self.precision).round().max(0.0) as u64)
            .min(self.max_code());
        (0..self.bits).map(|e| code & (1 << e) != 0).collect()
    }

    /// Grid points in increasing order (respecting the U cap).
    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.max_code()).map(|c| self.decode_code(c))
    }
}

/// Semantic inter-stage state: switching, over-nominal indicators, flow
/// magnitudes on failure-prone lines, and generation levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    /// Closed (true) / open per switchable line, in layout order.
    pub z: Vec<bool>,
    /// Over-nominal indicator per line, in layout order.
    pub o: Vec<bool>,
    /// Flow magnitude per failure-prone line, MW.
    pub f_abs: Vec<f64>,
    /// Generation per generator, MW.
    pub p: Vec<f64>,
}

/// Fully binary representation of a `StateVector` under a `StateLayout`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpandedState {
    pub bits: Vec<bool>,
}

impl ExpandedState {
    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|b| *b as u8 as f64).collect()
    }

    pub fn hamming(&self, other: &ExpandedState) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }
}

/// Line availability over the failure-prone lines; non-prone lines are
/// always available.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Availability {
    pub prone: Vec<bool>,
}

impl Availability {
    pub fn all_available(n_prone: usize) -> Self {
        Availability { prone: vec![true; n_prone] }
    }

    pub fn all_failed(n_prone: usize) -> Self {
        Availability { prone: vec![false; n_prone] }
    }

    pub fn num_failed(&self) -> usize {
        self.prone.iter().filter(|a| !**a).count()
    }

    pub fn leq(&self, other: &Availability) -> bool {
        self.prone.iter().zip(&other.prone).all(|(a, b)| *b || !*a)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.prone.iter().map(|b| *b as u8 as f64).collect()
    }
}

/// Index layout of the expanded state vector for one instance/tree pair.
///
/// Order: z over switchable lines, o over all lines, f_abs bits per
/// failure-prone line (tree order), p bits per generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateLayout {
    pub switchable_lines: Vec<usize>,
    pub lines: Vec<usize>,
    pub prone_lines: Vec<usize>,
    pub generators: Vec<usize>,
    pub f_expansions: Vec<BinaryExpansion>,
    pub p_expansions: Vec<BinaryExpansion>,
    f_offsets: Vec<usize>,
    p_offsets: Vec<usize>,
    total: usize,
}

impl StateLayout {
    pub fn new(grid: &GridInstance, prone_lines: &[usize], precision: f64) -> Self {
        let switchable_lines: Vec<usize> =
            grid.lines.iter().filter(|l| l.switchable).map(|l| l.id).collect();
        let lines: Vec<usize> = grid.lines.iter().map(|l| l.id).collect();
        let generators: Vec<usize> = grid.generators.iter().map(|g| g.id).collect();
        let f_expansions: Vec<BinaryExpansion> = prone_lines
            .iter()
            .map(|lid| {
                let line = grid.line(*lid).expect("prone line exists");
                BinaryExpansion::new(0.0, line.f_min.abs().max(line.f_max), precision)
            })
            .collect();
        let p_expansions: Vec<BinaryExpansion> = grid
            .generators
            .iter()
            .map(|g| BinaryExpansion::new(0.0, g.p_max, precision))
            .collect();
        let base = switchable_lines.len() + lines.len();
        let mut f_offsets = Vec::with_capacity(f_expansions.len());
        let mut at = base;
        for e in &f_expansions {
            f_offsets.push(at);
            at += e.bits;
        }
        let mut p_offsets = Vec::with_capacity(p_expansions.len());
        for e in &p_expansions {
            p_offsets.push(at);
            at += e.bits;
        }
        StateLayout {
            switchable_lines,
            lines,
            prone_lines: prone_lines.to_vec(),
            generators,
            f_expansions,
            p_expansions,
            f_offsets,
            p_offsets,
            total: at,
        }
    }

    pub fn dim(&self) -> usize {
        self.total
    }

    /// Dimension of the value-space representation [z, o, f_abs, p].
    pub fn value_dim(&self) -> usize {
        self.switchable_lines.len()
            + self.lines.len()
            + self.prone_lines.len()
            + self.generators.len()
    }

    pub fn z_index(&self, k: usize) -> usize {
        k
    }

    pub fn o_index(&self, k: usize) -> usize {
        self.switchable_lines.len() + k
    }

    pub fn f_bit_index(&self, prone_k: usize, bit: usize) -> usize {
        self.f_offsets[prone_k] + bit
    }

    pub fn p_bit_index(&self, gen_k: usize, bit: usize) -> usize {
        self.p_offsets[gen_k] + bit
    }

    pub fn encode(&self, x: &StateVector) -> ExpandedState {
        let mut bits = Vec::with_capacity(self.total);
        bits.extend_from_slice(&x.z);
        bits.extend_from_slice(&x.o);
        for (k, e) in self.f_expansions.iter().enumerate() {
            bits.extend(e.encode(x.f_abs[k]));
        }
        for (k, e) in self.p_expansions.iter().enumerate() {
            bits.extend(e.encode(x.p[k]));
        }
        ExpandedState { bits }
    }

    pub fn decode(&self, s: &ExpandedState) -> StateVector {
        let nz = self.switchable_lines.len();
        let nl = self.lines.len();
        let z = s.bits[..nz].to_vec();
        let o = s.bits[nz..nz + nl].to_vec();
        let f_abs = self
            .f_expansions
            .iter()
            .enumerate()
            .map(|(k, e)| e.decode(&s.bits[self.f_offsets[k]..self.f_offsets[k] + e.bits]))
            .collect();
        let p = self
            .p_expansions
            .iter()
            .enumerate()
            .map(|(k, e)| e.decode(&s.bits[self.p_offsets[k]..self.p_offsets[k] + e.bits]))
            .collect();
        StateVector { z, o, f_abs, p }
    }

    /// Value-space coordinates [z, o, f_abs, p] of a state.
    pub fn to_values(&self, x: &StateVector) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.value_dim());
        v.extend(x.z.iter().map(|b| *b as u8 as f64));
        v.extend(x.o.iter().map(|b| *b as u8 as f64));
        v.extend_from_slice(&x.f_abs);
        v.extend_from_slice(&x.p);
        v
    }

    /// Upper bounds of the value-space coordinates.
    pub fn value_upper_bounds(&self) -> Vec<f64> {
        let mut v = vec![1.0; self.switchable_lines.len() + self.lines.len()];
        v.extend(self.f_expansions.iter().map(|e| e.upper));
        v.extend(self.p_expansions.iter().map(|e| e.upper));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_count_formula() {
        // E = floor(log2(100)) + 1 = 7
        assert_eq!(BinaryExpansion::new(0.0, 10.0, 0.1).bits, 7);
        // E = floor(log2(120)) + 1 = 7
        assert_eq!(BinaryExpansion::new(0.0, 12.0, 0.1).bits, 7);
        // degenerate: s >= U - L gives a single bit
        assert_eq!(BinaryExpansion::new(0.0, 1.0, 1.0).bits, 1);
        assert_eq!(BinaryExpansion::new(0.0, 1.0, 5.0).bits, 1);
        // exact power of two ratio
        assert_eq!(BinaryExpansion::new(0.0, 12.8, 0.1).bits, 8);
    }

    #[test]
    fn all_zero_bits_decode_to_lower() {
        let e = BinaryExpansion::new(2.5, 9.0, 0.5);
        assert_eq!(e.decode(&vec![false; e.bits]), 2.5);
    }

    #[test]
    fn degenerate_single_bit_values() {
        let e = BinaryExpansion::new(0.0, 1.0, 1.0);
        assert_eq!(e.decode(&[false]), 0.0);
        assert_eq!(e.decode(&[true]), 1.0);
    }

    #[test]
    fn encode_decode_error_bounded_by_precision() {
        let e = BinaryExpansion::new(0.0, 10.0, 0.1);
        let mut v = 0.0;
        while v <= 10.0 {
            let err = (e.decode(&e.encode(v)) - v).abs();
            assert!(err <= 0.1 + 1e-12, "value {v} decoded with error {err}");
            v += 0.037;
        }
    }

    #[test]
    fn decoded_values_never_exceed_upper() {
        let e = BinaryExpansion::new(0.0, 10.0, 0.4);
        assert!(e.decode(&e.encode(10.0)) <= 10.0 + 1e-12);
        assert!(e.decode_code(e.max_code()) <= 10.0 + 1e-12);
    }
}
