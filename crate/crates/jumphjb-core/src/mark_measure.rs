//! Finite jump (mark) measure and jump-time sampling.
//!
//! The jump intensity measure nu lives on a finite set of atoms
//! `e_1, ..., e_A` in R^m with weights `w_i = nu({e_i})`, so every integral
//! against nu is the exact weighted sum over atoms and the total mass
//! `nu(E) = sum w_i` is finite. Jump times of the driving Poisson random
//! measure on an interval are sampled exactly: the count is Poisson with
//! rate `nu(E) * (t1 - t0)`, times are i.i.d. uniform on the interval, and
//! marks are categorical with probabilities `w_i / nu(E)`.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// One atom of the mark measure: location, weight, and the value of the
/// jump-size modulus rho at the mark.
#[derive(Debug, Clone)]
pub struct MarkAtom {
    /// Mark location in R^m.
    pub mark: Vec<f64>,
    /// Point mass `nu({e})`, nonnegative.
    pub weight: f64,
    /// Modulus `rho(e)` bounding the jump coefficient at this mark.
    pub rho: f64,
}

/// A finite-atom intensity measure on mark space.
#[derive(Debug, Clone)]
pub struct MarkMeasure {
    atoms: Vec<MarkAtom>,
    mark_dim: usize,
    total_mass: f64,
    /// Cumulative weights for categorical mark sampling.
    cumulative: Vec<f64>,
}

/// One sampled jump: its time and the index of the atom it hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpRecord {
    pub time: f64,
    pub mark_index: usize,
}

impl MarkMeasure {
    /// Builds a measure from atoms. All marks must share one dimension and
    /// weights and moduli must be finite and nonnegative. An empty atom
    /// list is the zero measure (no jumps ever).
    pub fn new(atoms: Vec<MarkAtom>) -> Result<Self> {
        let mark_dim = atoms.first().map_or(1, |a| a.mark.len());
        for (i, atom) in atoms.iter().enumerate() {
            if atom.mark.len() != mark_dim {
                return Err(Error::InvalidArgument(format!(
                    "atom {i} has mark dimension {}, expected {mark_dim}",
                    atom.mark.len()
                )));
            }
            if !atom.weight.is_finite() || atom.weight < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "atom {i} has invalid weight {}",
                    atom.weight
                )));
            }
            if !atom.rho.is_finite() || atom.rho < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "atom {i} has invalid modulus {}",
                    atom.rho
                )));
            }
            if atom.mark.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("atom {i} has non-finite mark")));
            }
        }
        let mut cumulative = Vec::with_capacity(atoms.len());
        let mut acc = 0.0;
        for atom in &atoms {
            acc += atom.weight;
            cumulative.push(acc);
        }
        Ok(Self { atoms, mark_dim, total_mass: acc, cumulative })
    }

    pub fn atoms(&self) -> &[MarkAtom] {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    /// Total mass `nu(E)`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Integral of the integrand against nu, exact by atom summation.
    pub fn quadrature(&self, integrand: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * integrand(&a.mark)).sum()
    }

    /// As [`quadrature`](Self::quadrature) but handing the integrand the
    /// atom index as well, for per-atom tabulated integrands.
    pub fn quadrature_indexed(&self, integrand: impl Fn(usize, &MarkAtom) -> f64) -> f64 {
        self.atoms.iter().enumerate().map(|(i, a)| a.weight * integrand(i, a)).sum()
    }

    /// L2(nu) norm of a scalar function of the mark.
    pub fn l2_norm(&self, r: impl Fn(&[f64]) -> f64) -> f64 {
        self.quadrature(|e| r(e).powi(2)).sqrt()
    }

    /// Diagnostic `integral of exp(rho(e)) d nu`; finite by construction for
    /// finite atom sets, reported so configs can be sanity-checked against
    /// the standing exponential-integrability requirement.
    pub fn exp_integrability(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight * a.rho.exp()).sum()
    }

    /// Samples the jumps of the Poisson random measure on `(t0, t1]`.
    ///
    /// Returns records sorted by time. The draw order is fixed (count,
    /// then times, then marks), so a replay with the same generator state
    /// reproduces the records bitwise.
    pub fn sample_jumps(&self, t0: f64, t1: f64, rng: &mut impl Rng) -> Result<Vec<JumpRecord>> {
        if !(t1 >= t0) {
            return Err(Error::InvalidInterval { t0, t1 });
        }
        let rate = self.total_mass * (t1 - t0);
        if rate == 0.0 {
            return Ok(Vec::new());
        }
        let count = Poisson::new(rate)
            .map_err(|e| Error::InvalidArgument(format!("jump rate {rate}: {e}")))?
            .sample(rng) as usize;
        let mut times: Vec<f64> = (0..count)
            .map(|_| t1 - rng.gen::<f64>() * (t1 - t0))
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let records = times
            .into_iter()
            .map(|time| JumpRecord { time, mark_index: self.sample_mark_index(rng) })
            .collect();
        Ok(records)
    }

    fn sample_mark_index(&self, rng: &mut impl Rng) -> usize {
        let u = rng.gen::<f64>() * self.total_mass;
        // partition_point returns the first atom whose cumulative weight
        // exceeds u; zero-weight atoms are never selected.
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.atoms.len() - 1)
    }

    /// Compensator integral over a step: `(t1 - t0) * integral of the
    /// integrand d nu`. This is the exact mean of the jump sum the sampler
    /// produces on the same interval.
    pub fn compensator_increment(
        &self,
        t0: f64,
        t1: f64,
        integrand: impl Fn(&[f64]) -> f64,
    ) -> Result<f64> {
        if !(t1 >= t0) {
            return Err(Error::InvalidInterval { t0, t1 });
        }
        Ok((t1 - t0) * self.quadrature(integrand))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn two_atom_measure() -> MarkMeasure {
        MarkMeasure::new(vec![
            MarkAtom { mark: vec![1.0], weight: 0.5, rho: 0.2 },
            MarkAtom { mark: vec![2.0], weight: 1.5, rho: 0.4 },
        ])
        .unwrap()
    }

    #[test]
    fn quadrature_of_unit_integrand_is_total_mass() {
        let mm = two_atom_measure();
        assert_eq!(mm.quadrature(|_| 1.0), 2.0);
        assert_eq!(mm.total_mass(), 2.0);
    }

    #[test]
    fn quadrature_weights_first_coordinate() {
        // Hand sum: 0.5 * 1.0 + 1.5 * 2.0 = 3.5.
        let mm = two_atom_measure();
        assert_eq!(mm.quadrature(|e| e[0]), 3.5);
    }

    #[test]
    fn l2_norm_matches_direct_weighted_sum() {
        // Oracle: accumulate w_i * r(e_i)^2 by hand over ten fixed atoms.
        let atoms: Vec<MarkAtom> = (0..10)
            .map(|i| MarkAtom {
                mark: vec![0.3 * i as f64 - 1.2, (i as f64).sin()],
                weight: 0.1 + 0.05 * i as f64,
                rho: 0.1,
            })
            .collect();
        let r = |e: &[f64]| e[0] * e[0] - 0.7 * e[1] + 0.25;
        let mut oracle = 0.0;
        for a in &atoms {
            oracle += a.weight * r(&a.mark).powi(2);
        }
        let oracle = oracle.sqrt();
        let mm = MarkMeasure::new(atoms).unwrap();
        assert!((mm.l2_norm(r) - oracle).abs() <= 1e-14 * oracle.max(1.0));
    }

    #[test]
    fn sampled_count_mean_matches_compensator() {
        let mm = two_atom_measure();
        let (t0, t1) = (0.0, 0.25);
        let reps = 40_000usize;
        let mut total = 0usize;
        for i in 0..reps {
            let mut rng = derive_stream(11, "count-test", i as u64);
            total += mm.sample_jumps(t0, t1, &mut rng).unwrap().len();
        }
        let mean = total as f64 / reps as f64;
        let rate = mm.total_mass() * (t1 - t0);
        // Poisson variance equals the rate; allow three standard errors.
        let se = (rate / reps as f64).sqrt();
        assert!(
            (mean - rate).abs() <= 3.0 * se,
            "count mean {mean} vs rate {rate} (se {se})"
        );
    }

    #[test]
    fn sampled_mark_frequencies_match_weights() {
        let mm = two_atom_measure();
        let reps = 20_000usize;
        let mut hits = [0usize; 2];
        for i in 0..reps {
            let mut rng = derive_stream(13, "freq-test", i as u64);
            for rec in mm.sample_jumps(0.0, 1.0, &mut rng).unwrap() {
                hits[rec.mark_index] += 1;
            }
        }
        let n = (hits[0] + hits[1]) as f64;
        let p_hat = hits[0] as f64 / n;
        let p = 0.5 / 2.0;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!(
            (p_hat - p).abs() <= 4.0 * se,
            "atom 0 frequency {p_hat} vs probability {p}"
        );
    }

    #[test]
    fn empty_measure_produces_no_jumps() {
        let mm = MarkMeasure::new(Vec::new()).unwrap();
        let mut rng = derive_stream(1, "empty", 0);
        assert!(mm.sample_jumps(0.0, 10.0, &mut rng).unwrap().is_empty());
        assert_eq!(mm.total_mass(), 0.0);
    }

    #[test]
    fn reversed_interval_is_rejected() {
        let mm = two_atom_measure();
        let mut rng = derive_stream(1, "rev", 0);
        assert!(matches!(
            mm.sample_jumps(1.0, 0.0, &mut rng),
            Err(Error::InvalidInterval { .. })
        ));
        assert!(matches!(
            mm.compensator_increment(1.0, 0.0, |_| 1.0),
            Err(Error::InvalidInterval { .. })
        ));
    }

    #[test]
    fn compensator_increment_scales_with_interval() {
        let mm = two_atom_measure();
        let v = mm.compensator_increment(0.5, 1.5, |e| e[0]).unwrap();
        assert_eq!(v, 3.5);
    }

    #[test]
    fn replay_with_same_stream_is_bitwise_identical() {
        let mm = two_atom_measure();
        let mut a = derive_stream(99, "replay", 7);
        let mut b = derive_stream(99, "replay", 7);
        let ja = mm.sample_jumps(0.0, 3.0, &mut a).unwrap();
        let jb = mm.sample_jumps(0.0, 3.0, &mut b).unwrap();
        assert_eq!(ja, jb);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn jump_times_sorted_and_inside_interval(seed: u64, span in 0.01f64..4.0) {
                let mm = two_atom_measure();
                let mut rng = derive_stream(seed, "prop-times", 0);
                let t0 = 0.25;
                let jumps = mm.sample_jumps(t0, t0 + span, &mut rng).unwrap();
                for w in jumps.windows(2) {
                    prop_assert!(w[0].time <= w[1].time);
                }
                for j in &jumps {
                    prop_assert!(j.time > t0 && j.time <= t0 + span);
                    prop_assert!(j.mark_index < mm.n_atoms());
                }
            }

            #[test]
            fn l2_norm_agrees_with_brute_force(ws in proptest::collection::vec(0.0f64..2.0, 1..10)) {
                let atoms: Vec<MarkAtom> = ws
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| MarkAtom { mark: vec![i as f64 * 0.5 - 1.0], weight: w, rho: 0.0 })
                    .collect();
                let mm = MarkMeasure::new(atoms.clone()).unwrap();
                let r = |e: &[f64]| 1.0 + e[0].abs();
                let brute: f64 = atoms.iter().map(|a| a.weight * r(&a.mark).powi(2)).sum();
                prop_assert!((mm.l2_norm(r) - brute.sqrt()).abs() <= 1e-12);
            }
        }
    }
}
