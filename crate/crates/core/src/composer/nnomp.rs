//! Nonnegative orthogonal matching pursuit over a dictionary of sample vectors.
//!
//! Greedy loop: pick the unused atom whose normalized correlation with the
//! current residual is largest and positive (ties go to the lowest index),
//! re-fit all coefficients on the enlarged support by nonnegative least
//! squares, drop atoms whose coefficient is zero. Stops at `k` atoms, when no
//! atom correlates positively, or when the residual improves by less than
//! [`MIN_IMPROVEMENT`].

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::numkernel::{l2_norm, solve_spd};

pub const MIN_IMPROVEMENT: f64 = 1e-8;
/// Correlations at or below this count as non-positive.
pub const CORRELATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RelatedSet {
    /// Dictionary rows in ascending order.
    pub indices: Vec<usize>,
    /// Nonnegative reconstruction weights aligned with `indices`.
    pub weights: Vec<f64>,
    pub residual_norm: f64,
}

impl RelatedSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Per-step record of a pursuit run.
#[derive(Debug, Clone, PartialEq)]
pub struct PursuitStep {
    pub selected: usize,
    pub support: RelatedSet,
}

/// Lawson–Hanson active-set NNLS: `min ‖target − Σ_j x_j atoms[j]‖`, `x ≥ 0`.
/// `atoms` holds one atom per row.
pub fn nnls(atoms: ArrayView2<f64>, target: ArrayView1<f64>) -> Array1<f64> {
    let n = atoms.nrows();
    let gram = atoms.dot(&atoms.t());
    let rhs = atoms.dot(&target);
    let scale = rhs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = 1e-13 * scale;
    let mut x = Array1::<f64>::zeros(n);
    let mut passive = vec![false; n];

    for _outer in 0..3 * n + 3 {
        let w = &rhs - &gram.dot(&x);
        let next = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if w[b] >= w[j] => Some(b),
                _ => Some(j),
            });
        let Some(t) = next else { break };
        passive[t] = true;

        loop {
            let p: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let g = gram.select(ndarray::Axis(0), &p).select(ndarray::Axis(1), &p);
            let r = rhs.select(ndarray::Axis(0), &p);
            let Some(s) = solve_spd(g.view(), r.view()) else {
                // Dependent atom: leave it out.
                passive[t] = false;
                break;
            };
            if s.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in p.iter().enumerate() {
                    x[j] = s[k];
                }
                break;
            }
            let mut step = 1.0f64;
            for (k, &j) in p.iter().enumerate() {
                if s[k] <= 0.0 {
                    step = step.min(x[j] / (x[j] - s[k]));
                }
            }
            for (k, &j) in p.iter().enumerate() {
                x[j] += step * (s[k] - x[j]);
                if x[j] <= 0.0 || (s[k] <= 0.0 && x[j] <= tol) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&b| b) {
                break;
            }
        }
    }
    x
}

fn residual_of(dictionary: ArrayView2<f64>, target: ArrayView1<f64>, idx: &[usize], w: &[f64]) -> f64 {
    let mut r = target.to_owned();
    for (&i, &g) in idx.iter().zip(w) {
        r.scaled_add(-g, &dictionary.row(i));
    }
    l2_norm(r.view())
}

/// Runs the pursuit and returns every accepted step.
pub fn nnomp_traced(target: ArrayView1<f64>, dictionary: ArrayView2<f64>, k: usize) -> Result<Vec<PursuitStep>> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    if dictionary.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if dictionary.ncols() != target.len() {
        return Err(Error::shape("nnomp", target.len(), dictionary.ncols()));
    }
    let norms: Vec<f64> = dictionary.rows().into_iter().map(|r| l2_norm(r)).collect();
    let mut support: Vec<usize> = Vec::new();
    let mut residual = target.to_owned();
    let mut residual_norm = l2_norm(target);
    let mut steps = Vec::new();

    while support.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (j, atom) in dictionary.rows().into_iter().enumerate() {
            if norms[j] == 0.0 || support.contains(&j) {
                continue;
            }
            let c = atom.dot(&residual) / norms[j];
            if c > CORRELATION_TOL && best.is_none_or(|(_, bc)| c > bc) {
                best = Some((j, c));
            }
        }
        let Some((pick, _)) = best else { break };

        let mut candidate = support.clone();
        candidate.push(pick);
        candidate.sort_unstable();
        let sub = dictionary.select(ndarray::Axis(0), &candidate);
        let coef = nnls(sub.view(), target);
        let (kept, kept_w): (Vec<usize>, Vec<f64>) = candidate
            .iter()
            .zip(coef.iter())
            .filter(|(_, &g)| g > 0.0)
            .map(|(&i, &g)| (i, g))
            .unzip();
        let new_norm = residual_of(dictionary, target, &kept, &kept_w);
        if residual_norm - new_norm < MIN_IMPROVEMENT {
            break;
        }
        residual = target.to_owned();
        for (&i, &g) in kept.iter().zip(&kept_w) {
            residual.scaled_add(-g, &dictionary.row(i));
        }
        residual_norm = new_norm;
        support = kept.clone();
        steps.push(PursuitStep {
            selected: pick,
            support: RelatedSet {
                indices: kept,
                weights: kept_w,
                residual_norm,
            },
        });
    }
    Ok(steps)
}

/// Related set of at most `k` dictionary rows reconstructing `target`.
pub fn nnomp(target: ArrayView1<f64>, dictionary: ArrayView2<f64>, k: usize) -> Result<RelatedSet> {
    let steps = nnomp_traced(target, dictionary, k)?;
    Ok(match steps.into_iter().last() {
        Some(step) => step.support,
        None => RelatedSet {
            indices: Vec::new(),
            weights: Vec::new(),
            residual_norm: l2_norm(target),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exact_atom_is_selected() {
        let dict = array![[0.6, 0.8, 0.0], [1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
        let q = nnomp(array![0.0, 0.6, 0.8].view(), dict.view(), 3).unwrap();
        assert_eq!(q.indices, vec![2]);
        assert!((q.weights[0] - 1.0).abs() < 1e-12);
        assert!(q.residual_norm < 1e-12);
    }

    #[test]
    fn orthogonal_atoms() {
        let dict = array![[1.0, 0.0], [0.0, 1.0]];
        let q = nnomp(array![0.6, 0.8].view(), dict.view(), 2).unwrap();
        assert_eq!(q.indices, vec![0, 1]);
        assert!((q.weights[0] - 0.6).abs() < 1e-12 && (q.weights[1] - 0.8).abs() < 1e-12);
        assert!(q.residual_norm < 1e-12);
        let q1 = nnomp(array![0.6, 0.8].view(), dict.view(), 1).unwrap();
        assert_eq!(q1.indices, vec![1]);
        assert!((q1.residual_norm - 0.6).abs() < 1e-12);
    }

    #[test]
    fn nonnegativity_bars_selection() {
        let q = nnomp(array![1.0, 0.0].view(), array![[-1.0, 0.0]].view(), 1).unwrap();
        assert!(q.is_empty());
        assert_eq!(q.residual_norm, 1.0);
    }

    #[test]
    fn duplicate_atoms_take_lowest_index() {
        let dict = array![[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]];
        let q = nnomp(array![1.0, 0.0].view(), dict.view(), 3).unwrap();
        assert_eq!(q.indices, vec![1]);
    }

    #[test]
    fn errors() {
        assert!(nnomp(array![1.0, 0.0].view(), array![[1.0, 0.0, 0.0]].view(), 1).is_err());
        assert!(nnomp(array![1.0].view(), ndarray::Array2::zeros((0, 1)).view(), 1).is_err());
        assert!(nnomp(array![1.0].view(), array![[1.0]].view(), 0).is_err());
    }

    #[test]
    fn nnls_clips_negative_directions() {
        // Best unconstrained fit uses a negative weight on the second atom.
        let atoms = array![[1.0, 0.0], [1.0, 1.0]];
        let x = nnls(atoms.view(), array![1.0, -1.0].view());
        assert_eq!(x[1], 0.0);
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use ndarray::Array2;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Array2<f64>, Vec<f64>, usize)> {
            (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(m, d, k)| {
                (
                    proptest::collection::vec(0.0f64..1.0, m * d),
                    proptest::collection::vec(-1.0f64..1.0, d),
                    Just((m, d, k)),
                )
                    .prop_map(|(atoms, y, (m, d, k))| (Array2::from_shape_vec((m, d), atoms).unwrap(), y, k))
            })
        }

        proptest! {
            #[test]
            fn pursuit_invariants((dict, y, k) in instance()) {
                let target = Array1::from(y);
                let steps = nnomp_traced(target.view(), dict.view(), k).unwrap();
                let mut prev = l2_norm(target.view());
                for step in &steps {
                    let q = &step.support;
                    prop_assert!(q.len() <= k);
                    prop_assert!(q.indices.windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(q.weights.iter().all(|&w| w >= 0.0));
                    prop_assert!(q.residual_norm <= prev + 1e-12);
                    prev = q.residual_norm;
                }
                let q = nnomp(target.view(), dict.view(), k).unwrap();
                match steps.last() {
                    Some(last) => prop_assert_eq!(&q, &last.support),
                    None => prop_assert!(q.is_empty()),
                }
            }
        }
    }
}
