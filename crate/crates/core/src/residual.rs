//! Identification of the fragments the cascade left unassigned, using
//! probabilities corrected for coexistence.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cascade::top_two;

/// `P2(F, i) ∝ P1(F, i) * prod_{G coexisting} (1 - P1(G, i))`.
///
/// Evaluated in log space so long products do not underflow. Returns
/// `None` (unidentifiable) when every identity is excluded.
pub fn compute_p2<'a>(p1: &[f64], coexisting: impl IntoIterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut logs: Vec<f64> = p1.iter().map(|p| p.ln()).collect();
    for other in coexisting {
        for (l, q) in logs.iter_mut().zip(other) {
            *l += (1.0 - q).ln();
        }
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return None;
    }
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Some(p)
}

/// `P2(F, a) / P2(F, b)` with `a`, `b` the two most probable identities
/// under P1. Infinite when `P2(F, b) = 0`.
pub fn p2_certainty(p2: &[f64], p1: &[f64]) -> f64 {
    let (a, b) = top_two(p1);
    if p2[b] == 0.0 {
        f64::INFINITY
    } else {
        p2[a] / p2[b]
    }
}

/// How a fragment got (or failed to get) its identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Accumulated(usize),
    Residual(usize),
    /// Tie in the maximum of P2, or every identity excluded.
    Unidentified,
}

impl Assignment {
    pub fn identity(&self) -> Option<usize> {
        match *self {
            Assignment::Accumulated(i) | Assignment::Residual(i) => Some(i),
            Assignment::Unidentified => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualOutcome {
    pub assignments: Vec<Assignment>,
    /// Final P2 of every fragment (all zeros when unidentifiable);
    /// accumulated fragments are one-hot.
    pub p2: Vec<Vec<f64>>,
}

impl ResidualOutcome {
    pub fn identities(&self) -> Vec<Option<usize>> {
        self.assignments.iter().map(|a| a.identity()).collect()
    }
}

#[derive(PartialEq)]
struct Entry {
    cert: f64,
    fragment: usize,
    version: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        self.cert
            .total_cmp(&o.cert)
            .then(o.fragment.cmp(&self.fragment))
            .then(self.version.cmp(&o.version))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Unique position of the maximum, `None` on an exact tie.
fn unique_argmax(p: &[f64]) -> Option<usize> {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut it = p.iter().enumerate().filter(|(_, &v)| v == max);
    let first = it.next()?.0;
    it.next().is_none().then_some(first)
}

/// Assigns identities in decreasing order of P2 certainty.
///
/// `p1` holds the network's P1 of every fragment, `fixed` the identities of
/// accumulated fragments. After each assignment the fragment's P1 becomes
/// one-hot and its coexisting fragments are re-evaluated; a fragment that
/// could not be identified is retried whenever a neighbour is assigned.
pub fn residual_identify(p1: &[Vec<f64>], fixed: &[Option<usize>], coexist: &[Vec<usize>]) -> ResidualOutcome {
    let nf = p1.len();
    let n = p1.first().map_or(0, Vec::len);
    let mut effective: Vec<Vec<f64>> = (0..nf)
        .map(|f| match fixed[f] {
            Some(i) => one_hot(i, n),
            None => p1[f].clone(),
        })
        .collect();
    let mut assignments: Vec<Assignment> = (0..nf)
        .map(|f| match fixed[f] {
            Some(i) => Assignment::Accumulated(i),
            None => Assignment::Unidentified,
        })
        .collect();
    let p2_of = |f: usize, effective: &[Vec<f64>]| {
        compute_p2(&p1[f], coexist[f].iter().map(|&g| effective[g].as_slice()))
    };
    let mut version = vec![0u32; nf];
    let mut heap = BinaryHeap::new();
    let push = |f: usize, effective: &[Vec<f64>], version: &[u32], heap: &mut BinaryHeap<Entry>| {
        let cert = match p2_of(f, effective) {
            Some(p2) => p2_certainty(&p2, &p1[f]),
            None => f64::NEG_INFINITY,
        };
        heap.push(Entry {
            cert,
            fragment: f,
            version: version[f],
        });
    };
    for f in 0..nf {
        if fixed[f].is_none() {
            push(f, &effective, &version, &mut heap);
        }
    }
    while let Some(e) = heap.pop() {
        let f = e.fragment;
        if e.version != version[f] || assignments[f] != Assignment::Unidentified {
            continue;
        }
        let Some(p2) = p2_of(f, &effective) else { continue };
        let Some(id) = unique_argmax(&p2) else { continue };
        assignments[f] = Assignment::Residual(id);
        effective[f] = one_hot(id, n);
        for &g in &coexist[f] {
            if assignments[g] == Assignment::Unidentified {
                version[g] += 1;
                push(g, &effective, &version, &mut heap);
            }
        }
    }
    let p2 = (0..nf)
        .map(|f| match fixed[f] {
            Some(i) => one_hot(i, n),
            None => p2_of(f, &effective).unwrap_or_else(|| vec![0.0; n]),
        })
        .collect();
    ResidualOutcome { assignments, p2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p2_examples() {
        let p = compute_p2(&[0.9, 0.1], [&[0.8, 0.2][..]]).unwrap();
        assert!((p[0] - 0.18 / 0.26).abs() < 1e-12);
        assert!((p[1] - 0.08 / 0.26).abs() < 1e-12);
        assert_eq!(compute_p2(&[0.7, 0.3], std::iter::empty()).unwrap(), vec![0.7, 0.3]);
        let p = compute_p2(&[0.5, 0.5], [&[1.0, 0.0][..]]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
        assert!(compute_p2(&[0.5, 0.5], [&[1.0, 0.0][..], &[0.0, 1.0][..]]).is_none());
    }

    #[test]
    fn certainty_examples() {
        assert_eq!(p2_certainty(&[0.8, 0.2], &[0.7, 0.3]), 4.0);
        assert_eq!(p2_certainty(&[0.5, 0.5], &[0.5, 0.5]), 1.0);
        assert_eq!(p2_certainty(&[1.0, 0.0], &[0.7, 0.3]), f64::INFINITY);
    }

    #[test]
    fn higher_certainty_goes_first_and_excludes_identity() {
        // both prefer identity 0; fragment 0 is far more certain
        let p1 = vec![vec![0.9, 0.09, 0.01], vec![0.6, 0.35, 0.05]];
        let coexist = vec![vec![1], vec![0]];
        let r = residual_identify(&p1, &[None, None], &coexist);
        assert_eq!(r.assignments[0], Assignment::Residual(0));
        assert_eq!(r.assignments[1], Assignment::Residual(1));
        assert_eq!(r.p2[1][0], 0.0);
    }

    #[test]
    fn exact_tie_stays_unidentified() {
        let r = residual_identify(&[vec![0.5, 0.5]], &[None], &[vec![]]);
        assert_eq!(r.assignments[0], Assignment::Unidentified);
    }

    #[test]
    fn lone_fragment_takes_p1_argmax() {
        let r = residual_identify(&[vec![0.2, 0.7, 0.1]], &[None], &[vec![]]);
        assert_eq!(r.assignments[0], Assignment::Residual(1));
    }

    #[test]
    fn accumulated_neighbours_are_excluded() {
        let p1 = vec![vec![1.0, 0.0], vec![0.8, 0.2]];
        let r = residual_identify(&p1, &[Some(0), None], &[vec![1], vec![0]]);
        assert_eq!(r.assignments[1], Assignment::Residual(1));
        assert_eq!(r.assignments[0], Assignment::Accumulated(0));
    }

    #[test]
    fn rerun_is_a_fixed_point() {
        let p1 = vec![
            vec![0.5, 0.3, 0.2],
            vec![0.4, 0.4, 0.2],
            vec![0.45, 0.45, 0.1],
            vec![0.1, 0.2, 0.7],
        ];
        let coexist = vec![vec![1, 2], vec![0, 2], vec![0, 1, 3], vec![2]];
        let r = residual_identify(&p1, &[None; 4], &coexist);
        let fixed = r.identities();
        let again = residual_identify(&p1, &fixed, &coexist);
        assert_eq!(again.identities(), fixed);
    }
}
