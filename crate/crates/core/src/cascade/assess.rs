use crate::blobgraph::Fragment;

use super::IdentityDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    NotCertain,
    NonConsistent,
    NotUnique,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GlobalAssessment {
    /// Temporary identities of the members that were not yet assigned.
    Accepted(Vec<(usize, usize)>),
    Rejected(RejectReason),
}

fn holds(assigned: &[Option<usize>], temp: &[(usize, usize)], f: usize, id: usize) -> bool {
    assigned[f] == Some(id) || temp.iter().any(|&(t, i)| t == f && i == id)
}

fn by_confidence(ids: &mut [usize], dists: &[Option<IdentityDistribution>]) {
    let max_p1 = |f: usize| dists[f].as_ref().map_or(0.0, |d| d.max_p1());
    ids.sort_by(|&a, &b| max_p1(b).total_cmp(&max_p1(a)).then(a.cmp(&b)));
}

/// Quality check of one global fragment.
///
/// Members already in `assigned` (accumulated, or accepted earlier in this
/// round) keep their identity. Every other member must have certainty of at
/// least `threshold`; then, from the most to the least confident, each takes
/// the argmax of its P1 provided that maximum exceeds `1 / |F|` and no
/// coexisting fragment already holds that identity. Finally all identities
/// in the global fragment must differ.
pub fn assess_global(
    members: &[usize],
    fragments: &[Fragment],
    dists: &[Option<IdentityDistribution>],
    assigned: &[Option<usize>],
    coexist: &[Vec<usize>],
    threshold: f64,
) -> GlobalAssessment {
    let mut open: Vec<usize> = members.iter().copied().filter(|&m| assigned[m].is_none()).collect();
    for &m in &open {
        match &dists[m] {
            Some(d) if d.certainty >= threshold => {}
            _ => return GlobalAssessment::Rejected(RejectReason::NotCertain),
        }
    }
    by_confidence(&mut open, dists);
    let mut temp: Vec<(usize, usize)> = Vec::with_capacity(open.len());
    for m in open {
        let d = dists[m].as_ref().expect("checked above");
        let id = d.best();
        let len = fragments[m].len().max(1) as f64;
        if d.max_p1() <= 1.0 / len || coexist[m].iter().any(|&o| holds(assigned, &temp, o, id)) {
            return GlobalAssessment::Rejected(RejectReason::NonConsistent);
        }
        temp.push((m, id));
    }
    let mut ids: Vec<usize> = members
        .iter()
        .map(|&m| {
            assigned[m].unwrap_or_else(|| temp.iter().find(|t| t.0 == m).expect("temporary id").1)
        })
        .collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return GlobalAssessment::Rejected(RejectReason::NotUnique);
    }
    GlobalAssessment::Accepted(temp)
}

/// Single fragments accumulated on their own: certainty above `threshold`,
/// at least half of the coexisting fragments already assigned, and the
/// argmax identity not held by any coexisting fragment. Candidates are the
/// fragments with a distribution; the most confident go first.
pub fn partial_candidates(
    fragments: &[Fragment],
    dists: &[Option<IdentityDistribution>],
    assigned: &[Option<usize>],
    coexist: &[Vec<usize>],
    threshold: f64,
) -> Vec<(usize, usize)> {
    let mut cands: Vec<usize> = (0..fragments.len())
        .filter(|&f| assigned[f].is_none())
        .filter(|&f| dists[f].as_ref().is_some_and(|d| d.certainty > threshold))
        .collect();
    by_confidence(&mut cands, dists);
    let mut out: Vec<(usize, usize)> = Vec::new();
    for f in cands {
        let n_assigned = coexist[f]
            .iter()
            .filter(|&&o| assigned[o].is_some() || out.iter().any(|t| t.0 == o))
            .count();
        if 2 * n_assigned < coexist[f].len() {
            continue;
        }
        let id = dists[f].as_ref().unwrap().best();
        if coexist[f].iter().any(|&o| holds(assigned, &out, o, id)) {
            continue;
        }
        out.push((f, id));
    }
    out
}
