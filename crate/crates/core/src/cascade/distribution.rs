use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ClassifierModel, Predictor};

use super::FragmentImages;

/// What the identification network says about one individual fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityDistribution {
    /// Number of images whose argmax is each identity.
    pub frequencies: Vec<u32>,
    pub p1: Vec<f64>,
    pub certainty: f64,
}

/// `P1(i) = 2^(L_i) / sum_j 2^(L_j)`, evaluated with the exponents shifted
/// by the maximum.
pub fn p1_from_frequencies(freq: &[u32]) -> Vec<f64> {
    let max = freq.iter().copied().max().unwrap_or(0) as f64;
    let mut p: Vec<f64> = freq.iter().map(|&l| (l as f64 - max).exp2()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Indices of the largest and second-largest entries; ties resolve to the
/// lower index.
pub fn top_two(p: &[f64]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    (idx[0], *idx.get(1).unwrap_or(&idx[0]))
}

/// `(med(S_a) P1(a) - med(S_b) P1(b)) / (P1(a) + P1(b))` with `a`, `b` the
/// two most probable identities. `median_of(j)` is the median softmax value
/// over images whose argmax is `j` (0 when there are none).
pub fn certainty(p1: &[f64], median_of: impl Fn(usize) -> f64) -> f64 {
    let (a, b) = top_two(p1);
    if a == b {
        return median_of(a);
    }
    (median_of(a) * p1[a] - median_of(b) * p1[b]) / (p1[a] + p1[b])
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds the distribution from per-image (argmax, softmax value) records.
pub fn distribution_from_records(records: &[(usize, f64)], n_classes: usize) -> IdentityDistribution {
    let mut frequencies = vec![0u32; n_classes];
    for &(c, _) in records {
        frequencies[c] += 1;
    }
    let p1 = p1_from_frequencies(&frequencies);
    let certainty = certainty(&p1, |j| {
        let mut s: Vec<f64> = records.iter().filter(|r| r.0 == j).map(|r| r.1).collect();
        median(&mut s)
    });
    IdentityDistribution {
        frequencies,
        p1,
        certainty,
    }
}

/// Runs the model over every image of fragment `f`.
pub fn identify_fragment(model: &ClassifierModel, images: &FragmentImages, f: usize) -> IdentityDistribution {
    let mut pred = Predictor::new(model);
    let records: Vec<(usize, f64)> = images
        .fragment(f)
        .map(|img| {
            let p = pred.predict(img);
            let c = argmax(p);
            (c, p[c])
        })
        .collect();
    distribution_from_records(&records, model.n_classes)
}

impl IdentityDistribution {
    /// Distribution of a fragment whose identity is fixed.
    pub fn one_hot(identity: usize, n_classes: usize) -> Self {
        let mut p1 = vec![0.0; n_classes];
        p1[identity] = 1.0;
        Self {
            frequencies: vec![0; n_classes],
            p1,
            certainty: 1.0,
        }
    }

    pub fn max_p1(&self) -> f64 {
        self.p1.iter().copied().fold(0.0, f64::max)
    }

    pub fn best(&self) -> usize {
        top_two(&self.p1).0
    }
}
