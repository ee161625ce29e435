//! The training and identification cascade.
//!
//! Protocol 1 trains on the global fragment whose shortest member travelled
//! the farthest and checks every other global fragment. Protocol 2 grows the
//! training set by accumulating acceptable global fragments (and, past one
//! half coverage, single fragments). Protocol 3 pretrains the feature stage
//! over many global fragments and retries the accumulation with it frozen.

mod assess;
mod distribution;

pub use assess::{assess_global, partial_candidates, GlobalAssessment, RejectReason};
pub use distribution::{
    certainty, distribution_from_records, identify_fragment, p1_from_frequencies, top_two, IdentityDistribution,
};

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobgraph::{coexistence_lists, BlobStore, Fragment, GlobalFragment};
use crate::classifier::{
    seeded_rng, split_train_val, train, ClassifierError, ClassifierModel, LabeledDataset, TrainConfig, TrainOutcome,
    TrainReport,
};
use crate::imageprep::preprocess_identification;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("no global fragment found, identities cannot be learnt")]
    NoGlobalFragment,
    #[error("identification network diverged (protocol {protocol}, iteration {iteration})")]
    Diverged { protocol: u8, iteration: usize },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub train: TrainConfig,
    pub hidden: usize,
    pub train_fraction: f64,
    /// Minimum certainty of a fragment in an acceptable global fragment.
    pub certainty_threshold: f64,
    /// Protocol 1 succeeds at this fraction of global-fragment images.
    pub protocol1_coverage: f64,
    /// Protocol 2 (and each parachute attempt) succeeds at this fraction.
    pub protocol2_coverage: f64,
    /// Accumulation stops once this fraction is accumulated.
    pub accumulation_target: f64,
    /// Single-fragment accumulation starts above this fraction.
    pub partial_accumulation_threshold: f64,
    pub max_images_per_identity: usize,
    /// Of which at most this many come from earlier iterations.
    pub old_images_per_identity: usize,
    /// Pretraining stops once this fraction of global-fragment images has
    /// been used.
    pub pretrain_coverage: f64,
    pub parachute_attempts: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::identification(),
            hidden: crate::classifier::DEFAULT_HIDDEN,
            train_fraction: 0.9,
            certainty_threshold: 0.1,
            protocol1_coverage: 0.9995,
            protocol2_coverage: 0.90,
            accumulation_target: 0.9995,
            partial_accumulation_threshold: 0.5,
            max_images_per_identity: 3000,
            old_images_per_identity: 1800,
            pretrain_coverage: 0.95,
            parachute_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolStatus {
    Protocol1Done,
    Protocol2Done,
    Protocol3Done,
    /// Every Protocol 3 attempt stayed below the Protocol 2 threshold; the
    /// best one is used.
    Degraded,
}

/// One line of the cascade log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeLogEntry {
    pub protocol: u8,
    pub iteration: usize,
    pub images_accumulated: usize,
    pub coverage: f64,
    pub train_epochs: usize,
    pub val_accuracy: f64,
}

/// Identification images of every individual fragment, one contiguous
/// buffer per fragment.
#[derive(Debug, Clone, Default)]
pub struct FragmentImages {
    pub dim: usize,
    images: Vec<Vec<f32>>,
}

impl FragmentImages {
    pub fn build(store: &BlobStore, fragments: &[Fragment], side: usize) -> Self {
        let images = fragments
            .iter()
            .map(|f| {
                let mut buf = Vec::with_capacity(f.len() * side * side);
                for &b in &f.blobs {
                    buf.extend_from_slice(&preprocess_identification(store.blob(b), side).values);
                }
                buf
            })
            .collect();
        Self {
            dim: side * side,
            images,
        }
    }

    pub fn from_raw(dim: usize, images: Vec<Vec<f32>>) -> Self {
        assert!(images.iter().all(|v| v.len() % dim == 0), "whole images only");
        Self { dim, images }
    }

    pub fn count(&self, f: usize) -> usize {
        self.images[f].len() / self.dim
    }

    pub fn image(&self, f: usize, k: usize) -> &[f32] {
        &self.images[f][k * self.dim..(k + 1) * self.dim]
    }

    pub fn fragment(&self, f: usize) -> impl Iterator<Item = &[f32]> + '_ {
        self.images[f].chunks_exact(self.dim)
    }
}

/// Everything the cascade reads.
pub struct CascadeInput<'a> {
    pub fragments: &'a [Fragment],
    pub globals: &'a [GlobalFragment],
    pub images: &'a FragmentImages,
    /// Distance travelled by each fragment.
    pub distances: &'a [f64],
    pub n_animals: usize,
}

#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub status: ProtocolStatus,
    pub model: ClassifierModel,
    /// Fixed identity of each accumulated fragment.
    pub identities: Vec<Option<usize>>,
    /// Final-model distribution of every fragment; accumulated fragments
    /// are one-hot.
    pub distributions: Vec<IdentityDistribution>,
    /// Accumulated share of global-fragment images.
    pub coverage: f64,
    /// Index of the first global fragment of the distance ordering.
    pub first_global: usize,
    pub log: Vec<CascadeLogEntry>,
    /// Coverage of each Protocol 3 attempt.
    pub attempt_coverages: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Global fragments sorted by the minimum distance travelled by their
/// members, farthest first; ties go to the earlier core frame.
pub fn sigma_order(globals: &[GlobalFragment], distances: &[f64]) -> Vec<usize> {
    let score = |g: &GlobalFragment| {
        g.members
            .iter()
            .map(|&m| distances[m])
            .fold(f64::INFINITY, f64::min)
    };
    let mut idx: Vec<usize> = (0..globals.len()).collect();
    idx.sort_by(|&a, &b| {
        score(&globals[b])
            .total_cmp(&score(&globals[a]))
            .then(globals[a].core_frame.cmp(&globals[b].core_frame))
            .then(a.cmp(&b))
    });
    idx
}

/// Other global fragments in order of distance between cores.
pub fn assessment_order(globals: &[GlobalFragment], seed: usize) -> Vec<usize> {
    let c0 = globals[seed].core_frame;
    let mut idx: Vec<usize> = (0..globals.len()).filter(|&g| g != seed).collect();
    idx.sort_by_key(|&g| (globals[g].core_frame.abs_diff(c0), globals[g].core_frame, g));
    idx
}

/// Images drawn from (old, new) pools given the per-identity cap and the
/// cap on old images; a short side is topped up from the other.
pub fn split_old_new(old: usize, new: usize, cap: usize, old_cap: usize) -> (usize, usize) {
    if old + new <= cap {
        return (old, new);
    }
    let mut o = old.min(old_cap);
    let n = new.min(cap - o);
    if o + n < cap {
        o = old.min(cap - n);
    }
    (o, n)
}

/// True iff no two coexisting fragments hold the same identity.
pub fn no_duplicated_identities(identities: &[Option<usize>], coexist: &[Vec<usize>]) -> bool {
    identities.iter().enumerate().all(|(f, id)| match id {
        None => true,
        Some(i) => coexist[f].iter().all(|&o| identities[o] != Some(*i)),
    })
}

#[derive(Debug, Clone)]
struct Accumulation {
    identity: Vec<Option<usize>>,
    /// Iteration at which each fragment was accumulated.
    added_at: Vec<Option<usize>>,
    iteration: usize,
    global_images: usize,
}

struct Runner<'a> {
    input: &'a CascadeInput<'a>,
    cfg: &'a CascadeConfig,
    coexist: Vec<Vec<usize>>,
    in_global: Vec<bool>,
    total_global_images: usize,
    log: Vec<CascadeLogEntry>,
    warnings: Vec<String>,
    trainings: u64,
}

impl<'a> Runner<'a> {
    fn new(input: &'a CascadeInput<'a>, cfg: &'a CascadeConfig) -> Self {
        let mut in_global = vec![false; input.fragments.len()];
        for g in input.globals {
            for &m in &g.members {
                in_global[m] = true;
            }
        }
        let total_global_images = (0..input.fragments.len())
            .filter(|&f| in_global[f])
            .map(|f| input.fragments[f].len())
            .sum();
        Self {
            input,
            cfg,
            coexist: coexistence_lists(input.fragments),
            in_global,
            total_global_images,
            log: Vec::new(),
            warnings: Vec::new(),
            trainings: 0,
        }
    }

    fn coverage(&self, images: usize) -> f64 {
        if self.total_global_images == 0 {
            return 0.0;
        }
        images as f64 / self.total_global_images as f64
    }

    fn random_labels(&self, g: usize, salt: u64) -> Vec<(usize, usize)> {
        let members = &self.input.globals[g].members;
        let mut perm: Vec<usize> = (0..self.input.n_animals).collect();
        perm.shuffle(&mut seeded_rng(self.cfg.train.seed.wrapping_add(salt), 20));
        members.iter().copied().zip(perm).collect()
    }

    fn empty_state(&self) -> Accumulation {
        let n = self.input.fragments.len();
        Accumulation {
            identity: vec![None; n],
            added_at: vec![None; n],
            iteration: 0,
            global_images: 0,
        }
    }

    fn commit(&self, acc: &mut Accumulation, items: &[(usize, usize)]) -> usize {
        let mut added = 0;
        for &(f, id) in items {
            if acc.identity[f].is_some() {
                continue;
            }
            acc.identity[f] = Some(id);
            acc.added_at[f] = Some(acc.iteration);
            added += self.input.fragments[f].len();
            if self.in_global[f] {
                acc.global_images += self.input.fragments[f].len();
            }
        }
        added
    }

    /// Training set from accumulated fragments, capped per identity.
    fn dataset(&self, acc: &Accumulation) -> LabeledDataset {
        let n = self.input.n_animals;
        let mut old: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
        let mut new: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
        let latest = acc.added_at.iter().flatten().copied().max();
        for (f, id) in acc.identity.iter().enumerate() {
            let Some(id) = *id else { continue };
            let pool = if acc.added_at[f] == latest {
                &mut new[id]
            } else {
                &mut old[id]
            };
            pool.extend((0..self.input.images.count(f) as u32).map(|k| (f as u32, k)));
        }
        let mut rng = seeded_rng(self.cfg.train.seed.wrapping_add(self.trainings), 21);
        let mut ds = LabeledDataset::new(self.input.images.dim, n);
        for id in 0..n {
            let (o, nw) = split_old_new(
                old[id].len(),
                new[id].len(),
                self.cfg.max_images_per_identity,
                self.cfg.old_images_per_identity,
            );
            for (pool, k) in [(&old[id], o), (&new[id], nw)] {
                let mut picks = index::sample(&mut rng, pool.len(), k).into_vec();
                picks.sort_unstable();
                for p in picks {
                    let (f, i) = pool[p];
                    ds.push(self.input.images.image(f as usize, i as usize), id)
                        .expect("image size");
                }
            }
        }
        ds
    }

    fn train_on(
        &mut self,
        model: &mut ClassifierModel,
        ds: &LabeledDataset,
        freeze: bool,
        protocol: u8,
        iteration: usize,
    ) -> Result<TrainReport, CascadeError> {
        self.trainings += 1;
        let (t, v) = split_train_val(ds, self.cfg.train_fraction, self.cfg.train.seed.wrapping_add(self.trainings))?;
        let tc = TrainConfig {
            seed: self.cfg.train.seed.wrapping_add(self.trainings),
            freeze_features: freeze,
            ..self.cfg.train.clone()
        };
        let report = train(model, &t, &v, &tc)?;
        match report.outcome {
            TrainOutcome::Diverged => return Err(CascadeError::Diverged { protocol, iteration }),
            TrainOutcome::EpochCap => {
                let msg = format!(
                    "identification training hit the {}-epoch cap (protocol {protocol}, iteration {iteration})",
                    tc.max_epochs
                );
                warn!("{msg}");
                self.warnings.push(msg);
            }
            TrainOutcome::Stopped(_) => {}
        }
        info!(
            "protocol {protocol} iteration {iteration}: {} images, {} epochs, validation accuracy {:.4}",
            ds.len(),
            report.history.len(),
            report.validation.accuracy
        );
        Ok(report)
    }

    fn record(&mut self, protocol: u8, acc: &Accumulation, report: &TrainReport) {
        self.log.push(CascadeLogEntry {
            protocol,
            iteration: acc.iteration,
            images_accumulated: acc.global_images,
            coverage: self.coverage(acc.global_images),
            train_epochs: report.history.len(),
            val_accuracy: report.validation.accuracy,
        });
    }

    /// Distributions of the unaccumulated global-fragment members.
    fn identify_open(&self, model: &ClassifierModel, acc: &Accumulation) -> Vec<Option<IdentityDistribution>> {
        (0..self.input.fragments.len())
            .map(|f| {
                (self.in_global[f] && acc.identity[f].is_none())
                    .then(|| identify_fragment(model, self.input.images, f))
            })
            .collect()
    }

    /// Assesses global fragments around `seed`; returns the temporary
    /// identities of the acceptable ones.
    fn assess_round(
        &self,
        model: &ClassifierModel,
        acc: &Accumulation,
        seed: usize,
    ) -> (Vec<(usize, usize)>, Vec<Option<IdentityDistribution>>) {
        let dists = self.identify_open(model, acc);
        let mut assigned = acc.identity.clone();
        let mut accepted = Vec::new();
        let mut n_ok = 0;
        for g in assessment_order(self.input.globals, seed) {
            let r = assess_global(
                &self.input.globals[g].members,
                self.input.fragments,
                &dists,
                &assigned,
                &self.coexist,
                self.cfg.certainty_threshold,
            );
            if let GlobalAssessment::Accepted(items) = r {
                n_ok += 1;
                for &(f, id) in &items {
                    assigned[f] = Some(id);
                }
                accepted.extend(items);
            }
        }
        info!(
            "{n_ok} of {} global fragments acceptable",
            self.input.globals.len().saturating_sub(1)
        );
        (accepted, dists)
    }

    /// Commits pending globals (and single fragments once past the partial
    /// threshold), retrains and reassesses until nothing is added or the
    /// target is reached.
    fn accumulate(
        &mut self,
        model: &mut ClassifierModel,
        acc: &mut Accumulation,
        mut pending: Vec<(usize, usize)>,
        mut dists: Vec<Option<IdentityDistribution>>,
        seed: usize,
        protocol: u8,
        freeze: bool,
    ) -> Result<(), CascadeError> {
        loop {
            acc.iteration += 1;
            let mut added = self.commit(acc, &pending);
            if self.coverage(acc.global_images) > self.cfg.partial_accumulation_threshold {
                let partial = partial_candidates(
                    self.input.fragments,
                    &dists,
                    &acc.identity,
                    &self.coexist,
                    self.cfg.certainty_threshold,
                );
                if !partial.is_empty() {
                    info!("partial accumulation of {} fragments", partial.len());
                }
                added += self.commit(acc, &partial);
            }
            debug_assert!(no_duplicated_identities(&acc.identity, &self.coexist));
            if added == 0 || self.coverage(acc.global_images) >= self.cfg.accumulation_target {
                break;
            }
            let ds = self.dataset(acc);
            let report = self.train_on(model, &ds, freeze, protocol, acc.iteration)?;
            self.record(protocol, acc, &report);
            (pending, dists) = self.assess_round(model, acc, seed);
        }
        Ok(())
    }

    fn seeded_attempt(
        &mut self,
        model: &mut ClassifierModel,
        seed_global: usize,
        protocol: u8,
        freeze: bool,
    ) -> Result<(Accumulation, Vec<(usize, usize)>, Vec<Option<IdentityDistribution>>), CascadeError> {
        let mut acc = self.empty_state();
        let labels = self.random_labels(seed_global, seed_global as u64);
        self.commit(&mut acc, &labels);
        let ds = self.dataset(&acc);
        let report = self.train_on(model, &ds, freeze, protocol, 0)?;
        self.record(protocol, &acc, &report);
        let (pending, dists) = self.assess_round(model, &acc, seed_global);
        Ok((acc, pending, dists))
    }

    fn pretrain(&mut self, model: &mut ClassifierModel, order: &[usize]) -> Result<(), CascadeError> {
        let mut used = vec![false; self.input.fragments.len()];
        let mut used_images = 0;
        for (k, &g) in order.iter().enumerate() {
            let mut acc = self.empty_state();
            let labels = self.random_labels(g, 1000 + k as u64);
            self.commit(&mut acc, &labels);
            model.reinit_classification(self.cfg.train.seed.wrapping_add(5000 + k as u64));
            let ds = self.dataset(&acc);
            let report = self.train_on(model, &ds, false, 3, k)?;
            for &m in &self.input.globals[g].members {
                if !used[m] {
                    used[m] = true;
                    used_images += self.input.fragments[m].len();
                }
            }
            acc.global_images = used_images;
            acc.iteration = k;
            self.record(3, &acc, &report);
            if self.coverage(used_images) >= self.cfg.pretrain_coverage {
                info!("pretraining used {} global fragments", k + 1);
                break;
            }
        }
        Ok(())
    }

    fn finish(
        self,
        status: ProtocolStatus,
        model: ClassifierModel,
        acc: Accumulation,
        first_global: usize,
        attempt_coverages: Vec<f64>,
    ) -> CascadeOutcome {
        let n = self.input.n_animals;
        let distributions = (0..self.input.fragments.len())
            .map(|f| match acc.identity[f] {
                Some(id) => IdentityDistribution::one_hot(id, n),
                None => identify_fragment(&model, self.input.images, f),
            })
            .collect();
        CascadeOutcome {
            status,
            coverage: self.coverage(acc.global_images),
            model,
            identities: acc.identity,
            distributions,
            first_global,
            log: self.log,
            attempt_coverages,
            warnings: self.warnings,
        }
    }
}

/// Runs protocols 1 to 3 as needed.
pub fn run_cascade(input: &CascadeInput<'_>, cfg: &CascadeConfig) -> Result<CascadeOutcome, CascadeError> {
    if input.globals.is_empty() {
        return Err(CascadeError::NoGlobalFragment);
    }
    let mut r = Runner::new(input, cfg);
    let order = sigma_order(input.globals, input.distances);
    let first = order[0];
    let n = input.n_animals;
    let new_model = |salt: u64| ClassifierModel::new(input.images.dim, cfg.hidden, n, cfg.train.seed.wrapping_add(salt));

    // protocol 1
    let mut model = new_model(0);
    let (mut acc, pending, dists) = r.seeded_attempt(&mut model, first, 1, false)?;
    let pending_images: usize = pending
        .iter()
        .filter(|(f, _)| r.in_global[*f])
        .map(|(f, _)| input.fragments[*f].len())
        .sum();
    let p1_coverage = r.coverage(acc.global_images + pending_images);
    info!("protocol 1 coverage {p1_coverage:.4}");
    if p1_coverage >= cfg.protocol1_coverage {
        acc.iteration += 1;
        r.commit(&mut acc, &pending);
        return Ok(r.finish(ProtocolStatus::Protocol1Done, model, acc, first, Vec::new()));
    }

    // protocol 2
    r.accumulate(&mut model, &mut acc, pending, dists, first, 2, false)?;
    let p2_coverage = r.coverage(acc.global_images);
    info!("protocol 2 coverage {p2_coverage:.4}");
    if p2_coverage >= cfg.protocol2_coverage {
        return Ok(r.finish(ProtocolStatus::Protocol2Done, model, acc, first, Vec::new()));
    }

    // protocol 3: everything learnt so far is discarded
    let mut pretrained = new_model(1);
    r.pretrain(&mut pretrained, &order)?;
    let mut attempts: Vec<(ClassifierModel, Accumulation, f64)> = Vec::new();
    for (k, &seed_global) in order.iter().take(cfg.parachute_attempts.max(1)).enumerate() {
        let mut m = pretrained.clone();
        m.reinit_classification(cfg.train.seed.wrapping_add(9000 + k as u64));
        let (mut a, pending, dists) = r.seeded_attempt(&mut m, seed_global, 3, true)?;
        r.accumulate(&mut m, &mut a, pending, dists, seed_global, 3, true)?;
        let c = r.coverage(a.global_images);
        info!("protocol 3 attempt {} coverage {c:.4}", k + 1);
        attempts.push((m, a, c));
        if c >= cfg.protocol2_coverage {
            break;
        }
    }
    let coverages: Vec<f64> = attempts.iter().map(|a| a.2).collect();
    let best = (0..attempts.len())
        .max_by(|&a, &b| coverages[a].total_cmp(&coverages[b]).then(b.cmp(&a)))
        .expect("at least one attempt");
    let (m, a, c) = attempts.swap_remove(best);
    let status = if c >= cfg.protocol2_coverage {
        ProtocolStatus::Protocol3Done
    } else {
        let msg = format!("all protocol 3 attempts below target, coverages {coverages:?}");
        warn!("{msg}");
        r.warnings.push(msg);
        ProtocolStatus::Degraded
    };
    Ok(r.finish(status, m, a, first, coverages))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blobgraph::FragmentKind;

    fn frag(id: usize, s: usize, e: usize) -> Fragment {
        Fragment {
            id,
            kind: FragmentKind::Individual,
            blobs: (s..=e).collect(),
            start_frame: s,
            end_frame: e,
        }
    }

    #[test]
    fn sigma_examples() {
        let g = vec![
            GlobalFragment {
                members: vec![0, 1],
                core_frame: 0,
            },
            GlobalFragment {
                members: vec![2, 3],
                core_frame: 5,
            },
        ];
        let d = [10.0, 5.0, 8.0, 7.0];
        assert_eq!(sigma_order(&g, &d), vec![1, 0]);
        assert_eq!(sigma_order(&g[..1], &d), vec![0]);
        let tie = [5.0, 5.0, 5.0, 5.0];
        assert_eq!(sigma_order(&g, &tie), vec![0, 1]);
    }

    #[test]
    fn assessment_order_by_core_distance() {
        let mk = |c| GlobalFragment {
            members: vec![],
            core_frame: c,
        };
        let g = vec![mk(0), mk(50), mk(40), mk(70), mk(60)];
        // distances: 40 -> 10, 60 -> 10, 70 -> 20, 0 -> 50; ties by core
        assert_eq!(assessment_order(&g, 1), vec![2, 4, 3, 0]);
    }

    #[test]
    fn old_new_split_examples() {
        assert_eq!(split_old_new(2500, 1500, 3000, 1800), (1800, 1200));
        assert_eq!(split_old_new(100, 200, 3000, 1800), (100, 200));
        assert_eq!(split_old_new(100, 5000, 3000, 1800), (100, 2900));
        assert_eq!(split_old_new(5000, 100, 3000, 1800), (2900, 100));
        assert_eq!(split_old_new(0, 4000, 3000, 1800), (0, 3000));
    }

    #[test]
    fn duplicate_detection() {
        let fr = vec![frag(0, 0, 5), frag(1, 3, 8), frag(2, 9, 12)];
        let c = coexistence_lists(&fr);
        assert!(no_duplicated_identities(&[Some(0), Some(1), Some(0)], &c));
        assert!(!no_duplicated_identities(&[Some(0), Some(0), None], &c));
    }
}
