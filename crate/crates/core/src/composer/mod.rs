//! Zero-shot feature composition.
//!
//! For a novel class `n` the composer finds a small set of batch samples whose
//! class semantics nonnegatively reconstruct `z_n` ([`nnomp`]), puts a
//! tempered prior on them ([`prior_probs`]), draws candidate dense features
//! attribute by attribute from that prior ([`sample_candidates`]) and keeps
//! the candidate the classifier and the prior jointly like best
//! ([`select_composition`]).

pub mod nnomp;
pub mod trainer;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::attention::{attribute_scores_with, DenseFeature, ModelParams};
use crate::dataio::ClassSemantics;
use crate::error::{Error, Result};
use crate::numkernel::{l2_norm, log_sum_exp};

pub use nnomp::{nnls, nnomp, nnomp_traced, PursuitStep, RelatedSet};
pub use trainer::{compose_batch, train_stage2_zeroshot, train_stage2_zeroshot_traced};

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionPrior {
    pub related: RelatedSet,
    /// Probabilities aligned with `related.indices`.
    pub probs: Vec<f64>,
    pub beta: f64,
}

impl CompositionPrior {
    /// Probability of drawing dictionary entry `i`; zero outside the related set.
    pub fn prob_of(&self, i: usize) -> f64 {
        self.related
            .indices
            .iter()
            .position(|&j| j == i)
            .map_or(0.0, |k| self.probs[k])
    }

    /// Uniform prior over every entry of a dictionary of size `n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            related: RelatedSet {
                indices: (0..n).collect(),
                weights: vec![0.0; n],
                residual_norm: f64::NAN,
            },
            probs: vec![1.0 / n as f64; n],
            beta: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedFeature {
    pub h: DenseFeature,
    /// Source dictionary entry of each attribute row.
    pub sources: Vec<usize>,
    pub log_prior: f64,
    /// `log p(n | H) + log p(H)`, filled in by selection.
    pub log_score: Option<f64>,
}

/// Related set holding only the entry most cosine-similar to `target`.
pub fn fallback_related(atoms: ArrayView2<f64>, target: ArrayView1<f64>) -> Result<RelatedSet> {
    if atoms.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let tn = l2_norm(target);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, atom) in atoms.rows().into_iter().enumerate() {
        let n = l2_norm(atom) * tn;
        let cos = if n > 0.0 { atom.dot(&target) / n } else { 0.0 };
        if cos > best.1 {
            best = (i, cos);
        }
    }
    Ok(RelatedSet {
        indices: vec![best.0],
        weights: vec![0.0],
        residual_norm: tn,
    })
}

/// NN-OMP related set, or the most similar single entry when the pursuit finds nothing.
pub fn related_or_fallback(target: ArrayView1<f64>, atoms: ArrayView2<f64>, k: usize) -> Result<RelatedSet> {
    let q = nnomp(target, atoms, k)?;
    if q.is_empty() {
        fallback_related(atoms, target)
    } else {
        Ok(q)
    }
}

/// `probs_i ∝ exp(β s_i)` for the given similarities of the related entries.
pub fn prior_from_similarities(related: RelatedSet, similarities: &[f64], beta: f64) -> Result<CompositionPrior> {
    if related.is_empty() {
        return Err(Error::Precondition("related set is empty".into()));
    }
    if similarities.len() != related.len() {
        return Err(Error::shape("prior", related.len(), similarities.len()));
    }
    let logits: Array1<f64> = similarities.iter().map(|s| beta * s).collect();
    let lse = log_sum_exp(logits.view())?;
    let probs = logits.iter().map(|l| (l - lse).exp()).collect();
    Ok(CompositionPrior { related, probs, beta })
}

/// Zero-shot prior: similarity is the dot product of unit-norm class semantics.
pub fn prior_probs(
    related: RelatedSet,
    sample_sem: ArrayView2<f64>,
    z_n: ArrayView1<f64>,
    beta: f64,
) -> Result<CompositionPrior> {
    if sample_sem.ncols() != z_n.len() {
        return Err(Error::shape("prior_probs", z_n.len(), sample_sem.ncols()));
    }
    let sims: Vec<f64> = related.indices.iter().map(|&i| sample_sem.row(i).dot(&z_n)).collect();
    prior_from_similarities(related, &sims, beta)
}

/// Draws `b` candidates; every attribute row picks its source independently from the prior.
pub fn sample_candidates<R: rand::Rng>(
    prior: &CompositionPrior,
    dense: &[DenseFeature],
    b: usize,
    rng: &mut R,
) -> Result<Vec<ComposedFeature>> {
    if b == 0 {
        return Err(Error::Precondition("b must be at least 1".into()));
    }
    let first = prior
        .related
        .indices
        .first()
        .and_then(|&i| dense.get(i))
        .ok_or_else(|| Error::Precondition("related set does not index the dense features".into()))?;
    let (a, d) = first.0.dim();
    let dist = WeightedIndex::new(&prior.probs).map_err(|e| Error::Precondition(format!("prior: {e}")))?;
    let log_probs: Vec<f64> = prior.probs.iter().map(|p| p.ln()).collect();
    let mut out = Vec::with_capacity(b);
    for _ in 0..b {
        let mut h = Array2::<f64>::zeros((a, d));
        let mut sources = Vec::with_capacity(a);
        let mut log_prior = 0.0;
        for (attr, mut row) in h.rows_mut().into_iter().enumerate() {
            let k = dist.sample(rng);
            let src = prior.related.indices[k];
            let feature = dense
                .get(src)
                .ok_or_else(|| Error::Precondition(format!("no dense feature for entry {src}")))?;
            row.assign(&feature.row(attr));
            sources.push(src);
            log_prior += log_probs[k];
        }
        out.push(ComposedFeature {
            h: DenseFeature(h),
            sources,
            log_prior,
            log_score: None,
        });
    }
    Ok(out)
}

/// `log p(target | H)` with the softmax over `classes`, using a precomputed score kernel.
pub fn log_class_probability(
    h: &DenseFeature,
    score_kernel: ArrayView2<f64>,
    z: &ClassSemantics,
    classes: &[usize],
    target: usize,
) -> Result<f64> {
    let e = attribute_scores_with(h, score_kernel)?;
    let s: Array1<f64> = classes.iter().map(|&c| e.dot(&z.row(c))).collect();
    let pos = classes
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::Precondition(format!("class {target} is not a candidate class")))?;
    Ok(s[pos] - log_sum_exp(s.view())?)
}

/// Scores every candidate and returns the best one (earliest on ties).
pub fn select_with_kernel(
    candidates: Vec<ComposedFeature>,
    target: usize,
    z: &ClassSemantics,
    score_kernel: ArrayView2<f64>,
    classes: &[usize],
) -> Result<ComposedFeature> {
    let mut best: Option<ComposedFeature> = None;
    for mut cand in candidates {
        let score = log_class_probability(&cand.h, score_kernel, z, classes, target)? + cand.log_prior;
        cand.log_score = Some(score);
        if best
            .as_ref()
            .is_none_or(|b| score > b.log_score.unwrap_or(f64::NEG_INFINITY))
        {
            best = Some(cand);
        }
    }
    best.ok_or(Error::EmptyInput)
}

/// Candidate maximizing `log p(target | H) + log p(H)`, softmax over all classes of `z`.
pub fn select_composition(
    candidates: Vec<ComposedFeature>,
    target: usize,
    z: &ClassSemantics,
    params: &ModelParams,
) -> Result<ComposedFeature> {
    let classes: Vec<usize> = (0..z.num_classes()).collect();
    select_with_kernel(candidates, target, z, params.score_kernel().view(), &classes)
}
