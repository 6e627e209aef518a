//! Dense attribute attention and the attribute-embedding classifier.
//!
//! For an image with region features `F` (R × d) and attribute semantic
//! vectors `V` (A × dv):
//!
//! ```text
//! weights[a, r] = softmax_r( v_aᵀ W_α f_r )
//! h_a           = Σ_r weights[a, r] f_r            (row a of the dense feature H)
//! e_a           = v_aᵀ W_e h_a                     (attribute score, may be negative)
//! s(H, z_c)     = Σ_a e_a z_c[a]                   (class score)
//! p(c | H)      = softmax over a class subset of s(H, z_c)
//! ```
//!
//! `v_aᵀ W` is shared by every region and image, so the products `V W_α` and
//! `V W_e` (both A × d) are computed once per parameter value as kernels.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;

use crate::dataio::{AttributeSemantics, ClassSemantics, Dataset};
use crate::error::{Error, Result};
use crate::numkernel::softmax;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// dv × d compatibility matrix of the attention logits.
    pub w_alpha: Array2<f64>,
    /// dv × d embedding matrix of the attribute scores.
    pub w_e: Array2<f64>,
    /// Trainable copy of the attribute semantic vectors.
    pub attr_sem: AttributeSemantics,
}

impl ModelParams {
    pub fn new(w_alpha: Array2<f64>, w_e: Array2<f64>, attr_sem: AttributeSemantics) -> Result<Self> {
        let dv = attr_sem.dim();
        if w_alpha.nrows() != dv || w_e.dim() != w_alpha.dim() {
            return Err(Error::shape(
                "ModelParams::new",
                format!("W_alpha and W_e of shape [{dv}, d]"),
                format!("{:?} and {:?}", w_alpha.dim(), w_e.dim()),
            ));
        }
        if w_alpha.iter().chain(w_e.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Precondition("model parameters must be finite".into()));
        }
        Ok(Self { w_alpha, w_e, attr_sem })
    }

    /// W_α and W_e i.i.d. uniform in [−1/√d, 1/√d]; V copied from the dataset.
    pub fn init(dataset: &Dataset, seed: u64) -> Result<Self> {
        let (_, d) = dataset
            .region_shape()
            .ok_or_else(|| Error::Precondition("dataset has no samples".into()))?;
        Self::init_with(dataset.attr_sem.clone(), d, seed)
    }

    pub fn init_with(attr_sem: AttributeSemantics, region_dim: usize, seed: u64) -> Result<Self> {
        let dv = attr_sem.dim();
        let bound = 1.0 / (region_dim as f64).sqrt();
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let mut draw = || Array2::from_shape_simple_fn((dv, region_dim), || rng.random_range(-bound..=bound));
        let w_alpha = draw();
        let w_e = draw();
        Self::new(w_alpha, w_e, attr_sem)
    }

    pub fn num_attributes(&self) -> usize {
        self.attr_sem.num_attributes()
    }

    pub fn region_dim(&self) -> usize {
        self.w_alpha.ncols()
    }

    /// `V W_α` (A × d): row a maps a region feature to attribute a's attention logit.
    pub fn attention_kernel(&self) -> Array2<f64> {
        self.attr_sem.0.dot(&self.w_alpha)
    }

    /// `V W_e` (A × d): row a maps an attribute feature to attribute a's score.
    pub fn score_kernel(&self) -> Array2<f64> {
        self.attr_sem.0.dot(&self.w_e)
    }
}

/// A × d matrix whose row a is the attribute feature h_a of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeature(pub Array2<f64>);

impl DenseFeature {
    pub fn num_attributes(&self) -> usize {
        self.0.nrows()
    }

    pub fn row(&self, a: usize) -> ArrayView1<'_, f64> {
        self.0.row(a)
    }
}

fn check_regions(regions: ArrayView2<f64>, d: usize) -> Result<()> {
    if regions.nrows() == 0 {
        return Err(Error::Precondition("image has no regions".into()));
    }
    if regions.ncols() != d {
        return Err(Error::shape(
            "attention",
            format!("regions of dim {d}"),
            regions.ncols(),
        ));
    }
    Ok(())
}

/// Attention weights (A × R) given the precomputed kernel `V W_α`.
pub fn attention_weights_with(regions: ArrayView2<f64>, kernel: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_regions(regions, kernel.ncols())?;
    let mut weights = kernel.dot(&regions.t());
    for mut row in weights.rows_mut() {
        let p = softmax(row.view())?;
        row.assign(&p);
    }
    Ok(weights)
}

pub fn attention_weights(regions: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    attention_weights_with(regions, params.attention_kernel().view())
}

pub fn attribute_features(regions: ArrayView2<f64>, weights: ArrayView2<f64>) -> Result<DenseFeature> {
    if weights.ncols() != regions.nrows() {
        return Err(Error::shape(
            "attribute_features",
            format!("{} regions", regions.nrows()),
            weights.ncols(),
        ));
    }
    Ok(DenseFeature(weights.dot(&regions)))
}

/// Attribute scores given the precomputed kernel `V W_e`.
pub fn attribute_scores_with(h: &DenseFeature, kernel: ArrayView2<f64>) -> Result<Array1<f64>> {
    if h.0.dim() != kernel.dim() {
        return Err(Error::shape(
            "attribute_scores",
            format!("{:?}", kernel.dim()),
            format!("{:?}", h.0.dim()),
        ));
    }
    Ok((&h.0 * &kernel).sum_axis(Axis(1)))
}

pub fn attribute_scores(h: &DenseFeature, params: &ModelParams) -> Result<Array1<f64>> {
    attribute_scores_with(h, params.score_kernel().view())
}

pub fn class_score(e: ArrayView1<f64>, z: ArrayView1<f64>) -> Result<f64> {
    crate::numkernel::dot(e, z)
}

/// Class scores for every class in `subset`, in subset order.
pub fn class_scores(e: ArrayView1<f64>, z: &ClassSemantics, subset: &[usize]) -> Result<Array1<f64>> {
    if e.len() != z.num_attributes() {
        return Err(Error::shape("class_scores", z.num_attributes(), e.len()));
    }
    subset
        .iter()
        .map(|&c| {
            if c >= z.num_classes() {
                return Err(Error::Precondition(format!("class {c} out of range")));
            }
            Ok(e.dot(&z.row(c)))
        })
        .collect()
}

pub fn class_probabilities(
    h: &DenseFeature,
    z: &ClassSemantics,
    params: &ModelParams,
    subset: &[usize],
) -> Result<Array1<f64>> {
    if subset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let e = attribute_scores(h, params)?;
    softmax(class_scores(e.view(), z, subset)?.view())
}

/// Dense feature of one image under `params`.
pub fn dense_feature(regions: ArrayView2<f64>, params: &ModelParams) -> Result<DenseFeature> {
    let w = attention_weights(regions, params)?;
    attribute_features(regions, w.view())
}
