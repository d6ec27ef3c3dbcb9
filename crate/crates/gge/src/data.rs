//! Shared dataset types: one instance couples an evidence region matrix
//! with a context vector, a question type, a soft label, and the
//! ground-truth grounding mask used only at evaluation time.

use serde::{Deserialize, Serialize};

use crate::models::Dims;
use crate::nn::Matrix;
use crate::{Error, Result};

/// One sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// `n_v x d_v` region vectors.
    pub evidence: Matrix,
    /// `d_q` context vector (already carries question-type information).
    pub context: Vec<f64>,
    pub type_id: usize,
    /// Soft label in `[0,1]^C`.
    pub label: Vec<f64>,
    /// Per-region relevance in `[0,1]^{n_v}`; evaluation only.
    pub grounding_mask: Vec<f64>,
}

impl Instance {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.evidence.rows() != dims.n_v || self.evidence.cols() != dims.d_v {
            return Err(Error::Shape(format!(
                "evidence {}x{}, expected {}x{}",
                self.evidence.rows(),
                self.evidence.cols(),
                dims.n_v,
                dims.d_v
            )));
        }
        if self.context.len() != dims.d_q {
            return Err(Error::Shape(format!(
                "context length {}, expected {}",
                self.context.len(),
                dims.d_q
            )));
        }
        if self.label.len() != dims.classes {
            return Err(Error::Shape(format!(
                "label length {}, expected {}",
                self.label.len(),
                dims.classes
            )));
        }
        if self.grounding_mask.len() != dims.n_v {
            return Err(Error::Shape(format!(
                "mask length {}, expected {}",
                self.grounding_mask.len(),
                dims.n_v
            )));
        }
        if self.label.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape("label entries must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Deterministic random instance for unit tests and gradient checks.
    pub fn random_for_tests(dims: &Dims, seed: u64) -> Instance {
        use rand::Rng;
        let mut rng = crate::nn::rng::derive(seed, "test-instance");
        let evidence = Matrix::from_vec(
            dims.n_v,
            dims.d_v,
            (0..dims.n_v * dims.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let context: Vec<f64> = (0..dims.d_q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut label = vec![0.0; dims.classes];
        let hot = rng.gen_range(0..dims.classes);
        label[hot] = 1.0;
        let mut mask = vec![0.0; dims.n_v];
        mask[rng.gen_range(0..dims.n_v)] = 1.0;
        Instance { evidence, context, type_id: 0, label, grounding_mask: mask }
    }
}

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestOod,
    TestId,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestOod => "test_ood",
            Split::TestId => "test_id",
        }
    }
}

/// Shape metadata carried in a dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_v: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub classes: usize,
    pub types: usize,
    pub split: Split,
    /// Digest of the generator config that produced the data.
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}
