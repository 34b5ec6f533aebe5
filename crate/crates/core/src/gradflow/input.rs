use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::protoclass::one_hot;

/// What a flow network may see of an episode: labeled support vectors and,
/// in transductive mode, the unlabeled query vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowInput {
    pub n_way: usize,
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `0 x d` in inductive mode.
    pub unlabeled: Tensor,
}

impl FlowInput {
    pub fn labeled(support: Tensor, support_labels: Vec<usize>, n_way: usize) -> Result<Self> {
        if support.rank() != 2 || support.rows() != support_labels.len() || support.rows() == 0 {
            return Err(Error::dim(
                "flow input",
                format!("support {:?} with {} labels", support.shape(), support_labels.len()),
            ));
        }
        if let Some(&y) = support_labels.iter().find(|&&y| y >= n_way) {
            return Err(Error::Validation(format!("support label {y} outside 0..{n_way}")));
        }
        let dim = support.cols();
        Ok(Self { n_way, support, support_labels, unlabeled: Tensor::zeros(vec![0, dim]) })
    }

    pub fn with_unlabeled(mut self, unlabeled: Tensor) -> Result<Self> {
        if unlabeled.rank() != 2 || unlabeled.cols() != self.dim() {
            return Err(Error::dim("flow input", format!("unlabeled {:?}", unlabeled.shape())));
        }
        self.unlabeled = unlabeled;
        Ok(self)
    }

    pub fn from_episode(episode: &Episode) -> Self {
        let base = Self::labeled(episode.support.clone(), episode.support_labels.clone(), episode.n_way)
            .expect("sampled episodes are well formed");
        match episode.unlabeled() {
            Some(q) => base.with_unlabeled(q.clone()).expect("query shares the support dim"),
            None => base,
        }
    }

    pub fn dim(&self) -> usize {
        self.support.cols()
    }

    /// Number of visible vectors.
    pub fn len(&self) -> usize {
        self.support.rows() + self.unlabeled.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Support rows followed by unlabeled rows.
    pub fn visible(&self) -> Tensor {
        let mut data = self.support.data().to_vec();
        data.extend_from_slice(self.unlabeled.data());
        Tensor::new(vec![self.len(), self.dim()], data).expect("shapes checked on construction")
    }

    /// One-hot rows for support samples, `1/N` rows for unlabeled ones.
    pub fn targets(&self) -> Tensor {
        let mut data = one_hot(&self.support_labels, self.n_way).into_data();
        data.extend(std::iter::repeat_n(1.0 / self.n_way as f64, self.unlabeled.rows() * self.n_way));
        Tensor::new(vec![self.len(), self.n_way], data).expect("sizes match")
    }
}
