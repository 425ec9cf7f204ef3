use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VerticalPartition};
use crate::error::{Error, Result};
use crate::linalg::{norm_sq, Matrix};
use crate::model::{self, LossSpec, ParamBlock, SiloModelSpec};

/// The full model: every silo's block, its architecture and the feature
/// columns it reads, in silo order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub specs: Vec<SiloModelSpec>,
    pub partitions: Vec<VerticalPartition>,
    pub blocks: Vec<ParamBlock>,
}

impl GlobalModel {
    pub fn new(specs: Vec<SiloModelSpec>, partitions: Vec<VerticalPartition>, blocks: Vec<ParamBlock>) -> Result<Self> {
        if specs.len() != blocks.len() || specs.len() != partitions.len() {
            return Err(Error::dim("silo count", specs.len(), blocks.len().min(partitions.len())));
        }
        for ((s, b), p) in specs.iter().zip(&blocks).zip(&partitions) {
            if s.param_len() != b.len() {
                return Err(Error::dim("parameter block", s.param_len(), b.len()));
            }
            if s.input_dim != p.width() {
                return Err(Error::dim("silo feature columns", s.input_dim, p.width()));
            }
        }
        Ok(Self { specs, partitions, blocks })
    }

    pub fn num_silos(&self) -> usize {
        self.specs.len()
    }

    /// `[θ_1 … θ_N]` as one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.specs.first().map_or(0, |s| s.embedding_dim)
    }

    /// Σ_j h_j(θ_j; X_j) for the given rows of the full feature matrix.
    pub fn embedding_sum(&self, features: &Matrix) -> Result<Matrix> {
        let mut sum = Matrix::zeros(features.rows(), self.embedding_dim());
        for ((spec, part), block) in self.specs.iter().zip(&self.partitions).zip(&self.blocks) {
            let rows = features.select_cols(&part.columns);
            sum.add_assign(&model::embed(spec, block, &rows)?)?;
        }
        Ok(sum)
    }

    pub fn loss(&self, dataset: &Dataset, loss: &LossSpec) -> Result<f64> {
        model::composite_loss(&self.embedding_sum(&dataset.features)?, &dataset.labels, loss)
    }

    /// Exact gradient of the mean loss over `ids` (all samples if `None`),
    /// one vector per silo.
    pub fn gradient(&self, dataset: &Dataset, loss: &LossSpec, ids: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
        let features = match ids {
            Some(ids) => dataset.features.select_rows(ids),
            None => dataset.features.clone(),
        };
        let labels: Vec<f64> = match ids {
            Some(ids) => ids.iter().map(|&i| dataset.labels[i]).collect(),
            None => dataset.labels.clone(),
        };
        let z = self.embedding_sum(&features)?;
        let mut dz = model::loss_grad_rows(&z, &labels, loss)?;
        if !labels.is_empty() {
            dz.scale(1.0 / labels.len() as f64);
        }
        self.specs
            .iter()
            .zip(&self.partitions)
            .zip(&self.blocks)
            .map(|((spec, part), block)| model::backprop(spec, block, &features.select_cols(&part.columns), &dz))
            .collect()
    }

    /// ‖∇L(θ)‖² over the full dataset.
    pub fn grad_sq_norm(&self, dataset: &Dataset, loss: &LossSpec) -> Result<f64> {
        Ok(self.gradient(dataset, loss, None)?.iter().map(|g| norm_sq(g)).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_vertical;
    use crate::model::Architecture;

    #[test]
    fn flatten_in_silo_order() {
        let parts = split_vertical(5, &[2, 3]).unwrap();
        let specs = vec![
            SiloModelSpec::new(0, 2, 1, Architecture::Linear),
            SiloModelSpec::new(1, 3, 1, Architecture::Linear),
        ];
        let blocks = vec![ParamBlock(vec![1.0, 2.0]), ParamBlock(vec![3.0, 4.0, 5.0])];
        let g = GlobalModel::new(specs, parts, blocks).unwrap();
        assert_eq!(g.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn least_squares_gradient_closed_form() {
        // L = (1/M)‖Xθ − y‖², ∇ = (2/M) Xᵀ(Xθ − y)
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, -1.0], &[3.0, 1.0]]);
        let y = vec![1.0, 2.0, -1.0];
        let ds = Dataset::new(x.clone(), y.clone()).unwrap();
        let theta = [0.5, -0.25];
        let parts = split_vertical(2, &[1, 1]).unwrap();
        let specs = (0..2).map(|j| SiloModelSpec::new(j, 1, 1, Architecture::Linear)).collect();
        let g = GlobalModel::new(specs, parts, vec![ParamBlock(vec![theta[0]]), ParamBlock(vec![theta[1]])]).unwrap();
        let r: Vec<f64> = x.matvec(&theta).iter().zip(&y).map(|(a, b)| a - b).collect();
        let expect: Vec<f64> = x.t_matvec(&r).iter().map(|v| 2.0 * v / 3.0).collect();
        let got: Vec<f64> = g.gradient(&ds, &LossSpec::squared_error(), None).unwrap().concat();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
