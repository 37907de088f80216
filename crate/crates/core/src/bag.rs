use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::posenc::GridCoord;
use crate::tensor::Tensor;

/// Feature tokens of one slide, their grid positions and the slide label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub patient_id: String,
    pub label: u8,
    pub rows_total: u32,
    pub cols_total: u32,
    pub coords: Vec<GridCoord>,
    /// `N × D_f`
    pub tokens: Tensor<f32>,
}

impl FeatureBag {
    pub fn new(
        bag_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: u8,
        grid: (u32, u32),
        positions: &[(u32, u32)],
        tokens: Tensor<f32>,
    ) -> Result<Self> {
        let (rows_total, cols_total) = grid;
        let coords = positions
            .iter()
            .map(|&(r, c)| GridCoord::new(r, c, rows_total, cols_total))
            .collect::<Result<Vec<_>>>()?;
        let bag = FeatureBag {
            bag_id: bag_id.into(),
            patient_id: patient_id.into(),
            label,
            rows_total,
            cols_total,
            coords,
            tokens,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::Data(format!("bag {:?} has no tokens", self.bag_id)));
        }
        if self.tokens.shape().len() != 2 || self.tokens.rows() != self.coords.len() {
            return Err(Error::Data(format!(
                "bag {:?}: {} coordinates for tokens of shape {:?}",
                self.bag_id,
                self.coords.len(),
                self.tokens.shape()
            )));
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if c.rows_total != self.rows_total || c.cols_total != self.cols_total {
                return Err(Error::Data(format!(
                    "bag {:?}: coordinate grid {}x{} differs from bag grid {}x{}",
                    self.bag_id, c.rows_total, c.cols_total, self.rows_total, self.cols_total
                )));
            }
            c.validate()?;
            if !seen.insert((c.row, c.col)) {
                return Err(Error::Data(format!(
                    "bag {:?}: duplicate coordinate ({}, {})",
                    self.bag_id, c.row, c.col
                )));
            }
        }
        Ok(())
    }

    /// Reorders tokens and coordinates together: new token `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> FeatureBag {
        FeatureBag {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            tokens: self.tokens.select_rows(perm),
            ..self.clone()
        }
    }
}
