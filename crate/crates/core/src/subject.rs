use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_binary, ensure_probability, Grid2D};
use crate::scalar::Real;

/// One case: image, sampled labels, evaluation mask and optional extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject<T> {
    pub id: String,
    pub image: Grid2D<T>,
    pub labels: Grid2D<T>,
    pub eval_mask: Grid2D<T>,
    pub reference_posterior: Option<Grid2D<T>>,
    pub logits: Option<Grid2D<T>>,
}

impl<T: Real> Subject<T> {
    pub fn new(
        id: impl Into<String>,
        image: Grid2D<T>,
        labels: Grid2D<T>,
        eval_mask: Grid2D<T>,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            labels,
            eval_mask,
            reference_posterior: None,
            logits: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_reference_posterior(mut self, q: Grid2D<T>) -> Result<Self> {
        self.reference_posterior = Some(q);
        self.validate()?;
        Ok(self)
    }

    pub fn with_logits(mut self, z: Grid2D<T>) -> Result<Self> {
        self.logits = Some(z);
        self.validate()?;
        Ok(self)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }

    /// Checks every structural invariant of a subject.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Data("subject id must be nonempty".into()));
        }
        self.image.ensure_same_shape(&self.labels)?;
        self.image.ensure_same_shape(&self.eval_mask)?;
        ensure_binary(&self.labels, "labels")?;
        ensure_binary(&self.eval_mask, "eval_mask")?;
        if self.eval_mask.count_ones() == 0 {
            return Err(Error::Data(format!(
                "subject {}: eval_mask has no nonzero voxel",
                self.id
            )));
        }
        if let Some(q) = &self.reference_posterior {
            self.image.ensure_same_shape(q)?;
            ensure_probability(q, "reference_posterior")?;
        }
        if let Some(z) = &self.logits {
            self.image.ensure_same_shape(z)?;
        }
        Ok(())
    }

    pub fn cached_logits(&self) -> Result<&Grid2D<T>> {
        self.logits
            .as_ref()
            .ok_or_else(|| Error::Data(format!("subject {} has no cached logits", self.id)))
    }

    pub fn cast<U: Real>(&self) -> Subject<U> {
        Subject {
            id: self.id.clone(),
            image: self.image.cast(),
            labels: self.labels.cast(),
            eval_mask: self.eval_mask.cast(),
            reference_posterior: self.reference_posterior.as_ref().map(Grid2D::cast),
            logits: self.logits.as_ref().map(Grid2D::cast),
        }
    }
}
