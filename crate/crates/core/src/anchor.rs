//! Construction of the injected information content.
//!
//! An `InfoSource` is the matrix `f_info` that an injection mode consumes:
//! either a single pooled d-vector or the full set of rows. Rows come from
//! the model's input-embedding table over a span of the prompt, or from an
//! external matrix. Position 0 of the prompt is the BOS anchor itself and is
//! never part of the span.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{mean_pool_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceForm {
    /// One d-vector, the column mean of the gathered rows.
    Pooled,
    /// All gathered rows, one per source token.
    Full,
}

impl SourceForm {
    pub fn name(&self) -> &'static str {
        match self {
            SourceForm::Pooled => "pooled",
            SourceForm::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoOrigin {
    PromptEmbeddings,
    External,
}

/// Immutable injected content: `m x d` rows (m = 1 when pooled).
#[derive(Debug, Clone, PartialEq)]
pub struct InfoSource {
    form: SourceForm,
    rows: Tensor,
    origin: InfoOrigin,
}

impl InfoSource {
    /// Gathers input-embedding rows for `span` of the prompt (token indices,
    /// half-open). `None` means every prompt position except 0. The span must
    /// be non-empty and start at 1 or later.
    pub fn from_prompt(
        model: &Model,
        tokens: &[u32],
        form: SourceForm,
        span: Option<std::ops::Range<usize>>,
    ) -> Result<InfoSource> {
        let len = tokens.len();
        let span = span.unwrap_or(1..len);
        if span.start < 1 || span.end > len || span.start >= span.end {
            return Err(Error::InfoSpan {
                start: span.start,
                end: span.end,
                len,
            });
        }
        let d = model.config().d_model;
        let vocab = model.config().vocab_size;
        let mut data = Vec::with_capacity((span.end - span.start) * d);
        for &id in &tokens[span.clone()] {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(model.weights().embedding.row(id as usize));
        }
        let rows = Tensor::from_vec(&[span.end - span.start, d], data)?;
        Self::build(rows, form, InfoOrigin::PromptEmbeddings)
    }

    /// Wraps an externally supplied matrix. Column count must equal the
    /// model width it will be injected into.
    pub fn from_external(matrix: Tensor, form: SourceForm, d_model: usize) -> Result<InfoSource> {
        if matrix.rank() != 2 || matrix.cols() != d_model {
            return Err(Error::ShapeMismatch {
                op: "InfoSource::from_external",
                left: matrix.shape().to_vec(),
                right: vec![d_model],
            });
        }
        Self::build(matrix, form, InfoOrigin::External)
    }

    fn build(rows: Tensor, form: SourceForm, origin: InfoOrigin) -> Result<InfoSource> {
        let rows = match form {
            SourceForm::Pooled => mean_pool_rows(&rows)?,
            SourceForm::Full => rows,
        };
        Ok(InfoSource { form, rows, origin })
    }

    pub fn form(&self) -> SourceForm {
        self.form
    }

    pub fn origin(&self) -> InfoOrigin {
        self.origin
    }

    /// The `m x d` content matrix.
    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.rows()
    }

    /// The single d-vector of a pooled source.
    pub fn pooled_vec(&self) -> Option<&[f32]> {
        match self.form {
            SourceForm::Pooled => Some(self.rows.row(0)),
            SourceForm::Full => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn external_pooled_of_single_row_is_identity() {
        let m = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let src = InfoSource::from_external(m.clone(), SourceForm::Pooled, 4).unwrap();
        assert_eq!(src.pooled_vec().unwrap(), m.data());
        // Pooling an already pooled source changes nothing.
        let again =
            InfoSource::from_external(src.rows().clone(), SourceForm::Pooled, 4).unwrap();
        assert_eq!(again.rows(), src.rows());
    }

    #[test]
    fn external_full_keeps_rows() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let src = InfoSource::from_external(m.clone(), SourceForm::Full, 3).unwrap();
        assert_eq!(src.rows(), &m);
        assert_eq!(src.row_count(), 2);
        assert!(src.pooled_vec().is_none());
    }

    #[test]
    fn external_rejects_width_mismatch() {
        let m = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(InfoSource::from_external(m, SourceForm::Full, 4).is_err());
    }
}
