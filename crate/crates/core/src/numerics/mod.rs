//! Dense-tensor arithmetic with reverse-mode gradient accumulation.
//!
//! Everything runs in 64-bit floats and every registered operation carries a
//! backward rule that is checkable against central finite differences via
//! [`grad_check`]. Tapes are define-by-run: rebuilt on every forward pass,
//! single-threaded, one per worker.

mod tape;
mod tensor;

pub use tape::{GradTape, ValueId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}{detail}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

/// Max over coordinates of the relative error between the reverse-mode
/// gradient and a central finite-difference estimate.
///
/// `build` constructs a scalar loss on a fresh tape from leaves holding the
/// given parameters; it is re-run with perturbed parameters for the numeric
/// side, so it must be deterministic. Relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(build: F, params: &[Tensor], step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut GradTape, &[ValueId]) -> Result<ValueId, NumericsError>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = GradTape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        let value = tape.value(root).as_scalar().ok_or_else(|| NumericsError::BadShape {
            op: "grad_check",
            shape: tape.value(root).shape().to_vec(),
            detail: ": loss must be scalar".into(),
        })?;
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                context: "grad_check objective".into(),
            });
        }
        Ok(value)
    };

    // Analytic gradients once.
    let mut tape = GradTape::new();
    let ids: Vec<ValueId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    eval(params)?; // validates scalar shape and finiteness
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.len() {
            let orig = param.data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
