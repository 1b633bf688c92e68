//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! The tape is rebuilt for every forward pass. Parameters are registered as
//! leaves; freezing happens when gradients are applied, not by detaching, so
//! one forward pass can serve both the expert and the router update.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{log_sum_exp_slice, softmax_into};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Untracked row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut data = vec![0.0; x.numel()];
    for (row, out) in x.data().chunks(c).zip(data.chunks_mut(c)) {
        softmax_into(row, out);
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Untracked `ln Σ exp(y)`.
pub fn log_sum_exp(y: &Tensor) -> f64 {
    log_sum_exp_slice(y.data())
}

/// Compares tape gradients against central finite differences.
///
/// `f` rebuilds the scalar objective on a fresh tape from the given
/// parameter handles. Returns the maximum over checked coordinates of
/// `|autodiff − fd| / max(1, |fd|)`. When `coords` is `None` every
/// coordinate of every parameter is checked.
pub fn grad_check<F>(params: &[Tensor], h: f64, coords: Option<&[(usize, usize)]>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[i].data()[j] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
