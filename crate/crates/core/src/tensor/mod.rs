//! Dense matrices and the differentiation tape.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{ElementwiseOp, Gradients, Reduction, Tape, Var};

/// Elementwise operation on plain matrices, outside any tape.
pub fn elementwise(op: ElementwiseOp, x: &Matrix, y: Option<&Matrix>) -> crate::Result<Matrix> {
    let need = || {
        y.ok_or_else(|| crate::Error::Contract(format!("{op:?} needs a second operand")))
    };
    match op {
        ElementwiseOp::Add => x.add(need()?),
        ElementwiseOp::Sub => x.sub(need()?),
        ElementwiseOp::Mul => x.hadamard(need()?),
        ElementwiseOp::Relu => Ok(x.map(|v| if v > 0.0 { v } else { 0.0 })),
        ElementwiseOp::Tanh => Ok(x.map(f64::tanh)),
    }
}
