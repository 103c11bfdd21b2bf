//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Parameters live outside the tape as [`Tensor`] values. Each training
//! step records a fresh [`Tape`]: parameters enter as leaves, every
//! primitive appends one node, and [`Tape::backward`] walks the nodes in
//! reverse insertion order (which is a topological order by construction).

mod gradcheck;
pub(crate) mod resize;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, grad_check, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Every differentiable primitive the tape knows how to record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    AddBias,
    Sub,
    Mul,
    Scale,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    LogSoftmax,
    Reshape,
    Slice,
    Concat,
    ResizeBilinear,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Add,
        Primitive::AddBias,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Relu,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::LogSoftmax,
        Primitive::Reshape,
        Primitive::Slice,
        Primitive::Concat,
        Primitive::ResizeBilinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::AddBias => "add_bias",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Reshape => "reshape",
            Primitive::Slice => "slice",
            Primitive::Concat => "concat",
            Primitive::ResizeBilinear => "resize_bilinear",
        }
    }

    pub fn from_name(name: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
