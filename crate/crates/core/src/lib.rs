pub mod analysis;
pub mod error;
pub mod io;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod toeplitz;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// A real with 17 significant digits, the form used in every CSV output.
pub fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/toeplitz.md")]
    struct Toeplitz;
    #[doc = include_str!("../../../book/src/tasks.md")]
    struct Tasks;
    #[doc = include_str!("../../../book/src/meta.md")]
    struct Meta;
    #[doc = include_str!("../../../book/src/analysis.md")]
    struct Analysis;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
