//! The guide's chapters, compiled so that their examples run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/inputs.md")]
pub mod inputs {}
#[doc = include_str!("../../../book/src/recognition.md")]
pub mod recognition {}
#[doc = include_str!("../../../book/src/realization.md")]
pub mod realization {}
#[doc = include_str!("../../../book/src/calibration.md")]
pub mod calibration {}
#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}
#[doc = include_str!("../../../book/src/perturbation.md")]
pub mod perturbation {}
#[doc = include_str!("../../../book/src/correlation.md")]
pub mod correlation {}
#[doc = include_str!("../../../book/src/levels.md")]
pub mod levels {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
