//! Energy-block modelling, receding-horizon dispatch and flexibility
//! assessment for renewable-rich multi-carrier systems.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod flexibility;
pub mod mpc;
pub mod qpsolver;
pub mod scenario;
pub mod units;
