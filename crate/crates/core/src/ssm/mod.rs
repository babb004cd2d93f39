//! Selective state-space machinery: discretization, the selective scan, the
//! Mamba layer, RMS normalization and the bidirectional block.

mod mamba;
mod rmsnorm;
mod scan;

pub use mamba::{BMambaBlock, MambaComponent, MambaConfig, MambaLayer, SelectiveSsm};
pub use rmsnorm::{rmsnorm, rmsnorm_op, RMS_EPS};
pub use scan::{discretize, scan_backward, scan_forward, selective_scan, InputRule, ScanDims};
