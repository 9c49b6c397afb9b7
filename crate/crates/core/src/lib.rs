pub mod autodiff;
pub mod eval;
pub mod gbdt;
pub mod neural;
pub mod patch;
pub mod pipeline;
pub mod split;
pub mod tabular;
