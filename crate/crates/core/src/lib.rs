//! Desk-scale laboratory for rehearsal-free general continual learning with
//! meta post-refinement of a pretrained backbone and meta-covariance feature
//! alignment.

pub mod linalg;
pub mod seed;
pub mod datastream;
pub mod net;
pub mod mepo;
pub mod eval;
pub mod cli;
