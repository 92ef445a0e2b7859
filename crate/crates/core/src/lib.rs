//! Joint learning of a 2D sampling domain, a surface parameterization and
//! its inverse chart map for shapes and shape collections.

pub mod autodiff;
pub mod geometry;
pub mod network;
pub mod sampler;
pub mod losses;
pub mod trainer;
pub mod eval;
pub mod gradcheck;
pub mod cli;
