//! Robust reactive power potential (RPP) estimation for radial distribution
//! systems.

pub mod conic;
pub mod misocp;
pub mod sparse;
