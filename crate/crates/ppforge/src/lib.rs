//! Finite-structure toolkit for loop lemmas, pp-definitions and polymorphism identities.

pub mod cli;
pub mod dianalysis;
pub mod error;
pub mod fraisse;
pub mod idcheck;
pub mod loopengine;
pub mod pplogic;
pub mod relcore;
pub mod triangle;

pub use error::{Error, Result};
