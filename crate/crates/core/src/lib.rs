//! Evaluation of language models over spaces of meaning-preserving prompt
//! perturbations, with the number of sampled perturbations chosen so that
//! the estimated score moments are (ε, δ)-reliable.

pub mod cli;
pub mod domain;
pub mod harness;
pub mod moments;
pub mod perturb;
pub mod reliability;
pub mod report;
