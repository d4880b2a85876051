//! Simulation core for silicon-vacancy spin qubits: level structure,
//! Lindblad dynamics, pulse sequences, noise, phenomenological models and
//! curve fitting.

pub mod constants;
pub mod levels;
pub mod dynamics;
pub mod fit;
pub mod models;
pub mod noise;
pub mod sequences;
