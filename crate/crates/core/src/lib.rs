//! Meta-learning for graph neural networks.
//!
//! Reptile meta-training of GCN/GAT/MPNN/EGNN regression models over
//! graph datasets, with k-shot adaptation, ensembles, and a deterministic
//! evaluation harness. Everything runs on a small from-scratch
//! reverse-mode autodiff engine in [`tensor`].

pub mod data;
pub mod ensemble;
pub mod eval;
pub mod layers;
pub mod meta;
pub mod tensor;
