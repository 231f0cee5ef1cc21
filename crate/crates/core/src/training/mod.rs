//! Surrogate construction from supervised pairs.

pub mod linear;
pub mod neural;
pub mod set;

pub use linear::{
    apply_linear_surrogate, build_linear_surrogate, estimate_nu_n, estimate_nu_n_for, gram_schmidt,
    LinearSurrogate, Projector,
};
pub use neural::{
    assemble_neural_surrogate, branch_nodes, build_branch_prior, draw_trunk_inner,
    eval_branch_adaptive, fit_trunk, linearization_mismatch, linearization_mismatch_for,
    quadrature_weights, random_span_probes, representer, rho_bound, AssembleOptions, BranchMode,
    NeuralSurrogate, Rescale, SurrogateDiagnostics,
};
pub use set::{
    center_pairs, center_training_set, generate_training_set, normalized_gram_determinant,
    perturbation_shapes, CenteredTrainingSet, PerturbationMode, PerturbationSpec, TrainingSet,
};
