//! Two-stage composition, auxiliary feature fusion, teacher features and the
//! distillation-augmented training loss.

mod loss;
mod model;

pub use loss::{distill_loss, match_tokens, CascadeMode, DistillMode, LossConfig, TokenTarget};
pub use model::{
    aux_encode, coarse_target, complete_fused, complete_progressive, completion_loss, fuse, fusion_init, fusion_shapes,
    reconstruct_shape, total_loss, CascadeModel, LossInputs, LossTerms, PipelineOutput, TeacherSet, TeacherTargets,
    AUX_PREFIX, FUSE_PREFIX, MAIN_PREFIX, RECON_PREFIX,
};

#[cfg(test)]
mod tests;
