//! Posterior access for the latent codes and pose.

pub mod encoder;
pub mod posterior;
pub mod vmf;

pub use encoder::{
    gaussian_kl, gaussian_kl_tape, reparam_gaussian, Encoder, EncoderConfig, EncoderGroup, GaussianHeads, PoseHeads,
};
pub use posterior::{
    joint_eval, langevin_posterior, log_joint_unnorm, persistent_infer, prior_logdensity, recon_loglik, target_rows,
    ChainState, JointEval, JointTerms, LatentState, LatentStore, PosteriorConfig, RaySubset, Sampling, View, Wrt,
};
pub use vmf::{
    bessel_ratio, log_bessel_i, vmf_kl_tape, vmf_kl_uniform, vmf_kl_uniform_grad, vmf_log_norm, vmf_logpdf, vmf_sample,
    vmf_sample_tape, vmf_transform, VmfDraw, VmfParams,
};
