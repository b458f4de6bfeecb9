pub mod cadseq;
pub mod denoiser;
pub mod engine;
pub mod evalgeo;
pub mod kernels;
pub mod par;
pub mod rng;
