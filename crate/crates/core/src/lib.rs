pub mod autodiff;
pub mod cli;
pub mod curation;
pub mod dataio;
pub mod evalmetrics;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod priming;
pub mod synthtasks;
pub mod verifier;
