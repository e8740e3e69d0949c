pub mod agents;
pub mod env;
pub mod nn;
pub mod uncertainty;
pub mod regressor;
pub mod clustering;
pub mod curriculum;
pub mod baselines;
pub mod harness;
