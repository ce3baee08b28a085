pub mod attention;
pub mod baselines;
pub mod classifiers;
pub mod dataset;
pub mod episodic;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod trainer;
