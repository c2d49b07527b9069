pub mod autodiff;
pub mod rng;
pub mod paths;
pub mod oracle;
pub mod data;
pub mod model;
pub mod objectives;
pub mod ode;
