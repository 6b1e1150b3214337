pub mod grid;
pub mod power_flow;
pub mod risk;
pub mod env;
pub mod ppo;
pub mod lp;
pub mod baseline;
