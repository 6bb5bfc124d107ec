pub mod bandit;
pub mod density;
pub mod train;
