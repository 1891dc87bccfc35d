pub mod agent;
pub mod classify;
pub mod depmgr;
pub mod eval;
pub mod sandbox;
pub mod synth;
pub mod trace;
