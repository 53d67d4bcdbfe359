pub mod cli;
pub mod config;
pub mod graph;
pub mod memmodel;
pub mod netsim;
pub mod orchestrator;
pub mod perfmodel;
pub mod topology;
pub mod trace;
