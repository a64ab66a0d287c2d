pub mod agents;
pub mod basemodels;
pub mod config;
pub mod corpus;
pub mod distiller;
pub mod embedding;
pub mod harness;
pub mod jsonl;
pub mod nn;
pub mod pipeline;
pub mod seeding;
pub mod simulator;
