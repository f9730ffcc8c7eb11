pub mod schedule;
pub mod field;
pub mod tableau;
pub mod stepper;
pub mod stability;
pub mod lab;
pub mod cli;
pub mod config;
