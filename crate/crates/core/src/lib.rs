pub mod allocation;
pub mod broker;
pub mod cloud;
pub mod error;
pub mod infrastructure;
pub mod kernel;
pub mod report;
pub mod scenario;
pub mod trace;
