pub mod cli;
pub mod files;
pub mod job;
pub mod logs;
pub mod recipe;
pub mod report;
pub mod safetensors;
pub mod toy;
