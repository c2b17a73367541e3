pub mod cascade;
pub mod clients;
pub mod config;
pub mod error;
pub mod formats;
pub mod mock;
pub mod pipeline;
pub mod service;

pub use error::{Error, Result};
