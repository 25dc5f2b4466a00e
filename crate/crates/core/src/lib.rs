#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod channel;
pub mod cli;
pub mod config;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod locc;
pub mod models;
pub mod quantum;
pub mod twostep;

pub use error::{Error, Result};
