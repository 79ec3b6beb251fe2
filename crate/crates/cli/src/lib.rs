//! Shared request handling for the `visconet` command and its HTTP service.

pub mod request;
pub mod service;
