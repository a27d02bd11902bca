//! Shared fixtures for the integration tests.

#![allow(dead_code)]

pub mod fd;
pub mod gradcheck;
pub mod rules;
