#![allow(dead_code)]

pub mod prims;
pub mod reference;
