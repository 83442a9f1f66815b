#![allow(dead_code)]

pub mod gibbs;
