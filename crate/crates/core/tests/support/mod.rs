#![allow(dead_code)]

pub mod canny_ref;
