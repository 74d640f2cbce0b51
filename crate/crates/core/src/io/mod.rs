pub mod dsd1;
pub mod ppm;
