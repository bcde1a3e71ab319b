pub mod gradcheck;
pub mod models;
pub mod scenarios;
