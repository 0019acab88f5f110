pub mod capture;
pub mod data;
pub mod decoder;
pub mod documents;
pub mod enrich;
pub mod package;
pub mod report;
pub mod schema;
pub mod sensitive;
pub mod session;
pub mod store;
pub mod service;
