pub mod aggregate;
pub mod api;
pub mod cli;
pub mod efficiency;
pub mod fixture;
pub mod forecast;
pub mod geo;
pub mod hypertable;
pub mod ingest;
pub mod mesh;
pub mod model;
pub mod scenario;
pub mod store;
