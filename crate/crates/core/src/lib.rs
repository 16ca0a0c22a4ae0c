pub mod annotation;
pub mod candidates;
pub mod checkpoint;
pub mod classifier;
pub mod embeddings;
pub mod encoder;
pub mod kg;
pub mod pipeline;
pub mod query_graph;
pub mod ranker;
pub mod sparql;
pub mod structures;
pub mod synthetic;
pub mod tokens;
