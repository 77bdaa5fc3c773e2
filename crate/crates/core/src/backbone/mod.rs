//! The completion network: point proxies, transformer encoder, query
//! generation, transformer decoder and a patch rebuild head.

mod config;
mod model;

pub use config::BackboneConfig;
pub use model::{AttentionLog, Backbone, CompletionOutput, FeatureTokens};

#[cfg(test)]
mod tests;
