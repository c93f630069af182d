//! Alternative layout embeddings: a convolutional autoencoder over rendered
//! token neighborhoods, and a GIN over a k-NN graph of line segments.

pub mod autoencoder;
pub mod gin;

pub use autoencoder::{
    autoencoder_embed, autoencoder_init, autoencoder_train, render_all, render_neighborhood, AeTrainConfig,
    AeTrained, Bitmap, NeighborhoodConfig, LATENT_DIM,
};
pub use gin::{
    build_knn_graph, gin_aggregate, gin_forward, gin_forward_graph, gin_init, lp_distance, token_segments,
    update_running_stats, BnMode, GinConfig, KnnGraph,
};
