//! Passport generation and the adaptive obfuscation layer.

pub mod generate;
pub mod layer;

pub use generate::{
    draw_channel_means, generate_passport, sample_key, Passport, PassportGenParams, PassportKey,
    PassportSampler, PassportSidecar, RefreshPolicy, MAX_RESAMPLES, MEAN_SEPARATION,
};
pub use layer::{
    avg_pool_to_channels, Autoencoder, HostLayer, Obfuscation, PassportCache, PassportGrads,
    PassportLayer, LEAKY_SLOPE,
};
