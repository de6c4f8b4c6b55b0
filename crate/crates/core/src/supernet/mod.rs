//! Joint architecture / bitwidth search space and the weight-sharing network.

mod complexity;
mod network;
mod norm;
mod space;

pub use complexity::{complexity, ComplexityReport, LayerFlopsTable, LayerQuery};
pub use network::{
    resize_bilinear, ElasticLayer, LayerQuantizers, NetworkConfig, NormParam, ParamId, Probe,
    SubnetOutput, Supernet,
};
pub use norm::{ElasticNorm, NormStats, NORM_EPS};
pub use space::{
    decode_onehot, encode_onehot, encoding_len, enumerate_genotypes, max_genotype, min_genotype,
    min_genotype_with_bits, sample_uniform, sample_with_bits, scientific, scientific_rounded,
    Genotype, SearchSpaceSpec, GENOTYPE_SCHEMA_VERSION,
};
