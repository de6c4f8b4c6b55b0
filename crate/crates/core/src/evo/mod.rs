//! Multi-objective search over genotypes with an accuracy predictor.

mod data;
mod nsga;
mod predictor;

pub use data::{
    collect_predictor_data, load_jsonl, read_jsonl, save_jsonl, write_jsonl, CollectConfig,
    PredictorSample,
};
pub use nsga::{
    chromosome_roundtrip, crowding_distance, dominates, evolve, genotype_hash, hypervolume,
    nondominated_sort, GenerationStats, Individual, SearchConfig, SearchResult,
};
pub use predictor::{kendall_tau, train_predictor, Predictor, PredictorConfig, PredictorReport};
