//! Inputs shared by the benchmarks in `benches/`.

use meco_core::decision::ScoredItem;
use meco_core::probe::{build_difference_matrix, DifferenceMatrix};
use meco_core::store::{pair_contrastive, ActivationRecord};
use meco_core::synth::{self, MixtureSpec, PlantedSpec};
use meco_core::ContainerHeader;

/// Planted contrastive records for one layer.
pub fn planted(d: usize, n_pairs: usize, seed: u64) -> (ContainerHeader, Vec<ActivationRecord>) {
    let spec = PlantedSpec::with_random_direction(d, n_pairs, 1.0, 0.1, seed);
    let records = synth::generate_planted(&spec).expect("valid spec");
    (spec.header("bench"), records)
}

pub fn difference_matrix(d: usize, n_pairs: usize, seed: u64) -> DifferenceMatrix {
    let (_, records) = planted(d, n_pairs, seed);
    let pairs = pair_contrastive(&records, 0).expect("complete pairs").pairs;
    build_difference_matrix(&pairs).expect("enough pairs")
}

pub fn scored_items(n: usize, seed: u64) -> Vec<ScoredItem> {
    synth::generate_mixture(&MixtureSpec::example(n, seed))
        .expect("valid spec")
        .items
}
