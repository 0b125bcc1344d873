mod common;

use rand::{Rng, SeedableRng};
use unrest::planner::KdUncertaintyIndex;

#[test]
fn queries_equal_reference_on_ten_thousand_points() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let mut states = common::tie_prone_states(&mut rng, 10_000);
    // Exact duplicates must resolve by index.
    for i in 0..200 {
        states[9_000 + i] = states[i];
    }
    let values: Vec<f64> = (0..states.len()).map(|_| rng.random_range(0.0..2.0)).collect();
    let index = KdUncertaintyIndex::build(&states, &values, 5, 0.5).unwrap();
    let points: Vec<Vec<f64>> = states.iter().map(|s| index.norm.apply(s)).collect();
    let mut queries = common::tie_prone_states(&mut rng, 10_000);
    queries.extend_from_slice(&states[..500]);
    for q in &queries {
        let expected = common::brute_knn_mean(&points, &values, &index.norm.apply(q), 5);
        assert_eq!(index.query(q), expected);
    }
}

#[test]
fn saved_index_answers_identically() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(8);
    let states = common::tie_prone_states(&mut rng, 500);
    let values: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
    let index = KdUncertaintyIndex::build(&states, &values, 5, 0.3).unwrap();
    let back = KdUncertaintyIndex::from_json(&index.to_json("m")).unwrap();
    for q in common::tie_prone_states(&mut rng, 200) {
        assert_eq!(index.query(&q).to_bits(), back.query(&q).to_bits());
        assert_eq!(index.is_uncertain(&q), back.is_uncertain(&q));
    }
}
