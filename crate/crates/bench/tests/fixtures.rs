use hybridcrop::assignment::hungarian;
use hybridcrop_bench::{cost_matrix, desk_examples};

#[test]
fn cost_matrix_is_seeded() {
    let a = cost_matrix(12, 3);
    let b = cost_matrix(12, 3);
    assert_eq!(a.size(), 12);
    assert_eq!(hungarian(&a), hungarian(&b));
    let perm = hungarian(&a);
    let mut seen = perm.clone();
    seen.sort_unstable();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
}

#[test]
fn desk_examples_carry_a_prior() {
    let ex = desk_examples(3);
    assert_eq!(ex.len(), 3);
    assert!(ex.iter().all(|e| e.prior.is_some()));
}
