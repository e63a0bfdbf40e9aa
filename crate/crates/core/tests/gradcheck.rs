mod common;

use common::{full_graph_gradcheck, gradcheck, op_cases};

#[test]
fn every_op_matches_central_differences() {
    for seed in [1, 2, 3] {
        for (name, inputs, build) in op_cases(seed) {
            let err = gradcheck(build, &inputs);
            assert!(err < 1e-4, "{name} (seed {seed}): max relative error {err:e}");
        }
    }
}

#[test]
fn full_network_matches_central_differences() {
    let (err, checked) = full_graph_gradcheck(11);
    assert!(checked > 1000);
    assert!(err < 1e-4, "max relative error {err:e} over {checked} parameters");
}
