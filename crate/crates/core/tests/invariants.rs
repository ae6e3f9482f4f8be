mod common;

macro_rules! suite_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = common::$name() {
                    panic!("{e}");
                }
            }
        )*
    };
}

suite_tests!(
    chain_rule,
    tape_determinism,
    spectral_equivalence,
    graph_conv_equivariance,
    laplacian_spectrum,
    locality,
    affinity_range,
    stc_linearity,
    stc_equivariance,
    model_non_negativity,
    window_alignment,
);
