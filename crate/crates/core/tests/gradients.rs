//! Finite-difference checks of every differentiable op and of the full
//! network, one test per case so failures are reported individually.

use volssl::gradcheck::suite::{run_case, CASES};

fn check(name: &str) {
    let r = run_case(name).unwrap();
    assert!(r.passed(), "{name}: max rel error {} (tolerance {}, {} probes)", r.max_rel_error, r.tolerance, r.probes);
}

macro_rules! cases {
    ($($test:ident => $name:literal),* $(,)?) => {
        $(#[test] fn $test() { check($name); })*

        #[test]
        fn every_case_has_a_test() {
            let covered = [$($name),*];
            for c in CASES {
                assert!(covered.contains(c), "{c} has no dedicated test");
            }
        }
    };
}

cases! {
    conv3d_same_padding => "conv3d_same",
    conv3d_strided_valid => "conv3d_strided",
    conv3d_pointwise => "conv3d_pointwise",
    maxpool => "maxpool",
    upsample => "upsample",
    relu => "relu",
    softmax_over_channels => "softmax",
    reshape => "reshape",
    dropout_with_fixed_mask => "dropout",
    dense => "dense",
    concat_and_mul => "concat_mul",
    ntxent_tau_005 => "ntxent_t0.05",
    ntxent_tau_01 => "ntxent_t0.1",
    ntxent_tau_05 => "ntxent_t0.5",
    weighted_dice => "dice",
    unet_with_dice_end_to_end => "unet_dice_8",
}

#[test]
fn unknown_case_is_config_error() {
    assert!(matches!(run_case("nope"), Err(volssl::Error::Config(_))));
}
