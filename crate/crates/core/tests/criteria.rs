mod common;

fn check(outcome: common::Outcome) {
    match outcome {
        Ok(msg) => eprintln!("{msg}"),
        Err(msg) => panic!("{msg}"),
    }
}

#[test]
fn band_quantization_matches_exhaustive_scan() {
    check(common::vq_oracle(40, 1));
}

#[test]
fn band_selection_stays_in_partition() {
    check(common::partition_confinement(500, 2));
}

#[test]
fn spatial_sort_round_trips() {
    check(common::permutation_suite(300, 3));
}

#[test]
fn band_weights_are_a_distribution() {
    check(common::sdrs_analytics(50, 4));
}

#[test]
fn gradients_match_finite_differences() {
    check(common::gradient_suite(0));
}

#[test]
fn channel_attention_contracts() {
    check(common::attention_contracts(100, 6));
}

#[test]
fn zero_offset_deformable_conv_is_conv() {
    check(common::deformable_identity(100, 7));
}

#[test]
fn file_formats_round_trip() {
    check(common::format_round_trips(8));
}
