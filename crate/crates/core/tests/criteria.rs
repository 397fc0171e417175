mod support;

#[test]
fn multiply_counts() {
    support::check_multiplies().unwrap();
}

#[test]
fn gradients_match_finite_differences() {
    let detail = support::check_gradients().unwrap();
    println!("{detail}");
}

#[test]
fn conv_matches_triple_loop() {
    support::check_conv_oracle().unwrap();
}

#[test]
fn dsp_invariants() {
    println!("{}", support::check_dsp().unwrap());
}

#[test]
fn split_rule() {
    println!("{}", support::check_splits().unwrap());
}
