//! Library routines against brute-force oracles on random instances.

mod common;

use common::oracles::suites;

const CASES: u32 = 256;

fn check(name: &str) {
    if let Err(e) = suites::run(name, CASES) {
        panic!("{name}: {e}");
    }
}

#[test]
fn nms_matches_oracle() {
    check("nms");
}

#[test]
fn batched_nms_matches_oracle() {
    check("batched_nms");
}

#[test]
fn match_targets_matches_oracle() {
    check("match_targets");
}

#[test]
fn proposals_match_oracle() {
    check("generate_proposals");
}

#[test]
fn average_precision_matches_oracle() {
    check("ap");
}

#[test]
fn mean_average_precision_matches_oracle() {
    check("map");
}
