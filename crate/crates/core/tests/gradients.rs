mod common;

use common::*;

const TOL: f64 = 1e-4;

fn check(term: Term) {
    let err = worst_gradient_error(term, 25, 2024);
    assert!(err <= TOL, "{term:?}: worst relative error {err}");
}

#[test]
fn pal_gradient() {
    check(Term::Pal);
}

#[test]
fn oeer_gradient() {
    check(Term::Oeer);
}

#[test]
fn st_gradient() {
    check(Term::St);
}

#[test]
fn total_gradient() {
    check(Term::Total);
}
