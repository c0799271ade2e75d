//! Unrolled meta-gradients against central finite differences through the full rollout.

use omnidistill::distill::Method;
use omnidistill::objectives::PairwiseVariant;
use omnidistill::theory::{meta_gradient_check, meta_gradient_problem};

#[test]
fn meta_gradient_one_step_tiny() {
    let p = meta_gradient_problem(1, 2, &[3, 3], 2, 1, Method::Hopa).unwrap();
    let worst = meta_gradient_check(&p, 24, 1).unwrap();
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn meta_gradient_two_steps_tiny() {
    let p = meta_gradient_problem(2, 2, &[3, 3], 2, 2, Method::Hopa).unwrap();
    let worst = meta_gradient_check(&p, 24, 2).unwrap();
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn meta_gradient_two_steps_three_modalities_minibatch() {
    for (seed, method) in [
        (3, Method::Hopa),
        (4, Method::Rank2),
        (5, Method::Pairwise(PairwiseVariant::ThreePair)),
        (6, Method::AblateInstance),
    ] {
        let p = meta_gradient_problem(seed, 5, &[4, 3, 5], 3, 2, method).unwrap();
        let worst = meta_gradient_check(&p, 30, seed).unwrap();
        assert!(worst <= 1e-4, "{method}: worst relative error {worst:e}");
    }
}

#[test]
fn problem_rejects_single_instance() {
    assert!(meta_gradient_problem(0, 1, &[3, 3], 2, 1, Method::Hopa).is_err());
}
