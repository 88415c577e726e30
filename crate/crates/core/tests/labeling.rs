mod common;

use sweepmatch::data::ProbePose;
use sweepmatch::sampler::label_pairs;

#[test]
fn label_pairs_agrees_with_brute_force() {
    let (agree, n) = common::label_oracle_agreement(1000, 7);
    assert_eq!(agree, n);
}

#[test]
fn oracle_itself_handles_ties_and_dustbin() {
    let p = |z: f64| ProbePose::new(0.0, 0.0, z);
    let p1 = [p(0.0), p(50.0)];
    let p2 = [p(-4.0), p(4.0), p(10.0)];
    let (r, c) = common::brute_force_labels(&p1, &p2, 10.0);
    assert_eq!(r, vec![0, 3]);
    assert_eq!(c, vec![0, 0, 2]);
    let l = label_pairs(&p1, &p2, 10.0);
    assert_eq!((l.gt_1to2, l.gt_2to1), (r, c));
}
