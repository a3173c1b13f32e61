//! Regularizer invariants, shared by the property tests and the acceptance run.

use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};
use rand::Rng;

use smate::error::SmateError;
use smate::regularizer::{
    adjust_supervised, adjust_unsupervised, class_scores, fit_centroids, init_centroids,
    regularization_loss, CentroidSet, CentroidStep,
};
use smate::tensor::Tensor;

use super::{cases, random_mat, rng, to_tensor};

type Outcome = Result<(), TestCaseError>;

#[derive(Debug)]
pub struct Case {
    pub k: usize,
    pub labeled: Vec<Tensor>,
    pub classes: Vec<usize>,
    pub unlabeled: Vec<Tensor>,
}

pub fn case(seed: u64, k: usize, per_class: usize, n_unlabeled: usize, l: usize, d: usize) -> Case {
    let mut r = rng(seed);
    let mut labeled = Vec::new();
    let mut classes = Vec::new();
    for c in 0..k {
        for _ in 0..per_class {
            labeled.push(to_tensor(&random_mat(&mut r, l, d)).map(|v| v * 3.0));
            classes.push(c);
        }
    }
    let unlabeled = (0..n_unlabeled)
        .map(|_| to_tensor(&random_mat(&mut r, l, d)).map(|v| v * 3.0))
        .collect();
    Case {
        k,
        labeled,
        classes,
        unlabeled,
    }
}

pub fn case_strategy() -> impl Strategy<Value = Case> {
    (any::<u64>(), 2usize..6, 1usize..4, 0usize..8, 1usize..3, 1usize..4)
        .prop_map(|(seed, k, per, nu, l, d)| case(seed, k, per, nu, l, d))
}

/// Necessary and (over all directions) sufficient test for hull membership:
/// the point never exceeds the contributors' support in any direction.
fn in_hull(point: &Tensor, members: &[&Tensor], seed: u64) -> bool {
    let f = point.len();
    let mut r = rng(seed);
    let mut directions: Vec<Vec<f64>> = (0..f)
        .flat_map(|i| {
            let mut e = vec![0.0; f];
            e[i] = 1.0;
            let neg = e.iter().map(|v| -v).collect();
            [e, neg]
        })
        .collect();
    directions.extend((0..24).map(|_| (0..f).map(|_| r.gen_range(-1.0..1.0)).collect()));
    directions.iter().all(|v| {
        let dot = |t: &Tensor| t.data().iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let support = members.iter().map(|m| dot(m)).fold(f64::NEG_INFINITY, f64::max);
        dot(point) <= support + 1e-9
    })
}

fn shifted(ts: &[Tensor], shift: &Tensor) -> Vec<Tensor> {
    ts.iter().map(|t| t.zip_map(shift, |a, b| a + b)).collect()
}

pub fn convex_hull(c: &Case) -> Outcome {
    let init = init_centroids(&c.labeled, &c.classes, c.k).unwrap();
    let sup = adjust_supervised(&init, &c.labeled, &c.classes).unwrap();
    let fin = adjust_unsupervised(&sup, &c.unlabeled, None).unwrap();
    let propagated: Vec<usize> = c
        .unlabeled
        .iter()
        .map(|u| class_scores(u, &sup).unwrap().argmax())
        .collect();
    for k in 0..c.k {
        let own: Vec<&Tensor> = c.labeled.iter().zip(&c.classes).filter(|(_, &y)| y == k).map(|(e, _)| e).collect();
        prop_assert!(in_hull(&init.centroids[k], &own, k as u64));
        prop_assert!(in_hull(&sup.centroids[k], &own, k as u64));
        let mut all = own.clone();
        all.extend(c.unlabeled.iter().zip(&propagated).filter(|(_, &y)| y == k).map(|(e, _)| e));
        prop_assert!(in_hull(&fin.centroids[k], &all, k as u64));
    }
    Ok(())
}

pub fn translation_equivariance(c: &Case, s: u64) -> Outcome {
    let shape = c.labeled[0].shape().to_vec();
    let shift = to_tensor(&random_mat(&mut rng(s), shape[0], shape[1])).map(|v| v * 10.0);
    let a = fit_centroids(&c.labeled, &c.classes, &c.unlabeled, c.k, None).unwrap();
    let b = fit_centroids(
        &shifted(&c.labeled, &shift),
        &c.classes,
        &shifted(&c.unlabeled, &shift),
        c.k,
        None,
    )
    .unwrap();
    prop_assert_eq!(&a.propagated_counts, &b.propagated_counts);
    for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
        prop_assert!(ca.zip_map(&shift, |x, y| x + y).max_abs_diff(cb) < 1e-9);
    }
    for h in &c.labeled {
        let sa = class_scores(h, &a).unwrap().scores;
        let sb = class_scores(&h.zip_map(&shift, |x, y| x + y), &b).unwrap().scores;
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
    let la = regularization_loss(&c.labeled, &c.classes, &a).unwrap();
    let lb = regularization_loss(&shifted(&c.labeled, &shift), &c.classes, &b).unwrap();
    prop_assert!((la - lb).abs() < 1e-8);
    Ok(())
}

pub fn no_unlabeled_idempotence(c: &Case) -> Outcome {
    let init = init_centroids(&c.labeled, &c.classes, c.k).unwrap();
    let sup = adjust_supervised(&init, &c.labeled, &c.classes).unwrap();
    let fin = adjust_unsupervised(&sup, &[], None).unwrap();
    prop_assert_eq!(&fin.centroids, &sup.centroids);
    prop_assert_eq!(fin.step, CentroidStep::UnsupervisedAdjusted);
    prop_assert!(fin.propagated_counts.iter().all(|&n| n == 0));
    Ok(())
}

pub fn step_order(c: &Case) -> Outcome {
    let init = init_centroids(&c.labeled, &c.classes, c.k).unwrap();
    let contract = |r: Result<CentroidSet, SmateError>| matches!(r, Err(SmateError::Contract(_)));
    prop_assert!(contract(adjust_unsupervised(&init, &c.unlabeled, None)));
    let sup = adjust_supervised(&init, &c.labeled, &c.classes).unwrap();
    prop_assert!(contract(adjust_supervised(&sup, &c.labeled, &c.classes)));
    let fin = adjust_unsupervised(&sup, &c.unlabeled, None).unwrap();
    prop_assert!(contract(adjust_supervised(&fin, &c.labeled, &c.classes)));
    prop_assert!(contract(adjust_unsupervised(&fin, &c.unlabeled, None)));
    prop_assert!(matches!(
        regularization_loss(&c.labeled, &c.classes, &init),
        Err(SmateError::Contract(_))
    ));
    Ok(())
}

/// Score identity over `n` random embeddings against `k` random centroids;
/// returns the worst deviation from `K - 1`.
pub fn score_identity_error(k: usize, n: usize, seed: u64) -> f64 {
    let c = case(seed, k, 1, 0, 2, 3);
    let cs = init_centroids(&c.labeled, &c.classes, k).unwrap();
    let mut r = rng(seed ^ 0xabcdef);
    (0..n)
        .map(|_| {
            let h = to_tensor(&random_mat(&mut r, 2, 3)).map(|v| v * 4.0);
            let s: f64 = class_scores(&h, &cs).unwrap().scores.iter().sum();
            (s - (k as f64 - 1.0)).abs()
        })
        .fold(0.0, f64::max)
}

/// Runs the four named invariants on `n` cases each.
pub fn run_all(n: u32) -> Vec<(&'static str, Result<(), String>)> {
    let run = |f: &dyn Fn(&Case, u64) -> Outcome| {
        let mut runner = TestRunner::new(cases(n));
        runner
            .run(&(case_strategy(), any::<u64>()), |(c, s)| f(&c, s))
            .map_err(|e| e.to_string())
    };
    vec![
        ("convex hull", run(&|c, _| convex_hull(c))),
        ("translation equivariance", run(&|c, s| translation_equivariance(c, s))),
        ("no-unlabeled idempotence", run(&|c, _| no_unlabeled_idempotence(c))),
        ("step order", run(&|c, _| step_order(c))),
    ]
}
