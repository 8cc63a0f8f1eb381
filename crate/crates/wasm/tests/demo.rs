use vind_wasm::{gamma_pairs, kl_trace, shape_variances};

fn correlation(v: &[f64]) -> f64 {
    let n = (v.len() / 2) as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = v.chunks(2).map(|c| (c[0], c[1])).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn coupled_pairs_are_ordered_and_correlated() {
    let v = gamma_pairs(5.0, 2.0, 0.5, 2000, true, 1).unwrap();
    assert_eq!(v.len(), 4000);
    assert!(v.chunks(2).all(|c| c[1] >= c[0] && c[0] > 0.0));
    assert!(correlation(&v) > 0.9);

    let w = gamma_pairs(5.0, 2.0, 0.5, 2000, false, 1).unwrap();
    assert!(correlation(&w).abs() < 0.1);
}

#[test]
fn pairs_reject_bad_arguments() {
    assert!(gamma_pairs(1.0, 1.0, 1.0, 10, true, 0).is_err());
    assert!(gamma_pairs(2.0, 0.0, 1.0, 10, false, 0).is_err());
    assert!(gamma_pairs(2.0, 1.0, -1.0, 10, true, 0).is_err());
}

#[test]
fn coupling_lowers_variance() {
    let v = shape_variances(20.0, &[1.0, 10.0], 300, 3).unwrap();
    assert_eq!(v.len(), 5);
    assert!(v.iter().all(|x| x.is_finite() && *x > 0.0));
    // coupled below uncoupled at each ε, and below the score function
    assert!(v[0] < v[1] && v[2] < v[3]);
    assert!(v[0] < v[4]);
}

#[test]
fn vind_fit_approaches_posterior() {
    let kl = kl_trace("vind", 1.0, 0.1, 400, 5).unwrap();
    assert_eq!(kl.len(), 401);
    assert!(kl[400] < 0.1 * kl[0]);
    assert_eq!(kl, kl_trace("vind", 1.0, 0.1, 400, 5).unwrap());
    assert!(kl_trace("bbvi", 1.0, 0.1, 50, 5).unwrap().iter().all(|k| k.is_finite()));
    assert!(kl_trace("adam", 1.0, 0.1, 10, 5).is_err());
}
