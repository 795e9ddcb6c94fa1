//! Independent reference implementations used as test oracles. None of
//! these share code with the library.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Minimizes `f` with the Nelder-Mead simplex, restarting from the best
/// vertex until a restart no longer improves the objective.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
    let mut best = x0.to_vec();
    let mut fbest = f(&best);
    for _ in 0..20 {
        let x = nm_once(&f, &best, step);
        let fx = f(&x);
        let improved = fbest - fx;
        let moved = x.iter().zip(&best).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        best = x;
        fbest = fx;
        if improved.abs() < 1e-15 && moved < 1e-9 {
            break;
        }
    }
    best
}

fn nm_once(f: &impl Fn(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..200_000 {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();

        let size = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if size < 1e-12 {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let v: Vec<f64> =
                        simplex[i].iter().zip(&simplex[0]).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    values[i] = f(&v);
                    simplex[i] = v;
                }
            }
        }
    }
    let i = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    simplex[i].clone()
}

/// Negative Bernoulli log-likelihood of a logistic model on raw rows.
pub fn logistic_negll(rows: &[Vec<f64>], y: &[bool], beta: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(x, &yi)| {
            let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            // log(1 + e^eta) computed stably
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            softplus - if yi { eta } else { 0.0 }
        })
        .sum()
}

/// Largest absolute component of the logistic score at `beta`.
pub fn logistic_score(rows: &[Vec<f64>], y: &[bool], beta: &[f64]) -> f64 {
    let k = beta.len();
    let mut s = vec![0.0; k];
    for (x, &yi) in rows.iter().zip(y) {
        let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        let p = 1.0 / (1.0 + (-eta).exp());
        for j in 0..k {
            s[j] += (f64::from(u8::from(yi)) - p) * x[j];
        }
    }
    s.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Weighted product-limit survival at `t` by explicit risk-set enumeration:
/// for every distinct event time `u <= t`, sum the weights of everyone still
/// at risk and of everyone failing at `u`.
pub fn km_by_risk_sets(times: &[f64], events: &[bool], weights: &[f64], t: f64) -> f64 {
    let mut event_times: Vec<f64> = times
        .iter()
        .zip(events)
        .zip(weights)
        .filter(|((_, &e), &w)| e && w > 0.0)
        .map(|((&u, _), _)| u)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut s = 1.0;
    for &u in event_times.iter().filter(|&&u| u <= t) {
        let mut at_risk = 0.0;
        let mut died = 0.0;
        for i in 0..times.len() {
            if times[i] >= u {
                at_risk += weights[i];
            }
            if times[i] == u && events[i] {
                died += weights[i];
            }
        }
        s *= 1.0 - died / at_risk;
    }
    s
}

/// Textbook unweighted Kaplan-Meier with integer counts: (event time, S).
pub fn km_counting(times: &[f64], events: &[bool]) -> Vec<(f64, f64)> {
    let mut event_times: Vec<f64> =
        times.iter().zip(events).filter(|(_, &e)| e).map(|(&u, _)| u).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut s = 1.0;
    let mut out = Vec::new();
    for u in event_times {
        let n = times.iter().filter(|&&x| x >= u).count();
        let d = times.iter().zip(events).filter(|(&x, &e)| e && x == u).count();
        s *= 1.0 - d as f64 / n as f64;
        out.push((u, s));
    }
    out
}

/// Quantile by linear interpolation between the order statistics placed at
/// plotting positions k/(n-1), found by scanning every segment.
pub fn percentile_by_scan(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let step = 1.0 / (n - 1) as f64;
    for k in 0..n - 1 {
        let left = k as f64 * step;
        let right = (k + 1) as f64 * step;
        if q >= left && (q < right || k == n - 2) {
            let frac = ((q - left) / step).min(1.0);
            return sorted[k] + frac * (sorted[k + 1] - sorted[k]);
        }
    }
    unreachable!()
}

/// Random small survival instance with ties and censoring.
pub fn random_survival(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    // a coarse grid forces ties
    let times: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..=6u8))).collect();
    let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let weights: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.05..5.0) })
        .collect();
    (times, events, weights)
}

/// Random logistic instance: n in 10..=50, one to three covariates mixing
/// binary and continuous, intercept column first.
pub fn random_logistic(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<bool>) {
    let n = rng.random_range(10..=50usize);
    let k = rng.random_range(1..=3usize);
    let binary: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
    let beta: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![1.0];
        for &b in &binary {
            x.push(if b { f64::from(u8::from(rng.random_bool(0.4))) } else { rng.random_range(-2.0..2.0) });
        }
        let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
        y.push(rng.random_bool(1.0 / (1.0 + (-eta).exp())));
        rows.push(x);
    }
    (rows, y)
}
