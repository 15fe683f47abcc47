//! Nelder-Mead simplex minimizer with box clipping, used for the GP
//! marginal-likelihood fit.

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iters: usize,
    pub converged: bool,
}

pub struct NelderMeadOptions {
    pub max_iters: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    /// Initial simplex edge length per coordinate.
    pub step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_iters: 2000, f_tol: 1e-10, x_tol: 1e-8, step: 0.5 }
    }
}

fn clip(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = xi.clamp(lower[i], upper[i]);
    }
}

/// Minimize `f` over the box [lower, upper] starting from `x0`.
/// Points are clipped to the box before every evaluation.
pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult {
    let n = x0.len();
    assert!(n > 0 && lower.len() == n && upper.len() == n);
    let mut eval = |x: &mut Vec<f64>| {
        clip(x, lower, upper);
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    // initial simplex: x0 plus one perturbed vertex per coordinate
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut x = x0.to_vec();
    let fx = eval(&mut x);
    simplex.push((x, fx));
    for i in 0..n {
        let mut xi = x0.to_vec();
        xi[i] += if xi[i] + opts.step <= upper[i] { opts.step } else { -opts.step };
        let fxi = eval(&mut xi);
        simplex.push((xi, fxi));
    }

    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let mut iters = 0;
    let mut converged = false;
    while iters < opts.max_iters {
        iters += 1;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;
        let spread = (0..n)
            .map(|i| {
                simplex
                    .iter()
                    .map(|(v, _)| v[i])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
            })
            .map(|(lo, hi)| hi - lo)
            .fold(0.0f64, f64::max);
        if (f_worst - f_best).abs() <= opts.f_tol * (1.0 + f_best.abs()) && spread <= opts.x_tol {
            converged = true;
            break;
        }

        // centroid of all but the worst
        let mut centroid = vec![0.0; n];
        for (v, _) in simplex.iter().take(n) {
            for i in 0..n {
                centroid[i] += v[i] / n as f64;
            }
        }

        let worst = simplex[n].0.clone();
        let mut refl: Vec<f64> =
            (0..n).map(|i| centroid[i] + ALPHA * (centroid[i] - worst[i])).collect();
        let f_refl = eval(&mut refl);

        if f_refl < simplex[0].1 {
            let mut exp: Vec<f64> =
                (0..n).map(|i| centroid[i] + GAMMA * (refl[i] - centroid[i])).collect();
            let f_exp = eval(&mut exp);
            simplex[n] = if f_exp < f_refl { (exp, f_exp) } else { (refl, f_refl) };
        } else if f_refl < simplex[n - 1].1 {
            simplex[n] = (refl, f_refl);
        } else {
            let (base, f_base) =
                if f_refl < f_worst { (refl.clone(), f_refl) } else { (worst.clone(), f_worst) };
            let mut con: Vec<f64> =
                (0..n).map(|i| centroid[i] + RHO * (base[i] - centroid[i])).collect();
            let f_con = eval(&mut con);
            if f_con < f_base {
                simplex[n] = (con, f_con);
            } else {
                // shrink towards the best vertex
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let mut v: Vec<f64> =
                        (0..n).map(|i| best[i] + SIGMA * (entry.0[i] - best[i])).collect();
                    let fv = eval(&mut v);
                    *entry = (v, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (x, f) = simplex.swap_remove(0);
    NelderMeadResult { x, f, iters, converged }
}
