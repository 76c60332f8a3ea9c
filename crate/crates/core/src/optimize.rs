//! Derivative-free minimizers used by the M-steps and the marginal fits.

/// Stopping rules for [`nelder_mead`].
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Absolute spread of function values across the simplex.
    pub ftol: f64,
    /// Largest coordinate distance from the best vertex.
    pub xtol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            ftol: 1e-10,
            xtol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead simplex minimization starting from `x0` with per-coordinate
/// initial steps `step`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: &[f64], opts: NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(step.len(), n);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };
    if n == 0 {
        let v = eval(x0, &mut evals);
        return Minimum {
            x: Vec::new(),
            value: v,
            evals,
            converged: true,
        };
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut values: Vec<f64> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    values.push(eval(x0, &mut evals));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        values.push(eval(&x, &mut evals));
        simplex.push(x);
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    let mut converged = false;

    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        let spread = values[worst] - values[best];
        let size = simplex
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.ftol && size <= opts.xtol.max(1e-3))
            || size <= opts.xtol
        {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &idx in order.iter().take(n) {
            for (c, v) in centroid.iter_mut().zip(&simplex[idx]) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);

        for j in 0..n {
            trial[j] = centroid[j] + alpha * (centroid[j] - simplex[worst][j]);
        }
        let fr = eval(&trial, &mut evals);

        if fr < values[best] {
            for j in 0..n {
                trial2[j] = centroid[j] + gamma * (trial[j] - centroid[j]);
            }
            let fe = eval(&trial2, &mut evals);
            if fe < fr {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = fe;
            } else {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second_worst] {
            simplex[worst].copy_from_slice(&trial);
            values[worst] = fr;
            continue;
        }
        // contraction, outside or inside
        let outside = fr < values[worst];
        for j in 0..n {
            trial2[j] = if outside {
                centroid[j] + rho * (trial[j] - centroid[j])
            } else {
                centroid[j] + rho * (simplex[worst][j] - centroid[j])
            };
        }
        let fc = eval(&trial2, &mut evals);
        if (outside && fc <= fr) || (!outside && fc < values[worst]) {
            simplex[worst].copy_from_slice(&trial2);
            values[worst] = fc;
            continue;
        }
        // shrink towards the best vertex
        let best_x = simplex[best].clone();
        for idx in 0..=n {
            if idx == best {
                continue;
            }
            for j in 0..n {
                simplex[idx][j] = best_x[j] + sigma * (simplex[idx][j] - best_x[j]);
            }
            values[idx] = eval(&simplex[idx], &mut evals);
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        evals,
        converged,
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)`.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64, max_evals: usize) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = sanitize(f(c));
    let mut fd = sanitize(f(d));
    let mut evals = 2;
    while (b - a).abs() > tol && evals < max_evals {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = sanitize(f(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = sanitize(f(d));
        }
        evals += 1;
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
