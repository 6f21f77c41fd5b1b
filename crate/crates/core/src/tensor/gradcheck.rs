use super::{Bound, GradMap, ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all components,
/// where `numeric` is a central difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.var(point);
        let out = f(&tape, v)?;
        Ok(tape.item(out))
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check`] over every entry of every parameter in `params`.
pub fn grad_check_params<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind_all(&tape);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = GradMap::collect(&grads, &bound, params);

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind_all(&tape);
        let out = f(&tape, &bound)?;
        Ok(tape.item(out))
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let g = analytic.get(name).expect("collected for every parameter");
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).expect("same names").data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of [`grad_check_piecewise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiecewiseCheck {
    pub worst: f64,
    /// Coordinates whose stencil crossed a relu kink and were not compared.
    pub skipped: usize,
    pub compared: usize,
}

/// [`grad_check_params`] for piecewise smooth functions: a coordinate is
/// compared only when `x - eps`, `x` and `x + eps` share one relu sign
/// pattern, since a central difference across a kink estimates no derivative.
pub fn grad_check_piecewise<F>(f: F, params: &ParamSet, eps: f64) -> Result<PiecewiseCheck>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind_all(&tape);
    let loss = f(&tape, &bound)?;
    let pattern = tape.relu_pattern();
    let grads = tape.backward(loss)?;
    let analytic = GradMap::collect(&grads, &bound, params);

    let eval = |p: &ParamSet| -> Result<(f64, Vec<bool>)> {
        let tape = Tape::new();
        let bound = p.bind_all(&tape);
        let out = f(&tape, &bound)?;
        Ok((tape.item(out), tape.relu_pattern()))
    };
    let mut out = PiecewiseCheck {
        worst: 0.0,
        skipped: 0,
        compared: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let g = analytic.get(name).expect("collected for every parameter");
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).expect("same names").data_mut()[i] = orig + eps;
            let (up, up_pattern) = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig - eps;
            let (down, down_pattern) = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig;
            if up_pattern != pattern || down_pattern != pattern {
                out.skipped += 1;
                continue;
            }
            out.compared += 1;
            out.worst = out.worst.max(relative_error(g.data()[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact_to_truncation() {
        let x = random(3, 4, 1);
        let err = grad_check(|t, v| Ok(t.sum(t.mul(v, v)?)), &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_then_sum_of_squares() {
        let x = random(2, 5, 2);
        let err = grad_check(
            |t, v| {
                let s = t.row_softmax(v);
                Ok(t.sum(t.mul(s, s)?))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = random(2, 2, 3);
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn stencil_across_a_kink_is_skipped_not_compared() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(1, 3, vec![5e-4, 0.7, -0.4]).unwrap());
        let f = |t: &Tape, b: &Bound| Ok(t.sum(t.relu(b.get("w")?)));
        assert!(grad_check_params(f, &p, 1e-3).unwrap() > 0.1);
        let r = grad_check_piecewise(f, &p, 1e-3).unwrap();
        assert_eq!((r.skipped, r.compared), (1, 2));
        assert!(r.worst < 1e-9, "{r:?}");
    }
}
