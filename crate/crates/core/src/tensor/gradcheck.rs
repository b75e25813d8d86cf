use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst coordinate-wise disagreement between the analytic gradient of a
/// scalar function and central differences with step `h`.
///
/// Relative error is `|a - n| / max(|a|, |n|)`; when both magnitudes are
/// below `1e-8` the absolute difference is used instead.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!(
            "grad_check step must lie in [1e-7, 1e-3], got {h}"
        )));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let scale = a.abs().max(numeric.abs());
        let err = if scale < 1e-8 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::COSINE_EPS;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 0.0, 2.0, -1.0]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn cross_entropy_and_cosine() {
        let z = Tensor::from_vec(vec![0.2, -0.7, 1.3, 0.05]);
        let err = grad_check(|g, v| g.softmax_cross_entropy(v, 2), &z, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");

        let target = Tensor::new(vec![2, 3], vec![0.0, 0.3, 1.0, 0.2, 0.0, 0.6]).unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.5, 0.1, 0.2, 0.9, 0.4, 0.3]).unwrap();
        let err = grad_check(
            |g, v| {
                let a = g.constant(target.clone());
                g.cosine_sim_map(v, a, COSINE_EPS)
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_vector_output() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            grad_check(|g, v| Ok(g.sum(v)), &x, 0.1),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            grad_check(|_, v| Ok(v), &x, 1e-5),
            Err(Error::Contract(_))
        ));
    }
}
