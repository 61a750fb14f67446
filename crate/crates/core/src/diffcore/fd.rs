use super::{DiffError, Tape, Tensor, Var};

/// Analytic vs. central-difference gradients for every entry of every input.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// `(analytic, numeric)` per input tensor, per flat entry.
    pub entries: Vec<Vec<(f64, f64)>>,
}

/// Floor on the denominator of the relative error so that exactly-zero
/// gradients compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_where(|_, _| true)
    }

    /// Maximum relative error over entries for which `include(input, index)` holds.
    pub fn max_rel_error_where(&self, include: impl Fn(usize, usize) -> bool) -> f64 {
        let mut worst = 0.0_f64;
        for (t, entries) in self.entries.iter().enumerate() {
            for (i, &(a, n)) in entries.iter().enumerate() {
                if include(t, i) {
                    worst = worst.max(relative_error(a, n));
                }
            }
        }
        worst
    }
}

fn eval_scalar<F>(f: &F, point: &[Tensor]) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars);
    tape.status()?;
    out.value().item()
}

/// Compares tape gradients of `f` at `point` against central differences with step `h`.
pub fn finite_difference_check<F>(f: F, point: &[Tensor], h: f64) -> Result<FdReport, DiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars);
        tape.grad(out, &vars)?
    };

    let mut entries = Vec::with_capacity(point.len());
    for (t, base) in point.iter().enumerate() {
        let mut col = Vec::with_capacity(base.numel());
        for i in 0..base.numel() {
            let mut shifted = point.to_vec();
            let mut data = base.data().to_vec();
            data[i] = base.data()[i] + h;
            shifted[t] = Tensor::new(base.shape().to_vec(), data.clone())?;
            let up = eval_scalar(&f, &shifted)?;
            data[i] = base.data()[i] - h;
            shifted[t] = Tensor::new(base.shape().to_vec(), data)?;
            let down = eval_scalar(&f, &shifted)?;
            col.push((analytic[t].data()[i], (up - down) / (2.0 * h)));
        }
        entries.push(col);
    }
    Ok(FdReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = finite_difference_check(
            |_, v| {
                let x = v[0];
                x.mul(x).scale(3.0).add(x.scale(-2.0)).sum()
            },
            &[Tensor::vector(vec![0.3, -1.7, 2.2])],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-8, "{}", r.max_rel_error());
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let r = finite_difference_check(|_, v| v[0].sigmoid().sum(), &[Tensor::scalar(0.0)], 1e-5).unwrap();
        let (_, numeric) = r.entries[0][0];
        assert!((numeric - 0.25).abs() < 1e-7);
    }
}
