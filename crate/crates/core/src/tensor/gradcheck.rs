use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::dim(format!(
            "gradcheck function returned shape {:?}, expected a scalar",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("gradcheck function produced {v}")));
    }
    Ok(v)
}

/// Checks the gradient of scalar `f` with respect to every element of every
/// input against central finite differences with step `epsilon`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], epsilon: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(Error::Numeric("gradcheck function produced a non-finite value".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = None;
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - epsilon;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * epsilon);
            num.data_mut()[j] = n;

            let a = analytic[i].data()[j];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
            max_abs = max_abs.max(abs);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((i, j));
            }
        }
        numeric.push(num);
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst,
        analytic,
        numeric,
        tol,
    })
}
