//! Reverse-mode differentiation of scalar losses over a [`ParamVector`],
//! plus a central-difference gradient verifier.
//!
//! A loss is any `Fn(&mut Graph) -> Result<Var>` that records its
//! computation on the graph it is handed. Models read their weights through
//! [`Graph::param`], so the same closure can be evaluated at perturbed
//! parameters by the checker.

mod graph;
mod params;

pub use graph::{log_sum_exp, sigmoid, softplus, Graph, ScalarFn, Tensor, Unary, Var};
pub use params::{Init, ParamBlock, ParamBuilder, ParamVector};

use crate::error::{Error, Result};

/// Loss value together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

fn non_finite(g: &Graph<'_>, out: Var) -> Error {
    g.non_finite_error().unwrap_or(Error::NonFinite {
        op: "output",
        node: out.index(),
        scope: "<root>".into(),
    })
}

fn eval_at<F>(loss_fn: &F, values: &[f64]) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(values);
    let out = loss_fn(&mut g)?;
    let loss = g.scalar_value(out);
    if !loss.is_finite() {
        return Err(non_finite(&g, out));
    }
    Ok(loss)
}

/// Evaluate a loss without differentiating it.
pub fn value<F>(loss_fn: F, params: &ParamVector) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    eval_at(&loss_fn, params.values())
}

/// Loss and d(loss)/d(param) for every parameter.
pub fn grad<F>(loss_fn: F, params: &ParamVector) -> Result<Evaluation>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params.values());
    let out = loss_fn(&mut g)?;
    let loss = g.scalar_value(out);
    if !loss.is_finite() {
        return Err(non_finite(&g, out));
    }
    let gradient = g.backward(out)?;
    Ok(Evaluation { loss, gradient })
}

/// Analytic vs central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Name of the parameter block containing `worst_index`.
    pub worst_block: Option<String>,
    pub passed: bool,
}

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Compare [`grad`] against `(loss(p + eps e_i) - loss(p - eps e_i)) / 2 eps`
/// for every coordinate.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamVector, epsilon: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = grad(&loss_fn, params)?.gradient;
    let mut probe = params.values().to_vec();
    let mut numeric = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = eval_at(&loss_fn, &probe)?;
        probe[i] = orig - epsilon;
        let down = eval_at(&loss_fn, &probe)?;
        probe[i] = orig;
        numeric.push((up - down) / (2.0 * epsilon));
    }
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0_f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradReport {
        worst_block: params.block_of(worst_index).map(|b| b.name.clone()),
        passed: max_rel_err <= tolerance,
        analytic,
        numeric,
        max_rel_err,
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn quadratic(g: &mut Graph<'_>) -> Result<Var> {
        let n = g.n_params();
        let p = g.param(0, n, 1)?;
        let sq = g.square(p);
        Ok(g.sum(sq))
    }

    #[test]
    fn quadratic_gradient() {
        let params = ParamVector::new(vec![1.0, 2.0]);
        let ev = grad(quadratic, &params).unwrap();
        assert_eq!(ev.loss, 5.0);
        assert_eq!(ev.gradient, vec![2.0, 4.0]);
    }

    #[test]
    fn dpo_h_derivative_at_zero() {
        // -ln sigma(z) = softplus(-z)
        let params = ParamVector::new(vec![0.0]);
        let ev = grad(
            |g| {
                let z = g.param(0, 1, 1)?;
                let nz = g.neg(z);
                Ok(g.softplus(nz))
            },
            &params,
        )
        .unwrap();
        assert!((ev.gradient[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn ipo_h_derivative_at_zero() {
        let params = ParamVector::new(vec![0.0]);
        let ev = grad(
            |g| {
                let z = g.param(0, 1, 1)?;
                let nz = g.neg(z);
                let d = g.shift(nz, 0.5);
                Ok(g.square(d))
            },
            &params,
        )
        .unwrap();
        assert_eq!(ev.gradient[0], -1.0);
    }

    #[test]
    fn quadratic_passes_check() {
        let params = ParamVector::new(vec![0.3, -1.7, 2.5]);
        let rep = finite_diff_check(quadratic, &params, 1e-5, 1e-6).unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught_and_located() {
        let mut b = ParamVector::builder();
        let mut rng = rand::rng();
        b.push("good", 3, Init::Normal(1.0), &mut rng);
        b.push("broken", 2, Init::Normal(1.0), &mut rng);
        let params = b.build();
        // cube with a deliberately wrong derivative on the second block
        let bad: ScalarFn = Arc::new(|x| (x * x * x, 2.0 * x * x));
        let rep = finite_diff_check(
            |g| {
                let good = g.param(0, 3, 1)?;
                let broken = g.param(3, 2, 1)?;
                let a = g.square(good);
                let b = g.custom(broken, "bad_cube", bad.clone());
                let sa = g.sum(a);
                let sb = g.sum(b);
                g.add(sa, sb)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed);
        assert!(rep.worst_index >= 3);
        assert_eq!(rep.worst_block.as_deref(), Some("broken"));
    }

    #[test]
    fn non_finite_loss_names_the_op() {
        let params = ParamVector::new(vec![-1.0]);
        let err = grad(
            |g| {
                g.enter_scope("log_term");
                let p = g.param(0, 1, 1)?;
                let l = g.ln(p);
                g.exit_scope();
                Ok(l)
            },
            &params,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { op, scope, .. } => {
                assert_eq!(op, "ln");
                assert_eq!(scope, "log_term");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn nonpositive_epsilon_rejected() {
        let params = ParamVector::new(vec![1.0]);
        assert!(finite_diff_check(quadratic, &params, 0.0, 1e-6).is_err());
    }

    #[test]
    fn grad_is_bitwise_deterministic() {
        let params = ParamVector::new((0..50).map(|i| (i as f64 * 0.37).sin()).collect());
        let f = |g: &mut Graph<'_>| {
            let a = g.param(0, 5, 10)?;
            let b = g.param(0, 10, 5)?;
            let c = g.matmul(a, b)?;
            let ls = g.log_softmax(c);
            let ln = g.layer_norm(ls);
            let t = g.gelu(ln);
            Ok(g.sum(t))
        };
        let x = grad(f, &params).unwrap();
        let y = grad(f, &params).unwrap();
        assert_eq!(x, y);
    }

    /// Every graph op against central differences.
    #[test]
    fn all_ops_pass_gradient_check() {
        let mut b = ParamVector::builder();
        let mut rng = rand::rng();
        b.push("a", 12, Init::Normal(0.7), &mut rng);
        b.push("b", 12, Init::Normal(0.7), &mut rng);
        b.push("row", 4, Init::Normal(0.7), &mut rng);
        let params = b.build();
        let f = |g: &mut Graph<'_>| {
            let a = g.param(0, 3, 4)?;
            let b = g.param(12, 3, 4)?;
            let bt = g.param(12, 4, 3)?;
            let row = g.param(24, 1, 4)?;
            let ab = g.matmul(a, bt)?; // 3x3
            let att = g.causal_softmax(ab)?;
            let abt = g.matmul_t(a, b)?; // 3x3
            let s = g.add(att, abt)?;
            let m = g.mul(s, abt)?;
            let ls = g.log_softmax(m);
            let ctx = g.matmul(ls, a)?; // 3x4
            let r1 = g.add_row(ctx, row)?;
            let r2 = g.mul_row(r1, row)?;
            let ln = g.layer_norm(r2);
            let ge = g.gelu(ln);
            let th = g.unary(ge, Unary::Tanh);
            let sig = g.unary(th, Unary::Sigmoid);
            let left = g.slice_cols(sig, 0, 2)?;
            let right = g.slice_cols(sig, 2, 2)?;
            let cat = g.concat_cols(&[right, left])?;
            let top = g.slice_rows(cat, 0, 2)?;
            let rows = g.gather_rows(cat, vec![2, 0, 0])?;
            let both = g.concat_rows(&[top, rows])?;
            let d = g.sub(both, both)?;
            let e = g.exp(both);
            let sum = g.add(d, e)?;
            let picked = g.gather(sum, vec![(0, 1), (4, 3), (2, 2), (0, 1)])?;
            let sp = g.softplus(picked);
            let lg = g.ln(sp);
            let sh = g.shift(lg, 3.0);
            Ok(g.mean(sh))
        };
        let rep = finite_diff_check(f, &params, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "max_rel_err {} at {}", rep.max_rel_err, rep.worst_index);
    }
}
