//! Central finite-difference oracle for gradient checks.
//!
//! Only forward evaluations are used here, so the oracle stays independent
//! of the backward pass it checks.

use crate::autograd::{Graph, Var};
use crate::params::{FreezeSet, ParamStore};
use crate::tensor::Tensor;

/// Finite-difference step used throughout the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn numerical_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Checks d loss / d params for every parameter of `store(state)` that is not
/// in `frozen`. `loss` must build the scalar loss from scratch on the graph it
/// is given; it is called once with gradients on and twice per coordinate
/// for the differences.
pub fn check_param_gradients<S>(
    state: &mut S,
    store: impl Fn(&mut S) -> &mut ParamStore,
    frozen: &FreezeSet,
    loss: impl Fn(&S, &mut Graph) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new(frozen.clone());
    let l = loss(state, &mut g);
    let grads = g.backward(l);
    let uid = store(state).uid();
    let mut analytic: Vec<Option<Tensor>> = vec![None; store(state).len()];
    for (key, t) in g.param_grads(&grads) {
        if key.store == uid {
            analytic[key.index] = Some(t);
        }
    }
    drop(g);

    let eval = |state: &S| {
        let mut g = Graph::inference();
        let l = loss(state, &mut g);
        g.value(l).item()
    };

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: String::new() };
    let n = store(state).len();
    for pi in 0..n {
        let (name, group, len) = {
            let p = store(state).get(pi);
            (p.name.clone(), p.group, p.value.len())
        };
        if frozen.contains(group) {
            continue;
        }
        for j in 0..len {
            let orig = store(state).value(pi).data()[j];
            store(state).value_mut(pi).data_mut()[j] = orig + FD_STEP;
            let up = eval(state);
            store(state).value_mut(pi).data_mut()[j] = orig - FD_STEP;
            let down = eval(state);
            store(state).value_mut(pi).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi].as_ref().map_or(0.0, |t| t.data()[j]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{j}]: analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    report
}

/// Test helper: checks the gradient w.r.t. a graph input and panics with
/// the offending coordinate when the relative error exceeds `tol`.
pub fn check_input_gradient(x: &Tensor, tol: f64, build: impl Fn(&mut Graph, Var) -> Var) {
    let mut g = Graph::new(FreezeSet::none());
    let xv = g.input(x.clone());
    let l = build(&mut g, xv);
    let grads = g.backward(l);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numerical_gradient(x, FD_STEP, |p| {
        let mut g = Graph::new(FreezeSet::none());
        let xv = g.constant(p.clone());
        let l = build(&mut g, xv);
        g.value(l).item()
    });
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = relative_error(*a, *n);
        assert!(err <= tol, "coordinate {i}: analytic {a} numeric {n} rel err {err}");
    }
}
