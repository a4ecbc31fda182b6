//! Finite-difference gradient checking in double precision.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Random joint directions over every parameter and input.
    pub directions: usize,
    /// Individually perturbed coordinates per tensor.
    pub coords_per_tensor: usize,
    /// Below this magnitude both derivatives are treated as zero.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { eps: DEFAULT_EPS, directions: 4, coords_per_tensor: 3, abs_floor: 1e-7, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checks: usize,
    /// Label of the worst check (`param:<name>[i]`, `input:<k>[i]`, `direction:<k>`).
    pub worst: String,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        return 0.0;
    }
    (a - n).abs() / scale
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences, both along random directions and for sampled coordinates.
///
/// `f` receives a fresh graph and one input var per entry of `inputs`, and must
/// return a single-element loss var.
pub fn check_gradients<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> CheckReport
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let eval = |st: &ParamStore<f64>, ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(st);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let param_grad = |i: usize| -> Tensor<f64> {
        let id = crate::params::ParamId(i);
        grads.params.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    };
    let input_grad =
        |k: usize| -> Tensor<f64> { grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape())) };

    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut report = CheckReport { max_rel_err: 0.0, checks: 0, worst: String::new() };
    let record = |label: String, a: f64, n: f64, report: &mut CheckReport| {
        let e = rel_err(a, n, opts.abs_floor);
        report.checks += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            report.worst = format!("{label} (analytic {a:.6e}, numeric {n:.6e})");
        }
    };

    for dir in 0..opts.directions {
        let pdirs: Vec<Vec<f64>> =
            store.iter().map(|(_, p)| (0..p.value.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let idirs: Vec<Vec<f64>> =
            inputs.iter().map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut analytic = 0.0;
        for (i, d) in pdirs.iter().enumerate() {
            analytic += param_grad(i).data().iter().zip(d).map(|(g, d)| g * d).sum::<f64>();
        }
        for (k, d) in idirs.iter().enumerate() {
            analytic += input_grad(k).data().iter().zip(d).map(|(g, d)| g * d).sum::<f64>();
        }
        let shifted = |sign: f64| -> f64 {
            let mut st = store.clone();
            for ((_, p), d) in st.iter_mut().zip(&pdirs) {
                for (v, dv) in p.value.data_mut().iter_mut().zip(d) {
                    *v += sign * opts.eps * dv;
                }
            }
            let ins: Vec<Tensor<f64>> = inputs
                .iter()
                .zip(&idirs)
                .map(|(t, d)| {
                    let data = t.data().iter().zip(d).map(|(v, dv)| v + sign * opts.eps * dv).collect();
                    Tensor::from_vec(t.shape(), data)
                })
                .collect();
            eval(&st, &ins)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * opts.eps);
        record(format!("direction:{dir}"), analytic, numeric, &mut report);
    }

    if opts.coords_per_tensor > 0 {
        for (i, (_, p)) in store.iter().enumerate() {
            let pg = param_grad(i);
            for _ in 0..opts.coords_per_tensor.min(p.value.len()) {
                let c = rng.gen_range(0..p.value.len());
                let mut plus = store.clone();
                plus.get_mut(crate::params::ParamId(i)).value.data_mut()[c] += opts.eps;
                let mut minus = store.clone();
                minus.get_mut(crate::params::ParamId(i)).value.data_mut()[c] -= opts.eps;
                let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * opts.eps);
                record(format!("param:{}[{c}]", p.name), pg.data()[c], numeric, &mut report);
            }
        }
        for (k, t) in inputs.iter().enumerate() {
            let ig = input_grad(k);
            for _ in 0..opts.coords_per_tensor.min(t.len()) {
                let c = rng.gen_range(0..t.len());
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[c] += opts.eps;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[c] -= opts.eps;
                let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * opts.eps);
                record(format!("input:{k}[{c}]"), ig.data()[c], numeric, &mut report);
            }
        }
    }
    report
}

/// `sum(x ⊙ w)` for a fixed random `w`; turns any tensor-valued output into a
/// scalar with a non-degenerate gradient.
pub fn random_projection(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let mut rng = StdRng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let wv = g.constant(w);
    let prod = g.mul(x, wv);
    g.sum(prod)
}
