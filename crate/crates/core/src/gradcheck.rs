//! Central finite-difference checks of graph gradients.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor so that vanishing gradients compare absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, floor: 1e-6, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub params_checked: usize,
    pub entries_checked: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.rel_tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} params, {} entries, tolerance {:e}\n",
            self.params_checked, self.entries_checked, self.rel_tol
        );
        for p in self.params.iter().filter(|p| p.max_rel_err > self.rel_tol) {
            let _ = writeln!(
                s,
                "  {} entry {}: analytic {:e} numeric {:e} rel {:e}",
                p.name, p.worst_entry, p.analytic, p.numeric, p.max_rel_err
            );
        }
        if let Some(w) = self.worst() {
            let _ = writeln!(s, "  worst: {} rel {:e}", w.name, w.max_rel_err);
        }
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of the scalar built by `loss` against
/// central differences for every parameter in `store`.
pub fn check_gradients(
    store: &ParamStore,
    cfg: &GradCheckConfig,
    loss: impl Fn(&mut Graph, &Bound) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let root = loss(&mut g, &bound);
    let grads = g.backward(root);
    let analytic = bound.collect_grads(&g, &grads);

    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let b = s.bind_frozen(&mut g);
        let r = loss(&mut g, &b);
        g.scalar(r)
    };

    let mut work = store.clone();
    let mut params = Vec::new();
    let mut entries_checked = 0;
    for (name, value) in store.iter() {
        let n = value.len();
        let stride = match cfg.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut check =
            ParamCheck { name: name.clone(), entries: 0, max_rel_err: 0.0, worst_entry: 0, analytic: 0.0, numeric: 0.0 };
        for i in (0..n).step_by(stride) {
            let orig = value.data[i];
            work.get_mut(name).expect("same names").data[i] = orig + cfg.step;
            let up = eval(&work);
            work.get_mut(name).expect("same names").data[i] = orig - cfg.step;
            let down = eval(&work);
            work.get_mut(name).expect("same names").data[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[name].data[i];
            let err = relative_error(a, numeric, cfg.floor);
            check.entries += 1;
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_entry = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        entries_checked += check.entries;
        params.push(check);
    }
    GradCheckReport { params_checked: params.len(), params, entries_checked, rel_tol: cfg.rel_tol }
}
