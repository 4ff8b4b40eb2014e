//! Central finite-difference gradient checking at 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per parameter (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    /// Denominator floor: relative error is |a−n| / max(|a|, |n|, floor).
    pub floor: f64,
    pub seed: u64,
    /// Central differences are repeated with the step halved until two
    /// successive estimates agree within this relative amount, which rules
    /// out a ReLU or clamp kink inside the stencil. At most `max_shrinks`
    /// halvings; zero disables the retry.
    pub kink_tol: f64,
    pub max_shrinks: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            floor: 1e-6,
            seed: 0,
            kink_tol: 1e-4,
            max_shrinks: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    /// Sorted by descending error.
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.first().map_or(0.0, |p| p.max_rel_error)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            s.push_str(&format!(
                "{:<40} {:>12.3e}  ({} coords; analytic {:.6e}, numeric {:.6e})\n",
                p.name, p.max_rel_error, p.coords_checked, p.worst.0, p.worst.1
            ));
        }
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(store: &ParamStore<f64>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss("gradcheck loss".into()));
    }
    Ok(v)
}

fn numeric_derivative<F>(
    store: &mut ParamStore<f64>,
    name: &str,
    i: usize,
    opts: &GradcheckOptions,
    loss_fn: &mut F,
) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let orig = store.get(name).unwrap().value[i];
    let mut eps = opts.eps;
    let mut prev: Option<f64> = None;
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..=opts.max_shrinks {
        store.get_mut(name).unwrap().value[i] = orig + eps;
        let plus = eval_loss(store, loss_fn);
        store.get_mut(name).unwrap().value[i] = orig - eps;
        let minus = eval_loss(store, loss_fn);
        store.get_mut(name).unwrap().value[i] = orig;
        let central = (plus? - minus?) / (2.0 * eps);
        if opts.max_shrinks == 0 {
            return Ok(central);
        }
        if let Some(p) = prev {
            let drift = relative_error(central, p, opts.floor);
            if drift < best.0 {
                best = (drift, central);
            }
            if drift <= opts.kink_tol {
                break;
            }
        }
        prev = Some(central);
        eps /= 2.0;
    }
    Ok(best.1)
}

/// Compare reverse-mode gradients of the scalar built by `loss_fn` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every trainable parameter.
/// Coordinates where the estimate is unstable under step halving report the
/// most self-consistent estimate found.
///
/// `loss_fn` must be deterministic in the store (fixed noise, fixed batch).
pub fn gradcheck<F>(store: &mut ParamStore<f64>, opts: &GradcheckOptions, mut loss_fn: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if opts.eps <= 0.0 || !opts.eps.is_finite() {
        return Err(Error::InvalidInput(format!("gradcheck step must be positive, got {}", opts.eps)));
    }
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFiniteLoss("gradcheck loss".into()));
    }
    g.backward(loss);
    g.accumulate_param_grads(store);
    drop(g);

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradcheckReport::default();
    for (pi, name) in names.iter().enumerate() {
        let n = store.get(name).unwrap().numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(pi as u64));
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            coords_checked: coords.len(),
            worst: (0.0, 0.0),
        };
        for (k, &i) in coords.iter().enumerate() {
            let analytic = store.get(name).unwrap().grad[i];
            let numeric = numeric_derivative(store, name, i, opts, &mut loss_fn)?;
            let err = relative_error(analytic, numeric, opts.floor);
            if k == 0 || err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst = (analytic, numeric);
            }
        }
        report.params.push(worst);
    }
    report
        .params
        .sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error).then_with(|| a.name.cmp(&b.name)));
    Ok(report)
}
