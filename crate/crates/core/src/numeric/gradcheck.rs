use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};

/// Denominator floor for relative error on near-zero gradients, scaled by
/// max(1, |f|) since central-difference roundoff grows with |f|.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences. Parameters larger than `max_coords` are checked
/// at a seeded random subset of coordinates.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64, max_coords: usize, seed: u64) -> GradCheckReport
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let (analytic, value) = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let v = g.scalar(out);
        (g.backward(out), v)
    };
    let floor = REL_FLOOR * value.abs().max(1.0);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        g.scalar(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.param(id);
        for j in coords {
            let orig = work.get(id).data[j];
            work.get_mut(id).data[j] = orig + eps;
            let up = eval(&work);
            work.get_mut(id).data[j] = orig - eps;
            let down = eval(&work);
            work.get_mut(id).data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(3.0));
        let g = {
            let mut gr = Graph::new(&s);
            let x = gr.p("x");
            let y = gr.mul(x, x).unwrap();
            gr.backward(y)
        };
        assert_eq!(g.param(s.id("x").unwrap()).unwrap(), &[6.0]);
        let r = grad_check(
            &s,
            |g| {
                let x = g.p("x");
                g.mul(x, x).unwrap()
            },
            1e-4,
            10,
            0,
        );
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::row(vec![1.0, 2.0]));
        let r = grad_check(&s, |g| g.constant(Tensor::scalar(4.0)), 1e-4, 10, 0);
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 2);
    }
}
