//! Minimal reverse-mode autodiff over 2-D arrays.
//!
//! Every op records its inputs and a backward rule written in terms of other
//! tape ops, so gradients can themselves be differentiated
//! (`create_graph = true`). Training uses this to get the parameter gradient
//! of a force loss: the first backward yields dE/dr as a recorded node, the
//! second differentiates a linear functional of it.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::{Array2, Axis};

type Backward = Rc<dyn for<'a> Fn(&'a Tape, &Var<'a>, &[bool]) -> Vec<Option<Var<'a>>>>;

struct Node {
    /// One entry per op input, `None` for untracked inputs.
    parents: Vec<Option<usize>>,
    backward: Option<Backward>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A value on a tape. `id` is `None` for constants and for results computed
/// while recording is off.
#[derive(Clone)]
pub struct Var<'a> {
    tape: &'a Tape,
    id: Option<usize>,
    value: Rc<Array2<f64>>,
}

/// A `Var` detached from its tape borrow, captured by backward rules.
#[derive(Clone)]
struct Raw {
    id: Option<usize>,
    value: Rc<Array2<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: vec![],
            backward: None,
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    fn wrap(&self, r: &Raw) -> Var<'_> {
        Var {
            tape: self,
            id: r.id,
            value: r.value.clone(),
        }
    }

    fn record<'a>(&'a self, value: Array2<f64>, inputs: &[&Var<'a>], backward: Backward) -> Var<'a> {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        if !self.recording.get() || parents.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward: Some(backward),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    /// Gradients of the scalar `root` with respect to `wrt`. With
    /// `create_graph` the returned gradients are recorded and can be
    /// differentiated again.
    pub fn grad<'a>(&'a self, root: &Var<'a>, wrt: &[&Var<'a>], create_graph: bool) -> Vec<Option<Var<'a>>> {
        assert_eq!(root.value.len(), 1, "gradient root must be a scalar");
        let Some(root_id) = root.id else {
            return vec![None; wrt.len()];
        };
        // only nodes with a path to some `wrt` need gradients
        let n = root_id + 1;
        let mut needed = vec![false; n];
        for v in wrt {
            if let Some(id) = v.id {
                if id < n {
                    needed[id] = true;
                }
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !needed[id] && nodes[id].parents.iter().flatten().any(|&p| needed[p]) {
                    needed[id] = true;
                }
            }
        }
        let mut grads: Vec<Option<Var<'a>>> = vec![None; n];
        grads[root_id] = Some(self.constant(Array2::ones(root.value.raw_dim())));
        let previous = self.recording.replace(create_graph);
        for id in (0..n).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let (parents, backward) = {
                let nodes = self.nodes.borrow();
                (nodes[id].parents.clone(), nodes[id].backward.clone())
            };
            if let Some(bw) = backward {
                let mask: Vec<bool> = parents.iter().map(|p| p.is_some_and(|p| needed[p])).collect();
                for (p, pg) in parents.iter().zip(bw(self, &g, &mask)) {
                    if let (Some(p), Some(pg)) = (p, pg) {
                        grads[*p] = Some(match grads[*p].take() {
                            Some(acc) => acc.add(&pg),
                            None => pg,
                        });
                    }
                }
            }
            grads[id] = Some(g);
        }
        self.recording.set(previous);
        wrt.iter()
            .map(|v| v.id.and_then(|id| grads.get(id).cloned().flatten()))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shifted softplus `ln(½eˣ + ½)`.
pub fn ssp(x: f64) -> f64 {
    ssp_and_sigmoid(x).0
}

/// `ssp(x)` and its derivative, the logistic function, from one exp.
fn ssp_and_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let softplus = x.max(0.0) + e.ln_1p();
    let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (softplus - std::f64::consts::LN_2, sig)
}

impl<'a> Var<'a> {
    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn scalar(&self) -> f64 {
        self.value[[0, 0]]
    }

    fn t(&self) -> &'a Tape {
        self.tape
    }

    fn raw(&self) -> Raw {
        Raw {
            id: self.id,
            value: self.value.clone(),
        }
    }

    pub fn add(&self, other: &Var<'a>) -> Var<'a> {
        let value = &*self.value + &*other.value;
        self.t().record(
            value,
            &[self, other],
            Rc::new(|_, g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<'a>) -> Var<'a> {
        let value = &*self.value - &*other.value;
        self.t().record(
            value,
            &[self, other],
            Rc::new(|_, g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.scale(-1.0))]),
        )
    }

    pub fn mul(&self, other: &Var<'a>) -> Var<'a> {
        let value = &*self.value * &*other.value;
        let (a, b) = (self.raw(), other.raw());
        self.t().record(
            value,
            &[self, other],
            Rc::new(move |t, g, m| vec![m[0].then(|| g.mul(&t.wrap(&b))), m[1].then(|| g.mul(&t.wrap(&a)))]),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'a> {
        let value = &*self.value * c;
        self.t().record(value, &[self], Rc::new(move |_, g, _| vec![Some(g.scale(c))]))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&self, c: Rc<Array2<f64>>) -> Var<'a> {
        let value = &*self.value * &*c;
        self.t()
            .record(value, &[self], Rc::new(move |_, g, _| vec![Some(g.mul_const(c.clone()))]))
    }

    pub fn add_const(&self, c: &Array2<f64>) -> Var<'a> {
        let value = &*self.value + c;
        self.t().record(value, &[self], Rc::new(|_, g, _| vec![Some(g.clone())]))
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Var<'a>) -> Var<'a> {
        let value = self.value.dot(&*other.value);
        let (a, b) = (self.raw(), other.raw());
        self.t().record(
            value,
            &[self, other],
            Rc::new(move |t, g, m| {
                vec![m[0].then(|| g.matmul_nt(&t.wrap(&b))), m[1].then(|| t.wrap(&a).matmul_tn(g))]
            }),
        )
    }

    /// `self @ otherᵀ`.
    pub fn matmul_nt(&self, other: &Var<'a>) -> Var<'a> {
        let value = self.value.dot(&other.value.t());
        let (a, b) = (self.raw(), other.raw());
        self.t().record(
            value,
            &[self, other],
            Rc::new(move |t, g, m| {
                vec![m[0].then(|| g.matmul(&t.wrap(&b))), m[1].then(|| g.matmul_tn(&t.wrap(&a)))]
            }),
        )
    }

    /// `selfᵀ @ other`.
    pub fn matmul_tn(&self, other: &Var<'a>) -> Var<'a> {
        let value = self.value.t().dot(&*other.value);
        let (a, b) = (self.raw(), other.raw());
        self.t().record(
            value,
            &[self, other],
            Rc::new(move |t, g, m| {
                vec![m[0].then(|| t.wrap(&b).matmul_nt(g)), m[1].then(|| t.wrap(&a).matmul(g))]
            }),
        )
    }

    /// Add a `1 × F` row to every row.
    pub fn add_row(&self, row: &Var<'a>) -> Var<'a> {
        assert_eq!(row.value.nrows(), 1);
        let value = &*self.value + &*row.value;
        self.t().record(
            value,
            &[self, row],
            Rc::new(|_, g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.sum_rows())]),
        )
    }

    /// Column sums as a `1 × F` row.
    pub fn sum_rows(&self) -> Var<'a> {
        let n = self.value.nrows();
        let value = self.value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.t().record(value, &[self], Rc::new(move |_, g, _| vec![Some(g.broadcast_rows(n))]))
    }

    /// Repeat a `1 × F` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Var<'a> {
        let value = self.value.broadcast((n, self.value.ncols())).expect("row vector").to_owned();
        self.t().record(value, &[self], Rc::new(|_, g, _| vec![Some(g.sum_rows())]))
    }

    /// Row sums as an `N × 1` column.
    pub fn sum_cols(&self) -> Var<'a> {
        let f = self.value.ncols();
        let value = self.value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.t().record(value, &[self], Rc::new(move |_, g, _| vec![Some(g.broadcast_cols(f))]))
    }

    /// Repeat an `N × 1` column `f` times.
    pub fn broadcast_cols(&self, f: usize) -> Var<'a> {
        let value = self.value.broadcast((self.value.nrows(), f)).expect("column vector").to_owned();
        self.t().record(value, &[self], Rc::new(|_, g, _| vec![Some(g.sum_cols())]))
    }

    pub fn sum(&self) -> Var<'a> {
        let shape = self.value.dim();
        let value = Array2::from_elem((1, 1), self.value.sum());
        self.t().record(value, &[self], Rc::new(move |_, g, _| vec![Some(g.expand(shape))]))
    }

    /// Broadcast a `1 × 1` value to `shape`.
    pub fn expand(&self, shape: (usize, usize)) -> Var<'a> {
        let value = Array2::from_elem(shape, self.scalar());
        self.t().record(value, &[self], Rc::new(|_, g, _| vec![Some(g.sum())]))
    }

    /// Rows `idx[k]` of `self`.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Var<'a> {
        let n = self.value.nrows();
        let f = self.value.ncols();
        let src = self.value.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * f..(i + 1) * f]);
        }
        let value = Array2::from_shape_vec((idx.len(), f), out).expect("shape");
        self.t().record(
            value,
            &[self],
            Rc::new(move |_, g, _| vec![Some(g.scatter_add_rows(idx.clone(), n))]),
        )
    }

    /// `out[idx[k]] += self[k]` into `n` rows.
    pub fn scatter_add_rows(&self, idx: Rc<Vec<usize>>, n: usize) -> Var<'a> {
        assert_eq!(idx.len(), self.value.nrows());
        let f = self.value.ncols();
        let src = self.value.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * f];
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut out[i * f..(i + 1) * f];
            for (d, x) in dst.iter_mut().zip(&src[k * f..(k + 1) * f]) {
                *d += x;
            }
        }
        let value = Array2::from_shape_vec((n, f), out).expect("shape");
        self.t()
            .record(value, &[self], Rc::new(move |_, g, _| vec![Some(g.gather_rows(idx.clone()))]))
    }

    /// Expand an `N × 1` column into `N × K` features with known values and
    /// elementwise derivatives. The derivatives are constants, so the result
    /// is differentiable once with respect to `self`.
    pub fn expand_features(&self, values: Array2<f64>, derivs: Rc<Array2<f64>>) -> Var<'a> {
        assert_eq!(self.value.ncols(), 1);
        assert_eq!(values.dim(), derivs.dim());
        self.t()
            .record(values, &[self], Rc::new(move |_, g, _| vec![Some(g.mul_const(derivs.clone()).sum_cols())]))
    }

    pub fn ssp(&self) -> Var<'a> {
        let mut value = Array2::zeros(self.value.raw_dim());
        let mut sig = Array2::zeros(self.value.raw_dim());
        ndarray::Zip::from(&mut value).and(&mut sig).and(&*self.value).for_each(|v, s, &x| {
            let (a, b) = ssp_and_sigmoid(x);
            *v = a;
            *s = b;
        });
        let sig = Rc::new(sig);
        let x = self.raw();
        self.t().record(
            value,
            &[self],
            Rc::new(move |t, g, _| vec![Some(g.mul(&t.wrap(&x).sigmoid_known(sig.clone())))]),
        )
    }

    /// Logistic function. Its own derivative is recorded as a constant, so
    /// it supports one further level of differentiation.
    pub fn sigmoid(&self) -> Var<'a> {
        self.sigmoid_known(Rc::new(self.value.mapv(sigmoid)))
    }

    fn sigmoid_known(&self, value: Rc<Array2<f64>>) -> Var<'a> {
        if !self.t().recording.get() || self.id.is_none() {
            return Var {
                tape: self.t(),
                id: None,
                value,
            };
        }
        let d = Rc::new(value.mapv(|s| s * (1.0 - s)));
        self.t().record(
            Rc::unwrap_or_clone(value),
            &[self],
            Rc::new(move |_, g, _| vec![Some(g.mul_const(d.clone()))]),
        )
    }

    pub fn square(&self) -> Var<'a> {
        self.mul(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check<F>(x0: Array2<f64>, f: F)
    where
        F: for<'t> Fn(&'t Tape, &Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&tape, &x);
        let g = tape.grad(&y, &[&x], false)[0].clone().unwrap();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |d: f64| {
                let t = Tape::new();
                let mut xp = x0.clone();
                xp[[r, c]] += d;
                let v = t.leaf(xp);
                f(&t, &v).scalar()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.value()[[r, c]];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn ssp_anchor() {
        assert_eq!(ssp(0.0), 0.0);
        assert!((ssp(50.0) - (50.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(ssp(-800.0).is_finite());
    }

    #[test]
    fn first_order_gradients() {
        let x0 = array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]];
        fd_check(x0.clone(), |t, x| {
            let w = t.constant(array![[0.5, -0.2], [0.1, 0.3], [-0.7, 0.9]]);
            let b = t.constant(array![[0.1, -0.1]]);
            x.matmul(&w).add_row(&b).ssp().square().sum()
        });
        fd_check(x0.clone(), |_, x| {
            let idx = Rc::new(vec![1, 0, 1, 1]);
            x.gather_rows(idx.clone()).sigmoid().scatter_add_rows(Rc::new(vec![0, 2, 2, 1]), 3).sum_cols().square().sum()
        });
        fd_check(x0.clone(), |_, x| x.matmul_nt(x).sum_rows().broadcast_rows(3).ssp().sum());
        fd_check(x0, |_, x| x.matmul_tn(x).scale(0.3).sub(&x.sum().expand((3, 3))).square().sum());
    }

    #[test]
    fn second_order_through_recorded_gradient() {
        // f(x, w) = Σ ssp(x w); d/dw of Σ_k c_k ∂f/∂x_k compared with finite
        // differences of the analytic first derivative
        let x0 = array![[0.4, -0.3], [0.2, 0.9]];
        let w0 = array![[0.7, -0.1, 0.3], [0.2, 0.5, -0.6]];
        let c = array![[1.0, -2.0], [0.5, 0.25]];
        let inner = |w: &Array2<f64>| -> f64 {
            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let wv = t.constant(w.clone());
            let f = x.matmul(&wv).ssp().sum();
            let gx = t.grad(&f, &[&x], false)[0].clone().unwrap();
            (gx.value() * &c).sum()
        };
        let t = Tape::new();
        let x = t.leaf(x0.clone());
        let w = t.leaf(w0.clone());
        let f = x.matmul(&w).ssp().sum();
        let gx = t.grad(&f, &[&x], true)[0].clone().unwrap();
        let obj = gx.mul_const(Rc::new(c.clone())).sum();
        let gw = t.grad(&obj, &[&w], false)[0].clone().unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for k in 0..3 {
                let mut wp = w0.clone();
                wp[[r, k]] += h;
                let mut wm = w0.clone();
                wm[[r, k]] -= h;
                let fd = (inner(&wp) - inner(&wm)) / (2.0 * h);
                assert!((fd - gw.value()[[r, k]]).abs() < 1e-7, "{fd} vs {}", gw.value()[[r, k]]);
            }
        }
    }

    #[test]
    fn pruned_backward_skips_unrelated_leaves() {
        let t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let b = t.leaf(array![[3.0, 4.0]]);
        let y = a.mul(&b).sum();
        let before = t.len();
        let g = t.grad(&y, &[&a], false);
        assert_eq!(t.len(), before, "no recording without create_graph");
        assert_eq!(g[0].as_ref().unwrap().value(), &array![[3.0, 4.0]]);
        let c = t.constant(array![[1.0]]);
        assert!(t.grad(&y, &[&c], false)[0].is_none());
    }
}
