//! Recorded forward computation with reverse-mode gradients.
//!
//! Every model in the crate evaluates through a [`Graph`]: nodes hold dense
//! `f64` vectors, and a handful of fused operators (affine maps, GRU steps,
//! Householder products, triangular maps, limb directions, Gaussian KL) carry
//! hand-written backward rules. Parameters are read from borrowed
//! [`ParamStore`]s; stores can be frozen so no parameter gradient is formed
//! for them while gradients still flow through their operators.

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct PRef {
    slot: usize,
    offset: usize,
    len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(PRef),
    Affine {
        w: PRef,
        b: Option<PRef>,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Gru {
        w_ih: PRef,
        w_hh: PRef,
        b_ih: PRef,
        b_hh: PRef,
        x: Var,
        h: Var,
        // r, z, n and the recurrent candidate term, each `hidden` long
        cache: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    MaxConst {
        x: Var,
        floor: f64,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    SumSq(Var),
    MinOf {
        x: Var,
        arg: usize,
    },
    KlDiag {
        qm: Var,
        qls: Var,
        pm: Var,
        pls: Var,
    },
    PRelu {
        x: Var,
        log_slope: PRef,
    },
    Householder {
        u: PRef,
        x: Var,
        // reflection inputs, one `dim`-vector per reflector in application order
        cache: Vec<f64>,
    },
    UpperTri {
        r: PRef,
        log_diag: PRef,
        x: Var,
    },
    LimbDirs {
        x: Var,
        parents: Vec<i32>,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Degenerate-bone threshold for [`Graph::limb_directions`].
pub const MIN_BONE_LENGTH: f64 = 1e-8;

pub struct Graph<'a> {
    stores: Vec<&'a ParamStore>,
    frozen: Vec<bool>,
    nodes: Vec<Node>,
}

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            stores: Vec::new(),
            frozen: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Registers `store` as frozen: operators still propagate gradients through
    /// its parameters' uses, but no gradient buffer is kept for it.
    pub fn freeze(&mut self, store: &'a ParamStore) {
        let slot = self.slot(store);
        self.frozen[slot] = true;
    }

    fn slot(&mut self, store: &'a ParamStore) -> usize {
        if let Some(i) = self.stores.iter().position(|s| std::ptr::eq(*s, store)) {
            return i;
        }
        self.stores.push(store);
        self.frozen.push(false);
        self.stores.len() - 1
    }

    /// Slot index of a registered store.
    pub fn slot_of(&self, store: &ParamStore) -> Option<usize> {
        self.stores.iter().position(|s| std::ptr::eq(*s, store))
    }

    fn pref(&mut self, store: &'a ParamStore, id: ParamId) -> PRef {
        let slot = self.slot(store);
        let e = store.entry(id);
        PRef {
            slot,
            offset: e.offset,
            len: e.len,
        }
    }

    fn pvals(&self, p: PRef) -> &'a [f64] {
        let store: &'a ParamStore = self.stores[p.slot];
        &store.values()[p.offset..p.offset + p.len]
    }

    fn trainable(&self, p: PRef) -> bool {
        !self.frozen[p.slot]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "node is not a scalar");
        val[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of a whole parameter tensor.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let p = self.pref(store, id);
        let value = self.pvals(p).to_vec();
        let rg = self.trainable(p);
        self.push(value, Op::Param(p), rg)
    }

    /// `W x + b` with `W` stored row-major as `[rows, cols]`.
    pub fn affine(&mut self, store: &'a ParamStore, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let shape = &store.entry(w).shape;
        assert_eq!(shape.len(), 2, "affine weight must be a matrix");
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(self.dim(x), cols, "affine input dimension");
        let wp = self.pref(store, w);
        let bp = b.map(|b| self.pref(store, b));
        let wv = self.pvals(wp);
        let xv = &self.nodes[x.0].value;
        let mut y = match bp {
            Some(bp) => self.pvals(bp).to_vec(),
            None => vec![0.0; rows],
        };
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += dot(&wv[i * cols..(i + 1) * cols], xv);
        }
        let rg = self.trainable(wp) || bp.is_some_and(|b| self.trainable(b)) || self.rg(x);
        self.push(
            y,
            Op::Affine {
                w: wp,
                b: bp,
                x,
                rows,
                cols,
            },
            rg,
        )
    }

    /// One GRU step with gate order (reset, update, candidate):
    /// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z = σ(...)`,
    /// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru(
        &mut self,
        store: &'a ParamStore,
        w_ih: ParamId,
        w_hh: ParamId,
        b_ih: ParamId,
        b_hh: ParamId,
        x: Var,
        h: Var,
    ) -> Var {
        let hidden = self.dim(h);
        let input = self.dim(x);
        assert_eq!(store.entry(w_ih).shape, vec![3 * hidden, input], "gru input weight shape");
        assert_eq!(store.entry(w_hh).shape, vec![3 * hidden, hidden], "gru hidden weight shape");
        let (pw_ih, pw_hh, pb_ih, pb_hh) = (
            self.pref(store, w_ih),
            self.pref(store, w_hh),
            self.pref(store, b_ih),
            self.pref(store, b_hh),
        );
        let (wi, wh, bi, bh) = (self.pvals(pw_ih), self.pvals(pw_hh), self.pvals(pb_ih), self.pvals(pb_hh));
        let xv = &self.nodes[x.0].value;
        let hv = &self.nodes[h.0].value;
        let mut cache = vec![0.0; 4 * hidden];
        let mut out = vec![0.0; hidden];
        for k in 0..hidden {
            let gi = |g: usize| bi[g * hidden + k] + dot(&wi[(g * hidden + k) * input..(g * hidden + k + 1) * input], xv);
            let gh = |g: usize| bh[g * hidden + k] + dot(&wh[(g * hidden + k) * hidden..(g * hidden + k + 1) * hidden], hv);
            let r = sigmoid(gi(0) + gh(0));
            let z = sigmoid(gi(1) + gh(1));
            let ghn = gh(2);
            let n = (gi(2) + r * ghn).tanh();
            cache[k] = r;
            cache[hidden + k] = z;
            cache[2 * hidden + k] = n;
            cache[3 * hidden + k] = ghn;
            out[k] = (1.0 - z) * n + z * hv[k];
        }
        let rg = [pw_ih, pw_hh, pb_ih, pb_hh].iter().any(|p| self.trainable(*p)) || self.rg(x) || self.rg(h);
        self.push(
            out,
            Op::Gru {
                w_ih: pw_ih,
                w_hh: pw_hh,
                b_ih: pb_ih,
                b_hh: pb_hh,
                x,
                h,
                cache,
            },
            rg,
        )
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "elementwise operands differ in length");
        let y = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(y, op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.nodes[x.0].value.iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        self.push(y, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn max_const(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::MaxConst { x, floor })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(y, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.nodes[x.0].value[start..start + len].to_vec();
        let rg = self.rg(x);
        self.push(y, Op::Slice { x, start }, rg)
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let y = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        self.push(y, Op::Gather { x, idx: idx.to_vec() }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], Op::Sum(x), rg)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(vec![s], Op::SumSq(x), rg)
    }

    /// Sum of several scalars (or equal-length vectors).
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Smallest entry; the gradient flows to the first minimizer.
    pub fn min_of(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.is_empty(), "min of an empty vector");
        let mut arg = 0;
        for (i, v) in xv.iter().enumerate() {
            if *v < xv[arg] {
                arg = i;
            }
        }
        let y = vec![xv[arg]];
        let rg = self.rg(x);
        self.push(y, Op::MinOf { x, arg }, rg)
    }

    /// Closed-form `KL(N(qm, e^{2 qls}) || N(pm, e^{2 pls}))` summed over dimensions.
    pub fn kl_diag(&mut self, qm: Var, qls: Var, pm: Var, pls: Var) -> Var {
        let d = self.dim(qm);
        assert!(
            self.dim(qls) == d && self.dim(pm) == d && self.dim(pls) == d,
            "kl operands differ in length"
        );
        let v = kl_diag_value(self.value(qm), self.value(qls), self.value(pm), self.value(pls));
        let rg = self.rg(qm) || self.rg(qls) || self.rg(pm) || self.rg(pls);
        self.push(vec![v], Op::KlDiag { qm, qls, pm, pls }, rg)
    }

    /// `x` on nonnegative entries, `exp(log_slope) * x` on negative ones.
    pub fn prelu(&mut self, x: Var, store: &'a ParamStore, log_slope: ParamId) -> Var {
        let p = self.pref(store, log_slope);
        assert_eq!(p.len, 1, "prelu slope must be a scalar");
        let s = self.pvals(p)[0].exp();
        let y = self.nodes[x.0].value.iter().map(|&v| if v >= 0.0 { v } else { s * v }).collect();
        let rg = self.rg(x) || self.trainable(p);
        self.push(y, Op::PRelu { x, log_slope: p }, rg)
    }

    /// Number of strictly negative entries.
    pub fn count_negative(&self, x: Var) -> usize {
        self.nodes[x.0].value.iter().filter(|v| **v < 0.0).count()
    }

    /// `Q x` with `Q = H_0 H_1 ... H_{m-1}`, `H_k = I - 2 u_k u_kᵀ / (u_kᵀ u_k)`
    /// and reflector `u_k` in row `k` of the `[m, dim]` parameter. A zero
    /// reflector acts as the identity.
    pub fn householder(&mut self, store: &'a ParamStore, u: ParamId, x: Var) -> Var {
        let shape = store.entry(u).shape.clone();
        assert_eq!(shape.len(), 2, "householder parameter must be a matrix");
        let (m, d) = (shape[0], shape[1]);
        assert_eq!(self.dim(x), d, "householder input dimension");
        let p = self.pref(store, u);
        let uv = self.pvals(p);
        let mut v = self.nodes[x.0].value.clone();
        let mut cache = Vec::with_capacity(m * d);
        for k in (0..m).rev() {
            cache.extend_from_slice(&v);
            reflect(&uv[k * d..(k + 1) * d], &mut v);
        }
        let rg = self.rg(x) || self.trainable(p);
        self.push(v, Op::Householder { u: p, x, cache }, rg)
    }

    /// `R x` for upper-triangular `R` with diagonal `exp(log_diag)` and strictly
    /// upper entries packed row by row in `r` (`dim (dim - 1) / 2` values).
    pub fn upper_tri(&mut self, store: &'a ParamStore, r: ParamId, log_diag: ParamId, x: Var) -> Var {
        let pr = self.pref(store, r);
        let pd = self.pref(store, log_diag);
        let d = pd.len;
        assert_eq!(pr.len, d * (d - 1) / 2, "packed triangle length");
        assert_eq!(self.dim(x), d, "triangular input dimension");
        let y = upper_tri_apply(self.pvals(pr), self.pvals(pd), &self.nodes[x.0].value);
        let rg = self.rg(x) || self.trainable(pr) || self.trainable(pd);
        self.push(y, Op::UpperTri { r: pr, log_diag: pd, x }, rg)
    }

    /// Unit parent-to-joint directions per joint, zero for the root. Bones
    /// shorter than [`MIN_BONE_LENGTH`] yield `(0, 0, 1)` with zero gradient.
    pub fn limb_directions(&mut self, x: Var, parents: &[i32]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), 3 * parents.len(), "pose dimension");
        let (y, norms) = limb_directions_value(xv, parents);
        let rg = self.rg(x);
        self.push(
            y,
            Op::LimbDirs {
                x,
                parents: parents.to_vec(),
                norms,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeding `d loss = seed`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got a node of length {n}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        let mut params: Vec<Vec<f64>> = self
            .stores
            .iter()
            .zip(&self.frozen)
            .map(|(s, &f)| if f { Vec::new() } else { vec![0.0; s.len()] })
            .collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(gy) = rest[0].as_deref() else {
                continue;
            };
            self.backward_node(node, gy, before, &mut params);
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! g {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => {
                if self.trainable(*p) {
                    add_into(&mut params[p.slot][p.offset..p.offset + p.len], gy);
                }
            }
            Op::Affine { w, b, x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = &nodes[x.0].value;
                if let Some(b) = b {
                    if self.trainable(*b) {
                        add_into(&mut params[b.slot][b.offset..b.offset + b.len], gy);
                    }
                }
                if self.trainable(*w) {
                    let gw = &mut params[w.slot][w.offset..w.offset + w.len];
                    for i in 0..rows {
                        axpy(gy[i], xv, &mut gw[i * cols..(i + 1) * cols]);
                    }
                }
                if want(*x) {
                    let wv = self.pvals(*w);
                    let gx = g!(*x);
                    for i in 0..rows {
                        axpy(gy[i], &wv[i * cols..(i + 1) * cols], gx);
                    }
                }
            }
            Op::Gru {
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                x,
                h,
                cache,
            } => {
                let hidden = gy.len();
                let input = nodes[x.0].value.len();
                let xv = &nodes[x.0].value;
                let hv = &nodes[h.0].value;
                let (r, rest) = cache.split_at(hidden);
                let (z, rest) = rest.split_at(hidden);
                let (nn, ghn) = rest.split_at(hidden);
                let mut d_gi = vec![0.0; 3 * hidden];
                let mut d_gh = vec![0.0; 3 * hidden];
                let mut dh_direct = vec![0.0; hidden];
                for k in 0..hidden {
                    let dz = gy[k] * (hv[k] - nn[k]);
                    let dn = gy[k] * (1.0 - z[k]);
                    dh_direct[k] = gy[k] * z[k];
                    let dpre_n = dn * (1.0 - nn[k] * nn[k]);
                    let dr = dpre_n * ghn[k];
                    let dpre_r = dr * r[k] * (1.0 - r[k]);
                    let dpre_z = dz * z[k] * (1.0 - z[k]);
                    d_gi[k] = dpre_r;
                    d_gi[hidden + k] = dpre_z;
                    d_gi[2 * hidden + k] = dpre_n;
                    d_gh[k] = dpre_r;
                    d_gh[hidden + k] = dpre_z;
                    d_gh[2 * hidden + k] = dpre_n * r[k];
                }
                if self.trainable(*b_ih) {
                    add_into(&mut params[b_ih.slot][b_ih.offset..b_ih.offset + b_ih.len], &d_gi);
                }
                if self.trainable(*b_hh) {
                    add_into(&mut params[b_hh.slot][b_hh.offset..b_hh.offset + b_hh.len], &d_gh);
                }
                if self.trainable(*w_ih) {
                    let gw = &mut params[w_ih.slot][w_ih.offset..w_ih.offset + w_ih.len];
                    for (i, &gi) in d_gi.iter().enumerate() {
                        axpy(gi, xv, &mut gw[i * input..(i + 1) * input]);
                    }
                }
                if self.trainable(*w_hh) {
                    let gw = &mut params[w_hh.slot][w_hh.offset..w_hh.offset + w_hh.len];
                    for (i, &gh) in d_gh.iter().enumerate() {
                        axpy(gh, hv, &mut gw[i * hidden..(i + 1) * hidden]);
                    }
                }
                if want(*x) {
                    let wi = self.pvals(*w_ih);
                    let gx = g!(*x);
                    for (i, &gi) in d_gi.iter().enumerate() {
                        axpy(gi, &wi[i * input..(i + 1) * input], gx);
                    }
                }
                if want(*h) {
                    let wh = self.pvals(*w_hh);
                    let gh_out = g!(*h);
                    add_into(gh_out, &dh_direct);
                    for (i, &gh) in d_gh.iter().enumerate() {
                        axpy(gh, &wh[i * hidden..(i + 1) * hidden], gh_out);
                    }
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(g!(*a), gy);
                }
                if want(*b) {
                    add_into(g!(*b), gy);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(g!(*a), gy);
                }
                if want(*b) {
                    axpy(-1.0, gy, g!(*b));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = &nodes[b.0].value;
                    for ((o, g), y) in g!(*a).iter_mut().zip(gy).zip(bv) {
                        *o += g * y;
                    }
                }
                if want(*b) {
                    let av = &nodes[a.0].value;
                    for ((o, g), y) in g!(*b).iter_mut().zip(gy).zip(av) {
                        *o += g * y;
                    }
                }
            }
            Op::Scale(x, c) => axpy(*c, gy, g!(*x)),
            Op::Offset(x) => add_into(g!(*x), gy),
            Op::Tanh(x) => {
                for ((o, g), y) in g!(*x).iter_mut().zip(gy).zip(&node.value) {
                    *o += g * (1.0 - y * y);
                }
            }
            Op::Exp(x) => {
                for ((o, g), y) in g!(*x).iter_mut().zip(gy).zip(&node.value) {
                    *o += g * y;
                }
            }
            Op::Ln(x) => {
                let xv = &nodes[x.0].value;
                for ((o, g), v) in g!(*x).iter_mut().zip(gy).zip(xv) {
                    *o += g / v;
                }
            }
            Op::Abs(x) => {
                let xv = &nodes[x.0].value;
                for ((o, g), v) in g!(*x).iter_mut().zip(gy).zip(xv) {
                    *o += if *v >= 0.0 { *g } else { -*g };
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &nodes[x.0].value;
                for ((o, g), v) in g!(*x).iter_mut().zip(gy).zip(xv) {
                    if *v >= *lo && *v <= *hi {
                        *o += g;
                    }
                }
            }
            Op::MaxConst { x, floor } => {
                let xv = &nodes[x.0].value;
                for ((o, g), v) in g!(*x).iter_mut().zip(gy).zip(xv) {
                    if *v >= *floor {
                        *o += g;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if want(*p) {
                        add_into(g!(*p), &gy[at..at + len]);
                    }
                    at += len;
                }
            }
            Op::Slice { x, start } => {
                let gx = g!(*x);
                add_into(&mut gx[*start..*start + gy.len()], gy);
            }
            Op::Gather { x, idx } => {
                let gx = g!(*x);
                for (g, &i) in gy.iter().zip(idx) {
                    gx[i] += g;
                }
            }
            Op::Sum(x) => {
                for o in g!(*x).iter_mut() {
                    *o += gy[0];
                }
            }
            Op::SumSq(x) => {
                let xv = &nodes[x.0].value;
                for (o, v) in g!(*x).iter_mut().zip(xv) {
                    *o += 2.0 * gy[0] * v;
                }
            }
            Op::MinOf { x, arg } => {
                g!(*x)[*arg] += gy[0];
            }
            Op::KlDiag { qm, qls, pm, pls } => {
                let (qmv, qlv, pmv, plv) = (
                    &nodes[qm.0].value,
                    &nodes[qls.0].value,
                    &nodes[pm.0].value,
                    &nodes[pls.0].value,
                );
                let d = qmv.len();
                let mut gqm = vec![0.0; d];
                let mut gql = vec![0.0; d];
                let mut gpm = vec![0.0; d];
                let mut gpl = vec![0.0; d];
                for i in 0..d {
                    let vq = (2.0 * qlv[i]).exp();
                    let vp = (2.0 * plv[i]).exp();
                    let delta = qmv[i] - pmv[i];
                    gqm[i] = gy[0] * delta / vp;
                    gpm[i] = -gqm[i];
                    gql[i] = gy[0] * (vq / vp - 1.0);
                    gpl[i] = gy[0] * (1.0 - (vq + delta * delta) / vp);
                }
                for (v, gv) in [(*qm, gqm), (*qls, gql), (*pm, gpm), (*pls, gpl)] {
                    if want(v) {
                        add_into(g!(v), &gv);
                    }
                }
            }
            Op::PRelu { x, log_slope } => {
                let s = self.pvals(*log_slope)[0].exp();
                let xv = &nodes[x.0].value;
                if self.trainable(*log_slope) {
                    let ds: f64 = xv.iter().zip(gy).filter(|(v, _)| **v < 0.0).map(|(v, g)| g * s * v).sum();
                    params[log_slope.slot][log_slope.offset] += ds;
                }
                if want(*x) {
                    for ((o, g), v) in g!(*x).iter_mut().zip(gy).zip(xv) {
                        *o += if *v >= 0.0 { *g } else { s * g };
                    }
                }
            }
            Op::Householder { u, x, cache } => {
                let uv = self.pvals(*u);
                let d = gy.len();
                let m = u.len / d;
                let mut gv = gy.to_vec();
                let train = self.trainable(*u);
                // reflectors were applied from k = m-1 down to 0
                for k in 0..m {
                    let uk = &uv[k * d..(k + 1) * d];
                    let s = dot(uk, uk);
                    if s < f64::MIN_POSITIVE {
                        continue;
                    }
                    let vin = &cache[(m - 1 - k) * d..(m - k) * d];
                    let a = dot(uk, vin);
                    let b = dot(uk, &gv);
                    if train {
                        let gu = &mut params[u.slot][u.offset + k * d..u.offset + (k + 1) * d];
                        for i in 0..d {
                            gu[i] -= 2.0 * (vin[i] * b / s + a * gv[i] / s - 2.0 * a * b * uk[i] / (s * s));
                        }
                    }
                    axpy(-2.0 * b / s, uk, &mut gv);
                }
                if want(*x) {
                    add_into(g!(*x), &gv);
                }
            }
            Op::UpperTri { r, log_diag, x } => {
                let rv = self.pvals(*r);
                let ld = self.pvals(*log_diag);
                let xv = &nodes[x.0].value;
                let d = xv.len();
                if self.trainable(*log_diag) {
                    let gd = &mut params[log_diag.slot][log_diag.offset..log_diag.offset + d];
                    for i in 0..d {
                        gd[i] += gy[i] * ld[i].exp() * xv[i];
                    }
                }
                if self.trainable(*r) {
                    let gr = &mut params[r.slot][r.offset..r.offset + r.len];
                    let mut at = 0;
                    for i in 0..d {
                        for j in i + 1..d {
                            gr[at] += gy[i] * xv[j];
                            at += 1;
                        }
                    }
                }
                if want(*x) {
                    let gx = g!(*x);
                    let mut at = 0;
                    for i in 0..d {
                        gx[i] += ld[i].exp() * gy[i];
                        for j in i + 1..d {
                            gx[j] += rv[at] * gy[i];
                            at += 1;
                        }
                    }
                }
            }
            Op::LimbDirs { x, parents, norms } => {
                let gx = g!(*x);
                for (j, &p) in parents.iter().enumerate() {
                    let n = norms[j];
                    if p < 0 || n == 0.0 {
                        continue;
                    }
                    let p = p as usize;
                    let l = &node.value[3 * j..3 * j + 3];
                    let gl = &gy[3 * j..3 * j + 3];
                    let proj = dot(l, gl);
                    for k in 0..3 {
                        let dv = (gl[k] - l[k] * proj) / n;
                        gx[3 * j + k] += dv;
                        gx[3 * p + k] -= dv;
                    }
                }
            }
        }
    }
}

/// Parameter and node gradients from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Vec<f64>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Flat gradient for a store slot (empty when the store was frozen).
    pub fn slot(&self, slot: usize) -> &[f64] {
        &self.params[slot]
    }

    pub fn into_slot(mut self, slot: usize) -> Vec<f64> {
        std::mem::take(&mut self.params[slot])
    }

    /// Gradient of `store` as registered in `graph`, zero-filled when the store
    /// never entered the graph.
    pub fn for_store(&self, graph: &Graph<'_>, store: &ParamStore) -> Vec<f64> {
        match graph.slot_of(store) {
            Some(s) if !self.params[s].is_empty() => self.params[s].clone(),
            _ => vec![0.0; store.len()],
        }
    }

    /// Gradient reaching a node; zeros when nothing flowed into it.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Vec<f64> {
        self.nodes
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; graph.dim(v)])
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for i in 4 * chunks..a.len() {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Applies one Householder reflection in place; identity for a zero reflector.
pub(crate) fn reflect(u: &[f64], v: &mut [f64]) {
    let s = dot(u, u);
    if s < f64::MIN_POSITIVE {
        return;
    }
    let c = 2.0 * dot(u, v) / s;
    axpy(-c, u, v);
}

pub(crate) fn upper_tri_apply(r: &[f64], log_diag: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut y = vec![0.0; d];
    let mut at = 0;
    for i in 0..d {
        let mut acc = log_diag[i].exp() * x[i];
        for j in i + 1..d {
            acc += r[at] * x[j];
            at += 1;
        }
        y[i] = acc;
    }
    y
}

pub(crate) fn kl_diag_value(qm: &[f64], qls: &[f64], pm: &[f64], pls: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..qm.len() {
        let vq = (2.0 * qls[i]).exp();
        let vp = (2.0 * pls[i]).exp();
        let delta = qm[i] - pm[i];
        s += pls[i] - qls[i] + (vq + delta * delta) / (2.0 * vp) - 0.5;
    }
    s
}

/// Returns the direction vector and per-joint bone lengths (0 for the root
/// and for degenerate bones).
pub(crate) fn limb_directions_value(x: &[f64], parents: &[i32]) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut norms = vec![0.0; parents.len()];
    for (j, &p) in parents.iter().enumerate() {
        if p < 0 {
            continue;
        }
        let p = p as usize;
        let v = [x[3 * j] - x[3 * p], x[3 * j + 1] - x[3 * p + 1], x[3 * j + 2] - x[3 * p + 2]];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n < MIN_BONE_LENGTH {
            y[3 * j + 2] = 1.0;
        } else {
            norms[j] = n;
            for k in 0..3 {
                y[3 * j + k] = v[k] / n;
            }
        }
    }
    (y, norms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", &[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let loss = g.sum(v);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.for_store(&g, &store), vec![1.0; 4]);
    }

    #[test]
    fn squared_norm_of_zero_map_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add_zeros("w", &[2, 3]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, -2.0, 0.5]);
        let y = g.affine(&store, w, None, x);
        let loss = g.sum_sq(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.for_store(&g, &store).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_store_passes_gradient_through() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1, 2], vec![2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        g.freeze(&store);
        let x = g.variable(vec![1.0, 1.0]);
        let y = g.affine(&store, w, None, x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![2.0, 3.0]);
        assert!(grads.slot(g.slot_of(&store).unwrap()).is_empty());
    }

    #[test]
    fn min_routes_gradient_to_first_minimizer() {
        let mut g = Graph::new();
        let x = g.variable(vec![3.0, 1.0, 1.0, 2.0]);
        let m = g.min_of(x);
        assert_eq!(g.scalar(m), 1.0);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut g = Graph::new();
        let x = g.variable(vec![300.0, 50.0, -1.0]);
        let c = g.clamp(x, 0.0, 160.0);
        assert_eq!(g.value(c), &[160.0, 50.0, 0.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![0.0, 1.0, 0.0]);
    }
}
