//! Reverse-mode autodiff on an append-only tape.
//!
//! Graphs are built per forward pass (define-by-run). Node ids grow
//! monotonically, so a reverse id sweep is a valid topological order for
//! backpropagation. Backward closures capture `Rc` clones of whatever values
//! they need; they never touch the tape itself.

use crate::{NdArray, Scalar};
use std::cell::RefCell;
use std::rc::Rc;

pub(crate) type BackFn<T> = Box<dyn Fn(&NdArray<T>, &mut dyn FnMut(usize, NdArray<T>))>;

struct Node<T: Scalar> {
    value: Rc<NdArray<T>>,
    back: Option<BackFn<T>>,
}

/// The autodiff tape. One per forward pass; dropped (or reused via a fresh
/// instance) after the gradients have been extracted.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value().shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&NdArray<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: NdArray<T>, back: Option<BackFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), back });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push_node(&self, value: NdArray<T>, back: Option<BackFn<T>>) -> Var<'_, T> {
        self.push(value, back)
    }

    /// Insert a leaf. Leaves have no backward function; their gradients are
    /// retained by [`Tape::backward`] for extraction.
    pub fn leaf(&self, value: NdArray<T>) -> Var<'_, T> {
        self.push(value, None)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(NdArray::scalar(v))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that received one; intermediate grads are freed as the sweep passes.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<NdArray<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(NdArray::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            if nodes[id].back.is_none() {
                continue; // leaf: keep its gradient
            }
            let Some(g) = grads[id].take() else { continue };
            let back = nodes[id].back.as_ref().unwrap();
            back(&g, &mut |pid: usize, contrib: NdArray<T>| {
                debug_assert!(pid < id, "backward edge must point to an earlier node");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Gradients { grads }
    }

    /// Stack 2-d blocks along rows.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<NdArray<T>>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        let mut rows = 0;
        for v in &vals {
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let sizes: Vec<usize> = vals.iter().map(|v| v.numel()).collect();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.push(
            NdArray::from_vec(&[rows, cols], data),
            Some(Box::new(move |g, send| {
                let mut off = 0;
                for (k, id) in ids.iter().enumerate() {
                    let n = sizes[k];
                    let part = NdArray::from_vec(&shapes[k], g.data()[off..off + n].to_vec());
                    send(*id, part);
                    off += n;
                }
            })),
        )
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<NdArray<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub(crate) fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Insert a new leaf on the same tape as `self`.
    pub fn leaf_like(&self, value: NdArray<T>) -> Var<'t, T> {
        self.tape.leaf(value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    // ---- elementwise ----

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let out = a.zip_map(&b, |x, y| x + y);
        let (ia, ib) = (self.id, o.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.clone());
                send(ib, g.clone());
            })),
        )
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let out = a.zip_map(&b, |x, y| x - y);
        let (ia, ib) = (self.id, o.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.clone());
                send(ib, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let out = a.zip_map(&b, |x, y| x * y);
        let (ia, ib) = (self.id, o.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.zip_map(&b, |gv, bv| gv * bv));
                send(ib, g.zip_map(&a, |gv, av| gv * av));
            })),
        )
    }

    pub fn div(self, o: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let out = a.zip_map(&b, |x, y| x / y);
        let (ia, ib) = (self.id, o.id);
        let out_rc = Rc::new(out.clone());
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.zip_map(&b, |gv, bv| gv / bv));
                let mut db = g.zip_map(&out_rc, |gv, ov| gv * ov);
                db = db.zip_map(&b, |x, bv| -(x / bv));
                send(ib, db);
            })),
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        let a = self.value();
        let ia = self.id;
        self.tape.push(
            a.map(|x| -x),
            Some(Box::new(move |g, send| send(ia, g.map(|x| -x)))),
        )
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let a = self.value();
        let ia = self.id;
        self.tape.push(a.map(|x| x + c), Some(Box::new(move |g, send| send(ia, g.clone()))))
    }

    pub fn mul_scalar(self, c: T) -> Var<'t, T> {
        let a = self.value();
        let ia = self.id;
        self.tape.push(a.map(|x| x * c), Some(Box::new(move |g, send| send(ia, g.map(|x| x * c)))))
    }

    /// Multiply by a 1-element variable (e.g. a learnable temperature).
    pub fn scale_by(self, s: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let sv = s.value();
        assert_eq!(sv.numel(), 1, "scale_by takes a 1-element scalar var");
        let c = sv.item();
        let (ia, is) = (self.id, s.id);
        self.tape.push(
            a.map(|x| x * c),
            Some(Box::new(move |g, send| {
                send(ia, g.map(|x| x * c));
                let ds: T = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).sum();
                send(is, NdArray::scalar(ds));
            })),
        )
    }

    /// Elementwise reciprocal.
    pub fn recip(self) -> Var<'t, T> {
        let a = self.value();
        let ia = self.id;
        self.tape.push(
            a.map(|x| T::one() / x),
            Some(Box::new(move |g, send| {
                send(ia, g.zip_map(&a, |gv, av| -(gv / (av * av))));
            })),
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(sigmoid_stable);
        let out_rc = Rc::new(out.clone());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.zip_map(&out_rc, |gv, s| gv * s * (T::one() - s)));
            })),
        )
    }

    pub fn silu(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(|x| x * sigmoid_stable(x));
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(
                    ia,
                    g.zip_map(&a, |gv, x| {
                        let s = sigmoid_stable(x);
                        gv * (s + x * s * (T::one() - s))
                    }),
                );
            })),
        )
    }

    pub fn tanh_(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(|x| x.tanh());
        let out_rc = Rc::new(out.clone());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.zip_map(&out_rc, |gv, t| gv * (T::one() - t * t)));
            })),
        )
    }

    pub fn exp_(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(|x| x.exp());
        let out_rc = Rc::new(out.clone());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.zip_map(&out_rc, |gv, e| gv * e));
            })),
        )
    }

    pub fn ln_(self) -> Var<'t, T> {
        let a = self.value();
        let ia = self.id;
        self.tape.push(
            a.map(|x| x.ln()),
            Some(Box::new(move |g, send| {
                send(ia, g.zip_map(&a, |gv, av| gv / av));
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let a = self.value();
        let out = a.reshaped(shape);
        let in_shape = a.shape().to_vec();
        let ia = self.id;
        self.tape.push(out, Some(Box::new(move |g, send| send(ia, g.reshaped(&in_shape)))))
    }

    pub fn transpose2(self) -> Var<'t, T> {
        let a = self.value();
        let ia = self.id;
        self.tape.push(
            a.transposed2(),
            Some(Box::new(move |g, send| send(ia, g.transposed2()))),
        )
    }

    pub fn slice_rows(self, r0: usize, r1: usize) -> Var<'t, T> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        assert!(r0 < r1 && r1 <= rows, "slice_rows {r0}..{r1} of {rows}");
        let out = NdArray::from_vec(&[r1 - r0, cols], a.data()[r0 * cols..r1 * cols].to_vec());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                let mut full = NdArray::zeros(&[rows, cols]);
                full.data_mut()[r0 * cols..r1 * cols].copy_from_slice(g.data());
                send(ia, full);
            })),
        )
    }

    /// Stop-gradient: same value, no backward edge.
    pub fn detach(self) -> Var<'t, T> {
        let a = self.value();
        self.tape.push((*a).clone(), None)
    }

    /// Straight-through estimator as a primitive: the output value is `hard`
    /// copied verbatim (no floating-point recombination), while the gradient
    /// passes to `self` (the soft relaxation) unchanged.
    pub fn straight_through(self, hard: NdArray<T>) -> Var<'t, T> {
        let soft = self.value();
        assert_eq!(soft.shape(), hard.shape(), "straight_through shape mismatch");
        let is = self.id;
        self.tape.push(hard, Some(Box::new(move |g, send| send(is, g.clone()))))
    }

    // ---- linear algebra ----

    pub fn matmul(self, o: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let out = NdArray::gemm(&a, false, &b, false);
        let (ia, ib) = (self.id, o.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, NdArray::gemm(g, false, &b, true));
                send(ib, NdArray::gemm(&a, true, g, false));
            })),
        )
    }

    /// `self · oᵀ` — the similarity-matrix form.
    pub fn matmul_nt(self, o: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let out = NdArray::gemm(&a, false, &b, true);
        let (ia, ib) = (self.id, o.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, NdArray::gemm(g, false, &b, false));
                send(ib, NdArray::gemm(g, true, &a, false));
            })),
        )
    }

    /// Row-broadcast bias add: `(R,C) + (C)`.
    pub fn add_row(self, bias: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), bias.value());
        let (rows, cols) = (a.rows(), a.cols());
        assert_eq!(b.numel(), cols, "bias length {} vs {} columns", b.numel(), cols);
        let mut out = (*a).clone();
        for r in 0..rows {
            for c in 0..cols {
                let v = out.at2(r, c) + b.data()[c];
                out.set2(r, c, v);
            }
        }
        let (ia, ib) = (self.id, bias.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.clone());
                let mut db = NdArray::zeros(&[cols]);
                for r in 0..rows {
                    for c in 0..cols {
                        db.data_mut()[c] += g.at2(r, c);
                    }
                }
                send(ib, db);
            })),
        )
    }

    /// Column-broadcast bias add: `(R,C) + (R)`, one bias per row. This is
    /// the channel bias for channel-first flattened volumes.
    pub fn add_col(self, bias: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), bias.value());
        let (rows, cols) = (a.rows(), a.cols());
        assert_eq!(b.numel(), rows, "bias length {} vs {} rows", b.numel(), rows);
        let mut out = (*a).clone();
        for r in 0..rows {
            let bv = b.data()[r];
            for c in 0..cols {
                let v = out.at2(r, c) + bv;
                out.set2(r, c, v);
            }
        }
        let (ia, ib) = (self.id, bias.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                send(ia, g.clone());
                let mut db = NdArray::zeros(&[rows]);
                for r in 0..rows {
                    db.data_mut()[r] = g.data()[r * cols..(r + 1) * cols].iter().copied().sum();
                }
                send(ib, db);
            })),
        )
    }

    /// Per-row multiplication by fixed (non-differentiated) factors.
    pub fn row_scale_const(self, factors: Vec<T>) -> Var<'t, T> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        assert_eq!(factors.len(), rows);
        let mut out = (*a).clone();
        for r in 0..rows {
            for c in 0..cols {
                let v = out.at2(r, c) * factors[r];
                out.set2(r, c, v);
            }
        }
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                let mut dg = g.clone();
                for r in 0..rows {
                    for c in 0..cols {
                        let v = dg.at2(r, c) * factors[r];
                        dg.set2(r, c, v);
                    }
                }
                send(ia, dg);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(self) -> Var<'t, T> {
        let a = self.value();
        let s: T = a.data().iter().copied().sum();
        let shape = a.shape().to_vec();
        let ia = self.id;
        self.tape.push(
            NdArray::scalar(s),
            Some(Box::new(move |g, send| send(ia, NdArray::full(&shape, g.item())))),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let a = self.value();
        let n = T::from_f64_c(a.numel() as f64);
        let s: T = a.data().iter().copied().sum();
        let shape = a.shape().to_vec();
        let ia = self.id;
        self.tape.push(
            NdArray::scalar(s / n),
            Some(Box::new(move |g, send| send(ia, NdArray::full(&shape, g.item() / n)))),
        )
    }

    pub fn row_sums(self) -> Var<'t, T> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = NdArray::zeros(&[rows]);
        for r in 0..rows {
            out.data_mut()[r] = a.data()[r * cols..(r + 1) * cols].iter().copied().sum();
        }
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                let mut dg = NdArray::zeros(&[rows, cols]);
                for r in 0..rows {
                    let gv = g.data()[r];
                    for c in 0..cols {
                        dg.data_mut()[r * cols + c] = gv;
                    }
                }
                send(ia, dg);
            })),
        )
    }

    // ---- softmax family ----

    pub fn softmax_rows(self) -> Var<'t, T> {
        let a = self.value();
        let out = softmax_2d(&a, Axis::Rows, None);
        let out_rc = Rc::new(out.clone());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| send(ia, softmax_backward(&out_rc, g, Axis::Rows)))),
        )
    }

    /// Softmax along axis 0 (each column becomes a distribution).
    pub fn softmax_cols(self) -> Var<'t, T> {
        let a = self.value();
        let out = softmax_2d(&a, Axis::Cols, None);
        let out_rc = Rc::new(out.clone());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| send(ia, softmax_backward(&out_rc, g, Axis::Cols)))),
        )
    }

    /// Row softmax with a boolean visibility mask. Disallowed positions get
    /// exactly `0.0` weight: their values and logits cannot influence the
    /// output in any bit. Every row must keep at least one allowed entry.
    pub fn masked_softmax_rows(self, mask: &[bool]) -> Var<'t, T> {
        let a = self.value();
        assert_eq!(mask.len(), a.numel(), "mask length mismatch");
        let mask: Rc<[bool]> = mask.into();
        let out = softmax_2d(&a, Axis::Rows, Some(&mask));
        let out_rc = Rc::new(out.clone());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| send(ia, softmax_backward(&out_rc, g, Axis::Rows)))),
        )
    }

    pub fn logsumexp_rows(self) -> Var<'t, T> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = NdArray::zeros(&[rows]);
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&x| (x - m).exp()).sum();
            out.data_mut()[r] = m + s.ln();
        }
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                let w = softmax_2d(&a, Axis::Rows, None);
                let mut dg = NdArray::zeros(&[rows, cols]);
                for r in 0..rows {
                    let gv = g.data()[r];
                    for c in 0..cols {
                        dg.data_mut()[r * cols + c] = gv * w.at2(r, c);
                    }
                }
                send(ia, dg);
            })),
        )
    }

    pub fn take_diag(self) -> Var<'t, T> {
        let a = self.value();
        let n = a.rows();
        assert_eq!(n, a.cols(), "take_diag on non-square {:?}", a.shape());
        let out = NdArray::from_vec(&[n], (0..n).map(|i| a.at2(i, i)).collect());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                let mut dg = NdArray::zeros(&[n, n]);
                for i in 0..n {
                    dg.set2(i, i, g.data()[i]);
                }
                send(ia, dg);
            })),
        )
    }

    /// Row-wise L2 normalization. Panics if any row norm falls below
    /// `min_norm`; callers validate first when a recoverable error is wanted.
    pub fn l2_normalize_rows(self, min_norm: T) -> Var<'t, T> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let mut norms = vec![T::zero(); rows];
        let mut out = NdArray::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            assert!(n > min_norm, "l2_normalize_rows: row {r} has norm {n}");
            norms[r] = n;
            for c in 0..cols {
                out.data_mut()[r * cols + c] = row[c] / n;
            }
        }
        let out_rc = Rc::new(out.clone());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, send| {
                let mut dg = NdArray::zeros(&[rows, cols]);
                for r in 0..rows {
                    let o = &out_rc.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: T = o.iter().zip(gr).map(|(&ov, &gv)| ov * gv).sum();
                    for c in 0..cols {
                        dg.data_mut()[r * cols + c] = (gr[c] - o[c] * dot) / norms[r];
                    }
                }
                send(ia, dg);
            })),
        )
    }

    /// Mean binary cross-entropy over logits, numerically stable.
    pub fn bce_logits_mean(self, targets: &[bool]) -> Var<'t, T> {
        let a = self.value();
        assert_eq!(a.numel(), targets.len(), "bce target length mismatch");
        let n = T::from_f64_c(targets.len() as f64);
        let mut total = T::zero();
        for (&x, &y) in a.data().iter().zip(targets) {
            let yv = if y { T::one() } else { T::zero() };
            // max(x,0) - x*y + ln(1 + exp(-|x|))
            total += x.max(T::zero()) - x * yv + (T::one() + (-x.abs()).exp()).ln();
        }
        let targets: Rc<[bool]> = targets.into();
        let ia = self.id;
        self.tape.push(
            NdArray::scalar(total / n),
            Some(Box::new(move |g, send| {
                let gv = g.item() / n;
                let mut dg = NdArray::zeros(a.shape());
                for (i, (&x, &y)) in a.data().iter().zip(targets.iter()).enumerate() {
                    let yv = if y { T::one() } else { T::zero() };
                    dg.data_mut()[i] = gv * (sigmoid_stable(x) - yv);
                }
                send(ia, dg);
            })),
        )
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Axis {
    Rows,
    Cols,
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of a 2-d array along the given axis, with an optional visibility
/// mask (masked entries end up exactly zero).
fn softmax_2d<T: Scalar>(a: &NdArray<T>, axis: Axis, mask: Option<&Rc<[bool]>>) -> NdArray<T> {
    let (rows, cols) = (a.rows(), a.cols());
    let mut out = NdArray::zeros(&[rows, cols]);
    let (outer, inner) = match axis {
        Axis::Rows => (rows, cols),
        Axis::Cols => (cols, rows),
    };
    for o in 0..outer {
        let idx = |i: usize| match axis {
            Axis::Rows => o * cols + i,
            Axis::Cols => i * cols + o,
        };
        let allowed = |i: usize| mask.map_or(true, |m| m[idx(i)]);
        let mut m = T::neg_infinity();
        let mut any = false;
        for i in 0..inner {
            if allowed(i) {
                m = m.max(a.data()[idx(i)]);
                any = true;
            }
        }
        assert!(any, "softmax: no allowed entry along axis element {o}");
        let mut z = T::zero();
        for i in 0..inner {
            if allowed(i) {
                let e = (a.data()[idx(i)] - m).exp();
                out.data_mut()[idx(i)] = e;
                z += e;
            }
        }
        for i in 0..inner {
            if allowed(i) {
                out.data_mut()[idx(i)] = out.data()[idx(i)] / z;
            }
        }
    }
    out
}

/// dL/dx for y = softmax(x): w ⊙ (g − ⟨g, w⟩). Masked entries carry w = 0 and
/// therefore zero gradient automatically.
fn softmax_backward<T: Scalar>(w: &NdArray<T>, g: &NdArray<T>, axis: Axis) -> NdArray<T> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut dg = NdArray::zeros(&[rows, cols]);
    let (outer, inner) = match axis {
        Axis::Rows => (rows, cols),
        Axis::Cols => (cols, rows),
    };
    for o in 0..outer {
        let idx = |i: usize| match axis {
            Axis::Rows => o * cols + i,
            Axis::Cols => i * cols + o,
        };
        let mut dot = T::zero();
        for i in 0..inner {
            dot += w.data()[idx(i)] * g.data()[idx(i)];
        }
        for i in 0..inner {
            dg.data_mut()[idx(i)] = w.data()[idx(i)] * (g.data()[idx(i)] - dot);
        }
    }
    dg
}
