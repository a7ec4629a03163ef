//! Reverse-mode automatic differentiation over flat row-major arrays.
//!
//! Every node owns its value; the tape is replayed backwards once from a
//! scalar output. Shapes are interpreted per op, with the last dimension as
//! the feature axis.

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var>, inp: usize, out: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Pass(Var),
    Scale(Var, T),
    Gather { x: Var, idx: Vec<u32> },
    Concat { a: Var, b: Var, da: usize, db: usize },
    LayerNorm { x: Var, g: Var, b: Var, dim: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax { x: Var, dim: usize },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Vec<T>, classes: usize },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

#[inline]
fn c<T: Float>(x: f64) -> T {
    T::from(x).unwrap()
}

/// C += A·B with A m×k, B k×n.
pub(crate) fn mm_nn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// C += A·Bᵀ with A m×k, B n×k.
pub(crate) fn mm_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C += Aᵀ·B with A m×k, B m×n, C k×n.
pub(crate) fn mm_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let br = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    }
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    let k: T = c((2.0 / std::f64::consts::PI).sqrt());
    let a: T = c(0.044715);
    let half: T = c(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x);
    (y, dy)
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap()
    }

    pub fn leaf(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "leaf shape");
        self.push(value, shape.to_vec(), Op::Leaf)
    }

    /// x[.., in] · w[in, out] + b[out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let ws = self.shape(w);
        let (inp, out) = (ws[0], ws[1]);
        assert_eq!(self.last_dim(x), inp, "linear input width");
        let rows = self.value(x).len() / inp;
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), out);
            for r in y.chunks_exact_mut(out) {
                r.copy_from_slice(bv);
            }
        }
        mm_nn(self.value(x), self.value(w), &mut y, rows, inp, out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = out;
        self.push(y, shape, Op::Linear { x, w, b, inp, out })
    }

    /// Batched a[B, M, K] · b[B, K, N], or b[B, N, K] transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dim");
        let mut y = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            let (ai, bi) = (&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n]);
            let yi = &mut y[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(ai, bi, yi, m, k, n);
            } else {
                mm_nn(ai, bi, yi, m, k, n);
            }
        }
        self.push(y, vec![batch, m, n], Op::Bmm { a, b, batch, m, k, n, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        self.push(y, shape, Op::Add(a, b))
    }

    /// Adds a constant array (no gradient flows into it).
    pub fn add_const(&mut self, a: Var, k: &[T]) -> Var {
        assert_eq!(self.value(a).len(), k.len(), "add_const length");
        let y = self.value(a).iter().zip(k).map(|(&p, &q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        self.push(y, shape, Op::Pass(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).iter().map(|&p| p * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(y, shape, Op::Scale(a, s))
    }

    /// out[i] = x[idx[i]]; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, idx: Vec<u32>, shape: &[usize]) -> Var {
        assert_eq!(idx.len(), shape.iter().product::<usize>(), "gather shape");
        let xv = self.value(x);
        let y = idx.iter().map(|&i| xv[i as usize]).collect();
        self.push(y, shape.to_vec(), Op::Gather { x, idx })
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.last_dim(a), self.last_dim(b));
        let rows = self.value(a).len() / da;
        assert_eq!(rows * db, self.value(b).len(), "concat rows");
        let mut y = Vec::with_capacity(rows * (da + db));
        let (av, bv) = (self.value(a), self.value(b));
        for r in 0..rows {
            y.extend_from_slice(&av[r * da..(r + 1) * da]);
            y.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = da + db;
        self.push(y, shape, Op::Concat { a, b, da, db })
    }

    /// Layer normalisation over the last dimension, eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let dim = self.last_dim(x);
        let eps: T = c(1e-5);
        let n = c::<T>(dim as f64);
        let xv = self.value(x);
        let (gv, bv) = (self.value(g), self.value(b));
        let rows = xv.len() / dim;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                y[r * dim + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::LayerNorm { x, g, b, dim, xhat, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::Gelu(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let dim = self.last_dim(x);
        let mut y = self.value(x).to_vec();
        for row in y.chunks_exact_mut(dim) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::Softmax { x, dim })
    }

    /// Mean categorical cross-entropy of logits [n, classes] against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Var {
        let classes = self.last_dim(logits);
        let lv = self.value(logits);
        let n = lv.len() / classes;
        assert_eq!(n, labels.len(), "one label per row");
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for j in 0..classes {
                let e = (row[j] - mx).exp();
                probs[r * classes + j] = e;
                s = s + e;
            }
            for j in 0..classes {
                probs[r * classes + j] = probs[r * classes + j] / s;
            }
            let lse = mx + s.ln();
            total += (lse - row[labels[r] as usize]).to_f64().unwrap();
        }
        let loss = c::<T>(total / n as f64);
        self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, classes },
        )
    }

    /// Gradients of scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar");
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    g[i] = Some(dy);
                    continue;
                }
                Op::Linear { x, w, b, inp, out } => {
                    let rows = dy.len() / out;
                    let dx = acc(&mut g, *x, self.value(*x).len());
                    mm_nt(&dy, self.value(*w), dx, rows, *out, *inp);
                    let dw = acc(&mut g, *w, inp * out);
                    mm_tn(self.value(*x), &dy, dw, rows, *inp, *out);
                    if let Some(b) = b {
                        let db = acc(&mut g, *b, *out);
                        for r in dy.chunks_exact(*out) {
                            for (d, &v) in db.iter_mut().zip(r) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = acc(&mut g, *a, batch * m * k);
                    for s in 0..*batch {
                        let dys = &dy[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        let das = &mut da[s * m * k..(s + 1) * m * k];
                        if *trans_b {
                            mm_nn(dys, bs, das, m, n, k);
                        } else {
                            mm_nt(dys, bs, das, m, n, k);
                        }
                    }
                    let db = acc(&mut g, *b, batch * k * n);
                    for s in 0..*batch {
                        let dys = &dy[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            mm_tn(dys, as_, dbs, m, n, k);
                        } else {
                            mm_tn(as_, dys, dbs, m, k, n);
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut g, *a, dy.len()), &dy);
                    add_into(acc(&mut g, *b, dy.len()), &dy);
                }
                Op::Pass(a) => add_into(acc(&mut g, *a, dy.len()), &dy),
                Op::Scale(a, s) => {
                    for (d, &v) in acc(&mut g, *a, dy.len()).iter_mut().zip(&dy) {
                        *d = *d + v * *s;
                    }
                }
                Op::Gather { x, idx } => {
                    let dx = acc(&mut g, *x, self.value(*x).len());
                    for (&j, &v) in idx.iter().zip(&dy) {
                        dx[j as usize] = dx[j as usize] + v;
                    }
                }
                Op::Concat { a, b, da, db } => {
                    let w = da + db;
                    let rows = dy.len() / w;
                    let ga = acc(&mut g, *a, rows * da);
                    for r in 0..rows {
                        add_into(&mut ga[r * da..(r + 1) * da], &dy[r * w..r * w + da]);
                    }
                    let gb = acc(&mut g, *b, rows * db);
                    for r in 0..rows {
                        add_into(&mut gb[r * db..(r + 1) * db], &dy[r * w + da..(r + 1) * w]);
                    }
                }
                Op::LayerNorm { x, g: gam, b, dim, xhat, rstd } => {
                    let d = *dim;
                    let gv = self.value(*gam);
                    let nd = c::<T>(d as f64);
                    {
                        let dg = acc(&mut g, *gam, d);
                        for (r, h) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                dg[j] = dg[j] + r[j] * h[j];
                            }
                        }
                    }
                    {
                        let db = acc(&mut g, *b, d);
                        for r in dy.chunks_exact(d) {
                            add_into(db, r);
                        }
                    }
                    let dx = acc(&mut g, *x, dy.len());
                    let mut dh = vec![T::zero(); d];
                    for (row, rs) in rstd.iter().enumerate() {
                        let (dyr, h) = (&dy[row * d..(row + 1) * d], &xhat[row * d..(row + 1) * d]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dh[j] = dyr[j] * gv[j];
                            s1 = s1 + dh[j];
                            s2 = s2 + dh[j] * h[j];
                        }
                        for j in 0..d {
                            let v = *rs / nd * (nd * dh[j] - s1 - h[j] * s2);
                            dx[row * d + j] = dx[row * d + j] + v;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = acc(&mut g, *x, dy.len());
                    for j in 0..dy.len() {
                        dx[j] = dx[j] + dy[j] * gelu_parts(xv[j]).1;
                    }
                }
                Op::Softmax { x, dim } => {
                    let y = &node.value;
                    let dx = acc(&mut g, *x, dy.len());
                    for ((yr, dyr), dxr) in y.chunks_exact(*dim).zip(dy.chunks_exact(*dim)).zip(dx.chunks_exact_mut(*dim)) {
                        let s = yr.iter().zip(dyr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for j in 0..*dim {
                            dxr[j] = dxr[j] + yr[j] * (dyr[j] - s);
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs, classes } => {
                    let n = labels.len();
                    let scale = dy[0] / c::<T>(n as f64);
                    let dl = acc(&mut g, *logits, probs.len());
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..*classes {
                            let onehot = if j == l as usize { T::one() } else { T::zero() };
                            let k = r * classes + j;
                            dl[k] = dl[k] + (probs[k] - onehot) * scale;
                        }
                    }
                }
            }
        }
        Grads { grads: g }
    }
}

fn acc<T: Float>(g: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    g[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{prng, unit_f64};

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut r = prng(seed);
        (0..n).map(|_| unit_f64(&mut r) * 2.0 - 1.0).collect()
    }

    /// Central-difference check of every leaf gradient.
    fn check(leaves: Vec<(Vec<f64>, Vec<usize>)>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |vals: &[(Vec<f64>, Vec<usize>)]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|(v, s)| t.leaf(v.clone(), s)).collect();
            let out = f(&mut t, &vars);
            (t, vars, out)
        };
        let (t, vars, out) = eval(&leaves);
        let grads = t.backward(out);
        let h = 1e-6;
        for (li, var) in vars.iter().enumerate() {
            let an = grads.get(*var).map(<[f64]>::to_vec).unwrap_or(vec![0.0; leaves[li].0.len()]);
            for k in 0..leaves[li].0.len() {
                let mut p = leaves.clone();
                p[li].0[k] += h;
                let (tp, _, op) = eval(&p);
                let mut m = leaves.clone();
                m[li].0[k] -= h;
                let (tm, _, om) = eval(&m);
                let num = (tp.value(op)[0] - tm.value(om)[0]) / (2.0 * h);
                let err = (num - an[k]).abs() / num.abs().max(an[k].abs()).max(1e-6);
                assert!(err < 1e-5, "leaf {li}[{k}]: numeric {num} analytic {}", an[k]);
            }
        }
    }

    fn ce(t: &mut Tape<f64>, x: Var) -> Var {
        let n = t.value(x).len() / 3;
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        t.cross_entropy(x, &labels)
    }

    #[test]
    fn linear_and_concat() {
        check(
            vec![(rand_vec(1, 8), vec![4, 2]), (rand_vec(2, 6), vec![2, 3]), (rand_vec(3, 3), vec![3]), (rand_vec(4, 4), vec![4, 1])],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                let z = t.concat(v[0], v[3]);
                let w = t.gather(z, (0..12).map(|i| (i % 12) as u32).collect(), &[4, 3]);
                let s = t.add(y, w);
                ce(t, s)
            },
        );
    }

    #[test]
    fn attention_pieces() {
        check(
            vec![(rand_vec(5, 12), vec![2, 2, 3]), (rand_vec(6, 12), vec![2, 2, 3]), (rand_vec(7, 12), vec![2, 2, 3])],
            |t, v| {
                let q = t.scale(v[0], 0.7);
                let s = t.bmm(q, v[1], true);
                let s = t.add_const(s, &[0.0, -1.0, 0.5, 0.0, 0.1, 0.2, 0.3, 0.4]);
                let a = t.softmax(s);
                let o = t.bmm(a, v[2], false);
                let o = t.gelu(o);
                ce(t, o)
            },
        );
    }

    #[test]
    fn layer_norm_grad() {
        check(
            vec![(rand_vec(8, 12), vec![4, 3]), (rand_vec(9, 3), vec![3]), (rand_vec(10, 3), vec![3])],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                ce(t, y)
            },
        );
    }

    #[test]
    fn uniform_logits_give_ln9() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![0.3; 9 * 5], &[5, 9]);
        let l = t.cross_entropy(x, &[0, 1, 2, 3, 8]);
        assert!((t.value(l)[0] - 9f64.ln()).abs() < 1e-12);
        let mut t = Tape::<f64>::new();
        let mut v = vec![0.0; 9];
        v[4] = 60.0;
        let x = t.leaf(v, &[1, 9]);
        let l = t.cross_entropy(x, &[4]);
        assert!(t.value(l)[0] < 1e-20);
    }

    #[test]
    fn matmul_kernels_agree() {
        let (m, k, n) = (3, 11, 5);
        let a = rand_vec(11, m * k);
        let b = rand_vec(12, k * n);
        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c, m, k, n);
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c2, m, k, n);
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c3, k, m, n);
        for i in 0..m * n {
            let naive: f64 = (0..k).map(|p| a[(i / n) * k + p] * b[p * n + i % n]).sum();
            assert!((c[i] - naive).abs() < 1e-12 && (c2[i] - naive).abs() < 1e-12 && (c3[i] - naive).abs() < 1e-12);
        }
    }
}
