//! Define-by-run reverse-mode tape.
//!
//! Operations execute eagerly, push their result as a new slot, and (when
//! recording) push a backward closure. [`Tape::backward`] seeds the root with
//! 1 and walks the closures in reverse. Gradients accumulate into per-slot
//! buffers; slots that cannot reach a gradient leaf are skipped entirely,
//! which is what makes embedding-only adaptation cheap.

use super::kernels as k;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) needs_grad: bool,
}

pub(crate) struct GradStore<F> {
    bufs: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> GradStore<F> {
    fn new(n: usize) -> Self {
        GradStore {
            bufs: (0..n).map(|_| None).collect(),
        }
    }

    fn resize(&mut self, n: usize) {
        while self.bufs.len() < n {
            self.bufs.push(None);
        }
    }

    /// Removes the gradient buffer of `v` if any gradient has reached it.
    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.bufs[v.0].take()
    }

    /// Removes the gradient buffer of `v`, allocating zeros if absent.
    pub(crate) fn take_accum(&mut self, v: Var, numel: usize) -> Vec<F> {
        self.bufs[v.0].take().unwrap_or_else(|| vec![F::zero(); numel])
    }

    pub(crate) fn put(&mut self, v: Var, g: Vec<F>) {
        self.bufs[v.0] = Some(g);
    }

    fn peek(&self, v: Var) -> Option<&[F]> {
        self.bufs[v.0].as_deref()
    }
}

type Step<F> = Box<dyn Fn(&[Node<F>], &mut GradStore<F>) + Send>;

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl BinOp {
    fn eval<F: Scalar>(self, a: F, b: F) -> F {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// d out / d a. Ties in `Max` route the gradient to `a`.
    fn d_a<F: Scalar>(self, _a: F, b: F) -> F {
        match self {
            BinOp::Add | BinOp::Sub => F::one(),
            BinOp::Mul => b,
            BinOp::Div => F::one() / b,
            BinOp::Max => {
                if _a >= b {
                    F::one()
                } else {
                    F::zero()
                }
            }
        }
    }

    fn d_b<F: Scalar>(self, a: F, b: F) -> F {
        match self {
            BinOp::Add => F::one(),
            BinOp::Sub => -F::one(),
            BinOp::Mul => a,
            BinOp::Div => -a / (b * b),
            BinOp::Max => {
                if a >= b {
                    F::zero()
                } else {
                    F::one()
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum UnOp<F> {
    Relu,
    Sigmoid,
    Tanh,
    /// y = sqrt(x + eps); derivative defined as 0 where y == 0.
    SqrtEps(F),
    MulConst(F),
    AddConst(F),
}

impl<F: Scalar> UnOp<F> {
    fn eval(self, x: F) -> F {
        match self {
            UnOp::Relu => {
                if x > F::zero() {
                    x
                } else {
                    F::zero()
                }
            }
            UnOp::Sigmoid => sigmoid(x),
            UnOp::Tanh => x.tanh(),
            UnOp::SqrtEps(e) => (x + e).sqrt(),
            UnOp::MulConst(c) => x * c,
            UnOp::AddConst(c) => x + c,
        }
    }

    /// Derivative in terms of input x and output y.
    fn deriv(self, x: F, y: F) -> F {
        match self {
            UnOp::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            UnOp::Sigmoid => y * (F::one() - y),
            UnOp::Tanh => F::one() - y * y,
            UnOp::SqrtEps(_) => {
                if y == F::zero() {
                    F::zero()
                } else {
                    F::one() / (y + y)
                }
            }
            UnOp::MulConst(c) => c,
            UnOp::AddConst(_) => F::one(),
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    steps: Vec<Step<F>>,
    grads: Option<GradStore<F>>,
    recording: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            steps: Vec::new(),
            grads: None,
            recording: true,
        }
    }

    /// A tape that only computes forward values (no backward steps, no saved
    /// buffers). Used for evaluation and line searches.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            steps: Vec::new(),
            grads: None,
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub(crate) fn push_node(&mut self, value: Tensor<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_step(&mut self, step: Step<F>) {
        debug_assert!(self.recording);
        self.steps.push(step);
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a tensor onto the tape. `requires_grad` marks it as a gradient
    /// leaf (only meaningful while recording).
    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.push_node(t.clone(), requires_grad)
    }

    pub fn leaf_owned(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push_node(t, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer of `v` after `backward`, if any gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.as_ref()?.peek(v)
    }

    /// Gradient as a tensor shaped like `v` (zeros if nothing reached it).
    pub fn grad_tensor(&self, v: Var) -> Tensor<F> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_vec(&shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Drops accumulated gradients.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Accumulates gradients of `root` (a scalar) into every slot. Each call
    /// adds one full unit of gradient, so calling twice without
    /// [`Tape::reset_grads`] doubles the gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut pass = GradStore::new(self.nodes.len());
        pass.put(root, vec![F::one()]);
        for step in self.steps.iter().rev() {
            step(&self.nodes, &mut pass);
        }
        let acc = self.grads.get_or_insert_with(|| GradStore::new(self.nodes.len()));
        acc.resize(self.nodes.len());
        for (i, buf) in pass.bufs.into_iter().enumerate() {
            if let Some(buf) = buf {
                match &mut acc.bufs[i] {
                    Some(total) => {
                        for (t, b) in total.iter_mut().zip(&buf) {
                            *t += *b;
                        }
                    }
                    slot @ None => *slot = Some(buf),
                }
            }
        }
        Ok(())
    }

    // ---- pointwise ----

    fn unary(&mut self, a: Var, op: UnOp<F>) -> Var {
        let out = self.nodes[a.0].value.map(|x| op.eval(x));
        let needs = self.needs(a);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let n = self.nodes[a.0].value.numel();
            self.push_step(Box::new(move |nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, n);
                let xs = nodes[a.0].value.data();
                let ys = nodes[v.0].value.data();
                for i in 0..n {
                    ga[i] += go[i] * op.deriv(xs[i], ys[i]);
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        v
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnOp::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnOp::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnOp::Tanh)
    }

    /// y = sqrt(x + eps), with gradient 0 wherever y == 0.
    pub fn sqrt_eps(&mut self, a: Var, eps: F) -> Var {
        self.unary(a, UnOp::SqrtEps(eps))
    }

    pub fn mul_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, UnOp::MulConst(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, UnOp::AddConst(c))
    }

    // ---- binary with broadcasting ----

    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        let bsh = self.nodes[b.0].value.shape().to_vec();
        let osh = k::broadcast_shape(&ash, &bsh)?;
        let mut out = Tensor::zeros(&osh);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let od = out.data_mut();
            k::zip_broadcast(&ash, &bsh, &osh, |o, ia, ib| {
                od[o] = op.eval(av[ia], bv[ib]);
            });
        }
        let needs_a = self.needs(a);
        let needs_b = self.needs(b);
        let v = self.push_node(out, needs_a || needs_b);
        if self.recording && (needs_a || needs_b) {
            let (na, nb) = (
                self.nodes[a.0].value.numel(),
                self.nodes[b.0].value.numel(),
            );
            self.push_step(Box::new(move |nodes, g| {
                let Some(go) = g.take(v) else { return };
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let mut ga = needs_a.then(|| g.take_accum(a, na));
                let mut gb = (needs_b && b != a).then(|| g.take_accum(b, nb));
                k::zip_broadcast(&ash, &bsh, &osh, |o, ia, ib| {
                    let gout = go[o];
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += gout * op.d_a(av[ia], bv[ib]);
                        if b == a {
                            ga[ib] += gout * op.d_b(av[ia], bv[ib]);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += gout * op.d_b(av[ia], bv[ib]);
                    }
                });
                if let Some(ga) = ga {
                    g.put(a, ga);
                }
                if let Some(gb) = gb {
                    g.put(b, gb);
                }
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Div)
    }

    /// Elementwise max with broadcasting; on ties the gradient goes to `a`.
    pub fn max_bc(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Max)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        let needs = self.needs(a);
        let v = self.push_node(t, needs);
        if self.recording && needs {
            let n = self.nodes[a.0].value.numel();
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, n);
                for i in 0..n {
                    ga[i] += go[i];
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        if perm.len() != ash.len() {
            return Err(Error::Shape(format!(
                "permute rank mismatch: {perm:?} on {ash:?}"
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let osh: Vec<usize> = perm.iter().map(|&p| ash[p]).collect();
        let in_strides = k::strides(&ash);
        let n: usize = ash.iter().product();
        // map[out_linear] = in_linear
        let mut map = vec![0u32; n];
        {
            let rank = osh.len();
            let mut coord = vec![0usize; rank];
            let mut iin = 0usize;
            let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            for m in map.iter_mut() {
                *m = iin as u32;
                for ax in (0..rank).rev() {
                    coord[ax] += 1;
                    iin += st[ax];
                    if coord[ax] < osh[ax] {
                        break;
                    }
                    coord[ax] = 0;
                    iin -= st[ax] * osh[ax];
                }
            }
        }
        let src = self.nodes[a.0].value.data();
        let data: Vec<F> = map.iter().map(|&m| src[m as usize]).collect();
        let out = Tensor::from_vec(&osh, data)?;
        let needs = self.needs(a);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, map.len());
                for (o, &m) in map.iter().enumerate() {
                    ga[m as usize] += go[o];
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let base = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of rank {}",
                base.len()
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.nodes[p.0].value.shape();
            if sh.len() != base.len()
                || sh
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat shape mismatch: {sh:?} vs {base:?} on axis {axis}"
                )));
            }
            axis_total += sh[axis];
        }
        let mut osh = base.clone();
        osh[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&osh);
        {
            let od = out.data_mut();
            let mut col_off = 0;
            for &p in parts {
                let sh = self.nodes[p.0].value.shape();
                let da = sh[axis];
                let src = self.nodes[p.0].value.data();
                for o in 0..outer {
                    let dst = &mut od[(o * axis_total + col_off) * inner..][..da * inner];
                    dst.copy_from_slice(&src[o * da * inner..(o + 1) * da * inner]);
                }
                col_off += da;
            }
        }
        let needs_any = parts.iter().any(|&p| self.needs(p));
        let v = self.push_node(out, needs_any);
        if self.recording && needs_any {
            let parts: Vec<(Var, usize, bool, usize)> = parts
                .iter()
                .map(|&p| {
                    (
                        p,
                        self.nodes[p.0].value.shape()[axis],
                        self.needs(p),
                        self.nodes[p.0].value.numel(),
                    )
                })
                .collect();
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut col_off = 0;
                for &(p, da, needs, numel) in &parts {
                    if needs {
                        let mut gp = g.take_accum(p, numel);
                        for o in 0..outer {
                            let src = &go[(o * axis_total + col_off) * inner..][..da * inner];
                            let dst = &mut gp[o * da * inner..(o + 1) * da * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        g.put(p, gp);
                    }
                    col_off += da;
                }
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        if axis >= ash.len() || start + len > ash[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of {ash:?}"
            )));
        }
        let outer: usize = ash[..axis].iter().product();
        let inner: usize = ash[axis + 1..].iter().product();
        let da = ash[axis];
        let mut osh = ash.clone();
        osh[axis] = len;
        let mut out = Tensor::zeros(&osh);
        {
            let src = self.nodes[a.0].value.data();
            let od = out.data_mut();
            for o in 0..outer {
                od[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&src[(o * da + start) * inner..][..len * inner]);
            }
        }
        let needs = self.needs(a);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let numel: usize = ash.iter().product();
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, numel);
                for o in 0..outer {
                    let dst = &mut ga[(o * da + start) * inner..][..len * inner];
                    let src = &go[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    /// Row `r` of a rank-2 tensor, as shape `[cols]`.
    pub fn select_row(&mut self, a: Var, r: usize) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        if ash.len() != 2 || r >= ash[0] {
            return Err(Error::Shape(format!("select_row {r} of {ash:?}")));
        }
        let cols = ash[1];
        let data = self.nodes[a.0].value.data()[r * cols..(r + 1) * cols].to_vec();
        let out = Tensor::from_vec(&[cols], data)?;
        let needs = self.needs(a);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let numel = ash[0] * cols;
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, numel);
                for (d, s) in ga[r * cols..(r + 1) * cols].iter_mut().zip(go.iter()) {
                    *d += *s;
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    /// Nearest-neighbor upsampling along `axis` by integer `factor`.
    pub fn upsample_nearest(&mut self, a: Var, axis: usize, factor: usize) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        if axis >= ash.len() || factor == 0 {
            return Err(Error::Shape(format!(
                "upsample axis {axis} factor {factor} on {ash:?}"
            )));
        }
        let outer: usize = ash[..axis].iter().product();
        let inner: usize = ash[axis + 1..].iter().product();
        let da = ash[axis];
        let mut osh = ash.clone();
        osh[axis] = da * factor;
        let mut out = Tensor::zeros(&osh);
        {
            let src = self.nodes[a.0].value.data();
            let od = out.data_mut();
            for o in 0..outer {
                for j in 0..da {
                    let s = &src[(o * da + j) * inner..][..inner];
                    for f in 0..factor {
                        od[(o * da * factor + j * factor + f) * inner..][..inner]
                            .copy_from_slice(s);
                    }
                }
            }
        }
        let needs = self.needs(a);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let numel: usize = ash.iter().product();
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, numel);
                for o in 0..outer {
                    for j in 0..da {
                        let dst = &mut ga[(o * da + j) * inner..][..inner];
                        for f in 0..factor {
                            let src = &go[(o * da * factor + j * factor + f) * inner..][..inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = F::zero();
        for &x in self.nodes[a.0].value.data() {
            s += x;
        }
        let needs = self.needs(a);
        let n = self.nodes[a.0].value.numel();
        let v = self.push_node(Tensor::scalar(s), needs);
        if self.recording && needs {
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, n);
                for x in ga.iter_mut() {
                    *x += go[0];
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        v
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.mul_scalar(s, F::one() / F::from_f64(n as f64))
    }

    fn reduced_shape(&self, a: Var, axes: &[usize]) -> Result<(Vec<usize>, usize)> {
        let ash = self.nodes[a.0].value.shape();
        let mut osh = ash.to_vec();
        let mut count = 1usize;
        for &ax in axes {
            if ax >= ash.len() {
                return Err(Error::Shape(format!(
                    "reduce axis {ax} out of rank {}",
                    ash.len()
                )));
            }
            if osh[ax] != 0 && osh[ax] != ash[ax] && osh[ax] != 1 {
                return Err(Error::Shape(format!("duplicate reduce axis {ax}")));
            }
            count *= ash[ax];
            osh[ax] = 1;
        }
        if count == 0 {
            return Err(Error::Shape("reduction over empty axes".into()));
        }
        Ok((osh, count))
    }

    /// Mean over `axes`, keeping reduced axes as size 1.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        let (osh, count) = self.reduced_shape(a, axes)?;
        let inv = F::one() / F::from_f64(count as f64);
        let mut out = Tensor::zeros(&osh);
        k::reduce_into(
            self.nodes[a.0].value.data(),
            &ash,
            out.data_mut(),
            &osh,
        );
        for x in out.data_mut() {
            *x *= inv;
        }
        let needs = self.needs(a);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let n: usize = ash.iter().product();
            let nout: usize = osh.iter().product();
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, n);
                k::zip_broadcast(&ash, &osh, &ash, |_o, ia, ib| {
                    ga[ia] += go[ib] * inv;
                });
                let _ = nout;
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    /// Mean and population variance over `axes` (kept as size 1).
    pub fn moments(&mut self, a: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        let (osh, count) = self.reduced_shape(a, axes)?;
        let inv = F::one() / F::from_f64(count as f64);
        let mut mean = Tensor::zeros(&osh);
        k::reduce_into(self.nodes[a.0].value.data(), &ash, mean.data_mut(), &osh);
        for x in mean.data_mut() {
            *x *= inv;
        }
        let mut var = Tensor::zeros(&osh);
        {
            let xd = self.nodes[a.0].value.data();
            let md = mean.data();
            let vd = var.data_mut();
            k::zip_broadcast(&ash, &osh, &ash, |_o, ia, ib| {
                let d = xd[ia] - md[ib];
                vd[ib] += d * d;
            });
            for x in vd.iter_mut() {
                *x *= inv;
            }
        }
        let needs = self.needs(a);
        let vm = self.push_node(mean, needs);
        let vv = self.push_node(var, needs);
        if self.recording && needs {
            let n: usize = ash.iter().product();
            let two = F::from_f64(2.0);
            self.push_step(Box::new(move |nodes, g| {
                let gm = g.take(vm);
                let gv = g.take(vv);
                if gm.is_none() && gv.is_none() {
                    return;
                }
                let mut ga = g.take_accum(a, n);
                let xd = nodes[a.0].value.data();
                let md = nodes[vm.0].value.data();
                k::zip_broadcast(&ash, &osh, &ash, |_o, ia, ib| {
                    let mut acc = F::zero();
                    if let Some(gm) = &gm {
                        acc += gm[ib] * inv;
                    }
                    if let Some(gv) = &gv {
                        acc += gv[ib] * two * (xd[ia] - md[ib]) * inv;
                    }
                    ga[ia] += acc;
                });
                g.put(a, ga);
                if let Some(gm) = gm {
                    g.put(vm, gm);
                }
                if let Some(gv) = gv {
                    g.put(vv, gv);
                }
            }));
        }
        Ok((vm, vv))
    }

    // ---- linear algebra ----

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        let bsh = self.nodes[b.0].value.shape().to_vec();
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Shape(format!("matmul {ash:?} x {bsh:?}")));
        }
        let (m, kk, n) = (ash[0], ash[1], bsh[1]);
        let mut out = Tensor::zeros(&[m, n]);
        unsafe {
            F::gemm(
                m,
                kk,
                n,
                F::one(),
                self.nodes[a.0].value.data().as_ptr(),
                kk as isize,
                1,
                self.nodes[b.0].value.data().as_ptr(),
                n as isize,
                1,
                F::zero(),
                out.data_mut().as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let needs_a = self.needs(a);
        let needs_b = self.needs(b);
        let v = self.push_node(out, needs_a || needs_b);
        if self.recording && (needs_a || needs_b) {
            self.push_step(Box::new(move |nodes, g| {
                let Some(go) = g.take(v) else { return };
                if needs_a {
                    let mut ga = g.take_accum(a, m * kk);
                    // dA += G * B^T
                    unsafe {
                        F::gemm(
                            m,
                            n,
                            kk,
                            F::one(),
                            go.as_ptr(),
                            n as isize,
                            1,
                            nodes[b.0].value.data().as_ptr(),
                            1,
                            n as isize,
                            F::one(),
                            ga.as_mut_ptr(),
                            kk as isize,
                            1,
                        );
                    }
                    g.put(a, ga);
                }
                if needs_b {
                    let mut gb = g.take_accum(b, kk * n);
                    // dB += A^T * G
                    unsafe {
                        F::gemm(
                            kk,
                            m,
                            n,
                            F::one(),
                            nodes[a.0].value.data().as_ptr(),
                            1,
                            kk as isize,
                            go.as_ptr(),
                            n as isize,
                            1,
                            F::one(),
                            gb.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    g.put(b, gb);
                }
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    // ---- convolution and pooling ----

    /// 2-D convolution: x `[n,c,h,w]`, w `[o,c,kh,kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let wsh = self.nodes[w.0].value.shape().to_vec();
        if xsh.len() != 4 || wsh.len() != 4 {
            return Err(Error::Shape(format!("conv2d {xsh:?} * {wsh:?}")));
        }
        let (n, c, h, wd) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (o, wc, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {c}, kernel {wc}"
            )));
        }
        let oh = k::conv_out(h, kh, pad.0, stride.0)?;
        let ow = k::conv_out(wd, kw, pad.1, stride.1)?;
        if stride != (1, 1) {
            return Err(Error::Shape("conv2d supports stride 1 only".into()));
        }
        let ckk = c * kh * kw;
        let ncols = oh * ow;
        let mut cols_all = vec![F::zero(); n * ckk * ncols];
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        {
            let xd = self.nodes[x.0].value.data();
            let wdat = self.nodes[w.0].value.data();
            let od = out.data_mut();
            for ni in 0..n {
                let cols = &mut cols_all[ni * ckk * ncols..(ni + 1) * ckk * ncols];
                k::im2col(
                    &xd[ni * c * h * wd..(ni + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    pad.0,
                    pad.1,
                    oh,
                    ow,
                    cols,
                );
                unsafe {
                    F::gemm(
                        o,
                        ckk,
                        ncols,
                        F::one(),
                        wdat.as_ptr(),
                        ckk as isize,
                        1,
                        cols.as_ptr(),
                        ncols as isize,
                        1,
                        F::zero(),
                        od[ni * o * ncols..].as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
            }
        }
        let needs_x = self.needs(x);
        let needs_w = self.needs(w);
        let v = self.push_node(out, needs_x || needs_w);
        if self.recording && (needs_x || needs_w) {
            self.push_step(Box::new(move |nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut gx = needs_x.then(|| g.take_accum(x, n * c * h * wd));
                let mut gw = needs_w.then(|| g.take_accum(w, o * ckk));
                let mut dcols = if needs_x {
                    vec![F::zero(); ckk * ncols]
                } else {
                    Vec::new()
                };
                for ni in 0..n {
                    let gon = &go[ni * o * ncols..(ni + 1) * o * ncols];
                    let cols = &cols_all[ni * ckk * ncols..(ni + 1) * ckk * ncols];
                    if let Some(gw) = gw.as_mut() {
                        // dW += G_n * cols_n^T
                        unsafe {
                            F::gemm(
                                o,
                                ncols,
                                ckk,
                                F::one(),
                                gon.as_ptr(),
                                ncols as isize,
                                1,
                                cols.as_ptr(),
                                1,
                                ncols as isize,
                                F::one(),
                                gw.as_mut_ptr(),
                                ckk as isize,
                                1,
                            );
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dcols = W^T * G_n, then fold back into dx.
                        unsafe {
                            F::gemm(
                                ckk,
                                o,
                                ncols,
                                F::one(),
                                nodes[w.0].value.data().as_ptr(),
                                1,
                                ckk as isize,
                                gon.as_ptr(),
                                ncols as isize,
                                1,
                                F::zero(),
                                dcols.as_mut_ptr(),
                                ncols as isize,
                                1,
                            );
                        }
                        k::col2im_add(
                            &dcols,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            pad.0,
                            pad.1,
                            oh,
                            ow,
                            &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd],
                        );
                    }
                }
                if let Some(gx) = gx {
                    g.put(x, gx);
                }
                if let Some(gw) = gw {
                    g.put(w, gw);
                }
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    /// Non-overlapping max pooling on `[n,c,h,w]` with window = stride.
    /// Requires h, w divisible by the window. Ties take the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        if xsh.len() != 4 {
            return Err(Error::Shape(format!("maxpool2d on {xsh:?}")));
        }
        let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (kh, kw) = window;
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(Error::Shape(format!(
                "maxpool window {window:?} does not divide spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / kh, w / kw);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xd = self.nodes[x.0].value.data();
            let od = out.data_mut();
            for ni in 0..n {
                let xoff = ni * c * h * w;
                let ooff = ni * c * oh * ow;
                let mut arg = vec![0u32; c * oh * ow];
                k::maxpool2d(
                    &xd[xoff..xoff + c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    &mut od[ooff..ooff + c * oh * ow],
                    &mut arg,
                );
                for (i, &a) in arg.iter().enumerate() {
                    argmax[ooff + i] = (xoff + a as usize) as u32;
                }
            }
        }
        let needs = self.needs(x);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let numel = n * c * h * w;
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut gx = g.take_accum(x, numel);
                for (o, &a) in argmax.iter().enumerate() {
                    gx[a as usize] += go[o];
                }
                g.put(x, gx);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    /// Max pooling over the time axis of `[n,t,d]` with window = stride =
    /// `factor`. Requires t divisible by `factor`; ties take the earliest
    /// frame.
    pub fn maxpool_time(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        if xsh.len() != 3 {
            return Err(Error::Shape(format!("maxpool_time on {xsh:?}")));
        }
        let (n, t, d) = (xsh[0], xsh[1], xsh[2]);
        if factor == 0 || t % factor != 0 {
            return Err(Error::Shape(format!(
                "time pooling factor {factor} does not divide t={t}"
            )));
        }
        let ot = t / factor;
        let mut out = Tensor::zeros(&[n, ot, d]);
        let mut argmax = vec![0u32; n * ot * d];
        {
            let xd = self.nodes[x.0].value.data();
            let od = out.data_mut();
            for ni in 0..n {
                for oi in 0..ot {
                    let obase = (ni * ot + oi) * d;
                    for f in 0..factor {
                        let ti = oi * factor + f;
                        let xbase = (ni * t + ti) * d;
                        for j in 0..d {
                            let val = xd[xbase + j];
                            if f == 0 || val > od[obase + j] {
                                od[obase + j] = val;
                                argmax[obase + j] = (xbase + j) as u32;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let numel = n * t * d;
            self.push_step(Box::new(move |_nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut gx = g.take_accum(x, numel);
                for (o, &a) in argmax.iter().enumerate() {
                    gx[a as usize] += go[o];
                }
                g.put(x, gx);
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    // ---- recurrent ----

    /// Single-direction LSTM over `[n,t,d]` with fused gates.
    ///
    /// Gate order in the 4h axis is `[input, forget, cell, output]`. Initial
    /// hidden and cell states are zero. With `reverse` the recurrence runs
    /// from the last frame to the first; outputs stay aligned to frames.
    pub fn lstm(&mut self, x: Var, wx: Var, wh: Var, b: Var, reverse: bool) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let wxsh = self.nodes[wx.0].value.shape().to_vec();
        let whsh = self.nodes[wh.0].value.shape().to_vec();
        let bsh = self.nodes[b.0].value.shape().to_vec();
        if xsh.len() != 3 || wxsh.len() != 2 || whsh.len() != 2 || bsh.len() != 1 {
            return Err(Error::Shape(format!(
                "lstm shapes x{xsh:?} wx{wxsh:?} wh{whsh:?} b{bsh:?}"
            )));
        }
        let (n, t, d) = (xsh[0], xsh[1], xsh[2]);
        let h = whsh[0];
        if wxsh != [d, 4 * h] || whsh != [h, 4 * h] || bsh != [4 * h] {
            return Err(Error::Shape(format!(
                "lstm expects wx[{d},4h] wh[h,4h] b[4h], got wx{wxsh:?} wh{whsh:?} b{bsh:?}"
            )));
        }
        if t == 0 {
            return Err(Error::Shape("lstm over zero frames".into()));
        }
        let h4 = 4 * h;
        let mut gates = vec![F::zero(); n * t * h4];
        let mut cells = vec![F::zero(); n * t * h];
        let mut out = Tensor::zeros(&[n, t, h]);
        {
            let xd = self.nodes[x.0].value.data();
            let wxd = self.nodes[wx.0].value.data();
            let whd = self.nodes[wh.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let od = out.data_mut();
            let mut z = vec![F::zero(); t * h4];
            for ni in 0..n {
                // One gemm for all input contributions of this sequence.
                unsafe {
                    F::gemm(
                        t,
                        d,
                        h4,
                        F::one(),
                        xd[ni * t * d..].as_ptr(),
                        d as isize,
                        1,
                        wxd.as_ptr(),
                        h4 as isize,
                        1,
                        F::zero(),
                        z.as_mut_ptr(),
                        h4 as isize,
                        1,
                    );
                }
                let mut prev_t: Option<usize> = None;
                for s in 0..t {
                    let ti = if reverse { t - 1 - s } else { s };
                    let zrow = &mut z[ti * h4..(ti + 1) * h4];
                    for (zi, &bi) in zrow.iter_mut().zip(bd) {
                        *zi += bi;
                    }
                    if let Some(pt) = prev_t {
                        let hprev = &od[(ni * t + pt) * h..(ni * t + pt + 1) * h];
                        k::axpy_rows(zrow, hprev, whd, h, h4);
                    }
                    let grow = &mut gates[(ni * t + ti) * h4..(ni * t + ti + 1) * h4];
                    for j in 0..h {
                        grow[j] = sigmoid(zrow[j]);
                        grow[h + j] = sigmoid(zrow[h + j]);
                        grow[2 * h + j] = zrow[2 * h + j].tanh();
                        grow[3 * h + j] = sigmoid(zrow[3 * h + j]);
                    }
                    let crow_off = (ni * t + ti) * h;
                    for j in 0..h {
                        let cprev = match prev_t {
                            Some(pt) => cells[(ni * t + pt) * h + j],
                            None => F::zero(),
                        };
                        let c = grow[h + j] * cprev + grow[j] * grow[2 * h + j];
                        cells[crow_off + j] = c;
                        od[crow_off + j] = grow[3 * h + j] * c.tanh();
                    }
                    prev_t = Some(ti);
                }
            }
        }
        let needs_x = self.needs(x);
        let needs_wx = self.needs(wx);
        let needs_wh = self.needs(wh);
        let needs_b = self.needs(b);
        let any = needs_x || needs_wx || needs_wh || needs_b;
        let v = self.push_node(out, any);
        if self.recording && any {
            self.push_step(Box::new(move |nodes, g| {
                let Some(go) = g.take(v) else { return };
                let xd = nodes[x.0].value.data();
                let whd = nodes[wh.0].value.data();
                let wxd = nodes[wx.0].value.data();
                let hd = nodes[v.0].value.data();
                let mut gx = needs_x.then(|| g.take_accum(x, n * t * d));
                let mut gwx = needs_wx.then(|| g.take_accum(wx, d * h4));
                let mut gwh = needs_wh.then(|| g.take_accum(wh, h * h4));
                let mut gb = needs_b.then(|| g.take_accum(b, h4));
                let mut dz = vec![F::zero(); t * h4];
                let mut hprev_mat = vec![F::zero(); t * h];
                let mut dh_carry = vec![F::zero(); h];
                let mut dc_carry = vec![F::zero(); h];
                for ni in 0..n {
                    for v in dh_carry.iter_mut() {
                        *v = F::zero();
                    }
                    for v in dc_carry.iter_mut() {
                        *v = F::zero();
                    }
                    // Walk processing order backwards.
                    for s in (0..t).rev() {
                        let ti = if reverse { t - 1 - s } else { s };
                        let prev_t = if s == 0 {
                            None
                        } else if reverse {
                            Some(t - s)
                        } else {
                            Some(s - 1)
                        };
                        let grow = &gates[(ni * t + ti) * h4..(ni * t + ti + 1) * h4];
                        let coff = (ni * t + ti) * h;
                        let dzrow = &mut dz[ti * h4..(ti + 1) * h4];
                        for j in 0..h {
                            let dh = go[coff + j] + dh_carry[j];
                            let (ig, fg, gg, og) =
                                (grow[j], grow[h + j], grow[2 * h + j], grow[3 * h + j]);
                            let tc = cells[coff + j].tanh();
                            let dog = dh * tc;
                            let dc = dh * og * (F::one() - tc * tc) + dc_carry[j];
                            let cprev = match prev_t {
                                Some(pt) => cells[(ni * t + pt) * h + j],
                                None => F::zero(),
                            };
                            let dig = dc * gg;
                            let dfg = dc * cprev;
                            let dgg = dc * ig;
                            dzrow[j] = dig * ig * (F::one() - ig);
                            dzrow[h + j] = dfg * fg * (F::one() - fg);
                            dzrow[2 * h + j] = dgg * (F::one() - gg * gg);
                            dzrow[3 * h + j] = dog * og * (F::one() - og);
                            dc_carry[j] = dc * fg;
                        }
                        // dh_prev = dz_t . Wh^T
                        for v in dh_carry.iter_mut() {
                            *v = F::zero();
                        }
                        k::dot_rows(&mut dh_carry, dzrow, whd, h, h4);
                        // Row of h_{prev} aligned with frame ti, for dWh.
                        let dst = &mut hprev_mat[ti * h..(ti + 1) * h];
                        match prev_t {
                            Some(pt) => {
                                dst.copy_from_slice(&hd[(ni * t + pt) * h..(ni * t + pt + 1) * h])
                            }
                            None => {
                                for v in dst.iter_mut() {
                                    *v = F::zero();
                                }
                            }
                        }
                    }
                    if let Some(gwx) = gwx.as_mut() {
                        // dWx += X^T . dZ
                        unsafe {
                            F::gemm(
                                d,
                                t,
                                h4,
                                F::one(),
                                xd[ni * t * d..].as_ptr(),
                                1,
                                d as isize,
                                dz.as_ptr(),
                                h4 as isize,
                                1,
                                F::one(),
                                gwx.as_mut_ptr(),
                                h4 as isize,
                                1,
                            );
                        }
                    }
                    if let Some(gwh) = gwh.as_mut() {
                        // dWh += Hprev^T . dZ
                        unsafe {
                            F::gemm(
                                h,
                                t,
                                h4,
                                F::one(),
                                hprev_mat.as_ptr(),
                                1,
                                h as isize,
                                dz.as_ptr(),
                                h4 as isize,
                                1,
                                F::one(),
                                gwh.as_mut_ptr(),
                                h4 as isize,
                                1,
                            );
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for row in dz.chunks(h4) {
                            for (b, &z) in gb.iter_mut().zip(row) {
                                *b += z;
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dX += dZ . Wx^T
                        unsafe {
                            F::gemm(
                                t,
                                h4,
                                d,
                                F::one(),
                                dz.as_ptr(),
                                h4 as isize,
                                1,
                                wxd.as_ptr(),
                                1,
                                h4 as isize,
                                F::one(),
                                gx[ni * t * d..].as_mut_ptr(),
                                d as isize,
                                1,
                            );
                        }
                    }
                }
                if let Some(gx) = gx {
                    g.put(x, gx);
                }
                if let Some(gwx) = gwx {
                    g.put(wx, gwx);
                }
                if let Some(gwh) = gwh {
                    g.put(wh, gwh);
                }
                if let Some(gb) = gb {
                    g.put(b, gb);
                }
                g.put(v, go);
            }));
        }
        Ok(v)
    }

    // ---- rows ----

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ash = self.nodes[a.0].value.shape().to_vec();
        let kk = *ash
            .last()
            .ok_or_else(|| Error::Shape("log_softmax on rank-0".into()))?;
        if kk == 0 {
            return Err(Error::Shape("log_softmax over empty axis".into()));
        }
        let mut out = self.nodes[a.0].value.clone();
        k::log_softmax_rows(out.data_mut(), kk);
        let needs = self.needs(a);
        let v = self.push_node(out, needs);
        if self.recording && needs {
            let n: usize = ash.iter().product();
            self.push_step(Box::new(move |nodes, g| {
                let Some(go) = g.take(v) else { return };
                let mut ga = g.take_accum(a, n);
                let ys = nodes[v.0].value.data();
                for r in 0..n / kk {
                    let base = r * kk;
                    let mut s = F::zero();
                    for j in 0..kk {
                        s += go[base + j];
                    }
                    for j in 0..kk {
                        ga[base + j] += go[base + j] - ys[base + j].exp() * s;
                    }
                }
                g.put(a, ga);
                g.put(v, go);
            }));
        }
        Ok(v)
    }
}
