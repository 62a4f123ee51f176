use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive that produced a node. Only these can appear on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Shift,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Sqrt,
    Softplus,
    Abs,
    Powf,
    Sum,
    Dot,
    Affine,
    LogSumExp,
}

/// Flat reverse-mode tape of scalar nodes.
///
/// Each node stores its value and, for every parent, the local partial
/// derivative evaluated during the forward pass. Nodes are appended in
/// topological order, so a single reverse sweep yields all adjoints.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<f64>,
    ops: Vec<Op>,
    starts: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    first_non_finite: Option<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            starts: vec![0],
            ..Default::default()
        }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut starts = Vec::with_capacity(nodes + 1);
        starts.push(0);
        Self {
            values: Vec::with_capacity(nodes),
            ops: Vec::with_capacity(nodes),
            starts,
            parents: Vec::with_capacity(edges),
            partials: Vec::with_capacity(edges),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn values_of(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    pub fn op(&self, v: Var) -> Op {
        self.ops[v.index()]
    }

    /// Error describing the first node whose forward value was not finite.
    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match self.first_non_finite {
            None => Ok(()),
            Some(node) => Err(AutodiffError::NonFiniteValue {
                node,
                op: self.ops[node],
            }),
        }
    }

    #[inline]
    fn push(&mut self, op: Op, value: f64) -> Var {
        let idx = self.values.len();
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some(idx);
        }
        self.values.push(value);
        self.ops.push(op);
        self.starts.push(self.parents.len() as u32);
        Var(idx as u32)
    }

    #[inline]
    fn edge(&mut self, parent: Var, partial: f64) {
        self.parents.push(parent.0);
        self.partials.push(partial);
    }

    #[inline]
    fn unary(&mut self, op: Op, a: Var, value: f64, partial: f64) -> Var {
        self.edge(a, partial);
        self.push(op, value)
    }

    #[inline]
    fn binary(&mut self, op: Op, a: Var, b: Var, value: f64, pa: f64, pb: f64) -> Var {
        self.edge(a, pa);
        self.edge(b, pb);
        self.push(op, value)
    }

    /// Differentiable input.
    pub fn var(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn vars(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    pub fn constants(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(Op::Add, a, b, v, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(Op::Sub, a, b, v, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(Op::Mul, a, b, x * y, y, x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let q = x / y;
        self.binary(Op::Div, a, b, q, 1.0 / y, -q / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.unary(Op::Neg, a, v, -1.0)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.unary(Op::Scale, a, v, c)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.unary(Op::Shift, a, v, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.unary(Op::Exp, a, v, v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(Op::Log, a, x.ln(), 1.0 / x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.unary(Op::Tanh, a, t, 1.0 - t * t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x > 0.0 {
            self.unary(Op::Relu, a, x, 1.0)
        } else {
            self.unary(Op::Relu, a, 0.0, 0.0)
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.unary(Op::Sigmoid, a, s, s * (1.0 - s))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let r = self.value(a).sqrt();
        self.unary(Op::Sqrt, a, r, 0.5 / r)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(Op::Softplus, a, softplus(x), sigmoid(x))
    }

    /// `|a|`, with derivative 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(Op::Abs, a, x.abs(), d)
    }

    /// `a^p` for `a ≥ 0` and a constant `p ≥ 1`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let x = self.value(a);
        if p == 1.0 {
            return self.unary(Op::Powf, a, x, 1.0);
        }
        self.unary(Op::Powf, a, x.powf(p), p * x.powf(p - 1.0))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut total = 0.0;
        for &x in xs {
            total += self.value(x);
            self.edge(x, 1.0);
        }
        self.push(Op::Sum, total)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let w = 1.0 / xs.len() as f64;
        let mut total = 0.0;
        for &x in xs {
            total += self.value(x);
            self.edge(x, w);
        }
        self.push(Op::Sum, total * w)
    }

    /// `Σ aᵢ·bᵢ`.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        let mut total = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (vx, vy) = (self.value(x), self.value(y));
            total += vx * vy;
            self.edge(x, vy);
            self.edge(y, vx);
        }
        self.push(Op::Dot, total)
    }

    /// `bias + Σ cᵢ·xᵢ` with constant coefficients `c` and constant `bias`.
    pub fn affine(&mut self, xs: &[Var], coefs: &[f64], bias: f64) -> Var {
        assert_eq!(xs.len(), coefs.len(), "affine operands differ in length");
        let mut total = bias;
        for (&x, &c) in xs.iter().zip(coefs) {
            total += c * self.value(x);
            self.edge(x, c);
        }
        self.push(Op::Affine, total)
    }

    /// `b + Σ wᵢ·xᵢ` where the weights and bias are on the tape and the inputs are constants.
    pub fn linear_const_input(&mut self, weights: &[Var], input: &[f64], bias: Var) -> Var {
        assert_eq!(weights.len(), input.len(), "linear operands differ in length");
        let mut total = self.value(bias);
        for (&w, &x) in weights.iter().zip(input) {
            total += self.value(w) * x;
            self.edge(w, x);
        }
        self.edge(bias, 1.0);
        self.push(Op::Affine, total)
    }

    /// `b + Σ wᵢ·xᵢ` with everything on the tape.
    pub fn linear(&mut self, weights: &[Var], input: &[Var], bias: Var) -> Var {
        assert_eq!(weights.len(), input.len(), "linear operands differ in length");
        let mut total = self.value(bias);
        for (&w, &x) in weights.iter().zip(input) {
            let (vw, vx) = (self.value(w), self.value(x));
            total += vw * vx;
            self.edge(w, vx);
            self.edge(x, vw);
        }
        self.edge(bias, 1.0);
        self.push(Op::Dot, total)
    }

    /// Numerically stable `log Σ exp(xᵢ)`.
    pub fn logsumexp(&mut self, xs: &[Var]) -> Var {
        let vals = self.values_of(xs);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = vals.iter().map(|v| (v - max).exp()).sum();
        let out = max + total.ln();
        for (&x, v) in xs.iter().zip(&vals) {
            self.edge(x, (v - out).exp());
        }
        self.push(Op::LogSumExp, out)
    }

    /// Adjoints of every node for the scalar `Σ seedᵢ · nodeᵢ`.
    pub fn backward_seeded(&self, seeds: &[(Var, f64)]) -> Vec<f64> {
        let n = self.values.len();
        let mut adj = vec![0.0; n];
        let mut top = 0;
        for &(v, s) in seeds {
            adj[v.index()] += s;
            top = top.max(v.index() + 1);
        }
        for i in (0..top).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let lo = self.starts[i] as usize;
            let hi = self.starts[i + 1] as usize;
            for e in lo..hi {
                adj[self.parents[e] as usize] += a * self.partials[e];
            }
        }
        adj
    }

    pub fn backward(&self, output: Var) -> Vec<f64> {
        self.backward_seeded(&[(output, 1.0)])
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
