//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks the graph in reverse and returns gradients for every parameter leaf.
//! All arithmetic is double precision and single threaded, so a fixed seed
//! reproduces bitwise-identical results.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Param { store: String, name: String },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    Silu { a: Var },
    Softmax { a: Var, offset: Option<usize> },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Mat, rstd: Vec<f64> },
    AssembleRows { sources: Vec<(Var, usize)> },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<(Var, usize)> },
    Transpose { a: Var },
    MeanAll { a: Var },
    MseConst { a: Var, target: Mat },
    CrossEntropyRows { logits: Var, probs: Mat, targets: Vec<usize> },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients keyed by `(store name, parameter name)`.
#[derive(Default)]
pub struct Grads {
    pub by_param: BTreeMap<(String, String), Mat>,
}

impl Grads {
    pub fn get(&self, store: &str, name: &str) -> Option<&Mat> {
        self.by_param.get(&(store.to_string(), name.to_string()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; its gradient is reported under `(store, name)`.
    pub fn param(&mut self, store: &str, name: &str, value: Mat) -> Var {
        self.push(
            value,
            Op::Param { store: store.to_string(), name: name.to_string() },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub { a, b })
    }

    /// Broadcast-add a `1 x d` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let v = &self.nodes[a.0].value + &r;
        self.push(v, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale { a, c })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x / (1.0 + (-x).exp()));
        self.push(v, Op::Silu { a })
    }

    /// Row-wise softmax. With `causal`, row `i` is restricted to columns `0..=i`
    /// (entries beyond the diagonal are exactly zero).
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        self.softmax_masked(a, if causal { Some(0) } else { None })
    }

    /// Row-wise softmax with an offset-causal mask: row `i` is restricted to
    /// columns `0..=offset+i`. `None` means no mask. `offset = Some(0)` is the
    /// square causal mask; a positive offset supports incremental attention
    /// where the queries sit `offset` positions into the key sequence.
    pub fn softmax_masked(&mut self, a: Var, offset: Option<usize>) -> Var {
        let x = &self.nodes[a.0].value;
        let (n, m) = x.dim();
        let mut p = Mat::zeros((n, m));
        for i in 0..n {
            let hi = match offset {
                Some(off) => (off + i + 1).min(m),
                None => m,
            };
            let row = x.row(i);
            let mx = row.iter().take(hi).cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..hi {
                let e = (row[j] - mx).exp();
                p[[i, j]] = e;
                sum += e;
            }
            for j in 0..hi {
                p[[i, j]] /= sum;
            }
        }
        self.push(p, Op::Softmax { a, offset })
    }

    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let eps = 1e-5;
        let x = &self.nodes[a.0].value;
        let (n, d) = x.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mu) * rs;
            }
        }
        let g = self.nodes[gain.0].value.row(0).to_owned();
        let b = self.nodes[bias.0].value.row(0).to_owned();
        let v = &xhat * &g + &b;
        self.push(v, Op::LayerNorm { a, gain, bias, xhat, rstd })
    }

    /// Build a matrix by copying one row per entry from source nodes.
    pub fn assemble_rows(&mut self, sources: &[(Var, usize)]) -> Var {
        assert!(!sources.is_empty());
        let d = self.nodes[sources[0].0 .0].value.ncols();
        let mut v = Mat::zeros((sources.len(), d));
        for (i, (src, row)) in sources.iter().enumerate() {
            v.row_mut(i).assign(&self.nodes[src.0].value.row(*row));
        }
        self.push(v, Op::AssembleRows { sources: sources.to_vec() })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Mat::zeros((idx.len(), x.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&x.row(r));
        }
        self.push(v, Op::GatherRows { a, idx: idx.to_vec() })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.nodes[parts[0].0].value.nrows();
        let widths: Vec<(Var, usize)> =
            parts.iter().map(|p| (*p, self.nodes[p.0].value.ncols())).collect();
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut v = Mat::zeros((n, total));
        let mut at = 0;
        for (p, w) in &widths {
            v.slice_mut(s![.., at..at + w]).assign(&self.nodes[p.0].value);
            at += w;
        }
        self.push(v, Op::ConcatCols { parts: widths })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose { a })
    }

    /// Mean of all entries, as a `1 x 1` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        self.push(Mat::from_elem((1, 1), m), Op::MeanAll { a })
    }

    /// Mean squared error against a constant target, as a `1 x 1` node.
    pub fn mse_const(&mut self, a: Var, target: &Mat) -> Var {
        let d = &self.nodes[a.0].value - target;
        let m = d.mapv(|x| x * x).mean().unwrap();
        self.push(Mat::from_elem((1, 1), m), Op::MseConst { a, target: target.clone() })
    }

    /// Mean cross entropy of `logits` rows against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.nrows(), targets.len());
        let (n, m) = x.dim();
        let mut probs = Mat::zeros((n, m));
        let mut loss = 0.0;
        for i in 0..n {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                probs[[i, j]] = e;
                sum += e;
            }
            for j in 0..m {
                probs[[i, j]] /= sum;
            }
            loss -= probs[[i, targets[i]]].ln();
        }
        loss /= n as f64;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropyRows { logits, probs, targets: targets.to_vec() },
        )
    }

    /// Scalar mean of several `1 x 1` nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = self.add(acc, *p);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out = Grads::default();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param { store, name } => {
                    let key = (store.clone(), name.clone());
                    match out.by_param.get_mut(&key) {
                        Some(existing) => *existing += &g,
                        None => {
                            out.by_param.insert(key, g);
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::AddRow { a, row } => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale { a, c } => acc(&mut grads, *a, g * *c),
                Op::Silu { a } => {
                    let x = &self.nodes[a.0].value;
                    let mut gx = g;
                    gx.zip_mut_with(x, |gv, &xv| {
                        let sig = 1.0 / (1.0 + (-xv).exp());
                        *gv *= sig + xv * sig * (1.0 - sig);
                    });
                    acc(&mut grads, *a, gx);
                }
                Op::Softmax { a, offset } => {
                    let p = &self.nodes[i].value;
                    let (rows, cols) = p.dim();
                    let mut gx = Mat::zeros((rows, cols));
                    for r in 0..rows {
                        let hi = match offset {
                            Some(off) => (off + r + 1).min(cols),
                            None => cols,
                        };
                        let mut dot = 0.0;
                        for c in 0..hi {
                            dot += g[[r, c]] * p[[r, c]];
                        }
                        for c in 0..hi {
                            gx[[r, c]] = p[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LayerNorm { a, gain, bias, xhat, rstd } => {
                    let gamma = self.nodes[gain.0].value.row(0).to_owned();
                    let (rows, d) = xhat.dim();
                    let dy = &g * &gamma;
                    let mut gx = Mat::zeros((rows, d));
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xr = xhat.row(r);
                        let m1 = dyr.mean().unwrap();
                        let m2 = dyr
                            .iter()
                            .zip(xr.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            gx[[r, c]] = rstd[r] * (dyr[c] - m1 - xr[c] * m2);
                        }
                    }
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, gx);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                }
                Op::AssembleRows { sources } => {
                    for (r, (src, row)) in sources.iter().enumerate() {
                        let dim = self.nodes[src.0].value.dim();
                        if grads[src.0].is_none() {
                            grads[src.0] = Some(Mat::zeros(dim));
                        }
                        let gsrc = grads[src.0].as_mut().unwrap();
                        let mut target = gsrc.row_mut(*row);
                        target += &g.row(r);
                    }
                }
                Op::GatherRows { a, idx } => {
                    let dim = self.nodes[a.0].value.dim();
                    if grads[a.0].is_none() {
                        grads[a.0] = Some(Mat::zeros(dim));
                    }
                    let ga = grads[a.0].as_mut().unwrap();
                    for (r, &row) in idx.iter().enumerate() {
                        let mut target = ga.row_mut(row);
                        target += &g.row(r);
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let dim = self.nodes[a.0].value.dim();
                    let mut ga = Mat::zeros(dim);
                    ga.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols { parts } => {
                    let mut at = 0;
                    for (p, w) in parts {
                        let gp = g.slice(s![.., at..at + *w]).to_owned();
                        acc(&mut grads, *p, gp);
                        at += w;
                    }
                }
                Op::Transpose { a } => acc(&mut grads, *a, g.t().to_owned()),
                Op::MeanAll { a } => {
                    let dim = self.nodes[a.0].value.dim();
                    let c = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    acc(&mut grads, *a, Mat::from_elem(dim, c));
                }
                Op::MseConst { a, target } => {
                    let x = &self.nodes[a.0].value;
                    let numel = (x.nrows() * x.ncols()) as f64;
                    let ga = (x - target) * (2.0 * g[[0, 0]] / numel);
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropyRows { logits, probs, targets } => {
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= 1.0;
                    }
                    gl *= g[[0, 0]] / targets.len() as f64;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}
