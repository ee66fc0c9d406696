//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Only the ops the toy language model and the continual-learning losses
//! need are provided. Most are fused (attention, normalization, the loss
//! heads) so a training step stays at a few dozen nodes per layer.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Assemble { sources: Vec<Var>, map: Vec<(usize, usize)> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Mat>,
    },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Mat },
    KlDiv { logits: Var, log_q: Arc<Mat>, weights: Vec<f64>, probs: Mat, rows: Vec<f64> },
    SqDist { x: Var, anchor: Arc<Mat>, weight: Arc<Mat> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Arc<Mat>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter id.
#[derive(Debug, Default, Clone)]
pub struct Grads {
    pub by_param: BTreeMap<usize, Mat>,
}

impl Grads {
    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
}

fn softmax_rows(z: &Mat) -> Mat {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    p
}

fn log_softmax_rows(z: &Mat) -> Mat {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn softmax(z: &Mat) -> Mat {
    softmax_rows(z)
}

pub fn log_softmax(z: &Mat) -> Mat {
    log_softmax_rows(z)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, needs_grad: bool, op: Op) -> Var {
        self.push_arc(Arc::new(value), needs_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Mat>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Arc<Mat>) -> Var {
        self.push_arc(value, false, Op::Leaf)
    }

    pub fn constant_owned(&mut self, value: Mat) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Arc<Mat>) -> Var {
        self.push_arc(value, true, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, ng, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, ng, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(out, ng, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x) * s;
        let ng = self.ng(x);
        self.push(out, ng, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let ng = self.ng(x);
        self.push(out, ng, Op::Gelu(x))
    }

    /// Row-wise RMS normalization scaled by a `1×n` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            Zip::from(&mut row).and(gv.row(0)).for_each(|o, &g| *o *= inv * g);
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(out, ng, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Output row `r` is row `map[r].1` of `sources[map[r].0]`.
    pub fn assemble(&mut self, sources: &[Var], map: Vec<(usize, usize)>) -> Var {
        let cols = self.value(sources[0]).ncols();
        let mut out = Mat::zeros((map.len(), cols));
        for (r, &(s, i)) in map.iter().enumerate() {
            out.row_mut(r).assign(&self.value(sources[s]).row(i));
        }
        let ng = sources.iter().any(|&s| self.ng(s));
        self.push(
            out,
            ng,
            Op::Assemble {
                sources: sources.to_vec(),
                map,
            },
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.assemble(&[x], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Causal multi-head attention applied independently to each
    /// `(start, len)` row segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in &segments {
            for h in 0..heads {
                let cols = s![start..start + len, h * dh..(h + 1) * dh];
                let qs = qv.slice(cols);
                let ks = kv.slice(cols);
                let vs = vv.slice(cols);
                let mut sc = qs.dot(&ks.t()) * scale;
                for i in 0..len {
                    for j in (i + 1)..len {
                        sc[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                let p = softmax_rows(&sc);
                out.slice_mut(cols).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
        )
    }

    /// `Σ_r w_r · (−log softmax(z_r)[t_r])` as a `1×1` scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len());
        assert_eq!(z.nrows(), weights.len());
        let logp = log_softmax_rows(z);
        let loss: f64 = targets
            .iter()
            .zip(&weights)
            .enumerate()
            .map(|(r, (&t, &w))| -w * logp[[r, t]])
            .sum();
        let probs = logp.mapv(f64::exp);
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            ng,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
        )
    }

    /// `Σ_r w_r · KL(softmax(z_r) ‖ q_r)` with fixed `log q`.
    pub fn kl_div(&mut self, logits: Var, log_q: Arc<Mat>, weights: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.raw_dim(), log_q.raw_dim());
        assert_eq!(z.nrows(), weights.len());
        let logp = log_softmax_rows(z);
        let probs = logp.mapv(f64::exp);
        let rows: Vec<f64> = (0..z.nrows())
            .map(|r| {
                probs
                    .row(r)
                    .iter()
                    .zip(logp.row(r))
                    .zip(log_q.row(r))
                    .map(|((p, lp), lq)| if *p > 0.0 { p * (lp - lq) } else { 0.0 })
                    .sum()
            })
            .collect();
        let loss: f64 = rows.iter().zip(&weights).map(|(k, w)| k * w).sum();
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            ng,
            Op::KlDiv {
                logits,
                log_q,
                weights,
                probs,
                rows,
            },
        )
    }

    /// `Σ weight ⊙ (x − anchor)²`.
    pub fn sq_dist(&mut self, x: Var, anchor: Arc<Mat>, weight: Arc<Mat>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.raw_dim(), anchor.raw_dim());
        assert_eq!(xv.raw_dim(), weight.raw_dim());
        let mut loss = 0.0;
        Zip::from(xv).and(&*anchor).and(&*weight).for_each(|x, a, w| {
            loss += w * (x - a) * (x - a);
        });
        let ng = self.ng(x);
        self.push(Mat::from_elem((1, 1), loss), ng, Op::SqDist { x, anchor, weight })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| self.scalar(v) * w).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Mat::from_elem((1, 1), total), ng, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Grads::default();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
        fn acc_view(grads: &mut [Option<Mat>], v: Var, g: ArrayView2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g.to_owned()),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc_view(&mut grads, *a, g.view());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g * *s),
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let ncols = xv.ncols() as f64;
                    if self.ng(*gain) {
                        let mut dg = Mat::zeros((1, xv.ncols()));
                        for (r, inv) in inv_rms.iter().enumerate() {
                            Zip::from(dg.row_mut(0))
                                .and(g.row(r))
                                .and(xv.row(r))
                                .for_each(|d, &gy, &xx| *d += gy * xx * inv);
                        }
                        acc(&mut grads, *gain, dg);
                    }
                    if self.ng(*x) {
                        let mut dx = Mat::zeros(xv.raw_dim());
                        for (r, &inv) in inv_rms.iter().enumerate() {
                            let dot: f64 = g
                                .row(r)
                                .iter()
                                .zip(gv.row(0))
                                .zip(xv.row(r))
                                .map(|((gy, gn), xx)| gy * gn * xx)
                                .sum();
                            let c = dot * inv * inv * inv / ncols;
                            Zip::from(dx.row_mut(r))
                                .and(g.row(r))
                                .and(gv.row(0))
                                .and(xv.row(r))
                                .for_each(|d, &gy, &gn, &xx| *d = gy * gn * inv - xx * c);
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Assemble { sources, map } => {
                    let mut parts: Vec<Option<Mat>> = sources
                        .iter()
                        .map(|&s| self.ng(s).then(|| Mat::zeros(self.value(s).raw_dim())))
                        .collect();
                    for (r, &(s, row)) in map.iter().enumerate() {
                        if let Some(p) = &mut parts[s] {
                            let mut dst = p.row_mut(row);
                            dst += &g.row(r);
                        }
                    }
                    for (s, p) in sources.iter().zip(parts) {
                        if let Some(p) = p {
                            acc(&mut grads, *s, p);
                        }
                    }
                }
                Op::Attention { q, k, v, segments, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.raw_dim());
                    let mut dk = Mat::zeros(kv.raw_dim());
                    let mut dv = Mat::zeros(vv.raw_dim());
                    let mut pi = 0;
                    for &(start, len) in segments {
                        for h in 0..*heads {
                            let cols = s![start..start + len, h * dh..(h + 1) * dh];
                            let p = &probs[pi];
                            pi += 1;
                            let go = g.slice(cols);
                            dv.slice_mut(cols).assign(&p.t().dot(&go));
                            let dp = go.dot(&vv.slice(cols).t());
                            let mut ds = p * &dp;
                            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let sum: f64 = row.sum();
                                Zip::from(&mut row).and(prow).for_each(|x, &pp| *x -= pp * sum);
                            }
                            ds *= scale;
                            dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                            dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                        }
                    }
                    if self.ng(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.ng(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.ng(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let up = g[[0, 0]];
                    let mut dz = probs.clone();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        dz[[r, t]] -= 1.0;
                        dz.row_mut(r).mapv_inplace(|x| x * w * up);
                    }
                    acc(&mut grads, *logits, dz);
                }
                Op::KlDiv { logits, log_q, weights, probs, rows } => {
                    let up = g[[0, 0]];
                    let mut dz = Mat::zeros(probs.raw_dim());
                    for r in 0..probs.nrows() {
                        let w = weights[r] * up;
                        let kl = rows[r];
                        Zip::from(dz.row_mut(r))
                            .and(probs.row(r))
                            .and(log_q.row(r))
                            .for_each(|d, &p, &lq| {
                                if p > 0.0 {
                                    *d = w * p * (p.ln() - lq - kl);
                                }
                            });
                    }
                    acc(&mut grads, *logits, dz);
                }
                Op::SqDist { x, anchor, weight } => {
                    let up = g[[0, 0]];
                    let mut dx = self.value(*x) - &**anchor;
                    Zip::from(&mut dx).and(&**weight).for_each(|d, &w| *d *= 2.0 * w * up);
                    acc(&mut grads, *x, dx);
                }
                Op::WeightedSum(terms) => {
                    let up = g[[0, 0]];
                    for &(v, w) in terms {
                        if self.ng(v) {
                            acc(&mut grads, v, Mat::from_elem((1, 1), up * w));
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `build` w.r.t. every entry of `inputs`.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |vals: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, m)| g.param(i, Arc::new(m.clone())))
                .collect();
            let out = build(&mut g, &vars);
            (g.scalar(out), g.backward(out))
        };
        let (_, grads) = eval(&inputs);
        let eps = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            for idx in 0..m.len() {
                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                let mut plus = inputs.clone();
                plus[i][[r, c]] += eps;
                let mut minus = inputs.clone();
                minus[i][[r, c]] -= eps;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let ana = grads.get(i).map(|g| g[[r, c]]).unwrap_or(0.0);
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < 1e-5,
                    "input {i} [{r},{c}]: numeric {num} analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn matmul_norm_gelu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 4);
        let gain = rand_mat(&mut rng, 1, 4);
        let bias = rand_mat(&mut rng, 1, 4);
        check(vec![x, w, gain, bias], |g, v| {
            let n = g.rms_norm(v[0], v[2]);
            let h = g.matmul(n, v[1]);
            let h = g.add_row(h, v[3]);
            let h = g.gelu(h);
            let t: Vec<usize> = vec![0, 1, 3];
            g.cross_entropy(h, t, vec![0.5, 0.25, 0.25])
        });
    }

    #[test]
    fn attention_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_mat(&mut rng, 5, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let v = rand_mat(&mut rng, 5, 4);
        let log_q = Arc::new(log_softmax(&rand_mat(&mut rng, 5, 4)));
        check(vec![q, k, v], move |g, vars| {
            let a = g.attention(vars[0], vars[1], vars[2], vec![(0, 3), (3, 2)], 2);
            g.kl_div(a, log_q.clone(), vec![0.2; 5])
        });
    }

    #[test]
    fn assemble_and_sq_dist() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = rand_mat(&mut rng, 4, 3);
        let other = rand_mat(&mut rng, 2, 3);
        let anchor = Arc::new(rand_mat(&mut rng, 5, 3));
        let weight = Arc::new(rand_mat(&mut rng, 5, 3).mapv(f64::abs));
        check(vec![table, other], move |g, v| {
            let a = g.assemble(&[v[0], v[1]], vec![(0, 1), (1, 0), (0, 1), (0, 3), (1, 1)]);
            let a = g.scale(a, 1.5);
            let s1 = g.sq_dist(a, anchor.clone(), weight.clone());
            let b = g.add(a, a);
            let s2 = g.sq_dist(b, anchor.clone(), weight.clone());
            g.weighted_sum(&[(s1, 0.3), (s2, 0.7)])
        });
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut g = Graph::new();
        let q = g.constant_owned(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let v = g.constant_owned(array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        let out = g.attention(q, q, v, vec![(0, 3)], 1);
        // first row can only see itself
        assert_eq!(g.value(out).row(0).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(0, Arc::new(array![[1.0, 2.0], [3.0, 4.0]]));
        let x = g.constant_owned(array![[1.0, -1.0]]);
        let y = g.matmul(x, w);
        let loss = g.cross_entropy(y, vec![1], vec![1.0]);
        let grads = g.backward(loss);
        assert_eq!(grads.by_param.len(), 1);
        assert!(grads.get(0).is_some());
    }
}
