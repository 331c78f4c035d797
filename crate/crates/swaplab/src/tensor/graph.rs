//! Reverse-mode autodiff graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes hold their value in an
//! `Rc<Tensor>`; each op's backward is a boxed closure capturing the `Rc`s it needs.
//! Whether an input needs a gradient is decided at op-construction time, so adjoint
//! work for constants (frozen oracle weights, conditioning latents) is skipped
//! statically rather than filtered later.

use std::rc::Rc;

use ndarray::ArrayView2;

use super::{col2im, im2col, matmul, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &mut Vec<Option<Tensor>>)>;

struct Node {
    value: Rc<Tensor>,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], contribution: &[f64]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), contribution.to_vec()));
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradients (model parameters, probed inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Leaf excluded from gradient work (conditioning tensors, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Runs the adjoint sweep from scalar node `loss` and returns all gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward expects a scalar loss node"
        );
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(grad) = g[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                back(&grad, &mut g);
            }
            g[id] = Some(grad);
        }
        Grads { g }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data: Vec<f64> = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        let (na, nb) = (self.needs(a), self.needs(b));
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            let shape = va.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                if na {
                    add_into(&mut g[a.0], &shape, &dy.data);
                }
                if nb {
                    add_into(&mut g[b.0], &shape, &dy.data);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data: Vec<f64> = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        let (na, nb) = (self.needs(a), self.needs(b));
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            let shape = va.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                if na {
                    let da: Vec<f64> =
                        dy.data.iter().zip(&vb.data).map(|(d, y)| d * y).collect();
                    add_into(&mut g[a.0], &shape, &da);
                }
                if nb {
                    let db: Vec<f64> =
                        dy.data.iter().zip(&va.data).map(|(d, x)| d * x).collect();
                    add_into(&mut g[b.0], &shape, &db);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// `a*x + b` applied elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let vx = self.rc(x);
        let data: Vec<f64> = vx.data.iter().map(|v| a * v + b).collect();
        let out = Tensor::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            let shape = vx.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let dx: Vec<f64> = dy.data.iter().map(|d| a * d).collect();
                add_into(&mut g[x.0], &shape, &dx);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let data: Vec<f64> = vx
            .data
            .iter()
            .map(|&v| v / (1.0 + (-v).exp()))
            .collect();
        let out = Tensor::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            let shape = vx.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let dx: Vec<f64> = dy
                    .data
                    .iter()
                    .zip(&vx.data)
                    .map(|(d, &v)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        d * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                add_into(&mut g[x.0], &shape, &dx);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- matrix ops ----

    /// `x[n,d] · w[e,d]ᵀ + b[e]` — the standard linear layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.rc(x), self.rc(w), self.rc(b));
        let (n, d) = (vx.shape[0], vx.shape[1]);
        let (e, d2) = (vw.shape[0], vw.shape[1]);
        assert_eq!(d, d2, "linear: in-features mismatch");
        assert_eq!(vb.shape, vec![e], "linear: bias shape");
        let xm = vx.as_matrix(n, d);
        let wm = vw.as_matrix(e, d);
        let mut y = matmul(xm, wm.t());
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += vb.data[j];
            }
        }
        let out = Tensor::new(vec![n, e], y.into_raw_vec_and_offset().0);
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let needs = nx || nw || nb;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let dym = dy.as_matrix(n, e);
                if nx {
                    let dx = matmul(dym, vw.as_matrix(e, d));
                    add_into(&mut g[x.0], &[n, d], dx.as_slice().unwrap());
                }
                if nw {
                    let dw = matmul(dym.t(), vx.as_matrix(n, d));
                    add_into(&mut g[w.0], &[e, d], dw.as_slice().unwrap());
                }
                if nb {
                    let mut db = vec![0.0; e];
                    for i in 0..n {
                        for j in 0..e {
                            db[j] += dy.data[i * e + j];
                        }
                    }
                    add_into(&mut g[b.0], &[e], &db);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Plain `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        let (m, k) = (va.shape[0], va.shape[1]);
        let (k2, n) = (vb.shape[0], vb.shape[1]);
        assert_eq!(k, k2, "matmul inner dim");
        let y = matmul(va.as_matrix(m, k), vb.as_matrix(k2, n));
        let out = Tensor::new(vec![m, n], y.into_raw_vec_and_offset().0);
        let (na, nb) = (self.needs(a), self.needs(b));
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let dym = dy.as_matrix(m, n);
                if na {
                    // dA = dY · Bᵀ
                    let da = matmul(dym, vb.as_matrix(k, n).t());
                    add_into(&mut g[a.0], &[m, k], da.as_slice().unwrap());
                }
                if nb {
                    // dB = Aᵀ · dY
                    let db = matmul(va.as_matrix(m, k).t(), dym);
                    add_into(&mut g[b.0], &[k, n], db.as_slice().unwrap());
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- convolution ----

    /// 2-D convolution: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.rc(x), self.rc(w), self.rc(b));
        let (cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (cout, cin2, kh, kw) = (vw.shape[0], vw.shape[1], vw.shape[2], vw.shape[3]);
        assert_eq!(cin, cin2, "conv2d: channel mismatch");
        assert_eq!(vb.shape, vec![cout], "conv2d: bias shape");
        let (col, oh, ow) = im2col(&vx.data, cin, h, wd, kh, kw, stride, pad);
        let col = Rc::new(col);
        let krows = cin * kh * kw;
        let cols = oh * ow;
        let wm = vw.as_matrix(cout, krows);
        let cm = ArrayView2::from_shape((krows, cols), col.as_slice()).unwrap();
        let mut y = matmul(wm, cm);
        for (co, mut row) in y.rows_mut().into_iter().enumerate() {
            for v in row.iter_mut() {
                *v += vb.data[co];
            }
        }
        let out = Tensor::new(vec![cout, oh, ow], y.into_raw_vec_and_offset().0);
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let needs = nx || nw || nb;
        let back: Option<BackFn> = needs.then(|| {
            let col = Rc::clone(&col);
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let dym = dy.as_matrix(cout, cols);
                if nw {
                    let cm = ArrayView2::from_shape((krows, cols), col.as_slice()).unwrap();
                    let dw = matmul(dym, cm.t());
                    add_into(&mut g[w.0], &[cout, cin, kh, kw], dw.as_slice().unwrap());
                }
                if nb {
                    let mut db = vec![0.0; cout];
                    for co in 0..cout {
                        db[co] = dy.data[co * cols..(co + 1) * cols].iter().sum();
                    }
                    add_into(&mut g[b.0], &[cout], &db);
                }
                if nx {
                    let wm = vw.as_matrix(cout, krows);
                    let dcol = matmul(wm.t(), dym);
                    let dx = col2im(
                        dcol.as_slice().unwrap(),
                        cin,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        pad,
                    );
                    add_into(&mut g[x.0], &[cin, h, wd], &dx);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- normalization ----

    /// GroupNorm over `[C,H,W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-6;
        let (vx, vg, vbt) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let (c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        assert_eq!(c % groups, 0, "group_norm: channels not divisible by groups");
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let plane = h * w;
        let mut xhat = vec![0.0; vx.data.len()];
        let mut inv_std = vec![0.0; groups];
        for gi in 0..groups {
            let s = gi * gsize;
            let seg = &vx.data[s..s + gsize];
            let mean = seg.iter().sum::<f64>() / gsize as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[gi] = istd;
            for (i, v) in seg.iter().enumerate() {
                xhat[s + i] = (v - mean) * istd;
            }
        }
        let mut ydata = vec![0.0; vx.data.len()];
        for ci in 0..c {
            let (ga, be) = (vg.data[ci], vbt.data[ci]);
            for p in 0..plane {
                let idx = ci * plane + p;
                ydata[idx] = ga * xhat[idx] + be;
            }
        }
        let out = Tensor::new(vx.shape.clone(), ydata);
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let (nx, ng, nb) = (self.needs(x), self.needs(gamma), self.needs(beta));
        let needs = nx || ng || nb;
        let back: Option<BackFn> = needs.then(|| {
            let xhat = Rc::clone(&xhat);
            let inv_std = Rc::clone(&inv_std);
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                if ng {
                    let mut dg = vec![0.0; c];
                    for ci in 0..c {
                        for p in 0..plane {
                            let idx = ci * plane + p;
                            dg[ci] += dy.data[idx] * xhat[idx];
                        }
                    }
                    add_into(&mut g[gamma.0], &[c], &dg);
                }
                if nb {
                    let mut db = vec![0.0; c];
                    for ci in 0..c {
                        db[ci] = dy.data[ci * plane..(ci + 1) * plane].iter().sum();
                    }
                    add_into(&mut g[beta.0], &[c], &db);
                }
                if nx {
                    let mut dx = vec![0.0; dy.data.len()];
                    for gi in 0..groups {
                        let s = gi * gsize;
                        // dxhat = dy * gamma (channel-wise within the group)
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        let mut dxh = vec![0.0; gsize];
                        for i in 0..gsize {
                            let ci = gi * cpg + i / plane;
                            let d = dy.data[s + i] * vg.data[ci];
                            dxh[i] = d;
                            sum_dxh += d;
                            sum_dxh_xh += d * xhat[s + i];
                        }
                        let n = gsize as f64;
                        for i in 0..gsize {
                            dx[s + i] = inv_std[gi]
                                * (dxh[i] - sum_dxh / n - xhat[s + i] * sum_dxh_xh / n);
                        }
                    }
                    add_into(&mut g[x.0], &[c, h, w], &dx);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// LayerNorm over the last dim of `[n,d]` with affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-6;
        let (vx, vg, vbt) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let (n, d) = (vx.shape[0], vx.shape[1]);
        assert_eq!(vg.shape, vec![d]);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &vx.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mean) * istd;
            }
        }
        let ydata: Vec<f64> = (0..n * d)
            .map(|idx| vg.data[idx % d] * xhat[idx] + vbt.data[idx % d])
            .collect();
        let out = Tensor::new(vec![n, d], ydata);
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let (nx, ng, nb) = (self.needs(x), self.needs(gamma), self.needs(beta));
        let needs = nx || ng || nb;
        let back: Option<BackFn> = needs.then(|| {
            let xhat = Rc::clone(&xhat);
            let inv_std = Rc::clone(&inv_std);
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                if ng {
                    let mut dg = vec![0.0; d];
                    for idx in 0..n * d {
                        dg[idx % d] += dy.data[idx] * xhat[idx];
                    }
                    add_into(&mut g[gamma.0], &[d], &dg);
                }
                if nb {
                    let mut db = vec![0.0; d];
                    for idx in 0..n * d {
                        db[idx % d] += dy.data[idx];
                    }
                    add_into(&mut g[beta.0], &[d], &db);
                }
                if nx {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        let mut dxh = vec![0.0; d];
                        for j in 0..d {
                            let idx = i * d + j;
                            let v = dy.data[idx] * vg.data[j];
                            dxh[j] = v;
                            sum_dxh += v;
                            sum_dxh_xh += v * xhat[idx];
                        }
                        let dn = d as f64;
                        for j in 0..d {
                            let idx = i * d + j;
                            dx[idx] = inv_std[i]
                                * (dxh[j] - sum_dxh / dn - xhat[idx] * sum_dxh_xh / dn);
                        }
                    }
                    add_into(&mut g[x.0], &[n, d], &dx);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- attention ----

    /// Multi-head softmax attention on pre-projected tokens.
    ///
    /// `q [n,C]`, `k [m,C]`, `v [m,C]`, heads dividing C. Returns `[n,C]`. This is
    /// one fused node: per head S = Q·Kᵀ/√dh, P = softmax(S), O = P·V, heads
    /// re-concatenated along the channel dim.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (vq, vk, vv) = (self.rc(q), self.rc(k), self.rc(v));
        let (n, c) = (vq.shape[0], vq.shape[1]);
        let m = vk.shape[0];
        assert_eq!(vk.shape[1], c, "attention: k dim");
        assert_eq!(vv.shape, vec![m, c], "attention: v shape");
        assert_eq!(c % heads, 0, "attention: heads must divide channels");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = vec![0.0; n * c];
        let mut probs = vec![0.0; heads * n * m];
        for hd in 0..heads {
            let off = hd * dh;
            // S and P for this head.
            let p_head = &mut probs[hd * n * m..(hd + 1) * n * m];
            for i in 0..n {
                let qrow = &vq.data[i * c + off..i * c + off + dh];
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..m {
                    let krow = &vk.data[j * c + off..j * c + off + dh];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p_head[i * m + j] = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut z = 0.0;
                for j in 0..m {
                    let e = (p_head[i * m + j] - maxv).exp();
                    p_head[i * m + j] = e;
                    z += e;
                }
                for j in 0..m {
                    p_head[i * m + j] /= z;
                }
                // O row
                let orow = &mut out[i * c + off..i * c + off + dh];
                for j in 0..m {
                    let pij = p_head[i * m + j];
                    let vrow = &vv.data[j * c + off..j * c + off + dh];
                    for (o, vj) in orow.iter_mut().zip(vrow) {
                        *o += pij * vj;
                    }
                }
            }
        }
        let outt = Tensor::new(vec![n, c], out);
        let probs = Rc::new(probs);
        let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
        let needs = nq || nk || nv;
        let back: Option<BackFn> = needs.then(|| {
            let probs = Rc::clone(&probs);
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let mut dq = vec![0.0; n * c];
                let mut dk = vec![0.0; m * c];
                let mut dv = vec![0.0; m * c];
                for hd in 0..heads {
                    let off = hd * dh;
                    let p_head = &probs[hd * n * m..(hd + 1) * n * m];
                    for i in 0..n {
                        let dorow = &dy.data[i * c + off..i * c + off + dh];
                        // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                        let mut dp = vec![0.0; m];
                        for j in 0..m {
                            let pij = p_head[i * m + j];
                            let vrow = &vv.data[j * c + off..j * c + off + dh];
                            let mut dot = 0.0;
                            for (a, b) in dorow.iter().zip(vrow) {
                                dot += a * b;
                            }
                            dp[j] = dot;
                            if nv {
                                let dvrow = &mut dv[j * c + off..j * c + off + dh];
                                for (dvj, doi) in dvrow.iter_mut().zip(dorow) {
                                    *dvj += pij * doi;
                                }
                            }
                        }
                        // softmax adjoint: dS = P ⊙ (dP − Σ dP⊙P), then · scale
                        let dot_pp: f64 =
                            (0..m).map(|j| dp[j] * p_head[i * m + j]).sum();
                        for j in 0..m {
                            let ds = p_head[i * m + j] * (dp[j] - dot_pp) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &vk.data[j * c + off..j * c + off + dh];
                            if nq {
                                let dqrow = &mut dq[i * c + off..i * c + off + dh];
                                for (dqi, kj) in dqrow.iter_mut().zip(krow) {
                                    *dqi += ds * kj;
                                }
                            }
                            if nk {
                                let qrow = &vq.data[i * c + off..i * c + off + dh];
                                let dkrow = &mut dk[j * c + off..j * c + off + dh];
                                for (dkj, qi) in dkrow.iter_mut().zip(qrow) {
                                    *dkj += ds * qi;
                                }
                            }
                        }
                    }
                }
                if nq {
                    add_into(&mut g[q.0], &[n, c], &dq);
                }
                if nk {
                    add_into(&mut g[k.0], &[m, c], &dk);
                }
                if nv {
                    add_into(&mut g[v.0], &[m, c], &dv);
                }
            }) as BackFn
        });
        self.push(outt, needs, back)
    }

    // ---- layout ops ----

    /// `[C,H,W]` → `[H*W, C]` token view.
    pub fn spatial_to_tokens(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let (c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let plane = h * w;
        let mut data = vec![0.0; c * plane];
        for ci in 0..c {
            for p in 0..plane {
                data[p * c + ci] = vx.data[ci * plane + p];
            }
        }
        let out = Tensor::new(vec![plane, c], data);
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let mut dx = vec![0.0; c * plane];
                for ci in 0..c {
                    for p in 0..plane {
                        dx[ci * plane + p] = dy.data[p * c + ci];
                    }
                }
                add_into(&mut g[x.0], &[c, h, w], &dx);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// `[H*W, C]` → `[C,H,W]`.
    pub fn tokens_to_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.rc(x);
        let (plane, c) = (vx.shape[0], vx.shape[1]);
        assert_eq!(plane, h * w, "tokens_to_spatial: token count");
        let mut data = vec![0.0; c * plane];
        for p in 0..plane {
            for ci in 0..c {
                data[ci * plane + p] = vx.data[p * c + ci];
            }
        }
        let out = Tensor::new(vec![c, h, w], data);
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let mut dx = vec![0.0; plane * c];
                for p in 0..plane {
                    for ci in 0..c {
                        dx[p * c + ci] = dy.data[ci * plane + p];
                    }
                }
                add_into(&mut g[x.0], &[plane, c], &dx);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Concatenates token matrices `[n1,d]` and `[n2,d]` along the token axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        let d = va.shape[1];
        assert_eq!(vb.shape[1], d, "concat_rows: dim mismatch");
        let (n1, n2) = (va.shape[0], vb.shape[0]);
        let mut data = Vec::with_capacity((n1 + n2) * d);
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let out = Tensor::new(vec![n1 + n2, d], data);
        let (na, nb) = (self.needs(a), self.needs(b));
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                if na {
                    add_into(&mut g[a.0], &[n1, d], &dy.data[..n1 * d]);
                }
                if nb {
                    add_into(&mut g[b.0], &[n2, d], &dy.data[n1 * d..]);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Concatenates `[Ca,H,W]` and `[Cb,H,W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        let (ca, h, w) = (va.shape[0], va.shape[1], va.shape[2]);
        let cb = vb.shape[0];
        assert_eq!(&vb.shape[1..], &[h, w], "concat_channels: plane mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let out = Tensor::new(vec![ca + cb, h, w], data);
        let (na, nb) = (self.needs(a), self.needs(b));
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            let plane = h * w;
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                if na {
                    add_into(&mut g[a.0], &[ca, h, w], &dy.data[..ca * plane]);
                }
                if nb {
                    add_into(&mut g[b.0], &[cb, h, w], &dy.data[ca * plane..]);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Nearest-neighbor 2× spatial upsample.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let (c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(ci * oh + y) * ow + xx] = vx.data[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], data);
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(ci * h + y / 2) * w + xx / 2] +=
                                dy.data[(ci * oh + y) * ow + xx];
                        }
                    }
                }
                add_into(&mut g[x.0], &[c, h, w], &dx);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Adds a per-channel bias `[C]` (or `[1,C]`) across the spatial plane of `[C,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.rc(x), self.rc(b));
        let (c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        assert_eq!(vb.numel(), c, "add_channel_bias: bias length");
        let plane = h * w;
        let data: Vec<f64> = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data[i / plane])
            .collect();
        let out = Tensor::new(vx.shape.clone(), data);
        let (nx, nb) = (self.needs(x), self.needs(b));
        let needs = nx || nb;
        let back: Option<BackFn> = needs.then(|| {
            let bshape = vb.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                if nx {
                    add_into(&mut g[x.0], &[c, h, w], &dy.data);
                }
                if nb {
                    let mut db = vec![0.0; c];
                    for ci in 0..c {
                        db[ci] = dy.data[ci * plane..(ci + 1) * plane].iter().sum();
                    }
                    add_into(&mut g[b.0], &bshape, &db);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Zero-copy reshape (same element count, same ordering).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let vx = self.rc(x);
        assert_eq!(
            shape.iter().product::<usize>(),
            vx.numel(),
            "reshape: element count"
        );
        let old_shape = vx.shape.clone();
        let out = Tensor::new(shape, vx.data.clone());
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                add_into(&mut g[x.0], &old_shape, &dy.data);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Indexed read: `out[i] = x[index[i]]`, flattened. The adjoint
    /// scatter-adds through the same map, so repeated indices accumulate.
    /// Fixed relayouts (block-to-pixel rearrangement, slicing) ride through
    /// autodiff on this one primitive.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, out_shape: Vec<usize>) -> Var {
        let vx = self.rc(x);
        assert_eq!(
            index.len(),
            out_shape.iter().product::<usize>(),
            "gather: index length vs output shape"
        );
        let n_in = vx.numel();
        let data: Vec<f64> = index
            .iter()
            .map(|&i| {
                assert!(i < n_in, "gather: index {i} out of range for {n_in} inputs");
                vx.data[i]
            })
            .collect();
        let out = Tensor::new(out_shape, data);
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            let in_shape = vx.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let mut dx = vec![0.0; n_in];
                for (o, &i) in index.iter().enumerate() {
                    dx[i] += dy.data[o];
                }
                add_into(&mut g[x.0], &in_shape, &dx);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- reductions / losses ----

    /// Mean over all elements → scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let n = vx.numel() as f64;
        let out = Tensor::scalar(vx.data.iter().sum::<f64>() / n);
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            let shape = vx.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let d = dy.item() / n;
                let dx = vec![d; n as usize];
                add_into(&mut g[x.0], &shape, &dx);
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Mean squared error between equal-shape tensors → scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape, vb.shape, "mse shape mismatch");
        let n = va.numel() as f64;
        let val = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let out = Tensor::scalar(val);
        let (na, nb) = (self.needs(a), self.needs(b));
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            let shape = va.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let s = 2.0 * dy.item() / n;
                if na {
                    let da: Vec<f64> = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(x, y)| s * (x - y))
                        .collect();
                    add_into(&mut g[a.0], &shape, &da);
                }
                if nb {
                    let db: Vec<f64> = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(x, y)| -s * (x - y))
                        .collect();
                    add_into(&mut g[b.0], &shape, &db);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Cosine similarity between two vectors → scalar. Caller guarantees nonzero norms.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape, vb.shape, "cosine_sim shape mismatch");
        let dot: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum();
        let na_: f64 = va.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb_: f64 = vb.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            na_ > 0.0 && nb_ > 0.0,
            "cosine_sim: zero-norm operand must be rejected upstream"
        );
        let c = dot / (na_ * nb_);
        let out = Tensor::scalar(c);
        let (ga, gb) = (self.needs(a), self.needs(b));
        let needs = ga || gb;
        let back: Option<BackFn> = needs.then(|| {
            let shape = va.shape.clone();
            Box::new(move |dy: &Tensor, g: &mut Vec<Option<Tensor>>| {
                let d = dy.item();
                if ga {
                    let da: Vec<f64> = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(x, y)| d * (y / (na_ * nb_) - c * x / (na_ * na_)))
                        .collect();
                    add_into(&mut g[a.0], &shape, &da);
                }
                if gb {
                    let db: Vec<f64> = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(x, y)| d * (x / (na_ * nb_) - c * y / (nb_ * nb_)))
                        .collect();
                    add_into(&mut g[b.0], &shape, &db);
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    /// Central finite differences against the analytic gradient for an arbitrary
    /// scalar-valued builder. This is the oracle the whole engine is checked with.
    fn check_grad<F>(build: F, input: &Tensor, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input gradient").clone();

        let h = 1e-6;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let mut gp = Graph::new();
            let xp = gp.leaf(plus);
            let out_p = build(&mut gp, xp);
            let lp = gp.value(out_p).item();
            let mut gm = Graph::new();
            let xm = gm.leaf(minus);
            let out_m = build(&mut gm, xm);
            let lm = gm.value(out_m).item();
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.data[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom < tol,
                "grad mismatch at {i}: analytic {an}, fd {fd}"
            );
        }
    }

    fn randt(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    #[test]
    fn grad_linear_silu_mse() {
        let w = randt(&[3, 4], 1);
        let b = randt(&[3], 2);
        let target = randt(&[2, 3], 3);
        check_grad(
            |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.linear(x, wv, bv);
                let y = g.silu(y);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &randt(&[2, 4], 4),
            1e-5,
        );
    }

    #[test]
    fn grad_linear_weights_and_bias() {
        let x = randt(&[2, 4], 10);
        let target = randt(&[2, 3], 11);
        // weight gradient
        check_grad(
            |g, w| {
                let xv = g.constant(x.clone());
                let bv = g.constant(Tensor::zeros(&[3]));
                let y = g.linear(xv, w, bv);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &randt(&[3, 4], 12),
            1e-5,
        );
        // bias gradient
        check_grad(
            |g, b| {
                let xv = g.constant(x.clone());
                let wv = g.constant(randt(&[3, 4], 13));
                let y = g.linear(xv, wv, b);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &randt(&[3], 14),
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_all_inputs() {
        let x = randt(&[2, 5, 5], 20);
        let w = randt(&[3, 2, 3, 3], 21);
        let b = randt(&[3], 22);
        let target = randt(&[3, 3, 3], 23);
        // input
        check_grad(
            |g, xv| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(xv, wv, bv, 2, 1);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &x,
            1e-5,
        );
        // weights
        check_grad(
            |g, wv| {
                let xv = g.constant(x.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(xv, wv, bv, 2, 1);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &w,
            1e-5,
        );
    }

    #[test]
    fn grad_group_norm() {
        let gamma = randt(&[4], 30);
        let beta = randt(&[4], 31);
        let target = randt(&[4, 3, 3], 32);
        check_grad(
            |g, x| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                let y = g.group_norm(x, gv, bv, 2);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &randt(&[4, 3, 3], 33),
            1e-4,
        );
        // affine params
        check_grad(
            |g, gv| {
                let x = g.constant(randt(&[4, 3, 3], 34));
                let bv = g.constant(beta.clone());
                let y = g.group_norm(x, gv, bv, 2);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &gamma,
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let gamma = randt(&[5], 40);
        let beta = randt(&[5], 41);
        let target = randt(&[3, 5], 42);
        check_grad(
            |g, x| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                let y = g.layer_norm(x, gv, bv);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &randt(&[3, 5], 43),
            1e-4,
        );
    }

    #[test]
    fn grad_attention_qkv() {
        let k = randt(&[6, 8], 50);
        let v = randt(&[6, 8], 51);
        let q = randt(&[4, 8], 52);
        let target = randt(&[4, 8], 53);
        check_grad(
            |g, qv| {
                let kv = g.constant(k.clone());
                let vv = g.constant(v.clone());
                let y = g.attention(qv, kv, vv, 2);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &q,
            1e-4,
        );
        check_grad(
            |g, kv| {
                let qv = g.constant(q.clone());
                let vv = g.constant(v.clone());
                let y = g.attention(qv, kv, vv, 2);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &k,
            1e-4,
        );
        check_grad(
            |g, vv| {
                let qv = g.constant(q.clone());
                let kv = g.constant(k.clone());
                let y = g.attention(qv, kv, vv, 2);
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &v,
            1e-4,
        );
    }

    #[test]
    fn grad_layout_ops_and_losses() {
        let target = randt(&[3, 2, 2], 60);
        check_grad(
            |g, x| {
                let tok = g.spatial_to_tokens(x);
                let back = g.tokens_to_spatial(tok, 2, 2);
                let up = g.upsample_nearest_2x(back);
                let m = g.mean_all(up);
                let t = g.constant(target.clone());
                let tm = g.mean_all(t);
                let d = g.sub(m, tm);
                g.mul(d, d)
            },
            &randt(&[3, 2, 2], 61),
            1e-5,
        );
    }

    #[test]
    fn grad_cosine_sim() {
        let b = randt(&[6], 70);
        check_grad(
            |g, a| {
                let bv = g.constant(b.clone());
                let c = g.cosine_sim(a, bv);
                g.affine(c, -1.0, 1.0)
            },
            &randt(&[6], 71),
            1e-5,
        );
    }

    #[test]
    fn gather_reads_by_index_and_its_adjoint_accumulates_repeats() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4], vec![10.0, 20.0, 30.0, 40.0]));
        let y = g.gather(x, vec![3, 0, 0, 2, 1, 0], vec![2, 3]);
        assert_eq!(g.value(y).shape, vec![2, 3]);
        assert_eq!(g.value(y).data, vec![40.0, 10.0, 10.0, 30.0, 20.0, 10.0]);
        // Weighted sum picks distinct coefficients per output slot so the
        // scatter-add is pinned: dL/dx[0] = 2+3+6, dx[1] = 5, dx[2] = 4, dx[3] = 1.
        let w = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.mul(y, w);
        let n = g.value(p).numel() as f64;
        let l = g.mean_all(p);
        let grads = g.backward(l);
        let dx = grads.get(x).unwrap();
        let expect = [11.0 / n, 5.0 / n, 4.0 / n, 1.0 / n];
        for (a, e) in dx.data.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "scatter-add gradient {a} vs {e}");
        }
    }

    #[test]
    fn grad_gather() {
        check_grad(
            |g, x| {
                let y = g.gather(x, vec![5, 1, 1, 4, 0, 3, 2, 5], vec![8]);
                let t = g.constant(Tensor::new(vec![8], vec![0.5; 8]));
                g.mse(y, t)
            },
            &randt(&[6], 90),
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let y = g.mul(a, c);
        let l = g.mean_all(y);
        let grads = g.backward(l);
        assert!(grads.get(a).is_some());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn fan_in_accumulates_gradients() {
        // y = x*x + x ⇒ dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![3.0]));
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let grads = g.backward(y);
        assert!((grads.get(x).unwrap().data[0] - 7.0).abs() < 1e-12);
    }
}
