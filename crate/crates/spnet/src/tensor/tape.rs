//! Reverse-mode gradient tape.
//!
//! Forward ops append a value to the arena and push a backward closure
//! capturing the inputs it needs; `backward` replays the closures in exact
//! reverse execution order, accumulating per-tensor gradients whose shapes
//! always equal their value shapes.

use crate::error::{Error, Result};

use super::ops::{self, ConvGeom};
use super::{Scalar, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Value arena plus gradient accumulators; split from the node list so
/// backward closures can borrow it mutably while the list is drained.
pub struct TapeState<S: Scalar> {
    vals: Vec<Tensor<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> TapeState<S> {
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.vals[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Takes the output gradient for a node; None means no gradient flowed.
    fn out_grad(&self, v: Var) -> Option<Vec<S>> {
        self.grads[v.0].clone()
    }

    fn accum(&mut self, v: Var, g: &[S]) {
        debug_assert_eq!(g.len(), self.vals[v.0].numel());
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => self.grads[v.0] = Some(g.to_vec()),
        }
    }
}

type BackwardFn<S> = Box<dyn FnOnce(&mut TapeState<S>)>;

/// Ordered record of executed operations with the saved inputs needed for
/// backward, plus per-tensor gradient accumulators.
pub struct Tape<S: Scalar = f32> {
    state: TapeState<S>,
    nodes: Vec<BackwardFn<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-channel batch statistics produced by a train-mode batch norm, for the
/// caller to fold into its running estimates.
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var_biased: Vec<S>,
    pub count: usize,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { state: TapeState { vals: Vec::new(), grads: Vec::new() }, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.state.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.vals.is_empty()
    }

    /// Registers a leaf tensor (input, parameter, or constant).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push_val(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.state.value(v)
    }

    /// Gradient of the last `backward` w.r.t. `v`; None if none flowed.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.state.grad(v)
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        self.state.grad(v).map(|g| {
            Tensor::from_vec(self.state.value(v).shape().to_vec(), g.to_vec()).expect("grad shape")
        })
    }

    fn push_val(&mut self, t: Tensor<S>) -> Var {
        self.state.vals.push(t);
        self.state.grads.push(None);
        Var(self.state.vals.len() - 1)
    }

    fn push_node(&mut self, f: impl FnOnce(&mut TapeState<S>) + 'static) {
        self.nodes.push(Box::new(f));
    }

    /// Replays recorded ops in reverse, seeding the scalar loss with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.state.vals[loss.0].numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.state.vals[loss.0].shape()
            )));
        }
        self.state.grads[loss.0] = Some(vec![S::ONE]);
        for node in std::mem::take(&mut self.nodes).into_iter().rev() {
            node(&mut self.state);
        }
        Ok(())
    }

    // ---- binary elementwise -------------------------------------------------

    fn broadcast_pair(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || self.value(b).numel() == 1 || self.value(a).numel() == 1 {
            Ok(())
        } else {
            Err(Error::Shape(format!("{op}: incompatible shapes {sa:?} vs {sb:?}")))
        }
    }

    /// a + b; equal shapes, or either side a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_pair(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if tb.numel() == 1 {
            let s = tb.item();
            ta.map(|x| x + s)
        } else if ta.numel() == 1 {
            let s = ta.item();
            tb.map(|x| s + x)
        } else {
            let mut o = ta.clone();
            for (x, &y) in o.data_mut().iter_mut().zip(tb.data()) {
                *x = *x + y;
            }
            o
        };
        let v = self.push_val(out);
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                if na == g.len() {
                    st.accum(a, &g);
                } else {
                    let mut s = S::ZERO;
                    for &x in &g {
                        s += x;
                    }
                    st.accum(a, &[s]);
                }
                if nb == g.len() {
                    st.accum(b, &g);
                } else {
                    let mut s = S::ZERO;
                    for &x in &g {
                        s += x;
                    }
                    st.accum(b, &[s]);
                }
            }
        });
        Ok(v)
    }

    /// a * b elementwise; equal shapes, or either side a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_pair(a, b, "mul")?;
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let out = if tb.numel() == 1 {
            let s = tb.item();
            ta.map(|x| x * s)
        } else if ta.numel() == 1 {
            let s = ta.item();
            tb.map(|x| s * x)
        } else {
            let mut o = ta.clone();
            for (x, &y) in o.data_mut().iter_mut().zip(tb.data()) {
                *x = *x * y;
            }
            o
        };
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let da: Vec<S> = if ta.numel() == g.len() {
                    if tb.numel() == 1 {
                        let s = tb.item();
                        g.iter().map(|&x| x * s).collect()
                    } else {
                        g.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect()
                    }
                } else {
                    let mut s = S::ZERO;
                    for (&gi, &bi) in g.iter().zip(tb.data()) {
                        s += gi * bi;
                    }
                    vec![s]
                };
                let db: Vec<S> = if tb.numel() == g.len() {
                    if ta.numel() == 1 {
                        let s = ta.item();
                        g.iter().map(|&x| x * s).collect()
                    } else {
                        g.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect()
                    }
                } else {
                    let mut s = S::ZERO;
                    for (&gi, &ai) in g.iter().zip(ta.data()) {
                        s += gi * ai;
                    }
                    vec![s]
                };
                st.accum(a, &da);
                st.accum(b, &db);
            }
        });
        Ok(v)
    }

    // ---- unary elementwise --------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let out = t.map(|v| v.max_s(S::ZERO));
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let dx: Vec<S> = g
                    .iter()
                    .zip(t.data())
                    .map(|(&gi, &xi)| if xi > S::ZERO { gi } else { S::ZERO })
                    .collect();
                st.accum(x, &dx);
            }
        });
        v
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let saved = out.clone();
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let dx: Vec<S> = g
                    .iter()
                    .zip(saved.data())
                    .map(|(&gi, &yi)| gi * (S::ONE - yi * yi))
                    .collect();
                st.accum(x, &dx);
            }
        });
        v
    }

    /// Clamp to [lo, hi]; backward masks strictly-out-of-range inputs
    /// (boundary inclusive, matching the STE masking convention).
    pub fn clip(&mut self, x: Var, lo: S, hi: S) -> Var {
        let t = self.value(x).clone();
        let out = t.map(|v| v.max_s(lo).min_s(hi));
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let dx: Vec<S> = g
                    .iter()
                    .zip(t.data())
                    .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { S::ZERO })
                    .collect();
                st.accum(x, &dx);
            }
        });
        v
    }

    /// c * x for a compile-time constant c.
    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let dx: Vec<S> = g.iter().map(|&gi| gi * c).collect();
                st.accum(x, &dx);
            }
        });
        v
    }

    /// Forward values computed by the caller with a diagonal Jacobian;
    /// backward multiplies the upstream gradient by `grad_scale` pointwise.
    /// This is how quantizers with straight-through backward get recorded.
    pub fn pointwise(&mut self, x: Var, out: Tensor<S>, grad_scale: Vec<S>) -> Result<Var> {
        if out.shape() != self.value(x).shape() || grad_scale.len() != out.numel() {
            return Err(Error::Shape(format!(
                "pointwise: output/grad shapes must match input {:?}",
                self.value(x).shape()
            )));
        }
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let dx: Vec<S> = g.iter().zip(&grad_scale).map(|(&gi, &mi)| gi * mi).collect();
                st.accum(x, &dx);
            }
        });
        Ok(v)
    }

    // ---- structured ops ------------------------------------------------------

    /// O = conv(input, filters) per the usual cross-correlation layout
    /// [N,I,h,w] * [K,I,kh,kw] -> [N,K,oh,ow].
    pub fn conv2d(&mut self, input: Var, filters: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::infer(self.value(input).shape(), self.value(filters).shape(), stride, pad)
            .map_err(Error::Shape)?;
        let out = ops::conv2d_forward(self.value(input).data(), self.value(filters).data(), &g);
        let out = Tensor::from_vec(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)?;
        let (ti, tf) = (self.value(input).clone(), self.value(filters).clone());
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(gout) = st.out_grad(v) {
                let (di, df) = ops::conv2d_backward(ti.data(), tf.data(), &gout, &g);
                st.accum(input, &di);
                st.accum(filters, &df);
            }
        });
        Ok(v)
    }

    /// out[n,m] = sum_d input[n,d] * weights[m,d] + bias[m].
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weights).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if si.len() != 2 || sw.len() != 2 || si[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::Shape(format!(
                "dense: input {si:?}, weights {sw:?}, bias {sb:?} do not agree"
            )));
        }
        let (n, d, m) = (si[0], si[1], sw[0]);
        let mut out = ops::matmul_nt(self.value(input).data(), self.value(weights).data(), n, d, m);
        for r in 0..n {
            for (o, &b) in out[r * m..(r + 1) * m].iter_mut().zip(self.value(bias).data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::from_vec(vec![n, m], out)?;
        let (ti, tw) = (self.value(input).clone(), self.value(weights).clone());
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let di = ops::matmul_nn(&g, tw.data(), n, m, d);
                let dw = ops::matmul_tn(&g, ti.data(), n, m, d);
                let mut db = vec![S::ZERO; m];
                for r in 0..n {
                    for (a, &x) in db.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                        *a += x;
                    }
                }
                st.accum(input, &di);
                st.accum(weights, &dw);
                st.accum(bias, &db);
            }
        });
        Ok(v)
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool wants 4-d input, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let inv = S::from_f64(1.0 / hw as f64);
        let data = self.value(x).data();
        let mut out = vec![S::ZERO; n * c];
        for i in 0..n * c {
            let mut acc = S::ZERO;
            for &v in &data[i * hw..(i + 1) * hw] {
                acc += v;
            }
            out[i] = acc * inv;
        }
        let out = Tensor::from_vec(vec![n, c], out)?;
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let mut dx = vec![S::ZERO; n * c * hw];
                for i in 0..n * c {
                    let gi = g[i] * inv;
                    for d in &mut dx[i * hw..(i + 1) * hw] {
                        *d = gi;
                    }
                }
                st.accum(x, &dx);
            }
        });
        Ok(v)
    }

    /// First `k_take` filters and `i_take` input channels of a [K,I,kh,kw]
    /// filter bank; backward scatters into the full bank.
    pub fn narrow_filters(&mut self, w: Var, k_take: usize, i_take: usize) -> Result<Var> {
        let s = self.value(w).shape().to_vec();
        if s.len() != 4 || k_take == 0 || k_take > s[0] || i_take == 0 || i_take > s[1] {
            return Err(Error::Shape(format!(
                "narrow_filters: take ({k_take},{i_take}) out of {s:?}"
            )));
        }
        let (kfull, ifull, kh, kw) = (s[0], s[1], s[2], s[3]);
        if k_take == kfull && i_take == ifull {
            return Ok(w);
        }
        let tap = kh * kw;
        let data = self.value(w).data();
        let mut out = vec![S::ZERO; k_take * i_take * tap];
        for kf in 0..k_take {
            for i in 0..i_take {
                let src = (kf * ifull + i) * tap;
                let dst = (kf * i_take + i) * tap;
                out[dst..dst + tap].copy_from_slice(&data[src..src + tap]);
            }
        }
        let out = Tensor::from_vec(vec![k_take, i_take, kh, kw], out)?;
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let mut dw = vec![S::ZERO; kfull * ifull * tap];
                for kf in 0..k_take {
                    for i in 0..i_take {
                        let dst = (kf * ifull + i) * tap;
                        let src = (kf * i_take + i) * tap;
                        dw[dst..dst + tap].copy_from_slice(&g[src..src + tap]);
                    }
                }
                st.accum(w, &dw);
            }
        });
        Ok(v)
    }

    /// First `d_take` columns of a [M,D] matrix.
    pub fn narrow_cols(&mut self, w: Var, d_take: usize) -> Result<Var> {
        let s = self.value(w).shape().to_vec();
        if s.len() != 2 || d_take == 0 || d_take > s[1] {
            return Err(Error::Shape(format!("narrow_cols: take {d_take} out of {s:?}")));
        }
        let (m, d) = (s[0], s[1]);
        if d_take == d {
            return Ok(w);
        }
        let data = self.value(w).data();
        let mut out = vec![S::ZERO; m * d_take];
        for r in 0..m {
            out[r * d_take..(r + 1) * d_take].copy_from_slice(&data[r * d..r * d + d_take]);
        }
        let out = Tensor::from_vec(vec![m, d_take], out)?;
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let mut dw = vec![S::ZERO; m * d];
                for r in 0..m {
                    dw[r * d..r * d + d_take].copy_from_slice(&g[r * d_take..(r + 1) * d_take]);
                }
                st.accum(w, &dw);
            }
        });
        Ok(v)
    }

    // ---- batch normalization -------------------------------------------------

    /// Train-mode batch norm over [N,C,H,W] with per-channel batch statistics
    /// (biased variance for normalization). `gamma`/`beta` are full-length
    /// [C_full]; only the first `active` channels are read/written, so sliced
    /// (slimmed) activations still accumulate gradients into full-size
    /// parameter buffers.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        active: usize,
        eps: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != active {
            return Err(Error::Shape(format!(
                "batch_norm_train: input {s:?} vs active channels {active}"
            )));
        }
        let cfull = self.value(gamma).numel();
        if active > cfull || self.value(beta).numel() != cfull {
            return Err(Error::Shape(format!(
                "batch_norm_train: {active} active channels, gamma/beta hold {cfull}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let count = n * hw;
        let inv_count = S::from_f64(1.0 / count as f64);
        let data = self.value(x).data();

        let mut mean = vec![S::ZERO; c];
        let mut var = vec![S::ZERO; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let mut acc = S::ZERO;
                for &v in &data[base..base + hw] {
                    acc += v;
                }
                mean[ch] += acc;
            }
        }
        for mv in mean.iter_mut() {
            *mv = *mv * inv_count;
        }
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let m = mean[ch];
                let mut acc = S::ZERO;
                for &v in &data[base..base + hw] {
                    let d = v - m;
                    acc += d * d;
                }
                var[ch] += acc;
            }
        }
        for vv in var.iter_mut() {
            *vv = *vv * inv_count;
        }

        let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
        let gdat = self.value(gamma).data().to_vec();
        let bdat = self.value(beta).data().to_vec();
        let mut xhat = vec![S::ZERO; data.len()];
        let mut out = vec![S::ZERO; data.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (m, is, ga, be) = (mean[ch], inv_std[ch], gdat[ch], bdat[ch]);
                for j in base..base + hw {
                    let xh = (data[j] - m) * is;
                    xhat[j] = xh;
                    out[j] = ga * xh + be;
                }
            }
        }
        let stats = BatchStats { mean: mean.clone(), var_biased: var, count };
        let out = Tensor::from_vec(s.clone(), out)?;
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let mut dgamma = vec![S::ZERO; cfull];
                let mut dbeta = vec![S::ZERO; cfull];
                let mut sum_g = vec![S::ZERO; c];
                let mut sum_gx = vec![S::ZERO; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                for ch in 0..c {
                    dgamma[ch] = sum_gx[ch];
                    dbeta[ch] = sum_g[ch];
                }
                let mut dx = vec![S::ZERO; g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let ga = gdat[ch];
                        let is = inv_std[ch];
                        let k1 = sum_g[ch] * inv_count;
                        let k2 = sum_gx[ch] * inv_count;
                        for j in base..base + hw {
                            dx[j] = ga * is * (g[j] - k1 - xhat[j] * k2);
                        }
                    }
                }
                st.accum(x, &dx);
                st.accum(gamma, &dgamma);
                st.accum(beta, &dbeta);
            }
        });
        Ok((v, stats))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        active: usize,
        eps: S,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != active || running_mean.len() < active || running_var.len() < active
        {
            return Err(Error::Shape(format!(
                "batch_norm_eval: input {s:?} vs active channels {active}"
            )));
        }
        let cfull = self.value(gamma).numel();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let inv_std: Vec<S> =
            running_var[..c].iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
        let mean = running_mean[..c].to_vec();
        let gdat = self.value(gamma).data().to_vec();
        let bdat = self.value(beta).data().to_vec();
        let data = self.value(x).data();
        let mut out = vec![S::ZERO; data.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (m, is, ga, be) = (mean[ch], inv_std[ch], gdat[ch], bdat[ch]);
                for j in base..base + hw {
                    out[j] = ga * (data[j] - m) * is + be;
                }
            }
        }
        let saved_x = self.value(x).clone();
        let out = Tensor::from_vec(s, out)?;
        let v = self.push_val(out);
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let mut dx = vec![S::ZERO; g.len()];
                let mut dgamma = vec![S::ZERO; cfull];
                let mut dbeta = vec![S::ZERO; cfull];
                let xd = saved_x.data();
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let (m, is, ga) = (mean[ch], inv_std[ch], gdat[ch]);
                        for j in base..base + hw {
                            dx[j] = g[j] * ga * is;
                            dgamma[ch] += g[j] * (xd[j] - m) * is;
                            dbeta[ch] += g[j];
                        }
                    }
                }
                st.accum(x, &dx);
                st.accum(gamma, &dgamma);
                st.accum(beta, &dbeta);
            }
        });
        Ok(v)
    }

    // ---- losses ---------------------------------------------------------------

    /// Mean over the batch of -log softmax(logits)[label], max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArg(format!("label {bad} out of range for {c} classes")));
        }
        let probs = ops::softmax_rows(self.value(logits).data(), n, c);
        let mut loss = S::ZERO;
        for (r, &l) in labels.iter().enumerate() {
            loss += -(probs[r * c + l].ln());
        }
        loss = loss * S::from_f64(1.0 / n as f64);
        let labels = labels.to_vec();
        let v = self.push_val(Tensor::scalar(loss));
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let up = g[0] * S::from_f64(1.0 / n as f64);
                let mut dx = probs;
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] = dx[r * c + l] - S::ONE;
                }
                for d in &mut dx {
                    *d = *d * up;
                }
                st.accum(logits, &dx);
            }
        });
        Ok(v)
    }

    /// Mean over the batch of KL(p_teacher || softmax(student_logits)).
    /// The teacher distribution is a constant (stop-gradient): no gradient
    /// path exists toward it by construction.
    pub fn kl_divergence(&mut self, p_teacher: &Tensor<S>, student_logits: Var) -> Result<Var> {
        let s = self.value(student_logits).shape().to_vec();
        if p_teacher.shape() != s.as_slice() || s.len() != 2 {
            return Err(Error::Shape(format!(
                "kl_divergence: teacher {:?} vs student {s:?}",
                p_teacher.shape()
            )));
        }
        let (n, c) = (s[0], s[1]);
        for r in 0..n {
            let row = &p_teacher.data()[r * c..(r + 1) * c];
            let mut sum = S::ZERO;
            for &p in row {
                if p < S::ZERO {
                    return Err(Error::InvalidArg(format!(
                        "kl_divergence: teacher row {r} has a negative probability"
                    )));
                }
                sum += p;
            }
            if (sum - S::ONE).abs().to_f64() > 1e-5 {
                return Err(Error::InvalidArg(format!(
                    "kl_divergence: teacher row {r} sums to {sum}, not 1"
                )));
            }
        }
        let q = ops::softmax_rows(self.value(student_logits).data(), n, c);
        let mut loss = S::ZERO;
        for (i, (&p, &qi)) in p_teacher.data().iter().zip(&q).enumerate() {
            let _ = i;
            if p > S::ZERO {
                loss += p * (p.ln() - qi.ln());
            }
        }
        loss = loss * S::from_f64(1.0 / n as f64);
        let pt = p_teacher.clone();
        let v = self.push_val(Tensor::scalar(loss));
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let up = g[0] * S::from_f64(1.0 / n as f64);
                let dx: Vec<S> =
                    q.iter().zip(pt.data()).map(|(&qi, &pi)| (qi - pi) * up).collect();
                st.accum(student_logits, &dx);
            }
        });
        Ok(v)
    }

    /// Unnormalized squared L2 distance; gradients flow to both arguments.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mse: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let mut loss = S::ZERO;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            loss += d * d;
        }
        let v = self.push_val(Tensor::scalar(loss));
        self.push_node(move |st| {
            if let Some(g) = st.out_grad(v) {
                let two = S::from_f64(2.0) * g[0];
                let da: Vec<S> =
                    ta.data().iter().zip(tb.data()).map(|(&x, &y)| two * (x - y)).collect();
                let db: Vec<S> = da.iter().map(|&d| -d).collect();
                st.accum(a, &da);
                st.accum(b, &db);
            }
        });
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_trivial_cases() {
        // zeros in, zeros out
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.input(t(&[3, 2, 3, 3], &[0.5; 54]));
        let o = tape.conv2d(x, w, 1, 1).unwrap();
        assert!(tape.value(o).data().iter().all(|&v| v == 0.0));

        // 1x1 scalar product
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[1, 1, 1, 1], &[2.0]));
        let w = tape.input(t(&[1, 1, 1, 1], &[3.0]));
        let o = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(o).data(), &[6.0]);
    }

    #[test]
    fn conv_rejects_shape_mismatch_with_diagnostic() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.input(Tensor::zeros(&[2, 4, 3, 3]));
        let err = tape.conv2d(x, w, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = tape.input(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let b = tape.input(Tensor::zeros(&[3]));
        let o = tape.dense(x, eye, b).unwrap();
        assert_eq!(tape.value(o).data(), tape.value(x).data());

        // zero input -> bias broadcast
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[2, 3]));
        let w = tape.input(t(&[4, 3], &[1.0; 12]));
        let b = tape.input(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
        let o = tape.dense(x, w, b).unwrap();
        assert_eq!(&tape.value(o).data()[..4], &[0.5, -1.0, 2.0, 0.0]);
        assert_eq!(&tape.value(o).data()[4..], &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let y = tape.input(t(&[3], &[-2.0, 0.5, 3.0]));
        let c = tape.clip(y, 0.0, 1.0);
        assert_eq!(tape.value(c).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn clip_backward_masks_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[1], &[3.0]));
        let c = tape.clip(x, 0.0, 1.0);
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn softmax_ce_uniform_and_stability() {
        let mut tape = Tape::<f32>::new();
        let l = tape.input(t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).item() - (2.0f32).ln()).abs() < 1e-6);

        let mut tape = Tape::<f32>::new();
        let l = tape.input(t(&[1, 2], &[1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let v = tape.value(loss).item();
        assert!(v.is_finite() && v.abs() < 1e-3, "{v}");

        let mut tape = Tape::<f32>::new();
        let l = tape.input(t(&[1, 2], &[0.0, 0.0]));
        assert!(tape.softmax_cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn kl_examples() {
        // D_KL(p ‖ p) == 0
        let mut tape = Tape::<f32>::new();
        let l = tape.input(t(&[1, 3], &[0.3, 1.1, -0.4]));
        let p = Tensor::from_vec(
            vec![1, 3],
            ops::softmax_rows(&[0.3f32, 1.1, -0.4], 1, 3),
        )
        .unwrap();
        let loss = tape.kl_divergence(&p, l).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-6);

        // hand-evaluated oracle: p=[0.9,0.1], logits [0,0]
        let mut tape = Tape::<f32>::new();
        let l = tape.input(t(&[1, 2], &[0.0, 0.0]));
        let p = t(&[1, 2], &[0.9, 0.1]);
        let loss = tape.kl_divergence(&p, l).unwrap();
        let expect = 0.9f32 * (1.8f32).ln() + 0.1 * (0.2f32).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-4);

        // non-normalized teacher rejected
        let mut tape = Tape::<f32>::new();
        let l = tape.input(t(&[1, 2], &[0.0, 0.0]));
        let bad = t(&[1, 2], &[0.9, 0.3]);
        assert!(tape.kl_divergence(&bad, l).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(t(&[2], &[1.0, 2.0]));
        let b = tape.input(t(&[2], &[0.0, 0.0]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[-2.0, -4.0]);
    }

    #[test]
    fn gradient_shapes_match_value_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[1, 2, 3, 3], &[0.25; 18]));
        let w = tape.input(t(&[2, 2, 3, 3], &[0.5; 36]));
        let o = tape.conv2d(x, w, 1, 1).unwrap();
        let p = tape.global_avg_pool(o).unwrap();
        let wd = tape.input(t(&[2, 2], &[0.3; 4]));
        let b = tape.input(Tensor::zeros(&[2]));
        let d = tape.dense(p, wd, b).unwrap();
        let loss = tape.softmax_cross_entropy(d, &[1]).unwrap();
        tape.backward(loss).unwrap();
        for v in [x, w, wd, b] {
            let g = tape.grad_tensor(v).unwrap();
            assert_eq!(g.shape(), tape.value(v).shape());
        }
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        // gradient accumulation linearity on a shared input
        let data = t(&[4], &[0.1, -0.2, 0.3, 0.7]);
        let run = |combined: bool| -> Vec<f32> {
            if combined {
                let mut tape = Tape::<f32>::new();
                let x = tape.input(data.clone());
                let a = tape.scale(x, 2.0);
                let b = tape.tanh(x);
                let y = tape.input(Tensor::zeros(&[4]));
                let l1 = tape.mse(a, y).unwrap();
                let l2 = tape.mse(b, y).unwrap();
                let l = tape.add(l1, l2).unwrap();
                tape.backward(l).unwrap();
                tape.grad(x).unwrap().to_vec()
            } else {
                let mut g = vec![0.0; 4];
                for which in 0..2 {
                    let mut tape = Tape::<f32>::new();
                    let x = tape.input(data.clone());
                    let v = if which == 0 { tape.scale(x, 2.0) } else { tape.tanh(x) };
                    let y = tape.input(Tensor::zeros(&[4]));
                    let l = tape.mse(v, y).unwrap();
                    tape.backward(l).unwrap();
                    for (gi, &d) in g.iter_mut().zip(tape.grad(x).unwrap()) {
                        *gi += d;
                    }
                }
                g
            }
        };
        let combined = run(true);
        let split = run(false);
        for (a, b) in combined.iter().zip(&split) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}
