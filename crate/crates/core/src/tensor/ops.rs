//! Forward ops and their backward rules.
//!
//! Every method validates shapes, computes the forward value, checks it for
//! NaN/Inf, and (when a parent requires grad) records a closure that routes
//! the incoming gradient to its parents.

use rand::Rng;

use super::graph::{Graph, Var};
use super::{c, invalid, shape_err, sigmoid, silu, softplus, Element, Result, Tensor};

/// Elementwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Silu,
    Sigmoid,
    Softplus,
    Exp,
}

/// Padding convention for 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Left-pad with k-1 zeros; output t sees inputs t-k+1..=t.
    Causal,
    /// Symmetric padding, odd kernel only; output length equals input.
    Same,
}

impl<'p, T: Element> Graph<'p, T> {
    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            "add",
            out,
            &[a, b],
            Some(Box::new(move |g, sink| {
                if na {
                    sink.accum(a, |buf| accumulate(buf, g));
                }
                if nb {
                    sink.accum(b, |buf| accumulate(buf, g));
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (sa, sb) = (ta, tb);
        self.push_op(
            "mul",
            out,
            &[a, b],
            Some(Box::new(move |g, sink| {
                if na {
                    sink.accum(a, |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(sb.data()) {
                            *o += gv * bv;
                        }
                    });
                }
                if nb {
                    sink.accum(b, |buf| {
                        for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(sa.data()) {
                            *o += gv * av;
                        }
                    });
                }
            })),
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x).clone();
        let f = c::<T>(factor);
        let out = tx.map(|v| v * f);
        self.push_op(
            "scale",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * f;
                    }
                });
            })),
        )
    }

    pub fn pointwise(&mut self, x: Var, mode: Pointwise) -> Result<Var> {
        let tx = self.value(x).clone();
        let out = match mode {
            Pointwise::Relu => tx.map(|v| if v > T::zero() { v } else { T::zero() }),
            Pointwise::Silu => tx.map(silu),
            Pointwise::Sigmoid => tx.map(sigmoid),
            Pointwise::Softplus => tx.map(softplus),
            Pointwise::Exp => tx.map(|v| v.exp()),
        };
        let saved_out = out.clone();
        self.push_op(
            "pointwise",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |buf| {
                    for (i, (o, &gv)) in buf.iter_mut().zip(g).enumerate() {
                        let d = match mode {
                            Pointwise::Relu => {
                                if tx.data()[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Pointwise::Silu => {
                                let s = sigmoid(tx.data()[i]);
                                s * (T::one() + tx.data()[i] * (T::one() - s))
                            }
                            Pointwise::Sigmoid => {
                                let y = saved_out.data()[i];
                                y * (T::one() - y)
                            }
                            Pointwise::Softplus => sigmoid(tx.data()[i]),
                            Pointwise::Exp => saved_out.data()[i],
                        };
                        *o += gv * d;
                    }
                });
            })),
        )
    }

    // ── linear / conv ───────────────────────────────────────────────────

    /// `y = x · Wᵀ (+ b)` over the trailing axis.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        let (dout, din) = tw.dims2("linear")?;
        let rank = tx.shape().len();
        if rank == 0 || tx.shape()[rank - 1] != din {
            return Err(shape_err(
                "linear",
                format!("x {:?} incompatible with W [{dout},{din}]", tx.shape()),
            ));
        }
        let tb = match bias {
            Some(b) => {
                let t = self.value(b).clone();
                if t.shape() != [dout] {
                    return Err(shape_err("linear", format!("bias {:?}, want [{dout}]", t.shape())));
                }
                Some(t)
            }
            None => None,
        };
        let m = tx.numel() / din;
        let mut y = vec![T::zero(); m * dout];
        for i in 0..m {
            let xr = &tx.data()[i * din..(i + 1) * din];
            let yr = &mut y[i * dout..(i + 1) * dout];
            for o in 0..dout {
                let wr = &tw.data()[o * din..(o + 1) * din];
                let mut s = tb.as_ref().map_or(T::zero(), |b| b.data()[o]);
                for (xv, wv) in xr.iter().zip(wr) {
                    s += *xv * *wv;
                }
                yr[o] = s;
            }
        }
        let mut out_shape = tx.shape().to_vec();
        out_shape[rank - 1] = dout;
        let out = Tensor::new(out_shape, y)?;
        let nx = self.needs_grad(x);
        let nw = self.needs_grad(w);
        let nb = bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push_op(
            "linear",
            out,
            &parents,
            Some(Box::new(move |g, sink| {
                if nx {
                    sink.accum(x, |gx| {
                        for i in 0..m {
                            let gr = &g[i * dout..(i + 1) * dout];
                            let gxr = &mut gx[i * din..(i + 1) * din];
                            for o in 0..dout {
                                let gv = gr[o];
                                let wr = &tw.data()[o * din..(o + 1) * din];
                                for (gxv, wv) in gxr.iter_mut().zip(wr) {
                                    *gxv += gv * *wv;
                                }
                            }
                        }
                    });
                }
                if nw {
                    sink.accum(w, |gw| {
                        for i in 0..m {
                            let gr = &g[i * dout..(i + 1) * dout];
                            let xr = &tx.data()[i * din..(i + 1) * din];
                            for o in 0..dout {
                                let gv = gr[o];
                                let gwr = &mut gw[o * din..(o + 1) * din];
                                for (gwv, xv) in gwr.iter_mut().zip(xr) {
                                    *gwv += gv * *xv;
                                }
                            }
                        }
                    });
                }
                if nb {
                    sink.accum(bias.expect("bias var"), |gb| {
                        for i in 0..m {
                            for (gbv, &gv) in gb.iter_mut().zip(&g[i * dout..(i + 1) * dout]) {
                                *gbv += gv;
                            }
                        }
                    });
                }
            })),
        )
    }

    /// Grouped 1-D convolution, length-preserving.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        groups: usize,
        pad: PadMode,
    ) -> Result<Var> {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        let (bsz, cin, len) = tx.dims3("conv1d")?;
        let [cout, cin_g, k] = match tw.shape() {
            &[a, b, c] => [a, b, c],
            s => return Err(shape_err("conv1d", format!("weight rank {:?}", s))),
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape_err(
                "conv1d",
                format!("groups {groups} incompatible with Cin {cin}, Cout {cout}, w {:?}", tw.shape()),
            ));
        }
        if k < 1 || len < 1 {
            return Err(invalid("conv1d", format!("k={k}, L={len}: both must be >= 1")));
        }
        if pad == PadMode::Same && k % 2 == 0 {
            return Err(invalid("conv1d", format!("same padding requires odd kernel, got k={k}")));
        }
        let tb = match bias {
            Some(b) => {
                let t = self.value(b).clone();
                if t.shape() != [cout] {
                    return Err(shape_err("conv1d", format!("bias {:?}, want [{cout}]", t.shape())));
                }
                Some(t)
            }
            None => None,
        };
        let off = match pad {
            PadMode::Causal => k - 1,
            PadMode::Same => (k - 1) / 2,
        };
        let co_per_g = cout / groups;
        let mut y = vec![T::zero(); bsz * cout * len];
        for b in 0..bsz {
            for co in 0..cout {
                let gi = co / co_per_g;
                let yr = &mut y[(b * cout + co) * len..(b * cout + co + 1) * len];
                if let Some(bt) = &tb {
                    yr.fill(bt.data()[co]);
                }
                for cil in 0..cin_g {
                    let ci = gi * cin_g + cil;
                    let xr = &tx.data()[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                    for j in 0..k {
                        let wv = tw.data()[(co * cin_g + cil) * k + j];
                        // y[t] += w[j] * x[t + j - off] where the x index is in range
                        let t_lo = off.saturating_sub(j);
                        let t_hi = (len + off).saturating_sub(j).min(len);
                        for t in t_lo..t_hi {
                            yr[t] += wv * xr[t + j - off];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![bsz, cout, len], y)?;
        let nx = self.needs_grad(x);
        let nw = self.needs_grad(w);
        let nb = bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push_op(
            "conv1d",
            out,
            &parents,
            Some(Box::new(move |g, sink| {
                if nx {
                    sink.accum(x, |gx| {
                        for b in 0..bsz {
                            for co in 0..cout {
                                let gi = co / co_per_g;
                                let gr = &g[(b * cout + co) * len..(b * cout + co + 1) * len];
                                for cil in 0..cin_g {
                                    let ci = gi * cin_g + cil;
                                    let gxr = &mut gx[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                                    for j in 0..k {
                                        let wv = tw.data()[(co * cin_g + cil) * k + j];
                                        let t_lo = off.saturating_sub(j);
                                        let t_hi = (len + off).saturating_sub(j).min(len);
                                        for t in t_lo..t_hi {
                                            gxr[t + j - off] += wv * gr[t];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if nw {
                    sink.accum(w, |gw| {
                        for b in 0..bsz {
                            for co in 0..cout {
                                let gi = co / co_per_g;
                                let gr = &g[(b * cout + co) * len..(b * cout + co + 1) * len];
                                for cil in 0..cin_g {
                                    let ci = gi * cin_g + cil;
                                    let xr = &tx.data()
                                        [(b * cin + ci) * len..(b * cin + ci + 1) * len];
                                    for j in 0..k {
                                        let t_lo = off.saturating_sub(j);
                                        let t_hi = (len + off).saturating_sub(j).min(len);
                                        let mut s = T::zero();
                                        for t in t_lo..t_hi {
                                            s += gr[t] * xr[t + j - off];
                                        }
                                        gw[(co * cin_g + cil) * k + j] += s;
                                    }
                                }
                            }
                        }
                    });
                }
                if nb {
                    sink.accum(bias.expect("bias var"), |gb| {
                        for b in 0..bsz {
                            for co in 0..cout {
                                let gr = &g[(b * cout + co) * len..(b * cout + co + 1) * len];
                                let mut s = T::zero();
                                for &gv in gr {
                                    s += gv;
                                }
                                gb[co] += s;
                            }
                        }
                    });
                }
            })),
        )
    }

    // ── normalization / affine ──────────────────────────────────────────

    /// Layer norm over the channel axis of `[B, C, L]` at each position.
    pub fn layer_norm_channels(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x).clone();
        let tg = self.value(gamma).clone();
        let tb = self.value(beta).clone();
        let (bsz, ch, len) = tx.dims3("layer_norm")?;
        if ch < 2 {
            return Err(invalid("layer_norm", format!("channel extent must be >= 2, got {ch}")));
        }
        if tg.shape() != [ch] || tb.shape() != [ch] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?}, beta {:?}, want [{ch}]", tg.shape(), tb.shape()),
            ));
        }
        if eps <= 0.0 {
            return Err(invalid("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let eps_t = c::<T>(eps);
        let inv_c = T::one() / c::<T>(ch as f64);
        let mut y = vec![T::zero(); tx.numel()];
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut inv_std = vec![T::zero(); bsz * len];
        for b in 0..bsz {
            for l in 0..len {
                let mut mean = T::zero();
                for cidx in 0..ch {
                    mean += tx.data()[(b * ch + cidx) * len + l];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for cidx in 0..ch {
                    let d = tx.data()[(b * ch + cidx) * len + l] - mean;
                    var += d * d;
                }
                var = var * inv_c;
                let inv = T::one() / (var + eps_t).sqrt();
                inv_std[b * len + l] = inv;
                for cidx in 0..ch {
                    let i = (b * ch + cidx) * len + l;
                    let h = (tx.data()[i] - mean) * inv;
                    xhat[i] = h;
                    y[i] = tg.data()[cidx] * h + tb.data()[cidx];
                }
            }
        }
        let out = Tensor::new(vec![bsz, ch, len], y)?;
        let xhat = Tensor::new(vec![bsz, ch, len], xhat)?;
        let (nx, ng, nbta) = (self.needs_grad(x), self.needs_grad(gamma), self.needs_grad(beta));
        self.push_op(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Some(Box::new(move |g, sink| {
                if nx {
                    sink.accum(x, |gx| {
                        for b in 0..bsz {
                            for l in 0..len {
                                let mut m1 = T::zero();
                                let mut m2 = T::zero();
                                for cidx in 0..ch {
                                    let i = (b * ch + cidx) * len + l;
                                    let gh = g[i] * tg.data()[cidx];
                                    m1 += gh;
                                    m2 += gh * xhat.data()[i];
                                }
                                m1 = m1 * inv_c;
                                m2 = m2 * inv_c;
                                let inv = inv_std[b * len + l];
                                for cidx in 0..ch {
                                    let i = (b * ch + cidx) * len + l;
                                    let gh = g[i] * tg.data()[cidx];
                                    gx[i] += inv * (gh - m1 - xhat.data()[i] * m2);
                                }
                            }
                        }
                    });
                }
                if ng {
                    sink.accum(gamma, |gg| {
                        for b in 0..bsz {
                            for cidx in 0..ch {
                                let row = (b * ch + cidx) * len;
                                let mut s = T::zero();
                                for l in 0..len {
                                    s += g[row + l] * xhat.data()[row + l];
                                }
                                gg[cidx] += s;
                            }
                        }
                    });
                }
                if nbta {
                    sink.accum(beta, |gb| {
                        for b in 0..bsz {
                            for cidx in 0..ch {
                                let row = (b * ch + cidx) * len;
                                let mut s = T::zero();
                                for l in 0..len {
                                    s += g[row + l];
                                }
                                gb[cidx] += s;
                            }
                        }
                    });
                }
            })),
        )
    }

    /// Per-channel affine `gamma[c] * x + beta[c]` on `[B, C, L]`.
    pub fn affine_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let tg = self.value(gamma).clone();
        let tb = self.value(beta).clone();
        let (bsz, ch, len) = tx.dims3("affine_channels")?;
        if tg.shape() != [ch] || tb.shape() != [ch] {
            return Err(shape_err(
                "affine_channels",
                format!("gamma {:?}, beta {:?}, want [{ch}]", tg.shape(), tb.shape()),
            ));
        }
        let mut y = vec![T::zero(); tx.numel()];
        for b in 0..bsz {
            for cidx in 0..ch {
                let row = (b * ch + cidx) * len;
                let (gm, bt) = (tg.data()[cidx], tb.data()[cidx]);
                for l in 0..len {
                    y[row + l] = gm * tx.data()[row + l] + bt;
                }
            }
        }
        let out = Tensor::new(vec![bsz, ch, len], y)?;
        let (nx, ng, nbta) = (self.needs_grad(x), self.needs_grad(gamma), self.needs_grad(beta));
        self.push_op(
            "affine_channels",
            out,
            &[x, gamma, beta],
            Some(Box::new(move |g, sink| {
                if nx {
                    sink.accum(x, |gx| {
                        for b in 0..bsz {
                            for cidx in 0..ch {
                                let row = (b * ch + cidx) * len;
                                let gm = tg.data()[cidx];
                                for l in 0..len {
                                    gx[row + l] += gm * g[row + l];
                                }
                            }
                        }
                    });
                }
                if ng {
                    sink.accum(gamma, |gg| {
                        for b in 0..bsz {
                            for cidx in 0..ch {
                                let row = (b * ch + cidx) * len;
                                let mut s = T::zero();
                                for l in 0..len {
                                    s += g[row + l] * tx.data()[row + l];
                                }
                                gg[cidx] += s;
                            }
                        }
                    });
                }
                if nbta {
                    sink.accum(beta, |gb| {
                        for b in 0..bsz {
                            for cidx in 0..ch {
                                let row = (b * ch + cidx) * len;
                                let mut s = T::zero();
                                for l in 0..len {
                                    s += g[row + l];
                                }
                                gb[cidx] += s;
                            }
                        }
                    });
                }
            })),
        )
    }

    /// Multiply `[B, C, L]` by a per-(batch, channel) gate `[B, C, 1]`.
    pub fn mul_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let tg = self.value(gate).clone();
        let (bsz, ch, len) = tx.dims3("mul_gate")?;
        if tg.shape() != [bsz, ch, 1] {
            return Err(shape_err(
                "mul_gate",
                format!("gate {:?}, want [{bsz},{ch},1]", tg.shape()),
            ));
        }
        let mut y = vec![T::zero(); tx.numel()];
        for b in 0..bsz {
            for cidx in 0..ch {
                let row = (b * ch + cidx) * len;
                let gv = tg.data()[b * ch + cidx];
                for l in 0..len {
                    y[row + l] = tx.data()[row + l] * gv;
                }
            }
        }
        let out = Tensor::new(vec![bsz, ch, len], y)?;
        let (nx, ng) = (self.needs_grad(x), self.needs_grad(gate));
        self.push_op(
            "mul_gate",
            out,
            &[x, gate],
            Some(Box::new(move |g, sink| {
                if nx {
                    sink.accum(x, |gx| {
                        for b in 0..bsz {
                            for cidx in 0..ch {
                                let row = (b * ch + cidx) * len;
                                let gv = tg.data()[b * ch + cidx];
                                for l in 0..len {
                                    gx[row + l] += g[row + l] * gv;
                                }
                            }
                        }
                    });
                }
                if ng {
                    sink.accum(gate, |gg| {
                        for b in 0..bsz {
                            for cidx in 0..ch {
                                let row = (b * ch + cidx) * len;
                                let mut s = T::zero();
                                for l in 0..len {
                                    s += g[row + l] * tx.data()[row + l];
                                }
                                gg[b * ch + cidx] += s;
                            }
                        }
                    });
                }
            })),
        )
    }

    /// Broadcast a `[..., 1]` tensor to `[..., n]`.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let rank = tx.shape().len();
        if rank == 0 || tx.shape()[rank - 1] != 1 {
            return Err(shape_err("expand_last", format!("want trailing extent 1, got {:?}", tx.shape())));
        }
        let m = tx.numel();
        let mut y = vec![T::zero(); m * n];
        for i in 0..m {
            y[i * n..(i + 1) * n].fill(tx.data()[i]);
        }
        let mut shape = tx.shape().to_vec();
        shape[rank - 1] = n;
        let out = Tensor::new(shape, y)?;
        self.push_op(
            "expand_last",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |gx| {
                    for i in 0..m {
                        let mut s = T::zero();
                        for &gv in &g[i * n..(i + 1) * n] {
                            s += gv;
                        }
                        gx[i] += s;
                    }
                });
            })),
        )
    }

    /// Add a `[D]` bias across the trailing axis of `[..., D]`.
    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let tb = self.value(bias).clone();
        let d = *tx.shape().last().ok_or_else(|| shape_err("add_bias_last", "rank 0"))?;
        if tb.shape() != [d] {
            return Err(shape_err("add_bias_last", format!("bias {:?}, want [{d}]", tb.shape())));
        }
        let m = tx.numel() / d;
        let mut y = vec![T::zero(); tx.numel()];
        for i in 0..m {
            for j in 0..d {
                y[i * d + j] = tx.data()[i * d + j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let (nx, nb) = (self.needs_grad(x), self.needs_grad(bias));
        self.push_op(
            "add_bias_last",
            out,
            &[x, bias],
            Some(Box::new(move |g, sink| {
                if nx {
                    sink.accum(x, |gx| accumulate(gx, g));
                }
                if nb {
                    sink.accum(bias, |gb| {
                        for i in 0..m {
                            for (gbv, &gv) in gb.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                *gbv += gv;
                            }
                        }
                    });
                }
            })),
        )
    }

    // ── pooling ─────────────────────────────────────────────────────────

    /// Max pool along time: window 3, stride 2, pad 1, output ceil(L/2).
    pub fn max_pool_k3s2p1(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let (bsz, ch, len) = tx.dims3("max_pool")?;
        if len == 0 {
            return Err(invalid("max_pool", "empty time axis"));
        }
        let out_len = len.div_ceil(2);
        let mut y = vec![T::zero(); bsz * ch * out_len];
        let mut arg = vec![0usize; bsz * ch * out_len];
        for b in 0..bsz {
            for cidx in 0..ch {
                let xr = &tx.data()[(b * ch + cidx) * len..(b * ch + cidx + 1) * len];
                let yrow = (b * ch + cidx) * out_len;
                for t in 0..out_len {
                    let lo = (2 * t).saturating_sub(1);
                    let hi = (2 * t + 2).min(len);
                    let mut best = xr[lo];
                    let mut best_i = lo;
                    for (u, &v) in xr[lo..hi].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_i = lo + u;
                        }
                    }
                    y[yrow + t] = best;
                    arg[yrow + t] = best_i;
                }
            }
        }
        let out = Tensor::new(vec![bsz, ch, out_len], y)?;
        self.push_op(
            "max_pool",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |gx| {
                    for b in 0..bsz {
                        for cidx in 0..ch {
                            let yrow = (b * ch + cidx) * out_len;
                            let xrow = (b * ch + cidx) * len;
                            for t in 0..out_len {
                                gx[xrow + arg[yrow + t]] += g[yrow + t];
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Adaptive average pool along time to exactly `target` bins.
    /// Bin i averages input indices `[floor(i*L/target), ceil((i+1)*L/target))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, target: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let (bsz, ch, len) = tx.dims3("adaptive_avg_pool")?;
        if target == 0 || target > len {
            return Err(invalid(
                "adaptive_avg_pool",
                format!("target {target} must be in 1..={len}"),
            ));
        }
        let bins: Vec<(usize, usize)> = (0..target)
            .map(|i| {
                let lo = i * len / target;
                let hi = ((i + 1) * len).div_ceil(target);
                (lo, hi)
            })
            .collect();
        let mut y = vec![T::zero(); bsz * ch * target];
        for b in 0..bsz {
            for cidx in 0..ch {
                let xr = &tx.data()[(b * ch + cidx) * len..(b * ch + cidx + 1) * len];
                let yrow = (b * ch + cidx) * target;
                for (i, &(lo, hi)) in bins.iter().enumerate() {
                    let mut s = T::zero();
                    for &v in &xr[lo..hi] {
                        s += v;
                    }
                    y[yrow + i] = s / c::<T>((hi - lo) as f64);
                }
            }
        }
        let out = Tensor::new(vec![bsz, ch, target], y)?;
        self.push_op(
            "adaptive_avg_pool",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |gx| {
                    for b in 0..bsz {
                        for cidx in 0..ch {
                            let xrow = (b * ch + cidx) * len;
                            let yrow = (b * ch + cidx) * target;
                            for (i, &(lo, hi)) in bins.iter().enumerate() {
                                let gv = g[yrow + i] / c::<T>((hi - lo) as f64);
                                for u in lo..hi {
                                    gx[xrow + u] += gv;
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Mean over the whole time axis: `[B, C, L] -> [B, C, 1]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let (bsz, ch, len) = tx.dims3("mean_time")?;
        if len == 0 {
            return Err(invalid("mean_time", "empty time axis"));
        }
        let inv = T::one() / c::<T>(len as f64);
        let mut y = vec![T::zero(); bsz * ch];
        for (i, row) in tx.data().chunks_exact(len).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            y[i] = s * inv;
        }
        let out = Tensor::new(vec![bsz, ch, 1], y)?;
        self.push_op(
            "mean_time",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |gx| {
                    for i in 0..bsz * ch {
                        let gv = g[i] * inv;
                        for o in &mut gx[i * len..(i + 1) * len] {
                            *o += gv;
                        }
                    }
                });
            })),
        )
    }

    // ── axis ops ────────────────────────────────────────────────────────

    /// Reverse a rank-3 tensor along `axis` (1 or 2).
    pub fn flip_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let (d0, d1, d2) = tx.dims3("flip_axis")?;
        if axis != 1 && axis != 2 {
            return Err(invalid("flip_axis", format!("axis must be 1 or 2, got {axis}")));
        }
        let out = Tensor::new(tx.shape().to_vec(), flip3(tx.data(), d0, d1, d2, axis))?;
        self.push_op(
            "flip_axis",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                let gf = flip3(g, d0, d1, d2, axis);
                sink.accum(x, |gx| accumulate(gx, &gf));
            })),
        )
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let (d0, d1, d2) = tx.dims3("transpose12")?;
        let out = Tensor::new(vec![d0, d2, d1], transpose3(tx.data(), d0, d1, d2))?;
        self.push_op(
            "transpose12",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                let gt = transpose3(g, d0, d2, d1);
                sink.accum(x, |gx| accumulate(gx, &gt));
            })),
        )
    }

    /// Split a rank-3 tensor into two equal halves along `axis`.
    pub fn chunk2(&mut self, x: Var, axis: usize) -> Result<(Var, Var)> {
        let tx = self.value(x).clone();
        let (d0, d1, d2) = tx.dims3("chunk2")?;
        if axis != 1 && axis != 2 {
            return Err(invalid("chunk2", format!("axis must be 1 or 2, got {axis}")));
        }
        let ext = if axis == 1 { d1 } else { d2 };
        if ext % 2 != 0 {
            return Err(invalid("chunk2", format!("axis extent {ext} is odd")));
        }
        let half = ext / 2;
        let mut halves = Vec::with_capacity(2);
        for which in 0..2 {
            let offset = which * half;
            let (h0, h1, h2) = if axis == 1 { (d0, half, d2) } else { (d0, d1, half) };
            let mut y = vec![T::zero(); h0 * h1 * h2];
            copy_block(tx.data(), &mut y, d0, d1, d2, axis, offset, half, Dir::Gather);
            let nx = self.needs_grad(x);
            let out = Tensor::new(vec![h0, h1, h2], y)?;
            let v = self.push_op(
                "chunk2",
                out,
                &[x],
                Some(Box::new(move |g, sink| {
                    if nx {
                        sink.accum(x, |gx| {
                            copy_block(g, gx, d0, d1, d2, axis, offset, half, Dir::Scatter);
                        });
                    }
                })),
            )?;
            halves.push(v);
        }
        Ok((halves[0], halves[1]))
    }

    /// Concatenate two rank-3 tensors along `axis`.
    pub fn concat2(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let (a0, a1, a2) = ta.dims3("concat2")?;
        let (b0, b1, b2) = tb.dims3("concat2")?;
        if axis != 1 && axis != 2 {
            return Err(invalid("concat2", format!("axis must be 1 or 2, got {axis}")));
        }
        let ok = if axis == 1 { a0 == b0 && a2 == b2 } else { a0 == b0 && a1 == b1 };
        if !ok {
            return Err(shape_err("concat2", format!("{:?} vs {:?} on axis {axis}", ta.shape(), tb.shape())));
        }
        let (o1, o2) = if axis == 1 { (a1 + b1, a2) } else { (a1, a2 + b2) };
        let mut y = vec![T::zero(); a0 * o1 * o2];
        let ext_a = if axis == 1 { a1 } else { a2 };
        let ext_b = if axis == 1 { b1 } else { b2 };
        copy_block(ta.data(), &mut y, a0, o1, o2, axis, 0, ext_a, Dir::Write);
        copy_block(tb.data(), &mut y, a0, o1, o2, axis, ext_a, ext_b, Dir::Write);
        let out = Tensor::new(vec![a0, o1, o2], y)?;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            "concat2",
            out,
            &[a, b],
            Some(Box::new(move |g, sink| {
                if na {
                    sink.accum(a, |ga| {
                        let mut buf = vec![T::zero(); ga.len()];
                        copy_block(g, &mut buf, a0, o1, o2, axis, 0, ext_a, Dir::Gather);
                        accumulate(ga, &buf);
                    });
                }
                if nb {
                    sink.accum(b, |gb| {
                        let mut buf = vec![T::zero(); gb.len()];
                        copy_block(g, &mut buf, a0, o1, o2, axis, ext_a, ext_b, Dir::Gather);
                        accumulate(gb, &buf);
                    });
                }
            })),
        )
    }

    /// Repeat the trailing axis `k` times: `[..., D] -> [..., k*D]`.
    pub fn tile_last(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let rank = tx.shape().len();
        if rank == 0 || k == 0 {
            return Err(invalid("tile_last", "rank 0 input or k = 0"));
        }
        let d = tx.shape()[rank - 1];
        let m = tx.numel() / d;
        let mut y = vec![T::zero(); m * k * d];
        for i in 0..m {
            let src = &tx.data()[i * d..(i + 1) * d];
            for rep in 0..k {
                y[(i * k + rep) * d..(i * k + rep + 1) * d].copy_from_slice(src);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[rank - 1] = k * d;
        let out = Tensor::new(shape, y)?;
        self.push_op(
            "tile_last",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |gx| {
                    for i in 0..m {
                        for rep in 0..k {
                            let src = &g[(i * k + rep) * d..(i * k + rep + 1) * d];
                            for (o, &gv) in gx[i * d..(i + 1) * d].iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    }
                });
            })),
        )
    }

    // ── regularization ──────────────────────────────────────────────────

    /// Stochastic depth on the batch axis. Identity in eval mode or at
    /// rate 0; otherwise each batch element is kept with probability
    /// 1-rate and rescaled by 1/(1-rate).
    pub fn drop_path(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("drop_path", format!("rate {rate} must be in [0, 1)")));
        }
        if !self.training() || rate == 0.0 {
            return Ok(x);
        }
        let tx = self.value(x).clone();
        let bsz = *tx.shape().first().ok_or_else(|| shape_err("drop_path", "rank 0"))?;
        let per = tx.numel() / bsz;
        let keep_scale = c::<T>(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..bsz)
            .map(|_| if rng.random::<f64>() >= rate { keep_scale } else { T::zero() })
            .collect();
        let mut y = vec![T::zero(); tx.numel()];
        for b in 0..bsz {
            let m = mask[b];
            for i in 0..per {
                y[b * per + i] = tx.data()[b * per + i] * m;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        self.push_op(
            "drop_path",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                sink.accum(x, |gx| {
                    for b in 0..bsz {
                        let m = mask[b];
                        for i in 0..per {
                            gx[b * per + i] += g[b * per + i] * m;
                        }
                    }
                });
            })),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum all elements to a scalar `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let mut s = T::zero();
        for &v in tx.data() {
            s += v;
        }
        let out = Tensor::scalar(s);
        let n = tx.numel();
        self.push_op(
            "sum_all",
            out,
            &[x],
            Some(Box::new(move |g, sink| {
                let gv = g[0];
                sink.accum(x, |gx| {
                    for o in gx.iter_mut().take(n) {
                        *o += gv;
                    }
                });
            })),
        )
    }
}

#[inline]
fn accumulate<T: Element>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn flip3<T: Element>(data: &[T], d0: usize, d1: usize, d2: usize, axis: usize) -> Vec<T> {
    let mut y = vec![T::zero(); data.len()];
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            let j1 = if axis == 1 { d1 - 1 - i1 } else { i1 };
            for i2 in 0..d2 {
                let j2 = if axis == 2 { d2 - 1 - i2 } else { i2 };
                y[(i0 * d1 + i1) * d2 + i2] = data[(i0 * d1 + j1) * d2 + j2];
            }
        }
    }
    y
}

fn transpose3<T: Element>(data: &[T], d0: usize, d1: usize, d2: usize) -> Vec<T> {
    let mut y = vec![T::zero(); data.len()];
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                y[(i0 * d2 + i2) * d1 + i1] = data[(i0 * d1 + i1) * d2 + i2];
            }
        }
    }
    y
}

#[derive(Clone, Copy, PartialEq)]
enum Dir {
    /// small dst <- big src at [offset, offset+ext) of `axis`
    Gather,
    /// big dst at [offset, offset+ext) += small src
    Scatter,
    /// big dst at [offset, offset+ext) = small src
    Write,
}

/// Move a contiguous sub-range of `axis` between a full `[d0,d1,d2]` buffer
/// and a compact buffer holding only that range. `d0,d1,d2` are always the
/// dims of the big buffer.
fn copy_block<T: Element>(
    src: &[T],
    dst: &mut [T],
    d0: usize,
    d1: usize,
    d2: usize,
    axis: usize,
    offset: usize,
    ext: usize,
    dir: Dir,
) {
    let (s1, s2) = if axis == 1 { (ext, d2) } else { (d1, ext) };
    for i0 in 0..d0 {
        for i1 in 0..s1 {
            for i2 in 0..s2 {
                let (b1, b2) = if axis == 1 { (i1 + offset, i2) } else { (i1, i2 + offset) };
                let big_idx = (i0 * d1 + b1) * d2 + b2;
                let small_idx = (i0 * s1 + i1) * s2 + i2;
                match dir {
                    Dir::Gather => dst[small_idx] = src[big_idx],
                    Dir::Scatter => dst[big_idx] += src[small_idx],
                    Dir::Write => dst[big_idx] = src[small_idx],
                }
            }
        }
    }
}
