//! Forward op constructors. Each validates shapes, computes the result with
//! the kernels, and pushes a node carrying the op record for backward.

use std::sync::Arc;

use super::kernels;
use super::{fmt_shape, Op, PatchGeom, Rows, Tape, TensorError, TensorId};
use crate::parallel::for_each_row;
use crate::scalar::Scalar;

type Res = Result<TensorId, TensorError>;

impl<T: Scalar> Tape<T> {
    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.idx()].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: fmt_shape(self.shape(a)),
                rhs: fmt_shape(self.shape(b)),
            });
        }
        Ok(())
    }

    /// Matrix product contracting the last axis of `a` with the first of
    /// `b`. `a` is [lead.., m, k]; `b` is either [k, n] (shared weights) or
    /// [lead.., k, n] with identical leading extents.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Res {
        let (lead, m, k, n, b_shared, mut shape) = self.matmul_dims("matmul", a, b, false)?;
        let mut data = vec![T::zero(); lead * m * n];
        kernels::batched_nn_acc(self.data(a), self.data(b), &mut data, lead, m, k, n, b_shared);
        shape.push(n);
        Ok(self.push(shape, data, self.rg(&[a, b]), Op::Matmul { a, b }))
    }

    /// a · bᵀ: `a` is [lead.., m, k], `b` is [lead.., n, k] (or shared
    /// [n, k]); contracts the last axes of both.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Res {
        let (lead, m, k, n, b_shared, mut shape) = self.matmul_dims("matmul_nt", a, b, true)?;
        let mut data = vec![T::zero(); lead * m * n];
        kernels::batched_nt_acc(self.data(a), self.data(b), &mut data, lead, m, k, n, b_shared);
        shape.push(n);
        Ok(self.push(shape, data, self.rg(&[a, b]), Op::MatmulNT { a, b }))
    }

    /// Shared dim validation for both matmul flavors. Returns
    /// (lead, m, k, n, b_shared, out_shape_without_last).
    fn matmul_dims(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        transposed: bool,
    ) -> Result<(usize, usize, usize, usize, bool, Vec<usize>), TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let mismatch = || TensorError::ShapeMismatch { op, lhs: fmt_shape(sa), rhs: fmt_shape(sb) };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (bk, n) = if transposed {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let lead_dims = &sa[..sa.len() - 2];
        let lead: usize = lead_dims.iter().product();
        let b_shared = sb.len() == 2;
        if !b_shared && &sb[..sb.len() - 2] != lead_dims {
            return Err(mismatch());
        }
        let mut out_shape = lead_dims.to_vec();
        out_shape.push(m);
        Ok((lead.max(1), m, k, n, b_shared, out_shape))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Res {
        self.same_shape("add", a, b)?;
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, self.rg(&[a, b]), Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Res {
        self.same_shape("sub", a, b)?;
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, self.rg(&[a, b]), Op::Sub { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Res {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, self.rg(&[a, b]), Op::Mul { a, b }))
    }

    /// x + bias with `bias` broadcast over every leading axis; bias length
    /// must equal the last extent of `x`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Res {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: fmt_shape(self.shape(x)),
                rhs: fmt_shape(self.shape(bias)),
            });
        }
        let bias_data = self.data_shared(bias);
        let mut data = self.data(x).to_vec();
        for_each_row(&mut data, d, 1, |_, row| {
            for (o, &b) in row.iter_mut().zip(bias_data.iter()) {
                *o = *o + b;
            }
        });
        Ok(self.push(self.shape(x).to_vec(), data, self.rg(&[x, bias]), Op::AddBias { x, bias }))
    }

    /// Multiply by a compile-time-constant scalar (not differentiable w.r.t.
    /// the constant).
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let c = T::from_f64(c);
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, rg, Op::Scale { x, c })
    }

    /// Per-batch-element scaling: `factors[i]` multiplies the whole slice
    /// `x[i, ..]`. Factors are constants (drop-path masks).
    pub fn scale_rows(&mut self, x: TensorId, factors: Arc<Vec<T>>) -> Res {
        let b = self.shape(x)[0];
        if factors.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: fmt_shape(self.shape(x)),
                rhs: fmt_shape(&[factors.len()]),
            });
        }
        let slice = self.numel(x) / b;
        let mut data = self.data(x).to_vec();
        for_each_row(&mut data, slice, 1, |i, row| {
            let f = factors[i];
            for v in row.iter_mut() {
                *v = *v * f;
            }
        });
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::ScaleRows { x, factors }))
    }

    /// Softmax over the last axis. Numerically stabilized by row-max
    /// subtraction; a non-finite input sets the tape's non-finite flag.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let d = *self.shape(x).last().unwrap();
        let mut data = vec![T::zero(); self.numel(x)];
        if kernels::softmax_rows(self.data(x), &mut data, d) {
            self.flag_non_finite();
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, rg, Op::Softmax { x })
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Res {
        let d = *self.shape(x).last().unwrap();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: fmt_shape(self.shape(x)),
                    rhs: fmt_shape(self.shape(p)),
                });
            }
        }
        let rows = self.numel(x) / d;
        let mut data = vec![T::zero(); self.numel(x)];
        let mut mean = vec![T::zero(); rows];
        let mut invstd = vec![T::zero(); rows];
        kernels::layernorm_rows(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            T::from_f64(eps),
            &mut data,
            &mut mean,
            &mut invstd,
            d,
        );
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            self.rg(&[x, gamma, beta]),
            Op::LayerNorm { x, gamma, beta, mean: Arc::new(mean), invstd: Arc::new(invstd) },
        ))
    }

    /// GELU, tanh approximation (see kernel constants).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let mut data = vec![T::zero(); self.numel(x)];
        kernels::gelu_rows(self.data(x), &mut data);
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, rg, Op::Gelu { x })
    }

    /// Same elements, new shape (element count must match).
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Res {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: fmt_shape(shape),
                reason: format!("element count {} != input {}", numel, self.numel(x)),
            });
        }
        // Storage is shared; only the shape metadata changes.
        let data = self.data_shared(x);
        let rg = self.rg(&[x]);
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(super::TensorNode {
            shape: shape.to_vec(),
            data,
            grad: None,
            op: Op::Reshape { x },
            requires_grad: rg,
        });
        Ok(id)
    }

    /// Swap axes 1 and 2 of a tensor with at least 3 axes:
    /// [d0, d1, d2, rest..] → [d0, d2, d1, rest..].
    ///
    /// Panics if the input has fewer than 3 axes (structural misuse).
    pub fn swap_axes12(&mut self, x: TensorId) -> TensorId {
        let s = self.shape(x).to_vec();
        assert!(s.len() >= 3, "swap_axes12 needs >= 3 axes, got {}", fmt_shape(&s));
        let (d1, d2) = (s[1], s[2]);
        let elem: usize = s[3..].iter().product();
        let src = self.data_shared(x);
        let mut data = vec![T::zero(); self.numel(x)];
        for_each_row(&mut data, elem.max(1), 1, |row, out_row| {
            // row indexes (b, new1, new2) with new layout [d0, d2, d1]
            let b = row / (d1 * d2);
            let r = row % (d1 * d2);
            let n1 = r / d1; // runs over d2
            let n2 = r % d1; // runs over d1
            let src_off = ((b * d1 + n2) * d2 + n1) * elem;
            out_row.copy_from_slice(&src[src_off..src_off + elem]);
        });
        let mut shape = s.clone();
        shape[1] = d2;
        shape[2] = d1;
        let rg = self.rg(&[x]);
        self.push(shape, data, rg, Op::SwapAxes12 { x })
    }

    /// Select rows along axis 1: x is [b, m, rest..], result
    /// [b, sel, rest..]. Indices must be in range and free of duplicates.
    pub fn gather_units(&mut self, x: TensorId, rows: &Rows) -> Res {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_units",
                shape: fmt_shape(s),
                reason: "need at least [batch, units, ..]".into(),
            });
        }
        let (b, m) = (s[0], s[1]);
        rows.validate("gather_units", b, m, true)?;
        let sel = rows.sel_len();
        let row_len: usize = s[2..].iter().product::<usize>().max(1);
        let src = self.data_shared(x);
        let rows_cl = rows.clone();
        let mut data = vec![T::zero(); b * sel * row_len];
        for_each_row(&mut data, row_len, 1, |row, out_row| {
            let bb = row / sel;
            let ss = row % sel;
            let src_row = bb * m + rows_cl.for_batch(bb)[ss];
            out_row.copy_from_slice(&src[src_row * row_len..src_row * row_len + row_len]);
        });
        let mut shape = s.to_vec();
        shape[1] = sel;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, rg, Op::GatherUnits { x, rows: rows.clone() }))
    }

    /// Slice an image batch [b, c, H, W] into per-unit inner-patch vectors
    /// for the selected units: result [b, sel, u, u, inner²·c] with patch
    /// features ordered (channel, y, x) and u = unit_px / inner_px.
    pub fn extract_units(&mut self, img: TensorId, units: &Rows, geom: PatchGeom) -> Res {
        let s = self.shape(img);
        let px = geom.img_px();
        if s != [s[0], geom.channels, px, px] || s.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "extract_units",
                shape: fmt_shape(s),
                reason: format!("expected [batch, {}, {}, {}]", geom.channels, px, px),
            });
        }
        let b = s[0];
        units.validate("extract_units", b, geom.units(), true)?;
        let sel = units.sel_len();
        let u = geom.tokens_per_side();
        let plen = geom.patch_len();
        let src = self.data_shared(img);
        let units_cl = units.clone();
        let mut data = vec![T::zero(); b * sel * u * u * plen];
        for_each_row(&mut data, plen, plen, |row, out_row| {
            // row indexes (b, s, iy, ix)
            let ix = row % u;
            let iy = (row / u) % u;
            let ss = (row / (u * u)) % sel;
            let bb = row / (u * u * sel);
            let unit = units_cl.for_batch(bb)[ss];
            let (uy, ux) = (unit / geom.grid, unit % geom.grid);
            let y0 = uy * geom.unit_px + iy * geom.inner_px;
            let x0 = ux * geom.unit_px + ix * geom.inner_px;
            let mut o = 0;
            for c in 0..geom.channels {
                for py in 0..geom.inner_px {
                    let base = ((bb * geom.channels + c) * px + y0 + py) * px + x0;
                    for pxx in 0..geom.inner_px {
                        out_row[o] = src[base + pxx];
                        o += 1;
                    }
                }
            }
        });
        let rg = self.rg(&[img]);
        Ok(self.push(
            vec![b, sel, u, u, plen],
            data,
            rg,
            Op::ExtractUnits { img, units: units.clone(), geom },
        ))
    }

    /// Copy of `x` ([b, m, rest..]) with the selected unit rows replaced by
    /// `token` (shape [rest..] flattened), broadcast across each row.
    pub fn fill_units(&mut self, x: TensorId, token: TensorId, rows: &Rows) -> Res {
        let s = self.shape(x);
        let (b, m) = (s[0], s[1]);
        let row_len: usize = s[2..].iter().product::<usize>().max(1);
        let d = *s.last().unwrap();
        if self.shape(token) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "fill_units",
                lhs: fmt_shape(s),
                rhs: fmt_shape(self.shape(token)),
            });
        }
        rows.validate("fill_units", b, m, true)?;
        let tok = self.data_shared(token);
        let mut data = self.data(x).to_vec();
        for bb in 0..b {
            for &unit in rows.for_batch(bb) {
                let off = (bb * m + unit) * row_len;
                for chunk in data[off..off + row_len].chunks_mut(d) {
                    chunk.copy_from_slice(&tok);
                }
            }
        }
        Ok(self.push(
            s.to_vec(),
            data,
            self.rg(&[x, token]),
            Op::FillUnits { x, token, rows: rows.clone() },
        ))
    }

    /// Build a [b, total, d] tensor from visible-latent rows scattered to
    /// their original slots; every other slot holds `token`.
    pub fn scatter_units(
        &mut self,
        latent: TensorId,
        token: TensorId,
        rows: &Rows,
        total: usize,
    ) -> Res {
        let s = self.shape(latent);
        if s.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "scatter_units",
                shape: fmt_shape(s),
                reason: "latent must be [batch, visible, dim]".into(),
            });
        }
        let (b, sel, d) = (s[0], s[1], s[2]);
        if self.shape(token) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_units",
                lhs: fmt_shape(s),
                rhs: fmt_shape(self.shape(token)),
            });
        }
        rows.validate("scatter_units", b, total, true)?;
        if rows.sel_len() != sel {
            return Err(TensorError::RaggedIndexLists {
                op: "scatter_units",
                expect: sel,
                got: rows.sel_len(),
            });
        }
        let src = self.data_shared(latent);
        let tok = self.data_shared(token);
        let rows_cl = rows.clone();
        let mut data = vec![T::zero(); b * total * d];
        for_each_row(&mut data, d, 1, |row, out_row| {
            let bb = row / total;
            let slot = row % total;
            // Slots are filled from the latent when listed as visible.
            match rows_cl.for_batch(bb).iter().position(|&v| v == slot) {
                Some(p) => out_row.copy_from_slice(&src[(bb * sel + p) * d..(bb * sel + p) * d + d]),
                None => out_row.copy_from_slice(&tok),
            }
        });
        let rg = self.rg(&[latent, token]);
        Ok(self.push(
            vec![b, total, d],
            data,
            rg,
            Op::ScatterUnits { latent, token, rows: rows.clone(), total },
        ))
    }

    /// Relative-position bias: `table` is [(2G−1)², heads]; `pairs` holds,
    /// per batch element (or shared), n·n flattened pair indices into the
    /// table. Result is [batch, heads, n, n], added to attention logits.
    pub fn rpe_bias(&mut self, table: TensorId, pairs: &Rows, n: usize, batch: usize) -> Res {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "rpe_bias",
                shape: fmt_shape(s),
                reason: "table must be [rows, heads]".into(),
            });
        }
        let (r, heads) = (s[0], s[1]);
        pairs.validate("rpe_bias", batch, r, false)?;
        if pairs.sel_len() != n * n {
            return Err(TensorError::RaggedIndexLists {
                op: "rpe_bias",
                expect: n * n,
                got: pairs.sel_len(),
            });
        }
        let tab = self.data_shared(table);
        let pairs_cl = pairs.clone();
        let mut data = vec![T::zero(); batch * heads * n * n];
        for_each_row(&mut data, n * n, 2, |row, out_row| {
            let bb = row / heads;
            let h = row % heads;
            let idx = pairs_cl.for_batch(bb);
            for (o, &t) in out_row.iter_mut().zip(idx) {
                *o = tab[t * heads + h];
            }
        });
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![batch, heads, n, n],
            data,
            rg,
            Op::RpeBias { table, pairs: pairs.clone(), n },
        ))
    }

    /// Mean over axis 1 of [b, n, d] → [b, d].
    pub fn mean_tokens(&mut self, x: TensorId) -> Res {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "mean_tokens",
                shape: fmt_shape(s),
                reason: "expected [batch, tokens, dim]".into(),
            });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let src = self.data_shared(x);
        let inv = T::from_f64(1.0 / n as f64);
        let mut data = vec![T::zero(); b * d];
        for_each_row(&mut data, d, n, |bb, out_row| {
            for t in 0..n {
                let row = &src[(bb * n + t) * d..(bb * n + t) * d + d];
                for (o, &v) in out_row.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            for o in out_row.iter_mut() {
                *o = *o * inv;
            }
        });
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, d], data, rg, Op::MeanTokens { x }))
    }

    /// Mean of all elements → single-element tensor.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.numel(x);
        let sum: T = self.data(x).iter().copied().sum();
        let v = sum / T::from_f64(n as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![v], rg, Op::MeanAll { x })
    }

    /// Mean cross-entropy over the batch from raw logits [b, c] and class
    /// labels; computed via a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: Arc<Vec<u16>>) -> Res {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: fmt_shape(s),
                reason: "logits must be [batch, classes]".into(),
            });
        }
        let (b, c) = (s[0], s[1]);
        if labels.len() != b {
            return Err(TensorError::BatchCountMismatch {
                op: "cross_entropy",
                expect: b,
                got: labels.len(),
            });
        }
        for &l in labels.iter() {
            if l as usize >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: l as usize,
                    extent: c,
                });
            }
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for bb in 0..b {
            let row = &x[bb * c..bb * c + c];
            let mx = row.iter().copied().fold(row[0], |a, v| if v > a { v } else { a });
            let mut sum = T::zero();
            for (p, &v) in probs[bb * c..bb * c + c].iter_mut().zip(row) {
                let e = (v - mx).exp();
                *p = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for p in probs[bb * c..bb * c + c].iter_mut() {
                *p = *p * inv;
            }
            let lse = sum.ln() + mx;
            loss = loss + lse - row[labels[bb] as usize];
        }
        loss = loss / T::from_f64(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy { logits, labels, probs: Arc::new(probs) },
        ))
    }
}
