//! Reverse pass. Node ids are a topological order by construction (inputs
//! always precede outputs), so one reverse sweep from the root visits each
//! node exactly once and routes its accumulated gradient to its inputs.

use super::kernels;
use super::{fmt_shape, Op, Tape, TensorError, TensorId};
use crate::scalar::Scalar;

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s * c;
    }
}

impl<T: Scalar> Tape<T> {
    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    /// Gradient buffer of `id`, allocated (zeros) on first touch.
    fn grad_slice(&mut self, id: TensorId) -> &mut [T] {
        let numel = self.numel(id);
        let n = &mut self.nodes[id.idx()];
        n.grad.get_or_insert_with(|| vec![T::zero(); numel])
    }

    /// Accumulate `d(root)/d(node)` into every *leaf* gradient slot reachable
    /// from `root`, which must hold exactly one element. Leaf gradients from
    /// earlier `backward` calls on the same tape are kept and added to (call
    /// [`Tape::zero_grads`] first if that is not wanted); intermediate
    /// gradients are scratch and reset on every call.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        if self.numel(root) != 1 {
            return Err(TensorError::NonScalarRoot { shape: fmt_shape(self.shape(root)) });
        }
        if !self.wants(root) {
            return Ok(());
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        let seed = self.grad_slice(root);
        seed[0] = seed[0] + T::one();
        for i in (0..=root.idx()).rev() {
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        if !self.nodes[i].requires_grad {
            return;
        }
        // Take the upstream gradient out for the duration of the dispatch;
        // inputs all have smaller ids so nothing below touches slot `i`.
        let Some(dy) = self.nodes[i].grad.take() else { return };
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb_len = self.shape(b).len();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let lead: usize = sa[..sa.len() - 2].iter().product::<usize>().max(1);
                let n = *self.shape(b).last().unwrap();
                let b_shared = sb_len == 2;
                if self.wants(a) {
                    let b_data = self.data_shared(b);
                    let ga = self.grad_slice(a);
                    // dA += dY · Bᵀ
                    kernels::batched_nt_acc(&dy, &b_data, ga, lead, m, n, k, b_shared);
                }
                if self.wants(b) {
                    let a_data = self.data_shared(a);
                    let gb = self.grad_slice(b);
                    // dB += Aᵀ · dY
                    if b_shared {
                        kernels::tn_acc_shared(&a_data, &dy, gb, lead * m, k, n);
                    } else {
                        kernels::tn_acc_batched(&a_data, &dy, gb, lead, m, k, n);
                    }
                }
            }

            Op::MatmulNT { a, b } => {
                let sa = self.shape(a).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let lead: usize = sa[..sa.len() - 2].iter().product::<usize>().max(1);
                let sb = self.shape(b).to_vec();
                let n = sb[sb.len() - 2];
                let b_shared = sb.len() == 2;
                if self.wants(a) {
                    let b_data = self.data_shared(b);
                    let ga = self.grad_slice(a);
                    // dA += dY · B
                    kernels::batched_nn_acc(&dy, &b_data, ga, lead, m, n, k, b_shared);
                }
                if self.wants(b) {
                    let a_data = self.data_shared(a);
                    let gb = self.grad_slice(b);
                    // dB += dYᵀ · A (summed over every row when B is shared)
                    if b_shared {
                        kernels::tn_acc_shared(&dy, &a_data, gb, lead * m, n, k);
                    } else {
                        kernels::tn_acc_batched(&dy, &a_data, gb, lead, m, n, k);
                    }
                }
            }

            Op::Add { a, b } => {
                if self.wants(a) {
                    axpy(self.grad_slice(a), &dy, T::one());
                }
                if self.wants(b) {
                    axpy(self.grad_slice(b), &dy, T::one());
                }
            }

            Op::Sub { a, b } => {
                if self.wants(a) {
                    axpy(self.grad_slice(a), &dy, T::one());
                }
                if self.wants(b) {
                    axpy(self.grad_slice(b), &dy, -T::one());
                }
            }

            Op::Mul { a, b } => {
                if self.wants(a) {
                    let b_data = self.data_shared(b);
                    let ga = self.grad_slice(a);
                    for ((g, &d), &bv) in ga.iter_mut().zip(&dy).zip(b_data.iter()) {
                        *g = *g + d * bv;
                    }
                }
                if self.wants(b) {
                    let a_data = self.data_shared(a);
                    let gb = self.grad_slice(b);
                    for ((g, &d), &av) in gb.iter_mut().zip(&dy).zip(a_data.iter()) {
                        *g = *g + d * av;
                    }
                }
            }

            Op::AddBias { x, bias } => {
                if self.wants(x) {
                    axpy(self.grad_slice(x), &dy, T::one());
                }
                if self.wants(bias) {
                    let d = self.numel(bias);
                    let gb = self.grad_slice(bias);
                    for row in dy.chunks(d) {
                        axpy(gb, row, T::one());
                    }
                }
            }

            Op::Scale { x, c } => {
                if self.wants(x) {
                    axpy(self.grad_slice(x), &dy, c);
                }
            }

            Op::ScaleRows { x, factors } => {
                if self.wants(x) {
                    let slice = dy.len() / factors.len();
                    let gx = self.grad_slice(x);
                    for (i, row) in dy.chunks(slice).enumerate() {
                        axpy(&mut gx[i * slice..(i + 1) * slice], row, factors[i]);
                    }
                }
            }

            Op::Softmax { x } => {
                if self.wants(x) {
                    let y = self.data_shared(TensorId(i as u32));
                    let width = *self.shape(x).last().unwrap();
                    let gx = self.grad_slice(x);
                    kernels::softmax_vjp_rows(&y, &dy, gx, width);
                }
            }

            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let width = *self.shape(x).last().unwrap();
                let x_data = self.data_shared(x);
                let g_data = self.data_shared(gamma);
                if self.wants(x) {
                    let gx = self.grad_slice(x);
                    kernels::layernorm_vjp_rows(&x_data, &g_data, &mean, &invstd, &dy, gx, width);
                }
                if self.wants(gamma) {
                    let gg = self.grad_slice(gamma);
                    for (r, row) in dy.chunks(width).enumerate() {
                        let x_row = &x_data[r * width..r * width + width];
                        for j in 0..width {
                            gg[j] = gg[j] + row[j] * (x_row[j] - mean[r]) * invstd[r];
                        }
                    }
                }
                if self.wants(beta) {
                    let gb = self.grad_slice(beta);
                    for row in dy.chunks(width) {
                        axpy(gb, row, T::one());
                    }
                }
            }

            Op::Gelu { x } => {
                if self.wants(x) {
                    let x_data = self.data_shared(x);
                    let gx = self.grad_slice(x);
                    kernels::gelu_vjp_rows(&x_data, &dy, gx);
                }
            }

            Op::Reshape { x } => {
                if self.wants(x) {
                    axpy(self.grad_slice(x), &dy, T::one());
                }
            }

            Op::SwapAxes12 { x } => {
                if self.wants(x) {
                    // The permutation is self-inverse up to swapping the two
                    // extents: walk the output layout, add into the source.
                    let s = self.shape(x).to_vec();
                    let (d1, d2) = (s[1], s[2]);
                    let elem: usize = s[3..].iter().product::<usize>().max(1);
                    let gx = self.grad_slice(x);
                    for (row, dy_row) in dy.chunks(elem).enumerate() {
                        let b = row / (d1 * d2);
                        let r = row % (d1 * d2);
                        let n1 = r / d1; // d2 index in output layout
                        let n2 = r % d1; // d1 index
                        let off = ((b * d1 + n2) * d2 + n1) * elem;
                        axpy(&mut gx[off..off + elem], dy_row, T::one());
                    }
                }
            }

            Op::GatherUnits { x, rows } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    let m = s[1];
                    let row_len: usize = s[2..].iter().product::<usize>().max(1);
                    let sel = rows.sel_len();
                    let gx = self.grad_slice(x);
                    for (out_row, dy_row) in dy.chunks(row_len).enumerate() {
                        let bb = out_row / sel;
                        let ss = out_row % sel;
                        let src_row = bb * m + rows.for_batch(bb)[ss];
                        axpy(&mut gx[src_row * row_len..(src_row + 1) * row_len], dy_row, T::one());
                    }
                }
            }

            Op::ExtractUnits { img, units, geom } => {
                if self.wants(img) {
                    let px = geom.img_px();
                    let u = geom.tokens_per_side();
                    let plen = geom.patch_len();
                    let sel = units.sel_len();
                    let gimg = self.grad_slice(img);
                    for (row, dy_row) in dy.chunks(plen).enumerate() {
                        let ix = row % u;
                        let iy = (row / u) % u;
                        let ss = (row / (u * u)) % sel;
                        let bb = row / (u * u * sel);
                        let unit = units.for_batch(bb)[ss];
                        let (uy, ux) = (unit / geom.grid, unit % geom.grid);
                        let y0 = uy * geom.unit_px + iy * geom.inner_px;
                        let x0 = ux * geom.unit_px + ix * geom.inner_px;
                        let mut o = 0;
                        for c in 0..geom.channels {
                            for py in 0..geom.inner_px {
                                let base = ((bb * geom.channels + c) * px + y0 + py) * px + x0;
                                for pxx in 0..geom.inner_px {
                                    gimg[base + pxx] = gimg[base + pxx] + dy_row[o];
                                    o += 1;
                                }
                            }
                        }
                    }
                }
            }

            Op::FillUnits { x, token, rows } => {
                let s = self.shape(x).to_vec();
                let (b, m) = (s[0], s[1]);
                let row_len: usize = s[2..].iter().product::<usize>().max(1);
                let d = *s.last().unwrap();
                let mut filled = vec![false; b * m];
                for bb in 0..b {
                    for &unit in rows.for_batch(bb) {
                        filled[bb * m + unit] = true;
                    }
                }
                if self.wants(x) {
                    let gx = self.grad_slice(x);
                    for (row, dy_row) in dy.chunks(row_len).enumerate() {
                        if !filled[row] {
                            axpy(&mut gx[row * row_len..(row + 1) * row_len], dy_row, T::one());
                        }
                    }
                }
                if self.wants(token) {
                    let gt = self.grad_slice(token);
                    for (row, dy_row) in dy.chunks(row_len).enumerate() {
                        if filled[row] {
                            for chunk in dy_row.chunks(d) {
                                axpy(gt, chunk, T::one());
                            }
                        }
                    }
                }
            }

            Op::ScatterUnits { latent, token, rows, total } => {
                let s = self.shape(latent).to_vec();
                let (b, sel, d) = (s[0], s[1], s[2]);
                if self.wants(latent) {
                    let gl = self.grad_slice(latent);
                    for bb in 0..b {
                        for (p, &slot) in rows.for_batch(bb).iter().enumerate() {
                            let src = (bb * total + slot) * d;
                            let dst = (bb * sel + p) * d;
                            axpy(&mut gl[dst..dst + d], &dy[src..src + d], T::one());
                        }
                    }
                }
                if self.wants(token) {
                    let mut visible = vec![false; b * total];
                    for bb in 0..b {
                        for &slot in rows.for_batch(bb) {
                            visible[bb * total + slot] = true;
                        }
                    }
                    let gt = self.grad_slice(token);
                    for (slot, dy_row) in dy.chunks(d).enumerate() {
                        if !visible[slot] {
                            axpy(gt, dy_row, T::one());
                        }
                    }
                }
            }

            Op::RpeBias { table, pairs, n } => {
                if self.wants(table) {
                    let heads = self.shape(table)[1];
                    let batch = dy.len() / (heads * n * n);
                    let gt = self.grad_slice(table);
                    for bb in 0..batch {
                        let idx = pairs.for_batch(bb);
                        for h in 0..heads {
                            let base = (bb * heads + h) * n * n;
                            for (pair, &d) in idx.iter().zip(&dy[base..base + n * n]) {
                                gt[pair * heads + h] = gt[pair * heads + h] + d;
                            }
                        }
                    }
                }
            }

            Op::MeanTokens { x } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    let (n, d) = (s[1], s[2]);
                    let inv = T::one() / T::from_f64(n as f64);
                    let gx = self.grad_slice(x);
                    for (row, gx_row) in gx.chunks_mut(d).enumerate() {
                        let bb = row / n;
                        axpy(gx_row, &dy[bb * d..bb * d + d], inv);
                    }
                }
            }

            Op::MeanAll { x } => {
                if self.wants(x) {
                    let n = self.numel(x);
                    let c = dy[0] / T::from_f64(n as f64);
                    let gx = self.grad_slice(x);
                    for g in gx.iter_mut() {
                        *g = *g + c;
                    }
                }
            }

            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(logits) {
                    let c = self.shape(logits)[1];
                    let b = labels.len();
                    let scale = dy[0] / T::from_f64(b as f64);
                    let gl = self.grad_slice(logits);
                    for bb in 0..b {
                        let target = labels[bb] as usize;
                        for j in 0..c {
                            let ind = if j == target { T::one() } else { T::zero() };
                            gl[bb * c + j] = gl[bb * c + j] + scale * (probs[bb * c + j] - ind);
                        }
                    }
                }
            }
        }
        self.nodes[i].grad = Some(dy);
    }
}
