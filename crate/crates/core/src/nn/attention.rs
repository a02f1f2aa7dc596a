use rand::Rng;

use super::{
    glorot_uniform, matmul, matmul_nt, matmul_tn, prefixed, prefixed_mut, softmax_rows, DenseLayer, Module, ParamMut,
    ParamRef, Tensor2,
};
use crate::error::{Error, Result};

/// Multi-head cross-attention.
///
/// Each head projects the query rows with `W_Q` and the key/value rows with
/// `W_K`, `W_V`, attends with `softmax(Q·Kᵀ/√d)·V`, and the concatenated head
/// outputs go through the output projection `W_O`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub w_q: Vec<Tensor2>,
    pub w_k: Vec<Tensor2>,
    pub w_v: Vec<Tensor2>,
    pub w_q_grad: Vec<Tensor2>,
    pub w_k_grad: Vec<Tensor2>,
    pub w_v_grad: Vec<Tensor2>,
    pub output: DenseLayer,
}

/// Intermediates recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    groups: usize,
    query: Tensor2,
    keyval: Tensor2,
    q: Vec<Tensor2>,
    k: Vec<Tensor2>,
    v: Vec<Tensor2>,
    weights: Vec<Tensor2>,
    concat: Tensor2,
}

impl AttentionCache {
    /// Softmax weights of head `h`, stacked over groups.
    pub fn weights(&self, h: usize) -> &Tensor2 {
        &self.weights[h]
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        query_dim: usize,
        keyval_dim: usize,
        heads: usize,
        head_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mk = |cols: usize, rng: &mut R| -> Vec<Tensor2> {
            (0..heads).map(|_| glorot_uniform(head_dim, cols, rng)).collect()
        };
        let w_q = mk(query_dim, rng);
        let w_k = mk(keyval_dim, rng);
        let w_v = mk(keyval_dim, rng);
        let zeros = |ws: &[Tensor2]| ws.iter().map(|w| Tensor2::zeros(w.rows, w.cols)).collect();
        Self {
            heads,
            head_dim,
            w_q_grad: zeros(&w_q),
            w_k_grad: zeros(&w_k),
            w_v_grad: zeros(&w_v),
            w_q,
            w_k,
            w_v,
            output: DenseLayer::new(heads * head_dim, output_dim, rng),
        }
    }

    pub fn query_dim(&self) -> usize {
        self.w_q[0].cols
    }

    pub fn keyval_dim(&self) -> usize {
        self.w_k[0].cols
    }

    /// Attention of one query sequence over one key/value sequence.
    pub fn forward(&self, query_seq: &Tensor2, keyval_seq: &Tensor2) -> Result<(Tensor2, AttentionCache)> {
        self.forward_grouped(query_seq, keyval_seq, 1)
    }

    /// `groups` independent sequences stacked row-wise: rows of `query` and
    /// `keyval` split evenly into `groups` blocks and block `g` of the query
    /// attends only over block `g` of the keys/values.
    pub fn forward_grouped(
        &self,
        query: &Tensor2,
        keyval: &Tensor2,
        groups: usize,
    ) -> Result<(Tensor2, AttentionCache)> {
        if query.cols != self.query_dim() || keyval.cols != self.keyval_dim() {
            return Err(Error::Config(format!(
                "attention expects query width {} and key/value width {}, got {} and {}",
                self.query_dim(),
                self.keyval_dim(),
                query.cols,
                keyval.cols
            )));
        }
        if groups == 0 || !query.rows.is_multiple_of(groups) || !keyval.rows.is_multiple_of(groups) || keyval.rows == 0
        {
            return Err(Error::Config(format!(
                "cannot split {} query rows and {} key/value rows into {groups} groups",
                query.rows, keyval.rows
            )));
        }
        let nq = query.rows / groups;
        let nk = keyval.rows / groups;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let d = self.head_dim;

        let mut qs = Vec::with_capacity(self.heads);
        let mut ks = Vec::with_capacity(self.heads);
        let mut vs = Vec::with_capacity(self.heads);
        let mut ws = Vec::with_capacity(self.heads);
        let mut concat = Tensor2::zeros(query.rows, self.heads * d);
        for h in 0..self.heads {
            let q = matmul_nt(query, &self.w_q[h]);
            let k = matmul_nt(keyval, &self.w_k[h]);
            let v = matmul_nt(keyval, &self.w_v[h]);
            let mut weights = Tensor2::zeros(query.rows, nk);
            for g in 0..groups {
                let qg = q.slice_rows(g * nq, nq);
                let kg = k.slice_rows(g * nk, nk);
                let vg = v.slice_rows(g * nk, nk);
                let scores = matmul_nt(&qg, &kg).map(|s| s * scale);
                let a = softmax_rows(&scores);
                let o = matmul(&a, &vg);
                for r in 0..nq {
                    weights.row_mut(g * nq + r).copy_from_slice(a.row(r));
                    concat.row_mut(g * nq + r)[h * d..(h + 1) * d].copy_from_slice(o.row(r));
                }
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
            ws.push(weights);
        }
        let out = self.output.forward(&concat);
        Ok((
            out,
            AttentionCache {
                groups,
                query: query.clone(),
                keyval: keyval.clone(),
                q: qs,
                k: ks,
                v: vs,
                weights: ws,
                concat,
            },
        ))
    }

    /// Accumulates gradients for every projection; returns the gradients with
    /// respect to the query and key/value inputs.
    pub fn backward(&mut self, cache: &AttentionCache, dout: &Tensor2) -> (Tensor2, Tensor2) {
        let groups = cache.groups;
        let nq = cache.query.rows / groups;
        let nk = cache.keyval.rows / groups;
        let d = self.head_dim;
        let scale = 1.0 / (d as f64).sqrt();

        let dconcat = self.output.backward(&cache.concat, dout);
        let mut dquery = Tensor2::zeros(cache.query.rows, cache.query.cols);
        let mut dkeyval = Tensor2::zeros(cache.keyval.rows, cache.keyval.cols);
        for h in 0..self.heads {
            let dout_h = dconcat.slice_cols(h * d, d);
            let mut dq = Tensor2::zeros(cache.query.rows, d);
            let mut dk = Tensor2::zeros(cache.keyval.rows, d);
            let mut dv = Tensor2::zeros(cache.keyval.rows, d);
            for g in 0..groups {
                let a = cache.weights[h].slice_rows(g * nq, nq);
                let qg = cache.q[h].slice_rows(g * nq, nq);
                let kg = cache.k[h].slice_rows(g * nk, nk);
                let vg = cache.v[h].slice_rows(g * nk, nk);
                let dog = dout_h.slice_rows(g * nq, nq);
                let da = matmul_nt(&dog, &vg);
                let dvg = matmul_tn(&a, &dog);
                // softmax backward, then the 1/√d scale
                let mut ds = Tensor2::zeros(nq, nk);
                for r in 0..nq {
                    let ar = a.row(r);
                    let dar = da.row(r);
                    let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                    for (c, o) in ds.row_mut(r).iter_mut().enumerate() {
                        *o = ar[c] * (dar[c] - inner) * scale;
                    }
                }
                let dqg = matmul(&ds, &kg);
                let dkg = matmul_tn(&ds, &qg);
                for r in 0..nq {
                    dq.row_mut(g * nq + r).copy_from_slice(dqg.row(r));
                }
                for r in 0..nk {
                    dk.row_mut(g * nk + r).copy_from_slice(dkg.row(r));
                    dv.row_mut(g * nk + r).copy_from_slice(dvg.row(r));
                }
            }
            self.w_q_grad[h].add_assign(&matmul_tn(&dq, &cache.query));
            self.w_k_grad[h].add_assign(&matmul_tn(&dk, &cache.keyval));
            self.w_v_grad[h].add_assign(&matmul_tn(&dv, &cache.keyval));
            dquery.add_assign(&matmul(&dq, &self.w_q[h]));
            dkeyval.add_assign(&matmul(&dk, &self.w_k[h]));
            dkeyval.add_assign(&matmul(&dv, &self.w_v[h]));
        }
        (dquery, dkeyval)
    }
}

impl Module for MultiHeadAttention {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (label, ws, gs) in [
            ("w_q", &self.w_q, &self.w_q_grad),
            ("w_k", &self.w_k, &self.w_k_grad),
            ("w_v", &self.w_v, &self.w_v_grad),
        ] {
            for (h, (w, g)) in ws.iter().zip(gs.iter()).enumerate() {
                out.push(ParamRef {
                    name: format!("head{h}.{label}"),
                    shape: w.shape(),
                    value: &w.data,
                    grad: &g.data,
                });
            }
        }
        out.extend(prefixed("w_o", self.output.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (label, ws, gs) in [
            ("w_q", &mut self.w_q, &mut self.w_q_grad),
            ("w_k", &mut self.w_k, &mut self.w_k_grad),
            ("w_v", &mut self.w_v, &mut self.w_v_grad),
        ] {
            for (h, (w, g)) in ws.iter_mut().zip(gs.iter_mut()).enumerate() {
                out.push(ParamMut {
                    name: format!("head{h}.{label}"),
                    shape: w.shape(),
                    value: &mut w.data,
                    grad: &mut g.data,
                });
            }
        }
        out.extend(prefixed_mut("w_o", self.output.params_mut()));
        out
    }
}
