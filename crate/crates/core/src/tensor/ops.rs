use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::gemm::gemm;
use super::graph::{Graph, Var};
use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

const GELU_CUBIC: f64 = 0.044715;

fn gelu_parts(x: f64) -> (f64, f64) {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (y, dy)
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(format!("{op}: expected a matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner dims {k} and {k2} disagree")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, &[a, b], move |g, sink| {
            let bv = sink.value(b).data();
            if let Some(da) = sink.slot(a) {
                gemm(m, n, k, g, false, bv, true, da, true);
            }
            let av = sink.value(a).data();
            if let Some(db) = sink.slot(b) {
                gemm(k, m, n, av, true, g, false, db, true);
            }
        }))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_t")?;
        let (n, k2) = self.matrix(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_t: inner dims {k} and {k2} disagree")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, &[a, b], move |g, sink| {
            let bv = sink.value(b).data();
            if let Some(da) = sink.slot(a) {
                gemm(m, n, k, g, false, bv, false, da, true);
            }
            let av = sink.value(a).data();
            if let Some(db) = sink.slot(b) {
                gemm(n, m, k, g, true, av, false, db, true);
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, &[a, b], move |g, sink| {
            for v in [a, b] {
                if let Some(d) = sink.slot(v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match {c} columns",
                self.shape(bias)
            )));
        }
        let bv = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(bv).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push_op(value, &[x, bias], move |g, sink| {
            if let Some(dx) = sink.slot(x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = sink.slot(bias) {
                for row in g.chunks(c.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, &[a, b], move |g, sink| {
            let bv = sink.value(b).data();
            if let Some(da) = sink.slot(a) {
                for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            }
            let av = sink.value(a).data();
            if let Some(db) = sink.slot(b) {
                for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            }
        }))
    }

    /// `x ⊙ mask · scale` for a caller-supplied 0/1 mask. Serves both
    /// training dropout (`scale = 1/(1-p)`) and intent masking (`scale = 1`).
    pub fn apply_mask(&mut self, x: Var, mask: &Tensor, scale: f64) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(Error::shape(format!(
                "apply_mask: mask {:?} does not match {:?}",
                mask.shape(),
                self.shape(x)
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Input("apply_mask: mask entries must be 0 or 1".into()));
        }
        let factors: Vec<f64> = mask.data().iter().map(|m| m * scale).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, &[x], move |g, sink| {
            if let Some(dx) = sink.slot(x) {
                for ((d, g), f) in dx.iter_mut().zip(g).zip(&factors) {
                    *d += g * f;
                }
            }
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, &[x], move |g, sink| {
            if let Some(dx) = sink.slot(x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
            }
        }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, &[x], move |g, sink| {
            let xv = sink.value(x).data();
            if let Some(dx) = sink.slot(x) {
                for ((d, g), v) in dx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            }
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, &[x], move |g, sink| {
            let xv = sink.value(x).data();
            if let Some(dx) = sink.slot(x) {
                for ((d, g), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += g * gelu_parts(v).1;
                }
            }
        }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        Ok(self.push_op(Tensor::scalar(total), &[x], move |g, sink| {
            if let Some(dx) = sink.slot(x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let total: f64 = self.value(x).data().iter().sum();
        let inv = 1.0 / n as f64;
        Ok(self.push_op(Tensor::scalar(total * inv), &[x], move |g, sink| {
            if let Some(dx) = sink.slot(x) {
                dx.iter_mut().for_each(|d| *d += g[0] * inv);
            }
        }))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax: axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| xv[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (xv[idx(i)] - max).exp();
                    y[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    y[idx(i)] /= total;
                }
            }
        }
        let saved = y.clone();
        let value = Tensor::new(shape, y)?;
        Ok(self.push_op(value, &[x], move |g, sink| {
            if let Some(dx) = sink.slot(x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| saved[idx(i)] * g[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] += saved[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
        }))
    }

    /// Layer normalization over the last dimension with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "layer_norm: gain {:?}/bias {:?} do not match width {c}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / c.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[r] = rstd;
            for j in 0..c {
                let h = (row[j] - mu) * rstd;
                xhat[r * c + j] = h;
                y[r * c + j] = gv[j] * h + bv[j];
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.push_op(value, &[x, gain, bias], move |g, sink| {
            let gv = sink.value(gain).data();
            if let Some(dgain) = sink.slot(gain) {
                for r in 0..rows {
                    for j in 0..c {
                        dgain[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if let Some(dbias) = sink.slot(bias) {
                for r in 0..rows {
                    for j in 0..c {
                        dbias[j] += g[r * c + j];
                    }
                }
            }
            if let Some(dx) = sink.slot(x) {
                let mut dh = vec![0.0; c];
                for r in 0..rows {
                    let xh = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dh[j] = g[r * c + j] * gv[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / c as f64;
                    let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] += inv_std[r] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
                    }
                }
            }
        }))
    }

    /// Gathers rows of a `V×d` table. Rows whose id equals `skip` come out as
    /// zeros and send no gradient back to the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], skip: Option<usize>) -> Result<Var> {
        let (rows, d) = self.matrix(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { index: bad, rows });
        }
        let tv = self.value(table).data();
        let mut out = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if Some(id) != skip {
                out[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_op(value, &[table], move |g, sink| {
            if let Some(dt) = sink.slot(table) {
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) == skip {
                        continue;
                    }
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let (_, d) = self.matrix(first, "concat_rows")?;
        let mut offsets = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (_, c) = self.matrix(p, "concat_rows")?;
            if c != d {
                return Err(Error::shape(format!("concat_rows: widths {d} and {c} differ")));
            }
            offsets.push(data.len());
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / d.max(1);
        let value = Tensor::new(vec![rows, d], data)?;
        let parts = parts.to_vec();
        Ok(self.push_op(value, &parts.clone(), move |g, sink| {
            for (&p, &off) in parts.iter().zip(&offsets) {
                if let Some(dp) = sink.slot(p) {
                    let n = dp.len();
                    dp.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                }
            }
        }))
    }

    /// Pairwise cosine similarities between the rows of `a` (`p×d`) and `b`
    /// (`q×d`), as a `p×q` matrix. Any zero-norm row is an error.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, d) = self.matrix(a, "cosine_similarity")?;
        let (q, d2) = self.matrix(b, "cosine_similarity")?;
        if d != d2 {
            return Err(Error::shape(format!("cosine_similarity: widths {d} and {d2} differ")));
        }
        let normalize = |m: &[f64], rows: usize, which: &str| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut unit = m.to_vec();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut unit[r * d..(r + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 1e-12) {
                    return Err(Error::Numeric(format!(
                        "cosine similarity undefined: row {r} of {which} has zero norm"
                    )));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            Ok((unit, norms))
        };
        let (ua, na) = normalize(self.value(a).data(), p, "lhs")?;
        let (ub, nb) = normalize(self.value(b).data(), q, "rhs")?;
        let mut s = vec![0.0; p * q];
        gemm(p, d, q, &ua, false, &ub, true, &mut s, false);
        let value = Tensor::new(vec![p, q], s)?;
        Ok(self.push_op(value, &[a, b], move |g, sink| {
            let project = |unit: &[f64], norms: &[f64], dunit: &[f64], rows: usize, out: &mut [f64]| {
                for r in 0..rows {
                    let u = &unit[r * d..(r + 1) * d];
                    let du = &dunit[r * d..(r + 1) * d];
                    let dot: f64 = u.iter().zip(du).map(|(x, y)| x * y).sum();
                    for j in 0..d {
                        out[r * d + j] += (du[j] - dot * u[j]) / norms[r];
                    }
                }
            };
            if let Some(da) = sink.slot(a) {
                let mut dua = vec![0.0; p * d];
                gemm(p, q, d, g, false, &ub, false, &mut dua, false);
                project(&ua, &na, &dua, p, da);
            }
            if let Some(db) = sink.slot(b) {
                let mut dub = vec![0.0; q * d];
                gemm(q, p, d, g, true, &ua, false, &mut dub, false);
                project(&ub, &nb, &dub, q, db);
            }
        }))
    }

    /// Softmax cross-entropy of `B×V` logits against one target column per
    /// row. Columns listed in `excluded` are removed from the softmax support.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        excluded: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let (b, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {b} rows",
                targets.len()
            )));
        }
        let mut allowed = vec![true; v];
        for &c in excluded {
            if c >= v {
                return Err(Error::Index { index: c, rows: v });
            }
            allowed[c] = false;
        }
        for &t in targets {
            if t >= v {
                return Err(Error::Index { index: t, rows: v });
            }
            if !allowed[t] {
                return Err(Error::Input(format!("cross_entropy: target {t} is an excluded column")));
            }
        }
        let zv = self.value(logits).data();
        let mut probs = vec![0.0; b * v];
        let mut total = 0.0;
        for r in 0..b {
            let row = &zv[r * v..(r + 1) * v];
            let max = row
                .iter()
                .zip(&allowed)
                .filter(|(_, &a)| a)
                .map(|(z, _)| *z)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..v {
                if allowed[c] {
                    let e = (row[c] - max).exp();
                    probs[r * v + c] = e;
                    denom += e;
                }
            }
            for c in 0..v {
                probs[r * v + c] /= denom;
            }
            total += max + denom.ln() - row[targets[r]];
        }
        let norm = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / b.max(1) as f64,
        };
        let targets = targets.to_vec();
        Ok(self.push_op(Tensor::scalar(total * norm), &[logits], move |g, sink| {
            if let Some(dz) = sink.slot(logits) {
                let s = g[0] * norm;
                for r in 0..b {
                    for c in 0..v {
                        dz[r * v + c] += s * probs[r * v + c];
                    }
                    dz[r * v + targets[r]] -= s;
                }
            }
        }))
    }
}
