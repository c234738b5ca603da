use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::message::Tensor;
use crate::error::{Error, Result};

pub const DECODER_DEPTH: usize = 4;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries uniform in `±scale`.
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Aᵀ x`
    pub fn tmul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    /// `A += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        for (i, &ui) in u.iter().enumerate() {
            let s = alpha * ui;
            for (a, &vj) in self.row_mut(i).iter_mut().zip(v) {
                *a += s * vj;
            }
        }
    }

    /// `A += alpha · B`
    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        axpy(&mut self.data, alpha, &other.data);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            n: self.rows as u32,
            d: self.cols as u32,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::from_vec(t.n as usize, t.d as usize, t.data.iter().map(|&v| v as f64).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Rotates coordinate pairs `(2k, 2k+1)` by `position · 10000^{-2k/d}`; an odd last
/// coordinate is left alone. `inverse` applies the transpose.
pub(crate) fn rotate(position: usize, v: &mut [f64], inverse: bool) {
    let d = v.len();
    for k in 0..d / 2 {
        let theta = position as f64 * 10000f64.powf(-2.0 * k as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        let s = if inverse { -s } else { s };
        let (a, b) = (v[2 * k], v[2 * k + 1]);
        v[2 * k] = c * a - s * b;
        v[2 * k + 1] = s * a + c * b;
    }
}

/// Low-rank adapter `U Vᵀ` with `U, V ∈ ℝ^{d×r}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    pub u: Mat,
    pub v: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub u: Mat,
    pub v: Mat,
}

impl Lora {
    pub fn rank(&self) -> usize {
        self.u.cols
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.u.mul_vec(&self.v.tmul_vec(x))
    }

    /// `V Uᵀ g`
    fn apply_t(&self, g: &[f64]) -> Vec<f64> {
        self.v.mul_vec(&self.u.tmul_vec(g))
    }

    fn zero_grads(&self) -> LoraGrads {
        LoraGrads {
            u: Mat::zeros(self.u.rows, self.u.cols),
            v: Mat::zeros(self.v.rows, self.v.cols),
        }
    }
}

impl LoraGrads {
    pub fn add(&mut self, other: &LoraGrads) {
        self.u.axpy(1.0, &other.u);
        self.v.axpy(1.0, &other.v);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.u.data.iter().chain(&self.v.data).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MiddleKind {
    /// `Ë = E`
    Identity,
    /// `Ë_j = M e_j + c`
    Affine { m: Mat, c: Vec<f64> },
    /// `Ë_j = e_j + Σ_{k≤j} A_jk W_v e_k` with causal softmax attention `A`.
    Attention { wq: Mat, wk: Mat, wv: Mat },
}

/// The cloud's frozen middle block plus an optional trainable adapter added to every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Middle {
    pub d: usize,
    pub kind: MiddleKind,
    pub lora: Option<Lora>,
}

struct AttentionCache {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `a[j][k]` for `k ≤ j`
    a: Vec<Vec<f64>>,
}

impl Middle {
    pub fn identity(d: usize) -> Self {
        Self {
            d,
            kind: MiddleKind::Identity,
            lora: None,
        }
    }

    /// `kind` is `identity`, `affine` or `attention`.
    pub fn random(kind: &str, d: usize, lora_rank: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::argument("hidden dimension must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / d as f64).sqrt();
        let kind = match kind {
            "identity" => MiddleKind::Identity,
            "affine" => MiddleKind::Affine {
                m: Mat::random(d, d, scale, &mut rng),
                c: (0..d).map(|_| rng.gen_range(-0.1..=0.1)).collect(),
            },
            "attention" => MiddleKind::Attention {
                wq: Mat::random(d, d, scale, &mut rng),
                wk: Mat::random(d, d, scale, &mut rng),
                wv: Mat::random(d, d, scale, &mut rng),
            },
            other => return Err(Error::argument(format!("unknown middle model {other:?}"))),
        };
        let lora = (lora_rank > 0).then(|| Lora {
            u: Mat::random(d, lora_rank, 0.1, &mut rng),
            v: Mat::random(d, lora_rank, 0.1, &mut rng),
        });
        Ok(Self { d, kind, lora })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            MiddleKind::Identity => "identity",
            MiddleKind::Affine { .. } => "affine",
            MiddleKind::Attention { .. } => "attention",
        }
    }

    fn attention_cache(wq: &Mat, wk: &Mat, wv: &Mat, e: &Mat) -> AttentionCache {
        let n = e.rows;
        let q: Vec<Vec<f64>> = (0..n).map(|j| wq.mul_vec(e.row(j))).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|j| wk.mul_vec(e.row(j))).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|j| wv.mul_vec(e.row(j))).collect();
        let inv_sqrt_d = 1.0 / (e.cols as f64).sqrt();
        let a = (0..n)
            .map(|j| {
                let scores: Vec<f64> = (0..=j).map(|l| dot(&q[j], &k[l]) * inv_sqrt_d).collect();
                let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - hi).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.into_iter().map(|x| x / total).collect()
            })
            .collect();
        AttentionCache { q, k, v, a }
    }

    fn check(&self, e: &Mat) -> Result<()> {
        if e.cols != self.d {
            return Err(Error::DimensionMismatch(format!(
                "middle expects width {}, got {}",
                self.d, e.cols
            )));
        }
        Ok(())
    }

    pub fn forward(&self, e: &Mat) -> Result<Mat> {
        self.check(e)?;
        let mut out = match &self.kind {
            MiddleKind::Identity => e.clone(),
            MiddleKind::Affine { m, c } => {
                let mut out = Mat::zeros(e.rows, self.d);
                for j in 0..e.rows {
                    let mut y = m.mul_vec(e.row(j));
                    axpy(&mut y, 1.0, c);
                    out.row_mut(j).copy_from_slice(&y);
                }
                out
            }
            MiddleKind::Attention { wq, wk, wv } => {
                let cache = Self::attention_cache(wq, wk, wv, e);
                let mut out = e.clone();
                for j in 0..e.rows {
                    for (l, &a) in cache.a[j].iter().enumerate() {
                        axpy(out.row_mut(j), a, &cache.v[l]);
                    }
                }
                out
            }
        };
        if let Some(lora) = &self.lora {
            for j in 0..e.rows {
                let delta = lora.apply(e.row(j));
                axpy(out.row_mut(j), 1.0, &delta);
            }
        }
        Ok(out)
    }

    /// `dL/dE` from `dL/dË`, plus adapter gradients when an adapter is present.
    pub fn backward(&self, e: &Mat, g: &Mat) -> Result<(Mat, Option<LoraGrads>)> {
        self.check(e)?;
        if g.rows != e.rows || g.cols != e.cols {
            return Err(Error::DimensionMismatch(format!(
                "gradient is {}x{}, activations are {}x{}",
                g.rows, g.cols, e.rows, e.cols
            )));
        }
        let n = e.rows;
        let mut de = match &self.kind {
            MiddleKind::Identity => g.clone(),
            MiddleKind::Affine { m, .. } => {
                let mut de = Mat::zeros(n, self.d);
                for j in 0..n {
                    de.row_mut(j).copy_from_slice(&m.tmul_vec(g.row(j)));
                }
                de
            }
            MiddleKind::Attention { wq, wk, wv } => {
                let c = Self::attention_cache(wq, wk, wv, e);
                let inv_sqrt_d = 1.0 / (self.d as f64).sqrt();
                let mut dq = vec![vec![0.0; self.d]; n];
                let mut dk = vec![vec![0.0; self.d]; n];
                let mut dv = vec![vec![0.0; self.d]; n];
                for j in 0..n {
                    let gj = g.row(j);
                    let da: Vec<f64> = (0..=j).map(|l| dot(gj, &c.v[l])).collect();
                    let mean: f64 = c.a[j].iter().zip(&da).map(|(a, d)| a * d).sum();
                    for l in 0..=j {
                        axpy(&mut dv[l], c.a[j][l], gj);
                        let ds = c.a[j][l] * (da[l] - mean) * inv_sqrt_d;
                        axpy(&mut dq[j], ds, &c.k[l]);
                        axpy(&mut dk[l], ds, &c.q[j]);
                    }
                }
                let mut de = g.clone();
                for j in 0..n {
                    let row = de.row_mut(j);
                    axpy(row, 1.0, &wq.tmul_vec(&dq[j]));
                    axpy(row, 1.0, &wk.tmul_vec(&dk[j]));
                    axpy(row, 1.0, &wv.tmul_vec(&dv[j]));
                }
                de
            }
        };
        let grads = self.lora.as_ref().map(|lora| {
            let mut grads = lora.zero_grads();
            for j in 0..n {
                let (ej, gj) = (e.row(j), g.row(j));
                axpy(de.row_mut(j), 1.0, &lora.apply_t(gj));
                grads.u.add_outer(1.0, gj, &lora.v.tmul_vec(ej));
                grads.v.add_outer(1.0, ej, &lora.u.tmul_vec(gj));
            }
            grads
        });
        Ok((de, grads))
    }

    /// Applies `lora -= lr · grads / count`; returns the number of parameters updated.
    pub fn apply_lora_update(&mut self, grads: &LoraGrads, learning_rate: f64, count: usize) -> usize {
        match &mut self.lora {
            Some(lora) if count > 0 => {
                let step = -learning_rate / count as f64;
                lora.u.axpy(step, &grads.u);
                lora.v.axpy(step, &grads.v);
                lora.u.data.len() + lora.v.data.len()
            }
            _ => 0,
        }
    }
}

/// One affine decoder layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Client-held parameters: the encoder `E = R_pos(W_e x + b_e)` and the affine decoder stack
/// ending in logits over local token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub m: usize,
    pub d: usize,
    pub vocab_size: usize,
    pub enc_w: Mat,
    pub enc_b: Vec<f64>,
    pub decoder: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientGrads {
    pub enc_w: Mat,
    pub enc_b: Vec<f64>,
    pub decoder: Vec<Layer>,
}

impl ClientGrads {
    pub fn zeros_like(model: &ClientModel) -> Self {
        Self {
            enc_w: Mat::zeros(model.d, model.m),
            enc_b: vec![0.0; model.d],
            decoder: model
                .decoder
                .iter()
                .map(|l| Layer {
                    w: Mat::zeros(l.w.rows, l.w.cols),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &ClientGrads) {
        self.enc_w.axpy(alpha, &other.enc_w);
        axpy(&mut self.enc_b, alpha, &other.enc_b);
        for (a, b) in self.decoder.iter_mut().zip(&other.decoder) {
            a.w.axpy(alpha, &b.w);
            axpy(&mut a.b, alpha, &b.b);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.enc_w.data.clone();
        out.extend_from_slice(&self.enc_b);
        for l in &self.decoder {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b);
        }
        out
    }
}

/// Intermediate decoder activations for one sequence: `h[0] = Ë`, `h[DEPTH] = logits`.
pub struct DecoderCache {
    pub h: Vec<Mat>,
}

impl ClientModel {
    pub fn random(m: usize, d: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 || vocab_size < 2 {
            return Err(Error::argument(format!(
                "model dims must be m >= 1, d >= 1, |V| >= 2 (got {m}, {d}, {vocab_size})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_w = Mat::random(d, m, (3.0 / m as f64).sqrt(), &mut rng);
        let enc_b = (0..d).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        let decoder = (0..DECODER_DEPTH)
            .map(|k| {
                let out = if k + 1 == DECODER_DEPTH { vocab_size } else { d };
                Layer {
                    w: Mat::random(out, d, (3.0 / d as f64).sqrt(), &mut rng),
                    b: (0..out).map(|_| rng.gen_range(-0.1..=0.1)).collect(),
                }
            })
            .collect();
        Ok(Self {
            m,
            d,
            vocab_size,
            enc_w,
            enc_b,
            decoder,
        })
    }

    /// Row `j` of the result is the encoding of input row `j` at position `j`.
    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.m {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects width {}, got {}",
                self.m, x.cols
            )));
        }
        let mut out = Mat::zeros(x.rows, self.d);
        for j in 0..x.rows {
            let mut h = self.enc_w.mul_vec(x.row(j));
            axpy(&mut h, 1.0, &self.enc_b);
            rotate(j, &mut h, false);
            out.row_mut(j).copy_from_slice(&h);
        }
        Ok(out)
    }

    pub fn decode(&self, enriched: &Mat) -> Result<DecoderCache> {
        if enriched.cols != self.d {
            return Err(Error::DimensionMismatch(format!(
                "decoder expects width {}, got {}",
                self.d, enriched.cols
            )));
        }
        let mut h = vec![enriched.clone()];
        for layer in &self.decoder {
            let prev = h.last().expect("non-empty");
            let mut next = Mat::zeros(prev.rows, layer.w.rows);
            for j in 0..prev.rows {
                let mut y = layer.w.mul_vec(prev.row(j));
                axpy(&mut y, 1.0, &layer.b);
                next.row_mut(j).copy_from_slice(&y);
            }
            h.push(next);
        }
        Ok(DecoderCache { h })
    }

    /// Logits for the last row only.
    pub fn last_logits(&self, enriched: &Mat) -> Result<Vec<f64>> {
        let cache = self.decode(enriched)?;
        let logits = cache.h.last().expect("non-empty");
        Ok(logits.row(logits.rows - 1).to_vec())
    }

    /// Decoder gradients and `dL/dË` from `dL/dlogits`.
    pub fn decoder_backward(&self, cache: &DecoderCache, dlogits: &Mat, grads: &mut ClientGrads) -> Mat {
        let mut g = dlogits.clone();
        for (k, layer) in self.decoder.iter().enumerate().rev() {
            let input = &cache.h[k];
            let mut dprev = Mat::zeros(input.rows, input.cols);
            for j in 0..input.rows {
                grads.decoder[k].w.add_outer(1.0, g.row(j), input.row(j));
                axpy(&mut grads.decoder[k].b, 1.0, g.row(j));
                dprev.row_mut(j).copy_from_slice(&layer.w.tmul_vec(g.row(j)));
            }
            g = dprev;
        }
        g
    }

    pub fn encoder_backward(&self, x: &Mat, de: &Mat, grads: &mut ClientGrads) {
        for j in 0..x.rows {
            let mut g = de.row(j).to_vec();
            rotate(j, &mut g, true);
            grads.enc_w.add_outer(1.0, &g, x.row(j));
            axpy(&mut grads.enc_b, 1.0, &g);
        }
    }

    pub fn apply(&mut self, grads: &ClientGrads, learning_rate: f64) {
        self.enc_w.axpy(-learning_rate, &grads.enc_w);
        axpy(&mut self.enc_b, -learning_rate, &grads.enc_b);
        for (l, g) in self.decoder.iter_mut().zip(&grads.decoder) {
            l.w.axpy(-learning_rate, &g.w);
            axpy(&mut l.b, -learning_rate, &g.b);
        }
    }
}

/// Mean next-token cross-entropy over rows `0..n-1` (row `j` predicts `targets[j]`) and its
/// gradient with respect to the logits.
pub(crate) fn next_token_loss(logits: &Mat, targets: &[usize]) -> Result<(f64, Mat)> {
    if targets.is_empty() || targets.len() > logits.rows {
        return Err(Error::argument(format!(
            "need between 1 and {} targets, got {}",
            logits.rows,
            targets.len()
        )));
    }
    let scale = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    for (j, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::Index {
                index: t,
                size: logits.cols,
            });
        }
        let row = logits.row(j);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|z| (z - hi).exp()).sum();
        let ln_norm = hi + total.ln();
        loss += (ln_norm - row[t]) * scale;
        for (g, &z) in grad.row_mut(j).iter_mut().zip(row) {
            *g = (z - ln_norm).exp() * scale;
        }
        grad.row_mut(j)[t] -= scale;
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grad))
}

/// Client parameters and the cloud's middle block, held together for local runs and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyStack {
    pub client: ClientModel,
    pub middle: Middle,
}

impl ToyStack {
    pub fn random(
        m: usize,
        d: usize,
        vocab_size: usize,
        middle: &str,
        lora_rank: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            client: ClientModel::random(m, d, vocab_size, seed)?,
            middle: Middle::random(middle, d, lora_rank, seed ^ 0x9E37_79B9_7F4A_7C15)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthogonal_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [1usize, 4, 7] {
            for pos in [0usize, 1, 5, 100] {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut w = v.clone();
                rotate(pos, &mut w, false);
                let n0: f64 = v.iter().map(|x| x * x).sum();
                let n1: f64 = w.iter().map(|x| x * x).sum();
                assert!((n0 - n1).abs() < 1e-12);
                rotate(pos, &mut w, true);
                assert!(v.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        let mut a = vec![1.0, 0.0];
        rotate(0, &mut a, false);
        assert_eq!(a, vec![1.0, 0.0]);
    }

    #[test]
    fn identity_middle_passes_through() {
        let m = Middle::identity(3);
        let e = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.forward(&e).unwrap(), e);
        assert_eq!(m.backward(&e, &e).unwrap().0, e);
    }

    #[test]
    fn loss_gradient_rows_sum_to_zero() {
        let logits = Mat::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (loss, g) = next_token_loss(&logits, &[1, 3]).unwrap();
        assert!(loss > 0.0);
        for j in 0..2 {
            assert!(g.row(j).iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(g.row(2).iter().all(|&v| v == 0.0));
        assert!(next_token_loss(&logits, &[9]).is_err());
    }
}
