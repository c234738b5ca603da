//! Fused encoder ∘ middle ∘ decoder pass with analytic gradients, written in whole-matrix form
//! (positions as columns) and kept separate from the row-wise split implementation.

use nalgebra::{DMatrix, DVector};

use super::model::{ClientGrads, Layer, LoraGrads, Mat, MiddleKind, ToyStack};
use crate::error::{Error, Result};

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

fn from_na(m: &DMatrix<f64>) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.data[i * m.ncols() + j] = m[(i, j)];
        }
    }
    out
}

/// Columns are positions; the stored row-major `n × w` matrix becomes `w × n`.
fn columns(m: &Mat) -> DMatrix<f64> {
    to_na(m).transpose()
}

fn uncolumns(m: &DMatrix<f64>) -> Mat {
    from_na(&m.transpose())
}

fn bias(v: &[f64], n: usize) -> DMatrix<f64> {
    let b = DVector::from_column_slice(v);
    DMatrix::from_fn(v.len(), n, |i, _| b[i])
}

fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).sum()).collect()
}

/// Block-diagonal 2×2 rotation for `position`.
fn rotation(position: usize, d: usize) -> DMatrix<f64> {
    let mut r = DMatrix::identity(d, d);
    for k in 0..d / 2 {
        let freq = 1.0 / 10000f64.powf((2 * k) as f64 / d as f64);
        let angle = position as f64 * freq;
        r[(2 * k, 2 * k)] = angle.cos();
        r[(2 * k, 2 * k + 1)] = -angle.sin();
        r[(2 * k + 1, 2 * k)] = angle.sin();
        r[(2 * k + 1, 2 * k + 1)] = angle.cos();
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleGrads {
    pub client: ClientGrads,
    pub lora: Option<LoraGrads>,
    /// `dL/dE`, the gradient that crosses back to the client.
    pub d_emb: Mat,
    /// `dL/dË`, the gradient the client sends to the cloud.
    pub d_enriched: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub emb: Mat,
    pub enriched: Mat,
    pub logits: Mat,
    pub loss: Option<f64>,
    pub grads: Option<OracleGrads>,
}

/// Runs the fused stack on `x` (one row per position, `m` columns). With `targets` (local
/// indices, `targets[j]` predicted at row `j`), also returns the mean cross-entropy and every
/// gradient.
pub fn monolithic_oracle(stack: &ToyStack, x: &Mat, targets: Option<&[usize]>) -> Result<OracleOutput> {
    let c = &stack.client;
    let d = c.d;
    if x.cols != c.m || stack.middle.d != d {
        return Err(Error::DimensionMismatch(format!(
            "input width {} vs m={}, middle width {} vs d={d}",
            x.cols, c.m, stack.middle.d
        )));
    }
    let n = x.rows;
    let xc = columns(x);

    // Encoder.
    let we = to_na(&c.enc_w);
    let h = &we * &xc + bias(&c.enc_b, n);
    let rots: Vec<DMatrix<f64>> = (0..n).map(|j| rotation(j, d)).collect();
    let mut e = DMatrix::zeros(d, n);
    for j in 0..n {
        e.set_column(j, &(&rots[j] * h.column(j)));
    }

    // Middle.
    let lora = stack.middle.lora.as_ref().map(|l| (to_na(&l.u), to_na(&l.v)));
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut attention = None;
    let mut enriched = match &stack.middle.kind {
        MiddleKind::Identity => e.clone(),
        MiddleKind::Affine { m, c: cb } => to_na(m) * &e + bias(cb, n),
        MiddleKind::Attention { wq, wk, wv } => {
            let (wq, wk, wv) = (to_na(wq), to_na(wk), to_na(wv));
            let q = &wq * &e;
            let k = &wk * &e;
            let v = &wv * &e;
            let s = q.transpose() * &k * inv_sqrt_d;
            let mut a = DMatrix::zeros(n, n);
            for j in 0..n {
                let hi = (0..=j).map(|l| s[(j, l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..=j).map(|l| (s[(j, l)] - hi).exp()).sum();
                for l in 0..=j {
                    a[(j, l)] = (s[(j, l)] - hi).exp() / z;
                }
            }
            let out = &e + &v * a.transpose();
            attention = Some((wq, wk, wv, q, k, v, a));
            out
        }
    };
    if let Some((u, v)) = &lora {
        enriched += u * (v.transpose() * &e);
    }

    // Decoder.
    let mut acts = vec![enriched.clone()];
    for layer in &c.decoder {
        let next = to_na(&layer.w) * acts.last().expect("non-empty") + bias(&layer.b, n);
        acts.push(next);
    }
    let logits = acts.last().expect("non-empty").clone();

    let mut out = OracleOutput {
        emb: uncolumns(&e),
        enriched: uncolumns(&enriched),
        logits: uncolumns(&logits),
        loss: None,
        grads: None,
    };
    let Some(targets) = targets else {
        return Ok(out);
    };
    if targets.is_empty() || targets.len() > n || targets.iter().any(|&t| t >= c.vocab_size) {
        return Err(Error::argument("targets must be 1..=n local indices below |V|"));
    }

    // Loss and dL/dlogits.
    let count = targets.len() as f64;
    let mut dz = DMatrix::zeros(c.vocab_size, n);
    let mut loss = 0.0;
    for (j, &t) in targets.iter().enumerate() {
        let col = logits.column(j);
        let hi = col.max();
        let lse = hi + col.map(|z| (z - hi).exp()).sum().ln();
        loss += lse - col[t];
        for i in 0..c.vocab_size {
            dz[(i, j)] = (col[i] - lse).exp() / count;
        }
        dz[(t, j)] -= 1.0 / count;
    }
    loss /= count;

    // Decoder backward.
    let mut dec_grads = Vec::with_capacity(c.decoder.len());
    let mut g = dz;
    for (k, layer) in c.decoder.iter().enumerate().rev() {
        let w = to_na(&layer.w);
        dec_grads.push(Layer {
            w: from_na(&(&g * acts[k].transpose())),
            b: row_sums(&g),
        });
        g = w.transpose() * g;
    }
    dec_grads.reverse();
    let d_enriched = g;

    // Middle backward.
    let mut d_e = match &stack.middle.kind {
        MiddleKind::Identity => d_enriched.clone(),
        MiddleKind::Affine { m, .. } => to_na(m).transpose() * &d_enriched,
        MiddleKind::Attention { .. } => {
            let (wq, wk, wv, q, k, v, a) = attention.as_ref().expect("attention cache");
            let dv = &d_enriched * a;
            let da = d_enriched.transpose() * v;
            let mut ds = DMatrix::zeros(n, n);
            for j in 0..n {
                let mean: f64 = (0..n).map(|l| a[(j, l)] * da[(j, l)]).sum();
                for l in 0..n {
                    ds[(j, l)] = a[(j, l)] * (da[(j, l)] - mean);
                }
            }
            let dq = k * ds.transpose() * inv_sqrt_d;
            let dk = q * &ds * inv_sqrt_d;
            &d_enriched + wq.transpose() * dq + wk.transpose() * dk + wv.transpose() * dv
        }
    };
    let lora_grads = lora.as_ref().map(|(u, v)| {
        d_e += v * (u.transpose() * &d_enriched);
        LoraGrads {
            u: from_na(&(&d_enriched * e.transpose() * v)),
            v: from_na(&(&e * d_enriched.transpose() * u)),
        }
    });

    // Encoder backward.
    let mut dh = DMatrix::zeros(d, n);
    for j in 0..n {
        dh.set_column(j, &(rots[j].transpose() * d_e.column(j)));
    }
    let client = ClientGrads {
        enc_w: from_na(&(&dh * xc.transpose())),
        enc_b: row_sums(&dh),
        decoder: dec_grads,
    };
    out.loss = Some(loss);
    out.grads = Some(OracleGrads {
        client,
        lora: lora_grads,
        d_emb: uncolumns(&d_e),
        d_enriched: uncolumns(&d_enriched),
    });
    Ok(out)
}
