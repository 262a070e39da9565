use ndarray::{Array1, Array2, Axis};

/// Dense layer `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates weight gradients into `grad` and returns `dLoss/dx`.
    pub fn backward(&self, x: &Array2<f64>, dout: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dout);
        grad.b += &dout.sum_axis(Axis(0));
        dout.dot(&self.w.t())
    }

    /// Forward for a single row without allocating a matrix.
    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.w.ncols();
        let mut out = self.b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = self.w.row(i);
            for (o, wij) in out.iter_mut().take(cols).zip(row) {
                *o += xi * wij;
            }
        }
        out
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array2<f64>, dout: &Array2<f64>) -> Array2<f64> {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, v| {
        if *v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Per-row layer normalization with learned gain and bias (eps 1e-5).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let mut xhat = x.clone();
        for (mut row, m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let out = &xhat * &self.gain + &self.bias;
        (out, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dout: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let d = dout.ncols() as f64;
        grad.gain += &(dout * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dout.sum_axis(Axis(0));

        let dxhat = dout * &self.gain;
        let mean_dxhat = dxhat.mean_axis(Axis(1)).expect("non-empty rows");
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;

        let mut dx = dxhat;
        for ((mut row, xhat_row), (m, mxx)) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(mean_dxhat.iter().zip(mean_dxhat_xhat.iter()))
        {
            for (v, xh) in row.iter_mut().zip(xhat_row) {
                *v = *v - m - xh * mxx;
            }
        }
        for (mut row, s) in dx.rows_mut().into_iter().zip(cache.inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        dx
    }
}

/// Gathers embedding rows for a token sequence.
pub fn embedding_forward(embedding: &Array2<f64>, tokens: &[u32]) -> Array2<f64> {
    let d = embedding.ncols();
    let mut out = Array2::zeros((tokens.len(), d));
    for (mut row, tok) in out.rows_mut().into_iter().zip(tokens) {
        row.assign(&embedding.row(*tok as usize));
    }
    out
}

/// Scatter-adds output gradients back into the embedding gradient.
pub fn embedding_backward(grad_embedding: &mut Array2<f64>, tokens: &[u32], dout: &Array2<f64>) {
    for (drow, tok) in dout.rows().into_iter().zip(tokens) {
        let mut target = grad_embedding.row_mut(*tok as usize);
        target += &drow;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn central_diff(mut loss: impl FnMut(f64) -> f64) -> f64 {
        let h = 1e-6;
        (loss(h) - loss(-h)) / (2.0 * h)
    }

    fn assert_close(fd: f64, analytic: f64, label: &str) {
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0);
        assert!(rel < 1e-6, "{label}: fd {fd} vs analytic {analytic}");
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let lin = Linear {
            w: array![[0.3, -0.2], [0.5, 0.1], [-0.4, 0.7]],
            b: array![0.05, -0.1],
        };
        let x = array![[0.2, -0.3, 0.4], [1.0, 0.5, -0.6]];
        // Loss = sum of outputs weighted by fixed coefficients.
        let coef = array![[1.0, -2.0], [0.5, 1.5]];
        let mut grad = Linear {
            w: Array2::zeros((3, 2)),
            b: Array1::zeros(2),
        };
        let dx = lin.backward(&x, &coef, &mut grad);

        let fd_w = central_diff(|h| {
            let mut p = lin.clone();
            p.w[[1, 0]] += h;
            (&p.forward(&x) * &coef).sum()
        });
        assert_close(fd_w, grad.w[[1, 0]], "linear w");

        let fd_b = central_diff(|h| {
            let mut p = lin.clone();
            p.b[1] += h;
            (&p.forward(&x) * &coef).sum()
        });
        assert_close(fd_b, grad.b[1], "linear b");

        let fd_x = central_diff(|h| {
            let mut xs = x.clone();
            xs[[1, 2]] += h;
            (&lin.forward(&xs) * &coef).sum()
        });
        assert_close(fd_x, dx[[1, 2]], "linear dx");
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let ln = LayerNorm::identity(6);
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i * 7 + j) as f64 * 0.3 - 1.0);
        let (out, cache) = ln.forward(&x);
        for row in cache.xhat.rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|v| v * v).mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(out, cache.xhat); // identity gain/bias
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let ln = LayerNorm {
            gain: array![1.1, 0.9, 1.3, 0.7],
            bias: array![0.1, -0.2, 0.0, 0.3],
        };
        let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 1) * (j + 2)) as f64 * 0.17 - 0.8);
        let coef = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64).sin());

        let (_, cache) = ln.forward(&x);
        let mut grad = LayerNorm {
            gain: Array1::zeros(4),
            bias: Array1::zeros(4),
        };
        let dx = ln.backward(&cache, &coef, &mut grad);

        let fd_gain = central_diff(|h| {
            let mut p = ln.clone();
            p.gain[2] += h;
            (&p.forward(&x).0 * &coef).sum()
        });
        assert_close(fd_gain, grad.gain[2], "ln gain");

        let fd_x = central_diff(|h| {
            let mut xs = x.clone();
            xs[[1, 3]] += h;
            (&ln.forward(&xs).0 * &coef).sum()
        });
        assert_close(fd_x, dx[[1, 3]], "ln dx");
    }

    #[test]
    fn embedding_scatter_gather() {
        let emb = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let toks = vec![2u32, 0, 2];
        let out = embedding_forward(&emb, &toks);
        assert_eq!(out.row(0), emb.row(2));
        let mut grad = Array2::zeros((3, 2));
        let dout = array![[1.0, 1.0], [0.5, 0.5], [2.0, 2.0]];
        embedding_backward(&mut grad, &toks, &dout);
        assert_eq!(grad[[2, 0]], 3.0); // rows 0 and 2 accumulate
        assert_eq!(grad[[0, 1]], 0.5);
        assert_eq!(grad[[1, 0]], 0.0);
    }
}
