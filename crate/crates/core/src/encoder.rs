//! Per-attribute deep autoencoder over adjacency rows.
//!
//! Every layer, including the embedding and the reconstruction layer, is
//! `y = sigmoid(W x + b)`. Rows are processed in batches (one row per node),
//! so a batch forward pass is a chain of `X W^T + b` products.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// out_dim × in_dim
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LayerParams {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`.
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        LayerParams {
            weights: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..=bound)),
            bias: Array1::from_shape_fn(out_dim, |_| rng.gen_range(-bound..=bound)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        z.mapv_inplace(sigmoid);
        z
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Zero-entry weight of the reconstruction loss. Non-zero entries weigh 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconPenalty {
    pub beta: f64,
}

impl ReconPenalty {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        Ok(ReconPenalty { beta })
    }

    #[inline]
    pub fn weight(&self, x: f64) -> f64 {
        if x != 0.0 {
            1.0
        } else {
            self.beta
        }
    }
}

impl Default for ReconPenalty {
    fn default() -> Self {
        ReconPenalty { beta: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub attribute_index: usize,
    /// Encoder widths `[n_items, h1, ..., d]`; the decoder mirrors them.
    pub layer_dims: Vec<usize>,
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
}

impl Autoencoder {
    fn validate_dims(dims: &[usize]) {
        assert!(dims.len() >= 2, "an autoencoder needs an input and an embedding width");
        assert!(dims.iter().all(|&d| d > 0), "layer widths must be positive");
    }

    fn build(attribute_index: usize, dims: &[usize], mut make: impl FnMut(usize, usize) -> LayerParams) -> Self {
        Self::validate_dims(dims);
        let encoder = dims.windows(2).map(|w| make(w[0], w[1])).collect();
        let decoder = dims.windows(2).rev().map(|w| make(w[1], w[0])).collect();
        Autoencoder {
            attribute_index,
            layer_dims: dims.to_vec(),
            encoder,
            decoder,
        }
    }

    pub fn zeros(attribute_index: usize, dims: &[usize]) -> Self {
        Self::build(attribute_index, dims, LayerParams::zeros)
    }

    pub fn random<R: Rng>(attribute_index: usize, dims: &[usize], rng: &mut R) -> Self {
        Self::build(attribute_index, dims, |i, o| LayerParams::random(i, o, rng))
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Encoder layers followed by decoder layers.
    pub fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.attribute_index, &self.layer_dims)
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(LayerParams::is_finite)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("encode input", self.input_dim(), x.len())?;
        let mut y = row_matrix(x);
        for layer in &self.encoder {
            y = layer.forward(y.view());
        }
        Ok(y.into_raw_vec())
    }

    pub fn decode(&self, h: &[f64]) -> Result<Vec<f64>> {
        check_len("decode input", self.embedding_dim(), h.len())?;
        let mut y = row_matrix(h);
        for layer in &self.decoder {
            y = layer.forward(y.view());
        }
        Ok(y.into_raw_vec())
    }

    /// Embedding of a node attached after training. Same map as [`encode`];
    /// an all-zero row still embeds (to the image of the biases).
    ///
    /// [`encode`]: Autoencoder::encode
    pub fn encode_cold(&self, cold_row: &[f64]) -> Result<Vec<f64>> {
        if cold_row.iter().all(|&v| v == 0.0) {
            warn!(
                "cold row for attribute {} has no links; embedding reflects biases only",
                self.attribute_index
            );
        }
        self.encode(cold_row)
    }

    /// Batched forward pass keeping every activation for backpropagation.
    pub fn forward_batch(&self, x: Array2<f64>) -> Result<Forward> {
        check_len("batch input width", self.input_dim(), x.ncols())?;
        let mut acts = Vec::with_capacity(self.encoder.len() + self.decoder.len() + 1);
        acts.push(x);
        for layer in self.layers() {
            let next = layer.forward(acts.last().unwrap().view());
            acts.push(next);
        }
        Ok(Forward {
            n_encoder: self.encoder.len(),
            acts,
        })
    }

    /// Gradients of a loss given its derivative w.r.t. the reconstruction
    /// (`d_recon`) and w.r.t. the embeddings (`d_embed`), both batch-shaped.
    /// Either may be absent. Decoder gradients are zero without `d_recon`.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_recon: Option<&Array2<f64>>,
        d_embed: Option<&Array2<f64>>,
    ) -> Autoencoder {
        let mut grads = self.zeros_like();
        let n_layers = self.encoder.len() + self.decoder.len();
        let ne = self.encoder.len();
        let rows = fwd.acts[0].nrows();
        let d = self.embedding_dim();

        let mut delta_embed = match d_embed {
            Some(g) => g.clone(),
            None => Array2::zeros((rows, d)),
        };
        if let Some(d_out) = d_recon {
            let mut upstream = d_out.clone();
            for l in (ne..n_layers).rev() {
                let layer = &self.decoder[l - ne];
                let dz = sigmoid_backward(&upstream, &fwd.acts[l + 1]);
                let g = &mut grads.decoder[l - ne];
                g.weights = dz.t().dot(&fwd.acts[l]);
                g.bias = dz.sum_axis(Axis(0));
                upstream = dz.dot(&layer.weights);
            }
            delta_embed += &upstream;
        }
        let mut upstream = delta_embed;
        for l in (0..ne).rev() {
            let layer = &self.encoder[l];
            let dz = sigmoid_backward(&upstream, &fwd.acts[l + 1]);
            let g = &mut grads.encoder[l];
            g.weights = dz.t().dot(&fwd.acts[l]);
            g.bias = dz.sum_axis(Axis(0));
            if l > 0 {
                upstream = dz.dot(&layer.weights);
            }
        }
        grads
    }
}

/// Activations of a batched forward pass: `acts[0]` is the input,
/// `acts[n_encoder]` the embeddings, the last entry the reconstruction.
#[derive(Debug, Clone)]
pub struct Forward {
    n_encoder: usize,
    pub acts: Vec<Array2<f64>>,
}

impl Forward {
    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.acts[self.n_encoder]
    }

    pub fn reconstruction(&self) -> &Array2<f64> {
        self.acts.last().unwrap()
    }
}

fn sigmoid_backward(upstream: &Array2<f64>, out: &Array2<f64>) -> Array2<f64> {
    let mut dz = upstream.clone();
    dz.zip_mut_with(out, |g, &y| *g *= y * (1.0 - y));
    dz
}

fn row_matrix(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// `sum_j ((x_j - xhat_j) * b_j)^2` with `b_j = 1` on links and `beta` elsewhere.
pub fn weighted_recon_loss(x: &[f64], x_hat: &[f64], penalty: ReconPenalty) -> f64 {
    x.iter()
        .zip(x_hat)
        .map(|(&xi, &yi)| {
            let e = (xi - yi) * penalty.weight(xi);
            e * e
        })
        .sum()
}

/// Batched loss and its derivative w.r.t. the reconstruction.
pub fn weighted_recon_loss_batch(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    penalty: ReconPenalty,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(x.raw_dim());
    let mut loss = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&x)
        .and(&x_hat)
        .for_each(|g, &xi, &yi| {
            let b = penalty.weight(xi);
            let e = (yi - xi) * b;
            loss += e * e;
            *g = 2.0 * e * b;
        });
    (loss, grad)
}

/// Analytic gradients of [`weighted_recon_loss`] for one adjacency row.
pub fn recon_loss_gradients(model: &Autoencoder, x: &[f64], penalty: ReconPenalty) -> Result<Autoencoder> {
    let fwd = model.forward_batch(row_matrix(x))?;
    let (_, d_recon) = weighted_recon_loss_batch(fwd.input().view(), fwd.reconstruction().view(), penalty);
    Ok(model.backward(&fwd, Some(&d_recon), None))
}

/// Row view helper for callers holding embeddings in a matrix.
pub fn row_vec(m: &Array2<f64>, i: usize) -> Vec<f64> {
    let r: ArrayView1<f64> = m.row(i);
    r.to_vec()
}
