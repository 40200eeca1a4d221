//! Small MLPs: the student encoder (rectifier stack with a unit-normalized
//! output row) and the anchor projection head (same stack, raw output).

use crate::error::{Error, Result};
use crate::numerics::{matmul, EmbeddingMatrix, ZERO_NORM_EPS};
use crate::rng::normal;
use rand_chacha::ChaCha8Rng;

/// One affine layer, weight stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: EmbeddingMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: EmbeddingMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::CountMismatch {
                what: "bias",
                left: bias.len(),
                right: weight.rows(),
            });
        }
        Ok(Self { weight, bias })
    }

    /// He-style init: N(0, 2/fan_in) weights, zero bias.
    pub fn random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| std * normal(rng)).collect();
        Self {
            weight: EmbeddingMatrix::new(out_dim, in_dim, data).expect("nonzero dims"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Gradient (or momentum buffer) mirroring one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: EmbeddingMatrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Linear) -> Self {
        Self {
            weight: EmbeddingMatrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }
}

/// Parameter gradients for a whole layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<LayerGrad>,
}

impl MlpGradients {
    pub fn zeros_like(layers: &[Linear]) -> Self {
        Self {
            layers: layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data().iter()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(b.bias.iter()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.weight.scale(s);
            for b in &mut g.bias {
                *b *= s;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.find_non_finite().is_none() && g.bias.iter().all(|b| b.is_finite()))
    }
}

/// Runs the affine stack with rectifiers between layers (none after the
/// last). Returns the pre-activation matrix of every layer.
pub fn affine_forward(layers: &[Linear], x: &EmbeddingMatrix) -> Result<Vec<EmbeddingMatrix>> {
    let mut pre_acts = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        if h.cols() != layer.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "affine_forward",
                left: h.shape(),
                right: layer.weight.shape(),
            });
        }
        let mut a = matmul(&h, &layer.weight.transpose())?;
        for i in 0..a.rows() {
            let row = a.row_mut(i);
            for (v, b) in row.iter_mut().zip(layer.bias.iter()) {
                *v += b;
            }
        }
        if l + 1 < layers.len() {
            h = a.clone();
            for v in h.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        pre_acts.push(a);
    }
    Ok(pre_acts)
}

/// Backward pass through the affine stack given the gradient w.r.t. the last
/// pre-activation. `x` and `pre_acts` must come from the matching forward.
pub fn affine_backward(
    layers: &[Linear],
    x: &EmbeddingMatrix,
    pre_acts: &[EmbeddingMatrix],
    grad_last: &EmbeddingMatrix,
) -> Result<MlpGradients> {
    let mut grads = MlpGradients::zeros_like(layers);
    let mut g = grad_last.clone();
    for l in (0..layers.len()).rev() {
        // Input to layer l: x for the first layer, relu(pre_acts[l-1]) after.
        let h_prev = if l == 0 {
            x.clone()
        } else {
            let mut h = pre_acts[l - 1].clone();
            for v in h.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            h
        };
        grads.layers[l].weight = matmul(&g.transpose(), &h_prev)?;
        for j in 0..layers[l].out_dim() {
            let mut acc = 0.0;
            for i in 0..g.rows() {
                acc += g.get(i, j);
            }
            grads.layers[l].bias[j] = acc;
        }
        if l > 0 {
            let mut g_prev = matmul(&g, &layers[l].weight)?;
            for (v, a) in g_prev.data_mut().iter_mut().zip(pre_acts[l - 1].data()) {
                if *a <= 0.0 {
                    *v = 0.0;
                }
            }
            g = g_prev;
        }
    }
    Ok(grads)
}

/// Forward-pass state retained for the backward pass. Tied to the parameter
/// version it was produced under; using it after a parameter update is a
/// state error.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: EmbeddingMatrix,
    pre_acts: Vec<EmbeddingMatrix>,
    norms: Vec<f64>,
    zero_flags: Vec<bool>,
}

impl ForwardCache {
    pub fn zero_flags(&self) -> &[bool] {
        &self.zero_flags
    }
}

/// Student encoder: MLP with a unit-normalized output row. Rows whose
/// pre-normalization output is (near-)zero are left as-is and flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    layers: Vec<Linear>,
    version: u64,
}

impl StudentNet {
    pub fn new_random(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dims",
                message: "input and output dims must be >= 1".into(),
            });
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| Linear::random(w[1], w[0], rng))
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter {
                name: "layers",
                message: "need at least one layer".into(),
            });
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "StudentNet::from_layers",
                    left: w[0].weight.shape(),
                    right: w[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.out_dim(), l.in_dim()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Deterministic forward pass; the cache retains pre-activations for
    /// `backward`.
    pub fn forward(&self, inputs: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, ForwardCache)> {
        let pre_acts = affine_forward(&self.layers, inputs)?;
        let last = pre_acts.last().unwrap();
        let mut z = last.clone();
        let mut norms = Vec::with_capacity(z.rows());
        let mut zero_flags = Vec::with_capacity(z.rows());
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < ZERO_NORM_EPS {
                norms.push(norm);
                zero_flags.push(true);
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
            zero_flags.push(false);
        }
        let cache = ForwardCache {
            version: self.version,
            input: inputs.clone(),
            pre_acts,
            norms,
            zero_flags,
        };
        Ok((z, cache))
    }

    /// Raw forward pass without the output normalization (test hook; the
    /// cache is still usable with `backward_unnormalized`).
    pub fn forward_unnormalized(
        &self,
        inputs: &EmbeddingMatrix,
    ) -> Result<(EmbeddingMatrix, ForwardCache)> {
        let pre_acts = affine_forward(&self.layers, inputs)?;
        let last = pre_acts.last().unwrap().clone();
        let rows = last.rows();
        let cache = ForwardCache {
            version: self.version,
            input: inputs.clone(),
            pre_acts,
            norms: vec![1.0; rows],
            zero_flags: vec![false; rows],
        };
        Ok((last, cache))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::State(format!(
                "stale forward cache: built at parameter version {}, net is at {}",
                cache.version, self.version
            )));
        }
        Ok(())
    }

    /// Exact parameter gradients for `grad_z` (gradient of the loss w.r.t.
    /// the normalized output), including the normalization Jacobian
    /// `(I - z z^T) / ||h||` per row. Degenerate (flagged) rows pass the
    /// gradient through unchanged.
    pub fn backward(&self, cache: &ForwardCache, grad_z: &EmbeddingMatrix) -> Result<MlpGradients> {
        self.check_cache(cache)?;
        let last = cache.pre_acts.last().unwrap();
        if grad_z.shape() != last.shape() {
            return Err(Error::ShapeMismatch {
                op: "StudentNet::backward",
                left: grad_z.shape(),
                right: last.shape(),
            });
        }
        let mut grad_h = grad_z.clone();
        for i in 0..grad_h.rows() {
            if cache.zero_flags[i] {
                continue;
            }
            let norm = cache.norms[i];
            let h = last.row(i);
            let g = grad_h.row_mut(i);
            // z = h / ||h||; J^T g = (g - (g . z) z) / ||h||.
            let mut g_dot_z = 0.0;
            for (gv, hv) in g.iter().zip(h.iter()) {
                g_dot_z += gv * (hv / norm);
            }
            for (gv, hv) in g.iter_mut().zip(h.iter()) {
                *gv = (*gv - g_dot_z * (hv / norm)) / norm;
            }
        }
        affine_backward(&self.layers, &cache.input, &cache.pre_acts, &grad_h)
    }

    /// Backward for the unnormalized output (test hook paired with
    /// `forward_unnormalized`).
    pub fn backward_unnormalized(
        &self,
        cache: &ForwardCache,
        grad_out: &EmbeddingMatrix,
    ) -> Result<MlpGradients> {
        self.check_cache(cache)?;
        affine_backward(&self.layers, &cache.input, &cache.pre_acts, grad_out)
    }

    /// All parameters flattened in layer order (weights row-major, then bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Replaces all parameters from a flat vector (inverse of
    /// `flatten_params`). Bumps the parameter version.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::CountMismatch {
                what: "parameter",
                left: flat.len(),
                right: self.param_count(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w_len = l.weight.rows() * l.weight.cols();
            l.weight
                .data_mut()
                .copy_from_slice(&flat[off..off + w_len]);
            off += w_len;
            let b_len = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + b_len]);
            off += b_len;
        }
        self.version += 1;
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Linear> {
        &mut self.layers
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// Learnable map from text-anchor dimension to embedding dimension. Output is
/// raw (not normalized): anchor geometry, including norm drift, is observable.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    layers: Vec<Linear>,
}

impl ProjectionHead {
    /// Single affine layer by default; `hidden_dims` inserts rectified hidden
    /// layers. Weights are N(0, 1/out_dim) so projected unit anchors start
    /// near unit norm.
    pub fn new_random(
        in_dim: usize,
        hidden_dims: &[usize],
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dims",
                message: "projection dims must be >= 1".into(),
            });
        }
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (1.0 / w[1] as f64).sqrt();
                let data = (0..w[1] * w[0]).map(|_| std * normal(rng)).collect();
                Linear {
                    weight: EmbeddingMatrix::new(w[1], w[0], data).expect("nonzero dims"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter {
                name: "layers",
                message: "need at least one layer".into(),
            });
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.out_dim(), l.in_dim()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    /// Projects anchor rows (C x in_dim) to C x out_dim; returns the
    /// pre-activations needed for `backward_rows`.
    pub fn forward_rows(
        &self,
        anchors: &EmbeddingMatrix,
    ) -> Result<(EmbeddingMatrix, Vec<EmbeddingMatrix>)> {
        let pre_acts = affine_forward(&self.layers, anchors)?;
        Ok((pre_acts.last().unwrap().clone(), pre_acts))
    }

    /// Parameter gradients given the gradient w.r.t. the projected anchors.
    pub fn backward_rows(
        &self,
        anchors: &EmbeddingMatrix,
        pre_acts: &[EmbeddingMatrix],
        grad_out: &EmbeddingMatrix,
    ) -> Result<MlpGradients> {
        affine_backward(&self.layers, anchors, pre_acts, grad_out)
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::CountMismatch {
                what: "parameter",
                left: flat.len(),
                right: self.param_count(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w_len = l.weight.rows() * l.weight.cols();
            l.weight
                .data_mut()
                .copy_from_slice(&flat[off..off + w_len]);
            off += w_len;
            let b_len = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + b_len]);
            off += b_len;
        }
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Linear> {
        &mut self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;
    use crate::rng::{stream_rng, StreamId};

    #[test]
    fn zero_weight_positive_bias_gives_normalized_bias() {
        let layer = Linear::new(
            EmbeddingMatrix::zeros(3, 2),
            vec![3.0, 0.0, 4.0],
        )
        .unwrap();
        let net = StudentNet::from_layers(vec![layer]).unwrap();
        let x = EmbeddingMatrix::from_rows(&[vec![0.3, -0.7], vec![5.0, 2.0]]).unwrap();
        let (z, _) = net.forward(&x).unwrap();
        for i in 0..2 {
            assert_eq!(z.row(i), &[0.6, 0.0, 0.8]);
        }
    }

    #[test]
    fn identity_layer_preserves_unit_input() {
        let eye = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let net =
            StudentNet::from_layers(vec![Linear::new(eye, vec![0.0, 0.0]).unwrap()]).unwrap();
        let x = EmbeddingMatrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let (z, cache) = net.forward(&x).unwrap();
        assert!((z.get(0, 0) - 0.6).abs() <= 1e-15);
        assert!((z.get(0, 1) - 0.8).abs() <= 1e-15);
        assert!(!cache.zero_flags()[0]);
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        let mut rng = stream_rng(17, StreamId::StudentInit);
        let net = StudentNet::new_random(5, &[7], 3, &mut rng).unwrap();
        let x = {
            let data = (0..4 * 5).map(|_| normal(&mut rng)).collect();
            EmbeddingMatrix::new(4, 5, data).unwrap()
        };
        let (z, _) = net.forward(&x).unwrap();

        // Duplicate-path oracle: per-sample, scalar loops only.
        for i in 0..4 {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for (l, layer) in net.layers().iter().enumerate() {
                let mut next = vec![0.0; layer.out_dim()];
                for (o, nv) in next.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for (ii, hv) in h.iter().enumerate() {
                        acc += layer.weight.get(o, ii) * hv;
                    }
                    *nv = acc;
                }
                if l + 1 < net.layers().len() {
                    for v in next.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                h = next;
            }
            let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, hv) in h.iter().enumerate() {
                assert!((z.get(i, j) - hv / norm).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_output_rows_unit_norm() {
        let mut rng = stream_rng(23, StreamId::StudentInit);
        let net = StudentNet::new_random(8, &[16, 8], 4, &mut rng).unwrap();
        let data = (0..16 * 8).map(|_| normal(&mut rng)).collect();
        let x = EmbeddingMatrix::new(16, 8, data).unwrap();
        let (z, cache) = net.forward(&x).unwrap();
        for i in 0..z.rows() {
            if !cache.zero_flags()[i] {
                assert!((z.row_norm(i) - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn backward_zero_gradient_gives_zero_parameter_gradients() {
        let mut rng = stream_rng(29, StreamId::StudentInit);
        let net = StudentNet::new_random(4, &[6], 3, &mut rng).unwrap();
        let data = (0..2 * 4).map(|_| normal(&mut rng)).collect();
        let x = EmbeddingMatrix::new(2, 4, data).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let grads = net
            .backward(&cache, &EmbeddingMatrix::zeros(2, 3))
            .unwrap();
        for g in &grads.layers {
            assert!(g.weight.data().iter().all(|v| *v == 0.0));
            assert!(g.bias.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn backward_unnormalized_sum_loss_is_outer_product_sum() {
        // Single linear layer, loss = sum of pre-normalization outputs:
        // dL/dW[o][i] = sum_b x[b][i], dL/db[o] = B.
        let mut rng = stream_rng(31, StreamId::StudentInit);
        let net = StudentNet::new_random(3, &[], 2, &mut rng).unwrap();
        let x = EmbeddingMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let (out, cache) = net.forward_unnormalized(&x).unwrap();
        let ones = EmbeddingMatrix::new(out.rows(), out.cols(), vec![1.0; 4]).unwrap();
        let grads = net.backward_unnormalized(&cache, &ones).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let want = x.get(0, i) + x.get(1, i);
                assert!((grads.layers[0].weight.get(o, i) - want).abs() <= 1e-12);
            }
            assert!((grads.layers[0].bias[o] - 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(37, StreamId::StudentInit);
        let mut net = StudentNet::new_random(4, &[5], 3, &mut rng).unwrap();
        let data = (0..3 * 4).map(|_| normal(&mut rng)).collect();
        let x = EmbeddingMatrix::new(3, 4, data).unwrap();
        // Loss: sum of squares of the normalized output (smooth in params).
        let loss_of = |net: &StudentNet| -> f64 {
            let (z, _) = net.forward(&x).unwrap();
            z.data().iter().map(|v| v * v * 0.5).sum()
        };
        let (z, cache) = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &z).unwrap();
        let analytic = grads.flatten();
        let params = net.flatten_params();
        let step = 1e-6;
        for (k, want) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[k] += step;
            net.load_flat(&p).unwrap();
            let up = loss_of(&net);
            p[k] -= 2.0 * step;
            net.load_flat(&p).unwrap();
            let down = loss_of(&net);
            let fd = (up - down) / (2.0 * step);
            let scale = want.abs().max(fd.abs()).max(1e-3);
            assert!(
                (want - fd).abs() / scale <= 1e-6,
                "param {k}: analytic {want}, fd {fd}"
            );
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = stream_rng(41, StreamId::StudentInit);
        let mut net = StudentNet::new_random(3, &[], 2, &mut rng).unwrap();
        let x = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let params = net.flatten_params();
        net.load_flat(&params).unwrap(); // bumps version
        let err = net
            .backward(&cache, &EmbeddingMatrix::zeros(1, 2))
            .unwrap_err();
        assert!(err.to_string().contains("stale"), "{err}");
    }

    #[test]
    fn projection_single_layer_has_no_kinks() {
        let mut rng = stream_rng(43, StreamId::ProjectionInit);
        let proj = ProjectionHead::new_random(6, &[], 3, &mut rng).unwrap();
        let raw = EmbeddingMatrix::new(4, 6, (0..24).map(|_| normal(&mut rng)).collect()).unwrap();
        let (anchors, _) = l2_normalize_rows(&raw);
        let (out, pre) = proj.forward_rows(&anchors).unwrap();
        assert_eq!(out.shape(), (4, 3));
        // Linearity: f(2x) = 2 f(x) for zero-bias init.
        let mut doubled = anchors.clone();
        doubled.scale(2.0);
        let (out2, _) = proj.forward_rows(&doubled).unwrap();
        for (a, b) in out.data().iter().zip(out2.data().iter()) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
        assert_eq!(pre.len(), 1);
    }
}
