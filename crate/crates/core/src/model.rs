//! Per-silo models, the separable composite loss, and hand-derived
//! gradients with respect to one silo's parameter block.
//!
//! A silo model `h_j` maps the silo's feature slice of a sample to an
//! embedding of width `E`. The loss only ever sees the elementwise sum of
//! all silos' embeddings, so a single silo can compute its partial
//! gradient from its own rows plus the summed embeddings of the others.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{Purpose, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    /// One tanh hidden layer of the given width.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiloModelSpec {
    pub silo_index: usize,
    pub input_dim: usize,
    pub embedding_dim: usize,
    pub architecture: Architecture,
}

impl SiloModelSpec {
    pub fn new(silo_index: usize, input_dim: usize, embedding_dim: usize, architecture: Architecture) -> Self {
        Self {
            silo_index,
            input_dim,
            embedding_dim,
            architecture,
        }
    }

    /// Number of scalars in this silo's parameter block.
    pub fn param_len(&self) -> usize {
        let (d, e) = (self.input_dim, self.embedding_dim);
        match self.architecture {
            Architecture::Linear => d * e,
            Architecture::Mlp { hidden: h } => d * h + h + h * e + e,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config(format!("silo {}: input_dim must be >= 1", self.silo_index)));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be >= 1"));
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture {
            return Err(Error::config(format!("silo {}: mlp hidden width must be >= 1", self.silo_index)));
        }
        Ok(())
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, drawn from the
    /// init stream keyed by this silo's index. Layout order matches
    /// [`SiloModelSpec::param_len`]: weights row-major, then biases.
    pub fn init_block(&self, seed: u64) -> ParamBlock {
        let mut s = Stream::new(seed, Purpose::Init, self.silo_index as u64);
        let mut draw = |count: usize, fan_in: usize, out: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            out.extend((0..count).map(|_| s.uniform(-bound, bound)));
        };
        let (d, e) = (self.input_dim, self.embedding_dim);
        let mut values = Vec::with_capacity(self.param_len());
        match self.architecture {
            Architecture::Linear => draw(d * e, d, &mut values),
            Architecture::Mlp { hidden: h } => {
                draw(d * h, d, &mut values);
                draw(h, d, &mut values);
                draw(h * e, h, &mut values);
                draw(e, h, &mut values);
            }
        }
        ParamBlock(values)
    }

    fn check(&self, block: &ParamBlock, rows: &Matrix) -> Result<()> {
        if block.len() != self.param_len() {
            return Err(Error::dim("parameter block", self.param_len(), block.len()));
        }
        if rows.cols() != self.input_dim {
            return Err(Error::dim("silo feature columns", self.input_dim, rows.cols()));
        }
        Ok(())
    }
}

/// A flat parameter vector for one silo (hub copy or client copy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamBlock(pub Vec<f64>);

impl ParamBlock {
    pub fn zeros(len: usize) -> Self {
        ParamBlock(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self -= step * grad`
    pub fn descend(&mut self, step: f64, grad: &[f64]) {
        debug_assert_eq!(self.0.len(), grad.len());
        for (p, g) in self.0.iter_mut().zip(grad) {
            *p -= step * g;
        }
    }

    /// Arithmetic mean in the order given.
    pub fn mean<'a>(blocks: impl IntoIterator<Item = &'a ParamBlock>) -> Option<ParamBlock> {
        let mut iter = blocks.into_iter();
        let first = iter.next()?;
        let mut acc = first.0.clone();
        let mut count = 1usize;
        for b in iter {
            for (a, v) in acc.iter_mut().zip(&b.0) {
                *a += v;
            }
            count += 1;
        }
        let inv = count as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
        Some(ParamBlock(acc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    BinaryCrossEntropyWithLogit,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// 1 for scalar targets, the class count for softmax.
    pub label_arity: usize,
}

impl LossSpec {
    pub fn squared_error() -> Self {
        Self {
            kind: LossKind::SquaredError,
            label_arity: 1,
        }
    }

    pub fn binary_logistic() -> Self {
        Self {
            kind: LossKind::BinaryCrossEntropyWithLogit,
            label_arity: 1,
        }
    }

    pub fn softmax(classes: usize) -> Self {
        Self {
            kind: LossKind::SoftmaxCrossEntropy,
            label_arity: classes,
        }
    }

    /// The embedding width this loss consumes.
    pub fn required_embedding_dim(&self) -> usize {
        match self.kind {
            LossKind::SquaredError | LossKind::BinaryCrossEntropyWithLogit => 1,
            LossKind::SoftmaxCrossEntropy => self.label_arity,
        }
    }

    pub fn validate(&self, embedding_dim: usize) -> Result<()> {
        if self.label_arity == 0 {
            return Err(Error::config("label_arity must be >= 1"));
        }
        let need = self.required_embedding_dim();
        if self.kind != LossKind::SoftmaxCrossEntropy && self.label_arity != 1 {
            return Err(Error::config(format!("{:?} takes scalar labels (label_arity = 1)", self.kind)));
        }
        if embedding_dim != need {
            return Err(Error::config(format!(
                "{:?} needs embedding_dim {need}, got {embedding_dim}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn validate_labels(&self, labels: &[f64]) -> Result<()> {
        for (i, &y) in labels.iter().enumerate() {
            let ok = match self.kind {
                LossKind::SquaredError => y.is_finite(),
                LossKind::BinaryCrossEntropyWithLogit => y == 0.0 || y == 1.0,
                LossKind::SoftmaxCrossEntropy => {
                    y >= 0.0 && y.fract() == 0.0 && (y as usize) < self.label_arity
                }
            };
            if !ok {
                return Err(Error::Dataset(format!("label {y} at sample {i} is invalid for {:?}", self.kind)));
            }
        }
        Ok(())
    }

    /// Per-sample loss of one summed embedding row.
    pub fn sample_loss(&self, z: &[f64], y: f64) -> f64 {
        match self.kind {
            LossKind::SquaredError => {
                let r = z[0] - y;
                r * r
            }
            LossKind::BinaryCrossEntropyWithLogit => {
                let z = z[0];
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            }
            LossKind::SoftmaxCrossEntropy => log_sum_exp(z) - z[y as usize],
        }
    }

    /// d loss / d z for one sample, written into `out`.
    pub fn sample_loss_grad(&self, z: &[f64], y: f64, out: &mut [f64]) {
        match self.kind {
            LossKind::SquaredError => out[0] = 2.0 * (z[0] - y),
            LossKind::BinaryCrossEntropyWithLogit => out[0] = sigmoid(z[0]) - y,
            LossKind::SoftmaxCrossEntropy => {
                let lse = log_sum_exp(z);
                for (o, &zi) in out.iter_mut().zip(z) {
                    *o = (zi - lse).exp();
                }
                out[y as usize] -= 1.0;
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Hidden activations kept for the backward pass.
struct MlpCache {
    hidden: Matrix,
}

/// Start offsets of b1, w2 and b2 in the mlp layout (w1 starts at 0).
fn mlp_offsets(d: usize, h: usize, e: usize) -> (usize, usize, usize) {
    let b1 = d * h;
    let w2 = b1 + h;
    (b1, w2, w2 + h * e)
}

fn forward(spec: &SiloModelSpec, block: &ParamBlock, rows: &Matrix) -> (Matrix, Option<MlpCache>) {
    let (d, e) = (spec.input_dim, spec.embedding_dim);
    let p = block.as_slice();
    let n = rows.rows();
    match spec.architecture {
        Architecture::Linear => {
            let mut out = Matrix::zeros(n, e);
            for i in 0..n {
                let x = rows.row(i);
                let o = out.row_mut(i);
                for (r, &xr) in x.iter().enumerate() {
                    let w = &p[r * e..(r + 1) * e];
                    for (oc, &wc) in o.iter_mut().zip(w) {
                        *oc += xr * wc;
                    }
                }
            }
            (out, None)
        }
        Architecture::Mlp { hidden: h } => {
            let (b1, w2, b2) = mlp_offsets(d, h, e);
            let mut hid = Matrix::zeros(n, h);
            let mut out = Matrix::zeros(n, e);
            for i in 0..n {
                let x = rows.row(i);
                let hrow = hid.row_mut(i);
                hrow.copy_from_slice(&p[b1..b1 + h]);
                for (r, &xr) in x.iter().enumerate() {
                    let w = &p[r * h..(r + 1) * h];
                    for (hc, &wc) in hrow.iter_mut().zip(w) {
                        *hc += xr * wc;
                    }
                }
                hrow.iter_mut().for_each(|v| *v = v.tanh());
                let o = out.row_mut(i);
                o.copy_from_slice(&p[b2..b2 + e]);
                for c in 0..h {
                    let hc = hid.get(i, c);
                    let w = &p[w2 + c * e..w2 + (c + 1) * e];
                    for (oe, &we) in o.iter_mut().zip(w) {
                        *oe += hc * we;
                    }
                }
            }
            (out, Some(MlpCache { hidden: hid }))
        }
    }
}

/// `h_j(block; rows)`: one embedding row per input row.
pub fn embed(spec: &SiloModelSpec, block: &ParamBlock, rows: &Matrix) -> Result<Matrix> {
    spec.check(block, rows)?;
    Ok(forward(spec, block, rows).0)
}

/// Mean loss over the rows of `embedding_sum`.
pub fn composite_loss(embedding_sum: &Matrix, labels: &[f64], loss: &LossSpec) -> Result<f64> {
    check_loss_inputs(embedding_sum, labels, loss)?;
    let n = embedding_sum.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let l = loss.sample_loss(embedding_sum.row(i), y);
        if !l.is_finite() {
            return Err(Error::Numeric { context: "loss", sample: i });
        }
        total += l;
    }
    Ok(total / n as f64)
}

fn check_loss_inputs(z: &Matrix, labels: &[f64], loss: &LossSpec) -> Result<()> {
    if z.rows() != labels.len() {
        return Err(Error::dim("labels", z.rows(), labels.len()));
    }
    if z.cols() != loss.required_embedding_dim() {
        return Err(Error::dim("loss input width", loss.required_embedding_dim(), z.cols()));
    }
    for i in 0..z.rows() {
        if z.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { context: "embedding sum", sample: i });
        }
        if !labels[i].is_finite() {
            return Err(Error::Numeric { context: "label", sample: i });
        }
    }
    Ok(())
}

/// Per-sample loss gradients `d loss / d z` for every row, unscaled.
pub fn loss_grad_rows(z: &Matrix, labels: &[f64], loss: &LossSpec) -> Result<Matrix> {
    check_loss_inputs(z, labels, loss)?;
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    for (i, &y) in labels.iter().enumerate() {
        loss.sample_loss_grad(z.row(i), y, dz.row_mut(i));
    }
    Ok(dz)
}

/// Gradient of the block's parameters given upstream `d loss / d embedding`
/// rows (already scaled as the caller wants). Uses the same layout as the
/// block.
pub fn backprop(spec: &SiloModelSpec, block: &ParamBlock, rows: &Matrix, upstream: &Matrix) -> Result<Vec<f64>> {
    spec.check(block, rows)?;
    if upstream.rows() != rows.rows() || upstream.cols() != spec.embedding_dim {
        return Err(Error::dim("upstream gradient", rows.rows() * spec.embedding_dim, upstream.rows() * upstream.cols()));
    }
    let cache = match spec.architecture {
        Architecture::Linear => None,
        Architecture::Mlp { .. } => forward(spec, block, rows).1,
    };
    Ok(backprop_cached(spec, block, rows, upstream, cache.as_ref()))
}

fn backprop_cached(
    spec: &SiloModelSpec,
    block: &ParamBlock,
    rows: &Matrix,
    dz: &Matrix,
    cache: Option<&MlpCache>,
) -> Vec<f64> {
    let (d, e) = (spec.input_dim, spec.embedding_dim);
    let mut grad = vec![0.0; spec.param_len()];
    match spec.architecture {
        Architecture::Linear => {
            for i in 0..rows.rows() {
                let g = dz.row(i);
                for (r, &xr) in rows.row(i).iter().enumerate() {
                    let out = &mut grad[r * e..(r + 1) * e];
                    for (o, &gc) in out.iter_mut().zip(g) {
                        *o += xr * gc;
                    }
                }
            }
        }
        Architecture::Mlp { hidden: h } => {
            let hid = &cache.expect("mlp cache").hidden;
            let p = block.as_slice();
            let (b1, w2, b2) = mlp_offsets(d, h, e);
            let mut da = vec![0.0; h];
            for i in 0..rows.rows() {
                let g = dz.row(i);
                let hrow = hid.row(i);
                for (c, &hc) in hrow.iter().enumerate() {
                    // output layer
                    let w = &p[w2 + c * e..w2 + (c + 1) * e];
                    let gw2 = &mut grad[w2 + c * e..w2 + (c + 1) * e];
                    let mut dh = 0.0;
                    for k in 0..e {
                        gw2[k] += hc * g[k];
                        dh += g[k] * w[k];
                    }
                    da[c] = dh * (1.0 - hc * hc);
                }
                for k in 0..e {
                    grad[b2 + k] += g[k];
                }
                for c in 0..h {
                    grad[b1 + c] += da[c];
                }
                for (r, &xr) in rows.row(i).iter().enumerate() {
                    let gw1 = &mut grad[r * h..(r + 1) * h];
                    for (o, &dc) in gw1.iter_mut().zip(&da) {
                        *o += xr * dc;
                    }
                }
            }
        }
    }
    grad
}

/// Mean over the rows of the gradient of the loss with respect to this
/// silo's block, holding `other_sum` (the other silos' summed embeddings,
/// possibly stale) fixed. An empty batch yields a zero gradient.
pub fn partial_gradient(
    spec: &SiloModelSpec,
    block: &ParamBlock,
    own_rows: &Matrix,
    other_sum: &Matrix,
    labels: &[f64],
    loss: &LossSpec,
) -> Result<Vec<f64>> {
    spec.check(block, own_rows)?;
    let n = own_rows.rows();
    if other_sum.rows() != n || other_sum.cols() != spec.embedding_dim {
        return Err(Error::dim("other-silo embeddings", n * spec.embedding_dim, other_sum.rows() * other_sum.cols()));
    }
    if labels.len() != n {
        return Err(Error::dim("labels", n, labels.len()));
    }
    if n == 0 {
        return Ok(vec![0.0; spec.param_len()]);
    }
    let (mut z, cache) = forward(spec, block, own_rows);
    z.add_assign(other_sum)?;
    let mut dz = loss_grad_rows(&z, labels, loss)?;
    dz.scale(1.0 / n as f64);
    let grad = backprop_cached(spec, block, own_rows, &dz, cache.as_ref());
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric { context: "partial gradient", sample: pos });
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(d: usize, e: usize) -> SiloModelSpec {
        SiloModelSpec::new(0, d, e, Architecture::Linear)
    }

    #[test]
    fn param_lengths() {
        assert_eq!(linear(3, 2).param_len(), 6);
        let mlp = SiloModelSpec::new(0, 3, 2, Architecture::Mlp { hidden: 4 });
        assert_eq!(mlp.param_len(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(mlp.init_block(1).len(), mlp.param_len());
    }

    #[test]
    fn zero_block_embeds_to_zero() {
        let spec = linear(3, 2);
        let rows = Matrix::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.5, 9.0]]);
        let out = embed(&spec, &ParamBlock::zeros(6), &rows).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_embedding_is_dot_product() {
        let spec = linear(2, 1);
        let out = embed(&spec, &ParamBlock(vec![1.0, 1.0]), &Matrix::from_rows(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(out.as_slice(), &[7.0]);
    }

    #[test]
    fn mlp_forward_matches_scalar_oracle() {
        // tests/oracles/mlp_forward_golden.py: seed 7, silo 1, D=3 H=4 E=2
        let spec = SiloModelSpec::new(1, 3, 2, Architecture::Mlp { hidden: 4 });
        let block = spec.init_block(7);
        let tail = &block.as_slice()[block.len() - 2..];
        assert_eq!(tail, &[-0.0469320349819381, 0.47249135951846444]);
        let out = embed(&spec, &block, &Matrix::from_rows(&[&[0.5, -1.25, 2.0]])).unwrap();
        let expect = [-0.2916467522379358, 0.54215011787052];
        for (g, e) in out.as_slice().iter().zip(expect) {
            assert!((g - e).abs() <= 1e-14, "{g} vs {e}");
        }
    }

    #[test]
    fn embed_rejects_bad_dims() {
        let spec = linear(2, 1);
        let rows = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(embed(&spec, &ParamBlock::zeros(2), &rows), Err(Error::Dimension { .. })));
        let rows = Matrix::from_rows(&[&[1.0, 2.0]]);
        assert!(matches!(embed(&spec, &ParamBlock::zeros(3), &rows), Err(Error::Dimension { .. })));
    }

    #[test]
    fn loss_reference_values() {
        let z = Matrix::from_rows(&[&[0.0]]);
        assert_eq!(composite_loss(&z, &[0.0], &LossSpec::squared_error()).unwrap(), 0.0);
        let bce = composite_loss(&z, &[1.0], &LossSpec::binary_logistic()).unwrap();
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-15);
        let z3 = Matrix::from_rows(&[&[0.0, 0.0, 0.0]]);
        let ce = composite_loss(&z3, &[2.0], &LossSpec::softmax(3)).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_reports_offending_sample() {
        let z = Matrix::from_rows(&[&[0.0], &[f64::NAN]]);
        match composite_loss(&z, &[0.0, 0.0], &LossSpec::squared_error()) {
            Err(Error::Numeric { sample, .. }) => assert_eq!(sample, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let loss = LossSpec::binary_logistic();
        assert!(loss.sample_loss(&[800.0], 1.0).abs() < 1e-300);
        assert!((loss.sample_loss(&[-800.0], 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let spec = linear(2, 1);
        let rows = Matrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let labels = [0.7, -1.1];
        let other = Matrix::from_vec(2, 1, labels.to_vec()).unwrap();
        let g = partial_gradient(&spec, &ParamBlock::zeros(2), &rows, &other, &labels, &LossSpec::squared_error()).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn empty_batch_zero_gradient() {
        let spec = linear(2, 1);
        let g = partial_gradient(
            &spec,
            &ParamBlock(vec![1.0, 2.0]),
            &Matrix::zeros(0, 2),
            &Matrix::zeros(0, 1),
            &[],
            &LossSpec::squared_error(),
        )
        .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn loss_spec_validation() {
        assert!(LossSpec::squared_error().validate(1).is_ok());
        assert!(LossSpec::squared_error().validate(2).is_err());
        assert!(LossSpec::softmax(4).validate(4).is_ok());
        assert!(LossSpec::softmax(4).validate(3).is_err());
        assert!(LossSpec::binary_logistic().validate_labels(&[0.0, 1.0]).is_ok());
        assert!(LossSpec::binary_logistic().validate_labels(&[0.5]).is_err());
        assert!(LossSpec::softmax(3).validate_labels(&[3.0]).is_err());
    }
}
