//! Feature-fusion math: row softmax, layer normalization, cross-attention
//! with residual + dropout, temperature-scaled similarity logits, and the
//! symmetric contrastive objective with its analytic gradient.
//!
//! Everything here is a plain forward computation over `f64` values; there is
//! no autodiff. The analytic gradient of the contrastive loss is provided so
//! the objective can be verified against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix dimensions must be positive")]
    EmptyMatrix,
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("degenerate normalization: vector length {0} < 2")]
    DegenerateNormalization(usize),
    #[error("embeddings not unit-norm: row {row} has norm {norm}")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
}

/// Dense row-major matrix of feature vectors: `rows` vectors of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, FusionError> {
        if rows == 0 || dim == 0 {
            return Err(FusionError::EmptyMatrix);
        }
        if data.len() != rows * dim {
            return Err(FusionError::ShapeMismatch(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite);
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, FusionError> {
        let n = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FusionError::ShapeMismatch(
                "rows have unequal widths".to_string(),
            ));
        }
        Self::from_vec(n, dim, rows.into_iter().flatten().collect())
    }

    pub fn zeros(rows: usize, dim: usize) -> Result<Self, FusionError> {
        Self::from_vec(rows, dim, vec![0.0; rows * dim])
    }

    pub fn identity(n: usize) -> Result<Self, FusionError> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transposed(&self) -> FeatureMatrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.dim {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        FeatureMatrix {
            rows: self.dim,
            dim: self.rows,
            data,
        }
    }

    pub fn matmul(&self, other: &FeatureMatrix) -> Result<FeatureMatrix, FusionError> {
        if self.dim != other.rows {
            return Err(FusionError::ShapeMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.dim, other.rows, other.dim
            )));
        }
        let mut data = vec![0.0; self.rows * other.dim];
        for i in 0..self.rows {
            for k in 0..self.dim {
                let a = self.get(i, k);
                let out = &mut data[i * other.dim..(i + 1) * other.dim];
                let rhs = other.row(k);
                for (o, &b) in out.iter_mut().zip(rhs) {
                    *o += a * b;
                }
            }
        }
        FeatureMatrix::from_vec(self.rows, other.dim, data)
    }

    fn scale(mut self, factor: f64) -> FeatureMatrix {
        for v in &mut self.data {
            *v *= factor;
        }
        self
    }
}

/// Row-wise softmax with max-subtraction for numeric stability.
///
/// Each output row sums to 1 and every entry lies in (0, 1].
pub fn softmax_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.rows {
        let row = m.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    FeatureMatrix {
        rows: m.rows,
        dim: m.dim,
        data,
    }
}

/// Gain/bias/epsilon for layer normalization. `identity(dim)` gives the
/// affine-free form (gamma 1, beta 0, epsilon 1e-5).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, epsilon: f64) -> Result<Self, FusionError> {
        if gamma.len() != beta.len() {
            return Err(FusionError::ShapeMismatch(format!(
                "gamma length {} != beta length {}",
                gamma.len(),
                beta.len()
            )));
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(FusionError::InvalidEpsilon(epsilon));
        }
        Ok(Self { gamma, beta, epsilon })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            epsilon: Self::DEFAULT_EPSILON,
        }
    }
}

/// Normalize a vector to zero mean and unit population variance, then apply
/// the affine gain/bias.
pub fn layer_norm(v: &[f64], p: &LayerNormParams) -> Result<Vec<f64>, FusionError> {
    if v.len() < 2 {
        return Err(FusionError::DegenerateNormalization(v.len()));
    }
    if v.len() != p.gamma.len() {
        return Err(FusionError::ShapeMismatch(format!(
            "vector length {} != layer-norm width {}",
            v.len(),
            p.gamma.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = (var + p.epsilon).sqrt();
    Ok(v.iter()
        .zip(p.gamma.iter().zip(&p.beta))
        .map(|(x, (g, b))| g * (x - mean) / denom + b)
        .collect())
}

/// Learnable projections for one attention direction plus the dropout
/// configuration. All three projections share the input width and the
/// output width `d_k`; the value-path output must additionally match the
/// query feature width for the residual connection to type-check.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: FeatureMatrix,
    pub w_k: FeatureMatrix,
    pub w_v: FeatureMatrix,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

impl AttentionParams {
    pub fn new(
        w_q: FeatureMatrix,
        w_k: FeatureMatrix,
        w_v: FeatureMatrix,
        dropout_rate: f64,
        rng_seed: u64,
    ) -> Result<Self, FusionError> {
        if w_q.rows() != w_k.rows() || w_q.rows() != w_v.rows() {
            return Err(FusionError::ShapeMismatch(
                "projection input widths differ".to_string(),
            ));
        }
        if w_q.dim() != w_k.dim() || w_q.dim() != w_v.dim() {
            return Err(FusionError::ShapeMismatch(
                "projection output widths differ".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(FusionError::InvalidDropout(dropout_rate));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            dropout_rate,
            rng_seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.dim()
    }
}

/// Intermediates of one cross-attention pass, exposed for verification.
#[derive(Debug, Clone)]
pub struct CrossAttentionOutput {
    /// Row-stochastic attention weights, query rows by context rows.
    pub attention: FeatureMatrix,
    /// Projected context values V.
    pub values: FeatureMatrix,
    /// Attention-weighted context `Z = A V`, before dropout and residual.
    pub fused: FeatureMatrix,
    /// `LayerNorm(Dropout(Z) + F_query)` applied row-wise.
    pub output: FeatureMatrix,
}

pub fn cross_attention(
    f_query: &FeatureMatrix,
    f_context: &FeatureMatrix,
    ap: &AttentionParams,
    lp: &LayerNormParams,
    train_mode: bool,
) -> Result<FeatureMatrix, FusionError> {
    cross_attention_detailed(f_query, f_context, ap, lp, train_mode).map(|o| o.output)
}

/// Full cross-attention pass returning all intermediates.
///
/// Computes `Q = F_q W_q`, `K = F_c W_k`, `V = F_c W_v`,
/// `A = softmax(Q K^T / sqrt(d_k))`, `Z = A V`, and the final
/// `LayerNorm(Dropout(Z) + F_q)`. Dropout is the identity unless
/// `train_mode` is set; in train mode it is the seeded inverted form.
pub fn cross_attention_detailed(
    f_query: &FeatureMatrix,
    f_context: &FeatureMatrix,
    ap: &AttentionParams,
    lp: &LayerNormParams,
    train_mode: bool,
) -> Result<CrossAttentionOutput, FusionError> {
    if f_query.dim() != ap.input_dim() || f_context.dim() != ap.input_dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "feature width {} / {} vs projection input width {}",
            f_query.dim(),
            f_context.dim(),
            ap.input_dim()
        )));
    }
    if ap.w_v.dim() != f_query.dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "value width {} != query feature width {} required by the residual",
            ap.w_v.dim(),
            f_query.dim()
        )));
    }
    let q = f_query.matmul(&ap.w_q)?;
    let k = f_context.matmul(&ap.w_k)?;
    let values = f_context.matmul(&ap.w_v)?;
    let scale = 1.0 / (ap.head_dim() as f64).sqrt();
    let attention = softmax_rows(&q.matmul(&k.transposed())?.scale(scale));
    let fused = attention.matmul(&values)?;

    let dropped = if train_mode {
        apply_dropout(&fused, ap.dropout_rate, ap.rng_seed)
    } else {
        fused.clone()
    };

    let mut out = Vec::with_capacity(dropped.data.len());
    for i in 0..dropped.rows() {
        let residual: Vec<f64> = dropped
            .row(i)
            .iter()
            .zip(f_query.row(i))
            .map(|(z, f)| z + f)
            .collect();
        out.extend(layer_norm(&residual, lp)?);
    }
    let output = FeatureMatrix {
        rows: f_query.rows(),
        dim: f_query.dim(),
        data: out,
    };
    Ok(CrossAttentionOutput {
        attention,
        values,
        fused,
        output,
    })
}

/// Inverted dropout: entries survive with probability `1 - rate` and are
/// scaled by `1 / (1 - rate)`. Deterministic for a fixed seed.
fn apply_dropout(m: &FeatureMatrix, rate: f64, seed: u64) -> FeatureMatrix {
    if rate == 0.0 {
        return m.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - rate);
    let data = m
        .data
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                v * keep_scale
            }
        })
        .collect();
    FeatureMatrix {
        rows: m.rows,
        dim: m.dim,
        data,
    }
}

/// Square matrix of similarity logits between a batch of image embeddings
/// and the batch of location embeddings, plus the temperature used to
/// produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    logits: FeatureMatrix,
    temperature: f64,
}

/// Temperature used for similarity logits throughout the pipeline.
pub const DEFAULT_TEMPERATURE: f64 = 3.99;

impl SimilarityMatrix {
    pub fn new(logits: FeatureMatrix, temperature: f64) -> Result<Self, FusionError> {
        if logits.rows() != logits.dim() {
            return Err(FusionError::NonSquare {
                rows: logits.rows(),
                cols: logits.dim(),
            });
        }
        if !temperature.is_finite() {
            return Err(FusionError::NonFinite);
        }
        Ok(Self { logits, temperature })
    }

    pub fn n(&self) -> usize {
        self.logits.rows()
    }

    pub fn logits(&self) -> &FeatureMatrix {
        &self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.logits.get(i, j)
    }

    /// The reverse-direction matrix: `S^T` with the same temperature.
    pub fn transposed(&self) -> SimilarityMatrix {
        SimilarityMatrix {
            logits: self.logits.transposed(),
            temperature: self.temperature,
        }
    }
}

fn check_unit_rows(m: &FeatureMatrix, tol: f64) -> Result<(), FusionError> {
    for i in 0..m.rows() {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > tol {
            return Err(FusionError::NotUnitNorm { row: i, norm });
        }
    }
    Ok(())
}

/// Similarity logits `S[i][j] = exp(temperature) * <img_i, loc_j>` between
/// unit-norm embedding batches of equal size.
pub fn similarity_logits(
    img_emb: &FeatureMatrix,
    loc_emb: &FeatureMatrix,
    temperature: f64,
) -> Result<SimilarityMatrix, FusionError> {
    if img_emb.rows() != loc_emb.rows() || img_emb.dim() != loc_emb.dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            img_emb.rows(),
            img_emb.dim(),
            loc_emb.rows(),
            loc_emb.dim()
        )));
    }
    check_unit_rows(img_emb, 1e-6)?;
    check_unit_rows(loc_emb, 1e-6)?;
    let logits = img_emb.matmul(&loc_emb.transposed())?.scale(temperature.exp());
    SimilarityMatrix::new(logits, temperature)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of each row's softmax against the diagonal target:
/// `L = -(1/n) sum_i log softmax(S_i)[i]`.
pub fn contrastive_loss(s: &SimilarityMatrix) -> f64 {
    let n = s.n();
    let mut total = 0.0;
    for i in 0..n {
        let row = s.logits.row(i);
        total += log_sum_exp(row) - row[i];
    }
    total / n as f64
}

/// Symmetric objective over both modality pairs: the mean of the four
/// directional terms, where each reverse direction is the loss of the
/// transposed matrix.
pub fn total_loss(
    s_rgb_gps: &SimilarityMatrix,
    s_seg_gps: &SimilarityMatrix,
) -> Result<f64, FusionError> {
    if s_rgb_gps.n() != s_seg_gps.n() {
        return Err(FusionError::ShapeMismatch(format!(
            "batch sizes differ: {} vs {}",
            s_rgb_gps.n(),
            s_seg_gps.n()
        )));
    }
    Ok(0.25
        * (contrastive_loss(s_rgb_gps)
            + contrastive_loss(&s_rgb_gps.transposed())
            + contrastive_loss(s_seg_gps)
            + contrastive_loss(&s_seg_gps.transposed())))
}

/// Analytic gradient of [`contrastive_loss`] with respect to the logits:
/// `(softmax_rows(S) - I) / n`.
pub fn contrastive_loss_grad(s: &SimilarityMatrix) -> FeatureMatrix {
    let n = s.n();
    let mut grad = softmax_rows(&s.logits);
    let scale = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..n {
            let v = grad.get(i, j) - if i == j { 1.0 } else { 0.0 };
            grad.data[i * n + j] = v * scale;
        }
    }
    grad
}
