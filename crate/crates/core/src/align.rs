//! Concept-alignment training at desk scale.
//!
//! A frozen linear text encoder and a linear image encoder with a low-rank
//! adapter (`W + (α/r)·B·A`) are trained with the symmetric image/text
//! contrastive loss. Only the adapter matrices of the image side move.
//! Gradients are analytic and checked against central finite differences in
//! the test suite.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingVector, MIN_NORM};
use crate::error::{Error, Result};

pub const DEFAULT_LORA_RANK: usize = 6;
pub const DEFAULT_LORA_ALPHA: f64 = 6.0;
pub const DEFAULT_LORA_DROPOUT: f64 = 0.8;
pub const DEFAULT_LEARNING_RATE: f64 = 4e-4;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_EPOCHS: usize = 1;

/// How embeddings are compared inside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// Embeddings are L2-normalized before the dot product.
    #[default]
    Cosine,
    /// Raw dot products of the linear projections.
    RawDot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub temperature: f64,
    pub similarity: SimilarityMode,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            similarity: SimilarityMode::Cosine,
        }
    }
}

impl LossOptions {
    fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Linear encoder with a low-rank adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `out_dim × in_dim`
    pub base_weight: Array2<f64>,
    /// `r × in_dim`
    pub lora_a: Array2<f64>,
    /// `out_dim × r`
    pub lora_b: Array2<f64>,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl EncoderParams {
    /// Adapter initialized the usual way: `A` Gaussian with variance
    /// `1/in_dim`, `B` zero, so the effective weight starts at the base.
    pub fn with_adapter<R: Rng + ?Sized>(
        base_weight: Array2<f64>,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config("lora alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config("lora dropout must lie in [0, 1)".into()));
        }
        let (out_dim, in_dim) = base_weight.dim();
        let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("finite std");
        let lora_a = Array2::from_shape_fn((rank, in_dim), |_| normal.sample(rng));
        Ok(Self {
            base_weight,
            lora_a,
            lora_b: Array2::zeros((out_dim, rank)),
            lora_alpha: alpha,
            lora_dropout: dropout,
        })
    }

    /// Gaussian base weight with variance `1/in_dim`.
    pub fn random_base<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Array2<f64> {
        let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("finite std");
        Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(rng))
    }

    pub fn rank(&self) -> usize {
        self.lora_a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.base_weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_weight.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank() as f64
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        &self.base_weight + &(self.lora_b.dot(&self.lora_a) * self.scaling())
    }

    fn validate(&self) -> Result<()> {
        let (out_dim, in_dim) = self.base_weight.dim();
        let r = self.lora_a.nrows();
        if r == 0 || self.lora_a.ncols() != in_dim || self.lora_b.dim() != (out_dim, r) {
            return Err(Error::Config(format!(
                "adapter shapes A {:?} / B {:?} do not fit base {:?}",
                self.lora_a.dim(),
                self.lora_b.dim(),
                self.base_weight.dim()
            )));
        }
        Ok(())
    }

    /// Projects the rows of `inputs`. `lora_inputs` replaces `inputs` on the
    /// adapter path (the dropout-masked copy during training).
    fn project(&self, inputs: ArrayView2<f64>, lora_inputs: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let hidden = lora_inputs.dot(&self.lora_a.t());
        let out = inputs.dot(&self.base_weight.t()) + hidden.dot(&self.lora_b.t()) * self.scaling();
        (out, hidden)
    }
}

/// Pair of encoders. The text side is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub image: EncoderParams,
    pub text: EncoderParams,
}

impl DualEncoder {
    /// Random base weights for both towers and a fresh image adapter.
    pub fn init(
        image_in: usize,
        text_in: usize,
        embed_dim: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_base = EncoderParams::random_base(embed_dim, image_in, &mut rng);
        let text_base = EncoderParams::random_base(embed_dim, text_in, &mut rng);
        Ok(Self {
            image: EncoderParams::with_adapter(image_base, rank, alpha, dropout, &mut rng)?,
            text: EncoderParams::with_adapter(text_base, rank, alpha, 0.0, &mut rng)?,
        })
    }
}

/// Paired image/text feature rows; row `i` of each side belongs together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub image_inputs: Array2<f64>,
    pub text_inputs: Array2<f64>,
}

impl Batch {
    pub fn new(image_inputs: Array2<f64>, text_inputs: Array2<f64>) -> Result<Self> {
        if image_inputs.nrows() == 0 {
            return Err(Error::Batch("batch is empty".into()));
        }
        if image_inputs.nrows() != text_inputs.nrows() {
            return Err(Error::Batch(format!(
                "{} image rows vs {} text rows",
                image_inputs.nrows(),
                text_inputs.nrows()
            )));
        }
        Ok(Self {
            image_inputs,
            text_inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.image_inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            image_inputs: self.image_inputs.select(Axis(0), rows),
            text_inputs: self.text_inputs.select(Axis(0), rows),
        }
    }
}

/// Eval-mode encoding of a single feature vector.
pub fn encode(params: &EncoderParams, input: &[f64], similarity: SimilarityMode) -> Result<EmbeddingVector> {
    params.validate()?;
    if input.len() != params.in_dim() {
        return Err(Error::Dimension {
            expected: params.in_dim(),
            got: input.len(),
        });
    }
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
    let (u, _) = params.project(x, x);
    let row = finish_rows(u, similarity)?.0;
    EmbeddingVector::from_f64(row.row(0).as_slice().expect("contiguous"))
}

/// Applies the output normalization. Returns the embeddings and the
/// pre-normalization row norms (ones in raw-dot mode).
fn finish_rows(u: Array2<f64>, similarity: SimilarityMode) -> Result<(Array2<f64>, Array1<f64>)> {
    match similarity {
        SimilarityMode::RawDot => {
            let n = u.nrows();
            Ok((u, Array1::ones(n)))
        }
        SimilarityMode::Cosine => {
            let norms = u.map_axis(Axis(1), |r| r.dot(&r).sqrt());
            if norms.iter().any(|&n| n < MIN_NORM) {
                return Err(Error::DegenerateVector);
            }
            let e = &u / &norms.view().insert_axis(Axis(1));
            Ok((e, norms))
        }
    }
}

/// Symmetric contrastive loss over embedding lists.
pub fn contrastive_loss(
    image_embs: &[EmbeddingVector],
    text_embs: &[EmbeddingVector],
    temperature: f64,
) -> Result<f64> {
    let img = stack(image_embs)?;
    let txt = stack(text_embs)?;
    contrastive_loss_matrix(img.view(), txt.view(), temperature)
}

fn stack(embs: &[EmbeddingVector]) -> Result<Array2<f64>> {
    let dim = embs.first().map_or(0, EmbeddingVector::dim);
    let mut m = Array2::zeros((embs.len(), dim));
    for (mut row, e) in m.rows_mut().into_iter().zip(embs) {
        if e.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: e.dim(),
            });
        }
        row.iter_mut()
            .zip(e.values())
            .for_each(|(d, &v)| *d = f64::from(v));
    }
    Ok(m)
}

/// Symmetric contrastive loss over embedding rows (`N × d` each).
pub fn contrastive_loss_matrix(img: ArrayView2<f64>, txt: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    LossOptions {
        temperature,
        similarity: SimilarityMode::Cosine,
    }
    .validate()?;
    check_pair_shapes(img, txt)?;
    let logits = img.dot(&txt.t()) / temperature;
    Ok(loss_and_logit_grad(&logits).0)
}

fn check_pair_shapes(img: ArrayView2<f64>, txt: ArrayView2<f64>) -> Result<()> {
    if img.nrows() == 0 {
        return Err(Error::Batch("batch is empty".into()));
    }
    if img.nrows() != txt.nrows() {
        return Err(Error::Batch(format!(
            "{} image embeddings vs {} text embeddings",
            img.nrows(),
            txt.nrows()
        )));
    }
    if img.ncols() != txt.ncols() {
        return Err(Error::Dimension {
            expected: img.ncols(),
            got: txt.ncols(),
        });
    }
    Ok(())
}

fn logsumexp(v: ArrayView1<f64>) -> f64 {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss and `∂L/∂logits` for a square logit matrix `S[i][j] = e_i·t_j / τ`.
///
/// `∂L/∂S = (P + C − 2I) / 2N` with `P` the row softmax and `C` the column
/// softmax of `S`.
fn loss_and_logit_grad(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let nf = n as f64;
    let row_lse: Vec<f64> = logits.rows().into_iter().map(logsumexp).collect();
    let col_lse: Vec<f64> = logits.columns().into_iter().map(logsumexp).collect();

    let mut image_to_text = 0.0;
    let mut text_to_image = 0.0;
    for i in 0..n {
        image_to_text += row_lse[i] - logits[[i, i]];
        text_to_image += col_lse[i] - logits[[i, i]];
    }
    let loss = 0.5 * (image_to_text / nf + text_to_image / nf);

    let mut grad = Array2::zeros((n, n));
    for ((i, j), g) in grad.indexed_iter_mut() {
        let s = logits[[i, j]];
        let p = (s - row_lse[i]).exp();
        let c = (s - col_lse[j]).exp();
        let delta = if i == j { 2.0 } else { 0.0 };
        *g = (p + c - delta) / (2.0 * nf);
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub lora_a: Array2<f64>,
    pub lora_b: Array2<f64>,
}

impl AdapterGradients {
    pub fn norm(&self) -> f64 {
        (self.lora_a.iter().chain(self.lora_b.iter()).map(|g| g * g).sum::<f64>()).sqrt()
    }
}

fn check_batch(batch: &Batch, enc: &DualEncoder) -> Result<()> {
    enc.image.validate()?;
    enc.text.validate()?;
    if batch.is_empty() || batch.image_inputs.nrows() != batch.text_inputs.nrows() {
        return Err(Error::Batch("image and text rows must match and be non-empty".into()));
    }
    if batch.image_inputs.ncols() != enc.image.in_dim() {
        return Err(Error::Dimension {
            expected: enc.image.in_dim(),
            got: batch.image_inputs.ncols(),
        });
    }
    if batch.text_inputs.ncols() != enc.text.in_dim() {
        return Err(Error::Dimension {
            expected: enc.text.in_dim(),
            got: batch.text_inputs.ncols(),
        });
    }
    if enc.image.out_dim() != enc.text.out_dim() {
        return Err(Error::Dimension {
            expected: enc.text.out_dim(),
            got: enc.image.out_dim(),
        });
    }
    Ok(())
}

/// Eval-mode loss of a batch (no dropout).
pub fn batch_loss(batch: &Batch, enc: &DualEncoder, opts: LossOptions) -> Result<f64> {
    Ok(forward_backward(batch, enc, opts, None, false)?.0)
}

/// Loss and analytic adapter gradients in eval mode (no dropout).
pub fn loss_gradients(batch: &Batch, enc: &DualEncoder, opts: LossOptions) -> Result<(f64, AdapterGradients)> {
    let (loss, grads) = forward_backward(batch, enc, opts, None, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

fn forward_backward(
    batch: &Batch,
    enc: &DualEncoder,
    opts: LossOptions,
    lora_inputs: Option<&Array2<f64>>,
    want_grad: bool,
) -> Result<(f64, Option<AdapterGradients>)> {
    opts.validate()?;
    check_batch(batch, enc)?;
    let x = batch.image_inputs.view();
    let x_lora = lora_inputs.map_or(x, |m| m.view());

    let (u, hidden) = enc.image.project(x, x_lora);
    let (e, norms) = finish_rows(u, opts.similarity)?;
    let tx = batch.text_inputs.view();
    let (t, _) = finish_rows(enc.text.project(tx, tx).0, opts.similarity)?;

    let logits = e.dot(&t.t()) / opts.temperature;
    let (loss, g_logits) = loss_and_logit_grad(&logits);
    if !want_grad {
        return Ok((loss, None));
    }

    let g_e = g_logits.dot(&t) / opts.temperature;
    let g_u = match opts.similarity {
        SimilarityMode::RawDot => g_e,
        SimilarityMode::Cosine => {
            // d(u/‖u‖) = (I − e eᵀ) du / ‖u‖
            let mut g_u = g_e;
            for ((mut gu, er), &nrm) in g_u.rows_mut().into_iter().zip(e.rows()).zip(&norms) {
                let proj = gu.dot(&er);
                gu.scaled_add(-proj, &er);
                gu /= nrm;
            }
            g_u
        }
    };
    let scale = enc.image.scaling();
    let lora_b = g_u.t().dot(&hidden) * scale;
    let lora_a = g_u.dot(&enc.image.lora_b).t().dot(&x_lora) * scale;
    Ok((loss, Some(AdapterGradients { lora_a, lora_b })))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossOptions,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            loss: LossOptions::default(),
            optimizer: Optimizer::Sgd,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: DualEncoder,
    /// Training-mode loss of each step, measured before its update.
    pub loss_trace: Vec<f64>,
}

struct AdamState {
    step: i32,
    m: [Array2<f64>; 2],
    v: [Array2<f64>; 2],
}

/// Mini-batch training of the image adapter. Each epoch visits the dataset
/// in a fresh seeded shuffle; dropout masks on the adapter input come from
/// the same generator.
pub fn train(dataset: &Batch, encoder: DualEncoder, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Batch("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config("learning rate must be non-negative".into()));
    }
    cfg.loss.validate()?;
    check_batch(dataset, &encoder)?;

    let mut enc = encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dropout = enc.image.lora_dropout;
    let keep = 1.0 - dropout;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::new();
    let mut adam = AdamState {
        step: 0,
        m: [Array2::zeros(enc.image.lora_a.dim()), Array2::zeros(enc.image.lora_b.dim())],
        v: [Array2::zeros(enc.image.lora_a.dim()), Array2::zeros(enc.image.lora_b.dim())],
    };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.select(chunk);
            let masked = (dropout > 0.0).then(|| {
                batch
                    .image_inputs
                    .mapv(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 })
            });
            let (loss, grads) = forward_backward(&batch, &enc, cfg.loss, masked.as_ref(), true)?;
            let grads = grads.expect("requested gradients");
            trace.push(loss);
            apply_update(&mut enc.image, grads, cfg, &mut adam);
        }
    }
    Ok(TrainOutcome {
        encoder: enc,
        loss_trace: trace,
    })
}

fn apply_update(params: &mut EncoderParams, grads: AdapterGradients, cfg: &TrainConfig, adam: &mut AdamState) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            params.lora_a.scaled_add(-cfg.lr, &grads.lora_a);
            params.lora_b.scaled_add(-cfg.lr, &grads.lora_b);
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.step += 1;
            let bc1 = 1.0 - beta1.powi(adam.step);
            let bc2 = 1.0 - beta2.powi(adam.step);
            let targets = [&mut params.lora_a, &mut params.lora_b];
            let grads = [grads.lora_a, grads.lora_b];
            for (k, (p, g)) in targets.into_iter().zip(grads).enumerate() {
                let m = &mut adam.m[k];
                let v = &mut adam.v[k];
                m.zip_mut_with(&g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                v.zip_mut_with(&g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    *p -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
            }
        }
    }
}

/// Mean cosine similarity of aligned pairs `(e_i, t_i)` minus the mean over
/// all misaligned pairs `(e_i, t_j)`, `i ≠ j`, in eval mode.
pub fn alignment_margin(dataset: &Batch, enc: &DualEncoder) -> Result<f64> {
    check_batch(dataset, enc)?;
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Batch("margin needs at least two pairs".into()));
    }
    let x = dataset.image_inputs.view();
    let tx = dataset.text_inputs.view();
    let (e, _) = finish_rows(enc.image.project(x, x).0, SimilarityMode::Cosine)?;
    let (t, _) = finish_rows(enc.text.project(tx, tx).0, SimilarityMode::Cosine)?;
    let sims = e.dot(&t.t());
    let diag: f64 = sims.diag().sum();
    let off = sims.sum() - diag;
    Ok(diag / n as f64 - off / (n * (n - 1)) as f64)
}

/// Rows `[start, end)` of a dataset. Convenience for holding out data.
pub fn slice_rows(dataset: &Batch, start: usize, end: usize) -> Result<Batch> {
    Batch::new(
        dataset.image_inputs.slice(s![start..end, ..]).to_owned(),
        dataset.text_inputs.slice(s![start..end, ..]).to_owned(),
    )
}
