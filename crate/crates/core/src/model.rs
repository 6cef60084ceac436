//! Attention-based multi-scale local CNN over latent feature maps.
//!
//! Every cell is expanded into local regions at several odd scales. Each
//! scale runs through its own branch — valid convolution, ReLU, then two
//! fully-connected layers with batch normalization, ReLU, and dropout — and
//! an attention score against the cell's own latent vector decides how much
//! each scale contributes to the merged representation. A linear head emits
//! half-length approximation coefficients that a fixed low-pass synthesis
//! step expands to a full daily curve, made into a distribution by softplus
//! and normalization. Training minimizes the mean squared KL divergence
//! between mined patterns and predictions with Adam, early stopping on a
//! held-out validation split. All arithmetic is sequential and seeded, so
//! runs are bit-for-bit reproducible.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::copca::LatentMatrix;
use crate::dwt::{dwt_level1, idwt_lowpass, DemandPattern, WaveletFilters};
use crate::error::{Error, Result};
use crate::grid::{kl_divergence, CellIndex, ProbVector};

/// Numerical floor inside batch-norm denominators.
const BN_EPS: f64 = 1e-5;

/// Latent features laid out on the grid: rows × cols × d′.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeatureTensor {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<f64>,
}

impl LatentFeatureTensor {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<f64>) -> Result<LatentFeatureTensor> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::invalid("feature tensor needs positive dimensions"));
        }
        if values.len() != rows * cols * dim {
            return Err(Error::shape(format!(
                "feature tensor wants {} values for {rows}×{cols}×{dim}, got {}",
                rows * cols * dim,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("feature tensor contains non-finite values"));
        }
        Ok(LatentFeatureTensor { rows, cols, dim, values })
    }

    /// Reshape a latent matrix that covers every cell of a rows×cols grid.
    pub fn from_latents(rows: usize, cols: usize, latents: &LatentMatrix) -> Result<LatentFeatureTensor> {
        if latents.cells.len() != rows * cols {
            return Err(Error::shape(format!(
                "latent matrix covers {} cells, grid has {}",
                latents.cells.len(),
                rows * cols
            )));
        }
        let mut values = Vec::with_capacity(rows * cols * latents.dim);
        for (idx, cell) in latents.cells.iter().enumerate() {
            let expect = CellIndex::new(idx / cols + 1, idx % cols + 1);
            if *cell != expect {
                return Err(Error::shape(format!(
                    "latent matrix row {idx} is cell {cell}, expected {expect}"
                )));
            }
            values.extend_from_slice(latents.row(idx));
        }
        LatentFeatureTensor::new(rows, cols, latents.dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Feature slice of a zero-based position.
    fn at(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.cols + j) * self.dim;
        &self.values[base..base + self.dim]
    }
}

/// A w×w×d′ window around one cell plus the cell's own feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRegion {
    /// Row-major [row][col][feature], zero-padded beyond the grid edge.
    pub tensor: Vec<f64>,
    /// The center cell's features (always equals the middle slice).
    pub center_features: Vec<f64>,
    pub scale: usize,
}

/// Cut the w×w window centered on `cell`, zero-padding outside the grid.
pub fn extract_local_region(f: &LatentFeatureTensor, cell: CellIndex, w: usize) -> Result<LocalRegion> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::invalid(format!("local region scale must be odd, got {w}")));
    }
    if cell.i == 0 || cell.j == 0 || cell.i > f.rows || cell.j > f.cols {
        return Err(Error::invalid(format!(
            "cell {cell} outside the {}×{} grid",
            f.rows, f.cols
        )));
    }
    let (ci, cj) = (cell.i as i64 - 1, cell.j as i64 - 1);
    let r = w as i64 / 2;
    let mut tensor = vec![0.0; w * w * f.dim];
    for dr in -r..=r {
        for dc in -r..=r {
            let (i, j) = (ci + dr, cj + dc);
            if i < 0 || j < 0 || i >= f.rows as i64 || j >= f.cols as i64 {
                continue;
            }
            let base = (((dr + r) as usize * w) + (dc + r) as usize) * f.dim;
            tensor[base..base + f.dim].copy_from_slice(f.at(i as usize, j as usize));
        }
    }
    Ok(LocalRegion { tensor, center_features: f.at(ci as usize, cj as usize).to_vec(), scale: w })
}

/// One training example: regions at every configured scale plus the target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub regions: Vec<LocalRegion>,
    pub target: ProbVector,
}

/// Build training instances for the given cells and targets.
pub fn build_training_instances(
    f: &LatentFeatureTensor,
    targets: &BTreeMap<CellIndex, ProbVector>,
    scales: &[usize],
) -> Result<Vec<TrainingInstance>> {
    targets
        .iter()
        .map(|(&cell, target)| {
            let regions = scales
                .iter()
                .map(|&w| extract_local_region(f, cell, w))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingInstance { regions, target: target.clone() })
        })
        .collect()
}

/// Which way the KL divergence points inside the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(target ‖ prediction) — the default.
    #[default]
    TargetToPrediction,
    PredictionToTarget,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_kernel: usize,
    pub scales: Vec<usize>,
    pub patience: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
    pub validation_fraction: f64,
    /// Convolution filter count per branch.
    pub filters: usize,
    /// Width of the two fully-connected layers.
    pub hidden: usize,
    pub wavelet: String,
    /// ε of the final prediction normalization.
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub kl_direction: KlDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 128,
            dropout: 0.1,
            max_kernel: 5,
            scales: vec![1, 3, 5, 7, 9],
            patience: 50,
            max_epochs: 2000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
            validation_fraction: 0.2,
            filters: 32,
            hidden: 64,
            wavelet: "db2".into(),
            norm_eps: 1e-6,
            bn_momentum: 0.1,
            kl_direction: KlDirection::TargetToPrediction,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&w| w == 0 || w % 2 == 0) {
            return Err(Error::invalid("scales must be a nonempty list of odd sizes"));
        }
        if self.max_kernel == 0 || self.max_kernel % 2 == 0 {
            return Err(Error::invalid("max kernel size must be odd"));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.filters == 0 || self.hidden == 0 {
            return Err(Error::invalid("batch size, filters, and hidden width must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("need at least one epoch"));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must be in [0, 1)"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("Adam betas must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::invalid("epsilons must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::invalid("batch-norm momentum must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Learned scale and shift plus running statistics for one normalized layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// Parameters of one scale branch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BranchParams {
    pub scale: usize,
    pub kernel_size: usize,
    /// [κ][κ][d′][filters] row-major.
    pub conv_kernel: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// [flattened conv output][hidden] row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub bn1: BatchNorm,
    /// [hidden][hidden] row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub bn2: BatchNorm,
}

impl BranchParams {
    /// Side length of the valid-convolution output.
    fn out_side(&self) -> usize {
        self.scale - self.kernel_size + 1
    }

    fn flat_len(&self, filters: usize) -> usize {
        self.out_side() * self.out_side() * filters
    }
}

/// All model parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub d_latent: usize,
    pub filters: usize,
    pub hidden: usize,
    /// Slots per day; the head emits k/2 approximation coefficients.
    pub k: usize,
    pub wavelet: String,
    pub branches: Vec<BranchParams>,
    /// Attention weight matrix, [d′][hidden] row-major.
    pub attention: Vec<f64>,
    /// Output head, [hidden][k/2] row-major.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl ModelParams {
    /// Randomly initialize for the configured scale set.
    pub fn init(cfg: &TrainConfig, d_latent: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
        cfg.validate()?;
        if d_latent == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        let filters = WaveletFilters::by_name(&cfg.wavelet)?;
        if k == 0 || k % 2 != 0 || k < filters.taps() {
            return Err(Error::invalid(format!(
                "slot count {k} must be even and at least the {} filter taps",
                filters.taps()
            )));
        }
        let normal = |n: usize, std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| standard_normal(rng) * std).collect()
        };
        let (c, q) = (cfg.filters, cfg.hidden);
        let branches = cfg
            .scales
            .iter()
            .map(|&w| {
                let kappa = w.min(cfg.max_kernel);
                let out = w - kappa + 1;
                let flat = out * out * c;
                BranchParams {
                    scale: w,
                    kernel_size: kappa,
                    conv_kernel: normal(kappa * kappa * d_latent * c, (2.0 / (kappa * kappa * d_latent) as f64).sqrt(), rng),
                    conv_bias: vec![0.0; c],
                    w1: normal(flat * q, (2.0 / flat as f64).sqrt(), rng),
                    b1: vec![0.0; q],
                    bn1: BatchNorm::new(q),
                    w2: normal(q * q, (2.0 / q as f64).sqrt(), rng),
                    b2: vec![0.0; q],
                    bn2: BatchNorm::new(q),
                }
            })
            .collect();
        Ok(ModelParams {
            d_latent,
            filters: c,
            hidden: q,
            k,
            wavelet: cfg.wavelet.clone(),
            branches,
            attention: normal(d_latent * q, (1.0 / (d_latent as f64)).sqrt(), rng),
            w_out: normal(q * (k / 2), (1.0 / q as f64).sqrt(), rng),
            b_out: vec![0.0; k / 2],
        })
    }

    pub fn scales(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.scale).collect()
    }

    /// Same shapes, every learnable entry (and running stat) zeroed.
    fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for block in z.learnable_blocks_mut() {
            block.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut z.branches {
            b.bn1.running_mean.iter_mut().for_each(|v| *v = 0.0);
            b.bn1.running_var.iter_mut().for_each(|v| *v = 0.0);
            b.bn2.running_mean.iter_mut().for_each(|v| *v = 0.0);
            b.bn2.running_var.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Learnable tensors in a fixed order (running stats excluded).
    pub fn learnable_blocks(&self) -> Vec<&Vec<f64>> {
        let mut blocks = Vec::new();
        for b in &self.branches {
            blocks.extend([
                &b.conv_kernel,
                &b.conv_bias,
                &b.w1,
                &b.b1,
                &b.bn1.gamma,
                &b.bn1.beta,
                &b.w2,
                &b.b2,
                &b.bn2.gamma,
                &b.bn2.beta,
            ]);
        }
        blocks.extend([&self.attention, &self.w_out, &self.b_out]);
        blocks
    }

    /// Mutable view of the same blocks, in the same order.
    pub fn learnable_blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut blocks = Vec::new();
        for b in &mut self.branches {
            blocks.extend([
                &mut b.conv_kernel,
                &mut b.conv_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.bn1.gamma,
                &mut b.bn1.beta,
                &mut b.w2,
                &mut b.b2,
                &mut b.bn2.gamma,
                &mut b.bn2.beta,
            ]);
        }
        blocks.extend([&mut self.attention, &mut self.w_out, &mut self.b_out]);
        blocks
    }

    /// Names matching `learnable_blocks` order, for diagnostics.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            for part in
                ["conv_kernel", "conv_bias", "w1", "b1", "bn1.gamma", "bn1.beta", "w2", "b2", "bn2.gamma", "bn2.beta"]
            {
                names.push(format!("branch{i}[w{}].{part}", b.scale));
            }
        }
        names.extend(["attention".into(), "w_out".into(), "b_out".into()]);
        names
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; two uniforms per draw keeps the stream simple to reason
    // about for reproducibility.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pre-drawn dropout keep/scale factors for one training batch.
///
/// Factors are 0 (dropped) or 1/(1−p); drawing order is per branch, then
/// per instance: the fc1 mask, the fc2 mask, then the attention-score mask.
#[derive(Debug, Clone)]
pub struct DropoutPlan {
    /// [branch][instance][hidden]
    fc1: Vec<Vec<Vec<f64>>>,
    fc2: Vec<Vec<Vec<f64>>>,
    /// [branch][instance]
    score: Vec<Vec<f64>>,
}

impl DropoutPlan {
    pub fn draw(p: f64, n_branches: usize, batch: usize, hidden: usize, rng: &mut ChaCha8Rng) -> DropoutPlan {
        let factor = |rng: &mut ChaCha8Rng| {
            if p > 0.0 && rng.random::<f64>() < p {
                0.0
            } else if p > 0.0 {
                1.0 / (1.0 - p)
            } else {
                1.0
            }
        };
        let mut fc1 = Vec::with_capacity(n_branches);
        let mut fc2 = Vec::with_capacity(n_branches);
        let mut score = Vec::with_capacity(n_branches);
        for _ in 0..n_branches {
            fc1.push((0..batch).map(|_| (0..hidden).map(|_| factor(rng)).collect()).collect());
            fc2.push((0..batch).map(|_| (0..hidden).map(|_| factor(rng)).collect()).collect());
            score.push((0..batch).map(|_| factor(rng)).collect());
        }
        DropoutPlan { fc1, fc2, score }
    }
}

/// Forward-pass mode: eval uses running statistics and no dropout.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a DropoutPlan),
}

/// Batch statistics and normalized values of one batch-norm application.
#[derive(Debug, Clone)]
struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    /// [instance][feature]
    xhat: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct BranchCache {
    /// Pre-ReLU convolution outputs, [instance][position·filters].
    conv_pre: Vec<Vec<f64>>,
    /// Flattened post-ReLU conv outputs (fc1 inputs).
    flat: Vec<Vec<f64>>,
    bn1: Option<BnCache>,
    /// Post-BN pre-ReLU fc1 activations.
    y1: Vec<Vec<f64>>,
    /// Post-ReLU post-dropout fc1 outputs (fc2 inputs).
    z1: Vec<Vec<f64>>,
    bn2: Option<BnCache>,
    y2: Vec<Vec<f64>>,
    /// Branch outputs Z_i2.
    z2: Vec<Vec<f64>>,
}

/// Everything produced by one forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    branch: Vec<BranchCache>,
    /// Attention projections W′ᵀ·I_g, [instance][hidden].
    a: Vec<Vec<f64>>,
    /// Post-dropout attention scores, [instance][branch].
    scores: Vec<Vec<f64>>,
    /// [instance][branch]
    pub attentions: Vec<Vec<f64>>,
    /// Merged representations, [instance][hidden].
    h: Vec<Vec<f64>>,
    /// Low-pass reconstructions (length k).
    r: Vec<Vec<f64>>,
    /// Normalization sums Σ(softplus + ε).
    ssum: Vec<f64>,
    pub preds: Vec<ProbVector>,
    trained: bool,
}

fn batch_norm_train(u: &[Vec<f64>], bn: &BatchNorm) -> (BnCache, Vec<Vec<f64>>) {
    let (b, q) = (u.len(), bn.gamma.len());
    let mut mean = vec![0.0; q];
    for row in u {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; q];
    for row in u {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= b as f64);
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(b);
    let mut out = Vec::with_capacity(b);
    for row in u {
        let xh: Vec<f64> = row
            .iter()
            .zip(&mean)
            .zip(&inv_std)
            .map(|((&x, &m), &s)| (x - m) * s)
            .collect();
        out.push(xh.iter().zip(&bn.gamma).zip(&bn.beta).map(|((&x, &g), &be)| g * x + be).collect());
        xhat.push(xh);
    }
    (BnCache { mean, var, inv_std, xhat }, out)
}

fn batch_norm_eval(u: &[f64], bn: &BatchNorm) -> Vec<f64> {
    u.iter()
        .enumerate()
        .map(|(j, &x)| {
            bn.gamma[j] * (x - bn.running_mean[j]) / (bn.running_var[j] + BN_EPS).sqrt() + bn.beta[j]
        })
        .collect()
}

fn check_regions(p: &ModelParams, regions: &[LocalRegion]) -> Result<()> {
    if regions.len() != p.branches.len() {
        return Err(Error::shape(format!(
            "instance has {} regions for {} branches",
            regions.len(),
            p.branches.len()
        )));
    }
    for (b, r) in p.branches.iter().zip(regions) {
        if r.scale != b.scale {
            return Err(Error::shape(format!(
                "region of scale {} fed to the w={} branch",
                r.scale, b.scale
            )));
        }
        if r.tensor.len() != r.scale * r.scale * p.d_latent {
            return Err(Error::shape(format!(
                "region tensor of scale {} has {} values, expected {}",
                r.scale,
                r.tensor.len(),
                r.scale * r.scale * p.d_latent
            )));
        }
        if r.center_features.len() != p.d_latent {
            return Err(Error::shape(format!(
                "center features have length {}, expected {}",
                r.center_features.len(),
                p.d_latent
            )));
        }
    }
    Ok(())
}

/// Run the network over a batch of region sets.
pub fn forward_batch(p: &ModelParams, batch: &[&[LocalRegion]], mode: ForwardMode<'_>, norm_eps: f64) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::invalid("forward pass needs at least one instance"));
    }
    for regions in batch {
        check_regions(p, regions)?;
    }
    let wavelet = WaveletFilters::by_name(&p.wavelet)?;
    let (bsz, c, q, d) = (batch.len(), p.filters, p.hidden, p.d_latent);
    let train = matches!(mode, ForwardMode::Train(_));
    if let ForwardMode::Train(plan) = mode {
        if plan.fc1.len() != p.branches.len()
            || plan.fc1.iter().any(|m| m.len() != bsz || m.iter().any(|r| r.len() != q))
        {
            return Err(Error::shape("dropout plan does not match batch dimensions"));
        }
    }

    let mut branch_caches = Vec::with_capacity(p.branches.len());
    for (bi, bp) in p.branches.iter().enumerate() {
        let (w, kappa, out_side) = (bp.scale, bp.kernel_size, bp.out_side());
        let flat_len = bp.flat_len(c);
        // Convolution, ReLU, flatten for the whole batch.
        let mut conv_pre = Vec::with_capacity(bsz);
        let mut flat = Vec::with_capacity(bsz);
        for regions in batch {
            let t = &regions[bi].tensor;
            let mut pre = vec![0.0; flat_len];
            for ro in 0..out_side {
                for co in 0..out_side {
                    let pos = (ro * out_side + co) * c;
                    pre[pos..pos + c].copy_from_slice(&bp.conv_bias);
                    for r in 0..kappa {
                        for s in 0..kappa {
                            let t_base = ((ro + r) * w + co + s) * d;
                            let k_base = (r * kappa + s) * d * c;
                            for f in 0..d {
                                let x = t[t_base + f];
                                let kk = &bp.conv_kernel[k_base + f * c..k_base + f * c + c];
                                for (o, &kv) in kk.iter().enumerate() {
                                    pre[pos + o] += kv * x;
                                }
                            }
                        }
                    }
                }
            }
            flat.push(pre.iter().map(|&v| v.max(0.0)).collect::<Vec<f64>>());
            conv_pre.push(pre);
        }
        // FC1 → BN → ReLU → dropout.
        let u1: Vec<Vec<f64>> = flat.iter().map(|x| affine(x, &bp.w1, &bp.b1, q)).collect();
        let (bn1, y1) = match mode {
            ForwardMode::Train(_) => {
                let (cache, y) = batch_norm_train(&u1, &bp.bn1);
                (Some(cache), y)
            }
            ForwardMode::Eval => (None, u1.iter().map(|u| batch_norm_eval(u, &bp.bn1)).collect()),
        };
        let z1: Vec<Vec<f64>> = y1
            .iter()
            .enumerate()
            .map(|(n, y)| {
                y.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let kept = v.max(0.0);
                        match mode {
                            ForwardMode::Train(plan) => kept * plan.fc1[bi][n][j],
                            ForwardMode::Eval => kept,
                        }
                    })
                    .collect()
            })
            .collect();
        // FC2 → BN → ReLU → dropout.
        let u2: Vec<Vec<f64>> = z1.iter().map(|x| affine(x, &bp.w2, &bp.b2, q)).collect();
        let (bn2, y2) = match mode {
            ForwardMode::Train(_) => {
                let (cache, y) = batch_norm_train(&u2, &bp.bn2);
                (Some(cache), y)
            }
            ForwardMode::Eval => (None, u2.iter().map(|u| batch_norm_eval(u, &bp.bn2)).collect()),
        };
        let z2: Vec<Vec<f64>> = y2
            .iter()
            .enumerate()
            .map(|(n, y)| {
                y.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let kept = v.max(0.0);
                        match mode {
                            ForwardMode::Train(plan) => kept * plan.fc2[bi][n][j],
                            ForwardMode::Eval => kept,
                        }
                    })
                    .collect()
            })
            .collect();
        branch_caches.push(BranchCache { conv_pre, flat, bn1, y1, z1, bn2, y2, z2 });
    }

    // Attention merge and output head per instance.
    let k2 = p.k / 2;
    let mut a_all = Vec::with_capacity(bsz);
    let mut scores_all = Vec::with_capacity(bsz);
    let mut alphas_all = Vec::with_capacity(bsz);
    let mut h_all = Vec::with_capacity(bsz);
    let mut r_all = Vec::with_capacity(bsz);
    let mut ssum_all = Vec::with_capacity(bsz);
    let mut preds = Vec::with_capacity(bsz);
    for (n, regions) in batch.iter().enumerate() {
        let ig = &regions[0].center_features;
        // a = W′ᵀ·I_g, shared by every branch score.
        let mut a = vec![0.0; q];
        for (f, &x) in ig.iter().enumerate() {
            for (j, av) in a.iter_mut().enumerate() {
                *av += x * p.attention[f * q + j];
            }
        }
        let mut scores: Vec<f64> = branch_caches
            .iter()
            .map(|bc| bc.z2[n].iter().zip(&a).map(|(&z, &av)| z * av).sum())
            .collect();
        if let ForwardMode::Train(plan) = mode {
            for (bi, s) in scores.iter_mut().enumerate() {
                *s *= plan.score[bi][n];
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let esum: f64 = exps.iter().sum();
        let alphas: Vec<f64> = exps.iter().map(|&e| e / esum).collect();
        let mut h = vec![0.0; q];
        for (bi, &al) in alphas.iter().enumerate() {
            for (hv, &z) in h.iter_mut().zip(&branch_caches[bi].z2[n]) {
                *hv += al * z;
            }
        }
        let o = affine(&h, &p.w_out, &p.b_out, k2);
        let (r, _sp, ssum, pred) = head_chain(&o, &wavelet, norm_eps)?;
        a_all.push(a);
        scores_all.push(scores);
        alphas_all.push(alphas);
        h_all.push(h);
        r_all.push(r);
        ssum_all.push(ssum);
        preds.push(pred);
    }
    Ok(BatchForward {
        branch: branch_caches,
        a: a_all,
        scores: scores_all,
        attentions: alphas_all,
        h: h_all,
        r: r_all,
        ssum: ssum_all,
        preds,
        trained: train,
    })
}

/// The fixed chain below the head: low-pass synthesis, softplus, and
/// ε-normalization.
fn head_chain(o: &[f64], wavelet: &WaveletFilters, norm_eps: f64) -> Result<(Vec<f64>, Vec<f64>, f64, ProbVector)> {
    let r = idwt_lowpass(o, wavelet);
    let sp: Vec<f64> = r.iter().map(|&v| softplus(v)).collect();
    let ssum: f64 = sp.iter().map(|&v| v + norm_eps).sum();
    let pred = ProbVector::from_nonneg(&sp, norm_eps)?;
    Ok((r, sp, ssum, pred))
}

/// Decode k/2 approximation coefficients into a daily pattern, exactly as
/// the network head does. Shared by the regression baseline.
pub fn decode_head(coeffs: &[f64], wavelet: &WaveletFilters, norm_eps: f64) -> Result<ProbVector> {
    Ok(head_chain(coeffs, wavelet, norm_eps)?.3)
}

/// x (len in) × w ([in][out] row-major) + b → len out.
fn affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for (i, &xv) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yv, &wv) in y.iter_mut().zip(row) {
            *yv += xv * wv;
        }
    }
    y
}

/// Mean over the batch of squared KL(target ‖ prediction).
pub fn klmse_loss(predictions: &[ProbVector], targets: &[ProbVector]) -> Result<f64> {
    klmse_directed(predictions, targets, KlDirection::TargetToPrediction)
}

/// [`klmse_loss`] with an explicit divergence direction.
pub fn klmse_directed(predictions: &[ProbVector], targets: &[ProbVector], dir: KlDirection) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut sum = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        let kl = match dir {
            KlDirection::TargetToPrediction => kl_divergence(t, p)?,
            KlDirection::PredictionToTarget => kl_divergence(p, t)?,
        };
        sum += kl * kl;
    }
    Ok(sum / predictions.len() as f64)
}

/// Exact gradients of the batch KLMSE loss for every learnable tensor.
///
/// `batch` must be the same region sets the forward pass saw.
pub fn backward(
    p: &ModelParams,
    fwd: &BatchForward,
    batch: &[&[LocalRegion]],
    targets: &[&ProbVector],
    dir: KlDirection,
) -> Result<ModelParams> {
    if !fwd.trained {
        return Err(Error::invalid("backward needs a train-mode forward pass"));
    }
    let bsz = batch.len();
    if fwd.preds.len() != bsz || targets.len() != bsz {
        return Err(Error::shape(format!(
            "forward cached {} instances, got {} regions and {} targets",
            fwd.preds.len(),
            bsz,
            targets.len()
        )));
    }
    let wavelet = WaveletFilters::by_name(&p.wavelet)?;
    let (c, q, d, k2) = (p.filters, p.hidden, p.d_latent, p.k / 2);
    let mut g = p.zeros_like();

    // Per-branch upstream gradients on Z_i2, filled by the head/attention
    // chain below, then pushed through each branch jointly (batch norm
    // couples the batch).
    let mut dz2: Vec<Vec<Vec<f64>>> = p.branches.iter().map(|_| vec![vec![0.0; q]; bsz]).collect();
    let mut da_all: Vec<Vec<f64>> = Vec::with_capacity(bsz);

    for n in 0..bsz {
        let pred = fwd.preds[n].values();
        let t = targets[n].values();
        if t.len() != p.k {
            return Err(Error::shape(format!("target {n} has length {}, expected {}", t.len(), p.k)));
        }
        let kl = match dir {
            KlDirection::TargetToPrediction => kl_divergence(targets[n], &fwd.preds[n])?,
            KlDirection::PredictionToTarget => kl_divergence(&fwd.preds[n], targets[n])?,
        };
        // dL/dpred for L = mean_b KL².
        let scale = 2.0 * kl / bsz as f64;
        let dpred: Vec<f64> = match dir {
            KlDirection::TargetToPrediction => {
                pred.iter().zip(t).map(|(&pv, &tv)| scale * (-tv / pv)).collect()
            }
            KlDirection::PredictionToTarget => pred
                .iter()
                .zip(t)
                .map(|(&pv, &tv)| scale * ((pv / tv).ln() + 1.0))
                .collect(),
        };
        // Through the ε-normalization: pred_j = (sp_j + ε)/S.
        let s = fwd.ssum[n];
        let dot: f64 = dpred.iter().zip(pred).map(|(&dp, &pv)| dp * pv).sum();
        let dsp: Vec<f64> = dpred.iter().map(|&dp| (dp - dot) / s).collect();
        // Softplus.
        let dr: Vec<f64> = dsp.iter().zip(&fwd.r[n]).map(|(&ds, &rv)| ds * sigmoid(rv)).collect();
        // Adjoint of the low-pass synthesis = the low-pass analysis band.
        let (do_, _) = dwt_level1(&dr, &wavelet)?;
        // Output head.
        for (j, &hv) in fwd.h[n].iter().enumerate() {
            for (m, &dov) in do_.iter().enumerate() {
                g.w_out[j * k2 + m] += hv * dov;
            }
        }
        for (gb, &dov) in g.b_out.iter_mut().zip(&do_) {
            *gb += dov;
        }
        let dh: Vec<f64> = (0..q)
            .map(|j| do_.iter().enumerate().map(|(m, &dov)| dov * p.w_out[j * k2 + m]).sum())
            .collect();
        // Merge h = Σ α_i z2_i.
        let alphas = &fwd.attentions[n];
        let dalpha: Vec<f64> = (0..p.branches.len())
            .map(|bi| fwd.branch[bi].z2[n].iter().zip(&dh).map(|(&z, &dv)| z * dv).sum())
            .collect();
        for (bi, &al) in alphas.iter().enumerate() {
            for (dz, &dv) in dz2[bi][n].iter_mut().zip(&dh) {
                *dz += al * dv;
            }
        }
        // Softmax over (possibly dropped) scores.
        let wsum: f64 = alphas.iter().zip(&dalpha).map(|(&a, &da)| a * da).sum();
        let dscore_tilde: Vec<f64> = alphas.iter().zip(&dalpha).map(|(&a, &da)| a * (da - wsum)).collect();
        // Undo the score dropout scaling: s̃_i = s_i · factor_i, where the
        // factor is recoverable from cached pre/post values only when the
        // score survived; reconstruct from the stored post-dropout score and
        // the raw dot product instead.
        let a_vec = &fwd.a[n];
        let mut da = vec![0.0; q];
        for (bi, bc) in fwd.branch.iter().enumerate() {
            let raw: f64 = bc.z2[n].iter().zip(a_vec).map(|(&z, &av)| z * av).sum();
            let factor = if raw == 0.0 {
                // 0 · factor is 0 either way; the gradient path keeps the
                // kept-scale factor, which is irrelevant at exactly zero.
                0.0
            } else {
                fwd.scores[n][bi] / raw
            };
            let ds = dscore_tilde[bi] * factor;
            for (dz, &av) in dz2[bi][n].iter_mut().zip(a_vec) {
                *dz += ds * av;
            }
            for (dav, &z) in da.iter_mut().zip(&bc.z2[n]) {
                *dav += ds * z;
            }
        }
        da_all.push(da);
    }

    // Attention matrix: dW′ = Σ_n I_g(n) ⊗ da(n).
    for (n, regions) in batch.iter().enumerate() {
        let ig = &regions[0].center_features;
        for (f, &x) in ig.iter().enumerate() {
            for (j, &dav) in da_all[n].iter().enumerate() {
                g.attention[f * q + j] += x * dav;
            }
        }
    }

    // Push each branch's dz2 back to its parameters.
    for (bi, bp) in p.branches.iter().enumerate() {
        let bc = &fwd.branch[bi];
        let plan_like = |post: &Vec<Vec<f64>>, pre: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            // Recover the ReLU+dropout factor post/pre (0 where dropped or
            // clipped); safe because pre==0 ⇒ post==0.
            post.iter()
                .zip(pre)
                .map(|(po, pr)| {
                    po.iter()
                        .zip(pr)
                        .map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 })
                        .collect()
                })
                .collect()
        };
        // dz2 → through dropout+ReLU → dy2.
        let fac2 = plan_like(&bc.z2, &bc.y2);
        let dy2: Vec<Vec<f64>> = dz2[bi]
            .iter()
            .zip(&fac2)
            .map(|(dz, f)| dz.iter().zip(f).map(|(&a, &b)| a * b).collect())
            .collect();
        let gb = &mut g.branches[bi];
        let bn2 = bc.bn2.as_ref().ok_or_else(|| Error::invalid("missing batch-norm cache"))?;
        let du2 = bn_backward(&dy2, bn2, &bp.bn2, &mut gb.bn2);
        // FC2.
        let dz1 = linear_backward(&bc.z1, &bp.w2, &du2, &mut gb.w2, &mut gb.b2, q);
        let fac1 = plan_like(&bc.z1, &bc.y1);
        let dy1: Vec<Vec<f64>> = dz1
            .iter()
            .zip(&fac1)
            .map(|(dz, f)| dz.iter().zip(f).map(|(&a, &b)| a * b).collect())
            .collect();
        let bn1 = bc.bn1.as_ref().ok_or_else(|| Error::invalid("missing batch-norm cache"))?;
        let du1 = bn_backward(&dy1, bn1, &bp.bn1, &mut gb.bn1);
        // FC1.
        let dflat = linear_backward(&bc.flat, &bp.w1, &du1, &mut gb.w1, &mut gb.b1, q);
        // Conv ReLU.
        let (w, kappa, out_side) = (bp.scale, bp.kernel_size, bp.out_side());
        for (n, regions) in batch.iter().enumerate() {
            let t = &regions[bi].tensor;
            let dpre: Vec<f64> = dflat[n]
                .iter()
                .zip(&bc.conv_pre[n])
                .map(|(&dv, &pre)| if pre > 0.0 { dv } else { 0.0 })
                .collect();
            for ro in 0..out_side {
                for co in 0..out_side {
                    let pos = (ro * out_side + co) * c;
                    for (o, gb) in g.branches[bi].conv_bias.iter_mut().enumerate() {
                        *gb += dpre[pos + o];
                    }
                    for r in 0..kappa {
                        for s in 0..kappa {
                            let t_base = ((ro + r) * w + co + s) * d;
                            let k_base = (r * kappa + s) * d * c;
                            for f in 0..d {
                                let x = t[t_base + f];
                                let gk = &mut g.branches[bi].conv_kernel[k_base + f * c..k_base + f * c + c];
                                for (o, gkv) in gk.iter_mut().enumerate() {
                                    *gkv += dpre[pos + o] * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Batch-norm backward; accumulates γ/β gradients, returns du.
fn bn_backward(dy: &[Vec<f64>], cache: &BnCache, bn: &BatchNorm, grads: &mut BatchNorm) -> Vec<Vec<f64>> {
    let (b, q) = (dy.len(), bn.gamma.len());
    let mut sum_dy = vec![0.0; q];
    let mut sum_dy_xhat = vec![0.0; q];
    for (row, xh) in dy.iter().zip(&cache.xhat) {
        for j in 0..q {
            sum_dy[j] += row[j];
            sum_dy_xhat[j] += row[j] * xh[j];
        }
    }
    for j in 0..q {
        grads.gamma[j] += sum_dy_xhat[j];
        grads.beta[j] += sum_dy[j];
    }
    dy.iter()
        .zip(&cache.xhat)
        .map(|(row, xh)| {
            (0..q)
                .map(|j| {
                    bn.gamma[j] * cache.inv_std[j] / b as f64
                        * (b as f64 * row[j] - sum_dy[j] - xh[j] * sum_dy_xhat[j])
                })
                .collect()
        })
        .collect()
}

/// Shared dense-layer backward; accumulates weight/bias grads, returns dx.
fn linear_backward(
    x: &[Vec<f64>],
    w: &[f64],
    dy: &[Vec<f64>],
    gw: &mut [f64],
    gb: &mut [f64],
    out: usize,
) -> Vec<Vec<f64>> {
    let mut dx = Vec::with_capacity(x.len());
    for (xr, dyr) in x.iter().zip(dy) {
        for (i, &xv) in xr.iter().enumerate() {
            let row = &mut gw[i * out..(i + 1) * out];
            for (gv, &dv) in row.iter_mut().zip(dyr) {
                *gv += xv * dv;
            }
        }
        for (gv, &dv) in gb.iter_mut().zip(dyr) {
            *gv += dv;
        }
        dx.push(
            (0..xr.len())
                .map(|i| dyr.iter().enumerate().map(|(j, &dv)| dv * w[i * out + j]).sum())
                .collect(),
        );
    }
    dx
}

/// Fold this batch's statistics into the running estimates.
fn update_running_stats(p: &mut ModelParams, fwd: &BatchForward, momentum: f64) {
    let bsz = fwd.preds.len() as f64;
    for (bp, bc) in p.branches.iter_mut().zip(&fwd.branch) {
        for (bn, cache) in [(&mut bp.bn1, &bc.bn1), (&mut bp.bn2, &bc.bn2)] {
            let Some(cache) = cache else { continue };
            // Running variance uses the unbiased estimate when possible.
            let correction = if bsz > 1.0 { bsz / (bsz - 1.0) } else { 1.0 };
            for j in 0..bn.gamma.len() {
                bn.running_mean[j] = (1.0 - momentum) * bn.running_mean[j] + momentum * cache.mean[j];
                bn.running_var[j] =
                    (1.0 - momentum) * bn.running_var[j] + momentum * cache.var[j] * correction;
            }
        }
    }
}

/// Adam optimizer state over the fixed learnable-block order.
struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    fn new(p: &ModelParams) -> AdamState {
        let shapes: Vec<Vec<f64>> = p.learnable_blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        AdamState { t: 0, m: shapes.clone(), v: shapes }
    }

    fn step(&mut self, p: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let gblocks = grads.learnable_blocks();
        for ((block, gb), (m, v)) in
            p.learnable_blocks_mut().into_iter().zip(gblocks).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..block.len() {
                let g = gb[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                block[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_klmse: f64,
    pub val_klmse: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
}

/// Result of a training run: best-validation parameters plus the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRow>,
    pub best_epoch: usize,
    pub best_val_klmse: f64,
}

fn eval_klmse(p: &ModelParams, instances: &[TrainingInstance], idx: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let regions: Vec<&[LocalRegion]> = idx.iter().map(|&i| instances[i].regions.as_slice()).collect();
    let fwd = forward_batch(p, &regions, ForwardMode::Eval, cfg.norm_eps)?;
    let targets: Vec<ProbVector> = idx.iter().map(|&i| instances[i].target.clone()).collect();
    klmse_directed(&fwd.preds, &targets, cfg.kl_direction)
}

/// Train with Adam, mini-batches, and patience-based early stopping.
///
/// The validation split holds `validation_fraction` of the instances; when
/// that rounds down to zero the training set doubles as validation so early
/// stopping still has a signal. Returns the parameters of the best
/// validation epoch. Deterministic for a fixed config and seed.
pub fn train(instances: &[TrainingInstance], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::invalid("training needs at least one instance"));
    }
    let k = instances[0].target.len();
    let d = instances[0].regions.first().map(|r| r.center_features.len()).unwrap_or(0);
    for inst in instances {
        if inst.regions.len() != cfg.scales.len()
            || inst.regions.iter().zip(&cfg.scales).any(|(r, &w)| r.scale != w)
        {
            return Err(Error::shape("instance region scales do not match the configured scale set"));
        }
        if inst.target.len() != k {
            return Err(Error::shape("instances disagree on the slot count"));
        }
        for r in &inst.regions {
            if r.center_features != inst.regions[0].center_features {
                return Err(Error::invalid("regions of one instance must share their center cell"));
            }
            if r.center_features.len() != d || r.tensor.len() != r.scale * r.scale * d {
                return Err(Error::shape("region tensors disagree on the latent dimension"));
            }
            if !r.tensor.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric("region tensor contains non-finite values"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut params = ModelParams::init(cfg, d, k, &mut rng)?;

    let mut idx: Vec<usize> = (0..instances.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = (instances.len() as f64 * cfg.validation_fraction).floor() as usize;
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) = {
        let (v, t) = idx.split_at(n_val);
        if v.is_empty() {
            (t.to_vec(), t.to_vec())
        } else {
            (v.to_vec(), t.to_vec())
        }
    };

    let mut adam = AdamState::new(&params);
    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0usize;
    let started = Instant::now();
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let regions: Vec<&[LocalRegion]> =
                chunk.iter().map(|&i| instances[i].regions.as_slice()).collect();
            let targets: Vec<&ProbVector> = chunk.iter().map(|&i| &instances[i].target).collect();
            let plan =
                DropoutPlan::draw(cfg.dropout, params.branches.len(), chunk.len(), cfg.hidden, &mut rng);
            let fwd = forward_batch(&params, &regions, ForwardMode::Train(&plan), cfg.norm_eps)?;
            let owned: Vec<ProbVector> = targets.iter().map(|&t| t.clone()).collect();
            loss_sum += klmse_directed(&fwd.preds, &owned, cfg.kl_direction)? * chunk.len() as f64;
            let grads = backward(&params, &fwd, &regions, &targets, cfg.kl_direction)?;
            adam.step(&mut params, &grads, cfg);
            update_running_stats(&mut params, &fwd, cfg.bn_momentum);
        }
        let train_klmse = loss_sum / train_idx.len() as f64;
        let val_klmse = eval_klmse(&params, instances, &val_idx, cfg)?;
        log.push(TrainLogRow {
            epoch,
            train_klmse,
            val_klmse,
            lr: cfg.learning_rate,
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
        if val_klmse < best_val {
            best_val = val_klmse;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { params: best, log, best_epoch, best_val_klmse: best_val })
}

/// Eval-mode inference over every cell of a city's feature tensor.
#[derive(Debug, Clone)]
pub struct InferredCity {
    pub patterns: BTreeMap<CellIndex, DemandPattern>,
    /// Attention weights per cell, in branch order.
    pub attention: BTreeMap<CellIndex, Vec<f64>>,
}

pub fn infer_city(p: &ModelParams, f: &LatentFeatureTensor, norm_eps: f64) -> Result<InferredCity> {
    if f.dim() != p.d_latent {
        return Err(Error::shape(format!(
            "feature tensor has d′={}, model expects {}",
            f.dim(),
            p.d_latent
        )));
    }
    let scales = p.scales();
    let mut cells = Vec::new();
    let mut region_sets = Vec::new();
    for i in 1..=f.rows() {
        for j in 1..=f.cols() {
            let cell = CellIndex::new(i, j);
            let regions = scales
                .iter()
                .map(|&w| extract_local_region(f, cell, w))
                .collect::<Result<Vec<_>>>()?;
            cells.push(cell);
            region_sets.push(regions);
        }
    }
    let refs: Vec<&[LocalRegion]> = region_sets.iter().map(|r| r.as_slice()).collect();
    let fwd = forward_batch(p, &refs, ForwardMode::Eval, norm_eps)?;
    let mut patterns = BTreeMap::new();
    let mut attention = BTreeMap::new();
    for ((cell, pred), att) in cells.iter().zip(fwd.preds).zip(fwd.attentions) {
        patterns.insert(*cell, DemandPattern { cell: *cell, pattern: pred, support_days: 0 });
        attention.insert(*cell, att);
    }
    Ok(InferredCity { patterns, attention })
}

/// KLMSE and the per-cell KL distribution over the overlapping cells.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub klmse: f64,
    /// (cell, KL(truth ‖ prediction)) for every evaluated cell.
    pub per_cell: Vec<(CellIndex, f64)>,
    /// Cells present in only one of the two maps.
    pub skipped: usize,
}

pub fn evaluate(
    predicted: &BTreeMap<CellIndex, ProbVector>,
    truth: &BTreeMap<CellIndex, ProbVector>,
) -> Result<EvalReport> {
    let mut per_cell = Vec::new();
    for (cell, t) in truth {
        if let Some(p) = predicted.get(cell) {
            per_cell.push((*cell, kl_divergence(t, p)?));
        }
    }
    if per_cell.is_empty() {
        return Err(Error::invalid("no overlapping cells to evaluate"));
    }
    let skipped = predicted.len() + truth.len() - 2 * per_cell.len();
    let klmse = per_cell.iter().map(|(_, kl)| kl * kl).sum::<f64>() / per_cell.len() as f64;
    Ok(EvalReport { klmse, per_cell, skipped })
}
