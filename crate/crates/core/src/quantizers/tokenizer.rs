use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{AdamW, AdamWConfig, DenseArray, ParamStore, RngStream, Tape};
use crate::quantizers::{sq_dist, Codebook, RvqCodebook};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub ssl_codebook_size: usize,
    pub ssl_dim: usize,
    pub rvq_layers: usize,
    pub rvq_codebook_size: usize,
    pub rvq_dim: usize,
    pub commit_weight: f32,
    pub ema_decay: f32,
    pub dead_after: u32,
    pub projection_lr: f64,
    pub steps: usize,
    pub batch_frames: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            ssl_codebook_size: 256,
            ssl_dim: 8,
            rvq_layers: 4,
            rvq_codebook_size: 64,
            rvq_dim: 8,
            commit_weight: 0.25,
            ema_decay: 0.99,
            dead_after: 200,
            projection_lr: 1e-2,
            steps: 1000,
            batch_frames: 512,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.ssl_codebook_size >= 1 && self.rvq_codebook_size >= 1, Argument, "codebooks need K >= 1");
        ensure!(self.ssl_dim >= 1 && self.rvq_dim >= 1, Argument, "code dimension must be positive");
        ensure!(self.rvq_layers >= 1, Argument, "RVQ needs at least one layer");
        ensure!(self.ema_decay > 0.0 && self.ema_decay < 1.0, Argument, "ema_decay must lie in (0, 1)");
        ensure!(self.batch_frames >= 1, Argument, "batch_frames must be positive");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TokenizerStats {
    /// Mean squared feature-space reconstruction error per frame.
    pub recon_loss: f32,
    pub commit_loss: f32,
}

/// Learned linear map between feature space and code space
/// (`down: [d_feat × d]`, `up: [d × d_feat]`), trained through the
/// quantizer with a straight-through estimator.
#[derive(Clone, Debug)]
pub struct Projection {
    pub params: ParamStore<f32>,
    pub opt: AdamW<f32>,
}

impl Projection {
    pub fn new(d_feat: usize, d: usize, lr: f64, rng: &RngStream) -> Result<Self> {
        let mut r = rng.fork("projection");
        let s = 1.0 / libm::sqrt(d_feat as f64);
        let down: Vec<f32> = (0..d_feat * d).map(|_| (s * r.normal()) as f32).collect();
        let mut up = alloc::vec![0.0f32; d * d_feat];
        for i in 0..d_feat {
            for j in 0..d {
                up[j * d_feat + i] = down[i * d + j];
            }
        }
        let mut params = ParamStore::new();
        params.push("down", DenseArray::from_vec(&[d_feat, d], down)?, false);
        params.push("up", DenseArray::from_vec(&[d, d_feat], up)?, false);
        let opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, warmup_steps: 0, ..Default::default() }, &params);
        Ok(Self { params, opt })
    }

    pub fn feature_dim(&self) -> usize {
        self.params.value(0).rows()
    }

    pub fn code_dim(&self) -> usize {
        self.params.value(0).cols()
    }

    fn apply(x: &DenseArray<f32>, w: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        ensure!(x.cols() == w.rows(), Shape, "projection input width {} vs {}", x.cols(), w.rows());
        let (n, k, m) = (x.rows(), w.rows(), w.cols());
        let mut out = DenseArray::zeros(&[n, m]);
        crate::numerics::kernels::gemm_nn(x.data(), w.data(), out.data_mut(), n, k, m);
        Ok(out)
    }

    pub fn encode(&self, x: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        Self::apply(x, self.params.value(0))
    }

    pub fn decode(&self, z: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        Self::apply(z, self.params.value(1))
    }

    /// One joint step: reconstruction through straight-through codes plus the
    /// commitment term, then an Adam update of both maps.
    pub fn fit_step(
        &mut self,
        x: &DenseArray<f32>,
        quantize: impl FnOnce(&DenseArray<f32>) -> Result<DenseArray<f32>>,
        commit_weight: f32,
    ) -> Result<TokenizerStats> {
        let n = x.rows();
        ensure!(n > 0, Argument, "empty training batch");
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let xv = tape.leaf(x, false);
        let z = tape.matmul(xv, vars[0])?;
        let z_val = tape.to_array(z);
        let q = quantize(&z_val)?;
        ensure!(q.shape() == z_val.shape(), Shape, "quantizer changed the code shape");
        let offset: Vec<f32> = q.data().iter().zip(z_val.data()).map(|(a, b)| a - b).collect();
        let off = tape.leaf_vec(n, q.cols(), offset, false);
        let st = tape.add(z, off)?;
        let xhat = tape.matmul(st, vars[1])?;
        let rec = tape.squared_error(xhat, x.data())?;
        let com = tape.squared_error(z, q.data())?;
        let inv_n = 1.0 / n as f32;
        let rec_mean = tape.scale(rec, inv_n);
        let com_mean = tape.scale(com, commit_weight * inv_n);
        let total = tape.add(rec_mean, com_mean)?;
        let stats = TokenizerStats { recon_loss: tape.scalar(rec_mean), commit_loss: tape.scalar(com_mean) };
        let mut g = tape.backward(total);
        let grads = alloc::vec![g.take(vars[0]), g.take(vars[1])];
        self.opt.step(&mut self.params, &grads)?;
        Ok(stats)
    }
}

fn mean_sq_error(a: &DenseArray<f32>, b: &DenseArray<f32>) -> f32 {
    let n = a.rows().max(1);
    let total: f64 = (0..a.rows()).map(|i| sq_dist(a.row(i), b.row(i)) as f64).sum();
    (total / n as f64) as f32
}

/// Features → single-codebook SSL tokens.
#[derive(Clone, Debug)]
pub struct SslTokenizer {
    pub projection: Projection,
    pub codebook: Codebook,
    pub commit_weight: f32,
}

impl SslTokenizer {
    pub fn init(cfg: &QuantizerConfig, first_batch: &DenseArray<f32>, rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let projection = Projection::new(first_batch.cols(), cfg.ssl_dim, cfg.projection_lr, &rng.fork("ssl"))?;
        let z = projection.encode(first_batch)?;
        let mut codebook = Codebook::from_frames(&z, cfg.ssl_codebook_size, &mut rng.fork("ssl-codebook"))?;
        codebook.decay = cfg.ema_decay;
        codebook.dead_after = cfg.dead_after;
        Ok(Self { projection, codebook, commit_weight: cfg.commit_weight })
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook.size()
    }

    pub fn tokens(&self, features: &DenseArray<f32>) -> Result<Vec<u32>> {
        self.codebook.quantize(&self.projection.encode(features)?)
    }

    /// Token ids back to feature space.
    pub fn decode_tokens(&self, ids: &[u32]) -> Result<DenseArray<f32>> {
        self.projection.decode(&self.codebook.dequantize(ids)?)
    }

    pub fn reconstruction_error(&self, features: &DenseArray<f32>) -> Result<f32> {
        let rec = self.decode_tokens(&self.tokens(features)?)?;
        Ok(mean_sq_error(features, &rec))
    }

    pub fn train_step(&mut self, batch: &DenseArray<f32>, rng: &mut RngStream) -> Result<TokenizerStats> {
        let z = self.projection.encode(batch)?;
        let ids = self.codebook.quantize(&z)?;
        let cb = &self.codebook;
        let stats = self.projection.fit_step(batch, |_| cb.dequantize(&ids), self.commit_weight)?;
        self.codebook.apply_ema(&z, &ids, self.commit_weight, rng)?;
        Ok(stats)
    }
}

/// Features → `L` layers of residual-VQ acoustic tokens.
#[derive(Clone, Debug)]
pub struct AcousticTokenizer {
    pub projection: Projection,
    pub rvq: RvqCodebook,
    pub commit_weight: f32,
}

impl AcousticTokenizer {
    pub fn init(cfg: &QuantizerConfig, first_batch: &DenseArray<f32>, rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let projection = Projection::new(first_batch.cols(), cfg.rvq_dim, cfg.projection_lr, &rng.fork("rvq"))?;
        let mut r = projection.encode(first_batch)?;
        let mut layers = Vec::with_capacity(cfg.rvq_layers);
        for l in 0..cfg.rvq_layers {
            let mut cb = Codebook::from_frames(&r, cfg.rvq_codebook_size, &mut rng.fork_index("rvq-layer", l as u64))?;
            cb.decay = cfg.ema_decay;
            cb.dead_after = cfg.dead_after;
            let ids = cb.quantize(&r)?;
            for (i, &id) in ids.iter().enumerate() {
                let code = cb.code(id).to_vec();
                for (v, c) in r.row_mut(i).iter_mut().zip(code) {
                    *v -= c;
                }
            }
            layers.push(cb);
        }
        Ok(Self { projection, rvq: RvqCodebook::new(layers)?, commit_weight: cfg.commit_weight })
    }

    pub fn depth(&self) -> usize {
        self.rvq.depth()
    }

    pub fn layer_vocab(&self) -> usize {
        self.rvq.layers[0].size()
    }

    pub fn tokens(&self, features: &DenseArray<f32>) -> Result<Vec<Vec<u32>>> {
        self.rvq.encode(&self.projection.encode(features)?)
    }

    pub fn decode_tokens(&self, ids: &[Vec<u32>]) -> Result<DenseArray<f32>> {
        self.projection.decode(&self.rvq.decode(ids)?)
    }

    /// Mean code-space error using only the first `ℓ` layers, for `ℓ = 1..=L`.
    pub fn code_error_by_depth(&self, features: &DenseArray<f32>) -> Result<Vec<f32>> {
        let z = self.projection.encode(features)?;
        let ids = self.rvq.encode(&z)?;
        (1..=self.depth()).map(|d| Ok(mean_sq_error(&z, &self.rvq.decode_depth(&ids, d)?))).collect()
    }

    pub fn reconstruction_error(&self, features: &DenseArray<f32>) -> Result<f32> {
        let rec = self.decode_tokens(&self.tokens(features)?)?;
        Ok(mean_sq_error(features, &rec))
    }

    pub fn train_step(&mut self, batch: &DenseArray<f32>, rng: &mut RngStream) -> Result<TokenizerStats> {
        let z = self.projection.encode(batch)?;
        let rvq = &self.rvq;
        let stats = self.projection.fit_step(batch, |z| rvq.decode(&rvq.encode(z)?), self.commit_weight)?;
        self.rvq.train_step(&z, self.commit_weight, rng)?;
        Ok(stats)
    }
}
