use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::numerics::{DenseArray, RngStream};
use crate::quantizers::{Codebook, VqStepStats};

/// Residual VQ: layer `ℓ` quantizes what layers `< ℓ` left over.
#[derive(Clone, Debug, PartialEq)]
pub struct RvqCodebook {
    pub layers: Vec<Codebook>,
}

impl RvqCodebook {
    pub fn new(layers: Vec<Codebook>) -> Result<Self> {
        ensure!(!layers.is_empty(), Argument, "RVQ needs at least one layer");
        let d = layers[0].dim();
        ensure!(layers.iter().all(|l| l.dim() == d), Shape, "RVQ layers must share the code dimension");
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    /// Greedy residual encoding; returns `[L][n]` ids and the final residual.
    pub fn encode_with_residual(&self, x: &DenseArray<f32>) -> Result<(Vec<Vec<u32>>, DenseArray<f32>)> {
        ensure!(x.cols() == self.dim(), Shape, "frame dim {} vs code dim {}", x.cols(), self.dim());
        let mut r = x.clone();
        let mut ids = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            let layer_ids = layer.quantize(&r)?;
            for (i, &id) in layer_ids.iter().enumerate() {
                let code = layer.code(id);
                for (v, c) in r.row_mut(i).iter_mut().zip(code) {
                    *v -= c;
                }
            }
            ids.push(layer_ids);
        }
        Ok((ids, r))
    }

    pub fn encode(&self, x: &DenseArray<f32>) -> Result<Vec<Vec<u32>>> {
        Ok(self.encode_with_residual(x)?.0)
    }

    /// Sum of the selected codes of the first `depth` layers.
    pub fn decode_depth(&self, ids: &[Vec<u32>], depth: usize) -> Result<DenseArray<f32>> {
        ensure!(ids.len() == self.depth(), Shape, "{} id layers for {}-layer RVQ", ids.len(), self.depth());
        ensure!(depth <= self.depth(), Argument, "depth {} exceeds {} layers", depth, self.depth());
        let n = ids[0].len();
        ensure!(ids.iter().all(|l| l.len() == n), Shape, "RVQ id layers differ in length");
        let mut out = DenseArray::zeros(&[n, self.dim()]);
        for (layer, lids) in self.layers.iter().zip(ids).take(depth) {
            for (i, &id) in lids.iter().enumerate() {
                ensure!((id as usize) < layer.size(), Domain, "code id {} outside codebook of {}", id, layer.size());
                for (v, c) in out.row_mut(i).iter_mut().zip(layer.code(id)) {
                    *v += c;
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[Vec<u32>]) -> Result<DenseArray<f32>> {
        self.decode_depth(ids, self.depth())
    }

    /// EMA step for every layer on its own residual input. Returns per-layer stats.
    pub fn train_step(&mut self, batch: &DenseArray<f32>, commit_weight: f32, rng: &mut RngStream) -> Result<Vec<VqStepStats>> {
        ensure!(batch.rows() > 0, Argument, "empty training batch");
        ensure!(batch.cols() == self.dim(), Shape, "frame dim {} vs code dim {}", batch.cols(), self.dim());
        let mut r = batch.clone();
        let mut stats = Vec::with_capacity(self.depth());
        for layer in &mut self.layers {
            let ids = layer.quantize(&r)?;
            stats.push(layer.apply_ema(&r, &ids, commit_weight, rng)?);
            for (i, &id) in ids.iter().enumerate() {
                let code = layer.code(id).to_vec();
                for (v, c) in r.row_mut(i).iter_mut().zip(code) {
                    *v -= c;
                }
            }
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::sq_dist;
    use alloc::vec;

    fn layer(v: &[f32]) -> Codebook {
        let rows: Vec<&[f32]> = v.chunks(1).collect();
        Codebook::new(DenseArray::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn scalar_example() {
        let rvq = RvqCodebook::new(vec![layer(&[0.0, 1.0]), layer(&[-0.25, 0.0, 0.25])]).unwrap();
        let x = DenseArray::from_vec(&[1, 1], vec![0.9]).unwrap();
        let (ids, res) = rvq.encode_with_residual(&x).unwrap();
        assert_eq!(ids, [vec![1], vec![1]]);
        assert!((res.data()[0] + 0.1).abs() < 1e-6);
        let dec = rvq.decode(&ids).unwrap();
        assert_eq!(dec.data(), &[1.0]);
        assert!((x.data()[0] - dec.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn code_sum_is_recovered_exactly() {
        let l1 = layer(&[-4.0, 0.0, 4.0]);
        let l2 = layer(&[-1.0, 0.0, 1.0]);
        let l3 = layer(&[-0.25, 0.0, 0.25]);
        let rvq = RvqCodebook::new(vec![l1, l2, l3]).unwrap();
        let x = DenseArray::from_vec(&[1, 1], vec![4.0 - 1.0 + 0.25]).unwrap();
        let (ids, res) = rvq.encode_with_residual(&x).unwrap();
        assert_eq!(ids, [vec![2], vec![0], vec![2]]);
        assert_eq!(res.data(), &[0.0]);
        // a layer-1 codeword with zero codes elsewhere
        let x = DenseArray::from_vec(&[1, 1], vec![-4.0]).unwrap();
        let ids = rvq.encode(&x).unwrap();
        assert_eq!(rvq.decode(&ids).unwrap().data(), &[-4.0]);
        let zeros = vec![vec![1u32], vec![1], vec![1]];
        assert_eq!(rvq.decode(&zeros).unwrap().data(), &[0.0]);
    }

    #[test]
    fn single_layer_matches_vq() {
        let mut rng = RngStream::new(3);
        let codes = DenseArray::from_vec(&[5, 2], (0..10).map(|_| rng.normal() as f32).collect()).unwrap();
        let cb = Codebook::new(codes).unwrap();
        let rvq = RvqCodebook::new(vec![cb.clone()]).unwrap();
        let x = DenseArray::from_vec(&[30, 2], (0..60).map(|_| rng.normal() as f32).collect()).unwrap();
        assert_eq!(rvq.encode(&x).unwrap(), vec![cb.quantize(&x).unwrap()]);
    }

    #[test]
    fn argmin_optimality_per_layer() {
        let mut rng = RngStream::new(4);
        let layers = (0..3)
            .map(|l| {
                let s = 1.0 / (1 + l) as f64;
                let codes = DenseArray::from_vec(&[6, 3], (0..18).map(|_| (s * rng.normal()) as f32).collect()).unwrap();
                Codebook::new(codes).unwrap()
            })
            .collect();
        let rvq = RvqCodebook::new(layers).unwrap();
        let x = DenseArray::from_vec(&[200, 3], (0..600).map(|_| rng.normal() as f32).collect()).unwrap();
        let ids = rvq.encode(&x).unwrap();
        for i in 0..200 {
            let mut r = x.row(i).to_vec();
            for (l, layer) in rvq.layers.iter().enumerate() {
                let chosen: Vec<f32> = r.iter().zip(layer.code(ids[l][i])).map(|(a, b)| a - b).collect();
                let best = sq_dist(&r, layer.code(ids[l][i]));
                for k in 0..layer.size() {
                    assert!(best <= sq_dist(&r, layer.code(k as u32)));
                }
                r = chosen;
            }
        }
    }

    #[test]
    fn decode_rejects_bad_ids() {
        let rvq = RvqCodebook::new(vec![layer(&[0.0, 1.0])]).unwrap();
        assert!(matches!(rvq.decode(&[vec![2]]), Err(crate::Error::Domain(_))));
        assert!(RvqCodebook::new(vec![]).is_err());
    }
}
