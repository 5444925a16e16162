//! Segmentation-language connector: a tiling convolution compresses the
//! feature map, the grid is flattened row-major, and two linear layers lift
//! each token to the language model width.

use serde::{Deserialize, Serialize};

use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::layers::{Linear, LinearCache, INIT_STD};
use crate::numkernel::{conv2d, conv2d_backward, gelu, gelu_backward, Grads, ParamStore, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    #[serde(rename = "G")]
    pub grid: usize,
    pub k: usize,
    pub stride: usize,
    pub d_s: usize,
    pub c_mid: usize,
    pub d: usize,
    pub activation: Activation,
}

impl ConnectorConfig {
    /// Kernel and stride 4 with `c_mid = d_s`.
    pub fn new(grid: usize, d_s: usize, d: usize) -> ConnectorConfig {
        ConnectorConfig {
            grid,
            k: 4,
            stride: 4,
            d_s,
            c_mid: d_s,
            d,
            activation: Activation::Gelu,
        }
    }

    pub fn tokens(&self) -> Result<usize> {
        token_count(self.grid, self.k, self.stride)
    }
}

/// `((G − k)/stride + 1)²`, rejecting geometries the kernel does not tile.
pub fn token_count(grid: usize, k: usize, stride: usize) -> Result<usize> {
    if k == 0 || stride == 0 || k > grid {
        return Err(Error::Geometry(format!(
            "kernel {k} with stride {stride} does not fit grid {grid}"
        )));
    }
    if !(grid - k).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "grid {grid} is not tiled by kernel {k} with stride {stride}"
        )));
    }
    let side = (grid - k) / stride + 1;
    Ok(side * side)
}

/// `|S|×d` segmentation tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationEmbeddings {
    pub tokens: Tensor,
}

pub struct ConnectorCache {
    input: Tensor,
    conv_out: Tensor,
    mlp1: LinearCache,
    pre_act: Tensor,
    mlp2: LinearCache,
}

#[derive(Debug, Clone)]
pub struct Connector {
    cfg: ConnectorConfig,
    conv_w: String,
    conv_b: String,
    mlp1: Linear,
    mlp2: Linear,
}

impl Connector {
    pub fn new(cfg: ConnectorConfig) -> Result<Connector> {
        cfg.tokens()?;
        Ok(Connector {
            cfg,
            conv_w: "connector.conv.w".into(),
            conv_b: "connector.conv.b".into(),
            mlp1: Linear::new("connector.mlp1"),
            mlp2: Linear::new("connector.mlp2"),
        })
    }

    /// Truncated-normal weights (σ = 0.02) and zero biases.
    pub fn init(params: &mut ParamStore, rng: &mut SeededRng, cfg: ConnectorConfig) -> Result<Connector> {
        let c = Connector::new(cfg)?;
        params.insert(
            c.conv_w.clone(),
            rng.trunc_normal_tensor(&[cfg.k, cfg.k, cfg.d_s, cfg.c_mid], INIT_STD),
        );
        params.insert(c.conv_b.clone(), Tensor::zeros(&[cfg.c_mid]));
        Linear::init(params, rng, "connector.mlp1", cfg.c_mid, cfg.d_s, INIT_STD);
        Linear::init(params, rng, "connector.mlp2", cfg.d_s, cfg.d, INIT_STD);
        Ok(c)
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.cfg
    }

    /// Flattened conv output (`|S|×c_mid`), before the MLP. Row `t` holds
    /// output cell `(t / side, t % side)`.
    pub fn compress(&self, p: &ParamStore, map: &FeatureMap) -> Result<Tensor> {
        let cfg = &self.cfg;
        if map.side() != cfg.grid || map.channels() != cfg.d_s {
            return Err(Error::Geometry(format!(
                "connector expects a {0}×{0}×{1} map, got {2}×{2}×{3}",
                cfg.grid,
                cfg.d_s,
                map.side(),
                map.channels()
            )));
        }
        let y = conv2d(map.tensor(), p.get(&self.conv_w)?, cfg.stride, p.get(&self.conv_b)?)?;
        Ok(y.reshape(&[cfg.tokens()?, cfg.c_mid])?)
    }

    pub fn connect(&self, p: &ParamStore, map: &FeatureMap) -> Result<(SegmentationEmbeddings, ConnectorCache)> {
        let conv_out = self.compress(p, map)?;
        let (pre_act, mlp1) = self.mlp1.forward(p, &conv_out)?;
        let act = match self.cfg.activation {
            Activation::Gelu => gelu(&pre_act)?,
        };
        let (tokens, mlp2) = self.mlp2.forward(p, &act)?;
        Ok((
            SegmentationEmbeddings { tokens },
            ConnectorCache {
                input: map.tensor().clone(),
                conv_out,
                mlp1,
                pre_act,
                mlp2,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient for the
    /// feature map.
    pub fn backward(&self, p: &ParamStore, cache: &ConnectorCache, dy: &Tensor, g: &mut Grads) -> Result<Tensor> {
        let dact = self.mlp2.backward(p, &cache.mlp2, dy, g)?;
        let dpre = match self.cfg.activation {
            Activation::Gelu => gelu_backward(&cache.pre_act, &dact)?,
        };
        let dconv = self.mlp1.backward(p, &cache.mlp1, &dpre, g)?;
        let side = (self.cfg.grid - self.cfg.k) / self.cfg.stride + 1;
        let dconv = dconv.reshape(&[side, side, self.cfg.c_mid])?;
        debug_assert_eq!(cache.conv_out.len(), dconv.len());
        let cg = conv2d_backward(&cache.input, p.get(&self.conv_w)?, self.cfg.stride, &dconv)?;
        g.accumulate(&self.conv_w, cg.dkernel)?;
        g.accumulate(&self.conv_b, cg.dbias)?;
        Ok(cg.dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(token_count(64, 4, 4).unwrap(), 256);
        assert_eq!(token_count(4, 4, 4).unwrap(), 1);
        assert_eq!(token_count(16, 4, 4).unwrap(), 16);
        assert!(matches!(token_count(18, 4, 4), Err(Error::Geometry(_))));
        assert!(token_count(3, 4, 4).is_err());
    }

    #[test]
    fn zero_map_gives_zero_tokens() {
        let mut p = ParamStore::new();
        let c = Connector::init(&mut p, &mut SeededRng::new(0), ConnectorConfig::new(16, 8, 12)).unwrap();
        let map = FeatureMap::new(Tensor::zeros(&[16, 16, 8])).unwrap();
        let (s, _) = c.connect(&p, &map).unwrap();
        assert_eq!(s.tokens.shape(), &[16, 12]);
        assert!(s.tokens.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn impulse_lights_one_token() {
        let mut p = ParamStore::new();
        let c = Connector::init(&mut p, &mut SeededRng::new(0), ConnectorConfig::new(16, 4, 4)).unwrap();
        let mut grid = Tensor::zeros(&[16, 16, 4]);
        let (y, x) = (9, 6);
        grid.data_mut()[(y * 16 + x) * 4 + 2] = 1.0;
        let out = c.compress(&p, &FeatureMap::new(grid).unwrap()).unwrap();
        let lit: Vec<usize> = (0..16)
            .filter(|t| out.row(*t).iter().any(|v| *v != 0.0))
            .collect();
        assert_eq!(lit, vec![(y / 4) * 4 + x / 4]);
    }
}
