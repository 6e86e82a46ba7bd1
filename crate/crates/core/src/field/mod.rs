//! Density-only neural field over a parent block.
//!
//! Positions are normalized to the parent box, frequency encoded and fed to
//! a ReLU network with a softplus head, so `σ ≥ 0` everywhere.

pub mod encoding;
pub mod mlp;
pub mod render;
pub mod sampling;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encoding::{encoded_dim, positional_encode};
pub use mlp::{MlpShape, Tape};
pub use render::{render_depth, RenderResult};
pub use sampling::{
    merge_sorted, sample_child_segmented, sample_coarse_uniform, sample_fine, SamplingConfig,
};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Ray, Vec3};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PCNERFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub encoding_levels: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Hidden layer (0-based) that also receives the encoded input; 0 disables.
    pub skip_layer: usize,
}

impl FieldConfig {
    /// 8×256 with the input re-injected at layer 4 and 10 frequency bands.
    pub fn paper() -> Self {
        Self {
            encoding_levels: 10,
            hidden_layers: 8,
            hidden_width: 256,
            skip_layer: 4,
        }
    }

    /// 4×64 with 6 frequency bands, sized for a desktop CPU.
    pub fn desk() -> Self {
        Self {
            encoding_levels: 6,
            hidden_layers: 4,
            hidden_width: 64,
            skip_layer: 2,
        }
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input_dim: encoded_dim(self.encoding_levels),
            hidden_layers: self.hidden_layers,
            width: self.hidden_width,
            skip_layer: self.skip_layer,
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape().param_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 && self.hidden_layers > 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        if self.skip_layer >= self.hidden_layers.max(1) {
            return Err(Error::Config(format!(
                "skip_layer {} must be below hidden_layers {}",
                self.skip_layer, self.hidden_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    pub config: FieldConfig,
    /// Box mapped onto `[-1, 1]^3` before encoding.
    pub bounds: Aabb,
    pub params: Vec<f64>,
}

impl FieldModel {
    pub fn new(config: FieldConfig, bounds: Aabb, seed: u64) -> Self {
        let params = config.shape().init_params(seed);
        Self {
            config,
            bounds,
            params,
        }
    }

    pub fn shape(&self) -> MlpShape {
        self.config.shape()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("parameter {i} is not finite"))),
        }
    }

    /// Encoded network input for a batch of world positions.
    pub fn encode(&self, points: &[Vec3]) -> Vec<f64> {
        let dim = encoded_dim(self.config.encoding_levels);
        let mut out = vec![0.0; points.len() * dim];
        for (p, row) in points.iter().zip(out.chunks_exact_mut(dim)) {
            let x = self.bounds.normalize(p);
            encoding::encode_into(&x, self.config.encoding_levels, row);
        }
        out
    }

    pub fn sigma_batch(&self, points: &[Vec3]) -> Vec<f64> {
        mlp::forward(&self.shape(), &self.params, self.encode(points), points.len(), None)
    }

    /// Forward pass keeping activations for [`FieldModel::backward`].
    pub fn sigma_batch_taped(&self, points: &[Vec3], tape: &mut Tape) -> Vec<f64> {
        mlp::forward(
            &self.shape(),
            &self.params,
            self.encode(points),
            points.len(),
            Some(tape),
        )
    }

    /// Adds `Σ_r d_sigma[r] ∂σ_r/∂θ` to `grad`.
    pub fn backward(&self, tape: &Tape, d_sigma: &[f64], grad: &mut [f64]) {
        mlp::backward(&self.shape(), &self.params, tape, d_sigma, grad);
    }

    /// Density at one world position.
    pub fn sigma(&self, x: &Vec3) -> Result<f64> {
        self.check_finite()?;
        Ok(self.sigma_batch(std::slice::from_ref(x))[0])
    }

    /// Gradient of `σ(x)` with respect to the parameters.
    pub fn sigma_param_gradient(&self, x: &Vec3) -> Vec<f64> {
        let mut tape = Tape::default();
        self.sigma_batch_taped(std::slice::from_ref(x), &mut tape);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&tape, &[1.0], &mut grad);
        grad
    }

    /// ReLU pattern of the network at the given positions.
    pub fn activation_pattern(&self, points: &[Vec3]) -> Vec<bool> {
        let mut tape = Tape::default();
        self.sigma_batch_taped(points, &mut tape);
        tape.activation_pattern()
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.config.encoding_levels,
            self.config.hidden_layers,
            self.config.hidden_width,
            self.config.skip_layer,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.bounds.min.iter().chain(&self.bounds.max) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<FieldModel, String> {
    let mut at = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let slice = bytes
            .get(at..at + n)
            .ok_or_else(|| "checkpoint is truncated".to_string())?;
        at += n;
        Ok(slice)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32_at(take(4)?) as usize;
    }
    let config = FieldConfig {
        encoding_levels: dims[0],
        hidden_layers: dims[1],
        hidden_width: dims[2],
        skip_layer: dims[3],
    };
    let mut corners = [0.0f64; 6];
    for c in &mut corners {
        *c = f64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != config.param_count() {
        return Err(format!(
            "parameter count {count} does not match the stored architecture ({})",
            config.param_count()
        ));
    }
    let params = take(8 * count)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if at != bytes.len() {
        return Err("trailing bytes after parameters".into());
    }
    Ok(FieldModel {
        config,
        bounds: Aabb {
            min: [corners[0], corners[1], corners[2]],
            max: [corners[3], corners[4], corners[5]],
        },
        params,
    })
}

/// Anything that maps world positions to non-negative densities.
pub trait Density: Sync {
    fn density(&self, points: &[Vec3]) -> Vec<f64>;
}

impl Density for FieldModel {
    fn density(&self, points: &[Vec3]) -> Vec<f64> {
        self.sigma_batch(points)
    }
}

impl<F: Fn(&Vec3) -> f64 + Sync> Density for F {
    fn density(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(self).collect()
    }
}

/// Densities and quadrature weights at the given depths along a ray.
pub fn render_weights<D: Density + ?Sized>(field: &D, ray: &Ray, depths: &[f64]) -> RenderResult {
    let points: Vec<Vec3> = depths.iter().map(|&t| ray.at(t)).collect();
    RenderResult::from_sigma(depths.to_vec(), field.density(&points))
}
