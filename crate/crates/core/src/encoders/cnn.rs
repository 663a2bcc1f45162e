//! Small trainable CNN that collapses an image into one feature vector.
//!
//! conv(k×k) → tanh → avgpool 2×2 → conv(k×k) → tanh → avgpool 2×2 → linear.
//! Smooth activations and average pooling keep the map differentiable
//! everywhere, so pixel gradients can be checked by finite differences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub out_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            conv1: 8,
            conv2: 16,
            kernel: 3,
            out_dim: 64,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image {}×{} must be a nonzero multiple of 4",
                self.height, self.width
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("cnn kernel must be odd".into()));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        self.conv2 * (self.height / 4) * (self.width / 4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCnn {
    pub config: CnnConfig,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl ToyCnn {
    pub fn new(store: &mut ParamStore, prefix: &str, config: CnnConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut p = |name: &str, shape: &[usize]| store.add(format!("{prefix}.{name}"), shape);
        Ok(Self {
            config,
            conv1_w: p("conv1_w", &[config.conv1, config.channels, k, k]),
            conv1_b: p("conv1_b", &[config.conv1]),
            conv2_w: p("conv2_w", &[config.conv2, config.conv1, k, k]),
            conv2_b: p("conv2_b", &[config.conv2]),
            fc_w: p("fc_w", &[config.flat_dim(), config.out_dim]),
            fc_b: p("fc_b", &[config.out_dim]),
        })
    }

    pub fn params(&self) -> [ParamId; 6] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc_w,
            self.fc_b,
        ]
    }

    /// `images[N, C, H, W]` → `[N, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var> {
        let c = &self.config;
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [c.channels, c.height, c.width] {
            return Err(Error::dim("cnn_forward", &s, &[0, c.channels, c.height, c.width]));
        }
        let n = s[0];
        let x = tape.conv2d(images, p[self.conv1_w], p[self.conv1_b])?;
        let x = tape.tanh(x);
        let x = tape.avg_pool2(x)?;
        let x = tape.conv2d(x, p[self.conv2_w], p[self.conv2_b])?;
        let x = tape.tanh(x);
        let x = tape.avg_pool2(x)?;
        let x = tape.reshape(x, &[n, c.flat_dim()])?;
        tape.linear(x, p[self.fc_w], Some(p[self.fc_b]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::training::init_params;

    fn tiny() -> CnnConfig {
        CnnConfig {
            channels: 3,
            height: 8,
            width: 8,
            conv1: 2,
            conv2: 3,
            kernel: 3,
            out_dim: 5,
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut store = ParamStore::new();
        let cnn = ToyCnn::new(&mut store, "cnn", tiny()).unwrap();
        init_params(&mut store, 0.08, 1).unwrap();
        for id in [cnn.conv1_b, cnn.conv2_b, cnn.fc_b] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let img = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let v = cnn.forward(&mut tape, &p, img).unwrap();
        assert_eq!(tape.shape(v), &[2, 5]);
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_dim_and_shift_sensitivity() {
        let mut store = ParamStore::new();
        let cnn = ToyCnn::new(&mut store, "cnn", tiny()).unwrap();
        init_params(&mut store, 0.5, 2).unwrap();
        let mut img = Tensor::zeros(&[1, 3, 8, 8]);
        img.data_mut()[9] = 1.0;
        let mut shifted = Tensor::zeros(&[1, 3, 8, 8]);
        shifted.data_mut()[10] = 1.0;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let a = tape.constant(img);
        let b = tape.constant(shifted);
        let va = cnn.forward(&mut tape, &p, a).unwrap();
        let vb = cnn.forward(&mut tape, &p, b).unwrap();
        assert_eq!(tape.shape(va), &[1, 5]);
        // No translation invariance is claimed.
        assert_ne!(tape.value(va), tape.value(vb));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let mut store = ParamStore::new();
        let cnn = ToyCnn::new(&mut store, "cnn", tiny()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let img = tape.constant(Tensor::zeros(&[1, 3, 8, 12]));
        assert!(matches!(cnn.forward(&mut tape, &p, img), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bad_config_rejected() {
        let mut store = ParamStore::new();
        let cfg = CnnConfig { height: 6, ..tiny() };
        assert!(ToyCnn::new(&mut store, "cnn", cfg).is_err());
    }
}
