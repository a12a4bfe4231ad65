//! Trainable embedding head.
//!
//! One affine layer (optionally preceded by an affine + tanh hidden layer)
//! followed by L2 normalisation. Parameters and all arithmetic are 64-bit;
//! checkpoints store them as 32-bit floats.
//!
//! Checkpoint layout (little-endian): `SSMLMD01`, u32 parameter-matrix count,
//! then per matrix u64 rows, u64 cols and rows*cols f32 values, then the
//! momentum buffers as the same sequence of matrices (without a second
//! count). Matrices are ordered weights, bias per layer, input layer first;
//! biases are stored as `rows x 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featurestore::ZERO_NORM;
use crate::io::{read_f32s, read_magic, read_u32, read_u64, write_f32s, write_u32, write_u64};
use crate::vector;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSMLMD01";

/// Dense affine layer `y = W x + b`, `W` row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let weights = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let bias = vec![0.0; rows];
        Self {
            rows,
            cols,
            weights,
            bias,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(w, b)| vector::dot_f64(w, x) + b)
            .collect()
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Width of the optional tanh hidden layer.
    pub hidden: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_out: 16,
            hidden: None,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    layers: Vec<Layer>,
    velocity: Vec<Layer>,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Activations recorded by [`EmbeddingModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    hidden: Option<Vec<f64>>,
    norm: f64,
    z: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.z
    }

    /// Norm of the output before normalisation.
    pub fn pre_norm(&self) -> f64 {
        self.norm
    }
}

/// Parameter gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self.layers.iter().zip(&other.layers).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::ShapeMismatch("gradient layouts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.values_mut().zip(b.values()).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|x| x.is_finite()))
    }

    /// Flattened view, layer by layer, weights before bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }
}

fn check_unit_interval(momentum: f64) -> Result<()> {
    if (0.0..1.0).contains(&momentum) {
        Ok(())
    } else {
        Err(Error::config("momentum", format!("must lie in [0, 1), got {momentum}")))
    }
}

impl EmbeddingModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        if config.d_in == 0 || config.d_out < 2 || config.hidden == Some(0) {
            return Err(Error::ShapeMismatch(format!(
                "invalid model shape d_in={} d_out={} hidden={:?}",
                config.d_in, config.d_out, config.hidden
            )));
        }
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("must be > 0, got {}", config.learning_rate),
            ));
        }
        check_unit_interval(config.momentum)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = match config.hidden {
            None => vec![Layer::uniform(config.d_out, config.d_in, &mut rng)],
            Some(h) => vec![
                Layer::uniform(h, config.d_in, &mut rng),
                Layer::uniform(config.d_out, h, &mut rng),
            ],
        };
        Ok(Self::from_layers(layers, config.learning_rate, config.momentum))
    }

    /// Model with the given layers and zeroed momentum buffers.
    pub fn from_layers(layers: Vec<Layer>, learning_rate: f64, momentum: f64) -> Self {
        let velocity = layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect();
        Self {
            layers,
            velocity,
            learning_rate,
            momentum,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn velocity(&self) -> &[Layer] {
        &self.velocity
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].cols
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.d_in(),
                found: x.len(),
            });
        }
        let (hidden, pre) = match self.layers.as_slice() {
            [out] => (None, out.apply(x)),
            [first, out] => {
                let h: Vec<f64> = first.apply(x).into_iter().map(f64::tanh).collect();
                let pre = out.apply(&h);
                (Some(h), pre)
            }
            _ => unreachable!("models have one or two layers"),
        };
        let norm = vector::norm_f64(&pre);
        if !(norm > ZERO_NORM) {
            return Err(Error::ZeroNormOutput);
        }
        let z: Vec<f64> = pre.iter().map(|v| v / norm).collect();
        let cache = ForwardCache {
            input: x.to_vec(),
            hidden,
            norm,
            z: z.clone(),
        };
        Ok((z, cache))
    }

    /// Forward pass on a stored 32-bit row.
    pub fn embed(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.forward(&vector::to_f64(x)).map(|(z, _)| z)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_z: &[f64]) -> Result<Gradients> {
        let d = self.d_out();
        if grad_z.len() != d || cache.z.len() != d || cache.input.len() != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} for a {}-dimensional output",
                grad_z.len(),
                d
            )));
        }
        // d(v/|v|)/dv = (I - z zᵀ) / |v|
        let along = vector::dot_f64(&cache.z, grad_z);
        let g_pre: Vec<f64> = grad_z
            .iter()
            .zip(&cache.z)
            .map(|(g, z)| (g - z * along) / cache.norm)
            .collect();

        let outer = |g: &[f64], a: &[f64], rows: usize, cols: usize| -> Layer {
            let mut l = Layer::zeros(rows, cols);
            for (r, &gr) in g.iter().enumerate() {
                for (w, &ac) in l.weights[r * cols..(r + 1) * cols].iter_mut().zip(a) {
                    *w = gr * ac;
                }
            }
            l.bias.copy_from_slice(g);
            l
        };

        match (self.layers.as_slice(), &cache.hidden) {
            ([out], None) => Ok(Gradients {
                layers: vec![outer(&g_pre, &cache.input, out.rows, out.cols)],
            }),
            ([first, out], Some(h)) => {
                let g_out = outer(&g_pre, h, out.rows, out.cols);
                let mut g_h = vec![0.0; out.cols];
                for (r, &gr) in g_pre.iter().enumerate() {
                    let w = &out.weights[r * out.cols..(r + 1) * out.cols];
                    g_h.iter_mut().zip(w).for_each(|(acc, wv)| *acc += gr * wv);
                }
                for (g, hv) in g_h.iter_mut().zip(h) {
                    *g *= 1.0 - hv * hv;
                }
                let g_first = outer(&g_h, &cache.input, first.rows, first.cols);
                Ok(Gradients {
                    layers: vec![g_first, g_out],
                })
            }
            _ => Err(Error::ShapeMismatch("cache does not match the model".into())),
        }
    }

    /// Momentum SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
    pub fn sgd_step(&mut self, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| !g.same_shape(l))
        {
            return Err(Error::ShapeMismatch("gradients do not match the model".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, vel), g) in self.layers.iter_mut().zip(&mut self.velocity).zip(&grads.layers) {
            for ((p, v), gv) in layer.values_mut().zip(vel.values_mut()).zip(g.values()) {
                *v = mu * *v + gv;
                *p -= lr * *v;
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, (self.layers.len() * 2) as u32)?;
        for set in [&self.layers, &self.velocity] {
            for l in set {
                write_param(w, &l.weights, l.rows, l.cols)?;
                write_param(w, &l.bias, l.rows, 1)?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint. Learning rate and momentum are not stored and are
    /// set from the arguments.
    pub fn read_checkpoint<R: Read>(r: &mut R, learning_rate: f64, momentum: f64) -> Result<Self> {
        read_magic(r, CHECKPOINT_MAGIC)?;
        let count = read_u32(r)? as usize;
        if count != 2 && count != 4 {
            return Err(Error::Format(format!(
                "expected 2 or 4 parameter matrices, found {count}"
            )));
        }
        let mut read_set = || -> Result<Vec<Layer>> {
            let mut layers = Vec::new();
            for _ in 0..count / 2 {
                let (weights, rows, cols) = read_param(r)?;
                let (bias, brows, bcols) = read_param(r)?;
                if brows != rows || bcols != 1 {
                    return Err(Error::Format(format!(
                        "bias shape {brows}x{bcols} does not match weights {rows}x{cols}"
                    )));
                }
                layers.push(Layer {
                    rows,
                    cols,
                    weights,
                    bias,
                });
            }
            Ok(layers)
        };
        let layers = read_set()?;
        let velocity = read_set()?;
        if layers.windows(2).any(|w| w[0].rows != w[1].cols)
            || layers.iter().zip(&velocity).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::Format("inconsistent layer shapes".into()));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            layers,
            velocity,
            learning_rate,
            momentum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, learning_rate: f64, momentum: f64) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_checkpoint(&mut r, learning_rate, momentum)
    }
}

fn write_param<W: Write>(w: &mut W, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    write_u64(w, rows as u64)?;
    write_u64(w, cols as u64)?;
    write_f32s(w, &vector::to_f32(values))
}

fn read_param<R: Read>(r: &mut R) -> Result<(Vec<f64>, usize, usize)> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= 1 << 28)
        .ok_or_else(|| Error::Format(format!("parameter matrix {rows}x{cols} too large")))?;
    Ok((vector::to_f64(&read_f32s(r, len)?), rows, cols))
}

/// Step decay: `base · factor^⌊epoch / step⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub step_epochs: usize,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.01,
            step_epochs: 10,
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.step_epochs.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dplm::LabelAssignment;
    use crate::featurestore::{normalize_f64_to_f32, Dictionary, FeatureMatrix};
    use crate::loss::dtl;

    fn identity_model(d: usize) -> EmbeddingModel {
        let mut l = Layer::zeros(d, d);
        for i in 0..d {
            l.weights[i * d + i] = 1.0;
        }
        EmbeddingModel::from_layers(vec![l], 0.1, 0.0)
    }

    #[test]
    fn forward_examples() {
        let m = identity_model(2);
        let (z, _) = m.forward(&[3.0, 4.0]).unwrap();
        assert!((z[0] - 0.6).abs() < 1e-15 && (z[1] - 0.8).abs() < 1e-15);

        let mut m = identity_model(2);
        m.layers_mut()[0].bias = vec![0.0, 2.0];
        let (z, _) = m.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.0, 1.0]);

        let m = EmbeddingModel::new(&ModelConfig {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin()).collect();
        let (z, _) = m.forward(&x).unwrap();
        assert!((vector::norm_f64(&z) - 1.0).abs() < 1e-6);
        assert_eq!(m.forward(&x).unwrap().0, z);
    }

    #[test]
    fn forward_errors() {
        let m = identity_model(2);
        assert!(matches!(m.forward(&[0.0, 0.0]), Err(Error::ZeroNormOutput)));
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn backward_projects_out_radial_direction() {
        let m = identity_model(3);
        let (z, cache) = m.forward(&[1.0, 2.0, 2.0]).unwrap();
        let g = m.backward(&cache, &z).unwrap();
        assert!(g.flatten().iter().all(|x| x.abs() < 1e-15));
        let g = m.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
        assert!(matches!(m.backward(&cache, &[1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut m = identity_model(2);
        m.momentum = 0.0;
        m.learning_rate = 0.1;
        let before = m.layers()[0].clone();
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].weights = vec![1.0, 2.0, 3.0, 4.0];
        m.sgd_step(&g).unwrap();
        for (a, (b, gv)) in m.layers()[0].weights.iter().zip(before.weights.iter().zip(&g.layers[0].weights)) {
            assert!((b - a - 0.1 * gv).abs() < 1e-15);
        }

        let mut m = identity_model(2);
        m.momentum = 0.9;
        m.learning_rate = 0.1;
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].bias = vec![1.0, 0.0];
        m.sgd_step(&g).unwrap();
        let after_one = m.layers()[0].bias[0];
        m.sgd_step(&g).unwrap();
        let delta = after_one - m.layers()[0].bias[0];
        assert!((delta - 0.1 * 1.9).abs() < 1e-12);

        let mut m = identity_model(2);
        let snapshot = m.clone();
        m.sgd_step(&Gradients::zeros_like(&m)).unwrap();
        assert_eq!(m.layers(), snapshot.layers());

        let mut g = Gradients::zeros_like(&m);
        g.layers[0].weights[0] = f64::NAN;
        assert!(matches!(m.sgd_step(&g), Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn lr_schedule_examples() {
        let s = LrSchedule::default();
        assert!((s.at(0) - 0.01).abs() < 1e-15);
        assert!((s.at(9) - 0.01).abs() < 1e-15);
        assert!((s.at(10) - 0.001).abs() < 1e-15);
        assert!((s.at(25) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_roundtrip_and_layout() {
        let m = EmbeddingModel::new(&ModelConfig {
            d_in: 3,
            d_out: 2,
            hidden: Some(4),
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SSMLMD01");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(buf[20..28].try_into().unwrap()), 3);
        let params = 4 * 3 + 4 + 2 * 4 + 2;
        assert_eq!(buf.len(), 12 + 2 * (4 * 16 + params * 4));
        let back = EmbeddingModel::read_checkpoint(&mut buf.as_slice(), 0.01, 0.9).unwrap();
        for (a, b) in back.layers().iter().zip(m.layers()) {
            assert!(a.values().zip(b.values()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(EmbeddingModel::read_checkpoint(&mut &buf[..buf.len() - 2], 0.01, 0.9).is_err());
    }

    /// Central differences of the full loss `dtl(forward(x))` with respect to
    /// every parameter.
    #[test]
    fn end_to_end_gradient_3x3() {
        for hidden in [None, Some(3)] {
            let m = EmbeddingModel::new(&ModelConfig {
                d_in: 3,
                d_out: 3,
                hidden,
                seed: 11,
                ..Default::default()
            })
            .unwrap();
            let rows: Vec<Vec<f32>> = [[1.0, 0.2, -0.3], [0.1, 1.0, 0.5], [-0.7, 0.3, 0.2], [0.4, -0.9, 0.1]]
                .iter()
                .map(|r| normalize_f64_to_f32(r, 0).unwrap())
                .collect();
            let dict = Dictionary::new(FeatureMatrix::from_rows(&rows).unwrap(), 0).unwrap();
            let a = LabelAssignment {
                probe: 0,
                positives: vec![0, 1],
                hard_negatives: vec![2, 3],
            };
            let x = [0.3, -0.8, 0.5];
            let loss = |model: &EmbeddingModel| {
                let (z, _) = model.forward(&x).unwrap();
                dtl(&z, &dict, &a.positives, &a.hard_negatives, 0.2).unwrap().total
            };
            let (z, cache) = m.forward(&x).unwrap();
            let v = dtl(&z, &dict, &a.positives, &a.hard_negatives, 0.2).unwrap();
            let analytic = m.backward(&cache, &v.grad_wrt_probe).unwrap().flatten();
            let h = 1e-4;
            let mut idx = 0;
            for li in 0..m.layers().len() {
                let count = m.layers()[li].weights.len() + m.layers()[li].bias.len();
                for k in 0..count {
                    let bump = |delta: f64| {
                        let mut mm = m.clone();
                        let l = &mut mm.layers_mut()[li];
                        let nw = l.weights.len();
                        if k < nw {
                            l.weights[k] += delta;
                        } else {
                            l.bias[k - nw] += delta;
                        }
                        loss(&mm)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let g = analytic[idx];
                    let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-7);
                    assert!(rel < 1e-4, "param {idx}: {g} vs {fd}");
                    idx += 1;
                }
            }
        }
    }
}
