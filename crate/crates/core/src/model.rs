//! Feature extractor and classifier.
//!
//! Two variants share one interface. `Table1` is the 1-D residual network:
//! a 7-tap stride-2 stem with 64 channels, 3-tap max-pool, four residual
//! stages (64, 128, 256, 512 channels, each halving the length), global
//! average pooling and a 512→256 bottleneck. `Small` replaces the
//! convolutional trunk with two dense layers and is what tests and the
//! desk-scale benchmark train.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{dropout, ParameterStore, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

pub const INPUT_LEN: usize = 512;

/// Fixed factor applied to inputs before the first layer: `2 / 1024` turns
/// unnormalized FFT magnitudes into sinusoid amplitudes.
pub const DEFAULT_INPUT_SCALE: f64 = 2.0 / 1024.0;

fn default_input_scale() -> f64 {
    DEFAULT_INPUT_SCALE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Table1,
    Small,
}

impl Variant {
    pub fn bottleneck_dim(self) -> usize {
        match self {
            Variant::Table1 => 256,
            Variant::Small => 64,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Table1 => "table1",
            Variant::Small => "small",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Variant::Table1),
            "small" => Ok(Variant::Small),
            other => Err(Error::Config(format!("unknown architecture '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub variant: Variant,
    pub input_len: usize,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
}

impl ArchitectureConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ArchitectureConfig {
            variant,
            input_len: INPUT_LEN,
            bottleneck_dim: variant.bottleneck_dim(),
            num_classes,
            dropout_p: 0.5,
            input_scale: DEFAULT_INPUT_SCALE,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn with_input_scale(mut self, scale: f64) -> Self {
        self.input_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len != INPUT_LEN {
            return Err(Error::Config(format!(
                "input_len must be {}, got {}",
                INPUT_LEN, self.input_len
            )));
        }
        if self.bottleneck_dim != self.variant.bottleneck_dim() {
            return Err(Error::Config(format!(
                "bottleneck_dim for {} is {}, got {}",
                self.variant,
                self.variant.bottleneck_dim(),
                self.bottleneck_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Config(format!(
                "input_scale {} must be positive",
                self.input_scale
            )));
        }
        Ok(())
    }
}

/// Channel width of each residual stage.
const STAGES: [usize; 4] = [64, 128, 256, 512];
const BLOCKS_PER_STAGE: usize = 2;

/// A built network: configuration plus the single parameter store every
/// domain's forward pass reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ArchitectureConfig,
    store: ParameterStore,
    training: bool,
}

fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), values).expect("shape matches value count")
}

struct Builder<'a, R: Rng + ?Sized> {
    store: ParameterStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        let w = kaiming_uniform(&[c_out, c_in, k], c_in * k, self.rng);
        self.store.insert(format!("{name}.weight"), w)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        let w = kaiming_uniform(&[d_in, d_out], d_in, self.rng);
        self.store.insert(format!("{name}.weight"), w)?;
        self.store
            .insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))
    }
}

fn block_name(stage: usize, block: usize) -> String {
    format!("layer{}.{}", stage + 2, block)
}

impl Model {
    /// Creates every parameter of `config` with Kaiming-uniform (fan-in)
    /// weights and zero biases. Construction order is fixed, so one seed
    /// always yields the same network.
    pub fn build<R: Rng + ?Sized>(config: ArchitectureConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParameterStore::new(),
            rng,
        };
        match config.variant {
            Variant::Table1 => {
                b.conv("conv1", 64, 1, 7)?;
                let mut c_in = 64;
                for (s, &c) in STAGES.iter().enumerate() {
                    for blk in 0..BLOCKS_PER_STAGE {
                        let name = block_name(s, blk);
                        b.conv(&format!("{name}.conv1"), c, c_in, 3)?;
                        b.conv(&format!("{name}.conv2"), c, c, 3)?;
                        if blk == 0 {
                            b.conv(&format!("{name}.shortcut"), c, c_in, 1)?;
                        }
                        c_in = c;
                    }
                }
                b.linear("bottleneck", 512, 256)?;
            }
            Variant::Small => {
                b.linear("fc1", INPUT_LEN, 128)?;
                b.linear("fc2", 128, 64)?;
            }
        }
        b.linear("classifier", config.bottleneck_dim, config.num_classes)?;
        Ok(Model {
            config,
            store: b.store,
            training: true,
        })
    }

    pub(crate) fn from_parts(config: ArchitectureConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config,
            store,
            training: false,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn train(&mut self) {
        self.training = true;
    }

    pub fn eval(&mut self) {
        self.training = false;
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.param(&self.store, name)
    }

    fn dense(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.weight"))?;
        let b = self.p(tape, &format!("{name}.bias"))?;
        tape.linear(x, w, b)
    }

    fn residual_block(
        &self,
        tape: &mut Tape,
        x: Var,
        name: &str,
        stride: usize,
    ) -> Result<Var> {
        let w1 = self.p(tape, &format!("{name}.conv1.weight"))?;
        let w2 = self.p(tape, &format!("{name}.conv2.weight"))?;
        let h = tape.conv1d(x, w1, stride, 1)?;
        let h = tape.relu(h);
        let h = tape.conv1d(h, w2, 1, 1)?;
        let shortcut_name = format!("{name}.shortcut.weight");
        let shortcut = if self.store.get(&shortcut_name).is_some() {
            let ws = self.p(tape, &shortcut_name)?;
            tape.conv1d(x, ws, stride, 0)?
        } else {
            x
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.relu(sum))
    }

    /// Maps a `[B, 1, 512]` batch to `[B, bottleneck_dim]` features. `rng`
    /// drives dropout and is untouched in eval mode.
    pub fn features<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, rng: &mut R) -> Result<Var> {
        self.forward_features(tape, x, rng, self.training)
    }

    fn forward_features<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let batch = match shape[..] {
            [b, 1, l] if l == self.config.input_len => b,
            _ => {
                return Err(dim_err!(
                    "features expects [B, 1, {}], got {:?}",
                    self.config.input_len,
                    shape
                ))
            }
        };
        let x = if self.config.input_scale == 1.0 {
            x
        } else {
            tape.scale(x, self.config.input_scale)
        };
        let pooled = match self.config.variant {
            Variant::Table1 => {
                let w = self.p(tape, "conv1.weight")?;
                let h = tape.conv1d(x, w, 2, 3)?;
                let h = tape.relu(h);
                let mut h = tape.max_pool1d(h, 3, 1, 1)?;
                for s in 0..STAGES.len() {
                    for blk in 0..BLOCKS_PER_STAGE {
                        let stride = if blk == 0 { 2 } else { 1 };
                        h = self.residual_block(tape, h, &block_name(s, blk), stride)?;
                    }
                }
                tape.avg_pool_global(h)?
            }
            Variant::Small => {
                let flat = tape.reshape(x, &[batch, self.config.input_len])?;
                let h = self.dense(tape, flat, "fc1")?;
                tape.relu(h)
            }
        };
        let name = match self.config.variant {
            Variant::Table1 => "bottleneck",
            Variant::Small => "fc2",
        };
        let h = self.dense(tape, pooled, name)?;
        let h = tape.relu(h);
        dropout(tape, h, self.config.dropout_p, training, rng)
    }

    /// Raw logits `[B, num_classes]` for bottleneck features.
    pub fn classify(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        match tape.shape(f) {
            [_, d] if *d == self.config.bottleneck_dim => {}
            s => {
                return Err(dim_err!(
                    "classify expects [B, {}], got {:?}",
                    self.config.bottleneck_dim,
                    s
                ))
            }
        }
        self.dense(tape, f, "classifier")
    }

    /// Class predictions for a `[N, 1, 512]` tensor, always in eval mode,
    /// processed `chunk` rows at a time.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let n = x.rows();
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut tape = Tape::new();
            let xb = tape.constant(x.select_rows(&idx)?);
            let f = self.forward_features(&mut tape, xb, &mut unused, false)?;
            let logits = self.classify(&mut tape, f)?;
            out.extend(argmax_rows(tape.value(logits)));
        }
        Ok(out)
    }
}

/// Row-wise argmax of a `[B, C]` tensor; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.values()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn input(tape: &mut Tape, b: usize, fill: f64) -> Var {
        tape.constant(Tensor::full(&[b, 1, INPUT_LEN], fill))
    }

    #[test]
    fn small_variant_shapes() {
        let m = Model::build(
            ArchitectureConfig::new(Variant::Small, 5),
            &mut stream_rng(1, Stream::Init, 0),
        )
        .unwrap();
        let mut t = Tape::new();
        let x = input(&mut t, 3, 0.0);
        let f = m.features(&mut t, x, &mut stream_rng(1, Stream::Dropout, 0)).unwrap();
        assert_eq!(t.shape(f), &[3, 64]);
        assert!(t.value(f).all_finite());
        let y = m.classify(&mut t, f).unwrap();
        assert_eq!(t.shape(y), &[3, 5]);
    }

    #[test]
    fn table1_layer_extents() {
        let mut m = Model::build(
            ArchitectureConfig::new(Variant::Table1, 10),
            &mut stream_rng(1, Stream::Init, 0),
        )
        .unwrap();
        m.eval();
        let mut rng = stream_rng(1, Stream::Dropout, 0);
        let mut t = Tape::new();
        let x = input(&mut t, 1, 0.5);
        // Stem and pooling.
        let w = m.p(&mut t, "conv1.weight").unwrap();
        let h = t.conv1d(x, w, 2, 3).unwrap();
        assert_eq!(t.shape(h), &[1, 64, 256]);
        let mut h = t.max_pool1d(h, 3, 1, 1).unwrap();
        assert_eq!(t.shape(h), &[1, 64, 256]);
        let expected = [(64, 128), (128, 64), (256, 32), (512, 16)];
        for (s, &(c, l)) in expected.iter().enumerate() {
            for blk in 0..BLOCKS_PER_STAGE {
                let stride = if blk == 0 { 2 } else { 1 };
                h = m.residual_block(&mut t, h, &block_name(s, blk), stride).unwrap();
            }
            assert_eq!(t.shape(h), &[1, c, l]);
        }
        let p = t.avg_pool_global(h).unwrap();
        assert_eq!(t.shape(p), &[1, 512]);

        let x = input(&mut t, 2, 0.0);
        let f = m.features(&mut t, x, &mut rng).unwrap();
        assert_eq!(t.shape(f), &[2, 256]);
        assert!(t.value(f).all_finite());
        let y = m.classify(&mut t, f).unwrap();
        assert_eq!(t.shape(y), &[2, 10]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ArchitectureConfig::new(Variant::Small, 3);
        let a = Model::build(cfg.clone(), &mut stream_rng(9, Stream::Init, 0)).unwrap();
        let b = Model::build(cfg.clone(), &mut stream_rng(9, Stream::Init, 0)).unwrap();
        let c = Model::build(cfg, &mut stream_rng(10, Stream::Init, 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn domains_share_parameter_nodes() {
        let m = Model::build(
            ArchitectureConfig::new(Variant::Small, 3),
            &mut stream_rng(2, Stream::Init, 0),
        )
        .unwrap();
        let mut rng = stream_rng(2, Stream::Dropout, 0);
        let mut t = Tape::new();
        let xs = input(&mut t, 2, 1.0);
        m.features(&mut t, xs, &mut rng).unwrap();
        let before: Vec<_> = m.store().names().map(|n| t.param_var(n)).collect();
        let xt = input(&mut t, 2, -1.0);
        m.features(&mut t, xt, &mut rng).unwrap();
        let after: Vec<_> = m.store().names().map(|n| t.param_var(n)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn residual_block_with_zero_convs_is_shortcut() {
        let mut m = Model::build(
            ArchitectureConfig::new(Variant::Table1, 2),
            &mut stream_rng(4, Stream::Init, 0),
        )
        .unwrap();
        for name in ["layer2.1.conv1.weight", "layer2.1.conv2.weight"] {
            m.store_mut().get_mut(name).unwrap().values_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..64 * 8).map(|i| (i % 7) as f64 * 0.25).collect();
        let x = t.constant(Tensor::new(vec![1, 64, 8], vals.clone()).unwrap());
        let y = m.residual_block(&mut t, x, "layer2.1", 1).unwrap();
        assert_eq!(t.value(y).values(), &vals[..]);
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut m = Model::build(
            ArchitectureConfig::new(Variant::Small, 4),
            &mut stream_rng(5, Stream::Init, 0),
        )
        .unwrap();
        for name in ["classifier.weight", "classifier.bias"] {
            m.store_mut().get_mut(name).unwrap().values_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let f = t.constant(Tensor::full(&[2, 64], 3.0));
        let y = m.classify(&mut t, f).unwrap();
        assert!(t.value(y).values().iter().all(|&v| v == 0.0));
        assert_eq!(argmax_rows(t.value(y)), vec![0, 0]);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let m = Model::build(
            ArchitectureConfig::new(Variant::Small, 2),
            &mut stream_rng(1, Stream::Init, 0),
        )
        .unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 100]));
        assert!(m.features(&mut t, x, &mut stream_rng(0, Stream::Dropout, 0)).is_err());
    }
}
