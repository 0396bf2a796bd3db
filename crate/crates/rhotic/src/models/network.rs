//! Architecture assembly: GRNN, CNN, and CNN-GRNN networks built from the
//! layer primitives, with a single sigmoid output unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{dropout_mask, sigmoid, Activation, Conv1d, GruLayer, GruStepCache, Linear};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Grnn,
    Cnn,
    CnnGrnn,
    RandomForest,
    SgdLinear,
}

impl ArchKind {
    pub fn parse(s: &str) -> Result<ArchKind> {
        match s.to_ascii_lowercase().as_str() {
            "grnn" => Ok(ArchKind::Grnn),
            "cnn" => Ok(ArchKind::Cnn),
            "cnn-grnn" | "cnngrnn" => Ok(ArchKind::CnnGrnn),
            "random-forest" | "forest" => Ok(ArchKind::RandomForest),
            "sgd-linear" | "sgd" => Ok(ArchKind::SgdLinear),
            other => Err(Error::Validation(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn is_neural(&self) -> bool {
        matches!(self, ArchKind::Grnn | ArchKind::Cnn | ArchKind::CnnGrnn)
    }
}

/// Width and shape constraints from the tuning space.
pub const RECURRENT_WIDTH_RANGE: (usize, usize) = (16, 1024);
pub const CONV_WIDTH_RANGE: (usize, usize) = (16, 1024);
pub const LINEAR_WIDTH_RANGE: (usize, usize) = (8, 1024);
pub const LAYER_COUNT_RANGE: (usize, usize) = (1, 4);
pub const DROPOUT_RANGE: (f64, f64) = (0.2, 0.5);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    #[serde(default)]
    pub recurrent_layers: usize,
    #[serde(default)]
    pub recurrent_width: usize,
    #[serde(default)]
    pub conv_layers: usize,
    #[serde(default)]
    pub conv_channels: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    pub linear_layers: usize,
    pub linear_width: usize,
    pub activation: Activation,
    pub dropout: f64,
}

fn default_kernel() -> usize {
    3
}

impl ArchitectureSpec {
    /// The best-performing shape: one 160-unit recurrent layer feeding four
    /// 191-unit ReLU linear layers with dropout.
    pub fn winning_grnn() -> ArchitectureSpec {
        ArchitectureSpec {
            kind: ArchKind::Grnn,
            recurrent_layers: 1,
            recurrent_width: 160,
            conv_layers: 0,
            conv_channels: 0,
            conv_kernel: 3,
            linear_layers: 4,
            linear_width: 191,
            activation: Activation::ReLU,
            dropout: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize, (lo, hi): (usize, usize)| {
            if v < lo || v > hi {
                Err(Error::Validation(format!(
                    "{name} {v} outside [{lo}, {hi}]"
                )))
            } else {
                Ok(())
            }
        };
        if self.kind.is_neural() {
            check("linear_layers", self.linear_layers, LAYER_COUNT_RANGE)?;
            check("linear_width", self.linear_width, LINEAR_WIDTH_RANGE)?;
            if !(DROPOUT_RANGE.0..=DROPOUT_RANGE.1).contains(&self.dropout) {
                return Err(Error::Validation(format!(
                    "dropout {} outside [{}, {}]",
                    self.dropout, DROPOUT_RANGE.0, DROPOUT_RANGE.1
                )));
            }
        }
        match self.kind {
            ArchKind::Grnn => {
                check("recurrent_layers", self.recurrent_layers, LAYER_COUNT_RANGE)?;
                check("recurrent_width", self.recurrent_width, RECURRENT_WIDTH_RANGE)?;
            }
            ArchKind::Cnn => {
                check("conv_layers", self.conv_layers, LAYER_COUNT_RANGE)?;
                check("conv_channels", self.conv_channels, CONV_WIDTH_RANGE)?;
            }
            ArchKind::CnnGrnn => {
                check("recurrent_layers", self.recurrent_layers, LAYER_COUNT_RANGE)?;
                check("recurrent_width", self.recurrent_width, RECURRENT_WIDTH_RANGE)?;
                check("conv_layers", self.conv_layers, LAYER_COUNT_RANGE)?;
                check("conv_channels", self.conv_channels, CONV_WIDTH_RANGE)?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// A fully assembled neural classifier.
#[derive(Debug, Clone)]
pub struct Network {
    pub kind: ArchKind,
    pub conv: Vec<Conv1d>,
    pub gru: Vec<GruLayer>,
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub activation: Activation,
    pub dropout: f64,
    pub input_steps: usize,
    pub input_features: usize,
}

/// Everything saved during a training forward pass.
pub struct ForwardCache {
    conv_inputs: Vec<Vec<Vec<f64>>>,
    conv_pre: Vec<Vec<Vec<f64>>>,
    conv_post: Vec<Vec<Vec<f64>>>,
    gru_inputs: Vec<Vec<Vec<f64>>>,
    gru_caches: Vec<Vec<GruStepCache>>,
    pooled_len: usize,
    head_input: Vec<f64>,
    hidden_in: Vec<Vec<f64>>,
    hidden_pre: Vec<Vec<f64>>,
    hidden_post: Vec<Vec<f64>>,
    dropout_masks: Vec<Vec<f64>>,
    pub logit: f64,
}

impl Network {
    pub fn build(
        spec: &ArchitectureSpec,
        input_steps: usize,
        input_features: usize,
        seed: u64,
    ) -> Result<Network> {
        spec.validate()?;
        if !spec.kind.is_neural() {
            return Err(Error::Validation(format!(
                "{:?} is not a neural architecture",
                spec.kind
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut conv = Vec::new();
        let mut width = input_features;
        let mut steps = input_steps;
        if matches!(spec.kind, ArchKind::Cnn | ArchKind::CnnGrnn) {
            for i in 0..spec.conv_layers {
                // Clamp the kernel so the sequence never vanishes.
                let kernel = spec.conv_kernel.min(steps);
                conv.push(Conv1d::new(
                    &format!("conv{i}"),
                    spec.conv_channels,
                    width,
                    kernel,
                    &mut rng,
                ));
                steps = steps + 1 - kernel;
                width = spec.conv_channels;
            }
        }

        let mut gru = Vec::new();
        if matches!(spec.kind, ArchKind::Grnn | ArchKind::CnnGrnn) {
            for i in 0..spec.recurrent_layers {
                gru.push(GruLayer::new(
                    &format!("gru{i}"),
                    spec.recurrent_width,
                    width,
                    &mut rng,
                ));
                width = spec.recurrent_width;
            }
        }

        let mut hidden = Vec::new();
        for i in 0..spec.linear_layers {
            hidden.push(Linear::new(
                &format!("linear{i}"),
                spec.linear_width,
                width,
                &mut rng,
            ));
            width = spec.linear_width;
        }
        let out = Linear::new("out", 1, width, &mut rng);

        Ok(Network {
            kind: spec.kind,
            conv,
            gru,
            hidden,
            out,
            activation: spec.activation,
            dropout: spec.dropout,
            input_steps,
            input_features,
        })
    }

    /// Inference: dropout disabled, no state kept across calls.
    pub fn predict(&self, steps: &[Vec<f64>]) -> Result<f64> {
        Ok(sigmoid(self.logit(steps)?))
    }

    /// Raw pre-sigmoid output at inference.
    pub fn logit(&self, steps: &[Vec<f64>]) -> Result<f64> {
        Ok(self.forward_inner(steps, None)?.logit)
    }

    /// Training-mode forward pass with caches and seeded dropout.
    pub fn forward_train(
        &self,
        steps: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardCache> {
        self.forward_inner(steps, Some(rng))
    }

    fn forward_inner(
        &self,
        steps: &[Vec<f64>],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        if steps.len() != self.input_steps
            || steps.iter().any(|r| r.len() != self.input_features)
        {
            return Err(Error::Shape(format!(
                "expected {} steps x {} features, got {} x {}",
                self.input_steps,
                self.input_features,
                steps.len(),
                steps.first().map(|r| r.len()).unwrap_or(0)
            )));
        }

        let mut cache = ForwardCache {
            conv_inputs: Vec::new(),
            conv_pre: Vec::new(),
            conv_post: Vec::new(),
            gru_inputs: Vec::new(),
            gru_caches: Vec::new(),
            pooled_len: 0,
            head_input: Vec::new(),
            hidden_in: Vec::new(),
            hidden_pre: Vec::new(),
            hidden_post: Vec::new(),
            dropout_masks: Vec::new(),
            logit: 0.0,
        };

        let mut seq: Vec<Vec<f64>> = steps.to_vec();
        for conv in &self.conv {
            cache.conv_inputs.push(seq.clone());
            let pre = conv.forward(&seq);
            cache.conv_pre.push(pre.clone());
            let post: Vec<Vec<f64>> = pre.iter().map(|row| self.activation.apply(row)).collect();
            cache.conv_post.push(post.clone());
            seq = post;
        }

        let head_input: Vec<f64> = match self.kind {
            ArchKind::Cnn => {
                // Global average pool over the remaining steps.
                cache.pooled_len = seq.len();
                let width = seq[0].len();
                let mut pooled = vec![0.0; width];
                for row in &seq {
                    for (p, v) in pooled.iter_mut().zip(row) {
                        *p += v;
                    }
                }
                pooled.iter_mut().for_each(|p| *p /= seq.len() as f64);
                pooled
            }
            _ => {
                for gru in &self.gru {
                    cache.gru_inputs.push(seq.clone());
                    let (hs, step_caches) = gru.forward_seq(&seq);
                    cache.gru_caches.push(step_caches);
                    seq = hs;
                }
                seq.last()
                    .cloned()
                    .ok_or_else(|| Error::Shape("empty sequence after front-end".into()))?
            }
        };
        cache.head_input = head_input.clone();

        let mut x = head_input;
        for linear in &self.hidden {
            cache.hidden_in.push(x.clone());
            let pre = linear.forward(&x);
            cache.hidden_pre.push(pre.clone());
            let mut post = self.activation.apply(&pre);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) => dropout_mask(post.len(), self.dropout, rng),
                None => vec![1.0; post.len()],
            };
            post.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            cache.dropout_masks.push(mask);
            cache.hidden_post.push(post.clone());
            x = post;
        }
        cache.logit = self.out.forward(&x)[0];
        Ok(cache)
    }

    /// Backward pass from dL/dlogit; accumulates parameter gradients.
    pub fn backward(&mut self, cache: &ForwardCache, dlogit: f64) {
        let head_post = cache
            .hidden_post
            .last()
            .unwrap_or(&cache.head_input)
            .clone();
        let mut dx = self.out.backward(&head_post, &[dlogit]);

        for i in (0..self.hidden.len()).rev() {
            let mut dpost = dx;
            for (v, m) in dpost.iter_mut().zip(&cache.dropout_masks[i]) {
                *v *= m;
            }
            // Undo the dropout scaling on the saved post-activation to get
            // the raw activation output for the derivative.
            let raw_post: Vec<f64> = cache.hidden_post[i]
                .iter()
                .zip(&cache.dropout_masks[i])
                .map(|(v, m)| if *m > 0.0 { v / m } else { 0.0 })
                .collect();
            let dpre = self
                .activation
                .backward(&cache.hidden_pre[i], &raw_post, &dpost);
            dx = self.hidden[i].backward(&cache.hidden_in[i], &dpre);
        }

        match self.kind {
            ArchKind::Cnn => {
                let t = cache.pooled_len.max(1);
                let mut dseq = vec![dx.iter().map(|v| v / t as f64).collect::<Vec<f64>>(); t];
                for i in (0..self.conv.len()).rev() {
                    let dpost = dseq;
                    let dpre: Vec<Vec<f64>> = cache.conv_pre[i]
                        .iter()
                        .zip(&cache.conv_post[i])
                        .zip(&dpost)
                        .map(|((pre, post), dy)| self.activation.backward(pre, post, dy))
                        .collect();
                    dseq = self.conv[i].backward(&cache.conv_inputs[i], &dpre);
                }
            }
            _ => {
                // Gradient flows into the last step of the top GRU layer.
                let mut dhs: Vec<Vec<f64>> = Vec::new();
                let n_gru = self.gru.len();
                for li in (0..n_gru).rev() {
                    let steps = cache.gru_caches[li].len();
                    let dh_all = if li == n_gru - 1 {
                        let mut d = vec![vec![0.0; self.gru[li].hidden]; steps];
                        *d.last_mut().unwrap() = dx.clone();
                        d
                    } else {
                        dhs.clone()
                    };
                    dhs = self.gru[li].backward_seq(&cache.gru_caches[li], &dh_all);
                }
                if !self.conv.is_empty() {
                    let mut dseq = dhs;
                    for i in (0..self.conv.len()).rev() {
                        let dpost = dseq;
                        let dpre: Vec<Vec<f64>> = cache.conv_pre[i]
                            .iter()
                            .zip(&cache.conv_post[i])
                            .zip(&dpost)
                            .map(|((pre, post), dy)| self.activation.backward(pre, post, dy))
                            .collect();
                        dseq = self.conv[i].backward(&cache.conv_inputs[i], &dpre);
                    }
                }
            }
        }
    }

    /// Parameters grouped by layer, in topological order. The grouping is
    /// what "freeze all but the last two layers" counts.
    pub fn layer_params(&self) -> Vec<Vec<&super::layers::Param>> {
        let mut layers: Vec<Vec<&super::layers::Param>> = Vec::new();
        for c in &self.conv {
            layers.push(vec![&c.w, &c.b]);
        }
        for g in &self.gru {
            layers.push(g.params().to_vec());
        }
        for h in &self.hidden {
            layers.push(vec![&h.w, &h.b]);
        }
        layers.push(vec![&self.out.w, &self.out.b]);
        layers
    }

    pub fn layer_params_mut(&mut self) -> Vec<Vec<&mut super::layers::Param>> {
        let mut layers: Vec<Vec<&mut super::layers::Param>> = Vec::new();
        for c in &mut self.conv {
            layers.push(vec![&mut c.w, &mut c.b]);
        }
        for g in &mut self.gru {
            layers.push(g.params_mut().into());
        }
        for h in &mut self.hidden {
            layers.push(vec![&mut h.w, &mut h.b]);
        }
        layers.push(vec![&mut self.out.w, &mut self.out.b]);
        layers
    }

    /// Flat parameter list in canonical (serialization) order.
    pub fn params(&self) -> Vec<&super::layers::Param> {
        self.layer_params().into_iter().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut super::layers::Param> {
        self.layer_params_mut().into_iter().flatten().collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
