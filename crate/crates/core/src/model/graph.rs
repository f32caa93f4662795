use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::arch::{Architecture, Init, Layer, LayerKind, Stage};
use super::config::{ModelConfig, Variant};
use crate::error::{TensorError, VtError};
use crate::tensor::{BnStats, Scalar, Tensor};

/// A model: layer structure, named parameters and batch-norm running stats.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Scalar> {
    arch: Architecture,
    params: IndexMap<String, Arc<Tensor<T>>>,
    stages: IndexMap<String, Stage>,
    bn: IndexMap<String, BnStats<T>>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Build and initialise a model from its config.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, VtError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(config, |shape, init| {
            let n = shape.iter().product::<usize>();
            let data: Vec<T> = match init {
                Init::Const(v) => vec![T::of(v); n],
                Init::KaimingOut => {
                    let fan_out = shape[0] * shape[2..].iter().product::<usize>();
                    let std = (2.0 / fan_out as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::of(z * std)
                        })
                        .collect()
                }
                Init::Uniform { fan_in } => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
            };
            Tensor::new(shape.to_vec(), data).expect("spec shape")
        })
    }

    /// Same structure as [`ModelGraph::build`] with every parameter zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self, VtError> {
        Self::assemble(config, |shape, _| Tensor::zeros(shape))
    }

    fn assemble(config: &ModelConfig, mut make: impl FnMut(&[usize], Init) -> Tensor<T>) -> Result<Self, VtError> {
        let arch = Architecture::new(config)?;
        let mut params = IndexMap::new();
        let mut stages = IndexMap::new();
        for (stage, spec) in arch.param_specs() {
            params.insert(spec.name.clone(), Arc::new(make(&spec.shape, spec.init)));
            stages.insert(spec.name, stage);
        }
        let bn = arch.batch_norms().into_iter().map(|(n, c)| (n, BnStats::new(c))).collect();
        Ok(ModelGraph { arch, params, stages, bn })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.arch.layers
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k, v.as_ref()))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(Arc::as_ref)
    }

    pub(crate) fn param_arc(&self, name: &str) -> Result<Arc<Tensor<T>>, TensorError> {
        self.params.get(name).cloned().ok_or_else(|| TensorError::ParamNotOnTape(name.to_string()))
    }

    /// Mutable access; copies the tensor if a tape still shares it.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    /// Replace a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), VtError> {
        let slot = self.params.get_mut(name).ok_or_else(|| VtError::Config(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(VtError::Tensor(TensorError::shape(
                "set_param",
                format!("{name}: expected {:?}, got {:?}", slot.shape(), value.shape()),
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn stage_of(&self, name: &str) -> Option<Stage> {
        self.stages.get(name).copied()
    }

    pub fn bn_stats(&self) -> impl Iterator<Item = (&String, &BnStats<T>)> {
        self.bn.iter()
    }

    pub fn bn(&self, name: &str) -> Option<&BnStats<T>> {
        self.bn.get(name)
    }

    pub fn bn_mut(&mut self, name: &str) -> Option<&mut BnStats<T>> {
        self.bn.get_mut(name)
    }

    pub fn num_params(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    /// True when some layer exposes a spatial attention map.
    pub fn has_attention(&self) -> bool {
        self.layers().iter().any(|l| match &l.kind {
            LayerKind::Vt(cfg) => cfg.tokenizer.emits_attention(),
            LayerKind::Fpn(_) => true,
            _ => false,
        })
    }

    pub fn is_classifier(&self) -> bool {
        self.config().variant != Variant::Fpn
    }
}
