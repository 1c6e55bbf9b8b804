use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffarray::{uniform_fan_in, DiffArray, ParamSet, RunningStats};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::network::{ConvLayer, SkeletonGraph};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Batch-norm running statistics keyed by layer prefix.
pub type BnStats<S> = IndexMap<String, RunningStats<S>>;

/// Trainable parameters plus the non-trainable normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub params: ParamSet<S>,
    pub stats: BnStats<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            params: self.params.cast(),
            stats: self
                .stats
                .iter()
                .map(|(k, v)| {
                    let conv = |xs: &[S]| xs.iter().map(|x| T::from_f64(x.as_f64())).collect();
                    (k.clone(), RunningStats { mean: conv(&v.mean), var: conv(&v.var) })
                })
                .collect(),
        }
    }

    /// Every parameter value, for bit-exact comparisons.
    pub fn values_bits(&self) -> Vec<u64> {
        self.params
            .iter()
            .flat_map(|(_, a)| a.data().iter().map(|v| v.as_f64().to_bits()).collect::<Vec<_>>())
            .collect()
    }
}

impl SkeletonGraph {
    /// Uniform `±1/sqrt(fan_in)` conv weights and biases, unit gamma, zero beta, PReLU slope 0.25.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> ModelParams<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut stats = BnStats::new();
        for layer in self.layers() {
            let fan_in = layer.cin * layer.k * layer.k;
            let put = |ps: &mut ParamSet<S>, name: String, a: DiffArray<S>| ps.insert(name, a).expect("unique layer names");
            put(&mut params, layer.weight_name(), uniform_fan_in(&[layer.cout, layer.cin, layer.k, layer.k], fan_in, &mut rng));
            put(&mut params, layer.bias_name(), uniform_fan_in(&[layer.cout], fan_in, &mut rng));
            if layer.bn {
                put(&mut params, layer.gamma_name(), DiffArray::full(&[layer.cout], S::one()));
                put(&mut params, layer.beta_name(), DiffArray::zeros(&[layer.cout]));
                stats.insert(layer.prefix.clone(), RunningStats::new(layer.cout));
            }
            if layer.act {
                put(&mut params, layer.slope_name(), DiffArray::scalar(S::from_f64(PRELU_INIT)));
            }
        }
        ModelParams { params, stats }
    }

    /// Deterministic preset that makes every block linear: delta kernels that copy
    /// channel `c` to channel `c`, zero biases, unit PReLU slopes.
    ///
    /// Only defined without batch normalization.
    pub fn identity_preset<S: Scalar>(&self) -> Result<ModelParams<S>> {
        if self.config().batch_norm {
            return Err(Error::param("identity preset requires batch_norm = false"));
        }
        let mut out = self.init_params::<S>(0);
        for layer in self.layers() {
            let w = out.params.get_mut(&layer.weight_name()).expect("weight exists");
            w.data_mut().iter_mut().for_each(|v| *v = S::zero());
            let centre = layer.k / 2;
            for c in 0..layer.cin.min(layer.cout) {
                w.set(&[c, c, centre, centre], S::one());
            }
            out.params
                .get_mut(&layer.bias_name())
                .expect("bias exists")
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = S::zero());
            if layer.act {
                out.params.get_mut(&layer.slope_name()).expect("slope exists").data_mut()[0] = S::one();
            }
        }
        Ok(out)
    }

    /// Checks that `params` has exactly the names and shapes this configuration needs.
    pub fn check_params<S: Scalar>(&self, params: &ModelParams<S>) -> Result<()> {
        let reference = self.init_params::<S>(0);
        if reference.params.len() != params.params.len() {
            return Err(Error::dim(format!(
                "parameter count mismatch: model needs {}, got {}",
                reference.params.len(),
                params.params.len()
            )));
        }
        for (name, expected) in reference.params.iter() {
            let got = params
                .params
                .get(name)
                .ok_or_else(|| Error::dim(format!("missing parameter `{name}`")))?;
            if got.shape() != expected.shape() {
                return Err(Error::dim(format!(
                    "parameter `{name}` has shape {:?}, model needs {:?}",
                    got.shape(),
                    expected.shape()
                )));
            }
        }
        for (name, expected) in &reference.stats {
            match params.stats.get(name) {
                Some(s) if s.channels() == expected.channels() => {}
                _ => return Err(Error::dim(format!("running statistics `{name}` missing or mis-sized"))),
            }
        }
        Ok(())
    }
}

impl ConvLayer {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }
    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }
    pub fn gamma_name(&self) -> String {
        format!("{}.bn.gamma", self.prefix)
    }
    pub fn beta_name(&self) -> String {
        format!("{}.bn.beta", self.prefix)
    }
    pub fn slope_name(&self) -> String {
        format!("{}.prelu", self.prefix)
    }
}
