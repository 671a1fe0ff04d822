//! Flat parameter storage with named, shaped views.

use rand::Rng;
use rand_distr::StandardNormal;

use super::scalar::Scalar;

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside two standard deviations.
    TruncNormal(f64),
}

/// Which weight-decay coefficient applies to a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayGroup {
    None,
    Transformer,
    QHead,
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
    pub decay: DecayGroup,
}

#[derive(Debug, Clone, Default)]
pub struct Layout {
    pub infos: Vec<ParamInfo>,
    pub total: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: DecayGroup) -> ParamId {
        let len = shape.iter().product();
        self.infos.push(ParamInfo {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
            init,
            decay,
        });
        self.total += len;
        self.infos.len() - 1
    }

    #[inline]
    pub fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let i = &self.infos[id];
        i.offset..i.offset + i.len
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<F> {
        let mut data = vec![F::zero(); self.total];
        for info in &self.infos {
            let slot = &mut data[info.offset..info.offset + info.len];
            match info.init {
                Init::Zeros => {}
                Init::Ones => slot.fill(F::one()),
                Init::TruncNormal(std) => {
                    for v in slot.iter_mut() {
                        let z = loop {
                            let z: f64 = rng.sample(StandardNormal);
                            if z.abs() <= 2.0 {
                                break z;
                            }
                        };
                        *v = F::of(z * std);
                    }
                }
            }
        }
        data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name)
    }
}
