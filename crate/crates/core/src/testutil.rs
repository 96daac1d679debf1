//! Helpers shared by unit tests.

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Ctx, Init, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape, |_| r.range(-1.0, 1.0))
}

/// `sum(y ⊙ R)` for a fixed random `R`.
pub fn probe_loss(cx: &mut Ctx<'_>, y: Var) -> Result<Var> {
    let r = rand_tensor(cx.tape.shape(y), 991);
    let r = cx.input(r);
    let p = cx.tape.mul(y, r)?;
    cx.tape.sum(p)
}

/// Build a module into a fresh store.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let m = {
        let mut init = Init::new(&mut store, &mut rng);
        f(&mut init)
    };
    (store, m)
}

/// Overwrite every parameter whose name starts with `prefix` by `f(name, shape)`.
pub fn set_params(store: &mut ParamStore, prefix: &str, mut f: impl FnMut(&str, &[usize]) -> Tensor) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.starts_with(prefix) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = f(&name, &shape);
        }
    }
}
