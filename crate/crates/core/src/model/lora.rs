use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tokens::{Domain, TokenLayout};
use crate::error::Result;
use crate::numerics::{Bound, Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Low-rank delta `x * down * up`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
}

/// A linear projection with optional Reference- and Domain-LoRA adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub reference: Option<LoraAdapter>,
    pub domain: Option<LoraAdapter>,
    /// `alpha / rank`.
    pub scale: f64,
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: [usize; 2], std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| n.sample(rng) as f32)
}

impl Projection {
    /// Register `name.weight` `[d_in, d_out]`, `name.bias` and the adapters
    /// (`name.lora_ref.*`, `name.lora_dom.*`) in `store`. Up matrices start
    /// at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        reference: bool,
        domain: bool,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, [d_in, d_out], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d_out]));
        let mut adapter = |store: &mut ParamStore, tag: &str| LoraAdapter {
            down: store.add(format!("{name}.{tag}.down"), normal_tensor(rng, [d_in, rank], std)),
            up: store.add(format!("{name}.{tag}.up"), Tensor::zeros([rank, d_out])),
        };
        let reference = reference.then(|| adapter(store, "lora_ref"));
        let domain = domain.then(|| adapter(store, "lora_dom"));
        Self {
            name: name.to_string(),
            weight,
            bias,
            reference,
            domain,
            scale: alpha / rank as f64,
        }
    }
}

/// Token rows each adapter acts on.
#[derive(Clone, Debug, PartialEq)]
pub struct Routes {
    /// Condition image tokens (both domains).
    pub reference: Rc<[usize]>,
    /// Pointmap tokens (target and condition).
    pub domain: Rc<[usize]>,
}

impl Routes {
    pub fn from_layout(layout: &TokenLayout) -> Self {
        Self {
            reference: layout.indices(|r| r.is_condition_image()).into(),
            domain: layout.indices(|r| r.domain == Domain::Pointmap).into(),
        }
    }
}

fn add_delta<E: Element>(
    tape: &mut Tape<E>,
    bound: &Bound,
    out: Var,
    x: Var,
    adapter: &LoraAdapter,
    rows: &Rc<[usize]>,
    scale: f64,
) -> Result<Var> {
    if rows.is_empty() {
        return Ok(out);
    }
    let xs = tape.gather_rows(x, rows.clone())?;
    let down = tape.matmul(xs, bound[adapter.down])?;
    let mut delta = tape.matmul(down, bound[adapter.up])?;
    if scale != 1.0 {
        delta = tape.scale(delta, scale)?;
    }
    tape.index_add_rows(out, delta, rows.clone())
}

/// `base(x)` plus Reference-LoRA on condition image rows and Domain-LoRA on
/// pointmap rows.
pub fn route_lora<E: Element>(
    tape: &mut Tape<E>,
    bound: &Bound,
    proj: &Projection,
    x: Var,
    routes: &Routes,
) -> Result<Var> {
    let mut out = tape.linear(x, bound[proj.weight], Some(bound[proj.bias]))?;
    if let Some(a) = &proj.reference {
        out = add_delta(tape, bound, out, x, a, &routes.reference, proj.scale)?;
    }
    if let Some(a) = &proj.domain {
        out = add_delta(tape, bound, out, x, a, &routes.domain, proj.scale)?;
    }
    Ok(out)
}
